#include "vqr/features.hpp"

#include <cmath>
#include <fstream>
#include <json.hpp>

#include "vqr/rng.hpp"

namespace vqr::features {

using nlohmann::json;

const char* kind_name(FeatureKind kind) { return kind == FeatureKind::Grid ? "grid" : "pooled"; }

FeatureKind parse_kind(const std::string& name) {
  if (name == "grid") return FeatureKind::Grid;
  if (name == "pooled") return FeatureKind::Pooled;
  throw FeatureError("unknown feature kind '" + name + "'");
}

const std::vector<float>* FeatureSet::find(const std::string& ref) const {
  auto it = entries.find(ref);
  return it == entries.end() ? nullptr : &it->second;
}

const std::vector<float>& FeatureSet::at(const std::string& ref) const {
  if (const auto* v = find(ref)) return *v;
  throw FeatureError("no feature for key '" + ref + "'");
}

FeatureSet load_features(const std::string& path, FeatureKind kind,
                         std::optional<std::size_t> pooled_dim) {
  std::ifstream in(path);
  if (!in) throw FeatureError("cannot open feature file '" + path + "'");

  FeatureSet set;
  set.kind = kind;
  if (kind == FeatureKind::Grid) {
    set.rows = kGridRows;
    set.cols = kGridCols;
  } else {
    set.rows = 1;
    set.cols = pooled_dim.value_or(0);
  }
  bool header_seen = false;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::parse_error& e) {
      throw FeatureError(path + ":" + std::to_string(line_no) + ": malformed JSON: " + e.what());
    }
    if (j.contains("kind")) {
      if (header_seen || !set.entries.empty()) {
        throw FeatureError(path + ":" + std::to_string(line_no) + ": header must be the first line");
      }
      header_seen = true;
      const auto file_kind = parse_kind(j.at("kind").get<std::string>());
      if (file_kind != kind) {
        throw FeatureError(path + ": file holds " + kind_name(file_kind) + " features, expected " +
                           kind_name(kind));
      }
      const auto rows = j.value("rows", std::size_t{1});
      const auto cols = j.value("cols", std::size_t{0});
      if (kind == FeatureKind::Grid && (rows != kGridRows || cols != kGridCols)) {
        throw FeatureError(path + ": grid header declares " + std::to_string(rows) + "x" +
                           std::to_string(cols) + ", expected 49x2048");
      }
      if (kind == FeatureKind::Pooled) {
        if (rows != 1 || cols == 0) throw FeatureError(path + ": pooled header needs rows=1, cols>0");
        if (pooled_dim && *pooled_dim != cols) {
          throw FeatureError(path + ": pooled width " + std::to_string(cols) + " but model expects " +
                             std::to_string(*pooled_dim));
        }
        set.cols = cols;
      }
      continue;
    }
    if (kind == FeatureKind::Grid && !header_seen) {
      throw FeatureError(path + ": grid feature file is missing its header line");
    }
    const auto ref = j.at("feature_ref").get<std::string>();
    auto values = j.at("values").get<std::vector<float>>();
    if (set.cols == 0) set.cols = values.size();
    if (values.size() != set.rows * set.cols) {
      throw FeatureError("feature '" + ref + "' has " + std::to_string(values.size()) +
                         " values, expected " + std::to_string(set.rows) + "x" +
                         std::to_string(set.cols));
    }
    for (float v : values) {
      if (!std::isfinite(v)) throw FeatureError("feature '" + ref + "' has a non-finite value");
    }
    if (!set.entries.emplace(ref, std::move(values)).second) {
      throw FeatureError("feature '" + ref + "' appears twice");
    }
  }
  if (set.cols == 0) set.cols = kDefaultPooledDim;
  return set;
}

void save_features(const std::string& path, const FeatureSet& set) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FeatureError("cannot write feature file '" + path + "'");
  json header = json::object();
  header["kind"] = kind_name(set.kind);
  header["rows"] = set.rows;
  header["cols"] = set.cols;
  out << header.dump() << '\n';
  for (const auto& [ref, values] : set.entries) {
    json j = json::object();
    j["feature_ref"] = ref;
    j["values"] = values;
    out << j.dump() << '\n';
  }
  if (!out) throw FeatureError("failed writing feature file '" + path + "'");
}

std::vector<float> pseudo_features(const std::string& feature_ref, std::size_t dim,
                                   std::uint64_t seed) {
  if (dim == 0) throw std::invalid_argument("pseudo_features: dim must be positive");
  Rng rng(mix_seed(fnv1a(feature_ref), seed));
  std::vector<double> raw(dim);
  double norm = 0.0;
  for (auto& v : raw) {
    v = rng.normal();
    norm += v * v;
  }
  norm = std::sqrt(norm);
  std::vector<float> out(dim);
  for (std::size_t i = 0; i < dim; ++i) out[i] = static_cast<float>(raw[i] / norm);
  return out;
}

ad::NodeId project_feature(ad::Graph& g, ad::NodeId v, ad::NodeId weight, ad::NodeId bias) {
  const auto vs = g.shape(v);
  const auto ws = g.shape(weight);
  if (ws.size() != 2 || vs.empty() || vs.back() != ws[0] || vs.size() > 2) {
    throw ad::ShapeError("project_feature: feature " + ad::shape_str(vs) + " vs weight " +
                         ad::shape_str(ws));
  }
  if (g.shape(bias) != ad::Shape{ws[1]}) {
    throw ad::ShapeError("project_feature: bias " + ad::shape_str(g.shape(bias)) + " vs weight " +
                         ad::shape_str(ws));
  }
  if (vs.size() == 1) {
    const auto row = g.reshape(v, {1, vs[0]});
    return g.reshape(g.add(g.matmul(row, weight), bias), {ws[1]});
  }
  return g.add(g.matmul(v, weight), bias);
}

}  // namespace vqr::features
