#pragma once

// Side features standing in for CNN image features: a 49x2048 grid map per
// image, or a single pooled vector ("before softmax" classifier output).

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "vqr/autodiff.hpp"

namespace vqr::features {

inline constexpr std::size_t kGridRows = 49;
inline constexpr std::size_t kGridCols = 2048;
inline constexpr std::size_t kDefaultPooledDim = 1000;

enum class FeatureKind { Grid, Pooled };

const char* kind_name(FeatureKind kind);
FeatureKind parse_kind(const std::string& name);

struct FeatureSet {
  FeatureKind kind = FeatureKind::Pooled;
  std::size_t rows = 1;
  std::size_t cols = kDefaultPooledDim;
  std::map<std::string, std::vector<float>> entries;  // flat row-major rows x cols

  std::size_t size() const { return entries.size(); }
  const std::vector<float>* find(const std::string& ref) const;
  // Throws naming the missing key.
  const std::vector<float>& at(const std::string& ref) const;
};

class FeatureError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Grid files must carry a header {"kind":"grid","rows":49,"cols":2048}.
// Pooled files may carry {"kind":"pooled","cols":D}; without one, the
// expected width is `pooled_dim` when given, else the first record's length.
FeatureSet load_features(const std::string& path, FeatureKind kind,
                         std::optional<std::size_t> pooled_dim = std::nullopt);

void save_features(const std::string& path, const FeatureSet& set);

// Deterministic unit-norm pseudo-random vector keyed by (ref, dim, seed).
std::vector<float> pseudo_features(const std::string& feature_ref, std::size_t dim,
                                   std::uint64_t seed);

// v * W + b. `v` is [D] or [B, D]; W is [D, H]; b is [H].
ad::NodeId project_feature(ad::Graph& g, ad::NodeId v, ad::NodeId weight, ad::NodeId bias);

}  // namespace vqr::features
