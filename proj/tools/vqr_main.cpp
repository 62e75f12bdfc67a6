// vqr: dataset preparation, training, generation and scoring for visual
// question rewriting models.

#include <algorithm>
#include <chrono>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "vqr/features.hpp"
#include "vqr/grad_suite.hpp"
#include "vqr/metrics.hpp"
#include "vqr/text.hpp"
#include "vqr/training.hpp"

namespace {

using nlohmann::json;
using nlohmann::ordered_json;
namespace fs = std::filesystem;
using namespace vqr;

constexpr int kExitFailure = 1;
constexpr int kExitUsage = 2;
constexpr int kExitDiverged = 3;

class MissingInput : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

void require_input(const std::string& path, const char* what) {
  if (path.empty()) throw UsageError(std::string("missing --") + what);
  if (!fs::exists(path)) throw MissingInput(std::string(what) + " file not found: " + path);
}

struct Globals {
  std::string config_path;
  std::uint64_t seed = 0;
  std::string model = "transformer";
  std::string features;
  std::string feature_kind;  // empty: chosen by model kind
  std::string mode = "greedy";
  std::size_t beam_width = 1;
};

features::FeatureKind feature_kind_for(const Globals& g, model::ModelKind kind) {
  if (!g.feature_kind.empty()) return features::parse_kind(g.feature_kind);
  return kind == model::ModelKind::BaselineVis ? features::FeatureKind::Grid : features::FeatureKind::Pooled;
}

std::optional<features::FeatureSet> load_features_for(const Globals& g, model::ModelKind kind) {
  if (!model::uses_features(kind)) return std::nullopt;
  if (g.features.empty()) throw UsageError(std::string("model ") + model::kind_name(kind) + " needs --features");
  require_input(g.features, "features");
  return features::load_features(g.features, feature_kind_for(g, kind));
}

decoding::DecodeOptions decode_options(const Globals& g) {
  decoding::DecodeOptions o;
  o.mode = decoding::parse_mode(g.mode);
  o.beam_width = g.beam_width;
  if (o.mode == decoding::Mode::Greedy) o.beam_width = 1;
  return o;
}

std::string value_string(const json& v) {
  if (v.is_string()) return v.get<std::string>();
  return v.dump();
}

// Applies a flat JSON config to options not given on the command line.
// Keys are flag names with '_' in place of '-'.
void apply_config(CLI::App& app, CLI::App* sub, const std::string& path) {
  require_input(path, "config");
  std::ifstream in(path);
  json cfg;
  try {
    cfg = json::parse(in);
  } catch (const json::exception& e) {
    throw UsageError("config " + path + ": " + e.what());
  }
  if (!cfg.is_object()) throw UsageError("config " + path + ": expected a JSON object");
  for (const auto& [key, value] : cfg.items()) {
    std::string flag = key;
    std::replace(flag.begin(), flag.end(), '_', '-');
    flag = "--" + flag;
    CLI::Option* opt = sub ? sub->get_option_no_throw(flag) : nullptr;
    if (!opt) opt = app.get_option_no_throw(flag);
    if (!opt || flag == "--config") throw UsageError("config " + path + ": unknown key '" + key + "'");
    if (opt->count() > 0) continue;  // command line wins
    opt->add_result(value_string(value));
    opt->run_callback();
  }
}

struct Summary {
  ordered_json j;
  explicit Summary(const std::string& command, std::uint64_t seed) {
    j["command"] = command;
    j["seed"] = seed;
  }
};

// ---- commands ----

struct BuildVocabArgs {
  std::string in, out;
  std::size_t cap = text::kDefaultVocabCap;
};

void run_build_vocab(const BuildVocabArgs& a, Summary& s) {
  require_input(a.in, "in");
  if (a.out.empty()) throw UsageError("missing --out");
  const auto triples = text::read_triples(a.in);
  std::vector<std::string> corpus;
  for (const auto& t : triples) {
    corpus.push_back(t.bland);
    corpus.push_back(t.attractive);
  }
  const auto vocab = text::build_vocab(corpus, a.cap);
  std::ofstream(a.out) << text::vocab_to_json(vocab) << '\n';
  s.j["vocab_size"] = vocab.size();
  s.j["out"] = a.out;
}

struct ConstructArgs {
  std::string in, out;
};

void run_construct(const ConstructArgs& a, Summary& s) {
  require_input(a.in, "in");
  if (a.out.empty()) throw UsageError("missing --out");
  const auto r = text::construct_triples(text::read_raw_qa(a.in));
  text::write_triples(a.out, r.triples);
  s.j["triples"] = r.triples.size();
  s.j["dropped"] = r.dropped;
  s.j["out"] = a.out;
}

struct SplitArgs {
  std::string in, train, test;
};

void run_split(const SplitArgs& a, std::uint64_t seed, Summary& s) {
  require_input(a.in, "in");
  if (a.train.empty() || a.test.empty()) throw UsageError("split needs --train and --test outputs");
  const auto sp = text::split(text::read_triples(a.in), seed);
  text::write_triples(a.train, sp.train);
  text::write_triples(a.test, sp.test);
  s.j["train"] = sp.train.size();
  s.j["test"] = sp.test.size();
}

struct SynthArgs {
  std::size_t n = 2000, k = 8, feature_dim = text::kDefaultSynthFeatureDim;
  std::string out, features_out;
};

void run_synth(const SynthArgs& a, std::uint64_t seed, Summary& s) {
  if (a.out.empty()) throw UsageError("missing --out");
  std::string feats = a.features_out;
  if (feats.empty()) {
    fs::path p(a.out);
    feats = (p.parent_path() / (p.stem().string() + ".features.jsonl")).string();
  }
  const auto corpus = text::synth_generate(a.n, a.k, seed, a.feature_dim);
  text::write_triples(a.out, corpus.triples());
  features::save_features(feats, corpus.features);
  s.j["triples"] = corpus.examples.size();
  s.j["out"] = a.out;
  s.j["features_out"] = feats;
}

struct TrainArgs {
  std::string train, eval, out;
  training::TrainConfig cfg;
  bool quiet = false;
};

int run_train(TrainArgs a, const Globals& g, Summary& s) {
  require_input(a.train, "train");
  if (!a.eval.empty()) require_input(a.eval, "eval");
  if (a.out.empty()) throw UsageError("missing --out");
  a.cfg.kind = model::parse_model_kind(g.model);
  a.cfg.seed = g.seed;
  const auto feats = load_features_for(g, a.cfg.kind);
  const auto train_set = text::read_triples(a.train);
  const auto eval_set = a.eval.empty() ? std::vector<text::TripleExample>{} : text::read_triples(a.eval);
  training::Checkpoint cp;
  try {
    cp = training::train(a.cfg, train_set, feats ? &*feats : nullptr, eval_set,
                         [&](const training::EpochRecord& r) {
                           if (a.quiet) return;
                           std::cerr << "epoch " << r.epoch << " train_loss " << r.train_loss << " train_acc "
                                     << r.train_accuracy << " eval_loss " << r.eval_loss << '\n';
                         });
  } catch (const training::DivergenceError& e) {
    s.j["diverged"] = true;
    s.j["error"] = e.what();
    std::cerr << "vqr train: " << e.what() << '\n';
    return kExitDiverged;
  }
  training::save_checkpoint(cp, a.out);
  s.j["model"] = model::kind_name(cp.config.kind);
  s.j["epochs_run"] = cp.history.size();
  s.j["best_epoch"] = cp.best_epoch;
  const auto& last = cp.history.back();
  s.j["train_loss"] = last.train_loss;
  s.j["train_accuracy"] = last.train_accuracy;
  s.j["eval_loss"] = cp.history[cp.best_epoch - 1].eval_loss;
  s.j["vocab_size"] = cp.vocab.size();
  s.j["out"] = a.out;
  return 0;
}

struct GenerateArgs {
  std::string ckpt, in, out;
};

void run_generate(const GenerateArgs& a, const Globals& g, Summary& s) {
  require_input(a.ckpt, "ckpt");
  require_input(a.in, "in");
  if (a.out.empty()) throw UsageError("missing --out");
  const auto cp = training::load_checkpoint(a.ckpt);
  const auto feats = load_features_for(g, cp.config.kind);
  const auto m = training::load_model(cp);
  const auto data = text::read_triples(a.in);
  const auto outs = metrics::generate_texts(*m, cp.vocab, data, feats ? &*feats : nullptr, decode_options(g));
  std::ofstream out(a.out, std::ios::trunc);
  for (std::size_t i = 0; i < data.size(); ++i) {
    out << ordered_json{{"id", data[i].id}, {"bland", data[i].bland}, {"generated", outs[i]}}.dump() << '\n';
  }
  s.j["generated"] = data.size();
  s.j["out"] = a.out;
}

struct EvaluateArgs {
  std::string ckpt, test, report, smoothing = "none";
};

void run_evaluate(const EvaluateArgs& a, const Globals& g, Summary& s) {
  require_input(a.ckpt, "ckpt");
  require_input(a.test, "test");
  const auto cp = training::load_checkpoint(a.ckpt);
  const auto feats = load_features_for(g, cp.config.kind);
  const auto rep = metrics::evaluate_model(cp, text::read_triples(a.test), feats ? &*feats : nullptr,
                                           decode_options(g), metrics::parse_smoothing(a.smoothing));
  const auto j = metrics::to_json(rep);
  if (!a.report.empty()) std::ofstream(a.report, std::ios::trunc) << j.dump(2) << '\n';
  s.j["model"] = model::kind_name(cp.config.kind);
  s.j["mode"] = g.mode;
  s.j["scores"] = j;
  if (!a.report.empty()) s.j["report"] = a.report;
}

struct JudgeArgs {
  std::string in;
};

void run_judge(const JudgeArgs& a, Summary& s) {
  require_input(a.in, "in");
  const auto rep = metrics::aggregate_preferences(metrics::read_judgments(a.in));
  const auto fields = metrics::to_json(rep);
  for (const auto& [k, v] : fields.items()) s.j[k] = v;
}

struct GradCheckArgs {
  std::size_t instances = 20;
  double step = 1e-3;
  double tolerance = 1e-3;
};

int run_grad_check(const GradCheckArgs& a, std::uint64_t seed, Summary& s) {
  auto cases = grad_suite::op_cases();
  for (auto& c : grad_suite::block_cases()) cases.push_back(std::move(c));
  double worst = 0.0;
  ordered_json per_case;
  for (const auto& r : grad_suite::run(cases, a.instances, seed, static_cast<float>(a.step))) {
    per_case[r.name] = r.max_rel_error;
    worst = std::max(worst, r.max_rel_error);
  }
  s.j["instances"] = a.instances;
  s.j["step"] = a.step;
  s.j["max_rel_error"] = worst;
  s.j["passed"] = worst < a.tolerance;
  s.j["cases"] = per_case;
  return worst < a.tolerance ? 0 : kExitFailure;
}

}  // namespace

int main(int argc, char** argv) {
  const auto start = std::chrono::steady_clock::now();
  CLI::App app{"Visual question rewriting: data, training, generation and evaluation"};
  app.require_subcommand(1);
  app.fallthrough();

  Globals g;
  app.add_option("--config", g.config_path, "Flat JSON config; command-line flags take precedence");
  app.add_option("--seed", g.seed, "Random seed");
  app.add_option("--model", g.model, "baseline|baseline+vis|transformer|transformer+vis")
      ->check(CLI::IsMember({"baseline", "baseline+vis", "transformer", "transformer+vis"}));
  app.add_option("--features", g.features, "Feature file (JSON lines)");
  app.add_option("--feature-kind", g.feature_kind, "grid|pooled (default: grid for baseline+vis, else pooled)")
      ->check(CLI::IsMember({"grid", "pooled"}));
  app.add_option("--mode", g.mode, "Decoding mode")->check(CLI::IsMember({"greedy", "beam"}));
  app.add_option("--beam-width", g.beam_width, "Beam width")->check(CLI::PositiveNumber);

  BuildVocabArgs vocab_args;
  auto* build_vocab = app.add_subcommand("build-vocab", "Build a vocabulary from triples");
  build_vocab->add_option("--in", vocab_args.in, "Triples (JSON lines)");
  build_vocab->add_option("--out", vocab_args.out, "Vocabulary JSON");
  build_vocab->add_option("--cap", vocab_args.cap, "Vocabulary size cap including specials");

  ConstructArgs construct_args;
  auto* construct = app.add_subcommand("construct", "Turn raw QA records into (bland, attractive) triples");
  construct->add_option("--in", construct_args.in, "Raw QA records (JSON lines)");
  construct->add_option("--out", construct_args.out, "Triples output");

  SplitArgs split_args;
  auto* split = app.add_subcommand("split", "Shuffle and split triples 4:1");
  split->add_option("--in", split_args.in, "Triples");
  split->add_option("--train", split_args.train, "Training output");
  split->add_option("--test", split_args.test, "Test output");

  SynthArgs synth_args;
  auto* synth = app.add_subcommand("synth", "Generate a synthetic corpus with side features");
  synth->add_option("--n", synth_args.n, "Number of triples")->check(CLI::PositiveNumber);
  synth->add_option("--k", synth_args.k, "Number of detail classes");
  synth->add_option("--feature-dim", synth_args.feature_dim, "Feature width");
  synth->add_option("--out", synth_args.out, "Triples output");
  synth->add_option("--features-out", synth_args.features_out, "Feature output (default <out stem>.features.jsonl)");

  TrainArgs train_args;
  auto& tc = train_args.cfg;
  auto* train = app.add_subcommand("train", "Train a model and write a checkpoint");
  train->add_option("--train", train_args.train, "Training triples");
  train->add_option("--eval", train_args.eval, "Held-out triples for early stopping");
  train->add_option("--out", train_args.out, "Checkpoint output");
  train->add_option("--epochs", tc.epochs);
  train->add_option("--batch-size", tc.batch_size);
  train->add_option("--lr", tc.learning_rate);
  train->add_option("--beta1", tc.beta1);
  train->add_option("--beta2", tc.beta2);
  train->add_option("--adam-epsilon", tc.adam_epsilon);
  train->add_option("--clip-norm", tc.clip_norm);
  train->add_option("--patience", tc.patience);
  train->add_option("--stop-at-accuracy", tc.stop_at_accuracy);
  train->add_option("--vocab-cap", tc.vocab_cap);
  train->add_option("--embed-dim", tc.embed_dim);
  train->add_option("--hidden-dim", tc.hidden_dim);
  train->add_option("--attn-dim", tc.attn_dim);
  train->add_option("--gru-layers", tc.gru_layers);
  train->add_option("--d-model", tc.d_model);
  train->add_option("--heads", tc.heads);
  train->add_option("--tf-layers", tc.tf_layers);
  train->add_option("--ffn-dim", tc.ffn_dim);
  train->add_flag("--quiet", train_args.quiet, "No per-epoch progress on stderr");

  GenerateArgs gen_args;
  auto* generate = app.add_subcommand("generate", "Generate rewrites for a triples file");
  generate->add_option("--ckpt", gen_args.ckpt, "Checkpoint");
  generate->add_option("--in", gen_args.in, "Triples (bland side is used)");
  generate->add_option("--out", gen_args.out, "Predictions (JSON lines)");

  EvaluateArgs eval_args;
  auto* evaluate = app.add_subcommand("evaluate", "Score a checkpoint on a test set");
  evaluate->add_option("--ckpt", eval_args.ckpt, "Checkpoint");
  evaluate->add_option("--test", eval_args.test, "Test triples");
  evaluate->add_option("--report", eval_args.report, "Score report output (JSON)");
  evaluate->add_option("--smoothing", eval_args.smoothing, "BLEU smoothing")
      ->check(CLI::IsMember({"none", "add-one"}));

  JudgeArgs judge_args;
  auto* judge = app.add_subcommand("judge-aggregate", "Majority-vote pairwise human judgments");
  judge->add_option("--in", judge_args.in, "Judgments (JSON lines)");

  GradCheckArgs gc_args;
  auto* grad_check = app.add_subcommand("grad-check", "Compare analytic and numeric gradients");
  grad_check->add_option("--instances", gc_args.instances, "Random instances per case")->check(CLI::PositiveNumber);
  grad_check->add_option("--step", gc_args.step, "Central-difference step");
  grad_check->add_option("--tolerance", gc_args.tolerance, "Maximum relative error");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "vqr: " << e.what() << "\n\n" << app.help();
    return kExitUsage;
  }

  CLI::App* sub = app.get_subcommands().front();
  const std::string command = sub->get_name();
  int status = 0;
  Summary summary(command, g.seed);
  try {
    if (!g.config_path.empty()) apply_config(app, sub, g.config_path);
    summary.j["seed"] = g.seed;
    if (command == "build-vocab") {
      run_build_vocab(vocab_args, summary);
    } else if (command == "construct") {
      run_construct(construct_args, summary);
    } else if (command == "split") {
      run_split(split_args, g.seed, summary);
    } else if (command == "synth") {
      run_synth(synth_args, g.seed, summary);
    } else if (command == "train") {
      status = run_train(train_args, g, summary);
    } else if (command == "generate") {
      run_generate(gen_args, g, summary);
    } else if (command == "evaluate") {
      run_evaluate(eval_args, g, summary);
    } else if (command == "judge-aggregate") {
      run_judge(judge_args, summary);
    } else if (command == "grad-check") {
      status = run_grad_check(gc_args, g.seed, summary);
    }
  } catch (const UsageError& e) {
    std::cerr << "vqr " << command << ": " << e.what() << "\n\n" << sub->help();
    return kExitUsage;
  } catch (const CLI::ParseError& e) {
    std::cerr << "vqr " << command << ": " << e.what() << '\n';
    return kExitUsage;
  } catch (const MissingInput& e) {
    std::cerr << "vqr " << command << ": " << e.what() << '\n';
    return kExitFailure;
  } catch (const std::exception& e) {
    std::cerr << "vqr " << command << ": " << e.what() << '\n';
    return kExitFailure;
  }
  summary.j["elapsed_s"] = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  std::cout << summary.j.dump() << std::endl;
  return status;
}
