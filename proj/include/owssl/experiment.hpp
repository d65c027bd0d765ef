#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

#include "owssl/adaptation.hpp"
#include "owssl/backbone.hpp"
#include "owssl/collapse.hpp"
#include "owssl/data.hpp"
#include "owssl/errors.hpp"
#include "owssl/metrics.hpp"
#include "owssl/regularizer.hpp"
#include "owssl/scenario.hpp"

namespace owssl {

using nlohmann::json;

// ---------------------------------------------------------------------------
// Scenario specification
// ---------------------------------------------------------------------------

/// Declarative synthetic-scenario description. `shape.channels > 0` switches
/// to image-shaped data; otherwise points are flat `dims`-vectors.
/// `label_budget > 0` draws that many labels uniformly from the train pool
/// (the partition then follows from the draw) instead of the balanced
/// few-shot split.
struct ScenarioSpec {
  int num_classes = 8;
  int num_unseen = 2;
  int dims = 16;
  int train_per_class = 60;
  int test_per_class = 20;
  double separation = 6.0;
  int labels_per_seen = 4;
  int label_budget = 0;
  DataShape shape{};

  void validate() const {
    if (num_classes < 2) throw ConfigError("need at least 2 classes");
    if (num_unseen < 1 || num_unseen >= num_classes) {
      throw ConfigError("num_unseen must lie in [1, num_classes)");
    }
    if (!shape.is_image() && dims < 1) {
      throw ConfigError("dims must be positive");
    }
    if (train_per_class < 1 || test_per_class < 1) {
      throw ConfigError("per-class counts must be positive");
    }
    if (separation <= 0.0) throw ConfigError("separation must be positive");
    if (label_budget == 0 && labels_per_seen < 1) {
      throw ConfigError("labels_per_seen must be positive");
    }
    if (label_budget < 0) throw ConfigError("label_budget must be >= 0");
  }
};

inline DatasetBundle build_scenario(const ScenarioSpec& spec,
                                    std::uint64_t seed) {
  spec.validate();
  const int dims = spec.shape.is_image() ? spec.shape.flat_dim() : spec.dims;
  Dataset full = make_synthetic_blobs(spec.num_classes, dims,
                                      spec.train_per_class + spec.test_per_class,
                                      spec.separation, seed);
  if (spec.shape.is_image()) full.shape = spec.shape;
  auto [train, test] = hold_out_split(full, spec.test_per_class, seed);
  if (spec.label_budget > 0) {
    return build_budget_labeled(train, test, spec.label_budget, seed);
  }
  const ClassPartition partition =
      split_classes(spec.num_classes, spec.num_unseen, seed);
  return build_balanced_fewshot(train, test, partition, spec.labels_per_seen,
                                seed);
}

// ---------------------------------------------------------------------------
// Run configuration
// ---------------------------------------------------------------------------

struct RunConfig {
  ScenarioSpec scenario;
  ModelConfig model;
  TrainConfig train;
  GuardConfig guard;
  RegularizerMode reg_mode = RegularizerMode::Uniform;
  std::string prior_path;
  int adaptation_grid = 101;
  std::string output_dir = "runs";
  int repetitions = 1;
  std::uint64_t base_seed = 1;

  void validate() const {
    scenario.validate();
    model.validate();
    train.validate();
    guard.validate();
    if (adaptation_grid < 2) throw ConfigError("adaptation_grid must be >= 2");
    if (repetitions < 1) throw ConfigError("repetitions must be >= 1");
    if (reg_mode == RegularizerMode::Prior && prior_path.empty()) {
      throw ConfigError("prior regularizer needs prior_path");
    }
  }
};

inline std::string to_string(RegularizerMode m) {
  switch (m) {
    case RegularizerMode::Off: return "off";
    case RegularizerMode::Uniform: return "uniform";
    case RegularizerMode::Prior: return "prior";
  }
  throw ConfigError("unknown regularizer mode");
}

inline RegularizerMode regularizer_mode_from(const std::string& s) {
  if (s == "off") return RegularizerMode::Off;
  if (s == "uniform") return RegularizerMode::Uniform;
  if (s == "prior") return RegularizerMode::Prior;
  throw ConfigError("unknown regularizer mode: " + s);
}

inline std::string to_string(BackboneFamily f) {
  switch (f) {
    case BackboneFamily::Mlp: return "mlp";
    case BackboneFamily::Conv: return "conv";
  }
  throw ConfigError("unknown backbone family");
}

inline BackboneFamily backbone_family_from(const std::string& s) {
  if (s == "mlp") return BackboneFamily::Mlp;
  if (s == "conv") return BackboneFamily::Conv;
  throw ConfigError("unknown backbone family: " + s);
}

/// Method label used in ledgers and comparison tables: runs without the
/// entropy term are the adapted baseline.
inline std::string method_name(RegularizerMode m) {
  return m == RegularizerMode::Off ? "baseline" : to_string(m);
}

inline json scenario_to_json(const ScenarioSpec& s) {
  return json{{"channels", s.shape.channels},
              {"dims", s.dims},
              {"height", s.shape.height},
              {"label_budget", s.label_budget},
              {"labels_per_seen", s.labels_per_seen},
              {"num_classes", s.num_classes},
              {"num_unseen", s.num_unseen},
              {"separation", s.separation},
              {"test_per_class", s.test_per_class},
              {"train_per_class", s.train_per_class},
              {"width", s.shape.width}};
}

inline ScenarioSpec scenario_from_json(const json& j) {
  ScenarioSpec d;
  ScenarioSpec s;
  s.num_classes = j.value("num_classes", d.num_classes);
  s.num_unseen = j.value("num_unseen", d.num_unseen);
  s.dims = j.value("dims", d.dims);
  s.train_per_class = j.value("train_per_class", d.train_per_class);
  s.test_per_class = j.value("test_per_class", d.test_per_class);
  s.separation = j.value("separation", d.separation);
  s.labels_per_seen = j.value("labels_per_seen", d.labels_per_seen);
  s.label_budget = j.value("label_budget", d.label_budget);
  s.shape.channels = j.value("channels", 0);
  s.shape.height = j.value("height", 0);
  s.shape.width = j.value("width", 0);
  return s;
}

inline json run_config_to_json(const RunConfig& c) {
  return json{
      {"adaptation_grid", c.adaptation_grid},
      {"base_seed", c.base_seed},
      {"guard",
       {{"gradient_threshold", c.guard.gradient_threshold},
        {"rollback_offset", c.guard.rollback_offset},
        {"smoothing_window", c.guard.smoothing_window}}},
      {"model",
       {{"conv_channels", c.model.conv_channels},
        {"family", to_string(c.model.family)},
        {"head_dim", c.model.head_dim},
        {"hidden_dim", c.model.hidden_dim},
        {"zero_head", c.model.zero_head}}},
      {"output_dir", c.output_dir},
      {"prior_path", c.prior_path},
      {"regularizer", to_string(c.reg_mode)},
      {"repetitions", c.repetitions},
      {"scenario", scenario_to_json(c.scenario)},
      {"train",
       {{"base_threshold", c.train.base_threshold},
        {"batch_size", c.train.batch_size},
        {"lambda", c.train.lambda},
        {"learning_rate", c.train.learning_rate},
        {"max_epochs", c.train.max_epochs},
        {"momentum", c.train.momentum},
        {"seed", c.train.seed},
        {"strong_dropout", c.train.strong_dropout},
        {"strong_noise", c.train.strong_noise},
        {"unlabeled_ratio", c.train.unlabeled_ratio},
        {"weak_noise", c.train.weak_noise},
        {"weight_decay", c.train.weight_decay}}}};
}

inline RunConfig run_config_from_json(const json& j) {
  RunConfig c;
  if (j.contains("scenario")) c.scenario = scenario_from_json(j.at("scenario"));
  if (j.contains("model")) {
    const json& m = j.at("model");
    c.model.family = backbone_family_from(m.value("family", std::string("mlp")));
    c.model.hidden_dim = m.value("hidden_dim", c.model.hidden_dim);
    c.model.conv_channels = m.value("conv_channels", c.model.conv_channels);
    c.model.head_dim = m.value("head_dim", c.model.head_dim);
    c.model.zero_head = m.value("zero_head", c.model.zero_head);
  }
  if (j.contains("train")) {
    const json& t = j.at("train");
    c.train.batch_size = t.value("batch_size", c.train.batch_size);
    c.train.unlabeled_ratio = t.value("unlabeled_ratio", c.train.unlabeled_ratio);
    c.train.learning_rate = t.value("learning_rate", c.train.learning_rate);
    c.train.momentum = t.value("momentum", c.train.momentum);
    c.train.weight_decay = t.value("weight_decay", c.train.weight_decay);
    c.train.max_epochs = t.value("max_epochs", c.train.max_epochs);
    c.train.base_threshold = t.value("base_threshold", c.train.base_threshold);
    c.train.lambda = t.value("lambda", c.train.lambda);
    c.train.seed = t.value("seed", c.train.seed);
    c.train.weak_noise = t.value("weak_noise", c.train.weak_noise);
    c.train.strong_noise = t.value("strong_noise", c.train.strong_noise);
    c.train.strong_dropout = t.value("strong_dropout", c.train.strong_dropout);
  }
  if (j.contains("guard")) {
    const json& g = j.at("guard");
    c.guard.gradient_threshold =
        g.value("gradient_threshold", c.guard.gradient_threshold);
    c.guard.smoothing_window =
        g.value("smoothing_window", c.guard.smoothing_window);
    c.guard.rollback_offset =
        g.value("rollback_offset", c.guard.rollback_offset);
  }
  c.reg_mode =
      regularizer_mode_from(j.value("regularizer", std::string("uniform")));
  c.prior_path = j.value("prior_path", c.prior_path);
  c.adaptation_grid = j.value("adaptation_grid", c.adaptation_grid);
  c.output_dir = j.value("output_dir", c.output_dir);
  c.repetitions = j.value("repetitions", c.repetitions);
  c.base_seed = j.value("base_seed", c.base_seed);
  return c;
}

inline RunConfig read_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config: " + path.string());
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw ConfigError("bad config " + path.string() + ": " + e.what());
  }
  return run_config_from_json(j);
}

inline std::uint64_t fnv1a64(std::string_view s) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

inline std::string config_hash(const RunConfig& c) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx",
                static_cast<unsigned long long>(
                    fnv1a64(run_config_to_json(c).dump())));
  return buf;
}

inline PriorDistribution load_prior(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open prior table: " + path.string());
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw ConfigError("bad prior table: " + std::string(e.what()));
  }
  const auto w = j.at("weights").get<std::vector<double>>();
  Eigen::VectorXd v(static_cast<Eigen::Index>(w.size()));
  for (std::size_t i = 0; i < w.size(); ++i) {
    v(static_cast<Eigen::Index>(i)) = w[i];
  }
  return PriorDistribution::make(v);
}

// ---------------------------------------------------------------------------
// Ledger records
// ---------------------------------------------------------------------------

inline json eval_to_json(const EvalReport& r) {
  return json{{"acc_seen", r.acc_seen},     {"acc_unseen", r.acc_unseen},
              {"auroc", r.auroc},           {"closed_acc", r.closed_acc},
              {"combined", r.combined},     {"unknown_acc", r.unknown_acc}};
}

inline EvalReport eval_from_json(const json& j) {
  EvalReport r;
  r.acc_seen = j.at("acc_seen").get<double>();
  r.acc_unseen = j.at("acc_unseen").get<double>();
  r.combined = j.at("combined").get<double>();
  r.closed_acc = j.at("closed_acc").get<double>();
  r.unknown_acc = j.at("unknown_acc").get<double>();
  r.auroc = j.at("auroc").get<double>();
  return r;
}

inline json losses_to_json(const LossBreakdown& b) {
  return json{{"lambda", b.lambda},
              {"le", b.le},
              {"ls", b.ls},
              {"lu", b.lu},
              {"total", b.total}};
}

inline LossBreakdown losses_from_json(const json& j) {
  LossBreakdown b;
  b.ls = j.at("ls").get<double>();
  b.lu = j.at("lu").get<double>();
  b.le = j.at("le").get<double>();
  b.lambda = j.at("lambda").get<double>();
  b.total = j.at("total").get<double>();
  return b;
}

inline json stop_to_json(const StopReport& s) {
  return json{{"decline_epoch", s.decline_epoch},
              {"detected", s.detected},
              {"epochs_run", s.epochs_run},
              {"stop_epoch", s.stop_epoch}};
}

inline StopReport stop_from_json(const json& j) {
  StopReport s;
  s.detected = j.at("detected").get<bool>();
  s.decline_epoch = j.at("decline_epoch").get<int>();
  s.stop_epoch = j.at("stop_epoch").get<int>();
  s.epochs_run = j.at("epochs_run").get<int>();
  return s;
}

struct EpochSnapshot {
  int epoch = 0;
  LossBreakdown losses;
  double mask_rate = 0.0;
  EvalReport eval;
};

struct RunLedgerRecord {
  std::string run_id;
  std::string config_hash_hex;
  std::string method;
  std::uint64_t seed = 0;
  json config;  // effective per-run configuration
  std::vector<EpochSnapshot> epochs;
  StopReport stop;
  EvalReport final_eval;
  double best_threshold = -1.0;  // baseline adaptation only, else -1
  double wall_clock_sec = 0.0;
};

namespace detail {

inline std::string header_line(const std::string& kind) {
  return json{{"kind", kind}, {"record", "header"}, {"version", 1}}.dump();
}

inline std::string config_line(const RunLedgerRecord& r) {
  return json{{"config", r.config},
              {"config_hash", r.config_hash_hex},
              {"method", r.method},
              {"record", "config"},
              {"run_id", r.run_id},
              {"seed", r.seed}}
      .dump();
}

inline std::string epoch_line(const EpochSnapshot& s) {
  return json{{"epoch", s.epoch},
              {"eval", eval_to_json(s.eval)},
              {"losses", losses_to_json(s.losses)},
              {"mask_rate", s.mask_rate},
              {"record", "epoch"}}
      .dump();
}

inline std::string stop_line(const StopReport& s) {
  json j = stop_to_json(s);
  j["record"] = "stop";
  return j.dump();
}

inline std::string final_line(const RunLedgerRecord& r) {
  return json{{"best_threshold", r.best_threshold},
              {"eval", eval_to_json(r.final_eval)},
              {"record", "final"},
              {"wall_clock_sec", r.wall_clock_sec}}
      .dump();
}

}  // namespace detail

inline void write_run_ledger(const std::filesystem::path& path,
                             const RunLedgerRecord& r) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write ledger: " + path.string());
  out << detail::header_line("run_ledger") << "\n";
  out << detail::config_line(r) << "\n";
  for (const auto& s : r.epochs) out << detail::epoch_line(s) << "\n";
  out << detail::stop_line(r.stop) << "\n";
  out << detail::final_line(r) << "\n";
}

inline RunLedgerRecord read_run_ledger(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read ledger: " + path.string());
  RunLedgerRecord r;
  bool saw_header = false, saw_final = false;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::exception& e) {
      throw InternalConsistencyError("bad ledger line: " + std::string(e.what()));
    }
    const std::string record = j.at("record").get<std::string>();
    if (record == "header") {
      if (j.at("kind").get<std::string>() != "run_ledger") {
        throw InternalConsistencyError("not a run ledger: " + path.string());
      }
      saw_header = true;
    } else if (record == "config") {
      r.run_id = j.at("run_id").get<std::string>();
      r.config_hash_hex = j.at("config_hash").get<std::string>();
      r.method = j.at("method").get<std::string>();
      r.seed = j.at("seed").get<std::uint64_t>();
      r.config = j.at("config");
    } else if (record == "epoch") {
      EpochSnapshot s;
      s.epoch = j.at("epoch").get<int>();
      s.losses = losses_from_json(j.at("losses"));
      s.mask_rate = j.at("mask_rate").get<double>();
      s.eval = eval_from_json(j.at("eval"));
      r.epochs.push_back(std::move(s));
    } else if (record == "stop") {
      r.stop = stop_from_json(j);
    } else if (record == "final") {
      r.final_eval = eval_from_json(j.at("eval"));
      r.best_threshold = j.at("best_threshold").get<double>();
      r.wall_clock_sec = j.at("wall_clock_sec").get<double>();
      saw_final = true;
    } else {
      throw InternalConsistencyError("unknown ledger record: " + record);
    }
  }
  if (!saw_header || !saw_final) {
    throw InternalConsistencyError("incomplete ledger: " + path.string());
  }
  return r;
}

// ---------------------------------------------------------------------------
// Prediction dumps
// ---------------------------------------------------------------------------

struct PredictionDump {
  ClassPartition partition;
  Eigen::MatrixXd probs;
  Eigen::MatrixXd features;
  std::vector<int> truths;
  std::vector<OpenLabel> labels;
  std::vector<double> reject_scores;
};

inline json open_label_to_json(const OpenLabel& l) {
  return json{{"group", l.kind == OpenLabel::Kind::Seen ? "seen" : "novel"},
              {"value", l.value}};
}

inline OpenLabel open_label_from_json(const json& j) {
  const std::string g = j.at("group").get<std::string>();
  const int v = j.at("value").get<int>();
  if (g == "seen") return OpenLabel::seen(v);
  if (g == "novel") return OpenLabel::novel(v);
  throw InternalConsistencyError("unknown label group: " + g);
}

inline void write_prediction_dump(const std::filesystem::path& path,
                                  const PredictionDump& d) {
  const Eigen::Index n = d.probs.rows();
  if (d.features.rows() != n ||
      static_cast<Eigen::Index>(d.truths.size()) != n ||
      static_cast<Eigen::Index>(d.labels.size()) != n ||
      static_cast<Eigen::Index>(d.reject_scores.size()) != n) {
    throw std::invalid_argument("prediction dump rows disagree");
  }
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write dump: " + path.string());
  out << detail::header_line("predictions") << "\n";
  out << json{{"num_classes", d.partition.num_classes},
              {"record", "partition"},
              {"seen", d.partition.seen}}
             .dump()
      << "\n";
  for (Eigen::Index i = 0; i < n; ++i) {
    std::vector<double> probs(d.probs.cols());
    for (Eigen::Index c = 0; c < d.probs.cols(); ++c) probs[c] = d.probs(i, c);
    std::vector<double> feats(d.features.cols());
    for (Eigen::Index c = 0; c < d.features.cols(); ++c) {
      feats[c] = d.features(i, c);
    }
    out << json{{"features", feats},
                {"index", i},
                {"label", open_label_to_json(d.labels[i])},
                {"probs", probs},
                {"record", "prediction"},
                {"reject_score", d.reject_scores[i]},
                {"truth", d.truths[i]}}
               .dump()
        << "\n";
  }
}

inline PredictionDump read_prediction_dump(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read dump: " + path.string());
  PredictionDump d;
  std::vector<std::vector<double>> probs, feats;
  bool saw_partition = false;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const json j = json::parse(line);
    const std::string record = j.at("record").get<std::string>();
    if (record == "header") {
      if (j.at("kind").get<std::string>() != "predictions") {
        throw InternalConsistencyError("not a prediction dump");
      }
    } else if (record == "partition") {
      d.partition = ClassPartition::make(
          j.at("num_classes").get<int>(),
          j.at("seen").get<std::vector<int>>());
      saw_partition = true;
    } else if (record == "prediction") {
      probs.push_back(j.at("probs").get<std::vector<double>>());
      feats.push_back(j.at("features").get<std::vector<double>>());
      d.truths.push_back(j.at("truth").get<int>());
      d.labels.push_back(open_label_from_json(j.at("label")));
      d.reject_scores.push_back(j.at("reject_score").get<double>());
    }
  }
  if (!saw_partition) {
    throw InternalConsistencyError("prediction dump lacks partition record");
  }
  if (probs.empty()) throw InsufficientDataError("prediction dump is empty");
  d.probs.resize(static_cast<Eigen::Index>(probs.size()),
                 static_cast<Eigen::Index>(probs[0].size()));
  d.features.resize(static_cast<Eigen::Index>(feats.size()),
                    static_cast<Eigen::Index>(feats[0].size()));
  for (std::size_t i = 0; i < probs.size(); ++i) {
    for (std::size_t c = 0; c < probs[i].size(); ++c) {
      d.probs(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(c)) =
          probs[i][c];
    }
    for (std::size_t c = 0; c < feats[i].size(); ++c) {
      d.features(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(c)) =
          feats[i][c];
    }
  }
  return d;
}

// ---------------------------------------------------------------------------
// Running experiments
// ---------------------------------------------------------------------------

/// Read the widened head directly as an open-world prediction: argmax slot
/// below |C_seen| is that seen class, any other slot is the novel group at
/// (slot - |C_seen|). The novelty score is the probability mass on unseen
/// slots.
struct DirectPrediction {
  std::vector<OpenLabel> labels;
  std::vector<double> novelty;
};

inline DirectPrediction widened_head_predictions(
    const Eigen::MatrixXd& probs, const ClassPartition& partition) {
  if (probs.cols() != partition.num_classes) {
    throw std::invalid_argument("head width does not match partition");
  }
  DirectPrediction out;
  out.labels.reserve(static_cast<std::size_t>(probs.rows()));
  out.novelty.reserve(static_cast<std::size_t>(probs.rows()));
  const int num_seen = partition.num_seen();
  for (Eigen::Index i = 0; i < probs.rows(); ++i) {
    Eigen::Index slot = 0;
    probs.row(i).maxCoeff(&slot);
    if (slot < num_seen) {
      out.labels.push_back(
          OpenLabel::seen(partition.class_at_slot(static_cast<int>(slot))));
    } else {
      out.labels.push_back(OpenLabel::novel(static_cast<int>(slot) - num_seen));
    }
    out.novelty.push_back(1.0 - probs.row(i).head(num_seen).sum());
  }
  return out;
}

inline std::vector<double> threshold_grid(int points) {
  if (points < 2) throw ConfigError("grid needs at least 2 points");
  std::vector<double> grid(static_cast<std::size_t>(points));
  for (int i = 0; i < points; ++i) {
    grid[static_cast<std::size_t>(i)] =
        static_cast<double>(i) / static_cast<double>(points - 1);
  }
  return grid;
}

inline std::string make_run_id(const RunConfig& cfg, std::uint64_t seed) {
  return method_name(cfg.reg_mode) + "-s" + std::to_string(seed);
}

/// Execute one training run end to end: build the scenario, train under the
/// collapse guard with per-epoch checkpoints and ledger lines, evaluate on
/// the test split (runs without the entropy term go through baseline
/// adaptation with a ground-truth-optimal threshold), and persist ledger,
/// prediction dump, and manifest under output_dir/<run_id>.
inline RunLedgerRecord run_experiment(const RunConfig& cfg,
                                      std::uint64_t seed) {
  cfg.validate();
  const auto t0 = std::chrono::steady_clock::now();

  RunConfig effective = cfg;
  effective.train.seed = seed;
  RunLedgerRecord record;
  record.run_id = make_run_id(cfg, seed);
  record.method = method_name(cfg.reg_mode);
  record.seed = seed;
  record.config = run_config_to_json(effective);
  record.config_hash_hex = config_hash(effective);

  const std::filesystem::path run_dir =
      std::filesystem::path(cfg.output_dir) / record.run_id;
  std::filesystem::create_directories(run_dir);
  const std::filesystem::path ledger_path = run_dir / "ledger.jsonl";
  std::ofstream ledger(ledger_path, std::ios::trunc);
  if (!ledger) {
    throw std::runtime_error("cannot write ledger: " + ledger_path.string());
  }
  ledger << detail::header_line("run_ledger") << "\n";
  ledger << detail::config_line(record) << "\n";
  ledger.flush();

  const DatasetBundle bundle = build_scenario(cfg.scenario, seed);
  std::optional<PriorDistribution> prior;
  if (cfg.reg_mode == RegularizerMode::Prior) {
    prior = load_prior(cfg.prior_path);
  }
  Trainer trainer(bundle, cfg.model, effective.train, cfg.reg_mode, prior);

  CheckpointStore store(run_dir / "checkpoints");
  EntropyTrace trace;
  const StopReport stop = guard_training(
      trainer, cfg.guard, store, trace, [&](int epoch, EpochResult& res) {
        EpochSnapshot snap;
        snap.epoch = epoch;
        snap.losses = res.losses;
        snap.mask_rate = res.mask_rate;
        const ForwardResult fr = trainer.evaluate(bundle.test.x);
        const DirectPrediction direct =
            widened_head_predictions(fr.probs, bundle.partition);
        snap.eval = evaluate_open_world(direct.labels, fr.probs,
                                        direct.novelty, bundle.test.labels,
                                        bundle.partition);
        ledger << detail::epoch_line(snap) << "\n";
        ledger.flush();
        record.epochs.push_back(std::move(snap));
      });
  record.stop = stop;

  // Final evaluation from the (possibly rolled-back) model.
  const ForwardResult fr = trainer.evaluate(bundle.test.x);
  PredictionDump dump;
  dump.partition = bundle.partition;
  dump.probs = fr.probs;
  dump.features = fr.features;
  dump.truths = bundle.test.labels;
  if (cfg.reg_mode == RegularizerMode::Off) {
    const ThresholdSearchResult best = optimal_threshold_search(
        fr.probs, fr.features, bundle.test.labels, bundle.partition,
        threshold_grid(cfg.adaptation_grid), seed);
    const AdaptOutcome adapted =
        adapt_pipeline(fr.probs, fr.features, bundle.test.labels,
                       bundle.partition, best.threshold, seed);
    record.final_eval = adapted.report;
    record.best_threshold = best.threshold;
    dump.labels = adapted.labels;
    dump.reject_scores = adapted.reject_scores;
  } else {
    const DirectPrediction direct =
        widened_head_predictions(fr.probs, bundle.partition);
    record.final_eval =
        evaluate_open_world(direct.labels, fr.probs, direct.novelty,
                            bundle.test.labels, bundle.partition);
    dump.labels = direct.labels;
    dump.reject_scores = direct.novelty;
  }

  record.wall_clock_sec =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
          .count();
  ledger << detail::stop_line(record.stop) << "\n";
  ledger << detail::final_line(record) << "\n";
  ledger.close();

  write_prediction_dump(run_dir / "predictions.jsonl", dump);
  write_split_manifest((run_dir / "split.jsonl").string(), bundle, seed);

  json manifest{
      {"config_hash", record.config_hash_hex},
      {"ledger", ledger_path.string()},
      {"restored_checkpoint",
       stop.detected ? json(store.path_of(stop.stop_epoch).string())
                     : json(nullptr)},
      {"run_id", record.run_id},
      {"stop", stop_to_json(stop)}};
  std::ofstream mf(run_dir / "manifest.json", std::ios::trunc);
  mf << manifest.dump(2) << "\n";

  return record;
}

/// Repetition sweep: seeds base_seed, base_seed+1, ... per the configured
/// repetition count.
inline std::vector<RunLedgerRecord> run_repetitions(const RunConfig& cfg) {
  cfg.validate();
  std::vector<RunLedgerRecord> out;
  out.reserve(static_cast<std::size_t>(cfg.repetitions));
  for (int rep = 0; rep < cfg.repetitions; ++rep) {
    out.push_back(run_experiment(cfg, cfg.base_seed + static_cast<std::uint64_t>(rep)));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Comparison
// ---------------------------------------------------------------------------

struct MethodSummary {
  std::string method;
  int runs = 0;
  EvalReport mean;
  EvalReport stddev;  // sample standard deviation; zero when runs == 1
};

struct ComparisonTable {
  std::vector<MethodSummary> rows;
};

namespace detail {

inline void accumulate(EvalReport& acc, const EvalReport& r) {
  acc.acc_seen += r.acc_seen;
  acc.acc_unseen += r.acc_unseen;
  acc.combined += r.combined;
  acc.closed_acc += r.closed_acc;
  acc.unknown_acc += r.unknown_acc;
  acc.auroc += r.auroc;
}

inline EvalReport scale(const EvalReport& r, double s) {
  return EvalReport{r.acc_seen * s,   r.acc_unseen * s, r.combined * s,
                    r.closed_acc * s, r.unknown_acc * s, r.auroc * s};
}

inline void accumulate_sq_diff(EvalReport& acc, const EvalReport& r,
                               const EvalReport& mean) {
  const auto sq = [](double x) { return x * x; };
  acc.acc_seen += sq(r.acc_seen - mean.acc_seen);
  acc.acc_unseen += sq(r.acc_unseen - mean.acc_unseen);
  acc.combined += sq(r.combined - mean.combined);
  acc.closed_acc += sq(r.closed_acc - mean.closed_acc);
  acc.unknown_acc += sq(r.unknown_acc - mean.unknown_acc);
  acc.auroc += sq(r.auroc - mean.auroc);
}

inline EvalReport sqrt_each(const EvalReport& r) {
  return EvalReport{std::sqrt(r.acc_seen),   std::sqrt(r.acc_unseen),
                    std::sqrt(r.combined),   std::sqrt(r.closed_acc),
                    std::sqrt(r.unknown_acc), std::sqrt(r.auroc)};
}

}  // namespace detail

/// Mean and sample standard deviation per method. All records must describe
/// the same scenario; mixing scenarios is a comparison error.
inline ComparisonTable compare_runs(const std::vector<RunLedgerRecord>& records) {
  if (records.empty()) {
    throw InvalidComparisonError("no run records to compare");
  }
  const json scenario0 = records.front().config.value("scenario", json::object());
  for (const auto& r : records) {
    if (r.config.value("scenario", json::object()) != scenario0) {
      throw InvalidComparisonError(
          "records come from different scenarios; refusing to average");
    }
  }
  std::vector<std::string> order;
  for (const auto& r : records) {
    bool known = false;
    for (const auto& m : order) known = known || m == r.method;
    if (!known) order.push_back(r.method);
  }
  ComparisonTable table;
  for (const auto& method : order) {
    MethodSummary row;
    row.method = method;
    EvalReport sum{0, 0, 0, 0, 0, 0};
    for (const auto& r : records) {
      if (r.method != method) continue;
      ++row.runs;
      detail::accumulate(sum, r.final_eval);
    }
    row.mean = detail::scale(sum, 1.0 / row.runs);
    if (row.runs > 1) {
      EvalReport sq{0, 0, 0, 0, 0, 0};
      for (const auto& r : records) {
        if (r.method != method) continue;
        detail::accumulate_sq_diff(sq, r.final_eval, row.mean);
      }
      row.stddev = detail::sqrt_each(detail::scale(sq, 1.0 / (row.runs - 1)));
    }
    table.rows.push_back(std::move(row));
  }
  return table;
}

inline json comparison_to_json(const ComparisonTable& t) {
  json rows = json::array();
  for (const auto& r : t.rows) {
    rows.push_back(json{{"mean", eval_to_json(r.mean)},
                        {"method", r.method},
                        {"runs", r.runs},
                        {"stddev", eval_to_json(r.stddev)}});
  }
  return json{{"kind", "comparison"}, {"rows", rows}, {"version", 1}};
}

inline std::string comparison_to_text(const ComparisonTable& t) {
  std::ostringstream os;
  os << "method      runs  combined          seen              unseen"
        "            closed            unknown           auroc\n";
  for (const auto& r : t.rows) {
    char line[256];
    std::snprintf(
        line, sizeof(line),
        "%-10s  %4d  %.4f +- %.4f  %.4f +- %.4f  %.4f +- %.4f  "
        "%.4f +- %.4f  %.4f +- %.4f  %.4f +- %.4f\n",
        r.method.c_str(), r.runs, r.mean.combined, r.stddev.combined,
        r.mean.acc_seen, r.stddev.acc_seen, r.mean.acc_unseen,
        r.stddev.acc_unseen, r.mean.closed_acc, r.stddev.closed_acc,
        r.mean.unknown_acc, r.stddev.unknown_acc, r.mean.auroc,
        r.stddev.auroc);
    os << line;
  }
  return os.str();
}

/// Grouped bar chart (combined, seen, unseen per method) with one standard
/// deviation whiskers, as a self-contained SVG file.
inline void write_comparison_chart(const std::filesystem::path& path,
                                   const ComparisonTable& t) {
  const int width = 640, height = 360;
  const int left = 60, bottom = 300, top = 40;
  const double plot_h = bottom - top;
  std::ostringstream svg;
  svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width
      << "\" height=\"" << height << "\">\n";
  svg << "<rect width=\"" << width << "\" height=\"" << height
      << "\" fill=\"white\"/>\n";
  for (int i = 0; i <= 5; ++i) {
    const double v = i / 5.0;
    const double y = bottom - v * plot_h;
    svg << "<line x1=\"" << left << "\" y1=\"" << y << "\" x2=\""
        << width - 20 << "\" y2=\"" << y
        << "\" stroke=\"#dddddd\" stroke-width=\"1\"/>\n";
    char lbl[16];
    std::snprintf(lbl, sizeof(lbl), "%.1f", v);
    svg << "<text x=\"" << left - 8 << "\" y=\"" << y + 4
        << "\" font-size=\"11\" text-anchor=\"end\" fill=\"#444444\">" << lbl
        << "</text>\n";
  }
  const char* colors[3] = {"#4472c4", "#ed7d31", "#70ad47"};
  const char* names[3] = {"combined", "seen", "unseen"};
  const int group_w = t.rows.empty()
                          ? 0
                          : (width - left - 40) / static_cast<int>(t.rows.size());
  const int bar_w = std::max(8, group_w / 5);
  for (std::size_t g = 0; g < t.rows.size(); ++g) {
    const MethodSummary& r = t.rows[g];
    const double vals[3] = {r.mean.combined, r.mean.acc_seen,
                            r.mean.acc_unseen};
    const double errs[3] = {r.stddev.combined, r.stddev.acc_seen,
                            r.stddev.acc_unseen};
    const int gx = left + 20 + static_cast<int>(g) * group_w;
    for (int b = 0; b < 3; ++b) {
      const double v = std::clamp(vals[b], 0.0, 1.0);
      const double h = v * plot_h;
      const int x = gx + b * (bar_w + 4);
      svg << "<rect x=\"" << x << "\" y=\"" << bottom - h << "\" width=\""
          << bar_w << "\" height=\"" << h << "\" fill=\"" << colors[b]
          << "\"/>\n";
      const double e = std::clamp(errs[b], 0.0, 1.0);
      if (e > 0.0) {
        const double cx = x + bar_w / 2.0;
        const double y1 = bottom - std::clamp(v + e, 0.0, 1.0) * plot_h;
        const double y2 = bottom - std::clamp(v - e, 0.0, 1.0) * plot_h;
        svg << "<line x1=\"" << cx << "\" y1=\"" << y1 << "\" x2=\"" << cx
            << "\" y2=\"" << y2
            << "\" stroke=\"#333333\" stroke-width=\"1.5\"/>\n";
      }
    }
    svg << "<text x=\"" << gx + 1.5 * (bar_w + 4) << "\" y=\"" << bottom + 18
        << "\" font-size=\"12\" text-anchor=\"middle\" fill=\"#222222\">"
        << r.method << "</text>\n";
  }
  for (int b = 0; b < 3; ++b) {
    const int lx = left + 20 + b * 110;
    svg << "<rect x=\"" << lx << "\" y=\"" << height - 26
        << "\" width=\"12\" height=\"12\" fill=\"" << colors[b] << "\"/>\n";
    svg << "<text x=\"" << lx + 18 << "\" y=\"" << height - 16
        << "\" font-size=\"12\" fill=\"#222222\">" << names[b] << "</text>\n";
  }
  svg << "</svg>\n";
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write chart: " + path.string());
  out << svg.str();
}

}  // namespace owssl
