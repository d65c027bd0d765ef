#pragma once

#include <algorithm>
#include <cmath>
#include <concepts>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "owssl/backbone.hpp"
#include "owssl/errors.hpp"

namespace owssl {

/// Per-epoch record of the entropy-term value, ordered by epoch.
struct EntropyTrace {
  std::vector<int> epochs;
  std::vector<double> values;

  void append(int epoch, double value) {
    if (!std::isfinite(value)) {
      throw std::invalid_argument("trace values must be finite");
    }
    if (!epochs.empty() && epoch <= epochs.back()) {
      throw std::invalid_argument("trace epochs must be strictly increasing");
    }
    epochs.push_back(epoch);
    values.push_back(value);
  }
  std::size_t size() const { return epochs.size(); }
};

struct GuardConfig {
  double gradient_threshold = 0.1;  // max allowed one-epoch drop (smoothed)
  int smoothing_window = 5;
  int rollback_offset = 5;

  void validate() const {
    if (gradient_threshold <= 0.0) {
      throw ConfigError("gradient_threshold must be positive");
    }
    if (smoothing_window < 1) throw ConfigError("smoothing_window must be >= 1");
    if (rollback_offset < 1) throw ConfigError("rollback_offset must be >= 1");
  }
};

/// Trailing moving average (window shrinks to the available prefix at the
/// start, keeping the series translation-equivariant).
inline std::vector<double> smooth_trace(const std::vector<double>& values,
                                        int window) {
  std::vector<double> out(values.size());
  double running = 0.0;
  for (std::size_t i = 0; i < values.size(); ++i) {
    running += values[i];
    if (i >= static_cast<std::size_t>(window)) {
      running -= values[i - static_cast<std::size_t>(window)];
    }
    const std::size_t count = std::min<std::size_t>(
        i + 1, static_cast<std::size_t>(window));
    out[i] = running / static_cast<double>(count);
  }
  return out;
}

/// First epoch whose smoothed backward difference drops below
/// -gradient_threshold; none when the series never falls that fast.
inline std::optional<int> detect_sharp_decline(const EntropyTrace& trace,
                                               const GuardConfig& cfg) {
  cfg.validate();
  if (trace.size() < static_cast<std::size_t>(cfg.smoothing_window) + 1) {
    throw InsufficientDataError(
        "trace shorter than smoothing window + 1 epochs");
  }
  const std::vector<double> smoothed =
      smooth_trace(trace.values, cfg.smoothing_window);
  for (std::size_t t = 1; t < smoothed.size(); ++t) {
    if (smoothed[t] - smoothed[t - 1] < -cfg.gradient_threshold) {
      return trace.epochs[t];
    }
  }
  return std::nullopt;
}

inline int select_stop_epoch(int decline_epoch, const GuardConfig& cfg) {
  cfg.validate();
  return std::max(decline_epoch - cfg.rollback_offset, 0);
}

namespace detail {

template <typename T>
void write_pod(std::ostream& os, const T& v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::istream& is) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) throw InternalConsistencyError("truncated checkpoint file");
  return v;
}

inline void write_matrix(std::ostream& os, const Eigen::MatrixXd& m) {
  write_pod<std::uint64_t>(os, static_cast<std::uint64_t>(m.rows()));
  write_pod<std::uint64_t>(os, static_cast<std::uint64_t>(m.cols()));
  os.write(reinterpret_cast<const char*>(m.data()),
           static_cast<std::streamsize>(sizeof(double) * m.size()));
}

inline Eigen::MatrixXd read_matrix(std::istream& is) {
  const auto rows = read_pod<std::uint64_t>(is);
  const auto cols = read_pod<std::uint64_t>(is);
  Eigen::MatrixXd m(static_cast<Eigen::Index>(rows),
                    static_cast<Eigen::Index>(cols));
  is.read(reinterpret_cast<char*>(m.data()),
          static_cast<std::streamsize>(sizeof(double) * m.size()));
  if (!is) throw InternalConsistencyError("truncated checkpoint file");
  return m;
}

}  // namespace detail

inline void write_checkpoint_file(const std::filesystem::path& path,
                                  const Checkpoint& ck) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os.write("OWCK", 4);
  detail::write_pod<std::uint32_t>(os, 1u);  // format version
  detail::write_pod<std::int32_t>(os, ck.epoch);
  detail::write_pod<double>(os, ck.curriculum.base_tau);
  detail::write_pod<std::uint64_t>(os, ck.curriculum.counters.size());
  for (long long c : ck.curriculum.counters) {
    detail::write_pod<std::int64_t>(os, c);
  }
  for (double t : ck.curriculum.thresholds) detail::write_pod<double>(os, t);
  detail::write_pod<std::uint64_t>(os, ck.curriculum.selected.size());
  for (int s : ck.curriculum.selected) detail::write_pod<std::int32_t>(os, s);
  detail::write_pod<std::uint64_t>(os, ck.params.size());
  for (const auto& m : ck.params) detail::write_matrix(os, m);
  detail::write_pod<std::uint64_t>(os, ck.velocity.size());
  for (const auto& m : ck.velocity) detail::write_matrix(os, m);
  if (!os) throw std::runtime_error("failed writing " + path.string());
}

inline Checkpoint read_checkpoint_file(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot read " + path.string());
  char magic[4];
  is.read(magic, 4);
  if (!is || std::string(magic, 4) != "OWCK") {
    throw InternalConsistencyError("not a checkpoint file: " + path.string());
  }
  const auto version = detail::read_pod<std::uint32_t>(is);
  if (version != 1u) {
    throw InternalConsistencyError("unsupported checkpoint version");
  }
  Checkpoint ck;
  ck.epoch = detail::read_pod<std::int32_t>(is);
  ck.curriculum.base_tau = detail::read_pod<double>(is);
  const auto classes = detail::read_pod<std::uint64_t>(is);
  ck.curriculum.counters.resize(classes);
  for (auto& c : ck.curriculum.counters) {
    c = detail::read_pod<std::int64_t>(is);
  }
  ck.curriculum.thresholds.resize(classes);
  for (auto& t : ck.curriculum.thresholds) t = detail::read_pod<double>(is);
  const auto points = detail::read_pod<std::uint64_t>(is);
  ck.curriculum.selected.resize(points);
  for (auto& s : ck.curriculum.selected) {
    s = detail::read_pod<std::int32_t>(is);
  }
  const auto nparams = detail::read_pod<std::uint64_t>(is);
  ck.params.resize(nparams);
  for (auto& m : ck.params) m = detail::read_matrix(is);
  const auto nvel = detail::read_pod<std::uint64_t>(is);
  ck.velocity.resize(nvel);
  for (auto& m : ck.velocity) m = detail::read_matrix(is);
  return ck;
}

/// Per-epoch checkpoint archive. Always keeps checkpoints in memory; when
/// constructed with a directory it additionally writes one file per epoch
/// and can reload across processes.
class CheckpointStore {
 public:
  CheckpointStore() = default;
  explicit CheckpointStore(std::filesystem::path dir) : dir_(std::move(dir)) {
    std::filesystem::create_directories(dir_);
  }

  void save(const Checkpoint& ck) {
    mem_[ck.epoch] = ck;
    if (!dir_.empty()) write_checkpoint_file(path_of(ck.epoch), ck);
  }

  bool has(int epoch) const {
    if (mem_.count(epoch) > 0) return true;
    return !dir_.empty() && std::filesystem::exists(path_of(epoch));
  }

  Checkpoint load(int epoch) const {
    auto it = mem_.find(epoch);
    if (it != mem_.end()) return it->second;
    if (!dir_.empty() && std::filesystem::exists(path_of(epoch))) {
      return read_checkpoint_file(path_of(epoch));
    }
    throw InternalConsistencyError("no checkpoint for epoch " +
                                   std::to_string(epoch));
  }

  std::filesystem::path path_of(int epoch) const {
    char name[32];
    std::snprintf(name, sizeof(name), "epoch_%06d.ckpt", epoch);
    return dir_ / name;
  }

  bool persistent() const { return !dir_.empty(); }
  int latest_epoch() const {
    return mem_.empty() ? -1 : mem_.rbegin()->first;
  }

 private:
  std::map<int, Checkpoint> mem_;
  std::filesystem::path dir_;
};

struct StopReport {
  bool detected = false;
  int decline_epoch = -1;
  int stop_epoch = -1;  // checkpoint the run is finalized from
  int epochs_run = 0;
};

template <typename T>
concept GuardableTrainer = requires(T t, const Checkpoint& ck, int e) {
  { t.train_epoch() } -> std::convertible_to<EpochResult>;
  { t.make_checkpoint(e) } -> std::convertible_to<Checkpoint>;
  t.restore(ck);
  { t.max_epochs() } -> std::convertible_to<int>;
};

/// Train to max epochs or until the entropy-term trace shows a sharp
/// decline; on detection, roll back to the checkpoint a few epochs before
/// the decline. The hook sees (and may rewrite) each epoch result before it
/// enters the trace, which is how fault-injection tests replay a synthetic
/// collapse.
template <GuardableTrainer TrainerT, typename EpochHook>
StopReport guard_training(TrainerT& trainer, const GuardConfig& cfg,
                          CheckpointStore& store, EntropyTrace& trace,
                          EpochHook&& hook) {
  cfg.validate();
  StopReport report;
  for (int epoch = 0; epoch < trainer.max_epochs(); ++epoch) {
    EpochResult res = trainer.train_epoch();
    hook(epoch, res);
    store.save(trainer.make_checkpoint(epoch));
    trace.append(epoch, res.losses.le);
    report.epochs_run = epoch + 1;
    if (trace.size() < static_cast<std::size_t>(cfg.smoothing_window) + 1) {
      continue;
    }
    const std::optional<int> decline = detect_sharp_decline(trace, cfg);
    if (!decline) continue;
    report.detected = true;
    report.decline_epoch = *decline;
    report.stop_epoch = select_stop_epoch(*decline, cfg);
    if (!store.has(report.stop_epoch)) {
      throw InternalConsistencyError("missing checkpoint for stop epoch " +
                                     std::to_string(report.stop_epoch));
    }
    trainer.restore(store.load(report.stop_epoch));
    return report;
  }
  report.stop_epoch = report.epochs_run - 1;
  return report;
}

template <GuardableTrainer TrainerT>
StopReport guard_training(TrainerT& trainer, const GuardConfig& cfg,
                          CheckpointStore& store, EntropyTrace& trace) {
  return guard_training(trainer, cfg, store, trace,
                        [](int, EpochResult&) {});
}

}  // namespace owssl
