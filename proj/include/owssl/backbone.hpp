#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <memory>
#include <optional>
#include <random>
#include <stdexcept>
#include <vector>

#include "owssl/data.hpp"
#include "owssl/errors.hpp"
#include "owssl/model.hpp"
#include "owssl/regularizer.hpp"
#include "owssl/rng.hpp"
#include "owssl/scenario.hpp"

namespace owssl {

enum class BackboneFamily { Mlp, Conv };

struct ModelConfig {
  BackboneFamily family = BackboneFamily::Mlp;
  int hidden_dim = 64;     // mlp penultimate width
  int conv_channels = 8;   // conv filters (image data)
  int head_dim = 0;        // |C_seen| + |C_unseen|; 0 = derive from partition
  bool zero_head = false;

  void validate() const {
    if (hidden_dim < 1) throw ConfigError("hidden_dim must be positive");
    if (conv_channels < 1) throw ConfigError("conv_channels must be positive");
    if (head_dim < 0) throw ConfigError("head_dim must be non-negative");
  }
};

inline std::unique_ptr<Model> make_model(const ModelConfig& cfg,
                                         const DataShape& shape, int input_dim,
                                         int head_dim, std::uint64_t seed) {
  cfg.validate();
  if (cfg.head_dim != 0 && cfg.head_dim != head_dim) {
    throw ConfigError("head_dim does not match the class partition size");
  }
  switch (cfg.family) {
    case BackboneFamily::Mlp:
      return std::make_unique<MlpModel>(input_dim, cfg.hidden_dim, head_dim,
                                        seed, cfg.zero_head);
    case BackboneFamily::Conv:
      return std::make_unique<ConvModel>(shape, cfg.conv_channels, head_dim,
                                         seed, cfg.zero_head);
  }
  throw ConfigError("unknown backbone family");
}

struct TrainConfig {
  int batch_size = 64;        // labeled batch B
  int unlabeled_ratio = 7;    // unlabeled batch = ratio * B
  double learning_rate = 0.03;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  int max_epochs = 100;
  double base_threshold = 0.95;  // tau
  double lambda = 1.5;           // entropy-term weight
  std::uint64_t seed = 0;
  double weak_noise = 0.05;
  double strong_noise = 0.25;
  double strong_dropout = 0.3;

  void validate() const {
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
    if (unlabeled_ratio < 1) throw ConfigError("unlabeled_ratio must be >= 1");
    if (base_threshold <= 0.0 || base_threshold >= 1.0) {
      throw ConfigError("base_threshold must lie in (0, 1)");
    }
    if (lambda < 0.0) throw ConfigError("lambda must be >= 0");
    if (max_epochs < 1) throw ConfigError("max_epochs must be >= 1");
    if (weak_noise < 0.0 || strong_noise < 0.0) {
      throw ConfigError("augmentation noise must be >= 0");
    }
    if (strong_dropout < 0.0 || strong_dropout >= 1.0) {
      throw ConfigError("strong_dropout must lie in [0, 1)");
    }
  }
};

/// Dynamic per-class thresholds driven by learning-effect counters: each
/// unlabeled point contributes to the counter of its latest confidently
/// pseudo-labeled class; tau_c = tau * sigma_c / max(max_c' sigma_c',
/// #never-selected points), floored at a tiny positive value so thresholds
/// stay in (0, tau]. Thresholds start at the base tau.
struct CurriculumState {
  double base_tau = 0.95;
  std::vector<long long> counters;  // per class-slot learning effect
  std::vector<double> thresholds;   // tau_c per class-slot
  std::vector<int> selected;        // per unlabeled point: -1 or class-slot
  static constexpr double kThresholdFloor = 1e-6;

  static CurriculumState make(int num_classes, std::size_t num_unlabeled,
                              double tau) {
    if (num_classes < 1) throw std::invalid_argument("need >= 1 class");
    if (tau <= 0.0 || tau >= 1.0) {
      throw std::invalid_argument("tau must lie in (0, 1)");
    }
    CurriculumState s;
    s.base_tau = tau;
    s.counters.assign(static_cast<std::size_t>(num_classes), 0);
    s.thresholds.assign(static_cast<std::size_t>(num_classes), tau);
    s.selected.assign(num_unlabeled, -1);
    return s;
  }

  void record_selection(std::size_t point_id, int class_slot) {
    if (point_id >= selected.size()) {
      throw std::invalid_argument("unlabeled point id out of range");
    }
    const int prev = selected[point_id];
    if (prev == class_slot) return;
    if (prev >= 0) --counters[static_cast<std::size_t>(prev)];
    ++counters[static_cast<std::size_t>(class_slot)];
    selected[point_id] = class_slot;
  }

  void recompute_thresholds() {
    long long max_count = 0;
    long long used = 0;
    for (long long c : counters) {
      max_count = std::max(max_count, c);
      used += c;
    }
    const long long unused = static_cast<long long>(selected.size()) - used;
    const long long denom = std::max(max_count, unused);
    for (std::size_t c = 0; c < counters.size(); ++c) {
      double effect =
          denom > 0 ? static_cast<double>(counters[c]) / denom : 1.0;
      thresholds[c] =
          std::clamp(base_tau * effect, kThresholdFloor, base_tau);
    }
  }

  void validate() const {
    if (counters.size() != thresholds.size()) {
      throw InternalConsistencyError("curriculum vectors disagree");
    }
    long long total = 0;
    for (long long c : counters) {
      if (c < 0) throw InternalConsistencyError("negative counter");
      total += c;
    }
    if (total > static_cast<long long>(selected.size())) {
      throw InternalConsistencyError("counters exceed unlabeled pool");
    }
    for (double t : thresholds) {
      if (!(t > 0.0) || t > base_tau + 1e-12) {
        throw InternalConsistencyError("threshold outside (0, tau]");
      }
    }
  }
};

inline double supervised_loss(const Eigen::MatrixXd& probs,
                              const std::vector<int>& slot_labels,
                              int num_seen) {
  if (probs.rows() != static_cast<Eigen::Index>(slot_labels.size())) {
    throw std::invalid_argument("labels do not match batch size");
  }
  if (probs.rows() == 0) throw std::invalid_argument("empty labeled batch");
  double sum = 0.0;
  for (Eigen::Index b = 0; b < probs.rows(); ++b) {
    const int y = slot_labels[static_cast<std::size_t>(b)];
    if (y < 0 || y >= num_seen) {
      throw std::invalid_argument("label outside the seen class set");
    }
    sum -= std::log(std::max(probs(b, y), kLogFloor));
  }
  return sum / static_cast<double>(probs.rows());
}

inline Eigen::MatrixXd supervised_grad_probs(const Eigen::MatrixXd& probs,
                                             const std::vector<int>& slot_labels) {
  Eigen::MatrixXd dp = Eigen::MatrixXd::Zero(probs.rows(), probs.cols());
  const double scale = 1.0 / static_cast<double>(probs.rows());
  for (Eigen::Index b = 0; b < probs.rows(); ++b) {
    const int y = slot_labels[static_cast<std::size_t>(b)];
    dp(b, y) = -scale / std::max(probs(b, y), kLogFloor);
  }
  return dp;
}

struct UnsupervisedLossResult {
  double value = 0.0;
  std::vector<bool> mask;        // included in the consistency loss
  std::vector<int> pseudo_slots; // argmax of the weak rows
};

/// Pseudo-label consistency loss: pseudo-label = argmax of the weak row,
/// included iff its weak confidence clears the dynamic threshold of the
/// pseudo-class; loss = mean cross-entropy of the strong rows over included
/// points. Updates the curriculum counters and thresholds in place.
/// `point_ids` ties batch rows to unlabeled-pool positions; when empty,
/// rows are treated as fresh points (counters only accumulate).
inline UnsupervisedLossResult unsupervised_loss(
    const Eigen::MatrixXd& weak_probs, const Eigen::MatrixXd& strong_probs,
    CurriculumState& state, const std::vector<std::size_t>& point_ids = {}) {
  if (weak_probs.rows() != strong_probs.rows() ||
      weak_probs.cols() != strong_probs.cols()) {
    throw std::invalid_argument("weak/strong batch shape mismatch");
  }
  if (weak_probs.cols() != static_cast<Eigen::Index>(state.counters.size())) {
    throw std::invalid_argument("probability width does not match classes");
  }
  if (!point_ids.empty() &&
      point_ids.size() != static_cast<std::size_t>(weak_probs.rows())) {
    throw std::invalid_argument("point ids do not match batch size");
  }

  UnsupervisedLossResult res;
  const std::size_t n = static_cast<std::size_t>(weak_probs.rows());
  res.mask.assign(n, false);
  res.pseudo_slots.assign(n, 0);
  double sum = 0.0;
  std::size_t included = 0;
  for (std::size_t b = 0; b < n; ++b) {
    Eigen::Index arg = 0;
    const double conf =
        weak_probs.row(static_cast<Eigen::Index>(b)).maxCoeff(&arg);
    res.pseudo_slots[b] = static_cast<int>(arg);
    if (conf >= state.thresholds[static_cast<std::size_t>(arg)]) {
      res.mask[b] = true;
      ++included;
      sum -= std::log(std::max(
          strong_probs(static_cast<Eigen::Index>(b), arg), kLogFloor));
      if (point_ids.empty()) {
        ++state.counters[static_cast<std::size_t>(arg)];
      } else {
        state.record_selection(point_ids[b], static_cast<int>(arg));
      }
    }
  }
  res.value = included > 0 ? sum / static_cast<double>(included) : 0.0;
  state.recompute_thresholds();
  return res;
}

inline Eigen::MatrixXd unsupervised_grad_probs(
    const Eigen::MatrixXd& strong_probs, const UnsupervisedLossResult& res) {
  Eigen::MatrixXd dp = Eigen::MatrixXd::Zero(strong_probs.rows(),
                                             strong_probs.cols());
  std::size_t included = 0;
  for (bool m : res.mask) included += m ? 1 : 0;
  if (included == 0) return dp;
  const double scale = 1.0 / static_cast<double>(included);
  for (Eigen::Index b = 0; b < strong_probs.rows(); ++b) {
    if (!res.mask[static_cast<std::size_t>(b)]) continue;
    const int y = res.pseudo_slots[static_cast<std::size_t>(b)];
    dp(b, y) = -scale / std::max(strong_probs(b, y), kLogFloor);
  }
  return dp;
}

inline Eigen::MatrixXd weak_augment(const Eigen::MatrixXd& x, double noise,
                                    Rng& rng) {
  if (noise == 0.0) return x;
  std::normal_distribution<double> dist(0.0, noise);
  Eigen::MatrixXd out = x;
  for (Eigen::Index i = 0; i < out.rows(); ++i) {
    for (Eigen::Index j = 0; j < out.cols(); ++j) out(i, j) += dist(rng);
  }
  return out;
}

inline Eigen::MatrixXd strong_augment(const Eigen::MatrixXd& x, double noise,
                                      double dropout, Rng& rng) {
  std::normal_distribution<double> dist(0.0, noise);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  Eigen::MatrixXd out = x;
  for (Eigen::Index i = 0; i < out.rows(); ++i) {
    for (Eigen::Index j = 0; j < out.cols(); ++j) {
      out(i, j) += dist(rng);
      if (unif(rng) < dropout) out(i, j) = 0.0;
    }
  }
  return out;
}

enum class RegularizerMode { Off, Uniform, Prior };

/// Full trainer state snapshot, sufficient to resume or roll back a run.
struct Checkpoint {
  int epoch = -1;
  ParamList params;
  ParamList velocity;
  CurriculumState curriculum;
};

struct EpochResult {
  LossBreakdown losses;   // per-batch averages
  double mask_rate = 0.0; // fraction of unlabeled points included
  int num_batches = 0;
};

/// Interleaved labeled/unlabeled SGD over a widened head. One epoch is one
/// pass over the unlabeled set; labeled batches cycle with reshuffling. The
/// entropy term is computed on the weak-augmented unlabeled batch and its
/// gradient flows through that branch only.
class Trainer {
 public:
  Trainer(const DatasetBundle& bundle, const ModelConfig& mcfg,
          const TrainConfig& tcfg, RegularizerMode mode,
          std::optional<PriorDistribution> prior = std::nullopt)
      : bundle_(&bundle),
        tcfg_(tcfg),
        mode_(mode),
        rng_(make_rng(tcfg.seed, /*stream=*/21)) {
    tcfg.validate();
    bundle.validate();
    if (mode == RegularizerMode::Prior) {
      if (!prior) throw ConfigError("prior mode needs a prior distribution");
      if (prior->g.size() != bundle.partition.num_classes) {
        throw ConfigError("prior width does not match the class count");
      }
      prior_ = std::move(prior);
    }
    const int head = bundle.partition.num_classes;
    model_ = make_model(mcfg, bundle.labeled.shape,
                        static_cast<int>(bundle.labeled.x.cols()), head,
                        tcfg.seed);
    optimizer_ = std::make_unique<SgdOptimizer>(
        model_->params(),
        SgdConfig{tcfg.learning_rate, tcfg.momentum, tcfg.weight_decay});
    curriculum_ = CurriculumState::make(
        head, static_cast<std::size_t>(bundle.unlabeled.rows()),
        tcfg.base_threshold);
    labeled_slots_.reserve(bundle.labeled.labels.size());
    for (int y : bundle.labeled.labels) {
      labeled_slots_.push_back(bundle.partition.slot_of(y));
    }
    reshuffle_labeled();
  }

  EpochResult train_epoch() {
    const Eigen::Index n_unlab = bundle_->unlabeled.rows();
    const Eigen::Index chunk =
        static_cast<Eigen::Index>(tcfg_.unlabeled_ratio) * tcfg_.batch_size;
    std::vector<std::size_t> order = shuffled_indices(
        static_cast<std::size_t>(n_unlab), rng_);

    EpochResult epoch;
    double ls_sum = 0.0, lu_sum = 0.0, le_sum = 0.0;
    double included = 0.0;
    int batch_index = 0;
    for (Eigen::Index start = 0; start < n_unlab; start += chunk) {
      const Eigen::Index take = std::min(chunk, n_unlab - start);
      std::vector<std::size_t> ids(order.begin() + start,
                                   order.begin() + start + take);
      const LossBreakdown bk = train_batch(ids, batch_index);
      ls_sum += bk.ls;
      lu_sum += bk.lu;
      le_sum += bk.le;
      included += last_mask_count_;
      ++batch_index;
    }
    if (batch_index == 0) {
      throw InsufficientDataError("no unlabeled data to train on");
    }
    epoch.num_batches = batch_index;
    epoch.losses = LossBreakdown{
        ls_sum / batch_index, lu_sum / batch_index, le_sum / batch_index,
        tcfg_.lambda,
        (ls_sum + lu_sum + tcfg_.lambda * le_sum) / batch_index};
    epoch.mask_rate = included / static_cast<double>(n_unlab);
    ++epochs_run_;
    return epoch;
  }

  ForwardResult evaluate(const Eigen::MatrixXd& x) const {
    return model_->forward(x);
  }

  Checkpoint make_checkpoint(int epoch) const {
    return Checkpoint{epoch, model_->params(), optimizer_->velocity(),
                      curriculum_};
  }

  void restore(const Checkpoint& ck) {
    if (ck.params.size() != model_->params().size()) {
      throw InternalConsistencyError("checkpoint does not fit this model");
    }
    model_->params() = ck.params;
    optimizer_->set_velocity(ck.velocity);
    curriculum_ = ck.curriculum;
    epochs_run_ = ck.epoch + 1;
  }

  const Model& model() const { return *model_; }
  Model& model() { return *model_; }
  const CurriculumState& curriculum() const { return curriculum_; }
  const TrainConfig& config() const { return tcfg_; }
  const DatasetBundle& bundle() const { return *bundle_; }
  int epochs_run() const { return epochs_run_; }
  int max_epochs() const { return tcfg_.max_epochs; }

 private:
  void reshuffle_labeled() {
    labeled_order_ = shuffled_indices(labeled_slots_.size(), rng_);
    labeled_cursor_ = 0;
  }

  std::vector<std::size_t> next_labeled_batch() {
    std::vector<std::size_t> ids;
    ids.reserve(static_cast<std::size_t>(tcfg_.batch_size));
    for (int i = 0; i < tcfg_.batch_size; ++i) {
      if (labeled_cursor_ >= labeled_order_.size()) reshuffle_labeled();
      ids.push_back(labeled_order_[labeled_cursor_++]);
    }
    return ids;
  }

  LossBreakdown train_batch(const std::vector<std::size_t>& unlabeled_ids,
                            int batch_index) {
    model_->zero_grad();

    // Labeled branch.
    const std::vector<std::size_t> lab_ids = next_labeled_batch();
    Eigen::MatrixXd xl(static_cast<Eigen::Index>(lab_ids.size()),
                       bundle_->labeled.x.cols());
    std::vector<int> yl(lab_ids.size());
    for (std::size_t i = 0; i < lab_ids.size(); ++i) {
      xl.row(static_cast<Eigen::Index>(i)) =
          bundle_->labeled.x.row(static_cast<Eigen::Index>(lab_ids[i]));
      yl[i] = labeled_slots_[lab_ids[i]];
    }
    xl = weak_augment(xl, tcfg_.weak_noise, rng_);
    const ForwardResult lab = model_->forward_cached(xl);
    const double ls =
        supervised_loss(lab.probs, yl, bundle_->partition.num_seen());
    model_->backward(supervised_grad_probs(lab.probs, yl));

    // Unlabeled branch: weak pass feeds both the pseudo-labels and the
    // batch-mean entropy term.
    Eigen::MatrixXd xu(static_cast<Eigen::Index>(unlabeled_ids.size()),
                       bundle_->unlabeled.cols());
    for (std::size_t i = 0; i < unlabeled_ids.size(); ++i) {
      xu.row(static_cast<Eigen::Index>(i)) =
          bundle_->unlabeled.row(static_cast<Eigen::Index>(unlabeled_ids[i]));
    }
    const Eigen::MatrixXd xw = weak_augment(xu, tcfg_.weak_noise, rng_);
    const Eigen::MatrixXd xs =
        strong_augment(xu, tcfg_.strong_noise, tcfg_.strong_dropout, rng_);

    const ForwardResult weak = model_->forward_cached(xw);
    double le = 0.0;
    if (mode_ != RegularizerMode::Off) {
      const Eigen::VectorXd p_bar = batch_mean_prediction(weak.probs);
      le = mode_ == RegularizerMode::Uniform
               ? uniform_entropy_regularizer(p_bar)
               : prior_kl_regularizer(p_bar, *prior_);
      if (tcfg_.lambda != 0.0) {
        const Eigen::MatrixXd dp =
            mode_ == RegularizerMode::Uniform
                ? uniform_entropy_grad_probs(weak.probs)
                : prior_kl_grad_probs(weak.probs, *prior_);
        model_->backward(tcfg_.lambda * dp);
      }
    }

    const ForwardResult strong = model_->forward_cached(xs);
    const UnsupervisedLossResult ures =
        unsupervised_loss(weak.probs, strong.probs, curriculum_,
                          unlabeled_ids);
    last_mask_count_ = 0.0;
    for (bool m : ures.mask) last_mask_count_ += m ? 1.0 : 0.0;
    model_->backward(unsupervised_grad_probs(strong.probs, ures));

    LossBreakdown bk;
    try {
      bk = combine_losses(ls, ures.value, le, tcfg_.lambda);
    } catch (const DivergedTrainingError&) {
      throw DivergedTrainingError("non-finite loss during training",
                                  batch_index);
    }
    optimizer_->step(model_->params(), model_->grads());
    return bk;
  }

  const DatasetBundle* bundle_;
  TrainConfig tcfg_;
  RegularizerMode mode_;
  std::optional<PriorDistribution> prior_;
  Rng rng_;
  std::unique_ptr<Model> model_;
  std::unique_ptr<SgdOptimizer> optimizer_;
  CurriculumState curriculum_;
  std::vector<int> labeled_slots_;
  std::vector<std::size_t> labeled_order_;
  std::size_t labeled_cursor_ = 0;
  double last_mask_count_ = 0.0;
  int epochs_run_ = 0;
};

}  // namespace owssl
