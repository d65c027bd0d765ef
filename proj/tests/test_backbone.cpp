#include "helpers.hpp"

#include <cmath>
#include <optional>

using namespace owssl;
using Catch::Matchers::WithinAbs;

namespace {

DatasetBundle small_bundle(std::uint64_t seed) {
  const Dataset full = make_synthetic_blobs(4, 5, 30, 6.0, seed);
  const auto [train, test] = hold_out_split(full, 5, seed);
  const ClassPartition partition = split_classes(4, 1, seed);
  return build_balanced_fewshot(train, test, partition, 3, seed);
}

TrainConfig small_config() {
  TrainConfig cfg;
  cfg.batch_size = 8;
  cfg.unlabeled_ratio = 3;
  cfg.learning_rate = 0.05;
  cfg.max_epochs = 10;
  cfg.seed = 7;
  return cfg;
}

}  // namespace

TEST_CASE("supervised loss reproduces closed-form values", "[backbone]") {
  Eigen::MatrixXd onehot = Eigen::MatrixXd::Zero(3, 4);
  onehot(0, 1) = 1.0;
  onehot(1, 0) = 1.0;
  onehot(2, 2) = 1.0;
  REQUIRE(supervised_loss(onehot, {1, 0, 2}, 3) == 0.0);

  const Eigen::MatrixXd uniform = Eigen::MatrixXd::Constant(4, 10, 0.1);
  REQUIRE_THAT(supervised_loss(uniform, {0, 3, 7, 9}, 10),
               WithinAbs(2.302585092994046, 1e-12));

  Eigen::MatrixXd two(2, 3);
  two << 0.50, 0.30, 0.20,
         0.25, 0.50, 0.25;
  REQUIRE_THAT(supervised_loss(two, {0, 0}, 2),
               WithinAbs(1.0397207708399179, 1e-12));
}

TEST_CASE("supervised loss rejects bad labels and shapes", "[backbone]") {
  const Eigen::MatrixXd probs = testutil::random_row_stochastic(4, 5, 3);
  REQUIRE_THROWS_AS(supervised_loss(probs, {0, 1, 2}, 3),
                    std::invalid_argument);
  REQUIRE_THROWS_AS(supervised_loss(probs, {0, 1, 3, 0}, 3),
                    std::invalid_argument);
  REQUIRE_THROWS_AS(supervised_loss(probs, {0, 1, -1, 0}, 3),
                    std::invalid_argument);
}

TEST_CASE("supervised gradient matches finite differences", "[backbone]") {
  const Eigen::MatrixXd z = testutil::random_logits(5, 4, 11);
  const std::vector<int> labels{0, 3, 1, 2, 0};
  const auto loss = [&](const Eigen::MatrixXd& logits) {
    return supervised_loss(detail::softmax_rows(logits), labels, 4);
  };
  const Eigen::MatrixXd probs = detail::softmax_rows(z);
  const Eigen::MatrixXd analytic =
      detail::softmax_backward(probs, supervised_grad_probs(probs, labels));
  const Eigen::MatrixXd numeric = testutil::numeric_grad(z, loss);
  REQUIRE(testutil::max_rel_error(analytic, numeric) < 1e-6);
}

TEST_CASE("consistency loss skips batches below threshold", "[backbone]") {
  CurriculumState state = CurriculumState::make(3, 6, 0.95);
  Eigen::MatrixXd weak(2, 3);
  weak << 0.5, 0.3, 0.2,
          0.4, 0.4, 0.2;
  const Eigen::MatrixXd strong = testutil::random_row_stochastic(2, 3, 5);
  const UnsupervisedLossResult res =
      unsupervised_loss(weak, strong, state, {0, 1});
  REQUIRE(res.value == 0.0);
  REQUIRE(res.mask == std::vector<bool>{false, false});
  REQUIRE(state.counters == std::vector<long long>{0, 0, 0});
  // Nothing selected yet, so thresholds fall to the floor for the next pass.
  for (double t : state.thresholds) {
    REQUIRE(t == CurriculumState::kThresholdFloor);
  }
}

TEST_CASE("consistency loss is zero for agreeing one-hot pairs", "[backbone]") {
  CurriculumState state = CurriculumState::make(2, 4, 0.95);
  Eigen::MatrixXd onehot(3, 2);
  onehot << 1, 0,
            0, 1,
            1, 0;
  const UnsupervisedLossResult res =
      unsupervised_loss(onehot, onehot, state, {0, 1, 2});
  REQUIRE(res.value == 0.0);
  REQUIRE(res.mask == std::vector<bool>{true, true, true});
  REQUIRE(res.pseudo_slots == std::vector<int>{0, 1, 0});
  REQUIRE(state.counters == std::vector<long long>{2, 1});
}

TEST_CASE("confident rows pass and feed the counters", "[backbone]") {
  CurriculumState state = CurriculumState::make(2, 3, 0.95);
  Eigen::MatrixXd weak(3, 2);
  weak << 0.99, 0.01,
          0.80, 0.20,
          0.03, 0.97;
  Eigen::MatrixXd strong(3, 2);
  strong << 0.5, 0.5,
            0.9, 0.1,
            0.25, 0.75;
  const UnsupervisedLossResult res =
      unsupervised_loss(weak, strong, state, {0, 1, 2});
  REQUIRE(res.mask == std::vector<bool>{true, false, true});
  REQUIRE(res.pseudo_slots == std::vector<int>{0, 0, 1});
  REQUIRE(state.counters == std::vector<long long>{1, 1});
  REQUIRE_THAT(res.value,
               WithinAbs(-(std::log(0.5) + std::log(0.75)) / 2.0, 1e-12));

  const Eigen::MatrixXd dp = unsupervised_grad_probs(strong, res);
  REQUIRE_THAT(dp(0, 0), WithinAbs(-0.5 / 0.5, 1e-12));
  REQUIRE(dp(1, 0) == 0.0);
  REQUIRE(dp(1, 1) == 0.0);
  REQUIRE_THAT(dp(2, 1), WithinAbs(-0.5 / 0.75, 1e-12));
}

TEST_CASE("thresholds follow the learning-effect ratio", "[backbone]") {
  CurriculumState state = CurriculumState::make(2, 10, 0.8);
  Eigen::MatrixXd weak(4, 2);
  weak << 0.90, 0.10,
          0.85, 0.15,
          0.95, 0.05,
          0.10, 0.90;
  unsupervised_loss(weak, weak, state, {0, 1, 2, 3});
  REQUIRE(state.counters == std::vector<long long>{3, 1});
  // denom = max(3, 10 - 4) = 6
  REQUIRE_THAT(state.thresholds[0], WithinAbs(0.8 * (3.0 / 6.0), 1e-15));
  REQUIRE_THAT(state.thresholds[1], WithinAbs(0.8 * (1.0 / 6.0), 1e-15));
  state.validate();
}

TEST_CASE("consistency loss validates its shapes", "[backbone]") {
  CurriculumState state = CurriculumState::make(3, 4, 0.9);
  const Eigen::MatrixXd a = testutil::random_row_stochastic(2, 3, 1);
  const Eigen::MatrixXd b = testutil::random_row_stochastic(3, 3, 2);
  const Eigen::MatrixXd wide = testutil::random_row_stochastic(2, 4, 3);
  REQUIRE_THROWS_AS(unsupervised_loss(a, b, state), std::invalid_argument);
  REQUIRE_THROWS_AS(unsupervised_loss(wide, wide, state),
                    std::invalid_argument);
  REQUIRE_THROWS_AS(unsupervised_loss(a, a, state, {0}),
                    std::invalid_argument);
}

TEST_CASE("inclusion is monotone in weak confidence", "[backbone]") {
  bool seen_included = false;
  for (double conf : {0.50, 0.70, 0.90, 0.93, 0.94, 0.96, 0.99}) {
    CurriculumState state = CurriculumState::make(2, 2, 0.95);
    Eigen::MatrixXd weak(1, 2);
    weak << conf, 1.0 - conf;
    const auto res = unsupervised_loss(weak, weak, state, {0});
    if (seen_included) REQUIRE(res.mask[0]);
    seen_included = seen_included || res.mask[0];
  }
  REQUIRE(seen_included);
}

TEST_CASE("reselection moves a point's counter contribution", "[backbone]") {
  CurriculumState state = CurriculumState::make(3, 5, 0.9);
  state.record_selection(2, 0);
  REQUIRE(state.counters == std::vector<long long>{1, 0, 0});
  state.record_selection(2, 1);
  REQUIRE(state.counters == std::vector<long long>{0, 1, 0});
  REQUIRE(state.selected[2] == 1);
  state.record_selection(2, 1);
  REQUIRE(state.counters == std::vector<long long>{0, 1, 0});
  state.recompute_thresholds();
  state.validate();
  REQUIRE_THROWS_AS(state.record_selection(9, 0), std::invalid_argument);
}

TEST_CASE("curriculum invariants are enforced", "[backbone]") {
  REQUIRE_THROWS_AS(CurriculumState::make(0, 4, 0.9), std::invalid_argument);
  REQUIRE_THROWS_AS(CurriculumState::make(3, 4, 1.0), std::invalid_argument);

  CurriculumState state = CurriculumState::make(3, 4, 0.9);
  state.validate();
  CurriculumState negative = state;
  negative.counters[0] = -1;
  REQUIRE_THROWS_AS(negative.validate(), InternalConsistencyError);
  CurriculumState overfull = state;
  overfull.counters = {3, 2, 1};
  REQUIRE_THROWS_AS(overfull.validate(), InternalConsistencyError);
  CurriculumState high = state;
  high.thresholds[1] = 0.95;
  REQUIRE_THROWS_AS(high.validate(), InternalConsistencyError);
}

TEST_CASE("augmentations are deterministic given the generator", "[backbone]") {
  const Eigen::MatrixXd x = testutil::random_logits(4, 6, 21);
  Rng a = make_rng(5, 1);
  REQUIRE(testutil::exact_equal(weak_augment(x, 0.0, a), x));

  Rng b1 = make_rng(5, 2), b2 = make_rng(5, 2);
  REQUIRE(testutil::exact_equal(weak_augment(x, 0.1, b1),
                                weak_augment(x, 0.1, b2)));

  Rng c1 = make_rng(5, 3), c2 = make_rng(5, 3);
  const Eigen::MatrixXd s1 = strong_augment(x, 0.25, 0.5, c1);
  REQUIRE(testutil::exact_equal(s1, strong_augment(x, 0.25, 0.5, c2)));
  REQUIRE((s1.array() == 0.0).count() > 0);
}

TEST_CASE("train config rejects out-of-range values", "[backbone]") {
  TrainConfig bad = small_config();
  bad.batch_size = 0;
  REQUIRE_THROWS_AS(bad.validate(), ConfigError);
  bad = small_config();
  bad.base_threshold = 1.0;
  REQUIRE_THROWS_AS(bad.validate(), ConfigError);
  bad = small_config();
  bad.lambda = -0.5;
  REQUIRE_THROWS_AS(bad.validate(), ConfigError);
  bad = small_config();
  bad.strong_dropout = 1.0;
  REQUIRE_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("trainer runs epochs and improves the labeled fit", "[backbone]") {
  const DatasetBundle bundle = small_bundle(1);
  Trainer trainer(bundle, ModelConfig{}, small_config(),
                  RegularizerMode::Uniform);
  const EpochResult first = trainer.train_epoch();
  REQUIRE(trainer.epochs_run() == 1);
  REQUIRE(first.num_batches ==
          (static_cast<int>(bundle.unlabeled.rows()) + 23) / 24);
  REQUIRE(std::isfinite(first.losses.total));
  REQUIRE(first.losses.le <= 0.0);
  REQUIRE(first.mask_rate >= 0.0);
  REQUIRE(first.mask_rate <= 1.0);

  double best_ls = first.losses.ls;
  for (int e = 1; e < 8; ++e) {
    best_ls = std::min(best_ls, trainer.train_epoch().losses.ls);
  }
  REQUIRE(trainer.epochs_run() == 8);
  REQUIRE(best_ls < first.losses.ls);

  const ForwardResult out = trainer.evaluate(bundle.test.x);
  REQUIRE(out.probs.rows() == bundle.test.x.rows());
  for (Eigen::Index r = 0; r < out.probs.rows(); ++r) {
    REQUIRE_THAT(out.probs.row(r).sum(), WithinAbs(1.0, 1e-9));
  }
}

TEST_CASE("disabling the weight leaves the backbone untouched", "[backbone]") {
  const DatasetBundle bundle = small_bundle(2);
  TrainConfig cfg = small_config();
  cfg.lambda = 0.0;
  Trainer off(bundle, ModelConfig{}, cfg, RegularizerMode::Off);
  Trainer uniform(bundle, ModelConfig{}, cfg, RegularizerMode::Uniform);
  for (int e = 0; e < 4; ++e) {
    const EpochResult a = off.train_epoch();
    const EpochResult b = uniform.train_epoch();
    REQUIRE(a.losses.ls == b.losses.ls);
    REQUIRE(a.losses.lu == b.losses.lu);
    REQUIRE(a.losses.le == 0.0);
    REQUIRE(b.losses.le < 0.0);
    REQUIRE(a.mask_rate == b.mask_rate);
  }
}

TEST_CASE("prior mode requires a matching prior", "[backbone]") {
  const DatasetBundle bundle = small_bundle(3);
  REQUIRE_THROWS_AS(
      Trainer(bundle, ModelConfig{}, small_config(), RegularizerMode::Prior),
      ConfigError);
  REQUIRE_THROWS_AS(
      Trainer(bundle, ModelConfig{}, small_config(), RegularizerMode::Prior,
              PriorDistribution::uniform(3)),
      ConfigError);
  Trainer ok(bundle, ModelConfig{}, small_config(), RegularizerMode::Prior,
             PriorDistribution::uniform(4));
  const EpochResult res = ok.train_epoch();
  REQUIRE(res.losses.le >= 0.0);  // KL to the prior
}

TEST_CASE("checkpoints capture and restore the full trainer state",
          "[backbone]") {
  const DatasetBundle bundle = small_bundle(4);
  Trainer trainer(bundle, ModelConfig{}, small_config(),
                  RegularizerMode::Uniform);
  trainer.train_epoch();
  trainer.train_epoch();
  const Checkpoint ck = trainer.make_checkpoint(1);
  trainer.train_epoch();
  trainer.train_epoch();
  bool drifted = false;
  for (std::size_t p = 0; p < ck.params.size(); ++p) {
    drifted = drifted ||
              !testutil::exact_equal(trainer.model().params()[p], ck.params[p]);
  }
  REQUIRE(drifted);

  trainer.restore(ck);
  REQUIRE(trainer.epochs_run() == 2);
  for (std::size_t p = 0; p < ck.params.size(); ++p) {
    REQUIRE(testutil::exact_equal(trainer.model().params()[p], ck.params[p]));
  }
  REQUIRE(trainer.curriculum().counters == ck.curriculum.counters);
  REQUIRE(trainer.curriculum().selected == ck.curriculum.selected);
  REQUIRE(trainer.curriculum().thresholds == ck.curriculum.thresholds);
}
