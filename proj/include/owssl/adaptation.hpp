#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cstdint>
#include <limits>
#include <vector>

#include "owssl/data.hpp"
#include "owssl/errors.hpp"
#include "owssl/metrics.hpp"
#include "owssl/rng.hpp"

namespace owssl {

/// Per-example accept/reject outcome of the confidence threshold test.
/// `seen_class` is the class id behind the argmax over the seen head
/// entries; `confidence` is the max of the probabilities renormalized over
/// the seen entries.
struct RejectDecision {
  bool accepted = false;
  int seen_slot = 0;
  int seen_class = 0;
  double confidence = 0.0;
};

inline std::vector<RejectDecision> reject_by_confidence(
    const Eigen::MatrixXd& probs, const ClassPartition& partition,
    double threshold) {
  const int num_seen = partition.num_seen();
  if (num_seen <= 0) {
    throw std::invalid_argument("seen class set must be non-empty");
  }
  if (probs.cols() < num_seen) {
    throw std::invalid_argument("probability head narrower than seen set");
  }
  if (threshold < 0.0 || threshold > 1.0) {
    throw std::invalid_argument("threshold must lie in [0, 1]");
  }
  std::vector<RejectDecision> out(static_cast<std::size_t>(probs.rows()));
  for (Eigen::Index i = 0; i < probs.rows(); ++i) {
    const auto seen_part = probs.row(i).head(num_seen);
    const double mass = seen_part.sum();
    Eigen::Index best = 0;
    const double top = seen_part.maxCoeff(&best);
    const double conf = mass > 0.0 ? top / mass : 1.0 / num_seen;
    out[static_cast<std::size_t>(i)] =
        RejectDecision{conf >= threshold, static_cast<int>(best),
                       partition.class_at_slot(static_cast<int>(best)), conf};
  }
  return out;
}

/// K-means result; `wcss_per_iter` records the within-cluster sum of squares
/// after every assignment step (non-increasing by construction).
struct KMeansResult {
  std::vector<int> assign;
  Eigen::MatrixXd centroids;
  std::vector<double> wcss_per_iter;
  int iterations = 0;
};

namespace detail {

inline std::pair<int, double> nearest_centroid(const Eigen::MatrixXd& centroids,
                                               const Eigen::RowVectorXd& p) {
  int best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  for (Eigen::Index c = 0; c < centroids.rows(); ++c) {
    const double d = (centroids.row(c) - p).squaredNorm();
    if (d < best_d) {  // ties keep the lowest cluster index
      best_d = d;
      best = static_cast<int>(c);
    }
  }
  return {best, best_d};
}

}  // namespace detail

/// Lloyd iterations from a seeded greedy-spread (farthest point)
/// initialization. Ties in nearest-centroid assignment break toward the
/// lowest cluster index; empty clusters are re-seeded at the point farthest
/// from its current centroid.
inline KMeansResult kmeans_cluster(const Eigen::MatrixXd& points, int k,
                                   std::uint64_t seed, int max_iters = 100) {
  const Eigen::Index n = points.rows();
  if (k <= 0) throw std::invalid_argument("k must be positive");
  if (n < k) {
    throw std::invalid_argument("k-means needs at least k points");
  }

  Rng rng = make_rng(seed, /*stream=*/7);
  KMeansResult res;
  res.centroids.resize(k, points.cols());

  // Greedy spread: random first centroid, then repeatedly the point farthest
  // from its nearest chosen centroid.
  std::uniform_int_distribution<Eigen::Index> first(0, n - 1);
  res.centroids.row(0) = points.row(first(rng));
  std::vector<double> dist2(static_cast<std::size_t>(n),
                            std::numeric_limits<double>::infinity());
  for (int c = 1; c < k; ++c) {
    Eigen::Index far_idx = 0;
    double far_d = -1.0;
    for (Eigen::Index i = 0; i < n; ++i) {
      const double d =
          (points.row(i) - res.centroids.row(c - 1)).squaredNorm();
      dist2[static_cast<std::size_t>(i)] =
          std::min(dist2[static_cast<std::size_t>(i)], d);
      if (dist2[static_cast<std::size_t>(i)] > far_d) {
        far_d = dist2[static_cast<std::size_t>(i)];
        far_idx = i;
      }
    }
    res.centroids.row(c) = points.row(far_idx);
  }

  res.assign.assign(static_cast<std::size_t>(n), -1);
  for (int iter = 0; iter < max_iters; ++iter) {
    bool changed = false;
    double wcss = 0.0;
    for (Eigen::Index i = 0; i < n; ++i) {
      auto [best, d] = detail::nearest_centroid(res.centroids, points.row(i));
      wcss += d;
      if (res.assign[static_cast<std::size_t>(i)] != best) {
        res.assign[static_cast<std::size_t>(i)] = best;
        changed = true;
      }
    }
    res.wcss_per_iter.push_back(wcss);
    res.iterations = iter + 1;
    if (!changed) break;

    Eigen::MatrixXd sums = Eigen::MatrixXd::Zero(k, points.cols());
    std::vector<long long> sizes(static_cast<std::size_t>(k), 0);
    for (Eigen::Index i = 0; i < n; ++i) {
      sums.row(res.assign[static_cast<std::size_t>(i)]) += points.row(i);
      ++sizes[static_cast<std::size_t>(res.assign[static_cast<std::size_t>(i)])];
    }
    for (int c = 0; c < k; ++c) {
      if (sizes[static_cast<std::size_t>(c)] > 0) {
        res.centroids.row(c) =
            sums.row(c) / static_cast<double>(sizes[static_cast<std::size_t>(c)]);
      } else {
        // Re-seed an empty cluster at the point farthest from its centroid.
        Eigen::Index far_idx = 0;
        double far_d = -1.0;
        for (Eigen::Index i = 0; i < n; ++i) {
          const double d =
              (points.row(i) -
               res.centroids.row(res.assign[static_cast<std::size_t>(i)]))
                  .squaredNorm();
          if (d > far_d) {
            far_d = d;
            far_idx = i;
          }
        }
        res.centroids.row(c) = points.row(far_idx);
      }
    }
  }
  return res;
}

/// Merge accept/reject decisions with the clustering of the rejected points
/// into one full-label prediction per example. `cluster_of_rejected` is
/// aligned with the subsequence of rejected examples, in example order.
inline std::vector<OpenLabel> assemble_open_prediction(
    const std::vector<RejectDecision>& decisions,
    const std::vector<int>& cluster_of_rejected,
    const ClassPartition& partition) {
  std::size_t num_rejected = 0;
  for (const auto& d : decisions) num_rejected += d.accepted ? 0 : 1;
  if (num_rejected != cluster_of_rejected.size()) {
    throw InternalConsistencyError(
        "cluster assignments do not cover the rejected set exactly");
  }
  std::vector<OpenLabel> out;
  out.reserve(decisions.size());
  std::size_t next_rejected = 0;
  for (const auto& d : decisions) {
    if (d.accepted) {
      if (!partition.is_seen(d.seen_class)) {
        throw InternalConsistencyError("accepted prediction outside seen set");
      }
      out.push_back(OpenLabel::seen(d.seen_class));
    } else {
      out.push_back(OpenLabel::novel(cluster_of_rejected[next_rejected++]));
    }
  }
  return out;
}

struct AdaptOutcome {
  std::vector<OpenLabel> labels;
  std::vector<double> reject_scores;  // 1 - seen confidence, per example
  EvalReport report;
};

/// One full adapt-and-score pass at a fixed threshold: reject, cluster the
/// rejected points in feature space into (at most) |C_unseen| groups, then
/// score against the truth.
inline AdaptOutcome adapt_pipeline(const Eigen::MatrixXd& probs,
                                   const Eigen::MatrixXd& features,
                                   const std::vector<int>& truths,
                                   const ClassPartition& partition,
                                   double threshold, std::uint64_t kmeans_seed) {
  const auto decisions = reject_by_confidence(probs, partition, threshold);
  std::vector<Eigen::Index> rejected_rows;
  for (Eigen::Index i = 0; i < static_cast<Eigen::Index>(decisions.size()); ++i) {
    if (!decisions[static_cast<std::size_t>(i)].accepted) rejected_rows.push_back(i);
  }
  std::vector<int> clusters;
  if (!rejected_rows.empty()) {
    const int k = std::min<int>(partition.num_unseen(),
                                static_cast<int>(rejected_rows.size()));
    if (k >= 1) {
      Eigen::MatrixXd rejected_feats(
          static_cast<Eigen::Index>(rejected_rows.size()), features.cols());
      for (std::size_t r = 0; r < rejected_rows.size(); ++r) {
        rejected_feats.row(static_cast<Eigen::Index>(r)) =
            features.row(rejected_rows[r]);
      }
      clusters = kmeans_cluster(rejected_feats, k, kmeans_seed).assign;
    } else {
      clusters.assign(rejected_rows.size(), 0);
    }
  }
  AdaptOutcome out;
  out.labels = assemble_open_prediction(decisions, clusters, partition);
  out.reject_scores.resize(decisions.size());
  for (std::size_t i = 0; i < decisions.size(); ++i) {
    out.reject_scores[i] = 1.0 - decisions[i].confidence;
  }
  out.report = evaluate_open_world(out.labels, probs, out.reject_scores,
                                   truths, partition);
  return out;
}

inline EvalReport adapt_and_score(const Eigen::MatrixXd& probs,
                                  const Eigen::MatrixXd& features,
                                  const std::vector<int>& truths,
                                  const ClassPartition& partition,
                                  double threshold, std::uint64_t kmeans_seed) {
  return adapt_pipeline(probs, features, truths, partition, threshold,
                        kmeans_seed)
      .report;
}

struct ThresholdSearchResult {
  double threshold = 0.0;
  double combined = 0.0;
  EvalReport report;
};

inline std::vector<double> default_threshold_grid() {
  std::vector<double> grid(101);
  for (int i = 0; i <= 100; ++i) grid[static_cast<std::size_t>(i)] = i / 100.0;
  return grid;
}

/// Ground-truth-optimal threshold: evaluates the full adapt-and-score
/// pipeline at every grid point and returns the combined-score maximizer,
/// ties broken toward the smaller threshold.
inline ThresholdSearchResult optimal_threshold_search(
    const Eigen::MatrixXd& probs, const Eigen::MatrixXd& features,
    const std::vector<int>& truths, const ClassPartition& partition,
    const std::vector<double>& grid, std::uint64_t kmeans_seed) {
  if (grid.empty()) throw std::invalid_argument("threshold grid is empty");
  for (double t : grid) {
    if (t < 0.0 || t > 1.0) {
      throw std::invalid_argument("grid thresholds must lie in [0, 1]");
    }
  }
  std::vector<double> sorted = grid;
  std::sort(sorted.begin(), sorted.end());
  ThresholdSearchResult best;
  bool have = false;
  for (double t : sorted) {
    const EvalReport rep =
        adapt_and_score(probs, features, truths, partition, t, kmeans_seed);
    if (!have || rep.combined > best.combined) {
      best = ThresholdSearchResult{t, rep.combined, rep};
      have = true;
    }
  }
  return best;
}

}  // namespace owssl
