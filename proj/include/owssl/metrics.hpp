#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cstdint>
#include <limits>
#include <numeric>
#include <string>
#include <vector>

#include "owssl/data.hpp"
#include "owssl/errors.hpp"

namespace owssl {

/// A full-label prediction: either a concrete seen class id, or an index into
/// an anonymous novel-group namespace that evaluation matches to the unseen
/// classes by best permutation.
struct OpenLabel {
  enum class Kind { Seen, Novel };
  Kind kind = Kind::Seen;
  int value = 0;

  static OpenLabel seen(int class_id) { return {Kind::Seen, class_id}; }
  static OpenLabel novel(int group) { return {Kind::Novel, group}; }
  bool operator==(const OpenLabel&) const = default;
};

/// Counts of (predicted novel group) x (true unseen class) co-occurrences.
struct ContingencyTable {
  std::vector<std::vector<long long>> counts;  // counts[row][col]

  std::size_t rows() const { return counts.size(); }
  std::size_t cols() const { return counts.empty() ? 0 : counts[0].size(); }
  long long total() const {
    long long t = 0;
    for (const auto& row : counts)
      for (long long v : row) t += v;
    return t;
  }
};

struct AssignmentResult {
  std::vector<int> mapping;  // row -> column over the padded square table
  long long matched = 0;
};

namespace detail {

inline constexpr long long kAssignmentInf =
    std::numeric_limits<long long>::max() / 4;

/// O(n^3) Hungarian algorithm (potentials formulation), minimum cost over a
/// square matrix. Returns the cost; fills row_to_col if non-null.
inline long long hungarian_min(const std::vector<std::vector<long long>>& a,
                               std::vector<int>* row_to_col = nullptr) {
  const int n = static_cast<int>(a.size());
  if (n == 0) {
    if (row_to_col) row_to_col->clear();
    return 0;
  }
  std::vector<long long> u(n + 1, 0), v(n + 1, 0);
  std::vector<int> p(n + 1, 0), way(n + 1, 0);
  for (int i = 1; i <= n; ++i) {
    p[0] = i;
    int j0 = 0;
    std::vector<long long> minv(n + 1, kAssignmentInf);
    std::vector<char> used(n + 1, 0);
    do {
      used[j0] = 1;
      const int i0 = p[j0];
      int j1 = 0;
      long long delta = kAssignmentInf;
      for (int j = 1; j <= n; ++j) {
        if (used[j]) continue;
        const long long cur = a[i0 - 1][j - 1] - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (int j = 0; j <= n; ++j) {
        if (used[j]) {
          u[p[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (p[j0] != 0);
    do {
      const int j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0);
  }
  long long cost = 0;
  if (row_to_col) row_to_col->assign(n, -1);
  for (int j = 1; j <= n; ++j) {
    cost += a[p[j] - 1][j - 1];
    if (row_to_col) (*row_to_col)[p[j] - 1] = j - 1;
  }
  return cost;
}

/// Maximum summed value of an assignment over rows [row_from, n) and the
/// given column subset (sizes must match).
inline long long max_assignment_value(
    const std::vector<std::vector<long long>>& counts, std::size_t row_from,
    const std::vector<int>& cols) {
  const std::size_t m = cols.size();
  std::vector<std::vector<long long>> cost(m, std::vector<long long>(m, 0));
  for (std::size_t r = 0; r < m; ++r) {
    for (std::size_t c = 0; c < m; ++c) {
      cost[r][c] = -counts[row_from + r][static_cast<std::size_t>(cols[c])];
    }
  }
  return -hungarian_min(cost);
}

}  // namespace detail

/// Optimal one-to-one matching of predicted groups to true classes,
/// maximizing the summed matched counts. Rectangular tables are zero-padded
/// to square; unmatched groups score zero. Among maximizers, the returned
/// mapping is the lexicographically smallest (row 0's column minimized
/// first, then row 1's, ...) as long as the table is not too large for the
/// canonicalization pass.
inline AssignmentResult best_permutation_match(const ContingencyTable& table) {
  if (table.rows() == 0 || table.cols() == 0) {
    throw std::invalid_argument("contingency table is empty");
  }
  const std::size_t n = std::max(table.rows(), table.cols());
  std::vector<std::vector<long long>> counts(n, std::vector<long long>(n, 0));
  for (std::size_t r = 0; r < table.rows(); ++r) {
    for (std::size_t c = 0; c < table.cols(); ++c) {
      if (table.counts[r][c] < 0) {
        throw std::invalid_argument("contingency counts must be non-negative");
      }
      counts[r][c] = table.counts[r][c];
    }
  }

  std::vector<int> all_cols(n);
  std::iota(all_cols.begin(), all_cols.end(), 0);
  const long long best = detail::max_assignment_value(counts, 0, all_cols);

  AssignmentResult result;
  result.matched = best;
  result.mapping.assign(n, -1);

  if (n > 64) {
    // Canonicalization is O(n^5); beyond this size return the (still
    // deterministic) Hungarian solution directly.
    std::vector<std::vector<long long>> cost(n, std::vector<long long>(n, 0));
    for (std::size_t r = 0; r < n; ++r)
      for (std::size_t c = 0; c < n; ++c) cost[r][c] = -counts[r][c];
    detail::hungarian_min(cost, &result.mapping);
    return result;
  }

  // Greedy lexicographic fixing: for each row in order pick the smallest
  // column that still permits the optimal total on the remaining rows.
  std::vector<int> remaining = all_cols;
  long long target = best;
  for (std::size_t r = 0; r < n; ++r) {
    for (std::size_t ci = 0; ci < remaining.size(); ++ci) {
      const int c = remaining[ci];
      std::vector<int> rest = remaining;
      rest.erase(rest.begin() + static_cast<std::ptrdiff_t>(ci));
      const long long tail = detail::max_assignment_value(counts, r + 1, rest);
      if (counts[r][static_cast<std::size_t>(c)] + tail == target) {
        result.mapping[r] = c;
        target -= counts[r][static_cast<std::size_t>(c)];
        remaining = std::move(rest);
        break;
      }
    }
  }
  return result;
}

// ---------------------------------------------------------------------------
// Score family
// ---------------------------------------------------------------------------

struct EvalReport {
  double acc_seen = 0.0;
  double acc_unseen = 0.0;
  double combined = 0.0;
  double closed_acc = 0.0;
  double unknown_acc = 0.0;
  double auroc = 0.0;
};

/// Fraction of seen-class test points whose full prediction equals the true
/// label; predicting any novel group on a seen point counts as an error.
inline double seen_accuracy(const std::vector<OpenLabel>& preds,
                            const std::vector<int>& truths,
                            const ClassPartition& partition) {
  if (preds.size() != truths.size()) {
    throw std::invalid_argument("prediction/truth size mismatch");
  }
  long long total = 0, correct = 0;
  for (std::size_t i = 0; i < truths.size(); ++i) {
    if (!partition.is_seen(truths[i])) continue;
    ++total;
    if (preds[i].kind == OpenLabel::Kind::Seen && preds[i].value == truths[i]) {
      ++correct;
    }
  }
  if (total == 0) {
    throw UndefinedScoreError("no seen-class test points");
  }
  return static_cast<double>(correct) / static_cast<double>(total);
}

/// Accuracy on unseen-class test points after matching predicted novel
/// groups to the unseen classes by best permutation. Seen-class predictions
/// on unseen points count as errors.
inline double unseen_accuracy(const std::vector<OpenLabel>& preds,
                              const std::vector<int>& truths,
                              const ClassPartition& partition) {
  if (preds.size() != truths.size()) {
    throw std::invalid_argument("prediction/truth size mismatch");
  }
  long long total = 0;
  int max_group = -1;
  for (std::size_t i = 0; i < truths.size(); ++i) {
    if (partition.is_seen(truths[i])) continue;
    ++total;
    if (preds[i].kind == OpenLabel::Kind::Novel) {
      max_group = std::max(max_group, preds[i].value);
    }
  }
  if (total == 0) {
    throw UndefinedScoreError("no unseen-class test points");
  }
  if (max_group < 0) return 0.0;  // nothing predicted novel

  const std::size_t rows = static_cast<std::size_t>(
      std::max(max_group + 1, partition.num_unseen()));
  const std::size_t cols = static_cast<std::size_t>(partition.num_unseen());
  ContingencyTable table;
  table.counts.assign(rows, std::vector<long long>(cols, 0));
  for (std::size_t i = 0; i < truths.size(); ++i) {
    if (partition.is_seen(truths[i])) continue;
    if (preds[i].kind != OpenLabel::Kind::Novel) continue;
    const int col = partition.novel_index_of(truths[i]);
    table.counts[static_cast<std::size_t>(preds[i].value)]
                [static_cast<std::size_t>(col)] += 1;
  }
  const auto match = best_permutation_match(table);
  return static_cast<double>(match.matched) / static_cast<double>(total);
}

/// Class-count weighted average of the seen and unseen accuracies.
inline double combined_score(double acc_seen, double acc_unseen,
                             const ClassPartition& partition) {
  const double total = static_cast<double>(partition.num_classes);
  return (static_cast<double>(partition.num_seen()) / total) * acc_seen +
         (static_cast<double>(partition.num_unseen()) / total) * acc_unseen;
}

/// Accuracy on seen-class test points when the prediction is forced to the
/// seen head slots (argmax over seen entries, no rejection allowed).
inline double closed_accuracy(const Eigen::MatrixXd& probs,
                              const std::vector<int>& truths,
                              const ClassPartition& partition) {
  if (probs.rows() != static_cast<Eigen::Index>(truths.size())) {
    throw std::invalid_argument("probs/truth size mismatch");
  }
  if (probs.cols() < partition.num_seen()) {
    throw std::invalid_argument("probability head narrower than seen set");
  }
  long long total = 0, correct = 0;
  for (std::size_t i = 0; i < truths.size(); ++i) {
    if (!partition.is_seen(truths[i])) continue;
    ++total;
    Eigen::Index best = 0;
    probs.row(static_cast<Eigen::Index>(i))
        .head(partition.num_seen())
        .maxCoeff(&best);
    if (partition.class_at_slot(static_cast<int>(best)) == truths[i]) ++correct;
  }
  if (total == 0) {
    throw UndefinedScoreError("no seen-class test points");
  }
  return static_cast<double>(correct) / static_cast<double>(total);
}

/// Fraction of unseen-class test points predicted as any novel group
/// (rejection accuracy; no permutation matching involved).
inline double unknown_accuracy(const std::vector<OpenLabel>& preds,
                               const std::vector<int>& truths,
                               const ClassPartition& partition) {
  if (preds.size() != truths.size()) {
    throw std::invalid_argument("prediction/truth size mismatch");
  }
  long long total = 0, novel = 0;
  for (std::size_t i = 0; i < truths.size(); ++i) {
    if (partition.is_seen(truths[i])) continue;
    ++total;
    if (preds[i].kind == OpenLabel::Kind::Novel) ++novel;
  }
  if (total == 0) {
    throw UndefinedScoreError("no unseen-class test points");
  }
  return static_cast<double>(novel) / static_cast<double>(total);
}

/// Area under the ROC curve of the seen-vs-unseen reject classifier, from
/// per-point unseen-ness scores. Ties contribute half, i.e. the
/// rank/Mann-Whitney formulation.
inline double auroc(const std::vector<double>& scores,
                    const std::vector<bool>& is_unseen) {
  if (scores.size() != is_unseen.size()) {
    throw std::invalid_argument("score/flag size mismatch");
  }
  std::size_t n_pos = 0;
  for (bool b : is_unseen) n_pos += b ? 1 : 0;
  const std::size_t n_neg = scores.size() - n_pos;
  if (n_pos == 0 || n_neg == 0) {
    throw UndefinedScoreError("AUROC needs both seen and unseen points");
  }
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&scores](std::size_t a, std::size_t b) {
    return scores[a] < scores[b];
  });
  double rank_sum_pos = 0.0;
  std::size_t i = 0;
  while (i < order.size()) {
    std::size_t j = i;
    while (j + 1 < order.size() && scores[order[j + 1]] == scores[order[i]]) ++j;
    const double avg_rank = 0.5 * static_cast<double>(i + j) + 1.0;  // 1-based
    for (std::size_t t = i; t <= j; ++t) {
      if (is_unseen[order[t]]) rank_sum_pos += avg_rank;
    }
    i = j + 1;
  }
  const double n_pos_d = static_cast<double>(n_pos);
  const double u = rank_sum_pos - n_pos_d * (n_pos_d + 1.0) / 2.0;
  return u / (n_pos_d * static_cast<double>(n_neg));
}

/// Assemble the full report for one prediction set. `probs` are full-head
/// slot probabilities aligned with `truths`; `reject_scores` are the
/// per-point unseen-ness scores used for AUROC.
inline EvalReport evaluate_open_world(const std::vector<OpenLabel>& preds,
                                      const Eigen::MatrixXd& probs,
                                      const std::vector<double>& reject_scores,
                                      const std::vector<int>& truths,
                                      const ClassPartition& partition) {
  EvalReport r;
  r.acc_seen = seen_accuracy(preds, truths, partition);
  r.acc_unseen = unseen_accuracy(preds, truths, partition);
  r.combined = combined_score(r.acc_seen, r.acc_unseen, partition);
  r.closed_acc = closed_accuracy(probs, truths, partition);
  r.unknown_acc = unknown_accuracy(preds, truths, partition);
  std::vector<bool> flags(truths.size());
  for (std::size_t i = 0; i < truths.size(); ++i) {
    flags[i] = !partition.is_seen(truths[i]);
  }
  r.auroc = auroc(reject_scores, flags);
  return r;
}

}  // namespace owssl
