#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <string>

#include "owssl/errors.hpp"

namespace owssl {

// Probabilities are clamped at this floor inside logarithms.
inline constexpr double kLogFloor = 1e-12;

/// Scalar pieces of the training objective: total = ls + lu + lambda * le.
struct LossBreakdown {
  double ls = 0.0;
  double lu = 0.0;
  double le = 0.0;
  double lambda = 0.0;
  double total = 0.0;
};

/// Strictly positive class-frequency prior summing to one.
struct PriorDistribution {
  Eigen::VectorXd g;

  static PriorDistribution make(Eigen::VectorXd weights) {
    if (weights.size() == 0) {
      throw std::invalid_argument("prior must be non-empty");
    }
    for (Eigen::Index i = 0; i < weights.size(); ++i) {
      if (!(weights(i) > 0.0)) {
        throw std::invalid_argument("prior entries must be strictly positive");
      }
    }
    const double sum = weights.sum();
    if (std::abs(sum - 1.0) > 1e-9) {
      throw std::invalid_argument("prior must sum to 1 within 1e-9, got " +
                                  std::to_string(sum));
    }
    return PriorDistribution{std::move(weights)};
  }

  static PriorDistribution uniform(Eigen::Index n) {
    return PriorDistribution{Eigen::VectorXd::Constant(n, 1.0 / static_cast<double>(n))};
  }
};

/// Mean of the row-stochastic prediction matrix: p_bar_i = (1/B) sum_b p_bi.
inline Eigen::VectorXd batch_mean_prediction(const Eigen::MatrixXd& probs) {
  if (probs.rows() == 0 || probs.cols() == 0) {
    throw std::invalid_argument("batch_mean_prediction needs a non-empty batch");
  }
  return probs.colwise().mean().transpose();
}

/// Negative Shannon entropy of the batch-mean prediction,
/// sum_i p_bar_i * ln(p_bar_i), with 0 * ln 0 := 0. Minimizing this drives
/// the batch-mean prediction toward the uniform distribution; the value lies
/// in [-ln(n), 0].
inline double uniform_entropy_regularizer(const Eigen::VectorXd& p_bar) {
  double acc = 0.0;
  for (Eigen::Index i = 0; i < p_bar.size(); ++i) {
    const double p = p_bar(i);
    if (p > 0.0) acc += p * std::log(std::max(p, kLogFloor));
  }
  return acc;
}

/// KL(p_bar || g) >= 0 with equality iff p_bar == g; minimizing drives the
/// batch-mean prediction toward the prior. With a uniform prior this equals
/// uniform_entropy_regularizer(p_bar) + ln(n).
inline double prior_kl_regularizer(const Eigen::VectorXd& p_bar,
                                   const PriorDistribution& prior) {
  if (p_bar.size() != prior.g.size()) {
    throw std::invalid_argument("prior dimension does not match prediction");
  }
  double acc = 0.0;
  for (Eigen::Index i = 0; i < p_bar.size(); ++i) {
    const double p = p_bar(i);
    if (!(prior.g(i) > 0.0)) {
      throw std::invalid_argument("prior entry must be strictly positive");
    }
    if (p > 0.0) {
      acc += p * (std::log(std::max(p, kLogFloor)) - std::log(prior.g(i)));
    }
  }
  return acc;
}

inline LossBreakdown combine_losses(double ls, double lu, double le,
                                    double lambda) {
  if (!std::isfinite(ls) || !std::isfinite(lu) || !std::isfinite(le) ||
      !std::isfinite(lambda)) {
    throw DivergedTrainingError("non-finite loss component", /*batch_index=*/-1);
  }
  return LossBreakdown{ls, lu, le, lambda, ls + lu + lambda * le};
}

// ---------------------------------------------------------------------------
// Gradients with respect to the logits that produced `probs` (softmax rows).
// ---------------------------------------------------------------------------

namespace detail {

/// Backprop a per-probability gradient `dp` through row-wise softmax:
/// dz_bj = p_bj * (dp_bj - sum_i dp_bi * p_bi).
inline Eigen::MatrixXd softmax_backward(const Eigen::MatrixXd& probs,
                                        const Eigen::MatrixXd& dp) {
  Eigen::MatrixXd dz(probs.rows(), probs.cols());
  for (Eigen::Index b = 0; b < probs.rows(); ++b) {
    const double inner = dp.row(b).dot(probs.row(b));
    dz.row(b) = probs.row(b).cwiseProduct(dp.row(b).array().matrix() -
                                          Eigen::RowVectorXd::Constant(probs.cols(), inner));
  }
  return dz;
}

}  // namespace detail

/// d/dprobs of uniform_entropy_regularizer(batch_mean_prediction(probs)):
/// every row equals (ln p_bar + 1) / B.
inline Eigen::MatrixXd uniform_entropy_grad_probs(const Eigen::MatrixXd& probs) {
  const Eigen::VectorXd p_bar = batch_mean_prediction(probs);
  const double inv_b = 1.0 / static_cast<double>(probs.rows());
  Eigen::RowVectorXd dp_row(p_bar.size());
  for (Eigen::Index i = 0; i < p_bar.size(); ++i) {
    dp_row(i) = (std::log(std::max(p_bar(i), kLogFloor)) + 1.0) * inv_b;
  }
  return dp_row.replicate(probs.rows(), 1);
}

/// d/dprobs of prior_kl_regularizer(batch_mean_prediction(probs), prior):
/// every row equals (ln p_bar - ln g + 1) / B.
inline Eigen::MatrixXd prior_kl_grad_probs(const Eigen::MatrixXd& probs,
                                           const PriorDistribution& prior) {
  const Eigen::VectorXd p_bar = batch_mean_prediction(probs);
  if (p_bar.size() != prior.g.size()) {
    throw std::invalid_argument("prior dimension does not match prediction");
  }
  const double inv_b = 1.0 / static_cast<double>(probs.rows());
  Eigen::RowVectorXd dp_row(p_bar.size());
  for (Eigen::Index i = 0; i < p_bar.size(); ++i) {
    dp_row(i) = (std::log(std::max(p_bar(i), kLogFloor)) -
                 std::log(prior.g(i)) + 1.0) *
                inv_b;
  }
  return dp_row.replicate(probs.rows(), 1);
}

/// d/dlogits of uniform_entropy_regularizer(batch_mean_prediction(probs)).
inline Eigen::MatrixXd uniform_entropy_grad_logits(const Eigen::MatrixXd& probs) {
  return detail::softmax_backward(probs, uniform_entropy_grad_probs(probs));
}

/// d/dlogits of prior_kl_regularizer(batch_mean_prediction(probs), prior).
inline Eigen::MatrixXd prior_kl_grad_logits(const Eigen::MatrixXd& probs,
                                            const PriorDistribution& prior) {
  return detail::softmax_backward(probs, prior_kl_grad_probs(probs, prior));
}

}  // namespace owssl
