#pragma once

#include <catch2/catch_amalgamated.hpp>

#include <Eigen/Dense>
#include <random>
#include <vector>

#include "owssl/owssl.hpp"

namespace testutil {

inline Eigen::MatrixXd random_logits(Eigen::Index rows, Eigen::Index cols,
                                     std::uint64_t seed) {
  owssl::Rng rng = owssl::make_rng(seed);
  std::normal_distribution<double> dist(0.0, 1.5);
  Eigen::MatrixXd z(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i) {
    for (Eigen::Index j = 0; j < cols; ++j) z(i, j) = dist(rng);
  }
  return z;
}

inline Eigen::MatrixXd random_row_stochastic(Eigen::Index rows,
                                             Eigen::Index cols,
                                             std::uint64_t seed) {
  return owssl::detail::softmax_rows(random_logits(rows, cols, seed));
}

/// Central finite differences of a scalar function over a matrix argument.
template <typename F>
Eigen::MatrixXd numeric_grad(const Eigen::MatrixXd& z, F f, double h = 1e-6) {
  Eigen::MatrixXd g(z.rows(), z.cols());
  Eigen::MatrixXd zp = z;
  for (Eigen::Index i = 0; i < z.rows(); ++i) {
    for (Eigen::Index j = 0; j < z.cols(); ++j) {
      zp(i, j) = z(i, j) + h;
      const double fp = f(zp);
      zp(i, j) = z(i, j) - h;
      const double fm = f(zp);
      zp(i, j) = z(i, j);
      g(i, j) = (fp - fm) / (2.0 * h);
    }
  }
  return g;
}

inline double max_rel_error(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
  const double scale = std::max(
      {a.cwiseAbs().maxCoeff(), b.cwiseAbs().maxCoeff(), 1e-8});
  return (a - b).cwiseAbs().maxCoeff() / scale;
}

inline bool exact_equal(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
  return a.rows() == b.rows() && a.cols() == b.cols() &&
         (a.array() == b.array()).all();
}

}  // namespace testutil
