#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <memory>
#include <random>
#include <stdexcept>
#include <vector>

#include "owssl/data.hpp"
#include "owssl/errors.hpp"
#include "owssl/rng.hpp"

namespace owssl {

using ParamList = std::vector<Eigen::MatrixXd>;

struct ForwardResult {
  Eigen::MatrixXd probs;     // B x head_dim, row-stochastic
  Eigen::MatrixXd features;  // B x feature_dim penultimate activations
};

namespace detail {

inline Eigen::MatrixXd softmax_rows(const Eigen::MatrixXd& logits) {
  Eigen::MatrixXd out(logits.rows(), logits.cols());
  for (Eigen::Index b = 0; b < logits.rows(); ++b) {
    const Eigen::RowVectorXd shifted =
        logits.row(b).array() - logits.row(b).maxCoeff();
    Eigen::RowVectorXd e = shifted.array().exp();
    out.row(b) = e / e.sum();
  }
  return out;
}

inline Eigen::MatrixXd gaussian_matrix(Eigen::Index rows, Eigen::Index cols,
                                       double stddev, Rng& rng) {
  std::normal_distribution<double> dist(0.0, stddev);
  Eigen::MatrixXd m(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i) {
    for (Eigen::Index j = 0; j < cols; ++j) m(i, j) = dist(rng);
  }
  return m;
}

}  // namespace detail

/// Differentiable classifier: forward produces row-stochastic probabilities
/// plus penultimate features; backward accumulates parameter gradients from
/// dL/dprobs of the last cached forward pass.
class Model {
 public:
  virtual ~Model() = default;
  virtual ForwardResult forward(const Eigen::MatrixXd& x) const = 0;
  virtual ForwardResult forward_cached(const Eigen::MatrixXd& x) = 0;
  virtual void backward(const Eigen::MatrixXd& dprobs) = 0;
  virtual ParamList& params() = 0;
  virtual const ParamList& params() const = 0;
  virtual ParamList& grads() = 0;
  virtual void zero_grad() = 0;
  virtual int input_dim() const = 0;
  virtual int feature_dim() const = 0;
  virtual int head_dim() const = 0;
  virtual std::unique_ptr<Model> clone() const = 0;
};

/// Two-layer perceptron: input -> hidden ReLU -> softmax head.
/// Features are the hidden activations. `zero_head` starts the output layer
/// at zero so an untrained model predicts the uniform distribution.
class MlpModel final : public Model {
 public:
  MlpModel(int input_dim, int hidden_dim, int head_dim, std::uint64_t seed,
           bool zero_head = false)
      : in_(input_dim), hidden_(hidden_dim), head_(head_dim) {
    if (input_dim < 1 || hidden_dim < 1 || head_dim < 2) {
      throw std::invalid_argument("mlp dimensions out of range");
    }
    Rng rng = make_rng(seed, /*stream=*/11);
    params_.resize(4);
    params_[0] = detail::gaussian_matrix(in_, hidden_,
                                         std::sqrt(2.0 / in_), rng);
    params_[1] = Eigen::MatrixXd::Zero(hidden_, 1);
    params_[2] = zero_head
                     ? Eigen::MatrixXd::Zero(hidden_, head_)
                     : detail::gaussian_matrix(hidden_, head_,
                                               std::sqrt(2.0 / hidden_), rng);
    params_[3] = Eigen::MatrixXd::Zero(head_, 1);
    reset_grads();
  }

  ForwardResult forward(const Eigen::MatrixXd& x) const override {
    check_input(x);
    Eigen::MatrixXd z1 =
        (x * params_[0]).rowwise() + params_[1].col(0).transpose();
    Eigen::MatrixXd h = z1.cwiseMax(0.0);
    Eigen::MatrixXd z2 =
        (h * params_[2]).rowwise() + params_[3].col(0).transpose();
    return ForwardResult{detail::softmax_rows(z2), std::move(h)};
  }

  ForwardResult forward_cached(const Eigen::MatrixXd& x) override {
    check_input(x);
    cache_x_ = x;
    cache_z1_ = (x * params_[0]).rowwise() + params_[1].col(0).transpose();
    cache_h_ = cache_z1_.cwiseMax(0.0);
    Eigen::MatrixXd z2 =
        (cache_h_ * params_[2]).rowwise() + params_[3].col(0).transpose();
    cache_p_ = detail::softmax_rows(z2);
    has_cache_ = true;
    return ForwardResult{cache_p_, cache_h_};
  }

  void backward(const Eigen::MatrixXd& dprobs) override {
    if (!has_cache_) {
      throw InternalConsistencyError("backward without a cached forward pass");
    }
    if (dprobs.rows() != cache_p_.rows() || dprobs.cols() != cache_p_.cols()) {
      throw std::invalid_argument("gradient shape mismatch");
    }
    // dz = p .* (dp - rowdot(dp, p))
    Eigen::VectorXd rowdot = (dprobs.array() * cache_p_.array()).rowwise().sum();
    Eigen::MatrixXd dz2 =
        cache_p_.array() * (dprobs.colwise() - rowdot).array();
    grads_[2] += cache_h_.transpose() * dz2;
    grads_[3] += dz2.colwise().sum().transpose();
    Eigen::MatrixXd dh = dz2 * params_[2].transpose();
    Eigen::MatrixXd dz1 =
        (cache_z1_.array() > 0.0).cast<double>() * dh.array();
    grads_[0] += cache_x_.transpose() * dz1;
    grads_[1] += dz1.colwise().sum().transpose();
  }

  ParamList& params() override { return params_; }
  const ParamList& params() const override { return params_; }
  ParamList& grads() override { return grads_; }
  void zero_grad() override {
    for (auto& g : grads_) g.setZero();
  }
  int input_dim() const override { return in_; }
  int feature_dim() const override { return hidden_; }
  int head_dim() const override { return head_; }
  std::unique_ptr<Model> clone() const override {
    return std::make_unique<MlpModel>(*this);
  }

 private:
  void check_input(const Eigen::MatrixXd& x) const {
    if (x.rows() < 1) throw std::invalid_argument("empty input batch");
    if (x.cols() != in_) throw std::invalid_argument("input width mismatch");
  }
  void reset_grads() {
    grads_.clear();
    for (const auto& p : params_) {
      grads_.push_back(Eigen::MatrixXd::Zero(p.rows(), p.cols()));
    }
  }

  int in_, hidden_, head_;
  ParamList params_;
  ParamList grads_;
  Eigen::MatrixXd cache_x_, cache_z1_, cache_h_, cache_p_;
  bool has_cache_ = false;
};

/// Small convolutional net for image-shaped rows (channel-major CHW
/// flattening): one 3x3 same-padding conv -> ReLU -> 2x2 average pool ->
/// flatten (the features) -> softmax head.
class ConvModel final : public Model {
 public:
  ConvModel(DataShape shape, int conv_channels, int head_dim,
            std::uint64_t seed, bool zero_head = false)
      : shape_(shape), k_(conv_channels), head_(head_dim) {
    if (!shape.is_image()) {
      throw std::invalid_argument("conv model needs image-shaped data");
    }
    if (shape.height % 2 != 0 || shape.width % 2 != 0) {
      throw std::invalid_argument("conv model needs even height and width");
    }
    if (conv_channels < 1 || head_dim < 2) {
      throw std::invalid_argument("conv dimensions out of range");
    }
    patch_dim_ = 9 * shape_.channels;
    pooled_h_ = shape_.height / 2;
    pooled_w_ = shape_.width / 2;
    feat_ = k_ * pooled_h_ * pooled_w_;
    Rng rng = make_rng(seed, /*stream=*/12);
    params_.resize(4);
    params_[0] = detail::gaussian_matrix(patch_dim_, k_,
                                         std::sqrt(2.0 / patch_dim_), rng);
    params_[1] = Eigen::MatrixXd::Zero(k_, 1);
    params_[2] = zero_head
                     ? Eigen::MatrixXd::Zero(feat_, head_)
                     : detail::gaussian_matrix(feat_, head_,
                                               std::sqrt(2.0 / feat_), rng);
    params_[3] = Eigen::MatrixXd::Zero(head_, 1);
    reset_grads();
  }

  ForwardResult forward(const Eigen::MatrixXd& x) const override {
    check_input(x);
    Eigen::MatrixXd feats(x.rows(), feat_);
    for (Eigen::Index b = 0; b < x.rows(); ++b) {
      Eigen::MatrixXd patches = im2col(x.row(b));
      Eigen::MatrixXd z = (patches * params_[0]).rowwise() +
                          params_[1].col(0).transpose();
      feats.row(b) = pool_flatten(z.cwiseMax(0.0));
    }
    Eigen::MatrixXd z2 =
        (feats * params_[2]).rowwise() + params_[3].col(0).transpose();
    return ForwardResult{detail::softmax_rows(z2), std::move(feats)};
  }

  ForwardResult forward_cached(const Eigen::MatrixXd& x) override {
    check_input(x);
    const Eigen::Index batch = x.rows();
    cache_patches_.resize(static_cast<std::size_t>(batch));
    cache_conv_.resize(static_cast<std::size_t>(batch));
    cache_feats_.resize(batch, feat_);
    for (Eigen::Index b = 0; b < batch; ++b) {
      cache_patches_[static_cast<std::size_t>(b)] = im2col(x.row(b));
      Eigen::MatrixXd z =
          (cache_patches_[static_cast<std::size_t>(b)] * params_[0]).rowwise() +
          params_[1].col(0).transpose();
      cache_conv_[static_cast<std::size_t>(b)] = z;
      cache_feats_.row(b) = pool_flatten(z.cwiseMax(0.0));
    }
    Eigen::MatrixXd z2 =
        (cache_feats_ * params_[2]).rowwise() + params_[3].col(0).transpose();
    cache_p_ = detail::softmax_rows(z2);
    has_cache_ = true;
    return ForwardResult{cache_p_, cache_feats_};
  }

  void backward(const Eigen::MatrixXd& dprobs) override {
    if (!has_cache_) {
      throw InternalConsistencyError("backward without a cached forward pass");
    }
    if (dprobs.rows() != cache_p_.rows() || dprobs.cols() != cache_p_.cols()) {
      throw std::invalid_argument("gradient shape mismatch");
    }
    Eigen::VectorXd rowdot = (dprobs.array() * cache_p_.array()).rowwise().sum();
    Eigen::MatrixXd dz2 =
        cache_p_.array() * (dprobs.colwise() - rowdot).array();
    grads_[2] += cache_feats_.transpose() * dz2;
    grads_[3] += dz2.colwise().sum().transpose();
    Eigen::MatrixXd dfeats = dz2 * params_[2].transpose();
    for (Eigen::Index b = 0; b < dprobs.rows(); ++b) {
      const auto& z = cache_conv_[static_cast<std::size_t>(b)];
      Eigen::MatrixXd dz = unpool(dfeats.row(b));
      dz = (z.array() > 0.0).cast<double>() * dz.array();
      grads_[0] += cache_patches_[static_cast<std::size_t>(b)].transpose() * dz;
      grads_[1] += dz.colwise().sum().transpose();
    }
  }

  ParamList& params() override { return params_; }
  const ParamList& params() const override { return params_; }
  ParamList& grads() override { return grads_; }
  void zero_grad() override {
    for (auto& g : grads_) g.setZero();
  }
  int input_dim() const override { return shape_.flat_dim(); }
  int feature_dim() const override { return feat_; }
  int head_dim() const override { return head_; }
  std::unique_ptr<Model> clone() const override {
    return std::make_unique<ConvModel>(*this);
  }

 private:
  void check_input(const Eigen::MatrixXd& x) const {
    if (x.rows() < 1) throw std::invalid_argument("empty input batch");
    if (x.cols() != shape_.flat_dim()) {
      throw std::invalid_argument("input width mismatch");
    }
  }
  void reset_grads() {
    grads_.clear();
    for (const auto& p : params_) {
      grads_.push_back(Eigen::MatrixXd::Zero(p.rows(), p.cols()));
    }
  }

  // One row per output pixel (row-major), one column per (channel, ky, kx)
  // of the 3x3 same-padding receptive field.
  Eigen::MatrixXd im2col(const Eigen::RowVectorXd& row) const {
    const int H = shape_.height, W = shape_.width, C = shape_.channels;
    Eigen::MatrixXd patches = Eigen::MatrixXd::Zero(H * W, patch_dim_);
    for (int y = 0; y < H; ++y) {
      for (int x = 0; x < W; ++x) {
        const int out = y * W + x;
        for (int c = 0; c < C; ++c) {
          for (int ky = -1; ky <= 1; ++ky) {
            for (int kx = -1; kx <= 1; ++kx) {
              const int sy = y + ky, sx = x + kx;
              if (sy < 0 || sy >= H || sx < 0 || sx >= W) continue;
              const int col = c * 9 + (ky + 1) * 3 + (kx + 1);
              patches(out, col) = row(c * H * W + sy * W + sx);
            }
          }
        }
      }
    }
    return patches;
  }

  // 2x2 average pool of one example's (H*W) x K activation map, flattened
  // channel-major to a feature row.
  Eigen::RowVectorXd pool_flatten(const Eigen::MatrixXd& act) const {
    const int W = shape_.width;
    Eigen::RowVectorXd out(feat_);
    for (int k = 0; k < k_; ++k) {
      for (int py = 0; py < pooled_h_; ++py) {
        for (int px = 0; px < pooled_w_; ++px) {
          const int y = 2 * py, x = 2 * px;
          const double sum = act(y * W + x, k) + act(y * W + x + 1, k) +
                             act((y + 1) * W + x, k) +
                             act((y + 1) * W + x + 1, k);
          out(k * pooled_h_ * pooled_w_ + py * pooled_w_ + px) = sum / 4.0;
        }
      }
    }
    return out;
  }

  Eigen::MatrixXd unpool(const Eigen::RowVectorXd& dfeat) const {
    const int W = shape_.width;
    Eigen::MatrixXd dz =
        Eigen::MatrixXd::Zero(shape_.height * shape_.width, k_);
    for (int k = 0; k < k_; ++k) {
      for (int py = 0; py < pooled_h_; ++py) {
        for (int px = 0; px < pooled_w_; ++px) {
          const double g =
              dfeat(k * pooled_h_ * pooled_w_ + py * pooled_w_ + px) / 4.0;
          const int y = 2 * py, x = 2 * px;
          dz(y * W + x, k) += g;
          dz(y * W + x + 1, k) += g;
          dz((y + 1) * W + x, k) += g;
          dz((y + 1) * W + x + 1, k) += g;
        }
      }
    }
    return dz;
  }

  DataShape shape_;
  int k_, head_;
  int patch_dim_ = 0, pooled_h_ = 0, pooled_w_ = 0, feat_ = 0;
  ParamList params_;
  ParamList grads_;
  std::vector<Eigen::MatrixXd> cache_patches_;
  std::vector<Eigen::MatrixXd> cache_conv_;
  Eigen::MatrixXd cache_feats_, cache_p_;
  bool has_cache_ = false;
};

/// Plain momentum SGD with L2 decay folded into the gradient:
/// g += wd*w; v = m*v + g; w -= lr*v.
struct SgdConfig {
  double learning_rate = 0.03;
  double momentum = 0.9;
  double weight_decay = 5e-4;
};

class SgdOptimizer {
 public:
  SgdOptimizer(const ParamList& params, SgdConfig cfg) : cfg_(cfg) {
    if (cfg.learning_rate <= 0.0) {
      throw std::invalid_argument("learning rate must be positive");
    }
    if (cfg.momentum < 0.0 || cfg.momentum >= 1.0) {
      throw std::invalid_argument("momentum must lie in [0, 1)");
    }
    if (cfg.weight_decay < 0.0) {
      throw std::invalid_argument("weight decay must be non-negative");
    }
    for (const auto& p : params) {
      velocity_.push_back(Eigen::MatrixXd::Zero(p.rows(), p.cols()));
    }
  }

  void step(ParamList& params, const ParamList& grads) {
    if (params.size() != velocity_.size() || grads.size() != velocity_.size()) {
      throw InternalConsistencyError("optimizer state size mismatch");
    }
    for (std::size_t i = 0; i < params.size(); ++i) {
      Eigen::MatrixXd g = grads[i] + cfg_.weight_decay * params[i];
      velocity_[i] = cfg_.momentum * velocity_[i] + g;
      params[i] -= cfg_.learning_rate * velocity_[i];
    }
  }

  const ParamList& velocity() const { return velocity_; }
  void set_velocity(ParamList v) { velocity_ = std::move(v); }
  const SgdConfig& config() const { return cfg_; }

 private:
  SgdConfig cfg_;
  ParamList velocity_;
};

}  // namespace owssl
