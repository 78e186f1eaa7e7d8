#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "serforge/errors.hpp"
#include "serforge/rng.hpp"
#include "serforge/tensor.hpp"
#include "serforge/threading.hpp"

namespace serforge::nn {

enum class LayerMode { kTrain, kEval };

// Trainable tensor plus its gradient and Adadelta accumulators
// (running averages of squared gradients and squared updates).
template <typename T>
struct Parameter {
  Tensor<T> value;
  Tensor<T> grad;
  Tensor<T> accum_grad_sq;
  Tensor<T> accum_delta_sq;

  explicit Parameter(std::vector<std::size_t> dims)
      : value(dims), grad(dims), accum_grad_sq(dims), accum_delta_sq(dims) {}

  std::size_t dim(std::size_t i) const { return value.dim(i); }

  void zero_grad() { grad.fill(T(0)); }

  void init_uniform(Rng& rng, double bound) {
    for (std::size_t i = 0; i < value.size(); ++i) {
      value[i] = static_cast<T>(rng.uniform(-bound, bound));
    }
  }
};

inline void fnv_mix(std::uint64_t& h, std::uint64_t v) {
  h ^= v + 0x9e3779b97f4a7c15ull + (h << 6) + (h >> 2);
}

// --- layers --------------------------------------------------------------

// Valid (unpadded) stride-1 cross-correlation with bias.
template <typename T>
class Conv2d {
 public:
  Conv2d(std::size_t out_channels, std::size_t in_channels, std::size_t kh,
         std::size_t kw, Rng& rng)
      : kernels({out_channels, in_channels, kh, kw}), bias({out_channels}) {
    const double fan_in = static_cast<double>(in_channels * kh * kw);
    const double fan_out = static_cast<double>(out_channels * kh * kw);
    kernels.init_uniform(rng, std::sqrt(6.0 / (fan_in + fan_out)));
  }

  Tensor<T> forward(const Tensor<T>& in, LayerMode mode) {
    check_input(in);
    const std::size_t batch = in.dim(0), channels = in.dim(1);
    const std::size_t h = in.dim(2), w = in.dim(3);
    const std::size_t k = kernels.dim(0), kh = kernels.dim(2), kw = kernels.dim(3);
    const std::size_t oh = h - kh + 1, ow = w - kw + 1;

    Tensor<T> out({batch, k, oh, ow});
    const T* in_ptr = in.data();
    T* out_ptr = out.data();
    const T* ker_ptr = kernels.value.data();
    const std::size_t work = batch * k * oh * ow * channels * kh * kw;

    parallel_for(batch * k, work, [&](std::size_t bk) {
      const std::size_t b = bk / k, kk = bk % k;
      T* plane = out_ptr + (b * k + kk) * oh * ow;
      const T bias_v = bias.value[kk];
      for (std::size_t i = 0; i < oh * ow; ++i) plane[i] = bias_v;
      for (std::size_t c = 0; c < channels; ++c) {
        const T* in_plane = in_ptr + (b * channels + c) * h * w;
        const T* ker_plane = ker_ptr + (kk * channels + c) * kh * kw;
        for (std::size_t dy = 0; dy < kh; ++dy) {
          for (std::size_t dx = 0; dx < kw; ++dx) {
            const T kv = ker_plane[dy * kw + dx];
            for (std::size_t y = 0; y < oh; ++y) {
              const T* in_row = in_plane + (y + dy) * w + dx;
              T* out_row = plane + y * ow;
              for (std::size_t x = 0; x < ow; ++x) out_row[x] += kv * in_row[x];
            }
          }
        }
      }
    });

    if (mode == LayerMode::kTrain) input_ = in;
    return out;
  }

  // Accumulates kernel/bias gradients; returns the input gradient only
  // when needs_input_grad is set (all convolutions here sit on graph
  // inputs, so the extra pass is usually skipped).
  Tensor<T> backward(const Tensor<T>& grad_out) {
    if (input_.empty()) throw std::logic_error("conv2d backward before forward");
    const std::size_t batch = input_.dim(0), channels = input_.dim(1);
    const std::size_t h = input_.dim(2), w = input_.dim(3);
    const std::size_t k = kernels.dim(0), kh = kernels.dim(2), kw = kernels.dim(3);
    const std::size_t oh = h - kh + 1, ow = w - kw + 1;

    const T* in_ptr = input_.data();
    const T* go_ptr = grad_out.data();
    const std::size_t work = batch * k * oh * ow * channels * kh * kw;

    T* gker = kernels.grad.data();
    T* gbias = bias.grad.data();
    parallel_for(k, work, [&](std::size_t kk) {
      T bias_acc = 0;
      for (std::size_t b = 0; b < batch; ++b) {
        const T* go_plane = go_ptr + (b * k + kk) * oh * ow;
        for (std::size_t i = 0; i < oh * ow; ++i) bias_acc += go_plane[i];
        for (std::size_t c = 0; c < channels; ++c) {
          const T* in_plane = in_ptr + (b * channels + c) * h * w;
          T* gker_plane = gker + (kk * channels + c) * kh * kw;
          for (std::size_t dy = 0; dy < kh; ++dy) {
            for (std::size_t dx = 0; dx < kw; ++dx) {
              T acc = 0;
              for (std::size_t y = 0; y < oh; ++y) {
                const T* in_row = in_plane + (y + dy) * w + dx;
                const T* go_row = go_plane + y * ow;
                for (std::size_t x = 0; x < ow; ++x) acc += go_row[x] * in_row[x];
              }
              gker_plane[dy * kw + dx] += acc;
            }
          }
        }
      }
      gbias[kk] += bias_acc;
    });

    Tensor<T> grad_in;
    if (needs_input_grad) {
      grad_in = Tensor<T>(input_.dims());
      T* gi_ptr = grad_in.data();
      const T* ker_ptr = kernels.value.data();
      parallel_for(batch, work, [&](std::size_t b) {
        for (std::size_t kk = 0; kk < k; ++kk) {
          const T* go_plane = go_ptr + (b * k + kk) * oh * ow;
          for (std::size_t c = 0; c < channels; ++c) {
            T* gi_plane = gi_ptr + (b * channels + c) * h * w;
            const T* ker_plane = ker_ptr + (kk * channels + c) * kh * kw;
            for (std::size_t dy = 0; dy < kh; ++dy) {
              for (std::size_t dx = 0; dx < kw; ++dx) {
                const T kv = ker_plane[dy * kw + dx];
                for (std::size_t y = 0; y < oh; ++y) {
                  T* gi_row = gi_plane + (y + dy) * w + dx;
                  const T* go_row = go_plane + y * ow;
                  for (std::size_t x = 0; x < ow; ++x) gi_row[x] += kv * go_row[x];
                }
              }
            }
          }
        }
      });
    }
    return grad_in;
  }

  Parameter<T> kernels;  // K x C x kh x kw
  Parameter<T> bias;     // K
  bool needs_input_grad = false;

 private:
  void check_input(const Tensor<T>& in) const {
    if (in.rank() != 4) throw std::invalid_argument("conv2d: input must be 4-d");
    if (in.dim(1) != kernels.dim(1)) {
      throw std::invalid_argument("conv2d: channel mismatch");
    }
    if (kernels.dim(2) > in.dim(2) || kernels.dim(3) > in.dim(3)) {
      throw std::invalid_argument("conv2d: kernel " +
                                  dims_to_string(kernels.value.dims()) +
                                  " larger than input " + dims_to_string(in.dims()));
    }
  }

  Tensor<T> input_;
};

// Non-overlapping max pooling; stride equals the pool size, trailing
// remainder rows/columns are discarded. Gradient routes to the first
// (row-major) occurrence of each window maximum.
template <typename T>
class MaxPool2d {
 public:
  MaxPool2d(std::size_t pool_h, std::size_t pool_w)
      : pool_h_(pool_h), pool_w_(pool_w) {
    if (pool_h == 0 || pool_w == 0) {
      throw std::invalid_argument("maxpool2d: pool size must be >= 1");
    }
  }

  Tensor<T> forward(const Tensor<T>& in, LayerMode mode) {
    if (in.rank() != 4) throw std::invalid_argument("maxpool2d: input must be 4-d");
    if (pool_h_ > in.dim(2) || pool_w_ > in.dim(3)) {
      throw std::invalid_argument("maxpool2d: pool larger than input");
    }
    const std::size_t batch = in.dim(0), k = in.dim(1);
    const std::size_t h = in.dim(2), w = in.dim(3);
    const std::size_t oh = h / pool_h_, ow = w / pool_w_;

    Tensor<T> out({batch, k, oh, ow});
    argmax_.assign(out.size(), 0);
    in_dims_ = in.dims();
    std::size_t o = 0;
    for (std::size_t b = 0; b < batch; ++b) {
      for (std::size_t c = 0; c < k; ++c) {
        for (std::size_t y = 0; y < oh; ++y) {
          for (std::size_t x = 0; x < ow; ++x, ++o) {
            T best = in(b, c, y * pool_h_, x * pool_w_);
            std::size_t best_idx =
                ((b * k + c) * h + y * pool_h_) * w + x * pool_w_;
            for (std::size_t dy = 0; dy < pool_h_; ++dy) {
              for (std::size_t dx = 0; dx < pool_w_; ++dx) {
                const T v = in(b, c, y * pool_h_ + dy, x * pool_w_ + dx);
                if (v > best) {
                  best = v;
                  best_idx = ((b * k + c) * h + y * pool_h_ + dy) * w +
                             x * pool_w_ + dx;
                }
              }
            }
            out[o] = best;
            argmax_[o] = best_idx;
          }
        }
      }
    }
    (void)mode;
    return out;
  }

  Tensor<T> backward(const Tensor<T>& grad_out) {
    if (argmax_.empty() && grad_out.size() != 0 && in_dims_.empty()) {
      throw std::logic_error("maxpool2d backward before forward");
    }
    Tensor<T> grad_in(in_dims_);
    for (std::size_t o = 0; o < grad_out.size(); ++o) {
      grad_in[argmax_[o]] += grad_out[o];
    }
    return grad_in;
  }

  void routing_hash(std::uint64_t& h) const {
    for (std::size_t idx : argmax_) fnv_mix(h, idx);
  }

  std::size_t pool_h() const { return pool_h_; }
  std::size_t pool_w() const { return pool_w_; }

 private:
  std::size_t pool_h_, pool_w_;
  std::vector<std::size_t> argmax_;
  std::vector<std::size_t> in_dims_;
};

// Per-channel maximum over all spatial positions: B x K x H x W -> B x K.
template <typename T>
class GlobalMaxPool {
 public:
  Tensor<T> forward(const Tensor<T>& in, LayerMode mode) {
    if (in.rank() != 4) throw std::invalid_argument("global_maxpool: input must be 4-d");
    const std::size_t batch = in.dim(0), k = in.dim(1);
    const std::size_t plane = in.dim(2) * in.dim(3);
    if (plane == 0) throw std::invalid_argument("global_maxpool: empty plane");

    Tensor<T> out({batch, k});
    argmax_.assign(batch * k, 0);
    in_dims_ = in.dims();
    const T* p = in.data();
    for (std::size_t bk = 0; bk < batch * k; ++bk) {
      const T* row = p + bk * plane;
      T best = row[0];
      std::size_t best_i = 0;
      for (std::size_t i = 1; i < plane; ++i) {
        if (row[i] > best) {
          best = row[i];
          best_i = i;
        }
      }
      out[bk] = best;
      argmax_[bk] = bk * plane + best_i;
    }
    (void)mode;
    return out;
  }

  Tensor<T> backward(const Tensor<T>& grad_out) {
    Tensor<T> grad_in(in_dims_);
    for (std::size_t bk = 0; bk < grad_out.size(); ++bk) {
      grad_in[argmax_[bk]] += grad_out[bk];
    }
    return grad_in;
  }

  void routing_hash(std::uint64_t& h) const {
    for (std::size_t idx : argmax_) fnv_mix(h, idx);
  }

 private:
  std::vector<std::size_t> argmax_;
  std::vector<std::size_t> in_dims_;
};

// Affine map: out = in * W^T + b with W of shape M x N.
template <typename T>
class Dense {
 public:
  Dense(std::size_t out_features, std::size_t in_features, Rng& rng)
      : weight({out_features, in_features}), bias({out_features}) {
    weight.init_uniform(
        rng, std::sqrt(6.0 / static_cast<double>(in_features + out_features)));
  }

  Tensor<T> forward(const Tensor<T>& in, LayerMode mode) {
    if (in.rank() != 2 || in.dim(1) != weight.dim(1)) {
      throw std::invalid_argument("dense: input " + dims_to_string(in.dims()) +
                                  " does not match weight " +
                                  dims_to_string(weight.value.dims()));
    }
    const std::size_t batch = in.dim(0), n = weight.dim(1), m = weight.dim(0);
    Tensor<T> out({batch, m});
    const std::size_t work = batch * m * n;
    parallel_for(batch, work, [&](std::size_t b) {
      for (std::size_t j = 0; j < m; ++j) {
        T acc = bias.value[j];
        const T* wr = weight.value.data() + j * n;
        const T* xr = in.data() + b * n;
        for (std::size_t i = 0; i < n; ++i) acc += wr[i] * xr[i];
        out(b, j) = acc;
      }
    });
    if (mode == LayerMode::kTrain) input_ = in;
    return out;
  }

  Tensor<T> backward(const Tensor<T>& grad_out) {
    if (input_.empty()) throw std::logic_error("dense backward before forward");
    const std::size_t batch = input_.dim(0), n = weight.dim(1), m = weight.dim(0);
    for (std::size_t j = 0; j < m; ++j) {
      T bias_acc = 0;
      T* gw = weight.grad.data() + j * n;
      for (std::size_t b = 0; b < batch; ++b) {
        const T go = grad_out(b, j);
        bias_acc += go;
        const T* xr = input_.data() + b * n;
        for (std::size_t i = 0; i < n; ++i) gw[i] += go * xr[i];
      }
      bias.grad[j] += bias_acc;
    }
    Tensor<T> grad_in(input_.dims());
    for (std::size_t b = 0; b < batch; ++b) {
      T* gi = grad_in.data() + b * n;
      for (std::size_t j = 0; j < m; ++j) {
        const T go = grad_out(b, j);
        const T* wr = weight.value.data() + j * n;
        for (std::size_t i = 0; i < n; ++i) gi[i] += go * wr[i];
      }
    }
    return grad_in;
  }

  Parameter<T> weight;  // M x N
  Parameter<T> bias;    // M

 private:
  Tensor<T> input_;
};

// max(x, 0); subgradient 0 at 0.
template <typename T>
class Relu {
 public:
  Tensor<T> forward(const Tensor<T>& in, LayerMode mode) {
    Tensor<T> out(in.dims());
    for (std::size_t i = 0; i < in.size(); ++i) out[i] = in[i] > T(0) ? in[i] : T(0);
    if (mode == LayerMode::kTrain) output_ = out;
    return out;
  }

  Tensor<T> backward(const Tensor<T>& grad_out) {
    if (output_.empty()) throw std::logic_error("relu backward before forward");
    Tensor<T> grad_in(output_.dims());
    for (std::size_t i = 0; i < output_.size(); ++i) {
      grad_in[i] = output_[i] > T(0) ? grad_out[i] : T(0);
    }
    return grad_in;
  }

  void routing_hash(std::uint64_t& h) const {
    for (std::size_t i = 0; i < output_.size(); ++i) {
      fnv_mix(h, output_[i] > T(0) ? 1u : 0u);
    }
  }

 private:
  Tensor<T> output_;
};

// Batch normalization over B x N activations: batch statistics in Train
// (eps 1e-5, running stats updated with momentum 0.9), running statistics
// in Eval.
template <typename T>
class BatchNorm {
 public:
  explicit BatchNorm(std::size_t features)
      : gamma({features}), beta({features}),
        running_mean({features}), running_var({features}) {
    gamma.value.fill(T(1));
    running_var.fill(T(1));
  }

  Tensor<T> forward(const Tensor<T>& in, LayerMode mode) {
    if (in.rank() != 2 || in.dim(1) != gamma.dim(0)) {
      throw std::invalid_argument("batch_norm: input " + dims_to_string(in.dims()) +
                                  " does not match " +
                                  std::to_string(gamma.dim(0)) + " features");
    }
    const std::size_t batch = in.dim(0), n = in.dim(1);
    Tensor<T> out(in.dims());

    if (mode == LayerMode::kTrain) {
      if (batch < 2) {
        throw std::invalid_argument("batch_norm: train mode needs batch >= 2");
      }
      xhat_ = Tensor<T>(in.dims());
      inv_std_ = Tensor<T>({n});
      for (std::size_t j = 0; j < n; ++j) {
        T mean = 0;
        for (std::size_t b = 0; b < batch; ++b) mean += in(b, j);
        mean /= static_cast<T>(batch);
        T var = 0;
        for (std::size_t b = 0; b < batch; ++b) {
          const T d = in(b, j) - mean;
          var += d * d;
        }
        var /= static_cast<T>(batch);
        const T inv = T(1) / std::sqrt(var + kEps);
        inv_std_[j] = inv;
        for (std::size_t b = 0; b < batch; ++b) {
          xhat_(b, j) = (in(b, j) - mean) * inv;
          out(b, j) = gamma.value[j] * xhat_(b, j) + beta.value[j];
        }
        running_mean[j] = kMomentum * running_mean[j] + (T(1) - kMomentum) * mean;
        running_var[j] = kMomentum * running_var[j] + (T(1) - kMomentum) * var;
      }
    } else {
      for (std::size_t j = 0; j < n; ++j) {
        const T inv = T(1) / std::sqrt(running_var[j] + kEps);
        for (std::size_t b = 0; b < batch; ++b) {
          out(b, j) = gamma.value[j] * (in(b, j) - running_mean[j]) * inv +
                      beta.value[j];
        }
      }
    }
    return out;
  }

  // Full batch-statistics chain rule:
  //   dx = gamma * inv_std * (dy - mean_b(dy) - xhat * mean_b(dy * xhat))
  Tensor<T> backward(const Tensor<T>& grad_out) {
    if (xhat_.empty()) throw std::logic_error("batch_norm backward before train forward");
    const std::size_t batch = xhat_.dim(0), n = xhat_.dim(1);
    Tensor<T> grad_in(xhat_.dims());
    for (std::size_t j = 0; j < n; ++j) {
      T sum_dy = 0, sum_dy_xhat = 0;
      for (std::size_t b = 0; b < batch; ++b) {
        sum_dy += grad_out(b, j);
        sum_dy_xhat += grad_out(b, j) * xhat_(b, j);
      }
      beta.grad[j] += sum_dy;
      gamma.grad[j] += sum_dy_xhat;
      const T inv_b = T(1) / static_cast<T>(batch);
      const T scale = gamma.value[j] * inv_std_[j];
      for (std::size_t b = 0; b < batch; ++b) {
        grad_in(b, j) = scale * (grad_out(b, j) - sum_dy * inv_b -
                                 xhat_(b, j) * sum_dy_xhat * inv_b);
      }
    }
    return grad_in;
  }

  static constexpr T kEps = static_cast<T>(1e-5);
  static constexpr T kMomentum = static_cast<T>(0.9);

  Parameter<T> gamma;
  Parameter<T> beta;
  Tensor<T> running_mean;
  Tensor<T> running_var;

 private:
  Tensor<T> xhat_;
  Tensor<T> inv_std_;
};

// Inverted dropout: zero with probability `rate` and scale survivors by
// 1/(1-rate) in Train; identity in Eval. rate 0 draws nothing.
template <typename T>
class Dropout {
 public:
  explicit Dropout(double rate) : rate_(rate) {
    if (rate < 0.0 || rate >= 1.0) {
      throw std::invalid_argument("dropout: rate must be in [0, 1)");
    }
  }

  Tensor<T> forward(const Tensor<T>& in, LayerMode mode, Rng& rng) {
    if (mode == LayerMode::kEval || rate_ == 0.0) {
      identity_ = true;
      mask_ = Tensor<T>();
      return in;
    }
    identity_ = false;
    mask_ = Tensor<T>(in.dims());
    const T scale = static_cast<T>(1.0 / (1.0 - rate_));
    Tensor<T> out(in.dims());
    for (std::size_t i = 0; i < in.size(); ++i) {
      mask_[i] = rng.uniform() >= rate_ ? scale : T(0);
      out[i] = in[i] * mask_[i];
    }
    return out;
  }

  Tensor<T> backward(const Tensor<T>& grad_out) {
    if (identity_) return grad_out;
    Tensor<T> grad_in(grad_out.dims());
    for (std::size_t i = 0; i < grad_out.size(); ++i) {
      grad_in[i] = grad_out[i] * mask_[i];
    }
    return grad_in;
  }

  double rate() const { return rate_; }
  const Tensor<T>& mask() const { return mask_; }

 private:
  double rate_;
  bool identity_ = true;
  Tensor<T> mask_;
};

// --- loss ----------------------------------------------------------------

template <typename T>
struct SoftmaxLoss {
  T loss;
  Tensor<T> probs;        // B x C, rows sum to 1
  Tensor<T> grad_logits;  // (probs - onehot) / B
};

template <typename T>
SoftmaxLoss<T> softmax_cross_entropy(const Tensor<T>& logits,
                                     const std::vector<int>& labels) {
  if (logits.rank() != 2) throw std::invalid_argument("softmax: logits must be 2-d");
  const std::size_t batch = logits.dim(0), classes = logits.dim(1);
  if (labels.size() != batch) throw std::invalid_argument("softmax: label count mismatch");

  SoftmaxLoss<T> result;
  result.probs = Tensor<T>(logits.dims());
  result.grad_logits = Tensor<T>(logits.dims());
  double loss_acc = 0.0;

  for (std::size_t b = 0; b < batch; ++b) {
    if (labels[b] < 0 || static_cast<std::size_t>(labels[b]) >= classes) {
      throw std::invalid_argument("softmax: label " + std::to_string(labels[b]) +
                                  " out of range for " + std::to_string(classes) +
                                  " classes");
    }
    T row_max = logits(b, 0);
    for (std::size_t c = 1; c < classes; ++c) row_max = std::max(row_max, logits(b, c));
    double denom = 0.0;
    for (std::size_t c = 0; c < classes; ++c) {
      denom += std::exp(static_cast<double>(logits(b, c) - row_max));
    }
    const double log_denom = std::log(denom);
    for (std::size_t c = 0; c < classes; ++c) {
      const double logp = static_cast<double>(logits(b, c) - row_max) - log_denom;
      result.probs(b, c) = static_cast<T>(std::exp(logp));
      if (static_cast<std::size_t>(labels[b]) == c) loss_acc -= logp;
    }
  }

  result.loss = static_cast<T>(loss_acc / static_cast<double>(batch));
  const T inv_b = T(1) / static_cast<T>(batch);
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t c = 0; c < classes; ++c) {
      const T onehot = static_cast<std::size_t>(labels[b]) == c ? T(1) : T(0);
      result.grad_logits(b, c) = (result.probs(b, c) - onehot) * inv_b;
    }
  }
  return result;
}

// --- optimizer -------------------------------------------------------------

inline constexpr double kAdadeltaRho = 0.95;
inline constexpr double kAdadeltaEps = 1e-6;

// Per scalar:
//   E[g^2] <- rho E[g^2] + (1-rho) g^2
//   delta   = -sqrt(E[d^2] + eps) / sqrt(E[g^2] + eps) * g
//   E[d^2] <- rho E[d^2] + (1-rho) delta^2
//   value  <- value + delta
// Gradients are cleared afterwards.
template <typename T>
void adadelta_step(const std::vector<Parameter<T>*>& params,
                   double rho = kAdadeltaRho, double eps = kAdadeltaEps) {
  for (Parameter<T>* p : params) {
    for (std::size_t i = 0; i < p->value.size(); ++i) {
      const double g = static_cast<double>(p->grad[i]);
      if (!std::isfinite(g)) {
        throw NumericalError("adadelta: non-finite gradient");
      }
      double eg = static_cast<double>(p->accum_grad_sq[i]);
      double ed = static_cast<double>(p->accum_delta_sq[i]);
      eg = rho * eg + (1.0 - rho) * g * g;
      const double delta = -std::sqrt(ed + eps) / std::sqrt(eg + eps) * g;
      ed = rho * ed + (1.0 - rho) * delta * delta;
      p->accum_grad_sq[i] = static_cast<T>(eg);
      p->accum_delta_sq[i] = static_cast<T>(ed);
      p->value[i] += static_cast<T>(delta);
    }
    p->zero_grad();
  }
}

}  // namespace serforge::nn
