#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "serforge/models.hpp"
#include "serforge/nn.hpp"
#include "serforge/rng.hpp"
#include "serforge/tensor.hpp"

namespace serforge::gradcheck {

inline constexpr double kEps = 1e-5;
inline constexpr double kLayerTolerance = 1e-5;
inline constexpr double kModelTolerance = 1e-4;

// Differences below kFdNoiseFloor are indistinguishable from central-
// difference rounding noise (~eps * |loss| / step); gradients that are
// mathematically zero (e.g. a conv bias feeding batch norm, which absorbs
// uniform shifts) must not fail on that noise.
inline constexpr double kFdNoiseFloor = 1e-8;

inline double relative_error(double a, double b) {
  if (std::abs(a - b) <= kFdNoiseFloor) return 0.0;
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-8});
}

struct CheckResult {
  std::string name;
  double max_rel_err = 0.0;
  std::size_t checked = 0;
  std::size_t skipped = 0;  // probes straddling a relu/argmax boundary
};

namespace detail {

inline Tensor<double> random_tensor(Rng& rng, std::vector<std::size_t> dims,
                                    double lo = -1.0, double hi = 1.0) {
  Tensor<double> t(std::move(dims));
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = rng.uniform(lo, hi);
  return t;
}

// Distinct values of both signs, magnitudes step, 2*step, ... and none
// closer than step to zero, so finite differencing never crosses a
// max-pool or relu boundary.
inline Tensor<double> distinct_tensor(Rng& rng, std::vector<std::size_t> dims,
                                      double step = 0.02) {
  Tensor<double> t(std::move(dims));
  std::vector<std::size_t> perm(t.size());
  for (std::size_t i = 0; i < perm.size(); ++i) perm[i] = i;
  rng.shuffle(perm);
  for (std::size_t i = 0; i < t.size(); ++i) {
    const double magnitude = (static_cast<double>(perm[i]) + 1.0) * step;
    t[i] = perm[i] % 2 == 0 ? magnitude : -magnitude;
  }
  return t;
}

inline double dot(const Tensor<double>& a, const Tensor<double>& b) {
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += a[i] * b[i];
  return acc;
}

// Central-difference comparison of analytic gradients against a loss
// closure, perturbing every listed slot.
template <typename LossFn>
double fd_compare(const std::vector<double*>& slots,
                  const std::vector<double>& analytic, LossFn&& loss) {
  double worst = 0.0;
  for (std::size_t i = 0; i < slots.size(); ++i) {
    const double saved = *slots[i];
    *slots[i] = saved + kEps;
    const double up = loss();
    *slots[i] = saved - kEps;
    const double down = loss();
    *slots[i] = saved;
    const double fd = (up - down) / (2.0 * kEps);
    worst = std::max(worst, relative_error(analytic[i], fd));
  }
  return worst;
}

template <typename T>
std::vector<double*> tensor_slots(Tensor<T>& t) {
  std::vector<double*> slots;
  slots.reserve(t.size());
  for (std::size_t i = 0; i < t.size(); ++i) slots.push_back(&t[i]);
  return slots;
}

inline std::vector<double> tensor_values(const Tensor<double>& t) {
  return std::vector<double>(t.data(), t.data() + t.size());
}

}  // namespace detail

// --- per-layer checks -------------------------------------------------------

inline double check_conv2d_once(Rng& rng) {
  const std::size_t b = 1 + rng.index(2), c = 1 + rng.index(2);
  const std::size_t k = 1 + rng.index(3);
  const std::size_t kh = 1 + rng.index(3), kw = 1 + rng.index(3);
  const std::size_t h = kh + rng.index(4), w = kw + rng.index(4);

  nn::Conv2d<double> conv(k, c, kh, kw, rng);
  conv.needs_input_grad = true;
  Tensor<double> in = detail::random_tensor(rng, {b, c, h, w});
  Tensor<double> weights =
      detail::random_tensor(rng, {b, k, h - kh + 1, w - kw + 1});

  Tensor<double> grad_in = [&] {
    conv.forward(in, nn::LayerMode::kTrain);
    return conv.backward(weights);
  }();
  const std::vector<double> analytic_in = detail::tensor_values(grad_in);
  const std::vector<double> analytic_ker = detail::tensor_values(conv.kernels.grad);
  const std::vector<double> analytic_bias = detail::tensor_values(conv.bias.grad);

  auto loss = [&] {
    return detail::dot(conv.forward(in, nn::LayerMode::kEval), weights);
  };
  double worst = detail::fd_compare(detail::tensor_slots(in), analytic_in, loss);
  worst = std::max(worst, detail::fd_compare(detail::tensor_slots(conv.kernels.value),
                                             analytic_ker, loss));
  worst = std::max(worst, detail::fd_compare(detail::tensor_slots(conv.bias.value),
                                             analytic_bias, loss));
  return worst;
}

inline double check_dense_once(Rng& rng) {
  const std::size_t b = 1 + rng.index(4), n = 1 + rng.index(6), m = 1 + rng.index(6);
  nn::Dense<double> dense(m, n, rng);
  Tensor<double> in = detail::random_tensor(rng, {b, n});
  Tensor<double> weights = detail::random_tensor(rng, {b, m});

  dense.forward(in, nn::LayerMode::kTrain);
  Tensor<double> grad_in = dense.backward(weights);
  const std::vector<double> analytic_in = detail::tensor_values(grad_in);
  const std::vector<double> analytic_w = detail::tensor_values(dense.weight.grad);
  const std::vector<double> analytic_b = detail::tensor_values(dense.bias.grad);

  auto loss = [&] {
    return detail::dot(dense.forward(in, nn::LayerMode::kEval), weights);
  };
  double worst = detail::fd_compare(detail::tensor_slots(in), analytic_in, loss);
  worst = std::max(worst, detail::fd_compare(detail::tensor_slots(dense.weight.value),
                                             analytic_w, loss));
  worst = std::max(worst, detail::fd_compare(detail::tensor_slots(dense.bias.value),
                                             analytic_b, loss));
  return worst;
}

inline double check_relu_once(Rng& rng) {
  const std::size_t b = 1 + rng.index(3), n = 2 + rng.index(8);
  nn::Relu<double> relu;
  Tensor<double> in = detail::distinct_tensor(rng, {b, n});
  Tensor<double> weights = detail::random_tensor(rng, {b, n});

  relu.forward(in, nn::LayerMode::kTrain);
  const std::vector<double> analytic = detail::tensor_values(relu.backward(weights));
  auto loss = [&] {
    return detail::dot(relu.forward(in, nn::LayerMode::kEval), weights);
  };
  return detail::fd_compare(detail::tensor_slots(in), analytic, loss);
}

inline double check_maxpool_once(Rng& rng) {
  const std::size_t b = 1 + rng.index(2), k = 1 + rng.index(2);
  const std::size_t ph = 1 + rng.index(3), pw = 1 + rng.index(3);
  const std::size_t h = ph + rng.index(4), w = pw + rng.index(4);

  nn::MaxPool2d<double> pool(ph, pw);
  Tensor<double> in = detail::distinct_tensor(rng, {b, k, h, w});
  Tensor<double> weights = detail::random_tensor(rng, {b, k, h / ph, w / pw});

  pool.forward(in, nn::LayerMode::kTrain);
  const std::vector<double> analytic = detail::tensor_values(pool.backward(weights));
  auto loss = [&] {
    return detail::dot(pool.forward(in, nn::LayerMode::kEval), weights);
  };
  return detail::fd_compare(detail::tensor_slots(in), analytic, loss);
}

inline double check_global_maxpool_once(Rng& rng) {
  const std::size_t b = 1 + rng.index(2), k = 1 + rng.index(3);
  const std::size_t h = 1 + rng.index(6);
  nn::GlobalMaxPool<double> pool;
  Tensor<double> in = detail::distinct_tensor(rng, {b, k, h, 1});
  Tensor<double> weights = detail::random_tensor(rng, {b, k});

  pool.forward(in, nn::LayerMode::kTrain);
  const std::vector<double> analytic = detail::tensor_values(pool.backward(weights));
  auto loss = [&] {
    return detail::dot(pool.forward(in, nn::LayerMode::kEval), weights);
  };
  return detail::fd_compare(detail::tensor_slots(in), analytic, loss);
}

inline double check_batch_norm_once(Rng& rng) {
  const std::size_t b = 2 + rng.index(6), n = 1 + rng.index(5);
  nn::BatchNorm<double> bn(n);
  for (std::size_t i = 0; i < n; ++i) {
    bn.gamma.value[i] = rng.uniform(0.5, 1.5);
    bn.beta.value[i] = rng.uniform(-0.5, 0.5);
  }
  Tensor<double> in = detail::random_tensor(rng, {b, n});
  Tensor<double> weights = detail::random_tensor(rng, {b, n});

  bn.forward(in, nn::LayerMode::kTrain);
  const std::vector<double> analytic_in = detail::tensor_values(bn.backward(weights));
  const std::vector<double> analytic_g = detail::tensor_values(bn.gamma.grad);
  const std::vector<double> analytic_b = detail::tensor_values(bn.beta.grad);

  // keep using batch statistics under perturbation
  auto loss = [&] {
    return detail::dot(bn.forward(in, nn::LayerMode::kTrain), weights);
  };
  double worst = detail::fd_compare(detail::tensor_slots(in), analytic_in, loss);
  worst = std::max(worst, detail::fd_compare(detail::tensor_slots(bn.gamma.value),
                                             analytic_g, loss));
  worst = std::max(worst, detail::fd_compare(detail::tensor_slots(bn.beta.value),
                                             analytic_b, loss));
  return worst;
}

inline double check_softmax_once(Rng& rng) {
  const std::size_t b = 1 + rng.index(4);
  const std::size_t classes = 4;
  Tensor<double> logits = detail::random_tensor(rng, {b, classes}, -2.0, 2.0);
  std::vector<int> labels(b);
  for (std::size_t i = 0; i < b; ++i) labels[i] = static_cast<int>(rng.index(classes));

  const nn::SoftmaxLoss<double> base = nn::softmax_cross_entropy(logits, labels);
  const std::vector<double> analytic = detail::tensor_values(base.grad_logits);
  auto loss = [&] {
    return static_cast<double>(nn::softmax_cross_entropy(logits, labels).loss);
  };
  return detail::fd_compare(detail::tensor_slots(logits), analytic, loss);
}

inline std::vector<CheckResult> check_layers(std::uint64_t seed,
                                             std::size_t shapes_per_layer = 10) {
  struct Layer {
    const char* name;
    double (*fn)(Rng&);
  };
  const Layer layers[] = {
      {"conv2d", check_conv2d_once},       {"dense", check_dense_once},
      {"relu", check_relu_once},           {"maxpool2d", check_maxpool_once},
      {"global_maxpool", check_global_maxpool_once},
      {"batch_norm", check_batch_norm_once},
      {"softmax_cross_entropy", check_softmax_once},
  };
  std::vector<CheckResult> results;
  for (const Layer& layer : layers) {
    CheckResult r;
    r.name = layer.name;
    for (std::size_t i = 0; i < shapes_per_layer; ++i) {
      Rng rng(seed + i * 1000003);
      r.max_rel_err = std::max(r.max_rel_err, layer.fn(rng));
      ++r.checked;
    }
    results.push_back(r);
  }
  return results;
}

// --- whole-variant checks ----------------------------------------------------

// Shrunk geometry used for end-to-end gradient checks and the overfit
// capacity test: 32x64 spectrograms, 16x64 MFCCs, 32-word text, 4 kernels
// per path. Dropout off so the loss is deterministic under perturbation.
inline models::ModelConfig reduced_config(models::ModelVariant variant) {
  models::ModelConfig cfg;
  cfg.variant = variant;
  cfg.spec_h = 32;
  cfg.spec_w = 64;
  cfg.mfcc_h = 16;
  cfg.mfcc_w = 64;
  cfg.text_words = 32;
  cfg.text_dim = 300;
  cfg.spec_kernels = {{3, 4}, {5, 6}, {6, 8}, {8, 10}};
  cfg.mfcc_kernels = {{2, 3}, {3, 4}, {4, 5}, {5, 6}};
  cfg.kernels_per_path = 4;
  cfg.text_kernel_heights = {12, 8, 6, 3};
  cfg.text_filters_per_size = 4;
  cfg.fc1_size = 32;
  cfg.fc2_size = 16;
  cfg.text_fc_size = 16;
  cfg.dropout_rate = 0.0;
  return cfg;
}

inline models::Batch<double> random_batch(const models::ModelConfig& cfg,
                                          std::size_t batch, Rng& rng) {
  models::Batch<double> b;
  if (cfg.needs_spec()) {
    b.spec = detail::random_tensor(rng, {batch, 1, cfg.spec_h, cfg.spec_w});
  }
  if (cfg.needs_ds2()) {
    b.ds2 = detail::random_tensor(rng, {batch, 1, cfg.ds2_h(), cfg.ds2_w()});
  }
  if (cfg.needs_mfcc()) {
    b.mfcc = detail::random_tensor(rng, {batch, 1, cfg.mfcc_h, cfg.mfcc_w});
  }
  if (cfg.needs_text()) {
    b.text = detail::random_tensor(rng, {batch, 1, cfg.text_words, cfg.text_dim});
  }
  b.labels.resize(batch);
  for (std::size_t i = 0; i < batch; ++i) {
    b.labels[i] = static_cast<int>(rng.index(cfg.classes));
  }
  return b;
}

// Samples parameters across the graph and compares backprop against
// central differences of the training loss. Probes whose +/- eps forwards
// land on a different relu/argmax routing are skipped (the loss is not
// differentiable there); the caller gets both counts.
inline CheckResult check_variant(models::ModelVariant variant, std::uint64_t seed,
                                 std::size_t param_samples = 6) {
  const models::ModelConfig cfg = reduced_config(variant);
  models::ModelGraph<double> graph(cfg, Rng(seed));
  Rng data_rng(seed ^ 0x5eedf00dull);
  const models::Batch<double> batch = random_batch(cfg, 3, data_rng);

  auto loss_of = [&] {
    Tensor<double> logits = graph.forward(batch, nn::LayerMode::kTrain);
    return static_cast<double>(
        nn::softmax_cross_entropy(logits, batch.labels).loss);
  };

  loss_of();
  const std::uint64_t base_sig = graph.routing_signature();
  {
    Tensor<double> logits = graph.forward(batch, nn::LayerMode::kTrain);
    nn::SoftmaxLoss<double> loss = nn::softmax_cross_entropy(logits, batch.labels);
    graph.backward(loss.grad_logits);
  }

  auto params = graph.parameters();
  std::vector<std::pair<nn::Parameter<double>*, std::size_t>> candidates;
  for (std::size_t attempt = 0; attempt < param_samples * 4; ++attempt) {
    nn::Parameter<double>* p = params[data_rng.index(params.size())].second;
    candidates.emplace_back(p, data_rng.index(p->value.size()));
  }

  CheckResult result;
  result.name = std::string("model ") + models::variant_name(variant);
  for (const auto& [param, idx] : candidates) {
    if (result.checked >= param_samples) break;
    const double analytic = param->grad[idx];
    const double saved = param->value[idx];

    param->value[idx] = saved + kEps;
    const double up = loss_of();
    const std::uint64_t sig_up = graph.routing_signature();
    param->value[idx] = saved - kEps;
    const double down = loss_of();
    const std::uint64_t sig_down = graph.routing_signature();
    param->value[idx] = saved;

    if (sig_up != base_sig || sig_down != base_sig) {
      ++result.skipped;
      continue;
    }
    const double fd = (up - down) / (2.0 * kEps);
    result.max_rel_err = std::max(result.max_rel_err, relative_error(analytic, fd));
    ++result.checked;
  }
  return result;
}

}  // namespace serforge::gradcheck
