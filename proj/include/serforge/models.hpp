#pragma once

#include <cstdint>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "serforge/binary_io.hpp"
#include "serforge/errors.hpp"
#include "serforge/nn.hpp"
#include "serforge/rng.hpp"
#include "serforge/tensor.hpp"

namespace serforge::models {

// The seven architectures: text-only, spectrogram (plain and with extra
// downsampled paths), MFCC, and the three two-channel fusions.
enum class ModelVariant : std::uint8_t {
  kM1Text = 1,
  kM2ASpec = 2,
  kM2BSpecDeep = 3,
  kM3Mfcc = 4,
  kM4ASpecMfcc = 5,
  kM4BTextSpec = 6,
  kM4CTextMfcc = 7,
};

inline const char* variant_name(ModelVariant v) {
  switch (v) {
    case ModelVariant::kM1Text: return "m1";
    case ModelVariant::kM2ASpec: return "m2a";
    case ModelVariant::kM2BSpecDeep: return "m2b";
    case ModelVariant::kM3Mfcc: return "m3";
    case ModelVariant::kM4ASpecMfcc: return "m4a";
    case ModelVariant::kM4BTextSpec: return "m4b";
    case ModelVariant::kM4CTextMfcc: return "m4c";
  }
  return "?";
}

inline ModelVariant parse_variant(const std::string& name) {
  for (ModelVariant v :
       {ModelVariant::kM1Text, ModelVariant::kM2ASpec, ModelVariant::kM2BSpecDeep,
        ModelVariant::kM3Mfcc, ModelVariant::kM4ASpecMfcc,
        ModelVariant::kM4BTextSpec, ModelVariant::kM4CTextMfcc}) {
    if (name == variant_name(v)) return v;
  }
  throw UsageError("unknown model variant: " + name +
                   " (expected one of m1 m2a m2b m3 m4a m4b m4c)");
}

struct KernelSize {
  std::size_t h = 0;
  std::size_t w = 0;
};

struct ModelConfig {
  ModelVariant variant = ModelVariant::kM4CTextMfcc;
  std::size_t classes = 4;

  // speech channels: 4 parallel conv paths, max-pool of half the conv
  // output, then the 400/200 FC head
  std::vector<KernelSize> spec_kernels = {{12, 16}, {18, 24}, {24, 32}, {30, 40}};
  std::vector<KernelSize> mfcc_kernels = {{4, 6}, {6, 8}, {8, 10}, {10, 12}};
  std::size_t kernels_per_path = 200;
  std::size_t fc1_size = 400;
  std::size_t fc2_size = 200;

  // text channel: full-embedding-width kernels of varying heights, one
  // global max feature per filter
  std::vector<std::size_t> text_kernel_heights = {12, 8, 6, 3};
  std::size_t text_filters_per_size = 100;
  std::size_t text_fc_size = 200;

  double dropout_rate = 0.5;

  // input geometry
  std::size_t spec_h = 128, spec_w = 256;
  std::size_t mfcc_h = 40, mfcc_w = 256;
  std::size_t text_words = 128, text_dim = 300;

  std::size_t ds2_h() const { return spec_h / 2; }
  std::size_t ds2_w() const { return spec_w / 2; }

  bool needs_spec() const {
    return variant == ModelVariant::kM2ASpec || variant == ModelVariant::kM2BSpecDeep ||
           variant == ModelVariant::kM4ASpecMfcc || variant == ModelVariant::kM4BTextSpec;
  }
  bool needs_ds2() const { return variant == ModelVariant::kM2BSpecDeep; }
  bool needs_mfcc() const {
    return variant == ModelVariant::kM3Mfcc || variant == ModelVariant::kM4ASpecMfcc ||
           variant == ModelVariant::kM4CTextMfcc;
  }
  bool needs_text() const {
    return variant == ModelVariant::kM1Text || variant == ModelVariant::kM4BTextSpec ||
           variant == ModelVariant::kM4CTextMfcc;
  }

  void validate() const {
    if (classes < 2) throw std::invalid_argument("model config: classes must be >= 2");
    if (dropout_rate < 0.0 || dropout_rate >= 1.0) {
      throw std::invalid_argument("model config: dropout_rate must be in [0, 1)");
    }
    if (kernels_per_path == 0 || text_filters_per_size == 0) {
      throw std::invalid_argument("model config: kernel counts must be >= 1");
    }
    if (spec_kernels.empty() || mfcc_kernels.empty() || text_kernel_heights.empty()) {
      throw std::invalid_argument("model config: kernel lists must be non-empty");
    }
    if (fc1_size == 0 || fc2_size == 0 || text_fc_size == 0) {
      throw std::invalid_argument("model config: FC sizes must be >= 1");
    }
  }
};

// Model inputs for one minibatch; unused members stay empty. Image-like
// inputs are B x 1 x H x W.
template <typename T>
struct Batch {
  Tensor<T> spec;
  Tensor<T> ds2;
  Tensor<T> mfcc;
  Tensor<T> text;
  std::vector<int> labels;

  std::size_t size() const {
    for (const Tensor<T>* t : {&spec, &ds2, &mfcc, &text}) {
      if (!t->empty()) return t->dim(0);
    }
    return 0;
  }
};

template <typename T>
Tensor<T> concat_cols(const std::vector<Tensor<T>>& parts) {
  const std::size_t batch = parts.front().dim(0);
  std::size_t total = 0;
  for (const auto& p : parts) total += p.dim(1);
  Tensor<T> out({batch, total});
  for (std::size_t b = 0; b < batch; ++b) {
    std::size_t col = 0;
    for (const auto& p : parts) {
      for (std::size_t j = 0; j < p.dim(1); ++j) out(b, col++) = p(b, j);
    }
  }
  return out;
}

template <typename T>
std::vector<Tensor<T>> split_cols(const Tensor<T>& whole,
                                  const std::vector<std::size_t>& widths) {
  std::vector<Tensor<T>> parts;
  std::size_t col = 0;
  for (std::size_t w : widths) {
    Tensor<T> part({whole.dim(0), w});
    for (std::size_t b = 0; b < whole.dim(0); ++b) {
      for (std::size_t j = 0; j < w; ++j) part(b, j) = whole(b, col + j);
    }
    col += w;
    parts.push_back(std::move(part));
  }
  return parts;
}

using ShapeTrace = std::vector<std::pair<std::string, std::vector<std::size_t>>>;

// conv -> relu -> maxpool(half) -> flatten, one speech path.
template <typename T>
class ConvPoolPath {
 public:
  ConvPoolPath(std::size_t n_kernels, KernelSize ks, std::size_t in_h,
               std::size_t in_w, Rng& rng)
      : conv_(n_kernels, 1, checked_kh(ks, in_h, in_w), ks.w, rng),
        pool_((in_h - ks.h + 1) / 2, (in_w - ks.w + 1) / 2) {
    const std::size_t oh = in_h - ks.h + 1, ow = in_w - ks.w + 1;
    pooled_h_ = oh / pool_.pool_h();
    pooled_w_ = ow / pool_.pool_w();
    out_width_ = n_kernels * pooled_h_ * pooled_w_;
  }

  Tensor<T> forward(const Tensor<T>& x, nn::LayerMode mode,
                    ShapeTrace* trace, const std::string& name) {
    Tensor<T> conv_out = conv_.forward(x, mode);
    if (trace) trace->emplace_back(name + ".conv", conv_out.dims());
    Tensor<T> pooled = pool_.forward(relu_.forward(conv_out, mode), mode);
    if (trace) trace->emplace_back(name + ".pool", pooled.dims());
    pooled_dims_ = pooled.dims();
    return pooled.reshaped({pooled.dim(0), out_width_});
  }

  void backward(const Tensor<T>& grad_flat) {
    conv_.backward(relu_.backward(pool_.backward(grad_flat.reshaped(pooled_dims_))));
  }

  void routing_hash(std::uint64_t& h) const {
    relu_.routing_hash(h);
    pool_.routing_hash(h);
  }

  std::size_t out_width() const { return out_width_; }
  nn::Conv2d<T>& conv() { return conv_; }

 private:
  static std::size_t checked_kh(KernelSize ks, std::size_t in_h, std::size_t in_w) {
    if (ks.h == 0 || ks.w == 0 || ks.h > in_h || ks.w > in_w) {
      throw std::invalid_argument("conv path: kernel " + std::to_string(ks.h) + "x" +
                                  std::to_string(ks.w) + " does not fit input " +
                                  std::to_string(in_h) + "x" + std::to_string(in_w));
    }
    if (in_h - ks.h + 1 < 2 || in_w - ks.w + 1 < 2) {
      throw std::invalid_argument("conv path: output smaller than 2x2, cannot halve");
    }
    return ks.h;
  }

  nn::Conv2d<T> conv_;
  nn::Relu<T> relu_;
  nn::MaxPool2d<T> pool_;
  std::size_t pooled_h_ = 0, pooled_w_ = 0, out_width_ = 0;
  std::vector<std::size_t> pooled_dims_;
};

// conv(height x full embedding width) -> relu -> global max, one text path.
template <typename T>
class TextConvPath {
 public:
  TextConvPath(std::size_t filters, std::size_t height, std::size_t words,
               std::size_t dim, Rng& rng)
      : conv_(filters, 1, checked_height(height, words), dim, rng),
        out_width_(filters) {}

  Tensor<T> forward(const Tensor<T>& x, nn::LayerMode mode,
                    ShapeTrace* trace, const std::string& name) {
    Tensor<T> conv_out = conv_.forward(x, mode);
    if (trace) trace->emplace_back(name + ".conv", conv_out.dims());
    Tensor<T> pooled = pool_.forward(relu_.forward(conv_out, mode), mode);
    if (trace) trace->emplace_back(name + ".pool", pooled.dims());
    return pooled;
  }

  void backward(const Tensor<T>& grad_out) {
    conv_.backward(relu_.backward(pool_.backward(grad_out)));
  }

  void routing_hash(std::uint64_t& h) const {
    relu_.routing_hash(h);
    pool_.routing_hash(h);
  }

  std::size_t out_width() const { return out_width_; }
  nn::Conv2d<T>& conv() { return conv_; }

 private:
  static std::size_t checked_height(std::size_t height, std::size_t words) {
    if (height == 0 || height > words) {
      throw std::invalid_argument("text conv: kernel height " + std::to_string(height) +
                                  " does not fit " + std::to_string(words) + " words");
    }
    return height;
  }

  nn::Conv2d<T> conv_;
  nn::Relu<T> relu_;
  nn::GlobalMaxPool<T> pool_;
  std::size_t out_width_;
};

// fc1 -> bn -> relu -> dropout -> fc2 -> bn -> projection, the
// single-feature speech head.
template <typename T>
class SpeechHead {
 public:
  SpeechHead(std::size_t in_width, const ModelConfig& cfg, Rng& rng)
      : fc1_(cfg.fc1_size, in_width, rng), bn1_(cfg.fc1_size),
        drop_(cfg.dropout_rate), fc2_(cfg.fc2_size, cfg.fc1_size, rng),
        bn2_(cfg.fc2_size), out_(cfg.classes, cfg.fc2_size, rng) {}

  Tensor<T> forward(const Tensor<T>& x, nn::LayerMode mode, Rng& rng,
                    ShapeTrace* trace) {
    Tensor<T> h1 = drop_.forward(
        relu_.forward(bn1_.forward(fc1_.forward(x, mode), mode), mode), mode, rng);
    if (trace) trace->emplace_back("head.fc1", h1.dims());
    Tensor<T> h2 = bn2_.forward(fc2_.forward(h1, mode), mode);
    if (trace) trace->emplace_back("head.fc2", h2.dims());
    Tensor<T> logits = out_.forward(h2, mode);
    if (trace) trace->emplace_back("head.out", logits.dims());
    return logits;
  }

  Tensor<T> backward(const Tensor<T>& grad_logits) {
    Tensor<T> g = fc2_.backward(bn2_.backward(out_.backward(grad_logits)));
    return fc1_.backward(bn1_.backward(relu_.backward(drop_.backward(g))));
  }

  void routing_hash(std::uint64_t& h) const { relu_.routing_hash(h); }

  template <typename Fn>
  void visit(Fn&& fn) {
    fn("head.fc1", fc1_);
    fn("head.bn1", bn1_);
    fn("head.fc2", fc2_);
    fn("head.bn2", bn2_);
    fn("head.out", out_);
  }

 private:
  nn::Dense<T> fc1_;
  nn::BatchNorm<T> bn1_;
  nn::Relu<T> relu_;
  nn::Dropout<T> drop_;
  nn::Dense<T> fc2_;
  nn::BatchNorm<T> bn2_;
  nn::Dense<T> out_;
};

// dropout -> fc -> relu -> bn -> projection, the text-only head.
template <typename T>
class TextHead {
 public:
  TextHead(std::size_t in_width, const ModelConfig& cfg, Rng& rng)
      : drop_(cfg.dropout_rate), fc_(cfg.text_fc_size, in_width, rng),
        bn_(cfg.text_fc_size), out_(cfg.classes, cfg.text_fc_size, rng) {}

  Tensor<T> forward(const Tensor<T>& x, nn::LayerMode mode, Rng& rng,
                    ShapeTrace* trace) {
    Tensor<T> h = bn_.forward(
        relu_.forward(fc_.forward(drop_.forward(x, mode, rng), mode), mode), mode);
    if (trace) trace->emplace_back("head.fc", h.dims());
    Tensor<T> logits = out_.forward(h, mode);
    if (trace) trace->emplace_back("head.out", logits.dims());
    return logits;
  }

  Tensor<T> backward(const Tensor<T>& grad_logits) {
    Tensor<T> g = relu_.backward(bn_.backward(out_.backward(grad_logits)));
    return drop_.backward(fc_.backward(g));
  }

  void routing_hash(std::uint64_t& h) const { relu_.routing_hash(h); }

  template <typename Fn>
  void visit(Fn&& fn) {
    fn("head.fc", fc_);
    fn("head.bn", bn_);
    fn("head.out", out_);
  }

 private:
  nn::Dropout<T> drop_;
  nn::Dense<T> fc_;
  nn::Relu<T> relu_;
  nn::BatchNorm<T> bn_;
  nn::Dense<T> out_;
};

// Two channel FCs with batch norm, concatenation, then the shared second
// FC and projection.
template <typename T>
class FusionHead {
 public:
  FusionHead(std::size_t in_a, std::size_t out_a, std::size_t in_b,
             std::size_t out_b, const ModelConfig& cfg, Rng& rng)
      : fc_a_(out_a, in_a, rng), bn_a_(out_a), fc_b_(out_b, in_b, rng),
        bn_b_(out_b), fc2_(cfg.fc2_size, out_a + out_b, rng),
        drop_(cfg.dropout_rate), out_(cfg.classes, cfg.fc2_size, rng),
        width_a_(out_a), width_b_(out_b) {}

  Tensor<T> forward(const Tensor<T>& feat_a, const Tensor<T>& feat_b,
                    nn::LayerMode mode, Rng& rng, ShapeTrace* trace) {
    Tensor<T> ya = bn_a_.forward(fc_a_.forward(feat_a, mode), mode);
    Tensor<T> yb = bn_b_.forward(fc_b_.forward(feat_b, mode), mode);
    if (trace) {
      trace->emplace_back("fusion.a.fc", ya.dims());
      trace->emplace_back("fusion.b.fc", yb.dims());
    }
    Tensor<T> cat = concat_cols<T>({ya, yb});
    if (trace) trace->emplace_back("fusion.concat", cat.dims());
    Tensor<T> h = drop_.forward(relu_.forward(fc2_.forward(cat, mode), mode), mode, rng);
    if (trace) trace->emplace_back("fusion.fc2", h.dims());
    Tensor<T> logits = out_.forward(h, mode);
    if (trace) trace->emplace_back("fusion.out", logits.dims());
    return logits;
  }

  std::pair<Tensor<T>, Tensor<T>> backward(const Tensor<T>& grad_logits) {
    Tensor<T> g = fc2_.backward(relu_.backward(drop_.backward(out_.backward(grad_logits))));
    std::vector<Tensor<T>> parts = split_cols(g, {width_a_, width_b_});
    return {fc_a_.backward(bn_a_.backward(parts[0])),
            fc_b_.backward(bn_b_.backward(parts[1]))};
  }

  void routing_hash(std::uint64_t& h) const { relu_.routing_hash(h); }

  template <typename Fn>
  void visit(Fn&& fn) {
    fn("fusion.a.fc", fc_a_);
    fn("fusion.a.bn", bn_a_);
    fn("fusion.b.fc", fc_b_);
    fn("fusion.b.bn", bn_b_);
    fn("fusion.fc2", fc2_);
    fn("fusion.out", out_);
  }

 private:
  nn::Dense<T> fc_a_;
  nn::BatchNorm<T> bn_a_;
  nn::Dense<T> fc_b_;
  nn::BatchNorm<T> bn_b_;
  nn::Dense<T> fc2_;
  nn::Relu<T> relu_;
  nn::Dropout<T> drop_;
  nn::Dense<T> out_;
  std::size_t width_a_, width_b_;
};

// One wired architecture with its parameter store. Single-owner mutable
// state during training; a frozen graph may serve Eval forwards from
// multiple threads.
template <typename T>
class ModelGraph {
 public:
  ModelGraph(const ModelConfig& cfg, Rng rng) : cfg_(cfg), dropout_rng_(0) {
    cfg_.validate();
    const ModelVariant v = cfg_.variant;

    if (cfg_.needs_spec()) {
      for (const KernelSize& ks : cfg_.spec_kernels) {
        spec_paths_.emplace_back(cfg_.kernels_per_path, ks, cfg_.spec_h, cfg_.spec_w, rng);
      }
    }
    if (cfg_.needs_ds2()) {
      for (const KernelSize& ks : cfg_.spec_kernels) {
        ds2_paths_.emplace_back(cfg_.kernels_per_path, ks, cfg_.ds2_h(), cfg_.ds2_w(), rng);
      }
    }
    if (cfg_.needs_mfcc()) {
      for (const KernelSize& ks : cfg_.mfcc_kernels) {
        mfcc_paths_.emplace_back(cfg_.kernels_per_path, ks, cfg_.mfcc_h, cfg_.mfcc_w, rng);
      }
    }
    if (cfg_.needs_text()) {
      for (std::size_t h : cfg_.text_kernel_heights) {
        text_paths_.emplace_back(cfg_.text_filters_per_size, h, cfg_.text_words,
                                 cfg_.text_dim, rng);
      }
    }

    const std::size_t spec_width = stack_width(spec_paths_) + stack_width(ds2_paths_);
    const std::size_t mfcc_width = stack_width(mfcc_paths_);
    const std::size_t text_width = stack_width(text_paths_);

    switch (v) {
      case ModelVariant::kM1Text:
        text_head_.emplace(text_width, cfg_, rng);
        break;
      case ModelVariant::kM2ASpec:
      case ModelVariant::kM2BSpecDeep:
        speech_head_.emplace(spec_width, cfg_, rng);
        break;
      case ModelVariant::kM3Mfcc:
        speech_head_.emplace(mfcc_width, cfg_, rng);
        break;
      case ModelVariant::kM4ASpecMfcc:
        fusion_head_.emplace(spec_width, cfg_.fc1_size, mfcc_width, cfg_.fc1_size,
                             cfg_, rng);
        break;
      case ModelVariant::kM4BTextSpec:
        fusion_head_.emplace(text_width, cfg_.text_fc_size, spec_width,
                             cfg_.fc1_size, cfg_, rng);
        break;
      case ModelVariant::kM4CTextMfcc:
        fusion_head_.emplace(text_width, cfg_.text_fc_size, mfcc_width,
                             cfg_.fc1_size, cfg_, rng);
        break;
    }

    dropout_rng_ = Rng(rng.next_u64());
  }

  const ModelConfig& config() const { return cfg_; }

  void set_shape_trace(ShapeTrace* trace) { trace_ = trace; }

  Tensor<T> forward(const Batch<T>& batch, nn::LayerMode mode) {
    switch (cfg_.variant) {
      case ModelVariant::kM1Text:
        return text_head_->forward(run_text(batch, mode), mode, dropout_rng_, trace_);
      case ModelVariant::kM2ASpec:
      case ModelVariant::kM2BSpecDeep:
        return speech_head_->forward(run_spec(batch, mode), mode, dropout_rng_, trace_);
      case ModelVariant::kM3Mfcc:
        return speech_head_->forward(run_mfcc(batch, mode), mode, dropout_rng_, trace_);
      case ModelVariant::kM4ASpecMfcc: {
        Tensor<T> feat_a = run_spec(batch, mode);
        Tensor<T> feat_b = run_mfcc(batch, mode);
        return fusion_head_->forward(feat_a, feat_b, mode, dropout_rng_, trace_);
      }
      case ModelVariant::kM4BTextSpec: {
        Tensor<T> feat_a = run_text(batch, mode);
        Tensor<T> feat_b = run_spec(batch, mode);
        return fusion_head_->forward(feat_a, feat_b, mode, dropout_rng_, trace_);
      }
      case ModelVariant::kM4CTextMfcc: {
        Tensor<T> feat_a = run_text(batch, mode);
        Tensor<T> feat_b = run_mfcc(batch, mode);
        return fusion_head_->forward(feat_a, feat_b, mode, dropout_rng_, trace_);
      }
    }
    throw std::logic_error("unreachable variant");
  }

  void backward(const Tensor<T>& grad_logits) {
    switch (cfg_.variant) {
      case ModelVariant::kM1Text:
        back_text(text_head_->backward(grad_logits));
        return;
      case ModelVariant::kM2ASpec:
      case ModelVariant::kM2BSpecDeep:
        back_spec(speech_head_->backward(grad_logits));
        return;
      case ModelVariant::kM3Mfcc:
        back_mfcc(speech_head_->backward(grad_logits));
        return;
      case ModelVariant::kM4ASpecMfcc: {
        auto [ga, gb] = fusion_head_->backward(grad_logits);
        back_spec(ga);
        back_mfcc(gb);
        return;
      }
      case ModelVariant::kM4BTextSpec: {
        auto [ga, gb] = fusion_head_->backward(grad_logits);
        back_text(ga);
        back_spec(gb);
        return;
      }
      case ModelVariant::kM4CTextMfcc: {
        auto [ga, gb] = fusion_head_->backward(grad_logits);
        back_text(ga);
        back_mfcc(gb);
        return;
      }
    }
  }

  std::vector<std::pair<std::string, nn::Parameter<T>*>> parameters() {
    std::vector<std::pair<std::string, nn::Parameter<T>*>> out;
    visit_paths([&](const std::string& name, nn::Conv2d<T>& conv) {
      out.emplace_back(name + ".kernels", &conv.kernels);
      out.emplace_back(name + ".bias", &conv.bias);
    });
    visit_head([&](const std::string& name, auto& layer) {
      using L = std::decay_t<decltype(layer)>;
      if constexpr (std::is_same_v<L, nn::Dense<T>>) {
        out.emplace_back(name + ".weight", &layer.weight);
        out.emplace_back(name + ".bias", &layer.bias);
      } else {
        out.emplace_back(name + ".gamma", &layer.gamma);
        out.emplace_back(name + ".beta", &layer.beta);
      }
    });
    return out;
  }

  std::vector<nn::Parameter<T>*> parameter_ptrs() {
    std::vector<nn::Parameter<T>*> out;
    for (auto& [name, p] : parameters()) out.push_back(p);
    return out;
  }

  // Everything a checkpoint must restore for Eval: parameter values plus
  // batch-norm running statistics.
  std::vector<std::pair<std::string, Tensor<T>*>> state_blocks() {
    std::vector<std::pair<std::string, Tensor<T>*>> out;
    for (auto& [name, p] : parameters()) out.emplace_back(name, &p->value);
    visit_head([&](const std::string& name, auto& layer) {
      using L = std::decay_t<decltype(layer)>;
      if constexpr (std::is_same_v<L, nn::BatchNorm<T>>) {
        out.emplace_back(name + ".running_mean", &layer.running_mean);
        out.emplace_back(name + ".running_var", &layer.running_var);
      }
    });
    return out;
  }

  std::uint64_t routing_signature() const {
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (const auto& p : spec_paths_) p.routing_hash(h);
    for (const auto& p : ds2_paths_) p.routing_hash(h);
    for (const auto& p : mfcc_paths_) p.routing_hash(h);
    for (const auto& p : text_paths_) p.routing_hash(h);
    if (speech_head_) speech_head_->routing_hash(h);
    if (text_head_) text_head_->routing_hash(h);
    if (fusion_head_) fusion_head_->routing_hash(h);
    return h;
  }

 private:
  template <typename Fn>
  void visit_paths(Fn&& fn) {
    for (std::size_t i = 0; i < spec_paths_.size(); ++i) {
      fn("spec.path" + std::to_string(i), spec_paths_[i].conv());
    }
    for (std::size_t i = 0; i < ds2_paths_.size(); ++i) {
      fn("ds2.path" + std::to_string(i), ds2_paths_[i].conv());
    }
    for (std::size_t i = 0; i < mfcc_paths_.size(); ++i) {
      fn("mfcc.path" + std::to_string(i), mfcc_paths_[i].conv());
    }
    for (std::size_t i = 0; i < text_paths_.size(); ++i) {
      fn("text.path" + std::to_string(i), text_paths_[i].conv());
    }
  }

  template <typename Fn>
  void visit_head(Fn&& fn) {
    if (speech_head_) speech_head_->visit(fn);
    if (text_head_) text_head_->visit(fn);
    if (fusion_head_) fusion_head_->visit(fn);
  }

  static std::size_t stack_width(const std::vector<ConvPoolPath<T>>& paths) {
    std::size_t w = 0;
    for (const auto& p : paths) w += p.out_width();
    return w;
  }
  static std::size_t stack_width(const std::vector<TextConvPath<T>>& paths) {
    std::size_t w = 0;
    for (const auto& p : paths) w += p.out_width();
    return w;
  }

  const Tensor<T>& require(const Tensor<T>& t, const char* what,
                           std::size_t h, std::size_t w) const {
    if (t.empty()) {
      throw std::invalid_argument(std::string("missing input tensor: ") + what +
                                  " (variant " + variant_name(cfg_.variant) + ")");
    }
    if (t.rank() != 4 || t.dim(1) != 1 || t.dim(2) != h || t.dim(3) != w) {
      throw std::invalid_argument(std::string(what) + " input " +
                                  dims_to_string(t.dims()) + " does not match Bx1x" +
                                  std::to_string(h) + "x" + std::to_string(w));
    }
    return t;
  }

  Tensor<T> run_spec(const Batch<T>& batch, nn::LayerMode mode) {
    const Tensor<T>& spec = require(batch.spec, "spectrogram", cfg_.spec_h, cfg_.spec_w);
    std::vector<Tensor<T>> feats;
    for (std::size_t i = 0; i < spec_paths_.size(); ++i) {
      feats.push_back(spec_paths_[i].forward(spec, mode, trace_,
                                             "spec.path" + std::to_string(i)));
    }
    if (!ds2_paths_.empty()) {
      const Tensor<T>& ds2 = require(batch.ds2, "downsampled spectrogram",
                                     cfg_.ds2_h(), cfg_.ds2_w());
      for (std::size_t i = 0; i < ds2_paths_.size(); ++i) {
        feats.push_back(ds2_paths_[i].forward(ds2, mode, trace_,
                                              "ds2.path" + std::to_string(i)));
      }
    }
    Tensor<T> cat = concat_cols(feats);
    if (trace_) trace_->emplace_back("spec.concat", cat.dims());
    return cat;
  }

  Tensor<T> run_mfcc(const Batch<T>& batch, nn::LayerMode mode) {
    const Tensor<T>& mfcc = require(batch.mfcc, "mfcc", cfg_.mfcc_h, cfg_.mfcc_w);
    std::vector<Tensor<T>> feats;
    for (std::size_t i = 0; i < mfcc_paths_.size(); ++i) {
      feats.push_back(mfcc_paths_[i].forward(mfcc, mode, trace_,
                                             "mfcc.path" + std::to_string(i)));
    }
    Tensor<T> cat = concat_cols(feats);
    if (trace_) trace_->emplace_back("mfcc.concat", cat.dims());
    return cat;
  }

  Tensor<T> run_text(const Batch<T>& batch, nn::LayerMode mode) {
    const Tensor<T>& text = require(batch.text, "text", cfg_.text_words, cfg_.text_dim);
    std::vector<Tensor<T>> feats;
    for (std::size_t i = 0; i < text_paths_.size(); ++i) {
      feats.push_back(text_paths_[i].forward(text, mode, trace_,
                                             "text.path" + std::to_string(i)));
    }
    Tensor<T> cat = concat_cols(feats);
    if (trace_) trace_->emplace_back("text.concat", cat.dims());
    return cat;
  }

  void back_spec(const Tensor<T>& grad) {
    std::vector<std::size_t> widths;
    for (const auto& p : spec_paths_) widths.push_back(p.out_width());
    for (const auto& p : ds2_paths_) widths.push_back(p.out_width());
    std::vector<Tensor<T>> parts = split_cols(grad, widths);
    for (std::size_t i = 0; i < spec_paths_.size(); ++i) {
      spec_paths_[i].backward(parts[i]);
    }
    for (std::size_t i = 0; i < ds2_paths_.size(); ++i) {
      ds2_paths_[i].backward(parts[spec_paths_.size() + i]);
    }
  }

  void back_mfcc(const Tensor<T>& grad) {
    std::vector<std::size_t> widths;
    for (const auto& p : mfcc_paths_) widths.push_back(p.out_width());
    std::vector<Tensor<T>> parts = split_cols(grad, widths);
    for (std::size_t i = 0; i < mfcc_paths_.size(); ++i) {
      mfcc_paths_[i].backward(parts[i]);
    }
  }

  void back_text(const Tensor<T>& grad) {
    std::vector<std::size_t> widths;
    for (const auto& p : text_paths_) widths.push_back(p.out_width());
    std::vector<Tensor<T>> parts = split_cols(grad, widths);
    for (std::size_t i = 0; i < text_paths_.size(); ++i) {
      text_paths_[i].backward(parts[i]);
    }
  }

  ModelConfig cfg_;
  Rng dropout_rng_;
  std::vector<ConvPoolPath<T>> spec_paths_;
  std::vector<ConvPoolPath<T>> ds2_paths_;
  std::vector<ConvPoolPath<T>> mfcc_paths_;
  std::vector<TextConvPath<T>> text_paths_;
  std::optional<SpeechHead<T>> speech_head_;
  std::optional<TextHead<T>> text_head_;
  std::optional<FusionHead<T>> fusion_head_;
  ShapeTrace* trace_ = nullptr;
};

template <typename T>
ModelGraph<T> build(const ModelConfig& cfg, Rng rng) {
  return ModelGraph<T>(cfg, std::move(rng));
}

// --- shape and parameter arithmetic ---------------------------------------

namespace detail {

struct PathShape {
  std::size_t conv_h, conv_w, pool_h, pool_w, pooled_h, pooled_w, width;
};

inline PathShape path_shape(std::size_t in_h, std::size_t in_w, KernelSize ks,
                            std::size_t n_kernels) {
  PathShape s{};
  s.conv_h = in_h - ks.h + 1;
  s.conv_w = in_w - ks.w + 1;
  s.pool_h = s.conv_h / 2;
  s.pool_w = s.conv_w / 2;
  s.pooled_h = s.conv_h / s.pool_h;
  s.pooled_w = s.conv_w / s.pool_w;
  s.width = n_kernels * s.pooled_h * s.pooled_w;
  return s;
}

}  // namespace detail

inline std::size_t speech_stack_width(const ModelConfig& cfg, bool ds2) {
  const std::size_t h = ds2 ? cfg.ds2_h() : cfg.spec_h;
  const std::size_t w = ds2 ? cfg.ds2_w() : cfg.spec_w;
  std::size_t total = 0;
  for (const KernelSize& ks : cfg.spec_kernels) {
    total += detail::path_shape(h, w, ks, cfg.kernels_per_path).width;
  }
  return total;
}

inline std::size_t mfcc_stack_width(const ModelConfig& cfg) {
  std::size_t total = 0;
  for (const KernelSize& ks : cfg.mfcc_kernels) {
    total += detail::path_shape(cfg.mfcc_h, cfg.mfcc_w, ks, cfg.kernels_per_path).width;
  }
  return total;
}

inline std::size_t text_stack_width(const ModelConfig& cfg) {
  return cfg.text_kernel_heights.size() * cfg.text_filters_per_size;
}

// Closed-form parameter count per variant; used to validate checkpoints.
inline std::size_t parameter_count(const ModelConfig& cfg) {
  cfg.validate();
  auto dense = [](std::size_t out, std::size_t in) { return out * in + out; };
  auto bn = [](std::size_t n) { return 2 * n; };

  std::size_t total = 0;
  if (cfg.needs_spec()) {
    for (const KernelSize& ks : cfg.spec_kernels) {
      total += cfg.kernels_per_path * (ks.h * ks.w + 1);
    }
  }
  if (cfg.needs_ds2()) {
    for (const KernelSize& ks : cfg.spec_kernels) {
      total += cfg.kernels_per_path * (ks.h * ks.w + 1);
    }
  }
  if (cfg.needs_mfcc()) {
    for (const KernelSize& ks : cfg.mfcc_kernels) {
      total += cfg.kernels_per_path * (ks.h * ks.w + 1);
    }
  }
  if (cfg.needs_text()) {
    for (std::size_t h : cfg.text_kernel_heights) {
      total += cfg.text_filters_per_size * (h * cfg.text_dim + 1);
    }
  }

  const std::size_t spec_w = cfg.needs_spec()
                                 ? speech_stack_width(cfg, false) +
                                       (cfg.needs_ds2() ? speech_stack_width(cfg, true) : 0)
                                 : 0;
  const std::size_t mfcc_w = cfg.needs_mfcc() ? mfcc_stack_width(cfg) : 0;
  const std::size_t text_w = cfg.needs_text() ? text_stack_width(cfg) : 0;

  switch (cfg.variant) {
    case ModelVariant::kM1Text:
      total += dense(cfg.text_fc_size, text_w) + bn(cfg.text_fc_size) +
               dense(cfg.classes, cfg.text_fc_size);
      break;
    case ModelVariant::kM2ASpec:
    case ModelVariant::kM2BSpecDeep:
      total += dense(cfg.fc1_size, spec_w) + bn(cfg.fc1_size) +
               dense(cfg.fc2_size, cfg.fc1_size) + bn(cfg.fc2_size) +
               dense(cfg.classes, cfg.fc2_size);
      break;
    case ModelVariant::kM3Mfcc:
      total += dense(cfg.fc1_size, mfcc_w) + bn(cfg.fc1_size) +
               dense(cfg.fc2_size, cfg.fc1_size) + bn(cfg.fc2_size) +
               dense(cfg.classes, cfg.fc2_size);
      break;
    case ModelVariant::kM4ASpecMfcc:
      total += dense(cfg.fc1_size, spec_w) + bn(cfg.fc1_size) +
               dense(cfg.fc1_size, mfcc_w) + bn(cfg.fc1_size) +
               dense(cfg.fc2_size, 2 * cfg.fc1_size) + dense(cfg.classes, cfg.fc2_size);
      break;
    case ModelVariant::kM4BTextSpec:
      total += dense(cfg.text_fc_size, text_w) + bn(cfg.text_fc_size) +
               dense(cfg.fc1_size, spec_w) + bn(cfg.fc1_size) +
               dense(cfg.fc2_size, cfg.text_fc_size + cfg.fc1_size) +
               dense(cfg.classes, cfg.fc2_size);
      break;
    case ModelVariant::kM4CTextMfcc:
      total += dense(cfg.text_fc_size, text_w) + bn(cfg.text_fc_size) +
               dense(cfg.fc1_size, mfcc_w) + bn(cfg.fc1_size) +
               dense(cfg.fc2_size, cfg.text_fc_size + cfg.fc1_size) +
               dense(cfg.classes, cfg.fc2_size);
      break;
  }
  return total;
}

// Pure arithmetic twin of the forward pass, compared against recorded
// shapes in tests.
inline ShapeTrace shape_plan(const ModelConfig& cfg, std::size_t batch) {
  cfg.validate();
  ShapeTrace plan;
  auto add_speech = [&](const char* prefix, std::size_t h, std::size_t w,
                        const std::vector<KernelSize>& kernels) {
    for (std::size_t i = 0; i < kernels.size(); ++i) {
      const auto s = detail::path_shape(h, w, kernels[i], cfg.kernels_per_path);
      const std::string name = std::string(prefix) + ".path" + std::to_string(i);
      plan.emplace_back(name + ".conv",
                        std::vector<std::size_t>{batch, cfg.kernels_per_path, s.conv_h, s.conv_w});
      plan.emplace_back(name + ".pool",
                        std::vector<std::size_t>{batch, cfg.kernels_per_path, s.pooled_h, s.pooled_w});
    }
  };
  auto add_text = [&] {
    for (std::size_t i = 0; i < cfg.text_kernel_heights.size(); ++i) {
      const std::string name = "text.path" + std::to_string(i);
      plan.emplace_back(name + ".conv",
                        std::vector<std::size_t>{batch, cfg.text_filters_per_size,
                                                 cfg.text_words - cfg.text_kernel_heights[i] + 1, 1});
      plan.emplace_back(name + ".pool",
                        std::vector<std::size_t>{batch, cfg.text_filters_per_size});
    }
    plan.emplace_back("text.concat", std::vector<std::size_t>{batch, text_stack_width(cfg)});
  };

  const std::size_t spec_total =
      cfg.needs_spec() ? speech_stack_width(cfg, false) +
                             (cfg.needs_ds2() ? speech_stack_width(cfg, true) : 0)
                       : 0;

  auto add_spec_stack = [&] {
    add_speech("spec", cfg.spec_h, cfg.spec_w, cfg.spec_kernels);
    if (cfg.needs_ds2()) add_speech("ds2", cfg.ds2_h(), cfg.ds2_w(), cfg.spec_kernels);
    plan.emplace_back("spec.concat", std::vector<std::size_t>{batch, spec_total});
  };
  auto add_mfcc_stack = [&] {
    add_speech("mfcc", cfg.mfcc_h, cfg.mfcc_w, cfg.mfcc_kernels);
    plan.emplace_back("mfcc.concat", std::vector<std::size_t>{batch, mfcc_stack_width(cfg)});
  };
  auto add_speech_head = [&] {
    plan.emplace_back("head.fc1", std::vector<std::size_t>{batch, cfg.fc1_size});
    plan.emplace_back("head.fc2", std::vector<std::size_t>{batch, cfg.fc2_size});
    plan.emplace_back("head.out", std::vector<std::size_t>{batch, cfg.classes});
  };
  auto add_fusion = [&](std::size_t out_a, std::size_t out_b) {
    plan.emplace_back("fusion.a.fc", std::vector<std::size_t>{batch, out_a});
    plan.emplace_back("fusion.b.fc", std::vector<std::size_t>{batch, out_b});
    plan.emplace_back("fusion.concat", std::vector<std::size_t>{batch, out_a + out_b});
    plan.emplace_back("fusion.fc2", std::vector<std::size_t>{batch, cfg.fc2_size});
    plan.emplace_back("fusion.out", std::vector<std::size_t>{batch, cfg.classes});
  };

  switch (cfg.variant) {
    case ModelVariant::kM1Text:
      add_text();
      plan.emplace_back("head.fc", std::vector<std::size_t>{batch, cfg.text_fc_size});
      plan.emplace_back("head.out", std::vector<std::size_t>{batch, cfg.classes});
      break;
    case ModelVariant::kM2ASpec:
    case ModelVariant::kM2BSpecDeep:
      add_spec_stack();
      add_speech_head();
      break;
    case ModelVariant::kM3Mfcc:
      add_mfcc_stack();
      add_speech_head();
      break;
    case ModelVariant::kM4ASpecMfcc:
      add_spec_stack();
      add_mfcc_stack();
      add_fusion(cfg.fc1_size, cfg.fc1_size);
      break;
    case ModelVariant::kM4BTextSpec:
      add_text();
      add_spec_stack();
      add_fusion(cfg.text_fc_size, cfg.fc1_size);
      break;
    case ModelVariant::kM4CTextMfcc:
      add_text();
      add_mfcc_stack();
      add_fusion(cfg.text_fc_size, cfg.fc1_size);
      break;
  }
  return plan;
}

// --- checkpoints -----------------------------------------------------------
// magic "SERM", version byte, variant byte, u32 block count; per block a
// u32 name length, the name, u8 rank, u32 dims, then f32 payload. Adadelta
// accumulators are appended with the same framing when requested.

inline constexpr char kCheckpointMagic[4] = {'S', 'E', 'R', 'M'};
inline constexpr std::uint8_t kCheckpointVersion = 1;

namespace detail {

template <typename T>
void write_block(std::ostream& os, const std::string& name, const Tensor<T>& t) {
  io::write_u32(os, static_cast<std::uint32_t>(name.size()));
  os.write(name.data(), static_cast<std::streamsize>(name.size()));
  io::write_u8(os, static_cast<std::uint8_t>(t.rank()));
  for (std::size_t d : t.dims()) io::write_u32(os, static_cast<std::uint32_t>(d));
  for (std::size_t i = 0; i < t.size(); ++i) {
    io::write_f32(os, static_cast<float>(t[i]));
  }
}

}  // namespace detail

template <typename T>
void save_checkpoint(ModelGraph<T>& graph, const std::string& path,
                     bool with_optimizer_state = false) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot write checkpoint: " + path);

  std::vector<std::pair<std::string, Tensor<T>*>> blocks = graph.state_blocks();
  if (with_optimizer_state) {
    for (auto& [name, p] : graph.parameters()) {
      blocks.emplace_back("opt.grad_sq." + name, &p->accum_grad_sq);
      blocks.emplace_back("opt.delta_sq." + name, &p->accum_delta_sq);
    }
  }

  f.write(kCheckpointMagic, 4);
  io::write_u8(f, kCheckpointVersion);
  io::write_u8(f, static_cast<std::uint8_t>(graph.config().variant));
  io::write_u32(f, static_cast<std::uint32_t>(blocks.size()));
  for (auto& [name, tensor] : blocks) detail::write_block(f, name, *tensor);
  if (!f) throw DataError("failed writing checkpoint: " + path);
}

inline ModelVariant peek_checkpoint_variant(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot open checkpoint: " + path);
  char magic[4];
  f.read(magic, 4);
  if (f.gcount() != 4 || std::string(magic, 4) != std::string(kCheckpointMagic, 4)) {
    throw DataError("not a SERM checkpoint: " + path);
  }
  if (io::read_u8(f, "version") != kCheckpointVersion) {
    throw DataError("unsupported checkpoint version: " + path);
  }
  const std::uint8_t v = io::read_u8(f, "variant");
  if (v < 1 || v > 7) throw DataError("checkpoint has invalid variant id: " + path);
  return static_cast<ModelVariant>(v);
}

template <typename T>
void load_checkpoint(ModelGraph<T>& graph, const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot open checkpoint: " + path);
  char magic[4];
  f.read(magic, 4);
  if (f.gcount() != 4 || std::string(magic, 4) != std::string(kCheckpointMagic, 4)) {
    throw DataError("not a SERM checkpoint: " + path);
  }
  if (io::read_u8(f, "version") != kCheckpointVersion) {
    throw DataError("unsupported checkpoint version: " + path);
  }
  const std::uint8_t variant = io::read_u8(f, "variant");
  if (variant != static_cast<std::uint8_t>(graph.config().variant)) {
    throw DataError("checkpoint variant " +
                    std::string(variant_name(static_cast<ModelVariant>(variant))) +
                    " does not match graph variant " +
                    variant_name(graph.config().variant));
  }

  std::map<std::string, Tensor<T>*> expected;
  for (auto& [name, tensor] : graph.state_blocks()) expected[name] = tensor;
  for (auto& [name, p] : graph.parameters()) {
    expected["opt.grad_sq." + name] = &p->accum_grad_sq;
    expected["opt.delta_sq." + name] = &p->accum_delta_sq;
  }

  std::map<std::string, bool> filled;
  const std::uint32_t n_blocks = io::read_u32(f, "block count");
  for (std::uint32_t i = 0; i < n_blocks; ++i) {
    const std::uint32_t name_len = io::read_u32(f, "block name length");
    std::string name(name_len, '\0');
    f.read(name.data(), name_len);
    if (static_cast<std::uint32_t>(f.gcount()) != name_len) {
      throw DataError("truncated checkpoint block name: " + path);
    }
    const std::uint8_t rank = io::read_u8(f, "block rank");
    std::vector<std::size_t> dims(rank);
    for (std::size_t d = 0; d < rank; ++d) dims[d] = io::read_u32(f, "block dims");

    auto it = expected.find(name);
    if (it == expected.end()) {
      throw DataError("checkpoint block '" + name + "' not part of variant " +
                      variant_name(graph.config().variant));
    }
    if (it->second->dims() != dims) {
      throw DataError("checkpoint block '" + name + "' has shape " +
                      dims_to_string(dims) + ", expected " +
                      dims_to_string(it->second->dims()) +
                      " (model config mismatch?)");
    }
    for (std::size_t j = 0; j < it->second->size(); ++j) {
      (*it->second)[j] = static_cast<T>(io::read_f32(f, "block payload"));
    }
    filled[name] = true;
  }

  for (auto& [name, tensor] : graph.state_blocks()) {
    if (!filled.count(name)) {
      throw DataError("checkpoint is missing block '" + name + "': " + path);
    }
  }
}

}  // namespace serforge::models
