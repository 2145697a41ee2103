#pragma once
// Positional encodings, the Transformer encoder stack, and the convolutional
// code feature extractor whose output is fused with the encoder context.

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "deeppseudo/attention.hpp"
#include "deeppseudo/config.hpp"
#include "deeppseudo/module.hpp"
#include "deeppseudo/ops.hpp"

namespace deeppseudo {

// Forward-pass mode: training enables dropout, which draws from *rng.
struct RunMode {
  bool training = false;
  Rng* rng = nullptr;
};

template <typename S>
Tensor<S> apply_dropout(Tensor<S> x, double p, const RunMode& mode) {
  if (!mode.training || p == 0.0) return x;
  return dropout(x, p, true, *mode.rng);
}

// Per-head attention weights collected during a forward pass, for export.
template <typename S>
struct AttentionTrace {
  std::vector<std::vector<Tensor<S>>> encoder_self;  // [layer][head]
  std::vector<std::vector<Tensor<S>>> decoder_self;
  std::vector<std::vector<Tensor<S>>> decoder_cross;
};

template <typename S>
class PositionalEncoder {
 public:
  PositionalEncoder() = default;

  PositionalEncoder(PosEncodingKind kind, std::int64_t max_len, std::int64_t d_model,
                    ModuleCtx<S> ctx)
      : kind_(kind), max_len_(max_len) {
    if (kind == PosEncodingKind::kLearned) {
      table_ = ctx.normal("table", {max_len, d_model}, 1.0 / std::sqrt(static_cast<double>(d_model)));
    } else {
      table_ = Tensor<S>::zeros({max_len, d_model});
      for (std::int64_t pos = 0; pos < max_len; ++pos) {
        for (std::int64_t i = 0; 2 * i < d_model; ++i) {
          const double angle =
              static_cast<double>(pos) /
              std::pow(10000.0, 2.0 * static_cast<double>(i) / static_cast<double>(d_model));
          table_.at(pos, 2 * i) = static_cast<S>(std::sin(angle));
          if (2 * i + 1 < d_model) table_.at(pos, 2 * i + 1) = static_cast<S>(std::cos(angle));
        }
      }
    }
  }

  // x + table rows 0..len-1.
  Tensor<S> add_positions(Tensor<S> x) const {
    if (x.rows() > max_len_) {
      throw ShapeError("positional_encode: length " + std::to_string(x.rows()) +
                       " exceeds max_len " + std::to_string(max_len_));
    }
    return add(x, slice_rows(table_, 0, x.rows()));
  }

  PosEncodingKind kind() const { return kind_; }
  const Tensor<S>& table() const { return table_; }

 private:
  PosEncodingKind kind_ = PosEncodingKind::kSinusoidal;
  std::int64_t max_len_ = 0;
  Tensor<S> table_;
};

// One post-norm block: attention, residual, layer norm, two-linear
// feed-forward with ReLU between, residual, layer norm.
template <typename S>
struct EncoderLayer {
  MultiHeadAttention<S> attn;
  Linear<S> ff_inner, ff_out;
  LayerNormModule<S> ln_attn, ln_ff;

  EncoderLayer() = default;
  EncoderLayer(const ModelConfig& cfg, ModuleCtx<S> ctx)
      : attn(cfg, /*is_cross=*/false, cfg.max_len_src, ctx.child("attn")),
        ff_inner(ctx.child("ff_inner"), cfg.d_model, cfg.ff_dim()),
        ff_out(ctx.child("ff_out"), cfg.ff_dim(), cfg.d_model),
        ln_attn(ctx.child("ln_attn"), cfg.d_model),
        ln_ff(ctx.child("ln_ff"), cfg.d_model) {}

  Tensor<S> forward(Tensor<S> x, double drop, const RunMode& mode,
                    std::vector<Tensor<S>>* weights_out) const {
    auto att = attn.forward(x, x, /*causal=*/false);
    if (weights_out) *weights_out = att.head_weights;
    auto x1 = ln_attn.forward(add(x, apply_dropout(att.context, drop, mode)));
    auto h = ff_out.forward(relu(ff_inner.forward(x1)));
    return ln_ff.forward(add(x1, apply_dropout(h, drop, mode)));
  }
};

template <typename S>
class EncoderStack {
 public:
  EncoderStack() = default;

  EncoderStack(const ModelConfig& cfg, ModuleCtx<S> ctx) : cfg_(cfg) {
    embed_ = ctx.child("embed").normal("table", {cfg.src_vocab, cfg.d_model},
                                       std::pow(static_cast<double>(cfg.d_model), -0.5));
    pos_ = PositionalEncoder<S>(cfg.pe, cfg.max_len_src, cfg.d_model, ctx.child("pos"));
    for (int l = 0; l < cfg.n_layers; ++l) {
      layers_.emplace_back(cfg, ctx.child("layer" + std::to_string(l)));
    }
  }

  // Shared input of the encoder stack and the feature extractor: scaled
  // embedding plus positional encoding.
  Tensor<S> embed_with_positions(const std::vector<int>& ids, const RunMode& mode) const {
    auto e = embedding_lookup(embed_, ids);
    e = scale(e, static_cast<S>(std::sqrt(static_cast<double>(cfg_.d_model))));
    e = pos_.add_positions(e);
    return apply_dropout(e, cfg_.dropout, mode);
  }

  Tensor<S> encode_from(Tensor<S> x, const RunMode& mode,
                        AttentionTrace<S>* trace = nullptr) const {
    if (trace) trace->encoder_self.assign(layers_.size(), {});
    for (std::size_t l = 0; l < layers_.size(); ++l) {
      x = layers_[l].forward(x, cfg_.dropout, mode,
                             trace ? &trace->encoder_self[l] : nullptr);
    }
    return x;
  }

  Tensor<S> encode(const std::vector<int>& ids, const RunMode& mode,
                   AttentionTrace<S>* trace = nullptr) const {
    return encode_from(embed_with_positions(ids, mode), mode, trace);
  }

  const PositionalEncoder<S>& positional() const { return pos_; }

 private:
  ModelConfig cfg_;
  Tensor<S> embed_;
  PositionalEncoder<S> pos_;
  std::vector<EncoderLayer<S>> layers_;
};

// Stacked conv blocks over the shared embedding: each is conv1d to doubled
// channels, a GLU gate, and a scaled residual; a final linear maps back to
// d_model.
template <typename S>
class CodeFeatureExtractor {
 public:
  CodeFeatureExtractor() = default;

  CodeFeatureExtractor(const ModelConfig& cfg, ModuleCtx<S> ctx)
      : residual_scale_(static_cast<S>(cfg.residual_scale)),
        dropout_(cfg.dropout),
        padding_((cfg.kernel_size - 1) / 2) {
    const auto d = static_cast<std::int64_t>(cfg.d_model);
    for (int b = 0; b < cfg.effective_cfer_blocks(); ++b) {
      auto bctx = ctx.child("block" + std::to_string(b));
      kernels_.push_back(bctx.xavier_conv("kernels", cfg.kernel_size, d, 2 * d));
      biases_.push_back(bctx.constant("bias", {2 * d}, 0.0));
    }
    out_proj_ = Linear<S>(ctx.child("out"), d, d);
  }

  Tensor<S> forward(Tensor<S> x, const RunMode& mode) const {
    for (std::size_t b = 0; b < kernels_.size(); ++b) {
      auto gated = glu(conv1d(x, kernels_[b], biases_[b], padding_));
      x = scale(add(x, gated), residual_scale_);
      x = apply_dropout(x, dropout_, mode);
    }
    return out_proj_.forward(x);
  }

 private:
  S residual_scale_ = S(1);
  double dropout_ = 0.0;
  std::int64_t padding_ = 0;
  std::vector<Tensor<S>> kernels_;
  std::vector<Tensor<S>> biases_;
  Linear<S> out_proj_;
};

}  // namespace deeppseudo
