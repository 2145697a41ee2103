#pragma once
// Four interchangeable attention kernels behind one multi-head wrapper:
//   self        softmax(Q K^T / sqrt(d_k)) V
//   linear      softmax(Q (E^T K)^T / sqrt(d_k)) (F^T V), E/F length-axis
//               projections onto k rows
//   synthesizer softmax(W2 relu(W1 x_i + b) + b) G(X), alignment synthesized
//               from each token alone
//   norm        softmax(g QhatKhat^T) V over l2-normalized rows, learnable g
//
// Masking is an additive large-negative fill before the softmax; for the
// linear variant a causal query row instead re-evaluates the kernel on its
// visible prefix, because the length projection mixes positions and cannot be
// masked after the fact.

#include <atomic>
#include <cmath>
#include <cstdint>
#include <iostream>
#include <memory>
#include <vector>

#include "deeppseudo/config.hpp"
#include "deeppseudo/module.hpp"
#include "deeppseudo/ops.hpp"
#include "deeppseudo/tensor.hpp"

namespace deeppseudo {

using MaskPtr = std::shared_ptr<const std::vector<std::uint8_t>>;  // 1 = visible

inline MaskPtr causal_mask(std::int64_t n) {
  auto m = std::make_shared<std::vector<std::uint8_t>>(static_cast<std::size_t>(n * n), 0);
  for (std::int64_t i = 0; i < n; ++i)
    for (std::int64_t j = 0; j <= i; ++j) (*m)[static_cast<std::size_t>(i * n + j)] = 1;
  return m;
}

template <typename S>
inline constexpr S kMaskFill = S(-1e9);

template <typename S>
struct AttentionResult {
  Tensor<S> context;
  Tensor<S> weights;  // rows sum to 1
};

// g0 = log2(L^2 - L) with L the 97.5th-percentile (nearest-rank) sequence
// length over the combined source and target training data.
inline double init_norm_gain(std::vector<std::int64_t> lengths) {
  if (lengths.empty()) throw DataError("init_norm_gain: empty length list");
  std::sort(lengths.begin(), lengths.end());
  const auto n = static_cast<double>(lengths.size());
  auto rank = static_cast<std::int64_t>(std::ceil(0.975 * n)) - 1;
  rank = std::max<std::int64_t>(0, std::min<std::int64_t>(rank, static_cast<std::int64_t>(lengths.size()) - 1));
  const double big_l = static_cast<double>(lengths[static_cast<std::size_t>(rank)]);
  if (big_l < 2.0) throw DataError("init_norm_gain: L must be >= 2, got " + std::to_string(big_l));
  return std::log2(big_l * big_l - big_l);
}

template <typename S>
AttentionResult<S> self_attention(Tensor<S> q, Tensor<S> k, Tensor<S> v, MaskPtr mask = nullptr) {
  if (q.cols() != k.cols()) {
    throw ShapeError("self_attention: query " + shape_str(q.shape()) + " and key " +
                     shape_str(k.shape()) + " head dims differ");
  }
  if (k.rows() != v.rows()) {
    throw ShapeError("self_attention: key " + shape_str(k.shape()) + " and value " +
                     shape_str(v.shape()) + " lengths differ");
  }
  const S inv = S(1) / std::sqrt(static_cast<S>(q.cols()));
  Tensor<S> scores = scale(matmul_nt(q, k), inv);
  if (mask) scores = masked_fill(scores, mask, kMaskFill<S>);
  AttentionResult<S> r;
  r.weights = softmax(scores, 1);
  r.context = matmul(r.weights, v);
  return r;
}

// e and f are [len_k x k]; read as E^T K and F^T V (length-axis projection).
template <typename S>
AttentionResult<S> linear_attention(Tensor<S> q, Tensor<S> k, Tensor<S> v, Tensor<S> e,
                                    Tensor<S> f) {
  if (e.rows() != k.rows() || f.rows() != v.rows()) {
    throw ShapeError("linear_attention: projections " + shape_str(e.shape()) + "/" +
                     shape_str(f.shape()) + " must have one row per key, got keys " +
                     shape_str(k.shape()));
  }
  if (e.cols() > k.rows()) {
    static std::atomic_flag warned = ATOMIC_FLAG_INIT;
    if (!warned.test_and_set()) {
      std::cerr << "warning: linear attention projection k=" << e.cols()
                << " exceeds key length " << k.rows() << "; no complexity savings\n";
    }
  }
  const S inv = S(1) / std::sqrt(static_cast<S>(q.cols()));
  Tensor<S> projected_keys = matmul_tn(e, k);  // [k x d]
  AttentionResult<S> r;
  r.weights = softmax(scale(matmul_nt(q, projected_keys), inv), 1);
  r.context = matmul(r.weights, matmul_tn(f, v));
  return r;
}

// Causal variant: query row t applies the formula to its visible prefix,
// using the first t+1 rows of e/f/k/v.
template <typename S>
AttentionResult<S> linear_attention_causal(Tensor<S> q, Tensor<S> k, Tensor<S> v, Tensor<S> e,
                                           Tensor<S> f) {
  if (q.rows() != k.rows()) {
    throw ShapeError("linear_attention_causal: query/key lengths differ: " +
                     shape_str(q.shape()) + " vs " + shape_str(k.shape()));
  }
  const auto len = q.rows();
  std::vector<Tensor<S>> ctx_rows, weight_rows;
  for (std::int64_t t = 0; t < len; ++t) {
    auto q_t = slice_rows(q, t, 1);
    auto k_t = slice_rows(k, 0, t + 1);
    auto v_t = slice_rows(v, 0, t + 1);
    auto e_t = slice_rows(e, 0, t + 1);
    auto f_t = slice_rows(f, 0, t + 1);
    auto r = linear_attention(q_t, k_t, v_t, e_t, f_t);
    ctx_rows.push_back(r.context);
    weight_rows.push_back(r.weights);
  }
  AttentionResult<S> r;
  r.context = concat_rows(ctx_rows);
  r.weights = concat_rows(weight_rows);
  return r;
}

// Core synthesizer: alignment scores from the query tokens alone, applied to
// pre-projected values. score_hidden is [l x d_q], score_out [l x l],
// score_bias [l] (used after both maps, as printed).
template <typename S>
AttentionResult<S> synthesizer_attention_with_values(Tensor<S> x_queries, Tensor<S> score_hidden,
                                                     Tensor<S> score_out, Tensor<S> score_bias,
                                                     Tensor<S> values, MaskPtr mask = nullptr) {
  const auto max_l = score_hidden.rows();
  const auto len_q = x_queries.rows();
  const auto len_k = values.rows();
  if (len_q > max_l || len_k > max_l) {
    throw ShapeError("synthesizer_attention: sequence length " +
                     std::to_string(std::max(len_q, len_k)) + " exceeds configured max " +
                     std::to_string(max_l));
  }
  Tensor<S> hidden = relu(add_rowvec(matmul_nt(x_queries, score_hidden), score_bias));
  Tensor<S> scores_full = add_rowvec(matmul_nt(hidden, score_out), score_bias);
  Tensor<S> scores = len_k == scores_full.cols() ? scores_full : slice_cols(scores_full, 0, len_k);
  if (mask) scores = masked_fill(scores, mask, kMaskFill<S>);
  AttentionResult<S> r;
  r.weights = softmax(scores, 1);
  r.context = matmul(r.weights, values);
  return r;
}

// Self form: values are G(X) with G a learned [d x d_v] map.
template <typename S>
AttentionResult<S> synthesizer_attention(Tensor<S> x, Tensor<S> score_hidden, Tensor<S> score_out,
                                         Tensor<S> score_bias, Tensor<S> value_map,
                                         MaskPtr mask = nullptr) {
  return synthesizer_attention_with_values(x, score_hidden, score_out, score_bias,
                                           matmul(x, value_map), mask);
}

// gain is a learnable scalar tensor; rows are normalized with an eps guard so
// zero rows pass through instead of failing.
template <typename S>
AttentionResult<S> norm_attention(Tensor<S> q, Tensor<S> k, Tensor<S> v, Tensor<S> gain,
                                  MaskPtr mask = nullptr) {
  if (q.cols() != k.cols()) {
    throw ShapeError("norm_attention: query " + shape_str(q.shape()) + " and key " +
                     shape_str(k.shape()) + " head dims differ");
  }
  Tensor<S> scores = mul(matmul_nt(l2_normalize_rows(q), l2_normalize_rows(k)), gain);
  if (mask) scores = masked_fill(scores, mask, kMaskFill<S>);
  AttentionResult<S> r;
  r.weights = softmax(scores, 1);
  r.context = matmul(r.weights, v);
  return r;
}

template <typename S>
struct AttentionOutput {
  Tensor<S> context;                    // len_q x d_model
  std::vector<Tensor<S>> head_weights;  // detached copies, one per head
};

template <typename S>
class MultiHeadAttention {
 public:
  MultiHeadAttention() = default;

  // max_key_len bounds the length-projection rows (linear) and the
  // synthesized score width (synthesizer).
  MultiHeadAttention(const ModelConfig& cfg, bool is_cross, std::int64_t max_key_len,
                     ModuleCtx<S> ctx)
      : variant_(is_cross && cfg.cross_attention == CrossAttentionMode::kSelf
                     ? AttentionVariant::kSelf
                     : cfg.attention),
        n_heads_(cfg.n_heads),
        head_dim_(cfg.head_dim()),
        d_model_(cfg.d_model),
        max_key_len_(max_key_len) {
    const auto d = static_cast<std::int64_t>(cfg.d_model);
    value_ = Linear<S>(ctx.child("value"), d, d);
    out_ = Linear<S>(ctx.child("out"), d, d);
    if (variant_ != AttentionVariant::kSynthesizer) {
      query_ = Linear<S>(ctx.child("query"), d, d);
      key_ = Linear<S>(ctx.child("key"), d, d);
    }
    if (variant_ == AttentionVariant::kLinear) {
      auto pctx = ctx.child("proj");
      key_proj_ = pctx.xavier("keys", max_key_len_, cfg.linear_k);
      value_proj_ = pctx.xavier("values", max_key_len_, cfg.linear_k);
    }
    if (variant_ == AttentionVariant::kSynthesizer) {
      for (int h = 0; h < n_heads_; ++h) {
        auto sctx = ctx.child("synth" + std::to_string(h));
        score_hidden_.push_back(sctx.xavier("hidden", max_key_len_, head_dim_));
        score_out_.push_back(sctx.xavier("score", max_key_len_, max_key_len_));
        score_bias_.push_back(sctx.constant("bias", {max_key_len_}, 0.0));
      }
    }
    if (variant_ == AttentionVariant::kNorm) {
      const double g0 = cfg.norm_gain_init > 0.0
                            ? cfg.norm_gain_init
                            : init_norm_gain({max_key_len_});
      for (int h = 0; h < n_heads_; ++h) {
        gains_.push_back(ctx.constant("gain" + std::to_string(h), {1}, g0));
      }
    }
  }

  AttentionVariant variant() const { return variant_; }

  AttentionOutput<S> forward(Tensor<S> q_in, Tensor<S> kv_in, bool causal) const {
    if (q_in.cols() != d_model_ || kv_in.cols() != d_model_) {
      throw ShapeError("multi_head: inputs " + shape_str(q_in.shape()) + "/" +
                       shape_str(kv_in.shape()) + " must have width " +
                       std::to_string(d_model_));
    }
    const auto len_q = q_in.rows();
    const auto len_k = kv_in.rows();
    MaskPtr mask = causal ? causal_mask(len_q) : nullptr;

    std::vector<Tensor<S>> contexts;
    AttentionOutput<S> out;
    switch (variant_) {
      case AttentionVariant::kSelf:
      case AttentionVariant::kNorm: {
        Tensor<S> q = query_.forward(q_in);
        Tensor<S> k = key_.forward(kv_in);
        Tensor<S> v = value_.forward(kv_in);
        for (int h = 0; h < n_heads_; ++h) {
          const auto off = static_cast<std::int64_t>(h) * head_dim_;
          auto q_h = slice_cols(q, off, head_dim_);
          auto k_h = slice_cols(k, off, head_dim_);
          auto v_h = slice_cols(v, off, head_dim_);
          auto r = variant_ == AttentionVariant::kSelf
                       ? self_attention(q_h, k_h, v_h, mask)
                       : norm_attention(q_h, k_h, v_h, gains_[static_cast<std::size_t>(h)], mask);
          contexts.push_back(r.context);
          out.head_weights.push_back(r.weights.detach());
        }
        break;
      }
      case AttentionVariant::kLinear: {
        if (len_k > max_key_len_) {
          throw ShapeError("multi_head: key length " + std::to_string(len_k) +
                           " exceeds projection rows " + std::to_string(max_key_len_));
        }
        Tensor<S> q = query_.forward(q_in);
        Tensor<S> k = key_.forward(kv_in);
        Tensor<S> v = value_.forward(kv_in);
        auto e = slice_rows(key_proj_, 0, len_k);
        auto f = slice_rows(value_proj_, 0, len_k);
        for (int h = 0; h < n_heads_; ++h) {
          const auto off = static_cast<std::int64_t>(h) * head_dim_;
          auto q_h = slice_cols(q, off, head_dim_);
          auto k_h = slice_cols(k, off, head_dim_);
          auto v_h = slice_cols(v, off, head_dim_);
          auto r = causal ? linear_attention_causal(q_h, k_h, v_h, e, f)
                          : linear_attention(q_h, k_h, v_h, e, f);
          contexts.push_back(r.context);
          out.head_weights.push_back(r.weights.detach());
        }
        break;
      }
      case AttentionVariant::kSynthesizer: {
        Tensor<S> values = value_.forward(kv_in);  // G(X)
        for (int h = 0; h < n_heads_; ++h) {
          const auto off = static_cast<std::int64_t>(h) * head_dim_;
          auto xq_h = slice_cols(q_in, off, head_dim_);
          auto v_h = slice_cols(values, off, head_dim_);
          auto r = synthesizer_attention_with_values(
              xq_h, score_hidden_[static_cast<std::size_t>(h)],
              score_out_[static_cast<std::size_t>(h)],
              score_bias_[static_cast<std::size_t>(h)], v_h, mask);
          contexts.push_back(r.context);
          out.head_weights.push_back(r.weights.detach());
        }
        break;
      }
    }
    out.context = out_.forward(concat_cols(contexts));
    return out;
  }

 private:
  AttentionVariant variant_ = AttentionVariant::kSelf;
  int n_heads_ = 1;
  std::int64_t head_dim_ = 0;
  std::int64_t d_model_ = 0;
  std::int64_t max_key_len_ = 0;
  Linear<S> query_, key_, value_, out_;
  Tensor<S> key_proj_, value_proj_;          // linear variant, shared across heads
  std::vector<Tensor<S>> score_hidden_;      // synthesizer, per head
  std::vector<Tensor<S>> score_out_;
  std::vector<Tensor<S>> score_bias_;
  std::vector<Tensor<S>> gains_;             // norm variant, per head
};

}  // namespace deeppseudo
