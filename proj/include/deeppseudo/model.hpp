#pragma once
// Autoregressive decoder over the fused source representation, the full
// encoder/extractor/decoder model, and beam-search generation.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "deeppseudo/attention.hpp"
#include "deeppseudo/config.hpp"
#include "deeppseudo/corpus.hpp"
#include "deeppseudo/layers.hpp"
#include "deeppseudo/module.hpp"
#include "deeppseudo/vocab.hpp"

namespace deeppseudo {

template <typename S>
struct DecoderLayer {
  MultiHeadAttention<S> self_attn, cross_attn;
  Linear<S> ff_inner, ff_out;
  LayerNormModule<S> ln_self, ln_cross, ln_ff;

  DecoderLayer() = default;
  DecoderLayer(const ModelConfig& cfg, ModuleCtx<S> ctx)
      : self_attn(cfg, /*is_cross=*/false, cfg.max_len_tgt, ctx.child("self_attn")),
        cross_attn(cfg, /*is_cross=*/true, cfg.max_len_src, ctx.child("cross_attn")),
        ff_inner(ctx.child("ff_inner"), cfg.d_model, cfg.ff_dim()),
        ff_out(ctx.child("ff_out"), cfg.ff_dim(), cfg.d_model),
        ln_self(ctx.child("ln_self"), cfg.d_model),
        ln_cross(ctx.child("ln_cross"), cfg.d_model),
        ln_ff(ctx.child("ln_ff"), cfg.d_model) {}

  Tensor<S> forward(Tensor<S> x, Tensor<S> memory, double drop, const RunMode& mode,
                    std::vector<Tensor<S>>* self_w, std::vector<Tensor<S>>* cross_w) const {
    auto self_out = self_attn.forward(x, x, /*causal=*/true);
    if (self_w) *self_w = self_out.head_weights;
    auto x1 = ln_self.forward(add(x, apply_dropout(self_out.context, drop, mode)));
    auto cross_out = cross_attn.forward(x1, memory, /*causal=*/false);
    if (cross_w) *cross_w = cross_out.head_weights;
    auto x2 = ln_cross.forward(add(x1, apply_dropout(cross_out.context, drop, mode)));
    auto h = ff_out.forward(relu(ff_inner.forward(x2)));
    return ln_ff.forward(add(x2, apply_dropout(h, drop, mode)));
  }
};

template <typename S>
class DecoderStack {
 public:
  DecoderStack() = default;

  DecoderStack(const ModelConfig& cfg, ModuleCtx<S> ctx) : cfg_(cfg) {
    embed_ = ctx.child("embed").normal("table", {cfg.tgt_vocab, cfg.d_model},
                                       std::pow(static_cast<double>(cfg.d_model), -0.5));
    pos_ = PositionalEncoder<S>(cfg.pe, cfg.max_len_tgt, cfg.d_model, ctx.child("pos"));
    for (int l = 0; l < cfg.n_layers; ++l) {
      layers_.emplace_back(cfg, ctx.child("layer" + std::to_string(l)));
    }
    out_proj_ = Linear<S>(ctx.child("out"), cfg.d_model, cfg.tgt_vocab);
  }

  // Logits for every prefix position; position t sees target ids < t plus the
  // source memory only.
  Tensor<S> forward_logits(Tensor<S> memory, const std::vector<int>& prefix_ids,
                           const RunMode& mode, AttentionTrace<S>* trace = nullptr) const {
    if (static_cast<int>(prefix_ids.size()) > cfg_.max_len_tgt) {
      throw ShapeError("decoder: prefix length " + std::to_string(prefix_ids.size()) +
                       " exceeds max_len_tgt " + std::to_string(cfg_.max_len_tgt));
    }
    auto x = embedding_lookup(embed_, prefix_ids);
    x = scale(x, static_cast<S>(std::sqrt(static_cast<double>(cfg_.d_model))));
    x = pos_.add_positions(x);
    x = apply_dropout(x, cfg_.dropout, mode);
    if (trace) {
      trace->decoder_self.assign(layers_.size(), {});
      trace->decoder_cross.assign(layers_.size(), {});
    }
    for (std::size_t l = 0; l < layers_.size(); ++l) {
      x = layers_[l].forward(x, memory, cfg_.dropout, mode,
                             trace ? &trace->decoder_self[l] : nullptr,
                             trace ? &trace->decoder_cross[l] : nullptr);
    }
    return out_proj_.forward(x);
  }

  const PositionalEncoder<S>& positional() const { return pos_; }

 private:
  ModelConfig cfg_;
  Tensor<S> embed_;
  PositionalEncoder<S> pos_;
  std::vector<DecoderLayer<S>> layers_;
  Linear<S> out_proj_;
};

template <typename S>
class Model {
 public:
  Model(const ModelConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
    cfg_.validate();
    if (cfg_.src_vocab <= 0 || cfg_.tgt_vocab <= 0) {
      throw ConfigError("model: vocabulary sizes must be set before construction");
    }
    Rng root(seed);
    encoder_ = EncoderStack<S>(cfg_, ModuleCtx<S>{&reg_, "encoder", root.split("encoder")});
    if (cfg_.use_cfer) {
      cfer_ = CodeFeatureExtractor<S>(cfg_, ModuleCtx<S>{&reg_, "cfer", root.split("cfer")});
      fusion_ = Linear<S>(ModuleCtx<S>{&reg_, "fusion", root.split("fusion")}, cfg_.d_model,
                          cfg_.d_model);
    }
    decoder_ = DecoderStack<S>(cfg_, ModuleCtx<S>{&reg_, "decoder", root.split("decoder")});
  }

  const ModelConfig& config() const { return cfg_; }
  ParamRegistry<S>& params() { return reg_; }
  const ParamRegistry<S>& params() const { return reg_; }

  // Fused source representation: encoder context plus the projected
  // convolutional features (when enabled).
  Tensor<S> encode_source(const std::vector<int>& src_ids, const RunMode& mode,
                          AttentionTrace<S>* trace = nullptr) const {
    auto shared = encoder_.embed_with_positions(src_ids, mode);
    auto context = encoder_.encode_from(shared, mode, trace);
    if (!cfg_.use_cfer) return context;
    auto features = cfer_.forward(shared, mode);
    return add(context, fusion_.forward(features));
  }

  Tensor<S> decoder_logits(Tensor<S> memory, const std::vector<int>& prefix_ids,
                           const RunMode& mode, AttentionTrace<S>* trace = nullptr) const {
    return decoder_.forward_logits(memory, prefix_ids, mode, trace);
  }

  // Log-probabilities over the target vocabulary for the next position.
  std::vector<double> decode_step(Tensor<S> memory, const std::vector<int>& prefix_ids) const {
    if (prefix_ids.empty() || prefix_ids.front() != kSosId) {
      throw DataError("decode_step: prefix must start with SOS");
    }
    RunMode eval;
    auto logits = decoder_.forward_logits(memory, prefix_ids, eval, nullptr);
    auto logp = log_softmax_rows(logits);
    const auto last = logp.rows() - 1;
    std::vector<double> out(static_cast<std::size_t>(logp.cols()));
    for (std::int64_t j = 0; j < logp.cols(); ++j)
      out[static_cast<std::size_t>(j)] = static_cast<double>(logp.at(last, j));
    return out;
  }

  const EncoderStack<S>& encoder() const { return encoder_; }
  const DecoderStack<S>& decoder() const { return decoder_; }

 private:
  ModelConfig cfg_;
  ParamRegistry<S> reg_;
  EncoderStack<S> encoder_;
  CodeFeatureExtractor<S> cfer_;
  Linear<S> fusion_;
  DecoderStack<S> decoder_;
};

// ---------------------------------------------------------------------------
// Beam search over an abstract step scorer
// ---------------------------------------------------------------------------

struct BeamHypothesis {
  double score = 0.0;      // cumulative log-probability
  std::vector<int> ids;    // starts with SOS
  bool finished = false;   // last id is EOS
};

// prefix (starting with SOS) -> log-probability per vocabulary id.
using StepScorer = std::function<std::vector<double>(const std::vector<int>&)>;

struct BeamParams {
  int k = 3;
  int n_max = 60;
  int sos = kSosId;
  int eos = kEosId;
};

// Breadth-limited best-first search: finished hypotheses are carried forward
// unexpanded, live ones expand over the whole vocabulary, the k best by
// cumulative log-probability survive each step (stable ties keep
// earlier-generated hypotheses first).
inline std::vector<BeamHypothesis> beam_search_all(const StepScorer& score_fn,
                                                   const BeamParams& p) {
  if (p.k < 1) throw ConfigError("beam_search: k must be >= 1");
  if (p.n_max < 2) throw ConfigError("beam_search: n_max must be >= 2");

  std::vector<BeamHypothesis> beam{BeamHypothesis{0.0, {p.sos}, false}};
  for (int t = 1; t <= p.n_max - 1; ++t) {
    bool any_live = false;
    for (const auto& h : beam)
      if (!h.finished) any_live = true;
    if (!any_live) break;

    std::vector<BeamHypothesis> candidates;
    for (const auto& hyp : beam) {
      if (hyp.finished) {
        candidates.push_back(hyp);
        continue;
      }
      const auto logp = score_fn(hyp.ids);
      candidates.reserve(candidates.size() + logp.size());
      for (std::size_t y = 0; y < logp.size(); ++y) {
        BeamHypothesis ext;
        ext.score = hyp.score + logp[y];
        ext.ids = hyp.ids;
        ext.ids.push_back(static_cast<int>(y));
        ext.finished = static_cast<int>(y) == p.eos;
        candidates.push_back(std::move(ext));
      }
    }
    std::stable_sort(candidates.begin(), candidates.end(),
                     [](const BeamHypothesis& a, const BeamHypothesis& b) {
                       return a.score > b.score;
                     });
    if (static_cast<int>(candidates.size()) > p.k) candidates.resize(static_cast<std::size_t>(p.k));
    beam = std::move(candidates);
  }
  return beam;
}

struct DecodedSequence {
  std::vector<int> ids;  // SOS ... EOS
  double score = 0.0;    // cumulative log-probability of the emitted tokens
};

// Best sequence from the final beam; when nothing finished within n_max the
// highest-scoring hypothesis is returned with EOS appended (the appended
// terminator is cosmetic and not part of the score).
inline DecodedSequence beam_search(const StepScorer& score_fn, const BeamParams& p) {
  auto beam = beam_search_all(score_fn, p);
  BeamHypothesis best = beam.front();
  if (!best.finished) best.ids.push_back(p.eos);
  return DecodedSequence{std::move(best.ids), best.score};
}

// Argmax token per step until EOS or n_max; same timeout rule as the beam.
inline DecodedSequence greedy_decode(const StepScorer& score_fn, const BeamParams& p) {
  DecodedSequence out;
  out.ids.push_back(p.sos);
  for (int t = 1; t <= p.n_max - 1; ++t) {
    const auto logp = score_fn(out.ids);
    const auto best = std::max_element(logp.begin(), logp.end());
    const int y = static_cast<int>(best - logp.begin());
    out.ids.push_back(y);
    out.score += *best;
    if (y == p.eos) break;
  }
  if (out.ids.back() != p.eos) out.ids.push_back(p.eos);
  return out;
}

// Cumulative log-probability of a SOS...EOS sequence under the scorer.
inline double sequence_score(const StepScorer& score_fn, const std::vector<int>& ids) {
  double total = 0.0;
  std::vector<int> prefix{ids.front()};
  for (std::size_t i = 1; i < ids.size(); ++i) {
    const auto logp = score_fn(prefix);
    total += logp[static_cast<std::size_t>(ids[i])];
    prefix.push_back(ids[i]);
  }
  return total;
}

template <typename S>
StepScorer make_step_scorer(const Model<S>& model, Tensor<S> memory) {
  return [&model, memory](const std::vector<int>& prefix) {
    return model.decode_step(memory, prefix);
  };
}

// Full generation pipeline: preprocess, encode, fuse, beam-search, decode to
// a space-joined line.
template <typename S>
std::string generate(const Model<S>& model, const Vocabulary& src_vocab,
                     const Vocabulary& tgt_vocab, const std::string& code_line, int beam_k,
                     int n_max) {
  auto tokens = preprocess_code(code_line);
  if (tokens.empty()) throw DataError("generate: empty input line");
  auto ids = src_vocab.encode(tokens, /*add_sos_eos=*/false);
  ids.push_back(kEosId);
  ids = truncate_ids(ids, model.config().max_len_src);

  RunMode eval;
  auto memory = model.encode_source(ids, eval);
  BeamParams p;
  p.k = beam_k;
  p.n_max = std::min(n_max, model.config().max_len_tgt);
  auto result = beam_search(make_step_scorer(model, memory), p);
  auto words = tgt_vocab.decode(result.ids);
  std::string line;
  for (std::size_t i = 0; i < words.size(); ++i) {
    if (i) line += ' ';
    line += words[i];
  }
  return line;
}

}  // namespace deeppseudo
