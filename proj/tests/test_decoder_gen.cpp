#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <map>

#include "deeppseudo/model.hpp"
#include "deeppseudo/rng.hpp"
#include "gradcheck.hpp"

using namespace deeppseudo;

namespace {

ModelConfig tiny_config(AttentionVariant variant = AttentionVariant::kNorm) {
  ModelConfig cfg;
  cfg.d_model = 8;
  cfg.n_layers = 2;
  cfg.n_heads = 2;
  cfg.kernel_size = 3;
  cfg.attention = variant;
  cfg.max_len_src = 12;
  cfg.max_len_tgt = 12;
  cfg.src_vocab = 15;
  cfg.tgt_vocab = 17;
  cfg.dropout = 0.0;
  cfg.norm_gain_init = init_norm_gain({10});
  return cfg;
}

// Deterministic random toy scorer: each prefix gets its own fixed
// log-distribution over `vocab` ids.
StepScorer random_toy_scorer(std::uint64_t seed, int vocab) {
  return [seed, vocab](const std::vector<int>& prefix) {
    std::uint64_t h = seed;
    for (int id : prefix) h = detail::splitmix64(h ^ static_cast<std::uint64_t>(id + 1));
    Rng rng(h);
    std::vector<double> logits(static_cast<std::size_t>(vocab));
    for (auto& v : logits) v = rng.uniform(-3.0, 3.0);
    double mx = logits[0];
    for (double v : logits) mx = std::max(mx, v);
    double total = 0.0;
    for (double v : logits) total += std::exp(v - mx);
    const double lse = mx + std::log(total);
    for (auto& v : logits) v -= lse;
    return logits;
  };
}

// All sequences allowed by the search space: SOS then up to n_max-1 scored
// tokens, ending at EOS or at the length cap (cap sequences get an unscored
// EOS appended, mirroring the search's timeout rule). depth counts emitted
// tokens plus one.
void enumerate_sequences(const StepScorer& f, const BeamParams& p, std::vector<int>& prefix,
                         double score, int depth,
                         std::vector<std::pair<double, std::vector<int>>>& out) {
  if (depth == p.n_max) {
    auto ids = prefix;
    if (ids.back() != p.eos) ids.push_back(p.eos);
    out.emplace_back(score, ids);
    return;
  }
  const auto logp = f(prefix);
  for (int y = 0; y < static_cast<int>(logp.size()); ++y) {
    prefix.push_back(y);
    const double s = score + logp[static_cast<std::size_t>(y)];
    if (y == p.eos) {
      out.emplace_back(s, prefix);
    } else {
      enumerate_sequences(f, p, prefix, s, depth + 1, out);
    }
    prefix.pop_back();
  }
}

std::pair<double, std::vector<int>> exhaustive_best(const StepScorer& f, const BeamParams& p) {
  std::vector<std::pair<double, std::vector<int>>> all;
  std::vector<int> prefix{p.sos};
  enumerate_sequences(f, p, prefix, 0.0, 1, all);
  std::size_t best = 0;
  for (std::size_t i = 1; i < all.size(); ++i)
    if (all[i].first > all[best].first) best = i;
  return all[best];
}

}  // namespace

TEST_CASE("decode_step normalization, causality, determinism") {
  auto cfg = tiny_config();
  Model<float> model(cfg, 11);
  RunMode eval;
  std::vector<int> src = {7, 3, 9, kEosId};
  auto memory = model.encode_source(src, eval);

  std::vector<int> prefix = {kSosId, 8, 5};
  auto logp = model.decode_step(memory, prefix);
  CHECK(logp.size() == static_cast<std::size_t>(cfg.tgt_vocab));
  double mx = logp[0];
  for (double v : logp) mx = std::max(mx, v);
  double total = 0;
  for (double v : logp) total += std::exp(v - mx);
  CHECK(std::abs(mx + std::log(total)) < 1e-5);  // logsumexp == 0

  // Appending a token never changes earlier positions' logits.
  auto logits_before = model.decoder_logits(memory, prefix, eval);
  auto longer = prefix;
  longer.push_back(2);
  auto logits_after = model.decoder_logits(memory, longer, eval);
  for (std::int64_t i = 0; i < logits_before.rows(); ++i)
    for (std::int64_t j = 0; j < logits_before.cols(); ++j)
      CHECK(logits_before.at(i, j) == logits_after.at(i, j));

  // Dropout off: bitwise identical evaluations.
  auto again = model.decode_step(memory, prefix);
  for (std::size_t i = 0; i < logp.size(); ++i) CHECK(logp[i] == again[i]);

  CHECK_THROWS_AS(model.decode_step(memory, {8, 5}), DataError);  // missing SOS
  std::vector<int> too_long(static_cast<std::size_t>(cfg.max_len_tgt) + 1, 2);
  too_long[0] = kSosId;
  CHECK_THROWS_AS(model.decode_step(memory, too_long), ShapeError);
}

TEST_CASE("causality holds under every attention variant") {
  for (auto variant : {AttentionVariant::kSelf, AttentionVariant::kLinear,
                       AttentionVariant::kSynthesizer, AttentionVariant::kNorm}) {
    auto cfg = tiny_config(variant);
    Model<float> model(cfg, 23);
    RunMode eval;
    auto memory = model.encode_source({4, 2, kEosId}, eval);
    std::vector<int> prefix = {kSosId, 3, 6, 2};
    auto before = model.decoder_logits(memory, prefix, eval);
    auto longer = prefix;
    longer.push_back(9);
    auto after = model.decoder_logits(memory, longer, eval);
    for (std::int64_t i = 0; i < before.rows(); ++i)
      for (std::int64_t j = 0; j < before.cols(); ++j)
        CHECK_MESSAGE(before.at(i, j) == after.at(i, j), to_string(variant));
  }
}

TEST_CASE("beam search equals greedy at k=1, bitwise") {
  for (std::uint64_t seed = 0; seed < 30; ++seed) {
    const int vocab = 4;
    auto scorer = random_toy_scorer(seed, vocab);
    BeamParams p;
    p.k = 1;
    p.n_max = 4;
    p.sos = 0;
    p.eos = 1;
    auto beam = beam_search(scorer, p);
    auto greedy = greedy_decode(scorer, p);
    CHECK(beam.ids == greedy.ids);
    CHECK(beam.score == greedy.score);
  }
}

TEST_CASE("hand-set toy model where greedy is suboptimal") {
  // ids: 0=SOS, 1=EOS, 2=A, 3=B.
  // From SOS:   A 0.59, B 0.40, EOS 0.01  -> greedy takes A
  // From ..A:   A 0.35, B 0.35, EOS 0.30
  // From ..B:   A 0.05, B 0.05, EOS 0.90  -> B EOS scores 0.36, beats greedy
  // Anything deeper: EOS certain.
  StepScorer scorer = [](const std::vector<int>& prefix) {
    auto logs = [](std::initializer_list<double> ps) {
      std::vector<double> out;
      for (double p : ps) out.push_back(std::log(p));
      return out;
    };
    if (prefix.size() == 1) return logs({1e-9, 0.01, 0.59 - 5e-10, 0.40 - 5e-10});
    if (prefix.size() == 2 && prefix[1] == 2) return logs({1e-9, 0.30, 0.35, 0.35 - 1e-9});
    if (prefix.size() == 2 && prefix[1] == 3) return logs({1e-9, 0.90, 0.05, 0.05 - 1e-9});
    return logs({1e-9, 1.0 - 3e-9, 1e-9, 1e-9});
  };
  BeamParams p;
  p.k = 2;
  p.n_max = 4;
  p.sos = 0;
  p.eos = 1;

  auto greedy = greedy_decode(scorer, p);
  auto beam = beam_search(scorer, p);
  auto best = exhaustive_best(scorer, p);

  CHECK(beam.ids == best.second);
  CHECK(beam.score == doctest::Approx(best.first).epsilon(1e-12));
  CHECK(beam.ids == std::vector<int>{0, 3, 1});
  CHECK(greedy.ids != beam.ids);
  CHECK(beam.score > greedy.score);
}

TEST_CASE("beam with full width equals exhaustive search on random toys") {
  Rng meta(202);
  int beam_wins = 0;
  for (int trial = 0; trial < 50; ++trial) {
    const int vocab = static_cast<int>(meta.uniform_int(3, 5));
    const int n_max = static_cast<int>(meta.uniform_int(3, 4));
    auto scorer = random_toy_scorer(meta.next_u64(), vocab);
    BeamParams p;
    p.k = 3;
    p.n_max = n_max;
    p.sos = 0;
    p.eos = 1;

    // Beam score always dominates greedy.
    auto beam = beam_search(scorer, p);
    auto greedy = greedy_decode(scorer, p);
    CHECK(beam.score >= greedy.score - 1e-12);
    if (beam.score > greedy.score + 1e-12) ++beam_wins;

    // Full-width beam enumerates everything, so it must match the optimum.
    BeamParams wide = p;
    wide.k = 1;
    for (int d = 1; d < n_max; ++d) wide.k *= vocab;  // >= branching width
    auto wide_best = beam_search(scorer, wide);
    auto best = exhaustive_best(scorer, wide);
    CHECK(wide_best.score == doctest::Approx(best.first).epsilon(1e-12));
  }
  CHECK(beam_wins > 0);  // the suboptimality of greedy shows up somewhere
}

TEST_CASE("beam bookkeeping invariants") {
  auto scorer = random_toy_scorer(7, 5);
  BeamParams p;
  p.k = 3;
  p.n_max = 4;
  p.sos = 0;
  p.eos = 1;
  auto beam = beam_search_all(scorer, p);
  CHECK(beam.size() <= 3);
  for (const auto& h : beam) {
    CHECK(h.finished == (h.ids.back() == p.eos));
    //

    // Scores are the exact sum of emitted log-probabilities (frozen once
    // finished).
    std::vector<int> emitted(h.ids.begin() + 1, h.ids.end());
    double expect = 0.0;
    std::vector<int> prefix{p.sos};
    for (int id : emitted) {
      expect += scorer(prefix)[static_cast<std::size_t>(id)];
      prefix.push_back(id);
    }
    CHECK(h.score == doctest::Approx(expect).epsilon(1e-12));
  }

  // Determinism.
  auto again = beam_search_all(scorer, p);
  REQUIRE(again.size() == beam.size());
  for (std::size_t i = 0; i < beam.size(); ++i) {
    CHECK(beam[i].ids == again[i].ids);
    CHECK(beam[i].score == again[i].score);
  }
}

TEST_CASE("model-level generation") {
  auto cfg = tiny_config();
  cfg.src_vocab = kSpecialCount + 6;
  cfg.tgt_vocab = kSpecialCount + 8;
  Model<float> model(cfg, 31);

  // Vocabularies whose ids line up with the model dims.
  std::vector<std::vector<std::string>> src_seqs = {{"x", "=", "y", "(", ")", "foo"}};
  std::vector<std::vector<std::string>> tgt_seqs = {
      {"substitute", "for", "call", "the", "method", "value", "of", "function"}};
  auto src_vocab = Vocabulary::build(src_seqs, 1);
  auto tgt_vocab = Vocabulary::build(tgt_seqs, 1);
  REQUIRE(src_vocab.size() == cfg.src_vocab);
  REQUIRE(tgt_vocab.size() == cfg.tgt_vocab);

  auto line = generate(model, src_vocab, tgt_vocab, "x = foo()", 3, 12);
  // No surface specials in the output.
  CHECK(line.find("<SOS>") == std::string::npos);
  CHECK(line.find("<EOS>") == std::string::npos);
  CHECK(line.find("<PAD>") == std::string::npos);

  CHECK_THROWS_AS(generate(model, src_vocab, tgt_vocab, "   ", 3, 12), DataError);

  // Beam never scores below greedy on the real model either.
  RunMode eval;
  auto ids = src_vocab.encode(preprocess_code("x = foo()"), false);
  ids.push_back(kEosId);
  auto memory = model.encode_source(ids, eval);
  auto scorer = make_step_scorer(model, memory);
  BeamParams p;
  p.k = 3;
  p.n_max = cfg.max_len_tgt;
  auto beam = beam_search(scorer, p);
  auto greedy = greedy_decode(scorer, p);
  CHECK(beam.score >= greedy.score - 1e-9);
}
