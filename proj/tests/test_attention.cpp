#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <Eigen/Dense>
#include <cmath>

#include "deeppseudo/attention.hpp"
#include "deeppseudo/config.hpp"
#include "deeppseudo/module.hpp"
#include "gradcheck.hpp"

using namespace deeppseudo;
using gradcheck::random_tensor;
using Mat = Eigen::MatrixXd;

namespace {

Mat to_mat(const Tensor<double>& t) {
  Mat m(t.rows(), t.cols());
  for (std::int64_t i = 0; i < t.rows(); ++i)
    for (std::int64_t j = 0; j < t.cols(); ++j) m(i, j) = t.at(i, j);
  return m;
}

Tensor<double> from_mat(const Mat& m) {
  Tensor<double> t = Tensor<double>::zeros({m.rows(), m.cols()});
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index j = 0; j < m.cols(); ++j) t.at(i, j) = m(i, j);
  return t;
}

Mat softmax_rows_ref(Mat m) {
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    const double mx = m.row(i).maxCoeff();
    m.row(i) = (m.row(i).array() - mx).exp();
    m.row(i) /= m.row(i).sum();
  }
  return m;
}

Mat self_attention_ref(const Mat& q, const Mat& k, const Mat& v) {
  return softmax_rows_ref(q * k.transpose() / std::sqrt(static_cast<double>(q.cols()))) * v;
}

Mat linear_attention_ref(const Mat& q, const Mat& k, const Mat& v, const Mat& e, const Mat& f) {
  const Mat ek = e.transpose() * k;  // [k x d]
  const Mat w = softmax_rows_ref(q * ek.transpose() / std::sqrt(static_cast<double>(q.cols())));
  return w * (f.transpose() * v);
}

Mat synthesizer_ref(const Mat& x, const Mat& w1, const Mat& w2, const Mat& b, const Mat& g,
                    Eigen::Index len_k) {
  Mat scores(x.rows(), w2.rows());
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    Eigen::VectorXd hidden = (w1 * x.row(i).transpose() + b).cwiseMax(0.0);
    scores.row(i) = (w2 * hidden + b).transpose();
  }
  const Mat w = softmax_rows_ref(scores.leftCols(len_k));
  return w * (x * g).topRows(len_k);
}

Mat norm_attention_ref(Mat q, Mat k, const Mat& v, double g) {
  for (Eigen::Index i = 0; i < q.rows(); ++i) q.row(i) /= q.row(i).norm() + 1e-8;
  for (Eigen::Index i = 0; i < k.rows(); ++i) k.row(i) /= k.row(i).norm() + 1e-8;
  return softmax_rows_ref(g * q * k.transpose()) * v;
}

double max_abs_diff(const Tensor<double>& t, const Mat& m) {
  double d = 0;
  for (std::int64_t i = 0; i < t.rows(); ++i)
    for (std::int64_t j = 0; j < t.cols(); ++j)
      d = std::max(d, std::abs(t.at(i, j) - m(i, j)));
  return d;
}

void check_rows_sum_to_one(const Tensor<double>& w) {
  for (std::int64_t i = 0; i < w.rows(); ++i) {
    double s = 0;
    for (std::int64_t j = 0; j < w.cols(); ++j) {
      CHECK(w.at(i, j) >= 0.0);
      s += w.at(i, j);
    }
    CHECK(std::abs(s - 1.0) < 1e-5);
  }
}

ModelConfig tiny_config(AttentionVariant variant, int n_heads = 2, int d_model = 8) {
  ModelConfig cfg;
  cfg.d_model = d_model;
  cfg.n_heads = n_heads;
  cfg.n_layers = 1;
  cfg.attention = variant;
  cfg.linear_k = 3;
  cfg.max_len_src = 12;
  cfg.max_len_tgt = 12;
  cfg.norm_gain_init = init_norm_gain({12});
  cfg.src_vocab = 11;
  cfg.tgt_vocab = 13;
  cfg.dropout = 0.0;
  return cfg;
}

}  // namespace

TEST_CASE("self attention edge cases and oracle") {
  Rng rng(101);
  // Single key: softmax over one entry is 1, context equals the value row.
  auto q1 = random_tensor({3, 4}, rng);
  auto k1 = random_tensor({1, 4}, rng);
  auto v1 = random_tensor({1, 4}, rng);
  auto r1 = self_attention(q1, k1, v1);
  for (std::int64_t i = 0; i < 3; ++i) {
    CHECK(r1.weights.at(i, 0) == doctest::Approx(1.0));
    for (std::int64_t j = 0; j < 4; ++j) CHECK(r1.context.at(i, j) == doctest::Approx(v1.at(0, j)));
  }

  // Zero queries: uniform weights, context is the mean value row.
  auto q0 = Tensor<double>::zeros({2, 4});
  auto k = random_tensor({5, 4}, rng);
  auto v = random_tensor({5, 4}, rng);
  auto r0 = self_attention(q0, k, v);
  for (std::int64_t j = 0; j < 5; ++j) CHECK(r0.weights.at(0, j) == doctest::Approx(0.2));
  for (std::int64_t j = 0; j < 4; ++j) {
    double mean = 0;
    for (std::int64_t i = 0; i < 5; ++i) mean += v.at(i, j);
    mean /= 5;
    CHECK(r0.context.at(0, j) == doctest::Approx(mean));
  }

  for (int trial = 0; trial < 20; ++trial) {
    auto q = random_tensor({3, 4}, rng);
    auto kk = random_tensor({4, 4}, rng);
    auto vv = random_tensor({4, 4}, rng);
    auto r = self_attention(q, kk, vv);
    CHECK(max_abs_diff(r.context, self_attention_ref(to_mat(q), to_mat(kk), to_mat(vv))) < 1e-6);
    check_rows_sum_to_one(r.weights);
  }

  CHECK_THROWS_AS(self_attention(q1, random_tensor({2, 5}, rng), v1), ShapeError);
}

TEST_CASE("self attention is permutation equivariant in keys/values") {
  Rng rng(103);
  auto q = random_tensor({3, 4}, rng);
  auto k = random_tensor({5, 4}, rng);
  auto v = random_tensor({5, 4}, rng);
  auto base = self_attention(q, k, v);

  const std::vector<std::int64_t> perm = {3, 0, 4, 1, 2};
  auto kp = Tensor<double>::zeros({5, 4});
  auto vp = Tensor<double>::zeros({5, 4});
  for (std::int64_t i = 0; i < 5; ++i)
    for (std::int64_t j = 0; j < 4; ++j) {
      kp.at(i, j) = k.at(perm[static_cast<std::size_t>(i)], j);
      vp.at(i, j) = v.at(perm[static_cast<std::size_t>(i)], j);
    }
  auto permuted = self_attention(q, kp, vp);
  CHECK(max_abs_diff(permuted.context, to_mat(base.context)) < 1e-12);
}

TEST_CASE("linear attention oracle and identity reduction") {
  Rng rng(107);
  const std::int64_t len = 4, d = 4;

  // E = F = identity with k = len reduces exactly to self attention.
  auto q = random_tensor({len, d}, rng);
  auto k = random_tensor({len, d}, rng);
  auto v = random_tensor({len, d}, rng);
  auto eye = Tensor<double>::zeros({len, len});
  for (std::int64_t i = 0; i < len; ++i) eye.at(i, i) = 1.0;
  auto lin = linear_attention(q, k, v, eye, eye);
  auto self = self_attention(q, k, v);
  CHECK(max_abs_diff(lin.context, to_mat(self.context)) < 1e-6);

  auto zero_v = Tensor<double>::zeros({len, d});
  auto lz = linear_attention(q, k, zero_v, eye, eye);
  for (std::int64_t i = 0; i < lz.context.numel(); ++i) CHECK(lz.context.at(i) == 0.0);

  for (int trial = 0; trial < 20; ++trial) {
    auto e = random_tensor({len, 3}, rng);
    auto f = random_tensor({len, 3}, rng);
    auto qq = random_tensor({len, d}, rng);
    auto kk = random_tensor({len, d}, rng);
    auto vv = random_tensor({len, d}, rng);
    auto r = linear_attention(qq, kk, vv, e, f);
    CHECK(max_abs_diff(r.context, linear_attention_ref(to_mat(qq), to_mat(kk), to_mat(vv),
                                                       to_mat(e), to_mat(f))) < 1e-6);
    check_rows_sum_to_one(r.weights);
  }
}

TEST_CASE("linear attention causal prefix evaluation") {
  Rng rng(109);
  const std::int64_t len = 5, d = 4, pk = 3;
  auto q = random_tensor({len, d}, rng);
  auto k = random_tensor({len, d}, rng);
  auto v = random_tensor({len, d}, rng);
  auto e = random_tensor({len, pk}, rng);
  auto f = random_tensor({len, pk}, rng);
  auto causal = linear_attention_causal(q, k, v, e, f);
  check_rows_sum_to_one(causal.weights);
  // Row t must match the full kernel applied to the prefix 0..t.
  for (std::int64_t t = 0; t < len; ++t) {
    Mat qp = to_mat(q).topRows(t + 1);
    Mat full = linear_attention_ref(qp, to_mat(k).topRows(t + 1), to_mat(v).topRows(t + 1),
                                    to_mat(e).topRows(t + 1), to_mat(f).topRows(t + 1));
    for (std::int64_t j = 0; j < d; ++j)
      CHECK(causal.context.at(t, j) == doctest::Approx(full(t, j)).epsilon(1e-9));
  }
  // Last row equals the unmasked kernel's last row.
  auto full = linear_attention(q, k, v, e, f);
  for (std::int64_t j = 0; j < d; ++j)
    CHECK(causal.context.at(len - 1, j) == doctest::Approx(full.context.at(len - 1, j)));
}

TEST_CASE("synthesizer attention degenerate and oracle") {
  Rng rng(113);
  const std::int64_t len = 4, d = 4, max_l = 6;

  // Zero score maps and bias: constant scores, uniform weights, mean of G(X).
  auto x = random_tensor({len, d}, rng);
  auto w1z = Tensor<double>::zeros({max_l, d});
  auto w2z = Tensor<double>::zeros({max_l, max_l});
  auto bz = Tensor<double>::zeros({max_l});
  auto g = random_tensor({d, d}, rng);
  auto rz = synthesizer_attention(x, w1z, w2z, bz, g);
  check_rows_sum_to_one(rz.weights);
  Mat gx = to_mat(x) * to_mat(g);
  for (std::int64_t j = 0; j < d; ++j) {
    const double mean = gx.col(j).mean();
    for (std::int64_t i = 0; i < len; ++i)
      CHECK(rz.context.at(i, j) == doctest::Approx(mean).epsilon(1e-9));
  }

  // Single token: weights are [[1]].
  auto x1 = random_tensor({1, d}, rng);
  auto w1 = random_tensor({max_l, d}, rng);
  auto w2 = random_tensor({max_l, max_l}, rng);
  auto b = random_tensor({max_l}, rng);
  auto r1 = synthesizer_attention(x1, w1, w2, b, g);
  CHECK(r1.weights.rows() == 1);
  CHECK(r1.weights.cols() == 1);
  CHECK(r1.weights.at(0, 0) == doctest::Approx(1.0));

  for (int trial = 0; trial < 20; ++trial) {
    auto xx = random_tensor({len, d}, rng);
    auto ww1 = random_tensor({max_l, d}, rng);
    auto ww2 = random_tensor({max_l, max_l}, rng);
    auto bb = random_tensor({max_l}, rng);
    auto gg = random_tensor({d, d}, rng);
    auto r = synthesizer_attention(xx, ww1, ww2, bb, gg);
    Mat bvec(max_l, 1);
    for (std::int64_t i = 0; i < max_l; ++i) bvec(i, 0) = bb.at(i);
    CHECK(max_abs_diff(r.context, synthesizer_ref(to_mat(xx), to_mat(ww1), to_mat(ww2),
                                                  bvec.col(0), to_mat(gg), len)) < 1e-6);
    check_rows_sum_to_one(r.weights);
  }

  auto too_long = random_tensor({max_l + 1, d}, rng);
  CHECK_THROWS_AS(synthesizer_attention(too_long, w1, w2, b, g), ShapeError);
}

TEST_CASE("norm attention invariances and oracle") {
  Rng rng(127);
  const std::int64_t len = 4, d = 4;
  auto q = random_tensor({len, d}, rng);
  auto k = random_tensor({len, d}, rng);
  auto v = random_tensor({len, d}, rng);
  auto gain = Tensor<double>::scalar(init_norm_gain({20}));

  auto base = norm_attention(q, k, v, gain);
  check_rows_sum_to_one(base.weights);

  // Positive per-row rescaling of Q and K leaves the output unchanged.
  auto qs = Tensor<double>::zeros({len, d});
  auto ks = Tensor<double>::zeros({len, d});
  for (std::int64_t i = 0; i < len; ++i) {
    const double cq = rng.uniform(0.1, 7.0), ck = rng.uniform(0.1, 7.0);
    for (std::int64_t j = 0; j < d; ++j) {
      qs.at(i, j) = q.at(i, j) * cq;
      ks.at(i, j) = k.at(i, j) * ck;
    }
  }
  // Invariance is exact up to the eps term in the row-norm guard.
  auto scaled = norm_attention(qs, ks, v, gain);
  CHECK(max_abs_diff(scaled.context, to_mat(base.context)) < 1e-6);

  // Normalized scores are cosines, bounded by 1.
  auto qh = l2_normalize_rows(q);
  auto kh = l2_normalize_rows(k);
  auto cos = matmul_nt(qh, kh);
  for (std::int64_t i = 0; i < cos.numel(); ++i) {
    CHECK(cos.at(i) <= 1.0 + 1e-12);
    CHECK(cos.at(i) >= -1.0 - 1e-12);
  }

  // Zero rows pass through the eps guard without failure.
  auto qz = Tensor<double>::zeros({2, d});
  auto rz = norm_attention(qz, k, v, gain);
  for (std::int64_t i = 0; i < rz.context.numel(); ++i) CHECK(std::isfinite(rz.context.at(i)));

  for (int trial = 0; trial < 20; ++trial) {
    auto qq = random_tensor({len, d}, rng);
    auto kk = random_tensor({len, d}, rng);
    auto vv = random_tensor({len, d}, rng);
    auto r = norm_attention(qq, kk, vv, gain);
    CHECK(max_abs_diff(r.context,
                       norm_attention_ref(to_mat(qq), to_mat(kk), to_mat(vv), gain.at(0))) <
          1e-6);
  }
}

TEST_CASE("init_norm_gain formula") {
  CHECK(init_norm_gain({2}) == doctest::Approx(1.0));
  CHECK(init_norm_gain({20}) == doctest::Approx(std::log2(380.0)).epsilon(1e-12));
  CHECK(init_norm_gain(std::vector<std::int64_t>(40, 16)) ==
        doctest::Approx(std::log2(240.0)).epsilon(1e-12));
  CHECK_THROWS_AS(init_norm_gain({1, 1, 1}), DataError);
  CHECK_THROWS_AS(init_norm_gain({}), DataError);

  // Nearest-rank percentile: 0.975 * 40 = 39 -> 39th of 40 sorted values.
  std::vector<std::int64_t> lengths;
  for (int i = 1; i <= 40; ++i) lengths.push_back(i);
  CHECK(init_norm_gain(lengths) == doctest::Approx(std::log2(39.0 * 39.0 - 39.0)).epsilon(1e-12));
}

TEST_CASE("multi-head wrapper shapes and single-head reduction") {
  Rng rng(131);
  for (auto variant : {AttentionVariant::kSelf, AttentionVariant::kLinear,
                       AttentionVariant::kSynthesizer, AttentionVariant::kNorm}) {
    auto cfg = tiny_config(variant);
    ParamRegistry<double> reg;
    MultiHeadAttention<double> mha(cfg, false, cfg.max_len_src,
                                   ModuleCtx<double>{&reg, "attn", Rng(3)});
    auto x = random_tensor({5, cfg.d_model}, rng);
    auto out = mha.forward(x, x, false);
    CHECK(out.context.rows() == 5);
    CHECK(out.context.cols() == cfg.d_model);
    CHECK(out.head_weights.size() == static_cast<std::size_t>(cfg.n_heads));
    for (const auto& w : out.head_weights) check_rows_sum_to_one(w);
  }

  // Table 3 head count: weights come out 8 x len_q x len_k.
  auto cfg8 = tiny_config(AttentionVariant::kSelf, 8, 16);
  ParamRegistry<double> reg8;
  MultiHeadAttention<double> mha8(cfg8, false, cfg8.max_len_src,
                                  ModuleCtx<double>{&reg8, "attn", Rng(4)});
  auto x8 = random_tensor({6, 16}, rng);
  auto out8 = mha8.forward(x8, x8, false);
  CHECK(out8.head_weights.size() == 8);
  for (const auto& w : out8.head_weights) {
    CHECK(w.rows() == 6);
    CHECK(w.cols() == 6);
  }

  // One head: wrapper equals kernel(projections) + output projection.
  auto cfg1 = tiny_config(AttentionVariant::kSelf, 1, 6);
  ParamRegistry<double> reg1;
  MultiHeadAttention<double> mha1(cfg1, false, cfg1.max_len_src,
                                  ModuleCtx<double>{&reg1, "attn", Rng(5)});
  auto x1 = random_tensor({4, 6}, rng);
  auto got = mha1.forward(x1, x1, false);

  auto find = [&](const std::string& n) { return *reg1.find(n); };
  auto apply = [&](const std::string& stem, Tensor<double> in) {
    return add_rowvec(matmul(in, find("attn." + stem + ".weight")),
                      find("attn." + stem + ".bias"));
  };
  auto manual = apply(
      "out",
      self_attention(apply("query", x1), apply("key", x1), apply("value", x1)).context);
  CHECK(max_abs_diff(got.context, to_mat(manual)) < 1e-12);
}

TEST_CASE("every attention variant passes gradient checks through the wrapper") {
  Rng rng(137);
  for (auto variant : {AttentionVariant::kSelf, AttentionVariant::kLinear,
                       AttentionVariant::kSynthesizer, AttentionVariant::kNorm}) {
    auto cfg = tiny_config(variant, 2, 6);
    ParamRegistry<double> reg;
    MultiHeadAttention<double> mha(cfg, false, cfg.max_len_src,
                                   ModuleCtx<double>{&reg, "attn", Rng(6)});
    auto x = random_tensor({4, 6}, rng);
    auto res = gradcheck::check(
        [&mha](const std::vector<Tensor<double>>& in) {
          return sum(mha.forward(in[0], in[0], false).context);
        },
        {x});
    CHECK_MESSAGE(res.ok, to_string(variant) << ": " << res.where);

    // Parameters receive gradients too.
    for (auto& p : reg.params()) p.tensor.zero_grad();
    GradientTape<double> tape;
    {
      GradientTape<double>::Scope scope(tape);
      auto out = sum(mha.forward(x, x, false).context);
      tape.backward(out);
    }
    const auto* g = reg.params().front().tensor.grad_if();
    bool any_nonzero = false;
    if (g) {
      for (double v : *g) any_nonzero |= v != 0.0;
    }
    CHECK_MESSAGE(any_nonzero, to_string(variant) << ": first parameter saw no gradient");
  }
}

TEST_CASE("causal masking hides the future for maskable variants") {
  Rng rng(139);
  for (auto variant :
       {AttentionVariant::kSelf, AttentionVariant::kSynthesizer, AttentionVariant::kNorm}) {
    auto cfg = tiny_config(variant, 2, 6);
    cfg.max_len_tgt = 12;
    ParamRegistry<double> reg;
    MultiHeadAttention<double> mha(cfg, false, cfg.max_len_tgt,
                                   ModuleCtx<double>{&reg, "attn", Rng(7)});
    auto x = random_tensor({5, 6}, rng);
    auto out = mha.forward(x, x, true);
    for (const auto& w : out.head_weights) {
      for (std::int64_t i = 0; i < w.rows(); ++i)
        for (std::int64_t j = i + 1; j < w.cols(); ++j) CHECK(w.at(i, j) == doctest::Approx(0.0));
    }
    // Changing a future token must not change earlier context rows.
    auto x2 = x.detach();
    x2.at(4, 0) += 3.0;
    auto out2 = mha.forward(x2, x2, true);
    for (std::int64_t i = 0; i < 4; ++i)
      for (std::int64_t j = 0; j < 6; ++j)
        CHECK(out.context.at(i, j) == doctest::Approx(out2.context.at(i, j)));
  }
}
