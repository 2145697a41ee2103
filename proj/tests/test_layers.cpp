#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "deeppseudo/layers.hpp"
#include "deeppseudo/model.hpp"
#include "gradcheck.hpp"

using namespace deeppseudo;
using gradcheck::random_tensor;

namespace {

ModelConfig small_config() {
  ModelConfig cfg;
  cfg.d_model = 8;
  cfg.n_layers = 2;
  cfg.n_heads = 2;
  cfg.kernel_size = 3;
  cfg.attention = AttentionVariant::kSelf;
  cfg.max_len_src = 10;
  cfg.max_len_tgt = 12;
  cfg.src_vocab = 17;
  cfg.tgt_vocab = 19;
  cfg.dropout = 0.0;
  return cfg;
}

}  // namespace

TEST_CASE("sinusoidal positional table values") {
  ParamRegistry<double> reg;
  PositionalEncoder<double> pe(PosEncodingKind::kSinusoidal, 6, 256,
                               ModuleCtx<double>{&reg, "pos", Rng(1)});
  // Position 0: sin(0)=0 on even dims, cos(0)=1 on odd dims.
  for (std::int64_t j = 0; j < 256; j += 2) {
    CHECK(pe.table().at(0, j) == doctest::Approx(0.0));
    CHECK(pe.table().at(0, j + 1) == doctest::Approx(1.0));
  }
  CHECK(pe.table().at(1, 0) == doctest::Approx(std::sin(1.0)).epsilon(1e-9));
  CHECK(pe.table().at(1, 1) == doctest::Approx(std::cos(1.0)).epsilon(1e-9));
  // All entries bounded.
  for (std::int64_t i = 0; i < pe.table().numel(); ++i) {
    CHECK(pe.table().at(i) <= 1.0);
    CHECK(pe.table().at(i) >= -1.0);
  }
  CHECK(reg.params().empty());  // sinusoidal table is not learnable

  // Deterministic across constructions.
  ParamRegistry<double> reg2;
  PositionalEncoder<double> pe2(PosEncodingKind::kSinusoidal, 6, 256,
                                ModuleCtx<double>{&reg2, "pos", Rng(99)});
  for (std::int64_t i = 0; i < pe.table().numel(); ++i)
    CHECK(pe.table().at(i) == pe2.table().at(i));

  // Zero input passes the table through; beyond max_len errors.
  auto zero = Tensor<double>::zeros({4, 256});
  auto enc = pe.add_positions(zero);
  for (std::int64_t i = 0; i < 4; ++i)
    for (std::int64_t j = 0; j < 256; ++j) CHECK(enc.at(i, j) == pe.table().at(i, j));
  CHECK_THROWS_AS(pe.add_positions(Tensor<double>::zeros({7, 256})), ShapeError);
}

TEST_CASE("learned positional table is a parameter") {
  ParamRegistry<double> reg;
  PositionalEncoder<double> pe(PosEncodingKind::kLearned, 6, 8,
                               ModuleCtx<double>{&reg, "pos", Rng(2)});
  REQUIRE(reg.params().size() == 1);
  CHECK(reg.params().front().name == "pos.table");
  CHECK(reg.params().front().tensor.requires_grad());

  // Gradient flows into the slice that was used.
  Rng rng3(3);
  auto x = random_tensor({3, 8}, rng3);
  auto res = gradcheck::check(
      [&pe](const std::vector<Tensor<double>>& in) { return sum(pe.add_positions(in[0])); },
      {x});
  CHECK_MESSAGE(res.ok, res.where);
}

TEST_CASE("encoder stack shapes, determinism, layer equivariance") {
  auto cfg = small_config();
  ParamRegistry<double> reg;
  EncoderStack<double> enc(cfg, ModuleCtx<double>{&reg, "encoder", Rng(5)});
  RunMode eval;

  std::vector<int> ids = {4, 9, 2, 11, 7};
  auto c = enc.encode(ids, eval);
  CHECK(c.rows() == 5);
  CHECK(c.cols() == cfg.d_model);
  for (std::int64_t i = 0; i < c.numel(); ++i) CHECK(std::isfinite(c.at(i)));

  // Dropout off: double evaluation is bitwise identical.
  auto c2 = enc.encode(ids, eval);
  for (std::int64_t i = 0; i < c.numel(); ++i) CHECK(c.at(i) == c2.at(i));

  // Attention plus pointwise layers are permutation-equivariant; positions
  // enter only through the encoding table.
  EncoderLayer<double> layer(cfg, ModuleCtx<double>{&reg, "solo", Rng(6)});
  Rng rng7(7);
  auto x = random_tensor({4, cfg.d_model}, rng7);
  auto y = layer.forward(x, 0.0, eval, nullptr);
  const std::vector<std::int64_t> perm = {2, 0, 3, 1};
  auto xp = Tensor<double>::zeros({4, cfg.d_model});
  for (std::int64_t i = 0; i < 4; ++i)
    for (std::int64_t j = 0; j < cfg.d_model; ++j)
      xp.at(i, j) = x.at(perm[static_cast<std::size_t>(i)], j);
  auto yp = layer.forward(xp, 0.0, eval, nullptr);
  for (std::int64_t i = 0; i < 4; ++i)
    for (std::int64_t j = 0; j < cfg.d_model; ++j)
      CHECK(yp.at(i, j) == doctest::Approx(y.at(perm[static_cast<std::size_t>(i)], j))
                               .epsilon(1e-12));
}

TEST_CASE("feature extractor block identity and composition oracle") {
  auto cfg = small_config();
  cfg.cfer_blocks = 1;
  RunMode eval;

  // Zero conv and identity output projection: block reduces to X * sqrt(0.5).
  ParamRegistry<double> reg;
  CodeFeatureExtractor<double> cfer(cfg, ModuleCtx<double>{&reg, "cfer", Rng(8)});
  for (auto& p : reg.params()) {
    if (p.name == "cfer.block0.kernels" || p.name == "cfer.block0.bias" ||
        p.name == "cfer.out.bias") {
      std::fill(p.tensor.values().begin(), p.tensor.values().end(), 0.0);
    }
    if (p.name == "cfer.out.weight") {
      std::fill(p.tensor.values().begin(), p.tensor.values().end(), 0.0);
      for (std::int64_t i = 0; i < cfg.d_model; ++i) p.tensor.at(i, i) = 1.0;
    }
  }
  Rng rng9(9);
  auto x = random_tensor({5, cfg.d_model}, rng9);
  auto f = cfer.forward(x, eval);
  CHECK(f.rows() == 5);
  for (std::int64_t i = 0; i < f.numel(); ++i)
    CHECK(f.at(i) == doctest::Approx(x.at(i) * std::sqrt(0.5)).epsilon(1e-12));

  // Random block equals the hand-composed conv -> GLU -> scaled residual ->
  // projection, exactly.
  ParamRegistry<double> reg2;
  CodeFeatureExtractor<double> cfer2(cfg, ModuleCtx<double>{&reg2, "cfer", Rng(10)});
  auto kernels = *reg2.find("cfer.block0.kernels");
  auto bias = *reg2.find("cfer.block0.bias");
  auto ow = *reg2.find("cfer.out.weight");
  auto ob = *reg2.find("cfer.out.bias");
  Rng rng11(11);
  auto x2 = random_tensor({5, cfg.d_model}, rng11);
  auto got = cfer2.forward(x2, eval);
  auto manual = add_rowvec(
      matmul(scale(add(x2, glu(conv1d(x2, kernels, bias, 1))), std::sqrt(0.5)), ow), ob);
  for (std::int64_t i = 0; i < got.numel(); ++i) CHECK(got.at(i) == manual.at(i));

  // Length is preserved through any number of blocks.
  cfg.cfer_blocks = 3;
  ParamRegistry<double> reg3;
  CodeFeatureExtractor<double> cfer3(cfg, ModuleCtx<double>{&reg3, "cfer", Rng(12)});
  Rng rng13(13);
  CHECK(cfer3.forward(random_tensor({7, cfg.d_model}, rng13), eval).rows() == 7);
}

TEST_CASE("fusion recovers the plain encoder and routes gradients to both branches") {
  auto cfg = small_config();
  RunMode eval;

  // Same seed, with and without the extractor: zeroing the fusion map must
  // reproduce the plain encoder context exactly.
  Model<double> plain([&] {
    auto c = cfg;
    c.use_cfer = false;
    return c;
  }(), 42);
  Model<double> fused(cfg, 42);
  for (auto& p : fused.params().params()) {
    if (p.name == "fusion.weight" || p.name == "fusion.bias") {
      std::fill(p.tensor.values().begin(), p.tensor.values().end(), 0.0);
    }
  }
  std::vector<int> ids = {3, 1, 8, 2};
  auto z_plain = plain.encode_source(ids, eval);
  auto z_fused = fused.encode_source(ids, eval);
  REQUIRE(z_plain.numel() == z_fused.numel());
  for (std::int64_t i = 0; i < z_plain.numel(); ++i) CHECK(z_plain.at(i) == z_fused.at(i));

  // Gradients reach a weight on each branch.
  Model<double> m(cfg, 7);
  GradientTape<double> tape;
  {
    GradientTape<double>::Scope scope(tape);
    auto z = m.encode_source(ids, eval);
    auto loss = sum(z);
    tape.backward(loss);
  }
  auto nonzero_grad = [&](const std::string& name) {
    const auto* g = m.params().find(name)->grad_if();
    if (!g) return false;
    for (double v : *g)
      if (v != 0.0) return true;
    return false;
  };
  CHECK(nonzero_grad("fusion.weight"));
  CHECK(nonzero_grad("cfer.block0.kernels"));
  CHECK(nonzero_grad("encoder.layer0.attn.query.weight"));

  // Central finite differences on in-place perturbed weights, both branches.
  auto fd_check = [&](const std::string& name) {
    for (auto& p : m.params().params()) p.tensor.zero_grad();
    GradientTape<double> t2;
    {
      GradientTape<double>::Scope scope(t2);
      auto loss = sum(m.encode_source(ids, eval));
      t2.backward(loss);
    }
    auto* param = m.params().find(name);
    REQUIRE(param != nullptr);
    const auto analytic = param->grad();
    const double h = 1e-5;
    double worst = 0.0;
    const auto probes = std::min<std::int64_t>(param->numel(), 12);
    for (std::int64_t i = 0; i < probes; ++i) {
      const double saved = param->at(i);
      param->at(i) = saved + h;
      const double fp = sum(m.encode_source(ids, eval)).at(0);
      param->at(i) = saved - h;
      const double fm = sum(m.encode_source(ids, eval)).at(0);
      param->at(i) = saved;
      const double numeric = (fp - fm) / (2 * h);
      const double a = analytic[static_cast<std::size_t>(i)];
      worst = std::max(worst, std::abs(a - numeric) /
                                  std::max({1.0, std::abs(a), std::abs(numeric)}));
    }
    return worst;
  };
  CHECK(fd_check("fusion.weight") < 1e-4);
  CHECK(fd_check("cfer.block0.kernels") < 1e-4);
  CHECK(fd_check("encoder.layer0.ff_inner.weight") < 1e-4);
}
