#pragma once
// Parameter registry and the two building-block modules shared by the encoder
// and decoder stacks. Every parameter has a dotted name (used by checkpoints,
// the optimizer, and the per-module parameter accounting) and its own init
// stream derived from the module's name, so adding one module never shifts
// another module's draws.

#include <cmath>
#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

#include "deeppseudo/ops.hpp"
#include "deeppseudo/rng.hpp"
#include "deeppseudo/tensor.hpp"

namespace deeppseudo {

template <typename S>
struct NamedParam {
  std::string name;
  Tensor<S> tensor;
};

template <typename S>
class ParamRegistry {
 public:
  Tensor<S> add(const std::string& name, Tensor<S> t) {
    if (index_.count(name)) throw ConfigError("duplicate parameter name: " + name);
    t.set_requires_grad(true);
    index_[name] = params_.size();
    params_.push_back(NamedParam<S>{name, t});
    return t;
  }

  const std::vector<NamedParam<S>>& params() const { return params_; }
  std::vector<NamedParam<S>>& params() { return params_; }

  Tensor<S>* find(const std::string& name) {
    auto it = index_.find(name);
    return it == index_.end() ? nullptr : &params_[it->second].tensor;
  }

  std::int64_t total_count() const {
    std::int64_t n = 0;
    for (const auto& p : params_) n += p.tensor.numel();
    return n;
  }

 private:
  std::vector<NamedParam<S>> params_;
  std::unordered_map<std::string, std::size_t> index_;
};

template <typename S>
struct ModuleCtx {
  ParamRegistry<S>* reg;
  std::string prefix;
  Rng rng;

  ModuleCtx child(const std::string& name) const {
    return ModuleCtx{reg, prefix + "." + name, rng.split(name)};
  }

  Tensor<S> xavier(const std::string& name, std::int64_t in, std::int64_t out) {
    const double bound = std::sqrt(6.0 / static_cast<double>(in + out));
    Tensor<S> t = Tensor<S>::zeros({in, out});
    for (std::int64_t i = 0; i < t.numel(); ++i)
      t.at(i) = static_cast<S>(rng.uniform(-bound, bound));
    return reg->add(prefix + "." + name, t);
  }

  // Convolution kernels [k x in x out]; fan-in counts every tap.
  Tensor<S> xavier_conv(const std::string& name, std::int64_t k, std::int64_t in,
                        std::int64_t out) {
    const double bound = std::sqrt(6.0 / static_cast<double>(k * in + out));
    Tensor<S> t = Tensor<S>::zeros({k, in, out});
    for (std::int64_t i = 0; i < t.numel(); ++i)
      t.at(i) = static_cast<S>(rng.uniform(-bound, bound));
    return reg->add(prefix + "." + name, t);
  }

  Tensor<S> normal(const std::string& name, Shape shape, double stddev) {
    Tensor<S> t = Tensor<S>::zeros(std::move(shape));
    for (std::int64_t i = 0; i < t.numel(); ++i)
      t.at(i) = static_cast<S>(rng.normal(0.0, stddev));
    return reg->add(prefix + "." + name, t);
  }

  Tensor<S> constant(const std::string& name, Shape shape, double value) {
    return reg->add(prefix + "." + name, Tensor<S>::full(std::move(shape), static_cast<S>(value)));
  }
};

template <typename S>
struct Linear {
  Tensor<S> weight;  // [in x out]
  Tensor<S> bias;    // [out]

  Linear() = default;
  Linear(ModuleCtx<S> ctx, std::int64_t in, std::int64_t out)
      : weight(ctx.xavier("weight", in, out)), bias(ctx.constant("bias", {out}, 0.0)) {}

  Tensor<S> forward(Tensor<S> x) const { return add_rowvec(matmul(x, weight), bias); }
};

template <typename S>
struct LayerNormModule {
  Tensor<S> gain;
  Tensor<S> bias;

  LayerNormModule() = default;
  LayerNormModule(ModuleCtx<S> ctx, std::int64_t dim)
      : gain(ctx.constant("gain", {dim}, 1.0)), bias(ctx.constant("bias", {dim}, 0.0)) {}

  Tensor<S> forward(Tensor<S> x) const { return layer_norm(x, gain, bias); }
};

}  // namespace deeppseudo
