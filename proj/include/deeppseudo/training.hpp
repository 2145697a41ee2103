#pragma once
// Optimization loop, Adam, binary checkpoints, and parameter accounting.

#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <functional>
#include <limits>
#include <map>
#include <memory>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "deeppseudo/config.hpp"
#include "deeppseudo/corpus.hpp"
#include "deeppseudo/model.hpp"

namespace deeppseudo {

class TrainError : public std::runtime_error {
  using std::runtime_error::runtime_error;
};

template <typename S>
class Adam {
 public:
  Adam() = default;
  Adam(double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}

  // Standard bias-corrected update over every parameter. Missing gradient
  // buffers count as zero. Non-finite gradients abort the step untouched.
  void step(ParamRegistry<S>& params) {
    for (const auto& p : params.params()) {
      const auto* g = p.tensor.grad_if();
      if (!g) continue;
      for (S v : *g) {
        if (!std::isfinite(static_cast<double>(v))) {
          throw TrainError("adam_step: non-finite gradient in " + p.name);
        }
      }
    }
    ++step_;
    const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(step_));
    const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(step_));
    for (auto& p : params.params()) {
      auto& slot = state_[p.name];
      const auto n = static_cast<std::size_t>(p.tensor.numel());
      if (slot.m.size() != n) {
        slot.m.assign(n, S(0));
        slot.v.assign(n, S(0));
      }
      const auto* g = p.tensor.grad_if();
      S* value = p.tensor.data();
      for (std::size_t i = 0; i < n; ++i) {
        const double grad = g ? static_cast<double>((*g)[i]) : 0.0;
        const double m = beta1_ * static_cast<double>(slot.m[i]) + (1.0 - beta1_) * grad;
        const double v = beta2_ * static_cast<double>(slot.v[i]) + (1.0 - beta2_) * grad * grad;
        slot.m[i] = static_cast<S>(m);
        slot.v[i] = static_cast<S>(v);
        const double m_hat = m / bc1;
        const double v_hat = v / bc2;
        value[i] -= static_cast<S>(lr_ * m_hat / (std::sqrt(v_hat) + eps_));
      }
    }
  }

  void zero_grad(ParamRegistry<S>& params) {
    for (auto& p : params.params()) p.tensor.zero_grad();
  }

  std::int64_t step_count() const { return step_; }
  void set_step_count(std::int64_t s) { step_ = s; }
  double learning_rate() const { return lr_; }

  struct Slot {
    std::vector<S> m, v;
  };
  std::map<std::string, Slot>& state() { return state_; }
  const std::map<std::string, Slot>& state() const { return state_; }

 private:
  double lr_ = 0.001;
  double beta1_ = 0.9;
  double beta2_ = 0.999;
  double eps_ = 1e-8;
  std::int64_t step_ = 0;
  std::map<std::string, Slot> state_;
};

// Global-norm gradient clip; returns the pre-clip norm.
template <typename S>
double clip_gradients(ParamRegistry<S>& params, double max_norm) {
  double sq = 0.0;
  for (const auto& p : params.params()) {
    const auto* g = p.tensor.grad_if();
    if (!g) continue;
    for (S v : *g) sq += static_cast<double>(v) * static_cast<double>(v);
  }
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm && norm > 0.0) {
    const S factor = static_cast<S>(max_norm / norm);
    for (auto& p : params.params()) {
      auto* g = const_cast<std::vector<S>*>(p.tensor.grad_if());
      if (!g) continue;
      for (auto& v : *g) v *= factor;
    }
  }
  return norm;
}

// ---------------------------------------------------------------------------
// Parameter accounting
// ---------------------------------------------------------------------------

struct ParamGroupCount {
  std::string group;
  std::int64_t count = 0;
};

template <typename S>
std::vector<ParamGroupCount> count_parameters(const Model<S>& model) {
  std::vector<ParamGroupCount> groups;
  std::unordered_map<std::string, std::size_t> index;
  for (const auto& p : model.params().params()) {
    const auto dot = p.name.find('.');
    const std::string group = dot == std::string::npos ? p.name : p.name.substr(0, dot);
    auto it = index.find(group);
    if (it == index.end()) {
      index[group] = groups.size();
      groups.push_back(ParamGroupCount{group, p.tensor.numel()});
    } else {
      groups[it->second].count += p.tensor.numel();
    }
  }
  return groups;
}

template <typename S>
std::int64_t total_parameters(const Model<S>& model) {
  return model.params().total_count();
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------
// Layout: magic "DPSC", u32 version, length-prefixed UTF-8 config block
// (key=value lines), the two vocabulary blocks, then repeated tensor records
// [u32 name length, name, u32 rank, u64 dims..., little-endian f32 payload].
// Optimizer state rides along as records named opt.m.* / opt.v.*.

namespace ckpt {

inline void put_u32(std::ostream& os, std::uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                        static_cast<unsigned char>(v >> 16),
                        static_cast<unsigned char>(v >> 24)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

inline void put_u64(std::ostream& os, std::uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  os.write(reinterpret_cast<const char*>(b), 8);
}

inline void put_f32(std::ostream& os, float f) {
  std::uint32_t bits;
  std::memcpy(&bits, &f, 4);
  put_u32(os, bits);
}

inline std::uint32_t get_u32(std::istream& is) {
  unsigned char b[4];
  is.read(reinterpret_cast<char*>(b), 4);
  if (!is) throw IoError("checkpoint: unexpected end of file");
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

inline std::uint64_t get_u64(std::istream& is) {
  unsigned char b[8];
  is.read(reinterpret_cast<char*>(b), 8);
  if (!is) throw IoError("checkpoint: unexpected end of file");
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return v;
}

inline float get_f32(std::istream& is) {
  const std::uint32_t bits = get_u32(is);
  float f;
  std::memcpy(&f, &bits, 4);
  return f;
}

inline void put_block(std::ostream& os, const std::string& s) {
  put_u32(os, static_cast<std::uint32_t>(s.size()));
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline std::string get_block(std::istream& is) {
  const auto n = get_u32(is);
  std::string s(n, '\0');
  is.read(s.data(), n);
  if (!is) throw IoError("checkpoint: unexpected end of file");
  return s;
}

inline void put_record(std::ostream& os, const std::string& name, const Shape& shape,
                       const float* data, std::int64_t n) {
  put_u32(os, static_cast<std::uint32_t>(name.size()));
  os.write(name.data(), static_cast<std::streamsize>(name.size()));
  put_u32(os, static_cast<std::uint32_t>(shape.size()));
  for (auto d : shape) put_u64(os, static_cast<std::uint64_t>(d));
  for (std::int64_t i = 0; i < n; ++i) put_f32(os, data[i]);
}

struct Record {
  Shape shape;
  std::vector<float> data;
};

inline bool get_record(std::istream& is, std::string& name, Record& rec) {
  std::uint32_t name_len;
  {
    unsigned char b[4];
    is.read(reinterpret_cast<char*>(b), 4);
    if (is.eof()) return false;
    if (!is) throw IoError("checkpoint: unexpected end of file");
    name_len = static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
               (static_cast<std::uint32_t>(b[2]) << 16) |
               (static_cast<std::uint32_t>(b[3]) << 24);
  }
  name.assign(name_len, '\0');
  is.read(name.data(), name_len);
  const auto rank = get_u32(is);
  rec.shape.clear();
  for (std::uint32_t i = 0; i < rank; ++i)
    rec.shape.push_back(static_cast<std::int64_t>(get_u64(is)));
  const auto n = shape_numel(rec.shape);
  rec.data.resize(static_cast<std::size_t>(n));
  for (std::int64_t i = 0; i < n; ++i) rec.data[static_cast<std::size_t>(i)] = get_f32(is);
  if (!is) throw IoError("checkpoint: unexpected end of file");
  return true;
}

}  // namespace ckpt

struct CheckpointMeta {
  int epoch = 0;
  double valid_loss = 0.0;
};

inline constexpr std::uint32_t kCheckpointVersion = 1;

inline void save_checkpoint(const std::string& path, const Model<float>& model,
                            const Vocabulary& src_vocab, const Vocabulary& tgt_vocab,
                            const CheckpointMeta& meta, const Adam<float>* optimizer = nullptr) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot write checkpoint: " + path);
  os.write("DPSC", 4);
  ckpt::put_u32(os, kCheckpointVersion);

  std::string cfg_block = model_config_block(model.config());
  cfg_block += "meta.epoch=" + std::to_string(meta.epoch) + "\n";
  {
    std::ostringstream vs;
    vs.precision(17);
    vs << meta.valid_loss;
    cfg_block += "meta.valid_loss=" + vs.str() + "\n";
  }
  if (optimizer) cfg_block += "opt.step=" + std::to_string(optimizer->step_count()) + "\n";
  ckpt::put_block(os, cfg_block);
  ckpt::put_block(os, src_vocab.to_block());
  ckpt::put_block(os, tgt_vocab.to_block());

  for (const auto& p : model.params().params()) {
    ckpt::put_record(os, p.name, p.tensor.shape(), p.tensor.data(), p.tensor.numel());
  }
  if (optimizer) {
    for (const auto& p : model.params().params()) {
      auto it = optimizer->state().find(p.name);
      if (it == optimizer->state().end()) continue;
      ckpt::put_record(os, "opt.m." + p.name, p.tensor.shape(), it->second.m.data(),
                       static_cast<std::int64_t>(it->second.m.size()));
      ckpt::put_record(os, "opt.v." + p.name, p.tensor.shape(), it->second.v.data(),
                       static_cast<std::int64_t>(it->second.v.size()));
    }
  }
  if (!os) throw IoError("checkpoint write failed: " + path);
}

struct LoadedModel {
  ModelConfig cfg;
  Vocabulary src_vocab;
  Vocabulary tgt_vocab;
  std::shared_ptr<Model<float>> model;
  CheckpointMeta meta;
};

inline LoadedModel load_checkpoint(const std::string& path, Adam<float>* optimizer = nullptr) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open checkpoint: " + path);
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, "DPSC", 4) != 0) {
    throw DataError("not a checkpoint file (bad magic): " + path);
  }
  const auto version = ckpt::get_u32(is);
  if (version != kCheckpointVersion) {
    throw DataError("unsupported checkpoint version " + std::to_string(version));
  }
  const std::string cfg_block = ckpt::get_block(is);

  LoadedModel lm;
  lm.cfg = model_config_from_block(cfg_block);
  {
    std::istringstream ss(cfg_block);
    std::string line;
    while (std::getline(ss, line)) {
      const auto eq = line.find('=');
      if (eq == std::string::npos) continue;
      const auto key = line.substr(0, eq);
      const auto value = line.substr(eq + 1);
      if (key == "meta.epoch") lm.meta.epoch = std::stoi(value);
      if (key == "meta.valid_loss") lm.meta.valid_loss = std::stod(value);
      if (key == "opt.step" && optimizer) optimizer->set_step_count(std::stoll(value));
    }
  }
  lm.src_vocab = Vocabulary::from_block(ckpt::get_block(is));
  lm.tgt_vocab = Vocabulary::from_block(ckpt::get_block(is));

  lm.model = std::make_shared<Model<float>>(lm.cfg, /*seed=*/0);

  std::unordered_map<std::string, ckpt::Record> records;
  std::string name;
  ckpt::Record rec;
  while (ckpt::get_record(is, name, rec)) records.emplace(name, rec);

  for (auto& p : lm.model->params().params()) {
    auto it = records.find(p.name);
    if (it == records.end()) {
      throw DataError("incompatible checkpoint: missing parameter " + p.name);
    }
    if (it->second.shape != p.tensor.shape()) {
      throw DataError("incompatible checkpoint: " + p.name + " has shape " +
                      shape_str(it->second.shape) + ", expected " +
                      shape_str(p.tensor.shape()));
    }
    std::copy(it->second.data.begin(), it->second.data.end(), p.tensor.data());
    records.erase(it);
  }
  if (optimizer) {
    for (auto& p : lm.model->params().params()) {
      auto mit = records.find("opt.m." + p.name);
      auto vit = records.find("opt.v." + p.name);
      if (mit == records.end() || vit == records.end()) continue;
      auto& slot = optimizer->state()[p.name];
      slot.m = mit->second.data;
      slot.v = vit->second.data;
      records.erase(mit);
      records.erase(vit);
    }
  }
  for (const auto& [extra, r] : records) {
    if (extra.rfind("opt.", 0) == 0) continue;  // optimizer state is optional
    throw DataError("incompatible checkpoint: unexpected record " + extra);
  }
  return lm;
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

struct EpochLog {
  int epoch = 0;
  double train_loss = 0.0;
  double valid_loss = 0.0;
  double seconds = 0.0;
};

inline void write_train_log(const std::string& path, const std::vector<EpochLog>& log) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot write training log: " + path);
  os << "epoch\ttrain_loss\tvalid_loss\tseconds\n";
  os.precision(10);
  for (const auto& e : log) {
    os << e.epoch << '\t' << e.train_loss << '\t' << e.valid_loss << '\t' << e.seconds << '\n';
  }
}

// Teacher-forced loss for one encoded pair.
template <typename S>
Tensor<S> sequence_loss(const Model<S>& model, const std::vector<int>& src_ids,
                        const std::vector<int>& tgt_ids, const RunMode& mode) {
  if (tgt_ids.size() < 2) throw DataError("sequence_loss: target needs SOS and EOS");
  std::vector<int> prefix(tgt_ids.begin(), tgt_ids.end() - 1);
  std::vector<int> targets(tgt_ids.begin() + 1, tgt_ids.end());
  auto memory = model.encode_source(src_ids, mode);
  auto logits = model.decoder_logits(memory, prefix, mode);
  return cross_entropy(logits, targets, kPadId);
}

template <typename S>
double dataset_loss(const Model<S>& model, const std::vector<EncodedPair>& split) {
  RunMode eval;
  double total = 0.0;
  for (const auto& pair : split) {
    auto src = truncate_ids(pair.code_ids, model.config().max_len_src);
    auto tgt = truncate_ids(pair.pseudo_ids, model.config().max_len_tgt);
    total += static_cast<double>(sequence_loss(model, src, tgt, eval).at(0));
  }
  return split.empty() ? 0.0 : total / static_cast<double>(split.size());
}

struct TrainResult {
  std::vector<EpochLog> log;
  CheckpointMeta best;
  bool diverged = false;
  bool stopped_early = false;
  std::shared_ptr<Model<float>> model;  // parameters restored to the best epoch
  Adam<float> optimizer;
};

struct TrainCallbacks {
  // Return false to stop after this epoch.
  std::function<bool(const EpochLog&)> on_epoch;
  // Keep the final parameters instead of restoring the best-validation
  // snapshot (memorization harnesses want the last step).
  bool keep_final = false;
};

// Teacher-forced training with per-epoch validation; the best-validation
// parameter snapshot is restored before returning. Divergence (non-finite
// loss or gradient) stops training and keeps the last good snapshot.
inline TrainResult train_model(const ParallelCorpus& corpus, ModelConfig mcfg,
                               const TrainConfig& tcfg, TrainCallbacks callbacks = {}) {
  tcfg.validate();
  if (corpus.train.empty() || corpus.valid.empty()) {
    throw DataError("train: empty train or valid split");
  }
  mcfg.src_vocab = corpus.source_vocab.size();
  mcfg.tgt_vocab = corpus.target_vocab.size();
  if (mcfg.attention == AttentionVariant::kNorm && mcfg.norm_gain_init <= 0.0) {
    std::vector<std::int64_t> lengths;
    for (const auto& p : corpus.train_tokens) {
      lengths.push_back(static_cast<std::int64_t>(p.first.size()));
      lengths.push_back(static_cast<std::int64_t>(p.second.size()));
    }
    mcfg.norm_gain_init = init_norm_gain(std::move(lengths));
  }
  mcfg.validate();

  TrainResult result;
  result.model = std::make_shared<Model<float>>(mcfg, tcfg.seed);
  result.optimizer = Adam<float>(tcfg.learning_rate, tcfg.adam_beta1, tcfg.adam_beta2,
                                 tcfg.adam_eps);
  Model<float>& model = *result.model;
  Adam<float>& adam = result.optimizer;

  std::vector<std::vector<float>> best_snapshot;
  auto take_snapshot = [&]() {
    best_snapshot.clear();
    for (const auto& p : model.params().params()) best_snapshot.push_back(p.tensor.values());
  };
  auto restore_snapshot = [&]() {
    if (best_snapshot.empty()) return;
    auto& ps = model.params().params();
    for (std::size_t i = 0; i < ps.size(); ++i) {
      std::copy(best_snapshot[i].begin(), best_snapshot[i].end(), ps[i].tensor.data());
    }
  };

  take_snapshot();  // last-good fallback if the very first epoch diverges
  double best_valid = std::numeric_limits<double>::infinity();
  int epochs_since_best = 0;

  for (int epoch = 1; epoch <= tcfg.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    Rng drop_rng = Rng(tcfg.seed).split("dropout-epoch-" + std::to_string(epoch));
    RunMode train_mode{true, &drop_rng};

    BatchIterator batches(corpus.train, tcfg.batch_size, mcfg.max_len_src, mcfg.max_len_tgt,
                          kPadId, tcfg.seed + static_cast<std::uint64_t>(epoch));
    double epoch_loss = 0.0;
    std::int64_t seen = 0;
    bool bad_step = false;
    while (auto batch = batches.next()) {
      adam.zero_grad(model.params());
      GradientTape<float> tape;
      double batch_loss = 0.0;
      for (std::int64_t r = 0; r < batch->rows; ++r) {
        std::vector<int> src, tgt;
        for (std::int64_t c = 0; c < batch->src_cols; ++c) {
          if (!batch->src_pad_mask[static_cast<std::size_t>(r * batch->src_cols + c)]) {
            src.push_back(batch->src_ids[static_cast<std::size_t>(r * batch->src_cols + c)]);
          }
        }
        for (std::int64_t c = 0; c < batch->tgt_cols; ++c) {
          if (!batch->tgt_pad_mask[static_cast<std::size_t>(r * batch->tgt_cols + c)]) {
            tgt.push_back(batch->tgt_ids[static_cast<std::size_t>(r * batch->tgt_cols + c)]);
          }
        }
        Tensor<float> loss;
        {
          GradientTape<float>::Scope scope(tape);
          loss = sequence_loss(model, src, tgt, train_mode);
          tape.backward(loss, 1.0f / static_cast<float>(batch->rows));
        }
        tape.clear();
        batch_loss += static_cast<double>(loss.at(0));
      }
      batch_loss /= static_cast<double>(batch->rows);
      if (!std::isfinite(batch_loss)) {
        result.diverged = true;
        bad_step = true;
        break;
      }
      if (tcfg.clip_norm > 0.0) clip_gradients(model.params(), tcfg.clip_norm);
      try {
        adam.step(model.params());
      } catch (const TrainError&) {
        result.diverged = true;
        bad_step = true;
        break;
      }
      epoch_loss += batch_loss * static_cast<double>(batch->rows);
      seen += batch->rows;
    }
    adam.zero_grad(model.params());
    if (bad_step) break;

    EpochLog entry;
    entry.epoch = epoch;
    entry.train_loss = seen ? epoch_loss / static_cast<double>(seen) : 0.0;
    entry.valid_loss = dataset_loss(model, corpus.valid);
    entry.seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    result.log.push_back(entry);

    if (entry.valid_loss < best_valid) {
      best_valid = entry.valid_loss;
      result.best = CheckpointMeta{epoch, entry.valid_loss};
      take_snapshot();
      epochs_since_best = 0;
    } else {
      ++epochs_since_best;
    }
    if (callbacks.on_epoch && !callbacks.on_epoch(entry)) {
      result.stopped_early = true;
      break;
    }
    if (epochs_since_best >= tcfg.patience) {
      result.stopped_early = true;
      break;
    }
  }
  if (!callbacks.keep_final || result.diverged) restore_snapshot();
  return result;
}

}  // namespace deeppseudo
