#pragma once
// Model / training / generation configuration and the flat key=value config
// file format shared by the CLI and checkpoints.

#include <cstdint>
#include <map>
#include <string>

namespace deeppseudo {

enum class AttentionVariant { kSelf, kLinear, kSynthesizer, kNorm };
enum class PosEncodingKind { kSinusoidal, kLearned };
enum class CrossAttentionMode { kSame, kSelf };

std::string to_string(AttentionVariant v);
std::string to_string(PosEncodingKind k);
std::string to_string(CrossAttentionMode m);
AttentionVariant attention_from_string(const std::string& s);
PosEncodingKind pe_from_string(const std::string& s);
CrossAttentionMode cross_attention_from_string(const std::string& s);

struct ModelConfig {
  int d_model = 256;
  int n_layers = 2;
  int n_heads = 8;
  int kernel_size = 3;
  double residual_scale = 0.70710678118654752440;  // sqrt(0.5)
  double dropout = 0.25;
  AttentionVariant attention = AttentionVariant::kNorm;
  CrossAttentionMode cross_attention = CrossAttentionMode::kSame;
  PosEncodingKind pe = PosEncodingKind::kSinusoidal;
  bool use_cfer = true;
  int cfer_blocks = 0;  // 0 -> n_layers
  int linear_k = 32;
  int max_len_src = 50;
  int max_len_tgt = 60;
  double norm_gain_init = 0.0;  // 0 -> derived from max_len_tgt at build time
  int src_vocab = 0;            // filled from the corpus
  int tgt_vocab = 0;

  int ff_dim() const { return 4 * d_model; }
  int head_dim() const { return d_model / n_heads; }
  int effective_cfer_blocks() const { return cfer_blocks > 0 ? cfer_blocks : n_layers; }

  void validate() const;
};

struct TrainConfig {
  double learning_rate = 0.001;
  int batch_size = 12;
  int epochs = 30;
  std::uint64_t seed = 1;
  double clip_norm = 1.0;  // <= 0 disables clipping
  int patience = 5;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  int min_freq = 2;

  void validate() const;
};

struct GenConfig {
  int beam_size = 3;
  int n_max = 60;
};

struct RunConfig {
  ModelConfig model;
  TrainConfig train;
  GenConfig gen;
  std::string corpus_dir;
  std::string out_dir;
  std::string checkpoint;

  void validate() const;
};

// Flat UTF-8 key=value lines; '#' starts a comment; unknown keys are rejected.
RunConfig parse_run_config(const std::map<std::string, std::string>& kv);
std::map<std::string, std::string> read_config_file(const std::string& path);
RunConfig load_run_config(const std::string& path);

// Serialization used by checkpoints (model keys only plus vocab sizes).
std::string model_config_block(const ModelConfig& m);
ModelConfig model_config_from_block(const std::string& block);

// Parse one key into the config; throws ConfigError for unknown keys or bad
// values.
void apply_key(RunConfig& cfg, const std::string& key, const std::string& value);

}  // namespace deeppseudo
