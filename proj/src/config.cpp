#include "deeppseudo/config.hpp"

#include <cmath>
#include <fstream>
#include <sstream>

#include "deeppseudo/tensor.hpp"

namespace deeppseudo {

std::string to_string(AttentionVariant v) {
  switch (v) {
    case AttentionVariant::kSelf: return "self";
    case AttentionVariant::kLinear: return "linear";
    case AttentionVariant::kSynthesizer: return "synthesizer";
    case AttentionVariant::kNorm: return "norm";
  }
  return "norm";
}

std::string to_string(PosEncodingKind k) {
  return k == PosEncodingKind::kSinusoidal ? "sinusoidal" : "learned";
}

std::string to_string(CrossAttentionMode m) {
  return m == CrossAttentionMode::kSame ? "same" : "self";
}

AttentionVariant attention_from_string(const std::string& s) {
  if (s == "self") return AttentionVariant::kSelf;
  if (s == "linear") return AttentionVariant::kLinear;
  if (s == "synthesizer") return AttentionVariant::kSynthesizer;
  if (s == "norm") return AttentionVariant::kNorm;
  throw ConfigError("unknown attention variant: " + s +
                    " (expected self|linear|synthesizer|norm)");
}

PosEncodingKind pe_from_string(const std::string& s) {
  if (s == "sinusoidal") return PosEncodingKind::kSinusoidal;
  if (s == "learned") return PosEncodingKind::kLearned;
  throw ConfigError("unknown positional encoding: " + s + " (expected sinusoidal|learned)");
}

CrossAttentionMode cross_attention_from_string(const std::string& s) {
  if (s == "same") return CrossAttentionMode::kSame;
  if (s == "self") return CrossAttentionMode::kSelf;
  throw ConfigError("unknown cross_attention mode: " + s + " (expected same|self)");
}

void ModelConfig::validate() const {
  if (d_model <= 0 || n_layers <= 0 || n_heads <= 0) {
    throw ConfigError("d_model, n_layers and n_heads must be positive");
  }
  if (d_model % n_heads != 0) {
    throw ConfigError("d_model (" + std::to_string(d_model) + ") must be divisible by n_heads (" +
                      std::to_string(n_heads) + ")");
  }
  if (kernel_size <= 0 || kernel_size % 2 == 0) {
    throw ConfigError("kernel_size must be a positive odd number, got " +
                      std::to_string(kernel_size));
  }
  if (dropout < 0.0 || dropout >= 1.0) throw ConfigError("dropout must be in [0, 1)");
  if (linear_k < 1) throw ConfigError("linear_k must be >= 1");
  if (max_len_src < 2 || max_len_tgt < 2) throw ConfigError("max lengths must be >= 2");
}

void TrainConfig::validate() const {
  if (learning_rate <= 0.0) throw ConfigError("learning_rate must be positive");
  if (batch_size <= 0) throw ConfigError("batch_size must be positive");
  if (epochs <= 0) throw ConfigError("epochs must be positive");
  if (patience < 1) throw ConfigError("patience must be >= 1");
  if (min_freq < 1) throw ConfigError("min_freq must be >= 1");
}

void RunConfig::validate() const {
  model.validate();
  train.validate();
  if (gen.beam_size < 1) throw ConfigError("beam_size must be >= 1");
  if (gen.n_max < 2) throw ConfigError("n_max must be >= 2");
}

namespace {

int to_int(const std::string& key, const std::string& v) {
  try {
    std::size_t pos = 0;
    int r = std::stoi(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return r;
  } catch (const std::exception&) {
    throw ConfigError("config key " + key + ": expected integer, got '" + v + "'");
  }
}

double to_double(const std::string& key, const std::string& v) {
  try {
    std::size_t pos = 0;
    double r = std::stod(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return r;
  } catch (const std::exception&) {
    throw ConfigError("config key " + key + ": expected number, got '" + v + "'");
  }
}

std::uint64_t to_u64(const std::string& key, const std::string& v) {
  try {
    std::size_t pos = 0;
    unsigned long long r = std::stoull(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return r;
  } catch (const std::exception&) {
    throw ConfigError("config key " + key + ": expected unsigned integer, got '" + v + "'");
  }
}

bool to_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  throw ConfigError("config key " + key + ": expected boolean, got '" + v + "'");
}

std::string trim(const std::string& s) {
  std::size_t a = 0, b = s.size();
  while (a < b && std::isspace(static_cast<unsigned char>(s[a]))) ++a;
  while (b > a && std::isspace(static_cast<unsigned char>(s[b - 1]))) --b;
  return s.substr(a, b - a);
}

}  // namespace

void apply_key(RunConfig& cfg, const std::string& key, const std::string& value) {
  auto& m = cfg.model;
  auto& t = cfg.train;
  if (key == "d_model") m.d_model = to_int(key, value);
  else if (key == "n_layers") m.n_layers = to_int(key, value);
  else if (key == "n_heads") m.n_heads = to_int(key, value);
  else if (key == "kernel_size") m.kernel_size = to_int(key, value);
  else if (key == "scale") m.residual_scale = to_double(key, value);
  else if (key == "dropout") m.dropout = to_double(key, value);
  else if (key == "attention") m.attention = attention_from_string(value);
  else if (key == "cross_attention") m.cross_attention = cross_attention_from_string(value);
  else if (key == "pe") m.pe = pe_from_string(value);
  else if (key == "use_cfer") m.use_cfer = to_bool(key, value);
  else if (key == "cfer_blocks") m.cfer_blocks = to_int(key, value);
  else if (key == "linear_k") m.linear_k = to_int(key, value);
  else if (key == "max_len_src") m.max_len_src = to_int(key, value);
  else if (key == "max_len_tgt") m.max_len_tgt = to_int(key, value);
  else if (key == "norm_gain_init") m.norm_gain_init = to_double(key, value);
  else if (key == "src_vocab") m.src_vocab = to_int(key, value);
  else if (key == "tgt_vocab") m.tgt_vocab = to_int(key, value);
  else if (key == "learning_rate") t.learning_rate = to_double(key, value);
  else if (key == "batch_size") t.batch_size = to_int(key, value);
  else if (key == "epochs") t.epochs = to_int(key, value);
  else if (key == "seed") t.seed = to_u64(key, value);
  else if (key == "clip_norm") t.clip_norm = to_double(key, value);
  else if (key == "patience") t.patience = to_int(key, value);
  else if (key == "adam_beta1") t.adam_beta1 = to_double(key, value);
  else if (key == "adam_beta2") t.adam_beta2 = to_double(key, value);
  else if (key == "adam_eps") t.adam_eps = to_double(key, value);
  else if (key == "min_freq") t.min_freq = to_int(key, value);
  else if (key == "beam_size") cfg.gen.beam_size = to_int(key, value);
  else if (key == "n_max") cfg.gen.n_max = to_int(key, value);
  else if (key == "corpus_dir") cfg.corpus_dir = value;
  else if (key == "out_dir") cfg.out_dir = value;
  else if (key == "checkpoint") cfg.checkpoint = value;
  else throw ConfigError("unknown config key: " + key);
}

RunConfig parse_run_config(const std::map<std::string, std::string>& kv) {
  RunConfig cfg;
  for (const auto& [k, v] : kv) apply_key(cfg, k, v);
  return cfg;
}

std::map<std::string, std::string> read_config_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open config file: " + path);
  std::map<std::string, std::string> kv;
  std::string line;
  int lineno = 0;
  while (std::getline(f, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError(path + ":" + std::to_string(lineno) + ": expected key=value");
    }
    kv[trim(line.substr(0, eq))] = trim(line.substr(eq + 1));
  }
  return kv;
}

RunConfig load_run_config(const std::string& path) {
  return parse_run_config(read_config_file(path));
}

std::string model_config_block(const ModelConfig& m) {
  std::ostringstream ss;
  ss.precision(17);
  ss << "d_model=" << m.d_model << '\n'
     << "n_layers=" << m.n_layers << '\n'
     << "n_heads=" << m.n_heads << '\n'
     << "kernel_size=" << m.kernel_size << '\n'
     << "scale=" << m.residual_scale << '\n'
     << "dropout=" << m.dropout << '\n'
     << "attention=" << to_string(m.attention) << '\n'
     << "cross_attention=" << to_string(m.cross_attention) << '\n'
     << "pe=" << to_string(m.pe) << '\n'
     << "use_cfer=" << (m.use_cfer ? "true" : "false") << '\n'
     << "cfer_blocks=" << m.cfer_blocks << '\n'
     << "linear_k=" << m.linear_k << '\n'
     << "max_len_src=" << m.max_len_src << '\n'
     << "max_len_tgt=" << m.max_len_tgt << '\n'
     << "norm_gain_init=" << m.norm_gain_init << '\n'
     << "src_vocab=" << m.src_vocab << '\n'
     << "tgt_vocab=" << m.tgt_vocab << '\n';
  return ss.str();
}

ModelConfig model_config_from_block(const std::string& block) {
  RunConfig cfg;
  std::istringstream ss(block);
  std::string line;
  while (std::getline(ss, line)) {
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw DataError("malformed checkpoint config line: " + line);
    const std::string key = trim(line.substr(0, eq));
    if (key.rfind("meta.", 0) == 0 || key.rfind("opt.", 0) == 0) continue;
    apply_key(cfg, key, trim(line.substr(eq + 1)));
  }
  return cfg.model;
}

}  // namespace deeppseudo
