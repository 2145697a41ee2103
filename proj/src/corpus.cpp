#include "deeppseudo/corpus.hpp"

#include <algorithm>
#include <cctype>
#include <filesystem>
#include <fstream>
#include <map>
#include <unordered_set>

#include "deeppseudo/rng.hpp"
#include "deeppseudo/tensor.hpp"

namespace deeppseudo {

namespace {

bool is_ident_start(char c) {
  return std::isalpha(static_cast<unsigned char>(c)) || c == '_';
}
bool is_ident_char(char c) {
  return std::isalnum(static_cast<unsigned char>(c)) || c == '_';
}
bool is_digit(char c) { return std::isdigit(static_cast<unsigned char>(c)); }
bool is_hex(char c) { return std::isxdigit(static_cast<unsigned char>(c)); }

// Consumes an integer/float/hex/octal/binary literal starting at i; returns
// one past its end. Trailing long/complex suffixes are swallowed.
std::size_t scan_number(const std::string& s, std::size_t i) {
  const std::size_t n = s.size();
  if (s[i] == '0' && i + 1 < n && (s[i + 1] == 'x' || s[i + 1] == 'X')) {
    i += 2;
    while (i < n && is_hex(s[i])) ++i;
  } else if (s[i] == '0' && i + 1 < n &&
             (s[i + 1] == 'o' || s[i + 1] == 'O' || s[i + 1] == 'b' || s[i + 1] == 'B')) {
    i += 2;
    while (i < n && is_digit(s[i])) ++i;
  } else {
    while (i < n && is_digit(s[i])) ++i;
    if (i < n && s[i] == '.') {
      ++i;
      while (i < n && is_digit(s[i])) ++i;
    }
    if (i < n && (s[i] == 'e' || s[i] == 'E')) {
      std::size_t j = i + 1;
      if (j < n && (s[j] == '+' || s[j] == '-')) ++j;
      if (j < n && is_digit(s[j])) {
        i = j;
        while (i < n && is_digit(s[i])) ++i;
      }
    }
  }
  while (i < n && (s[i] == 'l' || s[i] == 'L' || s[i] == 'j' || s[i] == 'J')) ++i;
  return i;
}

const std::vector<std::string>& multi_char_operators() {
  // Longest first so the greedy match below stays unambiguous.
  static const std::vector<std::string> ops = {
      "**=", "//=", ">>=", "<<=", "...", "==", "!=", "<=", ">=", "->",
      "+=",  "-=",  "*=",  "/=",  "%=",  "&=", "|=", "^=", "**", "//",
      "<<",  ">>"};
  return ops;
}

}  // namespace

std::vector<std::string> preprocess_code(const std::string& line) {
  std::vector<std::string> out;
  const std::size_t n = line.size();
  std::size_t i = 0;
  while (i < n) {
    const char ch = line[i];
    if (std::isspace(static_cast<unsigned char>(ch))) {
      ++i;
      continue;
    }
    // Tags from a previous pass stay intact; this is what makes the scanner
    // idempotent on its own joined output.
    if (ch == '<' && line.compare(i, 5, "<NUM>") == 0) {
      out.emplace_back("<NUM>");
      i += 5;
      continue;
    }
    if (ch == '<' && line.compare(i, 5, "<STR>") == 0) {
      out.emplace_back("<STR>");
      i += 5;
      continue;
    }
    if (ch == '\'' || ch == '"') {
      const char quote = ch;
      ++i;
      while (i < n) {
        if (line[i] == '\\' && i + 1 < n) {
          i += 2;
        } else if (line[i] == quote) {
          ++i;
          break;
        } else {
          ++i;
        }
      }
      out.emplace_back("<STR>");
      continue;
    }
    // Numbers are tagged before lowercasing so hex digits never get mangled.
    if (is_digit(ch) || (ch == '.' && i + 1 < n && is_digit(line[i + 1]))) {
      i = scan_number(line, i);
      out.emplace_back("<NUM>");
      continue;
    }
    if (is_ident_start(ch)) {
      std::size_t j = i;
      while (j < n && is_ident_char(line[j])) ++j;
      std::string ident = line.substr(i, j - i);
      i = j;
      for (auto& c : ident) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
      bool emitted = false;
      std::size_t start = 0;
      for (std::size_t k = 0; k <= ident.size(); ++k) {
        if (k == ident.size() || ident[k] == '_') {
          if (k > start) {
            out.push_back(ident.substr(start, k - start));
            emitted = true;
          }
          start = k + 1;
        }
      }
      if (!emitted) out.push_back(ident);  // bare underscores
      continue;
    }
    bool matched = false;
    for (const auto& op : multi_char_operators()) {
      if (line.compare(i, op.size(), op) == 0) {
        out.push_back(op);
        i += op.size();
        matched = true;
        break;
      }
    }
    if (!matched) {
      out.push_back(std::string(1, ch));
      ++i;
    }
  }
  return out;
}

std::vector<std::string> preprocess_pseudo(const std::string& line) {
  static const std::string trailing = ".,;:!?'\")]}";
  std::vector<std::string> out;
  std::size_t i = 0;
  const std::size_t n = line.size();
  while (i < n) {
    while (i < n && std::isspace(static_cast<unsigned char>(line[i]))) ++i;
    if (i >= n) break;
    std::size_t j = i;
    while (j < n && !std::isspace(static_cast<unsigned char>(line[j]))) ++j;
    std::string tok = line.substr(i, j - i);
    i = j;
    for (auto& c : tok) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    std::string tail;
    while (tok.size() > 1 && trailing.find(tok.back()) != std::string::npos) {
      tail.insert(tail.begin(), tok.back());
      tok.pop_back();
    }
    out.push_back(tok);
    for (char c : tail) out.push_back(std::string(1, c));
  }
  return out;
}

CorpusStats corpus_stats(const std::vector<std::vector<std::string>>& sequences) {
  CorpusStats st;
  st.count = static_cast<std::int64_t>(sequences.size());
  if (sequences.empty()) return st;
  std::vector<std::int64_t> lengths;
  lengths.reserve(sequences.size());
  std::unordered_set<std::string> uniq;
  double total = 0.0;
  std::int64_t u20 = 0, u50 = 0, u100 = 0;
  for (const auto& seq : sequences) {
    const auto len = static_cast<std::int64_t>(seq.size());
    lengths.push_back(len);
    total += static_cast<double>(len);
    if (len < 20) ++u20;
    if (len < 50) ++u50;
    if (len < 100) ++u100;
    for (const auto& t : seq) uniq.insert(t);
  }
  st.avg = total / static_cast<double>(st.count);
  st.unique_tokens = static_cast<std::int64_t>(uniq.size());

  std::map<std::int64_t, std::int64_t> hist;
  for (auto l : lengths) ++hist[l];
  std::int64_t best_count = -1;
  for (const auto& [len, cnt] : hist) {
    if (cnt > best_count) {  // ties resolve to the smallest length
      best_count = cnt;
      st.mode = len;
    }
  }
  std::sort(lengths.begin(), lengths.end());
  const auto m = lengths.size();
  st.median = m % 2 == 1 ? static_cast<double>(lengths[m / 2])
                         : (static_cast<double>(lengths[m / 2 - 1]) +
                            static_cast<double>(lengths[m / 2])) /
                               2.0;
  st.pct_under_20 = 100.0 * static_cast<double>(u20) / static_cast<double>(st.count);
  st.pct_under_50 = 100.0 * static_cast<double>(u50) / static_cast<double>(st.count);
  st.pct_under_100 = 100.0 * static_cast<double>(u100) / static_cast<double>(st.count);
  return st;
}

namespace {

std::string trim(const std::string& s) {
  std::size_t a = 0, b = s.size();
  while (a < b && std::isspace(static_cast<unsigned char>(s[a]))) ++a;
  while (b > a && std::isspace(static_cast<unsigned char>(s[b - 1]))) --b;
  return s.substr(a, b - a);
}

std::vector<std::string> read_lines(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open file: " + path);
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(f, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    lines.push_back(line);
  }
  return lines;
}

std::vector<RawPair> zip_pairs(const std::string& code_path, const std::string& anno_path) {
  auto code = read_lines(code_path);
  auto anno = read_lines(anno_path);
  if (code.size() != anno.size()) {
    throw DataError("aligned files differ in length: " + code_path + " has " +
                    std::to_string(code.size()) + " lines, " + anno_path + " has " +
                    std::to_string(anno.size()));
  }
  std::vector<RawPair> pairs;
  pairs.reserve(code.size());
  for (std::size_t i = 0; i < code.size(); ++i) {
    if (trim(code[i]).empty() || trim(anno[i]).empty()) continue;
    pairs.push_back(RawPair{code[i], anno[i], static_cast<std::int64_t>(i)});
  }
  return pairs;
}

EncodedPair encode_pair(const TokenPair& toks, const Vocabulary& src, const Vocabulary& tgt) {
  EncodedPair e;
  e.code_ids = src.encode(toks.first, /*add_sos_eos=*/false);
  e.code_ids.push_back(kEosId);
  e.pseudo_ids = tgt.encode(toks.second, /*add_sos_eos=*/true);
  return e;
}

ParallelCorpus assemble(std::vector<TokenPair> train, std::vector<TokenPair> valid,
                        std::vector<TokenPair> test, int min_frequency) {
  ParallelCorpus pc;
  std::vector<std::vector<std::string>> code_seqs, pseudo_seqs;
  code_seqs.reserve(train.size());
  pseudo_seqs.reserve(train.size());
  for (const auto& p : train) {
    code_seqs.push_back(p.first);
    pseudo_seqs.push_back(p.second);
  }
  pc.source_vocab = Vocabulary::build(code_seqs, min_frequency);
  pc.target_vocab = Vocabulary::build(pseudo_seqs, min_frequency);
  auto enc = [&](const std::vector<TokenPair>& toks, std::vector<EncodedPair>& out) {
    out.reserve(toks.size());
    for (const auto& p : toks) out.push_back(encode_pair(p, pc.source_vocab, pc.target_vocab));
  };
  enc(train, pc.train);
  enc(valid, pc.valid);
  enc(test, pc.test);
  pc.train_tokens = std::move(train);
  pc.valid_tokens = std::move(valid);
  pc.test_tokens = std::move(test);
  return pc;
}

TokenPair tokenize_pair(const RawPair& p) {
  return {preprocess_code(p.code_line), preprocess_pseudo(p.pseudo_line)};
}

}  // namespace

RawCorpus load_raw_corpus(const std::string& dir) {
  namespace fs = std::filesystem;
  RawCorpus raw;
  const fs::path base(dir);
  auto exists = [&](const std::string& name) { return fs::exists(base / name); };

  std::string valid_stem;
  if (exists("valid.code") && exists("valid.anno")) valid_stem = "valid";
  if (valid_stem.empty() && exists("dev.code") && exists("dev.anno")) valid_stem = "dev";

  if (exists("train.code") && exists("train.anno") && !valid_stem.empty() &&
      exists("test.code") && exists("test.anno")) {
    raw.pre_split = true;
    raw.train = zip_pairs((base / "train.code").string(), (base / "train.anno").string());
    raw.valid = zip_pairs((base / (valid_stem + ".code")).string(),
                          (base / (valid_stem + ".anno")).string());
    raw.test = zip_pairs((base / "test.code").string(), (base / "test.anno").string());
    return raw;
  }
  if (exists("code.txt") && exists("anno.txt")) {
    raw.all = zip_pairs((base / "code.txt").string(), (base / "anno.txt").string());
    return raw;
  }
  throw IoError("no corpus found in " + dir +
                " (expected code.txt/anno.txt or {train,valid,test}.{code,anno})");
}

ParallelCorpus split_corpus(const std::vector<RawPair>& pairs, std::array<double, 3> ratios,
                            std::uint64_t seed, int min_frequency) {
  if (pairs.size() < 3) throw DataError("split_corpus: need at least 3 pairs");
  const double sum = ratios[0] + ratios[1] + ratios[2];
  if (std::abs(sum - 1.0) > 1e-9) throw ConfigError("split_corpus: ratios must sum to 1");

  std::vector<std::size_t> order(pairs.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  Rng rng(seed);
  rng.shuffle(order);

  const auto n = pairs.size();
  const auto n_train = static_cast<std::size_t>(ratios[0] * static_cast<double>(n));
  const auto n_valid = static_cast<std::size_t>(ratios[1] * static_cast<double>(n));

  std::vector<TokenPair> train, valid, test;
  for (std::size_t i = 0; i < n; ++i) {
    auto toks = tokenize_pair(pairs[order[i]]);
    if (i < n_train) {
      train.push_back(std::move(toks));
    } else if (i < n_train + n_valid) {
      valid.push_back(std::move(toks));
    } else {
      test.push_back(std::move(toks));
    }
  }
  if (train.empty() || valid.empty() || test.empty()) {
    throw DataError("split_corpus: a split came out empty; adjust ratios or corpus size");
  }
  return assemble(std::move(train), std::move(valid), std::move(test), min_frequency);
}

ParallelCorpus build_corpus(const RawCorpus& raw, std::array<double, 3> ratios,
                            std::uint64_t seed, int min_frequency) {
  if (!raw.pre_split) return split_corpus(raw.all, ratios, seed, min_frequency);
  auto tok = [](const std::vector<RawPair>& ps) {
    std::vector<TokenPair> out;
    out.reserve(ps.size());
    for (const auto& p : ps) out.push_back(tokenize_pair(p));
    return out;
  };
  return assemble(tok(raw.train), tok(raw.valid), tok(raw.test), min_frequency);
}

std::vector<int> truncate_ids(const std::vector<int>& ids, int max_len) {
  if (static_cast<int>(ids.size()) <= max_len) return ids;
  std::vector<int> out(ids.begin(), ids.begin() + max_len);
  if (ids.back() == kEosId) out.back() = kEosId;
  return out;
}

BatchIterator::BatchIterator(const std::vector<EncodedPair>& split, int batch_size,
                             int max_len_src, int max_len_tgt, int pad_id, std::uint64_t seed)
    : split_(split),
      batch_size_(batch_size),
      max_len_src_(max_len_src),
      max_len_tgt_(max_len_tgt),
      pad_id_(pad_id) {
  if (batch_size <= 0) throw ConfigError("batch_size must be positive");
  order_.resize(split.size());
  for (std::size_t i = 0; i < order_.size(); ++i) order_[i] = i;
  Rng rng(seed);
  rng.shuffle(order_);
}

std::optional<Batch> BatchIterator::next() {
  if (cursor_ >= order_.size()) return std::nullopt;
  const auto end = std::min(cursor_ + static_cast<std::size_t>(batch_size_), order_.size());

  Batch b;
  b.rows = static_cast<std::int64_t>(end - cursor_);
  std::vector<std::vector<int>> srcs, tgts;
  for (std::size_t i = cursor_; i < end; ++i) {
    const auto& pair = split_[order_[i]];
    srcs.push_back(truncate_ids(pair.code_ids, max_len_src_));
    tgts.push_back(truncate_ids(pair.pseudo_ids, max_len_tgt_));
    b.pair_indices.push_back(order_[i]);
  }
  cursor_ = end;

  auto pack = [&](const std::vector<std::vector<int>>& seqs, std::vector<int>& ids,
                  std::vector<std::uint8_t>& pad_mask) {
    std::size_t width = 0;
    for (const auto& s : seqs) width = std::max(width, s.size());
    ids.assign(seqs.size() * width, pad_id_);
    pad_mask.assign(seqs.size() * width, 1);
    for (std::size_t r = 0; r < seqs.size(); ++r) {
      for (std::size_t c = 0; c < seqs[r].size(); ++c) {
        ids[r * width + c] = seqs[r][c];
        pad_mask[r * width + c] = 0;
      }
    }
    return static_cast<std::int64_t>(width);
  };
  b.src_cols = pack(srcs, b.src_ids, b.src_pad_mask);
  b.tgt_cols = pack(tgts, b.tgt_ids, b.tgt_pad_mask);
  return b;
}

}  // namespace deeppseudo
