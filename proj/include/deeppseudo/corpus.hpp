#pragma once
// Line-aligned code / pseudo-code corpus loading, preprocessing, splitting,
// and batching.

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "deeppseudo/vocab.hpp"

namespace deeppseudo {

struct RawPair {
  std::string code_line;
  std::string pseudo_line;
  std::int64_t index = 0;
};

// Code-side scanner: identifiers lowercased and split at '_', numeric
// literals -> <NUM>, quoted strings -> <STR>, operators kept standalone.
// Idempotent on its own joined output.
std::vector<std::string> preprocess_code(const std::string& line);

// Pseudo side: lowercase, whitespace split, trailing punctuation detached.
std::vector<std::string> preprocess_pseudo(const std::string& line);

struct CorpusStats {
  std::int64_t count = 0;
  double avg = 0.0;
  std::int64_t mode = 0;
  double median = 0.0;
  double pct_under_20 = 0.0;
  double pct_under_50 = 0.0;
  double pct_under_100 = 0.0;
  std::int64_t unique_tokens = 0;
};

CorpusStats corpus_stats(const std::vector<std::vector<std::string>>& sequences);

using TokenPair = std::pair<std::vector<std::string>, std::vector<std::string>>;

struct EncodedPair {
  std::vector<int> code_ids;    // tokens... EOS
  std::vector<int> pseudo_ids;  // SOS tokens... EOS
};

struct ParallelCorpus {
  std::vector<EncodedPair> train, valid, test;
  std::vector<TokenPair> train_tokens, valid_tokens, test_tokens;
  Vocabulary source_vocab;
  Vocabulary target_vocab;
};

struct RawCorpus {
  bool pre_split = false;
  std::vector<RawPair> all;            // when !pre_split
  std::vector<RawPair> train, valid, test;  // when pre_split
};

// Directory layouts, in precedence order:
//   {train,valid,test}.{code,anno}   (published splits; "dev" accepted for valid)
//   code.txt + anno.txt              (single aligned pair of files)
RawCorpus load_raw_corpus(const std::string& dir);

// Deterministic seeded shuffle split; published splits (RawCorpus.pre_split)
// bypass this. Ratios must sum to 1.
ParallelCorpus split_corpus(const std::vector<RawPair>& pairs,
                            std::array<double, 3> ratios, std::uint64_t seed,
                            int min_frequency = 2);

ParallelCorpus build_corpus(const RawCorpus& raw, std::array<double, 3> ratios,
                            std::uint64_t seed, int min_frequency = 2);

struct Batch {
  std::int64_t rows = 0;
  std::int64_t src_cols = 0;
  std::int64_t tgt_cols = 0;
  std::vector<int> src_ids;               // rows x src_cols, right-padded
  std::vector<std::uint8_t> src_pad_mask; // 1 exactly at pad positions
  std::vector<int> tgt_ids;
  std::vector<std::uint8_t> tgt_pad_mask;
  std::vector<std::size_t> pair_indices;  // into the split, pre-shuffle
};

class BatchIterator {
 public:
  BatchIterator(const std::vector<EncodedPair>& split, int batch_size,
                int max_len_src, int max_len_tgt, int pad_id, std::uint64_t seed);

  std::optional<Batch> next();

 private:
  const std::vector<EncodedPair>& split_;
  std::vector<std::size_t> order_;
  std::size_t cursor_ = 0;
  int batch_size_;
  int max_len_src_;
  int max_len_tgt_;
  int pad_id_;
};

// Truncates to max_len, keeping a trailing EOS when one was cut off.
std::vector<int> truncate_ids(const std::vector<int>& ids, int max_len);

}  // namespace deeppseudo
