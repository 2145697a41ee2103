#include "deeppseudo/vocab.hpp"

#include <algorithm>
#include <fstream>
#include <map>
#include <sstream>

#include "deeppseudo/tensor.hpp"

namespace deeppseudo {

Vocabulary::Vocabulary() {
  for (int i = 0; i < kSpecialCount; ++i) {
    id_to_token_.emplace_back(special_surfaces()[static_cast<std::size_t>(i)]);
    token_to_id_.emplace(id_to_token_.back(), i);
  }
}

Vocabulary Vocabulary::build(const std::vector<std::vector<std::string>>& sequences,
                             int min_frequency) {
  if (sequences.empty()) throw DataError("build_vocab: no input sequences");
  // std::map keeps the tie-break lexicographic for free.
  std::map<std::string, std::int64_t> freq;
  for (const auto& seq : sequences)
    for (const auto& tok : seq) ++freq[tok];
  for (const auto* s : special_surfaces()) freq.erase(s);

  std::vector<std::pair<std::string, std::int64_t>> kept;
  kept.reserve(freq.size());
  for (auto& [tok, n] : freq)
    if (n >= min_frequency) kept.emplace_back(tok, n);
  std::stable_sort(kept.begin(), kept.end(),
                   [](const auto& a, const auto& b) { return a.second > b.second; });

  Vocabulary v;
  for (auto& [tok, n] : kept) {
    (void)n;
    v.token_to_id_.emplace(tok, static_cast<int>(v.id_to_token_.size()));
    v.id_to_token_.push_back(tok);
  }
  return v;
}

int Vocabulary::id(const std::string& token) const {
  auto it = token_to_id_.find(token);
  return it == token_to_id_.end() ? kUnkId : it->second;
}

const std::string& Vocabulary::token(int id) const {
  if (id < 0 || id >= size()) {
    throw IndexError("vocabulary: id " + std::to_string(id) + " out of range for size " +
                     std::to_string(size()));
  }
  return id_to_token_[static_cast<std::size_t>(id)];
}

bool Vocabulary::contains(const std::string& token) const {
  return token_to_id_.count(token) > 0;
}

std::vector<int> Vocabulary::encode(const std::vector<std::string>& tokens,
                                    bool add_sos_eos) const {
  std::vector<int> ids;
  ids.reserve(tokens.size() + 2);
  if (add_sos_eos) ids.push_back(kSosId);
  for (const auto& t : tokens) ids.push_back(id(t));
  if (add_sos_eos) ids.push_back(kEosId);
  return ids;
}

std::vector<std::string> Vocabulary::decode(const std::vector<int>& ids) const {
  std::vector<std::string> out;
  out.reserve(ids.size());
  for (int i : ids) {
    if (i == kPadId || i == kSosId || i == kEosId) continue;
    out.push_back(token(i));
  }
  return out;
}

void Vocabulary::save(const std::string& path) const {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot write vocabulary file: " + path);
  f << to_block();
}

Vocabulary Vocabulary::load(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot read vocabulary file: " + path);
  std::ostringstream ss;
  ss << f.rdbuf();
  return from_block(ss.str());
}

std::string Vocabulary::to_block() const {
  std::ostringstream ss;
  for (const auto& t : id_to_token_) ss << t << '\n';
  return ss.str();
}

Vocabulary Vocabulary::from_block(const std::string& block) {
  Vocabulary v;
  v.id_to_token_.clear();
  v.token_to_id_.clear();
  std::istringstream ss(block);
  std::string line;
  while (std::getline(ss, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    v.token_to_id_.emplace(line, static_cast<int>(v.id_to_token_.size()));
    v.id_to_token_.push_back(line);
  }
  if (v.size() < kSpecialCount) throw DataError("vocabulary block missing special tokens");
  for (int i = 0; i < kSpecialCount; ++i) {
    if (v.id_to_token_[static_cast<std::size_t>(i)] != special_surfaces()[static_cast<std::size_t>(i)]) {
      throw DataError("vocabulary block has wrong special token order at id " + std::to_string(i));
    }
  }
  return v;
}

}  // namespace deeppseudo
