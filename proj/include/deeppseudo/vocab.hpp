#pragma once
// Token <-> id mapping with reserved specials and a frequency cutoff.

#include <array>
#include <string>
#include <unordered_map>
#include <vector>

namespace deeppseudo {

// Reserved ids, fixed in this order.
enum SpecialToken : int {
  kPadId = 0,
  kSosId = 1,
  kEosId = 2,
  kUnkId = 3,
  kNumId = 4,
  kStrId = 5,
};

inline constexpr int kSpecialCount = 6;

inline const std::array<const char*, kSpecialCount>& special_surfaces() {
  static const std::array<const char*, kSpecialCount> s = {"<PAD>", "<SOS>", "<EOS>",
                                                           "<UNK>", "<NUM>", "<STR>"};
  return s;
}

class Vocabulary {
 public:
  // Specials only.
  Vocabulary();

  // Built from the training split only. Non-special tokens are kept when they
  // occur at least min_frequency times; ids run dense after the specials,
  // ordered by descending frequency with lexicographic tie-break.
  static Vocabulary build(const std::vector<std::vector<std::string>>& sequences,
                          int min_frequency = 2);

  int size() const { return static_cast<int>(id_to_token_.size()); }

  // UNK id for unknown tokens.
  int id(const std::string& token) const;
  const std::string& token(int id) const;
  bool contains(const std::string& token) const;

  std::vector<int> encode(const std::vector<std::string>& tokens, bool add_sos_eos) const;
  // Strips PAD/SOS/EOS; inverse of encode on in-vocabulary tokens.
  std::vector<std::string> decode(const std::vector<int>& ids) const;

  // One token per line; the line number is the id.
  void save(const std::string& path) const;
  static Vocabulary load(const std::string& path);

  std::string to_block() const;
  static Vocabulary from_block(const std::string& block);

 private:
  std::vector<std::string> id_to_token_;
  std::unordered_map<std::string, int> token_to_id_;
};

}  // namespace deeppseudo
