#pragma once

#include <cctype>
#include <cstddef>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace redan {

// Malformed or inconsistent input files.
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Lowercases, splits punctuation into standalone tokens, then splits on
// whitespace. "It's red." -> {"it", "'", "s", "red", "."}
inline std::vector<std::string> tokenize(std::string_view text) {
  std::vector<std::string> out;
  std::string cur;
  auto flush = [&] {
    if (!cur.empty()) out.push_back(std::move(cur));
    cur.clear();
  };
  for (char raw : text) {
    auto ch = static_cast<unsigned char>(raw);
    if (std::isspace(ch)) {
      flush();
    } else if (std::ispunct(ch)) {
      flush();
      out.emplace_back(1, raw);
    } else {
      cur.push_back(static_cast<char>(std::tolower(ch)));
    }
  }
  flush();
  return out;
}

class Vocabulary {
 public:
  static constexpr std::size_t kPad = 0;
  static constexpr std::size_t kUnk = 1;
  static constexpr std::size_t kBos = 2;
  static constexpr std::size_t kEos = 3;
  static constexpr std::size_t kQa = 4;
  static constexpr std::size_t kNumSpecials = 5;

  Vocabulary() : Vocabulary(std::vector<std::string>{}) {}

  // Words with count >= min_count, in first-occurrence order after specials.
  static Vocabulary build(const std::vector<std::vector<std::string>>& corpus,
                          std::size_t min_count) {
    if (min_count < 1) throw std::invalid_argument("build_vocabulary: min_count must be >= 1");
    bool any = false;
    std::unordered_map<std::string, std::size_t> counts;
    std::vector<std::string> order;
    for (const auto& stream : corpus)
      for (const auto& w : stream) {
        any = true;
        if (counts[w]++ == 0) order.push_back(w);
      }
    if (!any) throw std::invalid_argument("build_vocabulary: empty corpus");
    std::vector<std::string> words;
    for (const auto& w : order)
      if (counts[w] >= min_count && !is_special(w)) words.push_back(w);
    return Vocabulary(std::move(words));
  }

  // Rebuilds from a stored word list (specials first, as returned by words()).
  static Vocabulary from_words(const std::vector<std::string>& all) {
    if (all.size() < kNumSpecials)
      throw DataError("vocabulary: stored word list lacks special tokens");
    for (std::size_t i = 0; i < kNumSpecials; ++i)
      if (all[i] != specials()[i]) throw DataError("vocabulary: special token order mismatch");
    return Vocabulary(std::vector<std::string>(all.begin() + kNumSpecials, all.end()));
  }

  static const std::vector<std::string>& specials() {
    static const std::vector<std::string> s{"<PAD>", "<UNK>", "<BOS>", "<EOS>", "<QA>"};
    return s;
  }

  std::size_t size() const { return words_.size(); }
  const std::vector<std::string>& words() const { return words_; }
  const std::string& word(std::size_t id) const { return words_.at(id); }

  bool contains(std::string_view w) const { return ids_.count(std::string(w)) != 0; }

  std::size_t id(std::string_view w) const {
    auto it = ids_.find(std::string(w));
    return it == ids_.end() ? kUnk : it->second;
  }

  std::vector<std::size_t> encode(const std::vector<std::string>& tokens) const {
    std::vector<std::size_t> out;
    out.reserve(tokens.size());
    for (const auto& t : tokens) out.push_back(id(t));
    return out;
  }

  std::string decode(const std::vector<std::size_t>& ids) const {
    std::string out;
    for (auto i : ids) {
      if (!out.empty()) out += ' ';
      out += i < words_.size() ? words_[i] : "<UNK>";
    }
    return out;
  }

  friend bool operator==(const Vocabulary& a, const Vocabulary& b) {
    return a.words_ == b.words_;
  }

 private:
  explicit Vocabulary(std::vector<std::string> regular) {
    words_ = specials();
    words_.insert(words_.end(), regular.begin(), regular.end());
    for (std::size_t i = 0; i < words_.size(); ++i) ids_.emplace(words_[i], i);
  }

  static bool is_special(const std::string& w) {
    for (const auto& s : specials())
      if (s == w) return true;
    return false;
  }

  std::vector<std::string> words_;
  std::unordered_map<std::string, std::size_t> ids_;
};

}  // namespace redan
