#include "lami/vocab.hpp"

#include <algorithm>
#include <cctype>
#include <set>

#include "lami/errors.hpp"

namespace lami {
namespace {

bool is_punct_word(char c) {
  return c == '?' || c == '.' || c == ',' || c == ':' || c == ';' || c == '!';
}

}  // namespace

Vocabulary::Vocabulary() {
  add("<pad>");
  add("<bos>");
  add("<unk>");
}

Vocabulary::Vocabulary(const std::vector<std::string>& words) : Vocabulary() {
  for (const auto& w : words) {
    if (contains(w)) throw ArgumentError("duplicate vocabulary word '" + w + "'");
    add(w);
  }
}

Vocabulary Vocabulary::build(std::span<const std::string> sentences) {
  std::set<std::string> words;
  for (const auto& s : sentences)
    for (auto& w : split_words(s)) words.insert(std::move(w));
  return Vocabulary(std::vector<std::string>(words.begin(), words.end()));
}

void Vocabulary::add(const std::string& word) {
  if (words_.size() >= kMaxSize) {
    throw ArgumentError("vocabulary exceeds " + std::to_string(kMaxSize) + " words");
  }
  ids_.emplace(word, words_.size());
  words_.push_back(word);
}

TokenId Vocabulary::id(std::string_view word) const {
  auto it = ids_.find(std::string(word));
  return it == ids_.end() ? kUnk : it->second;
}

bool Vocabulary::contains(std::string_view word) const {
  return ids_.count(std::string(word)) > 0;
}

const std::string& Vocabulary::word(TokenId id) const {
  if (id >= words_.size()) throw IndexError("token id " + std::to_string(id) + " out of range");
  return words_[id];
}

std::vector<std::string> split_words(std::string_view text) {
  std::vector<std::string> out;
  std::string cur;
  auto flush = [&] {
    if (!cur.empty()) out.push_back(std::move(cur));
    cur.clear();
  };
  for (char c : text) {
    if (std::isspace(static_cast<unsigned char>(c))) {
      flush();
    } else if (is_punct_word(c)) {
      flush();
      out.emplace_back(1, c);
    } else {
      cur.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
    }
  }
  flush();
  return out;
}

std::string normalize_text(std::string_view text) {
  std::string out;
  for (const auto& w : split_words(text)) {
    if (!out.empty()) out.push_back(' ');
    out += w;
  }
  return out;
}

Tokens tokenize(std::string_view text, const Vocabulary& vocab) {
  Tokens out{Vocabulary::kBos};
  for (const auto& w : split_words(text)) out.push_back(vocab.id(w));
  return out;
}

Tokens encode_words(std::string_view text, const Vocabulary& vocab) {
  Tokens out;
  for (const auto& w : split_words(text)) out.push_back(vocab.id(w));
  return out;
}

std::string detokenize(std::span<const TokenId> tokens, const Vocabulary& vocab) {
  std::string out;
  for (auto t : tokens) {
    if (t == Vocabulary::kPad || t == Vocabulary::kBos) continue;
    if (!out.empty()) out.push_back(' ');
    out += vocab.word(t);
  }
  return out;
}

}  // namespace lami
