#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace lami {

using TokenId = std::size_t;
using Tokens = std::vector<TokenId>;

/// Word-level vocabulary with reserved ids PAD=0, BOS=1, UNK=2.
class Vocabulary {
 public:
  static constexpr TokenId kPad = 0;
  static constexpr TokenId kBos = 1;
  static constexpr TokenId kUnk = 2;
  static constexpr std::size_t kMaxSize = 512;

  Vocabulary();
  /// Reserved ids followed by `words` in the given order.
  explicit Vocabulary(const std::vector<std::string>& words);
  /// Every distinct word of the sentences, sorted.
  static Vocabulary build(std::span<const std::string> sentences);

  TokenId id(std::string_view word) const;
  bool contains(std::string_view word) const;
  const std::string& word(TokenId id) const;
  std::size_t size() const noexcept { return words_.size(); }
  /// All words including the reserved ones, in id order.
  const std::vector<std::string>& words() const noexcept { return words_; }

 private:
  void add(const std::string& word);

  std::vector<std::string> words_;
  std::unordered_map<std::string, TokenId> ids_;
};

/// Lowercases and splits on whitespace; punctuation characters become words.
std::vector<std::string> split_words(std::string_view text);
/// split_words joined by single spaces.
std::string normalize_text(std::string_view text);

/// BOS followed by one id per word; unknown words map to UNK.
Tokens tokenize(std::string_view text, const Vocabulary& vocab);
/// Word ids without BOS.
Tokens encode_words(std::string_view text, const Vocabulary& vocab);
/// Space-joined words, skipping PAD and BOS.
std::string detokenize(std::span<const TokenId> tokens, const Vocabulary& vocab);

}  // namespace lami
