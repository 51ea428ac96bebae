#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace emorl {

using TokenId = int;

/// Lowercased word-level split. Runs of letters, digits and apostrophes form
/// words; every other non-space character is a token of its own.
std::vector<std::string> split_words(std::string_view text);

/// split_words joined by single spaces.
std::string normalize_text(std::string_view text);

class Vocabulary {
 public:
  static constexpr TokenId kPad = 0;
  static constexpr TokenId kUnknown = 1;
  static constexpr TokenId kBegin = 2;
  static constexpr TokenId kEnd = 3;
  static constexpr std::size_t kReserved = 4;
  static constexpr std::size_t kDefaultCap = 2048;

  /// Most frequent words first (ties broken alphabetically), truncated so the
  /// total size including reserved ids is at most `cap`.
  static Vocabulary build(std::span<const std::string> corpus, std::size_t cap = kDefaultCap);

  /// Rebuilds from a full token list whose first entries are the reserved ids.
  static Vocabulary from_tokens(std::vector<std::string> tokens);

  std::size_t size() const noexcept { return tokens_.size(); }
  const std::vector<std::string>& tokens() const noexcept { return tokens_; }

  TokenId id(std::string_view word) const;
  const std::string& token(TokenId id) const;
  bool contains(std::string_view word) const;

  std::vector<TokenId> tokenize(std::string_view text) const;
  /// Joins non-reserved tokens with spaces.
  std::string detokenize(std::span<const TokenId> ids) const;

  static bool is_reserved(TokenId id) noexcept { return id >= 0 && id < static_cast<TokenId>(kReserved); }

  friend bool operator==(const Vocabulary& a, const Vocabulary& b) { return a.tokens_ == b.tokens_; }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, TokenId> index_;
};

}  // namespace emorl
