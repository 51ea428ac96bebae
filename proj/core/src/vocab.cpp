#include "emorl/vocab.hpp"

#include <algorithm>
#include <cctype>
#include <map>

#include "emorl/error.hpp"

namespace emorl {
namespace {

const char* const kReservedTokens[] = {"<pad>", "<unk>", "<s>", "</s>"};

bool is_word_char(unsigned char c) { return std::isalnum(c) != 0 || c == '\'' || c >= 0x80; }

}  // namespace

std::vector<std::string> split_words(std::string_view text) {
  std::vector<std::string> out;
  std::string word;
  auto flush = [&] {
    if (!word.empty()) {
      out.push_back(std::move(word));
      word.clear();
    }
  };
  for (char ch : text) {
    const auto c = static_cast<unsigned char>(ch);
    if (std::isspace(c) != 0) {
      flush();
    } else if (is_word_char(c)) {
      word.push_back(c < 0x80 ? static_cast<char>(std::tolower(c)) : ch);
    } else {
      flush();
      out.emplace_back(1, ch);
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

Vocabulary Vocabulary::build(std::span<const std::string> corpus, std::size_t cap) {
  require(!corpus.empty(), "cannot build a vocabulary from an empty corpus");
  require(cap > kReserved, "vocabulary cap must exceed the ", kReserved, " reserved tokens");
  std::map<std::string, std::size_t> counts;
  for (const auto& text : corpus) {
    for (auto& w : split_words(text)) ++counts[std::move(w)];
  }
  std::vector<std::pair<std::string, std::size_t>> ranked(counts.begin(), counts.end());
  std::stable_sort(ranked.begin(), ranked.end(),
                   [](const auto& a, const auto& b) { return a.second > b.second; });

  std::vector<std::string> tokens(std::begin(kReservedTokens), std::end(kReservedTokens));
  for (const auto& [word, count] : ranked) {
    if (tokens.size() >= cap) break;
    if (std::find(std::begin(kReservedTokens), std::end(kReservedTokens), word) != std::end(kReservedTokens))
      continue;
    tokens.push_back(word);
  }
  return from_tokens(std::move(tokens));
}

Vocabulary Vocabulary::from_tokens(std::vector<std::string> tokens) {
  require<FormatError>(tokens.size() >= kReserved, "vocabulary needs the reserved tokens");
  for (std::size_t i = 0; i < kReserved; ++i) {
    require<FormatError>(tokens[i] == kReservedTokens[i], "reserved token ", i, " must be ", kReservedTokens[i],
                         ", found ", tokens[i]);
  }
  Vocabulary v;
  v.tokens_ = std::move(tokens);
  for (std::size_t i = 0; i < v.tokens_.size(); ++i) {
    const bool fresh = v.index_.emplace(v.tokens_[i], static_cast<TokenId>(i)).second;
    require<FormatError>(fresh, "duplicate vocabulary token '", v.tokens_[i], "'");
  }
  return v;
}

TokenId Vocabulary::id(std::string_view word) const {
  auto it = index_.find(std::string(word));
  return it == index_.end() ? kUnknown : it->second;
}

bool Vocabulary::contains(std::string_view word) const { return index_.contains(std::string(word)); }

const std::string& Vocabulary::token(TokenId id) const {
  require(id >= 0 && static_cast<std::size_t>(id) < tokens_.size(), "token id ", id, " out of range [0, ",
          tokens_.size(), ")");
  return tokens_[static_cast<std::size_t>(id)];
}

std::vector<TokenId> Vocabulary::tokenize(std::string_view text) const {
  std::vector<TokenId> ids;
  for (const auto& w : split_words(text)) ids.push_back(id(w));
  return ids;
}

std::string Vocabulary::detokenize(std::span<const TokenId> ids) const {
  std::string out;
  for (TokenId id : ids) {
    if (id != kUnknown && is_reserved(id)) continue;
    if (!out.empty()) out.push_back(' ');
    out += token(id);
  }
  return out;
}

}  // namespace emorl
