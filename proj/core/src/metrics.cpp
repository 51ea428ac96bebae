#include "emorl/metrics.hpp"

#include <algorithm>
#include <set>
#include <utility>

#include "emorl/error.hpp"
#include "emorl/vocab.hpp"

namespace emorl {

double diversity2(std::span<const std::string> texts) {
  std::set<std::pair<std::string, std::string>> distinct;
  std::size_t total = 0;
  for (const auto& text : texts) {
    const auto tokens = split_words(text);
    for (std::size_t i = 0; i + 1 < tokens.size(); ++i) {
      distinct.emplace(tokens[i], tokens[i + 1]);
      ++total;
    }
  }
  require(total > 0, "diversity2 needs at least one text with two or more tokens");
  return static_cast<double>(distinct.size()) / static_cast<double>(total);
}

std::size_t token_edit_distance(std::span<const std::string> a, std::span<const std::string> b) {
  std::vector<std::size_t> prev(b.size() + 1), cur(b.size() + 1);
  for (std::size_t j = 0; j <= b.size(); ++j) prev[j] = j;
  for (std::size_t i = 1; i <= a.size(); ++i) {
    cur[0] = i;
    for (std::size_t j = 1; j <= b.size(); ++j) {
      const std::size_t sub = prev[j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1);
      cur[j] = std::min({prev[j] + 1, cur[j - 1] + 1, sub});
    }
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

double edit_rate(std::string_view prompt, std::string_view generation) {
  const auto a = split_words(prompt);
  const auto b = split_words(generation);
  require(!a.empty() && !b.empty(), "edit_rate needs two non-empty texts");
  return static_cast<double>(token_edit_distance(a, b)) / static_cast<double>(std::max(a.size(), b.size()));
}

}  // namespace emorl
