#pragma once

#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace emorl {

/// Distinct bigrams over total bigrams, pooled across every text. Texts are
/// split with split_words. Throws when no text has two or more tokens.
double diversity2(std::span<const std::string> texts);

/// Token-level Levenshtein distance.
std::size_t token_edit_distance(std::span<const std::string> a, std::span<const std::string> b);

/// Token Levenshtein distance divided by the longer token count. 0 means the
/// generation copies the prompt verbatim.
double edit_rate(std::string_view prompt, std::string_view generation);

}  // namespace emorl
