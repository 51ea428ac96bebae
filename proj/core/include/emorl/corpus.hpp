#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace emorl {

/// One single-turn exchange.
struct CorpusRecord {
  std::string prompt;
  std::string response;
  friend bool operator==(const CorpusRecord&, const CorpusRecord&) = default;
};

struct CorpusStats {
  std::size_t records = 0;
  /// Whitespace-delimited words in prompt plus response, averaged over records.
  double avg_words = 0.0;
};

struct SplitRatios {
  double fine_tune = 0.8;
  double aggregation = 0.1;
  double inference = 0.1;

  void validate() const;
};

struct CorpusSplits {
  std::vector<CorpusRecord> fine_tune;
  std::vector<CorpusRecord> aggregation;
  std::vector<CorpusRecord> inference;
  CorpusStats stats;
};

/// Line-delimited JSON objects with string fields "prompt" and "response".
/// Blank lines are skipped; anything else that does not parse, or leaves a
/// field empty after normalisation, raises FormatError naming the line.
std::vector<CorpusRecord> parse_corpus(const std::string& text);
std::vector<CorpusRecord> load_corpus(const std::filesystem::path& path);
std::string corpus_to_jsonl(std::span<const CorpusRecord> records);

CorpusStats corpus_stats(std::span<const CorpusRecord> records);

/// Seeded shuffle, then sizes round(n * fine_tune), round(n * aggregation)
/// and the remainder.
CorpusSplits split_corpus(std::vector<CorpusRecord> records, const SplitRatios& ratios, std::uint64_t seed);

/// load_corpus + split_corpus; stats cover the whole corpus.
CorpusSplits ingest(const std::filesystem::path& path, const SplitRatios& ratios, std::uint64_t seed);

std::vector<std::string> prompts_of(std::span<const CorpusRecord> records);

}  // namespace emorl
