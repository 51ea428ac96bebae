#include "emorl/corpus.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include <json.hpp>

#include "emorl/checkpoint.hpp"
#include "emorl/error.hpp"
#include "emorl/rng.hpp"
#include "emorl/vocab.hpp"

namespace emorl {

void SplitRatios::validate() const {
  for (double r : {fine_tune, aggregation, inference}) {
    require(std::isfinite(r) && r >= 0.0 && r <= 1.0, "split ratios must lie in [0, 1], got ", r);
  }
  const double total = fine_tune + aggregation + inference;
  require(std::abs(total - 1.0) < 1e-9, "split ratios must sum to 1, got ", total);
}

std::vector<CorpusRecord> parse_corpus(const std::string& text) {
  std::vector<CorpusRecord> out;
  std::istringstream in(text);
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.find_first_not_of(" \t") == std::string::npos) continue;
    CorpusRecord rec;
    try {
      const auto doc = nlohmann::json::parse(line);
      rec.prompt = doc.at("prompt").get<std::string>();
      rec.response = doc.at("response").get<std::string>();
    } catch (const nlohmann::json::exception& e) {
      fail<FormatError>("corpus line ", line_no, ": ", e.what());
    }
    require<FormatError>(!normalize_text(rec.prompt).empty(), "corpus line ", line_no, ": empty prompt");
    require<FormatError>(!normalize_text(rec.response).empty(), "corpus line ", line_no, ": empty response");
    out.push_back(std::move(rec));
  }
  return out;
}

std::vector<CorpusRecord> load_corpus(const std::filesystem::path& path) { return parse_corpus(read_text_file(path)); }

std::string corpus_to_jsonl(std::span<const CorpusRecord> records) {
  std::string out;
  for (const auto& r : records) out += nlohmann::json{{"prompt", r.prompt}, {"response", r.response}}.dump() + "\n";
  return out;
}

namespace {

std::size_t word_count(const std::string& s) {
  std::istringstream in(s);
  std::size_t n = 0;
  for (std::string w; in >> w;) ++n;
  return n;
}

}  // namespace

CorpusStats corpus_stats(std::span<const CorpusRecord> records) {
  CorpusStats stats;
  stats.records = records.size();
  if (records.empty()) return stats;
  std::size_t words = 0;
  for (const auto& r : records) words += word_count(r.prompt) + word_count(r.response);
  stats.avg_words = static_cast<double>(words) / static_cast<double>(records.size());
  return stats;
}

CorpusSplits split_corpus(std::vector<CorpusRecord> records, const SplitRatios& ratios, std::uint64_t seed) {
  ratios.validate();
  require(!records.empty(), "corpus is empty");
  CorpusSplits out;
  out.stats = corpus_stats(records);

  Rng rng(seed);
  for (std::size_t i = records.size(); i > 1; --i) {
    const auto j = static_cast<std::size_t>(rng.below(i));
    std::swap(records[i - 1], records[j]);
  }
  const std::size_t n = records.size();
  const auto n_ft = std::min(n, static_cast<std::size_t>(std::llround(static_cast<double>(n) * ratios.fine_tune)));
  const auto n_agg =
      std::min(n - n_ft, static_cast<std::size_t>(std::llround(static_cast<double>(n) * ratios.aggregation)));
  auto it = std::make_move_iterator(records.begin());
  out.fine_tune.assign(it, it + static_cast<std::ptrdiff_t>(n_ft));
  out.aggregation.assign(it + static_cast<std::ptrdiff_t>(n_ft), it + static_cast<std::ptrdiff_t>(n_ft + n_agg));
  out.inference.assign(it + static_cast<std::ptrdiff_t>(n_ft + n_agg), std::make_move_iterator(records.end()));
  return out;
}

CorpusSplits ingest(const std::filesystem::path& path, const SplitRatios& ratios, std::uint64_t seed) {
  auto records = load_corpus(path);
  require<FormatError>(!records.empty(), "corpus ", path.string(), " has no records");
  return split_corpus(std::move(records), ratios, seed);
}

std::vector<std::string> prompts_of(std::span<const CorpusRecord> records) {
  std::vector<std::string> out;
  out.reserve(records.size());
  for (const auto& r : records) out.push_back(r.prompt);
  return out;
}

}  // namespace emorl
