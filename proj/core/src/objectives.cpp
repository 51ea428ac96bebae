#include "emorl/objectives.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <set>

#include <json.hpp>

#include "emorl/error.hpp"

namespace emorl {

Preference Preference::uniform(std::size_t n) {
  require(n >= 1, "a preference needs at least one objective");
  return Preference{std::vector<double>(n, 1.0)};
}

void Preference::validate() const {
  require(!lambda.empty(), "empty preference");
  bool any_positive = false;
  for (double l : lambda) {
    require(std::isfinite(l) && l >= 0.0, "preference weights must be finite and non-negative, got ", l);
    any_positive = any_positive || l > 0.0;
  }
  require(any_positive, "preference weights are all zero");
}

double utility(std::span<const double> scores, const Preference& pref) {
  pref.validate();
  require(scores.size() == pref.lambda.size(), "utility: ", scores.size(), " scores for ", pref.lambda.size(),
          " preference weights");
  double num = 0.0, den = 0.0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    num += pref.lambda[i] * scores[i];
    den += pref.lambda[i];
  }
  return num / den;
}

// ---------------------------------------------------------------------------

double fluency_from_log_probs(std::span<const double> log_probs) {
  require(!log_probs.empty(), "fluency needs at least one token");
  double total = 0.0;
  for (double lp : log_probs) total += lp;
  const double perplexity = std::exp(-total / static_cast<double>(log_probs.size()));
  return std::clamp(1.0 / perplexity, 0.0, 1.0);
}

double score_fluency(const Model& reference, const Vocabulary& vocab, std::string_view prompt, std::string_view text) {
  std::vector<TokenId> out = vocab.tokenize(text);
  require(!out.empty(), "cannot score fluency of empty text");
  out.push_back(Vocabulary::kEnd);
  const ModelConfig& cfg = reference.config();
  if (out.size() > cfg.max_seq_len) out.resize(cfg.max_seq_len);
  const std::vector<TokenId> in = clamp_prompt(vocab.tokenize(prompt), cfg);
  return fluency_from_log_probs(reference.sequence_log_prob(in, out));
}

FluencyScorer::FluencyScorer(std::string name, std::shared_ptr<const Checkpoint> reference)
    : name_(std::move(name)), reference_(std::move(reference)), model_(reference_->config, reference_->params) {}

double FluencyScorer::score(std::string_view prompt, std::string_view text) const {
  if (split_words(text).empty()) return 0.0;
  return score_fluency(model_, reference_->vocab, prompt, text);
}

// ---------------------------------------------------------------------------

namespace {

const std::vector<std::string>& default_pronouns() {
  static const std::vector<std::string> words{"you", "your", "you're", "yours", "yourself", "you've", "you'd"};
  return words;
}

const std::set<std::string>& stopwords() {
  static const std::set<std::string> words{
      "a",    "an",   "the",  "i",    "me",   "my",    "we",    "our",  "it",   "its",  "is",   "am",
      "are",  "was",  "were", "be",   "been", "to",    "of",    "and",  "or",   "but",  "in",   "on",
      "at",   "for",  "with", "that", "this", "so",    "do",    "did",  "have", "has",  "had",  "not",
      "just", "he",   "she",  "they", "them", "his",   "her",   "as",   "by",   "from", "if",   "about",
      "what", "can",  "i'm",  "you",  "your", "don't", "really", "very", "all",  "up",   "out",  "there"};
  return words;
}

bool has_letter(const std::string& w) {
  return std::any_of(w.begin(), w.end(), [](char c) { return std::isalpha(static_cast<unsigned char>(c)) != 0; });
}

}  // namespace

double feature_component(const FeatureDetector& d, std::string_view prompt, std::string_view text) {
  const std::vector<std::string> tokens = split_words(text);
  const std::set<std::string> present(tokens.begin(), tokens.end());
  switch (d.kind) {
    case FeatureDetector::Kind::pronoun: {
      const auto& words = d.words.empty() ? default_pronouns() : d.words;
      for (const auto& w : words) {
        if (present.contains(w)) return 1.0;
      }
      return 0.0;
    }
    case FeatureDetector::Kind::overlap: {
      std::set<std::string> content;
      for (auto& w : split_words(prompt)) {
        if (has_letter(w) && !stopwords().contains(w)) content.insert(std::move(w));
      }
      if (content.empty()) return 0.0;
      std::size_t hit = 0;
      for (const auto& w : content) hit += present.contains(w) ? 1 : 0;
      return static_cast<double>(hit) / static_cast<double>(content.size());
    }
    case FeatureDetector::Kind::lexicon: {
      if (d.words.empty()) return 0.0;
      const std::set<std::string> lexicon(d.words.begin(), d.words.end());
      std::size_t hit = 0;
      for (const auto& w : lexicon) hit += present.contains(w) ? 1 : 0;
      return static_cast<double>(hit) / static_cast<double>(lexicon.size());
    }
    case FeatureDetector::Kind::length: {
      const auto n = std::min(tokens.size(), d.target);
      return static_cast<double>(n) / static_cast<double>(d.target);
    }
  }
  return 0.0;
}

void FeatureSpec::validate() const {
  require<FormatError>(!name.empty(), "feature scorer without a name");
  require<FormatError>(!detectors.empty(), "feature scorer '", name, "' has no detectors");
  double total = 0.0;
  for (const auto& d : detectors) {
    require<FormatError>(std::isfinite(d.weight) && d.weight >= 0.0, "scorer '", name,
                         "': detector weights must be non-negative");
    require<FormatError>(d.kind != FeatureDetector::Kind::length || d.target >= 1, "scorer '", name,
                         "': length target must be at least 1");
    total += d.weight;
  }
  require<FormatError>(combine != CombineRule::weighted_mean || total > 0.0, "scorer '", name,
                       "': detector weights sum to zero");
}

double score_feature(const FeatureSpec& spec, std::string_view prompt, std::string_view text) {
  spec.validate();
  double out = 0.0;
  switch (spec.combine) {
    case CombineRule::weighted_mean: {
      double num = 0.0, den = 0.0;
      for (const auto& d : spec.detectors) {
        num += d.weight * feature_component(d, prompt, text);
        den += d.weight;
      }
      out = num / den;
      break;
    }
    case CombineRule::min: {
      out = 1.0;
      for (const auto& d : spec.detectors) out = std::min(out, feature_component(d, prompt, text));
      break;
    }
    case CombineRule::product: {
      out = 1.0;
      for (const auto& d : spec.detectors) out *= feature_component(d, prompt, text);
      break;
    }
  }
  return std::clamp(out, 0.0, 1.0);
}

FeatureScorer::FeatureScorer(FeatureSpec spec) : spec_(std::move(spec)) { spec_.validate(); }

double FeatureScorer::score(std::string_view prompt, std::string_view text) const {
  return score_feature(spec_, prompt, text);
}

std::vector<FeatureSpec> parse_scorer_specs(const std::string& json_text) {
  using nlohmann::json;
  try {
    const json doc = json::parse(json_text);
    std::vector<FeatureSpec> out;
    for (const auto& s : doc.at("scorers")) {
      FeatureSpec spec;
      spec.name = s.at("name").get<std::string>();
      const std::string combine = s.value("combine", std::string("weighted_mean"));
      if (combine == "weighted_mean") {
        spec.combine = CombineRule::weighted_mean;
      } else if (combine == "min") {
        spec.combine = CombineRule::min;
      } else if (combine == "product") {
        spec.combine = CombineRule::product;
      } else {
        fail<FormatError>("scorer '", spec.name, "': unknown combine rule '", combine, "'");
      }
      for (const auto& d : s.at("detectors")) {
        FeatureDetector det;
        const std::string type = d.at("type").get<std::string>();
        if (type == "pronoun") {
          det.kind = FeatureDetector::Kind::pronoun;
        } else if (type == "overlap") {
          det.kind = FeatureDetector::Kind::overlap;
        } else if (type == "lexicon") {
          det.kind = FeatureDetector::Kind::lexicon;
        } else if (type == "length") {
          det.kind = FeatureDetector::Kind::length;
        } else {
          fail<FormatError>("scorer '", spec.name, "': unknown detector type '", type, "'");
        }
        det.weight = d.value("weight", 1.0);
        if (d.contains("words")) {
          for (const auto& w : d.at("words")) det.words.push_back(normalize_text(w.get<std::string>()));
        }
        det.target = d.value("target", std::size_t{10});
        spec.detectors.push_back(std::move(det));
      }
      spec.validate();
      out.push_back(std::move(spec));
    }
    return out;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed scorer spec: ") + e.what());
  }
}

std::vector<FeatureSpec> load_scorer_specs(const std::filesystem::path& path) {
  return parse_scorer_specs(read_text_file(path));
}

void ScorerRegistry::add(ScorerPtr scorer) {
  require(scorer != nullptr, "null scorer");
  const std::string name = scorer->name();
  require(scorers_.emplace(name, std::move(scorer)).second, "scorer '", name, "' registered twice");
}

ScorerPtr ScorerRegistry::get(const std::string& name) const {
  auto it = scorers_.find(name);
  require(it != scorers_.end(), "unknown scorer '", name, "'");
  return it->second;
}

std::vector<std::string> ScorerRegistry::names() const {
  std::vector<std::string> out;
  for (const auto& [name, s] : scorers_) out.push_back(name);
  return out;
}

ScorerRegistry ScorerRegistry::build(const std::vector<FeatureSpec>& specs,
                                     std::shared_ptr<const Checkpoint> reference) {
  ScorerRegistry reg;
  for (const auto& spec : specs) reg.add(std::make_shared<FeatureScorer>(spec));
  if (reference && !reg.contains("fluency")) {
    reg.add(std::make_shared<FluencyScorer>("fluency", std::move(reference)));
  }
  return reg;
}

}  // namespace emorl
