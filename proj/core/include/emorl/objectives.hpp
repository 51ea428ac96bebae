#pragma once

#include <filesystem>
#include <map>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "emorl/checkpoint.hpp"
#include "emorl/model.hpp"

namespace emorl {

/// Maps (prompt, generated text) to a reward in [0, 1]. Implementations are
/// pure and safe to call concurrently.
class Scorer {
 public:
  virtual ~Scorer() = default;
  virtual const std::string& name() const = 0;
  virtual double score(std::string_view prompt, std::string_view text) const = 0;
};

using ScorerPtr = std::shared_ptr<const Scorer>;

/// Non-negative per-objective weights with at least one positive entry.
struct Preference {
  std::vector<double> lambda;

  static Preference uniform(std::size_t n);
  void validate() const;
};

/// sum_i lambda_i * score_i / sum_i lambda_i.
double utility(std::span<const double> scores, const Preference& pref);

// -- fluency -----------------------------------------------------------------

/// min(1, 1 / perplexity) with perplexity = exp(-mean log-prob).
double fluency_from_log_probs(std::span<const double> log_probs);

/// Inverse perplexity of `text` given `prompt` under a frozen reference model.
double score_fluency(const Model& reference, const Vocabulary& vocab, std::string_view prompt, std::string_view text);

class FluencyScorer final : public Scorer {
 public:
  FluencyScorer(std::string name, std::shared_ptr<const Checkpoint> reference);
  const std::string& name() const override { return name_; }
  double score(std::string_view prompt, std::string_view text) const override;

 private:
  std::string name_;
  std::shared_ptr<const Checkpoint> reference_;
  Model model_;
};

// -- declarative feature scorers ---------------------------------------------

/// One detector of a feature scorer. Components are all in [0, 1]:
///   pronoun  1 if the text contains any of `words` (default: second person)
///   overlap  share of the prompt's content words (non-stopwords containing a
///            letter) that reappear in the text; 0 when there are none
///   lexicon  share of `words` that occur in the text; 0 for an empty lexicon
///   length   min(token count, target) / target
struct FeatureDetector {
  enum class Kind { pronoun, overlap, lexicon, length };
  Kind kind = Kind::lexicon;
  double weight = 1.0;
  std::vector<std::string> words;
  std::size_t target = 10;
};

enum class CombineRule { weighted_mean, min, product };

struct FeatureSpec {
  std::string name;
  CombineRule combine = CombineRule::weighted_mean;
  std::vector<FeatureDetector> detectors;

  void validate() const;
};

double feature_component(const FeatureDetector& detector, std::string_view prompt, std::string_view text);
double score_feature(const FeatureSpec& spec, std::string_view prompt, std::string_view text);

class FeatureScorer final : public Scorer {
 public:
  explicit FeatureScorer(FeatureSpec spec);
  const std::string& name() const override { return spec_.name; }
  double score(std::string_view prompt, std::string_view text) const override;
  const FeatureSpec& spec() const noexcept { return spec_; }

 private:
  FeatureSpec spec_;
};

/// Parses {"scorers": [{"name", "combine", "detectors": [{"type", ...}]}]}.
std::vector<FeatureSpec> parse_scorer_specs(const std::string& json_text);
std::vector<FeatureSpec> load_scorer_specs(const std::filesystem::path& path);

/// Name -> scorer lookup used by experiment configs.
class ScorerRegistry {
 public:
  void add(ScorerPtr scorer);
  ScorerPtr get(const std::string& name) const;
  bool contains(const std::string& name) const { return scorers_.contains(name); }
  std::vector<std::string> names() const;

  /// Feature scorers from `specs`, plus "fluency" bound to `reference` when given.
  static ScorerRegistry build(const std::vector<FeatureSpec>& specs, std::shared_ptr<const Checkpoint> reference);

 private:
  std::map<std::string, ScorerPtr> scorers_;
};

}  // namespace emorl
