#pragma once

#include <cstddef>
#include <filesystem>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "emorl/checkpoint.hpp"
#include "emorl/lora.hpp"
#include "emorl/model.hpp"

namespace emorl {

/// Where the objective-specific models are combined.
enum class Strategy { hidden, logit, parameter };

std::string_view to_string(Strategy s);
Strategy parse_strategy(std::string_view name);

/// How the logit strategy mixes member outputs. `logits` weights the raw
/// pre-softmax vectors; `probabilities` weights the softmax outputs.
enum class LogitSpace { logits, probabilities };

/// One weight per member, each in [0, 1]. The weights need not sum to 1.
struct EnsembleWeights {
  std::vector<double> w;
  Strategy strategy = Strategy::hidden;

  void validate() const;
  static EnsembleWeights one_hot(std::size_t size, std::size_t index, Strategy strategy);
};

/// f = sum_i w_i * f_i over last-layer decoder states.
Tensor aggregate_hidden(std::span<const Tensor> states, const EnsembleWeights& weights);

/// Weighted sum of member logit vectors (or of their softmax outputs).
Tensor aggregate_logits(std::span<const Tensor> logits, const EnsembleWeights& weights,
                        LogitSpace space = LogitSpace::logits);

/// Standalone checkpoint with theta = theta0 + sum_i (B_i A_i) alpha_i w_i.
Checkpoint merge_parameters(const Checkpoint& base, std::span<const LoraAdapter> adapters,
                            const EnsembleWeights& weights);

/// A frozen base model plus one adapter per objective.
class Ensemble {
 public:
  Ensemble(std::shared_ptr<const Checkpoint> base, std::vector<LoraAdapter> adapters,
           std::vector<std::string> objectives);

  std::size_t size() const noexcept { return adapters_.size(); }
  const Checkpoint& base() const noexcept { return *base_; }
  const std::vector<LoraAdapter>& adapters() const noexcept { return adapters_; }
  const std::vector<std::string>& objectives() const noexcept { return objectives_; }

  /// Base model with adapter i applied at weight 1.
  const Model& member(std::size_t i) const { return members_.at(i); }
  const Model& base_model() const noexcept { return base_model_; }

  /// Token-by-token argmax decoding. Every member sees the same committed
  /// prefix at every step. Output includes the end token if produced.
  std::vector<TokenId> generate(const EnsembleWeights& weights, std::span<const TokenId> prompt, std::size_t max_new,
                                LogitSpace space = LogitSpace::logits) const;

 private:
  std::shared_ptr<const Checkpoint> base_;
  std::vector<LoraAdapter> adapters_;
  std::vector<std::string> objectives_;
  Model base_model_;
  std::vector<Model> members_;
};

/// Lists what an ensemble is assembled from. Relative paths resolve against
/// the manifest's directory.
struct EnsembleManifest {
  std::filesystem::path base;
  std::vector<std::filesystem::path> adapters;
  std::vector<std::string> objectives;
  Strategy strategy = Strategy::hidden;
};

std::string ensemble_manifest_to_json(const EnsembleManifest& manifest);
EnsembleManifest ensemble_manifest_from_json(const std::string& text);
void save_ensemble_manifest(const EnsembleManifest& manifest, const std::filesystem::path& path);
EnsembleManifest load_ensemble_manifest(const std::filesystem::path& path);
Ensemble load_ensemble(const std::filesystem::path& manifest_path);

}  // namespace emorl
