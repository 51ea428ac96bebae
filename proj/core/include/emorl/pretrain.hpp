#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "emorl/checkpoint.hpp"
#include "emorl/corpus.hpp"

namespace emorl {

/// Vocabulary built from every prompt and response, plus seeded parameters.
Checkpoint bootstrap_checkpoint(std::span<const CorpusRecord> records, ModelConfig config, std::uint64_t seed,
                                std::size_t vocab_cap = Vocabulary::kDefaultCap);

struct PretrainConfig {
  std::size_t steps = 300;
  std::size_t batch_size = 8;
  double learning_rate = 3e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  std::uint64_t seed = 0;

  void validate() const;
};

struct PretrainReport {
  std::size_t steps = 0;
  std::vector<double> loss_curve;
  double wall_seconds = 0.0;
};

/// Teacher-forced next-token training of every base parameter on
/// prompt -> response pairs (response followed by the end token), using Adam.
/// Gives the frozen reference model something to say before RL fine-tuning.
PretrainReport pretrain(Checkpoint& checkpoint, std::span<const CorpusRecord> records, const PretrainConfig& config);

/// Mean per-token negative log-likelihood of the responses.
double supervised_loss(const Checkpoint& checkpoint, std::span<const CorpusRecord> records);

}  // namespace emorl
