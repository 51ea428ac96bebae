#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "emorl/autograd.hpp"
#include "emorl/tensor.hpp"
#include "emorl/vocab.hpp"

namespace emorl {

/// Extents of the encoder-decoder transformer.
struct ModelConfig {
  std::size_t vocab_size = 0;
  std::size_t d_model = 64;
  std::size_t n_heads = 4;
  std::size_t n_enc_layers = 2;
  std::size_t n_dec_layers = 2;
  std::size_t d_ff = 128;
  std::size_t max_seq_len = 64;

  void validate() const;
  /// Everything except vocab_size, which is known only once a vocabulary exists.
  void validate_shape() const;

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

/// Named parameters. Tensors are shared and never mutated in place, so a
/// store can be copied cheaply and handed to concurrent readers.
using ParamStore = std::map<std::string, TensorPtr>;

/// Every parameter name the config requires, with its shape.
std::map<std::string, Shape> parameter_shapes(const ModelConfig& config);

/// Throws if a required parameter is missing or has the wrong shape.
void validate_params(const ModelConfig& config, const ParamStore& params);

/// Seeded random initialisation of all parameters.
ParamStore init_params(const ModelConfig& config, std::uint64_t seed);

/// Attention query/value projections in every encoder and decoder layer.
std::vector<std::string> attention_qv_names(const ModelConfig& config);

/// Parameters placed on a tape for one forward computation. Base weights go
/// on as constants; callers may override individual names with composed
/// Vars (for example a LoRA-adapted projection that carries gradients).
class BoundParams {
 public:
  BoundParams(Tape& tape, const ParamStore& params);

  void set(const std::string& name, Var value);
  Var operator()(const std::string& name) const;
  Tape& tape() const { return *tape_; }

 private:
  Tape* tape_;
  std::unordered_map<std::string, Var> vars_;
};

/// Tape-level forward passes shared by inference and training.
namespace forward {

/// Encoder output states, [len x d_model].
Var encode(const ModelConfig& config, const BoundParams& params, std::span<const TokenId> ids);

/// Final (post layer-norm) decoder states for every prefix position,
/// [len x d_model].
Var decode(const ModelConfig& config, const BoundParams& params, const Var& encoder_states,
           std::span<const TokenId> prefix);

/// Bias-free projection of hidden states onto the vocabulary.
Var lm_head(const BoundParams& params, const Var& hidden);

}  // namespace forward

/// Inference view over a fixed parameter set.
class Model {
 public:
  Model(ModelConfig config, ParamStore params);

  const ModelConfig& config() const noexcept { return config_; }
  const ParamStore& params() const noexcept { return params_; }

  /// Encoder states [len x d_model] for a non-empty prompt.
  Tensor encode(std::span<const TokenId> prompt) const;

  /// Last-layer decoder hidden state at the final prefix position, [d_model].
  /// The prefix must start with the begin token.
  Tensor decode_step(const Tensor& encoder_states, std::span<const TokenId> prefix) const;

  /// Logits [vocab] for a hidden vector [d_model].
  Tensor lm_head(const Tensor& hidden) const;

  /// Argmax decoding (ties to the lowest id). The returned ids include the
  /// end token when one was produced. The prefix never exceeds max_seq_len.
  std::vector<TokenId> greedy_generate(std::span<const TokenId> prompt, std::size_t max_new) const;

  /// Temperature sampling, reproducible for a fixed seed.
  std::vector<TokenId> sample_generate(std::span<const TokenId> prompt, std::size_t max_new, double temperature,
                                       std::uint64_t seed) const;

  /// log p(output[t] | prompt, output[<t]) for each t.
  std::vector<double> sequence_log_prob(std::span<const TokenId> prompt, std::span<const TokenId> output) const;

 private:
  ModelConfig config_;
  ParamStore params_;
};

/// Index of the largest value; ties go to the lowest index.
std::size_t argmax(std::span<const double> values);

/// Prompt ids truncated to what the encoder accepts.
std::vector<TokenId> clamp_prompt(std::vector<TokenId> ids, const ModelConfig& config);

}  // namespace emorl
