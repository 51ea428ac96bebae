#include "emorl/lora.hpp"

#include <algorithm>

#include "emorl/error.hpp"
#include "emorl/rng.hpp"

namespace emorl {

std::string lora_a_name(const std::string& target) { return target + ".lora_a"; }
std::string lora_b_name(const std::string& target) { return target + ".lora_b"; }

LoraAdapter init_lora(const ParamStore& base, const std::vector<std::string>& targets, std::size_t rank, double alpha,
                      std::uint64_t seed) {
  Rng rng(seed);
  LoraAdapter adapter;
  adapter.rank = rank;
  adapter.alpha = alpha;
  std::vector<std::string> sorted = targets;
  std::sort(sorted.begin(), sorted.end());
  for (const auto& name : sorted) {
    auto it = base.find(name);
    require(it != base.end(), "LoRA target '", name, "' is not a base parameter");
    require<ShapeError>(it->second->rank() == 2, "LoRA target '", name, "' is not a matrix");
    const std::size_t d_out = it->second->dim(0), d_in = it->second->dim(1);
    LoraFactor f{Tensor({rank, d_in}), Tensor({d_out, rank})};
    for (double& v : f.a.data()) v = kLoraInitStd * rng.normal();
    adapter.targets.emplace(name, std::move(f));
  }
  validate_adapter(adapter, base);
  return adapter;
}

void validate_adapter(const LoraAdapter& adapter, const ParamStore& base) {
  require(adapter.rank >= 1, "LoRA rank must be at least 1");
  require(!adapter.targets.empty(), "LoRA adapter has no targets");
  for (const auto& [name, f] : adapter.targets) {
    require(name != "lm_head", "the LM head cannot be a LoRA target");
    auto it = base.find(name);
    require(it != base.end(), "LoRA target '", name, "' is not a base parameter");
    const Tensor& w = *it->second;
    require<ShapeError>(w.rank() == 2, "LoRA target '", name, "' is not a matrix");
    const std::size_t d_out = w.dim(0), d_in = w.dim(1);
    require(adapter.rank < std::min(d_in, d_out), "LoRA rank ", adapter.rank, " must be below min(d_in, d_out) = ",
            std::min(d_in, d_out), " for '", name, "'");
    require<ShapeError>(f.a.shape() == Shape{adapter.rank, d_in}, "LoRA A for '", name, "' has shape ",
                        shape_string(f.a.shape()), ", expected ", shape_string({adapter.rank, d_in}));
    require<ShapeError>(f.b.shape() == Shape{d_out, adapter.rank}, "LoRA B for '", name, "' has shape ",
                        shape_string(f.b.shape()), ", expected ", shape_string({d_out, adapter.rank}));
  }
}

ParamStore apply_lora(const ParamStore& base, std::span<const WeightedAdapter> adapters) {
  for (const auto& wa : adapters) {
    require(wa.adapter != nullptr, "null adapter");
    require(wa.weight >= 0.0 && wa.weight <= 1.0, "adapter weight ", wa.weight, " outside [0, 1]");
    validate_adapter(*wa.adapter, base);
  }
  ParamStore out = base;
  std::map<std::string, Tensor> merged;
  for (const auto& wa : adapters) {
    const double factor = wa.adapter->alpha * wa.weight;
    for (const auto& [name, f] : wa.adapter->targets) {
      auto [it, fresh] = merged.try_emplace(name);
      if (fresh) it->second = *base.at(name);
      Tensor& theta = it->second;
      const std::size_t d_out = theta.dim(0), d_in = theta.dim(1);
      Tensor delta({d_out, d_in});
      kernels::matmul(f.b.data(), f.a.data(), delta.data(), d_out, wa.adapter->rank, d_in);
      for (std::size_t i = 0; i < theta.numel(); ++i) theta[i] += delta[i] * factor;
    }
  }
  for (auto& [name, t] : merged) out[name] = std::make_shared<const Tensor>(std::move(t));
  return out;
}

BoundParams bind_trainable(Tape& tape, const ParamStore& base, const LoraAdapter& adapter) {
  validate_adapter(adapter, base);
  BoundParams bound(tape, base);
  for (const auto& [name, f] : adapter.targets) {
    const Var a = tape.parameter(lora_a_name(name), f.a);
    const Var b = tape.parameter(lora_b_name(name), f.b);
    bound.set(name, ag::add(bound(name), ag::scale(ag::matmul(b, a), adapter.alpha)));
  }
  return bound;
}

}  // namespace emorl
