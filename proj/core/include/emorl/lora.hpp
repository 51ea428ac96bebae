#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "emorl/model.hpp"

namespace emorl {

/// Low-rank factors for one projection W[d_out x d_in]: delta = B * A.
struct LoraFactor {
  Tensor a;  // [rank x d_in]
  Tensor b;  // [d_out x rank]
};

/// Per-objective low-rank update of a base parameter set. The effective
/// weight for each target is W0 + (B * A) * alpha * w.
struct LoraAdapter {
  std::size_t rank = 4;
  double alpha = 8.0;
  std::map<std::string, LoraFactor> targets;

  friend bool operator==(const LoraAdapter& x, const LoraAdapter& y) {
    if (x.rank != y.rank || x.alpha != y.alpha || x.targets.size() != y.targets.size()) return false;
    for (const auto& [name, f] : x.targets) {
      auto it = y.targets.find(name);
      if (it == y.targets.end() || !(it->second.a == f.a) || !(it->second.b == f.b)) return false;
    }
    return true;
  }
};

struct WeightedAdapter {
  const LoraAdapter* adapter = nullptr;
  double weight = 1.0;
};

inline constexpr double kLoraInitStd = 0.02;

/// A ~ N(0, kLoraInitStd^2), B = 0, so the fresh adapter leaves the base
/// model's outputs unchanged.
LoraAdapter init_lora(const ParamStore& base, const std::vector<std::string>& targets, std::size_t rank, double alpha,
                      std::uint64_t seed);

/// Throws if the adapter does not fit `base`: unknown or non-matrix target,
/// LM-head target, rank outside [1, min(d_in, d_out)), or factor shapes off.
void validate_adapter(const LoraAdapter& adapter, const ParamStore& base);

/// theta = theta0 + sum_i (B_i A_i) alpha_i w_i for every targeted name.
/// Untargeted tensors are shared with `base`, which is never modified.
ParamStore apply_lora(const ParamStore& base, std::span<const WeightedAdapter> adapters);

/// Binds `base` on a tape with trainable factors for every adapter target.
/// Factor leaves are named "<target>.lora_a" / "<target>.lora_b".
BoundParams bind_trainable(Tape& tape, const ParamStore& base, const LoraAdapter& adapter);

std::string lora_a_name(const std::string& target);
std::string lora_b_name(const std::string& target);

}  // namespace emorl
