#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "emorl/tensor.hpp"

namespace emorl {

class Tape;

enum class OpTag : std::uint8_t {
  leaf,
  matmul,
  linear,
  transpose,
  add,
  sub,
  mul,
  scale,
  relu,
  gelu,
  add_bias,
  softmax,
  log_softmax,
  layer_norm,
  embedding,
  slice_rows,
  slice_cols,
  concat_cols,
  gather,
  sum,
  mean,
};

const char* op_name(OpTag tag);

/// Handle to a node recorded on a Tape.
class Var {
 public:
  Var() = default;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  bool requires_grad() const;
  Tape& tape() const { return *tape_; }
  int id() const noexcept { return id_; }
  bool valid() const noexcept { return tape_ != nullptr; }

 private:
  friend class Tape;
  Var(Tape* tape, int id) : tape_(tape), id_(id) {}

  Tape* tape_ = nullptr;
  int id_ = -1;
};

using Gradients = std::map<std::string, Tensor>;

/// Append-only record of a computation. Node i only ever references parents
/// with smaller indices, so the recording order is a topological order.
///
/// Nodes that do not depend on any gradient-requiring leaf store no backward
/// closure, which keeps inference on a tape as cheap as plain evaluation.
class Tape {
 public:
  /// Accumulates gradient contributions during the reverse sweep.
  class GradSink {
   public:
    /// Gradient buffer of node `id`, zero-initialised on first access.
    Tensor& at(int id);
    bool wanted(int id) const;

   private:
    friend class Tape;
    GradSink(const Tape& tape, std::vector<Tensor>& grads) : tape_(tape), grads_(grads) {}
    const Tape& tape_;
    std::vector<Tensor>& grads_;
  };

  using BackwardFn = std::function<void(const Tensor& grad_out, GradSink& sink)>;

  struct Node {
    OpTag op = OpTag::leaf;
    std::vector<int> parents;
    TensorPtr value;
    bool requires_grad = false;
    std::string name;
    BackwardFn backward;
  };

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Tensor value);
  Var constant(TensorPtr value);
  /// Named leaf that receives a gradient in backward().
  Var parameter(std::string name, Tensor value);
  Var parameter(std::string name, TensorPtr value);

  /// Records an op node. `backward` is dropped when no parent requires grad.
  Var record(OpTag op, std::vector<int> parents, Tensor value, BackwardFn backward);

  /// Reverse sweep from a scalar loss. Returns one gradient per named
  /// parameter leaf; leaves off the loss path get zeros. Does not mutate the
  /// tape, so repeated calls give identical results.
  Gradients backward(const Var& loss) const;

  const Node& node(int id) const { return nodes_.at(static_cast<std::size_t>(id)); }
  std::size_t size() const noexcept { return nodes_.size(); }

 private:
  std::vector<Node> nodes_;
};

namespace ag {

Var matmul(const Var& a, const Var& b);
/// x[m x k] * w[n x k]^T, the projection convention used by the model.
Var linear(const Var& x, const Var& w);
Var transpose(const Var& x);
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& x, double factor);
Var relu(const Var& x);
/// tanh approximation of GELU.
Var gelu(const Var& x);
/// Adds a length-n bias to every row of an [m x n] matrix.
Var add_bias(const Var& x, const Var& bias);
Var softmax(const Var& x, std::size_t axis);
Var log_softmax(const Var& x, std::size_t axis);
/// Normalises over the last axis with epsilon kLayerNormEps, then gain/bias.
Var layer_norm(const Var& x, const Var& gain, const Var& bias);
/// Rows of `table` selected by token ids.
Var embedding(const Var& table, std::span<const int> ids);
Var slice_rows(const Var& x, std::size_t begin, std::size_t end);
Var slice_cols(const Var& x, std::size_t begin, std::size_t end);
Var concat_cols(std::span<const Var> parts);
/// out[i] = x[i, index[i]] for a 2-D x.
Var gather(const Var& x, std::span<const int> index);
Var sum(const Var& x);
Var mean(const Var& x);

inline constexpr double kLayerNormEps = 1e-6;

}  // namespace ag

}  // namespace emorl
