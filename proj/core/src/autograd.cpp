#include "emorl/autograd.hpp"

#include <algorithm>
#include <cmath>

#include "emorl/error.hpp"

namespace emorl {

const char* op_name(OpTag tag) {
  switch (tag) {
    case OpTag::leaf: return "leaf";
    case OpTag::matmul: return "matmul";
    case OpTag::linear: return "linear";
    case OpTag::transpose: return "transpose";
    case OpTag::add: return "add";
    case OpTag::sub: return "sub";
    case OpTag::mul: return "mul";
    case OpTag::scale: return "scale";
    case OpTag::relu: return "relu";
    case OpTag::gelu: return "gelu";
    case OpTag::add_bias: return "add_bias";
    case OpTag::softmax: return "softmax";
    case OpTag::log_softmax: return "log_softmax";
    case OpTag::layer_norm: return "layer_norm";
    case OpTag::embedding: return "embedding";
    case OpTag::slice_rows: return "slice_rows";
    case OpTag::slice_cols: return "slice_cols";
    case OpTag::concat_cols: return "concat_cols";
    case OpTag::gather: return "gather";
    case OpTag::sum: return "sum";
    case OpTag::mean: return "mean";
  }
  return "unknown";
}

const Tensor& Var::value() const {
  require(tape_ != nullptr, "use of an unbound Var");
  return *tape_->node(id_).value;
}

bool Var::requires_grad() const { return tape_->node(id_).requires_grad; }

// ---------------------------------------------------------------------------
// Tape

Var Tape::constant(Tensor value) { return constant(std::make_shared<const Tensor>(std::move(value))); }

Var Tape::constant(TensorPtr value) {
  require(value != nullptr, "null tensor");
  Node node;
  node.value = std::move(value);
  nodes_.push_back(std::move(node));
  return Var(this, static_cast<int>(nodes_.size() - 1));
}

Var Tape::parameter(std::string name, Tensor value) {
  return parameter(std::move(name), std::make_shared<const Tensor>(std::move(value)));
}

Var Tape::parameter(std::string name, TensorPtr value) {
  require(value != nullptr, "null tensor");
  Node node;
  node.value = std::move(value);
  node.requires_grad = true;
  node.name = std::move(name);
  nodes_.push_back(std::move(node));
  return Var(this, static_cast<int>(nodes_.size() - 1));
}

Var Tape::record(OpTag op, std::vector<int> parents, Tensor value, BackwardFn backward) {
  check_finite(value, op_name(op));
  Node node;
  node.op = op;
  node.requires_grad = std::any_of(parents.begin(), parents.end(),
                                   [this](int p) { return nodes_[static_cast<std::size_t>(p)].requires_grad; });
  node.parents = std::move(parents);
  node.value = std::make_shared<const Tensor>(std::move(value));
  if (node.requires_grad) node.backward = std::move(backward);
  nodes_.push_back(std::move(node));
  return Var(this, static_cast<int>(nodes_.size() - 1));
}

bool Tape::GradSink::wanted(int id) const { return tape_.node(id).requires_grad; }

Tensor& Tape::GradSink::at(int id) {
  auto& slot = grads_[static_cast<std::size_t>(id)];
  if (slot.shape() != tape_.node(id).value->shape()) {
    slot = Tensor(tape_.node(id).value->shape());
  }
  return slot;
}

Gradients Tape::backward(const Var& loss) const {
  require(loss.valid() && &loss.tape() == this, "loss is not recorded on this tape");
  const Tensor& lv = *node(loss.id()).value;
  require<ShapeError>(lv.numel() == 1, "backward() needs a scalar loss, got ", shape_string(lv.shape()));

  // Scalar placeholders; GradSink::at swaps in a zero buffer of the right
  // shape on first touch.
  std::vector<Tensor> grads(nodes_.size(), Tensor::scalar(0.0));
  std::vector<bool> touched(nodes_.size(), false);

  grads[static_cast<std::size_t>(loss.id())] = Tensor::filled(lv.shape(), 1.0);
  touched[static_cast<std::size_t>(loss.id())] = true;

  GradSink sink(*this, grads);
  for (int id = loss.id(); id >= 0; --id) {
    const Node& n = nodes_[static_cast<std::size_t>(id)];
    if (!n.requires_grad || !n.backward) continue;
    if (!touched[static_cast<std::size_t>(id)]) continue;
    for (int p : n.parents) touched[static_cast<std::size_t>(p)] = true;
    n.backward(grads[static_cast<std::size_t>(id)], sink);
  }

  Gradients out;
  for (std::size_t id = 0; id < nodes_.size(); ++id) {
    const Node& n = nodes_[id];
    if (n.op != OpTag::leaf || !n.requires_grad) continue;
    if (touched[id] && grads[id].shape() == n.value->shape()) {
      out[n.name] = grads[id];
    } else {
      out[n.name] = Tensor(n.value->shape());
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Ops

namespace ag {
namespace {

Tape& same_tape(const Var& a, const Var& b) {
  require(a.valid() && b.valid(), "use of an unbound Var");
  require(&a.tape() == &b.tape(), "operands recorded on different tapes");
  return a.tape();
}

void require_rank(const Tensor& t, std::size_t rank, const char* op) {
  require<ShapeError>(t.rank() == rank, op, " expects rank ", rank, ", got ", shape_string(t.shape()));
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  require<ShapeError>(a.shape() == b.shape(), op, ": shape mismatch ", shape_string(a.shape()), " vs ",
                      shape_string(b.shape()));
}

void accumulate(Tensor& dst, const Tensor& src) {
  auto d = dst.data();
  auto s = src.data();
  for (std::size_t i = 0; i < d.size(); ++i) d[i] += s[i];
}

struct AxisSplit {
  std::size_t outer = 1;
  std::size_t len = 1;
  std::size_t inner = 1;
};

AxisSplit split_axis(const Shape& shape, std::size_t axis) {
  require<ShapeError>(axis < shape.size(), "axis ", axis, " invalid for ", shape_string(shape));
  AxisSplit s;
  for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
  s.len = shape[axis];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

}  // namespace

Var matmul(const Var& a, const Var& b) {
  Tape& tape = same_tape(a, b);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  require_rank(av, 2, "matmul");
  require_rank(bv, 2, "matmul");
  const std::size_t m = av.dim(0), k = av.dim(1), n = bv.dim(1);
  require<ShapeError>(bv.dim(0) == k, "matmul: inner extents differ, ", shape_string(av.shape()), " x ",
                      shape_string(bv.shape()));
  Tensor out({m, n});
  kernels::matmul(av.data(), bv.data(), out.data(), m, k, n);
  const int ia = a.id(), ib = b.id();
  const TensorPtr ap = tape.node(ia).value, bp = tape.node(ib).value;
  return tape.record(OpTag::matmul, {ia, ib}, std::move(out),
                     [ia, ib, ap, bp, m, k, n](const Tensor& g, Tape::GradSink& sink) {
                       if (sink.wanted(ia)) {
                         Tensor tmp({m, k});
                         kernels::matmul_bt(g.data(), bp->data(), tmp.data(), m, n, k);
                         accumulate(sink.at(ia), tmp);
                       }
                       if (sink.wanted(ib)) {
                         kernels::matmul_at_acc(ap->data(), g.data(), sink.at(ib).data(), m, k, n);
                       }
                     });
}

Var linear(const Var& x, const Var& w) {
  Tape& tape = same_tape(x, w);
  const Tensor& xv = x.value();
  const Tensor& wv = w.value();
  require_rank(xv, 2, "linear");
  require_rank(wv, 2, "linear");
  const std::size_t m = xv.dim(0), k = xv.dim(1), n = wv.dim(0);
  require<ShapeError>(wv.dim(1) == k, "linear: input extent ", k, " does not match weight ",
                      shape_string(wv.shape()));
  Tensor out({m, n});
  kernels::matmul_bt(xv.data(), wv.data(), out.data(), m, k, n);
  const int ix = x.id(), iw = w.id();
  const TensorPtr xp = tape.node(ix).value, wp = tape.node(iw).value;
  return tape.record(OpTag::linear, {ix, iw}, std::move(out),
                     [ix, iw, xp, wp, m, k, n](const Tensor& g, Tape::GradSink& sink) {
                       if (sink.wanted(ix)) {
                         Tensor tmp({m, k});
                         kernels::matmul(g.data(), wp->data(), tmp.data(), m, n, k);
                         accumulate(sink.at(ix), tmp);
                       }
                       if (sink.wanted(iw)) {
                         kernels::matmul_at_acc(g.data(), xp->data(), sink.at(iw).data(), m, n, k);
                       }
                     });
}

Var transpose(const Var& x) {
  Tape& tape = x.tape();
  const Tensor& xv = x.value();
  require_rank(xv, 2, "transpose");
  const std::size_t m = xv.dim(0), n = xv.dim(1);
  Tensor out({n, m});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out.at(j, i) = xv.at(i, j);
  const int ix = x.id();
  return tape.record(OpTag::transpose, {ix}, std::move(out), [ix, m, n](const Tensor& g, Tape::GradSink& sink) {
    Tensor& gx = sink.at(ix);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) gx.at(i, j) += g.at(j, i);
  });
}

Var add(const Var& a, const Var& b) {
  Tape& tape = same_tape(a, b);
  require_same_shape(a.value(), b.value(), "add");
  Tensor out = a.value();
  out.set_requires_grad(false);
  accumulate(out, b.value());
  const int ia = a.id(), ib = b.id();
  return tape.record(OpTag::add, {ia, ib}, std::move(out), [ia, ib](const Tensor& g, Tape::GradSink& sink) {
    if (sink.wanted(ia)) accumulate(sink.at(ia), g);
    if (sink.wanted(ib)) accumulate(sink.at(ib), g);
  });
}

Var sub(const Var& a, const Var& b) {
  Tape& tape = same_tape(a, b);
  require_same_shape(a.value(), b.value(), "sub");
  Tensor out = a.value();
  out.set_requires_grad(false);
  auto o = out.data();
  auto bv = b.value().data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] -= bv[i];
  const int ia = a.id(), ib = b.id();
  return tape.record(OpTag::sub, {ia, ib}, std::move(out), [ia, ib](const Tensor& g, Tape::GradSink& sink) {
    if (sink.wanted(ia)) accumulate(sink.at(ia), g);
    if (sink.wanted(ib)) {
      auto gb = sink.at(ib).data();
      for (std::size_t i = 0; i < gb.size(); ++i) gb[i] -= g[i];
    }
  });
}

Var mul(const Var& a, const Var& b) {
  Tape& tape = same_tape(a, b);
  require_same_shape(a.value(), b.value(), "mul");
  Tensor out(a.value().shape());
  auto av = a.value().data();
  auto bv = b.value().data();
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = av[i] * bv[i];
  const int ia = a.id(), ib = b.id();
  const TensorPtr ap = tape.node(ia).value, bp = tape.node(ib).value;
  return tape.record(OpTag::mul, {ia, ib}, std::move(out), [ia, ib, ap, bp](const Tensor& g, Tape::GradSink& sink) {
    if (sink.wanted(ia)) {
      auto ga = sink.at(ia).data();
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[i] * (*bp)[i];
    }
    if (sink.wanted(ib)) {
      auto gb = sink.at(ib).data();
      for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += g[i] * (*ap)[i];
    }
  });
}

Var scale(const Var& x, double factor) {
  Tape& tape = x.tape();
  Tensor out(x.value().shape());
  auto xv = x.value().data();
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = xv[i] * factor;
  const int ix = x.id();
  return tape.record(OpTag::scale, {ix}, std::move(out), [ix, factor](const Tensor& g, Tape::GradSink& sink) {
    auto gx = sink.at(ix).data();
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g[i] * factor;
  });
}

Var relu(const Var& x) {
  Tape& tape = x.tape();
  Tensor out(x.value().shape());
  auto xv = x.value().data();
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = xv[i] > 0.0 ? xv[i] : 0.0;
  const int ix = x.id();
  const TensorPtr xp = tape.node(ix).value;
  return tape.record(OpTag::relu, {ix}, std::move(out), [ix, xp](const Tensor& g, Tape::GradSink& sink) {
    auto gx = sink.at(ix).data();
    for (std::size_t i = 0; i < gx.size(); ++i)
      if ((*xp)[i] > 0.0) gx[i] += g[i];
  });
}

Var gelu(const Var& x) {
  constexpr double kC = 0.7978845608028654;  // sqrt(2/pi)
  constexpr double kA = 0.044715;
  Tape& tape = x.tape();
  Tensor out(x.value().shape());
  auto xv = x.value().data();
  for (std::size_t i = 0; i < xv.size(); ++i) {
    const double v = xv[i];
    out[i] = 0.5 * v * (1.0 + std::tanh(kC * (v + kA * v * v * v)));
  }
  const int ix = x.id();
  const TensorPtr xp = tape.node(ix).value;
  return tape.record(OpTag::gelu, {ix}, std::move(out), [ix, xp](const Tensor& g, Tape::GradSink& sink) {
    auto gx = sink.at(ix).data();
    for (std::size_t i = 0; i < gx.size(); ++i) {
      const double v = (*xp)[i];
      const double t = std::tanh(kC * (v + kA * v * v * v));
      const double d = 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * kC * (1.0 + 3.0 * kA * v * v);
      gx[i] += g[i] * d;
    }
  });
}

Var add_bias(const Var& x, const Var& bias) {
  Tape& tape = same_tape(x, bias);
  const Tensor& xv = x.value();
  const Tensor& bv = bias.value();
  require_rank(xv, 2, "add_bias");
  require_rank(bv, 1, "add_bias");
  const std::size_t m = xv.dim(0), n = xv.dim(1);
  require<ShapeError>(bv.dim(0) == n, "add_bias: bias length ", bv.dim(0), " vs row length ", n);
  Tensor out = xv;
  out.set_requires_grad(false);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out.at(i, j) += bv[j];
  const int ix = x.id(), ib = bias.id();
  return tape.record(OpTag::add_bias, {ix, ib}, std::move(out), [ix, ib, m, n](const Tensor& g, Tape::GradSink& sink) {
    if (sink.wanted(ix)) accumulate(sink.at(ix), g);
    if (sink.wanted(ib)) {
      Tensor& gb = sink.at(ib);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) gb[j] += g.at(i, j);
    }
  });
}

Var softmax(const Var& x, std::size_t axis) {
  Tape& tape = x.tape();
  const Tensor& xv = x.value();
  const AxisSplit s = split_axis(xv.shape(), axis);
  Tensor out(xv.shape());
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t in = 0; in < s.inner; ++in) {
      const std::size_t base = o * s.len * s.inner + in;
      double mx = xv[base];
      for (std::size_t i = 1; i < s.len; ++i) mx = std::max(mx, xv[base + i * s.inner]);
      double z = 0.0;
      for (std::size_t i = 0; i < s.len; ++i) {
        const double e = std::exp(xv[base + i * s.inner] - mx);
        out[base + i * s.inner] = e;
        z += e;
      }
      for (std::size_t i = 0; i < s.len; ++i) out[base + i * s.inner] /= z;
    }
  }
  const int ix = x.id();
  auto yp = std::make_shared<const Tensor>(out);
  return tape.record(OpTag::softmax, {ix}, std::move(out), [ix, yp, s](const Tensor& g, Tape::GradSink& sink) {
    Tensor& gx = sink.at(ix);
    for (std::size_t o = 0; o < s.outer; ++o) {
      for (std::size_t in = 0; in < s.inner; ++in) {
        const std::size_t base = o * s.len * s.inner + in;
        double dot = 0.0;
        for (std::size_t i = 0; i < s.len; ++i) dot += g[base + i * s.inner] * (*yp)[base + i * s.inner];
        for (std::size_t i = 0; i < s.len; ++i) {
          const std::size_t idx = base + i * s.inner;
          gx[idx] += (*yp)[idx] * (g[idx] - dot);
        }
      }
    }
  });
}

Var log_softmax(const Var& x, std::size_t axis) {
  Tape& tape = x.tape();
  const Tensor& xv = x.value();
  const AxisSplit s = split_axis(xv.shape(), axis);
  Tensor out(xv.shape());
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t in = 0; in < s.inner; ++in) {
      const std::size_t base = o * s.len * s.inner + in;
      double mx = xv[base];
      for (std::size_t i = 1; i < s.len; ++i) mx = std::max(mx, xv[base + i * s.inner]);
      double z = 0.0;
      for (std::size_t i = 0; i < s.len; ++i) z += std::exp(xv[base + i * s.inner] - mx);
      const double lz = mx + std::log(z);
      for (std::size_t i = 0; i < s.len; ++i) out[base + i * s.inner] = xv[base + i * s.inner] - lz;
    }
  }
  const int ix = x.id();
  auto yp = std::make_shared<const Tensor>(out);
  return tape.record(OpTag::log_softmax, {ix}, std::move(out), [ix, yp, s](const Tensor& g, Tape::GradSink& sink) {
    Tensor& gx = sink.at(ix);
    for (std::size_t o = 0; o < s.outer; ++o) {
      for (std::size_t in = 0; in < s.inner; ++in) {
        const std::size_t base = o * s.len * s.inner + in;
        double gsum = 0.0;
        for (std::size_t i = 0; i < s.len; ++i) gsum += g[base + i * s.inner];
        for (std::size_t i = 0; i < s.len; ++i) {
          const std::size_t idx = base + i * s.inner;
          gx[idx] += g[idx] - std::exp((*yp)[idx]) * gsum;
        }
      }
    }
  });
}

Var layer_norm(const Var& x, const Var& gain, const Var& bias) {
  Tape& tape = same_tape(x, gain);
  same_tape(x, bias);
  const Tensor& xv = x.value();
  require<ShapeError>(xv.rank() >= 1, "layer_norm on a scalar");
  const std::size_t n = xv.shape().back();
  const std::size_t rows = xv.numel() / n;
  require<ShapeError>(gain.value().shape() == Shape{n} && bias.value().shape() == Shape{n},
                      "layer_norm: gain/bias must have extent ", n);
  const Tensor& gv = gain.value();
  const Tensor& bv = bias.value();

  Tensor out(xv.shape());
  auto xhat = std::make_shared<Tensor>(xv.shape());
  auto rstd = std::make_shared<std::vector<double>>(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = xv.data().data() + r * n;
    double mu = 0.0;
    for (std::size_t j = 0; j < n; ++j) mu += row[j];
    mu /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t j = 0; j < n; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<double>(n);
    const double rs = 1.0 / std::sqrt(var + kLayerNormEps);
    (*rstd)[r] = rs;
    for (std::size_t j = 0; j < n; ++j) {
      const double h = (row[j] - mu) * rs;
      (*xhat)[r * n + j] = h;
      out[r * n + j] = h * gv[j] + bv[j];
    }
  }
  const int ix = x.id(), ig = gain.id(), ib = bias.id();
  const TensorPtr gp = tape.node(ig).value;
  return tape.record(OpTag::layer_norm, {ix, ig, ib}, std::move(out),
                     [ix, ig, ib, gp, xhat, rstd, rows, n](const Tensor& g, Tape::GradSink& sink) {
                       const double inv_n = 1.0 / static_cast<double>(n);
                       if (sink.wanted(ix)) {
                         Tensor& gx = sink.at(ix);
                         std::vector<double> dxhat(n);
                         for (std::size_t r = 0; r < rows; ++r) {
                           double m1 = 0.0, m2 = 0.0;
                           for (std::size_t j = 0; j < n; ++j) {
                             dxhat[j] = g[r * n + j] * (*gp)[j];
                             m1 += dxhat[j];
                             m2 += dxhat[j] * (*xhat)[r * n + j];
                           }
                           m1 *= inv_n;
                           m2 *= inv_n;
                           for (std::size_t j = 0; j < n; ++j) {
                             gx[r * n + j] += (*rstd)[r] * (dxhat[j] - m1 - (*xhat)[r * n + j] * m2);
                           }
                         }
                       }
                       if (sink.wanted(ig)) {
                         Tensor& gg = sink.at(ig);
                         for (std::size_t r = 0; r < rows; ++r)
                           for (std::size_t j = 0; j < n; ++j) gg[j] += g[r * n + j] * (*xhat)[r * n + j];
                       }
                       if (sink.wanted(ib)) {
                         Tensor& gb = sink.at(ib);
                         for (std::size_t r = 0; r < rows; ++r)
                           for (std::size_t j = 0; j < n; ++j) gb[j] += g[r * n + j];
                       }
                     });
}

Var embedding(const Var& table, std::span<const int> ids) {
  Tape& tape = table.tape();
  const Tensor& tv = table.value();
  require_rank(tv, 2, "embedding");
  require<ShapeError>(!ids.empty(), "embedding: empty id sequence");
  const std::size_t vocab = tv.dim(0), d = tv.dim(1);
  std::vector<int> idx(ids.begin(), ids.end());
  Tensor out({idx.size(), d});
  for (std::size_t t = 0; t < idx.size(); ++t) {
    require(idx[t] >= 0 && static_cast<std::size_t>(idx[t]) < vocab, "token id ", idx[t], " out of range [0, ",
            vocab, ")");
    const double* src = tv.data().data() + static_cast<std::size_t>(idx[t]) * d;
    std::copy(src, src + d, out.data().data() + t * d);
  }
  const int it = table.id();
  return tape.record(OpTag::embedding, {it}, std::move(out), [it, idx, d](const Tensor& g, Tape::GradSink& sink) {
    Tensor& gt = sink.at(it);
    for (std::size_t t = 0; t < idx.size(); ++t) {
      double* dst = gt.data().data() + static_cast<std::size_t>(idx[t]) * d;
      for (std::size_t j = 0; j < d; ++j) dst[j] += g[t * d + j];
    }
  });
}

Var slice_rows(const Var& x, std::size_t begin, std::size_t end) {
  Tape& tape = x.tape();
  const Tensor& xv = x.value();
  require_rank(xv, 2, "slice_rows");
  require<ShapeError>(begin < end && end <= xv.dim(0), "slice_rows: bad range [", begin, ", ", end, ") for ",
                      shape_string(xv.shape()));
  const std::size_t n = xv.dim(1);
  Tensor out({end - begin, n});
  std::copy(xv.data().begin() + static_cast<std::ptrdiff_t>(begin * n),
            xv.data().begin() + static_cast<std::ptrdiff_t>(end * n), out.data().begin());
  const int ix = x.id();
  return tape.record(OpTag::slice_rows, {ix}, std::move(out), [ix, begin, n](const Tensor& g, Tape::GradSink& sink) {
    auto gx = sink.at(ix).data();
    for (std::size_t i = 0; i < g.numel(); ++i) gx[begin * n + i] += g[i];
  });
}

Var slice_cols(const Var& x, std::size_t begin, std::size_t end) {
  Tape& tape = x.tape();
  const Tensor& xv = x.value();
  require_rank(xv, 2, "slice_cols");
  require<ShapeError>(begin < end && end <= xv.dim(1), "slice_cols: bad range [", begin, ", ", end, ") for ",
                      shape_string(xv.shape()));
  const std::size_t m = xv.dim(0), n = xv.dim(1), w = end - begin;
  Tensor out({m, w});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < w; ++j) out.at(i, j) = xv.at(i, begin + j);
  const int ix = x.id();
  return tape.record(OpTag::slice_cols, {ix}, std::move(out),
                     [ix, begin, m, n, w](const Tensor& g, Tape::GradSink& sink) {
                       auto gx = sink.at(ix).data();
                       for (std::size_t i = 0; i < m; ++i)
                         for (std::size_t j = 0; j < w; ++j) gx[i * n + begin + j] += g[i * w + j];
                     });
}

Var concat_cols(std::span<const Var> parts) {
  require<ShapeError>(!parts.empty(), "concat_cols: no inputs");
  Tape& tape = parts[0].tape();
  const std::size_t m = parts[0].value().dim(0);
  std::vector<int> ids;
  std::vector<std::size_t> widths;
  std::size_t total = 0;
  for (const Var& p : parts) {
    same_tape(parts[0], p);
    require_rank(p.value(), 2, "concat_cols");
    require<ShapeError>(p.value().dim(0) == m, "concat_cols: row counts differ");
    ids.push_back(p.id());
    widths.push_back(p.value().dim(1));
    total += p.value().dim(1);
  }
  Tensor out({m, total});
  std::size_t off = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const Tensor& pv = parts[k].value();
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < widths[k]; ++j) out.at(i, off + j) = pv.at(i, j);
    off += widths[k];
  }
  std::vector<int> parents = ids;
  return tape.record(OpTag::concat_cols, std::move(parents), std::move(out),
                     [ids, widths, m, total](const Tensor& g, Tape::GradSink& sink) {
                       std::size_t off = 0;
                       for (std::size_t k = 0; k < ids.size(); ++k) {
                         if (sink.wanted(ids[k])) {
                           Tensor& gp = sink.at(ids[k]);
                           for (std::size_t i = 0; i < m; ++i)
                             for (std::size_t j = 0; j < widths[k]; ++j) gp.at(i, j) += g[i * total + off + j];
                         }
                         off += widths[k];
                       }
                     });
}

Var gather(const Var& x, std::span<const int> index) {
  Tape& tape = x.tape();
  const Tensor& xv = x.value();
  require_rank(xv, 2, "gather");
  const std::size_t m = xv.dim(0), n = xv.dim(1);
  require<ShapeError>(index.size() == m, "gather: ", index.size(), " indices for ", m, " rows");
  std::vector<int> idx(index.begin(), index.end());
  Tensor out({m});
  for (std::size_t i = 0; i < m; ++i) {
    require(idx[i] >= 0 && static_cast<std::size_t>(idx[i]) < n, "gather index ", idx[i], " out of range [0, ", n,
            ")");
    out[i] = xv.at(i, static_cast<std::size_t>(idx[i]));
  }
  const int ix = x.id();
  return tape.record(OpTag::gather, {ix}, std::move(out), [ix, idx, n](const Tensor& g, Tape::GradSink& sink) {
    auto gx = sink.at(ix).data();
    for (std::size_t i = 0; i < idx.size(); ++i) gx[i * n + static_cast<std::size_t>(idx[i])] += g[i];
  });
}

Var sum(const Var& x) {
  Tape& tape = x.tape();
  double acc = 0.0;
  for (double v : x.value().data()) acc += v;
  const int ix = x.id();
  return tape.record(OpTag::sum, {ix}, Tensor::scalar(acc), [ix](const Tensor& g, Tape::GradSink& sink) {
    const double gv = g[0];
    for (double& v : sink.at(ix).data()) v += gv;
  });
}

Var mean(const Var& x) {
  Tape& tape = x.tape();
  double acc = 0.0;
  for (double v : x.value().data()) acc += v;
  const double inv = 1.0 / static_cast<double>(x.value().numel());
  const int ix = x.id();
  return tape.record(OpTag::mean, {ix}, Tensor::scalar(acc * inv), [ix, inv](const Tensor& g, Tape::GradSink& sink) {
    const double gv = g[0] * inv;
    for (double& v : sink.at(ix).data()) v += gv;
  });
}

}  // namespace ag
}  // namespace emorl
