#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cassert>
#include <cmath>
#include <functional>
#include <stdexcept>
#include <utility>
#include <vector>

#include "crdcgan/core/tensor.hpp"

namespace crdcgan {

template <class T>
using EMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// Reverse-mode autodiff tape. Nodes are appended in topological order, so the
// backward sweep is a single reverse iteration. All kernels are sequential;
// identical inputs give bit-identical results on the same build.
template <class T>
class Tape {
 public:
  struct Node {
    Tensor<T> value;
    Tensor<T> grad;  // allocated on first accumulation
    bool needs_grad = false;
    std::function<void()> backward;  // empty for leaves
  };

  Tape() { nodes_.reserve(1024); }
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  int push(Tensor<T> value, bool needs_grad, std::function<void()> backward = {}) {
    Node n;
    n.value = std::move(value);
    n.needs_grad = needs_grad;
    n.backward = std::move(backward);
    nodes_.push_back(std::move(n));
    return static_cast<int>(nodes_.size()) - 1;
  }

  Node& node(int id) { return nodes_[static_cast<size_t>(id)]; }
  const Node& node(int id) const { return nodes_[static_cast<size_t>(id)]; }

  Tensor<T>& value(int id) { return node(id).value; }

  // Gradient buffer, zero-initialised on first touch.
  Tensor<T>& grad_buf(int id) {
    Node& n = node(id);
    if (n.grad.empty()) n.grad = Tensor<T>(n.value.shape());
    return n.grad;
  }

  bool has_grad(int id) const { return !node(id).grad.empty(); }

  size_t size() const { return nodes_.size(); }

  void reset() { nodes_.clear(); }

  // Backpropagate from a scalar node.
  void backward_from(int loss_id) {
    if (node(loss_id).value.numel() != 1) {
      throw std::invalid_argument("backward_from: loss must be a scalar");
    }
    grad_buf(loss_id).fill(T(1));
    for (int id = loss_id; id >= 0; --id) {
      Node& n = node(id);
      if (!n.needs_grad || n.grad.empty() || !n.backward) continue;
      n.backward();
    }
  }

 private:
  std::vector<Node> nodes_;
};

// Lightweight handle: a tape plus node index. Ops below are free functions so
// loss code reads close to the math.
template <class T>
struct Var {
  Tape<T>* tape = nullptr;
  int id = -1;

  bool valid() const { return tape != nullptr && id >= 0; }
  const Tensor<T>& val() const { return tape->value(id); }
  const Tensor<T>& grad() const { return tape->node(id).grad; }
  bool needs_grad() const { return tape->node(id).needs_grad; }
};

template <class T>
Var<T> make_leaf(Tape<T>& tp, Tensor<T> v, bool needs_grad) {
  return {&tp, tp.push(std::move(v), needs_grad)};
}

template <class T>
Var<T> make_constant(Tape<T>& tp, Tensor<T> v) {
  return make_leaf(tp, std::move(v), false);
}

template <class T>
Var<T> make_scalar(Tape<T>& tp, T v) {
  return make_constant(tp, Tensor<T>::scalar(v));
}

// Value copy with the gradient path cut.
template <class T>
Var<T> detach(Var<T> a) {
  return make_constant(*a.tape, a.val());
}

namespace detail {

template <class T>
inline void check_same_or_scalar(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  if (!a.same_shape(b) && a.numel() != 1 && b.numel() != 1) {
    throw std::invalid_argument(std::string(op) + ": shape mismatch " + a.shape_str() + " vs " + b.shape_str());
  }
}

// Accumulate g (shaped like the broadcast output) into the gradient of an
// input that may have been a scalar.
template <class T>
inline void acc_maybe_scalar(Tape<T>& tp, int id, const Tensor<T>& g) {
  Tensor<T>& dst = tp.grad_buf(id);
  if (dst.numel() == g.numel()) {
    for (int64_t i = 0; i < g.numel(); ++i) dst[i] += g[i];
  } else {
    assert(dst.numel() == 1);
    T s = 0;
    for (int64_t i = 0; i < g.numel(); ++i) s += g[i];
    dst[0] += s;
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// elementwise binary ops (with scalar broadcast on either side)
// ---------------------------------------------------------------------------

template <class T, class FwdFn, class BwdFn>
Var<T> binary_elementwise(Var<T> a, Var<T> b, const char* name, FwdFn fwd, BwdFn bwd) {
  Tape<T>& tp = *a.tape;
  const Tensor<T>& va = a.val();
  const Tensor<T>& vb = b.val();
  detail::check_same_or_scalar(va, vb, name);
  const int64_t n = std::max(va.numel(), vb.numel());
  Tensor<T> out(va.numel() >= vb.numel() ? va.shape() : vb.shape());
  const bool sa = va.numel() == 1, sb = vb.numel() == 1;
  for (int64_t i = 0; i < n; ++i) out[i] = fwd(va[sa ? 0 : i], vb[sb ? 0 : i]);
  const bool ng = a.needs_grad() || b.needs_grad();
  int aid = a.id, bid = b.id;
  int out_id = tp.push(std::move(out), ng, {});
  if (ng) {
    Tape<T>* t = &tp;
    tp.node(out_id).backward = [t, aid, bid, out_id, bwd, sa, sb, n]() {
      const Tensor<T>& g = t->node(out_id).grad;
      const Tensor<T>& va2 = t->value(aid);
      const Tensor<T>& vb2 = t->value(bid);
      const bool need_a = t->node(aid).needs_grad;
      const bool need_b = t->node(bid).needs_grad;
      Tensor<T> ga, gb;
      if (need_a) ga = Tensor<T>(g.shape());
      if (need_b) gb = Tensor<T>(g.shape());
      for (int64_t i = 0; i < n; ++i) {
        T da = 0, db = 0;
        bwd(va2[sa ? 0 : i], vb2[sb ? 0 : i], g[i], da, db);
        if (need_a) ga[i] = da;
        if (need_b) gb[i] = db;
      }
      if (need_a) detail::acc_maybe_scalar(*t, aid, ga);
      if (need_b) detail::acc_maybe_scalar(*t, bid, gb);
    };
  }
  return {&tp, out_id};
}

template <class T>
Var<T> operator+(Var<T> a, Var<T> b) {
  return binary_elementwise(a, b, "add", [](T x, T y) { return x + y; },
                            [](T, T, T g, T& da, T& db) { da = g; db = g; });
}

template <class T>
Var<T> operator-(Var<T> a, Var<T> b) {
  return binary_elementwise(a, b, "sub", [](T x, T y) { return x - y; },
                            [](T, T, T g, T& da, T& db) { da = g; db = -g; });
}

template <class T>
Var<T> operator*(Var<T> a, Var<T> b) {
  return binary_elementwise(a, b, "mul", [](T x, T y) { return x * y; },
                            [](T x, T y, T g, T& da, T& db) { da = g * y; db = g * x; });
}

template <class T>
Var<T> operator/(Var<T> a, Var<T> b) {
  return binary_elementwise(a, b, "div", [](T x, T y) { return x / y; },
                            [](T x, T y, T g, T& da, T& db) {
                              da = g / y;
                              db = -g * x / (y * y);
                            });
}

// Elementwise max; ties route the gradient to the first argument.
template <class T>
Var<T> vmax(Var<T> a, Var<T> b) {
  return binary_elementwise(a, b, "vmax", [](T x, T y) { return x >= y ? x : y; },
                            [](T x, T y, T g, T& da, T& db) {
                              if (x >= y) {
                                da = g;
                                db = 0;
                              } else {
                                da = 0;
                                db = g;
                              }
                            });
}

// ---------------------------------------------------------------------------
// elementwise unary ops
// ---------------------------------------------------------------------------

template <class T, class FwdFn, class BwdFn>
Var<T> unary_elementwise(Var<T> a, FwdFn fwd, BwdFn bwd) {
  Tape<T>& tp = *a.tape;
  const Tensor<T>& va = a.val();
  Tensor<T> out(va.shape());
  for (int64_t i = 0; i < va.numel(); ++i) out[i] = fwd(va[i]);
  const bool ng = a.needs_grad();
  int aid = a.id;
  int out_id = tp.push(std::move(out), ng, {});
  if (ng) {
    Tape<T>* t = &tp;
    tp.node(out_id).backward = [t, aid, out_id, bwd]() {
      const Tensor<T>& g = t->node(out_id).grad;
      const Tensor<T>& x = t->value(aid);
      const Tensor<T>& y = t->value(out_id);
      Tensor<T>& ga = t->grad_buf(aid);
      for (int64_t i = 0; i < g.numel(); ++i) ga[i] += bwd(x[i], y[i], g[i]);
    };
  }
  return {&tp, out_id};
}

template <class T>
Var<T> operator-(Var<T> a) {
  return unary_elementwise(a, [](T x) { return -x; }, [](T, T, T g) { return -g; });
}

template <class T>
Var<T> operator+(Var<T> a, T c) {
  return unary_elementwise(a, [c](T x) { return x + c; }, [](T, T, T g) { return g; });
}

template <class T>
Var<T> operator-(Var<T> a, T c) {
  return a + (-c);
}

template <class T>
Var<T> operator*(Var<T> a, T c) {
  return unary_elementwise(a, [c](T x) { return x * c; }, [c](T, T, T g) { return g * c; });
}

template <class T>
Var<T> operator*(T c, Var<T> a) {
  return a * c;
}

template <class T>
Var<T> relu(Var<T> a) {
  return unary_elementwise(a, [](T x) { return x > 0 ? x : T(0); },
                           [](T x, T, T g) { return x > 0 ? g : T(0); });
}

template <class T>
Var<T> leaky_relu(Var<T> a, T slope) {
  return unary_elementwise(a, [slope](T x) { return x > 0 ? x : slope * x; },
                           [slope](T x, T, T g) { return x > 0 ? g : slope * g; });
}

template <class T>
Var<T> vtanh(Var<T> a) {
  return unary_elementwise(a, [](T x) { return std::tanh(x); },
                           [](T, T y, T g) { return g * (T(1) - y * y); });
}

template <class T>
Var<T> vsigmoid(Var<T> a) {
  return unary_elementwise(a, [](T x) { return T(1) / (T(1) + std::exp(-x)); },
                           [](T, T y, T g) { return g * y * (T(1) - y); });
}

// softplus(x) = log(1 + e^x), overflow-safe. Note -log(sigmoid(x)) == softplus(-x).
template <class T>
Var<T> softplus(Var<T> a) {
  return unary_elementwise(
      a,
      [](T x) { return std::max(x, T(0)) + std::log1p(std::exp(-std::abs(x))); },
      [](T x, T, T g) { return g / (T(1) + std::exp(-x)); });
}

template <class T>
Var<T> vexp(Var<T> a) {
  return unary_elementwise(a, [](T x) { return std::exp(x); }, [](T, T y, T g) { return g * y; });
}

template <class T>
Var<T> vlog(Var<T> a) {
  return unary_elementwise(a, [](T x) { return std::log(x); }, [](T x, T, T g) { return g / x; });
}

template <class T>
Var<T> vsqrt(Var<T> a) {
  return unary_elementwise(a, [](T x) { return std::sqrt(x); },
                           [](T, T y, T g) { return g / (T(2) * y); });
}

template <class T>
Var<T> vabs(Var<T> a) {
  return unary_elementwise(a, [](T x) { return std::abs(x); },
                           [](T x, T, T g) { return x > 0 ? g : (x < 0 ? -g : T(0)); });
}

template <class T>
Var<T> square(Var<T> a) {
  return unary_elementwise(a, [](T x) { return x * x; }, [](T x, T, T g) { return T(2) * g * x; });
}

template <class T>
Var<T> vmax_scalar(Var<T> a, T c) {
  return unary_elementwise(a, [c](T x) { return x >= c ? x : c; },
                           [c](T x, T, T g) { return x >= c ? g : T(0); });
}

// ---------------------------------------------------------------------------
// reductions
// ---------------------------------------------------------------------------

template <class T>
Var<T> sum_all(Var<T> a) {
  Tape<T>& tp = *a.tape;
  const Tensor<T>& va = a.val();
  T s = 0;
  for (int64_t i = 0; i < va.numel(); ++i) s += va[i];
  const bool ng = a.needs_grad();
  int aid = a.id;
  int out_id = tp.push(Tensor<T>::scalar(s), ng, {});
  if (ng) {
    Tape<T>* t = &tp;
    tp.node(out_id).backward = [t, aid, out_id]() {
      const T g = t->node(out_id).grad[0];
      Tensor<T>& ga = t->grad_buf(aid);
      for (int64_t i = 0; i < ga.numel(); ++i) ga[i] += g;
    };
  }
  return {&tp, out_id};
}

template <class T>
Var<T> mean_all(Var<T> a) {
  const T inv = T(1) / static_cast<T>(a.val().numel());
  return sum_all(a) * inv;
}

// Row-wise sum of a 2-D tensor: (M,N) -> (M).
template <class T>
Var<T> row_sum(Var<T> a) {
  Tape<T>& tp = *a.tape;
  const Tensor<T>& va = a.val();
  assert(va.rank() == 2);
  const int M = va.dim(0), N = va.dim(1);
  Tensor<T> out({M});
  for (int i = 0; i < M; ++i) {
    T s = 0;
    for (int j = 0; j < N; ++j) s += va[static_cast<int64_t>(i) * N + j];
    out[i] = s;
  }
  const bool ng = a.needs_grad();
  int aid = a.id;
  int out_id = tp.push(std::move(out), ng, {});
  if (ng) {
    Tape<T>* t = &tp;
    tp.node(out_id).backward = [t, aid, out_id, M, N]() {
      const Tensor<T>& g = t->node(out_id).grad;
      Tensor<T>& ga = t->grad_buf(aid);
      for (int i = 0; i < M; ++i)
        for (int j = 0; j < N; ++j) ga[static_cast<int64_t>(i) * N + j] += g[i];
    };
  }
  return {&tp, out_id};
}

// log(sum(exp(a))) over a rank-1 tensor, max-shifted for stability.
template <class T>
Var<T> logsumexp(Var<T> a) {
  Tape<T>& tp = *a.tape;
  const Tensor<T>& va = a.val();
  T m = va[0];
  for (int64_t i = 1; i < va.numel(); ++i) m = std::max(m, va[i]);
  T s = 0;
  for (int64_t i = 0; i < va.numel(); ++i) s += std::exp(va[i] - m);
  const T lse = m + std::log(s);
  const bool ng = a.needs_grad();
  int aid = a.id;
  int out_id = tp.push(Tensor<T>::scalar(lse), ng, {});
  if (ng) {
    Tape<T>* t = &tp;
    tp.node(out_id).backward = [t, aid, out_id]() {
      const T g = t->node(out_id).grad[0];
      const T y = t->value(out_id)[0];
      const Tensor<T>& x = t->value(aid);
      Tensor<T>& ga = t->grad_buf(aid);
      for (int64_t i = 0; i < x.numel(); ++i) ga[i] += g * std::exp(x[i] - y);
    };
  }
  return {&tp, out_id};
}

// ---------------------------------------------------------------------------
// softmax family (over the last dim of a 2-D tensor)
// ---------------------------------------------------------------------------

template <class T>
Var<T> softmax_rows(Var<T> a) {
  Tape<T>& tp = *a.tape;
  const Tensor<T>& va = a.val();
  assert(va.rank() == 2);
  const int M = va.dim(0), N = va.dim(1);
  Tensor<T> out(va.shape());
  for (int i = 0; i < M; ++i) {
    const T* row = va.data() + static_cast<int64_t>(i) * N;
    T* orow = out.data() + static_cast<int64_t>(i) * N;
    T m = row[0];
    for (int j = 1; j < N; ++j) m = std::max(m, row[j]);
    T s = 0;
    for (int j = 0; j < N; ++j) {
      orow[j] = std::exp(row[j] - m);
      s += orow[j];
    }
    for (int j = 0; j < N; ++j) orow[j] /= s;
  }
  const bool ng = a.needs_grad();
  int aid = a.id;
  int out_id = tp.push(std::move(out), ng, {});
  if (ng) {
    Tape<T>* t = &tp;
    tp.node(out_id).backward = [t, aid, out_id, M, N]() {
      const Tensor<T>& g = t->node(out_id).grad;
      const Tensor<T>& y = t->value(out_id);
      Tensor<T>& ga = t->grad_buf(aid);
      for (int i = 0; i < M; ++i) {
        const int64_t off = static_cast<int64_t>(i) * N;
        T dot = 0;
        for (int j = 0; j < N; ++j) dot += g[off + j] * y[off + j];
        for (int j = 0; j < N; ++j) ga[off + j] += y[off + j] * (g[off + j] - dot);
      }
    };
  }
  return {&tp, out_id};
}

template <class T>
Var<T> log_softmax_rows(Var<T> a) {
  Tape<T>& tp = *a.tape;
  const Tensor<T>& va = a.val();
  assert(va.rank() == 2);
  const int M = va.dim(0), N = va.dim(1);
  Tensor<T> out(va.shape());
  for (int i = 0; i < M; ++i) {
    const T* row = va.data() + static_cast<int64_t>(i) * N;
    T* orow = out.data() + static_cast<int64_t>(i) * N;
    T m = row[0];
    for (int j = 1; j < N; ++j) m = std::max(m, row[j]);
    T s = 0;
    for (int j = 0; j < N; ++j) s += std::exp(row[j] - m);
    const T lse = m + std::log(s);
    for (int j = 0; j < N; ++j) orow[j] = row[j] - lse;
  }
  const bool ng = a.needs_grad();
  int aid = a.id;
  int out_id = tp.push(std::move(out), ng, {});
  if (ng) {
    Tape<T>* t = &tp;
    tp.node(out_id).backward = [t, aid, out_id, M, N]() {
      const Tensor<T>& g = t->node(out_id).grad;
      const Tensor<T>& y = t->value(out_id);
      Tensor<T>& ga = t->grad_buf(aid);
      for (int i = 0; i < M; ++i) {
        const int64_t off = static_cast<int64_t>(i) * N;
        T gs = 0;
        for (int j = 0; j < N; ++j) gs += g[off + j];
        for (int j = 0; j < N; ++j) ga[off + j] += g[off + j] - std::exp(y[off + j]) * gs;
      }
    };
  }
  return {&tp, out_id};
}

// Mean cross-entropy of logits (B,Y) against integer labels.
template <class T>
Var<T> cross_entropy_rows(Var<T> logits, const std::vector<int>& labels) {
  Tape<T>& tp = *logits.tape;
  const Tensor<T>& v = logits.val();
  assert(v.rank() == 2);
  const int B = v.dim(0), Y = v.dim(1);
  if (static_cast<int>(labels.size()) != B) {
    throw std::invalid_argument("cross_entropy_rows: label count mismatch");
  }
  for (int lab : labels) {
    if (lab < 0 || lab >= Y) throw std::invalid_argument("cross_entropy_rows: label out of range");
  }
  Var<T> lsm = log_softmax_rows(logits);
  // gather the label entry per row
  const Tensor<T>& lv = lsm.val();
  T loss = 0;
  for (int i = 0; i < B; ++i) loss -= lv[static_cast<int64_t>(i) * Y + labels[i]];
  loss /= static_cast<T>(B);
  const bool ng = lsm.needs_grad();
  int lid = lsm.id;
  int out_id = tp.push(Tensor<T>::scalar(loss), ng, {});
  if (ng) {
    Tape<T>* t = &tp;
    std::vector<int> labs = labels;
    tp.node(out_id).backward = [t, lid, out_id, labs, B, Y]() {
      const T g = t->node(out_id).grad[0];
      Tensor<T>& ga = t->grad_buf(lid);
      const T scale = g / static_cast<T>(B);
      for (int i = 0; i < B; ++i) ga[static_cast<int64_t>(i) * Y + labs[i]] -= scale;
    };
  }
  return {&tp, out_id};
}

// ---------------------------------------------------------------------------
// shape ops
// ---------------------------------------------------------------------------

template <class T>
Var<T> reshape(Var<T> a, std::vector<int> shape) {
  Tape<T>& tp = *a.tape;
  if (Tensor<T>::count(shape) != a.val().numel()) {
    throw std::invalid_argument("reshape: element count mismatch");
  }
  Tensor<T> out = a.val().reshaped(shape);
  const bool ng = a.needs_grad();
  int aid = a.id;
  int out_id = tp.push(std::move(out), ng, {});
  if (ng) {
    Tape<T>* t = &tp;
    tp.node(out_id).backward = [t, aid, out_id]() {
      const Tensor<T>& g = t->node(out_id).grad;
      Tensor<T>& ga = t->grad_buf(aid);
      for (int64_t i = 0; i < g.numel(); ++i) ga[i] += g[i];
    };
  }
  return {&tp, out_id};
}

template <class T>
Var<T> transpose2d(Var<T> a) {
  Tape<T>& tp = *a.tape;
  const Tensor<T>& va = a.val();
  assert(va.rank() == 2);
  const int M = va.dim(0), N = va.dim(1);
  Tensor<T> out({N, M});
  for (int i = 0; i < M; ++i)
    for (int j = 0; j < N; ++j) out[static_cast<int64_t>(j) * M + i] = va[static_cast<int64_t>(i) * N + j];
  const bool ng = a.needs_grad();
  int aid = a.id;
  int out_id = tp.push(std::move(out), ng, {});
  if (ng) {
    Tape<T>* t = &tp;
    tp.node(out_id).backward = [t, aid, out_id, M, N]() {
      const Tensor<T>& g = t->node(out_id).grad;
      Tensor<T>& ga = t->grad_buf(aid);
      for (int i = 0; i < M; ++i)
        for (int j = 0; j < N; ++j) ga[static_cast<int64_t>(i) * N + j] += g[static_cast<int64_t>(j) * M + i];
    };
  }
  return {&tp, out_id};
}

// Concatenate along the last dim; all leading dims must match.
template <class T>
Var<T> concat_last(const std::vector<Var<T>>& parts) {
  assert(!parts.empty());
  Tape<T>& tp = *parts[0].tape;
  const int rank = parts[0].val().rank();
  int64_t lead = 1;
  for (int d = 0; d + 1 < rank; ++d) lead *= parts[0].val().dim(d);
  int total_last = 0;
  bool ng = false;
  for (const auto& p : parts) {
    const Tensor<T>& v = p.val();
    if (v.rank() != rank) throw std::invalid_argument("concat_last: rank mismatch");
    int64_t l = 1;
    for (int d = 0; d + 1 < rank; ++d) l *= v.dim(d);
    if (l != lead) throw std::invalid_argument("concat_last: leading dim mismatch");
    total_last += v.dim(rank - 1);
    ng = ng || p.needs_grad();
  }
  std::vector<int> shape = parts[0].val().shape();
  shape[static_cast<size_t>(rank - 1)] = total_last;
  Tensor<T> out(shape);
  int offset = 0;
  for (const auto& p : parts) {
    const Tensor<T>& v = p.val();
    const int last = v.dim(rank - 1);
    for (int64_t r = 0; r < lead; ++r) {
      const T* src = v.data() + r * last;
      T* dst = out.data() + r * total_last + offset;
      std::copy(src, src + last, dst);
    }
    offset += last;
  }
  std::vector<int> ids;
  std::vector<int> lasts;
  for (const auto& p : parts) {
    ids.push_back(p.id);
    lasts.push_back(p.val().dim(rank - 1));
  }
  int out_id = tp.push(std::move(out), ng, {});
  if (ng) {
    Tape<T>* t = &tp;
    tp.node(out_id).backward = [t, ids, lasts, out_id, lead, total_last]() {
      const Tensor<T>& g = t->node(out_id).grad;
      int off = 0;
      for (size_t k = 0; k < ids.size(); ++k) {
        const int last = lasts[k];
        if (t->node(ids[k]).needs_grad) {
          Tensor<T>& ga = t->grad_buf(ids[k]);
          for (int64_t r = 0; r < lead; ++r) {
            const T* src = g.data() + r * total_last + off;
            T* dst = ga.data() + r * last;
            for (int j = 0; j < last; ++j) dst[j] += src[j];
          }
        }
        off += last;
      }
    };
  }
  return {&tp, out_id};
}

template <class T>
Var<T> slice_last(Var<T> a, int start, int len) {
  Tape<T>& tp = *a.tape;
  const Tensor<T>& va = a.val();
  const int rank = va.rank();
  const int last = va.dim(rank - 1);
  assert(start >= 0 && start + len <= last);
  int64_t lead = va.numel() / last;
  std::vector<int> shape = va.shape();
  shape[static_cast<size_t>(rank - 1)] = len;
  Tensor<T> out(shape);
  for (int64_t r = 0; r < lead; ++r) {
    const T* src = va.data() + r * last + start;
    std::copy(src, src + len, out.data() + r * len);
  }
  const bool ng = a.needs_grad();
  int aid = a.id;
  int out_id = tp.push(std::move(out), ng, {});
  if (ng) {
    Tape<T>* t = &tp;
    tp.node(out_id).backward = [t, aid, out_id, start, len, last, lead]() {
      const Tensor<T>& g = t->node(out_id).grad;
      Tensor<T>& ga = t->grad_buf(aid);
      for (int64_t r = 0; r < lead; ++r) {
        const T* src = g.data() + r * len;
        T* dst = ga.data() + r * last + start;
        for (int j = 0; j < len; ++j) dst[j] += src[j];
      }
    };
  }
  return {&tp, out_id};
}

// Select index i along dim 0, dropping that dim: (A,B,...) -> (B,...).
template <class T>
Var<T> slice_dim0(Var<T> a, int index) {
  Tape<T>& tp = *a.tape;
  const Tensor<T>& va = a.val();
  assert(va.rank() >= 2);
  const int A = va.dim(0);
  assert(index >= 0 && index < A);
  (void)A;
  const int64_t block = va.numel() / va.dim(0);
  std::vector<int> shape(va.shape().begin() + 1, va.shape().end());
  Tensor<T> out(shape);
  std::copy(va.data() + index * block, va.data() + (index + 1) * block, out.data());
  const bool ng = a.needs_grad();
  int aid = a.id;
  int out_id = tp.push(std::move(out), ng, {});
  if (ng) {
    Tape<T>* t = &tp;
    tp.node(out_id).backward = [t, aid, out_id, index, block]() {
      const Tensor<T>& g = t->node(out_id).grad;
      Tensor<T>& ga = t->grad_buf(aid);
      T* dst = ga.data() + index * block;
      for (int64_t i = 0; i < block; ++i) dst[i] += g[i];
    };
  }
  return {&tp, out_id};
}

// Diagonal of a square matrix: (B,B) -> (B).
template <class T>
Var<T> diag2d(Var<T> a) {
  Tape<T>& tp = *a.tape;
  const Tensor<T>& va = a.val();
  assert(va.rank() == 2 && va.dim(0) == va.dim(1));
  const int B = va.dim(0);
  Tensor<T> out({B});
  for (int i = 0; i < B; ++i) out[i] = va[static_cast<int64_t>(i) * B + i];
  const bool ng = a.needs_grad();
  int aid = a.id;
  int out_id = tp.push(std::move(out), ng, {});
  if (ng) {
    Tape<T>* t = &tp;
    tp.node(out_id).backward = [t, aid, out_id, B]() {
      const Tensor<T>& g = t->node(out_id).grad;
      Tensor<T>& ga = t->grad_buf(aid);
      for (int i = 0; i < B; ++i) ga[static_cast<int64_t>(i) * B + i] += g[i];
    };
  }
  return {&tp, out_id};
}

// Embedding lookup: rows of table (V,E) selected by ids.
template <class T>
Var<T> gather_rows(Var<T> table, const std::vector<int>& ids) {
  Tape<T>& tp = *table.tape;
  const Tensor<T>& tv = table.val();
  assert(tv.rank() == 2);
  const int V = tv.dim(0), E = tv.dim(1);
  const int n = static_cast<int>(ids.size());
  for (int id : ids) {
    if (id < 0 || id >= V) throw std::invalid_argument("gather_rows: index out of range");
  }
  Tensor<T> out({n, E});
  for (int i = 0; i < n; ++i) {
    std::copy(tv.data() + static_cast<int64_t>(ids[i]) * E, tv.data() + static_cast<int64_t>(ids[i] + 1) * E,
              out.data() + static_cast<int64_t>(i) * E);
  }
  const bool ng = table.needs_grad();
  int tid = table.id;
  int out_id = tp.push(std::move(out), ng, {});
  if (ng) {
    Tape<T>* t = &tp;
    std::vector<int> idv = ids;
    tp.node(out_id).backward = [t, tid, out_id, idv, E]() {
      const Tensor<T>& g = t->node(out_id).grad;
      Tensor<T>& ga = t->grad_buf(tid);
      for (size_t i = 0; i < idv.size(); ++i) {
        const T* src = g.data() + static_cast<int64_t>(i) * E;
        T* dst = ga.data() + static_cast<int64_t>(idv[i]) * E;
        for (int j = 0; j < E; ++j) dst[j] += src[j];
      }
    };
  }
  return {&tp, out_id};
}

// Per-row scaling of a matrix: out[i,:] = m[i,:] * v[i].
template <class T>
Var<T> scale_rows(Var<T> m, Var<T> v) {
  Tape<T>& tp = *m.tape;
  const Tensor<T>& mv = m.val();
  const Tensor<T>& vv = v.val();
  assert(mv.rank() == 2 && vv.rank() == 1 && mv.dim(0) == vv.dim(0));
  const int M = mv.dim(0), N = mv.dim(1);
  Tensor<T> out(mv.shape());
  for (int i = 0; i < M; ++i)
    for (int j = 0; j < N; ++j) out[static_cast<int64_t>(i) * N + j] = mv[static_cast<int64_t>(i) * N + j] * vv[i];
  const bool ng = m.needs_grad() || v.needs_grad();
  int mid = m.id, vid = v.id;
  int out_id = tp.push(std::move(out), ng, {});
  if (ng) {
    Tape<T>* t = &tp;
    tp.node(out_id).backward = [t, mid, vid, out_id, M, N]() {
      const Tensor<T>& g = t->node(out_id).grad;
      const Tensor<T>& mv2 = t->value(mid);
      const Tensor<T>& vv2 = t->value(vid);
      if (t->node(mid).needs_grad) {
        Tensor<T>& gm = t->grad_buf(mid);
        for (int i = 0; i < M; ++i)
          for (int j = 0; j < N; ++j) gm[static_cast<int64_t>(i) * N + j] += g[static_cast<int64_t>(i) * N + j] * vv2[i];
      }
      if (t->node(vid).needs_grad) {
        Tensor<T>& gv = t->grad_buf(vid);
        for (int i = 0; i < M; ++i) {
          T s = 0;
          for (int j = 0; j < N; ++j) s += g[static_cast<int64_t>(i) * N + j] * mv2[static_cast<int64_t>(i) * N + j];
          gv[i] += s;
        }
      }
    };
  }
  return {&tp, out_id};
}

// ---------------------------------------------------------------------------
// dense linear algebra (Eigen-backed)
// ---------------------------------------------------------------------------

template <class T>
Eigen::Map<const EMat<T>> as_mat(const Tensor<T>& t, int rows, int cols) {
  assert(t.numel() == static_cast<int64_t>(rows) * cols);
  return Eigen::Map<const EMat<T>>(t.data(), rows, cols);
}

template <class T>
Eigen::Map<EMat<T>> as_mat(Tensor<T>& t, int rows, int cols) {
  assert(t.numel() == static_cast<int64_t>(rows) * cols);
  return Eigen::Map<EMat<T>>(t.data(), rows, cols);
}

template <class T>
Var<T> matmul(Var<T> a, Var<T> b) {
  Tape<T>& tp = *a.tape;
  const Tensor<T>& va = a.val();
  const Tensor<T>& vb = b.val();
  assert(va.rank() == 2 && vb.rank() == 2);
  if (va.dim(1) != vb.dim(0)) {
    throw std::invalid_argument("matmul: inner dim mismatch " + va.shape_str() + " x " + vb.shape_str());
  }
  const int M = va.dim(0), K = va.dim(1), N = vb.dim(1);
  Tensor<T> out({M, N});
  as_mat(out, M, N).noalias() = as_mat(va, M, K) * as_mat(vb, K, N);
  const bool ng = a.needs_grad() || b.needs_grad();
  int aid = a.id, bid = b.id;
  int out_id = tp.push(std::move(out), ng, {});
  if (ng) {
    Tape<T>* t = &tp;
    tp.node(out_id).backward = [t, aid, bid, out_id, M, K, N]() {
      const Tensor<T>& g = t->node(out_id).grad;
      auto gm = as_mat(g, M, N);
      if (t->node(aid).needs_grad) {
        as_mat(t->grad_buf(aid), M, K).noalias() += gm * as_mat(t->value(bid), K, N).transpose();
      }
      if (t->node(bid).needs_grad) {
        as_mat(t->grad_buf(bid), K, N).noalias() += as_mat(t->value(aid), M, K).transpose() * gm;
      }
    };
  }
  return {&tp, out_id};
}

// x (M,K) * w (K,N) + bias (N)
template <class T>
Var<T> affine(Var<T> x, Var<T> w, Var<T> bias) {
  Tape<T>& tp = *x.tape;
  const Tensor<T>& vx = x.val();
  const Tensor<T>& vw = w.val();
  const Tensor<T>& vb = bias.val();
  assert(vx.rank() == 2 && vw.rank() == 2 && vb.rank() == 1);
  if (vx.dim(1) != vw.dim(0) || vw.dim(1) != vb.dim(0)) {
    throw std::invalid_argument("affine: dimension mismatch");
  }
  const int M = vx.dim(0), K = vx.dim(1), N = vw.dim(1);
  Tensor<T> out({M, N});
  auto om = as_mat(out, M, N);
  om.noalias() = as_mat(vx, M, K) * as_mat(vw, K, N);
  for (int i = 0; i < M; ++i)
    for (int j = 0; j < N; ++j) out[static_cast<int64_t>(i) * N + j] += vb[j];
  const bool ng = x.needs_grad() || w.needs_grad() || bias.needs_grad();
  int xid = x.id, wid = w.id, bid = bias.id;
  int out_id = tp.push(std::move(out), ng, {});
  if (ng) {
    Tape<T>* t = &tp;
    tp.node(out_id).backward = [t, xid, wid, bid, out_id, M, K, N]() {
      const Tensor<T>& g = t->node(out_id).grad;
      auto gm = as_mat(g, M, N);
      if (t->node(xid).needs_grad) {
        as_mat(t->grad_buf(xid), M, K).noalias() += gm * as_mat(t->value(wid), K, N).transpose();
      }
      if (t->node(wid).needs_grad) {
        as_mat(t->grad_buf(wid), K, N).noalias() += as_mat(t->value(xid), M, K).transpose() * gm;
      }
      if (t->node(bid).needs_grad) {
        Tensor<T>& gb = t->grad_buf(bid);
        for (int i = 0; i < M; ++i)
          for (int j = 0; j < N; ++j) gb[j] += g[static_cast<int64_t>(i) * N + j];
      }
    };
  }
  return {&tp, out_id};
}

// ---------------------------------------------------------------------------
// image ops (NHWC)
// ---------------------------------------------------------------------------

namespace detail {

// im2col for 3x3/1x1/4x4 style kernels; rows are (b,oh,ow), columns (kh,kw,c).
template <class T>
void im2col(const Tensor<T>& x, int kh, int kw, int stride, int pad, int oh, int ow, Tensor<T>& col) {
  const int B = x.dim(0), H = x.dim(1), W = x.dim(2), C = x.dim(3);
  const int row_len = kh * kw * C;
  T* out = col.data();
  for (int b = 0; b < B; ++b) {
    const T* img = x.data() + static_cast<int64_t>(b) * H * W * C;
    for (int i = 0; i < oh; ++i) {
      for (int j = 0; j < ow; ++j) {
        T* row = out + ((static_cast<int64_t>(b) * oh + i) * ow + j) * row_len;
        for (int u = 0; u < kh; ++u) {
          const int h = i * stride - pad + u;
          T* dst = row + static_cast<int64_t>(u) * kw * C;
          if (h < 0 || h >= H) {
            std::fill(dst, dst + static_cast<int64_t>(kw) * C, T(0));
            continue;
          }
          for (int v = 0; v < kw; ++v) {
            const int w = j * stride - pad + v;
            if (w < 0 || w >= W) {
              std::fill(dst + static_cast<int64_t>(v) * C, dst + static_cast<int64_t>(v + 1) * C, T(0));
            } else {
              const T* src = img + (static_cast<int64_t>(h) * W + w) * C;
              std::copy(src, src + C, dst + static_cast<int64_t>(v) * C);
            }
          }
        }
      }
    }
  }
}

template <class T>
void col2im_add(const Tensor<T>& col, int kh, int kw, int stride, int pad, int oh, int ow, Tensor<T>& dx) {
  const int B = dx.dim(0), H = dx.dim(1), W = dx.dim(2), C = dx.dim(3);
  const int row_len = kh * kw * C;
  for (int b = 0; b < B; ++b) {
    T* img = dx.data() + static_cast<int64_t>(b) * H * W * C;
    for (int i = 0; i < oh; ++i) {
      for (int j = 0; j < ow; ++j) {
        const T* row = col.data() + ((static_cast<int64_t>(b) * oh + i) * ow + j) * row_len;
        for (int u = 0; u < kh; ++u) {
          const int h = i * stride - pad + u;
          if (h < 0 || h >= H) continue;
          for (int v = 0; v < kw; ++v) {
            const int w = j * stride - pad + v;
            if (w < 0 || w >= W) continue;
            T* dst = img + (static_cast<int64_t>(h) * W + w) * C;
            const T* src = row + (static_cast<int64_t>(u) * kw + v) * C;
            for (int c = 0; c < C; ++c) dst[c] += src[c];
          }
        }
      }
    }
  }
}

}  // namespace detail

// 2-D convolution, NHWC. Weight shape (KH,KW,Cin,Cout), bias (Cout).
// im2col is recomputed in the backward pass to keep tape memory flat.
template <class T>
Var<T> conv2d(Var<T> x, Var<T> w, Var<T> bias, int stride, int pad) {
  Tape<T>& tp = *x.tape;
  const Tensor<T>& vx = x.val();
  const Tensor<T>& vw = w.val();
  const Tensor<T>& vb = bias.val();
  assert(vx.rank() == 4 && vw.rank() == 4);
  const int B = vx.dim(0), H = vx.dim(1), W = vx.dim(2), C = vx.dim(3);
  const int KH = vw.dim(0), KW = vw.dim(1), Cin = vw.dim(2), Cout = vw.dim(3);
  if (C != Cin) throw std::invalid_argument("conv2d: channel mismatch");
  if (vb.numel() != Cout) throw std::invalid_argument("conv2d: bias mismatch");
  const int OH = (H + 2 * pad - KH) / stride + 1;
  const int OW = (W + 2 * pad - KW) / stride + 1;
  const int row_len = KH * KW * C;
  const int rows = B * OH * OW;
  Tensor<T> col({rows, row_len});
  detail::im2col(vx, KH, KW, stride, pad, OH, OW, col);
  Tensor<T> out({B, OH, OW, Cout});
  as_mat(out, rows, Cout).noalias() = as_mat(col, rows, row_len) * as_mat(vw, row_len, Cout);
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < Cout; ++c) out[static_cast<int64_t>(r) * Cout + c] += vb[c];
  const bool ng = x.needs_grad() || w.needs_grad() || bias.needs_grad();
  int xid = x.id, wid = w.id, bid = bias.id;
  int out_id = tp.push(std::move(out), ng, {});
  if (ng) {
    Tape<T>* t = &tp;
    tp.node(out_id).backward = [t, xid, wid, bid, out_id, KH, KW, stride, pad, OH, OW, rows, row_len, Cout]() {
      const Tensor<T>& g = t->node(out_id).grad;
      auto gm = as_mat(g, rows, Cout);
      const bool need_x = t->node(xid).needs_grad;
      const bool need_w = t->node(wid).needs_grad;
      const bool need_b = t->node(bid).needs_grad;
      if (need_w) {
        Tensor<T> col({rows, row_len});
        detail::im2col(t->value(xid), KH, KW, stride, pad, OH, OW, col);
        as_mat(t->grad_buf(wid), row_len, Cout).noalias() += as_mat(col, rows, row_len).transpose() * gm;
      }
      if (need_b) {
        Tensor<T>& gb = t->grad_buf(bid);
        for (int r = 0; r < rows; ++r)
          for (int c = 0; c < Cout; ++c) gb[c] += g[static_cast<int64_t>(r) * Cout + c];
      }
      if (need_x) {
        Tensor<T> dcol({rows, row_len});
        as_mat(dcol, rows, row_len).noalias() = gm * as_mat(t->value(wid), row_len, Cout).transpose();
        detail::col2im_add(dcol, KH, KW, stride, pad, OH, OW, t->grad_buf(xid));
      }
    };
  }
  return {&tp, out_id};
}

// Nearest-neighbour 2x upsample, NHWC.
template <class T>
Var<T> upsample2x(Var<T> x) {
  Tape<T>& tp = *x.tape;
  const Tensor<T>& vx = x.val();
  assert(vx.rank() == 4);
  const int B = vx.dim(0), H = vx.dim(1), W = vx.dim(2), C = vx.dim(3);
  Tensor<T> out({B, 2 * H, 2 * W, C});
  for (int b = 0; b < B; ++b)
    for (int i = 0; i < 2 * H; ++i)
      for (int j = 0; j < 2 * W; ++j) {
        const T* src = vx.data() + (((static_cast<int64_t>(b) * H + i / 2) * W) + j / 2) * C;
        T* dst = out.data() + (((static_cast<int64_t>(b) * 2 * H + i) * 2 * W) + j) * C;
        std::copy(src, src + C, dst);
      }
  const bool ng = x.needs_grad();
  int xid = x.id;
  int out_id = tp.push(std::move(out), ng, {});
  if (ng) {
    Tape<T>* t = &tp;
    tp.node(out_id).backward = [t, xid, out_id, B, H, W, C]() {
      const Tensor<T>& g = t->node(out_id).grad;
      Tensor<T>& gx = t->grad_buf(xid);
      for (int b = 0; b < B; ++b)
        for (int i = 0; i < 2 * H; ++i)
          for (int j = 0; j < 2 * W; ++j) {
            const T* src = g.data() + (((static_cast<int64_t>(b) * 2 * H + i) * 2 * W) + j) * C;
            T* dst = gx.data() + (((static_cast<int64_t>(b) * H + i / 2) * W) + j / 2) * C;
            for (int c = 0; c < C; ++c) dst[c] += src[c];
          }
    };
  }
  return {&tp, out_id};
}

// Instance normalisation over H,W per (sample, channel), with affine params.
// Per-sample statistics keep generation independent of batch composition.
template <class T>
Var<T> instance_norm(Var<T> x, Var<T> gamma, Var<T> beta, T eps = T(1e-5)) {
  Tape<T>& tp = *x.tape;
  const Tensor<T>& vx = x.val();
  assert(vx.rank() == 4);
  const int B = vx.dim(0), H = vx.dim(1), W = vx.dim(2), C = vx.dim(3);
  if (gamma.val().numel() != C || beta.val().numel() != C) {
    throw std::invalid_argument("instance_norm: affine parameter mismatch");
  }
  const int64_t hw = static_cast<int64_t>(H) * W;
  Tensor<T> xhat({B, H, W, C});
  Tensor<T> inv_std({B, C});
  const Tensor<T>& vg = gamma.val();
  const Tensor<T>& vbeta = beta.val();
  Tensor<T> out({B, H, W, C});
  for (int b = 0; b < B; ++b) {
    for (int c = 0; c < C; ++c) {
      const int64_t base = static_cast<int64_t>(b) * hw * C;
      T mean = 0;
      for (int64_t p = 0; p < hw; ++p) mean += vx[base + p * C + c];
      mean /= static_cast<T>(hw);
      T var = 0;
      for (int64_t p = 0; p < hw; ++p) {
        const T d = vx[base + p * C + c] - mean;
        var += d * d;
      }
      var /= static_cast<T>(hw);
      const T istd = T(1) / std::sqrt(var + eps);
      inv_std[static_cast<int64_t>(b) * C + c] = istd;
      for (int64_t p = 0; p < hw; ++p) {
        const T xh = (vx[base + p * C + c] - mean) * istd;
        xhat[base + p * C + c] = xh;
        out[base + p * C + c] = vg[c] * xh + vbeta[c];
      }
    }
  }
  const bool ng = x.needs_grad() || gamma.needs_grad() || beta.needs_grad();
  int xid = x.id, gid = gamma.id, bid = beta.id;
  int out_id = tp.push(std::move(out), ng, {});
  if (ng) {
    Tape<T>* t = &tp;
    auto xhat_p = std::make_shared<Tensor<T>>(std::move(xhat));
    auto istd_p = std::make_shared<Tensor<T>>(std::move(inv_std));
    tp.node(out_id).backward = [t, xid, gid, bid, out_id, B, H, W, C, hw, xhat_p, istd_p]() {
      const Tensor<T>& g = t->node(out_id).grad;
      const Tensor<T>& vg2 = t->value(gid);
      const bool need_x = t->node(xid).needs_grad;
      const bool need_g = t->node(gid).needs_grad;
      const bool need_b = t->node(bid).needs_grad;
      for (int b = 0; b < B; ++b) {
        for (int c = 0; c < C; ++c) {
          const int64_t base = static_cast<int64_t>(b) * hw * C;
          T sum_g = 0, sum_gx = 0;
          for (int64_t p = 0; p < hw; ++p) {
            const T gv = g[base + p * C + c];
            sum_g += gv;
            sum_gx += gv * (*xhat_p)[base + p * C + c];
          }
          if (need_g) t->grad_buf(gid)[c] += sum_gx;
          if (need_b) t->grad_buf(bid)[c] += sum_g;
          if (need_x) {
            Tensor<T>& gx = t->grad_buf(xid);
            const T istd = (*istd_p)[static_cast<int64_t>(b) * C + c];
            const T k = vg2[c] * istd;
            const T mg = sum_g / static_cast<T>(hw);
            const T mgx = sum_gx / static_cast<T>(hw);
            for (int64_t p = 0; p < hw; ++p) {
              const T gv = g[base + p * C + c];
              const T xh = (*xhat_p)[base + p * C + c];
              gx[base + p * C + c] += k * (gv - mg - xh * mgx);
            }
          }
        }
      }
    };
  }
  return {&tp, out_id};
}

// Spatial mean: (B,H,W,C) -> (B,C).
template <class T>
Var<T> reduce_mean_hw(Var<T> x) {
  Tape<T>& tp = *x.tape;
  const Tensor<T>& vx = x.val();
  assert(vx.rank() == 4);
  const int B = vx.dim(0), H = vx.dim(1), W = vx.dim(2), C = vx.dim(3);
  const int64_t hw = static_cast<int64_t>(H) * W;
  Tensor<T> out({B, C});
  for (int b = 0; b < B; ++b) {
    const T* img = vx.data() + static_cast<int64_t>(b) * hw * C;
    for (int64_t p = 0; p < hw; ++p)
      for (int c = 0; c < C; ++c) out[static_cast<int64_t>(b) * C + c] += img[p * C + c];
    for (int c = 0; c < C; ++c) out[static_cast<int64_t>(b) * C + c] /= static_cast<T>(hw);
  }
  const bool ng = x.needs_grad();
  int xid = x.id;
  int out_id = tp.push(std::move(out), ng, {});
  if (ng) {
    Tape<T>* t = &tp;
    tp.node(out_id).backward = [t, xid, out_id, B, C, hw]() {
      const Tensor<T>& g = t->node(out_id).grad;
      Tensor<T>& gx = t->grad_buf(xid);
      for (int b = 0; b < B; ++b) {
        T* img = gx.data() + static_cast<int64_t>(b) * hw * C;
        for (int64_t p = 0; p < hw; ++p)
          for (int c = 0; c < C; ++c) img[p * C + c] += g[static_cast<int64_t>(b) * C + c] / static_cast<T>(hw);
      }
    };
  }
  return {&tp, out_id};
}

// Broadcast a per-sample vector over a spatial grid: (B,C) -> (B,H,W,C).
template <class T>
Var<T> spatial_broadcast(Var<T> v, int H, int W) {
  Tape<T>& tp = *v.tape;
  const Tensor<T>& vv = v.val();
  assert(vv.rank() == 2);
  const int B = vv.dim(0), C = vv.dim(1);
  Tensor<T> out({B, H, W, C});
  for (int b = 0; b < B; ++b) {
    const T* src = vv.data() + static_cast<int64_t>(b) * C;
    T* dst = out.data() + static_cast<int64_t>(b) * H * W * C;
    for (int64_t p = 0; p < static_cast<int64_t>(H) * W; ++p) std::copy(src, src + C, dst + p * C);
  }
  const bool ng = v.needs_grad();
  int vid = v.id;
  int out_id = tp.push(std::move(out), ng, {});
  if (ng) {
    Tape<T>* t = &tp;
    const int64_t hw = static_cast<int64_t>(H) * W;
    tp.node(out_id).backward = [t, vid, out_id, B, C, hw]() {
      const Tensor<T>& g = t->node(out_id).grad;
      Tensor<T>& gv = t->grad_buf(vid);
      for (int b = 0; b < B; ++b) {
        const T* src = g.data() + static_cast<int64_t>(b) * hw * C;
        T* dst = gv.data() + static_cast<int64_t>(b) * C;
        for (int64_t p = 0; p < hw; ++p)
          for (int c = 0; c < C; ++c) dst[c] += src[p * C + c];
      }
    };
  }
  return {&tp, out_id};
}

// ---------------------------------------------------------------------------
// composite helpers
// ---------------------------------------------------------------------------

// Mean absolute difference between two same-shaped tensors.
template <class T>
Var<T> mean_abs_diff(Var<T> a, Var<T> b) {
  return mean_all(vabs(a - b));
}

// Cosine similarity of two rank-1 vectors, with a small norm floor so the
// value stays defined at the origin.
template <class T>
Var<T> cosine(Var<T> a, Var<T> b, T floor = T(1e-8)) {
  Var<T> dot = sum_all(a * b);
  Var<T> na = vsqrt(sum_all(a * a) + floor * floor);
  Var<T> nb = vsqrt(sum_all(b * b) + floor * floor);
  return dot / (na * nb);
}

// Row-wise cosine similarity of two (B,D) matrices -> (B).
template <class T>
Var<T> cosine_rows(Var<T> a, Var<T> b, T floor = T(1e-8)) {
  Var<T> dot = row_sum(a * b);
  Var<T> na = vsqrt(row_sum(a * a) + floor * floor);
  Var<T> nb = vsqrt(row_sum(b * b) + floor * floor);
  return dot / (na * nb);
}

}  // namespace crdcgan
