#pragma once

#include <map>
#include <string>
#include <vector>

#include "crdcgan/core/errors.hpp"
#include "crdcgan/core/tape.hpp"

namespace crdcgan {

// Named, ordered parameter set. Order is the serialization and optimizer
// order, so it must be construction-deterministic.
template <class T>
class ParamStore {
 public:
  int add(const std::string& name, Tensor<T> value) {
    if (index_.count(name)) throw std::invalid_argument("duplicate parameter: " + name);
    index_[name] = static_cast<int>(values_.size());
    names_.push_back(name);
    values_.push_back(std::move(value));
    return static_cast<int>(values_.size()) - 1;
  }

  int count() const { return static_cast<int>(values_.size()); }
  const std::string& name(int i) const { return names_[static_cast<size_t>(i)]; }
  Tensor<T>& value(int i) { return values_[static_cast<size_t>(i)]; }
  const Tensor<T>& value(int i) const { return values_[static_cast<size_t>(i)]; }

  int find(const std::string& name) const {
    auto it = index_.find(name);
    return it == index_.end() ? -1 : it->second;
  }

  int64_t total_scalars() const {
    int64_t n = 0;
    for (const auto& v : values_) n += v.numel();
    return n;
  }

 private:
  std::map<std::string, int> index_;
  std::vector<std::string> names_;
  std::vector<Tensor<T>> values_;
};

// Per-forward-pass leaf handles for every parameter in a store.
template <class T>
struct ParamRefs {
  Tape<T>* tape = nullptr;
  std::vector<Var<T>> vars;

  Var<T> operator[](int i) const { return vars[static_cast<size_t>(i)]; }
};

template <class T>
ParamRefs<T> make_refs(Tape<T>& tp, const ParamStore<T>& store, bool trainable) {
  ParamRefs<T> refs;
  refs.tape = &tp;
  refs.vars.reserve(static_cast<size_t>(store.count()));
  for (int i = 0; i < store.count(); ++i) {
    refs.vars.push_back(make_leaf(tp, store.value(i), trainable));
  }
  return refs;
}

// ---------------------------------------------------------------------------
// layers
// ---------------------------------------------------------------------------

template <class T>
struct Linear {
  int w = -1, b = -1;
  Linear() = default;
  Linear(ParamStore<T>& ps, const std::string& name, int in, int out, Rng& rng, T stddev) {
    w = ps.add(name + ".w", Tensor<T>::randn({in, out}, rng, stddev));
    b = ps.add(name + ".b", Tensor<T>::zeros({out}));
  }
  Var<T> operator()(const ParamRefs<T>& p, Var<T> x) const { return affine(x, p[w], p[b]); }
};

template <class T>
struct Conv {
  int w = -1, b = -1;
  int stride = 1, pad = 1;
  Conv() = default;
  Conv(ParamStore<T>& ps, const std::string& name, int kh, int kw, int cin, int cout, int stride_, int pad_, Rng& rng,
       T stddev)
      : stride(stride_), pad(pad_) {
    w = ps.add(name + ".w", Tensor<T>::randn({kh, kw, cin, cout}, rng, stddev));
    b = ps.add(name + ".b", Tensor<T>::zeros({cout}));
  }
  Var<T> operator()(const ParamRefs<T>& p, Var<T> x) const { return conv2d(x, p[w], p[b], stride, pad); }
};

template <class T>
struct InstanceNorm {
  int gamma = -1, beta = -1;
  InstanceNorm() = default;
  InstanceNorm(ParamStore<T>& ps, const std::string& name, int channels) {
    gamma = ps.add(name + ".gamma", Tensor<T>::full({channels}, T(1)));
    beta = ps.add(name + ".beta", Tensor<T>::zeros({channels}));
  }
  Var<T> operator()(const ParamRefs<T>& p, Var<T> x) const { return instance_norm(x, p[gamma], p[beta]); }
};

template <class T>
struct Embedding {
  int table = -1;
  Embedding() = default;
  Embedding(ParamStore<T>& ps, const std::string& name, int vocab, int dim, Rng& rng, T stddev) {
    Tensor<T> w = Tensor<T>::randn({vocab, dim}, rng, stddev);
    for (int j = 0; j < dim; ++j) w[j] = 0;  // index 0 is padding
    table = ps.add(name + ".table", std::move(w));
  }
  Var<T> operator()(const ParamRefs<T>& p, const std::vector<int>& ids) const { return gather_rows(p[table], ids); }
};

// Single-direction GRU cell; gate layout [r | z | n].
template <class T>
struct GruCell {
  int wx = -1, wh = -1, b = -1;
  int hidden = 0;
  GruCell() = default;
  GruCell(ParamStore<T>& ps, const std::string& name, int input, int hidden_, Rng& rng) : hidden(hidden_) {
    const T sx = T(1) / std::sqrt(static_cast<T>(input));
    const T sh = T(1) / std::sqrt(static_cast<T>(hidden_));
    wx = ps.add(name + ".wx", Tensor<T>::randn({input, 3 * hidden_}, rng, sx));
    wh = ps.add(name + ".wh", Tensor<T>::randn({hidden_, 3 * hidden_}, rng, sh));
    b = ps.add(name + ".b", Tensor<T>::zeros({3 * hidden_}));
  }

  Var<T> step(const ParamRefs<T>& p, Var<T> x, Var<T> h) const {
    Var<T> gx = affine(x, p[wx], p[b]);
    Var<T> gh = matmul(h, p[wh]);
    Var<T> r = vsigmoid(slice_last(gx, 0, hidden) + slice_last(gh, 0, hidden));
    Var<T> z = vsigmoid(slice_last(gx, hidden, hidden) + slice_last(gh, hidden, hidden));
    Var<T> n = vtanh(slice_last(gx, 2 * hidden, hidden) + r * slice_last(gh, 2 * hidden, hidden));
    Var<T> one_minus_z = -z + T(1);
    return one_minus_z * n + z * h;
  }
};

// ---------------------------------------------------------------------------
// optimizer
// ---------------------------------------------------------------------------

// Adam with bias correction. State is serialized with checkpoints so a
// resumed run continues the exact trajectory.
template <class T>
class Adam {
 public:
  Adam() = default;
  Adam(const ParamStore<T>& store, T lr, T beta1, T beta2, T eps = T(1e-8))
      : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {
    m_.reserve(static_cast<size_t>(store.count()));
    v_.reserve(static_cast<size_t>(store.count()));
    for (int i = 0; i < store.count(); ++i) {
      m_.push_back(Tensor<T>(store.value(i).shape()));
      v_.push_back(Tensor<T>(store.value(i).shape()));
    }
  }

  // Applies the gradients accumulated in `refs` to `store`.
  void step(ParamStore<T>& store, const ParamRefs<T>& refs) {
    ++t_;
    const T bc1 = T(1) - std::pow(beta1_, static_cast<T>(t_));
    const T bc2 = T(1) - std::pow(beta2_, static_cast<T>(t_));
    for (int i = 0; i < store.count(); ++i) {
      const Tensor<T>& g = refs.vars[static_cast<size_t>(i)].grad();
      if (g.empty()) continue;
      Tensor<T>& p = store.value(i);
      Tensor<T>& m = m_[static_cast<size_t>(i)];
      Tensor<T>& v = v_[static_cast<size_t>(i)];
      for (int64_t j = 0; j < p.numel(); ++j) {
        m[j] = beta1_ * m[j] + (T(1) - beta1_) * g[j];
        v[j] = beta2_ * v[j] + (T(1) - beta2_) * g[j] * g[j];
        p[j] -= lr_ * (m[j] / bc1) / (std::sqrt(v[j] / bc2) + eps_);
      }
    }
  }

  int64_t steps_taken() const { return t_; }
  T learning_rate() const { return lr_; }

  std::vector<Tensor<T>>& moment1() { return m_; }
  std::vector<Tensor<T>>& moment2() { return v_; }
  void set_steps_taken(int64_t t) { t_ = t; }

 private:
  T lr_ = T(2e-4), beta1_ = T(0.5), beta2_ = T(0.999), eps_ = T(1e-8);
  int64_t t_ = 0;
  std::vector<Tensor<T>> m_;
  std::vector<Tensor<T>> v_;
};

}  // namespace crdcgan
