// SPDX-License-Identifier: Apache-2.0
//
// Dense tensors plus a reverse-mode gradient tape. Single-threaded by
// contract: forward/backward over one tape never spawns threads, so two
// runs with the same seed produce bit-identical values.
#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <memory>
#include <utility>
#include <vector>

#include "moelab/common.hpp"

namespace moelab {

template <class S>
struct TensorData {
  Shape shape;
  std::vector<S> value;
  std::vector<S> grad;  // empty until a gradient is accumulated
  bool requires_grad = false;
  int node = -1;  // tape node id, -1 while unregistered
  // per-element optimizer slots, kept with the values so structural edits
  // (expert duplication) can extend them consistently
  std::vector<S> opt_m, opt_v;
  long long opt_steps = 0;
};

// Value-semantics handle onto shared storage. detach() returns an alias that
// never receives gradient contributions (the data is still shared).
template <class S>
class Tensor {
public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    Tensor t;
    t.impl_ = std::make_shared<TensorData<S>>();
    t.impl_->shape = std::move(shape);
    t.impl_->value.assign(static_cast<size_t>(numel(t.impl_->shape)), S(0));
    t.impl_->requires_grad = requires_grad;
    return t;
  }

  static Tensor from(Shape shape, std::vector<S> value, bool requires_grad = false) {
    if (numel(shape) != static_cast<long long>(value.size()))
      throw ShapeError("from: " + shape_str(shape) + " does not hold " +
                       std::to_string(value.size()) + " values");
    Tensor t = zeros(std::move(shape), requires_grad);
    t.impl_->value = std::move(value);
    return t;
  }

  static Tensor scalar(S v) { return from({1}, {v}); }

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  int ndim() const { return static_cast<int>(impl_->shape.size()); }
  long long size() const { return static_cast<long long>(impl_->value.size()); }
  int rows() const { return impl_->shape.size() == 2 ? impl_->shape[0] : 1; }
  int cols() const { return impl_->shape.back(); }

  std::vector<S>& values() { return impl_->value; }
  const std::vector<S>& values() const { return impl_->value; }

  S& at(int i) { return impl_->value[static_cast<size_t>(i)]; }
  S at(int i) const { return impl_->value[static_cast<size_t>(i)]; }
  S& at(int r, int c) { return impl_->value[static_cast<size_t>(r) * cols() + c]; }
  S at(int r, int c) const { return impl_->value[static_cast<size_t>(r) * cols() + c]; }

  S item() const {
    if (size() != 1) throw ShapeError("item() on non-scalar " + shape_str(shape()));
    return impl_->value[0];
  }

  bool requires_grad() const { return impl_ && impl_->requires_grad && grad_enabled_; }
  void set_requires_grad(bool rg) { impl_->requires_grad = rg; }

  bool has_grad() const { return impl_ && !impl_->grad.empty(); }

  std::vector<S>& grad() {
    ensure_grad();
    return impl_->grad;
  }
  const std::vector<S>& grad_view() const { return impl_->grad; }

  void ensure_grad() {
    if (impl_->grad.empty()) impl_->grad.assign(impl_->value.size(), S(0));
  }
  void zero_grad() { impl_->grad.clear(); }

  // grad is exactly zero iff never touched or all entries are 0.0
  bool grad_is_exactly_zero() const {
    if (!impl_ || impl_->grad.empty()) return true;
    for (S g : impl_->grad)
      if (g != S(0)) return false;
    return true;
  }

  Tensor detach() const {
    Tensor t = *this;
    t.grad_enabled_ = false;
    return t;
  }

  std::shared_ptr<TensorData<S>> impl() const { return impl_; }

private:
  std::shared_ptr<TensorData<S>> impl_;
  bool grad_enabled_ = true;
};

template <class S>
struct TopK {
  std::vector<int> indices;  // rank order: value descending, ties to lowest index
  Tensor<S> values;
};

// Deep copy, including optimizer slots.
template <class S>
Tensor<S> clone(const Tensor<S>& t) {
  Tensor<S> out = Tensor<S>::from(t.shape(), t.values(), t.requires_grad());
  out.impl()->opt_m = t.impl()->opt_m;
  out.impl()->opt_v = t.impl()->opt_v;
  out.impl()->opt_steps = t.impl()->opt_steps;
  return out;
}

// New [r x (c+1)] tensor whose appended column copies src_col, optimizer
// slots included.
template <class S>
Tensor<S> append_col_copy(const Tensor<S>& t, int src_col) {
  const int r = t.shape()[0], c = t.shape()[1];
  Tensor<S> out = Tensor<S>::zeros({r, c + 1}, t.requires_grad());
  auto widen = [&](const std::vector<S>& src, std::vector<S>& dst) {
    if (src.empty()) return;
    dst.assign(static_cast<size_t>(r) * (c + 1), S(0));
    for (int i = 0; i < r; ++i) {
      for (int j = 0; j < c; ++j) dst[static_cast<size_t>(i) * (c + 1) + j] = src[static_cast<size_t>(i) * c + j];
      dst[static_cast<size_t>(i) * (c + 1) + c] = src[static_cast<size_t>(i) * c + src_col];
    }
  };
  widen(t.values(), out.values());
  widen(t.impl()->opt_m, out.impl()->opt_m);
  widen(t.impl()->opt_v, out.impl()->opt_v);
  out.impl()->opt_steps = t.impl()->opt_steps;
  return out;
}

// 1-d counterpart of append_col_copy.
template <class S>
Tensor<S> append_elem_copy(const Tensor<S>& t, int src) {
  const int n = t.shape()[0];
  Tensor<S> out = Tensor<S>::zeros({n + 1}, t.requires_grad());
  auto widen = [&](const std::vector<S>& s, std::vector<S>& dst) {
    if (s.empty()) return;
    dst.assign(static_cast<size_t>(n) + 1, S(0));
    std::copy(s.begin(), s.end(), dst.begin());
    dst[static_cast<size_t>(n)] = s[static_cast<size_t>(src)];
  };
  widen(t.values(), out.values());
  widen(t.impl()->opt_m, out.impl()->opt_m);
  widen(t.impl()->opt_v, out.impl()->opt_v);
  out.impl()->opt_steps = t.impl()->opt_steps;
  return out;
}

// Recorded operations in topological order; backward walks them exactly once
// in reverse. Ops are members so call sites read tape.matmul(a, b).
template <class S>
class Tape {
public:
  struct Record {
    int out;
    std::vector<int> ins;
  };

  bool grad_enabled = true;

  size_t num_entries() const { return entries_.size(); }
  const std::vector<Record>& records() const { return records_; }

  void reset() {
    entries_.clear();
    records_.clear();
    next_node_ = 0;
  }

  // Accumulates into leaf gradients. Activation (non-leaf) gradients must be
  // cleared between backward calls on the same tape; see
  // zero_activation_grads().
  void backward(const Tensor<S>& root, S seed = S(1)) {
    if (root.size() != 1) throw ShapeError("backward root must be scalar");
    auto impl = root.impl();
    if (impl->grad.empty()) impl->grad.assign(impl->value.size(), S(0));
    impl->grad[0] += seed;
    for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) {
      if (it->out->grad.empty()) continue;  // not reachable from the root
      it->fn();
    }
  }

  void zero_activation_grads() {
    for (auto& e : entries_) e.out->grad.clear();
  }

  // ---- elementwise ----------------------------------------------------

  Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b) {
    if (a.shape() != b.shape())
      throw ShapeError("add: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    Tensor<S> out = Tensor<S>::zeros(a.shape());
    const size_t n = a.values().size();
    for (size_t i = 0; i < n; ++i) out.values()[i] = a.values()[i] + b.values()[i];
    record(out, {a, b}, [ao = a.impl(), bo = b.impl(), oo = out.impl(), ra = a.requires_grad(),
                         rb = b.requires_grad()]() {
      const auto& g = oo->grad;
      if (ra) {
        if (ao->grad.empty()) ao->grad.assign(ao->value.size(), S(0));
        for (size_t i = 0; i < g.size(); ++i) ao->grad[i] += g[i];
      }
      if (rb) {
        if (bo->grad.empty()) bo->grad.assign(bo->value.size(), S(0));
        for (size_t i = 0; i < g.size(); ++i) bo->grad[i] += g[i];
      }
    });
    return out;
  }

  Tensor<S> mul(const Tensor<S>& a, const Tensor<S>& b) {
    if (a.shape() != b.shape())
      throw ShapeError("mul: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    Tensor<S> out = Tensor<S>::zeros(a.shape());
    const size_t n = a.values().size();
    for (size_t i = 0; i < n; ++i) out.values()[i] = a.values()[i] * b.values()[i];
    record(out, {a, b}, [ao = a.impl(), bo = b.impl(), oo = out.impl(), ra = a.requires_grad(),
                         rb = b.requires_grad()]() {
      const auto& g = oo->grad;
      if (ra) {
        if (ao->grad.empty()) ao->grad.assign(ao->value.size(), S(0));
        for (size_t i = 0; i < g.size(); ++i) ao->grad[i] += g[i] * bo->value[i];
      }
      if (rb) {
        if (bo->grad.empty()) bo->grad.assign(bo->value.size(), S(0));
        for (size_t i = 0; i < g.size(); ++i) bo->grad[i] += g[i] * ao->value[i];
      }
    });
    return out;
  }

  Tensor<S> scale(const Tensor<S>& x, S c) {
    Tensor<S> out = Tensor<S>::zeros(x.shape());
    for (size_t i = 0; i < x.values().size(); ++i) out.values()[i] = c * x.values()[i];
    record(out, {x}, [xo = x.impl(), oo = out.impl(), rx = x.requires_grad(), c]() {
      if (!rx) return;
      if (xo->grad.empty()) xo->grad.assign(xo->value.size(), S(0));
      for (size_t i = 0; i < oo->grad.size(); ++i) xo->grad[i] += c * oo->grad[i];
    });
    return out;
  }

  // ca*a + cb*b, same shapes (loss blending)
  Tensor<S> add_scaled(const Tensor<S>& a, S ca, const Tensor<S>& b, S cb) {
    if (a.shape() != b.shape())
      throw ShapeError("add_scaled: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    Tensor<S> out = Tensor<S>::zeros(a.shape());
    for (size_t i = 0; i < a.values().size(); ++i)
      out.values()[i] = ca * a.values()[i] + cb * b.values()[i];
    record(out, {a, b}, [ao = a.impl(), bo = b.impl(), oo = out.impl(), ra = a.requires_grad(),
                         rb = b.requires_grad(), ca, cb]() {
      const auto& g = oo->grad;
      if (ra) {
        if (ao->grad.empty()) ao->grad.assign(ao->value.size(), S(0));
        for (size_t i = 0; i < g.size(); ++i) ao->grad[i] += ca * g[i];
      }
      if (rb) {
        if (bo->grad.empty()) bo->grad.assign(bo->value.size(), S(0));
        for (size_t i = 0; i < g.size(); ++i) bo->grad[i] += cb * g[i];
      }
    });
    return out;
  }

  // ---- linear algebra --------------------------------------------------

  Tensor<S> matmul(const Tensor<S>& a, const Tensor<S>& b) {
    if (a.ndim() != 2 || b.ndim() != 2)
      throw ShapeError("matmul expects 2-d operands");
    const int m = a.shape()[0], k = a.shape()[1];
    const int k2 = b.shape()[0], n = b.shape()[1];
    if (k != k2)
      throw ShapeError("matmul: inner extents differ, " + shape_str(a.shape()) + " x " +
                       shape_str(b.shape()));
    Tensor<S> out = Tensor<S>::zeros({m, n});
    const S* A = a.values().data();
    const S* B = b.values().data();
    S* C = out.values().data();
    for (int i = 0; i < m; ++i)
      for (int p = 0; p < k; ++p) {
        const S av = A[i * k + p];
        if (av == S(0)) continue;
        const S* brow = B + p * n;
        S* crow = C + i * n;
        for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
      }
    record(out, {a, b}, [ao = a.impl(), bo = b.impl(), oo = out.impl(), ra = a.requires_grad(),
                         rb = b.requires_grad(), m, k, n]() {
      const S* G = oo->grad.data();
      if (ra) {
        if (ao->grad.empty()) ao->grad.assign(ao->value.size(), S(0));
        S* dA = ao->grad.data();
        const S* B = bo->value.data();
        // dA = G * B^T
        for (int i = 0; i < m; ++i)
          for (int p = 0; p < k; ++p) {
            S acc = S(0);
            const S* grow = G + i * n;
            const S* brow = B + p * n;
            for (int j = 0; j < n; ++j) acc += grow[j] * brow[j];
            dA[i * k + p] += acc;
          }
      }
      if (rb) {
        if (bo->grad.empty()) bo->grad.assign(bo->value.size(), S(0));
        S* dB = bo->grad.data();
        const S* A = ao->value.data();
        // dB = A^T * G
        for (int i = 0; i < m; ++i) {
          const S* grow = G + i * n;
          for (int p = 0; p < k; ++p) {
            const S av = A[i * k + p];
            if (av == S(0)) continue;
            S* brow = dB + p * n;
            for (int j = 0; j < n; ++j) brow[j] += av * grow[j];
          }
        }
      }
    });
    return out;
  }

  // [T x n] + [n], broadcast over rows
  Tensor<S> add_bias(const Tensor<S>& x, const Tensor<S>& b) {
    if (x.ndim() != 2 || b.ndim() != 1 || x.shape()[1] != b.shape()[0])
      throw ShapeError("add_bias: " + shape_str(x.shape()) + " + " + shape_str(b.shape()));
    const int T = x.shape()[0], n = x.shape()[1];
    Tensor<S> out = Tensor<S>::zeros(x.shape());
    for (int t = 0; t < T; ++t)
      for (int j = 0; j < n; ++j) out.at(t, j) = x.at(t, j) + b.at(j);
    record(out, {x, b}, [xo = x.impl(), bo = b.impl(), oo = out.impl(), rx = x.requires_grad(),
                         rb = b.requires_grad(), T, n]() {
      const S* G = oo->grad.data();
      if (rx) {
        if (xo->grad.empty()) xo->grad.assign(xo->value.size(), S(0));
        for (size_t i = 0; i < oo->grad.size(); ++i) xo->grad[i] += G[i];
      }
      if (rb) {
        if (bo->grad.empty()) bo->grad.assign(bo->value.size(), S(0));
        for (int t = 0; t < T; ++t)
          for (int j = 0; j < n; ++j) bo->grad[j] += G[t * n + j];
      }
    });
    return out;
  }

  // ---- nonlinearities --------------------------------------------------

  // tanh approximation, constant 0.044715
  Tensor<S> gelu(const Tensor<S>& x) {
    Tensor<S> out = Tensor<S>::zeros(x.shape());
    for (size_t i = 0; i < x.values().size(); ++i) out.values()[i] = gelu_val(x.values()[i]);
    record(out, {x}, [xo = x.impl(), oo = out.impl(), rx = x.requires_grad()]() {
      if (!rx) return;
      if (xo->grad.empty()) xo->grad.assign(xo->value.size(), S(0));
      for (size_t i = 0; i < oo->grad.size(); ++i)
        xo->grad[i] += gelu_grad(xo->value[i]) * oo->grad[i];
    });
    return out;
  }

  static S gelu_val(S x) {
    const S c = S(0.7978845608028654);  // sqrt(2/pi)
    const S a = S(0.044715);
    return S(0.5) * x * (S(1) + std::tanh(c * (x + a * x * x * x)));
  }

  static S gelu_grad(S x) {
    const S c = S(0.7978845608028654);
    const S a = S(0.044715);
    const S t = std::tanh(c * (x + a * x * x * x));
    const S dt = (S(1) - t * t) * c * (S(1) + S(3) * a * x * x);
    return S(0.5) * (S(1) + t) + S(0.5) * x * dt;
  }

  // ---- softmax family --------------------------------------------------

  // Masked entries (mask byte 0) get probability exactly 0 and are skipped in
  // the normalization, so appending a fully-masked column leaves the other
  // probabilities bit-identical.
  Tensor<S> softmax(const Tensor<S>& x, int axis = -1,
                    const std::vector<uint8_t>* mask = nullptr) {
    return softmax_impl(x, axis, mask, /*log_form=*/false);
  }

  Tensor<S> log_softmax(const Tensor<S>& x, int axis = -1) {
    return softmax_impl(x, axis, nullptr, /*log_form=*/true);
  }

  // mean negative log-likelihood over active positions; targets[i] < 0 marks
  // an inactive position
  Tensor<S> cross_entropy(const Tensor<S>& logits, const std::vector<int>& targets) {
    if (logits.ndim() != 2 || static_cast<int>(targets.size()) != logits.shape()[0])
      throw ShapeError("cross_entropy: logits " + shape_str(logits.shape()) + " vs " +
                       std::to_string(targets.size()) + " targets");
    const int T = logits.shape()[0], V = logits.shape()[1];
    int active = 0;
    for (int t = 0; t < T; ++t) {
      if (targets[t] >= V) throw ArgumentError("cross_entropy: target id out of range");
      if (targets[t] >= 0) ++active;
    }
    if (active == 0) throw ArgumentError("cross_entropy: no active positions");
    check_finite(logits.values(), "cross_entropy logits");

    // save softmax rows for backward
    auto probs = std::make_shared<std::vector<S>>(logits.values().size());
    S loss = S(0);
    for (int t = 0; t < T; ++t) {
      const S* row = logits.values().data() + static_cast<size_t>(t) * V;
      S mx = row[0];
      for (int j = 1; j < V; ++j) mx = std::max(mx, row[j]);
      S sum = S(0);
      for (int j = 0; j < V; ++j) sum += std::exp(row[j] - mx);
      const S logsum = std::log(sum) + mx;
      S* prow = probs->data() + static_cast<size_t>(t) * V;
      for (int j = 0; j < V; ++j) prow[j] = std::exp(row[j] - logsum);
      if (targets[t] >= 0) loss += logsum - row[targets[t]];
    }
    Tensor<S> out = Tensor<S>::scalar(loss / S(active));
    record(out, {logits},
           [lo = logits.impl(), oo = out.impl(), rl = logits.requires_grad(), probs,
            targets, T, V, active]() {
             if (!rl) return;
             const S g = oo->grad[0] / S(active);
             if (lo->grad.empty()) lo->grad.assign(lo->value.size(), S(0));
             for (int t = 0; t < T; ++t) {
               if (targets[t] < 0) continue;
               const S* prow = probs->data() + static_cast<size_t>(t) * V;
               S* grow = lo->grad.data() + static_cast<size_t>(t) * V;
               for (int j = 0; j < V; ++j) grow[j] += g * prow[j];
               grow[targets[t]] -= g;
             }
           });
    return out;
  }

  // mean over rows of KL(p || q) with q given in log space along the last
  // axis; 0*log 0 treated as 0
  Tensor<S> kl_divergence(const Tensor<S>& p, const Tensor<S>& log_q) {
    if (p.shape() != log_q.shape())
      throw ShapeError("kl_divergence: " + shape_str(p.shape()) + " vs " +
                       shape_str(log_q.shape()));
    check_finite(p.values(), "kl p");
    check_finite(log_q.values(), "kl log_q");
    const int n = p.shape().back();
    const int rows = static_cast<int>(p.values().size()) / n;
    for (int r = 0; r < rows; ++r) {
      S sum = S(0);
      for (int j = 0; j < n; ++j) sum += p.at(r * n + j);
      if (std::abs(double(sum) - 1.0) > 1e-6)
        throw ArgumentError("kl_divergence: p row does not sum to 1");
    }
    S total = S(0);
    for (int r = 0; r < rows; ++r)
      for (int j = 0; j < n; ++j) {
        const S pv = p.at(r * n + j);
        if (pv > S(0)) total += pv * (std::log(pv) - log_q.at(r * n + j));
      }
    Tensor<S> out = Tensor<S>::scalar(total / S(rows));
    record(out, {p, log_q},
           [po = p.impl(), qo = log_q.impl(), oo = out.impl(), rp = p.requires_grad(),
            rq = log_q.requires_grad(), rows, n]() {
             const S g = oo->grad[0] / S(rows);
             if (rq) {
               if (qo->grad.empty()) qo->grad.assign(qo->value.size(), S(0));
               for (size_t i = 0; i < qo->grad.size(); ++i) qo->grad[i] -= g * po->value[i];
             }
             if (rp) {
               if (po->grad.empty()) po->grad.assign(po->value.size(), S(0));
               for (size_t i = 0; i < po->grad.size(); ++i) {
                 const S pv = po->value[i];
                 const S dlp = pv > S(0) ? std::log(pv) + S(1) : S(0);
                 po->grad[i] += g * (dlp - qo->value[i]);
               }
             }
           });
    return out;
  }

  // ---- selection / indexing ---------------------------------------------

  // k largest of a 1-d tensor; ties broken by lowest index. The index
  // selection is a constant in the backward pass; gradient flows only
  // through the gathered values.
  TopK<S> top_k(const Tensor<S>& x, int k) {
    if (x.ndim() != 1) throw ShapeError("top_k expects 1-d input");
    const int n = x.shape()[0];
    if (k < 1 || k > n) throw ArgumentError("top_k: k=" + std::to_string(k) + " out of [1," +
                                            std::to_string(n) + "]");
    std::vector<int> idx(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) idx[static_cast<size_t>(i)] = i;
    std::stable_sort(idx.begin(), idx.end(), [&](int a, int b) { return x.at(a) > x.at(b); });
    idx.resize(static_cast<size_t>(k));
    TopK<S> out;
    out.indices = idx;
    out.values = gather_elems(x, idx);
    return out;
  }

  Tensor<S> gather_elems(const Tensor<S>& x, const std::vector<int>& indices) {
    Tensor<S> out = Tensor<S>::zeros({static_cast<int>(indices.size())});
    for (size_t i = 0; i < indices.size(); ++i) out.at(static_cast<int>(i)) = x.at(indices[i]);
    record(out, {x}, [xo = x.impl(), oo = out.impl(), rx = x.requires_grad(), indices]() {
      if (!rx) return;
      if (xo->grad.empty()) xo->grad.assign(xo->value.size(), S(0));
      for (size_t i = 0; i < indices.size(); ++i)
        xo->grad[static_cast<size_t>(indices[i])] += oo->grad[i];
    });
    return out;
  }

  Tensor<S> gather_rows(const Tensor<S>& x, const std::vector<int>& rows) {
    if (x.ndim() != 2) throw ShapeError("gather_rows expects 2-d input");
    const int n = x.shape()[1];
    Tensor<S> out = Tensor<S>::zeros({static_cast<int>(rows.size()), n});
    for (size_t i = 0; i < rows.size(); ++i)
      std::copy_n(x.values().data() + static_cast<size_t>(rows[i]) * n, n,
                  out.values().data() + i * n);
    record(out, {x}, [xo = x.impl(), oo = out.impl(), rx = x.requires_grad(), rows, n]() {
      if (!rx) return;
      if (xo->grad.empty()) xo->grad.assign(xo->value.size(), S(0));
      for (size_t i = 0; i < rows.size(); ++i) {
        const S* g = oo->grad.data() + i * n;
        S* dst = xo->grad.data() + static_cast<size_t>(rows[i]) * n;
        for (int j = 0; j < n; ++j) dst[j] += g[j];
      }
    });
    return out;
  }

  // (row, col) gathers from a 2-d tensor into a 1-d tensor
  Tensor<S> gather_at(const Tensor<S>& x, const std::vector<std::pair<int, int>>& at) {
    if (x.ndim() != 2) throw ShapeError("gather_at expects 2-d input");
    const int n = x.shape()[1];
    Tensor<S> out = Tensor<S>::zeros({static_cast<int>(at.size())});
    for (size_t i = 0; i < at.size(); ++i)
      out.at(static_cast<int>(i)) = x.at(at[i].first, at[i].second);
    record(out, {x}, [xo = x.impl(), oo = out.impl(), rx = x.requires_grad(), at, n]() {
      if (!rx) return;
      if (xo->grad.empty()) xo->grad.assign(xo->value.size(), S(0));
      for (size_t i = 0; i < at.size(); ++i)
        xo->grad[static_cast<size_t>(at[i].first) * n + at[i].second] += oo->grad[i];
    });
    return out;
  }

  // out[rows[i], :] = w[i] * y[i, :]; rows must be unique. Output has
  // total_rows rows, zeros elsewhere.
  Tensor<S> scatter_rows_scaled(const Tensor<S>& y, const Tensor<S>& w,
                                const std::vector<int>& rows, int total_rows) {
    if (y.ndim() != 2 || w.ndim() != 1 || y.shape()[0] != w.shape()[0] ||
        y.shape()[0] != static_cast<int>(rows.size()))
      throw ShapeError("scatter_rows_scaled: inconsistent operands");
    const int n = y.shape()[1];
    Tensor<S> out = Tensor<S>::zeros({total_rows, n});
    for (size_t i = 0; i < rows.size(); ++i) {
      const S* src = y.values().data() + i * n;
      S* dst = out.values().data() + static_cast<size_t>(rows[i]) * n;
      const S wi = w.at(static_cast<int>(i));
      for (int j = 0; j < n; ++j) dst[j] = wi * src[j];
    }
    record(out, {y, w},
           [yo = y.impl(), wo = w.impl(), oo = out.impl(), ry = y.requires_grad(),
            rw = w.requires_grad(), rows, n]() {
             if (ry && yo->grad.empty()) yo->grad.assign(yo->value.size(), S(0));
             if (rw && wo->grad.empty()) wo->grad.assign(wo->value.size(), S(0));
             for (size_t i = 0; i < rows.size(); ++i) {
               const S* g = oo->grad.data() + static_cast<size_t>(rows[i]) * n;
               const S wi = wo->value[i];
               if (ry) {
                 S* dy = yo->grad.data() + i * n;
                 for (int j = 0; j < n; ++j) dy[j] += wi * g[j];
               }
               if (rw) {
                 const S* yv = yo->value.data() + i * n;
                 S acc = S(0);
                 for (int j = 0; j < n; ++j) acc += yv[j] * g[j];
                 wo->grad[i] += acc;
               }
             }
           });
    return out;
  }

  // ---- normalization / embedding -----------------------------------------

  static constexpr double kLayerNormEps = 1e-5;

  Tensor<S> layer_norm(const Tensor<S>& x, const Tensor<S>& gain, const Tensor<S>& bias) {
    if (x.ndim() != 2 || gain.ndim() != 1 || bias.ndim() != 1 ||
        gain.shape()[0] != x.shape()[1] || bias.shape()[0] != x.shape()[1])
      throw ShapeError("layer_norm: bad operand shapes");
    const int T = x.shape()[0], n = x.shape()[1];
    Tensor<S> out = Tensor<S>::zeros(x.shape());
    auto xhat = std::make_shared<std::vector<S>>(x.values().size());
    auto inv_std = std::make_shared<std::vector<S>>(static_cast<size_t>(T));
    for (int t = 0; t < T; ++t) {
      const S* row = x.values().data() + static_cast<size_t>(t) * n;
      S mean = S(0);
      for (int j = 0; j < n; ++j) mean += row[j];
      mean /= S(n);
      S var = S(0);
      for (int j = 0; j < n; ++j) var += (row[j] - mean) * (row[j] - mean);
      var /= S(n);
      const S istd = S(1) / std::sqrt(var + S(kLayerNormEps));
      (*inv_std)[static_cast<size_t>(t)] = istd;
      S* hrow = xhat->data() + static_cast<size_t>(t) * n;
      S* orow = out.values().data() + static_cast<size_t>(t) * n;
      for (int j = 0; j < n; ++j) {
        hrow[j] = (row[j] - mean) * istd;
        orow[j] = hrow[j] * gain.at(j) + bias.at(j);
      }
    }
    record(out, {x, gain, bias},
           [xo = x.impl(), go = gain.impl(), bo = bias.impl(), oo = out.impl(),
            rx = x.requires_grad(), rg = gain.requires_grad(), rb = bias.requires_grad(), xhat,
            inv_std, T, n]() {
             const S* G = oo->grad.data();
             if (rg && go->grad.empty()) go->grad.assign(go->value.size(), S(0));
             if (rb && bo->grad.empty()) bo->grad.assign(bo->value.size(), S(0));
             if (rx && xo->grad.empty()) xo->grad.assign(xo->value.size(), S(0));
             for (int t = 0; t < T; ++t) {
               const S* g = G + static_cast<size_t>(t) * n;
               const S* h = xhat->data() + static_cast<size_t>(t) * n;
               if (rg)
                 for (int j = 0; j < n; ++j) go->grad[j] += g[j] * h[j];
               if (rb)
                 for (int j = 0; j < n; ++j) bo->grad[j] += g[j];
               if (rx) {
                 // dxhat = g * gain; dx = istd*(dxhat - mean(dxhat) - xhat*mean(dxhat*xhat))
                 S m1 = S(0), m2 = S(0);
                 for (int j = 0; j < n; ++j) {
                   const S dxh = g[j] * go->value[j];
                   m1 += dxh;
                   m2 += dxh * h[j];
                 }
                 m1 /= S(n);
                 m2 /= S(n);
                 const S istd = (*inv_std)[static_cast<size_t>(t)];
                 S* dx = xo->grad.data() + static_cast<size_t>(t) * n;
                 for (int j = 0; j < n; ++j)
                   dx[j] += istd * (g[j] * go->value[j] - m1 - h[j] * m2);
               }
             }
           });
    return out;
  }

  Tensor<S> embedding(const Tensor<S>& table, const std::vector<int>& ids) {
    if (table.ndim() != 2) throw ShapeError("embedding table must be 2-d");
    const int V = table.shape()[0], d = table.shape()[1];
    for (int id : ids)
      if (id < 0 || id >= V) throw ArgumentError("embedding id " + std::to_string(id) +
                                                 " out of range [0," + std::to_string(V) + ")");
    Tensor<S> out = Tensor<S>::zeros({static_cast<int>(ids.size()), d});
    for (size_t i = 0; i < ids.size(); ++i)
      std::copy_n(table.values().data() + static_cast<size_t>(ids[i]) * d, d,
                  out.values().data() + i * d);
    record(out, {table}, [to = table.impl(), oo = out.impl(), rt = table.requires_grad(), ids,
                          d]() {
      if (!rt) return;
      if (to->grad.empty()) to->grad.assign(to->value.size(), S(0));
      for (size_t i = 0; i < ids.size(); ++i) {
        const S* g = oo->grad.data() + i * d;
        S* dst = to->grad.data() + static_cast<size_t>(ids[i]) * d;
        for (int j = 0; j < d; ++j) dst[j] += g[j];
      }
    });
    return out;
  }

  // ---- reductions --------------------------------------------------------

  Tensor<S> mean_all(const Tensor<S>& x) {
    S acc = S(0);
    for (S v : x.values()) acc += v;
    const S n = S(static_cast<double>(x.values().size()));
    Tensor<S> out = Tensor<S>::scalar(acc / n);
    record(out, {x}, [xo = x.impl(), oo = out.impl(), rx = x.requires_grad(), n]() {
      if (!rx) return;
      if (xo->grad.empty()) xo->grad.assign(xo->value.size(), S(0));
      const S g = oo->grad[0] / n;
      for (auto& gv : xo->grad) gv += g;
    });
    return out;
  }

  Tensor<S> sum_all(const Tensor<S>& x) {
    S acc = S(0);
    for (S v : x.values()) acc += v;
    Tensor<S> out = Tensor<S>::scalar(acc);
    record(out, {x}, [xo = x.impl(), oo = out.impl(), rx = x.requires_grad()]() {
      if (!rx) return;
      if (xo->grad.empty()) xo->grad.assign(xo->value.size(), S(0));
      const S g = oo->grad[0];
      for (auto& gv : xo->grad) gv += g;
    });
    return out;
  }

  // ---- fused causal self-attention ----------------------------------------
  //
  // q, k, v are [T x d] with rows packed per sequence; seq_begin gives the
  // row offsets (size B+1). Scores use 1/sqrt(d); positions never attend
  // forward.
  Tensor<S> causal_attention(const Tensor<S>& q, const Tensor<S>& k, const Tensor<S>& v,
                             const std::vector<int>& seq_begin) {
    const int d = q.shape()[1];
    const int T = q.shape()[0];
    if (k.shape() != q.shape() || v.shape() != q.shape())
      throw ShapeError("causal_attention: q/k/v shapes differ");
    Tensor<S> out = Tensor<S>::zeros({T, d});
    const S inv_sqrt_d = S(1) / std::sqrt(S(d));
    // probabilities saved per sequence for the backward pass
    auto saved = std::make_shared<std::vector<std::vector<S>>>();
    saved->reserve(seq_begin.size() - 1);
    for (size_t s = 0; s + 1 < seq_begin.size(); ++s) {
      const int b = seq_begin[s], e = seq_begin[s + 1];
      const int L = e - b;
      std::vector<S> P(static_cast<size_t>(L) * L, S(0));
      for (int i = 0; i < L; ++i) {
        // scores over j <= i
        S mx = -std::numeric_limits<S>::infinity();
        std::vector<S> row(static_cast<size_t>(i) + 1);
        for (int j = 0; j <= i; ++j) {
          S acc = S(0);
          const S* qi = q.values().data() + static_cast<size_t>(b + i) * d;
          const S* kj = k.values().data() + static_cast<size_t>(b + j) * d;
          for (int c = 0; c < d; ++c) acc += qi[c] * kj[c];
          row[static_cast<size_t>(j)] = acc * inv_sqrt_d;
          mx = std::max(mx, row[static_cast<size_t>(j)]);
        }
        S sum = S(0);
        for (int j = 0; j <= i; ++j) {
          row[static_cast<size_t>(j)] = std::exp(row[static_cast<size_t>(j)] - mx);
          sum += row[static_cast<size_t>(j)];
        }
        S* prow = P.data() + static_cast<size_t>(i) * L;
        S* orow = out.values().data() + static_cast<size_t>(b + i) * d;
        for (int j = 0; j <= i; ++j) {
          const S pij = row[static_cast<size_t>(j)] / sum;
          prow[j] = pij;
          const S* vj = v.values().data() + static_cast<size_t>(b + j) * d;
          for (int c = 0; c < d; ++c) orow[c] += pij * vj[c];
        }
      }
      saved->push_back(std::move(P));
    }
    record(out, {q, k, v},
           [qo = q.impl(), ko = k.impl(), vo = v.impl(), oo = out.impl(),
            rq = q.requires_grad(), rk = k.requires_grad(), rv = v.requires_grad(), seq_begin,
            saved, d, inv_sqrt_d]() {
             if (rq && qo->grad.empty()) qo->grad.assign(qo->value.size(), S(0));
             if (rk && ko->grad.empty()) ko->grad.assign(ko->value.size(), S(0));
             if (rv && vo->grad.empty()) vo->grad.assign(vo->value.size(), S(0));
             for (size_t s = 0; s + 1 < seq_begin.size(); ++s) {
               const int b = seq_begin[s], e = seq_begin[s + 1];
               const int L = e - b;
               const std::vector<S>& P = (*saved)[s];
               std::vector<S> dS(static_cast<size_t>(L) * L, S(0));
               for (int i = 0; i < L; ++i) {
                 const S* go = oo->grad.data() + static_cast<size_t>(b + i) * d;
                 const S* prow = P.data() + static_cast<size_t>(i) * L;
                 // dP then softmax backward into dS
                 S dot = S(0);
                 std::vector<S> dP(static_cast<size_t>(i) + 1);
                 for (int j = 0; j <= i; ++j) {
                   const S* vj = vo->value.data() + static_cast<size_t>(b + j) * d;
                   S acc = S(0);
                   for (int c = 0; c < d; ++c) acc += go[c] * vj[c];
                   dP[static_cast<size_t>(j)] = acc;
                   dot += acc * prow[j];
                   if (rv) {
                     S* dvj = vo->grad.data() + static_cast<size_t>(b + j) * d;
                     for (int c = 0; c < d; ++c) dvj[c] += prow[j] * go[c];
                   }
                 }
                 for (int j = 0; j <= i; ++j)
                   dS[static_cast<size_t>(i) * L + j] =
                       prow[j] * (dP[static_cast<size_t>(j)] - dot);
               }
               if (rq || rk) {
                 for (int i = 0; i < L; ++i)
                   for (int j = 0; j <= i; ++j) {
                     const S ds = dS[static_cast<size_t>(i) * L + j] * inv_sqrt_d;
                     if (ds == S(0)) continue;
                     const S* kj = ko->value.data() + static_cast<size_t>(b + j) * d;
                     const S* qi = qo->value.data() + static_cast<size_t>(b + i) * d;
                     if (rq) {
                       S* dqi = qo->grad.data() + static_cast<size_t>(b + i) * d;
                       for (int c = 0; c < d; ++c) dqi[c] += ds * kj[c];
                     }
                     if (rk) {
                       S* dkj = ko->grad.data() + static_cast<size_t>(b + j) * d;
                       for (int c = 0; c < d; ++c) dkj[c] += ds * qi[c];
                     }
                   }
               }
             }
           });
    return out;
  }

private:
  struct Entry {
    std::shared_ptr<TensorData<S>> out;
    std::function<void()> fn;
  };

  std::vector<Entry> entries_;
  std::vector<Record> records_;
  int next_node_ = 0;

  void touch(const Tensor<S>& t) {
    if (t.impl()->node < 0) t.impl()->node = next_node_++;
  }

  void record(Tensor<S>& out, std::initializer_list<Tensor<S>> ins, std::function<void()> fn) {
    if (!grad_enabled) return;
    Record rec;
    bool needs_grad = false;
    for (const Tensor<S>& in : ins) {
      touch(in);
      needs_grad = needs_grad || in.requires_grad();
      rec.ins.push_back(in.impl()->node);
    }
    out.impl()->requires_grad = needs_grad;
    out.impl()->node = next_node_++;
    rec.out = out.impl()->node;
    records_.push_back(std::move(rec));
    entries_.push_back({out.impl(), std::move(fn)});
  }

  static void check_finite(const std::vector<S>& v, const char* what) {
    for (S x : v)
      if (!std::isfinite(double(x))) throw NumericError(std::string(what) + " contains NaN/Inf");
  }

  Tensor<S> softmax_impl(const Tensor<S>& x, int axis, const std::vector<uint8_t>* mask,
                         bool log_form) {
    const int nd = x.ndim();
    if (axis < 0) axis += nd;
    if (axis < 0 || axis >= nd) throw ArgumentError("softmax: bad axis");
    if (mask && mask->size() != x.values().size())
      throw ShapeError("softmax: mask size mismatch");
    if (mask && log_form) throw ArgumentError("log_softmax does not take a mask");

    const int n = x.shape()[axis];
    long long inner = 1, outer = 1;
    for (int i = axis + 1; i < nd; ++i) inner *= x.shape()[i];
    for (int i = 0; i < axis; ++i) outer *= x.shape()[i];

    Tensor<S> out = Tensor<S>::zeros(x.shape());
    const S* X = x.values().data();
    S* Y = out.values().data();
    const uint8_t* Mk = mask ? mask->data() : nullptr;
    for (long long o = 0; o < outer; ++o)
      for (long long in = 0; in < inner; ++in) {
        const long long base = o * n * inner + in;
        S mx = -std::numeric_limits<S>::infinity();
        bool any = false;
        for (int j = 0; j < n; ++j) {
          const long long at = base + j * inner;
          if (Mk && !Mk[at]) continue;
          const S v = X[at];
          if (!std::isfinite(double(v))) throw NumericError("softmax input contains NaN/Inf");
          mx = std::max(mx, v);
          any = true;
        }
        if (!any) throw ArgumentError("softmax: fully masked slice");
        S sum = S(0);
        for (int j = 0; j < n; ++j) {
          const long long at = base + j * inner;
          if (Mk && !Mk[at]) {
            Y[at] = S(0);
            continue;
          }
          const S e = std::exp(X[at] - mx);
          Y[at] = e;
          sum += e;
        }
        if (log_form) {
          const S logsum = std::log(sum) + mx;
          for (int j = 0; j < n; ++j) Y[base + j * inner] = X[base + j * inner] - logsum;
        } else {
          for (int j = 0; j < n; ++j) {
            const long long at = base + j * inner;
            if (Mk && !Mk[at]) continue;
            Y[at] /= sum;
          }
        }
      }

    if (log_form) {
      record(out, {x}, [xo = x.impl(), oo = out.impl(), rx = x.requires_grad(), n, inner,
                        outer]() {
        if (!rx) return;
        if (xo->grad.empty()) xo->grad.assign(xo->value.size(), S(0));
        for (long long o = 0; o < outer; ++o)
          for (long long in = 0; in < inner; ++in) {
            const long long base = o * n * inner + in;
            S gsum = S(0);
            for (int j = 0; j < n; ++j) gsum += oo->grad[base + j * inner];
            for (int j = 0; j < n; ++j) {
              const long long at = base + j * inner;
              xo->grad[at] += oo->grad[at] - std::exp(oo->value[at]) * gsum;
            }
          }
      });
    } else {
      record(out, {x}, [xo = x.impl(), oo = out.impl(), rx = x.requires_grad(), n, inner,
                        outer]() {
        if (!rx) return;
        if (xo->grad.empty()) xo->grad.assign(xo->value.size(), S(0));
        for (long long o = 0; o < outer; ++o)
          for (long long in = 0; in < inner; ++in) {
            const long long base = o * n * inner + in;
            S dot = S(0);
            for (int j = 0; j < n; ++j) {
              const long long at = base + j * inner;
              dot += oo->grad[at] * oo->value[at];
            }
            for (int j = 0; j < n; ++j) {
              const long long at = base + j * inner;
              xo->grad[at] += oo->value[at] * (oo->grad[at] - dot);
            }
          }
      });
    }
    return out;
  }
};

}  // namespace moelab
