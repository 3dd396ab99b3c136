#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "vqseg/errors.hpp"
#include "vqseg/rng.hpp"

namespace vqseg {

/// Dense rank-4 shape in (batch, channels, height, width) order.
struct Shape4 {
  int n = 1, c = 1, h = 1, w = 1;

  int64_t numel() const { return int64_t(n) * c * h * w; }
  bool operator==(const Shape4&) const = default;

  int dim(int i) const {
    switch (i) {
      case 0: return n;
      case 1: return c;
      case 2: return h;
      default: return w;
    }
  }

  std::string str() const {
    return "(" + std::to_string(n) + "," + std::to_string(c) + "," +
           std::to_string(h) + "," + std::to_string(w) + ")";
  }
};

/// Global switch for graph construction. Tensor4::make clamps requires_grad
/// to false while this is off, so operations built under a NoGradGuard carry
/// no parents or backward closures (used by eval / inference paths).
inline bool& grad_mode() {
  thread_local bool on = true;
  return on;
}

struct NoGradGuard {
  bool prev;
  NoGradGuard() : prev(grad_mode()) { grad_mode() = false; }
  ~NoGradGuard() { grad_mode() = prev; }
};

/// Rank-4 array with a gradient slot and reverse-mode graph edges.
///
/// Values are written once when the node is created by an operation and are
/// immutable afterwards; only the grad slot mutates during backward().
template <typename T>
struct Tensor4 {
  Shape4 shape;
  std::vector<T> v;  // values, row-major (n, c, h, w)
  std::vector<T> g;  // gradient, allocated on demand
  bool requires_grad = false;

  // Reverse-mode edges. Leaves have no parents and no backward_fn.
  std::vector<std::shared_ptr<Tensor4<T>>> parents;
  std::function<void(Tensor4<T>&)> backward_fn;

  static std::shared_ptr<Tensor4<T>> make(Shape4 s, bool rg = false) {
    auto t = std::make_shared<Tensor4<T>>();
    t->shape = s;
    t->v.assign(size_t(s.numel()), T(0));
    t->requires_grad = rg && grad_mode();
    return t;
  }

  static std::shared_ptr<Tensor4<T>> scalar(T value, bool rg = false) {
    auto t = make({1, 1, 1, 1}, rg);
    t->v[0] = value;
    return t;
  }

  static std::shared_ptr<Tensor4<T>> from(Shape4 s, std::vector<T> data,
                                          bool rg = false) {
    if (int64_t(data.size()) != s.numel())
      throw ConfigError("tensor data size " + std::to_string(data.size()) +
                        " does not match shape " + s.str());
    auto t = std::make_shared<Tensor4<T>>();
    t->shape = s;
    t->v = std::move(data);
    t->requires_grad = rg && grad_mode();
    return t;
  }

  static std::shared_ptr<Tensor4<T>> randn(Shape4 s, Rng& rng, T stddev,
                                           bool rg = false) {
    auto t = make(s, rg);
    for (auto& x : t->v) x = T(rng.normal()) * stddev;
    return t;
  }

  int64_t numel() const { return shape.numel(); }

  int64_t idx(int b, int ch, int y, int x) const {
    return ((int64_t(b) * shape.c + ch) * shape.h + y) * shape.w + x;
  }
  T& at(int b, int ch, int y, int x) { return v[size_t(idx(b, ch, y, x))]; }
  const T& at(int b, int ch, int y, int x) const {
    return v[size_t(idx(b, ch, y, x))];
  }

  void ensure_grad() {
    if (g.size() != v.size()) g.assign(v.size(), T(0));
  }
  void zero_grad() {
    if (!g.empty()) std::fill(g.begin(), g.end(), T(0));
  }

  /// Value of a one-element tensor.
  T item() const {
    internal_check(numel() == 1, "item() on non-scalar tensor " + shape.str());
    return v[0];
  }

  bool all_finite() const {
    for (const T& x : v)
      if (!std::isfinite(double(x))) return false;
    return true;
  }
};

template <typename T>
using TensorPtr = std::shared_ptr<Tensor4<T>>;

namespace detail {

/// Post-order over the subgraph that contributes gradient to `root`.
template <typename T>
std::vector<Tensor4<T>*> topo_order(Tensor4<T>* root) {
  std::vector<Tensor4<T>*> order;
  std::unordered_set<Tensor4<T>*> seen;
  struct Frame {
    Tensor4<T>* node;
    size_t next;
  };
  std::vector<Frame> stack;
  stack.push_back({root, 0});
  seen.insert(root);
  while (!stack.empty()) {
    Frame f = stack.back();
    if (f.next < f.node->parents.size()) {
      stack.back().next++;
      Tensor4<T>* p = f.node->parents[f.next].get();
      if (p->requires_grad && !seen.count(p)) {
        seen.insert(p);
        stack.push_back({p, 0});
      }
    } else {
      order.push_back(f.node);
      stack.pop_back();
    }
  }
  return order;
}

}  // namespace detail

/// Reverse-mode pass from a scalar root. Zeroes the grad of every node in
/// the reachable subgraph (leaves included) before seeding the root with 1.
template <typename T>
void backward(const TensorPtr<T>& root) {
  if (root == nullptr || root->numel() != 1)
    throw ConfigError("backward() root must be a scalar");
  if (!root->requires_grad) return;
  auto order = detail::topo_order(root.get());
  for (auto* t : order) {
    t->ensure_grad();
    t->zero_grad();
  }
  root->g[0] = T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    if ((*it)->backward_fn) (*it)->backward_fn(**it);
  }
}

}  // namespace vqseg
