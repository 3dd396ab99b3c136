#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "vqseg/errors.hpp"
#include "vqseg/tensor.hpp"

namespace vqseg {

/// Polynomial decay: lr0 * (1 - iter/max_iters)^power.
inline double poly_lr(int64_t iter, double lr0, int64_t max_iters,
                      double power) {
  if (max_iters < 1) throw ConfigError("poly_lr: max_iters must be >= 1");
  if (iter < 0 || iter > max_iters)
    throw ConfigError("poly_lr: iter " + std::to_string(iter) +
                      " outside [0, " + std::to_string(max_iters) + "]");
  return lr0 * std::pow(1.0 - double(iter) / double(max_iters), power);
}

/// AdamW with decoupled weight decay:
///   p <- p - lr * ( m_hat / (sqrt(v_hat) + eps) + weight_decay * p ).
/// Parameters whose gradient was never allocated in the current graph are
/// skipped entirely (their moments also stay untouched).
template <typename T>
class AdamW {
 public:
  AdamW(double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8,
        double weight_decay = 0.01)
      : b1_(beta1), b2_(beta2), eps_(eps), wd_(weight_decay) {}

  void step(const std::vector<std::pair<std::string, TensorPtr<T>>>& params,
            double lr) {
    if (state_.empty()) {
      state_.resize(params.size());
      for (size_t i = 0; i < params.size(); ++i) {
        state_[i].m.assign(params[i].second->v.size(), T(0));
        state_[i].v.assign(params[i].second->v.size(), T(0));
      }
    }
    if (state_.size() != params.size())
      throw ConfigError("adamw: parameter list changed between steps");
    ++t_;
    const double bc1 = 1.0 - std::pow(b1_, double(t_));
    const double bc2 = 1.0 - std::pow(b2_, double(t_));
    for (size_t i = 0; i < params.size(); ++i) {
      auto& [name, p] = params[i];
      if (p->g.empty()) continue;
      auto& st = state_[i];
      for (size_t j = 0; j < p->v.size(); ++j) {
        const double g = double(p->g[j]);
        if (!std::isfinite(g))
          throw NumericalError("adamw: non-finite gradient in parameter '" +
                               name + "'");
        const double m = b1_ * double(st.m[j]) + (1.0 - b1_) * g;
        const double v = b2_ * double(st.v[j]) + (1.0 - b2_) * g * g;
        st.m[j] = T(m);
        st.v[j] = T(v);
        const double mhat = m / bc1;
        const double vhat = v / bc2;
        p->v[j] = T(double(p->v[j]) -
                    lr * (mhat / (std::sqrt(vhat) + eps_) +
                          wd_ * double(p->v[j])));
      }
    }
  }

  int64_t steps_taken() const { return t_; }

 private:
  struct Moments {
    std::vector<T> m, v;
  };
  double b1_, b2_, eps_, wd_;
  int64_t t_ = 0;
  std::vector<Moments> state_;
};

}  // namespace vqseg
