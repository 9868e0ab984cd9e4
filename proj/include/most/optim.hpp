#pragma once

#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "most/common.hpp"

namespace most {

// ---------------------------------------------------------------------------
// Named parameter collection. std::map keeps iteration in name order, so any
// walk over the store is deterministic.
// ---------------------------------------------------------------------------
template <typename T>
struct Param {
  Shape shape;
  std::vector<T> data;
};

template <typename T>
using ParamStore = std::map<std::string, Param<T>>;

template <typename T>
int64_t param_count(const ParamStore<T>& store) {
  int64_t n = 0;
  for (const auto& [name, p] : store) n += static_cast<int64_t>(p.data.size());
  return n;
}

// FNV-1a over all parameter bytes in name order; used for freeze contracts
// and trajectory-identity checks.
template <typename T>
uint64_t params_hash(const ParamStore<T>& store) {
  uint64_t h = 1469598103934665603ull;
  for (const auto& [name, p] : store) {
    h = fnv1a(name.data(), name.size(), h);
    h = fnv1a(p.data.data(), p.data.size() * sizeof(T), h);
  }
  return h;
}

// ---------------------------------------------------------------------------
// Adaptive moment estimation with bias correction. Moments are keyed by
// parameter name and allocated on first use.
// ---------------------------------------------------------------------------
template <typename T>
class Adam {
 public:
  explicit Adam(T lr, T beta1 = T(0.9), T beta2 = T(0.999), T eps = T(1e-8))
      : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}

  void step(ParamStore<T>& params, const std::map<std::string, std::vector<T>>& grads) {
    ++t_;
    const T bc1 = T(1) - std::pow(beta1_, static_cast<T>(t_));
    const T bc2 = T(1) - std::pow(beta2_, static_cast<T>(t_));
    for (auto& [name, p] : params) {
      auto git = grads.find(name);
      if (git == grads.end()) fail("Adam::step: missing gradient for '", name, "'");
      const std::vector<T>& g = git->second;
      if (g.size() != p.data.size())
        fail("Adam::step: gradient size ", g.size(), " != parameter size ", p.data.size(),
             " for '", name, "'");
      std::vector<T>& m = m_[name];
      std::vector<T>& v = v_[name];
      if (m.empty()) m.assign(g.size(), T(0));
      if (v.empty()) v.assign(g.size(), T(0));
      for (size_t i = 0; i < g.size(); ++i) {
        m[i] = beta1_ * m[i] + (T(1) - beta1_) * g[i];
        v[i] = beta2_ * v[i] + (T(1) - beta2_) * g[i] * g[i];
        const T mhat = m[i] / bc1;
        const T vhat = v[i] / bc2;
        p.data[i] -= lr_ * mhat / (std::sqrt(vhat) + eps_);
      }
    }
  }

  int64_t steps() const { return t_; }
  const std::map<std::string, std::vector<T>>& first_moments() const { return m_; }
  const std::map<std::string, std::vector<T>>& second_moments() const { return v_; }

  std::map<std::string, std::vector<T>>& mutable_first_moments() { return m_; }
  std::map<std::string, std::vector<T>>& mutable_second_moments() { return v_; }
  void set_steps(int64_t t) { t_ = t; }

 private:
  T lr_, beta1_, beta2_, eps_;
  int64_t t_ = 0;
  std::map<std::string, std::vector<T>> m_, v_;
};

}  // namespace most
