#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "dan/model.hpp"

namespace dan {

enum class OptimizerFamily { ADAM, SGD };

struct OptimConfig {
  OptimizerFamily family = OptimizerFamily::ADAM;
  double learning_rate = 1e-4;
  double weight_decay = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  double momentum = 0.9;  // SGD only
};

template <typename S>
struct OptimizerState {
  std::int64_t step = 0;
  std::vector<std::vector<S>> m;  // first moment / momentum buffer
  std::vector<std::vector<S>> v;  // second moment (Adam)

  void init(const ParamSet<S>& params) {
    step = 0;
    m.clear();
    v.clear();
    for (const auto& [name, t] : params.items()) {
      m.emplace_back(static_cast<std::size_t>(t.size()), S(0));
      v.emplace_back(static_cast<std::size_t>(t.size()), S(0));
    }
  }
};

// One update over every parameter. Adam with bias correction; weight decay is
// decoupled, applied after the adaptive step as p <- p - lr*wd*p.
template <typename S>
void optimizer_step(ParamSet<S>& params, OptimizerState<S>& state, const OptimConfig& cfg) {
  if (state.m.size() != params.items().size()) state.init(params);
  ++state.step;
  S lr = static_cast<S>(cfg.learning_rate);
  S wd = static_cast<S>(cfg.weight_decay);
  S b1 = static_cast<S>(cfg.beta1), b2 = static_cast<S>(cfg.beta2);
  S eps = static_cast<S>(cfg.epsilon);
  S bc1 = S(1) - static_cast<S>(std::pow(cfg.beta1, static_cast<double>(state.step)));
  S bc2 = S(1) - static_cast<S>(std::pow(cfg.beta2, static_cast<double>(state.step)));

  for (std::size_t pi = 0; pi < params.items().size(); ++pi) {
    auto& [name, t] = params.items()[pi];
    const S* g = t.grad();
    for (std::int64_t i = 0; i < t.size(); ++i)
      if (!std::isfinite(g[i]))
        throw TrainingDivergenceError("non-finite gradient in parameter " + name);
    S* p = t.data();
    auto& mbuf = state.m[pi];
    auto& vbuf = state.v[pi];
    if (cfg.family == OptimizerFamily::ADAM) {
      for (std::int64_t i = 0; i < t.size(); ++i) {
        std::size_t ui = static_cast<std::size_t>(i);
        mbuf[ui] = b1 * mbuf[ui] + (S(1) - b1) * g[i];
        vbuf[ui] = b2 * vbuf[ui] + (S(1) - b2) * g[i] * g[i];
        S mhat = mbuf[ui] / bc1;
        S vhat = vbuf[ui] / bc2;
        p[i] -= lr * mhat / (std::sqrt(vhat) + eps);
        p[i] -= lr * wd * p[i];
      }
    } else {
      S mom = static_cast<S>(cfg.momentum);
      for (std::int64_t i = 0; i < t.size(); ++i) {
        std::size_t ui = static_cast<std::size_t>(i);
        mbuf[ui] = mom * mbuf[ui] + g[i];
        p[i] -= lr * mbuf[ui];
        p[i] -= lr * wd * p[i];
      }
    }
  }
}

}  // namespace dan
