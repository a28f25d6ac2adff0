#pragma once

#include <functional>
#include <string>
#include <vector>

#include "dan/gradcheck.hpp"
#include "dan/losses.hpp"
#include "dan/ops.hpp"
#include "dan/rng.hpp"

namespace dan {

struct GradSuiteEntry {
  std::string op;
  int instances = 0;
  int failed = 0;
  double worst_rel_err = 0.0;
};

struct GradSuiteResult {
  std::vector<GradSuiteEntry> entries;
  bool pass = true;
  int total_instances = 0;
};

namespace detail {

using D = Tensor<double>;
using F = std::function<D(Tape<double>*, const D&)>;

inline D rand_tensor(const Shape& shape, KeyedRng& rng, double lo = -1.0, double hi = 1.0) {
  D t(shape);
  for (std::int64_t i = 0; i < t.size(); ++i) t.data()[i] = rng.uniform(lo, hi);
  return t;
}

}  // namespace detail

// Randomized finite-difference sweep over every differentiable op and loss.
// Each op gets `instances` random shapes/values at tolerance `tol`.
inline GradSuiteResult run_grad_suite(int instances = 20, double tol = 1e-4,
                                      std::uint64_t seed = 0) {
  using detail::D;
  using detail::rand_tensor;
  GradSuiteResult result;

  auto sweep = [&](const std::string& name,
                   const std::function<void(KeyedRng&, std::vector<std::pair<D, detail::F>>&)>&
                       make_cases) {
    GradSuiteEntry entry;
    entry.op = name;
    KeyedRng rng(seed, std::hash<std::string>{}(name));
    for (int k = 0; k < instances; ++k) {
      std::vector<std::pair<D, detail::F>> cases;
      make_cases(rng, cases);
      for (auto& [x, f] : cases) {
        ++entry.instances;
        auto rep = finite_diff_check(f, x, 1e-5, tol);
        entry.worst_rel_err = std::max(entry.worst_rel_err, rep.max_rel_err);
        if (!rep.pass) ++entry.failed;
      }
    }
    result.total_instances += entry.instances;
    if (entry.failed > 0) result.pass = false;
    result.entries.push_back(entry);
  };

  auto scalarize = [](Tape<double>* t, D v) { return sum(t, square(t, v)); };

  // elementwise binaries: probe the first operand, second fixed
  sweep("add", [&](KeyedRng& rng, auto& cases) {
    int n = 2 + static_cast<int>(rng.next_below(6));
    D b = rand_tensor(Shape{n}, rng);
    cases.emplace_back(rand_tensor(Shape{n}, rng), [=](Tape<double>* t, const D& x) {
      return scalarize(t, add(t, x, b));
    });
  });
  sweep("sub", [&](KeyedRng& rng, auto& cases) {
    int n = 2 + static_cast<int>(rng.next_below(6));
    D b = rand_tensor(Shape{n}, rng);
    cases.emplace_back(rand_tensor(Shape{n}, rng), [=](Tape<double>* t, const D& x) {
      return scalarize(t, sub(t, b, x));
    });
  });
  sweep("mul", [&](KeyedRng& rng, auto& cases) {
    int n = 2 + static_cast<int>(rng.next_below(6));
    D b = rand_tensor(Shape{n}, rng);
    cases.emplace_back(rand_tensor(Shape{n}, rng), [=](Tape<double>* t, const D& x) {
      return scalarize(t, mul(t, x, b));
    });
  });
  sweep("div", [&](KeyedRng& rng, auto& cases) {
    int n = 2 + static_cast<int>(rng.next_below(6));
    D b = rand_tensor(Shape{n}, rng, 0.5, 2.0);
    cases.emplace_back(rand_tensor(Shape{n}, rng), [=](Tape<double>* t, const D& x) {
      return scalarize(t, div(t, x, b));
    });
    D a = rand_tensor(Shape{n}, rng);
    cases.emplace_back(rand_tensor(Shape{n}, rng, 0.5, 2.0), [=](Tape<double>* t, const D& x) {
      return scalarize(t, div(t, a, x));
    });
  });
  sweep("scale", [&](KeyedRng& rng, auto& cases) {
    double c = rng.uniform(-3, 3);
    cases.emplace_back(rand_tensor(Shape{4}, rng), [=](Tape<double>* t, const D& x) {
      return scalarize(t, scale(t, x, c));
    });
  });
  sweep("add_scalar", [&](KeyedRng& rng, auto& cases) {
    double c = rng.uniform(-3, 3);
    cases.emplace_back(rand_tensor(Shape{4}, rng), [=](Tape<double>* t, const D& x) {
      return scalarize(t, add_scalar(t, x, c));
    });
  });
  sweep("square", [&](KeyedRng& rng, auto& cases) {
    cases.emplace_back(rand_tensor(Shape{5}, rng), [=](Tape<double>* t, const D& x) {
      return sum(t, square(t, x));
    });
  });
  sweep("pow_scalar", [&](KeyedRng& rng, auto& cases) {
    double p = 1.0 + rng.uniform(0.0, 3.0);
    cases.emplace_back(rand_tensor(Shape{5}, rng, 0.2, 1.5), [=](Tape<double>* t, const D& x) {
      return sum(t, pow_scalar(t, x, p));
    });
  });
  sweep("log_clamped", [&](KeyedRng& rng, auto& cases) {
    cases.emplace_back(rand_tensor(Shape{5}, rng, 0.1, 2.0), [=](Tape<double>* t, const D& x) {
      return sum(t, log_clamped(t, x));
    });
  });
  sweep("recip_one_plus", [&](KeyedRng& rng, auto& cases) {
    cases.emplace_back(rand_tensor(Shape{4}, rng, 0.0, 2.0), [=](Tape<double>* t, const D& x) {
      return sum(t, recip_one_plus(t, x));
    });
  });
  sweep("relu", [&](KeyedRng& rng, auto& cases) {
    // keep probes away from the kink
    D x = rand_tensor(Shape{6}, rng);
    for (std::int64_t i = 0; i < x.size(); ++i)
      if (std::abs(x.data()[i]) < 0.05) x.data()[i] += 0.1;
    cases.emplace_back(x, [=](Tape<double>* t, const D& v) { return scalarize(t, relu(t, v)); });
  });
  sweep("sigmoid", [&](KeyedRng& rng, auto& cases) {
    cases.emplace_back(rand_tensor(Shape{6}, rng, -3, 3), [=](Tape<double>* t, const D& x) {
      return sum(t, sigmoid(t, x));
    });
  });
  sweep("tanh", [&](KeyedRng& rng, auto& cases) {
    cases.emplace_back(rand_tensor(Shape{6}, rng, -2, 2), [=](Tape<double>* t, const D& x) {
      return sum(t, tanh_op(t, x));
    });
  });
  sweep("softmax", [&](KeyedRng& rng, auto& cases) {
    int n = 2 + static_cast<int>(rng.next_below(3));
    int k = 2 + static_cast<int>(rng.next_below(6));
    cases.emplace_back(rand_tensor(Shape{n, k}, rng, -2, 2), [=](Tape<double>* t, const D& x) {
      return scalarize(t, softmax(t, x, 1));
    });
  });
  sweep("sum/mean", [&](KeyedRng& rng, auto& cases) {
    cases.emplace_back(rand_tensor(Shape{7}, rng), [=](Tape<double>* t, const D& x) {
      return square(t, sum(t, x));
    });
    cases.emplace_back(rand_tensor(Shape{7}, rng), [=](Tape<double>* t, const D& x) {
      return square(t, mean(t, x));
    });
  });
  sweep("sum_axis", [&](KeyedRng& rng, auto& cases) {
    int axis = static_cast<int>(rng.next_below(3));
    cases.emplace_back(rand_tensor(Shape{2, 3, 4}, rng), [=](Tape<double>* t, const D& x) {
      return scalarize(t, sum_axis(t, x, axis));
    });
  });
  sweep("stack_last", [&](KeyedRng& rng, auto& cases) {
    D other = rand_tensor(Shape{2, 3}, rng);
    cases.emplace_back(rand_tensor(Shape{2, 3}, rng), [=](Tape<double>* t, const D& x) {
      return scalarize(t, stack_last(t, std::vector<D>{x, other}));
    });
  });
  sweep("gather_rows", [&](KeyedRng& rng, auto& cases) {
    int n = 3 + static_cast<int>(rng.next_below(3));
    std::vector<int> labels;
    for (int i = 0; i < n; ++i) labels.push_back(static_cast<int>(rng.next_below(4)));
    cases.emplace_back(rand_tensor(Shape{n, 4}, rng), [=](Tape<double>* t, const D& x) {
      return scalarize(t, gather_rows(t, x, labels));
    });
  });
  sweep("select_col", [&](KeyedRng& rng, auto& cases) {
    int j = static_cast<int>(rng.next_below(3));
    cases.emplace_back(rand_tensor(Shape{4, 3}, rng), [=](Tape<double>* t, const D& x) {
      return scalarize(t, select_col(t, x, j));
    });
  });
  sweep("mul_spatial", [&](KeyedRng& rng, auto& cases) {
    D map = rand_tensor(Shape{2, 1, 3, 3}, rng, 0.1, 0.9);
    cases.emplace_back(rand_tensor(Shape{2, 4, 3, 3}, rng), [=](Tape<double>* t, const D& x) {
      return scalarize(t, mul_spatial(t, x, map));
    });
    D fm = rand_tensor(Shape{2, 4, 3, 3}, rng);
    cases.emplace_back(rand_tensor(Shape{2, 1, 3, 3}, rng, 0.1, 0.9),
                       [=](Tape<double>* t, const D& x) {
                         return scalarize(t, mul_spatial(t, fm, x));
                       });
  });
  sweep("mul_channel", [&](KeyedRng& rng, auto& cases) {
    D gate = rand_tensor(Shape{2, 4}, rng, 0.1, 0.9);
    cases.emplace_back(rand_tensor(Shape{2, 4, 3, 3}, rng), [=](Tape<double>* t, const D& x) {
      return scalarize(t, mul_channel(t, x, gate));
    });
    D fm = rand_tensor(Shape{2, 4, 3, 3}, rng);
    cases.emplace_back(rand_tensor(Shape{2, 4}, rng, 0.1, 0.9), [=](Tape<double>* t, const D& x) {
      return scalarize(t, mul_channel(t, fm, x));
    });
  });
  sweep("dense", [&](KeyedRng& rng, auto& cases) {
    int fin = 2 + static_cast<int>(rng.next_below(4));
    int fout = 2 + static_cast<int>(rng.next_below(4));
    D w = rand_tensor(Shape{fin, fout}, rng);
    D b = rand_tensor(Shape{fout}, rng);
    D x0 = rand_tensor(Shape{3, fin}, rng);
    cases.emplace_back(x0, [=](Tape<double>* t, const D& x) {
      return scalarize(t, dense(t, x, w, b));
    });
    cases.emplace_back(w.clone(), [=](Tape<double>* t, const D& wp) {
      return scalarize(t, dense(t, x0, wp, b));
    });
    cases.emplace_back(b.clone(), [=](Tape<double>* t, const D& bp) {
      return scalarize(t, dense(t, x0, w, bp));
    });
  });
  sweep("conv2d", [&](KeyedRng& rng, auto& cases) {
    int cin = 1 + static_cast<int>(rng.next_below(3));
    int cout = 1 + static_cast<int>(rng.next_below(3));
    int s = 4 + static_cast<int>(rng.next_below(3));
    int stride = 1 + static_cast<int>(rng.next_below(2));
    int padding = static_cast<int>(rng.next_below(2));
    D k = rand_tensor(Shape{cout, cin, 3, 3}, rng);
    D b = rand_tensor(Shape{cout}, rng);
    D x0 = rand_tensor(Shape{2, cin, s, s}, rng);
    cases.emplace_back(x0, [=](Tape<double>* t, const D& x) {
      return scalarize(t, conv2d(t, x, k, b, stride, padding));
    });
    cases.emplace_back(k.clone(), [=](Tape<double>* t, const D& kp) {
      return scalarize(t, conv2d(t, x0, kp, b, stride, padding));
    });
    cases.emplace_back(b.clone(), [=](Tape<double>* t, const D& bp) {
      return scalarize(t, conv2d(t, x0, k, bp, stride, padding));
    });
  });
  sweep("batchnorm", [&](KeyedRng& rng, auto& cases) {
    int n = 3 + static_cast<int>(rng.next_below(3));
    int f = 2 + static_cast<int>(rng.next_below(3));
    D gamma = rand_tensor(Shape{f}, rng, 0.5, 1.5);
    D beta = rand_tensor(Shape{f}, rng);
    D x0 = rand_tensor(Shape{n, f}, rng);
    // a plain sum-of-squares objective is nearly invariant to x under
    // normalization; weight elementwise to expose the full Jacobian
    D w = rand_tensor(Shape{n, f}, rng);
    auto objective = [=](Tape<double>* t, const D& y) { return sum(t, mul(t, w, y)); };
    cases.emplace_back(x0, [=](Tape<double>* t, const D& x) {
      RunningStats<double> stats(f);
      return objective(t, batchnorm(t, x, gamma, beta, true, stats));
    });
    cases.emplace_back(gamma.clone(), [=](Tape<double>* t, const D& g) {
      RunningStats<double> stats(f);
      return objective(t, batchnorm(t, x0, g, beta, true, stats));
    });
    cases.emplace_back(beta.clone(), [=](Tape<double>* t, const D& b) {
      RunningStats<double> stats(f);
      return objective(t, batchnorm(t, x0, gamma, b, true, stats));
    });
  });
  sweep("max_pool", [&](KeyedRng& rng, auto& cases) {
    // distinct values keep the argmax stable under probing
    D x(Shape{1, 2, 4, 4});
    std::vector<double> vals;
    for (int i = 0; i < 32; ++i) vals.push_back(i * 0.37);
    for (std::size_t i = 31; i > 0; --i) std::swap(vals[i], vals[rng.next_below(i + 1)]);
    for (int i = 0; i < 32; ++i) x.data()[i] = vals[static_cast<std::size_t>(i)];
    cases.emplace_back(x, [=](Tape<double>* t, const D& v) {
      return scalarize(t, max_pool(t, v, 2, 2));
    });
  });
  sweep("global_avg_pool", [&](KeyedRng& rng, auto& cases) {
    cases.emplace_back(rand_tensor(Shape{2, 3, 4, 4}, rng), [=](Tape<double>* t, const D& x) {
      return scalarize(t, global_avg_pool(t, x));
    });
  });
  sweep("focal_loss", [&](KeyedRng& rng, auto& cases) {
    int n = 3 + static_cast<int>(rng.next_below(3));
    std::vector<int> labels;
    for (int i = 0; i < n; ++i) labels.push_back(static_cast<int>(rng.next_below(8)));
    LossConfig cfg;
    cfg.focal_gamma = 2.0;
    cases.emplace_back(rand_tensor(Shape{n, 8}, rng, -2, 2), [=](Tape<double>* t, const D& x) {
      return focal_loss(t, softmax(t, x, 1), labels, cfg);
    });
  });
  sweep("affinity_loss", [&](KeyedRng& rng, auto& cases) {
    int n = 3 + static_cast<int>(rng.next_below(3));
    int f = 3 + static_cast<int>(rng.next_below(3));
    ClassCenters<double> centers(8, f);
    for (int c = 0; c < 8; ++c) {
      std::vector<double> row;
      for (int j = 0; j < f; ++j) row.push_back(rng.uniform(-1, 1));
      centers.set_center(c, row);
    }
    std::vector<int> labels;
    for (int i = 0; i < n; ++i) labels.push_back(static_cast<int>(rng.next_below(8)));
    cases.emplace_back(rand_tensor(Shape{n, f}, rng), [=](Tape<double>* t, const D& x) {
      return affinity_loss(t, x, labels, centers);
    });
  });
  sweep("partition_loss", [&](KeyedRng& rng, auto& cases) {
    D h2 = rand_tensor(Shape{3, 4}, rng);
    D h3 = rand_tensor(Shape{3, 4}, rng);
    cases.emplace_back(rand_tensor(Shape{3, 4}, rng), [=](Tape<double>* t, const D& x) {
      return partition_loss(t, std::vector<D>{x, h2, h3});
    });
  });
  sweep("ccc_loss", [&](KeyedRng& rng, auto& cases) {
    int n = 4 + static_cast<int>(rng.next_below(4));
    std::vector<std::array<double, 2>> targets;
    for (int i = 0; i < n; ++i) targets.push_back({rng.uniform(-1, 1), rng.uniform(-1, 1)});
    cases.emplace_back(rand_tensor(Shape{n, 2}, rng), [=](Tape<double>* t, const D& x) {
      return ccc_loss(t, x, targets);
    });
  });
  sweep("combined_loss", [&](KeyedRng& rng, auto& cases) {
    int n = 4;
    int f = 4;
    auto centers = std::make_shared<ClassCenters<double>>(8, f);
    for (int c = 0; c < 8; ++c) {
      std::vector<double> row;
      for (int j = 0; j < f; ++j) row.push_back(rng.uniform(-1, 1));
      centers->set_center(c, row);
    }
    std::vector<int> labels;
    std::vector<std::array<double, 2>> va;
    for (int i = 0; i < n; ++i) {
      labels.push_back(static_cast<int>(rng.next_below(8)));
      va.push_back({rng.uniform(-1, 1), rng.uniform(-1, 1)});
    }
    D bf = rand_tensor(Shape{n, f}, rng);
    D h1 = rand_tensor(Shape{n, f}, rng);
    D h2 = rand_tensor(Shape{n, f}, rng);
    LossConfig cfg;
    // EXPR path, probed through the logits
    cases.emplace_back(rand_tensor(Shape{n, 8}, rng, -2, 2), [=](Tape<double>* t, const D& x) {
      return combined_loss(t, Task::EXPR, softmax(t, x, 1), labels, va, bf,
                           std::vector<D>{h1, h2}, *centers, cfg, false);
    });
    // EXPR path, probed through the backbone features
    D probs0 = softmax<double>(nullptr, rand_tensor(Shape{n, 8}, rng, -2, 2), 1);
    cases.emplace_back(bf.clone(), [=](Tape<double>* t, const D& x) {
      return combined_loss(t, Task::EXPR, probs0, labels, va, x, std::vector<D>{h1, h2},
                           *centers, cfg, false);
    });
    // VA path, probed through the raw predictions
    auto va_centers = std::make_shared<ClassCenters<double>>(9, f);
    for (int c = 0; c < 9; ++c) {
      std::vector<double> row;
      for (int j = 0; j < f; ++j) row.push_back(rng.uniform(-1, 1));
      va_centers->set_center(c, row);
    }
    cases.emplace_back(rand_tensor(Shape{n, 2}, rng, -0.9, 0.9), [=](Tape<double>* t, const D& x) {
      return combined_loss(t, Task::VA, x, labels, va, bf, std::vector<D>{h1, h2}, *va_centers,
                           cfg, false);
    });
  });

  return result;
}

}  // namespace dan
