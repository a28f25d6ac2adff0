#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <vector>

#include "dan/ops.hpp"
#include "dan/tensor.hpp"

namespace dan {

enum class Task { EXPR, VA };

inline const char* task_name(Task t) { return t == Task::EXPR ? "expr" : "va"; }

struct LossConfig {
  double focal_gamma = 2.0;
  std::vector<double> focal_alpha = {1.0};  // scalar or one weight per class
  double lambda_affinity = 1.0;
  double lambda_partition = 1.0;
  double affinity_center_lr = 0.5;
};

// ---------------------------------------------------------------------------
// Focal loss
// ---------------------------------------------------------------------------

// mean over the batch of -alpha_y * (1 - p_y)^gamma * log(p_y)
template <typename S>
Tensor<S> focal_loss(Tape<S>* tape, const Tensor<S>& probs, const std::vector<int>& labels,
                     const LossConfig& cfg) {
  if (probs.rank() != 2) throw DimensionError("focal_loss: probs must be rank-2");
  int n = probs.extent(0);
  int k = probs.extent(1);
  Tensor<S> p = gather_rows(tape, probs, labels);
  Tensor<S> ones(Shape{n});
  std::fill(ones.data(), ones.data() + n, S(1));
  Tensor<S> mod = pow_scalar(tape, sub(tape, ones, p), static_cast<S>(cfg.focal_gamma));
  Tensor<S> lp = log_clamped(tape, p, S(1e-12));
  Tensor<S> alpha(Shape{n});
  for (int i = 0; i < n; ++i) {
    int y = labels[static_cast<std::size_t>(i)];
    double a = cfg.focal_alpha.size() == 1 ? cfg.focal_alpha[0]
                                           : cfg.focal_alpha.at(static_cast<std::size_t>(y));
    (void)k;
    alpha.data()[i] = static_cast<S>(a);
  }
  Tensor<S> terms = mul(tape, alpha, mul(tape, mod, lp));
  return scale(tape, sum(tape, terms), S(-1) / static_cast<S>(n));
}

// ---------------------------------------------------------------------------
// Affinity loss (class-center pull, margin-normalized)
// ---------------------------------------------------------------------------

// Running class centers, updated by EMA toward batch class means. The loss
// treats them as constants: no gradient flows into the centers.
template <typename S>
class ClassCenters {
 public:
  ClassCenters(int num_classes, int feature_dim)
      : centers_(Shape{num_classes, feature_dim}),
        active_(static_cast<std::size_t>(num_classes), false) {}

  int num_classes() const { return centers_.extent(0); }
  int feature_dim() const { return centers_.extent(1); }
  Tensor<S>& tensor() { return centers_; }
  const Tensor<S>& tensor() const { return centers_; }
  const std::vector<bool>& active() const { return active_; }

  void set_center(int cls, const std::vector<S>& row) {
    for (int f = 0; f < feature_dim(); ++f)
      centers_.data()[cls * feature_dim() + f] = row[static_cast<std::size_t>(f)];
    active_[static_cast<std::size_t>(cls)] = true;
  }

  void set_active_flags(const std::vector<bool>& flags) { active_ = flags; }

  // Variance of the active center rows around their mean row, averaged over
  // features. Falls back to 1 when fewer than two rows are active so the
  // first training steps stay finite.
  S center_variance() const {
    int f = feature_dim();
    int count = 0;
    for (bool a : active_)
      if (a) ++count;
    if (count < 2) return S(1);
    std::vector<S> mean_row(static_cast<std::size_t>(f), S(0));
    for (int c = 0; c < num_classes(); ++c) {
      if (!active_[static_cast<std::size_t>(c)]) continue;
      for (int i = 0; i < f; ++i) mean_row[static_cast<std::size_t>(i)] += centers_.data()[c * f + i];
    }
    for (S& v : mean_row) v /= static_cast<S>(count);
    S acc = S(0);
    for (int c = 0; c < num_classes(); ++c) {
      if (!active_[static_cast<std::size_t>(c)]) continue;
      for (int i = 0; i < f; ++i) {
        S d = centers_.data()[c * f + i] - mean_row[static_cast<std::size_t>(i)];
        acc += d * d;
      }
    }
    return acc / static_cast<S>(count * f);
  }

  // EMA toward the batch class means; a first sighting adopts the mean outright.
  void update(const Tensor<S>& features, const std::vector<int>& labels, S lr) {
    int f = feature_dim();
    int n = features.extent(0);
    std::vector<std::vector<S>> sums(static_cast<std::size_t>(num_classes()),
                                     std::vector<S>(static_cast<std::size_t>(f), S(0)));
    std::vector<int> counts(static_cast<std::size_t>(num_classes()), 0);
    for (int i = 0; i < n; ++i) {
      int y = labels[static_cast<std::size_t>(i)];
      ++counts[static_cast<std::size_t>(y)];
      for (int j = 0; j < f; ++j)
        sums[static_cast<std::size_t>(y)][static_cast<std::size_t>(j)] += features.data()[i * f + j];
    }
    for (int c = 0; c < num_classes(); ++c) {
      if (counts[static_cast<std::size_t>(c)] == 0) continue;
      S rate = active_[static_cast<std::size_t>(c)] ? lr : S(1);
      for (int j = 0; j < f; ++j) {
        S batch_mean = sums[static_cast<std::size_t>(c)][static_cast<std::size_t>(j)] /
                       static_cast<S>(counts[static_cast<std::size_t>(c)]);
        S& cur = centers_.data()[c * f + j];
        cur = (S(1) - rate) * cur + rate * batch_mean;
      }
      active_[static_cast<std::size_t>(c)] = true;
    }
  }

 private:
  Tensor<S> centers_;
  std::vector<bool> active_;
};

// (1/N) sum_i ||x_i - c_{y_i}||^2 / (center_variance + 1e-8)
template <typename S>
Tensor<S> affinity_loss(Tape<S>* tape, const Tensor<S>& features, const std::vector<int>& labels,
                        const ClassCenters<S>& centers) {
  if (features.rank() != 2) throw DimensionError("affinity_loss: features must be rank-2");
  int n = features.extent(0);
  int f = features.extent(1);
  if (n < 1) throw BatchSizeError("affinity_loss: empty batch");
  if (f != centers.feature_dim())
    throw DimensionError("affinity_loss: feature dim " + std::to_string(f) +
                         " does not match centers " + std::to_string(centers.feature_dim()));
  Tensor<S> target(Shape{n, f});
  for (int i = 0; i < n; ++i) {
    int y = labels.at(static_cast<std::size_t>(i));
    if (y < 0 || y >= centers.num_classes())
      throw LabelError("affinity_loss: label " + std::to_string(y) + " out of range");
    for (int j = 0; j < f; ++j)
      target.data()[i * f + j] = centers.tensor().data()[y * f + j];
  }
  Tensor<S> d = sub(tape, features, target);
  Tensor<S> total = sum(tape, mul(tape, d, d));
  S denom = static_cast<S>(n) * (centers.center_variance() + S(1e-8));
  return scale(tape, total, S(1) / denom);
}

// ---------------------------------------------------------------------------
// Partition loss (head diversity pressure)
// ---------------------------------------------------------------------------

// 1 / (1 + mean variance across heads); minimal when heads disagree most.
template <typename S>
Tensor<S> partition_loss(Tape<S>* tape, const std::vector<Tensor<S>>& head_features) {
  if (head_features.empty()) throw ConfigError("partition_loss: no heads");
  int h = static_cast<int>(head_features.size());
  Tensor<S> acc = head_features[0];
  for (int k = 1; k < h; ++k) acc = add(tape, acc, head_features[static_cast<std::size_t>(k)]);
  Tensor<S> mean_h = scale(tape, acc, S(1) / static_cast<S>(h));
  Tensor<S> var_sum;
  for (int k = 0; k < h; ++k) {
    Tensor<S> d = sub(tape, head_features[static_cast<std::size_t>(k)], mean_h);
    Tensor<S> sq = sum(tape, mul(tape, d, d));
    var_sum = k == 0 ? sq : add(tape, var_sum, sq);
  }
  std::int64_t m = static_cast<std::int64_t>(h) * head_features[0].size();
  Tensor<S> v = scale(tape, var_sum, S(1) / static_cast<S>(m));
  return recip_one_plus(tape, v);
}

// ---------------------------------------------------------------------------
// Concordance correlation coefficient
// ---------------------------------------------------------------------------

// 2 s_xy / (s_x^2 + s_y^2 + (mean_x - mean_y)^2), population moments.
// Returns 0 when the denominator vanishes.
inline double ccc(const std::vector<double>& pred, const std::vector<double>& target) {
  if (pred.size() != target.size()) throw DimensionError("ccc: length mismatch");
  std::size_t n = pred.size();
  if (n < 2) throw SampleSizeError("ccc: need at least 2 samples, got " + std::to_string(n));
  double mx = 0, my = 0;
  for (std::size_t i = 0; i < n; ++i) {
    mx += pred[i];
    my += target[i];
  }
  mx /= static_cast<double>(n);
  my /= static_cast<double>(n);
  double sx = 0, sy = 0, sxy = 0;
  for (std::size_t i = 0; i < n; ++i) {
    sx += (pred[i] - mx) * (pred[i] - mx);
    sy += (target[i] - my) * (target[i] - my);
    sxy += (pred[i] - mx) * (target[i] - my);
  }
  sx /= static_cast<double>(n);
  sy /= static_cast<double>(n);
  sxy /= static_cast<double>(n);
  double denom = sx + sy + (mx - my) * (mx - my);
  if (denom == 0.0) return 0.0;
  return 2.0 * sxy / denom;
}

namespace detail {

// Differentiable CCC of one channel against constant targets.
template <typename S>
Tensor<S> ccc_channel(Tape<S>* tape, const Tensor<S>& x, const std::vector<S>& target) {
  int n = x.extent(0);
  double my = 0, sy = 0;
  for (int i = 0; i < n; ++i) my += target[static_cast<std::size_t>(i)];
  my /= n;
  for (int i = 0; i < n; ++i) {
    double d = target[static_cast<std::size_t>(i)] - my;
    sy += d * d;
  }
  sy /= n;
  Tensor<S> t(Shape{n});
  for (int i = 0; i < n; ++i) t.data()[i] = target[static_cast<std::size_t>(i)];

  Tensor<S> mx = mean(tape, x);
  Tensor<S> ex2 = mean(tape, mul(tape, x, x));
  Tensor<S> sx = sub(tape, ex2, mul(tape, mx, mx));
  Tensor<S> exy = mean(tape, mul(tape, x, t));
  Tensor<S> my_t(Shape{1});
  my_t.data()[0] = static_cast<S>(my);
  Tensor<S> sxy = sub(tape, exy, scale(tape, mx, static_cast<S>(my)));
  Tensor<S> dm = sub(tape, mx, my_t);
  Tensor<S> denom = add(tape, add_scalar(tape, sx, static_cast<S>(sy)), mul(tape, dm, dm));
  return div(tape, scale(tape, sxy, S(2)), denom);
}

}  // namespace detail

// 1 - (CCC_valence + CCC_arousal) / 2, differentiable in the predictions.
template <typename S>
Tensor<S> ccc_loss(Tape<S>* tape, const Tensor<S>& pred_va, const std::vector<std::array<S, 2>>& target_va) {
  if (pred_va.rank() != 2 || pred_va.extent(1) != 2)
    throw DimensionError("ccc_loss: predictions must be [N,2]");
  int n = pred_va.extent(0);
  if (n < 2) throw SampleSizeError("ccc_loss: need at least 2 samples");
  if (static_cast<int>(target_va.size()) != n) throw DimensionError("ccc_loss: target count mismatch");
  std::vector<S> tv(static_cast<std::size_t>(n)), ta(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    tv[static_cast<std::size_t>(i)] = target_va[static_cast<std::size_t>(i)][0];
    ta[static_cast<std::size_t>(i)] = target_va[static_cast<std::size_t>(i)][1];
  }
  Tensor<S> cv = detail::ccc_channel(tape, select_col(tape, pred_va, 0), tv);
  Tensor<S> ca = detail::ccc_channel(tape, select_col(tape, pred_va, 1), ta);
  Tensor<S> mean_ccc = scale(tape, add(tape, cv, ca), S(0.5));
  Tensor<S> one(Shape{1});
  one.data()[0] = S(1);
  return sub(tape, one, mean_ccc);
}

// ---------------------------------------------------------------------------
// Macro F1
// ---------------------------------------------------------------------------

struct MacroF1Report {
  double macro_f1 = 0.0;
  std::vector<double> per_class;
};

// Unweighted mean of per-class F1. A class with neither predictions nor
// ground truth counts as 0.
inline MacroF1Report macro_f1_report(const std::vector<int>& pred, const std::vector<int>& truth,
                                     int num_classes = 8) {
  if (pred.size() != truth.size()) throw DimensionError("macro_f1: length mismatch");
  if (pred.empty()) throw SampleSizeError("macro_f1: empty input");
  std::vector<std::int64_t> tp(static_cast<std::size_t>(num_classes), 0);
  std::vector<std::int64_t> fp(static_cast<std::size_t>(num_classes), 0);
  std::vector<std::int64_t> fn(static_cast<std::size_t>(num_classes), 0);
  for (std::size_t i = 0; i < pred.size(); ++i) {
    int p = pred[i], t = truth[i];
    if (p < 0 || p >= num_classes || t < 0 || t >= num_classes)
      throw LabelError("macro_f1: label out of range at index " + std::to_string(i));
    if (p == t)
      ++tp[static_cast<std::size_t>(p)];
    else {
      ++fp[static_cast<std::size_t>(p)];
      ++fn[static_cast<std::size_t>(t)];
    }
  }
  MacroF1Report rep;
  rep.per_class.resize(static_cast<std::size_t>(num_classes), 0.0);
  double acc = 0.0;
  for (int c = 0; c < num_classes; ++c) {
    auto ci = static_cast<std::size_t>(c);
    double denom = static_cast<double>(2 * tp[ci] + fp[ci] + fn[ci]);
    double f1 = denom > 0.0 ? 2.0 * static_cast<double>(tp[ci]) / denom : 0.0;
    rep.per_class[ci] = f1;
    acc += f1;
  }
  rep.macro_f1 = acc / num_classes;
  return rep;
}

inline double macro_f1(const std::vector<int>& pred, const std::vector<int>& truth,
                       int num_classes = 8) {
  return macro_f1_report(pred, truth, num_classes).macro_f1;
}

// ---------------------------------------------------------------------------
// Combined objective
// ---------------------------------------------------------------------------

// Quantize a VA pair onto a 3x3 grid; affinity centers in VA mode key on this.
inline int va_bin(double valence, double arousal) {
  auto cell = [](double v) {
    int b = static_cast<int>((v + 1.0) * 1.5);
    return std::min(2, std::max(0, b));
  };
  return cell(valence) * 3 + cell(arousal);
}

struct CombinedLossParts {
  double task = 0.0;
  double affinity = 0.0;
  double partition = 0.0;
};

// EXPR: focal + la*affinity + lp*partition; VA: ccc_loss + la*affinity + lp*partition.
// Center EMA updates happen after the loss is formed, and only when train is set.
template <typename S>
Tensor<S> combined_loss(Tape<S>* tape, Task task, const Tensor<S>& task_out,
                        const std::vector<int>& labels,
                        const std::vector<std::array<S, 2>>& va_targets,
                        const Tensor<S>& backbone_features,
                        const std::vector<Tensor<S>>& head_features, ClassCenters<S>& centers,
                        const LossConfig& cfg, bool train, CombinedLossParts* parts = nullptr) {
  Tensor<S> primary;
  std::vector<int> center_keys;
  if (task == Task::EXPR) {
    primary = focal_loss(tape, task_out, labels, cfg);
    center_keys = labels;
  } else {
    primary = ccc_loss(tape, task_out, va_targets);
    center_keys.reserve(va_targets.size());
    for (const auto& t : va_targets)
      center_keys.push_back(va_bin(static_cast<double>(t[0]), static_cast<double>(t[1])));
  }
  if (parts) parts->task = static_cast<double>(primary.item());

  Tensor<S> total = primary;
  if (cfg.lambda_affinity > 0.0) {
    Tensor<S> aff = affinity_loss(tape, backbone_features, center_keys, centers);
    if (parts) parts->affinity = static_cast<double>(aff.item());
    total = add(tape, total, scale(tape, aff, static_cast<S>(cfg.lambda_affinity)));
  }
  if (cfg.lambda_partition > 0.0) {
    Tensor<S> part = partition_loss(tape, head_features);
    if (parts) parts->partition = static_cast<double>(part.item());
    total = add(tape, total, scale(tape, part, static_cast<S>(cfg.lambda_partition)));
  }
  if (train && cfg.lambda_affinity > 0.0)
    centers.update(backbone_features, center_keys, static_cast<S>(cfg.affinity_center_lr));
  return total;
}

}  // namespace dan
