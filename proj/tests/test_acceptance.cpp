// Acceptance harness: one pass/fail line per criterion, exit code = #failures.
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "dan/evalcli.hpp"
#include "dan/gradsuite.hpp"
#include "dan/sampler.hpp"
#include "dan/synth.hpp"
#include "dan/train.hpp"

namespace fs = std::filesystem;
using dan::json;
using D = dan::Tensor<double>;

namespace {

int failures = 0;

void report(int idx, const std::string& name, bool ok, const std::string& detail) {
  std::printf("%s  %d %-28s %s\n", ok ? "PASS" : "FAIL", idx, name.c_str(), detail.c_str());
  std::fflush(stdout);
  if (!ok) ++failures;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string read_bytes(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw dan::IoError("cannot open " + path);
  return std::string(std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>());
}

// metrics JSONL comparison must ignore wall-clock timings
std::string strip_wall_ms(const std::string& jsonl) {
  std::istringstream in(jsonl);
  std::string line, out;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    json j = json::parse(line);
    j.erase("wall_ms");
    out += j.dump() + "\n";
  }
  return out;
}

double pearson(const std::vector<double>& x, const std::vector<double>& y) {
  std::size_t n = x.size();
  double mx = 0, my = 0;
  for (std::size_t i = 0; i < n; ++i) {
    mx += x[i];
    my += y[i];
  }
  mx /= static_cast<double>(n);
  my /= static_cast<double>(n);
  double sxy = 0, sxx = 0, syy = 0;
  for (std::size_t i = 0; i < n; ++i) {
    sxy += (x[i] - mx) * (y[i] - my);
    sxx += (x[i] - mx) * (x[i] - mx);
    syy += (y[i] - my) * (y[i] - my);
  }
  if (sxx <= 0 || syy <= 0) return 0.0;
  return sxy / std::sqrt(sxx * syy);
}

// independent macro-F1 oracle: full confusion matrix, then per-class F1
double macro_f1_oracle(const std::vector<int>& pred, const std::vector<int>& truth, int k) {
  std::vector<std::vector<std::int64_t>> c(static_cast<std::size_t>(k),
                                           std::vector<std::int64_t>(static_cast<std::size_t>(k), 0));
  for (std::size_t i = 0; i < pred.size(); ++i)
    ++c[static_cast<std::size_t>(truth[i])][static_cast<std::size_t>(pred[i])];
  double acc = 0.0;
  for (int j = 0; j < k; ++j) {
    auto cj = static_cast<std::size_t>(j);
    std::int64_t tp = c[cj][cj], fp = 0, fn = 0;
    for (int i = 0; i < k; ++i) {
      auto ci = static_cast<std::size_t>(i);
      if (i != j) {
        fp += c[ci][cj];
        fn += c[cj][ci];
      }
    }
    double denom = static_cast<double>(2 * tp + fp + fn);
    acc += denom > 0.0 ? 2.0 * static_cast<double>(tp) / denom : 0.0;
  }
  return acc / k;
}

D rand_probs(int n, int k, dan::KeyedRng& rng) {
  D logits(dan::Shape{n, k});
  for (std::int64_t i = 0; i < logits.size(); ++i) logits.data()[i] = rng.uniform(-2, 2);
  return dan::softmax<double>(nullptr, logits, 1);
}

std::pair<dan::Dataset, dan::Dataset> split_80_20(const dan::Dataset& all) {
  dan::Dataset tr, va;
  tr.root = va.root = all.root;
  for (std::size_t i = 0; i < all.records.size(); ++i)
    ((i % 5 == 4) ? va : tr).records.push_back(all.records[i]);
  return {tr, va};
}

dan::TrainConfig desk_config(dan::Task task) {
  dan::TrainConfig cfg;  // desk defaults: 64x64, widths {16,32,64}, 4 heads
  cfg.epochs = 8;
  cfg.batch_size = 32;
  cfg.seed = 0;
  cfg.model.task = task;
  if (task == dan::Task::VA) cfg.loss.lambda_affinity = 0.0;
  return cfg;
}

dan::TrainConfig tiny_config(std::uint64_t seed) {
  dan::TrainConfig cfg;
  cfg.model.input_size = 32;
  cfg.model.backbone_widths = {8, 16};
  cfg.model.blocks_per_stage = 1;
  cfg.model.num_heads = 2;
  cfg.model.attention_reduction = 4;
  cfg.epochs = 2;
  cfg.batch_size = 16;
  cfg.seed = seed;
  return cfg;
}

void criterion_gradients() {
  auto t0 = std::chrono::steady_clock::now();
  auto res = dan::run_grad_suite(20, 1e-4, 0);
  double secs = seconds_since(t0);
  char buf[160];
  std::snprintf(buf, sizeof buf, "(%d instances, worst op failures %s, %.1f s)",
                res.total_instances, res.pass ? "none" : "present", secs);
  report(1, "gradient-check suite", res.pass && secs < 120.0, buf);
}

void criterion_metric_oracles() {
  bool ok = true;
  std::string why;
  // hand-checked CCC values
  ok &= std::abs(dan::ccc({0.1, 0.5, -0.3, 0.7}, {0.1, 0.5, -0.3, 0.7}) - 1.0) < 1e-9;
  ok &= std::abs(dan::ccc({2, 3, 4, 5}, {1, 2, 3, 4}) - 5.0 / 7.0) < 1e-9;
  ok &= std::abs(dan::ccc({1, 0, -1}, {-1, 0, 1}) - (-1.0)) < 1e-9;
  ok &= std::abs(dan::ccc({0.5, 0.5, 0.5, 0.5}, {0, 1, -1, 0})) < 1e-9;
  if (!ok) why = "ccc hand cases";

  // macro F1 agrees exactly with the confusion-matrix oracle
  dan::KeyedRng rng(42, 1);
  bool f1_ok = true;
  for (int trial = 0; trial < 1000 && f1_ok; ++trial) {
    int n = 5 + static_cast<int>(rng.next_below(60));
    std::vector<int> pred, truth;
    for (int i = 0; i < n; ++i) {
      pred.push_back(static_cast<int>(rng.next_below(8)));
      truth.push_back(static_cast<int>(rng.next_below(8)));
    }
    f1_ok = dan::macro_f1(pred, truth, 8) == macro_f1_oracle(pred, truth, 8);
  }
  if (!f1_ok) why = "macro F1 vs oracle";
  ok &= f1_ok;

  // joint affine invariance and |ccc| <= |pearson| on random vectors
  dan::KeyedRng rng2(42, 2);
  bool ccc_ok = true;
  for (int trial = 0; trial < 1000 && ccc_ok; ++trial) {
    int n = 4 + static_cast<int>(rng2.next_below(30));
    std::vector<double> x, y, xa, ya;
    double a = rng2.uniform(0.5, 3.0) * (rng2.next_below(2) ? 1.0 : -1.0);
    double b = rng2.uniform(-2, 2);
    for (int i = 0; i < n; ++i) {
      x.push_back(rng2.uniform(-1, 1));
      y.push_back(rng2.uniform(-1, 1));
      xa.push_back(a * x.back() + b);
      ya.push_back(a * y.back() + b);
    }
    double c = dan::ccc(x, y);
    ccc_ok = std::abs(dan::ccc(xa, ya) - c) < 1e-9 &&
             std::abs(c) <= std::abs(pearson(x, y)) + 1e-12;
  }
  if (!ccc_ok) why = "ccc invariance/bound";
  ok &= ccc_ok;

  report(2, "metric oracles", ok,
         ok ? "(ccc hand cases, 1000 F1 pairs exact, 1000 ccc vectors)" : "(" + why + ")");
}

void criterion_loss_identities() {
  bool ok = true;
  std::string why;
  dan::KeyedRng rng(7, 3);
  dan::LossConfig plain;
  plain.focal_gamma = 0.0;
  dan::LossConfig focal2;
  focal2.focal_gamma = 2.0;
  for (int trial = 0; trial < 200 && ok; ++trial) {
    int n = 3 + static_cast<int>(rng.next_below(6));
    D probs = rand_probs(n, 8, rng);
    std::vector<int> labels;
    for (int i = 0; i < n; ++i) labels.push_back(static_cast<int>(rng.next_below(8)));
    double ce = 0;
    bool some_uncertain = false;
    for (int i = 0; i < n; ++i) {
      double p = probs.data()[i * 8 + labels[static_cast<std::size_t>(i)]];
      ce -= std::log(std::max(p, 1e-12));
      if (p < 1.0) some_uncertain = true;
    }
    ce /= n;
    double f0 = dan::focal_loss<double>(nullptr, probs, labels, plain).data()[0];
    double f2 = dan::focal_loss<double>(nullptr, probs, labels, focal2).data()[0];
    if (std::abs(f0 - ce) >= 1e-9) {
      ok = false;
      why = "focal(gamma=0) != cross-entropy";
    }
    if (some_uncertain && !(f2 < ce)) {
      ok = false;
      why = "focal(gamma=2) not < cross-entropy";
    }
  }

  // affinity is exactly zero when every feature sits on its class center
  dan::ClassCenters<double> centers(8, 5);
  for (int c = 0; c < 8; ++c) {
    std::vector<double> row;
    for (int j = 0; j < 5; ++j) row.push_back(rng.uniform(-1, 1));
    centers.set_center(c, row);
  }
  D feats(dan::Shape{8, 5});
  std::vector<int> lab;
  for (int c = 0; c < 8; ++c) {
    lab.push_back(c);
    for (int j = 0; j < 5; ++j) feats.data()[c * 5 + j] = centers.tensor().data()[c * 5 + j];
  }
  if (dan::affinity_loss<double>(nullptr, feats, lab, centers).data()[0] != 0.0) {
    ok = false;
    why = "affinity at centers not exactly 0";
  }

  report(3, "loss identities", ok,
         ok ? "(200 focal/CE trials, affinity exact zero)" : "(" + why + ")");
}

void criterion_expr_end_to_end(const std::string& corpus) {
  auto t0 = std::chrono::steady_clock::now();
  auto [tr, va] = split_80_20(dan::Dataset::load(corpus + "/manifest.csv"));
  auto res = dan::train<float>(desk_config(dan::Task::EXPR), tr, va,
                               corpus + "/../run_expr");
  double secs = seconds_since(t0);
  char buf[120];
  std::snprintf(buf, sizeof buf, "(best macro F1 %.3f, %.0f s)", res.best_score, secs);
  report(4, "expression end-to-end", res.best_score >= 0.85 && secs < 600.0, buf);
}

void criterion_va_end_to_end(const std::string& corpus) {
  auto t0 = std::chrono::steady_clock::now();
  auto [tr, va] = split_80_20(dan::Dataset::load(corpus + "/manifest.csv"));
  auto res = dan::train<float>(desk_config(dan::Task::VA), tr, va, corpus + "/../run_va");
  double secs = seconds_since(t0);
  char buf[120];
  std::snprintf(buf, sizeof buf, "(best mean CCC %.3f, %.0f s)", res.best_score, secs);
  report(5, "valence-arousal end-to-end", res.best_score >= 0.80 && secs < 600.0, buf);
}

void criterion_ensemble(const std::string& base) {
  // exact voting identities on synthetic prediction sets
  bool ok = true;
  std::string why;
  dan::KeyedRng rng(11, 4);
  std::vector<dan::PredictionRecord> a;
  for (int i = 0; i < 6; ++i) {
    dan::PredictionRecord r;
    r.id = "img" + std::to_string(i);
    r.task = dan::Task::EXPR;
    D p = rand_probs(1, 8, rng);
    r.probs.assign(p.data(), p.data() + 8);
    a.push_back(r);
  }
  auto same = [](const std::vector<dan::PredictionRecord>& u,
                 const std::vector<dan::PredictionRecord>& v) {
    if (u.size() != v.size()) return false;
    for (std::size_t i = 0; i < u.size(); ++i) {
      if (u[i].id != v[i].id || u[i].probs.size() != v[i].probs.size()) return false;
      for (std::size_t j = 0; j < u[i].probs.size(); ++j) {
        double d = std::abs(u[i].probs[j] - v[i].probs[j]);
        if (d > 1e-12) return false;
      }
    }
    return true;
  };
  if (!same(dan::soft_vote({a}), a)) {
    ok = false;
    why = "single-member identity";
  }
  if (!same(dan::soft_vote({a, a, a}), a)) {
    ok = false;
    why = "identical-member identity";
  }
  std::vector<dan::PredictionRecord> b = a;
  for (auto& r : b)
    for (auto& p : r.probs) p = 1.0 / 8.0;
  if (!same(dan::soft_vote({a, b}, {0.3, 0.7}), dan::soft_vote({b, a}, {0.7, 0.3}))) {
    ok = false;
    why = "weighted permutation invariance";
  }
  for (const auto& r : dan::soft_vote({a, b})) {
    double s = 0;
    for (double p : r.probs) s += p;
    if (std::abs(s - 1.0) > 1e-12) {
      ok = false;
      why = "votes leave the simplex";
    }
  }

  // trained members: the soft vote should match or beat the worst member
  dan::SynthSpec spec;
  spec.per_class = 40;
  spec.image_size = 32;
  spec.seed = 7;
  std::string corpus = base + "/tiny_corpus";
  dan::synth_generate(spec, corpus);
  auto [tr, va] = split_80_20(dan::Dataset::load(corpus + "/manifest.csv"));
  auto truth = va.records;
  int groups_ok = 0;
  for (int g = 0; g < 10; ++g) {
    std::vector<std::vector<dan::PredictionRecord>> members;
    double worst = 1.0;
    for (int m = 0; m < 3; ++m) {
      auto cfg = tiny_config(static_cast<std::uint64_t>(g * 101 + m));
      std::string out = base + "/ens_g" + std::to_string(g) + "_m" + std::to_string(m);
      dan::train<float>(cfg, tr, va, out);
      auto ckpt = dan::checkpoint_load<float>(out + "/best.ckpt");
      auto preds = dan::predict_records(ckpt, va);
      worst = std::min(worst, dan::evaluate(preds, truth, dan::Task::EXPR).score);
      members.push_back(std::move(preds));
    }
    double voted = dan::evaluate(dan::soft_vote(members), truth, dan::Task::EXPR).score;
    if (voted >= worst - 1e-12) ++groups_ok;
  }
  if (groups_ok < 8) {
    ok = false;
    why = "vote beat worst member in only " + std::to_string(groups_ok) + "/10 groups";
  }
  report(6, "ensemble voting", ok,
         ok ? "(identities exact, vote >= worst member in " + std::to_string(groups_ok) +
                  "/10 seed groups)"
            : "(" + why + ")");
}

void criterion_sampler() {
  // class histogram of a large, heavily imbalanced expression corpus
  const std::int64_t counts[8] = {177498, 16573, 10810, 9080, 95633, 79862, 31637, 165866};
  std::vector<dan::AnnotationRecord> records;
  for (int c = 0; c < 8; ++c)
    for (std::int64_t i = 0; i < counts[c]; ++i) {
      dan::AnnotationRecord r;
      r.path = "p";
      r.source = dan::Source::AFFWILD2;
      r.expr = c;
      records.push_back(r);
    }
  dan::BalancedSampler sampler(records, 99);
  std::vector<std::int64_t> drawn(8, 0);
  const int n = 100000;
  for (int i = 0; i < n; ++i) {
    int c = *records[sampler.next()].expr;
    ++drawn[static_cast<std::size_t>(c)];
  }
  bool ok = true;
  double lo = 1, hi = 0;
  for (int c = 0; c < 8; ++c) {
    double frac = static_cast<double>(drawn[static_cast<std::size_t>(c)]) / n;
    lo = std::min(lo, frac);
    hi = std::max(hi, frac);
    if (frac < 0.115 || frac > 0.135) ok = false;
  }
  char buf[120];
  std::snprintf(buf, sizeof buf, "(100000 draws, class share %.4f..%.4f, target 0.125 +/- 0.01)",
                lo, hi);
  report(7, "balanced sampler", ok, buf);
}

void criterion_determinism(const std::string& base) {
  bool ok = true;
  std::string why;
  dan::SynthSpec spec;
  spec.per_class = 20;
  spec.image_size = 32;
  spec.seed = 3;
  std::string corpus = base + "/det_corpus";
  dan::synth_generate(spec, corpus);
  auto [tr, va] = split_80_20(dan::Dataset::load(corpus + "/manifest.csv"));

  auto cfg = tiny_config(5);
  dan::train<float>(cfg, tr, va, base + "/det_a");
  dan::train<float>(cfg, tr, va, base + "/det_b");
  if (read_bytes(base + "/det_a/final.ckpt") != read_bytes(base + "/det_b/final.ckpt")) {
    ok = false;
    why = "checkpoints differ between identical runs";
  }
  if (strip_wall_ms(read_bytes(base + "/det_a/metrics.jsonl")) !=
      strip_wall_ms(read_bytes(base + "/det_b/metrics.jsonl"))) {
    ok = false;
    why = "metric logs differ between identical runs";
  }

  auto ckpt = dan::checkpoint_load<float>(base + "/det_a/final.ckpt");
  dan::checkpoint_save(ckpt, base + "/det_a/roundtrip.ckpt");
  if (read_bytes(base + "/det_a/final.ckpt") != read_bytes(base + "/det_a/roundtrip.ckpt")) {
    ok = false;
    why = "checkpoint save/load round-trip not bit-exact";
  }

  dan::predict(ckpt, va, base + "/det_a/p1.jsonl", std::nullopt);
  dan::predict(ckpt, va, base + "/det_a/p2.jsonl", std::nullopt);
  if (read_bytes(base + "/det_a/p1.jsonl") != read_bytes(base + "/det_a/p2.jsonl")) {
    ok = false;
    why = "prediction files differ";
  }

  report(8, "determinism", ok,
         ok ? "(bit-identical checkpoints, logs, round-trip, predictions)" : "(" + why + ")");
}

}  // namespace

int main() {
  std::string base = (fs::temp_directory_path() / "dan_acceptance").string();
  fs::remove_all(base);
  fs::create_directories(base);

  criterion_gradients();
  criterion_metric_oracles();
  criterion_loss_identities();

  dan::SynthSpec spec;
  spec.per_class = 300;
  spec.seed = 1;
  std::string corpus = base + "/corpus";
  dan::synth_generate(spec, corpus);
  criterion_expr_end_to_end(corpus);
  criterion_va_end_to_end(corpus);

  criterion_ensemble(base);
  criterion_sampler();
  criterion_determinism(base);

  std::printf("%d/8 criteria passed\n", 8 - failures);
  return failures;
}
