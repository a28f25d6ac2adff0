#pragma once

#include <algorithm>
#include <chrono>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <string>
#include <vector>

#include "dan/checkpoint.hpp"
#include "dan/config.hpp"
#include "dan/manifest.hpp"
#include "dan/sampler.hpp"
#include "dan/synth.hpp"

namespace dan {

// Records plus the directory their paths are relative to, with images decoded
// once up front (desk-scale corpora fit in memory comfortably).
struct Dataset {
  std::string root;
  std::vector<AnnotationRecord> records;
  std::vector<Image> images;

  static Dataset load(const std::string& manifest_path) {
    Dataset d;
    d.root = std::filesystem::path(manifest_path).parent_path().string();
    d.records = load_manifest(manifest_path);
    return d;
  }

  const Image& image(std::size_t i, int out_size) {
    if (images.empty()) decode(out_size);
    return images[i];
  }

  void decode(int out_size) {
    images.clear();
    images.reserve(records.size());
    for (const auto& r : records) {
      Image raw = read_ppm((std::filesystem::path(root) / r.path).string());
      images.push_back(crop_and_resize(raw, r.bbox, out_size));
    }
  }
};

// Pixels to [-1,1] floats, NCHW.
template <typename S>
Tensor<S> images_to_tensor(const std::vector<const Image*>& batch) {
  int n = static_cast<int>(batch.size());
  int hgt = batch[0]->height, wid = batch[0]->width;
  Tensor<S> t(Shape{n, 3, hgt, wid});
  for (int i = 0; i < n; ++i) {
    const Image& img = *batch[static_cast<std::size_t>(i)];
    for (int c = 0; c < 3; ++c)
      for (int y = 0; y < hgt; ++y)
        for (int x = 0; x < wid; ++x)
          t.data()[((static_cast<std::int64_t>(i) * 3 + c) * hgt + y) * wid + x] =
              static_cast<S>(img.at(x, y, c)) / S(127.5) - S(1);
  }
  return t;
}

struct EpochMetrics {
  int epoch = 0;
  std::string split;
  double loss = 0.0;
  std::string metric_name;
  double metric_value = 0.0;
  double wall_ms = 0.0;
};

inline json to_json(const EpochMetrics& m) {
  return json{{"epoch", m.epoch},         {"split", m.split},
              {"loss", m.loss},           {"metric_name", m.metric_name},
              {"metric_value", m.metric_value}, {"wall_ms", m.wall_ms}};
}

template <typename S>
struct ValidationResult {
  double loss = 0.0;
  double metric = 0.0;  // macro F1 (EXPR) or mean CCC (VA)
  std::string metric_name;
};

// Deterministic eval-mode pass; mutates nothing.
template <typename S>
ValidationResult<S> validate(Model<S>& model, Dataset& data, const TrainConfig& cfg) {
  const ModelConfig& mc = model.config();
  Task task = mc.task;
  ValidationResult<S> res;
  res.metric_name = task == Task::EXPR ? "macro_f1" : "mean_ccc";
  std::size_t n = data.records.size();
  if (n == 0) throw CoverageError("validate: empty dataset");

  std::vector<int> pred_labels, true_labels;
  std::vector<double> pv, pa, tv, ta;
  double loss_acc = 0.0;
  std::int64_t loss_count = 0;
  int bs = cfg.batch_size;
  for (std::size_t start = 0; start < n; start += static_cast<std::size_t>(bs)) {
    std::size_t end = std::min(n, start + static_cast<std::size_t>(bs));
    std::vector<const Image*> batch;
    std::vector<int> labels;
    std::vector<std::array<S, 2>> va;
    for (std::size_t i = start; i < end; ++i) {
      batch.push_back(&data.image(i, mc.input_size));
      const auto& r = data.records[i];
      if (task == Task::EXPR) {
        if (!r.expr) throw LabelError("validate: record without expr label: " + r.path);
        labels.push_back(*r.expr);
      } else {
        if (!r.has_va()) throw LabelError("validate: record without VA labels: " + r.path);
        va.push_back({static_cast<S>(*r.valence), static_cast<S>(*r.arousal)});
      }
    }
    Tensor<S> x = images_to_tensor<S>(batch);
    auto out = model_forward<S>(nullptr, model, x, /*train=*/false);
    int m = static_cast<int>(end - start);
    if (task == Task::EXPR) {
      Tensor<S> task_loss = focal_loss<S>(nullptr, out.output, labels, cfg.loss);
      loss_acc += static_cast<double>(task_loss.item()) * m;
      for (int i = 0; i < m; ++i) {
        int best = 0;
        for (int c = 1; c < mc.num_classes; ++c)
          if (out.output.data()[i * mc.num_classes + c] >
              out.output.data()[i * mc.num_classes + best])
            best = c;
        pred_labels.push_back(best);
        true_labels.push_back(labels[static_cast<std::size_t>(i)]);
      }
    } else {
      for (int i = 0; i < m; ++i) {
        pv.push_back(static_cast<double>(out.output.data()[i * 2]));
        pa.push_back(static_cast<double>(out.output.data()[i * 2 + 1]));
        tv.push_back(static_cast<double>(va[static_cast<std::size_t>(i)][0]));
        ta.push_back(static_cast<double>(va[static_cast<std::size_t>(i)][1]));
      }
    }
    loss_count += m;
  }
  if (task == Task::EXPR) {
    res.loss = loss_acc / static_cast<double>(loss_count);
    res.metric = macro_f1(pred_labels, true_labels, model.config().num_classes);
  } else {
    double cv = ccc(pv, tv), ca = ccc(pa, ta);
    res.metric = 0.5 * (cv + ca);
    res.loss = 1.0 - res.metric;
  }
  return res;
}

struct TrainResult {
  std::vector<EpochMetrics> metrics;
  double best_score = 0.0;
  std::string best_path;
  std::string final_path;
};

// Full training run: balanced batches for EXPR, shuffled passes for VA; one
// fresh tape per step; metrics JSONL and checkpoints in out_dir.
template <typename S>
TrainResult train(const TrainConfig& cfg, Dataset& train_data, Dataset& val_data,
                  const std::string& out_dir) {
  cfg.validate();
  Task task = cfg.model.task;
  auto usable = [&](const AnnotationRecord& r) {
    return task == Task::EXPR ? r.expr.has_value() : r.has_va();
  };
  for (const auto& r : train_data.records)
    if (!usable(r)) throw LabelError("train: record unusable for task: " + r.path);
  if (train_data.records.empty()) throw CoverageError("train: empty dataset");

  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (ec) throw IoError("train: cannot create " + out_dir);
  std::ofstream metrics_out(fs::path(out_dir) / "metrics.jsonl", std::ios::binary);
  if (!metrics_out) throw IoError("train: cannot write metrics log");

  Checkpoint<S> ckpt(cfg);
  ckpt.state.optim.init(ckpt.model.params());
  TrainResult result;
  train_data.decode(cfg.model.input_size);
  val_data.decode(cfg.model.input_size);

  std::size_t n = train_data.records.size();
  std::int64_t steps_per_epoch =
      (static_cast<std::int64_t>(n) + cfg.batch_size - 1) / cfg.batch_size;
  bool do_augment = cfg.augment != "none";
  AugmentPolicy policy;
  if (do_augment) policy.kind = augment_kind_from_name(cfg.augment);

  auto emit = [&](const EpochMetrics& m) {
    metrics_out << to_json(m).dump() << "\n";
    metrics_out.flush();
    result.metrics.push_back(m);
  };

  auto save_to = [&](const std::string& name) {
    std::string p = (fs::path(out_dir) / name).string();
    checkpoint_save(ckpt, p);
    return p;
  };

  std::uint64_t sample_counter = 0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    auto t0 = std::chrono::steady_clock::now();
    // per-epoch index stream
    std::vector<std::int64_t> order;
    if (task == Task::EXPR) {
      BalancedSampler sampler(train_data.records, cfg.seed ^ (0x65706f63ULL + static_cast<std::uint64_t>(epoch)));
      for (std::int64_t i = 0; i < steps_per_epoch * cfg.batch_size; ++i) order.push_back(sampler.next());
    } else {
      order.resize(n);
      std::iota(order.begin(), order.end(), 0);
      KeyedRng shuffle_rng(cfg.seed, 0x73687566ULL + static_cast<std::uint64_t>(epoch));
      for (std::size_t i = n - 1; i > 0; --i)
        std::swap(order[i], order[shuffle_rng.next_below(i + 1)]);
    }

    double loss_acc = 0.0;
    std::int64_t batch_count = 0;
    for (std::int64_t step = 0; step < steps_per_epoch; ++step) {
      std::size_t start = static_cast<std::size_t>(step * cfg.batch_size);
      std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
      if (end - start < 2) continue;  // batchnorm needs at least two rows

      std::vector<Image> augmented;
      std::vector<const Image*> batch;
      std::vector<int> labels;
      std::vector<std::array<S, 2>> va;
      for (std::size_t bi = start; bi < end; ++bi) {
        std::size_t idx = static_cast<std::size_t>(order[bi]);
        const Image& base = train_data.images[idx];
        if (do_augment) {
          Image a = augment(base, policy, cfg.seed, sample_counter);
          if (a.width != cfg.model.input_size || a.height != cfg.model.input_size)
            a = crop_and_resize(a, std::nullopt, cfg.model.input_size);
          augmented.push_back(std::move(a));
        }
        ++sample_counter;
        const auto& r = train_data.records[idx];
        if (task == Task::EXPR)
          labels.push_back(*r.expr);
        else
          va.push_back({static_cast<S>(*r.valence), static_cast<S>(*r.arousal)});
      }
      if (do_augment)
        for (const Image& a : augmented) batch.push_back(&a);
      else
        for (std::size_t bi = start; bi < end; ++bi)
          batch.push_back(&train_data.images[static_cast<std::size_t>(order[bi])]);

      Tensor<S> x = images_to_tensor<S>(batch);
      Tape<S> tape;
      auto out = model_forward(&tape, ckpt.model, x, /*train=*/true);
      std::vector<Tensor<S>> head_feats;
      for (const auto& h : out.heads) head_feats.push_back(h.features);
      CombinedLossParts parts;
      Tensor<S> loss = combined_loss(&tape, task, out.output, labels, va, out.backbone_pooled,
                                     head_feats, ckpt.state.centers, cfg.loss, /*train=*/true,
                                     &parts);
      double loss_val = static_cast<double>(loss.item());
      if (!std::isfinite(loss_val))
        throw TrainingDivergenceError(
            "train: non-finite loss at epoch " + std::to_string(epoch) + " step " +
            std::to_string(step) + " (task " + std::to_string(parts.task) + ", affinity " +
            std::to_string(parts.affinity) + ", partition " + std::to_string(parts.partition) + ")");
      backward(tape, loss);
      optimizer_step(ckpt.model.params(), ckpt.state.optim, cfg.optim());
      ckpt.model.params().zero_grads();
      loss_acc += loss_val;
      ++batch_count;
    }
    auto t1 = std::chrono::steady_clock::now();
    double wall_ms = std::chrono::duration<double, std::milli>(t1 - t0).count();

    ValidationResult<S> val = validate(ckpt.model, val_data, cfg);
    EpochMetrics train_m{epoch, "train", batch_count ? loss_acc / static_cast<double>(batch_count) : 0.0,
                         val.metric_name, 0.0, wall_ms};
    // the train line carries the epoch's mean training loss; the metric is
    // evaluated on the validation split only
    train_m.metric_value = 0.0;
    emit(train_m);
    auto t2 = std::chrono::steady_clock::now();
    EpochMetrics val_m{epoch, "val", val.loss, val.metric_name, val.metric,
                       std::chrono::duration<double, std::milli>(t2 - t1).count()};
    emit(val_m);

    if (!ckpt.state.has_best || val.metric > ckpt.state.best_score) {
      ckpt.state.best_score = val.metric;
      ckpt.state.has_best = true;
      result.best_path = save_to("best.ckpt");
    }
    if (cfg.checkpoint_every > 0 && (epoch + 1) % cfg.checkpoint_every == 0)
      save_to("checkpoint_epoch" + std::to_string(epoch) + ".ckpt");
  }

  result.best_score = ckpt.state.best_score;
  if (cfg.epochs > 0) result.final_path = save_to("final.ckpt");
  return result;
}

}  // namespace dan
