#include <CLI11.hpp>
#include <cxxabi.h>

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "dan/evalcli.hpp"
#include "dan/gradsuite.hpp"
#include "dan/synth.hpp"
#include "dan/train.hpp"

namespace fs = std::filesystem;
using dan::json;

namespace {

dan::Task parse_task_flag(const std::string& s) {
  if (s == "expr") return dan::Task::EXPR;
  if (s == "va") return dan::Task::VA;
  throw dan::ConfigError("unknown task '" + s + "' (expected expr or va)");
}

dan::TrainConfig load_train_config(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw dan::IoError("cannot open config " + path);
  json j;
  try {
    j = json::parse(f);
  } catch (const json::exception& e) {
    throw dan::ParseError(path + ": " + e.what());
  }
  return dan::train_config_from_json(j);
}

// Deterministic 80/20 split when no validation manifest is given.
std::pair<dan::Dataset, dan::Dataset> split_dataset(const dan::Dataset& all) {
  dan::Dataset tr, va;
  tr.root = va.root = all.root;
  for (std::size_t i = 0; i < all.records.size(); ++i)
    ((i % 5 == 4) ? va : tr).records.push_back(all.records[i]);
  return {tr, va};
}

std::string file_contents(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw dan::IoError("cannot open " + path);
  return std::string(std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>());
}

void write_json_file(const std::string& path, const json& j) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw dan::IoError("cannot write " + path);
  f << j.dump(2) << "\n";
}

int cmd_synth(const std::string& out, std::uint64_t seed, int per_class, int size, int classes) {
  dan::SynthSpec spec;
  spec.num_classes = classes;
  spec.per_class = per_class;
  spec.image_size = size;
  spec.seed = seed;
  auto recs = dan::synth_generate(spec, out);
  std::cout << json{{"generated", recs.size()},
                    {"manifest", (fs::path(out) / "manifest.csv").string()}}
                   .dump()
            << "\n";
  return 0;
}

int cmd_train(const std::string& config_path, const std::string& data_path,
              const std::string& val_path, const std::string& out,
              std::optional<std::uint64_t> seed) {
  dan::TrainConfig cfg = load_train_config(config_path);
  if (seed) cfg.seed = *seed;
  dan::Dataset tr, va;
  if (val_path.empty()) {
    dan::Dataset all = dan::Dataset::load(data_path);
    std::tie(tr, va) = split_dataset(all);
  } else {
    tr = dan::Dataset::load(data_path);
    va = dan::Dataset::load(val_path);
  }
  auto res = dan::train<float>(cfg, tr, va, out);
  std::cout << json{{"epochs", cfg.epochs},
                    {"best_score", res.best_score},
                    {"best_checkpoint", res.best_path},
                    {"final_checkpoint", res.final_path},
                    {"metrics", (fs::path(out) / "metrics.jsonl").string()}}
                   .dump()
            << "\n";
  return 0;
}

int cmd_gradcheck(int instances, double tol, std::uint64_t seed) {
  auto res = dan::run_grad_suite(instances, tol, seed);
  for (const auto& e : res.entries)
    std::printf("%-16s instances %3d  failed %d  worst rel err %.3g\n", e.op.c_str(), e.instances,
                e.failed, e.worst_rel_err);
  std::printf("total: %d instances, %s\n", res.total_instances, res.pass ? "PASS" : "FAIL");
  return res.pass ? 0 : 1;
}

int cmd_predict(const std::string& ckpt_path, const std::string& data_path,
                const std::string& out, const std::string& task_flag) {
  auto ckpt = dan::checkpoint_load<float>(ckpt_path);
  std::optional<dan::Task> expect;
  if (!task_flag.empty()) expect = parse_task_flag(task_flag);
  dan::Dataset data = dan::Dataset::load(data_path);
  int failures = dan::predict(ckpt, data, out, expect);
  std::cout << json{{"items", data.records.size()}, {"failures", failures}, {"out", out}}.dump()
            << "\n";
  return failures == 0 ? 0 : 1;
}

int cmd_eval(const std::string& pred_path, const std::string& data_path,
             const std::string& task_flag, const std::string& mode_flag,
             const std::string& out) {
  dan::Task task = parse_task_flag(task_flag);
  dan::EvalMode mode;
  if (mode_flag == "concat")
    mode = dan::EvalMode::CONCAT;
  else if (mode_flag == "per_video")
    mode = dan::EvalMode::PER_VIDEO;
  else
    throw dan::ConfigError("unknown mode '" + mode_flag + "' (expected concat or per_video)");
  auto preds = dan::load_predictions(pred_path);
  auto truth = dan::load_manifest(data_path);
  auto rep = dan::evaluate(preds, truth, task, mode);
  rep.config_hash = dan::fnv1a_hex(file_contents(pred_path) + task_flag + mode_flag);
  json j = dan::to_json(rep);
  if (!out.empty()) write_json_file(out, j);
  std::cout << j.dump() << "\n";
  return 0;
}

int cmd_ensemble_eval(const std::vector<std::string>& ckpt_paths, const std::string& data_path,
                      std::vector<double> weights, const std::string& mode_flag,
                      const std::string& out) {
  dan::EvalMode mode = mode_flag == "per_video" ? dan::EvalMode::PER_VIDEO : dan::EvalMode::CONCAT;
  auto truth = dan::load_manifest(data_path);
  std::vector<std::vector<dan::PredictionRecord>> members;
  std::vector<double> member_scores;
  dan::Task task = dan::Task::EXPR;
  for (std::size_t i = 0; i < ckpt_paths.size(); ++i) {
    auto ckpt = dan::checkpoint_load<float>(ckpt_paths[i]);
    if (i == 0)
      task = ckpt.config.model.task;
    else if (ckpt.config.model.task != task)
      throw dan::ConfigError("ensemble-eval: members disagree on task");
    dan::Dataset data = dan::Dataset::load(data_path);
    auto preds = dan::predict_records(ckpt, data);
    for (const auto& p : preds)
      if (p.failed()) throw dan::IoError("ensemble-eval: failed item " + p.id + ": " + p.error);
    member_scores.push_back(dan::evaluate(preds, truth, task, mode).score);
    members.push_back(std::move(preds));
  }
  auto voted = dan::soft_vote(members, weights);
  auto rep = dan::evaluate(voted, truth, task, mode);
  std::string hash_src = data_path;
  for (const auto& p : ckpt_paths) hash_src += "|" + p;
  rep.config_hash = dan::fnv1a_hex(hash_src);
  json j = dan::to_json(rep);
  j["member_scores"] = member_scores;
  if (!out.empty()) write_json_file(out, j);
  std::cout << j.dump() << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"extended-DAN facial affect pipeline"};
  app.require_subcommand(1);

  // synth
  auto* synth = app.add_subcommand("synth", "generate the synthetic fixture corpus");
  std::string synth_out;
  std::uint64_t synth_seed = 0;
  int per_class = 300, size = 64, classes = 8;
  synth->add_option("--out", synth_out, "output directory")->required();
  synth->add_option("--seed", synth_seed, "rng seed");
  synth->add_option("--per-class", per_class, "images per class");
  synth->add_option("--size", size, "image side length");
  synth->add_option("--classes", classes, "number of classes");

  // train
  auto* train = app.add_subcommand("train", "train a model");
  std::string train_config, train_data, train_val, train_out = "run";
  std::optional<std::uint64_t> train_seed;
  train->add_option("--config", train_config, "train config JSON")->required();
  train->add_option("--data", train_data, "training manifest CSV")->required();
  train->add_option("--val", train_val, "validation manifest CSV (default: 80/20 split)");
  train->add_option("--out", train_out, "output directory");
  std::uint64_t seed_holder = 0;
  auto* seed_opt = train->add_option("--seed", seed_holder, "seed override");

  // gradcheck
  auto* gradcheck = app.add_subcommand("gradcheck", "finite-difference gradient suite");
  int gc_instances = 20;
  double gc_tol = 1e-4;
  std::uint64_t gc_seed = 0;
  gradcheck->add_option("--instances", gc_instances, "instances per op");
  gradcheck->add_option("--tol", gc_tol, "relative error tolerance");
  gradcheck->add_option("--seed", gc_seed, "rng seed");

  // predict
  auto* predict = app.add_subcommand("predict", "write predictions for a manifest");
  std::string pr_ckpt, pr_data, pr_out, pr_task;
  predict->add_option("--checkpoint", pr_ckpt, "checkpoint file")->required();
  predict->add_option("--data", pr_data, "manifest CSV")->required();
  predict->add_option("--out", pr_out, "output JSONL")->required();
  predict->add_option("--task", pr_task, "expected task (expr|va)");

  // eval
  auto* eval = app.add_subcommand("eval", "score a prediction file");
  std::string ev_pred, ev_data, ev_task, ev_mode = "concat", ev_out;
  eval->add_option("--predictions", ev_pred, "prediction JSONL")->required();
  eval->add_option("--data", ev_data, "ground truth manifest CSV")->required();
  eval->add_option("--task", ev_task, "task (expr|va)")->required();
  eval->add_option("--mode", ev_mode, "concat|per_video");
  eval->add_option("--out", ev_out, "score report JSON path");

  // ensemble-eval
  auto* ens = app.add_subcommand("ensemble-eval", "soft-vote several checkpoints and score");
  std::vector<std::string> en_ckpts;
  std::vector<double> en_weights;
  std::string en_data, en_mode = "concat", en_out;
  ens->add_option("--checkpoint", en_ckpts, "member checkpoint (repeatable)")->required();
  ens->add_option("--data", en_data, "ground truth manifest CSV")->required();
  ens->add_option("--weights", en_weights, "member weights (default uniform)");
  ens->add_option("--mode", en_mode, "concat|per_video");
  ens->add_option("--out", en_out, "score report JSON path");

  // report
  auto* report = app.add_subcommand("report", "render metrics JSONL to static HTML");
  std::string rp_metrics, rp_score, rp_out;
  report->add_option("--metrics", rp_metrics, "metrics JSONL")->required();
  report->add_option("--score", rp_score, "score report JSON (optional)");
  report->add_option("--out", rp_out, "output HTML path")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e);
    return code == 0 ? 0 : 2;  // help exits 0, usage errors exit 2
  }

  try {
    if (*synth) return cmd_synth(synth_out, synth_seed, per_class, size, classes);
    if (*train) {
      if (seed_opt->count()) train_seed = seed_holder;
      return cmd_train(train_config, train_data, train_val, train_out, train_seed);
    }
    if (*gradcheck) return cmd_gradcheck(gc_instances, gc_tol, gc_seed);
    if (*predict) return cmd_predict(pr_ckpt, pr_data, pr_out, pr_task);
    if (*eval) return cmd_eval(ev_pred, ev_data, ev_task, ev_mode, ev_out);
    if (*ens) return cmd_ensemble_eval(en_ckpts, en_data, en_weights, en_mode, en_out);
    if (*report) {
      dan::render_report(rp_metrics, rp_out,
                         rp_score.empty() ? std::nullopt : std::make_optional(rp_score));
      std::cout << json{{"out", rp_out}}.dump() << "\n";
      return 0;
    }
  } catch (const std::exception& e) {
    int status = 0;
    char* demangled = abi::__cxa_demangle(typeid(e).name(), nullptr, nullptr, &status);
    std::string name = status == 0 && demangled ? demangled : typeid(e).name();
    std::free(demangled);
    std::cerr << json{{"error", name}, {"message", e.what()}}.dump() << "\n";
    return 1;
  }
  return 2;
}
