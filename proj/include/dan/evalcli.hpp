#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "dan/train.hpp"

namespace dan {

struct PredictionRecord {
  std::string id;
  Task task = Task::EXPR;
  std::vector<double> probs;               // EXPR: 8 entries, simplex
  std::optional<std::array<double, 2>> va; // VA: (valence, arousal)
  std::string error;                       // per-item failure reason, if any

  bool failed() const { return !error.empty(); }

  void validate() const {
    if (failed()) return;
    if (task == Task::EXPR) {
      if (va || probs.size() != 8)
        throw ValidationError("prediction " + id + ": expr record needs exactly 8 probs");
      double s = 0;
      for (double p : probs) {
        if (p < 0) throw ValidationError("prediction " + id + ": negative probability");
        s += p;
      }
      if (std::abs(s - 1.0) > 1e-6)
        throw ValidationError("prediction " + id + ": probs sum " + std::to_string(s));
    } else {
      if (!probs.empty() || !va)
        throw ValidationError("prediction " + id + ": va record needs a (valence, arousal) pair");
      if ((*va)[0] < -1 || (*va)[0] > 1 || (*va)[1] < -1 || (*va)[1] > 1)
        throw ValidationError("prediction " + id + ": va out of range");
    }
  }
};

inline json to_json(const PredictionRecord& r) {
  json j{{"id", r.id}, {"task", task_name(r.task)}};
  if (r.failed()) {
    j["error"] = r.error;
  } else if (r.task == Task::EXPR) {
    j["probs"] = r.probs;
  } else {
    j["valence"] = (*r.va)[0];
    j["arousal"] = (*r.va)[1];
  }
  return j;
}

inline PredictionRecord prediction_from_json(const json& j) {
  PredictionRecord r;
  r.id = j.at("id").get<std::string>();
  std::string t = j.at("task").get<std::string>();
  if (t == "expr")
    r.task = Task::EXPR;
  else if (t == "va")
    r.task = Task::VA;
  else
    throw ValidationError("prediction " + r.id + ": unknown task '" + t + "'");
  if (j.contains("error")) {
    r.error = j.at("error").get<std::string>();
    return r;
  }
  if (j.contains("probs")) r.probs = j.at("probs").get<std::vector<double>>();
  if (j.contains("valence") || j.contains("arousal"))
    r.va = {j.at("valence").get<double>(), j.at("arousal").get<double>()};
  r.validate();
  return r;
}

inline std::vector<PredictionRecord> load_predictions(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot open predictions " + path);
  std::vector<PredictionRecord> out;
  std::string line;
  int lineno = 0;
  while (std::getline(f, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      out.push_back(prediction_from_json(json::parse(line)));
    } catch (const json::exception& e) {
      throw ParseError(path + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

inline void write_predictions(const std::string& path, const std::vector<PredictionRecord>& preds) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot write predictions " + path);
  for (const auto& r : preds) f << to_json(r).dump() << "\n";
  if (!f) throw IoError("short write to " + path);
}

// ---------------------------------------------------------------------------
// Soft voting
// ---------------------------------------------------------------------------

// Weighted mean across members; EXPR vectors are renormalized afterwards so
// float drift cannot leave the simplex. Output order follows the first member.
inline std::vector<PredictionRecord> soft_vote(
    const std::vector<std::vector<PredictionRecord>>& members, std::vector<double> weights = {}) {
  if (members.empty()) throw ConfigError("soft_vote: no members");
  if (weights.empty()) weights.assign(members.size(), 1.0);
  if (weights.size() != members.size())
    throw ConfigError("soft_vote: weight count does not match member count");
  double wsum = 0;
  for (double w : weights) {
    if (w < 0) throw ConfigError("soft_vote: negative weight");
    wsum += w;
  }
  if (wsum <= 0) throw ConfigError("soft_vote: weights sum to zero");
  for (double& w : weights) w /= wsum;

  // index every member by id and check the id sets agree
  std::vector<std::map<std::string, const PredictionRecord*>> by_id(members.size());
  for (std::size_t m = 0; m < members.size(); ++m)
    for (const auto& r : members[m]) {
      if (r.failed()) throw ValidationError("soft_vote: member has failed record " + r.id);
      r.validate();
      by_id[m][r.id] = &r;
    }
  for (std::size_t m = 1; m < members.size(); ++m) {
    std::vector<std::string> missing;
    for (const auto& [id, _] : by_id[0])
      if (!by_id[m].count(id)) missing.push_back(id);
    for (const auto& [id, _] : by_id[m])
      if (!by_id[0].count(id)) missing.push_back(id);
    if (!missing.empty()) {
      std::string list;
      for (std::size_t i = 0; i < missing.size() && i < 8; ++i)
        list += (i ? ", " : "") + missing[i];
      throw AlignmentError("soft_vote: member " + std::to_string(m) +
                           " id set mismatch, differing ids: " + list);
    }
  }

  std::vector<PredictionRecord> out;
  for (const auto& first : members[0]) {
    PredictionRecord r;
    r.id = first.id;
    r.task = first.task;
    if (first.task == Task::EXPR) {
      r.probs.assign(8, 0.0);
      for (std::size_t m = 0; m < members.size(); ++m) {
        const auto& p = by_id[m].at(first.id)->probs;
        for (int c = 0; c < 8; ++c) r.probs[static_cast<std::size_t>(c)] += weights[m] * p[static_cast<std::size_t>(c)];
      }
      double s = 0;
      for (double p : r.probs) s += p;
      for (double& p : r.probs) p /= s;
    } else {
      double v = 0, a = 0;
      for (std::size_t m = 0; m < members.size(); ++m) {
        const auto& p = *by_id[m].at(first.id)->va;
        v += weights[m] * p[0];
        a += weights[m] * p[1];
      }
      r.va = {v, a};
    }
    r.validate();
    out.push_back(std::move(r));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Prediction
// ---------------------------------------------------------------------------

// Eval-mode forward over the manifest; unreadable items become error records
// and the run continues.
template <typename S>
std::vector<PredictionRecord> predict_records(Checkpoint<S>& ckpt, Dataset& data,
                                              std::optional<Task> expected_task = std::nullopt) {
  Task task = ckpt.config.model.task;
  if (expected_task && *expected_task != task)
    throw ConfigError(std::string("predict: checkpoint task is ") + task_name(task) +
                      " but " + task_name(*expected_task) + " was requested");
  const ModelConfig& mc = ckpt.config.model;
  std::vector<PredictionRecord> preds;
  for (std::size_t i = 0; i < data.records.size(); ++i) {
    const auto& rec = data.records[i];
    PredictionRecord p;
    p.id = rec.path;
    p.task = task;
    try {
      Image raw = read_ppm((std::filesystem::path(data.root) / rec.path).string());
      Image sized = crop_and_resize(raw, rec.bbox, mc.input_size);
      std::vector<const Image*> batch = {&sized};  // eval batchnorm uses running stats
      Tensor<S> x = images_to_tensor<S>(batch);
      auto out = model_forward<S>(nullptr, ckpt.model, x, /*train=*/false);
      if (task == Task::EXPR) {
        p.probs.resize(8);
        for (int c = 0; c < 8; ++c) p.probs[static_cast<std::size_t>(c)] = static_cast<double>(out.output.data()[c]);
        double s = 0;
        for (double v : p.probs) s += v;
        for (double& v : p.probs) v /= s;
      } else {
        p.va = {static_cast<double>(out.output.data()[0]), static_cast<double>(out.output.data()[1])};
      }
      p.validate();
    } catch (const std::exception& e) {
      p.probs.clear();
      p.va.reset();
      p.error = e.what();
    }
    preds.push_back(std::move(p));
  }
  return preds;
}

// File-writing wrapper; returns the number of failed items.
template <typename S>
int predict(Checkpoint<S>& ckpt, Dataset& data, const std::string& out_path,
            std::optional<Task> expected_task = std::nullopt) {
  auto preds = predict_records(ckpt, data, expected_task);
  write_predictions(out_path, preds);
  int failures = 0;
  for (const auto& p : preds) failures += p.failed() ? 1 : 0;
  return failures;
}

// ---------------------------------------------------------------------------
// Scoring
// ---------------------------------------------------------------------------

enum class EvalMode { CONCAT, PER_VIDEO };

struct ScoreReport {
  Task task = Task::EXPR;
  EvalMode mode = EvalMode::CONCAT;
  double score = 0.0;
  std::vector<double> per_class;  // EXPR: 8 F1 values
  double ccc_valence = 0.0;       // VA breakdown
  double ccc_arousal = 0.0;
  std::int64_t item_count = 0;
  std::string config_hash;
};

inline json to_json(const ScoreReport& r) {
  json j{{"task", task_name(r.task)},
         {"mode", r.mode == EvalMode::CONCAT ? "concat" : "per_video"},
         {"score", r.score},
         {"item_count", r.item_count},
         {"config_hash", r.config_hash}};
  if (r.task == Task::EXPR)
    j["per_class"] = r.per_class;
  else
    j["per_channel"] = json{{"valence", r.ccc_valence}, {"arousal", r.ccc_arousal}};
  return j;
}

inline std::string fnv1a_hex(const std::string& bytes) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  std::ostringstream os;
  os << std::hex << h;
  return os.str();
}

// item id -> directory prefix; per-video CCC groups frames this way
inline std::string video_prefix(const std::string& id) {
  auto pos = id.find_last_of('/');
  return pos == std::string::npos ? std::string("") : id.substr(0, pos);
}

inline ScoreReport evaluate(const std::vector<PredictionRecord>& predictions,
                            const std::vector<AnnotationRecord>& truth, Task task,
                            EvalMode mode = EvalMode::CONCAT) {
  std::map<std::string, const PredictionRecord*> by_id;
  for (const auto& p : predictions)
    if (!p.failed()) by_id[p.id] = &p;

  std::vector<std::string> missing;
  for (const auto& t : truth)
    if (!by_id.count(t.path)) missing.push_back(t.path);
  if (!missing.empty()) {
    std::string list;
    for (std::size_t i = 0; i < missing.size() && i < 8; ++i) list += (i ? ", " : "") + missing[i];
    throw CoverageError("evaluate: missing predictions for " + std::to_string(missing.size()) +
                        " items: " + list);
  }

  ScoreReport rep;
  rep.task = task;
  rep.mode = mode;
  rep.item_count = static_cast<std::int64_t>(truth.size());

  if (task == Task::EXPR) {
    std::vector<int> pred, gt;
    for (const auto& t : truth) {
      if (!t.expr) throw LabelError("evaluate: ground truth without expr label: " + t.path);
      const auto& p = *by_id.at(t.path);
      if (p.task != Task::EXPR) throw ValidationError("evaluate: prediction task mismatch for " + t.path);
      int best = 0;  // ties resolve to the lowest class index
      for (int c = 1; c < 8; ++c)
        if (p.probs[static_cast<std::size_t>(c)] > p.probs[static_cast<std::size_t>(best)]) best = c;
      pred.push_back(best);
      gt.push_back(*t.expr);
    }
    auto f1 = macro_f1_report(pred, gt, 8);
    rep.score = f1.macro_f1;
    rep.per_class = f1.per_class;
  } else {
    struct Series {
      std::vector<double> pv, pa, tv, ta;
    };
    std::map<std::string, Series> groups;
    for (const auto& t : truth) {
      if (!t.has_va()) throw LabelError("evaluate: ground truth without VA labels: " + t.path);
      const auto& p = *by_id.at(t.path);
      if (p.task != Task::VA) throw ValidationError("evaluate: prediction task mismatch for " + t.path);
      std::string key = mode == EvalMode::PER_VIDEO ? video_prefix(t.path) : std::string("");
      auto& s = groups[key];
      s.pv.push_back((*p.va)[0]);
      s.pa.push_back((*p.va)[1]);
      s.tv.push_back(*t.valence);
      s.ta.push_back(*t.arousal);
    }
    double cv = 0, ca = 0;
    for (const auto& [key, s] : groups) {
      cv += ccc(s.pv, s.tv);
      ca += ccc(s.pa, s.ta);
    }
    cv /= static_cast<double>(groups.size());
    ca /= static_cast<double>(groups.size());
    rep.ccc_valence = cv;
    rep.ccc_arousal = ca;
    rep.score = 0.5 * (cv + ca);
  }
  return rep;
}

// ---------------------------------------------------------------------------
// Static HTML/SVG report
// ---------------------------------------------------------------------------

namespace detail {

inline std::string svg_polyline(const std::vector<double>& ys, double w, double h, double lo,
                                double hi, const char* color) {
  if (ys.size() < 2 || hi <= lo) return "";
  std::ostringstream os;
  os << "<polyline fill='none' stroke='" << color << "' stroke-width='2' points='";
  for (std::size_t i = 0; i < ys.size(); ++i) {
    double x = w * static_cast<double>(i) / static_cast<double>(ys.size() - 1);
    double y = h - h * (ys[i] - lo) / (hi - lo);
    os << x << "," << y << " ";
  }
  os << "'/>";
  return os.str();
}

}  // namespace detail

// Loss curves from the metrics JSONL, plus per-class bars when a score report
// is supplied.
inline void render_report(const std::string& metrics_path, const std::string& out_html,
                          const std::optional<std::string>& score_report_path = std::nullopt) {
  std::ifstream f(metrics_path);
  if (!f) throw IoError("report: cannot open " + metrics_path);
  std::vector<double> train_loss, val_loss, val_metric;
  std::string metric_name = "metric";
  std::string line;
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    json j = json::parse(line);
    if (j.at("split") == "train") train_loss.push_back(j.at("loss").get<double>());
    if (j.at("split") == "val") {
      val_loss.push_back(j.at("loss").get<double>());
      val_metric.push_back(j.at("metric_value").get<double>());
      metric_name = j.at("metric_name").get<std::string>();
    }
  }
  double lo = 1e300, hi = -1e300;
  for (const auto* v : {&train_loss, &val_loss})
    for (double y : *v) {
      lo = std::min(lo, y);
      hi = std::max(hi, y);
    }
  if (train_loss.empty()) lo = 0, hi = 1;
  if (hi == lo) hi = lo + 1;

  std::ostringstream html;
  html << "<!DOCTYPE html><html><head><meta charset='utf-8'><title>training report</title>"
       << "<style>body{font-family:sans-serif;margin:2em}svg{border:1px solid #ccc}</style>"
       << "</head><body><h1>Training report</h1>\n";
  html << "<h2>Loss</h2><svg width='640' height='320' viewBox='0 0 640 320'>"
       << detail::svg_polyline(train_loss, 640, 320, lo, hi, "#1f77b4")
       << detail::svg_polyline(val_loss, 640, 320, lo, hi, "#d62728") << "</svg>"
       << "<p><span style='color:#1f77b4'>train</span> / <span style='color:#d62728'>val</span>, "
       << "range [" << lo << ", " << hi << "]</p>\n";
  if (!val_metric.empty()) {
    html << "<h2>" << metric_name << "</h2><svg width='640' height='320' viewBox='0 0 640 320'>"
         << detail::svg_polyline(val_metric, 640, 320, 0.0, 1.0, "#2ca02c") << "</svg>"
         << "<p>final " << metric_name << ": " << val_metric.back() << "</p>\n";
  }
  if (score_report_path) {
    std::ifstream sf(*score_report_path);
    if (!sf) throw IoError("report: cannot open " + *score_report_path);
    json rep = json::parse(sf);
    html << "<h2>Score: " << rep.at("score").get<double>() << "</h2>";
    if (rep.contains("per_class")) {
      auto per_class = rep.at("per_class").get<std::vector<double>>();
      html << "<svg width='640' height='320' viewBox='0 0 640 320'>";
      for (std::size_t c = 0; c < per_class.size(); ++c) {
        double bh = 300.0 * per_class[c];
        html << "<rect x='" << (10 + 78 * c) << "' y='" << (310 - bh)
             << "' width='60' height='" << bh << "' fill='#1f77b4'/>"
             << "<text x='" << (40 + 78 * c) << "' y='318' font-size='10' text-anchor='middle'>"
             << kClassNames[c] << "</text>";
      }
      html << "</svg>\n";
    }
    if (rep.contains("per_channel"))
      html << "<p>valence CCC " << rep.at("per_channel").at("valence").get<double>()
           << ", arousal CCC " << rep.at("per_channel").at("arousal").get<double>() << "</p>\n";
  }
  html << "</body></html>\n";

  std::ofstream out(out_html, std::ios::binary);
  if (!out) throw IoError("report: cannot write " + out_html);
  out << html.str();
}

}  // namespace dan
