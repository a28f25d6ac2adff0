#pragma once

#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "dan/errors.hpp"
#include "dan/image.hpp"
#include "dan/losses.hpp"

namespace dan {

enum class Source { AFFWILD2, AFFECTNET, EXPW, AIHUB, SYNTH };

inline std::string source_name(Source s) {
  switch (s) {
    case Source::AFFWILD2: return "AFFWILD2";
    case Source::AFFECTNET: return "AFFECTNET";
    case Source::EXPW: return "EXPW";
    case Source::AIHUB: return "AIHUB";
    case Source::SYNTH: return "SYNTH";
  }
  throw ConfigError("unknown source enum value");
}

inline Source parse_source(const std::string& s) {
  for (Source v : {Source::AFFWILD2, Source::AFFECTNET, Source::EXPW, Source::AIHUB, Source::SYNTH})
    if (s == source_name(v)) return v;
  throw ValidationError("unknown source '" + s + "'");
}

// Class index order: 0 Neutral, 1 Anger, 2 Disgust, 3 Fear, 4 Happy, 5 Sad,
// 6 Surprise, 7 Other.
constexpr int kNumClasses = 8;
inline const char* kClassNames[kNumClasses] = {"Neutral", "Anger",    "Disgust", "Fear",
                                               "Happy",   "Sad",      "Surprise", "Other"};

struct AnnotationRecord {
  std::string path;
  Source source = Source::SYNTH;
  std::optional<int> expr;
  std::optional<double> valence;
  std::optional<double> arousal;
  std::optional<BBox> bbox;

  bool has_va() const { return valence.has_value() && arousal.has_value(); }

  void validate() const {
    if (path.empty()) throw ValidationError("record: empty path");
    if (expr && (*expr < 0 || *expr >= kNumClasses))
      throw ValidationError("record: expr " + std::to_string(*expr) + " out of range");
    if (valence.has_value() != arousal.has_value())
      throw ValidationError("record: valence and arousal must be present together");
    if (valence && (*valence < -1.0 || *valence > 1.0))
      throw ValidationError("record: valence out of [-1,1]");
    if (arousal && (*arousal < -1.0 || *arousal > 1.0))
      throw ValidationError("record: arousal out of [-1,1]");
    if (!expr && !has_va()) throw ValidationError("record: no usable labels");
    if (bbox && (bbox->w <= 0 || bbox->h <= 0 || bbox->x < 0 || bbox->y < 0))
      throw ValidationError("record: malformed bbox");
  }
};

namespace detail {

inline std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : s) {
    if (c == sep) {
      out.push_back(cur);
      cur.clear();
    } else {
      cur.push_back(c);
    }
  }
  out.push_back(cur);
  return out;
}

inline double parse_double_field(const std::string& s, const char* what) {
  std::size_t pos = 0;
  double v;
  try {
    v = std::stod(s, &pos);
  } catch (const std::exception&) {
    throw ValidationError(std::string("bad ") + what + " '" + s + "'");
  }
  if (pos != s.size()) throw ValidationError(std::string("bad ") + what + " '" + s + "'");
  return v;
}

inline int parse_int_field(const std::string& s, const char* what) {
  std::size_t pos = 0;
  int v;
  try {
    v = std::stoi(s, &pos);
  } catch (const std::exception&) {
    throw ValidationError(std::string("bad ") + what + " '" + s + "'");
  }
  if (pos != s.size()) throw ValidationError(std::string("bad ") + what + " '" + s + "'");
  return v;
}

}  // namespace detail

inline const char* kManifestHeader = "path,source,expr,valence,arousal,bbox";

// CSV grammar: header line, then `path,source,expr,valence,arousal,bbox` rows;
// empty field = absent; bbox encoded `x;y;w;h`.
inline std::vector<AnnotationRecord> load_manifest(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot open manifest " + path);
  std::string line;
  int lineno = 0;
  if (!std::getline(f, line)) throw ParseError(path + ": empty manifest");
  ++lineno;
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line != kManifestHeader)
    throw ParseError(path + ":1: bad header '" + line + "'");
  std::vector<AnnotationRecord> out;
  while (std::getline(f, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    auto fields = detail::split(line, ',');
    std::string where = path + ":" + std::to_string(lineno) + ": ";
    if (fields.size() != 6) throw ParseError(where + "expected 6 fields, got " + std::to_string(fields.size()));
    AnnotationRecord r;
    try {
      r.path = fields[0];
      r.source = parse_source(fields[1]);
      if (!fields[2].empty()) r.expr = detail::parse_int_field(fields[2], "expr");
      if (!fields[3].empty()) r.valence = detail::parse_double_field(fields[3], "valence");
      if (!fields[4].empty()) r.arousal = detail::parse_double_field(fields[4], "arousal");
      if (!fields[5].empty()) {
        auto parts = detail::split(fields[5], ';');
        if (parts.size() != 4) throw ValidationError("bbox must be x;y;w;h");
        BBox b;
        b.x = detail::parse_int_field(parts[0], "bbox.x");
        b.y = detail::parse_int_field(parts[1], "bbox.y");
        b.w = detail::parse_int_field(parts[2], "bbox.w");
        b.h = detail::parse_int_field(parts[3], "bbox.h");
        r.bbox = b;
      }
      r.validate();
    } catch (const ValidationError& e) {
      throw ValidationError(where + e.what());
    }
    out.push_back(std::move(r));
  }
  return out;
}

inline void write_manifest(const std::string& path, const std::vector<AnnotationRecord>& records) {
  std::ofstream f(path, std::ios::binary);  // binary keeps LF endings everywhere
  if (!f) throw IoError("cannot write manifest " + path);
  f << kManifestHeader << "\n";
  for (const auto& r : records) {
    f << r.path << "," << source_name(r.source) << ",";
    if (r.expr) f << *r.expr;
    f << ",";
    if (r.valence) f << *r.valence;
    f << ",";
    if (r.arousal) f << *r.arousal;
    f << ",";
    if (r.bbox) f << r.bbox->x << ";" << r.bbox->y << ";" << r.bbox->w << ";" << r.bbox->h;
    f << "\n";
  }
  if (!f) throw IoError("short write to manifest " + path);
}

struct MergeResult {
  std::vector<AnnotationRecord> records;
  std::vector<std::int64_t> retained_per_source;  // parallel to the input list
};

// Concatenate sources, keeping only records usable by the task. Duplicate
// paths across sources are kept as-is.
inline MergeResult merge_sources(const std::vector<std::vector<AnnotationRecord>>& manifests,
                                 Task task) {
  MergeResult out;
  for (const auto& m : manifests) {
    std::int64_t kept = 0;
    for (const auto& r : m) {
      bool usable = task == Task::EXPR ? r.expr.has_value() : r.has_va();
      if (usable) {
        out.records.push_back(r);
        ++kept;
      }
    }
    out.retained_per_source.push_back(kept);
  }
  if (out.records.empty()) throw CoverageError("merge_sources: no usable records for task");
  return out;
}

}  // namespace dan
