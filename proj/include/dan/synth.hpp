#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "dan/errors.hpp"
#include "dan/image.hpp"
#include "dan/manifest.hpp"
#include "dan/rng.hpp"

namespace dan {

struct SynthSpec {
  int num_classes = kNumClasses;
  int per_class = 100;
  int image_size = 64;
  std::uint64_t seed = 0;

  void validate() const {
    if (num_classes < 1 || num_classes > kNumClasses)
      throw ConfigError("synth: num_classes must be in 1..8");
    if (per_class < 1) throw ConfigError("synth: per_class must be >= 1");
    if (image_size < 8) throw ConfigError("synth: image_size must be >= 8");
  }
};

namespace detail {

// Distinct base pattern per class; `phase` nudges it smoothly without moving
// the class off its centroid.
inline double synth_pattern(int cls, double phase, double x, double y) {
  // x, y in [0,1]
  constexpr double kTau = 6.283185307179586;
  double t = 0.15 * phase;
  switch (cls) {
    case 0: return 0.5 + 0.5 * std::sin(kTau * (3.0 * y + t));
    case 1: return 0.5 + 0.5 * std::sin(kTau * (3.0 * x + t));
    case 2: return 0.5 + 0.5 * std::sin(kTau * (2.0 * (x + y) + t));
    case 3: return 0.5 + 0.5 * std::sin(kTau * (2.0 * (x - y) + t));
    case 4: {
      double r = std::hypot(x - 0.5, y - 0.5);
      return 0.5 + 0.5 * std::sin(kTau * (3.0 * r + t));
    }
    case 5: {
      double r2 = (x - 0.5) * (x - 0.5) + (y - 0.5) * (y - 0.5);
      double s = 0.18 + 0.04 * phase;
      return std::exp(-r2 / (2.0 * s * s));
    }
    case 6: {
      double acc = 0;
      double s = 0.12 + 0.03 * phase;
      for (double cxv : {0.2, 0.8})
        for (double cyv : {0.2, 0.8}) {
          double r2 = (x - cxv) * (x - cxv) + (y - cyv) * (y - cyv);
          acc += std::exp(-r2 / (2.0 * s * s));
        }
      return std::min(1.0, acc);
    }
    case 7: {
      int bx = static_cast<int>(x * 4.0 + 0.5 * phase);
      int by = static_cast<int>(y * 4.0);
      return ((bx + by) % 2 == 0) ? 0.9 : 0.1;
    }
  }
  throw ConfigError("synth: class out of range");
}

inline const double kSynthColor[kNumClasses][3] = {
    {1.0, 0.3, 0.3}, {0.3, 1.0, 0.3}, {0.3, 0.3, 1.0}, {1.0, 1.0, 0.2},
    {1.0, 0.3, 1.0}, {0.2, 1.0, 1.0}, {0.9, 0.6, 0.2}, {0.7, 0.7, 0.7}};

}  // namespace detail

// Valence/arousal as a smooth function of class angle and pattern phase.
inline std::pair<double, double> synth_va(int cls, double phase) {
  constexpr double kTau = 6.283185307179586;
  double theta = kTau * cls / 8.0;
  double v = 0.75 * std::cos(theta) + 0.15 * std::sin(kTau * phase);
  double a = 0.75 * std::sin(theta) + 0.15 * std::cos(kTau * phase);
  return {std::clamp(v, -1.0, 1.0), std::clamp(a, -1.0, 1.0)};
}

inline Image synth_image(int cls, double phase, int size, std::uint64_t seed,
                         std::uint64_t sample_index) {
  Image img(size, size);
  KeyedRng noise(seed, 0x6e6f697365ULL ^ sample_index);
  for (int y = 0; y < size; ++y)
    for (int x = 0; x < size; ++x) {
      double p = detail::synth_pattern(cls, phase, (x + 0.5) / size, (y + 0.5) / size);
      double n = 12.0 * noise.next_gaussian();
      for (int c = 0; c < 3; ++c) {
        double v = 255.0 * (0.12 + 0.75 * p * detail::kSynthColor[cls][c]) + n;
        img.at(x, y, c) = detail::clamp_u8(v);
      }
    }
  return img;
}

// Writes `<out_dir>/SYNTH/*.ppm` plus `<out_dir>/manifest.csv`; the corpus is
// a pure function of the spec, so regenerating with the same seed is
// bit-identical. Record paths are relative to out_dir.
inline std::vector<AnnotationRecord> synth_generate(const SynthSpec& spec,
                                                    const std::string& out_dir) {
  spec.validate();
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(fs::path(out_dir) / "SYNTH", ec);
  if (ec) throw IoError("synth: cannot create " + out_dir + ": " + ec.message());

  std::vector<AnnotationRecord> records;
  std::uint64_t sample_index = 0;
  for (int cls = 0; cls < spec.num_classes; ++cls) {
    for (int i = 0; i < spec.per_class; ++i, ++sample_index) {
      KeyedRng rng(spec.seed, 0x706861736580ULL ^ sample_index);
      double phase = rng.next_double();
      Image img = synth_image(cls, phase, spec.image_size, spec.seed, sample_index);
      std::string rel = "SYNTH/cls" + std::to_string(cls) + "_" + std::to_string(i) + ".ppm";
      write_ppm((fs::path(out_dir) / rel).string(), img);
      AnnotationRecord r;
      r.path = rel;
      r.source = Source::SYNTH;
      r.expr = cls;
      auto [v, a] = synth_va(cls, phase);
      r.valence = v;
      r.arousal = a;
      records.push_back(std::move(r));
    }
  }
  write_manifest((fs::path(out_dir) / "manifest.csv").string(), records);
  return records;
}

}  // namespace dan
