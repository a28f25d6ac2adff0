#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include "dan/errors.hpp"
#include "dan/rng.hpp"

namespace dan {

// 8-bit RGB, row-major, interleaved channels.
struct Image {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> data;  // 3 * width * height

  Image() = default;
  Image(int w, int h) : width(w), height(h), data(static_cast<std::size_t>(3) * w * h, 0) {
    if (w <= 0 || h <= 0) throw GeometryError("image: nonpositive dimensions");
  }

  std::uint8_t& at(int x, int y, int c) {
    return data[(static_cast<std::size_t>(y) * width + x) * 3 + static_cast<std::size_t>(c)];
  }
  std::uint8_t at(int x, int y, int c) const {
    return data[(static_cast<std::size_t>(y) * width + x) * 3 + static_cast<std::size_t>(c)];
  }
};

struct BBox {
  int x = 0, y = 0, w = 0, h = 0;
};

// ---- PPM (P6, maxval 255) ----

inline Image read_ppm(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open " + path);
  auto next_token = [&]() -> std::string {
    std::string tok;
    int ch;
    while ((ch = f.get()) != EOF) {
      if (ch == '#') {  // comment to end of line
        while ((ch = f.get()) != EOF && ch != '\n') {
        }
        continue;
      }
      if (std::isspace(ch)) {
        if (!tok.empty()) return tok;
        continue;
      }
      tok.push_back(static_cast<char>(ch));
    }
    return tok;
  };
  std::string magic = next_token();
  if (magic != "P6") throw ParseError(path + ": not a P6 ppm (magic '" + magic + "')");
  int w, h, maxval;
  try {
    w = std::stoi(next_token());
    h = std::stoi(next_token());
    maxval = std::stoi(next_token());
  } catch (const std::exception&) {
    throw ParseError(path + ": malformed ppm header");
  }
  if (w <= 0 || h <= 0) throw ParseError(path + ": nonpositive ppm dimensions");
  if (maxval != 255) throw ParseError(path + ": unsupported ppm maxval " + std::to_string(maxval));
  Image img(w, h);
  f.read(reinterpret_cast<char*>(img.data.data()), static_cast<std::streamsize>(img.data.size()));
  if (f.gcount() != static_cast<std::streamsize>(img.data.size()))
    throw ParseError(path + ": truncated ppm pixel data");
  return img;
}

inline void write_ppm(const std::string& path, const Image& img) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot write " + path);
  f << "P6\n" << img.width << " " << img.height << "\n255\n";
  f.write(reinterpret_cast<const char*>(img.data.data()), static_cast<std::streamsize>(img.data.size()));
  if (!f) throw IoError("short write to " + path);
}

// ---- Geometry ----

// Crop to bbox (full frame when absent), then bilinear-resize to a square.
// Resize maps corners to corners, so an identity-size crop is a no-op.
inline Image crop_and_resize(const Image& img, const std::optional<BBox>& bbox, int out_size) {
  if (out_size <= 0) throw GeometryError("crop_and_resize: nonpositive output size");
  int cx = 0, cy = 0, cw = img.width, ch = img.height;
  if (bbox) {
    if (bbox->w <= 0 || bbox->h <= 0 || bbox->x < 0 || bbox->y < 0 ||
        bbox->x + bbox->w > img.width || bbox->y + bbox->h > img.height)
      throw GeometryError("crop_and_resize: bbox out of bounds");
    cx = bbox->x;
    cy = bbox->y;
    cw = bbox->w;
    ch = bbox->h;
  }
  Image out(out_size, out_size);
  for (int oy = 0; oy < out_size; ++oy) {
    double sy = out_size == 1 ? (ch - 1) / 2.0
                              : static_cast<double>(oy) * (ch - 1) / (out_size - 1);
    int y0 = static_cast<int>(sy);
    int y1 = std::min(y0 + 1, ch - 1);
    double fy = sy - y0;
    for (int ox = 0; ox < out_size; ++ox) {
      double sx = out_size == 1 ? (cw - 1) / 2.0
                                : static_cast<double>(ox) * (cw - 1) / (out_size - 1);
      int x0 = static_cast<int>(sx);
      int x1 = std::min(x0 + 1, cw - 1);
      double fx = sx - x0;
      for (int c = 0; c < 3; ++c) {
        double v00 = img.at(cx + x0, cy + y0, c), v01 = img.at(cx + x1, cy + y0, c);
        double v10 = img.at(cx + x0, cy + y1, c), v11 = img.at(cx + x1, cy + y1, c);
        double v = (1 - fy) * ((1 - fx) * v00 + fx * v01) + fy * ((1 - fx) * v10 + fx * v11);
        out.at(ox, oy, c) = static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 255.0)));
      }
    }
  }
  return out;
}

// ---- Augmentation ----

struct AugmentPolicy {
  enum Kind { COLOR_JITTER, RANDOM_CROP, HFLIP, JITTER_THEN_CROP, CROP_THEN_FLIP };
  Kind kind = COLOR_JITTER;
  double brightness = 0.2;  // multiplicative delta range
  double contrast = 0.2;
  double saturation = 0.2;
  double crop_ratio = 0.9;

  void validate() const {
    auto in_unit = [](double v) { return v >= 0.0 && v < 1.0; };
    if (!in_unit(brightness) || !in_unit(contrast) || !in_unit(saturation))
      throw ConfigError("augment: jitter strengths must lie in [0,1)");
    if (!(crop_ratio > 0.0 && crop_ratio <= 1.0))
      throw ConfigError("augment: crop ratio must lie in (0,1]");
  }
};

namespace detail {

inline std::uint8_t clamp_u8(double v) {
  return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 255.0)));
}

inline Image color_jitter(const Image& img, const AugmentPolicy& p, KeyedRng& rng) {
  double db = rng.uniform(-p.brightness, p.brightness);
  double dc = rng.uniform(-p.contrast, p.contrast);
  double ds = rng.uniform(-p.saturation, p.saturation);
  double mean = 0;
  for (std::uint8_t v : img.data) mean += v;
  mean /= static_cast<double>(img.data.size());
  Image out(img.width, img.height);
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x) {
      double r = img.at(x, y, 0), g = img.at(x, y, 1), b = img.at(x, y, 2);
      double luma = 0.299 * r + 0.587 * g + 0.114 * b;
      double px[3] = {r, g, b};
      for (int c = 0; c < 3; ++c) {
        double v = luma + (1.0 + ds) * (px[c] - luma);  // saturation about luma
        v = mean + (1.0 + dc) * (v - mean);             // contrast about image mean
        v *= 1.0 + db;                                  // brightness scale
        out.at(x, y, c) = clamp_u8(v);
      }
    }
  return out;
}

inline Image random_crop(const Image& img, const AugmentPolicy& p, KeyedRng& rng) {
  int cw = std::max(1, static_cast<int>(img.width * p.crop_ratio));
  int ch = std::max(1, static_cast<int>(img.height * p.crop_ratio));
  int ox = static_cast<int>(rng.next_below(static_cast<std::uint64_t>(img.width - cw + 1)));
  int oy = static_cast<int>(rng.next_below(static_cast<std::uint64_t>(img.height - ch + 1)));
  Image out(cw, ch);
  for (int y = 0; y < ch; ++y)
    for (int x = 0; x < cw; ++x)
      for (int c = 0; c < 3; ++c) out.at(x, y, c) = img.at(ox + x, oy + y, c);
  return out;
}

inline Image hflip(const Image& img) {
  Image out(img.width, img.height);
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x)
      for (int c = 0; c < 3; ++c) out.at(x, y, c) = img.at(img.width - 1 - x, y, c);
  return out;
}

}  // namespace detail

// All randomness comes from a counter generator keyed on (seed, sample_index),
// so the result depends only on the key, never on evaluation order.
inline Image augment(const Image& img, const AugmentPolicy& policy, std::uint64_t seed,
                     std::uint64_t sample_index) {
  policy.validate();
  KeyedRng rng(seed, sample_index);
  switch (policy.kind) {
    case AugmentPolicy::COLOR_JITTER:
      return detail::color_jitter(img, policy, rng);
    case AugmentPolicy::RANDOM_CROP:
      return detail::random_crop(img, policy, rng);
    case AugmentPolicy::HFLIP:
      return detail::hflip(img);
    case AugmentPolicy::JITTER_THEN_CROP: {
      Image j = detail::color_jitter(img, policy, rng);
      return detail::random_crop(j, policy, rng);
    }
    case AugmentPolicy::CROP_THEN_FLIP:
      return detail::hflip(detail::random_crop(img, policy, rng));
  }
  throw ConfigError("augment: unknown policy kind");
}

}  // namespace dan
