#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <array>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>

#include "dan/image.hpp"
#include "dan/manifest.hpp"
#include "dan/sampler.hpp"
#include "dan/synth.hpp"

using namespace dan;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const std::string& tag) {
  fs::path p = fs::temp_directory_path() / ("dan_test_" + tag);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

Image gradient_image(int w, int h) {
  Image img(w, h);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      img.at(x, y, 0) = static_cast<std::uint8_t>((x * 7 + y * 13) % 256);
      img.at(x, y, 1) = static_cast<std::uint8_t>((x * 3 + y * 5) % 256);
      img.at(x, y, 2) = static_cast<std::uint8_t>((x + y * 2) % 256);
    }
  return img;
}

void write_text(const fs::path& p, const std::string& body) {
  std::ofstream f(p, std::ios::binary);
  f << body;
}

std::string read_bytes(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  return std::string(std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>());
}

}  // namespace

TEST_CASE("ppm round-trip is bit-exact") {
  auto dir = temp_dir("ppm");
  Image img = gradient_image(13, 9);
  write_ppm((dir / "a.ppm").string(), img);
  Image back = read_ppm((dir / "a.ppm").string());
  CHECK(back.width == 13);
  CHECK(back.height == 9);
  CHECK(back.data == img.data);
}

TEST_CASE("ppm reader handles comments and rejects bad input") {
  auto dir = temp_dir("ppm_bad");
  write_text(dir / "c.ppm", "P6\n# comment\n2 1\n255\nabcdef");
  Image img = read_ppm((dir / "c.ppm").string());
  CHECK(img.width == 2);
  CHECK(img.data[0] == 'a');

  write_text(dir / "p5.ppm", "P5\n2 1\n255\nab");
  CHECK_THROWS_AS(read_ppm((dir / "p5.ppm").string()), ParseError);
  write_text(dir / "short.ppm", "P6\n4 4\n255\nab");
  CHECK_THROWS_AS(read_ppm((dir / "short.ppm").string()), ParseError);
  write_text(dir / "max.ppm", "P6\n1 1\n65535\nabcdef");
  CHECK_THROWS_AS(read_ppm((dir / "max.ppm").string()), ParseError);
  CHECK_THROWS_AS(read_ppm((dir / "missing.ppm").string()), IoError);
}

TEST_CASE("crop_and_resize identity on full-frame bbox") {
  Image img = gradient_image(8, 8);
  BBox full{0, 0, 8, 8};
  Image out = crop_and_resize(img, full, 8);
  CHECK(out.data == img.data);
  Image out2 = crop_and_resize(img, std::nullopt, 8);
  CHECK(out2.data == img.data);
}

TEST_CASE("bilinear upscale 2x2 -> 4x4 hand oracle") {
  Image img(2, 2);
  // single channel pattern replicated across RGB: 0 90 / 30 120
  std::array<int, 4> v = {0, 90, 30, 120};
  for (int y = 0; y < 2; ++y)
    for (int x = 0; x < 2; ++x)
      for (int c = 0; c < 3; ++c) img.at(x, y, c) = static_cast<std::uint8_t>(v[static_cast<std::size_t>(y * 2 + x)]);
  Image out = crop_and_resize(img, std::nullopt, 4);
  // corners preserved
  CHECK(out.at(0, 0, 0) == 0);
  CHECK(out.at(3, 0, 0) == 90);
  CHECK(out.at(0, 3, 0) == 30);
  CHECK(out.at(3, 3, 0) == 120);
  // interior: sample (1,1) maps to source (1/3, 1/3):
  // rows blend to 30 and 60, then (2/3)*30 + (1/3)*60 = 40
  CHECK(out.at(1, 1, 0) == 40);
}

TEST_CASE("constant image stays constant under any resize") {
  Image img(5, 7);
  std::fill(img.data.begin(), img.data.end(), 101);
  for (int s : {1, 3, 5, 16}) {
    Image out = crop_and_resize(img, std::nullopt, s);
    for (auto px : out.data) CHECK(px == 101);
  }
}

TEST_CASE("bbox out of bounds raises") {
  Image img = gradient_image(8, 8);
  CHECK_THROWS_AS(crop_and_resize(img, BBox{0, 0, 9, 8}, 4), GeometryError);
  CHECK_THROWS_AS(crop_and_resize(img, BBox{-1, 0, 4, 4}, 4), GeometryError);
  CHECK_THROWS_AS(crop_and_resize(img, BBox{2, 2, 0, 4}, 4), GeometryError);
  CHECK_THROWS_AS(crop_and_resize(img, BBox{6, 6, 4, 4}, 4), GeometryError);
}

TEST_CASE("hflip is an involution") {
  Image img = gradient_image(10, 6);
  AugmentPolicy p;
  p.kind = AugmentPolicy::HFLIP;
  Image once = augment(img, p, 1, 2);
  Image twice = augment(once, p, 1, 2);
  CHECK(twice.data == img.data);
  CHECK(once.data != img.data);
}

TEST_CASE("zero-strength color jitter is the identity") {
  Image img = gradient_image(9, 9);
  AugmentPolicy p;
  p.kind = AugmentPolicy::COLOR_JITTER;
  p.brightness = p.contrast = p.saturation = 0.0;
  Image out = augment(img, p, 5, 0);
  CHECK(out.data == img.data);
}

TEST_CASE("random crop geometry and key determinism") {
  Image img = gradient_image(100, 100);
  AugmentPolicy p;
  p.kind = AugmentPolicy::RANDOM_CROP;
  p.crop_ratio = 0.9;
  Image a = augment(img, p, 7, 42);
  CHECK(a.width == 90);
  CHECK(a.height == 90);
  Image b = augment(img, p, 7, 42);
  CHECK(a.data == b.data);
  Image c = augment(img, p, 7, 43);
  CHECK(a.data != c.data);  // different key, different offset (overwhelmingly)
}

TEST_CASE("compositions produce the expected dimensions and stay in range") {
  Image img = gradient_image(40, 40);
  for (auto kind : {AugmentPolicy::COLOR_JITTER, AugmentPolicy::RANDOM_CROP, AugmentPolicy::HFLIP,
                    AugmentPolicy::JITTER_THEN_CROP, AugmentPolicy::CROP_THEN_FLIP}) {
    AugmentPolicy p;
    p.kind = kind;
    Image out = augment(img, p, 11, 3);
    bool cropped = kind == AugmentPolicy::RANDOM_CROP || kind == AugmentPolicy::JITTER_THEN_CROP ||
                   kind == AugmentPolicy::CROP_THEN_FLIP;
    CHECK(out.width == (cropped ? 36 : 40));
    CHECK(out.height == (cropped ? 36 : 40));
    CHECK(out.data.size() == static_cast<std::size_t>(3) * out.width * out.height);
  }
}

TEST_CASE("augment policy validation") {
  Image img = gradient_image(4, 4);
  AugmentPolicy p;
  p.brightness = 1.0;
  CHECK_THROWS_AS(augment(img, p, 0, 0), ConfigError);
  p.brightness = 0.2;
  p.crop_ratio = 0.0;
  CHECK_THROWS_AS(augment(img, p, 0, 0), ConfigError);
}

TEST_CASE("manifest parses the documented row forms") {
  auto dir = temp_dir("manifest");
  write_text(dir / "m.csv",
             "path,source,expr,valence,arousal,bbox\n"
             "img/a.png,AFFWILD2,4,0.5,-0.25,\n"
             "img/b.png,AIHUB,3,,,\n"
             "img/c.png,AFFECTNET,,0.1,0.2,10;20;30;40\n");
  auto recs = load_manifest((dir / "m.csv").string());
  REQUIRE(recs.size() == 3);
  CHECK(recs[0].expr == 4);
  CHECK(recs[0].valence == doctest::Approx(0.5));
  CHECK(recs[0].arousal == doctest::Approx(-0.25));
  CHECK(recs[0].source == Source::AFFWILD2);
  CHECK_FALSE(recs[0].bbox.has_value());
  CHECK(recs[1].expr == 3);
  CHECK_FALSE(recs[1].has_va());
  CHECK_FALSE(recs[2].expr.has_value());
  REQUIRE(recs[2].bbox.has_value());
  CHECK(recs[2].bbox->x == 10);
  CHECK(recs[2].bbox->h == 40);
}

TEST_CASE("manifest errors carry line numbers") {
  auto dir = temp_dir("manifest_err");
  write_text(dir / "odd.csv",
             "path,source,expr,valence,arousal,bbox\n"
             "ok.png,SYNTH,1,,,\n"
             "bad.png,SYNTH,1,0.5,,\n");  // valence without arousal
  try {
    load_manifest((dir / "odd.csv").string());
    FAIL("expected ValidationError");
  } catch (const ValidationError& e) {
    CHECK(std::string(e.what()).find(":3:") != std::string::npos);
  }

  write_text(dir / "fields.csv", "path,source,expr,valence,arousal,bbox\na,b,c\n");
  CHECK_THROWS_AS(load_manifest((dir / "fields.csv").string()), ParseError);
  write_text(dir / "expr9.csv", "path,source,expr,valence,arousal,bbox\na.png,SYNTH,9,,,\n");
  CHECK_THROWS_AS(load_manifest((dir / "expr9.csv").string()), ValidationError);
  write_text(dir / "nolabel.csv", "path,source,expr,valence,arousal,bbox\na.png,SYNTH,,,,\n");
  CHECK_THROWS_AS(load_manifest((dir / "nolabel.csv").string()), ValidationError);
  write_text(dir / "src.csv", "path,source,expr,valence,arousal,bbox\na.png,NOPE,1,,,\n");
  CHECK_THROWS_AS(load_manifest((dir / "src.csv").string()), ValidationError);
  write_text(dir / "hdr.csv", "path,expr\n");
  CHECK_THROWS_AS(load_manifest((dir / "hdr.csv").string()), ParseError);
  write_text(dir / "range.csv", "path,source,expr,valence,arousal,bbox\na.png,SYNTH,,1.5,0,\n");
  CHECK_THROWS_AS(load_manifest((dir / "range.csv").string()), ValidationError);
}

TEST_CASE("manifest writer round-trips") {
  auto dir = temp_dir("manifest_rt");
  std::vector<AnnotationRecord> recs(2);
  recs[0].path = "x.ppm";
  recs[0].source = Source::SYNTH;
  recs[0].expr = 7;
  recs[1].path = "y.ppm";
  recs[1].source = Source::EXPW;
  recs[1].expr = 0;
  recs[1].valence = 0.25;
  recs[1].arousal = -0.5;
  recs[1].bbox = BBox{1, 2, 3, 4};
  write_manifest((dir / "m.csv").string(), recs);
  auto back = load_manifest((dir / "m.csv").string());
  REQUIRE(back.size() == 2);
  CHECK(back[0].path == "x.ppm");
  CHECK(back[0].expr == 7);
  CHECK(back[1].valence == doctest::Approx(0.25));
  CHECK(back[1].bbox->w == 3);
  CHECK(back[1].source == Source::EXPW);
}

TEST_CASE("merge_sources filters by task and reports retained counts") {
  std::vector<AnnotationRecord> a(2), b(2);
  a[0].path = "a0";
  a[0].expr = 1;
  a[1].path = "a1";
  a[1].valence = 0.1;
  a[1].arousal = 0.2;
  b[0].path = "b0";
  b[0].expr = 2;
  b[0].valence = 0.3;
  b[0].arousal = 0.4;
  b[1].path = "b1";
  b[1].expr = 3;

  auto expr = merge_sources({a, b}, Task::EXPR);
  CHECK(expr.records.size() == 3);
  CHECK(expr.retained_per_source == std::vector<std::int64_t>{1, 2});
  auto va = merge_sources({a, b}, Task::VA);
  CHECK(va.records.size() == 2);
  CHECK(va.retained_per_source == std::vector<std::int64_t>{1, 1});

  std::vector<AnnotationRecord> va_only(1);
  va_only[0].path = "v";
  va_only[0].valence = 0.0;
  va_only[0].arousal = 0.0;
  CHECK_THROWS_AS(merge_sources({va_only}, Task::EXPR), CoverageError);
}

TEST_CASE("merge keeps duplicate paths") {
  std::vector<AnnotationRecord> a(1), b(1);
  a[0].path = b[0].path = "same.png";
  a[0].expr = b[0].expr = 1;
  auto m = merge_sources({a, b}, Task::EXPR);
  CHECK(m.records.size() == 2);
}

namespace {
std::vector<AnnotationRecord> histogram_records(const std::vector<std::int64_t>& counts) {
  std::vector<AnnotationRecord> recs;
  for (std::size_t c = 0; c < counts.size(); ++c)
    for (std::int64_t i = 0; i < counts[c]; ++i) {
      AnnotationRecord r;
      r.path = "p";
      r.expr = static_cast<int>(c);
      recs.push_back(r);
    }
  return recs;
}
}  // namespace

TEST_CASE("balanced sampler equalizes a skewed class histogram") {
  // strongly imbalanced synthetic histogram
  auto recs = histogram_records({1775, 165, 108, 90, 956, 798, 316, 1658});
  BalancedSampler s(recs, 99);
  std::array<std::int64_t, 8> hits{};
  const int draws = 100000;
  for (int i = 0; i < draws; ++i) ++hits[static_cast<std::size_t>(*recs[static_cast<std::size_t>(s.next())].expr)];
  for (int c = 0; c < 8; ++c) {
    double freq = static_cast<double>(hits[static_cast<std::size_t>(c)]) / draws;
    CHECK(freq == doctest::Approx(0.125).epsilon(0.08));  // within 1pp of 12.5%
  }
}

TEST_CASE("balanced sampler on a uniform dataset is uniform over records") {
  auto recs = histogram_records({10, 10, 10, 10, 10, 10, 10, 10});
  BalancedSampler s(recs, 3);
  std::vector<std::int64_t> hits(recs.size(), 0);
  const int draws = 80000;
  for (int i = 0; i < draws; ++i) ++hits[static_cast<std::size_t>(s.next())];
  // expected 1000 per record; 3 sigma of binomial(80000, 1/80)
  double sigma = std::sqrt(draws * (1.0 / 80) * (79.0 / 80));
  for (auto h : hits) CHECK(std::abs(static_cast<double>(h) - 1000.0) < 3.5 * sigma);
}

TEST_CASE("balanced sampler determinism and error paths") {
  auto recs = histogram_records({5, 5, 5, 5, 5, 5, 5, 5});
  BalancedSampler a(recs, 123), b(recs, 123), c(recs, 124);
  std::vector<std::int64_t> sa, sb, sc;
  for (int i = 0; i < 1000; ++i) {
    sa.push_back(a.next());
    sb.push_back(b.next());
    sc.push_back(c.next());
  }
  CHECK(sa == sb);
  CHECK(sa != sc);

  auto missing = histogram_records({5, 5, 5, 0, 5, 5, 5, 5});
  CHECK_THROWS_AS(BalancedSampler(missing, 0), CoverageError);
  std::vector<AnnotationRecord> unlabeled(1);
  unlabeled[0].path = "u";
  unlabeled[0].valence = unlabeled[0].arousal = 0.0;
  CHECK_THROWS_AS(BalancedSampler(unlabeled, 0), LabelError);
}

TEST_CASE("synth generates a validating corpus of the right size") {
  auto dir = temp_dir("synth");
  SynthSpec spec;
  spec.per_class = 5;
  spec.image_size = 16;
  spec.seed = 4;
  auto recs = synth_generate(spec, dir.string());
  CHECK(recs.size() == 40);
  auto loaded = load_manifest((dir / "manifest.csv").string());
  REQUIRE(loaded.size() == 40);
  for (const auto& r : loaded) {
    CHECK(r.expr.has_value());
    CHECK(r.has_va());
    Image img = read_ppm((dir / r.path).string());
    CHECK(img.width == 16);
    CHECK(img.height == 16);
  }
}

TEST_CASE("synth corpora are bit-identical across runs with the same seed") {
  auto d1 = temp_dir("synth_a");
  auto d2 = temp_dir("synth_b");
  auto d3 = temp_dir("synth_c");
  SynthSpec spec;
  spec.per_class = 3;
  spec.image_size = 12;
  spec.seed = 9;
  synth_generate(spec, d1.string());
  synth_generate(spec, d2.string());
  SynthSpec other = spec;
  other.seed = 10;
  synth_generate(other, d3.string());
  CHECK(read_bytes(d1 / "manifest.csv") == read_bytes(d2 / "manifest.csv"));
  CHECK(read_bytes(d1 / "SYNTH/cls0_0.ppm") == read_bytes(d2 / "SYNTH/cls0_0.ppm"));
  CHECK(read_bytes(d1 / "SYNTH/cls7_2.ppm") == read_bytes(d2 / "SYNTH/cls7_2.ppm"));
  CHECK(read_bytes(d1 / "SYNTH/cls0_0.ppm") != read_bytes(d3 / "SYNTH/cls0_0.ppm"));
}

TEST_CASE("synth classes separate under a nearest-centroid oracle") {
  auto dir = temp_dir("synth_sep");
  SynthSpec spec;
  spec.per_class = 20;
  spec.image_size = 16;
  spec.seed = 21;
  auto recs = synth_generate(spec, dir.string());
  // first 15 per class build centroids, last 5 are held out
  std::size_t dim = static_cast<std::size_t>(3) * 16 * 16;
  std::vector<std::vector<double>> centroid(8, std::vector<double>(dim, 0.0));
  std::vector<std::pair<int, std::vector<double>>> held;
  for (const auto& r : recs) {
    Image img = read_ppm((dir / r.path).string());
    std::vector<double> v(img.data.begin(), img.data.end());
    int idx_in_class = std::stoi(r.path.substr(r.path.find('_') + 1));
    if (idx_in_class < 15)
      for (std::size_t i = 0; i < dim; ++i) centroid[static_cast<std::size_t>(*r.expr)][i] += v[i] / 15.0;
    else
      held.emplace_back(*r.expr, std::move(v));
  }
  int correct = 0;
  for (const auto& [cls, v] : held) {
    int best = -1;
    double best_d = 1e300;
    for (int c = 0; c < 8; ++c) {
      double d = 0;
      for (std::size_t i = 0; i < dim; ++i) {
        double diff = v[i] - centroid[static_cast<std::size_t>(c)][i];
        d += diff * diff;
      }
      if (d < best_d) {
        best_d = d;
        best = c;
      }
    }
    correct += best == cls;
  }
  CHECK(static_cast<double>(correct) / static_cast<double>(held.size()) >= 0.6);
}

TEST_CASE("synth VA labels are smooth in phase and land in the unit square") {
  for (int cls = 0; cls < 8; ++cls)
    for (double phase : {0.0, 0.25, 0.5, 0.75, 0.999}) {
      auto [v, a] = synth_va(cls, phase);
      CHECK(v >= -1.0);
      CHECK(v <= 1.0);
      CHECK(a >= -1.0);
      CHECK(a <= 1.0);
      auto [v2, a2] = synth_va(cls, phase + 1e-6);
      CHECK(std::abs(v2 - v) < 1e-4);
      CHECK(std::abs(a2 - a) < 1e-4);
    }
  // distinct classes get distinct VA anchors
  auto [v0, a0] = synth_va(0, 0.0);
  auto [v4, a4] = synth_va(4, 0.0);
  CHECK(std::abs(v0 - v4) > 0.5);
}

TEST_CASE("synth rejects bad specs and unwritable directories") {
  SynthSpec bad;
  bad.per_class = 0;
  CHECK_THROWS_AS(synth_generate(bad, "/tmp/dan_unused"), ConfigError);
  SynthSpec ok;
  ok.per_class = 1;
  ok.image_size = 8;
  CHECK_THROWS_AS(synth_generate(ok, "/proc/nope"), IoError);
}
