#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <random>
#include <set>

#include <gtest/gtest.h>

#include "cstbir/dataset.hpp"
#include "cstbir/error.hpp"
#include "cstbir/image.hpp"
#include "cstbir/tokenizer.hpp"
#include "support/test_util.hpp"

using namespace cstbir;
using cstbir::testing::TempDir;

namespace {

// Classic integer Bresenham; returns the number of plotted pixels.
std::size_t bresenham_count(int x0, int y0, int x1, int y1) {
  std::set<std::pair<int, int>> lit;
  int dx = std::abs(x1 - x0), sx = x0 < x1 ? 1 : -1;
  int dy = -std::abs(y1 - y0), sy = y0 < y1 ? 1 : -1;
  int err = dx + dy;
  while (true) {
    lit.insert({x0, y0});
    if (x0 == x1 && y0 == y1) break;
    const int e2 = 2 * err;
    if (e2 >= dy) { err += dy; x0 += sx; }
    if (e2 <= dx) { err += dx; y0 += sy; }
  }
  return lit.size();
}

std::size_t count_above(const GrayImage& img, float threshold) {
  return static_cast<std::size_t>(
      std::count_if(img.pixels.begin(), img.pixels.end(), [&](float v) { return v > threshold; }));
}

// Connected components of pixels > 0 (8-neighbourhood).
int components(const GrayImage& img) {
  std::vector<int> seen(img.pixels.size(), 0);
  int count = 0;
  for (int y = 0; y < img.height; ++y) {
    for (int x = 0; x < img.width; ++x) {
      if (img.at(y, x) <= 0 || seen[y * img.width + x]) continue;
      ++count;
      std::vector<std::pair<int, int>> stack{{y, x}};
      seen[y * img.width + x] = 1;
      while (!stack.empty()) {
        auto [cy, cx] = stack.back();
        stack.pop_back();
        for (int oy = -1; oy <= 1; ++oy) {
          for (int ox = -1; ox <= 1; ++ox) {
            const int ny = cy + oy, nx = cx + ox;
            if (ny < 0 || nx < 0 || ny >= img.height || nx >= img.width) continue;
            if (img.at(ny, nx) <= 0 || seen[ny * img.width + nx]) continue;
            seen[ny * img.width + nx] = 1;
            stack.push_back({ny, nx});
          }
        }
      }
    }
  }
  return count;
}

Annotation annotation(const std::string& image, const std::string& text, const std::string& object,
                      BoundingBox box = {0.1, 0.1, 0.5, 0.5}) {
  return {image, text, object, box, 100, 100, ""};
}

}  // namespace

// ---- rasterization ---------------------------------------------------------------

TEST(Rasterize, DiagonalStrokeMatchesLineOracle) {
  const auto r = rasterize_strokes({{{0, 0}, {100, 100}}}, 224);
  EXPECT_EQ(r.pixels.height, 224);
  EXPECT_EQ(r.source, SketchSource::stroke_rasterized);
  const float peak = *std::max_element(r.pixels.pixels.begin(), r.pixels.pixels.end());
  EXPECT_NEAR(peak, 1.0f, 1e-6);
  EXPECT_GT(count_above(r.pixels, 0.0f), 200u);

  // Endpoints after the 5% margin fit of a 223-pixel span.
  const double margin = 0.05 * 223;
  const int a = static_cast<int>(std::lround(margin)), b = static_cast<int>(std::lround(223 - margin));
  const double oracle = static_cast<double>(bresenham_count(a, a, b, b));
  const double strong = static_cast<double>(count_above(r.pixels, 0.5f));
  EXPECT_NEAR(strong, oracle, 0.2 * oracle);
}

TEST(Rasterize, IntensitiesStayInUnitRange) {
  std::mt19937 rng(3);
  std::uniform_real_distribution<double> u(-50, 50);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<Polyline> strokes(3);
    for (auto& s : strokes) {
      for (int i = 0; i < 6; ++i) s.push_back({u(rng), u(rng)});
    }
    const auto r = rasterize_strokes(strokes, 64);
    for (float v : r.pixels.pixels) {
      ASSERT_GE(v, 0.0f);
      ASSERT_LE(v, 1.0f);
    }
    EXPECT_GT(count_above(r.pixels, 0.0f), 0u);
  }
}

TEST(Rasterize, DegenerateSegmentLightsOneNeighbourhood) {
  const auto r = rasterize_strokes({{{5, 5}, {5, 5}}}, 64);
  EXPECT_EQ(components(r.pixels), 1);
  EXPECT_LE(count_above(r.pixels, 0.0f), 4u);
}

TEST(Rasterize, HalfResolutionMatchesDownsampledFullResolution) {
  const std::vector<Polyline> strokes = {{{0, 0}, {40, 90}, {100, 20}}, {{10, 80}, {90, 80}}};
  const auto full = rasterize_strokes(strokes, 224);
  const auto half = rasterize_strokes(strokes, 112);
  const auto down = resize(full.pixels, 112, 112);
  double diff = 0;
  for (std::size_t i = 0; i < down.pixels.size(); ++i) diff += std::abs(down.pixels[i] - half.pixels.pixels[i]);
  EXPECT_LT(diff / static_cast<double>(down.pixels.size()), 0.15);
}

TEST(Rasterize, Errors) {
  EXPECT_THROW(rasterize_strokes({}, 224), Error);
  try {
    rasterize_strokes({}, 224);
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::invalid_sketch);
  }
  EXPECT_THROW(rasterize_strokes({{{0, 0}, {1, 1}}}, 16), Error);
  EXPECT_THROW(rasterize_strokes({{{0, 0}}}, 64), Error);
}

TEST(Rasterize, ParsesQuickDrawRecords) {
  const auto rec = parse_stroke_record(
      R"({"word":"cat","key_id":"123","drawing":[[[0,10,20],[0,5,0]],[[3,4],[7,8]]]})");
  EXPECT_EQ(rec.word, "cat");
  EXPECT_EQ(rec.key_id, "123");
  ASSERT_EQ(rec.drawing.size(), 2u);
  EXPECT_EQ(rec.drawing[0].size(), 3u);
  EXPECT_DOUBLE_EQ(rec.drawing[0][1].x, 10);
  EXPECT_DOUBLE_EQ(rec.drawing[0][1].y, 5);
  EXPECT_THROW(parse_stroke_record("{\"word\":\"cat\"}"), Error);
}

// ---- images ---------------------------------------------------------------------

TEST(Image, PngRoundTripAndBase64) {
  TempDir dir;
  GrayImage g(8, 9);
  for (std::size_t i = 0; i < g.pixels.size(); ++i) g.pixels[i] = static_cast<float>(i % 256) / 255.0f;
  write_png(dir / "g.png", g);
  EXPECT_EQ(read_gray(dir / "g.png"), from_bytes(8, 9, to_bytes(g)));

  const auto encoded = base64_encode(encode_png(g));
  EXPECT_EQ(decode_gray(base64_decode(encoded)), from_bytes(8, 9, to_bytes(g)));
  EXPECT_EQ(decode_gray(base64_decode("data:image/png;base64," + encoded)), from_bytes(8, 9, to_bytes(g)));
  EXPECT_THROW(decode_gray({1, 2, 3}), Error);

  RgbImage c(5, 4);
  for (std::size_t i = 0; i < c.data.size(); ++i) c.data[i] = static_cast<std::uint8_t>(i * 7);
  write_png(dir / "c.png", c);
  EXPECT_EQ(read_rgb(dir / "c.png"), c);
  EXPECT_THROW(read_rgb(dir / "g.png"), Error);
}

TEST(Image, AreaResizeAveragesBlocks) {
  GrayImage g(4, 4);
  for (int y = 0; y < 4; ++y) {
    for (int x = 0; x < 4; ++x) g.at(y, x) = static_cast<float>(y * 4 + x) / 16.0f;
  }
  const auto r = resize(g, 2, 2);
  // Oracle: plain 2x2 block means.
  for (int y = 0; y < 2; ++y) {
    for (int x = 0; x < 2; ++x) {
      const float mean = (g.at(2 * y, 2 * x) + g.at(2 * y, 2 * x + 1) + g.at(2 * y + 1, 2 * x) +
                          g.at(2 * y + 1, 2 * x + 1)) / 4;
      EXPECT_NEAR(r.at(y, x), mean, 1e-6);
    }
  }
}

// ---- manifest building ------------------------------------------------------------

TEST(BuildManifest, PairsEachQueryWithItsCategory) {
  const std::vector<Annotation> anns = {annotation("i1", "sitting on a mat", "cat"),
                                        annotation("i2", "chasing a ball", "dog"),
                                        annotation("i3", "asleep by the door", "cat")};
  const std::map<std::string, std::vector<std::string>> pool = {{"cat", {"c1", "c2", "c3"}}, {"dog", {"d1"}}};
  const auto result = build_manifest(anns, pool, {}, 5);
  ASSERT_EQ(result.manifest.entries.size(), 3u);
  EXPECT_EQ(result.manifest.categories, (std::vector<std::string>{"cat", "dog"}));
  for (const auto& q : result.manifest.entries) {
    EXPECT_EQ(q.sketch_id.substr(0, 1), q.category.substr(0, 1));
    if (q.category == "dog") EXPECT_EQ(q.sketch_id, "d1");
  }
  EXPECT_EQ(serialize_manifest(result.manifest), serialize_manifest(build_manifest(anns, pool, {}, 5).manifest));
}

TEST(BuildManifest, DropsUnmatchedObjectsAndCountsThem) {
  const std::vector<Annotation> anns = {annotation("i1", "on the shelf", "cat"),
                                        annotation("i2", "parked outside", "car"),
                                        annotation("i3", "next to the road", "car")};
  const auto result = build_manifest(anns, {{"cat", {"c1"}}}, {}, 1);
  EXPECT_EQ(result.report.kept, 1u);
  EXPECT_EQ(result.report.dropped, 2u);
  EXPECT_EQ(result.report.dropped_by_object.at("car"), 2u);
}

TEST(BuildManifest, EmptyIntersectionIsFatal) {
  try {
    build_manifest({annotation("i1", "x y", "cat")}, {{"dog", {"d1"}}}, {}, 1);
    FAIL() << "expected an error";
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::empty_intersection);
  }
}

TEST(BuildManifest, SplitsAreDisjointAndOpenCategoriesUnseen) {
  std::vector<Annotation> anns;
  SplitSpec spec;
  for (int i = 0; i < 30; ++i) {
    const std::string id = "img" + std::to_string(i);
    anns.push_back(annotation(id, "text " + std::to_string(i), i % 3 == 0 ? "owl" : (i % 3 == 1 ? "cat" : "dog")));
    if (i % 5 == 0) spec.image_split[id] = Split::test1k;
  }
  spec.open_categories = {"owl"};
  const auto m = build_manifest(anns, {{"cat", {"c"}}, {"dog", {"d"}}, {"owl", {"o"}}}, spec, 3).manifest;
  m.validate();
  std::map<std::string, std::set<Split>> splits_of_image;
  std::set<std::string> train_categories, open_categories;
  for (const auto& q : m.entries) {
    splits_of_image[q.image_id].insert(q.split);
    if (q.split == Split::train) train_categories.insert(q.category);
    if (q.split == Split::open_category) open_categories.insert(q.category);
  }
  for (const auto& [id, splits] : splits_of_image) EXPECT_EQ(splits.size(), 1u) << id;
  for (const auto& c : open_categories) EXPECT_FALSE(train_categories.contains(c));
  EXPECT_FALSE(open_categories.empty());
}

TEST(Manifest, SerializationRoundTrip) {
  TempDir dir;
  const auto corpus = generate_synthetic(cstbir::testing::small_synthetic());
  write_manifest(dir / "m.jsonl", corpus.manifest);
  const auto back = read_manifest(dir / "m.jsonl");
  EXPECT_EQ(serialize_manifest(back), serialize_manifest(corpus.manifest));
  std::ifstream in(dir / "m.jsonl");
  std::string header;
  std::getline(in, header);
  EXPECT_NE(header.find("\"categories\""), std::string::npos);
  EXPECT_NE(header.find("\"version\":1"), std::string::npos);
}

TEST(Manifest, ValidationRejectsBrokenInvariants) {
  auto m = generate_synthetic(cstbir::testing::small_synthetic()).manifest;
  auto bad = m;
  bad.entries[0].image_id = "missing";
  EXPECT_THROW(bad.validate(), Error);
  bad = m;
  bad.categories.push_back(bad.categories[0]);
  EXPECT_THROW(bad.validate(), Error);
  bad = m;
  bad.entries[0].bbox = {0.8, 0.8, 0.5, 0.5};
  EXPECT_THROW(bad.validate(), Error);
  bad = m;
  bad.entries[0].text.clear();
  EXPECT_THROW(bad.validate(), Error);
}

// ---- stats ------------------------------------------------------------------------

TEST(Stats, SingleAndTwoQueryMeans) {
  DatasetManifest m;
  m.categories = {"dog"};
  m.images["i1"] = {"images/i1.png", 10, 10, Split::train};
  m.entries.push_back({"q1", "red dog", "s1", "dog", "i1", {0, 0, 0.5, 0.5}, Split::train});
  const auto tok = Tokenizer::train({"red dog"}, 600);
  auto s = compute_stats(m, tok);
  EXPECT_DOUBLE_EQ(s.avg_sentence_words, 2.0);
  EXPECT_DOUBLE_EQ(s.avg_area_covered_pct, 25.0);

  m.images["i2"] = {"images/i2.png", 10, 10, Split::train};
  m.entries[0].bbox = {0, 0, 0.1, 1.0};
  m.entries.push_back({"q2", "a b c d", "s2", "dog", "i2", {0, 0, 0.3, 1.0}, Split::train});
  s = compute_stats(m, tok);
  EXPECT_NEAR(s.avg_area_covered_pct, 20.0, 1e-9);
  EXPECT_DOUBLE_EQ(s.avg_sentence_words, 3.0);
  EXPECT_EQ(s.n_queries, 2u);
  EXPECT_EQ(s.n_images, 2u);
  // Pure function: repeated calls agree bit-exactly.
  const auto again = compute_stats(m, tok);
  EXPECT_EQ(std::memcmp(&s.avg_area_covered_pct, &again.avg_area_covered_pct, sizeof(double)), 0);
  EXPECT_EQ(std::memcmp(&s.avg_sentence_tokens, &again.avg_sentence_tokens, sizeof(double)), 0);
}

// ---- synthetic corpus -------------------------------------------------------------

TEST(Synthetic, DeterministicGivenSeed) {
  auto cfg = cstbir::testing::small_synthetic(4, 16);
  const auto a = generate_synthetic(cfg), b = generate_synthetic(cfg);
  EXPECT_EQ(serialize_manifest(a.manifest), serialize_manifest(b.manifest));
  EXPECT_EQ(a.images, b.images);
  for (const auto& [id, s] : a.sketches) EXPECT_EQ(s.pixels, b.sketches.at(id).pixels);
  cfg.seed = 8;
  EXPECT_NE(serialize_manifest(generate_synthetic(cfg).manifest), serialize_manifest(a.manifest));
}

TEST(Synthetic, TextsNeverNameTheirCategory) {
  auto cfg = cstbir::testing::small_synthetic(16, 200, 32);
  cfg.canvas_size = 64;
  const auto corpus = generate_synthetic(cfg);
  for (const auto& q : corpus.manifest.entries) {
    std::string lower = q.text;
    std::transform(lower.begin(), lower.end(), lower.begin(), ::tolower);
    for (const auto& name : glyph_names()) EXPECT_EQ(lower.find(name), std::string::npos) << q.text;
  }
}

TEST(Synthetic, BoxesMatchRenderedGlyphExtent) {
  auto cfg = cstbir::testing::small_synthetic(4, 20, 8);
  cfg.canvas_size = 96;
  const auto corpus = generate_synthetic(cfg);
  for (const auto& q : corpus.manifest.entries) {
    ASSERT_TRUE(q.bbox.valid());
    const auto& img = corpus.images.at(q.image_id);
    // The box edges must be tight: a 1-pixel-wider box would include only
    // pixels that do not belong to the glyph, so the recorded box spans at
    // least one pixel and stays inside the image.
    EXPECT_GE(q.bbox.w * img.width, 1.0 - 1e-9);
    EXPECT_LE(q.bbox.x + q.bbox.w, 1.0 + 1e-12);
    EXPECT_LE(q.bbox.y + q.bbox.h, 1.0 + 1e-12);
  }
}

TEST(Synthetic, InvariantsAndErrors) {
  auto cfg = cstbir::testing::small_synthetic(4, 40, 10);
  cfg.n_val = 6;
  cfg.n_open_categories = 2;
  cfg.n_open_queries = 5;
  const auto corpus = generate_synthetic(cfg);
  corpus.manifest.validate();
  for (const auto& q : corpus.manifest.entries) {
    EXPECT_EQ(corpus.sketches.at(q.sketch_id).category, q.category);
    for (float v : corpus.sketches.at(q.sketch_id).pixels.pixels) ASSERT_TRUE(v >= 0 && v <= 1);
  }
  EXPECT_EQ(corpus.manifest.filter(Split::test1k).entries.size(), 10u);
  EXPECT_EQ(corpus.manifest.gallery(Split::test1k).size(), 10u);
  EXPECT_EQ(corpus.manifest.filter(Split::open_category).entries.size(), 5u);

  cfg.n_categories = 1;
  EXPECT_THROW(generate_synthetic(cfg), Error);
  cfg.n_categories = static_cast<int>(glyph_names().size()) + 1;
  EXPECT_THROW(generate_synthetic(cfg), Error);
}

TEST(Synthetic, CorpusWritesAndReloads) {
  TempDir dir;
  const auto corpus = generate_synthetic(cstbir::testing::small_synthetic(3, 10, 4));
  write_corpus(dir.path(), corpus);
  const auto back = load_corpus(dir / "manifest.jsonl");
  EXPECT_EQ(serialize_manifest(back.manifest), serialize_manifest(corpus.manifest));
  EXPECT_EQ(back.images, corpus.images);
  for (const auto& [id, s] : corpus.sketches) {
    EXPECT_EQ(back.sketches.at(id).pixels, from_bytes(s.pixels.height, s.pixels.width, to_bytes(s.pixels)));
  }
}

// ---- batching ---------------------------------------------------------------------

TEST(Batching, CoversDistinctImages) {
  DatasetManifest m;
  m.categories = {"a", "b"};
  for (int i = 0; i < 10; ++i) {
    const std::string id = "i" + std::to_string(i);
    m.images[id] = {id + ".png", 4, 4, Split::train};
    m.entries.push_back({"q" + std::to_string(i), "t" + std::to_string(i), "s", i % 2 ? "a" : "b", id,
                         {0, 0, 0.5, 0.5}, Split::train});
  }
  std::mt19937_64 rng(1);
  const auto batch = sample_batch(m, 10, rng);
  std::set<std::string> ids;
  for (auto i : batch) ids.insert(m.entries[i].image_id);
  EXPECT_EQ(ids.size(), 10u);
  EXPECT_THROW(sample_batch(m, 11, rng), Error);
}

TEST(Batching, SharedImageAppearsAtMostOnce) {
  DatasetManifest m;
  m.categories = {"a"};
  for (int i = 0; i < 4; ++i) m.images["i" + std::to_string(i)] = {"x.png", 4, 4, Split::train};
  for (int i = 0; i < 5; ++i) {
    const std::string image = "i" + std::to_string(std::min(i, 3));
    m.entries.push_back({"q" + std::to_string(i), "t" + std::to_string(i), "s", "a", image, {0, 0, 1, 1},
                         Split::train});
  }
  std::mt19937_64 rng(4);
  for (int trial = 0; trial < 50; ++trial) {
    const auto batch = sample_batch(m, 4, rng);
    int shared = 0;
    for (auto i : batch) shared += m.entries[i].image_id == "i3";
    EXPECT_EQ(shared, 1);
  }
}

TEST(Batching, TenThousandBatchesNeverRepeatAnImage) {
  const auto m = generate_synthetic(cstbir::testing::small_synthetic(4, 60, 4)).manifest.filter(Split::train);
  std::mt19937_64 rng(9);
  for (int trial = 0; trial < 10000; ++trial) {
    const auto batch = sample_batch(m, 8, rng);
    ASSERT_EQ(batch.size(), 8u);
    std::set<std::string> images;
    std::set<std::pair<std::string, std::string>> queries;
    for (auto i : batch) {
      images.insert(m.entries[i].image_id);
      queries.insert({m.entries[i].text, m.entries[i].category});
    }
    ASSERT_EQ(images.size(), 8u);
    ASSERT_EQ(queries.size(), 8u);
  }
}

TEST(Batching, EpochPlanPartitionsWithUniqueness) {
  const auto m = generate_synthetic(cstbir::testing::small_synthetic(4, 100, 4)).manifest.filter(Split::train);
  std::mt19937_64 rng(2), rng2(2);
  const auto plan = plan_epoch(m, 16, rng);
  EXPECT_EQ(plan, plan_epoch(m, 16, rng2));
  std::set<std::size_t> used;
  for (const auto& batch : plan) {
    EXPECT_GE(batch.size(), 2u);
    EXPECT_LE(batch.size(), 16u);
    std::set<std::string> images;
    for (auto i : batch) {
      EXPECT_TRUE(used.insert(i).second) << "query used twice";
      images.insert(m.entries[i].image_id);
    }
    EXPECT_EQ(images.size(), batch.size());
  }
  EXPECT_GE(used.size(), m.entries.size() - 16);
}
