#include <algorithm>
#include <array>
#include <cmath>
#include <iomanip>
#include <numbers>
#include <numeric>
#include <optional>
#include <sstream>

#include "cstbir/dataset.hpp"
#include "cstbir/error.hpp"

namespace cstbir {
namespace {

using Polygon = std::vector<Point>;
constexpr double kPi = std::numbers::pi;

Polygon regular(int sides, double phase = -kPi / 2) {
  Polygon p;
  for (int i = 0; i < sides; ++i) {
    const double t = phase + 2 * kPi * i / sides;
    p.push_back({std::cos(t), std::sin(t)});
  }
  return p;
}

Polygon star() {
  Polygon p;
  for (int i = 0; i < 10; ++i) {
    const double t = -kPi / 2 + kPi * i / 5;
    const double r = (i % 2 == 0) ? 1.0 : 0.42;
    p.push_back({r * std::cos(t), r * std::sin(t)});
  }
  return p;
}

Polygon heart() {
  Polygon p;
  for (int i = 0; i < 32; ++i) {
    const double t = 2 * kPi * i / 32;
    const double x = 16 * std::pow(std::sin(t), 3);
    const double y = -(13 * std::cos(t) - 5 * std::cos(2 * t) - 2 * std::cos(3 * t) - std::cos(4 * t));
    p.push_back({x / 17.0, (y + 2.5) / 15.0});
  }
  return p;
}

Polygon moon() {
  // Outer arc through the left side, inner arc of an offset circle back.
  const double a0 = 40 * kPi / 180;
  const Point tip{std::cos(a0), std::sin(a0)};
  const Point inner_center{0.55, 0.0};
  const double inner_r = std::hypot(tip.x - inner_center.x, tip.y - inner_center.y);
  const double phi = std::atan2(tip.y, tip.x - inner_center.x);
  Polygon p;
  for (int i = 0; i <= 20; ++i) {
    const double t = a0 + (2 * kPi - 2 * a0) * i / 20;
    p.push_back({std::cos(t), std::sin(t)});
  }
  for (int i = 1; i < 14; ++i) {
    const double t = -phi - (2 * kPi - 2 * phi) * i / 14;
    p.push_back({inner_center.x + inner_r * std::cos(t), inner_center.y + inner_r * std::sin(t)});
  }
  return p;
}

// Centers the outline's bounding box and scales its longer side to 2.
Polygon fit_unit(Polygon p) {
  double min_x = INFINITY, min_y = INFINITY, max_x = -INFINITY, max_y = -INFINITY;
  for (const auto& q : p) {
    min_x = std::min(min_x, q.x);
    max_x = std::max(max_x, q.x);
    min_y = std::min(min_y, q.y);
    max_y = std::max(max_y, q.y);
  }
  const double scale = 2.0 / std::max(max_x - min_x, max_y - min_y);
  for (auto& q : p) {
    q.x = (q.x - (min_x + max_x) / 2) * scale;
    q.y = (q.y - (min_y + max_y) / 2) * scale;
  }
  return p;
}

struct Glyph {
  std::string name;
  Polygon outline;
};

const std::vector<Glyph>& library() {
  static const std::vector<Glyph> glyphs = [] {
    std::vector<Glyph> raw = {
      {"circle", regular(32)},
      {"square", {{-0.85, -0.85}, {0.85, -0.85}, {0.85, 0.85}, {-0.85, 0.85}}},
      {"triangle", {{0, -1}, {0.95, 0.8}, {-0.95, 0.8}}},
      {"star", star()},
      {"cross",
       {{-0.3, -1}, {0.3, -1}, {0.3, -0.3}, {1, -0.3}, {1, 0.3}, {0.3, 0.3}, {0.3, 1}, {-0.3, 1},
        {-0.3, 0.3}, {-1, 0.3}, {-1, -0.3}, {-0.3, -0.3}}},
      {"diamond", {{0, -1}, {0.7, 0}, {0, 1}, {-0.7, 0}}},
      {"hexagon", regular(6, 0)},
      {"heart", heart()},
      {"arrow", {{-1, -0.3}, {0.2, -0.3}, {0.2, -0.75}, {1, 0}, {0.2, 0.75}, {0.2, 0.3}, {-1, 0.3}}},
      {"moon", moon()},
      {"bolt",
       {{-0.3, -1}, {0.5, -1}, {0.1, -0.2}, {0.6, -0.2}, {-0.4, 1}, {-0.05, 0.1}, {-0.55, 0.1}}},
      {"trapezoid", {{-0.5, -0.7}, {0.5, -0.7}, {1, 0.7}, {-1, 0.7}}},
      {"pentagon", regular(5)},
      {"hourglass", {{-0.8, -1}, {0.8, -1}, {0.12, 0}, {0.8, 1}, {-0.8, 1}, {-0.12, 0}}},
      {"tee",
       {{-1, -1}, {1, -1}, {1, -0.5}, {0.25, -0.5}, {0.25, 1}, {-0.25, 1}, {-0.25, -0.5},
        {-1, -0.5}}},
      {"octagon", regular(8, kPi / 8)},
    };
    for (auto& g : raw) g.outline = fit_unit(std::move(g.outline));
    return raw;
  }();
  return glyphs;
}

struct Color {
  std::string name;
  std::array<int, 3> rgb;
};

const std::vector<Color>& palette() {
  static const std::vector<Color> colors = {
      {"red", {220, 40, 40}},    {"green", {40, 170, 60}},   {"blue", {40, 80, 220}},
      {"yellow", {235, 215, 40}}, {"purple", {140, 60, 190}}, {"orange", {245, 140, 30}},
      {"cyan", {40, 200, 210}},  {"pink", {240, 120, 180}},
  };
  return colors;
}

struct Placed {
  std::size_t glyph = 0;
  std::size_t color = 0;
  int row = 0, col = 0;
  bool large = false;
  double cx = 0, cy = 0;
  BoundingBox bbox;
};

class Generator {
 public:
  explicit Generator(const SyntheticConfig& config) : cfg_(config), rng_(config.seed) {}

  double uniform(double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng_); }
  std::size_t index(std::size_t n) { return std::uniform_int_distribution<std::size_t>(0, n - 1)(rng_); }
  double normal(double sigma) { return std::normal_distribution<double>(0.0, sigma)(rng_); }

  RgbImage background() {
    const int s = cfg_.canvas_size;
    RgbImage img(s, s);
    const double base = uniform(70, 130);
    const std::array<double, 3> tint = {uniform(-12, 12), uniform(-12, 12), uniform(-12, 12)};
    const double theta = uniform(0, kPi);
    const double period = uniform(8, 24) * s / 224.0;
    const double amplitude = uniform(4, 12);
    for (int y = 0; y < s; ++y) {
      for (int x = 0; x < s; ++x) {
        const double stripe =
            amplitude * std::sin(2 * kPi * (x * std::cos(theta) + y * std::sin(theta)) / period);
        const double noise = uniform(-8, 8);
        auto* p = img.px(y, x);
        for (int c = 0; c < 3; ++c) {
          p[c] = static_cast<std::uint8_t>(std::clamp(base + tint[c] + stripe + noise, 0.0, 255.0));
        }
      }
    }
    return img;
  }

  // Fills the transformed outline; returns the exact bbox of the painted mask.
  BoundingBox paint(RgbImage& img, const Polygon& outline, const Color& color, double cx, double cy,
                    double radius, double angle, double aspect) {
    Polygon poly;
    const double c = std::cos(angle), s = std::sin(angle);
    for (const auto& p : outline) {
      const double x = p.x * aspect, y = p.y / aspect;
      poly.push_back({cx + radius * (c * x - s * y), cy + radius * (s * x + c * y)});
    }
    const int size = img.width;
    int min_x = size, min_y = size, max_x = -1, max_y = -1;
    const std::array<double, 3> shade = {uniform(-15, 15), uniform(-15, 15), uniform(-15, 15)};
    for (int y = 0; y < size; ++y) {
      for (int x = 0; x < size; ++x) {
        if (!inside(poly, x + 0.5, y + 0.5)) continue;
        auto* px = img.px(y, x);
        for (int k = 0; k < 3; ++k) {
          px[k] = static_cast<std::uint8_t>(
              std::clamp(color.rgb[k] + shade[k] + uniform(-6, 6), 0.0, 255.0));
        }
        min_x = std::min(min_x, x);
        max_x = std::max(max_x, x);
        min_y = std::min(min_y, y);
        max_y = std::max(max_y, y);
      }
    }
    require(max_x >= 0, ErrorCode::invalid_argument, "synthetic: glyph rendered no pixels");
    return {static_cast<double>(min_x) / size, static_cast<double>(min_y) / size,
            static_cast<double>(max_x - min_x + 1) / size, static_cast<double>(max_y - min_y + 1) / size};
  }

  static bool inside(const Polygon& poly, double x, double y) {
    bool in = false;
    for (std::size_t i = 0, j = poly.size() - 1; i < poly.size(); j = i++) {
      const auto& a = poly[i];
      const auto& b = poly[j];
      if ((a.y > y) != (b.y > y) && x < (b.x - a.x) * (y - a.y) / (b.y - a.y) + a.x) in = !in;
    }
    return in;
  }

  // A scene with 2-4 glyphs of distinct categories and colors in distinct
  // cells of a 3x3 layout. `forced` (if set) is the first glyph's category.
  std::pair<RgbImage, std::vector<Placed>> scene(const std::vector<std::size_t>& pool,
                                                 std::optional<std::size_t> forced) {
    RgbImage img = background();
    const std::size_t count = 2 + index(3);
    std::vector<std::size_t> cells(9), colors(palette().size()), glyphs = pool;
    std::iota(cells.begin(), cells.end(), 0);
    std::iota(colors.begin(), colors.end(), 0);
    std::shuffle(cells.begin(), cells.end(), rng_);
    std::shuffle(colors.begin(), colors.end(), rng_);
    std::shuffle(glyphs.begin(), glyphs.end(), rng_);
    if (forced) {
      glyphs.erase(std::remove(glyphs.begin(), glyphs.end(), *forced), glyphs.end());
      glyphs.insert(glyphs.begin(), *forced);
    }
    const double cell = static_cast<double>(cfg_.canvas_size) / 3.0;
    std::vector<Placed> placed;
    for (std::size_t i = 0; i < std::min(count, glyphs.size()); ++i) {
      Placed p;
      p.glyph = glyphs[i];
      p.color = colors[i];
      p.row = static_cast<int>(cells[i] / 3);
      p.col = static_cast<int>(cells[i] % 3);
      p.large = index(2) == 1;
      const double radius = (p.large ? uniform(0.40, 0.47) : uniform(0.22, 0.30)) * cell;
      const double slack = cell / 2 - radius;
      p.cx = (p.col + 0.5) * cell + uniform(-slack, slack) * 0.8;
      p.cy = (p.row + 0.5) * cell + uniform(-slack, slack) * 0.8;
      p.bbox = paint(img, library()[p.glyph].outline, palette()[p.color], p.cx, p.cy, radius,
                     uniform(-0.2, 0.2), uniform(0.92, 1.08));
      placed.push_back(p);
    }
    return {std::move(img), std::move(placed)};
  }

  static std::string region(const Placed& p) {
    static const char* rows[] = {"top", "", "bottom"};
    static const char* cols[] = {"left", "", "right"};
    std::string r = rows[p.row];
    std::string c = cols[p.col];
    if (r.empty() && c.empty()) return "center";
    if (r.empty()) return c;
    if (c.empty()) return r;
    return r + " " + c;
  }

  static std::string relation(const Placed& from, const Placed& to) {
    const double dx = from.cx - to.cx, dy = from.cy - to.cy;
    if (std::abs(dx) > std::abs(dy)) return dx < 0 ? "left of" : "right of";
    return dy < 0 ? "above" : "below";
  }

  // Complementary attribute phrase; mentions colors, sizes and layout only.
  std::string describe(const std::vector<Placed>& scene, std::size_t target) {
    const auto& t = scene[target];
    const std::string color = palette()[t.color].name;
    const std::string size = t.large ? "large" : "small";
    std::size_t other = index(scene.size() - 1);
    if (other >= target) ++other;
    const auto& o = scene[other];
    const std::string rel = relation(t, o) + " the " + palette()[o.color].name + " shape";
    switch (index(5)) {
      case 0: return color + " one near the " + region(t);
      case 1: return size + " " + color + " shape";
      case 2: return color + ", " + rel;
      case 3: return size + " one near the " + region(t);
      default: return color + " and " + size + ", " + rel;
    }
  }

  SketchRaster sketch(std::size_t glyph) {
    const auto& outline = library()[glyph].outline;
    const double angle = uniform(-0.25, 0.25);
    const double aspect = uniform(0.85, 1.15);
    const double c = std::cos(angle), s = std::sin(angle);
    Polyline line;
    for (const auto& p : outline) {
      const double x = p.x * aspect + normal(0.05), y = p.y / aspect + normal(0.05);
      line.push_back({c * x - s * y, s * x + c * y});
    }
    line.push_back(line.front());
    auto raster = rasterize_strokes({line}, cfg_.canvas_size, library()[glyph].name);
    raster.source = SketchSource::synthetic;
    return raster;
  }

  std::mt19937_64& rng() { return rng_; }

 private:
  const SyntheticConfig& cfg_;
  std::mt19937_64 rng_;
};

std::string make_id(const char* prefix, std::size_t n) {
  std::ostringstream out;
  out << prefix << std::setw(6) << std::setfill('0') << n;
  return out.str();
}

}  // namespace

const std::vector<std::string>& glyph_names() {
  static const std::vector<std::string> names = [] {
    std::vector<std::string> out;
    for (const auto& g : library()) out.push_back(g.name);
    return out;
  }();
  return names;
}

const std::vector<std::string>& color_names() {
  static const std::vector<std::string> names = [] {
    std::vector<std::string> out;
    for (const auto& c : palette()) out.push_back(c.name);
    return out;
  }();
  return names;
}

Corpus generate_synthetic(const SyntheticConfig& config) {
  require(config.n_categories >= 2, ErrorCode::invalid_argument, "synthetic: n_categories must be >= 2");
  require(config.n_categories + config.n_open_categories <= static_cast<int>(library().size()),
          ErrorCode::invalid_argument,
          "synthetic: only " + std::to_string(library().size()) + " glyph categories available");
  require(config.queries_per_image >= 1 && config.queries_per_image <= 2, ErrorCode::invalid_argument,
          "synthetic: queries_per_image must be 1 or 2");
  require(config.n_train >= 0 && config.n_val >= 0 && config.n_gallery >= 0 && config.n_open_queries >= 0,
          ErrorCode::invalid_argument, "synthetic: negative split size");
  require(config.n_open_queries == 0 || config.n_open_categories > 0, ErrorCode::invalid_argument,
          "synthetic: open-category queries need open categories");
  require(config.canvas_size >= 32, ErrorCode::invalid_argument, "synthetic: canvas_size must be >= 32");

  Generator gen(config);
  Corpus corpus;
  auto& manifest = corpus.manifest;
  const auto total_categories = static_cast<std::size_t>(config.n_categories + config.n_open_categories);
  for (std::size_t i = 0; i < total_categories; ++i) manifest.categories.push_back(library()[i].name);

  std::vector<std::size_t> seen(static_cast<std::size_t>(config.n_categories));
  std::iota(seen.begin(), seen.end(), 0);

  std::size_t image_counter = 0, query_counter = 0;
  auto emit = [&](Split split, int n_queries, int per_image, bool open) {
    int remaining = n_queries;
    while (remaining > 0) {
      std::optional<std::size_t> forced;
      if (open) forced = static_cast<std::size_t>(config.n_categories) + gen.index(config.n_open_categories);
      auto [image, placed] = gen.scene(seen, forced);
      const std::string image_id = make_id("img", image_counter++);
      const int take = std::min({remaining, per_image, static_cast<int>(placed.size())});
      std::vector<std::size_t> targets(placed.size());
      std::iota(targets.begin(), targets.end(), 0);
      if (!open) std::shuffle(targets.begin(), targets.end(), gen.rng());
      for (int k = 0; k < take; ++k) {
        const auto t = targets[static_cast<std::size_t>(k)];
        const std::string sketch_id = make_id("sk", query_counter);
        CompositeQuery q;
        q.query_id = make_id("q", query_counter++);
        q.text = gen.describe(placed, t);
        q.sketch_id = sketch_id;
        q.category = library()[placed[t].glyph].name;
        q.image_id = image_id;
        q.bbox = placed[t].bbox;
        q.split = split;
        corpus.sketches.emplace(sketch_id, gen.sketch(placed[t].glyph));
        manifest.entries.push_back(std::move(q));
      }
      manifest.images[image_id] =
          ImageEntry{"images/" + image_id + ".png", config.canvas_size, config.canvas_size, split};
      corpus.images.emplace(image_id, std::move(image));
      remaining -= take;
    }
  };
  emit(Split::train, config.n_train, config.queries_per_image, false);
  emit(Split::val, config.n_val, config.queries_per_image, false);
  emit(Split::test1k, config.n_gallery, 1, false);
  emit(Split::open_category, config.n_open_queries, 1, true);
  manifest.validate();
  return corpus;
}

}  // namespace cstbir
