#include "unmask/data.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <set>
#include <stdexcept>

#include "json.hpp"
#include "unmask/png_io.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace unmask {

namespace {

constexpr double kPi = 3.14159265358979323846;

using Poly = std::vector<std::array<double, 2>>;

Poly regular_polygon(int n, double radius, double phase) {
  Poly p;
  for (int i = 0; i < n; ++i) {
    double a = phase + 2.0 * kPi * i / n;
    p.push_back({radius * std::cos(a), radius * std::sin(a)});
  }
  return p;
}

Poly star_polygon() {
  Poly p;
  for (int i = 0; i < 5; ++i) {
    double ao = kPi / 2 + 2.0 * kPi * i / 5;
    double ai = ao + kPi / 5;
    p.push_back({std::cos(ao), std::sin(ao)});
    p.push_back({0.42 * std::cos(ai), 0.42 * std::sin(ai)});
  }
  return p;
}

Poly cross_polygon() {
  const double e = 0.94, a = 0.32;
  return {{-a, e},  {a, e},  {a, a},  {e, a},  {e, -a},  {a, -a},
          {a, -e}, {-a, -e}, {-a, -a}, {-e, -a}, {-e, a}, {-a, a}};
}

bool in_poly(const Poly& v, double x, double y) {
  bool in = false;
  for (size_t i = 0, j = v.size() - 1; i < v.size(); j = i++) {
    if ((v[i][1] > y) != (v[j][1] > y)) {
      double xint = v[j][0] + (y - v[j][1]) / (v[i][1] - v[j][1]) * (v[i][0] - v[j][0]);
      if (x < xint) in = !in;
    }
  }
  return in;
}

const std::vector<Poly>& glyph_polygons() {
  static const std::vector<Poly> polys = [] {
    std::vector<Poly> p(8);
    p[1] = {{-0.70, -0.70}, {0.70, -0.70}, {0.70, 0.70}, {-0.70, 0.70}};  // square
    p[2] = regular_polygon(3, 1.0, kPi / 2);                               // triangle
    p[3] = star_polygon();                                                 // star
    p[5] = cross_polygon();                                                // cross
    p[6] = {{0.0, 1.0}, {0.55, 0.0}, {0.0, -1.0}, {-0.55, 0.0}};           // diamond
    p[7] = regular_polygon(6, 0.95, 0.0);                                  // hexagon
    return p;
  }();
  return polys;
}

// unit-space silhouette test; glyph bounding radius is 1
bool glyph_inside(int family, double x, double y) {
  const double r2 = x * x + y * y;
  if (family == 0) return r2 <= 1.0;                        // disc
  if (family == 4) return r2 <= 1.0 && r2 >= 0.55 * 0.55;   // ring
  return in_poly(glyph_polygons()[static_cast<size_t>(family)], x, y);
}

struct GlyphInstance {
  int cls = 0;
  double cx = 0, cy = 0, radius = 0, theta = 0;
  std::array<float, 3> color{};
};

GlyphInstance draw_instance(Rng& rng, const SceneSpec& spec) {
  GlyphInstance g;
  g.cls = static_cast<int>(rng.uniform_int(0, spec.num_classes - 1));
  const double s = rng.uniform(spec.min_scale, spec.max_scale);
  g.radius = s * spec.image_size / 2.0;
  g.cx = rng.uniform(g.radius, spec.image_size - g.radius);
  g.cy = rng.uniform(g.radius, spec.image_size - g.radius);
  g.theta = rng.uniform(0.0, 2.0 * kPi);
  for (int c = 0; c < 3; ++c) g.color[static_cast<size_t>(c)] = static_cast<float>(rng.uniform(0.15, 0.95));
  return g;
}

void rasterize_instance(const GlyphInstance& g, int size, int16_t owner_id,
                        std::vector<int16_t>& owner) {
  const double ct = std::cos(g.theta), st = std::sin(g.theta);
  const int x0 = std::max(0, static_cast<int>(std::floor(g.cx - g.radius - 1)));
  const int x1 = std::min(size - 1, static_cast<int>(std::ceil(g.cx + g.radius + 1)));
  const int y0 = std::max(0, static_cast<int>(std::floor(g.cy - g.radius - 1)));
  const int y1 = std::min(size - 1, static_cast<int>(std::ceil(g.cy + g.radius + 1)));
  for (int y = y0; y <= y1; ++y)
    for (int x = x0; x <= x1; ++x) {
      const double dx = (x + 0.5) - g.cx;
      const double dy = (y + 0.5) - g.cy;
      const double u = (ct * dx + st * dy) / g.radius;
      const double v = (-st * dx + ct * dy) / g.radius;
      if (glyph_inside(g.cls, u, v)) owner[static_cast<size_t>(y * size + x)] = owner_id;
    }
}

struct BackgroundPaint {
  BackgroundKind kind;
  std::array<float, 3> a{}, b{};
  bool horizontal = false;
  std::vector<float> noise;  // per-pixel luma offset for NoiseTexture
};

BackgroundPaint draw_background(Rng& rng, const SceneSpec& spec) {
  BackgroundPaint bg;
  bg.kind = spec.background;
  for (int c = 0; c < 3; ++c) bg.a[static_cast<size_t>(c)] = static_cast<float>(rng.uniform(0.1, 0.9));
  if (bg.kind == BackgroundKind::Gradient) {
    for (int c = 0; c < 3; ++c) bg.b[static_cast<size_t>(c)] = static_cast<float>(rng.uniform(0.1, 0.9));
    bg.horizontal = rng.bernoulli(0.5);
  } else if (bg.kind == BackgroundKind::NoiseTexture) {
    const int n = spec.image_size * spec.image_size;
    bg.noise.resize(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) bg.noise[static_cast<size_t>(i)] = static_cast<float>(rng.uniform(-0.08, 0.08));
  }
  return bg;
}

float background_value(const BackgroundPaint& bg, int size, int c, int y, int x) {
  switch (bg.kind) {
    case BackgroundKind::Flat:
      return bg.a[static_cast<size_t>(c)];
    case BackgroundKind::Gradient: {
      const double t = bg.horizontal ? static_cast<double>(x) / std::max(1, size - 1)
                                     : static_cast<double>(y) / std::max(1, size - 1);
      return static_cast<float>((1.0 - t) * bg.a[static_cast<size_t>(c)] + t * bg.b[static_cast<size_t>(c)]);
    }
    case BackgroundKind::NoiseTexture:
      return std::min(1.0f, std::max(0.0f, bg.a[static_cast<size_t>(c)] +
                                               bg.noise[static_cast<size_t>(y * size + x)]));
  }
  return 0.0f;
}

float quantize255(float v) {
  v = std::min(1.0f, std::max(0.0f, v));
  return static_cast<float>(std::lround(v * 255.0f)) / 255.0f;
}

// deterministic child stream without consuming the parent
Rng derived_rng(uint64_t base, uint64_t tag) {
  return Rng(base ^ (tag * 0x9E3779B97F4A7C15ull + 0xD1B54A32D192ED03ull));
}

void validate_scene_spec(const SceneSpec& spec) {
  if (spec.image_size < 8) throw std::invalid_argument("scene: image_size must be >= 8");
  if (spec.num_classes < 2 ||
      spec.num_classes > static_cast<int>(glyph_family_names().size()))
    throw std::invalid_argument("scene: num_classes " + std::to_string(spec.num_classes) +
                                " outside [2," + std::to_string(glyph_family_names().size()) +
                                "] (available glyph families)");
  if (spec.min_objects < 1 || spec.max_objects < spec.min_objects)
    throw std::invalid_argument("scene: bad objects_per_image range");
  if (!(spec.min_scale > 0.0 && spec.max_scale <= 1.0 && spec.min_scale <= spec.max_scale))
    throw std::invalid_argument("scene: object_scale range must lie in (0,1]");
}

std::vector<double> bilin_positions(int64_t n_out, int64_t n_in) {
  std::vector<double> src(static_cast<size_t>(n_out));
  const double scale = static_cast<double>(n_in) / static_cast<double>(n_out);
  for (int64_t d = 0; d < n_out; ++d) src[static_cast<size_t>(d)] = (d + 0.5) * scale - 0.5;
  return src;
}

}  // anonymous namespace

const std::vector<std::string>& glyph_family_names() {
  static const std::vector<std::string> names = {"disc", "square", "triangle", "star",
                                                 "ring", "cross",  "diamond",  "hexagon"};
  return names;
}

ClassTable shapes_class_table(int k) {
  const auto& names = glyph_family_names();
  if (k < 2 || k > static_cast<int>(names.size()))
    throw std::invalid_argument("class count " + std::to_string(k) + " outside [2," +
                                std::to_string(names.size()) + "]");
  ClassTable t;
  t.names.assign(names.begin(), names.begin() + k);
  return t;
}

LabeledSample generate_scene(Rng& rng, const SceneSpec& spec) {
  validate_scene_spec(spec);
  const int S = spec.image_size;
  const int64_t n_px = static_cast<int64_t>(S) * S;

  for (int attempt = 0; attempt < 100; ++attempt) {
    BackgroundPaint bg = draw_background(rng, spec);
    const int n_obj = static_cast<int>(rng.uniform_int(spec.min_objects, spec.max_objects));
    std::vector<GlyphInstance> objs;
    for (int i = 0; i < n_obj; ++i) objs.push_back(draw_instance(rng, spec));

    std::vector<int16_t> owner(static_cast<size_t>(n_px), -1);
    std::vector<int64_t> full_area(objs.size(), 0);
    for (size_t i = 0; i < objs.size(); ++i) {
      std::vector<int16_t> alone(static_cast<size_t>(n_px), -1);
      rasterize_instance(objs[i], S, 0, alone);
      for (int64_t p = 0; p < n_px; ++p)
        if (alone[static_cast<size_t>(p)] == 0) ++full_area[i];
      rasterize_instance(objs[i], S, static_cast<int16_t>(i), owner);
    }

    std::vector<int64_t> visible(objs.size(), 0);
    std::vector<int64_t> class_area(static_cast<size_t>(spec.num_classes), 0);
    for (int64_t p = 0; p < n_px; ++p) {
      const int16_t o = owner[static_cast<size_t>(p)];
      if (o < 0) continue;
      ++visible[static_cast<size_t>(o)];
      ++class_area[static_cast<size_t>(objs[static_cast<size_t>(o)].cls)];
    }

    bool ok = true;
    for (size_t i = 0; i < objs.size() && ok; ++i)
      if (visible[i] < std::max<int64_t>(16, full_area[i] / 4)) ok = false;
    for (int c = 0; c < spec.num_classes && ok; ++c)
      if (static_cast<double>(class_area[static_cast<size_t>(c)]) >
          spec.max_class_area * static_cast<double>(n_px))
        ok = false;
    if (!ok) continue;

    TensorF chw({3, S, S});
    for (int c = 0; c < 3; ++c)
      for (int y = 0; y < S; ++y)
        for (int x = 0; x < S; ++x) {
          const int16_t o = owner[static_cast<size_t>(y * S + x)];
          const float v = o < 0 ? background_value(bg, S, c, y, x)
                                : objs[static_cast<size_t>(o)].color[static_cast<size_t>(c)];
          chw.at(c, y, x) = quantize255(v);
        }

    LabeledSample sample;
    sample.image = Image{std::move(chw), ValueRange::Display01};
    std::set<int> present;
    for (int64_t p = 0; p < n_px; ++p)
      if (owner[static_cast<size_t>(p)] >= 0)
        present.insert(objs[static_cast<size_t>(owner[static_cast<size_t>(p)])].cls);
    for (int c : present) {
      TensorD mh({S, S});
      for (int64_t p = 0; p < n_px; ++p) {
        const int16_t o = owner[static_cast<size_t>(p)];
        mh[p] = (o >= 0 && objs[static_cast<size_t>(o)].cls == c) ? 1.0 : 0.0;
      }
      sample.gt_masks.emplace(c, Mask{std::move(mh), MaskKind::Binary});
      sample.labels.push_back(c);
    }
    return sample;
  }
  throw std::runtime_error("scene generation failed 100 attempts; loosen SceneSpec constraints");
}

std::vector<LabeledSample> generate_corpus(Rng& rng, const SceneSpec& spec, int count,
                                           const std::string& id_prefix) {
  const uint64_t base = rng.next_u64();
  std::vector<LabeledSample> out;
  out.reserve(static_cast<size_t>(count));
  for (int i = 0; i < count; ++i) {
    Rng child = derived_rng(base, static_cast<uint64_t>(i));
    LabeledSample s = generate_scene(child, spec);
    char buf[32];
    std::snprintf(buf, sizeof buf, "%s%06d", id_prefix.c_str(), i);
    s.id = buf;
    out.push_back(std::move(s));
  }
  return out;
}

Mask rasterize_glyph_mask(Rng& rng, const SceneSpec& spec, int class_index) {
  validate_scene_spec(spec);
  if (class_index < 0 || class_index >= spec.num_classes)
    throw std::invalid_argument("glyph class index out of range");
  const int S = spec.image_size;
  GlyphInstance g = draw_instance(rng, spec);
  g.cls = class_index;
  std::vector<int16_t> owner(static_cast<size_t>(S) * S, -1);
  rasterize_instance(g, S, 0, owner);
  TensorD hw({S, S});
  for (int64_t p = 0; p < hw.numel(); ++p) hw[p] = owner[static_cast<size_t>(p)] == 0 ? 1.0 : 0.0;
  return Mask{std::move(hw), MaskKind::Binary};
}

bool filter_oversized(const LabeledSample& sample, double max_frac) {
  for (int label : sample.labels)
    if (!sample.gt_masks.count(label))
      throw std::invalid_argument("filter_oversized: sample " + sample.id +
                                  " lacks a ground-truth mask for class " +
                                  std::to_string(label));
  for (const auto& [cls, mask] : sample.gt_masks)
    if (masked_area_fraction(mask) > max_frac) return false;
  return true;
}

Image resize_bilinear(const Image& img, int64_t out_h, int64_t out_w) {
  const int64_t c = img.channels(), h = img.height(), w = img.width();
  if (out_h == h && out_w == w) return Image{img.chw.clone(), img.range};
  auto ys = bilin_positions(out_h, h);
  auto xs = bilin_positions(out_w, w);
  TensorF out({c, out_h, out_w});
  for (int64_t ch = 0; ch < c; ++ch) {
    const float* src = img.chw.data() + ch * h * w;
    float* dst = out.data() + ch * out_h * out_w;
    for (int64_t y = 0; y < out_h; ++y) {
      const double sy = ys[static_cast<size_t>(y)];
      int64_t y0 = static_cast<int64_t>(std::floor(sy));
      const double wy = sy - y0;
      int64_t y1 = y0 + 1;
      y0 = std::min(h - 1, std::max<int64_t>(0, y0));
      y1 = std::min(h - 1, std::max<int64_t>(0, y1));
      for (int64_t x = 0; x < out_w; ++x) {
        const double sx = xs[static_cast<size_t>(x)];
        int64_t x0 = static_cast<int64_t>(std::floor(sx));
        const double wx = sx - x0;
        int64_t x1 = x0 + 1;
        x0 = std::min(w - 1, std::max<int64_t>(0, x0));
        x1 = std::min(w - 1, std::max<int64_t>(0, x1));
        const double top = (1 - wx) * src[y0 * w + x0] + wx * src[y0 * w + x1];
        const double bot = (1 - wx) * src[y1 * w + x0] + wx * src[y1 * w + x1];
        dst[y * out_w + x] = static_cast<float>((1 - wy) * top + wy * bot);
      }
    }
  }
  return Image{std::move(out), img.range};
}

Image center_crop(const Image& img, int64_t size) {
  const int64_t c = img.channels(), h = img.height(), w = img.width();
  if (h < size || w < size)
    throw std::invalid_argument("center_crop: image " + shape_str(img.chw.shape()) +
                                " smaller than crop " + std::to_string(size));
  const int64_t y0 = (h - size) / 2, x0 = (w - size) / 2;
  TensorF out({c, size, size});
  for (int64_t ch = 0; ch < c; ++ch)
    for (int64_t y = 0; y < size; ++y)
      for (int64_t x = 0; x < size; ++x)
        out.at(ch, y, x) = img.chw.at(ch, y0 + y, x0 + x);
  return Image{std::move(out), img.range};
}

Image hflip(const Image& img) {
  const int64_t c = img.channels(), h = img.height(), w = img.width();
  TensorF out({c, h, w});
  for (int64_t ch = 0; ch < c; ++ch)
    for (int64_t y = 0; y < h; ++y)
      for (int64_t x = 0; x < w; ++x) out.at(ch, y, x) = img.chw.at(ch, y, w - 1 - x);
  return Image{std::move(out), img.range};
}

Mask hflip_mask(const Mask& m) {
  const int64_t h = m.height(), w = m.width();
  TensorD out({h, w});
  for (int64_t y = 0; y < h; ++y)
    for (int64_t x = 0; x < w; ++x) out[y * w + x] = m.hw[y * w + (w - 1 - x)];
  return Mask{std::move(out), m.kind};
}

Mask resize_mask(const Mask& m, int64_t size) {
  const int64_t h = m.height(), w = m.width();
  if (h == size && w == size && m.kind == MaskKind::Binary)
    return Mask{m.hw.clone(), MaskKind::Binary};
  TensorF as_img({1, h, w});
  for (int64_t i = 0; i < m.hw.numel(); ++i) as_img[i] = static_cast<float>(m.hw[i]);
  Image wrapped{std::move(as_img), ValueRange::Display01};
  int64_t nh = size, nw = size;
  if (h <= w)
    nw = std::llround(static_cast<double>(w) * size / static_cast<double>(h));
  else
    nh = std::llround(static_cast<double>(h) * size / static_cast<double>(w));
  Image resized = center_crop(resize_bilinear(wrapped, nh, nw), size);
  TensorD out({size, size});
  for (int64_t i = 0; i < out.numel(); ++i) out[i] = resized.chw[i] >= 0.5f ? 1.0 : 0.0;
  return Mask{std::move(out), MaskKind::Binary};
}

Image preprocess(const Image& raw, int size, bool train_mode, Rng& rng, const NormStats& stats) {
  const int64_t h = raw.height(), w = raw.width();
  if (h < 1 || w < 1) throw std::invalid_argument("preprocess: empty image");
  int64_t nh = size, nw = size;
  if (h <= w)
    nw = std::llround(static_cast<double>(w) * size / static_cast<double>(h));
  else
    nh = std::llround(static_cast<double>(h) * size / static_cast<double>(w));
  Image img = (nh == h && nw == w) ? Image{raw.chw, raw.range} : resize_bilinear(raw, nh, nw);
  img = center_crop(img, size);
  if (train_mode && rng.bernoulli(0.5)) img = hflip(img);
  return normalize(img, stats);
}

Mask rasterize_rotated_rect(int size, double cx, double cy, double w, double h, double theta) {
  if (w <= 0 || h <= 0) throw std::invalid_argument("rasterize_rotated_rect: nonpositive size");
  const double ct = std::cos(theta), st = std::sin(theta);
  TensorD out({size, size});
  for (int y = 0; y < size; ++y)
    for (int x = 0; x < size; ++x) {
      const double dx = (x + 0.5) - cx;
      const double dy = (y + 0.5) - cy;
      const double u = ct * dx + st * dy;
      const double v = -st * dx + ct * dy;
      out[static_cast<int64_t>(y) * size + x] =
          (std::abs(u) <= w / 2 && std::abs(v) <= h / 2) ? 1.0 : 0.0;
    }
  return Mask{std::move(out), MaskKind::Binary};
}

Mask sample_box_prior(Rng& rng, const PriorSpec& prior, int size) {
  if (prior.kind != PriorSpec::Kind::Boxes)
    throw std::invalid_argument("sample_box_prior: prior kind is not boxes");
  if (!(prior.box_area_min > 0 && prior.box_area_min <= prior.box_area_max &&
        prior.box_area_max <= 1.0))
    throw std::invalid_argument("sample_box_prior: infeasible area range");
  if (!(prior.box_aspect_min > 0 && prior.box_aspect_min <= prior.box_aspect_max))
    throw std::invalid_argument("sample_box_prior: infeasible aspect range");
  if (prior.box_rot_min_deg > prior.box_rot_max_deg)
    throw std::invalid_argument("sample_box_prior: infeasible rotation range");
  const double area = rng.uniform(prior.box_area_min, prior.box_area_max);
  const double aspect = rng.uniform(prior.box_aspect_min, prior.box_aspect_max);
  const double rot = rng.uniform(prior.box_rot_min_deg, prior.box_rot_max_deg) * kPi / 180.0;
  const double cx = rng.uniform(0.0, static_cast<double>(size));
  const double cy = rng.uniform(0.0, static_cast<double>(size));
  const double w = size * std::sqrt(area * aspect);
  const double h = size * std::sqrt(area / aspect);
  return rasterize_rotated_rect(size, cx, cy, w, h, rot);
}

PoolPrior::PoolPrior(const std::string& pool_dir, const ClassTable& classes, int per_class_limit)
    : classes_(classes) {
  masks_.resize(static_cast<size_t>(classes.k()));
  for (int c = 0; c < classes.k(); ++c) {
    const fs::path dir = fs::path(pool_dir) / classes.names[static_cast<size_t>(c)];
    std::vector<std::string> files;
    if (fs::is_directory(dir))
      for (const auto& e : fs::directory_iterator(dir))
        if (e.is_regular_file() && e.path().extension() == ".png")
          files.push_back(e.path().string());
    std::sort(files.begin(), files.end());
    if (per_class_limit > 0 && static_cast<int>(files.size()) > per_class_limit)
      files.resize(static_cast<size_t>(per_class_limit));
    if (files.empty())
      throw std::runtime_error("empty mask pool for class '" +
                               classes.names[static_cast<size_t>(c)] + "' under " + dir.string());
    for (const auto& f : files) masks_[static_cast<size_t>(c)].push_back(read_mask_png(f));
  }
}

int PoolPrior::pool_size(int class_index) const {
  return static_cast<int>(masks_.at(static_cast<size_t>(class_index)).size());
}

Mask PoolPrior::sample(Rng& rng, int class_index, int size, bool flip_augment) const {
  if (class_index < 0 || class_index >= classes_.k())
    throw std::invalid_argument("mask pool: class index " + std::to_string(class_index) +
                                " outside [0," + std::to_string(classes_.k()) + ")");
  const auto& pool = masks_[static_cast<size_t>(class_index)];
  const auto idx = static_cast<size_t>(rng.uniform_int(0, static_cast<int64_t>(pool.size()) - 1));
  Mask m = pool[idx];
  if (m.height() != size || m.width() != size) m = resize_mask(m, size);
  if (flip_augment && rng.bernoulli(0.5)) m = hflip_mask(m);
  return m;
}

Mask sample_random_rects(Rng& rng, int count_min, int count_max, double area_min, double area_max,
                         int size) {
  if (count_min < 1 || count_max < count_min)
    throw std::invalid_argument("sample_random_rects: bad count range");
  if (!(area_min > 0 && area_min <= area_max && area_max <= 1.0))
    throw std::invalid_argument("sample_random_rects: bad area range");
  const int n = static_cast<int>(rng.uniform_int(count_min, count_max));
  TensorD out({size, size});
  for (int i = 0; i < n; ++i) {
    const double a = rng.uniform(area_min, area_max);
    const double aspect = rng.uniform(0.5, 2.0);
    int64_t w = std::llround(size * std::sqrt(a * aspect));
    int64_t h = std::llround(size * std::sqrt(a / aspect));
    w = std::min<int64_t>(size, std::max<int64_t>(1, w));
    h = std::min<int64_t>(size, std::max<int64_t>(1, h));
    const int64_t x0 = rng.uniform_int(0, size - w);
    const int64_t y0 = rng.uniform_int(0, size - h);
    for (int64_t y = y0; y < y0 + h; ++y)
      for (int64_t x = x0; x < x0 + w; ++x) out[y * size + x] = 1.0;
  }
  return Mask{std::move(out), MaskKind::Binary};
}

namespace {

NormStats compute_stats(const std::vector<LabeledSample>& train) {
  NormStats st;
  if (train.empty()) return st;
  std::array<double, 3> sum{}, sumsq{};
  int64_t count = 0;
  for (const auto& s : train) {
    const int64_t plane = s.image.height() * s.image.width();
    for (int c = 0; c < 3; ++c) {
      const float* p = s.image.chw.data() + c * plane;
      for (int64_t i = 0; i < plane; ++i) {
        sum[static_cast<size_t>(c)] += p[i];
        sumsq[static_cast<size_t>(c)] += static_cast<double>(p[i]) * p[i];
      }
    }
    count += plane;
  }
  for (int c = 0; c < 3; ++c) {
    const double mu = sum[static_cast<size_t>(c)] / static_cast<double>(count);
    const double var = sumsq[static_cast<size_t>(c)] / static_cast<double>(count) - mu * mu;
    st.mean[static_cast<size_t>(c)] = static_cast<float>(mu);
    st.stddev[static_cast<size_t>(c)] = static_cast<float>(std::max(1e-3, std::sqrt(std::max(0.0, var))));
  }
  return st;
}

void write_split(const std::vector<LabeledSample>& samples, const ClassTable& classes,
                 const std::string& root, std::vector<ManifestRecord>& records) {
  for (const auto& s : samples) {
    if (s.id.empty()) throw std::invalid_argument("write_dataset: sample without id");
    ManifestRecord rec;
    rec.id = s.id;
    rec.image_path = "images/" + s.id + ".png";
    rec.labels = s.labels;
    write_image_png(s.image, root + "/" + rec.image_path);
    for (const auto& [cls, mask] : s.gt_masks) {
      const std::string dir = root + "/masks/" + classes.names.at(static_cast<size_t>(cls));
      fs::create_directories(dir);
      write_mask_png(mask, dir + "/" + s.id + ".png");
    }
    records.push_back(std::move(rec));
  }
}

json records_to_json(const std::vector<ManifestRecord>& recs) {
  json arr = json::array();
  for (const auto& r : recs)
    arr.push_back({{"id", r.id}, {"image", r.image_path}, {"labels", r.labels}});
  return arr;
}

std::vector<ManifestRecord> records_from_json(const json& arr, int k, const std::string& where) {
  std::vector<ManifestRecord> out;
  for (const auto& e : arr) {
    ManifestRecord r;
    r.id = e.at("id").get<std::string>();
    r.image_path = e.at("image").get<std::string>();
    r.labels = e.at("labels").get<std::vector<int>>();
    for (int l : r.labels)
      if (l < 0 || l >= k)
        throw std::runtime_error(where + ": label index " + std::to_string(l) +
                                 " out of range for sample " + r.id);
    out.push_back(std::move(r));
  }
  return out;
}

}  // anonymous namespace

DatasetManifest write_dataset(const std::vector<LabeledSample>& train,
                              const std::vector<LabeledSample>& val, const ClassTable& classes,
                              int image_size, const std::string& root,
                              const std::string& config_echo, const std::string& build_id) {
  fs::create_directories(fs::path(root) / "images");
  DatasetManifest man;
  man.root = root;
  man.image_size = image_size;
  man.classes = classes;
  man.stats = compute_stats(train);
  man.config_echo = config_echo;
  man.build_id = build_id;
  write_split(train, classes, root, man.train);
  write_split(val, classes, root, man.val);

  json j;
  j["schema_version"] = man.schema_version;
  j["image_size"] = image_size;
  j["classes"] = classes.names;
  j["norm_stats"] = {{"mean", man.stats.mean}, {"std", man.stats.stddev}};
  j["config"] = config_echo;
  j["build_id"] = build_id;
  j["splits"] = {{"train", records_to_json(man.train)}, {"val", records_to_json(man.val)}};
  std::ofstream out(fs::path(root) / "manifest.json");
  if (!out) throw std::runtime_error("cannot write manifest under " + root);
  out << j.dump(2) << "\n";
  return man;
}

DatasetManifest load_manifest(const std::string& root) {
  const fs::path path = fs::path(root) / "manifest.json";
  std::ifstream in(path);
  if (!in) throw std::runtime_error("missing manifest: " + path.string());
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw std::runtime_error("corrupt manifest " + path.string() + ": " + e.what());
  }
  DatasetManifest man;
  man.root = root;
  man.schema_version = j.at("schema_version").get<int>();
  if (man.schema_version != 1)
    throw std::runtime_error("unsupported manifest schema_version " +
                             std::to_string(man.schema_version) + " in " + path.string());
  man.image_size = j.at("image_size").get<int>();
  man.classes.names = j.at("classes").get<std::vector<std::string>>();
  const auto& ns = j.at("norm_stats");
  const auto mean = ns.at("mean").get<std::vector<float>>();
  const auto stdd = ns.at("std").get<std::vector<float>>();
  if (mean.size() != 3 || stdd.size() != 3)
    throw std::runtime_error("manifest norm_stats must have 3 channels: " + path.string());
  std::copy(mean.begin(), mean.end(), man.stats.mean.begin());
  std::copy(stdd.begin(), stdd.end(), man.stats.stddev.begin());
  man.config_echo = j.value("config", "");
  man.build_id = j.value("build_id", "");
  man.train = records_from_json(j.at("splits").at("train"), man.classes.k(), path.string());
  man.val = records_from_json(j.at("splits").at("val"), man.classes.k(), path.string());
  return man;
}

LabeledSample load_sample(const DatasetManifest& man, const ManifestRecord& rec) {
  LabeledSample s;
  s.id = rec.id;
  s.labels = rec.labels;
  s.image = read_image_png(man.root + "/" + rec.image_path);
  for (int cls : rec.labels) {
    const std::string path =
        man.root + "/masks/" + man.classes.names.at(static_cast<size_t>(cls)) + "/" + rec.id + ".png";
    s.gt_masks.emplace(cls, read_mask_png(path));
  }
  return s;
}

TrainSample load_train_sample(const DatasetManifest& man, const ManifestRecord& rec) {
  TrainSample s;
  s.id = rec.id;
  s.labels = rec.labels;
  s.image = read_image_png(man.root + "/" + rec.image_path);
  return s;
}

void write_prior_pool(Rng& rng, const SceneSpec& spec, int per_class, const std::string& dir) {
  validate_scene_spec(spec);
  if (per_class < 1) throw std::invalid_argument("write_prior_pool: per_class must be >= 1");
  const ClassTable classes = shapes_class_table(spec.num_classes);
  for (int c = 0; c < classes.k(); ++c) {
    const fs::path cdir = fs::path(dir) / classes.names[static_cast<size_t>(c)];
    fs::create_directories(cdir);
    for (int i = 0; i < per_class; ++i) {
      Mask m = rasterize_glyph_mask(rng, spec, c);
      char buf[32];
      std::snprintf(buf, sizeof buf, "pool-%05d.png", i);
      write_mask_png(m, (cdir / buf).string());
    }
  }
}

}  // namespace unmask
