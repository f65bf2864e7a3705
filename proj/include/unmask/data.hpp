#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "unmask/core.hpp"
#include "unmask/rng.hpp"

namespace unmask {

// Sample as the evaluator sees it; training code consumes TrainSample, which
// has no ground-truth masks by construction.
struct LabeledSample {
  Image image;
  std::vector<int> labels;        // sorted class indices
  std::map<int, Mask> gt_masks;   // visible-silhouette union per class
  std::string id;
};

struct TrainSample {
  Image image;
  std::vector<int> labels;
  std::string id;
};

enum class BackgroundKind { Flat, Gradient, NoiseTexture };

struct SceneSpec {
  int image_size = 128;
  int num_classes = 4;
  int min_objects = 1;
  int max_objects = 3;
  double min_scale = 0.25;  // glyph diameter as a fraction of image size
  double max_scale = 0.55;
  BackgroundKind background = BackgroundKind::Gradient;
  double max_class_area = 0.30;
};

struct PriorSpec {
  enum class Kind { None, Boxes, MaskPool } kind = Kind::None;
  double box_area_min = 0.02;
  double box_area_max = 0.30;
  double box_aspect_min = 1.0 / 3.0;
  double box_aspect_max = 3.0;
  double box_rot_min_deg = 0.0;
  double box_rot_max_deg = 180.0;
  std::string pool_dir;
  int pool_per_class_limit = 0;  // 0 = unlimited
};

// The glyph families available to the scene generator, in fixed order.
const std::vector<std::string>& glyph_family_names();

// First k glyph families as the class table; throws if k exceeds the families
// or k < 2.
ClassTable shapes_class_table(int k);

LabeledSample generate_scene(Rng& rng, const SceneSpec& spec);
std::vector<LabeledSample> generate_corpus(Rng& rng, const SceneSpec& spec, int count,
                                           const std::string& id_prefix);

// Full silhouette of one glyph of class c (no scene, no occlusion); the
// building block for unpaired mask pools.
Mask rasterize_glyph_mask(Rng& rng, const SceneSpec& spec, int class_index);

bool filter_oversized(const LabeledSample& sample, double max_frac);

Image resize_bilinear(const Image& img, int64_t out_h, int64_t out_w);
Image center_crop(const Image& img, int64_t size);
Image hflip(const Image& img);
Mask hflip_mask(const Mask& m);
// Shortest edge to `size`, center crop, binarize at 0.5.
Mask resize_mask(const Mask& m, int64_t size);

// Shortest-edge resize to size, center crop, optional train-time horizontal
// flip (p = 0.5), then channel normalization.
Image preprocess(const Image& raw, int size, bool train_mode, Rng& rng, const NormStats& stats);

// Pixel-center coverage rasterizer for a rotated rectangle (w,h in pixels,
// theta in radians, center in pixel coordinates).
Mask rasterize_rotated_rect(int size, double cx, double cy, double w, double h, double theta);

Mask sample_box_prior(Rng& rng, const PriorSpec& prior, int size);

// In-memory pool of unpaired per-class masks loaded from
// pool_dir/<class>/*.png (sorted file order, optionally first-n limited).
class PoolPrior {
 public:
  PoolPrior(const std::string& pool_dir, const ClassTable& classes, int per_class_limit);

  Mask sample(Rng& rng, int class_index, int size, bool flip_augment = true) const;
  int pool_size(int class_index) const;

 private:
  std::vector<std::vector<Mask>> masks_;
  ClassTable classes_;
};

Mask sample_random_rects(Rng& rng, int count_min, int count_max, double area_min, double area_max,
                         int size);

struct ManifestRecord {
  std::string id;
  std::string image_path;  // relative to root
  std::vector<int> labels;
};

struct DatasetManifest {
  std::string root;
  int schema_version = 1;
  int image_size = 0;
  ClassTable classes;
  NormStats stats;
  std::string config_echo;
  std::string build_id;
  std::vector<ManifestRecord> train;
  std::vector<ManifestRecord> val;
};

DatasetManifest write_dataset(const std::vector<LabeledSample>& train,
                              const std::vector<LabeledSample>& val, const ClassTable& classes,
                              int image_size, const std::string& root,
                              const std::string& config_echo = "",
                              const std::string& build_id = "");
DatasetManifest load_manifest(const std::string& root);
LabeledSample load_sample(const DatasetManifest& man, const ManifestRecord& rec);
TrainSample load_train_sample(const DatasetManifest& man, const ManifestRecord& rec);

// Per-class counts of unpaired silhouettes written to dir/<class>/*.png.
void write_prior_pool(Rng& rng, const SceneSpec& spec, int per_class, const std::string& dir);

}  // namespace unmask
