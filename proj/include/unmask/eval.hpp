#pragma once

#include <functional>
#include <string>
#include <vector>

#include "unmask/checkpoint.hpp"
#include "unmask/core.hpp"
#include "unmask/data.hpp"
#include "unmask/nets.hpp"

namespace unmask {

// True iff the edited image's score for the target class fell strictly below
// the decision boundary.
bool removal_success(const std::vector<float>& scores_after, int target, float boundary = 0.5f);

// True iff some other class that was above the boundary before editing
// dropped below it afterwards.
bool false_removal(const std::vector<float>& scores_before, const std::vector<float>& scores_after,
                   int target, float boundary = 0.5f);

// Display-range images only; zero MSE (and anything beyond) caps at 100 dB.
double psnr(const Image& a, const Image& b, double peak = 1.0);

// Mean local SSIM, 11x11 Gaussian window with sigma 1.5, valid windows only,
// averaged over channels. Throws if the image is smaller than the window.
double ssim(const Image& a, const Image& b);

// Intersection over union of two binary masks; both empty counts as 1.
// Soft masks are rejected — binarize first.
double miou(const Mask& pred, const Mask& gt);

struct EvalConfig {
  float boundary = 0.5f;
  double mask_threshold = 0.5;
};

struct ClassRate {
  std::string name;
  int64_t count = 0;
  double rate_pct = 0.0;
};

struct MetricsReport {
  int schema_version = 1;
  int64_t samples = 0;  // (image, target class) probes
  double removal_success_pct = 0.0;
  std::vector<ClassRate> removal_per_class;
  double false_removal_pct = 0.0;
  double psnr_mean = 0.0;
  double ssim_mean = 0.0;
  double perceptual_mean = 0.0;
  double miou_mean = 0.0;
  double masked_area_pct = 0.0;
  std::string config_echo;
};

std::string report_to_json(const MetricsReport& r);
// Parses and checks the schema version and range invariants.
MetricsReport report_from_json(const std::string& text);

// One full inference pass: soft mask for the target class, binarized at the
// threshold (kept soft on request), composed with the in-painter's fill.
// Returns display-range images.
EditResult edit_image(MaskGenerator& gm, Inpainter& gi, const Image& x, int target_class,
                      const NormStats& stats, double mask_threshold = 0.5,
                      bool soft_mask = false);

using EditFn = std::function<EditResult(const Image& x, int target_class)>;

// Baseline that returns the input untouched with an empty mask.
EditFn identity_editor();

// Runs the editor over every (image, present class) probe against a held-out
// classifier and aggregates. Probes are reduced in (id, class) order, so
// shuffled input yields an identical report.
MetricsReport evaluate(const EditFn& editor, const Checkpoint& classifier_ck,
                       const std::vector<LabeledSample>& data, const NetConfig& net,
                       const std::vector<std::string>& editor_class_names, const EvalConfig& cfg);

}  // namespace unmask
