#include "unmask/eval.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "json.hpp"

using nlohmann::json;

namespace unmask {

namespace {

void require_display(const Image& img, const char* who) {
  if (img.range != ValueRange::Display01)
    throw std::invalid_argument(std::string(who) + ": expected display-range images");
}

void require_same_shape(const Image& a, const Image& b, const char* who) {
  if (a.chw.shape() != b.chw.shape())
    throw std::invalid_argument(std::string(who) + ": image shapes differ");
}

Image clamp01(Image img) {
  img.chw = img.chw.clone();
  for (int64_t i = 0; i < img.chw.numel(); ++i)
    img.chw[i] = std::min(1.0f, std::max(0.0f, img.chw[i]));
  return img;
}

Image to_display(const Image& img, const NormStats& stats) {
  return img.range == ValueRange::Display01 ? img : clamp01(denormalize(img, stats));
}

}  // namespace

bool removal_success(const std::vector<float>& scores_after, int target, float boundary) {
  if (target < 0 || target >= static_cast<int>(scores_after.size()))
    throw std::invalid_argument("removal_success: target class out of range");
  return scores_after[static_cast<size_t>(target)] < boundary;
}

bool false_removal(const std::vector<float>& scores_before, const std::vector<float>& scores_after,
                   int target, float boundary) {
  if (scores_before.size() != scores_after.size())
    throw std::invalid_argument("false_removal: score vector sizes differ");
  for (size_t c = 0; c < scores_before.size(); ++c) {
    if (static_cast<int>(c) == target) continue;
    if (scores_before[c] >= boundary && scores_after[c] < boundary) return true;
  }
  return false;
}

double psnr(const Image& a, const Image& b, double peak) {
  require_display(a, "psnr");
  require_display(b, "psnr");
  require_same_shape(a, b, "psnr");
  if (peak <= 0.0) throw std::invalid_argument("psnr: peak must be positive");
  double mse = 0.0;
  const int64_t n = a.chw.numel();
  for (int64_t i = 0; i < n; ++i) {
    const double d = static_cast<double>(a.chw[i]) - static_cast<double>(b.chw[i]);
    mse += d * d;
  }
  mse /= static_cast<double>(n);
  if (mse == 0.0) return 100.0;
  return std::min(100.0, 10.0 * std::log10(peak * peak / mse));
}

double ssim(const Image& a, const Image& b) {
  require_display(a, "ssim");
  require_display(b, "ssim");
  require_same_shape(a, b, "ssim");
  constexpr int kWin = 11;
  const int64_t h = a.height(), w = a.width();
  if (h < kWin || w < kWin)
    throw std::invalid_argument("ssim: image smaller than the 11x11 window");

  double kernel[kWin];
  double ksum = 0.0;
  for (int i = 0; i < kWin; ++i) {
    const double d = i - (kWin - 1) / 2.0;
    kernel[i] = std::exp(-d * d / (2.0 * 1.5 * 1.5));
    ksum += kernel[i];
  }
  for (double& k : kernel) k /= ksum;

  const double c1 = 0.01 * 0.01, c2 = 0.03 * 0.03;
  const int64_t oh = h - kWin + 1, ow = w - kWin + 1;

  // Separable valid-window means of a field: horizontal pass then vertical.
  auto windowed = [&](const std::vector<double>& src) {
    std::vector<double> horiz(static_cast<size_t>(h * ow));
    for (int64_t i = 0; i < h; ++i)
      for (int64_t j = 0; j < ow; ++j) {
        double acc = 0.0;
        for (int k = 0; k < kWin; ++k) acc += kernel[k] * src[static_cast<size_t>(i * w + j + k)];
        horiz[static_cast<size_t>(i * ow + j)] = acc;
      }
    std::vector<double> out(static_cast<size_t>(oh * ow));
    for (int64_t i = 0; i < oh; ++i)
      for (int64_t j = 0; j < ow; ++j) {
        double acc = 0.0;
        for (int k = 0; k < kWin; ++k)
          acc += kernel[k] * horiz[static_cast<size_t>((i + k) * ow + j)];
        out[static_cast<size_t>(i * ow + j)] = acc;
      }
    return out;
  };

  double total = 0.0;
  const int64_t channels = a.channels();
  for (int64_t c = 0; c < channels; ++c) {
    const size_t plane = static_cast<size_t>(h * w);
    std::vector<double> pa(plane), pb(plane), paa(plane), pbb(plane), pab(plane);
    for (size_t i = 0; i < plane; ++i) {
      pa[i] = a.chw[static_cast<int64_t>(c * h * w + static_cast<int64_t>(i))];
      pb[i] = b.chw[static_cast<int64_t>(c * h * w + static_cast<int64_t>(i))];
      paa[i] = pa[i] * pa[i];
      pbb[i] = pb[i] * pb[i];
      pab[i] = pa[i] * pb[i];
    }
    auto mu_a = windowed(pa), mu_b = windowed(pb);
    auto e_aa = windowed(paa), e_bb = windowed(pbb), e_ab = windowed(pab);
    double acc = 0.0;
    for (size_t i = 0; i < mu_a.size(); ++i) {
      const double va = e_aa[i] - mu_a[i] * mu_a[i];
      const double vb = e_bb[i] - mu_b[i] * mu_b[i];
      const double cab = e_ab[i] - mu_a[i] * mu_b[i];
      // mu_a^2 + mu_b^2 + c1 written as (mu_a - mu_b)^2 + lum so the metric
      // stays bitwise symmetric under fused multiply-add contraction.
      const double lum = 2.0 * mu_a[i] * mu_b[i] + c1;
      const double d = mu_a[i] - mu_b[i];
      acc += (lum * (2.0 * cab + c2)) / ((d * d + lum) * (va + vb + c2));
    }
    total += acc / static_cast<double>(mu_a.size());
  }
  return total / static_cast<double>(channels);
}

double miou(const Mask& pred, const Mask& gt) {
  if (pred.kind != MaskKind::Binary || gt.kind != MaskKind::Binary)
    throw std::invalid_argument("miou: masks must be binary; binarize first");
  if (pred.hw.shape() != gt.hw.shape())
    throw std::invalid_argument("miou: mask shapes differ");
  int64_t inter = 0, uni = 0;
  for (int64_t i = 0; i < pred.hw.numel(); ++i) {
    const bool p = pred.hw[i] > 0.5;
    const bool g = gt.hw[i] > 0.5;
    inter += p && g;
    uni += p || g;
  }
  if (uni == 0) return 1.0;
  return static_cast<double>(inter) / static_cast<double>(uni);
}

std::string report_to_json(const MetricsReport& r) {
  json per = json::array();
  for (const auto& c : r.removal_per_class) {
    json e;
    e["name"] = c.name;
    e["count"] = c.count;
    e["rate_pct"] = c.rate_pct;
    per.push_back(e);
  }
  json j;
  j["schema_version"] = r.schema_version;
  j["samples"] = r.samples;
  j["removal_success_pct"] = r.removal_success_pct;
  j["removal_per_class"] = per;
  j["false_removal_pct"] = r.false_removal_pct;
  j["psnr_mean"] = r.psnr_mean;
  j["ssim_mean"] = r.ssim_mean;
  j["perceptual_mean"] = r.perceptual_mean;
  j["miou_mean"] = r.miou_mean;
  j["masked_area_pct"] = r.masked_area_pct;
  j["config_echo"] = r.config_echo;
  return j.dump(2);
}

MetricsReport report_from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw std::runtime_error(std::string("metrics report is not valid JSON: ") + e.what());
  }
  MetricsReport r;
  try {
    r.schema_version = j.at("schema_version").get<int>();
    if (r.schema_version != 1)
      throw std::runtime_error("metrics report has schema version " +
                               std::to_string(r.schema_version) + ", this build reads version 1");
    r.samples = j.at("samples").get<int64_t>();
    r.removal_success_pct = j.at("removal_success_pct").get<double>();
    for (const auto& e : j.at("removal_per_class")) {
      ClassRate c;
      c.name = e.at("name").get<std::string>();
      c.count = e.at("count").get<int64_t>();
      c.rate_pct = e.at("rate_pct").get<double>();
      r.removal_per_class.push_back(std::move(c));
    }
    r.false_removal_pct = j.at("false_removal_pct").get<double>();
    r.psnr_mean = j.at("psnr_mean").get<double>();
    r.ssim_mean = j.at("ssim_mean").get<double>();
    r.perceptual_mean = j.at("perceptual_mean").get<double>();
    r.miou_mean = j.at("miou_mean").get<double>();
    r.masked_area_pct = j.at("masked_area_pct").get<double>();
    r.config_echo = j.at("config_echo").get<std::string>();
  } catch (const json::exception& e) {
    throw std::runtime_error(std::string("metrics report is missing fields: ") + e.what());
  }
  auto pct = [](double v, const char* who) {
    if (v < 0.0 || v > 100.0)
      throw std::runtime_error(std::string("metrics report field ") + who +
                               " outside [0, 100]");
  };
  pct(r.removal_success_pct, "removal_success_pct");
  pct(r.false_removal_pct, "false_removal_pct");
  pct(r.masked_area_pct, "masked_area_pct");
  for (const auto& c : r.removal_per_class) pct(c.rate_pct, "removal_per_class.rate_pct");
  if (r.ssim_mean < -1.0 || r.ssim_mean > 1.0)
    throw std::runtime_error("metrics report field ssim_mean outside [-1, 1]");
  if (r.miou_mean < 0.0 || r.miou_mean > 1.0)
    throw std::runtime_error("metrics report field miou_mean outside [0, 1]");
  return r;
}

EditResult edit_image(MaskGenerator& gm, Inpainter& gi, const Image& x, int target_class,
                      const NormStats& stats, double mask_threshold, bool soft_mask) {
  const Image xn = x.range == ValueRange::Normalized ? x : normalize(x, stats);
  const ClassLabel label{target_class, ""};
  Mask soft = mask_generator_forward(gm, xn, label);
  Mask m = soft_mask ? soft : binarize_mask(soft, mask_threshold);
  Image zero{TensorF(xn.chw.shape(), 0.0f), ValueRange::Normalized};
  Image masked = compose(xn, m, zero);
  Image fill = inpainter_forward(gi, masked, m);
  Image y = compose(xn, m, fill);

  EditResult res;
  res.output = clamp01(denormalize(y, stats));
  res.inpainted_full = clamp01(denormalize(fill, stats));
  res.mask = std::move(m);
  res.target = label;
  return res;
}

EditFn identity_editor() {
  return [](const Image& x, int target_class) {
    EditResult r;
    r.output = x;
    r.inpainted_full = x;
    r.mask = Mask{TensorD({x.height(), x.width()}, 0.0), MaskKind::Binary};
    r.target = ClassLabel{target_class, ""};
    return r;
  };
}

MetricsReport evaluate(const EditFn& editor, const Checkpoint& classifier_ck,
                       const std::vector<LabeledSample>& data, const NetConfig& net,
                       const std::vector<std::string>& editor_class_names,
                       const EvalConfig& cfg) {
  validate_config(net);
  if (classifier_ck.tensors.empty())
    throw std::invalid_argument("evaluation needs a classifier checkpoint");
  if (editor_class_names != classifier_ck.class_names)
    throw std::invalid_argument("editor and classifier class tables differ");
  if (static_cast<int>(classifier_ck.class_names.size()) != net.num_classes)
    throw std::invalid_argument("classifier checkpoint class count does not match the config");

  ObjectClassifier clf(net, 1);
  restore_store(classifier_ck, clf.store(), "classifier");

  struct Probe {
    std::string id;
    int cls = 0;
    bool removed = false;
    bool wrong = false;
    double psnr_v = 0, ssim_v = 0, perc = 0, iou = 0, area = 0;
  };
  std::vector<Probe> probes;

  for (const auto& sample : data) {
    const Image disp = to_display(sample.image, net.stats);
    const Image xn = normalize(disp, net.stats);
    const auto before = object_classifier_forward(clf, xn);
    const auto feats_in = feature_extract(clf, xn, net.perceptual_depths);

    for (int c : sample.labels) {
      EditResult r = editor(disp, c);
      const Image out_disp = to_display(r.output, net.stats);
      const Image out_n = normalize(out_disp, net.stats);
      const auto after = object_classifier_forward(clf, out_n);

      Probe p;
      p.id = sample.id;
      p.cls = c;
      p.removed = removal_success(after, c, cfg.boundary);
      p.wrong = false_removal(before, after, c, cfg.boundary);
      p.psnr_v = psnr(disp, out_disp);
      p.ssim_v = ssim(disp, out_disp);

      const auto feats_out = feature_extract(clf, out_n, net.perceptual_depths);
      double perc = 0.0;
      for (size_t k = 0; k < feats_in.size(); ++k) {
        double acc = 0.0;
        for (int64_t i = 0; i < feats_in[k].numel(); ++i)
          acc += std::abs(static_cast<double>(feats_in[k][i]) -
                          static_cast<double>(feats_out[k][i]));
        perc += acc / static_cast<double>(feats_in[k].numel());
      }
      p.perc = perc;

      Mask pred = r.mask.kind == MaskKind::Soft ? binarize_mask(r.mask, cfg.mask_threshold)
                                                : r.mask;
      Mask gt{TensorD({pred.height(), pred.width()}, 0.0), MaskKind::Binary};
      auto it = sample.gt_masks.find(c);
      if (it != sample.gt_masks.end())
        gt = it->second.kind == MaskKind::Soft ? binarize_mask(it->second, 0.5) : it->second;
      p.iou = miou(pred, gt);
      p.area = masked_area_fraction(pred) * 100.0;
      probes.push_back(std::move(p));
    }
  }

  std::sort(probes.begin(), probes.end(), [](const Probe& a, const Probe& b) {
    return a.id != b.id ? a.id < b.id : a.cls < b.cls;
  });

  MetricsReport rep;
  rep.samples = static_cast<int64_t>(probes.size());
  std::vector<int64_t> class_count(static_cast<size_t>(net.num_classes), 0);
  std::vector<int64_t> class_hits(static_cast<size_t>(net.num_classes), 0);
  int64_t removed = 0, wrong = 0;
  double psnr_sum = 0, ssim_sum = 0, perc_sum = 0, iou_sum = 0, area_sum = 0;
  for (const auto& p : probes) {
    removed += p.removed;
    wrong += p.wrong;
    psnr_sum += p.psnr_v;
    ssim_sum += p.ssim_v;
    perc_sum += p.perc;
    iou_sum += p.iou;
    area_sum += p.area;
    ++class_count[static_cast<size_t>(p.cls)];
    class_hits[static_cast<size_t>(p.cls)] += p.removed;
  }
  const double n = std::max<double>(1.0, static_cast<double>(probes.size()));
  if (!probes.empty()) {
    rep.removal_success_pct = 100.0 * static_cast<double>(removed) / n;
    rep.false_removal_pct = 100.0 * static_cast<double>(wrong) / n;
    rep.psnr_mean = psnr_sum / n;
    rep.ssim_mean = ssim_sum / n;
    rep.perceptual_mean = perc_sum / n;
    rep.miou_mean = iou_sum / n;
    rep.masked_area_pct = area_sum / n;
  }
  for (int c = 0; c < net.num_classes; ++c) {
    ClassRate cr;
    cr.name = classifier_ck.class_names[static_cast<size_t>(c)];
    cr.count = class_count[static_cast<size_t>(c)];
    cr.rate_pct = cr.count == 0 ? 0.0
                                : 100.0 * static_cast<double>(class_hits[static_cast<size_t>(c)]) /
                                      static_cast<double>(cr.count);
    rep.removal_per_class.push_back(std::move(cr));
  }
  return rep;
}

}  // namespace unmask
