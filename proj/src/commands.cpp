#include "unmask/commands.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>
#include <vector>

#include "json.hpp"
#include "unmask/config.hpp"
#include "unmask/data.hpp"
#include "unmask/eval.hpp"
#include "unmask/png_io.hpp"
#include "unmask/train.hpp"
#include "unmask/version.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace unmask {

namespace {

int fail_usage(const std::string& msg) {
  std::cerr << "error: " << msg << "\n";
  return kExitUsage;
}

// Accepts either a directory holding the checkpoints directly or a training
// output directory, where the highest complete ckpt-epoch-<n> wins.
fs::path resolve_model_dir(const std::string& model) {
  const fs::path root(model);
  if (fs::exists(root / "mask_gen.ckpt")) return root;
  int best = -1;
  if (fs::is_directory(root))
    for (const auto& entry : fs::directory_iterator(root)) {
      const std::string name = entry.path().filename().string();
      if (name.rfind("ckpt-epoch-", 0) != 0) continue;
      int n = -1;
      try {
        n = std::stoi(name.substr(11));
      } catch (const std::exception&) {
        continue;
      }
      if (n > best && fs::exists(entry.path() / "mask_gen.ckpt") &&
          fs::exists(entry.path() / "inpainter.ckpt"))
        best = n;
    }
  if (best < 0)
    throw std::runtime_error("no checkpoints under '" + model +
                             "' (expected mask_gen.ckpt or ckpt-epoch-<n>/)");
  return root / ("ckpt-epoch-" + std::to_string(best));
}

// Config keys plus manifest-derived facts; sizes and class counts must agree
// so the echoed config fully describes the run.
NetConfig resolve_net(const RunConfig& cfg, const DatasetManifest& man) {
  NetConfig net = cfg.net;
  if (net.image_size != man.image_size)
    throw std::runtime_error("config image_size " + std::to_string(net.image_size) +
                             " does not match the dataset's " + std::to_string(man.image_size));
  if (net.num_classes != man.classes.k())
    throw std::runtime_error("config num_classes " + std::to_string(net.num_classes) +
                             " does not match the dataset's " + std::to_string(man.classes.k()));
  net.stats = man.stats;
  validate_config(net);
  return net;
}

NetConfig net_from_checkpoint(const Checkpoint& ck, const char* who) {
  if (ck.config_echo.empty())
    throw std::runtime_error(std::string(who) + " checkpoint carries no configuration");
  RunConfig cfg = parse_run_config(ck.config_echo);
  NetConfig net = cfg.net;
  if (static_cast<size_t>(net.num_classes) != ck.class_names.size())
    throw std::runtime_error(std::string(who) + " checkpoint class table does not match its config");
  net.stats = ck.stats;
  validate_config(net);
  return net;
}

std::vector<TrainSample> load_train_split(const DatasetManifest& man,
                                          const std::vector<ManifestRecord>& recs) {
  std::vector<TrainSample> out;
  out.reserve(recs.size());
  for (const auto& r : recs) out.push_back(load_train_sample(man, r));
  return out;
}

PriorSpec parse_prior_flag(const std::string& flag, const PriorSpec& ranges) {
  PriorSpec prior = ranges;
  if (flag == "none") {
    prior.kind = PriorSpec::Kind::None;
  } else if (flag == "boxes") {
    prior.kind = PriorSpec::Kind::Boxes;
  } else if (flag.rfind("pool:", 0) == 0 && flag.size() > 5) {
    prior.kind = PriorSpec::Kind::MaskPool;
    prior.pool_dir = flag.substr(5);
  } else {
    throw std::runtime_error("--prior must be none, boxes, or pool:DIR (got '" + flag + "')");
  }
  return prior;
}

void ensure_parent_dir(const fs::path& file) {
  const fs::path dir = file.parent_path();
  if (!dir.empty()) fs::create_directories(dir);
}

std::string read_meta_classifier_run_id(const fs::path& ckpt_dir) {
  for (const fs::path dir : {ckpt_dir, ckpt_dir.parent_path()}) {
    const fs::path meta = dir / "training-meta.json";
    if (!fs::exists(meta)) continue;
    std::ifstream in(meta);
    json j;
    try {
      in >> j;
      return j.at("classifier_run_id").get<std::string>();
    } catch (const std::exception&) {
      throw std::runtime_error("cannot parse " + meta.string());
    }
  }
  return "";
}

Image soft_mask_to_image(const Mask& m) {
  const int64_t h = m.height(), w = m.width();
  Image img{TensorF({3, h, w}, 0.0f), ValueRange::Display01};
  for (int64_t c = 0; c < 3; ++c)
    for (int64_t i = 0; i < h * w; ++i)
      img.chw[c * h * w + i] = static_cast<float>(m.hw[i]);
  return img;
}

}  // namespace

int cmd_gen_data(const GenDataArgs& a) {
  try {
    if (a.num <= 0) return fail_usage("--num must be positive");
    if (a.size < 16 || a.size % 16 != 0)
      return fail_usage("--size must be a multiple of 16, at least 16");
    ClassTable table;
    try {
      table = shapes_class_table(a.classes);
    } catch (const std::exception& e) {
      return fail_usage(e.what());
    }
    const fs::path out(a.out);
    if (fs::exists(out)) {
      if (!fs::is_directory(out)) return fail_usage("'" + a.out + "' exists and is not a directory");
      if (!fs::is_empty(out) && !a.force)
        return fail_usage("output directory '" + a.out +
                          "' is not empty (pass --force to replace it)");
      if (a.force) fs::remove_all(out);
    }

    SceneSpec spec;
    spec.image_size = a.size;
    spec.num_classes = a.classes;
    const int val_count = a.val >= 0 ? a.val : a.num / 5;

    Rng rng(a.seed);
    const auto train = generate_corpus(rng, spec, a.num, "train");
    const auto val = generate_corpus(rng, spec, val_count, "val");

    std::ostringstream echo;
    echo << "command = gen-data\n"
         << "num = " << a.num << "\n"
         << "val = " << val_count << "\n"
         << "classes = " << a.classes << "\n"
         << "size = " << a.size << "\n"
         << "seed = " << a.seed << "\n";
    write_dataset(train, val, table, a.size, a.out, echo.str(), kBuildId);

    if (!a.prior_pool_out.empty()) {
      if (a.pool_per_class <= 0) return fail_usage("--pool-per-class must be positive");
      Rng pool_rng(a.seed ^ 0x9e3779b97f4a7c15ull);
      write_prior_pool(pool_rng, spec, a.pool_per_class, a.prior_pool_out);
    }

    std::vector<int64_t> hist(static_cast<size_t>(a.classes), 0);
    double area_sum = 0.0, area_min = 1.0, area_max = 0.0;
    int64_t area_n = 0;
    for (const auto* split : {&train, &val})
      for (const auto& s : *split) {
        for (int c : s.labels) ++hist[static_cast<size_t>(c)];
        for (const auto& [c, m] : s.gt_masks) {
          const double f = masked_area_fraction(m);
          area_sum += f;
          area_min = std::min(area_min, f);
          area_max = std::max(area_max, f);
          ++area_n;
        }
      }
    std::cout << "wrote " << train.size() << " train + " << val.size() << " val images to "
              << a.out << "\n";
    for (int c = 0; c < a.classes; ++c)
      std::cout << "  class " << table.names[static_cast<size_t>(c)] << ": "
                << hist[static_cast<size_t>(c)] << " positives\n";
    if (area_n > 0)
      std::cout << "  object area fraction: mean "
                << area_sum / static_cast<double>(area_n) << ", min " << area_min << ", max "
                << area_max << "\n";
    if (!a.prior_pool_out.empty())
      std::cout << "wrote prior pool (" << a.pool_per_class << " masks per class) to "
                << a.prior_pool_out << "\n";
    return kExitOk;
  } catch (const std::exception& e) {
    return fail_usage(e.what());
  }
}

int cmd_pretrain(const PretrainArgs& a) {
  try {
    const RunConfig cfg = load_run_config(a.config);
    const DatasetManifest man = load_manifest(a.data);
    const NetConfig net = resolve_net(cfg, man);
    validate_train_config(cfg.train);

    const auto train = load_train_split(man, man.train);
    const auto val = load_train_split(man, man.val);
    const std::string run_id = "pretrain-s" + std::to_string(cfg.train.seed);

    const PretrainResult res =
        pretrain_classifier(train, val, net, cfg.train, man.classes.names, run_id, cfg.raw);

    ensure_parent_dir(a.out);
    save_checkpoint(res.best, a.out);
    std::cout << "best epoch " << res.best_epoch + 1 << "/" << cfg.train.epochs << ", val macro-F1 "
              << res.best_f1 << ", saved " << a.out << "\n";
    return kExitOk;
  } catch (const NumericalFailure& e) {
    std::cerr << "numerical failure: " << e.what() << "\n";
    return kExitNumerical;
  } catch (const std::exception& e) {
    return fail_usage(e.what());
  }
}

int cmd_train(const TrainArgs& a) {
  std::string out_dir = a.out;
  try {
    const RunConfig base = load_run_config(a.config);
    RunConfig cfg = base;
    cfg.train.prior = parse_prior_flag(a.prior, base.train.prior);
    validate_train_config(cfg.train);

    const DatasetManifest man = load_manifest(a.data);
    const NetConfig net = resolve_net(cfg, man);
    const Checkpoint clf = load_checkpoint(a.classifier);
    if (clf.class_names != man.classes.names)
      return fail_usage("classifier checkpoint classes do not match the dataset classes");

    const auto data = load_train_split(man, man.train);
    std::string prior_name = a.prior.rfind("pool:", 0) == 0 ? "pool" : a.prior;
    const std::string run_id =
        "train-s" + std::to_string(cfg.train.seed) + "-" + prior_name;

    const TrainResult res = train_editor(data, net, cfg.train, clf, a.out, run_id, cfg.raw);
    if (res.start_epoch > 0)
      std::cout << "resumed after epoch " << res.start_epoch - 1 << "\n";
    std::cout << "ran " << res.epochs.size() << " epochs (" << res.steps.size() << " steps), log "
              << res.log_path << "\n";
    return kExitOk;
  } catch (const NumericalFailure& e) {
    std::cerr << "numerical failure: " << e.what() << "\n";
    try {
      if (!out_dir.empty()) {
        fs::create_directories(out_dir);
        std::ofstream dump(fs::path(out_dir) / "nan-dump.json", std::ios::trunc);
        dump << json{{"error", e.what()}}.dump(2) << "\n";
      }
    } catch (const std::exception&) {
    }
    return kExitNumerical;
  } catch (const std::exception& e) {
    return fail_usage(e.what());
  }
}

int cmd_edit(const EditArgs& a) {
  try {
    const fs::path dir = resolve_model_dir(a.model);
    const Checkpoint gm_ck = load_checkpoint(dir / "mask_gen.ckpt");
    const Checkpoint gi_ck = load_checkpoint(dir / "inpainter.ckpt");
    const RunConfig cfg = parse_run_config(gm_ck.config_echo);
    const NetConfig net = net_from_checkpoint(gm_ck, "mask generator");

    const auto cls_it =
        std::find(gm_ck.class_names.begin(), gm_ck.class_names.end(), a.class_name);
    if (cls_it == gm_ck.class_names.end()) {
      std::string names;
      for (const auto& n : gm_ck.class_names) names += (names.empty() ? "" : ", ") + n;
      return fail_usage("unknown class '" + a.class_name + "'; model classes: " + names);
    }
    const int cls = static_cast<int>(cls_it - gm_ck.class_names.begin());

    MaskGenerator gm(net, 1);
    restore_store(gm_ck, gm.store(), "mask generator");
    Inpainter gi(net, 2);
    restore_store(gi_ck, gi.store(), "in-painter");

    Image img = read_image_png(a.input);
    if (img.height() != net.image_size || img.width() != net.image_size) {
      std::cerr << "warning: input is " << img.width() << "x" << img.height() << ", resizing to "
                << net.image_size << "x" << net.image_size << "\n";
      img = resize_bilinear(img, net.image_size, net.image_size);
    }

    const EditResult res =
        edit_image(gm, gi, img, cls, net.stats, cfg.mask_threshold, a.soft);
    ensure_parent_dir(a.out);
    write_image_png(res.output, a.out);

    if (!a.dump_mask.empty()) {
      ensure_parent_dir(a.dump_mask);
      if (res.mask.kind == MaskKind::Binary)
        write_mask_png(res.mask, a.dump_mask);
      else
        write_image_png(soft_mask_to_image(res.mask), a.dump_mask);
    }

    if (!a.classifier.empty()) {
      const Checkpoint clf_ck = load_checkpoint(a.classifier);
      if (clf_ck.class_names != gm_ck.class_names)
        return fail_usage("classifier checkpoint classes do not match the model classes");
      const NetConfig cnet = net_from_checkpoint(clf_ck, "classifier");
      ObjectClassifier clf(cnet, 1);
      restore_store(clf_ck, clf.store(), "classifier");
      const auto before = object_classifier_forward(clf, normalize(img, cnet.stats));
      const auto after =
          object_classifier_forward(clf, normalize(res.output, cnet.stats));
      std::cout << "class '" << a.class_name << "' score: before "
                << before[static_cast<size_t>(cls)] << ", after "
                << after[static_cast<size_t>(cls)] << "\n";
      if (before[static_cast<size_t>(cls)] < cfg.eval_boundary)
        std::cerr << "warning: the input does not appear to contain class '" << a.class_name
                  << "' (score " << before[static_cast<size_t>(cls)] << ")\n";
    }

    std::cout << "wrote " << a.out << "\n";
    return kExitOk;
  } catch (const std::exception& e) {
    return fail_usage(e.what());
  }
}

int cmd_eval(const EvalArgs& a) {
  try {
    const fs::path dir = resolve_model_dir(a.model);
    const Checkpoint gm_ck = load_checkpoint(dir / "mask_gen.ckpt");
    const Checkpoint gi_ck = load_checkpoint(dir / "inpainter.ckpt");
    const RunConfig cfg = parse_run_config(gm_ck.config_echo);
    const NetConfig edit_net = net_from_checkpoint(gm_ck, "mask generator");

    const Checkpoint clf_ck = load_checkpoint(a.classifier);
    const std::string train_clf_run = read_meta_classifier_run_id(dir);
    if (train_clf_run.empty())
      std::cerr << "warning: no training metadata next to the model; cannot verify the "
                   "evaluation classifier is held out\n";
    else if (clf_ck.run_id == train_clf_run)
      return fail_usage("evaluation classifier has run id '" + clf_ck.run_id +
                        "', the one used for training; evaluate with a held-out classifier");
    if (clf_ck.class_names != gm_ck.class_names)
      return fail_usage("classifier checkpoint classes do not match the model classes");
    const NetConfig clf_net = net_from_checkpoint(clf_ck, "classifier");
    if (clf_net.image_size != edit_net.image_size)
      return fail_usage("classifier and model were built for different image sizes");

    const DatasetManifest man = load_manifest(a.data);
    if (man.image_size != edit_net.image_size)
      return fail_usage("dataset image size does not match the model");
    if (man.classes.names != gm_ck.class_names)
      return fail_usage("dataset classes do not match the model classes");
    std::vector<LabeledSample> samples;
    samples.reserve(man.val.size());
    for (const auto& r : man.val) samples.push_back(load_sample(man, r));

    MaskGenerator gm(edit_net, 1);
    restore_store(gm_ck, gm.store(), "mask generator");
    Inpainter gi(edit_net, 2);
    restore_store(gi_ck, gi.store(), "in-painter");

    const EditFn editor = [&](const Image& x, int target_class) {
      return edit_image(gm, gi, x, target_class, edit_net.stats, cfg.mask_threshold, false);
    };
    EvalConfig ecfg;
    ecfg.boundary = cfg.eval_boundary;
    ecfg.mask_threshold = cfg.mask_threshold;
    MetricsReport rep = evaluate(editor, clf_ck, samples, clf_net, gm_ck.class_names, ecfg);
    rep.config_echo = cfg.raw;

    json j = json::parse(report_to_json(rep));
    j["build_id"] = kBuildId;
    ensure_parent_dir(a.report);
    std::ofstream out(a.report, std::ios::trunc);
    if (!out) return fail_usage("cannot write report '" + a.report + "'");
    out << j.dump(2) << "\n";

    std::cout << "samples  removal%  false-removal%  perceptual  psnr  ssim  miou  area%\n";
    std::cout << std::fixed << std::setprecision(3) << rep.samples << "  "
              << rep.removal_success_pct << "  " << rep.false_removal_pct << "  "
              << rep.perceptual_mean << "  " << rep.psnr_mean << "  " << rep.ssim_mean << "  "
              << rep.miou_mean << "  " << rep.masked_area_pct << "\n";
    return kExitOk;
  } catch (const std::exception& e) {
    return fail_usage(e.what());
  }
}

}  // namespace unmask
