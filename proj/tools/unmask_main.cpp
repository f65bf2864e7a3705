#include <cstdlib>
#include <string>

#include "CLI11.hpp"
#include "unmask/commands.hpp"
#include "unmask/version.hpp"

extern "C" void openblas_set_num_threads(int);

namespace {

void cap_threads() {
  const char* env = std::getenv("UNMASK_NUM_THREADS");
  if (!env || !*env) return;
  const int n = std::atoi(env);
  if (n > 0) openblas_set_num_threads(n);
}

}  // namespace

int main(int argc, char** argv) {
  cap_threads();

  CLI::App app{"weakly supervised object removal toolkit"};
  app.set_version_flag("--version", std::string(unmask::kBuildId));
  app.require_subcommand(1);
  int rc = unmask::kExitOk;

  unmask::GenDataArgs gd;
  auto* gen = app.add_subcommand("gen-data", "generate a synthetic shapes dataset");
  gen->add_option("--out", gd.out, "dataset directory")->required();
  gen->add_option("--num", gd.num, "training images")->required();
  gen->add_option("--classes", gd.classes, "number of object classes")->required();
  gen->add_option("--size", gd.size, "image side length")->required();
  gen->add_option("--seed", gd.seed, "generator seed")->required();
  gen->add_option("--val", gd.val, "validation images (default num/5)");
  gen->add_option("--prior-pool-out", gd.prior_pool_out, "also write an unpaired mask pool here");
  gen->add_option("--pool-per-class", gd.pool_per_class, "masks per class in the pool");
  gen->add_flag("--force", gd.force, "replace a non-empty output directory");
  gen->callback([&] { rc = unmask::cmd_gen_data(gd); });

  unmask::PretrainArgs pt;
  auto* pre = app.add_subcommand("pretrain", "train the weak-label object classifier");
  pre->add_option("--data", pt.data, "dataset directory")->required();
  pre->add_option("--config", pt.config, "run config file")->required();
  pre->add_option("--out", pt.out, "checkpoint path to write")->required();
  pre->callback([&] { rc = unmask::cmd_pretrain(pt); });

  unmask::TrainArgs tr;
  auto* train = app.add_subcommand("train", "train the mask generator and in-painter");
  train->add_option("--data", tr.data, "dataset directory")->required();
  train->add_option("--config", tr.config, "run config file")->required();
  train->add_option("--prior", tr.prior, "mask prior: none, boxes, or pool:DIR")->required();
  train->add_option("--classifier", tr.classifier, "pretrained classifier checkpoint")->required();
  train->add_option("--out", tr.out, "output directory for checkpoints and logs")->required();
  train->callback([&] { rc = unmask::cmd_train(tr); });

  unmask::EditArgs ed;
  auto* edit = app.add_subcommand("edit", "remove one class from one image");
  edit->add_option("--model", ed.model, "training output directory or checkpoint directory")
      ->required();
  edit->add_option("--input", ed.input, "input PNG")->required();
  edit->add_option("--class", ed.class_name, "class to remove")->required();
  edit->add_option("--out", ed.out, "output PNG")->required();
  edit->add_option("--dump-mask", ed.dump_mask, "also write the predicted mask here");
  edit->add_option("--classifier", ed.classifier, "score the edit with this classifier");
  edit->add_flag("--soft", ed.soft, "keep the mask soft instead of binarizing");
  edit->callback([&] { rc = unmask::cmd_edit(ed); });

  unmask::EvalArgs ev;
  auto* eval = app.add_subcommand("eval", "run the metric suite on a dataset's validation split");
  eval->add_option("--model", ev.model, "training output directory or checkpoint directory")
      ->required();
  eval->add_option("--data", ev.data, "dataset directory")->required();
  eval->add_option("--classifier", ev.classifier, "held-out classifier checkpoint")->required();
  eval->add_option("--report", ev.report, "metrics report JSON to write")->required();
  eval->callback([&] { rc = unmask::cmd_eval(ev); });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? unmask::kExitOk : unmask::kExitUsage;
  }
  return rc;
}
