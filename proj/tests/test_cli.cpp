#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "doctest.h"
#include "json.hpp"
#include "unmask/config.hpp"
#include "unmask/checkpoint.hpp"
#include "unmask/eval.hpp"
#include "unmask/png_io.hpp"

using namespace unmask;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct RunResult {
  int code = -1;
  std::string out, err;
};

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

bool contains(const std::string& hay, const std::string& needle) {
  return hay.find(needle) != std::string::npos;
}

fs::path fx_dir() {
  static const fs::path dir = [] {
    const fs::path d = fs::temp_directory_path() / "unmask-cli-fixture";
    fs::remove_all(d);
    fs::create_directories(d);
    return d;
  }();
  return dir;
}

RunResult run(const std::string& args) {
  static int counter = 0;
  const fs::path so = fx_dir() / ("out-" + std::to_string(counter) + ".log");
  const fs::path se = fx_dir() / ("err-" + std::to_string(counter) + ".log");
  ++counter;
  const std::string cmd =
      std::string(UNMASK_BIN) + " " + args + " >" + so.string() + " 2>" + se.string();
  const int raw = std::system(cmd.c_str());
  RunResult r;
  r.code = WIFEXITED(raw) ? WEXITSTATUS(raw) : -1;
  r.out = slurp(so);
  r.err = slurp(se);
  return r;
}

void must(const RunResult& r, const std::string& what) {
  if (r.code != 0)
    throw std::runtime_error("fixture step '" + what + "' failed (" + std::to_string(r.code) +
                             "): " + r.err);
}

std::string small_config(uint64_t seed, const std::string& extra = "") {
  std::ostringstream os;
  os << "image_size = 32\nnum_classes = 2\n"
     << "trunk_width = 8\ngm_head_width = 16\ninpaint_width = 8\n"
     << "disc_rf_width = 8\ncritic_width = 8\n"
     << "epochs = 2\nwarmup_epochs = 1\nbatch_size = 4\nlr = 1e-3\n"
     << "seed = " << seed << "\n"
     << extra;
  return os.str();
}

fs::path write_config(const std::string& name, const std::string& text) {
  const fs::path p = fx_dir() / name;
  std::ofstream(p, std::ios::trunc) << text;
  return p;
}

// Dataset, prior pool, two classifiers (training seed and a held-out seed),
// and one short boxes-prior training run, built once and shared.
struct Fixture {
  fs::path ds, pool, cfg, clf, clf_heldout, model;
};

const Fixture& fx() {
  static const Fixture f = [] {
    Fixture f;
    f.ds = fx_dir() / "ds";
    f.pool = fx_dir() / "pool";
    f.cfg = write_config("run.cfg", small_config(5));
    f.clf = fx_dir() / "clf.ckpt";
    f.clf_heldout = fx_dir() / "clf-heldout.ckpt";
    f.model = fx_dir() / "run-boxes";
    must(run("gen-data --out " + f.ds.string() + " --num 12 --classes 2 --size 32 --seed 7"
             " --val 4 --prior-pool-out " + f.pool.string() + " --pool-per-class 5"),
         "gen-data");
    must(run("pretrain --data " + f.ds.string() + " --config " + f.cfg.string() + " --out " +
             f.clf.string()),
         "pretrain");
    const fs::path cfg6 = write_config("run-s6.cfg", small_config(6));
    must(run("pretrain --data " + f.ds.string() + " --config " + cfg6.string() + " --out " +
             f.clf_heldout.string()),
         "pretrain held-out");
    must(run("train --data " + f.ds.string() + " --config " + f.cfg.string() +
             " --prior boxes --classifier " + f.clf.string() + " --out " + f.model.string()),
         "train");
    return f;
  }();
  return f;
}

std::vector<json> log_records(const fs::path& log) {
  std::vector<json> recs;
  std::ifstream in(log);
  std::string line;
  while (std::getline(in, line))
    if (!line.empty()) recs.push_back(json::parse(line));
  return recs;
}

}  // namespace

TEST_CASE("gen-data rejects bad arguments and guards existing output") {
  const std::string tail = " --num 4 --classes 2 --size 32 --seed 1";

  RunResult r = run("gen-data --out " + (fx_dir() / "g-k1").string() +
                    " --num 4 --classes 1 --size 32 --seed 1");
  CHECK(r.code == 2);
  CHECK(contains(r.err, "error"));

  r = run("gen-data --out " + (fx_dir() / "g-n0").string() +
          " --num 0 --classes 2 --size 32 --seed 1");
  CHECK(r.code == 2);
  CHECK(contains(r.err, "--num"));

  r = run("gen-data --out " + (fx_dir() / "g-s20").string() +
          " --num 4 --classes 2 --size 20 --seed 1");
  CHECK(r.code == 2);
  CHECK(contains(r.err, "--size"));

  r = run("gen-data --out " + fx().ds.string() + tail);
  CHECK(r.code == 2);
  CHECK(contains(r.err, "not empty"));

  const fs::path dirty = fx_dir() / "g-dirty";
  fs::create_directories(dirty);
  std::ofstream(dirty / "stale.txt") << "x";
  r = run("gen-data --out " + dirty.string() + tail + " --force --val 1");
  CHECK(r.code == 0);
  CHECK(!fs::exists(dirty / "stale.txt"));
  CHECK(fs::exists(dirty / "manifest.json"));

  r = run("gen-data --out " + (fx_dir() / "g-miss").string() + " --num 4 --classes 2 --size 32");
  CHECK(r.code == 2);
}

TEST_CASE("gen-data is deterministic for a fixed seed") {
  const std::string tail = " --num 6 --classes 2 --size 32 --val 2";
  const fs::path a = fx_dir() / "det-a", b = fx_dir() / "det-b", c = fx_dir() / "det-c";
  REQUIRE(run("gen-data --out " + a.string() + tail + " --seed 11").code == 0);
  REQUIRE(run("gen-data --out " + b.string() + tail + " --seed 11").code == 0);
  REQUIRE(run("gen-data --out " + c.string() + tail + " --seed 12").code == 0);

  CHECK(slurp(a / "manifest.json") == slurp(b / "manifest.json"));
  CHECK(slurp(a / "images" / "train000000.png") == slurp(b / "images" / "train000000.png"));
  CHECK(slurp(a / "manifest.json") != slurp(c / "manifest.json"));

  for (const char* cls : {"disc", "square"}) {
    int count = 0;
    for (const auto& e : fs::directory_iterator(fx().pool / cls)) {
      const Mask m = read_mask_png(e.path());
      CHECK(m.kind == MaskKind::Binary);
      CHECK(m.height() == 32);
      ++count;
    }
    CHECK(count == 5);
  }
}

TEST_CASE("pretrain writes a loadable stamped checkpoint") {
  const Checkpoint ck = load_checkpoint(fx().clf);
  CHECK(ck.run_id == "pretrain-s5");
  CHECK(ck.class_names == (std::vector<std::string>{"disc", "square"}));
  CHECK(!ck.build_id.empty());
  CHECK(!ck.tensors.empty());
  for (int c = 0; c < 3; ++c) CHECK(ck.stats.stddev[c] > 0.0f);
  const RunConfig echoed = parse_run_config(ck.config_echo);
  CHECK(echoed.train.epochs == 2);
  CHECK(echoed.train.seed == 5);

  const RunResult r = run("pretrain --data " + (fx_dir() / "nowhere").string() + " --config " +
                          fx().cfg.string() + " --out " + (fx_dir() / "x.ckpt").string());
  CHECK(r.code == 2);
  CHECK(contains(r.err, "error"));
}

TEST_CASE("train validates inputs and logs the configured prior") {
  RunResult r = run("train --data " + fx().ds.string() + " --config " + fx().cfg.string() +
                    " --prior boxes --classifier " + (fx_dir() / "ghost.ckpt").string() +
                    " --out " + (fx_dir() / "t-ghost").string());
  CHECK(r.code == 2);

  r = run("train --data " + fx().ds.string() + " --config " + fx().cfg.string() +
          " --prior sometimes --classifier " + fx().clf.string() + " --out " +
          (fx_dir() / "t-bad").string());
  CHECK(r.code == 2);
  CHECK(contains(r.err, "--prior"));

  const fs::path none_dir = fx_dir() / "t-none";
  r = run("train --data " + fx().ds.string() + " --config " + fx().cfg.string() +
          " --prior none --classifier " + fx().clf.string() + " --out " + none_dir.string());
  REQUIRE(r.code == 0);
  CHECK(contains(r.out, "ran 3 epochs"));

  auto prior_terms = [](const fs::path& log) {
    std::vector<double> vals;
    for (const auto& rec : log_records(log))
      if (rec.at("kind") == "step" && rec.at("phase") == "mask-gen")
        vals.push_back(rec.at("prior").get<double>());
    return vals;
  };
  const auto none_prior = prior_terms(none_dir / "train-log.jsonl");
  const auto boxes_prior = prior_terms(fx().model / "train-log.jsonl");
  REQUIRE(!none_prior.empty());
  REQUIRE(!boxes_prior.empty());
  for (double v : none_prior) CHECK(v == 0.0);
  bool any_nonzero = false;
  for (double v : boxes_prior) any_nonzero = any_nonzero || v != 0.0;
  CHECK(any_nonzero);

  const fs::path pool_dir = fx_dir() / "t-pool";
  r = run("train --data " + fx().ds.string() + " --config " + fx().cfg.string() +
          " --prior pool:" + fx().pool.string() + " --classifier " + fx().clf.string() +
          " --out " + pool_dir.string());
  REQUIRE(r.code == 0);
  const auto pool_prior = prior_terms(pool_dir / "train-log.jsonl");
  REQUIRE(!pool_prior.empty());
  CHECK(pool_prior != boxes_prior);
}

TEST_CASE("train resumes from existing checkpoints with a monotonic step counter") {
  const fs::path out = fx_dir() / "t-resume";
  const fs::path cfg_a = write_config("resume-a.cfg",
                                      "image_size = 32\nnum_classes = 2\n"
                                      "trunk_width = 8\ngm_head_width = 16\ninpaint_width = 8\n"
                                      "disc_rf_width = 8\ncritic_width = 8\n"
                                      "epochs = 1\nwarmup_epochs = 1\nbatch_size = 4\n"
                                      "lr = 1e-3\nseed = 9\n");
  const fs::path cfg_b = write_config("resume-b.cfg",
                                      "image_size = 32\nnum_classes = 2\n"
                                      "trunk_width = 8\ngm_head_width = 16\ninpaint_width = 8\n"
                                      "disc_rf_width = 8\ncritic_width = 8\n"
                                      "epochs = 2\nwarmup_epochs = 1\nbatch_size = 4\n"
                                      "lr = 1e-3\nseed = 9\n");
  const std::string common = " --data " + fx().ds.string() + " --prior boxes --classifier " +
                             fx().clf.string() + " --out " + out.string();

  RunResult r = run("train --config " + cfg_a.string() + common);
  REQUIRE(r.code == 0);
  CHECK(!contains(r.out, "resumed"));

  r = run("train --config " + cfg_b.string() + common);
  REQUIRE(r.code == 0);
  CHECK(contains(r.out, "resumed after epoch 1"));

  int prev = -1;
  int steps = 0;
  for (const auto& rec : log_records(out / "train-log.jsonl"))
    if (rec.at("kind") == "step") {
      const int s = rec.at("step").get<int>();
      CHECK(s == prev + 1);
      prev = s;
      ++steps;
    }
  CHECK(steps == 9);

  r = run("train --config " + cfg_b.string() + common);
  REQUIRE(r.code == 0);
  CHECK(contains(r.out, "resumed after epoch 2"));
  CHECK(contains(r.out, "ran 0 epochs"));
}

TEST_CASE("train surfaces numerical failures as exit 3") {
  const fs::path cfg_nan = write_config(
      "nan.cfg",
      "image_size = 32\nnum_classes = 2\n"
      "trunk_width = 8\ngm_head_width = 16\ninpaint_width = 8\n"
      "disc_rf_width = 8\ncritic_width = 8\n"
      "epochs = 2\nwarmup_epochs = 1\nbatch_size = 4\nlr = 1e20\nseed = 5\n");
  const fs::path out = fx_dir() / "t-nan";
  const RunResult r = run("train --data " + fx().ds.string() + " --config " + cfg_nan.string() +
                          " --prior boxes --classifier " + fx().clf.string() + " --out " +
                          out.string());
  CHECK(r.code == 3);
  CHECK(contains(r.err, "not finite"));
  CHECK(fs::exists(out / "nan-dump.json"));
}

TEST_CASE("edit is deterministic and validates the class name") {
  const std::string img = (fx().ds / "images" / "train000000.png").string();
  const fs::path e1 = fx_dir() / "e1.png", e2 = fx_dir() / "e2.png";
  const fs::path m1 = fx_dir() / "m1.png", m2 = fx_dir() / "m2.png";
  const std::string base = "edit --model " + fx().model.string() + " --input " + img;

  REQUIRE(run(base + " --class disc --out " + e1.string() + " --dump-mask " + m1.string()).code ==
          0);
  REQUIRE(run(base + " --class disc --out " + e2.string() + " --dump-mask " + m2.string()).code ==
          0);
  CHECK(slurp(e1) == slurp(e2));
  CHECK(slurp(m1) == slurp(m2));
  CHECK(read_mask_png(m1).kind == MaskKind::Binary);
  const Image edited = read_image_png(e1);
  CHECK(edited.height() == 32);

  RunResult r = run(base + " --class banana --out " + (fx_dir() / "e-bad.png").string());
  CHECK(r.code == 2);
  CHECK(contains(r.err, "disc"));
  CHECK(contains(r.err, "square"));

  const fs::path soft = fx_dir() / "m-soft.png";
  r = run(base + " --class disc --soft --out " + (fx_dir() / "e-soft.png").string() +
          " --dump-mask " + soft.string());
  REQUIRE(r.code == 0);
  const Image soft_img = read_image_png(soft);
  CHECK(soft_img.height() == 32);

  const fs::path big = fx_dir() / "big.png";
  write_image_png(resize_bilinear(read_image_png(img), 48, 48), big);
  r = run("edit --model " + fx().model.string() + " --input " + big.string() +
          " --class disc --out " + (fx_dir() / "e-big.png").string());
  CHECK(r.code == 0);
  CHECK(contains(r.err, "resizing"));

  r = run(base + " --class disc --out " + (fx_dir() / "e-clf.png").string() + " --classifier " +
          fx().clf_heldout.string());
  REQUIRE(r.code == 0);
  CHECK(contains(r.out, "before"));
  CHECK(contains(r.out, "after"));

  r = run("edit --model " + (fx_dir() / "no-model").string() + " --input " + img +
          " --class disc --out " + (fx_dir() / "e-none.png").string());
  CHECK(r.code == 2);
}

TEST_CASE("eval rejects the training classifier and writes a valid report") {
  const fs::path report = fx_dir() / "report.json";
  RunResult r = run("eval --model " + fx().model.string() + " --data " + fx().ds.string() +
                    " --classifier " + fx().clf.string() + " --report " + report.string());
  CHECK(r.code == 2);
  CHECK(contains(r.err, "held-out"));

  r = run("eval --model " + fx().model.string() + " --data " + fx().ds.string() +
          " --classifier " + fx().clf_heldout.string() + " --report " + report.string());
  REQUIRE(r.code == 0);
  CHECK(contains(r.out, "removal%"));
  CHECK(contains(r.out, "area%"));

  const std::string text = slurp(report);
  const MetricsReport rep = report_from_json(text);
  CHECK(rep.samples > 0);
  const json j = json::parse(text);
  RunResult ver = run("--version");
  std::string build = ver.out;
  while (!build.empty() && (build.back() == '\n' || build.back() == '\r')) build.pop_back();
  CHECK(j.at("build_id").get<std::string>() == build);

  const fs::path empty_ds = fx_dir() / "ds-noval";
  REQUIRE(run("gen-data --out " + empty_ds.string() +
              " --num 6 --classes 2 --size 32 --seed 21 --val 0")
              .code == 0);
  const fs::path empty_report = fx_dir() / "report-empty.json";
  r = run("eval --model " + fx().model.string() + " --data " + empty_ds.string() +
          " --classifier " + fx().clf_heldout.string() + " --report " + empty_report.string());
  CHECK(r.code == 0);
  CHECK(report_from_json(slurp(empty_report)).samples == 0);
}
