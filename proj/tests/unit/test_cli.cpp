#include "doctest.h"

#include <filesystem>
#include <fstream>
#include <sstream>

#include "commands.h"
#include "mdt/dataset.h"
#include "run_config.h"

using namespace mdt;
namespace fs = std::filesystem;

namespace {

struct Result {
  int code = 0;
  std::string out, err;
};

Result mdt_cli(const std::vector<std::string>& args) {
  std::ostringstream out, err;
  Result r;
  r.code = cli::run(args, out, err);
  r.out = out.str();
  r.err = err.str();
  return r;
}

fs::path scratch(const std::string& name) {
  fs::path p = fs::temp_directory_path() / ("mdt_test_cli_" + name);
  fs::remove_all(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::size_t line_count(const std::string& s) { return static_cast<std::size_t>(std::count(s.begin(), s.end(), '\n')); }

// Small model settings shared by the end-to-end cases.
const std::vector<std::string> kSmall = {"--set", "dim=8", "--set", "self_blocks=1", "--set", "bidirectional_blocks=1"};

std::vector<std::string> with(std::vector<std::string> a, const std::vector<std::string>& b) {
  a.insert(a.end(), b.begin(), b.end());
  return a;
}

}  // namespace

TEST_CASE("help output matches the stored snapshots") {
  for (const auto& [args, file] : std::vector<std::pair<std::vector<std::string>, std::string>>{
           {{"--help"}, "help_root.txt"},
           {{"gen-data", "--help"}, "help_gen_data.txt"},
           {{"train", "--help"}, "help_train.txt"},
           {{"eval", "--help"}, "help_eval.txt"},
           {{"ablate", "--help"}, "help_ablate.txt"},
           {{"viz", "--help"}, "help_viz.txt"}}) {
    const Result r = mdt_cli(args);
    CHECK(r.code == 0);
    CHECK(r.out == slurp(fs::path(MDT_TEST_DATA_DIR) / file));
  }
}

TEST_CASE("usage errors exit with code 2") {
  const fs::path dir = scratch("usage");
  CHECK(mdt_cli({}).code == 2);
  CHECK(mdt_cli({"frobnicate"}).code == 2);
  CHECK(mdt_cli({"gen-data", "--out", dir.string(), "--cross-modal-fraction", "1.5"}).code == 2);
  CHECK(mdt_cli({"gen-data", "--out", dir.string(), "--n", "abc"}).code == 2);
  const Result unknown = mdt_cli({"gen-data", "--out", dir.string(), "--set", "no_such_key=1"});
  CHECK(unknown.code == 2);
  CHECK(unknown.err.find("no_such_key") != std::string::npos);
  CHECK(mdt_cli({"gen-data", "--out", dir.string(), "--set", "noequals"}).code == 2);
  CHECK(mdt_cli({"gen-data", "--out", dir.string(), "--preset", "huge"}).code == 2);
  CHECK(mdt_cli({"train", "--data", dir.string(), "--model", "resnet"}).code == 2);
  CHECK_FALSE(fs::exists(dir / "manifest.jsonl"));
}

TEST_CASE("runtime failures exit with code 1") {
  const fs::path dir = scratch("runtime");
  const Result r = mdt_cli({"train", "--data", (dir / "absent").string(), "--out", (dir / "run").string()});
  CHECK(r.code == 1);
  CHECK(r.err.find("error") != std::string::npos);
}

TEST_CASE("config precedence: preset < file < --set < named flag") {
  const fs::path dir = scratch("precedence");
  fs::create_directories(dir);
  {
    std::ofstream cfg(dir / "run.txt");
    cfg << "# comment\nrecords = 50\nnoise=0.2\nseed=4\n";
  }
  const fs::path data = dir / "data";
  const Result r = mdt_cli({"gen-data", "--config", (dir / "run.txt").string(), "--set", "noise=0.1", "--set",
                            "records=60", "--n", "40", "--out", data.string()});
  REQUIRE(r.code == 0);
  const auto written = cli::read_config_file(data / "config.txt");
  std::map<std::string, std::string> kv(written.begin(), written.end());
  CHECK(kv.at("records") == "40");
  CHECK(kv.at("noise") == "0.1");
  CHECK(kv.at("seed") == "4");
  CHECK(kv.at("dim") == "16");
  CHECK(read_manifest(data, false).size() == 40);

  const cli::RunConfig paper = cli::RunConfig::resolve({{"preset", "paper"}}, {});
  CHECK(paper.size("dim") == 768);
  CHECK(paper.number("lr") == 3e-5);
  CHECK(paper.size("image_size") == 224);
  CHECK_THROWS_AS(cli::parse_config_text("a=1\nbroken line\n", "x.txt"), cli::UsageError);
}

TEST_CASE("gen-data is deterministic for a fixed seed") {
  const fs::path a = scratch("gen_a"), b = scratch("gen_b"), c = scratch("gen_c");
  REQUIRE(mdt_cli({"gen-data", "--out", a.string(), "--n", "50"}).code == 0);
  REQUIRE(mdt_cli({"gen-data", "--out", b.string(), "--n", "50"}).code == 0);
  REQUIRE(mdt_cli({"gen-data", "--out", c.string(), "--n", "50", "--seed", "2"}).code == 0);
  CHECK(sha256_file(a / "manifest.jsonl") == sha256_file(b / "manifest.jsonl"));
  CHECK(sha256_file(a / "manifest.jsonl") != sha256_file(c / "manifest.jsonl"));
  CHECK(fs::exists(a / "planted.json"));
  CHECK(fs::exists(a / "images" / "P00001.mimg"));
}

TEST_CASE("train, eval and viz end to end") {
  const fs::path root = scratch("e2e");
  const fs::path data = root / "data", run = root / "run";
  REQUIRE(mdt_cli({"gen-data", "--out", data.string(), "--n", "100"}).code == 0);
  const Result tr = mdt_cli(with({"train", "--data", data.string(), "--out", run.string(), "--set", "pooling=cls"},
                                 kSmall));
  REQUIRE(tr.code == 0);
  CHECK(line_count(slurp(run / "train_log.csv")) == 31);
  CHECK(tr.out.find("epoch 30 ") != std::string::npos);
  for (const char* f : {"config.txt", "checkpoint.mdtc", "lab_stats.json"}) CHECK(fs::exists(run / f));

  const Result ev = mdt_cli({"eval", "--out", run.string(), "--n-boot", "50"});
  REQUIRE(ev.code == 0);
  const std::string csv = slurp(run / "eval_test.csv");
  CHECK(csv.rfind("class,value,ci_lo,ci_hi\n", 0) == 0);
  CHECK(line_count(csv) == 1 + 3 + 1);
  CHECK(csv.find("\nmean,") != std::string::npos);
  CHECK(slurp(run / "eval_test.json").find("\"auroc\"") != std::string::npos);
  CHECK(fs::exists(run / "eval_test_config.txt"));
  // evaluation is reproducible
  REQUIRE(mdt_cli({"eval", "--out", run.string(), "--n-boot", "50"}).code == 0);
  CHECK(slurp(run / "eval_test.csv") == csv);

  const Result vz = mdt_cli({"viz", "--out", run.string(), "--case", "P00090", "--top-k", "2"});
  REQUIRE(vz.code == 0);
  const fs::path viz = run / "viz" / "P00090";
  for (const char* f : {"shares.csv", "lab_importance.csv", "word_importance.csv", "heatmap_rollout.mimg",
                        "heatmap_rollout.svg", "config.txt"}) {
    CHECK(fs::exists(viz / f));
  }
  std::size_t word_maps = 0;
  for (const auto& e : fs::directory_iterator(viz)) {
    const std::string name = e.path().filename().string();
    if (name.rfind("heatmap_word", 0) == 0 && e.path().extension() == ".svg") ++word_maps;
  }
  CHECK(word_maps == 2);
  CHECK(line_count(slurp(viz / "shares.csv")) == 5);

  CHECK(mdt_cli({"viz", "--out", run.string(), "--case", "NOPE"}).code == 2);
}

TEST_CASE("viz rejects models without a CLS token") {
  const fs::path root = scratch("nocls");
  const fs::path data = root / "data", run = root / "run";
  REQUIRE(mdt_cli({"gen-data", "--out", data.string(), "--n", "60"}).code == 0);
  REQUIRE(mdt_cli(with({"train", "--data", data.string(), "--out", run.string(), "--epochs", "1"}, kSmall)).code == 0);
  CHECK(mdt_cli({"viz", "--out", run.string()}).code == 2);
}

TEST_CASE("task 2 evaluation reports AUPRC") {
  const fs::path root = scratch("task2");
  const fs::path data = root / "data", run = root / "run";
  REQUIRE(mdt_cli({"gen-data", "--out", data.string(), "--n", "60", "--task", "2", "--set", "image_size=16", "--set",
                   "patch=4"})
              .code == 0);
  REQUIRE(mdt_cli(with({"train", "--data", data.string(), "--out", run.string(), "--task", "2", "--epochs", "2",
                        "--set", "image_size=16", "--set", "patch=4"},
                       kSmall))
              .code == 0);
  REQUIRE(mdt_cli({"eval", "--out", run.string(), "--n-boot", "20"}).code == 0);
  CHECK(slurp(run / "eval_test.json").find("\"auprc\"") != std::string::npos);
}

TEST_CASE("ablate writes one summary row per runnable ablation") {
  const fs::path root = scratch("ablate");
  const fs::path data = root / "data", out = root / "abl";
  REQUIRE(mdt_cli({"gen-data", "--out", data.string(), "--n", "150"}).code == 0);
  const Result r = mdt_cli(with({"ablate", "--data", data.string(), "--out", out.string(), "--epochs", "1", "--set",
                                 "n_boot=50"},
                                kSmall));
  REQUIRE(r.code == 0);
  // ha6 needs six blocks and the small model has two
  CHECK(r.err.find("skipping ha6") != std::string::npos);
  const std::string csv = slurp(out / "ablation.csv");
  CHECK(line_count(csv) == 1 + 7);
  CHECK(csv.find("\nno-image,auroc,") != std::string::npos);
  CHECK(fs::exists(out / "ha0" / "eval_test.csv"));
}
