#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <filesystem>
#include <fstream>
#include <map>
#include <vector>

#include "mclfir/cli.hpp"
#include "mclfir/dataset.hpp"
#include "mclfir/evaluate.hpp"
#include "mclfir/image.hpp"
#include "testutil.hpp"

namespace fs = std::filesystem;
using namespace mclfir;
using testutil::TempDir;

namespace {

int run_cli(std::vector<std::string> args) { return cli::run(std::move(args)); }

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  REQUIRE(in);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

// Byte map of every regular file under a directory, keyed by relative path.
std::map<std::string, std::string> dir_digest(const fs::path& root) {
  std::map<std::string, std::string> out;
  for (const auto& entry : fs::recursive_directory_iterator(root))
    if (entry.is_regular_file())
      out[fs::relative(entry.path(), root).string()] = slurp(entry.path());
  return out;
}

void make_tiny_data(const std::string& out, uint64_t seed = 0) {
  REQUIRE(run_cli({"gen-data", "--out", out, "--attrs", "2", "--subclasses", "2",
                   "--per-subclass", "4", "--image-size", "16", "--seed",
                   std::to_string(seed)}) == 0);
}

}  // namespace

TEST_CASE("gen-data writes a reloadable dataset with the expected count") {
  TempDir dir("cli_gen");
  const std::string out = (dir.path() / "data").string();
  REQUIRE(run_cli({"gen-data", "--out", out, "--attrs", "4", "--subclasses", "4",
                   "--per-subclass", "50", "--image-size", "16", "--seed", "3"}) == 0);
  const auto ds = data::load_manifest(out + "/manifest.jsonl");
  CHECK(ds.items.size() == 800);  // 4 attributes x 4 subclasses x 50
  CHECK(ds.attributes.size() == 4);
  for (const auto& item : ds.items) CHECK(item.labels.size() == 4);
}

TEST_CASE("gen-data is reproducible byte for byte") {
  TempDir dir("cli_gen_det");
  const std::string a = (dir.path() / "a").string();
  const std::string b = (dir.path() / "b").string();
  make_tiny_data(a, 9);
  make_tiny_data(b, 9);
  CHECK(dir_digest(a) == dir_digest(b));

  const std::string c = (dir.path() / "c").string();
  make_tiny_data(c, 10);
  CHECK(dir_digest(a) != dir_digest(c));
}

TEST_CASE("train writes a complete run directory") {
  TempDir dir("cli_train");
  const std::string dataset = (dir.path() / "data").string();
  make_tiny_data(dataset);
  const std::string run = (dir.path() / "run").string();
  REQUIRE(run_cli({"train", "--data", dataset, "--out", run, "--method", "mclfir",
                   "--epochs", "1", "--doublets", "12", "--batch", "4", "--seed", "1"}) == 0);
  CHECK(fs::exists(fs::path(run) / "config.txt"));
  CHECK(fs::exists(fs::path(run) / "loss.csv"));
  CHECK(fs::exists(fs::path(run) / "history.json"));
  CHECK(fs::exists(fs::path(run) / "task_0.ckpt"));
  CHECK(fs::exists(fs::path(run) / "task_1.ckpt"));
  CHECK(fs::exists(fs::path(run) / "final.ckpt"));

  // Loss CSV carries one labeled row per optimizer step: 2 tasks x 3 steps.
  const std::string csv = slurp(fs::path(run) / "loss.csv");
  CHECK(csv.rfind("step,task,l_ins,l_kd,total\n", 0) == 0);
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 7);

  // Paper-scale hyperparameters are accepted as flags.
  const std::string run2 = (dir.path() / "run_paper").string();
  CHECK(run_cli({"train", "--data", dataset, "--out", run2, "--method", "mclfir", "--epochs",
                 "1", "--doublets", "8", "--batch", "32", "--lambda", "0.0001", "--beta",
                 "0.999", "--tau", "0.3", "--seed", "2"}) == 0);

  // Refusing to clobber an existing run.
  CHECK(run_cli({"train", "--data", dataset, "--out", run, "--epochs", "1", "--doublets", "8",
                 "--seed", "1"}) != 0);
}

TEST_CASE("identical train invocations produce identical loss traces") {
  TempDir dir("cli_det");
  const std::string dataset = (dir.path() / "data").string();
  make_tiny_data(dataset);
  const std::string r1 = (dir.path() / "r1").string();
  const std::string r2 = (dir.path() / "r2").string();
  const std::vector<std::string> base = {"train",      "--data",   dataset, "--method", "er",
                                         "--epochs",   "2",        "--doublets", "10",
                                         "--batch",    "4",        "--seed",     "7"};
  auto args1 = base;
  args1.push_back("--out");
  args1.push_back(r1);
  auto args2 = base;
  args2.push_back("--out");
  args2.push_back(r2);
  REQUIRE(run_cli(args1) == 0);
  REQUIRE(run_cli(args2) == 0);
  CHECK(slurp(fs::path(r1) / "loss.csv") == slurp(fs::path(r2) / "loss.csv"));
}

TEST_CASE("eval emits a parseable report with A equal to B for one task") {
  TempDir dir("cli_eval");
  const std::string dataset = (dir.path() / "data").string();
  make_tiny_data(dataset);
  const std::string run = (dir.path() / "run").string();
  REQUIRE(run_cli({"train", "--data", dataset, "--out", run, "--order", "body-length",
                   "--epochs", "1", "--doublets", "8", "--batch", "4", "--seed", "4"}) == 0);
  REQUIRE(run_cli({"eval", "--run", run, "--data", dataset, "--export-attention",
                   "item-00000"}) == 0);

  const auto report = eval::read_report_csv(run + "/report.csv");
  REQUIRE(report.rows.size() == 1);
  CHECK(report.rows[0].attribute == "body-length");
  CHECK(report.rows[0].a_map == doctest::Approx(report.rows[0].b_map));

  const std::string table = slurp(fs::path(run) / "report.txt");
  CHECK(table.find(",(") != std::string::npos);

  CHECK(fs::exists(fs::path(run) / "attn_item-00000_body-length.png"));
  CHECK(fs::exists(fs::path(run) / "attn_item-00000_body-length.png.txt"));

  // Missing snapshots and bad runs fail loudly.
  CHECK(run_cli({"eval", "--run", (dir.path() / "nope").string(), "--data", dataset}) != 0);
}

TEST_CASE("compare summarizes runs and renders a decodable plot") {
  TempDir dir("cli_cmp");
  const std::string dataset = (dir.path() / "data").string();
  make_tiny_data(dataset);
  const std::string r1 = (dir.path() / "mcl").string();
  const std::string r2 = (dir.path() / "mh").string();
  REQUIRE(run_cli({"train", "--data", dataset, "--out", r1, "--method", "mclfir", "--epochs",
                   "1", "--doublets", "8", "--batch", "4", "--seed", "5"}) == 0);
  REQUIRE(run_cli({"train", "--data", dataset, "--out", r2, "--method", "multihead",
                   "--epochs", "1", "--doublets", "8", "--batch", "4", "--seed", "5"}) == 0);
  const std::string cmp = (dir.path() / "cmp").string();
  REQUIRE(run_cli({"compare", "--runs", r1, r2, "--data", dataset, "--out", cmp}) == 0);

  const std::string csv = slurp(fs::path(cmp) / "comparison.csv");
  CHECK(csv.rfind("run,method,images_per_step,mean_B,mean_A,mean_forgetting\n", 0) == 0);
  CHECK(csv.find(",mclfir,8,") != std::string::npos);    // 2B with B=4
  CHECK(csv.find(",multihead,12,") != std::string::npos);  // 3B with B=4

  const Image plot = read_png((fs::path(cmp) / "comparison.png").string());
  CHECK(plot.height > 0);
  CHECK(plot.width > 0);

  CHECK(run_cli({"compare", "--runs", r1, "--out", cmp}) != 0);  // needs two runs
}

TEST_CASE("documented error cases exit nonzero") {
  TempDir dir("cli_err");
  CHECK(run_cli({"train", "--data", (dir.path() / "missing").string(), "--out",
                 (dir.path() / "r").string(), "--method", "mclfir"}) != 0);
  const std::string dataset = (dir.path() / "data").string();
  make_tiny_data(dataset);
  CHECK(run_cli({"train", "--data", dataset, "--out", (dir.path() / "r2").string(),
                 "--method", "bogus"}) != 0);
  CHECK(run_cli({"no-such-command"}) != 0);
  CHECK(run_cli({}) != 0);
  // No --out and no MCLFIR_OUT_ROOT.
  unsetenv("MCLFIR_OUT_ROOT");
  CHECK(run_cli({"train", "--data", dataset, "--epochs", "1", "--doublets", "4"}) != 0);
}

TEST_CASE("train resolves the output directory from the environment root") {
  TempDir dir("cli_env");
  const std::string dataset = (dir.path() / "data").string();
  make_tiny_data(dataset);
  setenv("MCLFIR_OUT_ROOT", (dir.path() / "runs").string().c_str(), 1);
  REQUIRE(run_cli({"train", "--data", dataset, "--method", "multihead", "--epochs", "1",
                   "--doublets", "6", "--batch", "3", "--seed", "12"}) == 0);
  CHECK(fs::exists(dir.path() / "runs" / "multihead-s12" / "loss.csv"));
  unsetenv("MCLFIR_OUT_ROOT");
}
