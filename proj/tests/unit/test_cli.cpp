#include "doctest.h"

#include <filesystem>
#include <fstream>
#include <sstream>

#include "qlab/cli.hpp"
#include "qlab/report.hpp"

using namespace qlab;
namespace fs = std::filesystem;

namespace {

struct Run {
  int code;
  std::string out;
  std::string err;
};

Run run(std::vector<std::string> args) {
  std::ostringstream out, err;
  const int code = cli_main(args, out, err);
  return {code, out.str(), err.str()};
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

// A tiny model and a short run so the whole pipeline takes a few seconds.
struct Workspace {
  fs::path dir;
  fs::path config;

  Workspace() {
    dir = fs::temp_directory_path() / "qlab_cli";
    fs::remove_all(dir);
    fs::create_directories(dir);
    std::ofstream(dir / "corpus.txt") << synthesize_corpus(20000, 5);
    config = dir / "config.json";
    std::ofstream(config) << R"({
      "model": {"d_model": 16, "n_heads": 2, "n_blocks": 3, "d_ff": 32, "max_seq_len": 16},
      "pretrain": {"steps": 5, "batch_size": 4, "seq_len": 16},
      "quant": {"bits": 3, "group_size": 8},
      "optim": {"steps": 4, "batch_size": 4, "calib_samples": 8, "seq_len": 16},
      "data": {"corpus": "corpus.txt", "eval_windows": 8, "eval_seq_len": 16},
      "hessian": {"layers": ["blocks.1.attn_q", "blocks.2.mlp_up"], "rows": 1, "cols": 3, "samples": 2,
                  "seq_len": 8, "directions": 2},
      "seed": 3
    })";
  }

  std::string out(const std::string& name) const { return (dir / name).string(); }
};

const Workspace& workspace() {
  static const Workspace w;
  static const bool trained = [] {
    const auto r = run({"train", "--config", w.config.string(), "--out", w.out("train")});
    REQUIRE_MESSAGE(r.code == 0, r.err);
    return true;
  }();
  (void)trained;
  return w;
}

}  // namespace

TEST_CASE("usage errors exit with 1") {
  CHECK(run({}).code == kExitUsage);
  CHECK(run({"frobnicate"}).code == kExitUsage);
  const auto w = workspace();
  CHECK(run({"train", "--config", w.config.string(), "--bogus"}).code == kExitUsage);
  CHECK(run({"quantize", "--config", w.config.string(), "--strategy", "zz"}).code == kExitUsage);

  const auto missing = run({"train", "--config", w.out("nope.json")});
  CHECK(missing.code == kExitUsage);
  CHECK(missing.err.find("nope.json") != std::string::npos);

  const auto bad_key = run({"train", "--config", w.config.string(), "--set", "optim.leraning_rate=1"});
  CHECK(bad_key.code == kExitUsage);
  CHECK(bad_key.err.find("leraning_rate") != std::string::npos);
  CHECK(run({"--help"}).code == kExitOk);
}

TEST_CASE("runtime errors exit with 2") {
  const auto w = workspace();
  const auto r = run({"quantize", "--config", w.config.string(), "--model", w.out("absent.bqck"), "--out", w.out("x")});
  CHECK(r.code == kExitRuntime);
  CHECK(r.err.find("absent.bqck") != std::string::npos);
}

TEST_CASE("train writes its artifacts") {
  const auto w = workspace();
  for (const char* f : {"model.bqck", "train_loss.csv", "config.json"}) CHECK(fs::exists(w.dir / "train" / f));
}

TEST_CASE("SB, LA-1 and MB-1 write byte-identical checkpoints") {
  const auto w = workspace();
  const auto model = w.out("train/model.bqck");
  std::vector<std::string> dirs;
  for (const char* s : {"sb", "la", "mb"}) {
    const auto dir = w.out(std::string("q_") + s);
    const auto r = run({"quantize", "--config", w.config.string(), "--model", model, "--strategy", s, "--n", "1",
                        "--out", dir});
    REQUIRE_MESSAGE(r.code == 0, r.err);
    dirs.push_back(dir);
  }
  const auto sb = slurp(fs::path(dirs[0]) / "quantized.bqck");
  CHECK(!sb.empty());
  CHECK(slurp(fs::path(dirs[1]) / "quantized.bqck") == sb);
  CHECK(slurp(fs::path(dirs[2]) / "quantized.bqck") == sb);
  CHECK(fs::exists(fs::path(dirs[0]) / "windows" / "window_3.csv"));
  CHECK(fs::exists(fs::path(dirs[0]) / "run.json"));
}

TEST_CASE("repeated pipeline runs are byte-identical") {
  const auto w = workspace();
  const auto model = w.out("train/model.bqck");
  for (const char* d : {"rep_a", "rep_b"}) {
    const auto dir = w.out(d);
    REQUIRE(run({"quantize", "--config", w.config.string(), "--model", model, "--strategy", "la", "--n", "2", "--out",
                 dir})
                .code == 0);
    const auto e = run({"eval", "--config", w.config.string(), "--model", model, "--out", dir});
    REQUIRE_MESSAGE(e.code == 0, e.err);
  }
  for (const char* f : {"quantized.bqck", "report.csv", "report.json", "blocks.csv", "windows/window_2.csv"})
    CHECK_MESSAGE(slurp(w.dir / "rep_a" / f) == slurp(w.dir / "rep_b" / f), f);

  const auto rows = read_report_csv(w.dir / "rep_a" / "report.csv");
  REQUIRE(rows.size() == 3);
  CHECK(rows[0].strategy == "la");
  CHECK(rows[0].n == 2);
  CHECK(rows[0].seed == 3);
  CHECK(rows[0].seconds == 0.0);

  const auto agg = run({"report", w.out("rep_a"), w.out("rep_b"), "--out", w.out("agg")});
  REQUIRE_MESSAGE(agg.code == 0, agg.err);
  CHECK(fs::exists(w.dir / "agg" / "aggregate.csv"));
  CHECK(fs::exists(w.dir / "agg" / "report.csv"));
}

TEST_CASE("hessian subcommand") {
  const auto w = workspace();
  const auto r = run({"hessian", "--config", w.config.string(), "--model", w.out("train/model.bqck"), "--out",
                      w.out("hess")});
  REQUIRE_MESSAGE(r.code == 0, r.err);
  const auto doc = nlohmann::json::parse(slurp(w.dir / "hess" / "curvature.json"));
  CHECK(doc.contains("block_diag_error"));
}
