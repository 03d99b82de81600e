// Process-level tests against the felrec binary (path in FELREC_BIN).
#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

namespace fs = std::filesystem;

namespace {

std::string binary() {
  const char* bin = std::getenv("FELREC_BIN");
  REQUIRE_MESSAGE(bin != nullptr, "FELREC_BIN must point at the felrec binary");
  return bin;
}

struct RunResult {
  int exit_code;
  std::string out;
};

RunResult run(const std::string& args) {
  const std::string out_file = (fs::temp_directory_path() / "felrec_cli_out.txt").string();
  const std::string cmd = binary() + " " + args + " > " + out_file + " 2>&1";
  const int raw = std::system(cmd.c_str());
  std::ifstream in(out_file);
  std::stringstream ss;
  ss << in.rdbuf();
  return {WEXITSTATUS(raw), ss.str()};
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

struct TempDir {
  fs::path path;
  explicit TempDir(const char* name) : path(fs::temp_directory_path() / name) {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
  std::string operator/(const char* p) const { return (path / p).string(); }
};

std::int64_t param_total(const std::string& table) {
  std::istringstream in(table);
  std::string line;
  while (std::getline(in, line))
    if (line.rfind("total\t", 0) == 0) return std::stoll(line.substr(6));
  return -1;
}

}  // namespace

TEST_CASE("params: defaults and ablation deltas") {
  auto q = run("params");
  REQUIRE(q.exit_code == 0);
  const auto q_total = param_total(q.out);
  CHECK(q_total == 480768);

  auto p = run("params --variant p");
  REQUIRE(p.exit_code == 0);
  CHECK(param_total(p.out) == 581376);

  auto no_type = run("params --no-type");
  CHECK(q_total - param_total(no_type.out) == 256);

  auto share = run("params --share-mlp");
  CHECK(q_total - param_total(share.out) == 33280);

  auto ln = run("params --norm layer");
  CHECK(param_total(ln.out) == q_total);
}

TEST_CASE("exit codes: usage, data, numeric") {
  CHECK(run("definitely-not-a-command").exit_code == 1);
  CHECK(run("prepare --input /nonexistent.tsv --out /tmp/felrec_cli_x").exit_code == 2);
  CHECK(run("params --dim 30 --heads 4").exit_code == 3);  // dim not divisible by heads
}

TEST_CASE("prepare is deterministic and byte-identical across runs") {
  TempDir work("felrec_cli_prep");
  {
    std::ofstream fixture(work / "in.tsv");
    fixture << "u1\ti1\t1\nu2\ti1\t2\nu1\ti2\t3\nu3\ti2\t4\nu2\ti3\t5\n"
               "u1\ti3\t6\nu4\ti1\t7\nu2\ti2\t8\nu5\ti4\t9\nu1\ti5\t10\n";
  }
  REQUIRE(run("prepare --input " + (work / "in.tsv") + " --format canonical --out " +
              (work / "a")).exit_code == 0);
  REQUIRE(run("prepare --input " + (work / "in.tsv") + " --format canonical --out " +
              (work / "b")).exit_code == 0);
  for (const char* f : {"train.tsv", "val.tsv", "test.tsv", "vocab_users.tsv", "vocab_items.tsv",
                        "labels.tsv", "stats.txt"}) {
    CAPTURE(f);
    CHECK(slurp(fs::path(work / "a") / f) == slurp(fs::path(work / "b") / f));
  }
  CHECK(slurp(fs::path(work / "a") / "stats.txt").find("interactions=10") != std::string::npos);
}

TEST_CASE("synth -> prepare -> train -> eval -> export round trip") {
  TempDir work("felrec_cli_e2e");
  REQUIRE(run("synth --interactions 600 --users 50 --items 25 --clusters 5 --seed 3 --out " +
              (work / "stream.tsv")).exit_code == 0);
  REQUIRE(run("prepare --input " + (work / "stream.tsv") + " --format canonical --out " +
              (work / "data")).exit_code == 0);

  const std::string train_flags =
      " --dim 16 --ff-dim 32 --layers 1 --heads 2 --max-seq-len 8 --queue-size 64"
      " --epochs 2 --warmup-epochs 1 --batch-size 128 --seed 5";
  REQUIRE(run("train --data " + (work / "data") + " --out " + (work / "run1") + train_flags)
              .exit_code == 0);
  CHECK(fs::exists(fs::path(work / "run1") / "checkpoint.felrec"));
  CHECK(fs::exists(fs::path(work / "run1") / "curve.csv"));
  CHECK(fs::exists(fs::path(work / "run1") / "config.cfg"));

  // The resolved config reproduces the run bit for bit.
  REQUIRE(run("train --data " + (work / "data") + " --out " + (work / "run2") + " --config " +
              (work / "run1") + "/config.cfg").exit_code == 0);
  CHECK(slurp(fs::path(work / "run1") / "checkpoint.felrec") ==
        slurp(fs::path(work / "run2") / "checkpoint.felrec"));
  CHECK(slurp(fs::path(work / "run1") / "config.cfg") ==
        slurp(fs::path(work / "run2") / "config.cfg"));

  for (const char* mode : {"continue", "reset", "zero-shot"}) {
    CAPTURE(mode);
    REQUIRE(run("eval --checkpoint " + (work / "run1") + "/checkpoint.felrec --data " +
                (work / "data") + " --mode " + mode + " --seed 11 --trace --out " + (work / "ev"))
                .exit_code == 0);
    CHECK(fs::exists(fs::path(work / "ev") / "report.csv"));
    CHECK(fs::exists(fs::path(work / "ev") / "popularity.csv"));
    CHECK(fs::exists(fs::path(work / "ev") / "trace.csv"));
  }

  // Nearest-neighbor scoring flag runs end to end.
  REQUIRE(run("eval --checkpoint " + (work / "run1") + "/checkpoint.felrec --data " +
              (work / "data") + " --mode continue --nn --out " + (work / "evnn")).exit_code == 0);

  REQUIRE(run("export --checkpoint " + (work / "run1") + "/checkpoint.felrec --what cache --out " +
              (work / "cache.tsv")).exit_code == 0);
  const std::string cache_tsv = slurp(work / "cache.tsv");
  CHECK(cache_tsv.rfind("kind\tid", 0) == 0);
  CHECK(std::count(cache_tsv.begin(), cache_tsv.end(), '\n') > 1);

  REQUIRE(run("export --checkpoint " + (work / "run1") + "/checkpoint.felrec --what curves --out " +
              (work / "curves.csv")).exit_code == 0);
  CHECK(slurp(work / "curves.csv").rfind("epoch,train_loss,val_rank", 0) == 0);

  // A missing checkpoint is a data error.
  CHECK(run("eval --checkpoint " + (work / "nope.felrec") + " --data " + (work / "data") +
            " --mode continue --out " + (work / "evx")).exit_code == 2);
}

TEST_CASE("zero-shot accepts a dataset disjoint from the training one") {
  TempDir work("felrec_cli_zero");
  REQUIRE(run("synth --interactions 400 --users 40 --items 20 --clusters 4 --seed 5 --out " +
              (work / "a.tsv")).exit_code == 0);
  REQUIRE(run("synth --interactions 400 --users 40 --items 20 --clusters 4 --seed 9 "
              "--id-offset 1000000 --out " + (work / "b.tsv")).exit_code == 0);
  REQUIRE(run("prepare --input " + (work / "a.tsv") + " --out " + (work / "da")).exit_code == 0);
  REQUIRE(run("prepare --input " + (work / "b.tsv") + " --out " + (work / "db")).exit_code == 0);
  REQUIRE(run("train --data " + (work / "da") + " --out " + (work / "run") +
              " --dim 16 --ff-dim 32 --layers 1 --heads 2 --max-seq-len 8 --queue-size 64"
              " --epochs 1 --warmup-epochs 0 --batch-size 128 --seed 5").exit_code == 0);
  REQUIRE(run("eval --checkpoint " + (work / "run") + "/checkpoint.felrec --data " + (work / "db") +
              " --mode zero-shot --out " + (work / "ev")).exit_code == 0);
  CHECK(slurp(fs::path(work / "ev") / "report.csv").find("total,") != std::string::npos);
}

TEST_CASE("FELREC_SEED environment fallback feeds the seed option") {
  TempDir work("felrec_cli_seed");
  REQUIRE(run("synth --interactions 200 --users 20 --items 10 --clusters 2 --out " +
              (work / "s1.tsv")).exit_code == 0);  // seed from env below? no env here: default
  const std::string with_env = "FELREC_SEED=777 " + binary() + " synth --interactions 200 "
                               "--users 20 --items 10 --clusters 2 --out " + (work / "s2.tsv");
  REQUIRE(std::system(with_env.c_str()) == 0);
  const std::string explicit_seed = binary() + " synth --interactions 200 --users 20 --items 10 "
                                    "--clusters 2 --seed 777 --out " + (work / "s3.tsv");
  REQUIRE(std::system(explicit_seed.c_str()) == 0);
  CHECK(slurp(work / "s2.tsv") == slurp(work / "s3.tsv"));
  CHECK(slurp(work / "s1.tsv") != slurp(work / "s2.tsv"));
}
