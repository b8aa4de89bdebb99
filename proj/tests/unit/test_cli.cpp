#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "hulm/error.hpp"
#include "hulm_cli/cli.hpp"
#include "hulm_cli/run_config.hpp"

namespace fs = std::filesystem;
using namespace hulm;
using namespace hulm::cli;

namespace {

struct Run {
  int code;
  std::string out;
  std::string err;
};

Run hulm_run(std::vector<std::string> args) {
  args.insert(args.begin(), "hulm");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  const int code = run(static_cast<int>(argv.size()), argv.data(), out, err);
  return {code, out.str(), err.str()};
}

fs::path scratch(const std::string& name) {
  const auto p = fs::temp_directory_path() / ("hulm_cli_test_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write(const fs::path& p, const std::string& text) { std::ofstream(p) << text; }

}  // namespace

TEST_CASE("resolve_config") {
  const auto dir = scratch("config");
  SUBCASE("defaults") {
    const auto c = resolve_config("pretrain", std::nullopt, {});
    CHECK(c.values() == default_values("pretrain"));
    CHECK(c.real("train.lr") == 3e-4);
  }
  SUBCASE("flags beat the file") {
    write(dir / "a.ini", "[train]\nlr = 1e-6\nepochs = 3  # comment\n");
    const auto c = resolve_config("pretrain", dir / "a.ini", {{"train.lr", "3e-4"}});
    CHECK(c.real("train.lr") == 3e-4);
    CHECK(c.count("train.epochs") == 3);
  }
  SUBCASE("unknown keys are named") {
    write(dir / "b.ini", "[train]\nbatchsize = 4\n");
    CHECK_THROWS_WITH_AS(resolve_config("pretrain", dir / "b.ini", {}), doctest::Contains("batchsize"), ConfigError);
    CHECK_THROWS_WITH_AS(resolve_config("pretrain", std::nullopt, {{"batchsize", "4"}}),
                         doctest::Contains("batchsize"), ConfigError);
  }
  SUBCASE("typed access") {
    const auto c = resolve_config("probe", std::nullopt, {{"train.epochs", "x"}});
    CHECK_THROWS_AS(c.count("train.epochs"), ConfigError);
    CHECK(c.real("train.lr") == 1e-2);
  }
}

TEST_CASE("usage errors exit 1") {
  CHECK(hulm_run({}).code == 1);
  CHECK(hulm_run({"frobnicate"}).code == 1);
  const auto dir = scratch("usage");
  CHECK(hulm_run({"synth", "--out", dir.string(), "--bogus", "1"}).code == 1);
  CHECK(hulm_run({"synth", "--out", dir.string(), "--set", "synth.nope=1"}).code == 1);
  CHECK(hulm_run({"synth", "--out", dir.string(), "--style-strength", "2"}).code == 1);
  CHECK(hulm_run({"synth", "--help"}).code == 0);
}

TEST_CASE("synth is deterministic") {
  const auto a = scratch("synth_a");
  const auto b = scratch("synth_b");
  for (const auto& d : {a, b}) {
    REQUIRE(hulm_run({"synth", "--seed", "7", "--n-authors", "5", "--out", d.string()}).code == 0);
  }
  CHECK(slurp(a / "corpus.jsonl") == slurp(b / "corpus.jsonl"));
  CHECK(!slurp(a / "corpus.jsonl").empty());
  CHECK(fs::exists(a / "resolved_config.json"));
  CHECK(fs::exists(a / "run_log.jsonl"));
}

TEST_CASE("evaluate validates lengths") {
  const auto dir = scratch("eval");
  write(dir / "p.jsonl", "{\"label\": 1, \"prediction\": 1}\n{\"label\": 0, \"prediction\": 1}\n");
  write(dir / "q.jsonl", "{\"label\": 1, \"prediction\": 1}\n{\"label\": 0, \"prediction\": 0}\n");
  write(dir / "labels.jsonl", "{\"label\": 1}\n");
  CHECK(hulm_run({"evaluate", "--predictions", (dir / "p.jsonl").string(), "--labels", (dir / "labels.jsonl").string(),
                  "--out", (dir / "o1").string()})
            .code == 2);
  const auto ok = hulm_run({"evaluate", "--predictions", "p=" + (dir / "p.jsonl").string() + ",q=" + (dir / "q.jsonl").string(),
                            "--baseline", "p", "--out", (dir / "o2").string()});
  CHECK(ok.code == 0);
  CHECK(fs::exists(dir / "o2" / "report.json"));
  CHECK(ok.out.find("q") != std::string::npos);
  CHECK(hulm_run({"evaluate", "--predictions", (dir / "missing.jsonl").string(), "--out", (dir / "o3").string()}).code == 2);
}

TEST_CASE("build-corpus") {
  const auto dir = scratch("build");
  write(dir / "raw.jsonl",
        "{\"author_id\": \"u1\", \"text\": \"I think that the weather is nice and it was good\", \"created_at\": \"2020-01-01\"}\n"
        "not json\n"
        "{\"author_id\": \"u1\", \"text\": \"mail me at a@b.com because it is the best\", \"created_at\": \"2020-01-02\"}\n");
  const auto r = hulm_run({"build-corpus", "--input", (dir / "raw.jsonl").string(), "--out", (dir / "o").string()});
  REQUIRE(r.code == 0);
  const auto streams = slurp(dir / "o" / "streams.jsonl");
  CHECK(streams.find("a@b.com") == std::string::npos);
  CHECK(slurp(dir / "o" / "pipeline_report.json").find("\"rejected_lines\"") != std::string::npos);
}

TEST_CASE("end to end with a tiny model") {
  const auto dir = scratch("e2e");
  const auto s = (dir / "synth").string();
  const auto t = (dir / "synth_test").string();
  REQUIRE(hulm_run({"synth", "--n-authors", "6", "--docs-per-author", "4", "--out", s}).code == 0);
  REQUIRE(hulm_run({"synth", "--seed", "9", "--n-authors", "4", "--docs-per-author", "4", "--out", t}).code == 0);
  const std::vector<std::string> model{"--d-model", "8", "--n-heads", "2", "--d-ff", "16", "--n-layers", "1",
                                       "--max-positions", "512"};
  auto pre = std::vector<std::string>{"pretrain", "--train", s + "/corpus.jsonl", "--dev", t + "/corpus.jsonl",
                                      "--epochs", "1", "--trainable", "full", "--lr", "1e-3",
                                      "--out", (dir / "pre").string()};
  pre.insert(pre.end(), model.begin(), model.end());
  REQUIRE(hulm_run(pre).code == 0);
  const auto ck = (dir / "pre" / "checkpoint.bin").string();
  CHECK(fs::exists(ck));

  // Re-running from the recorded config reproduces the checkpoint.
  REQUIRE(hulm_run({"pretrain", "--config", (dir / "pre" / "resolved_config.json").string(), "--out",
                    (dir / "pre2").string()})
              .code == 0);
  CHECK(slurp(dir / "pre" / "checkpoint.bin") == slurp(dir / "pre2" / "checkpoint.bin"));

  const auto ft = hulm_run({"finetune", "--checkpoint", ck, "--train", s + "/person_trait.jsonl", "--test",
                            t + "/person_trait.jsonl", "--level", "person", "--objective", "regression", "--style",
                            "huft,tft", "--seeds", "1,2", "--epochs", "1", "--out", (dir / "ft").string()});
  REQUIRE(ft.code == 0);
  CHECK(fs::exists(dir / "ft" / "huft-seed1" / "head.bin"));
  CHECK(fs::exists(dir / "ft" / "tft-seed2" / "predictions.jsonl"));
  CHECK(fs::exists(dir / "ft" / "sweep.json"));

  const auto pr = hulm_run({"probe", "--checkpoint", ck, "--train", s + "/corpus.jsonl", "--test",
                            t + "/corpus.jsonl", "--epochs", "3", "--include-history", "off", "--out",
                            (dir / "probe").string()});
  REQUIRE(pr.code == 0);
  const auto ev = hulm_run({"evaluate", "--level", "person", "--objective", "regression", "--predictions",
                            "huft=" + (dir / "ft" / "huft-seed1" / "predictions.jsonl").string() + ",tft=" +
                                (dir / "ft" / "tft-seed1" / "predictions.jsonl").string(),
                            "--baseline", "tft", "--significance", "paired_t", "--out", (dir / "ev").string()});
  CHECK(ev.code == 0);

  const auto pk = hulm_run({"pack", "--input", s + "/corpus.jsonl", "--mode", "standard", "--max-len", "16", "--out",
                            (dir / "pack").string()});
  CHECK(pk.code == 0);
  CHECK(fs::exists(dir / "pack" / "packed.bin"));
}
