#include <doctest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "alps/checkpoint.hpp"
#include "support/temp_dir.hpp"

#ifndef ALPS_CLI_PATH
#error "ALPS_CLI_PATH must point at the alps binary"
#endif

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Run {
  int code = -1;
  std::string err;
};

class Cli {
 public:
  Cli() : bin_(ALPS_CLI_PATH) {}

  const fs::path& dir() const { return tmp_.path(); }
  fs::path at(const std::string& name) const { return tmp_.path() / name; }

  Run operator()(const std::string& args) const {
    const fs::path err = at("stderr.txt");
    const std::string cmd = "cd '" + dir().string() + "' && '" + bin_ + "' " + args + " >/dev/null 2>'" +
                            err.string() + "'";
    const int status = std::system(cmd.c_str());
    Run r;
    r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    r.err = alps::read_file(err);
    return r;
  }

  json read_json(const std::string& name) const { return json::parse(alps::read_file(at(name))); }
  std::string read(const std::string& name) const { return alps::read_file(at(name)); }
  void write(const std::string& name, const std::string& text) const { std::ofstream(at(name)) << text; }

 private:
  alps::test::TempDir tmp_;
  std::string bin_;
};

std::vector<std::vector<std::string>> csv_rows(const std::string& text) {
  std::vector<std::vector<std::string>> rows;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    std::vector<std::string> cells;
    std::istringstream ls(line);
    std::string cell;
    while (std::getline(ls, cell, ',')) cells.push_back(cell);
    rows.push_back(cells);
  }
  return rows;
}

const char* kSmallConfig = R"({"steps": 12, "batch_size": 4, "train_size": 32, "eval_size": 8, "seq_len": 16, "init_seed": 3})";

}  // namespace

TEST_CASE("success prints exactly the result path on stderr") {
  Cli cli;
  const auto r = cli("init --seed 1 --out base.alps");
  CHECK(r.code == 0);
  CHECK(r.err == "base.alps\n");
  CHECK(fs::exists(cli.at("base.alps")));
}

TEST_CASE("score") {
  Cli cli;
  REQUIRE(cli("init --seed 1 --out b.alps").code == 0);
  REQUIRE(cli("init --seed 2 --out t.alps").code == 0);

  CHECK(cli("score --base b.alps --task b.alps --metric pad --out same.json").code == 0);
  const auto same = cli.read_json("same.json");
  CHECK(same.at("entries").size() == 32);
  for (const auto& e : same.at("entries")) CHECK(e.at("score").get<double>() == 0.0);
  CHECK(same.at("tau") == 1.0);
  CHECK(same.at("metric_domain") == "dist");

  CHECK(cli("score --base b.alps --task t.alps --metric pad --out a.json").code == 0);
  CHECK(cli("score --base b.alps --task t.alps --metric pad --tau 1.0 --out b.json").code == 0);
  CHECK(cli.read("a.json") == cli.read("b.json"));
  CHECK(cli("score --base b.alps --task t.alps --metric pad --tau 0.5 --out c.json").code == 0);
  CHECK(cli.read("a.json") != cli.read("c.json"));

  CHECK(cli("score --base b.alps --task t.alps --metric cosine --out cos.json").code == 0);
  CHECK(cli.read_json("cos.json").at("metric_domain") == "raw");
  CHECK(cli("score --base b.alps --task t.alps --metric cosine --metric-domain dist --out cos2.json").code == 0);
  CHECK(cli.read_json("cos2.json").at("metric_domain") == "dist");

  const auto bad = cli("score --base b.alps --task t.alps --metric bogus --out x.json");
  CHECK(bad.code == 1);
  CHECK(bad.err.find("--metric") != std::string::npos);
  CHECK(cli("score --base b.alps --task t.alps --tau -1 --out x.json").code == 1);
  CHECK(cli("score --base b.alps --out x.json").code == 1);

  REQUIRE(cli("init --seed 1 --layers 2 --out small.alps").code == 0);
  const auto mismatch = cli("score --base b.alps --task small.alps --out x.json");
  CHECK(mismatch.code == 2);
  CHECK(mismatch.err.rfind("error: GeometryError", 0) == 0);
  CHECK_FALSE(fs::exists(cli.at("x.json")));

  cli.write("garbage.alps", "not a checkpoint at all");
  CHECK(cli("score --base b.alps --task garbage.alps --out x.json").code == 2);
  CHECK(cli("score --base b.alps --task missing.alps --out x.json").code == 2);
  CHECK_FALSE(fs::exists(cli.at("x.json")));
}

TEST_CASE("select") {
  Cli cli;
  REQUIRE(cli("init --seed 1 --out b.alps").code == 0);
  REQUIRE(cli("init --seed 2 --out t.alps").code == 0);
  REQUIRE(cli("score --base b.alps --task t.alps --out s.json").code == 0);

  CHECK(cli("select --scores s.json --out m.json").code == 0);
  const auto m = cli.read_json("m.json");
  CHECK(m.at("ratio") == 0.1);
  CHECK(m.at("selected").size() == 4);
  CHECK(m.at("strategy") == "topk");
  CHECK(m.at("source_report_id").is_string());

  CHECK(cli("select --scores s.json --strategy random --seed 7 --ratio 0.25 --out r1.json").code == 0);
  CHECK(cli("select --model b.alps --strategy random --seed 7 --ratio 0.25 --out r2.json").code == 0);
  CHECK(cli.read_json("r1.json").at("selected") == cli.read_json("r2.json").at("selected"));

  CHECK(cli("select --model b.alps --strategy lc --seed 3 --ratio 0.3 --out lc.json").code == 0);
  std::map<int, int> per_layer;
  for (const auto& k : cli.read_json("lc.json").at("selected")) ++per_layer[k.at("layer").get<int>()];
  int lo = 99, hi = 0;
  for (int l = 0; l < 4; ++l) {
    lo = std::min(lo, per_layer[l]);
    hi = std::max(hi, per_layer[l]);
  }
  CHECK(hi - lo <= 1);

  CHECK(cli("select --scores s.json --ratio 1.5 --out bad.json").code == 1);
  CHECK(cli("select --scores s.json --ratio 0 --out bad.json").code == 1);
  CHECK(cli("select --scores s.json --strategy random --out bad.json").code == 1);
  CHECK(cli("select --scores nope.json --out bad.json").code == 2);
  CHECK_FALSE(fs::exists(cli.at("bad.json")));
}

TEST_CASE("train") {
  Cli cli;
  cli.write("c.json", kSmallConfig);
  CHECK(cli("train --config missing.json --out t.alps").code == 2);
  cli.write("typo.json", R"({"stepz": 3})");
  CHECK(cli("train --config typo.json --out t.alps").code == 2);

  REQUIRE(cli("train --config c.json --freeze none --out none.alps").code == 0);
  CHECK(fs::exists(cli.at("none.log.jsonl")));
  std::istringstream log(cli.read("none.log.jsonl"));
  std::string line;
  int steps = 0;
  while (std::getline(log, line)) steps += json::parse(line).contains("loss");
  CHECK(steps == 12);

  REQUIRE(cli("init --seed 3 --out init.alps").code == 0);
  REQUIRE(cli("score --base init.alps --task none.alps --out s.json").code == 0);
  for (const auto& e : cli.read_json("s.json").at("entries")) CHECK(e.at("score").get<double>() == 0.0);

  REQUIRE(cli("train --config c.json --out a.alps --log a.jsonl").code == 0);
  REQUIRE(cli("train --config c.json --out b.alps --log b.jsonl").code == 0);
  CHECK(cli.read("a.alps") == cli.read("b.alps"));
  CHECK(cli.read("a.jsonl") == cli.read("b.jsonl"));

  REQUIRE(cli("select --model init.alps --strategy random --seed 1 --ratio 0.25 --out m.json").code == 0);
  REQUIRE(cli("train --config c.json --mask m.json --out masked.alps").code == 0);
  CHECK(cli.read("masked.alps") != cli.read("a.alps"));

  REQUIRE(cli("init --seed 1 --layers 2 --out small.alps").code == 0);
  REQUIRE(cli("select --model small.alps --strategy random --seed 1 --ratio 0.25 --out small_mask.json").code == 0);
  const auto mismatch = cli("train --config c.json --mask small_mask.json --out bad.alps");
  CHECK(mismatch.code == 2);
  CHECK_FALSE(fs::exists(cli.at("bad.alps")));
  CHECK(cli("train --config c.json --freeze mask --out bad.alps").code == 1);
  CHECK(cli("train --config c.json --freeze sideways --out bad.alps").code == 1);
}

TEST_CASE("sweep") {
  Cli cli;
  cli.write("c.json", kSmallConfig);
  REQUIRE(cli("init --seed 3 --out base.alps").code == 0);
  REQUIRE(cli("init --seed 4 --out task.alps").code == 0);
  REQUIRE(cli("score --base base.alps --task task.alps --out s.json").code == 0);
  const std::string args =
      "sweep --config c.json --base base.alps --scores s.json --ratios 0.1,0.3,1.0 --strategies topk,random "
      "--seeds 0,1,2 --out-dir ";
  const auto r = cli(args + "run1");
  REQUIRE(r.code == 0);
  CHECK(r.err == "run1/sweep.csv\n");
  const auto rows = csv_rows(cli.read("run1/sweep.csv"));
  REQUIRE(rows.size() == 19);
  CHECK(rows[0] == std::vector<std::string>{"ratio", "strategy", "seed", "selected", "eval_loss", "eval_accuracy"});
  for (int seed = 0; seed < 3; ++seed) {
    const auto& topk = rows[static_cast<std::size_t>(13 + seed)];
    const auto& rnd = rows[static_cast<std::size_t>(16 + seed)];
    CHECK(topk[0] == "1");
    CHECK(topk[1] == "topk");
    CHECK(rnd[1] == "random");
    CHECK(std::vector<std::string>(topk.begin() + 2, topk.end()) == std::vector<std::string>(rnd.begin() + 2, rnd.end()));
  }
  REQUIRE(cli(args + "run2").code == 0);
  CHECK(cli.read("run1/sweep.csv") == cli.read("run2/sweep.csv"));
  CHECK(cli("sweep --config c.json --strategies topk --out-dir run3").code == 1);
}

TEST_CASE("heatmap") {
  Cli cli;
  REQUIRE(cli("init --seed 1 --out b.alps").code == 0);
  REQUIRE(cli("init --seed 2 --out t.alps").code == 0);
  REQUIRE(cli("score --base b.alps --task t.alps --out s.json").code == 0);
  REQUIRE(cli("heatmap --scores s.json --out h.csv").code == 0);
  const auto rows = csv_rows(cli.read("h.csv"));
  REQUIRE(rows.size() == 4);
  for (const auto& row : rows) CHECK(row.size() == 8);
  for (const auto& e : cli.read_json("s.json").at("entries")) {
    const auto l = e.at("layer").get<std::size_t>();
    const auto h = e.at("head").get<std::size_t>() - 1;
    CHECK(std::stod(rows[l][h]) == e.at("score").get<double>());
  }
  REQUIRE(cli("score --base b.alps --task b.alps --out z.json").code == 0);
  REQUIRE(cli("heatmap --scores z.json --out z.csv").code == 0);
  for (const auto& row : csv_rows(cli.read("z.csv"))) {
    for (const auto& cell : row) CHECK(std::stod(cell) == 0.0);
  }
}

TEST_CASE("ablate") {
  Cli cli;
  REQUIRE(cli("init --seed 1 --out b.alps").code == 0);
  REQUIRE(cli("ablate --model b.alps --ratio 1.0 --eval-size 8 --out zero.json").code == 0);
  const auto zero = cli.read_json("zero.json");
  CHECK(zero.at("top_k").size() == 32);
  for (const auto& e : zero.at("entries")) CHECK(e.at("delta").get<double>() == 0.0);

  cli.write("c.json", kSmallConfig);
  REQUIRE(cli("train --config c.json --out t.alps").code == 0);
  REQUIRE(cli("ablate --model t.alps --ratio 0.25 --eval-size 8 --out a.json").code == 0);
  const auto a = cli.read_json("a.json");
  CHECK(a.at("top_k").size() == 8);
  const auto& entries = a.at("entries");
  for (std::size_t i = 1; i < entries.size(); ++i) {
    CHECK(entries[i - 1].at("delta").get<double>() >= entries[i].at("delta").get<double>());
  }
  CHECK(cli("ablate --model t.alps --task-family bogus --out x.json").code == 1);
  CHECK(cli("ablate --model nope.alps --out x.json").code == 2);
}

TEST_CASE("usage errors") {
  Cli cli;
  CHECK(cli("").code == 1);
  CHECK(cli("frobnicate").code == 1);
  CHECK(cli("--help").code == 0);
}
