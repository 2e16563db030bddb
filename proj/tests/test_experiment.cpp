#include "flowprec/experiment.hpp"

#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

using namespace flowprec;
using namespace flowprec::experiment;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

json tiny_config(const std::string& out) {
  json j = json::parse(R"({
    "target": {"name": "funnel"},
    "preconditioners": ["frnvp", "diagonal"],
    "seeds": [3],
    "warmup": {"cycles": 3, "steps": 40, "chains": 4, "reservoir": 200},
    "training": {"epochs": 10},
    "sampling": {"iterations": 30},
    "diagnostics": {"ksd_trials": 3, "ksd_subsample": 50}
  })");
  j["output"]["dir"] = out;
  return j;
}

std::string read_file(const std::string& path) {
  std::ifstream in(path);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::string error_field(const json& j) {
  try {
    parse_config(j);
  } catch (const ConfigError& e) {
    return e.field();
  }
  return "<none>";
}

fs::path scratch(const std::string& name) {
  const auto dir = fs::temp_directory_path() / ("flowprec_test_" + name);
  fs::remove_all(dir);
  return dir;
}

}  // namespace

TEST_CASE("config errors name the offending field") {
  json j = tiny_config("x");
  CHECK(error_field(j) == "<none>");

  json bad = j;
  bad["warmup"]["cycle"] = 3;
  CHECK(error_field(bad) == "warmup.cycle");
  bad = j;
  bad["warmup"]["chains"] = "many";
  CHECK(error_field(bad) == "warmup.chains");
  bad = j;
  bad["warmup"]["chains"] = 1;
  CHECK(error_field(bad) == "warmup.chains");
  bad = j;
  bad["preconditioners"][1] = "maf";
  CHECK(error_field(bad) == "preconditioners[1]");
  bad = j;
  bad.erase("seeds");
  CHECK(error_field(bad) == "seeds");
  bad = j;
  bad["target"]["name"] = "rosenbrock";
  CHECK(error_field(bad) == "target.name");
  bad = j;
  bad["target"] = {{"name", "sgc"}};
  CHECK(error_field(bad) == "target.data");
  bad = j;
  bad["warmup"]["target_accept"] = 1.5;
  CHECK(error_field(bad) == "warmup.target_accept");
  bad = j;
  bad["diagnostics"]["kernel"] = "linear";
  CHECK(error_field(bad) == "diagnostics.kernel");
}

TEST_CASE("grid expansion") {
  json j = tiny_config("x");
  j["target"] = {{"name", "sgc"}, {"data", "credit.txt"}, {"rows", {100, 200, 300}}};
  j["samplers"] = {"hmc", "nuts"};
  j["seeds"] = {1, 2};
  const auto cfg = parse_config(j);
  const auto cells = expand(cfg);
  CHECK(cells.size() == 3u * 2u * 2u * 2u);
  CHECK(cells.front().path() == "sgc-n100/frnvp/hmc/seed-1");
  CHECK(cells.back().path() == "sgc-n300/diagonal/nuts/seed-2");
  std::set<std::string> paths;
  for (const auto& c : cells) paths.insert(c.path());
  CHECK(paths.size() == cells.size());
}

TEST_CASE("overrides change the config hash") {
  auto cfg = parse_config(tiny_config("x"));
  const auto h0 = config_hash(cfg);
  override_seed(cfg, 9);
  CHECK(cfg.seeds == std::vector<std::uint64_t>{9});
  CHECK(config_hash(cfg) != h0);
  CHECK(fnv1a("") == 0xcbf29ce484222325ULL);
  CHECK(fnv1a("a") == 0xaf63dc4c8601ec8cULL);
}

TEST_CASE("metrics are bitwise reproducible") {
  const auto cfg = parse_config(tiny_config("x"));
  const auto cell = expand(cfg).front();
  const auto a = run_cell(cfg, cell);
  const auto b = run_cell(cfg, cell);
  REQUIRE(a.ok);
  CHECK(metrics_row(a) == metrics_row(b));

  const auto dir1 = scratch("repro1"), dir2 = scratch("repro2");
  auto c1 = parse_config(tiny_config(dir1.string()));
  auto c2 = parse_config(tiny_config(dir2.string()));
  c2.jobs = 2;
  std::ostringstream log;
  CHECK(run(c1, log) == 0);
  CHECK(run(c2, log) == 0);
  // Headers differ only through the output directory in the hashed config.
  auto body = [](const std::string& s) { return s.substr(s.find('\n') + 1); };
  CHECK(body(read_file((dir1 / "metrics.csv").string())) ==
        body(read_file((dir2 / "metrics.csv").string())));
  fs::remove_all(dir1);
  fs::remove_all(dir2);
}

TEST_CASE("a failing cell does not stop the grid") {
  const auto dir = scratch("isolation");
  json j = tiny_config(dir.string());
  j.erase("target");
  j["targets"] = {{{"name", "funnel"}}, {{"name", "sgc"}, {"data", (dir / "missing.txt").string()}}};
  j["preconditioners"] = {"diagonal"};
  const auto cfg = parse_config(j);
  std::ostringstream log;
  CHECK(run(cfg, log) == 1);
  const std::string metrics = read_file((dir / "metrics.csv").string());
  CHECK(metrics.rfind("# flowprec " + version() + " config " + config_hash(cfg), 0) == 0);
  CHECK(metrics.find("funnel,-1,diagonal,hmc,3,ok,") != std::string::npos);
  CHECK(metrics.find("sgc,-1,diagonal,hmc,3,failed,") != std::string::npos);
  CHECK(fs::exists(dir / "funnel/diagonal/hmc/seed-3/preconditioner.json"));
  CHECK(fs::exists(dir / "funnel/diagonal/hmc/seed-3/histogram_dim0.csv"));
  CHECK(fs::exists(dir / "sgc/diagonal/hmc/seed-3/metrics.csv"));
  CHECK_FALSE(fs::exists(dir / "sgc/diagonal/hmc/seed-3/preconditioner.json"));
  CHECK_FALSE(fs::exists(dir / "funnel/diagonal/hmc/seed-3/draws.csv.gz"));
  fs::remove_all(dir);
}
