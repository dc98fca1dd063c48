#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

#include "cli.hpp"
#include "config.hpp"
#include "doctest.h"
#include "json.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Result {
  int code;
  std::string out;
  std::string err;
};

Result vstar_run(std::vector<std::string> args) {
  args.insert(args.begin(), "vstar");
  std::ostringstream out, err;
  const int code = vstar::cli::run(args, out, err);
  return {code, out.str(), err.str()};
}

// A fresh scratch directory per test case.
struct Scratch {
  fs::path dir;
  explicit Scratch(const std::string& name) : dir(fs::temp_directory_path() / ("vstar_cli_test_" + name)) {
    fs::remove_all(dir);
    fs::create_directories(dir);
  }
  ~Scratch() { fs::remove_all(dir); }
  std::string operator/(const std::string& rel) const { return (dir / rel).string(); }
};

std::string slurp(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  REQUIRE(f);
  return {std::istreambuf_iterator<char>(f), {}};
}

std::vector<std::string> lines(const std::string& text) {
  std::vector<std::string> v;
  std::istringstream s(text);
  for (std::string l; std::getline(s, l);) v.push_back(l);
  return v;
}

const std::vector<std::string> kSmall = {"--set", "env.contexts=16", "--set", "env.queries=80", "--set",
                                         "loop.iterations=2", "--set", "seeds=[1,2]"};

std::vector<std::string> with_small(std::vector<std::string> args) {
  // Right after the subcommand, so later --set flags take precedence.
  args.insert(args.begin() + 1, kSmall.begin(), kSmall.end());
  return args;
}

// Column `name` of every data row in a CSV.
std::vector<std::string> column(const std::string& csv, const std::string& name) {
  auto ls = lines(csv);
  REQUIRE(!ls.empty());
  std::vector<std::string> header;
  std::stringstream h(ls[0]);
  for (std::string f; std::getline(h, f, ',');) header.push_back(f);
  const auto it = std::find(header.begin(), header.end(), name);
  REQUIRE(it != header.end());
  const auto idx = static_cast<std::size_t>(it - header.begin());
  std::vector<std::string> col;
  for (std::size_t i = 1; i < ls.size(); ++i) {
    std::vector<std::string> f;
    std::stringstream r(ls[i]);
    for (std::string x; std::getline(r, x, ',');) f.push_back(x);
    col.push_back(idx < f.size() ? f[idx] : "");
  }
  return col;
}

}  // namespace

TEST_CASE("config: defaults parse and round-trip") {
  const auto cfg = vstar::cli::parse_config(json::object());
  CHECK(cfg.seeds.size() == 5);
  const auto again = vstar::cli::parse_config(vstar::cli::to_json(cfg));
  CHECK(vstar::cli::to_json(again) == vstar::cli::to_json(cfg));
}

TEST_CASE("config: unknown keys and bad types are rejected") {
  CHECK_THROWS_AS(vstar::cli::parse_config(json{{"bogus", 1}}), vstar::ConfigError);
  CHECK_THROWS_AS(vstar::cli::parse_config(json{{"rl", {{"kapa", 1.0}}}}), vstar::ConfigError);
  CHECK_THROWS_AS(vstar::cli::parse_config(json{{"rl", {{"kappa", "big"}}}}), vstar::ConfigError);
  CHECK_THROWS_AS(vstar::cli::parse_config(json{{"loop", {{"objective", "ppo"}}}}), vstar::ConfigError);
  json doc = json::object();
  vstar::cli::apply_override(doc, "rl.kappa=0.25");
  vstar::cli::apply_override(doc, "decoder.kind=beam");
  const auto cfg = vstar::cli::parse_config(doc);
  CHECK(cfg.loop.rl.kappa == 0.25);
  CHECK(cfg.loop.decoder.kind == vstar::DecoderKind::Beam);
  CHECK_THROWS_AS(vstar::cli::apply_override(doc, "no_equals_sign"), vstar::ConfigError);
}

TEST_CASE("gen-env: same seed gives identical files") {
  Scratch s("gen");
  const auto a = vstar_run(with_small({"gen-env", "--out", s / "a", "--seed", "7"}));
  const auto b = vstar_run(with_small({"gen-env", "--out", s / "b", "--seed", "7"}));
  REQUIRE(a.code == 0);
  REQUIRE(b.code == 0);
  CHECK(slurp(s / "a/env.txt") == slurp(s / "b/env.txt"));
  CHECK(slurp(s / "a/policy.txt") == slurp(s / "b/policy.txt"));
  CHECK(a.out == b.out);
  const auto c = vstar_run(with_small({"gen-env", "--out", s / "c", "--seed", "8"}));
  REQUIRE(c.code == 0);
  CHECK(slurp(s / "a/env.txt") != slurp(s / "c/env.txt"));
}

TEST_CASE("gen-env: audit reports the planted fraction") {
  Scratch s("audit");
  const auto def = vstar_run({"gen-env", "--out", s / "def"});
  REQUIRE(def.code == 0);
  const auto a = json::parse(lines(def.out).back());
  CHECK(a.at("kind") == "audit");
  CHECK(std::abs(a.at("fraction").get<double>() - a.at("target").get<double>()) <= 0.05);

  const auto zero = vstar_run(with_small({"gen-env", "--out", s / "zero", "--set", "misalignment.fraction=0"}));
  REQUIRE(zero.code == 0);
  const auto z = json::parse(lines(zero.out).back());
  CHECK(z.at("planted_queries") == 0);
  CHECK(z.at("planted_contexts") == 0);
}

TEST_CASE("errors: exit codes and error lines") {
  Scratch s("errors");
  auto r = vstar_run({"gen-env", "--out", s / "x", "--set", "bogus.key=1"});
  CHECK(r.code == vstar::cli::kConfigError);
  CHECK(r.err.rfind("error kind=config msg=", 0) == 0);
  CHECK(!fs::exists(s / "x"));

  r = vstar_run({"train", "--out", s / "t", "--set", "env_dir=\"" + (s / "missing") + "\""});
  CHECK(r.code == vstar::cli::kRuntimeError);
  CHECK(r.err.rfind("error kind=runtime msg=", 0) == 0);

  r = vstar_run({"gen-env", "--config", s / "nope.json"});
  CHECK(r.code == vstar::cli::kConfigError);
  r = vstar_run({"frobnicate"});
  CHECK(r.code == vstar::cli::kConfigError);
  r = vstar_run(with_small({"ablate", "--axis", "temperature", "--out", s / "a"}));
  CHECK(r.code == vstar::cli::kConfigError);
  r = vstar_run({"report"});
  CHECK(r.code == vstar::cli::kConfigError);
  r = vstar_run({"gen-env", "--set", "env.vocab=1"});
  CHECK(r.code != 0);
}

TEST_CASE("config file: values apply and flags override them") {
  Scratch s("cfgfile");
  {
    std::ofstream f(s / "c.json");
    f << R"({"seed": 3, "env": {"contexts": 16, "queries": 80}, "loop": {"iterations": 1}})";
  }
  const auto r = vstar_run({"gen-env", "--config", s / "c.json", "--out", s / "g", "--seed", "4"});
  REQUIRE(r.code == 0);
  const auto written = json::parse(slurp(s / "g/config.json"));
  CHECK(written.at("seed") == 4);
  CHECK(written.at("env").at("contexts") == 16);
}

TEST_CASE("output root from the environment variable") {
  Scratch s("outroot");
  ::setenv("VSTAR_OUT", s.dir.c_str(), 1);
  const auto r = vstar_run(with_small({"gen-env", "--out", "rel"}));
  ::unsetenv("VSTAR_OUT");
  REQUIRE(r.code == 0);
  CHECK(fs::exists(s / "rel/env.txt"));
}

TEST_CASE("train: from a saved environment, zero iterations evaluates only") {
  Scratch s("train");
  REQUIRE(vstar_run(with_small({"gen-env", "--out", s / "env", "--seed", "2"})).code == 0);
  const auto env_dir = "env_dir=\"" + (s / "env") + "\"";
  auto r = vstar_run(with_small({"train", "--out", s / "zero", "--seed", "2", "--set", env_dir, "--set",
                                 "loop.iterations=0"}));
  REQUIRE(r.code == 0);
  const auto summary = lines(slurp(s / "zero/summary.csv"));
  REQUIRE(summary.size() == 2);
  CHECK(summary[1].rfind("0,", 0) == 0);
  CHECK(slurp(s / "zero/policy.txt") == slurp(s / "env/policy.txt"));

  r = vstar_run(with_small({"train", "--out", s / "run", "--seed", "2", "--set", env_dir, "--set",
                            "loop.checkpoint_every=1"}));
  REQUIRE(r.code == 0);
  const auto recs = lines(slurp(s / "run/records.jsonl"));
  REQUIRE(recs.size() == 4);  // initial, two iterations, final
  CHECK(json::parse(recs.front()).at("kind") == "initial");
  CHECK(json::parse(recs.back()).at("kind") == "final");
  CHECK(fs::exists(s / "run/checkpoints/iter_2.policy.txt"));
  CHECK(fs::exists(s / "run/value.txt"));
  const auto metrics = slurp(s / "run/metrics.csv");
  CHECK(metrics.find("alignment,value,level,rho,3,2,") != std::string::npos);
  CHECK(metrics.find("train,ved+joint,heldout,hr,10,2,") != std::string::npos);

  // Same inputs, same bytes.
  r = vstar_run(with_small({"train", "--out", s / "run2", "--seed", "2", "--set", env_dir, "--set",
                            "loop.checkpoint_every=1"}));
  REQUIRE(r.code == 0);
  CHECK(slurp(s / "run/records.jsonl") == slurp(s / "run2/records.jsonl"));
  CHECK(slurp(s / "run/metrics.csv") == slurp(s / "run2/metrics.csv"));
}

TEST_CASE("ablate: one row per variant per seed, deterministic bytes") {
  Scratch s("ablate");
  const std::map<std::string, std::vector<std::string>> expected = {
      {"decoder", {"beam", "topk", "ved"}},
      {"objective", {"grpo", "sibling", "joint"}},
      {"expansion-rule", {"value", "entropy", "joint"}}};
  for (const auto& [axis, names] : expected) {
    CAPTURE(axis);
    REQUIRE(vstar_run(with_small({"ablate", "--axis", axis, "--out", s / axis})).code == 0);
    const auto csv = slurp(s / (axis + "/ablate_" + axis + ".csv"));
    const auto variants = column(csv, "variant");
    const auto seeds = column(csv, "seed");
    REQUIRE(variants.size() == 2 * names.size());
    for (std::size_t i = 0; i < variants.size(); ++i) {
      CHECK(variants[i] == names[i % names.size()]);
      CHECK(seeds[i] == (i < names.size() ? "1" : "2"));
    }
  }
  REQUIRE(vstar_run(with_small({"ablate", "--axis", "objective", "--out", s / "again"})).code == 0);
  CHECK(slurp(s / "objective/ablate_objective.csv") == slurp(s / "again/ablate_objective.csv"));
}

TEST_CASE("scale: matched budgets and widths") {
  Scratch s("scale");
  const auto r = vstar_run(with_small({"scale", "--out", s / "sc", "--set", "seeds=[1]", "--set",
                                       "scale.value_iterations=1"}));
  REQUIRE(r.code == 0);
  const auto csv = slurp(s / "sc/scale.csv");
  const auto method = column(csv, "method");
  const auto budget = column(csv, "budget");
  const auto width = column(csv, "width");
  const auto cost = column(csv, "mean_cost");
  const std::vector<std::string> budgets = {"33", "65", "97", "129"};
  REQUIRE(method.size() == 8);
  for (std::size_t i = 0; i < method.size(); ++i) {
    CHECK(budget[i] == budgets[i / 2]);
    CHECK(std::stod(cost[i]) <= std::stod(budget[i]));
    if (method[i] == "beam") CHECK(width[i] == std::to_string(16 * (i / 2 + 1)));
  }
  // 1 + 2*2 = 5 tokens cannot cover the warm start.
  const auto bad = vstar_run(with_small({"scale", "--out", s / "bad", "--set", "scale.base_width=2"}));
  CHECK(bad.code == vstar::cli::kConfigError);
}

TEST_CASE("report: aggregate mean and std recomputed by hand") {
  Scratch s("report");
  const std::string header = "study,method,setting,metric,k,seed,value\n";
  const double a[] = {0.1, 0.4, 0.25};
  for (int i = 0; i < 3; ++i) {
    fs::create_directories(s / ("r" + std::to_string(i)));
    std::ofstream f(s / ("r" + std::to_string(i) + "/metrics.csv"));
    f << header << "scale,ved,33,hr,10," << i + 1 << ',' << a[i] << "\n";
    f << "alignment,value,level,rho,3," << i + 1 << ",0.5\n";
  }
  const auto r = vstar_run({"report", s / "r0", s / "r1", s / "r2/metrics.csv", "--out", s / "rep"});
  REQUIRE(r.code == 0);
  const auto agg = slurp(s / "rep/aggregate.csv");
  const auto n = column(agg, "n");
  const auto mean = column(agg, "mean");
  const auto sd = column(agg, "std");
  const auto metric = column(agg, "metric");
  bool seen = false;
  for (std::size_t i = 0; i < metric.size(); ++i) {
    if (metric[i] != "hr") continue;
    seen = true;
    CHECK(n[i] == "3");
    const double m = (0.1 + 0.4 + 0.25) / 3.0;
    CHECK(std::stod(mean[i]) == doctest::Approx(m).epsilon(1e-12));
    const double var = ((0.1 - m) * (0.1 - m) + (0.4 - m) * (0.4 - m) + (0.25 - m) * (0.25 - m)) / 2.0;
    CHECK(std::stod(sd[i]) == doctest::Approx(std::sqrt(var)).epsilon(1e-12));
  }
  CHECK(seen);
  CHECK(column(slurp(s / "rep/fig_scaling.csv"), "metric") == std::vector<std::string>{"hr"});
  CHECK(column(slurp(s / "rep/fig_alignment.csv"), "metric") == std::vector<std::string>{"rho"});

  // A single run passes through with an empty std.
  const auto one = vstar_run({"report", s / "r1", "--out", s / "one"});
  REQUIRE(one.code == 0);
  const auto single = slurp(s / "one/aggregate.csv");
  CHECK(column(single, "mean") == std::vector<std::string>{"0.5", "0.4"});
  CHECK(column(single, "std") == std::vector<std::string>{"", ""});

  std::ofstream(s / "empty.csv") << header;
  CHECK(vstar_run({"report", s / "empty.csv"}).code == vstar::cli::kConfigError);
}
