#include <catch_amalgamated.hpp>

#include <sys/wait.h>

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <fstream>

#include "afferent/harness.hpp"

using namespace afferent;
using Catch::Approx;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("afferent_test_" + name);
  fs::remove_all(p);
  return p;
}

int run_cli(const std::string& args) {
  const std::string cmd = std::string(AFFERENT_CLI) + " " + args + " >/dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

// Largest gap between the two empirical CDFs.
double ks_distance(Vec a, Vec b) {
  std::sort(a.begin(), a.end());
  std::sort(b.begin(), b.end());
  double d = 0.0;
  std::size_t i = 0, j = 0;
  while (i < a.size() && j < b.size()) {
    const double x = std::min(a[i], b[j]);
    while (i < a.size() && a[i] <= x) ++i;
    while (j < b.size() && b[j] <= x) ++j;
    d = std::max(d, std::abs(static_cast<double>(i) / static_cast<double>(a.size()) -
                             static_cast<double>(j) / static_cast<double>(b.size())));
  }
  return d;
}

}  // namespace

TEST_CASE("Welch test against reference values") {
  SECTION("four against four") {
    const Vec a{2.1, 2.5, 2.3, 2.2};
    const Vec b{1.1, 1.4, 1.2, 1.3};
    const WelchResult r = welch_test(a, b);
    CHECK(r.t == Approx(9.575537013186736).margin(1e-6));
    CHECK(r.df == Approx(5.584615384615383).margin(1e-6));
    CHECK(r.p == Approx(0.00011303730990960926).margin(1e-6));
    CHECK_FALSE(r.degenerate);
  }
  SECTION("five against six") {
    const Vec a{0.08, 0.11, 0.09, 0.12, 0.10};
    const Vec b{0.05, 0.06, 0.04, 0.07, 0.05, 0.06};
    const WelchResult r = welch_test(a, b);
    CHECK(r.t == Approx(5.443725410182206).margin(1e-6));
    CHECK(r.df == Approx(6.745585874799358).margin(1e-6));
    CHECK(r.p == Approx(0.001088442806944949).margin(1e-6));
  }
  SECTION("identical samples") {
    const Vec a{1.0, 2.0, 3.0};
    const WelchResult r = welch_test(a, a);
    CHECK(r.t == 0.0);
    CHECK(r.p == Approx(1.0).margin(1e-12));
  }
  SECTION("swapping the samples negates t and keeps p") {
    Rng rng(4);
    for (int i = 0; i < 50; ++i) {
      Vec a, b;
      for (int j = 0; j < 5; ++j) a.push_back(rng.normal());
      for (int j = 0; j < 7; ++j) b.push_back(0.5 + 2.0 * rng.normal());
      const WelchResult ab = welch_test(a, b);
      const WelchResult ba = welch_test(b, a);
      CHECK(ab.t == -ba.t);
      CHECK(ab.p == ba.p);
      CHECK(ab.df == ba.df);
    }
  }
  SECTION("zero variance") {
    const WelchResult same = welch_test(Vec{2.0, 2.0}, Vec{2.0, 2.0, 2.0});
    CHECK(same.degenerate);
    CHECK(same.t == 0.0);
    CHECK(same.p == 1.0);
    const WelchResult diff = welch_test(Vec{1.0, 1.0}, Vec{2.0, 2.0});
    CHECK(diff.degenerate);
    CHECK(diff.t == -std::numeric_limits<double>::infinity());
    CHECK(diff.p == 0.0);
  }
  CHECK_THROWS_AS(welch_test(Vec{1.0}, Vec{1.0, 2.0}), ValidationError);
}

TEST_CASE("metrics") {
  SECTION("constant CAT gives efficiency 2 and zero robustness") {
    const std::vector<AgeLog> logs{{20.0, Vec(10, 0.5), Vec(10, 0.6), {}}, {80.0, Vec(10, 0.5), Vec(10, 0.6), {}}};
    const MetricsReport r = compute_metrics(logs);
    CHECK(*r.cat_efficiency == Approx(2.0).margin(1e-15));
    CHECK(*r.age_robustness == 0.0);
  }
  SECTION("low actions are all safe") {
    const std::vector<AgeLog> logs{{20.0, {}, Vec(5, 0.2), {}}, {60.0, {}, Vec(5, 0.2), {}}};
    const MetricsReport r = compute_metrics(logs);
    CHECK(r.per_age[0].safe_action_fraction == 1.0);
    CHECK_FALSE(r.cat_efficiency);
    CHECK_FALSE(r.per_age[0].mean_cat);
  }
  SECTION("scripted logs match a hand computation") {
    const std::vector<AgeLog> logs{
        {60.0, {0.2, 0.4}, {0.1, 0.5}, {0.01, 0.03}},
        {20.0, {0.1, 0.1, 0.1, 0.3}, {0.2, 0.4, 0.6, 0.8}, {0.0, 0.0, 0.02, 0.02}},
        {60.0, {0.6}, {0.9}, {0.05}},
    };
    const MetricsReport r = compute_metrics(logs);
    REQUIRE(r.per_age.size() == 2);
    CHECK(r.per_age[0].age == 20.0);
    CHECK(*r.per_age[0].mean_cat == Approx(0.15).margin(1e-15));
    CHECK(r.per_age[0].safe_action_fraction == 0.25);
    CHECK(*r.per_age[1].mean_cat == Approx(0.4).margin(1e-15));
    CHECK(r.per_age[1].mean_action == Approx(0.5).margin(1e-15));
    CHECK(r.per_age[1].safe_action_fraction == Approx(1.0 / 3.0).margin(1e-15));
    CHECK(*r.per_age[1].mean_recall_risk == Approx(0.03).margin(1e-15));
    // pooled CAT: (0.6 + 1.2) / 7
    CHECK(*r.cat_efficiency == Approx(7.0 / 1.8).margin(1e-12));
    CHECK(*r.age_robustness == Approx(0.25).margin(1e-15));
  }
  SECTION("errors") {
    CHECK_THROWS_AS(compute_metrics(std::vector<AgeLog>{}), ValidationError);
    CHECK_THROWS_AS(compute_metrics(std::vector<AgeLog>{{20.0, {}, {0.5}, {}}}), ValidationError);
    CHECK_THROWS_AS(compute_metrics(std::vector<AgeLog>{{20.0, {}, {}, {}}, {40.0, {}, {0.5}, {}}}), ValidationError);
    CHECK_THROWS_AS(compute_metrics(std::vector<AgeLog>{{20.0, {0.1}, {0.5}, {}}, {40.0, {}, {0.5}, {}}}),
                    ValidationError);
  }
}

TEST_CASE("reports round trip through JSON") {
  MetricsReport r;
  r.variant = "full";
  r.scenario = "normal";
  r.per_age = {{20.0, 0.31, 0.7, 0.05, 0.0123}, {80.0, std::nullopt, 0.5, 0.2, std::nullopt}};
  r.cat_efficiency = std::numeric_limits<double>::infinity();
  r.age_robustness = 0.1 + 0.2;
  r.runs = {{"full_age20_seed0", "full", 20.0, 0, 0.081, 0.74, 0.65, 0.7, 0.01, 0.002}};
  r.comparisons = {{"d_total", "full", "no_cat", welch_test(Vec{1.0, 1.0}, Vec{2.0, 2.0})}};
  r.bonferroni = 4;
  const MetricsReport back = metrics_from_json(json::parse(to_json(r).dump()));
  CHECK(back == r);
  CHECK_THROWS_AS(metrics_from_json(json{{"variant", "x"}}), ConfigError);
}

TEST_CASE("variants without a signal never log it") {
  std::vector<StepLog> steps(3);
  for (Variant v : {Variant::no_cat, Variant::no_amm, Variant::full}) {
    AgentConfig agent;
    RewardParams reward;
    apply_variant(v, agent, reward);
    std::istringstream in(step_log_jsonl(steps, agent));
    std::string line;
    while (std::getline(in, line)) {
      const json j = json::parse(line);
      CHECK(j.contains("cat") == (v != Variant::no_cat));
      CHECK(j.contains("y_hat") == (v == Variant::full));
    }
  }
}

TEST_CASE("run identifiers") {
  CHECK(run_id(Variant::no_amm, 60.0, 3) == "no_amm_age60_seed3");
  CHECK(run_id(Variant::full, 42.5, 0) == "full_age42.5_seed0");
}

TEST_CASE("simulate writes the rollout schema") {
  ExperimentConfig cfg;
  cfg.m = 8;
  cfg.simulate.repeats = 2;
  cfg.out = scratch("simulate").string();
  run_simulate(cfg);
  std::map<std::string, Vec> stress;
  std::size_t files = 0;
  for (const auto& e : fs::directory_iterator(fs::path(cfg.out) / "runs")) {
    ++files;
    std::ifstream in(e.path());
    std::string line;
    std::size_t lines = 0;
    while (std::getline(in, line)) {
      ++lines;
      const json j = json::parse(line);
      for (const auto& f : rollout_fields()) REQUIRE(j.contains(f));
      CHECK(j["cat"].get<double>() >= 0.0);
      CHECK(j["cat"].get<double>() <= 1.0);
      stress[j["scenario"].get<std::string>()].push_back(j["stress"].get<double>());
    }
    CHECK(lines == 80);
  }
  CHECK(files == 6);
  CHECK(ks_distance(stress["normal"], stress["meniscus_overload"]) > 0.0);
  fs::remove_all(cfg.out);
}

TEST_CASE("command line exit codes") {
  const fs::path dir = scratch("cli");
  fs::create_directories(dir);
  const fs::path bad = dir / "bad.cfg";
  std::ofstream(bad) << "ppo.warp = 9\n";
  CHECK(run_cli("simulate --config " + bad.string() + " --out " + (dir / "o").string()) == 2);
  CHECK(run_cli("simulate --scenario marathon --out " + (dir / "o").string()) == 2);
  CHECK(run_cli("simulate --steps 5 --set afferent.m=4 --out " + (dir / "ok").string()) == 0);
  CHECK(fs::exists(dir / "ok" / "reports" / "simulate.json"));
  {
    std::ifstream in(dir / "ok" / "runs" / "simulate_normal_rep0.jsonl");
    std::string line;
    int lines = 0;
    while (std::getline(in, line)) ++lines;
    CHECK(lines == 5);
  }
  CHECK(run_cli("simulate --steps 0 --out " + (dir / "o").string()) == 2);
  CHECK(run_cli("bogus") != 0);
  fs::remove_all(dir);
}
