// Command-line driver. Exit codes: 0 success, 2 configuration error,
// 3 runtime failure.

#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "afferent/harness.hpp"

namespace {

struct Options {
  std::string config;
  std::string out;
  std::string ablation;
  std::string ages;
  std::string scenario;
  std::int64_t seed = -1;
  std::int64_t steps = -1;
  std::vector<std::string> overrides;
};

afferent::ExperimentConfig load(const Options& o) {
  using namespace afferent;
  ExperimentConfig cfg;
  if (!o.config.empty()) cfg = parse_config(read_text(o.config));
  for (const auto& kv : o.overrides) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + kv + "'");
    set_config_value(cfg, cfgio::trim(kv.substr(0, eq)), cfgio::trim(kv.substr(eq + 1)));
  }
  if (!o.out.empty()) cfg.out = o.out;
  if (!o.ablation.empty()) cfg.ablation = parse_variant(o.ablation);
  if (!o.ages.empty()) set_config_value(cfg, "ages", o.ages);
  if (!o.scenario.empty()) cfg.scenario = o.scenario;
  if (o.seed >= 0) cfg.seed = static_cast<std::uint64_t>(o.seed);
  if (o.steps >= 0) cfg.ppo.total_steps = o.steps;
  cfg.validate();
  return cfg;
}

}  // namespace

int main(int argc, char** argv) {
  using namespace afferent;
  CLI::App app{"Afferent sensing, episodic memory and bi-level learning experiments"};
  app.require_subcommand(1);
  Options o;
  auto add_common = [&o](CLI::App* sub) {
    sub->add_option("--config", o.config, "key = value configuration file");
    sub->add_option("--out", o.out, "output directory");
    sub->add_option("--seed", o.seed, "master seed");
    sub->add_option("--ablation", o.ablation, "full, no_cat, no_evolution, no_amm or no_predictive");
    sub->add_option("--ages", o.ages, "comma-separated ages");
    sub->add_option("--scenario", o.scenario, "normal, acl_deficient or meniscus_overload");
    sub->add_option("--steps", o.steps, "PPO steps per run; rollout length for simulate");
    sub->add_option("--set", o.overrides, "extra key=value override (repeatable)");
  };
  auto* simulate = app.add_subcommand("simulate", "open-loop twin rollouts as JSONL");
  auto* train = app.add_subcommand("train", "train policies for the configured variant");
  auto* evolve = app.add_subcommand("evolve", "CMA-ES search over afferent genomes");
  auto* evaluate = app.add_subcommand("evaluate", "train and evaluate, or evaluate a checkpoint");
  auto* ablate = app.add_subcommand("ablate", "ablation study with Welch comparisons");
  auto* probe = app.add_subcommand("probe-lipschitz", "local smoothness of the fitness landscape");
  auto* dump = app.add_subcommand("config", "print the full configuration document");
  for (auto* s : {simulate, train, evolve, evaluate, ablate, probe, dump}) add_common(s);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  try {
    ExperimentConfig cfg = load(o);
    if (dump->parsed()) {
      std::cout << render_config(cfg);
    } else if (simulate->parsed()) {
      if (o.steps >= 0) {
        cfg.simulate.steps = o.steps;
        cfg.validate();
      }
      const json r = run_simulate(cfg);
      std::cout << "wrote " << r["runs"].size() << " rollout files to " << cfg.out << "/runs\n";
    } else if (train->parsed()) {
      const json r = run_train(cfg);
      std::cout << "trained " << r["runs"].size() << " policies (" << to_string(cfg.ablation) << ")\n";
    } else if (evolve->parsed()) {
      const OutputTree out(cfg.out);
      const EvolveOutput r = run_evolve(cfg, out, make_predictive(cfg));
      for (const auto& g : r.result.history) {
        std::cout << "generation " << g.generation << " best " << g.best << " mean " << g.mean << "\n";
      }
    } else if (evaluate->parsed()) {
      const MetricsReport r = run_evaluate(cfg);
      for (const auto& a : r.per_age) {
        std::cout << "age " << a.age << " mean_action " << a.mean_action << " safe_fraction "
                  << a.safe_action_fraction;
        if (a.mean_cat) std::cout << " mean_cat " << *a.mean_cat;
        std::cout << "\n";
      }
    } else if (ablate->parsed()) {
      if (!o.ablation.empty()) {
        cfg.variants = {Variant::full};
        if (cfg.ablation != Variant::full) cfg.variants.push_back(cfg.ablation);
      }
      const AblationReport r = run_ablation(cfg);
      for (const auto& v : r.variants) {
        double d = 0.0;
        for (const auto& run : v.runs) d += run.d_total;
        std::cout << v.variant << " mean D_total " << d / static_cast<double>(v.runs.size());
        if (v.cat_efficiency) std::cout << " cat_efficiency " << *v.cat_efficiency;
        std::cout << "\n";
      }
    } else if (probe->parsed()) {
      const json r = run_probe(cfg);
      std::cout << "lipschitz estimate " << r["lipschitz_estimate"] << " from " << r["accepted_pairs"]
                << " pairs\n";
    }
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const ValidationError& e) {
    std::cerr << "validation error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "runtime failure: " << e.what() << "\n";
    return 3;
  }
  return 0;
}
