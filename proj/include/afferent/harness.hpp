#pragma once

// Batch experiment driver behind the CLI: metrics, Welch statistics, reports
// and the simulate / train / evaluate / evolve / ablate / probe runs.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <exception>
#include <filesystem>
#include <limits>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <boost/math/distributions/students_t.hpp>
#include <json.hpp>

#include "afferent/config.hpp"
#include "afferent/io.hpp"

namespace afferent {

namespace fs = std::filesystem;

inline constexpr double kSafeActionThreshold = 0.3;

// ---------------------------------------------------------------------------
// Welch's t-test

struct WelchResult {
  double t = 0.0;
  double df = 0.0;
  double p = 1.0;
  bool degenerate = false;

  bool operator==(const WelchResult&) const = default;
};

/// Two-sided Welch test with Welch-Satterthwaite degrees of freedom. With
/// zero variance in both samples the result is flagged degenerate: t = +-inf
/// and p = 0 when the means differ, t = 0 and p = 1 when they agree.
inline WelchResult welch_test(std::span<const double> a, std::span<const double> b) {
  if (a.size() < 2 || b.size() < 2) throw ValidationError("welch_test needs at least two samples per group");
  auto moments = [](std::span<const double> x) {
    double m = 0.0;
    for (double v : x) m += v;
    m /= static_cast<double>(x.size());
    double ss = 0.0;
    for (double v : x) ss += (v - m) * (v - m);
    return std::pair{m, ss / static_cast<double>(x.size() - 1)};
  };
  const auto [ma, va] = moments(a);
  const auto [mb, vb] = moments(b);
  const double na = static_cast<double>(a.size());
  const double nb = static_cast<double>(b.size());
  const double sa = va / na;
  const double sb = vb / nb;

  WelchResult r;
  r.df = na + nb - 2.0;
  if (sa + sb == 0.0) {
    r.degenerate = true;
    if (ma == mb) {
      r.t = 0.0;
      r.p = 1.0;
    } else {
      r.t = ma > mb ? std::numeric_limits<double>::infinity() : -std::numeric_limits<double>::infinity();
      r.p = 0.0;
    }
    return r;
  }
  r.t = (ma - mb) / std::sqrt(sa + sb);
  r.df = (sa + sb) * (sa + sb) / (sa * sa / (na - 1.0) + sb * sb / (nb - 1.0));
  const boost::math::students_t dist(r.df);
  r.p = std::min(1.0, 2.0 * boost::math::cdf(boost::math::complement(dist, std::abs(r.t))));
  return r;
}

// ---------------------------------------------------------------------------
// Metrics

struct AgeLog {
  double age = 0.0;
  Vec cats;     // empty when the variant has no CAT
  Vec actions;
  Vec recall;   // empty when the variant has no memory
};

struct AgeMetrics {
  double age = 0.0;
  std::optional<double> mean_cat;
  double mean_action = 0.0;
  double safe_action_fraction = 0.0;
  std::optional<double> mean_recall_risk;

  bool operator==(const AgeMetrics&) const = default;
};

struct RunRecord {
  std::string id;
  std::string variant;
  double age = 0.0;
  std::uint64_t seed = 0;
  double d_total = 0.0;      // mean terminal damage over evaluation episodes
  double performance = 0.0;  // mean per-step task reward
  std::optional<double> mean_cat;
  double mean_action = 0.0;
  double safe_action_fraction = 0.0;
  std::optional<double> mean_recall_risk;

  bool operator==(const RunRecord&) const = default;
};

struct Comparison {
  std::string metric;
  std::string a;
  std::string b;
  WelchResult welch;

  bool operator==(const Comparison&) const = default;
};

struct MetricsReport {
  std::string variant;
  std::string scenario;
  std::vector<AgeMetrics> per_age;
  std::optional<double> cat_efficiency;
  std::optional<double> age_robustness;
  std::vector<RunRecord> runs;
  std::vector<Comparison> comparisons;
  std::size_t bonferroni = 0;  // multiplier for the comparisons, applied by the reader

  bool operator==(const MetricsReport&) const = default;
};

inline double mean_of(std::span<const double> v) {
  if (v.empty()) throw ValidationError("mean of an empty sample");
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

inline double safe_fraction(std::span<const double> actions, double threshold = kSafeActionThreshold) {
  if (actions.empty()) throw ValidationError("no actions logged");
  std::size_t n = 0;
  for (double a : actions) n += a < threshold ? 1 : 0;
  return static_cast<double>(n) / static_cast<double>(actions.size());
}

/// Per-age and pooled metrics. Logs sharing an age are pooled. CAT
/// efficiency is 1 / (mean CAT over every age); age robustness is
/// |mean CAT(oldest) - mean CAT(youngest)|.
inline MetricsReport compute_metrics(std::span<const AgeLog> logs) {
  if (logs.empty()) throw ValidationError("no evaluation logs");
  std::map<double, AgeLog> by_age;
  for (const AgeLog& l : logs) {
    if (l.actions.empty()) throw ValidationError("empty action log");
    AgeLog& dst = by_age[l.age];
    dst.age = l.age;
    dst.cats.insert(dst.cats.end(), l.cats.begin(), l.cats.end());
    dst.actions.insert(dst.actions.end(), l.actions.begin(), l.actions.end());
    dst.recall.insert(dst.recall.end(), l.recall.begin(), l.recall.end());
  }
  if (by_age.size() < 2) throw ValidationError("metrics need logs for at least two ages");
  const bool has_cat = !by_age.begin()->second.cats.empty();
  const bool has_recall = !by_age.begin()->second.recall.empty();
  for (const auto& [age, l] : by_age) {
    if (l.cats.empty() == has_cat || l.recall.empty() == has_recall) {
      throw ValidationError("logs disagree on which signals are present");
    }
  }

  MetricsReport r;
  double cat_sum = 0.0;
  std::size_t cat_n = 0;
  for (const auto& [age, l] : by_age) {
    AgeMetrics m;
    m.age = age;
    m.mean_action = mean_of(l.actions);
    m.safe_action_fraction = safe_fraction(l.actions);
    if (has_cat) {
      m.mean_cat = mean_of(l.cats);
      for (double c : l.cats) cat_sum += c;
      cat_n += l.cats.size();
    }
    if (has_recall) m.mean_recall_risk = mean_of(l.recall);
    r.per_age.push_back(m);
  }
  if (has_cat) {
    const double pooled = cat_sum / static_cast<double>(cat_n);
    r.cat_efficiency = pooled > 0.0 ? 1.0 / pooled : std::numeric_limits<double>::infinity();
    r.age_robustness = std::abs(*r.per_age.back().mean_cat - *r.per_age.front().mean_cat);
  }
  return r;
}

// ---------------------------------------------------------------------------
// JSON (non-finite numbers are written as the strings "inf", "-inf", "nan")

inline json num_json(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  return v;
}

inline double num_from(const json& j) {
  if (j.is_string()) {
    const auto s = j.get<std::string>();
    if (s == "inf") return std::numeric_limits<double>::infinity();
    if (s == "-inf") return -std::numeric_limits<double>::infinity();
    if (s == "nan") return std::numeric_limits<double>::quiet_NaN();
    throw ConfigError("bad number '" + s + "'");
  }
  return j.get<double>();
}

inline void put_opt(json& j, const char* key, const std::optional<double>& v) {
  if (v) j[key] = num_json(*v);
}

inline std::optional<double> get_opt(const json& j, const char* key) {
  if (!j.contains(key)) return std::nullopt;
  return num_from(j.at(key));
}

inline json to_json(const WelchResult& w) {
  return json{{"t", num_json(w.t)}, {"df", num_json(w.df)}, {"p", num_json(w.p)}, {"degenerate", w.degenerate}};
}

inline json to_json(const MetricsReport& r) {
  json per_age = json::array();
  for (const auto& a : r.per_age) {
    json j{{"age", a.age}, {"mean_action", a.mean_action}, {"safe_action_fraction", a.safe_action_fraction}};
    put_opt(j, "mean_cat", a.mean_cat);
    put_opt(j, "mean_recall_risk", a.mean_recall_risk);
    per_age.push_back(j);
  }
  json runs = json::array();
  for (const auto& x : r.runs) {
    json j{{"id", x.id},
           {"variant", x.variant},
           {"age", x.age},
           {"seed", x.seed},
           {"d_total", x.d_total},
           {"performance", x.performance},
           {"mean_action", x.mean_action},
           {"safe_action_fraction", x.safe_action_fraction}};
    put_opt(j, "mean_cat", x.mean_cat);
    put_opt(j, "mean_recall_risk", x.mean_recall_risk);
    runs.push_back(j);
  }
  json comps = json::array();
  for (const auto& c : r.comparisons) {
    comps.push_back({{"metric", c.metric}, {"a", c.a}, {"b", c.b}, {"welch", to_json(c.welch)}});
  }
  json j{{"variant", r.variant},
         {"scenario", r.scenario},
         {"per_age", per_age},
         {"runs", runs},
         {"comparisons", comps},
         {"bonferroni", r.bonferroni}};
  put_opt(j, "cat_efficiency", r.cat_efficiency);
  put_opt(j, "age_robustness", r.age_robustness);
  return j;
}

inline MetricsReport metrics_from_json(const json& j) {
  try {
    MetricsReport r;
    r.variant = j.at("variant").get<std::string>();
    r.scenario = j.at("scenario").get<std::string>();
    for (const auto& a : j.at("per_age")) {
      AgeMetrics m;
      m.age = a.at("age").get<double>();
      m.mean_action = a.at("mean_action").get<double>();
      m.safe_action_fraction = a.at("safe_action_fraction").get<double>();
      m.mean_cat = get_opt(a, "mean_cat");
      m.mean_recall_risk = get_opt(a, "mean_recall_risk");
      r.per_age.push_back(m);
    }
    for (const auto& x : j.at("runs")) {
      RunRecord rr;
      rr.id = x.at("id").get<std::string>();
      rr.variant = x.at("variant").get<std::string>();
      rr.age = x.at("age").get<double>();
      rr.seed = x.at("seed").get<std::uint64_t>();
      rr.d_total = x.at("d_total").get<double>();
      rr.performance = x.at("performance").get<double>();
      rr.mean_action = x.at("mean_action").get<double>();
      rr.safe_action_fraction = x.at("safe_action_fraction").get<double>();
      rr.mean_cat = get_opt(x, "mean_cat");
      rr.mean_recall_risk = get_opt(x, "mean_recall_risk");
      r.runs.push_back(rr);
    }
    for (const auto& c : j.at("comparisons")) {
      Comparison cmp;
      cmp.metric = c.at("metric").get<std::string>();
      cmp.a = c.at("a").get<std::string>();
      cmp.b = c.at("b").get<std::string>();
      const json& w = c.at("welch");
      cmp.welch = {num_from(w.at("t")), num_from(w.at("df")), num_from(w.at("p")), w.at("degenerate").get<bool>()};
      r.comparisons.push_back(cmp);
    }
    r.bonferroni = j.at("bonferroni").get<std::size_t>();
    r.cat_efficiency = get_opt(j, "cat_efficiency");
    r.age_robustness = get_opt(j, "age_robustness");
    return r;
  } catch (const json::exception& e) {
    throw ConfigError(std::string("malformed metrics report: ") + e.what());
  }
}

// ---------------------------------------------------------------------------
// Output tree

struct OutputTree {
  fs::path root;

  explicit OutputTree(fs::path r) : root(std::move(r)) {
    std::error_code ec;
    for (const char* d : {"runs", "reports", "curves", "genomes", "policies"}) {
      fs::create_directories(root / d, ec);
      if (ec) throw RuntimeFailure("cannot create output directory " + (root / d).string() + ": " + ec.message());
    }
  }
  fs::path runs(const std::string& f) const { return root / "runs" / f; }
  fs::path reports(const std::string& f) const { return root / "reports" / f; }
  fs::path curves(const std::string& f) const { return root / "curves" / f; }
  fs::path genomes(const std::string& f) const { return root / "genomes" / f; }
  fs::path policies(const std::string& f) const { return root / "policies" / f; }
};

inline json config_json(const ExperimentConfig& c) {
  ExperimentConfig copy = c;
  json j = json::object();
  for (const auto& f : config_fields(copy)) j[f.key] = f.get();
  return j;
}

inline std::string run_id(Variant v, double age, std::uint64_t seed) {
  return to_string(v) + "_age" + cfgio::format_number(age) + "_seed" + std::to_string(seed);
}

inline std::string curve_csv(std::span<const IterationStats> curve) {
  std::string s = "step,mean_reward,mean_cat,mean_delta_d,mean_action,clip_fraction,policy_loss,value_loss,entropy\n";
  for (const auto& c : curve) {
    s += std::to_string(c.step) + "," + fmt_num(c.mean_reward) + "," + fmt_num(c.mean_cat) + "," +
         fmt_num(c.mean_delta_d) + "," + fmt_num(c.mean_action) + "," + fmt_num(c.clip_fraction) + "," +
         fmt_num(c.policy_loss) + "," + fmt_num(c.value_loss) + "," + fmt_num(c.entropy) + "\n";
  }
  return s;
}

inline std::string evolution_csv(std::span<const GenerationStats> history) {
  std::string s = "generation,best,mean,std\n";
  for (const auto& g : history) {
    s += std::to_string(g.generation) + "," + fmt_num(g.best) + "," + fmt_num(g.mean) + "," + fmt_num(g.std) + "\n";
  }
  return s;
}

/// Per-step evaluation log. Signals a variant does not have are left out,
/// so no_cat logs never carry a "cat" field.
inline std::string step_log_jsonl(std::span<const StepLog> steps, const AgentConfig& agent) {
  std::string s;
  for (const StepLog& st : steps) {
    json j{{"episode", st.episode},
           {"t", st.t},
           {"action", st.action},
           {"stress", st.x[0]},
           {"strain", st.x[1]},
           {"shear", st.x[2]},
           {"delta_d", st.delta_d},
           {"damage", st.damage},
           {"task_reward", st.task_reward}};
    if (agent.use_cat) j["cat"] = st.cat;
    if (agent.use_cat && agent.use_memory) {
      j["y_hat"] = st.y_hat;
      j["d_mean"] = st.d_mean;
    }
    s += j.dump() + "\n";
  }
  return s;
}

// ---------------------------------------------------------------------------
// Building blocks

namespace tags {
inline constexpr std::uint64_t kPredictive = 0x9ED;
inline constexpr std::uint64_t kRun = 0x2A11;
inline constexpr std::uint64_t kEvolution = 0xE70;
inline constexpr std::uint64_t kSimulate = 0x51A;
inline constexpr std::uint64_t kProbe = 0x9B0;
}  // namespace tags

inline std::shared_ptr<const PredictiveComponent> make_predictive(const ExperimentConfig& cfg) {
  return build_predictive(derive_seed(cfg.seed, tags::kPredictive, 0), cfg.predictive);
}

inline TrainSpec make_train_spec(const ExperimentConfig& cfg, Variant v, double age, std::uint64_t seed) {
  TrainSpec ts;
  ts.scenario = cfg.scenario_config(cfg.scenario);
  ts.age = age;
  ts.episode_len = cfg.episode_len;
  ts.ppo = cfg.ppo;
  ts.reward = cfg.reward;
  ts.agent = cfg.agent;
  ts.seed = derive_seed(cfg.seed, tags::kRun, seed);
  apply_variant(v, ts.agent, ts.reward);
  return ts;
}

inline FitnessContext make_fitness_context(const ExperimentConfig& cfg,
                                           std::shared_ptr<const PredictiveComponent> pred) {
  FitnessContext ctx;
  ctx.train = make_train_spec(cfg, Variant::full, cfg.evolution_ages.front(), 0);
  ctx.ages = cfg.evolution_ages;
  ctx.predictive = std::move(pred);
  ctx.dt = cfg.dt;
  return ctx;
}

inline EvolutionSpec make_evolution_spec(const ExperimentConfig& cfg) {
  EvolutionSpec es = cfg.evolution;
  es.m = cfg.m;
  es.k = cfg.k;
  es.workers = cfg.workers;
  es.seed = derive_seed(cfg.seed, tags::kEvolution, cfg.evolution.seed);
  return es;
}

struct EvolveOutput {
  EvolutionResult result;
  GenomeDocument best;
};

/// Outer loop with outputs: genomes/gen_NNN.bin per generation best,
/// genomes/best.{bin,json}, curves/evolution.csv, reports/evolution.json.
inline EvolveOutput run_evolve(const ExperimentConfig& cfg, const OutputTree& out,
                               std::shared_ptr<const PredictiveComponent> pred) {
  const FitnessFn fitness = make_fitness_fn(cfg.fitness, make_fitness_context(cfg, pred));
  EvolveOutput o;
  o.result = run_evolution(make_evolution_spec(cfg), cfg.fitness, fitness, [&](const GenerationStats& g) {
    char name[32];
    std::snprintf(name, sizeof(name), "gen_%03lld.bin", static_cast<long long>(g.generation));
    save_genome(out.genomes(name), {g.best_genome, {g.generation, g.best}});
  });
  const std::int64_t best_gen = [&] {
    for (const auto& g : o.result.history) {
      if (g.best == o.result.best_fitness) return g.generation;
    }
    return std::int64_t{-1};
  }();
  o.best = {o.result.best, {best_gen, o.result.best_fitness}};
  save_genome(out.genomes("best.bin"), o.best);
  save_genome(out.genomes("best.json"), o.best);
  write_text(out.curves("evolution.csv"), evolution_csv(o.result.history));

  json hist = json::array();
  for (const auto& g : o.result.history) {
    hist.push_back({{"generation", g.generation}, {"best", num_json(g.best)}, {"mean", num_json(g.mean)},
                    {"std", num_json(g.std)}});
  }
  const json report{{"history", hist},
                    {"best_fitness", num_json(o.result.best_fitness)},
                    {"best_generation", best_gen},
                    {"final_sigma", o.result.final_state.sigma},
                    {"config", config_json(cfg)}};
  write_text(out.reports("evolution.json"), report.dump(2) + "\n");
  return o;
}

/// The configured genome file, the hand-designed baseline for no_evolution,
/// or else a freshly evolved genome.
inline Genome resolve_genome(const ExperimentConfig& cfg, Variant v, const OutputTree& out,
                             std::shared_ptr<const PredictiveComponent> pred,
                             std::optional<Genome>& evolved) {
  if (v == Variant::no_evolution) return baseline_genome(cfg.m, cfg.k, cfg.dt);
  if (!cfg.genome_path.empty()) {
    Genome g = load_genome(cfg.genome_path).genome;
    if (g.k != cfg.k) throw ConfigError("genome feature count does not match afferent.k");
    return g;
  }
  if (!evolved) evolved = run_evolve(cfg, out, std::move(pred)).best.genome;
  return *evolved;
}

struct RunOutput {
  RunRecord record;
  AgeLog log;
};

/// Trains one (variant, age, seed) agent, evaluates it, and writes
/// runs/<id>.jsonl, runs/memory_<id>.jsonl, curves/train_<id>.csv and
/// policies/<id>.json.
inline RunOutput train_and_evaluate(const ExperimentConfig& cfg, Variant v, double age, std::uint64_t seed,
                                    const Genome& genome, std::shared_ptr<const PredictiveComponent> pred,
                                    const OutputTree& out) {
  const AfferentArray array = decode_genome(genome, cfg.dt);
  const TrainSpec ts = make_train_spec(cfg, v, age, seed);
  const std::string id = run_id(v, age, seed);
  const TrainResult tr = rl_train(array, pred, ts);
  EvalSpec ev = cfg.eval;
  ev.keep_steps = true;
  const EvalResult er = evaluate_policy(tr.policy, array, pred, ts, &tr.memory, ev);

  write_text(out.runs(id + ".jsonl"), step_log_jsonl(er.steps, ts.agent));
  write_text(out.curves("train_" + id + ".csv"), curve_csv(tr.curve));
  json snapshot = config_json(cfg);
  snapshot["ablation"] = to_string(v);
  snapshot["run_age"] = age;
  snapshot["run_seed"] = seed;
  write_text(out.policies(id + ".json"), policy_to_json(tr.policy, snapshot).dump() + "\n");
  if (ts.agent.use_cat && ts.agent.use_memory) {
    std::ostringstream mem;
    write_episode_log(mem, tr.memory);
    write_text(out.runs("memory_" + id + ".jsonl"), mem.str());
  }

  RunOutput o;
  o.record.id = id;
  o.record.variant = to_string(v);
  o.record.age = age;
  o.record.seed = seed;
  o.record.d_total = er.mean_damage();
  o.record.performance = er.mean_performance();
  o.record.mean_action = mean_of(er.actions);
  o.record.safe_action_fraction = safe_fraction(er.actions);
  if (!er.cats.empty()) o.record.mean_cat = mean_of(er.cats);
  if (!er.recall.empty()) o.record.mean_recall_risk = mean_of(er.recall);
  o.log = {age, er.cats, er.actions, er.recall};
  return o;
}

/// Runs every (variant, age, seed) job on cfg.workers threads. Results come
/// back in job order. If any job fails, reports/failure_manifest.json lists
/// completed and failed run IDs and the first error is rethrown.
inline std::vector<RunOutput> run_jobs(const ExperimentConfig& cfg, const std::vector<Variant>& variants,
                                       const std::map<Variant, Genome>& genomes,
                                       std::shared_ptr<const PredictiveComponent> pred, const OutputTree& out) {
  struct Job {
    Variant v;
    double age;
    std::uint64_t seed;
  };
  std::vector<Job> jobs;
  for (Variant v : variants) {
    for (double age : cfg.ages) {
      for (std::uint64_t s : cfg.seeds) jobs.push_back({v, age, s});
    }
  }
  std::vector<std::optional<RunOutput>> results(jobs.size());
  std::vector<std::exception_ptr> errors(jobs.size());
  (void)parallel_map(jobs.size(), cfg.workers, [&](std::size_t i) {
    try {
      const Job& j = jobs[i];
      results[i] = train_and_evaluate(cfg, j.v, j.age, j.seed, genomes.at(j.v), pred, out);
    } catch (...) {
      errors[i] = std::current_exception();
    }
    return 0.0;
  });

  const auto first_error = std::find_if(errors.begin(), errors.end(), [](const auto& e) { return bool(e); });
  if (first_error != errors.end()) {
    json done = json::array();
    json failed = json::array();
    for (std::size_t i = 0; i < jobs.size(); ++i) {
      const std::string id = run_id(jobs[i].v, jobs[i].age, jobs[i].seed);
      if (results[i]) {
        done.push_back(id);
        continue;
      }
      std::string msg = "unknown error";
      try {
        std::rethrow_exception(errors[i]);
      } catch (const std::exception& e) {
        msg = e.what();
      } catch (...) {
      }
      failed.push_back({{"id", id}, {"error", msg}});
    }
    write_text(out.reports("failure_manifest.json"),
               json{{"completed", done}, {"failed", failed}}.dump(2) + "\n");
    std::rethrow_exception(*first_error);
  }
  std::vector<RunOutput> outv;
  for (auto& r : results) outv.push_back(std::move(*r));
  return outv;
}

inline MetricsReport variant_report(const ExperimentConfig& cfg, Variant v, std::span<const RunOutput> runs) {
  std::vector<AgeLog> logs;
  std::vector<RunRecord> records;
  for (const auto& r : runs) {
    if (r.record.variant != to_string(v)) continue;
    logs.push_back(r.log);
    records.push_back(r.record);
  }
  MetricsReport rep = compute_metrics(logs);
  rep.variant = to_string(v);
  rep.scenario = cfg.scenario;
  rep.runs = std::move(records);
  return rep;
}

// ---------------------------------------------------------------------------
// Subcommands

struct AblationReport {
  std::vector<MetricsReport> variants;
  std::vector<Comparison> comparisons;
  std::size_t bonferroni = 0;
};

inline json to_json(const AblationReport& r, const ExperimentConfig& cfg) {
  json vs = json::array();
  for (const auto& v : r.variants) vs.push_back(to_json(v));
  json comps = json::array();
  for (const auto& c : r.comparisons) {
    comps.push_back({{"metric", c.metric}, {"a", c.a}, {"b", c.b}, {"welch", to_json(c.welch)}});
  }
  return json{{"variants", vs}, {"comparisons", comps}, {"bonferroni", r.bonferroni}, {"config", config_json(cfg)}};
}

/// Trains and evaluates each variant across ages and seeds, then compares
/// every variant against full on D_total and, where both have one, mean CAT.
inline AblationReport run_ablation(const ExperimentConfig& cfg) {
  cfg.validate();
  const OutputTree out(cfg.out);
  const auto pred = make_predictive(cfg);
  write_text(out.reports("safe_model.json"), safe_model_to_json(pred->model).dump(2) + "\n");

  std::optional<Genome> evolved;
  std::map<Variant, Genome> genomes;
  for (Variant v : cfg.variants) genomes[v] = resolve_genome(cfg, v, out, pred, evolved);
  if (evolved) save_genome(out.genomes("ablation.bin"), {*evolved, {}});

  const std::vector<RunOutput> runs = run_jobs(cfg, cfg.variants, genomes, pred, out);
  AblationReport rep;
  for (Variant v : cfg.variants) {
    rep.variants.push_back(variant_report(cfg, v, runs));
    write_text(out.reports("metrics_" + to_string(v) + ".json"), to_json(rep.variants.back()).dump(2) + "\n");
  }

  const auto full = std::find_if(rep.variants.begin(), rep.variants.end(),
                                 [](const MetricsReport& m) { return m.variant == "full"; });
  if (full != rep.variants.end()) {
    for (const auto& m : rep.variants) {
      if (&m == &*full || m.runs.size() < 2 || full->runs.size() < 2) continue;
      Vec da, db, ca, cb;
      for (const auto& r : m.runs) {
        da.push_back(r.d_total);
        if (r.mean_cat) ca.push_back(*r.mean_cat);
      }
      for (const auto& r : full->runs) {
        db.push_back(r.d_total);
        if (r.mean_cat) cb.push_back(*r.mean_cat);
      }
      rep.comparisons.push_back({"d_total", m.variant, "full", welch_test(da, db)});
      if (ca.size() == m.runs.size() && cb.size() == full->runs.size()) {
        rep.comparisons.push_back({"mean_cat", m.variant, "full", welch_test(ca, cb)});
      }
    }
  }
  rep.bonferroni = rep.comparisons.size();
  write_text(out.reports("ablation.json"), to_json(rep, cfg).dump(2) + "\n");
  return rep;
}

/// Trains and evaluates cfg.ablation across ages and seeds, or evaluates a
/// loaded checkpoint (fresh memory) when cfg.policy_path is set.
inline MetricsReport run_evaluate(const ExperimentConfig& cfg) {
  cfg.validate();
  const OutputTree out(cfg.out);
  const auto pred = make_predictive(cfg);
  std::optional<Genome> evolved;
  const Genome genome = resolve_genome(cfg, cfg.ablation, out, pred, evolved);

  MetricsReport rep;
  if (cfg.policy_path.empty()) {
    const auto runs = run_jobs(cfg, {cfg.ablation}, {{cfg.ablation, genome}}, pred, out);
    rep = variant_report(cfg, cfg.ablation, runs);
  } else {
    PolicyParams policy;
    try {
      policy = policy_from_json(json::parse(read_text(cfg.policy_path)));
    } catch (const json::exception& e) {
      throw ConfigError(std::string("cannot parse policy checkpoint: ") + e.what());
    }
    const AfferentArray array = decode_genome(genome, cfg.dt);
    std::vector<AgeLog> logs;
    std::vector<RunRecord> records;
    for (double age : cfg.ages) {
      const TrainSpec ts = make_train_spec(cfg, cfg.ablation, age, 0);
      EvalSpec ev = cfg.eval;
      ev.keep_steps = true;
      const EvalResult er = evaluate_policy(policy, array, pred, ts, nullptr, ev);
      const std::string id = "checkpoint_" + to_string(cfg.ablation) + "_age" + cfgio::format_number(age);
      write_text(out.runs(id + ".jsonl"), step_log_jsonl(er.steps, ts.agent));
      RunRecord r;
      r.id = id;
      r.variant = to_string(cfg.ablation);
      r.age = age;
      r.d_total = er.mean_damage();
      r.performance = er.mean_performance();
      r.mean_action = mean_of(er.actions);
      r.safe_action_fraction = safe_fraction(er.actions);
      if (!er.cats.empty()) r.mean_cat = mean_of(er.cats);
      if (!er.recall.empty()) r.mean_recall_risk = mean_of(er.recall);
      records.push_back(r);
      logs.push_back({age, er.cats, er.actions, er.recall});
    }
    rep = compute_metrics(logs);
    rep.variant = to_string(cfg.ablation);
    rep.scenario = cfg.scenario;
    rep.runs = std::move(records);
  }
  json j = to_json(rep);
  j["config"] = config_json(cfg);
  write_text(out.reports("evaluate_" + to_string(cfg.ablation) + ".json"), j.dump(2) + "\n");
  return rep;
}

/// Trains cfg.ablation for every (age, seed) and reports the final training
/// statistics of each run.
inline json run_train(const ExperimentConfig& cfg) {
  cfg.validate();
  const OutputTree out(cfg.out);
  const auto pred = make_predictive(cfg);
  std::optional<Genome> evolved;
  const Genome genome = resolve_genome(cfg, cfg.ablation, out, pred, evolved);
  const AfferentArray array = decode_genome(genome, cfg.dt);

  struct Job {
    double age;
    std::uint64_t seed;
  };
  std::vector<Job> jobs;
  for (double age : cfg.ages) {
    for (std::uint64_t s : cfg.seeds) jobs.push_back({age, s});
  }
  std::vector<json> rows(jobs.size());
  (void)parallel_map(jobs.size(), cfg.workers, [&](std::size_t i) {
    const TrainSpec ts = make_train_spec(cfg, cfg.ablation, jobs[i].age, jobs[i].seed);
    const std::string id = run_id(cfg.ablation, jobs[i].age, jobs[i].seed);
    const TrainResult tr = rl_train(array, pred, ts);
    write_text(out.curves("train_" + id + ".csv"), curve_csv(tr.curve));
    json snapshot = config_json(cfg);
    snapshot["run_age"] = jobs[i].age;
    snapshot["run_seed"] = jobs[i].seed;
    write_text(out.policies(id + ".json"), policy_to_json(tr.policy, snapshot).dump() + "\n");
    json row{{"id", id}, {"age", jobs[i].age}, {"seed", jobs[i].seed}, {"iterations", tr.curve.size()},
             {"episodes_in_memory", tr.memory.size()}};
    if (!tr.curve.empty()) {
      row["final_mean_reward"] = tr.curve.back().mean_reward;
      row["final_mean_action"] = tr.curve.back().mean_action;
      row["final_mean_delta_d"] = tr.curve.back().mean_delta_d;
      if (cfg.ablation != Variant::no_cat) row["final_mean_cat"] = tr.curve.back().mean_cat;
    }
    rows[i] = row;
    return 0.0;
  });
  const json report{{"variant", to_string(cfg.ablation)}, {"runs", rows}, {"config", config_json(cfg)}};
  write_text(out.reports("train_" + to_string(cfg.ablation) + ".json"), report.dump(2) + "\n");
  return report;
}

/// Open-loop twin rollouts at a constant work intensity: one JSONL file per
/// (scenario, repeat) in runs/, plus a summary in reports/simulate.json. The
/// CAT is the mechanical CAT of the configured (or baseline) genome.
inline json run_simulate(const ExperimentConfig& cfg) {
  cfg.validate();
  const OutputTree out(cfg.out);
  const Genome genome = cfg.genome_path.empty() ? baseline_genome(cfg.m, cfg.k, cfg.dt)
                                                : load_genome(cfg.genome_path).genome;
  json summary = json::array();
  for (std::size_t si = 0; si < cfg.simulate.scenarios.size(); ++si) {
    const ScenarioConfig sc = cfg.scenario_config(cfg.simulate.scenarios[si]);
    KneeTwin env(sc, cfg.simulate.steps);
    for (std::size_t rep = 0; rep < cfg.simulate.repeats; ++rep) {
      AfferentArray array = decode_genome(genome, cfg.dt);
      EnvState s = env.reset(cfg.simulate.age, derive_seed(cfg.seed, tags::kSimulate, si * 1000 + rep));
      std::string lines;
      double stress = 0.0;
      double cat_sum = 0.0;
      while (true) {
        const std::int64_t t = s.t;
        const StepResult r = env.step(s, cfg.simulate.action);
        const double cat = array.compute_cat(r.x_next);
        lines += rollout_record(static_cast<double>(t), r.x_next, sc, cfg.simulate.age, cat, r.delta_d).dump() + "\n";
        stress += r.x_next[0];
        cat_sum += cat;
        if (r.done) break;
      }
      const std::string name = "simulate_" + sc.name + "_rep" + std::to_string(rep) + ".jsonl";
      write_text(out.runs(name), lines);
      const double n = static_cast<double>(cfg.simulate.steps);
      summary.push_back({{"file", name}, {"scenario", sc.name}, {"repeat", rep}, {"mean_stress", stress / n},
                         {"mean_cat", cat_sum / n}, {"damage", s.damage}});
    }
  }
  const json report{{"runs", summary}, {"config", config_json(cfg)}};
  write_text(out.reports("simulate.json"), report.dump(2) + "\n");
  return report;
}

/// Local smoothness of the fitness landscape around the configured (or
/// baseline) genome, with common random numbers across evaluations.
inline json run_probe(const ExperimentConfig& cfg) {
  cfg.validate();
  const OutputTree out(cfg.out);
  const auto pred = make_predictive(cfg);
  const Genome genome = cfg.genome_path.empty() ? baseline_genome(cfg.m, cfg.k, cfg.dt)
                                                : load_genome(cfg.genome_path).genome;
  const FitnessFn fitness = make_fitness_fn(cfg.fitness, make_fitness_context(cfg, pred));
  const std::uint64_t rl_seed = derive_seed(cfg.seed, tags::kProbe, 0);
  const ProbeResult pr = lipschitz_probe(
      genome, [&](const Genome& g) { return fitness(g, cfg.fitness.rl_steps_short, rl_seed, 1); },
      cfg.probe.pairs, cfg.probe.radius, cfg.probe.pert_sd, derive_seed(cfg.seed, tags::kProbe, 1),
      cfg.probe.quantile);
  json ratios = json::array();
  for (double r : pr.ratios) ratios.push_back(num_json(r));
  const json report{{"lipschitz_estimate", num_json(pr.constant)},
                    {"accepted_pairs", pr.accepted},
                    {"ratios", ratios},
                    {"config", config_json(cfg)}};
  write_text(out.reports("lipschitz.json"), report.dump(2) + "\n");
  return report;
}

}  // namespace afferent
