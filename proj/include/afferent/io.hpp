#pragma once

// File formats: genome documents (binary and JSON), policy checkpoints,
// safe-state models, episode logs and per-step rollout logs.

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "afferent/afferent_core.hpp"
#include "afferent/env_twin.hpp"
#include "afferent/memory_amm.hpp"
#include "afferent/policy_rl.hpp"
#include "afferent/predictive.hpp"

namespace afferent {

using json = nlohmann::json;

struct GenomeMeta {
  std::int64_t generation = -1;
  double fitness = 0.0;
};

struct GenomeDocument {
  Genome genome;
  GenomeMeta meta;
};

inline json genome_to_json(const GenomeDocument& d) {
  return json{{"m", d.genome.m},
              {"k", d.genome.k},
              {"raw", d.genome.raw},
              {"meta", {{"generation", d.meta.generation}, {"fitness", d.meta.fitness}}}};
}

inline GenomeDocument genome_from_json(const json& j) {
  GenomeDocument d;
  try {
    d.genome.m = j.at("m").get<std::size_t>();
    d.genome.k = j.at("k").get<std::size_t>();
    d.genome.raw = j.at("raw").get<Vec>();
    if (j.contains("meta")) {
      d.meta.generation = j["meta"].value("generation", std::int64_t{-1});
      d.meta.fitness = j["meta"].value("fitness", 0.0);
    }
  } catch (const json::exception& e) {
    throw ConfigError(std::string("malformed genome document: ") + e.what());
  }
  if (d.genome.raw.size() != Genome::length_for(d.genome.m, d.genome.k)) {
    throw ConfigError("genome document length does not equal m*(k+4)");
  }
  return d;
}

// Binary layout, little endian:
//   "AFGN" | u32 version=1 | u32 m | u32 k | i64 generation | f64 fitness |
//   f64 raw[m*(k+4)]
inline constexpr char kGenomeMagic[4] = {'A', 'F', 'G', 'N'};

namespace detail {
template <typename T>
void put(std::ostream& os, T v) {
  static_assert(std::endian::native == std::endian::little, "little-endian host required");
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}
template <typename T>
T get(std::istream& is) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) throw ConfigError("truncated genome file");
  return v;
}
}  // namespace detail

inline void write_genome_binary(std::ostream& os, const GenomeDocument& d) {
  os.write(kGenomeMagic, 4);
  detail::put<std::uint32_t>(os, 1);
  detail::put<std::uint32_t>(os, static_cast<std::uint32_t>(d.genome.m));
  detail::put<std::uint32_t>(os, static_cast<std::uint32_t>(d.genome.k));
  detail::put<std::int64_t>(os, d.meta.generation);
  detail::put<double>(os, d.meta.fitness);
  for (double v : d.genome.raw) detail::put<double>(os, v);
}

inline GenomeDocument read_genome_binary(std::istream& is) {
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, kGenomeMagic, 4) != 0) throw ConfigError("not a genome file");
  if (detail::get<std::uint32_t>(is) != 1) throw ConfigError("unsupported genome file version");
  GenomeDocument d;
  d.genome.m = detail::get<std::uint32_t>(is);
  d.genome.k = detail::get<std::uint32_t>(is);
  d.meta.generation = detail::get<std::int64_t>(is);
  d.meta.fitness = detail::get<double>(is);
  d.genome.raw.resize(Genome::length_for(d.genome.m, d.genome.k));
  for (double& v : d.genome.raw) v = detail::get<double>(is);
  return d;
}

/// Chooses the container by extension: ".json" is JSON, anything else binary.
inline void save_genome(const std::filesystem::path& path, const GenomeDocument& d) {
  if (path.extension() == ".json") {
    std::ofstream os(path);
    if (!os) throw RuntimeFailure("cannot write " + path.string());
    os << genome_to_json(d).dump(2) << "\n";
  } else {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw RuntimeFailure("cannot write " + path.string());
    write_genome_binary(os, d);
  }
}

inline GenomeDocument load_genome(const std::filesystem::path& path) {
  if (path.extension() == ".json") {
    std::ifstream is(path);
    if (!is) throw ConfigError("cannot open genome file " + path.string());
    json j;
    try {
      is >> j;
    } catch (const json::exception& e) {
      throw ConfigError(std::string("cannot parse genome JSON: ") + e.what());
    }
    return genome_from_json(j);
  }
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ConfigError("cannot open genome file " + path.string());
  return read_genome_binary(is);
}

// ---------------------------------------------------------------------------

inline json mlp_to_json(const Mlp& net) {
  Vec flat(net.num_params());
  net.write_params(flat.data());
  return json{{"sizes", net.sizes()}, {"params", flat}};
}

inline Mlp mlp_from_json(const json& j) {
  Mlp net(j.at("sizes").get<std::vector<int>>(), 0, 1.0);
  const Vec flat = j.at("params").get<Vec>();
  if (flat.size() != net.num_params()) throw ConfigError("MLP parameter count mismatch");
  net.read_params(flat.data());
  return net;
}

/// Policy checkpoint: weights, log_std, observation layout and the training
/// configuration that produced it.
inline json policy_to_json(const PolicyParams& p, const json& config_snapshot = json::object()) {
  return json{{"actor", mlp_to_json(p.actor)},
              {"critic", mlp_to_json(p.critic)},
              {"log_std", p.log_std},
              {"obs_layout", to_string(p.layout)},
              {"config", config_snapshot}};
}

inline PolicyParams policy_from_json(const json& j) {
  try {
    PolicyParams p;
    p.actor = mlp_from_json(j.at("actor"));
    p.critic = mlp_from_json(j.at("critic"));
    p.log_std = j.at("log_std").get<double>();
    p.layout = parse_layout(j.at("obs_layout").get<std::string>());
    return p;
  } catch (const json::exception& e) {
    throw ConfigError(std::string("malformed policy checkpoint: ") + e.what());
  }
}

inline json safe_model_to_json(const SafeStateModel& m) {
  std::vector<Vec> rows;
  for (Eigen::Index r = 0; r < m.A.rows(); ++r) {
    Vec row(static_cast<std::size_t>(m.A.cols()));
    for (Eigen::Index c = 0; c < m.A.cols(); ++c) row[static_cast<std::size_t>(c)] = m.A(r, c);
    rows.push_back(row);
  }
  return json{{"A", rows},
              {"b", Vec(m.b.data(), m.b.data() + m.b.size())},
              {"k", m.k},
              {"s", m.s},
              {"residual_rms", m.residual_rms}};
}

inline SafeStateModel safe_model_from_json(const json& j) {
  SafeStateModel m;
  m.k = j.at("k").get<std::size_t>();
  m.s = j.at("s").get<std::size_t>();
  m.residual_rms = j.at("residual_rms").get<double>();
  const auto rows = j.at("A").get<std::vector<Vec>>();
  m.A.resize(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(m.k + 1 + m.s));
  for (std::size_t r = 0; r < rows.size(); ++r) {
    if (rows[r].size() != m.k + 1 + m.s) throw ConfigError("safe-state model row length mismatch");
    for (std::size_t c = 0; c < rows[r].size(); ++c) {
      m.A(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = rows[r][c];
    }
  }
  const Vec b = j.at("b").get<Vec>();
  m.b = Eigen::Map<const Eigen::VectorXd>(b.data(), static_cast<Eigen::Index>(b.size()));
  return m;
}

// ---------------------------------------------------------------------------
// JSON-lines

inline json episode_to_json(const Episode& e) {
  return json{{"t_event", e.t_event},
              {"scenario", e.scenario},
              {"key", e.key},
              {"delta", e.delta},
              {"cat_hist", e.cat_hist}};
}

inline void write_episode_log(std::ostream& os, const MemoryStore& store) {
  for (const Episode& e : store.episodes()) os << episode_to_json(e).dump() << "\n";
}

/// One simulated time step in the rollout log format.
inline json rollout_record(double time, const Features& x, const ScenarioConfig& cfg, double age,
                           double cat, double delta_d) {
  return json{{"time", time},
              {"stress", x[0]},
              {"strain", x[1]},
              {"shear", x[2]},
              {"scenario", cfg.name},
              {"load_factor", load_factor(cfg, age)},
              {"instability_index", cfg.instability},
              {"cat", cat},
              {"damage_increment", delta_d}};
}

inline const std::vector<std::string>& rollout_fields() {
  static const std::vector<std::string> f{"time",        "stress",            "strain",
                                          "shear",       "scenario",          "load_factor",
                                          "instability_index", "cat",         "damage_increment"};
  return f;
}

inline void write_text(const std::filesystem::path& path, const std::string& content) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw RuntimeFailure("cannot write " + path.string());
  os << content;
  if (!os) throw RuntimeFailure("write failed for " + path.string());
}

inline std::string read_text(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ConfigError("cannot read " + path.string());
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

/// Fixed-format number for CSV cells (round-trip precision).
inline std::string fmt_num(double v) {
  std::ostringstream ss;
  ss << std::setprecision(17) << v;
  return ss.str();
}

}  // namespace afferent
