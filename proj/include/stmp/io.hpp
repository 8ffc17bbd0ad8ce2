#pragma once

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <ostream>
#include <sstream>
#include <string>

#include <json.hpp>

#include "stmp/core.hpp"
#include "stmp/msgpass.hpp"
#include "stmp/operators.hpp"
#include "stmp/priors.hpp"
#include "stmp/quantizer.hpp"
#include "stmp/score_matching.hpp"
#include "stmp/state_evolution.hpp"

namespace stmp::io {

using json = nlohmann::json;

/// Configuration error pointing at the offending field.
struct ConfigError : InvalidArgument {
  ConfigError(const std::string& field, const std::string& msg) : InvalidArgument(field + ": " + msg) {}
};

namespace detail {

inline const json& field(const json& j, const std::string& parent, const char* key) {
  if (!j.is_object() || !j.contains(key)) throw ConfigError(parent + "." + key, "missing required field");
  return j.at(key);
}

template <class T>
T get(const json& j, const std::string& parent, const char* key) {
  const json& v = field(j, parent, key);
  try {
    return v.get<T>();
  } catch (const json::exception&) {
    throw ConfigError(parent + "." + key, "has the wrong type: " + v.dump());
  }
}

template <class T>
T get_or(const json& j, const std::string& parent, const char* key, T fallback) {
  if (!j.is_object() || !j.contains(key)) return fallback;
  return get<T>(j, parent, key);
}

// NaN has no JSON encoding; write null.
inline json number(double v) { return std::isfinite(v) ? json(v) : json(nullptr); }

}  // namespace detail

// ---- priors

inline json prior_to_json(const Prior& p) {
  switch (p.kind()) {
    case PriorKind::gaussian:
      return {{"kind", "gaussian"}, {"mean", p.components()[0].mean}, {"variance", p.components()[0].variance}};
    case PriorKind::bernoulli_gaussian:
      return {{"kind", "bernoulli_gaussian"}, {"sparsity", p.sparsity()},
              {"slab_variance", p.components().back().variance}};
    case PriorKind::gmm: {
      json w = json::array(), m = json::array(), v = json::array();
      for (const auto& c : p.components()) {
        w.push_back(c.weight);
        m.push_back(c.mean);
        v.push_back(c.variance);
      }
      return {{"kind", "gmm"}, {"weights", w}, {"means", m}, {"variances", v}};
    }
  }
  return {};
}

inline Prior prior_from_json(const json& j, const std::string& where = "prior") {
  const auto kind = detail::get<std::string>(j, where, "kind");
  try {
    if (kind == "gaussian")
      return Prior::gaussian(detail::get_or<double>(j, where, "mean", 0.0), detail::get<double>(j, where, "variance"));
    if (kind == "gmm")
      return Prior::gmm(detail::get<std::vector<double>>(j, where, "weights"),
                        detail::get<std::vector<double>>(j, where, "means"),
                        detail::get<std::vector<double>>(j, where, "variances"));
    if (kind == "bernoulli_gaussian")
      return Prior::bernoulli_gaussian(detail::get<double>(j, where, "sparsity"),
                                       detail::get<double>(j, where, "slab_variance"));
  } catch (const ConfigError&) {
    throw;
  } catch (const InvalidArgument& e) {
    throw ConfigError(where, e.what());
  }
  throw ConfigError(where + ".kind", "unknown prior kind '" + kind + "' (gaussian, gmm, bernoulli_gaussian)");
}

// ---- operators and quantizers

inline json operator_to_json(const MeasurementOperator& op) {
  return {{"transform", to_string(op.transform_kind())}, {"rows", op.n_rows()}, {"cols", op.n_cols()},
          {"seed", op.seed()}};
}

inline MeasurementOperator operator_from_json(const json& j, const std::string& where = "operator") {
  try {
    return make_operator(detail::get<std::size_t>(j, where, "rows"), detail::get<std::size_t>(j, where, "cols"),
                         parse_transform_kind(detail::get<std::string>(j, where, "transform")),
                         detail::get<std::uint64_t>(j, where, "seed"));
  } catch (const ConfigError&) {
    throw;
  } catch (const InvalidArgument& e) {
    throw ConfigError(where, e.what());
  }
}

inline json quantizer_to_json(const QuantizerSpec& q) {
  if (q.is_identity()) return {{"identity", true}};
  return {{"bits", q.bits}, {"interval", q.interval}};
}

/// {"bits": B, "interval": Δ} or {"identity": true}. A missing interval is
/// filled from default_midrise_interval(B, input_std).
inline QuantizerSpec quantizer_from_json(const json& j, double input_std, const std::string& where = "quantizer") {
  if (detail::get_or<bool>(j, where, "identity", false)) return identity_quantizer();
  const auto bits = detail::get<unsigned>(j, where, "bits");
  if (bits < 1 || bits > 24) throw ConfigError(where + ".bits", "must lie in [1, 24]");
  const double interval = detail::get_or<double>(j, where, "interval", default_midrise_interval(bits, input_std));
  if (!(interval > 0.0)) throw ConfigError(where + ".interval", "must be positive");
  return make_midrise(bits, interval);
}

// ---- traces

inline json run_trace_to_json(const RunTrace& trace) {
  json out = json::array();
  std::size_t iter = 1;
  for (const auto& r : trace) {
    out.push_back({{"iter", iter++},
                   {"v_A_pri", r.v_A_pri},
                   {"v_A_post", r.v_A_post},
                   {"v_A_ext", r.v_A_ext},
                   {"v_B_pri", r.v_B_pri},
                   {"v_B_post", r.v_B_post},
                   {"v_B_ext", r.v_B_ext},
                   {"v_C_pri", detail::number(r.v_C_pri)},
                   {"v_C_ext", detail::number(r.v_C_ext)},
                   {"nmse", detail::number(r.nmse)},
                   {"rel_change", detail::number(r.rel_change)},
                   {"seconds", r.seconds}});
  }
  return out;
}

/// SE trace. `signal_energy` normalizes predicted MSE to NMSE.
inline json se_trace_to_json(const SETrace& se, double signal_energy) {
  json recs = json::array();
  std::size_t iter = 1;
  for (const auto& r : se.records) {
    recs.push_back({{"iter", iter++},
                    {"v_A_pri", detail::number(r.v_A_pri)},
                    {"v_B_pri", detail::number(r.v_B_pri)},
                    {"predicted_mse", detail::number(r.predicted_mse)},
                    {"predicted_nmse", detail::number(r.predicted_mse / signal_energy)},
                    {"v_C_ext", detail::number(r.v_C_ext)}});
  }
  return {{"converged", se.converged},
          {"diverged", se.diverged},
          {"fixed_v_A", detail::number(se.fixed_v_A)},
          {"fixed_v_B", detail::number(se.fixed_v_B)},
          {"fixed_mse", detail::number(se.fixed_mse)},
          {"fixed_nmse", detail::number(se.fixed_mse / signal_energy)},
          {"fixed_nmse_db", detail::number(to_db(se.fixed_mse / signal_energy))},
          {"records", recs}};
}

/// One row of the plot table.
struct TraceRow {
  std::size_t iter;
  double v_A_pri, v_B_pri, v_B_post, nmse, se_mse;
};

inline constexpr const char* kTraceCsvHeader = "iter,v_A_pri,v_B_pri,v_B_post,nmse,se_mse";

inline std::string format_double(double v) {
  if (!std::isfinite(v)) return std::isnan(v) ? "nan" : (v > 0 ? "inf" : "-inf");
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline void write_trace_rows(std::ostream& os, const std::vector<TraceRow>& rows) {
  for (const auto& r : rows)
    os << r.iter << ',' << format_double(r.v_A_pri) << ',' << format_double(r.v_B_pri) << ','
       << format_double(r.v_B_post) << ',' << format_double(r.nmse) << ',' << format_double(r.se_mse) << '\n';
}

// ---- files

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream f(path, std::ios::binary);
  if (!f) throw Error("cannot open " + path.string() + " for writing");
  f << text;
  if (!f) throw Error("failed writing " + path.string());
}

inline json read_json_file(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError(path.string(), "cannot open file");
  try {
    return json::parse(f);
  } catch (const json::parse_error& e) {
    throw ConfigError(path.string(), std::string("invalid JSON: ") + e.what());
  }
}

// ---- MSE table cache

inline std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::string table_cache_key(const Prior& prior, const MseGridSpec& grid) {
  const json key{{"prior", prior_to_json(prior)},
                 {"v_min", grid.v_min},
                 {"decades", grid.decades},
                 {"points_per_decade", grid.points_per_decade}};
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a(key.dump())));
  return buf;
}

inline json mse_table_to_json(const MseTable& t, const Prior& prior, const MseGridSpec& grid) {
  return {{"key", table_cache_key(prior, grid)},
          {"prior", prior_to_json(prior)},
          {"grid", t.grid()},
          {"values", t.values()},
          {"interpolation", "log_log_linear"}};
}

inline MseTable mse_table_from_json(const json& j, WarningSink warn = stderr_warnings()) {
  return MseTable(detail::get<std::vector<double>>(j, "table", "grid"),
                  detail::get<std::vector<double>>(j, "table", "values"), std::move(warn));
}

/// Loads `<dir>/mse_table_<key>.json` if present and keyed to this prior and
/// grid; otherwise builds the table and writes it there.
inline MseTable load_or_build_mse_table(const Prior& prior, const MseGridSpec& grid,
                                        const std::filesystem::path& dir, WarningSink warn = stderr_warnings(),
                                        bool* hit = nullptr) {
  const std::string key = table_cache_key(prior, grid);
  const auto path = dir / ("mse_table_" + key + ".json");
  if (std::filesystem::exists(path)) {
    const json j = read_json_file(path);
    if (j.value("key", "") == key) {
      if (hit) *hit = true;
      return mse_table_from_json(j, warn);
    }
  }
  if (hit) *hit = false;
  MseTable t = build_mse_table(prior, grid, warn);
  write_text(path, mse_table_to_json(t, prior, grid).dump(1));
  return t;
}

// ---- fitted score models

inline json features_to_json(const FeatureSpec& f) {
  if (f.kind == FeatureSpec::Kind::polynomial) return {{"kind", "polynomial"}, {"degree", f.degree}};
  return {{"kind", "radial"}, {"centers", f.centers}, {"width", f.width}};
}

inline FeatureSpec features_from_json(const json& j, const std::string& where = "features") {
  FeatureSpec f;
  const auto kind = detail::get<std::string>(j, where, "kind");
  if (kind == "polynomial") {
    f.kind = FeatureSpec::Kind::polynomial;
    f.degree = detail::get<int>(j, where, "degree");
    if (f.degree < 0 || f.degree > 12) throw ConfigError(where + ".degree", "must lie in [0, 12]");
  } else if (kind == "radial") {
    f.kind = FeatureSpec::Kind::radial;
    f.centers = detail::get<std::vector<double>>(j, where, "centers");
    f.width = detail::get<double>(j, where, "width");
    if (!(f.width > 0.0)) throw ConfigError(where + ".width", "must be positive");
  } else {
    throw ConfigError(where + ".kind", "unknown feature kind '" + kind + "' (polynomial, radial)");
  }
  return f;
}

inline json score_model_to_json(const LinearScoreModel& m) {
  return {{"features", features_to_json(m.features)}, {"sigmas", m.sigmas}, {"first", m.first}, {"second", m.second}};
}

inline LinearScoreModel score_model_from_json(const json& j, const std::string& where = "model") {
  LinearScoreModel m;
  m.features = features_from_json(detail::field(j, where, "features"), where + ".features");
  m.sigmas = detail::get<std::vector<double>>(j, where, "sigmas");
  m.first = detail::get<std::vector<Vector>>(j, where, "first");
  m.second = detail::get<std::vector<Vector>>(j, where, "second");
  if (m.sigmas.empty() || m.first.size() != m.sigmas.size() || m.second.size() != m.sigmas.size())
    throw ConfigError(where, "sigmas, first and second must be non-empty and of equal length");
  for (std::size_t i = 0; i < m.sigmas.size(); ++i) {
    if (!(m.sigmas[i] > 0.0) || (i && m.sigmas[i] <= m.sigmas[i - 1]))
      throw ConfigError(where + ".sigmas", "must be positive and increasing");
    if (m.first[i].size() != m.features.size() || m.second[i].size() != m.features.size())
      throw ConfigError(where, "coefficient vectors must match the feature count");
    if (!all_finite(m.first[i]) || !all_finite(m.second[i])) throw ConfigError(where, "non-finite coefficients");
  }
  return m;
}

}  // namespace stmp::io
