#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <exception>
#include <filesystem>
#include <mutex>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "stmp/core.hpp"
#include "stmp/denoisers.hpp"
#include "stmp/external.hpp"
#include "stmp/io.hpp"
#include "stmp/msgpass.hpp"
#include "stmp/operators.hpp"
#include "stmp/priors.hpp"
#include "stmp/quantizer.hpp"
#include "stmp/score_matching.hpp"
#include "stmp/state_evolution.hpp"

namespace stmp::harness {

using json = nlohmann::json;
using io::ConfigError;

inline constexpr int kSchemaVersion = 1;

enum class Algorithm { tmp, stmp, qstmp };
enum class Backend { analytic, fitted, external };

inline std::string to_string(Algorithm a) {
  switch (a) {
    case Algorithm::tmp: return "tmp";
    case Algorithm::stmp: return "stmp";
    case Algorithm::qstmp: return "qstmp";
  }
  return "?";
}

inline std::string to_string(Backend b) {
  switch (b) {
    case Backend::analytic: return "analytic";
    case Backend::fitted: return "fitted";
    case Backend::external: return "external";
  }
  return "?";
}

struct SweepSpec {
  std::string param;  // sampling_ratio | noise_std | damping | bits
  std::vector<double> values;
};

struct ExperimentConfig {
  Prior prior = Prior::gaussian(0.0, 1.0);
  TransformKind transform = TransformKind::dct;
  std::size_t n = 4096;
  double sampling_ratio = 0.5;
  double noise_std = 0.1;
  std::optional<json> quantizer;  // raw descriptor; the default step depends on prior and noise
  Algorithm algorithm = Algorithm::stmp;
  Backend backend = Backend::analytic;
  std::filesystem::path model_path;  // fitted backend
  std::string address;               // external backend
  double damping = 1.0;
  std::vector<std::uint64_t> seeds{0};
  std::size_t max_iters = 50;
  double rel_change_tol = 1e-6;
  std::size_t inner_iters = 1;
  bool se_use_table = false;
  std::filesystem::path table_cache_dir = "mse_cache";
  std::optional<SweepSpec> sweep;
  std::filesystem::path output_dir;

  std::size_t rows() const {
    return static_cast<std::size_t>(std::max(1.0, std::round(sampling_ratio * static_cast<double>(n))));
  }
  double noise_variance() const { return noise_std * noise_std; }
  double effective_ratio() const { return static_cast<double>(rows()) / static_cast<double>(n); }

  QuantizerSpec quantizer_spec() const {
    require(quantizer.has_value(), "quantizer_spec: no quantizer configured");
    return io::quantizer_from_json(*quantizer, std::sqrt(prior.second_moment() + noise_variance()));
  }

  void validate() const {
    if (n < 1) throw ConfigError("operator.n", "must be >= 1");
    if (transform == TransformKind::hadamard && !is_power_of_two(n))
      throw ConfigError("operator.n", "hadamard requires a power of two");
    if (!(sampling_ratio > 0.0 && sampling_ratio <= 1.0)) throw ConfigError("sampling_ratio", "must lie in (0, 1]");
    if (!(noise_std >= 0.0) || !std::isfinite(noise_std)) throw ConfigError("noise_std", "must be finite and >= 0");
    if (!(damping > 0.0 && damping <= 1.0)) throw ConfigError("damping", "must lie in (0, 1]");
    if (seeds.empty()) throw ConfigError("seeds", "must list at least one seed");
    if (max_iters < 1) throw ConfigError("max_iters", "must be >= 1");
    if (!(rel_change_tol >= 0.0)) throw ConfigError("rel_change_tol", "must be >= 0");
    if (inner_iters < 1) throw ConfigError("inner_iters", "must be >= 1");
    if ((algorithm == Algorithm::qstmp) != quantizer.has_value())
      throw ConfigError("quantizer", "must be present exactly when algorithm is qstmp");
    if (quantizer) (void)quantizer_spec();
    if (backend == Backend::fitted && !std::filesystem::exists(model_path))
      throw ConfigError("denoiser.model", "file not found: " + model_path.string());
    if (backend == Backend::external) {
      const auto addr = resolve_denoiser_address(address);
      if (addr.empty()) throw ConfigError("denoiser.address", "required for the external backend");
      try {
        (void)DenoiserAddress::parse(addr);
      } catch (const InvalidArgument& e) {
        throw ConfigError("denoiser.address", e.what());
      }
    }
    if (sweep) {
      static const std::vector<std::string> known{"sampling_ratio", "noise_std", "damping", "bits"};
      if (std::find(known.begin(), known.end(), sweep->param) == known.end())
        throw ConfigError("sweep.param", "unknown parameter '" + sweep->param +
                                             "' (sampling_ratio, noise_std, damping, bits)");
      if (sweep->values.empty()) throw ConfigError("sweep.values", "must not be empty");
      if (sweep->param == "bits" && algorithm != Algorithm::qstmp)
        throw ConfigError("sweep.param", "bits sweeps need algorithm qstmp");
    }
  }
};

namespace detail {

inline std::filesystem::path resolve_path(const std::filesystem::path& base, const std::string& p) {
  std::filesystem::path path(p);
  return path.is_absolute() || base.empty() ? path : base / path;
}

}  // namespace detail

/// Parses and validates a config document. Relative paths resolve against
/// `base_dir` (normally the config file's directory).
inline ExperimentConfig parse_config(const json& j, const std::filesystem::path& base_dir = {}) {
  using io::detail::get;
  using io::detail::get_or;
  if (!j.is_object()) throw ConfigError("config", "must be a JSON object");
  const int version = get<int>(j, "config", "schema_version");
  if (version != kSchemaVersion)
    throw ConfigError("config.schema_version", "unsupported version " + std::to_string(version) + " (expected " +
                                                   std::to_string(kSchemaVersion) + ")");
  static const std::vector<std::string> known{"schema_version", "prior",     "operator",       "sampling_ratio",
                                              "noise_std",      "quantizer", "algorithm",      "denoiser",
                                              "damping",        "seeds",     "max_iters",      "rel_change_tol",
                                              "inner_iters",    "se",        "sweep",          "output",
                                              "description"};
  for (const auto& [key, _] : j.items())
    if (std::find(known.begin(), known.end(), key) == known.end())
      throw ConfigError("config." + key, "unknown field");

  ExperimentConfig c;
  c.prior = io::prior_from_json(io::detail::field(j, "config", "prior"), "config.prior");
  if (j.contains("operator")) {
    const auto& op = j["operator"];
    c.transform = parse_transform_kind(get_or<std::string>(op, "config.operator", "transform", "dct"));
    c.n = get<std::size_t>(op, "config.operator", "n");
  }
  c.sampling_ratio = get<double>(j, "config", "sampling_ratio");
  c.noise_std = get<double>(j, "config", "noise_std");
  if (j.contains("quantizer") && !j["quantizer"].is_null()) c.quantizer = j["quantizer"];

  const auto algo = get_or<std::string>(j, "config", "algorithm", "stmp");
  if (algo == "tmp") c.algorithm = Algorithm::tmp;
  else if (algo == "stmp") c.algorithm = Algorithm::stmp;
  else if (algo == "qstmp") c.algorithm = Algorithm::qstmp;
  else throw ConfigError("config.algorithm", "unknown algorithm '" + algo + "' (tmp, stmp, qstmp)");

  if (j.contains("denoiser")) {
    const auto& d = j["denoiser"];
    const auto backend = get_or<std::string>(d, "config.denoiser", "backend", "analytic");
    if (backend == "analytic") {
      c.backend = Backend::analytic;
    } else if (backend == "fitted") {
      c.backend = Backend::fitted;
      c.model_path = detail::resolve_path(base_dir, get<std::string>(d, "config.denoiser", "model"));
    } else if (backend == "external") {
      c.backend = Backend::external;
      c.address = get_or<std::string>(d, "config.denoiser", "address", "");
    } else {
      throw ConfigError("config.denoiser.backend", "unknown backend '" + backend + "' (analytic, fitted, external)");
    }
  }
  c.damping = get_or<double>(j, "config", "damping", 1.0);
  if (j.contains("seeds")) {
    const auto& s = j["seeds"];
    if (s.is_array()) {
      c.seeds = get<std::vector<std::uint64_t>>(j, "config", "seeds");
    } else {
      const auto count = get<std::size_t>(s, "config.seeds", "count");
      const auto start = get_or<std::uint64_t>(s, "config.seeds", "start", 0);
      c.seeds.clear();
      for (std::size_t i = 0; i < count; ++i) c.seeds.push_back(start + i);
    }
  }
  c.max_iters = get_or<std::size_t>(j, "config", "max_iters", 50);
  c.rel_change_tol = get_or<double>(j, "config", "rel_change_tol", 1e-6);
  c.inner_iters = get_or<std::size_t>(j, "config", "inner_iters", 1);
  if (j.contains("se")) {
    const auto& se = j["se"];
    const auto method = get_or<std::string>(se, "config.se", "method", "direct");
    if (method != "direct" && method != "table")
      throw ConfigError("config.se.method", "must be 'direct' or 'table'");
    c.se_use_table = method == "table";
    c.table_cache_dir = detail::resolve_path(base_dir, get_or<std::string>(se, "config.se", "cache_dir", "mse_cache"));
  }
  if (j.contains("sweep")) {
    SweepSpec s;
    s.param = get<std::string>(j["sweep"], "config.sweep", "param");
    s.values = get<std::vector<double>>(j["sweep"], "config.sweep", "values");
    c.sweep = s;
  }
  if (j.contains("output")) c.output_dir = detail::resolve_path(base_dir, get<std::string>(j, "config", "output"));
  c.validate();
  return c;
}

inline ExperimentConfig load_config(const std::filesystem::path& path) {
  return parse_config(io::read_json_file(path), path.parent_path());
}

inline json config_to_json(const ExperimentConfig& c) {
  json j{{"schema_version", kSchemaVersion},
         {"prior", io::prior_to_json(c.prior)},
         {"operator", {{"transform", stmp::to_string(c.transform)}, {"n", c.n}}},
         {"sampling_ratio", c.sampling_ratio},
         {"noise_std", c.noise_std},
         {"algorithm", to_string(c.algorithm)},
         {"damping", c.damping},
         {"seeds", c.seeds},
         {"max_iters", c.max_iters},
         {"rel_change_tol", c.rel_change_tol},
         {"inner_iters", c.inner_iters},
         {"se", {{"method", c.se_use_table ? "table" : "direct"}}}};
  json d{{"backend", to_string(c.backend)}};
  if (c.backend == Backend::fitted) d["model"] = c.model_path.string();
  if (c.backend == Backend::external) d["address"] = c.address;
  j["denoiser"] = d;
  if (c.quantizer) j["quantizer"] = io::quantizer_to_json(c.quantizer_spec());
  if (c.sweep) j["sweep"] = {{"param", c.sweep->param}, {"values", c.sweep->values}};
  return j;
}

/// Copy of `c` with the sweep parameter set to `value`.
inline ExperimentConfig apply_sweep_value(ExperimentConfig c, const std::string& param, double value) {
  if (param == "sampling_ratio") c.sampling_ratio = value;
  else if (param == "noise_std") c.noise_std = value;
  else if (param == "damping") c.damping = value;
  else if (param == "bits") {
    if (value < 1 || value != std::floor(value)) throw ConfigError("sweep.values", "bits must be positive integers");
    json q = c.quantizer.value_or(json::object());
    q["bits"] = static_cast<unsigned>(value);
    q.erase("interval");  // a step tuned for another bit depth would be wrong
    q.erase("identity");
    c.quantizer = q;
  } else {
    throw ConfigError("sweep.param", "unknown parameter '" + param + "'");
  }
  c.sweep.reset();
  c.validate();
  return c;
}

inline std::string format_value(double v) {
  std::ostringstream os;
  os << v;
  return os.str();
}

struct SeedResult {
  std::uint64_t seed = 0;
  double final_nmse = 0.0;
  std::size_t iterations = 0;
  bool converged = false;
  RunTrace trace;
};

struct ExperimentResult {
  ExperimentConfig config;
  double signal_energy = 0.0;  // E[x^2] per component
  std::vector<SeedResult> seeds;
  SETrace se;
  double mean_nmse = 0.0;  // linear average over seeds
  bool all_converged = false;
  std::vector<io::TraceRow> rows;

  bool flagged() const { return !all_converged || !se.converged; }
};

/// Deterministic problem instance for one seed.
struct Instance {
  Vector x;
  MeasurementOperator op;
};

inline Instance make_instance(const ExperimentConfig& c, std::uint64_t seed) {
  Rng rng(mix_seed(seed, 0));
  Vector x = c.prior.sample(c.n, rng);
  return {std::move(x), make_operator(c.rows(), c.n, c.transform, mix_seed(seed, 1))};
}

inline SETrace compute_se(const ExperimentConfig& c, WarningSink warn = stderr_warnings()) {
  const double ratio = c.effective_ratio();
  const double d2 = c.noise_variance();
  const double e2 = c.prior.second_moment();
  auto go = [&](const auto& mse) {
    if (c.algorithm == Algorithm::qstmp) return run_se_qstmp(mse, ratio, d2, c.quantizer_spec(), e2);
    return run_se_stmp(mse, ratio, d2, e2);
  };
  if (c.se_use_table) {
    const MseTable table = io::load_or_build_mse_table(c.prior, MseGridSpec{}, c.table_cache_dir, warn);
    return go(table);
  }
  return go(PriorMse{c.prior});
}

namespace detail {

template <class D>
RunResult run_with(const ExperimentConfig& c, const Instance& inst, std::uint64_t seed, D& denoiser) {
  StmpConfig sc;
  sc.max_iters = c.max_iters;
  sc.rel_change_tol = c.rel_change_tol;
  sc.damping = c.damping;
  sc.init_variance = c.prior.second_moment();
  const std::span<const double> truth(inst.x);
  if (c.algorithm == Algorithm::qstmp) {
    const QuantizedModel qm = sample_quantized_model(inst.op, inst.x, c.noise_variance(), c.quantizer_spec(),
                                                     mix_seed(seed, 2));
    QstmpConfig qc;
    qc.base = sc;
    qc.inner_iters = c.inner_iters;
    return run_qstmp(qm, denoiser, qc, truth);
  }
  const LinearModel model = sample_model(inst.op, inst.x, c.noise_variance(), mix_seed(seed, 2));
  return run_tmp(model, denoiser, sc, truth);
}

inline SeedResult run_seed(const ExperimentConfig& c, std::uint64_t seed,
                           const std::optional<LinearScoreModel>& fitted) {
  const Instance inst = make_instance(c, seed);
  RunResult r;
  switch (c.backend) {
    case Backend::analytic:
      if (c.algorithm == Algorithm::tmp) {
        PosteriorDenoiser d{c.prior};
        r = run_with(c, inst, seed, d);
      } else {
        TweedieDenoiser d{c.prior};
        r = run_with(c, inst, seed, d);
      }
      break;
    case Backend::fitted: {
      FittedDenoiser d{*fitted};
      r = run_with(c, inst, seed, d);
      break;
    }
    case Backend::external: {
      ExternalDenoiser d(resolve_denoiser_address(c.address), c.n);
      r = run_with(c, inst, seed, d);
      break;
    }
  }
  SeedResult out;
  out.seed = seed;
  out.final_nmse = nmse(r.final.mean, inst.x);
  out.iterations = r.iterations;
  out.converged = r.converged;
  out.trace = std::move(r.trace);
  return out;
}

/// Per-iteration seed averages. A run that stopped early contributes its
/// last record (its estimate no longer changes).
inline std::vector<io::TraceRow> aggregate_rows(const std::vector<SeedResult>& seeds, const SETrace& se,
                                                double energy) {
  std::size_t len = 0;
  for (const auto& s : seeds) len = std::max(len, s.trace.size());
  std::vector<io::TraceRow> rows;
  for (std::size_t t = 0; t < len; ++t) {
    io::TraceRow row{t + 1, 0, 0, 0, 0, 0};
    for (const auto& s : seeds) {
      const auto& rec = s.trace[std::min(t, s.trace.size() - 1)];
      row.v_A_pri += rec.v_A_pri;
      row.v_B_pri += rec.v_B_pri;
      row.v_B_post += rec.v_B_post;
      row.nmse += rec.nmse;
    }
    const double k = static_cast<double>(seeds.size());
    row.v_A_pri /= k;
    row.v_B_pri /= k;
    row.v_B_post /= k;
    row.nmse /= k;
    if (t < se.records.size()) row.se_mse = se.records[t].predicted_mse / energy;
    else row.se_mse = se.fixed_mse / energy;
    rows.push_back(row);
  }
  return rows;
}

/// Runs body(i) for i in [0, count) on up to `workers` threads and rethrows
/// the first failure.
template <class Body>
void parallel_for(std::size_t count, std::size_t workers, Body&& body) {
  workers = std::max<std::size_t>(1, std::min(workers, count));
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mutex;
  auto work = [&] {
    for (;;) {
      const std::size_t i = next.fetch_add(1);
      if (i >= count) return;
      try {
        body(i);
      } catch (...) {
        std::lock_guard lock(failure_mutex);
        if (!failure) failure = std::current_exception();
        next.store(count);
      }
    }
  };
  if (workers == 1) {
    work();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(work);
    for (auto& t : pool) t.join();
  }
  if (failure) std::rethrow_exception(failure);
}

}  // namespace detail

inline std::size_t default_workers() { return std::max(1u, std::thread::hardware_concurrency()); }

inline ExperimentResult run_experiment(const ExperimentConfig& c, std::size_t workers = default_workers(),
                                       WarningSink warn = stderr_warnings()) {
  c.validate();
  std::optional<LinearScoreModel> fitted;
  if (c.backend == Backend::fitted) fitted = io::score_model_from_json(io::read_json_file(c.model_path));

  ExperimentResult res;
  res.config = c;
  res.signal_energy = c.prior.second_moment();
  res.se = compute_se(c, warn);
  res.seeds.resize(c.seeds.size());
  detail::parallel_for(c.seeds.size(), workers,
                       [&](std::size_t i) { res.seeds[i] = detail::run_seed(c, c.seeds[i], fitted); });
  res.all_converged = true;
  for (const auto& s : res.seeds) {
    res.mean_nmse += s.final_nmse;
    res.all_converged = res.all_converged && s.converged;
  }
  res.mean_nmse /= static_cast<double>(res.seeds.size());
  res.rows = detail::aggregate_rows(res.seeds, res.se, res.signal_energy);
  return res;
}

inline json result_to_json(const ExperimentResult& r) {
  json seeds = json::array();
  for (const auto& s : r.seeds)
    seeds.push_back({{"seed", s.seed},
                     {"final_nmse", s.final_nmse},
                     {"final_nmse_db", to_db(s.final_nmse)},
                     {"iterations", s.iterations},
                     {"converged", s.converged},
                     {"trace", io::run_trace_to_json(s.trace)}});
  return {{"config", config_to_json(r.config)},
          {"signal_energy", r.signal_energy},
          {"mean_nmse", r.mean_nmse},
          {"mean_nmse_db", to_db(r.mean_nmse)},
          {"se_fixed_nmse", io::detail::number(r.se.fixed_mse / r.signal_energy)},
          {"se_fixed_nmse_db", io::detail::number(to_db(r.se.fixed_mse / r.signal_energy))},
          {"se_converged", r.se.converged},
          {"all_converged", r.all_converged},
          {"flagged", r.flagged()},
          {"seeds", seeds}};
}

/// One labelled group of a sweep (or the single group of a plain run).
struct Group {
  std::string label;  // "param=value", empty for a plain run
  ExperimentConfig config;
};

inline std::vector<Group> expand(const ExperimentConfig& c) {
  if (!c.sweep) return {{"", c}};
  std::vector<Group> out;
  for (double v : c.sweep->values)
    out.push_back({c.sweep->param + "=" + format_value(v), apply_sweep_value(c, c.sweep->param, v)});
  return out;
}

struct RunOutputs {
  std::vector<std::string> labels;
  std::vector<ExperimentResult> results;

  bool flagged() const {
    return std::any_of(results.begin(), results.end(), [](const auto& r) { return r.flagged(); });
  }
};

/// Runs a plain experiment or every group of a sweep.
inline RunOutputs run_all(const ExperimentConfig& c, std::size_t workers = default_workers(),
                          WarningSink warn = stderr_warnings()) {
  RunOutputs out;
  for (auto& g : expand(c)) {
    out.labels.push_back(g.label);
    out.results.push_back(run_experiment(g.config, workers, warn));
  }
  return out;
}

inline std::string trace_csv(const RunOutputs& o) {
  std::ostringstream os;
  os << io::kTraceCsvHeader << '\n';
  for (std::size_t g = 0; g < o.results.size(); ++g) {
    if (!o.labels[g].empty()) os << "# " << o.labels[g] << '\n';
    io::write_trace_rows(os, o.results[g].rows);
  }
  return os.str();
}

inline json se_json_for(const ExperimentConfig& c, const SETrace& se) {
  json j = io::se_trace_to_json(se, c.prior.second_moment());
  j["algorithm"] = to_string(c.algorithm);
  j["sampling_ratio"] = c.effective_ratio();
  j["noise_variance"] = c.noise_variance();
  if (c.quantizer) j["quantizer"] = io::quantizer_to_json(c.quantizer_spec());
  return j;
}

inline json results_json(const ExperimentConfig& c, const RunOutputs& o) {
  if (!c.sweep) {
    json j = result_to_json(o.results.front());
    j["schema_version"] = kSchemaVersion;
    return j;
  }
  json groups = json::array();
  for (std::size_t g = 0; g < o.results.size(); ++g) {
    json r = result_to_json(o.results[g]);
    r["label"] = o.labels[g];
    r["value"] = c.sweep->values[g];
    groups.push_back(r);
  }
  return {{"schema_version", kSchemaVersion}, {"sweep", {{"param", c.sweep->param}, {"groups", groups}}}};
}

/// SE-only mode: no sampling, deterministic output.
struct SeOutputs {
  std::vector<std::string> labels;
  std::vector<ExperimentConfig> configs;
  std::vector<SETrace> traces;

  bool flagged() const {
    return std::any_of(traces.begin(), traces.end(), [](const auto& t) { return !t.converged; });
  }
};

inline SeOutputs run_se(const ExperimentConfig& c, WarningSink warn = stderr_warnings()) {
  SeOutputs out;
  for (auto& g : expand(c)) {
    out.labels.push_back(g.label);
    out.traces.push_back(compute_se(g.config, warn));
    out.configs.push_back(std::move(g.config));
  }
  return out;
}

inline json se_json(const ExperimentConfig& c, const SeOutputs& o) {
  if (!c.sweep) {
    json j = se_json_for(o.configs.front(), o.traces.front());
    j["schema_version"] = kSchemaVersion;
    return j;
  }
  json groups = json::array();
  for (std::size_t g = 0; g < o.traces.size(); ++g) {
    json s = se_json_for(o.configs[g], o.traces[g]);
    s["label"] = o.labels[g];
    s["value"] = c.sweep->values[g];
    groups.push_back(s);
  }
  return {{"schema_version", kSchemaVersion}, {"sweep", {{"param", c.sweep->param}, {"groups", groups}}}};
}

inline SeOutputs se_from_runs(const RunOutputs& o) {
  SeOutputs s;
  for (std::size_t g = 0; g < o.results.size(); ++g) {
    s.labels.push_back(o.labels[g]);
    s.configs.push_back(o.results[g].config);
    s.traces.push_back(o.results[g].se);
  }
  return s;
}

/// Writes results.json, trace.csv and se.json into `dir`.
inline void write_run_outputs(const std::filesystem::path& dir, const ExperimentConfig& c, const RunOutputs& o) {
  io::write_text(dir / "results.json", results_json(c, o).dump(1) + "\n");
  io::write_text(dir / "trace.csv", trace_csv(o));
  io::write_text(dir / "se.json", se_json(c, se_from_runs(o)).dump(1) + "\n");
}

// ---- protocol conformance

struct ConformanceReport {
  std::size_t requests = 0;
  double max_mean_error = 0.0;
  double max_variance_error = 0.0;
  double run_nmse_external = 0.0;
  double run_nmse_inprocess = 0.0;

  double run_nmse_gap() const { return std::abs(run_nmse_external - run_nmse_inprocess); }
};

/// Sends `requests` random (r, v) pairs to the external denoiser and compares
/// with the in-process Tweedie denoiser for `prior` (raw, unclamped), then
/// runs STMP both ways on one instance.
inline ConformanceReport run_conformance(const std::string& address, const Prior& prior, std::size_t n,
                                         std::size_t requests, std::uint64_t seed) {
  require(n >= 2, "conformance: dimension must be >= 2");
  ConformanceReport rep;
  TweedieDenoiser local{prior, VarianceClamp{0.0, 1.0}};
  {
    ExternalDenoiser remote(address, n);
    Rng rng(mix_seed(seed, 10));
    std::uniform_real_distribution<double> log_v(std::log(1e-3), std::log(10.0));
    for (std::size_t k = 0; k < requests; ++k) {
      const double v = std::exp(log_v(rng));
      Vector r = prior.sample(n, rng);
      const Vector noise = gaussian_vector(n, v, rng);
      for (std::size_t i = 0; i < n; ++i) r[i] += noise[i];
      const DenoiserOutput a = remote(r, v);
      const DenoiserOutput b = local(r, v);
      for (std::size_t i = 0; i < n; ++i)
        rep.max_mean_error = std::max(rep.max_mean_error, std::abs(a.mean[i] - b.mean[i]));
      rep.max_variance_error = std::max(rep.max_variance_error, std::abs(a.variance - b.variance));
      ++rep.requests;
    }
  }
  ExperimentConfig c;
  c.prior = prior;
  c.n = n;
  c.sampling_ratio = 0.5;
  c.noise_std = 0.1;
  c.damping = 0.8;
  const Instance inst = make_instance(c, seed);
  const LinearModel model = sample_model(inst.op, inst.x, c.noise_variance(), mix_seed(seed, 2));
  StmpConfig sc;
  sc.damping = c.damping;
  sc.init_variance = prior.second_moment();
  {
    ExternalDenoiser remote(address, n);
    rep.run_nmse_external = nmse(run_stmp(model, remote, sc).final.mean, inst.x);
  }
  rep.run_nmse_inprocess = nmse(run_stmp(model, prior, sc).final.mean, inst.x);
  return rep;
}

}  // namespace stmp::harness
