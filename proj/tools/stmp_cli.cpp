// stmp: experiment driver for the turbo message-passing library.
//
// Exit status: 0 ok, 2 when a run or SE trace is flagged (non-converged or
// diverged, or a conformance check exceeded tolerance), 1 on errors.

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "stmp/stmp.hpp"

namespace {

namespace fs = std::filesystem;
using stmp::harness::ExperimentConfig;

constexpr int kExitOk = 0;
constexpr int kExitError = 1;
constexpr int kExitFlagged = 2;

struct Common {
  std::string config;
  std::string output;
  std::size_t workers = stmp::harness::default_workers();
  std::optional<std::uint64_t> seed_override;
  bool quiet = false;
};

void add_common(CLI::App* cmd, Common& c, bool with_workers) {
  cmd->add_option("--config", c.config, "experiment config (JSON)")->required()->check(CLI::ExistingFile);
  cmd->add_option("--output", c.output, "output directory (default: config 'output' or .)");
  if (with_workers) cmd->add_option("--workers", c.workers, "concurrent seeds")->check(CLI::PositiveNumber);
  cmd->add_option("--seed-override", c.seed_override, "run this single seed instead of the configured list");
  cmd->add_flag("--quiet", c.quiet, "suppress progress and warnings");
}

ExperimentConfig load(const Common& c) {
  ExperimentConfig cfg = stmp::harness::load_config(c.config);
  if (c.seed_override) cfg.seeds = {*c.seed_override};
  return cfg;
}

fs::path output_dir(const Common& c, const ExperimentConfig& cfg) {
  if (!c.output.empty()) return c.output;
  if (!cfg.output_dir.empty()) return cfg.output_dir;
  return ".";
}

stmp::WarningSink warnings(bool quiet) { return quiet ? stmp::WarningSink{} : stmp::stderr_warnings(); }

void print_summary(const stmp::harness::RunOutputs& o) {
  for (std::size_t g = 0; g < o.results.size(); ++g) {
    const auto& r = o.results[g];
    std::size_t converged = 0, max_iter = 0;
    for (const auto& s : r.seeds) {
      converged += s.converged;
      max_iter = std::max(max_iter, s.iterations);
    }
    std::printf("%s%snmse %.3f dB  se %.3f dB  converged %zu/%zu  max iters %zu%s\n", o.labels[g].c_str(),
                o.labels[g].empty() ? "" : "  ", stmp::to_db(r.mean_nmse), stmp::to_db(r.se.fixed_mse / r.signal_energy),
                converged, r.seeds.size(), max_iter, r.flagged() ? "  [flagged]" : "");
  }
}

int cmd_run(const Common& c, bool require_sweep) {
  ExperimentConfig cfg = load(c);
  if (require_sweep && !cfg.sweep) throw stmp::io::ConfigError("config.sweep", "the sweep command needs a sweep block");
  const auto out = stmp::harness::run_all(cfg, c.workers, warnings(c.quiet));
  const fs::path dir = output_dir(c, cfg);
  stmp::harness::write_run_outputs(dir, cfg, out);
  if (!c.quiet) {
    print_summary(out);
    std::printf("wrote %s\n", dir.string().c_str());
  }
  return out.flagged() ? kExitFlagged : kExitOk;
}

int cmd_se(const Common& c) {
  ExperimentConfig cfg = load(c);
  const auto out = stmp::harness::run_se(cfg, warnings(c.quiet));
  const fs::path dir = output_dir(c, cfg);
  stmp::io::write_text(dir / "se.json", stmp::harness::se_json(cfg, out).dump(1) + "\n");
  if (!c.quiet) {
    for (std::size_t g = 0; g < out.traces.size(); ++g) {
      const auto& t = out.traces[g];
      std::printf("%s%sse %.3f dB after %zu iterations%s\n", out.labels[g].c_str(), out.labels[g].empty() ? "" : "  ",
                  stmp::to_db(t.fixed_mse / cfg.prior.second_moment()), t.records.size(),
                  t.converged ? "" : (t.diverged ? "  [diverged]" : "  [not converged]"));
    }
  }
  return out.flagged() ? kExitFlagged : kExitOk;
}

struct ConformanceArgs {
  std::string address;
  std::string prior_file;
  std::size_t n = 64;
  std::size_t requests = 1000;
  std::uint64_t seed = 0;
  double tolerance = 1e-9;
  double run_tolerance = 1e-6;
};

int cmd_conformance(const ConformanceArgs& a) {
  const stmp::Prior prior = stmp::io::prior_from_json(stmp::io::read_json_file(a.prior_file));
  const auto rep = stmp::harness::run_conformance(stmp::resolve_denoiser_address(a.address), prior, a.n, a.requests,
                                                  a.seed);
  const bool ok_req = rep.max_mean_error <= a.tolerance && rep.max_variance_error <= a.tolerance;
  const bool ok_run = rep.run_nmse_gap() <= a.run_tolerance;
  std::printf("requests %zu  max |mean err| %.3g  max |var err| %.3g  %s\n", rep.requests, rep.max_mean_error,
              rep.max_variance_error, ok_req ? "ok" : "MISMATCH");
  std::printf("stmp nmse external %.12g  in-process %.12g  gap %.3g  %s\n", rep.run_nmse_external,
              rep.run_nmse_inprocess, rep.run_nmse_gap(), ok_run ? "ok" : "MISMATCH");
  return ok_req && ok_run ? kExitOk : kExitFlagged;
}

struct TableArgs {
  std::string config;
  std::string cache_dir = "mse_cache";
  double v_min = 1e-6;
  int decades = 8;
  int points_per_decade = 64;
  bool quiet = false;
};

int cmd_table(const TableArgs& a) {
  const auto j = stmp::io::read_json_file(a.config);
  const stmp::Prior prior = stmp::io::prior_from_json(j.contains("prior") ? j["prior"] : j);
  stmp::MseGridSpec grid{a.v_min, a.decades, a.points_per_decade};
  bool hit = false;
  const auto table = stmp::io::load_or_build_mse_table(prior, grid, a.cache_dir, warnings(a.quiet), &hit);
  if (!a.quiet)
    std::printf("%s %s/mse_table_%s.json (%zu points)\n", hit ? "cached" : "built", a.cache_dir.c_str(),
                stmp::io::table_cache_key(prior, grid).c_str(), table.grid().size());
  return kExitOk;
}

struct FitArgs {
  std::string config;
  std::string output = "score_model.json";
  bool quiet = false;
};

// Fit config: {"schema_version": 1, "prior": {...}, "schedule": {"sigma_min",
// "sigma_max", "levels"}, "features": {...}, "samples": S, "seed": s}
int cmd_fit(const FitArgs& a) {
  using stmp::io::detail::get;
  using stmp::io::detail::get_or;
  const auto j = stmp::io::read_json_file(a.config);
  if (get<int>(j, "fit", "schema_version") != stmp::harness::kSchemaVersion)
    throw stmp::io::ConfigError("fit.schema_version", "unsupported version");
  const stmp::Prior prior = stmp::io::prior_from_json(stmp::io::detail::field(j, "fit", "prior"), "fit.prior");
  const auto& sj = stmp::io::detail::field(j, "fit", "schedule");
  const auto schedule = stmp::geometric_schedule(get<double>(sj, "fit.schedule", "sigma_min"),
                                                 get<double>(sj, "fit.schedule", "sigma_max"),
                                                 get<std::size_t>(sj, "fit.schedule", "levels"));
  const auto features = stmp::io::features_from_json(stmp::io::detail::field(j, "fit", "features"), "fit.features");
  const auto fit = stmp::fit_linear_score(prior, schedule, features, get_or<std::size_t>(j, "fit", "samples", 100000),
                                          get_or<std::uint64_t>(j, "fit", "seed", 0), warnings(a.quiet));
  stmp::io::write_text(a.output, stmp::io::score_model_to_json(fit.model).dump(1) + "\n");
  if (!a.quiet) {
    std::printf("unified L1 %.6g  L2 %.6g  normal-equation residual %.3g\n", fit.unified_first, fit.unified_second,
                fit.max_normal_residual);
    std::printf("wrote %s\n", a.output.c_str());
  }
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Turbo message passing with score-based denoisers: runs, state evolution, sweeps."};
  app.require_subcommand(1);

  Common run_args, se_args, sweep_args;
  auto* run = app.add_subcommand("run", "run an experiment (all seeds) and its SE prediction");
  add_common(run, run_args, true);
  auto* se = app.add_subcommand("se", "state evolution only (deterministic, no sampling)");
  add_common(se, se_args, false);
  auto* sweep = app.add_subcommand("sweep", "run every value of the config's sweep block");
  add_common(sweep, sweep_args, true);

  ConformanceArgs conf;
  auto* conformance = app.add_subcommand("conformance", "check an external denoiser against the in-process one");
  conformance->add_option("--address", conf.address, "cmd:<command> or tcp:<host>:<port>")->required();
  conformance->add_option("--prior", conf.prior_file, "prior descriptor (JSON)")->required()->check(CLI::ExistingFile);
  conformance->add_option("--n", conf.n, "vector length")->check(CLI::Range(2, 1 << 20));
  conformance->add_option("--requests", conf.requests, "random requests");
  conformance->add_option("--seed", conf.seed, "seed");
  conformance->add_option("--tolerance", conf.tolerance, "max abs error per request");

  TableArgs table_args;
  auto* table = app.add_subcommand("table", "build or load the cached MSE lookup table for a prior");
  table->add_option("--config", table_args.config, "config or prior descriptor (JSON)")
      ->required()
      ->check(CLI::ExistingFile);
  table->add_option("--cache-dir", table_args.cache_dir, "cache directory");
  table->add_option("--v-min", table_args.v_min, "smallest grid variance");
  table->add_option("--decades", table_args.decades, "grid decades");
  table->add_option("--points-per-decade", table_args.points_per_decade, "grid density");
  table->add_flag("--quiet", table_args.quiet, "no output");

  FitArgs fit_args;
  auto* fit = app.add_subcommand("fit", "fit a linear-feature score model by denoising score matching");
  fit->add_option("--config", fit_args.config, "fit config (JSON)")->required()->check(CLI::ExistingFile);
  fit->add_option("--output", fit_args.output, "model file to write");
  fit->add_flag("--quiet", fit_args.quiet, "no output");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*run) return cmd_run(run_args, false);
    if (*se) return cmd_se(se_args);
    if (*sweep) return cmd_run(sweep_args, true);
    if (*conformance) return cmd_conformance(conf);
    if (*table) return cmd_table(table_args);
    if (*fit) return cmd_fit(fit_args);
  } catch (const stmp::Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitError;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitError;
  }
  return kExitError;
}
