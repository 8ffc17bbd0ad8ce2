#include <filesystem>
#include <fstream>
#include <sstream>

#include <gtest/gtest.h>
#include <unistd.h>

#include "stmp/harness.hpp"

namespace {

namespace fs = std::filesystem;
using stmp::Prior;
using stmp::io::ConfigError;
using stmp::io::json;
namespace harness = stmp::harness;

class TempDir {
 public:
  TempDir() {
    static int counter = 0;
    path_ = fs::temp_directory_path() /
            ("stmp_io_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    fs::create_directories(path_);
  }
  ~TempDir() { fs::remove_all(path_); }
  const fs::path& path() const { return path_; }

 private:
  fs::path path_;
};

json base_config() {
  return json::parse(R"({
    "schema_version": 1,
    "prior": {"kind": "gmm", "weights": [0.5, 0.5], "means": [-1, 1], "variances": [0.04, 0.04]},
    "operator": {"transform": "dct", "n": 256},
    "sampling_ratio": 0.5,
    "noise_std": 0.1,
    "damping": 0.8,
    "seeds": {"count": 2, "start": 7},
    "max_iters": 20
  })");
}

std::string config_error(const json& j) {
  try {
    harness::parse_config(j);
  } catch (const ConfigError& e) {
    return e.what();
  }
  return "";
}

TEST(Config, ParsesDefaultsAndSeeds) {
  const auto c = harness::parse_config(base_config());
  EXPECT_EQ(c.n, 256u);
  EXPECT_EQ(c.rows(), 128u);
  EXPECT_EQ(c.seeds, (std::vector<std::uint64_t>{7, 8}));
  EXPECT_EQ(c.algorithm, harness::Algorithm::stmp);
  EXPECT_EQ(c.backend, harness::Backend::analytic);
  EXPECT_DOUBLE_EQ(c.rel_change_tol, 1e-6);
  EXPECT_NEAR(c.noise_variance(), 0.01, 1e-17);
  EXPECT_FALSE(c.quantizer.has_value());
}

TEST(Config, RoundTripsThroughJson) {
  auto j = base_config();
  j["algorithm"] = "qstmp";
  j["quantizer"] = {{"bits", 3}};
  const auto a = harness::parse_config(j);
  const auto b = harness::parse_config(harness::config_to_json(a));
  EXPECT_EQ(harness::config_to_json(a), harness::config_to_json(b));
  EXPECT_EQ(b.quantizer_spec().bits, 3u);
  EXPECT_DOUBLE_EQ(b.quantizer_spec().interval, a.quantizer_spec().interval);
}

TEST(Config, ReportsTheOffendingField) {
  auto j = base_config();
  j["colour"] = 1;
  EXPECT_NE(config_error(j).find("config.colour"), std::string::npos);

  j = base_config();
  j["schema_version"] = 2;
  EXPECT_NE(config_error(j).find("unsupported version 2"), std::string::npos);

  j = base_config();
  j.erase("noise_std");
  EXPECT_NE(config_error(j).find("config.noise_std: missing"), std::string::npos);

  j = base_config();
  j["sampling_ratio"] = "half";
  EXPECT_NE(config_error(j).find("wrong type"), std::string::npos);

  j = base_config();
  j["sampling_ratio"] = 1.5;
  EXPECT_NE(config_error(j).find("sampling_ratio"), std::string::npos);

  j = base_config();
  j["prior"]["weights"] = {0.5, 0.6};
  EXPECT_NE(config_error(j).find("config.prior"), std::string::npos);

  j = base_config();
  j["operator"] = {{"transform", "hadamard"}, {"n", 100}};
  EXPECT_NE(config_error(j).find("power of two"), std::string::npos);

  j = base_config();
  j["algorithm"] = "amp";
  EXPECT_NE(config_error(j).find("unknown algorithm"), std::string::npos);
}

TEST(Config, QuantizerPresentExactlyForQstmp) {
  auto j = base_config();
  j["quantizer"] = {{"bits", 2}};
  EXPECT_NE(config_error(j).find("quantizer"), std::string::npos);
  j = base_config();
  j["algorithm"] = "qstmp";
  EXPECT_NE(config_error(j).find("quantizer"), std::string::npos);
  j["quantizer"] = {{"bits", 0}};
  EXPECT_NE(config_error(j).find("bits"), std::string::npos);
  j["quantizer"] = {{"bits", 2}, {"interval", -1.0}};
  EXPECT_NE(config_error(j).find("interval"), std::string::npos);
}

TEST(Config, BackendValidation) {
  auto j = base_config();
  j["denoiser"] = {{"backend", "fitted"}, {"model", "/nonexistent/model.json"}};
  EXPECT_NE(config_error(j).find("file not found"), std::string::npos);
  ::unsetenv(stmp::kDenoiserAddressEnv);
  j["denoiser"] = {{"backend", "external"}};
  EXPECT_NE(config_error(j).find("denoiser.address"), std::string::npos);
  j["denoiser"] = {{"backend", "external"}, {"address", "udp:x"}};
  EXPECT_NE(config_error(j).find("denoiser.address"), std::string::npos);
  j["denoiser"] = {{"backend", "gpu"}};
  EXPECT_NE(config_error(j).find("unknown backend"), std::string::npos);
}

TEST(Config, SweepValidation) {
  auto j = base_config();
  j["sweep"] = {{"param", "bits"}, {"values", {1, 2}}};
  EXPECT_NE(config_error(j).find("qstmp"), std::string::npos);
  j["sweep"] = {{"param", "seed"}, {"values", {1}}};
  EXPECT_NE(config_error(j).find("unknown parameter"), std::string::npos);
  j["sweep"] = {{"param", "noise_std"}, {"values", json::array()}};
  EXPECT_NE(config_error(j).find("must not be empty"), std::string::npos);
}

TEST(Config, RelativePathsResolveAgainstConfigDir) {
  TempDir dir;
  auto j = base_config();
  j["se"] = {{"method", "table"}, {"cache_dir", "cache"}};
  j["output"] = "out";
  stmp::io::write_text(dir.path() / "exp.json", j.dump());
  const auto c = harness::load_config(dir.path() / "exp.json");
  EXPECT_EQ(c.table_cache_dir, dir.path() / "cache");
  EXPECT_EQ(c.output_dir, dir.path() / "out");
  EXPECT_TRUE(c.se_use_table);
}

TEST(Config, BitsSweepDropsTunedInterval) {
  auto j = base_config();
  j["algorithm"] = "qstmp";
  j["quantizer"] = {{"bits", 2}, {"interval", 0.3}};
  j["sweep"] = {{"param", "bits"}, {"values", {1, 3}}};
  const auto groups = harness::expand(harness::parse_config(j));
  ASSERT_EQ(groups.size(), 2u);
  EXPECT_EQ(groups[1].label, "bits=3");
  const double sd = std::sqrt(groups[1].config.prior.second_moment() + 0.01);
  EXPECT_DOUBLE_EQ(groups[1].config.quantizer_spec().interval, stmp::default_midrise_interval(3, sd));
  EXPECT_THROW(harness::apply_sweep_value(groups[0].config, "bits", 1.5), ConfigError);
}

TEST(Serialization, PriorsRoundTrip) {
  for (const auto& p : {Prior::gaussian(0.3, 2.0), Prior::bernoulli_gaussian(0.1, 4.0),
                        Prior::gmm({0.2, 0.8}, {-2.0, 0.5}, {0.1, 0.3})}) {
    const auto q = stmp::io::prior_from_json(stmp::io::prior_to_json(p));
    EXPECT_EQ(stmp::io::prior_to_json(q), stmp::io::prior_to_json(p));
    EXPECT_DOUBLE_EQ(q.second_moment(), p.second_moment());
  }
  EXPECT_THROW(stmp::io::prior_from_json(json{{"kind", "laplace"}}), ConfigError);
}

TEST(Serialization, OperatorRoundTripReproducesTransform) {
  const auto op = stmp::make_operator(40, 64, stmp::TransformKind::hadamard, 99);
  const auto back = stmp::io::operator_from_json(stmp::io::operator_to_json(op));
  stmp::Rng rng(1);
  const auto x = stmp::gaussian_vector(64, 1.0, rng);
  EXPECT_EQ(op.forward(x), back.forward(x));
  EXPECT_THROW(stmp::io::operator_from_json(json{{"transform", "dct"}, {"rows", 80}, {"cols", 64}, {"seed", 1}}),
               ConfigError);
}

TEST(Serialization, QuantizerAndScoreModelRoundTrip) {
  const auto q = stmp::make_midrise(4, 0.37);
  const auto q2 = stmp::io::quantizer_from_json(stmp::io::quantizer_to_json(q), 1.0);
  EXPECT_EQ(q2.bits, 4u);
  EXPECT_DOUBLE_EQ(q2.interval, 0.37);
  EXPECT_TRUE(stmp::io::quantizer_from_json(stmp::io::quantizer_to_json(stmp::identity_quantizer()), 1.0).is_identity());

  const auto fit = stmp::fit_linear_score(Prior::gaussian(0, 1), stmp::geometric_schedule(0.1, 1.0, 3), {}, 2000, 1, {});
  const json j = stmp::io::score_model_to_json(fit.model);
  const auto m = stmp::io::score_model_from_json(json::parse(j.dump()));
  EXPECT_EQ(m.first, fit.model.first);
  EXPECT_EQ(m.second, fit.model.second);
  EXPECT_EQ(m.sigmas, fit.model.sigmas);
  json bad = j;
  bad["sigmas"] = {0.5, 0.1, 1.0};
  EXPECT_THROW(stmp::io::score_model_from_json(bad), ConfigError);
  bad = j;
  bad["first"][0] = {1.0};
  EXPECT_THROW(stmp::io::score_model_from_json(bad), ConfigError);
}

TEST(MseCache, SecondLoadHitsTheCache) {
  TempDir dir;
  const Prior p = Prior::gmm({0.5, 0.5}, {-1, 1}, {0.04, 0.04});
  const stmp::MseGridSpec grid{1e-3, 3, 8};
  bool hit = true;
  const auto a = stmp::io::load_or_build_mse_table(p, grid, dir.path(), {}, &hit);
  EXPECT_FALSE(hit);
  const auto b = stmp::io::load_or_build_mse_table(p, grid, dir.path(), {}, &hit);
  EXPECT_TRUE(hit);
  EXPECT_EQ(a.values(), b.values());
  EXPECT_EQ(a.grid(), b.grid());
  EXPECT_NE(stmp::io::table_cache_key(p, grid), stmp::io::table_cache_key(Prior::gaussian(0, 1), grid));
  stmp::io::load_or_build_mse_table(p, stmp::MseGridSpec{1e-3, 3, 9}, dir.path(), {}, &hit);
  EXPECT_FALSE(hit);
}

TEST(Outputs, TraceCsvGroupsSweepValues) {
  auto j = base_config();
  j["sweep"] = {{"param", "sampling_ratio"}, {"values", {0.3, 0.6}}};
  const auto c = harness::parse_config(j);
  const auto out = harness::run_all(c, 1, {});
  std::istringstream csv(harness::trace_csv(out));
  std::string line;
  std::getline(csv, line);
  EXPECT_EQ(line, stmp::io::kTraceCsvHeader);
  std::getline(csv, line);
  EXPECT_EQ(line, "# sampling_ratio=0.3");
  std::size_t markers = 1, rows = 0;
  while (std::getline(csv, line)) {
    if (line.rfind("# ", 0) == 0) {
      EXPECT_EQ(line, "# sampling_ratio=0.6");
      ++markers;
    } else {
      EXPECT_EQ(std::count(line.begin(), line.end(), ','), 5) << line;
      ++rows;
    }
  }
  EXPECT_EQ(markers, 2u);
  EXPECT_EQ(rows, out.results[0].rows.size() + out.results[1].rows.size());

  const json r = harness::results_json(c, out);
  ASSERT_EQ(r["sweep"]["groups"].size(), 2u);
  EXPECT_EQ(r["sweep"]["groups"][1]["label"], "sampling_ratio=0.6");
  EXPECT_EQ(r["sweep"]["groups"][0]["seeds"].size(), 2u);
}

TEST(Outputs, SeedAverageRowsMatchSeeds) {
  const auto c = harness::parse_config(base_config());
  const auto res = harness::run_experiment(c, 2, {});
  ASSERT_EQ(res.seeds.size(), 2u);
  const auto& first = res.rows.front();
  EXPECT_NEAR(first.nmse, 0.5 * (res.seeds[0].trace[0].nmse + res.seeds[1].trace[0].nmse), 1e-15);
  EXPECT_NEAR(res.rows.back().nmse, res.mean_nmse, 1e-12);
  // Same seeds, same answer regardless of thread count.
  const auto again = harness::run_experiment(c, 1, {});
  EXPECT_EQ(again.mean_nmse, res.mean_nmse);
}

TEST(Outputs, SeJsonIsDeterministic) {
  auto j = base_config();
  j["algorithm"] = "qstmp";
  j["quantizer"] = {{"bits", 2}};
  j["sweep"] = {{"param", "noise_std"}, {"values", {0.1, 0.5}}};
  const auto c = harness::parse_config(j);
  const std::string a = harness::se_json(c, harness::run_se(c, {})).dump(1);
  const std::string b = harness::se_json(c, harness::run_se(c, {})).dump(1);
  EXPECT_EQ(a, b);
  const json s = json::parse(a);
  EXPECT_TRUE(s["sweep"]["groups"][0]["converged"].get<bool>());
  EXPECT_LT(s["sweep"]["groups"][0]["fixed_nmse"].get<double>(), s["sweep"]["groups"][1]["fixed_nmse"].get<double>());
}

TEST(Outputs, DivergentSeIsFlaggedWithNullFields) {
  auto j = base_config();
  j["sampling_ratio"] = 0.01;
  j["noise_std"] = 1e6;
  const auto c = harness::parse_config(j);
  const auto se = harness::run_se(c, {});
  EXPECT_TRUE(se.flagged());
  EXPECT_NO_THROW(json::parse(harness::se_json(c, se).dump()));
}

TEST(Outputs, WritesAllFiles) {
  TempDir dir;
  const auto c = harness::parse_config(base_config());
  harness::write_run_outputs(dir.path(), c, harness::run_all(c, 1, {}));
  for (const char* f : {"results.json", "trace.csv", "se.json"}) EXPECT_TRUE(fs::exists(dir.path() / f)) << f;
  const json r = stmp::io::read_json_file(dir.path() / "results.json");
  EXPECT_EQ(r["schema_version"], 1);
  EXPECT_EQ(harness::parse_config(r["config"]).seeds, c.seeds);
}

TEST(Conformance, FakeServerAgreesWithInProcess) {
  TempDir dir;
  const Prior p = Prior::gmm({0.5, 0.5}, {-1, 1}, {0.04, 0.04});
  stmp::io::write_text(dir.path() / "prior.json", stmp::io::prior_to_json(p).dump());
  const std::string addr = std::string("cmd:") + STMP_FAKE_SERVER + " --prior " + (dir.path() / "prior.json").string();
  const auto rep = harness::run_conformance(addr, p, 256, 10, 1);
  EXPECT_EQ(rep.requests, 10u);
  EXPECT_EQ(rep.max_mean_error, 0.0);
  EXPECT_EQ(rep.max_variance_error, 0.0);
  EXPECT_LT(rep.run_nmse_gap(), 1e-12);
}

TEST(Conformance, ExternalBackendRunsThroughHarness) {
  TempDir dir;
  auto j = base_config();
  stmp::io::write_text(dir.path() / "prior.json", j["prior"].dump());
  j["denoiser"] = {{"backend", "external"},
                   {"address", std::string("cmd:") + STMP_FAKE_SERVER + " --prior " + (dir.path() / "prior.json").string()}};
  const auto ext = harness::run_experiment(harness::parse_config(j), 1, {});
  const auto local = harness::run_experiment(harness::parse_config(base_config()), 1, {});
  EXPECT_NEAR(ext.mean_nmse, local.mean_nmse, 1e-12);
}

}  // namespace
