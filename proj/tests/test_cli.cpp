#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "fmdt/cli.hpp"
#include "fmdt/dataset.hpp"

#include "json.hpp"

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

using namespace fmdt;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct CliResult {
  int code = -1;
  std::string out;
  std::string err;
};

// Runs the CLI in process with stdout/stderr captured so assertions can look
// at the printed run directory and the error text.
CliResult run_cli(const std::vector<std::string>& args) {
  std::vector<const char*> argv;
  argv.push_back("fmdt");
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  std::streambuf* old_out = std::cout.rdbuf(out.rdbuf());
  std::streambuf* old_err = std::cerr.rdbuf(err.rdbuf());
  CliResult res;
  res.code = cli::run(static_cast<int>(argv.size()), argv.data());
  std::cout.rdbuf(old_out);
  std::cerr.rdbuf(old_err);
  res.out = out.str();
  res.err = err.str();
  return res;
}

fs::path fresh_dir(const std::string& name) {
  fs::path dir = fs::temp_directory_path() / "fmdt-cli-tests" / name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::string write_config(const fs::path& dir, const std::string& name, const json& cfg) {
  const fs::path p = dir / name;
  std::ofstream os(p);
  os << cfg.dump(2) << "\n";
  return p.generic_string();
}

std::string write_raw(const fs::path& dir, const std::string& name, const std::string& text) {
  const fs::path p = dir / name;
  std::ofstream os(p);
  os << text;
  return p.generic_string();
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  REQUIRE(is.good());
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

// Numeric csv with one header line.
std::vector<std::vector<double>> read_csv(const fs::path& p) {
  std::ifstream is(p);
  REQUIRE(is.good());
  std::string line;
  std::getline(is, line);
  std::vector<std::vector<double>> rows;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::vector<double> row;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) row.push_back(std::stod(cell));
    rows.push_back(std::move(row));
  }
  return rows;
}

// The run directory a successful invocation will create under `out` when no
// earlier run occupies the tag.
fs::path expect_dir(const fs::path& out, const std::string& command, const json& cfg,
                    std::uint64_t seed) {
  return out / cli::config_hash_hex(command, cfg.dump(), seed);
}

// Generates a dataset via the CLI and returns the .fmdt path.
std::string gen_dataset(const fs::path& root, const json& cfg, std::uint64_t seed) {
  const std::string cfg_path = write_config(root, "gen.json", cfg);
  const fs::path out = root / "gen-runs";
  CliResult res = run_cli({"gen-data", "--config", cfg_path, "--seed", std::to_string(seed),
                           "--out", out.generic_string(), "--threads", "1"});
  REQUIRE(res.code == 0);
  return (expect_dir(out, "gen-data", cfg, seed) / "data.fmdt").generic_string();
}

bool hex_string(const std::string& s, std::size_t len) {
  return s.size() == len && s.find_first_not_of("0123456789abcdef") == std::string::npos;
}

}  // namespace

TEST_CASE("config hashes are eight hex chars keyed on command, config, and seed") {
  const std::string h = cli::config_hash_hex("sample", "{\"n\":3}", 7);
  CHECK(hex_string(h, 8));
  CHECK(cli::config_hash_hex("sample", "{\"n\":3}", 7) == h);
  CHECK(cli::config_hash_hex("train", "{\"n\":3}", 7) != h);
  CHECK(cli::config_hash_hex("sample", "{\"n\":4}", 7) != h);
  CHECK(cli::config_hash_hex("sample", "{\"n\":3}", 8) != h);
}

TEST_CASE("run directories take numeric suffixes instead of clobbering") {
  const fs::path root = fresh_dir("rundirs") / "nested" / "runs";
  const fs::path a = cli::make_run_dir(root, "abc");
  CHECK(a == root / "abc");
  CHECK(fs::is_directory(a));
  const fs::path b = cli::make_run_dir(root, "abc");
  CHECK(b == root / "abc-1");
  CHECK(fs::is_directory(b));
  const fs::path c = cli::make_run_dir(root, "abc");
  CHECK(c == root / "abc-2");
}

TEST_CASE("three-point preset writes the exact dataset and a complete manifest") {
  const fs::path root = fresh_dir("fig5a");
  const json cfg{{"preset", "fig5a-3pt"}};
  const std::string cfg_path = write_config(root, "cfg.json", cfg);
  const fs::path out = root / "runs";

  CliResult res = run_cli({"gen-data", "--config", cfg_path, "--seed", "5", "--out",
                           out.generic_string(), "--threads", "1"});
  CHECK(res.code == 0);
  CHECK(res.err.empty());
  const fs::path dir = expect_dir(out, "gen-data", cfg, 5);
  CHECK(res.out == dir.generic_string() + "\n");
  REQUIRE(fs::exists(dir / "data.fmdt"));

  // Storage is float32, hence the float literals.
  Dataset ds = Dataset::load(dir / "data.fmdt");
  REQUIRE(ds.dim() == 1);
  REQUIRE(ds.size() == 3);
  CHECK(ds.points()(0, 0) == static_cast<double>(-0.9f));
  CHECK(ds.points()(0, 1) == 0.0);
  CHECK(ds.points()(0, 2) == static_cast<double>(0.9f));
  CHECK(!ds.shape());

  const json man = json::parse(slurp(dir / "manifest.json"));
  CHECK(man.at("format") == "fmdt-manifest-1");
  CHECK(man.at("version") == "0.1.0");
  CHECK(man.at("command") == "gen-data");
  CHECK(man.at("seed").get<std::uint64_t>() == 5);
  CHECK(man.at("config") == cfg);
  CHECK(man.at("inputs").empty());
  REQUIRE(man.at("outputs").contains("data.fmdt"));
  CHECK(hex_string(man.at("outputs").at("data.fmdt").get<std::string>(), 16));
}

TEST_CASE("kpoints generation is deterministic in the seed and collision-suffixed") {
  const fs::path root = fresh_dir("kpoints");
  const json cfg{{"preset", "kpoints"}, {"k", 5}, {"dim", 3}};
  const std::string cfg_path = write_config(root, "cfg.json", cfg);
  const fs::path out = root / "runs";

  CliResult r1 = run_cli({"gen-data", "--config", cfg_path, "--seed", "7", "--out",
                          out.generic_string(), "--threads", "1"});
  REQUIRE(r1.code == 0);
  const fs::path d1 = expect_dir(out, "gen-data", cfg, 7);

  Dataset ds = Dataset::load(d1 / "data.fmdt");
  REQUIRE(ds.dim() == 3);
  REQUIRE(ds.size() == 5);
  CHECK(ds.points().cwiseAbs().maxCoeff() <= 1.0);

  // Same seed and out root: a -1 suffixed sibling with identical bytes.
  CliResult r2 = run_cli({"gen-data", "--config", cfg_path, "--seed", "7", "--out",
                          out.generic_string(), "--threads", "1"});
  REQUIRE(r2.code == 0);
  const fs::path d2 = out / (d1.filename().string() + "-1");
  CHECK(r2.out == d2.generic_string() + "\n");
  CHECK(slurp(d2 / "data.fmdt") == slurp(d1 / "data.fmdt"));
  CHECK(slurp(d2 / "manifest.json") == slurp(d1 / "manifest.json"));

  CliResult r3 = run_cli({"gen-data", "--config", cfg_path, "--seed", "8", "--out",
                          out.generic_string(), "--threads", "1"});
  REQUIRE(r3.code == 0);
  const fs::path d3 = expect_dir(out, "gen-data", cfg, 8);
  CHECK(slurp(d3 / "data.fmdt") != slurp(d1 / "data.fmdt"));

  const std::string bad = write_config(root, "bad.json", json{{"preset", "kpoints"}, {"k", 0},
                                                              {"dim", 3}});
  CliResult r4 = run_cli({"gen-data", "--config", bad, "--out", out.generic_string()});
  CHECK(r4.code == 2);
  CHECK(r4.err.find("config field 'k'") != std::string::npos);

  const std::string missing = write_config(root, "missing.json", json{{"preset", "kpoints"},
                                                                      {"dim", 3}});
  CliResult r5 = run_cli({"gen-data", "--config", missing, "--out", out.generic_string()});
  CHECK(r5.code == 2);
  CHECK(r5.err.find("'k': missing") != std::string::npos);
}

TEST_CASE("gmm2d, checkerboard and blob presets satisfy their geometry") {
  const fs::path root = fresh_dir("presets");
  const fs::path out = root / "runs";

  const json gmm{{"preset", "gmm2d"}, {"n", 200}};
  CliResult rg = run_cli({"gen-data", "--config", write_config(root, "g.json", gmm), "--seed",
                          "1", "--out", out.generic_string()});
  REQUIRE(rg.code == 0);
  Dataset dg = Dataset::load(expect_dir(out, "gen-data", gmm, 1) / "data.fmdt");
  REQUIRE(dg.dim() == 2);
  REQUIRE(dg.size() == 200);
  // Default centers sit on the unit circle with std 0.05 jitter.
  for (Eigen::Index j = 0; j < dg.size(); ++j) {
    const double r = dg.point(j).norm();
    CHECK(r > 0.5);
    CHECK(r < 1.5);
  }

  const json chk{{"preset", "checkerboard2d"}, {"n", 400}};
  CliResult rc = run_cli({"gen-data", "--config", write_config(root, "c.json", chk), "--seed",
                          "2", "--out", out.generic_string()});
  REQUIRE(rc.code == 0);
  Dataset dc = Dataset::load(expect_dir(out, "gen-data", chk, 2) / "data.fmdt");
  REQUIRE(dc.dim() == 2);
  for (Eigen::Index j = 0; j < dc.size(); ++j) {
    const double x = dc.points()(0, j), y = dc.points()(1, j);
    CHECK(x >= -2.0);
    CHECK(x < 2.0);
    CHECK(y >= -2.0);
    CHECK(y < 2.0);
    // Occupied cells share row/column parity.
    const long cx = static_cast<long>(std::floor(x + 2.0));
    const long cy = static_cast<long>(std::floor(y + 2.0));
    CHECK(cx % 2 == cy % 2);
  }

  const json blobs{{"preset", "blobs8x8"}, {"n", 16}};
  CliResult rb = run_cli({"gen-data", "--config", write_config(root, "b.json", blobs), "--seed",
                          "3", "--out", out.generic_string()});
  REQUIRE(rb.code == 0);
  Dataset db = Dataset::load(expect_dir(out, "gen-data", blobs, 3) / "data.fmdt");
  REQUIRE(db.dim() == 64);
  REQUIRE(db.size() == 16);
  REQUIRE(db.shape().has_value());
  CHECK(db.shape()->channels == 1);
  CHECK(db.shape()->height == 8);
  CHECK(db.shape()->width == 8);
  for (Eigen::Index j = 0; j < db.size(); ++j) {
    CHECK(db.point(j).minCoeff() >= 0.0);
    CHECK(db.point(j).maxCoeff() <= 1.0);
    CHECK(db.point(j).maxCoeff() > 0.8);
  }
}

TEST_CASE("schema violations exit with code 2 and name the offending field") {
  const fs::path root = fresh_dir("schema");
  const fs::path out = root / "runs";
  const std::string out_s = out.generic_string();

  CliResult r1 = run_cli({"gen-data", "--config", (root / "nope.json").generic_string(), "--out",
                          out_s});
  CHECK(r1.code == 2);
  CHECK(r1.err.find("file not found") != std::string::npos);

  const std::string bad_json = write_raw(root, "bad.json", "not json{{{");
  CliResult r2 = run_cli({"gen-data", "--config", bad_json, "--out", out_s});
  CHECK(r2.code == 2);
  CHECK(r2.err.find("not valid JSON") != std::string::npos);

  const std::string arr = write_raw(root, "arr.json", "[1, 2, 3]");
  CliResult r3 = run_cli({"gen-data", "--config", arr, "--out", out_s});
  CHECK(r3.code == 2);
  CHECK(r3.err.find("expected a JSON object") != std::string::npos);

  const std::string preset = write_config(root, "preset.json", json{{"preset", "nope"}});
  CliResult r4 = run_cli({"gen-data", "--config", preset, "--out", out_s});
  CHECK(r4.code == 2);
  CHECK(r4.err.find("unknown preset 'nope'") != std::string::npos);

  const std::string train = write_config(
      root, "train.json", json{{"dataset", (root / "missing.fmdt").generic_string()}});
  CliResult r5 = run_cli({"train", "--config", train, "--out", out_s});
  CHECK(r5.code == 2);
  CHECK(r5.err.find("config field 'dataset'") != std::string::npos);

  const std::string model = write_config(root, "model.json",
                                         json{{"model", {{"type", "wat"}}}});
  CliResult r6 = run_cli({"sample", "--config", model, "--out", out_s});
  CHECK(r6.code == 2);
  CHECK(r6.err.find("unknown model type 'wat'") != std::string::npos);

  const std::string data = gen_dataset(root, json{{"preset", "kpoints"}, {"k", 1}, {"dim", 2}}, 1);
  const json cf{{"type", "closed-form"}, {"dataset", data}};
  const std::string scheme = write_config(root, "scheme.json",
                                          json{{"model", cf}, {"scheme", "rk7"}});
  CliResult r7 = run_cli({"sample", "--config", scheme, "--out", out_s});
  CHECK(r7.code == 2);
  CHECK(r7.err.find("scheme") != std::string::npos);
}

TEST_CASE("runtime failures exit with code 1") {
  const fs::path root = fresh_dir("runtime");
  const std::string data = gen_dataset(root, json{{"preset", "kpoints"}, {"k", 1}, {"dim", 2}}, 1);
  const json cfg{{"model", {{"type", "closed-form"}, {"dataset", data}}},
                 {"n", 2},
                 {"t_end", 1.0}};
  CliResult res = run_cli({"sample", "--config", write_config(root, "cfg.json", cfg), "--out",
                           (root / "runs").generic_string()});
  CHECK(res.code == 1);
  CHECK(res.err.rfind("error: ", 0) == 0);
}

TEST_CASE("manifest re-runs reproduce outputs and reject other commands") {
  const fs::path root = fresh_dir("manifest");
  const json cfg{{"preset", "kpoints"}, {"k", 4}, {"dim", 2}};
  const std::string cfg_path = write_config(root, "cfg.json", cfg);

  const fs::path out_a = root / "a";
  CliResult ra = run_cli({"gen-data", "--config", cfg_path, "--seed", "7", "--out",
                          out_a.generic_string()});
  REQUIRE(ra.code == 0);
  const fs::path dir_a = expect_dir(out_a, "gen-data", cfg, 7);
  const std::string manifest = (dir_a / "manifest.json").generic_string();
  const std::string bytes_a = slurp(dir_a / "data.fmdt");

  // Re-running the manifest picks up the recorded seed and config.
  const fs::path out_b = root / "b";
  CliResult rb = run_cli({"gen-data", "--config", manifest, "--out", out_b.generic_string()});
  REQUIRE(rb.code == 0);
  const fs::path dir_b = expect_dir(out_b, "gen-data", cfg, 7);
  CHECK(rb.out == dir_b.generic_string() + "\n");
  CHECK(slurp(dir_b / "data.fmdt") == bytes_a);
  CHECK(slurp(dir_b / "manifest.json") == slurp(dir_a / "manifest.json"));

  // An explicit --seed still wins over the recorded one.
  const fs::path out_c = root / "c";
  CliResult rc = run_cli({"gen-data", "--config", manifest, "--seed", "9", "--out",
                          out_c.generic_string()});
  REQUIRE(rc.code == 0);
  CHECK(slurp(expect_dir(out_c, "gen-data", cfg, 9) / "data.fmdt") != bytes_a);

  CliResult rd = run_cli({"train", "--config", manifest, "--out", (root / "d").generic_string()});
  CHECK(rd.code == 2);
  CHECK(rd.err.find("manifest records 'gen-data'") != std::string::npos);
}

TEST_CASE("train then sample recovers a memorized point end to end") {
  const fs::path root = fresh_dir("pipeline");
  const std::string data = gen_dataset(root, json{{"preset", "kpoints"}, {"k", 1}, {"dim", 2}}, 3);
  const Vec point = Dataset::load(data).point(0);

  const json train_cfg{{"dataset", data},  {"hidden", {48, 48}}, {"epochs", 2500},
                       {"batch_size", 128}, {"lr", 5e-3},         {"ema", 0.995}};
  const fs::path out_t = root / "train-runs";
  CliResult rt = run_cli({"train", "--config", write_config(root, "train.json", train_cfg),
                          "--seed", "3", "--out", out_t.generic_string(), "--threads", "1"});
  REQUIRE(rt.code == 0);
  const fs::path dir_t = expect_dir(out_t, "train", train_cfg, 3);
  REQUIRE(fs::exists(dir_t / "model.json"));

  const json summary = json::parse(slurp(dir_t / "train.json"));
  CHECK(summary.at("diverged") == false);
  CHECK(summary.at("steps").get<long>() == 2500);
  CHECK(read_csv(dir_t / "loss.csv").size() == 2500);
  const json man = json::parse(slurp(dir_t / "manifest.json"));
  CHECK(man.at("inputs").contains(data));
  CHECK(man.at("outputs").contains("model.json"));

  const json model{{"type", "checkpoint"}, {"path", (dir_t / "model.json").generic_string()}};
  const json sample_cfg{{"model", model}, {"n", 8}, {"trajectories", 2}, {"steps", 200}};
  const std::string sample_path = write_config(root, "sample.json", sample_cfg);
  const fs::path out_s = root / "sample-runs";
  CliResult rs = run_cli({"sample", "--config", sample_path, "--seed", "3", "--out",
                          out_s.generic_string(), "--threads", "1"});
  REQUIRE(rs.code == 0);
  const fs::path dir_s = expect_dir(out_s, "sample", sample_cfg, 3);

  const auto endpoints = read_csv(dir_s / "endpoints.csv");
  REQUIRE(endpoints.size() == 8);
  for (const auto& row : endpoints) {
    REQUIRE(row.size() == 2);
    CHECK(std::abs(row[0] - point[0]) < 0.05);
    CHECK(std::abs(row[1] - point[1]) < 0.05);
  }

  // 200 fixed steps: 201 grid nodes plus the terminal jump record.
  const auto traj = read_csv(dir_s / "trajectory-0.csv");
  REQUIRE(traj.size() == 202);
  CHECK(traj.front()[0] == 0.0);
  CHECK(traj.back()[0] == 1.0);
  const json side = json::parse(slurp(dir_s / "trajectory-0.json"));
  CHECK(side.at("aborted") == false);
  CHECK(side.at("steps").get<long>() == 201);
  REQUIRE(side.at("perturbed").size() == 202);
  for (const auto& f : side.at("perturbed")) CHECK(f == false);

  // Byte-stable across repeats with the same seed.
  const fs::path out_s2 = root / "sample-runs-2";
  CliResult rs2 = run_cli({"sample", "--config", sample_path, "--seed", "3", "--out",
                           out_s2.generic_string(), "--threads", "1"});
  REQUIRE(rs2.code == 0);
  CHECK(slurp(expect_dir(out_s2, "sample", sample_cfg, 3) / "endpoints.csv") ==
        slurp(dir_s / "endpoints.csv"));

  const json psnr_cfg{{"model", model},           {"dataset", data}, {"t_grid", {0.5, 0.8}},
                      {"n_eval", 16},             {"data_max", 1.0}};
  const std::string psnr_path = write_config(root, "psnr.json", psnr_cfg);
  const fs::path out_p = root / "psnr-runs";
  CliResult rp = run_cli({"psnr", "--config", psnr_path, "--seed", "3", "--out",
                          out_p.generic_string(), "--threads", "1"});
  REQUIRE(rp.code == 0);
  const auto curve = read_csv(expect_dir(out_p, "psnr", psnr_cfg, 3) / "psnr.csv");
  REQUIRE(curve.size() == 2);
  CHECK(curve[0][1] > 10.0);
  CHECK(curve[1][1] > 10.0);
}

TEST_CASE("closed-form sampling lands exactly on a one-point dataset") {
  const fs::path root = fresh_dir("closedform-sample");
  const std::string data = gen_dataset(root, json{{"preset", "kpoints"}, {"k", 1}, {"dim", 3}},
                                       11);
  const Vec point = Dataset::load(data).point(0);

  const json cfg{{"model", {{"type", "closed-form"}, {"dataset", data}}}, {"n", 6},
                 {"steps", 50}};
  CliResult res = run_cli({"sample", "--config", write_config(root, "cfg.json", cfg), "--seed",
                           "11", "--out", (root / "runs").generic_string(), "--threads", "1"});
  REQUIRE(res.code == 0);
  const auto endpoints = read_csv(expect_dir(root / "runs", "sample", cfg, 11) / "endpoints.csv");
  REQUIRE(endpoints.size() == 6);
  for (const auto& row : endpoints)
    for (int i = 0; i < 3; ++i) CHECK(row[static_cast<std::size_t>(i)] ==
                                      doctest::Approx(point[i]).epsilon(1e-12));
}

TEST_CASE("perturb calibrates a perfect denoiser to the closed-form level") {
  const fs::path root = fresh_dir("perturb");
  const std::string data = gen_dataset(root, json{{"preset", "kpoints"}, {"k", 1}, {"dim", 4}}, 3);
  const json model{{"type", "closed-form"}, {"dataset", data}};

  const json cal_cfg{{"model", model},      {"dataset", data}, {"kind", "pos_shift"},
                     {"window", {0.2, 0.8}}, {"ratio", 0.9},    {"nodes", 3},
                     {"n_eval", 8},          {"data_max", 2.0}, {"tol_db", 1e-9}};
  const fs::path out_c = root / "cal-runs";
  CliResult rc = run_cli({"perturb", "--config", write_config(root, "cal.json", cal_cfg),
                          "--seed", "5", "--out", out_c.generic_string(), "--threads", "1"});
  REQUIRE(rc.code == 0);
  const fs::path dir_c = expect_dir(out_c, "perturb", cal_cfg, 5);

  // A perfect denoiser pins the base at the 99 dB cap, so the target level
  // and the shift amplitude have closed forms.
  const double sigma_star = 2.0 * std::pow(10.0, -0.9 * 99.0 / 20.0);
  const auto calib = read_csv(dir_c / "calibration.csv");
  REQUIRE(calib.size() == 3);
  const double t_nodes[3] = {0.2, 0.5, 0.8};
  for (int k = 0; k < 3; ++k) {
    const auto& row = calib[static_cast<std::size_t>(k)];
    REQUIRE(row.size() == 4);
    CHECK(row[0] == doctest::Approx(t_nodes[k]).epsilon(1e-12));
    CHECK(row[1] == doctest::Approx(sigma_star).epsilon(1e-6));
    CHECK(row[2] == 99.0);
    CHECK(row[3] == doctest::Approx(0.9 * 99.0).epsilon(1e-6));
  }

  const json pj = json::parse(slurp(dir_c / "perturbation.json"));
  CHECK(pj.at("kind") == "pos_shift");
  CHECK(pj.at("window") == json({0.2, 0.8}));
  REQUIRE(pj.at("sigma_nodes").size() == 3);

  // The echoed block plugs straight into a model spec and shows up as a psnr
  // drop inside the window only.
  json perturbed = model;
  perturbed["perturb"] = pj;
  const json psnr_cfg{{"model", perturbed}, {"baseline", model},       {"dataset", data},
                      {"t_grid", {0.1, 0.5, 0.9}}, {"n_eval", 8}, {"data_max", 2.0}};
  const fs::path out_p = root / "psnr-runs";
  CliResult rp = run_cli({"psnr", "--config", write_config(root, "psnr.json", psnr_cfg),
                          "--seed", "6", "--out", out_p.generic_string(), "--threads", "1"});
  REQUIRE(rp.code == 0);
  const auto curve = read_csv(expect_dir(out_p, "psnr", psnr_cfg, 6) / "psnr.csv");
  REQUIRE(curve.size() == 3);
  REQUIRE(curve[0].size() == 3);
  CHECK(curve[0][1] == 99.0);
  CHECK(curve[0][2] == 0.0);
  CHECK(curve[1][1] == doctest::Approx(0.9 * 99.0).epsilon(1e-6));
  CHECK(curve[1][2] == doctest::Approx(-0.1 * 99.0).epsilon(1e-6));
  CHECK(curve[2][1] == 99.0);
  CHECK(curve[2][2] == 0.0);
}

TEST_CASE("psnr runs are byte-stable in the seed") {
  const fs::path root = fresh_dir("psnr-stability");
  const std::string data = gen_dataset(root, json{{"preset", "gmm2d"}, {"n", 64}}, 1);
  const json cfg{{"model", {{"type", "closed-form"}, {"dataset", data}}},
                 {"dataset", data},
                 {"t_grid", {0.3, 0.6}},
                 {"n_eval", 16},
                 {"data_max", 2.0}};
  const std::string cfg_path = write_config(root, "cfg.json", cfg);

  auto run_once = [&](const std::string& tag, const std::string& seed) {
    const fs::path out = root / tag;
    CliResult res = run_cli({"psnr", "--config", cfg_path, "--seed", seed, "--out",
                             out.generic_string(), "--threads", "1"});
    REQUIRE(res.code == 0);
    return slurp(expect_dir(out, "psnr", cfg, std::stoull(seed)) / "psnr.csv");
  };
  const std::string a = run_once("a", "4");
  CHECK(run_once("b", "4") == a);
  CHECK(run_once("c", "5") != a);
}

TEST_CASE("lipschitz profile of a one-point field is the exact reciprocal") {
  const fs::path root = fresh_dir("lipschitz");
  const std::string data = gen_dataset(root, json{{"preset", "kpoints"}, {"k", 1}, {"dim", 2}}, 2);
  const json base{{"model", {{"type", "closed-form"}, {"dataset", data}}},
                  {"t_grid", {0.0, 0.5, 0.9}},
                  {"n_traj", 3},
                  {"substeps", 5},
                  {"power_iters", 20}};

  auto check_rows = [&](const fs::path& csv, double tol) {
    const auto rows = read_csv(csv);
    REQUIRE(rows.size() == 3);
    const double t_nodes[3] = {0.0, 0.5, 0.9};
    for (int k = 0; k < 3; ++k) {
      const auto& row = rows[static_cast<std::size_t>(k)];
      REQUIRE(row.size() == 3);
      CHECK(row[0] == doctest::Approx(t_nodes[k]).epsilon(1e-12));
      CHECK(row[1] == doctest::Approx(1.0 / (1.0 - t_nodes[k])).epsilon(tol));
      CHECK(std::abs(row[2]) < 1e-6);
    }
  };

  CliResult ra = run_cli({"lipschitz", "--config", write_config(root, "a.json", base), "--seed",
                          "8", "--out", (root / "a").generic_string(), "--threads", "1"});
  REQUIRE(ra.code == 0);
  check_rows(expect_dir(root / "a", "lipschitz", base, 8) / "lipschitz.csv", 1e-9);

  // Finite difference override on the same linear-in-x field.
  json fd = base;
  fd["fd_h"] = 1e-4;
  CliResult rb = run_cli({"lipschitz", "--config", write_config(root, "b.json", fd), "--seed",
                          "8", "--out", (root / "b").generic_string(), "--threads", "1"});
  REQUIRE(rb.code == 0);
  check_rows(expect_dir(root / "b", "lipschitz", fd, 8) / "lipschitz.csv", 1e-4);
}

TEST_CASE("pairwise distances and trainset report match hand values") {
  const fs::path root = fresh_dir("pairwise");
  const std::string a = write_raw(root, "a.csv", "x0,x1\n0,0\n");
  const std::string b = write_raw(root, "b.csv", "x0,x1\n3,4\n");
  const std::string c = write_raw(root, "c.csv", "x0,x1\n0,1\n");
  const std::string train = write_raw(root, "train.csv", "x0,x1\n0,0\n3,4\n");

  const json cfg{{"endpoints", {a, b, c}}, {"trainset", train}};
  CliResult res = run_cli({"pairwise", "--config", write_config(root, "cfg.json", cfg), "--out",
                           (root / "runs").generic_string()});
  REQUIRE(res.code == 0);
  const fs::path dir = expect_dir(root / "runs", "pairwise", cfg, 0);

  const auto m = read_csv(dir / "pairwise.csv");
  REQUIRE(m.size() == 3);
  const double d_bc = std::sqrt(18.0);
  const double expect[3][3] = {{0.0, 5.0, 1.0}, {5.0, 0.0, d_bc}, {1.0, d_bc, 0.0}};
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j)
      CHECK(m[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)] ==
            doctest::Approx(expect[i][j]).epsilon(1e-12));

  const auto nn = read_csv(dir / "trainset_distance.csv");
  REQUIRE(nn.size() == 3);
  CHECK(nn[0][1] == 0.0);
  CHECK(nn[1][1] == 0.0);
  CHECK(nn[2][1] == doctest::Approx(1.0).epsilon(1e-12));

  const json bad{{"endpoints", {(root / "missing.csv").generic_string()}}};
  CliResult rbad = run_cli({"pairwise", "--config", write_config(root, "bad.json", bad), "--out",
                            (root / "runs").generic_string()});
  CHECK(rbad.code == 2);
  CHECK(rbad.err.find("file not found") != std::string::npos);
}

TEST_CASE("twosample statistics match hand values") {
  const fs::path root = fresh_dir("twosample");
  const std::string a = write_raw(root, "a.csv", "x0\n0\n0\n");
  const std::string b = write_raw(root, "b.csv", "x0\n1\n");
  const fs::path out = root / "runs";

  const json e_cfg{{"a", a}, {"b", b}, {"kind", "energy"}};
  CliResult re = run_cli({"twosample", "--config", write_config(root, "e.json", e_cfg), "--out",
                          out.generic_string()});
  REQUIRE(re.code == 0);
  const json ej = json::parse(slurp(expect_dir(out, "twosample", e_cfg, 0) / "twosample.json"));
  CHECK(ej.at("kind") == "energy");
  CHECK(ej.at("statistic").get<double>() == 2.0);
  CHECK(ej.at("n_a").get<long>() == 2);
  CHECK(ej.at("n_b").get<long>() == 1);
  CHECK(!ej.contains("bandwidth"));

  const json m_cfg{{"a", a}, {"b", b}, {"kind", "mmd"}};
  CliResult rm = run_cli({"twosample", "--config", write_config(root, "m.json", m_cfg), "--out",
                          out.generic_string()});
  REQUIRE(rm.code == 0);
  const json mj = json::parse(slurp(expect_dir(out, "twosample", m_cfg, 0) / "twosample.json"));
  CHECK(mj.at("bandwidth").get<double>() == 1.0);
  CHECK(mj.at("statistic").get<double>() ==
        doctest::Approx(2.0 * (1.0 - std::exp(-0.5))).epsilon(1e-12));

  json o_cfg = m_cfg;
  o_cfg["bandwidth"] = 2.0;
  CliResult ro = run_cli({"twosample", "--config", write_config(root, "o.json", o_cfg), "--out",
                          out.generic_string()});
  REQUIRE(ro.code == 0);
  const json oj = json::parse(slurp(expect_dir(out, "twosample", o_cfg, 0) / "twosample.json"));
  CHECK(oj.at("bandwidth").get<double>() == 2.0);
  CHECK(oj.at("statistic").get<double>() ==
        doctest::Approx(2.0 * (1.0 - std::exp(-0.125))).epsilon(1e-12));
}

TEST_CASE("inpaint restores hidden coordinates with a perfect prior") {
  const fs::path root = fresh_dir("inpaint");
  const std::string data = gen_dataset(root, json{{"preset", "kpoints"}, {"k", 1}, {"dim", 4}}, 3);
  const Vec point = Dataset::load(data).point(0);
  const json model{{"type", "closed-form"}, {"dataset", data}};

  const json cfg{{"model", model},
                 {"mask", {1, 0, 1, 0}},
                 {"observation", {0.5, 0.0, -0.25, 0.0}},
                 {"alpha", 0.5},
                 {"iterations", 4}};
  CliResult res = run_cli({"inpaint", "--config", write_config(root, "cfg.json", cfg), "--seed",
                           "9", "--out", (root / "runs").generic_string()});
  REQUIRE(res.code == 0);
  const fs::path dir = expect_dir(root / "runs", "inpaint", cfg, 9);

  const auto restored = read_csv(dir / "restored.csv");
  REQUIRE(restored.size() == 1);
  REQUIRE(restored[0].size() == 4);
  CHECK(restored[0][0] == 0.5);
  CHECK(restored[0][2] == -0.25);
  CHECK(restored[0][1] == doctest::Approx(point[1]).epsilon(1e-12));
  CHECK(restored[0][3] == doctest::Approx(point[3]).epsilon(1e-12));
  // No ground truth, no trace.
  CHECK(!fs::exists(dir / "trace.csv"));
  CHECK(!fs::exists(dir / "result.json"));
}

TEST_CASE("inpaint rect masks use the image shape and report a psnr trace") {
  const fs::path root = fresh_dir("inpaint-rect");
  const std::string data = gen_dataset(root, json{{"preset", "blobs8x8"}, {"n", 1}}, 6);
  const json model{{"type", "closed-form"}, {"dataset", data}};

  const json cfg{{"model", model},
                 {"mask", {{"rect", {2, 2, 3, 3}}}},
                 {"dataset", data},
                 {"index", 0},
                 {"alpha", 0.3},
                 {"iterations", 5},
                 {"data_max", 1.0}};
  CliResult res = run_cli({"inpaint", "--config", write_config(root, "cfg.json", cfg), "--seed",
                           "10", "--out", (root / "runs").generic_string()});
  REQUIRE(res.code == 0);
  const fs::path dir = expect_dir(root / "runs", "inpaint", cfg, 10);

  const json out = json::parse(slurp(dir / "result.json"));
  CHECK(out.at("error").get<double>() <= 1e-9);
  CHECK(out.at("final_psnr_db").get<double>() == doctest::Approx(99.0).epsilon(1e-12));
  const auto trace = read_csv(dir / "trace.csv");
  REQUIRE(trace.size() == 5);
  CHECK(trace.back()[0] == 5.0);
  CHECK(trace.back()[1] == doctest::Approx(99.0).epsilon(1e-12));

  json bad = cfg;
  bad["mask"] = json{{"rect", {5, 5, 4, 4}}};
  CliResult rbad = run_cli({"inpaint", "--config", write_config(root, "bad.json", bad), "--seed",
                            "10", "--out", (root / "runs").generic_string()});
  CHECK(rbad.code == 2);
  CHECK(rbad.err.find("exceeds the image") != std::string::npos);
}
