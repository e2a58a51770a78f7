#include "fmdt/cli.hpp"

#include "fmdt/analysis.hpp"
#include "fmdt/closedform.hpp"
#include "fmdt/core.hpp"
#include "fmdt/dataset.hpp"
#include "fmdt/net.hpp"
#include "fmdt/parallel.hpp"
#include "fmdt/restoration.hpp"
#include "fmdt/rng.hpp"
#include "fmdt/sampling.hpp"
#include "fmdt/training.hpp"
#include "fmdt/util.hpp"
#include "fmdt/weighting.hpp"

#include "CLI11.hpp"
#include "json.hpp"

#include <cstdlib>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

namespace fmdt::cli {

namespace {

using nlohmann::json;

constexpr const char* kVersion = "0.1.0";
constexpr const char* kManifestFormat = "fmdt-manifest-1";

// Schema violations carry the dotted path of the offending field and map to
// exit code 2; everything else maps to exit code 1.
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

[[noreturn]] void fail(const std::string& path, const std::string& why) {
  throw ConfigError("config field '" + path + "': " + why);
}

std::string join_path(const std::string& parent, const std::string& key) {
  return parent.empty() ? key : parent + "." + key;
}

// Converts precondition failures raised while interpreting a field into
// schema errors naming that field.
template <typename F>
auto schema(const std::string& path, F&& f) -> decltype(f()) {
  try {
    return f();
  } catch (const std::invalid_argument& e) {
    fail(path, e.what());
  }
}

const json& need(const json& j, const std::string& key, const std::string& parent) {
  auto it = j.find(key);
  if (it == j.end()) fail(join_path(parent, key), "missing");
  return *it;
}

double need_num(const json& j, const std::string& key, const std::string& parent) {
  const json& v = need(j, key, parent);
  if (!v.is_number()) fail(join_path(parent, key), "expected a number");
  return v.get<double>();
}

long need_int(const json& j, const std::string& key, const std::string& parent) {
  const json& v = need(j, key, parent);
  if (!v.is_number_integer()) fail(join_path(parent, key), "expected an integer");
  return v.get<long>();
}

std::string need_str(const json& j, const std::string& key, const std::string& parent) {
  const json& v = need(j, key, parent);
  if (!v.is_string()) fail(join_path(parent, key), "expected a string");
  return v.get<std::string>();
}

double get_num(const json& j, const std::string& key, const std::string& parent, double dflt) {
  if (!j.contains(key)) return dflt;
  return need_num(j, key, parent);
}

long get_int(const json& j, const std::string& key, const std::string& parent, long dflt) {
  if (!j.contains(key)) return dflt;
  return need_int(j, key, parent);
}

std::string get_str(const json& j, const std::string& key, const std::string& parent,
                    const std::string& dflt) {
  if (!j.contains(key)) return dflt;
  return need_str(j, key, parent);
}

bool get_bool(const json& j, const std::string& key, const std::string& parent, bool dflt) {
  if (!j.contains(key)) return dflt;
  const json& v = j.at(key);
  if (!v.is_boolean()) fail(join_path(parent, key), "expected a boolean");
  return v.get<bool>();
}

Vec need_vec(const json& j, const std::string& key, const std::string& parent) {
  const json& v = need(j, key, parent);
  if (!v.is_array() || v.empty()) fail(join_path(parent, key), "expected a non-empty array");
  Vec out(static_cast<Eigen::Index>(v.size()));
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (!v[i].is_number()) fail(join_path(parent, key), "expected numbers");
    out[static_cast<Eigen::Index>(i)] = v[i].get<double>();
  }
  return out;
}

// Collects everything one invocation writes: the directory, the seed and the
// input/output content hashes that go into the manifest.
struct RunContext {
  std::filesystem::path dir;
  std::uint64_t seed = 0;
  json inputs = json::object();
  json outputs = json::object();

  std::filesystem::path note_input(const std::string& as_written) {
    std::filesystem::path p(as_written);
    inputs[as_written] = to_hex(fnv1a64(read_file(p)));
    return p;
  }

  void write_text(const std::string& name, const std::string& content) {
    write_file(dir / name, content);
    outputs[name] = to_hex(fnv1a64(content));
  }

  void note_output(const std::string& name) {
    outputs[name] = to_hex(fnv1a64(read_file(dir / name)));
  }
};

std::string csv_row(const std::vector<double>& vals) {
  std::string line;
  for (std::size_t i = 0; i < vals.size(); ++i) {
    if (i) line += ',';
    line += format_double(vals[i]);
  }
  line += '\n';
  return line;
}

// One sample per row; `header` like "x" expands to x0,x1,...
std::string matrix_csv(const Mat& cols_are_samples, const std::string& stem) {
  std::string out;
  for (Eigen::Index i = 0; i < cols_are_samples.rows(); ++i) {
    if (i) out += ',';
    out += stem + std::to_string(i);
  }
  out += '\n';
  for (Eigen::Index j = 0; j < cols_are_samples.cols(); ++j) {
    for (Eigen::Index i = 0; i < cols_are_samples.rows(); ++i) {
      if (i) out += ',';
      out += format_double(cols_are_samples(i, j));
    }
    out += '\n';
  }
  return out;
}

std::vector<double> parse_t_grid(const json& cfg, const std::string& parent, double dflt_lo,
                                 double dflt_hi, int dflt_n) {
  if (cfg.contains("t_grid")) {
    const json& g = cfg.at("t_grid");
    if (!g.is_array() || g.size() < 2) fail(join_path(parent, "t_grid"), "expected >= 2 numbers");
    std::vector<double> grid;
    for (const auto& v : g) {
      if (!v.is_number()) fail(join_path(parent, "t_grid"), "expected numbers");
      grid.push_back(v.get<double>());
    }
    return grid;
  }
  const double lo = get_num(cfg, "t_min", parent, dflt_lo);
  const double hi = get_num(cfg, "t_max", parent, dflt_hi);
  const long n = get_int(cfg, "n_grid", parent, dflt_n);
  if (n < 2) fail(join_path(parent, "n_grid"), "expected >= 2");
  if (!(lo < hi)) fail(join_path(parent, "t_min"), "t_min must be < t_max");
  std::vector<double> grid(static_cast<std::size_t>(n));
  for (long k = 0; k < n; ++k)
    grid[static_cast<std::size_t>(k)] = lo + (hi - lo) * static_cast<double>(k) / double(n - 1);
  return grid;
}

WeightingScheme parse_weighting(const json& cfg, const std::string& parent) {
  const std::string kind = get_str(cfg, "kind", parent, "fm");
  WeightingScheme ws = WeightingScheme::fm();
  if (kind == "fm") {
    ws = WeightingScheme::fm();
  } else if (kind == "classic") {
    const double sigma_max = get_num(cfg, "sigma_max", parent, 19.0);
    ws = schema(join_path(parent, "sigma_max"),
                [&] { return WeightingScheme::classic(sigma_max); });
  } else if (kind == "den") {
    ws = WeightingScheme::den();
  } else if (kind == "pow1") {
    ws = WeightingScheme::pow1();
  } else if (kind == "pow3") {
    ws = WeightingScheme::pow3();
  } else if (kind == "mid") {
    const double t_star = need_num(cfg, "t_star", parent);
    ws = schema(join_path(parent, "t_star"), [&] { return WeightingScheme::mid(t_star); });
  } else if (kind == "custom") {
    const json& kn = need(cfg, "knots", parent);
    if (!kn.is_array() || kn.size() < 2) fail(join_path(parent, "knots"), "expected >= 2 pairs");
    std::vector<std::pair<double, double>> table;
    for (const auto& p : kn) {
      if (!p.is_array() || p.size() != 2 || !p[0].is_number() || !p[1].is_number())
        fail(join_path(parent, "knots"), "expected [t, w] pairs");
      table.emplace_back(p[0].get<double>(), p[1].get<double>());
    }
    ws = schema(join_path(parent, "knots"),
                [&] { return WeightingScheme::custom(std::move(table)); });
  } else {
    fail(join_path(parent, "kind"), "unknown weighting '" + kind + "'");
  }
  if (cfg.contains("cap")) {
    const double cap = need_num(cfg, "cap", parent);
    schema(join_path(parent, "cap"), [&] { ws.set_cap(cap); });
  }
  return ws;
}

IntegratorSpec parse_integrator(const json& cfg, const std::string& parent) {
  IntegratorSpec spec;
  const std::string scheme = get_str(cfg, "scheme", parent, "euler");
  spec.scheme = schema(join_path(parent, "scheme"), [&] { return scheme_from_string(scheme); });
  spec.steps = static_cast<int>(get_int(cfg, "steps", parent, 100));
  if (spec.steps < 1) fail(join_path(parent, "steps"), "expected >= 1");
  spec.rtol = get_num(cfg, "rtol", parent, 1e-6);
  spec.atol = get_num(cfg, "atol", parent, 1e-8);
  spec.t_end = get_num(cfg, "t_end", parent, 0.999);
  spec.terminal_jump = get_bool(cfg, "terminal_jump", parent, true);
  return spec;
}

Dataset load_dataset_field(const json& cfg, const std::string& key, const std::string& parent,
                           RunContext& ctx) {
  const std::string path = need_str(cfg, key, parent);
  if (!std::filesystem::exists(path)) fail(join_path(parent, key), "file not found: " + path);
  ctx.note_input(path);
  if (path.size() >= 4 && path.compare(path.size() - 4, 4, ".csv") == 0)
    return Dataset::from_csv(path, std::filesystem::path(path).stem().string());
  return Dataset::load(path);
}

// A model reference: a trained checkpoint, a ten-expert checkpoint ensemble,
// or one of the dataset-defined closed forms. An optional "perturb" block
// wraps the denoiser with a calibrated perturbation (explicit sigma nodes).
struct LoadedModel {
  Denoiser denoiser;
  VelocityField velocity;
  std::optional<DifferentiableVelocity> diff;
  Eigen::Index dim = 0;
  std::optional<ImageShape> shape;
  std::optional<Interval> perturb_window;
  bool cone = false;
};

PerturbationSpec parse_perturbation(const json& p, const std::string& parent, bool need_nodes) {
  PerturbationSpec spec;
  const std::string kind = need_str(p, "kind", parent);
  spec.kind = schema(join_path(parent, "kind"), [&] { return direction_from_string(kind); });
  spec.patch_size = static_cast<int>(get_int(p, "patch", parent, 1));
  const json& w = need(p, "window", parent);
  if (!w.is_array() || w.size() != 2 || !w[0].is_number() || !w[1].is_number())
    fail(join_path(parent, "window"), "expected [lo, hi]");
  spec.window = Interval{w[0].get<double>(), w[1].get<double>()};
  if (!(spec.window.lo >= 0.0 && spec.window.lo < spec.window.hi && spec.window.hi <= 1.0))
    fail(join_path(parent, "window"), "expected 0 <= lo < hi <= 1");
  if (p.contains("sigma_nodes")) {
    const json& ns = p.at("sigma_nodes");
    if (!ns.is_array() || ns.empty())
      fail(join_path(parent, "sigma_nodes"), "expected a non-empty array");
    std::vector<std::pair<double, double>> nodes;
    for (const auto& n : ns) {
      if (!n.is_array() || n.size() != 2 || !n[0].is_number() || !n[1].is_number())
        fail(join_path(parent, "sigma_nodes"), "expected [t, sigma] pairs");
      nodes.emplace_back(n[0].get<double>(), n[1].get<double>());
    }
    spec.sigma_nodes = std::move(nodes);
  } else if (need_nodes) {
    fail(join_path(parent, "sigma_nodes"), "missing");
  }
  return spec;
}

LoadedModel load_model(const json& m, const std::string& parent, RunContext& ctx) {
  if (!m.is_object()) fail(parent, "expected an object");
  LoadedModel out;
  const std::string type = need_str(m, "type", parent);
  if (type == "checkpoint") {
    const std::string path = need_str(m, "path", parent);
    if (!std::filesystem::exists(path)) fail(join_path(parent, "path"), "file not found: " + path);
    ctx.note_input(path);
    Checkpoint ck = load_checkpoint(path);
    ParametrizedDenoiser pd = ck.eval_model(get_bool(m, "use_ema", parent, true));
    out.dim = pd.net.data_dim();
    out.denoiser = pd.as_denoiser();
    out.velocity = pd.as_velocity();
    out.diff = pd.as_velocity_diff();
  } else if (type == "ensemble") {
    const json& paths = need(m, "paths", parent);
    if (!paths.is_array() || paths.size() != 10)
      fail(join_path(parent, "paths"), "expected 10 checkpoint paths");
    const bool use_ema = get_bool(m, "use_ema", parent, true);
    EnsembleDenoiser ens;
    for (const auto& pj : paths) {
      if (!pj.is_string()) fail(join_path(parent, "paths"), "expected strings");
      const std::string path = pj.get<std::string>();
      if (!std::filesystem::exists(path))
        fail(join_path(parent, "paths"), "file not found: " + path);
      ctx.note_input(path);
      ens.experts.push_back(load_checkpoint(path).eval_model(use_ema));
    }
    out.dim = ens.experts.front().net.data_dim();
    out.denoiser = ens.as_denoiser();
    out.velocity = velocity_from_denoiser(out.denoiser);
  } else if (type == "closed-form" || type == "cone") {
    Dataset ds = load_dataset_field(m, "dataset", parent, ctx);
    out.dim = ds.dim();
    out.shape = ds.shape();
    if (type == "closed-form") {
      out.denoiser = make_mmse_denoiser(ds);
      out.velocity = make_gaussian_velocity(ds);
      out.diff = make_gaussian_velocity_diff(std::move(ds));
    } else {
      out.velocity = make_cone_velocity_projected(std::move(ds));
      out.denoiser = denoiser_from_velocity(out.velocity);
      out.cone = true;
    }
  } else {
    fail(join_path(parent, "type"), "unknown model type '" + type + "'");
  }
  if (m.contains("perturb")) {
    PerturbationSpec spec =
        parse_perturbation(m.at("perturb"), join_path(parent, "perturb"), /*need_nodes=*/true);
    out.denoiser = perturb_denoiser(out.denoiser, spec, out.dim, out.shape);
    out.velocity = velocity_from_denoiser(out.denoiser);
    out.diff.reset();
    out.perturb_window = spec.window;
  }
  return out;
}

// The differential view used by spectral-norm measurements: analytic when the
// model has one, otherwise central finite differences. Cone fields get a
// moderate default step; their velocity is piecewise smooth and a tiny
// stencil almost never straddles the cone boundaries that carry the
// interesting variation.
DifferentiableVelocity measure_field(const LoadedModel& model, const json& cfg,
                                     const std::string& parent) {
  if (cfg.contains("fd_h"))
    return finite_difference_velocity(model.velocity, need_num(cfg, "fd_h", parent));
  if (model.diff) return *model.diff;
  return finite_difference_velocity(model.velocity, model.cone ? 1e-2 : 1e-5);
}

// ---- commands ----

void cmd_gen_data(const json& cfg, RunContext& ctx) {
  const std::string preset = need_str(cfg, "preset", "");
  Mat pts;
  std::optional<ImageShape> shape;
  if (preset == "fig5a-3pt") {
    pts = Mat(1, 3);
    pts << -0.9, 0.0, 0.9;
  } else if (preset == "kpoints") {
    const long k = need_int(cfg, "k", "");
    const long dim = need_int(cfg, "dim", "");
    if (k < 1) fail("k", "expected >= 1");
    if (dim < 1) fail("dim", "expected >= 1");
    Rng rng(mix_seed(ctx.seed, 21));
    pts = Mat(dim, k);
    for (long j = 0; j < k; ++j) pts.col(j) = rng.uniform_vec(dim, -1.0, 1.0);
  } else if (preset == "gmm2d") {
    const long n = get_int(cfg, "n", "", 1000);
    if (n < 1) fail("n", "expected >= 1");
    const double std_dev = get_num(cfg, "std", "", 0.05);
    Mat centers;
    if (cfg.contains("centers")) {
      const json& cs = cfg.at("centers");
      if (!cs.is_array() || cs.empty()) fail("centers", "expected a non-empty array");
      centers = Mat(2, static_cast<Eigen::Index>(cs.size()));
      for (std::size_t j = 0; j < cs.size(); ++j) {
        if (!cs[j].is_array() || cs[j].size() != 2) fail("centers", "expected [x, y] pairs");
        centers(0, static_cast<Eigen::Index>(j)) = cs[j][0].get<double>();
        centers(1, static_cast<Eigen::Index>(j)) = cs[j][1].get<double>();
      }
    } else {
      centers = Mat(2, 8);
      for (int j = 0; j < 8; ++j) {
        const double a = 6.283185307179586476925286766559 * j / 8.0;
        centers(0, j) = std::cos(a);
        centers(1, j) = std::sin(a);
      }
    }
    Rng rng(mix_seed(ctx.seed, 22));
    pts = Mat(2, n);
    for (long j = 0; j < n; ++j) {
      const auto c = rng.uniform_int(static_cast<std::uint64_t>(centers.cols()));
      pts.col(j) = centers.col(static_cast<Eigen::Index>(c)) + std_dev * rng.normal_vec(2);
    }
  } else if (preset == "checkerboard2d") {
    const long n = get_int(cfg, "n", "", 1000);
    if (n < 1) fail("n", "expected >= 1");
    // 4x4 cells tiling [-2,2]^2, density on the even-parity half.
    Rng rng(mix_seed(ctx.seed, 23));
    pts = Mat(2, n);
    for (long j = 0; j < n; ++j) {
      const auto cell = rng.uniform_int(8);
      const auto row = cell / 2;                    // 0..3
      const auto col = 2 * (cell % 2) + (row % 2);  // same parity as row
      pts(0, j) = -2.0 + static_cast<double>(col) + rng.uniform01();
      pts(1, j) = -2.0 + static_cast<double>(row) + rng.uniform01();
    }
  } else if (preset == "blobs8x8") {
    const long n = get_int(cfg, "n", "", 200);
    if (n < 1) fail("n", "expected >= 1");
    const double s = get_num(cfg, "blob_std", "", 1.2);
    Rng rng(mix_seed(ctx.seed, 24));
    pts = Mat(64, n);
    for (long j = 0; j < n; ++j) {
      const double cx = rng.uniform(1.5, 5.5);
      const double cy = rng.uniform(1.5, 5.5);
      for (int r = 0; r < 8; ++r)
        for (int c = 0; c < 8; ++c) {
          const double d2 = (r - cy) * (r - cy) + (c - cx) * (c - cx);
          pts(8 * r + c, j) = std::exp(-d2 / (2.0 * s * s));
        }
    }
    shape = ImageShape{1, 8, 8};
  } else {
    fail("preset", "unknown preset '" + preset + "'");
  }
  Dataset ds(std::move(pts), preset, shape);
  ds.save(ctx.dir / "data.fmdt");
  ctx.note_output("data.fmdt");
}

void cmd_train(const json& cfg, RunContext& ctx) {
  Dataset ds = load_dataset_field(cfg, "dataset", "", ctx);

  const std::string cls_name = get_str(cfg, "class", "", "i+nn");
  const ParamClass cls = schema("class", [&] { return param_class_from_string(cls_name); });
  const std::string act_name = get_str(cfg, "activation", "", "gelu");
  const Activation act = schema("activation", [&] { return activation_from_string(act_name); });
  std::vector<Eigen::Index> hidden;
  if (cfg.contains("hidden")) {
    const json& h = cfg.at("hidden");
    if (!h.is_array() || h.empty()) fail("hidden", "expected a non-empty array");
    for (const auto& v : h) {
      if (!v.is_number_integer() || v.get<long>() < 1) fail("hidden", "expected positive integers");
      hidden.push_back(v.get<long>());
    }
  } else {
    hidden = {64, 64};
  }

  WeightingScheme ws = cfg.contains("weighting")
                           ? parse_weighting(cfg.at("weighting"), "weighting")
                           : WeightingScheme::fm();

  TrainConfig tc;
  tc.epochs = static_cast<int>(get_int(cfg, "epochs", "", 100));
  tc.batch_size = static_cast<int>(get_int(cfg, "batch_size", "", 128));
  if (tc.epochs < 1) fail("epochs", "expected >= 1");
  if (tc.batch_size < 1) fail("batch_size", "expected >= 1");
  tc.adam.learning_rate = get_num(cfg, "lr", "", 1e-3);
  tc.adam.beta1 = get_num(cfg, "beta1", "", 0.9);
  tc.adam.beta2 = get_num(cfg, "beta2", "", 0.999);
  tc.adam.eps = get_num(cfg, "adam_eps", "", 1e-8);
  tc.ema_decay = get_num(cfg, "ema", "", 0.999);
  tc.t_sampling = Interval{get_num(cfg, "t_min", "", 0.0), get_num(cfg, "t_max", "", 0.999)};
  tc.finetune_fraction = get_num(cfg, "finetune_fraction", "", 1.0);
  tc.seed = mix_seed(ctx.seed, 32);
  if (cfg.contains("regularizer")) {
    const json& r = cfg.at("regularizer");
    RegSpec rs;
    rs.t_min = get_num(r, "t_min", "regularizer", 0.0);
    rs.t_max = get_num(r, "t_max", "regularizer", 1.0);
    rs.lambda = get_num(r, "lambda", "regularizer", 0.1);
    rs.floor_m = get_num(r, "floor", "regularizer", 2.0);
    rs.power_iters = static_cast<int>(get_int(r, "power_iters", "regularizer", 10));
    tc.regularizer = rs;
  }

  NetModel net = NetModel::make(ds.dim(), hidden, act, TimeEmbedding::standard());
  const std::uint64_t init_seed = mix_seed(ctx.seed, 31);
  net.init_weights(init_seed);
  ParametrizedDenoiser proto{std::move(net), cls};

  if (get_bool(cfg, "ensemble", "", false)) {
    std::vector<TrainResult> results;
    EnsembleDenoiser ens = train_ensemble_10(ds, proto, ws, tc, &results);
    std::string loss_csv = "expert,epoch,loss\n";
    bool any_diverged = false;
    for (std::size_t e = 0; e < results.size(); ++e) {
      any_diverged = any_diverged || results[e].diverged;
      for (std::size_t k = 0; k < results[e].epoch_loss.size(); ++k)
        loss_csv += csv_row({double(e), double(k), results[e].epoch_loss[k]});
      Checkpoint ck{results[e].model, init_seed, results[e].ema_weights};
      const std::string name = "model-" + std::to_string(e) + ".json";
      save_checkpoint(ctx.dir / name, ck);
      ctx.note_output(name);
    }
    ctx.write_text("loss.csv", loss_csv);
    json summary{{"diverged", any_diverged}, {"experts", results.size()}};
    ctx.write_text("train.json", summary.dump(2) + "\n");
  } else {
    TrainResult res = train(ds, std::move(proto), ws, tc);
    Checkpoint ck{std::move(res.model), init_seed, std::move(res.ema_weights)};
    save_checkpoint(ctx.dir / "model.json", ck);
    ctx.note_output("model.json");
    std::string loss_csv = "epoch,loss\n";
    for (std::size_t k = 0; k < res.epoch_loss.size(); ++k)
      loss_csv += csv_row({double(k), res.epoch_loss[k]});
    ctx.write_text("loss.csv", loss_csv);
    json summary{{"diverged", res.diverged},
                 {"steps", res.steps_completed},
                 {"final_loss", res.epoch_loss.empty() ? 0.0 : res.epoch_loss.back()}};
    ctx.write_text("train.json", summary.dump(2) + "\n");
  }
}

void cmd_sample(const json& cfg, RunContext& ctx) {
  LoadedModel model = load_model(need(cfg, "model", ""), "model", ctx);
  const long n = get_int(cfg, "n", "", 100);
  if (n < 1) fail("n", "expected >= 1");
  const long dim = get_int(cfg, "dim", "", model.dim);
  if (dim != model.dim) fail("dim", "does not match the model dimension");
  IntegratorSpec spec = parse_integrator(cfg, "");

  Mat endpoints(dim, n);
  const std::uint64_t x0_seed = mix_seed(ctx.seed, 41);
  std::vector<char> failed(static_cast<std::size_t>(n), 0);
  // Cone fields transport the uniform cube base, every other model a
  // standard normal one.
  const Interval* window = model.perturb_window ? &*model.perturb_window : nullptr;
  parallel_for(n, [&](std::int64_t j) {
    Rng rng(mix_seed(x0_seed, static_cast<std::uint64_t>(j)));
    const Vec x0 = model.cone ? rng.uniform_vec(dim, -1.0, 1.0) : rng.normal_vec(dim);
    TrajectoryRecord rec = sample(model.velocity, x0, spec, window);
    if (rec.aborted)
      failed[static_cast<std::size_t>(j)] = 1;
    else
      endpoints.col(j) = rec.endpoint();
  });
  for (long j = 0; j < n; ++j)
    if (failed[static_cast<std::size_t>(j)])
      throw std::runtime_error("trajectory " + std::to_string(j) + " aborted (non-finite state)");
  ctx.write_text("endpoints.csv", matrix_csv(endpoints, "x"));

  // Full paths plus a diagnostics sidecar for the first `trajectories`
  // samples, re-integrated to keep the endpoint loop free of bookkeeping.
  const long n_dump = get_int(cfg, "trajectories", "", 0);
  if (n_dump < 0 || n_dump > n) fail("trajectories", "expected a value in [0, n]");
  for (long j = 0; j < n_dump; ++j) {
    Rng rng(mix_seed(x0_seed, static_cast<std::uint64_t>(j)));
    const Vec x0 = model.cone ? rng.uniform_vec(dim, -1.0, 1.0) : rng.normal_vec(dim);
    TrajectoryRecord rec = sample(model.velocity, x0, spec, window);
    std::string csv = "t";
    for (Eigen::Index i = 0; i < dim; ++i) csv += ",x" + std::to_string(i);
    csv += '\n';
    for (std::size_t k = 0; k < rec.times.size(); ++k) {
      csv += format_double(rec.times[k]);
      for (Eigen::Index i = 0; i < dim; ++i) csv += "," + format_double(rec.states[k][i]);
      csv += '\n';
    }
    ctx.write_text("trajectory-" + std::to_string(j) + ".csv", csv);
    json side{{"aborted", rec.aborted},
              {"speed", rec.speed},
              {"perturbed", json::array()},
              {"steps", rec.times.empty() ? 0 : rec.times.size() - 1}};
    for (char f : rec.perturbed) side["perturbed"].push_back(f != 0);
    ctx.write_text("trajectory-" + std::to_string(j) + ".json", side.dump(2) + "\n");
  }
}

void cmd_perturb(const json& cfg, RunContext& ctx) {
  LoadedModel model = load_model(need(cfg, "model", ""), "model", ctx);
  Dataset ds = load_dataset_field(cfg, "dataset", "", ctx);
  if (ds.dim() != model.dim) fail("dataset", "dimension does not match the model");

  PerturbationSpec spec = parse_perturbation(cfg, "", /*need_nodes=*/false);
  spec.psnr_ratio = get_num(cfg, "ratio", "", 0.9);
  if (!(*spec.psnr_ratio > 0.0 && *spec.psnr_ratio <= 1.0))
    fail("ratio", "expected a value in (0, 1]");
  const long nodes = get_int(cfg, "nodes", "", 7);
  if (nodes < 2) fail("nodes", "expected >= 2");
  const long n_eval = get_int(cfg, "n_eval", "", 64);
  if (n_eval < 1) fail("n_eval", "expected >= 1");
  const double data_max = get_num(cfg, "data_max", "", ds.value_range());
  const double tol_db = get_num(cfg, "tol_db", "", 1e-3);

  CalibrationResult calib =
      calibrate_level(model.denoiser, spec, ds, static_cast<int>(nodes),
                      static_cast<int>(n_eval), data_max, mix_seed(ctx.seed, 51), tol_db);

  std::string csv = "t,sigma,base_psnr_db,achieved_psnr_db\n";
  json node_list = json::array();
  for (std::size_t k = 0; k < calib.t_nodes.size(); ++k) {
    csv += csv_row({calib.t_nodes[k], calib.sigma[k], calib.base_psnr[k], calib.achieved_psnr[k]});
    node_list.push_back({calib.t_nodes[k], calib.sigma[k]});
  }
  ctx.write_text("calibration.csv", csv);
  // Echo a block that plugs into a model spec's "perturb" field directly.
  json p{{"kind", to_string(spec.kind)},
         {"patch", spec.patch_size},
         {"window", {spec.window.lo, spec.window.hi}},
         {"sigma_nodes", node_list}};
  ctx.write_text("perturbation.json", p.dump(2) + "\n");
}

void cmd_psnr(const json& cfg, RunContext& ctx) {
  LoadedModel model = load_model(need(cfg, "model", ""), "model", ctx);
  Dataset ds = load_dataset_field(cfg, "dataset", "", ctx);
  if (ds.dim() != model.dim) fail("dataset", "dimension does not match the model");
  const std::vector<double> grid = parse_t_grid(cfg, "", 0.0, 1.0, 21);
  const long n_eval = get_int(cfg, "n_eval", "", 64);
  if (n_eval < 1) fail("n_eval", "expected >= 1");
  const double data_max = get_num(cfg, "data_max", "", ds.value_range());

  std::optional<LoadedModel> baseline;
  if (cfg.contains("baseline")) baseline = load_model(cfg.at("baseline"), "baseline", ctx);

  PsnrCurve curve =
      psnr_curve(model.denoiser, ds, grid, static_cast<int>(n_eval), data_max,
                 mix_seed(ctx.seed, 52), baseline ? &baseline->denoiser : nullptr);
  std::string csv = baseline ? "t,psnr_db,diff_db\n" : "t,psnr_db\n";
  for (std::size_t k = 0; k < curve.t.size(); ++k) {
    if (baseline)
      csv += csv_row({curve.t[k], curve.mean_psnr[k], curve.diff_psnr[k]});
    else
      csv += csv_row({curve.t[k], curve.mean_psnr[k]});
  }
  ctx.write_text("psnr.csv", csv);
}

void cmd_lipschitz(const json& cfg, RunContext& ctx) {
  LoadedModel model = load_model(need(cfg, "model", ""), "model", ctx);
  DifferentiableVelocity measure = measure_field(model, cfg, "");
  const std::vector<double> grid = parse_t_grid(cfg, "", 0.0, 0.999, 21);
  const long n_traj = get_int(cfg, "n_traj", "", 20);
  if (n_traj < 1) fail("n_traj", "expected >= 1");
  const long substeps = get_int(cfg, "substeps", "", 20);
  if (substeps < 1) fail("substeps", "expected >= 1");
  const long power_iters = get_int(cfg, "power_iters", "", 30);
  if (power_iters < 1) fail("power_iters", "expected >= 1");

  const Eigen::Index d = model.dim;
  const bool cone = model.cone;
  LipschitzProfile prof = lipschitz_profile(
      model.velocity, measure,
      [d, cone](Rng& rng) { return cone ? rng.uniform_vec(d, -1.0, 1.0) : rng.normal_vec(d); },
      static_cast<int>(n_traj), grid, static_cast<int>(substeps), static_cast<int>(power_iters),
      mix_seed(ctx.seed, 61));

  std::string csv = "t,mean,std\n";
  for (std::size_t k = 0; k < prof.t.size(); ++k)
    csv += csv_row({prof.t[k], prof.mean[k], prof.stddev[k]});
  ctx.write_text("lipschitz.csv", csv);
}

void cmd_pairwise(const json& cfg, RunContext& ctx) {
  const json& eps = need(cfg, "endpoints", "");
  if (!eps.is_array() || eps.empty()) fail("endpoints", "expected a non-empty array of csv paths");
  std::vector<Mat> sets;
  for (const auto& pj : eps) {
    if (!pj.is_string()) fail("endpoints", "expected strings");
    const std::string path = pj.get<std::string>();
    if (!std::filesystem::exists(path)) fail("endpoints", "file not found: " + path);
    ctx.note_input(path);
    sets.push_back(Dataset::from_csv(path, "endpoints").points());
  }
  Mat dist = pairwise_distance_matrix(sets);
  ctx.write_text("pairwise.csv", matrix_csv(dist, "m"));

  if (cfg.contains("trainset")) {
    Dataset train = load_dataset_field(cfg, "trainset", "", ctx);
    std::string csv = "model,mean_nn_distance\n";
    for (std::size_t i = 0; i < sets.size(); ++i)
      csv += csv_row({double(i), distance_to_trainset(sets[i], train)});
    ctx.write_text("trainset_distance.csv", csv);
  }
}

void cmd_twosample(const json& cfg, RunContext& ctx) {
  auto load_set = [&](const std::string& key) {
    const std::string path = need_str(cfg, key, "");
    if (!std::filesystem::exists(path)) fail(key, "file not found: " + path);
    ctx.note_input(path);
    return Dataset::from_csv(path, key).points();
  };
  const Mat a = load_set("a");
  const Mat b = load_set("b");
  const std::string kind_name = get_str(cfg, "kind", "", "energy");
  const TwoSampleKind kind =
      schema("kind", [&] { return two_sample_kind_from_string(kind_name); });
  std::optional<double> bw;
  if (cfg.contains("bandwidth")) bw = need_num(cfg, "bandwidth", "");

  TwoSampleReport rep = two_sample_statistic(a, b, kind, bw);
  json out{{"kind", to_string(rep.kind)},
           {"statistic", rep.statistic},
           {"n_a", rep.n_a},
           {"n_b", rep.n_b}};
  if (kind == TwoSampleKind::GaussianMMD) out["bandwidth"] = rep.bandwidth;
  ctx.write_text("twosample.json", out.dump(2) + "\n");
}

// A single-sample vector field: an inline array, or a one-sample dataset
// file (FMDT1 or CSV).
Vec parse_sample_field(const json& cfg, const std::string& key, RunContext& ctx) {
  const json& v = need(cfg, key, "");
  if (v.is_array()) return need_vec(cfg, key, "");
  if (!v.is_string()) fail(key, "expected an array or a file path");
  Dataset ds = load_dataset_field(cfg, key, "", ctx);
  if (ds.size() != 1) fail(key, "expected exactly one sample");
  return ds.point(0);
}

// Mask: an inline 0/1 array, a one-sample dataset file, or a rectangle of
// *hidden* pixels {"rect": [row, col, height, width]} on image-shaped data.
Vec parse_mask(const json& cfg, const LoadedModel& model, RunContext& ctx) {
  const json& m = need(cfg, "mask", "");
  if (m.is_array()) return need_vec(cfg, "mask", "");
  if (m.is_string()) {
    Dataset ds = load_dataset_field(cfg, "mask", "", ctx);
    if (ds.size() != 1) fail("mask", "expected exactly one sample");
    return ds.point(0);
  }
  if (!m.is_object() || !m.contains("rect")) fail("mask", "expected an array, path, or rect spec");
  const json& r = m.at("rect");
  if (!r.is_array() || r.size() != 4) fail("mask.rect", "expected [row, col, height, width]");
  for (const auto& v : r)
    if (!v.is_number_integer() || v.get<long>() < 0) fail("mask.rect", "expected integers >= 0");
  ImageShape shape;
  if (m.contains("shape")) {
    const json& s = m.at("shape");
    if (!s.is_array() || s.size() != 3) fail("mask.shape", "expected [channels, height, width]");
    shape = ImageShape{s[0].get<std::uint32_t>(), s[1].get<std::uint32_t>(),
                       s[2].get<std::uint32_t>()};
  } else if (model.shape) {
    shape = *model.shape;
  } else {
    fail("mask.shape", "missing and the model carries no image shape");
  }
  if (static_cast<Eigen::Index>(shape.size()) != model.dim)
    fail("mask.shape", "does not match the model dimension");
  const long r0 = r[0].get<long>(), c0 = r[1].get<long>();
  const long rh = r[2].get<long>(), rw = r[3].get<long>();
  if (r0 + rh > shape.height || c0 + rw > shape.width) fail("mask.rect", "exceeds the image");
  Vec mask = Vec::Ones(model.dim);
  for (std::uint32_t ch = 0; ch < shape.channels; ++ch)
    for (long i = r0; i < r0 + rh; ++i)
      for (long j = c0; j < c0 + rw; ++j)
        mask[static_cast<Eigen::Index>((ch * shape.height + i) * shape.width + j)] = 0.0;
  return mask;
}

void cmd_inpaint(const json& cfg, RunContext& ctx) {
  LoadedModel model = load_model(need(cfg, "model", ""), "model", ctx);
  InverseProblem prob;
  prob.mask = parse_mask(cfg, model, ctx);
  if (prob.mask.size() != model.dim) fail("mask", "length does not match the model dimension");
  prob.noise_std = get_num(cfg, "noise_std", "", 0.0);

  const double alpha = get_num(cfg, "alpha", "", 0.3);
  const long n_iters = get_int(cfg, "iterations", "", 100);
  if (n_iters < 0) fail("iterations", "expected >= 0");

  std::optional<Vec> truth;
  if (cfg.contains("observation")) {
    prob.observation = parse_sample_field(cfg, "observation", ctx);
    if (prob.observation.size() != model.dim)
      fail("observation", "length does not match the model");
  } else {
    // Convenience path: corrupt one dataset row, keeping it as ground truth
    // for the PSNR trace.
    Dataset ds = load_dataset_field(cfg, "dataset", "", ctx);
    if (ds.dim() != model.dim) fail("dataset", "dimension does not match the model");
    const long idx = need_int(cfg, "index", "");
    if (idx < 0 || idx >= ds.size()) fail("index", "out of range");
    truth = ds.point(idx);
    prob.observation = *truth;
    if (prob.noise_std > 0.0) {
      Rng rng(mix_seed(ctx.seed, 72));
      prob.observation += prob.noise_std * rng.normal_vec(model.dim);
    }
    prob.observation = prob.mask.cwiseProduct(prob.observation);
  }

  std::vector<Vec> iterates;
  Vec restored = pnp_flow_inpaint(model.denoiser, prob, alpha, static_cast<int>(n_iters),
                                  mix_seed(ctx.seed, 71), &iterates);
  ctx.write_text("restored.csv", matrix_csv(restored, "x"));

  if (truth) {
    const double data_max = get_num(cfg, "data_max", "", 1.0);
    std::string csv = "iteration,psnr_db\n";
    for (std::size_t k = 0; k < iterates.size(); ++k)
      csv += csv_row({double(k + 1), psnr(iterates[k], *truth, data_max)});
    ctx.write_text("trace.csv", csv);
    json out{{"final_psnr_db", psnr(restored, *truth, data_max)},
             {"error", (restored - *truth).norm()}};
    ctx.write_text("result.json", out.dump(2) + "\n");
  }
}

using CommandFn = void (*)(const json&, RunContext&);

CommandFn command_fn(const std::string& name) {
  if (name == "gen-data") return cmd_gen_data;
  if (name == "train") return cmd_train;
  if (name == "sample") return cmd_sample;
  if (name == "perturb") return cmd_perturb;
  if (name == "psnr") return cmd_psnr;
  if (name == "lipschitz") return cmd_lipschitz;
  if (name == "pairwise") return cmd_pairwise;
  if (name == "twosample") return cmd_twosample;
  if (name == "inpaint") return cmd_inpaint;
  return nullptr;
}

}  // namespace

std::string config_hash_hex(const std::string& command, const std::string& canonical_config,
                            std::uint64_t seed) {
  const std::string key = command + "\n" + canonical_config + "\n" + std::to_string(seed);
  return to_hex(fnv1a64(key) & 0xffffffffull, 8);
}

std::filesystem::path make_run_dir(const std::filesystem::path& root, const std::string& tag) {
  std::filesystem::create_directories(root);
  std::filesystem::path dir = root / tag;
  for (int k = 1; std::filesystem::exists(dir); ++k)
    dir = root / (tag + "-" + std::to_string(k));
  std::filesystem::create_directory(dir);
  return dir;
}

int run(int argc, const char* const* argv) {
  CLI::App app{"flow-matching denoising toolkit"};
  app.require_subcommand(1);

  struct {
    std::string config;
    std::uint64_t seed = 0;
    std::string out = "runs";
    int threads = 0;
    bool seed_given = false;
  } opts;

  const std::vector<std::string> names = {"gen-data", "train",    "sample",   "perturb", "psnr",
                                          "lipschitz", "pairwise", "twosample", "inpaint"};
  for (const auto& name : names) {
    CLI::App* sub = app.add_subcommand(name);
    sub->add_option("--config", opts.config, "JSON config (or a manifest to re-run)")->required();
    sub->add_option("--seed", opts.seed, "root seed for every random draw");
    sub->add_option("--out", opts.out, "directory that receives the run directory");
    sub->add_option("--threads", opts.threads, "worker cap; 0 reads FMDT_THREADS, default 1");
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  CLI::App* sub = app.get_subcommands().front();
  const std::string command = sub->get_name();
  opts.seed_given = sub->count("--seed") > 0;

  try {
    if (!std::filesystem::exists(opts.config))
      fail("config", "file not found: " + opts.config);
    json cfg;
    try {
      cfg = json::parse(read_file(opts.config));
    } catch (const json::parse_error& e) {
      fail("config", std::string("not valid JSON: ") + e.what());
    }
    if (!cfg.is_object()) fail("config", "expected a JSON object");

    // A manifest re-runs its recorded command with its recorded seed; an
    // explicit --seed still wins.
    if (cfg.contains("format") && cfg.at("format") == kManifestFormat) {
      const std::string recorded = need_str(cfg, "command", "");
      if (recorded != command)
        fail("command", "manifest records '" + recorded + "', not '" + command + "'");
      if (!opts.seed_given) opts.seed = need(cfg, "seed", "").get<std::uint64_t>();
      cfg = need(cfg, "config", "");
      if (!cfg.is_object()) fail("config", "expected a JSON object");
    }

    int threads = opts.threads;
    if (threads == 0) {
      if (const char* env = std::getenv("FMDT_THREADS")) threads = std::atoi(env);
      if (threads <= 0) threads = 1;
    }
    set_max_threads(threads);

    RunContext ctx;
    ctx.seed = opts.seed;
    ctx.dir = make_run_dir(opts.out, config_hash_hex(command, cfg.dump(), opts.seed));

    command_fn(command)(cfg, ctx);

    json manifest{{"format", kManifestFormat}, {"version", kVersion},
                  {"command", command},        {"seed", opts.seed},
                  {"config", cfg},             {"inputs", ctx.inputs},
                  {"outputs", ctx.outputs}};
    write_file(ctx.dir / "manifest.json", manifest.dump(2) + "\n");

    std::cout << ctx.dir.generic_string() << "\n";
    return 0;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}

}  // namespace fmdt::cli
