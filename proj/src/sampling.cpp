#include "fmdt/sampling.hpp"

#include "fmdt/analysis.hpp"
#include "fmdt/parallel.hpp"
#include "fmdt/rng.hpp"

#include <algorithm>
#include <cmath>

namespace fmdt {

namespace {

// hard ceiling for velocity evaluation times; the remaining mass is handled
// by the terminal denoiser jump
constexpr double kMaxEvalTime = 1.0 - 1e-3;
constexpr double kTimeSlack = 1e-12;

void check_spec(const IntegratorSpec& spec) {
  if (!(spec.t_end > 0.0 && spec.t_end <= kMaxEvalTime + kTimeSlack))
    throw std::invalid_argument("t_end must lie in (0, 1-1e-3]");
  if (spec.scheme != Scheme::AdaptiveRK45 && spec.steps < 1)
    throw std::invalid_argument("steps must be >= 1");
  if (spec.scheme == Scheme::AdaptiveRK45 && (!(spec.rtol > 0.0) || !(spec.atol > 0.0)))
    throw std::invalid_argument("adaptive tolerances must be positive");
}

bool record_state(TrajectoryRecord& rec, double t, const Vec& x, const Interval* window) {
  if (!x.allFinite()) {
    rec.aborted = true;
    return false;
  }
  rec.times.push_back(t);
  rec.states.push_back(x);
  rec.perturbed.push_back(window && window->contains(t) ? 1 : 0);
  return true;
}

}  // namespace

Scheme scheme_from_string(const std::string& s) {
  if (s == "euler") return Scheme::Euler;
  if (s == "heun") return Scheme::Heun;
  if (s == "rk4") return Scheme::RK4;
  if (s == "rk45") return Scheme::AdaptiveRK45;
  throw std::invalid_argument("unknown integrator scheme: " + s);
}

std::string to_string(Scheme s) {
  switch (s) {
    case Scheme::Euler: return "euler";
    case Scheme::Heun: return "heun";
    case Scheme::RK4: return "rk4";
    case Scheme::AdaptiveRK45: return "rk45";
  }
  return "?";
}

TrajectoryRecord sample(const VelocityField& v, const Vec& x0, const IntegratorSpec& spec,
                        const Interval* perturb_window) {
  check_spec(spec);
  TrajectoryRecord rec;
  Vec x = x0;
  if (!record_state(rec, 0.0, x, perturb_window)) return rec;

  auto eval = [&](const Vec& y, double t) -> Vec { return v.eval(y, t); };

  if (spec.scheme == Scheme::AdaptiveRK45) {
    // Dormand-Prince 5(4)
    static const double c[7] = {0, 1.0 / 5, 3.0 / 10, 4.0 / 5, 8.0 / 9, 1.0, 1.0};
    static const double a[7][6] = {
        {},
        {1.0 / 5},
        {3.0 / 40, 9.0 / 40},
        {44.0 / 45, -56.0 / 15, 32.0 / 9},
        {19372.0 / 6561, -25360.0 / 2187, 64448.0 / 6561, -212.0 / 729},
        {9017.0 / 3168, -355.0 / 33, 46732.0 / 5247, 49.0 / 176, -5103.0 / 18656},
        {35.0 / 384, 0.0, 500.0 / 1113, 125.0 / 192, -2187.0 / 6784, 11.0 / 84}};
    static const double b5[7] = {35.0 / 384,    0.0,       500.0 / 1113, 125.0 / 192,
                                 -2187.0 / 6784, 11.0 / 84, 0.0};
    static const double b4[7] = {5179.0 / 57600,    0.0,          7571.0 / 16695, 393.0 / 640,
                                 -92097.0 / 339200, 187.0 / 2100, 1.0 / 40};
    double t = 0.0;
    double h = spec.t_end / 100.0;
    long n_steps = 0;
    while (t < spec.t_end) {
      if (h < 1e-12) throw std::runtime_error("adaptive integrator step underflow");
      if (++n_steps > 1000000) throw std::runtime_error("adaptive integrator step budget exceeded");
      if (t + h > spec.t_end) h = spec.t_end - t;
      std::vector<Vec> k(7);
      k[0] = eval(x, t);
      bool finite = k[0].allFinite();
      for (int i = 1; i < 7 && finite; ++i) {
        Vec y = x;
        for (int j = 0; j < i; ++j)
          if (a[i][j] != 0.0) y += h * a[i][j] * k[j];
        k[i] = eval(y, t + c[i] * h);
        finite = k[i].allFinite();
      }
      if (!finite) {
        rec.aborted = true;
        return rec;
      }
      Vec x5 = x, err = Vec::Zero(x.size());
      for (int i = 0; i < 7; ++i) {
        if (b5[i] != 0.0) x5 += h * b5[i] * k[i];
        double db = b5[i] - b4[i];
        if (db != 0.0) err += h * db * k[i];
      }
      double scale2 = 0.0;
      for (Eigen::Index i = 0; i < x.size(); ++i) {
        double sc = spec.atol + spec.rtol * std::max(std::abs(x[i]), std::abs(x5[i]));
        double r = err[i] / sc;
        scale2 += r * r;
      }
      double err_norm = std::sqrt(scale2 / static_cast<double>(x.size()));
      if (err_norm <= 1.0) {
        t += h;
        x = x5;
        rec.speed.push_back(k[0].norm());
        if (!record_state(rec, t, x, perturb_window)) return rec;
      }
      double factor = err_norm > 0.0 ? 0.9 * std::pow(err_norm, -0.2) : 5.0;
      h *= std::clamp(factor, 0.2, 5.0);
    }
  } else {
    const double h = spec.t_end / spec.steps;
    for (int kstep = 0; kstep < spec.steps; ++kstep) {
      const double t = (kstep == 0) ? 0.0 : h * kstep;
      const double t_next = (kstep + 1 == spec.steps) ? spec.t_end : h * (kstep + 1);
      const double hs = t_next - t;
      Vec k1 = eval(x, t);
      if (!k1.allFinite()) {
        rec.aborted = true;
        return rec;
      }
      rec.speed.push_back(k1.norm());
      switch (spec.scheme) {
        case Scheme::Euler:
          x += hs * k1;
          break;
        case Scheme::Heun: {
          Vec k2 = eval(x + hs * k1, t_next);
          x += 0.5 * hs * (k1 + k2);
          break;
        }
        case Scheme::RK4: {
          Vec k2 = eval(x + 0.5 * hs * k1, t + 0.5 * hs);
          Vec k3 = eval(x + 0.5 * hs * k2, t + 0.5 * hs);
          Vec k4 = eval(x + hs * k3, t_next);
          x += hs / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
          break;
        }
        default:
          break;
      }
      if (!record_state(rec, t_next, x, perturb_window)) return rec;
    }
  }

  if (spec.terminal_jump) {
    Vec vj = eval(x, spec.t_end);
    rec.speed.push_back(vj.norm());
    Vec xf = x + (1.0 - spec.t_end) * vj;
    record_state(rec, 1.0, xf, perturb_window);
  }
  return rec;
}

std::vector<Vec> states_on_grid(const VelocityField& v, const Vec& x0,
                                const std::vector<double>& t_grid, int substeps) {
  if (substeps < 1) throw std::invalid_argument("substeps must be >= 1");
  if (t_grid.empty()) throw std::invalid_argument("empty time grid");
  for (std::size_t i = 0; i < t_grid.size(); ++i) {
    if (t_grid[i] < 0.0 || t_grid[i] > kMaxEvalTime + kTimeSlack)
      throw std::invalid_argument("grid times must lie in [0, 1-1e-3]");
    if (i > 0 && t_grid[i] <= t_grid[i - 1])
      throw std::invalid_argument("grid times must be strictly increasing");
  }
  std::vector<Vec> out;
  out.reserve(t_grid.size());
  double t = 0.0;
  Vec x = x0;
  for (double g : t_grid) {
    if (g > t) {
      const double h = (g - t) / substeps;
      for (int s = 0; s < substeps; ++s) {
        const double ts = t + h * s;
        const double te = (s + 1 == substeps) ? g : t + h * (s + 1);
        const double hs = te - ts;
        Vec k1 = v.eval(x, ts);
        Vec k2 = v.eval(x + 0.5 * hs * k1, ts + 0.5 * hs);
        Vec k3 = v.eval(x + 0.5 * hs * k2, ts + 0.5 * hs);
        Vec k4 = v.eval(x + hs * k3, te);
        x += hs / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
      }
      t = g;
    }
    if (!x.allFinite()) throw std::runtime_error("non-finite state during grid integration");
    out.push_back(x);
  }
  return out;
}

std::vector<Mat> paired_sample(const std::vector<VelocityField>& models, Eigen::Index d,
                               int n_samples, const IntegratorSpec& spec, std::uint64_t seed) {
  if (models.empty()) throw std::invalid_argument("no models given");
  if (n_samples < 1) throw std::invalid_argument("n_samples must be >= 1");
  Mat x0(d, n_samples);
  Rng rng(mix_seed(seed, 7));
  for (int s = 0; s < n_samples; ++s) x0.col(s) = rng.normal_vec(d);
  std::vector<Mat> endpoints;
  for (const auto& m : models) {
    Mat e(d, n_samples);
    parallel_for(n_samples, [&](std::int64_t s) {
      TrajectoryRecord rec = sample(m, x0.col(s), spec);
      if (rec.aborted) throw std::runtime_error("trajectory aborted on non-finite state");
      e.col(s) = rec.endpoint();
    });
    endpoints.push_back(std::move(e));
  }
  return endpoints;
}

DirectionKind direction_from_string(const std::string& s) {
  if (s == "checkerboard") return DirectionKind::Checkerboard;
  if (s == "pos_shift") return DirectionKind::PosShift;
  if (s == "neg_shift") return DirectionKind::NegShift;
  if (s == "residual") return DirectionKind::Residual;
  throw std::invalid_argument("unknown direction kind: " + s);
}

std::string to_string(DirectionKind k) {
  switch (k) {
    case DirectionKind::Checkerboard: return "checkerboard";
    case DirectionKind::PosShift: return "pos_shift";
    case DirectionKind::NegShift: return "neg_shift";
    case DirectionKind::Residual: return "residual";
  }
  return "?";
}

Vec make_direction(DirectionKind kind, Eigen::Index d, const std::optional<ImageShape>& shape,
                   int patch_size) {
  switch (kind) {
    case DirectionKind::PosShift: return Vec::Ones(d);
    case DirectionKind::NegShift: return -Vec::Ones(d);
    case DirectionKind::Residual:
      throw std::invalid_argument("residual perturbation has no static direction");
    case DirectionKind::Checkerboard: {
      if (!shape) throw std::invalid_argument("checkerboard direction requires an image shape");
      if (shape->size() != static_cast<std::uint64_t>(d))
        throw std::invalid_argument("image shape does not match dimension");
      if (patch_size < 1) throw std::invalid_argument("patch size must be >= 1");
      Vec dir(d);
      Eigen::Index idx = 0;
      for (std::uint32_t ch = 0; ch < shape->channels; ++ch)
        for (std::uint32_t i = 0; i < shape->height; ++i)
          for (std::uint32_t j = 0; j < shape->width; ++j)
            dir[idx++] = ((i / patch_size + j / patch_size) % 2 == 0) ? 1.0 : -1.0;
      return dir;
    }
  }
  throw std::logic_error("unreachable");
}

double sigma_at(const PerturbationSpec& spec, double t) {
  if (!spec.sigma_nodes)
    throw std::runtime_error("perturbation level is uncalibrated; run calibrate_level first");
  const auto& nodes = *spec.sigma_nodes;
  if (nodes.empty()) throw std::runtime_error("empty sigma table");
  if (t <= nodes.front().first) return nodes.front().second;
  if (t >= nodes.back().first) return nodes.back().second;
  for (std::size_t i = 1; i < nodes.size(); ++i) {
    if (t <= nodes[i].first) {
      const auto& [t0, s0] = nodes[i - 1];
      const auto& [t1, s1] = nodes[i];
      double a = (t - t0) / (t1 - t0);
      return (1.0 - a) * s0 + a * s1;
    }
  }
  return nodes.back().second;
}

Denoiser perturb_denoiser(Denoiser base, const PerturbationSpec& spec, Eigen::Index d,
                          const std::optional<ImageShape>& shape) {
  if (!spec.sigma_nodes)
    throw std::invalid_argument("perturbation level is uncalibrated; run calibrate_level first");
  if (!(spec.window.lo <= spec.window.hi) || spec.window.lo < 0.0 || spec.window.hi > 1.0)
    throw std::invalid_argument("perturbation window must be a subinterval of [0,1]");
  Vec dir;
  if (spec.kind != DirectionKind::Residual)
    dir = make_direction(spec.kind, d, shape, spec.patch_size);
  return Denoiser{[base = std::move(base), spec, dir](const Vec& x, double t) -> Vec {
    if (!spec.window.contains(t)) return base.eval(x, t);
    Vec b = base.eval(x, t);
    const double s = sigma_at(spec, t);
    if (spec.kind == DirectionKind::Residual) return b + s * (x - b);
    return b + s * dir;
  }};
}

CalibrationResult calibrate_level(const Denoiser& base, PerturbationSpec& spec,
                                  const Dataset& ds_test, int n_nodes, int n_eval, double data_max,
                                  std::uint64_t seed, double tol_db) {
  if (!spec.psnr_ratio) throw std::invalid_argument("spec carries no psnr_ratio target");
  const double ratio = *spec.psnr_ratio;
  if (!(ratio > 0.0 && ratio <= 1.0)) throw std::invalid_argument("psnr_ratio must lie in (0,1]");
  if (n_nodes < 2) throw std::invalid_argument("need at least two calibration nodes");
  if (n_eval < 1) throw std::invalid_argument("n_eval must be >= 1");
  if (!(data_max > 0.0)) throw std::invalid_argument("data_max must be positive");
  if (!(tol_db > 0.0)) throw std::invalid_argument("tol_db must be positive");

  const Eigen::Index d = ds_test.dim();
  Vec dir;
  if (spec.kind != DirectionKind::Residual)
    dir = make_direction(spec.kind, d, ds_test.shape(), spec.patch_size);

  CalibrationResult out;
  std::vector<std::pair<double, double>> nodes;
  for (int k = 0; k < n_nodes; ++k) {
    const double t =
        spec.window.lo + (spec.window.hi - spec.window.lo) * k / static_cast<double>(n_nodes - 1);
    // fixed evaluation set per node: test points cycled, seeded noise
    Mat x1(d, n_eval), xt(d, n_eval), b(d, n_eval);
    Rng rng(mix_seed(seed, static_cast<std::uint64_t>(k)));
    for (int e = 0; e < n_eval; ++e) {
      x1.col(e) = ds_test.point(e % ds_test.size());
      Vec x0 = rng.normal_vec(d);
      xt.col(e) = interpolate(x0, x1.col(e), t);
      b.col(e) = base.eval(xt.col(e), t);
    }
    auto psnr_of = [&](double s) {
      double acc = 0.0;
      for (int e = 0; e < n_eval; ++e) {
        Vec est = (spec.kind == DirectionKind::Residual)
                      ? Vec(b.col(e) + s * (xt.col(e) - b.col(e)))
                      : Vec(b.col(e) + s * dir);
        acc += psnr(est, x1.col(e), data_max);
      }
      return acc / n_eval;
    };

    const double base_db = psnr_of(0.0);
    if (!(base_db > 0.0)) throw std::runtime_error("baseline PSNR must be positive to calibrate");
    const double target = ratio * base_db;

    double lo = 0.0, hi = 1.0;
    double p_hi = psnr_of(hi);
    double prev = base_db;
    int doublings = 0;
    while (p_hi > target) {
      if (p_hi > prev + 1e-9)
        throw std::runtime_error("PSNR is not decreasing in sigma on the bracket");
      prev = p_hi;
      lo = hi;
      hi *= 2.0;
      if (++doublings > 60) throw std::runtime_error("calibration bracket not found");
      p_hi = psnr_of(hi);
    }
    double smid = hi, pmid = p_hi;
    for (int it = 0; it < 200; ++it) {
      smid = 0.5 * (lo + hi);
      pmid = psnr_of(smid);
      if (std::abs(pmid - target) <= tol_db) break;
      if (pmid > target)
        lo = smid;
      else
        hi = smid;
    }
    out.t_nodes.push_back(t);
    out.sigma.push_back(smid);
    out.base_psnr.push_back(base_db);
    out.achieved_psnr.push_back(pmid);
    nodes.emplace_back(t, smid);
  }
  spec.sigma_nodes = std::move(nodes);
  return out;
}

}  // namespace fmdt
