#include "fmdt/analysis.hpp"

#include "fmdt/parallel.hpp"
#include "fmdt/sampling.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace fmdt {

double psnr(const Vec& estimate, const Vec& reference, double data_max) {
  if (estimate.size() != reference.size()) throw std::invalid_argument("psnr size mismatch");
  if (!(data_max > 0.0)) throw std::invalid_argument("data_max must be positive");
  const double mse = (estimate - reference).squaredNorm() / static_cast<double>(estimate.size());
  if (mse == 0.0) return 99.0;
  return std::min(10.0 * std::log10(data_max * data_max / mse), 99.0);
}

PsnrCurve psnr_curve(const Denoiser& den, const Dataset& ds_test,
                     const std::vector<double>& t_grid, int n_eval, double data_max,
                     std::uint64_t seed, const Denoiser* baseline) {
  if (n_eval < 1) throw std::invalid_argument("n_eval must be >= 1");
  PsnrCurve out;
  for (std::size_t k = 0; k < t_grid.size(); ++k) {
    const double t = t_grid[k];
    check_time(t);
    Rng rng(mix_seed(seed, k));
    double acc = 0.0, acc_base = 0.0;
    for (int e = 0; e < n_eval; ++e) {
      Vec x1 = ds_test.point(e % ds_test.size());
      Vec x0 = rng.normal_vec(ds_test.dim());
      Vec xt = interpolate(x0, x1, t);
      acc += psnr(den.eval(xt, t), x1, data_max);
      if (baseline != nullptr) acc_base += psnr(baseline->eval(xt, t), x1, data_max);
    }
    out.t.push_back(t);
    out.mean_psnr.push_back(acc / n_eval);
    if (baseline != nullptr) out.diff_psnr.push_back((acc - acc_base) / n_eval);
  }
  return out;
}

double jacobian_spectral_norm(const DifferentiableVelocity& v, const Vec& x, double t, int iters,
                              std::uint64_t seed, Vec* top_right) {
  if (iters < 1) throw std::invalid_argument("power iterations must be >= 1");
  if (!v.jvp) throw std::invalid_argument("velocity carries no jvp");
  const auto& vjp = v.vjp ? v.vjp : v.jvp;  // null vjp declares a symmetric Jacobian
  Rng rng(seed);
  Vec u = rng.normal_vec(x.size());
  double nu = u.norm();
  if (nu == 0.0) u = Vec::Unit(x.size(), 0);
  else u /= nu;
  double sig2 = 0.0;
  for (int it = 0; it < iters; ++it) {
    Vec z = v.jvp(x, t, u);
    Vec y = vjp(x, t, z);
    sig2 = u.dot(y);
    double ny = y.norm();
    if (ny == 0.0) {
      sig2 = 0.0;
      u.setZero();
      break;
    }
    u = y / ny;
  }
  if (top_right) *top_right = u;
  return std::sqrt(std::max(sig2, 0.0));
}

DifferentiableVelocity finite_difference_velocity(VelocityField v, double h_scale) {
  if (!(h_scale > 0.0)) throw std::invalid_argument("h_scale must be positive");
  auto shared = std::make_shared<VelocityField>(std::move(v));
  DifferentiableVelocity out;
  out.eval = [shared](const Vec& x, double t) { return shared->eval(x, t); };
  out.jvp = [shared, h_scale](const Vec& x, double t, const Vec& u) -> Vec {
    const double un = u.norm();
    if (un == 0.0) return Vec::Zero(x.size());
    const Vec dir = u / un;
    const double h = h_scale * (1.0 + x.norm());
    bool ok_p = true, ok_m = true;
    Vec vp, vm;
    try {
      vp = shared->eval(x + h * dir, t);
    } catch (const std::domain_error&) {
      ok_p = false;
    }
    try {
      vm = shared->eval(x - h * dir, t);
    } catch (const std::domain_error&) {
      ok_m = false;
    }
    if (ok_p && ok_m) return (un / (2.0 * h)) * (vp - vm);
    Vec v0 = shared->eval(x, t);
    if (ok_p) return (un / h) * (vp - v0);
    if (ok_m) return (un / h) * (v0 - vm);
    throw std::domain_error("finite-difference stencil leaves the field domain on both sides");
  };
  out.vjp = nullptr;
  return out;
}

LipschitzProfile lipschitz_profile(const VelocityField& flow, const DifferentiableVelocity& measure,
                                   const std::function<Vec(Rng&)>& draw_x0, int n_traj,
                                   const std::vector<double>& t_grid, int substeps, int power_iters,
                                   std::uint64_t seed) {
  if (n_traj < 1) throw std::invalid_argument("n_traj must be >= 1");
  if (t_grid.empty()) throw std::invalid_argument("empty time grid");
  const std::size_t K = t_grid.size();
  Mat norms(static_cast<Eigen::Index>(K), n_traj);
  parallel_for(n_traj, [&](std::int64_t i) {
    Rng rng(mix_seed(seed, 1000 + static_cast<std::uint64_t>(i)));
    Vec x0 = draw_x0(rng);
    std::vector<Vec> states = states_on_grid(flow, x0, t_grid, substeps);
    for (std::size_t k = 0; k < K; ++k) {
      std::uint64_t s = mix_seed(mix_seed(seed, 2000 + static_cast<std::uint64_t>(i)), k);
      norms(static_cast<Eigen::Index>(k), i) =
          jacobian_spectral_norm(measure, states[k], t_grid[k], power_iters, s);
    }
  });
  LipschitzProfile out;
  out.t = t_grid;
  for (std::size_t k = 0; k < K; ++k) {
    const auto row = norms.row(static_cast<Eigen::Index>(k));
    const double mean = row.mean();
    const double var = (row.array() - mean).square().sum() / n_traj;
    out.mean.push_back(mean);
    out.stddev.push_back(std::sqrt(std::max(var, 0.0)));
  }
  return out;
}

Mat pairwise_distance_matrix(const std::vector<Mat>& endpoints) {
  if (endpoints.empty()) throw std::invalid_argument("no endpoint sets given");
  const Eigen::Index m = static_cast<Eigen::Index>(endpoints.size());
  const Eigen::Index n = endpoints.front().cols();
  for (const auto& e : endpoints)
    if (e.cols() != n || e.rows() != endpoints.front().rows())
      throw std::invalid_argument("endpoint sets must be aligned");
  Mat dist = Mat::Zero(m, m);
  for (Eigen::Index a = 0; a < m; ++a)
    for (Eigen::Index b = a + 1; b < m; ++b) {
      double acc = 0.0;
      for (Eigen::Index s = 0; s < n; ++s)
        acc += (endpoints[static_cast<std::size_t>(a)].col(s) -
                endpoints[static_cast<std::size_t>(b)].col(s))
                   .norm();
      dist(a, b) = dist(b, a) = acc / static_cast<double>(n);
    }
  return dist;
}

double distance_to_trainset(const Mat& endpoints, const Dataset& train) {
  if (endpoints.rows() != train.dim())
    throw std::invalid_argument("endpoint dimension does not match training set");
  double acc = 0.0;
  for (Eigen::Index s = 0; s < endpoints.cols(); ++s) {
    double best = std::numeric_limits<double>::infinity();
    for (Eigen::Index i = 0; i < train.size(); ++i)
      best = std::min(best, (endpoints.col(s) - train.points().col(i)).norm());
    acc += best;
  }
  return acc / static_cast<double>(endpoints.cols());
}

TwoSampleKind two_sample_kind_from_string(const std::string& s) {
  if (s == "energy") return TwoSampleKind::Energy;
  if (s == "mmd") return TwoSampleKind::GaussianMMD;
  throw std::invalid_argument("unknown two-sample statistic: " + s);
}

std::string to_string(TwoSampleKind k) {
  return k == TwoSampleKind::Energy ? "energy" : "mmd";
}

namespace {

double mean_cross_distance(const Mat& a, const Mat& b) {
  double acc = 0.0;
  for (Eigen::Index i = 0; i < a.cols(); ++i)
    for (Eigen::Index j = 0; j < b.cols(); ++j) acc += (a.col(i) - b.col(j)).norm();
  return acc / (static_cast<double>(a.cols()) * static_cast<double>(b.cols()));
}

double mean_cross_kernel(const Mat& a, const Mat& b, double inv_two_bw2) {
  double acc = 0.0;
  for (Eigen::Index i = 0; i < a.cols(); ++i)
    for (Eigen::Index j = 0; j < b.cols(); ++j)
      acc += std::exp(-(a.col(i) - b.col(j)).squaredNorm() * inv_two_bw2);
  return acc / (static_cast<double>(a.cols()) * static_cast<double>(b.cols()));
}

double median_pooled_distance(const Mat& a, const Mat& b) {
  std::vector<double> ds;
  const Eigen::Index n = a.cols() + b.cols();
  ds.reserve(static_cast<std::size_t>(n) * (n - 1) / 2);
  auto col = [&](Eigen::Index i) { return i < a.cols() ? a.col(i) : b.col(i - a.cols()); };
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = i + 1; j < n; ++j) ds.push_back((col(i) - col(j)).norm());
  if (ds.empty()) return 1.0;
  std::nth_element(ds.begin(), ds.begin() + ds.size() / 2, ds.end());
  return ds[ds.size() / 2];
}

}  // namespace

TwoSampleReport two_sample_statistic(const Mat& a, const Mat& b, TwoSampleKind kind,
                                     std::optional<double> bandwidth) {
  if (a.rows() != b.rows()) throw std::invalid_argument("two-sample dimension mismatch");
  if (a.cols() < 1 || b.cols() < 1) throw std::invalid_argument("two-sample sets must be nonempty");
  TwoSampleReport rep;
  rep.kind = kind;
  rep.n_a = a.cols();
  rep.n_b = b.cols();
  if (kind == TwoSampleKind::Energy) {
    rep.statistic =
        2.0 * mean_cross_distance(a, b) - mean_cross_distance(a, a) - mean_cross_distance(b, b);
  } else {
    double bw = bandwidth ? *bandwidth : median_pooled_distance(a, b);
    if (!(bw > 0.0)) bw = 1.0;  // degenerate pooled set; any bandwidth gives statistic 0
    rep.bandwidth = bw;
    const double inv = 1.0 / (2.0 * bw * bw);
    rep.statistic = mean_cross_kernel(a, a, inv) + mean_cross_kernel(b, b, inv) -
                    2.0 * mean_cross_kernel(a, b, inv);
  }
  return rep;
}

}  // namespace fmdt
