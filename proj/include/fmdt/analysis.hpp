#pragma once

#include "fmdt/core.hpp"
#include "fmdt/dataset.hpp"
#include "fmdt/rng.hpp"

#include <cstdint>
#include <functional>
#include <optional>
#include <vector>

namespace fmdt {

// 10 log10(data_max^2 / MSE), capped at 99 dB (the cap is reached exactly
// when MSE = 0).
double psnr(const Vec& estimate, const Vec& reference, double data_max);

struct PsnrCurve {
  std::vector<double> t;
  std::vector<double> mean_psnr;
  std::vector<double> diff_psnr;  // vs the baseline; empty without one
};

// Mean denoising PSNR over n_eval (x1, x0) pairs per grid time; x1 cycles
// through ds_test (with replacement once n_eval exceeds it) and x0 is seeded
// noise, so the curve is deterministic. A baseline denoiser sees the same
// pairs and fills diff_psnr = mean(psnr - baseline psnr).
PsnrCurve psnr_curve(const Denoiser& den, const Dataset& ds_test, const std::vector<double>& t_grid,
                     int n_eval, double data_max, std::uint64_t seed,
                     const Denoiser* baseline = nullptr);

// Largest singular value of the velocity Jacobian in x, by power iteration on
// J^T J from a seeded start vector. top_right receives the converged right
// singular vector when requested.
double jacobian_spectral_norm(const DifferentiableVelocity& v, const Vec& x, double t, int iters,
                              std::uint64_t seed, Vec* top_right = nullptr);

// Directional derivatives by central differences with step h_scale*(1+||x||),
// declared symmetric. Falls back to a one-sided difference when one side of
// the stencil leaves the field's domain.
DifferentiableVelocity finite_difference_velocity(VelocityField v, double h_scale = 1e-5);

struct LipschitzProfile {
  std::vector<double> t;
  std::vector<double> mean;
  std::vector<double> stddev;
};

// Spectral norm of `measure` along trajectories of `flow` started from
// draw_x0, summarized per grid time. Trajectories advance by RK4 with
// `substeps` steps between grid nodes.
LipschitzProfile lipschitz_profile(const VelocityField& flow, const DifferentiableVelocity& measure,
                                   const std::function<Vec(Rng&)>& draw_x0, int n_traj,
                                   const std::vector<double>& t_grid, int substeps, int power_iters,
                                   std::uint64_t seed);

// Entry (a,b): mean over the shared sample index of ||x_a - x_b||; symmetric
// with a zero diagonal. Endpoint matrices must be column-aligned (same x0).
Mat pairwise_distance_matrix(const std::vector<Mat>& endpoints);

// Mean nearest-neighbor distance from endpoint columns to the training set.
double distance_to_trainset(const Mat& endpoints, const Dataset& train);

enum class TwoSampleKind { Energy, GaussianMMD };

TwoSampleKind two_sample_kind_from_string(const std::string& s);
std::string to_string(TwoSampleKind k);

struct TwoSampleReport {
  double statistic = 0.0;
  TwoSampleKind kind = TwoSampleKind::Energy;
  Eigen::Index n_a = 0, n_b = 0;
  double bandwidth = 0.0;  // Gaussian MMD only
};

// Plug-in energy distance or squared Gaussian-kernel MMD between the column
// sets. Both vanish on identical sets and are nonnegative up to roundoff. The
// MMD bandwidth defaults to the median pairwise distance of the pooled sets.
TwoSampleReport two_sample_statistic(const Mat& a, const Mat& b, TwoSampleKind kind,
                                     std::optional<double> bandwidth = std::nullopt);

}  // namespace fmdt
