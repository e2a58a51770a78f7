#pragma once

#include "fmdt/core.hpp"
#include "fmdt/dataset.hpp"
#include "fmdt/weighting.hpp"

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace fmdt {

enum class Scheme { Euler, Heun, RK4, AdaptiveRK45 };

Scheme scheme_from_string(const std::string& s);
std::string to_string(Scheme s);

// Integration always stops at t_end <= 1 - 1e-3; the interval singularity at
// t=1 is crossed by a single denoiser jump x <- x + (1-t_end) v(x, t_end)
// recorded at time 1.
struct IntegratorSpec {
  Scheme scheme = Scheme::Euler;
  int steps = 100;  // fixed-step schemes
  double rtol = 1e-6, atol = 1e-8;
  double t_end = 0.999;
  bool terminal_jump = true;
};

struct TrajectoryRecord {
  std::vector<double> times;
  std::vector<Vec> states;
  std::vector<double> speed;    // ||v|| at each accepted step start
  std::vector<char> perturbed;  // per recorded state: inside the perturbation window
  bool aborted = false;

  const Vec& endpoint() const { return states.back(); }
};

TrajectoryRecord sample(const VelocityField& v, const Vec& x0, const IntegratorSpec& spec,
                        const Interval* perturb_window = nullptr);

// States at the requested grid times (ascending, within [0, 1-1e-3]),
// integrating from t=0 with `substeps` RK4 steps between consecutive nodes.
std::vector<Vec> states_on_grid(const VelocityField& v, const Vec& x0,
                                const std::vector<double>& t_grid, int substeps);

// Endpoints for several models from one shared x0 ~ N(0,I_d) batch; column s
// of every matrix starts from the same draw.
std::vector<Mat> paired_sample(const std::vector<VelocityField>& models, Eigen::Index d,
                               int n_samples, const IntegratorSpec& spec, std::uint64_t seed);

enum class DirectionKind { Checkerboard, PosShift, NegShift, Residual };

DirectionKind direction_from_string(const std::string& s);
std::string to_string(DirectionKind k);

// Static displacement for the additive direction kinds. Checkerboard tiles
// +-1 in patch_size squares, +1 at the top-left corner, shared across
// channels, truncated at the image boundary; it requires an image shape.
Vec make_direction(DirectionKind kind, Eigen::Index d, const std::optional<ImageShape>& shape,
                   int patch_size);

// Perturbation D~ = D + sigma(t) * delta on the closed window, where delta is
// the static direction, or D~ = D + sigma(t) (x - D) for Residual. The level
// is an explicit (t, sigma) node table, linearly interpolated inside the
// window, or a PSNR-ratio target that must be calibrated first.
struct PerturbationSpec {
  DirectionKind kind = DirectionKind::PosShift;
  int patch_size = 1;
  Interval window{0.0, 0.3};
  std::optional<std::vector<std::pair<double, double>>> sigma_nodes;
  std::optional<double> psnr_ratio;
};

double sigma_at(const PerturbationSpec& spec, double t);

Denoiser perturb_denoiser(Denoiser base, const PerturbationSpec& spec, Eigen::Index d,
                          const std::optional<ImageShape>& shape);

struct CalibrationResult {
  std::vector<double> t_nodes;
  std::vector<double> sigma;
  std::vector<double> base_psnr;
  std::vector<double> achieved_psnr;
};

// Solves sigma(t) at n_nodes equispaced window times so that the perturbed
// denoiser's PSNR equals psnr_ratio times the baseline's, by bisection on a
// bracket grown by doubling (at most 60 doublings). PSNR decreasing in sigma
// is checked along the way. Fills spec.sigma_nodes.
CalibrationResult calibrate_level(const Denoiser& base, PerturbationSpec& spec,
                                  const Dataset& ds_test, int n_nodes, int n_eval, double data_max,
                                  std::uint64_t seed, double tol_db = 1e-3);

}  // namespace fmdt
