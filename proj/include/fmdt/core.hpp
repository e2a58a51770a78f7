#pragma once

#include <Eigen/Dense>

#include <functional>
#include <stdexcept>
#include <utility>

namespace fmdt {

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;

// Interpolation time t in [0,1]: t=0 is pure noise, t=1 is clean data.
inline void check_time(double t) {
  if (!(t >= 0.0 && t <= 1.0))
    throw std::invalid_argument("time must lie in [0,1]");
}

// Classical noise level sigma in [0, inf).
inline void check_sigma(double sigma) {
  if (!(sigma >= 0.0))
    throw std::invalid_argument("noise level must be >= 0");
}

// t = 1/(1+sigma); sigma=0 maps to t=1 (clean), sigma->inf to t->0.
inline double sigma_to_t(double sigma) {
  check_sigma(sigma);
  return 1.0 / (1.0 + sigma);
}

// Inverse of sigma_to_t; t=0 corresponds to sigma=inf and is rejected.
// The reciprocal form avoids the rounded numerator 1-t for small t, where it
// would cost two ulps (e.g. t=0.05 must land exactly on 19); the subtraction
// form keeps full relative accuracy for sigma near 0, where 1-t is exact.
inline double t_to_sigma(double t) {
  check_time(t);
  if (t == 0.0)
    throw std::invalid_argument("t=0 has no finite noise level");
  return t <= 0.5 ? 1.0 / t - 1.0 : (1.0 - t) / t;
}

template <typename D0, typename D1>
Vec interpolate(const Eigen::MatrixBase<D0>& x0, const Eigen::MatrixBase<D1>& x1, double t) {
  check_time(t);
  if (x0.size() != x1.size())
    throw std::invalid_argument("interpolate: dimension mismatch");
  return (1.0 - t) * x0 + t * x1;
}

// Corruption in interpolation form: x_t = t*x1 + (1-t)*x0.
template <typename D1, typename D0>
Vec corrupt(const Eigen::MatrixBase<D1>& x1, const Eigen::MatrixBase<D0>& x0, double t) {
  return interpolate(x0, x1, t);
}

// Corruption in classical additive form: x_sigma = x1 + sigma*x0.
// Scaling identity: corrupt(x1,x0,1/(1+sigma)) * (1+sigma) == corrupt_classical(x1,x0,sigma).
template <typename D1, typename D0>
Vec corrupt_classical(const Eigen::MatrixBase<D1>& x1, const Eigen::MatrixBase<D0>& x0,
                      double sigma) {
  check_sigma(sigma);
  if (x0.size() != x1.size())
    throw std::invalid_argument("corrupt_classical: dimension mismatch");
  return x1 + sigma * x0;
}

// Time-indexed maps R^d x [0,1] -> R^d. A denoiser predicts clean data from a
// corrupted state; a velocity field drives the generative ODE dx/dt = v(x,t).
struct Denoiser {
  std::function<Vec(const Vec&, double)> eval;
};

struct VelocityField {
  std::function<Vec(const Vec&, double)> eval;
};

// D_t(x) = x + (1-t) v(x,t); at t=1 the denoiser is the identity and the
// underlying velocity is never evaluated there.
inline Denoiser denoiser_from_velocity(VelocityField v) {
  return Denoiser{[v = std::move(v)](const Vec& x, double t) -> Vec {
    check_time(t);
    if (t == 1.0) return x;
    return x + (1.0 - t) * v.eval(x, t);
  }};
}

// v(x,t) = (D_t(x) - x) / (1-t), defined for t < 1 only.
inline VelocityField velocity_from_denoiser(Denoiser den) {
  return VelocityField{[den = std::move(den)](const Vec& x, double t) -> Vec {
    check_time(t);
    if (t == 1.0)
      throw std::invalid_argument("velocity is undefined at t=1");
    return (den.eval(x, t) - x) / (1.0 - t);
  }};
}

// Velocity field with directional-derivative access. jvp(x,t,u) = J(x,t)*u with
// J the Jacobian in x; vjp(x,t,w) = J(x,t)^T*w. A null vjp declares J symmetric
// and jvp is reused in its place.
struct DifferentiableVelocity {
  std::function<Vec(const Vec&, double)> eval;
  std::function<Vec(const Vec&, double, const Vec&)> jvp;
  std::function<Vec(const Vec&, double, const Vec&)> vjp;
};

}  // namespace fmdt
