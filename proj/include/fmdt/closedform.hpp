#pragma once

#include "fmdt/core.hpp"
#include "fmdt/dataset.hpp"

namespace fmdt {

// Posterior weights lambda_i(x,t) of the dataset points given the corrupted
// state x at time t under a standard-normal noise base: softmax over i of
//   -||x - t*x_i||^2 / (2(1-t)^2).
// Computed with max-subtracted exponentials; weights whose shifted exponent
// underflows are exactly zero. Requires t < 1.
Vec posterior_weights(const Dataset& ds, const Vec& x, double t);

// Conditional-mean velocity of the interpolation path:
//   v(x,t) = sum_i lambda_i(x,t) (x_i - x) / (1-t),  t < 1.
Vec gaussian_closed_form_velocity(const Dataset& ds, const Vec& x, double t);

// Posterior mean of the clean point: sum_i lambda_i(x,t) x_i. At t=1 the
// softmax limit selects the nearest dataset point (lowest index on ties).
Vec gaussian_mmse_denoiser(const Dataset& ds, const Vec& x, double t);

// Uniform-base support cone of point i at time t: x is a member iff
// (x - t*x_i)/(1-t) lies in the closed cube [-1,1]^d. Requires t < 1.
bool cone_membership(const Dataset& ds, Eigen::Index i, const Vec& x, double t);

// Indices of all cones containing x at time t.
std::vector<Eigen::Index> active_cones(const Dataset& ds, const Vec& x, double t);

// Velocity of the uniform-base flow: (mean of active-cone points - x)/(1-t).
// Errors when x lies outside every cone.
Vec uniform_cone_velocity(const Dataset& ds, const Vec& x, double t);

// Jacobian-vector product of the gaussian closed-form velocity. The Jacobian
//   J = t/(1-t)^3 * Cov_lambda(x_i)  -  I/(1-t)
// is symmetric, with Cov_lambda the posterior covariance of the dataset points.
Vec gaussian_velocity_jvp(const Dataset& ds, const Vec& x, double t, const Vec& u);

// Field bundles for generic consumers. The gaussian field carries its analytic
// jvp (symmetric, so no separate vjp).
VelocityField make_gaussian_velocity(Dataset ds);
Denoiser make_mmse_denoiser(Dataset ds);
DifferentiableVelocity make_gaussian_velocity_diff(Dataset ds);
VelocityField make_cone_velocity(Dataset ds);

// Integration-safe variant of the cone field: a state that has drifted outside
// every cone (possible only through discretization error at the support
// boundary) is projected back onto the nearest cone before evaluation.
VelocityField make_cone_velocity_projected(Dataset ds);

}  // namespace fmdt
