#include "fmdt/closedform.hpp"

#include <cmath>
#include <limits>

namespace fmdt {

namespace {

void check_state(const Dataset& ds, const Vec& x) {
  if (x.size() != ds.dim())
    throw std::invalid_argument("state dimension does not match dataset");
}

Eigen::Index nearest_point(const Dataset& ds, const Vec& x) {
  Eigen::Index best = 0;
  double best_d2 = std::numeric_limits<double>::infinity();
  for (Eigen::Index i = 0; i < ds.size(); ++i) {
    double d2 = (x - ds.points().col(i)).squaredNorm();
    if (d2 < best_d2) {
      best_d2 = d2;
      best = i;
    }
  }
  return best;
}

}  // namespace

Vec posterior_weights(const Dataset& ds, const Vec& x, double t) {
  check_time(t);
  check_state(ds, x);
  if (t == 1.0) throw std::invalid_argument("posterior weights are undefined at t=1");
  const double inv_two_var = 1.0 / (2.0 * (1.0 - t) * (1.0 - t));
  Vec logits(ds.size());
  for (Eigen::Index i = 0; i < ds.size(); ++i)
    logits[i] = -(x - t * ds.points().col(i)).squaredNorm() * inv_two_var;
  const double m = logits.maxCoeff();
  Vec w = (logits.array() - m).exp();  // exp underflows to exactly 0 far from the max
  return w / w.sum();
}

Vec gaussian_closed_form_velocity(const Dataset& ds, const Vec& x, double t) {
  Vec lambda = posterior_weights(ds, x, t);
  Vec num = Vec::Zero(ds.dim());
  for (Eigen::Index i = 0; i < ds.size(); ++i)
    num += lambda[i] * (ds.points().col(i) - x);
  return num / (1.0 - t);
}

Vec gaussian_mmse_denoiser(const Dataset& ds, const Vec& x, double t) {
  check_time(t);
  check_state(ds, x);
  if (t == 1.0) return ds.points().col(nearest_point(ds, x));
  Vec lambda = posterior_weights(ds, x, t);
  return ds.points() * lambda;
}

bool cone_membership(const Dataset& ds, Eigen::Index i, const Vec& x, double t) {
  check_time(t);
  check_state(ds, x);
  if (i < 0 || i >= ds.size()) throw std::invalid_argument("cone index out of range");
  if (t == 1.0) throw std::invalid_argument("cones degenerate at t=1");
  Vec back = (x - t * ds.points().col(i)) / (1.0 - t);
  return (back.array() >= -1.0).all() && (back.array() <= 1.0).all();
}

std::vector<Eigen::Index> active_cones(const Dataset& ds, const Vec& x, double t) {
  std::vector<Eigen::Index> act;
  for (Eigen::Index i = 0; i < ds.size(); ++i)
    if (cone_membership(ds, i, x, t)) act.push_back(i);
  return act;
}

Vec uniform_cone_velocity(const Dataset& ds, const Vec& x, double t) {
  check_time(t);
  if (t == 1.0) throw std::invalid_argument("cone velocity is undefined at t=1");
  auto act = active_cones(ds, x, t);
  if (act.empty()) throw std::domain_error("state outside support of every cone");
  Vec mean = Vec::Zero(ds.dim());
  for (Eigen::Index i : act) mean += ds.points().col(i);
  mean /= static_cast<double>(act.size());
  return (mean - x) / (1.0 - t);
}

Vec gaussian_velocity_jvp(const Dataset& ds, const Vec& x, double t, const Vec& u) {
  if (u.size() != ds.dim()) throw std::invalid_argument("direction dimension mismatch");
  Vec lambda = posterior_weights(ds, x, t);
  Vec mean = ds.points() * lambda;
  // Cov * u = sum_i lambda_i x_i (x_i . u) - mean (mean . u)
  Vec cov_u = Vec::Zero(ds.dim());
  for (Eigen::Index i = 0; i < ds.size(); ++i)
    cov_u += lambda[i] * ds.points().col(i) * ds.points().col(i).dot(u);
  cov_u -= mean * mean.dot(u);
  const double om = 1.0 - t;
  return (t / (om * om * om)) * cov_u - u / om;
}

VelocityField make_gaussian_velocity(Dataset ds) {
  return VelocityField{[ds = std::move(ds)](const Vec& x, double t) {
    return gaussian_closed_form_velocity(ds, x, t);
  }};
}

Denoiser make_mmse_denoiser(Dataset ds) {
  return Denoiser{[ds = std::move(ds)](const Vec& x, double t) {
    return gaussian_mmse_denoiser(ds, x, t);
  }};
}

DifferentiableVelocity make_gaussian_velocity_diff(Dataset ds) {
  auto shared = std::make_shared<Dataset>(std::move(ds));
  DifferentiableVelocity v;
  v.eval = [shared](const Vec& x, double t) {
    return gaussian_closed_form_velocity(*shared, x, t);
  };
  v.jvp = [shared](const Vec& x, double t, const Vec& u) {
    return gaussian_velocity_jvp(*shared, x, t, u);
  };
  v.vjp = nullptr;  // symmetric Jacobian
  return v;
}

VelocityField make_cone_velocity(Dataset ds) {
  return VelocityField{[ds = std::move(ds)](const Vec& x, double t) {
    return uniform_cone_velocity(ds, x, t);
  }};
}

VelocityField make_cone_velocity_projected(Dataset ds) {
  return VelocityField{[ds = std::move(ds)](const Vec& x, double t) {
    if (t >= 1.0 || !active_cones(ds, x, t).empty()) return uniform_cone_velocity(ds, x, t);
    // Clamp the back-projection of the nearest cone into [-1,1]^d and average
    // over cones active there. Membership is re-tested with slack because the
    // projected state sits exactly on a face only up to roundoff.
    Eigen::Index best = 0;
    double best_excess = std::numeric_limits<double>::infinity();
    Vec best_back;
    for (Eigen::Index i = 0; i < ds.size(); ++i) {
      Vec back = (x - t * ds.points().col(i)) / (1.0 - t);
      double excess = (back.array().abs() - 1.0).max(0.0).matrix().norm();
      if (excess < best_excess) {
        best_excess = excess;
        best = i;
        best_back = back;
      }
    }
    Vec clamped = best_back.array().min(1.0).max(-1.0);
    Vec proj = t * ds.points().col(best) + (1.0 - t) * clamped;
    Vec mean = Vec::Zero(ds.dim());
    Eigen::Index n_active = 0;
    for (Eigen::Index i = 0; i < ds.size(); ++i) {
      Vec back = (proj - t * ds.points().col(i)) / (1.0 - t);
      if ((back.array().abs() <= 1.0 + 1e-9).all()) {
        mean += ds.points().col(i);
        ++n_active;
      }
    }
    if (n_active == 0) {
      mean = ds.points().col(best);
      n_active = 1;
    }
    return Vec(((mean / double(n_active)) - proj) / (1.0 - t));
  }};
}

}  // namespace fmdt
