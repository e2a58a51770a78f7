#include "fmdt/restoration.hpp"

#include "fmdt/rng.hpp"

#include <cmath>
#include <stdexcept>

namespace fmdt {

void InverseProblem::validate() const {
  if (mask.size() != observation.size()) {
    throw std::invalid_argument("mask and observation sizes differ");
  }
  bool any_observed = false;
  for (Eigen::Index i = 0; i < mask.size(); ++i) {
    if (mask[i] != 0.0 && mask[i] != 1.0) {
      throw std::invalid_argument("mask entries must be 0 or 1");
    }
    any_observed = any_observed || mask[i] == 1.0;
  }
  if (!any_observed) {
    throw std::invalid_argument("at least one coordinate must be observed");
  }
  if (noise_std < 0.0) {
    throw std::invalid_argument("noise_std must be >= 0");
  }
}

Vec pnp_flow_inpaint(const Denoiser& denoiser, const InverseProblem& prob, double alpha,
                     int n_iters, std::uint64_t seed, std::vector<Vec>* iterates) {
  prob.validate();
  if (!(alpha > 0.0 && alpha <= 1.0)) {
    throw std::invalid_argument("alpha must lie in (0, 1]");
  }
  if (n_iters < 0) {
    throw std::invalid_argument("n_iters must be >= 0");
  }

  const Vec& y = prob.observation;
  const auto d = y.size();
  Rng rng(mix_seed(seed, 11));
  Vec x = prob.mask.cwiseProduct(y);
  const int n = n_iters;
  for (int k = 1; k <= n; ++k) {
    Vec z = x - alpha * prob.mask.cwiseProduct(x - y);
    const double t = static_cast<double>(k) / static_cast<double>(n);
    Vec eps = rng.normal_vec(d);
    Vec noisy = t * z + (1.0 - t) * eps;
    x = denoiser.eval(noisy, t);
    if (iterates != nullptr) iterates->push_back(x);
    if (!x.allFinite()) {
      throw std::runtime_error("inpainting iterate became non-finite");
    }
  }
  if (n > 0 && prob.noise_std == 0.0) {
    // Exact measurements are enforced verbatim on the way out, so the masked
    // residual ends no larger than the initialization's (both are zero).
    x = prob.mask.cwiseProduct(y) + (1.0 - prob.mask.array()).matrix().cwiseProduct(x);
    if (iterates != nullptr && !iterates->empty()) iterates->back() = x;
  }
  return x;
}

}  // namespace fmdt
