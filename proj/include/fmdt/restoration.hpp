#pragma once

#include "fmdt/core.hpp"

#include <cstdint>
#include <vector>

namespace fmdt {

// Masked observation of a single sample. `mask` holds 1 on observed
// coordinates and 0 on missing ones; entries of `observation` under mask 0
// are ignored. At least one coordinate must be observed.
struct InverseProblem {
  Vec observation;
  Vec mask;
  double noise_std = 0.0;

  void validate() const;
};

// Plug-and-play inpainting driven by a denoiser. Starting from the
// observation (zeros on missing coordinates), iteration k of n takes a
// gradient step of size alpha on 0.5*||mask.*(x - y)||^2, re-noises to time
// t_k = k/n by interpolation with fresh Gaussian noise, and denoises at t_k;
// the schedule ends exactly at t = 1. n_iters = 0 returns the initialization.
//
// When noise_std is zero the observed coordinates of the result are replaced
// by the observation itself, so exact measurements are reproduced exactly.
//
// If `iterates` is non-null every post-denoise estimate is appended to it in
// order. A non-finite iterate aborts with an exception; the trace collected
// so far, ending in the offending iterate, stays in `iterates`.
Vec pnp_flow_inpaint(const Denoiser& denoiser, const InverseProblem& prob, double alpha,
                     int n_iters, std::uint64_t seed, std::vector<Vec>* iterates = nullptr);

}  // namespace fmdt
