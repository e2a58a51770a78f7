#pragma once

#include "fmdt/dataset.hpp"
#include "fmdt/net.hpp"
#include "fmdt/weighting.hpp"

#include <cstdint>
#include <optional>
#include <vector>

namespace fmdt {

// One training minibatch; column j holds the pair (x1_j, x0_j) and its time.
struct TrainBatch {
  Mat x1, x0;
  Vec t;
  Eigen::Index size() const { return t.size(); }
};

// (1/B) sum_j w(t_j) ||D(x_t_j, t_j) - x1_j||^2 with x_t = t x1 + (1-t) x0.
double weighted_loss(const ParametrizedDenoiser& pd, const WeightingScheme& ws,
                     const TrainBatch& batch);
double weighted_loss(const Denoiser& den, const WeightingScheme& ws, const TrainBatch& batch);

// Same value; accumulates the weight gradient into grad (caller zeroes).
double weighted_loss_grad(const ParametrizedDenoiser& pd, const WeightingScheme& ws,
                          const TrainBatch& batch, Vec& grad);

struct AdamConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
};

class Adam {
 public:
  Adam(Eigen::Index n, const AdamConfig& cfg);
  void step(Vec& weights, const Vec& grad);

 private:
  AdamConfig cfg_;
  Vec m_, v_;
  long t_ = 0;
};

// Exponential moving average of the weight vector, updated once per
// optimizer step: shadow <- decay*shadow + (1-decay)*w.
class Ema {
 public:
  Ema(Vec init, double decay);
  void update(const Vec& w);
  const Vec& shadow() const { return shadow_; }

 private:
  Vec shadow_;
  double decay_;
};

// Spectral-norm penalty lambda * max(||grad_x v(x_t)||_2, floor_m) applied on
// the time window; the norm comes from a power method whose converged singular
// vectors are treated as constants when differentiating in the weights.
struct RegSpec {
  double t_min = 0.0, t_max = 1.0;
  double lambda = 0.1;
  double floor_m = 2.0;
  int power_iters = 10;
};

double spectral_norm_penalty(const ParametrizedDenoiser& pd, const Vec& x_t, double t,
                             const RegSpec& spec, std::uint64_t seed);
// returns the penalty value and accumulates lambda * d sigma / d theta into
// grad (zero contribution whenever the max clamps at floor_m)
double spectral_norm_penalty_grad(const ParametrizedDenoiser& pd, const Vec& x_t, double t,
                                  const RegSpec& spec, std::uint64_t seed, Vec& grad);

struct TrainConfig {
  int epochs = 100;
  int batch_size = 128;
  AdamConfig adam;
  double ema_decay = 0.999;
  std::uint64_t seed = 0;
  Interval t_sampling{0.0, 0.999};
  std::optional<RegSpec> regularizer;
  // regularizer is active only in the last finetune_fraction of epochs
  double finetune_fraction = 1.0;
};

struct TrainResult {
  ParametrizedDenoiser model;
  Vec ema_weights;
  std::vector<double> epoch_loss;
  bool diverged = false;
  long steps_completed = 0;
};

// Minibatches draw x1 uniformly from ds with replacement, x0 ~ N(0,I) and
// t ~ U(t_sampling intersect ws support); everything is derived from cfg.seed,
// so identical configs give bitwise-identical weights. A non-finite loss
// aborts the run and returns the last finished step's weights.
TrainResult train(const Dataset& ds, ParametrizedDenoiser init, const WeightingScheme& ws,
                  const TrainConfig& cfg);

// Ten independent copies of the prototype, the i-th trained with t restricted
// to [i/10,(i+1)/10); evaluation dispatches on floor(10t) with t=1 mapped to
// the last expert.
struct EnsembleDenoiser {
  std::vector<ParametrizedDenoiser> experts;

  static int expert_index(double t);
  Vec denoise(const Vec& x, double t) const;
  Denoiser as_denoiser() const;
};

EnsembleDenoiser train_ensemble_10(const Dataset& ds, const ParametrizedDenoiser& proto,
                                   const WeightingScheme& ws, const TrainConfig& cfg,
                                   std::vector<TrainResult>* results = nullptr);

}  // namespace fmdt
