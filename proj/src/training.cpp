#include "fmdt/training.hpp"

#include "fmdt/analysis.hpp"
#include "fmdt/rng.hpp"

#include <cmath>

namespace fmdt {

namespace {

void check_batch(const TrainBatch& b) {
  if (b.x1.cols() != b.t.size() || b.x0.cols() != b.t.size())
    throw std::invalid_argument("batch columns and times must align");
  if (b.x1.rows() != b.x0.rows()) throw std::invalid_argument("batch dimension mismatch");
  if (b.size() < 1) throw std::invalid_argument("empty batch");
}

Mat corrupt_batch(const TrainBatch& b) {
  Mat xt(b.x1.rows(), b.x1.cols());
  for (Eigen::Index j = 0; j < b.size(); ++j) {
    check_time(b.t[j]);
    xt.col(j) = (1.0 - b.t[j]) * b.x0.col(j) + b.t[j] * b.x1.col(j);
  }
  return xt;
}

}  // namespace

double weighted_loss(const ParametrizedDenoiser& pd, const WeightingScheme& ws,
                     const TrainBatch& batch) {
  check_batch(batch);
  Mat xt = corrupt_batch(batch);
  Mat d = pd.denoise_batch(xt, batch.t);
  double acc = 0.0;
  for (Eigen::Index j = 0; j < batch.size(); ++j) {
    double c = ws.weight(batch.t[j]) * (d.col(j) - batch.x1.col(j)).squaredNorm();
    if (!std::isfinite(c))
      throw std::runtime_error("non-finite loss contribution at batch index " + std::to_string(j));
    acc += c;
  }
  return acc / static_cast<double>(batch.size());
}

double weighted_loss(const Denoiser& den, const WeightingScheme& ws, const TrainBatch& batch) {
  check_batch(batch);
  Mat xt = corrupt_batch(batch);
  double acc = 0.0;
  for (Eigen::Index j = 0; j < batch.size(); ++j) {
    double c =
        ws.weight(batch.t[j]) * (den.eval(xt.col(j), batch.t[j]) - batch.x1.col(j)).squaredNorm();
    if (!std::isfinite(c))
      throw std::runtime_error("non-finite loss contribution at batch index " + std::to_string(j));
    acc += c;
  }
  return acc / static_cast<double>(batch.size());
}

double weighted_loss_grad(const ParametrizedDenoiser& pd, const WeightingScheme& ws,
                          const TrainBatch& batch, Vec& grad) {
  check_batch(batch);
  const Eigen::Index B = batch.size();
  Mat xt = corrupt_batch(batch);
  NetModel::ForwardCache cache;
  Mat n = pd.net.forward_batch(xt, batch.t, cache);
  Mat g(n.rows(), n.cols());
  double acc = 0.0;
  for (Eigen::Index j = 0; j < B; ++j) {
    const double w = ws.weight(batch.t[j]);
    Vec resid = (pd.cls == ParamClass::IplusNN)
                    ? Vec(xt.col(j) + (1.0 - batch.t[j]) * n.col(j) - batch.x1.col(j))
                    : Vec(n.col(j) - batch.x1.col(j));
    double c = w * resid.squaredNorm();
    if (!std::isfinite(c))
      throw std::runtime_error("non-finite loss contribution at batch index " + std::to_string(j));
    acc += c;
    const double chain = (pd.cls == ParamClass::IplusNN) ? (1.0 - batch.t[j]) : 1.0;
    g.col(j) = (2.0 * w * chain / static_cast<double>(B)) * resid;
  }
  pd.net.backward_batch(cache, g, grad);
  return acc / static_cast<double>(B);
}

Adam::Adam(Eigen::Index n, const AdamConfig& cfg) : cfg_(cfg), m_(Vec::Zero(n)), v_(Vec::Zero(n)) {
  if (!(cfg.learning_rate > 0.0)) throw std::invalid_argument("learning rate must be positive");
  if (!(cfg.beta1 >= 0.0 && cfg.beta1 < 1.0 && cfg.beta2 >= 0.0 && cfg.beta2 < 1.0))
    throw std::invalid_argument("adam betas must lie in [0,1)");
}

void Adam::step(Vec& weights, const Vec& grad) {
  if (weights.size() != m_.size() || grad.size() != m_.size())
    throw std::invalid_argument("adam buffer size mismatch");
  ++t_;
  m_ = cfg_.beta1 * m_ + (1.0 - cfg_.beta1) * grad;
  v_ = cfg_.beta2 * v_ + (1.0 - cfg_.beta2) * grad.cwiseProduct(grad);
  const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  weights -= (cfg_.learning_rate / bc1) *
             (m_.array() / ((v_.array() / bc2).sqrt() + cfg_.eps)).matrix();
}

Ema::Ema(Vec init, double decay) : shadow_(std::move(init)), decay_(decay) {
  if (!(decay >= 0.0 && decay < 1.0)) throw std::invalid_argument("ema decay must lie in [0,1)");
}

void Ema::update(const Vec& w) {
  if (w.size() != shadow_.size()) throw std::invalid_argument("ema size mismatch");
  shadow_ = decay_ * shadow_ + (1.0 - decay_) * w;
}

namespace {

void check_reg(const RegSpec& spec) {
  if (!(spec.t_min <= spec.t_max) || spec.t_min < 0.0 || spec.t_max > 1.0)
    throw std::invalid_argument("regularizer window must be a subinterval of [0,1]");
  if (!(spec.lambda >= 0.0)) throw std::invalid_argument("regularizer lambda must be >= 0");
  if (!(spec.floor_m >= 0.0)) throw std::invalid_argument("regularizer floor must be >= 0");
  if (spec.power_iters < 1) throw std::invalid_argument("power_iters must be >= 1");
}

}  // namespace

double spectral_norm_penalty(const ParametrizedDenoiser& pd, const Vec& x_t, double t,
                             const RegSpec& spec, std::uint64_t seed) {
  check_reg(spec);
  if (t < spec.t_min || t > spec.t_max) return 0.0;
  double sigma = jacobian_spectral_norm(pd.as_velocity_diff(), x_t, t, spec.power_iters, seed);
  return spec.lambda * std::max(sigma, spec.floor_m);
}

double spectral_norm_penalty_grad(const ParametrizedDenoiser& pd, const Vec& x_t, double t,
                                  const RegSpec& spec, std::uint64_t seed, Vec& grad) {
  check_reg(spec);
  if (t < spec.t_min || t > spec.t_max) return 0.0;
  Vec u;
  double sigma = jacobian_spectral_norm(pd.as_velocity_diff(), x_t, t, spec.power_iters, seed, &u);
  if (sigma <= spec.floor_m || sigma == 0.0) return spec.lambda * std::max(sigma, spec.floor_m);
  // sigma = w* . J_v u with the converged pair (u, w*) held fixed
  Vec z = pd.velocity_jvp(x_t, t, u);
  double nz = z.norm();
  if (nz == 0.0) return spec.lambda * spec.floor_m;
  Vec w = z / nz;
  Vec tmp = Vec::Zero(grad.size());
  pd.net.jvp_scalar_weight_grad(x_t, t, u, w, tmp);
  const double scale =
      (pd.cls == ParamClass::IplusNN) ? spec.lambda : spec.lambda / (1.0 - t);
  grad += scale * tmp;
  return spec.lambda * sigma;
}

TrainResult train(const Dataset& ds, ParametrizedDenoiser init, const WeightingScheme& ws,
                  const TrainConfig& cfg) {
  if (cfg.epochs < 0) throw std::invalid_argument("epochs must be >= 0");
  if (cfg.batch_size < 1) throw std::invalid_argument("batch size must be >= 1");
  if (!(cfg.finetune_fraction >= 0.0 && cfg.finetune_fraction <= 1.0))
    throw std::invalid_argument("finetune_fraction must lie in [0,1]");
  if (init.net.data_dim() != ds.dim())
    throw std::invalid_argument("model dimension does not match dataset");
  if (cfg.regularizer) check_reg(*cfg.regularizer);
  Interval tdom = intersect(cfg.t_sampling, ws.support());
  if (!(tdom.lo <= tdom.hi))
    throw std::invalid_argument("time sampling window does not meet the weighting support");

  const Eigen::Index d = ds.dim();
  const Eigen::Index n = ds.size();
  const long batches_per_epoch = (n + cfg.batch_size - 1) / cfg.batch_size;
  const int reg_from_epoch =
      cfg.regularizer
          ? cfg.epochs - static_cast<int>(std::ceil(cfg.finetune_fraction * cfg.epochs))
          : cfg.epochs;

  Rng r_idx(mix_seed(cfg.seed, 1));
  Rng r_noise(mix_seed(cfg.seed, 2));
  Rng r_time(mix_seed(cfg.seed, 3));
  const std::uint64_t reg_root = mix_seed(cfg.seed, 4);

  TrainResult out{std::move(init), Vec(), {}, false, 0};
  Adam adam(out.model.net.n_weights(), cfg.adam);
  Ema ema(out.model.net.weights(), cfg.ema_decay);
  Vec grad = Vec::Zero(out.model.net.n_weights());
  Vec prev_w = out.model.net.weights();
  Vec prev_ema = ema.shadow();

  TrainBatch batch;
  batch.x1.resize(d, cfg.batch_size);
  batch.x0.resize(d, cfg.batch_size);
  batch.t.resize(cfg.batch_size);

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const bool reg_active = cfg.regularizer && epoch >= reg_from_epoch;
    double epoch_acc = 0.0;
    for (long b = 0; b < batches_per_epoch; ++b) {
      for (int j = 0; j < cfg.batch_size; ++j) {
        batch.x1.col(j) = ds.points().col(static_cast<Eigen::Index>(r_idx.uniform_int(n)));
        batch.x0.col(j) = r_noise.normal_vec(d);
        batch.t[j] = r_time.uniform(tdom.lo, tdom.hi);
      }
      prev_w = out.model.net.weights();
      prev_ema = ema.shadow();
      double step_loss;
      try {
        grad.setZero();
        step_loss = weighted_loss_grad(out.model, ws, batch, grad);
        if (reg_active) {
          Mat xt = corrupt_batch(batch);
          Vec reg_grad = Vec::Zero(grad.size());
          for (int j = 0; j < cfg.batch_size; ++j) {
            std::uint64_t s = mix_seed(reg_root, static_cast<std::uint64_t>(out.steps_completed) *
                                                     cfg.batch_size + j);
            spectral_norm_penalty_grad(out.model, xt.col(j), batch.t[j], *cfg.regularizer, s,
                                       reg_grad);
          }
          grad += reg_grad / static_cast<double>(cfg.batch_size);
        }
        if (!grad.allFinite()) throw std::runtime_error("non-finite gradient");
      } catch (const std::runtime_error&) {
        out.model.net.set_weights(prev_w);
        out.ema_weights = prev_ema;
        out.diverged = true;
        return out;
      }
      Vec w = out.model.net.weights();
      adam.step(w, grad);
      if (!w.allFinite()) {
        out.ema_weights = ema.shadow();
        out.diverged = true;
        return out;
      }
      out.model.net.set_weights(std::move(w));
      ema.update(out.model.net.weights());
      ++out.steps_completed;
      epoch_acc += step_loss;
    }
    out.epoch_loss.push_back(epoch_acc / static_cast<double>(batches_per_epoch));
  }
  out.ema_weights = ema.shadow();
  return out;
}

int EnsembleDenoiser::expert_index(double t) {
  check_time(t);
  int i = static_cast<int>(std::floor(10.0 * t));
  return i > 9 ? 9 : i;
}

Vec EnsembleDenoiser::denoise(const Vec& x, double t) const {
  if (experts.size() != 10) throw std::logic_error("ensemble must hold 10 experts");
  return experts[static_cast<std::size_t>(expert_index(t))].denoise(x, t);
}

Denoiser EnsembleDenoiser::as_denoiser() const {
  auto self = std::make_shared<EnsembleDenoiser>(*this);
  return Denoiser{[self](const Vec& x, double t) { return self->denoise(x, t); }};
}

EnsembleDenoiser train_ensemble_10(const Dataset& ds, const ParametrizedDenoiser& proto,
                                   const WeightingScheme& ws, const TrainConfig& cfg,
                                   std::vector<TrainResult>* results) {
  EnsembleDenoiser ens;
  if (results) results->clear();
  for (int i = 0; i < 10; ++i) {
    TrainConfig ci = cfg;
    ci.seed = mix_seed(cfg.seed, 100 + static_cast<std::uint64_t>(i));
    ci.t_sampling = intersect(cfg.t_sampling, Interval{i / 10.0, (i + 1) / 10.0});
    ParametrizedDenoiser expert = proto;
    expert.net.init_weights(mix_seed(cfg.seed, 200 + static_cast<std::uint64_t>(i)));
    TrainResult r = train(ds, std::move(expert), ws, ci);
    ens.experts.push_back(r.model);
    if (results) results->push_back(std::move(r));
  }
  return ens;
}

}  // namespace fmdt
