#pragma once

#include "fmdt/core.hpp"

#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <vector>

namespace fmdt {

enum class Activation { Tanh, Gelu };

Activation activation_from_string(const std::string& s);
std::string to_string(Activation a);

// Input feature map for the scalar time: [t, sin(2 pi f_k t), cos(2 pi f_k t)].
struct TimeEmbedding {
  std::vector<double> frequencies;
  bool include_raw_t = true;

  Eigen::Index width() const {
    return (include_raw_t ? 1 : 0) + 2 * static_cast<Eigen::Index>(frequencies.size());
  }
  void write(double t, double* out) const;
  Vec operator()(double t) const;

  // eight octaves 1,2,4,...,128 plus the raw t
  static TimeEmbedding standard();
};

// Fully connected net with a fixed topology and a flat weight vector. Layer l
// stores W_l (fan_out x fan_in, column-major) followed by b_l. Hidden layers
// apply the activation; the output layer is affine.
class NetModel {
 public:
  NetModel(std::vector<Eigen::Index> layer_dims, Activation act, TimeEmbedding embed);

  // layer_dims = [d + embed.width(), hidden..., d]
  static NetModel make(Eigen::Index d, const std::vector<Eigen::Index>& hidden, Activation act,
                       TimeEmbedding embed);

  const std::vector<Eigen::Index>& layer_dims() const { return dims_; }
  Activation activation() const { return act_; }
  const TimeEmbedding& time_embedding() const { return embed_; }
  Eigen::Index data_dim() const { return dims_.back(); }
  Eigen::Index n_weights() const { return weights_.size(); }
  const Vec& weights() const { return weights_; }
  void set_weights(Vec w);

  // Glorot-uniform W, zero biases, fully determined by the seed.
  void init_weights(std::uint64_t seed);

  Eigen::Map<const Mat> layer_w(std::size_t l) const;
  Eigen::Map<const Vec> layer_b(std::size_t l) const;

  Vec forward(const Vec& x, double t) const;

  // X holds one sample per column; ts holds the matching times.
  Mat forward_batch(const Mat& X, const Vec& ts) const;

  struct ForwardCache {
    std::vector<Mat> z;  // layer inputs, z[0] = embedded input
    std::vector<Mat> p;  // pre-activations
  };
  Mat forward_batch(const Mat& X, const Vec& ts, ForwardCache& cache) const;

  // Accumulates d(sum_j L_j)/dtheta into grad given output cotangents G
  // (same shape as the forward output, one column per sample).
  void backward_batch(const ForwardCache& cache, const Mat& G, Vec& grad) const;

  // J_N(x,t) u and J_N(x,t)^T w, Jacobian taken in x with t held fixed.
  Vec input_jvp(const Vec& x, double t, const Vec& u) const;
  Vec input_vjp(const Vec& x, double t, const Vec& w) const;

  // s = w^T J_N(x,t) u; accumulates ds/dtheta into grad. Used by the spectral
  // penalty, whose singular vectors are held fixed while theta varies.
  double jvp_scalar_weight_grad(const Vec& x, double t, const Vec& u, const Vec& w,
                                Vec& grad) const;

 private:
  Vec embed_input(const Vec& x, double t) const;

  std::vector<Eigen::Index> dims_;
  Activation act_;
  TimeEmbedding embed_;
  Vec weights_;
  std::vector<Eigen::Index> w_off_, b_off_;
};

// How the denoiser is read off the raw net:
//   NN:      D(x,t) = N(x,t)
//   IplusNN: D(x,t) = x + (1-t) N(x,t), exactly the identity at t=1.
enum class ParamClass { NN, IplusNN };

ParamClass param_class_from_string(const std::string& s);
std::string to_string(ParamClass c);

struct ParametrizedDenoiser {
  NetModel net;
  ParamClass cls;

  Vec denoise(const Vec& x, double t) const;
  Mat denoise_batch(const Mat& X, const Vec& ts) const;
  Vec velocity(const Vec& x, double t) const;
  Vec velocity_jvp(const Vec& x, double t, const Vec& u) const;
  Vec velocity_vjp(const Vec& x, double t, const Vec& w) const;

  Denoiser as_denoiser() const;
  VelocityField as_velocity() const;
  DifferentiableVelocity as_velocity_diff() const;
};

struct Checkpoint {
  ParametrizedDenoiser model;
  std::uint64_t seed = 0;
  std::optional<Vec> ema_weights;

  // model with EMA weights substituted when present
  ParametrizedDenoiser eval_model(bool use_ema = true) const;
};

void save_checkpoint(const std::filesystem::path& file, const Checkpoint& ck);
Checkpoint load_checkpoint(const std::filesystem::path& file);

}  // namespace fmdt
