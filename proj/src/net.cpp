#include "fmdt/net.hpp"

#include "fmdt/rng.hpp"
#include "fmdt/util.hpp"

#include <json.hpp>

#include <cmath>
#include <cstring>

namespace fmdt {

namespace {

constexpr double kTwoPi = 6.283185307179586476925286766559;
constexpr double kInvSqrt2 = 0.70710678118654752440084436210485;
constexpr double kInvSqrt2Pi = 0.39894228040143267793994605993438;

inline double act_f(Activation a, double x) {
  if (a == Activation::Tanh) return std::tanh(x);
  return 0.5 * x * (1.0 + std::erf(x * kInvSqrt2));
}

inline double act_d1(Activation a, double x) {
  if (a == Activation::Tanh) {
    double th = std::tanh(x);
    return 1.0 - th * th;
  }
  double cdf = 0.5 * (1.0 + std::erf(x * kInvSqrt2));
  double pdf = kInvSqrt2Pi * std::exp(-0.5 * x * x);
  return cdf + x * pdf;
}

inline double act_d2(Activation a, double x) {
  if (a == Activation::Tanh) {
    double th = std::tanh(x);
    return -2.0 * th * (1.0 - th * th);
  }
  double pdf = kInvSqrt2Pi * std::exp(-0.5 * x * x);
  return pdf * (2.0 - x * x);
}

template <typename M>
M map_act(Activation a, const M& x, double (*f)(Activation, double)) {
  return x.unaryExpr([a, f](double v) { return f(a, v); });
}

}  // namespace

Activation activation_from_string(const std::string& s) {
  if (s == "tanh") return Activation::Tanh;
  if (s == "gelu") return Activation::Gelu;
  throw std::invalid_argument("unknown activation: " + s);
}

std::string to_string(Activation a) { return a == Activation::Tanh ? "tanh" : "gelu"; }

ParamClass param_class_from_string(const std::string& s) {
  if (s == "nn") return ParamClass::NN;
  if (s == "i+nn") return ParamClass::IplusNN;
  throw std::invalid_argument("unknown parametrization class: " + s);
}

std::string to_string(ParamClass c) { return c == ParamClass::NN ? "nn" : "i+nn"; }

void TimeEmbedding::write(double t, double* out) const {
  Eigen::Index i = 0;
  if (include_raw_t) out[i++] = t;
  for (double f : frequencies) {
    out[i++] = std::sin(kTwoPi * f * t);
    out[i++] = std::cos(kTwoPi * f * t);
  }
}

Vec TimeEmbedding::operator()(double t) const {
  Vec e(width());
  write(t, e.data());
  return e;
}

TimeEmbedding TimeEmbedding::standard() {
  TimeEmbedding e;
  e.frequencies = {1, 2, 4, 8, 16, 32, 64, 128};
  e.include_raw_t = true;
  return e;
}

NetModel::NetModel(std::vector<Eigen::Index> layer_dims, Activation act, TimeEmbedding embed)
    : dims_(std::move(layer_dims)), act_(act), embed_(std::move(embed)) {
  if (dims_.size() < 2) throw std::invalid_argument("net needs at least one affine layer");
  for (Eigen::Index d : dims_)
    if (d < 1) throw std::invalid_argument("layer dims must be positive");
  if (dims_.front() <= embed_.width())
    throw std::invalid_argument("input layer leaves no room for the state");
  Eigen::Index total = 0;
  for (std::size_t l = 0; l + 1 < dims_.size(); ++l) {
    w_off_.push_back(total);
    total += dims_[l] * dims_[l + 1];
    b_off_.push_back(total);
    total += dims_[l + 1];
  }
  weights_ = Vec::Zero(total);
}

NetModel NetModel::make(Eigen::Index d, const std::vector<Eigen::Index>& hidden, Activation act,
                        TimeEmbedding embed) {
  std::vector<Eigen::Index> dims;
  dims.push_back(d + embed.width());
  dims.insert(dims.end(), hidden.begin(), hidden.end());
  dims.push_back(d);
  return NetModel(std::move(dims), act, std::move(embed));
}

void NetModel::set_weights(Vec w) {
  if (w.size() != weights_.size()) throw std::invalid_argument("weight vector length mismatch");
  if (!w.allFinite()) throw std::invalid_argument("weights must be finite");
  weights_ = std::move(w);
}

void NetModel::init_weights(std::uint64_t seed) {
  Rng rng(seed);
  for (std::size_t l = 0; l + 1 < dims_.size(); ++l) {
    const Eigen::Index fan_in = dims_[l], fan_out = dims_[l + 1];
    const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
    for (Eigen::Index k = 0; k < fan_in * fan_out; ++k)
      weights_[w_off_[l] + k] = rng.uniform(-limit, limit);
    for (Eigen::Index k = 0; k < fan_out; ++k) weights_[b_off_[l] + k] = 0.0;
  }
}

Eigen::Map<const Mat> NetModel::layer_w(std::size_t l) const {
  return Eigen::Map<const Mat>(weights_.data() + w_off_[l], dims_[l + 1], dims_[l]);
}

Eigen::Map<const Vec> NetModel::layer_b(std::size_t l) const {
  return Eigen::Map<const Vec>(weights_.data() + b_off_[l], dims_[l + 1]);
}

Vec NetModel::embed_input(const Vec& x, double t) const {
  const Eigen::Index xd = dims_.front() - embed_.width();
  if (x.size() != xd) throw std::invalid_argument("state dimension does not match net input");
  check_time(t);
  Vec z(dims_.front());
  z.head(xd) = x;
  embed_.write(t, z.data() + xd);
  return z;
}

Vec NetModel::forward(const Vec& x, double t) const {
  const std::size_t L = dims_.size() - 1;
  Vec a = embed_input(x, t);
  for (std::size_t l = 0; l < L; ++l) {
    Vec p = layer_w(l) * a + layer_b(l);
    if (l + 1 < L)
      a = map_act(act_, p, act_f);
    else
      a = std::move(p);
  }
  return a;
}

Mat NetModel::forward_batch(const Mat& X, const Vec& ts) const {
  ForwardCache cache;
  return forward_batch(X, ts, cache);
}

Mat NetModel::forward_batch(const Mat& X, const Vec& ts, ForwardCache& cache) const {
  const std::size_t L = dims_.size() - 1;
  const Eigen::Index B = X.cols();
  const Eigen::Index xd = dims_.front() - embed_.width();
  if (X.rows() != xd) throw std::invalid_argument("batch dimension does not match net input");
  if (ts.size() != B) throw std::invalid_argument("one time per batch column required");
  cache.z.assign(L, Mat());
  cache.p.assign(L, Mat());
  Mat Z(dims_.front(), B);
  Z.topRows(xd) = X;
  for (Eigen::Index j = 0; j < B; ++j) {
    check_time(ts[j]);
    embed_.write(ts[j], Z.col(j).data() + xd);
  }
  for (std::size_t l = 0; l < L; ++l) {
    cache.z[l] = std::move(Z);
    Mat P = (layer_w(l) * cache.z[l]).colwise() + layer_b(l);
    if (l + 1 < L) {
      Z = map_act(act_, P, act_f);
      cache.p[l] = std::move(P);
    } else {
      cache.p[l] = P;
      return P;
    }
  }
  return {};  // unreachable
}

void NetModel::backward_batch(const ForwardCache& cache, const Mat& G, Vec& grad) const {
  const std::size_t L = dims_.size() - 1;
  if (grad.size() != weights_.size()) throw std::invalid_argument("gradient buffer size mismatch");
  Mat delta = G;
  for (std::size_t l = L; l-- > 0;) {
    Eigen::Map<Mat> wg(grad.data() + w_off_[l], dims_[l + 1], dims_[l]);
    Eigen::Map<Vec> bg(grad.data() + b_off_[l], dims_[l + 1]);
    wg.noalias() += delta * cache.z[l].transpose();
    bg += delta.rowwise().sum();
    if (l > 0) {
      Mat back = layer_w(l).transpose() * delta;
      delta = back.cwiseProduct(map_act(act_, cache.p[l - 1], act_d1));
    }
  }
}

Vec NetModel::input_jvp(const Vec& x, double t, const Vec& u) const {
  const std::size_t L = dims_.size() - 1;
  const Eigen::Index xd = dims_.front() - embed_.width();
  if (u.size() != xd) throw std::invalid_argument("direction dimension mismatch");
  Vec a = embed_input(x, t);
  Vec da = Vec::Zero(dims_.front());
  da.head(xd) = u;
  for (std::size_t l = 0; l < L; ++l) {
    Vec p = layer_w(l) * a + layer_b(l);
    Vec dp = layer_w(l) * da;
    if (l + 1 < L) {
      da = map_act(act_, p, act_d1).cwiseProduct(dp);
      a = map_act(act_, p, act_f);
    } else {
      return dp;
    }
  }
  return {};  // unreachable
}

Vec NetModel::input_vjp(const Vec& x, double t, const Vec& w) const {
  const std::size_t L = dims_.size() - 1;
  const Eigen::Index xd = dims_.front() - embed_.width();
  if (w.size() != dims_.back()) throw std::invalid_argument("cotangent dimension mismatch");
  std::vector<Vec> p(L);
  Vec a = embed_input(x, t);
  for (std::size_t l = 0; l < L; ++l) {
    p[l] = layer_w(l) * a + layer_b(l);
    if (l + 1 < L) a = map_act(act_, p[l], act_f);
  }
  Vec delta = w;
  for (std::size_t l = L; l-- > 0;) {
    Vec back = layer_w(l).transpose() * delta;
    if (l > 0)
      delta = back.cwiseProduct(map_act(act_, p[l - 1], act_d1));
    else
      return back.head(xd).eval();
  }
  return {};  // unreachable
}

double NetModel::jvp_scalar_weight_grad(const Vec& x, double t, const Vec& u, const Vec& w,
                                        Vec& grad) const {
  // Forward: primal stream a, tangent stream da (derivative in direction u).
  // The scalar s = w . d(output) is then reverse-differentiated in theta while
  // u and w stay fixed; this needs the activation's second derivative.
  const std::size_t L = dims_.size() - 1;
  const Eigen::Index xd = dims_.front() - embed_.width();
  if (grad.size() != weights_.size()) throw std::invalid_argument("gradient buffer size mismatch");
  std::vector<Vec> a(L), da(L), p(L), dp(L);
  a[0] = embed_input(x, t);
  da[0] = Vec::Zero(dims_.front());
  da[0].head(xd) = u;
  for (std::size_t l = 0; l < L; ++l) {
    p[l] = layer_w(l) * a[l] + layer_b(l);
    dp[l] = layer_w(l) * da[l];
    if (l + 1 < L) {
      a[l + 1] = map_act(act_, p[l], act_f);
      da[l + 1] = map_act(act_, p[l], act_d1).cwiseProduct(dp[l]);
    }
  }
  const double s = w.dot(dp[L - 1]);

  Vec r = Vec::Zero(dims_.back());  // ds/dp at the current layer
  Vec q = w;                        // ds/ddp at the current layer
  for (std::size_t l = L; l-- > 0;) {
    Eigen::Map<Mat> wg(grad.data() + w_off_[l], dims_[l + 1], dims_[l]);
    Eigen::Map<Vec> bg(grad.data() + b_off_[l], dims_[l + 1]);
    wg.noalias() += r * a[l].transpose();
    wg.noalias() += q * da[l].transpose();
    bg += r;
    if (l > 0) {
      Vec wr = layer_w(l).transpose() * r;
      Vec wq = layer_w(l).transpose() * q;
      Vec d1 = map_act(act_, p[l - 1], act_d1);
      Vec d2 = map_act(act_, p[l - 1], act_d2);
      r = d1.cwiseProduct(wr) + d2.cwiseProduct(dp[l - 1]).cwiseProduct(wq);
      q = d1.cwiseProduct(wq);
    }
  }
  return s;
}

Vec ParametrizedDenoiser::denoise(const Vec& x, double t) const {
  check_time(t);
  if (cls == ParamClass::IplusNN) {
    if (t == 1.0) return x;
    return x + (1.0 - t) * net.forward(x, t);
  }
  return net.forward(x, t);
}

Mat ParametrizedDenoiser::denoise_batch(const Mat& X, const Vec& ts) const {
  Mat N = net.forward_batch(X, ts);
  if (cls == ParamClass::NN) return N;
  Mat D(X.rows(), X.cols());
  for (Eigen::Index j = 0; j < X.cols(); ++j)
    D.col(j) = X.col(j) + (1.0 - ts[j]) * N.col(j);
  return D;
}

Vec ParametrizedDenoiser::velocity(const Vec& x, double t) const {
  check_time(t);
  if (t == 1.0) throw std::invalid_argument("velocity is undefined at t=1");
  if (cls == ParamClass::IplusNN) return net.forward(x, t);
  return (net.forward(x, t) - x) / (1.0 - t);
}

Vec ParametrizedDenoiser::velocity_jvp(const Vec& x, double t, const Vec& u) const {
  if (t == 1.0) throw std::invalid_argument("velocity is undefined at t=1");
  if (cls == ParamClass::IplusNN) return net.input_jvp(x, t, u);
  return (net.input_jvp(x, t, u) - u) / (1.0 - t);
}

Vec ParametrizedDenoiser::velocity_vjp(const Vec& x, double t, const Vec& w) const {
  if (t == 1.0) throw std::invalid_argument("velocity is undefined at t=1");
  if (cls == ParamClass::IplusNN) return net.input_vjp(x, t, w);
  return (net.input_vjp(x, t, w) - w) / (1.0 - t);
}

Denoiser ParametrizedDenoiser::as_denoiser() const {
  auto self = std::make_shared<ParametrizedDenoiser>(*this);
  return Denoiser{[self](const Vec& x, double t) { return self->denoise(x, t); }};
}

VelocityField ParametrizedDenoiser::as_velocity() const {
  auto self = std::make_shared<ParametrizedDenoiser>(*this);
  return VelocityField{[self](const Vec& x, double t) { return self->velocity(x, t); }};
}

DifferentiableVelocity ParametrizedDenoiser::as_velocity_diff() const {
  auto self = std::make_shared<ParametrizedDenoiser>(*this);
  DifferentiableVelocity v;
  v.eval = [self](const Vec& x, double t) { return self->velocity(x, t); };
  v.jvp = [self](const Vec& x, double t, const Vec& u) { return self->velocity_jvp(x, t, u); };
  v.vjp = [self](const Vec& x, double t, const Vec& w) { return self->velocity_vjp(x, t, w); };
  return v;
}

ParametrizedDenoiser Checkpoint::eval_model(bool use_ema) const {
  ParametrizedDenoiser pd = model;
  if (use_ema && ema_weights) pd.net.set_weights(*ema_weights);
  return pd;
}

namespace {

std::string encode_weights(const Vec& w) {
  std::vector<unsigned char> bytes(static_cast<std::size_t>(w.size()) * 8);
  for (Eigen::Index i = 0; i < w.size(); ++i) {
    std::uint64_t bits;
    double v = w[i];
    std::memcpy(&bits, &v, 8);
    for (int b = 0; b < 8; ++b)
      bytes[static_cast<std::size_t>(i) * 8 + b] = static_cast<unsigned char>((bits >> (8 * b)) & 0xff);
  }
  return base64_encode(bytes.data(), bytes.size());
}

Vec decode_weights(const std::string& text) {
  std::vector<unsigned char> bytes = base64_decode(text);
  if (bytes.size() % 8 != 0) throw std::runtime_error("weight blob is not a multiple of 8 bytes");
  Vec w(static_cast<Eigen::Index>(bytes.size() / 8));
  for (Eigen::Index i = 0; i < w.size(); ++i) {
    std::uint64_t bits = 0;
    for (int b = 0; b < 8; ++b)
      bits |= static_cast<std::uint64_t>(bytes[static_cast<std::size_t>(i) * 8 + b]) << (8 * b);
    double v;
    std::memcpy(&v, &bits, 8);
    w[i] = v;
  }
  return w;
}

}  // namespace

void save_checkpoint(const std::filesystem::path& file, const Checkpoint& ck) {
  nlohmann::json j;
  j["format"] = "fmdt-ckpt-1";
  j["layer_dims"] = ck.model.net.layer_dims();
  j["activation"] = to_string(ck.model.net.activation());
  j["time_embed"] = {{"frequencies", ck.model.net.time_embedding().frequencies},
                     {"include_raw_t", ck.model.net.time_embedding().include_raw_t}};
  j["class"] = to_string(ck.model.cls);
  j["seed"] = ck.seed;
  j["weights"] = encode_weights(ck.model.net.weights());
  if (ck.ema_weights)
    j["ema_weights"] = encode_weights(*ck.ema_weights);
  else
    j["ema_weights"] = nullptr;
  write_file(file, j.dump(2) + "\n");
}

Checkpoint load_checkpoint(const std::filesystem::path& file) {
  nlohmann::json j = nlohmann::json::parse(read_file(file));
  if (j.value("format", "") != "fmdt-ckpt-1")
    throw std::runtime_error("not a checkpoint file: " + file.string());
  TimeEmbedding embed;
  embed.frequencies = j.at("time_embed").at("frequencies").get<std::vector<double>>();
  embed.include_raw_t = j.at("time_embed").at("include_raw_t").get<bool>();
  NetModel net(j.at("layer_dims").get<std::vector<Eigen::Index>>(),
               activation_from_string(j.at("activation").get<std::string>()), std::move(embed));
  net.set_weights(decode_weights(j.at("weights").get<std::string>()));
  Checkpoint ck{ParametrizedDenoiser{std::move(net),
                                     param_class_from_string(j.at("class").get<std::string>())},
                j.at("seed").get<std::uint64_t>(), std::nullopt};
  if (!j.at("ema_weights").is_null())
    ck.ema_weights = decode_weights(j.at("ema_weights").get<std::string>());
  return ck;
}

}  // namespace fmdt
