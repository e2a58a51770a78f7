#include "fmdt/weighting.hpp"

#include "fmdt/core.hpp"

#include <algorithm>
#include <cmath>

namespace fmdt {

WeightKind weight_kind_from_string(const std::string& s) {
  if (s == "fm") return WeightKind::FM;
  if (s == "classic") return WeightKind::Classic;
  if (s == "den") return WeightKind::Den;
  if (s == "pow1") return WeightKind::Pow1;
  if (s == "pow3") return WeightKind::Pow3;
  if (s == "mid") return WeightKind::Mid;
  if (s == "custom") return WeightKind::Custom;
  throw std::invalid_argument("unknown weighting kind: " + s);
}

std::string to_string(WeightKind k) {
  switch (k) {
    case WeightKind::FM: return "fm";
    case WeightKind::Classic: return "classic";
    case WeightKind::Den: return "den";
    case WeightKind::Pow1: return "pow1";
    case WeightKind::Pow3: return "pow3";
    case WeightKind::Mid: return "mid";
    case WeightKind::Custom: return "custom";
  }
  return "?";
}

WeightingScheme WeightingScheme::fm() {
  WeightingScheme w;
  w.kind_ = WeightKind::FM;
  return w;
}

WeightingScheme WeightingScheme::classic(double sigma_max) {
  if (!(sigma_max > 0.0)) throw std::invalid_argument("sigma_max must be positive");
  WeightingScheme w;
  w.kind_ = WeightKind::Classic;
  w.sigma_max_ = sigma_max;
  w.support_ = Interval{1.0 / (1.0 + sigma_max), 1.0};
  return w;
}

WeightingScheme WeightingScheme::den() {
  WeightingScheme w;
  w.kind_ = WeightKind::Den;
  return w;
}

WeightingScheme WeightingScheme::pow1() {
  WeightingScheme w;
  w.kind_ = WeightKind::Pow1;
  return w;
}

WeightingScheme WeightingScheme::pow3() {
  WeightingScheme w;
  w.kind_ = WeightKind::Pow3;
  return w;
}

WeightingScheme WeightingScheme::mid(double t_star) {
  check_time(t_star);
  WeightingScheme w;
  w.kind_ = WeightKind::Mid;
  w.t_star_ = t_star;
  return w;
}

WeightingScheme WeightingScheme::custom(std::vector<std::pair<double, double>> table) {
  if (table.size() < 2) throw std::invalid_argument("custom weighting needs at least two knots");
  std::sort(table.begin(), table.end());
  for (std::size_t i = 0; i < table.size(); ++i) {
    check_time(table[i].first);
    if (!(table[i].second >= 0.0) || !std::isfinite(table[i].second))
      throw std::invalid_argument("custom weights must be finite and >= 0");
    if (i > 0 && table[i].first == table[i - 1].first)
      throw std::invalid_argument("custom weighting knots must be distinct");
  }
  WeightingScheme w;
  w.kind_ = WeightKind::Custom;
  w.support_ = Interval{table.front().first, table.back().first};
  w.table_ = std::move(table);
  return w;
}

void WeightingScheme::set_cap(double cap) {
  if (!(cap > 0.0) || !std::isfinite(cap)) throw std::invalid_argument("cap must be positive and finite");
  cap_ = cap;
}

void WeightingScheme::restrict_support(const Interval& iv) {
  Interval r = intersect(support_, iv);
  if (!(r.lo <= r.hi)) throw std::invalid_argument("restricted support is empty");
  support_ = r;
}

double WeightingScheme::weight(double t) const {
  check_time(t);
  if (!support_.contains(t)) return 0.0;
  double raw;
  switch (kind_) {
    case WeightKind::FM: {
      double om = 1.0 - t;
      raw = 1.0 / (om * om);
      break;
    }
    case WeightKind::Classic:
      raw = 1.0 / (t * t);
      break;
    case WeightKind::Den:
      raw = 1.0;
      break;
    case WeightKind::Pow1:
      raw = 1.0 / (1.0 - t);
      break;
    case WeightKind::Pow3: {
      double om = 1.0 - t;
      raw = 1.0 / (om * om * om);
      break;
    }
    case WeightKind::Mid: {
      if (t == t_star_) return cap_;
      double dt = t_star_ - t;
      raw = 1.0 / (dt * dt);
      break;
    }
    case WeightKind::Custom: {
      auto it = std::lower_bound(table_.begin(), table_.end(), std::make_pair(t, -1.0));
      if (it == table_.begin()) return std::min(table_.front().second, cap_);
      if (it == table_.end()) return std::min(table_.back().second, cap_);
      auto [t1, w1] = *it;
      auto [t0, w0] = *(it - 1);
      double a = (t - t0) / (t1 - t0);
      raw = (1.0 - a) * w0 + a * w1;
      break;
    }
  }
  return std::min(raw, cap_);
}

}  // namespace fmdt
