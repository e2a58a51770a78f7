#pragma once

#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace fmdt {

struct Interval {
  double lo = 0.0, hi = 1.0;
  bool contains(double t) const { return t >= lo && t <= hi; }
  double length() const { return hi - lo; }
};

inline Interval intersect(const Interval& a, const Interval& b) {
  return Interval{a.lo > b.lo ? a.lo : b.lo, a.hi < b.hi ? a.hi : b.hi};
}

enum class WeightKind { FM, Classic, Den, Pow1, Pow3, Mid, Custom };

WeightKind weight_kind_from_string(const std::string& s);
std::string to_string(WeightKind k);

// Loss weight w(t) over interpolation time. A scheme is zero outside its
// support interval and clipped at the cap where the formula diverges:
//   FM      1/(1-t)^2
//   Classic 1/t^2 on [1/(1+sigma_max), 1]
//   Den     1
//   Pow1    1/(1-t)      Pow3  1/(1-t)^3
//   Mid     1/(t*-t)^2, equal to the cap at t = t*
//   Custom  piecewise-linear table of (t, w) knots
class WeightingScheme {
 public:
  static WeightingScheme fm();
  static WeightingScheme classic(double sigma_max = 19.0);
  static WeightingScheme den();
  static WeightingScheme pow1();
  static WeightingScheme pow3();
  static WeightingScheme mid(double t_star);
  static WeightingScheme custom(std::vector<std::pair<double, double>> table);

  double weight(double t) const;

  WeightKind kind() const { return kind_; }
  const Interval& support() const { return support_; }
  double cap() const { return cap_; }
  void set_cap(double cap);
  void restrict_support(const Interval& iv);

  double sigma_max() const { return sigma_max_; }
  double t_star() const { return t_star_; }
  const std::vector<std::pair<double, double>>& table() const { return table_; }

 private:
  WeightingScheme() = default;
  WeightKind kind_ = WeightKind::Den;
  Interval support_{0.0, 1.0};
  double cap_ = 1e4;
  double sigma_max_ = 0.0;
  double t_star_ = 0.0;
  std::vector<std::pair<double, double>> table_;
};

}  // namespace fmdt
