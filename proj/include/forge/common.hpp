#pragma once

#include <array>
#include <cmath>
#include <stdexcept>
#include <string>

namespace forge {

using Vec3 = std::array<double, 3>;

inline Vec3 operator+(const Vec3& a, const Vec3& b) { return {a[0] + b[0], a[1] + b[1], a[2] + b[2]}; }
inline Vec3 operator-(const Vec3& a, const Vec3& b) { return {a[0] - b[0], a[1] - b[1], a[2] - b[2]}; }
inline Vec3 operator*(double s, const Vec3& a) { return {s * a[0], s * a[1], s * a[2]}; }

inline double dot(const Vec3& a, const Vec3& b) { return a[0] * b[0] + a[1] * b[1] + a[2] * b[2]; }
inline double norm(const Vec3& a) { return std::sqrt(dot(a, a)); }
inline double dist(const Vec3& a, const Vec3& b) { return norm(a - b); }
inline double dist_xy(const Vec3& a, const Vec3& b) { return std::hypot(a[0] - b[0], a[1] - b[1]); }

inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

inline double smoothstep(double u) {
  if (u <= 0.0) return 0.0;
  if (u >= 1.0) return 1.0;
  return u * u * (3.0 - 2.0 * u);
}

/// Wrap an angle to (-pi, pi].
inline double wrap_angle(double a) {
  const double two_pi = 2.0 * M_PI;
  a = std::fmod(a + M_PI, two_pi);
  if (a <= 0.0) a += two_pi;
  return a - M_PI;
}

/// Distance from point p to segment [a, b]. Optionally reports the
/// minimizing parameter s in [0, 1] (needed for envelope-theorem gradients).
inline double seg_point_dist(const Vec3& a, const Vec3& b, const Vec3& p, double* s_out = nullptr) {
  const Vec3 ab = b - a;
  const double len2 = dot(ab, ab);
  double s = 0.0;
  if (len2 > 0.0) {
    s = dot(p - a, ab) / len2;
    s = std::min(1.0, std::max(0.0, s));
  }
  if (s_out) *s_out = s;
  return dist(a + s * ab, p);
}

[[noreturn]] inline void throw_invalid(const std::string& what) {
  throw std::invalid_argument(what);
}

}  // namespace forge
