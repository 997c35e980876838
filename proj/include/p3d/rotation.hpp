#pragma once

#include <array>
#include <cmath>
#include <stdexcept>

namespace p3d {

using Vec3 = std::array<double, 3>;
using Mat3 = std::array<double, 9>;  // row-major
using Rot6 = std::array<double, 6>;

inline Mat3 mat3_identity() { return {1, 0, 0, 0, 1, 0, 0, 0, 1}; }

inline Mat3 mat3_mul(const Mat3& a, const Mat3& b) {
  Mat3 c{};
  for (int i = 0; i < 3; ++i)
    for (int k = 0; k < 3; ++k)
      for (int j = 0; j < 3; ++j) c[3 * i + j] += a[3 * i + k] * b[3 * k + j];
  return c;
}

inline Mat3 mat3_transpose(const Mat3& a) {
  return {a[0], a[3], a[6], a[1], a[4], a[7], a[2], a[5], a[8]};
}

inline double mat3_det(const Mat3& a) {
  return a[0] * (a[4] * a[8] - a[5] * a[7]) - a[1] * (a[3] * a[8] - a[5] * a[6]) +
         a[2] * (a[3] * a[7] - a[4] * a[6]);
}

// Rodrigues: R = cosθ·I + (1−cosθ)/θ²·vvᵀ + sinθ/θ·[v]ₓ, with series
// expansions near θ=0 so the zero vector maps to the identity exactly.
inline Mat3 axis_angle_to_matrix(const Vec3& v) {
  const double t2 = v[0] * v[0] + v[1] * v[1] + v[2] * v[2];
  const double t = std::sqrt(t2);
  double a, b, c;  // sinθ/θ, (1−cosθ)/θ², cosθ
  if (t < 1e-4) {
    a = 1.0 - t2 / 6.0 + t2 * t2 / 120.0;
    b = 0.5 - t2 / 24.0 + t2 * t2 / 720.0;
    c = 1.0 - t2 * b;
  } else {
    a = std::sin(t) / t;
    b = (1.0 - std::cos(t)) / t2;
    c = std::cos(t);
  }
  Mat3 r{};
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) r[3 * i + j] = b * v[static_cast<size_t>(i)] * v[static_cast<size_t>(j)];
  r[0] += c;
  r[4] += c;
  r[8] += c;
  r[1] -= a * v[2];
  r[2] += a * v[1];
  r[3] += a * v[2];
  r[5] -= a * v[0];
  r[6] -= a * v[1];
  r[7] += a * v[0];
  return r;
}

// first two columns, column-major
inline Rot6 matrix_to_6d(const Mat3& r) {
  return {r[0], r[3], r[6], r[1], r[4], r[7]};
}

// Gram-Schmidt reconstruction; scale-invariant per column
inline Mat3 sixd_to_matrix(const Rot6& a) {
  const double eps = 1e-8;
  Vec3 a1{a[0], a[1], a[2]}, a2{a[3], a[4], a[5]};
  const double n1 = std::sqrt(a1[0] * a1[0] + a1[1] * a1[1] + a1[2] * a1[2]);
  if (n1 < eps) throw std::domain_error("sixd_to_matrix: first column is degenerate");
  Vec3 b1{a1[0] / n1, a1[1] / n1, a1[2] / n1};
  const double proj = b1[0] * a2[0] + b1[1] * a2[1] + b1[2] * a2[2];
  Vec3 u{a2[0] - proj * b1[0], a2[1] - proj * b1[1], a2[2] - proj * b1[2]};
  const double n2 = std::sqrt(u[0] * u[0] + u[1] * u[1] + u[2] * u[2]);
  if (n2 < eps) throw std::domain_error("sixd_to_matrix: columns are parallel or second is zero");
  Vec3 b2{u[0] / n2, u[1] / n2, u[2] / n2};
  Vec3 b3{b1[1] * b2[2] - b1[2] * b2[1], b1[2] * b2[0] - b1[0] * b2[2],
          b1[0] * b2[1] - b1[1] * b2[0]};
  return {b1[0], b2[0], b3[0], b1[1], b2[1], b3[1], b1[2], b2[2], b3[2]};
}

}  // namespace p3d
