#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <p3d/rng.hpp>
#include <p3d/rotation.hpp>

#include <cmath>

using p3d::Mat3;
using p3d::Rot6;
using p3d::Vec3;

namespace {

void check_close(const Mat3& a, const Mat3& b, double tol) {
  for (int i = 0; i < 9; ++i) CHECK(std::abs(a[static_cast<size_t>(i)] - b[static_cast<size_t>(i)]) <= tol);
}

void check_orthonormal(const Mat3& r, double tol) {
  const Mat3 rtr = p3d::mat3_mul(p3d::mat3_transpose(r), r);
  const Mat3 eye = p3d::mat3_identity();
  for (int i = 0; i < 9; ++i) CHECK(std::abs(rtr[static_cast<size_t>(i)] - eye[static_cast<size_t>(i)]) < tol);
  CHECK(std::abs(p3d::mat3_det(r) - 1.0) < tol);
}

Vec3 random_axis_angle(p3d::RngState& rng, double max_angle) {
  Vec3 v{rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1)};
  const double n = std::sqrt(v[0] * v[0] + v[1] * v[1] + v[2] * v[2]) + 1e-12;
  const double angle = rng.uniform(0, max_angle);
  return {v[0] / n * angle, v[1] / n * angle, v[2] / n * angle};
}

}  // namespace

TEST_CASE("zero axis-angle is the identity") {
  check_close(p3d::axis_angle_to_matrix({0, 0, 0}), p3d::mat3_identity(), 0.0);
}

TEST_CASE("quarter turn about z") {
  const double h = 1.5707963267948966;
  const Mat3 r = p3d::axis_angle_to_matrix({0, 0, h});
  const Mat3 expect{0, -1, 0, 1, 0, 0, 0, 0, 1};
  check_close(r, expect, 1e-15);
  const Rot6 six = p3d::matrix_to_6d(r);
  CHECK(std::abs(six[0] - 0.0) < 1e-15);
  CHECK(std::abs(six[1] - 1.0) < 1e-15);
  CHECK(std::abs(six[2] - 0.0) < 1e-15);
  CHECK(std::abs(six[3] - -1.0) < 1e-15);
  CHECK(std::abs(six[4] - 0.0) < 1e-15);
  CHECK(std::abs(six[5] - 0.0) < 1e-15);
}

TEST_CASE("random rotations are orthonormal with unit determinant") {
  p3d::RngState rng(42);
  for (int i = 0; i < 500; ++i)
    check_orthonormal(p3d::axis_angle_to_matrix(random_axis_angle(rng, 6.2)), 1e-12);
}

TEST_CASE("six-d round trip recovers the rotation") {
  p3d::RngState rng(43);
  for (int i = 0; i < 500; ++i) {
    const Mat3 r = p3d::axis_angle_to_matrix(random_axis_angle(rng, 3.0));
    const Mat3 back = p3d::sixd_to_matrix(p3d::matrix_to_6d(r));
    check_close(back, r, 1e-12);
  }
}

TEST_CASE("identity six-d maps to the identity, and scaling does not matter") {
  check_close(p3d::sixd_to_matrix({1, 0, 0, 0, 1, 0}), p3d::mat3_identity(), 0.0);
  check_close(p3d::sixd_to_matrix({2, 0, 0, 0, 3, 0}), p3d::mat3_identity(), 0.0);

  p3d::RngState rng(44);
  const Mat3 r = p3d::axis_angle_to_matrix(random_axis_angle(rng, 2.0));
  Rot6 six = p3d::matrix_to_6d(r);
  Rot6 scaled;
  for (int i = 0; i < 3; ++i) scaled[static_cast<size_t>(i)] = 2.5 * six[static_cast<size_t>(i)];
  for (int i = 3; i < 6; ++i) scaled[static_cast<size_t>(i)] = 0.7 * six[static_cast<size_t>(i)];
  check_close(p3d::sixd_to_matrix(scaled), r, 1e-12);
}

TEST_CASE("gram-schmidt repairs noisy six-d inputs to a valid rotation") {
  p3d::RngState rng(45);
  for (int i = 0; i < 200; ++i) {
    const Mat3 r = p3d::axis_angle_to_matrix(random_axis_angle(rng, 3.0));
    Rot6 six = p3d::matrix_to_6d(r);
    for (auto& v : six) v += rng.uniform(-0.05, 0.05);
    check_orthonormal(p3d::sixd_to_matrix(six), 1e-9);
  }
}

TEST_CASE("degenerate six-d inputs are rejected") {
  CHECK_THROWS_AS((void)p3d::sixd_to_matrix({0, 0, 0, 0, 1, 0}), std::domain_error);
  CHECK_THROWS_AS((void)p3d::sixd_to_matrix({1, 0, 0, 3, 0, 0}), std::domain_error);
  CHECK_THROWS_AS((void)p3d::sixd_to_matrix({1, 1, 0, 0, 0, 0}), std::domain_error);
}

TEST_CASE("small-angle series matches a direct trigonometric evaluation") {
  // both sides of the series/direct switchover compared against an
  // independently coded Rodrigues formula
  const Vec3 axis{0.3, -0.5, 0.8};
  for (double eps : {0.99e-4, 1.01e-4, 1e-6}) {
    const Vec3 v{axis[0] * eps, axis[1] * eps, axis[2] * eps};
    const double t = std::sqrt(v[0] * v[0] + v[1] * v[1] + v[2] * v[2]);
    const double a = std::sin(t) / t;
    const double b = (1.0 - std::cos(t)) / (t * t);
    Mat3 ref{};
    const Mat3 k{0, -v[2], v[1], v[2], 0, -v[0], -v[1], v[0], 0};
    const Mat3 k2 = p3d::mat3_mul(k, k);
    for (int i = 0; i < 9; ++i)
      ref[static_cast<size_t>(i)] = a * k[static_cast<size_t>(i)] + b * k2[static_cast<size_t>(i)];
    ref[0] += 1;
    ref[4] += 1;
    ref[8] += 1;
    check_close(p3d::axis_angle_to_matrix(v), ref, 1e-13);
    check_orthonormal(p3d::axis_angle_to_matrix(v), 1e-12);
  }

  // tiny rotations stay near the identity
  check_close(p3d::axis_angle_to_matrix({1e-10, 0, 0}), p3d::mat3_identity(), 1e-9);
}

TEST_CASE("composition matches angle addition about one axis") {
  const Mat3 a = p3d::axis_angle_to_matrix({0, 0.4, 0});
  const Mat3 b = p3d::axis_angle_to_matrix({0, 0.9, 0});
  check_close(p3d::mat3_mul(a, b), p3d::axis_angle_to_matrix({0, 1.3, 0}), 1e-12);
}
