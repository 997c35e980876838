#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <p3d/tensor.hpp>

#include <cmath>
#include <vector>

using p3d::Index;
using p3d::RngState;
using p3d::Shape;
using p3d::Tensor;

namespace {

template <class S>
Tensor<S> rand_t(Shape shape, RngState& r, bool rg = false, double lo = -1.0, double hi = 1.0) {
  std::vector<S> v(static_cast<size_t>(p3d::shape_numel(shape)));
  for (auto& x : v) x = static_cast<S>(r.uniform(lo, hi));
  return Tensor<S>::from_data(std::move(shape), std::move(v), rg);
}

// independent reference product, plain triple loop in double
std::vector<double> ref_matmul(const std::vector<double>& a, const std::vector<double>& b,
                               Index rows, Index k, Index n) {
  std::vector<double> c(static_cast<size_t>(rows * n), 0.0);
  for (Index i = 0; i < rows; ++i)
    for (Index p = 0; p < k; ++p)
      for (Index j = 0; j < n; ++j)
        c[static_cast<size_t>(i * n + j)] +=
            a[static_cast<size_t>(i * k + p)] * b[static_cast<size_t>(p * n + j)];
  return c;
}

}  // namespace

TEST_CASE_TEMPLATE("matmul known product and identity", S, float, double) {
  auto a = Tensor<S>::from_data({2, 2}, {1, 2, 3, 4});
  auto b = Tensor<S>::from_data({2, 2}, {5, 6, 7, 8});
  auto c = p3d::matmul(a, b);
  CHECK(c.values()[0] == S(19));
  CHECK(c.values()[1] == S(22));
  CHECK(c.values()[2] == S(43));
  CHECK(c.values()[3] == S(50));

  auto eye = Tensor<S>::from_data({2, 2}, {1, 0, 0, 1});
  auto ai = p3d::matmul(a, eye);
  for (Index i = 0; i < 4; ++i) CHECK(ai.values()[i] == a.values()[i]);
}

TEST_CASE("matmul flattens leading axes over a 2-D rhs and matches a triple loop") {
  RngState r(100);
  auto a = rand_t<double>({2, 3, 4}, r);
  auto b = rand_t<double>({4, 5}, r);
  auto c = p3d::matmul(a, b);
  REQUIRE(c.shape() == Shape{2, 3, 5});
  std::vector<double> av(a.values().begin(), a.values().end());
  std::vector<double> bv(b.values().begin(), b.values().end());
  auto ref = ref_matmul(av, bv, 6, 4, 5);
  for (Index i = 0; i < c.numel(); ++i)
    CHECK(c.values()[i] == doctest::Approx(ref[static_cast<size_t>(i)]).epsilon(1e-12));
}

TEST_CASE("matmul rejects mismatched shapes") {
  auto a = Tensor<float>::zeros({2, 3});
  auto b = Tensor<float>::zeros({4, 2});
  CHECK_THROWS_AS((void)p3d::matmul(a, b), std::invalid_argument);
}

TEST_CASE("matmul gradients match finite differences") {
  RngState r(7);
  std::vector<p3d::Parameter<double>> params;
  params.push_back({"a", rand_t<double>({3, 4}, r, true)});
  params.push_back({"b", rand_t<double>({4, 2}, r, true)});
  auto loss = [&] { return p3d::mean_all(p3d::matmul(params[0].tensor, params[1].tensor)); };
  auto rep = p3d::grad_check<double>(loss, params, 1e-6, 1e-7, 50, RngState(1));
  CHECK(rep.passed);
}

TEST_CASE("bmm matches per-batch triple loops") {
  RngState r(5);
  auto a = rand_t<double>({3, 2, 4}, r);
  auto b = rand_t<double>({3, 4, 2}, r);
  auto c = p3d::bmm(a, b);
  REQUIRE(c.shape() == Shape{3, 2, 2});
  for (Index i = 0; i < 3; ++i) {
    std::vector<double> av(a.values().begin() + i * 8, a.values().begin() + (i + 1) * 8);
    std::vector<double> bv(b.values().begin() + i * 8, b.values().begin() + (i + 1) * 8);
    auto ref = ref_matmul(av, bv, 2, 4, 2);
    for (Index j = 0; j < 4; ++j)
      CHECK(c.values()[i * 4 + j] == doctest::Approx(ref[static_cast<size_t>(j)]).epsilon(1e-12));
  }
  auto bad = Tensor<double>::zeros({2, 4, 2});
  CHECK_THROWS_AS((void)p3d::bmm(a, bad), std::invalid_argument);
}

TEST_CASE("bmm gradients match finite differences") {
  RngState r(8);
  std::vector<p3d::Parameter<double>> params;
  params.push_back({"a", rand_t<double>({2, 2, 3}, r, true)});
  params.push_back({"b", rand_t<double>({2, 3, 2}, r, true)});
  auto loss = [&] { return p3d::sum_all(p3d::bmm(params[0].tensor, params[1].tensor)); };
  auto rep = p3d::grad_check<double>(loss, params, 1e-6, 1e-7, 50, RngState(2));
  CHECK(rep.passed);
}

TEST_CASE("transpose_last2 is an involution and swaps indices") {
  auto x = Tensor<double>::from_data({2, 3}, {1, 2, 3, 4, 5, 6});
  auto t = p3d::transpose_last2(x);
  REQUIRE(t.shape() == Shape{3, 2});
  CHECK(t.values()[0] == 1);
  CHECK(t.values()[1] == 4);
  CHECK(t.values()[2] == 2);
  auto tt = p3d::transpose_last2(t);
  for (Index i = 0; i < 6; ++i) CHECK(tt.values()[i] == x.values()[i]);
}

TEST_CASE_TEMPLATE("gelu fixed points", S, float, double) {
  auto x = Tensor<S>::from_data({3}, {S(0), S(1), S(-10)});
  auto y = p3d::gelu(x);
  CHECK(y.values()[0] == S(0));
  CHECK(static_cast<double>(y.values()[1]) == doctest::Approx(0.8413447460685429).epsilon(1e-6));
  CHECK(std::abs(static_cast<double>(y.values()[2])) < 1e-7);
}

TEST_CASE("gelu gradient matches finite differences") {
  RngState r(3);
  std::vector<p3d::Parameter<double>> params;
  params.push_back({"x", rand_t<double>({17}, r, true, -3.0, 3.0)});
  auto loss = [&] { return p3d::sum_all(p3d::gelu(params[0].tensor)); };
  auto rep = p3d::grad_check<double>(loss, params, 1e-6, 1e-6, 50, RngState(3));
  CHECK(rep.passed);
}

TEST_CASE("softmax rows sum to one, match ratios, and survive huge logits") {
  auto x = Tensor<double>::from_data({1, 2}, {0.0, std::log(2.0)});
  auto y = p3d::softmax(x, -1);
  CHECK(y.values()[0] == doctest::Approx(1.0 / 3.0).epsilon(1e-12));
  CHECK(y.values()[1] == doctest::Approx(2.0 / 3.0).epsilon(1e-12));

  auto big = Tensor<double>::from_data({1, 3}, {1000.0, 999.0, 0.0});
  auto yb = p3d::softmax(big, -1);
  double s = 0;
  for (Index i = 0; i < 3; ++i) {
    CHECK(std::isfinite(yb.values()[i]));
    s += yb.values()[i];
  }
  CHECK(s == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(yb.values()[0] == doctest::Approx(1.0 / (1.0 + std::exp(-1.0))).epsilon(1e-9));

  // shift invariance
  RngState r(4);
  auto a = rand_t<double>({4, 6}, r);
  std::vector<double> shifted(a.values().begin(), a.values().end());
  for (auto& v : shifted) v += 123.25;
  auto b = Tensor<double>::from_data({4, 6}, std::move(shifted));
  auto ya = p3d::softmax(a, -1), yb2 = p3d::softmax(b, -1);
  for (Index i = 0; i < ya.numel(); ++i)
    CHECK(ya.values()[i] == doctest::Approx(yb2.values()[i]).epsilon(1e-10));
}

TEST_CASE("softmax over a non-last axis") {
  auto x = Tensor<double>::from_data({2, 2}, {0, 10, std::log(3.0), 10});
  auto y = p3d::softmax(x, 0);
  CHECK(y.values()[0] == doctest::Approx(0.25).epsilon(1e-12));   // exp(0)/(exp0+exp(ln3))
  CHECK(y.values()[2] == doctest::Approx(0.75).epsilon(1e-12));
  CHECK(y.values()[1] == doctest::Approx(0.5).epsilon(1e-12));
  CHECK(y.values()[3] == doctest::Approx(0.5).epsilon(1e-12));
}

TEST_CASE("softmax gradient matches finite differences") {
  RngState r(9);
  std::vector<p3d::Parameter<double>> params;
  params.push_back({"x", rand_t<double>({3, 5}, r, true, -2.0, 2.0)});
  auto w = rand_t<double>({3, 5}, r);  // fixed projection so the loss is not constant
  auto loss = [&] { return p3d::sum_all(p3d::mul(p3d::softmax(params[0].tensor, -1), w)); };
  auto rep = p3d::grad_check<double>(loss, params, 1e-6, 1e-6, 50, RngState(4));
  CHECK(rep.passed);
}

TEST_CASE("layer_norm normalizes rows and matches a direct computation") {
  RngState r(10);
  auto x = rand_t<double>({4, 8}, r, false, -5.0, 5.0);
  auto gain = Tensor<double>::filled({8}, 1.0);
  auto bias = Tensor<double>::zeros({8});
  auto y = p3d::layer_norm(x, gain, bias);
  for (Index row = 0; row < 4; ++row) {
    double mu = 0, var = 0;
    for (Index j = 0; j < 8; ++j) mu += x.values()[row * 8 + j];
    mu /= 8;
    for (Index j = 0; j < 8; ++j) {
      const double c = x.values()[row * 8 + j] - mu;
      var += c * c;
    }
    var /= 8;
    for (Index j = 0; j < 8; ++j) {
      const double expect = (x.values()[row * 8 + j] - mu) / std::sqrt(var + 1e-5);
      CHECK(y.values()[row * 8 + j] == doctest::Approx(expect).epsilon(1e-10));
    }
    // output moments
    double om = 0, ov = 0;
    for (Index j = 0; j < 8; ++j) om += y.values()[row * 8 + j];
    CHECK(std::abs(om / 8) < 1e-9);
    for (Index j = 0; j < 8; ++j) ov += y.values()[row * 8 + j] * y.values()[row * 8 + j];
    CHECK(ov / 8 == doctest::Approx(1.0).epsilon(1e-4));
  }
}

TEST_CASE("layer_norm on a constant row gives zeros (eps keeps it finite)") {
  auto x = Tensor<double>::filled({1, 6}, 3.25);
  auto y = p3d::layer_norm(x, Tensor<double>::filled({6}, 1.0), Tensor<double>::zeros({6}));
  for (Index i = 0; i < 6; ++i) CHECK(y.values()[i] == 0.0);
}

TEST_CASE("layer_norm gradients match finite differences") {
  RngState r(11);
  std::vector<p3d::Parameter<double>> params;
  params.push_back({"x", rand_t<double>({3, 6}, r, true, -2.0, 2.0)});
  params.push_back({"g", rand_t<double>({6}, r, true, 0.5, 1.5)});
  params.push_back({"b", rand_t<double>({6}, r, true)});
  auto w = rand_t<double>({3, 6}, r);
  auto loss = [&] {
    return p3d::sum_all(
        p3d::mul(p3d::layer_norm(params[0].tensor, params[1].tensor, params[2].tensor), w));
  };
  auto rep = p3d::grad_check<double>(loss, params, 1e-6, 1e-5, 60, RngState(5));
  CHECK(rep.passed);
}

TEST_CASE("batch_norm training step recurrence on a tiny column") {
  auto x = Tensor<double>::from_data({2, 1}, {1.0, 3.0});
  auto g = Tensor<double>::filled({1}, 1.0);
  auto b = Tensor<double>::zeros({1});
  p3d::BatchNormState<double> st(1);
  auto y = p3d::batch_norm(x, g, b, st, /*training=*/true);
  // batch mean 2, biased var 1
  CHECK(y.values()[0] == doctest::Approx(-1.0 / std::sqrt(1.0 + 1e-5)).epsilon(1e-12));
  CHECK(y.values()[1] == doctest::Approx(+1.0 / std::sqrt(1.0 + 1e-5)).epsilon(1e-12));
  // running stats: momentum 0.1, unbiased var 2
  CHECK(st.running_mean[0] == doctest::Approx(0.2).epsilon(1e-12));
  CHECK(st.running_var[0] == doctest::Approx(0.9 * 1.0 + 0.1 * 2.0).epsilon(1e-12));

  // second call continues the recurrence
  auto y2 = p3d::batch_norm(x, g, b, st, true);
  (void)y2;
  CHECK(st.running_mean[0] == doctest::Approx(0.9 * 0.2 + 0.1 * 2.0).epsilon(1e-12));
}

TEST_CASE("batch_norm eval with fresh state is the identity") {
  RngState r(12);
  auto x = rand_t<double>({5, 3}, r);
  auto g = Tensor<double>::filled({3}, 1.0);
  auto b = Tensor<double>::zeros({3});
  p3d::BatchNormState<double> st(3);
  auto y = p3d::batch_norm(x, g, b, st, /*training=*/false);
  for (Index i = 0; i < x.numel(); ++i)
    CHECK(y.values()[i] == doctest::Approx(x.values()[i]).epsilon(1e-5));
}

TEST_CASE("batch_norm guards") {
  auto g = Tensor<double>::filled({3}, 1.0);
  auto b = Tensor<double>::zeros({3});
  p3d::BatchNormState<double> st(3);
  auto one_row = Tensor<double>::zeros({1, 3});
  CHECK_THROWS_AS((void)p3d::batch_norm(one_row, g, b, st, true), std::invalid_argument);

  // update_running=false leaves the state untouched
  auto x = Tensor<double>::from_data({2, 3}, {1, 2, 3, 4, 5, 6});
  auto before_m = st.running_mean;
  auto before_v = st.running_var;
  (void)p3d::batch_norm(x, g, b, st, true, /*update_running=*/false);
  CHECK(st.running_mean == before_m);
  CHECK(st.running_var == before_v);
}

TEST_CASE("batch_norm flattens leading axes (3-D input, per-channel stats)") {
  RngState r(30);
  auto x = rand_t<double>({2, 3, 4}, r);
  auto g = Tensor<double>::filled({4}, 1.0);
  auto b = Tensor<double>::zeros({4});
  p3d::BatchNormState<double> st(4);
  auto y = p3d::batch_norm(x, g, b, st, true, false);
  // each channel of the output has zero mean over the 6 rows
  for (Index c = 0; c < 4; ++c) {
    double m = 0;
    for (Index rix = 0; rix < 6; ++rix) m += y.values()[rix * 4 + c];
    CHECK(std::abs(m / 6) < 1e-12);
  }
}

TEST_CASE("batch_norm gradients match finite differences in both modes") {
  RngState r(13);
  for (bool training : {true, false}) {
    std::vector<p3d::Parameter<double>> params;
    params.push_back({"x", rand_t<double>({4, 3}, r, true, -2.0, 2.0)});
    params.push_back({"g", rand_t<double>({3}, r, true, 0.5, 1.5)});
    params.push_back({"b", rand_t<double>({3}, r, true)});
    p3d::BatchNormState<double> st(3);
    st.running_mean = {0.1, -0.2, 0.3};
    st.running_var = {1.2, 0.8, 1.0};
    auto w = rand_t<double>({4, 3}, r);
    auto loss = [&] {
      return p3d::sum_all(p3d::mul(
          p3d::batch_norm(params[0].tensor, params[1].tensor, params[2].tensor, st, training,
                          /*update_running=*/false),
          w));
    };
    auto rep = p3d::grad_check<double>(loss, params, 1e-6, 1e-5, 60, RngState(6));
    CHECK(rep.passed);
  }
}

TEST_CASE("dropout is the identity handle when inactive") {
  RngState r(14);
  auto x = rand_t<float>({4, 4}, r);
  auto y_eval = p3d::dropout(x, 0.5, /*training=*/false, r);
  CHECK(y_eval.node() == x.node());
  auto y_p0 = p3d::dropout(x, 0.0, true, r);
  CHECK(y_p0.node() == x.node());
  CHECK_THROWS_AS((void)p3d::dropout(x, 1.0, true, r), std::invalid_argument);
}

TEST_CASE("dropout drops about p of the entries and rescales the rest") {
  RngState r(15);
  const Index n = 20000;
  auto x = Tensor<double>::filled({n}, 1.0);
  auto y = p3d::dropout(x, 0.3, true, r);
  Index zeros = 0;
  double sum = 0;
  for (Index i = 0; i < n; ++i) {
    if (y.values()[i] == 0.0)
      ++zeros;
    else
      CHECK(y.values()[i] == doctest::Approx(1.0 / 0.7).epsilon(1e-12));
    sum += y.values()[i];
  }
  CHECK(static_cast<double>(zeros) / n == doctest::Approx(0.3).epsilon(0.05));
  CHECK(sum / n == doctest::Approx(1.0).epsilon(0.02));
}

TEST_CASE("dropout backward routes grads through the same mask") {
  RngState r(16);
  auto x = Tensor<double>::filled({100}, 2.0, true);
  auto y = p3d::dropout(x, 0.4, true, r);
  p3d::sum_all(y).backward();
  for (Index i = 0; i < 100; ++i) {
    const double m = y.values()[i] / 2.0;
    CHECK(x.grad()[i] == doctest::Approx(m).epsilon(1e-12));
  }
}

TEST_CASE("slice and concat are inverse and route gradients") {
  RngState r(17);
  auto x = rand_t<double>({2, 3, 10}, r, true);
  auto a = p3d::slice_lastdim(x, 0, 4);
  auto b = p3d::slice_lastdim(x, 4, 6);
  auto back = p3d::concat_lastdim<double>({a, b});
  REQUIRE(back.shape() == x.shape());
  for (Index i = 0; i < x.numel(); ++i) CHECK(back.values()[i] == x.values()[i]);

  // grad of sum(slice) is an indicator on the sliced channels
  x.zero_grad();
  p3d::sum_all(p3d::slice_lastdim(x, 4, 6)).backward();
  for (Index row = 0; row < 6; ++row)
    for (Index j = 0; j < 10; ++j)
      CHECK(x.grad()[row * 10 + j] == ((j >= 4 && j < 10) ? 1.0 : 0.0));

  CHECK_THROWS_AS((void)p3d::slice_lastdim(x, 8, 4), std::invalid_argument);
  auto other = rand_t<double>({2, 4, 3}, r);
  CHECK_THROWS_AS((void)p3d::concat_lastdim<double>({a, other}), std::invalid_argument);
}

TEST_CASE("time_mean averages the middle axis") {
  auto x = Tensor<double>::from_data({1, 2, 2}, {1, 2, 3, 4});
  auto y = p3d::time_mean(x);
  REQUIRE(y.shape() == Shape{1, 2});
  CHECK(y.values()[0] == 2.0);
  CHECK(y.values()[1] == 3.0);
  CHECK_THROWS_AS((void)p3d::time_mean(Tensor<double>::zeros({2, 2})), std::invalid_argument);

  auto xg = Tensor<double>::from_data({1, 4, 2}, {1, 2, 3, 4, 5, 6, 7, 8}, true);
  p3d::sum_all(p3d::time_mean(xg)).backward();
  for (Index i = 0; i < 8; ++i) CHECK(xg.grad()[i] == doctest::Approx(0.25).epsilon(1e-12));
}

TEST_CASE("sum_all and mean_all") {
  auto x = Tensor<double>::from_data({2, 2}, {1, 2, 3, 4}, true);
  CHECK(p3d::sum_all(x).item() == 10.0);
  CHECK(p3d::mean_all(x).item() == 2.5);
  p3d::mean_all(x).backward();
  for (Index i = 0; i < 4; ++i) CHECK(x.grad()[i] == 0.25);
}

TEST_CASE("cross entropy on uniform logits is log(C)") {
  auto z = Tensor<double>::zeros({1, 4});
  auto loss = p3d::cross_entropy_with_logits(z, {0});
  CHECK(loss.item() == doctest::Approx(std::log(4.0)).epsilon(1e-12));
}

TEST_CASE("cross entropy stays finite for extreme logits") {
  auto z = Tensor<double>::from_data({2, 2}, {1000.0, 0.0, 1000.0, 0.0});
  auto l_good = p3d::cross_entropy_with_logits(z, {0, 0});
  CHECK(std::isfinite(l_good.item()));
  CHECK(l_good.item() == doctest::Approx(0.0).epsilon(1e-9));
  auto l_bad = p3d::cross_entropy_with_logits(z, {1, 1});
  CHECK(l_bad.item() == doctest::Approx(1000.0).epsilon(1e-9));
}

TEST_CASE("cross entropy matches a naive reference and its gradient is softmax minus onehot") {
  RngState r(18);
  const Index B = 5, C = 7;
  auto z = rand_t<double>({B, C}, r, true, -3.0, 3.0);
  std::vector<int> labels;
  for (Index b = 0; b < B; ++b) labels.push_back(static_cast<int>(r.uniform_int(C)));

  double ref = 0;
  for (Index b = 0; b < B; ++b) {
    double denom = 0;
    for (Index c = 0; c < C; ++c) denom += std::exp(z.values()[b * C + c]);
    ref += std::log(denom) - z.values()[b * C + labels[static_cast<size_t>(b)]];
  }
  ref /= B;
  auto loss = p3d::cross_entropy_with_logits(z, labels);
  CHECK(loss.item() == doctest::Approx(ref).epsilon(1e-12));

  loss.backward();
  for (Index b = 0; b < B; ++b) {
    double denom = 0;
    for (Index c = 0; c < C; ++c) denom += std::exp(z.values()[b * C + c]);
    double row_sum = 0;
    for (Index c = 0; c < C; ++c) {
      const double p = std::exp(z.values()[b * C + c]) / denom;
      const double expect = (p - (labels[static_cast<size_t>(b)] == c ? 1.0 : 0.0)) / B;
      CHECK(z.grad()[b * C + c] == doctest::Approx(expect).epsilon(1e-9));
      row_sum += z.grad()[b * C + c];
    }
    CHECK(std::abs(row_sum) < 1e-12);
  }

  CHECK_THROWS_AS((void)p3d::cross_entropy_with_logits(z, {0, 1, 2}), std::invalid_argument);
  CHECK_THROWS_AS((void)p3d::cross_entropy_with_logits(z, {0, 1, 2, 3, 99}),
                  std::invalid_argument);
}

namespace {

// plain-loop reference attention, no dropout
std::vector<double> naive_attention(const std::vector<double>& x, const std::vector<double>& wq,
                                    const std::vector<double>& bq, const std::vector<double>& wk,
                                    const std::vector<double>& bk, const std::vector<double>& wv,
                                    const std::vector<double>& bv, const std::vector<double>& wo,
                                    const std::vector<double>& bo, Index B, Index T, Index d,
                                    Index heads) {
  const Index dh = d / heads;
  auto lin = [&](const std::vector<double>& w, const std::vector<double>& bias) {
    std::vector<double> y(static_cast<size_t>(B * T * d), 0.0);
    for (Index b = 0; b < B; ++b)
      for (Index t = 0; t < T; ++t)
        for (Index n = 0; n < d; ++n) {
          double s = bias[static_cast<size_t>(n)];
          for (Index k = 0; k < d; ++k)
            s += x[static_cast<size_t>((b * T + t) * d + k)] * w[static_cast<size_t>(k * d + n)];
          y[static_cast<size_t>((b * T + t) * d + n)] = s;
        }
    return y;
  };
  auto q = lin(wq, bq), k = lin(wk, bk), v = lin(wv, bv);
  std::vector<double> ctx(static_cast<size_t>(B * T * d), 0.0);
  for (Index b = 0; b < B; ++b)
    for (Index h = 0; h < heads; ++h)
      for (Index t = 0; t < T; ++t) {
        std::vector<double> s(static_cast<size_t>(T));
        double mx = -1e300;
        for (Index u = 0; u < T; ++u) {
          double dot = 0;
          for (Index j = 0; j < dh; ++j)
            dot += q[static_cast<size_t>((b * T + t) * d + h * dh + j)] *
                   k[static_cast<size_t>((b * T + u) * d + h * dh + j)];
          s[static_cast<size_t>(u)] = dot / std::sqrt(static_cast<double>(dh));
          mx = std::max(mx, s[static_cast<size_t>(u)]);
        }
        double denom = 0;
        for (Index u = 0; u < T; ++u) {
          s[static_cast<size_t>(u)] = std::exp(s[static_cast<size_t>(u)] - mx);
          denom += s[static_cast<size_t>(u)];
        }
        for (Index u = 0; u < T; ++u)
          for (Index j = 0; j < dh; ++j)
            ctx[static_cast<size_t>((b * T + t) * d + h * dh + j)] +=
                s[static_cast<size_t>(u)] / denom *
                v[static_cast<size_t>((b * T + u) * d + h * dh + j)];
      }
  std::vector<double> out(static_cast<size_t>(B * T * d), 0.0);
  for (Index b = 0; b < B; ++b)
    for (Index t = 0; t < T; ++t)
      for (Index n = 0; n < d; ++n) {
        double s = bo[static_cast<size_t>(n)];
        for (Index kk = 0; kk < d; ++kk)
          s += ctx[static_cast<size_t>((b * T + t) * d + kk)] * wo[static_cast<size_t>(kk * d + n)];
        out[static_cast<size_t>((b * T + t) * d + n)] = s;
      }
  return out;
}

p3d::AttentionWeights<double> rand_attn(Index d, RngState& r, bool rg = false) {
  p3d::AttentionWeights<double> w;
  w.wq = rand_t<double>({d, d}, r, rg);
  w.bq = rand_t<double>({d}, r, rg);
  w.wk = rand_t<double>({d, d}, r, rg);
  w.bk = rand_t<double>({d}, r, rg);
  w.wv = rand_t<double>({d, d}, r, rg);
  w.bv = rand_t<double>({d}, r, rg);
  w.wo = rand_t<double>({d, d}, r, rg);
  w.bo = rand_t<double>({d}, r, rg);
  return w;
}

}  // namespace

TEST_CASE("attention matches a naive reference implementation") {
  RngState r(19);
  const Index B = 2, T = 3, d = 4, heads = 2;
  auto x = rand_t<double>({B, T, d}, r);
  auto w = rand_attn(d, r);
  RngState drop(0);
  auto y = p3d::multi_head_self_attention(x, w, static_cast<int>(heads), 0.0, false, drop);
  REQUIRE(y.shape() == Shape{B, T, d});

  auto to_vec = [](const Tensor<double>& t) {
    return std::vector<double>(t.values().begin(), t.values().end());
  };
  auto ref = naive_attention(to_vec(x), to_vec(w.wq), to_vec(w.bq), to_vec(w.wk), to_vec(w.bk),
                             to_vec(w.wv), to_vec(w.bv), to_vec(w.wo), to_vec(w.bo), B, T, d,
                             heads);
  for (Index i = 0; i < y.numel(); ++i)
    CHECK(y.values()[i] == doctest::Approx(ref[static_cast<size_t>(i)]).epsilon(1e-10));
}

TEST_CASE("attention with zero query weights averages the values uniformly") {
  RngState r(20);
  const Index B = 1, T = 4, d = 4;
  auto x = rand_t<double>({B, T, d}, r);
  auto w = rand_attn(d, r);
  w.wq = Tensor<double>::zeros({d, d});
  w.bq = Tensor<double>::zeros({d});
  RngState drop(0);
  auto y = p3d::multi_head_self_attention(x, w, 2, 0.0, false, drop);
  // every query attends uniformly, so all time rows agree
  for (Index t = 1; t < T; ++t)
    for (Index j = 0; j < d; ++j)
      CHECK(y.values()[t * d + j] == doctest::Approx(y.values()[j]).epsilon(1e-10));
}

TEST_CASE("attention head-count guard") {
  auto x = Tensor<double>::zeros({1, 2, 4});
  RngState r(21);
  auto w = rand_attn(4, r);
  RngState drop(0);
  CHECK_THROWS_AS((void)p3d::multi_head_self_attention(x, w, 3, 0.0, false, drop),
                  std::invalid_argument);
}

TEST_CASE("attention gradients match finite differences") {
  RngState r(22);
  const Index B = 1, T = 3, d = 4;
  auto x = rand_t<double>({B, T, d}, r, true);
  auto w = rand_attn(d, r, true);
  std::vector<p3d::Parameter<double>> params = {
      {"x", x},   {"wq", w.wq}, {"bq", w.bq}, {"wk", w.wk}, {"bk", w.bk},
      {"wv", w.wv}, {"bv", w.bv}, {"wo", w.wo}, {"bo", w.bo}};
  auto loss = [&] {
    RngState drop(0);
    return p3d::mean_all(p3d::multi_head_self_attention(x, w, 2, 0.0, false, drop));
  };
  auto rep = p3d::grad_check<double>(loss, params, 1e-6, 1e-5, 20, RngState(7));
  CHECK(rep.passed);
}

TEST_CASE("attention weight dropout is reproducible from the rng state") {
  RngState r(23);
  auto x = rand_t<float>({2, 4, 8}, r);
  p3d::AttentionWeights<float> w;
  RngState wr(24);
  w.wq = rand_t<float>({8, 8}, wr);
  w.bq = rand_t<float>({8}, wr);
  w.wk = rand_t<float>({8, 8}, wr);
  w.bk = rand_t<float>({8}, wr);
  w.wv = rand_t<float>({8, 8}, wr);
  w.bv = rand_t<float>({8}, wr);
  w.wo = rand_t<float>({8, 8}, wr);
  w.bo = rand_t<float>({8}, wr);
  RngState d1(55), d2(55), d3(56);
  auto y1 = p3d::multi_head_self_attention(x, w, 2, 0.3, true, d1);
  auto y2 = p3d::multi_head_self_attention(x, w, 2, 0.3, true, d2);
  auto y3 = p3d::multi_head_self_attention(x, w, 2, 0.3, true, d3);
  bool same12 = true, same13 = true;
  for (Index i = 0; i < y1.numel(); ++i) {
    same12 = same12 && (y1.values()[i] == y2.values()[i]);
    same13 = same13 && (y1.values()[i] == y3.values()[i]);
  }
  CHECK(same12);
  CHECK(!same13);
}

TEST_CASE("backward handles reused nodes (diamond graph)") {
  auto x = Tensor<double>::from_data({2}, {3.0, -1.0}, true);
  auto y = p3d::add(x, x);           // 2x
  auto z = p3d::mul(y, y);           // 4x^2
  p3d::sum_all(z).backward();        // d/dx = 8x
  CHECK(x.grad()[0] == doctest::Approx(24.0).epsilon(1e-12));
  CHECK(x.grad()[1] == doctest::Approx(-8.0).epsilon(1e-12));
}

TEST_CASE("simple quadratic has the exact gradient") {
  auto x = Tensor<double>::from_data({1}, {3.0}, true);
  auto loss = p3d::sum_all(p3d::mul(x, x));
  loss.backward();
  CHECK(x.grad()[0] == 6.0);
}

TEST_CASE("grads accumulate across backward calls until cleared") {
  auto x = Tensor<double>::from_data({1}, {2.0}, true);
  p3d::sum_all(p3d::mul(x, x)).backward();
  p3d::sum_all(p3d::mul(x, x)).backward();
  CHECK(x.grad()[0] == 8.0);
  x.zero_grad();
  CHECK(x.grad()[0] == 0.0);
}

TEST_CASE("op outputs are immutable; leaves are writable") {
  auto x = Tensor<float>::zeros({2}, true);
  CHECK_NOTHROW((void)x.values_mut());
  auto y = p3d::scale(x, 2.0f);
  CHECK_THROWS_AS((void)y.values_mut(), std::logic_error);
  CHECK_THROWS_AS(y.set_requires_grad(false), std::logic_error);
}

TEST_CASE("backward rejects non-scalar roots and constant graphs") {
  auto x = Tensor<double>::zeros({2, 2}, true);
  CHECK_THROWS_AS(p3d::add(x, x).backward(), std::logic_error);
  auto c = Tensor<double>::zeros({2, 2});
  CHECK_THROWS_AS(p3d::sum_all(c).backward(), std::logic_error);
}

TEST_CASE("grad_check rejects nondeterministic losses") {
  auto x = Tensor<double>::from_data({1}, {1.0}, true);
  std::vector<p3d::Parameter<double>> params = {{"x", x}};
  int calls = 0;
  auto loss = [&] {
    ++calls;
    return p3d::scale(p3d::sum_all(x), static_cast<double>(calls));
  };
  CHECK_THROWS_AS((void)p3d::grad_check<double>(loss, params, 1e-6, 1e-5, 10, RngState(8)),
                  std::runtime_error);
}

TEST_CASE("assert_finite flags bad values") {
  auto x = Tensor<double>::from_data({2}, {1.0, std::nan("")});
  CHECK_THROWS_AS(x.assert_finite("probe"), std::runtime_error);
}
