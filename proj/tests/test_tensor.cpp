#include <catch2/catch_amalgamated.hpp>

#include <vector>

#include "cloudmask/rng.hpp"
#include "cloudmask/tensor.hpp"

using namespace cloudmask;

namespace {

Tensor4 random_tensor(Shape4 s, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor4 t(s);
  for (std::int64_t i = 0; i < t.size(); ++i) t[i] = rng.uniform(lo, hi);
  return t;
}

/// Direct sliding-window convolution, the independent oracle for im2col.
Tensor4 conv_oracle(const Tensor4& x, const Tensor4& w,
                    const std::vector<double>& bias, int pad, int stride) {
  const auto& xs = x.shape();
  const auto& ws = w.shape();
  const int oh = (xs.h + 2 * pad - ws.h) / stride + 1;
  const int ow = (xs.w + 2 * pad - ws.w) / stride + 1;
  Tensor4 y({xs.n, ws.n, oh, ow});
  for (int n = 0; n < xs.n; ++n)
    for (int o = 0; o < ws.n; ++o)
      for (int i = 0; i < oh; ++i)
        for (int j = 0; j < ow; ++j) {
          double acc = bias.empty() ? 0.0 : bias[static_cast<std::size_t>(o)];
          for (int c = 0; c < xs.c; ++c)
            for (int u = 0; u < ws.h; ++u)
              for (int v = 0; v < ws.w; ++v) {
                const int iy = i * stride + u - pad;
                const int ix = j * stride + v - pad;
                if (iy < 0 || iy >= xs.h || ix < 0 || ix >= xs.w) continue;
                acc += w(o, c, u, v) * x(n, c, iy, ix);
              }
          y(n, o, i, j) = acc;
        }
  return y;
}

}  // namespace

TEST_CASE("tensor creation and layout") {
  SECTION("fill constructor zero case") {
    Tensor4 t({1, 1, 2, 2}, 0.0);
    REQUIRE(t.size() == 4);
    for (std::int64_t i = 0; i < 4; ++i) CHECK(t[i] == 0.0);
  }

  SECTION("sequence constructor follows declared layout") {
    Tensor4 t({1, 1, 2, 2}, std::vector<double>{1, 2, 3, 4});
    CHECK(t(0, 0, 1, 0) == 3.0);
    CHECK(t(0, 0, 0, 1) == 2.0);
  }

  SECTION("element count matches dimension product") {
    Tensor4 t({2, 4, 33, 33}, 1.0);
    CHECK(t.size() == 2 * 4 * 33 * 33);
    CHECK(t.size() == 8712);
  }

  SECTION("layout round-trip property") {
    const Shape4 s{2, 3, 4, 5};
    std::vector<double> seq(static_cast<std::size_t>(s.count()));
    for (std::size_t i = 0; i < seq.size(); ++i) seq[i] = static_cast<double>(i);
    Tensor4 t(s, seq);
    Rng rng(7);
    for (int trial = 0; trial < 50; ++trial) {
      const int n = static_cast<int>(rng.below(s.n));
      const int c = static_cast<int>(rng.below(s.c));
      const int y = static_cast<int>(rng.below(s.h));
      const int x = static_cast<int>(rng.below(s.w));
      CHECK(t(n, c, y, x) == seq[static_cast<std::size_t>(((n * s.c + c) * s.h + y) * s.w + x)]);
    }
  }

  SECTION("rejects zero dimensions and length mismatch") {
    CHECK_THROWS_AS(Tensor4({0, 1, 2, 2}), ShapeError);
    CHECK_THROWS_AS(Tensor4({1, 1, 2, 0}), ShapeError);
    CHECK_THROWS_AS(Tensor4({1, 1, 2, 2}, std::vector<double>{1, 2, 3}), ShapeError);
  }
}

TEST_CASE("elementwise operations") {
  Rng rng(11);
  const Tensor4 x = random_tensor({2, 3, 4, 4}, rng);

  SECTION("additive inverse") {
    const Tensor4 z = add(x, scale(x, -1.0));
    for (std::int64_t i = 0; i < z.size(); ++i) CHECK(z[i] == 0.0);
  }

  SECTION("multiplicative identity") {
    const Tensor4 ones(x.shape(), 1.0);
    const Tensor4 y = mul(x, ones);
    for (std::int64_t i = 0; i < y.size(); ++i) CHECK(y[i] == x[i]);
  }

  SECTION("add matches per-element loop oracle") {
    const Tensor4 b = random_tensor({2, 3, 4, 4}, rng);
    const Tensor4 y = add(x, b);
    for (int n = 0; n < 2; ++n)
      for (int c = 0; c < 3; ++c)
        for (int i = 0; i < 4; ++i)
          for (int j = 0; j < 4; ++j)
            CHECK(y(n, c, i, j) == x(n, c, i, j) + b(n, c, i, j));
  }

  SECTION("inputs unmodified (purity)") {
    const Tensor4 before = x;
    const Tensor4 b = random_tensor({2, 3, 4, 4}, rng);
    (void)add(x, b);
    (void)mul(x, b);
    (void)map(x, [](double v) { return v * 2; });
    for (std::int64_t i = 0; i < x.size(); ++i) CHECK(x[i] == before[i]);
  }

  SECTION("shape mismatch rejected") {
    const Tensor4 b({2, 3, 4, 5});
    CHECK_THROWS_AS(add(x, b), ShapeError);
    CHECK_THROWS_AS(mul(x, b), ShapeError);
  }
}

TEST_CASE("im2col") {
  SECTION("whole-image receptive field is one flattened column") {
    Rng rng(3);
    const Tensor4 x = random_tensor({1, 1, 3, 3}, rng);
    const Matrix m = im2col(x, 3, 3, 0, 1);
    REQUIRE(m.rows() == 9);
    REQUIRE(m.cols() == 1);
    for (std::int64_t r = 0; r < 9; ++r) CHECK(m.at(r, 0) == x[r]);
  }

  SECTION("1x1 kernel unrolls to identity") {
    Rng rng(4);
    const Tensor4 x = random_tensor({1, 1, 3, 3}, rng);
    const Matrix m = im2col(x, 1, 1, 0, 1);
    REQUIRE(m.rows() == 1);
    REQUIRE(m.cols() == 9);
    for (std::int64_t j = 0; j < 9; ++j) CHECK(m.at(0, j) == x[j]);
  }

  SECTION("columns hold receptive fields, padding reads zero") {
    Rng rng(5);
    const Tensor4 x = random_tensor({1, 2, 4, 4}, rng);
    const Matrix m = im2col(x, 3, 3, 1, 1);
    REQUIRE(m.rows() == 2 * 3 * 3);
    REQUIRE(m.cols() == 16);
    for (int oy = 0; oy < 4; ++oy)
      for (int ox = 0; ox < 4; ++ox) {
        std::int64_t r = 0;
        for (int c = 0; c < 2; ++c)
          for (int u = 0; u < 3; ++u)
            for (int v = 0; v < 3; ++v, ++r) {
              const int iy = oy + u - 1;
              const int ix = ox + v - 1;
              const double want = (iy < 0 || iy >= 4 || ix < 0 || ix >= 4)
                                      ? 0.0
                                      : x(0, c, iy, ix);
              CHECK(m.at(r, oy * 4 + ox) == want);
            }
      }
  }

  SECTION("im2col + matmul equals direct convolution") {
    Rng rng(6);
    for (int trial = 0; trial < 5; ++trial) {
      const Tensor4 x = random_tensor({2, 3, 5, 6}, rng);
      const Tensor4 w = random_tensor({4, 3, 3, 3}, rng);
      const Matrix cols = im2col(x, 3, 3, 1, 1);
      Matrix wf(4, 27);
      for (std::int64_t i = 0; i < w.size(); ++i) wf.data()[i] = w[i];
      const Matrix prod = matmul(wf, cols);
      const Tensor4 want = conv_oracle(x, w, {}, 1, 1);
      // prod column j corresponds to (sample, oy, ox) in sample-major order
      for (int n = 0; n < 2; ++n)
        for (int o = 0; o < 4; ++o)
          for (int i = 0; i < 5; ++i)
            for (int j = 0; j < 6; ++j) {
              const std::int64_t col = (static_cast<std::int64_t>(n) * 5 + i) * 6 + j;
              CHECK(std::abs(prod.at(o, col) - want(n, o, i, j)) < 1e-12);
            }
    }
  }

  SECTION("non-integral output is rejected") {
    const Tensor4 x({1, 1, 5, 5});
    CHECK_THROWS_AS(im2col(x, 2, 2, 0, 2), ShapeError);
  }
}

TEST_CASE("matrix multiply kernels agree with naive loops") {
  Rng rng(9);
  for (int trial = 0; trial < 8; ++trial) {
    const int m = 1 + static_cast<int>(rng.below(13));
    const int k = 1 + static_cast<int>(rng.below(37));
    const int n = 1 + static_cast<int>(rng.below(41));
    std::vector<double> a(static_cast<std::size_t>(m * k)),
        b(static_cast<std::size_t>(k * n));
    for (auto& v : a) v = rng.uniform(-1, 1);
    for (auto& v : b) v = rng.uniform(-1, 1);

    std::vector<double> want(static_cast<std::size_t>(m * n), 0.0);
    for (int i = 0; i < m; ++i)
      for (int kk = 0; kk < k; ++kk)
        for (int j = 0; j < n; ++j)
          want[static_cast<std::size_t>(i * n + j)] +=
              a[static_cast<std::size_t>(i * k + kk)] * b[static_cast<std::size_t>(kk * n + j)];

    std::vector<double> got(static_cast<std::size_t>(m * n));
    detail::gemm_nn(a.data(), b.data(), got.data(), m, k, n);
    for (std::size_t i = 0; i < got.size(); ++i)
      CHECK(std::abs(got[i] - want[i]) < 1e-12);

    // A * B^T with B stored (n x k)
    std::vector<double> bt(static_cast<std::size_t>(n * k));
    for (int j = 0; j < n; ++j)
      for (int kk = 0; kk < k; ++kk)
        bt[static_cast<std::size_t>(j * k + kk)] = b[static_cast<std::size_t>(kk * n + j)];
    detail::gemm_abt(a.data(), bt.data(), got.data(), m, k, n);
    for (std::size_t i = 0; i < got.size(); ++i)
      CHECK(std::abs(got[i] - want[i]) < 1e-12);

    // A^T * B with A stored (k x m)
    std::vector<double> at(static_cast<std::size_t>(k * m));
    for (int i = 0; i < m; ++i)
      for (int kk = 0; kk < k; ++kk)
        at[static_cast<std::size_t>(kk * m + i)] = a[static_cast<std::size_t>(i * k + kk)];
    detail::gemm_atb(at.data(), b.data(), got.data(), k, m, n);
    for (std::size_t i = 0; i < got.size(); ++i)
      CHECK(std::abs(got[i] - want[i]) < 1e-12);
  }
}
