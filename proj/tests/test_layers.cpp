#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "cloudmask/gradcheck.hpp"
#include "cloudmask/layers.hpp"
#include "cloudmask/rng.hpp"

using namespace cloudmask;

namespace {

Tensor4 random_tensor(Shape4 s, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor4 t(s);
  for (std::int64_t i = 0; i < t.size(); ++i) t[i] = rng.uniform(lo, hi);
  return t;
}

LayerParams conv_params(Tensor4 w, Tensor4 b, int pad) {
  LayerParams p;
  p.kind = LayerKind::conv2d;
  p.weights = std::move(w);
  p.bias = std::move(b);
  p.pad = pad;
  return p;
}

}  // namespace

TEST_CASE("conv2d forward") {
  SECTION("1x1 identity kernel reproduces the input") {
    const Tensor4 x({1, 1, 3, 3}, 1.0);
    auto p = conv_params(Tensor4({1, 1, 1, 1}, std::vector<double>{1.0}),
                         Tensor4({1, 1, 1, 1}, 0.0), 0);
    const Tensor4 y = conv2d_forward(p, x);
    REQUIRE(y.shape() == x.shape());
    for (std::int64_t i = 0; i < y.size(); ++i) CHECK(y[i] == x[i]);
  }

  SECTION("zero kernel gives zero output") {
    Rng rng(2);
    const Tensor4 x = random_tensor({2, 3, 6, 6}, rng);
    auto p = conv_params(Tensor4({4, 3, 3, 3}, 0.0), Tensor4({1, 4, 1, 1}, 0.0), 1);
    const Tensor4 y = conv2d_forward(p, x);
    for (std::int64_t i = 0; i < y.size(); ++i) CHECK(y[i] == 0.0);
  }

  SECTION("matches six-nested-loop oracle") {
    Rng rng(3);
    const Tensor4 x = random_tensor({1, 4, 5, 5}, rng);
    const Tensor4 w = random_tensor({3, 4, 3, 3}, rng);
    const Tensor4 b = random_tensor({1, 3, 1, 1}, rng);
    auto p = conv_params(w, b, 1);
    const Tensor4 y = conv2d_forward(p, x);
    REQUIRE(y.shape() == Shape4{1, 3, 5, 5});
    for (int o = 0; o < 3; ++o)
      for (int i = 0; i < 5; ++i)
        for (int j = 0; j < 5; ++j) {
          double acc = b[o];
          for (int c = 0; c < 4; ++c)
            for (int u = 0; u < 3; ++u)
              for (int v = 0; v < 3; ++v) {
                const int iy = i + u - 1, ix = j + v - 1;
                if (iy < 0 || iy >= 5 || ix < 0 || ix >= 5) continue;
                acc += w(o, c, u, v) * x(0, c, iy, ix);
              }
          CHECK(std::abs(y(0, o, i, j) - acc) < 1e-12);
        }
  }

  SECTION("channel mismatch rejected") {
    const Tensor4 x({1, 2, 5, 5});
    auto p = conv_params(Tensor4({3, 4, 3, 3}), Tensor4({1, 3, 1, 1}), 1);
    CHECK_THROWS_AS(conv2d_forward(p, x), ShapeError);
  }
}

TEST_CASE("batchnorm2d forward") {
  SECTION("training mode normalizes each channel") {
    Rng rng(5);
    LayerParams p;
    p.kind = LayerKind::batchnorm2d;
    p.gamma = Tensor4({1, 3, 1, 1}, 1.0);
    p.beta = Tensor4({1, 3, 1, 1}, 0.0);
    p.running_mean = Tensor4({1, 3, 1, 1}, 0.0);
    p.running_var = Tensor4({1, 3, 1, 1}, 1.0);
    // wide spread: the epsilon in the denominator shifts output variance by
    // eps/var, which must stay below the tolerance being asserted
    const Tensor4 x = random_tensor({4, 3, 6, 6}, rng, -60.0, 60.0);
    const Tensor4 y = batchnorm2d_forward(p, x, true);

    const std::int64_t per_chan = 4 * 6 * 6;
    for (int c = 0; c < 3; ++c) {
      double mean = 0.0, var = 0.0;
      for (int n = 0; n < 4; ++n)
        for (int i = 0; i < 6; ++i)
          for (int j = 0; j < 6; ++j) mean += y(n, c, i, j);
      mean /= static_cast<double>(per_chan);
      for (int n = 0; n < 4; ++n)
        for (int i = 0; i < 6; ++i)
          for (int j = 0; j < 6; ++j) {
            const double d = y(n, c, i, j) - mean;
            var += d * d;
          }
      var /= static_cast<double>(per_chan);
      CHECK(std::abs(mean) < 1e-8);
      CHECK(std::abs(var - 1.0) < 1e-6);
    }
  }

  SECTION("constant channel with beta=5 gives 5 everywhere") {
    LayerParams p;
    p.kind = LayerKind::batchnorm2d;
    p.gamma = Tensor4({1, 1, 1, 1}, 1.0);
    p.beta = Tensor4({1, 1, 1, 1}, 5.0);
    p.running_mean = Tensor4({1, 1, 1, 1}, 0.0);
    p.running_var = Tensor4({1, 1, 1, 1}, 1.0);
    const Tensor4 x({2, 1, 4, 4}, 3.25);
    const Tensor4 y = batchnorm2d_forward(p, x, true);
    for (std::int64_t i = 0; i < y.size(); ++i)
      CHECK(std::abs(y[i] - 5.0) < 1e-9);
  }

  SECTION("inference uses running statistics") {
    LayerParams p;
    p.kind = LayerKind::batchnorm2d;
    p.gamma = Tensor4({1, 1, 1, 1}, 2.0);
    p.beta = Tensor4({1, 1, 1, 1}, 1.0);
    p.running_mean = Tensor4({1, 1, 1, 1}, 4.0);
    p.running_var = Tensor4({1, 1, 1, 1}, 9.0);
    const Tensor4 x({1, 1, 2, 2}, 7.0);
    const Tensor4 y = batchnorm2d_forward(p, x, false);
    CHECK(std::abs(y[0] - (2.0 * 3.0 / std::sqrt(9.0 + 1e-5) + 1.0)) < 1e-12);
  }

  SECTION("batch of one pixel rejected in training mode") {
    LayerParams p;
    p.kind = LayerKind::batchnorm2d;
    p.gamma = Tensor4({1, 1, 1, 1}, 1.0);
    p.beta = Tensor4({1, 1, 1, 1}, 0.0);
    p.running_mean = Tensor4({1, 1, 1, 1}, 0.0);
    p.running_var = Tensor4({1, 1, 1, 1}, 1.0);
    const Tensor4 x({1, 1, 1, 1}, 2.0);
    CHECK_THROWS_AS(batchnorm2d_forward(p, x, true), ShapeError);
  }
}

TEST_CASE("maxpool2x2") {
  SECTION("max of an enumerated window") {
    const Tensor4 x({1, 1, 2, 2}, std::vector<double>{1, 2, 3, 4});
    const Tensor4 y = maxpool2x2_forward(x);
    REQUIRE(y.size() == 1);
    CHECK(y[0] == 4.0);
  }

  SECTION("constant input floors odd extents") {
    const Tensor4 x({1, 2, 33, 33}, 0.5);
    const Tensor4 y = maxpool2x2_forward(x);
    CHECK(y.shape() == Shape4{1, 2, 16, 16});
    for (std::int64_t i = 0; i < y.size(); ++i) CHECK(y[i] == 0.5);
  }

  SECTION("backward routes gradient to the argmax") {
    const Tensor4 x({1, 1, 2, 2}, std::vector<double>{1, 2, 3, 4});
    LayerCache cache;
    (void)maxpool2x2_forward(x, &cache);
    const Tensor4 g({1, 1, 1, 1}, 1.0);
    const Tensor4 dx = maxpool2x2_backward(cache, g);
    CHECK(dx[0] == 0.0);
    CHECK(dx[1] == 0.0);
    CHECK(dx[2] == 0.0);
    CHECK(dx[3] == 1.0);
  }

  SECTION("backward conserves mass") {
    Rng rng(7);
    const Tensor4 x = random_tensor({2, 3, 6, 8}, rng);
    LayerCache cache;
    const Tensor4 y = maxpool2x2_forward(x, &cache);
    const Tensor4 g = random_tensor(y.shape(), rng);
    const Tensor4 dx = maxpool2x2_backward(cache, g);
    // every output gradient lands exactly once on its argmax, untouched
    std::int64_t routed = 0;
    for (std::int64_t i = 0; i < g.size(); ++i)
      CHECK(dx[cache.argmax[static_cast<std::size_t>(i)]] == g[i]);
    for (std::int64_t i = 0; i < dx.size(); ++i)
      if (dx[i] != 0.0) ++routed;
    CHECK(routed <= g.size());
  }

  SECTION("tiny spatial extent rejected") {
    const Tensor4 x({1, 1, 1, 4});
    CHECK_THROWS_AS(maxpool2x2_forward(x), ShapeError);
  }
}

TEST_CASE("dense layer") {
  SECTION("identity weights, zero bias") {
    LayerParams p;
    p.kind = LayerKind::dense;
    p.weights = Tensor4({3, 3, 1, 1}, 0.0);
    for (int i = 0; i < 3; ++i) p.weights(i, i, 0, 0) = 1.0;
    p.bias = Tensor4({1, 3, 1, 1}, 0.0);
    Rng rng(8);
    const Tensor4 x = random_tensor({2, 3, 1, 1}, rng);
    const Tensor4 y = dense_forward(p, x);
    for (std::int64_t i = 0; i < y.size(); ++i) CHECK(y[i] == x[i]);
  }

  SECTION("zero input broadcasts the bias") {
    LayerParams p;
    p.kind = LayerKind::dense;
    p.weights = Tensor4({4, 5, 1, 1}, 0.3);
    p.bias = Tensor4({1, 4, 1, 1}, std::vector<double>{1, 2, 3, 4});
    const Tensor4 x({2, 5, 1, 1}, 0.0);
    const Tensor4 y = dense_forward(p, x);
    for (int n = 0; n < 2; ++n)
      for (int o = 0; o < 4; ++o) CHECK(y(n, o, 0, 0) == p.bias[o]);
  }

  SECTION("matches dot-product loop oracle") {
    Rng rng(9);
    LayerParams p;
    p.kind = LayerKind::dense;
    p.weights = random_tensor({4, 5, 1, 1}, rng);
    p.bias = random_tensor({1, 4, 1, 1}, rng);
    const Tensor4 x = random_tensor({3, 5, 1, 1}, rng);
    const Tensor4 y = dense_forward(p, x);
    for (int n = 0; n < 3; ++n)
      for (int o = 0; o < 4; ++o) {
        double acc = p.bias[o];
        for (int i = 0; i < 5; ++i) acc += p.weights(o, i, 0, 0) * x(n, i, 0, 0);
        CHECK(std::abs(y(n, o, 0, 0) - acc) < 1e-12);
      }
  }

  SECTION("dimension mismatch rejected") {
    LayerParams p;
    p.kind = LayerKind::dense;
    p.weights = Tensor4({4, 5, 1, 1});
    p.bias = Tensor4({1, 4, 1, 1});
    CHECK_THROWS_AS(dense_forward(p, Tensor4({2, 6, 1, 1})), ShapeError);
  }
}

TEST_CASE("activations") {
  SECTION("sigmoid symmetry and relu definition") {
    const Tensor4 x({1, 3, 1, 1}, std::vector<double>{0.0, -3.0, 3.0});
    const Tensor4 s = sigmoid_forward(x);
    CHECK(s[0] == 0.5);
    const Tensor4 r = relu_forward(x);
    CHECK(r[1] == 0.0);
    CHECK(r[2] == 3.0);
  }

  SECTION("sigmoid output stays inside (0,1)") {
    const Tensor4 x({1, 2, 1, 1}, std::vector<double>{-500.0, 500.0});
    const Tensor4 s = sigmoid_forward(x);
    CHECK(s[0] > 0.0);
    CHECK(s[1] < 1.0);
  }
}

TEST_CASE("dropout") {
  Rng rng(10);
  const Tensor4 x = random_tensor({2, 3, 5, 5}, rng);

  SECTION("p=0 in training passes through with an all-ones mask") {
    LayerCache cache;
    const Tensor4 y = dropout_forward(x, 0.0, true, nullptr, &cache);
    for (std::int64_t i = 0; i < y.size(); ++i) {
      CHECK(y[i] == x[i]);
      CHECK(cache.mask[i] == 1.0);
    }
  }

  SECTION("inference ignores the probability") {
    const Tensor4 y = dropout_forward(x, 0.7, false, nullptr);
    for (std::int64_t i = 0; i < y.size(); ++i) CHECK(y[i] == x[i]);
  }

  SECTION("survivor fraction and expectation at p=0.25") {
    Rng drng(123);
    const Tensor4 big({1, 1, 1000, 1000}, 1.0);
    LayerCache cache;
    const Tensor4 y = dropout_forward(big, 0.25, true, &drng, &cache);
    std::int64_t survivors = 0;
    double mean = 0.0;
    for (std::int64_t i = 0; i < y.size(); ++i) {
      if (cache.mask[i] != 0.0) ++survivors;
      mean += y[i];
    }
    mean /= static_cast<double>(y.size());
    const double frac = static_cast<double>(survivors) / static_cast<double>(y.size());
    CHECK(std::abs(frac - 0.75) < 0.005);
    CHECK(std::abs(mean - 1.0) < 0.01);  // inverted scaling preserves E[y]
  }

  SECTION("invalid probability rejected") {
    CHECK_THROWS_AS(dropout_forward(x, 1.0, true, &rng), ConfigError);
  }
}

TEST_CASE("layer backward zero propagation") {
  // zero grad_out must give zero grad_in and zero parameter gradients
  Rng rng(21);
  for (LayerKind kind : {LayerKind::conv2d, LayerKind::batchnorm2d,
                         LayerKind::relu, LayerKind::maxpool2x2,
                         LayerKind::dense, LayerKind::dropout,
                         LayerKind::sigmoid, LayerKind::flatten}) {
    LayerParams p;
    p.kind = kind;
    Tensor4 x;
    switch (kind) {
      case LayerKind::conv2d:
        p.weights = random_tensor({3, 2, 3, 3}, rng);
        p.bias = random_tensor({1, 3, 1, 1}, rng);
        p.pad = 1;
        x = random_tensor({2, 2, 4, 4}, rng);
        break;
      case LayerKind::batchnorm2d:
        p.gamma = Tensor4({1, 2, 1, 1}, 1.0);
        p.beta = Tensor4({1, 2, 1, 1}, 0.0);
        p.running_mean = Tensor4({1, 2, 1, 1}, 0.0);
        p.running_var = Tensor4({1, 2, 1, 1}, 1.0);
        x = random_tensor({2, 2, 4, 4}, rng);
        break;
      case LayerKind::dense:
        p.weights = random_tensor({3, 4, 1, 1}, rng);
        p.bias = random_tensor({1, 3, 1, 1}, rng);
        x = random_tensor({2, 4, 1, 1}, rng);
        break;
      case LayerKind::dropout:
        p.drop_probability = 0.4;
        x = random_tensor({2, 2, 4, 4}, rng);
        break;
      default:
        x = random_tensor({2, 2, 4, 4}, rng);
        break;
    }
    LayerCache cache;
    Rng mask_rng(33);
    const Tensor4 y = layer_forward(p, x, true, &mask_rng, &cache);
    LayerGrads grads;
    const Tensor4 dx = layer_backward(p, cache, Tensor4(y.shape(), 0.0), grads);
    for (std::int64_t i = 0; i < dx.size(); ++i) {
      INFO("layer " << to_string(kind));
      CHECK(dx[i] == 0.0);
    }
    for (const Tensor4* g : {&grads.weights, &grads.bias, &grads.gamma, &grads.beta})
      for (std::int64_t i = 0; i < g->size(); ++i) CHECK((*g)[i] == 0.0);
  }
}

TEST_CASE("gradient checks: every layer kind, ten seeds") {
  for (LayerKind kind : {LayerKind::conv2d, LayerKind::batchnorm2d,
                         LayerKind::relu, LayerKind::maxpool2x2,
                         LayerKind::dense, LayerKind::dropout,
                         LayerKind::sigmoid, LayerKind::flatten}) {
    double worst = 0.0;
    for (std::uint64_t seed = 100; seed < 110; ++seed)
      worst = std::max(worst, check_layer_gradients(kind, seed));
    INFO("layer " << to_string(kind) << " max rel err " << worst);
    CHECK(worst < 1e-4);
  }
}

TEST_CASE("missing cache rejected") {
  LayerParams p;
  p.kind = LayerKind::conv2d;
  p.weights = Tensor4({1, 1, 3, 3});
  p.bias = Tensor4({1, 1, 1, 1});
  p.pad = 1;
  LayerCache empty;
  LayerGrads g;
  CHECK_THROWS_AS(layer_backward(p, empty, Tensor4({1, 1, 4, 4}), g), ShapeError);
}
