#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "cloudmask/layers.hpp"
#include "cloudmask/model.hpp"
#include "cloudmask/train.hpp"

namespace cloudmask {

/// Relative error with a small floor so finite-difference noise on
/// near-zero gradients does not dominate.
inline double grad_rel_error(double analytic, double numeric) {
  const double denom =
      std::max({std::abs(analytic), std::abs(numeric), 1e-2});
  return std::abs(analytic - numeric) / denom;
}

inline constexpr double kFdStep = 1e-5;

namespace detail {

/// Central finite differences of `eval` over every element of `t`, compared
/// against the matching analytic gradient. Returns the worst relative error.
inline double fd_compare(Tensor4& t, const Tensor4& analytic,
                         const std::function<double()>& eval) {
  double worst = 0.0;
  for (std::int64_t i = 0; i < t.size(); ++i) {
    const double saved = t[i];
    t[i] = saved + kFdStep;
    const double up = eval();
    t[i] = saved - kFdStep;
    const double down = eval();
    t[i] = saved;
    const double numeric = (up - down) / (2.0 * kFdStep);
    worst = std::max(worst, grad_rel_error(analytic[i], numeric));
  }
  return worst;
}

inline Tensor4 random_uniform(Shape4 s, Rng& rng, double lo, double hi) {
  Tensor4 t(s);
  for (std::int64_t i = 0; i < t.size(); ++i) t[i] = rng.uniform(lo, hi);
  return t;
}

/// Uniform values kept away from zero; relu and maxpool gradients have kinks
/// there that finite differences cannot straddle.
inline Tensor4 random_away_from_zero(Shape4 s, Rng& rng, double margin) {
  Tensor4 t(s);
  for (std::int64_t i = 0; i < t.size(); ++i) {
    const double mag = rng.uniform(margin, 1.0);
    t[i] = rng.uniform() < 0.5 ? -mag : mag;
  }
  return t;
}

}  // namespace detail

/// Checks one layer kind: the loss is a fixed random weighting of the layer
/// output, the analytic gradients come from layer_backward, and every input
/// and parameter element is verified by central finite differences. Dropout
/// masks are pinned by re-seeding the rng identically for every evaluation.
inline double check_layer_gradients(LayerKind kind, std::uint64_t seed) {
  Rng setup(seed);
  const std::uint64_t mask_seed = seed ^ 0x9e3779b97f4a7c15ULL;

  LayerParams params;
  params.kind = kind;
  Tensor4 x;
  switch (kind) {
    case LayerKind::conv2d:
      params.weights = detail::random_uniform({3, 4, 3, 3}, setup, -0.5, 0.5);
      params.bias = detail::random_uniform({1, 3, 1, 1}, setup, -0.5, 0.5);
      params.pad = 1;
      x = detail::random_uniform({2, 4, 5, 5}, setup, -1.0, 1.0);
      break;
    case LayerKind::batchnorm2d:
      params.gamma = detail::random_uniform({1, 3, 1, 1}, setup, 0.5, 1.5);
      params.beta = detail::random_uniform({1, 3, 1, 1}, setup, -0.5, 0.5);
      params.running_mean = Tensor4({1, 3, 1, 1}, 0.0);
      params.running_var = Tensor4({1, 3, 1, 1}, 1.0);
      x = detail::random_uniform({4, 3, 6, 6}, setup, -1.0, 1.0);
      break;
    case LayerKind::dense:
      params.weights = detail::random_uniform({4, 5, 1, 1}, setup, -0.7, 0.7);
      params.bias = detail::random_uniform({1, 4, 1, 1}, setup, -0.5, 0.5);
      x = detail::random_uniform({3, 5, 1, 1}, setup, -1.0, 1.0);
      break;
    case LayerKind::relu:
      x = detail::random_away_from_zero({2, 3, 4, 4}, setup, 0.05);
      break;
    case LayerKind::maxpool2x2:
      x = detail::random_uniform({2, 3, 5, 6}, setup, -1.0, 1.0);
      break;
    case LayerKind::dropout:
      params.drop_probability = 0.35;
      x = detail::random_uniform({2, 3, 4, 4}, setup, -1.0, 1.0);
      break;
    case LayerKind::sigmoid:
      x = detail::random_uniform({2, 3, 4, 4}, setup, -2.0, 2.0);
      break;
    case LayerKind::flatten:
      x = detail::random_uniform({2, 3, 4, 4}, setup, -1.0, 1.0);
      break;
  }

  // analytic pass
  LayerParams run = params;
  Rng arng(mask_seed);
  LayerCache cache;
  Tensor4 y = layer_forward(run, x, /*training=*/true, &arng, &cache);

  Rng wrng(seed + 17);
  Tensor4 wout = detail::random_uniform(y.shape(), wrng, -1.0, 1.0);
  LayerGrads grads;
  const Tensor4 grad_in = layer_backward(params, cache, wout, grads);

  auto eval = [&]() {
    LayerParams copy = params;
    Rng r(mask_seed);
    Tensor4 out = layer_forward(copy, x, true, &r, nullptr);
    double loss = 0.0;
    for (std::int64_t i = 0; i < out.size(); ++i) loss += wout[i] * out[i];
    return loss;
  };

  double worst = detail::fd_compare(x, grad_in, eval);
  if (!grads.weights.empty())
    worst = std::max(worst, detail::fd_compare(params.weights, grads.weights, eval));
  if (!grads.bias.empty())
    worst = std::max(worst, detail::fd_compare(params.bias, grads.bias, eval));
  if (!grads.gamma.empty())
    worst = std::max(worst, detail::fd_compare(params.gamma, grads.gamma, eval));
  if (!grads.beta.empty())
    worst = std::max(worst, detail::fd_compare(params.beta, grads.beta, eval));
  return worst;
}

/// Full-network check on a narrow cloudnet17 (4/4/8/8 filters, 8 hidden
/// units) over one batch of two samples: analytic loss gradients for every
/// trainable parameter against central finite differences, batchnorm and
/// dropout included.
inline double check_end_to_end(std::uint64_t seed) {
  Model model = build_cloudnet(17, OutputMode::pixel, seed, {4, 4, 8, 8}, 8);
  Rng setup(seed + 1);
  Tensor4 x = detail::random_uniform({2, 4, 17, 17}, setup, 0.0, 1.2);
  Tensor4 y({2, 1, 1, 1});
  y[0] = 1.0;
  y[1] = 0.0;
  const std::uint64_t mask_seed = seed ^ 0x517cc1b727220a95ULL;

  auto loss_eval = [&]() {
    Rng r(mask_seed);
    Tensor4 h = forward(model, x, /*training=*/true, &r, nullptr);
    return bce_loss(h, y).loss;
  };

  // analytic gradients via backprop
  Rng arng(mask_seed);
  std::vector<LayerCache> caches;
  Tensor4 h = forward(model, x, true, &arng, &caches);
  LossGrad lg = bce_loss(h, y);
  auto params = trainable_params(model);
  std::vector<Tensor4> param_grads(params.size());
  Tensor4 grad = std::move(lg.grad);
  std::size_t cursor = params.size();
  for (std::size_t li = model.layers.size(); li-- > 0;) {
    LayerGrads g;
    grad = layer_backward(model.layers[li], caches[li], grad, g);
    switch (model.layers[li].kind) {
      case LayerKind::conv2d:
      case LayerKind::dense:
        param_grads[--cursor] = std::move(g.bias);
        param_grads[--cursor] = std::move(g.weights);
        break;
      case LayerKind::batchnorm2d:
        param_grads[--cursor] = std::move(g.beta);
        param_grads[--cursor] = std::move(g.gamma);
        break;
      default:
        break;
    }
  }

  double worst = 0.0;
  for (std::size_t k = 0; k < params.size(); ++k)
    worst = std::max(worst, detail::fd_compare(*params[k], param_grads[k], loss_eval));
  return worst;
}

struct GradCheckEntry {
  std::string name;
  double max_rel_err = 0.0;
  double tolerance = 0.0;
  bool passed = false;
};

/// Runs every layer kind over `seed_count` seeds (tolerance 1e-4) plus the
/// end-to-end network check (tolerance 1e-3).
inline std::vector<GradCheckEntry> gradient_check_suite(std::uint64_t base_seed,
                                                        int seed_count = 10) {
  std::vector<GradCheckEntry> out;
  for (LayerKind kind :
       {LayerKind::conv2d, LayerKind::batchnorm2d, LayerKind::relu,
        LayerKind::maxpool2x2, LayerKind::dense, LayerKind::dropout,
        LayerKind::sigmoid, LayerKind::flatten}) {
    GradCheckEntry e;
    e.name = to_string(kind);
    e.tolerance = 1e-4;
    for (int s = 0; s < seed_count; ++s)
      e.max_rel_err = std::max(
          e.max_rel_err,
          check_layer_gradients(kind, base_seed + static_cast<std::uint64_t>(s)));
    e.passed = e.max_rel_err < e.tolerance;
    out.push_back(e);
  }
  GradCheckEntry e2e;
  e2e.name = "end_to_end";
  e2e.tolerance = 1e-3;
  e2e.max_rel_err = check_end_to_end(base_seed);
  e2e.passed = e2e.max_rel_err < e2e.tolerance;
  out.push_back(e2e);
  return out;
}

}  // namespace cloudmask
