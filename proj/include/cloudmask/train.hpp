#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include "cloudmask/errors.hpp"
#include "cloudmask/model.hpp"
#include "cloudmask/patches.hpp"
#include "cloudmask/rng.hpp"
#include "cloudmask/tensor.hpp"

namespace cloudmask {

/// Predictions are clipped to [kBceClip, 1-kBceClip] before the logs so the
/// loss stays finite for saturated outputs.
inline constexpr double kBceClip = 1e-12;

struct LossGrad {
  double loss = 0.0;
  Tensor4 grad;
};

/// Mean binary cross-entropy over every element of h, and its gradient.
/// The mean (rather than the sum) keeps the learning rate independent of
/// batch size and makes the pixel and patch9 targets share one code path.
inline LossGrad bce_loss(const Tensor4& h, const Tensor4& y) {
  detail::require_same_shape(h, y, "bce_loss");
  const double count = static_cast<double>(h.size());
  LossGrad out;
  out.grad = Tensor4(h.shape());
  double total = 0.0;
  for (std::int64_t i = 0; i < h.size(); ++i) {
    double p = h[i];
    if (p < kBceClip) p = kBceClip;
    if (p > 1.0 - kBceClip) p = 1.0 - kBceClip;
    const double t = y[i];
    total -= t * std::log(p) + (1.0 - t) * std::log(1.0 - p);
    out.grad[i] = (p - t) / (p * (1.0 - p) * count);
  }
  out.loss = total / count;
  return out;
}

/// Mean BCE over the full (n, 81) patch targets.
inline double patch_loss(const Tensor4& h, const Tensor4& y) {
  if (h.shape().c != 81 || h.shape().h != 1 || h.shape().w != 1)
    throw ShapeError("patch_loss expects (n, 81, 1, 1) predictions, got " +
                     to_string(h.shape()));
  return bce_loss(h, y).loss;
}

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

/// First/second moment estimates per parameter tensor plus the timestep.
struct AdamState {
  AdamConfig config;
  std::int64_t t = 0;
  std::vector<Tensor4> m;
  std::vector<Tensor4> v;

  static AdamState init(const std::vector<Tensor4*>& params, AdamConfig cfg = {}) {
    AdamState s;
    s.config = cfg;
    s.m.reserve(params.size());
    s.v.reserve(params.size());
    for (const Tensor4* p : params) {
      s.m.emplace_back(p->shape(), 0.0);
      s.v.emplace_back(p->shape(), 0.0);
    }
    return s;
  }
};

/// One Adam update: biased moments, bias correction, then
/// w -= lr * m_hat / (sqrt(v_hat) + eps).
inline void adam_step(const std::vector<Tensor4*>& params,
                      const std::vector<Tensor4>& grads, AdamState& state) {
  if (params.size() != grads.size() || params.size() != state.m.size())
    throw ShapeError("adam_step: parameter/gradient/state counts disagree");
  state.t += 1;
  const auto& c = state.config;
  const double bc1 = 1.0 - std::pow(c.beta1, static_cast<double>(state.t));
  const double bc2 = 1.0 - std::pow(c.beta2, static_cast<double>(state.t));
  for (std::size_t k = 0; k < params.size(); ++k) {
    Tensor4& w = *params[k];
    const Tensor4& g = grads[k];
    detail::require_same_shape(w, g, "adam_step");
    Tensor4& m = state.m[k];
    Tensor4& v = state.v[k];
    for (std::int64_t i = 0; i < w.size(); ++i) {
      m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g[i];
      v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g[i] * g[i];
      const double m_hat = m[i] / bc1;
      const double v_hat = v[i] / bc2;
      w[i] -= c.lr * m_hat / (std::sqrt(v_hat) + c.epsilon);
    }
  }
}

struct TrainConfig {
  int batch_size = 128;
  int epochs = 30;
  double lr = 1e-3;
  std::uint64_t seed = 0;
  bool augment = false;
  OutputMode output_mode = OutputMode::pixel;
  bool shuffle = true;
};

struct EpochStats {
  int epoch = 0;
  double train_loss = 0.0;
  double train_oa = 0.0;
  double seconds = 0.0;
};

using TrainHistory = std::vector<EpochStats>;

namespace detail {

inline void stack_batch(const std::vector<PatchSample>& samples,
                        const std::vector<std::size_t>& order,
                        std::size_t begin, std::size_t end, Tensor4& x,
                        Tensor4& y) {
  const auto& proto = samples[order[begin]];
  const auto& ps = proto.x.shape();
  const int nb = static_cast<int>(end - begin);
  const int out_units = static_cast<int>(proto.y.size());
  x = Tensor4({nb, ps.c, ps.h, ps.w});
  y = Tensor4({nb, out_units, 1, 1});
  const std::int64_t stride = proto.x.size();
  for (int b = 0; b < nb; ++b) {
    const auto& s = samples[order[begin + static_cast<std::size_t>(b)]];
    std::memcpy(x.data() + b * stride, s.x.data(),
                sizeof(double) * static_cast<std::size_t>(stride));
    for (int o = 0; o < out_units; ++o)
      y(b, o, 0, 0) = s.y[static_cast<std::size_t>(o)];
  }
}

}  // namespace detail

/// Mini-batch training with backprop and Adam. Shuffles with the config seed
/// each epoch, keeps the last partial batch, and records per-epoch loss,
/// overall accuracy and wall time. With config.augment the dataset is
/// tripled with flips up front. Deterministic given the seed.
inline TrainHistory train(Model& model, const std::vector<PatchSample>& dataset,
                          const TrainConfig& config) {
  if (dataset.empty()) throw DataError("training dataset is empty");
  const int want_units = config.output_mode == OutputMode::pixel ? 1 : 81;
  if (model.spec.output_units != want_units)
    throw ConfigError("model emits " + std::to_string(model.spec.output_units) +
                      " outputs but config.output_mode wants " +
                      std::to_string(want_units));
  for (const auto& s : dataset)
    if (static_cast<int>(s.y.size()) != want_units)
      throw DataError("sample target has " + std::to_string(s.y.size()) +
                      " values, expected " + std::to_string(want_units));
  if (config.batch_size < 1 || config.epochs < 1 || config.lr < 0.0)
    throw ConfigError("batch_size and epochs must be >= 1 and lr >= 0");

  std::vector<PatchSample> augmented;
  const std::vector<PatchSample>* data = &dataset;
  if (config.augment) {
    augmented = augment_flips(dataset);
    data = &augmented;
  }

  Rng rng(config.seed);
  auto params = trainable_params(model);
  AdamConfig adam_cfg;
  adam_cfg.lr = config.lr;
  AdamState adam = AdamState::init(params, adam_cfg);

  std::vector<std::size_t> order(data->size());
  std::iota(order.begin(), order.end(), 0u);

  TrainHistory history;
  std::vector<LayerCache> caches;
  for (int epoch = 1; epoch <= config.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    if (config.shuffle) rng.shuffle(order);

    double loss_sum = 0.0;
    std::int64_t correct = 0, total = 0;
    for (std::size_t begin = 0; begin < order.size();
         begin += static_cast<std::size_t>(config.batch_size)) {
      const std::size_t end =
          std::min(order.size(), begin + static_cast<std::size_t>(config.batch_size));
      Tensor4 x, y;
      detail::stack_batch(*data, order, begin, end, x, y);

      Tensor4 h = forward(model, x, /*training=*/true, &rng, &caches);
      LossGrad lg = bce_loss(h, y);
      loss_sum += lg.loss * static_cast<double>(h.size());
      for (std::int64_t i = 0; i < h.size(); ++i) {
        correct += ((h[i] >= 0.5 ? 1.0 : 0.0) == y[i]) ? 1 : 0;
        ++total;
      }

      Tensor4 grad = std::move(lg.grad);
      std::vector<Tensor4> param_grads(params.size());
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
      adam_step(params, param_grads, adam);
    }

    const auto t1 = std::chrono::steady_clock::now();
    EpochStats stats;
    stats.epoch = epoch;
    stats.train_loss = loss_sum / static_cast<double>(total);
    stats.train_oa = static_cast<double>(correct) / static_cast<double>(total);
    stats.seconds = std::chrono::duration<double>(t1 - t0).count();
    history.push_back(stats);
  }
  return history;
}

}  // namespace cloudmask
