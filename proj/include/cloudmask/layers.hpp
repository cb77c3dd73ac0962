#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "cloudmask/errors.hpp"
#include "cloudmask/parallel.hpp"
#include "cloudmask/rng.hpp"
#include "cloudmask/tensor.hpp"

namespace cloudmask {

enum class LayerKind {
  conv2d,
  batchnorm2d,
  relu,
  maxpool2x2,
  dense,
  dropout,
  sigmoid,
  flatten,
};

inline const char* to_string(LayerKind k) {
  switch (k) {
    case LayerKind::conv2d: return "conv2d";
    case LayerKind::batchnorm2d: return "batchnorm2d";
    case LayerKind::relu: return "relu";
    case LayerKind::maxpool2x2: return "maxpool2x2";
    case LayerKind::dense: return "dense";
    case LayerKind::dropout: return "dropout";
    case LayerKind::sigmoid: return "sigmoid";
    case LayerKind::flatten: return "flatten";
  }
  return "?";
}

/// One layer's learned tensors and hyperparameters. Unused members stay
/// empty. Weight layouts: conv (out_c, in_c, kh, kw); dense (out, in, 1, 1);
/// bias and the batchnorm vectors (1, k, 1, 1).
struct LayerParams {
  LayerKind kind = LayerKind::relu;

  Tensor4 weights;
  Tensor4 bias;
  Tensor4 gamma, beta, running_mean, running_var;

  int pad = 0;
  int stride = 1;
  double drop_probability = 0.0;
  double bn_epsilon = 1e-5;
  double bn_momentum = 0.9;  // running = momentum*running + (1-momentum)*batch
};

/// Values saved by a training-mode forward pass for the matching backward.
struct LayerCache {
  Tensor4 input;               // conv, dense, relu, batchnorm
  Tensor4 x_hat;               // batchnorm normalized input
  std::vector<double> mean;    // batchnorm per-channel batch mean
  std::vector<double> var;     // batchnorm per-channel batch variance
  std::vector<std::int64_t> argmax;  // maxpool winner index per output
  Tensor4 mask;                // dropout keep mask with 1/(1-p) folded in
  Tensor4 output;              // sigmoid
  Shape4 in_shape;             // flatten / maxpool input extents
};

/// Parameter gradients produced by a backward pass; members mirror
/// LayerParams and stay empty for layers without that tensor.
struct LayerGrads {
  Tensor4 weights;
  Tensor4 bias;
  Tensor4 gamma, beta;
};

// ---------------------------------------------------------------------------
// conv2d
// ---------------------------------------------------------------------------

inline Tensor4 conv2d_forward(const LayerParams& p, const Tensor4& x,
                              LayerCache* cache = nullptr) {
  const auto& ws = p.weights.shape();
  if (x.shape().c != ws.c) {
    throw ShapeError("conv2d: input has " + std::to_string(x.shape().c) +
                     " channels, kernel expects " + std::to_string(ws.c));
  }
  const auto geom = detail::conv_geometry(x.shape(), ws.h, ws.w, p.pad, p.stride);
  const int N = x.shape().n, out_c = ws.n;
  const std::int64_t ckk = static_cast<std::int64_t>(ws.c) * ws.h * ws.w;
  const std::int64_t loc = static_cast<std::int64_t>(geom.out_h) * geom.out_w;

  Tensor4 y({N, out_c, geom.out_h, geom.out_w});
  parallel_for_chunks(N, [&](std::int64_t, std::int64_t begin, std::int64_t end) {
    std::vector<double> col(static_cast<std::size_t>(ckk * loc));
    for (std::int64_t s = begin; s < end; ++s) {
      detail::im2col_sample(x, static_cast<int>(s), ws.h, ws.w, p.pad,
                            p.stride, geom.out_h, geom.out_w, col.data());
      double* ys = y.data() + s * out_c * loc;
      detail::gemm_nn(p.weights.data(), col.data(), ys, out_c, ckk, loc);
      for (int o = 0; o < out_c; ++o) {
        const double b = p.bias[o];
        double* row = ys + static_cast<std::int64_t>(o) * loc;
        for (std::int64_t j = 0; j < loc; ++j) row[j] += b;
      }
    }
  });
  if (cache) cache->input = x;
  return y;
}

inline Tensor4 conv2d_backward(const LayerParams& p, const LayerCache& cache,
                               const Tensor4& grad_out, LayerGrads& grads) {
  if (cache.input.empty())
    throw ShapeError("conv2d backward: missing forward cache");
  const Tensor4& x = cache.input;
  const auto& ws = p.weights.shape();
  const auto geom = detail::conv_geometry(x.shape(), ws.h, ws.w, p.pad, p.stride);
  const int N = x.shape().n, out_c = ws.n;
  const std::int64_t ckk = static_cast<std::int64_t>(ws.c) * ws.h * ws.w;
  const std::int64_t loc = static_cast<std::int64_t>(geom.out_h) * geom.out_w;
  if (!(grad_out.shape() == Shape4{N, out_c, geom.out_h, geom.out_w}))
    throw ShapeError("conv2d backward: grad_out shape mismatch");

  Tensor4 dx(x.shape(), 0.0);
  const std::int64_t chunks = std::min<std::int64_t>(N, kParallelChunks);
  std::vector<std::vector<double>> dw_parts(static_cast<std::size_t>(chunks));
  std::vector<std::vector<double>> db_parts(static_cast<std::size_t>(chunks));

  parallel_for_chunks(N, [&](std::int64_t idx, std::int64_t begin, std::int64_t end) {
    auto& dw = dw_parts[static_cast<std::size_t>(idx)];
    auto& db = db_parts[static_cast<std::size_t>(idx)];
    dw.assign(static_cast<std::size_t>(out_c * ckk), 0.0);
    db.assign(static_cast<std::size_t>(out_c), 0.0);
    std::vector<double> col(static_cast<std::size_t>(ckk * loc));
    std::vector<double> dcol(static_cast<std::size_t>(ckk * loc));
    for (std::int64_t s = begin; s < end; ++s) {
      detail::im2col_sample(x, static_cast<int>(s), ws.h, ws.w, p.pad,
                            p.stride, geom.out_h, geom.out_w, col.data());
      const double* gs = grad_out.data() + s * out_c * loc;
      // dW += gs * col^T ; both operands row-major with row length loc
      detail::gemm_abt(gs, col.data(), dw.data(), out_c, loc, ckk, true);
      for (int o = 0; o < out_c; ++o) {
        const double* row = gs + static_cast<std::int64_t>(o) * loc;
        double acc = 0.0;
        for (std::int64_t j = 0; j < loc; ++j) acc += row[j];
        db[static_cast<std::size_t>(o)] += acc;
      }
      // dcol = W^T * gs, then scatter back to input geometry
      detail::gemm_atb(p.weights.data(), gs, dcol.data(), out_c, ckk, loc);
      detail::col2im_sample(dcol.data(), static_cast<int>(s), ws.h, ws.w,
                            p.pad, p.stride, geom.out_h, geom.out_w, dx);
    }
  });

  grads.weights = Tensor4(ws, 0.0);
  grads.bias = Tensor4(p.bias.shape(), 0.0);
  for (std::int64_t idx = 0; idx < chunks; ++idx) {  // fixed reduction order
    const auto& dw = dw_parts[static_cast<std::size_t>(idx)];
    const auto& db = db_parts[static_cast<std::size_t>(idx)];
    if (dw.empty()) continue;
    for (std::int64_t i = 0; i < grads.weights.size(); ++i)
      grads.weights[i] += dw[static_cast<std::size_t>(i)];
    for (std::int64_t i = 0; i < grads.bias.size(); ++i)
      grads.bias[i] += db[static_cast<std::size_t>(i)];
  }
  return dx;
}

// ---------------------------------------------------------------------------
// batchnorm2d
// ---------------------------------------------------------------------------

/// Training mode normalizes with batch statistics over (n, h, w) per channel
/// and updates the running estimates in place; inference mode uses the
/// running estimates. Population variance throughout.
inline Tensor4 batchnorm2d_forward(LayerParams& p, const Tensor4& x,
                                   bool training, LayerCache* cache = nullptr) {
  const int C = x.shape().c;
  if (p.gamma.size() != C) {
    throw ShapeError("batchnorm2d: input has " + std::to_string(C) +
                     " channels, parameters have " + std::to_string(p.gamma.size()));
  }
  const int N = x.shape().n, H = x.shape().h, W = x.shape().w;
  const std::int64_t per_chan = static_cast<std::int64_t>(N) * H * W;
  const std::int64_t plane = static_cast<std::int64_t>(H) * W;
  Tensor4 y(x.shape());

  if (!training) {
    for (int c = 0; c < C; ++c) {
      const double inv = 1.0 / std::sqrt(p.running_var[c] + p.bn_epsilon);
      const double g = p.gamma[c], b = p.beta[c], m = p.running_mean[c];
      for (int n = 0; n < N; ++n) {
        const double* xs = x.data() + (static_cast<std::int64_t>(n) * C + c) * plane;
        double* ys = y.data() + (static_cast<std::int64_t>(n) * C + c) * plane;
        for (std::int64_t i = 0; i < plane; ++i) ys[i] = g * (xs[i] - m) * inv + b;
      }
    }
    return y;
  }

  if (per_chan < 2)
    throw ShapeError("batchnorm2d: training batch must have n*h*w >= 2 per channel");

  std::vector<double> mean(static_cast<std::size_t>(C), 0.0);
  std::vector<double> var(static_cast<std::size_t>(C), 0.0);
  Tensor4 x_hat(x.shape());
  for (int c = 0; c < C; ++c) {
    double sum = 0.0;
    for (int n = 0; n < N; ++n) {
      const double* xs = x.data() + (static_cast<std::int64_t>(n) * C + c) * plane;
      for (std::int64_t i = 0; i < plane; ++i) sum += xs[i];
    }
    const double mu = sum / static_cast<double>(per_chan);
    double sq = 0.0;
    for (int n = 0; n < N; ++n) {
      const double* xs = x.data() + (static_cast<std::int64_t>(n) * C + c) * plane;
      for (std::int64_t i = 0; i < plane; ++i) {
        const double d = xs[i] - mu;
        sq += d * d;
      }
    }
    const double v = sq / static_cast<double>(per_chan);
    mean[static_cast<std::size_t>(c)] = mu;
    var[static_cast<std::size_t>(c)] = v;
    const double inv = 1.0 / std::sqrt(v + p.bn_epsilon);
    const double g = p.gamma[c], b = p.beta[c];
    for (int n = 0; n < N; ++n) {
      const double* xs = x.data() + (static_cast<std::int64_t>(n) * C + c) * plane;
      double* hs = x_hat.data() + (static_cast<std::int64_t>(n) * C + c) * plane;
      double* ys = y.data() + (static_cast<std::int64_t>(n) * C + c) * plane;
      for (std::int64_t i = 0; i < plane; ++i) {
        hs[i] = (xs[i] - mu) * inv;
        ys[i] = g * hs[i] + b;
      }
    }
    p.running_mean[c] = p.bn_momentum * p.running_mean[c] + (1.0 - p.bn_momentum) * mu;
    p.running_var[c] = p.bn_momentum * p.running_var[c] + (1.0 - p.bn_momentum) * v;
  }

  if (cache) {
    cache->input = x;
    cache->x_hat = std::move(x_hat);
    cache->mean = std::move(mean);
    cache->var = std::move(var);
  }
  return y;
}

/// Full batch-statistics chain rule: the gradient flows through the batch
/// mean and variance as well as the normalized values.
inline Tensor4 batchnorm2d_backward(const LayerParams& p, const LayerCache& cache,
                                    const Tensor4& grad_out, LayerGrads& grads) {
  if (cache.input.empty() || cache.x_hat.empty())
    throw ShapeError("batchnorm2d backward: missing forward cache");
  const Tensor4& x = cache.input;
  const int N = x.shape().n, C = x.shape().c, H = x.shape().h, W = x.shape().w;
  const std::int64_t plane = static_cast<std::int64_t>(H) * W;
  const double m = static_cast<double>(static_cast<std::int64_t>(N) * H * W);

  grads.gamma = Tensor4(p.gamma.shape(), 0.0);
  grads.beta = Tensor4(p.beta.shape(), 0.0);
  Tensor4 dx(x.shape());

  for (int c = 0; c < C; ++c) {
    const double mu = cache.mean[static_cast<std::size_t>(c)];
    const double v = cache.var[static_cast<std::size_t>(c)];
    const double inv = 1.0 / std::sqrt(v + p.bn_epsilon);
    const double g = p.gamma[c];

    double dgamma = 0.0, dbeta = 0.0, sum_dxhat = 0.0, sum_dxhat_xm = 0.0;
    for (int n = 0; n < N; ++n) {
      const std::int64_t off = (static_cast<std::int64_t>(n) * C + c) * plane;
      const double* go = grad_out.data() + off;
      const double* xh = cache.x_hat.data() + off;
      const double* xs = x.data() + off;
      for (std::int64_t i = 0; i < plane; ++i) {
        dgamma += go[i] * xh[i];
        dbeta += go[i];
        const double dxh = go[i] * g;
        sum_dxhat += dxh;
        sum_dxhat_xm += dxh * (xs[i] - mu);
      }
    }
    grads.gamma[c] = dgamma;
    grads.beta[c] = dbeta;

    const double dvar = sum_dxhat_xm * (-0.5) * inv * inv * inv;
    const double dmean = -sum_dxhat * inv;  // sum of (x - mu) is zero
    for (int n = 0; n < N; ++n) {
      const std::int64_t off = (static_cast<std::int64_t>(n) * C + c) * plane;
      const double* go = grad_out.data() + off;
      const double* xs = x.data() + off;
      double* d = dx.data() + off;
      for (std::int64_t i = 0; i < plane; ++i) {
        d[i] = go[i] * g * inv + dvar * 2.0 * (xs[i] - mu) / m + dmean / m;
      }
    }
  }
  return dx;
}

// ---------------------------------------------------------------------------
// maxpool 2x2, stride 2, floor semantics
// ---------------------------------------------------------------------------

inline Tensor4 maxpool2x2_forward(const Tensor4& x, LayerCache* cache = nullptr) {
  const int N = x.shape().n, C = x.shape().c, H = x.shape().h, W = x.shape().w;
  if (H < 2 || W < 2)
    throw ShapeError("maxpool2x2: spatial extent must be at least 2x2, got " +
                     to_string(x.shape()));
  const int oh = H / 2, ow = W / 2;
  Tensor4 y({N, C, oh, ow});
  std::vector<std::int64_t> argmax(static_cast<std::size_t>(y.size()));
  std::int64_t out = 0;
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c)
      for (int i = 0; i < oh; ++i)
        for (int j = 0; j < ow; ++j, ++out) {
          double best = -1.0;
          std::int64_t best_idx = -1;
          // ties keep the first candidate in row-major order
          for (int u = 0; u < 2; ++u)
            for (int v = 0; v < 2; ++v) {
              const std::int64_t idx = x.index(n, c, 2 * i + u, 2 * j + v);
              const double val = x[idx];
              if (best_idx < 0 || val > best) {
                best = val;
                best_idx = idx;
              }
            }
          y[out] = best;
          argmax[static_cast<std::size_t>(out)] = best_idx;
        }
  if (cache) {
    cache->argmax = std::move(argmax);
    cache->in_shape = x.shape();
  }
  return y;
}

inline Tensor4 maxpool2x2_backward(const LayerCache& cache, const Tensor4& grad_out) {
  if (cache.argmax.empty())
    throw ShapeError("maxpool2x2 backward: missing forward cache");
  if (static_cast<std::size_t>(grad_out.size()) != cache.argmax.size())
    throw ShapeError("maxpool2x2 backward: grad_out size mismatch");
  Tensor4 dx(cache.in_shape, 0.0);
  for (std::int64_t i = 0; i < grad_out.size(); ++i)
    dx[cache.argmax[static_cast<std::size_t>(i)]] += grad_out[i];
  return dx;
}

// ---------------------------------------------------------------------------
// dense (fully connected): y = x W^T + b on (n, features, 1, 1) tensors
// ---------------------------------------------------------------------------

inline Tensor4 dense_forward(const LayerParams& p, const Tensor4& x,
                             LayerCache* cache = nullptr) {
  const auto& ws = p.weights.shape();  // (out, in, 1, 1)
  if (x.shape().h != 1 || x.shape().w != 1 || x.shape().c != ws.c) {
    throw ShapeError("dense: expected input (n, " + std::to_string(ws.c) +
                     ", 1, 1), got " + to_string(x.shape()));
  }
  const int N = x.shape().n, out = ws.n, in = ws.c;
  Tensor4 y({N, out, 1, 1});
  detail::gemm_abt(x.data(), p.weights.data(), y.data(), N, in, out);
  for (int n = 0; n < N; ++n)
    for (int o = 0; o < out; ++o) y(n, o, 0, 0) += p.bias[o];
  if (cache) cache->input = x;
  return y;
}

inline Tensor4 dense_backward(const LayerParams& p, const LayerCache& cache,
                              const Tensor4& grad_out, LayerGrads& grads) {
  if (cache.input.empty())
    throw ShapeError("dense backward: missing forward cache");
  const Tensor4& x = cache.input;
  const int N = x.shape().n, in = x.shape().c, out = p.weights.shape().n;
  if (!(grad_out.shape() == Shape4{N, out, 1, 1}))
    throw ShapeError("dense backward: grad_out shape mismatch");

  grads.weights = Tensor4(p.weights.shape());
  grads.bias = Tensor4(p.bias.shape(), 0.0);
  // dW = grad_out^T x, with grad_out (N x out) and x (N x in)
  detail::gemm_atb(grad_out.data(), x.data(), grads.weights.data(), N, out, in);
  for (int n = 0; n < N; ++n)
    for (int o = 0; o < out; ++o) grads.bias[o] += grad_out(n, o, 0, 0);

  Tensor4 dx(x.shape());
  detail::gemm_nn(grad_out.data(), p.weights.data(), dx.data(), N, out, in);
  return dx;
}

// ---------------------------------------------------------------------------
// activations
// ---------------------------------------------------------------------------

/// Pre-activations are capped at +-35 so the output never rounds onto 0 or 1
/// in double precision; beyond the cap the true value differs by < 1e-15.
inline double sigmoid_scalar(double v) {
  v = std::clamp(v, -35.0, 35.0);
  if (v >= 0.0) return 1.0 / (1.0 + std::exp(-v));
  const double e = std::exp(v);
  return e / (1.0 + e);
}

inline Tensor4 relu_forward(const Tensor4& x, LayerCache* cache = nullptr) {
  Tensor4 y = map(x, [](double v) { return v > 0.0 ? v : 0.0; });
  if (cache) cache->input = x;
  return y;
}

inline Tensor4 relu_backward(const LayerCache& cache, const Tensor4& grad_out) {
  if (cache.input.empty()) throw ShapeError("relu backward: missing forward cache");
  detail::require_same_shape(cache.input, grad_out, "relu backward");
  Tensor4 dx = grad_out;
  for (std::int64_t i = 0; i < dx.size(); ++i)
    if (cache.input[i] <= 0.0) dx[i] = 0.0;
  return dx;
}

inline Tensor4 sigmoid_forward(const Tensor4& x, LayerCache* cache = nullptr) {
  Tensor4 y = map(x, sigmoid_scalar);
  if (cache) cache->output = y;
  return y;
}

inline Tensor4 sigmoid_backward(const LayerCache& cache, const Tensor4& grad_out) {
  if (cache.output.empty())
    throw ShapeError("sigmoid backward: missing forward cache");
  detail::require_same_shape(cache.output, grad_out, "sigmoid backward");
  Tensor4 dx = grad_out;
  for (std::int64_t i = 0; i < dx.size(); ++i) {
    const double y = cache.output[i];
    dx[i] *= y * (1.0 - y);
  }
  return dx;
}

// ---------------------------------------------------------------------------
// dropout (inverted: survivors scaled by 1/(1-p) at train time)
// ---------------------------------------------------------------------------

inline Tensor4 dropout_forward(const Tensor4& x, double drop_probability,
                               bool training, Rng* rng,
                               LayerCache* cache = nullptr) {
  if (drop_probability < 0.0 || drop_probability >= 1.0)
    throw ConfigError("dropout probability must lie in [0, 1)");
  if (!training) return x;
  Tensor4 mask(x.shape(), 1.0);
  if (drop_probability > 0.0) {
    if (!rng) throw ConfigError("dropout in training mode needs an rng");
    const double keep_scale = 1.0 / (1.0 - drop_probability);
    for (std::int64_t i = 0; i < mask.size(); ++i)
      mask[i] = rng->uniform() < drop_probability ? 0.0 : keep_scale;
  }
  Tensor4 y = mul(x, mask);
  if (cache) cache->mask = std::move(mask);
  return y;
}

inline Tensor4 dropout_backward(const LayerCache& cache, const Tensor4& grad_out) {
  if (cache.mask.empty())
    throw ShapeError("dropout backward: missing forward cache");
  return mul(grad_out, cache.mask);
}

// ---------------------------------------------------------------------------
// flatten
// ---------------------------------------------------------------------------

inline Tensor4 flatten_forward(const Tensor4& x, LayerCache* cache = nullptr) {
  const auto& s = x.shape();
  if (cache) cache->in_shape = s;
  return x.reshaped({s.n, s.c * s.h * s.w, 1, 1});
}

inline Tensor4 flatten_backward(const LayerCache& cache, const Tensor4& grad_out) {
  return grad_out.reshaped(cache.in_shape);
}

// ---------------------------------------------------------------------------
// dispatch
// ---------------------------------------------------------------------------

inline Tensor4 layer_forward(LayerParams& p, const Tensor4& x, bool training,
                             Rng* rng, LayerCache* cache = nullptr) {
  switch (p.kind) {
    case LayerKind::conv2d: return conv2d_forward(p, x, cache);
    case LayerKind::batchnorm2d: return batchnorm2d_forward(p, x, training, cache);
    case LayerKind::relu: return relu_forward(x, cache);
    case LayerKind::maxpool2x2: return maxpool2x2_forward(x, cache);
    case LayerKind::dense: return dense_forward(p, x, cache);
    case LayerKind::dropout:
      return dropout_forward(x, p.drop_probability, training, rng, cache);
    case LayerKind::sigmoid: return sigmoid_forward(x, cache);
    case LayerKind::flatten: return flatten_forward(x, cache);
  }
  throw ConfigError("unknown layer kind");
}

/// Reverse-mode step for one layer; fills grads for parameterized kinds and
/// returns the gradient with respect to the layer input.
inline Tensor4 layer_backward(const LayerParams& p, const LayerCache& cache,
                              const Tensor4& grad_out, LayerGrads& grads) {
  switch (p.kind) {
    case LayerKind::conv2d: return conv2d_backward(p, cache, grad_out, grads);
    case LayerKind::batchnorm2d: return batchnorm2d_backward(p, cache, grad_out, grads);
    case LayerKind::relu: return relu_backward(cache, grad_out);
    case LayerKind::maxpool2x2: return maxpool2x2_backward(cache, grad_out);
    case LayerKind::dense: return dense_backward(p, cache, grad_out, grads);
    case LayerKind::dropout: return dropout_backward(cache, grad_out);
    case LayerKind::sigmoid: return sigmoid_backward(cache, grad_out);
    case LayerKind::flatten: return flatten_backward(cache, grad_out);
  }
  throw ConfigError("unknown layer kind");
}

}  // namespace cloudmask
