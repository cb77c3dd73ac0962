#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "cloudmask/errors.hpp"
#include "cloudmask/layers.hpp"
#include "cloudmask/rng.hpp"
#include "cloudmask/tensor.hpp"

namespace cloudmask {

enum class OutputMode { pixel, patch9 };

inline const char* to_string(OutputMode m) {
  return m == OutputMode::pixel ? "pixel" : "patch9";
}

inline OutputMode output_mode_from(const std::string& s) {
  if (s == "pixel") return OutputMode::pixel;
  if (s == "patch9") return OutputMode::patch9;
  throw ConfigError("unknown output_mode '" + s + "'");
}

/// Declarative description of one layer; `units` is the conv filter count or
/// dense output width, unused fields are ignored for other kinds.
struct LayerDesc {
  LayerKind kind = LayerKind::relu;
  int units = 0;
  int kernel = 3;
  int pad = 1;
  int stride = 1;
  double drop_probability = 0.0;
  double bn_epsilon = 1e-5;
  double bn_momentum = 0.9;
};

/// The declarative layer graph plus everything needed to rebuild it.
struct ModelSpec {
  std::string name;          // cloudnet17 | cloudnet33 | mlp
  int input_c = 4;
  int input_h = 1;
  int input_w = 1;
  int output_units = 1;
  OutputMode output_mode = OutputMode::pixel;
  std::uint64_t seed = 0;
  std::vector<LayerDesc> layers;
  // Baseline models carry their feature configuration so prediction is
  // self-contained; empty for CNNs.
  std::string input_config;
};

/// A built model: spec plus materialized parameters. Feature-input models may
/// also carry a per-feature standardizer fitted on their training set.
struct Model {
  ModelSpec spec;
  std::vector<LayerParams> layers;
  std::vector<double> scaler_mean;  // empty when no standardization
  std::vector<double> scaler_std;

  bool has_scaler() const { return !scaler_mean.empty(); }
};

namespace detail {

/// Walks the declared layer chain and returns the shape after each layer,
/// materializing parameter extents on the way. Throws if shapes do not chain.
inline std::vector<LayerParams> materialize_layers(const ModelSpec& spec) {
  std::vector<LayerParams> out;
  Shape4 cur{1, spec.input_c, spec.input_h, spec.input_w};
  for (const auto& d : spec.layers) {
    LayerParams p;
    p.kind = d.kind;
    p.pad = d.pad;
    p.stride = d.stride;
    p.drop_probability = d.drop_probability;
    p.bn_epsilon = d.bn_epsilon;
    p.bn_momentum = d.bn_momentum;
    switch (d.kind) {
      case LayerKind::conv2d: {
        if (d.units < 1) throw ConfigError("conv2d needs a positive filter count");
        p.weights = Tensor4({d.units, cur.c, d.kernel, d.kernel});
        p.bias = Tensor4({1, d.units, 1, 1});
        const auto geom = conv_geometry(cur, d.kernel, d.kernel, d.pad, d.stride);
        cur = {1, d.units, geom.out_h, geom.out_w};
        break;
      }
      case LayerKind::batchnorm2d: {
        p.gamma = Tensor4({1, cur.c, 1, 1}, 1.0);
        p.beta = Tensor4({1, cur.c, 1, 1}, 0.0);
        p.running_mean = Tensor4({1, cur.c, 1, 1}, 0.0);
        p.running_var = Tensor4({1, cur.c, 1, 1}, 1.0);
        break;
      }
      case LayerKind::maxpool2x2: {
        if (cur.h < 2 || cur.w < 2)
          throw ConfigError("maxpool2x2 input too small in layer chain");
        cur = {1, cur.c, cur.h / 2, cur.w / 2};
        break;
      }
      case LayerKind::dense: {
        if (d.units < 1) throw ConfigError("dense needs a positive unit count");
        if (cur.h != 1 || cur.w != 1)
          throw ConfigError("dense layer requires flattened input");
        p.weights = Tensor4({d.units, cur.c, 1, 1});
        p.bias = Tensor4({1, d.units, 1, 1});
        cur = {1, d.units, 1, 1};
        break;
      }
      case LayerKind::flatten: {
        cur = {1, cur.c * cur.h * cur.w, 1, 1};
        break;
      }
      case LayerKind::relu:
      case LayerKind::sigmoid:
      case LayerKind::dropout:
        break;
    }
    out.push_back(std::move(p));
  }
  if (cur.c != spec.output_units || cur.h != 1 || cur.w != 1) {
    throw ConfigError("layer chain ends at " + to_string(cur) +
                      ", expected (1, " + std::to_string(spec.output_units) +
                      ", 1, 1)");
  }
  return out;
}

/// He-scaled normal initialization, biases zero; fan_in is the weight row
/// length. Draw order is the layer order, element order within each tensor.
inline void init_weights(std::vector<LayerParams>& layers, std::uint64_t seed) {
  Rng rng(seed);
  for (auto& p : layers) {
    if (p.kind != LayerKind::conv2d && p.kind != LayerKind::dense) continue;
    const auto& ws = p.weights.shape();
    const double fan_in = static_cast<double>(ws.c) * ws.h * ws.w;
    const double stddev = std::sqrt(2.0 / fan_in);
    for (std::int64_t i = 0; i < p.weights.size(); ++i)
      p.weights[i] = rng.normal(0.0, stddev);
  }
}

}  // namespace detail

/// Builds a model from its spec: validates the shape chain and runs the
/// seeded initialization.
inline Model build_model(ModelSpec spec) {
  Model m;
  m.layers = detail::materialize_layers(spec);
  detail::init_weights(m.layers, spec.seed);
  m.spec = std::move(spec);
  return m;
}

/// The cloud-masking CNN: two blocks of two 3x3 conv layers (each followed by
/// batchnorm and ReLU) with 2x2 max-pooling and dropout 0.25 after each
/// block, then a 256-unit FC block with ReLU and dropout 0.5, and a sigmoid
/// head with 1 (pixel) or 81 (patch9) outputs. Filter widths default to
/// 32/32/64/64 and are configurable.
inline Model build_cloudnet(int patch_size, OutputMode output, std::uint64_t seed,
                            std::vector<int> filters = {32, 32, 64, 64},
                            int hidden = 256) {
  if (patch_size != 17 && patch_size != 33)
    throw ConfigError("cloudnet patch size must be 17 or 33, got " +
                      std::to_string(patch_size));
  if (filters.size() != 4) throw ConfigError("cloudnet takes four filter counts");

  ModelSpec spec;
  spec.name = patch_size == 17 ? "cloudnet17" : "cloudnet33";
  spec.input_c = 4;
  spec.input_h = patch_size;
  spec.input_w = patch_size;
  spec.output_mode = output;
  spec.output_units = output == OutputMode::pixel ? 1 : 81;
  spec.seed = seed;

  auto conv_block = [&](int f0, int f1) {
    spec.layers.push_back({.kind = LayerKind::conv2d, .units = f0, .kernel = 3, .pad = 1});
    spec.layers.push_back({.kind = LayerKind::batchnorm2d});
    spec.layers.push_back({.kind = LayerKind::relu});
    spec.layers.push_back({.kind = LayerKind::conv2d, .units = f1, .kernel = 3, .pad = 1});
    spec.layers.push_back({.kind = LayerKind::batchnorm2d});
    spec.layers.push_back({.kind = LayerKind::relu});
    spec.layers.push_back({.kind = LayerKind::maxpool2x2});
    spec.layers.push_back({.kind = LayerKind::dropout, .drop_probability = 0.25});
  };
  conv_block(filters[0], filters[1]);
  conv_block(filters[2], filters[3]);
  spec.layers.push_back({.kind = LayerKind::flatten});
  spec.layers.push_back({.kind = LayerKind::dense, .units = hidden});
  spec.layers.push_back({.kind = LayerKind::relu});
  spec.layers.push_back({.kind = LayerKind::dropout, .drop_probability = 0.5});
  spec.layers.push_back({.kind = LayerKind::dense, .units = spec.output_units});
  spec.layers.push_back({.kind = LayerKind::sigmoid});

  return build_model(std::move(spec));
}

/// Plain MLP over feature vectors: dense+ReLU per hidden width, then a
/// single sigmoid output. An empty hidden list yields logistic regression.
inline Model build_mlp(int input_dim, const std::vector<int>& hidden,
                       std::uint64_t seed) {
  if (input_dim < 1) throw ConfigError("mlp input dimension must be >= 1");
  ModelSpec spec;
  spec.name = "mlp";
  spec.input_c = input_dim;
  spec.input_h = 1;
  spec.input_w = 1;
  spec.output_mode = OutputMode::pixel;
  spec.output_units = 1;
  spec.seed = seed;
  for (int hsize : hidden) {
    if (hsize < 1) throw ConfigError("mlp hidden widths must be >= 1");
    spec.layers.push_back({.kind = LayerKind::dense, .units = hsize});
    spec.layers.push_back({.kind = LayerKind::relu});
  }
  spec.layers.push_back({.kind = LayerKind::dense, .units = 1});
  spec.layers.push_back({.kind = LayerKind::sigmoid});
  return build_model(std::move(spec));
}

/// Runs the layer stack. Training mode fills `caches` (one entry per layer)
/// and requires an rng when the model contains active dropout. Output shape
/// is (n, output_units, 1, 1) with every value strictly inside (0, 1).
inline Tensor4 forward(Model& model, const Tensor4& x, bool training = false,
                       Rng* rng = nullptr,
                       std::vector<LayerCache>* caches = nullptr) {
  const auto& spec = model.spec;
  if (x.shape().c != spec.input_c || x.shape().h != spec.input_h ||
      x.shape().w != spec.input_w) {
    throw ShapeError("model " + spec.name + " expects input (n, " +
                     std::to_string(spec.input_c) + ", " +
                     std::to_string(spec.input_h) + ", " +
                     std::to_string(spec.input_w) + "), got " +
                     to_string(x.shape()));
  }
  Tensor4 cur = x;
  if (model.has_scaler()) {
    const auto& mu = model.scaler_mean;
    const auto& sd = model.scaler_std;
    for (int n = 0; n < cur.shape().n; ++n)
      for (int c = 0; c < cur.shape().c; ++c) {
        double& v = cur(n, c, 0, 0);
        v = (v - mu[static_cast<std::size_t>(c)]) / sd[static_cast<std::size_t>(c)];
      }
  }
  if (caches) {
    caches->clear();
    caches->resize(model.layers.size());
  }
  for (std::size_t i = 0; i < model.layers.size(); ++i) {
    LayerCache* cache = caches ? &(*caches)[i] : nullptr;
    cur = layer_forward(model.layers[i], cur, training, rng, cache);
  }
  return cur;
}

/// Trainable parameters in fixed traversal order (weights before bias,
/// gamma before beta). Batchnorm running statistics are persisted but not
/// optimized, so they are not listed here.
inline std::vector<Tensor4*> trainable_params(Model& model) {
  std::vector<Tensor4*> out;
  for (auto& p : model.layers) {
    switch (p.kind) {
      case LayerKind::conv2d:
      case LayerKind::dense:
        out.push_back(&p.weights);
        out.push_back(&p.bias);
        break;
      case LayerKind::batchnorm2d:
        out.push_back(&p.gamma);
        out.push_back(&p.beta);
        break;
      default:
        break;
    }
  }
  return out;
}

/// Count of learned scalars (the parameter census).
inline std::int64_t parameter_count(const Model& model) {
  std::int64_t total = 0;
  for (const auto& p : model.layers) {
    switch (p.kind) {
      case LayerKind::conv2d:
      case LayerKind::dense:
        total += p.weights.size() + p.bias.size();
        break;
      case LayerKind::batchnorm2d:
        total += p.gamma.size() + p.beta.size();
        break;
      default:
        break;
    }
  }
  return total;
}

}  // namespace cloudmask
