#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "cloudmask/errors.hpp"
#include "cloudmask/model.hpp"

namespace cloudmask {

inline constexpr char kWeightMagic[] = "CNNW1";
inline constexpr int kWeightVersion = 1;

namespace detail {

inline std::string strip_known_extension(const std::string& path) {
  for (const char* ext : {".json", ".bin"}) {
    const std::size_t n = std::strlen(ext);
    if (path.size() > n && path.compare(path.size() - n, n, ext) == 0)
      return path.substr(0, path.size() - n);
  }
  return path;
}

inline nlohmann::json layer_desc_to_json(const LayerDesc& d) {
  nlohmann::json j;
  j["kind"] = to_string(d.kind);
  switch (d.kind) {
    case LayerKind::conv2d:
      j["units"] = d.units;
      j["kernel"] = d.kernel;
      j["pad"] = d.pad;
      j["stride"] = d.stride;
      break;
    case LayerKind::dense:
      j["units"] = d.units;
      break;
    case LayerKind::batchnorm2d:
      j["epsilon"] = d.bn_epsilon;
      j["momentum"] = d.bn_momentum;
      break;
    case LayerKind::dropout:
      j["p"] = d.drop_probability;
      break;
    default:
      break;
  }
  return j;
}

inline LayerKind layer_kind_from(const std::string& s) {
  for (LayerKind k : {LayerKind::conv2d, LayerKind::batchnorm2d, LayerKind::relu,
                      LayerKind::maxpool2x2, LayerKind::dense, LayerKind::dropout,
                      LayerKind::sigmoid, LayerKind::flatten}) {
    if (s == to_string(k)) return k;
  }
  throw FormatError("unknown layer kind '" + s + "' in model manifest");
}

inline LayerDesc layer_desc_from_json(const nlohmann::json& j) {
  LayerDesc d;
  d.kind = layer_kind_from(j.at("kind").get<std::string>());
  switch (d.kind) {
    case LayerKind::conv2d:
      d.units = j.at("units").get<int>();
      d.kernel = j.at("kernel").get<int>();
      d.pad = j.at("pad").get<int>();
      d.stride = j.at("stride").get<int>();
      break;
    case LayerKind::dense:
      d.units = j.at("units").get<int>();
      break;
    case LayerKind::batchnorm2d:
      d.bn_epsilon = j.at("epsilon").get<double>();
      d.bn_momentum = j.at("momentum").get<double>();
      break;
    case LayerKind::dropout:
      d.drop_probability = j.at("p").get<double>();
      break;
    default:
      break;
  }
  return d;
}

/// Persisted tensors of one layer, in a fixed order. Running statistics are
/// included: inference needs them.
inline std::vector<std::pair<std::string, Tensor4*>> persisted_tensors(
    Model& model) {
  std::vector<std::pair<std::string, Tensor4*>> out;
  for (std::size_t i = 0; i < model.layers.size(); ++i) {
    auto& p = model.layers[i];
    const std::string prefix = "layer" + std::to_string(i) + ".";
    switch (p.kind) {
      case LayerKind::conv2d:
      case LayerKind::dense:
        out.emplace_back(prefix + "weights", &p.weights);
        out.emplace_back(prefix + "bias", &p.bias);
        break;
      case LayerKind::batchnorm2d:
        out.emplace_back(prefix + "gamma", &p.gamma);
        out.emplace_back(prefix + "beta", &p.beta);
        out.emplace_back(prefix + "running_mean", &p.running_mean);
        out.emplace_back(prefix + "running_var", &p.running_var);
        break;
      default:
        break;
    }
  }
  return out;
}

inline void append_f32_le(std::string& bytes, float v) {
  std::uint32_t u;
  std::memcpy(&u, &v, 4);
  bytes.push_back(static_cast<char>(u & 0xff));
  bytes.push_back(static_cast<char>((u >> 8) & 0xff));
  bytes.push_back(static_cast<char>((u >> 16) & 0xff));
  bytes.push_back(static_cast<char>((u >> 24) & 0xff));
}

inline float read_f32_le(const unsigned char* p) {
  const std::uint32_t u = static_cast<std::uint32_t>(p[0]) |
                          (static_cast<std::uint32_t>(p[1]) << 8) |
                          (static_cast<std::uint32_t>(p[2]) << 16) |
                          (static_cast<std::uint32_t>(p[3]) << 24);
  float v;
  std::memcpy(&v, &u, 4);
  return v;
}

}  // namespace detail

inline nlohmann::json spec_to_json(const ModelSpec& spec) {
  nlohmann::json j;
  j["name"] = spec.name;
  j["input"] = {spec.input_c, spec.input_h, spec.input_w};
  j["output_units"] = spec.output_units;
  j["output_mode"] = to_string(spec.output_mode);
  j["seed"] = spec.seed;
  if (!spec.input_config.empty()) j["input_config"] = spec.input_config;
  j["layers"] = nlohmann::json::array();
  for (const auto& d : spec.layers) j["layers"].push_back(detail::layer_desc_to_json(d));
  return j;
}

inline ModelSpec spec_from_json(const nlohmann::json& j) {
  ModelSpec spec;
  spec.name = j.at("name").get<std::string>();
  const auto in = j.at("input");
  spec.input_c = in.at(0).get<int>();
  spec.input_h = in.at(1).get<int>();
  spec.input_w = in.at(2).get<int>();
  spec.output_units = j.at("output_units").get<int>();
  spec.output_mode = output_mode_from(j.at("output_mode").get<std::string>());
  spec.seed = j.at("seed").get<std::uint64_t>();
  if (j.contains("input_config"))
    spec.input_config = j.at("input_config").get<std::string>();
  for (const auto& lj : j.at("layers"))
    spec.layers.push_back(detail::layer_desc_from_json(lj));
  return spec;
}

/// Writes <base>.json (manifest: spec, tensor names and shapes) and
/// <base>.bin ("CNNW1" magic followed by little-endian float32 values
/// concatenated in manifest order). `path` may carry either extension.
inline void save_weights(Model& model, const std::string& path) {
  const std::string base = detail::strip_known_extension(path);
  auto tensors = detail::persisted_tensors(model);

  nlohmann::json manifest;
  manifest["format"] = kWeightMagic;
  manifest["version"] = kWeightVersion;
  manifest["spec"] = spec_to_json(model.spec);
  if (model.has_scaler()) {
    manifest["scaler"]["mean"] = model.scaler_mean;
    manifest["scaler"]["std"] = model.scaler_std;
  }
  manifest["tensors"] = nlohmann::json::array();
  for (const auto& [name, t] : tensors) {
    const auto& s = t->shape();
    manifest["tensors"].push_back(
        {{"name", name}, {"shape", {s.n, s.c, s.h, s.w}}});
  }

  std::ofstream mf(base + ".json");
  if (!mf) throw FormatError("cannot write " + base + ".json");
  mf << manifest.dump(2) << "\n";
  mf.close();

  std::string blob(kWeightMagic, 5);
  for (const auto& [name, t] : tensors)
    for (std::int64_t i = 0; i < t->size(); ++i)
      detail::append_f32_le(blob, static_cast<float>((*t)[i]));

  std::ofstream bf(base + ".bin", std::ios::binary);
  if (!bf) throw FormatError("cannot write " + base + ".bin");
  bf.write(blob.data(), static_cast<std::streamsize>(blob.size()));
}

inline Model load_weights(const std::string& path) {
  const std::string base = detail::strip_known_extension(path);

  std::ifstream mf(base + ".json");
  if (!mf) throw FormatError("cannot open " + base + ".json");
  nlohmann::json manifest;
  try {
    mf >> manifest;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("manifest " + base + ".json is not valid JSON: " + e.what());
  }

  if (!manifest.contains("format") || manifest["format"] != kWeightMagic)
    throw FormatError("manifest format tag is not " + std::string(kWeightMagic));
  if (manifest.at("version").get<int>() != kWeightVersion)
    throw FormatError("unsupported weight format version " +
                      manifest.at("version").dump());

  Model model;
  model.spec = spec_from_json(manifest.at("spec"));
  model.layers = detail::materialize_layers(model.spec);
  if (manifest.contains("scaler")) {
    model.scaler_mean = manifest["scaler"].at("mean").get<std::vector<double>>();
    model.scaler_std = manifest["scaler"].at("std").get<std::vector<double>>();
  }

  auto tensors = detail::persisted_tensors(model);
  const auto& listed = manifest.at("tensors");
  if (listed.size() != tensors.size())
    throw FormatError("manifest lists " + std::to_string(listed.size()) +
                      " tensors, model needs " + std::to_string(tensors.size()));
  for (std::size_t i = 0; i < tensors.size(); ++i) {
    const auto& [name, t] = tensors[i];
    if (listed[i].at("name").get<std::string>() != name)
      throw FormatError("manifest tensor " + std::to_string(i) + " is '" +
                        listed[i].at("name").get<std::string>() +
                        "', expected '" + name + "'");
    const auto sh = listed[i].at("shape");
    const Shape4 want = t->shape();
    if (sh.at(0).get<int>() != want.n || sh.at(1).get<int>() != want.c ||
        sh.at(2).get<int>() != want.h || sh.at(3).get<int>() != want.w)
      throw FormatError("tensor '" + name + "' shape mismatch: manifest " +
                        sh.dump() + ", model expects " + to_string(want));
  }

  std::ifstream bf(base + ".bin", std::ios::binary);
  if (!bf) throw FormatError("cannot open " + base + ".bin");
  std::string blob((std::istreambuf_iterator<char>(bf)),
                   std::istreambuf_iterator<char>());
  if (blob.size() < 5 || blob.compare(0, 5, kWeightMagic) != 0)
    throw FormatError("weight blob does not start with magic " +
                      std::string(kWeightMagic));

  std::size_t off = 5;
  for (auto& [name, t] : tensors) {
    const std::size_t need = static_cast<std::size_t>(t->size()) * 4;
    if (blob.size() - off < need)
      throw FormatError("truncated blob: tensor '" + name + "' needs " +
                        std::to_string(need) + " bytes, " +
                        std::to_string(blob.size() - off) + " remain");
    const auto* p = reinterpret_cast<const unsigned char*>(blob.data()) + off;
    for (std::int64_t i = 0; i < t->size(); ++i, p += 4)
      (*t)[i] = static_cast<double>(detail::read_f32_le(p));
    off += need;
  }
  if (off != blob.size())
    throw FormatError("weight blob has " + std::to_string(blob.size() - off) +
                      " unexpected trailing bytes");
  return model;
}

}  // namespace cloudmask
