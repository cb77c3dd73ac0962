#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "cloudmask/errors.hpp"
#include "cloudmask/raster.hpp"
#include "cloudmask/rng.hpp"
#include "cloudmask/tensor.hpp"

namespace cloudmask {

enum class TargetMode { pixel, patch9 };

/// One training/evaluation sample: the P x P x 4 input window and its
/// target, either the center-pixel label or the 9x9 label grid centered on
/// (row, col).
struct PatchSample {
  Tensor4 x;                  // (1, channels, P, P)
  std::vector<double> y;      // length 1 (pixel) or 81 (patch9), values {0,1}
  int raster_id = 0;
  int row = 0;
  int col = 0;
};

struct Position {
  int row = 0;
  int col = 0;
};

/// All centers at least floor(P/2) from every border whose target is fully
/// labeled: the center pixel for pixel targets, the whole 9x9 grid for
/// patch targets.
inline std::vector<Position> valid_centers(const Raster& r, int patch_size,
                                           TargetMode target) {
  if (!r.has_labels()) throw DataError("raster has no labels");
  const int margin = patch_size / 2;
  std::vector<Position> out;
  for (int row = margin; row < r.height - margin; ++row) {
    for (int col = margin; col < r.width - margin; ++col) {
      if (target == TargetMode::pixel) {
        if (r.label(row, col) != kLabelUnknown) out.push_back({row, col});
      } else {
        bool ok = true;
        for (int i = -4; i <= 4 && ok; ++i)
          for (int j = -4; j <= 4 && ok; ++j)
            if (r.label(row + i, col + j) == kLabelUnknown) ok = false;
        if (ok) out.push_back({row, col});
      }
    }
  }
  return out;
}

/// Cuts one sample at a validated center position.
inline PatchSample extract_patch(const Raster& r, int patch_size,
                                 TargetMode target, Position pos,
                                 int raster_id = 0) {
  const int margin = patch_size / 2;
  if (pos.row < margin || pos.row >= r.height - margin || pos.col < margin ||
      pos.col >= r.width - margin) {
    throw DataError("patch center (" + std::to_string(pos.row) + ", " +
                    std::to_string(pos.col) + ") is closer than " +
                    std::to_string(margin) + " pixels to a border");
  }
  if (!r.has_labels()) throw DataError("raster has no labels");

  PatchSample s;
  s.raster_id = raster_id;
  s.row = pos.row;
  s.col = pos.col;
  s.x = Tensor4({1, r.channels, patch_size, patch_size});
  for (int c = 0; c < r.channels; ++c)
    for (int i = 0; i < patch_size; ++i)
      for (int j = 0; j < patch_size; ++j)
        s.x(0, c, i, j) = static_cast<double>(
            r.at(c, pos.row - margin + i, pos.col - margin + j));

  if (target == TargetMode::pixel) {
    const std::uint8_t lab = r.label(pos.row, pos.col);
    if (lab == kLabelUnknown)
      throw DataError("center pixel at (" + std::to_string(pos.row) + ", " +
                      std::to_string(pos.col) + ") is unlabeled");
    s.y = {static_cast<double>(lab)};
  } else {
    s.y.resize(81);
    for (int i = -4; i <= 4; ++i)
      for (int j = -4; j <= 4; ++j) {
        const std::uint8_t lab = r.label(pos.row + i, pos.col + j);
        if (lab == kLabelUnknown)
          throw DataError("9x9 target around (" + std::to_string(pos.row) +
                          ", " + std::to_string(pos.col) +
                          ") touches an unlabeled pixel");
        s.y[static_cast<std::size_t>((i + 4) * 9 + (j + 4))] =
            static_cast<double>(lab);
      }
  }
  return s;
}

inline std::vector<PatchSample> extract_patches(const Raster& r, int patch_size,
                                                TargetMode target,
                                                const std::vector<Position>& positions,
                                                int raster_id = 0) {
  std::vector<PatchSample> out;
  out.reserve(positions.size());
  for (const auto& pos : positions)
    out.push_back(extract_patch(r, patch_size, target, pos, raster_id));
  return out;
}

/// The class a sample counts as for balancing: the center of the target.
inline int sample_class(const PatchSample& s) {
  return s.y.size() == 1 ? static_cast<int>(s.y[0]) : static_cast<int>(s.y[40]);
}

/// Equalizes class counts: keeps min(|class0|, |class1|) of each, selected
/// uniformly by the seed, and shuffles the combined order.
inline std::vector<PatchSample> balance(std::vector<PatchSample> samples,
                                        std::uint64_t seed) {
  std::vector<std::size_t> idx0, idx1;
  for (std::size_t i = 0; i < samples.size(); ++i)
    (sample_class(samples[i]) == 1 ? idx1 : idx0).push_back(i);
  if (idx0.empty() || idx1.empty())
    throw DataError("cannot balance: only one class present (" +
                    std::to_string(idx0.size()) + " clear, " +
                    std::to_string(idx1.size()) + " cloud)");
  Rng rng(seed);
  rng.shuffle(idx0);
  rng.shuffle(idx1);
  const std::size_t keep = std::min(idx0.size(), idx1.size());
  std::vector<std::size_t> chosen(idx0.begin(), idx0.begin() + static_cast<std::ptrdiff_t>(keep));
  chosen.insert(chosen.end(), idx1.begin(), idx1.begin() + static_cast<std::ptrdiff_t>(keep));
  rng.shuffle(chosen);
  std::vector<PatchSample> out;
  out.reserve(chosen.size());
  for (std::size_t i : chosen) out.push_back(std::move(samples[i]));
  return out;
}

namespace detail {

enum class FlipAxis { left_right, up_down };

inline PatchSample flip_sample(const PatchSample& s, FlipAxis axis) {
  PatchSample f = s;
  const auto& sh = s.x.shape();
  for (int c = 0; c < sh.c; ++c)
    for (int i = 0; i < sh.h; ++i)
      for (int j = 0; j < sh.w; ++j) {
        const int si = axis == FlipAxis::up_down ? sh.h - 1 - i : i;
        const int sj = axis == FlipAxis::left_right ? sh.w - 1 - j : j;
        f.x(0, c, i, j) = s.x(0, c, si, sj);
      }
  if (s.y.size() == 81) {  // ground truth flips with the image
    for (int i = 0; i < 9; ++i)
      for (int j = 0; j < 9; ++j) {
        const int si = axis == FlipAxis::up_down ? 8 - i : i;
        const int sj = axis == FlipAxis::left_right ? 8 - j : j;
        f.y[static_cast<std::size_t>(i * 9 + j)] =
            s.y[static_cast<std::size_t>(si * 9 + sj)];
      }
  }
  return f;
}

}  // namespace detail

/// Triples the set: originals, left-right flips, up-down flips. Patch targets
/// are flipped identically to their inputs; pixel targets are unchanged
/// because the center pixel is fixed under both flips.
inline std::vector<PatchSample> augment_flips(const std::vector<PatchSample>& samples) {
  std::vector<PatchSample> out;
  out.reserve(samples.size() * 3);
  for (const auto& s : samples) out.push_back(s);
  for (const auto& s : samples)
    out.push_back(detail::flip_sample(s, detail::FlipAxis::left_right));
  for (const auto& s : samples)
    out.push_back(detail::flip_sample(s, detail::FlipAxis::up_down));
  return out;
}

}  // namespace cloudmask
