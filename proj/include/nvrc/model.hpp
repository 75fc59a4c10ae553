// Patch-wise neural video representation: multi-resolution feature grids,
// per-level stem convolution, trilinear feature sampling after the stem,
// and spatially upsampling synthesis stages with residual blocks. A forward
// pass maps an integer patch coordinate to the patch's pixels; tiling all
// coordinates reconstructs the full video.
#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "nvrc/rng.hpp"
#include "nvrc/tensor.hpp"

namespace nvrc {

struct ModelConfig {
  // Video geometry the representation is fit to.
  int64_t video_t = 0, video_h = 0, video_w = 0;
  // Patch extents; video extents must divide evenly.
  int64_t t_patch = 1, h_patch = 0, w_patch = 0, c_patch = 3;
  // Level-0 feature grid extents and per-level scaling ratios. Level l has
  // extent max(1, round(extent0 * ratio^l)) per dimension.
  int64_t grid_t = 0, grid_h = 0, grid_w = 0, grid_c = 0;
  int64_t grid_levels = 1;
  double grid_scale_t = 0.5, grid_scale_h = 0.5, grid_scale_w = 0.5;
  double grid_scale_c = 2.0;
  // Synthesis stages: one entry per stage. Each stage upsamples H and W by
  // its stride (stride 2 is the implemented family), projects channels, adds
  // a sampled local feature grid, then runs residual conv blocks.
  std::vector<int64_t> channels;
  std::vector<int64_t> depths;
  std::vector<int64_t> strides;
  int64_t kernel = 3;     // residual block spatial kernel (odd)
  int64_t expansion = 2;  // residual block hidden width multiplier
  std::array<int64_t, 3> stem_kernel = {1, 3, 3};
  // Local grid extents: temporal extent and the stage-0 spatial extent; the
  // spatial extent doubles per stage to track the feature resolution.
  int64_t local_t = 4, local_hw = 2;
};

// Throws ConfigError on any violated constraint.
void validate_config(const ModelConfig& cfg);

// Grid extents for one level, channels first: {C, T, H, W}.
std::array<int64_t, 4> grid_level_extents(const ModelConfig& cfg, int64_t level);

// Spatial extent of the stem output per patch: h_patch and w_patch divided
// by the product of synthesis strides.
std::array<int64_t, 2> stem_output_extents(const ModelConfig& cfg);

// Small preset sized for videos around 64x64x16.
ModelConfig tiny_model_config(int64_t video_t, int64_t video_h, int64_t video_w);

struct PatchCoord {
  int64_t i = 0;  // along width
  int64_t j = 0;  // along height
  int64_t k = 0;  // along time
};

template <typename S>
struct NeuralRepresentation {
  ModelConfig config;
  std::vector<Tensor<S>> grids;  // one per level, shape (C, T, H, W)
  // Canonically ordered named layer tensors; order is part of the coded
  // format, so it never depends on runtime state.
  std::vector<std::pair<std::string, Tensor<S>>> layers;
};

template <typename S>
NeuralRepresentation<S> init_model(const ModelConfig& cfg, uint64_t seed);

template <typename S>
int64_t param_count(const NeuralRepresentation<S>& rep);

enum class OutputMode {
  kTrain,  // identity output head
  kEval,   // clamp to [0, 1]
};

// Produces the patch at the given coordinate with shape
// (t_patch, h_patch, w_patch, c_patch). Differentiable with respect to every
// tensor in the representation.
template <typename S>
Tensor<S> forward(const NeuralRepresentation<S>& rep, PatchCoord coord,
                  OutputMode mode);

// Tiles every patch coordinate into a (T, H, W, C) video tensor (untracked).
template <typename S>
Tensor<S> render_video(const NeuralRepresentation<S>& rep);

// 2D view of a layer tensor: rows are output features, columns flatten the
// rest. Rank-1 tensors view as a column (n, 1). The inverse is a reshape
// back to the original extents.
template <typename S>
Tensor<S> reshape_layer_param(const Tensor<S>& t);

// Applies fn to every parameter tensor, producing a representation that
// shares the config. fn(name, is_grid, tensor) -> tensor; shapes must be
// preserved. Grids are named "grid0", "grid1", ...
template <typename S, typename F>
NeuralRepresentation<S> map_parameters(const NeuralRepresentation<S>& rep, F&& fn) {
  NeuralRepresentation<S> out;
  out.config = rep.config;
  out.grids.reserve(rep.grids.size());
  for (size_t l = 0; l < rep.grids.size(); ++l) {
    out.grids.push_back(fn("grid" + std::to_string(l), true, rep.grids[l]));
  }
  out.layers.reserve(rep.layers.size());
  for (const auto& [name, t] : rep.layers) {
    out.layers.emplace_back(name, fn(name, false, t));
  }
  return out;
}

}  // namespace nvrc
