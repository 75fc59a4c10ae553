// Three-level parameter coding and the .nvrc container. Model parameters
// (level 1) are coded under quantization/entropy side parameters (level 2),
// which are themselves coded under per-tensor scalars (level 3) stored as
// raw half floats. Every table the decoder rebuilds is derived from the
// deterministic math layer, so encoder and decoder agree bit for bit.
#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "nvrc/common.hpp"
#include "nvrc/entropy.hpp"
#include "nvrc/model.hpp"
#include "nvrc/quant.hpp"
#include "nvrc/tensor.hpp"

namespace nvrc {

inline constexpr uint16_t kFormatVersion = 1;
inline constexpr double kFixedGridLogStep = -4.0;  // fixed-step ablation

enum class ColorMode : uint8_t { kRgb = 0, kYuv444 = 1 };

// Which entropy model codes the feature grids / the layer tensors. The
// fallbacks are the ablation variants; quantization scales are unaffected.
enum class GridEm : uint8_t { kContext = 0, kPerTensor = 1 };
enum class LayerEm : uint8_t { kDualAxis = 0, kPerTensor = 1 };

struct CodecConfig {
  GridEm grid_em = GridEm::kContext;
  LayerEm layer_em = LayerEm::kDualAxis;
  bool code_level2 = true;        // false: side params stored raw half
  bool learned_grid_step = true;  // false: grid log step fixed
  bool psi_full = false;          // level-3 scalars as float32 instead of half
  int64_t axis_threshold = 16;    // per-axis scales once an extent reaches it
  std::array<int64_t, 3> grid_block = {16, 8, 8};
  ContextConfig context{3, 4, true};
};

// Throws ConfigError on nonsense (even kernel, width < 2, ...).
void validate_codec_config(const CodecConfig& cc);

// Per-level side parameters for one feature grid.
template <typename S>
struct GridSide {
  Tensor<S> log_delta;    // (C, ceil(T/bt), ceil(H/bh), ceil(W/bw)); unset when fixed-step
  ContextWeights<S> ctx;  // set when grid_em == kContext
  Tensor<S> mu, log_sigma;  // scalars, set when grid_em == kPerTensor
};

// Side parameters for one layer tensor, viewed as (rows, cols). Which
// tensors exist depends on the axis modes; absent ones stay default-empty.
template <typename S>
struct LayerSide {
  AxisMode quant_mode = AxisMode::kPerTensor;
  AxisMode em_mode = AxisMode::kPerTensor;
  Tensor<S> lq_out;  // (rows) for dual/single-out, (1) for per-tensor
  Tensor<S> lq_in;   // (cols), dual only
  Tensor<S> mu_out, ls_out;  // (rows) or (1) per em_mode
  Tensor<S> mu_in, ls_in;    // (cols), dual em only
};

template <typename S>
struct SideParams {
  std::vector<GridSide<S>> grids;    // per level
  std::vector<LayerSide<S>> layers;  // aligned to rep.layers
};

// Level-3 scalars, one triple per side-parameter tensor in manifest order.
template <typename S>
struct PsiParams {
  std::vector<Tensor<S>> log_step, mu, log_sigma;  // each entry a (1) tensor
};

// One entry of the canonical side-parameter manifest. The order is fixed:
// every quantization tensor first, then every entropy-model tensor, each
// group walking grids by level then layers in representation order. Encoder
// and decoder derive it independently from the configs alone.
enum class PhiKind : uint8_t { kQuant = 0, kEm = 1 };
enum class PhiRole : uint8_t {
  kGridLogDelta,
  kGridCtx,
  kGridMu,
  kGridLogSigma,
  kLayerLqOut,
  kLayerLqIn,
  kLayerMuOut,
  kLayerLsOut,
  kLayerMuIn,
  kLayerLsIn,
};
struct PhiTensorInfo {
  PhiKind kind = PhiKind::kQuant;
  PhiRole role = PhiRole::kGridLogDelta;
  int64_t level = -1;      // grid roles
  int64_t ctx_index = -1;  // kGridCtx: position in context_weight_list
  int64_t layer = -1;      // layer roles
  std::vector<int64_t> shape;
  std::string name;
};

std::vector<PhiTensorInfo> build_phi_manifest(const ModelConfig& cfg, const CodecConfig& cc);

// Axis modes of one layer tensor under a codec config.
struct LayerModes {
  int64_t rows = 0, cols = 0;
  AxisMode quant_mode = AxisMode::kPerTensor;
  AxisMode em_mode = AxisMode::kPerTensor;
};
LayerModes layer_coding_modes(const std::vector<int64_t>& shape, const CodecConfig& cc);

// Fresh side parameters sized for the representation: log steps start at -4,
// Gaussians at (0, 1), context stacks at their canonical init.
template <typename S>
SideParams<S> init_side_params(const NeuralRepresentation<S>& rep, const CodecConfig& cc,
                               uint64_t seed);

// Scalar triples (log_step -5, mu 0, log_sigma 0) for every manifest entry.
template <typename S>
PsiParams<S> init_psi(const ModelConfig& cfg, const CodecConfig& cc);

// Visits every side-parameter tensor in manifest order; fn(info, tensor).
// Throws ConfigError if the stored shapes disagree with the manifest.
template <typename S, typename F>
void for_each_phi(const ModelConfig& cfg, const CodecConfig& cc, SideParams<S>& sp, F&& fn);

struct SectionStats {
  uint64_t bytes = 0;          // section bytes including framing varints
  double estimated_bits = 0;   // sum of -log2 pmf over coded symbols
  uint64_t symbols = 0;
  uint64_t clamped = 0;        // symbols clipped into the coded support
};

struct EncodeReport {
  SectionStats psi, phi, grids, layers;
  uint64_t header_bytes = 0;
  uint64_t total_bytes = 0;
};

// Coded integers per stream portion, for losslessness checks.
struct CodedSymbols {
  std::vector<std::vector<int32_t>> grids;   // per level, (C,T,H,W) raster
  std::vector<std::vector<int32_t>> layers;  // per tensor, element order
  std::vector<std::vector<int32_t>> phi;     // per manifest entry; empty raw
};

struct EncodeResult {
  std::vector<uint8_t> bytes;
  NeuralRepresentation<float> quantized;  // encoder-side dequantized model
  std::vector<std::array<uint32_t, 3>> psi_hat;  // finalized scalar bit patterns
  CodedSymbols symbols;
  EncodeReport report;
};

// Quantizes (rep, phi, psi) with hard rounding and codes the stream.
// Throws NumericError on non-finite parameters or degenerate steps.
EncodeResult encode_stream(const NeuralRepresentation<float>& rep,
                           const SideParams<float>& phi, const PsiParams<float>& psi,
                           const CodecConfig& cc, ColorMode color);

struct DecodedStream {
  NeuralRepresentation<float> rep;
  CodecConfig codec;
  ColorMode color = ColorMode::kRgb;
  std::vector<std::array<uint32_t, 3>> psi_hat;
};

// Validates and decodes a stream back to a renderable representation.
// Throws DecodeError / VersionError with the failing section named.
DecodedStream decode_stream(std::span<const uint8_t> bytes, CodedSymbols* symbols_out = nullptr);

// Container plumbing, exposed so round-trip identity is testable on its own.
struct StreamHeader {
  ModelConfig config;
  CodecConfig codec;
  ColorMode color = ColorMode::kRgb;
};
struct ContainerSections {
  std::vector<uint8_t> psi, phi, theta;
};
std::vector<uint8_t> assemble_container(const StreamHeader& header,
                                        const ContainerSections& sections);
struct ParsedContainer {
  StreamHeader header;
  ContainerSections sections;
  uint64_t header_bytes = 0;
};
ParsedContainer parse_container(std::span<const uint8_t> bytes);

// Structural accounting of a valid stream. The four categories partition the
// payload (everything after the header) exactly; level-3 scalars count
// toward the side-parameter category they describe. Bits-per-parameter
// divides by the element count of the matching tensors.
struct RateReport {
  uint64_t total_bits = 0, header_bits = 0;
  uint64_t grid_bits = 0, layer_bits = 0, quant_bits = 0, em_bits = 0;
  int64_t grid_params = 0, layer_params = 0, quant_params = 0, em_params = 0;
  double grid_bits_per_param = 0, layer_bits_per_param = 0;
  double quant_bits_per_param = 0, em_bits_per_param = 0;
};
RateReport rate_report(std::span<const uint8_t> bytes);

// --- implementation ---

namespace detail {
template <typename S>
Tensor<S>* phi_tensor_for(const PhiTensorInfo& info, SideParams<S>& sp);
}

template <typename S, typename F>
void for_each_phi(const ModelConfig& cfg, const CodecConfig& cc, SideParams<S>& sp, F&& fn) {
  const auto manifest = build_phi_manifest(cfg, cc);
  for (const auto& info : manifest) {
    Tensor<S>* t = detail::phi_tensor_for(info, sp);
    if (!t->defined() || t->shape() != info.shape)
      throw ConfigError("side parameter " + info.name + " is missing or misshaped");
    fn(info, *t);
  }
}

}  // namespace nvrc
