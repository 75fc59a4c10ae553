#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "nvrc/hierarchy.hpp"
#include "nvrc/model.hpp"
#include "nvrc/tensor.hpp"
#include "nvrc/video.hpp"

namespace nvrc {

enum class LossMode : uint8_t { kRgb = 0, kYuv444 = 1 };

// Two-stage rate-distortion fit. Stage 1 relaxes quantization with
// soft-rounding plus bounded noise under the temperature / noise-shape
// schedules; stage 2 fine-tunes with per-element hard quantization at the
// quant-noise ratio. Rate and distortion alternate: in every cycle of
// rate_period+1 steps the first rate_period steps descend lambda*D with the
// relaxation applied but entropy models left unevaluated, and the last step
// descends rate alone, scaled by rate_period.
struct TrainConfig {
  double lambda_rd = 1.0;
  int64_t rate_period = 8;  // K
  int64_t stage1_steps = 3000;
  int64_t stage2_steps = 300;
  double lr1_start = 2e-3, lr1_end = 1e-4;  // cosine within each stage
  double lr2_start = 1e-4, lr2_end = 1e-5;
  double clip_norm = 1.0;  // global gradient norm
  double l2_start = 1e-6;  // on model weights, linearly decaying to 0 in stage 1
  double temperature_start = 0.5, temperature_end = 0.3;
  double noise_a_start = 2.0, noise_a_end = 1.0;      // Kumaraswamy shape
  double quant_noise_start = 0.5, quant_noise_end = 1.0;  // stage-2 hard ratio
  int64_t patch_t = 1, patch_h = 32, patch_w = 32;  // must match the model
  int64_t patches_per_step = 4;
  uint64_t seed = 0;
  LossMode loss = LossMode::kRgb;
  bool alternating = true;  // off: every step descends R + lambda*D jointly
  int64_t log_every = 50;
  std::string checkpoint_path;   // empty: no checkpoints written
  int64_t checkpoint_every = 0;  // 0: only at the end (if a path is set)
};

// Throws ConfigError when schedules or extents are inconsistent with the
// model configuration.
void validate_train_config(const TrainConfig& tc, const ModelConfig& mc);

// Rate terms are bits normalized by video pixels (bpp units), so
// total = r_inr + r_em + lambda * d on joint evaluations. bpp additionally
// counts the fixed level-3 scalar bits; container framing is excluded, so
// it is an estimate of (slightly below) the final stream bpp.
struct LossBreakdown {
  double d = 0.0;
  double r_inr = 0.0;
  double r_em = 0.0;
  double total = 0.0;
  double bpp = 0.0;
};

enum class StepKind : uint8_t { kDistortion = 0, kRate = 1, kJoint = 2 };

// Snapshot after the step's update: distortion and rates are evaluated on
// the hard-quantized model over the full video, so records track what the
// coded stream would deliver, not the relaxed training loss.
struct TrainLogRecord {
  int64_t step = 0;  // global, 0-based
  int64_t stage = 1;
  StepKind kind = StepKind::kDistortion;
  LossBreakdown loss;
  double psnr = 0.0;  // hard-quantized reconstruction vs target
};

// "step=12 stage=1 kind=rate D=... R_inr=... R_em=... L=... bpp=... psnr=..."
std::string format_log_record(const TrainLogRecord& r);

struct TrainedModel {
  NeuralRepresentation<float> rep;  // continuous; encode_stream hard-quantizes
  SideParams<float> phi;
  PsiParams<float> psi;
  std::vector<TrainLogRecord> log;
};

using LogSink = std::function<void(const TrainLogRecord&)>;

// Deterministic in (video, configs, seed). Throws NumericError with a
// diagnostic snapshot message if the loss leaves the finite range.
TrainedModel train(const VideoBuffer& video, const ModelConfig& mc,
                   const CodecConfig& cc, const TrainConfig& tc,
                   const LogSink& sink = {});

// Continues a checkpointed run to completion under the same configuration;
// the result is bit-identical to the uninterrupted run.
TrainedModel train_resume(const std::string& checkpoint_path, const VideoBuffer& video,
                          const ModelConfig& mc, const CodecConfig& cc,
                          const TrainConfig& tc, const LogSink& sink = {});

// Scalar distortion formulas, exposed for tests and reporting.
double rgb_distortion_value(double l1, double ms_ssim);
double yuv_distortion_value(double mse_y, double mse_u, double mse_v, double ms_ssim_y);

// Differentiable distortions over (C, T, H, W) patches in the respective
// color space; 5x5 MS-SSIM window. Throws UsageError on shape mismatch.
template <typename S>
Tensor<S> distortion_rgb(const Tensor<S>& pred, const Tensor<S>& target);
template <typename S>
Tensor<S> distortion_yuv(const Tensor<S>& pred, const Tensor<S>& target);

}  // namespace nvrc
