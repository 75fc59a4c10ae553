#include "nvrc/trainer.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "nvrc/common.hpp"
#include "nvrc/entropy.hpp"
#include "nvrc/metrics.hpp"
#include "nvrc/quant.hpp"

namespace nvrc {

namespace {

constexpr double kPi = 3.14159265358979323846;
constexpr double kAdamBeta1 = 0.9;
constexpr double kAdamBeta2 = 0.999;
constexpr double kAdamEps = 1e-8;
constexpr double kFixedGridLogStep = -4.0;  // mirrors the non-learned coding path
constexpr double kRawHalfBits = 16.0;       // uncoded side parameters, half per value
constexpr double kMseFloor = 1e-12;         // keeps the geometric mean's gradient finite
constexpr int64_t kTrainWindow = 5;

constexpr uint32_t kCheckpointMagic = 0x4E565443;  // "NVTC"
constexpr uint16_t kCheckpointVersion = 1;

double lerp(double a, double b, double p) { return a + (b - a) * p; }

Tensor<float> accum(Tensor<float> acc, Tensor<float> x) {
  return acc.defined() ? add(acc, x) : x;
}

// ---- schedules ------------------------------------------------------------

struct StepSchedule {
  int64_t stage = 1;
  double lr = 0.0;
  double l2 = 0.0;
  QuantView view;
};

StepSchedule schedule_at(const TrainConfig& tc, int64_t step) {
  StepSchedule s;
  const bool first = step < tc.stage1_steps;
  const int64_t n = first ? tc.stage1_steps : tc.stage2_steps;
  const int64_t i = first ? step : step - tc.stage1_steps;
  const double p = n > 1 ? static_cast<double>(i) / static_cast<double>(n - 1) : 0.0;
  const double cosw = 0.5 * (1.0 + std::cos(kPi * p));
  if (first) {
    s.stage = 1;
    s.lr = tc.lr1_end + (tc.lr1_start - tc.lr1_end) * cosw;
    s.l2 = tc.l2_start * (1.0 - p);
    s.view = QuantView{QuantMode::kSoftNoise, lerp(tc.temperature_start, tc.temperature_end, p),
                       lerp(tc.noise_a_start, tc.noise_a_end, p), 1.0};
  } else {
    s.stage = 2;
    s.lr = tc.lr2_end + (tc.lr2_start - tc.lr2_end) * cosw;
    s.l2 = 0.0;
    s.view = QuantView{QuantMode::kQuantNoise, tc.temperature_end, 1.0,
                       lerp(tc.quant_noise_start, tc.quant_noise_end, p)};
  }
  return s;
}

// ---- trainable leaves -----------------------------------------------------

enum class LeafKind : uint8_t { kTheta = 0, kPhiQuant = 1, kPhiEm = 2, kPsi = 3 };

struct Leaf {
  Tensor<float>* t = nullptr;
  LeafKind kind = LeafKind::kTheta;
  std::vector<float> m, v;  // Adam moments
  int64_t steps = 0;        // participations, for bias correction
};

struct RunState {
  NeuralRepresentation<float> rep;
  SideParams<float> phi;
  PsiParams<float> psi;
  std::vector<Leaf> leaves;  // pointers into rep/phi/psi
  Rng rng{0};
  int64_t next_step = 0;
  std::vector<TrainLogRecord> log;
};

std::vector<Leaf> collect_leaves(NeuralRepresentation<float>& rep, SideParams<float>& sp,
                                 PsiParams<float>& psi, const ModelConfig& mc,
                                 const CodecConfig& cc) {
  std::vector<Leaf> out;
  auto push = [&](Tensor<float>& t, LeafKind k) {
    Leaf l;
    l.t = &t;
    l.kind = k;
    l.m.assign(static_cast<size_t>(t.numel()), 0.0f);
    l.v.assign(static_cast<size_t>(t.numel()), 0.0f);
    out.push_back(std::move(l));
  };
  for (auto& g : rep.grids) push(g, LeafKind::kTheta);
  for (auto& [name, t] : rep.layers) push(t, LeafKind::kTheta);
  for_each_phi(mc, cc, sp, [&](const PhiTensorInfo& info, Tensor<float>& t) {
    push(t, info.kind == PhiKind::kQuant ? LeafKind::kPhiQuant : LeafKind::kPhiEm);
  });
  if (cc.code_level2) {
    for (size_t i = 0; i < psi.log_step.size(); ++i) {
      push(psi.log_step[i], LeafKind::kPsi);
      push(psi.mu[i], LeafKind::kPsi);
      push(psi.log_sigma[i], LeafKind::kPsi);
    }
  }
  return out;
}

// ---- relaxed quantization and rate graphs ---------------------------------

// One pass of the quantizer over every model tensor; the dequantized values
// form the representation the synthesis network actually runs on, so both
// distortion and rate see the same relaxation.
struct QuantTheta {
  NeuralRepresentation<float> relaxed;
  std::vector<Tensor<float>> grid_sym, grid_delta;
  std::vector<Tensor<float>> layer_sym, layer_delta;  // (rows, cols) views
};

Tensor<float> layer_delta_tensor(const LayerSide<float>& ls, int64_t rows) {
  switch (ls.quant_mode) {
    case AxisMode::kDual:
      return combine_layer_scales(ls.lq_out, ls.lq_in);
    case AxisMode::kSingleOut:
      // (rows, 1): a bare (rows) vector would broadcast along the wrong axis.
      return reshape(exp(ls.lq_out), {rows, 1});
    case AxisMode::kPerTensor:
      return exp(ls.lq_out);
  }
  throw ConfigError("unknown axis mode");
}

QuantTheta quantize_theta(const NeuralRepresentation<float>& rep, SideParams<float>& sp,
                          const CodecConfig& cc, const QuantView& view, Rng* rng) {
  QuantTheta qt;
  qt.relaxed.config = rep.config;
  for (size_t l = 0; l < rep.grids.size(); ++l) {
    const auto& shape = rep.grids[l].shape();
    Tensor<float> delta =
        cc.learned_grid_step
            ? expand_block_scales(sp.grids[l].log_delta, shape, cc.grid_block)
            : Tensor<float>(shape, static_cast<float>(std::exp(kFixedGridLogStep)));
    Quantized<float> q = quantize(rep.grids[l], delta, view, rng);
    qt.relaxed.grids.push_back(std::move(q.dequant));
    qt.grid_sym.push_back(std::move(q.symbols));
    qt.grid_delta.push_back(std::move(delta));
  }
  for (size_t i = 0; i < rep.layers.size(); ++i) {
    const auto& [name, t] = rep.layers[i];
    Tensor<float> v2d = reshape_layer_param(t);
    Tensor<float> delta = layer_delta_tensor(sp.layers[i], v2d.shape()[0]);
    Quantized<float> q = quantize(v2d, delta, view, rng);
    qt.relaxed.layers.emplace_back(name, reshape(q.dequant, t.shape()));
    qt.layer_sym.push_back(std::move(q.symbols));
    qt.layer_delta.push_back(std::move(delta));
  }
  return qt;
}

// Grid rate under the level's entropy model, walking the same block raster
// the coder uses so context predictions never cross block boundaries.
Tensor<float> grid_rate(const QuantTheta& qt, SideParams<float>& sp, const CodecConfig& cc,
                        size_t level) {
  const Tensor<float>& sym = qt.grid_sym[level];
  const Tensor<float>& deq = qt.relaxed.grids[level];
  const Tensor<float>& delta = qt.grid_delta[level];
  GridSide<float>& gs = sp.grids[level];
  if (cc.grid_em == GridEm::kPerTensor)
    return rate_bits(sym, gs.mu, exp(gs.log_sigma), delta);
  const auto& sh = sym.shape();
  const auto& blk = cc.grid_block;
  Tensor<float> total;
  for (int64_t t0 = 0; t0 < sh[1]; t0 += blk[0]) {
    for (int64_t h0 = 0; h0 < sh[2]; h0 += blk[1]) {
      for (int64_t w0 = 0; w0 < sh[3]; w0 += blk[2]) {
        const std::vector<int64_t> start = {0, t0, h0, w0};
        const std::vector<int64_t> size = {sh[0], std::min(blk[0], sh[1] - t0),
                                           std::min(blk[1], sh[2] - h0),
                                           std::min(blk[2], sh[3] - w0)};
        Tensor<float> zb = slice(deq, start, size);
        Tensor<float> sb = slice(sym, start, size);
        Tensor<float> db = slice(delta, start, size);
        for (int64_t c = 0; c < sh[0]; ++c) {
          ContextPrediction<float> pred = context_predict(zb, c, gs.ctx, cc.context);
          Tensor<float> sc = slice(sb, {c, 0, 0, 0}, {1, size[1], size[2], size[3]});
          Tensor<float> dc = slice(db, {c, 0, 0, 0}, {1, size[1], size[2], size[3]});
          total = accum(total, rate_bits(sc, pred.mu, exp(pred.log_sigma), dc));
        }
      }
    }
  }
  return total;
}

Tensor<float> layer_rate(const QuantTheta& qt, SideParams<float>& sp, size_t i) {
  const Tensor<float>& sym = qt.layer_sym[i];
  const Tensor<float>& delta = qt.layer_delta[i];
  LayerSide<float>& ls = sp.layers[i];
  const int64_t rows = sym.shape()[0];
  switch (ls.em_mode) {
    case AxisMode::kDual: {
      auto [mu, sigma] = combine_dual_axis(ls.mu_out, ls.mu_in, ls.ls_out, ls.ls_in);
      return rate_bits(sym, mu, sigma, delta);
    }
    case AxisMode::kSingleOut:
      return rate_bits(sym, reshape(ls.mu_out, {rows, 1}), reshape(exp(ls.ls_out), {rows, 1}),
                       delta);
    case AxisMode::kPerTensor:
      return rate_bits(sym, ls.mu_out, exp(ls.ls_out), delta);
  }
  throw ConfigError("unknown axis mode");
}

// Side parameters under the per-tensor scalars, relaxed the same way as the
// model. The symbols keep their gradient so rate pressure reaches the side
// parameters themselves, not just the scalars.
Tensor<float> phi_rate(const ModelConfig& mc, const CodecConfig& cc, SideParams<float>& sp,
                       PsiParams<float>& psi, const QuantView& view, Rng* rng) {
  Tensor<float> total;
  size_t idx = 0;
  for_each_phi(mc, cc, sp, [&](const PhiTensorInfo&, Tensor<float>& t) {
    Tensor<float> delta = exp(psi.log_step[idx]);
    Quantized<float> q = quantize(t, delta, view, rng);
    total = accum(total, rate_bits(q.symbols, psi.mu[idx], exp(psi.log_sigma[idx]), delta));
    ++idx;
  });
  return total;
}

int64_t phi_value_count(const ModelConfig& mc, const CodecConfig& cc) {
  int64_t n = 0;
  for (const auto& info : build_phi_manifest(mc, cc)) {
    int64_t e = 1;
    for (int64_t d : info.shape) e *= d;
    n += e;
  }
  return n;
}

double psi_raw_bits(const ModelConfig& mc, const CodecConfig& cc) {
  if (!cc.code_level2) return 0.0;
  const double per = cc.psi_full ? 32.0 : 16.0;
  return static_cast<double>(build_phi_manifest(mc, cc).size()) * 3.0 * per;
}

Tensor<float> theta_rate(const QuantTheta& qt, SideParams<float>& sp, const CodecConfig& cc) {
  Tensor<float> bits;
  for (size_t l = 0; l < qt.grid_sym.size(); ++l) bits = accum(bits, grid_rate(qt, sp, cc, l));
  for (size_t i = 0; i < qt.layer_sym.size(); ++i) bits = accum(bits, layer_rate(qt, sp, i));
  return bits;
}

// ---- optimizer ------------------------------------------------------------

void apply_updates(std::vector<Leaf>& leaves, std::vector<std::vector<float>>& grads,
                   const std::vector<char>& active, const StepSchedule& sch, double clip_norm,
                   int64_t step) {
  // Weight decay joins the gradient before clipping so its pull is bounded
  // together with everything else; it only ever touches model weights.
  if (sch.l2 > 0.0) {
    for (size_t i = 0; i < leaves.size(); ++i) {
      if (!active[i] || leaves[i].kind != LeafKind::kTheta) continue;
      const auto& w = leaves[i].t->values();
      auto& g = grads[i];
      for (size_t e = 0; e < g.size(); ++e)
        g[e] += static_cast<float>(sch.l2 * static_cast<double>(w[e]));
    }
  }
  double nsq = 0.0;
  for (size_t i = 0; i < leaves.size(); ++i) {
    if (!active[i]) continue;
    for (float g : grads[i]) nsq += static_cast<double>(g) * static_cast<double>(g);
  }
  if (!std::isfinite(nsq)) {
    char buf[128];
    std::snprintf(buf, sizeof buf, "gradient norm left the finite range at step %lld (stage %lld)",
                  static_cast<long long>(step), static_cast<long long>(sch.stage));
    throw NumericError(buf);
  }
  const double norm = std::sqrt(nsq);
  const double scale = norm > clip_norm ? clip_norm / norm : 1.0;
  for (size_t i = 0; i < leaves.size(); ++i) {
    if (!active[i]) continue;
    Leaf& lf = leaves[i];
    lf.steps += 1;
    const double bc1 = 1.0 - std::pow(kAdamBeta1, static_cast<double>(lf.steps));
    const double bc2 = 1.0 - std::pow(kAdamBeta2, static_cast<double>(lf.steps));
    auto& w = lf.t->mutable_values();
    const auto& g = grads[i];
    for (size_t e = 0; e < g.size(); ++e) {
      const double ge = static_cast<double>(g[e]) * scale;
      const double m = kAdamBeta1 * static_cast<double>(lf.m[e]) + (1.0 - kAdamBeta1) * ge;
      const double v = kAdamBeta2 * static_cast<double>(lf.v[e]) + (1.0 - kAdamBeta2) * ge * ge;
      lf.m[e] = static_cast<float>(m);
      lf.v[e] = static_cast<float>(v);
      const double upd = sch.lr * (m / bc1) / (std::sqrt(v / bc2) + kAdamEps);
      w[e] = static_cast<float>(static_cast<double>(w[e]) - upd);
    }
  }
}

// ---- hard-quantized evaluation ---------------------------------------------

TrainLogRecord hard_eval_record(RunState& st, const ModelConfig& mc, const CodecConfig& cc,
                                const TrainConfig& tc, const Tensor<float>& target, int64_t step,
                                int64_t stage, StepKind kind, double px) {
  const QuantView hard{};
  QuantTheta qt = quantize_theta(st.rep, st.phi, cc, hard, nullptr);
  const double inr_bits = theta_rate(qt, st.phi, cc).item();
  const double em_bits =
      cc.code_level2 ? phi_rate(mc, cc, st.phi, st.psi, hard, nullptr).item()
                     : kRawHalfBits * static_cast<double>(phi_value_count(mc, cc));
  Tensor<float> planar = transpose(render_video(qt.relaxed), {3, 0, 1, 2});
  const double d = (tc.loss == LossMode::kRgb ? distortion_rgb(planar, target)
                                              : distortion_yuv(planar, target))
                       .item();
  TrainLogRecord rec;
  rec.step = step;
  rec.stage = stage;
  rec.kind = kind;
  rec.loss.d = d;
  rec.loss.r_inr = inr_bits / px;
  rec.loss.r_em = em_bits / px;
  rec.loss.total = rec.loss.r_inr + rec.loss.r_em + tc.lambda_rd * d;
  rec.loss.bpp = rec.loss.r_inr + rec.loss.r_em + psi_raw_bits(mc, cc) / px;
  rec.psnr = tc.loss == LossMode::kRgb ? psnr(planar.values(), target.values(), 1.0).db
                                       : psnr_yuv_611(planar.values(), target.values(), 1.0).db;
  return rec;
}

// ---- checkpoints ------------------------------------------------------------

void put_u16(std::vector<uint8_t>& out, uint16_t v) {
  out.push_back(static_cast<uint8_t>(v));
  out.push_back(static_cast<uint8_t>(v >> 8));
}
void put_u32(std::vector<uint8_t>& out, uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<uint8_t>(v >> (8 * i)));
}
void put_u64(std::vector<uint8_t>& out, uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<uint8_t>(v >> (8 * i)));
}
void put_i64(std::vector<uint8_t>& out, int64_t v) { put_u64(out, static_cast<uint64_t>(v)); }
void put_f32(std::vector<uint8_t>& out, float v) {
  uint32_t b;
  std::memcpy(&b, &v, 4);
  put_u32(out, b);
}
void put_f64(std::vector<uint8_t>& out, double v) {
  uint64_t b;
  std::memcpy(&b, &v, 8);
  put_u64(out, b);
}

struct ByteReader {
  std::span<const uint8_t> s;
  size_t pos = 0;
  void need(size_t n) const {
    if (pos + n > s.size()) throw DecodeError("checkpoint truncated");
  }
  uint16_t u16() {
    need(2);
    uint16_t v = static_cast<uint16_t>(s[pos] | (s[pos + 1] << 8));
    pos += 2;
    return v;
  }
  uint32_t u32() {
    need(4);
    uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(s[pos + i]) << (8 * i);
    pos += 4;
    return v;
  }
  uint64_t u64() {
    need(8);
    uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(s[pos + i]) << (8 * i);
    pos += 8;
    return v;
  }
  int64_t i64() { return static_cast<int64_t>(u64()); }
  float f32() {
    const uint32_t b = u32();
    float v;
    std::memcpy(&v, &b, 4);
    return v;
  }
  double f64() {
    const uint64_t b = u64();
    double v;
    std::memcpy(&v, &b, 8);
    return v;
  }
};

// The digest pins both the trajectory-defining configuration and the video
// content, so a checkpoint can only resume the run that wrote it.
uint32_t run_digest(const VideoBuffer& v, const ModelConfig& mc, const CodecConfig& cc,
                    const TrainConfig& tc) {
  std::string s;
  char buf[128];
  auto num = [&](double x) {
    std::snprintf(buf, sizeof buf, "%.17g;", x);
    s += buf;
  };
  auto inum = [&](int64_t x) {
    std::snprintf(buf, sizeof buf, "%lld;", static_cast<long long>(x));
    s += buf;
  };
  inum(mc.video_t), inum(mc.video_h), inum(mc.video_w);
  inum(mc.t_patch), inum(mc.h_patch), inum(mc.w_patch), inum(mc.c_patch);
  inum(mc.grid_t), inum(mc.grid_h), inum(mc.grid_w), inum(mc.grid_c), inum(mc.grid_levels);
  num(mc.grid_scale_t), num(mc.grid_scale_h), num(mc.grid_scale_w), num(mc.grid_scale_c);
  for (int64_t c : mc.channels) inum(c);
  for (int64_t d : mc.depths) inum(d);
  for (int64_t st : mc.strides) inum(st);
  inum(mc.kernel), inum(mc.expansion);
  for (int64_t k : mc.stem_kernel) inum(k);
  inum(mc.local_t), inum(mc.local_hw);
  inum(static_cast<int64_t>(cc.grid_em)), inum(static_cast<int64_t>(cc.layer_em));
  inum(cc.code_level2), inum(cc.learned_grid_step), inum(cc.psi_full), inum(cc.axis_threshold);
  for (int64_t b : cc.grid_block) inum(b);
  inum(cc.context.kernel), inum(cc.context.width), inum(cc.context.shared_weights);
  num(tc.lambda_rd), inum(tc.rate_period), inum(tc.stage1_steps), inum(tc.stage2_steps);
  num(tc.lr1_start), num(tc.lr1_end), num(tc.lr2_start), num(tc.lr2_end);
  num(tc.clip_norm), num(tc.l2_start);
  num(tc.temperature_start), num(tc.temperature_end);
  num(tc.noise_a_start), num(tc.noise_a_end);
  num(tc.quant_noise_start), num(tc.quant_noise_end);
  inum(tc.patch_t), inum(tc.patch_h), inum(tc.patch_w), inum(tc.patches_per_step);
  inum(static_cast<int64_t>(tc.seed)), inum(static_cast<int64_t>(tc.loss)), inum(tc.alternating);
  const uint32_t c1 = crc32(std::span<const uint8_t>(
      reinterpret_cast<const uint8_t*>(s.data()), s.size()));
  const uint32_t c2 = crc32(std::span<const uint8_t>(
      reinterpret_cast<const uint8_t*>(v.planes.data()), v.planes.size() * sizeof(float)));
  std::vector<uint8_t> mix;
  put_u32(mix, c1);
  put_u32(mix, c2);
  put_u32(mix, static_cast<uint32_t>(v.color));
  return crc32(mix);
}

void save_checkpoint(const std::string& path, uint32_t digest, int64_t next_step,
                     const RunState& st) {
  std::vector<uint8_t> out;
  put_u32(out, kCheckpointMagic);
  put_u16(out, kCheckpointVersion);
  put_u32(out, digest);
  put_i64(out, next_step);
  for (uint64_t w : st.rng.state()) put_u64(out, w);
  put_u64(out, st.leaves.size());
  for (const Leaf& lf : st.leaves) {
    const auto& w = lf.t->values();
    put_u64(out, w.size());
    for (float x : w) put_f32(out, x);
    for (float x : lf.m) put_f32(out, x);
    for (float x : lf.v) put_f32(out, x);
    put_i64(out, lf.steps);
  }
  put_u64(out, st.log.size());
  for (const TrainLogRecord& r : st.log) {
    put_i64(out, r.step);
    put_i64(out, r.stage);
    out.push_back(static_cast<uint8_t>(r.kind));
    put_f64(out, r.loss.d);
    put_f64(out, r.loss.r_inr);
    put_f64(out, r.loss.r_em);
    put_f64(out, r.loss.total);
    put_f64(out, r.loss.bpp);
    put_f64(out, r.psnr);
  }
  put_u32(out, crc32(out));
  // Stage through a sibling so an interrupted write never clobbers the last
  // good checkpoint.
  const std::string tmp = path + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw UsageError("cannot write checkpoint: " + tmp);
    f.write(reinterpret_cast<const char*>(out.data()), static_cast<std::streamsize>(out.size()));
    if (!f) throw UsageError("cannot write checkpoint: " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

void load_checkpoint(const std::string& path, uint32_t digest, RunState& st) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw UsageError("cannot read checkpoint: " + path);
  std::vector<uint8_t> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  if (bytes.size() < 4) throw DecodeError("checkpoint truncated");
  const std::span<const uint8_t> body(bytes.data(), bytes.size() - 4);
  ByteReader tail{std::span<const uint8_t>(bytes.data() + body.size(), 4)};
  if (crc32(body) != tail.u32()) throw DecodeError("checkpoint checksum mismatch");
  ByteReader r{body};
  if (r.u32() != kCheckpointMagic) throw DecodeError("not a training checkpoint");
  if (r.u16() != kCheckpointVersion) throw DecodeError("unsupported checkpoint version");
  if (r.u32() != digest)
    throw ConfigError("checkpoint was written under a different configuration or input");
  st.next_step = r.i64();
  std::array<uint64_t, 4> rs;
  for (auto& w : rs) w = r.u64();
  st.rng.set_state(rs);
  if (r.u64() != st.leaves.size()) throw ConfigError("checkpoint parameter count mismatch");
  for (Leaf& lf : st.leaves) {
    auto& w = lf.t->mutable_values();
    if (r.u64() != w.size()) throw ConfigError("checkpoint parameter shape mismatch");
    for (auto& x : w) x = r.f32();
    for (auto& x : lf.m) x = r.f32();
    for (auto& x : lf.v) x = r.f32();
    lf.steps = r.i64();
  }
  st.log.resize(r.u64());
  for (TrainLogRecord& rec : st.log) {
    rec.step = r.i64();
    rec.stage = r.i64();
    r.need(1);
    rec.kind = static_cast<StepKind>(r.s[r.pos++]);
    rec.loss.d = r.f64();
    rec.loss.r_inr = r.f64();
    rec.loss.r_em = r.f64();
    rec.loss.total = r.f64();
    rec.loss.bpp = r.f64();
    rec.psnr = r.f64();
  }
  if (r.pos != r.s.size()) throw DecodeError("trailing bytes in checkpoint");
}

// ---- the training loop ------------------------------------------------------

TrainedModel run_training(const VideoBuffer& video, const ModelConfig& mc, const CodecConfig& cc,
                          const TrainConfig& tc, const LogSink& sink,
                          const std::string& resume_from) {
  validate_config(mc);
  validate_codec_config(cc);
  validate_train_config(tc, mc);
  validate_video(video);
  if (video.t != mc.video_t || video.h != mc.video_h || video.w != mc.video_w)
    throw UsageError("video extents disagree with the model configuration");

  const VideoBuffer space = tc.loss == LossMode::kYuv444 ? to_yuv444(video) : to_rgb(video);
  const Tensor<float> target = video_tensor(space);

  RunState st;
  st.rng = Rng(tc.seed);
  const uint64_t model_seed = st.rng.next_u64();
  const uint64_t side_seed = st.rng.next_u64();
  st.rep = init_model<float>(mc, model_seed);
  st.phi = init_side_params(st.rep, cc, side_seed);
  st.psi = init_psi<float>(mc, cc);
  st.leaves = collect_leaves(st.rep, st.phi, st.psi, mc, cc);

  const uint32_t digest = run_digest(video, mc, cc, tc);
  if (!resume_from.empty()) load_checkpoint(resume_from, digest, st);

  const int64_t total_steps = tc.stage1_steps + tc.stage2_steps;
  const double px = static_cast<double>(mc.video_t) * static_cast<double>(mc.video_h) *
                    static_cast<double>(mc.video_w);
  const int64_t nt = mc.video_t / mc.t_patch;
  const int64_t nh = mc.video_h / mc.h_patch;
  const int64_t nw = mc.video_w / mc.w_patch;

  for (int64_t s = st.next_step; s < total_steps; ++s) {
    const StepSchedule sch = schedule_at(tc, s);
    const StepKind kind =
        !tc.alternating
            ? StepKind::kJoint
            : (s % (tc.rate_period + 1) == tc.rate_period ? StepKind::kRate
                                                          : StepKind::kDistortion);

    std::vector<std::vector<float>> grads(st.leaves.size());
    std::vector<char> active(st.leaves.size(), 0);
    double d_item = 0.0, r_item = 0.0, loss_item = 0.0;
    {
      Tape<float> tape;
      for (size_t i = 0; i < st.leaves.size(); ++i) {
        const LeafKind k = st.leaves[i].kind;
        const bool on = kind != StepKind::kDistortion || k == LeafKind::kTheta ||
                        k == LeafKind::kPhiQuant;
        if (on) {
          tape.watch(*st.leaves[i].t);
          active[i] = 1;
        }
      }
      QuantTheta qt = quantize_theta(st.rep, st.phi, cc, sch.view, &st.rng);
      Tensor<float> loss;
      if (kind != StepKind::kRate) {
        Tensor<float> dsum;
        for (int64_t p = 0; p < tc.patches_per_step; ++p) {
          const auto pk = static_cast<int64_t>(st.rng.next_u64() % static_cast<uint64_t>(nt));
          const auto pj = static_cast<int64_t>(st.rng.next_u64() % static_cast<uint64_t>(nh));
          const auto pi = static_cast<int64_t>(st.rng.next_u64() % static_cast<uint64_t>(nw));
          Tensor<float> pred =
              transpose(forward(qt.relaxed, {pi, pj, pk}, OutputMode::kTrain), {3, 0, 1, 2});
          Tensor<float> tgt =
              slice(target, {0, pk * mc.t_patch, pj * mc.h_patch, pi * mc.w_patch},
                    {3, mc.t_patch, mc.h_patch, mc.w_patch});
          Tensor<float> d =
              tc.loss == LossMode::kRgb ? distortion_rgb(pred, tgt) : distortion_yuv(pred, tgt);
          dsum = accum(dsum, d);
        }
        Tensor<float> davg = mul_scalar(dsum, 1.0 / static_cast<double>(tc.patches_per_step));
        d_item = static_cast<double>(davg.item());
        loss = mul_scalar(davg, tc.lambda_rd);
      }
      if (kind != StepKind::kDistortion) {
        Tensor<float> bits = theta_rate(qt, st.phi, cc);
        if (cc.code_level2)
          bits = accum(bits, phi_rate(mc, cc, st.phi, st.psi, sch.view, &st.rng));
        Tensor<float> r_bpp = mul_scalar(bits, 1.0 / px);
        r_item = static_cast<double>(r_bpp.item());
        loss = kind == StepKind::kJoint
                   ? add(loss, r_bpp)
                   : mul_scalar(r_bpp, static_cast<double>(tc.rate_period));
      }
      loss_item = static_cast<double>(loss.item());
      if (!std::isfinite(loss_item)) {
        char buf[256];
        std::snprintf(buf, sizeof buf,
                      "training diverged at step %lld (stage %lld): loss=%g D=%g R=%g lr=%g "
                      "temperature=%g",
                      static_cast<long long>(s), static_cast<long long>(sch.stage), loss_item,
                      d_item, r_item, sch.lr, sch.view.temperature);
        throw NumericError(buf);
      }
      tape.backward(loss);
      for (size_t i = 0; i < st.leaves.size(); ++i) {
        if (!active[i]) continue;
        const std::span<const float> g = tape.grad(*st.leaves[i].t);
        if (g.empty())
          grads[i].assign(static_cast<size_t>(st.leaves[i].t->numel()), 0.0f);
        else
          grads[i].assign(g.begin(), g.end());
      }
    }  // the tape releases its nodes here; mutating leaves is safe again

    apply_updates(st.leaves, grads, active, sch, tc.clip_norm, s);

    const int64_t done = s + 1;
    if (tc.log_every > 0 && (done % tc.log_every == 0 || done == total_steps)) {
      TrainLogRecord rec = hard_eval_record(st, mc, cc, tc, target, s, sch.stage, kind, px);
      st.log.push_back(rec);
      if (sink) sink(rec);
    }
    if (!tc.checkpoint_path.empty() && tc.checkpoint_every > 0 && done % tc.checkpoint_every == 0 &&
        done < total_steps)
      save_checkpoint(tc.checkpoint_path, digest, done, st);
  }
  if (!tc.checkpoint_path.empty()) save_checkpoint(tc.checkpoint_path, digest, total_steps, st);

  TrainedModel out;
  out.rep = std::move(st.rep);
  out.phi = std::move(st.phi);
  out.psi = std::move(st.psi);
  out.log = std::move(st.log);
  return out;
}

}  // namespace

// ---- public surface ---------------------------------------------------------

void validate_train_config(const TrainConfig& tc, const ModelConfig& mc) {
  if (!(tc.lambda_rd >= 0.0) || !std::isfinite(tc.lambda_rd))
    throw ConfigError("lambda must be finite and nonnegative");
  if (tc.rate_period < 1) throw ConfigError("rate period must be at least 1");
  if (tc.stage1_steps < 0 || tc.stage2_steps < 0 || tc.stage1_steps + tc.stage2_steps < 1)
    throw ConfigError("training needs at least one step");
  for (double lr : {tc.lr1_start, tc.lr1_end, tc.lr2_start, tc.lr2_end})
    if (!(lr > 0.0) || !std::isfinite(lr)) throw ConfigError("learning rates must be positive");
  if (!(tc.clip_norm > 0.0)) throw ConfigError("clip norm must be positive");
  if (tc.l2_start < 0.0) throw ConfigError("weight decay must be nonnegative");
  if (!(tc.temperature_start > 0.0) || !(tc.temperature_end > 0.0))
    throw ConfigError("temperatures must be positive");
  if (!(tc.noise_a_start > 0.0) || !(tc.noise_a_end > 0.0))
    throw ConfigError("noise shapes must be positive");
  for (double q : {tc.quant_noise_start, tc.quant_noise_end})
    if (q < 0.0 || q > 1.0) throw ConfigError("quant-noise ratios must lie in [0, 1]");
  if (tc.patch_t != mc.t_patch || tc.patch_h != mc.h_patch || tc.patch_w != mc.w_patch)
    throw ConfigError("training patch extents disagree with the model");
  if (tc.patches_per_step < 1) throw ConfigError("patches per step must be at least 1");
  if (tc.log_every < 0 || tc.checkpoint_every < 0)
    throw ConfigError("cadences must be nonnegative");
  if (tc.checkpoint_every > 0 && tc.checkpoint_path.empty())
    throw ConfigError("checkpoint cadence set without a path");
}

std::string format_log_record(const TrainLogRecord& r) {
  const char* kind = r.kind == StepKind::kDistortion ? "distortion"
                     : r.kind == StepKind::kRate     ? "rate"
                                                     : "joint";
  char buf[256];
  std::snprintf(buf, sizeof buf,
                "step=%lld stage=%lld kind=%s D=%.6f R_inr=%.6f R_em=%.6f L=%.6f bpp=%.6f "
                "psnr=%.3f",
                static_cast<long long>(r.step), static_cast<long long>(r.stage), kind, r.loss.d,
                r.loss.r_inr, r.loss.r_em, r.loss.total, r.loss.bpp, r.psnr);
  return buf;
}

TrainedModel train(const VideoBuffer& video, const ModelConfig& mc, const CodecConfig& cc,
                   const TrainConfig& tc, const LogSink& sink) {
  return run_training(video, mc, cc, tc, sink, "");
}

TrainedModel train_resume(const std::string& checkpoint_path, const VideoBuffer& video,
                          const ModelConfig& mc, const CodecConfig& cc, const TrainConfig& tc,
                          const LogSink& sink) {
  if (checkpoint_path.empty()) throw UsageError("resume needs a checkpoint path");
  return run_training(video, mc, cc, tc, sink, checkpoint_path);
}

double rgb_distortion_value(double l1, double ms_ssim) {
  return 0.7 * l1 + 0.3 * (1.0 - ms_ssim);
}

double yuv_distortion_value(double mse_y, double mse_u, double mse_v, double ms_ssim_y) {
  return 0.99 * std::pow(mse_y + kMseFloor, 0.75) * std::pow(mse_u + kMseFloor, 0.125) *
             std::pow(mse_v + kMseFloor, 0.125) +
         0.01 * (1.0 - ms_ssim_y);
}

namespace {

template <typename S>
void check_patch_pair(const Tensor<S>& pred, const Tensor<S>& target) {
  if (!pred.defined() || !target.defined())
    throw UsageError("distortion needs defined tensors");
  if (pred.shape().size() != 4) throw UsageError("distortion expects (C, T, H, W)");
  if (pred.shape() != target.shape()) throw UsageError("distortion shape mismatch");
}

template <typename S>
Tensor<S> channel_mse(const Tensor<S>& pred, const Tensor<S>& target, int64_t c) {
  const auto& sh = pred.shape();
  const std::vector<int64_t> start = {c, 0, 0, 0};
  const std::vector<int64_t> size = {1, sh[1], sh[2], sh[3]};
  Tensor<S> d = sub(slice(pred, start, size), slice(target, start, size));
  return mean_all(mul(d, d));
}

}  // namespace

template <typename S>
Tensor<S> distortion_rgb(const Tensor<S>& pred, const Tensor<S>& target) {
  check_patch_pair(pred, target);
  Tensor<S> l1 = mean_all(abs(sub(pred, target)));
  Tensor<S> ms = ms_ssim_train(pred, target, kTrainWindow);
  Tensor<S> one_minus = add_scalar(mul_scalar(ms, -1.0), 1.0);
  return add(mul_scalar(l1, 0.7), mul_scalar(one_minus, 0.3));
}

template <typename S>
Tensor<S> distortion_yuv(const Tensor<S>& pred, const Tensor<S>& target) {
  check_patch_pair(pred, target);
  if (pred.shape()[0] != 3) throw UsageError("YUV distortion expects three channels");
  Tensor<S> my = add_scalar(channel_mse(pred, target, 0), kMseFloor);
  Tensor<S> mu = add_scalar(channel_mse(pred, target, 1), kMseFloor);
  Tensor<S> mv = add_scalar(channel_mse(pred, target, 2), kMseFloor);
  Tensor<S> mean =
      mul(mul(pow_scalar(my, 6.0 / 8.0), pow_scalar(mu, 1.0 / 8.0)), pow_scalar(mv, 1.0 / 8.0));
  const auto& sh = pred.shape();
  const std::vector<int64_t> ysz = {1, sh[1], sh[2], sh[3]};
  Tensor<S> ms = ms_ssim_train(slice(pred, {0, 0, 0, 0}, ysz), slice(target, {0, 0, 0, 0}, ysz),
                               kTrainWindow);
  Tensor<S> one_minus = add_scalar(mul_scalar(ms, -1.0), 1.0);
  return add(mul_scalar(mean, 0.99), mul_scalar(one_minus, 0.01));
}

template Tensor<float> distortion_rgb<float>(const Tensor<float>&, const Tensor<float>&);
template Tensor<double> distortion_rgb<double>(const Tensor<double>&, const Tensor<double>&);
template Tensor<float> distortion_yuv<float>(const Tensor<float>&, const Tensor<float>&);
template Tensor<double> distortion_yuv<double>(const Tensor<double>&, const Tensor<double>&);

}  // namespace nvrc
