#include "nvrc/hierarchy.hpp"

#include <algorithm>
#include <atomic>
#include <bit>
#include <cmath>
#include <cstring>
#include <exception>
#include <mutex>
#include <string>
#include <utility>

#include "nvrc/coder.hpp"
#include "nvrc/common.hpp"
#include "nvrc/detmath.hpp"
#include "nvrc/half.hpp"

namespace nvrc {

namespace {

// ---- little-endian byte plumbing ----

void put_u8(std::vector<uint8_t>& o, uint8_t v) { o.push_back(v); }
void put_u16(std::vector<uint8_t>& o, uint16_t v) {
  o.push_back(static_cast<uint8_t>(v));
  o.push_back(static_cast<uint8_t>(v >> 8));
}
void put_u32(std::vector<uint8_t>& o, uint32_t v) {
  for (int i = 0; i < 4; ++i) o.push_back(static_cast<uint8_t>(v >> (8 * i)));
}
void put_u64(std::vector<uint8_t>& o, uint64_t v) {
  for (int i = 0; i < 8; ++i) o.push_back(static_cast<uint8_t>(v >> (8 * i)));
}
void put_f64(std::vector<uint8_t>& o, double v) { put_u64(o, std::bit_cast<uint64_t>(v)); }

struct ByteReader {
  std::span<const uint8_t> data;
  size_t pos = 0;
  const char* what = "stream";

  void need(size_t n) const {
    if (data.size() - pos < n) throw DecodeError(std::string(what) + " truncated");
  }
  uint8_t u8() {
    need(1);
    return data[pos++];
  }
  uint16_t u16() {
    need(2);
    uint16_t v = static_cast<uint16_t>(data[pos] | (data[pos + 1] << 8));
    pos += 2;
    return v;
  }
  uint32_t u32() {
    need(4);
    uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(data[pos + i]) << (8 * i);
    pos += 4;
    return v;
  }
  uint64_t u64() {
    need(8);
    uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(data[pos + i]) << (8 * i);
    pos += 8;
    return v;
  }
  double f64() { return std::bit_cast<double>(u64()); }
  uint64_t varint() { return get_varint(data, pos); }
  std::span<const uint8_t> take(size_t n) {
    need(n);
    auto s = data.subspan(pos, n);
    pos += n;
    return s;
  }
};

int64_t ceil_div(int64_t a, int64_t b) { return (a + b - 1) / b; }

// parallel_for does not carry exceptions across threads; capture the first
// one here and rethrow after the join.
template <typename Fn>
void parallel_for_checked(int64_t n, Fn&& fn) {
  std::atomic<bool> failed{false};
  std::exception_ptr ep;
  std::mutex m;
  parallel_for(n, [&](int64_t i) {
    if (failed.load(std::memory_order_relaxed)) return;
    try {
      fn(i);
    } catch (...) {
      std::lock_guard<std::mutex> g(m);
      if (!failed.exchange(true)) ep = std::current_exception();
    }
  });
  if (ep) std::rethrow_exception(ep);
}

template <typename S>
void require_finite(const std::vector<S>& v, const std::string& what) {
  for (const S& x : v) {
    if (!std::isfinite(static_cast<double>(x)))
      throw NumericError(what + " contains a non-finite value");
  }
}

double det_gelu(double x) { return x * det_normal_cdf(x); }

// ---- level-3 scalars ----

struct PsiHat {
  std::array<uint32_t, 3> bits{};  // log step, mean, log scale
  double delta = 0, mu = 0, sigma = 0;
};

uint32_t pack_psi(float v, bool full) {
  return full ? std::bit_cast<uint32_t>(v) : float_to_half(v);
}
double unpack_psi(uint32_t b, bool full) {
  return full ? static_cast<double>(std::bit_cast<float>(b))
              : static_cast<double>(half_to_float(static_cast<uint16_t>(b)));
}

PsiHat psi_from_bits(const std::array<uint32_t, 3>& bits, bool full, const std::string& name) {
  PsiHat h;
  h.bits = bits;
  const double step = unpack_psi(bits[0], full);
  h.mu = unpack_psi(bits[1], full);
  const double ls = unpack_psi(bits[2], full);
  if (!std::isfinite(step) || !std::isfinite(h.mu) || !std::isfinite(ls))
    throw NumericError("level-3 scalars for " + name + " are not finite");
  h.delta = det_exp(step);
  if (!(h.delta > 0.0) || !std::isfinite(h.delta))
    throw NumericError("level-3 step for " + name + " is not a positive finite value");
  h.sigma = det_exp(ls);
  if (!std::isfinite(h.sigma))
    throw NumericError("level-3 scale for " + name + " overflows");
  return h;
}

// ---- shared symbol coding helpers ----

struct CodeStats {
  double est_bits = 0;
  uint64_t symbols = 0;
  uint64_t clamped = 0;
};

int32_t quantize_to_table(double value, double delta, const CdfTable& table, CodeStats& st) {
  const double raw = round_away(value / delta);
  const int32_t lo = table.offset;
  const int32_t hi = table.offset + static_cast<int32_t>(table.size()) - 1;
  int32_t s;
  if (!(raw >= static_cast<double>(lo))) {
    s = lo;
    ++st.clamped;
  } else if (raw > static_cast<double>(hi)) {
    s = hi;
    ++st.clamped;
  } else {
    s = static_cast<int32_t>(raw);
  }
  return s;
}

double symbol_bits(int32_t s, double mu_s, double sigma_s, const CdfTable& table) {
  SymbolRange range{table.offset, table.offset + static_cast<int32_t>(table.size()) - 1};
  const double p = std::max(discretized_pmf(s, mu_s, sigma_s, range), 1e-12);
  return -std::log2(p);
}

// ---- canonical side-parameter manifest ----

std::array<std::vector<int64_t>, 10> ctx_shapes(const ContextConfig& ctx, int64_t channels) {
  const int64_t g = ctx.shared_weights ? 1 : channels;
  const int64_t wd = ctx.width, k = ctx.kernel;
  return {{{g * wd, 1, k, k, k},
           {g * wd},
           {g * wd},
           {g * wd},
           {g * wd, wd, k, k, k},
           {g * wd},
           {g * wd},
           {g * wd},
           {g * 2, wd, k, k, k},
           {g * 2}}};
}

const char* ctx_names[10] = {"ctx.w1", "ctx.b1", "ctx.ln2_g", "ctx.ln2_b", "ctx.w2",
                             "ctx.b2", "ctx.ln3_g", "ctx.ln3_b", "ctx.w3", "ctx.b3"};

struct BlockGrid {
  int64_t C, T, H, W;
  int64_t nbt, nbh, nbw;
  int64_t blocks() const { return nbt * nbh * nbw; }
};

BlockGrid level_blocks(const ModelConfig& cfg, const CodecConfig& cc, int64_t level) {
  const auto e = grid_level_extents(cfg, level);
  BlockGrid b;
  b.C = e[0];
  b.T = e[1];
  b.H = e[2];
  b.W = e[3];
  b.nbt = ceil_div(e[1], cc.grid_block[0]);
  b.nbh = ceil_div(e[2], cc.grid_block[1]);
  b.nbw = ceil_div(e[3], cc.grid_block[2]);
  return b;
}

}  // namespace

void validate_codec_config(const CodecConfig& cc) {
  if (cc.axis_threshold < 1) throw ConfigError("axis threshold must be positive");
  for (int64_t b : cc.grid_block) {
    if (b < 1 || b > 65536) throw ConfigError("grid block extents must be in [1, 65536]");
  }
  if (cc.context.kernel < 1 || cc.context.kernel % 2 == 0 || cc.context.kernel > 15)
    throw ConfigError("context kernel must be odd and at most 15");
  if (cc.context.width < 2 || cc.context.width > 256)
    throw ConfigError("context width must be in [2, 256]");
}

LayerModes layer_coding_modes(const std::vector<int64_t>& shape, const CodecConfig& cc) {
  const Param2D v = layer_param_view(shape);
  LayerModes m;
  m.rows = v.rows;
  m.cols = v.cols;
  m.quant_mode = choose_axis_mode(v.rows, v.cols, cc.axis_threshold);
  m.em_mode = cc.layer_em == LayerEm::kPerTensor ? AxisMode::kPerTensor : m.quant_mode;
  return m;
}

std::vector<PhiTensorInfo> build_phi_manifest(const ModelConfig& cfg, const CodecConfig& cc) {
  validate_config(cfg);
  validate_codec_config(cc);
  const auto skeleton = init_model<float>(cfg, 0);

  std::vector<PhiTensorInfo> out;
  auto add = [&](PhiKind kind, PhiRole role, int64_t level, int64_t ctx_index, int64_t layer,
                 std::vector<int64_t> shape, std::string name) {
    PhiTensorInfo info;
    info.kind = kind;
    info.role = role;
    info.level = level;
    info.ctx_index = ctx_index;
    info.layer = layer;
    info.shape = std::move(shape);
    info.name = std::move(name);
    out.push_back(std::move(info));
  };

  // Quantization steps: grids by level, then layers in representation order.
  for (int64_t l = 0; l < cfg.grid_levels; ++l) {
    if (!cc.learned_grid_step) continue;
    const BlockGrid b = level_blocks(cfg, cc, l);
    add(PhiKind::kQuant, PhiRole::kGridLogDelta, l, -1, -1, {b.C, b.nbt, b.nbh, b.nbw},
        "grid" + std::to_string(l) + ".log_step");
  }
  for (size_t i = 0; i < skeleton.layers.size(); ++i) {
    const auto& [name, t] = skeleton.layers[i];
    const LayerModes m = layer_coding_modes(t.shape(), cc);
    const int64_t li = static_cast<int64_t>(i);
    add(PhiKind::kQuant, PhiRole::kLayerLqOut, -1, -1, li,
        {m.quant_mode == AxisMode::kPerTensor ? 1 : m.rows}, name + ".step_out");
    if (m.quant_mode == AxisMode::kDual)
      add(PhiKind::kQuant, PhiRole::kLayerLqIn, -1, -1, li, {m.cols}, name + ".step_in");
  }

  // Entropy-model parameters, same outer order.
  for (int64_t l = 0; l < cfg.grid_levels; ++l) {
    const BlockGrid b = level_blocks(cfg, cc, l);
    const std::string base = "grid" + std::to_string(l) + ".";
    if (cc.grid_em == GridEm::kContext) {
      const auto shapes = ctx_shapes(cc.context, b.C);
      for (int64_t j = 0; j < 10; ++j)
        add(PhiKind::kEm, PhiRole::kGridCtx, l, j, -1, shapes[j], base + ctx_names[j]);
    } else {
      add(PhiKind::kEm, PhiRole::kGridMu, l, -1, -1, {1}, base + "mu");
      add(PhiKind::kEm, PhiRole::kGridLogSigma, l, -1, -1, {1}, base + "log_sigma");
    }
  }
  for (size_t i = 0; i < skeleton.layers.size(); ++i) {
    const auto& [name, t] = skeleton.layers[i];
    const LayerModes m = layer_coding_modes(t.shape(), cc);
    const int64_t li = static_cast<int64_t>(i);
    const int64_t n_out = m.em_mode == AxisMode::kPerTensor ? 1 : m.rows;
    add(PhiKind::kEm, PhiRole::kLayerMuOut, -1, -1, li, {n_out}, name + ".mu_out");
    add(PhiKind::kEm, PhiRole::kLayerLsOut, -1, -1, li, {n_out}, name + ".ls_out");
    if (m.em_mode == AxisMode::kDual) {
      add(PhiKind::kEm, PhiRole::kLayerMuIn, -1, -1, li, {m.cols}, name + ".mu_in");
      add(PhiKind::kEm, PhiRole::kLayerLsIn, -1, -1, li, {m.cols}, name + ".ls_in");
    }
  }
  return out;
}

namespace detail {

template <typename S>
Tensor<S>* phi_tensor_for(const PhiTensorInfo& info, SideParams<S>& sp) {
  auto grid_at = [&](int64_t l) -> GridSide<S>& {
    if (l < 0 || l >= static_cast<int64_t>(sp.grids.size()))
      throw ConfigError("side parameters are missing grid level " + std::to_string(l));
    return sp.grids[static_cast<size_t>(l)];
  };
  auto layer_at = [&](int64_t i) -> LayerSide<S>& {
    if (i < 0 || i >= static_cast<int64_t>(sp.layers.size()))
      throw ConfigError("side parameters are missing layer " + std::to_string(i));
    return sp.layers[static_cast<size_t>(i)];
  };
  switch (info.role) {
    case PhiRole::kGridLogDelta:
      return &grid_at(info.level).log_delta;
    case PhiRole::kGridCtx:
      return context_weight_list(grid_at(info.level).ctx).at(static_cast<size_t>(info.ctx_index));
    case PhiRole::kGridMu:
      return &grid_at(info.level).mu;
    case PhiRole::kGridLogSigma:
      return &grid_at(info.level).log_sigma;
    case PhiRole::kLayerLqOut:
      return &layer_at(info.layer).lq_out;
    case PhiRole::kLayerLqIn:
      return &layer_at(info.layer).lq_in;
    case PhiRole::kLayerMuOut:
      return &layer_at(info.layer).mu_out;
    case PhiRole::kLayerLsOut:
      return &layer_at(info.layer).ls_out;
    case PhiRole::kLayerMuIn:
      return &layer_at(info.layer).mu_in;
    case PhiRole::kLayerLsIn:
      return &layer_at(info.layer).ls_in;
  }
  throw ConfigError("unknown side parameter role");
}

template Tensor<float>* phi_tensor_for<float>(const PhiTensorInfo&, SideParams<float>&);
template Tensor<double>* phi_tensor_for<double>(const PhiTensorInfo&, SideParams<double>&);

}  // namespace detail

template <typename S>
SideParams<S> init_side_params(const NeuralRepresentation<S>& rep, const CodecConfig& cc,
                               uint64_t seed) {
  validate_config(rep.config);
  validate_codec_config(cc);
  Rng rng(seed);
  SideParams<S> sp;
  for (int64_t l = 0; l < rep.config.grid_levels; ++l) {
    const BlockGrid b = level_blocks(rep.config, cc, l);
    GridSide<S> g;
    if (cc.learned_grid_step)
      g.log_delta = Tensor<S>({b.C, b.nbt, b.nbh, b.nbw}, static_cast<S>(-4));
    if (cc.grid_em == GridEm::kContext) {
      g.ctx = init_context_weights<S>(cc.context, b.C, rng);
    } else {
      g.mu = Tensor<S>({1}, static_cast<S>(0));
      g.log_sigma = Tensor<S>({1}, static_cast<S>(0));
    }
    sp.grids.push_back(std::move(g));
  }
  for (const auto& [name, t] : rep.layers) {
    const LayerModes m = layer_coding_modes(t.shape(), cc);
    LayerSide<S> ls;
    ls.quant_mode = m.quant_mode;
    ls.em_mode = m.em_mode;
    // Dual steps multiply, so the in factor starts at zero to keep the
    // effective log step at -4 regardless of mode.
    ls.lq_out =
        Tensor<S>({m.quant_mode == AxisMode::kPerTensor ? 1 : m.rows}, static_cast<S>(-4));
    if (m.quant_mode == AxisMode::kDual) ls.lq_in = Tensor<S>({m.cols}, static_cast<S>(0));
    const int64_t n_out = m.em_mode == AxisMode::kPerTensor ? 1 : m.rows;
    ls.mu_out = Tensor<S>({n_out}, static_cast<S>(0));
    ls.ls_out = Tensor<S>({n_out}, static_cast<S>(0));
    if (m.em_mode == AxisMode::kDual) {
      ls.mu_in = Tensor<S>({m.cols}, static_cast<S>(0));
      ls.ls_in = Tensor<S>({m.cols}, static_cast<S>(0));
    }
    sp.layers.push_back(std::move(ls));
  }
  return sp;
}

template <typename S>
PsiParams<S> init_psi(const ModelConfig& cfg, const CodecConfig& cc) {
  const size_t n = build_phi_manifest(cfg, cc).size();
  PsiParams<S> psi;
  psi.log_step.reserve(n);
  psi.mu.reserve(n);
  psi.log_sigma.reserve(n);
  for (size_t i = 0; i < n; ++i) {
    psi.log_step.push_back(Tensor<S>({1}, static_cast<S>(-5)));
    psi.mu.push_back(Tensor<S>({1}, static_cast<S>(0)));
    psi.log_sigma.push_back(Tensor<S>({1}, static_cast<S>(0)));
  }
  return psi;
}

namespace {

// ---- level 2: the side-parameter section ----

// Dequantized side parameters in manifest order, shared by both directions.
using PhiHat = std::vector<std::vector<double>>;

struct PhiSection {
  std::vector<uint8_t> bytes;
  PhiHat hat;
  std::vector<std::vector<int32_t>> symbols;
  CodeStats stats;
};

PhiSection encode_phi(const std::vector<PhiTensorInfo>& manifest,
                      const std::vector<const std::vector<float>*>& values,
                      const std::vector<PsiHat>& psi, bool coded) {
  PhiSection out;
  out.hat.resize(manifest.size());
  out.symbols.resize(manifest.size());
  if (!coded) {
    for (size_t i = 0; i < manifest.size(); ++i) {
      for (float v : *values[i]) {
        const uint16_t h = float_to_half(v);
        put_u16(out.bytes, h);
        out.hat[i].push_back(static_cast<double>(half_to_float(h)));
      }
    }
    out.stats.est_bits = 8.0 * static_cast<double>(out.bytes.size());
    return out;
  }
  for (PhiKind kind : {PhiKind::kQuant, PhiKind::kEm}) {
    RangeEncoder enc;
    for (size_t i = 0; i < manifest.size(); ++i) {
      if (manifest[i].kind != kind) continue;
      const PsiHat& p = psi[i];
      const double mu_s = p.mu / p.delta;
      const double sigma_s = std::max(p.sigma / p.delta, kSigmaFloor);
      const CdfTable table = build_cdf_table(mu_s, sigma_s);
      for (float v : *values[i]) {
        const int32_t s = quantize_to_table(static_cast<double>(v), p.delta, table, out.stats);
        enc.encode(table, s);
        out.stats.est_bits += symbol_bits(s, mu_s, sigma_s, table);
        ++out.stats.symbols;
        out.symbols[i].push_back(s);
        out.hat[i].push_back(static_cast<double>(s) * p.delta);
      }
    }
    const CodedSegment seg = enc.finish();
    put_varint(out.bytes, seg.payload.size());
    out.bytes.insert(out.bytes.end(), seg.payload.begin(), seg.payload.end());
  }
  return out;
}

struct PhiDecodeOut {
  PhiHat hat;
  std::vector<std::vector<int32_t>> symbols;
};

PhiDecodeOut decode_phi(const std::vector<PhiTensorInfo>& manifest,
                        const std::vector<PsiHat>& psi, bool coded,
                        std::span<const uint8_t> section) {
  PhiDecodeOut out;
  out.hat.resize(manifest.size());
  out.symbols.resize(manifest.size());
  ByteReader r{section, 0, "phi section"};
  if (!coded) {
    for (size_t i = 0; i < manifest.size(); ++i) {
      int64_t n = 1;
      for (int64_t e : manifest[i].shape) n *= e;
      out.hat[i].reserve(static_cast<size_t>(n));
      for (int64_t j = 0; j < n; ++j) {
        const float v = half_to_float(r.u16());
        if (!std::isfinite(v))
          throw DecodeError("phi section holds a non-finite value for " + manifest[i].name);
        out.hat[i].push_back(static_cast<double>(v));
      }
    }
    if (r.pos != section.size()) throw DecodeError("phi section has trailing bytes");
    return out;
  }
  for (PhiKind kind : {PhiKind::kQuant, PhiKind::kEm}) {
    const uint64_t len = r.varint();
    const auto payload = r.take(len);
    CodedSegment seg;
    seg.payload.assign(payload.begin(), payload.end());
    seg.declared_bytes = len;
    RangeDecoder dec(seg);
    for (size_t i = 0; i < manifest.size(); ++i) {
      if (manifest[i].kind != kind) continue;
      const PsiHat& p = psi[i];
      const double mu_s = p.mu / p.delta;
      const double sigma_s = std::max(p.sigma / p.delta, kSigmaFloor);
      const CdfTable table = build_cdf_table(mu_s, sigma_s);
      int64_t n = 1;
      for (int64_t e : manifest[i].shape) n *= e;
      for (int64_t j = 0; j < n; ++j) {
        const int32_t s = dec.decode(table);
        out.symbols[i].push_back(s);
        out.hat[i].push_back(static_cast<double>(s) * p.delta);
      }
    }
  }
  if (r.pos != section.size()) throw DecodeError("phi section has trailing bytes");
  return out;
}

// ---- the incremental context engine ----
//
// One (channel, block) is processed element by element in raster order.
// Instead of re-running the masked convolutions per position, each finished
// value scatters its contribution forward into per-layer accumulators; by
// the time position p is finalized every causal contribution has already
// arrived. Encoder and decoder run this exact routine, so the probability
// tables they build agree to the last bit.

struct Disp {
  int64_t dt, dh, dw;
  int64_t koff;  // flattened kernel offset of the matching conv tap
};

void make_disps(int64_t k, std::vector<Disp>& causal, std::vector<Disp>& with_center) {
  const int64_t c = k / 2;
  causal.clear();
  with_center.clear();
  for (int64_t dt = -c; dt <= c; ++dt) {
    for (int64_t dh = -c; dh <= c; ++dh) {
      for (int64_t dw = -c; dw <= c; ++dw) {
        const bool center = dt == 0 && dh == 0 && dw == 0;
        const bool after = dt > 0 || (dt == 0 && (dh > 0 || (dh == 0 && dw > 0)));
        if (!center && !after) continue;
        const Disp d{dt, dh, dw, ((c - dt) * k + (c - dh)) * k + (c - dw)};
        if (after) causal.push_back(d);
        with_center.push_back(d);
      }
    }
  }
}

struct CtxView {
  const double *w1, *b1, *ln2g, *ln2b, *w2, *b2, *ln3g, *ln3b, *w3, *b3;
  int64_t wd = 0, k = 0;
};

// code(p, table, mu_s, sigma_s) -> coded symbol at raster position p; the
// engine feeds symbol * delta back as the causal input.
template <typename CodeFn>
void run_ctx_block(const CtxView& w, int64_t bt, int64_t bh, int64_t bw, double delta,
                   const std::vector<Disp>& causal, const std::vector<Disp>& with_center,
                   CodeFn&& code) {
  const int64_t n = bt * bh * bw, wd = w.wd, k3 = w.k * w.k * w.k;
  std::vector<double> h1(static_cast<size_t>(wd * n), 0.0);
  std::vector<double> h2(static_cast<size_t>(wd * n), 0.0);
  std::vector<double> outa(static_cast<size_t>(2 * n), 0.0);
  std::vector<double> act(static_cast<size_t>(wd)), norm(static_cast<size_t>(wd));

  // Mirrors the channel layer norm: population variance, eps inside the root.
  auto ln = [&](const double* g, const double* b) {
    double m = 0;
    for (int64_t j = 0; j < wd; ++j) m += act[j];
    m /= static_cast<double>(wd);
    double var = 0;
    for (int64_t j = 0; j < wd; ++j) {
      const double d = act[j] - m;
      var += d * d;
    }
    var /= static_cast<double>(wd);
    const double r = 1.0 / std::sqrt(var + 1e-5);
    for (int64_t j = 0; j < wd; ++j) norm[j] = (act[j] - m) * r * g[j] + b[j];
  };

  int64_t p = 0;
  for (int64_t lt = 0; lt < bt; ++lt) {
    for (int64_t lh = 0; lh < bh; ++lh) {
      for (int64_t lw = 0; lw < bw; ++lw, ++p) {
        for (int64_t j = 0; j < wd; ++j) act[j] = det_gelu(h1[j * n + p] + w.b1[j]);
        ln(w.ln2g, w.ln2b);
        for (const Disp& d : with_center) {
          const int64_t qt = lt + d.dt, qh = lh + d.dh, qw = lw + d.dw;
          if (qt >= bt || qh < 0 || qh >= bh || qw < 0 || qw >= bw) continue;
          const int64_t q = (qt * bh + qh) * bw + qw;
          for (int64_t j2 = 0; j2 < wd; ++j2) {
            const double* row = w.w2 + j2 * wd * k3 + d.koff;
            double s = 0;
            for (int64_t j = 0; j < wd; ++j) s += row[j * k3] * norm[j];
            h2[j2 * n + q] += s;
          }
        }

        for (int64_t j = 0; j < wd; ++j) act[j] = det_gelu(h2[j * n + p] + w.b2[j]);
        ln(w.ln3g, w.ln3b);
        for (const Disp& d : with_center) {
          const int64_t qt = lt + d.dt, qh = lh + d.dh, qw = lw + d.dw;
          if (qt >= bt || qh < 0 || qh >= bh || qw < 0 || qw >= bw) continue;
          const int64_t q = (qt * bh + qh) * bw + qw;
          for (int64_t o = 0; o < 2; ++o) {
            const double* row = w.w3 + o * wd * k3 + d.koff;
            double s = 0;
            for (int64_t j = 0; j < wd; ++j) s += row[j * k3] * norm[j];
            outa[o * n + q] += s;
          }
        }

        const double mu = outa[p] + w.b3[0];
        double ls = outa[n + p] + w.b3[1];
        if (ls < -20.0) ls = -20.0;
        if (ls > 8.0) ls = 8.0;
        const double sigma = det_exp(ls);
        const double mu_s = mu / delta;
        const double sigma_s = std::max(sigma / delta, kSigmaFloor);
        const CdfTable table = build_cdf_table(mu_s, sigma_s);
        const int32_t sym = code(p, table, mu_s, sigma_s);
        const double zh = static_cast<double>(sym) * delta;
        for (const Disp& d : causal) {
          const int64_t qt = lt + d.dt, qh = lh + d.dh, qw = lw + d.dw;
          if (qt >= bt || qh < 0 || qh >= bh || qw < 0 || qw >= bw) continue;
          const int64_t q = (qt * bh + qh) * bw + qw;
          for (int64_t j = 0; j < wd; ++j) h1[j * n + q] += w.w1[j * k3 + d.koff] * zh;
        }
      }
    }
  }
}

// ---- level 1: grids and layers under the decoded side parameters ----

struct LevelCoding {
  BlockGrid b;
  const std::vector<double>* log_delta = nullptr;  // null: fixed log step
  std::array<const std::vector<double>*, 10> ctx{};
  double mu = 0, log_sigma = 0;
};

struct LayerCoding {
  LayerModes m;
  const std::vector<double>*lq_out = nullptr, *lq_in = nullptr;
  const std::vector<double>*mu_out = nullptr, *ls_out = nullptr;
  const std::vector<double>*mu_in = nullptr, *ls_in = nullptr;
};

struct CodingPlan {
  std::vector<LevelCoding> levels;
  std::vector<LayerCoding> layers;
};

CodingPlan build_plan(const ModelConfig& cfg, const CodecConfig& cc,
                      const std::vector<PhiTensorInfo>& manifest, const PhiHat& hat,
                      size_t n_layers) {
  CodingPlan plan;
  plan.levels.resize(static_cast<size_t>(cfg.grid_levels));
  for (int64_t l = 0; l < cfg.grid_levels; ++l)
    plan.levels[static_cast<size_t>(l)].b = level_blocks(cfg, cc, l);
  plan.layers.resize(n_layers);
  for (size_t i = 0; i < manifest.size(); ++i) {
    const PhiTensorInfo& info = manifest[i];
    const std::vector<double>* v = &hat[i];
    switch (info.role) {
      case PhiRole::kGridLogDelta:
        plan.levels[static_cast<size_t>(info.level)].log_delta = v;
        break;
      case PhiRole::kGridCtx:
        plan.levels[static_cast<size_t>(info.level)].ctx[static_cast<size_t>(info.ctx_index)] = v;
        break;
      case PhiRole::kGridMu:
        plan.levels[static_cast<size_t>(info.level)].mu = (*v)[0];
        break;
      case PhiRole::kGridLogSigma:
        plan.levels[static_cast<size_t>(info.level)].log_sigma = (*v)[0];
        break;
      case PhiRole::kLayerLqOut:
        plan.layers[static_cast<size_t>(info.layer)].lq_out = v;
        break;
      case PhiRole::kLayerLqIn:
        plan.layers[static_cast<size_t>(info.layer)].lq_in = v;
        break;
      case PhiRole::kLayerMuOut:
        plan.layers[static_cast<size_t>(info.layer)].mu_out = v;
        break;
      case PhiRole::kLayerLsOut:
        plan.layers[static_cast<size_t>(info.layer)].ls_out = v;
        break;
      case PhiRole::kLayerMuIn:
        plan.layers[static_cast<size_t>(info.layer)].mu_in = v;
        break;
      case PhiRole::kLayerLsIn:
        plan.layers[static_cast<size_t>(info.layer)].ls_in = v;
        break;
    }
  }
  return plan;
}

double grid_delta(const LevelCoding& lc, int64_t c, int64_t bi, int64_t bj, int64_t bk) {
  if (lc.log_delta == nullptr) return det_exp(kFixedGridLogStep);
  const BlockGrid& b = lc.b;
  const double ld = (*lc.log_delta)[static_cast<size_t>(((c * b.nbt + bi) * b.nbh + bj) * b.nbw +
                                                        bk)];
  return det_exp(ld);
}

CtxView ctx_view(const LevelCoding& lc, const ContextConfig& ctx, int64_t channel) {
  const int64_t g = ctx.shared_weights ? 0 : channel;
  const int64_t wd = ctx.width, k = ctx.kernel, k3 = k * k * k;
  CtxView v;
  v.wd = wd;
  v.k = k;
  v.w1 = lc.ctx[0]->data() + g * wd * k3;
  v.b1 = lc.ctx[1]->data() + g * wd;
  v.ln2g = lc.ctx[2]->data() + g * wd;
  v.ln2b = lc.ctx[3]->data() + g * wd;
  v.w2 = lc.ctx[4]->data() + g * wd * wd * k3;
  v.b2 = lc.ctx[5]->data() + g * wd;
  v.ln3g = lc.ctx[6]->data() + g * wd;
  v.ln3b = lc.ctx[7]->data() + g * wd;
  v.w3 = lc.ctx[8]->data() + g * 2 * wd * k3;
  v.b3 = lc.ctx[9]->data() + g * 2;
  return v;
}

struct GridJob {
  int64_t level;
  int64_t bi, bj, bk;       // block index
  int64_t t0, h0, w0;       // block origin
  int64_t bt, bh, bw;       // clipped block extents
};

std::vector<GridJob> grid_jobs(const CodingPlan& plan, const CodecConfig& cc) {
  std::vector<GridJob> jobs;
  for (size_t l = 0; l < plan.levels.size(); ++l) {
    const BlockGrid& b = plan.levels[l].b;
    for (int64_t bi = 0; bi < b.nbt; ++bi) {
      for (int64_t bj = 0; bj < b.nbh; ++bj) {
        for (int64_t bk = 0; bk < b.nbw; ++bk) {
          GridJob j;
          j.level = static_cast<int64_t>(l);
          j.bi = bi;
          j.bj = bj;
          j.bk = bk;
          j.t0 = bi * cc.grid_block[0];
          j.h0 = bj * cc.grid_block[1];
          j.w0 = bk * cc.grid_block[2];
          j.bt = std::min(cc.grid_block[0], b.T - j.t0);
          j.bh = std::min(cc.grid_block[1], b.H - j.h0);
          j.bw = std::min(cc.grid_block[2], b.W - j.w0);
          jobs.push_back(j);
        }
      }
    }
  }
  return jobs;
}

// Codes one block, all channels, against one segment. Encode passes the
// source grid; decode passes nullptr and a live decoder. Outputs land in
// the value/symbol arrays at the grid's raster indices.
template <bool kEncode>
void code_grid_block(const GridJob& job, const LevelCoding& lc, const CodecConfig& cc,
                     const std::vector<Disp>& causal, const std::vector<Disp>& with_center,
                     const float* src, RangeEncoder* enc, RangeDecoder* dec, float* values,
                     int32_t* symbols, CodeStats& st) {
  const BlockGrid& b = lc.b;
  for (int64_t c = 0; c < b.C; ++c) {
    const double delta = grid_delta(lc, c, job.bi, job.bj, job.bk);
    auto emit = [&](int64_t p, const CdfTable& table, double mu_s, double sigma_s) -> int32_t {
      const int64_t lt = p / (job.bh * job.bw);
      const int64_t lh = (p / job.bw) % job.bh;
      const int64_t lw = p % job.bw;
      const int64_t gi = ((c * b.T + job.t0 + lt) * b.H + job.h0 + lh) * b.W + job.w0 + lw;
      int32_t s;
      if constexpr (kEncode) {
        s = quantize_to_table(static_cast<double>(src[gi]), delta, table, st);
        enc->encode(table, s);
        st.est_bits += symbol_bits(s, mu_s, sigma_s, table);
      } else {
        s = dec->decode(table);
      }
      ++st.symbols;
      symbols[gi] = s;
      values[gi] = static_cast<float>(static_cast<double>(s) * delta);
      return s;
    };
    if (lc.ctx[0] != nullptr) {
      run_ctx_block(ctx_view(lc, cc.context, c), job.bt, job.bh, job.bw, delta, causal,
                    with_center, emit);
    } else {
      const double sigma = det_exp(lc.log_sigma);
      const double mu_s = lc.mu / delta;
      const double sigma_s = std::max(sigma / delta, kSigmaFloor);
      const CdfTable table = build_cdf_table(mu_s, sigma_s);
      const int64_t n = job.bt * job.bh * job.bw;
      for (int64_t p = 0; p < n; ++p) emit(p, table, mu_s, sigma_s);
    }
  }
}

// Codes one layer tensor element by element in its (rows, cols) view.
template <bool kEncode>
void code_layer_tensor(const LayerCoding& lc, const float* src, RangeEncoder* enc,
                       RangeDecoder* dec, float* values, int32_t* symbols, CodeStats& st) {
  const int64_t rows = lc.m.rows, cols = lc.m.cols;

  std::vector<double> dq_out(static_cast<size_t>(lc.lq_out->size()));
  for (size_t i = 0; i < dq_out.size(); ++i) dq_out[i] = det_exp((*lc.lq_out)[i]);
  std::vector<double> dq_in;
  if (lc.lq_in != nullptr) {
    dq_in.resize(static_cast<size_t>(lc.lq_in->size()));
    for (size_t i = 0; i < dq_in.size(); ++i) dq_in[i] = det_exp((*lc.lq_in)[i]);
  }
  std::vector<double> s_out(static_cast<size_t>(lc.ls_out->size()));
  for (size_t i = 0; i < s_out.size(); ++i) s_out[i] = det_exp((*lc.ls_out)[i]);
  std::vector<double> s_in;
  if (lc.ls_in != nullptr) {
    s_in.resize(static_cast<size_t>(lc.ls_in->size()));
    for (size_t i = 0; i < s_in.size(); ++i) s_in[i] = det_exp((*lc.ls_in)[i]);
  }

  const bool delta_per_col = lc.m.quant_mode == AxisMode::kDual;
  const bool em_per_col = lc.m.em_mode == AxisMode::kDual;

  // The table is a pure function of (mu_s, sigma_s); rebuild only when the
  // per-element parameters move (once per tensor, row, or element by mode).
  CdfTable table;
  double mu_s = 0, sigma_s = -1;
  bool have_table = false;
  for (int64_t i = 0; i < rows; ++i) {
    const double d_row = dq_out[lc.m.quant_mode == AxisMode::kPerTensor ? 0 : i];
    const int64_t ei = lc.m.em_mode == AxisMode::kPerTensor ? 0 : i;
    const double mu_row = (*lc.mu_out)[ei];
    const double sg_row = s_out[ei];
    for (int64_t j = 0; j < cols; ++j) {
      const double delta = delta_per_col ? d_row * dq_in[j] : d_row;
      double mu, sigma;
      if (em_per_col) {
        mu = mu_row * s_in[j] + (*lc.mu_in)[j];
        sigma = sg_row * s_in[j];
      } else {
        mu = mu_row;
        sigma = sg_row;
      }
      const double e_mu = mu / delta;
      const double e_sg = std::max(sigma / delta, kSigmaFloor);
      if (!have_table || e_mu != mu_s || e_sg != sigma_s) {
        mu_s = e_mu;
        sigma_s = e_sg;
        table = build_cdf_table(mu_s, sigma_s);
        have_table = true;
      }
      const int64_t idx = i * cols + j;
      int32_t s;
      if constexpr (kEncode) {
        s = quantize_to_table(static_cast<double>(src[idx]), delta, table, st);
        enc->encode(table, s);
        st.est_bits += symbol_bits(s, mu_s, sigma_s, table);
      } else {
        s = dec->decode(table);
      }
      ++st.symbols;
      symbols[idx] = s;
      values[idx] = static_cast<float>(static_cast<double>(s) * delta);
    }
  }
}

// ---- container ----

std::vector<uint8_t> serialize_model_config(const ModelConfig& cfg) {
  std::vector<uint8_t> o;
  for (int64_t v : {cfg.video_t, cfg.video_h, cfg.video_w, cfg.t_patch, cfg.h_patch, cfg.w_patch,
                    cfg.c_patch, cfg.grid_t, cfg.grid_h, cfg.grid_w, cfg.grid_c, cfg.grid_levels})
    put_u64(o, static_cast<uint64_t>(v));
  for (double v : {cfg.grid_scale_t, cfg.grid_scale_h, cfg.grid_scale_w, cfg.grid_scale_c})
    put_f64(o, v);
  for (int64_t v : {cfg.kernel, cfg.expansion, cfg.stem_kernel[0], cfg.stem_kernel[1],
                    cfg.stem_kernel[2], cfg.local_t, cfg.local_hw})
    put_u64(o, static_cast<uint64_t>(v));
  put_u64(o, cfg.channels.size());
  for (size_t i = 0; i < cfg.channels.size(); ++i) {
    put_u64(o, static_cast<uint64_t>(cfg.channels[i]));
    put_u64(o, static_cast<uint64_t>(cfg.depths[i]));
    put_u64(o, static_cast<uint64_t>(cfg.strides[i]));
  }
  return o;
}

ModelConfig parse_model_config(std::span<const uint8_t> blob) {
  ByteReader r{blob, 0, "header"};
  ModelConfig cfg;
  auto i64 = [&] { return static_cast<int64_t>(r.u64()); };
  cfg.video_t = i64();
  cfg.video_h = i64();
  cfg.video_w = i64();
  cfg.t_patch = i64();
  cfg.h_patch = i64();
  cfg.w_patch = i64();
  cfg.c_patch = i64();
  cfg.grid_t = i64();
  cfg.grid_h = i64();
  cfg.grid_w = i64();
  cfg.grid_c = i64();
  cfg.grid_levels = i64();
  cfg.grid_scale_t = r.f64();
  cfg.grid_scale_h = r.f64();
  cfg.grid_scale_w = r.f64();
  cfg.grid_scale_c = r.f64();
  cfg.kernel = i64();
  cfg.expansion = i64();
  cfg.stem_kernel[0] = i64();
  cfg.stem_kernel[1] = i64();
  cfg.stem_kernel[2] = i64();
  cfg.local_t = i64();
  cfg.local_hw = i64();
  const uint64_t stages = r.u64();
  if (stages > 64) throw DecodeError("header declares an implausible stage count");
  for (uint64_t i = 0; i < stages; ++i) {
    cfg.channels.push_back(i64());
    cfg.depths.push_back(i64());
    cfg.strides.push_back(i64());
  }
  if (r.pos != blob.size()) throw DecodeError("header config blob has trailing bytes");
  return cfg;
}

constexpr const char* kSectionNames[3] = {"psi", "phi", "theta"};

}  // namespace

std::vector<uint8_t> assemble_container(const StreamHeader& header,
                                        const ContainerSections& sections) {
  validate_config(header.config);
  validate_codec_config(header.codec);
  const CodecConfig& cc = header.codec;

  std::vector<uint8_t> out;
  out.insert(out.end(), {0x4E, 0x56, 0x52, 0x43});
  put_u16(out, kFormatVersion);
  put_u8(out, static_cast<uint8_t>(header.color));
  put_u8(out, cc.psi_full ? 1 : 0);
  put_u8(out, static_cast<uint8_t>(cc.grid_em));
  put_u8(out, static_cast<uint8_t>(cc.layer_em));
  put_u8(out, cc.code_level2 ? 1 : 0);
  put_u8(out, cc.learned_grid_step ? 1 : 0);
  put_u32(out, static_cast<uint32_t>(cc.axis_threshold));
  for (int64_t b : cc.grid_block) put_u32(out, static_cast<uint32_t>(b));
  put_u32(out, static_cast<uint32_t>(cc.context.kernel));
  put_u32(out, static_cast<uint32_t>(cc.context.width));
  put_u8(out, cc.context.shared_weights ? 1 : 0);
  put_u32(out, static_cast<uint32_t>(header.config.video_t));
  put_u32(out, static_cast<uint32_t>(header.config.video_h));
  put_u32(out, static_cast<uint32_t>(header.config.video_w));
  put_u32(out, static_cast<uint32_t>(header.config.c_patch));

  const std::vector<uint8_t> blob = serialize_model_config(header.config);
  put_u32(out, crc32(blob));
  put_u32(out, static_cast<uint32_t>(blob.size()));
  out.insert(out.end(), blob.begin(), blob.end());

  const uint64_t header_bytes = out.size() + 3 * 20 + 4;
  const std::vector<uint8_t>* secs[3] = {&sections.psi, &sections.phi, &sections.theta};
  uint64_t offset = header_bytes;
  for (const auto* s : secs) {
    put_u64(out, offset);
    put_u64(out, s->size());
    put_u32(out, crc32(*s));
    offset += s->size();
  }
  put_u32(out, crc32(out));
  for (const auto* s : secs) out.insert(out.end(), s->begin(), s->end());
  return out;
}

ParsedContainer parse_container(std::span<const uint8_t> bytes) {
  ByteReader r{bytes, 0, "header"};
  r.need(4);
  if (std::memcmp(bytes.data(), "NVRC", 4) != 0) throw DecodeError("bad magic");
  r.pos = 4;
  const uint16_t version = r.u16();
  if (version != kFormatVersion)
    throw VersionError("unsupported format version " + std::to_string(version));

  ParsedContainer pc;
  CodecConfig& cc = pc.header.codec;
  const uint8_t color = r.u8();
  if (color > 1) throw DecodeError("unknown color mode");
  pc.header.color = static_cast<ColorMode>(color);
  const uint8_t psi_full = r.u8();
  if (psi_full > 1) throw DecodeError("unknown level-3 precision flag");
  cc.psi_full = psi_full != 0;
  const uint8_t grid_em = r.u8();
  if (grid_em > 1) throw DecodeError("unknown grid entropy model");
  cc.grid_em = static_cast<GridEm>(grid_em);
  const uint8_t layer_em = r.u8();
  if (layer_em > 1) throw DecodeError("unknown layer entropy model");
  cc.layer_em = static_cast<LayerEm>(layer_em);
  const uint8_t coded = r.u8();
  if (coded > 1) throw DecodeError("unknown side-parameter coding flag");
  cc.code_level2 = coded != 0;
  const uint8_t learned = r.u8();
  if (learned > 1) throw DecodeError("unknown grid step flag");
  cc.learned_grid_step = learned != 0;
  cc.axis_threshold = r.u32();
  for (int i = 0; i < 3; ++i) cc.grid_block[static_cast<size_t>(i)] = r.u32();
  cc.context.kernel = r.u32();
  cc.context.width = r.u32();
  const uint8_t shared = r.u8();
  if (shared > 1) throw DecodeError("unknown context sharing flag");
  cc.context.shared_weights = shared != 0;

  const uint32_t geo_t = r.u32(), geo_h = r.u32(), geo_w = r.u32(), geo_c = r.u32();
  const uint32_t digest = r.u32();
  const uint32_t blob_len = r.u32();
  const auto blob = r.take(blob_len);
  if (crc32(blob) != digest) throw DecodeError("model config digest mismatch");
  pc.header.config = parse_model_config(blob);
  try {
    validate_config(pc.header.config);
    validate_codec_config(cc);
  } catch (const ConfigError& e) {
    throw DecodeError(std::string("stream config invalid: ") + e.what());
  }
  const ModelConfig& cfg = pc.header.config;
  if (static_cast<int64_t>(geo_t) != cfg.video_t || static_cast<int64_t>(geo_h) != cfg.video_h ||
      static_cast<int64_t>(geo_w) != cfg.video_w || static_cast<int64_t>(geo_c) != cfg.c_patch)
    throw DecodeError("header geometry disagrees with the model config");

  uint64_t offsets[3], lengths[3];
  uint32_t crcs[3];
  for (int i = 0; i < 3; ++i) {
    offsets[i] = r.u64();
    lengths[i] = r.u64();
    crcs[i] = r.u32();
  }
  const size_t crc_pos = r.pos;
  const uint32_t header_crc = r.u32();
  if (crc32(bytes.subspan(0, crc_pos)) != header_crc)
    throw DecodeError("header checksum mismatch");
  pc.header_bytes = r.pos;

  uint64_t expect = pc.header_bytes;
  for (int i = 0; i < 3; ++i) {
    if (offsets[i] != expect) throw DecodeError("section table not canonical");
    if (offsets[i] + lengths[i] > bytes.size())
      throw DecodeError(std::string(kSectionNames[i]) + " section truncated");
    expect = offsets[i] + lengths[i];
  }
  if (expect != bytes.size()) throw DecodeError("trailing bytes after the last section");

  std::vector<uint8_t>* secs[3] = {&pc.sections.psi, &pc.sections.phi, &pc.sections.theta};
  for (int i = 0; i < 3; ++i) {
    const auto s = bytes.subspan(offsets[i], lengths[i]);
    if (crc32(s) != crcs[i])
      throw DecodeError(std::string(kSectionNames[i]) + " section checksum mismatch");
    secs[i]->assign(s.begin(), s.end());
  }
  return pc;
}

namespace {

// Shared by encode and decode: walk every grid/layer symbol back and forth.
struct ThetaLayout {
  std::vector<GridJob> jobs;
  std::vector<int64_t> level_job_begin;  // per level, index into jobs
};

ThetaLayout theta_layout(const CodingPlan& plan, const CodecConfig& cc) {
  ThetaLayout tl;
  tl.jobs = grid_jobs(plan, cc);
  tl.level_job_begin.assign(plan.levels.size() + 1, 0);
  for (const GridJob& j : tl.jobs) ++tl.level_job_begin[static_cast<size_t>(j.level) + 1];
  for (size_t l = 1; l < tl.level_job_begin.size(); ++l)
    tl.level_job_begin[l] += tl.level_job_begin[l - 1];
  return tl;
}

}  // namespace

EncodeResult encode_stream(const NeuralRepresentation<float>& rep, const SideParams<float>& phi,
                           const PsiParams<float>& psi, const CodecConfig& cc, ColorMode color) {
  validate_config(rep.config);
  validate_codec_config(cc);
  const ModelConfig& cfg = rep.config;
  const auto manifest = build_phi_manifest(cfg, cc);

  // Collect side-parameter values in manifest order, verifying shapes.
  std::vector<const std::vector<float>*> phi_values;
  phi_values.reserve(manifest.size());
  auto& sp = const_cast<SideParams<float>&>(phi);
  for_each_phi(cfg, cc, sp, [&](const PhiTensorInfo& info, Tensor<float>& t) {
    require_finite(t.values(), info.name);
    phi_values.push_back(&t.values());
  });
  for (size_t l = 0; l < rep.grids.size(); ++l)
    require_finite(rep.grids[l].values(), "grid" + std::to_string(l));
  for (const auto& [name, t] : rep.layers) require_finite(t.values(), name);

  EncodeResult res;
  ContainerSections sections;

  // Level 3: per-tensor scalars, raw bits.
  std::vector<PsiHat> psi_hat;
  if (cc.code_level2) {
    if (psi.log_step.size() != manifest.size() || psi.mu.size() != manifest.size() ||
        psi.log_sigma.size() != manifest.size())
      throw ConfigError("level-3 parameter count disagrees with the manifest");
    psi_hat.reserve(manifest.size());
    for (size_t i = 0; i < manifest.size(); ++i) {
      std::array<uint32_t, 3> bits = {pack_psi(psi.log_step[i].item(), cc.psi_full),
                                      pack_psi(psi.mu[i].item(), cc.psi_full),
                                      pack_psi(psi.log_sigma[i].item(), cc.psi_full)};
      psi_hat.push_back(psi_from_bits(bits, cc.psi_full, manifest[i].name));
      for (uint32_t b : bits) {
        if (cc.psi_full)
          put_u32(sections.psi, b);
        else
          put_u16(sections.psi, static_cast<uint16_t>(b));
      }
      res.psi_hat.push_back(bits);
    }
  }
  res.report.psi.bytes = sections.psi.size();
  res.report.psi.estimated_bits = 8.0 * static_cast<double>(sections.psi.size());

  // Level 2: side parameters under the scalars.
  PhiSection phi_sec = encode_phi(manifest, phi_values, psi_hat, cc.code_level2);
  sections.phi = std::move(phi_sec.bytes);
  res.symbols.phi = std::move(phi_sec.symbols);
  res.report.phi.bytes = sections.phi.size();
  res.report.phi.estimated_bits = phi_sec.stats.est_bits;
  res.report.phi.symbols = phi_sec.stats.symbols;
  res.report.phi.clamped = phi_sec.stats.clamped;

  // Level 1: the model itself under the decoded side parameters.
  CodingPlan plan = build_plan(cfg, cc, manifest, phi_sec.hat, rep.layers.size());
  for (size_t i = 0; i < rep.layers.size(); ++i)
    plan.layers[i].m = layer_coding_modes(rep.layers[i].second.shape(), cc);
  const ThetaLayout tl = theta_layout(plan, cc);
  std::vector<Disp> causal, with_center;
  make_disps(cc.context.kernel, causal, with_center);

  res.quantized.config = cfg;
  res.symbols.grids.resize(rep.grids.size());
  std::vector<std::vector<float>> grid_values(rep.grids.size());
  for (size_t l = 0; l < rep.grids.size(); ++l) {
    grid_values[l].assign(static_cast<size_t>(rep.grids[l].numel()), 0.0f);
    res.symbols.grids[l].assign(static_cast<size_t>(rep.grids[l].numel()), 0);
  }

  std::vector<std::vector<uint8_t>> block_payloads(tl.jobs.size());
  std::vector<CodeStats> block_stats(tl.jobs.size());
  parallel_for_checked(static_cast<int64_t>(tl.jobs.size()), [&](int64_t ji) {
    const GridJob& job = tl.jobs[static_cast<size_t>(ji)];
    const LevelCoding& lc = plan.levels[static_cast<size_t>(job.level)];
    RangeEncoder enc;
    code_grid_block<true>(job, lc, cc, causal, with_center,
                          rep.grids[static_cast<size_t>(job.level)].values().data(), &enc,
                          nullptr, grid_values[static_cast<size_t>(job.level)].data(),
                          res.symbols.grids[static_cast<size_t>(job.level)].data(),
                          block_stats[static_cast<size_t>(ji)]);
    block_payloads[static_cast<size_t>(ji)] = enc.finish().payload;
  });

  const size_t theta_grid_start = sections.theta.size();
  for (size_t l = 0; l < plan.levels.size(); ++l) {
    const int64_t begin = tl.level_job_begin[l], end = tl.level_job_begin[l + 1];
    put_varint(sections.theta, static_cast<uint64_t>(end - begin));
    for (int64_t j = begin; j < end; ++j)
      put_varint(sections.theta, block_payloads[static_cast<size_t>(j)].size());
    for (int64_t j = begin; j < end; ++j) {
      const auto& p = block_payloads[static_cast<size_t>(j)];
      sections.theta.insert(sections.theta.end(), p.begin(), p.end());
    }
  }
  for (const CodeStats& st : block_stats) {
    res.report.grids.estimated_bits += st.est_bits;
    res.report.grids.symbols += st.symbols;
    res.report.grids.clamped += st.clamped;
  }
  res.report.grids.bytes = sections.theta.size() - theta_grid_start;

  res.symbols.layers.resize(rep.layers.size());
  std::vector<std::vector<float>> layer_values(rep.layers.size());
  std::vector<std::vector<uint8_t>> layer_payloads(rep.layers.size());
  std::vector<CodeStats> layer_stats(rep.layers.size());
  parallel_for_checked(static_cast<int64_t>(rep.layers.size()), [&](int64_t i) {
    const auto& t = rep.layers[static_cast<size_t>(i)].second;
    layer_values[static_cast<size_t>(i)].assign(static_cast<size_t>(t.numel()), 0.0f);
    res.symbols.layers[static_cast<size_t>(i)].assign(static_cast<size_t>(t.numel()), 0);
    RangeEncoder enc;
    code_layer_tensor<true>(plan.layers[static_cast<size_t>(i)], t.values().data(), &enc,
                            nullptr, layer_values[static_cast<size_t>(i)].data(),
                            res.symbols.layers[static_cast<size_t>(i)].data(),
                            layer_stats[static_cast<size_t>(i)]);
    layer_payloads[static_cast<size_t>(i)] = enc.finish().payload;
  });
  const size_t theta_layer_start = sections.theta.size();
  for (size_t i = 0; i < rep.layers.size(); ++i) {
    put_varint(sections.theta, layer_payloads[i].size());
    sections.theta.insert(sections.theta.end(), layer_payloads[i].begin(),
                          layer_payloads[i].end());
    res.report.layers.estimated_bits += layer_stats[i].est_bits;
    res.report.layers.symbols += layer_stats[i].symbols;
    res.report.layers.clamped += layer_stats[i].clamped;
  }
  res.report.layers.bytes = sections.theta.size() - theta_layer_start;

  for (size_t l = 0; l < rep.grids.size(); ++l)
    res.quantized.grids.push_back(
        Tensor<float>(rep.grids[l].shape(), std::move(grid_values[l])));
  for (size_t i = 0; i < rep.layers.size(); ++i)
    res.quantized.layers.emplace_back(
        rep.layers[i].first,
        Tensor<float>(rep.layers[i].second.shape(), std::move(layer_values[i])));

  StreamHeader header{cfg, cc, color};
  res.bytes = assemble_container(header, sections);
  res.report.total_bytes = res.bytes.size();
  res.report.header_bytes =
      res.bytes.size() - sections.psi.size() - sections.phi.size() - sections.theta.size();
  return res;
}

DecodedStream decode_stream(std::span<const uint8_t> bytes, CodedSymbols* symbols_out) {
  ParsedContainer pc = parse_container(bytes);
  const ModelConfig& cfg = pc.header.config;
  const CodecConfig& cc = pc.header.codec;
  const auto manifest = build_phi_manifest(cfg, cc);

  DecodedStream out;
  out.codec = cc;
  out.color = pc.header.color;

  // Level 3.
  std::vector<PsiHat> psi_hat;
  if (cc.code_level2) {
    const size_t unit = cc.psi_full ? 12 : 6;
    if (pc.sections.psi.size() != unit * manifest.size())
      throw DecodeError("psi section length disagrees with the manifest");
    ByteReader r{pc.sections.psi, 0, "psi section"};
    for (size_t i = 0; i < manifest.size(); ++i) {
      std::array<uint32_t, 3> bits;
      for (auto& b : bits) b = cc.psi_full ? r.u32() : r.u16();
      try {
        psi_hat.push_back(psi_from_bits(bits, cc.psi_full, manifest[i].name));
      } catch (const NumericError& e) {
        throw DecodeError(std::string("psi section invalid: ") + e.what());
      }
      out.psi_hat.push_back(bits);
    }
  } else if (!pc.sections.psi.empty()) {
    throw DecodeError("psi section must be empty when side parameters are raw");
  }

  // Level 2.
  PhiDecodeOut phi = decode_phi(manifest, psi_hat, cc.code_level2, pc.sections.phi);

  // Level 1.
  out.rep = init_model<float>(cfg, 0);
  CodingPlan plan = build_plan(cfg, cc, manifest, phi.hat, out.rep.layers.size());
  for (size_t i = 0; i < out.rep.layers.size(); ++i)
    plan.layers[i].m = layer_coding_modes(out.rep.layers[i].second.shape(), cc);
  const ThetaLayout tl = theta_layout(plan, cc);
  std::vector<Disp> causal, with_center;
  make_disps(cc.context.kernel, causal, with_center);

  ByteReader r{pc.sections.theta, 0, "theta section"};
  std::vector<std::pair<size_t, size_t>> block_spans(tl.jobs.size());
  for (size_t l = 0; l < plan.levels.size(); ++l) {
    const int64_t begin = tl.level_job_begin[l], end = tl.level_job_begin[l + 1];
    const uint64_t n_blocks = r.varint();
    if (n_blocks != static_cast<uint64_t>(end - begin))
      throw DecodeError("theta section block count disagrees with the config");
    std::vector<uint64_t> lens(static_cast<size_t>(end - begin));
    for (auto& len : lens) len = r.varint();
    for (int64_t j = begin; j < end; ++j) {
      const uint64_t len = lens[static_cast<size_t>(j - begin)];
      r.need(len);
      block_spans[static_cast<size_t>(j)] = {r.pos, static_cast<size_t>(len)};
      r.pos += len;
    }
  }

  std::vector<std::vector<float>> grid_values(out.rep.grids.size());
  std::vector<std::vector<int32_t>> grid_symbols(out.rep.grids.size());
  for (size_t l = 0; l < out.rep.grids.size(); ++l) {
    grid_values[l].assign(static_cast<size_t>(out.rep.grids[l].numel()), 0.0f);
    grid_symbols[l].assign(static_cast<size_t>(out.rep.grids[l].numel()), 0);
  }
  parallel_for_checked(static_cast<int64_t>(tl.jobs.size()), [&](int64_t ji) {
    const GridJob& job = tl.jobs[static_cast<size_t>(ji)];
    const LevelCoding& lc = plan.levels[static_cast<size_t>(job.level)];
    const auto [pos, len] = block_spans[static_cast<size_t>(ji)];
    CodedSegment seg;
    seg.payload.assign(pc.sections.theta.begin() + static_cast<int64_t>(pos),
                       pc.sections.theta.begin() + static_cast<int64_t>(pos + len));
    seg.declared_bytes = len;
    RangeDecoder dec(seg);
    CodeStats st;
    code_grid_block<false>(job, lc, cc, causal, with_center, nullptr, nullptr, &dec,
                           grid_values[static_cast<size_t>(job.level)].data(),
                           grid_symbols[static_cast<size_t>(job.level)].data(), st);
  });

  std::vector<std::pair<size_t, size_t>> layer_spans(out.rep.layers.size());
  for (size_t i = 0; i < out.rep.layers.size(); ++i) {
    const uint64_t len = r.varint();
    r.need(len);
    layer_spans[i] = {r.pos, static_cast<size_t>(len)};
    r.pos += len;
  }
  if (r.pos != pc.sections.theta.size()) throw DecodeError("theta section has trailing bytes");

  std::vector<std::vector<float>> layer_values(out.rep.layers.size());
  std::vector<std::vector<int32_t>> layer_symbols(out.rep.layers.size());
  parallel_for_checked(static_cast<int64_t>(out.rep.layers.size()), [&](int64_t i) {
    const auto& t = out.rep.layers[static_cast<size_t>(i)].second;
    layer_values[static_cast<size_t>(i)].assign(static_cast<size_t>(t.numel()), 0.0f);
    layer_symbols[static_cast<size_t>(i)].assign(static_cast<size_t>(t.numel()), 0);
    const auto [pos, len] = layer_spans[static_cast<size_t>(i)];
    CodedSegment seg;
    seg.payload.assign(pc.sections.theta.begin() + static_cast<int64_t>(pos),
                       pc.sections.theta.begin() + static_cast<int64_t>(pos + len));
    seg.declared_bytes = len;
    RangeDecoder dec(seg);
    CodeStats st;
    code_layer_tensor<false>(plan.layers[static_cast<size_t>(i)], nullptr, nullptr, &dec,
                             layer_values[static_cast<size_t>(i)].data(),
                             layer_symbols[static_cast<size_t>(i)].data(), st);
  });

  for (size_t l = 0; l < out.rep.grids.size(); ++l)
    out.rep.grids[l] = Tensor<float>(out.rep.grids[l].shape(), std::move(grid_values[l]));
  for (size_t i = 0; i < out.rep.layers.size(); ++i)
    out.rep.layers[i].second =
        Tensor<float>(out.rep.layers[i].second.shape(), std::move(layer_values[i]));

  if (symbols_out != nullptr) {
    symbols_out->grids = std::move(grid_symbols);
    symbols_out->layers = std::move(layer_symbols);
    symbols_out->phi = std::move(phi.symbols);
  }
  return out;
}

RateReport rate_report(std::span<const uint8_t> bytes) {
  ParsedContainer pc = parse_container(bytes);
  const ModelConfig& cfg = pc.header.config;
  const CodecConfig& cc = pc.header.codec;
  const auto manifest = build_phi_manifest(cfg, cc);

  RateReport rr;
  rr.total_bits = 8 * static_cast<uint64_t>(bytes.size());
  rr.header_bits = 8 * pc.header_bytes;

  // Split level-3 and level-2 bytes between the two side-parameter kinds.
  uint64_t quant_elems = 0, em_elems = 0, quant_tensors = 0, em_tensors = 0;
  for (const auto& info : manifest) {
    int64_t n = 1;
    for (int64_t e : info.shape) n *= e;
    if (info.kind == PhiKind::kQuant) {
      quant_elems += static_cast<uint64_t>(n);
      ++quant_tensors;
    } else {
      em_elems += static_cast<uint64_t>(n);
      ++em_tensors;
    }
  }
  rr.quant_params = static_cast<int64_t>(quant_elems);
  rr.em_params = static_cast<int64_t>(em_elems);

  const uint64_t psi_unit_bits = cc.psi_full ? 32 : 16;
  uint64_t psi_quant_bits = 0, psi_em_bits = 0;
  if (cc.code_level2) {
    psi_quant_bits = 3 * psi_unit_bits * quant_tensors;
    psi_em_bits = 3 * psi_unit_bits * em_tensors;
    if (8 * pc.sections.psi.size() != psi_quant_bits + psi_em_bits)
      throw DecodeError("psi section length disagrees with the manifest");
  } else if (!pc.sections.psi.empty()) {
    throw DecodeError("psi section must be empty when side parameters are raw");
  }

  uint64_t phi_quant_bits = 0, phi_em_bits = 0;
  if (cc.code_level2) {
    ByteReader r{pc.sections.phi, 0, "phi section"};
    const size_t a0 = r.pos;
    const uint64_t len_q = r.varint();
    r.need(len_q);
    r.pos += len_q;
    phi_quant_bits = 8 * (r.pos - a0);
    const size_t b0 = r.pos;
    const uint64_t len_e = r.varint();
    r.need(len_e);
    r.pos += len_e;
    phi_em_bits = 8 * (r.pos - b0);
    if (r.pos != pc.sections.phi.size()) throw DecodeError("phi section has trailing bytes");
  } else {
    if (pc.sections.phi.size() != 2 * (quant_elems + em_elems))
      throw DecodeError("phi section length disagrees with the manifest");
    phi_quant_bits = 16 * quant_elems;
    phi_em_bits = 16 * em_elems;
  }
  rr.quant_bits = psi_quant_bits + phi_quant_bits;
  rr.em_bits = psi_em_bits + phi_em_bits;

  // Walk the theta section structure.
  CodingPlan plan;
  plan.levels.resize(static_cast<size_t>(cfg.grid_levels));
  for (int64_t l = 0; l < cfg.grid_levels; ++l) {
    plan.levels[static_cast<size_t>(l)].b = level_blocks(cfg, cc, l);
    rr.grid_params += plan.levels[static_cast<size_t>(l)].b.C *
                      plan.levels[static_cast<size_t>(l)].b.T *
                      plan.levels[static_cast<size_t>(l)].b.H *
                      plan.levels[static_cast<size_t>(l)].b.W;
  }
  ByteReader r{pc.sections.theta, 0, "theta section"};
  for (size_t l = 0; l < plan.levels.size(); ++l) {
    const size_t start = r.pos;
    const uint64_t n_blocks = r.varint();
    if (n_blocks != static_cast<uint64_t>(plan.levels[l].b.blocks()))
      throw DecodeError("theta section block count disagrees with the config");
    uint64_t payload = 0;
    for (uint64_t j = 0; j < n_blocks; ++j) payload += r.varint();
    r.need(payload);
    r.pos += payload;
    rr.grid_bits += 8 * (r.pos - start);
  }
  const auto skeleton = init_model<float>(cfg, 0);
  for (const auto& [name, t] : skeleton.layers) {
    const size_t start = r.pos;
    const uint64_t len = r.varint();
    r.need(len);
    r.pos += len;
    rr.layer_bits += 8 * (r.pos - start);
    rr.layer_params += t.numel();
  }
  if (r.pos != pc.sections.theta.size()) throw DecodeError("theta section has trailing bytes");

  auto per = [](uint64_t bits, int64_t params) {
    return params > 0 ? static_cast<double>(bits) / static_cast<double>(params) : 0.0;
  };
  rr.grid_bits_per_param = per(rr.grid_bits, rr.grid_params);
  rr.layer_bits_per_param = per(rr.layer_bits, rr.layer_params);
  rr.quant_bits_per_param = per(rr.quant_bits, rr.quant_params);
  rr.em_bits_per_param = per(rr.em_bits, rr.em_params);
  return rr;
}

template SideParams<float> init_side_params<float>(const NeuralRepresentation<float>&,
                                                   const CodecConfig&, uint64_t);
template SideParams<double> init_side_params<double>(const NeuralRepresentation<double>&,
                                                     const CodecConfig&, uint64_t);
template PsiParams<float> init_psi<float>(const ModelConfig&, const CodecConfig&);
template PsiParams<double> init_psi<double>(const ModelConfig&, const CodecConfig&);

}  // namespace nvrc
