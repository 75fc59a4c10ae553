#include "nvrc/model.hpp"

#include <cmath>
#include <string>

#include "nvrc/common.hpp"
#include "nvrc/quant.hpp"

namespace nvrc {

namespace {

int64_t stride_product(const ModelConfig& cfg) {
  int64_t p = 1;
  for (int64_t s : cfg.strides) p *= s;
  return p;
}

constexpr double kTwoPi = 6.28318530717958647692;

// Normalized-coordinate features fed beside the sampled grid features:
// (t, h, w) in [0, 1) plus one sine/cosine pair per axis.
constexpr int64_t kPosFeatures = 9;

}  // namespace

void validate_config(const ModelConfig& cfg) {
  auto need = [](bool ok, const std::string& what) {
    if (!ok) throw ConfigError("model config: " + what);
  };
  need(cfg.video_t > 0 && cfg.video_h > 0 && cfg.video_w > 0, "video extents must be positive");
  need(cfg.t_patch > 0 && cfg.h_patch > 0 && cfg.w_patch > 0 && cfg.c_patch > 0,
       "patch extents must be positive");
  need(cfg.video_t % cfg.t_patch == 0 && cfg.video_h % cfg.h_patch == 0 &&
           cfg.video_w % cfg.w_patch == 0,
       "patch extents must tile the video exactly");
  need(cfg.grid_levels >= 1, "at least one grid level");
  need(cfg.grid_t > 0 && cfg.grid_h > 0 && cfg.grid_w > 0 && cfg.grid_c > 0,
       "grid extents must be positive");
  need(cfg.grid_scale_t > 0 && cfg.grid_scale_h > 0 && cfg.grid_scale_w > 0 &&
           cfg.grid_scale_c > 0,
       "grid scaling ratios must be positive");
  const size_t stages = cfg.channels.size();
  need(stages >= 1, "at least one synthesis stage");
  need(cfg.depths.size() == stages && cfg.strides.size() == stages,
       "channels, depths, strides must have one entry per stage");
  for (size_t s = 0; s < stages; ++s) {
    need(cfg.channels[s] > 0 && cfg.depths[s] >= 0, "stage widths positive, depths nonnegative");
    need(cfg.strides[s] == 2, "only stride-2 synthesis upsampling is implemented");
  }
  need(cfg.kernel >= 1 && cfg.kernel % 2 == 1, "block kernel must be odd");
  need(cfg.expansion >= 1, "expansion must be at least 1");
  for (int64_t k : cfg.stem_kernel) need(k >= 1 && k % 2 == 1, "stem kernel extents must be odd");
  need(cfg.local_t >= 1 && cfg.local_hw >= 1, "local grid extents must be positive");
  const int64_t prod = stride_product(cfg);
  need(cfg.h_patch % prod == 0 && cfg.w_patch % prod == 0,
       "stride product must divide the patch extents");
}

std::array<int64_t, 4> grid_level_extents(const ModelConfig& cfg, int64_t level) {
  auto scaled = [level](int64_t base, double ratio) {
    const double v = static_cast<double>(base) * std::pow(ratio, static_cast<double>(level));
    return std::max<int64_t>(1, std::llround(v));
  };
  return {scaled(cfg.grid_c, cfg.grid_scale_c), scaled(cfg.grid_t, cfg.grid_scale_t),
          scaled(cfg.grid_h, cfg.grid_scale_h), scaled(cfg.grid_w, cfg.grid_scale_w)};
}

std::array<int64_t, 2> stem_output_extents(const ModelConfig& cfg) {
  const int64_t prod = stride_product(cfg);
  return {cfg.h_patch / prod, cfg.w_patch / prod};
}

ModelConfig tiny_model_config(int64_t video_t, int64_t video_h, int64_t video_w) {
  ModelConfig cfg;
  cfg.video_t = video_t;
  cfg.video_h = video_h;
  cfg.video_w = video_w;
  cfg.t_patch = 1;
  cfg.h_patch = std::min<int64_t>(32, video_h);
  cfg.w_patch = std::min<int64_t>(32, video_w);
  cfg.c_patch = 3;
  cfg.grid_t = std::min<int64_t>(16, video_t);
  cfg.grid_h = 8;
  cfg.grid_w = 8;
  cfg.grid_c = 4;
  cfg.grid_levels = 3;
  cfg.channels = {32, 16, 8};
  cfg.depths = {2, 2, 1};
  cfg.strides = {2, 2, 2};
  cfg.kernel = 3;
  cfg.expansion = 2;
  cfg.stem_kernel = {1, 3, 3};
  cfg.local_t = 4;
  cfg.local_hw = 2;
  return cfg;
}

namespace {

template <typename S>
Tensor<S> randn(const std::vector<int64_t>& shape, double std, Rng& rng) {
  std::vector<S> v(shape_numel(shape));
  for (auto& x : v) x = static_cast<S>(rng.next_normal() * std);
  return Tensor<S>(shape, v);
}

// Fan-in scaled uniform for weights whose 2D view has the given column count.
template <typename S>
Tensor<S> fan_uniform(const std::vector<int64_t>& shape, Rng& rng) {
  const int64_t fan = shape_numel(shape) / shape[0];
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan));
  std::vector<S> v(shape_numel(shape));
  for (auto& x : v) x = static_cast<S>((2.0 * rng.next_double() - 1.0) * bound);
  return Tensor<S>(shape, v);
}

}  // namespace

template <typename S>
NeuralRepresentation<S> init_model(const ModelConfig& cfg, uint64_t seed) {
  validate_config(cfg);
  Rng rng(seed);
  NeuralRepresentation<S> rep;
  rep.config = cfg;

  for (int64_t l = 0; l < cfg.grid_levels; ++l) {
    const auto e = grid_level_extents(cfg, l);
    rep.grids.push_back(randn<S>({e[0], e[1], e[2], e[3]}, 0.01, rng));
  }

  auto put = [&rep](const std::string& name, Tensor<S> t) {
    rep.layers.emplace_back(name, std::move(t));
  };
  const int64_t c0 = cfg.channels[0];
  const auto [kt, kh, kw] = cfg.stem_kernel;
  for (int64_t l = 0; l < cfg.grid_levels; ++l) {
    const auto e = grid_level_extents(cfg, l);
    put("stem" + std::to_string(l) + ".w", fan_uniform<S>({c0, e[0], kt, kh, kw}, rng));
    put("stem" + std::to_string(l) + ".b", Tensor<S>({c0}, S(0)));
  }
  put("pos.w", fan_uniform<S>({c0, kPosFeatures}, rng));
  put("pos.b", Tensor<S>({c0}, S(0)));

  int64_t prev = c0;
  for (size_t s = 0; s < cfg.channels.size(); ++s) {
    const std::string p = "stage" + std::to_string(s) + ".";
    const int64_t c = cfg.channels[s];
    put(p + "up.w", fan_uniform<S>({c, prev, 1, 1, 1}, rng));
    put(p + "up.b", Tensor<S>({c}, S(0)));
    const int64_t lhw = cfg.local_hw << s;
    put(p + "local", randn<S>({c, cfg.local_t, lhw, lhw}, 0.01, rng));
    for (int64_t d = 0; d < cfg.depths[s]; ++d) {
      const std::string b = p + "block" + std::to_string(d) + ".";
      put(b + "dw.w", fan_uniform<S>({c, 1, 1, cfg.kernel, cfg.kernel}, rng));
      put(b + "dw.b", Tensor<S>({c}, S(0)));
      put(b + "ln.g", Tensor<S>({c}, S(1)));
      put(b + "ln.b", Tensor<S>({c}, S(0)));
      const int64_t hidden = c * cfg.expansion;
      put(b + "pw1.w", fan_uniform<S>({hidden, c, 1, 1, 1}, rng));
      put(b + "pw1.b", Tensor<S>({hidden}, S(0)));
      put(b + "pw2.w", fan_uniform<S>({c, hidden, 1, 1, 1}, rng));
      put(b + "pw2.b", Tensor<S>({c}, S(0)));
    }
    prev = c;
  }
  put("head.ln.g", Tensor<S>({prev}, S(1)));
  put("head.ln.b", Tensor<S>({prev}, S(0)));
  put("head.w", fan_uniform<S>({cfg.c_patch, prev, 1, 1, 1}, rng));
  put("head.b", Tensor<S>({cfg.c_patch}, S(0)));
  return rep;
}

template <typename S>
int64_t param_count(const NeuralRepresentation<S>& rep) {
  int64_t n = 0;
  for (const auto& g : rep.grids) n += g.numel();
  for (const auto& [name, t] : rep.layers) n += t.numel();
  return n;
}

namespace {

template <typename S>
const Tensor<S>& layer(const NeuralRepresentation<S>& rep, const std::string& name) {
  for (const auto& [n, t] : rep.layers) {
    if (n == name) return t;
  }
  throw ConfigError("missing layer tensor: " + name);
}

template <typename S>
Tensor<S> bias4(const Tensor<S>& b) {
  return reshape(b, {b.numel(), 1, 1, 1});
}

template <typename S>
Tensor<S> pointwise(const Tensor<S>& x, const Tensor<S>& w, const Tensor<S>& b) {
  return add(conv3d(x, w, {0, 0, 0}), bias4(b));
}

// Trilinear sample positions for a (tn, hn, wn) lattice inside patch
// (i, j, k), expressed in the index space of a (gt, gh, gw) grid covering the
// whole video. Voxel centers map through u = (absolute + 0.5) / total and
// land at u * extent - 0.5.
template <typename S>
Tensor<S> lattice_coords(const ModelConfig& cfg, PatchCoord pc, int64_t tn, int64_t hn,
                         int64_t wn, int64_t gt, int64_t gh, int64_t gw) {
  const int64_t total_h = cfg.video_h / cfg.h_patch * hn;
  const int64_t total_w = cfg.video_w / cfg.w_patch * wn;
  std::vector<S> v;
  v.reserve(tn * hn * wn * 3);
  for (int64_t t = 0; t < tn; ++t) {
    const double ut = (static_cast<double>(pc.k * tn + t) + 0.5) / static_cast<double>(cfg.video_t / cfg.t_patch * tn);
    for (int64_t h = 0; h < hn; ++h) {
      const double uh = (static_cast<double>(pc.j * hn + h) + 0.5) / static_cast<double>(total_h);
      for (int64_t w = 0; w < wn; ++w) {
        const double uw = (static_cast<double>(pc.i * wn + w) + 0.5) / static_cast<double>(total_w);
        v.push_back(static_cast<S>(ut * static_cast<double>(gt) - 0.5));
        v.push_back(static_cast<S>(uh * static_cast<double>(gh) - 0.5));
        v.push_back(static_cast<S>(uw * static_cast<double>(gw) - 0.5));
      }
    }
  }
  return Tensor<S>({tn * hn * wn, 3}, v);
}

template <typename S>
Tensor<S> positional_features(const ModelConfig& cfg, PatchCoord pc, int64_t tn, int64_t hn,
                              int64_t wn) {
  const int64_t p = tn * hn * wn;
  std::vector<S> v(kPosFeatures * p);
  int64_t col = 0;
  for (int64_t t = 0; t < tn; ++t) {
    const double ut = (static_cast<double>(pc.k * tn + t) + 0.5) / static_cast<double>(cfg.video_t);
    for (int64_t h = 0; h < hn; ++h) {
      const double uh = (static_cast<double>(pc.j * hn + h) + 0.5) /
                        static_cast<double>(cfg.video_h / cfg.h_patch * hn);
      for (int64_t w = 0; w < wn; ++w, ++col) {
        const double uw = (static_cast<double>(pc.i * wn + w) + 0.5) /
                          static_cast<double>(cfg.video_w / cfg.w_patch * wn);
        const double f[kPosFeatures] = {ut,
                                        uh,
                                        uw,
                                        std::sin(kTwoPi * ut),
                                        std::sin(kTwoPi * uh),
                                        std::sin(kTwoPi * uw),
                                        std::cos(kTwoPi * ut),
                                        std::cos(kTwoPi * uh),
                                        std::cos(kTwoPi * uw)};
        for (int64_t r = 0; r < kPosFeatures; ++r) v[r * p + col] = static_cast<S>(f[r]);
      }
    }
  }
  return Tensor<S>({kPosFeatures, p}, v);
}

}  // namespace

template <typename S>
Tensor<S> forward(const NeuralRepresentation<S>& rep, PatchCoord pc, OutputMode mode) {
  const ModelConfig& cfg = rep.config;
  if (pc.i < 0 || pc.i >= cfg.video_w / cfg.w_patch || pc.j < 0 ||
      pc.j >= cfg.video_h / cfg.h_patch || pc.k < 0 || pc.k >= cfg.video_t / cfg.t_patch) {
    throw UsageError("patch coordinate out of range");
  }
  const auto base = stem_output_extents(cfg);
  const int64_t tb = cfg.t_patch, hb = base[0], wb = base[1];
  const auto [kt, kh, kw] = cfg.stem_kernel;

  // Stem per level at grid resolution, then trilinear sampling at the base
  // lattice; levels sum into one feature volume.
  Tensor<S> x;
  for (int64_t l = 0; l < cfg.grid_levels; ++l) {
    const std::string sl = "stem" + std::to_string(l);
    Tensor<S> f = add(conv3d(rep.grids[l], layer(rep, sl + ".w"), {kt / 2, kh / 2, kw / 2}),
                      bias4(layer(rep, sl + ".b")));
    const auto& gs = f.shape();
    Tensor<S> sampled = grid_sample(
        f, lattice_coords<S>(cfg, pc, tb, hb, wb, gs[1], gs[2], gs[3]));
    x = (l == 0) ? sampled : add(x, sampled);
  }
  x = add(x, matmul(layer(rep, "pos.w"), positional_features<S>(cfg, pc, tb, hb, wb)));
  x = add(reshape(x, {cfg.channels[0], tb, hb, wb}), bias4(layer(rep, "pos.b")));
  x = gelu(x);

  int64_t hs = hb, ws = wb;
  for (size_t s = 0; s < cfg.channels.size(); ++s) {
    const std::string p = "stage" + std::to_string(s) + ".";
    x = upsample2x_hw(x);
    hs *= 2;
    ws *= 2;
    x = pointwise(x, layer(rep, p + "up.w"), layer(rep, p + "up.b"));
    const Tensor<S>& local = layer(rep, p + "local");
    const auto& lsh = local.shape();
    Tensor<S> ls = grid_sample(local, lattice_coords<S>(cfg, pc, tb, hs, ws, lsh[1], lsh[2], lsh[3]));
    x = add(x, reshape(ls, {cfg.channels[s], tb, hs, ws}));
    const int64_t pad = cfg.kernel / 2;
    for (int64_t d = 0; d < cfg.depths[s]; ++d) {
      const std::string b = p + "block" + std::to_string(d) + ".";
      Tensor<S> y = add(conv3d(x, layer(rep, b + "dw.w"), {0, pad, pad}, cfg.channels[s]),
                        bias4(layer(rep, b + "dw.b")));
      y = layernorm_channels(y, layer(rep, b + "ln.g"), layer(rep, b + "ln.b"));
      y = gelu(pointwise(y, layer(rep, b + "pw1.w"), layer(rep, b + "pw1.b")));
      y = pointwise(y, layer(rep, b + "pw2.w"), layer(rep, b + "pw2.b"));
      x = add(x, y);
    }
  }

  x = layernorm_channels(x, layer(rep, "head.ln.g"), layer(rep, "head.ln.b"));
  x = pointwise(x, layer(rep, "head.w"), layer(rep, "head.b"));
  if (mode == OutputMode::kEval) {
    x = clamp(x, 0.0, 1.0);
  }
  return transpose(x, {1, 2, 3, 0});
}

template <typename S>
Tensor<S> render_video(const NeuralRepresentation<S>& rep) {
  const ModelConfig& cfg = rep.config;
  const int64_t nt = cfg.video_t / cfg.t_patch, nh = cfg.video_h / cfg.h_patch,
                nw = cfg.video_w / cfg.w_patch;
  std::vector<S> out(cfg.video_t * cfg.video_h * cfg.video_w * cfg.c_patch);
  const auto ost = shape_strides({cfg.video_t, cfg.video_h, cfg.video_w, cfg.c_patch});
  for (int64_t k = 0; k < nt; ++k) {
    for (int64_t j = 0; j < nh; ++j) {
      for (int64_t i = 0; i < nw; ++i) {
        const Tensor<S> patch = forward(rep, {i, j, k}, OutputMode::kEval);
        const auto& pv = patch.values();
        int64_t idx = 0;
        for (int64_t t = 0; t < cfg.t_patch; ++t) {
          for (int64_t h = 0; h < cfg.h_patch; ++h) {
            for (int64_t w = 0; w < cfg.w_patch; ++w) {
              const int64_t o = (k * cfg.t_patch + t) * ost[0] + (j * cfg.h_patch + h) * ost[1] +
                                (i * cfg.w_patch + w) * ost[2];
              for (int64_t c = 0; c < cfg.c_patch; ++c, ++idx) out[o + c] = pv[idx];
            }
          }
        }
      }
    }
  }
  return Tensor<S>({cfg.video_t, cfg.video_h, cfg.video_w, cfg.c_patch}, out);
}

template <typename S>
Tensor<S> reshape_layer_param(const Tensor<S>& t) {
  const Param2D v = layer_param_view(t.shape());
  return reshape(t, {v.rows, v.cols});
}

#define NVRC_INSTANTIATE_MODEL(S)                                                   \
  template NeuralRepresentation<S> init_model<S>(const ModelConfig&, uint64_t);     \
  template int64_t param_count<S>(const NeuralRepresentation<S>&);                  \
  template Tensor<S> forward<S>(const NeuralRepresentation<S>&, PatchCoord,         \
                                OutputMode);                                        \
  template Tensor<S> render_video<S>(const NeuralRepresentation<S>&);               \
  template Tensor<S> reshape_layer_param<S>(const Tensor<S>&);

NVRC_INSTANTIATE_MODEL(float)
NVRC_INSTANTIATE_MODEL(double)

#undef NVRC_INSTANTIATE_MODEL

}  // namespace nvrc
