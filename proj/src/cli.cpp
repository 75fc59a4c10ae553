// CLI driver. Subcommand handlers are plain functions that throw the library
// error types; run_cli maps exceptions onto the documented exit codes, so
// every failure path is exercised the same way in-process and from a shell.
#include "nvrc/cli.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <optional>
#include <ostream>
#include <sstream>

#include "CLI11.hpp"
#include "nvrc/common.hpp"
#include "nvrc/metrics.hpp"

namespace nvrc {
namespace {

namespace fs = std::filesystem;

template <typename... A>
std::string fmt(const char* f, A... a) {
  char buf[320];
  std::snprintf(buf, sizeof buf, f, a...);
  return std::string(buf);
}

std::string trimmed(const std::string& s) {
  const char* ws = " \t\r";
  const auto b = s.find_first_not_of(ws);
  if (b == std::string::npos) return "";
  return s.substr(b, s.find_last_not_of(ws) - b + 1);
}

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> parts;
  size_t pos = 0;
  while (true) {
    const size_t next = s.find(sep, pos);
    if (next == std::string::npos) {
      parts.push_back(s.substr(pos));
      return parts;
    }
    parts.push_back(s.substr(pos, next - pos));
    pos = next + 1;
  }
}

std::optional<int64_t> try_i64(const std::string& s) {
  int64_t x = 0;
  const char* e = s.data() + s.size();
  auto [p, ec] = std::from_chars(s.data(), e, x);
  if (ec != std::errc() || p != e) return std::nullopt;
  return x;
}

std::optional<uint64_t> try_u64(const std::string& s) {
  uint64_t x = 0;
  const char* e = s.data() + s.size();
  auto [p, ec] = std::from_chars(s.data(), e, x);
  if (ec != std::errc() || p != e) return std::nullopt;
  return x;
}

std::optional<double> try_f64(const std::string& s) {
  try {
    size_t idx = 0;
    const double x = std::stod(s, &idx);
    if (idx != s.size() || !std::isfinite(x)) return std::nullopt;
    return x;
  } catch (const std::exception&) {
    return std::nullopt;
  }
}

int64_t cfg_i64(const std::string& key, const std::string& v) {
  if (auto x = try_i64(v)) return *x;
  throw ConfigError("config key '" + key + "': expected an integer, got '" + v + "'");
}

uint64_t cfg_u64(const std::string& key, const std::string& v) {
  if (auto x = try_u64(v)) return *x;
  throw ConfigError("config key '" + key + "': expected an unsigned integer, got '" + v + "'");
}

double cfg_f64(const std::string& key, const std::string& v) {
  if (auto x = try_f64(v)) return *x;
  throw ConfigError("config key '" + key + "': expected a number, got '" + v + "'");
}

bool cfg_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ConfigError("config key '" + key + "': expected true/false, got '" + v + "'");
}

std::vector<int64_t> cfg_i64_list(const std::string& key, const std::string& v) {
  std::vector<int64_t> out;
  for (const auto& part : split(v, ',')) {
    if (auto x = try_i64(trimmed(part))) {
      out.push_back(*x);
      continue;
    }
    throw ConfigError("config key '" + key + "': expected comma-separated integers, got '" + v +
                      "'");
  }
  return out;
}

// --- file plumbing ---

void ensure_parent_dir(const std::string& path) {
  const fs::path p(path);
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
}

std::vector<uint8_t> read_bytes_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw UsageError("cannot open '" + path + "'");
  std::vector<uint8_t> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return bytes;
}

void write_bytes_file(const std::string& path, std::span<const uint8_t> bytes) {
  ensure_parent_dir(path);
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw UsageError("cannot write '" + path + "'");
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  f.flush();
  if (!f) throw UsageError("failed while writing '" + path + "'");
}

void write_text_file(const std::string& path, const std::string& text) {
  write_bytes_file(path, std::span<const uint8_t>(
                             reinterpret_cast<const uint8_t*>(text.data()), text.size()));
}

// --- metric helpers ---

double rgb_psnr(const VideoBuffer& a, const VideoBuffer& b) {
  const VideoBuffer ra = to_rgb(a), rb = to_rgb(b);
  return psnr(ra.planes, rb.planes, 1.0).db;
}

// render_video tiles to (T, H, W, C); buffers are planar (3, T, H, W).
VideoBuffer rendered_video(const NeuralRepresentation<float>& rep, ColorMode color,
                           int64_t fps_num = 25, int64_t fps_den = 1) {
  return video_from_tensor(transpose(render_video(rep), {3, 0, 1, 2}), color, fps_num, fps_den);
}

// One frame's three planes, contiguous (3, H, W); the buffer itself is
// channel-major so frames are gathered plane by plane.
std::vector<float> frame_planes(const VideoBuffer& v, int64_t f) {
  const int64_t ps = v.plane_size(), hw = v.h * v.w;
  std::vector<float> out(static_cast<size_t>(3 * hw));
  for (int64_t c = 0; c < 3; ++c)
    std::copy_n(v.planes.data() + c * ps + f * hw, hw, out.data() + c * hw);
  return out;
}

// --- shared per-run setup ---

struct RunSetup {
  ModelConfig mc;
  CodecConfig cc;
  TrainConfig tc;
  ColorMode color = ColorMode::kRgb;
};

RunSetup make_setup(const VideoBuffer& video, const std::string& config_path,
                    const std::string& ablate, std::optional<double> lambda,
                    std::optional<uint64_t> seed, const std::string& loss) {
  RunSetup s;
  s.mc = tiny_model_config(video.t, video.h, video.w);
  if (!config_path.empty()) {
    std::ifstream f(config_path);
    if (!f) throw ConfigError("cannot read config file '" + config_path + "'");
    std::stringstream text;
    text << f.rdbuf();
    apply_flat_config(parse_flat_config(text.str()), s.mc, s.cc, s.tc);
  }
  if (lambda) s.tc.lambda_rd = *lambda;
  if (seed) s.tc.seed = *seed;
  if (!loss.empty()) s.tc.loss = loss == "yuv" ? LossMode::kYuv444 : LossMode::kRgb;
  if (!ablate.empty()) apply_ablation(s.cc, ablate);
  s.tc.patch_t = s.mc.t_patch;
  s.tc.patch_h = s.mc.h_patch;
  s.tc.patch_w = s.mc.w_patch;
  s.color = s.tc.loss == LossMode::kYuv444 ? ColorMode::kYuv444 : ColorMode::kRgb;
  validate_config(s.mc);
  validate_codec_config(s.cc);
  validate_train_config(s.tc, s.mc);
  return s;
}

void print_rate_lines(std::ostream& out, const RateReport& rr, bool coded_side) {
  out << "sections header=" << rr.header_bits << " grids=" << rr.grid_bits
      << " layers=" << rr.layer_bits << " quant=" << rr.quant_bits << " em=" << rr.em_bits
      << " total=" << rr.total_bits << "\n";
  out << fmt("bits_per_param grids=%.4f layers=%.4f quant=%.4f em=%.4f\n", rr.grid_bits_per_param,
             rr.layer_bits_per_param, rr.quant_bits_per_param, rr.em_bits_per_param);
  out << "phi_coded_bits=" << (coded_side ? rr.quant_bits + rr.em_bits : 0) << "\n";
}

// --- subcommands ---

struct EncodeArgs {
  std::string input, out_path, config, loss, ablate;
  std::optional<double> lambda;
  std::optional<uint64_t> seed;
  bool quiet = false;
};

void cmd_encode(const EncodeArgs& a, std::ostream& out) {
  const VideoBuffer video = load_input_video(a.input);
  const RunSetup s = make_setup(video, a.config, a.ablate, a.lambda, a.seed, a.loss);
  LogSink sink;
  if (!a.quiet) sink = [&out](const TrainLogRecord& r) { out << format_log_record(r) << "\n"; };
  const TrainedModel m = train(video, s.mc, s.cc, s.tc, sink);
  const EncodeResult enc = encode_stream(m.rep, m.phi, m.psi, s.cc, s.color);
  write_bytes_file(a.out_path, enc.bytes);
  const RateReport rr = rate_report(enc.bytes);
  const double pixels =
      static_cast<double>(video.t) * static_cast<double>(video.h) * static_cast<double>(video.w);
  const VideoBuffer recon = rendered_video(enc.quantized, s.color, video.fps_num, video.fps_den);
  out << "stream=" << a.out_path << " bytes=" << enc.bytes.size() << "\n";
  out << fmt("bpp=%.6f\n", static_cast<double>(rr.total_bits) / pixels);
  out << fmt("psnr=%.4f\n", rgb_psnr(recon, video));
  if (s.color == ColorMode::kYuv444) {
    const VideoBuffer ty = to_yuv444(video);
    out << fmt("psnr_yuv=%.4f\n", psnr_yuv_611(recon.planes, ty.planes).db);
  }
  print_rate_lines(out, rr, s.cc.code_level2);
}

void cmd_decode(const std::string& stream_path, const std::string& out_path, std::ostream& out) {
  const std::vector<uint8_t> bytes = read_bytes_file(stream_path);
  const DecodedStream dec = decode_stream(bytes);
  const VideoBuffer v = rendered_video(dec.rep, dec.color);
  const bool y4m = out_path.size() > 4 && out_path.compare(out_path.size() - 4, 4, ".y4m") == 0;
  if (y4m) {
    ensure_parent_dir(out_path);
    write_y4m(v, out_path);
  } else {
    fs::create_directories(out_path);
    write_png_frames(v, out_path);
  }
  out << "decoded=" << out_path << " frames=" << v.t << " height=" << v.h << " width=" << v.w
      << " color=" << (dec.color == ColorMode::kYuv444 ? "yuv444" : "rgb") << "\n";
}

void cmd_eval(const std::string& test, const std::string& reference, std::ostream& out) {
  const VideoBuffer a = to_rgb(load_input_video(test));
  const VideoBuffer b = to_rgb(load_input_video(reference));
  if (a.t != b.t || a.h != b.h || a.w != b.w)
    throw UsageError(fmt("geometry mismatch: %lldx%lldx%lld vs %lldx%lldx%lld",
                         static_cast<long long>(a.t), static_cast<long long>(a.h),
                         static_cast<long long>(a.w), static_cast<long long>(b.t),
                         static_cast<long long>(b.h), static_cast<long long>(b.w)));
  out << "frame,psnr,ms_ssim\n";
  double sum_psnr = 0.0, sum_ms = 0.0;
  for (int64_t f = 0; f < a.t; ++f) {
    const std::vector<float> fa = frame_planes(a, f), fb = frame_planes(b, f);
    const double db = psnr(fa, fb, 1.0).db;
    const double ms = ms_ssim(fa, fb, 3, a.h, a.w, 11).value;
    sum_psnr += db;
    sum_ms += ms;
    out << f << fmt(",%.6f,%.6f\n", db, ms);
  }
  const double n = static_cast<double>(a.t);
  out << fmt("average,%.6f,%.6f\n", sum_psnr / n, sum_ms / n);
}

void cmd_report(const std::string& stream_path, std::ostream& out) {
  const std::vector<uint8_t> bytes = read_bytes_file(stream_path);
  const DecodedStream dec = decode_stream(bytes);  // full checksum validation
  const RateReport rr = rate_report(bytes);
  const ModelConfig& mc = dec.rep.config;
  const double pixels = static_cast<double>(mc.video_t) * static_cast<double>(mc.video_h) *
                        static_cast<double>(mc.video_w);
  out << "total_bits=" << rr.total_bits << "\n";
  out << "header_bits=" << rr.header_bits << "\n";
  out << "grid_bits=" << rr.grid_bits << " grid_params=" << rr.grid_params
      << fmt(" grid_bits_per_param=%.4f\n", rr.grid_bits_per_param);
  out << "layer_bits=" << rr.layer_bits << " layer_params=" << rr.layer_params
      << fmt(" layer_bits_per_param=%.4f\n", rr.layer_bits_per_param);
  out << "quant_bits=" << rr.quant_bits << " quant_params=" << rr.quant_params
      << fmt(" quant_bits_per_param=%.4f\n", rr.quant_bits_per_param);
  out << "em_bits=" << rr.em_bits << " em_params=" << rr.em_params
      << fmt(" em_bits_per_param=%.4f\n", rr.em_bits_per_param);
  out << "phi_coded_bits=" << (dec.codec.code_level2 ? rr.quant_bits + rr.em_bits : 0) << "\n";
  out << fmt("side_share=%.6f\n",
             static_cast<double>(rr.quant_bits + rr.em_bits) / static_cast<double>(rr.total_bits));
  out << fmt("bpp=%.6f\n", static_cast<double>(rr.total_bits) / pixels);
}

struct SweepArgs {
  std::string input, out_dir, config, loss;
  std::string lambdas = "0.5,1,2,4";
  std::string variants = "default,v1,v2,v3,v4,v5";
  std::optional<uint64_t> seed;
};

void cmd_sweep(const SweepArgs& a, std::ostream& out) {
  const VideoBuffer video = load_input_video(a.input);
  std::vector<double> lambdas;
  for (const auto& part : a.lambdas.empty() ? std::vector<std::string>{} : split(a.lambdas, ',')) {
    const auto x = try_f64(trimmed(part));
    if (!x || *x <= 0.0) throw UsageError("--lambdas: expected positive numbers, got '" + part + "'");
    lambdas.push_back(*x);
  }
  if (lambdas.empty()) throw UsageError("--lambdas: need at least one value");
  std::vector<std::string> variants;
  for (const auto& part : split(a.variants, ',')) {
    const std::string name = trimmed(part);
    CodecConfig scratch;
    apply_ablation(scratch, name);  // validates the name
    if (std::find(variants.begin(), variants.end(), name) != variants.end())
      throw UsageError("--variants: duplicate '" + name + "'");
    variants.push_back(name);
  }
  fs::create_directories(a.out_dir);
  std::vector<RdCurve> curves;
  for (const auto& variant : variants) {
    RdCurve curve;
    curve.metric = "psnr";
    for (const double lambda : lambdas) {
      const RunSetup s = make_setup(video, a.config, variant, lambda, a.seed, a.loss);
      const TrainedModel m = train(video, s.mc, s.cc, s.tc);
      const EncodeResult enc = encode_stream(m.rep, m.phi, m.psi, s.cc, s.color);
      const std::string stream_path =
          (fs::path(a.out_dir) / fmt("%s_lambda%g.nvrc", variant.c_str(), lambda)).string();
      write_bytes_file(stream_path, enc.bytes);
      const double pixels = static_cast<double>(video.t) * static_cast<double>(video.h) *
                            static_cast<double>(video.w);
      const double bpp = 8.0 * static_cast<double>(enc.bytes.size()) / pixels;
      const VideoBuffer recon = rendered_video(enc.quantized, s.color, video.fps_num, video.fps_den);
      const double db = rgb_psnr(recon, video);
      curve.points.push_back({bpp, db});
      out << "variant=" << variant
          << fmt(" lambda=%g bpp=%.6f psnr=%.4f bytes=%llu\n", lambda, bpp, db,
                 static_cast<unsigned long long>(enc.bytes.size()));
    }
    std::sort(curve.points.begin(), curve.points.end(),
              [](const RdPoint& x, const RdPoint& y) { return x.bpp < y.bpp; });
    const std::string csv_path = (fs::path(a.out_dir) / ("rd_" + variant + ".csv")).string();
    write_text_file(csv_path, rd_curve_csv(curve));
    out << "wrote " << csv_path << "\n";
    curves.push_back(std::move(curve));
  }
  // Full anchor x test matrix; cells where the quality ranges never overlap
  // (degenerate desk curves) print as nan rather than failing the sweep.
  std::vector<std::vector<double>> percent(variants.size(),
                                           std::vector<double>(variants.size(), 0.0));
  for (size_t i = 0; i < variants.size(); ++i)
    for (size_t j = 0; j < variants.size(); ++j) {
      if (i == j) continue;
      try {
        percent[i][j] = bd_rate(curves[i], curves[j]);
      } catch (const UsageError&) {
        percent[i][j] = std::numeric_limits<double>::quiet_NaN();
      }
    }
  const std::string table_path = (fs::path(a.out_dir) / "bd_rate.csv").string();
  write_text_file(table_path, bd_rate_table_csv(variants, percent));
  out << "wrote " << table_path << "\n";
}

}  // namespace

VideoBuffer load_input_video(const std::string& spec) {
  if (spec.rfind("synth:", 0) == 0) {
    uint64_t seed = 1;
    int64_t t = 16, h = 64, w = 64;
    const std::string rest = spec.substr(6);
    if (!rest.empty()) {
      for (const auto& part : split(rest, ',')) {
        const auto eq = part.find('=');
        if (eq == std::string::npos)
          throw UsageError("synth spec: expected key=value, got '" + part + "'");
        const std::string key = trimmed(part.substr(0, eq));
        const std::string val = trimmed(part.substr(eq + 1));
        if (key == "seed") {
          const auto x = try_u64(val);
          if (!x) throw UsageError("synth spec: bad seed '" + val + "'");
          seed = *x;
          continue;
        }
        const auto x = try_i64(val);
        if (!x || *x <= 0) throw UsageError("synth spec: bad value '" + val + "' for '" + key + "'");
        if (key == "t") t = *x;
        else if (key == "h") h = *x;
        else if (key == "w") w = *x;
        else throw UsageError("synth spec: unknown key '" + key + "'");
      }
    }
    return synthetic_video(seed, t, h, w);
  }
  if (spec.size() > 4 && spec.compare(spec.size() - 4, 4, ".y4m") == 0) return read_y4m(spec);
  std::error_code ec;
  if (fs::is_directory(spec, ec)) return read_png_dir(spec);
  throw UsageError("input '" + spec +
                   "' is not a .y4m file, a directory of PNG frames, or a synth: spec");
}

FlatConfig parse_flat_config(const std::string& text) {
  FlatConfig fc;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = trimmed(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError(fmt("config line %d: expected key = value", lineno));
    const std::string key = trimmed(line.substr(0, eq));
    const std::string val = trimmed(line.substr(eq + 1));
    if (key.empty() || val.empty())
      throw ConfigError(fmt("config line %d: empty key or value", lineno));
    fc.emplace_back(key, val);
  }
  return fc;
}

void apply_flat_config(const FlatConfig& fc, ModelConfig& mc, CodecConfig& cc, TrainConfig& tc) {
  for (const auto& [key, val] : fc) {
    // model geometry and architecture
    if (key == "t_patch") mc.t_patch = cfg_i64(key, val);
    else if (key == "h_patch") mc.h_patch = cfg_i64(key, val);
    else if (key == "w_patch") mc.w_patch = cfg_i64(key, val);
    else if (key == "grid_t") mc.grid_t = cfg_i64(key, val);
    else if (key == "grid_h") mc.grid_h = cfg_i64(key, val);
    else if (key == "grid_w") mc.grid_w = cfg_i64(key, val);
    else if (key == "grid_c") mc.grid_c = cfg_i64(key, val);
    else if (key == "grid_levels") mc.grid_levels = cfg_i64(key, val);
    else if (key == "grid_scale_t") mc.grid_scale_t = cfg_f64(key, val);
    else if (key == "grid_scale_h") mc.grid_scale_h = cfg_f64(key, val);
    else if (key == "grid_scale_w") mc.grid_scale_w = cfg_f64(key, val);
    else if (key == "grid_scale_c") mc.grid_scale_c = cfg_f64(key, val);
    else if (key == "channels") mc.channels = cfg_i64_list(key, val);
    else if (key == "depths") mc.depths = cfg_i64_list(key, val);
    else if (key == "strides") mc.strides = cfg_i64_list(key, val);
    else if (key == "kernel") mc.kernel = cfg_i64(key, val);
    else if (key == "expansion") mc.expansion = cfg_i64(key, val);
    else if (key == "stem_t") mc.stem_kernel[0] = cfg_i64(key, val);
    else if (key == "stem_h") mc.stem_kernel[1] = cfg_i64(key, val);
    else if (key == "stem_w") mc.stem_kernel[2] = cfg_i64(key, val);
    else if (key == "local_t") mc.local_t = cfg_i64(key, val);
    else if (key == "local_hw") mc.local_hw = cfg_i64(key, val);
    // codec
    else if (key == "grid_em") {
      if (val == "context") cc.grid_em = GridEm::kContext;
      else if (val == "per_tensor") cc.grid_em = GridEm::kPerTensor;
      else throw ConfigError("config key 'grid_em': expected context or per_tensor");
    } else if (key == "layer_em") {
      if (val == "dual") cc.layer_em = LayerEm::kDualAxis;
      else if (val == "per_tensor") cc.layer_em = LayerEm::kPerTensor;
      else throw ConfigError("config key 'layer_em': expected dual or per_tensor");
    } else if (key == "code_level2") cc.code_level2 = cfg_bool(key, val);
    else if (key == "learned_grid_step") cc.learned_grid_step = cfg_bool(key, val);
    else if (key == "psi_full") cc.psi_full = cfg_bool(key, val);
    else if (key == "axis_threshold") cc.axis_threshold = cfg_i64(key, val);
    else if (key == "block_t") cc.grid_block[0] = cfg_i64(key, val);
    else if (key == "block_h") cc.grid_block[1] = cfg_i64(key, val);
    else if (key == "block_w") cc.grid_block[2] = cfg_i64(key, val);
    else if (key == "context_kernel") cc.context.kernel = cfg_i64(key, val);
    else if (key == "context_width") cc.context.width = cfg_i64(key, val);
    else if (key == "context_shared") cc.context.shared_weights = cfg_bool(key, val);
    // training
    else if (key == "lambda") tc.lambda_rd = cfg_f64(key, val);
    else if (key == "rate_period") tc.rate_period = cfg_i64(key, val);
    else if (key == "stage1_steps") tc.stage1_steps = cfg_i64(key, val);
    else if (key == "stage2_steps") tc.stage2_steps = cfg_i64(key, val);
    else if (key == "lr1_start") tc.lr1_start = cfg_f64(key, val);
    else if (key == "lr1_end") tc.lr1_end = cfg_f64(key, val);
    else if (key == "lr2_start") tc.lr2_start = cfg_f64(key, val);
    else if (key == "lr2_end") tc.lr2_end = cfg_f64(key, val);
    else if (key == "clip_norm") tc.clip_norm = cfg_f64(key, val);
    else if (key == "l2_start") tc.l2_start = cfg_f64(key, val);
    else if (key == "temperature_start") tc.temperature_start = cfg_f64(key, val);
    else if (key == "temperature_end") tc.temperature_end = cfg_f64(key, val);
    else if (key == "noise_a_start") tc.noise_a_start = cfg_f64(key, val);
    else if (key == "noise_a_end") tc.noise_a_end = cfg_f64(key, val);
    else if (key == "quant_noise_start") tc.quant_noise_start = cfg_f64(key, val);
    else if (key == "quant_noise_end") tc.quant_noise_end = cfg_f64(key, val);
    else if (key == "patches_per_step") tc.patches_per_step = cfg_i64(key, val);
    else if (key == "seed") tc.seed = cfg_u64(key, val);
    else if (key == "loss") {
      if (val == "rgb") tc.loss = LossMode::kRgb;
      else if (val == "yuv") tc.loss = LossMode::kYuv444;
      else throw ConfigError("config key 'loss': expected rgb or yuv");
    } else if (key == "alternating") tc.alternating = cfg_bool(key, val);
    else if (key == "log_every") tc.log_every = cfg_i64(key, val);
    else if (key == "checkpoint_path") tc.checkpoint_path = val;
    else if (key == "checkpoint_every") tc.checkpoint_every = cfg_i64(key, val);
    else throw ConfigError("unknown config key '" + key + "'");
  }
}

void apply_ablation(CodecConfig& cc, const std::string& name) {
  if (name == "default" || name.empty()) return;
  if (name == "v1") cc.layer_em = LayerEm::kPerTensor;
  else if (name == "v2") cc.grid_em = GridEm::kPerTensor;
  else if (name == "v3") {
    cc.layer_em = LayerEm::kPerTensor;
    cc.grid_em = GridEm::kPerTensor;
  } else if (name == "v4") cc.code_level2 = false;
  else if (name == "v5") cc.learned_grid_step = false;
  else throw UsageError("unknown ablation '" + name + "' (expected v1..v5 or default)");
}

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"neural video codec: overfit a compact model per clip and code its parameters",
               args.empty() ? "nvrc" : fs::path(args[0]).filename().string()};
  app.require_subcommand(1);

  EncodeArgs e;
  auto* enc = app.add_subcommand("encode", "fit a video and write a coded stream");
  enc->add_option("input", e.input, "source: .y4m, PNG directory, or synth:k=v,... spec")
      ->required();
  enc->add_option("--out", e.out_path, "output stream path")->required();
  enc->add_option("--config", e.config, "flat key=value config file");
  enc->add_option("--lambda", e.lambda, "rate-distortion weight");
  enc->add_option("--seed", e.seed, "training seed");
  enc->add_option("--loss", e.loss, "distortion domain")->check(CLI::IsMember({"rgb", "yuv"}));
  enc->add_option("--ablate", e.ablate, "entropy-model ablation")
      ->check(CLI::IsMember({"v1", "v2", "v3", "v4", "v5"}));
  enc->add_flag("--quiet", e.quiet, "suppress per-step training log lines");

  std::string dec_stream, dec_out;
  auto* dec = app.add_subcommand("decode", "decode a stream to frames");
  dec->add_option("stream", dec_stream, "coded stream path")->required();
  dec->add_option("--out", dec_out, "output: *.y4m file or a PNG directory")->required();

  std::string eval_test, eval_ref;
  auto* ev = app.add_subcommand("eval", "per-frame PSNR and MS-SSIM against a reference");
  ev->add_option("decoded", eval_test, "video under test")->required();
  ev->add_option("reference", eval_ref, "reference video")->required();

  SweepArgs sw;
  auto* sweep = app.add_subcommand("sweep", "rate points per ablation variant, with BD-rate table");
  sweep->add_option("input", sw.input, "source video")->required();
  sweep->add_option("--out", sw.out_dir, "output directory")->required();
  sweep->add_option("--config", sw.config, "flat key=value config file");
  sweep->add_option("--lambdas", sw.lambdas, "comma-separated rate-distortion weights");
  sweep->add_option("--variants", sw.variants, "comma-separated variant names");
  sweep->add_option("--seed", sw.seed, "training seed");
  sweep->add_option("--loss", sw.loss, "distortion domain")->check(CLI::IsMember({"rgb", "yuv"}));

  std::string rep_stream;
  auto* rep = app.add_subcommand("report", "per-category rate breakdown of a stream");
  rep->add_option("stream", rep_stream, "coded stream path")->required();

  try {
    std::vector<const char*> argv;
    argv.reserve(args.size());
    for (const auto& a : args) argv.push_back(a.c_str());
    app.parse(static_cast<int>(argv.size()), argv.data());
    if (enc->parsed()) cmd_encode(e, out);
    else if (dec->parsed()) cmd_decode(dec_stream, dec_out, out);
    else if (ev->parsed()) cmd_eval(eval_test, eval_ref, out);
    else if (sweep->parsed()) cmd_sweep(sw, out);
    else if (rep->parsed()) cmd_report(rep_stream, out);
    return 0;
  } catch (const CLI::ParseError& pe) {
    const int rc = app.exit(pe, out, err);
    return rc == 0 ? 0 : 2;
  } catch (const VersionError& ex) {
    err << "error: " << ex.what() << "\n";
    return 4;
  } catch (const DecodeError& ex) {
    err << "error: " << ex.what() << "\n";
    return 4;
  } catch (const ConfigError& ex) {
    err << "error: " << ex.what() << "\n";
    return 3;
  } catch (const UsageError& ex) {
    err << "error: " << ex.what() << "\n";
    return 2;
  } catch (const std::exception& ex) {
    err << "error: " << ex.what() << "\n";
    return 1;
  }
}

}  // namespace nvrc
