#include <cmath>
#include <string>
#include <vector>

#include "doctest.h"
#include "nvrc/common.hpp"
#include "nvrc/gradcheck.hpp"
#include "nvrc/model.hpp"

using namespace nvrc;

namespace {

// Small enough for finite-difference checks.
ModelConfig micro_config() {
  ModelConfig cfg;
  cfg.video_t = 2;
  cfg.video_h = 8;
  cfg.video_w = 8;
  cfg.t_patch = 1;
  cfg.h_patch = 8;
  cfg.w_patch = 8;
  cfg.c_patch = 3;
  cfg.grid_t = 2;
  cfg.grid_h = 4;
  cfg.grid_w = 4;
  cfg.grid_c = 2;
  cfg.grid_levels = 2;
  cfg.channels = {6};
  cfg.depths = {1};
  cfg.strides = {2};
  cfg.kernel = 3;
  cfg.expansion = 2;
  cfg.stem_kernel = {1, 3, 3};
  cfg.local_t = 2;
  cfg.local_hw = 2;
  return cfg;
}

template <typename S>
bool same_values(const Tensor<S>& a, const Tensor<S>& b) {
  return a.shape() == b.shape() && a.values() == b.values();
}

}  // namespace

TEST_CASE("config validation rejects inconsistent geometry") {
  ModelConfig cfg = micro_config();
  validate_config(cfg);  // baseline passes

  ModelConfig bad = cfg;
  bad.strides = {3};
  CHECK_THROWS_AS(validate_config(bad), ConfigError);

  bad = cfg;
  bad.h_patch = 7;  // does not tile video_h = 8
  CHECK_THROWS_AS(validate_config(bad), ConfigError);

  bad = cfg;
  bad.channels = {};
  bad.depths = {};
  bad.strides = {};
  CHECK_THROWS_AS(validate_config(bad), ConfigError);

  bad = cfg;
  bad.channels = {6, 6};  // stage count mismatch
  CHECK_THROWS_AS(validate_config(bad), ConfigError);

  bad = cfg;
  bad.kernel = 4;
  CHECK_THROWS_AS(validate_config(bad), ConfigError);

  bad = cfg;
  bad.grid_levels = 0;
  CHECK_THROWS_AS(validate_config(bad), ConfigError);

  bad = cfg;
  bad.h_patch = 4;
  bad.w_patch = 4;
  bad.strides = {2};
  bad.channels = {6};
  bad.depths = {1};
  // 4 / 2 = 2 is fine; 4 with strides {2,2,2} is not
  bad.strides = {2, 2, 2};
  bad.channels = {6, 6, 6};
  bad.depths = {1, 1, 1};
  CHECK_THROWS_AS(validate_config(bad), ConfigError);
}

TEST_CASE("grid level extents follow the configured ratios") {
  const ModelConfig cfg = tiny_model_config(16, 64, 64);
  const auto l0 = grid_level_extents(cfg, 0);
  CHECK(l0 == std::array<int64_t, 4>{4, 16, 8, 8});
  const auto l1 = grid_level_extents(cfg, 1);
  CHECK(l1 == std::array<int64_t, 4>{8, 8, 4, 4});
  const auto l2 = grid_level_extents(cfg, 2);
  CHECK(l2 == std::array<int64_t, 4>{16, 4, 2, 2});
  // Extents floor at one instead of vanishing.
  const auto l5 = grid_level_extents(cfg, 5);
  CHECK(l5[1] >= 1);
  CHECK(l5[2] >= 1);
  CHECK(l5[3] >= 1);
}

TEST_CASE("stride product ties patch extents to stem output extents") {
  const ModelConfig cfg = tiny_model_config(16, 64, 64);
  const auto base = stem_output_extents(cfg);
  int64_t prod = 1;
  for (int64_t s : cfg.strides) prod *= s;
  CHECK(base[0] * prod == cfg.h_patch);
  CHECK(base[1] * prod == cfg.w_patch);
}

TEST_CASE("initialization is deterministic in the seed") {
  const ModelConfig cfg = micro_config();
  const auto a = init_model<double>(cfg, 42);
  const auto b = init_model<double>(cfg, 42);
  const auto c = init_model<double>(cfg, 43);
  REQUIRE(a.grids.size() == b.grids.size());
  for (size_t l = 0; l < a.grids.size(); ++l) CHECK(same_values(a.grids[l], b.grids[l]));
  REQUIRE(a.layers.size() == b.layers.size());
  bool any_diff = false;
  for (size_t i = 0; i < a.layers.size(); ++i) {
    CHECK(a.layers[i].first == b.layers[i].first);
    CHECK(same_values(a.layers[i].second, b.layers[i].second));
    if (a.layers[i].second.values() != c.layers[i].second.values()) any_diff = true;
  }
  CHECK(any_diff);
}

TEST_CASE("parameter census sums element counts over every tensor") {
  const auto rep = init_model<float>(micro_config(), 7);
  int64_t manual = 0;
  for (const auto& g : rep.grids) manual += g.numel();
  for (const auto& [name, t] : rep.layers) manual += t.numel();
  CHECK(param_count(rep) == manual);
  CHECK(manual > 0);
}

TEST_CASE("forward is deterministic and returns the patch layout") {
  const auto rep = init_model<float>(micro_config(), 11);
  const auto a = forward(rep, {0, 0, 1}, OutputMode::kEval);
  const auto b = forward(rep, {0, 0, 1}, OutputMode::kEval);
  CHECK(a.shape() == std::vector<int64_t>({1, 8, 8, 3}));
  CHECK(same_values(a, b));
  for (float v : a.values()) {
    CHECK(v >= 0.0f);
    CHECK(v <= 1.0f);
  }
}

TEST_CASE("coordinates outside the patch lattice are usage errors") {
  const auto rep = init_model<float>(micro_config(), 11);
  CHECK_THROWS_AS(forward(rep, {1, 0, 0}, OutputMode::kEval), UsageError);
  CHECK_THROWS_AS(forward(rep, {0, -1, 0}, OutputMode::kEval), UsageError);
  CHECK_THROWS_AS(forward(rep, {0, 0, 2}, OutputMode::kEval), UsageError);
}

TEST_CASE("zeroed parameters reduce the model to its output bias") {
  const auto rep = init_model<double>(micro_config(), 3);
  const std::vector<double> bias = {0.25, 1.7, -0.3};
  const auto zeroed = map_parameters(rep, [&](const std::string& name, bool,
                                              const Tensor<double>& t) {
    if (name == "head.b") return Tensor<double>(t.shape(), bias);
    return Tensor<double>(t.shape(), 0.0);
  });
  const auto eval = forward(zeroed, {0, 0, 0}, OutputMode::kEval);
  const auto train = forward(zeroed, {0, 0, 0}, OutputMode::kTrain);
  for (int64_t p = 0; p < 64; ++p) {
    CHECK(eval.values()[p * 3 + 0] == 0.25);  // clamped copies of the bias
    CHECK(eval.values()[p * 3 + 1] == 1.0);
    CHECK(eval.values()[p * 3 + 2] == 0.0);
    CHECK(train.values()[p * 3 + 0] == doctest::Approx(0.25));
    CHECK(train.values()[p * 3 + 1] == doctest::Approx(1.7));
    CHECK(train.values()[p * 3 + 2] == doctest::Approx(-0.3));
  }
}

TEST_CASE("rendering tiles patches with no gaps or overlap") {
  ModelConfig cfg = micro_config();
  cfg.video_t = 2;
  cfg.video_h = 16;
  cfg.video_w = 16;
  cfg.h_patch = 8;
  cfg.w_patch = 8;
  const auto rep = init_model<float>(cfg, 19);
  const auto video = render_video(rep);
  CHECK(video.shape() == std::vector<int64_t>({2, 16, 16, 3}));
  const auto vst = shape_strides(video.shape());
  for (int64_t k = 0; k < 2; ++k) {
    for (int64_t j = 0; j < 2; ++j) {
      for (int64_t i = 0; i < 2; ++i) {
        const auto patch = forward(rep, {i, j, k}, OutputMode::kEval);
        int64_t idx = 0;
        for (int64_t t = 0; t < cfg.t_patch; ++t) {
          for (int64_t h = 0; h < cfg.h_patch; ++h) {
            for (int64_t w = 0; w < cfg.w_patch; ++w) {
              for (int64_t c = 0; c < 3; ++c, ++idx) {
                const int64_t o = (k * cfg.t_patch + t) * vst[0] + (j * cfg.h_patch + h) * vst[1] +
                                  (i * cfg.w_patch + w) * vst[2] + c;
                CHECK(video.values()[o] == patch.values()[idx]);
              }
            }
          }
        }
      }
    }
  }
}

TEST_CASE("layer parameters view as output rows by flattened input columns") {
  Tensor<double> conv({8, 4, 3, 3}, 0.5);
  const auto flat = reshape_layer_param(conv);
  CHECK(flat.shape() == std::vector<int64_t>({8, 36}));
  const auto back = reshape(flat, {8, 4, 3, 3});
  CHECK(back.values() == conv.values());

  Tensor<double> bias_t({8}, 0.25);
  const auto col = reshape_layer_param(bias_t);
  CHECK(col.shape() == std::vector<int64_t>({8, 1}));
  CHECK(reshape(col, {8}).values() == bias_t.values());
}

TEST_CASE("forward gradients reach grids and layer weights") {
  const ModelConfig cfg = micro_config();
  const auto rep = init_model<double>(cfg, 23);
  const std::vector<std::string> targets = {"grid0", "stem0.w", "stage0.block0.pw1.w",
                                            "head.b"};
  std::vector<Tensor<double>> inputs;
  for (const auto& name : targets) {
    if (name == "grid0") {
      inputs.push_back(rep.grids[0]);
    } else {
      for (const auto& [n, t] : rep.layers) {
        if (n == name) inputs.push_back(t);
      }
    }
  }
  REQUIRE(inputs.size() == targets.size());

  auto f = [&](std::vector<Tensor<double>>& in) {
    const auto swapped = map_parameters(rep, [&](const std::string& name, bool,
                                                 const Tensor<double>& t) {
      for (size_t x = 0; x < targets.size(); ++x) {
        if (name == targets[x]) return in[x];
      }
      return t;
    });
    return mean_all(forward(swapped, {0, 0, 0}, OutputMode::kTrain));
  };
  const auto rep_check = gradcheck(f, inputs, 1e-5);
  CHECK(rep_check.checked > 0);
  CHECK(rep_check.max_rel_err < 2e-5);
}
