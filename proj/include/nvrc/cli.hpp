// Command-line front end: encode / decode / eval / sweep / report. The whole
// driver is a library function over explicit streams so tests can run it
// in-process and assert on output and exit codes.
#pragma once

#include <iosfwd>
#include <string>
#include <utility>
#include <vector>

#include "nvrc/hierarchy.hpp"
#include "nvrc/model.hpp"
#include "nvrc/trainer.hpp"
#include "nvrc/video.hpp"

namespace nvrc {

// Loads a video from one of the accepted input forms:
//   *.y4m            uncompressed YUV4MPEG2, 4:4:4 only
//   <directory>      8-bit PNG frames in lexicographic order
//   synth:k=v,...    built-in generator; keys seed, t, h, w (all optional)
// Throws UsageError on anything else.
VideoBuffer load_input_video(const std::string& spec);

// Flat key=value config text: one entry per line, '#' comments, blank lines
// ignored. Later entries override earlier ones. Throws ConfigError on a
// malformed line.
using FlatConfig = std::vector<std::pair<std::string, std::string>>;
FlatConfig parse_flat_config(const std::string& text);

// Applies entries onto the three config structs. Keys mirror the struct
// fields; list-valued keys (channels, depths, strides) take comma-separated
// integers. Video geometry always comes from the input, so video_* keys are
// rejected. Throws ConfigError on an unknown key or unparseable value.
void apply_flat_config(const FlatConfig& fc, ModelConfig& mc, CodecConfig& cc,
                       TrainConfig& tc);

// Ablation flags: v1 per-tensor layer EM, v2 per-tensor grid EM, v3 both,
// v4 side params stored raw (no level-2 coding), v5 fixed grid step.
// Accepts "default" as a no-op. Throws UsageError on anything else.
void apply_ablation(CodecConfig& cc, const std::string& name);

// Full driver. args[0] is the program name. Returns the process exit code:
// 0 success, 1 internal error, 2 usage (bad flags, unreadable input,
// geometry mismatch), 3 invalid config, 4 corrupt or wrong-version stream.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace nvrc
