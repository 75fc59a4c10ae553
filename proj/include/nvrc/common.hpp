#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace nvrc {

// Configuration problems: bad shapes, invalid config files, nonpositive scales.
class ConfigError : public std::runtime_error {
 public:
  explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

// API misuse: out-of-range coordinates, non-scalar loss, geometry mismatch.
class UsageError : public std::runtime_error {
 public:
  explicit UsageError(const std::string& msg) : std::runtime_error(msg) {}
};

// Malformed or corrupt bitstreams and input files.
class DecodeError : public std::runtime_error {
 public:
  explicit DecodeError(const std::string& msg) : std::runtime_error(msg) {}
};

class NumericError : public std::runtime_error {
 public:
  explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

// Version mismatch gets its own type so the CLI can map it to a distinct exit code.
class VersionError : public DecodeError {
 public:
  explicit VersionError(const std::string& msg) : DecodeError(msg) {}
};

int64_t shape_numel(const std::vector<int64_t>& shape);
std::string shape_to_string(const std::vector<int64_t>& shape);
std::vector<int64_t> shape_strides(const std::vector<int64_t>& shape);

// Worker cap: min(hardware threads, NVRC_THREADS if set). Always >= 1.
int worker_threads();

// Runs fn(i) for i in [0, n). Splits across worker_threads() when n is large
// enough to bother; fn must only write state owned by index i.
void parallel_for(int64_t n, const std::function<void(int64_t)>& fn);

// CRC-32 (IEEE, reflected, poly 0xEDB88320), as used for section checksums.
uint32_t crc32(std::span<const uint8_t> data, uint32_t seed = 0);

// Unsigned LEB128.
void put_varint(std::vector<uint8_t>& out, uint64_t v);
uint64_t get_varint(std::span<const uint8_t> data, size_t& pos);

// Round half away from zero; the fixed rounding rule shared by the
// quantizers, the coder and the trainer.
inline double round_away(double x) {
  return x < 0.0 ? -std::floor(-x + 0.5) : std::floor(x + 0.5);
}

}  // namespace nvrc
