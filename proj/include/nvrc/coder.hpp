// Bit-exact range coding over integer symbols with quantized Gaussian CDFs.
//
// The coder is integer-only: 32-bit low/range with carry propagation into
// already-emitted bytes and byte-wise renormalization at 2^24. Tables hold
// cumulative frequencies summing to exactly 2^16; every in-range symbol gets
// frequency >= 1 so it stays codable. Table construction routes through
// det_normal_cdf, so encoder and decoder rebuild identical tables on any
// platform.
#pragma once

#include <cstdint>
#include <vector>

#include "nvrc/entropy.hpp"

namespace nvrc {

inline constexpr uint32_t kCdfTotal = 1u << 16;

// Quantized CDF over the contiguous symbol range [offset, offset + size).
// cum has size() + 1 entries, cum.front() == 0, cum.back() == kCdfTotal,
// strictly increasing.
struct CdfTable {
  int32_t offset = 0;
  std::vector<uint32_t> cum;

  int64_t size() const { return static_cast<int64_t>(cum.size()) - 1; }
  bool contains(int32_t symbol) const {
    return symbol >= offset && symbol < offset + size();
  }
  uint32_t width(int64_t index) const { return cum[index + 1] - cum[index]; }
};

// Builds the table for a Gaussian in symbol units. Probabilities come from
// discretized_pmf over symbol_support(mu_s, sigma_s); the scaled CDF is
// rounded half away from zero, then zero-width intervals are repaired in
// ascending symbol order by stealing one count from the currently largest
// interval (lowest symbol on ties). The support never exceeds 2^16 symbols,
// so the repair always succeeds.
CdfTable build_cdf_table(double mu_s, double sigma_s);

// Quantizes an explicit pmf over [offset, offset + pmf.size()) with the same
// rounding and repair rules. pmf entries must be nonnegative with a positive
// sum.
CdfTable build_cdf_table_from_pmf(int32_t offset, const std::vector<double>& pmf);

struct CodedSegment {
  std::vector<uint8_t> payload;
  uint64_t symbol_count = 0;
  uint64_t declared_bytes = 0;
};

class RangeEncoder {
 public:
  // Symbols outside the table's range are a caller bug; upstream quantization
  // clamps into the coded support before reaching here.
  void encode(const CdfTable& table, int32_t symbol);
  CodedSegment finish();

 private:
  void propagate_carry();

  std::vector<uint8_t> buf_;
  uint32_t low_ = 0;
  uint32_t range_ = 0xFFFFFFFFu;
  uint64_t count_ = 0;
  bool finished_ = false;
};

class RangeDecoder {
 public:
  explicit RangeDecoder(const CodedSegment& segment);
  int32_t decode(const CdfTable& table);
  uint64_t symbols_read() const { return read_; }

 private:
  uint8_t next_byte();

  const CodedSegment& seg_;
  uint64_t pos_ = 0;
  uint32_t code_ = 0;
  uint32_t range_ = 0xFFFFFFFFu;
  uint64_t read_ = 0;
};

// Batch helpers: one table per symbol (tables.size() == 1 broadcasts).
CodedSegment encode_symbols(const std::vector<int32_t>& symbols,
                            const std::vector<CdfTable>& tables);
std::vector<int32_t> decode_symbols(const CodedSegment& segment,
                                    const std::vector<CdfTable>& tables);

}  // namespace nvrc
