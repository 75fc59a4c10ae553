#include "nvrc/coder.hpp"

#include <algorithm>
#include <cassert>
#include <cmath>
#include <queue>
#include <string>
#include <utility>

#include "nvrc/common.hpp"

namespace nvrc {

namespace {
constexpr uint32_t kRenormBound = 1u << 24;

CdfTable quantize_pmf(int32_t offset, const std::vector<double>& pmf) {
  const int64_t n = static_cast<int64_t>(pmf.size());
  if (n < 1 || n > static_cast<int64_t>(kCdfTotal)) {
    throw ConfigError("cdf table needs 1..65536 symbols, got " + std::to_string(n));
  }
  double total = 0.0;
  for (double p : pmf) {
    if (!(p >= 0.0)) throw ConfigError("pmf entries must be nonnegative");
    total += p;
  }
  if (!(total > 0.0)) throw ConfigError("pmf must have positive mass");

  // Round the scaled cumulative; rounding a nondecreasing sequence keeps it
  // nondecreasing, so only zero-width intervals need repair.
  std::vector<uint32_t> cum(n + 1, 0);
  double acc = 0.0;
  for (int64_t k = 0; k < n; ++k) {
    acc += pmf[k];
    const double scaled = acc / total * static_cast<double>(kCdfTotal);
    const double r = round_away(scaled);
    cum[k + 1] = static_cast<uint32_t>(std::min(r, static_cast<double>(kCdfTotal)));
  }
  cum[n] = kCdfTotal;

  std::vector<uint32_t> widths(n);
  for (int64_t k = 0; k < n; ++k) widths[k] = cum[k + 1] - cum[k];
  // Give every zero-width interval one unit taken from the lowest-indexed
  // widest one. A lazy max-heap keeps the repair near-linear even when a wide
  // support rounds most of its tail to zero; stale entries are skipped.
  std::priority_queue<std::pair<uint32_t, int64_t>> heap;
  bool heap_ready = false;
  for (int64_t k = 0; k < n; ++k) {
    if (widths[k] != 0) continue;
    if (!heap_ready) {
      for (int64_t j = 0; j < n; ++j)
        if (widths[j] >= 2) heap.emplace(widths[j], -j);
      heap_ready = true;
    }
    while (!heap.empty() &&
           heap.top().first != widths[static_cast<size_t>(-heap.top().second)])
      heap.pop();
    assert(!heap.empty() && heap.top().first >= 2);
    const int64_t big = -heap.top().second;
    heap.pop();
    widths[big] -= 1;
    widths[k] += 1;
    if (widths[big] >= 2) heap.emplace(widths[big], -big);
  }

  CdfTable t;
  t.offset = offset;
  t.cum.resize(n + 1);
  t.cum[0] = 0;
  for (int64_t k = 0; k < n; ++k) t.cum[k + 1] = t.cum[k] + widths[k];
  assert(t.cum[n] == kCdfTotal);
  return t;
}
}  // namespace

CdfTable build_cdf_table(double mu_s, double sigma_s) {
  const SymbolRange r = symbol_support(mu_s, sigma_s);
  const int64_t n = static_cast<int64_t>(r.hi) - r.lo + 1;
  std::vector<double> pmf(n);
  for (int64_t k = 0; k < n; ++k) pmf[k] = discretized_pmf(r.lo + k, mu_s, sigma_s, r);
  return quantize_pmf(r.lo, pmf);
}

CdfTable build_cdf_table_from_pmf(int32_t offset, const std::vector<double>& pmf) {
  return quantize_pmf(offset, pmf);
}

void RangeEncoder::propagate_carry() {
  // The interval top never exceeds the initial (2^32 - 1) / 2^32 of the unit
  // line, so a carry always lands inside the emitted prefix.
  assert(!buf_.empty());
  for (size_t i = buf_.size(); i-- > 0;) {
    if (++buf_[i] != 0) return;
  }
  assert(false && "carry escaped the emitted prefix");
}

void RangeEncoder::encode(const CdfTable& table, int32_t symbol) {
  assert(!finished_);
  if (!table.contains(symbol)) {
    throw NumericError("symbol " + std::to_string(symbol) + " outside coded range [" +
                       std::to_string(table.offset) + ", " +
                       std::to_string(table.offset + table.size()) + ")");
  }
  const int64_t idx = symbol - table.offset;
  const uint32_t lo = table.cum[idx];
  const uint32_t hi = table.cum[idx + 1];

  const uint32_t r = range_ / kCdfTotal;
  const uint64_t next = static_cast<uint64_t>(low_) + static_cast<uint64_t>(r) * lo;
  if (next >> 32) propagate_carry();
  low_ = static_cast<uint32_t>(next);
  // The last interval absorbs the division remainder so the full range stays
  // covered; the decoder clamps its offset the same way.
  range_ = (hi == kCdfTotal) ? range_ - r * lo : r * (hi - lo);

  while (range_ < kRenormBound) {
    buf_.push_back(static_cast<uint8_t>(low_ >> 24));
    low_ <<= 8;
    range_ <<= 8;
  }
  ++count_;
}

CodedSegment RangeEncoder::finish() {
  assert(!finished_);
  finished_ = true;
  // Pick the value in [low, low + range) with the most trailing zero bytes;
  // the decoder zero-pads reads past the payload, so those bytes are free.
  const uint64_t top = static_cast<uint64_t>(low_) + range_;
  for (int s = 32; s >= 0; s -= 8) {
    const uint64_t step = 1ull << s;
    const uint64_t v = (static_cast<uint64_t>(low_) + step - 1) & ~(step - 1);
    if (v >= top) continue;
    if (v >> 32) propagate_carry();
    for (int b = 24; b >= s; b -= 8) buf_.push_back(static_cast<uint8_t>(v >> b));
    break;
  }
  CodedSegment seg;
  seg.payload = std::move(buf_);
  seg.symbol_count = count_;
  seg.declared_bytes = seg.payload.size();
  return seg;
}

RangeDecoder::RangeDecoder(const CodedSegment& segment) : seg_(segment) {
  if (seg_.payload.size() < seg_.declared_bytes) {
    throw DecodeError("coded segment truncated at byte " +
                      std::to_string(seg_.payload.size()) + " of " +
                      std::to_string(seg_.declared_bytes));
  }
  for (int i = 0; i < 4; ++i) code_ = (code_ << 8) | next_byte();
}

uint8_t RangeDecoder::next_byte() {
  const uint64_t i = pos_++;
  return i < seg_.payload.size() ? seg_.payload[i] : 0;
}

int32_t RangeDecoder::decode(const CdfTable& table) {
  const uint32_t r = range_ / kCdfTotal;
  uint32_t f = code_ / r;
  if (f >= kCdfTotal) f = kCdfTotal - 1;

  // Largest index with cum[index] <= f.
  const auto it = std::upper_bound(table.cum.begin(), table.cum.end(), f);
  const int64_t idx = static_cast<int64_t>(it - table.cum.begin()) - 1;
  const uint32_t lo = table.cum[idx];
  const uint32_t hi = table.cum[idx + 1];

  code_ -= r * lo;
  range_ = (hi == kCdfTotal) ? range_ - r * lo : r * (hi - lo);
  while (range_ < kRenormBound) {
    code_ = (code_ << 8) | next_byte();
    range_ <<= 8;
  }
  ++read_;
  return table.offset + static_cast<int32_t>(idx);
}

CodedSegment encode_symbols(const std::vector<int32_t>& symbols,
                            const std::vector<CdfTable>& tables) {
  if (tables.size() != 1 && tables.size() != symbols.size()) {
    throw ConfigError("need one table per symbol or a single shared table");
  }
  RangeEncoder enc;
  for (size_t i = 0; i < symbols.size(); ++i) {
    enc.encode(tables.size() == 1 ? tables[0] : tables[i], symbols[i]);
  }
  return enc.finish();
}

std::vector<int32_t> decode_symbols(const CodedSegment& segment,
                                    const std::vector<CdfTable>& tables) {
  if (tables.size() != 1 && tables.size() != segment.symbol_count) {
    throw ConfigError("need one table per symbol or a single shared table");
  }
  RangeDecoder dec(segment);
  std::vector<int32_t> out(segment.symbol_count);
  for (size_t i = 0; i < out.size(); ++i) {
    out[i] = dec.decode(tables.size() == 1 ? tables[0] : tables[i]);
  }
  return out;
}

}  // namespace nvrc
