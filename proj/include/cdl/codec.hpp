#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace cdl::codec {

// ---------------------------------------------------------------------------
// Bit stream, MSB-first within each byte.
// ---------------------------------------------------------------------------

class BitWriter {
 public:
  void put_bits(std::uint64_t code, int nbits);
  std::uint64_t bit_count() const { return bits_; }
  const std::vector<std::uint8_t>& bytes() const { return buf_; }

 private:
  std::vector<std::uint8_t> buf_;
  std::uint64_t bits_ = 0;
};

class BitReader {
 public:
  BitReader(std::span<const std::uint8_t> bytes, std::uint64_t bit_count)
      : buf_(bytes), bits_(bit_count) {}
  // Single bit; throws std::runtime_error past the end (truncated payload).
  int get_bit();
  std::uint64_t remaining() const { return bits_ - pos_; }

 private:
  std::span<const std::uint8_t> buf_;
  std::uint64_t bits_ = 0;
  std::uint64_t pos_ = 0;
};

// ---------------------------------------------------------------------------
// Canonical Huffman codebook over integer symbols (quantization grid indices).
// Deterministic end to end: ties during tree construction are broken toward
// the earlier-sorted entry (lower symbol index at equal frequency) and the
// canonical reassignment orders by (length, symbol).
// ---------------------------------------------------------------------------

struct CodeEntry {
  std::int32_t symbol = 0;
  std::uint8_t length = 0;
  std::uint64_t code = 0;  // reconstructed canonically; not serialized
};

struct Codebook {
  std::vector<CodeEntry> entries;  // sorted by (length, symbol)
  std::vector<std::int64_t> histogram_symbols;  // source histogram, aligned with entries
  bool degenerate = false;  // single-symbol stream, 1 bit per symbol by convention

  double kraft_sum() const;     // Sum 2^-len (counts the unused sibling when degenerate)
  double avg_code_length(std::span<const std::int32_t> symbols) const;
  std::uint64_t serialized_bytes() const;  // codebook side-information size
};

// Canonical Huffman code from the empirical histogram of `symbols`.
// Throws std::invalid_argument on an empty stream.
Codebook build_codebook(std::span<const std::int32_t> symbols);

// Payload length in bits equals the sum of per-symbol code lengths.
// encode throws on a symbol absent from the codebook; decode throws on a
// truncated or malformed payload.
struct Payload {
  std::vector<std::uint8_t> bytes;
  std::uint64_t bit_count = 0;
};
Payload encode_layer(std::span<const std::int32_t> symbols, const Codebook& cb);
std::vector<std::int32_t> decode_layer(std::span<const std::uint8_t> bytes,
                                       std::uint64_t bit_count, const Codebook& cb,
                                       std::int64_t count);

// ---------------------------------------------------------------------------
// Compressed model container (layout documented in docs/formats.md).
// ---------------------------------------------------------------------------

struct CompressedLayer {
  std::string name;
  double step = 1.0;
  std::uint8_t bits = 6;
  bool is_signed = true;
  std::int64_t symbol_count = 0;
  Codebook codebook;
  Payload payload;
};

struct CompressedModel {
  std::uint16_t version = 1;
  std::uint8_t bits = 6;  // nominal training bit width
  std::vector<CompressedLayer> layers;

  // Payload-only average, Eq.-style weighted mean over layers; side
  // information is reported separately.
  double avg_bits_per_symbol() const;
  std::uint64_t total_payload_bytes() const;
  std::uint64_t total_overhead_bytes() const;
};

void save_compressed(const CompressedModel& cm, const std::string& path);
CompressedModel load_compressed(const std::string& path);  // verifies the checksum

// Huffman-coded size of a symbol stream without materializing the payload
// (histogram x code lengths); used by the parallelism byte accounting.
struct CodedSize {
  std::uint64_t payload_bits = 0;
  std::uint64_t overhead_bytes = 0;
};
CodedSize coded_size(std::span<const std::int32_t> symbols);

std::uint32_t crc32(std::span<const std::uint8_t> data, std::uint32_t seed = 0);

}  // namespace cdl::codec
