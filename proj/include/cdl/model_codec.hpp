#pragma once

#include <cstdint>

#include "cdl/codec.hpp"
#include "cdl/dataset.hpp"
#include "cdl/net.hpp"

namespace cdl::codec {

// Quantizes every weight layer with Q_p (seeded draw) and Huffman-codes the
// symbol streams. The same procedure applies to models trained in either
// mode: the checkpoint holds full-precision masters, the compressed artifact
// holds exact grid symbols.
CompressedModel compress_weights(const net::Model& model, std::uint64_t sample_seed);

// Average-bits metrics: payload bits weighted by layer sizes.
struct AvgBits {
  double per_weight = 0.0;
  double per_activation = 0.0;
  std::uint64_t weight_overhead_bytes = 0;
  std::uint64_t activation_overhead_bytes = 0;
};

// Activations measured on one mini-batch [first, first+count) of `ds` via a
// sampled-quantizer inference pass.
AvgBits avg_bits_metrics(const net::Model& model, const data::Dataset& ds,
                         std::int64_t first, int count, std::uint64_t seed);

double avg_bits_per_weight(const CompressedModel& cm);

// Per-layer sampled weight symbols (shared by compression, metrics, and the
// parallelism ledger).
std::vector<std::vector<std::int32_t>> sample_weight_symbols(const net::Model& model,
                                                             std::uint64_t seed);

}  // namespace cdl::codec
