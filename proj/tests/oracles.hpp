#pragma once

// Test-only reference implementations, kept independent of the library's
// computation paths: extended-precision CPMF/moment evaluation by direct
// summation, and a plain O(n^2) Huffman for cross-checking total code length.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <span>
#include <vector>

#include "cdl/quant.hpp"

namespace oracle {

struct Pmf {
  std::vector<long double> probs;  // dense, index 0 = grid.min_index()
  cdl::quant::QuantGrid grid;
};

inline Pmf cpmf(double theta, const cdl::quant::QuantGrid& g, double sharpness) {
  Pmf p;
  p.grid = g;
  p.probs.resize(static_cast<std::size_t>(g.size()));
  long double z = 0.0L;
  for (int i = 0; i < g.size(); ++i) {
    const long double d = static_cast<long double>(theta) - g.level(g.min_index() + i);
    p.probs[static_cast<std::size_t>(i)] = expl(-static_cast<long double>(sharpness) * d * d);
    z += p.probs[static_cast<std::size_t>(i)];
  }
  for (auto& v : p.probs) v /= z;
  return p;
}

inline long double mean(const Pmf& p) {
  long double m = 0.0L;
  for (int i = 0; i < p.grid.size(); ++i)
    m += p.probs[static_cast<std::size_t>(i)] * p.grid.level(p.grid.min_index() + i);
  return m;
}

inline long double variance(const Pmf& p) {
  const long double m = mean(p);
  long double v = 0.0L;
  for (int i = 0; i < p.grid.size(); ++i) {
    const long double d = p.grid.level(p.grid.min_index() + i) - m;
    v += p.probs[static_cast<std::size_t>(i)] * d * d;
  }
  return v;
}

inline long double expected_distortion(double theta, const Pmf& p) {
  long double v = 0.0L;
  for (int i = 0; i < p.grid.size(); ++i) {
    const long double d = static_cast<long double>(theta) - p.grid.level(p.grid.min_index() + i);
    v += p.probs[static_cast<std::size_t>(i)] * d * d;
  }
  return v;
}

inline long double entropy_bits(std::span<const long double> probs) {
  long double h = 0.0L;
  for (long double p : probs)
    if (p > 0.0L) h -= p * logl(p);
  return h / logl(2.0L);
}

// nearest-level hard quantizer, clamped to the grid
inline double hard_quantize(double theta, const cdl::quant::QuantGrid& g) {
  return g.level(g.nearest_index(theta));
}

// Plain Huffman total length via repeated pairwise merges (no canonicalization,
// no tie discipline); all optimal codes share the same total length.
inline std::uint64_t huffman_total_bits(const std::map<std::int32_t, std::int64_t>& hist) {
  std::vector<std::int64_t> heap;
  for (const auto& [sym, f] : hist) heap.push_back(f);
  if (heap.size() == 1) return static_cast<std::uint64_t>(heap[0]);  // 1 bit per symbol
  std::uint64_t total = 0;
  std::make_heap(heap.begin(), heap.end(), std::greater<>());
  while (heap.size() > 1) {
    std::pop_heap(heap.begin(), heap.end(), std::greater<>());
    const std::int64_t a = heap.back();
    heap.pop_back();
    std::pop_heap(heap.begin(), heap.end(), std::greater<>());
    const std::int64_t b = heap.back();
    heap.pop_back();
    total += static_cast<std::uint64_t>(a + b);
    heap.push_back(a + b);
    std::push_heap(heap.begin(), heap.end(), std::greater<>());
  }
  return total;
}

}  // namespace oracle
