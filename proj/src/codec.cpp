#include "cdl/codec.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <map>
#include <stdexcept>

namespace cdl::codec {

void BitWriter::put_bits(std::uint64_t code, int nbits) {
  for (int i = nbits - 1; i >= 0; --i) {
    const int bit = static_cast<int>((code >> i) & 1u);
    const std::size_t byte = static_cast<std::size_t>(bits_ >> 3);
    if (byte == buf_.size()) buf_.push_back(0);
    if (bit) buf_[byte] |= static_cast<std::uint8_t>(0x80u >> (bits_ & 7));
    ++bits_;
  }
}

int BitReader::get_bit() {
  if (pos_ >= bits_) throw std::runtime_error("bitstream: truncated payload");
  const std::size_t byte = static_cast<std::size_t>(pos_ >> 3);
  const int bit = (buf_[byte] >> (7 - (pos_ & 7))) & 1;
  ++pos_;
  return bit;
}

// ---------------------------------------------------------------------------

double Codebook::kraft_sum() const {
  double s = 0.0;
  for (const CodeEntry& e : entries) s += std::ldexp(1.0, -static_cast<int>(e.length));
  if (degenerate) s += 0.5;  // the padded sibling of the lone 1-bit codeword
  return s;
}

double Codebook::avg_code_length(std::span<const std::int32_t> symbols) const {
  std::map<std::int32_t, int> len;
  for (const CodeEntry& e : entries) len[e.symbol] = e.length;
  std::uint64_t bits = 0;
  for (std::int32_t s : symbols) bits += static_cast<std::uint64_t>(len.at(s));
  return static_cast<double>(bits) / static_cast<double>(symbols.size());
}

std::uint64_t Codebook::serialized_bytes() const {
  // u16 count + (i16 symbol, u8 length) per entry
  return 2 + 3 * entries.size();
}

Codebook build_codebook(std::span<const std::int32_t> symbols) {
  if (symbols.empty()) throw std::invalid_argument("build_codebook: empty stream");
  std::map<std::int32_t, std::int64_t> hist;
  for (std::int32_t s : symbols) ++hist[s];

  Codebook cb;
  if (hist.size() == 1) {
    cb.degenerate = true;
    cb.entries.push_back({hist.begin()->first, 1, 0});
    cb.histogram_symbols.push_back(hist.begin()->second);
    return cb;
  }

  // Two-queue Huffman over leaves sorted by (freq, symbol); ties prefer the
  // leaf queue so the result is deterministic.
  struct Node {
    std::int64_t freq;
    int left = -1, right = -1;
    std::int32_t symbol = 0;
  };
  std::vector<Node> nodes;
  nodes.reserve(hist.size() * 2);
  std::vector<int> leaves;
  for (const auto& [sym, freq] : hist) {
    nodes.push_back({freq, -1, -1, sym});
    leaves.push_back(static_cast<int>(nodes.size()) - 1);
  }
  std::sort(leaves.begin(), leaves.end(), [&](int a, int b) {
    if (nodes[static_cast<std::size_t>(a)].freq != nodes[static_cast<std::size_t>(b)].freq)
      return nodes[static_cast<std::size_t>(a)].freq < nodes[static_cast<std::size_t>(b)].freq;
    return nodes[static_cast<std::size_t>(a)].symbol < nodes[static_cast<std::size_t>(b)].symbol;
  });
  std::vector<int> internal;
  std::size_t li = 0, ii = 0;
  auto take_min = [&]() {
    const bool leaf_ok = li < leaves.size();
    const bool int_ok = ii < internal.size();
    if (leaf_ok &&
        (!int_ok || nodes[static_cast<std::size_t>(leaves[li])].freq <=
                        nodes[static_cast<std::size_t>(internal[ii])].freq))
      return leaves[li++];
    return internal[ii++];
  };
  while (leaves.size() - li + internal.size() - ii > 1) {
    const int a = take_min();
    const int b = take_min();
    nodes.push_back({nodes[static_cast<std::size_t>(a)].freq +
                         nodes[static_cast<std::size_t>(b)].freq,
                     a, b, 0});
    internal.push_back(static_cast<int>(nodes.size()) - 1);
  }

  // Depths by iterative traversal from the root.
  std::vector<std::pair<int, int>> stack{{take_min(), 0}};
  std::map<std::int32_t, int> depth;
  while (!stack.empty()) {
    auto [n, d] = stack.back();
    stack.pop_back();
    const Node& nd = nodes[static_cast<std::size_t>(n)];
    if (nd.left < 0) {
      depth[nd.symbol] = std::max(d, 1);
    } else {
      stack.push_back({nd.left, d + 1});
      stack.push_back({nd.right, d + 1});
    }
  }

  for (const auto& [sym, len] : depth)
    cb.entries.push_back({sym, static_cast<std::uint8_t>(len), 0});
  std::sort(cb.entries.begin(), cb.entries.end(), [](const CodeEntry& a, const CodeEntry& b) {
    if (a.length != b.length) return a.length < b.length;
    return a.symbol < b.symbol;
  });
  // Canonical code assignment.
  std::uint64_t code = 0;
  int prev_len = cb.entries.front().length;
  for (CodeEntry& e : cb.entries) {
    code <<= (e.length - prev_len);
    e.code = code++;
    prev_len = e.length;
  }
  cb.histogram_symbols.reserve(cb.entries.size());
  for (const CodeEntry& e : cb.entries) cb.histogram_symbols.push_back(hist.at(e.symbol));
  return cb;
}

Payload encode_layer(std::span<const std::int32_t> symbols, const Codebook& cb) {
  std::map<std::int32_t, const CodeEntry*> lut;
  for (const CodeEntry& e : cb.entries) lut[e.symbol] = &e;
  BitWriter bw;
  for (std::int32_t s : symbols) {
    auto it = lut.find(s);
    if (it == lut.end()) throw std::invalid_argument("encode_layer: symbol not in codebook");
    bw.put_bits(it->second->code, it->second->length);
  }
  return {bw.bytes(), bw.bit_count()};
}

std::vector<std::int32_t> decode_layer(std::span<const std::uint8_t> bytes,
                                       std::uint64_t bit_count, const Codebook& cb,
                                       std::int64_t count) {
  std::vector<std::int32_t> out;
  out.reserve(static_cast<std::size_t>(count));
  BitReader br(bytes, bit_count);
  // Canonical decode tables: per length, the first code value and the index
  // of its first entry.
  const int max_len = cb.entries.empty() ? 0 : cb.entries.back().length;
  std::vector<std::uint64_t> first_code(static_cast<std::size_t>(max_len) + 1, 0);
  std::vector<int> first_idx(static_cast<std::size_t>(max_len) + 1, -1);
  std::vector<int> count_len(static_cast<std::size_t>(max_len) + 1, 0);
  for (int i = 0; i < static_cast<int>(cb.entries.size()); ++i) {
    const CodeEntry& e = cb.entries[static_cast<std::size_t>(i)];
    if (first_idx[e.length] < 0) {
      first_idx[e.length] = i;
      first_code[e.length] = e.code;
    }
    ++count_len[e.length];
  }
  for (std::int64_t k = 0; k < count; ++k) {
    std::uint64_t code = 0;
    int len = 0;
    for (;;) {
      code = (code << 1) | static_cast<std::uint64_t>(br.get_bit());
      ++len;
      if (len > max_len) throw std::runtime_error("decode_layer: invalid codeword");
      if (first_idx[len] >= 0 && code >= first_code[len] &&
          code < first_code[len] + static_cast<std::uint64_t>(count_len[len])) {
        out.push_back(
            cb.entries[static_cast<std::size_t>(first_idx[len] + (code - first_code[len]))]
                .symbol);
        break;
      }
    }
  }
  return out;
}

CodedSize coded_size(std::span<const std::int32_t> symbols) {
  const Codebook cb = build_codebook(symbols);
  std::map<std::int32_t, int> len;
  for (const CodeEntry& e : cb.entries) len[e.symbol] = e.length;
  CodedSize cs;
  for (std::int32_t s : symbols) cs.payload_bits += static_cast<std::uint64_t>(len.at(s));
  cs.overhead_bytes = cb.serialized_bytes();
  return cs;
}

// ---------------------------------------------------------------------------

double CompressedModel::avg_bits_per_symbol() const {
  std::uint64_t bits = 0;
  std::int64_t n = 0;
  for (const CompressedLayer& L : layers) {
    bits += L.payload.bit_count;
    n += L.symbol_count;
  }
  return n == 0 ? 0.0 : static_cast<double>(bits) / static_cast<double>(n);
}

std::uint64_t CompressedModel::total_payload_bytes() const {
  std::uint64_t b = 0;
  for (const CompressedLayer& L : layers) b += L.payload.bytes.size();
  return b;
}

std::uint64_t CompressedModel::total_overhead_bytes() const {
  std::uint64_t b = 0;
  for (const CompressedLayer& L : layers) b += L.codebook.serialized_bytes();
  return b;
}

std::uint32_t crc32(std::span<const std::uint8_t> data, std::uint32_t seed) {
  static std::uint32_t table[256];
  static bool init = false;
  if (!init) {
    for (std::uint32_t i = 0; i < 256; ++i) {
      std::uint32_t c = i;
      for (int k = 0; k < 8; ++k) c = (c & 1) ? 0xedb88320u ^ (c >> 1) : c >> 1;
      table[i] = c;
    }
    init = true;
  }
  std::uint32_t c = seed ^ 0xffffffffu;
  for (std::uint8_t b : data) c = table[(c ^ b) & 0xffu] ^ (c >> 8);
  return c ^ 0xffffffffu;
}

namespace {

constexpr char kMagic[4] = {'C', 'D', 'L', 'C'};

template <typename T>
void put(std::vector<std::uint8_t>& buf, T v) {
  const auto* p = reinterpret_cast<const std::uint8_t*>(&v);
  buf.insert(buf.end(), p, p + sizeof(T));
}

template <typename T>
T get(std::span<const std::uint8_t> buf, std::size_t& off) {
  if (off + sizeof(T) > buf.size())
    throw std::runtime_error("compressed model: truncated at byte offset " + std::to_string(off));
  T v{};
  std::memcpy(&v, buf.data() + off, sizeof(T));
  off += sizeof(T);
  return v;
}

}  // namespace

void save_compressed(const CompressedModel& cm, const std::string& path) {
  std::vector<std::uint8_t> buf;
  buf.insert(buf.end(), kMagic, kMagic + 4);
  put<std::uint16_t>(buf, cm.version);
  put<std::uint8_t>(buf, cm.bits);
  put<std::uint16_t>(buf, static_cast<std::uint16_t>(cm.layers.size()));
  for (const CompressedLayer& L : cm.layers) {
    put<std::uint16_t>(buf, static_cast<std::uint16_t>(L.name.size()));
    buf.insert(buf.end(), L.name.begin(), L.name.end());
    put<double>(buf, L.step);
    put<std::uint8_t>(buf, L.bits);
    put<std::uint8_t>(buf, L.is_signed ? 1 : 0);
    put<std::int64_t>(buf, L.symbol_count);
    put<std::uint16_t>(buf, static_cast<std::uint16_t>(L.codebook.entries.size()));
    for (const CodeEntry& e : L.codebook.entries) {
      put<std::int16_t>(buf, static_cast<std::int16_t>(e.symbol));
      put<std::uint8_t>(buf, e.length);
    }
    put<std::uint8_t>(buf, L.codebook.degenerate ? 1 : 0);
    put<std::uint64_t>(buf, L.payload.bit_count);
    put<std::uint64_t>(buf, static_cast<std::uint64_t>(L.payload.bytes.size()));
    buf.insert(buf.end(), L.payload.bytes.begin(), L.payload.bytes.end());
  }
  put<std::uint32_t>(buf, crc32(buf));

  const std::string tmp = path + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw std::runtime_error("compressed model: cannot open " + tmp);
    os.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
    if (!os) throw std::runtime_error("compressed model: write failed");
  }
  if (std::rename(tmp.c_str(), path.c_str()) != 0)
    throw std::runtime_error("compressed model: rename failed");
}

CompressedModel load_compressed(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("compressed model: cannot open " + path);
  std::vector<std::uint8_t> buf((std::istreambuf_iterator<char>(is)),
                                std::istreambuf_iterator<char>());
  if (buf.size() < 4 + sizeof(std::uint32_t)) throw std::runtime_error("compressed model: too short");
  const std::size_t body = buf.size() - sizeof(std::uint32_t);
  std::uint32_t stored;
  std::memcpy(&stored, buf.data() + body, sizeof(stored));
  const std::uint32_t computed = crc32({buf.data(), body});
  if (stored != computed) {
    char msg[128];
    std::snprintf(msg, sizeof(msg),
                  "compressed model: checksum mismatch (stored %08x, computed %08x, footer at "
                  "byte offset %zu)",
                  stored, computed, body);
    throw std::runtime_error(msg);
  }

  std::size_t off = 0;
  if (std::memcmp(buf.data(), kMagic, 4) != 0) throw std::runtime_error("compressed model: bad magic");
  off += 4;
  CompressedModel cm;
  cm.version = get<std::uint16_t>(buf, off);
  if (cm.version != 1) throw std::runtime_error("compressed model: unsupported version");
  cm.bits = get<std::uint8_t>(buf, off);
  const int nlayers = get<std::uint16_t>(buf, off);
  cm.layers.resize(static_cast<std::size_t>(nlayers));
  for (CompressedLayer& L : cm.layers) {
    const int namelen = get<std::uint16_t>(buf, off);
    if (off + static_cast<std::size_t>(namelen) > buf.size())
      throw std::runtime_error("compressed model: truncated");
    L.name.assign(reinterpret_cast<const char*>(buf.data() + off), static_cast<std::size_t>(namelen));
    off += static_cast<std::size_t>(namelen);
    L.step = get<double>(buf, off);
    L.bits = get<std::uint8_t>(buf, off);
    L.is_signed = get<std::uint8_t>(buf, off) != 0;
    L.symbol_count = get<std::int64_t>(buf, off);
    const int nent = get<std::uint16_t>(buf, off);
    L.codebook.entries.resize(static_cast<std::size_t>(nent));
    for (CodeEntry& e : L.codebook.entries) {
      e.symbol = get<std::int16_t>(buf, off);
      e.length = get<std::uint8_t>(buf, off);
    }
    L.codebook.degenerate = get<std::uint8_t>(buf, off) != 0;
    // canonical code reconstruction
    std::uint64_t code = 0;
    int prev_len = L.codebook.entries.empty() ? 0 : L.codebook.entries.front().length;
    for (CodeEntry& e : L.codebook.entries) {
      code <<= (e.length - prev_len);
      e.code = code++;
      prev_len = e.length;
    }
    L.payload.bit_count = get<std::uint64_t>(buf, off);
    const auto nbytes = get<std::uint64_t>(buf, off);
    if (off + nbytes > buf.size()) throw std::runtime_error("compressed model: truncated payload");
    L.payload.bytes.assign(buf.begin() + static_cast<std::ptrdiff_t>(off),
                           buf.begin() + static_cast<std::ptrdiff_t>(off + nbytes));
    off += nbytes;
  }
  return cm;
}

}  // namespace cdl::codec
