#include "cdl/model_codec.hpp"

#include <stdexcept>

namespace cdl::codec {

std::vector<std::vector<std::int32_t>> sample_weight_symbols(const net::Model& model,
                                                             std::uint64_t seed) {
  std::vector<std::vector<std::int32_t>> out(model.blocks.size());
  for (std::size_t l = 0; l < model.blocks.size(); ++l) {
    const auto& w =
        model.layers[static_cast<std::size_t>(model.blocks[l].weight_node)].weights.data;
    const quant::QuantGrid grid = model.weight_grid(static_cast<int>(l));
    const double alpha = model.qp[l].alpha;
    Rng rng(Rng::mix({seed, 0x77737970u, static_cast<std::uint64_t>(l)}));
    std::vector<double> probs(static_cast<std::size_t>(grid.size()));
    out[l].resize(w.size());
    for (std::size_t i = 0; i < w.size(); ++i) {
      quant::softmax_window(w[i], grid, alpha, grid.min_index(), grid.size(), probs.data());
      out[l][i] = quant::sample_window_index(probs.data(), grid.min_index(), grid.size(), rng);
    }
  }
  return out;
}

CompressedModel compress_weights(const net::Model& model, std::uint64_t sample_seed) {
  CompressedModel cm;
  cm.bits = static_cast<std::uint8_t>(model.bits);
  const auto symbols = sample_weight_symbols(model, sample_seed);
  for (std::size_t l = 0; l < model.blocks.size(); ++l) {
    CompressedLayer cl;
    cl.name = model.blocks[l].name;
    cl.step = model.qp[l].q;
    cl.bits = static_cast<std::uint8_t>(model.qp[l].weight_bits);
    cl.is_signed = true;
    cl.symbol_count = static_cast<std::int64_t>(symbols[l].size());
    cl.codebook = build_codebook(symbols[l]);
    cl.payload = encode_layer(symbols[l], cl.codebook);
    cm.layers.push_back(std::move(cl));
  }
  return cm;
}

double avg_bits_per_weight(const CompressedModel& cm) { return cm.avg_bits_per_symbol(); }

AvgBits avg_bits_metrics(const net::Model& model, const data::Dataset& ds, std::int64_t first,
                         int count, std::uint64_t seed) {
  if (first < 0 || first + count > ds.count)
    throw std::invalid_argument("avg_bits_metrics: batch out of range");
  AvgBits out;

  const CompressedModel cm = compress_weights(model, seed);
  out.per_weight = cm.avg_bits_per_symbol();
  out.weight_overhead_bytes = cm.total_overhead_bytes();

  // Activation symbols from a sampled-quantizer inference over the batch,
  // pooled per layer across samples.
  std::vector<std::vector<std::int32_t>> act_syms(model.blocks.size());
  Rng wrng(Rng::mix({seed, 0x61777fu}));
  const auto wq = net::quantize_weights(model, net::Mode::kCdl, &wrng);
  net::Tensor x;
  for (int i = 0; i < count; ++i) {
    ds.fill_sample(first + i, x);
    Rng arng(Rng::mix({seed, 0x616374u, static_cast<std::uint64_t>(i)}));
    const net::ForwardTrace tr =
        net::forward(model, x, -1, net::Mode::kCdl, &wq, 0.0, &arng);
    for (std::size_t n = 0; n < tr.act.size(); ++n) {
      const net::ActTrace& at = tr.act[n];
      if (at.block < 0) continue;
      auto& dst = act_syms[static_cast<std::size_t>(at.block)];
      dst.reserve(dst.size() + at.symbols.size());
      for (std::int16_t s : at.symbols) dst.push_back(s);
    }
  }
  std::uint64_t bits = 0;
  std::int64_t n = 0;
  for (const auto& syms : act_syms) {
    if (syms.empty()) continue;
    const CodedSize cs = coded_size(syms);
    bits += cs.payload_bits;
    out.activation_overhead_bytes += cs.overhead_bytes;
    n += static_cast<std::int64_t>(syms.size());
  }
  out.per_activation = n == 0 ? 0.0 : static_cast<double>(bits) / static_cast<double>(n);
  return out;
}

}  // namespace cdl::codec
