#include "cdl/parsim.hpp"

#include <fstream>
#include <stdexcept>

#include <json.hpp>

#include "cdl/model_codec.hpp"

namespace cdl::parsim {

const char* policy_name(PayloadPolicy p) {
  switch (p) {
    case PayloadPolicy::kRawFp64: return "raw_fp64";
    case PayloadPolicy::kRawFixedB: return "raw_fixed_b";
    case PayloadPolicy::kHuffmanCoded: return "huffman_coded";
  }
  return "?";
}

const char* direction_name(Direction d) {
  switch (d) {
    case Direction::kUp: return "up";
    case Direction::kDown: return "down";
    case Direction::kForward: return "forward";
    case Direction::kBackward: return "backward";
  }
  return "?";
}

void ParallelPlan::validate(int num_blocks) const {
  if (mode == ParallelMode::kDataParallel) {
    if (workers < 2) throw std::invalid_argument("plan: data parallelism needs >= 2 workers");
    if (sync_every_steps < 0) throw std::invalid_argument("plan: cadence must be >= 1 (0 = per epoch)");
  } else {
    if (static_cast<int>(stage_cuts.size()) + 1 != workers)
      throw std::invalid_argument("plan: pipeline stages must equal cuts + 1");
    for (int c : stage_cuts)
      if (c < 0 || c >= num_blocks - 1)
        throw std::invalid_argument("plan: stage cut must fall between weight layers");
  }
}

void CommLedger::record(const CommEvent& ev) {
  events.push_back(ev);
  per_epoch_bytes[ev.epoch] += ev.payload_bytes + ev.overhead_bytes;
  cumulative_bytes += ev.payload_bytes + ev.overhead_bytes;
}

std::uint64_t CommLedger::epoch_bytes(int epoch) const {
  auto it = per_epoch_bytes.find(epoch);
  return it == per_epoch_bytes.end() ? 0 : it->second;
}

void CommLedger::write_csv(const std::string& path) const {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw std::runtime_error("ledger: cannot open " + path);
  os << "# schema=cdl.comm_ledger schema_version=1\n";
  os << "step,epoch,direction,layer,policy,payload_bytes,overhead_bytes\n";
  for (const CommEvent& e : events)
    os << e.step << ',' << e.epoch << ',' << direction_name(e.dir) << ',' << e.layer << ','
       << policy_name(e.policy) << ',' << e.payload_bytes << ',' << e.overhead_bytes << "\n";
}

void CommLedger::write_json_summary(const std::string& path) const {
  nlohmann::json j;
  j["schema"] = "cdl.comm_summary";
  j["schema_version"] = 1;
  j["cumulative_bytes"] = cumulative_bytes;
  auto per_epoch = nlohmann::json::array();
  for (const auto& [epoch, bytes] : per_epoch_bytes)
    per_epoch.push_back({{"epoch", epoch}, {"bytes", bytes}});
  j["per_epoch"] = per_epoch;
  j["events"] = events.size();
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw std::runtime_error("ledger: cannot open " + path);
  os << j.dump(2) << "\n";
}

// ---------------------------------------------------------------------------

DataParallelSim::DataParallelSim(const ParallelPlan& plan, std::uint64_t seed)
    : plan_(plan), seed_(seed) {
  if (plan_.mode != ParallelMode::kDataParallel)
    throw std::invalid_argument("DataParallelSim: plan mode mismatch");
}

void DataParallelSim::on_batch(const train::BatchEvent& ev) {
  if (plan_.sync_every_steps > 0 && ev.global_step % plan_.sync_every_steps == 0)
    sync(*ev.model, ev.epoch, ev.global_step, ev.rng_salt);
}

void DataParallelSim::on_epoch(const train::EpochEvent& ev) {
  if (plan_.sync_every_steps == 0)
    sync(*ev.model, ev.epoch, static_cast<std::int64_t>(ev.epoch) * ev.steps_in_epoch,
         ev.rng_salt);
}

void DataParallelSim::sync(net::Model& model, int epoch, std::int64_t step, std::uint64_t salt) {
  // Transfers per sync: parameter server exchanges once per edge worker (up
  // and down); all-to-all broadcasts pairwise.
  const std::uint64_t w = static_cast<std::uint64_t>(plan_.workers);
  const bool ps = plan_.topology == DpTopology::kParameterServer;
  const std::uint64_t up_mult = ps ? (w - 1) : w * (w - 1);

  std::vector<std::vector<std::int32_t>> symbols;
  if (plan_.policy == PayloadPolicy::kHuffmanCoded)
    symbols = codec::sample_weight_symbols(model, Rng::mix({seed_, salt, 0x73796e63u}));

  for (std::size_t l = 0; l < model.blocks.size(); ++l) {
    std::uint64_t payload = 0, overhead = 0;
    const std::uint64_t n = static_cast<std::uint64_t>(model.blocks[l].weight_count);
    switch (plan_.policy) {
      case PayloadPolicy::kRawFp64:
        payload = n * 8;
        break;
      case PayloadPolicy::kRawFixedB:
        payload = (n * static_cast<std::uint64_t>(model.qp[l].weight_bits) + 7) / 8;
        break;
      case PayloadPolicy::kHuffmanCoded: {
        const codec::CodedSize cs = codec::coded_size(symbols[l]);
        payload = (cs.payload_bits + 7) / 8;
        overhead = cs.overhead_bytes;
        break;
      }
    }
    CommEvent e;
    e.step = step;
    e.epoch = epoch;
    e.layer = static_cast<int>(l);
    e.policy = plan_.policy;
    e.dir = Direction::kUp;
    e.payload_bytes = payload * up_mult;
    e.overhead_bytes = overhead * up_mult;
    ledger_.record(e);
    if (ps) {
      e.dir = Direction::kDown;
      ledger_.record(e);
    }
  }

  if (plan_.policy == PayloadPolicy::kHuffmanCoded) {
    // Lossy sync: every worker continues from the decoded quantized weights.
    for (std::size_t l = 0; l < model.blocks.size(); ++l) {
      auto& wdata = model.layers[static_cast<std::size_t>(model.blocks[l].weight_node)].weights.data;
      const double q = model.qp[l].q;
      for (std::size_t i = 0; i < wdata.size(); ++i)
        wdata[i] = q * static_cast<double>(symbols[l][i]);
    }
  }
}

// ---------------------------------------------------------------------------

PipelineSim::PipelineSim(const ParallelPlan& plan, std::uint64_t seed)
    : plan_(plan), seed_(seed) {
  if (plan_.mode != ParallelMode::kPipeline)
    throw std::invalid_argument("PipelineSim: plan mode mismatch");
  (void)seed_;
}

void PipelineSim::on_batch(const train::BatchEvent& ev) {
  if (ev.captures == nullptr) return;
  for (const train::BoundaryCapture& bc : *ev.captures) {
    const net::Model& model = *ev.model;
    const int act_bits = model.qp[static_cast<std::size_t>(bc.block)].act_bits;
    const std::uint64_t n = static_cast<std::uint64_t>(bc.symbols.size());

    std::uint64_t fwd_payload = 0, fwd_overhead = 0;
    switch (plan_.policy) {
      case PayloadPolicy::kRawFp64:
        fwd_payload = n * 8;
        break;
      case PayloadPolicy::kRawFixedB:
        fwd_payload = (n * static_cast<std::uint64_t>(act_bits) + 7) / 8;
        break;
      case PayloadPolicy::kHuffmanCoded: {
        const codec::CodedSize cs = codec::coded_size(bc.symbols);
        fwd_payload = (cs.payload_bits + 7) / 8;
        fwd_overhead = cs.overhead_bytes;
        break;
      }
    }
    CommEvent e;
    e.step = ev.global_step;
    e.epoch = ev.epoch;
    e.layer = bc.block;
    e.policy = plan_.policy;
    e.dir = Direction::kForward;
    e.payload_bytes = fwd_payload;
    e.overhead_bytes = fwd_overhead;
    ledger_.record(e);

    // Boundary gradients go back uncoded at fixed b bits (no gradient coding
    // scheme is defined for them).
    e.dir = Direction::kBackward;
    e.policy = PayloadPolicy::kRawFixedB;
    e.payload_bytes = (n * static_cast<std::uint64_t>(act_bits) + 7) / 8;
    e.overhead_bytes = 0;
    ledger_.record(e);
  }
}

}  // namespace cdl::parsim
