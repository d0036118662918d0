#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "cdl/train.hpp"

namespace cdl::parsim {

enum class PayloadPolicy { kRawFp64, kRawFixedB, kHuffmanCoded };
enum class ParallelMode { kDataParallel, kPipeline };
enum class DpTopology { kParameterServer, kAllToAll };
enum class Direction { kUp, kDown, kForward, kBackward };

const char* policy_name(PayloadPolicy p);
const char* direction_name(Direction d);

struct ParallelPlan {
  ParallelMode mode = ParallelMode::kDataParallel;
  int workers = 2;           // data-parallel workers, or pipeline stage count
  int sync_every_steps = 0;  // 0 = sync once per epoch (data parallel)
  PayloadPolicy policy = PayloadPolicy::kRawFp64;
  DpTopology topology = DpTopology::kParameterServer;
  std::vector<int> stage_cuts;  // pipeline boundaries: after block index

  void validate(int num_blocks) const;
};

struct CommEvent {
  std::int64_t step = 0;  // global training step (epoch-end syncs use the last step)
  int epoch = 0;
  Direction dir = Direction::kUp;
  int layer = -1;  // block, -1 = whole model
  PayloadPolicy policy = PayloadPolicy::kRawFp64;
  std::uint64_t payload_bytes = 0;
  std::uint64_t overhead_bytes = 0;  // codebook side information
};

struct CommLedger {
  std::vector<CommEvent> events;
  std::map<int, std::uint64_t> per_epoch_bytes;  // payload + overhead
  std::uint64_t cumulative_bytes = 0;

  void record(const CommEvent& ev);
  std::uint64_t epoch_bytes(int epoch) const;
  void write_csv(const std::string& path) const;
  void write_json_summary(const std::string& path) const;
};

// ---------------------------------------------------------------------------
// Data parallelism: at each sync event the model weights are quantized with
// Q_p under the current parameters and the bytes that would be exchanged are
// recorded. Raw policies observe only; the coded policy also replaces the
// masters with the decoded quantized values (lossy sync).
// ---------------------------------------------------------------------------
class DataParallelSim : public train::StepObserver {
 public:
  DataParallelSim(const ParallelPlan& plan, std::uint64_t seed);
  void on_batch(const train::BatchEvent& ev) override;
  void on_epoch(const train::EpochEvent& ev) override;
  const CommLedger& ledger() const { return ledger_; }

 private:
  void sync(net::Model& model, int epoch, std::int64_t step, std::uint64_t salt);
  ParallelPlan plan_;
  std::uint64_t seed_;
  CommLedger ledger_;
};

// ---------------------------------------------------------------------------
// Pipeline model parallelism: boundary activations cross stage cuts on every
// forward pass; boundary gradients return at fixed b bits on every backward.
// ---------------------------------------------------------------------------
class PipelineSim : public train::StepObserver {
 public:
  PipelineSim(const ParallelPlan& plan, std::uint64_t seed);
  std::vector<int> boundary_cuts() const override { return plan_.stage_cuts; }
  void on_batch(const train::BatchEvent& ev) override;
  const CommLedger& ledger() const { return ledger_; }

 private:
  ParallelPlan plan_;
  std::uint64_t seed_;
  CommLedger ledger_;
};

}  // namespace cdl::parsim
