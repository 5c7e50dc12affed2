#pragma once

#include <atomic>
#include <chrono>
#include <condition_variable>
#include <cstdint>
#include <mutex>
#include <stdexcept>
#include <string>
#include <vector>

#include "ptrain/datapipe.hpp"
#include "ptrain/model.hpp"

namespace ptrain {

// Barrier violation, peer disappearance or group abort.
class ProtocolError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class TransportMode {
  Direct,  // zero-copy ownership move of the published state between workers
  Staged,  // serialize to a byte buffer, copy, deserialize
};

const char* transport_name(TransportMode mode);
TransportMode transport_from_name(const std::string& name);

struct SyncReport {
  std::int64_t rounds = 0;
  std::int64_t bytes_per_round = 0;  // (K-1) x flattened-state length
  double mean_latency_s = 0.0;
  double max_latency_s = 0.0;
};

// Abortable K-party rendezvous with timeout; reusable across generations.
class SyncBarrier {
 public:
  SyncBarrier(int parties, std::chrono::milliseconds timeout);
  // Throws ProtocolError naming the missing parties on timeout or abort.
  void arrive_and_wait(int id);
  void abort(const std::string& reason);

 private:
  const int parties_;
  const std::chrono::milliseconds timeout_;
  std::mutex mu_;
  std::condition_variable cv_;
  int count_ = 0;
  std::uint64_t gen_ = 0;
  std::vector<bool> arrived_;
  bool aborted_ = false;
  std::string reason_;
};

// Exchange state: per-replica publish slots plus the two-phase barrier of one
// averaging round (all-publish, then all-read-and-average).
class ExchangeGroup {
 public:
  ExchangeGroup(int k, TransportMode transport, const NetworkSpec* spec = nullptr,
                std::chrono::milliseconds timeout = std::chrono::milliseconds(30000));

  // Replaces local with the elementwise mean over all K replicas' published
  // states (weights, biases and momentum), summed in replica-index order so
  // every replica lands on bit-identical values. Must be called exactly once
  // per iteration by every replica.
  void exchange_and_average(ParamState& local, int id);

  void abort(const std::string& reason);
  int size() const { return k_; }
  std::uint64_t generation(int id) const { return gen_[id].load(); }
  SyncReport report() const;

 private:
  struct Slot {
    const ParamState* direct = nullptr;
    std::vector<std::uint8_t> staged;
  };

  const int k_;
  const TransportMode transport_;
  const NetworkSpec* spec_;
  SyncBarrier barrier_;
  std::vector<Slot> slots_;
  std::vector<std::atomic<std::uint64_t>> gen_;

  mutable std::mutex stats_mu_;
  std::int64_t bytes_per_round_ = 0;
  std::int64_t latency_samples_ = 0;
  double latency_sum_s_ = 0.0;
  double latency_max_s_ = 0.0;
};

// serialize -> copy -> deserialize, the host-memory slow path; bit-identical.
ParamState staged_roundtrip(const ParamState& state, const NetworkSpec& spec);

struct TrainOptions {
  int workers = 1;
  int per_replica_batch = 64;
  int iterations = 20;
  bool parallel_loading = false;
  TransportMode transport = TransportMode::Direct;
  Hyper hyper;
  std::uint64_t seed = 0;
  PreprocConfig preproc;
  // Iterations run before the timed region; they update parameters.
  int warmup_iterations = 0;
  std::chrono::milliseconds barrier_timeout{30000};
};

struct TrainResult {
  ParamState params;              // replica 0's state; all replicas identical
  std::vector<float> loss_trace;  // per iteration, mean over replicas
  SyncReport sync;
  double loop_seconds = 0.0;      // timed region only: post-warmup iterations
};

// Spawns K replica workers with identically-seeded parameters; each iteration
// is fetch shard batch -> forward/backward -> momentum step -> exchange.
TrainResult train_replicated(const NetworkSpec& spec, const RawDataset& ds,
                             const MeanImage& mean, const TrainOptions& opt);

}  // namespace ptrain
