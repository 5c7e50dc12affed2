#pragma once

#include <chrono>
#include <string>
#include <vector>

#include "ptrain/replicasync.hpp"

namespace ptrain {

struct BenchConfig {
  int workers = 1;
  bool parallel_loading = false;
  TransportMode transport = TransportMode::Direct;
  int global_batch = 64;  // split as global_batch / workers per replica
  int iterations = 20;
  int repetitions = 3;
  int warmup = 2;
};

struct TimingRecord {
  BenchConfig config;
  double seconds_per_20 = 0.0;   // median over repetitions, normalized to 20 iterations
  double images_per_sec = 0.0;   // 20 * global_batch / seconds_per_20
  double spread_seconds = 0.0;   // max - min over repetitions (normalized)
  SyncReport sync;
};

// Deterministic stand-in for the real network: pure injected delays.
struct WorkloadStub {
  std::chrono::milliseconds compute_per_batch{0};
  std::chrono::milliseconds load_per_batch{0};
  std::chrono::milliseconds setup_delay{0};  // per worker, before the timed region
};

// Runs each config repetitions times (after warmup iterations) and reports the
// median. Wall-clock covers the training loop only; setup, dataset reads and
// worker spawn are outside the timed region. All configs are validated against
// the dataset before any timing starts.
std::vector<TimingRecord> run_benchmark(const std::vector<BenchConfig>& matrix,
                                        const NetworkSpec& spec, const RawDataset& ds,
                                        const MeanImage& mean, const PreprocConfig& preproc,
                                        std::uint64_t seed);

// Loader/consumer overlap with injected delays; returns loop wall seconds.
double run_stub_pipeline(const WorkloadStub& stub, int iterations, bool parallel);

// K replica workers, per-replica compute scaled by 1/K (fixed global batch),
// exchanging a tiny state each iteration; returns loop wall seconds measured
// between the start and end gates (setup_delay is spent before the start gate).
double run_stub_replicated(const WorkloadStub& stub, int workers, int iterations,
                           TransportMode transport);

// Human-readable grid: loading-mode rows, (workers x transport) columns.
std::string render_table(const std::vector<TimingRecord>& records);

// CSV schema:
// workers,parallel_loading,transport,global_batch,iters,seconds_per_20,images_per_sec
std::string render_csv(const std::vector<TimingRecord>& records);
std::vector<TimingRecord> parse_csv(const std::string& text);

}  // namespace ptrain
