#pragma once

#include <condition_variable>
#include <cstdint>
#include <functional>
#include <memory>
#include <mutex>
#include <optional>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include "ptrain/tensor.hpp"

namespace ptrain {

struct RawDataset {
  std::uint32_t n = 0, c = 0, h = 0, w = 0, classes = 0;
  std::vector<std::uint8_t> pixels;   // row-major (n, c, h, w)
  std::vector<std::uint32_t> labels;  // length n, each < classes
};

struct MeanImage {
  std::uint32_t c = 0, h = 0, w = 0;
  std::vector<float> values;  // c*h*w
};

struct PreprocConfig {
  int crop_h = 32, crop_w = 32;
  std::uint64_t aug_seed = 0;
  // When false: deterministic center crop, no flip (evaluation mode).
  bool augment = true;
};

struct Minibatch {
  Tensor images;  // (b, c, crop_h, crop_w), mean-subtracted
  std::vector<int> labels;
  std::int64_t sequence_index = 0;  // ordinal of this batch in the epoch stream
};

// One batch's worth of dataset indices, before preprocessing.
struct RawBatch {
  std::vector<std::uint32_t> indices;
  std::int64_t sequence_index = 0;   // per-shard consumption ordinal
  std::int64_t start_ordinal = 0;    // position of indices[0] in the permuted epoch stream
};

void write_dataset(const std::string& path, const RawDataset& ds);
RawDataset read_dataset(const std::string& path);
void write_mean_image(const std::string& path, const MeanImage& m);
MeanImage read_mean_image(const std::string& path);

// Class-conditional Gaussian blobs: per-class random mean image plus pixel
// noise, clamped to [0, 255]. Labels are balanced round-robin.
RawDataset generate_synthetic(std::uint32_t n, std::uint32_t classes, std::uint32_t c,
                              std::uint32_t h, std::uint32_t w, std::uint64_t seed);

MeanImage compute_mean_image(const RawDataset& ds);

// float-convert -> subtract full-size mean -> random crop -> random flip.
// Image j of the batch draws its crop/flip from splitmix(rng_state + j), so
// rng_state doubles as the image's position in the permuted epoch stream.
Minibatch preprocess(const RawDataset& ds, std::span<const std::uint32_t> indices,
                     const MeanImage& mean, const PreprocConfig& cfg,
                     std::uint64_t rng_state, std::int64_t sequence_index = 0);

// Deterministic epoch permutation split into global batches of batch_size;
// shard k receives global batches with index == k (mod K). The remainder
// smaller than batch_size*K is dropped.
std::vector<RawBatch> batch_stream(std::uint32_t n, int batch_size, int shard_k,
                                   int shard_count, std::uint64_t epoch_seed);

// Capacity-one producer/consumer handoff: the worker prepares the next batch
// while the consumer holds the current one.
class PrefetchHandle {
 public:
  using Producer = std::function<std::optional<Minibatch>()>;

  explicit PrefetchHandle(Producer produce);
  ~PrefetchHandle();
  PrefetchHandle(const PrefetchHandle&) = delete;
  PrefetchHandle& operator=(const PrefetchHandle&) = delete;

  // Blocks until the prepared batch is ready; moves it out without copying
  // the pixel payload. Returns nullopt at end of stream. Rethrows any
  // producer-side failure.
  std::optional<Minibatch> next();

  // Number of loader workers currently alive (leak accounting).
  static int live_workers();

 private:
  void run(Producer produce);

  std::mutex mu_;
  std::condition_variable slot_filled_;
  std::condition_variable slot_taken_;
  std::optional<Minibatch> slot_;
  bool done_ = false;
  bool stop_ = false;
  std::exception_ptr error_;
  std::thread worker_;
};

// Loader worker over a fixed raw-batch sequence. rng_base + start_ordinal of
// each batch seeds the per-image augmentation draws.
std::unique_ptr<PrefetchHandle> spawn_prefetcher(const RawDataset& ds,
                                                 std::vector<RawBatch> stream,
                                                 const MeanImage& mean,
                                                 const PreprocConfig& cfg,
                                                 std::uint64_t rng_base);

// splitmix64; the project's counter-based deterministic RNG.
std::uint64_t mix64(std::uint64_t x);

}  // namespace ptrain
