#include "ptrain/datapipe.hpp"

#include <algorithm>
#include <atomic>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <numeric>
#include <random>
#include <stdexcept>

namespace ptrain {

std::uint64_t mix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

namespace {

constexpr char kDatasetMagic[4] = {'P', 'D', 'S', '1'};
constexpr char kMeanMagic[4] = {'P', 'D', 'M', '1'};
constexpr std::uint32_t kDatasetVersion = 1;

void write_bytes(std::ofstream& f, const void* p, std::size_t len) {
  f.write(static_cast<const char*>(p), static_cast<std::streamsize>(len));
}

void read_bytes(std::ifstream& f, void* p, std::size_t len, const char* field) {
  f.read(static_cast<char*>(p), static_cast<std::streamsize>(len));
  if (f.gcount() != static_cast<std::streamsize>(len))
    throw std::runtime_error(std::string("dataset file truncated while reading ") + field);
}

std::uint32_t read_u32(std::ifstream& f, const char* field) {
  std::uint32_t v;
  read_bytes(f, &v, 4, field);
  return v;
}

}  // namespace

void write_dataset(const std::string& path, const RawDataset& ds) {
  if (ds.pixels.size() != static_cast<std::size_t>(ds.n) * ds.c * ds.h * ds.w)
    throw std::invalid_argument("dataset pixel count does not match header");
  if (ds.labels.size() != ds.n)
    throw std::invalid_argument("dataset label count does not match header");
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("cannot open " + path + " for writing");
  write_bytes(f, kDatasetMagic, 4);
  const std::uint32_t header[6] = {kDatasetVersion, ds.n, ds.c, ds.h, ds.w, ds.classes};
  write_bytes(f, header, sizeof(header));
  write_bytes(f, ds.pixels.data(), ds.pixels.size());
  write_bytes(f, ds.labels.data(), ds.labels.size() * 4);
  if (!f) throw std::runtime_error("write failed for " + path);
}

RawDataset read_dataset(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open " + path);
  char magic[4];
  read_bytes(f, magic, 4, "magic");
  if (std::memcmp(magic, kDatasetMagic, 4) != 0)
    throw std::runtime_error("bad magic in " + path + " (expected PDS1)");
  RawDataset ds;
  const std::uint32_t version = read_u32(f, "version");
  if (version != kDatasetVersion)
    throw std::runtime_error("unsupported dataset version " + std::to_string(version));
  ds.n = read_u32(f, "n");
  ds.c = read_u32(f, "c");
  ds.h = read_u32(f, "h");
  ds.w = read_u32(f, "w");
  ds.classes = read_u32(f, "classes");
  const std::size_t npix = static_cast<std::size_t>(ds.n) * ds.c * ds.h * ds.w;
  ds.pixels.resize(npix);
  read_bytes(f, ds.pixels.data(), npix, "pixels");
  ds.labels.resize(ds.n);
  read_bytes(f, ds.labels.data(), static_cast<std::size_t>(ds.n) * 4, "labels");
  char extra;
  if (f.read(&extra, 1); f.gcount() != 0)
    throw std::runtime_error("trailing bytes after labels in " + path);
  for (std::uint32_t i = 0; i < ds.n; ++i)
    if (ds.labels[i] >= ds.classes)
      throw std::runtime_error("label " + std::to_string(ds.labels[i]) + " at index " +
                               std::to_string(i) + " >= classes " + std::to_string(ds.classes));
  return ds;
}

void write_mean_image(const std::string& path, const MeanImage& m) {
  if (m.values.size() != static_cast<std::size_t>(m.c) * m.h * m.w)
    throw std::invalid_argument("mean image value count does not match header");
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("cannot open " + path + " for writing");
  write_bytes(f, kMeanMagic, 4);
  const std::uint32_t header[3] = {m.c, m.h, m.w};
  write_bytes(f, header, sizeof(header));
  write_bytes(f, m.values.data(), m.values.size() * 4);
  if (!f) throw std::runtime_error("write failed for " + path);
}

MeanImage read_mean_image(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open " + path);
  char magic[4];
  read_bytes(f, magic, 4, "magic");
  if (std::memcmp(magic, kMeanMagic, 4) != 0)
    throw std::runtime_error("bad magic in " + path + " (expected PDM1)");
  MeanImage m;
  m.c = read_u32(f, "c");
  m.h = read_u32(f, "h");
  m.w = read_u32(f, "w");
  m.values.resize(static_cast<std::size_t>(m.c) * m.h * m.w);
  read_bytes(f, m.values.data(), m.values.size() * 4, "values");
  return m;
}

RawDataset generate_synthetic(std::uint32_t n, std::uint32_t classes, std::uint32_t c,
                              std::uint32_t h, std::uint32_t w, std::uint64_t seed) {
  if (n == 0 || classes == 0 || c == 0 || h == 0 || w == 0)
    throw std::invalid_argument("synthetic dataset extents must all be >= 1");
  RawDataset ds;
  ds.n = n;
  ds.c = c;
  ds.h = h;
  ds.w = w;
  ds.classes = classes;
  const std::size_t img = static_cast<std::size_t>(c) * h * w;

  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> uniform(0.0f, 255.0f);
  std::vector<float> class_means(static_cast<std::size_t>(classes) * img);
  for (float& v : class_means) v = uniform(rng);

  std::normal_distribution<float> noise(0.0f, 25.0f);
  ds.pixels.resize(static_cast<std::size_t>(n) * img);
  ds.labels.resize(n);
  for (std::uint32_t i = 0; i < n; ++i) {
    const std::uint32_t label = i % classes;
    ds.labels[i] = label;
    const float* mean = &class_means[static_cast<std::size_t>(label) * img];
    std::uint8_t* out = &ds.pixels[static_cast<std::size_t>(i) * img];
    for (std::size_t p = 0; p < img; ++p) {
      const float v = mean[p] + noise(rng);
      out[p] = static_cast<std::uint8_t>(std::clamp(v, 0.0f, 255.0f));
    }
  }
  return ds;
}

MeanImage compute_mean_image(const RawDataset& ds) {
  MeanImage m;
  m.c = ds.c;
  m.h = ds.h;
  m.w = ds.w;
  const std::size_t img = static_cast<std::size_t>(ds.c) * ds.h * ds.w;
  std::vector<double> acc(img, 0.0);
  for (std::uint32_t i = 0; i < ds.n; ++i) {
    const std::uint8_t* px = &ds.pixels[static_cast<std::size_t>(i) * img];
    for (std::size_t p = 0; p < img; ++p) acc[p] += px[p];
  }
  m.values.resize(img);
  for (std::size_t p = 0; p < img; ++p)
    m.values[p] = static_cast<float>(acc[p] / ds.n);
  return m;
}

Minibatch preprocess(const RawDataset& ds, std::span<const std::uint32_t> indices,
                     const MeanImage& mean, const PreprocConfig& cfg,
                     std::uint64_t rng_state, std::int64_t sequence_index) {
  if (indices.empty()) throw std::invalid_argument("empty batch");
  if (mean.c != ds.c || mean.h != ds.h || mean.w != ds.w)
    throw std::invalid_argument("mean image shape does not match dataset");
  if (cfg.crop_h > static_cast<int>(ds.h) || cfg.crop_w > static_cast<int>(ds.w))
    throw std::invalid_argument("crop " + std::to_string(cfg.crop_h) + "x" +
                                std::to_string(cfg.crop_w) + " larger than image " +
                                std::to_string(ds.h) + "x" + std::to_string(ds.w));
  const int b = static_cast<int>(indices.size());
  const int c = static_cast<int>(ds.c), h = static_cast<int>(ds.h), w = static_cast<int>(ds.w);
  const std::size_t img = static_cast<std::size_t>(c) * h * w;

  Minibatch mb;
  mb.images = Tensor(b, c, cfg.crop_h, cfg.crop_w);
  mb.labels.resize(b);
  mb.sequence_index = sequence_index;

  std::vector<float> full(img);
  for (int j = 0; j < b; ++j) {
    const std::uint32_t idx = indices[j];
    if (idx >= ds.n)
      throw std::invalid_argument("batch index " + std::to_string(idx) + " out of range");
    mb.labels[j] = static_cast<int>(ds.labels[idx]);

    const std::uint8_t* px = &ds.pixels[static_cast<std::size_t>(idx) * img];
    for (std::size_t p = 0; p < img; ++p)
      full[p] = static_cast<float>(px[p]) - mean.values[p];

    int oy = (h - cfg.crop_h) / 2, ox = (w - cfg.crop_w) / 2;
    bool flip = false;
    if (cfg.augment) {
      const std::uint64_t key = rng_state + static_cast<std::uint64_t>(j);
      const std::uint64_t r0 = mix64(key);
      const std::uint64_t r1 = mix64(r0);
      oy = static_cast<int>(r0 % static_cast<std::uint64_t>(h - cfg.crop_h + 1));
      ox = static_cast<int>(r1 % static_cast<std::uint64_t>(w - cfg.crop_w + 1));
      flip = (mix64(r1) & 1ull) != 0;
    }

    for (int ic = 0; ic < c; ++ic) {
      for (int y = 0; y < cfg.crop_h; ++y) {
        const float* src = &full[(static_cast<std::size_t>(ic) * h + oy + y) * w + ox];
        float* dst = &mb.images.at(j, ic, y, 0);
        if (flip) {
          for (int x = 0; x < cfg.crop_w; ++x) dst[x] = src[cfg.crop_w - 1 - x];
        } else {
          std::memcpy(dst, src, static_cast<std::size_t>(cfg.crop_w) * 4);
        }
      }
    }
  }
  return mb;
}

std::vector<RawBatch> batch_stream(std::uint32_t n, int batch_size, int shard_k,
                                   int shard_count, std::uint64_t epoch_seed) {
  if (batch_size < 1) throw std::invalid_argument("batch_size must be >= 1");
  if (shard_count < 1 || shard_k < 0 || shard_k >= shard_count)
    throw std::invalid_argument("shard " + std::to_string(shard_k) + " of " +
                                std::to_string(shard_count) + " is invalid");
  if (n < static_cast<std::uint32_t>(batch_size) * shard_count)
    throw std::invalid_argument("dataset of " + std::to_string(n) +
                                " images too small for batch " + std::to_string(batch_size) +
                                " across " + std::to_string(shard_count) + " shards");
  std::vector<std::uint32_t> perm(n);
  std::iota(perm.begin(), perm.end(), 0u);
  std::mt19937_64 rng(epoch_seed);
  std::shuffle(perm.begin(), perm.end(), rng);

  // Per-epoch global batch count, truncated to a multiple of shard_count.
  const std::int64_t global_batches =
      (static_cast<std::int64_t>(n) / (static_cast<std::int64_t>(batch_size) * shard_count)) *
      shard_count;
  std::vector<RawBatch> out;
  std::int64_t seq = 0;
  for (std::int64_t g = shard_k; g < global_batches; g += shard_count, ++seq) {
    RawBatch rb;
    rb.sequence_index = seq;
    rb.start_ordinal = g * batch_size;
    rb.indices.assign(perm.begin() + rb.start_ordinal,
                      perm.begin() + rb.start_ordinal + batch_size);
    out.push_back(std::move(rb));
  }
  return out;
}

namespace {
std::atomic<int> g_live_workers{0};
}

PrefetchHandle::PrefetchHandle(Producer produce) {
  worker_ = std::thread([this, p = std::move(produce)]() mutable { run(std::move(p)); });
}

void PrefetchHandle::run(Producer produce) {
  ++g_live_workers;
  for (;;) {
    std::optional<Minibatch> batch;
    try {
      batch = produce();
    } catch (...) {
      std::lock_guard lock(mu_);
      error_ = std::current_exception();
      done_ = true;
      slot_filled_.notify_all();
      break;
    }
    std::unique_lock lock(mu_);
    slot_taken_.wait(lock, [this] { return !slot_.has_value() || stop_; });
    if (stop_) break;
    if (!batch.has_value()) {
      done_ = true;
      slot_filled_.notify_all();
      break;
    }
    slot_ = std::move(batch);
    slot_filled_.notify_all();
  }
  --g_live_workers;
}

std::optional<Minibatch> PrefetchHandle::next() {
  std::unique_lock lock(mu_);
  slot_filled_.wait(lock, [this] { return slot_.has_value() || done_; });
  if (slot_.has_value()) {
    std::optional<Minibatch> out = std::move(slot_);
    slot_.reset();
    slot_taken_.notify_all();
    return out;
  }
  if (error_) std::rethrow_exception(error_);
  return std::nullopt;
}

PrefetchHandle::~PrefetchHandle() {
  {
    std::lock_guard lock(mu_);
    stop_ = true;
    slot_taken_.notify_all();
  }
  if (worker_.joinable()) worker_.join();
}

int PrefetchHandle::live_workers() { return g_live_workers.load(); }

std::unique_ptr<PrefetchHandle> spawn_prefetcher(const RawDataset& ds,
                                                 std::vector<RawBatch> stream,
                                                 const MeanImage& mean,
                                                 const PreprocConfig& cfg,
                                                 std::uint64_t rng_base) {
  auto cursor = std::make_shared<std::size_t>(0);
  auto batches = std::make_shared<std::vector<RawBatch>>(std::move(stream));
  return std::make_unique<PrefetchHandle>(
      [&ds, &mean, cfg, rng_base, cursor, batches]() -> std::optional<Minibatch> {
        if (*cursor >= batches->size()) return std::nullopt;
        const RawBatch& rb = (*batches)[(*cursor)++];
        return preprocess(ds, rb.indices, mean, cfg,
                          rng_base + static_cast<std::uint64_t>(rb.start_ordinal),
                          rb.sequence_index);
      });
}

}  // namespace ptrain
