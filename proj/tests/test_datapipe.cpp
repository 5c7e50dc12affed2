#include <cmath>
#include <algorithm>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>
#include <thread>

#include "doctest.h"
#include "ptrain/datapipe.hpp"

using namespace ptrain;

namespace {

std::string temp_path(const char* name) {
  return (std::filesystem::temp_directory_path() / name).string();
}

RawDataset small_dataset(std::uint64_t seed = 1) {
  return generate_synthetic(16, 4, 2, 6, 6, seed);
}

}  // namespace

TEST_CASE("dataset file round trip is bit-identical") {
  RawDataset ds = small_dataset();
  const std::string path = temp_path("ptrain_ds_roundtrip.pds");
  write_dataset(path, ds);
  RawDataset back = read_dataset(path);
  CHECK(back.n == ds.n);
  CHECK(back.c == ds.c);
  CHECK(back.h == ds.h);
  CHECK(back.w == ds.w);
  CHECK(back.classes == ds.classes);
  CHECK(back.pixels == ds.pixels);
  CHECK(back.labels == ds.labels);
  std::filesystem::remove(path);
}

TEST_CASE("dataset format errors name the failing field") {
  RawDataset ds = small_dataset();
  const std::string path = temp_path("ptrain_ds_corrupt.pds");
  write_dataset(path, ds);

  SUBCASE("corrupted magic") {
    std::fstream f(path, std::ios::binary | std::ios::in | std::ios::out);
    f.write("XXXX", 4);
    f.close();
    try {
      read_dataset(path);
      FAIL("expected format error");
    } catch (const std::runtime_error& e) {
      CHECK(std::string(e.what()).find("magic") != std::string::npos);
    }
  }
  SUBCASE("truncated file") {
    std::filesystem::resize_file(path, std::filesystem::file_size(path) - 8);
    CHECK_THROWS_AS(read_dataset(path), std::runtime_error);
  }
  SUBCASE("header n inconsistent with file length") {
    std::fstream f(path, std::ios::binary | std::ios::in | std::ios::out);
    f.seekp(8);  // n field: magic(4) + version(4)
    const std::uint32_t bogus = ds.n + 3;
    f.write(reinterpret_cast<const char*>(&bogus), 4);
    f.close();
    CHECK_THROWS_AS(read_dataset(path), std::runtime_error);
  }
  std::filesystem::remove(path);
}

TEST_CASE("mean image file round trip") {
  RawDataset ds = small_dataset();
  MeanImage m = compute_mean_image(ds);
  const std::string path = temp_path("ptrain_mean_roundtrip.pdm");
  write_mean_image(path, m);
  MeanImage back = read_mean_image(path);
  CHECK(back.c == m.c);
  CHECK(back.h == m.h);
  CHECK(back.w == m.w);
  CHECK(back.values == m.values);
  std::filesystem::remove(path);
}

TEST_CASE("generate_synthetic determinism and balance") {
  RawDataset a = generate_synthetic(100, 10, 2, 4, 4, 7);
  RawDataset b = generate_synthetic(100, 10, 2, 4, 4, 7);
  CHECK(a.pixels == b.pixels);
  CHECK(a.labels == b.labels);

  std::vector<int> counts(10, 0);
  for (std::uint32_t l : a.labels) ++counts[l];
  for (int c : counts) CHECK(c == 10);

  RawDataset c = generate_synthetic(100, 10, 2, 4, 4, 8);
  CHECK(a.pixels != c.pixels);

  CHECK_THROWS_AS(generate_synthetic(0, 10, 2, 4, 4, 7), std::invalid_argument);
}

TEST_CASE("synthetic data is learnable by nearest class mean") {
  RawDataset ds = generate_synthetic(400, 10, 3, 8, 8, 13);
  const std::size_t img = static_cast<std::size_t>(ds.c) * ds.h * ds.w;

  // per-class mean over the first half; classify the second half
  std::vector<std::vector<double>> means(10, std::vector<double>(img, 0.0));
  std::vector<int> counts(10, 0);
  for (std::uint32_t i = 0; i < 200; ++i) {
    const int l = static_cast<int>(ds.labels[i]);
    ++counts[l];
    for (std::size_t p = 0; p < img; ++p)
      means[l][p] += ds.pixels[static_cast<std::size_t>(i) * img + p];
  }
  for (int l = 0; l < 10; ++l)
    for (double& v : means[l]) v /= counts[l];

  int correct = 0;
  for (std::uint32_t i = 200; i < 400; ++i) {
    double best = 1e300;
    int best_l = -1;
    for (int l = 0; l < 10; ++l) {
      double d = 0.0;
      for (std::size_t p = 0; p < img; ++p) {
        const double diff = ds.pixels[static_cast<std::size_t>(i) * img + p] - means[l][p];
        d += diff * diff;
      }
      if (d < best) {
        best = d;
        best_l = l;
      }
    }
    if (best_l == static_cast<int>(ds.labels[i])) ++correct;
  }
  CHECK(correct > 180);  // > 90%
}

TEST_CASE("compute_mean_image") {
  RawDataset one;
  one.n = 1;
  one.c = 1;
  one.h = 2;
  one.w = 2;
  one.classes = 1;
  one.pixels = {10, 20, 30, 40};
  one.labels = {0};
  MeanImage m = compute_mean_image(one);
  CHECK(m.values == std::vector<float>{10, 20, 30, 40});

  RawDataset two = one;
  two.n = 2;
  two.pixels = {10, 20, 30, 40, 20, 40, 60, 80};
  two.labels = {0, 0};
  m = compute_mean_image(two);
  CHECK(m.values == std::vector<float>{15, 30, 45, 60});

  // random dataset vs naive accumulation within 1e-3
  RawDataset ds = small_dataset();
  MeanImage mm = compute_mean_image(ds);
  const std::size_t img = static_cast<std::size_t>(ds.c) * ds.h * ds.w;
  for (std::size_t p = 0; p < img; ++p) {
    double acc = 0.0;
    for (std::uint32_t i = 0; i < ds.n; ++i)
      acc += ds.pixels[static_cast<std::size_t>(i) * img + p];
    CHECK(std::fabs(mm.values[p] - acc / ds.n) <= 1e-3);
  }
}

TEST_CASE("preprocess full crop, no augmentation: output = image - mean") {
  RawDataset ds = small_dataset();
  MeanImage mean = compute_mean_image(ds);
  PreprocConfig cfg;
  cfg.crop_h = ds.h;
  cfg.crop_w = ds.w;
  cfg.augment = false;
  std::vector<std::uint32_t> indices = {3};
  Minibatch mb = preprocess(ds, indices, mean, cfg, 0);
  const std::size_t img = static_cast<std::size_t>(ds.c) * ds.h * ds.w;
  for (std::size_t p = 0; p < img; ++p)
    CHECK(mb.images.data[p] ==
          static_cast<float>(ds.pixels[3 * img + p]) - mean.values[p]);
  CHECK(mb.labels[0] == static_cast<int>(ds.labels[3]));
}

TEST_CASE("preprocess flip is an exact mirror (involution)") {
  RawDataset ds = small_dataset();
  MeanImage mean = compute_mean_image(ds);
  mean.values.assign(mean.values.size(), 0.0f);  // identity subtraction
  PreprocConfig cfg;
  cfg.crop_h = ds.h;
  cfg.crop_w = ds.w;
  cfg.augment = true;
  const std::size_t img = static_cast<std::size_t>(ds.c) * ds.h * ds.w;

  bool saw_flip = false, saw_plain = false;
  for (std::uint64_t state = 0; state < 64 && !(saw_flip && saw_plain); ++state) {
    std::vector<std::uint32_t> indices = {0};
    Minibatch mb = preprocess(ds, indices, mean, cfg, state);
    // full crop: output is either the image or its horizontal mirror
    bool is_plain = true, is_mirror = true;
    for (std::uint32_t c = 0; c < ds.c; ++c)
      for (std::uint32_t y = 0; y < ds.h; ++y)
        for (std::uint32_t x = 0; x < ds.w; ++x) {
          const float v = mb.images.at(0, c, y, x);
          const float plain = ds.pixels[(c * ds.h + y) * ds.w + x];
          const float mirror = ds.pixels[(c * ds.h + y) * ds.w + (ds.w - 1 - x)];
          if (v != plain) is_plain = false;
          if (v != mirror) is_mirror = false;
        }
    CHECK((is_plain || is_mirror));
    saw_flip = saw_flip || (is_mirror && !is_plain);
    saw_plain = saw_plain || is_plain;
  }
  CHECK(saw_flip);
  CHECK(saw_plain);
  (void)img;
}

TEST_CASE("preprocess determinism and crop bounds") {
  RawDataset ds = small_dataset();
  MeanImage mean = compute_mean_image(ds);
  PreprocConfig cfg;
  cfg.crop_h = 4;
  cfg.crop_w = 4;
  std::vector<std::uint32_t> indices = {0, 5, 9};
  Minibatch a = preprocess(ds, indices, mean, cfg, 12345, 3);
  Minibatch b = preprocess(ds, indices, mean, cfg, 12345, 3);
  CHECK(a.images.data == b.images.data);
  CHECK(a.labels == b.labels);
  CHECK(a.sequence_index == 3);
  CHECK(a.images.h == 4);
  CHECK(a.images.w == 4);

  Minibatch c = preprocess(ds, indices, mean, cfg, 54321);
  CHECK(a.images.data != c.images.data);

  cfg.crop_h = 99;
  CHECK_THROWS_AS(preprocess(ds, indices, mean, cfg, 0), std::invalid_argument);
}

TEST_CASE("batch_stream sharding") {
  SUBCASE("K=1 covers the permutation") {
    auto stream = batch_stream(64, 8, 0, 1, 99);
    CHECK(stream.size() == 8);
    std::set<std::uint32_t> seen;
    for (const RawBatch& b : stream) {
      CHECK(b.indices.size() == 8);
      seen.insert(b.indices.begin(), b.indices.end());
    }
    CHECK(seen.size() == 64);
  }
  SUBCASE("K=2 shards are disjoint and union the K=1 stream") {
    auto full = batch_stream(64, 8, 0, 1, 99);
    auto s0 = batch_stream(64, 8, 0, 2, 99);
    auto s1 = batch_stream(64, 8, 1, 2, 99);
    CHECK(s0.size() == 4);
    CHECK(s1.size() == 4);
    std::set<std::uint32_t> u0, u1, all;
    for (const RawBatch& b : s0) u0.insert(b.indices.begin(), b.indices.end());
    for (const RawBatch& b : s1) u1.insert(b.indices.begin(), b.indices.end());
    for (std::uint32_t v : u0) CHECK(u1.count(v) == 0);
    all.insert(u0.begin(), u0.end());
    all.insert(u1.begin(), u1.end());
    std::set<std::uint32_t> fullset;
    for (const RawBatch& b : full) fullset.insert(b.indices.begin(), b.indices.end());
    CHECK(all == fullset);

    // start ordinals interleave: shard k owns global batches == k (mod 2)
    CHECK(s0[0].start_ordinal == 0);
    CHECK(s1[0].start_ordinal == 8);
    CHECK(s0[1].start_ordinal == 16);
  }
  SUBCASE("remainder dropped, equal shard sizes") {
    // n=1000, batch 128, K=2: floor(1000/256) = 3 batches per shard
    auto s0 = batch_stream(1000, 128, 0, 2, 1);
    auto s1 = batch_stream(1000, 128, 1, 2, 1);
    CHECK(s0.size() == 3);
    CHECK(s1.size() == 3);
    std::size_t consumed = 0;
    for (const RawBatch& b : s0) consumed += b.indices.size();
    for (const RawBatch& b : s1) consumed += b.indices.size();
    CHECK(consumed == 768);  // 232 images dropped
  }
  SUBCASE("errors") {
    CHECK_THROWS_AS(batch_stream(10, 8, 0, 2, 1), std::invalid_argument);
    CHECK_THROWS_AS(batch_stream(64, 8, 2, 2, 1), std::invalid_argument);
  }
}

TEST_CASE("prefetch transparency: identical sequence to inline loading") {
  RawDataset ds = generate_synthetic(64, 4, 2, 8, 8, 3);
  MeanImage mean = compute_mean_image(ds);
  PreprocConfig cfg;
  cfg.crop_h = 6;
  cfg.crop_w = 6;
  for (std::uint64_t seed : {1ull, 2ull, 3ull}) {
    auto stream = batch_stream(ds.n, 8, 0, 1, seed);
    std::vector<Minibatch> inline_batches;
    for (const RawBatch& rb : stream)
      inline_batches.push_back(preprocess(ds, rb.indices, mean, cfg,
                                          seed + static_cast<std::uint64_t>(rb.start_ordinal),
                                          rb.sequence_index));

    auto handle = spawn_prefetcher(ds, stream, mean, cfg, seed);
    std::size_t i = 0;
    while (auto mb = handle->next()) {
      REQUIRE(i < inline_batches.size());
      CHECK(mb->images.data == inline_batches[i].images.data);
      CHECK(mb->labels == inline_batches[i].labels);
      CHECK(mb->sequence_index == inline_batches[i].sequence_index);
      ++i;
    }
    CHECK(i == inline_batches.size());
  }
}

TEST_CASE("prefetcher is never more than one batch ahead") {
  std::atomic<int> produced{0};
  int consumed = 0;
  PrefetchHandle handle([&]() -> std::optional<Minibatch> {
    if (produced.load() >= 12) return std::nullopt;
    ++produced;
    Minibatch mb;
    mb.images = Tensor(1, 1, 1, 1);
    mb.sequence_index = produced.load() - 1;
    return mb;
  });
  while (auto mb = handle.next()) {
    ++consumed;
    // at most: `consumed` handed over + 1 in the slot + 1 being produced
    CHECK(produced.load() <= consumed + 2);
    std::this_thread::sleep_for(std::chrono::milliseconds(1));
  }
  CHECK(consumed == 12);
}

TEST_CASE("prefetcher propagates loader failure") {
  PrefetchHandle handle([]() -> std::optional<Minibatch> {
    throw std::runtime_error("disk on fire");
  });
  CHECK_THROWS_WITH_AS(handle.next(), "disk on fire", std::runtime_error);
}

TEST_CASE("dropping the handle mid-stream terminates the worker") {
  const int before = PrefetchHandle::live_workers();
  {
    PrefetchHandle handle([]() -> std::optional<Minibatch> {
      Minibatch mb;
      mb.images = Tensor(1, 1, 1, 1);
      return mb;  // endless stream
    });
    (void)handle.next();
    (void)handle.next();
  }
  // worker must have exited by the time the destructor returns
  CHECK(PrefetchHandle::live_workers() == before);
}
