#include "ptrain/bench.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <sstream>
#include <thread>

namespace ptrain {

namespace {

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.6g", v);
  return buf;
}

}  // namespace

std::vector<TimingRecord> run_benchmark(const std::vector<BenchConfig>& matrix,
                                        const NetworkSpec& spec, const RawDataset& ds,
                                        const MeanImage& mean, const PreprocConfig& preproc,
                                        std::uint64_t seed) {
  // Reject any bad config before the first timed run.
  for (const BenchConfig& cfg : matrix) {
    if (cfg.workers < 1) throw std::invalid_argument("bench config: workers must be >= 1");
    if (cfg.global_batch % cfg.workers != 0)
      throw std::invalid_argument("bench config: global batch " +
                                  std::to_string(cfg.global_batch) + " not divisible by " +
                                  std::to_string(cfg.workers) + " workers");
    if (cfg.repetitions < 3)
      throw std::invalid_argument("bench config: repetitions must be >= 3");
    if (cfg.iterations < 1) throw std::invalid_argument("bench config: iterations must be >= 1");
    (void)batch_stream(ds.n, cfg.global_batch / cfg.workers, 0, cfg.workers, 0);
  }

  std::vector<TimingRecord> records;
  records.reserve(matrix.size());
  for (const BenchConfig& cfg : matrix) {
    TrainOptions opt;
    opt.workers = cfg.workers;
    opt.per_replica_batch = cfg.global_batch / cfg.workers;
    opt.iterations = cfg.iterations;
    opt.parallel_loading = cfg.parallel_loading;
    opt.transport = cfg.transport;
    opt.seed = seed;
    opt.preproc = preproc;
    opt.warmup_iterations = cfg.warmup;

    std::vector<double> times;
    SyncReport last_sync;
    for (int rep = 0; rep < cfg.repetitions; ++rep) {
      TrainResult r = train_replicated(spec, ds, mean, opt);
      times.push_back(r.loop_seconds * 20.0 / cfg.iterations);
      last_sync = r.sync;
    }
    TimingRecord rec;
    rec.config = cfg;
    rec.seconds_per_20 = median(times);
    rec.images_per_sec = 20.0 * cfg.global_batch / rec.seconds_per_20;
    rec.spread_seconds =
        *std::max_element(times.begin(), times.end()) -
        *std::min_element(times.begin(), times.end());
    rec.sync = last_sync;
    records.push_back(rec);
  }
  return records;
}

double run_stub_pipeline(const WorkloadStub& stub, int iterations, bool parallel) {
  int remaining = iterations;
  auto produce = [&stub, remaining]() mutable -> std::optional<Minibatch> {
    if (remaining-- <= 0) return std::nullopt;
    std::this_thread::sleep_for(stub.load_per_batch);
    Minibatch mb;
    mb.images = Tensor(1, 1, 1, 1);
    return mb;
  };

  const auto t0 = std::chrono::steady_clock::now();
  if (parallel) {
    PrefetchHandle handle(produce);
    while (handle.next().has_value()) std::this_thread::sleep_for(stub.compute_per_batch);
  } else {
    while (produce().has_value()) std::this_thread::sleep_for(stub.compute_per_batch);
  }
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

double run_stub_replicated(const WorkloadStub& stub, int workers, int iterations,
                           TransportMode transport) {
  if (workers < 1) throw std::invalid_argument("workers must be >= 1");
  NetworkSpec tiny(Shape3{1, 2, 2},
                   {LayerSpec::make_flatten(), LayerSpec::make_dense(2),
                    LayerSpec::make_softmax(2)});
  ExchangeGroup group(workers, transport, &tiny);
  SyncBarrier start_gate(workers + 1, std::chrono::milliseconds(30000));
  SyncBarrier end_gate(workers + 1, std::chrono::milliseconds(30000));

  // Per-replica compute shrinks with K: the global batch is fixed and split.
  const auto compute = stub.compute_per_batch / workers;

  std::vector<std::thread> threads;
  threads.reserve(workers);
  for (int k = 0; k < workers; ++k) {
    threads.emplace_back([&, k] {
      ParamState state = init_params(tiny, 1);
      std::this_thread::sleep_for(stub.setup_delay);
      start_gate.arrive_and_wait(k);
      for (int it = 0; it < iterations; ++it) {
        std::this_thread::sleep_for(compute);
        group.exchange_and_average(state, k);
      }
      end_gate.arrive_and_wait(k);
    });
  }

  start_gate.arrive_and_wait(workers);
  const auto t0 = std::chrono::steady_clock::now();
  end_gate.arrive_and_wait(workers);
  const double dt =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  for (std::thread& t : threads) t.join();
  return dt;
}

std::string render_table(const std::vector<TimingRecord>& records) {
  std::ostringstream os;
  os << "Training time per 20 iterations (sec)\n";
  // Column per distinct (workers, transport, global_batch) configuration.
  struct Col {
    int workers;
    TransportMode transport;
    int global_batch;
  };
  std::vector<Col> cols;
  for (const TimingRecord& r : records) {
    const bool seen = std::any_of(cols.begin(), cols.end(), [&](const Col& c) {
      return c.workers == r.config.workers && c.transport == r.config.transport &&
             c.global_batch == r.config.global_batch;
    });
    if (!seen) cols.push_back({r.config.workers, r.config.transport, r.config.global_batch});
  }
  os << "parallel-loading";
  for (const Col& c : cols)
    os << "\t" << c.workers << "w/" << transport_name(c.transport) << "/b" << c.global_batch;
  os << "\n";
  for (const char* loading : {"yes", "no"}) {
    const bool want = loading[0] == 'y';
    os << loading;
    for (const Col& c : cols) {
      os << "\t";
      auto it = std::find_if(records.begin(), records.end(), [&](const TimingRecord& r) {
        return r.config.parallel_loading == want && r.config.workers == c.workers &&
               r.config.transport == c.transport && r.config.global_batch == c.global_batch;
      });
      os << (it == records.end() ? "-" : fmt(it->seconds_per_20));
    }
    os << "\n";
  }
  return os.str();
}

static const char* kCsvHeader =
    "workers,parallel_loading,transport,global_batch,iters,seconds_per_20,images_per_sec";

std::string render_csv(const std::vector<TimingRecord>& records) {
  std::ostringstream os;
  os << kCsvHeader << "\n";
  for (const TimingRecord& r : records) {
    os << r.config.workers << "," << (r.config.parallel_loading ? "yes" : "no") << ","
       << transport_name(r.config.transport) << "," << r.config.global_batch << ","
       << r.config.iterations << "," << fmt(r.seconds_per_20) << ","
       << fmt(r.images_per_sec) << "\n";
  }
  return os.str();
}

std::vector<TimingRecord> parse_csv(const std::string& text) {
  std::istringstream is(text);
  std::string line;
  if (!std::getline(is, line) || line != kCsvHeader)
    throw std::runtime_error("bad CSV header: expected '" + std::string(kCsvHeader) + "'");
  std::vector<TimingRecord> records;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string field;
    std::vector<std::string> fields;
    while (std::getline(ls, field, ',')) fields.push_back(field);
    if (fields.size() != 7)
      throw std::runtime_error("bad CSV row (expected 7 fields): " + line);
    TimingRecord r;
    r.config.workers = std::stoi(fields[0]);
    if (fields[1] != "yes" && fields[1] != "no")
      throw std::runtime_error("bad parallel_loading value: " + fields[1]);
    r.config.parallel_loading = fields[1] == "yes";
    r.config.transport = transport_from_name(fields[2]);
    r.config.global_batch = std::stoi(fields[3]);
    r.config.iterations = std::stoi(fields[4]);
    r.seconds_per_20 = std::stod(fields[5]);
    r.images_per_sec = std::stod(fields[6]);
    records.push_back(r);
  }
  return records;
}

}  // namespace ptrain
