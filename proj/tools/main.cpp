// ptrain command line: synthetic data generation, replicated training,
// benchmarking and evaluation.

#include <cstdint>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "ptrain/bench.hpp"
#include "ptrain/datapipe.hpp"
#include "ptrain/model.hpp"
#include "ptrain/replicasync.hpp"

namespace {

// Usage problems discovered after flag parsing (still exit code 2).
struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

std::uint64_t fnv1a(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open " + path);
  std::uint64_t h = 0xCBF29CE484222325ull;
  char buf[1 << 16];
  while (f.read(buf, sizeof(buf)) || f.gcount() > 0) {
    for (std::streamsize i = 0; i < f.gcount(); ++i) {
      h ^= static_cast<std::uint8_t>(buf[i]);
      h *= 0x100000001B3ull;
    }
    if (!f) break;
  }
  return h;
}

std::string hex64(std::uint64_t h) {
  char out[32];
  std::snprintf(out, sizeof(out), "%016llx", static_cast<unsigned long long>(h));
  return out;
}

void parse_size(const std::string& s, std::uint32_t& c, std::uint32_t& h, std::uint32_t& w) {
  unsigned uc, uh, uw;
  char extra;
  if (std::sscanf(s.c_str(), "%u:%u:%u%c", &uc, &uh, &uw, &extra) != 3 || uc == 0 ||
      uh == 0 || uw == 0)
    throw UsageError("--size must be c:h:w with positive extents, got '" + s + "'");
  c = uc;
  h = uh;
  w = uw;
}

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::istringstream is(s);
  std::string part;
  while (std::getline(is, part, sep)) out.push_back(part);
  return out;
}

void write_file(const std::string& path, const void* data, std::size_t len) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("cannot open " + path + " for writing");
  f.write(static_cast<const char*>(data), static_cast<std::streamsize>(len));
  if (!f) throw std::runtime_error("write failed for " + path);
}

struct CommonModelFlags {
  double width_scale = 0.25;
  int crop = 32;
};

ptrain::NetworkSpec build_net(const ptrain::RawDataset& ds, const CommonModelFlags& mf) {
  return ptrain::build_alexnet_scaled(
      ptrain::Shape3{static_cast<int>(ds.c), mf.crop, mf.crop},
      static_cast<int>(ds.classes), static_cast<float>(mf.width_scale));
}

int cmd_gen_data(const std::string& out, std::uint32_t n, std::uint32_t classes,
                 const std::string& size, std::uint64_t seed) {
  std::uint32_t c, h, w;
  parse_size(size, c, h, w);
  if (n == 0) throw UsageError("--n must be >= 1");
  if (classes == 0) throw UsageError("--classes must be >= 1");
  std::cout << "gen-data: out=" << out << " n=" << n << " classes=" << classes
            << " size=" << c << ":" << h << ":" << w << " seed=" << seed << "\n";
  ptrain::RawDataset ds = ptrain::generate_synthetic(n, classes, c, h, w, seed);
  ptrain::write_dataset(out, ds);
  ptrain::MeanImage mean = ptrain::compute_mean_image(ds);
  ptrain::write_mean_image(out + ".mean", mean);
  std::cout << "dataset " << out << " digest=" << hex64(fnv1a(out)) << "\n";
  std::cout << "mean    " << out << ".mean digest=" << hex64(fnv1a(out + ".mean")) << "\n";
  return 0;
}

int cmd_train(const std::string& data, const std::string& mean_path, int workers, int batch,
              int iters, const std::string& parallel_load, const std::string& transport,
              double lr, double momentum, std::uint64_t seed, const CommonModelFlags& mf,
              const std::string& out_params, const std::string& trace) {
  if (workers < 1) throw UsageError("--workers must be >= 1");
  if (batch < 1) throw UsageError("--batch must be >= 1");
  if (batch % workers != 0)
    throw UsageError("--batch " + std::to_string(batch) + " not divisible by --workers " +
                     std::to_string(workers));
  if (parallel_load != "on" && parallel_load != "off")
    throw UsageError("--parallel-load must be on|off");

  ptrain::TrainOptions opt;
  opt.workers = workers;
  opt.per_replica_batch = batch / workers;
  opt.iterations = iters;
  opt.parallel_loading = parallel_load == "on";
  opt.transport = ptrain::transport_from_name(transport);
  opt.hyper.learning_rate = static_cast<float>(lr);
  opt.hyper.momentum = static_cast<float>(momentum);
  opt.seed = seed;
  opt.preproc.crop_h = opt.preproc.crop_w = mf.crop;
  opt.preproc.aug_seed = seed;

  std::cout << "train: data=" << data << " mean=" << mean_path << " workers=" << workers
            << " batch=" << batch << " (per-replica " << opt.per_replica_batch << ")"
            << " iters=" << iters << " parallel-load=" << parallel_load
            << " transport=" << transport << " lr=" << lr << " momentum=" << momentum
            << " seed=" << seed << " width-scale=" << mf.width_scale << " crop=" << mf.crop
            << " out-params=" << (out_params.empty() ? "(none)" : out_params)
            << " trace=" << (trace.empty() ? "(none)" : trace) << "\n";

  ptrain::RawDataset ds = ptrain::read_dataset(data);
  ptrain::MeanImage mean = ptrain::read_mean_image(mean_path);
  ptrain::NetworkSpec spec = build_net(ds, mf);

  ptrain::TrainResult result = ptrain::train_replicated(spec, ds, mean, opt);

  if (!trace.empty()) {
    std::ofstream tf(trace, std::ios::trunc);
    if (!tf) throw std::runtime_error("cannot open " + trace + " for writing");
    for (float loss : result.loss_trace) tf << loss << "\n";
  }
  if (!out_params.empty()) {
    const std::vector<std::uint8_t> wire = ptrain::flatten_state(result.params);
    write_file(out_params, wire.data(), wire.size());
  }
  std::cout << "final loss " << result.loss_trace.back() << " after " << iters
            << " iterations; loop " << result.loop_seconds << " s; sync rounds "
            << result.sync.rounds << ", " << result.sync.bytes_per_round
            << " bytes/round, mean exchange " << result.sync.mean_latency_s * 1e3
            << " ms\n";
  return 0;
}

int cmd_bench(const std::string& data, const std::string& mean_path, const std::string& grid,
              int batch, int iters, int reps, int warmup, std::uint64_t seed,
              const CommonModelFlags& mf, const std::string& out_csv) {
  // grid: "<workers-list>;<loading-list>;<transport-list>", e.g. "1,2;yes,no;direct"
  const std::vector<std::string> dims = split(grid, ';');
  if (dims.size() != 3)
    throw UsageError("--grid must be 'workers;loading;transport', e.g. '1,2;yes,no;direct'");
  std::vector<ptrain::BenchConfig> matrix;
  for (const std::string& ws : split(dims[0], ',')) {
    for (const std::string& ls : split(dims[1], ',')) {
      if (ls != "yes" && ls != "no") throw UsageError("loading values must be yes|no");
      for (const std::string& ts : split(dims[2], ',')) {
        ptrain::BenchConfig cfg;
        cfg.workers = std::stoi(ws);
        cfg.parallel_loading = ls == "yes";
        cfg.transport = ptrain::transport_from_name(ts);
        cfg.global_batch = batch;
        cfg.iterations = iters;
        cfg.repetitions = reps;
        cfg.warmup = warmup;
        matrix.push_back(cfg);
      }
    }
  }
  std::cout << "bench: data=" << data << " grid=" << grid << " batch=" << batch
            << " iters=" << iters << " reps=" << reps << " warmup=" << warmup
            << " seed=" << seed << " out-csv=" << (out_csv.empty() ? "(none)" : out_csv)
            << "\n";

  ptrain::RawDataset ds = ptrain::read_dataset(data);
  ptrain::MeanImage mean = ptrain::read_mean_image(mean_path);
  ptrain::NetworkSpec spec = build_net(ds, mf);
  ptrain::PreprocConfig preproc;
  preproc.crop_h = preproc.crop_w = mf.crop;
  preproc.aug_seed = seed;

  const std::vector<ptrain::TimingRecord> records =
      ptrain::run_benchmark(matrix, spec, ds, mean, preproc, seed);
  std::cout << ptrain::render_table(records);
  for (const ptrain::TimingRecord& r : records)
    std::cout << "  " << r.config.workers << "w " << (r.config.parallel_loading ? "yes" : "no")
              << " " << ptrain::transport_name(r.config.transport) << ": median "
              << r.seconds_per_20 << " s/20it, spread " << r.spread_seconds << " s, "
              << r.images_per_sec << " img/s\n";
  const std::string csv = ptrain::render_csv(records);
  if (!out_csv.empty()) write_file(out_csv, csv.data(), csv.size());
  return 0;
}

int cmd_eval(const std::string& data, const std::string& mean_path,
             const std::string& params_path, const CommonModelFlags& mf, int batch) {
  std::cout << "eval: data=" << data << " mean=" << mean_path << " params=" << params_path
            << " width-scale=" << mf.width_scale << " crop=" << mf.crop << " batch=" << batch
            << "\n";
  ptrain::RawDataset ds = ptrain::read_dataset(data);
  ptrain::MeanImage mean = ptrain::read_mean_image(mean_path);
  ptrain::NetworkSpec spec = build_net(ds, mf);

  std::ifstream pf(params_path, std::ios::binary);
  if (!pf) throw std::runtime_error("cannot open " + params_path);
  std::vector<std::uint8_t> wire((std::istreambuf_iterator<char>(pf)),
                                 std::istreambuf_iterator<char>());
  ptrain::ParamState params = ptrain::unflatten_state(wire, spec);

  ptrain::PreprocConfig preproc;
  preproc.crop_h = preproc.crop_w = mf.crop;
  preproc.augment = false;  // center crop, no flip

  std::int64_t n1 = 0, n5 = 0, total = 0;
  std::vector<std::uint32_t> indices;
  for (std::uint32_t at = 0; at < ds.n; at += batch) {
    indices.clear();
    for (std::uint32_t i = at; i < std::min(ds.n, at + batch); ++i) indices.push_back(i);
    ptrain::Minibatch mb = ptrain::preprocess(ds, indices, mean, preproc, 0, 0);
    ptrain::Tensor logits = ptrain::forward_logits(spec, params, mb.images);
    ptrain::TopKErrors err = ptrain::top_errors(logits, mb.labels);
    n1 += static_cast<std::int64_t>(err.top1 * mb.labels.size() + 0.5);
    n5 += static_cast<std::int64_t>(err.top5 * mb.labels.size() + 0.5);
    total += static_cast<std::int64_t>(mb.labels.size());
  }
  const double top1 = 100.0 * n1 / total, top5 = 100.0 * n5 / total;
  std::printf("top-1 error: %.2f%%\n", top1);
  std::printf("top-5 error: %.2f%%\n", top5);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"data-parallel ConvNet training engine"};
  app.require_subcommand(1);

  // gen-data
  auto* gen = app.add_subcommand("gen-data", "generate a synthetic dataset + mean image");
  std::string gen_out = "data.pds";
  std::uint32_t gen_n = 1280, gen_classes = 10;
  std::string gen_size = "3:40:40";
  std::uint64_t gen_seed = 0;
  gen->add_option("--out", gen_out, "output dataset path (mean image at <out>.mean)")
      ->capture_default_str();
  gen->add_option("--n", gen_n, "image count")->capture_default_str();
  gen->add_option("--classes", gen_classes, "class count")->capture_default_str();
  gen->add_option("--size", gen_size, "image extents c:h:w")->capture_default_str();
  gen->add_option("--seed", gen_seed, "generation seed")->capture_default_str();

  // train
  auto* train = app.add_subcommand("train", "replicated training run");
  std::string tr_data, tr_mean, tr_out_params, tr_trace;
  int tr_workers = 1, tr_batch = 64, tr_iters = 20;
  std::string tr_parallel = "on", tr_transport = "direct";
  double tr_lr = 0.01, tr_momentum = 0.9;
  std::uint64_t tr_seed = 0;
  CommonModelFlags tr_mf;
  train->add_option("--data", tr_data, "dataset path")->required();
  train->add_option("--mean", tr_mean, "mean image path (default <data>.mean)");
  train->add_option("--workers", tr_workers, "replica count K")->capture_default_str();
  train->add_option("--batch", tr_batch, "global batch size, split as B/K per replica")
      ->capture_default_str();
  train->add_option("--iters", tr_iters, "training iterations")->capture_default_str();
  train->add_option("--parallel-load", tr_parallel, "on|off")->capture_default_str();
  train->add_option("--transport", tr_transport, "direct|staged")->capture_default_str();
  train->add_option("--lr", tr_lr, "learning rate")->capture_default_str();
  train->add_option("--momentum", tr_momentum, "momentum coefficient")->capture_default_str();
  train->add_option("--seed", tr_seed, "init/shuffle/augmentation seed")->capture_default_str();
  train->add_option("--width-scale", tr_mf.width_scale, "network width multiplier")
      ->capture_default_str();
  train->add_option("--crop", tr_mf.crop, "crop size")->capture_default_str();
  train->add_option("--out-params", tr_out_params, "write final flattened state here");
  train->add_option("--trace", tr_trace, "write per-iteration loss trace here");

  // bench
  auto* bench = app.add_subcommand("bench", "timing grid (Table-1-style report)");
  std::string be_data, be_mean, be_grid = "1,2;yes,no;direct", be_csv;
  int be_batch = 64, be_iters = 20, be_reps = 3, be_warmup = 2;
  std::uint64_t be_seed = 0;
  CommonModelFlags be_mf;
  bench->add_option("--data", be_data, "dataset path")->required();
  bench->add_option("--mean", be_mean, "mean image path (default <data>.mean)");
  bench->add_option("--grid", be_grid, "'workers;loading;transport', e.g. '1,2;yes,no;direct'")
      ->capture_default_str();
  bench->add_option("--batch", be_batch, "global batch size")->capture_default_str();
  bench->add_option("--iters", be_iters, "iterations per trial")->capture_default_str();
  bench->add_option("--reps", be_reps, "trial repetitions (median reported)")
      ->capture_default_str();
  bench->add_option("--warmup", be_warmup, "warmup iterations per trial")->capture_default_str();
  bench->add_option("--seed", be_seed, "seed")->capture_default_str();
  bench->add_option("--width-scale", be_mf.width_scale, "network width multiplier")
      ->capture_default_str();
  bench->add_option("--crop", be_mf.crop, "crop size")->capture_default_str();
  bench->add_option("--out-csv", be_csv, "write machine-readable records here");

  // eval
  auto* eval = app.add_subcommand("eval", "top-1/top-5 error of saved parameters");
  std::string ev_data, ev_mean, ev_params;
  int ev_batch = 256;
  CommonModelFlags ev_mf;
  eval->add_option("--data", ev_data, "dataset path")->required();
  eval->add_option("--mean", ev_mean, "mean image path (default <data>.mean)");
  eval->add_option("--params", ev_params, "flattened-state file")->required();
  eval->add_option("--width-scale", ev_mf.width_scale, "network width multiplier")
      ->capture_default_str();
  eval->add_option("--crop", ev_mf.crop, "crop size")->capture_default_str();
  eval->add_option("--batch", ev_batch, "evaluation batch size")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    if (gen->parsed())
      return cmd_gen_data(gen_out, gen_n, gen_classes, gen_size, gen_seed);
    if (train->parsed())
      return cmd_train(tr_data, tr_mean.empty() ? tr_data + ".mean" : tr_mean, tr_workers,
                       tr_batch, tr_iters, tr_parallel, tr_transport, tr_lr, tr_momentum,
                       tr_seed, tr_mf, tr_out_params, tr_trace);
    if (bench->parsed())
      return cmd_bench(be_data, be_mean.empty() ? be_data + ".mean" : be_mean, be_grid,
                       be_batch, be_iters, be_reps, be_warmup, be_seed, be_mf, be_csv);
    if (eval->parsed())
      return cmd_eval(ev_data, ev_mean.empty() ? ev_data + ".mean" : ev_mean, ev_params,
                      ev_mf, ev_batch);
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
