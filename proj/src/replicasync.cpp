#include "ptrain/replicasync.hpp"

#include <algorithm>
#include <thread>

namespace ptrain {

const char* transport_name(TransportMode mode) {
  return mode == TransportMode::Direct ? "direct" : "staged";
}

TransportMode transport_from_name(const std::string& name) {
  if (name == "direct") return TransportMode::Direct;
  if (name == "staged") return TransportMode::Staged;
  throw std::invalid_argument("unknown transport '" + name + "' (direct|staged)");
}

SyncBarrier::SyncBarrier(int parties, std::chrono::milliseconds timeout)
    : parties_(parties), timeout_(timeout), arrived_(parties, false) {}

void SyncBarrier::arrive_and_wait(int id) {
  std::unique_lock lock(mu_);
  if (aborted_) throw ProtocolError(reason_);
  arrived_[id] = true;
  if (++count_ == parties_) {
    count_ = 0;
    std::fill(arrived_.begin(), arrived_.end(), false);
    ++gen_;
    cv_.notify_all();
    return;
  }
  const std::uint64_t my_gen = gen_;
  if (!cv_.wait_for(lock, timeout_, [&] { return gen_ != my_gen || aborted_; })) {
    std::string missing;
    for (int i = 0; i < parties_; ++i) {
      if (!arrived_[i]) {
        if (!missing.empty()) missing += ", ";
        missing += std::to_string(i);
      }
    }
    aborted_ = true;
    reason_ = "barrier timeout: replica(s) " + missing + " never arrived";
    cv_.notify_all();
    throw ProtocolError(reason_);
  }
  if (aborted_) throw ProtocolError(reason_);
}

void SyncBarrier::abort(const std::string& reason) {
  std::lock_guard lock(mu_);
  if (!aborted_) {
    aborted_ = true;
    reason_ = "group aborted: " + reason;
  }
  cv_.notify_all();
}

ExchangeGroup::ExchangeGroup(int k, TransportMode transport, const NetworkSpec* spec,
                             std::chrono::milliseconds timeout)
    : k_(k), transport_(transport), spec_(spec), barrier_(k, timeout), slots_(k),
      gen_(k) {
  if (k < 1) throw std::invalid_argument("exchange group needs K >= 1");
  if (transport_ == TransportMode::Staged && spec_ == nullptr)
    throw std::invalid_argument("staged transport needs the network spec to deserialize");
  for (auto& g : gen_) g.store(0);
}

void ExchangeGroup::abort(const std::string& reason) { barrier_.abort(reason); }

namespace {

void add_state(ParamState& acc, const ParamState& other) {
  for (std::size_t l = 0; l < acc.layers.size(); ++l) {
    LayerParams& a = acc.layers[l];
    const LayerParams& o = other.layers[l];
    for (std::size_t e = 0; e < a.weights.size(); ++e) a.weights.data[e] += o.weights.data[e];
    for (std::size_t e = 0; e < a.bias.size(); ++e) a.bias[e] += o.bias[e];
    for (std::size_t e = 0; e < a.w_mom.size(); ++e) a.w_mom.data[e] += o.w_mom.data[e];
    for (std::size_t e = 0; e < a.b_mom.size(); ++e) a.b_mom[e] += o.b_mom[e];
  }
}

void scale_state(ParamState& s, float factor) {
  for (LayerParams& p : s.layers) {
    for (float& v : p.weights.data) v *= factor;
    for (float& v : p.bias) v *= factor;
    for (float& v : p.w_mom.data) v *= factor;
    for (float& v : p.b_mom) v *= factor;
  }
}

}  // namespace

void ExchangeGroup::exchange_and_average(ParamState& local, int id) {
  if (id < 0 || id >= k_) throw std::invalid_argument("replica id out of range");
  const auto t0 = std::chrono::steady_clock::now();

  std::vector<std::uint8_t> wire;
  if (transport_ == TransportMode::Staged) {
    wire = flatten_state(local);
    slots_[id].staged = wire;  // publish a stable copy
  } else {
    slots_[id].direct = &local;
  }

  barrier_.arrive_and_wait(id);  // phase 1: all states published

  // Barrier integrity: between the two phases every replica's round counter
  // must agree with ours.
  const std::uint64_t round = gen_[id].load();
  for (int i = 0; i < k_; ++i) {
    if (gen_[i].load() != round) {
      abort("generation skew at round " + std::to_string(round));
      throw ProtocolError("replica " + std::to_string(i) + " is at round " +
                          std::to_string(gen_[i].load()) + ", expected " +
                          std::to_string(round));
    }
  }

  // Sum in fixed replica-index order so all replicas compute identical bits.
  ParamState mean;
  std::int64_t flat_len = 0;
  if (transport_ == TransportMode::Staged) {
    flat_len = static_cast<std::int64_t>(wire.size());
    for (int i = 0; i < k_; ++i) {
      if (i == id) {
        if (i == 0) mean = local;
        else add_state(mean, local);
        continue;
      }
      std::vector<std::uint8_t> copy = slots_[i].staged;  // the host-memory copy
      ParamState peer = unflatten_state(copy, *spec_);
      if (i == 0) mean = std::move(peer);
      else add_state(mean, peer);
    }
  } else {
    flat_len = static_cast<std::int64_t>(12 + 4 * [&] {
      std::size_t total = 0;
      for (const LayerParams& p : local.layers)
        total += p.weights.size() + p.bias.size() + p.w_mom.size() + p.b_mom.size();
      return total;
    }());
    mean = *slots_[0].direct;
    for (int i = 1; i < k_; ++i) add_state(mean, *slots_[i].direct);
  }
  scale_state(mean, 1.0f / static_cast<float>(k_));

  barrier_.arrive_and_wait(id);  // phase 2: all reads done, slots reusable

  local = std::move(mean);
  gen_[id].fetch_add(1);

  const double dt = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  std::lock_guard lock(stats_mu_);
  bytes_per_round_ = static_cast<std::int64_t>(k_ - 1) * flat_len;
  ++latency_samples_;
  latency_sum_s_ += dt;
  latency_max_s_ = std::max(latency_max_s_, dt);
}

SyncReport ExchangeGroup::report() const {
  SyncReport r;
  std::uint64_t rounds = 0;
  for (const auto& g : gen_) rounds = std::max(rounds, g.load());
  r.rounds = static_cast<std::int64_t>(rounds);
  std::lock_guard lock(stats_mu_);
  r.bytes_per_round = bytes_per_round_;
  r.mean_latency_s = latency_samples_ ? latency_sum_s_ / latency_samples_ : 0.0;
  r.max_latency_s = latency_max_s_;
  return r;
}

ParamState staged_roundtrip(const ParamState& state, const NetworkSpec& spec) {
  const std::vector<std::uint8_t> wire = flatten_state(state);
  std::vector<std::uint8_t> copy = wire;
  return unflatten_state(copy, spec);
}

TrainResult train_replicated(const NetworkSpec& spec, const RawDataset& ds,
                             const MeanImage& mean, const TrainOptions& opt) {
  if (opt.workers < 1) throw std::invalid_argument("workers must be >= 1");
  if (opt.iterations < 1) throw std::invalid_argument("iterations must be >= 1");
  const int K = opt.workers;
  // Fail before spawning anything if the dataset cannot feed K shards.
  (void)batch_stream(ds.n, opt.per_replica_batch, 0, K, 0);

  ExchangeGroup group(K, opt.transport, &spec, opt.barrier_timeout);
  // The gates bracket the whole measured loop, so they cannot share the
  // exchange skew timeout; failures release them through abort() instead.
  const auto gate_timeout = std::chrono::hours(24);
  SyncBarrier start_gate(K + 1, gate_timeout);
  SyncBarrier end_gate(K + 1, gate_timeout);

  const int total_iters = opt.warmup_iterations + opt.iterations;
  std::vector<std::vector<float>> losses(K, std::vector<float>(opt.iterations, 0.0f));
  std::vector<ParamState> finals(K);

  std::mutex err_mu;
  std::exception_ptr first_error;
  auto record_error = [&](std::exception_ptr e, const std::string& what) {
    {
      std::lock_guard lock(err_mu);
      if (!first_error) first_error = e;
    }
    group.abort(what);
    start_gate.abort(what);
    end_gate.abort(what);
  };

  auto worker = [&](int k) {
    try {
      ParamState params = init_params(spec, opt.seed);

      std::uint64_t epoch = 0;
      std::vector<RawBatch> stream =
          batch_stream(ds.n, opt.per_replica_batch, k, K, mix64(opt.seed ^ epoch));
      std::size_t cursor = 0;
      auto produce = [&]() -> std::optional<Minibatch> {
        if (cursor >= stream.size()) {
          ++epoch;
          stream = batch_stream(ds.n, opt.per_replica_batch, k, K, mix64(opt.seed ^ epoch));
          cursor = 0;
        }
        const RawBatch& rb = stream[cursor++];
        const std::uint64_t rng_base = mix64(opt.seed ^ (epoch * 0x9E3779B97F4A7C15ull) ^
                                             0xC2B2AE3D27D4EB4Full);
        return preprocess(ds, rb.indices, mean, opt.preproc,
                          rng_base + static_cast<std::uint64_t>(rb.start_ordinal),
                          rb.sequence_index);
      };

      std::unique_ptr<PrefetchHandle> prefetch;
      if (opt.parallel_loading) prefetch = std::make_unique<PrefetchHandle>(produce);

      for (int it = 0; it < total_iters; ++it) {
        if (it == opt.warmup_iterations) start_gate.arrive_and_wait(k);
        std::optional<Minibatch> mb = opt.parallel_loading ? prefetch->next() : produce();
        if (!mb.has_value()) throw std::runtime_error("batch stream ended unexpectedly");
        StepResult step = forward_backward(spec, params, mb->images, mb->labels);
        if (it >= opt.warmup_iterations) losses[k][it - opt.warmup_iterations] = step.loss;
        sgd_momentum_step(params, step.grads, opt.hyper);
        group.exchange_and_average(params, k);
      }
      finals[k] = std::move(params);
      end_gate.arrive_and_wait(k);
    } catch (...) {
      record_error(std::current_exception(),
                   "replica " + std::to_string(k) + " failed");
    }
  };

  std::vector<std::thread> threads;
  threads.reserve(K);
  for (int k = 0; k < K; ++k) threads.emplace_back(worker, k);

  double loop_seconds = 0.0;
  std::exception_ptr gate_error;
  try {
    start_gate.arrive_and_wait(K);
    const auto t0 = std::chrono::steady_clock::now();
    end_gate.arrive_and_wait(K);
    loop_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  } catch (...) {
    gate_error = std::current_exception();
  }
  for (std::thread& t : threads) t.join();

  {
    std::lock_guard lock(err_mu);
    if (first_error) std::rethrow_exception(first_error);
  }
  if (gate_error) std::rethrow_exception(gate_error);

  TrainResult result;
  result.params = std::move(finals[0]);
  result.loss_trace.resize(opt.iterations);
  for (int it = 0; it < opt.iterations; ++it) {
    float sum = 0.0f;
    for (int k = 0; k < K; ++k) sum += losses[k][it];
    result.loss_trace[it] = sum / static_cast<float>(K);
  }
  result.sync = group.report();
  result.loop_seconds = loop_seconds;
  return result;
}

}  // namespace ptrain
