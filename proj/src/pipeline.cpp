#include "manpp/pipeline.hpp"

#include <algorithm>
#include <atomic>
#include <condition_variable>
#include <exception>
#include <stdexcept>
#include <thread>

#include "manpp/errors.hpp"

namespace manpp {

namespace {

using Clock = std::chrono::steady_clock;

// Reusable barrier. libstdc++ 11's std::barrier can spin forever when the
// threads outnumber the cores.
class TickBarrier {
 public:
  explicit TickBarrier(std::size_t parties) : parties_(parties) {}

  void arrive_and_wait() {
    std::unique_lock lock(mu_);
    const auto gen = generation_;
    if (++waiting_ == parties_) {
      waiting_ = 0;
      ++generation_;
      cv_.notify_all();
      return;
    }
    cv_.wait(lock, [&] { return generation_ != gen; });
  }

 private:
  std::mutex mu_;
  std::condition_variable cv_;
  const std::size_t parties_;
  std::size_t waiting_ = 0;
  std::uint64_t generation_ = 0;
};

struct EpochPlan {
  std::size_t epoch = 0;
  std::vector<std::vector<std::size_t>> batches;
  double lr_local = 0.0;
  double lr_aux = 0.0;
  Shape dummy_shape;

  std::size_t microbatches() const { return batches.size(); }
  std::size_t ticks(std::size_t K) const { return microbatches() + 1 + K; }
};

struct WorkerAccum {
  double loss_sum = 0.0;
  std::size_t correct = 0;
  std::size_t count = 0;
  MemoryAccountant acct;
  std::size_t next_seq = 0;
};

struct Snapshot {
  std::vector<TensorSnapshot> params;
  std::size_t tick = 0;
};

// Latest-value slot used for coupling snapshots.
class Mailbox {
 public:
  void put(Snapshot s) {
    std::lock_guard lock(mu_);
    value_ = std::move(s);
  }
  std::optional<Snapshot> take() {
    std::lock_guard lock(mu_);
    auto v = std::move(value_);
    value_.reset();
    return v;
  }
  std::optional<Snapshot> peek() const {
    std::lock_guard lock(mu_);
    return value_;
  }

 private:
  mutable std::mutex mu_;
  std::optional<Snapshot> value_;
};

EpochPlan make_plan(const Dataset& data, const TrainConfig& cfg, std::size_t epoch, Rng& shuffle) {
  EpochPlan p;
  p.epoch = epoch;
  p.batches = epoch_batches(data.size(), cfg.batch_size, shuffle);
  p.lr_local = scheduled_lr(cfg.schedule, epoch, cfg.epochs, cfg.lr_local);
  p.lr_aux = scheduled_lr(cfg.schedule, epoch, cfg.epochs, cfg.lr_aux);
  p.dummy_shape = data.batch_shape(p.batches.front().size());
  return p;
}

PipelineMessage prime_message(const EpochPlan& plan) {
  PipelineMessage m;
  m.activation = {plan.dummy_shape, std::vector<double>(shape_numel(plan.dummy_shape), 0.0)};
  m.seq = 0;
  m.epoch = plan.epoch;
  m.dummy = true;
  return m;
}

// The input worker 0 feeds after finishing message `seq`.
std::optional<PipelineMessage> next_feed(const Dataset& data, const EpochPlan& plan, std::size_t seq) {
  const auto M = plan.microbatches();
  if (seq > M) return std::nullopt;
  PipelineMessage m;
  m.seq = seq + 1;
  m.epoch = plan.epoch;
  if (seq == M) {
    m.sentinel = true;
    return m;
  }
  const Tensor x = data.batch(plan.batches[seq], m.labels);
  m.activation = x.snapshot();
  return m;
}

void check_sequence(const PipelineMessage& msg, std::size_t worker, std::size_t M, WorkerAccum& acc) {
  if (msg.seq != acc.next_seq) {
    throw InternalError("worker " + std::to_string(worker) + " expected seq " + std::to_string(acc.next_seq) +
                        ", got " + std::to_string(msg.seq));
  }
  const bool kind_ok = msg.seq == 0 ? msg.dummy : (msg.seq == M + 1 ? msg.sentinel : !msg.dummy && !msg.sentinel);
  if (!kind_ok) throw InternalError("worker " + std::to_string(worker) + " got a mislabelled message");
  ++acc.next_seq;
}

// One worker's handling of one message. Shared by the threaded pipeline and
// the oracle so both run identical arithmetic.
std::optional<PipelineMessage> process_message(BlockUnit& unit, std::size_t i, std::size_t K,
                                               const PipelineMessage& in, const EpochPlan& plan,
                                               std::span<const TensorSnapshot> snap, WorkerAccum& acc) {
  const bool forward_out = i + 1 < K;
  PipelineMessage out;
  out.seq = in.seq;
  out.epoch = in.epoch;
  if (in.sentinel) {
    out.sentinel = true;
  } else if (in.dummy) {
    out.dummy = true;
    if (forward_out) {
      const Tensor y = unit.block.forward(Tensor::from_snapshot(in.activation));
      out.activation = y.snapshot();
    }
  } else {
    const Tensor x = Tensor::from_snapshot(in.activation);
    auto r = train_block_step(unit, i, x, in.labels, plan.lr_local, plan.lr_aux, &acc.acct, snap);
    acc.loss_sum += r.loss * static_cast<double>(r.count);
    acc.correct += r.correct;
    acc.count += r.count;
    if (forward_out) {
      if (!r.next_input.is_leaf() || r.next_input.requires_grad()) {
        throw InternalError("gradient-bearing activation about to cross a queue");
      }
      out.activation = r.next_input.snapshot();
      out.labels = in.labels;
    }
  }
  if (!forward_out) return std::nullopt;
  return out;
}

bool consumes_batch_at(std::size_t tick, std::size_t worker, std::size_t M) {
  return tick >= worker + 1 && tick - worker - 1 < M;
}

EpochMetrics collect_metrics(const EpochPlan& plan, std::vector<WorkerAccum>& accs, std::size_t records) {
  EpochMetrics m;
  m.epoch = plan.epoch;
  m.lr = plan.lr_local;
  m.records = records;
  const double n = static_cast<double>(records);
  for (auto& a : accs) {
    m.blocks.push_back({a.loss_sum / n, static_cast<double>(a.correct) / n});
    m.peak_scalars = std::max(m.peak_scalars, a.acct.peak());
  }
  return m;
}

void check_pipeline_inputs(const LocalModel& model, const Dataset& data, const TrainConfig& cfg) {
  cfg.validate();
  data.validate();
  if (data.size() == 0) throw ConfigError("pipeline needs a non-empty dataset");
  if (model.blocks() == 0) throw ConfigError("pipeline needs at least one block");
}

}  // namespace

std::vector<ScheduleEntry> pipeline_schedule(std::size_t K, std::size_t M) {
  std::vector<ScheduleEntry> out;
  for (std::size_t i = 0; i < K; ++i) {
    out.push_back({i, i, WorkerEvent::Kind::dummy, 0});
    for (std::size_t m = 0; m < M; ++m) out.push_back({m + 1 + i, i, WorkerEvent::Kind::batch, m});
    out.push_back({M + 1 + i, i, WorkerEvent::Kind::sentinel, 0});
  }
  std::sort(out.begin(), out.end(), [](const ScheduleEntry& a, const ScheduleEntry& b) {
    return a.tick != b.tick ? a.tick < b.tick : a.block < b.block;
  });
  return out;
}

PipelineResult delayed_update_oracle(LocalModel& model, const Dataset& data, const TrainConfig& cfg) {
  check_pipeline_inputs(model, data, cfg);
  const auto K = model.blocks();
  auto shuffle = make_stream(cfg.seed, "shuffle");
  PipelineResult result;
  result.trace.workers = K;
  result.trace.edges.assign(K > 0 ? K - 1 : 0, {});
  for (std::size_t e = 0; e < cfg.epochs; ++e) {
    const auto plan = make_plan(data, cfg, e, shuffle);
    const auto M = plan.microbatches();
    std::vector<WorkerAccum> accs(K);
    std::vector<std::optional<PipelineMessage>> inbox(K);
    inbox[0] = prime_message(plan);
    for (std::size_t t = 0; t < plan.ticks(K); ++t) {
      std::vector<std::vector<TensorSnapshot>> snaps(K);
      for (std::size_t j = 0; j + 1 < K; ++j) {
        if (needs_snapshot(model, j) && consumes_batch_at(t, j, M)) {
          snaps[j] = model.units[j + 1].block.first_layer_snapshot();
        }
      }
      std::vector<std::optional<PipelineMessage>> next(K);
      for (std::size_t i = 0; i < K; ++i) {
        if (!inbox[i]) continue;
        const auto& msg = *inbox[i];
        check_sequence(msg, i, M, accs[i]);
        auto out = process_message(model.units[i], i, K, msg, plan, snaps[i], accs[i]);
        if (out) {
          next[i + 1] = std::move(out);
          ++result.trace.edges[i].pushes;
          ++result.trace.edges[i].pops;
        }
        if (i == 0) next[0] = next_feed(data, plan, msg.seq);
        result.trace.events.push_back({i, t,
                                       msg.dummy      ? WorkerEvent::Kind::dummy
                                       : msg.sentinel ? WorkerEvent::Kind::sentinel
                                                      : WorkerEvent::Kind::batch,
                                       msg.seq, static_cast<double>(t), static_cast<double>(t + 1)});
      }
      inbox = std::move(next);
    }
    result.epochs.push_back(collect_metrics(plan, accs, data.size()));
    result.trajectory.push_back(model.snapshot_params());
  }
  return result;
}

PipelineResult run_pipeline(LocalModel& model, const Dataset& data, const TrainConfig& cfg,
                            const PipelineConfig& pcfg) {
  check_pipeline_inputs(model, data, cfg);
  const auto K = model.blocks();
  if (K < 2) throw ConfigError("run_pipeline needs K >= 2 blocks (use the sequential trainer for K = 1)");
  auto shuffle = make_stream(cfg.seed, "shuffle");
  PipelineResult result;
  result.trace.workers = K;
  result.trace.edges.assign(K - 1, {});
  const auto run_start = Clock::now();
  auto ms_since = [&](Clock::time_point t) {
    return std::chrono::duration<double, std::milli>(t - run_start).count();
  };

  for (std::size_t e = 0; e < cfg.epochs; ++e) {
    const auto plan = make_plan(data, cfg, e, shuffle);
    const auto M = plan.microbatches();
    const auto T = plan.ticks(K);

    std::vector<std::unique_ptr<BoundedQueue<PipelineMessage>>> inq;
    for (std::size_t i = 0; i < K; ++i) inq.push_back(std::make_unique<BoundedQueue<PipelineMessage>>(pcfg.queue_capacity));
    std::vector<Mailbox> mail(K);
    std::vector<WorkerAccum> accs(K);
    std::vector<std::vector<WorkerEvent>> events(K);
    std::vector<std::size_t> staleness(K, 0);
    std::atomic<bool> aborted{false};
    std::mutex err_mu;
    std::exception_ptr first_error;
    auto fail = [&](std::exception_ptr ep) {
      std::lock_guard lock(err_mu);
      if (!first_error) first_error = ep;
      aborted = true;
    };

    if (!inq[0]->push(prime_message(plan), pcfg.timeout)) throw std::runtime_error("cannot prime the pipeline");

    auto handle = [&](std::size_t i, PipelineMessage msg, std::size_t tick, std::span<const TensorSnapshot> snap) {
      check_sequence(msg, i, M, accs[i]);
      const auto start = Clock::now();
      auto out = process_message(model.units[i], i, K, msg, plan, snap, accs[i]);
      if (out && !inq[i + 1]->push(std::move(*out), pcfg.timeout)) {
        throw std::runtime_error("worker " + std::to_string(i) + " timed out pushing downstream");
      }
      if (i == 0) {
        if (auto feed = next_feed(data, plan, msg.seq); feed && !inq[0]->push(std::move(*feed), pcfg.timeout)) {
          throw std::runtime_error("worker 0 timed out feeding data");
        }
      }
      events[i].push_back({i, tick,
                           msg.dummy      ? WorkerEvent::Kind::dummy
                           : msg.sentinel ? WorkerEvent::Kind::sentinel
                                          : WorkerEvent::Kind::batch,
                           msg.seq, ms_since(start), ms_since(Clock::now())});
      return msg.sentinel;
    };

    std::vector<std::thread> workers;
    if (pcfg.deterministic) {
      TickBarrier sync(K);
      for (std::size_t i = 0; i < K; ++i) {
        workers.emplace_back([&, i] {
          for (std::size_t t = 0; t < T; ++t) {
            // Phase A: publish coupling snapshots as of the start of the tick.
            if (!aborted && i >= 1 && needs_snapshot(model, i - 1) && consumes_batch_at(t, i - 1, M)) {
              try {
                mail[i - 1].put({model.units[i].block.first_layer_snapshot(), t});
              } catch (...) {
                fail(std::current_exception());
              }
            }
            sync.arrive_and_wait();
            // Phase B: compute.
            if (!aborted && t >= i && t <= M + 1 + i) {
              try {
                auto msg = inq[i]->try_pop();
                if (!msg) throw InternalError("worker " + std::to_string(i) + " found no message at tick " + std::to_string(t));
                std::vector<TensorSnapshot> snap;
                if (!msg->dummy && !msg->sentinel && needs_snapshot(model, i)) {
                  auto s = mail[i].take();
                  if (!s) throw InternalError("missing coupling snapshot for head " + std::to_string(i));
                  staleness[i] = std::max(staleness[i], t - s->tick);
                  snap = std::move(s->params);
                }
                handle(i, std::move(*msg), t, snap);
              } catch (...) {
                fail(std::current_exception());
              }
            }
            sync.arrive_and_wait();
          }
        });
      }
    } else {
      // Free-running: neighbours exchange the latest first-layer values after
      // every update; per-edge FIFO order still holds.
      for (std::size_t i = 1; i < K; ++i) mail[i - 1].put({model.units[i].block.first_layer_snapshot(), 0});
      for (std::size_t i = 0; i < K; ++i) {
        workers.emplace_back([&, i] {
          try {
            std::size_t step = 0;
            for (;;) {
              std::optional<PipelineMessage> msg;
              const auto deadline = Clock::now() + pcfg.timeout;
              while (!msg) {
                if (aborted) return;
                if (Clock::now() > deadline) {
                  throw std::runtime_error("worker " + std::to_string(i) + " waited longer than " +
                                           std::to_string(pcfg.timeout.count()) + " ms for input (deadlock?)");
                }
                msg = inq[i]->pop(std::chrono::milliseconds(20));
              }
              std::vector<TensorSnapshot> snap;
              const bool real = !msg->dummy && !msg->sentinel;
              if (real && needs_snapshot(model, i)) {
                auto s = mail[i].peek();
                if (!s) throw InternalError("missing coupling snapshot for head " + std::to_string(i));
                snap = std::move(s->params);
              }
              const bool done = handle(i, std::move(*msg), step++, snap);
              if (real && i >= 1) mail[i - 1].put({model.units[i].block.first_layer_snapshot(), step});
              if (done) return;
            }
          } catch (...) {
            fail(std::current_exception());
          }
        });
      }
    }
    for (auto& w : workers) w.join();
    if (first_error) std::rethrow_exception(first_error);

    for (std::size_t i = 0; i + 1 < K; ++i) {
      auto& edge = result.trace.edges[i];
      edge.pushes += inq[i + 1]->pushes();
      edge.pops += inq[i + 1]->pops();
      edge.in_flight = inq[i + 1]->size();
    }
    for (std::size_t i = 0; i < K; ++i) {
      if (accs[i].next_seq != M + 2) {
        throw InternalError("worker " + std::to_string(i) + " stopped after seq " + std::to_string(accs[i].next_seq));
      }
      result.max_snapshot_staleness = std::max(result.max_snapshot_staleness, staleness[i]);
      result.trace.events.insert(result.trace.events.end(), events[i].begin(), events[i].end());
    }
    result.epochs.push_back(collect_metrics(plan, accs, data.size()));
    result.trajectory.push_back(model.snapshot_params());
  }
  result.trace.wall_ms = ms_since(Clock::now());
  for (auto& m : result.epochs) m.wall_ms = result.trace.wall_ms / static_cast<double>(result.epochs.size());
  return result;
}

PipelineStats throughput_report(const PipelineTrace& trace, double sequential_wall_ms) {
  if (trace.events.empty() || trace.workers == 0) throw UsageError("throughput_report on an empty trace");
  double lo = trace.events.front().start_ms, hi = trace.events.front().end_ms;
  for (const auto& ev : trace.events) {
    lo = std::min(lo, ev.start_ms);
    hi = std::max(hi, ev.end_ms);
  }
  const double span = hi - lo;
  PipelineStats stats;
  std::size_t max_batches = 0;
  for (std::size_t w = 0; w < trace.workers; ++w) {
    WorkerStats ws;
    ws.worker = w;
    double busy = 0.0;
    for (const auto& ev : trace.events) {
      if (ev.worker != w) continue;
      busy += ev.end_ms - ev.start_ms;
      if (ev.kind == WorkerEvent::Kind::batch) ++ws.batches;
    }
    ws.busy_frac = span > 0.0 ? busy / span : 0.0;
    ws.idle_frac = 1.0 - ws.busy_frac;
    max_batches = std::max(max_batches, ws.batches);
    stats.workers.push_back(ws);
  }
  const double K = static_cast<double>(trace.workers);
  const double n = static_cast<double>(max_batches);
  stats.fill_drain_overhead = n + K - 1.0 > 0.0 ? (K - 1.0) / (n + K - 1.0) : 0.0;
  for (const auto& e : trace.edges) stats.messages_per_edge.push_back(e.pushes);
  if (trace.workers == 1) {
    stats.speedup = 1.0;
  } else if (sequential_wall_ms > 0.0 && trace.wall_ms > 0.0) {
    stats.speedup = sequential_wall_ms / trace.wall_ms;
  }
  return stats;
}

}  // namespace manpp
