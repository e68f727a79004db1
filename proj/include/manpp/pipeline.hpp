#pragma once

// Pipeline-parallel local learning: one worker thread per (block, head)
// connected by bounded FIFO queues.
//
// Schedule (per epoch, M microbatches, K workers, 0-indexed ticks): worker 0
// pops an all-zero priming batch at tick 0, then feeds microbatch m at tick
// m + 1. Worker i therefore sees the priming batch at tick i, microbatch m at
// tick m + 1 + i and the end-of-epoch sentinel at tick M + 1 + i. The
// priming batch is forwarded but never updates parameters or metrics.
//
// Head i couples to block i+1 through a snapshot of that block's first layer
// taken at the start of the tick in which head i updates. In deterministic
// mode a two-phase barrier per tick (publish snapshots, then compute) makes
// the run bitwise reproducible and equal to delayed_update_oracle().

#include <chrono>
#include <condition_variable>
#include <cstddef>
#include <cstdint>
#include <deque>
#include <mutex>
#include <optional>
#include <vector>

#include "manpp/data.hpp"
#include "manpp/trainer.hpp"

namespace manpp {

struct PipelineMessage {
  TensorSnapshot activation;  // detached values only
  std::vector<int> labels;
  std::size_t seq = 0;  // 0 = priming batch, m + 1 = microbatch m, M + 1 = sentinel
  std::size_t epoch = 0;
  bool dummy = false;
  bool sentinel = false;
};

struct PipelineConfig {
  std::size_t queue_capacity = 2;
  bool deterministic = true;
  /// Free-running mode: a blocked pop or push longer than this aborts the run.
  std::chrono::milliseconds timeout{30000};
};

/// Bounded multi-producer multi-consumer FIFO.
template <class T>
class BoundedQueue {
 public:
  explicit BoundedQueue(std::size_t capacity) : capacity_(capacity == 0 ? 1 : capacity) {}

  /// Blocks while full; false on timeout.
  bool push(T value, std::chrono::milliseconds timeout) {
    std::unique_lock lock(mu_);
    if (!not_full_.wait_for(lock, timeout, [&] { return items_.size() < capacity_; })) return false;
    items_.push_back(std::move(value));
    ++pushes_;
    not_empty_.notify_one();
    return true;
  }

  /// Blocks while empty; nullopt on timeout.
  std::optional<T> pop(std::chrono::milliseconds timeout) {
    std::unique_lock lock(mu_);
    if (!not_empty_.wait_for(lock, timeout, [&] { return !items_.empty(); })) return std::nullopt;
    return take(lock);
  }

  std::optional<T> try_pop() {
    std::unique_lock lock(mu_);
    if (items_.empty()) return std::nullopt;
    return take(lock);
  }

  std::size_t size() const {
    std::lock_guard lock(mu_);
    return items_.size();
  }
  std::size_t pushes() const {
    std::lock_guard lock(mu_);
    return pushes_;
  }
  std::size_t pops() const {
    std::lock_guard lock(mu_);
    return pops_;
  }
  std::size_t capacity() const { return capacity_; }

 private:
  std::optional<T> take(std::unique_lock<std::mutex>&) {
    T v = std::move(items_.front());
    items_.pop_front();
    ++pops_;
    not_full_.notify_one();
    return v;
  }

  const std::size_t capacity_;
  mutable std::mutex mu_;
  std::condition_variable not_full_, not_empty_;
  std::deque<T> items_;
  std::size_t pushes_ = 0, pops_ = 0;
};

struct WorkerEvent {
  enum class Kind { dummy, batch, sentinel };
  std::size_t worker = 0;
  std::size_t tick = 0;
  Kind kind = Kind::batch;
  std::size_t seq = 0;
  double start_ms = 0.0;
  double end_ms = 0.0;
};

struct EdgeCounts {
  std::size_t pushes = 0;
  std::size_t pops = 0;
  std::size_t in_flight = 0;
};

struct PipelineTrace {
  std::size_t workers = 0;
  std::vector<WorkerEvent> events;
  std::vector<EdgeCounts> edges;  // edge i carries worker i -> worker i+1
  double wall_ms = 0.0;
};

struct PipelineResult {
  std::vector<EpochMetrics> epochs;
  PipelineTrace trace;
  /// Largest gap, in ticks, between a coupling snapshot and its use.
  std::size_t max_snapshot_staleness = 0;
  /// Deep-copied parameter values at the end of every epoch.
  std::vector<std::vector<TensorSnapshot>> trajectory;
};

/// Trains `model` in place with one thread per block. Requires K >= 2.
/// Throws ConfigError for K < 2, InternalError on a sequence-order violation
/// and std::runtime_error when a free-running worker times out.
PipelineResult run_pipeline(LocalModel& model, const Dataset& data, const TrainConfig& cfg,
                            const PipelineConfig& pcfg = {});

struct ScheduleEntry {
  std::size_t tick = 0;
  std::size_t block = 0;
  WorkerEvent::Kind kind = WorkerEvent::Kind::batch;
  std::size_t microbatch = 0;  // valid for Kind::batch
};

/// Tick table of one epoch for K blocks and M microbatches.
std::vector<ScheduleEntry> pipeline_schedule(std::size_t K, std::size_t M);

/// Single-threaded emulation of the same schedule, including snapshot
/// timing. Accepts K = 1 (equals the sequential trainer).
PipelineResult delayed_update_oracle(LocalModel& model, const Dataset& data, const TrainConfig& cfg);

struct WorkerStats {
  std::size_t worker = 0;
  double busy_frac = 0.0;
  double idle_frac = 0.0;
  std::size_t batches = 0;
};

struct PipelineStats {
  std::vector<WorkerStats> workers;
  /// (K - 1) / (n + K - 1) for n microbatches per worker.
  double fill_drain_overhead = 0.0;
  std::vector<std::size_t> messages_per_edge;
  double speedup = 0.0;
};

/// Busy and idle fractions over the span of the trace. speedup is
/// sequential_wall_ms / trace.wall_ms (1.0 for a single worker). Throws
/// UsageError on an empty trace.
PipelineStats throughput_report(const PipelineTrace& trace, double sequential_wall_ms = 0.0);

}  // namespace manpp
