#include <gtest/gtest.h>

#include <algorithm>

#include "manpp/errors.hpp"
#include "manpp/pipeline.hpp"
#include "support.hpp"

using namespace manpp;
using manpp::testing::bitwise_equal;
using manpp::testing::mlp;
using manpp::testing::small_config;

namespace {

LocalModel make_model(const std::vector<std::size_t>& widths, std::size_t K, const TrainConfig& cfg) {
  auto init = make_stream(cfg.seed, "init");
  return build_local_model(mlp(widths), K, widths.back(), cfg, init);
}

}  // namespace

TEST(Schedule, ThreeBlocksFourBatches) {
  const auto s = pipeline_schedule(3, 4);
  // priming + 4 batches + sentinel per worker
  EXPECT_EQ(s.size(), 18u);
  auto find = [&](std::size_t tick, std::size_t block) {
    return std::find_if(s.begin(), s.end(), [&](const ScheduleEntry& e) { return e.tick == tick && e.block == block; });
  };
  const auto it = find(6, 2);
  ASSERT_NE(it, s.end());
  EXPECT_EQ(it->kind, WorkerEvent::Kind::batch);
  EXPECT_EQ(it->microbatch, 3u);
  EXPECT_EQ(find(0, 0)->kind, WorkerEvent::Kind::dummy);
  EXPECT_EQ(find(7, 2)->kind, WorkerEvent::Kind::sentinel);
  EXPECT_EQ(find(0, 1), s.end());
  EXPECT_TRUE(std::is_sorted(s.begin(), s.end(), [](const ScheduleEntry& a, const ScheduleEntry& b) {
    return a.tick != b.tick ? a.tick < b.tick : a.block < b.block;
  }));
}

TEST(Schedule, SingleBatchTwoBlocks) {
  const auto s = pipeline_schedule(2, 1);
  ASSERT_EQ(s.size(), 6u);
  std::size_t batches = 0;
  for (const auto& e : s) {
    if (e.kind != WorkerEvent::Kind::batch) continue;
    ++batches;
    EXPECT_EQ(e.tick, 1 + e.block);
  }
  EXPECT_EQ(batches, 2u);
}

TEST(Pipeline, MatchesDelayedUpdateOracle) {
  const auto data = manpp::testing::blobs(70, 4, 3, 2);
  auto cfg = small_config(2, 16);
  for (std::size_t K : {2u, 3u, 4u}) {
    auto a = make_model({4, 10, 10, 10, 3}, K, cfg);
    auto b = make_model({4, 10, 10, 10, 3}, K, cfg);
    const auto pr = run_pipeline(a, data, cfg);
    const auto orr = delayed_update_oracle(b, data, cfg);
    EXPECT_TRUE(bitwise_equal(a.snapshot_params(), b.snapshot_params())) << "K=" << K;
    ASSERT_EQ(pr.trajectory.size(), orr.trajectory.size());
    for (std::size_t e = 0; e < pr.trajectory.size(); ++e)
      EXPECT_TRUE(bitwise_equal(pr.trajectory[e], orr.trajectory[e])) << "K=" << K << " epoch " << e;
    for (std::size_t e = 0; e < pr.epochs.size(); ++e)
      for (std::size_t j = 0; j < K; ++j) EXPECT_EQ(pr.epochs[e].blocks[j].loss, orr.epochs[e].blocks[j].loss);
  }
}

TEST(Pipeline, RepeatableRuns) {
  const auto data = manpp::testing::blobs(50, 3, 2, 8);
  const auto cfg = small_config(2, 8);
  auto a = make_model({3, 6, 6, 2}, 3, cfg);
  auto b = make_model({3, 6, 6, 2}, 3, cfg);
  run_pipeline(a, data, cfg);
  run_pipeline(b, data, cfg);
  EXPECT_TRUE(bitwise_equal(a.snapshot_params(), b.snapshot_params()));
}

TEST(Pipeline, OracleWithOneBlockIsSequential) {
  const auto data = manpp::testing::blobs(60, 3, 2, 3);
  const auto cfg = small_config(2, 16);
  auto a = make_model({3, 8, 2}, 1, cfg);
  auto b = make_model({3, 8, 2}, 1, cfg);
  delayed_update_oracle(a, data, cfg);
  train_sequential(b, data, nullptr, cfg);
  EXPECT_TRUE(bitwise_equal(a.snapshot_params(), b.snapshot_params()));
}

TEST(Pipeline, MessagesConservedAndFresh) {
  const auto data = manpp::testing::blobs(64, 3, 2, 3);
  const auto cfg = small_config(1, 16);
  auto m = make_model({3, 6, 6, 6, 2}, 4, cfg);
  const auto r = run_pipeline(m, data, cfg);
  ASSERT_EQ(r.trace.edges.size(), 3u);
  for (const auto& e : r.trace.edges) {
    EXPECT_EQ(e.pushes, e.pops);
    EXPECT_EQ(e.in_flight, 0u);
    EXPECT_EQ(e.pushes, 4u + 2u);  // priming + 4 batches + sentinel
  }
  EXPECT_LE(r.max_snapshot_staleness, 1u);
  EXPECT_EQ(r.epochs[0].records, 64u);
}

TEST(Pipeline, FreeRunningCompletes) {
  const auto data = manpp::testing::blobs(80, 3, 2, 4);
  const auto cfg = small_config(2, 16);
  auto m = make_model({3, 6, 6, 2}, 3, cfg);
  PipelineConfig pc;
  pc.deterministic = false;
  pc.timeout = std::chrono::milliseconds(10000);
  const auto r = run_pipeline(m, data, cfg, pc);
  EXPECT_EQ(r.epochs.size(), 2u);
  for (const auto& e : r.trace.edges) EXPECT_EQ(e.pushes, e.pops);
  for (const auto& p : m.snapshot_params())
    for (double v : p.data) EXPECT_TRUE(std::isfinite(v));
}

TEST(Pipeline, NeedsTwoBlocks) {
  const auto data = manpp::testing::blobs(10, 3, 2, 4);
  const auto cfg = small_config(1, 4);
  auto m = make_model({3, 4, 2}, 1, cfg);
  EXPECT_THROW(run_pipeline(m, data, cfg), ConfigError);
}

TEST(Pipeline, WorkerErrorSurfaces) {
  const auto data = manpp::testing::blobs(64, 3, 2, 1, 50.0);
  auto cfg = small_config(20, 8);
  cfg.lr_local = cfg.lr_aux = 1e4;
  cfg.schedule = Schedule::constant;
  auto m = make_model({3, 8, 2}, 2, cfg);
  EXPECT_THROW(run_pipeline(m, data, cfg), DivergenceError);
}

TEST(Queue, BoundedAndOrdered) {
  BoundedQueue<int> q(2);
  using std::chrono::milliseconds;
  EXPECT_TRUE(q.push(1, milliseconds(10)));
  EXPECT_TRUE(q.push(2, milliseconds(10)));
  EXPECT_FALSE(q.push(3, milliseconds(10)));
  EXPECT_EQ(*q.pop(milliseconds(10)), 1);
  EXPECT_EQ(*q.try_pop(), 2);
  EXPECT_FALSE(q.pop(milliseconds(5)));
  EXPECT_EQ(q.pushes(), 2u);
  EXPECT_EQ(q.pops(), 2u);
}

TEST(Throughput, Reports) {
  EXPECT_THROW(throughput_report({}), UsageError);

  PipelineTrace one;
  one.workers = 1;
  one.events = {{0, 0, WorkerEvent::Kind::batch, 1, 0.0, 1.0}};
  one.wall_ms = 1.0;
  EXPECT_EQ(throughput_report(one, 5.0).speedup, 1.0);

  const auto data = manpp::testing::blobs(64, 3, 2, 3);
  const auto cfg = small_config(1, 16);
  auto m = make_model({3, 6, 6, 2}, 3, cfg);
  const auto r = run_pipeline(m, data, cfg);
  const auto stats = throughput_report(r.trace, 10.0);
  ASSERT_EQ(stats.workers.size(), 3u);
  EXPECT_DOUBLE_EQ(stats.fill_drain_overhead, 2.0 / 6.0);
  for (const auto& w : stats.workers) {
    EXPECT_EQ(w.batches, 4u);
    EXPECT_GE(w.busy_frac, 0.0);
    EXPECT_LE(w.busy_frac, 1.0);
    EXPECT_NEAR(w.busy_frac + w.idle_frac, 1.0, 1e-12);
  }
  EXPECT_EQ(stats.messages_per_edge, (std::vector<std::size_t>{6, 6}));
}
