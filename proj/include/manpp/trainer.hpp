#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "manpp/data.hpp"
#include "manpp/memory.hpp"
#include "manpp/model.hpp"
#include "manpp/optim.hpp"

namespace manpp {

struct TrainConfig {
  double lr_local = 0.05;
  double lr_aux = 0.05;
  std::size_t epochs = 1;
  std::size_t batch_size = 64;
  std::uint64_t seed = 0;
  OptimizerConfig optimizer;
  Schedule schedule = Schedule::cosine;
  HeadConfig head;

  /// Throws ConfigError on non-positive rates, zero epochs or batch size.
  void validate() const;
};

inline constexpr double kDivergenceThreshold = 1e6;

/// A block and its head: the unit of ownership moved between workers.
struct BlockUnit {
  Block block;
  std::optional<AuxiliaryHead> head;
  LocalOptimizers optim;
  std::uint64_t updates = 0;

  AuxiliaryHead* head_ptr() { return head ? &*head : nullptr; }
  const AuxiliaryHead* head_ptr() const { return head ? &*head : nullptr; }
};

struct LocalModel {
  std::vector<BlockUnit> units;
  std::size_t classes = 0;

  std::size_t blocks() const { return units.size(); }
  std::size_t layer_units() const;
  /// Backbone params of every block followed by every head's params.
  std::vector<Tensor> all_params() const;
  std::vector<TensorSnapshot> snapshot_params() const;
  /// Deep copy, including optimizer state.
  LocalModel clone() const;
  /// Forward through every block with no heads (the deployed network).
  Tensor predict(const Tensor& x) const;
};

/// Initializes every backbone layer from `init` (in layer order), partitions
/// into K blocks and builds K-1 heads (projection init drawn after the
/// backbone). Throws ConfigError when the last block's output width does not
/// equal `classes`.
LocalModel build_local_model(std::vector<LayerSpec> layers, std::size_t K, std::size_t classes,
                             const TrainConfig& cfg, Rng& init);

struct BlockStepResult {
  Tensor next_input;
  double loss = 0.0;
  std::size_t correct = 0;
  std::size_t count = 0;
};

/// Forward, local loss, backward, update_local, then ema_couple toward
/// `next_first` (skipped when empty). Activations charged to `acct` are
/// released before returning. Throws DivergenceError on a non-finite loss or
/// one above kDivergenceThreshold.
BlockStepResult train_block_step(BlockUnit& unit, std::size_t j, const Tensor& x, std::span<const int> labels,
                                 double lr_local, double lr_aux, MemoryAccountant* acct,
                                 std::span<const TensorSnapshot> next_first);

/// Whether head j couples to block j+1 (needs a snapshot each step).
bool needs_snapshot(const LocalModel& model, std::size_t j);

struct BlockEpochMetrics {
  double loss = 0.0;  // sample-weighted mean of batch losses
  double acc = 0.0;   // training accuracy of this block's head (or output)
};

struct EpochMetrics {
  std::size_t epoch = 0;
  double lr = 0.0;
  std::vector<BlockEpochMetrics> blocks;
  std::int64_t peak_scalars = 0;
  double wall_ms = 0.0;
  std::size_t records = 0;
};

/// Shuffled minibatch index lists for one epoch; the final batch may be short.
std::vector<std::vector<std::size_t>> epoch_batches(std::size_t n, std::size_t batch_size, Rng& shuffle);

/// One epoch of block-by-block training: for every batch, blocks 0..K-1 in
/// order. Head j couples to block j+1 as it stands before block j+1 sees the
/// same batch.
EpochMetrics train_epoch_sequential(LocalModel& model, const Dataset& data, const TrainConfig& cfg,
                                    std::size_t epoch, Rng& shuffle, MemoryAccountant& acct);

struct TrainResult {
  std::vector<EpochMetrics> epochs;
  double test_accuracy = 0.0;
  std::size_t test_records = 0;
};

/// Runs cfg.epochs sequential epochs with the per-epoch schedule and, when a
/// test set is given, reports final test accuracy.
TrainResult train_sequential(LocalModel& model, const Dataset& train, const Dataset* test, const TrainConfig& cfg);

/// Fraction of `data` classified correctly by the deployed network.
double evaluate(const LocalModel& model, const Dataset& data, std::size_t batch_size = 256);

/// Peak live activation scalars for one local step per block on `input`
/// (on a copy of the model), and for one end-to-end pass over all layers.
struct PeakMeasurement {
  std::int64_t local_peak = 0;
  std::int64_t e2e_peak = 0;
  double ratio() const { return static_cast<double>(local_peak) / static_cast<double>(e2e_peak); }
};
PeakMeasurement measure_peak_activations(const LocalModel& model, const Tensor& input, std::span<const int> labels);

}  // namespace manpp
