#include "manpp/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>
#include <string>

#include "manpp/errors.hpp"

namespace manpp {

void TrainConfig::validate() const {
  if (!(lr_local > 0.0) || !(lr_aux > 0.0)) throw ConfigError("learning rates must be > 0");
  if (epochs == 0) throw ConfigError("epochs must be >= 1");
  if (batch_size == 0) throw ConfigError("batch size must be >= 1");
  manpp::validate(optimizer);
  manpp::validate(head);
}

std::size_t LocalModel::layer_units() const {
  std::size_t n = 0;
  for (const auto& u : units)
    for (const auto& l : u.block.layers) n += l.parametric() ? 1 : 0;
  return n;
}

std::vector<Tensor> LocalModel::all_params() const {
  std::vector<Tensor> out;
  for (const auto& u : units) {
    for (auto& p : u.block.params()) out.push_back(p);
  }
  for (const auto& u : units) {
    if (!u.head) continue;
    for (auto& p : u.head->mirror.params()) out.push_back(p);
    out.push_back(u.head->bias);
    out.push_back(u.head->scale);
    for (auto& p : u.head->projection.params()) out.push_back(p);
  }
  return out;
}

std::vector<TensorSnapshot> LocalModel::snapshot_params() const {
  std::vector<TensorSnapshot> out;
  for (const auto& p : all_params()) out.push_back(p.snapshot());
  return out;
}

LocalModel LocalModel::clone() const {
  LocalModel copy;
  copy.classes = classes;
  for (const auto& u : units) {
    BlockUnit c;
    for (const auto& l : u.block.layers) c.block.layers.push_back(l.clone());
    if (u.head) {
      AuxiliaryHead h;
      h.mirror = u.head->mirror.clone();
      h.bias = u.head->bias.clone();
      h.scale = u.head->scale.clone();
      h.projection = u.head->projection.clone();
      h.config = u.head->config;
      c.head = std::move(h);
    }
    c.optim = u.optim;
    c.updates = u.updates;
    copy.units.push_back(std::move(c));
  }
  return copy;
}

Tensor LocalModel::predict(const Tensor& x) const {
  Tensor h = x;
  for (const auto& u : units) h = u.block.forward(h);
  return h;
}

LocalModel build_local_model(std::vector<LayerSpec> layers, std::size_t K, std::size_t classes,
                             const TrainConfig& cfg, Rng& init) {
  cfg.validate();
  for (auto& l : layers) init_layer(l, init);
  const auto last = std::find_if(layers.rbegin(), layers.rend(), [](const LayerSpec& l) { return l.parametric(); });
  if (last == layers.rend()) throw ConfigError("model has no parametric layer");
  if (last->out != classes) {
    throw ConfigError("final layer width " + std::to_string(last->out) + " does not match " +
                      std::to_string(classes) + " classes");
  }
  const auto part = partition(std::move(layers), K);
  auto blocks = part.split();
  LocalModel model;
  model.classes = classes;
  for (std::size_t j = 0; j < blocks.size(); ++j) {
    BlockUnit u;
    u.block = std::move(blocks[j]);
    if (j + 1 < blocks.size()) u.head = build_aux_head(part, j, classes, cfg.head, init);
    u.optim = make_local_optimizers(u.block, u.head_ptr(), cfg.optimizer);
    model.units.push_back(std::move(u));
  }
  return model;
}

BlockStepResult train_block_step(BlockUnit& unit, std::size_t j, const Tensor& x, std::span<const int> labels,
                                 double lr_local, double lr_aux, MemoryAccountant* acct,
                                 std::span<const TensorSnapshot> next_first) {
  const std::string phase = "block" + std::to_string(j);
  auto fwd = local_forward(unit.block, unit.head_ptr(), x, acct, phase);
  const Tensor loss = softmax_cross_entropy(fwd.logits, labels);
  const double value = loss.item();
  if (!std::isfinite(value) || value > kDivergenceThreshold) {
    throw DivergenceError("block " + std::to_string(j) + " diverged: loss " + std::to_string(value) +
                          " after " + std::to_string(unit.updates) + " updates");
  }
  BlockStepResult r;
  r.correct = count_correct(fwd.logits, labels);
  r.count = labels.size();
  r.loss = value;
  backward(loss);
  update_local(unit.block, unit.head_ptr(), unit.optim, lr_local, lr_aux);
  ++unit.updates;
  if (unit.head && !next_first.empty()) ema_couple(*unit.head, next_first);
  if (acct) acct->account(phase, -fwd.charged);
  r.next_input = std::move(fwd.next_input);
  return r;
}

bool needs_snapshot(const LocalModel& model, std::size_t j) {
  return j + 1 < model.blocks() && model.units[j].head && model.units[j].head->config.use_ema;
}

std::vector<std::vector<std::size_t>> epoch_batches(std::size_t n, std::size_t batch_size, Rng& shuffle) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::shuffle(order.begin(), order.end(), shuffle);
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t b = 0; b < n; b += batch_size) {
    out.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(b),
                     order.begin() + static_cast<std::ptrdiff_t>(std::min(n, b + batch_size)));
  }
  return out;
}

EpochMetrics train_epoch_sequential(LocalModel& model, const Dataset& data, const TrainConfig& cfg,
                                    std::size_t epoch, Rng& shuffle, MemoryAccountant& acct) {
  const auto start = std::chrono::steady_clock::now();
  const double lr_local = scheduled_lr(cfg.schedule, epoch, cfg.epochs, cfg.lr_local);
  const double lr_aux = scheduled_lr(cfg.schedule, epoch, cfg.epochs, cfg.lr_aux);
  const auto K = model.blocks();
  std::vector<double> loss_sum(K, 0.0);
  std::vector<std::size_t> correct(K, 0);
  acct.reset_peak();

  std::vector<int> labels;
  std::vector<TensorSnapshot> snap;
  const auto batches = epoch_batches(data.size(), cfg.batch_size, shuffle);
  for (const auto& idx : batches) {
    Tensor x = data.batch(idx, labels);
    for (std::size_t j = 0; j < K; ++j) {
      snap.clear();
      if (needs_snapshot(model, j)) snap = model.units[j + 1].block.first_layer_snapshot();
      auto r = train_block_step(model.units[j], j, x, labels, lr_local, lr_aux, &acct, snap);
      loss_sum[j] += r.loss * static_cast<double>(r.count);
      correct[j] += r.correct;
      x = std::move(r.next_input);
    }
  }

  EpochMetrics m;
  m.epoch = epoch;
  m.lr = lr_local;
  m.records = data.size();
  m.peak_scalars = acct.peak();
  const double n = static_cast<double>(data.size());
  for (std::size_t j = 0; j < K; ++j) {
    m.blocks.push_back({loss_sum[j] / n, static_cast<double>(correct[j]) / n});
  }
  m.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
  return m;
}

TrainResult train_sequential(LocalModel& model, const Dataset& train, const Dataset* test, const TrainConfig& cfg) {
  cfg.validate();
  train.validate();
  auto shuffle = make_stream(cfg.seed, "shuffle");
  MemoryAccountant acct;
  TrainResult result;
  for (std::size_t e = 0; e < cfg.epochs; ++e) {
    result.epochs.push_back(train_epoch_sequential(model, train, cfg, e, shuffle, acct));
  }
  if (test) {
    result.test_accuracy = evaluate(model, *test);
    result.test_records = test->size();
  }
  return result;
}

double evaluate(const LocalModel& model, const Dataset& data, std::size_t batch_size) {
  if (data.size() == 0) return 0.0;
  std::size_t hits = 0;
  std::vector<int> labels;
  std::vector<std::size_t> idx;
  for (std::size_t b = 0; b < data.size(); b += batch_size) {
    idx.clear();
    for (std::size_t i = b; i < std::min(data.size(), b + batch_size); ++i) idx.push_back(i);
    const Tensor x = data.batch(idx, labels);
    hits += count_correct(model.predict(x), labels);
  }
  return static_cast<double>(hits) / static_cast<double>(data.size());
}

PeakMeasurement measure_peak_activations(const LocalModel& model, const Tensor& input, std::span<const int> labels) {
  PeakMeasurement out;
  {
    LocalModel copy = model.clone();
    MemoryAccountant acct;
    Tensor x = input;
    std::vector<TensorSnapshot> snap;
    for (std::size_t j = 0; j < copy.blocks(); ++j) {
      snap.clear();
      if (needs_snapshot(copy, j)) snap = copy.units[j + 1].block.first_layer_snapshot();
      x = train_block_step(copy.units[j], j, x, labels, 1e-3, 1e-3, &acct, snap).next_input;
    }
    out.local_peak = acct.peak();
  }
  {
    Block whole;
    for (const auto& u : model.units)
      for (const auto& l : u.block.layers) whole.layers.push_back(l.clone());
    MemoryAccountant acct;
    std::int64_t charged = 0;
    const Tensor logits = whole.forward(input, &acct, "e2e", &charged);
    backward(softmax_cross_entropy(logits, labels));
    acct.account("e2e", -charged);
    out.e2e_peak = acct.peak();
  }
  return out;
}

}  // namespace manpp
