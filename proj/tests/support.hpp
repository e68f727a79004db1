#pragma once

// Helpers shared by the unit tests and the acceptance binary.

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "manpp/data.hpp"
#include "manpp/model.hpp"
#include "manpp/optim.hpp"
#include "manpp/tensor.hpp"
#include "manpp/trainer.hpp"

namespace manpp::testing {

inline Tensor random_tensor(const Shape& shape, Rng& rng, bool requires_grad = false, double lo = -1.0,
                            double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = u(rng);
  return Tensor(shape, std::move(v), requires_grad);
}

/// Values bounded away from zero so relu kinks stay out of FD stencils.
inline Tensor random_nonzero(const Shape& shape, Rng& rng, bool requires_grad = false) {
  std::uniform_real_distribution<double> u(0.05, 1.0);
  std::bernoulli_distribution sign(0.5);
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = sign(rng) ? u(rng) : -u(rng);
  return Tensor(shape, std::move(v), requires_grad);
}

/// Scalar loss from any tensor: sum(out * r) for fixed random weights r.
inline Tensor probe_loss(const Tensor& out, Rng& rng) {
  return sum(mul(out, random_tensor(out.shape(), rng)));
}

struct GradCheck {
  double max_rel_error = 0.0;
  std::size_t entries = 0;
};

/// Central finite differences against backward() for every input that
/// requires grad. Relative error uses max(|analytic|, |numeric|, floor) as
/// the denominator.
inline GradCheck finite_difference_check(const std::function<Tensor(const std::vector<Tensor>&)>& f,
                                         std::vector<Tensor> inputs, double h = 1e-5, double floor = 1e-3) {
  for (auto& t : inputs) t.zero_grad();
  backward(f(inputs));
  GradCheck out;
  for (auto& t : inputs) {
    if (!t.requires_grad()) continue;
    const std::vector<double> analytic(t.grad().begin(), t.grad().end());
    auto data = t.mutable_data();
    for (std::size_t i = 0; i < data.size(); ++i) {
      const double keep = data[i];
      data[i] = keep + h;
      const double up = f(inputs).item();
      data[i] = keep - h;
      const double down = f(inputs).item();
      data[i] = keep;
      const double numeric = (up - down) / (2.0 * h);
      const double denom = std::max({std::abs(analytic[i]), std::abs(numeric), floor});
      out.max_rel_error = std::max(out.max_rel_error, std::abs(analytic[i] - numeric) / denom);
      ++out.entries;
    }
  }
  return out;
}

/// linear/relu stack with the given widths; no relu after the last layer.
inline std::vector<LayerSpec> mlp(const std::vector<std::size_t>& widths) {
  std::vector<LayerSpec> layers;
  for (std::size_t i = 0; i + 1 < widths.size(); ++i) {
    layers.push_back(LayerSpec::linear(widths[i], widths[i + 1]));
    if (i + 2 < widths.size()) layers.push_back(LayerSpec::relu());
  }
  return layers;
}

inline TrainConfig small_config(std::size_t epochs = 2, std::size_t batch = 16) {
  TrainConfig cfg;
  cfg.epochs = epochs;
  cfg.batch_size = batch;
  cfg.lr_local = 0.05;
  cfg.lr_aux = 0.05;
  return cfg;
}

inline HeadConfig all_off() {
  HeadConfig h;
  h.use_ema = false;
  h.use_lb = false;
  h.use_scalable = false;
  return h;
}

inline bool bitwise_equal(const std::vector<TensorSnapshot>& a, const std::vector<TensorSnapshot>& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i].shape != b[i].shape || a[i].data.size() != b[i].data.size()) return false;
    for (std::size_t k = 0; k < a[i].data.size(); ++k) {
      if (std::bit_cast<std::uint64_t>(a[i].data[k]) != std::bit_cast<std::uint64_t>(b[i].data[k])) return false;
    }
  }
  return true;
}

/// Plain local learning written without any head-coupling code: each block
/// gets a classifier made of a copy of the next block's first layer, a relu
/// and a linear projection, trained with its own optimizers. Initialization
/// draws follow build_local_model so the two can be compared bitwise.
struct BaselineLocalNet {
  std::vector<std::vector<LayerSpec>> blocks;
  std::vector<LayerSpec> mirrors, projections;
  std::vector<OptimizerState> block_opt, mirror_opt, proj_opt;

  BaselineLocalNet(std::vector<LayerSpec> layers, std::size_t K, std::size_t classes, const TrainConfig& cfg,
                   Rng& init) {
    for (auto& l : layers) init_layer(l, init);
    const auto part = partition(std::move(layers), K);
    for (std::size_t j = 0; j < K; ++j) {
      const auto span = part.block_layers(j);
      std::vector<LayerSpec> b;
      for (const auto& l : span) b.push_back(l.clone());
      blocks.push_back(std::move(b));
    }
    for (std::size_t j = 0; j + 1 < K; ++j) {
      mirrors.push_back(blocks[j + 1].front().clone());
      auto proj = LayerSpec::linear(mirrors.back().out, classes);
      init_layer(proj, init);
      projections.push_back(std::move(proj));
    }
    for (std::size_t j = 0; j < K; ++j) {
      block_opt.emplace_back(cfg.optimizer, params_of(blocks[j]));
      if (j + 1 < K) {
        mirror_opt.emplace_back(cfg.optimizer, mirrors[j].params());
        proj_opt.emplace_back(cfg.optimizer, projections[j].params());
      }
    }
  }

  static std::vector<Tensor> params_of(const std::vector<LayerSpec>& b) {
    std::vector<Tensor> out;
    for (const auto& l : b)
      for (auto& p : l.params()) out.push_back(p);
    return out;
  }

  void train(const Dataset& data, const TrainConfig& cfg) {
    auto shuffle = make_stream(cfg.seed, "shuffle");
    std::vector<int> labels;
    for (std::size_t e = 0; e < cfg.epochs; ++e) {
      const double lr_l = scheduled_lr(cfg.schedule, e, cfg.epochs, cfg.lr_local);
      const double lr_a = scheduled_lr(cfg.schedule, e, cfg.epochs, cfg.lr_aux);
      for (const auto& idx : epoch_batches(data.size(), cfg.batch_size, shuffle)) {
        Tensor x = data.batch(idx, labels);
        for (std::size_t j = 0; j < blocks.size(); ++j) {
          Tensor h = x;
          for (const auto& l : blocks[j]) h = l.forward(h);
          Tensor logits = h;
          if (j + 1 < blocks.size()) logits = projections[j].forward(relu(mirrors[j].forward(h)));
          backward(softmax_cross_entropy(logits, labels));
          auto bp = params_of(blocks[j]);
          block_opt[j].step(bp, lr_l);
          if (j + 1 < blocks.size()) {
            auto mp = mirrors[j].params();
            mirror_opt[j].step(mp, lr_a);
            auto pp = projections[j].params();
            proj_opt[j].step(pp, lr_a);
          }
          x = h.detach();
        }
      }
    }
  }

  /// Backbone params then, per head, mirror and projection params.
  std::vector<TensorSnapshot> snapshot() const {
    std::vector<TensorSnapshot> out;
    for (const auto& b : blocks)
      for (const auto& p : params_of(b)) out.push_back(p.snapshot());
    for (std::size_t j = 0; j < mirrors.size(); ++j) {
      for (const auto& p : mirrors[j].params()) out.push_back(p.snapshot());
      for (const auto& p : projections[j].params()) out.push_back(p.snapshot());
    }
    return out;
  }
};

/// Same ordering as BaselineLocalNet::snapshot().
inline std::vector<TensorSnapshot> backbone_mirror_projection(const LocalModel& m) {
  std::vector<TensorSnapshot> out;
  for (const auto& u : m.units)
    for (const auto& p : u.block.params()) out.push_back(p.snapshot());
  for (const auto& u : m.units) {
    if (!u.head) continue;
    for (const auto& p : u.head->mirror.params()) out.push_back(p.snapshot());
    for (const auto& p : u.head->projection.params()) out.push_back(p.snapshot());
  }
  return out;
}

/// Two-class blobs reshaped for a model with `dim` inputs.
inline Dataset blobs(std::size_t n, std::size_t dim, std::size_t classes, std::uint64_t seed, double noise = 0.5) {
  auto rng = make_stream(seed, "data");
  return gen_blobs({classes, dim, n, noise}, rng);
}

}  // namespace manpp::testing
