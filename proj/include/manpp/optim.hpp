#pragma once

// Optimizers and learning-rate schedules.
//
// SGD with Nesterov momentum (velocity v, momentum mu, decoupled decay wd):
//   v <- mu * v + g
//   p <- p - lr * (g + mu * v) - lr * wd * p
// mu = 0 and wd = 0 reduce to p <- p - lr * g exactly.
//
// Adam (bias-corrected, decoupled decay):
//   m <- b1 * m + (1 - b1) * g
//   v <- b2 * v + (1 - b2) * g^2
//   p <- p - lr * (m / (1 - b1^t)) / (sqrt(v / (1 - b2^t)) + eps) - lr * wd * p

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "manpp/tensor.hpp"

namespace manpp {

enum class OptimizerKind { sgd_nesterov, adam };

struct OptimizerConfig {
  OptimizerKind kind = OptimizerKind::sgd_nesterov;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

void validate(const OptimizerConfig& cfg);

void sgd_nesterov_step(std::span<double> param, std::span<const double> grad, std::span<double> velocity,
                       double lr, double momentum, double weight_decay);

/// `step` is the 1-based update count used for bias correction.
void adam_step(std::span<double> param, std::span<const double> grad, std::span<double> m,
               std::span<double> v, std::uint64_t step, double lr, double beta1, double beta2, double eps,
               double weight_decay);

/// Per-parameter optimizer state for a fixed, ordered parameter list.
class OptimizerState {
 public:
  OptimizerState() = default;
  OptimizerState(const OptimizerConfig& cfg, std::span<const Tensor> params);

  /// Applies one update to every parameter and zeros their grads. Throws
  /// UsageError if a parameter has no gradient buffer, InternalError if the
  /// list no longer matches the state shapes.
  void step(std::span<Tensor> params, double lr);

  std::uint64_t steps() const { return steps_; }
  const OptimizerConfig& config() const { return cfg_; }

 private:
  OptimizerConfig cfg_;
  std::vector<std::vector<double>> first_;
  std::vector<std::vector<double>> second_;
  std::uint64_t steps_ = 0;
};

enum class Schedule { cosine, constant };

/// 0.5 * base * (1 + cos(pi * t / total)). Throws ConfigError when total = 0
/// or t > total.
double cosine_lr(std::size_t t, std::size_t total, double base);

/// Learning rate for epoch `epoch` of `epochs` under `schedule`.
double scheduled_lr(Schedule schedule, std::size_t epoch, std::size_t epochs, double base);

}  // namespace manpp
