#include "manpp/optim.hpp"

#include <cmath>
#include <numbers>

#include "manpp/errors.hpp"

namespace manpp {

void validate(const OptimizerConfig& cfg) {
  if (!(cfg.momentum >= 0.0 && cfg.momentum < 1.0)) throw ConfigError("momentum must lie in [0, 1)");
  if (!(cfg.weight_decay >= 0.0)) throw ConfigError("weight decay must be >= 0");
  if (!(cfg.beta1 >= 0.0 && cfg.beta1 < 1.0) || !(cfg.beta2 >= 0.0 && cfg.beta2 < 1.0)) {
    throw ConfigError("Adam betas must lie in [0, 1)");
  }
  if (!(cfg.eps > 0.0)) throw ConfigError("Adam eps must be > 0");
}

void sgd_nesterov_step(std::span<double> param, std::span<const double> grad, std::span<double> velocity,
                       double lr, double momentum, double weight_decay) {
  if (param.size() != grad.size() || param.size() != velocity.size()) {
    throw InternalError("sgd_nesterov_step: parameter, gradient and velocity sizes differ");
  }
  for (std::size_t i = 0; i < param.size(); ++i) {
    const double p = param[i];
    double update = grad[i];
    if (momentum != 0.0) {
      velocity[i] = momentum * velocity[i] + grad[i];
      update = grad[i] + momentum * velocity[i];
    }
    double next = p - lr * update;
    if (weight_decay != 0.0) next -= lr * weight_decay * p;
    param[i] = next;
  }
}

void adam_step(std::span<double> param, std::span<const double> grad, std::span<double> m,
               std::span<double> v, std::uint64_t step, double lr, double beta1, double beta2, double eps,
               double weight_decay) {
  if (param.size() != grad.size() || param.size() != m.size() || param.size() != v.size()) {
    throw InternalError("adam_step: parameter, gradient and moment sizes differ");
  }
  if (step == 0) throw InternalError("adam_step: step count is 1-based");
  const double t = static_cast<double>(step);
  const double c1 = 1.0 - std::pow(beta1, t);
  const double c2 = 1.0 - std::pow(beta2, t);
  for (std::size_t i = 0; i < param.size(); ++i) {
    const double g = grad[i];
    const double p = param[i];
    m[i] = beta1 * m[i] + (1.0 - beta1) * g;
    v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
    const double mhat = m[i] / c1;
    const double vhat = v[i] / c2;
    double next = p - lr * mhat / (std::sqrt(vhat) + eps);
    if (weight_decay != 0.0) next -= lr * weight_decay * p;
    param[i] = next;
  }
}

OptimizerState::OptimizerState(const OptimizerConfig& cfg, std::span<const Tensor> params) : cfg_(cfg) {
  validate(cfg);
  for (const auto& p : params) {
    first_.emplace_back(p.numel(), 0.0);
    if (cfg.kind == OptimizerKind::adam) second_.emplace_back(p.numel(), 0.0);
  }
}

void OptimizerState::step(std::span<Tensor> params, double lr) {
  if (params.size() != first_.size()) {
    throw InternalError("optimizer state tracks " + std::to_string(first_.size()) + " parameters, got " +
                        std::to_string(params.size()));
  }
  ++steps_;
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = params[i];
    if (!p.requires_grad()) throw UsageError("optimizer step on a parameter without gradients");
    if (p.numel() != first_[i].size()) throw InternalError("optimizer state shape drift");
    auto grad = p.grad();
    if (cfg_.kind == OptimizerKind::sgd_nesterov) {
      sgd_nesterov_step(p.mutable_data(), grad, first_[i], lr, cfg_.momentum, cfg_.weight_decay);
    } else {
      adam_step(p.mutable_data(), grad, first_[i], second_[i], steps_, lr, cfg_.beta1, cfg_.beta2, cfg_.eps,
                cfg_.weight_decay);
    }
    p.zero_grad();
  }
}

double cosine_lr(std::size_t t, std::size_t total, double base) {
  if (total == 0) throw ConfigError("cosine schedule needs a positive horizon");
  if (t > total) throw ConfigError("cosine schedule step beyond horizon");
  const double frac = static_cast<double>(t) / static_cast<double>(total);
  return 0.5 * base * (1.0 + std::cos(std::numbers::pi * frac));
}

double scheduled_lr(Schedule schedule, std::size_t epoch, std::size_t epochs, double base) {
  return schedule == Schedule::cosine ? cosine_lr(epoch, epochs, base) : base;
}

}  // namespace manpp
