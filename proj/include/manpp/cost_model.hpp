#pragma once

// Closed-form cost calculators for parameters, FLOPs and activation memory of
// a K-block model with L parametric layers, plus exact measurement on an
// instantiated model.
//
// Heads are modelled as "first layer of the next block plus a bias"; the
// classifier projection and the scale s_j are not part of the formulas and
// are reported as a separate surplus when measuring.

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>

#include "manpp/tensor.hpp"
#include "manpp/trainer.hpp"

namespace manpp {

struct CostParams {
  std::size_t L = 1;
  std::size_t K = 1;
  double p_min = 1.0;
  double p_max = 1.0;
  double p_bar = 1.0;
  double beta = 0.0;    // bias-to-mirror parameter ratio
  double beta_f = 0.0;  // bias FLOPs ratio
  double beta_a = 0.0;  // bias activation ratio
  double F = 1.0;       // per-layer FLOPs unit
  double A = 1.0;       // per-layer activation unit
  double eps = 0.1;     // FLOPs budget
  double rho_mem = 0.25;

  double B() const { return static_cast<double>(L) / static_cast<double>(K); }
  double rho() const { return p_max / p_min; }
  /// Throws ConfigError on L = 0, K = 0, K > L, p_min <= 0, p_max < p_min or
  /// negative ratios.
  void validate() const;
};

/// (K - 1) (1 + beta) p_bar
double expected_param_overhead(const CostParams& p);

struct RatioBounds {
  double lower = 1.0;
  double upper = 1.0;
};

/// Published bounds on P_MAN++ / P_E2E:
///   lower = 1 + (1 + beta) / B (1 - 1/K)
///   upper = 1 + rho (1 + beta) / B (1 - 1/K)
RatioBounds param_ratio_bounds(const CostParams& p);

/// Bounds that hold for every layer-size profile in [p_min, p_max]:
///   lower = 1 + (1 + beta) (1 - 1/K) / (rho B), upper as published.
RatioBounds param_ratio_bounds_strict(const CostParams& p);

/// 1 + (K - 1) / L (1 + beta_f / 2)
double flops_ratio(const CostParams& p);

/// Largest integer K with K <= 1 + eps L / (1 + beta_f / 2). A relative slack
/// of 1e-12 absorbs rounding when the bound is an exact integer. Not clamped
/// to L.
std::size_t max_blocks_for_flop_budget(const CostParams& p);

/// 1/K + (1 + beta_a) / L
double memory_ratio(const CostParams& p);

struct MemoryGuideline {
  bool feasible = false;
  std::size_t k_min = 0;  // valid when feasible
  double k_bound = 0.0;   // 1 / (rho_mem - (1 + beta_a) / L)
  bool exceeds_layers = false;
  std::string reason;
};

/// Smallest integer K with K >= 1 / (rho_mem - (1 + beta_a) / L). Infeasible
/// exactly when rho_mem <= (1 + beta_a) / L.
MemoryGuideline min_blocks_for_memory_target(const CostParams& p);

struct MeasuredCosts {
  std::uint64_t params_e2e = 0;
  std::uint64_t params_heads = 0;  // mirrors plus enabled biases
  std::uint64_t params_surplus = 0;  // projections plus scales
  double param_ratio = 1.0;

  std::uint64_t flops_e2e = 0;
  std::uint64_t flops_heads = 0;  // mirrors plus scale/bias
  std::uint64_t flops_projection = 0;
  double flops_ratio = 1.0;
  double flops_ratio_with_projection = 1.0;
  double projection_share = 0.0;  // flops_projection / flops_e2e

  std::int64_t peak_local = 0;
  std::int64_t peak_e2e = 0;
  double peak_ratio = 1.0;
};

struct CostReport {
  CostParams params;
  double delta_p_expected = 0.0;
  double ratio_lower = 1.0;
  double ratio_upper = 1.0;
  double ratio_lower_strict = 1.0;
  double flops_ratio = 1.0;
  std::size_t k_max_flops = 1;
  bool flops_within_budget = true;
  double mem_ratio = 1.0;
  MemoryGuideline memory;
  std::optional<MeasuredCosts> measured;
};

CostReport cost_report(const CostParams& p);

/// Cost parameters read off an instantiated model: L, K, per-layer counts,
/// beta = sum ||b|| / sum ||gamma||, beta_f = 2 sum(lb flops) / sum(mirror
/// flops) and beta_a = sum(bias) / sum(mirror outputs) for `batch` rows.
/// eps and rho_mem come from `base`.
CostParams measure_cost_params(const LocalModel& model, const Shape& sample_shape, std::size_t batch,
                               const CostParams& base = {});

/// Report on the measured parameters plus exact counts: parameter ratio from
/// count_params, FLOPs ratio from count_flops and the peak activation ratio
/// from one local step against one end-to-end pass on a zero batch.
CostReport verify_against_model(const LocalModel& model, const Shape& sample_shape, std::size_t batch,
                                const CostParams& base = {});

}  // namespace manpp
