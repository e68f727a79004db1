#include "manpp/cost_model.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "manpp/analysis.hpp"
#include "manpp/errors.hpp"

namespace manpp {

namespace {

constexpr double kGuidelineSlack = 1e-12;

}  // namespace

void CostParams::validate() const {
  if (L == 0) throw ConfigError("L must be >= 1");
  if (K == 0 || K > L) throw ConfigError("K must lie in [1, L], got K=" + std::to_string(K) + " L=" + std::to_string(L));
  if (!(p_min > 0.0) || p_max < p_min) throw ConfigError("need 0 < p_min <= p_max");
  if (beta < 0.0 || beta_f < 0.0 || beta_a < 0.0) throw ConfigError("bias ratios must be >= 0");
  if (eps < 0.0) throw ConfigError("FLOPs budget eps must be >= 0");
}

double expected_param_overhead(const CostParams& p) {
  return static_cast<double>(p.K - 1) * (1.0 + p.beta) * p.p_bar;
}

RatioBounds param_ratio_bounds(const CostParams& p) {
  const double base = (1.0 + p.beta) / p.B() * (1.0 - 1.0 / static_cast<double>(p.K));
  return {1.0 + base, 1.0 + p.rho() * base};
}

RatioBounds param_ratio_bounds_strict(const CostParams& p) {
  const double base = (1.0 + p.beta) / p.B() * (1.0 - 1.0 / static_cast<double>(p.K));
  return {1.0 + base / p.rho(), 1.0 + p.rho() * base};
}

double flops_ratio(const CostParams& p) {
  return 1.0 + static_cast<double>(p.K - 1) / static_cast<double>(p.L) * (1.0 + p.beta_f / 2.0);
}

std::size_t max_blocks_for_flop_budget(const CostParams& p) {
  const double bound = 1.0 + p.eps * static_cast<double>(p.L) / (1.0 + p.beta_f / 2.0);
  return static_cast<std::size_t>(std::floor(bound * (1.0 + kGuidelineSlack)));
}

double memory_ratio(const CostParams& p) {
  return 1.0 / static_cast<double>(p.K) + (1.0 + p.beta_a) / static_cast<double>(p.L);
}

MemoryGuideline min_blocks_for_memory_target(const CostParams& p) {
  MemoryGuideline g;
  const double floor_ratio = (1.0 + p.beta_a) / static_cast<double>(p.L);
  if (p.rho_mem <= floor_ratio) {
    g.reason = "target " + std::to_string(p.rho_mem) + " is at or below the head floor (1 + beta_a) / L = " +
               std::to_string(floor_ratio);
    return g;
  }
  g.feasible = true;
  g.k_bound = 1.0 / (p.rho_mem - floor_ratio);
  g.k_min = std::max<std::size_t>(1, static_cast<std::size_t>(std::ceil(g.k_bound * (1.0 - kGuidelineSlack))));
  g.exceeds_layers = g.k_min > p.L;
  return g;
}

CostReport cost_report(const CostParams& p) {
  p.validate();
  CostReport r;
  r.params = p;
  r.delta_p_expected = expected_param_overhead(p);
  const auto b = param_ratio_bounds(p);
  r.ratio_lower = b.lower;
  r.ratio_upper = b.upper;
  r.ratio_lower_strict = param_ratio_bounds_strict(p).lower;
  r.flops_ratio = flops_ratio(p);
  r.k_max_flops = max_blocks_for_flop_budget(p);
  r.flops_within_budget = p.K <= r.k_max_flops;
  r.mem_ratio = memory_ratio(p);
  r.memory = min_blocks_for_memory_target(p);
  return r;
}

CostParams measure_cost_params(const LocalModel& model, const Shape& sample_shape, std::size_t batch,
                               const CostParams& base) {
  Shape input{batch};
  input.insert(input.end(), sample_shape.begin(), sample_shape.end());
  const auto pc = count_params(model);
  const auto fc = count_flops(model, input);

  CostParams p = base;
  p.L = pc.layers.size();
  p.K = model.blocks();
  p.p_min = static_cast<double>(*std::min_element(pc.layers.begin(), pc.layers.end()));
  p.p_max = static_cast<double>(*std::max_element(pc.layers.begin(), pc.layers.end()));
  p.p_bar = static_cast<double>(std::accumulate(pc.layers.begin(), pc.layers.end(), std::size_t{0})) /
            static_cast<double>(p.L);
  p.F = static_cast<double>(fc.total.backbone) / static_cast<double>(p.L);
  p.beta = pc.total.gamma ? static_cast<double>(pc.total.bias) / static_cast<double>(pc.total.gamma) : 0.0;
  p.beta_f = fc.total.mirror ? 2.0 * static_cast<double>(fc.total.lb) / static_cast<double>(fc.total.mirror) : 0.0;

  // Activation units follow the accountant: one scalar per parametric layer
  // output, the head bias charged once per batch.
  std::uint64_t mirror_out = 0, bias = 0, act = 0;
  Shape shape = input;
  for (const auto& u : model.units) {
    for (const auto& l : u.block.layers) {
      shape = l.output_shape(shape);
      if (l.parametric()) act += shape_numel(shape);
    }
    if (u.head) {
      mirror_out += shape_numel(u.head->mirror.output_shape(shape));
      bias += u.head->config.use_lb ? u.head->bias.numel() : 0;
    }
  }
  p.A = static_cast<double>(act) / static_cast<double>(p.L);
  p.beta_a = mirror_out ? static_cast<double>(bias) / static_cast<double>(mirror_out) : 0.0;
  return p;
}

CostReport verify_against_model(const LocalModel& model, const Shape& sample_shape, std::size_t batch,
                                const CostParams& base) {
  const CostParams p = measure_cost_params(model, sample_shape, batch, base);
  CostReport r = cost_report(p);

  Shape input{batch};
  input.insert(input.end(), sample_shape.begin(), sample_shape.end());
  const auto pc = count_params(model);
  const auto fc = count_flops(model, input);

  MeasuredCosts m;
  m.params_e2e = pc.total.theta;
  m.params_heads = pc.total.gamma + pc.total.bias;
  m.params_surplus = pc.total.projection + pc.total.scale;
  m.param_ratio = static_cast<double>(m.params_e2e + m.params_heads) / static_cast<double>(m.params_e2e);

  m.flops_e2e = fc.total.backbone;
  m.flops_heads = fc.total.mirror + fc.total.lb;
  m.flops_projection = fc.total.projection;
  m.flops_ratio = static_cast<double>(m.flops_e2e + m.flops_heads) / static_cast<double>(m.flops_e2e);
  m.flops_ratio_with_projection =
      static_cast<double>(m.flops_e2e + m.flops_heads + m.flops_projection) / static_cast<double>(m.flops_e2e);
  m.projection_share = static_cast<double>(m.flops_projection) / static_cast<double>(m.flops_e2e);

  const Tensor x = Tensor::zeros(input);
  const std::vector<int> labels(batch, 0);
  const auto peak = measure_peak_activations(model, x, labels);
  m.peak_local = peak.local_peak;
  m.peak_e2e = peak.e2e_peak;
  m.peak_ratio = peak.ratio();
  r.measured = m;
  return r;
}

}  // namespace manpp
