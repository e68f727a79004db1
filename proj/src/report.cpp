#include "manpp/report.hpp"

#include <charconv>
#include <fstream>
#include <json.hpp>
#include <sstream>

#include "manpp/errors.hpp"

namespace manpp {

std::string format_double(double v) {
  char buf[64];
  const auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
  if (ec != std::errc{}) throw InternalError("cannot format double");
  return std::string(buf, ptr);
}

std::string metrics_csv(std::span<const EpochMetrics> epochs, bool timing) {
  std::ostringstream os;
  os << "epoch,block,loss,acc,lr,peak_scalars,wall_ms\n";
  for (const auto& e : epochs) {
    for (std::size_t j = 0; j < e.blocks.size(); ++j) {
      os << e.epoch << ',' << j << ',' << format_double(e.blocks[j].loss) << ',' << format_double(e.blocks[j].acc)
         << ',' << format_double(e.lr) << ',' << e.peak_scalars << ',' << format_double(timing ? e.wall_ms : 0.0)
         << '\n';
    }
  }
  return os.str();
}

std::string pipeline_stats_csv(const PipelineStats& stats) {
  std::ostringstream os;
  os << "worker,busy_frac,idle_frac\n";
  for (const auto& w : stats.workers) {
    os << w.worker << ',' << format_double(w.busy_frac) << ',' << format_double(w.idle_frac) << '\n';
  }
  return os.str();
}

std::string cka_csv(std::span<const double> scores) {
  std::ostringstream os;
  os << "layer,cka\n";
  for (std::size_t i = 0; i < scores.size(); ++i) os << i << ',' << format_double(scores[i]) << '\n';
  return os.str();
}

std::string probe_csv(std::span<const double> values) {
  std::ostringstream os;
  os << "block,bias\n";
  for (std::size_t i = 0; i < values.size(); ++i) os << i << ',' << format_double(values[i]) << '\n';
  return os.str();
}

std::string cost_report_json(const CostReport& r) {
  using nlohmann::json;
  const auto& p = r.params;
  json j;
  j["inputs"] = {{"L", p.L},       {"K", p.K},         {"B", p.B()},           {"p_min", p.p_min},
                 {"p_max", p.p_max}, {"p_bar", p.p_bar}, {"rho", p.rho()},      {"beta", p.beta},
                 {"beta_f", p.beta_f}, {"beta_a", p.beta_a}, {"eps", p.eps},    {"rho_mem", p.rho_mem}};
  j["params"] = {{"delta_p_expected", r.delta_p_expected},
                 {"ratio_lower", r.ratio_lower},
                 {"ratio_upper", r.ratio_upper},
                 {"ratio_lower_strict", r.ratio_lower_strict}};
  j["flops"] = {{"ratio", r.flops_ratio}, {"k_max", r.k_max_flops}, {"within_budget", r.flops_within_budget}};
  j["memory"] = {{"ratio", r.mem_ratio}, {"feasible", r.memory.feasible}};
  if (r.memory.feasible) {
    j["memory"]["k_min"] = r.memory.k_min;
    j["memory"]["k_bound"] = r.memory.k_bound;
    j["memory"]["exceeds_layers"] = r.memory.exceeds_layers;
  } else {
    j["memory"]["reason"] = r.memory.reason;
  }
  if (r.measured) {
    const auto& m = *r.measured;
    j["measured"] = {{"params_e2e", m.params_e2e},
                     {"params_heads", m.params_heads},
                     {"params_surplus", m.params_surplus},
                     {"param_ratio", m.param_ratio},
                     {"param_ratio_within_bounds", m.param_ratio >= r.ratio_lower && m.param_ratio <= r.ratio_upper},
                     {"flops_e2e", m.flops_e2e},
                     {"flops_heads", m.flops_heads},
                     {"flops_projection", m.flops_projection},
                     {"flops_ratio", m.flops_ratio},
                     {"flops_ratio_with_projection", m.flops_ratio_with_projection},
                     {"projection_share", m.projection_share},
                     {"peak_local", m.peak_local},
                     {"peak_e2e", m.peak_e2e},
                     {"peak_ratio", m.peak_ratio}};
  }
  j["notes"] = json::array(
      {"flops ratio counts forward FLOPs of the mirror layers; at K = L it approaches 2 + beta_f / 2. A worst-case "
       "increase of about 51% corresponds to a baseline that also counts backward FLOPs",
       "the memory ratio includes the head term even at K = 1, so it exceeds the head-free reference of 1"});
  return j.dump(2) + "\n";
}

std::string cost_report_table(const CostReport& r) {
  const auto& p = r.params;
  std::ostringstream os;
  auto row = [&](const std::string& k, const std::string& v) { os << "  " << k << std::string(30 - k.size(), ' ') << v << '\n'; };
  os << "inputs\n";
  row("L / K / B", std::to_string(p.L) + " / " + std::to_string(p.K) + " / " + format_double(p.B()));
  row("p_min / p_max / p_bar", format_double(p.p_min) + " / " + format_double(p.p_max) + " / " + format_double(p.p_bar));
  row("beta / beta_f / beta_a", format_double(p.beta) + " / " + format_double(p.beta_f) + " / " + format_double(p.beta_a));
  os << "parameters\n";
  row("expected overhead", format_double(r.delta_p_expected));
  row("ratio bounds", "[" + format_double(r.ratio_lower) + ", " + format_double(r.ratio_upper) + "]");
  row("ratio lower (any profile)", format_double(r.ratio_lower_strict));
  os << "flops\n";
  row("ratio", format_double(r.flops_ratio));
  row("K_max for eps=" + format_double(p.eps), std::to_string(r.k_max_flops) + (r.flops_within_budget ? " (K within budget)" : " (K over budget)"));
  os << "memory\n";
  row("ratio", format_double(r.mem_ratio));
  if (r.memory.feasible) {
    row("K_min for target " + format_double(p.rho_mem),
        std::to_string(r.memory.k_min) + " (bound " + format_double(r.memory.k_bound) + ")" +
            (r.memory.exceeds_layers ? ", exceeds L" : ""));
  } else {
    row("K_min for target " + format_double(p.rho_mem), "infeasible: " + r.memory.reason);
  }
  if (r.measured) {
    const auto& m = *r.measured;
    os << "measured\n";
    row("param ratio", format_double(m.param_ratio) + " (+" + std::to_string(m.params_surplus) + " projection/scale params)");
    row("flops ratio", format_double(m.flops_ratio) + " (" + format_double(m.flops_ratio_with_projection) + " with projection)");
    row("peak activation ratio", format_double(m.peak_ratio) + " (" + std::to_string(m.peak_local) + " / " + std::to_string(m.peak_e2e) + ")");
  }
  os << "note: at K = L the flops ratio is about 2 + beta_f / 2 (forward FLOPs only; an increase of about 51% "
        "corresponds to a baseline that also counts backward FLOPs)\n";
  return os.str();
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
  if (!out) throw std::runtime_error("failed writing " + path.string());
}

}  // namespace manpp
