#pragma once

// Output files: metrics CSV, pipeline stats CSV, CKA CSV and cost reports.

#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "manpp/cost_model.hpp"
#include "manpp/pipeline.hpp"
#include "manpp/trainer.hpp"

namespace manpp {

/// `epoch,block,loss,acc,lr,peak_scalars,wall_ms`, one row per block per
/// epoch. wall_ms is written as 0 unless `timing` is set so that repeated runs
/// produce identical files.
std::string metrics_csv(std::span<const EpochMetrics> epochs, bool timing);

/// `worker,busy_frac,idle_frac`
std::string pipeline_stats_csv(const PipelineStats& stats);

/// `layer,cka`
std::string cka_csv(std::span<const double> scores);

/// `block,bias`
std::string probe_csv(std::span<const double> values);

std::string cost_report_json(const CostReport& r);
std::string cost_report_table(const CostReport& r);

/// Shortest round-trip decimal form of `v`.
std::string format_double(double v);

void write_text(const std::filesystem::path& path, const std::string& text);

}  // namespace manpp
