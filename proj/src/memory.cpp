#include "manpp/memory.hpp"

#include <algorithm>

#include "manpp/errors.hpp"

namespace manpp {

void MemoryAccountant::account(std::string_view phase, std::int64_t delta) {
  if (live_ + delta < 0) {
    throw InternalError("activation release below zero in phase '" + std::string(phase) + "' (live " +
                        std::to_string(live_) + ", delta " + std::to_string(delta) + ")");
  }
  live_ += delta;
  peak_ = std::max(peak_, live_);
  auto it = phases_.find(phase);
  if (it == phases_.end()) it = phases_.emplace(std::string(phase), PhaseStats{}).first;
  auto& stats = it->second;
  if (delta >= 0) {
    stats.allocated += delta;
  } else {
    stats.released -= delta;
  }
  stats.peak_live = std::max(stats.peak_live, live_);
}

}  // namespace manpp
