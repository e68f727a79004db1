#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <string_view>

namespace manpp {

/// Tracks live activation scalars retained for backward and their running
/// peak. Counts activation units only, never parameters.
///
/// Charging convention (one "layer unit" = one parametric layer plus the
/// parameter-free layers that follow it):
///   - each parametric layer charges its output element count (A_i);
///   - an auxiliary head charges its mirror layer output (A) and, with the
///     learnable bias on, the bias element count (the beta_A * A term);
///   - the head's classifier projection is not charged; it is reported as a
///     separate surplus by the cost model.
class MemoryAccountant {
 public:
  struct PhaseStats {
    std::int64_t allocated = 0;
    std::int64_t released = 0;
    std::int64_t peak_live = 0;
  };

  /// Positive delta allocates, negative releases. Throws InternalError if the
  /// live count would go negative.
  void account(std::string_view phase, std::int64_t delta);

  std::int64_t live() const { return live_; }
  std::int64_t peak() const { return peak_; }
  const std::map<std::string, PhaseStats, std::less<>>& phases() const { return phases_; }
  void reset_peak() { peak_ = live_; }

 private:
  std::int64_t live_ = 0;
  std::int64_t peak_ = 0;
  std::map<std::string, PhaseStats, std::less<>> phases_;
};

}  // namespace manpp
