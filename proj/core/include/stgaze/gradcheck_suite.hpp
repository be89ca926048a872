#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace stgaze {

enum class GradcheckScale { kTiny, kSmall };

struct FamilyReport {
  std::string family;
  double worst_rel_err = 0.0;
  std::string worst_param;
  int seeds = 0;
  std::int64_t entries = 0;
  double seconds = 0.0;
};

struct SuiteReport {
  std::vector<FamilyReport> families;
  double total_seconds = 0.0;

  bool pass(double tolerance = 1e-4) const {
    for (const auto& f : families) {
      if (!(f.worst_rel_err < tolerance)) return false;
    }
    return true;
  }
};

// Runs reverse-mode-vs-finite-difference checks over every layer family in
// 64-bit precision with h = 1e-5 and 20 random seeds per family. The tiny
// scale uses a micro end-to-end model; the small scale additionally sweeps
// the miniature full model at larger widths.
SuiteReport run_gradcheck_suite(GradcheckScale scale);

}  // namespace stgaze
