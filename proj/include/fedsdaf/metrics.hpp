#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace fedsdaf {

// One evaluation row. Round 0 is the pre-training snapshot; round r > 0 is
// measured after the r-th aggregation. Branch accuracies are NaN when the
// corresponding adapter is disabled (written as empty CSV cells).
struct RoundMetrics {
  std::size_t round = 0;
  double acc_fused = 0.0;
  double acc_di = 0.0;
  double acc_dw = 0.0;
  double loss_ce = 0.0;
  double loss_di_kl = 0.0;
  double loss_dw_kl = 0.0;
  double alpha_t = 0.0;
  std::uint64_t down_bytes = 0;
  std::uint64_t up_bytes = 0;
};

void write_metrics_csv(const std::vector<RoundMetrics>& rows,
                       const std::string& path);
std::vector<RoundMetrics> read_metrics_csv(const std::string& path);

// Lossless text form of a double ("%.17g"), used by every CSV writer so
// files round-trip bit-exactly.
std::string format_double(double v);

}  // namespace fedsdaf
