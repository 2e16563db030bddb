#ifndef FLOWPREC_DIAGNOSTICS_HPP
#define FLOWPREC_DIAGNOSTICS_HPP

#include "flowprec/common.hpp"

#include <cstdint>
#include <functional>
#include <string>

namespace flowprec::diagnostics {

struct EssReport {
  Vector bulk;
  Vector tail;
  double min_bulk = 0.0;
  double min_tail = 0.0;
  std::size_t chains = 0;
  Index steps = 0;
};

/// ESS of a (steps x chains) matrix by the multi-chain autocorrelation
/// estimator with Geyer's initial monotone sequence. No splitting or rank
/// normalization is applied here. A constant input gives 0.
double ess_raw(const Matrix& sims);

/// Average ranks mapped through the normal quantile of (r - 3/8)/(N + 1/4).
/// Input and output have the same (steps x chains) shape.
Matrix rank_normalize(const Matrix& sims);

/// Splits each chain into halves (the middle draw of an odd chain is
/// dropped), giving a (steps/2 x 2*chains) matrix.
Matrix split_chains(const Matrix& sims);

/// Extracts coordinate `d` of every chain as a (steps x chains) matrix.
Matrix coordinate(const Draws& draws, Index d);

/// Rank-normalized split-chain ESS per coordinate. Needs >= 2 chains of >= 4
/// draws; constant coordinates report 0 with a warning.
Vector bulk_ess(const Draws& draws);

/// min over q in {0.05, 0.95} of the split-chain ESS of I(x <= Q_q), with
/// Q_q the pooled type-7 quantile.
Vector tail_ess(const Draws& draws);

EssReport ess_report(const Draws& draws);

enum class Kernel { Rbf, Imq };
Kernel parse_kernel(const std::string& name);
std::string to_string(Kernel k);

struct KsdConfig {
  Index subsample = 250;
  int trials = 150;
  Kernel kernel = Kernel::Imq;
  std::uint64_t seed = 0;
};

struct KsdEstimate {
  double value = 0.0;      // mean over trials of sqrt(V-statistic)
  Index subsample_size = 0;
  int trials = 0;
  Kernel kernel = Kernel::Imq;
  double bandwidth = 0.0;  // mean median-heuristic bandwidth
};

/// Stein discrepancy of one sample set against a score (rows are points).
/// Returns the V-statistic, i.e. the squared discrepancy.
double ksd_vstat(const Matrix& points, const Matrix& scores, Kernel kernel, double bandwidth);

/// Median pairwise Euclidean distance (1 if all points coincide).
double median_bandwidth(const Matrix& points);

/// Averages sqrt(V) over trials, each on `subsample` rows drawn without
/// replacement. Scores are evaluated once per draw.
KsdEstimate ksd(const Matrix& draws, const std::function<Vector(const Vector&)>& score,
                const KsdConfig& config);

/// Draws stacked chain after chain.
Matrix pool(const Draws& draws);

}  // namespace flowprec::diagnostics

#endif  // FLOWPREC_DIAGNOSTICS_HPP
