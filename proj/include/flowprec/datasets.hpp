#ifndef FLOWPREC_DATASETS_HPP
#define FLOWPREC_DATASETS_HPP

#include "flowprec/common.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace flowprec::targets {

/// Binary-outcome design matrix. The last feature column is a constant
/// intercept; the others are standardized over the full file.
struct CreditDataset {
  static constexpr Index kNumericAttributes = 24;
  static constexpr Index kFeatures = kNumericAttributes + 1;

  Matrix features;          // n x 25
  std::vector<int> labels;  // 0 or 1

  Index n_rows() const { return features.rows(); }
  /// First k rows in file order, keeping the full-file standardization.
  CreditDataset head(Index k) const;
};

/// Household radon measurements. County codes are re-indexed to
/// 0..num_counties-1 in ascending code order over the full file.
struct RadonDataset {
  std::vector<int> county;  // 0-based
  std::vector<int> floor;   // 0 or 1
  std::vector<double> log_radon;
  int num_counties = 0;

  Index n_rows() const { return static_cast<Index>(county.size()); }
  /// First k rows in file order; the county count is unchanged.
  RadonDataset head(Index k) const;
};

/// Whitespace- or comma-delimited numeric rows: 24 attributes followed by
/// the label. Labels coded {1, 2} are mapped to {0, 1}; files already coded
/// {0, 1} are taken as is.
CreditDataset load_credit(const std::string& path);
/// Columns county_code, floor, log_radon; an optional header line is skipped.
RadonDataset load_radon(const std::string& path);

/// Deterministic stand-in data with the same schema as the public files,
/// for environments where those are not available.
void write_synthetic_credit(const std::string& path, Index rows, std::uint64_t seed);
void write_synthetic_radon(const std::string& path, Index rows, int counties, std::uint64_t seed);

}  // namespace flowprec::targets

#endif  // FLOWPREC_DATASETS_HPP
