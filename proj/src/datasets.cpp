#include "flowprec/datasets.hpp"

#include <algorithm>
#include <array>
#include <cerrno>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <map>
#include <sstream>

namespace flowprec::targets {

namespace {

std::vector<std::string> split_fields(const std::string& line) {
  std::vector<std::string> out;
  std::string current;
  for (char c : line) {
    if (c == ',' || c == ' ' || c == '\t' || c == '\r' || c == ';') {
      if (!current.empty()) out.push_back(std::move(current));
      current.clear();
    } else {
      current.push_back(c);
    }
  }
  if (!current.empty()) out.push_back(std::move(current));
  return out;
}

bool parse_double(const std::string& token, double& value) {
  errno = 0;
  char* end = nullptr;
  value = std::strtod(token.c_str(), &end);
  return errno == 0 && end == token.c_str() + token.size() && std::isfinite(value);
}

std::ifstream open_or_throw(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open '" + path + "'", 0);
  return in;
}

}  // namespace

CreditDataset CreditDataset::head(Index k) const {
  k = std::clamp<Index>(k, 0, n_rows());
  CreditDataset out;
  out.features = features.topRows(k);
  out.labels.assign(labels.begin(), labels.begin() + k);
  return out;
}

RadonDataset RadonDataset::head(Index k) const {
  const auto n = static_cast<std::size_t>(std::clamp<Index>(k, 0, n_rows()));
  RadonDataset out;
  out.county.assign(county.begin(), county.begin() + static_cast<std::ptrdiff_t>(n));
  out.floor.assign(floor.begin(), floor.begin() + static_cast<std::ptrdiff_t>(n));
  out.log_radon.assign(log_radon.begin(), log_radon.begin() + static_cast<std::ptrdiff_t>(n));
  out.num_counties = num_counties;
  return out;
}

CreditDataset load_credit(const std::string& path) {
  auto in = open_or_throw(path);
  constexpr auto kFields = static_cast<std::size_t>(CreditDataset::kNumericAttributes + 1);
  std::vector<std::array<double, kFields>> rows;
  std::vector<std::size_t> line_of_row;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const auto fields = split_fields(line);
    if (fields.empty() || fields.front().front() == '#') continue;
    if (fields.size() != kFields) {
      throw ParseError("expected " + std::to_string(kFields) + " fields, found " +
                           std::to_string(fields.size()),
                       line_no);
    }
    std::array<double, kFields> row{};
    for (std::size_t j = 0; j < kFields; ++j) {
      if (!parse_double(fields[j], row[j])) {
        throw ParseError("field " + std::to_string(j + 1) + " is not a number: '" + fields[j] + "'",
                         line_no);
      }
    }
    rows.push_back(row);
    line_of_row.push_back(line_no);
  }
  if (rows.empty()) throw ParseError("'" + path + "' contains no data rows", 0);

  // Label coding: {1, 2} (the public file) or {0, 1}.
  const bool has_zero = std::any_of(rows.begin(), rows.end(),
                                    [](const auto& r) { return r[kFields - 1] == 0.0; });
  const double offset = has_zero ? 0.0 : 1.0;
  CreditDataset data;
  const auto n = static_cast<Index>(rows.size());
  data.features.resize(n, CreditDataset::kFeatures);
  data.labels.resize(rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const double label = rows[i][kFields - 1] - offset;
    if (label != 0.0 && label != 1.0) {
      throw ParseError("label " + std::to_string(rows[i][kFields - 1]) + " is not binary",
                       line_of_row[i]);
    }
    data.labels[i] = static_cast<int>(label);
    for (Index j = 0; j < CreditDataset::kNumericAttributes; ++j) {
      data.features(static_cast<Index>(i), j) = rows[i][static_cast<std::size_t>(j)];
    }
  }
  for (Index j = 0; j < CreditDataset::kNumericAttributes; ++j) {
    auto col = data.features.col(j);
    const double mean = col.mean();
    const double sd = std::sqrt((col.array() - mean).square().mean());
    if (sd > 0.0) {
      col = (col.array() - mean) / sd;
    } else {
      col.setZero();
      warn("load_credit: attribute " + std::to_string(j + 1) + " is constant");
    }
  }
  data.features.col(CreditDataset::kFeatures - 1).setOnes();
  return data;
}

RadonDataset load_radon(const std::string& path) {
  auto in = open_or_throw(path);
  std::vector<double> code;
  RadonDataset data;
  std::string line;
  std::size_t line_no = 0;
  bool first_content = true;
  while (std::getline(in, line)) {
    ++line_no;
    const auto fields = split_fields(line);
    if (fields.empty() || fields.front().front() == '#') continue;
    double c = 0.0;
    if (first_content && !parse_double(fields.front(), c)) {
      first_content = false;  // header
      continue;
    }
    first_content = false;
    if (fields.size() != 3) {
      throw ParseError("expected 3 fields, found " + std::to_string(fields.size()), line_no);
    }
    double f = 0.0;
    double y = 0.0;
    if (!parse_double(fields[0], c) || !parse_double(fields[1], f) ||
        !parse_double(fields[2], y)) {
      throw ParseError("non-numeric field", line_no);
    }
    if (c != std::floor(c)) throw ParseError("county code must be an integer", line_no);
    if (f != 0.0 && f != 1.0) throw ParseError("floor must be 0 or 1", line_no);
    code.push_back(c);
    data.floor.push_back(static_cast<int>(f));
    data.log_radon.push_back(y);
  }
  if (code.empty()) throw ParseError("'" + path + "' contains no data rows", 0);

  std::map<double, int> index;
  for (double c : code) index.emplace(c, 0);
  int next = 0;
  for (auto& [c, i] : index) i = next++;
  data.num_counties = next;
  data.county.reserve(code.size());
  for (double c : code) data.county.push_back(index.at(c));
  return data;
}

void write_synthetic_credit(const std::string& path, Index rows, std::uint64_t seed) {
  Rng rng = make_rng(seed, 0xc4ed17);
  std::normal_distribution<double> normal;
  // Three latent factors induce moderate correlations between attributes.
  constexpr int kFactors = 3;
  Matrix loading(CreditDataset::kNumericAttributes, kFactors);
  for (Index j = 0; j < loading.rows(); ++j)
    for (Index f = 0; f < kFactors; ++f) loading(j, f) = 0.6 * normal(rng);
  // Sparse effect vector on the attributes.
  Vector effect = Vector::Zero(CreditDataset::kNumericAttributes);
  for (Index j : {0, 1, 2, 4, 6, 9, 14, 20}) effect[j] = 1.2 * normal(rng);

  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write '" + path + "'");
  for (Index i = 0; i < rows; ++i) {
    Vector factors(kFactors);
    for (auto& v : factors) v = normal(rng);
    Vector attr(CreditDataset::kNumericAttributes);
    Vector latent_values(CreditDataset::kNumericAttributes);
    for (Index j = 0; j < attr.size(); ++j) {
      const double latent = loading.row(j).dot(factors) + normal(rng);
      latent_values[j] = latent;
      // Mixed attribute types: categorical codes, counts and indicators.
      if (j < 10) {
        attr[j] = std::clamp(std::round(2.5 + latent), 1.0, 4.0);
      } else if (j < 16) {
        attr[j] = std::round(std::max(0.0, 20.0 + 10.0 * latent));
      } else {
        attr[j] = latent > 0.3 ? 1.0 : 0.0;
      }
    }
    const double eta = -0.85 + effect.dot(latent_values) / 3.0;
    const int bad = std::bernoulli_distribution(1.0 / (1.0 + std::exp(-eta)))(rng) ? 2 : 1;
    for (Index j = 0; j < attr.size(); ++j) out << attr[j] << ' ';
    out << bad << '\n';
  }
}

void write_synthetic_radon(const std::string& path, Index rows, int counties, std::uint64_t seed) {
  if (rows < counties) throw std::invalid_argument("write_synthetic_radon: rows < counties");
  Rng rng = make_rng(seed, 0x7ad0);
  std::normal_distribution<double> normal;
  std::vector<int> county(static_cast<std::size_t>(rows));
  for (Index i = 0; i < rows; ++i)
    county[static_cast<std::size_t>(i)] =
        i < counties ? static_cast<int>(i)
                     : std::uniform_int_distribution<int>(0, counties - 1)(rng);
  std::shuffle(county.begin(), county.end(), rng);
  std::vector<double> intercept(static_cast<std::size_t>(counties));
  std::vector<double> slope(static_cast<std::size_t>(counties));
  for (int c = 0; c < counties; ++c) {
    intercept[static_cast<std::size_t>(c)] = 1.5 + 0.3 * normal(rng);
    slope[static_cast<std::size_t>(c)] = -0.7 + 0.2 * normal(rng);
  }
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write '" + path + "'");
  out << "county_code,floor,log_radon\n";
  for (int c : county) {
    const int floor = std::bernoulli_distribution(0.17)(rng) ? 1 : 0;
    const auto k = static_cast<std::size_t>(c);
    const double y = intercept[k] + slope[k] * floor + 0.75 * normal(rng);
    out << (c + 1) << ',' << floor << ',' << y << '\n';
  }
}

}  // namespace flowprec::targets
