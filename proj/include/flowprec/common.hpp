#ifndef FLOWPREC_COMMON_HPP
#define FLOWPREC_COMMON_HPP

#include <Eigen/Dense>

#include <cstdint>
#include <functional>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace flowprec {

using Index = Eigen::Index;
using Vector = Eigen::VectorXd;
/// Batches are stored one point per row.
using Matrix = Eigen::MatrixXd;

using Rng = std::mt19937_64;

/// MCMC output: one (iterations x dim) matrix per chain.
using Draws = std::vector<Matrix>;

/// Input that has no meaningful answer, such as a zero-variance sample.
class DegenerateInputError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// A NaN or infinity appeared where a finite value is required.
class NonFiniteError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Malformed input file; `line()` is 1-based, 0 when not tied to a line.
class ParseError : public std::runtime_error {
 public:
  ParseError(const std::string& what, std::size_t line)
      : std::runtime_error(line ? "line " + std::to_string(line) + ": " + what : what),
        line_(line) {}
  std::size_t line() const { return line_; }

 private:
  std::size_t line_;
};

/// Independent stream for (seed, stream index). Streams never depend on
/// how many workers consume them.
Rng make_rng(std::uint64_t seed, std::uint64_t stream = 0);

/// Warning sink. Defaults to stderr; tests swap it out to silence or
/// capture messages.
using WarningSink = std::function<void(const std::string&)>;
void set_warning_sink(WarningSink sink);
void warn(const std::string& message);

}  // namespace flowprec

#endif  // FLOWPREC_COMMON_HPP
