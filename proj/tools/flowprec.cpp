// Command-line front end: experiment grids, Gaussianity checks, W2
// threshold curves and synthetic stand-in datasets.

#include "flowprec/experiment.hpp"
#include "flowprec/gaussianity.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <cmath>
#include <fstream>
#include <iostream>
#include <sstream>

using namespace flowprec;

namespace {

constexpr int kUsageError = 2;

Matrix read_numeric_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open '" + path + "'", 0);
  std::vector<std::vector<double>> rows;
  std::string line;
  std::size_t line_no = 0;
  bool header_allowed = true;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty() || line[0] == '#') continue;
    std::vector<double> row;
    std::stringstream ss(line);
    std::string tok;
    bool numeric = true;
    while (std::getline(ss, tok, ',')) {
      const auto b = tok.find_first_not_of(" \t\r");
      const auto e = tok.find_last_not_of(" \t\r");
      tok = b == std::string::npos ? "" : tok.substr(b, e - b + 1);
      char* end = nullptr;
      const double v = std::strtod(tok.c_str(), &end);
      if (tok.empty() || end != tok.c_str() + tok.size()) {
        numeric = false;
        break;
      }
      row.push_back(v);
    }
    if (!numeric) {
      if (header_allowed) {
        header_allowed = false;
        continue;
      }
      throw ParseError("non-numeric field '" + tok + "'", line_no);
    }
    header_allowed = false;
    if (!rows.empty() && row.size() != rows.front().size())
      throw ParseError("expected " + std::to_string(rows.front().size()) + " fields, found " +
                           std::to_string(row.size()),
                       line_no);
    rows.push_back(std::move(row));
  }
  if (rows.empty()) throw ParseError("'" + path + "' contains no data rows", 0);
  Matrix m(static_cast<Index>(rows.size()), static_cast<Index>(rows.front().size()));
  for (std::size_t i = 0; i < rows.size(); ++i)
    for (std::size_t j = 0; j < rows[i].size(); ++j)
      m(static_cast<Index>(i), static_cast<Index>(j)) = rows[i][j];
  return m;
}

int cmd_run(const std::string& config_path, const std::optional<std::uint64_t>& seed,
            const std::optional<std::string>& out, const std::optional<unsigned>& jobs) {
  experiment::ExperimentConfig cfg;
  try {
    cfg = experiment::load_config(config_path);
    if (seed) experiment::override_seed(cfg, *seed);
    if (out) experiment::override_output(cfg, *out);
    if (jobs) cfg.jobs = *jobs;
  } catch (const experiment::ConfigError& e) {
    std::cerr << "flowprec run: invalid config: " << e.what() << '\n';
    return kUsageError;
  }
  const std::size_t cells = experiment::expand(cfg).size();
  std::cerr << "flowprec " << experiment::version() << ": " << cells << " cell(s), config "
            << experiment::config_hash(cfg) << '\n';
  const std::size_t failed = experiment::run(cfg, std::cerr);
  if (failed > 0) {
    std::cerr << failed << " of " << cells << " cell(s) failed; see " << cfg.output_dir
              << "/metrics.csv\n";
    return 1;
  }
  return 0;
}

int cmd_gaussianity(const std::string& input, double constant, const std::string& output) {
  const Matrix data = read_numeric_csv(input);
  std::vector<std::string> warnings;
  set_warning_sink([&](const std::string& m) { warnings.push_back(m); });
  const auto report = gaussianity::classify_dimensions(data, constant);
  set_warning_sink(nullptr);
  nlohmann::json j;
  j["flowprec_version"] = experiment::version();
  j["input"] = input;
  j["n"] = report.n;
  j["dim"] = report.dim();
  j["constant"] = constant;
  j["threshold"] = report.threshold;
  j["w2"] = report.w2;  // constant columns serialize as null
  std::vector<bool> flags;
  for (Index k = 0; k < static_cast<Index>(report.dim()); ++k) flags.push_back(report.is_gaussian(k));
  j["approximately_gaussian"] = flags;
  j["gaussian_set"] = report.gaussian_set;
  j["complement_set"] = report.complement_set;
  j["warnings"] = report.warnings;
  if (output.empty()) {
    std::cout << j.dump(2) << '\n';
  } else {
    std::ofstream(output) << j.dump(2) << '\n';
  }
  return 0;
}

int cmd_threshold_curve(const std::vector<double>& distances, const std::vector<std::size_t>& sizes,
                        int repeats, const std::vector<double>& constants, std::uint64_t seed,
                        const std::string& output) {
  std::ostringstream os;
  os << "# flowprec " << experiment::version() << " threshold-curve repeats " << repeats << " seed "
     << seed << '\n';
  os << "distance,n,repeats,mean_w2,std_w2";
  for (double c : constants) os << ",tau_c" << c;
  os << '\n';
  os.precision(17);
  std::uint64_t stream = 0;
  for (double d : distances) {
    for (std::size_t n : sizes) {
      Rng rng = make_rng(seed, stream++);
      std::vector<double> w;
      for (int r = 0; r < repeats; ++r) {
        const auto x = gaussianity::sample_mixture(d, n, rng);
        w.push_back(gaussianity::w2_to_standard_normal(x));
      }
      double mean = 0.0;
      for (double v : w) mean += v;
      mean /= static_cast<double>(w.size());
      double var = 0.0;
      for (double v : w) var += (v - mean) * (v - mean);
      const double sd = w.size() > 1 ? std::sqrt(var / static_cast<double>(w.size() - 1)) : 0.0;
      os << d << ',' << n << ',' << repeats << ',' << mean << ',' << sd;
      for (double c : constants) os << ',' << gaussianity::gaussianity_threshold(c, n);
      os << '\n';
    }
  }
  if (output.empty()) {
    std::cout << os.str();
  } else {
    std::ofstream(output) << os.str();
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Flow-preconditioned HMC/NUTS experiments"};
  app.set_version_flag("--version", experiment::version());
  app.require_subcommand(1);

  auto* run = app.add_subcommand("run", "Run an experiment grid from a JSON config");
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
  std::optional<unsigned> jobs;
  run->add_option("--config", config_path, "Experiment config (JSON)")->required()->check(CLI::ExistingFile);
  run->add_option("--seed", seed, "Run only this seed");
  run->add_option("--out", out, "Output directory");
  run->add_option("--jobs", jobs, "Grid cells run concurrently")->check(CLI::PositiveNumber);

  auto* gc = app.add_subcommand("gaussianity-check", "Classify the columns of a CSV");
  std::string input, gc_output;
  double constant = 0.1;
  gc->add_option("--input", input, "Numeric CSV, one draw per row")->required();
  gc->add_option("--constant", constant, "Constant C in tau = C + sqrt(2/n)")->required();
  gc->add_option("--output", gc_output, "Write JSON here instead of stdout");

  auto* tc = app.add_subcommand("threshold-curve", "Mean and sd of W2 for two-component mixtures");
  std::vector<double> distances, constants{0.1, 0.3};
  std::vector<std::size_t> sizes;
  int repeats = 150;
  std::uint64_t tc_seed = 0;
  std::string tc_output;
  tc->add_option("--distances", distances, "Component distances")->required()->delimiter(',');
  tc->add_option("--sizes", sizes, "Sample sizes")->required()->delimiter(',');
  tc->add_option("--repeats", repeats, "Datasets per (distance, size)")->check(CLI::PositiveNumber);
  tc->add_option("--constants", constants, "C values for the tau columns")->delimiter(',');
  tc->add_option("--seed", tc_seed, "RNG seed");
  tc->add_option("--output", tc_output, "Write CSV here instead of stdout");

  auto* sd = app.add_subcommand("synthetic-data", "Write a synthetic stand-in dataset");
  std::string kind, sd_output;
  Index rows = 1000;
  int counties = 85;
  std::uint64_t sd_seed = 0;
  sd->add_option("--kind", kind, "credit or radon")->required()->check(CLI::IsMember({"credit", "radon"}));
  sd->add_option("--output", sd_output, "Destination file")->required();
  sd->add_option("--rows", rows, "Number of records")->check(CLI::PositiveNumber);
  sd->add_option("--counties", counties, "Counties (radon)")->check(CLI::PositiveNumber);
  sd->add_option("--seed", sd_seed, "RNG seed");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kUsageError;
  }

  try {
    if (*run) return cmd_run(config_path, seed, out, jobs);
    if (*gc) return cmd_gaussianity(input, constant, gc_output);
    if (*tc) return cmd_threshold_curve(distances, sizes, repeats, constants, tc_seed, tc_output);
    if (*sd) {
      if (kind == "credit") {
        targets::write_synthetic_credit(sd_output, rows, sd_seed);
      } else {
        targets::write_synthetic_radon(sd_output, rows, counties, sd_seed);
      }
      return 0;
    }
  } catch (const ParseError& e) {
    std::cerr << "flowprec: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "flowprec: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
