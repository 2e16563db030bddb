#include "flowprec/experiment.hpp"

#include <zlib.h>

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <mutex>
#include <set>
#include <sstream>
#include <thread>

#ifndef FLOWPREC_VERSION
#define FLOWPREC_VERSION "unknown"
#endif

namespace flowprec::experiment {

namespace fs = std::filesystem;
using nlohmann::json;
using warmup::PreconditionerKind;

namespace {

// Typed access to one JSON object that remembers its key path and rejects
// keys nobody asked for.
class Section {
 public:
  Section(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(path_.empty() ? "<root>" : path_, "expected an object");
  }
  ~Section() = default;

  bool has(const std::string& key) {
    seen_.insert(key);
    return j_.contains(key);
  }
  std::string field(const std::string& key) const {
    return path_.empty() ? key : path_ + "." + key;
  }
  const json& raw(const std::string& key) {
    seen_.insert(key);
    return j_.at(key);
  }

  template <class T>
  T get(const std::string& key, T fallback) {
    if (!has(key)) return fallback;
    try {
      return j_.at(key).get<T>();
    } catch (const json::exception&) {
      throw ConfigError(field(key), "has the wrong type");
    }
  }
  double number(const std::string& key, double fallback, double lo, double hi) {
    const double v = get<double>(key, fallback);
    if (!(v >= lo && v <= hi))
      throw ConfigError(field(key), "must lie in [" + fmt(lo) + ", " + fmt(hi) + "]");
    return v;
  }
  long long integer(const std::string& key, long long fallback, long long lo, long long hi) {
    if (has(key) && !j_.at(key).is_number_integer())
      throw ConfigError(field(key), "must be an integer");
    const long long v = get<long long>(key, fallback);
    if (v < lo || v > hi)
      throw ConfigError(field(key), "must lie in [" + std::to_string(lo) + ", " + std::to_string(hi) + "]");
    return v;
  }
  Section child(const std::string& key) {
    static const json empty = json::object();
    return has(key) ? Section(j_.at(key), field(key)) : Section(empty, field(key));
  }
  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it)
      if (!seen_.count(it.key())) throw ConfigError(field(it.key()), "unknown key");
  }

 private:
  static std::string fmt(double v) {
    std::ostringstream os;
    os << v;
    return os.str();
  }
  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

// Accepts either a scalar or an array under `key`.
std::vector<json> scalar_or_list(Section& s, const std::string& key) {
  const json& v = s.raw(key);
  if (v.is_array()) {
    if (v.empty()) throw ConfigError(s.field(key), "must not be empty");
    return {v.begin(), v.end()};
  }
  return {v};
}

std::vector<TargetSpec> parse_target(const json& j, const std::string& path) {
  Section s(j, path);
  TargetSpec base;
  base.name = s.get<std::string>("name", "");
  static const std::set<std::string> known{"funnel", "banana", "sgc", "sgc-funnel", "radon"};
  if (!known.count(base.name))
    throw ConfigError(s.field("name"),
                      "unknown target '" + base.name + "' (expected funnel, banana, sgc, sgc-funnel or radon)");
  const bool needs_data = base.name != "funnel" && base.name != "banana";
  base.data = s.get<std::string>("data", "");
  if (needs_data && base.data.empty()) throw ConfigError(s.field("data"), "required for " + base.name);
  base.variant = s.get<std::string>("variant", "vs");
  if (base.name == "radon") {
    try {
      targets::parse_radon_variant(base.variant);
    } catch (const std::exception& e) {
      throw ConfigError(s.field("variant"), e.what());
    }
  }
  std::vector<TargetSpec> out;
  if (s.has("rows")) {
    std::size_t i = 0;
    for (const auto& r : scalar_or_list(s, "rows")) {
      if (!r.is_number_integer() || r.get<long long>() < 1)
        throw ConfigError(s.field("rows") + "[" + std::to_string(i) + "]", "must be a positive integer");
      TargetSpec t = base;
      t.rows = r.get<Index>();
      out.push_back(t);
      ++i;
    }
  } else {
    out.push_back(base);
  }
  s.finish();
  return out;
}

std::string format_double(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string csv_safe(std::string s) {
  for (char& c : s)
    if (c == ',' || c == '\n' || c == '\r' || c == '"') c = ' ';
  return s;
}

std::string header_line(const ExperimentConfig& config) {
  return "flowprec " + version() + " config " + config_hash(config);
}

}  // namespace

// ---------------------------------------------------------------------------

std::string TargetSpec::label() const {
  std::string out = name;
  if (name == "radon") out += "-" + variant;
  if (rows > 0) out += "-n" + std::to_string(rows);
  return out;
}

std::string Cell::path() const {
  return target.label() + "/" + warmup::to_string(preconditioner) + "/" +
         samplers::to_string(sampler) + "/seed-" + std::to_string(seed);
}

ExperimentConfig parse_config(const json& j) {
  ExperimentConfig cfg;
  Section root(j, "");

  if (root.has("target") == root.has("targets"))
    throw ConfigError("target", "give exactly one of 'target' or 'targets'");
  if (j.contains("target")) {
    cfg.targets = parse_target(root.raw("target"), "target");
  } else {
    std::size_t i = 0;
    for (const auto& t : scalar_or_list(root, "targets")) {
      auto more = parse_target(t, "targets[" + std::to_string(i++) + "]");
      cfg.targets.insert(cfg.targets.end(), more.begin(), more.end());
    }
  }

  auto parse_list = [&](const std::string& one, const std::string& many, const std::string& fallback,
                        auto parse) {
    using T = decltype(parse(std::string()));
    std::vector<T> out;
    if (root.has(one) && root.has(many))
      throw ConfigError(many, "give at most one of '" + one + "' or '" + many + "'");
    const std::string key = j.contains(many) ? many : one;
    std::vector<json> items = j.contains(key) ? scalar_or_list(root, key) : std::vector<json>{fallback};
    for (std::size_t i = 0; i < items.size(); ++i) {
      const std::string f = key + (items.size() > 1 || key == many ? "[" + std::to_string(i) + "]" : "");
      if (!items[i].is_string()) throw ConfigError(f, "must be a string");
      try {
        out.push_back(parse(items[i].get<std::string>()));
      } catch (const std::invalid_argument& e) {
        throw ConfigError(f, e.what());
      }
    }
    return out;
  };
  cfg.preconditioners = parse_list("preconditioner", "preconditioners", "frnvp",
                                   [](const std::string& s) { return warmup::parse_preconditioner(s); });
  cfg.samplers = parse_list("sampler", "samplers", "hmc",
                            [](const std::string& s) { return samplers::parse_sampler(s); });

  if (!root.has("seeds")) throw ConfigError("seeds", "required");
  {
    std::size_t i = 0;
    for (const auto& s : scalar_or_list(root, "seeds")) {
      if (!s.is_number_integer() || s.get<long long>() < 0)
        throw ConfigError("seeds[" + std::to_string(i) + "]", "must be a non-negative integer");
      cfg.seeds.push_back(s.get<std::uint64_t>());
      ++i;
    }
  }

  auto& w = cfg.warmup;
  w.gaussianity_constant = root.number("gaussianity_constant", 0.1, -1e9, 1e9);
  {
    auto s = root.child("warmup");
    w.cycles = static_cast<int>(s.integer("cycles", 5, 1, 1000));
    w.steps_per_cycle = static_cast<int>(s.integer("steps", 1000, 2, 10000000));
    w.chains = static_cast<std::size_t>(s.integer("chains", 100, 1, 100000));
    w.reservoir_capacity = static_cast<std::size_t>(s.integer("reservoir", 15000, 2, 100000000));
    w.sampler.target_accept = s.number("target_accept", 0.8, 1e-6, 1.0 - 1e-6);
    w.sampler.initial_step = s.number("initial_step", 0.01, 1e-12, 1e6);
    s.finish();
  }
  {
    auto s = root.child("sampler_settings");
    w.sampler.leapfrog_steps = static_cast<int>(s.integer("leapfrog_steps", 20, 1, 100000));
    w.sampler.max_depth = static_cast<int>(s.integer("max_depth", 10, 0, 30));
    w.sampler.max_delta_h = s.number("max_delta_h", 1000.0, 1e-6, 1e300);
    s.finish();
  }
  {
    auto s = root.child("flow");
    w.flow_blocks = static_cast<int>(s.integer("blocks", 2, 1, 1000));
    s.finish();
  }
  {
    auto s = root.child("training");
    w.train.epochs = static_cast<int>(s.integer("epochs", 3500, 1, 100000000));
    w.train.learning_rate = s.number("learning_rate", 1e-3, 1e-12, 10.0);
    w.train.batch_size = static_cast<Index>(s.integer("batch_size", 1024, 1, 100000000));
    w.train.full_batch_limit = static_cast<Index>(s.integer("full_batch_limit", 4096, 0, 100000000));
    s.finish();
  }
  {
    auto s = root.child("sampling");
    cfg.iterations = static_cast<int>(s.integer("iterations", 1000, 4, 100000000));
    s.finish();
  }
  {
    auto s = root.child("diagnostics");
    cfg.compute_ksd = s.get<bool>("ksd", true);
    cfg.ksd.subsample = static_cast<Index>(s.integer("ksd_subsample", 250, 2, 100000000));
    cfg.ksd.trials = static_cast<int>(s.integer("ksd_trials", 150, 1, 100000000));
    try {
      cfg.ksd.kernel = diagnostics::parse_kernel(s.get<std::string>("kernel", "imq"));
    } catch (const std::invalid_argument& e) {
      throw ConfigError(s.field("kernel"), e.what());
    }
    s.finish();
  }
  {
    auto s = root.child("output");
    cfg.output_dir = s.get<std::string>("dir", "flowprec_out");
    cfg.store_draws = s.get<bool>("draws", false);
    cfg.histogram_bins = static_cast<int>(s.integer("histogram_bins", 100, 1, 1000000));
    s.finish();
  }
  w.workers = static_cast<unsigned>(root.integer("workers", 1, 1, 1024));
  cfg.jobs = static_cast<unsigned>(root.integer("jobs", 1, 1, 1024));
  root.finish();
  if (cfg.warmup.chains < 2) throw ConfigError("warmup.chains", "ESS needs at least 2 chains");
  cfg.source = j;
  return cfg;
}

ExperimentConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("--config", "cannot open '" + path + "'");
  json j;
  try {
    j = json::parse(in, nullptr, true, /*ignore_comments=*/true);
  } catch (const json::parse_error& e) {
    throw ConfigError("--config", std::string("malformed JSON: ") + e.what());
  }
  return parse_config(j);
}

void override_seed(ExperimentConfig& config, std::uint64_t seed) {
  config.seeds = {seed};
  config.source["seeds"] = json::array({seed});
}

void override_output(ExperimentConfig& config, const std::string& dir) {
  config.output_dir = dir;
  config.source["output"]["dir"] = dir;
}

std::vector<Cell> expand(const ExperimentConfig& config) {
  std::vector<Cell> out;
  for (const auto& t : config.targets)
    for (auto p : config.preconditioners)
      for (auto s : config.samplers)
        for (auto seed : config.seeds) out.push_back({t, p, s, seed});
  return out;
}

std::unique_ptr<targets::TargetModel> make_target(const TargetSpec& spec) {
  if (spec.name == "funnel") return targets::make_funnel();
  if (spec.name == "banana") return targets::make_banana();
  if (spec.name == "sgc" || spec.name == "sgc-funnel") {
    auto data = targets::load_credit(spec.data);
    if (spec.rows > 0) data = data.head(spec.rows);
    return targets::make_sgc(std::move(data), spec.name == "sgc-funnel");
  }
  if (spec.name == "radon") {
    auto data = targets::load_radon(spec.data);
    if (spec.rows > 0) data = data.head(spec.rows);
    return targets::make_radon(std::move(data), targets::parse_radon_variant(spec.variant));
  }
  throw std::invalid_argument("unknown target '" + spec.name + "'");
}

CellResult run_cell(const ExperimentConfig& config, const Cell& cell) {
  CellResult r;
  r.cell = cell;
  try {
    const auto target = make_target(cell.target);
    warmup::WarmupConfig wc = config.warmup;
    wc.kind = cell.preconditioner;
    wc.sampler.kind = cell.sampler;
    auto warm = warmup::run_warmup(*target, wc, cell.seed);
    r.warmup_log = warm.log;
    r.preconditioner = warm.preconditioner->to_json();
    if (const auto* f =
            dynamic_cast<const flows::FactorizedPreconditioner*>(warm.preconditioner.get())) {
      r.gaussian_set = f->gaussian_indices();
      r.gaussian_dims = r.gaussian_set.size();
    }

    warmup::SamplingStats stats;
    r.draws = warmup::run_sampling(warm.ensemble, *warm.preconditioner, *target, wc.sampler,
                                   config.iterations, wc.workers, &stats);
    r.accept_rate = stats.accept_rate;
    r.divergences = stats.divergences;

    r.ess = diagnostics::ess_report(r.draws);
    const Matrix pooled = diagnostics::pool(r.draws);
    const auto x0 = pooled.col(0).array();
    const double n = static_cast<double>(pooled.rows());
    r.x0_mean = x0.mean();
    r.x0_negative = static_cast<double>((x0 < 0.0).count()) / n;
    r.x0_abs_gt_20 = static_cast<double>((x0.abs() > 20.0).count()) / n;
    if (config.compute_ksd) {
      diagnostics::KsdConfig kc = config.ksd;
      kc.seed = cell.seed;
      r.ksd = diagnostics::ksd(pooled, [&](const Vector& v) { return target->score(v); }, kc).value;
    }
    r.ok = true;
  } catch (const std::exception& e) {
    r.ok = false;
    r.error = e.what();
  }
  return r;
}

std::string metrics_header() {
  return "target,rows,preconditioner,sampler,seed,status,min_bulk_ess,min_tail_ess,ksd,"
         "gaussian_dims,accept_rate,divergences,x0_mean,x0_negative_fraction,"
         "x0_abs_gt_20_fraction,error";
}

std::string metrics_row(const CellResult& r) {
  const auto& c = r.cell;
  std::ostringstream os;
  os << c.target.name << ',' << c.target.rows << ',' << warmup::to_string(c.preconditioner) << ','
     << samplers::to_string(c.sampler) << ',' << c.seed << ',' << (r.ok ? "ok" : "failed") << ',';
  if (r.ok) {
    os << format_double(r.ess.min_bulk) << ',' << format_double(r.ess.min_tail) << ','
       << format_double(r.ksd) << ',' << r.gaussian_dims << ',' << format_double(r.accept_rate)
       << ',' << r.divergences << ',' << format_double(r.x0_mean) << ','
       << format_double(r.x0_negative) << ',' << format_double(r.x0_abs_gt_20) << ',';
  } else {
    os << "nan,nan,nan,,nan,,nan,nan,nan," << csv_safe(r.error);
  }
  return os.str();
}

std::uint64_t fnv1a(const std::string& bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::string config_hash(const ExperimentConfig& config) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx",
                static_cast<unsigned long long>(fnv1a(config.source.dump())));
  return buf;
}

std::string version() { return FLOWPREC_VERSION; }

void write_cell_outputs(const ExperimentConfig& config, const CellResult& r, const std::string& dir) {
  fs::create_directories(dir);
  const std::string header = header_line(config);
  {
    std::ofstream out(dir + "/metrics.csv");
    out << "# " << header << '\n' << metrics_header() << '\n' << metrics_row(r) << '\n';
  }
  {
    std::ofstream out(dir + "/warmup.jsonl");
    out << json{{"flowprec_version", version()}, {"config_hash", config_hash(config)},
                {"cell", r.cell.path()}}
               .dump()
        << '\n';
    for (const auto& rec : r.warmup_log) out << rec.dump() << '\n';
  }
  if (!r.ok) return;
  {
    std::ofstream out(dir + "/preconditioner.json");
    out << json{{"flowprec_version", version()}, {"config_hash", config_hash(config)},
                {"preconditioner", r.preconditioner}}
               .dump(1)
        << '\n';
  }
  {
    const Matrix pooled = diagnostics::pool(r.draws);
    const auto x0 = pooled.col(0).array();
    const double lo = x0.minCoeff(), hi = x0.maxCoeff();
    const int bins = config.histogram_bins;
    const double width = hi > lo ? (hi - lo) / bins : 1.0;
    std::vector<std::size_t> counts(static_cast<std::size_t>(bins), 0);
    for (Index i = 0; i < x0.size(); ++i) {
      const auto b = std::clamp(static_cast<int>((x0[i] - lo) / width), 0, bins - 1);
      ++counts[static_cast<std::size_t>(b)];
    }
    std::ofstream out(dir + "/histogram_dim0.csv");
    out << "# " << header << '\n' << "bin_left,bin_right,count,density\n";
    for (int b = 0; b < bins; ++b) {
      const auto count = counts[static_cast<std::size_t>(b)];
      out << format_double(lo + b * width) << ',' << format_double(lo + (b + 1) * width) << ','
          << count << ',' << format_double(static_cast<double>(count) / (static_cast<double>(x0.size()) * width))
          << '\n';
    }
  }
  if (config.store_draws) {
    const std::string path = dir + "/draws.csv.gz";
    gzFile gz = gzopen(path.c_str(), "wb");
    if (!gz) throw std::runtime_error("cannot write '" + path + "'");
    std::string line = "# " + header + "\nchain,iteration";
    const Index dim = r.draws.front().cols();
    for (Index d = 0; d < dim; ++d) line += ",x" + std::to_string(d);
    line += '\n';
    gzwrite(gz, line.data(), static_cast<unsigned>(line.size()));
    for (std::size_t c = 0; c < r.draws.size(); ++c) {
      for (Index t = 0; t < r.draws[c].rows(); ++t) {
        line = std::to_string(c) + ',' + std::to_string(t);
        for (Index d = 0; d < dim; ++d) line += ',' + format_double(r.draws[c](t, d));
        line += '\n';
        gzwrite(gz, line.data(), static_cast<unsigned>(line.size()));
      }
    }
    gzclose(gz);
  }
}

std::size_t run(const ExperimentConfig& config, std::ostream& log) {
  const auto cells = expand(config);
  std::vector<std::string> rows(cells.size());
  std::atomic<std::size_t> next{0}, failed{0};
  std::mutex log_mutex;
  auto worker = [&] {
    for (std::size_t i = next++; i < cells.size(); i = next++) {
      const auto start = std::chrono::steady_clock::now();
      const auto result = run_cell(config, cells[i]);
      const double seconds =
          std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
      const std::string dir = config.output_dir + "/" + cells[i].path();
      std::string note;
      try {
        write_cell_outputs(config, result, dir);
      } catch (const std::exception& e) {
        note = std::string(" (output error: ") + e.what() + ")";
      }
      rows[i] = metrics_row(result);
      if (!result.ok || !note.empty()) ++failed;
      std::lock_guard<std::mutex> lock(log_mutex);
      log << "[" << (i + 1) << "/" << cells.size() << "] " << cells[i].path() << ": "
          << (result.ok ? "ok" : "failed: " + result.error) << note << " ("
          << static_cast<long long>(std::lround(seconds)) << " s)\n";
    }
  };
  const unsigned jobs = std::max(1u, std::min<unsigned>(config.jobs, static_cast<unsigned>(cells.size())));
  if (jobs == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (unsigned t = 0; t < jobs; ++t) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  fs::create_directories(config.output_dir);
  std::ofstream out(config.output_dir + "/metrics.csv");
  out << "# " << header_line(config) << '\n' << metrics_header() << '\n';
  for (const auto& row : rows) out << row << '\n';
  return failed;
}

}  // namespace flowprec::experiment
