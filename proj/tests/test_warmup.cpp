#include "flowprec/warmup.hpp"
#include "test_util.hpp"

#include <doctest.h>

using namespace flowprec;
using namespace flowprec::warmup;
using testutil::GaussianTarget;

namespace {

WarmupConfig small_config(PreconditionerKind kind) {
  WarmupConfig cfg;
  cfg.kind = kind;
  cfg.cycles = 3;
  cfg.steps_per_cycle = 40;
  cfg.chains = 6;
  cfg.reservoir_capacity = 200;
  cfg.train.epochs = 30;
  return cfg;
}

// Upper 1% point of chi-square with 99 degrees of freedom.
constexpr double kChi2Crit99 = 134.64161685578915;

}  // namespace

TEST_CASE("reservoir under capacity keeps every item in order") {
  Reservoir r(10);
  Rng rng = make_rng(1);
  for (int i = 0; i < 7; ++i) r.offer(Vector::Constant(1, i), rng);
  REQUIRE(r.size() == 7);
  CHECK(r.seen() == 7);
  for (int i = 0; i < 7; ++i) CHECK(r.items()[static_cast<std::size_t>(i)][0] == i);
  CHECK(r.matrix().rows() == 7);
  CHECK_THROWS_AS(Reservoir(0), std::invalid_argument);
}

TEST_CASE("reservoir inclusion is uniform over the stream") {
  constexpr int kItems = 10000, kCap = 100, kRepeats = 500, kBins = 100;
  std::vector<double> counts(kBins, 0.0);
  for (int rep = 0; rep < kRepeats; ++rep) {
    Reservoir r(kCap);
    Rng rng = make_rng(7, static_cast<std::uint64_t>(rep));
    for (int i = 0; i < kItems; ++i) r.offer(Vector::Constant(1, i), rng);
    REQUIRE(r.size() == kCap);
    for (const auto& v : r.items()) counts[static_cast<std::size_t>(v[0]) / (kItems / kBins)] += 1.0;
  }
  const double expected = static_cast<double>(kRepeats) * kCap / kBins;
  double chi2 = 0.0;
  for (double c : counts) chi2 += (c - expected) * (c - expected) / expected;
  MESSAGE("chi2 = " << chi2);
  CHECK(chi2 < kChi2Crit99);
}

TEST_CASE("capacity one keeps each item with probability 1/N") {
  constexpr int kItems = 10, kRepeats = 20000;
  std::vector<double> freq(kItems, 0.0);
  Rng rng = make_rng(9);
  for (int rep = 0; rep < kRepeats; ++rep) {
    Reservoir r(1);
    for (int i = 0; i < kItems; ++i) r.offer(Vector::Constant(1, i), rng);
    freq[static_cast<std::size_t>(r.items()[0][0])] += 1.0 / kRepeats;
  }
  const double sd = std::sqrt(0.1 * 0.9 / kRepeats);
  for (double f : freq) CHECK(std::abs(f - 0.1) <= 4.0 * sd);
}

TEST_CASE("a single cycle samples with the identity") {
  const GaussianTarget target = GaussianTarget::standard(3);
  auto cfg = small_config(PreconditionerKind::Frnvp);
  cfg.cycles = 1;
  const auto res = run_warmup(target, cfg, 5);
  CHECK(res.preconditioner->kind() == "identity");
  REQUIRE(res.log.size() == 1);
  CHECK_FALSE(res.log[0].contains("fit"));
}

TEST_CASE("preconditioner schedule") {
  const GaussianTarget target((Vector(3) << 1.0, 0.0, -1.0).finished(),
                              (Vector(3) << 2.0, 0.5, 1.0).finished());
  SUBCASE("identity, diagonal, then the configured kind") {
    auto cfg = small_config(PreconditionerKind::Dense);
    cfg.cycles = 4;
    const auto res = run_warmup(target, cfg, 6);
    REQUIRE(res.log.size() == 4);
    CHECK(res.log[0]["preconditioner"] == "identity");
    CHECK(res.log[1]["preconditioner"] == "diagonal");
    CHECK(res.log[2]["preconditioner"] == "dense");
    CHECK(res.log[3]["preconditioner"] == "dense");
    CHECK(res.log[0]["fit"]["kind"] == "diagonal");
    CHECK(res.log[2]["fit"]["kind"] == "dense");
    CHECK_FALSE(res.log[3].contains("fit"));
    CHECK(res.preconditioner->kind() == "dense");
  }
  SUBCASE("identity stays identity") {
    const auto res = run_warmup(target, small_config(PreconditionerKind::Identity), 6);
    for (const auto& rec : res.log) CHECK(rec["preconditioner"] == "identity");
    CHECK(res.preconditioner->kind() == "identity");
  }
  SUBCASE("rnvp keeps its optimizer across cycles") {
    auto cfg = small_config(PreconditionerKind::Rnvp);
    cfg.cycles = 4;
    const auto res = run_warmup(target, cfg, 6);
    CHECK(res.log[1]["fit"]["optimizer_steps"].get<int>() == 30);
    CHECK(res.log[2]["fit"]["optimizer_steps"].get<int>() == 60);
    CHECK(res.log[3].contains("fit") == false);
    CHECK(res.preconditioner->kind() == "composite");
  }
  SUBCASE("frnvp records the Gaussian split") {
    auto funnel = targets::make_funnel();
    auto cfg = small_config(PreconditionerKind::Frnvp);
    const auto res = run_warmup(*funnel, cfg, 6);
    const auto& fit = res.log[1]["fit"];
    CHECK(fit["kind"] == "frnvp");
    CHECK(fit.contains("gaussian_set"));
    CHECK(fit["threshold"].get<double>() > 0.0);
    CHECK(res.preconditioner->kind() == "frnvp");
  }
}

TEST_CASE("step sizes are frozen while collecting") {
  const GaussianTarget target = GaussianTarget::standard(4);
  for (auto kind : {samplers::SamplerKind::Hmc, samplers::SamplerKind::Nuts}) {
    auto cfg = small_config(PreconditionerKind::Diagonal);
    cfg.sampler.kind = kind;
    const auto res = run_warmup(target, cfg, 11);
    for (std::size_t c = 0; c < res.ensemble.size(); ++c) {
      // Collection leaves the averaged step from the end of tuning in place.
      CHECK(res.ensemble.step_sizes[c] == res.ensemble.dual[c].averaged_step());
      CHECK(res.log.back()["step_sizes"][c].get<double>() == res.ensemble.step_sizes[c]);
    }
  }
}

TEST_CASE("remapping chains preserves their target-space points") {
  Rng rng = make_rng(12);
  const Matrix data = testutil::normal_matrix(300, 4, rng, 2.0);
  auto from = flows::dense_fit(data);
  auto to = flows::rnvp_build(4, 0, 2);
  to->initialize(data, Matrix(300, 0));
  testutil::randomize(*to, rng, 0.1);
  auto e = samplers::make_ensemble(10, 4, 0.1, 3);
  std::vector<Vector> x_before;
  for (const auto& c : e.chains) x_before.push_back(from->inverse_point(c.z));
  remap_chains(e, *from, *to);
  for (std::size_t c = 0; c < e.size(); ++c) {
    const Vector x_after = to->inverse_point(e.chains[c].z);
    CHECK((x_after - x_before[c]).cwiseAbs().maxCoeff() <= 1e-8);
  }
}

TEST_CASE("results do not depend on the worker count") {
  const GaussianTarget target((Vector(3) << 0.0, 1.0, 2.0).finished(), Vector::Ones(3));
  auto cfg = small_config(PreconditionerKind::Rnvp);
  cfg.sampler.kind = samplers::SamplerKind::Nuts;
  const auto a = run_warmup(target, cfg, 21);
  cfg.workers = 3;
  const auto b = run_warmup(target, cfg, 21);
  CHECK(a.reservoir.matrix() == b.reservoir.matrix());
  CHECK(a.ensemble.step_sizes == b.ensemble.step_sizes);
  CHECK(a.preconditioner->params() == b.preconditioner->params());
  auto ea = a.ensemble, eb = b.ensemble;
  const auto da = run_sampling(ea, *a.preconditioner, target, cfg.sampler, 20, 1);
  const auto db = run_sampling(eb, *b.preconditioner, target, cfg.sampler, 20, 3);
  for (std::size_t c = 0; c < da.size(); ++c) CHECK(da[c] == db[c]);
}

TEST_CASE("draw and reservoir counts") {
  const GaussianTarget target = GaussianTarget::standard(2);
  auto cfg = small_config(PreconditionerKind::Diagonal);
  cfg.steps_per_cycle = 41;  // odd: 21 tuning, 20 collecting
  const auto res = run_warmup(target, cfg, 31);
  CHECK(res.reservoir.seen() == 3u * 20u * cfg.chains);
  CHECK(res.reservoir.size() == std::min<std::size_t>(cfg.reservoir_capacity, 360));
  auto e = res.ensemble;
  SamplingStats stats;
  const auto draws = run_sampling(e, *res.preconditioner, target, cfg.sampler, 50, 1, &stats);
  REQUIRE(draws.size() == cfg.chains);
  for (const auto& d : draws) {
    CHECK(d.rows() == 50);
    CHECK(d.cols() == 2);
  }
  CHECK(stats.accept_rate > 0.0);
  CHECK(stats.accept_rate <= 1.0);
}

TEST_CASE("config validation") {
  const GaussianTarget target = GaussianTarget::standard(2);
  auto cfg = small_config(PreconditionerKind::Dense);
  cfg.cycles = 0;
  CHECK_THROWS_AS(run_warmup(target, cfg, 1), std::invalid_argument);
  CHECK_THROWS_AS(parse_preconditioner("maf"), std::invalid_argument);
  CHECK(parse_preconditioner("frnvp") == PreconditionerKind::Frnvp);
}
