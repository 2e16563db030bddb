#include "flowprec/diagnostics.hpp"
#include "flowprec/math.hpp"
#include "flowprec/samplers.hpp"
#include "test_util.hpp"

#include <doctest.h>

using namespace flowprec;
using namespace flowprec::samplers;
using testutil::GaussianTarget;

namespace {

PhasePoint start_point(const LogDensityFn& fn, Vector z, Vector p) {
  PhasePoint pt{std::move(z), std::move(p), 0.0, Vector()};
  pt.logp = fn(pt.z, pt.grad);
  return pt;
}

ChainState start_state(const LogDensityFn& fn, Vector z) {
  ChainState s{std::move(z), 0.0, Vector()};
  s.logp = fn(s.z, s.grad);
  return s;
}

// Runs `chains` independent chains and returns their draws.
Draws run_chains(const LogDensityFn& fn, const SamplerConfig& cfg, double step, Index dim,
                 int chains, int iterations, std::uint64_t seed, double* accept = nullptr) {
  Draws out;
  double acc = 0.0;
  for (int c = 0; c < chains; ++c) {
    Rng rng = make_rng(seed, static_cast<std::uint64_t>(c));
    ChainState s = start_state(fn, Vector::Zero(dim));
    for (int burn = 0; burn < 200; ++burn) transition(s, step, cfg, fn, rng);
    Matrix m(iterations, dim);
    for (int t = 0; t < iterations; ++t) {
      acc += transition(s, step, cfg, fn, rng).accept_prob;
      m.row(t) = s.z.transpose();
    }
    out.push_back(std::move(m));
  }
  if (accept) *accept = acc / (static_cast<double>(chains) * iterations);
  return out;
}

// Antithetic chains can report ESS above the draw count; capping keeps the
// standard errors conservative.
Vector capped_ess(const Draws& draws) {
  const auto n = static_cast<double>(draws.size() * static_cast<std::size_t>(draws[0].rows()));
  return diagnostics::bulk_ess(draws).cwiseMin(n);
}

// |mean - mu| and |var - sd^2| within 3 Monte Carlo standard errors.
void check_moments(const Draws& draws, const GaussianTarget& target) {
  const Matrix pooled = diagnostics::pool(draws);
  const Vector ess = capped_ess(draws);
  Draws squares;
  for (const auto& c : draws)
    squares.push_back((c.rowwise() - target.mean().transpose()).array().square().matrix());
  const Vector ess_sq = capped_ess(squares);
  for (Index d = 0; d < target.dim(); ++d) {
    const double sd = target.sd()[d];
    const double mean = pooled.col(d).mean();
    CHECK(std::abs(mean - target.mean()[d]) <= 3.0 * sd / std::sqrt(ess[d]));
    const double var = (pooled.col(d).array() - target.mean()[d]).square().mean();
    // Var of (x - mu)^2 under a normal is 2 sd^4.
    CHECK(std::abs(var - sd * sd) <= 3.0 * std::sqrt(2.0) * sd * sd / std::sqrt(ess_sq[d]));
  }
}

// Two runs of the same target agree in mean and variance within 3 combined
// standard errors, each error using the ESS of the matching statistic.
void check_same_moments(const Draws& a, const Draws& b, const Vector& sd) {
  auto squared_dev = [](const Draws& draws) {
    const Vector mean = diagnostics::pool(draws).colwise().mean().transpose();
    Draws out;
    for (const auto& c : draws) out.push_back((c.rowwise() - mean.transpose()).array().square().matrix());
    return out;
  };
  const Draws sa = squared_dev(a), sb = squared_dev(b);
  const Matrix pa = diagnostics::pool(a), pb = diagnostics::pool(b);
  const Vector ea = capped_ess(a), eb = capped_ess(b);
  const Vector esa = capped_ess(sa), esb = capped_ess(sb);
  const Matrix qa = diagnostics::pool(sa), qb = diagnostics::pool(sb);
  for (Index d = 0; d < sd.size(); ++d) {
    CAPTURE(d);
    const double s2 = sd[d] * sd[d];
    CHECK(std::abs(pa.col(d).mean() - pb.col(d).mean()) <=
          3.0 * sd[d] * std::sqrt(1.0 / ea[d] + 1.0 / eb[d]));
    CHECK(std::abs(qa.col(d).mean() - qb.col(d).mean()) <=
          3.0 * std::sqrt(2.0) * s2 * std::sqrt(1.0 / esa[d] + 1.0 / esb[d]));
  }
}

}  // namespace

TEST_CASE("preconditioned density") {
  const GaussianTarget target = GaussianTarget::standard(1);
  SUBCASE("identity preconditioner returns the target") {
    flows::Identity id(1);
    Vector g, z(1);
    z << 0.7;
    Vector gt;
    CHECK(preconditioned_logpdf(z, id, target, g) == target.log_density(z, &gt));
    CHECK(g == gt);
  }
  SUBCASE("1-d affine map is a rescaled normal") {
    const double s = 2.5, mu = -1.0;
    Matrix l(1, 1);
    l << s;
    flows::AffineMap map(Vector::Constant(1, mu), l, true);
    for (double z0 : {-2.0, 0.0, 0.3, 1.7}) {
      Vector z(1), g;
      z << z0;
      // x = s z + mu; rho(z) = pi(x) * s.
      const double expected = -0.5 * (s * z0 + mu) * (s * z0 + mu) + std::log(s);
      CHECK(preconditioned_logpdf(z, map, target, g) == doctest::Approx(expected).epsilon(1e-14));
      CHECK(g[0] == doctest::Approx(-s * (s * z0 + mu)).epsilon(1e-14));
    }
  }
  SUBCASE("gradient through an RNVP preconditioner matches finite differences") {
    auto funnel = targets::make_funnel();
    Rng rng = make_rng(1);
    auto flow = flows::rnvp_build(10, 0, 2);
    flow->initialize(testutil::normal_matrix(100, 10, rng, 2.0), Matrix(100, 0));
    testutil::randomize(*flow, rng, 0.1);
    for (int rep = 0; rep < 10; ++rep) {
      const Vector z = testutil::normal_vector(10, rng);
      Vector g, tmp;
      preconditioned_logpdf(z, *flow, *funnel, g);
      const Vector fd = targets::finite_difference_gradient(
          [&](const Vector& v) { return preconditioned_logpdf(v, *flow, *funnel, tmp); }, z);
      for (Index i = 0; i < 10; ++i) CHECK(testutil::rel_err(g[i], fd[i]) <= 1e-4);
    }
  }
  SUBCASE("non-finite images give -inf") {
    flows::Composite flow(1, 0);
    auto a = std::make_unique<flows::ActNorm>(1);
    Vector p(2);
    p << -800.0, 0.0;  // inverse scale exp(800)
    a->set_params(p);
    flow.add(std::move(a));
    Vector z(1), g;
    z << 1.0;
    CHECK(preconditioned_logpdf(z, flow, target, g) == -std::numeric_limits<double>::infinity());
  }
}

TEST_CASE("leapfrog") {
  const GaussianTarget target(Vector::Zero(3), (Vector(3) << 1.0, 2.0, 0.5).finished());
  flows::Identity id(3);
  const LogDensityFn fn = latent_density(id, target);
  Rng rng = make_rng(2);
  SUBCASE("reversibility") {
    PhasePoint a = start_point(fn, testutil::normal_vector(3, rng), testutil::normal_vector(3, rng));
    const Vector z0 = a.z;
    const Vector p0 = a.p;
    REQUIRE(leapfrog(a, 0.1, 20, fn));
    a.p = -a.p;
    REQUIRE(leapfrog(a, 0.1, 20, fn));
    CHECK((a.z - z0).cwiseAbs().maxCoeff() <= 1e-10);
    CHECK((a.p + p0).cwiseAbs().maxCoeff() <= 1e-10);
  }
  SUBCASE("energy drift at small step") {
    const GaussianTarget one = GaussianTarget::standard(1);
    flows::Identity id1(1);
    const LogDensityFn g1 = latent_density(id1, one);
    PhasePoint a = start_point(g1, Vector::Constant(1, 1.0), Vector::Constant(1, 0.5));
    const double h0 = a.hamiltonian();
    leapfrog(a, 0.01, 20, g1);
    CHECK(std::abs(a.hamiltonian() - h0) <= 1e-4);
  }
  SUBCASE("zero step leaves the state unchanged") {
    PhasePoint a = start_point(fn, testutil::normal_vector(3, rng), testutil::normal_vector(3, rng));
    const PhasePoint b = a;
    leapfrog(a, 0.0, 20, fn);
    CHECK(a.z == b.z);
    CHECK(a.p == b.p);
  }
  SUBCASE("volume preservation") {
    const Vector z0 = testutil::normal_vector(3, rng);
    const Vector p0 = testutil::normal_vector(3, rng);
    auto flow_map = [&](const Vector& zp) {
      PhasePoint pt = start_point(fn, zp.head(3), zp.tail(3));
      leapfrog(pt, 0.2, 10, fn);
      Vector out(6);
      out << pt.z, pt.p;
      return out;
    };
    Vector zp(6);
    zp << z0, p0;
    Matrix jac(6, 6);
    for (Index j = 0; j < 6; ++j) {
      Vector up = zp, down = zp;
      up[j] += 1e-5;
      down[j] -= 1e-5;
      jac.col(j) = (flow_map(up) - flow_map(down)) / 2e-5;
    }
    CHECK(std::abs(jac.determinant() - 1.0) <= 1e-6);
  }
}

TEST_CASE("hmc transitions") {
  const GaussianTarget target = GaussianTarget::standard(4);
  flows::Identity id(4);
  const LogDensityFn fn = latent_density(id, target);
  Rng rng = make_rng(3);
  SUBCASE("zero step is always accepted") {
    ChainState s = start_state(fn, testutil::normal_vector(4, rng));
    const auto info = hmc_step(s, 0.0, 20, 1000.0, fn, rng);
    CHECK(info.accept_prob == 1.0);
    CHECK(info.accepted);
  }
  SUBCASE("rejection leaves the state bitwise unchanged") {
    ChainState s = start_state(fn, testutil::normal_vector(4, rng));
    int rejected = 0;
    for (int i = 0; i < 50; ++i) {
      const ChainState prev = s;
      const auto info = hmc_step(s, 3.0, 20, 1000.0, fn, rng);
      if (!info.accepted) {
        ++rejected;
        CHECK(s.z == prev.z);
        CHECK(s.logp == prev.logp);
      }
    }
    CHECK(rejected > 0);
  }
  SUBCASE("fixed RNG consumption per step makes runs replayable") {
    auto trajectory = [&](std::uint64_t seed) {
      Rng r = make_rng(seed);
      ChainState s = start_state(fn, Vector::Zero(4));
      std::vector<double> out;
      for (int i = 0; i < 30; ++i) {
        hmc_step(s, 1.3, 20, 1000.0, fn, r);
        out.push_back(s.z[0]);
      }
      out.push_back(static_cast<double>(r()));
      return out;
    };
    CHECK(trajectory(8) == trajectory(8));
  }
  SUBCASE("divergent trajectories are rejected") {
    auto funnel = targets::make_funnel();
    flows::Identity id10(10);
    const LogDensityFn f = latent_density(id10, *funnel);
    ChainState s = start_state(f, Vector::Constant(10, 0.5));
    s.z[0] = -8.0;
    s.logp = f(s.z, s.grad);
    const ChainState before = s;
    const auto info = hmc_step(s, 5.0, 20, 1000.0, f, rng);
    CHECK(info.divergent);
    CHECK(info.accept_prob == 0.0);
    CHECK(s.z == before.z);
  }
}

TEST_CASE("acceptance falls as the step grows") {
  const GaussianTarget target = GaussianTarget::standard(10);
  flows::Identity id(10);
  const LogDensityFn fn = latent_density(id, target);
  SamplerConfig cfg;
  double previous = 2.0;
  for (double step : {0.01, 0.5, 2.0}) {
    double acc = 0.0;
    run_chains(fn, cfg, step, 10, 4, 250, 11, &acc);
    CHECK(acc < previous);
    previous = acc;
  }
}

TEST_CASE("HMC and NUTS match the moments of a 5-d Gaussian") {
  const GaussianTarget target((Vector(5) << 1.0, -2.0, 0.0, 3.0, 0.5).finished(),
                              (Vector(5) << 1.0, 0.5, 2.0, 1.5, 0.8).finished());
  flows::Identity id(5);
  const LogDensityFn fn = latent_density(id, target);
  SUBCASE("hmc") {
    SamplerConfig cfg;
    check_moments(run_chains(fn, cfg, 0.15, 5, 4, 2500, 21), target);
  }
  SUBCASE("nuts") {
    SamplerConfig cfg;
    cfg.kind = SamplerKind::Nuts;
    check_moments(run_chains(fn, cfg, 0.4, 5, 4, 2500, 22), target);
  }
}

TEST_CASE("NUTS and HMC agree on a 1-d standard normal") {
  const GaussianTarget target = GaussianTarget::standard(1);
  flows::Identity id(1);
  const LogDensityFn fn = latent_density(id, target);
  SamplerConfig hmc, nuts;
  nuts.kind = SamplerKind::Nuts;
  const Draws a = run_chains(fn, hmc, 0.3, 1, 4, 5000, 31);
  const Draws b = run_chains(fn, nuts, 0.5, 1, 4, 5000, 32);
  check_same_moments(a, b, Vector::Ones(1));
}

TEST_CASE("NUTS with zero depth keeps the state") {
  const GaussianTarget target = GaussianTarget::standard(3);
  flows::Identity id(3);
  const LogDensityFn fn = latent_density(id, target);
  Rng rng = make_rng(4);
  ChainState s = start_state(fn, testutil::normal_vector(3, rng));
  const Vector before = s.z;
  const auto info = nuts_step(s, 0.3, 0, 1000.0, fn, rng);
  CHECK(s.z == before);
  CHECK(info.n_leapfrog == 0);
  // Tree depth never exceeds the cap.
  for (int i = 0; i < 50; ++i) CHECK(nuts_step(s, 0.001, 3, 1000.0, fn, rng).tree_depth <= 3);
}

TEST_CASE("dual averaging") {
  SUBCASE("zero error keeps log step at mu") {
    DualAveraging da(0.01);
    for (int i = 0; i < 20; ++i) da.update(0.0);
    CHECK(std::log(da.step()) == doctest::Approx(std::log(0.1)).epsilon(1e-14));
    CHECK(da.mu() == doctest::Approx(std::log(0.1)));
  }
  SUBCASE("all-reject stream strictly shrinks the step") {
    DualAveraging da(0.01);
    double prev = da.update(0.8);
    for (int i = 0; i < 100; ++i) {
      const double next = da.update(0.8);
      CHECK(next < prev);
      CHECK(next > 0.0);
      prev = next;
    }
  }
  SUBCASE("closed loop hits the target acceptance on a 10-d Gaussian") {
    const GaussianTarget target = GaussianTarget::standard(10);
    flows::Identity id(10);
    const LogDensityFn fn = latent_density(id, target);
    for (auto kind : {SamplerKind::Hmc, SamplerKind::Nuts}) {
      CAPTURE(to_string(kind));
      SamplerConfig cfg;
      cfg.kind = kind;
      double accepted = 0.0;
      int count = 0;
      for (int c = 0; c < 8; ++c) {
        Rng rng = make_rng(41, static_cast<std::uint64_t>(c));
        ChainState s = start_state(fn, testutil::normal_vector(10, rng));
        DualAveraging da(0.01);
        double step = 0.01;
        for (int i = 0; i < 500; ++i) {
          const auto info = transition(s, step, cfg, fn, rng);
          const double a = kind == SamplerKind::Hmc ? (info.accepted ? 1.0 : 0.0) : info.accept_prob;
          step = da.update(cfg.target_accept - a);
        }
        step = da.averaged_step();
        for (int i = 0; i < 500; ++i) {
          const auto info = transition(s, step, cfg, fn, rng);
          accepted += kind == SamplerKind::Hmc ? (info.accepted ? 1.0 : 0.0) : info.accept_prob;
          ++count;
        }
      }
      const double rate = accepted / count;
      MESSAGE(to_string(kind) << " acceptance " << rate);
      CHECK(std::abs(rate - 0.8) <= 0.05);
    }
  }
}

TEST_CASE("ensemble initialization") {
  const auto e = make_ensemble(16, 7, 0.01, 99);
  CHECK(e.size() == 16);
  CHECK(e.dim() == 7);
  for (const auto& c : e.chains) CHECK(c.z.cwiseAbs().maxCoeff() < 2.0);
  const auto f = make_ensemble(16, 7, 0.01, 99);
  CHECK(e.chains[5].z == f.chains[5].z);
  CHECK(e.chains[5].z != e.chains[6].z);
  CHECK_THROWS_AS(parse_sampler("mala"), std::invalid_argument);
}

TEST_CASE("pushforward invariance with a fixed fitted preconditioner") {
  const GaussianTarget target((Vector(5) << 0.5, -1.0, 2.0, 0.0, 1.0).finished(),
                              (Vector(5) << 2.0, 0.5, 1.0, 3.0, 0.7).finished());
  Rng rng = make_rng(51);
  Matrix fit_data = testutil::normal_matrix(2000, 5, rng) * 1.3;
  fit_data.col(0) = fit_data.col(0).array().exp();
  auto flow = flows::rnvp_build(5, 0, 2);
  flow->initialize(fit_data, Matrix(2000, 0));
  testutil::randomize(*flow, rng, 0.1);
  SamplerConfig cfg;
  const LogDensityFn latent = latent_density(*flow, target);
  Draws pre = run_chains(latent, cfg, 0.05, 5, 4, 10000, 52);
  for (auto& c : pre) {
    Vector ld;
    c = flow->inverse(c, Matrix(c.rows(), 0), ld);
  }
  flows::Identity id(5);
  const Draws direct = run_chains(latent_density(id, target), cfg, 0.15, 5, 4, 10000, 53);
  check_same_moments(pre, direct, target.sd());
}
