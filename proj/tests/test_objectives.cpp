#include "doctest.h"
#include "fd_oracle.hpp"
#include "test_support.hpp"

#include "gklsbi/objectives.hpp"

#include <cmath>
#include <limits>
#include <numbers>
#include <set>

using namespace gklsbi;
using gklsbi::testing::perturb;
using gklsbi::testing::random_tensor;

namespace {

SurrogateSpec tiny_spec(SurrogateKind kind, BaseKind base = BaseKind::maf) {
  SurrogateSpec spec;
  spec.kind = kind;
  spec.theta_dim = 2;
  spec.x_dim = 2;
  spec.prior = UniformBox::cube(2, -1.0, 1.0);
  spec.flow.base = base;
  spec.flow.transforms = 2;
  spec.flow.hidden = {5};
  spec.flow.embedding_hidden = {3};
  spec.ratio_hidden = {4};
  spec.ratio_embedding_hidden = {3};
  return spec;
}

Batch random_batch(std::size_t m, Rng& rng) {
  Batch b{random_tensor(m, 2, rng, -0.9, 0.9), random_tensor(m, 2, rng), {}};
  return b;
}

// A smooth random positive function on n grid points.
std::vector<double> random_density(std::size_t n, Rng& rng) {
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  const double a = u(rng), b = 3.0 * u(rng), c = u(rng), scale = std::exp(2.0 * u(rng));
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double t = -3.0 + 6.0 * (static_cast<double>(i) + 0.5) / static_cast<double>(n);
    out[i] = scale * std::exp(-0.5 * (t - a) * (t - a) + c * std::sin(b * t));
  }
  return out;
}

double normal_pdf(double x, double mean, double var) {
  return std::exp(-0.5 * (x - mean) * (x - mean) / var) / std::sqrt(2.0 * std::numbers::pi * var);
}

}  // namespace

TEST_CASE("phi") {
  CHECK(phi(1.0) == 0.0);
  CHECK(phi(2.0) == doctest::Approx(1.0 - std::log(2.0)).epsilon(1e-15));
  CHECK(phi(2.0) == doctest::Approx(0.306853).epsilon(1e-6));
  CHECK(std::isinf(phi(0.0)));
  CHECK(std::isinf(phi(std::numeric_limits<double>::infinity())));
  CHECK_THROWS(phi(-0.5));
  for (double r : {1e-6, 0.1, 0.5, 0.99, 1.01, 3.0, 100.0}) CHECK(phi(r) > 0.0);
}

TEST_CASE("gkl_grid properties over random grid pairs") {
  Rng rng(1);
  const std::size_t n = 600;
  const double cell = 6.0 / n;
  for (int trial = 0; trial < 50; ++trial) {
    const auto p = random_density(n, rng);
    const auto q = random_density(n, rng);
    const GridDensityPair pq{p, q, cell};
    const double gkl = gkl_grid(pq);
    CHECK(gkl >= -1e-10);
    CHECK(gkl_grid({p, p, cell}) <= 1e-12);
    // Z_p KL(p/Z_p || q/Z_q) <= GKL(p || q)
    CHECK(grid_mass(p, cell) * kl_grid(pq) <= gkl + 1e-9);

    // scaling: normalized p against 2p
    const double zp = grid_mass(p, cell);
    std::vector<double> pn(n), p2(n);
    for (std::size_t i = 0; i < n; ++i) {
      pn[i] = p[i] / zp;
      p2[i] = 2.0 * pn[i];
    }
    CHECK(std::abs(gkl_grid({pn, p2, cell}) - (1.0 - std::log(2.0))) <= 1e-6);
    CHECK(std::abs(kl_grid({pn, p2, cell})) <= 1e-9);
  }
}

TEST_CASE("gkl_grid reduces to KL for normalized densities") {
  const std::size_t n = 200000;
  const double lo = -15.0, hi = 16.0, cell = (hi - lo) / n;
  GridDensityPair pair{std::vector<double>(n), std::vector<double>(n), cell};
  for (std::size_t i = 0; i < n; ++i) {
    const double t = lo + (static_cast<double>(i) + 0.5) * cell;
    pair.p[i] = normal_pdf(t, 0.0, 1.0);
    pair.q[i] = normal_pdf(t, 1.0, 1.0);
  }
  CHECK(std::abs(gkl_grid(pair) - 0.5) <= 1e-4);
}

TEST_CASE("gkl_grid errors and edge cells") {
  CHECK_THROWS(gkl_grid({{1.0}, {1.0}, 0.0}));
  CHECK_THROWS(gkl_grid({{1.0, 2.0}, {1.0}, 0.1}));
  CHECK_THROWS(gkl_grid({{-1.0}, {1.0}, 0.1}));
  CHECK(gkl_grid({{0.0, 1.0}, {0.5, 1.0}, 1.0}) == 0.5);
  CHECK(std::isinf(gkl_grid({{1.0}, {0.0}, 1.0})));
}

TEST_CASE("derangement") {
  Rng rng(2);
  CHECK_THROWS(derangement(1, rng));
  CHECK(derangement(2, rng) == std::vector<std::size_t>{1, 0});
  for (std::size_t m : {3u, 10u, 1000u}) {
    const auto perm = derangement(m, rng);
    std::set<std::size_t> seen(perm.begin(), perm.end());
    CHECK(seen.size() == m);
    for (std::size_t i = 0; i < m; ++i) CHECK(perm[i] != i);
  }
  // all 2 derangements of 3 elements show up with similar frequency
  int first = 0;
  for (int i = 0; i < 4000; ++i) first += derangement(3, rng)[0] == 1 ? 1 : 0;
  CHECK(std::abs(first - 2000) < 200);
}

TEST_CASE("simulated contrast") {
  Rng rng(5);
  Batch b = random_batch(9, rng);
  std::size_t calls = 0;
  const MarginalSampler draw = [&](std::size_t m, Rng& r) {
    ++calls;
    return testing::random_tensor(m, b.x.cols(), r, 5.0, 6.0);
  };
  add_simulated_contrast(b, 3, draw, rng);
  CHECK(calls == 3);
  REQUIRE(b.x_prime.size() == 3);
  for (const Tensor& xp : b.x_prime) {
    CHECK(xp.same_shape(b.x));
    for (double v : xp.data()) CHECK(v >= 5.0);
  }
  // replaces earlier sets
  add_simulated_contrast(b, 1, draw, rng);
  CHECK(b.x_prime.size() == 1);
  CHECK_THROWS(add_simulated_contrast(b, 0, draw, rng));
  const MarginalSampler wrong = [](std::size_t m, Rng&) { return Tensor(m, 1); };
  CHECK_THROWS_AS(add_simulated_contrast(b, 1, wrong, rng), ShapeError);
}

TEST_CASE("loss_flow examples") {
  Rng init(3), rng(4);
  SUBCASE("standard-normal base at theta = 0 gives ln(2 pi)") {
    SurrogateSpec spec = tiny_spec(SurrogateKind::flow, BaseKind::gaussian);
    spec.prior = Gaussian::isotropic({0.0, 0.0}, 1.0);
    Surrogate q = Surrogate::create(spec, init);
    const double raw = std::log(std::expm1(1.0 - kCholFloor)) - kCholOffset;
    q.params().mutable_get("flow.gauss.out.b")[2] = raw;
    q.params().mutable_get("flow.gauss.out.b")[3] = raw;
    Batch b{Tensor(7, 2), random_tensor(7, 2, rng), {}};
    Graph g;
    CHECK(g.value(loss_flow(g, b, q)).item() == doctest::Approx(1.837877).epsilon(1e-6));
  }
  SUBCASE("M = 1 and an independent summation oracle") {
    Surrogate q = Surrogate::create(tiny_spec(SurrogateKind::flow), init);
    perturb(q.params(), rng, 0.3);
    const Batch one = random_batch(1, rng);
    Graph g1;
    CHECK(g1.value(loss_flow(g1, one, q)).item() == doctest::Approx(-log_unnorm(q, one.theta, one.x).item()).epsilon(1e-14));

    const Batch b = random_batch(33, rng);
    long double sum = 0.0L;
    for (std::size_t m = 0; m < b.size(); ++m) {
      sum -= log_unnorm(q, b.theta.rows_slice(m, 1), b.x.rows_slice(m, 1)).item();
    }
    Graph g;
    CHECK(std::abs(g.value(loss_flow(g, b, q)).item() - static_cast<double>(sum / 33.0L)) < 1e-12);
  }
  SUBCASE("non-finite log-density is an error") {
    Surrogate q = Surrogate::create(tiny_spec(SurrogateKind::flow), init);
    Batch b = random_batch(3, rng);
    b.theta(1, 0) = 1.0;  // on the box edge: log-density is -inf
    Graph g;
    CHECK_THROWS_AS(loss_flow(g, b, q), NumericalError);
  }
}

TEST_CASE("loss_ratio examples") {
  Rng init(5), rng(6);
  Surrogate q = Surrogate::create(tiny_spec(SurrogateKind::ratio), init);
  Batch b = random_batch(50, rng);
  {
    Graph g;
    CHECK_THROWS(loss_ratio(g, b, q));
  }
  add_permuted_contrast(b, 1, rng);
  Graph g0;
  CHECK(g0.value(loss_ratio(g0, b, q)).item() == 1.0);

  for (double c : {-2.0, -0.3, 0.0, 0.7, 1.5}) {
    q.params().mutable_get("ratio.net.out.b")[0] = c;
    Graph g;
    CHECK(std::abs(g.value(loss_ratio(g, b, q)).item() - (-c + std::exp(c))) <= 1e-12);
    CHECK(-c + std::exp(c) >= 1.0);
  }

  SUBCASE("clamp keeps the loss finite and counts saturations") {
    q.params().mutable_get("ratio.net.out.b")[0] = 40.0;
    LossDiagnostics diag;
    Graph g;
    const double loss = g.value(loss_ratio(g, b, q, &diag)).item();
    CHECK(loss == doctest::Approx(-40.0 + std::exp(kRhoClamp)).epsilon(1e-12));
    CHECK(diag.clamped == 50);
  }
}

TEST_CASE("ratio loss with the analytic log ratio of a 2D Gaussian toy") {
  // theta ~ N(0, I), x | theta ~ N(theta, I): ln r = ln N(x; theta, I) - ln N(x; 0, 2I)
  auto log_r1 = [](double t, double x) { return std::log(normal_pdf(x, t, 1.0)) - std::log(normal_pdf(x, 0.0, 2.0)); };

  // grid oracle, one coordinate; both expectations factor over the two coordinates
  const std::size_t n = 1200;
  const double lo = -12.0, h = 24.0 / n;
  double joint_log = 0.0, marg_r = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double t = lo + (i + 0.5) * h;
    for (std::size_t j = 0; j < n; ++j) {
      const double x = lo + (j + 0.5) * h;
      joint_log += normal_pdf(t, 0.0, 1.0) * normal_pdf(x, t, 1.0) * log_r1(t, x) * h * h;
      marg_r += normal_pdf(t, 0.0, 1.0) * normal_pdf(x, 0.0, 2.0) * std::exp(log_r1(t, x)) * h * h;
    }
  }
  const double expected = -2.0 * joint_log + marg_r * marg_r;
  CHECK(expected == doctest::Approx(1.0 - std::log(2.0)).epsilon(1e-6));

  Rng rng(7);
  const std::size_t m = 40000;
  Batch b{Tensor(m, 2), Tensor(m, 2), {}};
  for (std::size_t r = 0; r < m; ++r) {
    for (std::size_t k = 0; k < 2; ++k) {
      b.theta(r, k) = standard_normal(rng);
      b.x(r, k) = b.theta(r, k) + standard_normal(rng);
    }
  }
  add_permuted_contrast(b, 1, rng);
  Tensor rho_joint(m, 1), rho_marg(m, 1);
  for (std::size_t r = 0; r < m; ++r) {
    rho_joint[r] = log_r1(b.theta(r, 0), b.x(r, 0)) + log_r1(b.theta(r, 1), b.x(r, 1));
    rho_marg[r] = log_r1(b.theta(r, 0), b.x_prime[0](r, 0)) + log_r1(b.theta(r, 1), b.x_prime[0](r, 1));
  }
  Graph g;
  const double loss = g.value(contrastive_objective(g, g.input(rho_joint), {g.input(rho_marg)}, nullptr)).item();

  auto variance = [](const Tensor& t, bool exponentiate) {
    double s = 0.0, s2 = 0.0;
    for (double v : t.data()) {
      const double y = exponentiate ? std::exp(v) : v;
      s += y;
      s2 += y * y;
    }
    const double mean = s / t.size();
    return s2 / t.size() - mean * mean;
  };
  const double se = std::sqrt((variance(rho_joint, false) + variance(rho_marg, true)) / m);
  CHECK(std::abs(loss - expected) < 3.0 * se);
}

TEST_CASE("contrastive term is unbiased over derangements") {
  // rho(theta, x) = 0.8 theta x, theta ~ U(-1, 1), x = theta + N(0, 0.5^2)
  Rng rng(8);
  const std::size_t m = 400;
  Batch b{Tensor(m, 1), Tensor(m, 1), {}};
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  for (std::size_t r = 0; r < m; ++r) {
    b.theta[r] = u(rng);
    b.x[r] = b.theta[r] + 0.5 * standard_normal(rng);
  }
  auto rho = [](double t, double x) { return 0.8 * t * x; };

  // exact average over all off-diagonal pairs of this batch
  double pairs = 0.0;
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < m; ++j) {
      if (i != j) pairs += std::exp(rho(b.theta[i], b.x[j]));
    }
  }
  pairs /= static_cast<double>(m * (m - 1));

  double avg = 0.0;
  const int reps = 2000;
  for (int k = 0; k < reps; ++k) {
    const auto perm = derangement(m, rng);
    double s = 0.0;
    for (std::size_t i = 0; i < m; ++i) s += std::exp(rho(b.theta[i], b.x[perm[i]]));
    avg += s / m / reps;
  }
  CHECK(avg == doctest::Approx(pairs).epsilon(2e-3));

  // population value: grid over theta and x with the marginal density of x
  const std::size_t n = 800;
  const double ht = 2.0 / n, lo_x = -4.0, hx = 8.0 / n;
  double pop = 0.0;
  for (std::size_t j = 0; j < n; ++j) {
    const double x = lo_x + (j + 0.5) * hx;
    double px = 0.0;
    for (std::size_t i = 0; i < n; ++i) px += 0.5 * normal_pdf(x, -1.0 + (i + 0.5) * ht, 0.25) * ht;
    for (std::size_t i = 0; i < n; ++i) {
      const double t = -1.0 + (i + 0.5) * ht;
      pop += 0.5 * px * std::exp(rho(t, x)) * ht * hx;
    }
  }
  // U-statistic over 400 points: loose 3-sigma band from the spread of exp(rho)
  CHECK(std::abs(pairs - pop) < 0.05);
}

TEST_CASE("loss identities") {
  Rng init(9), rng(10);
  SUBCASE("hybrid with zero ratio is loss_flow + 1") {
    Surrogate hybrid = Surrogate::create(tiny_spec(SurrogateKind::hybrid), init);
    perturb(hybrid.params(), rng, 0.3, "flow.");
    const Batch b = random_batch(17, rng);
    Graph gh, gf;
    Rng draw(11);
    const double lh = gh.value(loss_hybrid(gh, b, hybrid, draw)).item();
    const double lf = gf.value(loss_flow(gf, b, hybrid)).item();
    CHECK(lh == lf + 1.0);

    // flow gradients coincide as well
    const GradientMap a = gradient(gh, hybrid.params());
    const GradientMap c = gradient(gf, hybrid.params());
    for (const auto& [name, t] : a) {
      if (name.rfind("flow.", 0) != 0) continue;
      for (std::size_t i = 0; i < t.size(); ++i) CHECK(t[i] == c.at(name)[i]);
    }
  }
}

TEST_CASE("loss gradients match finite differences") {
  Rng init(12), rng(13);
  for (BaseKind base : {BaseKind::maf, BaseKind::gaussian}) {
    Surrogate q = Surrogate::create(tiny_spec(SurrogateKind::flow, base), init);
    perturb(q.params(), rng, 0.3);
    const Batch b = random_batch(5, rng);
    auto f = [&](const ParamStore& p) {
      Surrogate probe(q.spec(), p);
      Graph g;
      return g.value(loss_flow(g, b, probe)).item();
    };
    Graph g;
    loss_flow(g, b, q);
    CHECK(testing::max_relative_error(gradient(g, q.params()), testing::finite_difference(f, q.params())) < 1e-4);
  }
  {
    Surrogate q = Surrogate::create(tiny_spec(SurrogateKind::ratio), init);
    perturb(q.params(), rng, 0.3);
    Batch b = random_batch(6, rng);
    add_permuted_contrast(b, 2, rng);
    auto f = [&](const ParamStore& p) {
      Surrogate probe(q.spec(), p);
      Graph g;
      return g.value(loss_ratio(g, b, probe)).item();
    };
    Graph g;
    loss_ratio(g, b, q);
    CHECK(testing::max_relative_error(gradient(g, q.params()), testing::finite_difference(f, q.params())) < 1e-4);
  }
  {
    Surrogate q = Surrogate::create(tiny_spec(SurrogateKind::hybrid), init);
    perturb(q.params(), rng, 0.3);
    const Batch b = random_batch(6, rng);
    // the same draw of theta~ on every evaluation; theta~ is a constant of the loss
    auto f = [&](const ParamStore& p) {
      Surrogate probe(q.spec(), p);
      Rng draw(14);
      const Tensor tilde = q.flow()->sample(q.params(), b.x, draw);
      Graph g;
      Var lf = loss_flow(g, b, probe);
      Var x = g.input(b.x);
      Var joint = probe.ratio()->forward(g, p, g.input(b.theta), x);
      Var contrast = probe.ratio()->forward(g, p, g.input(tilde), x);
      return g.value(g.add(lf, contrastive_objective(g, joint, {contrast}, nullptr))).item();
    };
    Graph g;
    Rng draw(14);
    loss_hybrid(g, b, q, draw);
    const GradientMap analytic = gradient(g, q.params());
    CHECK(testing::max_relative_error(analytic, testing::finite_difference(f, q.params())) < 1e-4);

    // base gradients do not see the exp term
    Graph gf;
    loss_flow(gf, b, q);
    const GradientMap flow_only = gradient(gf, q.params());
    for (const auto& [name, t] : analytic) {
      if (name.rfind("flow.", 0) != 0) continue;
      for (std::size_t i = 0; i < t.size(); ++i) CHECK(t[i] == flow_only.at(name)[i]);
    }
  }
}

TEST_CASE("batch validation") {
  Rng init(15), rng(16);
  Surrogate q = Surrogate::create(tiny_spec(SurrogateKind::flow), init);
  Graph g;
  CHECK_THROWS_AS(loss_flow(g, Batch{Tensor(3, 2), Tensor(4, 2), {}}, q), ShapeError);
  CHECK_THROWS_AS(loss_flow(g, Batch{Tensor(0, 2), Tensor(0, 2), {}}, q), ShapeError);
  Batch b = random_batch(4, rng);
  b.x_prime.push_back(Tensor(3, 2));
  CHECK_THROWS_AS(b.validate(), ShapeError);
  Surrogate ratio = Surrogate::create(tiny_spec(SurrogateKind::ratio), init);
  CHECK_THROWS(loss_flow(g, random_batch(4, rng), ratio));
}
