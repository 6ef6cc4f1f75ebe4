#include "doctest.h"
#include "fd_oracle.hpp"
#include "test_support.hpp"

#include "gklsbi/surrogates.hpp"

#include <cmath>
#include <limits>
#include <numbers>

using namespace gklsbi;
using gklsbi::testing::perturb;
using gklsbi::testing::random_tensor;

namespace {

SurrogateSpec small_spec(SurrogateKind kind, Distribution prior, BaseKind base = BaseKind::maf) {
  SurrogateSpec spec;
  spec.kind = kind;
  spec.theta_dim = dim(prior);
  spec.x_dim = 2;
  spec.prior = std::move(prior);
  spec.flow.base = base;
  spec.flow.transforms = 3;
  spec.flow.hidden = {16};
  spec.flow.embedding_hidden = {8};
  spec.ratio_hidden = {16};
  spec.ratio_embedding_hidden = {8};
  return spec;
}

// raw diagonal bias that makes the Cholesky diagonal exactly one
double unit_diag_raw() { return std::log(std::expm1(1.0 - kCholFloor)) - kCholOffset; }

// Midpoint grid over [lo, hi]^2 of exp(log q(theta | x)).
struct Grid2 {
  double lo, hi;
  std::size_t n;
  Tensor points() const {
    Tensor t(n * n, 2);
    const double h = (hi - lo) / static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < n; ++j) {
        t(i * n + j, 0) = lo + (static_cast<double>(i) + 0.5) * h;
        t(i * n + j, 1) = lo + (static_cast<double>(j) + 0.5) * h;
      }
    }
    return t;
  }
  double cell() const { return std::pow((hi - lo) / static_cast<double>(n), 2); }
};

double grid_mass(const Surrogate& q, const Grid2& grid, std::span<const double> x) {
  const Tensor pts = grid.points();
  const Tensor lp = log_unnorm(q, pts, Tensor::row(x).repeat_row(pts.rows()));
  double total = 0.0;
  for (double v : lp.data()) total += std::exp(v);
  return total * grid.cell();
}

}  // namespace

TEST_CASE("log_unnorm examples") {
  const double xo[] = {0.3, -0.4};
  const Tensor x = Tensor::row(xo).repeat_row(5);
  Rng rng(1);

  SUBCASE("hybrid with zero ratio equals its flow") {
    Rng init(2);
    Surrogate hybrid = Surrogate::create(small_spec(SurrogateKind::hybrid, UniformBox::cube(2, -1, 1)), init);
    perturb(hybrid.params(), rng, 0.3, "flow.");
    const Tensor theta = random_tensor(5, 2, rng, -0.9, 0.9);
    const Tensor a = log_unnorm(hybrid, theta, x);
    const Tensor b = hybrid.flow()->log_prob(hybrid.params(), theta, x);
    for (std::size_t i = 0; i < 5; ++i) CHECK(a[i] == b[i]);
  }

  SUBCASE("ratio with zero output equals the prior") {
    Rng init(3);
    Surrogate ratio = Surrogate::create(small_spec(SurrogateKind::ratio, UniformBox::cube(2, -1, 1)), init);
    Tensor theta = random_tensor(5, 2, rng, -0.9, 0.9);
    theta(4, 0) = 1.5;
    const Tensor lp = log_unnorm(ratio, theta, x);
    for (std::size_t i = 0; i < 4; ++i) CHECK(lp[i] == -std::log(4.0));
    CHECK(lp[4] == -std::numeric_limits<double>::infinity());
  }

  SUBCASE("conditional Gaussian with zero mean and identity factor") {
    SurrogateSpec spec = small_spec(SurrogateKind::flow, Gaussian::isotropic({0.0, 0.0}, 1.0), BaseKind::gaussian);
    Rng init(4);
    Surrogate q = Surrogate::create(spec, init);
    Tensor& bias = q.params().mutable_get("flow.gauss.out.b");
    bias[2] = unit_diag_raw();
    bias[3] = unit_diag_raw();
    const double zero[] = {0.0, 0.0};
    const Tensor lp = log_unnorm(q, Tensor::row(zero), Tensor::row(xo));
    CHECK(lp.item() == doctest::Approx(-1.837877).epsilon(1e-7));
    CHECK(lp.item() == doctest::Approx(-std::log(2.0 * std::numbers::pi)).epsilon(1e-12));
  }

  SUBCASE("hybrid decomposition is exact") {
    Rng init(5);
    Surrogate hybrid = Surrogate::create(small_spec(SurrogateKind::hybrid, UniformBox::cube(2, -1, 1)), init);
    perturb(hybrid.params(), rng, 0.3);
    const Tensor theta = random_tensor(5, 2, rng, -0.9, 0.9);
    const Tensor full = log_unnorm(hybrid, theta, x);
    const Tensor flow = hybrid.flow()->log_prob(hybrid.params(), theta, x);
    const Tensor rho = hybrid.ratio()->forward(hybrid.params(), theta, x);
    for (std::size_t i = 0; i < 5; ++i) CHECK(full[i] - flow[i] == doctest::Approx(rho[i]).epsilon(1e-12));
  }

  SUBCASE("shape errors") {
    Rng init(6);
    Surrogate q = Surrogate::create(small_spec(SurrogateKind::flow, UniformBox::cube(2, -1, 1)), init);
    CHECK_THROWS_AS(log_unnorm(q, Tensor(5, 3), x), ShapeError);
    CHECK_THROWS_AS(log_unnorm(q, Tensor(4, 2), x), ShapeError);
  }
}

TEST_CASE("base sampling") {
  SUBCASE("mu(x) = x, L = I gives x + eps, reproducible by seed") {
    SurrogateSpec spec = small_spec(SurrogateKind::flow, Gaussian::isotropic({0.0, 0.0}, 1.0), BaseKind::gaussian);
    spec.flow.embedding_hidden = {};
    spec.flow.hidden = {4};
    Rng init(7);
    Surrogate q = Surrogate::create(spec, init);
    auto& p = q.params();
    // relu(x) - relu(-x) = x through a 4-unit hidden layer
    Tensor w_in(2, 4, {1, 0, -1, 0, 0, 1, 0, -1});
    p.set("flow.gauss.hidden0.w", w_in);
    p.set("flow.gauss.hidden0.b", Tensor(1, 4));
    Tensor w_out(4, 5);
    w_out(0, 0) = 1;
    w_out(1, 1) = 1;
    w_out(2, 0) = -1;
    w_out(3, 1) = -1;
    p.set("flow.gauss.out.w", w_out);
    Tensor b_out(1, 5);
    b_out[2] = unit_diag_raw();
    b_out[3] = unit_diag_raw();
    p.set("flow.gauss.out.b", b_out);

    const Tensor x(3, 2, {0.5, -1.0, 2.0, 0.0, -3.0, 1.5});
    Rng a(42), b(42), c(42);
    const Tensor s = q.flow()->sample(p, x, a);
    for (std::size_t i = 0; i < x.size(); ++i) CHECK(s[i] == doctest::Approx(x[i] + standard_normal(b)).epsilon(1e-12));
    const Tensor again = q.flow()->sample(p, x, c);
    for (std::size_t i = 0; i < x.size(); ++i) CHECK(again[i] == s[i]);
  }

  SUBCASE("stop-gradient sample passes no adjoint to the flow") {
    Rng init(8), rng(9);
    Surrogate q = Surrogate::create(small_spec(SurrogateKind::hybrid, UniformBox::cube(2, -1, 1)), init);
    perturb(q.params(), rng, 0.3);
    const double xo[] = {0.1, 0.2};
    const Tensor x = Tensor::row(xo).repeat_row(8);
    for (bool stop : {true, false}) {
      Graph g;
      Rng draw(10);
      Var xv = g.input(x);
      Var theta = q.flow()->sample(g, q.params(), xv, draw, stop);
      g.mean(g.exp(q.ratio()->forward(g, q.params(), theta, xv)));
      const GradientMap grads = gradient(g, q.params());
      double flow_norm = 0.0, ratio_norm = 0.0;
      for (const auto& [name, t] : grads) {
        double& acc = name.rfind("flow.", 0) == 0 ? flow_norm : ratio_norm;
        for (double v : t.data()) acc += std::abs(v);
      }
      CHECK(ratio_norm > 0.0);
      if (stop) {
        CHECK(flow_norm == 0.0);
      } else {
        CHECK(flow_norm > 0.0);
      }
    }
  }

  SUBCASE("bijection keeps samples inside the box") {
    Rng init(11), rng(12);
    const UniformBox box({-1.0, 0.0}, {1.0, 3.0});
    Surrogate q = Surrogate::create(small_spec(SurrogateKind::flow, box), init);
    perturb(q.params(), rng, 1.0, "flow.");
    const double xo[] = {0.0, 0.0};
    const Tensor s = q.flow()->sample(q.params(), Tensor::row(xo).repeat_row(5000), rng);
    for (std::size_t r = 0; r < s.rows(); ++r) CHECK(box.contains(s.row_span(r)));
  }
}

TEST_CASE("flow densities are normalized") {
  const double xo[] = {0.5, -0.2};
  Rng rng(13);
  SUBCASE("MAF without bijection") {
    Rng init(14);
    Surrogate q = Surrogate::create(small_spec(SurrogateKind::flow, Gaussian::isotropic({0.0, 0.0}, 1.0)), init);
    perturb(q.params(), rng, 0.2, "flow.");
    CHECK(grid_mass(q, Grid2{-9.0, 9.0, 360}, xo) == doctest::Approx(1.0).epsilon(1e-3));
  }
  SUBCASE("MAF with bijection onto the prior box") {
    Rng init(15);
    Surrogate q = Surrogate::create(small_spec(SurrogateKind::flow, UniformBox::cube(2, -1, 1)), init);
    perturb(q.params(), rng, 0.3, "flow.");
    CHECK(grid_mass(q, Grid2{-1.0, 1.0, 400}, xo) == doctest::Approx(1.0).epsilon(1e-3));
  }
  SUBCASE("conditional Gaussian with a full Cholesky factor") {
    Rng init(16);
    Surrogate q = Surrogate::create(
        small_spec(SurrogateKind::flow, Gaussian::isotropic({0.0, 0.0}, 1.0), BaseKind::gaussian), init);
    perturb(q.params(), rng, 0.3, "flow.");
    CHECK(grid_mass(q, Grid2{-9.0, 9.0, 360}, xo) == doctest::Approx(1.0).epsilon(1e-3));
  }
}

TEST_CASE("flow samples match exp(log_prob) in total variation") {
  Rng init(17), rng(18);
  Surrogate q = Surrogate::create(small_spec(SurrogateKind::flow, UniformBox::cube(2, -1, 1)), init);
  perturb(q.params(), rng, 0.25, "flow.");
  const double xo[] = {0.2, 0.7};
  const std::size_t n = 100000, bins = 20, sub = 20;

  const Tensor s = q.flow()->sample(q.params(), Tensor::row(xo).repeat_row(n), rng);
  std::vector<double> hist(bins * bins, 0.0);
  auto bin_of = [&](double v) { return std::min(bins - 1, static_cast<std::size_t>((v + 1.0) / 2.0 * bins)); };
  for (std::size_t r = 0; r < n; ++r) hist[bin_of(s(r, 0)) * bins + bin_of(s(r, 1))] += 1.0 / n;

  // density integrated per bin with a sub x sub midpoint rule
  const Grid2 fine{-1.0, 1.0, bins * sub};
  const Tensor pts = fine.points();
  const Tensor lp = q.flow()->log_prob(q.params(), pts, Tensor::row(xo).repeat_row(pts.rows()));
  std::vector<double> mass(bins * bins, 0.0);
  for (std::size_t r = 0; r < pts.rows(); ++r) {
    mass[bin_of(pts(r, 0)) * bins + bin_of(pts(r, 1))] += std::exp(lp[r]) * fine.cell();
  }
  double tv = 0.0;
  for (std::size_t i = 0; i < hist.size(); ++i) tv += 0.5 * std::abs(hist[i] - mass[i]);
  CHECK(tv < 0.05);
}

TEST_CASE("autoregressive masks") {
  Rng init(19), rng(20);
  SurrogateSpec spec = small_spec(SurrogateKind::flow, Gaussian::isotropic({0, 0, 0, 0}, 1.0));
  spec.flow.hidden = {12, 12};
  Surrogate q = Surrogate::create(spec, init);
  perturb(q.params(), rng, 0.5, "flow.");
  const std::size_t d = 4;
  const Tensor x = random_tensor(1, 2, rng);
  const Tensor base = random_tensor(1, d, rng);
  for (std::size_t layer = 0; layer < spec.flow.transforms; ++layer) {
    const Tensor ref = q.flow()->made_outputs(q.params(), layer, base, x);
    for (std::size_t j = 0; j < d; ++j) {
      Tensor moved = base;
      moved[j] += 0.7;
      const Tensor out = q.flow()->made_outputs(q.params(), layer, moved, x);
      for (std::size_t i = 0; i <= j; ++i) {
        CHECK(out[i] == ref[i]);
        CHECK(out[d + i] == ref[d + i]);
      }
      if (j + 1 < d) {
        bool changed = false;
        for (std::size_t i = j + 1; i < d; ++i) changed = changed || out[i] != ref[i];
        CHECK(changed);
      }
    }
  }
}

TEST_CASE("extreme MAF weights still give finite samples") {
  Rng init(23), rng(24);
  for (bool box : {true, false}) {
    Distribution prior = box ? Distribution(UniformBox::cube(2, -1, 1)) : Distribution(Gaussian::isotropic({0, 0}, 1.0));
    Surrogate q = Surrogate::create(small_spec(SurrogateKind::flow, prior), init);
    // log-scale biases far beyond what exp() can represent
    for (std::size_t layer = 0; layer < 3; ++layer) {
      Tensor& b = q.params().mutable_get("flow.maf" + std::to_string(layer) + ".out.b");
      for (std::size_t i = 2; i < 4; ++i) b[i] = 1000.0;
    }
    perturb(q.params(), rng, 3.0, "flow.");
    const Tensor x = random_tensor(2000, 2, rng, -5.0, 5.0);
    const Tensor s = q.flow()->sample(q.params(), x, rng);
    CHECK(s.all_finite());
    const Tensor out = q.flow()->made_outputs(q.params(), 0, s, x);
    for (std::size_t r = 0; r < out.rows(); ++r) {
      CHECK(std::abs(out(r, 2)) <= kMaxLogScale);
      CHECK(std::abs(out(r, 3)) <= kMaxLogScale);
    }
  }
}

TEST_CASE("flow log_prob gradients match finite differences") {
  for (BaseKind base : {BaseKind::maf, BaseKind::gaussian}) {
    Rng init(21), rng(22);
    SurrogateSpec spec = small_spec(SurrogateKind::flow, UniformBox::cube(2, -1, 1), base);
    spec.flow.hidden = {5};
    spec.flow.embedding_hidden = {3};
    spec.flow.transforms = 2;
    Surrogate q = Surrogate::create(spec, init);
    perturb(q.params(), rng, 0.3, "flow.");
    const Tensor theta = random_tensor(4, 2, rng, -0.9, 0.9);
    const Tensor x = random_tensor(4, 2, rng);
    auto f = [&](const ParamStore& p) {
      Graph g;
      return g.value(g.mean(q.flow()->log_prob(g, p, g.input(theta), g.input(x)))).item();
    };
    Graph g;
    g.mean(q.flow()->log_prob(g, q.params(), g.input(theta), g.input(x)));
    const GradientMap analytic = gradient(g, q.params());
    const GradientMap numeric = testing::finite_difference(f, q.params());
    CHECK(testing::max_relative_error(analytic, numeric) < 1e-4);
  }
}

TEST_CASE("estimate_partition") {
  const double xo[] = {0.1, -0.3};
  SUBCASE("zero ratio gives exactly one") {
    for (SurrogateKind kind : {SurrogateKind::ratio, SurrogateKind::hybrid}) {
      Rng init(23), rng(24);
      Surrogate q = Surrogate::create(small_spec(kind, UniformBox::cube(2, -1, 1)), init);
      for (std::size_t n : {1u, 7u, 1000u}) CHECK(estimate_partition(q, xo, n, rng) == 1.0);
    }
  }
  SUBCASE("constant ratio gives exp(c)") {
    Rng init(25), rng(26);
    Surrogate q = Surrogate::create(small_spec(SurrogateKind::ratio, UniformBox::cube(2, -1, 1)), init);
    q.params().mutable_get("ratio.net.out.b")[0] = 0.75;
    CHECK(estimate_partition(q, xo, 500, rng) == doctest::Approx(std::exp(0.75)).epsilon(1e-14));
  }
  SUBCASE("non-trivial ratio agrees with grid quadrature within 3 standard errors") {
    Rng init(27), rng(28);
    Surrogate q = Surrogate::create(small_spec(SurrogateKind::ratio, UniformBox::cube(2, -1, 1)), init);
    perturb(q.params(), rng, 0.5, "ratio.");
    // Z = integral of exp(rho) p over the box
    const Grid2 grid{-1.0, 1.0, 400};
    const Tensor pts = grid.points();
    const Tensor rho = q.ratio()->forward(q.params(), pts, Tensor::row(xo).repeat_row(pts.rows()));
    double z = 0.0, second = 0.0;
    for (double v : rho.data()) {
      z += std::exp(v) * grid.cell() / 4.0;
      second += std::exp(2.0 * v) * grid.cell() / 4.0;
    }
    const std::size_t n = 10000;
    const double se = std::sqrt((second - z * z) / n);
    CHECK(se > 0.0);
    CHECK(std::abs(estimate_partition(q, xo, n, rng) - z) < 3.0 * se);
  }
  SUBCASE("errors") {
    Rng init(29), rng(30);
    Surrogate ratio = Surrogate::create(small_spec(SurrogateKind::ratio, UniformBox::cube(2, -1, 1)), init);
    CHECK_THROWS(estimate_partition(ratio, xo, 0, rng));
    Surrogate flow = Surrogate::create(small_spec(SurrogateKind::flow, UniformBox::cube(2, -1, 1)), init);
    CHECK_THROWS(estimate_partition(flow, xo, 10, rng));
  }
}

TEST_CASE("surrogate from stored parameters") {
  Rng init(31), rng(32);
  const SurrogateSpec spec = small_spec(SurrogateKind::hybrid, UniformBox::cube(2, -1, 1));
  Surrogate q = Surrogate::create(spec, init);
  perturb(q.params(), rng, 0.2);
  Surrogate restored(spec, q.params());
  const Tensor theta = random_tensor(6, 2, rng, -0.9, 0.9);
  const Tensor x = random_tensor(6, 2, rng);
  const Tensor a = log_unnorm(q, theta, x);
  const Tensor b = log_unnorm(restored, theta, x);
  for (std::size_t i = 0; i < 6; ++i) CHECK(a[i] == b[i]);

  ParamStore broken;
  CHECK_THROWS(Surrogate(spec, broken));
  SurrogateSpec other = spec;
  other.ratio_hidden = {32};
  CHECK_THROWS(Surrogate(other, q.params()));
}
