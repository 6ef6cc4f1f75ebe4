#include "doctest.h"
#include "fd_oracle.hpp"

#include "gklsbi/graph.hpp"
#include "gklsbi/mlp.hpp"
#include "gklsbi/optim.hpp"

#include <cmath>
#include <functional>
#include <limits>

using namespace gklsbi;
using gklsbi::testing::finite_difference;
using gklsbi::testing::max_relative_error;

namespace {

Tensor random_tensor(std::size_t r, std::size_t c, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor t(r, c);
  std::uniform_real_distribution<double> u(lo, hi);
  for (double& v : t.data()) v = u(rng);
  return t;
}

// Builds loss = sum(op(a, b) * probe) so every output entry gets a distinct
// upstream adjoint.
using OpBuilder = std::function<Var(Graph&, Var a, Var b)>;

double op_gradient_error(const OpBuilder& build, std::size_t ra, std::size_t ca, std::size_t rb,
                         std::size_t cb, Rng& rng, double lo = -1.0, double hi = 1.0) {
  ParamStore params;
  params.add("a", random_tensor(ra, ca, rng, lo, hi));
  params.add("b", random_tensor(rb, cb, rng, lo, hi));
  Graph probe_graph;
  const Tensor shape_probe =
      probe_graph.value(build(probe_graph, probe_graph.param(params, "a"), probe_graph.param(params, "b")));
  const Tensor weights = random_tensor(shape_probe.rows(), shape_probe.cols(), rng);

  auto f = [&](const ParamStore& p) {
    Graph g;
    Var out = build(g, g.param(p, "a"), g.param(p, "b"));
    return g.value(g.sum(g.mul(out, g.input(weights)))).item();
  };
  Graph g;
  Var out = build(g, g.param(params, "a"), g.param(params, "b"));
  g.sum(g.mul(out, g.input(weights)));
  return max_relative_error(gradient(g, params), finite_difference(f, params));
}

}  // namespace

TEST_CASE("gradient of w*w at 3 is 6") {
  ParamStore params;
  params.add("w", Tensor::scalar(3.0));
  Graph g;
  Var w = g.param(params, "w");
  g.mul(w, w);
  auto grads = gradient(g, params);
  CHECK(grads.at("w").item() == doctest::Approx(6.0).epsilon(1e-15));
}

TEST_CASE("gradient of a function constant in w is zero") {
  ParamStore params;
  params.add("w", Tensor(2, 2, 0.7));
  params.add("unused", Tensor(1, 3, 1.0));
  Graph g;
  Var w = g.param(params, "w");
  g.add_const(g.sum(g.scale(w, 0.0)), 4.0);
  auto grads = gradient(g, params);
  for (double v : grads.at("w").data()) CHECK(v == 0.0);
  for (double v : grads.at("unused").data()) CHECK(v == 0.0);
}

TEST_CASE("sum(exp(A w)) matches central finite differences") {
  Rng rng(17);
  ParamStore params;
  const Tensor a = random_tensor(4, 4, rng);
  params.add("w", random_tensor(4, 1, rng));
  auto f = [&](const ParamStore& p) {
    Graph g;
    return g.value(g.sum(g.exp(g.matmul(g.input(a), g.param(p, "w"))))).item();
  };
  Graph g;
  g.sum(g.exp(g.matmul(g.input(a), g.param(params, "w"))));
  CHECK(max_relative_error(gradient(g, params), finite_difference(f, params)) < 1e-4);
}

TEST_CASE("gradient errors") {
  ParamStore params;
  params.add("w", Tensor(2, 2, 1.0));
  SUBCASE("non-scalar output") {
    Graph g;
    g.exp(g.param(params, "w"));
    CHECK_THROWS_AS(gradient(g, params), ShapeError);
  }
  SUBCASE("NaN during backward") {
    params.set("w", Tensor(2, 2, -1.0));
    // d/dw [w log w] = log w + 1 is NaN for w < 0
    Graph h;
    Var w = h.param(params, "w");
    h.sum(h.mul(h.log(w), w));
    CHECK_THROWS_AS(gradient(h, params), NumericalError);
  }
}

TEST_CASE("every differentiable op matches finite differences on 100 random inputs") {
  Rng rng(2024);
  struct Case {
    const char* name;
    OpBuilder build;
    std::size_t ra, ca, rb, cb;
    double lo, hi;
  };
  const std::vector<Case> cases = {
      {"matmul", [](Graph& g, Var a, Var b) { return g.matmul(a, b); }, 3, 4, 4, 2, -1, 1},
      {"add", [](Graph& g, Var a, Var b) { return g.add(a, b); }, 3, 4, 3, 4, -1, 1},
      {"add row broadcast", [](Graph& g, Var a, Var b) { return g.add(a, b); }, 3, 4, 1, 4, -1, 1},
      {"sub column broadcast", [](Graph& g, Var a, Var b) { return g.sub(a, b); }, 3, 4, 3, 1, -1, 1},
      {"mul", [](Graph& g, Var a, Var b) { return g.mul(a, b); }, 3, 4, 3, 4, -1, 1},
      {"mul scalar broadcast", [](Graph& g, Var a, Var b) { return g.mul(a, b); }, 3, 4, 1, 1, -1, 1},
      {"neg", [](Graph& g, Var a, Var b) { return g.add(g.neg(a), b); }, 2, 3, 2, 3, -1, 1},
      {"scale", [](Graph& g, Var a, Var) { return g.scale(a, -2.5); }, 2, 3, 1, 1, -1, 1},
      {"add_const", [](Graph& g, Var a, Var b) { return g.mul(g.add_const(a, 0.3), b); }, 2, 3, 2, 3, -1, 1},
      {"min_const", [](Graph& g, Var a, Var) { return g.min_const(a, 0.2); }, 3, 3, 1, 1, -1, 1},
      {"exp", [](Graph& g, Var a, Var) { return g.exp(a); }, 3, 3, 1, 1, -2, 2},
      {"log", [](Graph& g, Var a, Var) { return g.log(a); }, 3, 3, 1, 1, 0.2, 3},
      {"tanh", [](Graph& g, Var a, Var) { return g.tanh(a); }, 3, 3, 1, 1, -2, 2},
      {"relu", [](Graph& g, Var a, Var) { return g.relu(a); }, 3, 3, 1, 1, -2, 2},
      {"gelu", [](Graph& g, Var a, Var) { return g.gelu(a); }, 3, 3, 1, 1, -3, 3},
      {"softplus", [](Graph& g, Var a, Var) { return g.softplus(a); }, 3, 3, 1, 1, -4, 4},
      {"sigmoid", [](Graph& g, Var a, Var) { return g.sigmoid(a); }, 3, 3, 1, 1, -4, 4},
      {"square", [](Graph& g, Var a, Var) { return g.square(a); }, 3, 3, 1, 1, -2, 2},
      {"sum", [](Graph& g, Var a, Var b) { return g.mul(g.sum(a), b); }, 3, 3, 1, 1, -1, 1},
      {"mean", [](Graph& g, Var a, Var b) { return g.mul(g.mean(a), b); }, 3, 3, 1, 1, -1, 1},
      {"row_sum", [](Graph& g, Var a, Var) { return g.row_sum(a); }, 3, 4, 1, 1, -1, 1},
      {"select_cols", [](Graph& g, Var a, Var) { return g.select_cols(a, {2, 0, 2}); }, 3, 4, 1, 1, -1, 1},
      {"slice_cols", [](Graph& g, Var a, Var) { return g.slice_cols(a, 1, 2); }, 3, 4, 1, 1, -1, 1},
      {"concat_cols", [](Graph& g, Var a, Var b) { return g.concat_cols({a, b, a}); }, 3, 2, 3, 1, -1, 1},
      {"layer_norm", [](Graph& g, Var a, Var) { return g.layer_norm(a); }, 3, 5, 1, 1, -2, 2},
      {"tril_solve",
       [](Graph& g, Var a, Var b) {
         Var diag = g.add_const(g.softplus(g.slice_cols(a, 0, 3)), 0.5);
         return g.tril_solve(diag, g.slice_cols(a, 3, 3), b);
       },
       4, 6, 4, 3, -1, 1},
      {"tril_matvec",
       [](Graph& g, Var a, Var b) {
         return g.tril_matvec(g.slice_cols(a, 0, 3), g.slice_cols(a, 3, 3), b);
       },
       4, 6, 4, 3, -1, 1},
  };
  for (const auto& c : cases) {
    double worst = 0.0;
    for (int trial = 0; trial < 100; ++trial) {
      worst = std::max(worst, op_gradient_error(c.build, c.ra, c.ca, c.rb, c.cb, rng, c.lo, c.hi));
    }
    INFO(c.name);
    CHECK(worst < 1e-4);
  }
}

TEST_CASE("tril_solve inverts tril_matvec") {
  Rng rng(5);
  Graph g;
  Var diag = g.input(random_tensor(3, 4, rng, 0.5, 2.0));
  Var off = g.input(random_tensor(3, 6, rng));
  Var v = g.input(random_tensor(3, 4, rng));
  Var back = g.tril_solve(diag, off, g.tril_matvec(diag, off, v));
  for (std::size_t i = 0; i < 12; ++i) CHECK(g.value(back)[i] == doctest::Approx(g.value(v)[i]).epsilon(1e-12));
}

TEST_CASE("mlp_forward") {
  Rng rng(3);
  SUBCASE("zero network outputs zero") {
    MlpConfig cfg{.input_dim = 3, .hidden = {8, 8}, .output_dim = 2, .activation = Activation::gelu,
                  .residual = true, .layer_norm = true};
    Mlp mlp("net", cfg);
    ParamStore params;
    mlp.init(params, rng);
    for (const auto& name : params.names()) params.set(name, Tensor(params.get(name).rows(), params.get(name).cols()));
    Graph g;
    Var out = mlp.forward(g, params, g.input(random_tensor(5, 3, rng)));
    for (double v : g.value(out).data()) CHECK(v == 0.0);
  }
  SUBCASE("residual block with zero inner weights is the identity") {
    ParamStore params;
    init_linear(params, rng, "r", "block", 4, 4, /*zero=*/true);
    params.add("r.block_ln.gain", Tensor(1, 4, 1.0));
    params.add("r.block_ln.shift", Tensor(1, 4, 0.0));
    Graph g;
    const Tensor x = random_tensor(6, 4, rng);
    Var out = residual_block(g, params, "r", "block", Activation::gelu, true, g.input(x));
    for (std::size_t i = 0; i < x.size(); ++i) CHECK(g.value(out)[i] == x[i]);
  }
  SUBCASE("one hidden relu layer matches direct matrix arithmetic") {
    MlpConfig cfg{.input_dim = 3, .hidden = {5}, .output_dim = 2};
    Mlp mlp("net", cfg);
    ParamStore params;
    mlp.init(params, rng);
    const Tensor x = random_tensor(4, 3, rng);
    Graph g;
    const Tensor out = g.value(mlp.forward(g, params, g.input(x)));

    const Tensor& w1 = params.get("net.hidden0.w");
    const Tensor& b1 = params.get("net.hidden0.b");
    const Tensor& w2 = params.get("net.out.w");
    const Tensor& b2 = params.get("net.out.b");
    for (std::size_t m = 0; m < 4; ++m) {
      double h[5];
      for (std::size_t j = 0; j < 5; ++j) {
        double s = b1[j];
        for (std::size_t i = 0; i < 3; ++i) s += x(m, i) * w1(i, j);
        h[j] = s > 0.0 ? s : 0.0;
      }
      for (std::size_t k = 0; k < 2; ++k) {
        double s = b2[k];
        for (std::size_t j = 0; j < 5; ++j) s += h[j] * w2(j, k);
        CHECK(std::abs(out(m, k) - s) < 1e-12);
      }
    }
  }
  SUBCASE("deterministic and shape-checked") {
    MlpConfig cfg{.input_dim = 2, .hidden = {16, 8}, .output_dim = 1, .activation = Activation::gelu,
                  .residual = true, .layer_norm = true};
    Mlp mlp("net", cfg);
    ParamStore params;
    mlp.init(params, rng);
    const Tensor x = random_tensor(7, 2, rng);
    Graph g1, g2;
    const Tensor a = g1.value(mlp.forward(g1, params, g1.input(x)));
    const Tensor b = g2.value(mlp.forward(g2, params, g2.input(x)));
    for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i] == b[i]);
    Graph g3;
    CHECK_THROWS_AS(mlp.forward(g3, params, g3.input(Tensor(2, 3))), ShapeError);
  }
  SUBCASE("residual network gradients match finite differences") {
    MlpConfig cfg{.input_dim = 3, .hidden = {6, 4}, .output_dim = 2, .activation = Activation::gelu,
                  .residual = true, .layer_norm = true};
    Mlp mlp("net", cfg);
    ParamStore params;
    mlp.init(params, rng);
    const Tensor x = random_tensor(5, 3, rng);
    auto f = [&](const ParamStore& p) {
      Graph g;
      return g.value(g.sum(g.square(mlp.forward(g, p, g.input(x))))).item();
    };
    Graph g;
    g.sum(g.square(mlp.forward(g, params, g.input(x))));
    CHECK(max_relative_error(gradient(g, params), finite_difference(f, params)) < 1e-4);
  }
}

TEST_CASE("adamw_step") {
  SUBCASE("single step from zero with unit gradient") {
    ParamStore params;
    params.add("w", Tensor::scalar(0.0));
    AdamW opt({.lr = 1e-3, .weight_decay = 1e-3});
    opt.step(params, {{"w", Tensor::scalar(1.0)}});
    CHECK(params.get("w").item() == doctest::Approx(-0.0009999999900000003).epsilon(1e-14));
  }
  SUBCASE("zero gradient and zero decay leave parameters unchanged") {
    ParamStore params;
    params.add("w", Tensor(2, 2, 0.3));
    AdamW opt({.lr = 1e-2, .weight_decay = 0.0});
    for (int i = 0; i < 3; ++i) opt.step(params, {{"w", Tensor(2, 2, 0.0)}});
    for (double v : params.get("w").data()) CHECK(v == 0.3);
  }
  SUBCASE("decay is decoupled from the gradient") {
    ParamStore params;
    params.add("w", Tensor::scalar(2.0));
    AdamW opt({.lr = 0.1, .weight_decay = 0.5});
    opt.step(params, {{"w", Tensor::scalar(0.0)}});
    // zero gradient: only w - lr*wd*w remains
    CHECK(params.get("w").item() == doctest::Approx(2.0 - 0.1 * 0.5 * 2.0).epsilon(1e-15));
  }
  SUBCASE("amsgrad max moment equals second moment for constant gradients") {
    ParamStore params;
    params.add("w", Tensor::scalar(1.0));
    AdamW opt({.amsgrad = true});
    for (int i = 0; i < 2; ++i) {
      opt.step(params, {{"w", Tensor::scalar(0.7)}});
      CHECK(opt.max_second_moment("w").item() == opt.second_moment("w").item());
    }
  }
  SUBCASE("wd=0 without amsgrad reproduces a hand-computed Adam trace") {
    ParamStore params;
    params.add("w", Tensor::scalar(0.5));
    AdamW opt({.lr = 1e-2, .weight_decay = 0.0, .amsgrad = false});
    const double grads[] = {1.0, -2.0, 0.5};
    const double expected[] = {0.4900000001, 0.4936610353472075, 0.4950279419673822};
    for (int i = 0; i < 3; ++i) {
      opt.step(params, {{"w", Tensor::scalar(grads[i])}});
      CHECK(params.get("w").item() == doctest::Approx(expected[i]).epsilon(1e-13));
    }
  }
  SUBCASE("missing gradient is an error") {
    ParamStore params;
    params.add("w", Tensor::scalar(0.5));
    AdamW opt;
    CHECK_THROWS_AS(opt.step(params, {}), std::invalid_argument);
  }
}

TEST_CASE("lr_at") {
  LrSchedule s{.total_steps = 1000};
  s.validate();
  CHECK(s.lr_at(0) == doctest::Approx(1e-8));
  CHECK(s.lr_at(100) == doctest::Approx(1e-3));
  CHECK(s.lr_at(1000) == doctest::Approx(1e-8));
  CHECK(s.lr_at(550) == doctest::Approx(1e-8 + 0.5 * (1e-3 - 1e-8)));
  CHECK_THROWS_AS(s.lr_at(1001), std::out_of_range);

  SUBCASE("continuous at the warmup boundary") {
    LrSchedule t{.total_steps = 100000};
    const std::uint64_t w = t.warmup_steps();
    CHECK(t.lr_at(w) == doctest::Approx(t.peak_lr).epsilon(1e-12));
    CHECK(t.lr_at(w - 1) == doctest::Approx(t.peak_lr).epsilon(1e-4));
    CHECK(t.lr_at(w + 1) == doctest::Approx(t.peak_lr).epsilon(1e-4));
  }
  SUBCASE("invalid schedules") {
    CHECK_THROWS(LrSchedule{.total_steps = 10, .warmup_fraction = 1.0}.validate());
    CHECK_THROWS(LrSchedule{.total_steps = 10, .start_lr = 1.0}.validate());
  }
}

TEST_CASE("early_stop_update") {
  SUBCASE("clear improvement resets the counter") {
    EarlyStopping es;
    CHECK(es.update(1.0) == StopDecision::proceed);
    CHECK(es.update(0.5) == StopDecision::proceed);
    CHECK(es.since_improvement() == 0);
    CHECK(es.improved());
  }
  SUBCASE("improvement below min delta counts as no improvement") {
    EarlyStopping es;
    es.update(1.0);
    es.update(1.0 - 0.002);
    CHECK(es.since_improvement() == 1);
    CHECK(es.best() == 1.0);
  }
  SUBCASE("stops after 322 non-improving checks") {
    EarlyStopping es;
    es.update(1.0);
    for (int i = 0; i < 321; ++i) REQUIRE(es.update(1.0) == StopDecision::proceed);
    CHECK(es.update(1.0) == StopDecision::stop);
  }
}
