#include "gklsbi/objectives.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>

namespace gklsbi {

double phi(double r) {
  if (std::isnan(r) || r < 0.0) throw std::invalid_argument("phi requires r >= 0");
  if (r == 0.0 || std::isinf(r)) return std::numeric_limits<double>::infinity();
  return -std::log(r) + r - 1.0;
}

void GridDensityPair::validate() const {
  if (!(cell_volume > 0.0)) throw std::invalid_argument("grid cell volume must be positive");
  if (p.size() != q.size()) throw ShapeError("p and q live on different grids");
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (!(p[i] >= 0.0) || !(q[i] >= 0.0)) throw std::invalid_argument("grid densities must be non-negative");
  }
}

double gkl_grid(const GridDensityPair& pair) {
  pair.validate();
  double total = 0.0;
  for (std::size_t i = 0; i < pair.p.size(); ++i) {
    const double p = pair.p[i];
    const double q = pair.q[i];
    if (p == 0.0) {
      total += q;
      continue;
    }
    if (q == 0.0) return std::numeric_limits<double>::infinity();
    // p * phi(q / p), written so that q == p gives exactly zero
    total += p * std::log(p / q) + (q - p);
  }
  return total * pair.cell_volume;
}

double grid_mass(const std::vector<double>& values, double cell_volume) {
  return std::accumulate(values.begin(), values.end(), 0.0) * cell_volume;
}

double kl_grid(const GridDensityPair& pair) {
  pair.validate();
  const double zp = grid_mass(pair.p, pair.cell_volume);
  const double zq = grid_mass(pair.q, pair.cell_volume);
  if (!(zp > 0.0) || !(zq > 0.0)) throw std::invalid_argument("grid mass must be positive");
  double total = 0.0;
  for (std::size_t i = 0; i < pair.p.size(); ++i) {
    if (pair.p[i] == 0.0) continue;
    if (pair.q[i] == 0.0) return std::numeric_limits<double>::infinity();
    const double a = pair.p[i] / zp;
    total += a * std::log(a / (pair.q[i] / zq));
  }
  return total * pair.cell_volume;
}

void Batch::validate() const {
  if (theta.rows() == 0) throw ShapeError("batch is empty");
  if (theta.rows() != x.rows()) {
    throw ShapeError("batch theta " + theta.shape_string() + " and x " + x.shape_string() + " differ in M");
  }
  for (const auto& xp : x_prime) {
    if (!xp.same_shape(x)) throw ShapeError("contrastive x' " + xp.shape_string() + " must match x " + x.shape_string());
  }
}

std::vector<std::size_t> derangement(std::size_t m, Rng& rng) {
  if (m < 2) throw std::invalid_argument("a derangement needs at least two elements");
  std::vector<std::size_t> perm(m);
  // rejection from uniform permutations; accepts with probability ~1/e
  for (;;) {
    std::iota(perm.begin(), perm.end(), std::size_t{0});
    for (std::size_t i = m - 1; i > 0; --i) {
      std::uniform_int_distribution<std::size_t> pick(0, i);
      std::swap(perm[i], perm[pick(rng)]);
    }
    bool fixed = false;
    for (std::size_t i = 0; i < m && !fixed; ++i) fixed = perm[i] == i;
    if (!fixed) return perm;
  }
}

void add_permuted_contrast(Batch& batch, std::size_t count, Rng& rng) {
  if (count < 1) throw std::invalid_argument("need at least one contrastive set");
  batch.x_prime.clear();
  for (std::size_t k = 0; k < count; ++k) batch.x_prime.push_back(batch.x.gather_rows(derangement(batch.size(), rng)));
}

void add_simulated_contrast(Batch& batch, std::size_t count, const MarginalSampler& draw_x, Rng& rng) {
  if (count < 1) throw std::invalid_argument("need at least one contrastive set");
  batch.x_prime.clear();
  for (std::size_t k = 0; k < count; ++k) {
    Tensor xs = draw_x(batch.size(), rng);
    if (xs.rows() != batch.size() || xs.cols() != batch.x.cols()) throw ShapeError("simulated contrast has wrong shape");
    batch.x_prime.push_back(std::move(xs));
  }
}

Var contrastive_objective(Graph& graph, Var rho_joint, const std::vector<Var>& rho_contrast,
                          LossDiagnostics* diag) {
  if (rho_contrast.empty()) throw std::invalid_argument("contrastive term needs at least one set");
  Var total = graph.mean(graph.neg(rho_joint));
  std::optional<Var> marginal;
  for (Var r : rho_contrast) {
    if (diag) {
      for (double v : graph.value(r).data()) diag->clamped += v > kRhoClamp ? 1 : 0;
    }
    Var term = graph.mean(graph.exp(graph.min_const(r, kRhoClamp)));
    marginal = marginal ? graph.add(*marginal, term) : term;
  }
  if (rho_contrast.size() > 1) marginal = graph.scale(*marginal, 1.0 / static_cast<double>(rho_contrast.size()));
  return graph.add(total, *marginal);
}

namespace {

void check_finite(const Graph& graph, Var v, const char* what) {
  if (!graph.value(v).all_finite()) throw NumericalError(std::string("non-finite ") + what);
}

}  // namespace

Var loss_flow(Graph& graph, const Batch& batch, const Surrogate& q) {
  batch.validate();
  if (!q.flow()) throw std::invalid_argument("loss_flow needs a surrogate with a flow");
  Var lp = q.flow()->log_prob(graph, q.params(), graph.input(batch.theta), graph.input(batch.x));
  check_finite(graph, lp, "flow log-density in loss");
  return graph.mean(graph.neg(lp));
}

Var loss_ratio(Graph& graph, const Batch& batch, const Surrogate& q, LossDiagnostics* diag) {
  batch.validate();
  if (q.kind() != SurrogateKind::ratio) throw std::invalid_argument("loss_ratio needs a ratio surrogate");
  if (batch.x_prime.empty()) throw std::invalid_argument("loss_ratio needs contrastive x'");
  Var theta = graph.input(batch.theta);
  Var joint = q.ratio()->forward(graph, q.params(), theta, graph.input(batch.x));
  std::vector<Var> contrast;
  for (const auto& xp : batch.x_prime) contrast.push_back(q.ratio()->forward(graph, q.params(), theta, graph.input(xp)));
  Var loss = contrastive_objective(graph, joint, contrast, diag);
  check_finite(graph, loss, "ratio loss");
  return loss;
}

Var loss_hybrid(Graph& graph, const Batch& batch, const Surrogate& q, Rng& rng, LossDiagnostics* diag) {
  batch.validate();
  if (q.kind() != SurrogateKind::hybrid) throw std::invalid_argument("loss_hybrid needs a hybrid surrogate");
  Var flow_term = loss_flow(graph, batch, q);
  Var x = graph.input(batch.x);
  Var theta = graph.input(batch.theta);
  check_finite(graph, flow_term, "hybrid flow term");
  Var tilde = q.flow()->sample(graph, q.params(), x, rng, /*stop_gradient=*/true);
  check_finite(graph, tilde, "base-flow sample in the hybrid loss");
  Var joint = q.ratio()->forward(graph, q.params(), theta, x);
  Var contrast = q.ratio()->forward(graph, q.params(), tilde, x);
  Var loss = graph.add(flow_term, contrastive_objective(graph, joint, {contrast}, diag));
  check_finite(graph, loss, "hybrid loss");
  return loss;
}

Var surrogate_loss(Graph& graph, const Batch& batch, const Surrogate& q, Rng& rng, LossDiagnostics* diag) {
  switch (q.kind()) {
    case SurrogateKind::flow: return loss_flow(graph, batch, q);
    case SurrogateKind::ratio: return loss_ratio(graph, batch, q, diag);
    case SurrogateKind::hybrid: return loss_hybrid(graph, batch, q, rng, diag);
  }
  throw std::logic_error("unreachable surrogate kind");
}

}  // namespace gklsbi
