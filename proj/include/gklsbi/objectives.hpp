#pragma once

#include "gklsbi/graph.hpp"
#include "gklsbi/rng.hpp"
#include "gklsbi/surrogates.hpp"
#include "gklsbi/tensor.hpp"

#include <cstddef>
#include <functional>
#include <vector>

namespace gklsbi {

// phi(r) = -ln r + r - 1, with phi(0) = phi(inf) = inf.
double phi(double r);

// Unnormalized densities tabulated on a shared grid.
struct GridDensityPair {
  std::vector<double> p;
  std::vector<double> q;
  double cell_volume = 0.0;

  void validate() const;
};

// Riemann sum of phi(q / p) * p * cell. Cells with p = 0 contribute q - p.
double gkl_grid(const GridDensityPair& pair);
// Ordinary KL between the grid-normalized p and q.
double kl_grid(const GridDensityPair& pair);
double grid_mass(const std::vector<double>& values, double cell_volume);

struct Batch {
  Tensor theta;                 // M x d_theta
  Tensor x;                     // M x d_x
  std::vector<Tensor> x_prime;  // contrastive sets, each M x d_x

  std::size_t size() const noexcept { return theta.rows(); }
  void validate() const;
};

// Uniform random permutation of 0..m-1 without fixed points; m >= 2.
std::vector<std::size_t> derangement(std::size_t m, Rng& rng);

// Fills batch.x_prime with `count` derangement-permuted copies of batch.x.
void add_permuted_contrast(Batch& batch, std::size_t count, Rng& rng);

// Fills batch.x_prime with `count` sets of fresh draws from the x marginal,
// independent of batch.theta. `draw_x(m, rng)` returns an m x d_x tensor.
using MarginalSampler = std::function<Tensor(std::size_t, Rng&)>;
void add_simulated_contrast(Batch& batch, std::size_t count, const MarginalSampler& draw_x, Rng& rng);

inline constexpr double kRhoClamp = 30.0;

struct LossDiagnostics {
  std::size_t clamped = 0;  // contrastive rho values cut at kRhoClamp
};

// mean(-rho_joint) + mean over sets of mean(exp(min(rho_contrast, clamp))).
// Shared by the ratio and hybrid losses; rho columns are M x 1.
Var contrastive_objective(Graph& graph, Var rho_joint, const std::vector<Var>& rho_contrast,
                          LossDiagnostics* diag);

// (1/M) sum -ln b_v(theta_m | x_m). Uses the flow of a Flow or Hybrid surrogate.
Var loss_flow(Graph& graph, const Batch& batch, const Surrogate& q);
// (1/M) sum [-rho(theta_m, x_m) + exp(rho(theta_m, x'_m))]
Var loss_ratio(Graph& graph, const Batch& batch, const Surrogate& q, LossDiagnostics* diag = nullptr);
// (1/M) sum [-ln b(theta_m|x_m) - rho(theta_m, x_m) + exp(rho(theta~_m, x_m))],
// theta~_m ~ b(.|x_m) drawn without a path back to the flow weights.
Var loss_hybrid(Graph& graph, const Batch& batch, const Surrogate& q, Rng& rng,
                LossDiagnostics* diag = nullptr);

// Dispatch on the surrogate kind.
Var surrogate_loss(Graph& graph, const Batch& batch, const Surrogate& q, Rng& rng,
                   LossDiagnostics* diag = nullptr);

}  // namespace gklsbi
