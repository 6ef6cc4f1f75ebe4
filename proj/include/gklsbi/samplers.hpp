#pragma once

#include "gklsbi/distributions.hpp"
#include "gklsbi/rng.hpp"
#include "gklsbi/tensor.hpp"

#include <array>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

namespace gklsbi {

// Batched log density: M x d points in, M x 1 column out. -inf is allowed.
using LogDensityFn = std::function<Tensor(const Tensor&)>;

struct Proposal {
  std::function<Tensor(std::size_t n, Rng& rng)> sample;
  LogDensityFn log_pdf;
};

struct RejectionConfig {
  std::size_t bound_samples = 10000;  // K
  double log_margin = 1.0;            // delta
  std::size_t max_attempts = 1000;    // proposals allowed per requested sample
  std::size_t batch = 4096;

  void validate() const;
};

struct RejectionResult {
  Tensor samples;
  double acceptance_rate = 0.0;
  double log_bound = 0.0;
  std::size_t proposals = 0;
  std::size_t bound_violations = 0;
  bool bound_reestimated = false;
  std::vector<std::string> warnings;
};

class RejectionAbort : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

RejectionResult rejection_sample(const LogDensityFn& target, const Proposal& proposal, std::size_t n,
                                 const RejectionConfig& cfg, Rng& rng);

struct MhConfig {
  std::size_t chains = 16;
  std::size_t steps = 10000;
  std::size_t burn_in = 5000;
  std::size_t thin = 1;
  double step_size = 0.0;  // multiplies the prior scale per dimension; 0 means tune
  double accept_low = 0.2;
  double accept_high = 0.4;
  std::size_t tune_rounds = 40;
  std::size_t tune_steps = 200;
  std::size_t init_attempts = 1000;

  void validate() const;
};

struct MhResult {
  Tensor samples;  // pooled, ordered by chain
  std::vector<double> acceptance;
  std::vector<double> rhat;
  bool rhat_warning = false;
  double step_size = 0.0;
  std::vector<std::string> warnings;
};

MhResult mh_sample(const LogDensityFn& target, const Distribution& prior, const MhConfig& cfg, Rng& rng);

// Split-R-hat per dimension from equal-length chains (each n x d).
std::vector<double> split_rhat(const std::vector<Tensor>& chains);

// Log density tabulated on the cell centres of a 2D grid.
struct Grid2d {
  std::array<double, 2> lower{};
  std::array<double, 2> upper{};
  std::size_t resolution = 0;
  std::vector<double> prob;  // normalized cell probabilities, row index i over dim 0
  double log_normalizer = 0.0;  // log of sum(exp(log q)) * cell area

  double cell_width(std::size_t axis) const { return (upper[axis] - lower[axis]) / static_cast<double>(resolution); }
  double cell_area() const { return cell_width(0) * cell_width(1); }
  std::array<double, 2> centre(std::size_t cell) const;
};

// With supersample s > 1 each cell holds the mean density over an s x s
// sub-grid, which sharpens cells cut by a density discontinuity.
Grid2d evaluate_grid_2d(const LogDensityFn& log_unnorm, std::array<double, 2> lower, std::array<double, 2> upper,
                        std::size_t resolution, std::size_t supersample = 1);
Tensor sample_grid(const Grid2d& grid, std::size_t n, Rng& rng);
Tensor grid_sample_2d(const LogDensityFn& log_unnorm, std::array<double, 2> lower, std::array<double, 2> upper,
                      std::size_t resolution, std::size_t n, Rng& rng);

}  // namespace gklsbi
