#pragma once

#include "gklsbi/distributions.hpp"
#include "gklsbi/rng.hpp"
#include "gklsbi/samplers.hpp"
#include "gklsbi/tensor.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace gklsbi {

enum class ReferenceMode { closed_form, grid2d, rejection_from_gaussian };

struct TaskSpec {
  std::string name;
  std::size_t theta_dim = 0;
  std::size_t x_dim = 0;
  Distribution prior = UniformBox::cube(1, -1.0, 1.0);
  ReferenceMode reference = ReferenceMode::closed_form;
};

// gaussian_linear, gaussian_linear_uniform, gaussian_mixture, two_moons
const std::vector<std::string>& task_names();
const TaskSpec& get_task(const std::string& name);

inline constexpr double kGaussianLinearVar = 0.1;
inline constexpr double kMoonRadiusMean = 0.1;
inline constexpr double kMoonRadiusStd = 0.01;
inline constexpr double kMoonOffset = 0.25;

// One draw from p(x | theta); theta outside the prior support throws.
Vec simulate(const TaskSpec& task, std::span<const double> theta, Rng& rng);
Tensor simulate_rows(const TaskSpec& task, const Tensor& theta, Rng& rng);
// Two moons with the angle and radius fixed.
Vec two_moons_from_noise(std::span<const double> theta, double angle, double radius);

// ln p(x | theta) per row (M x 1); x is a single observation.
Tensor log_likelihood(const TaskSpec& task, const Tensor& theta, std::span<const double> x);
// ln p(x | theta) + ln p(theta) per row.
Tensor log_joint(const TaskSpec& task, const Tensor& theta, std::span<const double> x);

struct JointSample {
  Tensor theta;
  Tensor x;
};

// theta_i ~ prior, x_i ~ p(x | theta_i). Chunked over independent streams of
// `seed`, so the result does not depend on the chunking of the caller.
JointSample simulate_joint(const TaskSpec& task, std::size_t n, std::uint64_t seed);

struct Observation {
  int index = 0;
  Vec theta_true;
  Vec x;
};

inline constexpr int kObservationCount = 10;

// Observation i (1..10): theta ~ prior and x = simulate(theta) from seed i.
Observation observation(const TaskSpec& task, int index);

struct ReferenceConfig {
  std::size_t grid_resolution = 2048;
  std::size_t supersample = 4;  // per axis; the two moons density is cut sharply at its ends
  double grid_tolerance = 1e-3;
  std::size_t max_attempts = 100000;  // per requested sample, truncated Gaussian
};

// Grid of the 2D posterior; throws when halving the resolution moves the
// normalizer by more than the tolerance.
Grid2d posterior_grid(const TaskSpec& task, std::span<const double> x, const ReferenceConfig& cfg = {});

Tensor reference_posterior_samples(const TaskSpec& task, std::span<const double> x, std::size_t n, Rng& rng,
                                   const ReferenceConfig& cfg = {});

}  // namespace gklsbi
