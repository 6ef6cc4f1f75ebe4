#include "gklsbi/tasks.hpp"

#include <cmath>
#include <limits>
#include <map>
#include <numbers>
#include <stdexcept>

namespace gklsbi {

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();
constexpr std::size_t kSimChunk = 4096;

std::map<std::string, TaskSpec> build_tasks() {
  std::map<std::string, TaskSpec> out;
  out["gaussian_linear"] = {"gaussian_linear", 10, 10, Gaussian::isotropic(Vec(10, 0.0), kGaussianLinearVar),
                            ReferenceMode::closed_form};
  out["gaussian_linear_uniform"] = {"gaussian_linear_uniform", 10, 10, UniformBox::cube(10, -1.0, 1.0),
                                    ReferenceMode::rejection_from_gaussian};
  out["gaussian_mixture"] = {"gaussian_mixture", 2, 2, UniformBox::cube(2, -10.0, 10.0), ReferenceMode::grid2d};
  out["two_moons"] = {"two_moons", 2, 2, UniformBox::cube(2, -1.0, 1.0), ReferenceMode::grid2d};
  return out;
}

const std::map<std::string, TaskSpec>& tasks() {
  static const auto table = build_tasks();
  return table;
}

void check_theta(const TaskSpec& task, std::span<const double> theta) {
  if (theta.size() != task.theta_dim) {
    throw ShapeError(task.name + " expects theta of dimension " + std::to_string(task.theta_dim));
  }
  if (!std::isfinite(log_pdf(task.prior, theta))) throw std::out_of_range(task.name + ": theta outside prior support");
}

double log_normal(double x, double mean, double var) {
  return -0.5 * (x - mean) * (x - mean) / var - 0.5 * std::log(2.0 * std::numbers::pi * var);
}

double log_add(double a, double b) {
  const double m = std::max(a, b);
  return m + std::log(std::exp(a - m) + std::exp(b - m));
}

}  // namespace

const std::vector<std::string>& task_names() {
  static const std::vector<std::string> names = {"gaussian_linear", "gaussian_linear_uniform", "gaussian_mixture",
                                                 "two_moons"};
  return names;
}

const TaskSpec& get_task(const std::string& name) {
  const auto it = tasks().find(name);
  if (it == tasks().end()) throw std::invalid_argument("unknown task: " + name);
  return it->second;
}

Vec two_moons_from_noise(std::span<const double> theta, double angle, double radius) {
  const double px = radius * std::cos(angle) + kMoonOffset;
  const double py = radius * std::sin(angle);
  return {px - std::abs(theta[0] + theta[1]) / std::numbers::sqrt2, py + (-theta[0] + theta[1]) / std::numbers::sqrt2};
}

Vec simulate(const TaskSpec& task, std::span<const double> theta, Rng& rng) {
  check_theta(task, theta);
  Vec x(task.x_dim);
  if (task.name == "gaussian_linear" || task.name == "gaussian_linear_uniform") {
    const double sd = std::sqrt(kGaussianLinearVar);
    for (std::size_t i = 0; i < x.size(); ++i) x[i] = theta[i] + sd * standard_normal(rng);
  } else if (task.name == "gaussian_mixture") {
    const double sd = uniform_open(rng) < 0.5 ? 1.0 : 0.1;
    for (std::size_t i = 0; i < x.size(); ++i) x[i] = theta[i] + sd * standard_normal(rng);
  } else if (task.name == "two_moons") {
    const double angle = std::numbers::pi * (uniform_open(rng) - 0.5);
    const double radius = kMoonRadiusMean + kMoonRadiusStd * standard_normal(rng);
    x = two_moons_from_noise(theta, angle, radius);
  } else {
    throw std::invalid_argument("no simulator for task " + task.name);
  }
  return x;
}

Tensor simulate_rows(const TaskSpec& task, const Tensor& theta, Rng& rng) {
  Tensor out(theta.rows(), task.x_dim);
  for (std::size_t r = 0; r < theta.rows(); ++r) {
    const Vec x = simulate(task, theta.row_span(r), rng);
    std::copy(x.begin(), x.end(), out.row_span(r).begin());
  }
  return out;
}

Tensor log_likelihood(const TaskSpec& task, const Tensor& theta, std::span<const double> x) {
  if (theta.cols() != task.theta_dim || x.size() != task.x_dim) throw ShapeError(task.name + ": dimension mismatch");
  Tensor out(theta.rows(), 1);
  auto each_row = [&](auto&& f) {
    for (std::size_t r = 0; r < theta.rows(); ++r) out[r] = f(theta.row_span(r));
  };
  if (task.name == "gaussian_linear" || task.name == "gaussian_linear_uniform") {
    each_row([&](std::span<const double> t) {
      double lp = 0.0;
      for (std::size_t i = 0; i < x.size(); ++i) lp += log_normal(x[i], t[i], kGaussianLinearVar);
      return lp;
    });
  } else if (task.name == "gaussian_mixture") {
    each_row([&](std::span<const double> t) {
      double wide = std::log(0.5), narrow = std::log(0.5);
      for (std::size_t i = 0; i < x.size(); ++i) {
        wide += log_normal(x[i], t[i], 1.0);
        narrow += log_normal(x[i], t[i], 0.01);
      }
      return log_add(wide, narrow);
    });
  } else if (task.name == "two_moons") {
    // undo the shift, then the polar density N(r) / (pi r) on the right half-plane
    each_row([&](std::span<const double> t) {
      const double u = x[0] + std::abs(t[0] + t[1]) / std::numbers::sqrt2 - kMoonOffset;
      const double v = x[1] - (-t[0] + t[1]) / std::numbers::sqrt2;
      const double radius = std::hypot(u, v);
      return u > 0.0 ? log_normal(radius, kMoonRadiusMean, kMoonRadiusStd * kMoonRadiusStd) -
                           std::log(std::numbers::pi * radius)
                     : kNegInf;
    });
  } else {
    throw std::invalid_argument("no likelihood for task " + task.name);
  }
  return out;
}

Tensor log_joint(const TaskSpec& task, const Tensor& theta, std::span<const double> x) {
  Tensor out = log_likelihood(task, theta, x);
  const auto prior = log_pdf_rows(task.prior, theta);
  for (std::size_t r = 0; r < out.rows(); ++r) out[r] = std::isfinite(prior[r]) ? out[r] + prior[r] : kNegInf;
  return out;
}

JointSample simulate_joint(const TaskSpec& task, std::size_t n, std::uint64_t seed) {
  JointSample out{Tensor(0, task.theta_dim), Tensor(0, task.x_dim)};
  for (std::size_t begin = 0, chunk = 0; begin < n; begin += kSimChunk, ++chunk) {
    Rng rng = make_stream(seed, "simulate:" + task.name, chunk);
    const Tensor theta = sample_rows(task.prior, std::min(kSimChunk, n - begin), rng);
    out.x = concat_rows(out.x, simulate_rows(task, theta, rng));
    out.theta = concat_rows(out.theta, theta);
  }
  return out;
}

Observation observation(const TaskSpec& task, int index) {
  if (index < 1 || index > kObservationCount) throw std::out_of_range("observation index must be in 1..10");
  Rng rng = make_stream(static_cast<std::uint64_t>(index), "observation:" + task.name, 0);
  Observation obs;
  obs.index = index;
  obs.theta_true = sample(task.prior, rng);
  obs.x = simulate(task, obs.theta_true, rng);
  return obs;
}

Grid2d posterior_grid(const TaskSpec& task, std::span<const double> x, const ReferenceConfig& cfg) {
  const auto* box = std::get_if<UniformBox>(&task.prior);
  if (task.theta_dim != 2 || !box) throw std::invalid_argument(task.name + " has no 2D box posterior grid");
  if (cfg.grid_resolution < 4) throw std::invalid_argument("grid resolution too small");
  const Vec xo(x.begin(), x.end());
  const LogDensityFn f = [&task, xo](const Tensor& theta) { return log_joint(task, theta, xo); };
  const std::array<double, 2> lo{box->lower[0], box->lower[1]};
  const std::array<double, 2> hi{box->upper[0], box->upper[1]};
  Grid2d fine = evaluate_grid_2d(f, lo, hi, cfg.grid_resolution, cfg.supersample);
  const Grid2d coarse = evaluate_grid_2d(f, lo, hi, cfg.grid_resolution / 2, cfg.supersample);
  const double drift = std::abs(std::expm1(fine.log_normalizer - coarse.log_normalizer));
  if (drift > cfg.grid_tolerance) {
    throw std::runtime_error(task.name + ": grid resolution " + std::to_string(cfg.grid_resolution) +
                             " insufficient (normalizer moves by " + std::to_string(drift) + " at half resolution)");
  }
  return fine;
}

Tensor reference_posterior_samples(const TaskSpec& task, std::span<const double> x, std::size_t n, Rng& rng,
                                   const ReferenceConfig& cfg) {
  if (n < 1) throw std::invalid_argument("reference sample count must be >= 1");
  if (x.size() != task.x_dim) throw ShapeError(task.name + ": observation dimension mismatch");
  const std::size_t d = task.theta_dim;
  switch (task.reference) {
    case ReferenceMode::closed_form: {
      // N(0, s I) prior and N(theta, s I) likelihood: posterior N(x / 2, s / 2 I)
      Vec mean(d);
      for (std::size_t i = 0; i < d; ++i) mean[i] = 0.5 * x[i];
      return sample_rows(Gaussian::isotropic(mean, 0.5 * kGaussianLinearVar), n, rng);
    }
    case ReferenceMode::rejection_from_gaussian: {
      const auto& box = std::get<UniformBox>(task.prior);
      const Gaussian proposal = Gaussian::isotropic(Vec(x.begin(), x.end()), kGaussianLinearVar);
      std::vector<double> kept;
      std::size_t accepted = 0, tried = 0;
      while (accepted < n) {
        if (tried > cfg.max_attempts * n) throw std::runtime_error(task.name + ": truncated Gaussian rejection stalled");
        const Vec s = sample(proposal, rng);
        ++tried;
        if (box.contains(s)) {
          kept.insert(kept.end(), s.begin(), s.end());
          ++accepted;
        }
      }
      return Tensor(n, d, std::move(kept));
    }
    case ReferenceMode::grid2d:
      return sample_grid(posterior_grid(task, x, cfg), n, rng);
  }
  throw std::logic_error("unreachable reference mode");
}

}  // namespace gklsbi
