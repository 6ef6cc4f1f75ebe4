#pragma once

#include "gklsbi/rng.hpp"
#include "gklsbi/tensor.hpp"

#include <Eigen/Core>

#include <span>
#include <variant>
#include <vector>

namespace gklsbi {

using Vec = std::vector<double>;

// N(mean, chol * chol^T) with chol lower triangular and a positive diagonal.
struct Gaussian {
  Vec mean;
  Eigen::MatrixXd chol;

  Gaussian(Vec mean, Eigen::MatrixXd chol);
  static Gaussian isotropic(Vec mean, double variance);

  std::size_t dim() const noexcept { return mean.size(); }
  double log_det_cov() const;
};

// Product of U(lower_i, upper_i).
struct UniformBox {
  Vec lower;
  Vec upper;

  UniformBox(Vec lower, Vec upper);
  static UniformBox cube(std::size_t dim, double lo, double hi);

  std::size_t dim() const noexcept { return lower.size(); }
  bool contains(std::span<const double> point) const;
  double log_volume() const;
};

// weight * N(mean, scale_a * I) + (1 - weight) * N(mean, scale_b * I).
struct GaussianMixture2 {
  Vec mean;
  double scale_a = 1.0;
  double scale_b = 0.01;
  double weight = 0.5;

  GaussianMixture2(Vec mean, double scale_a, double scale_b, double weight);
  std::size_t dim() const noexcept { return mean.size(); }
};

using Distribution = std::variant<Gaussian, UniformBox, GaussianMixture2>;

std::size_t dim(const Distribution& dist);
double log_pdf(const Distribution& dist, std::span<const double> point);
Vec sample(const Distribution& dist, Rng& rng);

// Row-wise helpers over an n x d tensor.
std::vector<double> log_pdf_rows(const Distribution& dist, const Tensor& points);
Tensor sample_rows(const Distribution& dist, std::size_t n, Rng& rng);

// log N(x; mean, variance * I) without constructing a Gaussian.
double log_normal_isotropic(std::span<const double> x, std::span<const double> mean, double variance);

}  // namespace gklsbi
