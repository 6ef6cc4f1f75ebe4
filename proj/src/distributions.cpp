#include "gklsbi/distributions.hpp"

#include <cmath>
#include <limits>
#include <numbers>
#include <stdexcept>

namespace gklsbi {

namespace {

constexpr double kLog2Pi = 1.8378770664093453;

void check_dim(std::size_t expected, std::size_t got) {
  if (expected != got) {
    throw ShapeError("point dimension " + std::to_string(got) + " does not match distribution dimension " +
                     std::to_string(expected));
  }
}

double log_sum_exp2(double a, double b) {
  const double m = std::max(a, b);
  if (m == -std::numeric_limits<double>::infinity()) return m;
  return m + std::log(std::exp(a - m) + std::exp(b - m));
}

}  // namespace

Gaussian::Gaussian(Vec mean_, Eigen::MatrixXd chol_) : mean(std::move(mean_)), chol(std::move(chol_)) {
  const auto d = static_cast<Eigen::Index>(mean.size());
  if (chol.rows() != d || chol.cols() != d) throw ShapeError("Cholesky factor shape mismatch");
  for (Eigen::Index i = 0; i < d; ++i) {
    if (!(chol(i, i) > 0.0)) throw std::invalid_argument("Cholesky diagonal must be positive");
    for (Eigen::Index j = i + 1; j < d; ++j) {
      if (chol(i, j) != 0.0) throw std::invalid_argument("Cholesky factor must be lower triangular");
    }
  }
}

Gaussian Gaussian::isotropic(Vec mean, double variance) {
  const auto d = static_cast<Eigen::Index>(mean.size());
  Eigen::MatrixXd chol = Eigen::MatrixXd::Identity(d, d) * std::sqrt(variance);
  return Gaussian(std::move(mean), std::move(chol));
}

double Gaussian::log_det_cov() const { return 2.0 * chol.diagonal().array().log().sum(); }

UniformBox::UniformBox(Vec lower_, Vec upper_) : lower(std::move(lower_)), upper(std::move(upper_)) {
  if (lower.size() != upper.size()) throw ShapeError("box bounds differ in dimension");
  for (std::size_t i = 0; i < lower.size(); ++i) {
    if (!(lower[i] < upper[i])) throw std::invalid_argument("box requires lower < upper");
  }
}

UniformBox UniformBox::cube(std::size_t dim, double lo, double hi) {
  return UniformBox(Vec(dim, lo), Vec(dim, hi));
}

bool UniformBox::contains(std::span<const double> point) const {
  for (std::size_t i = 0; i < lower.size(); ++i) {
    if (point[i] < lower[i] || point[i] > upper[i]) return false;
  }
  return true;
}

double UniformBox::log_volume() const {
  double s = 0.0;
  for (std::size_t i = 0; i < lower.size(); ++i) s += std::log(upper[i] - lower[i]);
  return s;
}

GaussianMixture2::GaussianMixture2(Vec mean_, double a, double b, double w)
    : mean(std::move(mean_)), scale_a(a), scale_b(b), weight(w) {
  if (!(w > 0.0 && w < 1.0)) throw std::invalid_argument("mixture weight must lie in (0, 1)");
  if (!(a > 0.0 && b > 0.0)) throw std::invalid_argument("mixture scales must be positive");
}

double log_normal_isotropic(std::span<const double> x, std::span<const double> mean, double variance) {
  double sq = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) sq += (x[i] - mean[i]) * (x[i] - mean[i]);
  const double d = static_cast<double>(x.size());
  return -0.5 * sq / variance - 0.5 * d * (kLog2Pi + std::log(variance));
}

std::size_t dim(const Distribution& dist) {
  return std::visit([](const auto& d) { return d.dim(); }, dist);
}

double log_pdf(const Distribution& dist, std::span<const double> point) {
  check_dim(dim(dist), point.size());
  struct Visitor {
    std::span<const double> x;
    double operator()(const Gaussian& g) const {
      const auto d = static_cast<Eigen::Index>(g.dim());
      Eigen::VectorXd diff(d);
      for (Eigen::Index i = 0; i < d; ++i) diff[i] = x[i] - g.mean[i];
      const Eigen::VectorXd z = g.chol.triangularView<Eigen::Lower>().solve(diff);
      return -0.5 * z.squaredNorm() - 0.5 * g.log_det_cov() - 0.5 * static_cast<double>(d) * kLog2Pi;
    }
    double operator()(const UniformBox& b) const {
      if (!b.contains(x)) return -std::numeric_limits<double>::infinity();
      return -b.log_volume();
    }
    double operator()(const GaussianMixture2& m) const {
      return log_sum_exp2(std::log(m.weight) + log_normal_isotropic(x, m.mean, m.scale_a),
                          std::log1p(-m.weight) + log_normal_isotropic(x, m.mean, m.scale_b));
    }
  };
  return std::visit(Visitor{point}, dist);
}

Vec sample(const Distribution& dist, Rng& rng) {
  struct Visitor {
    Rng& rng;
    Vec operator()(const Gaussian& g) const {
      const auto d = static_cast<Eigen::Index>(g.dim());
      Eigen::VectorXd eps(d);
      for (Eigen::Index i = 0; i < d; ++i) eps[i] = standard_normal(rng);
      const Eigen::VectorXd y = g.chol.triangularView<Eigen::Lower>() * eps;
      Vec out(g.mean);
      for (Eigen::Index i = 0; i < d; ++i) out[i] += y[i];
      return out;
    }
    Vec operator()(const UniformBox& b) const {
      Vec out(b.dim());
      for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = std::uniform_real_distribution<double>(b.lower[i], b.upper[i])(rng);
      }
      return out;
    }
    Vec operator()(const GaussianMixture2& m) const {
      const bool first = std::uniform_real_distribution<double>(0.0, 1.0)(rng) < m.weight;
      const double sd = std::sqrt(first ? m.scale_a : m.scale_b);
      Vec out(m.mean);
      for (double& v : out) v += sd * standard_normal(rng);
      return out;
    }
  };
  return std::visit(Visitor{rng}, dist);
}

std::vector<double> log_pdf_rows(const Distribution& dist, const Tensor& points) {
  std::vector<double> out(points.rows());
  for (std::size_t r = 0; r < points.rows(); ++r) out[r] = log_pdf(dist, points.row_span(r));
  return out;
}

Tensor sample_rows(const Distribution& dist, std::size_t n, Rng& rng) {
  Tensor out(n, dim(dist));
  for (std::size_t r = 0; r < n; ++r) {
    const Vec v = sample(dist, rng);
    std::copy(v.begin(), v.end(), out.row_span(r).begin());
  }
  return out;
}

}  // namespace gklsbi
