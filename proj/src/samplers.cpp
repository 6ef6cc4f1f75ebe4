#include "gklsbi/samplers.hpp"

#include "gklsbi/log.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

namespace gklsbi {

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

Tensor log_ratio(const LogDensityFn& target, const Proposal& proposal, const Tensor& theta) {
  Tensor t = target(theta);
  const Tensor p = proposal.log_pdf(theta);
  if (t.rows() != theta.rows() || p.rows() != theta.rows()) throw ShapeError("log density returned wrong row count");
  for (std::size_t i = 0; i < t.rows(); ++i) {
    t[i] = std::isfinite(p[i]) && !std::isnan(t[i]) ? t[i] - p[i] : kNegInf;
  }
  return t;
}

double finite_max(const Tensor& t) {
  double m = kNegInf;
  for (double v : t.data()) {
    if (std::isfinite(v)) m = std::max(m, v);
  }
  return m;
}

std::vector<double> prior_scale(const Distribution& prior) {
  const std::size_t d = dim(prior);
  std::vector<double> scale(d, 1.0);
  if (const auto* g = std::get_if<Gaussian>(&prior)) {
    const Eigen::MatrixXd cov = g->chol * g->chol.transpose();
    for (std::size_t i = 0; i < d; ++i) scale[i] = std::sqrt(cov(i, i));
  } else if (const auto* b = std::get_if<UniformBox>(&prior)) {
    for (std::size_t i = 0; i < d; ++i) scale[i] = (b->upper[i] - b->lower[i]) / std::sqrt(12.0);
  } else if (const auto* m = std::get_if<GaussianMixture2>(&prior)) {
    const double var = m->weight * m->scale_a + (1.0 - m->weight) * m->scale_b;
    for (std::size_t i = 0; i < d; ++i) scale[i] = std::sqrt(var);
  }
  return scale;
}

}  // namespace

void RejectionConfig::validate() const {
  if (bound_samples < 100) throw std::invalid_argument("rejection bound needs at least 100 samples");
  if (!(log_margin >= 0.0)) throw std::invalid_argument("rejection log margin must be >= 0");
  if (max_attempts < 1 || batch < 1) throw std::invalid_argument("rejection attempts and batch must be positive");
}

RejectionResult rejection_sample(const LogDensityFn& target, const Proposal& proposal, std::size_t n,
                                 const RejectionConfig& cfg, Rng& rng) {
  cfg.validate();
  RejectionResult out;
  auto estimate_bound = [&] {
    const double m = finite_max(log_ratio(target, proposal, proposal.sample(cfg.bound_samples, rng)));
    if (!std::isfinite(m)) throw RejectionAbort("target is -inf on every proposal draw");
    return m + cfg.log_margin;
  };
  out.log_bound = estimate_bound();
  const std::size_t limit = cfg.max_attempts * std::max<std::size_t>(n, 1);
  std::uniform_real_distribution<double> unif(0.0, 1.0);

  std::vector<double> kept;
  std::size_t accepted = 0;
  std::size_t d = 0;
  while (accepted < n) {
    if (out.proposals >= limit) {
      throw RejectionAbort("rejection sampling accepted " + std::to_string(accepted) + " of " + std::to_string(n) +
                           " after " + std::to_string(out.proposals) + " proposals (log bound " +
                           std::to_string(out.log_bound) + ")");
    }
    const Tensor theta = proposal.sample(cfg.batch, rng);
    d = theta.cols();
    const Tensor lr = log_ratio(target, proposal, theta);

    const double batch_max = finite_max(lr);
    if (batch_max > out.log_bound) {
      ++out.bound_violations;
      if (!out.bound_reestimated) {
        out.warnings.push_back("bound violation: log ratio " + std::to_string(batch_max) + " above bound " +
                               std::to_string(out.log_bound) + "; bound re-estimated");
        log_warning(out.warnings.back());
        out.bound_reestimated = true;
        out.log_bound = std::max(estimate_bound(), batch_max + cfg.log_margin);
        kept.clear();
        accepted = 0;
        out.proposals += theta.rows();
        continue;
      }
    }
    for (std::size_t i = 0; i < theta.rows() && accepted < n; ++i) {
      ++out.proposals;
      if (std::log(unif(rng)) < lr[i] - out.log_bound) {
        auto row = theta.row_span(i);
        kept.insert(kept.end(), row.begin(), row.end());
        ++accepted;
      }
    }
  }
  if (out.bound_violations > 1) {
    out.warnings.push_back(std::to_string(out.bound_violations - 1) + " batches exceeded the re-estimated bound");
    log_warning(out.warnings.back());
  }
  out.samples = Tensor(n, d, std::move(kept));
  out.acceptance_rate = static_cast<double>(n) / static_cast<double>(out.proposals);
  return out;
}

void MhConfig::validate() const {
  if (chains < 1) throw std::invalid_argument("MH needs at least one chain");
  if (burn_in >= steps) throw std::invalid_argument("MH burn-in must be below the step count");
  if (thin < 1) throw std::invalid_argument("MH thinning must be >= 1");
  if (step_size < 0.0) throw std::invalid_argument("MH step size must be >= 0");
  if (!(accept_low < accept_high)) throw std::invalid_argument("MH acceptance band is empty");
}

std::vector<double> split_rhat(const std::vector<Tensor>& chains) {
  if (chains.empty()) return {};
  const std::size_t len = chains.front().rows() / 2;
  const std::size_t d = chains.front().cols();
  std::vector<double> out(d, std::numeric_limits<double>::quiet_NaN());
  if (len < 2) return out;
  for (std::size_t k = 0; k < d; ++k) {
    std::vector<double> means, vars;
    for (const auto& c : chains) {
      for (std::size_t half = 0; half < 2; ++half) {
        double s = 0.0;
        for (std::size_t i = 0; i < len; ++i) s += c(half * len + i, k);
        const double mean = s / len;
        double ss = 0.0;
        for (std::size_t i = 0; i < len; ++i) ss += std::pow(c(half * len + i, k) - mean, 2);
        means.push_back(mean);
        vars.push_back(ss / (len - 1));
      }
    }
    const double m = static_cast<double>(means.size());
    const double w = std::accumulate(vars.begin(), vars.end(), 0.0) / m;
    const double grand = std::accumulate(means.begin(), means.end(), 0.0) / m;
    double b = 0.0;
    for (double v : means) b += (v - grand) * (v - grand);
    b *= static_cast<double>(len) / (m - 1.0);
    const double var_plus = (len - 1.0) / len * w + b / len;
    out[k] = w > 0.0 ? std::sqrt(var_plus / w) : 1.0;
  }
  return out;
}

MhResult mh_sample(const LogDensityFn& target, const Distribution& prior, const MhConfig& cfg, Rng& rng) {
  cfg.validate();
  const std::size_t c = cfg.chains;
  const std::size_t d = dim(prior);
  const auto scale = prior_scale(prior);

  // chain starts: prior draws with finite target
  Tensor state(c, d);
  Tensor logp(c, 1, kNegInf);
  for (std::size_t attempt = 0; attempt < cfg.init_attempts; ++attempt) {
    const Tensor draws = sample_rows(prior, c, rng);
    const Tensor lp = target(draws);
    for (std::size_t i = 0; i < c; ++i) {
      if (!std::isfinite(logp[i]) && std::isfinite(lp[i])) {
        for (std::size_t k = 0; k < d; ++k) state(i, k) = draws(i, k);
        logp[i] = lp[i];
      }
    }
    if (logp.all_finite()) break;
  }
  if (!logp.all_finite()) throw std::runtime_error("MH initialization: target is -inf at every prior draw");

  std::uniform_real_distribution<double> unif(0.0, 1.0);
  std::vector<std::size_t> accepts(c, 0);
  auto step = [&](double size) {
    Tensor prop = state;
    for (std::size_t i = 0; i < c; ++i) {
      for (std::size_t k = 0; k < d; ++k) prop(i, k) += size * scale[k] * standard_normal(rng);
    }
    const Tensor lp = target(prop);
    for (std::size_t i = 0; i < c; ++i) {
      if (!std::isnan(lp[i]) && std::log(unif(rng)) < lp[i] - logp[i]) {
        for (std::size_t k = 0; k < d; ++k) state(i, k) = prop(i, k);
        logp[i] = lp[i];
        ++accepts[i];
      }
    }
  };
  auto mean_rate = [&](std::size_t steps) {
    return static_cast<double>(std::accumulate(accepts.begin(), accepts.end(), std::size_t{0})) /
           static_cast<double>(steps * c);
  };

  MhResult out;
  double size = cfg.step_size;
  if (size == 0.0) {
    size = 2.38 / std::sqrt(static_cast<double>(d));
    for (std::size_t round = 0; round < cfg.tune_rounds; ++round) {
      std::fill(accepts.begin(), accepts.end(), 0);
      for (std::size_t s = 0; s < cfg.tune_steps; ++s) step(size);
      const double rate = mean_rate(cfg.tune_steps);
      if (rate >= cfg.accept_low && rate <= cfg.accept_high) break;
      // rate 0 -> shrink hard; rate 1 -> grow
      size *= rate < cfg.accept_low ? std::max(0.1, rate / 0.3) : std::min(3.0, rate / 0.3);
    }
  }
  out.step_size = size;

  std::fill(accepts.begin(), accepts.end(), 0);
  const std::size_t kept_per_chain = (cfg.steps - cfg.burn_in + cfg.thin - 1) / cfg.thin;
  std::vector<Tensor> chains(c, Tensor(kept_per_chain, d));
  std::size_t slot = 0;
  for (std::size_t s = 0; s < cfg.steps; ++s) {
    step(size);
    if (s >= cfg.burn_in && (s - cfg.burn_in) % cfg.thin == 0) {
      for (std::size_t i = 0; i < c; ++i) {
        for (std::size_t k = 0; k < d; ++k) chains[i](slot, k) = state(i, k);
      }
      ++slot;
    }
  }
  for (std::size_t i = 0; i < c; ++i) out.acceptance.push_back(static_cast<double>(accepts[i]) / cfg.steps);
  out.rhat = split_rhat(chains);
  for (double r : out.rhat) out.rhat_warning = out.rhat_warning || r > 1.1;
  if (out.rhat_warning) {
    out.warnings.push_back("split R-hat above 1.1");
    log_warning(out.warnings.back());
  }
  for (const auto& ch : chains) out.samples = concat_rows(out.samples, ch);
  return out;
}

std::array<double, 2> Grid2d::centre(std::size_t cell) const {
  const std::size_t i = cell / resolution;
  const std::size_t j = cell % resolution;
  return {lower[0] + (static_cast<double>(i) + 0.5) * cell_width(0),
          lower[1] + (static_cast<double>(j) + 0.5) * cell_width(1)};
}

Grid2d evaluate_grid_2d(const LogDensityFn& log_unnorm, std::array<double, 2> lower, std::array<double, 2> upper,
                        std::size_t resolution, std::size_t supersample) {
  if (resolution < 1 || supersample < 1) throw std::invalid_argument("grid resolution must be positive");
  if (!(upper[0] > lower[0]) || !(upper[1] > lower[1])) throw std::invalid_argument("grid bounds are empty");
  Grid2d g;
  g.lower = lower;
  g.upper = upper;
  g.resolution = resolution;
  const std::size_t cells = resolution * resolution;
  const std::size_t sub = supersample * supersample;
  std::vector<double> logs(cells);
  const std::size_t chunk = std::max<std::size_t>(1, 65536 / sub);
  for (std::size_t begin = 0; begin < cells; begin += chunk) {
    const std::size_t count = std::min(chunk, cells - begin);
    Tensor pts(count * sub, 2);
    for (std::size_t r = 0; r < count; ++r) {
      const auto c = g.centre(begin + r);
      for (std::size_t a = 0; a < supersample; ++a) {
        for (std::size_t b = 0; b < supersample; ++b) {
          const std::size_t row = r * sub + a * supersample + b;
          pts(row, 0) = c[0] + ((a + 0.5) / supersample - 0.5) * g.cell_width(0);
          pts(row, 1) = c[1] + ((b + 0.5) / supersample - 0.5) * g.cell_width(1);
        }
      }
    }
    const Tensor lp = log_unnorm(pts);
    if (lp.rows() != count * sub) throw ShapeError("grid log density returned wrong row count");
    for (std::size_t r = 0; r < count; ++r) {
      if (sub == 1) {
        logs[begin + r] = lp[r];
        continue;
      }
      double m = kNegInf;
      for (std::size_t k = 0; k < sub; ++k) m = std::max(m, lp[r * sub + k]);
      if (!std::isfinite(m)) {
        logs[begin + r] = m;
        continue;
      }
      double acc = 0.0;
      for (std::size_t k = 0; k < sub; ++k) acc += std::exp(lp[r * sub + k] - m);
      logs[begin + r] = m + std::log(acc / static_cast<double>(sub));
    }
  }
  double peak = kNegInf;
  for (double v : logs) {
    if (!std::isnan(v)) peak = std::max(peak, v);
  }
  if (!std::isfinite(peak)) throw std::runtime_error("all grid mass is zero");
  g.prob.resize(cells);
  double total = 0.0;
  for (std::size_t i = 0; i < cells; ++i) {
    g.prob[i] = std::isnan(logs[i]) ? 0.0 : std::exp(logs[i] - peak);
    total += g.prob[i];
  }
  for (double& p : g.prob) p /= total;
  g.log_normalizer = peak + std::log(total * g.cell_area());
  return g;
}

Tensor sample_grid(const Grid2d& grid, std::size_t n, Rng& rng) {
  std::vector<double> cdf(grid.prob.size());
  std::partial_sum(grid.prob.begin(), grid.prob.end(), cdf.begin());
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  Tensor out(n, 2);
  for (std::size_t s = 0; s < n; ++s) {
    const double u = unif(rng) * cdf.back();
    std::size_t cell = static_cast<std::size_t>(std::upper_bound(cdf.begin(), cdf.end(), u) - cdf.begin());
    cell = std::min(cell, cdf.size() - 1);
    const auto c = grid.centre(cell);
    out(s, 0) = c[0] + (unif(rng) - 0.5) * grid.cell_width(0);
    out(s, 1) = c[1] + (unif(rng) - 0.5) * grid.cell_width(1);
  }
  return out;
}

Tensor grid_sample_2d(const LogDensityFn& log_unnorm, std::array<double, 2> lower, std::array<double, 2> upper,
                      std::size_t resolution, std::size_t n, Rng& rng) {
  return sample_grid(evaluate_grid_2d(log_unnorm, lower, upper, resolution), n, rng);
}

}  // namespace gklsbi
