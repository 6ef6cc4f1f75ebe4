#include "gklsbi/optim.hpp"

#include <cmath>
#include <numbers>
#include <stdexcept>

namespace gklsbi {

void AdamW::step(ParamStore& params, const GradientMap& grads, double lr) {
  ++step_;
  const auto& c = config_;
  const double t = static_cast<double>(step_);
  const double bias1 = 1.0 - std::pow(c.beta1, t);
  const double bias2 = 1.0 - std::pow(c.beta2, t);

  for (const auto& name : params.names()) {
    if (!trainable_prefix_.empty() && name.rfind(trainable_prefix_, 0) != 0) continue;
    auto git = grads.find(name);
    if (git == grads.end()) throw std::invalid_argument("missing gradient for parameter " + name);
    Tensor& w = params.mutable_get(name);
    const Tensor& g = git->second;
    if (!g.same_shape(w)) throw ShapeError("gradient shape mismatch for " + name);

    auto [it, inserted] = state_.try_emplace(name);
    Slot& s = it->second;
    if (inserted) {
      s.m = Tensor(w.rows(), w.cols());
      s.v = Tensor(w.rows(), w.cols());
      s.v_max = Tensor(w.rows(), w.cols());
    }
    for (std::size_t i = 0; i < w.size(); ++i) {
      w[i] -= lr * c.weight_decay * w[i];
      s.m[i] = c.beta1 * s.m[i] + (1.0 - c.beta1) * g[i];
      s.v[i] = c.beta2 * s.v[i] + (1.0 - c.beta2) * g[i] * g[i];
      double v_hat = s.v[i];
      if (c.amsgrad) {
        s.v_max[i] = std::max(s.v_max[i], s.v[i]);
        v_hat = s.v_max[i];
      }
      const double denom = std::sqrt(v_hat / bias2) + c.eps;
      w[i] -= lr * (s.m[i] / bias1) / denom;
    }
  }
}

void LrSchedule::validate() const {
  if (total_steps == 0) throw std::invalid_argument("schedule needs at least one step");
  if (!(warmup_fraction > 0.0 && warmup_fraction < 1.0)) {
    throw std::invalid_argument("warmup fraction must lie in (0, 1)");
  }
  if (start_lr > peak_lr || final_lr > peak_lr) {
    throw std::invalid_argument("start and final learning rates must not exceed the peak");
  }
}

std::uint64_t LrSchedule::warmup_steps() const {
  return static_cast<std::uint64_t>(std::llround(warmup_fraction * static_cast<double>(total_steps)));
}

double LrSchedule::lr_at(std::uint64_t step) const {
  if (step > total_steps) {
    throw std::out_of_range("step " + std::to_string(step) + " beyond schedule length " +
                            std::to_string(total_steps));
  }
  const std::uint64_t warm = warmup_steps();
  if (step <= warm) {
    if (warm == 0) return peak_lr;
    return start_lr + (peak_lr - start_lr) * static_cast<double>(step) / static_cast<double>(warm);
  }
  const double progress =
      static_cast<double>(step - warm) / static_cast<double>(total_steps - warm);
  return final_lr + 0.5 * (peak_lr - final_lr) * (1.0 + std::cos(std::numbers::pi * progress));
}

StopDecision EarlyStopping::update(double val_loss) {
  if (!has_best_ || val_loss < best_ - min_delta_) {
    best_ = val_loss;
    has_best_ = true;
    improved_ = true;
    since_improvement_ = 0;
    return StopDecision::proceed;
  }
  improved_ = false;
  ++since_improvement_;
  return since_improvement_ >= patience_ ? StopDecision::stop : StopDecision::proceed;
}

}  // namespace gklsbi
