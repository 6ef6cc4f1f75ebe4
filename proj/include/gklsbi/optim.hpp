#pragma once

#include "gklsbi/params.hpp"

#include <cstdint>
#include <map>
#include <string>

namespace gklsbi {

struct AdamWConfig {
  double lr = 1e-3;
  double weight_decay = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  bool amsgrad = true;
};

// AdamW with decoupled weight decay: w <- w - lr*wd*w, then the Adam step.
class AdamW {
 public:
  explicit AdamW(AdamWConfig config = {}) : config_(config) {}

  const AdamWConfig& config() const noexcept { return config_; }
  std::uint64_t step_count() const noexcept { return step_; }

  // Updates every trainable parameter in `params` at learning rate `lr`.
  void step(ParamStore& params, const GradientMap& grads, double lr);
  void step(ParamStore& params, const GradientMap& grads) { step(params, grads, config_.lr); }

  // Only parameters whose name starts with one of these are updated.
  void set_trainable_prefix(std::string prefix) { trainable_prefix_ = std::move(prefix); }

  const Tensor& first_moment(const std::string& name) const { return state_.at(name).m; }
  const Tensor& second_moment(const std::string& name) const { return state_.at(name).v; }
  const Tensor& max_second_moment(const std::string& name) const { return state_.at(name).v_max; }

 private:
  struct Slot {
    Tensor m;
    Tensor v;
    Tensor v_max;
  };

  AdamWConfig config_;
  std::map<std::string, Slot> state_;
  std::uint64_t step_ = 0;
  std::string trainable_prefix_;
};

// Linear warmup from start_lr to peak_lr, then cosine annealing to final_lr.
struct LrSchedule {
  std::uint64_t total_steps = 1;
  double warmup_fraction = 0.1;
  double start_lr = 1e-8;
  double peak_lr = 1e-3;
  double final_lr = 1e-8;

  void validate() const;
  std::uint64_t warmup_steps() const;
  double lr_at(std::uint64_t step) const;
};

enum class StopDecision { proceed, stop };

// Counts validation checks without an improvement larger than min_delta.
class EarlyStopping {
 public:
  explicit EarlyStopping(double min_delta = 0.003, std::uint64_t patience = 322)
      : min_delta_(min_delta), patience_(patience) {}

  StopDecision update(double val_loss);

  // True iff the most recent update set a new best.
  bool improved() const noexcept { return improved_; }
  double best() const noexcept { return best_; }
  std::uint64_t since_improvement() const noexcept { return since_improvement_; }
  double min_delta() const noexcept { return min_delta_; }
  std::uint64_t patience() const noexcept { return patience_; }

 private:
  double min_delta_;
  std::uint64_t patience_;
  double best_ = 0.0;
  bool has_best_ = false;
  bool improved_ = false;
  std::uint64_t since_improvement_ = 0;
};

}  // namespace gklsbi
