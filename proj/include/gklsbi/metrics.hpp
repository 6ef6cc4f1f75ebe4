#pragma once

#include "gklsbi/rng.hpp"
#include "gklsbi/tensor.hpp"

#include <string>
#include <vector>

namespace gklsbi {

struct C2stConfig {
  std::size_t folds = 5;
  std::size_t hidden_factor = 10;  // two hidden layers of width factor * dim
  std::size_t max_epochs = 300;
  std::size_t batch_size = 200;
  double lr = 1e-3;
  double weight_decay = 1e-4;
  double validation_fraction = 0.1;
  std::size_t patience = 20;
  double min_delta = 1e-4;
  bool standardize = true;
  std::size_t min_samples = 500;
  std::size_t warn_below = 2000;

  void validate() const;
};

struct C2stResult {
  double accuracy = 0.5;  // mean held-out accuracy over folds
  std::vector<double> fold_accuracy;
  std::vector<std::size_t> dropped_features;
  std::vector<std::string> warnings;
};

// Cross-validated accuracy of a classifier separating samples p (label 0)
// from samples q (label 1). 0.5 means indistinguishable.
C2stResult c2st(const Tensor& p, const Tensor& q, const C2stConfig& cfg, Rng& rng);
inline double c2st_accuracy(const Tensor& p, const Tensor& q, Rng& rng) { return c2st(p, q, {}, rng).accuracy; }

// max(acc, 1 - acc)
inline double fold_accuracy(double acc) { return acc < 0.5 ? 1.0 - acc : acc; }

}  // namespace gklsbi
