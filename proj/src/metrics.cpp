#include "gklsbi/metrics.hpp"

#include "gklsbi/graph.hpp"
#include "gklsbi/log.hpp"
#include "gklsbi/mlp.hpp"
#include "gklsbi/optim.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace gklsbi {

namespace {

struct Labeled {
  Tensor features;
  std::vector<double> labels;
};

Labeled take(const Tensor& features, const std::vector<double>& labels, const std::vector<std::size_t>& index) {
  Labeled out{features.gather_rows(index), {}};
  out.labels.reserve(index.size());
  for (std::size_t i : index) out.labels.push_back(labels[i]);
  return out;
}

// mean binary cross-entropy from logits: softplus(z) - y z
Var bce(Graph& g, Var logits, const std::vector<double>& labels) {
  Var y = g.input(Tensor(labels.size(), 1, labels));
  return g.mean(g.sub(g.softplus(logits), g.mul(y, logits)));
}

double accuracy(const Mlp& net, const ParamStore& params, const Labeled& data) {
  Graph g;
  const Tensor& z = g.value(net.forward(g, params, g.input(data.features)));
  std::size_t hits = 0;
  for (std::size_t i = 0; i < data.labels.size(); ++i) hits += (z[i] > 0.0) == (data.labels[i] > 0.5) ? 1 : 0;
  return static_cast<double>(hits) / static_cast<double>(data.labels.size());
}

double loss_value(const Mlp& net, const ParamStore& params, const Labeled& data) {
  Graph g;
  return g.value(bce(g, net.forward(g, params, g.input(data.features)), data.labels)).item();
}

double train_and_score(const Labeled& train, const Labeled& test, const C2stConfig& cfg, Rng& rng) {
  const std::size_t d = train.features.cols();
  const std::size_t width = cfg.hidden_factor * d;
  Mlp net("clf", MlpConfig{.input_dim = d, .hidden = {width, width}, .output_dim = 1, .activation = Activation::relu});
  ParamStore params;
  net.init(params, rng);

  // hold out part of the training fold for early stopping
  std::vector<std::size_t> order(train.labels.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::shuffle(order.begin(), order.end(), rng);
  const std::size_t n_val = std::max<std::size_t>(1, static_cast<std::size_t>(cfg.validation_fraction * order.size()));
  const Labeled val = take(train.features, train.labels, {order.begin(), order.begin() + n_val});
  const Labeled fit = take(train.features, train.labels, {order.begin() + n_val, order.end()});

  AdamW opt(AdamWConfig{.lr = cfg.lr, .weight_decay = cfg.weight_decay, .amsgrad = false});
  EarlyStopping stopper(cfg.min_delta, cfg.patience);
  ParamStore best = params;
  std::vector<std::size_t> idx(fit.labels.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  const std::size_t batch = std::min(cfg.batch_size, idx.size());
  for (std::size_t epoch = 0; epoch < cfg.max_epochs; ++epoch) {
    std::shuffle(idx.begin(), idx.end(), rng);
    for (std::size_t begin = 0; begin < idx.size(); begin += batch) {
      const std::vector<std::size_t> part(idx.begin() + begin, idx.begin() + std::min(idx.size(), begin + batch));
      const Labeled mb = take(fit.features, fit.labels, part);
      Graph g;
      bce(g, net.forward(g, params, g.input(mb.features)), mb.labels);
      opt.step(params, gradient(g, params));
    }
    const bool stop = stopper.update(loss_value(net, params, val)) == StopDecision::stop;
    if (stopper.improved()) best = params;
    if (stop) break;
  }
  return accuracy(net, best, test);
}

}  // namespace

void C2stConfig::validate() const {
  if (folds < 2) throw std::invalid_argument("c2st needs at least two folds");
  if (hidden_factor < 1 || batch_size < 1 || max_epochs < 1) throw std::invalid_argument("invalid c2st classifier setup");
  if (!(validation_fraction > 0.0 && validation_fraction < 1.0)) throw std::invalid_argument("c2st validation fraction");
}

C2stResult c2st(const Tensor& p, const Tensor& q, const C2stConfig& cfg, Rng& rng) {
  cfg.validate();
  if (p.cols() != q.cols()) throw ShapeError("c2st sample sets differ in dimension: " + p.shape_string() + " vs " + q.shape_string());
  if (p.rows() < cfg.min_samples || q.rows() < cfg.min_samples) {
    throw std::invalid_argument("c2st needs at least " + std::to_string(cfg.min_samples) + " samples per set");
  }
  C2stResult out;
  if (p.rows() < cfg.warn_below || q.rows() < cfg.warn_below) {
    out.warnings.push_back("c2st with fewer than " + std::to_string(cfg.warn_below) + " samples per set");
    log_warning(out.warnings.back());
  }

  Tensor all = concat_rows(p, q);
  std::vector<double> labels(all.rows(), 0.0);
  std::fill(labels.begin() + static_cast<std::ptrdiff_t>(p.rows()), labels.end(), 1.0);

  // joint z-scoring; constant columns carry no information and are dropped
  std::vector<std::size_t> keep;
  const std::size_t d = all.cols();
  std::vector<double> mean(d, 0.0), sd(d, 0.0);
  for (std::size_t k = 0; k < d; ++k) {
    for (std::size_t r = 0; r < all.rows(); ++r) mean[k] += all(r, k);
    mean[k] /= all.rows();
    for (std::size_t r = 0; r < all.rows(); ++r) sd[k] += std::pow(all(r, k) - mean[k], 2);
    sd[k] = std::sqrt(sd[k] / all.rows());
    if (sd[k] > 1e-12 * std::max(1.0, std::abs(mean[k]))) {
      keep.push_back(k);
    } else {
      out.dropped_features.push_back(k);
    }
  }
  if (!out.dropped_features.empty()) {
    out.warnings.push_back(std::to_string(out.dropped_features.size()) + " zero-variance feature(s) dropped");
    log_warning(out.warnings.back());
  }
  if (keep.empty()) {
    out.fold_accuracy.assign(cfg.folds, 0.5);
    return out;
  }
  Tensor features(all.rows(), keep.size());
  for (std::size_t r = 0; r < all.rows(); ++r) {
    for (std::size_t j = 0; j < keep.size(); ++j) {
      const std::size_t k = keep[j];
      features(r, j) = cfg.standardize ? (all(r, k) - mean[k]) / sd[k] : all(r, k);
    }
  }

  // stratified folds: shuffle each class, deal round-robin
  std::vector<std::size_t> fold_of(all.rows());
  for (const auto& [begin, end] : {std::pair{std::size_t{0}, p.rows()}, std::pair{p.rows(), all.rows()}}) {
    std::vector<std::size_t> cls(end - begin);
    std::iota(cls.begin(), cls.end(), begin);
    std::shuffle(cls.begin(), cls.end(), rng);
    for (std::size_t i = 0; i < cls.size(); ++i) fold_of[cls[i]] = i % cfg.folds;
  }

  std::vector<std::uint64_t> fold_seeds(cfg.folds);
  for (auto& s : fold_seeds) s = rng();
  for (std::size_t f = 0; f < cfg.folds; ++f) {
    std::vector<std::size_t> train_idx, test_idx;
    for (std::size_t r = 0; r < all.rows(); ++r) (fold_of[r] == f ? test_idx : train_idx).push_back(r);
    Rng fold_rng(fold_seeds[f]);
    out.fold_accuracy.push_back(
        train_and_score(take(features, labels, train_idx), take(features, labels, test_idx), cfg, fold_rng));
  }
  out.accuracy = std::accumulate(out.fold_accuracy.begin(), out.fold_accuracy.end(), 0.0) / cfg.folds;
  return out;
}

}  // namespace gklsbi
