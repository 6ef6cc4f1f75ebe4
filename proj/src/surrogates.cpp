#include "gklsbi/surrogates.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

namespace gklsbi {

namespace {

constexpr double kLog2Pi = 1.8378770664093453;
constexpr std::size_t kEvalChunk = 16384;

// Row-chunked evaluation of a batch function returning M x k.
template <typename F>
Tensor chunked(std::size_t rows, F f) {
  if (rows <= kEvalChunk) return f(0, rows);
  Tensor out;
  for (std::size_t begin = 0; begin < rows; begin += kEvalChunk) {
    const std::size_t count = std::min(kEvalChunk, rows - begin);
    out = concat_rows(out, f(begin, count));
  }
  return out;
}

void check_rows(const Tensor& theta, const Tensor& x, std::size_t theta_dim, std::size_t x_dim) {
  if (theta.cols() != theta_dim || x.cols() != x_dim || theta.rows() != x.rows()) {
    throw ShapeError("expected theta [M, " + std::to_string(theta_dim) + "] and x [M, " +
                     std::to_string(x_dim) + "], got " + theta.shape_string() + " and " + x.shape_string());
  }
}

std::size_t off_diag_count(std::size_t d) { return d * (d - 1) / 2; }

}  // namespace

BaseKind parse_base_kind(const std::string& name) {
  if (name == "gaussian") return BaseKind::gaussian;
  if (name == "maf") return BaseKind::maf;
  throw std::invalid_argument("unknown flow base: " + name);
}

const char* base_kind_name(BaseKind kind) { return kind == BaseKind::gaussian ? "gaussian" : "maf"; }

SurrogateKind parse_surrogate_kind(const std::string& name) {
  if (name == "flow") return SurrogateKind::flow;
  if (name == "ratio") return SurrogateKind::ratio;
  if (name == "hybrid") return SurrogateKind::hybrid;
  throw std::invalid_argument("unknown surrogate kind: " + name);
}

const char* surrogate_kind_name(SurrogateKind kind) {
  switch (kind) {
    case SurrogateKind::flow: return "flow";
    case SurrogateKind::ratio: return "ratio";
    case SurrogateKind::hybrid: return "hybrid";
  }
  return "unknown";
}

// ---------------------------------------------------------------------------
// FlowSurrogate

FlowSurrogate::FlowSurrogate(std::string prefix, std::size_t theta_dim, std::size_t x_dim,
                             FlowConfig config, std::optional<UniformBox> support)
    : prefix_(std::move(prefix)),
      theta_dim_(theta_dim),
      x_dim_(x_dim),
      config_(std::move(config)),
      support_(std::move(support)) {
  if (theta_dim_ == 0 || x_dim_ == 0) throw std::invalid_argument("flow dims must be positive");
  if (support_ && support_->dim() != theta_dim_) throw ShapeError("support box dimension mismatch");
  if (config_.hidden.empty()) throw std::invalid_argument("flow needs at least one hidden layer");

  if (!config_.embedding_hidden.empty()) {
    embedding_ = Mlp(prefix_ + ".embed",
                     MlpConfig{.input_dim = x_dim_,
                               .hidden = config_.embedding_hidden,
                               .output_dim = config_.embedding_hidden.back(),
                               .activation = Activation::gelu,
                               .residual = true,
                               .layer_norm = true});
  }

  const std::size_t d = theta_dim_;
  if (config_.base == BaseKind::gaussian) {
    gaussian_head_ = Mlp(prefix_ + ".gauss", MlpConfig{.input_dim = context_dim(),
                                                       .hidden = config_.hidden,
                                                       .output_dim = 2 * d + off_diag_count(d),
                                                       .activation = Activation::relu});
    return;
  }

  if (config_.transforms == 0) throw std::invalid_argument("MAF needs at least one transform");
  // MADE degrees: inputs 1..d, hidden units cycle through 1..d-1 (0 when
  // d == 1, i.e. context only), output i has degree i + 1.
  auto hidden_degree = [d](std::size_t k) -> std::size_t { return d > 1 ? k % (d - 1) + 1 : 0; };
  std::size_t prev_width = d;
  std::vector<std::size_t> prev_deg(d);
  for (std::size_t j = 0; j < d; ++j) prev_deg[j] = j + 1;
  for (std::size_t width : config_.hidden) {
    Tensor mask(prev_width, width);
    std::vector<std::size_t> deg(width);
    for (std::size_t k = 0; k < width; ++k) deg[k] = hidden_degree(k);
    for (std::size_t j = 0; j < prev_width; ++j) {
      for (std::size_t k = 0; k < width; ++k) mask(j, k) = deg[k] >= prev_deg[j] ? 1.0 : 0.0;
    }
    masks_.push_back(std::move(mask));
    prev_width = width;
    prev_deg = std::move(deg);
  }
  Tensor out_mask(prev_width, 2 * d);
  for (std::size_t j = 0; j < prev_width; ++j) {
    for (std::size_t i = 0; i < d; ++i) {
      const double m = i + 1 > prev_deg[j] ? 1.0 : 0.0;
      out_mask(j, i) = m;
      out_mask(j, d + i) = m;
    }
  }
  masks_.push_back(std::move(out_mask));
}

std::size_t FlowSurrogate::context_dim() const {
  return embedding_ ? embedding_->config().output_dim : x_dim_;
}

std::string FlowSurrogate::layer_prefix(std::size_t layer) const {
  return prefix_ + ".maf" + std::to_string(layer);
}

void FlowSurrogate::init(ParamStore& params, Rng& rng) const {
  if (embedding_) embedding_->init(params, rng);
  if (gaussian_head_) {
    gaussian_head_->init(params, rng, /*zero_output=*/true);
    return;
  }
  const std::size_t d = theta_dim_;
  for (std::size_t k = 0; k < config_.transforms; ++k) {
    const std::string p = layer_prefix(k);
    init_linear(params, rng, p, "in", d, config_.hidden.front());
    init_linear(params, rng, p, "ctx", context_dim(), config_.hidden.front());
    for (std::size_t l = 1; l < config_.hidden.size(); ++l) {
      init_linear(params, rng, p, "hidden" + std::to_string(l), config_.hidden[l - 1], config_.hidden[l]);
    }
    // zero head: every transform starts as the identity
    init_linear(params, rng, p, "out", config_.hidden.back(), 2 * d, /*zero=*/true);
  }
}

Var FlowSurrogate::embed(Graph& graph, const ParamStore& params, Var x) const {
  if (graph.value(x).cols() != x_dim_) {
    throw ShapeError("flow expects x width " + std::to_string(x_dim_) + ", got " +
                     graph.value(x).shape_string());
  }
  return embedding_ ? embedding_->forward(graph, params, x) : x;
}

Var FlowSurrogate::made(Graph& graph, const ParamStore& params, std::size_t layer, Var h,
                        Var context) const {
  const std::string p = layer_prefix(layer);
  auto masked = [&](const std::string& name, std::size_t mask_index, Var input) {
    Var w = graph.mul(graph.param(params, p + "." + name + ".w"), graph.input(masks_[mask_index]));
    return graph.add(graph.matmul(input, w), graph.param(params, p + "." + name + ".b"));
  };
  Var a = graph.add(masked("in", 0, h), linear(graph, params, p, "ctx", context));
  a = graph.relu(a);
  for (std::size_t l = 1; l < config_.hidden.size(); ++l) {
    a = graph.relu(masked("hidden" + std::to_string(l), l, a));
  }
  Var out = masked("out", masks_.size() - 1, a);
  // soft bound on the log-scale half: without it a few tail draws overflow in
  // the sampling direction once the scales grow during training
  const std::size_t d = theta_dim_;
  Var log_scale = graph.scale(graph.tanh(graph.scale(graph.slice_cols(out, d, d), 1.0 / kMaxLogScale)), kMaxLogScale);
  return graph.concat_cols({graph.slice_cols(out, 0, d), log_scale});
}

Var FlowSurrogate::reverse(Graph& graph, Var h) const {
  std::vector<std::size_t> order(theta_dim_);
  for (std::size_t i = 0; i < theta_dim_; ++i) order[i] = theta_dim_ - 1 - i;
  return graph.select_cols(h, std::move(order));
}

Var FlowSurrogate::base_log_prob(Graph& graph, const ParamStore& params, Var y, Var context) const {
  const std::size_t d = theta_dim_;
  const double norm = -0.5 * static_cast<double>(d) * kLog2Pi;
  if (gaussian_head_) {
    Var head = gaussian_head_->forward(graph, params, context);
    Var mean = graph.slice_cols(head, 0, d);
    Var diag = graph.add_const(graph.softplus(graph.add_const(graph.slice_cols(head, d, d), kCholOffset)),
                               kCholFloor);
    Var off = graph.slice_cols(head, 2 * d, off_diag_count(d));
    Var z = graph.tril_solve(diag, off, graph.sub(y, mean));
    Var quad = graph.scale(graph.row_sum(graph.square(z)), -0.5);
    return graph.add_const(graph.sub(quad, graph.row_sum(graph.log(diag))), norm);
  }
  Var h = y;
  std::optional<Var> log_scale_total;
  for (std::size_t k = 0; k < config_.transforms; ++k) {
    Var out = made(graph, params, k, h, context);
    Var shift = graph.slice_cols(out, 0, d);
    Var log_scale = graph.slice_cols(out, d, d);
    h = graph.mul(graph.sub(h, shift), graph.exp(graph.neg(log_scale)));
    Var s = graph.row_sum(log_scale);
    log_scale_total = log_scale_total ? graph.add(*log_scale_total, s) : s;
    if (k + 1 < config_.transforms) h = reverse(graph, h);
  }
  Var quad = graph.scale(graph.row_sum(graph.square(h)), -0.5);
  return graph.add_const(graph.sub(quad, *log_scale_total), norm);
}

Var FlowSurrogate::push_forward(Graph& graph, const ParamStore& params, Var eps, Var context) const {
  const std::size_t d = theta_dim_;
  const std::size_t rows = graph.value(eps).rows();
  if (gaussian_head_) {
    Var head = gaussian_head_->forward(graph, params, context);
    Var mean = graph.slice_cols(head, 0, d);
    Var diag = graph.add_const(graph.softplus(graph.add_const(graph.slice_cols(head, d, d), kCholOffset)),
                               kCholFloor);
    Var off = graph.slice_cols(head, 2 * d, off_diag_count(d));
    return graph.add(mean, graph.tril_matvec(diag, off, eps));
  }
  Var h = eps;
  for (std::size_t k = config_.transforms; k-- > 0;) {
    if (k + 1 < config_.transforms) h = reverse(graph, h);
    std::vector<Var> cols(d, graph.input(Tensor(rows, 1)));
    for (std::size_t i = 0; i < d; ++i) {
      Var out = made(graph, params, k, graph.concat_cols(cols), context);
      Var shift = graph.slice_cols(out, i, 1);
      Var log_scale = graph.slice_cols(out, d + i, 1);
      cols[i] = graph.add(shift, graph.mul(graph.slice_cols(h, i, 1), graph.exp(log_scale)));
    }
    h = graph.concat_cols(cols);
  }
  return h;
}

Var FlowSurrogate::log_prob(Graph& graph, const ParamStore& params, Var theta, Var x) const {
  check_rows(graph.value(theta), graph.value(x), theta_dim_, x_dim_);
  Var context = embed(graph, params, x);
  if (!support_) return base_log_prob(graph, params, theta, context);

  const std::size_t d = theta_dim_;
  Tensor lower(1, d), inv_width(1, d);
  double log_width = 0.0;
  for (std::size_t i = 0; i < d; ++i) {
    lower[i] = support_->lower[i];
    inv_width[i] = 1.0 / (support_->upper[i] - support_->lower[i]);
    log_width += std::log(support_->upper[i] - support_->lower[i]);
  }
  // s = (theta - lower) / width, y = logit(s); log|dtheta/dy| = log width + log s + log(1 - s)
  Var s = graph.mul(graph.sub(theta, graph.input(lower)), graph.input(inv_width));
  Var log_s = graph.log(s);
  Var log_1ms = graph.log(graph.add_const(graph.neg(s), 1.0));
  Var y = graph.sub(log_s, log_1ms);
  Var log_jac = graph.add_const(graph.add(graph.row_sum(log_s), graph.row_sum(log_1ms)), log_width);
  return graph.sub(base_log_prob(graph, params, y, context), log_jac);
}

Tensor FlowSurrogate::log_prob(const ParamStore& params, const Tensor& theta, const Tensor& x) const {
  check_rows(theta, x, theta_dim_, x_dim_);
  Tensor safe = theta;
  std::vector<bool> outside(theta.rows(), false);
  if (support_) {
    for (std::size_t r = 0; r < theta.rows(); ++r) {
      auto row = theta.row_span(r);
      for (std::size_t i = 0; i < theta_dim_; ++i) {
        if (!(row[i] > support_->lower[i] && row[i] < support_->upper[i])) outside[r] = true;
      }
      if (outside[r]) {
        for (std::size_t i = 0; i < theta_dim_; ++i) {
          safe(r, i) = 0.5 * (support_->lower[i] + support_->upper[i]);
        }
      }
    }
  }
  Tensor out = chunked(theta.rows(), [&](std::size_t begin, std::size_t count) {
    Graph g;
    return g.value(log_prob(g, params, g.input(safe.rows_slice(begin, count)), g.input(x.rows_slice(begin, count))));
  });
  for (std::size_t r = 0; r < out.rows(); ++r) {
    if (outside[r]) out[r] = -std::numeric_limits<double>::infinity();
  }
  return out;
}

Var FlowSurrogate::sample(Graph& graph, const ParamStore& params, Var x, Rng& rng, bool stop_gradient) const {
  const std::size_t rows = graph.value(x).rows();
  Tensor eps(rows, theta_dim_);
  for (double& v : eps.data()) v = standard_normal(rng);
  if (stop_gradient) return graph.input(transform_noise(params, eps, graph.value(x)));

  Var y = push_forward(graph, params, graph.input(std::move(eps)), embed(graph, params, x));
  if (!support_) return y;
  Tensor lower(1, theta_dim_), width(1, theta_dim_);
  for (std::size_t i = 0; i < theta_dim_; ++i) {
    lower[i] = support_->lower[i];
    width[i] = support_->upper[i] - support_->lower[i];
  }
  return graph.add(graph.input(lower), graph.mul(graph.input(width), graph.sigmoid(y)));
}

Tensor FlowSurrogate::transform_noise(const ParamStore& params, const Tensor& eps, const Tensor& x) const {
  check_rows(eps, x, theta_dim_, x_dim_);
  Tensor y = chunked(eps.rows(), [&](std::size_t begin, std::size_t count) {
    Graph g;
    Var context = embed(g, params, g.input(x.rows_slice(begin, count)));
    return g.value(push_forward(g, params, g.input(eps.rows_slice(begin, count)), context));
  });
  if (!support_) return y;
  for (std::size_t r = 0; r < y.rows(); ++r) {
    for (std::size_t i = 0; i < theta_dim_; ++i) {
      const double lo = support_->lower[i];
      const double hi = support_->upper[i];
      const double v = y(r, i);
      const double sig = v >= 0.0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v));
      y(r, i) = lo + (hi - lo) * sig;
    }
  }
  return y;
}

Tensor FlowSurrogate::sample(const ParamStore& params, const Tensor& x, Rng& rng) const {
  Tensor eps(x.rows(), theta_dim_);
  for (double& v : eps.data()) v = standard_normal(rng);
  return transform_noise(params, eps, x);
}

Tensor FlowSurrogate::made_outputs(const ParamStore& params, std::size_t layer, const Tensor& layer_input,
                                   const Tensor& x) const {
  if (config_.base != BaseKind::maf) throw std::logic_error("made_outputs requires a MAF flow");
  if (layer >= config_.transforms) throw std::out_of_range("MAF layer index out of range");
  check_rows(layer_input, x, theta_dim_, x_dim_);
  Graph g;
  return g.value(made(g, params, layer, g.input(layer_input), embed(g, params, g.input(x))));
}

// ---------------------------------------------------------------------------
// RatioNet

RatioNet::RatioNet(std::string prefix, std::size_t theta_dim, std::size_t x_dim,
                   std::vector<std::size_t> hidden, std::vector<std::size_t> embedding_hidden)
    : prefix_(std::move(prefix)), x_dim_(x_dim) {
  std::size_t feature_dim = x_dim;
  if (!embedding_hidden.empty()) {
    feature_dim = embedding_hidden.back();
    embedding_ = Mlp(prefix_ + ".embed", MlpConfig{.input_dim = x_dim,
                                                   .hidden = std::move(embedding_hidden),
                                                   .output_dim = feature_dim,
                                                   .activation = Activation::gelu,
                                                   .residual = true,
                                                   .layer_norm = true});
  }
  mlp_ = Mlp(prefix_ + ".net", MlpConfig{.input_dim = theta_dim + feature_dim,
                                         .hidden = std::move(hidden),
                                         .output_dim = 1,
                                         .activation = Activation::gelu,
                                         .residual = true,
                                         .layer_norm = true});
}

void RatioNet::init(ParamStore& params, Rng& rng) const {
  if (embedding_) embedding_->init(params, rng);
  mlp_.init(params, rng, /*zero_output=*/true);
}

Var RatioNet::forward(Graph& graph, const ParamStore& params, Var theta, Var x) const {
  if (graph.value(x).cols() != x_dim_) throw ShapeError("ratio net expects x width " + std::to_string(x_dim_));
  Var features = embedding_ ? embedding_->forward(graph, params, x) : x;
  return mlp_.forward(graph, params, graph.concat_cols({theta, features}));
}

Tensor RatioNet::forward(const ParamStore& params, const Tensor& theta, const Tensor& x) const {
  if (theta.rows() != x.rows()) throw ShapeError("ratio inputs differ in row count");
  return chunked(theta.rows(), [&](std::size_t begin, std::size_t count) {
    Graph g;
    return g.value(forward(g, params, g.input(theta.rows_slice(begin, count)), g.input(x.rows_slice(begin, count))));
  });
}

// ---------------------------------------------------------------------------
// Surrogate

SurrogateModel Surrogate::build_model(const SurrogateSpec& spec) {
  if (dim(spec.prior) != spec.theta_dim) throw ShapeError("prior dimension does not match theta_dim");
  std::optional<UniformBox> support;
  if (spec.support_bijection) {
    if (const auto* box = std::get_if<UniformBox>(&spec.prior)) support = *box;
  }
  auto make_flow = [&] {
    return FlowSurrogate(kFlowPrefix, spec.theta_dim, spec.x_dim, spec.flow, support);
  };
  auto make_ratio = [&] { return RatioNet(kRatioPrefix, spec.theta_dim, spec.x_dim, spec.ratio_hidden, spec.ratio_embedding_hidden);
  };
  switch (spec.kind) {
    case SurrogateKind::flow: return FlowModel{make_flow()};
    case SurrogateKind::ratio: return RatioModel{make_ratio()};
    case SurrogateKind::hybrid: return HybridModel{make_flow(), make_ratio()};
  }
  throw std::logic_error("unreachable surrogate kind");
}

Surrogate::Surrogate(SurrogateSpec spec, SurrogateModel model, ParamStore params)
    : spec_(std::move(spec)), model_(std::move(model)), params_(std::move(params)) {}

Surrogate Surrogate::create(const SurrogateSpec& spec, Rng& init_rng) {
  SurrogateModel model = build_model(spec);
  ParamStore params;
  std::visit(
      [&](const auto& m) {
        using T = std::decay_t<decltype(m)>;
        if constexpr (!std::is_same_v<T, RatioModel>) m.flow.init(params, init_rng);
        if constexpr (!std::is_same_v<T, FlowModel>) m.ratio.init(params, init_rng);
      },
      model);
  return Surrogate(spec, std::move(model), std::move(params));
}

Surrogate::Surrogate(SurrogateSpec spec, ParamStore params) : spec_(std::move(spec)) {
  Rng scratch(0);
  Surrogate reference = create(spec_, scratch);
  for (const auto& [name, t] : reference.params().tensors()) {
    if (!params.contains(name)) throw std::invalid_argument("checkpoint is missing parameter " + name);
    if (!params.get(name).same_shape(t)) throw ShapeError("checkpoint parameter " + name + " has wrong shape");
  }
  if (params.size() != reference.params().size()) {
    throw std::invalid_argument("checkpoint has parameters not used by this architecture");
  }
  model_ = std::move(reference.model_);
  params_ = std::move(params);
}

const FlowSurrogate* Surrogate::flow() const {
  if (const auto* f = std::get_if<FlowModel>(&model_)) return &f->flow;
  if (const auto* h = std::get_if<HybridModel>(&model_)) return &h->flow;
  return nullptr;
}

const RatioNet* Surrogate::ratio() const {
  if (const auto* r = std::get_if<RatioModel>(&model_)) return &r->ratio;
  if (const auto* h = std::get_if<HybridModel>(&model_)) return &h->ratio;
  return nullptr;
}

Tensor prior_log_density_column(const Distribution& prior, const Tensor& theta) {
  const auto logs = log_pdf_rows(prior, theta);
  return Tensor(theta.rows(), 1, logs);
}

Var log_unnorm(Graph& graph, const Surrogate& q, Var theta, Var x) {
  const auto& p = q.params();
  switch (q.kind()) {
    case SurrogateKind::flow:
      return q.flow()->log_prob(graph, p, theta, x);
    case SurrogateKind::ratio:
      return graph.add(q.ratio()->forward(graph, p, theta, x),
                       graph.input(prior_log_density_column(q.prior(), graph.value(theta))));
    case SurrogateKind::hybrid:
      return graph.add(q.ratio()->forward(graph, p, theta, x), q.flow()->log_prob(graph, p, theta, x));
  }
  throw std::logic_error("unreachable surrogate kind");
}

Tensor log_unnorm(const Surrogate& q, const Tensor& theta, const Tensor& x) {
  const auto& p = q.params();
  check_rows(theta, x, q.spec().theta_dim, q.spec().x_dim);
  switch (q.kind()) {
    case SurrogateKind::flow:
      return q.flow()->log_prob(p, theta, x);
    case SurrogateKind::ratio: {
      Tensor out = q.ratio()->forward(p, theta, x);
      out.matrix() += prior_log_density_column(q.prior(), theta).matrix();
      return out;
    }
    case SurrogateKind::hybrid: {
      Tensor out = q.ratio()->forward(p, theta, x);
      out.matrix() += q.flow()->log_prob(p, theta, x).matrix();
      return out;
    }
  }
  throw std::logic_error("unreachable surrogate kind");
}

double estimate_partition(const Surrogate& q, std::span<const double> x, std::size_t n_samples, Rng& rng) {
  if (n_samples < 1) throw std::invalid_argument("estimate_partition needs at least one sample");
  if (q.kind() == SurrogateKind::flow) throw std::invalid_argument("flow surrogates are normalized");
  if (x.size() != q.spec().x_dim) throw ShapeError("observation dimension mismatch");
  const Tensor xs = Tensor::row(x).repeat_row(n_samples);
  const Tensor theta = q.kind() == SurrogateKind::ratio ? sample_rows(q.prior(), n_samples, rng)
                                                        : q.flow()->sample(q.params(), xs, rng);
  const Tensor rho = q.ratio()->forward(q.params(), theta, xs);
  double total = 0.0;
  for (double v : rho.data()) total += std::exp(v);
  return total / static_cast<double>(n_samples);
}

}  // namespace gklsbi
