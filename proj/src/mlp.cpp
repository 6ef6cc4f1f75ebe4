#include "gklsbi/mlp.hpp"

#include <cmath>
#include <stdexcept>

namespace gklsbi {

Activation parse_activation(const std::string& name) {
  if (name == "relu") return Activation::relu;
  if (name == "gelu") return Activation::gelu;
  throw std::invalid_argument("unknown activation: " + name);
}

const char* activation_name(Activation act) { return act == Activation::relu ? "relu" : "gelu"; }

Var activate(Graph& graph, Var x, Activation act) {
  return act == Activation::relu ? graph.relu(x) : graph.gelu(x);
}

void MlpConfig::validate() const {
  if (input_dim == 0 || output_dim == 0) throw std::invalid_argument("MLP dims must be positive");
  for (std::size_t h : hidden) {
    if (h == 0) throw std::invalid_argument("MLP hidden widths must be positive");
  }
}

void init_linear(ParamStore& params, Rng& rng, const std::string& prefix, const std::string& layer,
                 std::size_t in, std::size_t out, bool zero) {
  Tensor w(in, out);
  Tensor b(1, out);
  if (!zero) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(in));
    std::uniform_real_distribution<double> u(-bound, bound);
    for (double& v : w.data()) v = u(rng);
    for (double& v : b.data()) v = u(rng);
  }
  params.add(prefix + "." + layer + ".w", std::move(w));
  params.add(prefix + "." + layer + ".b", std::move(b));
}

Var linear(Graph& graph, const ParamStore& params, const std::string& prefix,
           const std::string& layer, Var x) {
  Var w = graph.param(params, prefix + "." + layer + ".w");
  Var b = graph.param(params, prefix + "." + layer + ".b");
  return graph.add(graph.matmul(x, w), b);
}

namespace {

void init_layer_norm(ParamStore& params, const std::string& prefix, const std::string& layer,
                     std::size_t width) {
  params.add(prefix + "." + layer + ".gain", Tensor(1, width, 1.0));
  params.add(prefix + "." + layer + ".shift", Tensor(1, width, 0.0));
}

Var apply_layer_norm(Graph& graph, const ParamStore& params, const std::string& prefix,
                     const std::string& layer, Var h) {
  Var normed = graph.layer_norm(h);
  Var gain = graph.param(params, prefix + "." + layer + ".gain");
  Var shift = graph.param(params, prefix + "." + layer + ".shift");
  return graph.add(graph.mul(normed, gain), shift);
}

std::string indexed(const char* stem, std::size_t i) { return stem + std::to_string(i); }

}  // namespace

Var residual_block(Graph& graph, const ParamStore& params, const std::string& prefix,
                   const std::string& layer, Activation act, bool layer_norm, Var h) {
  Var inner = layer_norm ? apply_layer_norm(graph, params, prefix, layer + "_ln", h) : h;
  inner = activate(graph, inner, act);
  return graph.add(h, linear(graph, params, prefix, layer, inner));
}

Mlp::Mlp(std::string prefix, MlpConfig config) : prefix_(std::move(prefix)), config_(std::move(config)) {
  config_.validate();
}

void Mlp::init(ParamStore& params, Rng& rng, bool zero_output) const {
  const auto& c = config_;
  if (c.residual && !c.hidden.empty()) {
    init_linear(params, rng, prefix_, "in", c.input_dim, c.hidden.front());
    for (std::size_t i = 0; i < c.hidden.size(); ++i) {
      if (i > 0 && c.hidden[i] != c.hidden[i - 1]) {
        init_linear(params, rng, prefix_, indexed("proj", i), c.hidden[i - 1], c.hidden[i]);
      }
      if (c.layer_norm) init_layer_norm(params, prefix_, indexed("block", i) + "_ln", c.hidden[i]);
      init_linear(params, rng, prefix_, indexed("block", i), c.hidden[i], c.hidden[i]);
    }
    init_linear(params, rng, prefix_, "out", c.hidden.back(), c.output_dim, zero_output);
    return;
  }
  std::size_t width = c.input_dim;
  for (std::size_t i = 0; i < c.hidden.size(); ++i) {
    init_linear(params, rng, prefix_, indexed("hidden", i), width, c.hidden[i]);
    if (c.layer_norm) init_layer_norm(params, prefix_, indexed("ln", i), c.hidden[i]);
    width = c.hidden[i];
  }
  init_linear(params, rng, prefix_, "out", width, c.output_dim, zero_output);
}

Var Mlp::forward(Graph& graph, const ParamStore& params, Var input) const {
  const auto& c = config_;
  if (graph.value(input).cols() != c.input_dim) {
    throw ShapeError(prefix_ + ": expected input width " + std::to_string(c.input_dim) + ", got " +
                     graph.value(input).shape_string());
  }
  if (c.residual && !c.hidden.empty()) {
    Var h = linear(graph, params, prefix_, "in", input);
    for (std::size_t i = 0; i < c.hidden.size(); ++i) {
      if (i > 0 && c.hidden[i] != c.hidden[i - 1]) {
        h = linear(graph, params, prefix_, indexed("proj", i), h);
      }
      h = residual_block(graph, params, prefix_, indexed("block", i), c.activation, c.layer_norm, h);
    }
    return linear(graph, params, prefix_, "out", activate(graph, h, c.activation));
  }
  Var h = input;
  for (std::size_t i = 0; i < c.hidden.size(); ++i) {
    h = linear(graph, params, prefix_, indexed("hidden", i), h);
    if (c.layer_norm) h = apply_layer_norm(graph, params, prefix_, indexed("ln", i), h);
    h = activate(graph, h, c.activation);
  }
  return linear(graph, params, prefix_, "out", h);
}

}  // namespace gklsbi
