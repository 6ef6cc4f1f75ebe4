#pragma once

#include "gklsbi/graph.hpp"
#include "gklsbi/params.hpp"
#include "gklsbi/rng.hpp"

#include <string>
#include <vector>

namespace gklsbi {

enum class Activation { relu, gelu };

Activation parse_activation(const std::string& name);
const char* activation_name(Activation act);

Var activate(Graph& graph, Var x, Activation act);

struct MlpConfig {
  std::size_t input_dim = 1;
  std::vector<std::size_t> hidden;
  std::size_t output_dim = 1;
  Activation activation = Activation::relu;
  bool residual = false;
  bool layer_norm = false;

  void validate() const;
};

// Fully connected network whose weights live in a ParamStore under `prefix`.
//
// Plain:     h <- act(LN?(W h + b)) per hidden layer, then a linear head.
// Residual:  h <- W_in x + b_in, then per hidden width a block
//            h <- h + W act(LN?(h)) + b, then out = W_out act(h) + b_out.
//            A width change between blocks inserts a linear projection.
class Mlp {
 public:
  Mlp() = default;
  Mlp(std::string prefix, MlpConfig config);

  const MlpConfig& config() const noexcept { return config_; }
  const std::string& prefix() const noexcept { return prefix_; }

  // Uniform fan-in initialization; `zero_output` zeroes the head.
  void init(ParamStore& params, Rng& rng, bool zero_output = false) const;
  Var forward(Graph& graph, const ParamStore& params, Var input) const;

  std::string weight_name(const std::string& layer) const { return prefix_ + "." + layer + ".w"; }
  std::string bias_name(const std::string& layer) const { return prefix_ + "." + layer + ".b"; }
  std::string output_layer() const { return "out"; }

 private:
  std::string prefix_;
  MlpConfig config_;
};

// y = x W + b with W stored as in x out.
Var linear(Graph& graph, const ParamStore& params, const std::string& prefix,
           const std::string& layer, Var x);

void init_linear(ParamStore& params, Rng& rng, const std::string& prefix, const std::string& layer,
                 std::size_t in, std::size_t out, bool zero = false);

// h + W act(LN?(h)) + b; W is width x width. With zero W and b the block is
// the identity.
Var residual_block(Graph& graph, const ParamStore& params, const std::string& prefix,
                   const std::string& layer, Activation act, bool layer_norm, Var h);

}  // namespace gklsbi
