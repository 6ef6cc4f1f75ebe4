#pragma once

#include "gklsbi/distributions.hpp"
#include "gklsbi/graph.hpp"
#include "gklsbi/mlp.hpp"
#include "gklsbi/params.hpp"
#include "gklsbi/rng.hpp"

#include <optional>
#include <string>
#include <variant>
#include <vector>

namespace gklsbi {

enum class BaseKind { gaussian, maf };
enum class SurrogateKind { flow, ratio, hybrid };

BaseKind parse_base_kind(const std::string& name);
const char* base_kind_name(BaseKind kind);
SurrogateKind parse_surrogate_kind(const std::string& name);
const char* surrogate_kind_name(SurrogateKind kind);

struct FlowConfig {
  BaseKind base = BaseKind::maf;
  std::size_t transforms = 5;
  std::vector<std::size_t> hidden = {64};
  // Residual gelu embedding of x; empty means the flow conditions on raw x.
  std::vector<std::size_t> embedding_hidden = {64};
};

// Diagonal of a network-produced Cholesky factor: softplus(raw + c) + floor,
// with c chosen so that raw = 0 gives a diagonal of ~1.
inline constexpr double kCholFloor = 1e-4;
inline constexpr double kCholOffset = 0.5413248546129181;  // log(e - 1)

// Per-transform MAF log-scales are kMaxLogScale * tanh(raw / kMaxLogScale).
inline constexpr double kMaxLogScale = 5.0;

// Normalized conditional density b_v(theta | x): either a conditional
// Gaussian or a stack of masked affine autoregressive transforms over a
// standard-normal base. With a box support, a fixed elementwise map
// theta = lower + (upper - lower) * sigmoid(y) follows the base.
class FlowSurrogate {
 public:
  FlowSurrogate() = default;
  FlowSurrogate(std::string prefix, std::size_t theta_dim, std::size_t x_dim, FlowConfig config,
                std::optional<UniformBox> support);

  const FlowConfig& config() const noexcept { return config_; }
  std::size_t theta_dim() const noexcept { return theta_dim_; }
  std::size_t x_dim() const noexcept { return x_dim_; }
  const std::optional<UniformBox>& support() const noexcept { return support_; }
  const std::string& prefix() const noexcept { return prefix_; }

  void init(ParamStore& params, Rng& rng) const;

  // ln b_v(theta | x) per row, M x 1.
  Var log_prob(Graph& graph, const ParamStore& params, Var theta, Var x) const;
  Tensor log_prob(const ParamStore& params, const Tensor& theta, const Tensor& x) const;

  // theta = f(eps; x) with eps ~ N(0, I), one draw per row of x. With
  // stop_gradient the result is a constant node: no adjoint reaches v.
  Var sample(Graph& graph, const ParamStore& params, Var x, Rng& rng, bool stop_gradient) const;
  Tensor sample(const ParamStore& params, const Tensor& x, Rng& rng) const;
  // Deterministic push-forward of given noise, used for reproducibility tests.
  Tensor transform_noise(const ParamStore& params, const Tensor& eps, const Tensor& x) const;

  // Shift and (bounded) log-scale columns (M x 2d) of autoregressive transform `layer`
  // evaluated at the given layer input. MAF only.
  Tensor made_outputs(const ParamStore& params, std::size_t layer, const Tensor& layer_input,
                      const Tensor& x) const;

 private:
  Var embed(Graph& graph, const ParamStore& params, Var x) const;
  Var made(Graph& graph, const ParamStore& params, std::size_t layer, Var h, Var context) const;
  Var base_log_prob(Graph& graph, const ParamStore& params, Var y, Var context) const;
  Var push_forward(Graph& graph, const ParamStore& params, Var eps, Var context) const;
  Var reverse(Graph& graph, Var h) const;
  std::string layer_prefix(std::size_t layer) const;
  std::size_t context_dim() const;

  std::string prefix_;
  std::size_t theta_dim_ = 0;
  std::size_t x_dim_ = 0;
  FlowConfig config_;
  std::optional<UniformBox> support_;
  std::optional<Mlp> embedding_;
  std::optional<Mlp> gaussian_head_;
  std::vector<Tensor> masks_;  // per MADE: input, hidden..., output
};

// rho_w(theta, x): MLP over concat(theta, embed(x)) with a zero-initialized
// head, so rho_w == 0 at initialization. The embedding is its own network,
// not the flow's, so ratio gradients never touch flow weights.
class RatioNet {
 public:
  RatioNet() = default;
  RatioNet(std::string prefix, std::size_t theta_dim, std::size_t x_dim, std::vector<std::size_t> hidden,
           std::vector<std::size_t> embedding_hidden = {});

  void init(ParamStore& params, Rng& rng) const;
  Var forward(Graph& graph, const ParamStore& params, Var theta, Var x) const;
  Tensor forward(const ParamStore& params, const Tensor& theta, const Tensor& x) const;

  const Mlp& mlp() const noexcept { return mlp_; }
  const std::string& prefix() const noexcept { return prefix_; }

 private:
  std::string prefix_;
  std::size_t x_dim_ = 0;
  std::optional<Mlp> embedding_;
  Mlp mlp_;
};

struct SurrogateSpec {
  SurrogateKind kind = SurrogateKind::flow;
  std::size_t theta_dim = 1;
  std::size_t x_dim = 1;
  Distribution prior = UniformBox::cube(1, -1.0, 1.0);
  FlowConfig flow;
  std::vector<std::size_t> ratio_hidden = {128};
  std::vector<std::size_t> ratio_embedding_hidden = {64};
  // Map the flow onto the prior box when the prior is uniform.
  bool support_bijection = true;
};

struct FlowModel {
  FlowSurrogate flow;
};
struct RatioModel {
  RatioNet ratio;
};
struct HybridModel {
  FlowSurrogate flow;
  RatioNet ratio;
};
using SurrogateModel = std::variant<FlowModel, RatioModel, HybridModel>;

// q(theta | x) in one of three forms:
//   flow:   b_v(theta | x)                    (normalized)
//   ratio:  exp(rho_w(theta, x)) p(theta)     (unnormalized)
//   hybrid: exp(rho_w(theta, x)) b_v(theta|x) (unnormalized)
// Flow weights are stored under "flow.", ratio weights under "ratio.".
class Surrogate {
 public:
  static Surrogate create(const SurrogateSpec& spec, Rng& init_rng);
  Surrogate(SurrogateSpec spec, ParamStore params);

  SurrogateKind kind() const noexcept { return spec_.kind; }
  const SurrogateSpec& spec() const noexcept { return spec_; }
  const SurrogateModel& model() const noexcept { return model_; }
  const Distribution& prior() const noexcept { return spec_.prior; }
  ParamStore& params() noexcept { return params_; }
  const ParamStore& params() const noexcept { return params_; }

  const FlowSurrogate* flow() const;
  const RatioNet* ratio() const;

 private:
  Surrogate(SurrogateSpec spec, SurrogateModel model, ParamStore params);
  static SurrogateModel build_model(const SurrogateSpec& spec);

  SurrogateSpec spec_;
  SurrogateModel model_;
  ParamStore params_;
};

inline constexpr const char* kFlowPrefix = "flow";
inline constexpr const char* kRatioPrefix = "ratio";

// Unnormalized log q(theta | x) per row (M x 1).
Var log_unnorm(Graph& graph, const Surrogate& q, Var theta, Var x);
Tensor log_unnorm(const Surrogate& q, const Tensor& theta, const Tensor& x);

// Constant column of prior log densities (-inf outside the support).
Tensor prior_log_density_column(const Distribution& prior, const Tensor& theta);

// Monte Carlo mean of exp(rho_w) under the proposal (prior for ratio
// surrogates, b_v for hybrids): an unbiased estimate of Z_w(x).
double estimate_partition(const Surrogate& q, std::span<const double> x, std::size_t n_samples, Rng& rng);

}  // namespace gklsbi
