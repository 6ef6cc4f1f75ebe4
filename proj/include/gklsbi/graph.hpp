#pragma once

#include "gklsbi/params.hpp"
#include "gklsbi/tensor.hpp"

#include <cstdint>
#include <initializer_list>
#include <string>
#include <vector>

namespace gklsbi {

// Handle to a node on a Graph tape.
struct Var {
  std::size_t id = 0;
};

enum class Op : std::uint8_t {
  Input,
  Param,
  MatMul,
  Add,
  Sub,
  Mul,
  Neg,
  Scale,
  AddConst,
  MinConst,
  Exp,
  Log,
  Tanh,
  Relu,
  Gelu,
  Softplus,
  Sigmoid,
  Square,
  Sum,
  Mean,
  RowSum,
  SelectCols,
  ConcatCols,
  LayerNorm,
  TrilSolve,
  TrilMatVec,
};

const char* op_name(Op op);

// Reverse-mode tape over dense 2-D tensors. Nodes are appended in evaluation
// order, so the tape is topologically sorted by construction.
//
// Binary elementwise ops broadcast any operand dimension of size 1.
class Graph {
 public:
  Var input(Tensor value);
  Var param(const ParamStore& params, const std::string& name);
  // Value copy with no adjoint path back to `v`.
  Var detach(Var v);

  Var matmul(Var a, Var b);
  Var add(Var a, Var b);
  Var sub(Var a, Var b);
  Var mul(Var a, Var b);
  Var neg(Var a);
  Var scale(Var a, double factor);
  Var add_const(Var a, double constant);
  // min(a, ceiling); gradient is zero where the ceiling is active.
  Var min_const(Var a, double ceiling);
  Var exp(Var a);
  Var log(Var a);
  Var tanh(Var a);
  Var relu(Var a);
  // tanh approximation
  Var gelu(Var a);
  Var softplus(Var a);
  Var sigmoid(Var a);
  Var square(Var a);
  Var sum(Var a);
  Var mean(Var a);
  // Per-row sum, r x c -> r x 1.
  Var row_sum(Var a);
  Var select_cols(Var a, std::vector<std::size_t> columns);
  Var slice_cols(Var a, std::size_t begin, std::size_t count);
  Var concat_cols(const std::vector<Var>& parts);
  // Per-row normalization to zero mean and unit variance (no affine part).
  Var layer_norm(Var a, double eps = 1e-5);

  // Batched lower-triangular operators. Row m of `diag` (M x d) holds the
  // diagonal of L_m, row m of `off` (M x d(d-1)/2) its strict lower triangle
  // packed row by row: entry (i, j), j < i, sits at column i(i-1)/2 + j.
  Var tril_solve(Var diag, Var off, Var rhs);   // rows of L_m^{-1} rhs_m
  Var tril_matvec(Var diag, Var off, Var vec);  // rows of L_m vec_m

  const Tensor& value(Var v) const { return nodes_.at(v.id).value; }
  const Tensor& adjoint(Var v) const;
  bool requires_grad(Var v) const { return nodes_.at(v.id).requires_grad; }
  Op op(Var v) const { return nodes_.at(v.id).op; }

  std::size_t size() const noexcept { return nodes_.size(); }
  Var last() const;

  // Accumulates d(output)/d(node) into every node's adjoint. `output` must be
  // 1 x 1. Throws NumericalError if a parameter adjoint is non-finite.
  void backward(Var output);

  // Parameter adjoints after backward(); zero tensors for params on the tape
  // that the output does not depend on.
  GradientMap param_adjoints() const;

 private:
  struct Node {
    Op op = Op::Input;
    std::vector<std::size_t> inputs;
    Tensor value;
    Tensor adjoint;
    Tensor cache;
    std::vector<std::size_t> index;
    std::string name;
    double constant = 0.0;
    bool requires_grad = false;
  };

  Var push(Node node);
  Var unary(Op op, Var a, Tensor value);
  Var binary(Op op, Var a, Var b, Tensor value);
  Tensor& adjoint_slot(std::size_t id);
  void accumulate_reduced(std::size_t id, const Tensor& grad);
  void backward_node(std::size_t id);

  std::vector<Node> nodes_;
};

// d(last node)/d(param) for every parameter in `params`. The last node on
// the tape must be scalar. Parameters absent from the tape get zeros.
GradientMap gradient(Graph& graph, const ParamStore& params);

}  // namespace gklsbi
