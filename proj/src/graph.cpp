#include "gklsbi/graph.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

namespace gklsbi {

namespace {

constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluA = 0.044715;

double softplus_value(double x) {
  return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}

double sigmoid_value(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

std::size_t broadcast_dim(std::size_t a, std::size_t b, const char* what) {
  if (a == b || b == 1) return a;
  if (a == 1) return b;
  throw ShapeError(std::string("cannot broadcast ") + what + " dimensions " + std::to_string(a) +
                   " and " + std::to_string(b));
}

template <typename F>
Tensor broadcast_apply(const Tensor& a, const Tensor& b, F f) {
  if (a.same_shape(b)) {
    Tensor out(a.rows(), a.cols());
    for (std::size_t i = 0; i < a.size(); ++i) out[i] = f(a[i], b[i]);
    return out;
  }
  const std::size_t rows = broadcast_dim(a.rows(), b.rows(), "row");
  const std::size_t cols = broadcast_dim(a.cols(), b.cols(), "column");
  Tensor out(rows, cols);
  for (std::size_t r = 0; r < rows; ++r) {
    const std::size_t ra = a.rows() == 1 ? 0 : r;
    const std::size_t rb = b.rows() == 1 ? 0 : r;
    for (std::size_t c = 0; c < cols; ++c) {
      out(r, c) = f(a(ra, a.cols() == 1 ? 0 : c), b(rb, b.cols() == 1 ? 0 : c));
    }
  }
  return out;
}

// Sum `grad` down to `rows x cols` over broadcast dimensions.
Tensor reduce_to(const Tensor& grad, std::size_t rows, std::size_t cols) {
  if (grad.rows() == rows && grad.cols() == cols) return grad;
  Tensor out(rows, cols);
  for (std::size_t r = 0; r < grad.rows(); ++r) {
    const std::size_t ro = rows == 1 ? 0 : r;
    for (std::size_t c = 0; c < grad.cols(); ++c) {
      out(ro, cols == 1 ? 0 : c) += grad(r, c);
    }
  }
  return out;
}

// Broadcast `t` up to rows x cols.
Tensor expand_to(const Tensor& t, std::size_t rows, std::size_t cols) {
  if (t.rows() == rows && t.cols() == cols) return t;
  Tensor out(rows, cols);
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) {
      out(r, c) = t(t.rows() == 1 ? 0 : r, t.cols() == 1 ? 0 : c);
    }
  }
  return out;
}

template <typename F>
Tensor map(const Tensor& a, F f) {
  Tensor out(a.rows(), a.cols());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = f(a[i]);
  return out;
}

std::size_t tril_dim(const Tensor& diag, const Tensor& off, const Tensor& rhs) {
  const std::size_t d = diag.cols();
  if (off.cols() != d * (d - 1) / 2 || rhs.cols() != d || diag.rows() != rhs.rows() ||
      off.rows() != rhs.rows()) {
    throw ShapeError("triangular operator shape mismatch: diag " + diag.shape_string() +
                     ", off " + off.shape_string() + ", rhs " + rhs.shape_string());
  }
  return d;
}

}  // namespace

const char* op_name(Op op) {
  switch (op) {
    case Op::Input: return "input";
    case Op::Param: return "param";
    case Op::MatMul: return "matmul";
    case Op::Add: return "add";
    case Op::Sub: return "sub";
    case Op::Mul: return "mul";
    case Op::Neg: return "neg";
    case Op::Scale: return "scale";
    case Op::AddConst: return "add_const";
    case Op::MinConst: return "min_const";
    case Op::Exp: return "exp";
    case Op::Log: return "log";
    case Op::Tanh: return "tanh";
    case Op::Relu: return "relu";
    case Op::Gelu: return "gelu";
    case Op::Softplus: return "softplus";
    case Op::Sigmoid: return "sigmoid";
    case Op::Square: return "square";
    case Op::Sum: return "sum";
    case Op::Mean: return "mean";
    case Op::RowSum: return "row_sum";
    case Op::SelectCols: return "select_cols";
    case Op::ConcatCols: return "concat_cols";
    case Op::LayerNorm: return "layer_norm";
    case Op::TrilSolve: return "tril_solve";
    case Op::TrilMatVec: return "tril_matvec";
  }
  return "unknown";
}

Var Graph::push(Node node) {
  nodes_.push_back(std::move(node));
  return Var{nodes_.size() - 1};
}

Var Graph::unary(Op op, Var a, Tensor value) {
  Node n;
  n.op = op;
  n.inputs = {a.id};
  n.value = std::move(value);
  n.requires_grad = nodes_.at(a.id).requires_grad;
  return push(std::move(n));
}

Var Graph::binary(Op op, Var a, Var b, Tensor value) {
  Node n;
  n.op = op;
  n.inputs = {a.id, b.id};
  n.value = std::move(value);
  n.requires_grad = nodes_.at(a.id).requires_grad || nodes_.at(b.id).requires_grad;
  return push(std::move(n));
}

Var Graph::input(Tensor value) {
  Node n;
  n.op = Op::Input;
  n.value = std::move(value);
  return push(std::move(n));
}

Var Graph::param(const ParamStore& params, const std::string& name) {
  Node n;
  n.op = Op::Param;
  n.value = params.get(name);
  n.name = name;
  n.requires_grad = true;
  return push(std::move(n));
}

Var Graph::detach(Var v) { return input(value(v)); }

Var Graph::matmul(Var a, Var b) {
  const Tensor& x = value(a);
  const Tensor& y = value(b);
  if (x.cols() != y.rows()) {
    throw ShapeError("matmul shape mismatch: " + x.shape_string() + " x " + y.shape_string());
  }
  Tensor out(x.rows(), y.cols());
  out.matrix().noalias() = x.matrix() * y.matrix();
  return binary(Op::MatMul, a, b, std::move(out));
}

Var Graph::add(Var a, Var b) {
  return binary(Op::Add, a, b,
                broadcast_apply(value(a), value(b), [](double u, double v) { return u + v; }));
}

Var Graph::sub(Var a, Var b) {
  return binary(Op::Sub, a, b,
                broadcast_apply(value(a), value(b), [](double u, double v) { return u - v; }));
}

Var Graph::mul(Var a, Var b) {
  return binary(Op::Mul, a, b,
                broadcast_apply(value(a), value(b), [](double u, double v) { return u * v; }));
}

Var Graph::neg(Var a) { return unary(Op::Neg, a, map(value(a), [](double u) { return -u; })); }

Var Graph::scale(Var a, double factor) {
  Var v = unary(Op::Scale, a, map(value(a), [factor](double u) { return u * factor; }));
  nodes_[v.id].constant = factor;
  return v;
}

Var Graph::add_const(Var a, double constant) {
  Var v = unary(Op::AddConst, a, map(value(a), [constant](double u) { return u + constant; }));
  nodes_[v.id].constant = constant;
  return v;
}

Var Graph::min_const(Var a, double ceiling) {
  Var v = unary(Op::MinConst, a, map(value(a), [ceiling](double u) { return std::min(u, ceiling); }));
  nodes_[v.id].constant = ceiling;
  return v;
}

Var Graph::exp(Var a) {
  return unary(Op::Exp, a, map(value(a), [](double u) { return std::exp(u); }));
}

Var Graph::log(Var a) {
  return unary(Op::Log, a, map(value(a), [](double u) { return std::log(u); }));
}

Var Graph::tanh(Var a) {
  return unary(Op::Tanh, a, map(value(a), [](double u) { return std::tanh(u); }));
}

Var Graph::relu(Var a) {
  return unary(Op::Relu, a, map(value(a), [](double u) { return u > 0.0 ? u : 0.0; }));
}

Var Graph::gelu(Var a) {
  return unary(Op::Gelu, a, map(value(a), [](double u) {
                 return 0.5 * u * (1.0 + std::tanh(kGeluC * (u + kGeluA * u * u * u)));
               }));
}

Var Graph::softplus(Var a) { return unary(Op::Softplus, a, map(value(a), softplus_value)); }

Var Graph::sigmoid(Var a) { return unary(Op::Sigmoid, a, map(value(a), sigmoid_value)); }

Var Graph::square(Var a) {
  return unary(Op::Square, a, map(value(a), [](double u) { return u * u; }));
}

Var Graph::sum(Var a) { return unary(Op::Sum, a, Tensor::scalar(value(a).matrix().sum())); }

Var Graph::mean(Var a) {
  const Tensor& x = value(a);
  if (x.empty()) throw ShapeError("mean of empty tensor");
  return unary(Op::Mean, a, Tensor::scalar(x.matrix().sum() / static_cast<double>(x.size())));
}

Var Graph::row_sum(Var a) {
  const Tensor& x = value(a);
  Tensor out(x.rows(), 1);
  for (std::size_t r = 0; r < x.rows(); ++r) {
    double s = 0.0;
    for (double u : x.row_span(r)) s += u;
    out[r] = s;
  }
  return unary(Op::RowSum, a, std::move(out));
}

Var Graph::select_cols(Var a, std::vector<std::size_t> columns) {
  const Tensor& x = value(a);
  Tensor out(x.rows(), columns.size());
  for (std::size_t c : columns) {
    if (c >= x.cols()) throw ShapeError("select_cols index out of range for " + x.shape_string());
  }
  for (std::size_t r = 0; r < x.rows(); ++r) {
    for (std::size_t j = 0; j < columns.size(); ++j) out(r, j) = x(r, columns[j]);
  }
  Var v = unary(Op::SelectCols, a, std::move(out));
  nodes_[v.id].index = std::move(columns);
  return v;
}

Var Graph::slice_cols(Var a, std::size_t begin, std::size_t count) {
  std::vector<std::size_t> columns(count);
  for (std::size_t j = 0; j < count; ++j) columns[j] = begin + j;
  return select_cols(a, std::move(columns));
}

Var Graph::concat_cols(const std::vector<Var>& parts) {
  if (parts.empty()) throw ShapeError("concat_cols of nothing");
  const std::size_t rows = value(parts.front()).rows();
  std::size_t cols = 0;
  for (Var p : parts) {
    if (value(p).rows() != rows) throw ShapeError("concat_cols row mismatch");
    cols += value(p).cols();
  }
  Tensor out(rows, cols);
  std::size_t offset = 0;
  Node n;
  n.op = Op::ConcatCols;
  for (Var p : parts) {
    const Tensor& x = value(p);
    for (std::size_t r = 0; r < rows; ++r) {
      std::copy(x.row_span(r).begin(), x.row_span(r).end(),
                out.row_span(r).begin() + static_cast<std::ptrdiff_t>(offset));
    }
    offset += x.cols();
    n.inputs.push_back(p.id);
    n.requires_grad = n.requires_grad || nodes_.at(p.id).requires_grad;
  }
  n.value = std::move(out);
  return push(std::move(n));
}

Var Graph::layer_norm(Var a, double eps) {
  const Tensor& x = value(a);
  Tensor out(x.rows(), x.cols());
  Tensor inv_std(x.rows(), 1);
  const double width = static_cast<double>(x.cols());
  for (std::size_t r = 0; r < x.rows(); ++r) {
    auto row = x.row_span(r);
    double mu = 0.0;
    for (double u : row) mu += u;
    mu /= width;
    double var = 0.0;
    for (double u : row) var += (u - mu) * (u - mu);
    var /= width;
    const double is = 1.0 / std::sqrt(var + eps);
    inv_std[r] = is;
    for (std::size_t c = 0; c < x.cols(); ++c) out(r, c) = (row[c] - mu) * is;
  }
  Var v = unary(Op::LayerNorm, a, std::move(out));
  nodes_[v.id].cache = std::move(inv_std);
  return v;
}

Var Graph::tril_solve(Var diag, Var off, Var rhs) {
  const Tensor& dg = value(diag);
  const Tensor& of = value(off);
  const Tensor& b = value(rhs);
  const std::size_t d = tril_dim(dg, of, b);
  Tensor z(b.rows(), d);
  for (std::size_t m = 0; m < b.rows(); ++m) {
    for (std::size_t i = 0; i < d; ++i) {
      double s = b(m, i);
      const std::size_t base = i * (i - 1) / 2;
      for (std::size_t j = 0; j < i; ++j) s -= of(m, base + j) * z(m, j);
      z(m, i) = s / dg(m, i);
    }
  }
  Node n;
  n.op = Op::TrilSolve;
  n.inputs = {diag.id, off.id, rhs.id};
  n.value = std::move(z);
  n.requires_grad = requires_grad(diag) || requires_grad(off) || requires_grad(rhs);
  return push(std::move(n));
}

Var Graph::tril_matvec(Var diag, Var off, Var vec) {
  const Tensor& dg = value(diag);
  const Tensor& of = value(off);
  const Tensor& v = value(vec);
  const std::size_t d = tril_dim(dg, of, v);
  Tensor y(v.rows(), d);
  for (std::size_t m = 0; m < v.rows(); ++m) {
    for (std::size_t i = 0; i < d; ++i) {
      double s = dg(m, i) * v(m, i);
      const std::size_t base = i * (i - 1) / 2;
      for (std::size_t j = 0; j < i; ++j) s += of(m, base + j) * v(m, j);
      y(m, i) = s;
    }
  }
  Node n;
  n.op = Op::TrilMatVec;
  n.inputs = {diag.id, off.id, vec.id};
  n.value = std::move(y);
  n.requires_grad = requires_grad(diag) || requires_grad(off) || requires_grad(vec);
  return push(std::move(n));
}

const Tensor& Graph::adjoint(Var v) const {
  const Node& n = nodes_.at(v.id);
  if (n.adjoint.empty() && !n.value.empty()) {
    throw std::logic_error("node has no adjoint; call backward() first");
  }
  return n.adjoint;
}

Var Graph::last() const {
  if (nodes_.empty()) throw std::logic_error("empty graph");
  return Var{nodes_.size() - 1};
}

Tensor& Graph::adjoint_slot(std::size_t id) {
  Node& n = nodes_[id];
  if (n.adjoint.empty()) n.adjoint = Tensor(n.value.rows(), n.value.cols());
  return n.adjoint;
}

void Graph::accumulate_reduced(std::size_t id, const Tensor& grad) {
  if (!nodes_[id].requires_grad) return;
  Tensor& slot = adjoint_slot(id);
  if (slot.same_shape(grad)) {
    slot.matrix() += grad.matrix();
  } else {
    slot.matrix() += reduce_to(grad, slot.rows(), slot.cols()).matrix();
  }
}

void Graph::backward(Var output) {
  const Tensor& out = value(output);
  if (out.rows() != 1 || out.cols() != 1) {
    throw ShapeError("backward requires a scalar output, got " + out.shape_string());
  }
  for (auto& n : nodes_) n.adjoint = Tensor();
  adjoint_slot(output.id)[0] = 1.0;
  for (std::size_t id = output.id + 1; id-- > 0;) {
    const Node& n = nodes_[id];
    if (!n.requires_grad || n.adjoint.empty() || n.inputs.empty()) continue;
    backward_node(id);
  }
  for (const auto& n : nodes_) {
    if (n.op == Op::Param && !n.adjoint.empty() && !n.adjoint.all_finite()) {
      throw NumericalError("non-finite gradient for parameter " + n.name);
    }
  }
}

void Graph::backward_node(std::size_t id) {
  const Node& n = nodes_[id];
  const Tensor& g = n.adjoint;
  const Tensor& y = n.value;
  auto in_value = [this, &n](std::size_t k) -> const Tensor& { return nodes_[n.inputs[k]].value; };
  auto wants = [this, &n](std::size_t k) { return nodes_[n.inputs[k]].requires_grad; };

  switch (n.op) {
    case Op::Input:
    case Op::Param:
      return;
    case Op::MatMul: {
      const Tensor& a = in_value(0);
      const Tensor& b = in_value(1);
      if (wants(0)) adjoint_slot(n.inputs[0]).matrix().noalias() += g.matrix() * b.matrix().transpose();
      if (wants(1)) adjoint_slot(n.inputs[1]).matrix().noalias() += a.matrix().transpose() * g.matrix();
      return;
    }
    case Op::Add:
      accumulate_reduced(n.inputs[0], g);
      accumulate_reduced(n.inputs[1], g);
      return;
    case Op::Sub:
      accumulate_reduced(n.inputs[0], g);
      if (wants(1)) accumulate_reduced(n.inputs[1], map(g, [](double u) { return -u; }));
      return;
    case Op::Mul: {
      if (wants(0)) {
        Tensor b = expand_to(in_value(1), g.rows(), g.cols());
        b.matrix().array() *= g.matrix().array();
        accumulate_reduced(n.inputs[0], b);
      }
      if (wants(1)) {
        Tensor a = expand_to(in_value(0), g.rows(), g.cols());
        a.matrix().array() *= g.matrix().array();
        accumulate_reduced(n.inputs[1], a);
      }
      return;
    }
    case Op::Neg:
      adjoint_slot(n.inputs[0]).matrix() -= g.matrix();
      return;
    case Op::Scale:
      adjoint_slot(n.inputs[0]).matrix() += n.constant * g.matrix();
      return;
    case Op::AddConst:
      adjoint_slot(n.inputs[0]).matrix() += g.matrix();
      return;
    default:
      break;
  }

  // Elementwise unary ops with local derivative.
  auto elementwise = [&](auto deriv) {
    const Tensor& x = in_value(0);
    Tensor& slot = adjoint_slot(n.inputs[0]);
    for (std::size_t i = 0; i < g.size(); ++i) slot[i] += g[i] * deriv(x[i], y[i]);
  };

  switch (n.op) {
    case Op::MinConst: {
      const double c = n.constant;
      elementwise([c](double x, double) { return x < c ? 1.0 : 0.0; });
      return;
    }
    case Op::Exp:
      elementwise([](double, double out) { return out; });
      return;
    case Op::Log:
      elementwise([](double x, double) { return 1.0 / x; });
      return;
    case Op::Tanh:
      elementwise([](double, double out) { return 1.0 - out * out; });
      return;
    case Op::Relu:
      elementwise([](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
      return;
    case Op::Gelu:
      elementwise([](double x, double) {
        const double t = std::tanh(kGeluC * (x + kGeluA * x * x * x));
        return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * kGeluC * (1.0 + 3.0 * kGeluA * x * x);
      });
      return;
    case Op::Softplus:
      elementwise([](double x, double) { return sigmoid_value(x); });
      return;
    case Op::Sigmoid:
      elementwise([](double, double out) { return out * (1.0 - out); });
      return;
    case Op::Square:
      elementwise([](double x, double) { return 2.0 * x; });
      return;
    case Op::Sum: {
      adjoint_slot(n.inputs[0]).matrix().array() += g[0];
      return;
    }
    case Op::Mean: {
      Tensor& slot = adjoint_slot(n.inputs[0]);
      slot.matrix().array() += g[0] / static_cast<double>(slot.size());
      return;
    }
    case Op::RowSum: {
      Tensor& slot = adjoint_slot(n.inputs[0]);
      for (std::size_t r = 0; r < slot.rows(); ++r) {
        for (double& u : slot.row_span(r)) u += g[r];
      }
      return;
    }
    case Op::SelectCols: {
      Tensor& slot = adjoint_slot(n.inputs[0]);
      for (std::size_t r = 0; r < g.rows(); ++r) {
        for (std::size_t j = 0; j < n.index.size(); ++j) slot(r, n.index[j]) += g(r, j);
      }
      return;
    }
    case Op::ConcatCols: {
      std::size_t offset = 0;
      for (std::size_t k = 0; k < n.inputs.size(); ++k) {
        const std::size_t width = in_value(k).cols();
        if (wants(k)) {
          Tensor& slot = adjoint_slot(n.inputs[k]);
          for (std::size_t r = 0; r < g.rows(); ++r) {
            for (std::size_t c = 0; c < width; ++c) slot(r, c) += g(r, offset + c);
          }
        }
        offset += width;
      }
      return;
    }
    case Op::LayerNorm: {
      Tensor& slot = adjoint_slot(n.inputs[0]);
      const double width = static_cast<double>(g.cols());
      for (std::size_t r = 0; r < g.rows(); ++r) {
        double mean_g = 0.0;
        double mean_gx = 0.0;
        for (std::size_t c = 0; c < g.cols(); ++c) {
          mean_g += g(r, c);
          mean_gx += g(r, c) * y(r, c);
        }
        mean_g /= width;
        mean_gx /= width;
        const double is = n.cache[r];
        for (std::size_t c = 0; c < g.cols(); ++c) {
          slot(r, c) += is * (g(r, c) - mean_g - y(r, c) * mean_gx);
        }
      }
      return;
    }
    case Op::TrilSolve: {
      // z = L^{-1} b:  gb = L^{-T} gz,  gL_ij = -gb_i z_j (j <= i).
      const Tensor& dg = in_value(0);
      const Tensor& of = in_value(1);
      const std::size_t d = dg.cols();
      Tensor gb(g.rows(), d);
      for (std::size_t m = 0; m < g.rows(); ++m) {
        for (std::size_t i = d; i-- > 0;) {
          double s = g(m, i);
          for (std::size_t k = i + 1; k < d; ++k) s -= of(m, k * (k - 1) / 2 + i) * gb(m, k);
          gb(m, i) = s / dg(m, i);
        }
      }
      if (wants(0)) {
        Tensor& slot = adjoint_slot(n.inputs[0]);
        for (std::size_t m = 0; m < g.rows(); ++m) {
          for (std::size_t i = 0; i < d; ++i) slot(m, i) -= gb(m, i) * y(m, i);
        }
      }
      if (wants(1)) {
        Tensor& slot = adjoint_slot(n.inputs[1]);
        for (std::size_t m = 0; m < g.rows(); ++m) {
          for (std::size_t i = 1; i < d; ++i) {
            const std::size_t base = i * (i - 1) / 2;
            for (std::size_t j = 0; j < i; ++j) slot(m, base + j) -= gb(m, i) * y(m, j);
          }
        }
      }
      if (wants(2)) adjoint_slot(n.inputs[2]).matrix() += gb.matrix();
      return;
    }
    case Op::TrilMatVec: {
      // y = L v:  gv = L^T gy,  gL_ij = gy_i v_j (j <= i).
      const Tensor& dg = in_value(0);
      const Tensor& of = in_value(1);
      const Tensor& v = in_value(2);
      const std::size_t d = dg.cols();
      if (wants(0)) {
        Tensor& slot = adjoint_slot(n.inputs[0]);
        for (std::size_t m = 0; m < g.rows(); ++m) {
          for (std::size_t i = 0; i < d; ++i) slot(m, i) += g(m, i) * v(m, i);
        }
      }
      if (wants(1)) {
        Tensor& slot = adjoint_slot(n.inputs[1]);
        for (std::size_t m = 0; m < g.rows(); ++m) {
          for (std::size_t i = 1; i < d; ++i) {
            const std::size_t base = i * (i - 1) / 2;
            for (std::size_t j = 0; j < i; ++j) slot(m, base + j) += g(m, i) * v(m, j);
          }
        }
      }
      if (wants(2)) {
        Tensor& slot = adjoint_slot(n.inputs[2]);
        for (std::size_t m = 0; m < g.rows(); ++m) {
          for (std::size_t j = 0; j < d; ++j) {
            double s = dg(m, j) * g(m, j);
            for (std::size_t i = j + 1; i < d; ++i) s += of(m, i * (i - 1) / 2 + j) * g(m, i);
            slot(m, j) += s;
          }
        }
      }
      return;
    }
    default:
      throw std::logic_error(std::string("no backward rule for op ") + op_name(n.op));
  }
}

GradientMap Graph::param_adjoints() const {
  GradientMap out;
  for (const auto& n : nodes_) {
    if (n.op != Op::Param) continue;
    auto it = out.find(n.name);
    const Tensor contribution = n.adjoint.empty() ? Tensor(n.value.rows(), n.value.cols()) : n.adjoint;
    if (it == out.end()) {
      out.emplace(n.name, contribution);
    } else {
      it->second.matrix() += contribution.matrix();
    }
  }
  return out;
}

GradientMap gradient(Graph& graph, const ParamStore& params) {
  graph.backward(graph.last());
  GradientMap on_tape = graph.param_adjoints();
  GradientMap out;
  for (const auto& [name, value] : params.tensors()) {
    auto it = on_tape.find(name);
    out.emplace(name, it != on_tape.end() ? std::move(it->second) : Tensor(value.rows(), value.cols()));
  }
  return out;
}

}  // namespace gklsbi
