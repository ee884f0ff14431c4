#include "fbsdeco/tape.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

#include "fbsdeco/errors.hpp"

namespace fbsdeco {

const char* op_name(Op op) {
  switch (op) {
    case Op::kConstant: return "constant";
    case Op::kParameter: return "parameter";
    case Op::kAdd: return "add";
    case Op::kSub: return "sub";
    case Op::kMul: return "mul";
    case Op::kScale: return "scale";
    case Op::kAddScalar: return "add_scalar";
    case Op::kMatmul: return "matmul";
    case Op::kMatmulNT: return "matmul_nt";
    case Op::kAddRows: return "add_rows";
    case Op::kBmv: return "bmv";
    case Op::kSquare: return "square";
    case Op::kExp: return "exp";
    case Op::kRelu: return "relu";
    case Op::kSoftmax: return "softmax";
    case Op::kSumAll: return "sum_all";
    case Op::kMeanAll: return "mean_all";
    case Op::kRowSum: return "row_sum";
    case Op::kConcatCols: return "concat_cols";
    case Op::kSliceCols: return "slice_cols";
    case Op::kReshape: return "reshape";
    case Op::kRepeatRows: return "repeat_rows";
    case Op::kBatchNorm: return "batchnorm";
  }
  return "?";
}

namespace {

[[noreturn]] void shape_fail(Op op, const std::string& detail) {
  throw ShapeError(std::string(op_name(op)) + ": " + detail);
}

bool is_matrix(const Tensor& t) { return t.rank() == 2; }

// C (M x q) += A (M x p) * B (p x q), fixed i-k-j order.
void gemm_ikj(const double* a, const double* b, double* c, std::size_t m,
              std::size_t p, std::size_t q) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* ai = a + i * p;
    double* ci = c + i * q;
    for (std::size_t k = 0; k < p; ++k) {
      const double aik = ai[k];
      if (aik == 0.0) continue;
      const double* bk = b + k * q;
      for (std::size_t j = 0; j < q; ++j) ci[j] += aik * bk[j];
    }
  }
}

// dW (q x p) += sum_i dY[i,:]^T X[i,:], fixed i-j-k order.
void gemm_acc_outer(const double* dy, const double* x, double* dw,
                    std::size_t m, std::size_t p, std::size_t q) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* dyi = dy + i * q;
    const double* xi = x + i * p;
    for (std::size_t j = 0; j < q; ++j) {
      const double d = dyi[j];
      if (d == 0.0) continue;
      double* dwj = dw + j * p;
      for (std::size_t k = 0; k < p; ++k) dwj[k] += d * xi[k];
    }
  }
}

Tensor transposed(const Tensor& w) {
  const std::size_t r = w.dim(0), c = w.dim(1);
  Tensor t = Tensor::zeros({c, r});
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) t[j * r + i] = w[i * c + j];
  return t;
}

std::size_t last_dim(const Tensor& t) {
  return t.rank() == 0 ? 1 : t.dim(t.rank() - 1);
}

bool col_broadcastable(const Tensor& a, const Tensor& b) {
  return a.rank() == 2 && b.rank() == 2 && a.dim(0) == b.dim(0) &&
         a.dim(1) == 1 && b.dim(1) >= 1;
}

}  // namespace

Tape::Tape(Precision precision, bool validate)
    : precision_(precision), validate_(validate) {}

void Tape::finalize(Tensor& t) const {
  if (precision_ == Precision::f32) t.round_to_f32();
}

NodeId Tape::constant(Tensor v) {
  Node n;
  n.op = Op::kConstant;
  n.value = std::move(v);
  finalize(n.value);
  nodes_.push_back(std::move(n));
  return static_cast<NodeId>(nodes_.size() - 1);
}

NodeId Tape::parameter(Tensor v) {
  Node n;
  n.op = Op::kParameter;
  n.value = std::move(v);
  finalize(n.value);
  nodes_.push_back(std::move(n));
  NodeId id = static_cast<NodeId>(nodes_.size() - 1);
  params_.push_back(id);
  return id;
}

NodeId Tape::batchnorm_train(NodeId x, NodeId gamma, NodeId beta, double eps) {
  return record(Op::kBatchNorm, {x, gamma, beta}, eps, 1);
}

NodeId Tape::batchnorm_eval(NodeId x, NodeId gamma, NodeId beta, double eps,
                            const Tensor& run_mean, const Tensor& run_var) {
  const Tensor& xv = value(x);
  if (xv.rank() != 2) shape_fail(Op::kBatchNorm, "input must be (batch x q)");
  const std::size_t q = xv.dim(1);
  if (run_mean.numel() != q || run_var.numel() != q)
    shape_fail(Op::kBatchNorm, "running stats do not match feature width");
  Node n;
  n.op = Op::kBatchNorm;
  n.in = {x, gamma, beta};
  n.alpha = eps;
  n.a0 = 0;
  Tensor invstd = Tensor::zeros({q});
  for (std::size_t j = 0; j < q; ++j)
    invstd[j] = 1.0 / std::sqrt(run_var[j] + eps);
  n.aux.push_back(run_mean);
  n.aux.push_back(std::move(invstd));
  n.value = eval_node(n, &n.aux);
  finalize(n.value);
  if (validate_ && !n.value.all_finite()) {
    throw DivergenceError("non-finite value produced by batchnorm");
  }
  nodes_.push_back(std::move(n));
  return static_cast<NodeId>(nodes_.size() - 1);
}

namespace {
std::size_t op_arity(Op op) {
  switch (op) {
    case Op::kConstant:
    case Op::kParameter:
      return 0;
    case Op::kScale:
    case Op::kAddScalar:
    case Op::kSquare:
    case Op::kExp:
    case Op::kRelu:
    case Op::kSoftmax:
    case Op::kSumAll:
    case Op::kMeanAll:
    case Op::kRowSum:
    case Op::kSliceCols:
    case Op::kReshape:
    case Op::kRepeatRows:
      return 1;
    case Op::kBatchNorm:
      return 3;
    default:
      return 2;
  }
}
}  // namespace

NodeId Tape::record(Op op, const std::vector<NodeId>& inputs, double alpha,
                    std::uint32_t a0, std::uint32_t a1,
                    std::vector<std::size_t> reshape_to) {
  if (inputs.size() != op_arity(op)) {
    throw ContractError(std::string("record: ") + op_name(op) + " expects " +
                        std::to_string(op_arity(op)) + " inputs");
  }
  Node n;
  n.op = op;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    if (inputs[i] >= nodes_.size())
      throw ContractError("record: input id not on the tape");
    n.in[i] = inputs[i];
  }
  n.alpha = alpha;
  n.a0 = a0;
  n.a1 = a1;
  if (op == Op::kReshape) {
    n.aux.emplace_back(Tensor::zeros(reshape_to));  // carries target shape only
  }
  n.value = eval_node(n, &n.aux);
  finalize(n.value);
  if (validate_ && !n.value.all_finite()) {
    throw DivergenceError(std::string("non-finite value produced by ") +
                          op_name(op));
  }
  nodes_.push_back(std::move(n));
  return static_cast<NodeId>(nodes_.size() - 1);
}

Tensor Tape::eval_node(const Node& n, std::vector<Tensor>* aux) const {
  auto in = [&](int i) -> const Tensor& { return nodes_[n.in[i]].value; };
  switch (n.op) {
    case Op::kConstant:
    case Op::kParameter:
      return n.value;

    case Op::kAdd: {
      const Tensor& a = in(0);
      const Tensor& b = in(1);
      if (a.same_shape(b)) {
        Tensor out = a;
        for (std::size_t i = 0; i < out.numel(); ++i) out[i] += b[i];
        return out;
      }
      if (col_broadcastable(a, b)) {
        Tensor out = b;
        const std::size_t m = b.dim(0), q = b.dim(1);
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < q; ++j) out[i * q + j] += a[i];
        return out;
      }
      if (col_broadcastable(b, a)) {
        Tensor out = a;
        const std::size_t m = a.dim(0), q = a.dim(1);
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < q; ++j) out[i * q + j] += b[i];
        return out;
      }
      shape_fail(n.op, "operand shapes incompatible");
    }

    case Op::kSub: {
      const Tensor& a = in(0);
      const Tensor& b = in(1);
      if (!a.same_shape(b)) shape_fail(n.op, "operand shapes differ");
      Tensor out = a;
      for (std::size_t i = 0; i < out.numel(); ++i) out[i] -= b[i];
      return out;
    }

    case Op::kMul: {
      const Tensor& a = in(0);
      const Tensor& b = in(1);
      if (a.same_shape(b)) {
        Tensor out = a;
        for (std::size_t i = 0; i < out.numel(); ++i) out[i] *= b[i];
        return out;
      }
      if (col_broadcastable(a, b)) {
        Tensor out = b;
        const std::size_t m = b.dim(0), q = b.dim(1);
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < q; ++j) out[i * q + j] *= a[i];
        return out;
      }
      if (col_broadcastable(b, a)) {
        Tensor out = a;
        const std::size_t m = a.dim(0), q = a.dim(1);
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < q; ++j) out[i * q + j] *= b[i];
        return out;
      }
      shape_fail(n.op, "operand shapes incompatible");
    }

    case Op::kScale: {
      Tensor out = in(0);
      for (std::size_t i = 0; i < out.numel(); ++i) out[i] *= n.alpha;
      return out;
    }

    case Op::kAddScalar: {
      Tensor out = in(0);
      for (std::size_t i = 0; i < out.numel(); ++i) out[i] += n.alpha;
      return out;
    }

    case Op::kMatmul: {
      const Tensor& a = in(0);
      const Tensor& b = in(1);
      if (is_matrix(a) && b.rank() == 1) {
        if (a.dim(1) != b.dim(0))
          shape_fail(n.op, "matrix-vector inner dimensions differ");
        const std::size_t r = a.dim(0), s = a.dim(1);
        Tensor out = Tensor::zeros({r});
        for (std::size_t i = 0; i < r; ++i) {
          double acc = 0.0;
          for (std::size_t k = 0; k < s; ++k) acc += a[i * s + k] * b[k];
          out[i] = acc;
        }
        return out;
      }
      if (is_matrix(a) && is_matrix(b)) {
        if (a.dim(1) != b.dim(0))
          shape_fail(n.op, "matrix-matrix inner dimensions differ");
        const std::size_t m = a.dim(0), p = a.dim(1), q = b.dim(1);
        Tensor out = Tensor::zeros({m, q});
        gemm_ikj(a.data(), b.data(), out.data(), m, p, q);
        return out;
      }
      shape_fail(n.op, "expects (r x s)(s) or (M x p)(p x q)");
    }

    case Op::kMatmulNT: {
      const Tensor& x = in(0);
      const Tensor& w = in(1);
      if (!is_matrix(x) || !is_matrix(w) || x.dim(1) != w.dim(1))
        shape_fail(n.op, "expects (M x p)(q x p)");
      const std::size_t m = x.dim(0), p = x.dim(1), q = w.dim(0);
      Tensor wt = transposed(w);
      Tensor out = Tensor::zeros({m, q});
      gemm_ikj(x.data(), wt.data(), out.data(), m, p, q);
      return out;
    }

    case Op::kAddRows: {
      const Tensor& x = in(0);
      const Tensor& b = in(1);
      if (!is_matrix(x) || b.rank() != 1 || b.dim(0) != x.dim(1))
        shape_fail(n.op, "expects (M x q) + (q)");
      Tensor out = x;
      const std::size_t m = x.dim(0), q = x.dim(1);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < q; ++j) out[i * q + j] += b[j];
      return out;
    }

    case Op::kBmv: {
      const Tensor& a = in(0);
      const Tensor& v = in(1);
      if (a.rank() != 3 || v.rank() != 2 || a.dim(0) != v.dim(0) ||
          a.dim(2) != v.dim(1))
        shape_fail(n.op, "expects (M x r x c)(M x c)");
      const std::size_t m = a.dim(0), r = a.dim(1), c = a.dim(2);
      Tensor out = Tensor::zeros({m, r});
      for (std::size_t s = 0; s < m; ++s) {
        const double* as = a.data() + s * r * c;
        const double* vs = v.data() + s * c;
        double* os = out.data() + s * r;
        for (std::size_t i = 0; i < r; ++i) {
          double acc = 0.0;
          for (std::size_t k = 0; k < c; ++k) acc += as[i * c + k] * vs[k];
          os[i] = acc;
        }
      }
      return out;
    }

    case Op::kSquare: {
      Tensor out = in(0);
      for (std::size_t i = 0; i < out.numel(); ++i) out[i] *= out[i];
      return out;
    }

    case Op::kExp: {
      Tensor out = in(0);
      for (std::size_t i = 0; i < out.numel(); ++i) out[i] = std::exp(out[i]);
      return out;
    }

    case Op::kRelu: {
      Tensor out = in(0);
      for (std::size_t i = 0; i < out.numel(); ++i)
        out[i] = out[i] > 0.0 ? out[i] : 0.0;
      return out;
    }

    case Op::kSoftmax: {
      const Tensor& x = in(0);
      if (x.rank() == 0) shape_fail(n.op, "needs at least rank 1");
      const std::size_t q = last_dim(x);
      const std::size_t rows = x.numel() / q;
      Tensor out = x;
      for (std::size_t i = 0; i < rows; ++i) {
        double* row = out.data() + i * q;
        double mx = row[0];
        for (std::size_t j = 1; j < q; ++j) mx = std::max(mx, row[j]);
        double sum = 0.0;
        for (std::size_t j = 0; j < q; ++j) {
          row[j] = std::exp(row[j] - mx);
          sum += row[j];
        }
        for (std::size_t j = 0; j < q; ++j) row[j] /= sum;
      }
      return out;
    }

    case Op::kSumAll: {
      const Tensor& x = in(0);
      double acc = 0.0;
      for (std::size_t i = 0; i < x.numel(); ++i) acc += x[i];
      return Tensor::scalar(acc);
    }

    case Op::kMeanAll: {
      const Tensor& x = in(0);
      if (x.numel() == 0) shape_fail(n.op, "empty tensor");
      double acc = 0.0;
      for (std::size_t i = 0; i < x.numel(); ++i) acc += x[i];
      return Tensor::scalar(acc / static_cast<double>(x.numel()));
    }

    case Op::kRowSum: {
      const Tensor& x = in(0);
      if (!is_matrix(x)) shape_fail(n.op, "expects (M x n)");
      const std::size_t m = x.dim(0), q = x.dim(1);
      Tensor out = Tensor::zeros({m});
      for (std::size_t i = 0; i < m; ++i) {
        double acc = 0.0;
        for (std::size_t j = 0; j < q; ++j) acc += x[i * q + j];
        out[i] = acc;
      }
      return out;
    }

    case Op::kConcatCols: {
      const Tensor& a = in(0);
      const Tensor& b = in(1);
      if (!is_matrix(a) || !is_matrix(b) || a.dim(0) != b.dim(0))
        shape_fail(n.op, "expects (M x a)(M x b)");
      const std::size_t m = a.dim(0), qa = a.dim(1), qb = b.dim(1);
      Tensor out = Tensor::zeros({m, qa + qb});
      for (std::size_t i = 0; i < m; ++i) {
        std::memcpy(out.data() + i * (qa + qb), a.data() + i * qa, qa * 8);
        std::memcpy(out.data() + i * (qa + qb) + qa, b.data() + i * qb, qb * 8);
      }
      return out;
    }

    case Op::kSliceCols: {
      const Tensor& x = in(0);
      if (!is_matrix(x) || n.a0 >= n.a1 || n.a1 > x.dim(1))
        shape_fail(n.op, "bad column range");
      const std::size_t m = x.dim(0), q = x.dim(1), w = n.a1 - n.a0;
      Tensor out = Tensor::zeros({m, w});
      for (std::size_t i = 0; i < m; ++i)
        std::memcpy(out.data() + i * w, x.data() + i * q + n.a0, w * 8);
      return out;
    }

    case Op::kReshape: {
      const Tensor& x = in(0);
      const std::vector<std::size_t>& target = n.aux[0].shape();
      if (shape_numel(target) != x.numel())
        shape_fail(n.op, "element count changes");
      Tensor out = x;
      return Tensor::from(target, std::vector<double>(out.data(),
                                                      out.data() + out.numel()));
    }

    case Op::kRepeatRows: {
      const Tensor& x = in(0);
      std::size_t q = 0;
      if (x.rank() == 1) q = x.dim(0);
      else if (x.rank() == 2 && x.dim(0) == 1) q = x.dim(1);
      else shape_fail(n.op, "expects (q) or (1 x q)");
      const std::size_t m = n.a0;
      if (m == 0) shape_fail(n.op, "repeat count must be positive");
      Tensor out = Tensor::zeros({m, q});
      for (std::size_t i = 0; i < m; ++i)
        std::memcpy(out.data() + i * q, x.data(), q * 8);
      return out;
    }

    case Op::kBatchNorm: {
      const Tensor& x = in(0);
      const Tensor& gamma = in(1);
      const Tensor& beta = in(2);
      if (!is_matrix(x)) shape_fail(n.op, "input must be (batch x q)");
      const std::size_t m = x.dim(0), q = x.dim(1);
      if (gamma.numel() != q || beta.numel() != q)
        shape_fail(n.op, "scale/shift width mismatch");
      const double eps = n.alpha;
      Tensor mean, invstd, var;
      const bool train = n.a0 == 1;
      if (train) {
        if (m < 2)
          throw ContractError("batchnorm: train mode needs batch >= 2");
        mean = Tensor::zeros({q});
        invstd = Tensor::zeros({q});
        var = Tensor::zeros({q});
        for (std::size_t j = 0; j < q; ++j) {
          double s = 0.0;
          for (std::size_t i = 0; i < m; ++i) s += x[i * q + j];
          mean[j] = s / static_cast<double>(m);
        }
        for (std::size_t j = 0; j < q; ++j) {
          double s = 0.0;
          for (std::size_t i = 0; i < m; ++i) {
            const double d = x[i * q + j] - mean[j];
            s += d * d;
          }
          var[j] = s / static_cast<double>(m);  // population variance
          invstd[j] = 1.0 / std::sqrt(var[j] + eps);
        }
      } else {
        // eval stats were fixed at record time; replay keeps them
        mean = (*aux)[0];
        invstd = (*aux)[1];
      }
      Tensor xhat = Tensor::zeros({m, q});
      Tensor out = Tensor::zeros({m, q});
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < q; ++j) {
          const double h = (x[i * q + j] - mean[j]) * invstd[j];
          xhat[i * q + j] = h;
          out[i * q + j] = gamma[j] * h + beta[j];
        }
      aux->clear();
      aux->push_back(std::move(mean));
      aux->push_back(std::move(invstd));
      aux->push_back(std::move(xhat));
      if (train) aux->push_back(std::move(var));
      return out;
    }
  }
  throw ContractError("eval_node: unhandled op");
}

void Tape::replay() {
  for (Node& n : nodes_) {
    if (n.op == Op::kConstant || n.op == Op::kParameter) continue;
    std::vector<Tensor> aux = n.aux;
    if (n.op == Op::kReshape) aux = n.aux;  // target shape carrier
    Tensor v = eval_node(n, &aux);
    finalize(v);
    n.value = std::move(v);
    n.aux = std::move(aux);
  }
}

std::unordered_map<NodeId, Tensor> Tape::backward(NodeId root) const {
  std::vector<bool> active(params_.size(), true);
  return backward(root, active);
}

std::unordered_map<NodeId, Tensor> Tape::backward(
    NodeId root, const std::vector<bool>& active) const {
  if (root >= nodes_.size()) throw ContractError("backward: unknown root");
  if (nodes_[root].value.numel() != 1)
    throw ContractError("backward: root must be scalar-valued");
  if (active.size() != params_.size())
    throw ContractError("backward: active mask size mismatch");

  // needs[i]: some active parameter is reachable below node i
  std::vector<char> needs(nodes_.size(), 0);
  {
    std::vector<char> is_active_param(nodes_.size(), 0);
    for (std::size_t p = 0; p < params_.size(); ++p)
      if (active[p]) is_active_param[params_[p]] = 1;
    for (std::size_t i = 0; i < nodes_.size(); ++i) {
      const Node& n = nodes_[i];
      if (n.op == Op::kParameter) {
        needs[i] = is_active_param[i];
      } else if (n.op != Op::kConstant) {
        for (NodeId in : n.in)
          if (in != kNoNode && needs[in]) { needs[i] = 1; break; }
      }
    }
  }

  std::vector<Tensor> adj(nodes_.size());
  std::vector<char> has(nodes_.size(), 0);
  auto ensure = [&](NodeId id) -> Tensor& {
    if (!has[id]) {
      adj[id] = Tensor::zeros(nodes_[id].value.shape());
      has[id] = 1;
    }
    return adj[id];
  };
  ensure(root).fill(1.0);

  for (std::uint32_t id = root + 1; id-- > 0;) {
    if (!has[id] || !needs[id]) continue;
    const Node& n = nodes_[id];
    if (n.op == Op::kConstant || n.op == Op::kParameter) continue;
    if (precision_ == Precision::f32) adj[id].round_to_f32();
    const Tensor& dy = adj[id];
    auto want = [&](int i) {
      return n.in[i] != kNoNode && needs[n.in[i]];
    };
    auto inv = [&](int i) -> const Tensor& { return nodes_[n.in[i]].value; };

    switch (n.op) {
      case Op::kConstant:
      case Op::kParameter:
        break;

      case Op::kAdd: {
        for (int s = 0; s < 2; ++s) {
          if (!want(s)) continue;
          Tensor& da = ensure(n.in[s]);
          if (da.same_shape(dy)) {
            for (std::size_t i = 0; i < dy.numel(); ++i) da[i] += dy[i];
          } else {
            // broadcast side: (M x 1) receiving from (M x q)
            const std::size_t m = dy.dim(0), q = dy.dim(1);
            for (std::size_t i = 0; i < m; ++i) {
              double acc = 0.0;
              for (std::size_t j = 0; j < q; ++j) acc += dy[i * q + j];
              da[i] += acc;
            }
          }
        }
        break;
      }

      case Op::kSub: {
        if (want(0)) {
          Tensor& da = ensure(n.in[0]);
          for (std::size_t i = 0; i < dy.numel(); ++i) da[i] += dy[i];
        }
        if (want(1)) {
          Tensor& db = ensure(n.in[1]);
          for (std::size_t i = 0; i < dy.numel(); ++i) db[i] -= dy[i];
        }
        break;
      }

      case Op::kMul: {
        const Tensor& a = inv(0);
        const Tensor& b = inv(1);
        if (a.same_shape(b)) {
          if (want(0)) {
            Tensor& da = ensure(n.in[0]);
            for (std::size_t i = 0; i < dy.numel(); ++i) da[i] += dy[i] * b[i];
          }
          if (want(1)) {
            Tensor& db = ensure(n.in[1]);
            for (std::size_t i = 0; i < dy.numel(); ++i) db[i] += dy[i] * a[i];
          }
        } else {
          const bool a_is_col = col_broadcastable(a, b);
          const Tensor& col = a_is_col ? a : b;
          const Tensor& full = a_is_col ? b : a;
          const NodeId col_id = a_is_col ? n.in[0] : n.in[1];
          const NodeId full_id = a_is_col ? n.in[1] : n.in[0];
          const std::size_t m = full.dim(0), q = full.dim(1);
          if (col_id != kNoNode && needs[col_id]) {
            Tensor& dc = ensure(col_id);
            for (std::size_t i = 0; i < m; ++i) {
              double acc = 0.0;
              for (std::size_t j = 0; j < q; ++j)
                acc += dy[i * q + j] * full[i * q + j];
              dc[i] += acc;
            }
          }
          if (full_id != kNoNode && needs[full_id]) {
            Tensor& df = ensure(full_id);
            for (std::size_t i = 0; i < m; ++i)
              for (std::size_t j = 0; j < q; ++j)
                df[i * q + j] += dy[i * q + j] * col[i];
          }
        }
        break;
      }

      case Op::kScale: {
        if (want(0)) {
          Tensor& da = ensure(n.in[0]);
          for (std::size_t i = 0; i < dy.numel(); ++i) da[i] += n.alpha * dy[i];
        }
        break;
      }

      case Op::kAddScalar: {
        if (want(0)) {
          Tensor& da = ensure(n.in[0]);
          for (std::size_t i = 0; i < dy.numel(); ++i) da[i] += dy[i];
        }
        break;
      }

      case Op::kMatmul: {
        const Tensor& a = inv(0);
        const Tensor& b = inv(1);
        if (b.rank() == 1) {
          const std::size_t r = a.dim(0), s = a.dim(1);
          if (want(0)) {
            Tensor& da = ensure(n.in[0]);
            for (std::size_t i = 0; i < r; ++i)
              for (std::size_t k = 0; k < s; ++k) da[i * s + k] += dy[i] * b[k];
          }
          if (want(1)) {
            Tensor& db = ensure(n.in[1]);
            for (std::size_t i = 0; i < r; ++i)
              for (std::size_t k = 0; k < s; ++k)
                db[k] += dy[i] * a[i * s + k];
          }
        } else {
          const std::size_t m = a.dim(0), p = a.dim(1), q = b.dim(1);
          if (want(0)) {
            Tensor bt = transposed(b);
            gemm_ikj(dy.data(), bt.data(), ensure(n.in[0]).data(), m, q, p);
          }
          if (want(1)) {
            // dB (p x q) += A^T dY, fixed i-k-j order
            Tensor& db = ensure(n.in[1]);
            for (std::size_t i = 0; i < m; ++i) {
              const double* ai = a.data() + i * p;
              const double* di = dy.data() + i * q;
              for (std::size_t k = 0; k < p; ++k) {
                const double aik = ai[k];
                if (aik == 0.0) continue;
                double* dbk = db.data() + k * q;
                for (std::size_t j = 0; j < q; ++j) dbk[j] += aik * di[j];
              }
            }
          }
        }
        break;
      }

      case Op::kMatmulNT: {
        const Tensor& x = inv(0);
        const Tensor& w = inv(1);
        const std::size_t m = x.dim(0), p = x.dim(1), q = w.dim(0);
        if (want(0))
          gemm_ikj(dy.data(), w.data(), ensure(n.in[0]).data(), m, q, p);
        if (want(1))
          gemm_acc_outer(dy.data(), x.data(), ensure(n.in[1]).data(), m, p, q);
        break;
      }

      case Op::kAddRows: {
        const std::size_t m = dy.dim(0), q = dy.dim(1);
        if (want(0)) {
          Tensor& dx = ensure(n.in[0]);
          for (std::size_t i = 0; i < dy.numel(); ++i) dx[i] += dy[i];
        }
        if (want(1)) {
          Tensor& db = ensure(n.in[1]);
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < q; ++j) db[j] += dy[i * q + j];
        }
        break;
      }

      case Op::kBmv: {
        const Tensor& a = inv(0);
        const Tensor& v = inv(1);
        const std::size_t m = a.dim(0), r = a.dim(1), c = a.dim(2);
        if (want(0)) {
          Tensor& da = ensure(n.in[0]);
          for (std::size_t s = 0; s < m; ++s)
            for (std::size_t i = 0; i < r; ++i) {
              const double d = dy[s * r + i];
              if (d == 0.0) continue;
              for (std::size_t k = 0; k < c; ++k)
                da[(s * r + i) * c + k] += d * v[s * c + k];
            }
        }
        if (want(1)) {
          Tensor& dv = ensure(n.in[1]);
          for (std::size_t s = 0; s < m; ++s)
            for (std::size_t i = 0; i < r; ++i) {
              const double d = dy[s * r + i];
              if (d == 0.0) continue;
              for (std::size_t k = 0; k < c; ++k)
                dv[s * c + k] += d * a[(s * r + i) * c + k];
            }
        }
        break;
      }

      case Op::kSquare: {
        if (want(0)) {
          const Tensor& x = inv(0);
          Tensor& dx = ensure(n.in[0]);
          for (std::size_t i = 0; i < dy.numel(); ++i)
            dx[i] += 2.0 * x[i] * dy[i];
        }
        break;
      }

      case Op::kExp: {
        if (want(0)) {
          Tensor& dx = ensure(n.in[0]);
          for (std::size_t i = 0; i < dy.numel(); ++i)
            dx[i] += n.value[i] * dy[i];
        }
        break;
      }

      case Op::kRelu: {
        if (want(0)) {
          const Tensor& x = inv(0);
          Tensor& dx = ensure(n.in[0]);
          for (std::size_t i = 0; i < dy.numel(); ++i)
            if (x[i] > 0.0) dx[i] += dy[i];
        }
        break;
      }

      case Op::kSoftmax: {
        if (want(0)) {
          const Tensor& y = n.value;
          const std::size_t q = last_dim(y);
          const std::size_t rows = y.numel() / q;
          Tensor& dx = ensure(n.in[0]);
          for (std::size_t i = 0; i < rows; ++i) {
            const double* yr = y.data() + i * q;
            const double* dr = dy.data() + i * q;
            double dot = 0.0;
            for (std::size_t j = 0; j < q; ++j) dot += dr[j] * yr[j];
            for (std::size_t j = 0; j < q; ++j)
              dx[i * q + j] += yr[j] * (dr[j] - dot);
          }
        }
        break;
      }

      case Op::kSumAll: {
        if (want(0)) {
          Tensor& dx = ensure(n.in[0]);
          const double d = dy[0];
          for (std::size_t i = 0; i < dx.numel(); ++i) dx[i] += d;
        }
        break;
      }

      case Op::kMeanAll: {
        if (want(0)) {
          Tensor& dx = ensure(n.in[0]);
          const double d = dy[0] / static_cast<double>(dx.numel());
          for (std::size_t i = 0; i < dx.numel(); ++i) dx[i] += d;
        }
        break;
      }

      case Op::kRowSum: {
        if (want(0)) {
          Tensor& dx = ensure(n.in[0]);
          const std::size_t m = dx.dim(0), q = dx.dim(1);
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < q; ++j) dx[i * q + j] += dy[i];
        }
        break;
      }

      case Op::kConcatCols: {
        const std::size_t qa = inv(0).dim(1), qb = inv(1).dim(1);
        const std::size_t m = dy.dim(0);
        if (want(0)) {
          Tensor& da = ensure(n.in[0]);
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < qa; ++j)
              da[i * qa + j] += dy[i * (qa + qb) + j];
        }
        if (want(1)) {
          Tensor& db = ensure(n.in[1]);
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < qb; ++j)
              db[i * qb + j] += dy[i * (qa + qb) + qa + j];
        }
        break;
      }

      case Op::kSliceCols: {
        if (want(0)) {
          Tensor& dx = ensure(n.in[0]);
          const std::size_t q = dx.dim(1);
          const std::size_t m = dy.dim(0), w = dy.dim(1);
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < w; ++j)
              dx[i * q + n.a0 + j] += dy[i * w + j];
        }
        break;
      }

      case Op::kReshape: {
        if (want(0)) {
          Tensor& dx = ensure(n.in[0]);
          for (std::size_t i = 0; i < dy.numel(); ++i) dx[i] += dy[i];
        }
        break;
      }

      case Op::kRepeatRows: {
        if (want(0)) {
          Tensor& dx = ensure(n.in[0]);
          const std::size_t m = dy.dim(0), q = dy.dim(1);
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < q; ++j) dx[j] += dy[i * q + j];
        }
        break;
      }

      case Op::kBatchNorm: {
        const Tensor& x = inv(0);
        const Tensor& gamma = inv(1);
        const std::size_t m = x.dim(0), q = x.dim(1);
        const Tensor& invstd = n.aux[1];
        const Tensor& xhat = n.aux[2];
        // column sums of dy and dy*xhat, fixed row order
        Tensor s1 = Tensor::zeros({q});
        Tensor s2 = Tensor::zeros({q});
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < q; ++j) {
            s1[j] += dy[i * q + j];
            s2[j] += dy[i * q + j] * xhat[i * q + j];
          }
        if (want(2)) {
          Tensor& dbeta = ensure(n.in[2]);
          for (std::size_t j = 0; j < q; ++j) dbeta[j] += s1[j];
        }
        if (want(1)) {
          Tensor& dgamma = ensure(n.in[1]);
          for (std::size_t j = 0; j < q; ++j) dgamma[j] += s2[j];
        }
        if (want(0)) {
          Tensor& dx = ensure(n.in[0]);
          if (n.a0 == 1) {
            const double im = 1.0 / static_cast<double>(m);
            for (std::size_t i = 0; i < m; ++i)
              for (std::size_t j = 0; j < q; ++j)
                dx[i * q + j] += gamma[j] * invstd[j] *
                                 (dy[i * q + j] - s1[j] * im -
                                  xhat[i * q + j] * s2[j] * im);
          } else {
            for (std::size_t i = 0; i < m; ++i)
              for (std::size_t j = 0; j < q; ++j)
                dx[i * q + j] += gamma[j] * invstd[j] * dy[i * q + j];
          }
        }
        break;
      }
    }
  }

  std::unordered_map<NodeId, Tensor> grads;
  grads.reserve(params_.size());
  for (std::size_t p = 0; p < params_.size(); ++p) {
    if (!active[p]) continue;
    const NodeId id = params_[p];
    Tensor g = has[id] ? std::move(adj[id]) : Tensor::zeros(nodes_[id].value.shape());
    if (precision_ == Precision::f32) g.round_to_f32();
    grads.emplace(id, std::move(g));
  }
  return grads;
}

void Tape::clear() {
  nodes_.clear();
  params_.clear();
}

double grad_check(const std::function<NodeId(Tape&, NodeId)>& build,
                  const Tensor& point, double step, Precision precision) {
  if (!(step > 0.0)) throw ContractError("grad_check: step must be positive");

  Tape tape(precision);
  NodeId p = tape.parameter(point);
  NodeId root = build(tape, p);
  auto grads = tape.backward(root);
  const Tensor& analytic = grads.at(p);

  auto eval_at = [&](const Tensor& x) {
    Tape t(precision);
    NodeId q = t.parameter(x);
    NodeId r = build(t, q);
    return t.value(r).item();
  };

  double worst = 0.0;
  for (std::size_t i = 0; i < point.numel(); ++i) {
    Tensor hi = point, lo = point;
    hi[i] += step;
    lo[i] -= step;
    const double numeric = (eval_at(hi) - eval_at(lo)) / (2.0 * step);
    const double denom =
        std::max({std::abs(analytic[i]), std::abs(numeric), 1e-12});
    worst = std::max(worst, std::abs(analytic[i] - numeric) / denom);
  }
  return worst;
}

}  // namespace fbsdeco
