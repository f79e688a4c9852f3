#include "mmfsod/autograd.hpp"

#include <limits>
#include <stdexcept>

namespace mmfsod::ag {

const Matrix& Var::value() const {
  if (!tape_) throw std::logic_error("Var: unbound");
  return tape_->value(id_);
}

Var Tape::constant(Matrix value) {
  nodes_.push_back(Node{std::move(value), {}, false, false, {}});
  return Var(this, static_cast<int>(nodes_.size()) - 1);
}

Var Tape::variable(Matrix value) {
  nodes_.push_back(Node{std::move(value), {}, true, false, {}});
  return Var(this, static_cast<int>(nodes_.size()) - 1);
}

Var Tape::param(const Matrix& storage) {
  if (auto it = bound_.find(&storage); it != bound_.end()) return Var(this, it->second);
  Var v = variable(storage);
  bound_.emplace(&storage, v.id());
  return v;
}

Var Tape::push(Matrix value, const std::vector<Var>& parents, BackwardFn fn) {
  bool needs = false;
  for (const auto& p : parents) {
    if (p.tape() != this) throw std::logic_error("Tape::push: operand from another tape");
    needs = needs || nodes_[p.id()].needs_grad;
  }
  nodes_.push_back(Node{std::move(value), {}, needs, false, needs ? std::move(fn) : BackwardFn{}});
  return Var(this, static_cast<int>(nodes_.size()) - 1);
}

void Tape::accumulate(int id, const Matrix& delta) {
  Node& n = nodes_[id];
  if (!n.needs_grad) return;
  if (!n.has_grad) {
    n.grad = delta;
    n.has_grad = true;
  } else {
    n.grad += delta;
  }
}

void Tape::backward(Var output) {
  if (output.tape() != this) throw std::logic_error("Tape::backward: foreign output");
  if (output.rows() != 1 || output.cols() != 1) throw ShapeError("Tape::backward: output must be 1x1");
  for (auto& n : nodes_) {
    n.has_grad = false;
    n.grad.resize(0, 0);
  }
  accumulate(output.id(), Matrix::Ones(1, 1));
  for (int id = output.id(); id >= 0; --id) {
    Node& n = nodes_[id];
    if (!n.has_grad || !n.backward) continue;
    const Matrix g = n.grad;
    n.backward(*this, g);
  }
}

Matrix Tape::grad(Var v) const {
  const Node& n = nodes_[v.id()];
  if (!n.has_grad) return Matrix::Zero(n.value.rows(), n.value.cols());
  return n.grad;
}

Matrix Tape::grad_of(const Matrix& storage) const {
  auto it = bound_.find(&storage);
  if (it == bound_.end()) return Matrix::Zero(storage.rows(), storage.cols());
  return grad(Var(const_cast<Tape*>(this), it->second));
}

bool Tape::received_grad(const Matrix& storage) const {
  auto it = bound_.find(&storage);
  return it != bound_.end() && nodes_[it->second].has_grad;
}

namespace {

void same_shape(Var a, Var b, const char* op) {
  require_shape(a.rows() == b.rows() && a.cols() == b.cols(),
                std::string(op) + ": shape mismatch " + shape_str(a.value()) + " vs " + shape_str(b.value()));
}

}  // namespace

Var add(Var a, Var b) {
  same_shape(a, b, "add");
  const int ia = a.id(), ib = b.id();
  return a.tape()->push(a.value() + b.value(), {a, b}, [ia, ib](Tape& t, const Matrix& g) {
    t.accumulate(ia, g);
    t.accumulate(ib, g);
  });
}

Var sub(Var a, Var b) {
  same_shape(a, b, "sub");
  const int ia = a.id(), ib = b.id();
  return a.tape()->push(a.value() - b.value(), {a, b}, [ia, ib](Tape& t, const Matrix& g) {
    t.accumulate(ia, g);
    t.accumulate(ib, -g);
  });
}

Var scale(Var a, double s) {
  const int ia = a.id();
  return a.tape()->push(a.value() * s, {a}, [ia, s](Tape& t, const Matrix& g) { t.accumulate(ia, g * s); });
}

Var hadamard(Var a, Var b) {
  same_shape(a, b, "hadamard");
  const int ia = a.id(), ib = b.id();
  return a.tape()->push(a.value().cwiseProduct(b.value()), {a, b}, [ia, ib](Tape& t, const Matrix& g) {
    t.accumulate(ia, g.cwiseProduct(t.value(ib)));
    t.accumulate(ib, g.cwiseProduct(t.value(ia)));
  });
}

Var matmul(Var a, Var b) {
  require_shape(a.cols() == b.rows(), "matmul: inner dimension mismatch " + shape_str(a.value()) + " * " +
                                          shape_str(b.value()));
  const int ia = a.id(), ib = b.id();
  Matrix out = a.value() * b.value();
  return a.tape()->push(std::move(out), {a, b}, [ia, ib](Tape& t, const Matrix& g) {
    if (t.needs_grad(ia)) t.accumulate(ia, g * t.value(ib).transpose());
    if (t.needs_grad(ib)) t.accumulate(ib, t.value(ia).transpose() * g);
  });
}

Var matmul_nt(Var a, Var b) {
  require_shape(a.cols() == b.cols(), "matmul_nt: inner dimension mismatch " + shape_str(a.value()) + " * " +
                                          shape_str(b.value()) + "^T");
  const int ia = a.id(), ib = b.id();
  Matrix out = a.value() * b.value().transpose();
  return a.tape()->push(std::move(out), {a, b}, [ia, ib](Tape& t, const Matrix& g) {
    if (t.needs_grad(ia)) t.accumulate(ia, g * t.value(ib));
    if (t.needs_grad(ib)) t.accumulate(ib, g.transpose() * t.value(ia));
  });
}

Var add_row(Var a, Var row) {
  require_shape(row.rows() == 1 && row.cols() == a.cols(), "add_row: bias must be 1 x " + std::to_string(a.cols()));
  const int ia = a.id(), ir = row.id();
  Matrix out = a.value().rowwise() + row.value().row(0);
  return a.tape()->push(std::move(out), {a, row}, [ia, ir](Tape& t, const Matrix& g) {
    t.accumulate(ia, g);
    t.accumulate(ir, g.colwise().sum());
  });
}

Var broadcast_rows(Var row, Eigen::Index rows) {
  require_shape(row.rows() == 1, "broadcast_rows: expects a single row");
  const int ir = row.id();
  Matrix out = row.value().replicate(rows, 1);
  return row.tape()->push(std::move(out), {row},
                          [ir](Tape& t, const Matrix& g) { t.accumulate(ir, g.colwise().sum()); });
}

Var sigmoid(Var a) {
  const int ia = a.id();
  Matrix s = mmfsod::sigmoid(a.value());
  Matrix local = s.cwiseProduct((1.0 - s.array()).matrix());
  return a.tape()->push(std::move(s), {a}, [ia, local = std::move(local)](Tape& t, const Matrix& g) {
    t.accumulate(ia, g.cwiseProduct(local));
  });
}

Var relu(Var a) {
  const int ia = a.id();
  Matrix out = a.value().cwiseMax(0.0);
  return a.tape()->push(std::move(out), {a}, [ia](Tape& t, const Matrix& g) {
    t.accumulate(ia, (t.value(ia).array() > 0.0).select(g, 0.0));
  });
}

Var gelu(Var a) {
  const Matrix& x = a.value();
  Matrix cdf = x.unaryExpr([](double v) { return 0.5 * std::erfc(-v / std::sqrt(2.0)); });
  Matrix out = x.cwiseProduct(cdf);
  const int ia = a.id();
  return a.tape()->push(std::move(out), {a}, [ia, cdf = std::move(cdf)](Tape& t, const Matrix& g) {
    const Matrix& xv = t.value(ia);
    const double inv_sqrt_2pi = 1.0 / std::sqrt(2.0 * 3.14159265358979323846);
    const Matrix pdf = xv.unaryExpr([inv_sqrt_2pi](double v) { return inv_sqrt_2pi * std::exp(-0.5 * v * v); });
    t.accumulate(ia, g.cwiseProduct(cdf + xv.cwiseProduct(pdf)));
  });
}

Var softmax_rows(Var a, const Matrix& allowed) {
  const bool masked = allowed.size() > 0;
  if (masked) require_shape(allowed.rows() == a.rows() && allowed.cols() == a.cols(), "softmax_rows: mask shape");
  Matrix p(a.rows(), a.cols());
  for (Eigen::Index r = 0; r < a.rows(); ++r) {
    double m = -std::numeric_limits<double>::infinity();
    bool any = false, finite = true;
    for (Eigen::Index c = 0; c < a.cols(); ++c)
      if (!masked || allowed(r, c) != 0.0) {
        any = true;
        finite = finite && std::isfinite(a.value()(r, c));
        m = std::max(m, a.value()(r, c));
      }
    if (!any) throw std::invalid_argument("softmax_rows: row with no allowed entries");
    // Non-finite scores yield a NaN row; the training loop reports it.
    if (!finite) {
      p.row(r).setConstant(std::numeric_limits<double>::quiet_NaN());
      continue;
    }
    double z = 0.0;
    for (Eigen::Index c = 0; c < a.cols(); ++c) {
      const double e = (!masked || allowed(r, c) != 0.0) ? std::exp(a.value()(r, c) - m) : 0.0;
      p(r, c) = e;
      z += e;
    }
    p.row(r) /= z;
  }
  const int ia = a.id();
  Matrix probs = p;
  return a.tape()->push(std::move(p), {a}, [ia, probs = std::move(probs)](Tape& t, const Matrix& g) {
    const Vector inner = g.cwiseProduct(probs).rowwise().sum();
    t.accumulate(ia, probs.cwiseProduct((g.colwise() - inner)));
  });
}

Var layer_norm_rows(Var x, Var gain, Var bias, double eps) {
  const Eigen::Index d = x.cols();
  require_shape(gain.rows() == 1 && gain.cols() == d && bias.rows() == 1 && bias.cols() == d,
                "layer_norm_rows: gain/bias must be 1 x " + std::to_string(d));
  const Matrix& xv = x.value();
  Matrix xhat(xv.rows(), d);
  Vector inv_std(xv.rows());
  for (Eigen::Index r = 0; r < xv.rows(); ++r) {
    const double mu = xv.row(r).mean();
    const double var = (xv.row(r).array() - mu).square().mean();
    inv_std(r) = 1.0 / std::sqrt(var + eps);
    xhat.row(r) = (xv.row(r).array() - mu) * inv_std(r);
  }
  Matrix out = (xhat.array().rowwise() * gain.value().row(0).array()).matrix();
  out.rowwise() += bias.value().row(0);
  const int ix = x.id(), ig = gain.id(), ib = bias.id();
  return x.tape()->push(std::move(out), {x, gain, bias},
                        [ix, ig, ib, xhat = std::move(xhat), inv_std = std::move(inv_std)](Tape& t, const Matrix& g) {
                          const RowVector gv = t.value(ig).row(0);
                          if (t.needs_grad(ig)) t.accumulate(ig, g.cwiseProduct(xhat).colwise().sum());
                          if (t.needs_grad(ib)) t.accumulate(ib, g.colwise().sum());
                          if (!t.needs_grad(ix)) return;
                          const auto n = static_cast<double>(xhat.cols());
                          Matrix gx(xhat.rows(), xhat.cols());
                          for (Eigen::Index r = 0; r < xhat.rows(); ++r) {
                            const RowVector gh = g.row(r).cwiseProduct(gv);
                            const double s1 = gh.sum();
                            const double s2 = gh.dot(xhat.row(r));
                            gx.row(r) = (inv_std(r) / n) * (n * gh.array() - s1 - xhat.row(r).array() * s2).matrix();
                          }
                          t.accumulate(ix, gx);
                        });
}

Var mean_rows(Var a) {
  const int ia = a.id();
  const Eigen::Index n = a.rows();
  require_shape(n > 0, "mean_rows: empty input");
  Matrix out = a.value().colwise().mean();
  return a.tape()->push(std::move(out), {a}, [ia, n](Tape& t, const Matrix& g) {
    t.accumulate(ia, g.replicate(n, 1) / static_cast<double>(n));
  });
}

Var slice_rows(Var a, Eigen::Index start, Eigen::Index count) {
  require_shape(start >= 0 && count >= 0 && start + count <= a.rows(), "slice_rows: out of range");
  const int ia = a.id();
  const Eigen::Index rows = a.rows(), cols = a.cols();
  Matrix out = a.value().middleRows(start, count);
  return a.tape()->push(std::move(out), {a}, [ia, start, count, rows, cols](Tape& t, const Matrix& g) {
    Matrix full = Matrix::Zero(rows, cols);
    full.middleRows(start, count) = g;
    t.accumulate(ia, full);
  });
}

Var slice_cols(Var a, Eigen::Index start, Eigen::Index count) {
  require_shape(start >= 0 && count >= 0 && start + count <= a.cols(), "slice_cols: out of range");
  const int ia = a.id();
  const Eigen::Index rows = a.rows(), cols = a.cols();
  Matrix out = a.value().middleCols(start, count);
  return a.tape()->push(std::move(out), {a}, [ia, start, count, rows, cols](Tape& t, const Matrix& g) {
    Matrix full = Matrix::Zero(rows, cols);
    full.middleCols(start, count) = g;
    t.accumulate(ia, full);
  });
}

Var concat_rows(const std::vector<Var>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_rows: no parts");
  Eigen::Index rows = 0;
  for (const auto& p : parts) {
    require_shape(p.cols() == parts[0].cols(), "concat_rows: column mismatch");
    rows += p.rows();
  }
  Matrix out(rows, parts[0].cols());
  std::vector<std::pair<int, Eigen::Index>> spans;
  Eigen::Index at = 0;
  for (const auto& p : parts) {
    out.middleRows(at, p.rows()) = p.value();
    spans.emplace_back(p.id(), at);
    at += p.rows();
  }
  return parts[0].tape()->push(std::move(out), parts, [spans](Tape& t, const Matrix& g) {
    for (const auto& [id, start] : spans) t.accumulate(id, g.middleRows(start, t.value(id).rows()));
  });
}

Var gather_rows(Var table, const std::vector<int>& ids) {
  const Matrix& t = table.value();
  Matrix out(static_cast<Eigen::Index>(ids.size()), t.cols());
  for (std::size_t r = 0; r < ids.size(); ++r) {
    if (ids[r] < 0 || ids[r] >= t.rows())
      throw std::invalid_argument("gather_rows: id " + std::to_string(ids[r]) + " outside table of " +
                                  std::to_string(t.rows()) + " rows");
    out.row(static_cast<Eigen::Index>(r)) = t.row(ids[r]);
  }
  const int it = table.id();
  const Eigen::Index rows = t.rows(), cols = t.cols();
  return table.tape()->push(std::move(out), {table}, [it, ids, rows, cols](Tape& tp, const Matrix& g) {
    Matrix d = Matrix::Zero(rows, cols);
    for (std::size_t r = 0; r < ids.size(); ++r) d.row(ids[r]) += g.row(static_cast<Eigen::Index>(r));
    tp.accumulate(it, d);
  });
}

Var concat_cols(const std::vector<Var>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_cols: no parts");
  Eigen::Index cols = 0;
  for (const auto& p : parts) {
    require_shape(p.rows() == parts[0].rows(), "concat_cols: row mismatch");
    cols += p.cols();
  }
  Matrix out(parts[0].rows(), cols);
  std::vector<std::pair<int, Eigen::Index>> spans;
  Eigen::Index at = 0;
  for (const auto& p : parts) {
    out.middleCols(at, p.cols()) = p.value();
    spans.emplace_back(p.id(), at);
    at += p.cols();
  }
  return parts[0].tape()->push(std::move(out), parts, [spans](Tape& t, const Matrix& g) {
    for (const auto& [id, start] : spans) t.accumulate(id, g.middleCols(start, t.value(id).cols()));
  });
}

Var sum(Var a) {
  const int ia = a.id();
  const Eigen::Index rows = a.rows(), cols = a.cols();
  Matrix out(1, 1);
  out(0, 0) = a.value().sum();
  return a.tape()->push(std::move(out), {a}, [ia, rows, cols](Tape& t, const Matrix& g) {
    t.accumulate(ia, Matrix::Constant(rows, cols, g(0, 0)));
  });
}

Var cross_entropy_rows(Var logits, const std::vector<int>& targets) {
  const Matrix& z = logits.value();
  require_shape(static_cast<Eigen::Index>(targets.size()) == z.rows(), "cross_entropy_rows: one target per row");
  Matrix probs = mmfsod::softmax_rows(z);
  const Vector lse = logsumexp_rows(z);
  double total = 0.0;
  for (Eigen::Index r = 0; r < z.rows(); ++r) {
    const int y = targets[r];
    if (y < 0 || y >= z.cols()) throw std::out_of_range("cross_entropy_rows: target out of range");
    total += lse(r) - z(r, y);
  }
  Matrix out(1, 1);
  out(0, 0) = total;
  const int il = logits.id();
  return logits.tape()->push(std::move(out), {logits},
                             [il, targets, probs = std::move(probs)](Tape& t, const Matrix& g) {
                               Matrix d = probs;
                               for (std::size_t r = 0; r < targets.size(); ++r) d(r, targets[r]) -= 1.0;
                               t.accumulate(il, d * g(0, 0));
                             });
}

Var l1_rows(Var pred, const Matrix& target, const std::vector<bool>& mask) {
  const Matrix& p = pred.value();
  require_shape(p.rows() == target.rows() && p.cols() == target.cols(), "l1_rows: target shape");
  require_shape(static_cast<Eigen::Index>(mask.size()) == p.rows(), "l1_rows: mask length");
  Matrix sign = Matrix::Zero(p.rows(), p.cols());
  double total = 0.0;
  for (Eigen::Index r = 0; r < p.rows(); ++r) {
    if (!mask[r]) continue;
    for (Eigen::Index c = 0; c < p.cols(); ++c) {
      const double diff = p(r, c) - target(r, c);
      total += std::abs(diff);
      sign(r, c) = diff > 0 ? 1.0 : (diff < 0 ? -1.0 : 0.0);
    }
  }
  Matrix out(1, 1);
  out(0, 0) = total;
  const int ip = pred.id();
  return pred.tape()->push(std::move(out), {pred}, [ip, sign = std::move(sign)](Tape& t, const Matrix& g) {
    t.accumulate(ip, sign * g(0, 0));
  });
}

}  // namespace mmfsod::ag
