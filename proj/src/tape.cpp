#include "advit/tape.hpp"

#include <cmath>
#include <utility>

namespace advit {

namespace {

constexpr double kInvSqrt2 = 0.70710678118654752440;
constexpr double kInvSqrt2Pi = 0.39894228040143267794;

void check_rank(const Tensor& t, int rank, const char* op) {
  if (t.rank() != rank) {
    throw Error(std::string(op) + ": expected rank " + std::to_string(rank) +
                " tensor, got shape " + shape_str(t.shape));
  }
}

Tensor transposed(const Tensor& x) {
  Tensor y(Shape{x.shape[1], x.shape[0]});
  for (int i = 0; i < x.shape[0]; ++i) {
    for (int j = 0; j < x.shape[1]; ++j) y(j, i) = x(i, j);
  }
  return y;
}

// C = op(A) * op(B); shapes validated by the caller.
Tensor gemm(const Tensor& a, const Tensor& b, bool ta, bool tb) {
  Tensor ae = ta ? transposed(a) : a;
  Tensor be = tb ? transposed(b) : b;
  const int m = ae.shape[0];
  const int k = ae.shape[1];
  const int n = be.shape[1];
  Tensor c(Shape{m, n}, 0.0);
  for (int i = 0; i < m; ++i) {
    double* crow = &c.data[static_cast<size_t>(i) * n];
    for (int p = 0; p < k; ++p) {
      const double av = ae(i, p);
      const double* brow = &be.data[static_cast<size_t>(p) * n];
      for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
  return c;
}

void add_into(Tensor& dst, const Tensor& src) {
  for (size_t i = 0; i < dst.data.size(); ++i) dst.data[i] += src.data[i];
}

double stable_row_lse(const double* row, int n, double* out_max) {
  double m = row[0];
  for (int i = 1; i < n; ++i) m = std::max(m, row[i]);
  double s = 0.0;
  for (int i = 0; i < n; ++i) s += std::exp(row[i] - m);
  if (out_max) *out_max = m;
  return m + std::log(s);
}

}  // namespace

Var Tape::push(Tensor value, bool requires_grad, std::string name,
               std::function<void(Tape&, const Node&)> backprop) {
  if (!value.all_finite()) {
    throw Error("node #" + std::to_string(nodes_.size()) + " (" + name +
                "): non-finite value produced");
  }
  Node n;
  n.value = std::move(value);
  n.requires_grad = requires_grad;
  n.name = std::move(name);
  n.backprop = std::move(backprop);
  nodes_.push_back(std::move(n));
  return Var{static_cast<int>(nodes_.size()) - 1};
}

Tape::Node& Tape::node(Var v) {
  if (!v.valid() || v.id >= size()) {
    throw Error("invalid var handle (id " + std::to_string(v.id) + ")");
  }
  return nodes_[static_cast<size_t>(v.id)];
}

const Tape::Node& Tape::node(Var v) const {
  if (!v.valid() || v.id >= size()) {
    throw Error("invalid var handle (id " + std::to_string(v.id) + ")");
  }
  return nodes_[static_cast<size_t>(v.id)];
}

const Tensor& Tape::value(Var v) const { return node(v).value; }

const Tensor& Tape::grad(Var v) const {
  const Node& n = node(v);
  if (!n.requires_grad) {
    throw Error("gradient requested for non-differentiable node '" + n.name +
                "'");
  }
  if (n.grad.data.empty() && n.value.size() > 0) {
    throw Error("gradient requested before backward() (node '" + n.name +
                "')");
  }
  return n.grad;
}

bool Tape::requires_grad(Var v) const { return node(v).requires_grad; }

const std::string& Tape::name(Var v) const { return node(v).name; }

Var Tape::leaf(Tensor value, bool requires_grad, std::string name) {
  return push(std::move(value), requires_grad, std::move(name), nullptr);
}

void Tape::backward(Var output) {
  const Tensor& out = value(output);
  if (out.size() != 1) {
    throw Error("backward: implicit seed requires a single-element output, "
                "got shape " +
                shape_str(out.shape));
  }
  backward(output, Tensor(out.shape, 1.0));
}

void Tape::backward(Var output, const Tensor& seed) {
  Node& out = node(output);
  if (!seed.same_shape(out.value)) {
    throw Error("backward: seed shape " + shape_str(seed.shape) +
                " does not match output shape " + shape_str(out.value.shape));
  }
  if (!seed.all_finite()) throw Error("backward: non-finite seed gradient");
  for (Node& n : nodes_) {
    if (n.requires_grad) {
      n.grad = Tensor(n.value.shape, 0.0);
    }
  }
  if (!out.requires_grad) return;  // nothing upstream is differentiable
  out.grad = seed;
  for (int id = output.id; id >= 0; --id) {
    Node& n = nodes_[static_cast<size_t>(id)];
    if (n.requires_grad && n.backprop) n.backprop(*this, n);
  }
}

std::map<std::string, Tensor> collect_gradients(
    const Tape& tape, const std::map<std::string, Var>& leaves) {
  std::map<std::string, Tensor> out;
  for (const auto& [name, var] : leaves) {
    const Tensor& g = tape.grad(var);
    out[name] = g.data.empty() ? Tensor(tape.value(var).shape, 0.0) : g;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Elementwise ops
// ---------------------------------------------------------------------------

Var Tape::add(Var a, Var b) {
  const Tensor& av = value(a);
  const Tensor& bv = value(b);
  if (!av.same_shape(bv)) {
    throw Error("add: shape mismatch " + shape_str(av.shape) + " vs " +
                shape_str(bv.shape));
  }
  Tensor out = av;
  add_into(out, bv);
  const int pa = a.id, pb = b.id;
  return push(std::move(out), requires_grad(a) || requires_grad(b), "add",
              [pa, pb](Tape& t, const Node& self) {
                if (t.wants_grad(pa)) add_into(t.grad_mut(pa), self.grad);
                if (t.wants_grad(pb)) add_into(t.grad_mut(pb), self.grad);
              });
}

Var Tape::sub(Var a, Var b) {
  const Tensor& av = value(a);
  const Tensor& bv = value(b);
  if (!av.same_shape(bv)) {
    throw Error("sub: shape mismatch " + shape_str(av.shape) + " vs " +
                shape_str(bv.shape));
  }
  Tensor out = av;
  for (size_t i = 0; i < out.data.size(); ++i) out.data[i] -= bv.data[i];
  const int pa = a.id, pb = b.id;
  return push(std::move(out), requires_grad(a) || requires_grad(b), "sub",
              [pa, pb](Tape& t, const Node& self) {
                if (t.wants_grad(pa)) add_into(t.grad_mut(pa), self.grad);
                if (t.wants_grad(pb)) {
                  Tensor& g = t.grad_mut(pb);
                  for (size_t i = 0; i < g.data.size(); ++i)
                    g.data[i] -= self.grad.data[i];
                }
              });
}

Var Tape::scale(Var a, double c) {
  Tensor out = value(a);
  for (double& v : out.data) v *= c;
  const int pa = a.id;
  return push(std::move(out), requires_grad(a), "scale",
              [pa, c](Tape& t, const Node& self) {
                if (!t.wants_grad(pa)) return;
                Tensor& g = t.grad_mut(pa);
                for (size_t i = 0; i < g.data.size(); ++i)
                  g.data[i] += c * self.grad.data[i];
              });
}

Var Tape::scale_by(Var a, Var s) {
  const Tensor& sv = value(s);
  if (sv.size() != 1) {
    throw Error("scale_by: scale must hold one element, got shape " +
                shape_str(sv.shape));
  }
  const double c = sv.data[0];
  Tensor out = value(a);
  for (double& v : out.data) v *= c;
  const int pa = a.id, ps = s.id;
  return push(std::move(out), requires_grad(a) || requires_grad(s), "scale_by",
              [pa, ps, c](Tape& t, const Node& self) {
                if (t.wants_grad(pa)) {
                  Tensor& g = t.grad_mut(pa);
                  for (size_t i = 0; i < g.data.size(); ++i)
                    g.data[i] += c * self.grad.data[i];
                }
                if (t.wants_grad(ps)) {
                  const Tensor& av = t.node(Var{pa}).value;
                  double acc = 0.0;
                  for (size_t i = 0; i < av.data.size(); ++i)
                    acc += av.data[i] * self.grad.data[i];
                  t.grad_mut(ps).data[0] += acc;
                }
              });
}

Var Tape::exp(Var a) {
  Tensor out = value(a);
  for (double& v : out.data) v = std::exp(v);
  const int pa = a.id;
  return push(std::move(out), requires_grad(a), "exp",
              [pa](Tape& t, const Node& self) {
                if (!t.wants_grad(pa)) return;
                Tensor& g = t.grad_mut(pa);
                for (size_t i = 0; i < g.data.size(); ++i)
                  g.data[i] += self.value.data[i] * self.grad.data[i];
              });
}

Var Tape::gelu(Var a) {
  const Tensor& av = value(a);
  Tensor out = av;
  for (double& v : out.data) {
    v = 0.5 * v * (1.0 + std::erf(v * kInvSqrt2));
  }
  const int pa = a.id;
  return push(std::move(out), requires_grad(a), "gelu",
              [pa](Tape& t, const Node& self) {
                if (!t.wants_grad(pa)) return;
                const Tensor& x = t.node(Var{pa}).value;
                Tensor& g = t.grad_mut(pa);
                for (size_t i = 0; i < g.data.size(); ++i) {
                  const double xv = x.data[i];
                  const double cdf = 0.5 * (1.0 + std::erf(xv * kInvSqrt2));
                  const double pdf = kInvSqrt2Pi * std::exp(-0.5 * xv * xv);
                  g.data[i] += (cdf + xv * pdf) * self.grad.data[i];
                }
              });
}

// ---------------------------------------------------------------------------
// Matrix ops
// ---------------------------------------------------------------------------

Var Tape::matmul(Var a, Var b, bool trans_a, bool trans_b) {
  const Tensor& av = value(a);
  const Tensor& bv = value(b);
  check_rank(av, 2, "matmul");
  check_rank(bv, 2, "matmul");
  const int ka = trans_a ? av.shape[0] : av.shape[1];
  const int kb = trans_b ? bv.shape[1] : bv.shape[0];
  if (ka != kb) {
    throw Error("matmul: inner extents differ, " + shape_str(av.shape) +
                (trans_a ? "^T" : "") + " * " + shape_str(bv.shape) +
                (trans_b ? "^T" : ""));
  }
  Tensor out = gemm(av, bv, trans_a, trans_b);
  const int pa = a.id, pb = b.id;
  return push(
      std::move(out), requires_grad(a) || requires_grad(b), "matmul",
      [pa, pb, trans_a, trans_b](Tape& t, const Node& self) {
        const Tensor& g = self.grad;
        const Tensor& av = t.node(Var{pa}).value;
        const Tensor& bv = t.node(Var{pb}).value;
        if (t.wants_grad(pa)) {
          Tensor da;
          if (!trans_a && !trans_b) da = gemm(g, bv, false, true);
          else if (!trans_a && trans_b) da = gemm(g, bv, false, false);
          else if (trans_a && !trans_b) da = gemm(bv, g, false, true);
          else da = gemm(bv, g, true, true);
          add_into(t.grad_mut(pa), da);
        }
        if (t.wants_grad(pb)) {
          Tensor db;
          if (!trans_a && !trans_b) db = gemm(av, g, true, false);
          else if (!trans_a && trans_b) db = gemm(g, av, true, false);
          else if (trans_a && !trans_b) db = gemm(av, g, false, false);
          else db = gemm(g, av, true, true);
          add_into(t.grad_mut(pb), db);
        }
      });
}

Var Tape::transpose(Var a) {
  const Tensor& av = value(a);
  check_rank(av, 2, "transpose");
  Tensor out = transposed(av);
  const int pa = a.id;
  return push(std::move(out), requires_grad(a), "transpose",
              [pa](Tape& t, const Node& self) {
                if (!t.wants_grad(pa)) return;
                add_into(t.grad_mut(pa), transposed(self.grad));
              });
}

Var Tape::add_row_vector(Var x, Var bias) {
  const Tensor& xv = value(x);
  const Tensor& bv = value(bias);
  check_rank(xv, 2, "add_row_vector");
  if (bv.rank() != 1 || bv.shape[0] != xv.shape[1]) {
    throw Error("add_row_vector: bias shape " + shape_str(bv.shape) +
                " does not broadcast over " + shape_str(xv.shape));
  }
  Tensor out = xv;
  const int rows = xv.shape[0], cols = xv.shape[1];
  for (int i = 0; i < rows; ++i) {
    for (int j = 0; j < cols; ++j) out(i, j) += bv(j);
  }
  const int px = x.id, pb = bias.id;
  return push(std::move(out), requires_grad(x) || requires_grad(bias),
              "add_row_vector", [px, pb, rows, cols](Tape& t, const Node& self) {
                if (t.wants_grad(px)) add_into(t.grad_mut(px), self.grad);
                if (t.wants_grad(pb)) {
                  Tensor& gb = t.grad_mut(pb);
                  for (int i = 0; i < rows; ++i)
                    for (int j = 0; j < cols; ++j)
                      gb(j) += self.grad(i, j);
                }
              });
}

Var Tape::scale_columns(Var x, Var gains) {
  const Tensor& xv = value(x);
  const Tensor& gv = value(gains);
  check_rank(xv, 2, "scale_columns");
  if (gv.rank() != 1 || gv.shape[0] != xv.shape[1]) {
    throw Error("scale_columns: gains shape " + shape_str(gv.shape) +
                " does not match columns of " + shape_str(xv.shape));
  }
  const int rows = xv.shape[0], cols = xv.shape[1];
  Tensor out = xv;
  for (int i = 0; i < rows; ++i) {
    for (int j = 0; j < cols; ++j) out(i, j) *= gv(j);
  }
  const int px = x.id, pg = gains.id;
  return push(std::move(out), requires_grad(x) || requires_grad(gains),
              "scale_columns", [px, pg, rows, cols](Tape& t, const Node& self) {
                const Tensor& xv = t.node(Var{px}).value;
                const Tensor& gv = t.node(Var{pg}).value;
                if (t.wants_grad(px)) {
                  Tensor& gx = t.grad_mut(px);
                  for (int i = 0; i < rows; ++i)
                    for (int j = 0; j < cols; ++j)
                      gx(i, j) += self.grad(i, j) * gv(j);
                }
                if (t.wants_grad(pg)) {
                  Tensor& gg = t.grad_mut(pg);
                  for (int i = 0; i < rows; ++i)
                    for (int j = 0; j < cols; ++j)
                      gg(j) += self.grad(i, j) * xv(i, j);
                }
              });
}

Var Tape::standardize_rows(Var x, double eps) {
  const Tensor& xv = value(x);
  check_rank(xv, 2, "standardize_rows");
  const int rows = xv.shape[0], cols = xv.shape[1];
  Tensor out(xv.shape);
  Tensor inv_sigma(Shape{rows});
  for (int i = 0; i < rows; ++i) {
    double mu = 0.0;
    for (int j = 0; j < cols; ++j) mu += xv(i, j);
    mu /= cols;
    double var = 0.0;
    for (int j = 0; j < cols; ++j) {
      const double d = xv(i, j) - mu;
      var += d * d;
    }
    var /= cols;
    const double inv = 1.0 / std::sqrt(var + eps);
    inv_sigma(i) = inv;
    for (int j = 0; j < cols; ++j) out(i, j) = (xv(i, j) - mu) * inv;
  }
  const int px = x.id;
  return push(std::move(out), requires_grad(x), "standardize_rows",
              [px, rows, cols, inv_sigma](Tape& t, const Node& self) {
                if (!t.wants_grad(px)) return;
                Tensor& gx = t.grad_mut(px);
                for (int i = 0; i < rows; ++i) {
                  double gm = 0.0, gym = 0.0;
                  for (int j = 0; j < cols; ++j) {
                    gm += self.grad(i, j);
                    gym += self.grad(i, j) * self.value(i, j);
                  }
                  gm /= cols;
                  gym /= cols;
                  const double inv = inv_sigma(i);
                  for (int j = 0; j < cols; ++j) {
                    gx(i, j) += inv * (self.grad(i, j) - gm -
                                       self.value(i, j) * gym);
                  }
                }
              });
}

Var Tape::softmax_rows(Var x) {
  const Tensor& xv = value(x);
  check_rank(xv, 2, "softmax_rows");
  const int rows = xv.shape[0], cols = xv.shape[1];
  Tensor out(xv.shape);
  for (int i = 0; i < rows; ++i) {
    double m = xv(i, 0);
    for (int j = 1; j < cols; ++j) m = std::max(m, xv(i, j));
    double s = 0.0;
    for (int j = 0; j < cols; ++j) {
      const double e = std::exp(xv(i, j) - m);
      out(i, j) = e;
      s += e;
    }
    const double inv = 1.0 / s;
    for (int j = 0; j < cols; ++j) out(i, j) *= inv;
  }
  const int px = x.id;
  return push(std::move(out), requires_grad(x), "softmax_rows",
              [px, rows, cols](Tape& t, const Node& self) {
                if (!t.wants_grad(px)) return;
                Tensor& gx = t.grad_mut(px);
                for (int i = 0; i < rows; ++i) {
                  double dot = 0.0;
                  for (int j = 0; j < cols; ++j)
                    dot += self.grad(i, j) * self.value(i, j);
                  for (int j = 0; j < cols; ++j)
                    gx(i, j) += self.value(i, j) * (self.grad(i, j) - dot);
                }
              });
}

Var Tape::l2_normalize_columns(Var x) {
  const Tensor& xv = value(x);
  check_rank(xv, 2, "l2_normalize_columns");
  const int rows = xv.shape[0], cols = xv.shape[1];
  Tensor norms(Shape{cols}, 0.0);
  for (int i = 0; i < rows; ++i) {
    for (int j = 0; j < cols; ++j) norms(j) += xv(i, j) * xv(i, j);
  }
  for (int j = 0; j < cols; ++j) {
    norms(j) = std::sqrt(norms(j));
    if (norms(j) == 0.0) {
      throw Error("l2_normalize_columns: column " + std::to_string(j) +
                  " has zero norm; normalization undefined");
    }
  }
  Tensor out(xv.shape);
  for (int i = 0; i < rows; ++i) {
    for (int j = 0; j < cols; ++j) out(i, j) = xv(i, j) / norms(j);
  }
  const int px = x.id;
  return push(std::move(out), requires_grad(x), "l2_normalize_columns",
              [px, rows, cols, norms](Tape& t, const Node& self) {
                if (!t.wants_grad(px)) return;
                Tensor& gx = t.grad_mut(px);
                for (int j = 0; j < cols; ++j) {
                  double dot = 0.0;
                  for (int i = 0; i < rows; ++i)
                    dot += self.grad(i, j) * self.value(i, j);
                  const double inv = 1.0 / norms(j);
                  for (int i = 0; i < rows; ++i) {
                    gx(i, j) += inv * (self.grad(i, j) -
                                       self.value(i, j) * dot);
                  }
                }
              });
}

Var Tape::slice_rows(Var x, int begin, int end) {
  const Tensor& xv = value(x);
  check_rank(xv, 2, "slice_rows");
  if (begin < 0 || end > xv.shape[0] || begin >= end) {
    throw Error("slice_rows: range [" + std::to_string(begin) + ", " +
                std::to_string(end) + ") invalid for " + shape_str(xv.shape));
  }
  const int cols = xv.shape[1];
  Tensor out(Shape{end - begin, cols});
  for (int i = begin; i < end; ++i) {
    for (int j = 0; j < cols; ++j) out(i - begin, j) = xv(i, j);
  }
  const int px = x.id;
  return push(std::move(out), requires_grad(x), "slice_rows",
              [px, begin, end, cols](Tape& t, const Node& self) {
                if (!t.wants_grad(px)) return;
                Tensor& gx = t.grad_mut(px);
                for (int i = begin; i < end; ++i)
                  for (int j = 0; j < cols; ++j)
                    gx(i, j) += self.grad(i - begin, j);
              });
}

Var Tape::slice_columns(Var x, int begin, int end) {
  const Tensor& xv = value(x);
  check_rank(xv, 2, "slice_columns");
  if (begin < 0 || end > xv.shape[1] || begin >= end) {
    throw Error("slice_columns: range [" + std::to_string(begin) + ", " +
                std::to_string(end) + ") invalid for " + shape_str(xv.shape));
  }
  const int rows = xv.shape[0];
  Tensor out(Shape{rows, end - begin});
  for (int i = 0; i < rows; ++i) {
    for (int j = begin; j < end; ++j) out(i, j - begin) = xv(i, j);
  }
  const int px = x.id;
  return push(std::move(out), requires_grad(x), "slice_columns",
              [px, begin, end, rows](Tape& t, const Node& self) {
                if (!t.wants_grad(px)) return;
                Tensor& gx = t.grad_mut(px);
                for (int i = 0; i < rows; ++i)
                  for (int j = begin; j < end; ++j)
                    gx(i, j) += self.grad(i, j - begin);
              });
}

Var Tape::concat_rows(const std::vector<Var>& parts) {
  if (parts.empty()) throw Error("concat_rows: no inputs");
  int rows = 0;
  const int cols = value(parts[0]).rank() == 2 ? value(parts[0]).shape[1] : -1;
  bool needs = false;
  for (Var p : parts) {
    const Tensor& t = value(p);
    check_rank(t, 2, "concat_rows");
    if (t.shape[1] != cols) {
      throw Error("concat_rows: column mismatch " + shape_str(t.shape));
    }
    rows += t.shape[0];
    needs = needs || requires_grad(p);
  }
  Tensor out(Shape{rows, cols});
  int r = 0;
  std::vector<int> ids, offsets, counts;
  for (Var p : parts) {
    const Tensor& t = value(p);
    for (int i = 0; i < t.shape[0]; ++i)
      for (int j = 0; j < cols; ++j) out(r + i, j) = t(i, j);
    ids.push_back(p.id);
    offsets.push_back(r);
    counts.push_back(t.shape[0]);
    r += t.shape[0];
  }
  return push(std::move(out), needs, "concat_rows",
              [ids, offsets, counts, cols](Tape& t, const Node& self) {
                for (size_t k = 0; k < ids.size(); ++k) {
                  if (!t.wants_grad(ids[k])) continue;
                  Tensor& g = t.grad_mut(ids[k]);
                  for (int i = 0; i < counts[k]; ++i)
                    for (int j = 0; j < cols; ++j)
                      g(i, j) += self.grad(offsets[k] + i, j);
                }
              });
}

Var Tape::concat_columns(const std::vector<Var>& parts) {
  if (parts.empty()) throw Error("concat_columns: no inputs");
  int cols = 0;
  const int rows = value(parts[0]).rank() == 2 ? value(parts[0]).shape[0] : -1;
  bool needs = false;
  for (Var p : parts) {
    const Tensor& t = value(p);
    check_rank(t, 2, "concat_columns");
    if (t.shape[0] != rows) {
      throw Error("concat_columns: row mismatch " + shape_str(t.shape));
    }
    cols += t.shape[1];
    needs = needs || requires_grad(p);
  }
  Tensor out(Shape{rows, cols});
  int c = 0;
  std::vector<int> ids, offsets, counts;
  for (Var p : parts) {
    const Tensor& t = value(p);
    for (int i = 0; i < rows; ++i)
      for (int j = 0; j < t.shape[1]; ++j) out(i, c + j) = t(i, j);
    ids.push_back(p.id);
    offsets.push_back(c);
    counts.push_back(t.shape[1]);
    c += t.shape[1];
  }
  return push(std::move(out), needs, "concat_columns",
              [ids, offsets, counts, rows](Tape& t, const Node& self) {
                for (size_t k = 0; k < ids.size(); ++k) {
                  if (!t.wants_grad(ids[k])) continue;
                  Tensor& g = t.grad_mut(ids[k]);
                  for (int i = 0; i < rows; ++i)
                    for (int j = 0; j < counts[k]; ++j)
                      g(i, j) += self.grad(i, offsets[k] + j);
                }
              });
}

// ---------------------------------------------------------------------------
// Shape plumbing and reductions
// ---------------------------------------------------------------------------

Var Tape::reshape(Var a, Shape shape) {
  const Tensor& av = value(a);
  if (shape_numel(shape) != av.size()) {
    throw Error("reshape: element count mismatch " + shape_str(av.shape) +
                " -> " + shape_str(shape));
  }
  Tensor out(shape, av.data);
  const int pa = a.id;
  return push(std::move(out), requires_grad(a), "reshape",
              [pa](Tape& t, const Node& self) {
                if (!t.wants_grad(pa)) return;
                Tensor& g = t.grad_mut(pa);
                for (size_t i = 0; i < g.data.size(); ++i)
                  g.data[i] += self.grad.data[i];
              });
}

Var Tape::sum(Var x) {
  const Tensor& xv = value(x);
  double s = 0.0;
  for (double v : xv.data) s += v;
  const int px = x.id;
  return push(Tensor::scalar(s), requires_grad(x), "sum",
              [px](Tape& t, const Node& self) {
                if (!t.wants_grad(px)) return;
                Tensor& g = t.grad_mut(px);
                const double gv = self.grad.data[0];
                for (double& v : g.data) v += gv;
              });
}

Var Tape::mean(Var x) {
  const Tensor& xv = value(x);
  if (xv.size() == 0) throw Error("mean: empty tensor");
  double s = 0.0;
  for (double v : xv.data) s += v;
  const double inv = 1.0 / static_cast<double>(xv.size());
  const int px = x.id;
  return push(Tensor::scalar(s * inv), requires_grad(x), "mean",
              [px, inv](Tape& t, const Node& self) {
                if (!t.wants_grad(px)) return;
                Tensor& g = t.grad_mut(px);
                const double gv = self.grad.data[0] * inv;
                for (double& v : g.data) v += gv;
              });
}

// ---------------------------------------------------------------------------
// Image ops
// ---------------------------------------------------------------------------

Var Tape::conv2d(Var image, Var kernel, Var bias, int stride, int pad) {
  const Tensor& img = value(image);
  const Tensor& ker = value(kernel);
  const Tensor& b = value(bias);
  check_rank(img, 3, "conv2d");
  check_rank(ker, 4, "conv2d");
  if (stride < 1) throw Error("conv2d: stride must be >= 1");
  if (pad < 0) throw Error("conv2d: pad must be >= 0");
  const int h = img.shape[0], w = img.shape[1], ci = img.shape[2];
  const int kh = ker.shape[0], kw = ker.shape[1];
  if (ker.shape[2] != ci) {
    throw Error("conv2d: kernel expects " + std::to_string(ker.shape[2]) +
                " input channels, image has " + std::to_string(ci));
  }
  const int co = ker.shape[3];
  if (b.rank() != 1 || b.shape[0] != co) {
    throw Error("conv2d: bias shape " + shape_str(b.shape) +
                " does not match output channels " + std::to_string(co));
  }
  const int ho = (h + 2 * pad - kh) / stride + 1;
  const int wo = (w + 2 * pad - kw) / stride + 1;
  if (ho < 1 || wo < 1) {
    throw Error("conv2d: output would be empty for image " +
                shape_str(img.shape));
  }
  Tensor out(Shape{ho, wo, co});
  for (int y = 0; y < ho; ++y) {
    for (int x = 0; x < wo; ++x) {
      for (int c = 0; c < co; ++c) out(y, x, c) = b(c);
      for (int ky = 0; ky < kh; ++ky) {
        const int iy = y * stride + ky - pad;
        if (iy < 0 || iy >= h) continue;
        for (int kx = 0; kx < kw; ++kx) {
          const int ix = x * stride + kx - pad;
          if (ix < 0 || ix >= w) continue;
          for (int c = 0; c < ci; ++c) {
            const double v = img(iy, ix, c);
            for (int o = 0; o < co; ++o)
              out(y, x, o) += v * ker(ky, kx, c, o);
          }
        }
      }
    }
  }
  const int pi = image.id, pk = kernel.id, pb = bias.id;
  const bool needs =
      requires_grad(image) || requires_grad(kernel) || requires_grad(bias);
  return push(
      std::move(out), needs, "conv2d",
      [pi, pk, pb, stride, pad, h, w, ci, kh, kw, co, ho,
       wo](Tape& t, const Node& self) {
        const Tensor& img = t.node(Var{pi}).value;
        const Tensor& ker = t.node(Var{pk}).value;
        const bool wi = t.wants_grad(pi);
        const bool wk = t.wants_grad(pk);
        const bool wb = t.wants_grad(pb);
        for (int y = 0; y < ho; ++y) {
          for (int x = 0; x < wo; ++x) {
            if (wb) {
              Tensor& gb = t.grad_mut(pb);
              for (int o = 0; o < co; ++o) gb(o) += self.grad(y, x, o);
            }
            for (int ky = 0; ky < kh; ++ky) {
              const int iy = y * stride + ky - pad;
              if (iy < 0 || iy >= h) continue;
              for (int kx = 0; kx < kw; ++kx) {
                const int ix = x * stride + kx - pad;
                if (ix < 0 || ix >= w) continue;
                for (int c = 0; c < ci; ++c) {
                  const double v = img(iy, ix, c);
                  for (int o = 0; o < co; ++o) {
                    const double g = self.grad(y, x, o);
                    if (wi) t.grad_mut(pi)(iy, ix, c) += ker(ky, kx, c, o) * g;
                    if (wk) t.grad_mut(pk)(ky, kx, c, o) += v * g;
                  }
                }
              }
            }
          }
        }
      });
}

Var Tape::depthwise_conv2d(Var image, Var kernel, Var bias, int pad) {
  const Tensor& img = value(image);
  const Tensor& ker = value(kernel);
  const Tensor& b = value(bias);
  check_rank(img, 3, "depthwise_conv2d");
  check_rank(ker, 3, "depthwise_conv2d");
  if (pad < 0) throw Error("depthwise_conv2d: pad must be >= 0");
  const int h = img.shape[0], w = img.shape[1], ch = img.shape[2];
  const int kh = ker.shape[0], kw = ker.shape[1];
  if (ker.shape[2] != ch) {
    throw Error("depthwise_conv2d: kernel channels " +
                std::to_string(ker.shape[2]) + " vs image channels " +
                std::to_string(ch));
  }
  if (b.rank() != 1 || b.shape[0] != ch) {
    throw Error("depthwise_conv2d: bias shape " + shape_str(b.shape) +
                " does not match channels " + std::to_string(ch));
  }
  const int ho = h + 2 * pad - kh + 1;
  const int wo = w + 2 * pad - kw + 1;
  if (ho < 1 || wo < 1) {
    throw Error("depthwise_conv2d: output would be empty for image " +
                shape_str(img.shape));
  }
  Tensor out(Shape{ho, wo, ch});
  for (int y = 0; y < ho; ++y) {
    for (int x = 0; x < wo; ++x) {
      for (int c = 0; c < ch; ++c) out(y, x, c) = b(c);
      for (int ky = 0; ky < kh; ++ky) {
        const int iy = y + ky - pad;
        if (iy < 0 || iy >= h) continue;
        for (int kx = 0; kx < kw; ++kx) {
          const int ix = x + kx - pad;
          if (ix < 0 || ix >= w) continue;
          for (int c = 0; c < ch; ++c)
            out(y, x, c) += img(iy, ix, c) * ker(ky, kx, c);
        }
      }
    }
  }
  const int pi = image.id, pk = kernel.id, pb = bias.id;
  const bool needs =
      requires_grad(image) || requires_grad(kernel) || requires_grad(bias);
  return push(std::move(out), needs, "depthwise_conv2d",
              [pi, pk, pb, pad, h, w, ch, kh, kw, ho,
               wo](Tape& t, const Node& self) {
                const Tensor& img = t.node(Var{pi}).value;
                const Tensor& ker = t.node(Var{pk}).value;
                const bool wi = t.wants_grad(pi);
                const bool wk = t.wants_grad(pk);
                const bool wb = t.wants_grad(pb);
                for (int y = 0; y < ho; ++y) {
                  for (int x = 0; x < wo; ++x) {
                    if (wb) {
                      Tensor& gb = t.grad_mut(pb);
                      for (int c = 0; c < ch; ++c) gb(c) += self.grad(y, x, c);
                    }
                    for (int ky = 0; ky < kh; ++ky) {
                      const int iy = y + ky - pad;
                      if (iy < 0 || iy >= h) continue;
                      for (int kx = 0; kx < kw; ++kx) {
                        const int ix = x + kx - pad;
                        if (ix < 0 || ix >= w) continue;
                        for (int c = 0; c < ch; ++c) {
                          const double g = self.grad(y, x, c);
                          if (wi)
                            t.grad_mut(pi)(iy, ix, c) += ker(ky, kx, c) * g;
                          if (wk)
                            t.grad_mut(pk)(ky, kx, c) += img(iy, ix, c) * g;
                        }
                      }
                    }
                  }
                }
              });
}

Var Tape::patchify(Var image, int patch) {
  const Tensor& img = value(image);
  check_rank(img, 3, "patchify");
  const int h = img.shape[0], w = img.shape[1], c = img.shape[2];
  if (patch < 1 || h % patch != 0 || w % patch != 0) {
    throw Error("patchify: image " + shape_str(img.shape) +
                " not divisible by patch " + std::to_string(patch));
  }
  const int gh = h / patch, gw = w / patch;
  const int dim = patch * patch * c;
  Tensor out(Shape{gh * gw, dim});
  for (int py = 0; py < gh; ++py) {
    for (int px = 0; px < gw; ++px) {
      const int n = py * gw + px;
      int j = 0;
      for (int dy = 0; dy < patch; ++dy)
        for (int dx = 0; dx < patch; ++dx)
          for (int ch = 0; ch < c; ++ch)
            out(n, j++) = img(py * patch + dy, px * patch + dx, ch);
    }
  }
  const int pi = image.id;
  return push(std::move(out), requires_grad(image), "patchify",
              [pi, patch, gh, gw, c](Tape& t, const Node& self) {
                if (!t.wants_grad(pi)) return;
                Tensor& g = t.grad_mut(pi);
                for (int py = 0; py < gh; ++py) {
                  for (int px = 0; px < gw; ++px) {
                    const int n = py * gw + px;
                    int j = 0;
                    for (int dy = 0; dy < patch; ++dy)
                      for (int dx = 0; dx < patch; ++dx)
                        for (int ch = 0; ch < c; ++ch)
                          g(py * patch + dy, px * patch + dx, ch) +=
                              self.grad(n, j++);
                  }
                }
              });
}

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

Var Tape::cross_entropy(Var logits, Tensor target_probs) {
  const Tensor& lv = value(logits);
  check_rank(lv, 2, "cross_entropy");
  if (!lv.same_shape(target_probs)) {
    throw Error("cross_entropy: targets shape " +
                shape_str(target_probs.shape) + " vs logits " +
                shape_str(lv.shape));
  }
  const int rows = lv.shape[0], cols = lv.shape[1];
  Tensor probs(lv.shape);
  double loss = 0.0;
  for (int i = 0; i < rows; ++i) {
    double m = 0.0;
    const double lse = stable_row_lse(&lv.data[static_cast<size_t>(i) * cols],
                                      cols, &m);
    double dot = 0.0;
    for (int j = 0; j < cols; ++j) {
      probs(i, j) = std::exp(lv(i, j) - lse);
      dot += target_probs(i, j) * lv(i, j);
    }
    loss += lse - dot;
  }
  loss /= rows;
  const int pl = logits.id;
  return push(Tensor::scalar(loss), requires_grad(logits), "cross_entropy",
              [pl, rows, cols, probs,
               target_probs](Tape& t, const Node& self) {
                if (!t.wants_grad(pl)) return;
                Tensor& g = t.grad_mut(pl);
                const double gv = self.grad.data[0] / rows;
                for (int i = 0; i < rows; ++i)
                  for (int j = 0; j < cols; ++j)
                    g(i, j) += gv * (probs(i, j) - target_probs(i, j));
              });
}

Var Tape::kl_divergence(Var ref_logits, Var model_logits) {
  const Tensor& pv = value(ref_logits);
  const Tensor& qv = value(model_logits);
  check_rank(pv, 2, "kl_divergence");
  if (!pv.same_shape(qv)) {
    throw Error("kl_divergence: logits shapes differ, " + shape_str(pv.shape) +
                " vs " + shape_str(qv.shape));
  }
  const int rows = pv.shape[0], cols = pv.shape[1];
  Tensor p(pv.shape), q(qv.shape), logratio(pv.shape);
  Tensor row_kl(Shape{rows});
  double total = 0.0;
  for (int i = 0; i < rows; ++i) {
    const double lse_p =
        stable_row_lse(&pv.data[static_cast<size_t>(i) * cols], cols, nullptr);
    const double lse_q =
        stable_row_lse(&qv.data[static_cast<size_t>(i) * cols], cols, nullptr);
    double kl = 0.0;
    for (int j = 0; j < cols; ++j) {
      const double lp = pv(i, j) - lse_p;
      const double lq = qv(i, j) - lse_q;
      p(i, j) = std::exp(lp);
      q(i, j) = std::exp(lq);
      logratio(i, j) = lp - lq;
      kl += p(i, j) * logratio(i, j);
    }
    row_kl(i) = kl;
    total += kl;
  }
  total /= rows;
  const int pp = ref_logits.id, pq = model_logits.id;
  const bool needs = requires_grad(ref_logits) || requires_grad(model_logits);
  return push(Tensor::scalar(total), needs, "kl_divergence",
              [pp, pq, rows, cols, p, q, logratio,
               row_kl](Tape& t, const Node& self) {
                const double gv = self.grad.data[0] / rows;
                if (t.wants_grad(pp)) {
                  Tensor& g = t.grad_mut(pp);
                  for (int i = 0; i < rows; ++i)
                    for (int j = 0; j < cols; ++j)
                      g(i, j) += gv * p(i, j) * (logratio(i, j) - row_kl(i));
                }
                if (t.wants_grad(pq)) {
                  Tensor& g = t.grad_mut(pq);
                  for (int i = 0; i < rows; ++i)
                    for (int j = 0; j < cols; ++j)
                      g(i, j) += gv * (q(i, j) - p(i, j));
                }
              });
}

}  // namespace advit
