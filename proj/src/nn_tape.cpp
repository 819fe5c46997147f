#include "qest/nn/tape.hpp"

#include <cmath>

namespace qest::nn {

Var Tape::constant(Mat value) {
  Node n;
  n.value = std::move(value);
  nodes_.push_back(std::move(n));
  return {this, static_cast<int>(nodes_.size()) - 1};
}

Var Tape::param(ParamSet& params, const std::string& name) {
  Node n;
  n.value = params.value(name);
  n.needGrad = true;
  n.owner = &params;
  n.paramName = name;
  nodes_.push_back(std::move(n));
  return {this, static_cast<int>(nodes_.size()) - 1};
}

Var Tape::make(Mat value, bool needGrad) {
  Node n;
  n.value = std::move(value);
  n.needGrad = needGrad;
  nodes_.push_back(std::move(n));
  return {this, static_cast<int>(nodes_.size()) - 1};
}

void Tape::set_back(Var v, std::function<void(Tape&)> back) {
  nodes_[static_cast<size_t>(v.id)].back = std::move(back);
}

Mat& Tape::grad_of(int id) {
  Node& n = nodes_[static_cast<size_t>(id)];
  if (n.grad.size() == 0) n.grad = Mat::Zero(n.value.rows(), n.value.cols());
  return n.grad;
}

void Tape::backward(Var loss) {
  if (loss.tape != this) throw ShapeMismatch("backward: var from another tape");
  grad_of(loss.id).setConstant(1.0);
  // Creation order is a topological order; walk it in reverse.
  for (int i = loss.id; i >= 0; --i) {
    Node& n = nodes_[static_cast<size_t>(i)];
    if (!n.needGrad || n.grad.size() == 0) continue;
    if (n.back) n.back(*this);
    if (n.owner) n.owner->grad(n.paramName) += n.grad;
  }
}

namespace {

Tape& same_tape(Var a, Var b, const char* what) {
  if (a.tape == nullptr || a.tape != b.tape) throw ShapeMismatch(what);
  return *a.tape;
}

void check_same_shape(const Mat& a, const Mat& b, const char* what) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) throw ShapeMismatch(what);
}

/// Elementwise op with derivative computed from (input value, output value).
template <typename Fwd, typename Bwd>
Var unary_elementwise(Var x, Fwd fwd, Bwd dydx) {
  Tape& t = *x.tape;
  Mat y = t.value(x).unaryExpr(fwd);
  const bool ng = t.needs_grad(x);
  Var out = t.make(std::move(y), ng);
  if (ng) {
    t.set_back(out, [o = out.id, xi = x.id, dydx](Tape& tp) {
      const Mat& g = tp.grad_of(o);
      const Mat& xv = tp.node_value(xi);
      const Mat& yv = tp.node_value(o);
      tp.grad_of(xi).array() += g.array() * xv.binaryExpr(yv, dydx).array();
    });
  }
  return out;
}

}  // namespace

Var matmul(Var a, Var b) {
  Tape& t = same_tape(a, b, "matmul: tapes differ");
  const Mat& av = t.value(a);
  const Mat& bv = t.value(b);
  if (av.cols() != bv.rows()) throw ShapeMismatch("matmul: inner dimensions");
  const bool ng = t.needs_grad(a) || t.needs_grad(b);
  Var out = t.make(av * bv, ng);
  if (ng) {
    t.set_back(out, [o = out.id, ai = a.id, bi = b.id](Tape& tp) {
      const Mat& g = tp.grad_of(o);
      if (tp.node_needs_grad(ai)) tp.grad_of(ai) += g * tp.node_value(bi).transpose();
      if (tp.node_needs_grad(bi)) tp.grad_of(bi) += tp.node_value(ai).transpose() * g;
    });
  }
  return out;
}

Var matmul_nt(Var a, Var b) {
  Tape& t = same_tape(a, b, "matmul_nt: tapes differ");
  const Mat& av = t.value(a);
  const Mat& bv = t.value(b);
  if (av.cols() != bv.cols()) throw ShapeMismatch("matmul_nt: inner dimensions");
  const bool ng = t.needs_grad(a) || t.needs_grad(b);
  Var out = t.make(av * bv.transpose(), ng);
  if (ng) {
    t.set_back(out, [o = out.id, ai = a.id, bi = b.id](Tape& tp) {
      const Mat& g = tp.grad_of(o);
      if (tp.node_needs_grad(ai)) tp.grad_of(ai) += g * tp.node_value(bi);
      if (tp.node_needs_grad(bi)) tp.grad_of(bi) += g.transpose() * tp.node_value(ai);
    });
  }
  return out;
}

Var add(Var a, Var b) {
  Tape& t = same_tape(a, b, "add: tapes differ");
  check_same_shape(t.value(a), t.value(b), "add: shapes differ");
  const bool ng = t.needs_grad(a) || t.needs_grad(b);
  Var out = t.make(t.value(a) + t.value(b), ng);
  if (ng) {
    t.set_back(out, [o = out.id, ai = a.id, bi = b.id](Tape& tp) {
      const Mat& g = tp.grad_of(o);
      if (tp.node_needs_grad(ai)) tp.grad_of(ai) += g;
      if (tp.node_needs_grad(bi)) tp.grad_of(bi) += g;
    });
  }
  return out;
}

Var sub(Var a, Var b) {
  Tape& t = same_tape(a, b, "sub: tapes differ");
  check_same_shape(t.value(a), t.value(b), "sub: shapes differ");
  const bool ng = t.needs_grad(a) || t.needs_grad(b);
  Var out = t.make(t.value(a) - t.value(b), ng);
  if (ng) {
    t.set_back(out, [o = out.id, ai = a.id, bi = b.id](Tape& tp) {
      const Mat& g = tp.grad_of(o);
      if (tp.node_needs_grad(ai)) tp.grad_of(ai) += g;
      if (tp.node_needs_grad(bi)) tp.grad_of(bi) -= g;
    });
  }
  return out;
}

Var add_rowvec(Var x, Var rowBias) {
  Tape& t = same_tape(x, rowBias, "add_rowvec: tapes differ");
  const Mat& xv = t.value(x);
  const Mat& bv = t.value(rowBias);
  if (bv.rows() != 1 || bv.cols() != xv.cols())
    throw ShapeMismatch("add_rowvec: bias must be 1 x cols(x)");
  Mat y = xv;
  y.rowwise() += bv.row(0);
  const bool ng = t.needs_grad(x) || t.needs_grad(rowBias);
  Var out = t.make(std::move(y), ng);
  if (ng) {
    t.set_back(out, [o = out.id, xi = x.id, bi = rowBias.id](Tape& tp) {
      const Mat& g = tp.grad_of(o);
      if (tp.node_needs_grad(xi)) tp.grad_of(xi) += g;
      if (tp.node_needs_grad(bi)) tp.grad_of(bi) += g.colwise().sum();
    });
  }
  return out;
}

Var hadamard(Var a, Var b) {
  Tape& t = same_tape(a, b, "hadamard: tapes differ");
  check_same_shape(t.value(a), t.value(b), "hadamard: shapes differ");
  const bool ng = t.needs_grad(a) || t.needs_grad(b);
  Var out = t.make(t.value(a).cwiseProduct(t.value(b)), ng);
  if (ng) {
    t.set_back(out, [o = out.id, ai = a.id, bi = b.id](Tape& tp) {
      const Mat& g = tp.grad_of(o);
      if (tp.node_needs_grad(ai))
        tp.grad_of(ai).array() += g.array() * tp.node_value(bi).array();
      if (tp.node_needs_grad(bi))
        tp.grad_of(bi).array() += g.array() * tp.node_value(ai).array();
    });
  }
  return out;
}

Var affine(Var x, double scaleBy, double shift) {
  Tape& t = *x.tape;
  const bool ng = t.needs_grad(x);
  Var out = t.make(Mat((scaleBy * t.value(x).array() + shift).matrix()), ng);
  if (ng) {
    t.set_back(out, [o = out.id, xi = x.id, scaleBy](Tape& tp) {
      tp.grad_of(xi) += scaleBy * tp.grad_of(o);
    });
  }
  return out;
}

Var relu(Var x) {
  return unary_elementwise(
      x, [](double v) { return v > 0.0 ? v : 0.0; },
      [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

Var leaky_relu(Var x, double slope) {
  return unary_elementwise(
      x, [slope](double v) { return v > 0.0 ? v : slope * v; },
      [slope](double v, double) { return v > 0.0 ? 1.0 : slope; });
}

Var tanh_v(Var x) {
  return unary_elementwise(
      x, [](double v) { return std::tanh(v); },
      [](double, double y) { return 1.0 - y * y; });
}

Var sigmoid_v(Var x) {
  return unary_elementwise(
      x, [](double v) { return 1.0 / (1.0 + std::exp(-v)); },
      [](double, double y) { return y * (1.0 - y); });
}

Var softmax_rows(Var z, const Mat* mask) {
  Tape& t = *z.tape;
  const Mat& zv = t.value(z);
  Mat maskCopy = mask ? *mask : Mat::Ones(zv.rows(), zv.cols());
  check_same_shape(zv, maskCopy, "softmax_rows: mask shape");
  Mat y = Mat::Zero(zv.rows(), zv.cols());
  for (long i = 0; i < zv.rows(); ++i) {
    double mx = -std::numeric_limits<double>::infinity();
    for (long j = 0; j < zv.cols(); ++j)
      if (maskCopy(i, j) != 0.0) mx = std::max(mx, zv(i, j));
    if (!std::isfinite(mx)) continue;  // fully masked row stays zero
    double sum = 0.0;
    for (long j = 0; j < zv.cols(); ++j) {
      if (maskCopy(i, j) == 0.0) continue;
      y(i, j) = std::exp(zv(i, j) - mx);
      sum += y(i, j);
    }
    for (long j = 0; j < zv.cols(); ++j) y(i, j) /= sum;
  }
  const bool ng = t.needs_grad(z);
  Var out = t.make(std::move(y), ng);
  if (ng) {
    t.set_back(out, [o = out.id, zi = z.id, m = std::move(maskCopy)](Tape& tp) {
      const Mat& g = tp.grad_of(o);
      const Mat& yv = tp.node_value(o);
      Mat& gz = tp.grad_of(zi);
      for (long i = 0; i < yv.rows(); ++i) {
        double dot = 0.0;
        for (long j = 0; j < yv.cols(); ++j) dot += g(i, j) * yv(i, j);
        for (long j = 0; j < yv.cols(); ++j)
          if (m(i, j) != 0.0) gz(i, j) += yv(i, j) * (g(i, j) - dot);
      }
    });
  }
  return out;
}

Var concat_cols(const std::vector<Var>& parts) {
  if (parts.empty()) throw ShapeMismatch("concat_cols: no inputs");
  Tape& t = *parts[0].tape;
  long rows = t.value(parts[0]).rows();
  long cols = 0;
  bool ng = false;
  for (Var p : parts) {
    if (p.tape != &t) throw ShapeMismatch("concat_cols: tapes differ");
    if (t.value(p).rows() != rows) throw ShapeMismatch("concat_cols: row counts");
    cols += t.value(p).cols();
    ng = ng || t.needs_grad(p);
  }
  Mat y(rows, cols);
  long at = 0;
  std::vector<int> ids;
  std::vector<long> widths;
  for (Var p : parts) {
    const Mat& v = t.value(p);
    y.middleCols(at, v.cols()) = v;
    at += v.cols();
    ids.push_back(p.id);
    widths.push_back(v.cols());
  }
  Var out = t.make(std::move(y), ng);
  if (ng) {
    t.set_back(out, [o = out.id, ids, widths](Tape& tp) {
      const Mat& g = tp.grad_of(o);
      long at = 0;
      for (size_t k = 0; k < ids.size(); ++k) {
        if (tp.node_needs_grad(ids[k]))
          tp.grad_of(ids[k]) += g.middleCols(at, widths[k]);
        at += widths[k];
      }
    });
  }
  return out;
}

Var weighted_row_mix(const std::vector<Var>& hs, Var alpha) {
  if (hs.empty()) throw ShapeMismatch("weighted_row_mix: no inputs");
  Tape& t = *alpha.tape;
  const Mat& av = t.value(alpha);
  const long n = t.value(hs[0]).rows();
  const long w = t.value(hs[0]).cols();
  if (av.rows() != n || av.cols() != static_cast<long>(hs.size()))
    throw ShapeMismatch("weighted_row_mix: alpha shape");
  bool ng = t.needs_grad(alpha);
  std::vector<int> ids;
  for (Var h : hs) {
    check_same_shape(t.value(h), t.value(hs[0]), "weighted_row_mix: h shapes");
    ng = ng || t.needs_grad(h);
    ids.push_back(h.id);
  }
  Mat y = Mat::Zero(n, w);
  for (size_t j = 0; j < hs.size(); ++j)
    y.array() += t.value(hs[j]).array().colwise() * av.col(static_cast<long>(j)).array();
  Var out = t.make(std::move(y), ng);
  if (ng) {
    t.set_back(out, [o = out.id, ai = alpha.id, ids](Tape& tp) {
      const Mat& g = tp.grad_of(o);
      const Mat& av = tp.node_value(ai);
      for (size_t j = 0; j < ids.size(); ++j) {
        const Mat& hv = tp.node_value(ids[j]);
        if (tp.node_needs_grad(ai))
          tp.grad_of(ai).col(static_cast<long>(j)) +=
              (g.array() * hv.array()).rowwise().sum().matrix();
        if (tp.node_needs_grad(ids[j]))
          tp.grad_of(ids[j]).array() +=
              g.array().colwise() * av.col(static_cast<long>(j)).array();
      }
    });
  }
  return out;
}

Var outer_sum(Var f, Var g) {
  Tape& t = same_tape(f, g, "outer_sum: tapes differ");
  const Mat& fv = t.value(f);
  const Mat& gv = t.value(g);
  if (fv.cols() != 1 || gv.cols() != 1)
    throw ShapeMismatch("outer_sum: inputs must be column vectors");
  Mat y = fv.replicate(1, gv.rows());
  y.rowwise() += gv.col(0).transpose();
  const bool ng = t.needs_grad(f) || t.needs_grad(g);
  Var out = t.make(std::move(y), ng);
  if (ng) {
    t.set_back(out, [o = out.id, fi = f.id, gi = g.id](Tape& tp) {
      const Mat& gr = tp.grad_of(o);
      if (tp.node_needs_grad(fi)) tp.grad_of(fi) += gr.rowwise().sum();
      if (tp.node_needs_grad(gi)) tp.grad_of(gi) += gr.colwise().sum().transpose();
    });
  }
  return out;
}

Var dropout_v(Var x, double rate, std::mt19937_64& rng, bool training) {
  if (rate < 0.0 || rate >= 1.0) throw ConfigError("dropout rate must be in [0,1)");
  if (!training || rate == 0.0) return x;
  Tape& t = *x.tape;
  const Mat& xv = t.value(x);
  std::bernoulli_distribution keep(1.0 - rate);
  Mat mask(xv.rows(), xv.cols());
  const double scaleUp = 1.0 / (1.0 - rate);
  for (long i = 0; i < xv.rows(); ++i)
    for (long j = 0; j < xv.cols(); ++j) mask(i, j) = keep(rng) ? scaleUp : 0.0;
  const bool ng = t.needs_grad(x);
  Var out = t.make(xv.cwiseProduct(mask), ng);
  if (ng) {
    t.set_back(out, [o = out.id, xi = x.id, m = std::move(mask)](Tape& tp) {
      tp.grad_of(xi).array() += tp.grad_of(o).array() * m.array();
    });
  }
  return out;
}

Var mse_against(Var pred, const Mat& target) {
  Tape& t = *pred.tape;
  const Mat& pv = t.value(pred);
  check_same_shape(pv, target, "mse_against: shapes differ");
  const double count = static_cast<double>(pv.size());
  Mat diff = pv - target;
  Mat y(1, 1);
  y(0, 0) = diff.squaredNorm() / count;
  const bool ng = t.needs_grad(pred);
  Var out = t.make(std::move(y), ng);
  if (ng) {
    t.set_back(out, [o = out.id, pi = pred.id, d = std::move(diff), count](Tape& tp) {
      tp.grad_of(pi) += tp.grad_of(o)(0, 0) * (2.0 / count) * d;
    });
  }
  return out;
}

Var mean_all(Var x) {
  Tape& t = *x.tape;
  const Mat& xv = t.value(x);
  const double count = static_cast<double>(xv.size());
  Mat y(1, 1);
  y(0, 0) = xv.sum() / count;
  const bool ng = t.needs_grad(x);
  Var out = t.make(std::move(y), ng);
  if (ng) {
    t.set_back(out, [o = out.id, xi = x.id, count](Tape& tp) {
      tp.grad_of(xi).array() += tp.grad_of(o)(0, 0) / count;
    });
  }
  return out;
}

Var scale(Var x, double s) { return affine(x, s, 0.0); }

double scalar_value(Var v) {
  const Mat& m = v.tape->value(v);
  if (m.size() != 1) throw ShapeMismatch("scalar_value: not a scalar");
  return m(0, 0);
}

}  // namespace qest::nn
