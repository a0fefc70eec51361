#include "ookd/tape.hpp"

#include <cmath>

namespace ookd::nn {

namespace {

void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (!a.same_shape(b)) {
    throw ValidationError(std::string(op) + ": shape mismatch " + a.shape_str() +
                          " vs " + b.shape_str());
  }
}

}  // namespace

int Tape::emplace(Tensor value, std::function<void(Tape&, int)> back) {
  nodes_.push_back(Node{std::move(value), Tensor(), std::move(back), nullptr});
  return static_cast<int>(nodes_.size()) - 1;
}

Var Tape::leaf(Tensor v) {
  int id = emplace(std::move(v), nullptr);
  return Var{this, id};
}

Var Tape::input(Tensor v) { return leaf(std::move(v)); }

Var Tape::param(Parameter& p) {
  int id = emplace(p.value, nullptr);
  nodes_[static_cast<size_t>(id)].bound = &p;
  return Var{this, id};
}

void Tape::accum(int id, const Tensor& g) {
  Node& n = nodes_[static_cast<size_t>(id)];
  if (!n.grad.defined()) {
    n.grad = g.clone();
  } else {
    n.grad.vec() += g.vec();
  }
}

Tensor Tape::grad(Var v) const {
  const Node& n = nodes_[static_cast<size_t>(v.id)];
  if (n.grad.defined()) return n.grad;
  return Tensor::zeros(n.value.shape());
}

void Tape::backward(Var root) {
  if (root.tape != this) throw ValidationError("backward: var from another tape");
  Node& r = nodes_[static_cast<size_t>(root.id)];
  if (r.value.numel() != 1) {
    throw ValidationError("backward: root must be scalar, got " + r.value.shape_str());
  }
  accum(root.id, Tensor::full(r.value.shape(), 1.0));
  for (int id = root.id; id >= 0; --id) {
    Node& n = nodes_[static_cast<size_t>(id)];
    if (!n.grad.defined()) continue;
    if (n.backward) n.backward(*this, id);
    if (n.bound) {
      n.bound->grad.vec() += n.grad.vec();
    }
  }
}

namespace {

Var binary_op(Var a, Var b, Tensor value,
              std::function<void(Tape&, const Tensor&, int, int)> back) {
  Tape* t = a.tape;
  int aid = a.id, bid = b.id;
  int id = t->emplace(std::move(value), [aid, bid, back](Tape& tp, int self) {
    back(tp, tp.node(self).grad, aid, bid);
  });
  return Var{t, id};
}

Var unary_op(Var a, Tensor value, std::function<void(Tape&, const Tensor&, int)> back) {
  Tape* t = a.tape;
  int aid = a.id;
  int id = t->emplace(std::move(value), [aid, back](Tape& tp, int self) {
    back(tp, tp.node(self).grad, aid);
  });
  return Var{t, id};
}

}  // namespace

Var add(Var a, Var b) {
  check_same_shape(a.val(), b.val(), "add");
  Tensor y = a.val().clone();
  y.vec() += b.val().vec();
  return binary_op(a, b, std::move(y), [](Tape& tp, const Tensor& g, int aid, int bid) {
    tp.accum(aid, g);
    tp.accum(bid, g);
  });
}

Var sub(Var a, Var b) {
  check_same_shape(a.val(), b.val(), "sub");
  Tensor y = a.val().clone();
  y.vec() -= b.val().vec();
  return binary_op(a, b, std::move(y), [](Tape& tp, const Tensor& g, int aid, int bid) {
    tp.accum(aid, g);
    Tensor ng = g.clone();
    ng.vec() *= -1.0;
    tp.accum(bid, ng);
  });
}

Var mul(Var a, Var b) {
  check_same_shape(a.val(), b.val(), "mul");
  Tensor av = a.val(), bv = b.val();
  Tensor y = av.clone();
  y.vec().array() *= bv.vec().array();
  return binary_op(a, b, std::move(y),
                   [av, bv](Tape& tp, const Tensor& g, int aid, int bid) {
                     Tensor ga = g.clone();
                     ga.vec().array() *= bv.vec().array();
                     tp.accum(aid, ga);
                     Tensor gb = g.clone();
                     gb.vec().array() *= av.vec().array();
                     tp.accum(bid, gb);
                   });
}

Var vdiv(Var a, Var b) {
  Tensor av = a.val(), bv = b.val();
  bool scalar_b = bv.numel() == 1;
  if (!scalar_b) check_same_shape(av, bv, "vdiv");
  Tensor y = av.clone();
  if (scalar_b) {
    y.vec() /= bv.item();
  } else {
    y.vec().array() /= bv.vec().array();
  }
  return binary_op(a, b, std::move(y),
                   [av, bv, scalar_b](Tape& tp, const Tensor& g, int aid, int bid) {
                     if (scalar_b) {
                       double d = bv.item();
                       Tensor ga = g.clone();
                       ga.vec() /= d;
                       tp.accum(aid, ga);
                       double gb = -(g.vec().array() * av.vec().array()).sum() / (d * d);
                       tp.accum(bid, Tensor::full(bv.shape(), gb));
                     } else {
                       Tensor ga = g.clone();
                       ga.vec().array() /= bv.vec().array();
                       tp.accum(aid, ga);
                       Tensor gb = g.clone();
                       gb.vec().array() *=
                           -av.vec().array() / (bv.vec().array() * bv.vec().array());
                       tp.accum(bid, gb);
                     }
                   });
}

Var scale(Var a, double c) {
  Tensor y = a.val().clone();
  y.vec() *= c;
  return unary_op(a, std::move(y), [c](Tape& tp, const Tensor& g, int aid) {
    Tensor ga = g.clone();
    ga.vec() *= c;
    tp.accum(aid, ga);
  });
}

Var add_scalar(Var a, double c) {
  Tensor y = a.val().clone();
  y.vec().array() += c;
  return unary_op(a, std::move(y),
                  [](Tape& tp, const Tensor& g, int aid) { tp.accum(aid, g); });
}

Var vabs(Var a) {
  Tensor av = a.val();
  Tensor y = av.clone();
  y.vec() = y.vec().array().abs();
  return unary_op(a, std::move(y), [av](Tape& tp, const Tensor& g, int aid) {
    Tensor ga = g.clone();
    for (int64_t i = 0; i < ga.numel(); ++i) {
      ga[i] *= (av[i] > 0.0) ? 1.0 : (av[i] < 0.0 ? -1.0 : 0.0);
    }
    tp.accum(aid, ga);
  });
}

Var vmax(Var a, Var b) {
  check_same_shape(a.val(), b.val(), "vmax");
  Tensor av = a.val(), bv = b.val();
  Tensor y = av.clone();
  y.vec() = av.vec().cwiseMax(bv.vec());
  return binary_op(a, b, std::move(y),
                   [av, bv](Tape& tp, const Tensor& g, int aid, int bid) {
                     Tensor ga = Tensor::zeros(av.shape());
                     Tensor gb = Tensor::zeros(bv.shape());
                     for (int64_t i = 0; i < av.numel(); ++i) {
                       if (av[i] >= bv[i]) ga[i] = g[i];
                       else gb[i] = g[i];
                     }
                     tp.accum(aid, ga);
                     tp.accum(bid, gb);
                   });
}

Var vmin(Var a, Var b) {
  check_same_shape(a.val(), b.val(), "vmin");
  Tensor av = a.val(), bv = b.val();
  Tensor y = av.clone();
  y.vec() = av.vec().cwiseMin(bv.vec());
  return binary_op(a, b, std::move(y),
                   [av, bv](Tape& tp, const Tensor& g, int aid, int bid) {
                     Tensor ga = Tensor::zeros(av.shape());
                     Tensor gb = Tensor::zeros(bv.shape());
                     for (int64_t i = 0; i < av.numel(); ++i) {
                       if (av[i] <= bv[i]) ga[i] = g[i];
                       else gb[i] = g[i];
                     }
                     tp.accum(aid, ga);
                     tp.accum(bid, gb);
                   });
}

Var relu(Var a) {
  Tensor av = a.val();
  Tensor y = av.clone();
  y.vec() = y.vec().cwiseMax(0.0);
  return unary_op(a, std::move(y), [av](Tape& tp, const Tensor& g, int aid) {
    Tensor ga = g.clone();
    for (int64_t i = 0; i < ga.numel(); ++i) {
      if (av[i] <= 0.0) ga[i] = 0.0;
    }
    tp.accum(aid, ga);
  });
}

Var sigmoid(Var a) {
  Tensor y = a.val().clone();
  y.vec() = 1.0 / (1.0 + (-y.vec().array()).exp());
  Tensor yv = y;
  return unary_op(a, std::move(y), [yv](Tape& tp, const Tensor& g, int aid) {
    Tensor ga = g.clone();
    ga.vec().array() *= yv.vec().array() * (1.0 - yv.vec().array());
    tp.accum(aid, ga);
  });
}

Var vsqrt(Var a) {
  Tensor y = a.val().clone();
  y.vec() = y.vec().array().sqrt();
  Tensor yv = y;
  return unary_op(a, std::move(y), [yv](Tape& tp, const Tensor& g, int aid) {
    Tensor ga = g.clone();
    ga.vec().array() *= 0.5 / yv.vec().array();
    tp.accum(aid, ga);
  });
}

Var vlog(Var a) {
  Tensor av = a.val();
  Tensor y = av.clone();
  y.vec() = y.vec().array().log();
  return unary_op(a, std::move(y), [av](Tape& tp, const Tensor& g, int aid) {
    Tensor ga = g.clone();
    ga.vec().array() /= av.vec().array();
    tp.accum(aid, ga);
  });
}

Var add_row(Var x, Var row) {
  const Tensor& xv = x.val();
  const Tensor& rv = row.val();
  if (rv.numel() != xv.cols()) {
    throw ValidationError("add_row: row length " + rv.shape_str() +
                          " does not match columns of " + xv.shape_str());
  }
  Tensor y = xv.clone();
  y.mat().rowwise() += rv.vec().row(0);
  return binary_op(x, row, std::move(y),
                   [xshape = xv.shape(), rshape = rv.shape()](Tape& tp, const Tensor& g,
                                                              int xid, int rid) {
                     tp.accum(xid, g);
                     Tensor gr = Tensor::zeros(rshape);
                     ConstMatMap gm(g.data(), Tensor::count(xshape) / gr.numel(),
                                    gr.numel());
                     gr.vec() = gm.colwise().sum();
                     tp.accum(rid, gr);
                   });
}

Var vsum(Var a) {
  Tensor y = Tensor::scalar(a.val().vec().sum());
  Tensor av = a.val();
  return unary_op(a, std::move(y), [av](Tape& tp, const Tensor& g, int aid) {
    tp.accum(aid, Tensor::full(av.shape(), g.item()));
  });
}

Var vmean(Var a) {
  double n = static_cast<double>(a.val().numel());
  Tensor y = Tensor::scalar(a.val().vec().sum() / n);
  Tensor av = a.val();
  return unary_op(a, std::move(y), [av, n](Tape& tp, const Tensor& g, int aid) {
    tp.accum(aid, Tensor::full(av.shape(), g.item() / n));
  });
}

Var matmul(Var a, Var b) {
  const Tensor& av = a.val();
  const Tensor& bv = b.val();
  if (av.ndim() != 2 || bv.ndim() != 2 || av.dim(1) != bv.dim(0)) {
    throw ValidationError("matmul: incompatible shapes " + av.shape_str() + " x " +
                          bv.shape_str());
  }
  Tensor y({av.dim(0), bv.dim(1)});
  y.mat().noalias() = av.mat() * bv.mat();
  Tensor ac = av, bc = bv;
  return binary_op(a, b, std::move(y),
                   [ac, bc](Tape& tp, const Tensor& g, int aid, int bid) {
                     Tensor ga(ac.shape());
                     ga.mat().noalias() = g.mat() * bc.mat().transpose();
                     tp.accum(aid, ga);
                     Tensor gb(bc.shape());
                     gb.mat().noalias() = ac.mat().transpose() * g.mat();
                     tp.accum(bid, gb);
                   });
}

Var transpose(Var a) {
  const Tensor& av = a.val();
  if (av.ndim() != 2) throw ValidationError("transpose: needs 2D tensor");
  Tensor y({av.dim(1), av.dim(0)});
  y.mat() = av.mat().transpose();
  return unary_op(a, std::move(y), [](Tape& tp, const Tensor& g, int aid) {
    Tensor ga({g.dim(1), g.dim(0)});
    ga.mat() = g.mat().transpose();
    tp.accum(aid, ga);
  });
}

Var reshape(Var a, std::vector<int> shape) {
  Tensor y = a.val().reshaped(shape);
  std::vector<int> orig = a.val().shape();
  return unary_op(a, std::move(y), [orig](Tape& tp, const Tensor& g, int aid) {
    tp.accum(aid, g.reshaped(orig));
  });
}

Var slice_cols(Var a, int start, int len) {
  const Tensor& av = a.val();
  int rows = static_cast<int>(av.rows()), cols = static_cast<int>(av.cols());
  if (start < 0 || start + len > cols) throw ValidationError("slice_cols: out of range");
  Tensor y({rows, len});
  y.mat() = av.mat().middleCols(start, len);
  return unary_op(a, std::move(y),
                  [rows, cols, start, len](Tape& tp, const Tensor& g, int aid) {
                    Tensor ga = Tensor::zeros({rows, cols});
                    ga.mat().middleCols(start, len) = g.mat();
                    tp.accum(aid, ga);
                  });
}

Var slice_rows(Var a, int start, int len) {
  const Tensor& av = a.val();
  int rows = static_cast<int>(av.rows()), cols = static_cast<int>(av.cols());
  if (start < 0 || start + len > rows) throw ValidationError("slice_rows: out of range");
  Tensor y({len, cols});
  y.mat() = av.mat().middleRows(start, len);
  return unary_op(a, std::move(y),
                  [rows, cols, start, len](Tape& tp, const Tensor& g, int aid) {
                    Tensor ga = Tensor::zeros({rows, cols});
                    ga.mat().middleRows(start, len) = g.mat();
                    tp.accum(aid, ga);
                  });
}

Var concat_cols(const std::vector<Var>& vs) {
  if (vs.empty()) throw ValidationError("concat_cols: empty input");
  int rows = static_cast<int>(vs[0].val().rows());
  int total = 0;
  for (const Var& v : vs) {
    if (v.val().rows() != rows) throw ValidationError("concat_cols: row mismatch");
    total += static_cast<int>(v.val().cols());
  }
  Tensor y({rows, total});
  int off = 0;
  std::vector<int> ids;
  std::vector<int> widths;
  for (const Var& v : vs) {
    int w = static_cast<int>(v.val().cols());
    y.mat().middleCols(off, w) = v.val().mat();
    ids.push_back(v.id);
    widths.push_back(w);
    off += w;
  }
  Tape* t = vs[0].tape;
  int id = t->emplace(std::move(y), [ids, widths, rows](Tape& tp, int self) {
    const Tensor& g = tp.node(self).grad;
    int o = 0;
    for (size_t i = 0; i < ids.size(); ++i) {
      Tensor gi({rows, widths[i]});
      gi.mat() = g.mat().middleCols(o, widths[i]);
      tp.accum(ids[i], gi);
      o += widths[i];
    }
  });
  return Var{t, id};
}

Var concat_rows(const std::vector<Var>& vs) {
  if (vs.empty()) throw ValidationError("concat_rows: empty input");
  int cols = static_cast<int>(vs[0].val().cols());
  int total = 0;
  for (const Var& v : vs) {
    if (v.val().cols() != cols) throw ValidationError("concat_rows: column mismatch");
    total += static_cast<int>(v.val().rows());
  }
  Tensor y({total, cols});
  int off = 0;
  std::vector<int> ids, heights;
  for (const Var& v : vs) {
    int h = static_cast<int>(v.val().rows());
    y.mat().middleRows(off, h) = v.val().mat();
    ids.push_back(v.id);
    heights.push_back(h);
    off += h;
  }
  Tape* t = vs[0].tape;
  int id = t->emplace(std::move(y), [ids, heights, cols](Tape& tp, int self) {
    const Tensor& g = tp.node(self).grad;
    int o = 0;
    for (size_t i = 0; i < ids.size(); ++i) {
      Tensor gi({heights[i], cols});
      gi.mat() = g.mat().middleRows(o, heights[i]);
      tp.accum(ids[i], gi);
      o += heights[i];
    }
  });
  return Var{t, id};
}

Var gather_rows(Var a, std::vector<int> idx) {
  const Tensor& av = a.val();
  int cols = static_cast<int>(av.cols());
  int rows = static_cast<int>(av.rows());
  Tensor y({static_cast<int>(idx.size()), cols});
  for (size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] < 0 || idx[i] >= rows) throw ValidationError("gather_rows: index out of range");
    y.mat().row(static_cast<int>(i)) = av.mat().row(idx[i]);
  }
  return unary_op(a, std::move(y),
                  [idx, rows, cols](Tape& tp, const Tensor& g, int aid) {
                    Tensor ga = Tensor::zeros({rows, cols});
                    for (size_t i = 0; i < idx.size(); ++i) {
                      ga.mat().row(idx[i]) += g.mat().row(static_cast<int>(i));
                    }
                    tp.accum(aid, ga);
                  });
}

Var softmax_rows(Var a) {
  const Tensor& av = a.val();
  Tensor y = av.clone();
  auto m = y.mat();
  for (int r = 0; r < m.rows(); ++r) {
    double mx = m.row(r).maxCoeff();
    m.row(r) = (m.row(r).array() - mx).exp();
    m.row(r) /= m.row(r).sum();
  }
  Tensor yv = y;
  return unary_op(a, std::move(y), [yv](Tape& tp, const Tensor& g, int aid) {
    Tensor ga = g.clone();
    auto gm = ga.mat();
    auto ym = yv.mat();
    for (int r = 0; r < gm.rows(); ++r) {
      double dot = (gm.row(r).array() * ym.row(r).array()).sum();
      gm.row(r) = (gm.row(r).array() - dot) * ym.row(r).array();
    }
    tp.accum(aid, ga);
  });
}

Var layer_norm_rows(Var x, Var gamma, Var beta, double eps) {
  const Tensor& xv = x.val();
  int rows = static_cast<int>(xv.rows()), cols = static_cast<int>(xv.cols());
  Tensor xhat({rows, cols});
  std::vector<double> inv_std(static_cast<size_t>(rows));
  for (int r = 0; r < rows; ++r) {
    double mean = xv.mat().row(r).mean();
    double var = (xv.mat().row(r).array() - mean).square().mean();
    double is = 1.0 / std::sqrt(var + eps);
    inv_std[static_cast<size_t>(r)] = is;
    xhat.mat().row(r) = (xv.mat().row(r).array() - mean) * is;
  }
  Tensor y({rows, cols});
  y.mat() = xhat.mat().array().rowwise() * gamma.val().vec().row(0).array();
  y.mat().rowwise() += beta.val().vec().row(0);

  Tensor gv = gamma.val();
  Tape* t = x.tape;
  int xid = x.id, gid = gamma.id, bid = beta.id;
  int id = t->emplace(std::move(y), [xid, gid, bid, xhat, gv, inv_std, rows,
                                     cols](Tape& tp, int self) {
    const Tensor& g = tp.node(self).grad;
    Tensor gb = Tensor::zeros(gv.shape());
    gb.vec() = g.mat().colwise().sum();
    tp.accum(bid, gb);
    Tensor gg = Tensor::zeros(gv.shape());
    gg.vec() = (g.mat().array() * xhat.mat().array()).colwise().sum();
    tp.accum(gid, gg);
    Tensor gx({rows, cols});
    double n = static_cast<double>(cols);
    for (int r = 0; r < rows; ++r) {
      auto gy = (g.mat().row(r).array() * gv.vec().row(0).array()).eval();
      double sum_gy = gy.sum();
      double sum_gy_xhat = (gy * xhat.mat().row(r).array()).sum();
      gx.mat().row(r) = inv_std[static_cast<size_t>(r)] *
                        (gy - sum_gy / n - xhat.mat().row(r).array() * sum_gy_xhat / n);
    }
    tp.accum(xid, gx);
  });
  return Var{t, id};
}

Var unit_rows(Var x) {
  const Tensor& xv = x.val();
  int rows = static_cast<int>(xv.rows()), cols = static_cast<int>(xv.cols());
  constexpr double kTiny = 1e-12;
  Tensor y({rows, cols});
  std::vector<double> norms(static_cast<size_t>(rows));
  std::vector<bool> degenerate(static_cast<size_t>(rows), false);
  for (int r = 0; r < rows; ++r) {
    double n = xv.mat().row(r).norm();
    norms[static_cast<size_t>(r)] = n;
    if (n < kTiny) {
      degenerate[static_cast<size_t>(r)] = true;
      y.mat().row(r).setZero();
      y.at(r, 0) = 1.0;
    } else {
      y.mat().row(r) = xv.mat().row(r) / n;
    }
  }
  Tensor xc = xv;
  return unary_op(x, std::move(y),
                  [xc, norms, degenerate, rows, cols](Tape& tp, const Tensor& g, int aid) {
                    Tensor gx = Tensor::zeros({rows, cols});
                    for (int r = 0; r < rows; ++r) {
                      if (degenerate[static_cast<size_t>(r)]) continue;
                      double n = norms[static_cast<size_t>(r)];
                      double xdotg = (xc.mat().row(r).array() * g.mat().row(r).array()).sum();
                      gx.mat().row(r) =
                          g.mat().row(r) / n - xc.mat().row(r) * (xdotg / (n * n * n));
                    }
                    tp.accum(aid, gx);
                  });
}

namespace {

struct ConvDims {
  int cin, h, w, cout, k, stride, pad, oh, ow;
};

// col: [OH*OW, Cin*k*k]
Tensor im2col(const Tensor& x, const ConvDims& d) {
  Tensor col({d.oh * d.ow, d.cin * d.k * d.k});
  double* out = col.data();
  const double* in = x.data();
  for (int oy = 0; oy < d.oh; ++oy) {
    for (int ox = 0; ox < d.ow; ++ox) {
      double* row = out + static_cast<int64_t>(oy * d.ow + ox) * (d.cin * d.k * d.k);
      int idx = 0;
      for (int c = 0; c < d.cin; ++c) {
        const double* plane = in + static_cast<int64_t>(c) * d.h * d.w;
        for (int ky = 0; ky < d.k; ++ky) {
          int iy = oy * d.stride - d.pad + ky;
          for (int kx = 0; kx < d.k; ++kx) {
            int ix = ox * d.stride - d.pad + kx;
            row[idx++] = (iy >= 0 && iy < d.h && ix >= 0 && ix < d.w)
                             ? plane[static_cast<int64_t>(iy) * d.w + ix]
                             : 0.0;
          }
        }
      }
    }
  }
  return col;
}

Tensor col2im(const Tensor& col, const ConvDims& d) {
  Tensor x = Tensor::zeros({d.cin, d.h, d.w});
  double* out = x.data();
  const double* in = col.data();
  for (int oy = 0; oy < d.oh; ++oy) {
    for (int ox = 0; ox < d.ow; ++ox) {
      const double* row = in + static_cast<int64_t>(oy * d.ow + ox) * (d.cin * d.k * d.k);
      int idx = 0;
      for (int c = 0; c < d.cin; ++c) {
        double* plane = out + static_cast<int64_t>(c) * d.h * d.w;
        for (int ky = 0; ky < d.k; ++ky) {
          int iy = oy * d.stride - d.pad + ky;
          for (int kx = 0; kx < d.k; ++kx) {
            int ix = ox * d.stride - d.pad + kx;
            if (iy >= 0 && iy < d.h && ix >= 0 && ix < d.w) {
              plane[static_cast<int64_t>(iy) * d.w + ix] += row[idx];
            }
            ++idx;
          }
        }
      }
    }
  }
  return x;
}

}  // namespace

Var conv2d(Var x, Var w, Var b, int k, int stride, int pad) {
  const Tensor& xv = x.val();
  const Tensor& wv = w.val();
  const Tensor& bv = b.val();
  if (xv.ndim() != 3) throw ValidationError("conv2d: input must be [C,H,W]");
  ConvDims d;
  d.cin = xv.dim(0);
  d.h = xv.dim(1);
  d.w = xv.dim(2);
  d.cout = wv.dim(0);
  d.k = k;
  d.stride = stride;
  d.pad = pad;
  if (wv.dim(1) != d.cin * k * k) {
    throw ValidationError("conv2d: weight shape " + wv.shape_str() +
                          " inconsistent with input channels");
  }
  d.oh = (d.h + 2 * pad - k) / stride + 1;
  d.ow = (d.w + 2 * pad - k) / stride + 1;

  Tensor col = im2col(xv, d);
  Tensor y({d.cout, d.oh, d.ow});
  MatMap ym(y.data(), d.cout, d.oh * d.ow);
  ym.noalias() = wv.mat() * col.mat().transpose();
  ym.colwise() += Eigen::Map<const Eigen::VectorXd>(bv.data(), d.cout);

  Tensor wc = wv;
  Tape* t = x.tape;
  int xid = x.id, wid = w.id, bid = b.id;
  int id = t->emplace(std::move(y), [xid, wid, bid, col, wc, d](Tape& tp, int self) {
    const Tensor& g = tp.node(self).grad;
    ConstMatMap gm(g.data(), d.cout, d.oh * d.ow);
    Tensor gb({d.cout});
    Eigen::Map<Eigen::VectorXd>(gb.data(), d.cout) = gm.rowwise().sum();
    tp.accum(bid, gb);
    Tensor gw(wc.shape());
    gw.mat().noalias() = gm * col.mat();
    tp.accum(wid, gw);
    Tensor gcol({d.oh * d.ow, d.cin * d.k * d.k});
    gcol.mat().noalias() = gm.transpose() * wc.mat();
    tp.accum(xid, col2im(gcol, d));
  });
  return Var{t, id};
}

Var weighted_ce_rows(Var logits, std::vector<int> targets, std::vector<double> weights) {
  const Tensor& lv = logits.val();
  int rows = static_cast<int>(lv.rows());
  int cols = static_cast<int>(lv.cols());
  if (static_cast<int>(targets.size()) != rows || static_cast<int>(weights.size()) != rows) {
    throw ValidationError("weighted_ce_rows: targets/weights length mismatch");
  }
  double wsum = 0.0;
  for (double w : weights) wsum += w;
  if (wsum <= 0.0) throw ValidationError("weighted_ce_rows: weights sum to zero");

  Tensor probs({rows, cols});
  double loss = 0.0;
  for (int r = 0; r < rows; ++r) {
    int tgt = targets[static_cast<size_t>(r)];
    if (tgt < 0 || tgt >= cols) {
      throw ValidationError("weighted_ce_rows: class index out of range");
    }
    double mx = lv.mat().row(r).maxCoeff();
    auto ex = (lv.mat().row(r).array() - mx).exp().eval();
    double z = ex.sum();
    probs.mat().row(r) = ex / z;
    loss += weights[static_cast<size_t>(r)] * (std::log(z) + mx - lv.at(r, tgt));
  }
  loss /= wsum;

  return unary_op(logits, Tensor::scalar(loss),
                  [probs, targets, weights, wsum, rows, cols](Tape& tp, const Tensor& g,
                                                              int aid) {
                    double s = g.item() / wsum;
                    Tensor gl = probs.clone();
                    for (int r = 0; r < rows; ++r) {
                      gl.at(r, targets[static_cast<size_t>(r)]) -= 1.0;
                      gl.mat().row(r) *= weights[static_cast<size_t>(r)] * s;
                    }
                    tp.accum(aid, gl);
                  });
}

Var bce_with_logits_mean(Var logits, Tensor targets) {
  const Tensor& lv = logits.val();
  if (lv.numel() != targets.numel()) {
    throw ValidationError("bce_with_logits_mean: shape mismatch");
  }
  double n = static_cast<double>(lv.numel());
  double loss = 0.0;
  for (int64_t i = 0; i < lv.numel(); ++i) {
    double z = lv[i], t = targets[i];
    loss += std::max(z, 0.0) - z * t + std::log1p(std::exp(-std::fabs(z)));
  }
  loss /= n;
  Tensor lc = lv;
  return unary_op(logits, Tensor::scalar(loss),
                  [lc, targets, n](Tape& tp, const Tensor& g, int aid) {
                    double s = g.item() / n;
                    Tensor gl = Tensor::zeros(lc.shape());
                    for (int64_t i = 0; i < lc.numel(); ++i) {
                      double sig = 1.0 / (1.0 + std::exp(-lc[i]));
                      gl[i] = (sig - targets[i]) * s;
                    }
                    tp.accum(aid, gl);
                  });
}

}  // namespace ookd::nn
