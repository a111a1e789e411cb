#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>

#include "mmsbr/kernels.hpp"
#include "mmsbr/tape.hpp"

namespace mmsbr::diff {

namespace {

[[noreturn]] void shape_error(std::string_view op, const Tensor& a, const Tensor& b) {
  throw std::invalid_argument(std::string(op) + ": shape mismatch " + a.shape_string() + " vs " +
                              b.shape_string());
}

Tape& same_tape(Var a, Var b) {
  if (a.tape == nullptr || a.tape != b.tape) throw std::invalid_argument("ops on different tapes");
  return *a.tape;
}

template <class F>
Var unary(std::string_view op, Var x, F&& forward_and_deriv) {
  // forward_and_deriv(v) -> pair(value, derivative at v)
  Tape& t = *x.tape;
  const Tensor& xv = x.value();
  Tensor out(xv.rows(), xv.cols());
  Tensor deriv(xv.rows(), xv.cols());
  for (std::size_t i = 0; i < xv.size(); ++i) {
    auto [y, dy] = forward_and_deriv(xv[i]);
    out[i] = y;
    deriv[i] = dy;
  }
  const std::size_t xi = x.id;
  return t.record(op, std::move(out), {xi}, [xi, deriv = std::move(deriv)](Tape& tp, std::size_t self) {
    if (!tp.requires_grad(xi)) return;
    const Tensor& g = tp.out_grad(self);
    Tensor& gx = tp.accum(xi);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * deriv[i];
  });
}

}  // namespace

Var matmul(Var a, Var b) {
  Tape& t = same_tape(a, b);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (av.cols() != bv.rows()) shape_error("matmul", av, bv);
  Tensor out(av.rows(), bv.cols());
  kernels::gemm({av.rows(), bv.cols(), av.cols()}, av.data(), bv.data(), out.data());
  const std::size_t ai = a.id, bi = b.id;
  return t.record("matmul", std::move(out), {ai, bi}, [ai, bi](Tape& tp, std::size_t self) {
    const Tensor& g = tp.out_grad(self);
    const Tensor& av = tp.value(ai);
    const Tensor& bv = tp.value(bi);
    if (tp.requires_grad(ai)) {  // dA = G B^T
      kernels::gemm({av.rows(), av.cols(), bv.cols(), false, true}, g.data(), bv.data(),
                    tp.accum(ai).data());
    }
    if (tp.requires_grad(bi)) {  // dB = A^T G
      kernels::gemm({bv.rows(), bv.cols(), av.rows(), true, false}, av.data(), g.data(),
                    tp.accum(bi).data());
    }
  });
}

Var matmul_nt(Var a, Var b) {
  Tape& t = same_tape(a, b);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (av.cols() != bv.cols()) shape_error("matmul_nt", av, bv);
  Tensor out(av.rows(), bv.rows());
  kernels::gemm({av.rows(), bv.rows(), av.cols(), false, true}, av.data(), bv.data(), out.data());
  const std::size_t ai = a.id, bi = b.id;
  return t.record("matmul_nt", std::move(out), {ai, bi}, [ai, bi](Tape& tp, std::size_t self) {
    const Tensor& g = tp.out_grad(self);  // m x n
    const Tensor& av = tp.value(ai);      // m x k
    const Tensor& bv = tp.value(bi);      // n x k
    if (tp.requires_grad(ai)) {  // dA = G B
      kernels::gemm({av.rows(), av.cols(), bv.rows()}, g.data(), bv.data(), tp.accum(ai).data());
    }
    if (tp.requires_grad(bi)) {  // dB = G^T A
      kernels::gemm({bv.rows(), bv.cols(), av.rows(), true, false}, g.data(), av.data(),
                    tp.accum(bi).data());
    }
  });
}

namespace {
template <class F, class DA, class DB>
Var elementwise2(std::string_view op, Var a, Var b, F f, DA da, DB db) {
  Tape& t = same_tape(a, b);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (!av.same_shape(bv)) shape_error(op, av, bv);
  Tensor out(av.rows(), av.cols());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = f(av[i], bv[i]);
  const std::size_t ai = a.id, bi = b.id;
  return t.record(op, std::move(out), {ai, bi}, [ai, bi, da, db](Tape& tp, std::size_t self) {
    const Tensor& g = tp.out_grad(self);
    const Tensor& av = tp.value(ai);
    const Tensor& bv = tp.value(bi);
    if (tp.requires_grad(ai)) {
      Tensor& ga = tp.accum(ai);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * da(av[i], bv[i]);
    }
    if (tp.requires_grad(bi)) {
      Tensor& gb = tp.accum(bi);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * db(av[i], bv[i]);
    }
  });
}
}  // namespace

Var add(Var a, Var b) {
  return elementwise2(
      "add", a, b, [](double x, double y) { return x + y; }, [](double, double) { return 1.0; },
      [](double, double) { return 1.0; });
}

Var sub(Var a, Var b) {
  return elementwise2(
      "sub", a, b, [](double x, double y) { return x - y; }, [](double, double) { return 1.0; },
      [](double, double) { return -1.0; });
}

Var mul(Var a, Var b) {
  return elementwise2(
      "mul", a, b, [](double x, double y) { return x * y; }, [](double, double y) { return y; },
      [](double x, double) { return x; });
}

Var add_row(Var x, Var row) {
  Tape& t = same_tape(x, row);
  const Tensor& xv = x.value();
  const Tensor& rv = row.value();
  if (rv.rows() != 1 || rv.cols() != xv.cols()) shape_error("add_row", xv, rv);
  Tensor out = xv;
  for (std::size_t r = 0; r < xv.rows(); ++r)
    for (std::size_t c = 0; c < xv.cols(); ++c) out(r, c) += rv[c];
  const std::size_t xi = x.id, ri = row.id;
  return t.record("add_row", std::move(out), {xi, ri}, [xi, ri](Tape& tp, std::size_t self) {
    const Tensor& g = tp.out_grad(self);
    if (tp.requires_grad(xi)) {
      Tensor& gx = tp.accum(xi);
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
    }
    if (tp.requires_grad(ri)) {
      Tensor& gr = tp.accum(ri);
      for (std::size_t r = 0; r < g.rows(); ++r)
        for (std::size_t c = 0; c < g.cols(); ++c) gr[c] += g(r, c);
    }
  });
}

Var mul_row(Var x, Var row) {
  Tape& t = same_tape(x, row);
  const Tensor& xv = x.value();
  const Tensor& rv = row.value();
  if (rv.rows() != 1 || rv.cols() != xv.cols()) shape_error("mul_row", xv, rv);
  Tensor out = xv;
  for (std::size_t r = 0; r < xv.rows(); ++r)
    for (std::size_t c = 0; c < xv.cols(); ++c) out(r, c) *= rv[c];
  const std::size_t xi = x.id, ri = row.id;
  return t.record("mul_row", std::move(out), {xi, ri}, [xi, ri](Tape& tp, std::size_t self) {
    const Tensor& g = tp.out_grad(self);
    const Tensor& xv = tp.value(xi);
    const Tensor& rv = tp.value(ri);
    if (tp.requires_grad(xi)) {
      Tensor& gx = tp.accum(xi);
      for (std::size_t r = 0; r < g.rows(); ++r)
        for (std::size_t c = 0; c < g.cols(); ++c) gx(r, c) += g(r, c) * rv[c];
    }
    if (tp.requires_grad(ri)) {
      Tensor& gr = tp.accum(ri);
      for (std::size_t r = 0; r < g.rows(); ++r)
        for (std::size_t c = 0; c < g.cols(); ++c) gr[c] += g(r, c) * xv(r, c);
    }
  });
}

Var mul_rows(Var x, Var col) {
  Tape& t = same_tape(x, col);
  const Tensor& xv = x.value();
  const Tensor& cv = col.value();
  if (cv.cols() != 1 || cv.rows() != xv.rows()) shape_error("mul_rows", xv, cv);
  Tensor out = xv;
  for (std::size_t r = 0; r < xv.rows(); ++r)
    for (std::size_t c = 0; c < xv.cols(); ++c) out(r, c) *= cv[r];
  const std::size_t xi = x.id, ci = col.id;
  return t.record("mul_rows", std::move(out), {xi, ci}, [xi, ci](Tape& tp, std::size_t self) {
    const Tensor& g = tp.out_grad(self);
    const Tensor& xv = tp.value(xi);
    const Tensor& cv = tp.value(ci);
    if (tp.requires_grad(xi)) {
      Tensor& gx = tp.accum(xi);
      for (std::size_t r = 0; r < g.rows(); ++r)
        for (std::size_t c = 0; c < g.cols(); ++c) gx(r, c) += g(r, c) * cv[r];
    }
    if (tp.requires_grad(ci)) {
      Tensor& gc = tp.accum(ci);
      for (std::size_t r = 0; r < g.rows(); ++r) {
        double acc = 0.0;
        for (std::size_t c = 0; c < g.cols(); ++c) acc += g(r, c) * xv(r, c);
        gc[r] += acc;
      }
    }
  });
}

Var scale(Var x, double s) {
  return unary("scale", x, [s](double v) { return std::pair{v * s, s}; });
}

Var add_scalar(Var x, double s) {
  return unary("add_scalar", x, [s](double v) { return std::pair{v + s, 1.0}; });
}

Var concat_cols(const std::vector<Var>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_cols: no inputs");
  Tape& t = *parts.front().tape;
  const std::size_t rows = parts.front().rows();
  std::size_t cols = 0;
  std::vector<std::size_t> ids;
  std::vector<std::size_t> offsets;
  for (Var p : parts) {
    same_tape(parts.front(), p);
    if (p.rows() != rows) shape_error("concat_cols", parts.front().value(), p.value());
    offsets.push_back(cols);
    cols += p.cols();
    ids.push_back(p.id);
  }
  Tensor out(rows, cols);
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const Tensor& pv = parts[k].value();
    for (std::size_t r = 0; r < rows; ++r)
      std::copy_n(pv.data() + r * pv.cols(), pv.cols(), out.data() + r * cols + offsets[k]);
  }
  return t.record("concat_cols", std::move(out), ids, [ids, offsets](Tape& tp, std::size_t self) {
    const Tensor& g = tp.out_grad(self);
    for (std::size_t k = 0; k < ids.size(); ++k) {
      if (!tp.requires_grad(ids[k])) continue;
      Tensor& gp = tp.accum(ids[k]);
      for (std::size_t r = 0; r < g.rows(); ++r)
        for (std::size_t c = 0; c < gp.cols(); ++c) gp(r, c) += g(r, offsets[k] + c);
    }
  });
}

Var concat_rows(const std::vector<Var>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_rows: no inputs");
  Tape& t = *parts.front().tape;
  const std::size_t cols = parts.front().cols();
  std::size_t rows = 0;
  std::vector<std::size_t> ids;
  std::vector<std::size_t> offsets;
  for (Var p : parts) {
    same_tape(parts.front(), p);
    if (p.cols() != cols) shape_error("concat_rows", parts.front().value(), p.value());
    offsets.push_back(rows);
    rows += p.rows();
    ids.push_back(p.id);
  }
  Tensor out(rows, cols);
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const Tensor& pv = parts[k].value();
    std::copy_n(pv.data(), pv.size(), out.data() + offsets[k] * cols);
  }
  return t.record("concat_rows", std::move(out), ids, [ids, offsets](Tape& tp, std::size_t self) {
    const Tensor& g = tp.out_grad(self);
    for (std::size_t k = 0; k < ids.size(); ++k) {
      if (!tp.requires_grad(ids[k])) continue;
      Tensor& gp = tp.accum(ids[k]);
      const double* src = g.data() + offsets[k] * g.cols();
      for (std::size_t i = 0; i < gp.size(); ++i) gp[i] += src[i];
    }
  });
}

Var slice_cols(Var x, std::size_t begin, std::size_t count) {
  const Tensor& xv = x.value();
  if (begin + count > xv.cols()) {
    throw std::invalid_argument("slice_cols: range [" + std::to_string(begin) + "," +
                                std::to_string(begin + count) + ") outside " + xv.shape_string());
  }
  Tensor out(xv.rows(), count);
  for (std::size_t r = 0; r < xv.rows(); ++r)
    std::copy_n(xv.data() + r * xv.cols() + begin, count, out.data() + r * count);
  const std::size_t xi = x.id;
  return x.tape->record("slice_cols", std::move(out), {xi}, [xi, begin](Tape& tp, std::size_t self) {
    const Tensor& g = tp.out_grad(self);
    Tensor& gx = tp.accum(xi);
    for (std::size_t r = 0; r < g.rows(); ++r)
      for (std::size_t c = 0; c < g.cols(); ++c) gx(r, begin + c) += g(r, c);
  });
}

Var slice_rows(Var x, std::size_t begin, std::size_t count) {
  const Tensor& xv = x.value();
  if (begin + count > xv.rows()) {
    throw std::invalid_argument("slice_rows: range [" + std::to_string(begin) + "," +
                                std::to_string(begin + count) + ") outside " + xv.shape_string());
  }
  Tensor out(count, xv.cols());
  std::copy_n(xv.data() + begin * xv.cols(), count * xv.cols(), out.data());
  const std::size_t xi = x.id;
  return x.tape->record("slice_rows", std::move(out), {xi}, [xi, begin](Tape& tp, std::size_t self) {
    const Tensor& g = tp.out_grad(self);
    Tensor& gx = tp.accum(xi);
    double* dst = gx.data() + begin * gx.cols();
    for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i];
  });
}

Var gather_rows(Var x, std::vector<std::size_t> index) {
  const Tensor& xv = x.value();
  Tensor out(index.size(), xv.cols());
  for (std::size_t r = 0; r < index.size(); ++r) {
    if (index[r] >= xv.rows()) {
      throw std::out_of_range("gather_rows: index " + std::to_string(index[r]) + " outside " +
                              xv.shape_string());
    }
    std::copy_n(xv.data() + index[r] * xv.cols(), xv.cols(), out.data() + r * xv.cols());
  }
  const std::size_t xi = x.id;
  return x.tape->record("gather_rows", std::move(out), {xi},
                        [xi, index = std::move(index)](Tape& tp, std::size_t self) {
                          const Tensor& g = tp.out_grad(self);
                          Tensor& gx = tp.accum(xi);
                          const std::size_t c = g.cols();
                          for (std::size_t r = 0; r < index.size(); ++r)
                            for (std::size_t j = 0; j < c; ++j) gx(index[r], j) += g(r, j);
                        });
}

Var reshape(Var x, std::size_t rows, std::size_t cols) {
  const Tensor& xv = x.value();
  if (rows * cols != xv.size()) {
    throw std::invalid_argument("reshape: " + xv.shape_string() + " to (" + std::to_string(rows) +
                                "," + std::to_string(cols) + ")");
  }
  const std::size_t xi = x.id;
  return x.tape->record("reshape", Tensor(rows, cols, xv.values()), {xi}, [xi](Tape& tp, std::size_t self) {
    const Tensor& g = tp.out_grad(self);
    Tensor& gx = tp.accum(xi);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
  });
}

Var pick(Var x, std::vector<std::size_t> cols) {
  const Tensor& xv = x.value();
  if (cols.size() != xv.rows()) {
    throw std::invalid_argument("pick: " + std::to_string(cols.size()) + " indices for " +
                                xv.shape_string());
  }
  Tensor out(xv.rows(), 1);
  for (std::size_t r = 0; r < xv.rows(); ++r) {
    if (cols[r] >= xv.cols()) throw std::out_of_range("pick: column index out of range");
    out[r] = xv(r, cols[r]);
  }
  const std::size_t xi = x.id;
  return x.tape->record("pick", std::move(out), {xi}, [xi, cols = std::move(cols)](Tape& tp, std::size_t self) {
    const Tensor& g = tp.out_grad(self);
    Tensor& gx = tp.accum(xi);
    for (std::size_t r = 0; r < cols.size(); ++r) gx(r, cols[r]) += g[r];
  });
}

Var sum(Var x) {
  const Tensor& xv = x.value();
  double acc = 0.0;
  for (double v : xv.values()) acc += v;
  const std::size_t xi = x.id;
  return x.tape->record("sum", Tensor::scalar(acc), {xi}, [xi](Tape& tp, std::size_t self) {
    const double g = tp.out_grad(self)[0];
    Tensor& gx = tp.accum(xi);
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g;
  });
}

Var mean(Var x) {
  const std::size_t n = x.value().size();
  if (n == 0) throw std::invalid_argument("mean of empty tensor");
  return scale(sum(x), 1.0 / static_cast<double>(n));
}

Var row_sum(Var x) {
  const Tensor& xv = x.value();
  Tensor out(xv.rows(), 1);
  for (std::size_t r = 0; r < xv.rows(); ++r) {
    double acc = 0.0;
    for (std::size_t c = 0; c < xv.cols(); ++c) acc += xv(r, c);
    out[r] = acc;
  }
  const std::size_t xi = x.id;
  return x.tape->record("row_sum", std::move(out), {xi}, [xi](Tape& tp, std::size_t self) {
    const Tensor& g = tp.out_grad(self);
    Tensor& gx = tp.accum(xi);
    for (std::size_t r = 0; r < gx.rows(); ++r)
      for (std::size_t c = 0; c < gx.cols(); ++c) gx(r, c) += g[r];
  });
}

Var softmax_rows(Var x) {
  const Tensor& xv = x.value();
  Tensor out(xv.rows(), xv.cols());
  for (std::size_t r = 0; r < xv.rows(); ++r) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < xv.cols(); ++c) mx = std::max(mx, xv(r, c));
    double z = 0.0;
    for (std::size_t c = 0; c < xv.cols(); ++c) {
      out(r, c) = std::exp(xv(r, c) - mx);
      z += out(r, c);
    }
    for (std::size_t c = 0; c < xv.cols(); ++c) out(r, c) /= z;
  }
  const std::size_t xi = x.id;
  return x.tape->record("softmax_rows", std::move(out), {xi}, [xi](Tape& tp, std::size_t self) {
    const Tensor& g = tp.out_grad(self);
    const Tensor& y = tp.value(self);
    Tensor& gx = tp.accum(xi);
    for (std::size_t r = 0; r < y.rows(); ++r) {
      double dot = 0.0;
      for (std::size_t c = 0; c < y.cols(); ++c) dot += g(r, c) * y(r, c);
      for (std::size_t c = 0; c < y.cols(); ++c) gx(r, c) += y(r, c) * (g(r, c) - dot);
    }
  });
}

Var layer_norm(Var x, Var gain, Var bias, double eps) {
  Tape& t = same_tape(x, gain);
  same_tape(x, bias);
  const Tensor& xv = x.value();
  const std::size_t n = xv.cols();
  if (gain.rows() != 1 || gain.cols() != n) shape_error("layer_norm gain", xv, gain.value());
  if (bias.rows() != 1 || bias.cols() != n) shape_error("layer_norm bias", xv, bias.value());
  Tensor xhat(xv.rows(), n);
  Tensor inv_std(xv.rows(), 1);
  Tensor out(xv.rows(), n);
  const Tensor& gv = gain.value();
  const Tensor& bv = bias.value();
  for (std::size_t r = 0; r < xv.rows(); ++r) {
    double mu = 0.0;
    for (std::size_t c = 0; c < n; ++c) mu += xv(r, c);
    mu /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t c = 0; c < n; ++c) var += (xv(r, c) - mu) * (xv(r, c) - mu);
    var /= static_cast<double>(n);
    const double is = 1.0 / std::sqrt(var + eps);
    inv_std[r] = is;
    for (std::size_t c = 0; c < n; ++c) {
      xhat(r, c) = (xv(r, c) - mu) * is;
      out(r, c) = xhat(r, c) * gv[c] + bv[c];
    }
  }
  const std::size_t xi = x.id, gi = gain.id, bi = bias.id;
  return t.record("layer_norm", std::move(out), {xi, gi, bi},
                  [xi, gi, bi, xhat = std::move(xhat), inv_std = std::move(inv_std)](Tape& tp,
                                                                                     std::size_t self) {
                    const Tensor& g = tp.out_grad(self);
                    const Tensor& gv = tp.value(gi);
                    const std::size_t n = g.cols();
                    if (tp.requires_grad(gi) || tp.requires_grad(bi)) {
                      Tensor* gg = tp.requires_grad(gi) ? &tp.accum(gi) : nullptr;
                      Tensor* gb = tp.requires_grad(bi) ? &tp.accum(bi) : nullptr;
                      for (std::size_t r = 0; r < g.rows(); ++r)
                        for (std::size_t c = 0; c < n; ++c) {
                          if (gg) (*gg)[c] += g(r, c) * xhat(r, c);
                          if (gb) (*gb)[c] += g(r, c);
                        }
                    }
                    if (!tp.requires_grad(xi)) return;
                    Tensor& gx = tp.accum(xi);
                    for (std::size_t r = 0; r < g.rows(); ++r) {
                      double m1 = 0.0, m2 = 0.0;
                      for (std::size_t c = 0; c < n; ++c) {
                        const double dxh = g(r, c) * gv[c];
                        m1 += dxh;
                        m2 += dxh * xhat(r, c);
                      }
                      m1 /= static_cast<double>(n);
                      m2 /= static_cast<double>(n);
                      for (std::size_t c = 0; c < n; ++c) {
                        const double dxh = g(r, c) * gv[c];
                        gx(r, c) += inv_std[r] * (dxh - m1 - xhat(r, c) * m2);
                      }
                    }
                  });
}

Var masked_fill(Var x, const Tensor& mask, double value) {
  const Tensor& xv = x.value();
  if (!mask.same_shape(xv)) shape_error("masked_fill", xv, mask);
  Tensor out = xv;
  for (std::size_t i = 0; i < out.size(); ++i)
    if (mask[i] != 0.0) out[i] = value;
  const std::size_t xi = x.id;
  return x.tape->record("masked_fill", std::move(out), {xi}, [xi, mask](Tape& tp, std::size_t self) {
    const Tensor& g = tp.out_grad(self);
    Tensor& gx = tp.accum(xi);
    for (std::size_t i = 0; i < g.size(); ++i)
      if (mask[i] == 0.0) gx[i] += g[i];
  });
}

Var relu(Var x) {
  return unary("relu", x, [](double v) { return v > 0.0 ? std::pair{v, 1.0} : std::pair{0.0, 0.0}; });
}

Var sigmoid(Var x) {
  return unary("sigmoid", x, [](double v) {
    const double s = v >= 0.0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v));
    return std::pair{s, s * (1.0 - s)};
  });
}

Var elu(Var x) {
  return unary("elu", x, [](double v) {
    if (v > 0.0) return std::pair{v, 1.0};
    const double e = std::exp(v);
    return std::pair{std::expm1(v), e};
  });
}

Var positive(Var x, double eps) {
  return unary("positive", x, [eps](double v) {
    if (v > 0.0) return std::pair{v + 1.0 + eps, 1.0};
    const double e = std::exp(v);
    return std::pair{e + eps, e};
  });
}

Var sqrt_guarded(Var x, double eps) {
  return unary("sqrt", x, [eps](double v) {
    return std::pair{std::sqrt(std::max(v, 0.0)), 0.5 / std::sqrt(std::max(v, eps))};
  });
}

Var square(Var x) {
  return unary("square", x, [](double v) { return std::pair{v * v, 2.0 * v}; });
}

Var log_clamped(Var x, double floor) {
  return unary("log", x, [floor](double v) {
    return v > floor ? std::pair{std::log(v), 1.0 / v} : std::pair{std::log(floor), 0.0};
  });
}

Var normalize_rows(Var x, double eps) {
  const Tensor& xv = x.value();
  Tensor out(xv.rows(), xv.cols());
  Tensor norms(xv.rows(), 1);
  for (std::size_t r = 0; r < xv.rows(); ++r) {
    double ss = 0.0;
    for (std::size_t c = 0; c < xv.cols(); ++c) ss += xv(r, c) * xv(r, c);
    const double nrm = std::max(std::sqrt(ss), eps);
    norms[r] = nrm;
    for (std::size_t c = 0; c < xv.cols(); ++c) out(r, c) = xv(r, c) / nrm;
  }
  const std::size_t xi = x.id;
  return x.tape->record("normalize_rows", std::move(out), {xi},
                        [xi, eps, norms = std::move(norms)](Tape& tp, std::size_t self) {
                          const Tensor& g = tp.out_grad(self);
                          const Tensor& y = tp.value(self);
                          Tensor& gx = tp.accum(xi);
                          for (std::size_t r = 0; r < y.rows(); ++r) {
                            if (norms[r] <= eps) {
                              for (std::size_t c = 0; c < y.cols(); ++c) gx(r, c) += g(r, c) / eps;
                              continue;
                            }
                            double dot = 0.0;
                            for (std::size_t c = 0; c < y.cols(); ++c) dot += g(r, c) * y(r, c);
                            for (std::size_t c = 0; c < y.cols(); ++c)
                              gx(r, c) += (g(r, c) - y(r, c) * dot) / norms[r];
                          }
                        });
}

Var cosine_similarity(Var x, Var y) { return matmul_nt(normalize_rows(x), normalize_rows(y)); }

namespace {
std::size_t block_len(std::string_view op, const Tensor& v, std::size_t blocks) {
  if (blocks == 0 || v.rows() % blocks != 0) {
    throw std::invalid_argument(std::string(op) + ": " + v.shape_string() + " not divisible into " +
                                std::to_string(blocks) + " blocks");
  }
  return v.rows() / blocks;
}
}  // namespace

Var block_matmul_nt(Var a, Var b, std::size_t blocks) {
  Tape& t = same_tape(a, b);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (av.cols() != bv.cols()) shape_error("block_matmul_nt", av, bv);
  const std::size_t la = block_len("block_matmul_nt", av, blocks);
  const std::size_t lb = block_len("block_matmul_nt", bv, blocks);
  const std::size_t k = av.cols();
  Tensor out(av.rows(), lb);
  kernels::block_gemm_nt({blocks, la, k, lb, k}, av.data(), bv.data(), out.data());
  const std::size_t ai = a.id, bi = b.id;
  return t.record("block_matmul_nt", std::move(out), {ai, bi},
                  [ai, bi, blocks, la, lb, k](Tape& tp, std::size_t self) {
                    const Tensor& g = tp.out_grad(self);  // blocks*la x lb
                    if (tp.requires_grad(ai)) {           // dA_b = G_b B_b
                      kernels::block_gemm_nn({blocks, la, lb, lb, k}, g.data(), tp.value(bi).data(),
                                             tp.accum(ai).data());
                    }
                    if (tp.requires_grad(bi)) {  // dB_b = G_b^T A_b
                      kernels::block_gemm_tn({blocks, la, lb, la, k}, g.data(), tp.value(ai).data(),
                                             tp.accum(bi).data());
                    }
                  });
}

Var block_matmul(Var a, Var b, std::size_t blocks) {
  Tape& t = same_tape(a, b);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  const std::size_t la = block_len("block_matmul", av, blocks);
  const std::size_t lb = block_len("block_matmul", bv, blocks);
  if (av.cols() != lb) shape_error("block_matmul", av, bv);
  const std::size_t n = bv.cols();
  Tensor out(av.rows(), n);
  kernels::block_gemm_nn({blocks, la, lb, lb, n}, av.data(), bv.data(), out.data());
  const std::size_t ai = a.id, bi = b.id;
  return t.record("block_matmul", std::move(out), {ai, bi},
                  [ai, bi, blocks, la, lb, n](Tape& tp, std::size_t self) {
                    const Tensor& g = tp.out_grad(self);  // blocks*la x n
                    if (tp.requires_grad(ai)) {           // dA_b = G_b B_b^T
                      kernels::block_gemm_nt({blocks, la, n, lb, n}, g.data(), tp.value(bi).data(),
                                             tp.accum(ai).data());
                    }
                    if (tp.requires_grad(bi)) {  // dB_b = A_b^T G_b
                      kernels::block_gemm_tn({blocks, la, lb, la, n}, tp.value(ai).data(), g.data(),
                                             tp.accum(bi).data());
                    }
                  });
}

Var block_pairwise_sqdist(Var x, Var y, std::size_t blocks) {
  Tape& t = same_tape(x, y);
  const Tensor& xv = x.value();
  const Tensor& yv = y.value();
  if (xv.cols() != yv.cols()) shape_error("block_pairwise_sqdist", xv, yv);
  const std::size_t lx = block_len("block_pairwise_sqdist", xv, blocks);
  const std::size_t ly = block_len("block_pairwise_sqdist", yv, blocks);
  const std::size_t d = xv.cols();
  Tensor out(xv.rows(), ly);
  for (std::size_t b = 0; b < blocks; ++b)
    for (std::size_t i = 0; i < lx; ++i) {
      const double* xr = xv.data() + (b * lx + i) * d;
      for (std::size_t j = 0; j < ly; ++j) {
        const double* yr = yv.data() + (b * ly + j) * d;
        double acc = 0.0;
        for (std::size_t p = 0; p < d; ++p) {
          const double diff = xr[p] - yr[p];
          acc += diff * diff;
        }
        out(b * lx + i, j) = acc;
      }
    }
  const std::size_t xi = x.id, yi = y.id;
  return t.record("block_pairwise_sqdist", std::move(out), {xi, yi},
                  [xi, yi, blocks, lx, ly, d](Tape& tp, std::size_t self) {
                    const Tensor& g = tp.out_grad(self);
                    const Tensor& xv = tp.value(xi);
                    const Tensor& yv = tp.value(yi);
                    Tensor* gx = tp.requires_grad(xi) ? &tp.accum(xi) : nullptr;
                    Tensor* gy = tp.requires_grad(yi) ? &tp.accum(yi) : nullptr;
                    for (std::size_t b = 0; b < blocks; ++b)
                      for (std::size_t i = 0; i < lx; ++i) {
                        const std::size_t xr = b * lx + i;
                        for (std::size_t j = 0; j < ly; ++j) {
                          const double gij = g(xr, j);
                          if (gij == 0.0) continue;
                          const std::size_t yr = b * ly + j;
                          for (std::size_t p = 0; p < d; ++p) {
                            const double diff = 2.0 * gij * (xv(xr, p) - yv(yr, p));
                            if (gx) (*gx)(xr, p) += diff;
                            if (gy) (*gy)(yr, p) -= diff;
                          }
                        }
                      }
                  });
}

}  // namespace mmsbr::diff
