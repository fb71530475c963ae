// ops.cpp — see ops.hpp.
#include "regseg/ops.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace regseg::nn {
namespace {

using MatRM = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic,
                            Eigen::RowMajor>;
using MapM = Eigen::Map<MatRM>;
using MapCM = Eigen::Map<const MatRM>;

void require(bool ok, const std::string& msg) {
  if (!ok) throw std::invalid_argument(msg);
}

void require_rank(const NodePtr& x, std::size_t rank, const char* op) {
  require(x->shape.size() == rank,
          std::string(op) + ": wrong tensor rank");
}

void require_same_shape(const NodePtr& a, const NodePtr& b, const char* op) {
  require(a->shape == b->shape, std::string(op) + ": shape mismatch");
}

constexpr double kInvSqrt2 = 0.7071067811865475244;
constexpr double kInvSqrt2Pi = 0.3989422804014326779;

}  // namespace

// ---- elementwise ----------------------------------------------------------

NodePtr add(const NodePtr& a, const NodePtr& b) {
  require_same_shape(a, b, "add");
  return make_result(a->shape, a->value + b->value, {a, b},
                     [a, b](Node& self) {
                       a->grad += self.grad;
                       b->grad += self.grad;
                     });
}

NodePtr sub(const NodePtr& a, const NodePtr& b) {
  require_same_shape(a, b, "sub");
  return make_result(a->shape, a->value - b->value, {a, b},
                     [a, b](Node& self) {
                       a->grad += self.grad;
                       b->grad -= self.grad;
                     });
}

NodePtr mul(const NodePtr& a, const NodePtr& b) {
  require_same_shape(a, b, "mul");
  return make_result(a->shape, a->value * b->value, {a, b},
                     [a, b](Node& self) {
                       a->grad += self.grad * b->value;
                       b->grad += self.grad * a->value;
                     });
}

NodePtr divide(const NodePtr& a, const NodePtr& b) {
  require_same_shape(a, b, "divide");
  return make_result(a->shape, a->value / b->value, {a, b},
                     [a, b](Node& self) {
                       a->grad += self.grad / b->value;
                       b->grad -= self.grad * a->value / b->value.square();
                     });
}

NodePtr add_scalar(const NodePtr& x, double s) {
  return make_result(x->shape, x->value + s, {x},
                     [x](Node& self) { x->grad += self.grad; });
}

NodePtr mul_scalar(const NodePtr& x, double s) {
  return make_result(x->shape, x->value * s, {x},
                     [x, s](Node& self) { x->grad += self.grad * s; });
}

NodePtr neg(const NodePtr& x) {
  return make_result(x->shape, -x->value, {x},
                     [x](Node& self) { x->grad -= self.grad; });
}

NodePtr vlog(const NodePtr& x) {
  return make_result(x->shape, x->value.log(), {x},
                     [x](Node& self) { x->grad += self.grad / x->value; });
}

NodePtr clamp_min(const NodePtr& x, double floor) {
  return make_result(
      x->shape, x->value.max(floor), {x}, [x, floor](Node& self) {
        x->grad += self.grad * (x->value > floor).cast<double>();
      });
}

NodePtr gelu(const NodePtr& x) {
  Arr phi(x->value.size());
  for (long i = 0; i < x->value.size(); ++i)
    phi(i) = 0.5 * std::erfc(-x->value(i) * kInvSqrt2);
  return make_result(x->shape, x->value * phi, {x}, [x, phi](Node& self) {
    const Arr density =
        (-0.5 * x->value.square()).exp() * kInvSqrt2Pi;
    x->grad += self.grad * (phi + x->value * density);
  });
}

// ---- reductions -----------------------------------------------------------

NodePtr sum_all(const NodePtr& x) {
  Arr v(1);
  v(0) = x->value.sum();
  return make_result({1}, std::move(v), {x},
                     [x](Node& self) { x->grad += self.grad(0); });
}

NodePtr mean_all(const NodePtr& x) {
  const double inv = 1.0 / static_cast<double>(x->size());
  Arr v(1);
  v(0) = x->value.sum() * inv;
  return make_result({1}, std::move(v), {x}, [x, inv](Node& self) {
    x->grad += self.grad(0) * inv;
  });
}

NodePtr rowsum(const NodePtr& x) {
  require_rank(x, 2, "rowsum");
  const int m = x->shape[0], n = x->shape[1];
  Arr v(m);
  MapCM xm(x->value.data(), m, n);
  for (int i = 0; i < m; ++i) v(i) = xm.row(i).sum();
  return make_result({m}, std::move(v), {x}, [x, m, n](Node& self) {
    MapM gm(x->grad.data(), m, n);
    for (int i = 0; i < m; ++i) gm.row(i).array() += self.grad(i);
  });
}

NodePtr colsum(const NodePtr& x) {
  require_rank(x, 2, "colsum");
  const int m = x->shape[0], n = x->shape[1];
  MapCM xm(x->value.data(), m, n);
  Arr v = xm.colwise().sum().transpose().array();
  return make_result({n}, std::move(v), {x}, [x, m, n](Node& self) {
    MapM gm(x->grad.data(), m, n);
    for (int i = 0; i < m; ++i) gm.row(i).array() += self.grad.transpose();
  });
}

NodePtr sum_spatial_per_class(const NodePtr& x) {
  require_rank(x, 4, "sum_spatial_per_class");
  const int b = x->shape[0], c = x->shape[1], h = x->shape[2],
            w = x->shape[3];
  const int hw = h * w;
  Arr v(static_cast<long>(b) * c);
  for (int i = 0; i < b * c; ++i)
    v(i) = x->value.segment(static_cast<long>(i) * hw, hw).sum();
  return make_result({b, c}, std::move(v), {x}, [x, b, c, hw](Node& self) {
    for (int i = 0; i < b * c; ++i)
      x->grad.segment(static_cast<long>(i) * hw, hw) += self.grad(i);
  });
}

// ---- shape ----------------------------------------------------------------

NodePtr reshape(const NodePtr& x, std::vector<int> shape) {
  require(shape_size(shape) == x->size(), "reshape: element count changes");
  return make_result(std::move(shape), x->value, {x},
                     [x](Node& self) { x->grad += self.grad; });
}

NodePtr concat_channels(const NodePtr& a, const NodePtr& b) {
  require_rank(a, 4, "concat_channels");
  require_rank(b, 4, "concat_channels");
  require(a->shape[0] == b->shape[0] && a->shape[2] == b->shape[2] &&
              a->shape[3] == b->shape[3],
          "concat_channels: non-channel dims differ");
  const int bn = a->shape[0], ca = a->shape[1], cb = b->shape[1],
            hw = a->shape[2] * a->shape[3];
  Arr v(static_cast<long>(bn) * (ca + cb) * hw);
  for (int i = 0; i < bn; ++i) {
    v.segment(static_cast<long>(i) * (ca + cb) * hw, static_cast<long>(ca) * hw) =
        a->value.segment(static_cast<long>(i) * ca * hw, static_cast<long>(ca) * hw);
    v.segment(static_cast<long>(i) * (ca + cb) * hw + static_cast<long>(ca) * hw,
              static_cast<long>(cb) * hw) =
        b->value.segment(static_cast<long>(i) * cb * hw, static_cast<long>(cb) * hw);
  }
  return make_result({bn, ca + cb, a->shape[2], a->shape[3]}, std::move(v),
                     {a, b}, [a, b, bn, ca, cb, hw](Node& self) {
                       for (int i = 0; i < bn; ++i) {
                         a->grad.segment(static_cast<long>(i) * ca * hw,
                                         static_cast<long>(ca) * hw) +=
                             self.grad.segment(
                                 static_cast<long>(i) * (ca + cb) * hw,
                                 static_cast<long>(ca) * hw);
                         b->grad.segment(static_cast<long>(i) * cb * hw,
                                         static_cast<long>(cb) * hw) +=
                             self.grad.segment(
                                 static_cast<long>(i) * (ca + cb) * hw +
                                     static_cast<long>(ca) * hw,
                                 static_cast<long>(cb) * hw);
                       }
                     });
}

NodePtr concat_cols(const NodePtr& a, const NodePtr& b) {
  require_rank(a, 2, "concat_cols");
  require_rank(b, 2, "concat_cols");
  require(a->shape[0] == b->shape[0], "concat_cols: row counts differ");
  const int m = a->shape[0], na = a->shape[1], nb = b->shape[1];
  Arr v(static_cast<long>(m) * (na + nb));
  MapM vm(v.data(), m, na + nb);
  vm.leftCols(na) = MapCM(a->value.data(), m, na);
  vm.rightCols(nb) = MapCM(b->value.data(), m, nb);
  return make_result({m, na + nb}, std::move(v), {a, b},
                     [a, b, m, na, nb](Node& self) {
                       MapCM gm(self.grad.data(), m, na + nb);
                       MapM(a->grad.data(), m, na) += gm.leftCols(na);
                       MapM(b->grad.data(), m, nb) += gm.rightCols(nb);
                     });
}

NodePtr slice_batch(const NodePtr& x, int b) {
  require_rank(x, 4, "slice_batch");
  require(b >= 0 && b < x->shape[0], "slice_batch: index out of range");
  const long span = static_cast<long>(x->shape[1]) * x->shape[2] * x->shape[3];
  Arr v = x->value.segment(b * span, span);
  return make_result({1, x->shape[1], x->shape[2], x->shape[3]}, std::move(v),
                     {x}, [x, b, span](Node& self) {
                       x->grad.segment(b * span, span) += self.grad;
                     });
}

NodePtr narrow_batch(const NodePtr& x, int b0, int count) {
  require_rank(x, 4, "narrow_batch");
  require(b0 >= 0 && count > 0 && b0 + count <= x->shape[0],
          "narrow_batch: range out of bounds");
  const long span = static_cast<long>(x->shape[1]) * x->shape[2] * x->shape[3];
  Arr v = x->value.segment(b0 * span, static_cast<long>(count) * span);
  return make_result({count, x->shape[1], x->shape[2], x->shape[3]},
                     std::move(v), {x}, [x, b0, count, span](Node& self) {
                       x->grad.segment(b0 * span,
                                       static_cast<long>(count) * span) +=
                           self.grad;
                     });
}

// ---- matrix ---------------------------------------------------------------

NodePtr matmul(const NodePtr& a, const NodePtr& b) {
  require_rank(a, 2, "matmul");
  require_rank(b, 2, "matmul");
  require(a->shape[1] == b->shape[0], "matmul: inner dims differ");
  const int m = a->shape[0], k = a->shape[1], n = b->shape[1];
  Arr v(static_cast<long>(m) * n);
  MapM(v.data(), m, n).noalias() =
      MapCM(a->value.data(), m, k) * MapCM(b->value.data(), k, n);
  return make_result({m, n}, std::move(v), {a, b},
                     [a, b, m, k, n](Node& self) {
                       MapCM g(self.grad.data(), m, n);
                       MapM(a->grad.data(), m, k).noalias() +=
                           g * MapCM(b->value.data(), k, n).transpose();
                       MapM(b->grad.data(), k, n).noalias() +=
                           MapCM(a->value.data(), m, k).transpose() * g;
                     });
}

NodePtr matmul_nt(const NodePtr& a, const NodePtr& b) {
  require_rank(a, 2, "matmul_nt");
  require_rank(b, 2, "matmul_nt");
  require(a->shape[1] == b->shape[1], "matmul_nt: inner dims differ");
  const int m = a->shape[0], k = a->shape[1], n = b->shape[0];
  Arr v(static_cast<long>(m) * n);
  MapM(v.data(), m, n).noalias() =
      MapCM(a->value.data(), m, k) * MapCM(b->value.data(), n, k).transpose();
  return make_result({m, n}, std::move(v), {a, b},
                     [a, b, m, k, n](Node& self) {
                       MapCM g(self.grad.data(), m, n);
                       MapM(a->grad.data(), m, k).noalias() +=
                           g * MapCM(b->value.data(), n, k);
                       MapM(b->grad.data(), n, k).noalias() +=
                           g.transpose() * MapCM(a->value.data(), m, k);
                     });
}

NodePtr rowwise_dot(const NodePtr& a, const NodePtr& b) {
  require_rank(a, 2, "rowwise_dot");
  require_same_shape(a, b, "rowwise_dot");
  const int m = a->shape[0], n = a->shape[1];
  Arr v(m);
  MapCM am(a->value.data(), m, n), bm(b->value.data(), m, n);
  for (int i = 0; i < m; ++i) v(i) = am.row(i).dot(bm.row(i));
  return make_result({m}, std::move(v), {a, b}, [a, b, m, n](Node& self) {
    MapCM am(a->value.data(), m, n), bm(b->value.data(), m, n);
    MapM ga(a->grad.data(), m, n), gb(b->grad.data(), m, n);
    for (int i = 0; i < m; ++i) {
      ga.row(i) += self.grad(i) * bm.row(i);
      gb.row(i) += self.grad(i) * am.row(i);
    }
  });
}

NodePtr logsumexp_rows(const NodePtr& x) {
  require_rank(x, 2, "logsumexp_rows");
  const int m = x->shape[0], n = x->shape[1];
  Arr v(m);
  Arr probs(static_cast<long>(m) * n);  // row softmax, reused in backward
  MapCM xm(x->value.data(), m, n);
  MapM pm(probs.data(), m, n);
  for (int i = 0; i < m; ++i) {
    const double peak = xm.row(i).maxCoeff();
    const auto shifted = (xm.row(i).array() - peak).exp();
    const double total = shifted.sum();
    pm.row(i) = shifted / total;
    v(i) = peak + std::log(total);
  }
  return make_result({m}, std::move(v), {x},
                     [x, probs, m, n](Node& self) {
                       MapCM pm(probs.data(), m, n);
                       MapM gm(x->grad.data(), m, n);
                       for (int i = 0; i < m; ++i)
                         gm.row(i) += self.grad(i) * pm.row(i);
                     });
}

NodePtr apply_token_matrix(const NodePtr& x, const NodePtr& w, int blocks) {
  require_rank(x, 2, "apply_token_matrix");
  require_rank(w, 2, "apply_token_matrix");
  require(w->shape[0] == w->shape[1], "apply_token_matrix: w not square");
  const int t = w->shape[0], d = x->shape[1];
  require(x->shape[0] == blocks * t,
          "apply_token_matrix: row count is not blocks x tokens");
  Arr v(x->value.size());
  MapCM wm(w->value.data(), t, t);
  for (int bl = 0; bl < blocks; ++bl) {
    MapCM xb(x->value.data() + static_cast<long>(bl) * t * d, t, d);
    MapM(v.data() + static_cast<long>(bl) * t * d, t, d).noalias() = wm * xb;
  }
  return make_result(x->shape, std::move(v), {x, w},
                     [x, w, blocks, t, d](Node& self) {
                       MapCM wm(w->value.data(), t, t);
                       MapM gw(w->grad.data(), t, t);
                       for (int bl = 0; bl < blocks; ++bl) {
                         const long off = static_cast<long>(bl) * t * d;
                         MapCM gb(self.grad.data() + off, t, d);
                         MapCM xb(x->value.data() + off, t, d);
                         MapM(x->grad.data() + off, t, d).noalias() +=
                             wm.transpose() * gb;
                         gw.noalias() += gb * xb.transpose();
                       }
                     });
}

NodePtr add_bias_cols(const NodePtr& x, const NodePtr& b) {
  require_rank(x, 2, "add_bias_cols");
  require_rank(b, 1, "add_bias_cols");
  require(x->shape[1] == b->shape[0], "add_bias_cols: width mismatch");
  const int m = x->shape[0], n = x->shape[1];
  Arr v(x->value.size());
  MapM vm(v.data(), m, n);
  vm = MapCM(x->value.data(), m, n);
  vm.rowwise() += b->value.matrix().transpose();
  return make_result(x->shape, std::move(v), {x, b}, [x, b, m, n](Node& self) {
    x->grad += self.grad;
    MapCM gm(self.grad.data(), m, n);
    b->grad += gm.colwise().sum().transpose().array();
  });
}

NodePtr scale_cols(const NodePtr& x, const NodePtr& g) {
  require_rank(x, 2, "scale_cols");
  require_rank(g, 1, "scale_cols");
  require(x->shape[1] == g->shape[0], "scale_cols: width mismatch");
  const int m = x->shape[0], n = x->shape[1];
  Arr v(x->value.size());
  MapM vm(v.data(), m, n);
  vm = MapCM(x->value.data(), m, n);
  vm.array().rowwise() *= g->value.transpose();
  return make_result(x->shape, std::move(v), {x, g}, [x, g, m, n](Node& self) {
    MapCM sg(self.grad.data(), m, n);
    MapM(x->grad.data(), m, n).array() +=
        sg.array().rowwise() * g->value.transpose();
    MapCM xm(x->value.data(), m, n);
    g->grad += (sg.array() * xm.array()).colwise().sum().transpose();
  });
}

// ---- image ----------------------------------------------------------------

namespace {

struct ConvGeom {
  int b, cin, h, w, cout, kh, kw, stride, pad, ho, wo;
};

// col is (b·ho·wo, cin·kh·kw), row (bi, oy, ox), col (ci, ky, kx).
void im2col(const Arr& x, const ConvGeom& g, Arr& col) {
  col.setZero();
  const long patch = static_cast<long>(g.cin) * g.kh * g.kw;
  for (int bi = 0; bi < g.b; ++bi)
    for (int oy = 0; oy < g.ho; ++oy)
      for (int ox = 0; ox < g.wo; ++ox) {
        const long row =
            (static_cast<long>(bi) * g.ho + oy) * g.wo + ox;
        double* dst = col.data() + row * patch;
        for (int ci = 0; ci < g.cin; ++ci) {
          const double* plane =
              x.data() + (static_cast<long>(bi) * g.cin + ci) * g.h * g.w;
          for (int ky = 0; ky < g.kh; ++ky) {
            const int iy = oy * g.stride + ky - g.pad;
            for (int kx = 0; kx < g.kw; ++kx) {
              const int ix = ox * g.stride + kx - g.pad;
              const bool in =
                  iy >= 0 && iy < g.h && ix >= 0 && ix < g.w;
              dst[(static_cast<long>(ci) * g.kh + ky) * g.kw + kx] =
                  in ? plane[static_cast<long>(iy) * g.w + ix] : 0.0;
            }
          }
        }
      }
}

void col2im_add(const Arr& col, const ConvGeom& g, Arr& gx) {
  const long patch = static_cast<long>(g.cin) * g.kh * g.kw;
  for (int bi = 0; bi < g.b; ++bi)
    for (int oy = 0; oy < g.ho; ++oy)
      for (int ox = 0; ox < g.wo; ++ox) {
        const long row =
            (static_cast<long>(bi) * g.ho + oy) * g.wo + ox;
        const double* src = col.data() + row * patch;
        for (int ci = 0; ci < g.cin; ++ci) {
          double* plane =
              gx.data() + (static_cast<long>(bi) * g.cin + ci) * g.h * g.w;
          for (int ky = 0; ky < g.kh; ++ky) {
            const int iy = oy * g.stride + ky - g.pad;
            if (iy < 0 || iy >= g.h) continue;
            for (int kx = 0; kx < g.kw; ++kx) {
              const int ix = ox * g.stride + kx - g.pad;
              if (ix < 0 || ix >= g.w) continue;
              plane[static_cast<long>(iy) * g.w + ix] +=
                  src[(static_cast<long>(ci) * g.kh + ky) * g.kw + kx];
            }
          }
        }
      }
}

}  // namespace

NodePtr conv2d(const NodePtr& x, const NodePtr& w, const NodePtr& bias,
               int kh, int kw, int stride, int pad) {
  require_rank(x, 4, "conv2d");
  require_rank(w, 2, "conv2d");
  require_rank(bias, 1, "conv2d");
  ConvGeom g;
  g.b = x->shape[0];
  g.cin = x->shape[1];
  g.h = x->shape[2];
  g.w = x->shape[3];
  g.cout = w->shape[0];
  g.kh = kh;
  g.kw = kw;
  g.stride = stride;
  g.pad = pad;
  require(w->shape[1] == g.cin * kh * kw, "conv2d: weight width mismatch");
  require(bias->shape[0] == g.cout, "conv2d: bias length mismatch");
  require(stride >= 1 && pad >= 0, "conv2d: bad stride or padding");
  g.ho = (g.h + 2 * pad - kh) / stride + 1;
  g.wo = (g.w + 2 * pad - kw) / stride + 1;
  require(g.ho > 0 && g.wo > 0, "conv2d: kernel larger than padded input");

  const long rows = static_cast<long>(g.b) * g.ho * g.wo;
  const long patch = static_cast<long>(g.cin) * kh * kw;
  Arr col(rows * patch);
  im2col(x->value, g, col);
  MatRM out(rows, g.cout);
  out.noalias() = MapCM(col.data(), rows, patch) *
                  MapCM(w->value.data(), g.cout, patch).transpose();
  out.array().rowwise() += bias->value.transpose();

  // Reorder rows-of-(b,oy,ox) × cout into (b, cout, oy, ox).
  Arr v(rows * g.cout);
  for (int bi = 0; bi < g.b; ++bi)
    for (int c = 0; c < g.cout; ++c)
      for (long p = 0; p < static_cast<long>(g.ho) * g.wo; ++p)
        v((static_cast<long>(bi) * g.cout + c) * g.ho * g.wo + p) =
            out(static_cast<long>(bi) * g.ho * g.wo + p, c);

  return make_result(
      {g.b, g.cout, g.ho, g.wo}, std::move(v), {x, w, bias},
      [x, w, bias, g, rows, patch](Node& self) {
        // Gradient back in (rows, cout) layout.
        MatRM gout(rows, g.cout);
        for (int bi = 0; bi < g.b; ++bi)
          for (int c = 0; c < g.cout; ++c)
            for (long p = 0; p < static_cast<long>(g.ho) * g.wo; ++p)
              gout(static_cast<long>(bi) * g.ho * g.wo + p, c) = self.grad(
                  (static_cast<long>(bi) * g.cout + c) * g.ho * g.wo + p);

        bias->grad += gout.colwise().sum().transpose().array();

        Arr col(rows * patch);
        im2col(x->value, g, col);
        MapM(w->grad.data(), g.cout, patch).noalias() +=
            gout.transpose() * MapCM(col.data(), rows, patch);

        Arr gcol(rows * patch);
        MapM(gcol.data(), rows, patch).noalias() =
            gout * MapCM(w->value.data(), g.cout, patch);
        col2im_add(gcol, g, x->grad);
      });
}

NodePtr upsample_nearest2(const NodePtr& x) {
  require_rank(x, 4, "upsample_nearest2");
  const int b = x->shape[0], c = x->shape[1], h = x->shape[2],
            w = x->shape[3];
  Arr v(static_cast<long>(b) * c * 4 * h * w);
  for (int i = 0; i < b * c; ++i) {
    const double* src = x->value.data() + static_cast<long>(i) * h * w;
    double* dst = v.data() + static_cast<long>(i) * 4 * h * w;
    for (int y = 0; y < h; ++y)
      for (int xx = 0; xx < w; ++xx) {
        const double s = src[static_cast<long>(y) * w + xx];
        dst[(2L * y) * 2 * w + 2 * xx] = s;
        dst[(2L * y) * 2 * w + 2 * xx + 1] = s;
        dst[(2L * y + 1) * 2 * w + 2 * xx] = s;
        dst[(2L * y + 1) * 2 * w + 2 * xx + 1] = s;
      }
  }
  return make_result({b, c, 2 * h, 2 * w}, std::move(v), {x},
                     [x, b, c, h, w](Node& self) {
                       for (int i = 0; i < b * c; ++i) {
                         double* gx =
                             x->grad.data() + static_cast<long>(i) * h * w;
                         const double* gs =
                             self.grad.data() + static_cast<long>(i) * 4 * h * w;
                         for (int y = 0; y < h; ++y)
                           for (int xx = 0; xx < w; ++xx)
                             gx[static_cast<long>(y) * w + xx] +=
                                 gs[(2L * y) * 2 * w + 2 * xx] +
                                 gs[(2L * y) * 2 * w + 2 * xx + 1] +
                                 gs[(2L * y + 1) * 2 * w + 2 * xx] +
                                 gs[(2L * y + 1) * 2 * w + 2 * xx + 1];
                       }
                     });
}

namespace {

// Flat index maps between image (b,c,y,x) and patch-token layout.
std::vector<long> patch_permutation(int b, int c, int h, int w, int p) {
  const int gh = h / p, gw = w / p;
  std::vector<long> to_image(static_cast<std::size_t>(b) * c * h * w);
  long row = 0;
  for (int bi = 0; bi < b; ++bi)
    for (int gy = 0; gy < gh; ++gy)
      for (int gx = 0; gx < gw; ++gx, ++row)
        for (int ci = 0; ci < c; ++ci)
          for (int py = 0; py < p; ++py)
            for (int px = 0; px < p; ++px) {
              const long col = (static_cast<long>(ci) * p + py) * p + px;
              const long img =
                  ((static_cast<long>(bi) * c + ci) * h + gy * p + py) * w +
                  gx * p + px;
              to_image[row * c * p * p + col] = img;
            }
  return to_image;
}

}  // namespace

NodePtr extract_patches(const NodePtr& x, int p) {
  require_rank(x, 4, "extract_patches");
  const int b = x->shape[0], c = x->shape[1], h = x->shape[2],
            w = x->shape[3];
  require(p > 0 && h % p == 0 && w % p == 0,
          "extract_patches: dims not divisible by patch size");
  const auto to_image = patch_permutation(b, c, h, w, p);
  Arr v(x->value.size());
  for (std::size_t i = 0; i < to_image.size(); ++i)
    v(static_cast<long>(i)) = x->value(to_image[i]);
  const int t = (h / p) * (w / p);
  return make_result({b * t, c * p * p}, std::move(v), {x},
                     [x, to_image](Node& self) {
                       for (std::size_t i = 0; i < to_image.size(); ++i)
                         x->grad(to_image[i]) +=
                             self.grad(static_cast<long>(i));
                     });
}

NodePtr patches_to_image(const NodePtr& x, int b, int c, int h, int w,
                         int p) {
  require_rank(x, 2, "patches_to_image");
  require(p > 0 && h % p == 0 && w % p == 0,
          "patches_to_image: dims not divisible by patch size");
  const int t = (h / p) * (w / p);
  require(x->shape[0] == b * t && x->shape[1] == c * p * p,
          "patches_to_image: token layout mismatch");
  const auto to_image = patch_permutation(b, c, h, w, p);
  Arr v(x->value.size());
  for (std::size_t i = 0; i < to_image.size(); ++i)
    v(to_image[i]) = x->value(static_cast<long>(i));
  return make_result({b, c, h, w}, std::move(v), {x},
                     [x, to_image](Node& self) {
                       for (std::size_t i = 0; i < to_image.size(); ++i)
                         x->grad(static_cast<long>(i)) +=
                             self.grad(to_image[i]);
                     });
}

// ---- normalization / softmax ---------------------------------------------

NodePtr softmax_channels(const NodePtr& x) {
  require_rank(x, 4, "softmax_channels");
  const int b = x->shape[0], c = x->shape[1], hw = x->shape[2] * x->shape[3];
  Arr v(x->value.size());
  for (int bi = 0; bi < b; ++bi)
    for (int p = 0; p < hw; ++p) {
      const long base = static_cast<long>(bi) * c * hw + p;
      double peak = -1e300;
      for (int ci = 0; ci < c; ++ci)
        peak = std::max(peak, x->value(base + static_cast<long>(ci) * hw));
      double total = 0.0;
      for (int ci = 0; ci < c; ++ci) {
        const double e =
            std::exp(x->value(base + static_cast<long>(ci) * hw) - peak);
        v(base + static_cast<long>(ci) * hw) = e;
        total += e;
      }
      for (int ci = 0; ci < c; ++ci)
        v(base + static_cast<long>(ci) * hw) /= total;
    }
  NodePtr out = make_result(
      x->shape, std::move(v), {x}, [x, b, c, hw](Node& self) {
        for (int bi = 0; bi < b; ++bi)
          for (int p = 0; p < hw; ++p) {
            const long base = static_cast<long>(bi) * c * hw + p;
            double dot = 0.0;
            for (int ci = 0; ci < c; ++ci) {
              const long i = base + static_cast<long>(ci) * hw;
              dot += self.grad(i) * self.value(i);
            }
            for (int ci = 0; ci < c; ++ci) {
              const long i = base + static_cast<long>(ci) * hw;
              x->grad(i) += self.value(i) * (self.grad(i) - dot);
            }
          }
      });
  return out;
}

namespace {

// Shared layer-norm math over a strided span: n entries at stride `stride`
// starting at `base`.
void layer_norm_span(const Arr& x, Arr& v, long base, long stride, int n,
                     double eps) {
  double mean = 0.0;
  for (int i = 0; i < n; ++i) mean += x(base + stride * i);
  mean /= n;
  double var = 0.0;
  for (int i = 0; i < n; ++i) {
    const double d = x(base + stride * i) - mean;
    var += d * d;
  }
  var /= n;
  const double inv = 1.0 / std::sqrt(var + eps);
  for (int i = 0; i < n; ++i)
    v(base + stride * i) = (x(base + stride * i) - mean) * inv;
}

void layer_norm_span_grad(const Arr& x, const Arr& y, const Arr& g, Arr& gx,
                          long base, long stride, int n, double eps) {
  double mean = 0.0;
  for (int i = 0; i < n; ++i) mean += x(base + stride * i);
  mean /= n;
  double var = 0.0;
  for (int i = 0; i < n; ++i) {
    const double d = x(base + stride * i) - mean;
    var += d * d;
  }
  var /= n;
  const double inv = 1.0 / std::sqrt(var + eps);
  double gmean = 0.0, gdot = 0.0;
  for (int i = 0; i < n; ++i) {
    gmean += g(base + stride * i);
    gdot += g(base + stride * i) * y(base + stride * i);
  }
  gmean /= n;
  gdot /= n;
  for (int i = 0; i < n; ++i)
    gx(base + stride * i) +=
        inv * (g(base + stride * i) - gmean - y(base + stride * i) * gdot);
}

}  // namespace

NodePtr layer_norm_rows(const NodePtr& x, double eps) {
  require_rank(x, 2, "layer_norm_rows");
  const int m = x->shape[0], n = x->shape[1];
  Arr v(x->value.size());
  for (int i = 0; i < m; ++i)
    layer_norm_span(x->value, v, static_cast<long>(i) * n, 1, n, eps);
  return make_result(x->shape, std::move(v), {x}, [x, m, n, eps](Node& self) {
    for (int i = 0; i < m; ++i)
      layer_norm_span_grad(x->value, self.value, self.grad, x->grad,
                           static_cast<long>(i) * n, 1, n, eps);
  });
}

NodePtr layer_norm_channels(const NodePtr& x, double eps) {
  require_rank(x, 4, "layer_norm_channels");
  const int b = x->shape[0], c = x->shape[1], hw = x->shape[2] * x->shape[3];
  Arr v(x->value.size());
  for (int bi = 0; bi < b; ++bi)
    for (int p = 0; p < hw; ++p)
      layer_norm_span(x->value, v, static_cast<long>(bi) * c * hw + p, hw, c,
                      eps);
  return make_result(
      x->shape, std::move(v), {x}, [x, b, c, hw, eps](Node& self) {
        for (int bi = 0; bi < b; ++bi)
          for (int p = 0; p < hw; ++p)
            layer_norm_span_grad(x->value, self.value, self.grad, x->grad,
                                 static_cast<long>(bi) * c * hw + p, hw, c,
                                 eps);
      });
}

NodePtr scale_channels(const NodePtr& x, const NodePtr& g) {
  require_rank(x, 4, "scale_channels");
  require_rank(g, 1, "scale_channels");
  require(g->shape[0] == x->shape[1], "scale_channels: channel mismatch");
  const int b = x->shape[0], c = x->shape[1], hw = x->shape[2] * x->shape[3];
  Arr v(x->value.size());
  for (int bi = 0; bi < b; ++bi)
    for (int ci = 0; ci < c; ++ci)
      v.segment((static_cast<long>(bi) * c + ci) * hw, hw) =
          x->value.segment((static_cast<long>(bi) * c + ci) * hw, hw) *
          g->value(ci);
  return make_result(
      x->shape, std::move(v), {x, g}, [x, g, b, c, hw](Node& self) {
        for (int bi = 0; bi < b; ++bi)
          for (int ci = 0; ci < c; ++ci) {
            const long off = (static_cast<long>(bi) * c + ci) * hw;
            x->grad.segment(off, hw) +=
                self.grad.segment(off, hw) * g->value(ci);
            g->grad(ci) += (self.grad.segment(off, hw) *
                            x->value.segment(off, hw))
                               .sum();
          }
      });
}

NodePtr add_bias_channels(const NodePtr& x, const NodePtr& b) {
  require_rank(x, 4, "add_bias_channels");
  require_rank(b, 1, "add_bias_channels");
  require(b->shape[0] == x->shape[1], "add_bias_channels: channel mismatch");
  const int bn = x->shape[0], c = x->shape[1],
            hw = x->shape[2] * x->shape[3];
  Arr v(x->value.size());
  for (int bi = 0; bi < bn; ++bi)
    for (int ci = 0; ci < c; ++ci)
      v.segment((static_cast<long>(bi) * c + ci) * hw, hw) =
          x->value.segment((static_cast<long>(bi) * c + ci) * hw, hw) +
          b->value(ci);
  return make_result(
      x->shape, std::move(v), {x, b}, [x, b, bn, c, hw](Node& self) {
        x->grad += self.grad;
        for (int bi = 0; bi < bn; ++bi)
          for (int ci = 0; ci < c; ++ci)
            b->grad(ci) +=
                self.grad.segment((static_cast<long>(bi) * c + ci) * hw, hw)
                    .sum();
      });
}

namespace {

void l2_span(const Arr& x, Arr& v, long base, long stride, int n,
             double eps) {
  double sq = 0.0;
  for (int i = 0; i < n; ++i) sq += x(base + stride * i) * x(base + stride * i);
  const double norm = std::max(std::sqrt(sq), eps);
  for (int i = 0; i < n; ++i) v(base + stride * i) = x(base + stride * i) / norm;
}

void l2_span_grad(const Arr& x, const Arr& y, const Arr& g, Arr& gx,
                  long base, long stride, int n, double eps) {
  double sq = 0.0;
  for (int i = 0; i < n; ++i) sq += x(base + stride * i) * x(base + stride * i);
  const double raw = std::sqrt(sq);
  const double norm = std::max(raw, eps);
  if (raw <= eps) {
    for (int i = 0; i < n; ++i) gx(base + stride * i) += g(base + stride * i) / norm;
    return;
  }
  double dot = 0.0;
  for (int i = 0; i < n; ++i) dot += g(base + stride * i) * y(base + stride * i);
  for (int i = 0; i < n; ++i)
    gx(base + stride * i) +=
        (g(base + stride * i) - y(base + stride * i) * dot) / norm;
}

}  // namespace

NodePtr l2_normalize_rows(const NodePtr& x, double eps) {
  require_rank(x, 2, "l2_normalize_rows");
  const int m = x->shape[0], n = x->shape[1];
  Arr v(x->value.size());
  for (int i = 0; i < m; ++i)
    l2_span(x->value, v, static_cast<long>(i) * n, 1, n, eps);
  return make_result(x->shape, std::move(v), {x}, [x, m, n, eps](Node& self) {
    for (int i = 0; i < m; ++i)
      l2_span_grad(x->value, self.value, self.grad, x->grad,
                   static_cast<long>(i) * n, 1, n, eps);
  });
}

NodePtr l2_normalize_channels(const NodePtr& x, double eps) {
  require_rank(x, 4, "l2_normalize_channels");
  const int b = x->shape[0], c = x->shape[1], hw = x->shape[2] * x->shape[3];
  Arr v(x->value.size());
  for (int bi = 0; bi < b; ++bi)
    for (int p = 0; p < hw; ++p)
      l2_span(x->value, v, static_cast<long>(bi) * c * hw + p, hw, c, eps);
  return make_result(
      x->shape, std::move(v), {x}, [x, b, c, hw, eps](Node& self) {
        for (int bi = 0; bi < b; ++bi)
          for (int p = 0; p < hw; ++p)
            l2_span_grad(x->value, self.value, self.grad, x->grad,
                         static_cast<long>(bi) * c * hw + p, hw, c, eps);
      });
}

// ---- gather ---------------------------------------------------------------

NodePtr gather_locations(const NodePtr& x, const std::vector<GridLoc>& locs) {
  require_rank(x, 4, "gather_locations");
  const int b = x->shape[0], c = x->shape[1], h = x->shape[2],
            w = x->shape[3];
  for (const auto& l : locs)
    require(l.b >= 0 && l.b < b && l.y >= 0 && l.y < h && l.x >= 0 && l.x < w,
            "gather_locations: location out of range");
  const int m = static_cast<int>(locs.size());
  Arr v(static_cast<long>(m) * c);
  for (int i = 0; i < m; ++i)
    for (int ci = 0; ci < c; ++ci)
      v(static_cast<long>(i) * c + ci) = x->value(
          ((static_cast<long>(locs[i].b) * c + ci) * h + locs[i].y) * w +
          locs[i].x);
  return make_result({m, c}, std::move(v), {x},
                     [x, locs, c, h, w](Node& self) {
                       for (std::size_t i = 0; i < locs.size(); ++i)
                         for (int ci = 0; ci < c; ++ci)
                           x->grad(((static_cast<long>(locs[i].b) * c + ci) *
                                        h +
                                    locs[i].y) *
                                       w +
                                   locs[i].x) +=
                               self.grad(static_cast<long>(i) * c + ci);
                     });
}

NodePtr gather_class_prob(const NodePtr& p, const std::vector<int>& labels) {
  require_rank(p, 4, "gather_class_prob");
  const int b = p->shape[0], c = p->shape[1], hw = p->shape[2] * p->shape[3];
  require(static_cast<std::size_t>(b) * hw == labels.size(),
          "gather_class_prob: label count mismatch");
  for (const int y : labels)
    require(y >= 0 && y < c, "gather_class_prob: label out of range");
  Arr v(static_cast<long>(b) * hw);
  for (int bi = 0; bi < b; ++bi)
    for (int q = 0; q < hw; ++q)
      v(static_cast<long>(bi) * hw + q) =
          p->value((static_cast<long>(bi) * c + labels[bi * hw + q]) * hw + q);
  return make_result(
      {b, hw}, std::move(v), {p}, [p, labels, b, c, hw](Node& self) {
        for (int bi = 0; bi < b; ++bi)
          for (int q = 0; q < hw; ++q)
            p->grad((static_cast<long>(bi) * c + labels[bi * hw + q]) * hw +
                    q) += self.grad(static_cast<long>(bi) * hw + q);
      });
}

}  // namespace regseg::nn
