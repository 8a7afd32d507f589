#include "protodiff/nd/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <initializer_list>
#include <limits>
#include <string>

namespace protodiff::nd {
namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;

template <typename T>
using NodePtr = std::shared_ptr<detail::Node<T>>;

[[noreturn]] void shape_fail(const char* op, const std::string& what) {
  throw ShapeError(std::string(op) + ": " + what);
}

[[noreturn]] void shape_fail(const char* op, const Shape& a, const Shape& b) {
  shape_fail(op, "incompatible shapes " + to_string(a) + " and " + to_string(b));
}

void expect_rank(const char* op, const Shape& s, std::size_t rank, const char* name) {
  if (s.size() != rank) {
    shape_fail(op, std::string(name) + " must have rank " + std::to_string(rank) + ", got " +
                       to_string(s));
  }
}

template <typename T>
bool tracking(std::initializer_list<const Tensor<T>*> inputs) {
  if (!Tape<T>::active()) return false;
  for (const auto* t : inputs) {
    if (t->defined() && t->requires_grad()) return true;
  }
  return false;
}

template <typename T>
void check_finite(const Buffer<T>& values, const char* op) {
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (!std::isfinite(values[i])) {
      throw NonFiniteError(std::string(op) + ": non-finite value at flat index " +
                           std::to_string(i));
    }
  }
}

template <typename T>
Tensor<T> make_result(Shape shape, Buffer<T> values, bool track, const char* op,
                      std::function<void(detail::Node<T>&)> backward) {
  check_finite(values, op);
  auto node = std::make_shared<detail::Node<T>>();
  node->shape = std::move(shape);
  node->value = std::move(values);
  node->op = op;
  if (track) {
    node->requires_grad = true;
    node->is_leaf = false;
    node->backward = std::move(backward);
    Tape<T>::active()->record(node);
  }
  return Tensor<T>::wrap(std::move(node));
}

template <typename T>
bool wants_grad(const NodePtr<T>& n) {
  return n && n->requires_grad;
}

template <typename T>
void elementwise_check(const char* op, const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) shape_fail(op, a.shape(), b.shape());
}

template <typename T>
T sigmoid(T x) {
  return T(1) / (T(1) + std::exp(-x));
}

struct Axes {
  std::size_t outer = 1, n = 1, inner = 1;
};

Axes split_axis(const Shape& s, std::size_t axis) {
  Axes a;
  for (std::size_t i = 0; i < axis; ++i) a.outer *= s[i];
  a.n = s[axis];
  for (std::size_t i = axis + 1; i < s.size(); ++i) a.inner *= s[i];
  return a;
}

}  // namespace

std::size_t conv1d_output_length(std::size_t length, std::size_t kernel, ConvGeometry g) {
  if (g.stride == 0) throw ShapeError("conv1d: stride must be positive");
  if (length + 2 * g.padding < kernel) {
    throw ShapeError("conv1d: kernel " + std::to_string(kernel) + " exceeds padded length " +
                     std::to_string(length + 2 * g.padding));
  }
  return (length + 2 * g.padding - kernel) / g.stride + 1;
}

std::size_t conv_transpose1d_output_length(std::size_t length, std::size_t kernel,
                                           ConvGeometry g) {
  if (g.stride == 0) throw ShapeError("conv_transpose1d: stride must be positive");
  if (length == 0) throw ShapeError("conv_transpose1d: empty input");
  const std::size_t full = (length - 1) * g.stride + kernel;
  if (full <= 2 * g.padding) {
    throw ShapeError("conv_transpose1d: padding " + std::to_string(g.padding) +
                     " leaves no output");
  }
  return full - 2 * g.padding;
}

// ---------------------------------------------------------------------------
// elementwise

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  elementwise_check("add", a, b);
  Buffer<T> out(a.size());
  auto x = a.data(), y = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] + y[i];
  const bool track = tracking<T>({&a, &b});
  auto an = a.node(), bn = b.node();
  return make_result<T>(a.shape(), std::move(out), track, "add", [an, bn](detail::Node<T>& self) {
    const auto& g = self.grad;
    if (wants_grad(an)) {
      T* ga = an->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    }
    if (wants_grad(bn)) {
      T* gb = bn->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
    }
  });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  elementwise_check("sub", a, b);
  Buffer<T> out(a.size());
  auto x = a.data(), y = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] - y[i];
  const bool track = tracking<T>({&a, &b});
  auto an = a.node(), bn = b.node();
  return make_result<T>(a.shape(), std::move(out), track, "sub", [an, bn](detail::Node<T>& self) {
    const auto& g = self.grad;
    if (wants_grad(an)) {
      T* ga = an->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    }
    if (wants_grad(bn)) {
      T* gb = bn->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
    }
  });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  elementwise_check("mul", a, b);
  Buffer<T> out(a.size());
  auto x = a.data(), y = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * y[i];
  const bool track = tracking<T>({&a, &b});
  auto an = a.node(), bn = b.node();
  return make_result<T>(a.shape(), std::move(out), track, "mul", [an, bn](detail::Node<T>& self) {
    const auto& g = self.grad;
    if (wants_grad(an)) {
      T* ga = an->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bn->value[i];
    }
    if (wants_grad(bn)) {
      T* gb = bn->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * an->value[i];
    }
  });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T factor) {
  Buffer<T> out(a.data().begin(), a.data().end());
  for (auto& v : out) v *= factor;
  auto an = a.node();
  return make_result<T>(a.shape(), std::move(out), tracking<T>({&a}), "scale",
                        [an, factor](detail::Node<T>& self) {
                          T* ga = an->grad_buffer();
                          for (std::size_t i = 0; i < self.grad.size(); ++i) {
                            ga[i] += factor * self.grad[i];
                          }
                        });
}

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& a, T offset) {
  Buffer<T> out(a.data().begin(), a.data().end());
  for (auto& v : out) v += offset;
  auto an = a.node();
  return make_result<T>(a.shape(), std::move(out), tracking<T>({&a}), "add_scalar",
                        [an](detail::Node<T>& self) {
                          T* ga = an->grad_buffer();
                          for (std::size_t i = 0; i < self.grad.size(); ++i) ga[i] += self.grad[i];
                        });
}

template <typename T>
Tensor<T> silu(const Tensor<T>& a) {
  auto x = a.data();
  Buffer<T> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * sigmoid(x[i]);
  auto an = a.node();
  return make_result<T>(a.shape(), std::move(out), tracking<T>({&a}), "silu",
                        [an](detail::Node<T>& self) {
                          T* ga = an->grad_buffer();
                          const auto& x = an->value;
                          for (std::size_t i = 0; i < self.grad.size(); ++i) {
                            const T s = sigmoid(x[i]);
                            ga[i] += self.grad[i] * s * (T(1) + x[i] * (T(1) - s));
                          }
                        });
}

template <typename T>
Tensor<T> relu(const Tensor<T>& a) {
  auto x = a.data();
  Buffer<T> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] > T(0) ? x[i] : T(0);
  auto an = a.node();
  return make_result<T>(a.shape(), std::move(out), tracking<T>({&a}), "relu",
                        [an](detail::Node<T>& self) {
                          T* ga = an->grad_buffer();
                          const auto& x = an->value;
                          for (std::size_t i = 0; i < self.grad.size(); ++i) {
                            if (x[i] > T(0)) ga[i] += self.grad[i];
                          }
                        });
}

// ---------------------------------------------------------------------------
// reductions

template <typename T>
Tensor<T> sum(const Tensor<T>& a) {
  T total = 0;
  for (T v : a.data()) total += v;
  auto an = a.node();
  return make_result<T>(Shape{}, {total}, tracking<T>({&a}), "sum", [an](detail::Node<T>& self) {
    T* ga = an->grad_buffer();
    const T g = self.grad[0];
    for (std::size_t i = 0; i < an->value.size(); ++i) ga[i] += g;
  });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& a) {
  if (a.size() == 0) shape_fail("mean", "empty tensor");
  T total = 0;
  for (T v : a.data()) total += v;
  const T inv = T(1) / static_cast<T>(a.size());
  auto an = a.node();
  return make_result<T>(Shape{}, {total * inv}, tracking<T>({&a}), "mean",
                        [an, inv](detail::Node<T>& self) {
                          T* ga = an->grad_buffer();
                          const T g = self.grad[0] * inv;
                          for (std::size_t i = 0; i < an->value.size(); ++i) ga[i] += g;
                        });
}

template <typename T>
Tensor<T> mean_axis(const Tensor<T>& a, std::size_t axis) {
  if (axis >= a.rank()) {
    shape_fail("mean_axis", "axis " + std::to_string(axis) + " out of range for " +
                                to_string(a.shape()));
  }
  const Axes ax = split_axis(a.shape(), axis);
  if (ax.n == 0) shape_fail("mean_axis", "reduced axis is empty");
  Shape out_shape = a.shape();
  out_shape.erase(out_shape.begin() + static_cast<std::ptrdiff_t>(axis));
  Buffer<T> out(ax.outer * ax.inner, T(0));
  auto x = a.data();
  const T inv = T(1) / static_cast<T>(ax.n);
  for (std::size_t o = 0; o < ax.outer; ++o) {
    for (std::size_t k = 0; k < ax.n; ++k) {
      const T* src = x.data() + (o * ax.n + k) * ax.inner;
      T* dst = out.data() + o * ax.inner;
      for (std::size_t i = 0; i < ax.inner; ++i) dst[i] += src[i];
    }
  }
  for (auto& v : out) v *= inv;
  auto an = a.node();
  return make_result<T>(std::move(out_shape), std::move(out), tracking<T>({&a}), "mean_axis",
                        [an, ax, inv](detail::Node<T>& self) {
                          T* ga = an->grad_buffer();
                          for (std::size_t o = 0; o < ax.outer; ++o) {
                            const T* g = self.grad.data() + o * ax.inner;
                            for (std::size_t k = 0; k < ax.n; ++k) {
                              T* dst = ga + (o * ax.n + k) * ax.inner;
                              for (std::size_t i = 0; i < ax.inner; ++i) dst[i] += g[i] * inv;
                            }
                          }
                        });
}

// ---------------------------------------------------------------------------
// linear algebra

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  expect_rank("matmul", a.shape(), 2, "lhs");
  expect_rank("matmul", b.shape(), 2, "rhs");
  if (a.dim(1) != b.dim(0)) shape_fail("matmul", a.shape(), b.shape());
  const auto m = static_cast<Eigen::Index>(a.dim(0));
  const auto k = static_cast<Eigen::Index>(a.dim(1));
  const auto n = static_cast<Eigen::Index>(b.dim(1));
  Buffer<T> out(static_cast<std::size_t>(m * n));
  MatMap<T>(out.data(), m, n).noalias() =
      ConstMatMap<T>(a.data().data(), m, k) * ConstMatMap<T>(b.data().data(), k, n);
  auto an = a.node(), bn = b.node();
  return make_result<T>(Shape{a.dim(0), b.dim(1)}, std::move(out), tracking<T>({&a, &b}),
                        "matmul", [an, bn, m, k, n](detail::Node<T>& self) {
                          ConstMatMap<T> g(self.grad.data(), m, n);
                          if (wants_grad(an)) {
                            MatMap<T>(an->grad_buffer(), m, k).noalias() +=
                                g * ConstMatMap<T>(bn->value.data(), k, n).transpose();
                          }
                          if (wants_grad(bn)) {
                            MatMap<T>(bn->grad_buffer(), k, n).noalias() +=
                                ConstMatMap<T>(an->value.data(), m, k).transpose() * g;
                          }
                        });
}

template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias) {
  expect_rank("linear", x.shape(), 2, "input");
  expect_rank("linear", weight.shape(), 2, "weight");
  if (x.dim(1) != weight.dim(0)) shape_fail("linear", x.shape(), weight.shape());
  if (bias.defined() && bias.shape() != Shape{weight.dim(1)}) {
    shape_fail("linear", weight.shape(), bias.shape());
  }
  const auto m = static_cast<Eigen::Index>(x.dim(0));
  const auto k = static_cast<Eigen::Index>(x.dim(1));
  const auto n = static_cast<Eigen::Index>(weight.dim(1));
  Buffer<T> out(static_cast<std::size_t>(m * n));
  MatMap<T> o(out.data(), m, n);
  o.noalias() = ConstMatMap<T>(x.data().data(), m, k) * ConstMatMap<T>(weight.data().data(), k, n);
  if (bias.defined()) {
    const auto bvec = Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>>(bias.data().data(), n);
    o.rowwise() += bvec;
  }
  auto xn = x.node(), wn = weight.node(), bn = bias.node();
  return make_result<T>(
      Shape{x.dim(0), weight.dim(1)}, std::move(out), tracking<T>({&x, &weight, &bias}), "linear",
      [xn, wn, bn, m, k, n](detail::Node<T>& self) {
        ConstMatMap<T> g(self.grad.data(), m, n);
        if (wants_grad(xn)) {
          MatMap<T>(xn->grad_buffer(), m, k).noalias() +=
              g * ConstMatMap<T>(wn->value.data(), k, n).transpose();
        }
        if (wants_grad(wn)) {
          MatMap<T>(wn->grad_buffer(), k, n).noalias() +=
              ConstMatMap<T>(xn->value.data(), m, k).transpose() * g;
        }
        if (wants_grad(bn)) {
          Eigen::Map<Eigen::Matrix<T, 1, Eigen::Dynamic>>(bn->grad_buffer(), n) +=
              g.colwise().sum();
        }
      });
}

template <typename T>
Tensor<T> conv1d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias,
                 ConvGeometry geo) {
  expect_rank("conv1d", x.shape(), 3, "input");
  expect_rank("conv1d", weight.shape(), 3, "weight");
  if (x.dim(1) != weight.dim(1)) shape_fail("conv1d", x.shape(), weight.shape());
  if (bias.defined() && bias.shape() != Shape{weight.dim(0)}) {
    shape_fail("conv1d", weight.shape(), bias.shape());
  }
  const std::size_t batch = x.dim(0), cin = x.dim(1), len = x.dim(2);
  const std::size_t cout = weight.dim(0), ker = weight.dim(2);
  const std::size_t lout = conv1d_output_length(len, ker, geo);
  const std::size_t rows = cin * ker, cols_n = batch * lout;

  // im2col: cols(ci*ker + k, b*lout + o) = x[b, ci, o*stride + k - padding]
  Buffer<T> cols(rows * cols_n, T(0));
  auto xv = x.data();
  const auto pad = static_cast<std::ptrdiff_t>(geo.padding);
  for (std::size_t ci = 0; ci < cin; ++ci) {
    for (std::size_t k = 0; k < ker; ++k) {
      T* row = cols.data() + (ci * ker + k) * cols_n;
      for (std::size_t b = 0; b < batch; ++b) {
        const T* src = xv.data() + (b * cin + ci) * len;
        for (std::size_t o = 0; o < lout; ++o) {
          const auto pos = static_cast<std::ptrdiff_t>(o * geo.stride + k) - pad;
          if (pos >= 0 && pos < static_cast<std::ptrdiff_t>(len)) row[b * lout + o] = src[pos];
        }
      }
    }
  }
  const auto ei_cout = static_cast<Eigen::Index>(cout);
  const auto ei_rows = static_cast<Eigen::Index>(rows);
  const auto ei_cols = static_cast<Eigen::Index>(cols_n);
  RowMat<T> prod = ConstMatMap<T>(weight.data().data(), ei_cout, ei_rows) *
                   ConstMatMap<T>(cols.data(), ei_rows, ei_cols);
  Buffer<T> out(batch * cout * lout);
  auto bv = bias.defined() ? bias.data() : std::span<const T>{};
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t co = 0; co < cout; ++co) {
      const T offset = bv.empty() ? T(0) : bv[co];
      const T* src = prod.data() + co * cols_n + b * lout;
      T* dst = out.data() + (b * cout + co) * lout;
      for (std::size_t o = 0; o < lout; ++o) dst[o] = src[o] + offset;
    }
  }
  const bool track = tracking<T>({&x, &weight, &bias});
  if (!track) cols.clear();
  auto xn = x.node(), wn = weight.node(), bn = bias.node();
  return make_result<T>(
      Shape{batch, cout, lout}, std::move(out), track, "conv1d",
      [xn, wn, bn, cols = std::move(cols), batch, cin, len, cout, ker, lout, rows, cols_n,
       geo](detail::Node<T>& self) {
        // gout rearranged to (cout, b*lout)
        RowMat<T> g(static_cast<Eigen::Index>(cout), static_cast<Eigen::Index>(cols_n));
        for (std::size_t b = 0; b < batch; ++b) {
          for (std::size_t co = 0; co < cout; ++co) {
            const T* src = self.grad.data() + (b * cout + co) * lout;
            T* dst = g.data() + co * cols_n + b * lout;
            std::copy(src, src + lout, dst);
          }
        }
        const auto ei_cout = static_cast<Eigen::Index>(cout);
        const auto ei_rows = static_cast<Eigen::Index>(rows);
        const auto ei_cols = static_cast<Eigen::Index>(cols_n);
        if (wants_grad(wn)) {
          MatMap<T>(wn->grad_buffer(), ei_cout, ei_rows).noalias() +=
              g * ConstMatMap<T>(cols.data(), ei_rows, ei_cols).transpose();
        }
        if (wants_grad(bn)) {
          Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, 1>>(bn->grad_buffer(), ei_cout) +=
              g.rowwise().sum();
        }
        if (wants_grad(xn)) {
          RowMat<T> gcols = ConstMatMap<T>(wn->value.data(), ei_cout, ei_rows).transpose() * g;
          T* gx = xn->grad_buffer();
          const auto pad = static_cast<std::ptrdiff_t>(geo.padding);
          for (std::size_t ci = 0; ci < cin; ++ci) {
            for (std::size_t k = 0; k < ker; ++k) {
              const T* row = gcols.data() + (ci * ker + k) * cols_n;
              for (std::size_t b = 0; b < batch; ++b) {
                T* dst = gx + (b * cin + ci) * len;
                for (std::size_t o = 0; o < lout; ++o) {
                  const auto pos = static_cast<std::ptrdiff_t>(o * geo.stride + k) - pad;
                  if (pos >= 0 && pos < static_cast<std::ptrdiff_t>(len)) {
                    dst[pos] += row[b * lout + o];
                  }
                }
              }
            }
          }
        }
      });
}

template <typename T>
Tensor<T> conv_transpose1d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias,
                           ConvGeometry geo) {
  expect_rank("conv_transpose1d", x.shape(), 3, "input");
  expect_rank("conv_transpose1d", weight.shape(), 3, "weight");
  if (x.dim(1) != weight.dim(0)) shape_fail("conv_transpose1d", x.shape(), weight.shape());
  if (bias.defined() && bias.shape() != Shape{weight.dim(1)}) {
    shape_fail("conv_transpose1d", weight.shape(), bias.shape());
  }
  const std::size_t batch = x.dim(0), cin = x.dim(1), len = x.dim(2);
  const std::size_t cout = weight.dim(1), ker = weight.dim(2);
  const std::size_t lout = conv_transpose1d_output_length(len, ker, geo);
  const std::size_t rows = cout * ker, cols_n = batch * len;

  // xmat(ci, b*len + i) = x[b, ci, i]
  Buffer<T> xmat(cin * cols_n);
  auto xv = x.data();
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t ci = 0; ci < cin; ++ci) {
      const T* src = xv.data() + (b * cin + ci) * len;
      std::copy(src, src + len, xmat.data() + ci * cols_n + b * len);
    }
  }
  const auto ei_cin = static_cast<Eigen::Index>(cin);
  const auto ei_rows = static_cast<Eigen::Index>(rows);
  const auto ei_cols = static_cast<Eigen::Index>(cols_n);
  RowMat<T> cols = ConstMatMap<T>(weight.data().data(), ei_cin, ei_rows).transpose() *
                   ConstMatMap<T>(xmat.data(), ei_cin, ei_cols);
  Buffer<T> out(batch * cout * lout, T(0));
  const auto pad = static_cast<std::ptrdiff_t>(geo.padding);
  for (std::size_t co = 0; co < cout; ++co) {
    for (std::size_t k = 0; k < ker; ++k) {
      const T* row = cols.data() + (co * ker + k) * cols_n;
      for (std::size_t b = 0; b < batch; ++b) {
        T* dst = out.data() + (b * cout + co) * lout;
        for (std::size_t i = 0; i < len; ++i) {
          const auto pos = static_cast<std::ptrdiff_t>(i * geo.stride + k) - pad;
          if (pos >= 0 && pos < static_cast<std::ptrdiff_t>(lout)) dst[pos] += row[b * len + i];
        }
      }
    }
  }
  if (bias.defined()) {
    auto bv = bias.data();
    for (std::size_t b = 0; b < batch; ++b) {
      for (std::size_t co = 0; co < cout; ++co) {
        T* dst = out.data() + (b * cout + co) * lout;
        for (std::size_t o = 0; o < lout; ++o) dst[o] += bv[co];
      }
    }
  }
  const bool track = tracking<T>({&x, &weight, &bias});
  if (!track) xmat.clear();
  auto xn = x.node(), wn = weight.node(), bn = bias.node();
  return make_result<T>(
      Shape{batch, cout, lout}, std::move(out), track, "conv_transpose1d",
      [xn, wn, bn, xmat = std::move(xmat), batch, cin, len, cout, ker, lout, rows, cols_n,
       geo](detail::Node<T>& self) {
        const auto pad = static_cast<std::ptrdiff_t>(geo.padding);
        // gcols(co*ker + k, b*len + i) = gout[b, co, i*stride + k - padding]
        RowMat<T> gcols = RowMat<T>::Zero(static_cast<Eigen::Index>(rows),
                                          static_cast<Eigen::Index>(cols_n));
        for (std::size_t co = 0; co < cout; ++co) {
          for (std::size_t k = 0; k < ker; ++k) {
            T* row = gcols.data() + (co * ker + k) * cols_n;
            for (std::size_t b = 0; b < batch; ++b) {
              const T* src = self.grad.data() + (b * cout + co) * lout;
              for (std::size_t i = 0; i < len; ++i) {
                const auto pos = static_cast<std::ptrdiff_t>(i * geo.stride + k) - pad;
                if (pos >= 0 && pos < static_cast<std::ptrdiff_t>(lout)) {
                  row[b * len + i] = src[pos];
                }
              }
            }
          }
        }
        const auto ei_cin = static_cast<Eigen::Index>(cin);
        const auto ei_rows = static_cast<Eigen::Index>(rows);
        const auto ei_cols = static_cast<Eigen::Index>(cols_n);
        if (wants_grad(wn)) {
          MatMap<T>(wn->grad_buffer(), ei_cin, ei_rows).noalias() +=
              ConstMatMap<T>(xmat.data(), ei_cin, ei_cols) * gcols.transpose();
        }
        if (wants_grad(xn)) {
          RowMat<T> gx = ConstMatMap<T>(wn->value.data(), ei_cin, ei_rows) * gcols;
          T* dst = xn->grad_buffer();
          for (std::size_t b = 0; b < batch; ++b) {
            for (std::size_t ci = 0; ci < cin; ++ci) {
              const T* src = gx.data() + ci * cols_n + b * len;
              T* d = dst + (b * cin + ci) * len;
              for (std::size_t i = 0; i < len; ++i) d[i] += src[i];
            }
          }
        }
        if (wants_grad(bn)) {
          T* gb = bn->grad_buffer();
          for (std::size_t b = 0; b < batch; ++b) {
            for (std::size_t co = 0; co < cout; ++co) {
              const T* src = self.grad.data() + (b * cout + co) * lout;
              for (std::size_t o = 0; o < lout; ++o) gb[co] += src[o];
            }
          }
        }
      });
}

// ---------------------------------------------------------------------------
// softmax / attention

template <typename T>
Tensor<T> softmax(const Tensor<T>& a, std::size_t axis) {
  if (axis >= a.rank()) {
    shape_fail("softmax", "axis " + std::to_string(axis) + " out of range for " +
                              to_string(a.shape()));
  }
  const Axes ax = split_axis(a.shape(), axis);
  if (ax.n == 0) shape_fail("softmax", "softmax axis is empty");
  auto x = a.data();
  Buffer<T> out(x.size());
  for (std::size_t o = 0; o < ax.outer; ++o) {
    for (std::size_t i = 0; i < ax.inner; ++i) {
      const std::size_t base = o * ax.n * ax.inner + i;
      T hi = -std::numeric_limits<T>::infinity();
      for (std::size_t k = 0; k < ax.n; ++k) hi = std::max(hi, x[base + k * ax.inner]);
      T total = 0;
      for (std::size_t k = 0; k < ax.n; ++k) {
        const T e = std::exp(x[base + k * ax.inner] - hi);
        out[base + k * ax.inner] = e;
        total += e;
      }
      for (std::size_t k = 0; k < ax.n; ++k) out[base + k * ax.inner] /= total;
    }
  }
  auto an = a.node();
  return make_result<T>(
      a.shape(), std::move(out), tracking<T>({&a}), "softmax", [an, ax](detail::Node<T>& self) {
        T* ga = an->grad_buffer();
        const auto& p = self.value;
        const auto& g = self.grad;
        for (std::size_t o = 0; o < ax.outer; ++o) {
          for (std::size_t i = 0; i < ax.inner; ++i) {
            const std::size_t base = o * ax.n * ax.inner + i;
            T dot = 0;
            for (std::size_t k = 0; k < ax.n; ++k) {
              dot += p[base + k * ax.inner] * g[base + k * ax.inner];
            }
            for (std::size_t k = 0; k < ax.n; ++k) {
              const std::size_t idx = base + k * ax.inner;
              ga[idx] += p[idx] * (g[idx] - dot);
            }
          }
        }
      });
}

template <typename T>
Tensor<T> biased_softmax(const Tensor<T>& logits, const Tensor<T>& bias,
                         std::span<const std::uint8_t> active) {
  expect_rank("biased_softmax", logits.shape(), 3, "logits");
  const std::size_t batch = logits.dim(0), rows = logits.dim(1), n = logits.dim(2);
  if (bias.defined() && bias.shape() != Shape{batch, n}) {
    shape_fail("biased_softmax", logits.shape(), bias.shape());
  }
  if (active.size() != batch * n) {
    shape_fail("biased_softmax", "activity flags have " + std::to_string(active.size()) +
                                     " entries, logits " + to_string(logits.shape()) + " need " +
                                     std::to_string(batch * n));
  }
  for (std::size_t b = 0; b < batch; ++b) {
    const auto first = active.begin() + static_cast<std::ptrdiff_t>(b * n);
    if (std::none_of(first, first + static_cast<std::ptrdiff_t>(n), [](auto f) { return f; })) {
      throw std::invalid_argument("biased_softmax: batch entry " + std::to_string(b) +
                                  " has no active element");
    }
  }
  auto x = logits.data();
  auto bv = bias.defined() ? bias.data() : std::span<const T>{};
  Buffer<T> out(x.size(), T(0));
  for (std::size_t b = 0; b < batch; ++b) {
    const std::uint8_t* on = active.data() + b * n;
    for (std::size_t r = 0; r < rows; ++r) {
      const std::size_t base = (b * rows + r) * n;
      T hi = -std::numeric_limits<T>::infinity();
      for (std::size_t j = 0; j < n; ++j) {
        if (!on[j]) continue;
        hi = std::max(hi, x[base + j] + (bv.empty() ? T(0) : bv[b * n + j]));
      }
      T total = 0;
      for (std::size_t j = 0; j < n; ++j) {
        if (!on[j]) continue;
        const T e = std::exp(x[base + j] + (bv.empty() ? T(0) : bv[b * n + j]) - hi);
        out[base + j] = e;
        total += e;
      }
      for (std::size_t j = 0; j < n; ++j) {
        if (on[j]) out[base + j] /= total;
      }
    }
  }
  auto ln = logits.node(), bn = bias.node();
  return make_result<T>(
      logits.shape(), std::move(out), tracking<T>({&logits, &bias}), "biased_softmax",
      [ln, bn, batch, rows, n](detail::Node<T>& self) {
        const auto& p = self.value;
        const auto& g = self.grad;
        T* gl = wants_grad(ln) ? ln->grad_buffer() : nullptr;
        T* gb = wants_grad(bn) ? bn->grad_buffer() : nullptr;
        for (std::size_t b = 0; b < batch; ++b) {
          for (std::size_t r = 0; r < rows; ++r) {
            const std::size_t base = (b * rows + r) * n;
            T dot = 0;
            for (std::size_t j = 0; j < n; ++j) dot += p[base + j] * g[base + j];
            for (std::size_t j = 0; j < n; ++j) {
              const T d = p[base + j] * (g[base + j] - dot);
              if (gl) gl[base + j] += d;
              if (gb) gb[b * n + j] += d;
            }
          }
        }
      });
}

template <typename T>
Tensor<T> multihead_scores(const Tensor<T>& q, const Tensor<T>& k, std::size_t heads, T factor) {
  expect_rank("multihead_scores", q.shape(), 3, "queries");
  expect_rank("multihead_scores", k.shape(), 3, "keys");
  if (q.dim(0) != k.dim(0) || q.dim(2) != k.dim(2)) {
    shape_fail("multihead_scores", q.shape(), k.shape());
  }
  const std::size_t batch = q.dim(0), lq = q.dim(1), nk = k.dim(1), width = q.dim(2);
  if (heads == 0 || width % heads != 0) {
    shape_fail("multihead_scores",
               "width " + std::to_string(width) + " not divisible by " + std::to_string(heads) +
                   " heads");
  }
  const std::size_t hd = width / heads;
  auto qv = q.data(), kv = k.data();
  Buffer<T> out(batch * heads * lq * nk);
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t h = 0; h < heads; ++h) {
      for (std::size_t i = 0; i < lq; ++i) {
        const T* qi = qv.data() + (b * lq + i) * width + h * hd;
        T* dst = out.data() + ((b * heads + h) * lq + i) * nk;
        for (std::size_t j = 0; j < nk; ++j) {
          const T* kj = kv.data() + (b * nk + j) * width + h * hd;
          T acc = 0;
          for (std::size_t e = 0; e < hd; ++e) acc += qi[e] * kj[e];
          dst[j] = factor * acc;
        }
      }
    }
  }
  auto qn = q.node(), kn = k.node();
  return make_result<T>(
      Shape{batch, heads * lq, nk}, std::move(out), tracking<T>({&q, &k}), "multihead_scores",
      [qn, kn, batch, heads, lq, nk, width, hd, factor](detail::Node<T>& self) {
        T* gq = wants_grad(qn) ? qn->grad_buffer() : nullptr;
        T* gk = wants_grad(kn) ? kn->grad_buffer() : nullptr;
        for (std::size_t b = 0; b < batch; ++b) {
          for (std::size_t h = 0; h < heads; ++h) {
            for (std::size_t i = 0; i < lq; ++i) {
              const T* g = self.grad.data() + ((b * heads + h) * lq + i) * nk;
              const std::size_t qoff = (b * lq + i) * width + h * hd;
              for (std::size_t j = 0; j < nk; ++j) {
                const T gs = factor * g[j];
                if (gs == T(0)) continue;
                const std::size_t koff = (b * nk + j) * width + h * hd;
                for (std::size_t e = 0; e < hd; ++e) {
                  if (gq) gq[qoff + e] += gs * kn->value[koff + e];
                  if (gk) gk[koff + e] += gs * qn->value[qoff + e];
                }
              }
            }
          }
        }
      });
}

template <typename T>
Tensor<T> multihead_mix(const Tensor<T>& probs, const Tensor<T>& v, std::size_t heads) {
  expect_rank("multihead_mix", probs.shape(), 3, "probs");
  expect_rank("multihead_mix", v.shape(), 3, "values");
  const std::size_t batch = v.dim(0), nk = v.dim(1), width = v.dim(2);
  if (heads == 0 || width % heads != 0 || probs.dim(0) != batch || probs.dim(2) != nk ||
      probs.dim(1) % heads != 0) {
    shape_fail("multihead_mix", probs.shape(), v.shape());
  }
  const std::size_t lq = probs.dim(1) / heads, hd = width / heads;
  auto pv = probs.data(), vv = v.data();
  Buffer<T> out(batch * lq * width, T(0));
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t h = 0; h < heads; ++h) {
      for (std::size_t i = 0; i < lq; ++i) {
        const T* p = pv.data() + ((b * heads + h) * lq + i) * nk;
        T* dst = out.data() + (b * lq + i) * width + h * hd;
        for (std::size_t j = 0; j < nk; ++j) {
          // Zero-probability keys are skipped so masked rows cannot leak
          // through 0 * v, including non-finite v.
          if (p[j] == T(0)) continue;
          const T* vj = vv.data() + (b * nk + j) * width + h * hd;
          for (std::size_t e = 0; e < hd; ++e) dst[e] += p[j] * vj[e];
        }
      }
    }
  }
  auto pn = probs.node(), vn = v.node();
  return make_result<T>(
      Shape{batch, lq, width}, std::move(out), tracking<T>({&probs, &v}), "multihead_mix",
      [pn, vn, batch, heads, lq, nk, width, hd](detail::Node<T>& self) {
        T* gp = wants_grad(pn) ? pn->grad_buffer() : nullptr;
        T* gv = wants_grad(vn) ? vn->grad_buffer() : nullptr;
        for (std::size_t b = 0; b < batch; ++b) {
          for (std::size_t h = 0; h < heads; ++h) {
            for (std::size_t i = 0; i < lq; ++i) {
              const std::size_t prow = ((b * heads + h) * lq + i) * nk;
              const T* g = self.grad.data() + (b * lq + i) * width + h * hd;
              for (std::size_t j = 0; j < nk; ++j) {
                const std::size_t voff = (b * nk + j) * width + h * hd;
                if (gp) {
                  T acc = 0;
                  for (std::size_t e = 0; e < hd; ++e) acc += g[e] * vn->value[voff + e];
                  gp[prow + j] += acc;
                }
                const T p = pn->value[prow + j];
                if (gv && p != T(0)) {
                  for (std::size_t e = 0; e < hd; ++e) gv[voff + e] += p * g[e];
                }
              }
            }
          }
        }
      });
}

// ---------------------------------------------------------------------------
// shape plumbing

template <typename T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape) {
  if (numel(shape) != a.size()) shape_fail("reshape", a.shape(), shape);
  Buffer<T> out(a.data().begin(), a.data().end());
  auto an = a.node();
  return make_result<T>(std::move(shape), std::move(out), tracking<T>({&a}), "reshape",
                        [an](detail::Node<T>& self) {
                          T* ga = an->grad_buffer();
                          for (std::size_t i = 0; i < self.grad.size(); ++i) ga[i] += self.grad[i];
                        });
}

template <typename T>
Tensor<T> transpose_last2(const Tensor<T>& a) {
  expect_rank("transpose_last2", a.shape(), 3, "input");
  const std::size_t batch = a.dim(0), m = a.dim(1), n = a.dim(2);
  auto x = a.data();
  Buffer<T> out(x.size());
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t i = 0; i < m; ++i) {
      for (std::size_t j = 0; j < n; ++j) out[(b * n + j) * m + i] = x[(b * m + i) * n + j];
    }
  }
  auto an = a.node();
  return make_result<T>(Shape{batch, n, m}, std::move(out), tracking<T>({&a}), "transpose_last2",
                        [an, batch, m, n](detail::Node<T>& self) {
                          T* ga = an->grad_buffer();
                          for (std::size_t b = 0; b < batch; ++b) {
                            for (std::size_t i = 0; i < m; ++i) {
                              for (std::size_t j = 0; j < n; ++j) {
                                ga[(b * m + i) * n + j] += self.grad[(b * n + j) * m + i];
                              }
                            }
                          }
                        });
}

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, std::size_t axis) {
  if (parts.empty()) shape_fail("concat", "no inputs");
  const Shape& ref = parts.front().shape();
  if (axis >= ref.size()) {
    shape_fail("concat", "axis " + std::to_string(axis) + " out of range for " + to_string(ref));
  }
  Shape out_shape = ref;
  out_shape[axis] = 0;
  for (const auto& p : parts) {
    const Shape& s = p.shape();
    if (s.size() != ref.size()) shape_fail("concat", ref, s);
    for (std::size_t i = 0; i < s.size(); ++i) {
      if (i != axis && s[i] != ref[i]) shape_fail("concat", ref, s);
    }
    out_shape[axis] += s[axis];
  }
  const Axes ax = split_axis(out_shape, axis);
  Buffer<T> out(numel(out_shape));
  std::vector<std::size_t> widths;
  std::size_t offset = 0;
  for (const auto& p : parts) {
    const std::size_t chunk = p.dim(axis) * ax.inner;
    auto src = p.data();
    for (std::size_t o = 0; o < ax.outer; ++o) {
      std::copy(src.begin() + static_cast<std::ptrdiff_t>(o * chunk),
                src.begin() + static_cast<std::ptrdiff_t>((o + 1) * chunk),
                out.begin() + static_cast<std::ptrdiff_t>(o * ax.n * ax.inner + offset));
    }
    widths.push_back(chunk);
    offset += chunk;
  }
  bool track = false;
  std::vector<NodePtr<T>> nodes;
  for (const auto& p : parts) {
    track = track || tracking<T>({&p});
    nodes.push_back(p.node());
  }
  return make_result<T>(std::move(out_shape), std::move(out), track, "concat",
                        [nodes, widths, ax](detail::Node<T>& self) {
                          std::size_t offset = 0;
                          for (std::size_t p = 0; p < nodes.size(); ++p) {
                            const std::size_t chunk = widths[p];
                            if (wants_grad(nodes[p])) {
                              T* g = nodes[p]->grad_buffer();
                              for (std::size_t o = 0; o < ax.outer; ++o) {
                                const T* src = self.grad.data() + o * ax.n * ax.inner + offset;
                                for (std::size_t i = 0; i < chunk; ++i) g[o * chunk + i] += src[i];
                              }
                            }
                            offset += chunk;
                          }
                        });
}

template <typename T>
Tensor<T> broadcast_positions(const Tensor<T>& v, std::size_t length) {
  expect_rank("broadcast_positions", v.shape(), 2, "input");
  const std::size_t rows = v.dim(0) * v.dim(1);
  auto x = v.data();
  Buffer<T> out(rows * length);
  for (std::size_t r = 0; r < rows; ++r) {
    std::fill(out.begin() + static_cast<std::ptrdiff_t>(r * length),
              out.begin() + static_cast<std::ptrdiff_t>((r + 1) * length), x[r]);
  }
  auto vn = v.node();
  return make_result<T>(Shape{v.dim(0), v.dim(1), length}, std::move(out), tracking<T>({&v}),
                        "broadcast_positions", [vn, rows, length](detail::Node<T>& self) {
                          T* gv = vn->grad_buffer();
                          for (std::size_t r = 0; r < rows; ++r) {
                            T acc = 0;
                            for (std::size_t l = 0; l < length; ++l) acc += self.grad[r * length + l];
                            gv[r] += acc;
                          }
                        });
}

template <typename T>
Tensor<T> broadcast_batch(const Tensor<T>& a, std::size_t batch) {
  Shape out_shape{batch};
  out_shape.insert(out_shape.end(), a.shape().begin(), a.shape().end());
  const std::size_t n = a.size();
  Buffer<T> out(batch * n);
  for (std::size_t b = 0; b < batch; ++b) {
    std::copy(a.data().begin(), a.data().end(), out.begin() + static_cast<std::ptrdiff_t>(b * n));
  }
  auto an = a.node();
  return make_result<T>(std::move(out_shape), std::move(out), tracking<T>({&a}), "broadcast_batch",
                        [an, batch, n](detail::Node<T>& self) {
                          T* ga = an->grad_buffer();
                          for (std::size_t b = 0; b < batch; ++b) {
                            for (std::size_t i = 0; i < n; ++i) ga[i] += self.grad[b * n + i];
                          }
                        });
}

template <typename T>
Tensor<T> pad_last(const Tensor<T>& a, std::size_t right) {
  if (a.rank() == 0) shape_fail("pad_last", "scalar input");
  const std::size_t len = a.shape().back(), rows = a.size() / std::max<std::size_t>(len, 1);
  Shape out_shape = a.shape();
  out_shape.back() = len + right;
  Buffer<T> out(rows * (len + right), T(0));
  auto x = a.data();
  for (std::size_t r = 0; r < rows; ++r) {
    std::copy(x.begin() + static_cast<std::ptrdiff_t>(r * len),
              x.begin() + static_cast<std::ptrdiff_t>((r + 1) * len),
              out.begin() + static_cast<std::ptrdiff_t>(r * (len + right)));
  }
  auto an = a.node();
  return make_result<T>(std::move(out_shape), std::move(out), tracking<T>({&a}), "pad_last",
                        [an, rows, len, right](detail::Node<T>& self) {
                          T* ga = an->grad_buffer();
                          for (std::size_t r = 0; r < rows; ++r) {
                            for (std::size_t i = 0; i < len; ++i) {
                              ga[r * len + i] += self.grad[r * (len + right) + i];
                            }
                          }
                        });
}

template <typename T>
Tensor<T> slice_last(const Tensor<T>& a, std::size_t start, std::size_t count) {
  if (a.rank() == 0) shape_fail("slice_last", "scalar input");
  const std::size_t len = a.shape().back();
  if (start + count > len) {
    shape_fail("slice_last", "range [" + std::to_string(start) + ", " +
                                 std::to_string(start + count) + ") exceeds shape " +
                                 to_string(a.shape()));
  }
  const std::size_t rows = len == 0 ? 0 : a.size() / len;
  Shape out_shape = a.shape();
  out_shape.back() = count;
  Buffer<T> out(rows * count);
  auto x = a.data();
  for (std::size_t r = 0; r < rows; ++r) {
    std::copy(x.begin() + static_cast<std::ptrdiff_t>(r * len + start),
              x.begin() + static_cast<std::ptrdiff_t>(r * len + start + count),
              out.begin() + static_cast<std::ptrdiff_t>(r * count));
  }
  auto an = a.node();
  return make_result<T>(std::move(out_shape), std::move(out), tracking<T>({&a}), "slice_last",
                        [an, rows, len, start, count](detail::Node<T>& self) {
                          T* ga = an->grad_buffer();
                          for (std::size_t r = 0; r < rows; ++r) {
                            for (std::size_t i = 0; i < count; ++i) {
                              ga[r * len + start + i] += self.grad[r * count + i];
                            }
                          }
                        });
}

template <typename To, typename From>
Tensor<To> cast(const Tensor<From>& a) {
  std::vector<To> out(a.size());
  std::transform(a.data().begin(), a.data().end(), out.begin(),
                 [](From v) { return static_cast<To>(v); });
  return Tensor<To>(a.shape(), std::move(out));
}

#define PROTODIFF_INSTANTIATE(T)                                                              \
  template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                                 \
  template Tensor<T> sub(const Tensor<T>&, const Tensor<T>&);                                 \
  template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                                 \
  template Tensor<T> scale(const Tensor<T>&, T);                                              \
  template Tensor<T> add_scalar(const Tensor<T>&, T);                                         \
  template Tensor<T> silu(const Tensor<T>&);                                                  \
  template Tensor<T> relu(const Tensor<T>&);                                                  \
  template Tensor<T> sum(const Tensor<T>&);                                                   \
  template Tensor<T> mean(const Tensor<T>&);                                                  \
  template Tensor<T> mean_axis(const Tensor<T>&, std::size_t);                                \
  template Tensor<T> matmul(const Tensor<T>&, const Tensor<T>&);                              \
  template Tensor<T> linear(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);            \
  template Tensor<T> conv1d(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,             \
                            ConvGeometry);                                                    \
  template Tensor<T> conv_transpose1d(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,   \
                                      ConvGeometry);                                          \
  template Tensor<T> softmax(const Tensor<T>&, std::size_t);                                  \
  template Tensor<T> biased_softmax(const Tensor<T>&, const Tensor<T>&,                       \
                                    std::span<const std::uint8_t>);                           \
  template Tensor<T> multihead_scores(const Tensor<T>&, const Tensor<T>&, std::size_t, T);    \
  template Tensor<T> multihead_mix(const Tensor<T>&, const Tensor<T>&, std::size_t);          \
  template Tensor<T> reshape(const Tensor<T>&, Shape);                                        \
  template Tensor<T> transpose_last2(const Tensor<T>&);                                       \
  template Tensor<T> concat(const std::vector<Tensor<T>>&, std::size_t);                      \
  template Tensor<T> broadcast_positions(const Tensor<T>&, std::size_t);                      \
  template Tensor<T> broadcast_batch(const Tensor<T>&, std::size_t);                          \
  template Tensor<T> pad_last(const Tensor<T>&, std::size_t);                                 \
  template Tensor<T> slice_last(const Tensor<T>&, std::size_t, std::size_t);

PROTODIFF_INSTANTIATE(float)
PROTODIFF_INSTANTIATE(double)
#undef PROTODIFF_INSTANTIATE

template Tensor<double> cast(const Tensor<float>&);
template Tensor<float> cast(const Tensor<double>&);
template Tensor<float> cast(const Tensor<float>&);
template Tensor<double> cast(const Tensor<double>&);

}  // namespace protodiff::nd
