// SPDX-License-Identifier: Apache-2.0
// Copyright (C) 2026 mmfer contributors

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "blas.hpp"
#include "mmfer/autograd.hpp"

namespace mmfer::ops {

namespace {

template <typename T>
void require_same_tape(const Var<T>& a, const Var<T>& b, const char* op) {
  if (a.tape() != b.tape()) throw Error(std::string(op) + ": operands live on different tapes");
}

std::string shapes2(const Shape& a, const Shape& b) { return shape_str(a) + " and " + shape_str(b); }

// Splits `shape` around `axis` into (outer, extent, inner).
struct AxisSplit {
  std::size_t outer = 1, extent = 1, inner = 1;
};

AxisSplit split_axis(const Shape& shape, std::size_t axis, const char* op) {
  if (axis >= shape.size()) {
    throw ShapeError(std::string(op) + ": axis " + std::to_string(axis) + " out of range for " + shape_str(shape));
  }
  AxisSplit s;
  for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
  s.extent = shape[axis];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

template <typename T>
void accumulate(Tensor<T>& dst, std::span<const T> src) {
  T* d = dst.ptr();
  for (std::size_t i = 0; i < src.size(); ++i) d[i] += src[i];
}

}  // namespace

template <typename T>
Var<T> matmul(const Var<T>& a, const Var<T>& b) {
  require_same_tape(a, b, "matmul");
  const auto& A = a.value();
  const auto& B = b.value();
  if (A.rank() != 2 || B.rank() != 2 || A.dim(1) != B.dim(0)) {
    throw ShapeError("matmul: incompatible shapes " + shapes2(A.shape(), B.shape()));
  }
  const int m = static_cast<int>(A.dim(0)), k = static_cast<int>(A.dim(1)), n = static_cast<int>(B.dim(1));
  Tensor<T> C(Shape{A.dim(0), B.dim(1)});
  blas::gemm(false, false, m, n, k, T{1}, A.ptr(), k, B.ptr(), n, T{0}, C.ptr(), n);
  const auto ia = a.id(), ib = b.id();
  return a.tape()->record("matmul", std::move(C), {ia, ib}, [ia, ib, m, n, k](Tape<T>& t, const Tensor<T>& dC, const Tensor<T>&) {
    if (t.requires_grad(ia)) {
      blas::gemm(false, true, m, k, n, T{1}, dC.ptr(), n, t.value(ib).ptr(), n, T{1}, t.grad_accum(ia).ptr(), k);
    }
    if (t.requires_grad(ib)) {
      blas::gemm(true, false, k, n, m, T{1}, t.value(ia).ptr(), k, dC.ptr(), n, T{1}, t.grad_accum(ib).ptr(), n);
    }
  });
}

template <typename T>
Var<T> bmm(const Var<T>& a, const Var<T>& b, bool transpose_b, T alpha) {
  require_same_tape(a, b, "bmm");
  const auto& A = a.value();
  const auto& B = b.value();
  if (A.rank() != 3 || B.rank() != 3 || A.dim(0) != B.dim(0) || A.dim(2) != (transpose_b ? B.dim(2) : B.dim(1))) {
    throw ShapeError("bmm: incompatible shapes " + shapes2(A.shape(), B.shape()));
  }
  const std::size_t batch = A.dim(0);
  const int m = static_cast<int>(A.dim(1)), k = static_cast<int>(A.dim(2));
  const int n = static_cast<int>(transpose_b ? B.dim(1) : B.dim(2));
  const int ldb = transpose_b ? k : n;
  const std::size_t sa = std::size_t(m) * k, sb = std::size_t(k) * n, sc = std::size_t(m) * n;
  Tensor<T> C(Shape{batch, std::size_t(m), std::size_t(n)});
  for (std::size_t i = 0; i < batch; ++i) {
    blas::gemm(false, transpose_b, m, n, k, alpha, A.ptr() + i * sa, k, B.ptr() + i * sb, ldb, T{0},
               C.ptr() + i * sc, n);
  }
  const auto ia = a.id(), ib = b.id();
  return a.tape()->record(
      "bmm", std::move(C), {ia, ib}, [=](Tape<T>& t, const Tensor<T>& dC, const Tensor<T>&) {
        const T* Ap = t.value(ia).ptr();
        const T* Bp = t.value(ib).ptr();
        if (t.requires_grad(ia)) {
          T* dA = t.grad_accum(ia).ptr();
          for (std::size_t i = 0; i < batch; ++i) {
            // dA = alpha * dC * op(B)^T
            blas::gemm(false, !transpose_b, m, k, n, alpha, dC.ptr() + i * sc, n, Bp + i * sb, ldb, T{1},
                       dA + i * sa, k);
          }
        }
        if (t.requires_grad(ib)) {
          T* dB = t.grad_accum(ib).ptr();
          for (std::size_t i = 0; i < batch; ++i) {
            if (transpose_b) {
              blas::gemm(true, false, n, k, m, alpha, dC.ptr() + i * sc, n, Ap + i * sa, k, T{1}, dB + i * sb, k);
            } else {
              blas::gemm(true, false, k, n, m, alpha, Ap + i * sa, k, dC.ptr() + i * sc, n, T{1}, dB + i * sb, n);
            }
          }
        }
      });
}

template <typename T>
Var<T> linear(const Var<T>& x, const Var<T>& weight, const Var<T>& bias) {
  require_same_tape(x, weight, "linear");
  require_same_tape(x, bias, "linear");
  const auto& X = x.value();
  const auto& W = weight.value();
  const auto& b = bias.value();
  if (W.rank() != 2 || X.shape().back() != W.dim(0) || b.size() != W.dim(1)) {
    throw ShapeError("linear: input " + shape_str(X.shape()) + " incompatible with weight " + shape_str(W.shape()) +
                     " / bias " + shape_str(b.shape()));
  }
  const int in = static_cast<int>(W.dim(0)), out = static_cast<int>(W.dim(1));
  const int rows = static_cast<int>(X.size() / in);
  Shape yshape = X.shape();
  yshape.back() = W.dim(1);
  Tensor<T> Y(yshape);
  T* y = Y.ptr();
  for (int r = 0; r < rows; ++r) std::copy(b.ptr(), b.ptr() + out, y + std::size_t(r) * out);
  blas::gemm(false, false, rows, out, in, T{1}, X.ptr(), in, W.ptr(), out, T{1}, y, out);
  const auto ix = x.id(), iw = weight.id(), ib = bias.id();
  return x.tape()->record("linear", std::move(Y), {ix, iw, ib}, [=](Tape<T>& t, const Tensor<T>& dY, const Tensor<T>&) {
    if (t.requires_grad(ix)) {
      blas::gemm(false, true, rows, in, out, T{1}, dY.ptr(), out, t.value(iw).ptr(), out, T{1},
                 t.grad_accum(ix).ptr(), in);
    }
    if (t.requires_grad(iw)) {
      blas::gemm(true, false, in, out, rows, T{1}, t.value(ix).ptr(), in, dY.ptr(), out, T{1},
                 t.grad_accum(iw).ptr(), out);
    }
    if (t.requires_grad(ib)) {
      T* db = t.grad_accum(ib).ptr();
      const T* g = dY.ptr();
      for (int r = 0; r < rows; ++r) {
        for (int c = 0; c < out; ++c) db[c] += g[std::size_t(r) * out + c];
      }
    }
  });
}

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  require_same_tape(a, b, "add");
  const auto& A = a.value();
  const auto& B = b.value();
  if (A.shape() != B.shape()) throw ShapeError("add: shape mismatch " + shapes2(A.shape(), B.shape()));
  Tensor<T> C = A;
  accumulate(C, B.data());
  const auto ia = a.id(), ib = b.id();
  return a.tape()->record("add", std::move(C), {ia, ib}, [ia, ib](Tape<T>& t, const Tensor<T>& dC, const Tensor<T>&) {
    if (t.requires_grad(ia)) accumulate(t.grad_accum(ia), dC.data());
    if (t.requires_grad(ib)) accumulate(t.grad_accum(ib), dC.data());
  });
}

template <typename T>
Var<T> add_bcast(const Var<T>& a, const Var<T>& b) {
  require_same_tape(a, b, "add_bcast");
  const auto& A = a.value();
  const auto& B = b.value();
  const auto& as = A.shape();
  const auto& bs = B.shape();
  if (bs.size() > as.size() || !std::equal(bs.rbegin(), bs.rend(), as.rbegin())) {
    throw ShapeError("add_bcast: " + shape_str(bs) + " is not a trailing shape of " + shape_str(as));
  }
  const std::size_t inner = B.size(), outer = A.size() / inner;
  Tensor<T> C = A;
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t i = 0; i < inner; ++i) C[o * inner + i] += B[i];
  }
  const auto ia = a.id(), ib = b.id();
  return a.tape()->record("add_bcast", std::move(C), {ia, ib}, [=](Tape<T>& t, const Tensor<T>& dC, const Tensor<T>&) {
    if (t.requires_grad(ia)) accumulate(t.grad_accum(ia), dC.data());
    if (t.requires_grad(ib)) {
      auto& dB = t.grad_accum(ib);
      for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t i = 0; i < inner; ++i) dB[i] += dC[o * inner + i];
      }
    }
  });
}

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  require_same_tape(a, b, "mul");
  const auto& A = a.value();
  const auto& B = b.value();
  if (A.shape() != B.shape()) throw ShapeError("mul: shape mismatch " + shapes2(A.shape(), B.shape()));
  Tensor<T> C = A;
  for (std::size_t i = 0; i < C.size(); ++i) C[i] *= B[i];
  const auto ia = a.id(), ib = b.id();
  return a.tape()->record("mul", std::move(C), {ia, ib}, [ia, ib](Tape<T>& t, const Tensor<T>& dC, const Tensor<T>&) {
    if (t.requires_grad(ia)) {
      auto& dA = t.grad_accum(ia);
      const auto& Bv = t.value(ib);
      for (std::size_t i = 0; i < dC.size(); ++i) dA[i] += dC[i] * Bv[i];
    }
    if (t.requires_grad(ib)) {
      auto& dB = t.grad_accum(ib);
      const auto& Av = t.value(ia);
      for (std::size_t i = 0; i < dC.size(); ++i) dB[i] += dC[i] * Av[i];
    }
  });
}

template <typename T>
Var<T> scale(const Var<T>& x, T s) {
  Tensor<T> y = x.value();
  for (auto& v : y.data()) v *= s;
  const auto ix = x.id();
  return x.tape()->record("scale", std::move(y), {ix}, [ix, s](Tape<T>& t, const Tensor<T>& dy, const Tensor<T>&) {
    auto& dx = t.grad_accum(ix);
    for (std::size_t i = 0; i < dy.size(); ++i) dx[i] += s * dy[i];
  });
}

template <typename T>
Var<T> relu(const Var<T>& x) {
  Tensor<T> y = x.value();
  for (auto& v : y.data()) v = v <= T{0} ? T{0} : v;  // NaN passes through
  if (debug::relu_pattern_tracked()) {
    std::uint64_t bits = 0;
    for (std::size_t i = 0; i < y.size(); ++i) {
      bits = (bits << 1) | (y[i] > T{0});
      if (i % 64 == 63 || i + 1 == y.size()) debug::fold_relu_pattern(bits), bits = 0;
    }
  }
  const auto ix = x.id();
  return x.tape()->record("relu", std::move(y), {ix}, [ix](Tape<T>& t, const Tensor<T>& dy, const Tensor<T>&) {
    auto& dx = t.grad_accum(ix);
    const auto& xv = t.value(ix);
    for (std::size_t i = 0; i < dy.size(); ++i) {
      if (xv[i] > T{0}) dx[i] += dy[i];
    }
  });
}

template <typename T>
Var<T> dropout(const Var<T>& x, double p, bool training, const DropoutKey& key) {
  if (p < 0.0 || p >= 1.0) throw ConfigError("dropout: p must be in [0, 1), got " + std::to_string(p));
  if (!training || p == 0.0) return x;
  const std::uint64_t stream = key.stream();
  const T keep_scale = static_cast<T>(1.0 / (1.0 - p));
  Tensor<T> mask(x.shape());
  for (std::size_t i = 0; i < mask.size(); ++i) mask[i] = counter_uniform(stream, i) >= p ? keep_scale : T{0};
  Tensor<T> y = x.value();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] *= mask[i];
  const auto ix = x.id();
  return x.tape()->record("dropout", std::move(y), {ix},
                          [ix, mask = std::move(mask)](Tape<T>& t, const Tensor<T>& dy, const Tensor<T>&) {
                            auto& dx = t.grad_accum(ix);
                            for (std::size_t i = 0; i < dy.size(); ++i) dx[i] += dy[i] * mask[i];
                          });
}

template <typename T>
Var<T> reshape(const Var<T>& x, Shape shape) {
  Tensor<T> y = x.value().reshaped(std::move(shape));
  const auto ix = x.id();
  return x.tape()->record("reshape", std::move(y), {ix}, [ix](Tape<T>& t, const Tensor<T>& dy, const Tensor<T>&) {
    accumulate(t.grad_accum(ix), dy.data());
  });
}

template <typename T>
Var<T> flatten(const Var<T>& x) {
  return reshape(x, Shape{x.value().size()});
}

namespace {

// Copies `src` (shape `in`) into `dst` laid out as the permutation `perm`.
// With `inverse`, scatters from a permuted layout back to `in` order.
template <typename T>
void permute_copy(const T* src, T* dst, const Shape& in, const std::vector<std::size_t>& perm, bool inverse) {
  const std::size_t rank = in.size();
  std::vector<std::size_t> in_stride(rank, 1);
  for (std::size_t i = rank; i-- > 1;) in_stride[i - 1] = in_stride[i] * in[i];
  Shape out(rank);
  std::vector<std::size_t> step(rank);
  for (std::size_t i = 0; i < rank; ++i) {
    out[i] = in[perm[i]];
    step[i] = in_stride[perm[i]];
  }
  const std::size_t total = shape_size(in);
  std::vector<std::size_t> idx(rank, 0);
  std::size_t off = 0;
  for (std::size_t n = 0; n < total; ++n) {
    if (inverse) dst[off] += src[n];
    else dst[n] = src[off];
    for (std::size_t d = rank; d-- > 0;) {
      if (++idx[d] < out[d]) {
        off += step[d];
        break;
      }
      off -= step[d] * (out[d] - 1);
      idx[d] = 0;
    }
  }
}

}  // namespace

template <typename T>
Var<T> permute(const Var<T>& x, const std::vector<std::size_t>& perm) {
  const Shape& in = x.shape();
  std::vector<std::size_t> sorted = perm;
  std::sort(sorted.begin(), sorted.end());
  std::vector<std::size_t> iota(in.size());
  std::iota(iota.begin(), iota.end(), std::size_t{0});
  if (sorted != iota) throw ShapeError("permute: invalid permutation for " + shape_str(in));
  Shape out(in.size());
  for (std::size_t i = 0; i < in.size(); ++i) out[i] = in[perm[i]];
  Tensor<T> y(out);
  permute_copy(x.value().ptr(), y.ptr(), in, perm, false);
  const auto ix = x.id();
  return x.tape()->record("permute", std::move(y), {ix}, [ix, in, perm](Tape<T>& t, const Tensor<T>& dy, const Tensor<T>&) {
    permute_copy(dy.ptr(), t.grad_accum(ix).ptr(), in, perm, true);
  });
}

template <typename T>
Var<T> transpose(const Var<T>& x) {
  if (x.value().rank() != 2) throw ShapeError("transpose: expected 2-D, got " + shape_str(x.shape()));
  return permute(x, {1, 0});
}

template <typename T>
Var<T> concat(const std::vector<Var<T>>& xs, std::size_t axis) {
  if (xs.empty()) throw ShapeError("concat: no inputs");
  Shape out = xs.front().shape();
  if (axis >= out.size()) throw ShapeError("concat: axis out of range for " + shape_str(out));
  out[axis] = 0;
  std::vector<std::size_t> ids;
  std::vector<std::size_t> chunk;  // per-input contiguous run per outer index
  for (const auto& v : xs) {
    require_same_tape(xs.front(), v, "concat");
    const Shape& s = v.shape();
    bool ok = s.size() == out.size();
    for (std::size_t i = 0; ok && i < s.size(); ++i) ok = i == axis || s[i] == out[i];
    if (!ok) throw ShapeError("concat: " + shapes2(xs.front().shape(), s) + " differ off axis " + std::to_string(axis));
    out[axis] += s[axis];
    ids.push_back(v.id());
  }
  const AxisSplit sp = split_axis(out, axis, "concat");
  for (const auto& v : xs) chunk.push_back(v.shape()[axis] * sp.inner);
  const std::size_t row = sp.extent * sp.inner;
  Tensor<T> y(out);
  std::size_t col = 0;
  for (std::size_t j = 0; j < xs.size(); ++j) {
    const T* src = xs[j].value().ptr();
    for (std::size_t o = 0; o < sp.outer; ++o) {
      std::copy(src + o * chunk[j], src + (o + 1) * chunk[j], y.ptr() + o * row + col);
    }
    col += chunk[j];
  }
  return xs.front().tape()->record("concat", std::move(y), ids, [=](Tape<T>& t, const Tensor<T>& dy, const Tensor<T>&) {
    std::size_t c = 0;
    for (std::size_t j = 0; j < ids.size(); ++j) {
      if (t.requires_grad(ids[j])) {
        T* dx = t.grad_accum(ids[j]).ptr();
        for (std::size_t o = 0; o < sp.outer; ++o) {
          const T* g = dy.ptr() + o * row + c;
          for (std::size_t i = 0; i < chunk[j]; ++i) dx[o * chunk[j] + i] += g[i];
        }
      }
      c += chunk[j];
    }
  });
}

template <typename T>
Var<T> slice(const Var<T>& x, std::size_t axis, std::size_t start, std::size_t length) {
  const Shape& in = x.shape();
  const AxisSplit sp = split_axis(in, axis, "slice");
  if (length == 0 || start + length > sp.extent) {
    throw ShapeError("slice: [" + std::to_string(start) + ", " + std::to_string(start + length) +
                     ") out of range on axis " + std::to_string(axis) + " of " + shape_str(in));
  }
  Shape out = in;
  out[axis] = length;
  const std::size_t in_row = sp.extent * sp.inner, out_row = length * sp.inner, off = start * sp.inner;
  Tensor<T> y(out);
  const T* src = x.value().ptr();
  for (std::size_t o = 0; o < sp.outer; ++o) {
    std::copy(src + o * in_row + off, src + o * in_row + off + out_row, y.ptr() + o * out_row);
  }
  const auto ix = x.id();
  return x.tape()->record("slice", std::move(y), {ix}, [=](Tape<T>& t, const Tensor<T>& dy, const Tensor<T>&) {
    T* dx = t.grad_accum(ix).ptr();
    for (std::size_t o = 0; o < sp.outer; ++o) {
      for (std::size_t i = 0; i < out_row; ++i) dx[o * in_row + off + i] += dy[o * out_row + i];
    }
  });
}

template <typename T>
Var<T> sum(const Var<T>& x) {
  T s{0};
  for (T v : x.value().data()) s += v;
  const auto ix = x.id();
  return x.tape()->record("sum", Tensor<T>::scalar(s), {ix}, [ix](Tape<T>& t, const Tensor<T>& dy, const Tensor<T>&) {
    auto& dx = t.grad_accum(ix);
    for (auto& g : dx.data()) g += dy[0];
  });
}

template <typename T>
Var<T> mean(const Var<T>& x) {
  const T n = static_cast<T>(x.value().size());
  T s{0};
  for (T v : x.value().data()) s += v;
  const auto ix = x.id();
  return x.tape()->record("mean", Tensor<T>::scalar(s / n), {ix}, [ix, n](Tape<T>& t, const Tensor<T>& dy, const Tensor<T>&) {
    auto& dx = t.grad_accum(ix);
    for (auto& g : dx.data()) g += dy[0] / n;
  });
}


template <typename T>
Var<T> softmax(const Var<T>& x, std::size_t axis) {
  const AxisSplit sp = split_axis(x.shape(), axis, "softmax");
  Tensor<T> y(x.shape());
  const T* xv = x.value().ptr();
  for (std::size_t o = 0; o < sp.outer; ++o) {
    for (std::size_t i = 0; i < sp.inner; ++i) {
      const std::size_t base = o * sp.extent * sp.inner + i;
      T mx = -std::numeric_limits<T>::infinity();
      for (std::size_t d = 0; d < sp.extent; ++d) mx = std::max(mx, xv[base + d * sp.inner]);
      T z{0};
      for (std::size_t d = 0; d < sp.extent; ++d) {
        const T e = std::exp(xv[base + d * sp.inner] - mx);
        y[base + d * sp.inner] = e;
        z += e;
      }
      for (std::size_t d = 0; d < sp.extent; ++d) y[base + d * sp.inner] /= z;
    }
  }
  const auto ix = x.id();
  return x.tape()->record("softmax", std::move(y), {ix}, [ix, sp](Tape<T>& t, const Tensor<T>& dy, const Tensor<T>& y) {
    auto& dx = t.grad_accum(ix);
    // dx = y * (dy - <dy, y>)
    for (std::size_t o = 0; o < sp.outer; ++o) {
      for (std::size_t i = 0; i < sp.inner; ++i) {
        const std::size_t base = o * sp.extent * sp.inner + i;
        T dot{0};
        for (std::size_t d = 0; d < sp.extent; ++d) dot += dy[base + d * sp.inner] * y[base + d * sp.inner];
        for (std::size_t d = 0; d < sp.extent; ++d) {
          const std::size_t j = base + d * sp.inner;
          dx[j] += y[j] * (dy[j] - dot);
        }
      }
    }
  });
}

template <typename T>
Var<T> log_softmax(const Var<T>& x, std::size_t axis) {
  const AxisSplit sp = split_axis(x.shape(), axis, "log_softmax");
  Tensor<T> y(x.shape());
  const T* xv = x.value().ptr();
  for (std::size_t o = 0; o < sp.outer; ++o) {
    for (std::size_t i = 0; i < sp.inner; ++i) {
      const std::size_t base = o * sp.extent * sp.inner + i;
      T mx = -std::numeric_limits<T>::infinity();
      for (std::size_t d = 0; d < sp.extent; ++d) mx = std::max(mx, xv[base + d * sp.inner]);
      T z{0};
      for (std::size_t d = 0; d < sp.extent; ++d) z += std::exp(xv[base + d * sp.inner] - mx);
      const T lse = mx + std::log(z);
      for (std::size_t d = 0; d < sp.extent; ++d) y[base + d * sp.inner] = xv[base + d * sp.inner] - lse;
    }
  }
  const auto ix = x.id();
  return x.tape()->record("log_softmax", std::move(y), {ix},
                          [ix, sp](Tape<T>& t, const Tensor<T>& dy, const Tensor<T>& y) {
                            auto& dx = t.grad_accum(ix);
                            // dx = dy - softmax * sum(dy)
                            for (std::size_t o = 0; o < sp.outer; ++o) {
                              for (std::size_t i = 0; i < sp.inner; ++i) {
                                const std::size_t base = o * sp.extent * sp.inner + i;
                                T total{0};
                                for (std::size_t d = 0; d < sp.extent; ++d) total += dy[base + d * sp.inner];
                                for (std::size_t d = 0; d < sp.extent; ++d) {
                                  const std::size_t j = base + d * sp.inner;
                                  dx[j] += dy[j] - std::exp(y[j]) * total;
                                }
                              }
                            }
                          });
}

namespace {

// Shared backward for normalizations: given dxhat along a reduction of
// length n with stride, dx = rstd * (dxhat - mean(dxhat) - xhat * mean(dxhat * xhat)).
template <typename T>
void normalize_backward(const T* dxhat, const T* xhat, T rstd, std::size_t n, std::size_t stride, T* dx) {
  T m1{0}, m2{0};
  for (std::size_t j = 0; j < n; ++j) {
    m1 += dxhat[j * stride];
    m2 += dxhat[j * stride] * xhat[j * stride];
  }
  m1 /= static_cast<T>(n);
  m2 /= static_cast<T>(n);
  for (std::size_t j = 0; j < n; ++j) dx[j * stride] += rstd * (dxhat[j * stride] - m1 - xhat[j * stride] * m2);
}

}  // namespace

template <typename T>
Var<T> layer_norm(const Var<T>& x, const Var<T>& gain, const Var<T>& bias, double eps) {
  require_same_tape(x, gain, "layer_norm");
  require_same_tape(x, bias, "layer_norm");
  const Shape& s = x.shape();
  const std::size_t d = s.back();
  if (gain.value().size() != d || bias.value().size() != d) {
    throw ShapeError("layer_norm: gain/bias must have " + std::to_string(d) + " entries");
  }
  const std::size_t rows = x.value().size() / d;
  Tensor<T> xhat(s);
  std::vector<T> rstd(rows);
  Tensor<T> y(s);
  const T* xv = x.value().ptr();
  const T* g = gain.value().ptr();
  const T* b = bias.value().ptr();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* row = xv + r * d;
    T mu{0};
    for (std::size_t j = 0; j < d; ++j) mu += row[j];
    mu /= static_cast<T>(d);
    T var{0};
    for (std::size_t j = 0; j < d; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<T>(d);
    rstd[r] = T{1} / std::sqrt(var + static_cast<T>(eps));
    for (std::size_t j = 0; j < d; ++j) {
      const T h = (row[j] - mu) * rstd[r];
      xhat[r * d + j] = h;
      y[r * d + j] = h * g[j] + b[j];
    }
  }
  const auto ix = x.id(), ig = gain.id(), ib = bias.id();
  return x.tape()->record(
      "layer_norm", std::move(y), {ix, ig, ib},
      [=, xhat = std::move(xhat), rstd = std::move(rstd)](Tape<T>& t, const Tensor<T>& dy, const Tensor<T>&) {
        if (t.requires_grad(ig) || t.requires_grad(ib)) {
          std::vector<T> dg(d, T{0}), db(d, T{0});
          for (std::size_t r = 0; r < rows; ++r) {
            for (std::size_t j = 0; j < d; ++j) {
              dg[j] += dy[r * d + j] * xhat[r * d + j];
              db[j] += dy[r * d + j];
            }
          }
          if (t.requires_grad(ig)) accumulate<T>(t.grad_accum(ig), dg);
          if (t.requires_grad(ib)) accumulate<T>(t.grad_accum(ib), db);
        }
        if (t.requires_grad(ix)) {
          const T* gv = t.value(ig).ptr();
          T* dx = t.grad_accum(ix).ptr();
          std::vector<T> dxhat(d);
          for (std::size_t r = 0; r < rows; ++r) {
            for (std::size_t j = 0; j < d; ++j) dxhat[j] = dy[r * d + j] * gv[j];
            normalize_backward(dxhat.data(), xhat.ptr() + r * d, rstd[r], d, 1, dx + r * d);
          }
        }
      });
}

template <typename T>
Var<T> batch_norm_1d(const Var<T>& x, const Var<T>& gain, const Var<T>& bias, BatchNormState<T>& state,
                     bool training, double momentum, double eps) {
  require_same_tape(x, gain, "batch_norm_1d");
  require_same_tape(x, bias, "batch_norm_1d");
  const Shape& s = x.shape();
  if (s.size() != 2) throw ShapeError("batch_norm_1d: expected [B, d], got " + shape_str(s));
  const std::size_t B = s[0], d = s[1];
  if (gain.value().size() != d || bias.value().size() != d || state.running_mean.size() != d ||
      state.running_var.size() != d) {
    throw ShapeError("batch_norm_1d: parameters/statistics must have " + std::to_string(d) + " entries");
  }
  if (training && B < 2) {
    throw ShapeError("batch_norm_1d: training mode needs a batch of at least 2, got " + std::to_string(B));
  }
  const T* xv = x.value().ptr();
  const T* g = gain.value().ptr();
  const T* b = bias.value().ptr();
  std::vector<T> mu(d), rstd(d);
  if (training) {
    const T m = static_cast<T>(momentum);
    for (std::size_t j = 0; j < d; ++j) {
      T acc{0};
      for (std::size_t i = 0; i < B; ++i) acc += xv[i * d + j];
      mu[j] = acc / static_cast<T>(B);
      T var{0};
      for (std::size_t i = 0; i < B; ++i) var += (xv[i * d + j] - mu[j]) * (xv[i * d + j] - mu[j]);
      const T biased = var / static_cast<T>(B);
      rstd[j] = T{1} / std::sqrt(biased + static_cast<T>(eps));
      state.running_mean[j] = (T{1} - m) * state.running_mean[j] + m * mu[j];
      state.running_var[j] = (T{1} - m) * state.running_var[j] + m * var / static_cast<T>(B - 1);
    }
  } else {
    for (std::size_t j = 0; j < d; ++j) {
      mu[j] = state.running_mean[j];
      rstd[j] = T{1} / std::sqrt(state.running_var[j] + static_cast<T>(eps));
    }
  }
  Tensor<T> xhat(s), y(s);
  for (std::size_t i = 0; i < B; ++i) {
    for (std::size_t j = 0; j < d; ++j) {
      const T h = (xv[i * d + j] - mu[j]) * rstd[j];
      xhat[i * d + j] = h;
      y[i * d + j] = h * g[j] + b[j];
    }
  }
  const auto ix = x.id(), ig = gain.id(), ib = bias.id();
  return x.tape()->record(
      "batch_norm_1d", std::move(y), {ix, ig, ib},
      [=, xhat = std::move(xhat), rstd = std::move(rstd)](Tape<T>& t, const Tensor<T>& dy, const Tensor<T>&) {
        if (t.requires_grad(ig) || t.requires_grad(ib)) {
          std::vector<T> dg(d, T{0}), db(d, T{0});
          for (std::size_t i = 0; i < B; ++i) {
            for (std::size_t j = 0; j < d; ++j) {
              dg[j] += dy[i * d + j] * xhat[i * d + j];
              db[j] += dy[i * d + j];
            }
          }
          if (t.requires_grad(ig)) accumulate<T>(t.grad_accum(ig), dg);
          if (t.requires_grad(ib)) accumulate<T>(t.grad_accum(ib), db);
        }
        if (t.requires_grad(ix)) {
          const T* gv = t.value(ig).ptr();
          T* dx = t.grad_accum(ix).ptr();
          if (training) {
            std::vector<T> dxhat(B * d);
            for (std::size_t i = 0; i < B; ++i) {
              for (std::size_t j = 0; j < d; ++j) dxhat[i * d + j] = dy[i * d + j] * gv[j];
            }
            for (std::size_t j = 0; j < d; ++j) normalize_backward(dxhat.data() + j, xhat.ptr() + j, rstd[j], B, d, dx + j);
          } else {
            for (std::size_t i = 0; i < B; ++i) {
              for (std::size_t j = 0; j < d; ++j) dx[i * d + j] += dy[i * d + j] * gv[j] * rstd[j];
            }
          }
        }
      });
}

#define MMFER_INSTANTIATE_OPS(T)                                                                             \
  template Var<T> matmul(const Var<T>&, const Var<T>&);                                                      \
  template Var<T> bmm(const Var<T>&, const Var<T>&, bool, T);                                                \
  template Var<T> linear(const Var<T>&, const Var<T>&, const Var<T>&);                                       \
  template Var<T> add(const Var<T>&, const Var<T>&);                                                         \
  template Var<T> add_bcast(const Var<T>&, const Var<T>&);                                                   \
  template Var<T> mul(const Var<T>&, const Var<T>&);                                                         \
  template Var<T> scale(const Var<T>&, T);                                                                   \
  template Var<T> relu(const Var<T>&);                                                                       \
  template Var<T> dropout(const Var<T>&, double, bool, const DropoutKey&);                                   \
  template Var<T> reshape(const Var<T>&, Shape);                                                             \
  template Var<T> flatten(const Var<T>&);                                                                    \
  template Var<T> permute(const Var<T>&, const std::vector<std::size_t>&);                                   \
  template Var<T> transpose(const Var<T>&);                                                                  \
  template Var<T> concat(const std::vector<Var<T>>&, std::size_t);                                           \
  template Var<T> slice(const Var<T>&, std::size_t, std::size_t, std::size_t);                               \
  template Var<T> sum(const Var<T>&);                                                                        \
  template Var<T> mean(const Var<T>&);                                                                       \
  template Var<T> softmax(const Var<T>&, std::size_t);                                                       \
  template Var<T> log_softmax(const Var<T>&, std::size_t);                                                   \
  template Var<T> layer_norm(const Var<T>&, const Var<T>&, const Var<T>&, double);                           \
  template Var<T> batch_norm_1d(const Var<T>&, const Var<T>&, const Var<T>&, BatchNormState<T>&, bool, double, \
                                double);

MMFER_INSTANTIATE_OPS(float)
MMFER_INSTANTIATE_OPS(double)

#undef MMFER_INSTANTIATE_OPS

}  // namespace mmfer::ops
