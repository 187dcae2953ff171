#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include "minidrive/tape.hpp"
#include "minidrive/tensor.hpp"

namespace minidrive::ops {

// Every op returns a fresh buffer (no aliasing) and, when a tape is given
// and any input requires a gradient, records one backward node that
// accumulates additively into the tape's gradient buffers.

namespace detail {

template <class S>
inline void require_same_shape(const Tensor<S>& a, const Tensor<S>& b, const char* op) {
  if (a.shape != b.shape)
    throw DimError(std::string(op) + ": shape mismatch " + shape_str(a.shape) + " vs " +
                   shape_str(b.shape));
}

template <class S>
inline bool want_grad(Tape<S>* tape, std::initializer_list<const TensorPtr<S>*> ins) {
  if (!tape) return false;
  for (auto* p : ins)
    if ((*p)->requires_grad) return true;
  return false;
}

}  // namespace detail

template <class S>
TensorPtr<S> add(const TensorPtr<S>& a, const TensorPtr<S>& b, Tape<S>* tape = nullptr) {
  detail::require_same_shape(*a, *b, "add");
  auto out = make_tensor<S>(a->shape);
  for (size_t i = 0; i < out->data.size(); ++i) out->data[i] = a->data[i] + b->data[i];
  check_finite(*out, "add");
  if (detail::want_grad(tape, {&a, &b})) {
    out->requires_grad = true;
    tape->record("add", [a, b, out](Tape<S>& t) {
      const auto* g = t.find_grad(out.get());
      if (!g) return;
      if (a->requires_grad) {
        auto& ga = t.grad_buf(a);
        for (size_t i = 0; i < ga.size(); ++i) ga[i] += (*g)[i];
      }
      if (b->requires_grad) {
        auto& gb = t.grad_buf(b);
        for (size_t i = 0; i < gb.size(); ++i) gb[i] += (*g)[i];
      }
    });
  }
  return out;
}

template <class S>
TensorPtr<S> mul(const TensorPtr<S>& a, const TensorPtr<S>& b, Tape<S>* tape = nullptr) {
  detail::require_same_shape(*a, *b, "mul");
  auto out = make_tensor<S>(a->shape);
  for (size_t i = 0; i < out->data.size(); ++i) out->data[i] = a->data[i] * b->data[i];
  check_finite(*out, "mul");
  if (detail::want_grad(tape, {&a, &b})) {
    out->requires_grad = true;
    tape->record("mul", [a, b, out](Tape<S>& t) {
      const auto* g = t.find_grad(out.get());
      if (!g) return;
      if (a->requires_grad) {
        auto& ga = t.grad_buf(a);
        for (size_t i = 0; i < ga.size(); ++i) ga[i] += (*g)[i] * b->data[i];
      }
      if (b->requires_grad) {
        auto& gb = t.grad_buf(b);
        for (size_t i = 0; i < gb.size(); ++i) gb[i] += (*g)[i] * a->data[i];
      }
    });
  }
  return out;
}

template <class S>
TensorPtr<S> scale(const TensorPtr<S>& x, double c, Tape<S>* tape = nullptr) {
  auto out = make_tensor<S>(x->shape);
  const S cs = static_cast<S>(c);
  for (size_t i = 0; i < out->data.size(); ++i) out->data[i] = x->data[i] * cs;
  check_finite(*out, "scale");
  if (detail::want_grad(tape, {&x})) {
    out->requires_grad = true;
    tape->record("scale", [x, out, cs](Tape<S>& t) {
      const auto* g = t.find_grad(out.get());
      if (!g) return;
      auto& gx = t.grad_buf(x);
      for (size_t i = 0; i < gx.size(); ++i) gx[i] += (*g)[i] * cs;
    });
  }
  return out;
}

/// Multiply by a one-element tensor; gradient flows to both operands.
template <class S>
TensorPtr<S> scale_by(const TensorPtr<S>& x, const TensorPtr<S>& s, Tape<S>* tape = nullptr) {
  if (s->numel() != 1) throw DimError("scale_by: scalar operand must have one element");
  auto out = make_tensor<S>(x->shape);
  const S sv = s->data[0];
  for (size_t i = 0; i < out->data.size(); ++i) out->data[i] = x->data[i] * sv;
  check_finite(*out, "scale_by");
  if (detail::want_grad(tape, {&x, &s})) {
    out->requires_grad = true;
    tape->record("scale_by", [x, s, out, sv](Tape<S>& t) {
      const auto* g = t.find_grad(out.get());
      if (!g) return;
      if (x->requires_grad) {
        auto& gx = t.grad_buf(x);
        for (size_t i = 0; i < gx.size(); ++i) gx[i] += (*g)[i] * sv;
      }
      if (s->requires_grad) {
        S acc = 0;
        for (size_t i = 0; i < x->data.size(); ++i) acc += (*g)[i] * x->data[i];
        t.grad_buf(s)[0] += acc;
      }
    });
  }
  return out;
}

template <class S>
TensorPtr<S> relu(const TensorPtr<S>& x, Tape<S>* tape = nullptr) {
  auto out = make_tensor<S>(x->shape);
  for (size_t i = 0; i < out->data.size(); ++i) out->data[i] = x->data[i] > S(0) ? x->data[i] : S(0);
  if (detail::want_grad(tape, {&x})) {
    out->requires_grad = true;
    tape->record("relu", [x, out](Tape<S>& t) {
      const auto* g = t.find_grad(out.get());
      if (!g) return;
      auto& gx = t.grad_buf(x);
      for (size_t i = 0; i < gx.size(); ++i)
        if (x->data[i] > S(0)) gx[i] += (*g)[i];
    });
  }
  return out;
}

template <class S>
TensorPtr<S> matmul(const TensorPtr<S>& a, const TensorPtr<S>& b, Tape<S>* tape = nullptr) {
  if (a->rank() != 2 || b->rank() != 2) throw DimError("matmul: operands must be rank 2");
  const int m = a->extent(0), k = a->extent(1), n = b->extent(1);
  if (b->extent(0) != k)
    throw DimError("matmul: inner extents differ, " + shape_str(a->shape) + " vs " +
                   shape_str(b->shape));
  auto out = make_tensor<S>({m, n});
  const S* A = a->data.data();
  const S* B = b->data.data();
  S* O = out->data.data();
  for (int i = 0; i < m; ++i) {
    S* orow = O + static_cast<size_t>(i) * n;
    for (int kk = 0; kk < k; ++kk) {
      const S av = A[static_cast<size_t>(i) * k + kk];
      const S* brow = B + static_cast<size_t>(kk) * n;
      for (int j = 0; j < n; ++j) orow[j] += av * brow[j];
    }
  }
  check_finite(*out, "matmul");
  if (detail::want_grad(tape, {&a, &b})) {
    out->requires_grad = true;
    tape->record("matmul", [a, b, out, m, k, n](Tape<S>& t) {
      const auto* gp = t.find_grad(out.get());
      if (!gp) return;
      const S* G = gp->data();
      if (a->requires_grad) {  // dA = G B^T
        auto& ga = t.grad_buf(a);
        for (int i = 0; i < m; ++i)
          for (int kk = 0; kk < k; ++kk) {
            const S* grow = G + static_cast<size_t>(i) * n;
            const S* brow = b->data.data() + static_cast<size_t>(kk) * n;
            S acc = 0;
            for (int j = 0; j < n; ++j) acc += grow[j] * brow[j];
            ga[static_cast<size_t>(i) * k + kk] += acc;
          }
      }
      if (b->requires_grad) {  // dB = A^T G
        auto& gb = t.grad_buf(b);
        for (int i = 0; i < m; ++i)
          for (int kk = 0; kk < k; ++kk) {
            const S av = a->data[static_cast<size_t>(i) * k + kk];
            const S* grow = G + static_cast<size_t>(i) * n;
            S* gbrow = gb.data() + static_cast<size_t>(kk) * n;
            for (int j = 0; j < n; ++j) gbrow[j] += av * grow[j];
          }
      }
    });
  }
  return out;
}

template <class S>
TensorPtr<S> transpose(const TensorPtr<S>& x, Tape<S>* tape = nullptr) {
  if (x->rank() != 2) throw DimError("transpose: operand must be rank 2");
  const int m = x->extent(0), n = x->extent(1);
  auto out = make_tensor<S>({n, m});
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j)
      out->data[static_cast<size_t>(j) * m + i] = x->data[static_cast<size_t>(i) * n + j];
  if (detail::want_grad(tape, {&x})) {
    out->requires_grad = true;
    tape->record("transpose", [x, out, m, n](Tape<S>& t) {
      const auto* g = t.find_grad(out.get());
      if (!g) return;
      auto& gx = t.grad_buf(x);
      for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j)
          gx[static_cast<size_t>(i) * n + j] += (*g)[static_cast<size_t>(j) * m + i];
    });
  }
  return out;
}

/// Softmax over the last axis, computed with max subtraction.
template <class S>
TensorPtr<S> softmax(const TensorPtr<S>& x, Tape<S>* tape = nullptr) {
  if (x->rank() < 1) throw DimError("softmax: operand must have rank >= 1");
  const int n = x->shape.back();
  const int64_t rows = x->numel() / n;
  auto out = make_tensor<S>(x->shape);
  for (int64_t r = 0; r < rows; ++r) {
    const S* xr = x->data.data() + r * n;
    S* yr = out->data.data() + r * n;
    S mx = xr[0];
    for (int j = 1; j < n; ++j) mx = std::max(mx, xr[j]);
    S sum = 0;
    for (int j = 0; j < n; ++j) {
      yr[j] = std::exp(xr[j] - mx);
      sum += yr[j];
    }
    const S inv = S(1) / sum;
    for (int j = 0; j < n; ++j) yr[j] *= inv;
  }
  check_finite(*out, "softmax");
  if (detail::want_grad(tape, {&x})) {
    out->requires_grad = true;
    tape->record("softmax", [x, out, n, rows](Tape<S>& t) {
      const auto* g = t.find_grad(out.get());
      if (!g) return;
      auto& gx = t.grad_buf(x);
      for (int64_t r = 0; r < rows; ++r) {
        const S* yr = out->data.data() + r * n;
        const S* gr = g->data() + r * n;
        S dot = 0;
        for (int j = 0; j < n; ++j) dot += yr[j] * gr[j];
        S* gxr = gx.data() + r * n;
        for (int j = 0; j < n; ++j) gxr[j] += yr[j] * (gr[j] - dot);
      }
    });
  }
  return out;
}

template <class S>
TensorPtr<S> reshape(const TensorPtr<S>& x, Shape shape, Tape<S>* tape = nullptr) {
  if (shape_numel(shape) != x->numel())
    throw DimError("reshape: element count mismatch, " + shape_str(x->shape) + " -> " +
                   shape_str(shape));
  auto out = make_tensor<S>(std::move(shape), x->data);
  if (detail::want_grad(tape, {&x})) {
    out->requires_grad = true;
    tape->record("reshape", [x, out](Tape<S>& t) {
      const auto* g = t.find_grad(out.get());
      if (!g) return;
      auto& gx = t.grad_buf(x);
      for (size_t i = 0; i < gx.size(); ++i) gx[i] += (*g)[i];
    });
  }
  return out;
}

template <class S>
TensorPtr<S> flatten2d(const TensorPtr<S>& x, Tape<S>* tape = nullptr) {
  if (x->rank() != 3) throw DimError("flatten2d: operand must be rank 3");
  return reshape(x, {x->extent(0), x->extent(1) * x->extent(2)}, tape);
}

/// Concatenate along `axis` (0 or, for matrices, 1). Operand order is
/// preserved.
template <class S>
TensorPtr<S> concat(const std::vector<TensorPtr<S>>& parts, int axis, Tape<S>* tape = nullptr) {
  if (parts.empty()) throw DimError("concat: no operands");
  const int rank = parts[0]->rank();
  if (axis < 0 || axis >= rank) throw DimError("concat: axis out of range");
  for (const auto& p : parts) {
    if (p->rank() != rank) throw DimError("concat: rank mismatch");
    for (int d = 0; d < rank; ++d)
      if (d != axis && p->extent(d) != parts[0]->extent(d))
        throw DimError("concat: off-axis extent mismatch");
  }
  Shape oshape = parts[0]->shape;
  oshape[axis] = 0;
  for (const auto& p : parts) oshape[axis] += p->extent(axis);

  // Row-major: treat as [outer, axis_extent * inner] blocks.
  int64_t outer = 1, inner = 1;
  for (int d = 0; d < axis; ++d) outer *= oshape[d];
  for (int d = axis + 1; d < rank; ++d) inner *= oshape[d];

  auto out = make_tensor<S>(oshape);
  int64_t col_off = 0;
  const int64_t out_row = static_cast<int64_t>(oshape[axis]) * inner;
  for (const auto& p : parts) {
    const int64_t prow = static_cast<int64_t>(p->extent(axis)) * inner;
    for (int64_t o = 0; o < outer; ++o)
      std::copy_n(p->data.data() + o * prow, prow, out->data.data() + o * out_row + col_off);
    col_off += prow;
  }
  bool any = false;
  for (const auto& p : parts) any = any || p->requires_grad;
  if (tape && any) {
    out->requires_grad = true;
    tape->record("concat", [parts, out, outer, out_row](Tape<S>& t) {
      const auto* g = t.find_grad(out.get());
      if (!g) return;
      int64_t off = 0;
      for (const auto& p : parts) {
        const int64_t blk = p->numel() / outer;
        if (p->requires_grad) {
          auto& gp = t.grad_buf(p);
          for (int64_t o = 0; o < outer; ++o)
            for (int64_t i = 0; i < blk; ++i) gp[o * blk + i] += (*g)[o * out_row + off + i];
        }
        off += blk;
      }
    });
  }
  return out;
}

/// Slice `len` entries starting at `start` along the last axis.
template <class S>
TensorPtr<S> slice_last(const TensorPtr<S>& x, int start, int len, Tape<S>* tape = nullptr) {
  const int n = x->shape.back();
  if (start < 0 || len <= 0 || start + len > n) throw DimError("slice_last: range out of bounds");
  const int64_t rows = x->numel() / n;
  Shape oshape = x->shape;
  oshape.back() = len;
  auto out = make_tensor<S>(oshape);
  for (int64_t r = 0; r < rows; ++r)
    std::copy_n(x->data.data() + r * n + start, len, out->data.data() + r * len);
  if (detail::want_grad(tape, {&x})) {
    out->requires_grad = true;
    tape->record("slice_last", [x, out, start, len, n, rows](Tape<S>& t) {
      const auto* g = t.find_grad(out.get());
      if (!g) return;
      auto& gx = t.grad_buf(x);
      for (int64_t r = 0; r < rows; ++r)
        for (int j = 0; j < len; ++j) gx[r * n + start + j] += (*g)[r * len + j];
    });
  }
  return out;
}

template <class S>
TensorPtr<S> sum(const TensorPtr<S>& x, Tape<S>* tape = nullptr) {
  auto out = make_tensor<S>({1});
  S acc = 0;
  for (S v : x->data) acc += v;
  out->data[0] = acc;
  check_finite(*out, "sum");
  if (detail::want_grad(tape, {&x})) {
    out->requires_grad = true;
    tape->record("sum", [x, out](Tape<S>& t) {
      const auto* g = t.find_grad(out.get());
      if (!g) return;
      auto& gx = t.grad_buf(x);
      for (size_t i = 0; i < gx.size(); ++i) gx[i] += (*g)[0];
    });
  }
  return out;
}

/// Non-overlapping max pool; gradient goes to the first (lowest flat
/// index) maximum of each window.
template <class S>
TensorPtr<S> maxpool2d(const TensorPtr<S>& x, int window, Tape<S>* tape = nullptr) {
  if (x->rank() != 3) throw DimError("maxpool2d: operand must be [c,h,w]");
  const int c = x->extent(0), h = x->extent(1), w = x->extent(2);
  if (window < 1 || h % window != 0 || w % window != 0)
    throw DimError("maxpool2d: extents not divisible by window");
  const int oh = h / window, ow = w / window;
  auto out = make_tensor<S>({c, oh, ow});
  auto argmax = std::make_shared<std::vector<int64_t>>(out->data.size());
  for (int ch = 0; ch < c; ++ch)
    for (int i = 0; i < oh; ++i)
      for (int j = 0; j < ow; ++j) {
        int64_t best = -1;
        S bestv = 0;
        for (int di = 0; di < window; ++di)
          for (int dj = 0; dj < window; ++dj) {
            const int64_t idx =
                (static_cast<int64_t>(ch) * h + i * window + di) * w + j * window + dj;
            if (best < 0 || x->data[idx] > bestv) {
              best = idx;
              bestv = x->data[idx];
            }
          }
        const int64_t oidx = (static_cast<int64_t>(ch) * oh + i) * ow + j;
        out->data[oidx] = bestv;
        (*argmax)[oidx] = best;
      }
  if (detail::want_grad(tape, {&x})) {
    out->requires_grad = true;
    tape->record("maxpool2d", [x, out, argmax](Tape<S>& t) {
      const auto* g = t.find_grad(out.get());
      if (!g) return;
      auto& gx = t.grad_buf(x);
      for (size_t i = 0; i < g->size(); ++i) gx[(*argmax)[i]] += (*g)[i];
    });
  }
  return out;
}

/// Cross-correlation of [cin,h,w] with kernel [cout,cin,kh,kw].
template <class S>
TensorPtr<S> conv2d(const TensorPtr<S>& x, const TensorPtr<S>& k, int stride, int padding,
                    Tape<S>* tape = nullptr) {
  if (x->rank() != 3 || k->rank() != 4) throw DimError("conv2d: expected [cin,h,w] and [cout,cin,kh,kw]");
  const int cin = x->extent(0), h = x->extent(1), w = x->extent(2);
  const int cout = k->extent(0), kh = k->extent(2), kw = k->extent(3);
  if (k->extent(1) != cin) throw DimError("conv2d: kernel cin mismatch");
  if (stride < 1) throw DimError("conv2d: stride must be >= 1");
  if (padding < 0) throw DimError("conv2d: padding must be >= 0");
  if (kh > h + 2 * padding || kw > w + 2 * padding)
    throw DimError("conv2d: kernel larger than padded input");
  const int oh = (h + 2 * padding - kh) / stride + 1;
  const int ow = (w + 2 * padding - kw) / stride + 1;
  auto out = make_tensor<S>({cout, oh, ow});

  auto for_each_tap = [=](auto&& body) {
    for (int co = 0; co < cout; ++co)
      for (int ci = 0; ci < cin; ++ci)
        for (int ki = 0; ki < kh; ++ki)
          for (int kj = 0; kj < kw; ++kj) {
            const int64_t kidx = ((static_cast<int64_t>(co) * cin + ci) * kh + ki) * kw + kj;
            for (int i = 0; i < oh; ++i) {
              const int ih = i * stride + ki - padding;
              if (ih < 0 || ih >= h) continue;
              if (w - 1 + padding - kj < 0) continue;
              // valid ow range for this tap
              int j0 = 0;
              if (padding > kj) j0 = (padding - kj + stride - 1) / stride;
              int j1 = (w - 1 + padding - kj) / stride;
              if (j1 > ow - 1) j1 = ow - 1;
              for (int j = j0; j <= j1; ++j) {
                const int iw = j * stride + kj - padding;
                body(kidx, (static_cast<int64_t>(ci) * h + ih) * w + iw,
                     (static_cast<int64_t>(co) * oh + i) * ow + j);
              }
            }
          }
  };

  for_each_tap([&](int64_t kidx, int64_t xidx, int64_t oidx) {
    out->data[oidx] += k->data[kidx] * x->data[xidx];
  });
  check_finite(*out, "conv2d");

  if (detail::want_grad(tape, {&x, &k})) {
    out->requires_grad = true;
    tape->record("conv2d", [x, k, out, for_each_tap](Tape<S>& t) {
      const auto* g = t.find_grad(out.get());
      if (!g) return;
      std::vector<S>* gx = x->requires_grad ? &t.grad_buf(x) : nullptr;
      std::vector<S>* gk = k->requires_grad ? &t.grad_buf(k) : nullptr;
      for_each_tap([&](int64_t kidx, int64_t xidx, int64_t oidx) {
        const S go = (*g)[oidx];
        if (gx) (*gx)[xidx] += go * k->data[kidx];
        if (gk) (*gk)[kidx] += go * x->data[xidx];
      });
    });
  }
  return out;
}

/// Transposed convolution (zero padding): the adjoint of conv2d at the
/// same stride. Kernel layout [cin,cout,kh,kw].
template <class S>
TensorPtr<S> conv_transpose2d(const TensorPtr<S>& x, const TensorPtr<S>& k, int stride,
                              Tape<S>* tape = nullptr) {
  if (x->rank() != 3 || k->rank() != 4)
    throw DimError("conv_transpose2d: expected [cin,h,w] and [cin,cout,kh,kw]");
  const int cin = x->extent(0), h = x->extent(1), w = x->extent(2);
  const int cout = k->extent(1), kh = k->extent(2), kw = k->extent(3);
  if (k->extent(0) != cin) throw DimError("conv_transpose2d: kernel cin mismatch");
  if (stride < 1) throw DimError("conv_transpose2d: stride must be >= 1");
  const int oh = (h - 1) * stride + kh;
  const int ow = (w - 1) * stride + kw;
  auto out = make_tensor<S>({cout, oh, ow});

  auto for_each_tap = [=](auto&& body) {
    for (int ci = 0; ci < cin; ++ci)
      for (int co = 0; co < cout; ++co)
        for (int ki = 0; ki < kh; ++ki)
          for (int kj = 0; kj < kw; ++kj) {
            const int64_t kidx = ((static_cast<int64_t>(ci) * cout + co) * kh + ki) * kw + kj;
            for (int i = 0; i < h; ++i)
              for (int j = 0; j < w; ++j)
                body(kidx, (static_cast<int64_t>(ci) * h + i) * w + j,
                     (static_cast<int64_t>(co) * oh + i * stride + ki) * ow + j * stride + kj);
          }
  };

  for_each_tap([&](int64_t kidx, int64_t xidx, int64_t oidx) {
    out->data[oidx] += k->data[kidx] * x->data[xidx];
  });
  check_finite(*out, "conv_transpose2d");

  if (detail::want_grad(tape, {&x, &k})) {
    out->requires_grad = true;
    tape->record("conv_transpose2d", [x, k, out, for_each_tap](Tape<S>& t) {
      const auto* g = t.find_grad(out.get());
      if (!g) return;
      std::vector<S>* gx = x->requires_grad ? &t.grad_buf(x) : nullptr;
      std::vector<S>* gk = k->requires_grad ? &t.grad_buf(k) : nullptr;
      for_each_tap([&](int64_t kidx, int64_t xidx, int64_t oidx) {
        const S go = (*g)[oidx];
        if (gx) (*gx)[xidx] += go * k->data[kidx];
        if (gk) (*gk)[kidx] += go * x->data[xidx];
      });
    });
  }
  return out;
}

/// Per-channel convolution (stride 1) with kernel [c,kh,kw].
template <class S>
TensorPtr<S> depthwise_conv2d(const TensorPtr<S>& x, const TensorPtr<S>& k, int padding,
                              Tape<S>* tape = nullptr) {
  if (x->rank() != 3 || k->rank() != 3)
    throw DimError("depthwise_conv2d: expected [c,h,w] and [c,kh,kw]");
  const int c = x->extent(0), h = x->extent(1), w = x->extent(2);
  const int kh = k->extent(1), kw = k->extent(2);
  if (k->extent(0) != c) throw DimError("depthwise_conv2d: channel mismatch");
  if (kh > h + 2 * padding || kw > w + 2 * padding)
    throw DimError("depthwise_conv2d: kernel larger than padded input");
  const int oh = h + 2 * padding - kh + 1;
  const int ow = w + 2 * padding - kw + 1;
  auto out = make_tensor<S>({c, oh, ow});

  auto for_each_tap = [=](auto&& body) {
    for (int ch = 0; ch < c; ++ch)
      for (int ki = 0; ki < kh; ++ki)
        for (int kj = 0; kj < kw; ++kj) {
          const int64_t kidx = (static_cast<int64_t>(ch) * kh + ki) * kw + kj;
          for (int i = 0; i < oh; ++i) {
            const int ih = i + ki - padding;
            if (ih < 0 || ih >= h) continue;
            const int j0 = std::max(0, padding - kj);
            const int j1 = std::min(ow - 1, w - 1 + padding - kj);
            for (int j = j0; j <= j1; ++j)
              body(kidx, (static_cast<int64_t>(ch) * h + ih) * w + j + kj - padding,
                   (static_cast<int64_t>(ch) * oh + i) * ow + j);
          }
        }
  };

  for_each_tap([&](int64_t kidx, int64_t xidx, int64_t oidx) {
    out->data[oidx] += k->data[kidx] * x->data[xidx];
  });
  check_finite(*out, "depthwise_conv2d");

  if (detail::want_grad(tape, {&x, &k})) {
    out->requires_grad = true;
    tape->record("depthwise_conv2d", [x, k, out, for_each_tap](Tape<S>& t) {
      const auto* g = t.find_grad(out.get());
      if (!g) return;
      std::vector<S>* gx = x->requires_grad ? &t.grad_buf(x) : nullptr;
      std::vector<S>* gk = k->requires_grad ? &t.grad_buf(k) : nullptr;
      for_each_tap([&](int64_t kidx, int64_t xidx, int64_t oidx) {
        const S go = (*g)[oidx];
        if (gx) (*gx)[xidx] += go * k->data[kidx];
        if (gk) (*gk)[kidx] += go * x->data[xidx];
      });
    });
  }
  return out;
}

/// x[c,h,w] + b[c], broadcast over the spatial plane.
template <class S>
TensorPtr<S> bias_add_channels(const TensorPtr<S>& x, const TensorPtr<S>& b,
                               Tape<S>* tape = nullptr) {
  if (x->rank() != 3 || b->rank() != 1 || b->extent(0) != x->extent(0))
    throw DimError("bias_add_channels: expected [c,h,w] and [c]");
  const int c = x->extent(0);
  const int64_t plane = x->numel() / c;
  auto out = make_tensor<S>(x->shape);
  for (int ch = 0; ch < c; ++ch) {
    const S bv = b->data[ch];
    for (int64_t i = 0; i < plane; ++i) out->data[ch * plane + i] = x->data[ch * plane + i] + bv;
  }
  check_finite(*out, "bias_add_channels");
  if (detail::want_grad(tape, {&x, &b})) {
    out->requires_grad = true;
    tape->record("bias_add_channels", [x, b, out, c, plane](Tape<S>& t) {
      const auto* g = t.find_grad(out.get());
      if (!g) return;
      if (x->requires_grad) {
        auto& gx = t.grad_buf(x);
        for (size_t i = 0; i < gx.size(); ++i) gx[i] += (*g)[i];
      }
      if (b->requires_grad) {
        auto& gb = t.grad_buf(b);
        for (int ch = 0; ch < c; ++ch) {
          S acc = 0;
          for (int64_t i = 0; i < plane; ++i) acc += (*g)[ch * plane + i];
          gb[ch] += acc;
        }
      }
    });
  }
  return out;
}

/// x[m,n] + b[n], broadcast over rows.
template <class S>
TensorPtr<S> bias_add_rows(const TensorPtr<S>& x, const TensorPtr<S>& b, Tape<S>* tape = nullptr) {
  if (x->rank() != 2 || b->rank() != 1 || b->extent(0) != x->extent(1))
    throw DimError("bias_add_rows: expected [m,n] and [n]");
  const int m = x->extent(0), n = x->extent(1);
  auto out = make_tensor<S>(x->shape);
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j)
      out->data[static_cast<size_t>(i) * n + j] = x->data[static_cast<size_t>(i) * n + j] + b->data[j];
  check_finite(*out, "bias_add_rows");
  if (detail::want_grad(tape, {&x, &b})) {
    out->requires_grad = true;
    tape->record("bias_add_rows", [x, b, out, m, n](Tape<S>& t) {
      const auto* g = t.find_grad(out.get());
      if (!g) return;
      if (x->requires_grad) {
        auto& gx = t.grad_buf(x);
        for (size_t i = 0; i < gx.size(); ++i) gx[i] += (*g)[i];
      }
      if (b->requires_grad) {
        auto& gb = t.grad_buf(b);
        for (int i = 0; i < m; ++i)
          for (int j = 0; j < n; ++j) gb[j] += (*g)[static_cast<size_t>(i) * n + j];
      }
    });
  }
  return out;
}

/// Per-row layer norm over the last axis with affine parameters.
template <class S>
TensorPtr<S> layer_norm(const TensorPtr<S>& x, const TensorPtr<S>& gamma, const TensorPtr<S>& beta,
                        double eps = 1e-5, Tape<S>* tape = nullptr) {
  const int n = x->shape.back();
  if (gamma->shape != Shape{n} || beta->shape != Shape{n})
    throw DimError("layer_norm: affine params must be [n]");
  const int64_t rows = x->numel() / n;
  auto out = make_tensor<S>(x->shape);
  auto norm = std::make_shared<std::vector<S>>(x->data.size());  // pre-affine rows
  auto inv_std = std::make_shared<std::vector<S>>(rows);
  for (int64_t r = 0; r < rows; ++r) {
    const S* xr = x->data.data() + r * n;
    S mu = 0;
    for (int j = 0; j < n; ++j) mu += xr[j];
    mu /= static_cast<S>(n);
    S var = 0;
    for (int j = 0; j < n; ++j) var += (xr[j] - mu) * (xr[j] - mu);
    var /= static_cast<S>(n);
    const S inv = S(1) / std::sqrt(var + static_cast<S>(eps));
    (*inv_std)[r] = inv;
    S* nr = norm->data() + r * n;
    S* yr = out->data.data() + r * n;
    for (int j = 0; j < n; ++j) {
      nr[j] = (xr[j] - mu) * inv;
      yr[j] = gamma->data[j] * nr[j] + beta->data[j];
    }
  }
  check_finite(*out, "layer_norm");
  if (detail::want_grad(tape, {&x, &gamma, &beta})) {
    out->requires_grad = true;
    tape->record("layer_norm", [x, gamma, beta, out, norm, inv_std, n, rows](Tape<S>& t) {
      const auto* g = t.find_grad(out.get());
      if (!g) return;
      std::vector<S>* gx = x->requires_grad ? &t.grad_buf(x) : nullptr;
      std::vector<S>* gg = gamma->requires_grad ? &t.grad_buf(gamma) : nullptr;
      std::vector<S>* gb = beta->requires_grad ? &t.grad_buf(beta) : nullptr;
      for (int64_t r = 0; r < rows; ++r) {
        const S* gr = g->data() + r * n;
        const S* nr = norm->data() + r * n;
        if (gg)
          for (int j = 0; j < n; ++j) (*gg)[j] += gr[j] * nr[j];
        if (gb)
          for (int j = 0; j < n; ++j) (*gb)[j] += gr[j];
        if (gx) {
          S mean_gy = 0, mean_gyn = 0;
          for (int j = 0; j < n; ++j) {
            const S gy = gr[j] * gamma->data[j];
            mean_gy += gy;
            mean_gyn += gy * nr[j];
          }
          mean_gy /= static_cast<S>(n);
          mean_gyn /= static_cast<S>(n);
          S* gxr = gx->data() + r * n;
          const S inv = (*inv_std)[r];
          for (int j = 0; j < n; ++j) {
            const S gy = gr[j] * gamma->data[j];
            gxr[j] += inv * (gy - mean_gy - nr[j] * mean_gyn);
          }
        }
      }
    });
  }
  return out;
}

/// Row gather: out[t,:] = table[ids[t],:]. The backward pass scatters
/// additively; rows gathered for `pad_id` receive no gradient.
template <class S>
TensorPtr<S> embedding(const TensorPtr<S>& table, const std::vector<int>& ids, int pad_id = -1,
                       Tape<S>* tape = nullptr) {
  if (table->rank() != 2) throw DimError("embedding: table must be [vocab,dim]");
  const int vocab = table->extent(0), dim = table->extent(1);
  if (ids.empty()) throw DimError("embedding: empty id sequence");
  for (int id : ids)
    if (id < 0 || id >= vocab)
      throw DimError("embedding: id " + std::to_string(id) + " out of range [0," +
                     std::to_string(vocab) + ")");
  auto out = make_tensor<S>({static_cast<int>(ids.size()), dim});
  for (size_t t = 0; t < ids.size(); ++t)
    std::copy_n(table->data.data() + static_cast<int64_t>(ids[t]) * dim, dim,
                out->data.data() + t * dim);
  if (detail::want_grad(tape, {&table})) {
    out->requires_grad = true;
    tape->record("embedding", [table, out, ids, pad_id, dim](Tape<S>& t) {
      const auto* g = t.find_grad(out.get());
      if (!g) return;
      auto& gt = t.grad_buf(table);
      for (size_t i = 0; i < ids.size(); ++i) {
        if (ids[i] == pad_id) continue;
        S* row = gt.data() + static_cast<int64_t>(ids[i]) * dim;
        const S* gr = g->data() + i * dim;
        for (int j = 0; j < dim; ++j) row[j] += gr[j];
      }
    });
  }
  return out;
}

/// Mean over non-pad positions of -log softmax(logits)[target].
template <class S>
TensorPtr<S> cross_entropy(const TensorPtr<S>& logits, const std::vector<int>& targets, int pad_id,
                           Tape<S>* tape = nullptr) {
  if (logits->rank() != 2) throw DimError("cross_entropy: logits must be [steps,vocab]");
  const int steps = logits->extent(0), vocab = logits->extent(1);
  if (static_cast<int>(targets.size()) != steps)
    throw DimError("cross_entropy: target length must equal step count");
  int live = 0;
  for (int y : targets) {
    if (y == pad_id) continue;
    if (y < 0 || y >= vocab) throw DimError("cross_entropy: target id out of range");
    ++live;
  }
  if (live == 0) throw ValidationError("cross_entropy: no non-pad targets");

  auto out = make_tensor<S>({1});
  auto probs = std::make_shared<std::vector<S>>(logits->data.size());
  double loss = 0;
  for (int t = 0; t < steps; ++t) {
    const S* lr = logits->data.data() + static_cast<int64_t>(t) * vocab;
    S* pr = probs->data() + static_cast<int64_t>(t) * vocab;
    S mx = lr[0];
    for (int j = 1; j < vocab; ++j) mx = std::max(mx, lr[j]);
    S sum = 0;
    for (int j = 0; j < vocab; ++j) {
      pr[j] = std::exp(lr[j] - mx);
      sum += pr[j];
    }
    const S inv = S(1) / sum;
    for (int j = 0; j < vocab; ++j) pr[j] *= inv;
    if (targets[t] != pad_id)
      loss -= std::log(std::max(static_cast<double>(pr[targets[t]]), 1e-12));
  }
  out->data[0] = static_cast<S>(loss / live);
  check_finite(*out, "cross_entropy");

  if (detail::want_grad(tape, {&logits})) {
    out->requires_grad = true;
    tape->record("cross_entropy", [logits, out, probs, targets, pad_id, steps, vocab,
                                   live](Tape<S>& t) {
      const auto* g = t.find_grad(out.get());
      if (!g) return;
      const S w = (*g)[0] / static_cast<S>(live);
      auto& gl = t.grad_buf(logits);
      for (int ts = 0; ts < steps; ++ts) {
        if (targets[ts] == pad_id) continue;
        const S* pr = probs->data() + static_cast<int64_t>(ts) * vocab;
        S* gr = gl.data() + static_cast<int64_t>(ts) * vocab;
        for (int j = 0; j < vocab; ++j) gr[j] += w * pr[j];
        gr[targets[ts]] -= w;
      }
    });
  }
  return out;
}

}  // namespace minidrive::ops
