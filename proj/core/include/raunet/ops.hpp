#pragma once

#include <cmath>
#include <cstring>
#include <initializer_list>
#include <limits>
#include <numeric>

#include "raunet/tensor.hpp"

namespace raunet {

namespace detail {

// C[M,N] (+)= A[M,K] * B[K,N]. ikj order so the inner loop is a pure
// elementwise multiply-add over contiguous rows; vectorizes without
// any FP reassociation.
template <typename S>
void gemm_nn(const S* a, const S* b, S* c, int M, int K, int N, bool accumulate) {
    if (!accumulate) std::fill(c, c + static_cast<std::size_t>(M) * N, S(0));
    for (int i = 0; i < M; ++i) {
        const S* arow = a + static_cast<std::size_t>(i) * K;
        S* crow = c + static_cast<std::size_t>(i) * N;
        for (int k = 0; k < K; ++k) {
            const S aik = arow[k];
            const S* brow = b + static_cast<std::size_t>(k) * N;
            for (int j = 0; j < N; ++j) crow[j] += aik * brow[j];
        }
    }
}

template <typename S>
void transpose2d(const S* src, S* dst, int rows, int cols) {
    for (int i = 0; i < rows; ++i)
        for (int j = 0; j < cols; ++j)
            dst[static_cast<std::size_t>(j) * rows + i] = src[static_cast<std::size_t>(i) * cols + j];
}

// col[(ci*k+ki)*k+kj][oh*OW+ow] = x[ci][oh*stride-pad+ki][ow*stride-pad+kj]
template <typename S>
void im2col(const S* x, S* col, int C, int H, int W, int k, int stride, int pad,
            int OH, int OW) {
    for (int c = 0; c < C; ++c) {
        for (int ki = 0; ki < k; ++ki) {
            for (int kj = 0; kj < k; ++kj) {
                S* crow = col + (static_cast<std::size_t>(c) * k * k +
                                 static_cast<std::size_t>(ki) * k + kj) *
                                    (static_cast<std::size_t>(OH) * OW);
                for (int oh = 0; oh < OH; ++oh) {
                    const int ih = oh * stride - pad + ki;
                    if (ih < 0 || ih >= H) {
                        std::fill(crow + static_cast<std::size_t>(oh) * OW,
                                  crow + (static_cast<std::size_t>(oh) + 1) * OW, S(0));
                        continue;
                    }
                    const S* xrow = x + (static_cast<std::size_t>(c) * H + ih) * W;
                    for (int ow = 0; ow < OW; ++ow) {
                        const int iw = ow * stride - pad + kj;
                        crow[static_cast<std::size_t>(oh) * OW + ow] =
                            (iw >= 0 && iw < W) ? xrow[iw] : S(0);
                    }
                }
            }
        }
    }
}

// Scatter-add inverse of im2col.
template <typename S>
void col2im(const S* col, S* x, int C, int H, int W, int k, int stride, int pad,
            int OH, int OW) {
    for (int c = 0; c < C; ++c) {
        for (int ki = 0; ki < k; ++ki) {
            for (int kj = 0; kj < k; ++kj) {
                const S* crow = col + (static_cast<std::size_t>(c) * k * k +
                                       static_cast<std::size_t>(ki) * k + kj) *
                                          (static_cast<std::size_t>(OH) * OW);
                for (int oh = 0; oh < OH; ++oh) {
                    const int ih = oh * stride - pad + ki;
                    if (ih < 0 || ih >= H) continue;
                    S* xrow = x + (static_cast<std::size_t>(c) * H + ih) * W;
                    for (int ow = 0; ow < OW; ++ow) {
                        const int iw = ow * stride - pad + kj;
                        if (iw >= 0 && iw < W)
                            xrow[iw] += crow[static_cast<std::size_t>(oh) * OW + ow];
                    }
                }
            }
        }
    }
}

template <typename S>
void check_same_shape(const Tensor<S>& a, const Tensor<S>& b, const char* op) {
    if (a.shape() != b.shape())
        throw ShapeError(std::string(op) + ": operand shapes differ, " + shape_str(a.shape()) +
                         " vs " + shape_str(b.shape()));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// elementwise

template <typename S>
Tensor<S> relu(const Tensor<S>& x) {
    Tensor<S> out = detail::make_op<S>(
        x.shape(), {x}, [](detail::Node<S>& node) {
            auto& p = *node.parents[0];
            if (!p.requires_grad) return;
            p.ensure_grad();
            // subgradient at 0 is 0
            for (std::size_t i = 0; i < node.data.size(); ++i)
                if (p.data[i] > S(0)) p.grad[i] += node.grad[i];
        });
    const S* in = x.data().data();
    S* o = out.mutable_data().data();
    for (std::size_t i = 0; i < x.numel(); ++i) o[i] = in[i] > S(0) ? in[i] : S(0);
    return out;
}

template <typename S>
Tensor<S> sigmoid(const Tensor<S>& x) {
    Tensor<S> out = detail::make_op<S>(
        x.shape(), {x}, [](detail::Node<S>& node) {
            auto& p = *node.parents[0];
            if (!p.requires_grad) return;
            p.ensure_grad();
            for (std::size_t i = 0; i < node.data.size(); ++i) {
                const S y = node.data[i];
                p.grad[i] += node.grad[i] * y * (S(1) - y);
            }
        });
    const S* in = x.data().data();
    S* o = out.mutable_data().data();
    for (std::size_t i = 0; i < x.numel(); ++i) {
        const S v = in[i];
        if (v >= S(0)) {
            o[i] = S(1) / (S(1) + std::exp(-v));
        } else {
            const S e = std::exp(v);
            o[i] = e / (S(1) + e);
        }
    }
    return out;
}

template <typename S>
Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b) {
    detail::check_same_shape(a, b, "add");
    Tensor<S> out = detail::make_op<S>(
        a.shape(), {a, b}, [](detail::Node<S>& node) {
            for (int pi = 0; pi < 2; ++pi) {
                auto& p = *node.parents[static_cast<std::size_t>(pi)];
                if (!p.requires_grad) continue;
                p.ensure_grad();
                for (std::size_t i = 0; i < node.data.size(); ++i) p.grad[i] += node.grad[i];
            }
        });
    const S* pa = a.data().data();
    const S* pb = b.data().data();
    S* o = out.mutable_data().data();
    for (std::size_t i = 0; i < a.numel(); ++i) o[i] = pa[i] + pb[i];
    return out;
}

template <typename S>
Tensor<S> sub(const Tensor<S>& a, const Tensor<S>& b) {
    detail::check_same_shape(a, b, "sub");
    Tensor<S> out = detail::make_op<S>(
        a.shape(), {a, b}, [](detail::Node<S>& node) {
            auto& pa = *node.parents[0];
            if (pa.requires_grad) {
                pa.ensure_grad();
                for (std::size_t i = 0; i < node.data.size(); ++i) pa.grad[i] += node.grad[i];
            }
            auto& pb = *node.parents[1];
            if (pb.requires_grad) {
                pb.ensure_grad();
                for (std::size_t i = 0; i < node.data.size(); ++i) pb.grad[i] -= node.grad[i];
            }
        });
    const S* pa = a.data().data();
    const S* pb = b.data().data();
    S* o = out.mutable_data().data();
    for (std::size_t i = 0; i < a.numel(); ++i) o[i] = pa[i] - pb[i];
    return out;
}

template <typename S>
Tensor<S> mul(const Tensor<S>& a, const Tensor<S>& b) {
    detail::check_same_shape(a, b, "mul");
    Tensor<S> out = detail::make_op<S>(
        a.shape(), {a, b}, [](detail::Node<S>& node) {
            auto& pa = *node.parents[0];
            auto& pb = *node.parents[1];
            if (pa.requires_grad) {
                pa.ensure_grad();
                for (std::size_t i = 0; i < node.data.size(); ++i)
                    pa.grad[i] += node.grad[i] * pb.data[i];
            }
            if (pb.requires_grad) {
                pb.ensure_grad();
                for (std::size_t i = 0; i < node.data.size(); ++i)
                    pb.grad[i] += node.grad[i] * pa.data[i];
            }
        });
    const S* pa = a.data().data();
    const S* pb = b.data().data();
    S* o = out.mutable_data().data();
    for (std::size_t i = 0; i < a.numel(); ++i) o[i] = pa[i] * pb[i];
    return out;
}

template <typename S>
Tensor<S> mul(const Tensor<S>& a, S c) {
    Tensor<S> out = detail::make_op<S>(
        a.shape(), {a}, [c](detail::Node<S>& node) {
            auto& p = *node.parents[0];
            if (!p.requires_grad) return;
            p.ensure_grad();
            for (std::size_t i = 0; i < node.data.size(); ++i) p.grad[i] += node.grad[i] * c;
        });
    const S* pa = a.data().data();
    S* o = out.mutable_data().data();
    for (std::size_t i = 0; i < a.numel(); ++i) o[i] = pa[i] * c;
    return out;
}

// ---------------------------------------------------------------------------
// softmax

template <typename S>
Tensor<S> softmax(const Tensor<S>& x, int axis) {
    if (axis < 0) axis += x.rank();
    if (axis < 0 || axis >= x.rank())
        throw ShapeError("softmax: axis " + std::to_string(axis) + " out of range for shape " +
                         shape_str(x.shape()));
    std::size_t outer = 1, inner = 1;
    const std::size_t len = static_cast<std::size_t>(x.extent(axis));
    for (int i = 0; i < axis; ++i) outer *= static_cast<std::size_t>(x.extent(i));
    for (int i = axis + 1; i < x.rank(); ++i) inner *= static_cast<std::size_t>(x.extent(i));

    Tensor<S> out = detail::make_op<S>(
        x.shape(), {x}, [outer, inner, len](detail::Node<S>& node) {
            auto& p = *node.parents[0];
            if (!p.requires_grad) return;
            p.ensure_grad();
            for (std::size_t o = 0; o < outer; ++o) {
                for (std::size_t in = 0; in < inner; ++in) {
                    const std::size_t base = o * len * inner + in;
                    S dot = S(0);
                    for (std::size_t l = 0; l < len; ++l) {
                        const std::size_t idx = base + l * inner;
                        dot += node.grad[idx] * node.data[idx];
                    }
                    for (std::size_t l = 0; l < len; ++l) {
                        const std::size_t idx = base + l * inner;
                        p.grad[idx] += node.data[idx] * (node.grad[idx] - dot);
                    }
                }
            }
        });
    const S* in = x.data().data();
    S* o = out.mutable_data().data();
    for (std::size_t ou = 0; ou < outer; ++ou) {
        for (std::size_t ii = 0; ii < inner; ++ii) {
            const std::size_t base = ou * len * inner + ii;
            S mx = in[base];
            for (std::size_t l = 1; l < len; ++l) mx = std::max(mx, in[base + l * inner]);
            S sum = S(0);
            for (std::size_t l = 0; l < len; ++l) {
                const S e = std::exp(in[base + l * inner] - mx);
                o[base + l * inner] = e;
                sum += e;
            }
            const S invsum = S(1) / sum;
            for (std::size_t l = 0; l < len; ++l) o[base + l * inner] *= invsum;
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// matmul

namespace detail {

inline void matmul_shape_error(const Shape& a, const Shape& b) {
    throw ShapeError("matmul: incompatible shapes " + shape_str(a) + " and " + shape_str(b));
}

}  // namespace detail

// Rank-2 x rank-2, or batched rank-3 where either operand may be rank-2
// (broadcast over the batch).
template <typename S>
Tensor<S> matmul(const Tensor<S>& a, const Tensor<S>& b) {
    const Shape& as = a.shape();
    const Shape& bs = b.shape();
    if (a.rank() < 2 || a.rank() > 3 || b.rank() < 2 || b.rank() > 3)
        detail::matmul_shape_error(as, bs);

    const int batch_a = a.rank() == 3 ? as[0] : 1;
    const int batch_b = b.rank() == 3 ? bs[0] : 1;
    if (a.rank() == 3 && b.rank() == 3 && batch_a != batch_b)
        detail::matmul_shape_error(as, bs);
    const int batch = std::max(batch_a, batch_b);

    const int M = as[as.size() - 2], K = as[as.size() - 1];
    const int Kb = bs[bs.size() - 2], N = bs[bs.size() - 1];
    if (K != Kb) detail::matmul_shape_error(as, bs);

    Shape out_shape = (a.rank() == 3 || b.rank() == 3) ? Shape{batch, M, N} : Shape{M, N};
    const bool a_batched = a.rank() == 3, b_batched = b.rank() == 3;

    Tensor<S> out = detail::make_op<S>(
        out_shape, {a, b},
        [batch, M, K, N, a_batched, b_batched](detail::Node<S>& node) {
            auto& pa = *node.parents[0];
            auto& pb = *node.parents[1];
            const std::size_t asz = static_cast<std::size_t>(M) * K;
            const std::size_t bsz = static_cast<std::size_t>(K) * N;
            const std::size_t osz = static_cast<std::size_t>(M) * N;
            if (pa.requires_grad) {
                pa.ensure_grad();
                MVec<S> bt(bsz);
                for (int n = 0; n < batch; ++n) {
                    const S* bp = pb.data.data() + (b_batched ? n * bsz : 0);
                    detail::transpose2d(bp, bt.data(), K, N);
                    detail::gemm_nn(node.grad.data() + n * osz, bt.data(),
                                    pa.grad.data() + (a_batched ? n * asz : 0), M, N, K, true);
                }
            }
            if (pb.requires_grad) {
                pb.ensure_grad();
                MVec<S> at(asz);
                for (int n = 0; n < batch; ++n) {
                    const S* ap = pa.data.data() + (a_batched ? n * asz : 0);
                    detail::transpose2d(ap, at.data(), M, K);
                    detail::gemm_nn(at.data(), node.grad.data() + n * osz,
                                    pb.grad.data() + (b_batched ? n * bsz : 0), K, M, N, true);
                }
            }
        });
    for (int n = 0; n < batch; ++n) {
        const S* ap = a.data().data() + (a_batched ? static_cast<std::size_t>(n) * M * K : 0);
        const S* bp = b.data().data() + (b_batched ? static_cast<std::size_t>(n) * K * N : 0);
        detail::gemm_nn(ap, bp, out.mutable_data().data() + static_cast<std::size_t>(n) * M * N,
                        M, K, N, false);
    }
    return out;
}

template <typename S>
Tensor<S> transpose(const Tensor<S>& x) {
    if (x.rank() != 2) throw ShapeError("transpose: expects rank-2, got " + shape_str(x.shape()));
    const int R = x.extent(0), C = x.extent(1);
    Tensor<S> out = detail::make_op<S>(
        {C, R}, {x}, [R, C](detail::Node<S>& node) {
            auto& p = *node.parents[0];
            if (!p.requires_grad) return;
            p.ensure_grad();
            for (int i = 0; i < C; ++i)
                for (int j = 0; j < R; ++j)
                    p.grad[static_cast<std::size_t>(j) * C + i] +=
                        node.grad[static_cast<std::size_t>(i) * R + j];
        });
    detail::transpose2d(x.data().data(), out.mutable_data().data(), R, C);
    return out;
}

// ---------------------------------------------------------------------------
// convolution

template <typename S>
Tensor<S> conv2d(const Tensor<S>& x, const Tensor<S>& w, const Tensor<S>& bias,
                 int stride = 1, int padding = 0) {
    if (x.rank() != 4 || w.rank() != 4)
        throw ShapeError("conv2d: expects x[N,C,H,W] and w[Cout,Cin,k,k], got " +
                         shape_str(x.shape()) + " and " + shape_str(w.shape()));
    const int N = x.extent(0), C = x.extent(1), H = x.extent(2), W = x.extent(3);
    const int Cout = w.extent(0), Cin = w.extent(1), k = w.extent(2);
    if (w.extent(3) != k || Cin != C)
        throw ShapeError("conv2d: weight " + shape_str(w.shape()) + " does not match input " +
                         shape_str(x.shape()));
    if (bias.defined() && (bias.rank() != 1 || bias.extent(0) != Cout))
        throw ShapeError("conv2d: bias shape " + shape_str(bias.shape()) + " wants [" +
                         std::to_string(Cout) + "]");
    const int OH = (H + 2 * padding - k) / stride + 1;
    const int OW = (W + 2 * padding - k) / stride + 1;
    if (OH <= 0 || OW <= 0 || H + 2 * padding < k || W + 2 * padding < k)
        throw GeometryError("conv2d: computed output size " + std::to_string(OH) + "x" +
                            std::to_string(OW) + " from input " + std::to_string(H) + "x" +
                            std::to_string(W) + ", kernel " + std::to_string(k) + ", stride " +
                            std::to_string(stride) + ", padding " + std::to_string(padding));

    const bool k1 = (k == 1 && stride == 1 && padding == 0);
    const std::size_t colsz = static_cast<std::size_t>(C) * k * k * OH * OW;
    const std::size_t osz = static_cast<std::size_t>(Cout) * OH * OW;
    const std::size_t xsz = static_cast<std::size_t>(C) * H * W;

    std::vector<Tensor<S>> inputs = {x, w};
    if (bias.defined()) inputs.push_back(bias);
    Tensor<S> out = detail::make_op<S>(
        {N, Cout, OH, OW}, std::move(inputs),
        [N, C, H, W, Cout, k, stride, padding, OH, OW, k1, colsz, osz,
         xsz](detail::Node<S>& node) {
            auto& px = *node.parents[0];
            auto& pw = *node.parents[1];
            const int KC = C * k * k;
            MVec<S> col, wt, colt;
            if (px.requires_grad || pw.requires_grad) {
                if (!k1) col.resize(colsz);
            }
            if (pw.requires_grad) {
                pw.ensure_grad();
                colt.resize(static_cast<std::size_t>(OH) * OW * KC);
            }
            if (px.requires_grad) {
                px.ensure_grad();
                wt.resize(static_cast<std::size_t>(KC) * Cout);
                detail::transpose2d(pw.data.data(), wt.data(), Cout, KC);
            }
            MVec<S> dcol(px.requires_grad && !k1 ? colsz : 0);
            for (int n = 0; n < N; ++n) {
                const S* xp = px.data.data() + static_cast<std::size_t>(n) * xsz;
                const S* gp = node.grad.data() + static_cast<std::size_t>(n) * osz;
                const S* colp = xp;
                if (!k1 && (px.requires_grad || pw.requires_grad)) {
                    detail::im2col(xp, col.data(), C, H, W, k, stride, padding, OH, OW);
                    colp = col.data();
                }
                if (pw.requires_grad) {
                    detail::transpose2d(colp, colt.data(), KC, OH * OW);
                    detail::gemm_nn(gp, colt.data(), pw.grad.data(), Cout, OH * OW, KC, true);
                }
                if (px.requires_grad) {
                    S* dxp = px.grad.data() + static_cast<std::size_t>(n) * xsz;
                    if (k1) {
                        detail::gemm_nn(wt.data(), gp, dxp, KC, Cout, OH * OW, true);
                    } else {
                        detail::gemm_nn(wt.data(), gp, dcol.data(), KC, Cout, OH * OW, false);
                        detail::col2im(dcol.data(), dxp, C, H, W, k, stride, padding, OH, OW);
                    }
                }
            }
            if (node.parents.size() > 2) {
                auto& pbias = *node.parents[2];
                if (pbias.requires_grad) {
                    pbias.ensure_grad();
                    for (int n = 0; n < N; ++n)
                        for (int co = 0; co < Cout; ++co) {
                            const S* gp = node.grad.data() +
                                          (static_cast<std::size_t>(n) * Cout + co) * OH * OW;
                            S s = S(0);
                            for (int i = 0; i < OH * OW; ++i) s += gp[i];
                            pbias.grad[static_cast<std::size_t>(co)] += s;
                        }
                }
            }
        });

    MVec<S> col(k1 ? 0 : colsz);
    S* op = out.mutable_data().data();
    for (int n = 0; n < N; ++n) {
        const S* xp = x.data().data() + static_cast<std::size_t>(n) * xsz;
        const S* colp = xp;
        if (!k1) {
            detail::im2col(xp, col.data(), C, H, W, k, stride, padding, OH, OW);
            colp = col.data();
        }
        detail::gemm_nn(w.data().data(), colp, op + static_cast<std::size_t>(n) * osz, Cout,
                        C * k * k, OH * OW, false);
    }
    if (bias.defined()) {
        const S* bp = bias.data().data();
        for (int n = 0; n < N; ++n)
            for (int co = 0; co < Cout; ++co) {
                S* row = op + (static_cast<std::size_t>(n) * Cout + co) * OH * OW;
                for (int i = 0; i < OH * OW; ++i) row[i] += bp[co];
            }
    }
    return out;
}

template <typename S>
Tensor<S> conv2d(const Tensor<S>& x, const Tensor<S>& w, int stride = 1, int padding = 0) {
    return conv2d(x, w, Tensor<S>{}, stride, padding);
}

// Transposed convolution. x[N,A,H,W] with w[A,B,k,k] gives [N,B,(H-1)s+k,(W-1)s+k];
// it is the adjoint of conv2d with the same kernel.
template <typename S>
Tensor<S> conv2d_transpose(const Tensor<S>& x, const Tensor<S>& w, const Tensor<S>& bias,
                           int stride) {
    if (x.rank() != 4 || w.rank() != 4)
        throw ShapeError("conv2d_transpose: expects x[N,A,H,W] and w[A,B,k,k], got " +
                         shape_str(x.shape()) + " and " + shape_str(w.shape()));
    if (stride < 1)
        throw GeometryError("conv2d_transpose: stride must be >= 1, got " + std::to_string(stride));
    const int N = x.extent(0), A = x.extent(1), H = x.extent(2), W = x.extent(3);
    const int B = w.extent(1), k = w.extent(2);
    if (w.extent(0) != A || w.extent(3) != k)
        throw ShapeError("conv2d_transpose: weight " + shape_str(w.shape()) +
                         " does not match input " + shape_str(x.shape()));
    if (bias.defined() && (bias.rank() != 1 || bias.extent(0) != B))
        throw ShapeError("conv2d_transpose: bias shape " + shape_str(bias.shape()) + " wants [" +
                         std::to_string(B) + "]");
    const int OH = (H - 1) * stride + k;
    const int OW = (W - 1) * stride + k;

    const int KB = B * k * k;
    const std::size_t xsz = static_cast<std::size_t>(A) * H * W;
    const std::size_t osz = static_cast<std::size_t>(B) * OH * OW;
    const std::size_t colsz = static_cast<std::size_t>(KB) * H * W;

    std::vector<Tensor<S>> inputs = {x, w};
    if (bias.defined()) inputs.push_back(bias);
    Tensor<S> out = detail::make_op<S>(
        {N, B, OH, OW}, std::move(inputs),
        [N, A, B, H, W, k, stride, OH, OW, KB, xsz, osz, colsz](detail::Node<S>& node) {
            auto& px = *node.parents[0];
            auto& pw = *node.parents[1];
            // dtmp = im2col(dout) in the forward-conv geometry; then
            // dx = w_flat * dtmp and dw += x * dtmp^T
            MVec<S> col(colsz), colt;
            if (pw.requires_grad) {
                pw.ensure_grad();
                colt.resize(colsz);
            }
            if (px.requires_grad) px.ensure_grad();
            for (int n = 0; n < N; ++n) {
                const S* gp = node.grad.data() + static_cast<std::size_t>(n) * osz;
                detail::im2col(gp, col.data(), B, OH, OW, k, stride, 0, H, W);
                if (px.requires_grad)
                    detail::gemm_nn(pw.data.data(), col.data(),
                                    px.grad.data() + static_cast<std::size_t>(n) * xsz, A, KB,
                                    H * W, true);
                if (pw.requires_grad) {
                    detail::transpose2d(col.data(), colt.data(), KB, H * W);
                    detail::gemm_nn(px.data.data() + static_cast<std::size_t>(n) * xsz,
                                    colt.data(), pw.grad.data(), A, H * W, KB, true);
                }
            }
            if (node.parents.size() > 2) {
                auto& pbias = *node.parents[2];
                if (pbias.requires_grad) {
                    pbias.ensure_grad();
                    for (int n = 0; n < N; ++n)
                        for (int b = 0; b < B; ++b) {
                            const S* gp = node.grad.data() +
                                          (static_cast<std::size_t>(n) * B + b) * OH * OW;
                            S s = S(0);
                            for (int i = 0; i < OH * OW; ++i) s += gp[i];
                            pbias.grad[static_cast<std::size_t>(b)] += s;
                        }
                }
            }
        });

    // forward: tmp[KB, H*W] = w_flat^T x[n]; scatter into the strided output
    MVec<S> wt(static_cast<std::size_t>(KB) * A);
    detail::transpose2d(w.data().data(), wt.data(), A, KB);
    MVec<S> tmp(colsz);
    S* op = out.mutable_data().data();
    std::fill(op, op + out.numel(), S(0));
    for (int n = 0; n < N; ++n) {
        detail::gemm_nn(wt.data(), x.data().data() + static_cast<std::size_t>(n) * xsz,
                        tmp.data(), KB, A, H * W, false);
        detail::col2im(tmp.data(), op + static_cast<std::size_t>(n) * osz, B, OH, OW, k, stride,
                       0, H, W);
    }
    if (bias.defined()) {
        const S* bp = bias.data().data();
        for (int n = 0; n < N; ++n)
            for (int b = 0; b < B; ++b) {
                S* row = op + (static_cast<std::size_t>(n) * B + b) * OH * OW;
                for (int i = 0; i < OH * OW; ++i) row[i] += bp[b];
            }
    }
    return out;
}

template <typename S>
Tensor<S> conv2d_transpose(const Tensor<S>& x, const Tensor<S>& w, int stride) {
    return conv2d_transpose(x, w, Tensor<S>{}, stride);
}

// ---------------------------------------------------------------------------
// pooling

template <typename S>
Tensor<S> maxpool2d(const Tensor<S>& x, int size = 2, int stride = 2) {
    if (x.rank() != 4)
        throw ShapeError("maxpool2d: expects [N,C,H,W], got " + shape_str(x.shape()));
    if (size != stride)
        throw ConfigError("maxpool2d: only size == stride windows are supported");
    const int N = x.extent(0), C = x.extent(1), H = x.extent(2), W = x.extent(3);
    if (H % size != 0 || W % size != 0)
        throw GeometryError("maxpool2d: extents " + std::to_string(H) + "x" + std::to_string(W) +
                            " not divisible by window " + std::to_string(size));
    const int OH = H / size, OW = W / size;

    auto argmax = std::make_shared<MVec<std::int32_t>>(
        static_cast<std::size_t>(N) * C * OH * OW);
    Tensor<S> out = detail::make_op<S>(
        {N, C, OH, OW}, {x}, [argmax](detail::Node<S>& node) {
            auto& p = *node.parents[0];
            if (!p.requires_grad) return;
            p.ensure_grad();
            for (std::size_t i = 0; i < node.data.size(); ++i)
                p.grad[static_cast<std::size_t>((*argmax)[i])] += node.grad[i];
        });

    const S* in = x.data().data();
    S* o = out.mutable_data().data();
    std::size_t oi = 0;
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c) {
            const std::size_t plane = (static_cast<std::size_t>(n) * C + c) * H * W;
            for (int oh = 0; oh < OH; ++oh)
                for (int ow = 0; ow < OW; ++ow, ++oi) {
                    S best = -std::numeric_limits<S>::infinity();
                    std::size_t best_idx = 0;
                    for (int di = 0; di < size; ++di)
                        for (int dj = 0; dj < size; ++dj) {
                            const std::size_t idx = plane +
                                static_cast<std::size_t>(oh * size + di) * W + ow * size + dj;
                            if (in[idx] > best) {  // strict: ties keep the first, row-major
                                best = in[idx];
                                best_idx = idx;
                            }
                        }
                    o[oi] = best;
                    (*argmax)[oi] = static_cast<std::int32_t>(best_idx);
                }
        }
    return out;
}

template <typename S>
Tensor<S> global_avg_pool(const Tensor<S>& x) {
    if (x.rank() != 4)
        throw ShapeError("global_avg_pool: expects [N,C,H,W], got " + shape_str(x.shape()));
    const int N = x.extent(0), C = x.extent(1), H = x.extent(2), W = x.extent(3);
    const std::size_t hw = static_cast<std::size_t>(H) * W;
    Tensor<S> out = detail::make_op<S>(
        {N, C}, {x}, [hw](detail::Node<S>& node) {
            auto& p = *node.parents[0];
            if (!p.requires_grad) return;
            p.ensure_grad();
            const S inv = S(1) / static_cast<S>(hw);
            for (std::size_t i = 0; i < node.data.size(); ++i) {
                const S g = node.grad[i] * inv;
                S* dst = p.grad.data() + i * hw;
                for (std::size_t j = 0; j < hw; ++j) dst[j] += g;
            }
        });
    const S* in = x.data().data();
    S* o = out.mutable_data().data();
    for (int i = 0; i < N * C; ++i) {
        S s = S(0);
        const S* src = in + static_cast<std::size_t>(i) * hw;
        for (std::size_t j = 0; j < hw; ++j) s += src[j];
        o[static_cast<std::size_t>(i)] = s / static_cast<S>(hw);
    }
    return out;
}

// ---------------------------------------------------------------------------
// structure ops

template <typename S>
Tensor<S> concat(const std::vector<Tensor<S>>& ts, int axis) {
    if (ts.empty()) throw ShapeError("concat: no inputs");
    const Shape& first = ts[0].shape();
    if (axis < 0) axis += static_cast<int>(first.size());
    if (axis < 0 || axis >= static_cast<int>(first.size()))
        throw ShapeError("concat: axis " + std::to_string(axis) + " out of range for " +
                         shape_str(first));
    int total = 0;
    for (const auto& t : ts) {
        if (t.rank() != static_cast<int>(first.size()))
            throw ShapeError("concat: rank mismatch, " + shape_str(first) + " vs " +
                             shape_str(t.shape()));
        for (int i = 0; i < t.rank(); ++i)
            if (i != axis && t.extent(i) != first[static_cast<std::size_t>(i)])
                throw ShapeError("concat: shapes differ off-axis, " + shape_str(first) + " vs " +
                                 shape_str(t.shape()));
        total += t.extent(axis);
    }
    Shape out_shape = first;
    out_shape[static_cast<std::size_t>(axis)] = total;

    std::size_t outer = 1, inner = 1;
    for (int i = 0; i < axis; ++i) outer *= static_cast<std::size_t>(first[static_cast<std::size_t>(i)]);
    for (int i = axis + 1; i < static_cast<int>(first.size()); ++i)
        inner *= static_cast<std::size_t>(first[static_cast<std::size_t>(i)]);

    std::vector<std::size_t> extents;
    for (const auto& t : ts) extents.push_back(static_cast<std::size_t>(t.extent(axis)));

    Tensor<S> out = detail::make_op<S>(
        out_shape, ts, [outer, inner, extents, total](detail::Node<S>& node) {
            const std::size_t row = static_cast<std::size_t>(total) * inner;
            std::size_t off = 0;
            for (std::size_t pi = 0; pi < node.parents.size(); ++pi) {
                auto& p = *node.parents[pi];
                const std::size_t seg = extents[pi] * inner;
                if (p.requires_grad) {
                    p.ensure_grad();
                    for (std::size_t o = 0; o < outer; ++o) {
                        const S* src = node.grad.data() + o * row + off;
                        S* dst = p.grad.data() + o * seg;
                        for (std::size_t j = 0; j < seg; ++j) dst[j] += src[j];
                    }
                }
                off += seg;
            }
        });

    S* op = out.mutable_data().data();
    const std::size_t row = static_cast<std::size_t>(total) * inner;
    std::size_t off = 0;
    for (std::size_t pi = 0; pi < ts.size(); ++pi) {
        const std::size_t seg = extents[pi] * inner;
        const S* src = ts[pi].data().data();
        for (std::size_t o = 0; o < outer; ++o)
            std::memcpy(op + o * row + off, src + o * seg, seg * sizeof(S));
        off += seg;
    }
    return out;
}

template <typename S>
Tensor<S> reshape(const Tensor<S>& x, Shape shape) {
    if (shape_numel(shape) != x.numel())
        throw ShapeError("reshape: cannot view " + shape_str(x.shape()) + " as " +
                         shape_str(shape));
    Tensor<S> out = detail::make_op<S>(
        std::move(shape), {x}, [](detail::Node<S>& node) {
            auto& p = *node.parents[0];
            if (!p.requires_grad) return;
            p.ensure_grad();
            for (std::size_t i = 0; i < node.data.size(); ++i) p.grad[i] += node.grad[i];
        });
    std::memcpy(out.mutable_data().data(), x.data().data(), x.numel() * sizeof(S));
    return out;
}

template <typename S>
Tensor<S> permute(const Tensor<S>& x, std::vector<int> axes) {
    const int r = x.rank();
    if (static_cast<int>(axes.size()) != r)
        throw ShapeError("permute: got " + std::to_string(axes.size()) + " axes for rank " +
                         std::to_string(r));
    Shape out_shape(static_cast<std::size_t>(r));
    for (int i = 0; i < r; ++i) out_shape[static_cast<std::size_t>(i)] = x.extent(axes[static_cast<std::size_t>(i)]);

    // strides of the source, walked in permuted order
    std::vector<std::size_t> in_strides(static_cast<std::size_t>(r), 1);
    for (int i = r - 2; i >= 0; --i)
        in_strides[static_cast<std::size_t>(i)] =
            in_strides[static_cast<std::size_t>(i + 1)] * static_cast<std::size_t>(x.extent(i + 1));
    std::vector<std::size_t> walk(static_cast<std::size_t>(r));
    for (int i = 0; i < r; ++i) walk[static_cast<std::size_t>(i)] = in_strides[static_cast<std::size_t>(axes[static_cast<std::size_t>(i)])];

    auto map_indices = [out_shape, walk](std::size_t n, auto&& fn) {
        const int rr = static_cast<int>(out_shape.size());
        std::vector<int> idx(static_cast<std::size_t>(rr), 0);
        for (std::size_t flat = 0; flat < n; ++flat) {
            std::size_t src = 0;
            for (int i = 0; i < rr; ++i) src += static_cast<std::size_t>(idx[static_cast<std::size_t>(i)]) * walk[static_cast<std::size_t>(i)];
            fn(flat, src);
            for (int i = rr - 1; i >= 0; --i) {
                if (++idx[static_cast<std::size_t>(i)] < out_shape[static_cast<std::size_t>(i)]) break;
                idx[static_cast<std::size_t>(i)] = 0;
            }
        }
    };

    Tensor<S> out = detail::make_op<S>(
        out_shape, {x}, [map_indices](detail::Node<S>& node) {
            auto& p = *node.parents[0];
            if (!p.requires_grad) return;
            p.ensure_grad();
            map_indices(node.data.size(), [&](std::size_t flat, std::size_t src) {
                p.grad[src] += node.grad[flat];
            });
        });
    const S* in = x.data().data();
    S* o = out.mutable_data().data();
    map_indices(out.numel(), [&](std::size_t flat, std::size_t src) { o[flat] = in[src]; });
    return out;
}

// Contiguous row range [start, start+len) along axis 0.
template <typename S>
Tensor<S> slice0(const Tensor<S>& x, int start, int len) {
    if (x.rank() < 1 || start < 0 || len < 0 || start + len > x.extent(0))
        throw ShapeError("slice0: range [" + std::to_string(start) + ", " +
                         std::to_string(start + len) + ") out of bounds for " +
                         shape_str(x.shape()));
    Shape out_shape = x.shape();
    out_shape[0] = len;
    std::size_t seg = 1;
    for (int i = 1; i < x.rank(); ++i) seg *= static_cast<std::size_t>(x.extent(i));
    Tensor<S> out = detail::make_op<S>(
        out_shape, {x}, [start, seg](detail::Node<S>& node) {
            auto& p = *node.parents[0];
            if (!p.requires_grad) return;
            p.ensure_grad();
            S* dst = p.grad.data() + static_cast<std::size_t>(start) * seg;
            for (std::size_t j = 0; j < node.grad.size(); ++j) dst[j] += node.grad[j];
        });
    std::memcpy(out.mutable_data().data(),
                x.data().data() + static_cast<std::size_t>(start) * seg,
                static_cast<std::size_t>(len) * seg * sizeof(S));
    return out;
}

// Select index i along axis 0, dropping that axis.
template <typename S>
Tensor<S> select(const Tensor<S>& x, int i) {
    if (x.rank() < 1 || i < 0 || i >= x.extent(0))
        throw ShapeError("select: index " + std::to_string(i) + " out of range for " +
                         shape_str(x.shape()));
    Shape out_shape(x.shape().begin() + 1, x.shape().end());
    const std::size_t seg = shape_numel(out_shape);
    Tensor<S> out = detail::make_op<S>(
        out_shape, {x}, [i, seg](detail::Node<S>& node) {
            auto& p = *node.parents[0];
            if (!p.requires_grad) return;
            p.ensure_grad();
            S* dst = p.grad.data() + static_cast<std::size_t>(i) * seg;
            for (std::size_t j = 0; j < seg; ++j) dst[j] += node.grad[j];
        });
    std::memcpy(out.mutable_data().data(), x.data().data() + static_cast<std::size_t>(i) * seg,
                seg * sizeof(S));
    return out;
}

// ---------------------------------------------------------------------------
// reductions

template <typename S>
Tensor<S> sum(const Tensor<S>& x) {
    Tensor<S> out = detail::make_op<S>(
        {1}, {x}, [](detail::Node<S>& node) {
            auto& p = *node.parents[0];
            if (!p.requires_grad) return;
            p.ensure_grad();
            const S g = node.grad[0];
            for (std::size_t i = 0; i < p.data.size(); ++i) p.grad[i] += g;
        });
    S s = S(0);
    for (S v : x.data()) s += v;
    out.mutable_data()[0] = s;
    return out;
}

template <typename S>
Tensor<S> mean(const Tensor<S>& x) {
    const std::size_t n = x.numel();
    Tensor<S> out = detail::make_op<S>(
        {1}, {x}, [n](detail::Node<S>& node) {
            auto& p = *node.parents[0];
            if (!p.requires_grad) return;
            p.ensure_grad();
            const S g = node.grad[0] / static_cast<S>(n);
            for (std::size_t i = 0; i < p.data.size(); ++i) p.grad[i] += g;
        });
    S s = S(0);
    for (S v : x.data()) s += v;
    out.mutable_data()[0] = s / static_cast<S>(n);
    return out;
}

// Precision conversion; produces a fresh leaf (no graph edge).
template <typename To, typename From>
Tensor<To> cast(const Tensor<From>& x) {
    Tensor<To> out = Tensor<To>::zeros(x.shape());
    const From* in = x.data().data();
    To* o = out.mutable_data().data();
    for (std::size_t i = 0; i < x.numel(); ++i) o[i] = static_cast<To>(in[i]);
    return out;
}

}  // namespace raunet
