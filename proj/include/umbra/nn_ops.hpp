// SPDX-License-Identifier: Apache-2.0
// Copyright Contributors to the Umbra Project.

#ifndef UMBRA_NN_OPS_HPP
#define UMBRA_NN_OPS_HPP

#include <Eigen/Core>

#include "umbra/autodiff.hpp"

namespace umbra::ad {

using MatRM = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapRM = Eigen::Map<MatRM>;
using CMapRM = Eigen::Map<const MatRM>;

inline int conv_out_size(int dim, int k, int s, int p) { return (dim + 2 * p - k) / s + 1; }
inline int tconv_out_size(int dim, int k, int s, int p) { return (dim - 1) * s - 2 * p + k; }

namespace detail {

inline void im2col(const Tensor& x, int n, int k, int s, int p, int OH, int OW, double* cd) {
    const int C = x.dim(1), H = x.dim(2), W = x.dim(3);
    const int K = C * k * k;
    const double* xd = x.data() + static_cast<long long>(n) * C * H * W;
    for (int oh = 0; oh < OH; ++oh) {
        for (int ow = 0; ow < OW; ++ow) {
            double* row = cd + (static_cast<long long>(oh) * OW + ow) * K;
            for (int c = 0; c < C; ++c) {
                const double* plane = xd + static_cast<long long>(c) * H * W;
                for (int ki = 0; ki < k; ++ki) {
                    const int ih = oh * s - p + ki;
                    for (int kj = 0; kj < k; ++kj) {
                        const int iw = ow * s - p + kj;
                        *row++ = (ih >= 0 && ih < H && iw >= 0 && iw < W)
                                     ? plane[static_cast<long long>(ih) * W + iw]
                                     : 0.0;
                    }
                }
            }
        }
    }
}

inline void col2im_accum(const Tensor& col, int n, int k, int s, int p, int OH, int OW, Tensor& dx) {
    const int C = dx.dim(1), H = dx.dim(2), W = dx.dim(3);
    const int K = C * k * k;
    const double* cd = col.data();
    double* xd = dx.data() + static_cast<long long>(n) * C * H * W;
    for (int oh = 0; oh < OH; ++oh) {
        for (int ow = 0; ow < OW; ++ow) {
            const double* row = cd + (static_cast<long long>(oh) * OW + ow) * K;
            for (int c = 0; c < C; ++c) {
                double* plane = xd + static_cast<long long>(c) * H * W;
                for (int ki = 0; ki < k; ++ki) {
                    const int ih = oh * s - p + ki;
                    for (int kj = 0; kj < k; ++kj) {
                        const int iw = ow * s - p + kj;
                        if (ih >= 0 && ih < H && iw >= 0 && iw < W)
                            plane[static_cast<long long>(ih) * W + iw] += row[(c * k + ki) * k + kj];
                    }
                }
            }
        }
    }
}

}  // namespace detail

/// conv2d: x[N,Cin,H,W] * w[Cout,Cin,k,k] + b[Cout], square kernel.
inline Var conv2d(const Var& x, const Var& w, const Var& b, int stride, int pad) {
    const Tensor& xv = x->value;
    const Tensor& wv = w->value;
    check(xv.ndim() == 4 && wv.ndim() == 4, "conv2d: expects 4D input and weight");
    const int N = xv.dim(0), Cin = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
    const int Cout = wv.dim(0), k = wv.dim(2);
    check(wv.dim(1) == Cin && wv.dim(3) == k, "conv2d: weight shape mismatch");
    check(b->value.numel() == Cout, "conv2d: bias size mismatch");
    const int OH = conv_out_size(H, k, stride, pad), OW = conv_out_size(W, k, stride, pad);
    check(OH > 0 && OW > 0, "conv2d: output would be empty");
    const int K = Cin * k * k;
    const long long OHW = static_cast<long long>(OH) * OW;

    Tensor out({N, Cout, OH, OW});
    auto col = std::make_shared<Tensor>(Tensor::zeros({N, static_cast<int>(OHW), K}));
    CMapRM Wm(wv.data(), Cout, K);
    for (int n = 0; n < N; ++n) {
        detail::im2col(xv, n, k, stride, pad, OH, OW, col->data() + static_cast<long long>(n) * OHW * K);
        CMapRM colM(col->data() + static_cast<long long>(n) * OHW * K, OHW, K);
        MapRM outM(out.data() + static_cast<long long>(n) * Cout * OHW, Cout, OHW);
        outM.noalias() = Wm * colM.transpose();
    }
    const double* bd = b->value.data();
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < Cout; ++c) {
            double* od = out.data() + (static_cast<long long>(n) * Cout + c) * OHW;
            const double bv = bd[c];
            for (long long i = 0; i < OHW; ++i) od[i] += bv;
        }

    return make_op(std::move(out), {x, w, b},
                   [col, N, Cin, Cout, k, stride, pad, OH, OW, K, OHW](Node& self) {
        Node& xn = *self.inputs[0];
        Node& wn = *self.inputs[1];
        Node& bn = *self.inputs[2];
        const Tensor& g = self.grad;
        if (bn.requires_grad) {
            Tensor& gb = bn.ensure_grad();
            for (int n = 0; n < N; ++n)
                for (int c = 0; c < Cout; ++c) {
                    const double* gd = g.data() + (static_cast<long long>(n) * Cout + c) * OHW;
                    double acc = 0.0;
                    for (long long i = 0; i < OHW; ++i) acc += gd[i];
                    gb[c] += acc;
                }
        }
        if (wn.requires_grad) {
            Tensor& gw = wn.ensure_grad();
            MapRM gWm(gw.data(), Cout, K);
            for (int n = 0; n < N; ++n) {
                CMapRM gM(g.data() + static_cast<long long>(n) * Cout * OHW, Cout, OHW);
                CMapRM colM(col->data() + static_cast<long long>(n) * OHW * K, OHW, K);
                gWm.noalias() += gM * colM;
            }
        }
        if (xn.requires_grad) {
            Tensor& gx = xn.ensure_grad();
            CMapRM Wm2(wn.value.data(), Cout, K);
            Tensor dcol({static_cast<int>(OHW), K});
            for (int n = 0; n < N; ++n) {
                CMapRM gM(g.data() + static_cast<long long>(n) * Cout * OHW, Cout, OHW);
                MapRM dcolM(dcol.data(), OHW, K);
                dcolM.noalias() = gM.transpose() * Wm2;
                detail::col2im_accum(dcol, n, k, stride, pad, OH, OW, gx);
            }
        }
    });
}

/// conv_transpose2d: x[N,Cin,H,W] * w[Cin,Cout,k,k] + b[Cout].
inline Var conv_transpose2d(const Var& x, const Var& w, const Var& b, int stride, int pad) {
    const Tensor& xv = x->value;
    const Tensor& wv = w->value;
    check(xv.ndim() == 4 && wv.ndim() == 4, "conv_transpose2d: expects 4D input and weight");
    const int N = xv.dim(0), Cin = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
    const int Cout = wv.dim(1), k = wv.dim(2);
    check(wv.dim(0) == Cin && wv.dim(3) == k, "conv_transpose2d: weight shape mismatch");
    check(b->value.numel() == Cout, "conv_transpose2d: bias size mismatch");
    const int OH = tconv_out_size(H, k, stride, pad), OW = tconv_out_size(W, k, stride, pad);
    check(OH > 0 && OW > 0, "conv_transpose2d: output would be empty");
    const int K2 = Cout * k * k;
    const long long HW = static_cast<long long>(H) * W;

    Tensor out({N, Cout, OH, OW});
    Tensor cols({static_cast<int>(K2), static_cast<int>(HW)});
    CMapRM Wm(wv.data(), Cin, K2);
    const double* bd = b->value.data();
    for (int n = 0; n < N; ++n) {
        CMapRM xM(xv.data() + static_cast<long long>(n) * Cin * HW, Cin, HW);
        MapRM colM(cols.data(), K2, HW);
        colM.noalias() = Wm.transpose() * xM;
        double* od = out.data() + static_cast<long long>(n) * Cout * OH * OW;
        for (int c = 0; c < Cout; ++c) {
            const double bv = bd[c];
            double* plane = od + static_cast<long long>(c) * OH * OW;
            for (long long i = 0; i < static_cast<long long>(OH) * OW; ++i) plane[i] = bv;
        }
        for (int h = 0; h < H; ++h)
            for (int wq = 0; wq < W; ++wq) {
                const long long sp = static_cast<long long>(h) * W + wq;
                for (int c = 0; c < Cout; ++c) {
                    double* plane = od + static_cast<long long>(c) * OH * OW;
                    for (int ki = 0; ki < k; ++ki) {
                        const int oh = h * stride - pad + ki;
                        if (oh < 0 || oh >= OH) continue;
                        for (int kj = 0; kj < k; ++kj) {
                            const int ow = wq * stride - pad + kj;
                            if (ow < 0 || ow >= OW) continue;
                            plane[static_cast<long long>(oh) * OW + ow] +=
                                cols[static_cast<long long>(((c * k + ki) * k + kj)) * HW + sp];
                        }
                    }
                }
            }
    }

    return make_op(std::move(out), {x, w, b},
                   [N, Cin, Cout, k, stride, pad, OH, OW, K2, HW, H, W](Node& self) {
        Node& xn = *self.inputs[0];
        Node& wn = *self.inputs[1];
        Node& bn = *self.inputs[2];
        const Tensor& g = self.grad;
        const long long OHW = static_cast<long long>(OH) * OW;
        if (bn.requires_grad) {
            Tensor& gb = bn.ensure_grad();
            for (int n = 0; n < N; ++n)
                for (int c = 0; c < Cout; ++c) {
                    const double* gd = g.data() + (static_cast<long long>(n) * Cout + c) * OHW;
                    double acc = 0.0;
                    for (long long i = 0; i < OHW; ++i) acc += gd[i];
                    gb[c] += acc;
                }
        }
        // Gather grad into the column layout once per sample, then both the
        // weight and input grads are plain GEMMs.
        Tensor dcols({static_cast<int>(K2), static_cast<int>(HW)});
        for (int n = 0; n < N; ++n) {
            const double* gd = g.data() + static_cast<long long>(n) * Cout * OHW;
            double* dc = dcols.data();
            for (int c = 0; c < Cout; ++c)
                for (int ki = 0; ki < k; ++ki)
                    for (int kj = 0; kj < k; ++kj) {
                        double* drow = dc + static_cast<long long>((c * k + ki) * k + kj) * HW;
                        for (int h = 0; h < H; ++h) {
                            const int oh = h * stride - pad + ki;
                            for (int wq = 0; wq < W; ++wq) {
                                const int ow = wq * stride - pad + kj;
                                drow[static_cast<long long>(h) * W + wq] =
                                    (oh >= 0 && oh < OH && ow >= 0 && ow < OW)
                                        ? gd[static_cast<long long>(c) * OHW + static_cast<long long>(oh) * OW + ow]
                                        : 0.0;
                            }
                        }
                    }
            CMapRM dcolM(dcols.data(), K2, HW);
            if (wn.requires_grad) {
                Tensor& gw = wn.ensure_grad();
                MapRM gWm(gw.data(), Cin, K2);
                CMapRM xM(xn.value.data() + static_cast<long long>(n) * Cin * HW, Cin, HW);
                gWm.noalias() += xM * dcolM.transpose();
            }
            if (xn.requires_grad) {
                Tensor& gx = xn.ensure_grad();
                MapRM gxM(gx.data() + static_cast<long long>(n) * Cin * HW, Cin, HW);
                CMapRM Wm2(wn.value.data(), Cin, K2);
                gxM.noalias() += Wm2 * dcolM;
            }
        }
    });
}

/// Instance normalization with affine parameters gamma[C], beta[C].
/// Statistics are per (sample, channel) at both train and eval time.
inline Var instance_norm(const Var& x, const Var& gamma, const Var& beta, double eps = 1e-5) {
    const Tensor& xv = x->value;
    check(xv.ndim() == 4, "instance_norm: expects NCHW");
    const int N = xv.dim(0), C = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
    check(gamma->value.numel() == C && beta->value.numel() == C, "instance_norm: affine size mismatch");
    const long long HW = static_cast<long long>(H) * W;

    auto xhat = std::make_shared<Tensor>(Tensor::zeros({N, C, H, W}));
    auto invstd = std::make_shared<Tensor>(Tensor::zeros({N, C}));
    Tensor out({N, C, H, W});
    const double* gd = gamma->value.data();
    const double* bd = beta->value.data();
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c) {
            const double* xp = xv.data() + (static_cast<long long>(n) * C + c) * HW;
            double m = 0.0;
            for (long long i = 0; i < HW; ++i) m += xp[i];
            m /= static_cast<double>(HW);
            double v = 0.0;
            for (long long i = 0; i < HW; ++i) {
                const double d = xp[i] - m;
                v += d * d;
            }
            v /= static_cast<double>(HW);
            const double is = 1.0 / std::sqrt(v + eps);
            (*invstd)[static_cast<long long>(n) * C + c] = is;
            double* xh = xhat->data() + (static_cast<long long>(n) * C + c) * HW;
            double* op = out.data() + (static_cast<long long>(n) * C + c) * HW;
            for (long long i = 0; i < HW; ++i) {
                xh[i] = (xp[i] - m) * is;
                op[i] = gd[c] * xh[i] + bd[c];
            }
        }

    return make_op(std::move(out), {x, gamma, beta}, [xhat, invstd, N, C, HW](Node& self) {
        Node& xn = *self.inputs[0];
        Node& gn = *self.inputs[1];
        Node& bn = *self.inputs[2];
        const Tensor& g = self.grad;
        if (bn.requires_grad) {
            Tensor& gb = bn.ensure_grad();
            for (int n = 0; n < N; ++n)
                for (int c = 0; c < C; ++c) {
                    const double* gp = g.data() + (static_cast<long long>(n) * C + c) * HW;
                    double acc = 0.0;
                    for (long long i = 0; i < HW; ++i) acc += gp[i];
                    gb[c] += acc;
                }
        }
        if (gn.requires_grad) {
            Tensor& gg = gn.ensure_grad();
            for (int n = 0; n < N; ++n)
                for (int c = 0; c < C; ++c) {
                    const double* gp = g.data() + (static_cast<long long>(n) * C + c) * HW;
                    const double* xh = xhat->data() + (static_cast<long long>(n) * C + c) * HW;
                    double acc = 0.0;
                    for (long long i = 0; i < HW; ++i) acc += gp[i] * xh[i];
                    gg[c] += acc;
                }
        }
        if (xn.requires_grad) {
            Tensor& gx = xn.ensure_grad();
            const double* gamma_d = gn.value.data();
            for (int n = 0; n < N; ++n)
                for (int c = 0; c < C; ++c) {
                    const double* gp = g.data() + (static_cast<long long>(n) * C + c) * HW;
                    const double* xh = xhat->data() + (static_cast<long long>(n) * C + c) * HW;
                    double* gxp = gx.data() + (static_cast<long long>(n) * C + c) * HW;
                    const double is = (*invstd)[static_cast<long long>(n) * C + c];
                    const double gam = gamma_d[c];
                    double sum_g = 0.0, sum_gx = 0.0;
                    for (long long i = 0; i < HW; ++i) {
                        sum_g += gp[i];
                        sum_gx += gp[i] * xh[i];
                    }
                    const double mg = sum_g / static_cast<double>(HW);
                    const double mgx = sum_gx / static_cast<double>(HW);
                    for (long long i = 0; i < HW; ++i)
                        gxp[i] += gam * is * (gp[i] - mg - xh[i] * mgx);
                }
        }
    });
}

/// linear: x[N,K] * w[F,K]^T + b[F].
inline Var linear(const Var& x, const Var& w, const Var& b) {
    const int N = x->value.dim(0), K = x->value.dim(1);
    const int F = w->value.dim(0);
    check(w->value.ndim() == 2 && w->value.dim(1) == K, "linear: weight shape mismatch");
    check(b->value.numel() == F, "linear: bias size mismatch");
    Tensor out({N, F});
    CMapRM xM(x->value.data(), N, K);
    CMapRM wM(w->value.data(), F, K);
    MapRM oM(out.data(), N, F);
    oM.noalias() = xM * wM.transpose();
    const double* bd = b->value.data();
    for (int n = 0; n < N; ++n)
        for (int f = 0; f < F; ++f) out[static_cast<long long>(n) * F + f] += bd[f];
    return make_op(std::move(out), {x, w, b}, [N, K, F](Node& self) {
        Node& xn = *self.inputs[0];
        Node& wn = *self.inputs[1];
        Node& bn = *self.inputs[2];
        CMapRM gM(self.grad.data(), N, F);
        if (bn.requires_grad) {
            Tensor& gb = bn.ensure_grad();
            for (int n = 0; n < N; ++n)
                for (int f = 0; f < F; ++f) gb[f] += self.grad[static_cast<long long>(n) * F + f];
        }
        if (wn.requires_grad) {
            Tensor& gw = wn.ensure_grad();
            MapRM gwM(gw.data(), F, K);
            CMapRM xM2(xn.value.data(), N, K);
            gwM.noalias() += gM.transpose() * xM2;
        }
        if (xn.requires_grad) {
            Tensor& gx = xn.ensure_grad();
            MapRM gxM(gx.data(), N, K);
            CMapRM wM2(wn.value.data(), F, K);
            gxM.noalias() += gM * wM2;
        }
    });
}

/// Batched matmul. a[G,n,k]; b[G,k,m] (transpose_b=false) or b[G,m,k]
/// (transpose_b=true). Result [G,n,m].
inline Var bmm(const Var& a, const Var& b, bool transpose_b = false) {
    const Tensor& av = a->value;
    const Tensor& bv = b->value;
    check(av.ndim() == 3 && bv.ndim() == 3 && av.dim(0) == bv.dim(0), "bmm: expects [G,*,*] pair");
    const int G = av.dim(0), n = av.dim(1), k = av.dim(2);
    const int m = transpose_b ? bv.dim(1) : bv.dim(2);
    check(transpose_b ? bv.dim(2) == k : bv.dim(1) == k, "bmm: inner dimension mismatch");
    Tensor out({G, n, m});
    for (int g = 0; g < G; ++g) {
        CMapRM aM(av.data() + static_cast<long long>(g) * n * k, n, k);
        MapRM oM(out.data() + static_cast<long long>(g) * n * m, n, m);
        if (transpose_b) {
            CMapRM bM(bv.data() + static_cast<long long>(g) * m * k, m, k);
            oM.noalias() = aM * bM.transpose();
        } else {
            CMapRM bM(bv.data() + static_cast<long long>(g) * k * m, k, m);
            oM.noalias() = aM * bM;
        }
    }
    return make_op(std::move(out), {a, b}, [G, n, k, m, transpose_b](Node& self) {
        Node& an = *self.inputs[0];
        Node& bn = *self.inputs[1];
        for (int g = 0; g < G; ++g) {
            CMapRM gM(self.grad.data() + static_cast<long long>(g) * n * m, n, m);
            if (transpose_b) {
                CMapRM bM(bn.value.data() + static_cast<long long>(g) * m * k, m, k);
                CMapRM aM(an.value.data() + static_cast<long long>(g) * n * k, n, k);
                if (an.requires_grad) {
                    MapRM gaM(an.ensure_grad().data() + static_cast<long long>(g) * n * k, n, k);
                    gaM.noalias() += gM * bM;
                }
                if (bn.requires_grad) {
                    MapRM gbM(bn.ensure_grad().data() + static_cast<long long>(g) * m * k, m, k);
                    gbM.noalias() += gM.transpose() * aM;
                }
            } else {
                CMapRM bM(bn.value.data() + static_cast<long long>(g) * k * m, k, m);
                CMapRM aM(an.value.data() + static_cast<long long>(g) * n * k, n, k);
                if (an.requires_grad) {
                    MapRM gaM(an.ensure_grad().data() + static_cast<long long>(g) * n * k, n, k);
                    gaM.noalias() += gM * bM.transpose();
                }
                if (bn.requires_grad) {
                    MapRM gbM(bn.ensure_grad().data() + static_cast<long long>(g) * k * m, k, m);
                    gbM.noalias() += aM.transpose() * gM;
                }
            }
        }
    });
}

/// Softmax over the last dimension.
inline Var softmax_lastdim(const Var& x) {
    const Tensor& xv = x->value;
    check(xv.ndim() >= 1, "softmax: empty shape");
    const int m = xv.dim(xv.ndim() - 1);
    const long long rows = xv.numel() / m;
    Tensor out(xv.shape());
    for (long long r = 0; r < rows; ++r) {
        const double* xp = xv.data() + r * m;
        double* op = out.data() + r * m;
        double mx = xp[0];
        for (int i = 1; i < m; ++i) mx = std::max(mx, xp[i]);
        double z = 0.0;
        for (int i = 0; i < m; ++i) {
            op[i] = std::exp(xp[i] - mx);
            z += op[i];
        }
        const double iz = 1.0 / z;
        for (int i = 0; i < m; ++i) op[i] *= iz;
    }
    return make_op(std::move(out), {x}, [m, rows](Node& self) {
        Node& xn = *self.inputs[0];
        if (!xn.requires_grad) return;
        Tensor& gx = xn.ensure_grad();
        for (long long r = 0; r < rows; ++r) {
            const double* y = self.value.data() + r * m;
            const double* g = self.grad.data() + r * m;
            double* gp = gx.data() + r * m;
            double dot = 0.0;
            for (int i = 0; i < m; ++i) dot += g[i] * y[i];
            for (int i = 0; i < m; ++i) gp[i] += y[i] * (g[i] - dot);
        }
    });
}

/// Adds a per-(sample, channel) bias b[N,C] to x[N,C,H,W].
inline Var add_bias_nc(const Var& x, const Var& b) {
    const Tensor& xv = x->value;
    check(xv.ndim() == 4, "add_bias_nc: expects NCHW");
    const int N = xv.dim(0), C = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
    check(b->value.ndim() == 2 && b->value.dim(0) == N && b->value.dim(1) == C,
          "add_bias_nc: bias must be [N,C]");
    const long long HW = static_cast<long long>(H) * W;
    Tensor out(xv.shape());
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c) {
            const double bv = b->value[static_cast<long long>(n) * C + c];
            const double* xp = xv.data() + (static_cast<long long>(n) * C + c) * HW;
            double* op = out.data() + (static_cast<long long>(n) * C + c) * HW;
            for (long long i = 0; i < HW; ++i) op[i] = xp[i] + bv;
        }
    return make_op(std::move(out), {x, b}, [N, C, HW](Node& self) {
        Node& xn = *self.inputs[0];
        Node& bn = *self.inputs[1];
        if (xn.requires_grad) accumulate(xn.ensure_grad(), self.grad);
        if (bn.requires_grad) {
            Tensor& gb = bn.ensure_grad();
            for (int n = 0; n < N; ++n)
                for (int c = 0; c < C; ++c) {
                    const double* gp = self.grad.data() + (static_cast<long long>(n) * C + c) * HW;
                    double acc = 0.0;
                    for (long long i = 0; i < HW; ++i) acc += gp[i];
                    gb[static_cast<long long>(n) * C + c] += acc;
                }
        }
    });
}

/// Gathers non-overlapping KxK tiles of x[N,C,H,W] into token regions
/// [G, K*K, C], regions row-major over (n, tile_row, tile_col), tokens
/// row-major inside each tile.
inline Var im2regions(const Var& x, int K) {
    const Tensor& xv = x->value;
    check(xv.ndim() == 4, "im2regions: expects NCHW");
    const int N = xv.dim(0), C = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
    check(K > 0 && H % K == 0 && W % K == 0, "im2regions: spatial size not divisible by region size");
    const int GH = H / K, GW = W / K;
    const int G = N * GH * GW, T = K * K;
    Tensor out({G, T, C});
    for (int n = 0; n < N; ++n)
        for (int gh = 0; gh < GH; ++gh)
            for (int gw = 0; gw < GW; ++gw) {
                const int g = (n * GH + gh) * GW + gw;
                for (int t = 0; t < T; ++t) {
                    const int h = gh * K + t / K, w = gw * K + t % K;
                    for (int c = 0; c < C; ++c)
                        out[(static_cast<long long>(g) * T + t) * C + c] = xv.at4(n, c, h, w);
                }
            }
    return make_op(std::move(out), {x}, [N, C, H, W, K](Node& self) {
        Node& xn = *self.inputs[0];
        if (!xn.requires_grad) return;
        Tensor& gx = xn.ensure_grad();
        const int GH = H / K, GW = W / K, T = K * K;
        for (int n = 0; n < N; ++n)
            for (int gh = 0; gh < GH; ++gh)
                for (int gw = 0; gw < GW; ++gw) {
                    const int g = (n * GH + gh) * GW + gw;
                    for (int t = 0; t < T; ++t) {
                        const int h = gh * K + t / K, w = gw * K + t % K;
                        for (int c = 0; c < C; ++c)
                            gx.at4(n, c, h, w) += self.grad[(static_cast<long long>(g) * T + t) * C + c];
                    }
                }
    });
}

/// Exact inverse of im2regions.
inline Var regions2im(const Var& r, int N, int C, int H, int W, int K) {
    const Tensor& rv = r->value;
    const int GH = H / K, GW = W / K, T = K * K;
    check(rv.ndim() == 3 && rv.dim(0) == N * GH * GW && rv.dim(1) == T && rv.dim(2) == C,
          "regions2im: region tensor shape mismatch");
    Tensor out({N, C, H, W});
    for (int n = 0; n < N; ++n)
        for (int gh = 0; gh < GH; ++gh)
            for (int gw = 0; gw < GW; ++gw) {
                const int g = (n * GH + gh) * GW + gw;
                for (int t = 0; t < T; ++t) {
                    const int h = gh * K + t / K, w = gw * K + t % K;
                    for (int c = 0; c < C; ++c)
                        out.at4(n, c, h, w) = rv[(static_cast<long long>(g) * T + t) * C + c];
                }
            }
    return make_op(std::move(out), {r}, [N, C, H, W, K](Node& self) {
        Node& rn = *self.inputs[0];
        if (!rn.requires_grad) return;
        Tensor& gr = rn.ensure_grad();
        const int GH = H / K, GW = W / K, T = K * K;
        for (int n = 0; n < N; ++n)
            for (int gh = 0; gh < GH; ++gh)
                for (int gw = 0; gw < GW; ++gw) {
                    const int g = (n * GH + gh) * GW + gw;
                    for (int t = 0; t < T; ++t) {
                        const int h = gh * K + t / K, w = gw * K + t % K;
                        for (int c = 0; c < C; ++c)
                            gr[(static_cast<long long>(g) * T + t) * C + c] += self.grad.at4(n, c, h, w);
                    }
                }
    });
}

/// Forward difference along width with replicate boundary, so the last
/// column is zero. x[N,C,H,W].
inline Var fwd_diff_x(const Var& x) {
    const Tensor& xv = x->value;
    check(xv.ndim() == 4, "fwd_diff_x: expects NCHW");
    const int N = xv.dim(0), C = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
    Tensor out({N, C, H, W});
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c)
            for (int h = 0; h < H; ++h)
                for (int w = 0; w + 1 < W; ++w)
                    out.at4(n, c, h, w) = xv.at4(n, c, h, w + 1) - xv.at4(n, c, h, w);
    return make_op(std::move(out), {x}, [N, C, H, W](Node& self) {
        Node& xn = *self.inputs[0];
        if (!xn.requires_grad) return;
        Tensor& gx = xn.ensure_grad();
        for (int n = 0; n < N; ++n)
            for (int c = 0; c < C; ++c)
                for (int h = 0; h < H; ++h)
                    for (int w = 0; w + 1 < W; ++w) {
                        const double g = self.grad.at4(n, c, h, w);
                        gx.at4(n, c, h, w + 1) += g;
                        gx.at4(n, c, h, w) -= g;
                    }
    });
}

/// Forward difference along height with replicate boundary (last row zero).
inline Var fwd_diff_y(const Var& x) {
    const Tensor& xv = x->value;
    check(xv.ndim() == 4, "fwd_diff_y: expects NCHW");
    const int N = xv.dim(0), C = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
    Tensor out({N, C, H, W});
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c)
            for (int h = 0; h + 1 < H; ++h)
                for (int w = 0; w < W; ++w)
                    out.at4(n, c, h, w) = xv.at4(n, c, h + 1, w) - xv.at4(n, c, h, w);
    return make_op(std::move(out), {x}, [N, C, H, W](Node& self) {
        Node& xn = *self.inputs[0];
        if (!xn.requires_grad) return;
        Tensor& gx = xn.ensure_grad();
        for (int n = 0; n < N; ++n)
            for (int c = 0; c < C; ++c)
                for (int h = 0; h + 1 < H; ++h)
                    for (int w = 0; w < W; ++w) {
                        const double g = self.grad.at4(n, c, h, w);
                        gx.at4(n, c, h + 1, w) += g;
                        gx.at4(n, c, h, w) -= g;
                    }
    });
}

/// Clamp with pass-through gradient inside [lo,hi] and zero outside.
inline Var clamp_v(const Var& x, double lo, double hi) {
    return detail::unary_op(
        x, [lo, hi](double v) { return std::min(std::max(v, lo), hi); },
        [lo, hi](double v, double) { return (v >= lo && v <= hi) ? 1.0 : 0.0; });
}

/// Broadcast multiply x[N,C,H,W] by mask[N,1,H,W].
inline Var mul_mask(const Var& x, const Var& mask) {
    const Tensor& xv = x->value;
    const Tensor& mv = mask->value;
    check(xv.ndim() == 4 && mv.ndim() == 4 && mv.dim(1) == 1 && mv.dim(0) == xv.dim(0) &&
              mv.dim(2) == xv.dim(2) && mv.dim(3) == xv.dim(3),
          "mul_mask: mask must be [N,1,H,W] matching x");
    const int N = xv.dim(0), C = xv.dim(1);
    const long long HW = static_cast<long long>(xv.dim(2)) * xv.dim(3);
    Tensor out(xv.shape());
    for (int n = 0; n < N; ++n) {
        const double* mp = mv.data() + static_cast<long long>(n) * HW;
        for (int c = 0; c < C; ++c) {
            const double* xp = xv.data() + (static_cast<long long>(n) * C + c) * HW;
            double* op = out.data() + (static_cast<long long>(n) * C + c) * HW;
            for (long long i = 0; i < HW; ++i) op[i] = xp[i] * mp[i];
        }
    }
    return make_op(std::move(out), {x, mask}, [N, C, HW](Node& self) {
        Node& xn = *self.inputs[0];
        Node& mn = *self.inputs[1];
        if (xn.requires_grad) {
            Tensor& gx = xn.ensure_grad();
            for (int n = 0; n < N; ++n) {
                const double* mp = mn.value.data() + static_cast<long long>(n) * HW;
                for (int c = 0; c < C; ++c) {
                    const double* gp = self.grad.data() + (static_cast<long long>(n) * C + c) * HW;
                    double* gxp = gx.data() + (static_cast<long long>(n) * C + c) * HW;
                    for (long long i = 0; i < HW; ++i) gxp[i] += gp[i] * mp[i];
                }
            }
        }
        if (mn.requires_grad) {
            Tensor& gm = mn.ensure_grad();
            for (int n = 0; n < N; ++n) {
                double* gmp = gm.data() + static_cast<long long>(n) * HW;
                for (int c = 0; c < C; ++c) {
                    const double* gp = self.grad.data() + (static_cast<long long>(n) * C + c) * HW;
                    const double* xp = xn.value.data() + (static_cast<long long>(n) * C + c) * HW;
                    for (long long i = 0; i < HW; ++i) gmp[i] += gp[i] * xp[i];
                }
            }
        }
    });
}

/// Bilinear resampling of f[N,C,H,W] at (w + offx, h + offy), coordinates
/// clamped to the feature extent. off[N,2,H,W]: channel 0 is the x (width)
/// offset, channel 1 the y (height) offset, in pixels. Zero offsets return f
/// exactly. Offset gradients are zero where a coordinate is clamped.
inline Var bilinear_sample(const Var& f, const Var& off) {
    const Tensor& fv = f->value;
    const Tensor& ov = off->value;
    check(fv.ndim() == 4 && ov.ndim() == 4, "bilinear_sample: expects NCHW inputs");
    const int N = fv.dim(0), C = fv.dim(1), H = fv.dim(2), W = fv.dim(3);
    check(ov.dim(0) == N && ov.dim(1) == 2 && ov.dim(2) == H && ov.dim(3) == W,
          "bilinear_sample: offsets must be [N,2,H,W]");
    check(ov.all_finite(), "bilinear_sample: non-finite offsets");

    Tensor out({N, C, H, W});
    for (int n = 0; n < N; ++n)
        for (int h = 0; h < H; ++h)
            for (int w = 0; w < W; ++w) {
                double sx = w + ov.at4(n, 0, h, w);
                double sy = h + ov.at4(n, 1, h, w);
                sx = std::min(std::max(sx, 0.0), static_cast<double>(W - 1));
                sy = std::min(std::max(sy, 0.0), static_cast<double>(H - 1));
                const int x0 = static_cast<int>(std::floor(sx));
                const int y0 = static_cast<int>(std::floor(sy));
                const int x1 = std::min(x0 + 1, W - 1);
                const int y1 = std::min(y0 + 1, H - 1);
                const double fx = sx - x0, fy = sy - y0;
                for (int c = 0; c < C; ++c) {
                    const double v00 = fv.at4(n, c, y0, x0), v01 = fv.at4(n, c, y0, x1);
                    const double v10 = fv.at4(n, c, y1, x0), v11 = fv.at4(n, c, y1, x1);
                    out.at4(n, c, h, w) =
                        (1.0 - fy) * ((1.0 - fx) * v00 + fx * v01) + fy * ((1.0 - fx) * v10 + fx * v11);
                }
            }

    return make_op(std::move(out), {f, off}, [N, C, H, W](Node& self) {
        Node& fn = *self.inputs[0];
        Node& on = *self.inputs[1];
        const Tensor& fv2 = fn.value;
        const Tensor& ov2 = on.value;
        Tensor* gf = fn.requires_grad ? &fn.ensure_grad() : nullptr;
        Tensor* go = on.requires_grad ? &on.ensure_grad() : nullptr;
        for (int n = 0; n < N; ++n)
            for (int h = 0; h < H; ++h)
                for (int w = 0; w < W; ++w) {
                    double rx = w + ov2.at4(n, 0, h, w);
                    double ry = h + ov2.at4(n, 1, h, w);
                    const bool cx = rx < 0.0 || rx > static_cast<double>(W - 1);
                    const bool cy = ry < 0.0 || ry > static_cast<double>(H - 1);
                    const double sx = std::min(std::max(rx, 0.0), static_cast<double>(W - 1));
                    const double sy = std::min(std::max(ry, 0.0), static_cast<double>(H - 1));
                    const int x0 = static_cast<int>(std::floor(sx));
                    const int y0 = static_cast<int>(std::floor(sy));
                    const int x1 = std::min(x0 + 1, W - 1);
                    const int y1 = std::min(y0 + 1, H - 1);
                    const double fx = sx - x0, fy = sy - y0;
                    double dsx = 0.0, dsy = 0.0;
                    for (int c = 0; c < C; ++c) {
                        const double g = self.grad.at4(n, c, h, w);
                        if (g == 0.0 && !go) continue;
                        const double v00 = fv2.at4(n, c, y0, x0), v01 = fv2.at4(n, c, y0, x1);
                        const double v10 = fv2.at4(n, c, y1, x0), v11 = fv2.at4(n, c, y1, x1);
                        if (gf) {
                            gf->at4(n, c, y0, x0) += g * (1.0 - fy) * (1.0 - fx);
                            gf->at4(n, c, y0, x1) += g * (1.0 - fy) * fx;
                            gf->at4(n, c, y1, x0) += g * fy * (1.0 - fx);
                            gf->at4(n, c, y1, x1) += g * fy * fx;
                        }
                        dsx += g * ((1.0 - fy) * (v01 - v00) + fy * (v11 - v10));
                        dsy += g * ((1.0 - fx) * (v10 - v00) + fx * (v11 - v01));
                    }
                    if (go) {
                        if (!cx) go->at4(n, 0, h, w) += dsx;
                        if (!cy) go->at4(n, 1, h, w) += dsy;
                    }
                }
    });
}

}  // namespace umbra::ad

#endif  // UMBRA_NN_OPS_HPP
