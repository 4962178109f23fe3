// SPDX-License-Identifier: Apache-2.0
// Copyright Contributors to the Umbra Project.

#ifndef UMBRA_AUTODIFF_HPP
#define UMBRA_AUTODIFF_HPP

#include <functional>
#include <memory>
#include <unordered_set>
#include <utility>
#include <vector>

#include "umbra/tensor.hpp"

namespace umbra::ad {

struct Node;
using Var = std::shared_ptr<Node>;

/// One value in the dynamic compute graph. The graph is built op by op and
/// torn down when the root goes out of scope; parameter leaves outlive it.
struct Node {
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    bool grad_ready = false;
    std::vector<Var> inputs;
    std::function<void(Node&)> backprop;

    Tensor& ensure_grad() {
        if (!grad_ready) {
            grad = Tensor::zeros(value.shape());
            grad_ready = true;
        }
        return grad;
    }
};

inline bool& grad_mode() {
    thread_local bool enabled = true;
    return enabled;
}

/// Disables graph construction in a scope (inference, frozen feature
/// extraction, sampling).
struct NoGradGuard {
    bool prev;
    NoGradGuard() : prev(grad_mode()) { grad_mode() = false; }
    ~NoGradGuard() { grad_mode() = prev; }
};

inline Var constant(Tensor v) {
    auto n = std::make_shared<Node>();
    n->value = std::move(v);
    return n;
}

/// Trainable leaf.
inline Var param(Tensor v) {
    auto n = std::make_shared<Node>();
    n->value = std::move(v);
    n->requires_grad = true;
    return n;
}

inline bool any_requires(const std::vector<Var>& xs) {
    for (const auto& x : xs)
        if (x->requires_grad) return true;
    return false;
}

/// Builds an op node; collapses to a constant when grad mode is off or no
/// input needs gradients.
inline Var make_op(Tensor value, std::vector<Var> inputs, std::function<void(Node&)> backprop) {
    if (!grad_mode() || !any_requires(inputs)) return constant(std::move(value));
    auto n = std::make_shared<Node>();
    n->value = std::move(value);
    n->requires_grad = true;
    n->inputs = std::move(inputs);
    n->backprop = std::move(backprop);
    return n;
}

inline void accumulate(Tensor& dst, const Tensor& src) {
    double* d = dst.data();
    const double* s = src.data();
    const long long n = dst.numel();
    for (long long i = 0; i < n; ++i) d[i] += s[i];
}

/// Reverse pass from a scalar root. Seeds d(root)/d(root) = 1 and propagates
/// through the graph in reverse topological order.
inline void backward(const Var& root) {
    check(root->value.numel() == 1, "backward: root must be scalar");
    if (!root->requires_grad) return;

    std::vector<Node*> order;
    std::unordered_set<Node*> seen;
    std::vector<std::pair<Node*, std::size_t>> stack;
    stack.emplace_back(root.get(), 0);
    seen.insert(root.get());
    while (!stack.empty()) {
        auto& [node, idx] = stack.back();
        if (idx < node->inputs.size()) {
            Node* child = node->inputs[idx++].get();
            if (child->requires_grad && !seen.count(child)) {
                seen.insert(child);
                stack.emplace_back(child, 0);
            }
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }

    root->ensure_grad();
    root->grad[0] = 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* n = *it;
        if (n->backprop && n->grad_ready) n->backprop(*n);
    }
}

inline void zero_grad(const std::vector<Var>& params) {
    for (const auto& p : params) {
        p->grad_ready = false;
        p->grad = Tensor();
    }
}

// ── elementwise ─────────────────────────────────────────────────────

namespace detail {

template <class FwdFn, class BwdFn>
Var unary_op(const Var& x, FwdFn fwd, BwdFn dfdx_from_xy) {
    Tensor out(x->value.shape());
    const double* xv = x->value.data();
    double* ov = out.data();
    const long long n = out.numel();
    for (long long i = 0; i < n; ++i) ov[i] = fwd(xv[i]);
    return make_op(std::move(out), {x}, [dfdx_from_xy](Node& self) {
        Node& a = *self.inputs[0];
        if (!a.requires_grad) return;
        Tensor& ga = a.ensure_grad();
        const double* g = self.grad.data();
        const double* xv2 = a.value.data();
        const double* yv = self.value.data();
        double* out2 = ga.data();
        const long long m = self.value.numel();
        for (long long i = 0; i < m; ++i) out2[i] += g[i] * dfdx_from_xy(xv2[i], yv[i]);
    });
}

}  // namespace detail

inline void check_same_shape(const Var& a, const Var& b, const char* op) {
    check(a->value.same_shape(b->value),
          std::string(op) + ": shape mismatch " + a->value.shape_str() + " vs " + b->value.shape_str());
}

inline Var add(const Var& a, const Var& b) {
    check_same_shape(a, b, "add");
    Tensor out(a->value.shape());
    const long long n = out.numel();
    for (long long i = 0; i < n; ++i) out[i] = a->value[i] + b->value[i];
    return make_op(std::move(out), {a, b}, [](Node& self) {
        for (int k = 0; k < 2; ++k) {
            Node& in = *self.inputs[k];
            if (in.requires_grad) accumulate(in.ensure_grad(), self.grad);
        }
    });
}

inline Var sub(const Var& a, const Var& b) {
    check_same_shape(a, b, "sub");
    Tensor out(a->value.shape());
    const long long n = out.numel();
    for (long long i = 0; i < n; ++i) out[i] = a->value[i] - b->value[i];
    return make_op(std::move(out), {a, b}, [](Node& self) {
        Node& a2 = *self.inputs[0];
        Node& b2 = *self.inputs[1];
        if (a2.requires_grad) accumulate(a2.ensure_grad(), self.grad);
        if (b2.requires_grad) {
            Tensor& gb = b2.ensure_grad();
            const long long m = self.grad.numel();
            for (long long i = 0; i < m; ++i) gb[i] -= self.grad[i];
        }
    });
}

inline Var mul(const Var& a, const Var& b) {
    check_same_shape(a, b, "mul");
    Tensor out(a->value.shape());
    const long long n = out.numel();
    for (long long i = 0; i < n; ++i) out[i] = a->value[i] * b->value[i];
    return make_op(std::move(out), {a, b}, [](Node& self) {
        Node& a2 = *self.inputs[0];
        Node& b2 = *self.inputs[1];
        const long long m = self.grad.numel();
        if (a2.requires_grad) {
            Tensor& ga = a2.ensure_grad();
            for (long long i = 0; i < m; ++i) ga[i] += self.grad[i] * b2.value[i];
        }
        if (b2.requires_grad) {
            Tensor& gb = b2.ensure_grad();
            for (long long i = 0; i < m; ++i) gb[i] += self.grad[i] * a2.value[i];
        }
    });
}

inline Var add_scalar(const Var& a, double s) {
    Tensor out(a->value.shape());
    const long long n = out.numel();
    for (long long i = 0; i < n; ++i) out[i] = a->value[i] + s;
    return make_op(std::move(out), {a}, [](Node& self) {
        Node& a2 = *self.inputs[0];
        if (a2.requires_grad) accumulate(a2.ensure_grad(), self.grad);
    });
}

inline Var mul_scalar(const Var& a, double s) {
    Tensor out(a->value.shape());
    const long long n = out.numel();
    for (long long i = 0; i < n; ++i) out[i] = a->value[i] * s;
    return make_op(std::move(out), {a}, [s](Node& self) {
        Node& a2 = *self.inputs[0];
        if (!a2.requires_grad) return;
        Tensor& ga = a2.ensure_grad();
        const long long m = self.grad.numel();
        for (long long i = 0; i < m; ++i) ga[i] += self.grad[i] * s;
    });
}

inline Var neg(const Var& a) { return mul_scalar(a, -1.0); }

inline Var exp_v(const Var& x) {
    return detail::unary_op(x, [](double v) { return std::exp(v); },
                            [](double, double y) { return y; });
}

inline Var abs_v(const Var& x) {
    return detail::unary_op(x, [](double v) { return std::fabs(v); },
                            [](double v, double) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); });
}

inline Var relu(const Var& x) {
    return detail::unary_op(x, [](double v) { return v > 0.0 ? v : 0.0; },
                            [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

inline Var leaky_relu(const Var& x, double slope = 0.2) {
    return detail::unary_op(x, [slope](double v) { return v > 0.0 ? v : slope * v; },
                            [slope](double v, double) { return v > 0.0 ? 1.0 : slope; });
}

inline Var sigmoid_v(const Var& x) {
    return detail::unary_op(x, [](double v) { return 1.0 / (1.0 + std::exp(-v)); },
                            [](double, double y) { return y * (1.0 - y); });
}

inline Var tanh_v(const Var& x) {
    return detail::unary_op(x, [](double v) { return std::tanh(v); },
                            [](double, double y) { return 1.0 - y * y; });
}

inline Var silu(const Var& x) {
    return detail::unary_op(x, [](double v) { return v / (1.0 + std::exp(-v)); },
                            [](double v, double) {
                                const double s = 1.0 / (1.0 + std::exp(-v));
                                return s * (1.0 + v * (1.0 - s));
                            });
}

inline Var square(const Var& x) {
    return detail::unary_op(x, [](double v) { return v * v; },
                            [](double v, double) { return 2.0 * v; });
}

// ── reductions ──────────────────────────────────────────────────────

inline Var sum_all(const Var& x) {
    Tensor out = Tensor::scalar(x->value.sum());
    return make_op(std::move(out), {x}, [](Node& self) {
        Node& a = *self.inputs[0];
        if (!a.requires_grad) return;
        Tensor& ga = a.ensure_grad();
        const double g = self.grad[0];
        const long long m = ga.numel();
        for (long long i = 0; i < m; ++i) ga[i] += g;
    });
}

inline Var mean_all(const Var& x) {
    const double inv = 1.0 / static_cast<double>(x->value.numel());
    Tensor out = Tensor::scalar(x->value.sum() * inv);
    return make_op(std::move(out), {x}, [inv](Node& self) {
        Node& a = *self.inputs[0];
        if (!a.requires_grad) return;
        Tensor& ga = a.ensure_grad();
        const double g = self.grad[0] * inv;
        const long long m = ga.numel();
        for (long long i = 0; i < m; ++i) ga[i] += g;
    });
}

/// Mean absolute difference over all elements.
inline Var l1_mean(const Var& a, const Var& b) { return mean_all(abs_v(sub(a, b))); }

// ── shape ops ───────────────────────────────────────────────────────

inline Var reshape(const Var& x, std::vector<int> shape) {
    Tensor out = x->value.reshaped(shape);
    return make_op(std::move(out), {x}, [](Node& self) {
        Node& a = *self.inputs[0];
        if (!a.requires_grad) return;
        Tensor& ga = a.ensure_grad();
        accumulate(ga, self.grad.reshaped(a.value.shape()));
    });
}

/// Concatenate NCHW tensors along the channel axis.
inline Var concat_ch(const std::vector<Var>& xs) {
    check(!xs.empty(), "concat_ch: empty input list");
    const int N = xs[0]->value.dim(0), H = xs[0]->value.dim(2), W = xs[0]->value.dim(3);
    int Ctot = 0;
    for (const auto& x : xs) {
        check(x->value.ndim() == 4 && x->value.dim(0) == N && x->value.dim(2) == H && x->value.dim(3) == W,
              "concat_ch: incompatible shapes");
        Ctot += x->value.dim(1);
    }
    Tensor out({N, Ctot, H, W});
    const long long plane = static_cast<long long>(H) * W;
    long long coff = 0;
    for (const auto& x : xs) {
        const int C = x->value.dim(1);
        for (int n = 0; n < N; ++n) {
            const double* src = x->value.data() + static_cast<long long>(n) * C * plane;
            double* dst = out.data() + (static_cast<long long>(n) * Ctot + coff) * plane;
            std::copy(src, src + static_cast<long long>(C) * plane, dst);
        }
        coff += C;
    }
    return make_op(std::move(out), xs, [N, H, W, Ctot](Node& self) {
        const long long plane = static_cast<long long>(H) * W;
        long long coff2 = 0;
        for (auto& xin : self.inputs) {
            const int C = xin->value.dim(1);
            if (xin->requires_grad) {
                Tensor& g = xin->ensure_grad();
                for (int n = 0; n < N; ++n) {
                    const double* src = self.grad.data() + (static_cast<long long>(n) * Ctot + coff2) * plane;
                    double* dst = g.data() + static_cast<long long>(n) * C * plane;
                    const long long cnt = static_cast<long long>(C) * plane;
                    for (long long i = 0; i < cnt; ++i) dst[i] += src[i];
                }
            }
            coff2 += C;
        }
    });
}

inline Var concat_ch(const Var& a, const Var& b) { return concat_ch(std::vector<Var>{a, b}); }

}  // namespace umbra::ad

#endif  // UMBRA_AUTODIFF_HPP
