// SPDX-License-Identifier: Apache-2.0
// Copyright Contributors to the Umbra Project.

#ifndef UMBRA_OPTIM_HPP
#define UMBRA_OPTIM_HPP

#include <cmath>
#include <vector>

#include "umbra/autodiff.hpp"

namespace umbra::optim {

/// Adam with bias correction. Parameters whose grad was never touched in the
/// current step are skipped entirely (moments frozen), matching the usual
/// convention for absent gradients.
class Adam {
public:
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;

    explicit Adam(std::vector<ad::Var> params, double beta1_ = 0.9, double beta2_ = 0.999)
        : beta1(beta1_), beta2(beta2_), params_(std::move(params)) {
        slots_.reserve(params_.size());
        for (const auto& p : params_)
            slots_.push_back({Tensor::zeros(p->value.shape()), Tensor::zeros(p->value.shape())});
    }

    void step(double lr) {
        ++t_;
        const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(t_));
        const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(t_));
        for (std::size_t i = 0; i < params_.size(); ++i) {
            ad::Node& p = *params_[i];
            if (!p.grad_ready) continue;
            double* pv = p.value.data();
            const double* g = p.grad.data();
            double* m = slots_[i].m.data();
            double* v = slots_[i].v.data();
            const long long n = p.value.numel();
            for (long long j = 0; j < n; ++j) {
                m[j] = beta1 * m[j] + (1.0 - beta1) * g[j];
                v[j] = beta2 * v[j] + (1.0 - beta2) * g[j] * g[j];
                const double mhat = m[j] / bc1;
                const double vhat = v[j] / bc2;
                pv[j] -= lr * mhat / (std::sqrt(vhat) + eps);
            }
        }
    }

    long long step_count() const { return t_; }
    void set_step_count(long long t) { t_ = t; }

    std::size_t slot_count() const { return slots_.size(); }
    Tensor& slot_m(std::size_t i) { return slots_[i].m; }
    Tensor& slot_v(std::size_t i) { return slots_[i].v; }

private:
    struct Slot {
        Tensor m, v;
    };
    std::vector<ad::Var> params_;
    std::vector<Slot> slots_;
    long long t_ = 0;
};

/// Linear warmup to the peak rate over the first `warmup_frac` of training,
/// then cosine decay to zero. Continuous at the junction.
inline double lr_at(long long step, long long total_steps, double peak, double warmup_frac = 0.05) {
    if (total_steps <= 0) return peak;
    long long warm = static_cast<long long>(std::llround(warmup_frac * static_cast<double>(total_steps)));
    if (warm < 1) warm = 1;
    if (warm >= total_steps) warm = total_steps;
    if (step < warm) return peak * static_cast<double>(step + 1) / static_cast<double>(warm);
    const long long tail = total_steps - warm;
    if (tail <= 0) return peak;
    const double u = static_cast<double>(step - warm) / static_cast<double>(tail);
    return 0.5 * peak * (1.0 + std::cos(3.14159265358979323846 * u));
}

}  // namespace umbra::optim

#endif  // UMBRA_OPTIM_HPP
