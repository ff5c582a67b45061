#pragma once

// Central finite-difference verification of reverse-mode gradients.

#include <cmath>
#include <functional>
#include <stdexcept>

#include "ctt/tensor.hpp"

namespace ctt {

// f must be deterministic and scalar-valued; x is cloned per evaluation so f
// never sees a graph-attached input twice. Returns the max relative error with
// denominator max(|analytic|, |numeric|, 1e-8).
inline double grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x,
                         double eps = 1e-5) {
    if (eps < 1e-6 || eps > 1e-3) {
        throw std::invalid_argument("grad_check: eps must be in [1e-6, 1e-3]");
    }
    Tensor xg = Tensor::from_data(x.shape(), x.data(), /*requires_grad=*/true);
    Tensor y = f(xg);
    if (!std::isfinite(y.value())) {
        throw std::runtime_error("grad_check: f(x) is not finite");
    }
    y.backward();
    const std::vector<double> analytic = xg.grad();

    double max_rel = 0.0;
    for (long i = 0; i < x.numel(); ++i) {
        Tensor xp = Tensor::from_data(x.shape(), x.data());
        Tensor xm = Tensor::from_data(x.shape(), x.data());
        xp.data()[size_t(i)] += eps;
        xm.data()[size_t(i)] -= eps;
        const double numeric = (f(xp).value() - f(xm).value()) / (2.0 * eps);
        const double a = analytic[size_t(i)];
        const double denom = std::max({std::fabs(a), std::fabs(numeric), 1e-8});
        max_rel = std::max(max_rel, std::fabs(a - numeric) / denom);
    }
    return max_rel;
}

}  // namespace ctt
