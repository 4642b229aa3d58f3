#pragma once

#include <cmath>
#include <functional>
#include <vector>

#include "peftkit/tensor.hpp"

namespace peftkit::testing {

// Central finite differences in 64-bit: rebuilds the loss around each
// perturbed parameter entry and compares against the analytic gradient.
// Returns the worst relative error seen.
inline double max_grad_error(std::vector<Tensor<double>> params,
                             const std::function<Tensor<double>()>& make_loss,
                             double h = 1e-4) {
    Tensor<double> loss = make_loss();
    backward(loss);

    double worst = 0.0;
    for (auto& p : params) {
        const std::vector<double> analytic =
            p.has_grad() ? p.grad() : std::vector<double>(p.numel(), 0.0);
        for (std::size_t i = 0; i < p.numel(); ++i) {
            const double saved = p.values()[i];
            p.values_mut()[i] = saved + h;
            const double plus = make_loss().item();
            p.values_mut()[i] = saved - h;
            const double minus = make_loss().item();
            p.values_mut()[i] = saved;
            const double fd = (plus - minus) / (2.0 * h);
            const double denom = std::max({std::abs(fd), std::abs(analytic[i]), 1.0});
            worst = std::max(worst, std::abs(fd - analytic[i]) / denom);
        }
    }
    return worst;
}

} // namespace peftkit::testing
