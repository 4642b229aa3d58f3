#pragma once

#include <cmath>
#include <cstddef>
#include <vector>

#include "peftkit/error.hpp"
#include "peftkit/tensor.hpp"

namespace peftkit {

struct AdamWOptions {
    double learning_rate = 1e-3;
    double weight_decay = 0.0;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
};

// AdamW with decoupled weight decay. Decay is applied to the parameter
// directly (p -= lr * wd * p) before the moment update, so a zero-gradient
// step with wd > 0 shrinks the parameter by exactly lr * wd * p.
// Only the registered tensors are ever touched.
template <class S>
class AdamW {
public:
    AdamW(std::vector<Tensor<S>> params, AdamWOptions options)
        : params_(std::move(params)), opt_(options) {
        first_.resize(params_.size());
        second_.resize(params_.size());
        for (std::size_t i = 0; i < params_.size(); ++i) {
            if (!params_[i].requires_grad()) {
                throw UsageError("AdamW: parameter " + std::to_string(i) +
                                 " does not require gradients");
            }
            first_[i].assign(params_[i].numel(), 0.0);
            second_[i].assign(params_[i].numel(), 0.0);
        }
    }

    std::size_t step_count() const { return step_count_; }
    const AdamWOptions& options() const { return opt_; }
    const std::vector<Tensor<S>>& params() const { return params_; }

    void step() {
        ++step_count_;
        const double bc1 = 1.0 - std::pow(opt_.beta1, static_cast<double>(step_count_));
        const double bc2 = 1.0 - std::pow(opt_.beta2, static_cast<double>(step_count_));
        for (std::size_t i = 0; i < params_.size(); ++i) {
            Tensor<S>& p = params_[i];
            if (!p.has_grad()) {
                throw UsageError("AdamW: parameter " + std::to_string(i) +
                                 " has no gradient; run backward() before step()");
            }
            auto& value = p.values_mut();
            const auto& grad = p.grad();
            auto& m = first_[i];
            auto& v = second_[i];
            for (std::size_t j = 0; j < value.size(); ++j) {
                const double pj = static_cast<double>(value[j]);
                const double gj = static_cast<double>(grad[j]);
                double out = pj - opt_.learning_rate * opt_.weight_decay * pj;
                m[j] = opt_.beta1 * m[j] + (1.0 - opt_.beta1) * gj;
                v[j] = opt_.beta2 * v[j] + (1.0 - opt_.beta2) * gj * gj;
                const double mhat = m[j] / bc1;
                const double vhat = v[j] / bc2;
                out -= opt_.learning_rate * mhat / (std::sqrt(vhat) + opt_.epsilon);
                value[j] = static_cast<S>(out);
            }
        }
    }

    void zero_grad() {
        for (Tensor<S>& p : params_) {
            p.zero_grad();
        }
    }

private:
    std::vector<Tensor<S>> params_;
    AdamWOptions opt_;
    std::vector<std::vector<double>> first_;
    std::vector<std::vector<double>> second_;
    std::size_t step_count_ = 0;
};

} // namespace peftkit
