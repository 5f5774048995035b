#include "metanas/optim.hpp"

#include <cmath>

#include "metanas/errors.hpp"

namespace metanas {

namespace {

void check_group(std::size_t params, std::size_t grads, double lr) {
    if (lr <= 0.0) throw ConfigError("optimizer: learning rate must be positive, got " + std::to_string(lr));
    if (params != grads)
        throw ShapeError("optimizer: " + std::to_string(params) + " parameter tensors vs " +
                         std::to_string(grads) + " gradient tensors");
}

}  // namespace

void sgd_step(const std::vector<Tensor*>& params, const std::vector<Tensor>& grads, double lr) {
    check_group(params.size(), grads.size(), lr);
    for (std::size_t i = 0; i < params.size(); ++i) {
        Tensor& p = *params[i];
        const Tensor& g = grads[i];
        if (!p.same_shape(g))
            throw ShapeError("sgd_step: parameter/gradient shape mismatch at group index " +
                             std::to_string(i));
        for (std::size_t j = 0; j < p.size(); ++j) p[j] -= lr * g[j];
    }
}

void sgd_step_flat(std::vector<double>& params, const std::vector<double>& grads, double lr) {
    check_group(params.size(), grads.size(), lr);
    for (std::size_t j = 0; j < params.size(); ++j) params[j] -= lr * grads[j];
}

namespace {

void adam_update(AdamState& s, double* p, const double* g, std::size_t n, std::size_t offset,
                 double lr) {
    const double bc1 = 1.0 - std::pow(s.beta1, static_cast<double>(s.step));
    const double bc2 = 1.0 - std::pow(s.beta2, static_cast<double>(s.step));
    for (std::size_t j = 0; j < n; ++j) {
        double& m = s.m[offset + j];
        double& v = s.v[offset + j];
        m = s.beta1 * m + (1.0 - s.beta1) * g[j];
        v = s.beta2 * v + (1.0 - s.beta2) * g[j] * g[j];
        const double mhat = m / bc1;
        const double vhat = v / bc2;
        p[j] -= lr * mhat / (std::sqrt(vhat) + s.eps);
    }
}

}  // namespace

void adam_step(AdamState& state, const std::vector<Tensor*>& params,
               const std::vector<Tensor>& grads, double lr) {
    check_group(params.size(), grads.size(), lr);
    std::size_t total = 0;
    for (const Tensor* p : params) total += p->size();
    if (state.m.empty()) {
        state.m.assign(total, 0.0);
        state.v.assign(total, 0.0);
    } else if (state.m.size() != total) {
        throw ShapeError("adam_step: state sized for " + std::to_string(state.m.size()) +
                         " values, group has " + std::to_string(total));
    }
    ++state.step;
    std::size_t offset = 0;
    for (std::size_t i = 0; i < params.size(); ++i) {
        Tensor& p = *params[i];
        const Tensor& g = grads[i];
        if (!p.same_shape(g))
            throw ShapeError("adam_step: parameter/gradient shape mismatch at group index " +
                             std::to_string(i));
        adam_update(state, p.data(), g.data(), p.size(), offset, lr);
        offset += p.size();
    }
}

void adam_step_flat(AdamState& state, std::vector<double>& params,
                    const std::vector<double>& grads, double lr) {
    check_group(params.size(), grads.size(), lr);
    if (state.m.empty()) {
        state.m.assign(params.size(), 0.0);
        state.v.assign(params.size(), 0.0);
    } else if (state.m.size() != params.size()) {
        throw ShapeError("adam_step_flat: state/parameter length mismatch");
    }
    ++state.step;
    adam_update(state, params.data(), grads.data(), params.size(), 0, lr);
}

}  // namespace metanas
