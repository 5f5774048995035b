#pragma once

#include <cstddef>
#include <vector>

#include "metanas/tensor.hpp"

namespace metanas {

// In-place SGD over a parameter group: p -= lr * g.
void sgd_step(const std::vector<Tensor*>& params, const std::vector<Tensor>& grads, double lr);
void sgd_step_flat(std::vector<double>& params, const std::vector<double>& grads, double lr);

// Bias-corrected Adam. State is lazily sized on the first step and must be
// reused with a group of identical total length afterwards.
struct AdamState {
    std::vector<double> m;
    std::vector<double> v;
    long step = 0;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

void adam_step(AdamState& state, const std::vector<Tensor*>& params,
               const std::vector<Tensor>& grads, double lr);
void adam_step_flat(AdamState& state, std::vector<double>& params,
                    const std::vector<double>& grads, double lr);

}  // namespace metanas
