#pragma once

#include <string>
#include <vector>

#include "metanas/rng.hpp"
#include "metanas/search_space.hpp"
#include "metanas/tensor.hpp"

namespace metanas {

struct ControllerConfig {
    std::size_t hidden_size = 100;
    std::size_t embed_size = 32;
};

// Decisions sampled for one architecture, with their log-probabilities under
// the policy that produced them.
struct SampledDecisions {
    ArchitectureString arch;
    std::vector<double> action_log_probs;  // one per decision, sampling order
    double total_log_prob = 0.0;
};

struct LogProbGrad {
    double log_prob = 0.0;
    std::vector<Tensor> grads;  // aligned with ControllerPolicy::params()
};

// Autoregressive LSTM policy over architecture strings. Per layer it emits
// one categorical op decision (8-way softmax head) followed by one Bernoulli
// decision per earlier layer (shared sigmoid head); every decision's
// embedding is the next LSTM input, the first input is a learned start
// token. Heads start at zero so the initial policy is uniform.
class ControllerPolicy {
public:
    ControllerPolicy(ControllerConfig cfg, Rng& init_rng);

    // Parameters in fixed order; names align with params().
    std::vector<Tensor*> params();
    std::vector<const Tensor*> params() const;
    std::vector<std::string> param_names() const;
    std::size_t param_count() const;

    const ControllerConfig& config() const { return cfg_; }

    SampledDecisions sample(std::size_t n_layers, Rng& rng) const;

    // log P(arch | policy). When expected_layers >= 0, the architecture
    // depth must match it (throws ArchError otherwise).
    double log_prob(const ArchitectureString& arch, long expected_layers = -1) const;
    LogProbGrad log_prob_with_grad(const ArchitectureString& arch) const;

    // Monte-Carlo estimate of the policy entropy: mean of -log P over
    // `n_samples` fresh samples.
    double entropy_estimate(std::size_t n_layers, std::size_t n_samples, Rng& rng) const;

    // Mutable access for trainers/tests.
    Tensor& embeddings() { return embed_; }
    Tensor& op_head_weight() { return op_w_; }
    Tensor& op_head_bias() { return op_b_; }
    Tensor& skip_head_weight() { return skip_w_; }
    Tensor& skip_head_bias() { return skip_b_; }

private:
    struct Unrolled;
    Unrolled unroll(std::size_t n_layers, const ArchitectureString* forced, Rng* rng) const;

    ControllerConfig cfg_;
    // Embedding rows: 8 op tokens, skip-bit 0, skip-bit 1, start token.
    Tensor embed_;            // [11, E]
    Tensor w_ih_;             // [E, 4H]
    Tensor w_hh_;             // [H, 4H]
    Tensor lstm_bias_;        // [4H]
    Tensor op_w_;             // [H, 8]
    Tensor op_b_;             // [8]
    Tensor skip_w_;           // [H, 1]
    Tensor skip_b_;           // [1]
};

// Total number of controller decisions for a depth-L architecture:
// L ops plus L(L-1)/2 skip bits.
constexpr std::size_t decision_count(std::size_t layers) {
    return layers + layers * (layers - 1) / 2;
}

}  // namespace metanas
