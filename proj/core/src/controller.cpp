#include "metanas/controller.hpp"

#include <cmath>

#include "metanas/tape.hpp"

namespace metanas {

namespace {

constexpr std::size_t kBitToken0 = 8;
constexpr std::size_t kStartToken = 10;
constexpr std::size_t kVocab = 11;

std::vector<double> softmax_of(const Tensor& logits_row) {
    const std::size_t n = logits_row.size();
    double m = logits_row[0];
    for (std::size_t i = 1; i < n; ++i) m = std::max(m, logits_row[i]);
    std::vector<double> p(n);
    double z = 0.0;
    for (std::size_t i = 0; i < n; ++i) z += p[i] = std::exp(logits_row[i] - m);
    for (double& v : p) v /= z;
    return p;
}

std::size_t draw_categorical(const std::vector<double>& probs, Rng& rng) {
    const double u = rng.u01();
    double acc = 0.0;
    for (std::size_t i = 0; i < probs.size(); ++i) {
        acc += probs[i];
        if (u < acc) return i;
    }
    return probs.size() - 1;
}

}  // namespace

ControllerPolicy::ControllerPolicy(ControllerConfig cfg, Rng& init_rng)
    : cfg_(cfg),
      embed_({kVocab, cfg.embed_size}),
      w_ih_({cfg.embed_size, 4 * cfg.hidden_size}),
      w_hh_({cfg.hidden_size, 4 * cfg.hidden_size}),
      lstm_bias_({4 * cfg.hidden_size}),
      op_w_({cfg.hidden_size, kNumOps}),
      op_b_({kNumOps}),
      skip_w_({cfg.hidden_size, 1}),
      skip_b_({1}) {
    if (cfg.hidden_size == 0 || cfg.embed_size == 0)
        throw ConfigError("controller: hidden and embedding sizes must be positive");
    for (std::size_t i = 0; i < embed_.size(); ++i) embed_[i] = init_rng.uniform(-0.1, 0.1);
    for (std::size_t i = 0; i < w_ih_.size(); ++i) w_ih_[i] = init_rng.uniform(-0.1, 0.1);
    for (std::size_t i = 0; i < w_hh_.size(); ++i) w_hh_[i] = init_rng.uniform(-0.1, 0.1);
    // bias and both heads start at zero: the op distribution begins uniform
}

std::vector<Tensor*> ControllerPolicy::params() {
    return {&embed_, &w_ih_, &w_hh_, &lstm_bias_, &op_w_, &op_b_, &skip_w_, &skip_b_};
}

std::vector<const Tensor*> ControllerPolicy::params() const {
    return {&embed_, &w_ih_, &w_hh_, &lstm_bias_, &op_w_, &op_b_, &skip_w_, &skip_b_};
}

std::vector<std::string> ControllerPolicy::param_names() const {
    return {"embeddings", "lstm_w_ih", "lstm_w_hh", "lstm_bias",
            "op_head_w",  "op_head_b", "skip_head_w", "skip_head_b"};
}

std::size_t ControllerPolicy::param_count() const {
    std::size_t n = 0;
    for (const Tensor* p : params()) n += p->size();
    return n;
}

struct ControllerPolicy::Unrolled {
    Tape tape;
    std::vector<Value> param_values;
    Value total_log_prob{};
    SampledDecisions decisions;
};

// Runs the decision sequence once. `forced` replays a given architecture,
// otherwise decisions are drawn from `rng`. Both modes build the identical
// node sequence, so a replayed log-prob matches the sampled one exactly.
ControllerPolicy::Unrolled ControllerPolicy::unroll(std::size_t n_layers,
                                                    const ArchitectureString* forced,
                                                    Rng* rng) const {
    if (n_layers == 0) throw ConfigError("controller: need at least one layer");
    Unrolled u;
    Tape& tape = u.tape;
    for (const Tensor* p : params()) u.param_values.push_back(tape.param(*p));
    const Value embed_v = u.param_values[0];
    const Value w_ih_v = u.param_values[1];
    const Value w_hh_v = u.param_values[2];
    const Value bias_v = u.param_values[3];
    const Value op_w_v = u.param_values[4];
    const Value op_b_v = u.param_values[5];
    const Value skip_w_v = u.param_values[6];
    const Value skip_b_v = u.param_values[7];

    LstmState state{tape.constant(Tensor({1, cfg_.hidden_size})),
                    tape.constant(Tensor({1, cfg_.hidden_size}))};
    Value x = tape.embedding_row(embed_v, kStartToken);
    bool have_total = false;
    Value total{};
    auto account = [&](Value logp) {
        u.decisions.action_log_probs.push_back(tape.value(logp)[0]);
        total = have_total ? tape.add(total, logp) : logp;
        have_total = true;
    };

    u.decisions.arch.layers.resize(n_layers);
    for (std::size_t k = 0; k < n_layers; ++k) {
        state = lstm_cell(tape, x, state, w_ih_v, w_hh_v, bias_v);
        const Value logits = tape.dense(state.h, op_w_v, op_b_v);
        std::size_t action;
        if (forced) {
            action = static_cast<std::size_t>(forced->layers[k].op);
        } else {
            action = draw_categorical(softmax_of(tape.value(logits)), *rng);
        }
        u.decisions.arch.layers[k].op = static_cast<OpId>(action);
        account(tape.scale(
            tape.softmax_cross_entropy(logits, {static_cast<int>(action)}), -1.0));
        x = tape.embedding_row(embed_v, action);

        u.decisions.arch.layers[k].skips.resize(k);
        for (std::size_t j = 0; j < k; ++j) {
            state = lstm_cell(tape, x, state, w_ih_v, w_hh_v, bias_v);
            const Value s = tape.dense(state.h, skip_w_v, skip_b_v);
            std::uint8_t bit;
            if (forced) {
                bit = forced->layers[k].skips[j];
            } else {
                const double x0 = tape.value(s)[0];
                const double p1 = x0 >= 0.0 ? 1.0 / (1.0 + std::exp(-x0))
                                            : std::exp(x0) / (1.0 + std::exp(x0));
                bit = rng->bernoulli(p1) ? 1 : 0;
            }
            u.decisions.arch.layers[k].skips[j] = bit;
            const Value chosen = bit ? tape.logsigmoid(s) : tape.logsigmoid(tape.scale(s, -1.0));
            account(tape.reshape(chosen, {1}));
            x = tape.embedding_row(embed_v, kBitToken0 + bit);
        }
    }
    u.total_log_prob = total;
    u.decisions.total_log_prob = tape.value(total)[0];
    return u;
}

SampledDecisions ControllerPolicy::sample(std::size_t n_layers, Rng& rng) const {
    return unroll(n_layers, nullptr, &rng).decisions;
}

double ControllerPolicy::log_prob(const ArchitectureString& arch, long expected_layers) const {
    validate(arch);
    if (expected_layers >= 0 && arch.depth() != static_cast<std::size_t>(expected_layers))
        throw ArchError("architecture depth " + std::to_string(arch.depth()) +
                        " does not match requested " + std::to_string(expected_layers) + " layers");
    return unroll(arch.depth(), &arch, nullptr).decisions.total_log_prob;
}

LogProbGrad ControllerPolicy::log_prob_with_grad(const ArchitectureString& arch) const {
    validate(arch);
    Unrolled u = unroll(arch.depth(), &arch, nullptr);
    u.tape.backward(u.total_log_prob);
    LogProbGrad out;
    out.log_prob = u.decisions.total_log_prob;
    out.grads.reserve(u.param_values.size());
    for (Value v : u.param_values) out.grads.push_back(u.tape.grad(v));
    return out;
}

double ControllerPolicy::entropy_estimate(std::size_t n_layers, std::size_t n_samples,
                                          Rng& rng) const {
    if (n_samples == 0) throw ConfigError("entropy_estimate: need at least one sample");
    double acc = 0.0;
    for (std::size_t i = 0; i < n_samples; ++i) acc -= sample(n_layers, rng).total_log_prob;
    return acc / static_cast<double>(n_samples);
}

}  // namespace metanas
