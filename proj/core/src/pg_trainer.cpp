#include "metanas/pg_trainer.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <ostream>

#include <nlohmann/json.hpp>

namespace metanas {

ReplayBuffer::ReplayBuffer(std::size_t capacity) : capacity_(capacity) {
    if (capacity == 0) throw ConfigError("replay buffer capacity must be positive");
}

void ReplayBuffer::push(Transition t) {
    if (buffer_.size() == capacity_) buffer_.pop_front();
    buffer_.push_back(std::move(t));
}

const Transition& ReplayBuffer::sample_uniform(Rng& rng) const {
    if (buffer_.empty()) throw Error("replay buffer: cannot sample from empty buffer");
    return buffer_[rng.below(buffer_.size())];
}

BaselineTracker::BaselineTracker(double decay) : decay_(decay) {
    if (decay < 0.0 || decay >= 1.0)
        throw ConfigError("baseline decay must be in [0,1), got " + std::to_string(decay));
}

double BaselineTracker::observe(double reward) {
    if (!(reward >= 0.0 && reward <= 1.0))
        throw ValueError("reward " + std::to_string(reward) + " outside [0,1]");
    value_ = initialized_ ? decay_ * value_ + (1.0 - decay_) * reward : reward;
    initialized_ = true;
    return value_;
}

double advantage(double reward, double baseline) { return reward - baseline; }

double admission_probability(double reward, double baseline) {
    if (baseline <= 0.0) return 1.0;
    return std::min(1.0, reward / baseline);
}

bool maybe_store(ReplayBuffer& buffer, Transition t, double baseline, Rng& rng) {
    const double p = admission_probability(t.reward, baseline);
    const bool store = p >= 1.0 || rng.bernoulli(p);
    if (store) buffer.push(std::move(t));
    return store;
}

void pg_step(ControllerPolicy& policy, const std::vector<Transition>& batch, double baseline,
             AdamState& opt, double learning_rate) {
    if (batch.empty()) throw ConfigError("pg_step: empty transition batch");
    const double inv_m = 1.0 / static_cast<double>(batch.size());
    std::vector<Tensor> total;
    for (const Transition& t : batch) {
        const double adv = advantage(t.reward, baseline);
        LogProbGrad g = policy.log_prob_with_grad(t.arch);
        if (total.empty()) {
            total.reserve(g.grads.size());
            for (Tensor& gt : g.grads) total.push_back(Tensor(gt.shape()));
        }
        // gradient of the minimized loss -(1/m) sum_j A_j log P(A_j)
        const double w = -adv * inv_m;
        for (std::size_t i = 0; i < total.size(); ++i)
            for (std::size_t j = 0; j < total[i].size(); ++j) total[i][j] += w * g.grads[i][j];
    }
    adam_step(opt, policy.params(), total, learning_rate);
}

int replay_phase(ControllerPolicy& policy, const ReplayBuffer& buffer, double baseline, int count,
                 AdamState& opt, double learning_rate, Rng& rng) {
    if (buffer.empty()) return 0;
    for (int r = 0; r < count; ++r)
        pg_step(policy, {buffer.sample_uniform(rng)}, baseline, opt, learning_rate);
    return std::max(count, 0);
}

std::string step_record_json(const StepRecord& r) {
    nlohmann::json j;
    j["step"] = r.step;
    j["arch"] = r.arch;
    j["reward"] = r.reward;
    j["baseline"] = r.baseline;
    j["advantage"] = r.advantage;
    j["stored"] = r.stored;
    j["replayed_steps"] = r.replayed_steps;
    return j.dump();
}

SearchResult search(ControllerPolicy& policy, const SearchConfig& cfg, const RewardFn& reward_fn,
                    Rng& rng, std::ostream* jsonl_sink) {
    if (cfg.steps < 0) throw ConfigError("search: negative step count");
    if (cfg.layers == 0) throw ConfigError("search: need at least one layer");
    Rng sample_rng = rng.split(1);
    Rng store_rng = rng.split(2);
    Rng replay_rng = rng.split(3);

    ReplayBuffer buffer(cfg.buffer_capacity);
    BaselineTracker tracker(cfg.baseline_decay);
    AdamState opt;
    SearchResult result;
    // best reward seen per serialized architecture, with first-seen order
    // for deterministic tie-breaks
    std::map<std::string, std::pair<double, int>> best;

    for (int step = 1; step <= cfg.steps; ++step) {
        SampledDecisions sampled = policy.sample(cfg.layers, sample_rng);
        const double reward = reward_fn(sampled.arch);
        if (!std::isfinite(reward) || reward < 0.0 || reward > 1.0)
            throw ValueError("search: reward function returned " + std::to_string(reward) +
                             " at step " + std::to_string(step) + "; expected a value in [0,1]");
        // Advantage uses the baseline as it stood before this reward; the
        // very first step sees its own reward (zero advantage).
        const double bl_pre = tracker.initialized() ? tracker.value() : reward;
        Transition t{"S0", sampled.arch, reward};
        pg_step(policy, {t}, bl_pre, opt, cfg.learning_rate);
        const double bl_post = tracker.observe(reward);
        const bool stored = maybe_store(buffer, t, bl_post, store_rng);

        int replayed = 0;
        if (cfg.replay_period > 0 && cfg.replay_count > 0 && step % cfg.replay_period == 0)
            replayed = replay_phase(policy, buffer, tracker.value(), cfg.replay_count, opt,
                                    cfg.learning_rate, replay_rng);

        StepRecord rec{step,   serialize(sampled.arch), reward, bl_post, advantage(reward, bl_pre),
                       stored, replayed};
        if (jsonl_sink) (*jsonl_sink) << step_record_json(rec) << '\n';
        result.log.push_back(std::move(rec));

        auto [it, inserted] = best.try_emplace(serialize(sampled.arch), reward, step);
        if (!inserted && reward > it->second.first) it->second = {reward, step};
    }

    // rank by reward, then by earlier discovery
    std::vector<std::pair<std::string, std::pair<double, int>>> ranked(best.begin(), best.end());
    std::sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
        if (a.second.first != b.second.first) return a.second.first > b.second.first;
        return a.second.second < b.second.second;
    });
    const std::size_t n = std::min<std::size_t>(ranked.size(), static_cast<std::size_t>(std::max(cfg.top_n, 0)));
    for (std::size_t i = 0; i < n; ++i)
        result.top.emplace_back(parse_architecture(ranked[i].first), ranked[i].second.first);
    return result;
}

}  // namespace metanas
