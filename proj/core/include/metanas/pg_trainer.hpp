#pragma once

#include <deque>
#include <functional>
#include <iosfwd>
#include <string>
#include <utility>
#include <vector>

#include "metanas/controller.hpp"
#include "metanas/optim.hpp"
#include "metanas/rng.hpp"
#include "metanas/search_space.hpp"

namespace metanas {

// One controller interaction: start state tag, the sampled action sequence
// and the reward (validation accuracy) it earned.
struct Transition {
    std::string state = "S0";
    ArchitectureString arch;
    double reward = 0.0;
};

// Bounded FIFO of transitions.
class ReplayBuffer {
public:
    explicit ReplayBuffer(std::size_t capacity = 200);

    void push(Transition t);
    const Transition& sample_uniform(Rng& rng) const;

    std::size_t size() const { return buffer_.size(); }
    std::size_t capacity() const { return capacity_; }
    bool empty() const { return buffer_.empty(); }
    const Transition& at(std::size_t i) const { return buffer_[i]; }

private:
    std::size_t capacity_;
    std::deque<Transition> buffer_;
};

// Exponential moving average of observed rewards. The first observation
// seeds the average directly.
class BaselineTracker {
public:
    explicit BaselineTracker(double decay = 0.95);

    // Throws ValueError for rewards outside [0,1]. Returns the new value.
    double observe(double reward);

    double value() const { return value_; }
    bool initialized() const { return initialized_; }
    double decay() const { return decay_; }

private:
    double decay_;
    double value_ = 0.0;
    bool initialized_ = false;
};

double advantage(double reward, double baseline);

// Eq.-style admission rule: rewards at or above the baseline always enter
// the buffer, lower ones with probability reward/baseline. A non-positive
// baseline admits unconditionally (can only happen before initialization).
double admission_probability(double reward, double baseline);
bool maybe_store(ReplayBuffer& buffer, Transition t, double baseline, Rng& rng);

// One REINFORCE ascent step on the advantage-weighted log-likelihood of a
// batch of transitions, advantages taken against `baseline`, parameters
// updated through `opt` with Adam. Throws ConfigError on an empty batch.
void pg_step(ControllerPolicy& policy, const std::vector<Transition>& batch, double baseline,
             AdamState& opt, double learning_rate);

// `count` single-transition updates, each drawn uniformly from the buffer
// with replacement, advantages against the current baseline. No-op when the
// buffer is empty. Returns the number of updates performed.
int replay_phase(ControllerPolicy& policy, const ReplayBuffer& buffer, double baseline, int count,
                 AdamState& opt, double learning_rate, Rng& rng);

struct SearchConfig {
    std::size_t layers = 4;
    int steps = 200;                 // controller interactions J
    double learning_rate = 0.005;
    double baseline_decay = 0.95;
    int replay_period = 60;          // run a replay phase every k-th step
    int replay_count = 5;            // transitions replayed per phase (0 disables replay)
    std::size_t buffer_capacity = 200;
    int top_n = 3;
};

struct StepRecord {
    int step = 0;                    // 1-based
    std::string arch;                // serialized text
    double reward = 0.0;
    double baseline = 0.0;           // EMA after observing this reward
    double advantage = 0.0;          // reward - pre-update baseline
    bool stored = false;
    int replayed_steps = 0;
};

struct SearchResult {
    std::vector<std::pair<ArchitectureString, double>> top;  // reward-descending
    std::vector<StepRecord> log;
};

using RewardFn = std::function<double(const ArchitectureString&)>;

// Full search loop: sample -> reward -> policy-gradient step -> baseline
// update -> probabilistic storage, with a replay phase every
// `replay_period` steps. Emits one JSON line per step to `jsonl_sink` when
// given. Aborts with ValueError if the reward function returns NaN or a
// value outside [0,1].
SearchResult search(ControllerPolicy& policy, const SearchConfig& cfg, const RewardFn& reward_fn,
                    Rng& rng, std::ostream* jsonl_sink = nullptr);

std::string step_record_json(const StepRecord& r);

}  // namespace metanas
