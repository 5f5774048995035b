#pragma once

#include <functional>
#include <iosfwd>
#include <vector>

#include "metanas/child_model.hpp"
#include "metanas/episodes.hpp"
#include "metanas/optim.hpp"
#include "metanas/rng.hpp"

namespace metanas {

struct ReptileConfig {
    int outer_iterations = 1000;
    double outer_step_size = 1.0;   // alpha, in (0,1]
    int meta_batch = 5;             // tasks per outer step
    int inner_iterations = 8;       // SGD steps per task
    int inner_batch = 10;
    double inner_lr = 0.05;
    int train_shots = 15;           // shots per class in meta-training episodes
    int eval_inner_iterations = 50; // fine-tune budget at evaluation time
    int eval_inner_batch = 5;
    bool linear_decay = true;       // anneal alpha (and outer Adam lr) to zero
    bool outer_adam = false;        // route the outer delta through Adam
    double outer_adam_lr = 0.005;
    int eval_episodes = 10;         // validation episodes averaged into the reward
};

// Throws ConfigError on out-of-range fields. Zero outer/eval-inner
// iterations are legal (no-op training / no fine-tuning).
void validate(const ReptileConfig& cfg);

struct TaskSpec {
    int n_way = 5;
    int k_shot = 1;
    int k_test = 1;
};

// k SGD steps on cross-entropy over minibatches of episode.train, starting
// from theta. Returns the adapted parameter vector; theta is untouched and
// the network is left loaded with the result.
MetaParams inner_adapt(ChildNetwork& net, const MetaParams& theta, const Episode& episode, int k,
                       double inner_lr, int batch_size, Rng& rng);

// theta' = theta + alpha * mean_i(W_i - theta).
MetaParams outer_update(const MetaParams& theta, const std::vector<MetaParams>& adapted,
                        double alpha);

// Clones theta, fine-tunes eval_inner_iterations steps on episode.train,
// then classifies each test example on its own (non-transductive).
double evaluate(ChildNetwork& net, const MetaParams& theta, const Episode& episode,
                const ReptileConfig& cfg, Rng& rng);

struct MetaResult {
    MetaParams theta;
    double reward = 0.0;  // mean validation accuracy
};

// Full meta-training loop: per outer step, sample meta_batch episodes from
// train_pool (train_shots per class), adapt each from theta, move theta
// toward the mean adapted parameters; finally average evaluate() over
// eval_episodes validation episodes. The network ends loaded with the final
// theta. Optional metrics sink receives one JSON line per outer step.
MetaResult meta_train(ChildNetwork& net, const ClassPool& train_pool, const ClassPool& val_pool,
                      const TaskSpec& task, const ReptileConfig& cfg, Rng& rng,
                      std::ostream* metrics = nullptr);

// Reward closure for the architecture search: builds the child in shared
// mode against `bank` (whose weights persist across calls), re-initializes
// the head, runs a truncated meta_train and returns the validation reward.
// Deterministic in (master_seed, call order, bank state). Pools and bank
// are captured by reference and must outlive the closure.
std::function<double(const ArchitectureString&)> reward_fn_for_search(
    SharedWeightBank& bank, const ClassPool& train_pool, const ClassPool& val_pool,
    const TaskSpec& task, const ReptileConfig& search_cfg, std::uint64_t master_seed);

struct RetrainOutcome {
    ArchitectureString arch;
    double test_accuracy = 0.0;
    int episodes_evaluated = 0;
    MetaParams theta;  // final meta-trained parameters
};

// Retrains each architecture from scratch (fresh parameters), evaluates on
// meta-test episodes and returns the outcomes sorted by accuracy
// (descending, ties keep input order).
std::vector<RetrainOutcome> retrain_top(const std::vector<ArchitectureString>& archs,
                                        const SharedWeightBank& bank, const ClassPool& train_pool,
                                        const ClassPool& val_pool, const ClassPool& test_pool,
                                        const TaskSpec& task, const ReptileConfig& cfg,
                                        int test_episodes, std::uint64_t master_seed,
                                        std::ostream* metrics = nullptr);

}  // namespace metanas
