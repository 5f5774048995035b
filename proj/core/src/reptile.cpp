#include "metanas/reptile.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <ostream>

#include <nlohmann/json.hpp>

namespace metanas {

void validate(const ReptileConfig& cfg) {
    if (cfg.outer_iterations < 0) throw ConfigError("reptile: outer_iterations must be >= 0");
    if (!(cfg.outer_step_size > 0.0 && cfg.outer_step_size <= 1.0))
        throw ConfigError("reptile: outer_step_size must lie in (0,1]");
    if (cfg.meta_batch < 1) throw ConfigError("reptile: meta_batch must be >= 1");
    if (cfg.inner_iterations < 0) throw ConfigError("reptile: inner_iterations must be >= 0");
    if (cfg.inner_batch < 1) throw ConfigError("reptile: inner_batch must be >= 1");
    if (cfg.inner_lr <= 0.0) throw ConfigError("reptile: inner_lr must be positive");
    if (cfg.train_shots < 1) throw ConfigError("reptile: train_shots must be >= 1");
    if (cfg.eval_inner_iterations < 0)
        throw ConfigError("reptile: eval_inner_iterations must be >= 0");
    if (cfg.eval_inner_batch < 1) throw ConfigError("reptile: eval_inner_batch must be >= 1");
    if (cfg.outer_adam && cfg.outer_adam_lr <= 0.0)
        throw ConfigError("reptile: outer_adam_lr must be positive");
    if (cfg.eval_episodes < 1) throw ConfigError("reptile: eval_episodes must be >= 1");
}

namespace {

// Stacks examples into one [B,C,H,W] batch plus labels.
std::pair<Tensor, std::vector<int>> make_batch(const std::vector<Example>& examples,
                                               const std::vector<std::size_t>& indices) {
    const Tensor& first = examples[indices[0]].image;
    const std::size_t c = first.dim(0), h = first.dim(1), w = first.dim(2);
    Tensor images({indices.size(), c, h, w});
    std::vector<int> labels(indices.size());
    for (std::size_t i = 0; i < indices.size(); ++i) {
        const Example& ex = examples[indices[i]];
        std::copy(ex.image.data(), ex.image.data() + ex.image.size(),
                  images.data() + i * c * h * w);
        labels[i] = ex.label;
    }
    return {std::move(images), std::move(labels)};
}

// Minibatch index stream: full set in natural order when the batch covers
// it, otherwise shuffled chunks reshuffled at every epoch boundary.
class BatchStream {
public:
    BatchStream(std::size_t n, std::size_t batch, Rng& rng)
        : n_(n), batch_(std::min(batch, n)), rng_(rng), order_(n) {
        std::iota(order_.begin(), order_.end(), std::size_t{0});
        if (batch_ < n_) shuffle();
    }

    std::vector<std::size_t> next() {
        std::vector<std::size_t> out;
        out.reserve(batch_);
        for (std::size_t i = 0; i < batch_; ++i) {
            if (pos_ == n_) {
                pos_ = 0;
                if (batch_ < n_) shuffle();
            }
            out.push_back(order_[pos_++]);
        }
        return out;
    }

private:
    void shuffle() {
        for (std::size_t i = 0; i + 1 < n_; ++i)
            std::swap(order_[i], order_[i + rng_.below(n_ - i)]);
    }

    std::size_t n_;
    std::size_t batch_;
    Rng& rng_;
    std::vector<std::size_t> order_;
    std::size_t pos_ = 0;
};

}  // namespace

MetaParams inner_adapt(ChildNetwork& net, const MetaParams& theta, const Episode& episode, int k,
                       double inner_lr, int batch_size, Rng& rng) {
    if (episode.train.empty()) throw ValueError("inner_adapt: episode has no training examples");
    if (inner_lr < 0.0) throw ConfigError("inner_adapt: negative learning rate");
    if (batch_size < 1) throw ConfigError("inner_adapt: batch size must be >= 1");
    net.load_param_vector(theta);
    if (k <= 0 || inner_lr == 0.0) return theta;
    BatchStream stream(episode.train.size(), static_cast<std::size_t>(batch_size), rng);
    for (int step = 0; step < k; ++step) {
        auto [images, labels] = make_batch(episode.train, stream.next());
        const auto result = net.loss_and_grads(images, labels, /*train=*/true, &rng);
        sgd_step(net.params(), result.grads, inner_lr);
    }
    return net.param_vector();
}

MetaParams outer_update(const MetaParams& theta, const std::vector<MetaParams>& adapted,
                        double alpha) {
    if (adapted.empty()) throw ConfigError("outer_update: no adapted parameter vectors");
    if (!(alpha > 0.0 && alpha <= 1.0)) throw ConfigError("outer_update: alpha must lie in (0,1]");
    for (const MetaParams& w : adapted)
        if (w.size() != theta.size()) throw ShapeError("outer_update: parameter length mismatch");
    const double inv_n = 1.0 / static_cast<double>(adapted.size());
    MetaParams out(theta.size());
    for (std::size_t j = 0; j < theta.size(); ++j) {
        double delta = 0.0;
        for (const MetaParams& w : adapted) delta += w[j] - theta[j];
        out[j] = theta[j] + alpha * (delta * inv_n);
    }
    return out;
}

double evaluate(ChildNetwork& net, const MetaParams& theta, const Episode& episode,
                const ReptileConfig& cfg, Rng& rng) {
    if (episode.test.empty()) throw ValueError("evaluate: episode has no test examples");
    inner_adapt(net, theta, episode, cfg.eval_inner_iterations, cfg.inner_lr,
                cfg.eval_inner_batch, rng);
    // test examples are classified one at a time: nothing can leak between them
    std::size_t correct = 0;
    for (const Example& ex : episode.test) {
        Tensor single({1, ex.image.dim(0), ex.image.dim(1), ex.image.dim(2)});
        std::copy(ex.image.data(), ex.image.data() + ex.image.size(), single.data());
        const Tensor logits = net.forward(single, /*train=*/false);
        std::size_t best = 0;
        for (std::size_t j = 1; j < logits.size(); ++j)
            if (logits[j] > logits[best]) best = j;
        if (static_cast<int>(best) == ex.label) ++correct;
    }
    return static_cast<double>(correct) / static_cast<double>(episode.test.size());
}

MetaResult meta_train(ChildNetwork& net, const ClassPool& train_pool, const ClassPool& val_pool,
                      const TaskSpec& task, const ReptileConfig& cfg, Rng& rng,
                      std::ostream* metrics) {
    validate(cfg);
    Rng ep_rng = rng.split(1);
    Rng metrics_rng = rng.split(2);
    Rng reward_rng = rng.split(3);

    MetaParams theta = net.param_vector();
    AdamState outer_opt;
    const int val_every = std::max(1, cfg.outer_iterations / 8);
    for (int it = 0; it < cfg.outer_iterations; ++it) {
        const double decay =
            cfg.linear_decay ? 1.0 - static_cast<double>(it) / cfg.outer_iterations : 1.0;
        std::vector<MetaParams> adapted;
        adapted.reserve(static_cast<std::size_t>(cfg.meta_batch));
        double loss_sum = 0.0;
        for (int t = 0; t < cfg.meta_batch; ++t) {
            const Episode ep =
                sample_episode(train_pool, task.n_way, cfg.train_shots, /*k_test=*/0, ep_rng);
            adapted.push_back(inner_adapt(net, theta, ep, cfg.inner_iterations, cfg.inner_lr,
                                          cfg.inner_batch, ep_rng));
            if (metrics) {
                // full-batch loss probe at the adapted parameters
                std::vector<std::size_t> all(ep.train.size());
                std::iota(all.begin(), all.end(), std::size_t{0});
                auto [images, labels] = make_batch(ep.train, all);
                Tensor logits = net.forward(images, /*train=*/false);
                double loss = 0.0;
                for (std::size_t b = 0; b < labels.size(); ++b) {
                    const double* row = logits.data() + b * logits.dim(1);
                    double m = row[0];
                    for (std::size_t j = 1; j < logits.dim(1); ++j) m = std::max(m, row[j]);
                    double z = 0.0;
                    for (std::size_t j = 0; j < logits.dim(1); ++j) z += std::exp(row[j] - m);
                    loss -= row[labels[b]] - m - std::log(z);
                }
                loss_sum += loss / static_cast<double>(labels.size());
            }
        }
        if (cfg.outer_adam) {
            // mean(theta - W) routed through Adam, lr annealed with decay
            MetaParams grad(theta.size(), 0.0);
            const double inv_n = cfg.outer_step_size / static_cast<double>(adapted.size());
            for (const MetaParams& w : adapted)
                for (std::size_t j = 0; j < grad.size(); ++j) grad[j] += theta[j] - w[j];
            for (double& g : grad) g *= inv_n;
            adam_step_flat(outer_opt, theta, grad, cfg.outer_adam_lr * decay);
        } else {
            theta = outer_update(theta, adapted, cfg.outer_step_size * decay);
        }
        if (metrics) {
            nlohmann::json j;
            j["iter"] = it;
            j["mean_inner_loss"] = loss_sum / cfg.meta_batch;
            if ((it + 1) % val_every == 0 || it + 1 == cfg.outer_iterations) {
                const Episode ep =
                    sample_episode(val_pool, task.n_way, task.k_shot, task.k_test, metrics_rng);
                j["val_accuracy"] = evaluate(net, theta, ep, cfg, metrics_rng);
            }
            (*metrics) << j.dump() << '\n';
        }
    }

    MetaResult result;
    result.theta = theta;
    double acc = 0.0;
    for (int e = 0; e < cfg.eval_episodes; ++e) {
        const Episode ep =
            sample_episode(val_pool, task.n_way, task.k_shot, task.k_test, reward_rng);
        acc += evaluate(net, result.theta, ep, cfg, reward_rng);
    }
    result.reward = acc / cfg.eval_episodes;
    net.load_param_vector(result.theta);
    return result;
}

std::function<double(const ArchitectureString&)> reward_fn_for_search(
    SharedWeightBank& bank, const ClassPool& train_pool, const ClassPool& val_pool,
    const TaskSpec& task, const ReptileConfig& search_cfg, std::uint64_t master_seed) {
    validate(search_cfg);
    auto counter = std::make_shared<std::uint64_t>(0);
    return [&bank, &train_pool, &val_pool, task, search_cfg, master_seed,
            counter](const ArchitectureString& arch) {
        Rng call_rng(derive_seed(master_seed, (*counter)++));
        ChildNetwork net = build(bank, decode(arch), bank.n_way(), BuildMode::kShared);
        Rng head_rng = call_rng.split(0);
        bank.reinit_head(head_rng);
        Rng train_rng = call_rng.split(1);
        return meta_train(net, train_pool, val_pool, task, search_cfg, train_rng).reward;
    };
}

std::vector<RetrainOutcome> retrain_top(const std::vector<ArchitectureString>& archs,
                                        const SharedWeightBank& bank, const ClassPool& train_pool,
                                        const ClassPool& val_pool, const ClassPool& test_pool,
                                        const TaskSpec& task, const ReptileConfig& cfg,
                                        int test_episodes, std::uint64_t master_seed,
                                        std::ostream* metrics) {
    validate(cfg);
    if (test_episodes < 1) throw ConfigError("retrain_top: test_episodes must be >= 1");
    std::vector<RetrainOutcome> outcomes;
    for (std::size_t i = 0; i < archs.size(); ++i) {
        Rng rng(derive_seed(master_seed, i));
        ChildNetwork net = build(bank, decode(archs[i]), bank.n_way(), BuildMode::kFresh,
                                 derive_seed(master_seed, 1000 + i));
        const MetaResult trained =
            meta_train(net, train_pool, val_pool, task, cfg, rng, metrics);
        Rng test_rng = rng.split(7);
        double acc = 0.0;
        for (int e = 0; e < test_episodes; ++e) {
            const Episode ep =
                sample_episode(test_pool, task.n_way, task.k_shot, task.k_test, test_rng);
            acc += evaluate(net, trained.theta, ep, cfg, test_rng);
        }
        outcomes.push_back({archs[i], acc / test_episodes, test_episodes, trained.theta});
    }
    std::stable_sort(outcomes.begin(), outcomes.end(), [](const auto& a, const auto& b) {
        return a.test_accuracy > b.test_accuracy;
    });
    return outcomes;
}

}  // namespace metanas
