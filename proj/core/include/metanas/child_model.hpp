#pragma once

#include <map>
#include <memory>
#include <string>
#include <vector>

#include "metanas/checkpoint.hpp"
#include "metanas/rng.hpp"
#include "metanas/search_space.hpp"
#include "metanas/tape.hpp"
#include "metanas/tensor.hpp"

namespace metanas {

struct ModelConfig {
    std::size_t base_channels = 16;  // every layer emits this many channels
    std::size_t image_channels = 1;
    std::size_t image_size = 16;
    double dropout_rate = 0.25;
    bool dropout_enabled = false;  // rate applies only when enabled
    bool dropout_per_layer = false;
};

// Parameters shared by every architecture sampled during a search, keyed by
// (layer index, op). Kernels are allocated for the layer's worst-case input
// depth; a network built for a smaller depth uses the leading input-channel
// slices. Conv ops map the concatenated input straight to base_channels;
// separable ops hold a depthwise stage plus a 1x1 pointwise stage; pooling
// preserves depth, so pool ops hold a 1x1 projection back to base_channels.
// The classifier head (global-avg-pool -> dense) is shared as well.
class SharedWeightBank {
public:
    SharedWeightBank(std::size_t max_layers, std::size_t n_way, ModelConfig cfg,
                     std::uint64_t seed);

    std::size_t max_layers() const { return max_layers_; }
    std::size_t n_way() const { return n_way_; }
    const ModelConfig& config() const { return cfg_; }

    // Worst-case input depth of a layer: the image for layer 0, all earlier
    // layer outputs for the rest.
    std::size_t max_input_depth(std::size_t layer) const;

    // which = 0: main kernel (conv kernel / depthwise stage / pool
    // projection); which = 1: pointwise stage of separable ops.
    const std::shared_ptr<Tensor>& kernel(std::size_t layer, OpId op, int which = 0) const;
    const std::shared_ptr<Tensor>& head_weight() const { return head_w_; }
    const std::shared_ptr<Tensor>& head_bias() const { return head_b_; }

    // Fresh head for each reward evaluation so no label assignment leaks
    // across tasks.
    void reinit_head(Rng& rng);

    std::vector<NamedTensor> named_tensors() const;

private:
    std::size_t max_layers_;
    std::size_t n_way_;
    ModelConfig cfg_;
    std::map<std::pair<std::size_t, int>, std::vector<std::shared_ptr<Tensor>>> kernels_;
    std::shared_ptr<Tensor> head_w_;
    std::shared_ptr<Tensor> head_b_;
};

enum class BuildMode { kShared, kFresh };

using MetaParams = std::vector<double>;

// A DagSpec wired to concrete parameters. In shared mode the network holds
// views into the bank (training it trains the bank); fresh mode deep-copies
// and re-initializes private parameters.
class ChildNetwork {
public:
    struct ForwardResult {
        double loss = 0.0;
        std::vector<Tensor> grads;  // aligned with params()
    };

    // images [B, image_channels, H, W] -> logits [B, n_way]
    Tensor forward(const Tensor& images, bool train = false, Rng* dropout_rng = nullptr) const;
    ForwardResult loss_and_grads(const Tensor& images, const std::vector<int>& labels,
                                 bool train = true, Rng* dropout_rng = nullptr) const;

    // Flat parameter vector in documented order: per layer ascending, the
    // layer's kernels (main, then pointwise when present), then head weight
    // and head bias; each tensor row-major.
    MetaParams param_vector() const;
    void load_param_vector(const MetaParams& theta);
    std::size_t param_count() const;

    std::vector<Tensor*> params() const;
    std::vector<std::string> param_names() const { return param_names_; }

    const DagSpec& dag() const { return dag_; }
    std::size_t n_way() const { return n_way_; }
    BuildMode mode() const { return mode_; }

private:
    friend ChildNetwork build(const SharedWeightBank&, const DagSpec&, std::size_t, BuildMode,
                              std::uint64_t);
    Value build_graph(Tape& tape, Value images, const std::vector<Value>& param_values, bool train,
                      Rng* dropout_rng) const;

    DagSpec dag_;
    ModelConfig cfg_;
    std::size_t n_way_ = 0;
    BuildMode mode_ = BuildMode::kShared;
    std::vector<std::shared_ptr<Tensor>> params_;    // wiring order, see param_names_
    std::vector<std::string> param_names_;
    std::vector<std::size_t> layer_input_depth_;     // actual concat depth per layer
    std::size_t terminal_depth_ = 0;
};

// Throws ConfigError for n_way < 2 or a dag deeper than the bank.
ChildNetwork build(const SharedWeightBank& bank, const DagSpec& dag, std::size_t n_way,
                   BuildMode mode, std::uint64_t fresh_seed = 0);

}  // namespace metanas
