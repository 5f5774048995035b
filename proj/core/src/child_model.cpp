#include "metanas/child_model.hpp"

#include <cmath>

namespace metanas {

namespace {

void he_normal(Tensor& t, std::size_t fan_in, Rng& rng) {
    const double std_dev = std::sqrt(2.0 / static_cast<double>(fan_in));
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = rng.normal() * std_dev;
}

void uniform_fan(Tensor& t, std::size_t fan_in, Rng& rng) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = rng.uniform(-bound, bound);
}

// Allocates + initializes the kernels of one (layer, op) entry.
std::vector<std::shared_ptr<Tensor>> make_op_kernels(OpId op, std::size_t depth,
                                                     std::size_t out_ch, Rng& rng) {
    const std::size_t k = op_kernel_size(op);
    std::vector<std::shared_ptr<Tensor>> out;
    if (op_is_separable(op)) {
        auto dw = std::make_shared<Tensor>(Tensor({depth, k, k}));
        he_normal(*dw, k * k, rng);
        auto pw = std::make_shared<Tensor>(Tensor({out_ch, depth, 1, 1}));
        he_normal(*pw, depth, rng);
        out = {std::move(dw), std::move(pw)};
    } else if (op_is_pool(op)) {
        auto proj = std::make_shared<Tensor>(Tensor({out_ch, depth, 1, 1}));
        he_normal(*proj, depth, rng);
        out = {std::move(proj)};
    } else {
        auto kr = std::make_shared<Tensor>(Tensor({out_ch, depth, k, k}));
        he_normal(*kr, depth * k * k, rng);
        out = {std::move(kr)};
    }
    return out;
}

}  // namespace

SharedWeightBank::SharedWeightBank(std::size_t max_layers, std::size_t n_way, ModelConfig cfg,
                                   std::uint64_t seed)
    : max_layers_(max_layers), n_way_(n_way), cfg_(cfg) {
    if (max_layers == 0) throw ConfigError("weight bank: need at least one layer");
    if (n_way < 2) throw ConfigError("weight bank: n_way must be at least 2");
    if (cfg.base_channels == 0 || cfg.image_channels == 0)
        throw ConfigError("weight bank: channel counts must be positive");
    Rng rng(seed);
    for (std::size_t layer = 0; layer < max_layers; ++layer) {
        const std::size_t depth = max_input_depth(layer);
        for (std::size_t op = 0; op < kNumOps; ++op)
            kernels_[{layer, static_cast<int>(op)}] =
                make_op_kernels(static_cast<OpId>(op), depth, cfg.base_channels, rng);
    }
    const std::size_t head_in = max_layers * cfg.base_channels;
    head_w_ = std::make_shared<Tensor>(Tensor({head_in, n_way}));
    head_b_ = std::make_shared<Tensor>(Tensor({n_way}));
    uniform_fan(*head_w_, head_in, rng);
}

std::size_t SharedWeightBank::max_input_depth(std::size_t layer) const {
    return layer == 0 ? cfg_.image_channels : layer * cfg_.base_channels;
}

const std::shared_ptr<Tensor>& SharedWeightBank::kernel(std::size_t layer, OpId op,
                                                        int which) const {
    const auto it = kernels_.find({layer, static_cast<int>(op)});
    if (it == kernels_.end())
        throw ConfigError("weight bank: no entry for layer " + std::to_string(layer));
    if (which < 0 || static_cast<std::size_t>(which) >= it->second.size())
        throw ConfigError("weight bank: op " + op_name(op) + " has no kernel #" +
                          std::to_string(which));
    return it->second[static_cast<std::size_t>(which)];
}

void SharedWeightBank::reinit_head(Rng& rng) {
    uniform_fan(*head_w_, head_w_->dim(0), rng);
    for (std::size_t i = 0; i < head_b_->size(); ++i) (*head_b_)[i] = 0.0;
}

std::vector<NamedTensor> SharedWeightBank::named_tensors() const {
    std::vector<NamedTensor> out;
    for (const auto& [key, tensors] : kernels_) {
        const std::string base = "layer" + std::to_string(key.first) + "/" +
                                 op_name(static_cast<OpId>(key.second));
        const OpId op = static_cast<OpId>(key.second);
        for (std::size_t i = 0; i < tensors.size(); ++i) {
            std::string part = op_is_separable(op) ? (i == 0 ? "depthwise" : "pointwise")
                               : op_is_pool(op)    ? "projection"
                                                   : "kernel";
            out.push_back({base + "/" + part, *tensors[i]});
        }
    }
    out.push_back({"head/weight", *head_w_});
    out.push_back({"head/bias", *head_b_});
    return out;
}

// ---------------------------------------------------------------------------

ChildNetwork build(const SharedWeightBank& bank, const DagSpec& dag, std::size_t n_way,
                   BuildMode mode, std::uint64_t fresh_seed) {
    if (n_way < 2) throw ConfigError("child network: n_way must be at least 2");
    if (n_way != bank.n_way())
        throw ConfigError("child network: n_way " + std::to_string(n_way) +
                          " does not match bank head " + std::to_string(bank.n_way()));
    if (dag.layers.empty()) throw ConfigError("child network: empty dag");
    if (dag.layers.size() > bank.max_layers())
        throw ConfigError("child network: dag depth " + std::to_string(dag.layers.size()) +
                          " exceeds bank capacity " + std::to_string(bank.max_layers()));

    ChildNetwork net;
    net.dag_ = dag;
    net.cfg_ = bank.config();
    net.n_way_ = n_way;
    net.mode_ = mode;
    const std::size_t cb = net.cfg_.base_channels;
    for (std::size_t k = 0; k < dag.layers.size(); ++k) {
        const DagLayer& layer = dag.layers[k];
        net.layer_input_depth_.push_back(k == 0 ? net.cfg_.image_channels
                                                : layer.inputs.size() * cb);
        const std::string base = "layer" + std::to_string(k) + "/" + op_name(layer.op);
        if (op_is_separable(layer.op)) {
            net.params_.push_back(bank.kernel(k, layer.op, 0));
            net.param_names_.push_back(base + "/depthwise");
            net.params_.push_back(bank.kernel(k, layer.op, 1));
            net.param_names_.push_back(base + "/pointwise");
        } else {
            net.params_.push_back(bank.kernel(k, layer.op, 0));
            net.param_names_.push_back(base + (op_is_pool(layer.op) ? "/projection" : "/kernel"));
        }
    }
    net.terminal_depth_ = dag.terminal_inputs.size() * cb;
    net.params_.push_back(bank.head_weight());
    net.param_names_.push_back("head/weight");
    net.params_.push_back(bank.head_bias());
    net.param_names_.push_back("head/bias");

    if (mode == BuildMode::kFresh) {
        Rng rng(fresh_seed);
        for (std::size_t i = 0; i < net.params_.size(); ++i) {
            auto copy = std::make_shared<Tensor>(*net.params_[i]);
            const std::string& name = net.param_names_[i];
            if (name == "head/weight") {
                uniform_fan(*copy, copy->dim(0), rng);
            } else if (name == "head/bias") {
                for (std::size_t j = 0; j < copy->size(); ++j) (*copy)[j] = 0.0;
            } else if (name.ends_with("/depthwise")) {
                he_normal(*copy, copy->dim(1) * copy->dim(2), rng);
            } else if (name.ends_with("/pointwise") || name.ends_with("/projection")) {
                he_normal(*copy, copy->dim(1), rng);
            } else {
                he_normal(*copy, copy->dim(1) * copy->dim(2) * copy->dim(3), rng);
            }
            net.params_[i] = std::move(copy);
        }
    }
    return net;
}

Value ChildNetwork::build_graph(Tape& tape, Value images, const std::vector<Value>& param_values,
                                bool train, Rng* dropout_rng) const {
    const bool use_dropout = train && cfg_.dropout_enabled && cfg_.dropout_rate > 0.0;
    if (use_dropout && dropout_rng == nullptr)
        throw ConfigError("child network: dropout enabled but no rng supplied");

    std::vector<Value> outputs;
    std::size_t param_idx = 0;
    for (std::size_t k = 0; k < dag_.layers.size(); ++k) {
        const DagLayer& layer = dag_.layers[k];
        Value input = images;
        if (k > 0) {
            if (layer.inputs.size() == 1) {
                input = outputs[layer.inputs[0]];
            } else {
                std::vector<Value> parts;
                for (std::size_t j : layer.inputs) parts.push_back(outputs[j]);
                input = tape.concat(parts, 1);
            }
        }
        const std::size_t depth = layer_input_depth_[k];
        Value out;
        if (op_is_separable(layer.op)) {
            Value dw = param_values[param_idx++];
            Value pw = param_values[param_idx++];
            if (tape.value(dw).dim(0) != depth) dw = tape.narrow(dw, 0, 0, depth);
            if (tape.value(pw).dim(1) != depth) pw = tape.narrow(pw, 1, 0, depth);
            out = tape.separable_conv2d(input, dw, pw);
        } else if (op_is_pool(layer.op)) {
            Value proj = param_values[param_idx++];
            if (tape.value(proj).dim(1) != depth) proj = tape.narrow(proj, 1, 0, depth);
            const PoolKind kind = layer.op == OpId::kAvgPool3 ? PoolKind::kAvg : PoolKind::kMax;
            out = tape.conv2d(tape.pool2d(input, kind, op_kernel_size(layer.op)), proj);
        } else {
            Value kr = param_values[param_idx++];
            if (tape.value(kr).dim(1) != depth) kr = tape.narrow(kr, 1, 0, depth);
            out = tape.conv2d(input, kr);
        }
        if (use_dropout && cfg_.dropout_per_layer)
            out = tape.dropout(out, cfg_.dropout_rate, *dropout_rng, train);
        outputs.push_back(out);
    }

    Value terminal;
    if (dag_.terminal_inputs.size() == 1) {
        terminal = outputs[dag_.terminal_inputs[0]];
    } else {
        std::vector<Value> parts;
        for (std::size_t j : dag_.terminal_inputs) parts.push_back(outputs[j]);
        terminal = tape.concat(parts, 1);
    }
    Value features = tape.global_avg_pool(terminal);
    if (use_dropout) features = tape.dropout(features, cfg_.dropout_rate, *dropout_rng, train);
    Value head_w = param_values[param_idx++];
    Value head_b = param_values[param_idx++];
    if (tape.value(head_w).dim(0) != terminal_depth_)
        head_w = tape.narrow(head_w, 0, 0, terminal_depth_);
    return tape.dense(features, head_w, head_b);
}

namespace {

void check_images(const Tensor& images, const ModelConfig& cfg) {
    if (images.rank() != 4)
        throw ShapeError("child network: images must be [B,C,H,W], got " +
                         Tensor::shape_str(images.shape()));
    if (images.dim(1) != cfg.image_channels || images.dim(2) != cfg.image_size ||
        images.dim(3) != cfg.image_size)
        throw ShapeError("child network: expected images [B," +
                         std::to_string(cfg.image_channels) + "," +
                         std::to_string(cfg.image_size) + "," + std::to_string(cfg.image_size) +
                         "], got " + Tensor::shape_str(images.shape()));
}

}  // namespace

Tensor ChildNetwork::forward(const Tensor& images, bool train, Rng* dropout_rng) const {
    check_images(images, cfg_);
    Tape tape;
    std::vector<Value> param_values;
    param_values.reserve(params_.size());
    for (const auto& p : params_) param_values.push_back(tape.constant(*p));
    const Value logits = build_graph(tape, tape.constant(images), param_values, train, dropout_rng);
    return tape.value(logits);
}

ChildNetwork::ForwardResult ChildNetwork::loss_and_grads(const Tensor& images,
                                                         const std::vector<int>& labels,
                                                         bool train, Rng* dropout_rng) const {
    check_images(images, cfg_);
    Tape tape;
    std::vector<Value> param_values;
    param_values.reserve(params_.size());
    for (const auto& p : params_) param_values.push_back(tape.param(*p));
    const Value logits = build_graph(tape, tape.constant(images), param_values, train, dropout_rng);
    const Value loss = tape.softmax_cross_entropy(logits, labels);
    tape.backward(loss);
    ForwardResult result;
    result.loss = tape.value(loss)[0];
    result.grads.reserve(param_values.size());
    for (Value v : param_values) result.grads.push_back(tape.grad(v));
    return result;
}

MetaParams ChildNetwork::param_vector() const {
    MetaParams theta;
    theta.reserve(param_count());
    for (const auto& p : params_)
        theta.insert(theta.end(), p->data(), p->data() + p->size());
    return theta;
}

void ChildNetwork::load_param_vector(const MetaParams& theta) {
    if (theta.size() != param_count())
        throw ShapeError("child network: parameter vector length " + std::to_string(theta.size()) +
                         " != expected " + std::to_string(param_count()));
    std::size_t off = 0;
    for (const auto& p : params_) {
        for (std::size_t i = 0; i < p->size(); ++i) (*p)[i] = theta[off + i];
        off += p->size();
    }
}

std::size_t ChildNetwork::param_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p->size();
    return n;
}

std::vector<Tensor*> ChildNetwork::params() const {
    std::vector<Tensor*> out;
    out.reserve(params_.size());
    for (const auto& p : params_) out.push_back(p.get());
    return out;
}

}  // namespace metanas
