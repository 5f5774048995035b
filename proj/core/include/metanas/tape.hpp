#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include "metanas/rng.hpp"
#include "metanas/tensor.hpp"

namespace metanas {

// Handle to a tensor recorded on a Tape.
struct Value {
    std::uint32_t index = 0;
};

enum class PoolKind { kAvg, kMax };

// Reverse-mode autodiff over a record of primitive operations. Each op
// appends one node holding the forward result and a closure that scatters
// the node's gradient into its inputs' gradients. Nodes are created in
// topological order by construction, so backward() is a single reverse
// sweep. A Tape is single-owner: build a fresh one per forward pass.
class Tape {
public:
    // Leaf without gradient (inputs, labels, frozen tensors).
    Value constant(Tensor t);
    // Leaf with gradient (trainable parameters).
    Value param(Tensor t);

    const Tensor& value(Value v) const { return nodes_[v.index].value; }
    // Gradient of the last backward() target w.r.t. node v. Zero tensor if
    // the node was never reached.
    const Tensor& grad(Value v) const;

    std::size_t node_count() const { return nodes_.size(); }

    // --- elementwise / linear algebra ---
    Value add(Value a, Value b);
    Value mul(Value a, Value b);
    Value scale(Value a, double c);
    Value matmul(Value a, Value b);          // [M,K]x[K,N] -> [M,N]
    Value add_rowvec(Value a, Value b);      // [M,N] + [N] broadcast over rows
    Value sigmoid(Value a);
    Value tanh(Value a);
    Value logsigmoid(Value a);
    Value sum(Value a);                      // reduce all elements -> [1]
    Value reshape(Value a, std::vector<std::size_t> shape);
    // First `len` slices along `axis`, starting at `start`.
    Value narrow(Value a, std::size_t axis, std::size_t start, std::size_t len);
    Value concat(const std::vector<Value>& parts, std::size_t axis);

    // --- network layers ---
    // Cross-correlation, stride 1, same padding. input [B,C,H,W],
    // kernel [F,C,kh,kw] with kh==kw odd.
    Value conv2d(Value input, Value kernel);
    // One filter per channel. input [B,C,H,W], kernel [C,kh,kw].
    Value depthwise_conv2d(Value input, Value kernel);
    // depthwise stage then 1x1 pointwise conv to F channels.
    Value separable_conv2d(Value input, Value depth_kernel, Value point_kernel);
    // k x k window reduction, stride 1, same padding. Average windows at the
    // border divide by the actual (clipped) window size; max backward routes
    // the gradient to the first maximal element in row-major window order.
    Value pool2d(Value input, PoolKind kind, std::size_t k = 3);
    Value global_avg_pool(Value input);      // [B,C,H,W] -> [B,C]
    Value dense(Value input, Value weight, Value bias);  // [B,D]x[D,O]+[O]
    // Mean over the batch of -log softmax(logits)[label] -> [1].
    Value softmax_cross_entropy(Value logits, const std::vector<int>& labels);
    Value embedding_row(Value table, std::size_t row);   // [V,E] -> [1,E]
    // Train mode: zero each element with probability p and scale the rest by
    // 1/(1-p). Eval mode: identity.
    Value dropout(Value input, double p, Rng& rng, bool train);

    // Seeds d(target)/d(target) = 1 and runs the reverse sweep. `target`
    // must be a single-element tensor.
    void backward(Value target);

private:
    struct Node {
        Tensor value;
        Tensor grad;
        bool requires_grad = false;
        std::function<void(Tape&)> backward;
    };

    Value push(Tensor value, bool requires_grad, std::function<void(Tape&)> backward);
    Value next_id() const;
    bool needs_grad(Value v) const { return nodes_[v.index].requires_grad; }
    Tensor& grad_mut(Value v);

    std::vector<Node> nodes_;
};

struct LstmState {
    Value h;
    Value c;
};

// One LSTM cell step from primitives: gate order [i, f, g, o] along the
// 4H axis. x [B,E], h/c [B,H], w_ih [E,4H], w_hh [H,4H], bias [4H].
LstmState lstm_cell(Tape& tape, Value x, LstmState state, Value w_ih, Value w_hh, Value bias);

}  // namespace metanas
