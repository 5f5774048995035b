#include "metanas/tape.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

namespace metanas {

namespace {

std::size_t prod(const std::vector<std::size_t>& dims, std::size_t lo, std::size_t hi) {
    std::size_t n = 1;
    for (std::size_t i = lo; i < hi; ++i) n *= dims[i];
    return n;
}

void check_rank(const Tensor& t, std::size_t rank, const char* what) {
    if (t.rank() != rank)
        throw ShapeError(std::string(what) + ": expected rank " + std::to_string(rank) +
                         ", got shape " + Tensor::shape_str(t.shape()));
}

double stable_sigmoid(double x) {
    if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
}

}  // namespace

Value Tape::push(Tensor value, bool requires_grad, std::function<void(Tape&)> backward) {
    nodes_.push_back(Node{std::move(value), Tensor(), requires_grad, std::move(backward)});
    return Value{static_cast<std::uint32_t>(nodes_.size() - 1)};
}

Value Tape::next_id() const { return Value{static_cast<std::uint32_t>(nodes_.size())}; }

Value Tape::constant(Tensor t) { return push(std::move(t), false, nullptr); }

Value Tape::param(Tensor t) { return push(std::move(t), true, nullptr); }

const Tensor& Tape::grad(Value v) const {
    const Node& n = nodes_[v.index];
    if (n.grad.empty()) throw Error("gradient not available: run backward() first");
    return n.grad;
}

Tensor& Tape::grad_mut(Value v) {
    Node& n = nodes_[v.index];
    if (n.grad.empty()) n.grad = Tensor(n.value.shape());
    return n.grad;
}

void Tape::backward(Value target) {
    if (nodes_[target.index].value.size() != 1)
        throw ShapeError("backward target must be a single-element tensor, got shape " +
                         Tensor::shape_str(nodes_[target.index].value.shape()));
    grad_mut(target)[0] = 1.0;
    for (std::size_t i = target.index + 1; i-- > 0;) {
        Node& n = nodes_[i];
        if (!n.requires_grad || n.grad.empty() || !n.backward) continue;
        n.backward(*this);
    }
    // Parameters the sweep never reached still expose a (zero) gradient.
    for (Node& n : nodes_)
        if (n.requires_grad && n.grad.empty()) n.grad = Tensor(n.value.shape());
}

// ---------------------------------------------------------------------------
// elementwise / linear algebra
// ---------------------------------------------------------------------------

Value Tape::add(Value a, Value b) {
    const Tensor& ta = value(a);
    const Tensor& tb = value(b);
    if (!ta.same_shape(tb))
        throw ShapeError("add: shape mismatch " + Tensor::shape_str(ta.shape()) + " vs " +
                         Tensor::shape_str(tb.shape()));
    Tensor out(ta.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = ta[i] + tb[i];
    const bool rg = needs_grad(a) || needs_grad(b);
    const Value out_v = next_id();
    return push(std::move(out), rg, !rg ? std::function<void(Tape&)>() : [a, b, out_v](Tape& t) {
        const Tensor& g = t.nodes_[out_v.index].grad;
        if (t.needs_grad(a)) {
            Tensor& ga = t.grad_mut(a);
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
        }
        if (t.needs_grad(b)) {
            Tensor& gb = t.grad_mut(b);
            for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
        }
    });
}

Value Tape::mul(Value a, Value b) {
    const Tensor& ta = value(a);
    const Tensor& tb = value(b);
    if (!ta.same_shape(tb))
        throw ShapeError("mul: shape mismatch " + Tensor::shape_str(ta.shape()) + " vs " +
                         Tensor::shape_str(tb.shape()));
    Tensor out(ta.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = ta[i] * tb[i];
    const bool rg = needs_grad(a) || needs_grad(b);
    const Value out_v = next_id();
    return push(std::move(out), rg, !rg ? std::function<void(Tape&)>() : [a, b, out_v](Tape& t) {
        const Tensor& g = t.nodes_[out_v.index].grad;
        const Tensor& ta = t.value(a);
        const Tensor& tb = t.value(b);
        if (t.needs_grad(a)) {
            Tensor& ga = t.grad_mut(a);
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * tb[i];
        }
        if (t.needs_grad(b)) {
            Tensor& gb = t.grad_mut(b);
            for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * ta[i];
        }
    });
}

Value Tape::scale(Value a, double c) {
    const Tensor& ta = value(a);
    Tensor out(ta.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = c * ta[i];
    const bool rg = needs_grad(a);
    const Value out_v = next_id();
    return push(std::move(out), rg, !rg ? std::function<void(Tape&)>() : [a, c, out_v](Tape& t) {
        const Tensor& g = t.nodes_[out_v.index].grad;
        Tensor& ga = t.grad_mut(a);
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += c * g[i];
    });
}

Value Tape::matmul(Value a, Value b) {
    const Tensor& ta = value(a);
    const Tensor& tb = value(b);
    check_rank(ta, 2, "matmul lhs");
    check_rank(tb, 2, "matmul rhs");
    if (ta.dim(1) != tb.dim(0))
        throw ShapeError("matmul: inner dimensions differ, " + Tensor::shape_str(ta.shape()) +
                         " x " + Tensor::shape_str(tb.shape()));
    const std::size_t m = ta.dim(0), k = ta.dim(1), n = tb.dim(1);
    Tensor out({m, n});
    for (std::size_t i = 0; i < m; ++i) {
        double* orow = out.data() + i * n;
        const double* arow = ta.data() + i * k;
        for (std::size_t kk = 0; kk < k; ++kk) {
            const double av = arow[kk];
            const double* brow = tb.data() + kk * n;
            for (std::size_t j = 0; j < n; ++j) orow[j] += av * brow[j];
        }
    }
    const bool rg = needs_grad(a) || needs_grad(b);
    const Value out_v = next_id();
    return push(std::move(out), rg, !rg ? std::function<void(Tape&)>() : [a, b, m, k, n, out_v](Tape& t) {
        const Tensor& g = t.nodes_[out_v.index].grad;
        if (t.needs_grad(a)) {  // dA = dC * B^T
            Tensor& ga = t.grad_mut(a);
            const Tensor& tb = t.value(b);
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t kk = 0; kk < k; ++kk) {
                    const double* grow = g.data() + i * n;
                    const double* brow = tb.data() + kk * n;
                    double s = 0.0;
                    for (std::size_t j = 0; j < n; ++j) s += grow[j] * brow[j];
                    ga[i * k + kk] += s;
                }
        }
        if (t.needs_grad(b)) {  // dB = A^T * dC
            Tensor& gb = t.grad_mut(b);
            const Tensor& ta = t.value(a);
            for (std::size_t i = 0; i < m; ++i) {
                const double* arow = ta.data() + i * k;
                const double* grow = g.data() + i * n;
                for (std::size_t kk = 0; kk < k; ++kk) {
                    const double av = arow[kk];
                    double* brow = gb.data() + kk * n;
                    for (std::size_t j = 0; j < n; ++j) brow[j] += av * grow[j];
                }
            }
        }
    });
}

Value Tape::add_rowvec(Value a, Value b) {
    const Tensor& ta = value(a);
    const Tensor& tb = value(b);
    check_rank(ta, 2, "add_rowvec lhs");
    check_rank(tb, 1, "add_rowvec rhs");
    if (ta.dim(1) != tb.dim(0))
        throw ShapeError("add_rowvec: " + Tensor::shape_str(ta.shape()) + " vs " +
                         Tensor::shape_str(tb.shape()));
    const std::size_t m = ta.dim(0), n = ta.dim(1);
    Tensor out({m, n});
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) out[i * n + j] = ta[i * n + j] + tb[j];
    const bool rg = needs_grad(a) || needs_grad(b);
    const Value out_v = next_id();
    return push(std::move(out), rg, !rg ? std::function<void(Tape&)>() : [a, b, m, n, out_v](Tape& t) {
        const Tensor& g = t.nodes_[out_v.index].grad;
        if (t.needs_grad(a)) {
            Tensor& ga = t.grad_mut(a);
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
        }
        if (t.needs_grad(b)) {
            Tensor& gb = t.grad_mut(b);
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t j = 0; j < n; ++j) gb[j] += g[i * n + j];
        }
    });
}

Value Tape::sigmoid(Value a) {
    const Tensor& ta = value(a);
    Tensor out(ta.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = stable_sigmoid(ta[i]);
    const bool rg = needs_grad(a);
    const Value out_v = next_id();
    return push(std::move(out), rg, !rg ? std::function<void(Tape&)>() : [a, out_v](Tape& t) {
        const Tensor& g = t.nodes_[out_v.index].grad;
        const Tensor& s = t.nodes_[out_v.index].value;
        Tensor& ga = t.grad_mut(a);
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * s[i] * (1.0 - s[i]);
    });
}

Value Tape::tanh(Value a) {
    const Tensor& ta = value(a);
    Tensor out(ta.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::tanh(ta[i]);
    const bool rg = needs_grad(a);
    const Value out_v = next_id();
    return push(std::move(out), rg, !rg ? std::function<void(Tape&)>() : [a, out_v](Tape& t) {
        const Tensor& g = t.nodes_[out_v.index].grad;
        const Tensor& y = t.nodes_[out_v.index].value;
        Tensor& ga = t.grad_mut(a);
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * (1.0 - y[i] * y[i]);
    });
}

Value Tape::logsigmoid(Value a) {
    const Tensor& ta = value(a);
    Tensor out(ta.shape());
    Tensor sig(ta.shape());
    for (std::size_t i = 0; i < out.size(); ++i) {
        const double x = ta[i];
        out[i] = x >= 0.0 ? -std::log1p(std::exp(-x)) : x - std::log1p(std::exp(x));
        sig[i] = stable_sigmoid(x);
    }
    const bool rg = needs_grad(a);
    const Value out_v = next_id();
    return push(std::move(out), rg,
                !rg ? std::function<void(Tape&)>() : [a, sig = std::move(sig), out_v](Tape& t) {
        const Tensor& g = t.nodes_[out_v.index].grad;
        Tensor& ga = t.grad_mut(a);
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * (1.0 - sig[i]);
    });
}

Value Tape::sum(Value a) {
    const Tensor& ta = value(a);
    double s = 0.0;
    for (std::size_t i = 0; i < ta.size(); ++i) s += ta[i];
    const bool rg = needs_grad(a);
    const Value out_v = next_id();
    return push(Tensor::scalar(s), rg, !rg ? std::function<void(Tape&)>() : [a, out_v](Tape& t) {
        const double g = t.nodes_[out_v.index].grad[0];
        Tensor& ga = t.grad_mut(a);
        for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g;
    });
}

Value Tape::reshape(Value a, std::vector<std::size_t> shape) {
    const Tensor& ta = value(a);
    if (Tensor::count(shape) != ta.size())
        throw ShapeError("reshape: cannot view " + Tensor::shape_str(ta.shape()) + " as " +
                         Tensor::shape_str(shape));
    Tensor out(std::move(shape), std::vector<double>(ta.data(), ta.data() + ta.size()));
    const bool rg = needs_grad(a);
    const Value out_v = next_id();
    return push(std::move(out), rg, !rg ? std::function<void(Tape&)>() : [a, out_v](Tape& t) {
        const Tensor& g = t.nodes_[out_v.index].grad;
        Tensor& ga = t.grad_mut(a);
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    });
}

Value Tape::narrow(Value a, std::size_t axis, std::size_t start, std::size_t len) {
    const Tensor& ta = value(a);
    if (axis >= ta.rank())
        throw ShapeError("narrow: axis " + std::to_string(axis) + " out of range for " +
                         Tensor::shape_str(ta.shape()));
    if (start + len > ta.dim(axis))
        throw ShapeError("narrow: slice [" + std::to_string(start) + "," +
                         std::to_string(start + len) + ") exceeds axis extent " +
                         std::to_string(ta.dim(axis)));
    const std::size_t outer = prod(ta.shape(), 0, axis);
    const std::size_t extent = ta.dim(axis);
    const std::size_t inner = prod(ta.shape(), axis + 1, ta.rank());
    std::vector<std::size_t> oshape = ta.shape();
    oshape[axis] = len;
    Tensor out(oshape);
    for (std::size_t o = 0; o < outer; ++o)
        std::memcpy(out.data() + o * len * inner,
                    ta.data() + (o * extent + start) * inner,
                    len * inner * sizeof(double));
    const bool rg = needs_grad(a);
    const Value out_v = next_id();
    return push(std::move(out), rg,
                !rg ? std::function<void(Tape&)>()
                    : [a, outer, extent, inner, start, len, out_v](Tape& t) {
        const Tensor& g = t.nodes_[out_v.index].grad;
        Tensor& ga = t.grad_mut(a);
        for (std::size_t o = 0; o < outer; ++o) {
            const double* gs = g.data() + o * len * inner;
            double* gd = ga.data() + (o * extent + start) * inner;
            for (std::size_t i = 0; i < len * inner; ++i) gd[i] += gs[i];
        }
    });
}

Value Tape::concat(const std::vector<Value>& parts, std::size_t axis) {
    if (parts.empty()) throw ShapeError("concat: empty input list");
    const Tensor& first = value(parts[0]);
    if (axis >= first.rank())
        throw ShapeError("concat: axis " + std::to_string(axis) + " out of range");
    std::size_t total = 0;
    for (Value p : parts) {
        const Tensor& tp = value(p);
        if (tp.rank() != first.rank())
            throw ShapeError("concat: rank mismatch");
        for (std::size_t d = 0; d < first.rank(); ++d)
            if (d != axis && tp.dim(d) != first.dim(d))
                throw ShapeError("concat: shape mismatch " + Tensor::shape_str(tp.shape()) +
                                 " vs " + Tensor::shape_str(first.shape()));
        total += tp.dim(axis);
    }
    std::vector<std::size_t> oshape = first.shape();
    oshape[axis] = total;
    const std::size_t outer = prod(first.shape(), 0, axis);
    const std::size_t inner = prod(first.shape(), axis + 1, first.rank());
    Tensor out(oshape);
    std::size_t off = 0;
    for (Value p : parts) {
        const Tensor& tp = value(p);
        const std::size_t ext = tp.dim(axis);
        for (std::size_t o = 0; o < outer; ++o)
            std::memcpy(out.data() + (o * total + off) * inner,
                        tp.data() + o * ext * inner,
                        ext * inner * sizeof(double));
        off += ext;
    }
    bool rg = false;
    for (Value p : parts) rg = rg || needs_grad(p);
    const Value out_v = next_id();
    return push(std::move(out), rg,
                !rg ? std::function<void(Tape&)>() : [parts, axis, outer, inner, total, out_v](Tape& t) {
        const Tensor& g = t.nodes_[out_v.index].grad;
        std::size_t off = 0;
        for (Value p : parts) {
            const std::size_t ext = t.value(p).dim(axis);
            if (t.needs_grad(p)) {
                Tensor& gp = t.grad_mut(p);
                for (std::size_t o = 0; o < outer; ++o) {
                    const double* gs = g.data() + (o * total + off) * inner;
                    double* gd = gp.data() + o * ext * inner;
                    for (std::size_t i = 0; i < ext * inner; ++i) gd[i] += gs[i];
                }
            }
            off += ext;
        }
    });
}

// ---------------------------------------------------------------------------
// network layers
// ---------------------------------------------------------------------------

namespace {

// Shared accumulation pattern for stride-1 same-padding cross-correlation.
// For every kernel offset (dy,dx) the valid output region is a rectangle;
// `fn(y, x)` receives output coordinates, input coordinates are
// (y + dy - pad, x + dx - pad).
template <typename Fn>
void for_valid(std::size_t h, std::size_t w, std::size_t k, std::size_t dy, std::size_t dx,
               Fn&& fn) {
    const std::ptrdiff_t pad = static_cast<std::ptrdiff_t>(k / 2);
    const std::ptrdiff_t oy = static_cast<std::ptrdiff_t>(dy) - pad;
    const std::ptrdiff_t ox = static_cast<std::ptrdiff_t>(dx) - pad;
    const std::size_t y0 = static_cast<std::size_t>(std::max<std::ptrdiff_t>(0, -oy));
    const std::size_t y1 = static_cast<std::size_t>(
        std::min<std::ptrdiff_t>(static_cast<std::ptrdiff_t>(h), static_cast<std::ptrdiff_t>(h) - oy));
    const std::size_t x0 = static_cast<std::size_t>(std::max<std::ptrdiff_t>(0, -ox));
    const std::size_t x1 = static_cast<std::size_t>(
        std::min<std::ptrdiff_t>(static_cast<std::ptrdiff_t>(w), static_cast<std::ptrdiff_t>(w) - ox));
    fn(y0, y1, x0, x1, oy, ox);
}

void check_conv_kernel(const Tensor& kernel, std::size_t kh_dim, const char* what) {
    const std::size_t kh = kernel.dim(kh_dim), kw = kernel.dim(kh_dim + 1);
    if (kh != kw || kh % 2 == 0 || kh == 0)
        throw ShapeError(std::string(what) + ": kernel window must be square with odd size, got " +
                         Tensor::shape_str(kernel.shape()));
}

}  // namespace

Value Tape::conv2d(Value input, Value kernel) {
    const Tensor& in = value(input);
    const Tensor& ker = value(kernel);
    check_rank(in, 4, "conv2d input");
    check_rank(ker, 4, "conv2d kernel");
    check_conv_kernel(ker, 2, "conv2d");
    if (in.dim(1) != ker.dim(1))
        throw ShapeError("conv2d: input channels " + std::to_string(in.dim(1)) +
                         " != kernel channels " + std::to_string(ker.dim(1)));
    const std::size_t B = in.dim(0), C = in.dim(1), H = in.dim(2), W = in.dim(3);
    const std::size_t F = ker.dim(0), K = ker.dim(2);
    Tensor out({B, F, H, W});
    for (std::size_t b = 0; b < B; ++b)
        for (std::size_t c = 0; c < C; ++c)
            for (std::size_t f = 0; f < F; ++f)
                for (std::size_t dy = 0; dy < K; ++dy)
                    for (std::size_t dx = 0; dx < K; ++dx) {
                        const double wv = ker[((f * C + c) * K + dy) * K + dx];
                        if (wv == 0.0) continue;
                        for_valid(H, W, K, dy, dx,
                                  [&](std::size_t y0, std::size_t y1, std::size_t x0,
                                      std::size_t x1, std::ptrdiff_t oy, std::ptrdiff_t ox) {
                            for (std::size_t y = y0; y < y1; ++y) {
                                double* orow = out.data() + ((b * F + f) * H + y) * W;
                                const double* irow =
                                    in.data() + ((b * C + c) * H + (y + oy)) * W + ox;
                                for (std::size_t x = x0; x < x1; ++x) orow[x] += wv * irow[x];
                            }
                        });
                    }
    const bool rg = needs_grad(input) || needs_grad(kernel);
    const Value out_v = next_id();
    return push(std::move(out), rg,
                !rg ? std::function<void(Tape&)>() : [input, kernel, B, C, H, W, F, K, out_v](Tape& t) {
        const Tensor& g = t.nodes_[out_v.index].grad;
        const Tensor& in = t.value(input);
        const Tensor& ker = t.value(kernel);
        const bool gi = t.needs_grad(input);
        const bool gk = t.needs_grad(kernel);
        Tensor* gin = gi ? &t.grad_mut(input) : nullptr;
        Tensor* gker = gk ? &t.grad_mut(kernel) : nullptr;
        for (std::size_t b = 0; b < B; ++b)
            for (std::size_t c = 0; c < C; ++c)
                for (std::size_t f = 0; f < F; ++f)
                    for (std::size_t dy = 0; dy < K; ++dy)
                        for (std::size_t dx = 0; dx < K; ++dx) {
                            const std::size_t kidx = ((f * C + c) * K + dy) * K + dx;
                            const double wv = ker[kidx];
                            double acc = 0.0;
                            for_valid(H, W, K, dy, dx,
                                      [&](std::size_t y0, std::size_t y1, std::size_t x0,
                                          std::size_t x1, std::ptrdiff_t oy, std::ptrdiff_t ox) {
                                for (std::size_t y = y0; y < y1; ++y) {
                                    const double* grow = g.data() + ((b * F + f) * H + y) * W;
                                    const std::size_t ibase = ((b * C + c) * H + (y + oy)) * W + ox;
                                    if (gi) {
                                        double* girow = gin->data() + ibase;
                                        for (std::size_t x = x0; x < x1; ++x)
                                            girow[x] += wv * grow[x];
                                    }
                                    if (gk) {
                                        const double* irow = in.data() + ibase;
                                        for (std::size_t x = x0; x < x1; ++x)
                                            acc += grow[x] * irow[x];
                                    }
                                }
                            });
                            if (gk) (*gker)[kidx] += acc;
                        }
    });
}

Value Tape::depthwise_conv2d(Value input, Value kernel) {
    const Tensor& in = value(input);
    const Tensor& ker = value(kernel);
    check_rank(in, 4, "depthwise_conv2d input");
    check_rank(ker, 3, "depthwise_conv2d kernel");
    check_conv_kernel(ker, 1, "depthwise_conv2d");
    if (in.dim(1) != ker.dim(0))
        throw ShapeError("depthwise_conv2d: input channels " + std::to_string(in.dim(1)) +
                         " != kernel channels " + std::to_string(ker.dim(0)));
    const std::size_t B = in.dim(0), C = in.dim(1), H = in.dim(2), W = in.dim(3);
    const std::size_t K = ker.dim(1);
    Tensor out({B, C, H, W});
    for (std::size_t b = 0; b < B; ++b)
        for (std::size_t c = 0; c < C; ++c)
            for (std::size_t dy = 0; dy < K; ++dy)
                for (std::size_t dx = 0; dx < K; ++dx) {
                    const double wv = ker[(c * K + dy) * K + dx];
                    if (wv == 0.0) continue;
                    for_valid(H, W, K, dy, dx,
                              [&](std::size_t y0, std::size_t y1, std::size_t x0, std::size_t x1,
                                  std::ptrdiff_t oy, std::ptrdiff_t ox) {
                        for (std::size_t y = y0; y < y1; ++y) {
                            double* orow = out.data() + ((b * C + c) * H + y) * W;
                            const double* irow = in.data() + ((b * C + c) * H + (y + oy)) * W + ox;
                            for (std::size_t x = x0; x < x1; ++x) orow[x] += wv * irow[x];
                        }
                    });
                }
    const bool rg = needs_grad(input) || needs_grad(kernel);
    const Value out_v = next_id();
    return push(std::move(out), rg,
                !rg ? std::function<void(Tape&)>() : [input, kernel, B, C, H, W, K, out_v](Tape& t) {
        const Tensor& g = t.nodes_[out_v.index].grad;
        const Tensor& in = t.value(input);
        const Tensor& ker = t.value(kernel);
        const bool gi = t.needs_grad(input);
        const bool gk = t.needs_grad(kernel);
        Tensor* gin = gi ? &t.grad_mut(input) : nullptr;
        Tensor* gker = gk ? &t.grad_mut(kernel) : nullptr;
        for (std::size_t b = 0; b < B; ++b)
            for (std::size_t c = 0; c < C; ++c)
                for (std::size_t dy = 0; dy < K; ++dy)
                    for (std::size_t dx = 0; dx < K; ++dx) {
                        const std::size_t kidx = (c * K + dy) * K + dx;
                        const double wv = ker[kidx];
                        double acc = 0.0;
                        for_valid(H, W, K, dy, dx,
                                  [&](std::size_t y0, std::size_t y1, std::size_t x0,
                                      std::size_t x1, std::ptrdiff_t oy, std::ptrdiff_t ox) {
                            for (std::size_t y = y0; y < y1; ++y) {
                                const double* grow = g.data() + ((b * C + c) * H + y) * W;
                                const std::size_t ibase = ((b * C + c) * H + (y + oy)) * W + ox;
                                if (gi) {
                                    double* girow = gin->data() + ibase;
                                    for (std::size_t x = x0; x < x1; ++x) girow[x] += wv * grow[x];
                                }
                                if (gk) {
                                    const double* irow = in.data() + ibase;
                                    for (std::size_t x = x0; x < x1; ++x) acc += grow[x] * irow[x];
                                }
                            }
                        });
                        if (gk) (*gker)[kidx] += acc;
                    }
    });
}

Value Tape::separable_conv2d(Value input, Value depth_kernel, Value point_kernel) {
    const Tensor& pk = value(point_kernel);
    check_rank(pk, 4, "separable_conv2d pointwise kernel");
    if (pk.dim(2) != 1 || pk.dim(3) != 1)
        throw ShapeError("separable_conv2d: pointwise kernel window must be 1x1, got " +
                         Tensor::shape_str(pk.shape()));
    return conv2d(depthwise_conv2d(input, depth_kernel), point_kernel);
}

Value Tape::pool2d(Value input, PoolKind kind, std::size_t k) {
    const Tensor& in = value(input);
    check_rank(in, 4, "pool2d input");
    if (k % 2 == 0 || k == 0) throw ShapeError("pool2d: window must be odd, got " + std::to_string(k));
    const std::size_t B = in.dim(0), C = in.dim(1), H = in.dim(2), W = in.dim(3);
    const std::ptrdiff_t pad = static_cast<std::ptrdiff_t>(k / 2);
    Tensor out({B, C, H, W});
    std::vector<std::uint32_t> argmax;
    if (kind == PoolKind::kMax) argmax.resize(out.size());
    for (std::size_t b = 0; b < B; ++b)
        for (std::size_t c = 0; c < C; ++c) {
            const double* plane = in.data() + (b * C + c) * H * W;
            double* oplane = out.data() + (b * C + c) * H * W;
            for (std::size_t y = 0; y < H; ++y)
                for (std::size_t x = 0; x < W; ++x) {
                    const std::size_t y0 = static_cast<std::size_t>(
                        std::max<std::ptrdiff_t>(0, static_cast<std::ptrdiff_t>(y) - pad));
                    const std::size_t y1 = std::min<std::size_t>(H, y + pad + 1);
                    const std::size_t x0 = static_cast<std::size_t>(
                        std::max<std::ptrdiff_t>(0, static_cast<std::ptrdiff_t>(x) - pad));
                    const std::size_t x1 = std::min<std::size_t>(W, x + pad + 1);
                    if (kind == PoolKind::kAvg) {
                        double s = 0.0;
                        for (std::size_t yy = y0; yy < y1; ++yy)
                            for (std::size_t xx = x0; xx < x1; ++xx) s += plane[yy * W + xx];
                        oplane[y * W + x] = s / static_cast<double>((y1 - y0) * (x1 - x0));
                    } else {
                        // first maximum in row-major window order wins
                        std::size_t best = y0 * W + x0;
                        double bv = plane[best];
                        for (std::size_t yy = y0; yy < y1; ++yy)
                            for (std::size_t xx = x0; xx < x1; ++xx) {
                                const double v = plane[yy * W + xx];
                                if (v > bv) {
                                    bv = v;
                                    best = yy * W + xx;
                                }
                            }
                        oplane[y * W + x] = bv;
                        argmax[((b * C + c) * H + y) * W + x] = static_cast<std::uint32_t>(best);
                    }
                }
        }
    const bool rg = needs_grad(input);
    const Value out_v = next_id();
    return push(std::move(out), rg,
                !rg ? std::function<void(Tape&)>()
                    : [input, kind, k, B, C, H, W, pad, argmax = std::move(argmax), out_v](Tape& t) {
        const Tensor& g = t.nodes_[out_v.index].grad;
        Tensor& gin = t.grad_mut(input);
        for (std::size_t b = 0; b < B; ++b)
            for (std::size_t c = 0; c < C; ++c) {
                double* gplane = gin.data() + (b * C + c) * H * W;
                const double* goplane = g.data() + (b * C + c) * H * W;
                for (std::size_t y = 0; y < H; ++y)
                    for (std::size_t x = 0; x < W; ++x) {
                        const double gv = goplane[y * W + x];
                        if (kind == PoolKind::kMax) {
                            gplane[argmax[((b * C + c) * H + y) * W + x]] += gv;
                            continue;
                        }
                        const std::size_t y0 = static_cast<std::size_t>(
                            std::max<std::ptrdiff_t>(0, static_cast<std::ptrdiff_t>(y) - pad));
                        const std::size_t y1 = std::min<std::size_t>(H, y + pad + 1);
                        const std::size_t x0 = static_cast<std::size_t>(
                            std::max<std::ptrdiff_t>(0, static_cast<std::ptrdiff_t>(x) - pad));
                        const std::size_t x1 = std::min<std::size_t>(W, x + pad + 1);
                        const double share = gv / static_cast<double>((y1 - y0) * (x1 - x0));
                        for (std::size_t yy = y0; yy < y1; ++yy)
                            for (std::size_t xx = x0; xx < x1; ++xx) gplane[yy * W + xx] += share;
                    }
            }
    });
}

Value Tape::global_avg_pool(Value input) {
    const Tensor& in = value(input);
    check_rank(in, 4, "global_avg_pool input");
    const std::size_t B = in.dim(0), C = in.dim(1), HW = in.dim(2) * in.dim(3);
    Tensor out({B, C});
    for (std::size_t b = 0; b < B; ++b)
        for (std::size_t c = 0; c < C; ++c) {
            const double* plane = in.data() + (b * C + c) * HW;
            double s = 0.0;
            for (std::size_t i = 0; i < HW; ++i) s += plane[i];
            out[b * C + c] = s / static_cast<double>(HW);
        }
    const bool rg = needs_grad(input);
    const Value out_v = next_id();
    return push(std::move(out), rg,
                !rg ? std::function<void(Tape&)>() : [input, B, C, HW, out_v](Tape& t) {
        const Tensor& g = t.nodes_[out_v.index].grad;
        Tensor& gin = t.grad_mut(input);
        for (std::size_t b = 0; b < B; ++b)
            for (std::size_t c = 0; c < C; ++c) {
                const double share = g[b * C + c] / static_cast<double>(HW);
                double* plane = gin.data() + (b * C + c) * HW;
                for (std::size_t i = 0; i < HW; ++i) plane[i] += share;
            }
    });
}

Value Tape::dense(Value input, Value weight, Value bias) {
    return add_rowvec(matmul(input, weight), bias);
}

Value Tape::softmax_cross_entropy(Value logits, const std::vector<int>& labels) {
    const Tensor& lg = value(logits);
    check_rank(lg, 2, "softmax_cross_entropy logits");
    const std::size_t B = lg.dim(0), N = lg.dim(1);
    if (labels.size() != B)
        throw ShapeError("softmax_cross_entropy: " + std::to_string(labels.size()) +
                         " labels for batch " + std::to_string(B));
    for (int l : labels)
        if (l < 0 || static_cast<std::size_t>(l) >= N)
            throw ValueError("softmax_cross_entropy: label " + std::to_string(l) +
                             " outside [0," + std::to_string(N) + ")");
    Tensor probs({B, N});
    double loss = 0.0;
    for (std::size_t b = 0; b < B; ++b) {
        const double* row = lg.data() + b * N;
        double m = row[0];
        for (std::size_t j = 1; j < N; ++j) m = std::max(m, row[j]);
        double z = 0.0;
        for (std::size_t j = 0; j < N; ++j) z += std::exp(row[j] - m);
        const double logz = m + std::log(z);
        for (std::size_t j = 0; j < N; ++j) probs[b * N + j] = std::exp(row[j] - logz);
        loss -= row[static_cast<std::size_t>(labels[b])] - logz;
    }
    loss /= static_cast<double>(B);
    const bool rg = needs_grad(logits);
    const Value out_v = next_id();
    return push(Tensor::scalar(loss), rg,
                !rg ? std::function<void(Tape&)>()
                    : [logits, labels, B, N, probs = std::move(probs), out_v](Tape& t) {
        const double g = t.nodes_[out_v.index].grad[0];
        Tensor& gl = t.grad_mut(logits);
        const double inv_b = 1.0 / static_cast<double>(B);
        for (std::size_t b = 0; b < B; ++b)
            for (std::size_t j = 0; j < N; ++j) {
                const double onehot = (static_cast<std::size_t>(labels[b]) == j) ? 1.0 : 0.0;
                gl[b * N + j] += g * (probs[b * N + j] - onehot) * inv_b;
            }
    });
}

Value Tape::embedding_row(Value table, std::size_t row) {
    const Tensor& tb = value(table);
    check_rank(tb, 2, "embedding_row table");
    if (row >= tb.dim(0))
        throw ShapeError("embedding_row: row " + std::to_string(row) + " outside table " +
                         Tensor::shape_str(tb.shape()));
    const std::size_t E = tb.dim(1);
    Tensor out({1, E}, std::vector<double>(tb.data() + row * E, tb.data() + (row + 1) * E));
    const bool rg = needs_grad(table);
    const Value out_v = next_id();
    return push(std::move(out), rg, !rg ? std::function<void(Tape&)>() : [table, row, E, out_v](Tape& t) {
        const Tensor& g = t.nodes_[out_v.index].grad;
        Tensor& gt = t.grad_mut(table);
        for (std::size_t j = 0; j < E; ++j) gt[row * E + j] += g[j];
    });
}

Value Tape::dropout(Value input, double p, Rng& rng, bool train) {
    if (p < 0.0 || p >= 1.0) throw ConfigError("dropout: rate must be in [0,1), got " + std::to_string(p));
    if (!train || p == 0.0) return input;
    const Tensor& in = value(input);
    Tensor mask(in.shape());
    const double keep_scale = 1.0 / (1.0 - p);
    for (std::size_t i = 0; i < mask.size(); ++i) mask[i] = rng.bernoulli(p) ? 0.0 : keep_scale;
    Tensor out(in.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = in[i] * mask[i];
    const bool rg = needs_grad(input);
    const Value out_v = next_id();
    return push(std::move(out), rg,
                !rg ? std::function<void(Tape&)>() : [input, mask = std::move(mask), out_v](Tape& t) {
        const Tensor& g = t.nodes_[out_v.index].grad;
        Tensor& gi = t.grad_mut(input);
        for (std::size_t i = 0; i < g.size(); ++i) gi[i] += g[i] * mask[i];
    });
}

LstmState lstm_cell(Tape& tape, Value x, LstmState state, Value w_ih, Value w_hh, Value bias) {
    const std::size_t h_dim = tape.value(state.h).dim(1);
    if (tape.value(bias).dim(0) != 4 * h_dim)
        throw ShapeError("lstm_cell: bias length must be 4*H");
    Value z = tape.add(tape.matmul(x, w_ih), tape.matmul(state.h, w_hh));
    z = tape.add_rowvec(z, bias);
    Value gi = tape.sigmoid(tape.narrow(z, 1, 0, h_dim));
    Value gf = tape.sigmoid(tape.narrow(z, 1, h_dim, h_dim));
    Value gg = tape.tanh(tape.narrow(z, 1, 2 * h_dim, h_dim));
    Value go = tape.sigmoid(tape.narrow(z, 1, 3 * h_dim, h_dim));
    Value c = tape.add(tape.mul(gf, state.c), tape.mul(gi, gg));
    Value h = tape.mul(go, tape.tanh(c));
    return LstmState{h, c};
}

}  // namespace metanas
