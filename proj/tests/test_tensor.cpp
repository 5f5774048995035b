#include <doctest.h>

#include <cmath>

#include "metanas/optim.hpp"
#include "metanas/tape.hpp"
#include "support/finite_diff.hpp"

using namespace metanas;
using testing::max_rel_err;
using testing::numeric_grad;
using testing::random_tensor;

namespace {

constexpr double kGradTol = 1e-4;

// Gradient of sum(conv2d(in, ker)) w.r.t. the kernel via the tape.
Tensor conv_kernel_grad(const Tensor& in, const Tensor& ker) {
    Tape tape;
    const Value k = tape.param(ker);
    const Value loss = tape.sum(tape.conv2d(tape.constant(in), k));
    tape.backward(loss);
    return tape.grad(k);
}

}  // namespace

TEST_CASE("conv2d zero input stays zero") {
    Rng rng(7);
    const Tensor in({1, 1, 1, 1});
    const Tensor ker = random_tensor({1, 1, 3, 3}, rng);
    Tape tape;
    const Value out = tape.conv2d(tape.constant(in), tape.constant(ker));
    for (std::size_t i = 0; i < tape.value(out).size(); ++i)
        CHECK(tape.value(out)[i] == 0.0);
}

TEST_CASE("conv2d centered delta kernel is the identity") {
    Rng rng(8);
    const Tensor in = random_tensor({2, 1, 5, 5}, rng);
    Tensor ker({1, 1, 3, 3});
    ker[4] = 1.0;  // center tap
    Tape tape;
    const Value out = tape.conv2d(tape.constant(in), tape.constant(ker));
    CHECK(tape.value(out).shape() == in.shape());
    for (std::size_t i = 0; i < in.size(); ++i)
        CHECK(tape.value(out)[i] == doctest::Approx(in[i]).epsilon(1e-12));
}

TEST_CASE("conv2d kernel gradient matches finite differences") {
    Rng rng(9);
    const Tensor in = random_tensor({2, 1, 4, 4}, rng);
    const Tensor ker = random_tensor({1, 1, 3, 3}, rng);
    const Tensor analytic = conv_kernel_grad(in, ker);
    const Tensor numeric = numeric_grad(
        [&](const Tensor& k) {
            Tape tape;
            const Value loss = tape.sum(tape.conv2d(tape.constant(in), tape.constant(k)));
            return tape.value(loss)[0];
        },
        ker);
    CHECK(max_rel_err(analytic, numeric) < kGradTol);
}

TEST_CASE("conv2d rejects channel mismatch") {
    Tape tape;
    const Value in = tape.constant(Tensor({1, 2, 4, 4}));
    const Value ker = tape.constant(Tensor({1, 3, 3, 3}));
    CHECK_THROWS_AS(tape.conv2d(in, ker), ShapeError);
}

TEST_CASE("depthwise separable equals explicit per-channel composition") {
    Rng rng(10);
    const std::size_t C = 3, F = 2;
    const Tensor in = random_tensor({2, C, 5, 5}, rng);
    const Tensor dk = random_tensor({C, 3, 3}, rng);
    const Tensor pk = random_tensor({F, C, 1, 1}, rng);

    Tape tape;
    const Value sep =
        tape.separable_conv2d(tape.constant(in), tape.constant(dk), tape.constant(pk));

    // oracle: per-channel conv2d with 1-channel kernels, concatenated, then
    // the pointwise conv
    Tape oracle;
    std::vector<Value> channels;
    for (std::size_t c = 0; c < C; ++c) {
        Tensor in_c({2, 1, 5, 5});
        for (std::size_t b = 0; b < 2; ++b)
            for (std::size_t i = 0; i < 25; ++i)
                in_c[b * 25 + i] = in[(b * C + c) * 25 + i];
        Tensor k_c({1, 1, 3, 3});
        for (std::size_t i = 0; i < 9; ++i) k_c[i] = dk[c * 9 + i];
        channels.push_back(oracle.conv2d(oracle.constant(in_c), oracle.constant(k_c)));
    }
    const Value stacked = oracle.concat(channels, 1);
    const Value expect = oracle.conv2d(stacked, oracle.constant(pk));

    const Tensor& got = tape.value(sep);
    const Tensor& want = oracle.value(expect);
    REQUIRE(got.shape() == want.shape());
    for (std::size_t i = 0; i < got.size(); ++i)
        CHECK(got[i] == doctest::Approx(want[i]).epsilon(1e-12));
}

TEST_CASE("separable conv identity composition") {
    // depthwise delta kernels + pointwise identity permutation pass input through
    const std::size_t C = 2;
    Rng rng(11);
    const Tensor in = random_tensor({1, C, 4, 4}, rng);
    Tensor dk({C, 3, 3});
    for (std::size_t c = 0; c < C; ++c) dk[c * 9 + 4] = 1.0;
    Tensor pk({C, C, 1, 1});
    for (std::size_t c = 0; c < C; ++c) pk[c * C + c] = 1.0;
    Tape tape;
    const Value out = tape.separable_conv2d(tape.constant(in), tape.constant(dk), tape.constant(pk));
    for (std::size_t i = 0; i < in.size(); ++i)
        CHECK(tape.value(out)[i] == doctest::Approx(in[i]).epsilon(1e-12));
}

TEST_CASE("separable conv with zero pointwise kernel annihilates") {
    Rng rng(12);
    const Tensor in = random_tensor({1, 2, 4, 4}, rng);
    const Tensor dk = random_tensor({2, 3, 3}, rng);
    const Tensor pk = Tensor({3, 2, 1, 1});
    Tape tape;
    const Value out = tape.separable_conv2d(tape.constant(in), tape.constant(dk), tape.constant(pk));
    for (std::size_t i = 0; i < tape.value(out).size(); ++i) CHECK(tape.value(out)[i] == 0.0);
}

TEST_CASE("pool2d constant field") {
    const Tensor in = Tensor::full({1, 1, 5, 5}, 3.25);
    Tape tape;
    const Value avg = tape.pool2d(tape.constant(in), PoolKind::kAvg);
    const Value mx = tape.pool2d(tape.constant(in), PoolKind::kMax);
    for (std::size_t i = 0; i < 25; ++i) {
        CHECK(tape.value(avg)[i] == doctest::Approx(3.25).epsilon(1e-15));
        CHECK(tape.value(mx)[i] == 3.25);
    }
}

TEST_CASE("max pool propagates an interior spike to a 3x3 block") {
    Tensor in({1, 1, 6, 6});
    in.at4(0, 0, 3, 3) = 1.0;
    Tape tape;
    const Value out = tape.pool2d(tape.constant(in), PoolKind::kMax);
    for (std::size_t y = 0; y < 6; ++y)
        for (std::size_t x = 0; x < 6; ++x) {
            const bool inside = y >= 2 && y <= 4 && x >= 2 && x <= 4;
            CHECK(tape.value(out).at4(0, 0, y, x) == (inside ? 1.0 : 0.0));
        }
}

TEST_CASE("avg pool gradient matches finite differences") {
    Rng rng(13);
    const Tensor in = random_tensor({1, 2, 4, 4}, rng);
    const Tensor weights = random_tensor({1, 2, 4, 4}, rng);
    auto weighted_sum = [&](Tape& t, Value pooled) {
        return t.sum(t.mul(pooled, t.constant(weights)));
    };
    Tape tape;
    const Value x = tape.param(in);
    tape.backward(weighted_sum(tape, tape.pool2d(x, PoolKind::kAvg)));
    const Tensor numeric = numeric_grad(
        [&](const Tensor& probe) {
            Tape t2;
            return t2.value(weighted_sum(t2, t2.pool2d(t2.constant(probe), PoolKind::kAvg)))[0];
        },
        in);
    CHECK(max_rel_err(tape.grad(x), numeric) < kGradTol);
}

TEST_CASE("max pool ties route the gradient to the first element in row-major order") {
    const Tensor in = Tensor::full({1, 1, 3, 3}, 1.0);
    Tape tape;
    const Value x = tape.param(in);
    const Value loss = tape.sum(tape.pool2d(x, PoolKind::kMax));
    tape.backward(loss);
    // every window picks (0,0) of its clipped region; corner windows of a
    // constant plane always hit the smallest row-major index
    const Tensor& g = tape.grad(x);
    CHECK(g.at4(0, 0, 0, 0) == 4.0);  // windows centered at (0,0),(0,1),(1,0),(1,1)
    CHECK(g.at4(0, 0, 2, 2) == 0.0);
}

TEST_CASE("dense identity weight and zero bias pass through") {
    Rng rng(14);
    const Tensor in = random_tensor({3, 4}, rng);
    Tensor w({4, 4});
    for (std::size_t i = 0; i < 4; ++i) w.at2(i, i) = 1.0;
    Tape tape;
    const Value out = tape.dense(tape.constant(in), tape.constant(w), tape.constant(Tensor({4})));
    for (std::size_t i = 0; i < in.size(); ++i)
        CHECK(tape.value(out)[i] == doctest::Approx(in[i]).epsilon(1e-15));
}

TEST_CASE("dense bias gradient under a sum loss is the batch size") {
    Rng rng(15);
    const std::size_t B = 5, D = 3, O = 2;
    Tape tape;
    const Value b = tape.param(Tensor({O}));
    const Value out = tape.dense(tape.constant(random_tensor({B, D}, rng)),
                                 tape.constant(random_tensor({D, O}, rng)), b);
    tape.backward(tape.sum(out));
    for (std::size_t j = 0; j < O; ++j) CHECK(tape.grad(b)[j] == doctest::Approx(double(B)));
}

TEST_CASE("dense gradients match finite differences") {
    Rng rng(16);
    const Tensor in = random_tensor({2, 3}, rng);
    const Tensor w = random_tensor({3, 4}, rng);
    const Tensor b = random_tensor({4}, rng);
    Tape tape;
    const Value wv = tape.param(w);
    const Value bv = tape.param(b);
    const Value iv = tape.param(in);
    tape.backward(tape.sum(tape.dense(iv, wv, bv)));
    auto probe = [&](const Tensor& pw, const Tensor& pb, const Tensor& pin) {
        Tape t;
        return t.value(
            t.sum(t.dense(t.constant(pin), t.constant(pw), t.constant(pb))))[0];
    };
    CHECK(max_rel_err(tape.grad(wv), numeric_grad([&](const Tensor& p) { return probe(p, b, in); }, w)) < kGradTol);
    CHECK(max_rel_err(tape.grad(bv), numeric_grad([&](const Tensor& p) { return probe(w, p, in); }, b)) < kGradTol);
    CHECK(max_rel_err(tape.grad(iv), numeric_grad([&](const Tensor& p) { return probe(w, b, p); }, in)) < kGradTol);
}

TEST_CASE("dense rejects dimension mismatch") {
    Tape tape;
    CHECK_THROWS_AS(tape.dense(tape.constant(Tensor({2, 3})), tape.constant(Tensor({4, 2})),
                               tape.constant(Tensor({2}))),
                    ShapeError);
}

TEST_CASE("global_avg_pool") {
    SUBCASE("constant field") {
        Tape tape;
        const Value out = tape.global_avg_pool(tape.constant(Tensor::full({2, 3, 4, 4}, 0.7)));
        for (std::size_t i = 0; i < 6; ++i)
            CHECK(tape.value(out)[i] == doctest::Approx(0.7).epsilon(1e-15));
    }
    SUBCASE("one-hot spatial map gives 1/(H*W)") {
        Tensor in({1, 1, 4, 4});
        in.at4(0, 0, 2, 1) = 1.0;
        Tape tape;
        const Value out = tape.global_avg_pool(tape.constant(in));
        CHECK(tape.value(out)[0] == doctest::Approx(1.0 / 16.0).epsilon(1e-15));
    }
    SUBCASE("random input matches brute-force mean") {
        Rng rng(17);
        const Tensor in = random_tensor({2, 2, 3, 3}, rng);
        Tape tape;
        const Value out = tape.global_avg_pool(tape.constant(in));
        for (std::size_t b = 0; b < 2; ++b)
            for (std::size_t c = 0; c < 2; ++c) {
                double s = 0.0;
                for (std::size_t y = 0; y < 3; ++y)
                    for (std::size_t x = 0; x < 3; ++x) s += in.at4(b, c, y, x);
                CHECK(tape.value(out).at2(b, c) == doctest::Approx(s / 9.0).epsilon(1e-15));
            }
    }
}

TEST_CASE("softmax cross entropy") {
    SUBCASE("uniform logits give ln N") {
        Tape tape;
        const Value loss =
            tape.softmax_cross_entropy(tape.constant(Tensor({2, 5})), {0, 3});
        CHECK(tape.value(loss)[0] == doctest::Approx(std::log(5.0)).epsilon(1e-12));
    }
    SUBCASE("a huge true-class logit drives the loss to zero") {
        Tensor logits({1, 4});
        logits[2] = 50.0;
        Tape tape;
        const Value loss = tape.softmax_cross_entropy(tape.constant(logits), {2});
        CHECK(tape.value(loss)[0] < 1e-12);
        CHECK(tape.value(loss)[0] >= 0.0);
    }
    SUBCASE("gradient matches finite differences") {
        Rng rng(18);
        const Tensor logits = random_tensor({3, 4}, rng);
        const std::vector<int> labels = {1, 3, 0};
        Tape tape;
        const Value lv = tape.param(logits);
        tape.backward(tape.softmax_cross_entropy(lv, labels));
        const Tensor numeric = numeric_grad(
            [&](const Tensor& p) {
                Tape t;
                return t.value(t.softmax_cross_entropy(t.constant(p), labels))[0];
            },
            logits);
        CHECK(max_rel_err(tape.grad(lv), numeric) < kGradTol);
    }
    SUBCASE("out-of-range label is rejected") {
        Tape tape;
        CHECK_THROWS_AS(tape.softmax_cross_entropy(tape.constant(Tensor({1, 3})), {3}),
                        ValueError);
    }
}

TEST_CASE("lstm cell with zero weights and inputs keeps a zero hidden state") {
    const std::size_t E = 3, H = 4;
    Tape tape;
    LstmState st{tape.constant(Tensor({1, H})), tape.constant(Tensor({1, H}))};
    st = lstm_cell(tape, tape.constant(Tensor({1, E})), st, tape.constant(Tensor({E, 4 * H})),
                   tape.constant(Tensor({H, 4 * H})), tape.constant(Tensor({4 * H})));
    for (std::size_t i = 0; i < H; ++i) {
        CHECK(tape.value(st.h)[i] == 0.0);
        CHECK(tape.value(st.c)[i] == 0.0);
    }
}

TEST_CASE("sgd_step with zero gradient leaves parameters unchanged") {
    Rng rng(19);
    Tensor p = random_tensor({7}, rng);
    const Tensor before = p;
    sgd_step({&p}, {Tensor({7})}, 0.1);
    CHECK(p == before);
}

TEST_CASE("sgd/adam reject non-positive learning rates") {
    Tensor p({2});
    CHECK_THROWS_AS(sgd_step({&p}, {Tensor({2})}, 0.0), ConfigError);
    AdamState st;
    CHECK_THROWS_AS(adam_step(st, {&p}, {Tensor({2})}, -1.0), ConfigError);
}

TEST_CASE("adam first step moves by about lr in the gradient sign direction") {
    // closed form: mhat = g, vhat = g*g, update = lr*g/(|g|+eps)
    Tensor p({3}, {1.0, -2.0, 0.5});
    const Tensor g({3}, {0.3, -0.7, 2.0});
    const Tensor before = p;
    AdamState st;
    adam_step(st, {&p}, {g}, 0.01);
    for (std::size_t i = 0; i < 3; ++i) {
        const double delta = before[i] - p[i];
        CHECK(delta == doctest::Approx(0.01 * (g[i] > 0 ? 1.0 : -1.0)).epsilon(1e-6));
    }
}

TEST_CASE("dropout") {
    Rng rng(20);
    const Tensor in = random_tensor({4, 8}, rng);
    SUBCASE("eval mode is the identity") {
        Tape tape;
        Rng drop(1);
        const Value out = tape.dropout(tape.constant(in), 0.25, drop, false);
        CHECK(tape.value(out) == in);
    }
    SUBCASE("train mode zeroes or rescales, deterministic per seed") {
        auto run = [&](std::uint64_t seed) {
            Tape tape;
            Rng drop(seed);
            return tape.value(tape.dropout(tape.constant(in), 0.25, drop, true));
        };
        const Tensor a = run(5);
        CHECK(a == run(5));
        const double scale = 1.0 / 0.75;
        for (std::size_t i = 0; i < a.size(); ++i) {
            const bool kept = a[i] != 0.0 || in[i] == 0.0;
            if (kept) CHECK(a[i] == doctest::Approx(in[i] * scale).epsilon(1e-12));
        }
    }
    SUBCASE("backward reuses the forward mask") {
        Tape tape;
        Rng drop(6);
        const Value x = tape.param(in);
        const Value out = tape.dropout(x, 0.5, drop, true);
        tape.backward(tape.sum(out));
        const Tensor& g = tape.grad(x);
        const Tensor& y = tape.value(out);
        for (std::size_t i = 0; i < g.size(); ++i)
            CHECK(g[i] == (y[i] == 0.0 && in[i] != 0.0 ? 0.0 : 2.0));
    }
}

TEST_CASE("whole-graph gradient check on a random three-layer net") {
    Rng rng(21);
    const Tensor img = random_tensor({2, 1, 5, 5}, rng, 0.0, 1.0);
    const Tensor k1 = random_tensor({2, 1, 3, 3}, rng, -0.5, 0.5);
    const Tensor k2 = random_tensor({2, 2, 3, 3}, rng, -0.5, 0.5);
    const Tensor w = random_tensor({2, 3}, rng, -0.5, 0.5);
    const Tensor b = random_tensor({3}, rng, -0.1, 0.1);
    const std::vector<int> labels = {1, 2};

    auto loss_value = [&](const Tensor& pk1, const Tensor& pk2, const Tensor& pw,
                          const Tensor& pb) {
        Tape t;
        Value h = t.conv2d(t.constant(img), t.constant(pk1));
        h = t.pool2d(h, PoolKind::kAvg);
        h = t.conv2d(h, t.constant(pk2));
        h = t.global_avg_pool(h);
        h = t.dense(h, t.constant(pw), t.constant(pb));
        return t.value(t.softmax_cross_entropy(h, labels))[0];
    };

    Tape tape;
    const Value k1v = tape.param(k1);
    const Value k2v = tape.param(k2);
    const Value wv = tape.param(w);
    const Value bv = tape.param(b);
    Value h = tape.conv2d(tape.constant(img), k1v);
    h = tape.pool2d(h, PoolKind::kAvg);
    h = tape.conv2d(h, k2v);
    h = tape.global_avg_pool(h);
    h = tape.dense(h, wv, bv);
    tape.backward(tape.softmax_cross_entropy(h, labels));

    CHECK(max_rel_err(tape.grad(k1v), numeric_grad([&](const Tensor& p) { return loss_value(p, k2, w, b); }, k1)) < kGradTol);
    CHECK(max_rel_err(tape.grad(k2v), numeric_grad([&](const Tensor& p) { return loss_value(k1, p, w, b); }, k2)) < kGradTol);
    CHECK(max_rel_err(tape.grad(wv), numeric_grad([&](const Tensor& p) { return loss_value(k1, k2, p, b); }, w)) < kGradTol);
    CHECK(max_rel_err(tape.grad(bv), numeric_grad([&](const Tensor& p) { return loss_value(k1, k2, w, p); }, b)) < kGradTol);
}

TEST_CASE("forward passes are deterministic") {
    Rng rng(22);
    const Tensor in = random_tensor({1, 2, 6, 6}, rng);
    const Tensor k = random_tensor({2, 2, 5, 5}, rng);
    auto run = [&] {
        Tape t;
        return t.value(t.sum(t.pool2d(t.conv2d(t.constant(in), t.constant(k)), PoolKind::kMax)))[0];
    };
    CHECK(run() == run());
}

TEST_CASE("tensor shape/data invariants") {
    CHECK_THROWS_AS(Tensor({2, 3}, {1.0}), ShapeError);
    Rng rng(23);
    const Tensor in = random_tensor({1, 1, 3, 3}, rng);
    const Tensor k = random_tensor({1, 1, 3, 3}, rng);
    Tape tape;
    const Value out = tape.conv2d(tape.constant(in), tape.constant(k));
    CHECK(tape.value(out).all_finite());
}
