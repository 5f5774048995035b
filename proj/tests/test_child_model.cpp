#include <doctest.h>

#include <cmath>

#include "metanas/child_model.hpp"
#include "metanas/optim.hpp"
#include "support/finite_diff.hpp"

using namespace metanas;
using testing::random_tensor;

namespace {

ModelConfig small_cfg() {
    ModelConfig cfg;
    cfg.base_channels = 4;
    cfg.image_size = 8;
    return cfg;
}

ArchitectureString arch_from(const std::string& text) { return parse_architecture(text); }

Tensor random_images(std::size_t batch, const ModelConfig& cfg, std::uint64_t seed) {
    Rng rng(seed);
    return random_tensor({batch, cfg.image_channels, cfg.image_size, cfg.image_size}, rng, 0.0,
                         1.0);
}

}  // namespace

TEST_CASE("build validation") {
    const ModelConfig cfg = small_cfg();
    SharedWeightBank bank(3, 5, cfg, 1);
    CHECK_THROWS_AS(build(bank, decode(arch_from("conv3")), 1, BuildMode::kShared), ConfigError);
    CHECK_THROWS_AS(
        build(bank, decode(arch_from("conv3; conv3 skips=0; conv3 skips=00; conv3 skips=000")), 5,
              BuildMode::kShared),
        ConfigError);
    CHECK_THROWS_AS(SharedWeightBank(3, 1, cfg, 1), ConfigError);
}

TEST_CASE("shared mode aliases parameters between builds") {
    const ModelConfig cfg = small_cfg();
    SharedWeightBank bank(2, 5, cfg, 2);
    const DagSpec dag = decode(arch_from("conv3; sep5 skips=0"));
    ChildNetwork a = build(bank, dag, 5, BuildMode::kShared);
    ChildNetwork b = build(bank, dag, 5, BuildMode::kShared);
    const Tensor images = random_images(2, cfg, 3);

    const Tensor before = b.forward(images);
    (*a.params()[0])[0] += 0.25;  // perturb a's layer-1 conv kernel
    const Tensor after = b.forward(images);
    CHECK_FALSE(before == after);
    // and the change is identical through either view
    CHECK(a.forward(images) == after);
}

TEST_CASE("fresh mode isolates parameters") {
    const ModelConfig cfg = small_cfg();
    SharedWeightBank bank(2, 5, cfg, 4);
    const DagSpec dag = decode(arch_from("conv3; conv5 skips=0"));
    ChildNetwork a = build(bank, dag, 5, BuildMode::kFresh, 10);
    ChildNetwork b = build(bank, dag, 5, BuildMode::kFresh, 11);
    const Tensor images = random_images(2, cfg, 5);
    const Tensor before = b.forward(images);
    for (Tensor* p : a.params())
        for (std::size_t i = 0; i < p->size(); ++i) (*p)[i] += 0.5;
    CHECK(b.forward(images) == before);
}

TEST_CASE("fresh initialization is seed-deterministic") {
    const ModelConfig cfg = small_cfg();
    SharedWeightBank bank(2, 5, cfg, 6);
    const DagSpec dag = decode(arch_from("sep3; maxpool3 skips=0"));
    ChildNetwork a = build(bank, dag, 5, BuildMode::kFresh, 42);
    ChildNetwork b = build(bank, dag, 5, BuildMode::kFresh, 42);
    ChildNetwork c = build(bank, dag, 5, BuildMode::kFresh, 43);
    CHECK(a.param_vector() == b.param_vector());
    CHECK_FALSE(a.param_vector() == c.param_vector());
}

TEST_CASE("two dags differing at layer 2 alias layer 1 and separate layer 2") {
    const ModelConfig cfg = small_cfg();
    SharedWeightBank bank(2, 5, cfg, 7);
    ChildNetwork a = build(bank, decode(arch_from("conv3; conv5 skips=0")), 5, BuildMode::kShared);
    ChildNetwork b = build(bank, decode(arch_from("conv3; sep7 skips=0")), 5, BuildMode::kShared);
    CHECK(a.params()[0] == b.params()[0]);       // same underlying tensor
    CHECK(a.params()[1] != b.params()[1]);       // disjoint op entries
    CHECK(a.params()[a.params().size() - 2] == b.params()[b.params().size() - 2]);  // head shared
}

TEST_CASE("all-zero parameters give zero logits and ln N loss") {
    const ModelConfig cfg = small_cfg();
    SharedWeightBank bank(2, 5, cfg, 8);
    ChildNetwork net = build(bank, decode(arch_from("conv3; avgpool3 skips=0")), 5,
                             BuildMode::kShared);
    MetaParams zeros(net.param_count(), 0.0);
    net.load_param_vector(zeros);
    const Tensor images = random_images(3, cfg, 9);
    const Tensor logits = net.forward(images);
    for (std::size_t i = 0; i < logits.size(); ++i) CHECK(logits[i] == 0.0);
    const auto result = net.loss_and_grads(images, {0, 3, 2});
    CHECK(result.loss == doctest::Approx(std::log(5.0)).epsilon(1e-12));
}

TEST_CASE("single conv3 layer equals a hand-wired conv->gap->dense oracle") {
    const ModelConfig cfg = small_cfg();
    SharedWeightBank bank(1, 3, cfg, 10);
    ChildNetwork net = build(bank, decode(arch_from("conv3")), 3, BuildMode::kShared);
    const Tensor images = random_images(2, cfg, 11);
    const Tensor logits = net.forward(images);

    Tape oracle;
    const Value conv = oracle.conv2d(oracle.constant(images),
                                     oracle.constant(*bank.kernel(0, OpId::kConv3)));
    const Value gap = oracle.global_avg_pool(conv);
    // head rows are sliced to the terminal depth (base_channels here)
    const Value head_w = oracle.narrow(oracle.constant(*bank.head_weight()), 0, 0,
                                       cfg.base_channels);
    const Value expect = oracle.dense(gap, head_w, oracle.constant(*bank.head_bias()));
    const Tensor& want = oracle.value(expect);
    REQUIRE(want.shape() == logits.shape());
    for (std::size_t i = 0; i < want.size(); ++i)
        CHECK(logits[i] == doctest::Approx(want[i]).epsilon(1e-12));
}

TEST_CASE("permuting the batch permutes logits rows identically") {
    const ModelConfig cfg = small_cfg();
    SharedWeightBank bank(3, 4, cfg, 12);
    ChildNetwork net = build(
        bank, decode(arch_from("conv3; maxpool3 skips=1; sep5 skips=10")), 4, BuildMode::kShared);
    const Tensor images = random_images(3, cfg, 13);
    Tensor permuted(images.shape());
    const std::size_t plane = cfg.image_size * cfg.image_size;
    const std::size_t order[3] = {2, 0, 1};
    for (std::size_t b = 0; b < 3; ++b)
        std::copy(images.data() + order[b] * plane, images.data() + (order[b] + 1) * plane,
                  permuted.data() + b * plane);
    const Tensor base = net.forward(images);
    const Tensor perm = net.forward(permuted);
    for (std::size_t b = 0; b < 3; ++b)
        for (std::size_t j = 0; j < 4; ++j)
            CHECK(perm.at2(b, j) == base.at2(order[b], j));
}

TEST_CASE("param_vector round trip, zero load, audited length") {
    const ModelConfig cfg = small_cfg();  // base_channels 4, 1 input channel
    SharedWeightBank bank(2, 5, cfg, 14);
    ChildNetwork net = build(bank, decode(arch_from("conv3; sep5 skips=0")), 5,
                             BuildMode::kShared);
    // audit: conv3 at layer0: 4*1*3*3 = 36; sep5 at layer1: depthwise 4*5*5=100
    // + pointwise 4*4*1*1 = 16; head: (2*4)*5 = 40 + 5
    CHECK(net.param_count() == 36 + 100 + 16 + 40 + 5);

    const MetaParams theta = net.param_vector();
    MetaParams reversed(theta.rbegin(), theta.rend());
    net.load_param_vector(reversed);
    CHECK(net.param_vector() == reversed);
    net.load_param_vector(theta);
    CHECK(net.param_vector() == theta);

    net.load_param_vector(MetaParams(net.param_count(), 0.0));
    const Tensor logits = net.forward(random_images(1, cfg, 15));
    for (std::size_t i = 0; i < logits.size(); ++i) CHECK(logits[i] == 0.0);

    CHECK_THROWS_AS(net.load_param_vector(MetaParams(3, 0.0)), ShapeError);
}

TEST_CASE("kernel slicing uses exactly the leading input-channel slices") {
    const ModelConfig cfg = small_cfg();
    SharedWeightBank bank(3, 5, cfg, 16);
    // layer 2 consumes only its chain predecessor: depth 4 of the possible 8
    ChildNetwork net = build(bank, decode(arch_from("conv3; conv3 skips=0; conv5 skips=00")), 5,
                             BuildMode::kShared);
    const Tensor images = random_images(2, cfg, 17);
    const Tensor before = net.forward(images);
    // zero the unused trailing input-channel slices of layer 2's conv5 kernel
    Tensor& k = *bank.kernel(2, OpId::kConv5);
    REQUIRE(k.dim(1) == 8);
    for (std::size_t f = 0; f < k.dim(0); ++f)
        for (std::size_t c = 4; c < 8; ++c)
            for (std::size_t i = 0; i < 25; ++i) k[(f * 8 + c) * 25 + i] = 0.0;
    CHECK(net.forward(images) == before);
    // zeroing a used slice changes the output
    k[0] = k[0] + 1.0;
    CHECK_FALSE(net.forward(images) == before);
}

TEST_CASE("training one architecture changes another that shares a layer") {
    const ModelConfig cfg = small_cfg();
    SharedWeightBank bank(2, 5, cfg, 18);
    ChildNetwork a = build(bank, decode(arch_from("conv3; conv5 skips=0")), 5, BuildMode::kShared);
    ChildNetwork b = build(bank, decode(arch_from("conv3; maxpool3 skips=0")), 5,
                           BuildMode::kShared);
    const Tensor images = random_images(4, cfg, 19);
    const Tensor b_before = b.forward(images);
    const Tensor b_layer2_before = *bank.kernel(1, OpId::kMaxPool3);
    const Tensor a_layer2_before = *bank.kernel(1, OpId::kConv5);

    for (int step = 0; step < 3; ++step) {
        const auto r = a.loss_and_grads(images, {0, 1, 2, 3});
        sgd_step(a.params(), r.grads, 0.1);
    }
    CHECK_FALSE(b.forward(images) == b_before);                      // sharing is real
    CHECK(*bank.kernel(1, OpId::kMaxPool3) == b_layer2_before);      // disjoint op untouched
    CHECK_FALSE(*bank.kernel(1, OpId::kConv5) == a_layer2_before);   // trained op moved
}

TEST_CASE("forward validates image shape") {
    const ModelConfig cfg = small_cfg();
    SharedWeightBank bank(1, 5, cfg, 20);
    ChildNetwork net = build(bank, decode(arch_from("conv3")), 5, BuildMode::kShared);
    CHECK_THROWS_AS(net.forward(Tensor({1, 1, 4, 4})), ShapeError);
    CHECK_THROWS_AS(net.forward(Tensor({1, 2, 8, 8})), ShapeError);
}

TEST_CASE("skip concatenation feeds ascending layer order") {
    // depth-3 arch where layer 3 consumes layers 1 and 2: reordering the
    // concat would change which kernel slices see which channels
    const ModelConfig cfg = small_cfg();
    SharedWeightBank bank(3, 5, cfg, 21);
    ChildNetwork net = build(bank, decode(arch_from("conv3; conv3 skips=0; conv3 skips=10")), 5,
                             BuildMode::kShared);
    CHECK(net.dag().layers[2].inputs == std::vector<std::size_t>{0, 1});
    const Tensor images = random_images(1, cfg, 22);
    const Tensor logits = net.forward(images);
    CHECK(logits.all_finite());
    CHECK(logits.dim(0) == 1);
    CHECK(logits.dim(1) == 5);
}

TEST_CASE("loss gradients match finite differences through a shared network") {
    const ModelConfig cfg = small_cfg();
    SharedWeightBank bank(2, 3, cfg, 23);
    ChildNetwork net = build(bank, decode(arch_from("sep3; avgpool3 skips=0")), 3,
                             BuildMode::kShared);
    const Tensor images = random_images(2, cfg, 24);
    const std::vector<int> labels = {1, 2};
    const auto analytic = net.loss_and_grads(images, labels);
    const auto params = net.params();
    // check one kernel and the head weight
    for (const std::size_t which : {std::size_t{0}, params.size() - 2}) {
        const Tensor numeric = testing::numeric_grad(
            [&](const Tensor& probe) {
                const Tensor saved = *params[which];
                *params[which] = probe;
                Tape t;
                const Tensor logits = net.forward(images);
                *params[which] = saved;
                // cross entropy of the logits
                double loss = 0.0;
                for (std::size_t b = 0; b < 2; ++b) {
                    const double* row = logits.data() + b * 3;
                    double m = std::max({row[0], row[1], row[2]});
                    double z = 0.0;
                    for (int j = 0; j < 3; ++j) z += std::exp(row[j] - m);
                    loss -= row[labels[b]] - m - std::log(z);
                }
                return loss / 2.0;
            },
            *params[which]);
        CHECK(testing::max_rel_err(analytic.grads[which], numeric) < 1e-4);
    }
}

TEST_CASE("dropout in the child model is deterministic per seed and off at eval") {
    ModelConfig cfg = small_cfg();
    cfg.dropout_enabled = true;
    cfg.dropout_rate = 0.25;
    SharedWeightBank bank(1, 5, cfg, 25);
    ChildNetwork net = build(bank, decode(arch_from("conv3")), 5, BuildMode::kShared);
    const Tensor images = random_images(2, cfg, 26);
    CHECK(net.forward(images) == net.forward(images));  // eval: no dropout, no rng needed
    Rng d1(5), d2(5), d3(6);
    const auto a = net.loss_and_grads(images, {0, 1}, true, &d1);
    const auto b = net.loss_and_grads(images, {0, 1}, true, &d2);
    const auto c = net.loss_and_grads(images, {0, 1}, true, &d3);
    CHECK(a.loss == b.loss);
    CHECK(a.loss != c.loss);
    CHECK_THROWS_AS(net.loss_and_grads(images, {0, 1}, true, nullptr), ConfigError);
}
