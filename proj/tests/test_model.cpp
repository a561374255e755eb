#include <gtest/gtest.h>

#include <cmath>
#include <numeric>
#include <random>

#include "rlar/ad/graph.hpp"
#include "rlar/ad/ops.hpp"
#include "rlar/errors.hpp"
#include "rlar/model.hpp"

using namespace rlar;
using namespace rlar::model;
using ad::Tensor;

namespace {

Tensor random_tensor(std::mt19937_64& rng, ad::Shape shape, double lo = 0.0, double hi = 1.0) {
    std::uniform_real_distribution<double> u(lo, hi);
    std::vector<double> v(ad::numel(shape));
    for (double& e : v) e = u(rng);
    return Tensor(std::move(shape), std::move(v));
}

Tensor binary_tensor(std::mt19937_64& rng, ad::Shape shape) {
    std::bernoulli_distribution b(0.4);
    std::vector<double> v(ad::numel(shape));
    for (double& e : v) e = b(rng) ? 1.0 : 0.0;
    return Tensor(std::move(shape), std::move(v));
}

Tensor permute_rows(const Tensor& t, const std::vector<std::size_t>& order) {
    const std::size_t row = t.size() / t.dim(0);
    std::vector<double> v(t.size());
    for (std::size_t i = 0; i < order.size(); ++i)
        for (std::size_t j = 0; j < row; ++j) v[i * row + j] = t[order[i] * row + j];
    return Tensor(t.shape(), std::move(v));
}

bool same_values(const Tensor& a, const Tensor& b) {
    return a.shape() == b.shape() && std::equal(a.values().begin(), a.values().end(), b.values().begin());
}

}  // namespace

TEST(Model, OutputShapes) {
    std::mt19937_64 rng(1);
    const ModelState state = init_params(7);
    const ForwardOutputs out = forward(state, random_tensor(rng, {2, 1, 32, 32}));
    EXPECT_EQ(out.segmentation.shape(), (ad::Shape{2, 32, 32}));
    EXPECT_EQ(out.logits.shape(), (ad::Shape{2, 5}));
    EXPECT_EQ(out.embedding.shape(), (ad::Shape{2, 64}));
    EXPECT_EQ(out.bottleneck.shape(), (ad::Shape{2, 64, 2, 2}));
    EXPECT_EQ(out.hook(HookLayer::last_encoder).shape(), (ad::Shape{2, 64, 2, 2}));
    EXPECT_EQ(out.hook(HookLayer::mid_encoder).shape(), (ad::Shape{2, 16, 8, 8}));
    EXPECT_EQ(out.clinical().shape(), (ad::Shape{2, 13}));
    for (double v : out.segmentation.values()) {
        EXPECT_GE(v, 0.0);
        EXPECT_LE(v, 1.0);
    }
}

TEST(Model, RejectsIndivisibleInput) {
    const ModelState state = init_params(1);
    EXPECT_THROW(forward(state, Tensor::zeros({1, 1, 30, 32})), ad::ShapeError);
    EXPECT_THROW(forward(state, Tensor::zeros({1, 2, 32, 32})), ad::ShapeError);
}

TEST(Model, ZeroParametersGiveBias) {
    std::mt19937_64 rng(2);
    ModelState state = init_params(3);
    for (auto& p : state.params) p = Tensor::zeros(p.shape());
    state.at("classifier.bias") = Tensor({5}, {0.1, -0.2, 0.3, 0.0, 1.5});
    const ForwardOutputs out = forward(state, random_tensor(rng, {3, 1, 16, 16}));
    for (std::size_t i = 0; i < 3; ++i)
        for (std::size_t c = 0; c < 5; ++c) EXPECT_EQ(out.logits[i * 5 + c], state.at("classifier.bias")[c]);
    for (double v : out.segmentation.values()) EXPECT_EQ(v, 0.5);
}

TEST(Model, DecoderDoesNotTouchClassification) {
    std::mt19937_64 rng(3);
    const ModelState state = init_params(4);
    const Tensor x = random_tensor(rng, {2, 1, 32, 32});
    const ForwardOutputs base = forward(state, x);
    ModelState perturbed = state;
    for (std::size_t i = 0; i < perturbed.params.size(); ++i)
        if (is_decoder_param(perturbed.names[i]))
            perturbed.params[i] = random_tensor(rng, perturbed.params[i].shape(), -1.0, 1.0);
    const ForwardOutputs after = forward(perturbed, x);
    EXPECT_TRUE(same_values(base.logits, after.logits));
    EXPECT_TRUE(same_values(base.embedding, after.embedding));
    EXPECT_FALSE(same_values(base.segmentation, after.segmentation));
}

TEST(Model, ForwardIsDeterministic) {
    std::mt19937_64 rng(4);
    const ModelState state = init_params(5);
    const Tensor x = random_tensor(rng, {2, 1, 16, 16});
    const ForwardOutputs a = forward(state, x), b = forward(state, x);
    EXPECT_TRUE(same_values(a.segmentation, b.segmentation));
    EXPECT_TRUE(same_values(a.logits, b.logits));
}

TEST(Model, InitIsSeededAndBounded) {
    const ModelState a = init_params(11), b = init_params(11), c = init_params(12);
    bool any_diff = false;
    for (std::size_t i = 0; i < a.params.size(); ++i) {
        EXPECT_TRUE(same_values(a.params[i], b.params[i])) << a.names[i];
        any_diff = any_diff || !same_values(a.params[i], c.params[i]);
        const auto& shape = a.params[i].shape();
        EXPECT_EQ(shape, parameter_shape(a.names[i]));
        if (shape.size() < 2) continue;
        const double fan_in = static_cast<double>(a.params[i].size() / shape[0]);
        for (double v : a.params[i].values()) EXPECT_LE(std::abs(v), std::sqrt(6.0 / fan_in));
    }
    EXPECT_TRUE(any_diff);
}

TEST(Losses, DiceExamples) {
    // perfect overlap, area 10
    std::vector<double> m(25, 0.0);
    for (std::size_t i = 0; i < 10; ++i) m[i] = 1.0;
    const Tensor mask({1, 5, 5}, m);
    EXPECT_LE(dice_loss(mask, mask).item(), 1.0 / 21.0 + 1e-15);
    EXPECT_GE(dice_loss(mask, mask).item(), 0.0);

    std::vector<double> a(400, 0.0), b(400, 0.0);
    for (std::size_t i = 0; i < 100; ++i) {
        a[i] = 1.0;
        b[200 + i] = 1.0;
    }
    EXPECT_NEAR(dice_loss(Tensor({1, 20, 20}, a), Tensor({1, 20, 20}, b)).item(), 1.0 - 1.0 / 201.0, 1e-15);

    const Tensor s({1, 2, 4}, {1, 1, 1, 1, 0, 0, 0, 0});
    const Tensor t({1, 2, 4}, {0, 0, 1, 1, 1, 1, 0, 0});
    EXPECT_NEAR(dice_loss(s, t).item(), 1.0 - 5.0 / 9.0, 1e-15);
}

TEST(Losses, WeightedCrossEntropyExamples) {
    const double w5[] = {27.0, 2.0, 0.6, 0.6, 0.7};
    const int labels3[] = {0, 3, 4};
    EXPECT_NEAR(weighted_ce(Tensor::zeros({3, 5}), labels3, w5).item(), std::log(5.0), 1e-14);

    const int one[] = {2};
    EXPECT_LT(weighted_ce(Tensor({1, 5}, {0, 0, 60, 0, 0}), one, w5).item(), 1e-20);

    // row logits chosen so that the per-sample NLLs are exactly 1 and 4
    const double a = std::log(4.0 / (std::exp(1.0) - 1.0));
    const double b = std::log(4.0 / (std::exp(4.0) - 1.0));
    const Tensor logits({2, 2 + 3}, {a, 0, 0, 0, 0, 0, b, 0, 0, 0});
    const int labels[] = {0, 1};
    const double w[] = {2.0, 1.0, 1.0, 1.0, 1.0};
    EXPECT_NEAR(weighted_ce(logits, labels, w).item(), 2.0, 1e-12);
}

TEST(Losses, WeightedCrossEntropyErrors) {
    const double w[] = {1, 1, 1, 1, 1};
    const int bad[] = {5};
    EXPECT_THROW(weighted_ce(Tensor::zeros({1, 5}), bad, w), ValidationError);
    const int neg[] = {-1};
    EXPECT_THROW(weighted_ce(Tensor::zeros({1, 5}), neg, w), ValidationError);
    const int two[] = {0, 1};
    EXPECT_THROW(weighted_ce(Tensor::zeros({1, 5}), two, w), ad::ShapeError);
}

TEST(Losses, ClinicalExamples) {
    std::mt19937_64 rng(5);
    const Tensor r = random_tensor(rng, {2, 13});
    EXPECT_EQ(clin_loss(r, r).item(), 0.0);
    EXPECT_DOUBLE_EQ(clin_loss(Tensor::full({1, 13}, 1.0), Tensor::zeros({1, 13})).item(), 13.0);
    std::vector<double> d(26, 0.0);
    d[0] = 1.0;
    d[1] = 1.0;  // norm^2 2
    d[13] = 2.0;  // norm^2 4
    EXPECT_DOUBLE_EQ(clin_loss(Tensor({2, 13}, d), Tensor::zeros({2, 13})).item(), 3.0);
    EXPECT_THROW(clin_loss(Tensor::zeros({2, 13}), Tensor::zeros({2, 12})), ad::ShapeError);
}

TEST(Losses, BatchPermutationInvariant) {
    std::mt19937_64 rng(6);
    std::uniform_int_distribution<int> cls(0, 4);
    const double w[] = {3.0, 1.0, 0.5, 0.7, 2.0};
    for (int trial = 0; trial < 10; ++trial) {
        const Tensor pred = random_tensor(rng, {6, 8, 8});
        const Tensor mask = binary_tensor(rng, {6, 8, 8});
        const Tensor logits = random_tensor(rng, {6, 5}, -3.0, 3.0);
        std::vector<int> labels(6);
        for (int& y : labels) y = cls(rng);
        std::vector<std::size_t> order(6);
        std::iota(order.begin(), order.end(), 0);
        std::shuffle(order.begin(), order.end(), rng);
        std::vector<int> shuffled(6);
        for (std::size_t i = 0; i < 6; ++i) shuffled[i] = labels[order[i]];
        EXPECT_NEAR(dice_loss(pred, mask).item(),
                    dice_loss(permute_rows(pred, order), permute_rows(mask, order)).item(), 1e-12);
        EXPECT_NEAR(weighted_ce(logits, labels, w).item(),
                    weighted_ce(permute_rows(logits, order), shuffled, w).item(), 1e-12);
    }
}

TEST(Losses, ParameterGradientsMatchFiniteDifferences) {
    std::mt19937_64 rng(7);
    const ModelState state = init_params(8);
    const Tensor x = random_tensor(rng, {2, 1, 16, 16});
    const Tensor mask = binary_tensor(rng, {2, 16, 16});
    const Tensor targets = random_tensor(rng, {2, 13}, -1.0, 1.0);
    const int labels[] = {1, 4};
    const double w[] = {1.0, 2.0, 0.5, 1.5, 0.8};

    using LossFn = std::function<Tensor(const ForwardOutputs&)>;
    const std::pair<const char*, LossFn> losses[] = {
        {"dice", [&](const ForwardOutputs& o) { return dice_loss(o.segmentation, mask); }},
        {"ce", [&](const ForwardOutputs& o) { return weighted_ce(o.logits, labels, w); }},
        {"clin", [&](const ForwardOutputs& o) { return clin_loss(o.clinical(), targets); }},
    };
    const double h = 1e-6;
    for (const auto& [name, loss] : losses) {
        ad::Graph g;
        const ModelState leaves = attach(g, state);
        const auto r = g.grad(loss(forward(leaves, x)), leaves.params, false);
        for (std::size_t p = 0; p < state.params.size(); ++p) {
            if (!r.reachable[p]) continue;
            std::uniform_int_distribution<std::size_t> pick(0, state.params[p].size() - 1);
            for (int k = 0; k < 5; ++k) {
                const std::size_t i = pick(rng);
                auto probe = [&](double delta) {
                    ModelState s = state;
                    std::vector<double> v(s.params[p].values().begin(), s.params[p].values().end());
                    v[i] += delta;
                    s.params[p] = Tensor(s.params[p].shape(), std::move(v));
                    return loss(forward(s, x)).item();
                };
                const double numeric = (probe(h) - probe(-h)) / (2 * h);
                const double analytic = r.grads[p][i];
                const double err = std::abs(analytic - numeric) / std::max(std::abs(numeric), 1e-6);
                EXPECT_LT(err, 1e-3) << name << " " << state.names[p] << "[" << i << "] analytic "
                                     << analytic << " numeric " << numeric;
            }
        }
    }
}

TEST(Losses, ReachabilityFollowsTheHeads) {
    std::mt19937_64 rng(9);
    const ModelState state = init_params(9);
    const Tensor x = random_tensor(rng, {2, 1, 16, 16});
    ad::Graph g;
    const ModelState leaves = attach(g, state);
    const ForwardOutputs out = forward(leaves, x);
    const auto clin = g.grad(clin_loss(out.clinical(), random_tensor(rng, {2, 13})), leaves.params, false);
    const auto dice = g.grad(dice_loss(out.segmentation, binary_tensor(rng, {2, 16, 16})), leaves.params, false);
    for (std::size_t p = 0; p < leaves.params.size(); ++p) {
        const std::string& name = leaves.names[p];
        if (is_decoder_param(name)) {
            EXPECT_FALSE(clin.reachable[p]) << name;
            for (double v : clin.grads[p].values()) EXPECT_EQ(v, 0.0);
        }
        if (name.starts_with("head") || name.starts_with("classifier")) {
            EXPECT_FALSE(dice.reachable[p]) << name;
        }
        if (name.starts_with("enc")) {
            EXPECT_TRUE(clin.reachable[p]) << name;
            EXPECT_TRUE(dice.reachable[p]) << name;
        }
    }
    EXPECT_FALSE(clin.reachable[leaves.index_of("classifier.weight")]);
}

TEST(Model, PredictUsesImagesOnly) {
    std::mt19937_64 rng(10);
    const ModelState state = init_params(10);
    const Tensor x = random_tensor(rng, {3, 1, 16, 16});
    const Prediction p = predict(state, x);
    const ForwardOutputs out = forward(state, x);
    EXPECT_TRUE(same_values(p.logits, out.logits));
    ASSERT_EQ(p.labels.size(), 3u);
    for (std::size_t i = 0; i < 3; ++i) {
        const auto row = out.logits.values().subspan(i * 5, 5);
        EXPECT_EQ(p.labels[i], std::max_element(row.begin(), row.end()) - row.begin());
    }
    EXPECT_FALSE(p.logits.has_node());
}
