#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "wmlab/model.hpp"

using wmlab::Checkpoint;
using wmlab::ModelSpec;
using wmlab::Tensor;

namespace {

ModelSpec mlp_spec() {
    ModelSpec s;
    s.kind = wmlab::ModelKind::Mlp;
    s.input = {1, 4, 4};
    s.hidden = {6, 5};
    s.num_classes = 3;
    return s;
}

ModelSpec conv_spec() {
    ModelSpec s;
    s.kind = wmlab::ModelKind::TinyConv;
    s.input = {1, 8, 8};
    s.channels = {4, 6};
    s.num_classes = 3;
    return s;
}

} // namespace

TEST_CASE("model spec json round-trips and rejects unknown keys") {
    const ModelSpec s = conv_spec();
    const ModelSpec back = ModelSpec::from_json(s.to_json());
    REQUIRE(back == s);
    auto j = s.to_json();
    j["weight_decay"] = 0.1;
    REQUIRE_THROWS_WITH(ModelSpec::from_json(j), Catch::Matchers::ContainsSubstring("weight_decay"));
}

TEST_CASE("spec validation catches geometry errors") {
    ModelSpec s = conv_spec();
    s.input = {1, 6, 6}; // 6 -> 3, not divisible again at block 2
    REQUIRE_THROWS_AS(s.validate(), wmlab::ValueError);
    ModelSpec m = mlp_spec();
    m.num_classes = 1;
    REQUIRE_THROWS_AS(m.validate(), wmlab::ValueError);
    m = mlp_spec();
    m.hidden = {4, 0};
    REQUIRE_THROWS_AS(m.validate(), wmlab::ValueError);
}

TEST_CASE("initialization is deterministic, fan-in bounded, biases zero") {
    wmlab::RngState r1(5), r2(5);
    const wmlab::ParamVector a = wmlab::init_params(mlp_spec(), r1);
    const wmlab::ParamVector b = wmlab::init_params(mlp_spec(), r2);
    REQUIRE(a.values() == b.values());
    for (int i = 0; i < a.entries(); ++i) {
        const auto& e = a.entry(i);
        if (e.name == "b") {
            for (double v : a.slice(i)) REQUIRE(v == 0.0);
        } else {
            const int fan_in = e.shape.size() == 2 ? e.shape[0] : e.shape[1] * e.shape[2] * e.shape[3];
            const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
            double spread = 0.0;
            for (double v : a.slice(i)) {
                REQUIRE(std::abs(v) <= bound);
                spread = std::max(spread, std::abs(v));
            }
            REQUIRE(spread > 0.1 * bound); // actually random, not degenerate
        }
    }
}

TEST_CASE("exponential weighting preserves sign, shrinks, and fixes the layer max") {
    // the acceptance gate runs the full 1000-layer version of this property
    wmlab::RngState rng(123);
    for (int trial = 0; trial < 200; ++trial) {
        const ModelSpec spec = trial % 2 == 0 ? mlp_spec() : conv_spec();
        wmlab::ParamVector p = wmlab::init_params(spec, rng);
        for (std::size_t i = 0; i < p.size(); ++i) p[i] = rng.uniform(-2.0, 2.0);
        const double T = rng.uniform(0.1, 4.0);
        const wmlab::ParamVector q = wmlab::apply_exponential_weighting(p, wmlab::EWConfig{T}, spec.layer_count());
        const std::vector<double> maxes = wmlab::layer_absmax(p, spec.layer_count());
        for (int e = 0; e < p.entries(); ++e) {
            const auto& ent = p.entry(e);
            for (std::size_t k = ent.offset; k < ent.offset + ent.count; ++k) {
                REQUIRE(std::abs(q[k]) <= std::abs(p[k]) + 1e-15);
                if (p[k] != 0.0) REQUIRE(std::signbit(q[k]) == std::signbit(p[k]));
                if (std::abs(p[k]) == maxes[static_cast<std::size_t>(ent.layer)]) {
                    REQUIRE(q[k] == p[k]); // the layer max is a fixed point, exactly
                }
            }
        }
    }
}

TEST_CASE("exponential weighting at tiny temperature is the identity") {
    wmlab::RngState rng(9);
    wmlab::ParamVector p = wmlab::init_params(mlp_spec(), rng);
    for (std::size_t i = 0; i < p.size(); ++i) p[i] = rng.uniform(-1.0, 1.0);
    const wmlab::ParamVector q =
        wmlab::apply_exponential_weighting(p, wmlab::EWConfig{1e-9}, mlp_spec().layer_count());
    for (std::size_t i = 0; i < p.size(); ++i) REQUIRE(std::abs(q[i] - p[i]) < 1e-6);
}

TEST_CASE("weights and biases of a layer share one max") {
    ModelSpec s;
    s.input = {2};
    s.hidden = {};
    s.num_classes = 2;
    wmlab::RngState rng(3);
    wmlab::ParamVector p = wmlab::init_params(s, rng);
    // w = [[0.5, -1.0]], b = [3.0, 0.0]: the layer max 3.0 lives in the bias
    p.set_entry(0, Tensor({2, 2}, {0.5, -1.0, 0.25, 0.75}));
    p.set_entry(1, Tensor({2}, {3.0, 0.0}));
    const auto maxes = wmlab::layer_absmax(p, s.layer_count());
    REQUIRE(maxes.size() == 1);
    REQUIRE(maxes[0] == 3.0);
    const wmlab::ParamVector q = wmlab::apply_exponential_weighting(p, wmlab::EWConfig{1.0}, 1);
    REQUIRE(q[0] == Catch::Approx(0.5 * std::exp(0.5 - 3.0)).epsilon(1e-13));
    const auto b = q.slice(1);
    REQUIRE(b[0] == 3.0); // fixed point
}

TEST_CASE("folding the reparameterization matches the wrapped forward") {
    wmlab::RngState rng(21);
    Checkpoint ck = wmlab::init_model(mlp_spec(), rng);
    ck.ew_temperature = 2.0;
    Tensor batch({2, 1, 4, 4});
    for (std::size_t i = 0; i < batch.size(); ++i) batch[i] = rng.uniform01();
    const Tensor wrapped = wmlab::logits_of(ck, batch);
    const Checkpoint folded = wmlab::fold_exponential_weighting(ck);
    REQUIRE_FALSE(folded.ew_temperature.has_value());
    const Tensor plain = wmlab::logits_of(folded, batch);
    for (std::size_t i = 0; i < wrapped.size(); ++i) REQUIRE(wrapped[i] == Catch::Approx(plain[i]).epsilon(1e-13));
    // folding a plain model is the identity
    const Checkpoint again = wmlab::fold_exponential_weighting(folded);
    REQUIRE(again.params.values() == folded.params.values());
}

TEST_CASE("mlp accepts both image-shaped and pre-flattened batches") {
    wmlab::RngState rng(31);
    const Checkpoint ck = wmlab::init_model(mlp_spec(), rng);
    Tensor img({2, 1, 4, 4});
    for (std::size_t i = 0; i < img.size(); ++i) img[i] = rng.uniform01();
    const Tensor flat = img.reshaped({2, 16});
    const Tensor a = wmlab::logits_of(ck, img);
    const Tensor b = wmlab::logits_of(ck, flat);
    REQUIRE(a.values() == b.values());
    REQUIRE(a.shape() == std::vector<int>{2, 3});
    REQUIRE_THROWS_AS(wmlab::logits_of(ck, Tensor({2, 15})), wmlab::ShapeError);
}

TEST_CASE("forward pass exposes one activation node per hidden block") {
    wmlab::RngState rng(41);
    const Checkpoint mlp = wmlab::init_model(mlp_spec(), rng);
    Tensor batch({1, 1, 4, 4});
    wmlab::ModelPass p1 = wmlab::forward_pass(mlp, batch);
    REQUIRE(p1.block_outputs.size() == 2);
    REQUIRE(p1.tape.value(p1.block_outputs[0]).shape() == std::vector<int>{1, 6});

    const Checkpoint conv = wmlab::init_model(conv_spec(), rng);
    Tensor img({1, 1, 8, 8});
    wmlab::ModelPass p2 = wmlab::forward_pass(conv, img);
    REQUIRE(p2.block_outputs.size() == 2);
    REQUIRE(p2.tape.value(p2.block_outputs[1]).shape() == std::vector<int>{1, 6, 2, 2});
}

TEST_CASE("entries untouched by the loss read back as zero gradients") {
    wmlab::RngState rng(51);
    const Checkpoint ck = wmlab::init_model(mlp_spec(), rng);
    Tensor batch({1, 1, 4, 4});
    wmlab::ModelPass pass = wmlab::forward_pass(ck, batch);
    // penalize only the output-layer weight leaf; the trunk gets no gradient
    const int head_w = ck.params.find(2, "w");
    const int leaf = pass.param_leaves[static_cast<std::size_t>(head_w)];
    const auto& e = ck.params.entry(head_w);
    const std::vector<double> f(e.count, 1.0), a(e.count, 0.0);
    pass.tape.backward(pass.tape.quad_penalty(leaf, f, a, 0.5));
    const std::vector<double> g = wmlab::gather_param_grads(pass, ck.params);
    for (std::size_t i = 0; i < g.size(); ++i) {
        const bool in_head_w = i >= e.offset && i < e.offset + e.count;
        if (!in_head_w) REQUIRE(g[i] == 0.0);
    }
    double head_norm = 0.0;
    for (std::size_t k = 0; k < e.count; ++k) head_norm += std::abs(g[e.offset + k]);
    REQUIRE(head_norm > 0.0);
}

TEST_CASE("output-layer reinit keeps the trunk bit-exact") {
    wmlab::RngState rng(61);
    const Checkpoint ck = wmlab::init_model(mlp_spec(), rng);
    wmlab::RngState reinit_rng(62);
    const Checkpoint re = wmlab::reinit_output_layer(ck, reinit_rng);
    REQUIRE(re.spec == ck.spec);
    const int head = ck.spec.layer_count() - 1;
    for (int i = 0; i < ck.params.entries(); ++i) {
        const auto& e = ck.params.entry(i);
        const auto a = ck.params.slice(i);
        const auto b = re.params.slice(i);
        if (e.layer != head) {
            for (std::size_t k = 0; k < e.count; ++k) REQUIRE(a[k] == b[k]);
        } else if (e.name == "w") {
            bool differs = false;
            for (std::size_t k = 0; k < e.count; ++k) differs = differs || a[k] != b[k];
            REQUIRE(differs);
        } else {
            for (std::size_t k = 0; k < e.count; ++k) REQUIRE(b[k] == 0.0);
        }
    }
}

TEST_CASE("output-layer reinit can change the class count") {
    wmlab::RngState rng(71);
    const Checkpoint ck = wmlab::init_model(mlp_spec(), rng);
    wmlab::RngState reinit_rng(72);
    const Checkpoint re = wmlab::reinit_output_layer(ck, reinit_rng, 5);
    REQUIRE(re.spec.num_classes == 5);
    Tensor batch({1, 1, 4, 4});
    REQUIRE(wmlab::logits_of(re, batch).shape() == std::vector<int>{1, 5});
}

TEST_CASE("output-layer reinit refuses a wrapped model") {
    wmlab::RngState rng(81);
    Checkpoint ck = wmlab::init_model(mlp_spec(), rng);
    ck.ew_temperature = 2.0;
    wmlab::RngState rr(82);
    REQUIRE_THROWS_WITH(wmlab::reinit_output_layer(ck, rr), Catch::Matchers::ContainsSubstring("fold"));
}
