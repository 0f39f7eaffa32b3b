#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "wmlab/train.hpp"

using namespace wmlab;

namespace {

ModelSpec mlp_spec(int classes = 3) {
    ModelSpec s;
    s.kind = ModelKind::Mlp;
    s.input = {1, 4, 4};
    s.hidden = {12};
    s.num_classes = classes;
    return s;
}

Dataset easy_data(int n_per_class, std::uint64_t seed) {
    auto spec = SyntheticSpec::make(3, 1, 4, 4, 0.08, 17);
    RngState rng(seed);
    return gen_synthetic(spec, n_per_class, rng);
}

} // namespace

TEST_CASE("shuffled_indices is a deterministic permutation", "[train]") {
    RngState a(5), b(5), c(6);
    auto p1 = shuffled_indices(20, a);
    auto p2 = shuffled_indices(20, b);
    auto p3 = shuffled_indices(20, c);
    REQUIRE(p1 == p2);
    REQUIRE(p1 != p3);
    auto sorted = p1;
    std::sort(sorted.begin(), sorted.end());
    for (int i = 0; i < 20; ++i) REQUIRE(sorted[static_cast<std::size_t>(i)] == i);
}

TEST_CASE("argmax_rows takes the first maximum on ties", "[train]") {
    Tensor logits({2, 3}, {1.0, 3.0, 3.0, -1.0, -1.0, -1.0});
    auto preds = argmax_rows(logits);
    REQUIRE(preds == std::vector<int>{1, 0});
}

TEST_CASE("predict chunking never changes the answer", "[train]") {
    Dataset d = easy_data(7, 3); // 21 rows
    RngState rng(1);
    Checkpoint model = init_model(mlp_spec(), rng);
    auto whole = predict(model, d.images, 512);
    auto tiny = predict(model, d.images, 4); // 21 = 5*4 + 1, forces a ragged tail
    REQUIRE(whole == tiny);
    REQUIRE(whole.size() == 21);
    REQUIRE_THROWS_AS(predict(model, d.images, 0), ValueError);
}

TEST_CASE("accuracy counts exact argmax hits", "[train]") {
    Dataset d = easy_data(4, 3);
    RngState rng(1);
    Checkpoint model = init_model(mlp_spec(), rng);
    auto preds = predict(model, d.images);
    int hits = 0;
    for (std::size_t i = 0; i < preds.size(); ++i) hits += preds[i] == d.labels[i] ? 1 : 0;
    REQUIRE(dataset_accuracy(model, d) == Catch::Approx(hits / 12.0).margin(1e-15));
    std::vector<int> short_labels(5, 0);
    REQUIRE_THROWS_AS(accuracy(model, d.images, short_labels), ValueError);
}

TEST_CASE("label_confidences returns the softmax mass of the given label", "[train]") {
    Dataset d = easy_data(2, 3);
    RngState rng(1);
    Checkpoint model = init_model(mlp_spec(), rng);
    auto conf = label_confidences(model, d.images, d.labels, 4);
    REQUIRE(conf.size() == 6);
    const Tensor probs = softmax_temperature(logits_of(model, d.images), 1.0);
    for (std::size_t i = 0; i < conf.size(); ++i) {
        REQUIRE(conf[i] == Catch::Approx(probs[i * 3 + static_cast<std::size_t>(d.labels[i])]).margin(1e-12));
        REQUIRE(conf[i] > 0.0);
        REQUIRE(conf[i] < 1.0);
    }
}

TEST_CASE("sgd_batch_step demands exactly one label kind", "[train]") {
    Dataset d = easy_data(2, 3);
    RngState rng(1);
    Checkpoint model = init_model(mlp_spec(), rng);
    std::vector<int> hard = d.labels;
    Tensor soft({6, 3});
    REQUIRE_THROWS_AS(sgd_batch_step(model, d.images, nullptr, nullptr, 0.1), ValueError);
    REQUIRE_THROWS_AS(sgd_batch_step(model, d.images, &hard, &soft, 0.1), ValueError);
}

TEST_CASE("a zero-lambda ewc step matches the plain step bitwise", "[train]") {
    Dataset d = easy_data(4, 3);
    RngState rng(1);
    Checkpoint plain = init_model(mlp_spec(), rng);
    Checkpoint with_terms = plain;

    ParamVector anchor = plain.params;
    std::vector<double> fisher(plain.params.size(), 1.0);
    EwcTerms terms{&anchor, &fisher, 0.0};

    const double l1 = sgd_batch_step(plain, d.images, &d.labels, nullptr, 0.05);
    const double l2 = sgd_batch_step(with_terms, d.images, &d.labels, nullptr, 0.05, &terms);
    REQUIRE(l1 == l2);
    REQUIRE(plain.params.values() == with_terms.params.values());
}

TEST_CASE("a positive ewc penalty pulls parameters toward the anchor", "[train]") {
    Dataset d = easy_data(4, 3);
    RngState rng(1);
    Checkpoint model = init_model(mlp_spec(), rng);
    ParamVector anchor = model.params; // start at the anchor: penalty gradient is zero here
    std::vector<double> fisher(model.params.size(), 1.0);

    Checkpoint free_model = model;
    sgd_batch_step(free_model, d.images, &d.labels, nullptr, 0.05);

    // lambda * fisher * lr must stay below 1 or the pull overshoots the
    // anchor and oscillates; 10 * 1 * 0.05 retracts half the gap per step
    Checkpoint tied = model;
    EwcTerms strong{&anchor, &fisher, 10.0};
    sgd_batch_step(tied, d.images, &d.labels, nullptr, 0.05, &strong);

    // after one step away from the anchor, a second tied step must land
    // closer to the anchor than a second free step does
    Checkpoint free2 = free_model, tied2 = free_model;
    sgd_batch_step(free2, d.images, &d.labels, nullptr, 0.05);
    sgd_batch_step(tied2, d.images, &d.labels, nullptr, 0.05, &strong);
    double dist_free = 0.0, dist_tied = 0.0;
    for (std::size_t i = 0; i < anchor.size(); ++i) {
        dist_free += std::pow(free2.params[i] - anchor[i], 2);
        dist_tied += std::pow(tied2.params[i] - anchor[i], 2);
    }
    REQUIRE(dist_tied < dist_free);

    EwcTerms missing{nullptr, &fisher, 1.0};
    REQUIRE_THROWS_AS(sgd_batch_step(model, d.images, &d.labels, nullptr, 0.05, &missing), ValueError);
    std::vector<double> short_fisher(3, 1.0);
    EwcTerms bad_len{&anchor, &short_fisher, 1.0};
    REQUIRE_THROWS_AS(sgd_batch_step(model, d.images, &d.labels, nullptr, 0.05, &bad_len), ShapeError);
}

TEST_CASE("train_basic learns blob classification", "[train]") {
    Dataset train = easy_data(40, 3);
    Dataset test = easy_data(20, 4);
    RngState init_rng(2), train_rng(9);
    Checkpoint model = init_model(mlp_spec(), init_rng);
    const double before = dataset_accuracy(model, test);

    TrainOptions opt;
    opt.epochs = 25;
    opt.batch_size = 20;
    opt.lr = 0.1;
    const double loss = train_basic(model, train, opt, train_rng);
    const double after = dataset_accuracy(model, test);

    REQUIRE(loss < 0.4);
    REQUIRE(after > 0.9);
    REQUIRE(after > before);
}

TEST_CASE("train_basic drops the trailing partial batch", "[train]") {
    Dataset d = easy_data(7, 3); // 21 rows
    RngState r1(4), r2(4);
    Checkpoint a = init_model(mlp_spec(), r1);
    Checkpoint b = a;

    // batch 21 with 21 rows: one full batch per epoch
    TrainOptions full{1, 21, 0.1};
    RngState ra(8);
    train_basic(a, d, full, ra);

    // batch 20 with 21 rows: also exactly one step, over the first 20 of the
    // same shuffle, so the models differ (different batch content)
    TrainOptions drop{1, 20, 0.1};
    RngState rb(8);
    train_basic(b, d, drop, rb);
    REQUIRE(a.params.values() != b.params.values());

    TrainOptions too_big{1, 22, 0.1};
    RngState rc(8);
    REQUIRE_THROWS_AS(train_basic(a, d, too_big, rc), ValueError);
    TrainOptions bad_batch{1, 0, 0.1};
    REQUIRE_THROWS_AS(train_basic(a, d, bad_batch, rc), ValueError);
    TrainOptions neg_epochs{-1, 5, 0.1};
    REQUIRE_THROWS_AS(train_basic(a, d, neg_epochs, rc), ValueError);
}

TEST_CASE("pretrain_model is deterministic and leaves the caller rng reusable", "[train]") {
    Dataset train = easy_data(20, 3);
    TrainOptions opt{8, 20, 0.1};

    RngState r1(77), r2(77);
    Checkpoint a = pretrain_model(mlp_spec(), train, opt, r1);
    Checkpoint b = pretrain_model(mlp_spec(), train, opt, r2);
    REQUIRE(a.params.values() == b.params.values());

    // pretrain forks rather than consuming: the parent stream is untouched
    RngState probe1(77), probe2(77);
    pretrain_model(mlp_spec(), train, opt, probe1);
    REQUIRE(probe1.next_u64() == probe2.next_u64());

    RngState r3(78);
    Checkpoint c = pretrain_model(mlp_spec(), train, opt, r3);
    REQUIRE(a.params.values() != c.params.values());
}
