#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <vector>

#include "wmlab/autograd.hpp"
#include "wmlab/dataset.hpp"
#include "wmlab/error.hpp"
#include "wmlab/model.hpp"
#include "wmlab/param_vector.hpp"
#include "wmlab/rng.hpp"

namespace wmlab {

inline std::vector<int> shuffled_indices(int n, RngState& rng) {
    std::vector<int> idx(static_cast<std::size_t>(n));
    std::iota(idx.begin(), idx.end(), 0);
    for (int i = n - 1; i > 0; --i) {
        const int j = rng.index(i + 1);
        std::swap(idx[static_cast<std::size_t>(i)], idx[static_cast<std::size_t>(j)]);
    }
    return idx;
}

// Copy of image rows idx[begin, begin+count) as one batch tensor.
inline Tensor gather_rows(const Tensor& images, const std::vector<int>& idx, int begin, int count) {
    const int C = images.dim(1), H = images.dim(2), W = images.dim(3);
    const std::size_t row = static_cast<std::size_t>(C) * H * W;
    Tensor out({count, C, H, W});
    for (int r = 0; r < count; ++r) {
        const int i = idx[static_cast<std::size_t>(begin + r)];
        const double* src = images.data() + static_cast<std::size_t>(i) * row;
        std::copy(src, src + row, out.data() + static_cast<std::size_t>(r) * row);
    }
    return out;
}

inline std::vector<int> gather_labels(const std::vector<int>& labels, const std::vector<int>& idx, int begin,
                                      int count) {
    std::vector<int> out(static_cast<std::size_t>(count));
    for (int r = 0; r < count; ++r) out[static_cast<std::size_t>(r)] = labels[static_cast<std::size_t>(idx[static_cast<std::size_t>(begin + r)])];
    return out;
}

// First-maximum argmax per row of a [B,C] tensor.
inline std::vector<int> argmax_rows(const Tensor& logits) {
    const int B = logits.dim(0), C = logits.dim(1);
    std::vector<int> out(static_cast<std::size_t>(B));
    for (int b = 0; b < B; ++b) {
        int best = 0;
        for (int c = 1; c < C; ++c) {
            if (logits[static_cast<std::size_t>(b) * C + c] > logits[static_cast<std::size_t>(b) * C + best]) best = c;
        }
        out[static_cast<std::size_t>(b)] = best;
    }
    return out;
}

// Predicted classes for every row, evaluated in fixed-size chunks.
inline std::vector<int> predict(const Checkpoint& model, const Tensor& images, int chunk = 512) {
    if (chunk <= 0) throw ValueError("predict: chunk must be positive");
    const int n = images.dim(0);
    std::vector<int> order(static_cast<std::size_t>(n));
    std::iota(order.begin(), order.end(), 0);
    std::vector<int> out;
    out.reserve(static_cast<std::size_t>(n));
    for (int at = 0; at < n; at += chunk) {
        const int count = std::min(chunk, n - at);
        const Tensor batch = gather_rows(images, order, at, count);
        const std::vector<int> preds = argmax_rows(logits_of(model, batch));
        out.insert(out.end(), preds.begin(), preds.end());
    }
    return out;
}

inline double accuracy(const Checkpoint& model, const Tensor& images, const std::vector<int>& labels) {
    if (static_cast<int>(labels.size()) != images.dim(0)) {
        throw ValueError(detail::cat("accuracy: ", labels.size(), " labels for ", images.dim(0), " images"));
    }
    const std::vector<int> preds = predict(model, images);
    int hit = 0;
    for (std::size_t i = 0; i < labels.size(); ++i) hit += preds[i] == labels[i] ? 1 : 0;
    return static_cast<double>(hit) / static_cast<double>(labels.size());
}

inline double dataset_accuracy(const Checkpoint& model, const Dataset& data) {
    return accuracy(model, data.images, data.labels);
}

// Softmax probability (T = 1) each row assigns to its given label.
inline std::vector<double> label_confidences(const Checkpoint& model, const Tensor& images,
                                             const std::vector<int>& labels, int chunk = 512) {
    const int n = images.dim(0);
    if (static_cast<int>(labels.size()) != n) throw ValueError("label_confidences: label count mismatch");
    std::vector<int> order(static_cast<std::size_t>(n));
    std::iota(order.begin(), order.end(), 0);
    std::vector<double> out;
    out.reserve(static_cast<std::size_t>(n));
    for (int at = 0; at < n; at += chunk) {
        const int count = std::min(chunk, n - at);
        const Tensor probs = softmax_temperature(logits_of(model, gather_rows(images, order, at, count)), 1.0);
        const int C = probs.dim(1);
        for (int r = 0; r < count; ++r) {
            out.push_back(probs[static_cast<std::size_t>(r) * C + labels[static_cast<std::size_t>(at + r)]]);
        }
    }
    return out;
}

// Elastic penalty terms attached to a training step: (lambda/2) *
// sum_i fisher_i * (theta_i - anchor_i)^2 added to the batch loss.
struct EwcTerms {
    const ParamVector* anchor = nullptr;
    const std::vector<double>* fisher = nullptr;
    double lambda = 0.0;
};

// One SGD step on one batch.  Exactly one of hard_labels / soft_labels must
// be set.  Returns the scalar training loss (penalty included).  When `ewc`
// is null or lambda is zero no penalty nodes are built, so the computation
// is bit-identical to a plain cross-entropy step.
inline double sgd_batch_step(Checkpoint& model, const Tensor& batch, const std::vector<int>* hard_labels,
                             const Tensor* soft_labels, double lr, const EwcTerms* ewc = nullptr) {
    if ((hard_labels == nullptr) == (soft_labels == nullptr)) {
        throw ValueError("sgd_batch_step: pass exactly one of hard or soft labels");
    }
    ModelPass pass = forward_pass(model, batch);
    Tape& t = pass.tape;
    const int ce = hard_labels ? t.cross_entropy(pass.logits, *hard_labels)
                               : t.cross_entropy_soft(pass.logits, *soft_labels);
    int loss = ce;
    if (ewc && ewc->lambda > 0.0) {
        if (!ewc->anchor || !ewc->fisher) throw ValueError("sgd_batch_step: EWC terms need anchor and fisher");
        if (ewc->anchor->size() != model.params.size() || ewc->fisher->size() != model.params.size()) {
            throw ShapeError("sgd_batch_step: EWC anchor/fisher length mismatch");
        }
        std::vector<int> terms = {ce};
        for (int i = 0; i < model.params.entries(); ++i) {
            const LayoutEntry& e = model.params.entry(i);
            terms.push_back(t.quad_penalty(
                pass.param_leaves[static_cast<std::size_t>(i)],
                std::span<const double>(ewc->fisher->data() + e.offset, e.count),
                std::span<const double>(ewc->anchor->values().data() + e.offset, e.count), ewc->lambda / 2.0));
        }
        loss = t.add_scalars(terms);
    }
    t.backward(loss);
    const std::vector<double> grads = gather_param_grads(pass, model.params);
    sgd_step(model.params, grads, lr);
    return t.value(loss)[0];
}

struct TrainOptions {
    int epochs = 30;
    int batch_size = 100;
    double lr = 0.1;
};

// Plain SGD training with per-epoch reshuffling.  Batches are fixed-size;
// a trailing partial batch is dropped each epoch.  Returns mean loss of the
// final epoch.
inline double train_basic(Checkpoint& model, const Dataset& data, const TrainOptions& opt, RngState& rng) {
    if (opt.epochs < 0) throw ValueError("train_basic: negative epochs");
    if (opt.batch_size <= 0) throw ValueError("train_basic: batch_size must be positive");
    const int n = data.size();
    const int steps = n / opt.batch_size;
    if (steps == 0) throw ValueError(detail::cat("train_basic: dataset of ", n, " rows smaller than one batch of ",
                                                 opt.batch_size));
    double last_epoch_loss = 0.0;
    for (int epoch = 0; epoch < opt.epochs; ++epoch) {
        const std::vector<int> order = shuffled_indices(n, rng);
        double total = 0.0;
        for (int s = 0; s < steps; ++s) {
            const Tensor xb = gather_rows(data.images, order, s * opt.batch_size, opt.batch_size);
            const std::vector<int> yb = gather_labels(data.labels, order, s * opt.batch_size, opt.batch_size);
            total += sgd_batch_step(model, xb, &yb, nullptr, opt.lr);
        }
        last_epoch_loss = total / steps;
    }
    return last_epoch_loss;
}

// Fresh model trained on the given data; the standard way to produce clean
// reference models.
inline Checkpoint pretrain_model(const ModelSpec& spec, const Dataset& data, const TrainOptions& opt,
                                 RngState& rng) {
    RngState init_rng = rng.fork(0xA11);
    RngState train_rng = rng.fork(0xB22);
    Checkpoint model = init_model(spec, init_rng);
    train_basic(model, data, opt, train_rng);
    return model;
}

} // namespace wmlab
