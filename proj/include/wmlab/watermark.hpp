#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "wmlab/dataset.hpp"
#include "wmlab/defaults.hpp"
#include "wmlab/error.hpp"
#include "wmlab/model.hpp"
#include "wmlab/rng.hpp"
#include "wmlab/train.hpp"
#include "wmlab/watermark_set.hpp"

namespace wmlab {

// Blend key for the pattern scheme: on masked pixels the image becomes
// (1-alpha) * x + alpha * value; elsewhere it is untouched.  Every key image
// is assigned `target_label`.
struct PatternKey {
    Tensor mask;   // [C,H,W], entries 0 or 1
    Tensor values; // [C,H,W], entries in [0,1]
    double alpha = 0.6;
    int target_label = 0;

    void validate() const {
        if (mask.rank() != 3 || !mask.same_shape(values)) {
            throw ShapeError("PatternKey: mask and values must both be [C,H,W]");
        }
        if (!(alpha > 0.0 && alpha <= 1.0)) throw ValueError(detail::cat("PatternKey: alpha ", alpha, " outside (0,1]"));
        if (target_label < 0) throw ValueError("PatternKey: negative target label");
        bool any = false;
        for (double m : mask.values()) {
            if (m != 0.0 && m != 1.0) throw ValueError("PatternKey: mask entries must be 0 or 1");
            any = any || m == 1.0;
        }
        for (double v : values.values()) {
            if (v < 0.0 || v > 1.0) throw ValueError("PatternKey: pattern values must lie in [0,1]");
        }
        if (!any) throw ValueError("PatternKey: mask selects no pixels");
    }

    // A block-edge corner window holding an alternating bright/dark texture;
    // the standard toy key.  Only the window is touched, so the rest of the
    // image keeps its class evidence.
    static PatternKey checkerboard(int c, int h, int w, int block = 3, double alpha = 1.0, int target_label = 0) {
        if (block <= 0) throw ValueError("PatternKey: block must be positive");
        if (block > h || block > w) throw ValueError("PatternKey: block exceeds the image");
        PatternKey key;
        key.mask = Tensor({c, h, w});
        key.values = Tensor({c, h, w});
        key.alpha = alpha;
        key.target_label = target_label;
        for (int ch = 0; ch < c; ++ch) {
            for (int y = 0; y < block; ++y) {
                for (int x = 0; x < block; ++x) {
                    const std::size_t i =
                        (static_cast<std::size_t>(ch) * h + static_cast<std::size_t>(y)) * w + static_cast<std::size_t>(x);
                    key.mask[i] = 1.0;
                    key.values[i] = (y + x) % 2 == 0 ? 1.0 : 0.0;
                }
            }
        }
        key.validate();
        return key;
    }
};

inline Tensor apply_pattern(const Tensor& image, const PatternKey& key) {
    if (image.shape() != key.mask.shape()) {
        throw ShapeError(detail::cat("apply_pattern: image ", Tensor::shape_string(image.shape()), " vs key ",
                                     Tensor::shape_string(key.mask.shape())));
    }
    Tensor out = image;
    for (std::size_t i = 0; i < out.size(); ++i) {
        if (key.mask[i] == 1.0) out[i] = (1.0 - key.alpha) * out[i] + key.alpha * key.values[i];
    }
    return out;
}

namespace detail {

// First k of a seeded permutation of [0, n): a uniform draw without
// replacement.
inline std::vector<int> sample_without_replacement(int n, int k, RngState& rng) {
    if (k > n) throw ValueError(detail::cat("cannot draw ", k, " distinct items from ", n));
    std::vector<int> idx(static_cast<std::size_t>(n));
    std::iota(idx.begin(), idx.end(), 0);
    for (int i = 0; i < k; ++i) {
        const int j = i + rng.index(n - i);
        std::swap(idx[static_cast<std::size_t>(i)], idx[static_cast<std::size_t>(j)]);
    }
    idx.resize(static_cast<std::size_t>(k));
    return idx;
}

} // namespace detail

// Pattern scheme: k distinct training images, blended with the key, all
// assigned the key's target label.
inline WatermarkSet gen_pattern_watermarks(const Dataset& data, const PatternKey& key, int k, RngState& rng) {
    key.validate();
    if (k < 1) throw ValueError("gen_pattern_watermarks: k must be >= 1");
    if (key.target_label >= data.num_classes) {
        throw ValueError(detail::cat("gen_pattern_watermarks: target label ", key.target_label, " outside [0,",
                                     data.num_classes, ")"));
    }
    if (data.image_dims() != key.mask.shape()) {
        throw ShapeError("gen_pattern_watermarks: key shape does not match the dataset images");
    }
    const std::vector<int> picks = detail::sample_without_replacement(data.size(), k, rng);
    WatermarkSet wm;
    wm.scheme = WatermarkScheme::Pattern;
    wm.num_classes = data.num_classes;
    const auto dims = data.image_dims();
    wm.samples = Tensor({k, dims[0], dims[1], dims[2]});
    const std::size_t row = wm.samples.size() / static_cast<std::size_t>(k);
    for (int r = 0; r < k; ++r) {
        const int i = picks[static_cast<std::size_t>(r)];
        Tensor img(dims);
        std::copy(data.images.data() + static_cast<std::size_t>(i) * row,
                  data.images.data() + static_cast<std::size_t>(i + 1) * row, img.data());
        const Tensor keyed = apply_pattern(img, key);
        std::copy(keyed.data(), keyed.data() + row, wm.samples.data() + static_cast<std::size_t>(r) * row);
        wm.assigned_labels.push_back(key.target_label);
        wm.provenance.push_back({i, data.labels[static_cast<std::size_t>(i)], false});
    }
    wm.validate();
    return wm;
}

// Out-of-distribution scheme: k images drawn from a foreign pool, each with
// an independently uniform random label.
inline WatermarkSet gen_ood_watermarks(const Dataset& pool, int k, int num_classes, RngState& rng) {
    if (k < 1) throw ValueError("gen_ood_watermarks: k must be >= 1");
    if (num_classes < 2) throw ValueError("gen_ood_watermarks: num_classes must be >= 2");
    const std::vector<int> picks = detail::sample_without_replacement(pool.size(), k, rng);
    WatermarkSet wm;
    wm.scheme = WatermarkScheme::Ood;
    wm.num_classes = num_classes;
    const auto dims = pool.image_dims();
    wm.samples = Tensor({k, dims[0], dims[1], dims[2]});
    const std::size_t row = wm.samples.size() / static_cast<std::size_t>(k);
    for (int r = 0; r < k; ++r) {
        const int i = picks[static_cast<std::size_t>(r)];
        std::copy(pool.images.data() + static_cast<std::size_t>(i) * row,
                  pool.images.data() + static_cast<std::size_t>(i + 1) * row,
                  wm.samples.data() + static_cast<std::size_t>(r) * row);
        wm.assigned_labels.push_back(rng.index(num_classes));
        wm.provenance.push_back({i, pool.labels[static_cast<std::size_t>(i)], false});
    }
    wm.validate();
    return wm;
}

// Exponential-weighting scheme key set: the last k training images, each
// relabeled to a uniformly random *wrong* class.  The caller trains with
// these labels in place (see embed_ew).
inline WatermarkSet gen_ew_watermarks(const Dataset& train, int k, RngState& rng) {
    if (k < 1) throw ValueError("gen_ew_watermarks: k must be >= 1");
    if (k > train.size()) throw ValueError(detail::cat("gen_ew_watermarks: k=", k, " exceeds dataset size ", train.size()));
    if (train.num_classes < 2) throw ValueError("gen_ew_watermarks: need at least two classes");
    WatermarkSet wm;
    wm.scheme = WatermarkScheme::Ew;
    wm.num_classes = train.num_classes;
    const auto dims = train.image_dims();
    wm.samples = Tensor({k, dims[0], dims[1], dims[2]});
    const std::size_t row = wm.samples.size() / static_cast<std::size_t>(k);
    for (int r = 0; r < k; ++r) {
        const int i = train.size() - k + r;
        std::copy(train.images.data() + static_cast<std::size_t>(i) * row,
                  train.images.data() + static_cast<std::size_t>(i + 1) * row,
                  wm.samples.data() + static_cast<std::size_t>(r) * row);
        const int truth = train.labels[static_cast<std::size_t>(i)];
        const int draw = rng.index(train.num_classes - 1);
        wm.assigned_labels.push_back(draw >= truth ? draw + 1 : draw);
        wm.provenance.push_back({i, truth, false});
    }
    wm.validate();
    return wm;
}

// One fast-gradient-sign step on a batch: x + eps * sign(dJ/dx), clipped to
// [0,1].  eps = 0 returns the input unchanged.
inline Tensor fgsm(const Checkpoint& model, const Tensor& batch, const std::vector<int>& labels, double eps) {
    if (eps < 0.0) throw ValueError(detail::cat("fgsm: eps must be >= 0, got ", eps));
    ModelPass pass = forward_pass(model, batch, {.param_grads = false, .input_grad = true});
    const int loss = pass.tape.cross_entropy(pass.logits, labels);
    pass.tape.backward(loss);
    Tensor out = batch;
    if (pass.tape.has_gradient(pass.input)) {
        const Tensor& g = pass.tape.gradient(pass.input);
        for (std::size_t i = 0; i < out.size(); ++i) {
            const double s = g[i] > 0.0 ? 1.0 : (g[i] < 0.0 ? -1.0 : 0.0);
            out[i] = std::clamp(out[i] + eps * s, 0.0, 1.0);
        }
    }
    return out;
}

struct AdvConfig {
    double epsilon = 0.3;
    int scan_chunk = 200; // candidates perturbed per forward batch

    void validate() const {
        if (epsilon < 0.0) throw ValueError("AdvConfig: negative epsilon");
        if (scan_chunk < 1) throw ValueError("AdvConfig: scan_chunk must be >= 1");
    }
};

namespace detail {

struct AdvScan {
    bool filled = false;
    int got_true = 0;
    int got_false = 0;
    WatermarkSet wm; // valid only when filled
};

// Perturbs candidates in a seeded random order and collects ceil(k/2)
// "true" adversaries (the generating model's prediction flips away from the
// true label) and floor(k/2) "false" ones (it does not), all labeled with
// their true class.
inline AdvScan adv_scan(const Checkpoint& model, const Dataset& data, const AdvConfig& cfg, int k, RngState& rng) {
    cfg.validate();
    if (k < 2) throw ValueError("adversarial key set: k must be >= 2");
    if (model.spec.num_classes != data.num_classes) {
        throw ValueError(detail::cat("adversarial key set: model has ", model.spec.num_classes,
                                     " classes, data has ", data.num_classes));
    }
    const int want_true = (k + 1) / 2;
    const int want_false = k / 2;
    const std::vector<int> order = shuffled_indices(data.size(), rng);

    const auto dims = data.image_dims();
    const std::size_t row = static_cast<std::size_t>(dims[0]) * dims[1] * dims[2];
    AdvScan scan;
    WatermarkSet& wm = scan.wm;
    wm.scheme = WatermarkScheme::Adv;
    wm.num_classes = data.num_classes;
    std::vector<double> kept;
    kept.reserve(static_cast<std::size_t>(k) * row);

    for (int at = 0; at < data.size() && (scan.got_true < want_true || scan.got_false < want_false);
         at += cfg.scan_chunk) {
        const int count = std::min(cfg.scan_chunk, data.size() - at);
        const Tensor xb = gather_rows(data.images, order, at, count);
        const std::vector<int> yb = gather_labels(data.labels, order, at, count);
        const Tensor adv = fgsm(model, xb, yb, cfg.epsilon);
        const std::vector<int> preds = argmax_rows(logits_of(model, adv));
        for (int r = 0; r < count; ++r) {
            const bool flipped = preds[static_cast<std::size_t>(r)] != yb[static_cast<std::size_t>(r)];
            if (flipped && scan.got_true >= want_true) continue;
            if (!flipped && scan.got_false >= want_false) continue;
            kept.insert(kept.end(), adv.data() + static_cast<std::size_t>(r) * row,
                        adv.data() + static_cast<std::size_t>(r + 1) * row);
            wm.assigned_labels.push_back(yb[static_cast<std::size_t>(r)]);
            wm.provenance.push_back({order[static_cast<std::size_t>(at + r)], yb[static_cast<std::size_t>(r)], flipped});
            flipped ? ++scan.got_true : ++scan.got_false;
            if (scan.got_true == want_true && scan.got_false == want_false) break;
        }
    }
    scan.filled = scan.got_true == want_true && scan.got_false == want_false;
    if (scan.filled) {
        wm.samples = Tensor({k, dims[0], dims[1], dims[2]}, std::move(kept));
        wm.validate();
    }
    return scan;
}

} // namespace detail

// Adversarial-example scheme; running out of candidates before both quotas
// fill (epsilon far too small or too large) is an error.
inline WatermarkSet gen_adv_watermarks(const Checkpoint& model, const Dataset& data, const AdvConfig& cfg, int k,
                                       RngState& rng) {
    detail::AdvScan scan = detail::adv_scan(model, data, cfg, k, rng);
    if (!scan.filled) {
        throw ValueError(detail::cat("gen_adv_watermarks: exhausted ", data.size(), " candidates with ",
                                     scan.got_true, "/", (k + 1) / 2, " true and ", scan.got_false, "/", k / 2,
                                     " false adversaries at eps=", cfg.epsilon));
    }
    return std::move(scan.wm);
}

struct EmbedOptions {
    TrainOptions train;          // lr and batch size; `train.epochs` is ignored
    int min_epochs = 10;         // never stop before this many epochs
    int max_epochs = 900;        // hard cap; failing to embed by then throws
    int wm_every = 10;           // one key-set pass after every N training batches
    double confidence_min = 0.85;

    void validate() const {
        if (min_epochs < 1 || max_epochs < min_epochs) throw ValueError("EmbedOptions: bad epoch range");
        if (wm_every < 1) throw ValueError("EmbedOptions: wm_every must be >= 1");
        if (!(confidence_min > 0.0 && confidence_min < 1.0)) throw ValueError("EmbedOptions: confidence_min outside (0,1)");
    }
};

// The lowest assigned-label softmax mass over the key set.
inline double min_confidence(const Checkpoint& model, const WatermarkSet& wm) {
    const std::vector<double> conf = label_confidences(model, wm.samples, wm.assigned_labels);
    double lo = 1.0;
    for (double c : conf) lo = std::min(lo, c);
    return lo;
}

// Fraction of keys classified as their assigned labels.
inline double key_accuracy(const Checkpoint& model, const WatermarkSet& wm) {
    return accuracy(model, wm.samples, wm.assigned_labels);
}

namespace detail {

// One pass over the whole key set in training batches.
inline void key_set_step(Checkpoint& model, const WatermarkSet& wm, int batch_size, double lr) {
    std::vector<int> order(static_cast<std::size_t>(wm.size()));
    std::iota(order.begin(), order.end(), 0);
    for (int at = 0; at < wm.size(); at += batch_size) {
        const int count = std::min(batch_size, wm.size() - at);
        const Tensor xb = gather_rows(wm.samples, order, at, count);
        const std::vector<int> yb = gather_labels(wm.assigned_labels, order, at, count);
        sgd_batch_step(model, xb, &yb, nullptr, lr);
    }
}

// Shared embedding loop: interleaves key-set passes with normal training
// until the key set is perfectly predicted with confident margins.
inline void joint_tune(Checkpoint& model, const Dataset& data, const WatermarkSet& wm, const EmbedOptions& opt,
                       RngState& rng) {
    const int steps = data.size() / opt.train.batch_size;
    if (steps == 0) throw ValueError("embed: dataset smaller than one batch");
    long global = 0;
    for (int epoch = 0; epoch < opt.max_epochs; ++epoch) {
        const std::vector<int> order = shuffled_indices(data.size(), rng);
        for (int s = 0; s < steps; ++s) {
            const Tensor xb = gather_rows(data.images, order, s * opt.train.batch_size, opt.train.batch_size);
            const std::vector<int> yb = gather_labels(data.labels, order, s * opt.train.batch_size, opt.train.batch_size);
            sgd_batch_step(model, xb, &yb, nullptr, opt.train.lr);
            ++global;
            if (global % opt.wm_every == 0) key_set_step(model, wm, opt.train.batch_size, opt.train.lr);
        }
        if (epoch + 1 >= opt.min_epochs && key_accuracy(model, wm) == 1.0 &&
            min_confidence(model, wm) >= opt.confidence_min) {
            model.metadata["embed_epochs"] = std::to_string(epoch + 1);
            return;
        }
    }
    throw Error(detail::cat("embed: key set not learned after ", opt.max_epochs, " epochs (accuracy ",
                            key_accuracy(model, wm), ", min confidence ", min_confidence(model, wm), ")"));
}

// One SGD step through the exponential-weighting reparameterization with the
// amplification cancelled.  The chain rule multiplies each raw coordinate's
// gradient by m = s*(1+T|w|) where s is its share of the per-layer softmax-
// style scale; the forward pass scales its contribution by roughly the same
// factor, so plain SGD moves effective weights by ~m^2 times the plain-SGD
// step.  Left uncorrected, the per-layer max (m ~ 1+T*M) random-walks upward
// and drags the scale of every other coordinate to zero.  Dividing the step
// by m^2 (clamped for dead coordinates, where 1/m^2 explodes) makes the
// effective weights follow plain gradient descent to first order.
inline void ew_batch_step(Checkpoint& model, const Tensor& xb, const std::vector<int>& yb, double lr) {
    ModelPass pass = forward_pass(model, xb);
    const int loss = pass.tape.cross_entropy(pass.logits, yb);
    pass.tape.backward(loss);
    const std::vector<double> grads = gather_param_grads(pass, model.params);
    const double temp = *model.ew_temperature;
    const std::vector<double> maxes = layer_absmax(model.params, model.spec.layer_count());
    for (int i = 0; i < model.params.entries(); ++i) {
        const LayoutEntry& entry = model.params.entry(i);
        const double m_layer = maxes[static_cast<std::size_t>(entry.layer)];
        for (std::size_t k = entry.offset; k < entry.offset + entry.count; ++k) {
            const double a = std::abs(model.params[k]);
            const double m = std::exp((a - m_layer) * temp) * (1.0 + temp * a);
            model.params[k] -= lr * std::min(defaults::kEwStepClamp, 1.0 / (m * m)) * grads[k];
        }
    }
}

// Memorization loop for the exponential-weighting scheme.  The keys are
// mislabeled rows of the training set itself, so every clean pass over their
// neighbors pulls the logits back toward the true labels; memorizing them
// takes hundreds of epochs at a constant moderate rate (a decaying rate
// freezes before they latch).  After the keys latch, a short decaying tail
// anneals out interference the key passes left elsewhere in the decision
// surface; because the tail also lets the key margins drift, the loop keeps
// the best state whose key set is still perfectly and confidently predicted
// (by training-set accuracy) and restores it on exit, so the tail can only
// improve on the latch-point state.
inline void ew_tune(Checkpoint& model, const Dataset& data, const WatermarkSet& wm, const EmbedOptions& opt,
                    RngState& rng) {
    const int steps = data.size() / opt.train.batch_size;
    if (steps == 0) throw ValueError("embed: dataset smaller than one batch");
    if (!model.ew_temperature) throw ValueError("embed: ew_tune requires the reparameterization to be installed");
    const double carve_lr = opt.train.lr * defaults::kEwCarveLrScale;

    std::vector<int> key_order(static_cast<std::size_t>(wm.size()));
    std::iota(key_order.begin(), key_order.end(), 0);
    auto key_pass = [&](double lr) {
        for (int at = 0; at < wm.size(); at += opt.train.batch_size) {
            const int count = std::min(opt.train.batch_size, wm.size() - at);
            const Tensor xb = gather_rows(wm.samples, key_order, at, count);
            const std::vector<int> yb = gather_labels(wm.assigned_labels, key_order, at, count);
            ew_batch_step(model, xb, yb, lr);
        }
    };
    auto run_epoch = [&](double lr, long& global) {
        const std::vector<int> order = shuffled_indices(data.size(), rng);
        for (int s = 0; s < steps; ++s) {
            const Tensor xb = gather_rows(data.images, order, s * opt.train.batch_size, opt.train.batch_size);
            const std::vector<int> yb = gather_labels(data.labels, order, s * opt.train.batch_size, opt.train.batch_size);
            ew_batch_step(model, xb, yb, lr);
            ++global;
            if (global % opt.wm_every == 0) key_pass(lr);
        }
    };
    auto latched = [&](double confidence_floor) {
        return key_accuracy(model, wm) == 1.0 && min_confidence(model, wm) >= confidence_floor;
    };
    const double carve_floor = std::min(opt.confidence_min + defaults::kEwCarveConfidenceMargin,
                                        0.5 * (1.0 + opt.confidence_min));

    long global = 0;
    int carved_at = 0;
    for (;; ++carved_at) {
        if (carved_at >= opt.max_epochs) {
            throw Error(detail::cat("embed: key set not learned after ", opt.max_epochs, " epochs (accuracy ",
                                    key_accuracy(model, wm), ", min confidence ", min_confidence(model, wm), ")"));
        }
        run_epoch(carve_lr, global);
        if (latched(carve_floor)) {
            ++carved_at;
            break;
        }
    }

    ParamVector best = model.params;
    double best_score = dataset_accuracy(model, data);
    double lr = carve_lr;
    for (int tail = 0; tail < defaults::kEwPolishEpochs; ++tail) {
        lr *= defaults::kEwPolishDecay;
        run_epoch(lr, global);
        if (!latched(opt.confidence_min)) continue;
        const double score = dataset_accuracy(model, data);
        if (score > best_score) {
            best_score = score;
            best = model.params;
        }
    }
    model.params = std::move(best);
    model.metadata["embed_epochs"] = std::to_string(carved_at);
}

inline void stamp_metadata(Checkpoint& model, const WatermarkSet& wm, const Dataset& data) {
    model.metadata["scheme"] = to_string(wm.scheme);
    model.metadata["key_count"] = std::to_string(wm.size());
    model.metadata["train_accuracy"] = std::to_string(dataset_accuracy(model, data));
    model.metadata["key_accuracy"] = std::to_string(key_accuracy(model, wm));
    model.metadata["key_min_confidence"] = std::to_string(min_confidence(model, wm));
}

} // namespace detail

// Embeds a pattern or OOD key set by training from scratch with interleaved
// key batches.  Post-condition: key accuracy is exactly 1.0 and every key's
// assigned-label confidence is at least opt.confidence_min.
inline Checkpoint embed_joint(const ModelSpec& spec, const Dataset& data, const WatermarkSet& wm,
                              const EmbedOptions& opt, RngState& rng) {
    opt.validate();
    wm.validate();
    if (wm.num_classes != data.num_classes) throw ValueError("embed_joint: class count mismatch");
    RngState init_rng = rng.fork(0xA11);
    RngState train_rng = rng.fork(0xB22);
    Checkpoint model = init_model(spec, init_rng);
    detail::joint_tune(model, data, wm, opt, train_rng);
    detail::stamp_metadata(model, wm, data);
    return model;
}

// Exponential-weighting embedding: train clean, relabel the key rows inside
// the training set, install the reparameterization, then continue training
// through it — with the per-coordinate gradient amplification cancelled and
// a decaying polish tail after the keys latch (see detail::ew_tune) — until
// the wrong labels are confidently memorized.  The returned checkpoint
// carries ew_temperature; its effective weights are EW(theta).
inline Checkpoint embed_ew(const ModelSpec& spec, const Dataset& data, const WatermarkSet& wm, const EWConfig& ew,
                           const EmbedOptions& opt, RngState& rng) {
    opt.validate();
    ew.validate();
    wm.validate();
    if (wm.scheme != WatermarkScheme::Ew) throw ValueError("embed_ew: key set must use the ew scheme");
    if (wm.num_classes != data.num_classes) throw ValueError("embed_ew: class count mismatch");

    RngState init_rng = rng.fork(0xA11);
    RngState stage1_rng = rng.fork(0xB22);
    RngState stage3_rng = rng.fork(0xC33);

    Checkpoint model = init_model(spec, init_rng);
    TrainOptions stage1 = opt.train;
    stage1.epochs = opt.min_epochs;
    train_basic(model, data, stage1, stage1_rng);

    Dataset relabeled = data;
    for (int r = 0; r < wm.size(); ++r) {
        const auto& p = wm.provenance[static_cast<std::size_t>(r)];
        if (p.source_index < 0 || p.source_index >= data.size()) {
            throw ValueError("embed_ew: key provenance does not point into the training set");
        }
        relabeled.labels[static_cast<std::size_t>(p.source_index)] = wm.assigned_labels[static_cast<std::size_t>(r)];
    }

    model.ew_temperature = ew.temperature;
    detail::ew_tune(model, relabeled, wm, opt, stage3_rng);
    detail::stamp_metadata(model, wm, data);
    model.metadata["ew_temperature"] = std::to_string(ew.temperature);
    return model;
}

struct EpsilonCalibration {
    double epsilon = 0.0;
    double clean_accuracy = 0.0; // mean key accuracy of held-out clean models at `epsilon`
    int iterations = 0;
};

// Finds a perturbation size at which clean models classify a fresh
// adversarial key set near `target` accuracy (50% by default): large enough
// that true adversaries transfer across models, small enough that false
// adversaries stay benign.  Bisection over [0,1]; accuracy falls as epsilon
// grows.  A scan that cannot fill its true-adversary quota behaves as
// accuracy 1 (epsilon too small); one that cannot fill the false quota
// behaves as accuracy 0 (too large).
inline EpsilonCalibration calibrate_epsilon(const ModelSpec& spec, const Dataset& data, const TrainOptions& opts,
                                            RngState& rng, double target = 0.5, double tol = 0.08,
                                            int max_iters = 20, int probe_count = 100, int eval_models = 3) {
    if (!(target > 0.0 && target < 1.0)) throw ValueError("calibrate_epsilon: target outside (0,1)");
    if (tol <= 0.0) throw ValueError("calibrate_epsilon: tolerance must be positive");
    if (eval_models < 1) throw ValueError("calibrate_epsilon: need at least one held-out model");

    RngState gen_rng = rng.fork(0x6E0);
    Checkpoint generator = pretrain_model(spec, data, opts, gen_rng);
    std::vector<Checkpoint> judges;
    for (int e = 0; e < eval_models; ++e) {
        RngState jr = rng.fork(0x700 + static_cast<std::uint64_t>(e));
        judges.push_back(pretrain_model(spec, data, opts, jr));
    }

    int iter = 0;
    auto probe = [&](double eps) {
        RngState pr = rng.fork(0x800 + static_cast<std::uint64_t>(iter));
        detail::AdvScan scan = detail::adv_scan(generator, data, AdvConfig{eps, 200}, probe_count, pr);
        if (!scan.filled) return scan.got_true < (probe_count + 1) / 2 ? 1.0 : 0.0;
        double total = 0.0;
        for (const Checkpoint& judge : judges) {
            total += accuracy(judge, scan.wm.samples, scan.wm.assigned_labels);
        }
        return total / eval_models;
    };

    double lo = 0.0, hi = 1.0;
    double best_eps = 0.0, best_gap = 2.0, best_acc = 0.0;
    for (iter = 0; iter < max_iters; ++iter) {
        const double mid = 0.5 * (lo + hi);
        const double acc = probe(mid);
        const double gap = std::abs(acc - target);
        if (gap < best_gap) {
            best_gap = gap;
            best_eps = mid;
            best_acc = acc;
        }
        if (gap <= tol * 0.5) break; // comfortably inside tolerance; stop early
        if (acc > target) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    if (best_gap > tol) {
        throw ValueError(detail::cat("calibrate_epsilon: no epsilon within |acc-", target, "| <= ", tol,
                                     " after ", max_iters, " iterations (closest ", best_acc, " at eps=", best_eps,
                                     ")"));
    }
    return {best_eps, best_acc, iter + 1};
}

struct EmbedAdvResult {
    Checkpoint model;
    WatermarkSet watermarks;
};

// Adversarial-example embedding: pretrain a clean model, freeze a key set of
// its (true and false) adversaries, then fine-tune with interleaved key
// batches until the model classifies every key by its true label.
inline EmbedAdvResult embed_adv(const ModelSpec& spec, const Dataset& data, const AdvConfig& adv, int k,
                                const EmbedOptions& opt, RngState& rng) {
    opt.validate();
    adv.validate();
    RngState pretrain_rng = rng.fork(0xD44);
    RngState gen_rng = rng.fork(0xE55);
    RngState tune_rng = rng.fork(0xF66);

    TrainOptions stage1 = opt.train;
    stage1.epochs = opt.min_epochs;
    Checkpoint model = pretrain_model(spec, data, stage1, pretrain_rng);
    WatermarkSet wm = gen_adv_watermarks(model, data, adv, k, gen_rng);
    detail::joint_tune(model, data, wm, opt, tune_rng);
    detail::stamp_metadata(model, wm, data);
    model.metadata["adv_epsilon"] = std::to_string(adv.epsilon);
    return {std::move(model), std::move(wm)};
}

} // namespace wmlab
