#pragma once

#include <algorithm>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "wmlab/dataset.hpp"
#include "wmlab/error.hpp"
#include "wmlab/model.hpp"
#include "wmlab/train.hpp"
#include "wmlab/watermark.hpp"
#include "wmlab/watermark_set.hpp"

namespace wmlab {

inline double test_accuracy(const Checkpoint& model, const Dataset& test) {
    return dataset_accuracy(model, test);
}

// Suspect trunk + donor output layer.  Used to measure watermark retention
// in models whose output layer was replaced (transferred or re-headed
// models).  Both checkpoints are folded to effective weights first; the
// trunks must agree layer-for-layer in shape.
inline Checkpoint swap_output_head(const Checkpoint& suspect, const Checkpoint& donor) {
    const Checkpoint s = fold_exponential_weighting(suspect);
    const Checkpoint d = fold_exponential_weighting(donor);
    if (s.spec.kind != d.spec.kind || s.spec.input != d.spec.input || s.spec.hidden != d.spec.hidden ||
        s.spec.channels != d.spec.channels || s.spec.bias != d.spec.bias) {
        throw ShapeError("swap_output_head: suspect and donor trunks differ");
    }
    ModelSpec spec = s.spec;
    spec.num_classes = d.spec.num_classes;
    Checkpoint out;
    out.spec = spec;
    out.params = ParamVector(make_layout(spec));
    out.metadata = s.metadata;
    const int head = spec.layer_count() - 1;
    for (int i = 0; i < out.params.entries(); ++i) {
        const LayoutEntry& e = out.params.entry(i);
        const Checkpoint& src = e.layer == head ? d : s;
        const int j = src.params.find(e.layer, e.name);
        if (j < 0 || src.params.entry(j).shape != e.shape) {
            throw ShapeError(detail::cat("swap_output_head: entry ", e.layer, ":", e.name, " missing or mismatched"));
        }
        out.params.set_entry(i, src.params.unflatten(j));
    }
    return out;
}

// Fraction of the key set classified as its assigned labels.  If the
// suspect's class count differs from the key set's, a head donor (normally
// the owner's original model) is required and the measurement runs on the
// swapped-head hybrid.
inline double watermark_accuracy(const Checkpoint& model, const WatermarkSet& wm,
                                 const Checkpoint* head_donor = nullptr) {
    wm.validate();
    if (model.spec.num_classes == wm.num_classes) {
        return accuracy(model, wm.samples, wm.assigned_labels);
    }
    if (!head_donor) {
        throw ValueError(detail::cat("watermark_accuracy: model has ", model.spec.num_classes,
                                     " classes but the key set has ", wm.num_classes,
                                     "; pass the original model as head donor"));
    }
    if (head_donor->spec.num_classes != wm.num_classes) {
        throw ValueError("watermark_accuracy: head donor class count does not match the key set");
    }
    return accuracy(swap_output_head(model, *head_donor), wm.samples, wm.assigned_labels);
}

struct GammaCalibration {
    double gamma = 0.0;
    double margin = 0.0;
    std::vector<double> clean_accuracies; // watermark accuracy of each clean model

    [[nodiscard]] double max_clean() const {
        double m = 0.0;
        for (double a : clean_accuracies) m = std::max(m, a);
        return m;
    }
};

// Threshold from already-trained watermark-free models: gamma = max clean
// key accuracy + margin, clamped below 1.
inline GammaCalibration calibrate_gamma_over(const WatermarkSet& wm, std::span<const Checkpoint> clean_models,
                                             double margin = 0.05) {
    if (clean_models.empty()) throw ValueError("calibrate_gamma_over: no clean models");
    if (!(margin > 0.0 && margin < 1.0)) throw ValueError("calibrate_gamma_over: margin outside (0,1)");
    GammaCalibration out;
    out.margin = margin;
    for (const Checkpoint& m : clean_models) {
        out.clean_accuracies.push_back(watermark_accuracy(m, wm));
    }
    out.gamma = std::min(out.max_clean() + margin, 0.995);
    return out;
}

// Trains `n_models` watermark-free models on the owner's data (distinct
// seeded streams) and calibrates gamma against the key set.
inline GammaCalibration calibrate_gamma(const WatermarkSet& wm, const ModelSpec& spec, const Dataset& train_data,
                                        int n_models, const TrainOptions& opts, RngState& rng,
                                        double margin = 0.05) {
    if (n_models < 1) throw ValueError("calibrate_gamma: need at least one clean model");
    std::vector<Checkpoint> clean;
    clean.reserve(static_cast<std::size_t>(n_models));
    for (int i = 0; i < n_models; ++i) {
        RngState r = rng.fork(0x9A00 + static_cast<std::uint64_t>(i));
        clean.push_back(pretrain_model(spec, train_data, opts, r));
    }
    return calibrate_gamma_over(wm, clean, margin);
}

struct VerifyConfig {
    double gamma = 0.5;

    void validate() const {
        if (!(gamma > 0.0 && gamma < 1.0)) throw ValueError(detail::cat("VerifyConfig: gamma ", gamma, " outside (0,1)"));
    }
};

struct VerificationReport {
    std::string scheme;
    int key_count = 0;
    double watermark_acc = 0.0;
    double gamma = 0.0;
    bool owned = false; // watermark_acc strictly above gamma
    std::optional<double> test_acc;

    [[nodiscard]] nlohmann::json to_json() const {
        nlohmann::json j{{"scheme", scheme},
                         {"key_count", key_count},
                         {"watermark_accuracy", watermark_acc},
                         {"gamma", gamma},
                         {"owned", owned}};
        if (test_acc) j["test_accuracy"] = *test_acc;
        return j;
    }
};

// The ownership decision: claim the model iff key accuracy exceeds gamma
// strictly.
inline VerificationReport verify_ownership(const Checkpoint& model, const WatermarkSet& wm, const VerifyConfig& cfg,
                                           const Dataset* test = nullptr, const Checkpoint* head_donor = nullptr) {
    cfg.validate();
    VerificationReport rep;
    rep.scheme = to_string(wm.scheme);
    rep.key_count = wm.size();
    rep.gamma = cfg.gamma;
    rep.watermark_acc = watermark_accuracy(model, wm, head_donor);
    rep.owned = rep.watermark_acc > cfg.gamma;
    if (test) rep.test_acc = test_accuracy(model, *test);
    return rep;
}

} // namespace wmlab
