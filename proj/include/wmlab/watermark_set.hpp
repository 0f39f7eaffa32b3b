#pragma once

#include <string>
#include <vector>

#include "wmlab/error.hpp"
#include "wmlab/tensor.hpp"

namespace wmlab {

enum class WatermarkScheme { Pattern, Ood, Ew, Adv };

inline std::string to_string(WatermarkScheme s) {
    switch (s) {
    case WatermarkScheme::Pattern: return "pattern";
    case WatermarkScheme::Ood: return "ood";
    case WatermarkScheme::Ew: return "ew";
    case WatermarkScheme::Adv: return "adv";
    }
    throw ValueError("bad WatermarkScheme");
}

inline WatermarkScheme watermark_scheme_from_string(const std::string& s) {
    if (s == "pattern") return WatermarkScheme::Pattern;
    if (s == "ood") return WatermarkScheme::Ood;
    if (s == "ew") return WatermarkScheme::Ew;
    if (s == "adv") return WatermarkScheme::Adv;
    throw ValueError(detail::cat("unknown watermark scheme '", s, "'"));
}

// Where a watermark sample came from.  `true_adversary` is meaningful only
// for the adversarial scheme: true when the perturbed image actually flipped
// the generating model's prediction.
struct WatermarkProvenance {
    int source_index = -1; // index into the dataset the sample was built from
    int true_label = -1;   // original class, -1 when not applicable
    bool true_adversary = false;
};

// The owner's key set: images with their assigned verification labels.
struct WatermarkSet {
    WatermarkScheme scheme = WatermarkScheme::Pattern;
    Tensor samples;                   // [K, C, H, W]
    std::vector<int> assigned_labels; // verification targets, in [0, num_classes)
    std::vector<WatermarkProvenance> provenance;
    int num_classes = 0;

    [[nodiscard]] int size() const { return samples.empty() ? 0 : samples.dim(0); }

    void validate() const {
        if (samples.rank() != 4) {
            throw ShapeError(detail::cat("WatermarkSet: samples must be [K,C,H,W], got ",
                                         Tensor::shape_string(samples.shape())));
        }
        const int k = samples.dim(0);
        if (k < 1) throw ValueError("WatermarkSet: empty key set");
        if (num_classes < 2) throw ValueError("WatermarkSet: num_classes must be >= 2");
        if (static_cast<int>(assigned_labels.size()) != k) {
            throw ValueError(detail::cat("WatermarkSet: ", assigned_labels.size(), " labels for ", k, " samples"));
        }
        if (!provenance.empty() && static_cast<int>(provenance.size()) != k) {
            throw ValueError("WatermarkSet: provenance length mismatch");
        }
        for (int label : assigned_labels) {
            if (label < 0 || label >= num_classes) {
                throw ValueError(detail::cat("WatermarkSet: label ", label, " outside [0,", num_classes, ")"));
            }
        }
        samples.check_finite("WatermarkSet samples");
        if (scheme == WatermarkScheme::Adv && !provenance.empty()) {
            int true_count = 0;
            for (const auto& p : provenance) true_count += p.true_adversary ? 1 : 0;
            const int want_true = (k + 1) / 2;
            if (true_count != want_true) {
                throw ValueError(detail::cat("WatermarkSet: adversarial set has ", true_count,
                                             " true adversaries, expected ", want_true, " of ", k));
            }
        }
    }
};

} // namespace wmlab
