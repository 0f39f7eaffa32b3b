#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

#include "wmlab/error.hpp"
#include "wmlab/rng.hpp"
#include "wmlab/tensor.hpp"

namespace wmlab {

// Labeled image set.  Pixels live in [0,1]; labels in [0, num_classes).
struct Dataset {
    Tensor images; // [N, C, H, W]
    std::vector<int> labels;
    int num_classes = 0;
    std::string domain; // provenance tag: "task_a", "shifted", "task_b", "idx", ...

    [[nodiscard]] int size() const { return images.empty() ? 0 : images.dim(0); }

    void validate() const {
        if (images.rank() != 4) {
            throw ShapeError(detail::cat("Dataset: images must be [N,C,H,W], got ",
                                         Tensor::shape_string(images.shape())));
        }
        if (static_cast<int>(labels.size()) != images.dim(0)) {
            throw ValueError(detail::cat("Dataset: ", labels.size(), " labels for ", images.dim(0), " images"));
        }
        if (num_classes < 2) throw ValueError("Dataset: num_classes must be >= 2");
        for (int y : labels) {
            if (y < 0 || y >= num_classes) {
                throw ValueError(detail::cat("Dataset: label ", y, " outside [0,", num_classes, ")"));
            }
        }
        images.check_finite("Dataset images");
        for (double v : images.values()) {
            if (v < 0.0 || v > 1.0) throw ValueError(detail::cat("Dataset: pixel ", v, " outside [0,1]"));
        }
    }

    [[nodiscard]] std::vector<int> image_dims() const {
        return {images.dim(1), images.dim(2), images.dim(3)};
    }

    // Copy of the rows at the given indices, in the given order.
    [[nodiscard]] Dataset subset(const std::vector<int>& idx) const {
        if (idx.empty()) throw ValueError("Dataset::subset: empty index list");
        const int C = images.dim(1), H = images.dim(2), W = images.dim(3);
        const std::size_t row = static_cast<std::size_t>(C) * H * W;
        Dataset out;
        out.images = Tensor({static_cast<int>(idx.size()), C, H, W});
        out.labels.resize(idx.size());
        out.num_classes = num_classes;
        out.domain = domain;
        for (std::size_t r = 0; r < idx.size(); ++r) {
            const int i = idx[r];
            if (i < 0 || i >= size()) throw ValueError(detail::cat("Dataset::subset: index ", i, " out of range"));
            const double* src = images.data() + static_cast<std::size_t>(i) * row;
            double* dst = out.images.data() + r * row;
            std::copy(src, src + row, dst);
            out.labels[r] = labels[static_cast<std::size_t>(i)];
        }
        return out;
    }
};

// Domain shift description: centers move by `offset` along a fixed random
// direction, and `distractors` extra blob classes (absent from the clean
// task) are mixed in with reused labels.
struct ShiftSpec {
    double offset = 0.0;
    int distractors = 0;
    std::uint64_t direction_seed = 0;
};

// Class-conditional Gaussian blobs in pixel space.  Each class has a fixed
// center image; samples add i.i.d. pixel noise and clip to [0,1].  Centers
// sit 0.5 +- 0.7 * u where u is a unit-norm direction, so distinct classes
// are roughly unit distance apart in image space.
struct SyntheticSpec {
    int num_classes = 4;
    int c = 1, h = 8, w = 8;
    double noise_sigma = 0.2;
    std::uint64_t center_seed = 17;
    std::vector<Tensor> centers; // [C,H,W] per class, filled by make()

    static SyntheticSpec make(int num_classes, int c, int h, int w, double noise_sigma, std::uint64_t center_seed) {
        if (num_classes < 2) throw ValueError("SyntheticSpec: num_classes must be >= 2");
        if (c <= 0 || h <= 0 || w <= 0) throw ValueError("SyntheticSpec: non-positive image dims");
        if (noise_sigma < 0.0) throw ValueError("SyntheticSpec: negative noise sigma");
        SyntheticSpec s;
        s.num_classes = num_classes;
        s.c = c;
        s.h = h;
        s.w = w;
        s.noise_sigma = noise_sigma;
        s.center_seed = center_seed;
        RngState rng(center_seed);
        for (int k = 0; k < num_classes; ++k) s.centers.push_back(make_center(rng, c, h, w));
        return s;
    }

    // A fresh blob center: 0.5 + 0.7 * (unit-norm Gaussian direction),
    // clipped into [0.02, 0.98].
    static Tensor make_center(RngState& rng, int c, int h, int w) {
        Tensor center({c, h, w});
        double norm2 = 0.0;
        for (std::size_t i = 0; i < center.size(); ++i) {
            center[i] = rng.normal();
            norm2 += center[i] * center[i];
        }
        const double norm = std::sqrt(std::max(norm2, 1e-300));
        for (std::size_t i = 0; i < center.size(); ++i) {
            center[i] = std::clamp(0.5 + 0.7 * center[i] / norm, 0.02, 0.98);
        }
        return center;
    }
};

namespace detail {

// Shared sampler: one block of `count` images per center, emitted
// block-major.  Both synthetic generators funnel through this, so a shifted
// domain with zero offset and zero distractors consumes the rng identically
// to the clean generator and produces bit-identical data.
inline Dataset gen_blocks(const std::vector<Tensor>& centers, const std::vector<int>& counts,
                          const std::vector<int>& block_labels, int num_classes, double sigma,
                          std::string domain, RngState& rng) {
    if (centers.empty() || centers.size() != counts.size() || centers.size() != block_labels.size()) {
        throw ValueError("gen_blocks: centers/counts/labels length mismatch");
    }
    const int c = centers[0].dim(0), h = centers[0].dim(1), w = centers[0].dim(2);
    int total = 0;
    for (int n : counts) {
        if (n < 0) throw ValueError("gen_blocks: negative count");
        total += n;
    }
    if (total == 0) throw ValueError("gen_blocks: zero samples requested");
    Dataset out;
    out.images = Tensor({total, c, h, w});
    out.labels.reserve(static_cast<std::size_t>(total));
    out.num_classes = num_classes;
    out.domain = std::move(domain);
    const std::size_t row = static_cast<std::size_t>(c) * h * w;
    std::size_t at = 0;
    for (std::size_t block = 0; block < centers.size(); ++block) {
        const Tensor& center = centers[block];
        for (int s = 0; s < counts[block]; ++s) {
            double* dst = out.images.data() + at * row;
            for (std::size_t i = 0; i < row; ++i) {
                dst[i] = std::clamp(center[i] + sigma * rng.normal(), 0.0, 1.0);
            }
            out.labels.push_back(block_labels[block]);
            ++at;
        }
    }
    return out;
}

} // namespace detail

// n_per_class samples around each class center, block-major by class.
inline Dataset gen_synthetic(const SyntheticSpec& spec, int n_per_class, RngState& rng) {
    if (n_per_class <= 0) throw ValueError("gen_synthetic: n_per_class must be positive");
    if (static_cast<int>(spec.centers.size()) != spec.num_classes) {
        throw ValueError("gen_synthetic: spec.centers not initialized; use SyntheticSpec::make");
    }
    std::vector<int> counts(spec.centers.size(), n_per_class);
    std::vector<int> labels(spec.centers.size());
    std::iota(labels.begin(), labels.end(), 0);
    return detail::gen_blocks(spec.centers, counts, labels, spec.num_classes, spec.noise_sigma, "task_a", rng);
}

// A related-but-different domain for the unlabeled pool: the clean centers
// shifted by `offset` along one fixed direction, plus `distractors` extra
// blob classes that exist only here.  Distractor blocks reuse labels
// (block mod num_classes) so the set can be fed anywhere a Dataset goes; a
// clean-task model scores near chance on them.  `total` samples are spread
// as evenly as possible over all blocks.  With offset 0 and no distractors
// the output is distributionally identical to gen_synthetic - bit-identical
// when total is a multiple of num_classes and the rng stream matches.
inline Dataset gen_shifted_domain(const SyntheticSpec& spec, const ShiftSpec& shift, int total, RngState& rng) {
    if (total <= 0) throw ValueError("gen_shifted_domain: total must be positive");
    if (shift.distractors < 0) throw ValueError("gen_shifted_domain: negative distractor count");
    if (static_cast<int>(spec.centers.size()) != spec.num_classes) {
        throw ValueError("gen_shifted_domain: spec.centers not initialized; use SyntheticSpec::make");
    }
    RngState dir_rng = RngState(spec.center_seed).fork(0x511F7 + shift.direction_seed);
    Tensor direction({spec.c, spec.h, spec.w});
    double norm2 = 0.0;
    for (std::size_t i = 0; i < direction.size(); ++i) {
        direction[i] = dir_rng.normal();
        norm2 += direction[i] * direction[i];
    }
    const double norm = std::sqrt(std::max(norm2, 1e-300));

    std::vector<Tensor> centers;
    std::vector<int> labels;
    for (int k = 0; k < spec.num_classes; ++k) {
        Tensor c = spec.centers[static_cast<std::size_t>(k)];
        for (std::size_t i = 0; i < c.size(); ++i) {
            c[i] = std::clamp(c[i] + shift.offset * direction[i] / norm, 0.0, 1.0);
        }
        centers.push_back(std::move(c));
        labels.push_back(k);
    }
    for (int d = 0; d < shift.distractors; ++d) {
        centers.push_back(SyntheticSpec::make_center(dir_rng, spec.c, spec.h, spec.w));
        labels.push_back((spec.num_classes + d) % spec.num_classes);
    }
    const int blocks = static_cast<int>(centers.size());
    std::vector<int> counts(static_cast<std::size_t>(blocks), total / blocks);
    for (int i = 0; i < total % blocks; ++i) counts[static_cast<std::size_t>(i)] += 1;
    const bool pristine = shift.offset == 0.0 && shift.distractors == 0;
    return detail::gen_blocks(centers, counts, labels, spec.num_classes, spec.noise_sigma,
                              pristine ? "task_a" : "shifted", rng);
}

// How to carve an owner's dataset into the adversary's view.
struct SplitPlan {
    double adversary_fraction = 1.0; // share of the owner data the attacker holds
    int holdout_for_watermarks = 0;  // tail reserved for key construction
    int test_count = 0;              // held-out eval rows, disjoint from the rest
    std::uint64_t seed = 0;

    void validate() const {
        if (adversary_fraction < 0.0 || adversary_fraction > 1.0) {
            throw ValueError(detail::cat("SplitPlan: adversary_fraction ", adversary_fraction, " outside [0,1]"));
        }
        if (holdout_for_watermarks < 0) throw ValueError("SplitPlan: negative holdout");
        if (test_count < 0) throw ValueError("SplitPlan: negative test count");
    }
};

// Index sets produced by split().  owner_full is every index; the watermark
// holdout is the tail block; test and adversary_labeled are disjoint random
// draws from the remainder.
struct Split {
    std::vector<int> owner_full;
    std::vector<int> adversary_labeled;
    std::vector<int> watermark_holdout;
    std::vector<int> test;
};

inline Split split(const Dataset& data, const SplitPlan& plan) {
    plan.validate();
    const int n = data.size();
    if (plan.holdout_for_watermarks > n) {
        throw ValueError(detail::cat("split: holdout ", plan.holdout_for_watermarks, " exceeds dataset size ", n));
    }
    const int body = n - plan.holdout_for_watermarks;
    const int adversary = static_cast<int>(std::floor(plan.adversary_fraction * body));
    if (plan.adversary_fraction > 0.0 && adversary < 1) {
        throw ValueError(detail::cat("split: adversary fraction ", plan.adversary_fraction,
                                     " yields zero samples from ", body));
    }
    if (plan.test_count + adversary > body) {
        throw ValueError(detail::cat("split: test (", plan.test_count, ") + adversary (", adversary,
                                     ") exceed the ", body, " non-holdout rows"));
    }
    Split out;
    out.owner_full.resize(static_cast<std::size_t>(n));
    std::iota(out.owner_full.begin(), out.owner_full.end(), 0);
    for (int i = body; i < n; ++i) out.watermark_holdout.push_back(i);

    std::vector<int> candidates(static_cast<std::size_t>(body));
    std::iota(candidates.begin(), candidates.end(), 0);
    RngState rng = RngState(plan.seed).fork(0x512);
    // partial Fisher-Yates: the first (test + adversary) positions become a
    // uniform draw without replacement
    const int want = plan.test_count + adversary;
    for (int i = 0; i < want; ++i) {
        const int j = i + rng.index(body - i);
        std::swap(candidates[static_cast<std::size_t>(i)], candidates[static_cast<std::size_t>(j)]);
    }
    out.test.assign(candidates.begin(), candidates.begin() + plan.test_count);
    out.adversary_labeled.assign(candidates.begin() + plan.test_count, candidates.begin() + want);
    std::sort(out.test.begin(), out.test.end());
    std::sort(out.adversary_labeled.begin(), out.adversary_labeled.end());
    return out;
}

// ---- IDX import/export (big-endian u8 image/label files) ----

namespace detail {

inline std::uint32_t get_be_u32(std::istream& is, const char* what) {
    unsigned char b[4];
    is.read(reinterpret_cast<char*>(b), 4);
    if (is.gcount() != 4) throw TruncationError(detail::cat("idx: file ends inside ", what));
    return (static_cast<std::uint32_t>(b[0]) << 24) | (static_cast<std::uint32_t>(b[1]) << 16) |
           (static_cast<std::uint32_t>(b[2]) << 8) | static_cast<std::uint32_t>(b[3]);
}

inline void put_be_u32(std::ostream& os, std::uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v >> 24), static_cast<unsigned char>(v >> 16),
                          static_cast<unsigned char>(v >> 8), static_cast<unsigned char>(v)};
    os.write(reinterpret_cast<const char*>(b), 4);
}

} // namespace detail

inline constexpr std::uint32_t kIdxImagesMagic = 0x00000803; // u8 data, 3 dims
inline constexpr std::uint32_t kIdxLabelsMagic = 0x00000801; // u8 data, 1 dim

// Reads a single-channel IDX image/label pair.  Pixels are scaled to [0,1];
// num_classes becomes max(label)+1.
inline Dataset load_idx(const std::string& images_path, const std::string& labels_path) {
    std::ifstream imgs(images_path, std::ios::binary);
    if (!imgs) throw IoError(detail::cat("load_idx: cannot open '", images_path, "'"));
    const std::uint32_t imagic = detail::get_be_u32(imgs, "image magic");
    if (imagic != kIdxImagesMagic) {
        throw BadMagicError(detail::cat("load_idx: image magic ", imagic, " != ", kIdxImagesMagic));
    }
    const std::uint32_t n = detail::get_be_u32(imgs, "image count");
    const std::uint32_t h = detail::get_be_u32(imgs, "image height");
    const std::uint32_t w = detail::get_be_u32(imgs, "image width");
    if (n == 0 || h == 0 || w == 0) throw FormatError("load_idx: zero image dimension");
    const std::size_t count = static_cast<std::size_t>(n) * h * w;
    std::vector<unsigned char> raw(count);
    imgs.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(count));
    if (static_cast<std::size_t>(imgs.gcount()) != count) {
        throw TruncationError(detail::cat("load_idx: expected ", count, " pixels, file ran out"));
    }

    std::ifstream labs(labels_path, std::ios::binary);
    if (!labs) throw IoError(detail::cat("load_idx: cannot open '", labels_path, "'"));
    const std::uint32_t lmagic = detail::get_be_u32(labs, "label magic");
    if (lmagic != kIdxLabelsMagic) {
        throw BadMagicError(detail::cat("load_idx: label magic ", lmagic, " != ", kIdxLabelsMagic));
    }
    const std::uint32_t ln = detail::get_be_u32(labs, "label count");
    if (ln != n) throw FormatError(detail::cat("load_idx: ", n, " images but ", ln, " labels"));
    std::vector<unsigned char> lraw(ln);
    labs.read(reinterpret_cast<char*>(lraw.data()), static_cast<std::streamsize>(ln));
    if (static_cast<std::size_t>(labs.gcount()) != ln) {
        throw TruncationError("load_idx: label file shorter than its header claims");
    }

    Dataset out;
    out.images = Tensor({static_cast<int>(n), 1, static_cast<int>(h), static_cast<int>(w)});
    for (std::size_t i = 0; i < count; ++i) out.images[i] = raw[i] / 255.0;
    out.labels.assign(lraw.begin(), lraw.end());
    int max_label = 0;
    for (int y : out.labels) max_label = std::max(max_label, y);
    out.num_classes = std::max(2, max_label + 1);
    out.domain = "idx";
    out.validate();
    return out;
}

// Writes a single-channel dataset as an IDX pair; pixels quantize to u8 by
// round(v * 255).
inline void save_idx(const Dataset& data, const std::string& images_path, const std::string& labels_path) {
    data.validate();
    if (data.images.dim(1) != 1) {
        throw ValueError(detail::cat("save_idx: only single-channel images supported, got C=", data.images.dim(1)));
    }
    if (data.num_classes > 256) throw ValueError("save_idx: labels do not fit in u8");
    std::ofstream imgs(images_path, std::ios::binary | std::ios::trunc);
    if (!imgs) throw IoError(detail::cat("save_idx: cannot open '", images_path, "'"));
    detail::put_be_u32(imgs, kIdxImagesMagic);
    detail::put_be_u32(imgs, static_cast<std::uint32_t>(data.size()));
    detail::put_be_u32(imgs, static_cast<std::uint32_t>(data.images.dim(2)));
    detail::put_be_u32(imgs, static_cast<std::uint32_t>(data.images.dim(3)));
    for (double v : data.images.values()) {
        const auto q = static_cast<unsigned char>(std::lround(v * 255.0));
        imgs.write(reinterpret_cast<const char*>(&q), 1);
    }
    if (!imgs) throw IoError("save_idx: image write failed");

    std::ofstream labs(labels_path, std::ios::binary | std::ios::trunc);
    if (!labs) throw IoError(detail::cat("save_idx: cannot open '", labels_path, "'"));
    detail::put_be_u32(labs, kIdxLabelsMagic);
    detail::put_be_u32(labs, static_cast<std::uint32_t>(data.size()));
    for (int y : data.labels) {
        const auto q = static_cast<unsigned char>(y);
        labs.write(reinterpret_cast<const char*>(&q), 1);
    }
    if (!labs) throw IoError("save_idx: label write failed");
}

} // namespace wmlab
