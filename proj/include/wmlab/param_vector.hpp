#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "wmlab/error.hpp"
#include "wmlab/tensor.hpp"

namespace wmlab {

// One named tensor inside a flat parameter vector.
struct LayoutEntry {
    int layer = 0;           // zero-based layer index
    std::string name;        // "w" or "b"
    std::vector<int> shape;  // tensor shape of this entry
    std::size_t offset = 0;  // start in the flat vector
    std::size_t count = 0;   // element count, product of shape
};

// Flat f64 parameter vector plus the layout that maps slices back to named
// layer tensors.  The layout must tile the vector exactly: entries are
// contiguous, non-overlapping, and cover every element.  All
// flatten/unflatten round trips are bit-exact because the storage is the
// flat vector itself.
class ParamVector {
public:
    ParamVector() = default;

    explicit ParamVector(std::vector<LayoutEntry> layout) : layout_(std::move(layout)) {
        std::size_t offset = 0;
        for (auto& e : layout_) {
            std::size_t n = 1;
            for (int d : e.shape) {
                if (d <= 0) throw ShapeError(detail::cat("ParamVector: bad dim in entry ", e.layer, ":", e.name));
                n *= static_cast<std::size_t>(d);
            }
            e.count = n;
            e.offset = offset;
            offset += n;
        }
        values_.assign(offset, 0.0);
    }

    [[nodiscard]] const std::vector<LayoutEntry>& layout() const { return layout_; }
    [[nodiscard]] std::size_t size() const { return values_.size(); }
    [[nodiscard]] int entries() const { return static_cast<int>(layout_.size()); }

    std::vector<double>& values() { return values_; }
    [[nodiscard]] const std::vector<double>& values() const { return values_; }

    double& operator[](std::size_t i) { return values_[i]; }
    double operator[](std::size_t i) const { return values_[i]; }

    [[nodiscard]] const LayoutEntry& entry(int i) const {
        if (i < 0 || i >= entries()) throw ValueError(detail::cat("ParamVector: entry ", i, " out of range"));
        return layout_[static_cast<std::size_t>(i)];
    }

    std::span<double> slice(int i) {
        const auto& e = entry(i);
        return {values_.data() + e.offset, e.count};
    }

    [[nodiscard]] std::span<const double> slice(int i) const {
        const auto& e = entry(i);
        return {values_.data() + e.offset, e.count};
    }

    // Copies an entry out as a tensor.
    [[nodiscard]] Tensor unflatten(int i) const {
        const auto& e = entry(i);
        std::vector<double> data(values_.begin() + static_cast<std::ptrdiff_t>(e.offset),
                                 values_.begin() + static_cast<std::ptrdiff_t>(e.offset + e.count));
        return Tensor(e.shape, std::move(data));
    }

    void set_entry(int i, const Tensor& t) {
        const auto& e = entry(i);
        if (t.shape() != e.shape) {
            throw ShapeError(detail::cat("set_entry: layer ", e.layer, " '", e.name, "' expects ",
                                         Tensor::shape_string(e.shape), ", got ",
                                         Tensor::shape_string(t.shape())));
        }
        for (std::size_t k = 0; k < e.count; ++k) values_[e.offset + k] = t[k];
    }

    // Index of the entry with the given layer and name, or -1.
    [[nodiscard]] int find(int layer, const std::string& name) const {
        for (int i = 0; i < entries(); ++i) {
            if (layout_[static_cast<std::size_t>(i)].layer == layer &&
                layout_[static_cast<std::size_t>(i)].name == name) {
                return i;
            }
        }
        return -1;
    }

    [[nodiscard]] bool same_layout(const ParamVector& other) const {
        if (layout_.size() != other.layout_.size()) return false;
        for (std::size_t i = 0; i < layout_.size(); ++i) {
            const auto& a = layout_[i];
            const auto& b = other.layout_[i];
            if (a.layer != b.layer || a.name != b.name || a.shape != b.shape) return false;
        }
        return true;
    }

    // Same layout, zero values.
    [[nodiscard]] static ParamVector like(const ParamVector& other) { return ParamVector(other.layout_); }

    // Human-readable position of a flat index, e.g. `layer 2 'w' element 17`.
    [[nodiscard]] std::string describe_index(std::size_t flat) const {
        for (const auto& e : layout_) {
            if (flat >= e.offset && flat < e.offset + e.count) {
                return detail::cat("layer ", e.layer, " '", e.name, "' element ", flat - e.offset);
            }
        }
        return detail::cat("flat index ", flat);
    }

private:
    std::vector<LayoutEntry> layout_;
    std::vector<double> values_;
};

// In-place SGD update: theta -= lr * grad.  Rejects non-finite gradients
// with a message that names the offending parameter.
inline void sgd_step(ParamVector& params, std::span<const double> grads, double lr) {
    if (grads.size() != params.size()) {
        throw ShapeError(detail::cat("sgd_step: gradient length ", grads.size(), " != parameter length ",
                                     params.size()));
    }
    if (!std::isfinite(lr)) throw ValueError("sgd_step: non-finite learning rate");
    for (std::size_t i = 0; i < grads.size(); ++i) {
        if (!std::isfinite(grads[i])) {
            throw NumericError(detail::cat("sgd_step: non-finite gradient at ", params.describe_index(i)));
        }
    }
    for (std::size_t i = 0; i < grads.size(); ++i) params[i] -= lr * grads[i];
}

} // namespace wmlab
