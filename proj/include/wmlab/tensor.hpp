#pragma once

#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "wmlab/error.hpp"

namespace wmlab {

// Dense row-major f64 tensor.  Plain value type: copy/move do what you
// expect, no views, no reference counting.  Shapes are small int vectors;
// every constructor validates that dims are positive and the element count
// matches.
class Tensor {
public:
    Tensor() = default;

    explicit Tensor(std::vector<int> shape) : shape_(std::move(shape)) {
        data_.assign(checked_count(shape_), 0.0);
    }

    Tensor(std::vector<int> shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
        if (checked_count(shape_) != data_.size()) {
            throw ShapeError(detail::cat("Tensor: shape ", shape_string(shape_), " expects ",
                                         checked_count(shape_), " elements, got ", data_.size()));
        }
    }

    static Tensor zeros(std::vector<int> shape) { return Tensor(std::move(shape)); }

    static Tensor full(std::vector<int> shape, double value) {
        Tensor t(std::move(shape));
        for (double& v : t.data_) v = value;
        return t;
    }

    [[nodiscard]] const std::vector<int>& shape() const { return shape_; }
    [[nodiscard]] int rank() const { return static_cast<int>(shape_.size()); }

    [[nodiscard]] int dim(int i) const {
        if (i < 0 || i >= rank()) throw ShapeError(detail::cat("Tensor: dim ", i, " out of rank ", rank()));
        return shape_[static_cast<std::size_t>(i)];
    }

    [[nodiscard]] std::size_t size() const { return data_.size(); }
    [[nodiscard]] bool empty() const { return data_.empty(); }

    double* data() { return data_.data(); }
    [[nodiscard]] const double* data() const { return data_.data(); }
    std::vector<double>& values() { return data_; }
    [[nodiscard]] const std::vector<double>& values() const { return data_; }

    double& operator[](std::size_t i) { return data_[i]; }
    double operator[](std::size_t i) const { return data_[i]; }

    [[nodiscard]] bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }

    // Reinterprets the buffer under a new shape with the same element count.
    [[nodiscard]] Tensor reshaped(std::vector<int> shape) const {
        if (checked_count(shape) != data_.size()) {
            throw ShapeError(detail::cat("reshape: ", shape_string(shape_), " -> ", shape_string(shape),
                                         " changes element count"));
        }
        return Tensor(std::move(shape), data_);
    }

    // Throws NumericError naming `what` if any element is NaN or Inf.
    void check_finite(const char* what) const {
        for (std::size_t i = 0; i < data_.size(); ++i) {
            if (!std::isfinite(data_[i])) {
                throw NumericError(detail::cat(what, ": non-finite value ", data_[i], " at flat index ", i));
            }
        }
    }

    static std::string shape_string(const std::vector<int>& shape) {
        std::string s = "[";
        for (std::size_t i = 0; i < shape.size(); ++i) {
            if (i) s += ",";
            s += std::to_string(shape[i]);
        }
        return s + "]";
    }

private:
    static std::size_t checked_count(const std::vector<int>& shape) {
        std::size_t n = 1;
        for (int d : shape) {
            if (d <= 0) throw ShapeError(detail::cat("Tensor: non-positive dim in ", shape_string(shape)));
            n *= static_cast<std::size_t>(d);
        }
        return n;
    }

    std::vector<int> shape_;
    std::vector<double> data_;
};

} // namespace wmlab
