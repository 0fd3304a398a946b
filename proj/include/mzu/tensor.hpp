#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <type_traits>
#include <utility>
#include <vector>

namespace mzu {

using Shape = std::vector<std::size_t>;

enum class Precision { kTraining, kChecking };

std::string shape_str(const Shape& shape);

inline std::size_t shape_numel(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

// Raised when operand extents do not conform. Carries the op name and the
// offending shapes so callers can report them without string parsing.
class ShapeError : public std::invalid_argument {
   public:
    ShapeError(std::string op, std::vector<Shape> dims, const std::string& detail);

    const std::string& op() const { return op_; }
    const std::vector<Shape>& dims() const { return dims_; }

   private:
    std::string op_;
    std::vector<Shape> dims_;
};

// Input outside an op's mathematical domain (e.g. softmax over an empty row).
class DomainError : public std::domain_error {
   public:
    using std::domain_error::domain_error;
};

/// Dense row-major array with an explicit shape. Float tensors are used for
/// training, double tensors for gradient checking.
template <typename T>
class Tensor {
    static_assert(std::is_floating_point_v<T>);

   public:
    using value_type = T;
    static constexpr Precision precision = sizeof(T) >= 8 ? Precision::kChecking : Precision::kTraining;

    Tensor() = default;

    explicit Tensor(Shape shape, T fill = T(0)) : shape_(std::move(shape)), data_(shape_numel(shape_), fill) {
        check_extents();
    }

    Tensor(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
        check_extents();
        if (data_.size() != shape_numel(shape_)) {
            throw ShapeError("tensor", {shape_}, "data length " + std::to_string(data_.size()) +
                                                     " does not match shape");
        }
    }

    static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<T> data) {
        return Tensor({rows, cols}, std::move(data));
    }

    static Tensor row(std::vector<T> data) {
        const std::size_t n = data.size();
        return Tensor({1, n}, std::move(data));
    }

    const Shape& shape() const { return shape_; }
    std::size_t rank() const { return shape_.size(); }
    std::size_t dim(std::size_t i) const { return shape_.at(i); }
    std::size_t size() const { return data_.size(); }
    bool empty() const { return data_.empty(); }

    // Extent of the trailing axis; every leading axis folds into rows().
    std::size_t cols() const { return shape_.empty() ? 1 : shape_.back(); }
    std::size_t rows() const {
        const std::size_t c = cols();
        return c == 0 ? 0 : data_.size() / c;
    }

    T* data() { return data_.data(); }
    const T* data() const { return data_.data(); }
    std::span<T> values() { return data_; }
    std::span<const T> values() const { return data_; }
    std::vector<T>& storage() { return data_; }
    const std::vector<T>& storage() const { return data_; }

    T& operator[](std::size_t i) { return data_[i]; }
    const T& operator[](std::size_t i) const { return data_[i]; }
    T& at(std::size_t r, std::size_t c) { return data_[r * cols() + c]; }
    const T& at(std::size_t r, std::size_t c) const { return data_[r * cols() + c]; }

    T item() const {
        if (data_.size() != 1) throw ShapeError("item", {shape_}, "tensor is not a scalar");
        return data_[0];
    }

    Tensor reshaped(Shape shape) const {
        Tensor out = *this;
        out.reshape(std::move(shape));
        return out;
    }

    void reshape(Shape shape) {
        if (shape_numel(shape) != data_.size()) throw ShapeError("reshape", {shape_, shape}, "element count differs");
        shape_ = std::move(shape);
    }

    void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

    template <typename U>
    Tensor<U> cast() const {
        std::vector<U> out(data_.begin(), data_.end());
        return Tensor<U>(shape_, std::move(out));
    }

    bool all_finite() const;

    bool operator==(const Tensor& other) const { return shape_ == other.shape_ && data_ == other.data_; }

   private:
    void check_extents() const {
        for (std::size_t e : shape_) {
            if (e == 0) throw ShapeError("tensor", {shape_}, "extents must be positive");
        }
    }

    Shape shape_;
    std::vector<T> data_;
};

template <typename T>
bool Tensor<T>::all_finite() const {
    for (T v : data_) {
        if (!std::isfinite(v)) return false;
    }
    return true;
}

}  // namespace mzu
