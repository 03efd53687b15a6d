#pragma once

#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace pfm {

using i64 = std::int64_t;
using Shape = std::vector<i64>;

inline i64 numel_of(const Shape& shape) {
    i64 n = 1;
    for (i64 d : shape) n *= d;
    return n;
}

inline std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << "(";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ",";
        os << shape[i];
    }
    os << ")";
    return os.str();
}

inline Shape row_major_strides(const Shape& shape) {
    Shape strides(shape.size(), 1);
    for (int i = static_cast<int>(shape.size()) - 2; i >= 0; --i) {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    return strides;
}

/// Dense row-major N-d array. Rank 0 (shape {}) is a scalar with one element.
template <typename T>
class Tensor {
public:
    Tensor() = default;

    explicit Tensor(Shape shape) : shape_(std::move(shape)) {
        validate_shape();
        data_.assign(static_cast<std::size_t>(numel_of(shape_)), T(0));
    }

    Tensor(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
        validate_shape();
        if (static_cast<i64>(data_.size()) != numel_of(shape_)) {
            throw std::invalid_argument("tensor data length " + std::to_string(data_.size()) +
                                        " does not match shape " + shape_str(shape_));
        }
    }

    static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }

    static Tensor full(Shape shape, T value) {
        Tensor t(std::move(shape));
        for (auto& v : t.data_) v = value;
        return t;
    }

    static Tensor scalar(T value) { return Tensor(Shape{}, std::vector<T>{value}); }

    const Shape& shape() const { return shape_; }
    int rank() const { return static_cast<int>(shape_.size()); }
    i64 dim(int i) const { return shape_[static_cast<std::size_t>(i)]; }
    i64 size() const { return static_cast<i64>(data_.size()); }
    bool empty() const { return data_.empty() && shape_.empty(); }

    T* data() { return data_.data(); }
    const T* data() const { return data_.data(); }
    std::vector<T>& vec() { return data_; }
    const std::vector<T>& vec() const { return data_; }

    T& operator[](i64 i) { return data_[static_cast<std::size_t>(i)]; }
    const T& operator[](i64 i) const { return data_[static_cast<std::size_t>(i)]; }

    T& at(std::initializer_list<i64> idx) { return data_[static_cast<std::size_t>(flat_index(idx))]; }
    const T& at(std::initializer_list<i64> idx) const {
        return data_[static_cast<std::size_t>(flat_index(idx))];
    }

    void fill(T value) {
        for (auto& v : data_) v = value;
    }

    template <typename U>
    Tensor<U> cast() const {
        std::vector<U> out(data_.size());
        for (std::size_t i = 0; i < data_.size(); ++i) out[i] = static_cast<U>(data_[i]);
        return Tensor<U>(shape_, std::move(out));
    }

private:
    void validate_shape() const {
        for (i64 d : shape_) {
            if (d <= 0) {
                throw std::invalid_argument("shape dimensions must be positive, got " +
                                            shape_str(shape_));
            }
        }
    }

    i64 flat_index(std::initializer_list<i64> idx) const {
        if (static_cast<int>(idx.size()) != rank()) {
            throw std::invalid_argument("index rank mismatch");
        }
        i64 flat = 0;
        i64 stride = 1;
        auto it = idx.end();
        for (int d = rank() - 1; d >= 0; --d) {
            --it;
            if (*it < 0 || *it >= shape_[d]) throw std::out_of_range("tensor index out of range");
            flat += *it * stride;
            stride *= shape_[d];
        }
        return flat;
    }

    Shape shape_;
    std::vector<T> data_;
};

}  // namespace pfm
