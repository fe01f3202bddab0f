#pragma once

#include <cmath>
#include <cstddef>
#include <vector>

#include "palign/errors.hpp"

namespace palign {

/// Dense row-major matrix. Deliberately minimal: the numeric kernels in this
/// project are written as explicit loops so every gradient term is auditable.
template <typename T>
class Mat {
public:
    Mat() = default;
    Mat(std::size_t rows, std::size_t cols, T fill = T(0))
        : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

    std::size_t rows() const { return rows_; }
    std::size_t cols() const { return cols_; }
    std::size_t size() const { return data_.size(); }

    T& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
    const T& operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

    T* row(std::size_t r) { return data_.data() + r * cols_; }
    const T* row(std::size_t r) const { return data_.data() + r * cols_; }

    std::vector<T>& data() { return data_; }
    const std::vector<T>& data() const { return data_; }

    std::vector<T> row_copy(std::size_t r) const {
        return std::vector<T>(row(r), row(r) + cols_);
    }

    void set_row(std::size_t r, const std::vector<T>& v) {
        for (std::size_t c = 0; c < cols_; ++c) (*this)(r, c) = v[c];
    }

    bool same_shape(const Mat& o) const { return rows_ == o.rows_ && cols_ == o.cols_; }

    template <typename U>
    Mat<U> cast() const {
        Mat<U> out(rows_, cols_);
        for (std::size_t i = 0; i < data_.size(); ++i) out.data()[i] = static_cast<U>(data_[i]);
        return out;
    }

private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<T> data_;
};

using MatD = Mat<double>;
using VecD = std::vector<double>;

template <typename T>
T dot(const std::vector<T>& a, const std::vector<T>& b) {
    T s = T(0);
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

template <typename T>
T norm2(const std::vector<T>& a) {
    return std::sqrt(dot(a, a));
}

template <typename T>
std::vector<T> cast_vec(const std::vector<double>& v) {
    std::vector<T> out(v.size());
    for (std::size_t i = 0; i < v.size(); ++i) out[i] = static_cast<T>(v[i]);
    return out;
}

inline VecD to_double_vec(const std::vector<float>& v) {
    VecD out(v.size());
    for (std::size_t i = 0; i < v.size(); ++i) out[i] = static_cast<double>(v[i]);
    return out;
}

template <typename T>
bool all_finite(const std::vector<T>& v) {
    for (T x : v)
        if (!std::isfinite(static_cast<double>(x))) return false;
    return true;
}

template <typename T>
bool all_finite(const Mat<T>& m) {
    return all_finite(m.data());
}

}  // namespace palign
