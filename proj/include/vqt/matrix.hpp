#pragma once

#include <cassert>
#include <cstdint>
#include <cstring>
#include <span>
#include <vector>

namespace vqt {

/// Dense row-major matrix. Rows are contiguous so they can be handed out as
/// spans and compared bit-for-bit with memcmp.
template <typename T>
class Matrix {
public:
    Matrix() = default;
    Matrix(int64_t rows, int64_t cols) : rows_(rows), cols_(cols), data_(static_cast<size_t>(rows * cols)) {}

    int64_t rows() const { return rows_; }
    int64_t cols() const { return cols_; }
    bool empty() const { return data_.empty(); }

    T& operator()(int64_t r, int64_t c) { return data_[static_cast<size_t>(r * cols_ + c)]; }
    const T& operator()(int64_t r, int64_t c) const { return data_[static_cast<size_t>(r * cols_ + c)]; }

    std::span<T> row(int64_t r) { return {data_.data() + r * cols_, static_cast<size_t>(cols_)}; }
    std::span<const T> row(int64_t r) const { return {data_.data() + r * cols_, static_cast<size_t>(cols_)}; }

    T* data() { return data_.data(); }
    const T* data() const { return data_.data(); }

    void fill(T v) { std::fill(data_.begin(), data_.end(), v); }
    void zero() { fill(T(0)); }

    void resize(int64_t rows, int64_t cols) {
        rows_ = rows;
        cols_ = cols;
        data_.assign(static_cast<size_t>(rows * cols), T(0));
    }

    /// Appends a row and returns its index.
    int64_t append_row(std::span<const T> r) {
        assert(static_cast<int64_t>(r.size()) == cols_ || rows_ == 0);
        if (rows_ == 0 && cols_ == 0) cols_ = static_cast<int64_t>(r.size());
        data_.insert(data_.end(), r.begin(), r.end());
        return rows_++;
    }

    int64_t append_zero_row() {
        data_.insert(data_.end(), static_cast<size_t>(cols_), T(0));
        return rows_++;
    }

    void insert_zero_row(int64_t at) {
        data_.insert(data_.begin() + at * cols_, static_cast<size_t>(cols_), T(0));
        ++rows_;
    }

    void erase_row(int64_t at) {
        data_.erase(data_.begin() + at * cols_, data_.begin() + (at + 1) * cols_);
        --rows_;
    }

    bool rows_equal_bits(int64_t a, int64_t b) const {
        return std::memcmp(data_.data() + a * cols_, data_.data() + b * cols_, sizeof(T) * cols_) == 0;
    }

private:
    int64_t rows_ = 0;
    int64_t cols_ = 0;
    std::vector<T> data_;
};

/// Dense b x n x d tensor, row-major; (batch, position) vectors are contiguous.
template <typename T>
class Tensor3 {
public:
    Tensor3() = default;
    Tensor3(int64_t b, int64_t n, int64_t d) : b_(b), n_(n), d_(d), data_(static_cast<size_t>(b * n * d)) {}

    int64_t batch() const { return b_; }
    int64_t seq() const { return n_; }
    int64_t dim() const { return d_; }

    std::span<T> at(int64_t i, int64_t j) { return {data_.data() + (i * n_ + j) * d_, static_cast<size_t>(d_)}; }
    std::span<const T> at(int64_t i, int64_t j) const {
        return {data_.data() + (i * n_ + j) * d_, static_cast<size_t>(d_)};
    }

    T* data() { return data_.data(); }
    const T* data() const { return data_.data(); }
    void zero() { std::fill(data_.begin(), data_.end(), T(0)); }

private:
    int64_t b_ = 0;
    int64_t n_ = 0;
    int64_t d_ = 0;
    std::vector<T> data_;
};

template <typename T>
bool spans_equal_bits(std::span<const T> a, std::span<const T> b) {
    return a.size() == b.size() && std::memcmp(a.data(), b.data(), a.size() * sizeof(T)) == 0;
}

template <typename T>
T max_abs_diff(std::span<const T> a, std::span<const T> b) {
    assert(a.size() == b.size());
    T m = T(0);
    for (size_t i = 0; i < a.size(); ++i) {
        T d = a[i] > b[i] ? a[i] - b[i] : b[i] - a[i];
        if (d > m) m = d;
    }
    return m;
}

} // namespace vqt
