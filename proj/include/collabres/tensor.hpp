#pragma once

#include <cstddef>
#include <cstdint>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace collabres {

/// Thrown when operand shapes are incompatible. The message names both shapes.
class ShapeError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// Dense row-major matrix. Parameters and activations use the float
/// instantiation; the double instantiation exists for gradient verification.
template <typename T>
class Matrix {
public:
    using value_type = T;

    Matrix() = default;
    Matrix(std::size_t rows, std::size_t cols, T fill = T(0))
        : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
    Matrix(std::size_t rows, std::size_t cols, std::vector<T> data);

    /// Row-major nested initializer, mainly for tests: {{1,2},{3,4}}.
    static Matrix from_rows(const std::vector<std::vector<T>>& rows);
    static Matrix identity(std::size_t n);

    std::size_t rows() const noexcept { return rows_; }
    std::size_t cols() const noexcept { return cols_; }
    std::size_t size() const noexcept { return data_.size(); }
    bool empty() const noexcept { return data_.empty(); }

    T& operator()(std::size_t r, std::size_t c) noexcept { return data_[r * cols_ + c]; }
    T operator()(std::size_t r, std::size_t c) const noexcept { return data_[r * cols_ + c]; }

    std::span<T> row(std::size_t r) noexcept { return {data_.data() + r * cols_, cols_}; }
    std::span<const T> row(std::size_t r) const noexcept { return {data_.data() + r * cols_, cols_}; }

    std::span<T> values() noexcept { return data_; }
    std::span<const T> values() const noexcept { return data_; }
    T* data() noexcept { return data_.data(); }
    const T* data() const noexcept { return data_.data(); }

    std::string shape_string() const;
    bool all_finite() const noexcept;

    template <typename U>
    Matrix<U> cast() const {
        Matrix<U> out(rows_, cols_);
        for (std::size_t i = 0; i < data_.size(); ++i) out.data()[i] = static_cast<U>(data_[i]);
        return out;
    }

    friend bool operator==(const Matrix&, const Matrix&) = default;

private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<T> data_;
};

using DenseMatrix = Matrix<float>;

/// Rows of 0/1 values stored as sorted lists of active column indices.
class SparseBinaryMatrix {
public:
    SparseBinaryMatrix() = default;
    explicit SparseBinaryMatrix(std::size_t cols) : cols_(cols) {}
    /// Validates every row: indices < cols and strictly increasing.
    SparseBinaryMatrix(std::size_t cols, std::vector<std::vector<std::uint32_t>> rows);

    std::size_t rows() const noexcept { return rows_.size(); }
    std::size_t cols() const noexcept { return cols_; }
    std::span<const std::uint32_t> row(std::size_t r) const noexcept { return rows_[r]; }
    const std::vector<std::vector<std::uint32_t>>& row_lists() const noexcept { return rows_; }

    /// Sorts and de-duplicates `indices` before appending.
    void push_row(std::vector<std::uint32_t> indices);
    bool contains(std::size_t r, std::uint32_t c) const;
    std::size_t nnz() const noexcept;

    SparseBinaryMatrix select_rows(std::span<const std::size_t> rows) const;

    /// Checks the index invariants and throws ShapeError on violation.
    void validate() const;

    template <typename T = float>
    Matrix<T> densify() const {
        Matrix<T> out(rows(), cols_);
        for (std::size_t r = 0; r < rows(); ++r)
            for (auto c : rows_[r]) out(r, c) = T(1);
        return out;
    }

    std::string shape_string() const;

    friend bool operator==(const SparseBinaryMatrix&, const SparseBinaryMatrix&) = default;

private:
    std::size_t cols_ = 0;
    std::vector<std::vector<std::uint32_t>> rows_;
};

/// Seeded pseudo-random source. The engine is std::mt19937_64, whose output
/// sequence is fixed by the standard; the distributions below are implemented
/// here rather than taken from <random> because the library ones are
/// implementation-defined.
class SeededRng {
public:
    explicit SeededRng(std::uint64_t seed = 0) : seed_(seed), engine_(seed) {}

    std::uint64_t seed() const noexcept { return seed_; }
    std::uint64_t next_u64() { return engine_(); }
    /// Uniform in [0, 1) with 53 random bits.
    double uniform();
    /// Uniform integer in [0, n). n must be positive.
    std::uint64_t uniform_index(std::uint64_t n);
    /// Standard normal via Box-Muller; caches the second variate.
    double normal();
    bool bernoulli(double p) { return uniform() < p; }

    template <typename It>
    void shuffle(It first, It last) {
        auto n = static_cast<std::uint64_t>(last - first);
        for (std::uint64_t i = n; i > 1; --i) {
            auto j = uniform_index(i);
            std::swap(first[i - 1], first[j]);
        }
    }

    /// Derives an independent child stream; used to give subsystems their own rng.
    SeededRng fork(std::uint64_t salt);

private:
    std::uint64_t seed_;
    std::mt19937_64 engine_;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

template <typename T>
Matrix<T> matmul(const Matrix<T>& a, const Matrix<T>& b);

/// Row i of the result is the sum of w's rows at the active indices of s's row i.
template <typename T>
Matrix<T> sparse_dense_product(const SparseBinaryMatrix& s, const Matrix<T>& w);

template <typename T>
Matrix<T> transpose(const Matrix<T>& a);

DenseMatrix sample_gaussian(SeededRng& rng, std::size_t rows, std::size_t cols, double mean, double stddev);

}  // namespace collabres
