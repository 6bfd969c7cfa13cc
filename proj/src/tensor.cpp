#include "collabres/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>

#include "collabres/kernels.hpp"

namespace collabres {

template <typename T>
Matrix<T>::Matrix(std::size_t rows, std::size_t cols, std::vector<T> data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (data_.size() != rows_ * cols_)
        throw ShapeError("matrix data length " + std::to_string(data_.size()) + " does not match " +
                         shape_string());
}

template <typename T>
Matrix<T> Matrix<T>::from_rows(const std::vector<std::vector<T>>& rows) {
    const std::size_t cols = rows.empty() ? 0 : rows.front().size();
    Matrix out(rows.size(), cols);
    for (std::size_t r = 0; r < rows.size(); ++r) {
        if (rows[r].size() != cols) throw ShapeError("ragged row " + std::to_string(r) + " in matrix literal");
        std::copy(rows[r].begin(), rows[r].end(), out.row(r).begin());
    }
    return out;
}

template <typename T>
Matrix<T> Matrix<T>::identity(std::size_t n) {
    Matrix out(n, n);
    for (std::size_t i = 0; i < n; ++i) out(i, i) = T(1);
    return out;
}

template <typename T>
std::string Matrix<T>::shape_string() const {
    return "[" + std::to_string(rows_) + "x" + std::to_string(cols_) + "]";
}

template <typename T>
bool Matrix<T>::all_finite() const noexcept {
    return std::all_of(data_.begin(), data_.end(), [](T v) { return std::isfinite(v); });
}

template class Matrix<float>;
template class Matrix<double>;

SparseBinaryMatrix::SparseBinaryMatrix(std::size_t cols, std::vector<std::vector<std::uint32_t>> rows)
    : cols_(cols), rows_(std::move(rows)) {
    validate();
}

void SparseBinaryMatrix::push_row(std::vector<std::uint32_t> indices) {
    std::sort(indices.begin(), indices.end());
    indices.erase(std::unique(indices.begin(), indices.end()), indices.end());
    if (!indices.empty() && indices.back() >= cols_)
        throw ShapeError("sparse index " + std::to_string(indices.back()) + " out of range for " +
                         std::to_string(cols_) + " columns");
    rows_.push_back(std::move(indices));
}

bool SparseBinaryMatrix::contains(std::size_t r, std::uint32_t c) const {
    const auto& row = rows_[r];
    return std::binary_search(row.begin(), row.end(), c);
}

std::size_t SparseBinaryMatrix::nnz() const noexcept {
    std::size_t n = 0;
    for (const auto& r : rows_) n += r.size();
    return n;
}

SparseBinaryMatrix SparseBinaryMatrix::select_rows(std::span<const std::size_t> rows) const {
    SparseBinaryMatrix out(cols_);
    out.rows_.reserve(rows.size());
    for (auto r : rows) out.rows_.push_back(rows_.at(r));
    return out;
}

void SparseBinaryMatrix::validate() const {
    for (std::size_t r = 0; r < rows_.size(); ++r) {
        const auto& row = rows_[r];
        for (std::size_t k = 0; k < row.size(); ++k) {
            if (row[k] >= cols_)
                throw ShapeError("sparse row " + std::to_string(r) + " has index " + std::to_string(row[k]) +
                                 " out of range for " + std::to_string(cols_) + " columns");
            if (k > 0 && row[k] <= row[k - 1])
                throw ShapeError("sparse row " + std::to_string(r) + " indices are not strictly increasing");
        }
    }
}

std::string SparseBinaryMatrix::shape_string() const {
    return "[" + std::to_string(rows()) + "x" + std::to_string(cols_) + " sparse]";
}

double SeededRng::uniform() {
    return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
}

std::uint64_t SeededRng::uniform_index(std::uint64_t n) {
    if (n == 0) throw std::invalid_argument("uniform_index: empty range");
    // Rejection sampling keeps the draw exactly uniform.
    const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() -
                                std::numeric_limits<std::uint64_t>::max() % n;
    std::uint64_t x;
    do {
        x = engine_();
    } while (x >= limit);
    return x % n;
}

double SeededRng::normal() {
    if (has_spare_) {
        has_spare_ = false;
        return spare_;
    }
    double u1;
    do {
        u1 = uniform();
    } while (u1 <= 0.0);
    const double u2 = uniform();
    const double radius = std::sqrt(-2.0 * std::log(u1));
    const double angle = 2.0 * std::numbers::pi * u2;
    spare_ = radius * std::sin(angle);
    has_spare_ = true;
    return radius * std::cos(angle);
}

SeededRng SeededRng::fork(std::uint64_t salt) {
    // splitmix64 finalizer over a fresh draw mixed with the salt
    std::uint64_t z = engine_() ^ (salt * 0x9E3779B97F4A7C15ULL);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return SeededRng(z ^ (z >> 31));
}

template <typename T>
Matrix<T> matmul(const Matrix<T>& a, const Matrix<T>& b) {
    return kernels::matmul(a, b);
}

template <typename T>
Matrix<T> sparse_dense_product(const SparseBinaryMatrix& s, const Matrix<T>& w) {
    return kernels::sparse_dense_product(s, w);
}

template <typename T>
Matrix<T> transpose(const Matrix<T>& a) {
    Matrix<T> out(a.cols(), a.rows());
    for (std::size_t r = 0; r < a.rows(); ++r)
        for (std::size_t c = 0; c < a.cols(); ++c) out(c, r) = a(r, c);
    return out;
}

template Matrix<float> matmul<float>(const Matrix<float>&, const Matrix<float>&);
template Matrix<double> matmul<double>(const Matrix<double>&, const Matrix<double>&);
template Matrix<float> sparse_dense_product<float>(const SparseBinaryMatrix&, const Matrix<float>&);
template Matrix<double> sparse_dense_product<double>(const SparseBinaryMatrix&, const Matrix<double>&);
template Matrix<float> transpose<float>(const Matrix<float>&);
template Matrix<double> transpose<double>(const Matrix<double>&);

DenseMatrix sample_gaussian(SeededRng& rng, std::size_t rows, std::size_t cols, double mean, double stddev) {
    if (!(stddev >= 0.0)) throw std::invalid_argument("sample_gaussian: stddev must be >= 0, got " + std::to_string(stddev));
    DenseMatrix out(rows, cols);
    for (auto& v : out.values()) v = static_cast<float>(mean + stddev * rng.normal());
    return out;
}

}  // namespace collabres
