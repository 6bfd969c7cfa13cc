#pragma once

// Data-parallel compute kernels behind the tensor and layer operations.
//
// Every kernel in `collabres::kernels` is OpenMP-parallel over output rows and
// accumulates each output element in a fixed, ascending index order, so the
// result is bitwise independent of the thread count. `collabres::kernels::serial`
// holds the textbook single-threaded loops the parallel versions are tested
// against; nothing outside tests and benchmarks calls them.

#include "collabres/tensor.hpp"

namespace collabres::kernels {

/// Sets the OpenMP thread count (no-op without OpenMP). Values < 1 mean 1.
void set_num_threads(int n);
int num_threads();

/// c += a * b, accumulating over a's columns in ascending order.
template <typename T>
void gemm_accumulate(const Matrix<T>& a, const Matrix<T>& b, Matrix<T>& c);

template <typename T>
Matrix<T> matmul(const Matrix<T>& a, const Matrix<T>& b);

/// y = x * w^T + bias, with w stored out x in and bias 1 x out.
template <typename T>
Matrix<T> linear_forward(const Matrix<T>& x, const Matrix<T>& w, const Matrix<T>& bias);

/// Same as linear_forward with a 0/1 sparse input.
template <typename T>
Matrix<T> sparse_linear_forward(const SparseBinaryMatrix& x, const Matrix<T>& w, const Matrix<T>& bias);

template <typename T>
Matrix<T> sparse_dense_product(const SparseBinaryMatrix& s, const Matrix<T>& w);

/// dW (out x in) = dy^T * x, summed over batch rows in ascending order.
template <typename T>
Matrix<T> weight_grad(const Matrix<T>& dy, const Matrix<T>& x);

template <typename T>
Matrix<T> sparse_weight_grad(const Matrix<T>& dy, const SparseBinaryMatrix& x);

/// 1 x cols row of column sums, rows added in ascending order.
template <typename T>
Matrix<T> column_sums(const Matrix<T>& m);

namespace serial {

template <typename T>
Matrix<T> matmul(const Matrix<T>& a, const Matrix<T>& b);
template <typename T>
Matrix<T> linear_forward(const Matrix<T>& x, const Matrix<T>& w, const Matrix<T>& bias);
template <typename T>
Matrix<T> sparse_linear_forward(const SparseBinaryMatrix& x, const Matrix<T>& w, const Matrix<T>& bias);
template <typename T>
Matrix<T> sparse_dense_product(const SparseBinaryMatrix& s, const Matrix<T>& w);
template <typename T>
Matrix<T> weight_grad(const Matrix<T>& dy, const Matrix<T>& x);
template <typename T>
Matrix<T> sparse_weight_grad(const Matrix<T>& dy, const SparseBinaryMatrix& x);
template <typename T>
Matrix<T> column_sums(const Matrix<T>& m);

}  // namespace serial

}  // namespace collabres::kernels
