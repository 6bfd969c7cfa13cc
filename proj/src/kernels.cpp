#include "collabres/kernels.hpp"

#include <algorithm>
#include <cstdint>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace collabres::kernels {

namespace {

constexpr std::size_t kRowBlock = 16;
constexpr std::size_t kDepthBlock = 128;

std::string shapes(const std::string& a, const std::string& b) { return a + " and " + b; }

template <typename T>
void check_bias(const Matrix<T>& bias, std::size_t out, const char* op) {
    if (bias.rows() != 1 || bias.cols() != out)
        throw ShapeError(std::string(op) + ": bias " + bias.shape_string() + " does not match output width " +
                         std::to_string(out));
}

void check_sparse_indices(const SparseBinaryMatrix& s) {
    for (std::size_t r = 0; r < s.rows(); ++r)
        for (auto c : s.row(r))
            if (c >= s.cols())
                throw ShapeError("sparse row " + std::to_string(r) + " has index " + std::to_string(c) +
                                 " out of range for " + std::to_string(s.cols()) + " columns");
}

template <typename T>
void add_bias_rows(Matrix<T>& y, const Matrix<T>& bias) {
    const auto rows = static_cast<std::int64_t>(y.rows());
    const std::size_t cols = y.cols();
    const T* b = bias.data();
#pragma omp parallel for schedule(static)
    for (std::int64_t r = 0; r < rows; ++r) {
        T* out = y.data() + static_cast<std::size_t>(r) * cols;
        for (std::size_t j = 0; j < cols; ++j) out[j] = out[j] + b[j];
    }
}

}  // namespace

void set_num_threads(int n) {
#ifdef _OPENMP
    omp_set_num_threads(std::max(1, n));
#else
    (void)n;
#endif
}

int num_threads() {
#ifdef _OPENMP
    return omp_get_max_threads();
#else
    return 1;
#endif
}

template <typename T>
void gemm_accumulate(const Matrix<T>& a, const Matrix<T>& b, Matrix<T>& c) {
    if (a.cols() != b.rows())
        throw ShapeError("matmul: inner dimensions differ for " + shapes(a.shape_string(), b.shape_string()));
    if (c.rows() != a.rows() || c.cols() != b.cols())
        throw ShapeError("matmul: output " + c.shape_string() + " does not fit " +
                         shapes(a.shape_string(), b.shape_string()));
    const std::size_t m = a.rows(), depth = a.cols(), n = b.cols();
    const auto row_blocks = static_cast<std::int64_t>((m + kRowBlock - 1) / kRowBlock);
    // Blocking only changes traversal; each c(i, j) still sums over k ascending.
#pragma omp parallel for schedule(static)
    for (std::int64_t rb = 0; rb < row_blocks; ++rb) {
        const std::size_t r0 = static_cast<std::size_t>(rb) * kRowBlock;
        const std::size_t r1 = std::min(m, r0 + kRowBlock);
        for (std::size_t k0 = 0; k0 < depth; k0 += kDepthBlock) {
            const std::size_t k1 = std::min(depth, k0 + kDepthBlock);
            for (std::size_t i = r0; i < r1; ++i) {
                const T* arow = a.data() + i * depth;
                T* crow = c.data() + i * n;
                for (std::size_t k = k0; k < k1; ++k) {
                    const T av = arow[k];
                    if (av == T(0)) continue;
                    const T* brow = b.data() + k * n;
                    for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
                }
            }
        }
    }
}

template <typename T>
Matrix<T> matmul(const Matrix<T>& a, const Matrix<T>& b) {
    if (a.cols() != b.rows())
        throw ShapeError("matmul: inner dimensions differ for " + shapes(a.shape_string(), b.shape_string()));
    Matrix<T> c(a.rows(), b.cols());
    gemm_accumulate(a, b, c);
    return c;
}

template <typename T>
Matrix<T> linear_forward(const Matrix<T>& x, const Matrix<T>& w, const Matrix<T>& bias) {
    if (x.cols() != w.cols())
        throw ShapeError("dense_forward: input " + x.shape_string() + " incompatible with weight " +
                         w.shape_string());
    check_bias(bias, w.rows(), "dense_forward");
    Matrix<T> y(x.rows(), w.rows());
    gemm_accumulate(x, transpose(w), y);
    add_bias_rows(y, bias);
    return y;
}

template <typename T>
Matrix<T> sparse_dense_product(const SparseBinaryMatrix& s, const Matrix<T>& w) {
    if (s.cols() != w.rows())
        throw ShapeError("sparse_dense_product: " + shapes(s.shape_string(), w.shape_string()));
    check_sparse_indices(s);
    const std::size_t n = w.cols();
    Matrix<T> y(s.rows(), n);
    const auto rows = static_cast<std::int64_t>(s.rows());
#pragma omp parallel for schedule(static)
    for (std::int64_t r = 0; r < rows; ++r) {
        T* out = y.data() + static_cast<std::size_t>(r) * n;
        for (auto k : s.row(static_cast<std::size_t>(r))) {
            const T* wrow = w.data() + static_cast<std::size_t>(k) * n;
            for (std::size_t j = 0; j < n; ++j) out[j] += wrow[j];
        }
    }
    return y;
}

template <typename T>
Matrix<T> sparse_linear_forward(const SparseBinaryMatrix& x, const Matrix<T>& w, const Matrix<T>& bias) {
    if (x.cols() != w.cols())
        throw ShapeError("dense_forward: sparse input " + x.shape_string() + " incompatible with weight " +
                         w.shape_string());
    check_bias(bias, w.rows(), "dense_forward");
    auto y = kernels::sparse_dense_product(x, transpose(w));
    add_bias_rows(y, bias);
    return y;
}

template <typename T>
Matrix<T> weight_grad(const Matrix<T>& dy, const Matrix<T>& x) {
    if (dy.rows() != x.rows())
        throw ShapeError("weight_grad: batch sizes differ for " + shapes(dy.shape_string(), x.shape_string()));
    Matrix<T> dw(dy.cols(), x.cols());
    gemm_accumulate(transpose(dy), x, dw);
    return dw;
}

template <typename T>
Matrix<T> sparse_weight_grad(const Matrix<T>& dy, const SparseBinaryMatrix& x) {
    if (dy.rows() != x.rows())
        throw ShapeError("weight_grad: batch sizes differ for " + shapes(dy.shape_string(), x.shape_string()));
    check_sparse_indices(x);
    // Column-wise index lists keep batch rows ascending within every column.
    std::vector<std::vector<std::uint32_t>> by_column(x.cols());
    for (std::size_t r = 0; r < x.rows(); ++r)
        for (auto c : x.row(r)) by_column[c].push_back(static_cast<std::uint32_t>(r));
    const std::size_t n = dy.cols();
    Matrix<T> dwt(x.cols(), n);
    const auto cols = static_cast<std::int64_t>(x.cols());
#pragma omp parallel for schedule(dynamic, 16)
    for (std::int64_t c = 0; c < cols; ++c) {
        T* out = dwt.data() + static_cast<std::size_t>(c) * n;
        for (auto r : by_column[static_cast<std::size_t>(c)]) {
            const T* g = dy.data() + static_cast<std::size_t>(r) * n;
            for (std::size_t j = 0; j < n; ++j) out[j] += g[j];
        }
    }
    return transpose(dwt);
}

template <typename T>
Matrix<T> column_sums(const Matrix<T>& m) {
    Matrix<T> out(1, m.cols());
    const auto cols = static_cast<std::int64_t>(m.cols());
#pragma omp parallel for schedule(static)
    for (std::int64_t j = 0; j < cols; ++j) {
        T acc = 0;
        for (std::size_t r = 0; r < m.rows(); ++r) acc += m(r, static_cast<std::size_t>(j));
        out(0, static_cast<std::size_t>(j)) = acc;
    }
    return out;
}

namespace serial {

template <typename T>
Matrix<T> matmul(const Matrix<T>& a, const Matrix<T>& b) {
    if (a.cols() != b.rows())
        throw ShapeError("matmul: inner dimensions differ for " + shapes(a.shape_string(), b.shape_string()));
    Matrix<T> c(a.rows(), b.cols());
    for (std::size_t i = 0; i < a.rows(); ++i)
        for (std::size_t j = 0; j < b.cols(); ++j) {
            T acc = 0;
            for (std::size_t k = 0; k < a.cols(); ++k) acc += a(i, k) * b(k, j);
            c(i, j) = acc;
        }
    return c;
}

template <typename T>
Matrix<T> linear_forward(const Matrix<T>& x, const Matrix<T>& w, const Matrix<T>& bias) {
    if (x.cols() != w.cols())
        throw ShapeError("dense_forward: input " + x.shape_string() + " incompatible with weight " +
                         w.shape_string());
    check_bias(bias, w.rows(), "dense_forward");
    Matrix<T> y(x.rows(), w.rows());
    for (std::size_t r = 0; r < x.rows(); ++r)
        for (std::size_t o = 0; o < w.rows(); ++o) {
            T acc = 0;
            for (std::size_t i = 0; i < x.cols(); ++i) acc += x(r, i) * w(o, i);
            y(r, o) = acc + bias(0, o);
        }
    return y;
}

template <typename T>
Matrix<T> sparse_linear_forward(const SparseBinaryMatrix& x, const Matrix<T>& w, const Matrix<T>& bias) {
    if (x.cols() != w.cols())
        throw ShapeError("dense_forward: sparse input " + x.shape_string() + " incompatible with weight " +
                         w.shape_string());
    check_bias(bias, w.rows(), "dense_forward");
    check_sparse_indices(x);
    Matrix<T> y(x.rows(), w.rows());
    for (std::size_t r = 0; r < x.rows(); ++r)
        for (std::size_t o = 0; o < w.rows(); ++o) {
            T acc = 0;
            for (auto i : x.row(r)) acc += w(o, i);
            y(r, o) = acc + bias(0, o);
        }
    return y;
}

template <typename T>
Matrix<T> sparse_dense_product(const SparseBinaryMatrix& s, const Matrix<T>& w) {
    if (s.cols() != w.rows())
        throw ShapeError("sparse_dense_product: " + shapes(s.shape_string(), w.shape_string()));
    check_sparse_indices(s);
    Matrix<T> y(s.rows(), w.cols());
    for (std::size_t r = 0; r < s.rows(); ++r)
        for (std::size_t j = 0; j < w.cols(); ++j) {
            T acc = 0;
            for (auto k : s.row(r)) acc += w(k, j);
            y(r, j) = acc;
        }
    return y;
}

template <typename T>
Matrix<T> weight_grad(const Matrix<T>& dy, const Matrix<T>& x) {
    if (dy.rows() != x.rows())
        throw ShapeError("weight_grad: batch sizes differ for " + shapes(dy.shape_string(), x.shape_string()));
    Matrix<T> dw(dy.cols(), x.cols());
    for (std::size_t o = 0; o < dy.cols(); ++o)
        for (std::size_t i = 0; i < x.cols(); ++i) {
            T acc = 0;
            for (std::size_t r = 0; r < dy.rows(); ++r) acc += dy(r, o) * x(r, i);
            dw(o, i) = acc;
        }
    return dw;
}

template <typename T>
Matrix<T> sparse_weight_grad(const Matrix<T>& dy, const SparseBinaryMatrix& x) {
    if (dy.rows() != x.rows())
        throw ShapeError("weight_grad: batch sizes differ for " + shapes(dy.shape_string(), x.shape_string()));
    check_sparse_indices(x);
    Matrix<T> dw(dy.cols(), x.cols());
    for (std::size_t o = 0; o < dy.cols(); ++o)
        for (std::size_t i = 0; i < x.cols(); ++i) {
            T acc = 0;
            for (std::size_t r = 0; r < x.rows(); ++r)
                if (x.contains(r, static_cast<std::uint32_t>(i))) acc += dy(r, o);
            dw(o, i) = acc;
        }
    return dw;
}

template <typename T>
Matrix<T> column_sums(const Matrix<T>& m) {
    Matrix<T> out(1, m.cols());
    for (std::size_t j = 0; j < m.cols(); ++j) {
        T acc = 0;
        for (std::size_t r = 0; r < m.rows(); ++r) acc += m(r, j);
        out(0, j) = acc;
    }
    return out;
}

}  // namespace serial

#define COLLABRES_INSTANTIATE_KERNELS(T)                                                                     \
    template void gemm_accumulate<T>(const Matrix<T>&, const Matrix<T>&, Matrix<T>&);                       \
    template Matrix<T> matmul<T>(const Matrix<T>&, const Matrix<T>&);                                       \
    template Matrix<T> linear_forward<T>(const Matrix<T>&, const Matrix<T>&, const Matrix<T>&);             \
    template Matrix<T> sparse_linear_forward<T>(const SparseBinaryMatrix&, const Matrix<T>&, const Matrix<T>&); \
    template Matrix<T> sparse_dense_product<T>(const SparseBinaryMatrix&, const Matrix<T>&);                \
    template Matrix<T> weight_grad<T>(const Matrix<T>&, const Matrix<T>&);                                  \
    template Matrix<T> sparse_weight_grad<T>(const Matrix<T>&, const SparseBinaryMatrix&);                  \
    template Matrix<T> column_sums<T>(const Matrix<T>&);                                                    \
    template Matrix<T> serial::matmul<T>(const Matrix<T>&, const Matrix<T>&);                               \
    template Matrix<T> serial::linear_forward<T>(const Matrix<T>&, const Matrix<T>&, const Matrix<T>&);     \
    template Matrix<T> serial::sparse_linear_forward<T>(const SparseBinaryMatrix&, const Matrix<T>&,        \
                                                        const Matrix<T>&);                                  \
    template Matrix<T> serial::sparse_dense_product<T>(const SparseBinaryMatrix&, const Matrix<T>&);        \
    template Matrix<T> serial::weight_grad<T>(const Matrix<T>&, const Matrix<T>&);                          \
    template Matrix<T> serial::sparse_weight_grad<T>(const Matrix<T>&, const SparseBinaryMatrix&);          \
    template Matrix<T> serial::column_sums<T>(const Matrix<T>&);

COLLABRES_INSTANTIATE_KERNELS(float)
COLLABRES_INSTANTIATE_KERNELS(double)

#undef COLLABRES_INSTANTIATE_KERNELS

}  // namespace collabres::kernels
