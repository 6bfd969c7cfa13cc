// Serial reference loops vs the OpenMP kernels at CollabRes training shapes
// (batch 2048, 300 medication tokens, 600/400-wide layers).
//
//   collabres_bench --benchmark_filter=Linear

#include <benchmark/benchmark.h>

#include <algorithm>

#include "collabres/kernels.hpp"

using namespace collabres;

namespace {

constexpr std::size_t kBatch = 2048;
constexpr std::size_t kTokens = 300;

DenseMatrix dense(std::size_t r, std::size_t c, std::uint64_t seed) {
    SeededRng rng(seed);
    DenseMatrix m(r, c);
    for (auto& v : m.values()) v = static_cast<float>(rng.uniform() - 0.5);
    return m;
}

SparseBinaryMatrix sparse(std::size_t r, std::size_t c, std::uint64_t seed) {
    SeededRng rng(seed);
    SparseBinaryMatrix m(c);
    for (std::size_t i = 0; i < r; ++i) {
        // 4..12 active tokens, as in the synthetic generator.
        std::vector<std::uint32_t> row;
        const std::size_t k = 4 + rng.uniform_index(9);
        while (row.size() < k) {
            const auto j = static_cast<std::uint32_t>(rng.uniform_index(c));
            if (std::find(row.begin(), row.end(), j) == row.end()) row.push_back(j);
        }
        std::sort(row.begin(), row.end());
        m.push_row(std::move(row));
    }
    return m;
}

void threads_from(benchmark::State& state) { kernels::set_num_threads(static_cast<int>(state.range(0))); }

void BM_LinearSerial(benchmark::State& state) {
    const auto x = dense(kBatch, 600, 1), w = dense(400, 600, 2), b = dense(1, 400, 3);
    for (auto _ : state) benchmark::DoNotOptimize(kernels::serial::linear_forward(x, w, b));
}
void BM_LinearParallel(benchmark::State& state) {
    threads_from(state);
    const auto x = dense(kBatch, 600, 1), w = dense(400, 600, 2), b = dense(1, 400, 3);
    for (auto _ : state) benchmark::DoNotOptimize(kernels::linear_forward(x, w, b));
}

void BM_SparseLinearSerial(benchmark::State& state) {
    const auto x = sparse(kBatch, kTokens, 4);
    const auto w = dense(600, kTokens, 5), b = dense(1, 600, 6);
    for (auto _ : state) benchmark::DoNotOptimize(kernels::serial::sparse_linear_forward(x, w, b));
}
void BM_SparseLinearParallel(benchmark::State& state) {
    threads_from(state);
    const auto x = sparse(kBatch, kTokens, 4);
    const auto w = dense(600, kTokens, 5), b = dense(1, 600, 6);
    for (auto _ : state) benchmark::DoNotOptimize(kernels::sparse_linear_forward(x, w, b));
}

void BM_WeightGradSerial(benchmark::State& state) {
    const auto dy = dense(kBatch, 400, 7), x = dense(kBatch, 600, 8);
    for (auto _ : state) benchmark::DoNotOptimize(kernels::serial::weight_grad(dy, x));
}
void BM_WeightGradParallel(benchmark::State& state) {
    threads_from(state);
    const auto dy = dense(kBatch, 400, 7), x = dense(kBatch, 600, 8);
    for (auto _ : state) benchmark::DoNotOptimize(kernels::weight_grad(dy, x));
}

void BM_SparseWeightGradSerial(benchmark::State& state) {
    const auto dy = dense(kBatch, 600, 9);
    const auto x = sparse(kBatch, kTokens, 10);
    for (auto _ : state) benchmark::DoNotOptimize(kernels::serial::sparse_weight_grad(dy, x));
}
void BM_SparseWeightGradParallel(benchmark::State& state) {
    threads_from(state);
    const auto dy = dense(kBatch, 600, 9);
    const auto x = sparse(kBatch, kTokens, 10);
    for (auto _ : state) benchmark::DoNotOptimize(kernels::sparse_weight_grad(dy, x));
}

void BM_MatmulSerial(benchmark::State& state) {
    const auto a = dense(kBatch, 400, 11), b = dense(400, 600, 12);
    for (auto _ : state) benchmark::DoNotOptimize(kernels::serial::matmul(a, b));
}
void BM_MatmulParallel(benchmark::State& state) {
    threads_from(state);
    const auto a = dense(kBatch, 400, 11), b = dense(400, 600, 12);
    for (auto _ : state) benchmark::DoNotOptimize(kernels::matmul(a, b));
}

}  // namespace

BENCHMARK(BM_LinearSerial)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_LinearParallel)->Arg(1)->Arg(2)->Arg(4)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_SparseLinearSerial)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_SparseLinearParallel)->Arg(1)->Arg(2)->Arg(4)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_WeightGradSerial)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_WeightGradParallel)->Arg(1)->Arg(2)->Arg(4)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_SparseWeightGradSerial)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_SparseWeightGradParallel)->Arg(1)->Arg(2)->Arg(4)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_MatmulSerial)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_MatmulParallel)->Arg(1)->Arg(2)->Arg(4)->Unit(benchmark::kMillisecond);

BENCHMARK_MAIN();
