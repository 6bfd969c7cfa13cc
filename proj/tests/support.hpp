#pragma once

// Oracles and generators shared by the unit tests and the acceptance runner.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include "collabres/metrics.hpp"
#include "collabres/nn.hpp"
#include "collabres/tensor.hpp"

namespace collabres::oracle {

inline SparseBinaryMatrix random_sparse(SeededRng& rng, std::size_t rows, std::size_t cols, double density) {
    SparseBinaryMatrix m(cols);
    for (std::size_t r = 0; r < rows; ++r) {
        std::vector<std::uint32_t> idx;
        for (std::size_t c = 0; c < cols; ++c)
            if (rng.uniform() < density) idx.push_back(static_cast<std::uint32_t>(c));
        if (idx.empty()) idx.push_back(static_cast<std::uint32_t>(rng.uniform_index(cols)));
        m.push_row(std::move(idx));
    }
    return m;
}

template <typename T>
Matrix<T> random_dense(SeededRng& rng, std::size_t rows, std::size_t cols, double sparsity = 0.0) {
    Matrix<T> m(rows, cols);
    for (auto& v : m.values()) v = rng.uniform() < sparsity ? T(0) : static_cast<T>(rng.uniform() * 2.0 - 1.0);
    return m;
}

// ---- finite differences ----------------------------------------------------

struct GradCheckResult {
    std::size_t checked = 0;
    std::size_t kinks = 0;
    std::size_t failures = 0;
    double max_rel_error = 0.0;
    std::string worst;
};

/// Relative error with a floor on the denominator so that gradients that are
/// zero up to rounding compare absolutely.
inline double relative_error(double analytic, double numeric) {
    const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-6});
    return std::abs(analytic - numeric) / denom;
}

/// Compares model_backward against central differences (double precision) on
/// `coordinates` random parameter entries. Dropout masks are reproduced by
/// reseeding before each forward pass. Coordinates where any cached
/// activation changes sign between theta+h and theta-h sit on a ReLU kink and
/// are skipped (counted, not checked).
inline GradCheckResult gradient_check(const nn::ModelSpec& spec, std::uint64_t seed, std::size_t coordinates,
                                      std::size_t batch_rows = 5, double h = 1e-5, double tolerance = 1e-4) {
    SeededRng rng(seed);
    auto params = nn::init_params(spec, rng).cast<double>();
    // Nonzero biases so that bias paths are exercised.
    for (auto& [name, m] : params.tensors())
        if (name.find("bias") != std::string::npos)
            for (auto& v : m.values()) v = 0.1 * (rng.uniform() - 0.5);
    const auto x = random_sparse(rng, batch_rows, spec.input_dim, 0.3);
    Matrix<double> y(batch_rows, spec.output_dim);
    for (auto& v : y.values()) v = rng.uniform() < 0.3 ? 1.0 : 0.0;
    const std::uint64_t mask_seed = rng.next_u64();

    auto run = [&](const nn::ParameterMap<double>& p) {
        SeededRng masks(mask_seed);
        return nn::model_forward(spec, p, x, nn::Mode::Train, masks);
    };
    const auto base = run(params);
    const auto bce = nn::sigmoid_bce(base.trace.logits, y);
    const auto grads = nn::model_backward(spec, params, base.trace, bce.dlogits);

    auto signs_differ = [](const nn::ForwardTrace<double>& a, const nn::ForwardTrace<double>& b) {
        auto differ = [](const Matrix<double>& u, const Matrix<double>& v) {
            if (u.values().size() != v.values().size()) return false;
            for (std::size_t i = 0; i < u.values().size(); ++i)
                if ((u.values()[i] > 0.0) != (v.values()[i] > 0.0)) return true;
            return false;
        };
        for (std::size_t n = 0; n < a.nodes.size(); ++n)
            if (differ(a.nodes[n].out, b.nodes[n].out) || differ(a.nodes[n].pre, b.nodes[n].pre) ||
                differ(a.nodes[n].hidden_pre, b.nodes[n].hidden_pre))
                return true;
        return false;
    };

    std::vector<std::pair<std::string, std::size_t>> all;
    for (const auto& [name, m] : params)
        for (std::size_t i = 0; i < m.values().size(); ++i) all.emplace_back(name, i);

    GradCheckResult res;
    std::size_t attempts = 0;
    while (res.checked < coordinates && attempts < coordinates * 20) {
        ++attempts;
        const auto& [name, i] = all[rng.uniform_index(all.size())];
        auto plus = params, minus = params;
        plus.at(name).values()[i] += h;
        minus.at(name).values()[i] -= h;
        const auto fp = run(plus);
        const auto fm = run(minus);
        if (signs_differ(fp.trace, fm.trace)) {
            ++res.kinks;
            continue;
        }
        const double numeric = (nn::sigmoid_bce(fp.trace.logits, y).loss - nn::sigmoid_bce(fm.trace.logits, y).loss) /
                               (2.0 * h);
        const double analytic = grads.at(name).values()[i];
        const double err = relative_error(analytic, numeric);
        ++res.checked;
        if (err > res.max_rel_error) {
            res.max_rel_error = err;
            res.worst = name + "[" + std::to_string(i) + "] analytic " + std::to_string(analytic) + " numeric " +
                        std::to_string(numeric);
        }
        if (err > tolerance) ++res.failures;
    }
    return res;
}

// ---- brute-force ranking metrics ------------------------------------------
// Direct O(L^2) enumerations of the documented definitions, independent of
// the sorting used by the library.

inline std::size_t brute_rank(const DenseMatrix& s, std::size_t r, std::size_t j) {
    std::size_t rank = 0;
    for (std::size_t k = 0; k < s.cols(); ++k)
        if (s(r, k) >= s(r, j)) ++rank;
    return rank;
}

struct BruteRanking {
    double lrap = 0.0;
    double coverage = 0.0;
    double ranking_loss = 0.0;
    std::size_t evaluated = 0;
};

inline BruteRanking brute_ranking(const metrics::PredictionBatch& b) {
    BruteRanking out;
    double lrap_sum = 0.0, cov_sum = 0.0, rl_sum = 0.0;
    for (std::size_t r = 0; r < b.size(); ++r) {
        std::vector<std::size_t> truth, other;
        for (std::size_t j = 0; j < b.labels(); ++j)
            (b.truth.contains(r, static_cast<std::uint32_t>(j)) ? truth : other).push_back(j);
        if (truth.empty() || other.empty()) continue;
        ++out.evaluated;
        double p = 0.0;
        std::size_t worst = 0;
        for (auto j : truth) {
            std::size_t above_true = 0;
            for (auto k : truth)
                if (b.scores(r, k) >= b.scores(r, j)) ++above_true;
            p += static_cast<double>(above_true) / static_cast<double>(brute_rank(b.scores, r, j));
            worst = std::max(worst, brute_rank(b.scores, r, j));
        }
        lrap_sum += p / static_cast<double>(truth.size());
        cov_sum += static_cast<double>(worst);
        std::size_t bad = 0;
        for (auto j : truth)
            for (auto k : other)
                if (b.scores(r, k) >= b.scores(r, j)) ++bad;
        rl_sum += static_cast<double>(bad) / (static_cast<double>(truth.size()) * static_cast<double>(other.size()));
    }
    if (out.evaluated > 0) {
        out.lrap = lrap_sum / static_cast<double>(out.evaluated);
        out.coverage = cov_sum / static_cast<double>(out.evaluated);
        out.ranking_loss = rl_sum / static_cast<double>(out.evaluated);
    }
    return out;
}

/// Scores drawn from a handful of levels so that ties are frequent.
inline metrics::PredictionBatch random_prediction_batch(SeededRng& rng, std::size_t n, std::size_t labels) {
    metrics::PredictionBatch b;
    b.scores = DenseMatrix(n, labels);
    const bool coarse = rng.uniform() < 0.5;
    for (auto& v : b.scores.values())
        v = coarse ? static_cast<float>(rng.uniform_index(5)) / 4.0f : static_cast<float>(rng.uniform());
    b.truth = SparseBinaryMatrix(labels);
    for (std::size_t r = 0; r < n; ++r) {
        std::vector<std::uint32_t> t;
        const double density = rng.uniform();
        for (std::size_t j = 0; j < labels; ++j)
            if (rng.uniform() < density) t.push_back(static_cast<std::uint32_t>(j));
        b.truth.push_row(std::move(t));
    }
    return b;
}

// ---- early stopping ---------------------------------------------------------

/// Stop epoch straight from the definition: the first e such that epochs
/// e-patience+1..e all fail to exceed the best metric before them, capped at
/// max_epochs. Also returns the first epoch holding the maximum up to the stop.
struct StopOracle {
    std::size_t stop_epoch = 0;
    std::size_t best_epoch = 0;
    bool early = false;
};

inline StopOracle early_stop_oracle(const std::vector<double>& metric, std::size_t patience, std::size_t max_epochs) {
    StopOracle o;
    const std::size_t n = std::min(metric.size(), max_epochs);
    auto improves = [&](std::size_t e) {  // 1-based epoch e beats everything before it
        for (std::size_t k = 1; k < e; ++k)
            if (metric[k - 1] >= metric[e - 1]) return false;
        return true;
    };
    o.stop_epoch = n;
    for (std::size_t e = patience + 1; e <= n; ++e) {
        bool all_fail = true;
        for (std::size_t k = e - patience + 1; k <= e; ++k)
            if (improves(k)) all_fail = false;
        if (all_fail) {
            o.stop_epoch = e;
            o.early = true;
            break;
        }
    }
    o.best_epoch = 1;
    for (std::size_t e = 2; e <= o.stop_epoch; ++e)
        if (metric[e - 1] > metric[o.best_epoch - 1]) o.best_epoch = e;
    return o;
}

}  // namespace collabres::oracle
