#include "collabres/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <functional>
#include <map>
#include <stdexcept>

namespace collabres::metrics {

namespace {

std::vector<float> row_scores(const DenseMatrix& scores, std::size_t r) {
    auto row = scores.row(r);
    return {row.begin(), row.end()};
}

// Count of entries >= x in a descending-sorted vector.
std::size_t count_at_least(const std::vector<float>& descending, float x) {
    auto it = std::partition_point(descending.begin(), descending.end(), [x](float v) { return v >= x; });
    return static_cast<std::size_t>(it - descending.begin());
}

struct RankingTerms {
    double sum = 0.0;
    std::size_t evaluated = 0;
};

// Applies `term` to every non-degenerate sample; the per-sample value is
// added in sample order.
template <typename F>
RankingTerms accumulate_ranking(const PredictionBatch& batch, F&& term) {
    batch.validate();
    RankingTerms t;
    for (std::size_t r = 0; r < batch.size(); ++r) {
        if (is_degenerate(batch.truth.row(r).size(), batch.labels())) continue;
        t.sum += term(r);
        ++t.evaluated;
    }
    if (t.evaluated == 0) throw std::domain_error("no evaluable samples");
    return t;
}

double lrap_sample(const PredictionBatch& batch, std::size_t r) {
    auto all = row_scores(batch.scores, r);
    std::sort(all.begin(), all.end(), std::greater<>());
    const auto truth = batch.truth.row(r);
    std::vector<float> true_scores;
    for (auto j : truth) true_scores.push_back(batch.scores(r, j));
    std::sort(true_scores.begin(), true_scores.end(), std::greater<>());
    double s = 0.0;
    for (auto j : truth) {
        const float x = batch.scores(r, j);
        s += static_cast<double>(count_at_least(true_scores, x)) / static_cast<double>(count_at_least(all, x));
    }
    return s / static_cast<double>(truth.size());
}

double coverage_sample(const PredictionBatch& batch, std::size_t r) {
    const auto truth = batch.truth.row(r);
    float lowest = batch.scores(r, truth[0]);
    for (auto j : truth) lowest = std::min(lowest, batch.scores(r, j));
    std::size_t rank = 0;
    for (auto v : batch.scores.row(r))
        if (v >= lowest) ++rank;
    return static_cast<double>(rank);
}

double ranking_loss_sample(const PredictionBatch& batch, std::size_t r) {
    const auto truth = batch.truth.row(r);
    std::vector<float> false_scores;
    std::size_t t = 0;
    for (std::size_t j = 0; j < batch.labels(); ++j) {
        if (t < truth.size() && truth[t] == j) {
            ++t;
            continue;
        }
        false_scores.push_back(batch.scores(r, j));
    }
    std::sort(false_scores.begin(), false_scores.end());
    std::size_t violations = 0;
    for (auto j : truth) {
        const float x = batch.scores(r, j);
        auto it = std::lower_bound(false_scores.begin(), false_scores.end(), x);
        violations += static_cast<std::size_t>(false_scores.end() - it);
    }
    return static_cast<double>(violations) /
           (static_cast<double>(truth.size()) * static_cast<double>(false_scores.size()));
}

std::string fmt_double(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.4f", v);
    return buf;
}

}  // namespace

void PredictionBatch::validate() const {
    if (truth.rows() != scores.rows() || truth.cols() != scores.cols())
        throw std::invalid_argument("prediction batch: scores " + scores.shape_string() + " vs truth " +
                                    truth.shape_string());
    if (!(threshold > 0.0 && threshold < 1.0))
        throw std::invalid_argument("prediction batch: threshold must lie in (0,1)");
    if (!scores.all_finite()) throw std::invalid_argument("prediction batch: non-finite score");
    if (!principal.empty()) {
        if (principal.size() != scores.rows())
            throw std::invalid_argument("prediction batch: principal labels do not cover every sample");
        for (std::size_t r = 0; r < principal.size(); ++r)
            if (principal[r] < 0 || !truth.contains(r, static_cast<std::uint32_t>(principal[r])))
                throw std::invalid_argument("prediction batch: principal label of sample " + std::to_string(r) +
                                            " is not in its true set");
    }
}

PredictionBatch PredictionBatch::select(std::span<const std::size_t> rows) const {
    PredictionBatch out;
    out.scores = DenseMatrix(rows.size(), scores.cols());
    for (std::size_t i = 0; i < rows.size(); ++i) std::copy_n(scores.row(rows[i]).begin(), scores.cols(), out.scores.row(i).begin());
    out.truth = truth.select_rows(rows);
    if (!principal.empty())
        for (auto r : rows) out.principal.push_back(principal.at(r));
    out.threshold = threshold;
    return out;
}

bool is_degenerate(std::size_t true_count, std::size_t label_count) noexcept {
    return true_count == 0 || true_count >= label_count;
}

double lrap(const PredictionBatch& batch) {
    auto t = accumulate_ranking(batch, [&](std::size_t r) { return lrap_sample(batch, r); });
    return t.sum / static_cast<double>(t.evaluated);
}

double coverage_error(const PredictionBatch& batch) {
    auto t = accumulate_ranking(batch, [&](std::size_t r) { return coverage_sample(batch, r); });
    return t.sum / static_cast<double>(t.evaluated);
}

double ranking_loss(const PredictionBatch& batch) {
    auto t = accumulate_ranking(batch, [&](std::size_t r) { return ranking_loss_sample(batch, r); });
    return t.sum / static_cast<double>(t.evaluated);
}

SetMetrics set_metrics(const PredictionBatch& batch) {
    batch.validate();
    SetMetrics m;
    const std::size_t n = batch.size();
    const std::size_t L = batch.labels();
    std::vector<std::size_t> tp(L), predicted(L), actual(L);
    std::size_t total_tp = 0, total_pred = 0, total_true = 0;
    double f1_sum = 0.0, jac_sum = 0.0;
    for (std::size_t r = 0; r < n; ++r) {
        const auto truth = batch.truth.row(r);
        std::size_t p_size = 0, inter = 0;
        for (std::size_t j = 0; j < L; ++j) {
            if (batch.scores(r, j) >= batch.threshold) {
                ++p_size;
                ++predicted[j];
                if (batch.truth.contains(r, static_cast<std::uint32_t>(j))) {
                    ++inter;
                    ++tp[j];
                }
            }
        }
        for (auto j : truth) ++actual[j];
        const std::size_t y_size = truth.size();
        const std::size_t uni = p_size + y_size - inter;
        f1_sum += (p_size + y_size == 0) ? 1.0 : 2.0 * static_cast<double>(inter) / static_cast<double>(p_size + y_size);
        jac_sum += uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni);
        m.over_coding += p_size - inter;
        m.under_coding += y_size - inter;
        total_tp += inter;
        total_pred += p_size;
        total_true += y_size;
    }
    if (n > 0) {
        m.sample_f1 = f1_sum / static_cast<double>(n);
        m.jaccard = jac_sum / static_cast<double>(n);
    }
    m.micro_f1 = total_pred + total_true == 0 ? 1.0
                                              : 2.0 * static_cast<double>(total_tp) /
                                                    static_cast<double>(total_pred + total_true);
    double macro = 0.0;
    std::size_t counted = 0;
    for (std::size_t j = 0; j < L; ++j) {
        if (predicted[j] + actual[j] == 0) continue;
        macro += 2.0 * static_cast<double>(tp[j]) / static_cast<double>(predicted[j] + actual[j]);
        ++counted;
    }
    m.macro_f1 = counted == 0 ? 1.0 : macro / static_cast<double>(counted);
    return m;
}

std::size_t top_label(const DenseMatrix& scores, std::size_t row) {
    std::size_t best = 0;
    for (std::size_t j = 1; j < scores.cols(); ++j)
        if (scores(row, j) > scores(row, best)) best = j;
    return best;
}

double primary_accuracy(const PredictionBatch& batch) {
    batch.validate();
    if (!batch.has_principal()) throw std::invalid_argument("primary accuracy needs principal labels");
    if (batch.size() == 0) throw std::domain_error("no evaluable samples");
    std::size_t correct = 0;
    for (std::size_t r = 0; r < batch.size(); ++r)
        if (static_cast<std::int64_t>(top_label(batch.scores, r)) == batch.principal[r]) ++correct;
    return static_cast<double>(correct) / static_cast<double>(batch.size());
}

MetricsReport full_report(const PredictionBatch& batch) {
    batch.validate();
    MetricsReport rep;
    rep.n_samples = batch.size();
    for (std::size_t r = 0; r < batch.size(); ++r) {
        if (is_degenerate(batch.truth.row(r).size(), batch.labels()))
            ++rep.n_degenerate;
        else
            ++rep.n_ranking_evaluable;
    }
    if (rep.n_ranking_evaluable > 0) {
        rep.lrap = lrap(batch);
        rep.coverage_error = coverage_error(batch);
        rep.ranking_loss = ranking_loss(batch);
    }
    const auto s = set_metrics(batch);
    rep.sample_f1 = s.sample_f1;
    rep.jaccard = s.jaccard;
    rep.micro_f1 = s.micro_f1;
    rep.macro_f1 = s.macro_f1;
    rep.over_coding = s.over_coding;
    rep.under_coding = s.under_coding;
    if (batch.has_principal() && batch.size() > 0) rep.primary_accuracy = primary_accuracy(batch);
    return rep;
}

MetricsReport grouped_report(const PredictionBatch& batch, const std::vector<std::string>& group_values) {
    if (group_values.size() != batch.size())
        throw std::invalid_argument("grouped_report: " + std::to_string(group_values.size()) + " group values for " +
                                    std::to_string(batch.size()) + " samples");
    auto rep = full_report(batch);
    std::map<std::string, std::vector<std::size_t>> members;
    for (std::size_t r = 0; r < group_values.size(); ++r) members[group_values[r]].push_back(r);
    for (const auto& [key, rows] : members) rep.groups.push_back({key, full_report(batch.select(rows))});
    std::stable_sort(rep.groups.begin(), rep.groups.end(), [](const GroupReport& a, const GroupReport& b) {
        const double pa = a.report.primary_accuracy.value_or(-1.0);
        const double pb = b.report.primary_accuracy.value_or(-1.0);
        return pa > pb;
    });
    return rep;
}

std::string format_metric(const std::optional<double>& v) { return v ? fmt_double(*v) : "NA"; }

void write_metrics_header(std::ostream& os) { os << kMetricsHeader << "\n"; }

void write_metrics_row(std::ostream& os, const std::string& model, const MetricsReport& r) {
    os << model << "\t" << format_metric(r.lrap) << "\t" << format_metric(r.ranking_loss) << "\t"
       << format_metric(r.coverage_error) << "\t" << fmt_double(r.jaccard) << "\t" << fmt_double(r.sample_f1) << "\t"
       << format_metric(r.primary_accuracy) << "\t" << r.n_samples << "\t" << r.n_ranking_evaluable << "\t"
       << r.over_coding << "\t" << r.under_coding << "\n";
}

void write_group_table(std::ostream& os, const MetricsReport& report, std::optional<std::size_t> top_k) {
    os << kGroupHeader << "\n";
    std::size_t rows = 0;
    for (const auto& g : report.groups) {
        if (top_k && rows >= *top_k) break;
        os << g.key << "\t" << format_metric(g.report.primary_accuracy) << "\t" << fmt_double(g.report.sample_f1)
           << "\t" << fmt_double(g.report.jaccard) << "\t" << format_metric(g.report.lrap) << "\t"
           << g.report.n_samples << "\n";
        ++rows;
    }
}

}  // namespace collabres::metrics
