#pragma once

// Multi-label evaluation measures.
//
// Rank convention shared by every ranking metric: within one sample,
//   rank(j) = |{k : score_k >= score_j}|
// so tied labels all take the worst rank among them. Samples whose true set
// is empty or contains every label are "degenerate": they are skipped by the
// ranking metrics and counted in the report, but still enter the set metrics.
//
// Per-sample terms are summed in sample order and divided once, so results
// are exactly reproducible.

#include <cstdint>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "collabres/tensor.hpp"

namespace collabres::metrics {

struct PredictionBatch {
    DenseMatrix scores;
    SparseBinaryMatrix truth;
    /// One label index per sample, or empty when principal labels are unknown.
    std::vector<std::int64_t> principal;
    double threshold = 0.5;

    std::size_t size() const noexcept { return scores.rows(); }
    std::size_t labels() const noexcept { return scores.cols(); }
    bool has_principal() const noexcept { return !principal.empty(); }

    /// Throws std::invalid_argument on shape mismatch, non-finite scores,
    /// threshold outside (0,1), or a principal label missing from its true set.
    void validate() const;
    PredictionBatch select(std::span<const std::size_t> rows) const;
};

bool is_degenerate(std::size_t true_count, std::size_t label_count) noexcept;

/// Label-ranking average precision. Throws std::domain_error("no evaluable
/// samples") when every sample is degenerate.
double lrap(const PredictionBatch& batch);
double coverage_error(const PredictionBatch& batch);
/// Fraction of (true, false) pairs with score_false >= score_true.
double ranking_loss(const PredictionBatch& batch);

struct SetMetrics {
    double sample_f1 = 0.0;
    double jaccard = 0.0;
    double micro_f1 = 0.0;
    double macro_f1 = 0.0;
    std::size_t over_coding = 0;   // sum of |P \ Y|
    std::size_t under_coding = 0;  // sum of |Y \ P|
};

/// Thresholded set measures with P = {j : score_j >= threshold}.
SetMetrics set_metrics(const PredictionBatch& batch);

/// Lowest index among the maximal scores of sample `row`.
std::size_t top_label(const DenseMatrix& scores, std::size_t row);

/// Fraction of samples whose top label equals the principal label.
/// Throws std::invalid_argument when principal labels are absent.
double primary_accuracy(const PredictionBatch& batch);

struct GroupReport;

struct MetricsReport {
    std::optional<double> lrap;
    std::optional<double> coverage_error;
    std::optional<double> ranking_loss;
    double sample_f1 = 0.0;
    double jaccard = 0.0;
    double micro_f1 = 0.0;
    double macro_f1 = 0.0;
    std::optional<double> primary_accuracy;
    std::size_t n_samples = 0;
    std::size_t n_ranking_evaluable = 0;
    std::size_t n_degenerate = 0;
    std::size_t over_coding = 0;
    std::size_t under_coding = 0;
    std::vector<GroupReport> groups;
};

struct GroupReport {
    std::string key;
    MetricsReport report;
};

/// Every measure over the whole batch. Ranking metrics are left empty when
/// no sample is evaluable; primary accuracy when principal labels are absent.
MetricsReport full_report(const PredictionBatch& batch);

/// Full report plus one sub-report per distinct group value, ordered by
/// descending primary accuracy (then key). Without principal labels the
/// groups are ordered by key.
MetricsReport grouped_report(const PredictionBatch& batch, const std::vector<std::string>& group_values);

// Report emission. Column names are part of the file format.

/// Header of the per-model metric table.
inline constexpr const char* kMetricsHeader =
    "model\taverage_precision\tranking_loss\tcoverage_error\tjaccard\tf1\taccuracy_primary\tn_samples\t"
    "n_ranking_evaluable\tover_coding\tunder_coding";
inline constexpr const char* kGroupHeader =
    "group\taccuracy_primary\tf1\tjaccard\taverage_precision\tn_samples";

void write_metrics_header(std::ostream& os);
void write_metrics_row(std::ostream& os, const std::string& model, const MetricsReport& report);
/// One row per group of `report.groups`, at most `top_k` rows when given.
void write_group_table(std::ostream& os, const MetricsReport& report, std::optional<std::size_t> top_k = {});
std::string format_metric(const std::optional<double>& v);

}  // namespace collabres::metrics
