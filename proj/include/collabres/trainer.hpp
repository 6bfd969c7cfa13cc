#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include "collabres/data.hpp"
#include "collabres/metrics.hpp"
#include "collabres/nn.hpp"
#include "collabres/optim.hpp"

namespace collabres::train {

enum class EarlyStopMetric { PrimaryAccuracy, SampleF1, SubsetAccuracy };

std::string_view to_string(EarlyStopMetric m);
/// "primary_accuracy", "sample_f1" or "subset_accuracy".
EarlyStopMetric parse_early_stop_metric(std::string_view name);

struct TrainConfig {
    std::size_t batch_size = 2048;
    std::size_t max_epochs = 100;
    std::size_t early_stop_patience = 10;
    EarlyStopMetric early_stop_metric = EarlyStopMetric::PrimaryAccuracy;
    std::uint64_t seed = 0;
    bool shuffle = true;
    optim::AdamConfig adam;

    void validate() const;
    friend bool operator==(const TrainConfig&, const TrainConfig&) = default;
};

enum class StopReason { EarlyStopped, MaxEpochs };
std::string_view to_string(StopReason r);

/// Patience bookkeeping, independent of any model. Epochs are numbered from 1.
class EarlyStopper {
public:
    EarlyStopper(std::size_t patience, std::size_t max_epochs);

    /// Records the next epoch's metric; returns true when training must stop.
    bool update(double metric);

    std::size_t epochs() const noexcept { return epochs_; }
    std::size_t best_epoch() const noexcept { return best_epoch_; }
    double best_value() const noexcept { return best_; }
    std::optional<StopReason> stop_reason() const noexcept { return reason_; }

private:
    std::size_t patience_;
    std::size_t max_epochs_;
    std::size_t epochs_ = 0;
    std::size_t best_epoch_ = 0;
    std::size_t since_best_ = 0;
    double best_ = 0.0;
    std::optional<StopReason> reason_;
};

struct EpochRecord {
    std::size_t epoch = 0;
    double train_loss = 0.0;
    double dev_metric = 0.0;
    std::size_t n_batches = 0;
    std::size_t max_batch_rows = 0;
    /// Seconds since the Unix epoch; only filled when requested, so that
    /// histories stay reproducible by default.
    std::optional<std::int64_t> timestamp;
};

struct TrainHistory {
    std::vector<EpochRecord> epochs;
    std::size_t best_epoch = 0;
    StopReason stop_reason = StopReason::MaxEpochs;
    EarlyStopMetric metric = EarlyStopMetric::PrimaryAccuracy;
};

void write_history(std::ostream& os, const TrainHistory& history);

struct Checkpoint {
    nn::ModelSpec spec;
    nn::Parameters params;
    data::Vocabulary features;
    data::Vocabulary labels;
    TrainConfig config;
    double threshold = 0.5;
};

struct TrainOptions {
    /// Replaces the computed dev metric of an epoch (1-based); used to drive
    /// the stopping rule with prescribed sequences.
    std::function<double(std::size_t epoch, double computed)> metric_hook;
    /// Starting point instead of a fresh He initialization.
    std::optional<nn::Parameters> initial_params;
    /// Parameter names excluded from updates.
    std::set<std::string> frozen;
    bool record_timestamps = false;
    /// Called after each epoch, e.g. for progress output.
    std::function<void(const EpochRecord&)> on_epoch;
};

struct TrainResult {
    Checkpoint checkpoint;
    TrainHistory history;
};

/// Mini-batch Adam on the train split with per-epoch evaluation on dev.
/// Returns the parameters of the best dev epoch (first one on ties).
TrainResult train(const nn::ModelSpec& spec, const data::Dataset& train_split, const data::Dataset& dev_split,
                  const TrainConfig& config, const TrainOptions& options = {});

/// Infer-mode sigmoid scores, in batches of `batch_rows`.
DenseMatrix predict_scores(const nn::ModelSpec& spec, const nn::Parameters& params, const SparseBinaryMatrix& x,
                           std::size_t batch_rows = 2048);

struct Prediction {
    DenseMatrix scores;
    std::vector<std::vector<std::uint32_t>> label_sets;
    std::vector<std::size_t> top1;
};

/// Scores plus thresholded sets (score >= threshold) and the top-1 label.
/// `threshold` overrides the checkpoint's and must lie in (0,1).
Prediction predict(const Checkpoint& ckpt, const SparseBinaryMatrix& x, std::optional<double> threshold = {});

/// Fraction of samples whose predicted set equals the true set exactly.
double subset_accuracy(const metrics::PredictionBatch& batch);

double early_stop_value(EarlyStopMetric metric, const metrics::PredictionBatch& batch);

enum class GroupColumn { Chapter, Gender, Age };
GroupColumn parse_group_column(std::string_view name);
std::string_view to_string(GroupColumn c);

struct Evaluation {
    metrics::MetricsReport overall;
    /// Grouped by the ICD-10 chapter of the principal diagnosis.
    metrics::MetricsReport chapters;
    std::vector<std::pair<GroupColumn, metrics::MetricsReport>> groups;
    std::vector<std::string> warnings;
};

/// Age decade label used for grouping, e.g. 47 -> "40-49".
std::string age_band(int age_years);

/// Runs the model over `split` and computes every metric. Group columns that
/// cannot be computed (no demographics) throw data::DataError.
Evaluation evaluate(const Checkpoint& ckpt, const data::Dataset& split, const std::vector<GroupColumn>& group_by = {},
                    std::optional<double> threshold = {});

}  // namespace collabres::train
