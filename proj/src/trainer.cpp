#include "collabres/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <limits>
#include <numeric>
#include <stdexcept>

namespace collabres::train {

std::string_view to_string(EarlyStopMetric m) {
    switch (m) {
        case EarlyStopMetric::PrimaryAccuracy: return "primary_accuracy";
        case EarlyStopMetric::SampleF1: return "sample_f1";
        case EarlyStopMetric::SubsetAccuracy: return "subset_accuracy";
    }
    return "?";
}

EarlyStopMetric parse_early_stop_metric(std::string_view name) {
    for (auto m : {EarlyStopMetric::PrimaryAccuracy, EarlyStopMetric::SampleF1, EarlyStopMetric::SubsetAccuracy})
        if (name == to_string(m)) return m;
    throw std::invalid_argument("unknown early-stop metric '" + std::string(name) +
                                "' (valid: primary_accuracy, sample_f1, subset_accuracy)");
}

std::string_view to_string(StopReason r) { return r == StopReason::EarlyStopped ? "EarlyStopped" : "MaxEpochs"; }

void TrainConfig::validate() const {
    if (batch_size < 1) throw std::invalid_argument("batch_size must be >= 1");
    if (max_epochs < 1) throw std::invalid_argument("max_epochs must be >= 1");
    if (early_stop_patience < 1) throw std::invalid_argument("early_stop_patience must be >= 1");
    adam.validate();
}

EarlyStopper::EarlyStopper(std::size_t patience, std::size_t max_epochs) : patience_(patience), max_epochs_(max_epochs) {
    if (patience < 1) throw std::invalid_argument("patience must be >= 1");
    if (max_epochs < 1) throw std::invalid_argument("max_epochs must be >= 1");
}

bool EarlyStopper::update(double metric) {
    if (reason_) throw std::logic_error("EarlyStopper::update after stop");
    ++epochs_;
    if (epochs_ == 1 || metric > best_) {
        best_ = metric;
        best_epoch_ = epochs_;
        since_best_ = 0;
    } else {
        ++since_best_;
    }
    if (since_best_ >= patience_)
        reason_ = StopReason::EarlyStopped;
    else if (epochs_ >= max_epochs_)
        reason_ = StopReason::MaxEpochs;
    return reason_.has_value();
}

void write_history(std::ostream& os, const TrainHistory& h) {
    os << "# metric " << to_string(h.metric) << "\n";
    os << "# best_epoch " << h.best_epoch << "\n";
    os << "# stop_reason " << to_string(h.stop_reason) << "\n";
    os << "epoch\ttrain_loss\tdev_metric\tn_batches\tmax_batch_rows\ttimestamp\n";
    for (const auto& e : h.epochs) {
        char buf[64];
        std::snprintf(buf, sizeof buf, "%.6f\t%.6f", e.train_loss, e.dev_metric);
        os << e.epoch << "\t" << buf << "\t" << e.n_batches << "\t" << e.max_batch_rows << "\t"
           << (e.timestamp ? std::to_string(*e.timestamp) : "NA") << "\n";
    }
}

namespace {

metrics::PredictionBatch make_batch(DenseMatrix scores, const data::Dataset& d, double threshold) {
    metrics::PredictionBatch b;
    b.scores = std::move(scores);
    b.truth = d.y;
    b.threshold = threshold;
    const bool have_principal =
        d.principal.size() == d.size() && std::all_of(d.principal.begin(), d.principal.end(), [](auto p) { return p >= 0; });
    if (have_principal) b.principal = d.principal;
    return b;
}

DenseMatrix targets_for(const SparseBinaryMatrix& y) { return y.densify<float>(); }

void check_split(const nn::ModelSpec& spec, const data::Dataset& d, const char* name) {
    if (d.size() == 0) throw std::invalid_argument(std::string(name) + " split is empty");
    if (d.x.cols() != spec.input_dim)
        throw ShapeError(std::string(name) + " split has " + std::to_string(d.x.cols()) + " features but model input_dim is " +
                         std::to_string(spec.input_dim));
    if (d.y.cols() != spec.output_dim)
        throw ShapeError(std::string(name) + " split has " + std::to_string(d.y.cols()) +
                         " labels but model output_dim is " + std::to_string(spec.output_dim));
}

}  // namespace

double subset_accuracy(const metrics::PredictionBatch& batch) {
    batch.validate();
    if (batch.size() == 0) throw std::domain_error("no evaluable samples");
    std::size_t exact = 0;
    for (std::size_t r = 0; r < batch.size(); ++r) {
        bool same = true;
        for (std::size_t j = 0; j < batch.labels() && same; ++j)
            same = (batch.scores(r, j) >= batch.threshold) == batch.truth.contains(r, static_cast<std::uint32_t>(j));
        if (same) ++exact;
    }
    return static_cast<double>(exact) / static_cast<double>(batch.size());
}

double early_stop_value(EarlyStopMetric metric, const metrics::PredictionBatch& batch) {
    switch (metric) {
        case EarlyStopMetric::PrimaryAccuracy: return metrics::primary_accuracy(batch);
        case EarlyStopMetric::SampleF1: return metrics::set_metrics(batch).sample_f1;
        case EarlyStopMetric::SubsetAccuracy: return subset_accuracy(batch);
    }
    throw std::logic_error("unhandled early-stop metric");
}

DenseMatrix predict_scores(const nn::ModelSpec& spec, const nn::Parameters& params, const SparseBinaryMatrix& x,
                           std::size_t batch_rows) {
    if (x.cols() != spec.input_dim)
        throw ShapeError("predict: input has " + std::to_string(x.cols()) + " columns but model input_dim is " +
                         std::to_string(spec.input_dim));
    if (batch_rows == 0) throw std::invalid_argument("predict: batch_rows must be >= 1");
    DenseMatrix out(x.rows(), spec.output_dim);
    SeededRng unused(0);  // Infer mode draws nothing
    std::vector<std::size_t> rows;
    for (std::size_t start = 0; start < x.rows(); start += batch_rows) {
        const std::size_t stop = std::min(x.rows(), start + batch_rows);
        rows.resize(stop - start);
        std::iota(rows.begin(), rows.end(), start);
        auto res = nn::model_forward(spec, params, x.select_rows(rows), nn::Mode::Infer, unused);
        for (std::size_t i = 0; i < rows.size(); ++i)
            std::copy_n(res.scores.row(i).begin(), spec.output_dim, out.row(start + i).begin());
    }
    return out;
}

TrainResult train(const nn::ModelSpec& spec, const data::Dataset& train_split, const data::Dataset& dev_split,
                  const TrainConfig& config, const TrainOptions& options) {
    config.validate();
    spec.validate();
    check_split(spec, train_split, "train");
    check_split(spec, dev_split, "dev");
    if (config.early_stop_metric == EarlyStopMetric::PrimaryAccuracy &&
        make_batch(DenseMatrix(0, 0), dev_split, 0.5).principal.empty())
        throw std::invalid_argument("early stopping on primary accuracy needs principal labels in the dev split");

    SeededRng master(config.seed);
    SeededRng init_rng = master.fork(1);
    SeededRng shuffle_rng = master.fork(2);
    SeededRng dropout_rng = master.fork(3);

    auto params = nn::init_params(spec, init_rng);
    if (options.initial_params) {
        options.initial_params->check_against(spec);
        params = *options.initial_params;
    }
    auto state = optim::AdamState::for_params(params, config.adam);
    for (const auto& name : options.frozen) {
        if (!params.contains(name)) throw std::invalid_argument("cannot freeze unknown parameter " + name);
        state.frozen.insert(name);
    }

    TrainResult result;
    auto& history = result.history;
    history.metric = config.early_stop_metric;
    nn::Parameters best = params;
    EarlyStopper stopper(config.early_stop_patience, config.max_epochs);

    std::vector<std::size_t> order(train_split.size());
    std::iota(order.begin(), order.end(), 0);
    for (;;) {
        if (config.shuffle) shuffle_rng.shuffle(order.begin(), order.end());
        EpochRecord rec;
        rec.epoch = stopper.epochs() + 1;
        double loss_sum = 0.0;
        for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
            const std::size_t stop = std::min(order.size(), start + config.batch_size);
            std::span<const std::size_t> rows(order.data() + start, stop - start);
            const auto xb = train_split.x.select_rows(rows);
            const auto yb = targets_for(train_split.y.select_rows(rows));
            auto fwd = nn::model_forward(spec, params, xb, nn::Mode::Train, dropout_rng);
            auto bce = nn::sigmoid_bce(fwd.trace.logits, yb);
            auto grads = nn::model_backward(spec, params, fwd.trace, bce.dlogits);
            optim::adam_step(params, grads, state);
            loss_sum += bce.loss * static_cast<double>(rows.size());
            ++rec.n_batches;
            rec.max_batch_rows = std::max(rec.max_batch_rows, rows.size());
        }
        rec.train_loss = loss_sum / static_cast<double>(order.size());
        const auto dev_batch = make_batch(predict_scores(spec, params, dev_split.x), dev_split, 0.5);
        rec.dev_metric = early_stop_value(config.early_stop_metric, dev_batch);
        if (options.metric_hook) rec.dev_metric = options.metric_hook(rec.epoch, rec.dev_metric);
        if (options.record_timestamps)
            rec.timestamp = std::chrono::duration_cast<std::chrono::seconds>(
                                std::chrono::system_clock::now().time_since_epoch())
                                .count();
        const bool done = stopper.update(rec.dev_metric);
        if (stopper.best_epoch() == rec.epoch) best = params;
        history.epochs.push_back(rec);
        if (options.on_epoch) options.on_epoch(rec);
        if (done) break;
    }
    history.best_epoch = stopper.best_epoch();
    history.stop_reason = *stopper.stop_reason();

    auto& ckpt = result.checkpoint;
    ckpt.spec = spec;
    ckpt.params = std::move(best);
    ckpt.features = train_split.features;
    ckpt.labels = train_split.labels;
    ckpt.config = config;
    return result;
}

Prediction predict(const Checkpoint& ckpt, const SparseBinaryMatrix& x, std::optional<double> threshold) {
    const double t = threshold.value_or(ckpt.threshold);
    if (!(t > 0.0 && t < 1.0)) throw std::invalid_argument("threshold must lie in (0,1)");
    Prediction p;
    p.scores = predict_scores(ckpt.spec, ckpt.params, x);
    for (std::size_t r = 0; r < x.rows(); ++r) {
        std::vector<std::uint32_t> set;
        for (std::size_t j = 0; j < p.scores.cols(); ++j)
            if (p.scores(r, j) >= t) set.push_back(static_cast<std::uint32_t>(j));
        p.label_sets.push_back(std::move(set));
        p.top1.push_back(metrics::top_label(p.scores, r));
    }
    return p;
}

GroupColumn parse_group_column(std::string_view name) {
    for (auto c : {GroupColumn::Chapter, GroupColumn::Gender, GroupColumn::Age})
        if (name == to_string(c)) return c;
    throw std::invalid_argument("unknown group column '" + std::string(name) + "' (valid: chapter, gender, age)");
}

std::string_view to_string(GroupColumn c) {
    switch (c) {
        case GroupColumn::Chapter: return "chapter";
        case GroupColumn::Gender: return "gender";
        case GroupColumn::Age: return "age";
    }
    return "?";
}

std::string age_band(int age) {
    if (age < 0) return "NA";
    const int lo = age / 10 * 10;
    return std::to_string(lo) + "-" + std::to_string(lo + 9);
}

Evaluation evaluate(const Checkpoint& ckpt, const data::Dataset& split, const std::vector<GroupColumn>& group_by,
                    std::optional<double> threshold) {
    const double t = threshold.value_or(ckpt.threshold);
    if (split.y.cols() != ckpt.spec.output_dim)
        throw ShapeError("evaluate: split has " + std::to_string(split.y.cols()) + " labels but model outputs " +
                         std::to_string(ckpt.spec.output_dim));
    Evaluation ev;
    for (auto c : group_by)
        if (c != GroupColumn::Chapter && !split.has_demographics())
            throw data::DataError("cannot group by " + std::string(to_string(c)) + ": split has no demographic rows");

    auto batch = make_batch(predict_scores(ckpt.spec, ckpt.params, split.x), split, t);
    if (!batch.has_principal()) ev.warnings.push_back("principal labels missing: primary accuracy omitted");
    ev.overall = metrics::full_report(batch);

    if (batch.has_principal()) {
        std::vector<std::string> chapter_of;
        for (auto p : batch.principal) {
            const auto ch = data::icd10_chapter(ckpt.labels.size() > static_cast<std::size_t>(p)
                                                    ? ckpt.labels.token(static_cast<std::size_t>(p))
                                                    : std::string());
            chapter_of.push_back(ch.id);
        }
        ev.chapters = metrics::grouped_report(batch, chapter_of);
    }
    for (auto c : group_by) {
        if (c == GroupColumn::Chapter) continue;
        std::vector<std::string> keys;
        for (const auto& d : split.demographics) {
            if (!d)
                keys.push_back("NA");
            else
                keys.push_back(c == GroupColumn::Gender ? d->gender : age_band(d->age_years));
        }
        ev.groups.emplace_back(c, metrics::grouped_report(batch, keys));
    }
    return ev;
}

}  // namespace collabres::train
