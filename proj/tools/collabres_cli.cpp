// collabres: prepare, train, evaluate, predict, synth, report.
//
// Exit codes: 0 ok, 2 usage or validation error, 3 data error, 4 internal error.

#include <algorithm>
#include <cctype>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "collabres/checkpoint.hpp"
#include "collabres/data.hpp"
#include "collabres/kernels.hpp"
#include "collabres/metrics.hpp"
#include "collabres/nn.hpp"
#include "collabres/trainer.hpp"

namespace fs = std::filesystem;
using namespace collabres;

namespace {

constexpr int kOk = 0;
constexpr int kUsage = 2;
constexpr int kData = 3;
constexpr int kInternal = 4;

struct UsageError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

void require_file(const fs::path& p, const char* what) {
    if (!fs::exists(p)) throw UsageError(std::string(what) + " not found: " + p.string());
}

void ensure_dir(const fs::path& p) {
    std::error_code ec;
    fs::create_directories(p, ec);
    if (ec) throw data::DataError("cannot create directory " + p.string() + ": " + ec.message());
}

std::ofstream open_out(const fs::path& p) {
    std::ofstream os(p, std::ios::binary);
    if (!os) throw data::DataError("cannot write " + p.string());
    return os;
}

void write_resolved(const CLI::App& sub, const fs::path& dir) {
    auto os = open_out(dir / "resolved_config.ini");
    // Only the running subcommand's section; unset optionals are left out so
    // the file replays cleanly through --config.
    std::istringstream all(sub.get_parent()->config_to_str(true, false));
    const std::string prefix = sub.get_name() + ".";
    for (std::string line; std::getline(all, line);)
        if (line.rfind(prefix, 0) == 0 && line.find("=\"\"") == std::string::npos) os << line << "\n";
}

std::vector<std::string> split_commas(const std::string& s) {
    std::vector<std::string> out;
    std::stringstream ss(s);
    for (std::string item; std::getline(ss, item, ',');)
        if (!item.empty()) out.push_back(item);
    return out;
}

std::string lower(std::string s) {
    for (auto& c : s) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    return s;
}

// ---- options ---------------------------------------------------------------

struct Common {
    std::uint64_t seed = 0;
    int threads = 1;
    std::string out;
};

void add_common(CLI::App* sub, Common& c, bool out_required) {
    sub->add_option("--seed", c.seed, "Random seed")->capture_default_str();
    sub->add_option("--threads", c.threads, "Worker threads for the compute kernels")
        ->check(CLI::PositiveNumber)
        ->capture_default_str();
    // Not read from config files, so a resolved-config echo can be replayed
    // into a fresh directory.
    auto* o = sub->add_option("--out", c.out, "Output directory")->configurable(false);
    if (out_required) o->required();
}

struct PrepareArgs {
    Common common;
    std::string input;
    std::size_t min_instances = 3;
    std::size_t min_token_count = 1;
    std::vector<double> ratios{0.7, 0.1, 0.2};
};

struct SynthArgs {
    Common common;
    data::SyntheticSpec spec;
    std::vector<double> ratios{0.7, 0.1, 0.2};
    bool no_demographics = false;
};

struct TrainArgs {
    Common common;
    std::string data_dir;
    std::string model = "collabres";
    train::TrainConfig cfg;
    std::string metric = "primary_accuracy";
    nn::CollabResConfig collab;
    std::size_t width_divisor = 1;
    bool timestamps = false;
    bool quiet = false;
};

struct EvaluateArgs {
    Common common;
    std::string checkpoint;
    std::string data_dir;
    std::string split = "test";
    std::string group_by;
    std::optional<double> threshold;
    std::size_t top_k = 10;
    bool keep_going = false;
};

struct PredictArgs {
    Common common;
    std::string checkpoint;
    std::string input;
    std::optional<double> threshold;
    std::size_t top_k = 5;
};

struct ReportArgs {
    Common common;
    std::string data_dir;
    std::string split = "all";
    std::size_t top_k = 30;
    std::size_t min_instances = 3;
};

std::array<double, 3> to_ratios(const std::vector<double>& v) {
    if (v.size() != 3) throw UsageError("--split-ratios needs three values");
    return {v[0], v[1], v[2]};
}

// ---- commands --------------------------------------------------------------

void write_split_summary(std::ostream& os, const data::SplitResult& s) {
    os << "train\t" << s.train.size() << "\ndev\t" << s.dev.size() << "\ntest\t" << s.test.size() << "\n";
}

int cmd_prepare(const PrepareArgs& a, const CLI::App& sub) {
    require_file(a.input, "input file");
    const auto ratios = to_ratios(a.ratios);
    data::CleaningOptions opt;
    opt.min_instances = a.min_instances;
    opt.min_token_count = a.min_token_count;
    auto cleaned = data::clean(data::ingest(a.input), opt);
    if (cleaned.records.empty()) throw data::DataError("no episodes survive cleaning");
    auto split = data::stratified_split(data::build_vocab_and_binarize(cleaned.records), ratios, a.common.seed);

    const fs::path out(a.common.out);
    ensure_dir(out);
    data::save_prepared(out, split);
    {
        auto os = open_out(out / "cleaning_report.tsv");
        data::write_cleaning_report(os, cleaned.report);
    }
    write_resolved(sub, out);
    data::write_cleaning_report(std::cout, cleaned.report);
    write_split_summary(std::cout, split);
    return kOk;
}

int cmd_synth(SynthArgs a, const CLI::App& sub) {
    a.spec.seed = a.common.seed;
    const auto ratios = to_ratios(a.ratios);
    auto syn = data::generate_synthetic(a.spec);
    if (a.no_demographics) syn.dataset.demographics.assign(syn.dataset.size(), std::nullopt);
    auto split = data::stratified_split(syn.dataset, ratios, a.common.seed);

    const fs::path out(a.common.out);
    ensure_dir(out);
    data::save_prepared(out, split);
    {
        auto os = open_out(out / "oracle.txt");
        data::write_oracle(os, syn.oracle, syn.dataset);
    }
    write_resolved(sub, out);
    write_split_summary(std::cout, split);
    return kOk;
}

nn::ModelSpec build_model(const TrainArgs& a, std::size_t in, std::size_t out, std::vector<std::string>& warnings) {
    if (lower(a.model) == "collabres") return nn::build_collabres(in, out, a.collab, &warnings);
    try {
        return nn::build_baseline(nn::parse_baseline(a.model), in, out, a.width_divisor);
    } catch (const std::invalid_argument&) {
        throw UsageError("unknown model id '" + a.model + "' (valid: M1, M2, M3, M4, M5, M6, M7, M8, collabres)");
    }
}

int cmd_train(TrainArgs a, const CLI::App& sub) {
    a.cfg.seed = a.common.seed;
    a.cfg.early_stop_metric = train::parse_early_stop_metric(a.metric);
    a.cfg.validate();
    require_file(fs::path(a.data_dir) / "dataset.txt", "prepared dataset");
    const auto prepared = data::load_prepared(a.data_dir);
    std::vector<std::string> warnings;
    const auto spec = build_model(a, prepared.train.x.cols(), prepared.train.y.cols(), warnings);
    for (const auto& w : warnings) std::cerr << "warning: " << w << "\n";

    const fs::path out(a.common.out);
    ensure_dir(out);
    {
        auto os = open_out(out / "spec.json");
        os << ckpt::spec_to_json(spec) << "\n";
    }
    write_resolved(sub, out);
    std::cout << spec.describe() << "\n";

    train::TrainOptions opt;
    opt.record_timestamps = a.timestamps;
    if (!a.quiet)
        opt.on_epoch = [](const train::EpochRecord& e) {
            std::fprintf(stderr, "epoch %zu loss %.6f dev %.4f\n", e.epoch, e.train_loss, e.dev_metric);
        };
    auto result = train::train(spec, prepared.train, prepared.dev, a.cfg, opt);
    ckpt::save_checkpoint(result.checkpoint, out / "model.ckpt");
    {
        auto os = open_out(out / "history.tsv");
        train::write_history(os, result.history);
    }
    std::cout << "epochs\t" << result.history.epochs.size() << "\nbest_epoch\t" << result.history.best_epoch
              << "\nstop_reason\t" << train::to_string(result.history.stop_reason) << "\n";
    return kOk;
}

void write_report_txt(std::ostream& os, const std::string& model, const std::string& split,
                      const train::Evaluation& ev) {
    const auto& r = ev.overall;
    os << "model: " << model << "\nsplit: " << split << "\nsamples: " << r.n_samples
       << " (ranking-evaluable " << r.n_ranking_evaluable << ")\n"
       << "average_precision: " << metrics::format_metric(r.lrap) << "\n"
       << "ranking_loss: " << metrics::format_metric(r.ranking_loss) << "\n"
       << "coverage_error: " << metrics::format_metric(r.coverage_error) << "\n"
       << "jaccard: " << metrics::format_metric(r.jaccard) << "\n"
       << "f1: " << metrics::format_metric(r.sample_f1) << "\n"
       << "micro_f1: " << metrics::format_metric(r.micro_f1) << "\n"
       << "macro_f1: " << metrics::format_metric(r.macro_f1) << "\n"
       << "accuracy_primary: " << metrics::format_metric(r.primary_accuracy) << "\n"
       << "over_coding: " << r.over_coding << "\nunder_coding: " << r.under_coding << "\n";
    for (const auto& w : ev.warnings) os << "warning: " << w << "\n";
}

int cmd_evaluate(const EvaluateArgs& a, const CLI::App& sub) {
    std::vector<train::GroupColumn> demo;
    for (const auto& name : split_commas(a.group_by)) {
        const auto c = train::parse_group_column(name);
        if (c != train::GroupColumn::Chapter && std::find(demo.begin(), demo.end(), c) == demo.end()) demo.push_back(c);
    }
    if (a.split != "train" && a.split != "dev" && a.split != "test")
        throw UsageError("--split must be train, dev or test");
    if (a.threshold && !(*a.threshold > 0.0 && *a.threshold < 1.0)) throw UsageError("--threshold must lie in (0,1)");
    require_file(a.checkpoint, "checkpoint");
    require_file(fs::path(a.data_dir) / "dataset.txt", "prepared dataset");
    const auto c = ckpt::load_checkpoint(a.checkpoint);
    const auto prepared = data::load_prepared(a.data_dir);
    const auto& split = prepared.split(a.split);
    if (split.labels != c.labels || split.features != c.features)
        throw data::DataError("dataset vocabularies do not match the checkpoint");

    auto ev = train::evaluate(c, split, {}, a.threshold);
    std::vector<std::string> failures;
    for (auto col : demo) {
        try {
            ev.groups.push_back(train::evaluate(c, split, {col}, a.threshold).groups.at(0));
        } catch (const data::DataError& e) {
            if (!a.keep_going) throw;
            failures.push_back(e.what());
        }
    }

    const fs::path out(a.common.out);
    ensure_dir(out);
    {
        auto os = open_out(out / "metrics.tsv");
        metrics::write_metrics_header(os);
        metrics::write_metrics_row(os, c.spec.name, ev.overall);
    }
    {
        auto os = open_out(out / "chapters.tsv");
        metrics::write_group_table(os, ev.chapters, a.top_k);
    }
    for (const auto& [col, rep] : ev.groups) {
        auto os = open_out(out / ("groups_" + std::string(train::to_string(col)) + ".tsv"));
        metrics::write_group_table(os, rep);
    }
    {
        auto os = open_out(out / "report.txt");
        write_report_txt(os, c.spec.name, a.split, ev);
        write_report_txt(std::cout, c.spec.name, a.split, ev);
    }
    write_resolved(sub, out);
    for (const auto& f : failures) std::cerr << "error: " << f << "\n";
    return failures.empty() ? kOk : kData;
}

int cmd_predict(const PredictArgs& a) {
    if (a.threshold && !(*a.threshold > 0.0 && *a.threshold < 1.0)) throw UsageError("--threshold must lie in (0,1)");
    require_file(a.checkpoint, "checkpoint");
    require_file(a.input, "input file");
    const auto c = ckpt::load_checkpoint(a.checkpoint);
    const auto records = data::ingest(a.input);
    data::CleaningOptions opt;
    SparseBinaryMatrix x(c.features.size());
    std::size_t unknown = 0;
    for (const auto& r : records) {
        std::vector<std::uint32_t> row;
        for (const auto& m : r.medications) {
            if (std::any_of(opt.cancelled_statuses.begin(), opt.cancelled_statuses.end(),
                            [&](const std::string& s) { return lower(m.status) == s; }))
                continue;
            if (auto idx = c.features.find(data::medication_token(m.code, m.dose)))
                row.push_back(static_cast<std::uint32_t>(*idx));
            else
                ++unknown;
        }
        std::sort(row.begin(), row.end());
        row.erase(std::unique(row.begin(), row.end()), row.end());
        x.push_row(std::move(row));
    }
    if (unknown > 0) std::cerr << "warning: " << unknown << " medication rows not in the checkpoint vocabulary\n";
    const auto p = train::predict(c, x, a.threshold);

    std::ostringstream os;
    os << "episode_id\tprincipal\tpredicted\tranked\n";
    for (std::size_t r = 0; r < records.size(); ++r) {
        std::vector<std::size_t> order(p.scores.cols());
        std::iota(order.begin(), order.end(), 0);
        std::stable_sort(order.begin(), order.end(),
                         [&](std::size_t i, std::size_t j) { return p.scores(r, i) > p.scores(r, j); });
        // The principal prediction leads both lists.
        std::vector<std::size_t> set(p.label_sets[r].begin(), p.label_sets[r].end());
        std::stable_partition(set.begin(), set.end(), [&](std::size_t j) { return j == p.top1[r]; });
        os << records[r].episode_id << "\t" << c.labels.token(p.top1[r]) << "\t";
        for (std::size_t k = 0; k < set.size(); ++k) os << (k ? "," : "") << c.labels.token(set[k]);
        os << "\t";
        for (std::size_t k = 0; k < std::min(a.top_k, order.size()); ++k) {
            char buf[32];
            std::snprintf(buf, sizeof buf, "%.4f", p.scores(r, order[k]));
            os << (k ? "," : "") << c.labels.token(order[k]) << ":" << buf;
        }
        os << "\n";
    }
    if (a.common.out.empty()) {
        std::cout << os.str();
    } else {
        ensure_dir(a.common.out);
        auto f = open_out(fs::path(a.common.out) / "predictions.tsv");
        f << os.str();
    }
    return kOk;
}

int cmd_report(const ReportArgs& a) {
    require_file(fs::path(a.data_dir) / "dataset.txt", "prepared dataset");
    const auto prepared = data::load_prepared(a.data_dir);
    const auto d = a.split == "all" ? prepared.combined() : prepared.split(a.split);
    const auto rep = data::label_frequency_report(d, a.top_k, a.min_instances);
    std::ostringstream os;
    data::write_label_frequency(os, rep);
    if (a.common.out.empty()) {
        std::cout << os.str();
    } else {
        ensure_dir(a.common.out);
        auto f = open_out(fs::path(a.common.out) / "label_frequency.tsv");
        f << os.str();
    }
    return kOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"CollabRes multi-label diagnosis prediction from medication sets"};
    app.require_subcommand(1);
    app.set_help_all_flag("--help-all");
    app.fallthrough();
    app.set_config("--config", "", "key=value file (sections per subcommand, e.g. [train]); flags win");

    PrepareArgs prep;
    auto* s_prep = app.add_subcommand("prepare", "Ingest, clean, binarize and split a raw episode CSV");
    add_common(s_prep, prep.common, true);
    s_prep->add_option("--input", prep.input, "Raw CSV")->required();
    s_prep->add_option("--min-instances", prep.min_instances, "Drop ICD-10 categories with fewer episodes")
        ->check(CLI::PositiveNumber)
        ->capture_default_str();
    s_prep->add_option("--min-token-count", prep.min_token_count, "Drop medication tokens seen in fewer episodes")
        ->check(CLI::PositiveNumber)
        ->capture_default_str();
    s_prep->add_option("--split-ratios", prep.ratios, "train,dev,test fractions")->delimiter(',')->capture_default_str();

    SynthArgs syn;
    auto* s_syn = app.add_subcommand("synth", "Generate a synthetic prepared dataset with its oracle");
    add_common(s_syn, syn.common, true);
    syn.common.seed = syn.spec.seed;
    s_syn->add_option("--samples", syn.spec.n_samples)->check(CLI::PositiveNumber)->capture_default_str();
    s_syn->add_option("--tokens", syn.spec.n_med_tokens)->check(CLI::PositiveNumber)->capture_default_str();
    s_syn->add_option("--labels", syn.spec.n_labels)->check(CLI::PositiveNumber)->capture_default_str();
    s_syn->add_option("--support-size", syn.spec.support_size)->check(CLI::PositiveNumber)->capture_default_str();
    s_syn->add_option("--min-meds", syn.spec.min_meds)->check(CLI::PositiveNumber)->capture_default_str();
    s_syn->add_option("--max-meds", syn.spec.max_meds)->check(CLI::PositiveNumber)->capture_default_str();
    s_syn->add_option("--noise", syn.spec.noise, "One rate or one per label")->delimiter(',')->capture_default_str();
    s_syn->add_option("--split-ratios", syn.ratios)->delimiter(',')->capture_default_str();
    s_syn->add_flag("--no-demographics", syn.no_demographics, "Omit DEMO columns");

    TrainArgs tr;
    auto* s_train = app.add_subcommand("train", "Train a model on a prepared dataset");
    add_common(s_train, tr.common, true);
    s_train->add_option("--data", tr.data_dir, "Prepared dataset directory")->required();
    s_train->add_option("--model", tr.model, "M1..M8 or collabres")->capture_default_str();
    s_train->add_option("--batch-size", tr.cfg.batch_size)->capture_default_str();
    s_train->add_option("--max-epochs", tr.cfg.max_epochs)->capture_default_str();
    s_train->add_option("--patience", tr.cfg.early_stop_patience)->capture_default_str();
    s_train->add_option("--early-stop-metric", tr.metric, "primary_accuracy, sample_f1 or subset_accuracy")
        ->capture_default_str();
    s_train->add_option("--lr", tr.cfg.adam.lr)->capture_default_str();
    s_train->add_option("--beta1", tr.cfg.adam.beta1)->capture_default_str();
    s_train->add_option("--beta2", tr.cfg.adam.beta2)->capture_default_str();
    s_train->add_option("--epsilon", tr.cfg.adam.epsilon)->capture_default_str();
    s_train->add_option("--branches", tr.collab.branches)->capture_default_str();
    s_train->add_option("--dropouts", tr.collab.dropout_rates, "Per-branch rates")->delimiter(',')->capture_default_str();
    s_train->add_option("--branch-hidden", tr.collab.branch_hidden)->delimiter(',')->capture_default_str();
    s_train->add_option("--branch-out", tr.collab.branch_out)->delimiter(',')->capture_default_str();
    s_train->add_option("--fusion-width", tr.collab.fusion_width)->capture_default_str();
    s_train->add_option("--width-divisor", tr.width_divisor, "Shrink baseline widths")
        ->check(CLI::PositiveNumber)
        ->capture_default_str();
    s_train->add_flag("--timestamps", tr.timestamps, "Record wall-clock time per epoch");
    s_train->add_flag("--quiet", tr.quiet, "No per-epoch progress on stderr");

    EvaluateArgs ev;
    auto* s_eval = app.add_subcommand("evaluate", "Score a checkpoint on one split");
    add_common(s_eval, ev.common, true);
    s_eval->add_option("--checkpoint", ev.checkpoint)->required();
    s_eval->add_option("--data", ev.data_dir)->required();
    s_eval->add_option("--split", ev.split)->capture_default_str();
    s_eval->add_option("--group-by", ev.group_by, "Comma list of gender, age");
    s_eval->add_option("--threshold", ev.threshold);
    s_eval->add_option("--top-k", ev.top_k, "Rows of the chapter table")->capture_default_str();
    s_eval->add_flag("--keep-going", ev.keep_going, "Emit what can be computed when a grouping fails");

    PredictArgs pr;
    auto* s_pred = app.add_subcommand("predict", "Rank ICD-10 categories for episodes in a CSV");
    add_common(s_pred, pr.common, false);
    s_pred->add_option("--checkpoint", pr.checkpoint)->required();
    s_pred->add_option("--input", pr.input, "CSV with MED rows")->required();
    s_pred->add_option("--threshold", pr.threshold);
    s_pred->add_option("--top-k", pr.top_k, "Ranked labels per episode")->capture_default_str();

    ReportArgs rp;
    auto* s_rep = app.add_subcommand("report", "Label frequency table");
    add_common(s_rep, rp.common, false);
    s_rep->add_option("--data", rp.data_dir)->required();
    s_rep->add_option("--split", rp.split, "all, train, dev or test")->capture_default_str();
    s_rep->add_option("--top-k", rp.top_k)->check(CLI::PositiveNumber)->capture_default_str();
    s_rep->add_option("--min-instances", rp.min_instances)->check(CLI::PositiveNumber)->capture_default_str();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? kOk : kUsage;
    }

    const CLI::App* sub = app.get_subcommands().front();
    try {
        kernels::set_num_threads(sub == s_prep   ? prep.common.threads
                                 : sub == s_syn  ? syn.common.threads
                                 : sub == s_train ? tr.common.threads
                                 : sub == s_eval ? ev.common.threads
                                 : sub == s_pred ? pr.common.threads
                                                 : rp.common.threads);
        if (sub == s_prep) return cmd_prepare(prep, *sub);
        if (sub == s_syn) return cmd_synth(syn, *sub);
        if (sub == s_train) return cmd_train(tr, *sub);
        if (sub == s_eval) return cmd_evaluate(ev, *sub);
        if (sub == s_pred) return cmd_predict(pr);
        return cmd_report(rp);
    } catch (const UsageError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kUsage;
    } catch (const std::invalid_argument& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kUsage;
    } catch (const data::DataError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kData;
    } catch (const ckpt::CheckpointError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return e.code() == ckpt::ErrorCode::Io ? kUsage : kData;
    } catch (const std::exception& e) {
        std::cerr << "internal error: " << e.what() << "\n";
        return kInternal;
    }
}
