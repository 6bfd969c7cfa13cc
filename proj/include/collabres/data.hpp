#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <istream>
#include <map>
#include <optional>
#include <ostream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "collabres/tensor.hpp"

namespace collabres::data {

/// Malformed or inconsistent input data.
class DataError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct Medication {
    std::string code;
    std::string dose;
    std::string status;

    friend bool operator==(const Medication&, const Medication&) = default;
};

struct Demographics {
    std::string gender;
    int age_years = 0;

    friend bool operator==(const Demographics&, const Demographics&) = default;
};

/// One episode of care. icd10_codes[0] is the principal diagnosis.
struct EpisodeRecord {
    std::string episode_id;
    std::vector<Medication> medications;
    std::vector<std::string> icd10_codes;
    std::optional<Demographics> demographics;

    friend bool operator==(const EpisodeRecord&, const EpisodeRecord&) = default;
};

/// Reads the long CSV format:
///
///     record_type,episode_id,field1,field2,field3
///     MED,<episode>,<med_code>,<dose>,<status>
///     DX,<episode>,<seq>,<icd10_code>
///     DEMO,<episode>,<gender>,<age_years>
///
/// A header row is required. Rows may carry trailing empty fields. Fields
/// may be double-quoted (RFC 4180 quoting, no embedded newlines). DX rows are
/// ordered by seq (1 = principal) regardless of file order; episodes keep the
/// order of their first row.
std::vector<EpisodeRecord> ingest(const std::filesystem::path& path);
std::vector<EpisodeRecord> ingest(std::istream& in, const std::string& source_name = "<stream>");

/// Splits one CSV line into fields.
std::vector<std::string> split_csv_line(std::string_view line);

struct CleaningOptions {
    std::size_t min_instances = 3;
    /// Medication tokens seen in fewer episodes than this are dropped.
    std::size_t min_token_count = 1;
    std::size_t category_length = 3;
    /// Compared case-insensitively.
    std::vector<std::string> cancelled_statuses{"cancelled"};
};

struct CleaningReport {
    std::size_t episodes_in = 0;
    std::size_t episodes_out = 0;
    std::size_t cancelled_medications = 0;
    std::size_t codes_truncated = 0;
    std::size_t duplicate_codes_merged = 0;
    std::size_t rare_categories_removed = 0;
    std::size_t rare_tokens_removed = 0;
    std::size_t episodes_without_labels = 0;
    std::size_t episodes_without_medications = 0;
    std::size_t iterations = 0;
};

struct CleanResult {
    std::vector<EpisodeRecord> records;
    CleaningReport report;
};

/// Drops cancelled prescriptions, truncates codes to their category prefix
/// (de-duplicating within an episode), then repeatedly removes rare label
/// categories, rare medication tokens and emptied episodes until nothing changes.
CleanResult clean(std::vector<EpisodeRecord> records, const CleaningOptions& options = {});

void write_cleaning_report(std::ostream& os, const CleaningReport& report);

enum class TokenKind { Medication, Icd10Category };

/// Bijective token <-> index map with indices in lexicographic token order.
class Vocabulary {
public:
    Vocabulary() = default;
    Vocabulary(TokenKind kind, std::vector<std::string> tokens);

    TokenKind kind() const noexcept { return kind_; }
    std::size_t size() const noexcept { return tokens_.size(); }
    const std::string& token(std::size_t index) const { return tokens_.at(index); }
    const std::vector<std::string>& tokens() const noexcept { return tokens_; }
    std::optional<std::uint32_t> find(std::string_view token) const;
    std::uint32_t index_of(std::string_view token) const;

    friend bool operator==(const Vocabulary& a, const Vocabulary& b) {
        return a.kind_ == b.kind_ && a.tokens_ == b.tokens_;
    }

private:
    TokenKind kind_ = TokenKind::Medication;
    std::vector<std::string> tokens_;
    std::map<std::string, std::uint32_t, std::less<>> index_;
};

/// "CODE@DOSE"; the dose string is kept verbatim.
std::string medication_token(std::string_view code, std::string_view dose);

struct Dataset {
    SparseBinaryMatrix x;
    SparseBinaryMatrix y;
    std::vector<std::int64_t> principal;
    std::vector<std::string> episode_ids;
    std::vector<std::optional<Demographics>> demographics;
    Vocabulary features;
    Vocabulary labels;

    std::size_t size() const noexcept { return x.rows(); }
    bool has_demographics() const noexcept;
    Dataset select(std::span<const std::size_t> rows) const;
    /// Throws DataError if rows disagree or a principal label is inactive.
    void validate() const;
};

Dataset build_vocab_and_binarize(const std::vector<EpisodeRecord>& records);

/// Inverse of binarization: medications come back as active status, the
/// principal category first and the rest in label-index order.
std::vector<EpisodeRecord> reconstruct_records(const Dataset& dataset);

inline constexpr std::array<double, 3> kDefaultSplitRatios{0.70, 0.10, 0.20};
inline constexpr std::array<std::string_view, 3> kSplitNames{"train", "dev", "test"};

struct SplitResult {
    Dataset train;
    Dataset dev;
    Dataset test;
    /// Source row indices of each split, ascending.
    std::array<std::vector<std::size_t>, 3> members;
};

/// Iterative multi-label stratification. Split sizes hit their largest-
/// remainder targets exactly, and any label with at least 3 occurrences is
/// guaranteed a training example.
SplitResult stratified_split(const Dataset& dataset, std::array<double, 3> ratios = kDefaultSplitRatios,
                             std::uint64_t seed = 0);

struct LabelCount {
    std::string label;
    std::size_t index = 0;
    std::size_t count = 0;
};

struct LabelFrequencyReport {
    std::vector<LabelCount> rows;
    std::size_t total_labels = 0;
    std::size_t total_incidences = 0;
    /// (threshold, number of labels with count < threshold), thresholds are
    /// 1, 2, 5 and 10 times min_instances.
    std::vector<std::pair<std::size_t, std::size_t>> long_tail;
};

LabelFrequencyReport label_frequency_report(const Dataset& dataset, std::size_t top_k, std::size_t min_instances = 3);
void write_label_frequency(std::ostream& os, const LabelFrequencyReport& report);

struct Icd10Chapter {
    std::string id;
    std::string title;
};

/// WHO ICD-10 chapter of a code or category ("E11" -> IV, endocrine...).
Icd10Chapter icd10_chapter(std::string_view code);

// Synthetic data with a known generating process.

struct SyntheticSpec {
    std::size_t n_samples = 10000;
    std::size_t n_med_tokens = 300;
    std::size_t n_labels = 50;
    std::size_t support_size = 3;
    std::size_t min_meds = 4;
    std::size_t max_meds = 12;
    /// One probability for all labels, or one per label; each in [0, 0.5).
    std::vector<double> noise{0.05};
    /// Explicit support sets; drawn at random when empty.
    std::vector<std::vector<std::uint32_t>> supports;
    std::uint64_t seed = 1;
};

struct SyntheticOracle {
    std::vector<std::vector<std::uint32_t>> supports;
    std::vector<double> noise;
    std::size_t clean_active = 0;
    std::size_t dropped = 0;
    std::size_t rejected_samples = 0;

    /// Noise-free labels: label j is on iff its support meets the row.
    SparseBinaryMatrix clean_labels(const SparseBinaryMatrix& x) const;
};

struct SyntheticData {
    Dataset dataset;
    SyntheticOracle oracle;
};

/// Each sample draws a uniform count in [min_meds, max_meds] of distinct
/// medication tokens. Label j turns on when its support set intersects them;
/// an active label is then switched off with probability noise[j]. Samples
/// left without labels are redrawn. Principal = lowest active label index.
SyntheticData generate_synthetic(const SyntheticSpec& spec);
void write_oracle(std::ostream& os, const SyntheticOracle& oracle, const Dataset& dataset);

// Prepared dataset directories.

void write_sparse(std::ostream& os, const SparseBinaryMatrix& m);
SparseBinaryMatrix read_sparse(std::istream& in, const std::string& source_name);
void write_vocab(std::ostream& os, const Vocabulary& v);
Vocabulary read_vocab(std::istream& in, TokenKind kind);

struct PreparedData {
    Dataset train;
    Dataset dev;
    Dataset test;

    const Dataset& split(std::string_view name) const;
    /// All three splits stacked in train, dev, test order.
    Dataset combined() const;
};

void save_prepared(const std::filesystem::path& dir, const SplitResult& split);
PreparedData load_prepared(const std::filesystem::path& dir);

}  // namespace collabres::data
