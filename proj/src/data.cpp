#include "collabres/data.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>
#include <unordered_map>

namespace collabres::data {

namespace {

std::string trim(std::string_view s) {
    std::size_t b = 0, e = s.size();
    while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
    while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
    return std::string(s.substr(b, e - b));
}

std::string lower(std::string_view s) {
    std::string out(s);
    for (auto& c : out) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    return out;
}

template <typename Int>
bool parse_int(std::string_view s, Int& out) {
    auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), out);
    return ec == std::errc() && p == s.data() + s.size();
}

[[noreturn]] void fail_at(const std::string& source, std::size_t line, const std::string& what) {
    throw DataError(source + ":" + std::to_string(line) + ": " + what);
}

// Requires the fields past `used` to be empty.
void check_trailing(const std::vector<std::string>& f, std::size_t used, const std::string& source, std::size_t line) {
    for (std::size_t i = used; i < f.size(); ++i)
        if (!trim(f[i]).empty()) fail_at(source, line, "unexpected extra field " + std::to_string(i + 1));
}

struct PendingEpisode {
    EpisodeRecord record;
    std::map<long, std::string> dx;
};

}  // namespace

std::vector<std::string> split_csv_line(std::string_view line) {
    std::vector<std::string> fields;
    std::string cur;
    bool quoted = false;
    bool field_started_quoted = false;
    for (std::size_t i = 0; i < line.size(); ++i) {
        const char c = line[i];
        if (quoted) {
            if (c == '"') {
                if (i + 1 < line.size() && line[i + 1] == '"') {
                    cur.push_back('"');
                    ++i;
                } else {
                    quoted = false;
                }
            } else {
                cur.push_back(c);
            }
        } else if (c == '"' && cur.empty() && !field_started_quoted) {
            quoted = true;
            field_started_quoted = true;
        } else if (c == ',') {
            fields.push_back(std::move(cur));
            cur.clear();
            field_started_quoted = false;
        } else {
            cur.push_back(c);
        }
    }
    if (quoted) throw DataError("unterminated quoted field");
    fields.push_back(std::move(cur));
    return fields;
}

std::vector<EpisodeRecord> ingest(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open input file " + path.string());
    return ingest(in, path.string());
}

std::vector<EpisodeRecord> ingest(std::istream& in, const std::string& source) {
    std::vector<PendingEpisode> episodes;
    std::unordered_map<std::string, std::size_t> by_id;
    std::string line;
    std::size_t lineno = 0;
    bool header_seen = false;

    auto episode = [&](const std::string& id) -> PendingEpisode& {
        auto [it, inserted] = by_id.try_emplace(id, episodes.size());
        if (inserted) {
            episodes.emplace_back();
            episodes.back().record.episode_id = id;
        }
        return episodes[it->second];
    };

    while (std::getline(in, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (lineno == 1 && line.rfind("\xEF\xBB\xBF", 0) == 0) line.erase(0, 3);
        if (trim(line).empty()) continue;
        std::vector<std::string> f;
        try {
            f = split_csv_line(line);
        } catch (const DataError& e) {
            fail_at(source, lineno, e.what());
        }
        if (!header_seen) {
            if (f.size() < 2 || lower(trim(f[0])) != "record_type" || lower(trim(f[1])) != "episode_id")
                fail_at(source, lineno, "missing header row starting with record_type,episode_id");
            header_seen = true;
            continue;
        }
        const std::string type = trim(f[0]);
        if (f.size() < 2 || trim(f[1]).empty()) fail_at(source, lineno, "missing episode_id");
        const std::string id = trim(f[1]);
        if (type == "MED") {
            if (f.size() < 5) fail_at(source, lineno, "MED row needs med_code,dose,status");
            check_trailing(f, 5, source, lineno);
            Medication m{trim(f[2]), trim(f[3]), trim(f[4])};
            if (m.code.empty()) fail_at(source, lineno, "empty med_code");
            if (m.code.find('@') != std::string::npos) fail_at(source, lineno, "med_code may not contain '@'");
            episode(id).record.medications.push_back(std::move(m));
        } else if (type == "DX") {
            if (f.size() < 4) fail_at(source, lineno, "DX row needs seq,icd10_code");
            check_trailing(f, 4, source, lineno);
            long seq = 0;
            if (!parse_int(trim(f[2]), seq) || seq < 1) fail_at(source, lineno, "DX seq must be a positive integer");
            const std::string code = trim(f[3]);
            if (code.empty()) fail_at(source, lineno, "empty icd10_code");
            auto& ep = episode(id);
            if (!ep.dx.emplace(seq, code).second)
                fail_at(source, lineno, "duplicate diagnosis seq " + std::to_string(seq) + " for episode " + id);
        } else if (type == "DEMO") {
            if (f.size() < 4) fail_at(source, lineno, "DEMO row needs gender,age_years");
            check_trailing(f, 4, source, lineno);
            int age = 0;
            if (!parse_int(trim(f[3]), age) || age < 0) fail_at(source, lineno, "age_years must be a non-negative integer");
            auto& ep = episode(id);
            if (ep.record.demographics) fail_at(source, lineno, "duplicate DEMO row for episode " + id);
            ep.record.demographics = Demographics{trim(f[2]), age};
        } else {
            fail_at(source, lineno, "unknown record_type '" + type + "' (expected MED, DX or DEMO)");
        }
    }
    if (!header_seen && lineno > 0) {
        // File with only blank lines.
        return {};
    }
    std::vector<EpisodeRecord> out;
    out.reserve(episodes.size());
    for (auto& ep : episodes) {
        for (auto& [seq, code] : ep.dx) ep.record.icd10_codes.push_back(std::move(code));
        out.push_back(std::move(ep.record));
    }
    return out;
}

CleanResult clean(std::vector<EpisodeRecord> records, const CleaningOptions& options) {
    CleanResult result;
    auto& rep = result.report;
    rep.episodes_in = records.size();
    std::set<std::string> cancelled;
    for (const auto& s : options.cancelled_statuses) cancelled.insert(lower(trim(s)));

    for (auto& r : records) {
        auto& meds = r.medications;
        const auto before = meds.size();
        std::erase_if(meds, [&](const Medication& m) { return cancelled.count(lower(trim(m.status))) != 0; });
        rep.cancelled_medications += before - meds.size();

        std::vector<std::string> cats;
        for (const auto& code : r.icd10_codes) {
            std::string c = code.size() > options.category_length ? code.substr(0, options.category_length) : code;
            if (c.size() != code.size()) ++rep.codes_truncated;
            if (std::find(cats.begin(), cats.end(), c) != cats.end())
                ++rep.duplicate_codes_merged;
            else
                cats.push_back(std::move(c));
        }
        r.icd10_codes = std::move(cats);
    }

    for (;;) {
        ++rep.iterations;
        bool changed = false;

        std::map<std::string, std::size_t> label_count;
        std::map<std::string, std::size_t> token_count;
        for (const auto& r : records) {
            for (const auto& c : r.icd10_codes) ++label_count[c];
            std::set<std::string> tokens;
            for (const auto& m : r.medications) tokens.insert(medication_token(m.code, m.dose));
            for (const auto& t : tokens) ++token_count[t];
        }
        std::set<std::string> rare_labels, rare_tokens;
        for (const auto& [c, n] : label_count)
            if (n < options.min_instances) rare_labels.insert(c);
        for (const auto& [t, n] : token_count)
            if (n < options.min_token_count) rare_tokens.insert(t);
        rep.rare_categories_removed += rare_labels.size();
        rep.rare_tokens_removed += rare_tokens.size();

        for (auto& r : records) {
            const auto nl = r.icd10_codes.size();
            std::erase_if(r.icd10_codes, [&](const std::string& c) { return rare_labels.count(c) != 0; });
            const auto nm = r.medications.size();
            std::erase_if(r.medications,
                          [&](const Medication& m) { return rare_tokens.count(medication_token(m.code, m.dose)) != 0; });
            changed = changed || nl != r.icd10_codes.size() || nm != r.medications.size();
        }
        const auto before = records.size();
        std::erase_if(records, [&](const EpisodeRecord& r) {
            if (r.icd10_codes.empty()) {
                ++rep.episodes_without_labels;
                return true;
            }
            if (r.medications.empty()) {
                ++rep.episodes_without_medications;
                return true;
            }
            return false;
        });
        changed = changed || before != records.size();
        if (!changed) break;
    }
    rep.episodes_out = records.size();
    result.records = std::move(records);
    return result;
}

void write_cleaning_report(std::ostream& os, const CleaningReport& r) {
    os << "episodes_in\t" << r.episodes_in << "\n"
       << "episodes_out\t" << r.episodes_out << "\n"
       << "cancelled_medications\t" << r.cancelled_medications << "\n"
       << "codes_truncated\t" << r.codes_truncated << "\n"
       << "duplicate_codes_merged\t" << r.duplicate_codes_merged << "\n"
       << "rare_categories_removed\t" << r.rare_categories_removed << "\n"
       << "rare_tokens_removed\t" << r.rare_tokens_removed << "\n"
       << "episodes_without_labels\t" << r.episodes_without_labels << "\n"
       << "episodes_without_medications\t" << r.episodes_without_medications << "\n"
       << "iterations\t" << r.iterations << "\n";
}

Vocabulary::Vocabulary(TokenKind kind, std::vector<std::string> tokens) : kind_(kind), tokens_(std::move(tokens)) {
    std::sort(tokens_.begin(), tokens_.end());
    tokens_.erase(std::unique(tokens_.begin(), tokens_.end()), tokens_.end());
    for (std::size_t i = 0; i < tokens_.size(); ++i) index_.emplace(tokens_[i], static_cast<std::uint32_t>(i));
}

std::optional<std::uint32_t> Vocabulary::find(std::string_view token) const {
    auto it = index_.find(token);
    if (it == index_.end()) return std::nullopt;
    return it->second;
}

std::uint32_t Vocabulary::index_of(std::string_view token) const {
    auto i = find(token);
    if (!i) throw DataError("token '" + std::string(token) + "' is not in the vocabulary");
    return *i;
}

std::string medication_token(std::string_view code, std::string_view dose) {
    std::string t(code);
    t.push_back('@');
    t.append(dose);
    return t;
}

bool Dataset::has_demographics() const noexcept {
    return std::any_of(demographics.begin(), demographics.end(), [](const auto& d) { return d.has_value(); });
}

Dataset Dataset::select(std::span<const std::size_t> rows) const {
    Dataset out;
    out.x = x.select_rows(rows);
    out.y = y.select_rows(rows);
    for (auto r : rows) {
        out.principal.push_back(principal.at(r));
        out.episode_ids.push_back(episode_ids.at(r));
        out.demographics.push_back(demographics.at(r));
    }
    out.features = features;
    out.labels = labels;
    return out;
}

void Dataset::validate() const {
    const std::size_t n = x.rows();
    if (y.rows() != n || principal.size() != n || episode_ids.size() != n || demographics.size() != n)
        throw DataError("dataset columns disagree on row count");
    if (x.cols() != features.size() || y.cols() != labels.size())
        throw DataError("dataset matrices disagree with vocabulary sizes");
    x.validate();
    y.validate();
    for (std::size_t r = 0; r < n; ++r)
        if (principal[r] < 0 || !y.contains(r, static_cast<std::uint32_t>(principal[r])))
            throw DataError("row " + std::to_string(r) + ": principal label is not active");
}

Dataset build_vocab_and_binarize(const std::vector<EpisodeRecord>& records) {
    std::vector<std::string> med_tokens, label_tokens;
    for (const auto& r : records) {
        for (const auto& m : r.medications) med_tokens.push_back(medication_token(m.code, m.dose));
        for (const auto& c : r.icd10_codes) label_tokens.push_back(c);
    }
    Dataset d;
    d.features = Vocabulary(TokenKind::Medication, std::move(med_tokens));
    d.labels = Vocabulary(TokenKind::Icd10Category, std::move(label_tokens));
    d.x = SparseBinaryMatrix(d.features.size());
    d.y = SparseBinaryMatrix(d.labels.size());
    for (const auto& r : records) {
        std::vector<std::uint32_t> xs, ys;
        for (const auto& m : r.medications) xs.push_back(d.features.index_of(medication_token(m.code, m.dose)));
        for (const auto& c : r.icd10_codes) ys.push_back(d.labels.index_of(c));
        d.x.push_row(std::move(xs));
        d.y.push_row(std::move(ys));
        d.principal.push_back(r.icd10_codes.empty() ? -1 : d.labels.index_of(r.icd10_codes.front()));
        d.episode_ids.push_back(r.episode_id);
        d.demographics.push_back(r.demographics);
    }
    return d;
}

std::vector<EpisodeRecord> reconstruct_records(const Dataset& d) {
    std::vector<EpisodeRecord> out;
    out.reserve(d.size());
    for (std::size_t r = 0; r < d.size(); ++r) {
        EpisodeRecord rec;
        rec.episode_id = d.episode_ids[r];
        rec.demographics = d.demographics[r];
        for (auto i : d.x.row(r)) {
            const auto& tok = d.features.token(i);
            const auto at = tok.find('@');
            rec.medications.push_back({tok.substr(0, at), at == std::string::npos ? "" : tok.substr(at + 1), "active"});
        }
        if (d.principal[r] >= 0) rec.icd10_codes.push_back(d.labels.token(static_cast<std::size_t>(d.principal[r])));
        for (auto j : d.y.row(r))
            if (static_cast<std::int64_t>(j) != d.principal[r]) rec.icd10_codes.push_back(d.labels.token(j));
        out.push_back(std::move(rec));
    }
    return out;
}

SplitResult stratified_split(const Dataset& dataset, std::array<double, 3> ratios, std::uint64_t seed) {
    const double total_ratio = ratios[0] + ratios[1] + ratios[2];
    if (std::abs(total_ratio - 1.0) > 1e-9)
        throw std::invalid_argument("split ratios must sum to 1 (got " + std::to_string(total_ratio) + ")");
    for (auto r : ratios)
        if (r < 0.0) throw std::invalid_argument("split ratios must be non-negative");
    const std::size_t n = dataset.size();
    if (n == 0) throw std::invalid_argument("cannot split an empty dataset");
    const std::size_t L = dataset.y.cols();

    // Largest-remainder split sizes.
    std::array<std::size_t, 3> capacity{};
    std::array<double, 3> remainder{};
    std::size_t assigned = 0;
    for (std::size_t s = 0; s < 3; ++s) {
        const double exact = ratios[s] * static_cast<double>(n);
        capacity[s] = static_cast<std::size_t>(std::floor(exact));
        remainder[s] = exact - static_cast<double>(capacity[s]);
        assigned += capacity[s];
    }
    while (assigned < n) {
        std::size_t best = 0;
        for (std::size_t s = 1; s < 3; ++s)
            if (remainder[s] > remainder[best]) best = s;
        ++capacity[best];
        remainder[best] = -1.0;
        ++assigned;
    }

    std::vector<std::size_t> label_total(L);
    std::vector<std::vector<std::size_t>> examples_of(L);
    for (std::size_t r = 0; r < n; ++r)
        for (auto j : dataset.y.row(r)) {
            ++label_total[j];
            examples_of[j].push_back(r);
        }
    std::vector<std::array<double, 3>> desired(L);
    for (std::size_t j = 0; j < L; ++j)
        for (std::size_t s = 0; s < 3; ++s) desired[j][s] = ratios[s] * static_cast<double>(label_total[j]);

    SeededRng rng(seed);
    for (auto& ex : examples_of) rng.shuffle(ex.begin(), ex.end());

    std::vector<int> split_of(n, -1);
    std::vector<std::size_t> remaining(label_total);
    auto place = [&](std::size_t r, std::size_t s) {
        split_of[r] = static_cast<int>(s);
        --capacity[s];
        for (auto j : dataset.y.row(r)) {
            desired[j][s] -= 1.0;
            --remaining[j];
        }
    };
    auto choose = [&](const std::array<double, 3>& want) {
        std::vector<std::size_t> cands;
        for (std::size_t s = 0; s < 3; ++s) {
            if (capacity[s] == 0) continue;
            if (cands.empty() || want[s] > want[cands[0]]) {
                cands = {s};
            } else if (want[s] == want[cands[0]]) {
                cands.push_back(s);
            }
        }
        if (cands.size() > 1) {
            std::vector<std::size_t> roomiest;
            for (auto s : cands) {
                if (roomiest.empty() || capacity[s] > capacity[roomiest[0]])
                    roomiest = {s};
                else if (capacity[s] == capacity[roomiest[0]])
                    roomiest.push_back(s);
            }
            cands = std::move(roomiest);
        }
        return cands.size() == 1 ? cands[0] : cands[rng.uniform_index(cands.size())];
    };

    for (;;) {
        std::size_t rarest = L;
        for (std::size_t j = 0; j < L; ++j)
            if (remaining[j] > 0 && (rarest == L || remaining[j] < remaining[rarest])) rarest = j;
        if (rarest == L) break;
        for (auto r : examples_of[rarest]) {
            if (split_of[r] >= 0) continue;
            place(r, choose(desired[rarest]));
        }
    }
    const std::array<double, 3> size_pref{0.0, 0.0, 0.0};
    for (std::size_t r = 0; r < n; ++r)
        if (split_of[r] < 0) place(r, choose(size_pref));

    // Every label with >= 3 occurrences must be seen in training; swap in
    // an example from dev/test where needed.
    std::vector<std::size_t> train_count(L);
    for (std::size_t r = 0; r < n; ++r)
        if (split_of[r] == 0)
            for (auto j : dataset.y.row(r)) ++train_count[j];
    for (std::size_t j = 0; j < L; ++j) {
        if (label_total[j] < 3 || train_count[j] > 0) continue;
        std::size_t incoming = n;
        for (auto r : examples_of[j])
            if (split_of[r] != 0 && (incoming == n || r < incoming)) incoming = r;
        std::size_t outgoing = n;
        for (std::size_t r = 0; r < n && outgoing == n; ++r) {
            if (split_of[r] != 0) continue;
            bool removable = true;
            for (auto k : dataset.y.row(r))
                if (label_total[k] >= 3 && train_count[k] <= 1) removable = false;
            if (removable) outgoing = r;
        }
        if (incoming == n || outgoing == n)
            throw DataError("stratified_split: cannot place label " + std::to_string(j) + " in the training split");
        const int other = split_of[incoming];
        split_of[incoming] = 0;
        split_of[outgoing] = other;
        for (auto k : dataset.y.row(incoming)) ++train_count[k];
        for (auto k : dataset.y.row(outgoing)) --train_count[k];
    }

    SplitResult out;
    for (std::size_t r = 0; r < n; ++r) out.members[static_cast<std::size_t>(split_of[r])].push_back(r);
    out.train = dataset.select(out.members[0]);
    out.dev = dataset.select(out.members[1]);
    out.test = dataset.select(out.members[2]);
    return out;
}

LabelFrequencyReport label_frequency_report(const Dataset& d, std::size_t top_k, std::size_t min_instances) {
    LabelFrequencyReport rep;
    std::vector<std::size_t> counts(d.y.cols());
    for (std::size_t r = 0; r < d.size(); ++r)
        for (auto j : d.y.row(r)) ++counts[j];
    std::vector<LabelCount> all;
    for (std::size_t j = 0; j < counts.size(); ++j) {
        all.push_back({d.labels.size() > j ? d.labels.token(j) : std::to_string(j), j, counts[j]});
        rep.total_incidences += counts[j];
    }
    std::stable_sort(all.begin(), all.end(), [](const auto& a, const auto& b) { return a.count > b.count; });
    rep.total_labels = all.size();
    for (std::size_t m : {1, 2, 5, 10}) {
        const std::size_t threshold = m * min_instances;
        const auto below = static_cast<std::size_t>(
            std::count_if(counts.begin(), counts.end(), [&](std::size_t c) { return c < threshold; }));
        rep.long_tail.emplace_back(threshold, below);
    }
    if (all.size() > top_k) all.resize(top_k);
    rep.rows = std::move(all);
    return rep;
}

void write_label_frequency(std::ostream& os, const LabelFrequencyReport& rep) {
    os << "rank\tlabel\tcount\tshare\n";
    for (std::size_t i = 0; i < rep.rows.size(); ++i) {
        const auto& r = rep.rows[i];
        const double share = rep.total_incidences ? static_cast<double>(r.count) / static_cast<double>(rep.total_incidences) : 0.0;
        char buf[32];
        std::snprintf(buf, sizeof buf, "%.4f", share);
        os << (i + 1) << "\t" << r.label << "\t" << r.count << "\t" << buf << "\n";
    }
    os << "# labels\t" << rep.total_labels << "\n";
    os << "# incidences\t" << rep.total_incidences << "\n";
    for (const auto& [threshold, below] : rep.long_tail) os << "# labels_below_" << threshold << "\t" << below << "\n";
}

Icd10Chapter icd10_chapter(std::string_view code) {
    struct Range {
        const char* lo;
        const char* hi;
        const char* id;
        const char* title;
    };
    static constexpr Range kChapters[] = {
        {"A00", "B99", "I", "Certain infectious and parasitic diseases"},
        {"C00", "D48", "II", "Neoplasms"},
        {"D50", "D89", "III", "Diseases of the blood and immune mechanism"},
        {"E00", "E90", "IV", "Endocrine, nutritional and metabolic diseases"},
        {"F00", "F99", "V", "Mental and behavioural disorders"},
        {"G00", "G99", "VI", "Diseases of the nervous system"},
        {"H00", "H59", "VII", "Diseases of the eye and adnexa"},
        {"H60", "H95", "VIII", "Diseases of the ear and mastoid process"},
        {"I00", "I99", "IX", "Diseases of the circulatory system"},
        {"J00", "J99", "X", "Diseases of the respiratory system"},
        {"K00", "K93", "XI", "Diseases of the digestive system"},
        {"L00", "L99", "XII", "Diseases of the skin and subcutaneous tissue"},
        {"M00", "M99", "XIII", "Diseases of the musculoskeletal system"},
        {"N00", "N99", "XIV", "Diseases of the genitourinary system"},
        {"O00", "O99", "XV", "Pregnancy, childbirth and the puerperium"},
        {"P00", "P96", "XVI", "Conditions originating in the perinatal period"},
        {"Q00", "Q99", "XVII", "Congenital malformations"},
        {"R00", "R99", "XVIII", "Symptoms, signs and abnormal findings"},
        {"S00", "T98", "XIX", "Injury, poisoning and external causes"},
        {"U00", "U99", "XXII", "Codes for special purposes"},
        {"V01", "Y98", "XX", "External causes of morbidity and mortality"},
        {"Z00", "Z99", "XXI", "Factors influencing health status"},
    };
    std::string cat;
    for (char c : code.substr(0, 3)) cat.push_back(static_cast<char>(std::toupper(static_cast<unsigned char>(c))));
    if (cat.size() == 3)
        for (const auto& r : kChapters)
            if (cat >= r.lo && cat <= r.hi) return {r.id, r.title};
    return {"?", "Unclassified"};
}

SparseBinaryMatrix SyntheticOracle::clean_labels(const SparseBinaryMatrix& x) const {
    SparseBinaryMatrix y(supports.size());
    for (std::size_t r = 0; r < x.rows(); ++r) {
        std::vector<std::uint32_t> on;
        for (std::size_t j = 0; j < supports.size(); ++j)
            for (auto t : supports[j])
                if (x.contains(r, t)) {
                    on.push_back(static_cast<std::uint32_t>(j));
                    break;
                }
        y.push_row(std::move(on));
    }
    return y;
}

namespace {

std::string padded(std::size_t v, int width) {
    std::string s = std::to_string(v);
    if (static_cast<int>(s.size()) < width) s.insert(0, static_cast<std::size_t>(width) - s.size(), '0');
    return s;
}

// Category-style names spread over the letters so that chapters vary;
// generated in increasing lexicographic order.
std::vector<std::string> synthetic_label_names(std::size_t n) {
    std::vector<std::string> names;
    std::size_t prev_letter = 26, number = 0;
    for (std::size_t j = 0; j < n; ++j) {
        const std::size_t letter = j * 26 / n;
        number = letter == prev_letter ? number + 1 : 0;
        prev_letter = letter;
        names.push_back(std::string(1, static_cast<char>('A' + letter)) + padded(number, 2));
    }
    return names;
}

}  // namespace

SyntheticData generate_synthetic(const SyntheticSpec& spec) {
    if (spec.n_samples == 0 || spec.n_med_tokens == 0 || spec.n_labels == 0)
        throw std::invalid_argument("synthetic spec: sizes must be >= 1");
    if (spec.n_labels > 2600) throw std::invalid_argument("synthetic spec: at most 2600 labels");
    if (spec.min_meds == 0 || spec.min_meds > spec.max_meds || spec.max_meds > spec.n_med_tokens)
        throw std::invalid_argument("synthetic spec: need 1 <= min_meds <= max_meds <= n_med_tokens");
    if (spec.noise.size() != 1 && spec.noise.size() != spec.n_labels)
        throw std::invalid_argument("synthetic spec: noise needs 1 or n_labels entries");
    for (double p : spec.noise)
        if (!(p >= 0.0 && p < 0.5)) throw std::invalid_argument("synthetic spec: noise must lie in [0, 0.5)");

    SeededRng rng(spec.seed);
    SyntheticOracle oracle;
    oracle.noise = spec.noise.size() == 1 ? std::vector<double>(spec.n_labels, spec.noise[0]) : spec.noise;
    if (!spec.supports.empty()) {
        if (spec.supports.size() != spec.n_labels)
            throw std::invalid_argument("synthetic spec: supports must list one set per label");
        for (const auto& s : spec.supports) {
            if (s.empty()) throw std::invalid_argument("synthetic spec: empty support set");
            for (auto t : s)
                if (t >= spec.n_med_tokens) throw std::invalid_argument("synthetic spec: support index out of range");
            auto sorted = s;
            std::sort(sorted.begin(), sorted.end());
            sorted.erase(std::unique(sorted.begin(), sorted.end()), sorted.end());
            oracle.supports.push_back(std::move(sorted));
        }
    } else {
        if (spec.support_size == 0 || spec.support_size > spec.n_med_tokens)
            throw std::invalid_argument("synthetic spec: support_size must lie in [1, n_med_tokens]");
        std::vector<std::uint32_t> pool(spec.n_med_tokens);
        std::iota(pool.begin(), pool.end(), 0u);
        for (std::size_t j = 0; j < spec.n_labels; ++j) {
            rng.shuffle(pool.begin(), pool.end());
            std::vector<std::uint32_t> s(pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(spec.support_size));
            std::sort(s.begin(), s.end());
            oracle.supports.push_back(std::move(s));
        }
    }

    std::vector<std::string> med_names, label_names = synthetic_label_names(spec.n_labels);
    for (std::size_t t = 0; t < spec.n_med_tokens; ++t) med_names.push_back(medication_token("MED" + padded(t, 5), "1"));

    // token -> labels whose support contains it
    std::vector<std::vector<std::uint32_t>> labels_of_token(spec.n_med_tokens);
    for (std::size_t j = 0; j < spec.n_labels; ++j)
        for (auto t : oracle.supports[j]) labels_of_token[t].push_back(static_cast<std::uint32_t>(j));

    Dataset d;
    d.features = Vocabulary(TokenKind::Medication, med_names);
    d.labels = Vocabulary(TokenKind::Icd10Category, label_names);
    d.x = SparseBinaryMatrix(spec.n_med_tokens);
    d.y = SparseBinaryMatrix(spec.n_labels);
    std::vector<std::uint32_t> pool(spec.n_med_tokens);
    std::iota(pool.begin(), pool.end(), 0u);
    constexpr std::size_t kMaxAttempts = 10000;
    for (std::size_t i = 0; i < spec.n_samples; ++i) {
        std::vector<std::uint32_t> meds, labels;
        for (std::size_t attempt = 0;; ++attempt) {
            if (attempt == kMaxAttempts)
                throw std::invalid_argument("synthetic spec: supports almost never produce a label");
            const std::size_t count = spec.min_meds + rng.uniform_index(spec.max_meds - spec.min_meds + 1);
            // partial Fisher-Yates
            for (std::size_t k = 0; k < count; ++k) {
                const auto pick = k + rng.uniform_index(spec.n_med_tokens - k);
                std::swap(pool[k], pool[pick]);
            }
            meds.assign(pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(count));
            std::sort(meds.begin(), meds.end());
            std::vector<std::uint32_t> clean;
            for (auto t : meds) clean.insert(clean.end(), labels_of_token[t].begin(), labels_of_token[t].end());
            std::sort(clean.begin(), clean.end());
            clean.erase(std::unique(clean.begin(), clean.end()), clean.end());
            labels.clear();
            std::size_t dropped = 0;
            for (auto j : clean) {
                if (rng.uniform() < oracle.noise[j])
                    ++dropped;
                else
                    labels.push_back(j);
            }
            oracle.clean_active += clean.size();
            oracle.dropped += dropped;
            if (!labels.empty()) break;
            ++oracle.rejected_samples;
        }
        d.principal.push_back(labels.front());
        d.x.push_row(std::move(meds));
        d.y.push_row(std::move(labels));
        d.episode_ids.push_back("S" + padded(i, 6));
        const std::string gender = rng.uniform() < 0.5 ? "F" : "M";
        d.demographics.push_back(Demographics{gender, static_cast<int>(rng.uniform_index(90))});
    }
    return {std::move(d), std::move(oracle)};
}

void write_oracle(std::ostream& os, const SyntheticOracle& oracle, const Dataset& d) {
    os << "# synthetic generator: label j on iff support(j) meets the sample; active labels dropped w.p. noise(j)\n";
    os << "# clean_active\t" << oracle.clean_active << "\n";
    os << "# dropped\t" << oracle.dropped << "\n";
    os << "# rejected_samples\t" << oracle.rejected_samples << "\n";
    os << "label\tindex\tnoise\tsupport\n";
    for (std::size_t j = 0; j < oracle.supports.size(); ++j) {
        char buf[32];
        std::snprintf(buf, sizeof buf, "%.6g", oracle.noise[j]);
        os << d.labels.token(j) << "\t" << j << "\t" << buf << "\t";
        for (std::size_t k = 0; k < oracle.supports[j].size(); ++k)
            os << (k ? " " : "") << d.features.token(oracle.supports[j][k]);
        os << "\n";
    }
}

void write_sparse(std::ostream& os, const SparseBinaryMatrix& m) {
    os << "%collabres-sparse 1 " << m.rows() << " " << m.cols() << "\n";
    for (std::size_t r = 0; r < m.rows(); ++r) {
        const auto row = m.row(r);
        for (std::size_t k = 0; k < row.size(); ++k) os << (k ? " " : "") << row[k];
        os << "\n";
    }
}

SparseBinaryMatrix read_sparse(std::istream& in, const std::string& source) {
    std::string line;
    if (!std::getline(in, line)) throw DataError(source + ": empty sparse matrix file");
    std::istringstream head(line);
    std::string magic;
    int version = 0;
    std::size_t rows = 0, cols = 0;
    if (!(head >> magic >> version >> rows >> cols) || magic != "%collabres-sparse")
        throw DataError(source + ":1: not a sparse matrix file");
    if (version != 1) throw DataError(source + ":1: unsupported sparse format version " + std::to_string(version));
    std::vector<std::vector<std::uint32_t>> data;
    data.reserve(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        if (!std::getline(in, line)) throw DataError(source + ": expected " + std::to_string(rows) + " rows");
        std::vector<std::uint32_t> idx;
        std::istringstream ls(line);
        std::uint32_t v;
        while (ls >> v) idx.push_back(v);
        if (!ls.eof()) throw DataError(source + ":" + std::to_string(r + 2) + ": bad index list");
        data.push_back(std::move(idx));
    }
    try {
        return SparseBinaryMatrix(cols, std::move(data));
    } catch (const ShapeError& e) {
        throw DataError(source + ": " + e.what());
    }
}

void write_vocab(std::ostream& os, const Vocabulary& v) {
    for (const auto& t : v.tokens()) os << t << "\n";
}

Vocabulary read_vocab(std::istream& in, TokenKind kind) {
    std::vector<std::string> tokens;
    std::string line;
    while (std::getline(in, line)) tokens.push_back(line);
    Vocabulary v(kind, tokens);
    if (v.tokens() != tokens) throw DataError("vocabulary file is not sorted and unique");
    return v;
}

const Dataset& PreparedData::split(std::string_view name) const {
    if (name == "train") return train;
    if (name == "dev") return dev;
    if (name == "test") return test;
    throw std::invalid_argument("unknown split '" + std::string(name) + "' (valid: train, dev, test)");
}

Dataset PreparedData::combined() const {
    Dataset out;
    out.features = train.features;
    out.labels = train.labels;
    out.x = SparseBinaryMatrix(train.x.cols());
    out.y = SparseBinaryMatrix(train.y.cols());
    for (const Dataset* d : {&train, &dev, &test})
        for (std::size_t r = 0; r < d->size(); ++r) {
            out.x.push_row({d->x.row(r).begin(), d->x.row(r).end()});
            out.y.push_row({d->y.row(r).begin(), d->y.row(r).end()});
            out.principal.push_back(d->principal[r]);
            out.episode_ids.push_back(d->episode_ids[r]);
            out.demographics.push_back(d->demographics[r]);
        }
    return out;
}

namespace {

void write_file(const std::filesystem::path& p, const std::string& content) {
    std::ofstream out(p, std::ios::binary);
    if (!out) throw DataError("cannot write " + p.string());
    out << content;
    if (!out) throw DataError("failed writing " + p.string());
}

std::ifstream open_in(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    if (!in) throw DataError("cannot open " + p.string());
    return in;
}

void save_split(const std::filesystem::path& dir, std::string_view name, const Dataset& d) {
    const std::string n(name);
    std::ostringstream xs, ys, ps, ids, demo;
    write_sparse(xs, d.x);
    write_sparse(ys, d.y);
    for (auto p : d.principal) ps << p << "\n";
    for (const auto& id : d.episode_ids) ids << id << "\n";
    for (const auto& dm : d.demographics) {
        if (dm)
            demo << dm->gender << "\t" << dm->age_years << "\n";
        else
            demo << "NA\tNA\n";
    }
    write_file(dir / (n + ".X"), xs.str());
    write_file(dir / (n + ".Y"), ys.str());
    write_file(dir / (n + ".principal"), ps.str());
    write_file(dir / (n + ".ids"), ids.str());
    write_file(dir / (n + ".demo"), demo.str());
}

Dataset load_split(const std::filesystem::path& dir, std::string_view name, const Vocabulary& features,
                   const Vocabulary& labels) {
    const std::string n(name);
    Dataset d;
    d.features = features;
    d.labels = labels;
    {
        auto in = open_in(dir / (n + ".X"));
        d.x = read_sparse(in, (dir / (n + ".X")).string());
    }
    {
        auto in = open_in(dir / (n + ".Y"));
        d.y = read_sparse(in, (dir / (n + ".Y")).string());
    }
    std::string line;
    {
        auto in = open_in(dir / (n + ".principal"));
        while (std::getline(in, line)) {
            std::int64_t v = 0;
            if (!parse_int(line, v)) throw DataError((dir / (n + ".principal")).string() + ": bad label index");
            d.principal.push_back(v);
        }
    }
    {
        auto in = open_in(dir / (n + ".ids"));
        while (std::getline(in, line)) d.episode_ids.push_back(line);
    }
    {
        auto in = open_in(dir / (n + ".demo"));
        while (std::getline(in, line)) {
            const auto tab = line.find('\t');
            if (tab == std::string::npos) throw DataError((dir / (n + ".demo")).string() + ": expected gender<TAB>age");
            const auto gender = line.substr(0, tab);
            const auto age = line.substr(tab + 1);
            if (gender == "NA" && age == "NA") {
                d.demographics.push_back(std::nullopt);
                continue;
            }
            int a = 0;
            if (!parse_int(age, a)) throw DataError((dir / (n + ".demo")).string() + ": bad age");
            d.demographics.push_back(Demographics{gender, a});
        }
    }
    d.validate();
    return d;
}

}  // namespace

void save_prepared(const std::filesystem::path& dir, const SplitResult& split) {
    std::filesystem::create_directories(dir);
    std::ostringstream meta;
    meta << "collabres-dataset 1\n"
         << "features\t" << split.train.features.size() << "\n"
         << "labels\t" << split.train.labels.size() << "\n"
         << "train\t" << split.train.size() << "\n"
         << "dev\t" << split.dev.size() << "\n"
         << "test\t" << split.test.size() << "\n";
    write_file(dir / "dataset.txt", meta.str());
    std::ostringstream fv, lv;
    write_vocab(fv, split.train.features);
    write_vocab(lv, split.train.labels);
    write_file(dir / "features.vocab", fv.str());
    write_file(dir / "labels.vocab", lv.str());
    save_split(dir, "train", split.train);
    save_split(dir, "dev", split.dev);
    save_split(dir, "test", split.test);
}

PreparedData load_prepared(const std::filesystem::path& dir) {
    {
        auto in = open_in(dir / "dataset.txt");
        std::string first;
        std::getline(in, first);
        if (first != "collabres-dataset 1") throw DataError((dir / "dataset.txt").string() + ": unsupported dataset format");
    }
    Vocabulary features, labels;
    {
        auto in = open_in(dir / "features.vocab");
        features = read_vocab(in, TokenKind::Medication);
    }
    {
        auto in = open_in(dir / "labels.vocab");
        labels = read_vocab(in, TokenKind::Icd10Category);
    }
    PreparedData p;
    p.train = load_split(dir, "train", features, labels);
    p.dev = load_split(dir, "dev", features, labels);
    p.test = load_split(dir, "test", features, labels);
    return p;
}

}  // namespace collabres::data
