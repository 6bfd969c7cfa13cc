#include "collabres/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <iterator>
#include <json.hpp>
#include <sstream>

namespace collabres::ckpt {

using nlohmann::json;

std::string_view to_string(ErrorCode c) {
    switch (c) {
        case ErrorCode::NotACheckpoint: return "not a checkpoint";
        case ErrorCode::VersionMismatch: return "version mismatch";
        case ErrorCode::Truncated: return "truncated";
        case ErrorCode::Malformed: return "malformed";
        case ErrorCode::Io: return "io error";
    }
    return "?";
}

namespace {

[[noreturn]] void fail(ErrorCode code, const std::string& detail) {
    throw CheckpointError(code, std::string(to_string(code)) + ": " + detail);
}

json node_to_json(const nn::Node& n) {
    const auto& l = n.layer;
    json j;
    j["kind"] = std::string(nn::to_string(l.kind));
    j["in"] = l.in_dim;
    j["hidden"] = l.hidden_dim;
    j["out"] = l.out_dim;
    j["dropout"] = l.dropout_rate;
    j["skip"] = l.skip;
    j["parts"] = l.parts;
    j["inputs"] = n.inputs;
    j["skip_source"] = n.skip_source ? json(*n.skip_source) : json(nullptr);
    j["branch"] = n.branch;
    j["depth"] = n.depth;
    return j;
}

nn::Node node_from_json(const json& j) {
    nn::Node n;
    n.layer.kind = nn::parse_layer_kind(j.at("kind").get<std::string>());
    n.layer.in_dim = j.at("in").get<std::size_t>();
    n.layer.hidden_dim = j.at("hidden").get<std::size_t>();
    n.layer.out_dim = j.at("out").get<std::size_t>();
    n.layer.dropout_rate = j.at("dropout").get<double>();
    n.layer.skip = j.at("skip").get<bool>();
    n.layer.parts = j.at("parts").get<std::vector<std::size_t>>();
    n.inputs = j.at("inputs").get<std::vector<std::size_t>>();
    if (!j.at("skip_source").is_null()) n.skip_source = j.at("skip_source").get<std::size_t>();
    n.branch = j.at("branch").get<int>();
    n.depth = j.at("depth").get<std::size_t>();
    return n;
}

json spec_json(const nn::ModelSpec& s) {
    json j;
    j["name"] = s.name;
    j["input_dim"] = s.input_dim;
    j["output_dim"] = s.output_dim;
    j["nodes"] = json::array();
    for (const auto& n : s.nodes) j["nodes"].push_back(node_to_json(n));
    return j;
}

nn::ModelSpec spec_from_json(const json& j) {
    nn::ModelSpec s;
    s.name = j.at("name").get<std::string>();
    s.input_dim = j.at("input_dim").get<std::size_t>();
    s.output_dim = j.at("output_dim").get<std::size_t>();
    for (const auto& n : j.at("nodes")) s.nodes.push_back(node_from_json(n));
    return s;
}

json config_json(const train::TrainConfig& c) {
    json j;
    j["batch_size"] = c.batch_size;
    j["max_epochs"] = c.max_epochs;
    j["early_stop_patience"] = c.early_stop_patience;
    j["early_stop_metric"] = std::string(train::to_string(c.early_stop_metric));
    j["seed"] = c.seed;
    j["shuffle"] = c.shuffle;
    j["lr"] = c.adam.lr;
    j["beta1"] = c.adam.beta1;
    j["beta2"] = c.adam.beta2;
    j["epsilon"] = c.adam.epsilon;
    return j;
}

train::TrainConfig config_from_json(const json& j) {
    train::TrainConfig c;
    c.batch_size = j.at("batch_size").get<std::size_t>();
    c.max_epochs = j.at("max_epochs").get<std::size_t>();
    c.early_stop_patience = j.at("early_stop_patience").get<std::size_t>();
    c.early_stop_metric = train::parse_early_stop_metric(j.at("early_stop_metric").get<std::string>());
    c.seed = j.at("seed").get<std::uint64_t>();
    c.shuffle = j.at("shuffle").get<bool>();
    c.adam.lr = j.at("lr").get<double>();
    c.adam.beta1 = j.at("beta1").get<double>();
    c.adam.beta2 = j.at("beta2").get<double>();
    c.adam.epsilon = j.at("epsilon").get<double>();
    return c;
}

template <typename U>
void put(std::string& out, U v) {
    for (std::size_t i = 0; i < sizeof(U); ++i) out.push_back(static_cast<char>((static_cast<std::uint64_t>(v) >> (8 * i)) & 0xFF));
}

class Reader {
public:
    explicit Reader(std::string_view b) : b_(b) {}

    template <typename U>
    U get(const char* what) {
        need(sizeof(U), what);
        std::uint64_t v = 0;
        for (std::size_t i = 0; i < sizeof(U); ++i)
            v |= static_cast<std::uint64_t>(static_cast<unsigned char>(b_[pos_ + i])) << (8 * i);
        pos_ += sizeof(U);
        return static_cast<U>(v);
    }
    std::string_view bytes(std::size_t n, const char* what) {
        need(n, what);
        auto s = b_.substr(pos_, n);
        pos_ += n;
        return s;
    }
    bool done() const { return pos_ == b_.size(); }

private:
    void need(std::size_t n, const char* what) {
        if (b_.size() - pos_ < n)
            fail(ErrorCode::Truncated, std::string("file ends inside ") + what + " at byte " + std::to_string(pos_));
    }
    std::string_view b_;
    std::size_t pos_ = 0;
};

}  // namespace

std::string spec_to_json(const nn::ModelSpec& spec, int indent) { return spec_json(spec).dump(indent); }

std::string serialize(const train::Checkpoint& c) {
    c.params.check_against(c.spec);
    json header;
    header["format"] = "collabres-checkpoint";
    header["spec"] = spec_json(c.spec);
    header["features"] = c.features.tokens();
    header["labels"] = c.labels.tokens();
    header["config"] = config_json(c.config);
    header["threshold"] = c.threshold;
    const std::string text = header.dump(1);

    std::string out(kMagic, 4);
    out.push_back(static_cast<char>(kVersion));
    put<std::uint64_t>(out, text.size());
    out += text;
    put<std::uint32_t>(out, static_cast<std::uint32_t>(c.params.size()));
    for (const auto& [name, m] : c.params) {
        put<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
        out += name;
        put<std::uint32_t>(out, 2);
        put<std::uint32_t>(out, static_cast<std::uint32_t>(m.rows()));
        put<std::uint32_t>(out, static_cast<std::uint32_t>(m.cols()));
        for (float f : m.values()) {
            std::uint32_t bits;
            std::memcpy(&bits, &f, 4);
            put<std::uint32_t>(out, bits);
        }
    }
    return out;
}

train::Checkpoint deserialize(std::string_view bytes) {
    if (bytes.size() < 4 || std::memcmp(bytes.data(), kMagic, 4) != 0)
        fail(ErrorCode::NotACheckpoint, "missing CLRS magic bytes");
    Reader r(bytes.substr(4));
    const auto version = r.get<std::uint8_t>("version byte");
    if (version != kVersion)
        fail(ErrorCode::VersionMismatch,
             "file version " + std::to_string(version) + ", this build reads version " + std::to_string(kVersion));
    const auto text_len = r.get<std::uint64_t>("header length");
    const auto text = r.bytes(static_cast<std::size_t>(text_len), "header text");

    train::Checkpoint c;
    try {
        const auto header = json::parse(text);
        if (header.at("format") != "collabres-checkpoint") fail(ErrorCode::Malformed, "unexpected header format tag");
        c.spec = spec_from_json(header.at("spec"));
        c.spec.validate();
        c.features = data::Vocabulary(data::TokenKind::Medication, header.at("features").get<std::vector<std::string>>());
        c.labels = data::Vocabulary(data::TokenKind::Icd10Category, header.at("labels").get<std::vector<std::string>>());
        c.config = config_from_json(header.at("config"));
        c.threshold = header.at("threshold").get<double>();
    } catch (const CheckpointError&) {
        throw;
    } catch (const std::exception& e) {
        fail(ErrorCode::Malformed, std::string("header: ") + e.what());
    }

    const auto count = r.get<std::uint32_t>("record count");
    for (std::uint32_t i = 0; i < count; ++i) {
        const auto name_len = r.get<std::uint32_t>("record name length");
        const std::string name(r.bytes(name_len, "record name"));
        const auto dims = r.get<std::uint32_t>("dim count");
        if (dims != 2) fail(ErrorCode::Malformed, name + ": expected 2 dims, found " + std::to_string(dims));
        const auto rows = r.get<std::uint32_t>("dims");
        const auto cols = r.get<std::uint32_t>("dims");
        DenseMatrix m(rows, cols);
        for (auto& f : m.values()) {
            const auto bits = r.get<std::uint32_t>("float payload");
            std::memcpy(&f, &bits, 4);
        }
        if (c.params.contains(name)) fail(ErrorCode::Malformed, "duplicate record " + name);
        c.params.set(name, std::move(m));
    }
    if (!r.done()) fail(ErrorCode::Malformed, "trailing bytes after the last record");
    try {
        c.params.check_against(c.spec);
    } catch (const std::exception& e) {
        fail(ErrorCode::Malformed, e.what());
    }
    return c;
}

void save_checkpoint(const train::Checkpoint& c, const std::filesystem::path& path) {
    const auto bytes = serialize(c);
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) fail(ErrorCode::Io, "cannot write " + path.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) fail(ErrorCode::Io, "failed writing " + path.string());
}

train::Checkpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) fail(ErrorCode::Io, "cannot open " + path.string());
    std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return deserialize(bytes);
}

}  // namespace collabres::ckpt
