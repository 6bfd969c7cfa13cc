#pragma once

#include <cstddef>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "collabres/tensor.hpp"

namespace collabres::nn {

enum class LayerKind { Input, Dense, ReLU, Dropout, ResidualBlock, Concat, SigmoidHead };

std::string_view to_string(LayerKind kind);
LayerKind parse_layer_kind(std::string_view name);

enum class Mode { Train, Infer };

/// One layer of a ModelSpec. Which size fields matter depends on `kind`:
///   Dense, SigmoidHead: in_dim, out_dim
///   Dropout:            dropout_rate (width is inherited from the producer)
///   ResidualBlock:      in_dim, hidden_dim, out_dim, dropout_rate, skip
///   Concat:             parts (widths of the joined producers)
///
/// A residual block computes ReLU(main(x) + W_skip * s), where main(x) is
/// Dense(in->hidden), ReLU, Dropout, Dense(hidden->out), or a single
/// Dense(in->out) when hidden_dim == 0. `s` is the block's skip source node,
/// which is the block input unless the node says otherwise.
struct LayerSpec {
    LayerKind kind = LayerKind::Dense;
    std::size_t in_dim = 0;
    std::size_t hidden_dim = 0;
    std::size_t out_dim = 0;
    double dropout_rate = 0.0;
    bool skip = true;
    std::vector<std::size_t> parts;

    friend bool operator==(const LayerSpec&, const LayerSpec&) = default;
};

struct Node {
    LayerSpec layer;
    std::vector<std::size_t> inputs;
    std::optional<std::size_t> skip_source;
    /// Parallel branch index, or -1 for the shared trunk. Together with
    /// `depth` this fixes the canonical parameter names.
    int branch = -1;
    std::size_t depth = 0;

    friend bool operator==(const Node&, const Node&) = default;
};

struct ParamShape {
    std::string name;
    std::size_t rows = 0;
    std::size_t cols = 0;
    bool is_bias = false;
};

/// Directed acyclic layer graph. Nodes are stored in topological order and
/// node 0 is always the sparse model input.
struct ModelSpec {
    std::string name;
    std::size_t input_dim = 0;
    std::size_t output_dim = 0;
    std::vector<Node> nodes;

    /// Throws std::invalid_argument describing the first violated rule.
    void validate() const;
    std::size_t width(std::size_t node) const;
    std::size_t skip_source(std::size_t node) const;
    /// "b<branch>.l<depth>" for branch layers, "l<depth>" for trunk layers.
    std::string scope(std::size_t node) const;
    /// Canonical parameter list, sorted by name.
    std::vector<ParamShape> parameter_shapes() const;
    std::size_t parameter_count() const;
    std::string describe() const;

    friend bool operator==(const ModelSpec&, const ModelSpec&) = default;
};

template <typename T>
class ParameterMap {
public:
    using Storage = std::map<std::string, Matrix<T>>;

    Matrix<T>& at(const std::string& name);
    const Matrix<T>& at(const std::string& name) const;
    bool contains(const std::string& name) const { return tensors_.count(name) != 0; }
    void set(const std::string& name, Matrix<T> value) { tensors_[name] = std::move(value); }

    std::size_t size() const noexcept { return tensors_.size(); }
    std::size_t element_count() const noexcept;
    Storage& tensors() noexcept { return tensors_; }
    const Storage& tensors() const noexcept { return tensors_; }
    auto begin() const { return tensors_.begin(); }
    auto end() const { return tensors_.end(); }

    /// Zero-filled map with exactly the spec's canonical shapes.
    static ParameterMap zeros_like(const ModelSpec& spec);
    /// Throws std::invalid_argument if names or shapes differ from the spec.
    void check_against(const ModelSpec& spec) const;

    template <typename U>
    ParameterMap<U> cast() const {
        ParameterMap<U> out;
        for (const auto& [name, m] : tensors_) out.set(name, m.template cast<U>());
        return out;
    }

    friend bool operator==(const ParameterMap&, const ParameterMap&) = default;

private:
    Storage tensors_;
};

using Parameters = ParameterMap<float>;
using Gradients = ParameterMap<float>;

template <typename T>
struct NodeCache {
    Matrix<T> out;
    Matrix<T> hidden_pre;  // residual block: first dense pre-activation
    Matrix<T> hidden;      // residual block: after ReLU and dropout
    Matrix<T> mask;        // dropout scale factors, Train mode only
    Matrix<T> pre;         // pre-activation feeding the output ReLU
};

template <typename T>
struct ForwardTrace {
    Mode mode = Mode::Infer;
    SparseBinaryMatrix input;
    std::vector<NodeCache<T>> nodes;
    Matrix<T> logits;
};

template <typename T>
struct ForwardResult {
    Matrix<T> scores;
    ForwardTrace<T> trace;
};

template <typename T>
struct DropoutResult {
    Matrix<T> y;
    Matrix<T> mask;
};

template <typename T>
struct ResidualBlockParams {
    Matrix<T> w1, b1;  // empty when the block has no hidden layer
    Matrix<T> w2, b2;
    Matrix<T> w_skip;  // empty when the block has no skip edge
};

template <typename T>
struct BceResult {
    double loss = 0.0;
    Matrix<T> dlogits;
};

/// out = x * W^T + b, W stored out_dim x in_dim, b as 1 x out_dim.
template <typename T>
Matrix<T> dense_forward(const Matrix<T>& x, const Matrix<T>& w, const Matrix<T>& b);

template <typename T>
Matrix<T> relu(const Matrix<T>& x);

/// Inverted dropout. Train mode keeps each unit with probability 1 - rate and
/// scales kept units by 1 / (1 - rate); Infer mode returns x and no mask.
template <typename T>
DropoutResult<T> dropout_forward(const Matrix<T>& x, double rate, Mode mode, SeededRng& rng);

template <typename T>
Matrix<T> residual_block_forward(const Matrix<T>& x, const ResidualBlockParams<T>& params, double dropout_rate,
                                 Mode mode, SeededRng& rng);

template <typename T>
Matrix<T> concat_forward(const std::vector<Matrix<T>>& parts);

/// Mean binary cross-entropy over all cells with p clamped to [1e-7, 1 - 1e-7];
/// dlogits = (p - y) / cell_count.
template <typename T>
BceResult<T> sigmoid_bce(const Matrix<T>& logits, const Matrix<T>& targets);

template <typename T>
ForwardResult<T> model_forward(const ModelSpec& spec, const ParameterMap<T>& params, const SparseBinaryMatrix& batch,
                               Mode mode, SeededRng& rng);

template <typename T>
ParameterMap<T> model_backward(const ModelSpec& spec, const ParameterMap<T>& params, const ForwardTrace<T>& trace,
                               const Matrix<T>& dlogits);

Parameters init_params(const ModelSpec& spec, SeededRng& rng);

enum class BaselineId { M1, M2, M3, M4, M5, M6, M7, M8 };

std::string_view to_string(BaselineId id);
/// Accepts "M1".."M8" (case-insensitive); throws std::invalid_argument otherwise.
BaselineId parse_baseline(std::string_view name);

/// Baseline topologies. `width_divisor` shrinks every hidden width (rounding
/// up, minimum 1) for micro-scale verification runs.
ModelSpec build_baseline(BaselineId id, std::size_t input_dim, std::size_t output_dim,
                         std::size_t width_divisor = 1);

struct CollabResConfig {
    std::size_t branches = 4;
    /// Per-branch widths; a single entry applies to every branch.
    std::vector<std::size_t> branch_hidden{600};
    std::vector<std::size_t> branch_out{400};
    std::vector<double> dropout_rates{0.1, 0.2, 0.3, 0.4};
    std::size_t fusion_width = 600;

    friend bool operator==(const CollabResConfig&, const CollabResConfig&) = default;
};

/// k parallel residual branches over the input, concatenated, then a fusion
/// residual block whose skip edge projects the raw input, then the sigmoid head.
/// Repeated dropout rates are allowed but reported through `warnings` (or
/// stderr when no sink is given).
ModelSpec build_collabres(std::size_t input_dim, std::size_t output_dim, const CollabResConfig& cfg,
                          std::vector<std::string>* warnings = nullptr);

/// Copy of `spec` with every residual skip edge removed.
ModelSpec without_skips(const ModelSpec& spec);

}  // namespace collabres::nn
