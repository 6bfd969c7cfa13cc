#include "collabres/nn.hpp"

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <iostream>
#include <set>
#include <sstream>
#include <stdexcept>

#include "collabres/kernels.hpp"

namespace collabres::nn {

namespace {

constexpr std::array<std::string_view, 7> kKindNames = {"Input",         "Dense",  "ReLU",       "Dropout",
                                                        "ResidualBlock", "Concat", "SigmoidHead"};

[[noreturn]] void spec_error(std::size_t node, const std::string& what) {
    throw std::invalid_argument("model spec node " + std::to_string(node) + ": " + what);
}

void check_rate(double rate, std::size_t node) {
    if (!(rate >= 0.0 && rate < 1.0)) spec_error(node, "dropout rate " + std::to_string(rate) + " outside [0,1)");
}

// A layer input is either the sparse model input or a dense activation.
template <typename T>
struct Operand {
    const SparseBinaryMatrix* sparse = nullptr;
    const Matrix<T>* dense = nullptr;

    std::size_t rows() const { return sparse ? sparse->rows() : dense->rows(); }
};

template <typename T>
Matrix<T> affine(const Operand<T>& x, const Matrix<T>& w, const Matrix<T>& b) {
    return x.sparse ? kernels::sparse_linear_forward(*x.sparse, w, b) : kernels::linear_forward(*x.dense, w, b);
}

template <typename T>
Matrix<T> weight_grad(const Matrix<T>& dy, const Operand<T>& x) {
    return x.sparse ? kernels::sparse_weight_grad(dy, *x.sparse) : kernels::weight_grad(dy, *x.dense);
}

template <typename T>
void add_into(Matrix<T>& acc, const Matrix<T>& v) {
    if (acc.empty()) {
        acc = v;
        return;
    }
    for (std::size_t i = 0; i < acc.size(); ++i) acc.data()[i] += v.data()[i];
}

template <typename T>
void relu_inplace(Matrix<T>& m) {
    for (auto& v : m.values()) v = v > T(0) ? v : T(0);
}

// Multiplies grad by the ReLU derivative taken at `pre` (0 at the kink).
template <typename T>
void relu_mask_inplace(Matrix<T>& grad, const Matrix<T>& pre) {
    for (std::size_t i = 0; i < grad.size(); ++i)
        if (!(pre.data()[i] > T(0))) grad.data()[i] = T(0);
}

template <typename T>
void hadamard_inplace(Matrix<T>& a, const Matrix<T>& b) {
    for (std::size_t i = 0; i < a.size(); ++i) a.data()[i] *= b.data()[i];
}

template <typename T>
Matrix<T> zero_bias(std::size_t n) {
    return Matrix<T>(1, n);
}

template <typename T>
Matrix<T> sigmoid(const Matrix<T>& logits) {
    Matrix<T> out(logits.rows(), logits.cols());
    for (std::size_t i = 0; i < logits.size(); ++i) {
        const double z = logits.data()[i];
        const double p = z >= 0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z));
        out.data()[i] = static_cast<T>(p);
    }
    return out;
}

template <typename T>
Matrix<T> make_dropout_mask(std::size_t rows, std::size_t cols, double rate, SeededRng& rng) {
    Matrix<T> mask(rows, cols);
    const T scale = T(1) / (T(1) - static_cast<T>(rate));
    for (auto& v : mask.values()) v = rng.uniform() < rate ? T(0) : scale;
    return mask;
}

template <typename T>
struct BlockForward {
    Matrix<T> hidden_pre, hidden, mask, pre, out;
};

// Shared by residual_block_forward and model_forward.
template <typename T>
BlockForward<T> run_residual_block(const Operand<T>& x, const Operand<T>* skip_in, const Matrix<T>* w1,
                                   const Matrix<T>* b1, const Matrix<T>& w2, const Matrix<T>& b2,
                                   const Matrix<T>* w_skip, double rate, Mode mode, SeededRng& rng) {
    BlockForward<T> r;
    if (w1) {
        r.hidden_pre = affine(x, *w1, *b1);
        r.hidden = r.hidden_pre;
        relu_inplace(r.hidden);
        if (mode == Mode::Train && rate > 0.0) {
            r.mask = make_dropout_mask<T>(r.hidden.rows(), r.hidden.cols(), rate, rng);
            hadamard_inplace(r.hidden, r.mask);
        }
        r.pre = kernels::linear_forward(r.hidden, w2, b2);
    } else {
        r.pre = affine(x, w2, b2);
    }
    if (w_skip) {
        const auto skip_term = affine(*skip_in, *w_skip, zero_bias<T>(w_skip->rows()));
        if (skip_term.rows() != r.pre.rows() || skip_term.cols() != r.pre.cols())
            throw ShapeError("residual block: skip projection " + skip_term.shape_string() +
                             " does not match main path " + r.pre.shape_string());
        add_into(r.pre, skip_term);
    }
    r.out = r.pre;
    relu_inplace(r.out);
    return r;
}

std::string param_name(const std::string& scope, const char* role) { return scope + "." + role; }

}  // namespace

std::string_view to_string(LayerKind kind) { return kKindNames[static_cast<std::size_t>(kind)]; }

LayerKind parse_layer_kind(std::string_view name) {
    for (std::size_t i = 0; i < kKindNames.size(); ++i)
        if (kKindNames[i] == name) return static_cast<LayerKind>(i);
    throw std::invalid_argument("unknown layer kind '" + std::string(name) + "'");
}

std::size_t ModelSpec::width(std::size_t node) const {
    const auto& n = nodes.at(node);
    switch (n.layer.kind) {
        case LayerKind::Input:
            return input_dim;
        case LayerKind::Dense:
        case LayerKind::ResidualBlock:
        case LayerKind::SigmoidHead:
            return n.layer.out_dim;
        case LayerKind::ReLU:
        case LayerKind::Dropout:
            return width(n.inputs.at(0));
        case LayerKind::Concat: {
            std::size_t w = 0;
            for (auto p : n.layer.parts) w += p;
            return w;
        }
    }
    return 0;
}

std::size_t ModelSpec::skip_source(std::size_t node) const {
    const auto& n = nodes.at(node);
    return n.skip_source ? *n.skip_source : n.inputs.at(0);
}

std::string ModelSpec::scope(std::size_t node) const {
    const auto& n = nodes.at(node);
    std::string s = n.branch >= 0 ? "b" + std::to_string(n.branch) + "." : std::string();
    return s + "l" + std::to_string(n.depth);
}

void ModelSpec::validate() const {
    if (input_dim == 0 || output_dim == 0) throw std::invalid_argument("model spec: input and output dims must be >= 1");
    if (nodes.empty() || nodes[0].layer.kind != LayerKind::Input || !nodes[0].inputs.empty())
        throw std::invalid_argument("model spec: node 0 must be the input node");
    std::size_t heads = 0;
    std::set<std::string> scopes;
    for (std::size_t i = 1; i < nodes.size(); ++i) {
        const auto& n = nodes[i];
        const auto& l = n.layer;
        if (l.kind == LayerKind::Input) spec_error(i, "only node 0 may be an input");
        if (n.inputs.empty()) spec_error(i, "has no inputs");
        for (auto p : n.inputs)
            if (p >= i) spec_error(i, "input " + std::to_string(p) + " is not an earlier node");
        if (l.kind != LayerKind::Concat && n.inputs.size() != 1) spec_error(i, "expects exactly one input");
        if (n.skip_source && l.kind != LayerKind::ResidualBlock) spec_error(i, "skip source on a non-residual layer");
        const std::size_t in_w = width(n.inputs[0]);
        switch (l.kind) {
            case LayerKind::Dense:
            case LayerKind::SigmoidHead:
                if (l.in_dim != in_w)
                    spec_error(i, "in_dim " + std::to_string(l.in_dim) + " but producer width " + std::to_string(in_w));
                if (l.out_dim == 0) spec_error(i, "out_dim must be >= 1");
                break;
            case LayerKind::ReLU:
                if (n.inputs[0] == 0) spec_error(i, "ReLU cannot consume the sparse input");
                break;
            case LayerKind::Dropout:
                if (n.inputs[0] == 0) spec_error(i, "Dropout cannot consume the sparse input");
                check_rate(l.dropout_rate, i);
                break;
            case LayerKind::ResidualBlock:
                if (l.in_dim != in_w)
                    spec_error(i, "in_dim " + std::to_string(l.in_dim) + " but producer width " + std::to_string(in_w));
                if (l.out_dim == 0) spec_error(i, "out_dim must be >= 1");
                check_rate(l.dropout_rate, i);
                if (l.hidden_dim == 0 && l.dropout_rate > 0.0) spec_error(i, "dropout needs a hidden layer");
                if (n.skip_source && *n.skip_source >= i) spec_error(i, "skip source is not an earlier node");
                break;
            case LayerKind::Concat:
                if (l.parts.size() != n.inputs.size()) spec_error(i, "parts and inputs differ in length");
                for (std::size_t k = 0; k < n.inputs.size(); ++k) {
                    if (n.inputs[k] == 0) spec_error(i, "Concat cannot consume the sparse input");
                    if (l.parts[k] != width(n.inputs[k])) spec_error(i, "part width mismatch at position " + std::to_string(k));
                }
                break;
            case LayerKind::Input:
                break;
        }
        if (l.kind == LayerKind::SigmoidHead) {
            ++heads;
            if (i + 1 != nodes.size()) spec_error(i, "the sigmoid head must be the last node");
            if (l.out_dim != output_dim) spec_error(i, "head width differs from output_dim");
        }
        if (l.kind == LayerKind::Dense || l.kind == LayerKind::ResidualBlock || l.kind == LayerKind::SigmoidHead)
            if (!scopes.insert(scope(i)).second) spec_error(i, "duplicate parameter scope " + scope(i));
    }
    if (heads != 1) throw std::invalid_argument("model spec: exactly one sigmoid head is required");
}

std::vector<ParamShape> ModelSpec::parameter_shapes() const {
    std::vector<ParamShape> out;
    for (std::size_t i = 1; i < nodes.size(); ++i) {
        const auto& l = nodes[i].layer;
        const auto s = scope(i);
        switch (l.kind) {
            case LayerKind::Dense:
            case LayerKind::SigmoidHead:
                out.push_back({param_name(s, "main"), l.out_dim, l.in_dim, false});
                out.push_back({param_name(s, "bias"), 1, l.out_dim, true});
                break;
            case LayerKind::ResidualBlock:
                if (l.hidden_dim > 0) {
                    out.push_back({param_name(s, "main.0"), l.hidden_dim, l.in_dim, false});
                    out.push_back({param_name(s, "bias.0"), 1, l.hidden_dim, true});
                    out.push_back({param_name(s, "main.1"), l.out_dim, l.hidden_dim, false});
                    out.push_back({param_name(s, "bias.1"), 1, l.out_dim, true});
                } else {
                    out.push_back({param_name(s, "main"), l.out_dim, l.in_dim, false});
                    out.push_back({param_name(s, "bias"), 1, l.out_dim, true});
                }
                if (l.skip) out.push_back({param_name(s, "skip"), l.out_dim, width(skip_source(i)), false});
                break;
            default:
                break;
        }
    }
    std::sort(out.begin(), out.end(), [](const auto& a, const auto& b) { return a.name < b.name; });
    return out;
}

std::size_t ModelSpec::parameter_count() const {
    std::size_t total = 0;
    for (std::size_t i = 1; i < nodes.size(); ++i) {
        const auto& l = nodes[i].layer;
        switch (l.kind) {
            case LayerKind::Dense:
            case LayerKind::SigmoidHead:
                total += (l.in_dim + 1) * l.out_dim;
                break;
            case LayerKind::ResidualBlock:
                if (l.hidden_dim > 0)
                    total += (l.in_dim + 1) * l.hidden_dim + (l.hidden_dim + 1) * l.out_dim;
                else
                    total += (l.in_dim + 1) * l.out_dim;
                if (l.skip) total += width(skip_source(i)) * l.out_dim;
                break;
            default:
                break;
        }
    }
    return total;
}

std::string ModelSpec::describe() const {
    std::ostringstream os;
    os << (name.empty() ? "model" : name) << ": input " << input_dim << ", output " << output_dim << ", "
       << parameter_count() << " parameters\n";
    for (std::size_t i = 1; i < nodes.size(); ++i) {
        const auto& n = nodes[i];
        const auto& l = n.layer;
        os << "  #" << i << " " << to_string(l.kind);
        switch (l.kind) {
            case LayerKind::Dense:
            case LayerKind::SigmoidHead:
                os << " " << l.in_dim << "->" << l.out_dim;
                break;
            case LayerKind::Dropout:
                os << " rate " << l.dropout_rate;
                break;
            case LayerKind::ResidualBlock:
                os << " " << l.in_dim << "->";
                if (l.hidden_dim > 0) os << l.hidden_dim << "->";
                os << l.out_dim << " dropout " << l.dropout_rate;
                if (l.skip) os << " skip<-#" << skip_source(i);
                break;
            case LayerKind::Concat:
                os << " width " << width(i);
                break;
            default:
                break;
        }
        os << " from";
        for (auto p : n.inputs) os << " #" << p;
        if (l.kind == LayerKind::Dense || l.kind == LayerKind::ResidualBlock || l.kind == LayerKind::SigmoidHead)
            os << " [" << scope(i) << "]";
        os << "\n";
    }
    return os.str();
}

template <typename T>
Matrix<T>& ParameterMap<T>::at(const std::string& name) {
    auto it = tensors_.find(name);
    if (it == tensors_.end()) throw std::invalid_argument("missing parameter '" + name + "'");
    return it->second;
}

template <typename T>
const Matrix<T>& ParameterMap<T>::at(const std::string& name) const {
    auto it = tensors_.find(name);
    if (it == tensors_.end()) throw std::invalid_argument("missing parameter '" + name + "'");
    return it->second;
}

template <typename T>
std::size_t ParameterMap<T>::element_count() const noexcept {
    std::size_t n = 0;
    for (const auto& [name, m] : tensors_) n += m.size();
    return n;
}

template <typename T>
ParameterMap<T> ParameterMap<T>::zeros_like(const ModelSpec& spec) {
    ParameterMap out;
    for (const auto& s : spec.parameter_shapes()) out.set(s.name, Matrix<T>(s.rows, s.cols));
    return out;
}

template <typename T>
void ParameterMap<T>::check_against(const ModelSpec& spec) const {
    const auto shapes = spec.parameter_shapes();
    if (shapes.size() != tensors_.size())
        throw std::invalid_argument("parameter set has " + std::to_string(tensors_.size()) + " tensors, spec expects " +
                                    std::to_string(shapes.size()));
    for (const auto& s : shapes) {
        const auto& m = at(s.name);
        if (m.rows() != s.rows || m.cols() != s.cols)
            throw std::invalid_argument("parameter '" + s.name + "' is " + m.shape_string() + ", spec expects [" +
                                        std::to_string(s.rows) + "x" + std::to_string(s.cols) + "]");
    }
}

template class ParameterMap<float>;
template class ParameterMap<double>;

template <typename T>
Matrix<T> dense_forward(const Matrix<T>& x, const Matrix<T>& w, const Matrix<T>& b) {
    return kernels::linear_forward(x, w, b);
}

template <typename T>
Matrix<T> relu(const Matrix<T>& x) {
    auto y = x;
    relu_inplace(y);
    return y;
}

template <typename T>
DropoutResult<T> dropout_forward(const Matrix<T>& x, double rate, Mode mode, SeededRng& rng) {
    if (!(rate >= 0.0 && rate < 1.0))
        throw std::invalid_argument("dropout rate " + std::to_string(rate) + " outside [0,1)");
    DropoutResult<T> r{x, {}};
    if (mode == Mode::Infer || rate == 0.0) return r;
    r.mask = make_dropout_mask<T>(x.rows(), x.cols(), rate, rng);
    hadamard_inplace(r.y, r.mask);
    return r;
}

template <typename T>
Matrix<T> residual_block_forward(const Matrix<T>& x, const ResidualBlockParams<T>& params, double dropout_rate,
                                 Mode mode, SeededRng& rng) {
    if (!(dropout_rate >= 0.0 && dropout_rate < 1.0))
        throw std::invalid_argument("dropout rate " + std::to_string(dropout_rate) + " outside [0,1)");
    const Operand<T> in{nullptr, &x};
    const bool hidden = !params.w1.empty();
    return run_residual_block(in, &in, hidden ? &params.w1 : nullptr, hidden ? &params.b1 : nullptr, params.w2,
                              params.b2, params.w_skip.empty() ? nullptr : &params.w_skip, dropout_rate, mode, rng)
        .out;
}

template <typename T>
Matrix<T> concat_forward(const std::vector<Matrix<T>>& parts) {
    if (parts.empty()) return {};
    const std::size_t rows = parts.front().rows();
    std::size_t cols = 0;
    for (const auto& p : parts) {
        if (p.rows() != rows)
            throw ShapeError("concat: row counts differ (" + parts.front().shape_string() + " and " + p.shape_string() + ")");
        cols += p.cols();
    }
    Matrix<T> out(rows, cols);
    for (std::size_t r = 0; r < rows; ++r) {
        auto dst = out.row(r).begin();
        for (const auto& p : parts) dst = std::copy(p.row(r).begin(), p.row(r).end(), dst);
    }
    return out;
}

template <typename T>
BceResult<T> sigmoid_bce(const Matrix<T>& logits, const Matrix<T>& targets) {
    if (logits.rows() != targets.rows() || logits.cols() != targets.cols())
        throw ShapeError("sigmoid_bce: logits " + logits.shape_string() + " vs targets " + targets.shape_string());
    constexpr double lo = 1e-7, hi = 1.0 - 1e-7;
    BceResult<T> r{0.0, Matrix<T>(logits.rows(), logits.cols())};
    const std::size_t n = logits.size();
    if (n == 0) return r;
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double z = logits.data()[i];
        const double y = targets.data()[i];
        double p = z >= 0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z));
        p = std::clamp(p, lo, hi);
        total += -(y * std::log(p) + (1.0 - y) * std::log(1.0 - p));
        r.dlogits.data()[i] = static_cast<T>((p - y) / static_cast<double>(n));
    }
    r.loss = total / static_cast<double>(n);
    return r;
}

template <typename T>
ForwardResult<T> model_forward(const ModelSpec& spec, const ParameterMap<T>& params, const SparseBinaryMatrix& batch,
                               Mode mode, SeededRng& rng) {
    if (batch.cols() != spec.input_dim)
        throw ShapeError("model_forward: batch " + batch.shape_string() + " but model input_dim " +
                         std::to_string(spec.input_dim));
    spec.validate();
    params.check_against(spec);
    ForwardResult<T> result;
    auto& trace = result.trace;
    trace.mode = mode;
    trace.input = batch;
    trace.nodes.resize(spec.nodes.size());

    auto operand = [&](std::size_t node) -> Operand<T> {
        if (node == 0) return {&trace.input, nullptr};
        return {nullptr, &trace.nodes[node].out};
    };

    for (std::size_t i = 1; i < spec.nodes.size(); ++i) {
        const auto& n = spec.nodes[i];
        const auto& l = n.layer;
        auto& cache = trace.nodes[i];
        const auto s = spec.scope(i);
        switch (l.kind) {
            case LayerKind::Dense:
                cache.out = affine(operand(n.inputs[0]), params.at(s + ".main"), params.at(s + ".bias"));
                break;
            case LayerKind::ReLU:
                cache.out = relu(trace.nodes[n.inputs[0]].out);
                break;
            case LayerKind::Dropout: {
                auto d = dropout_forward(trace.nodes[n.inputs[0]].out, l.dropout_rate, mode, rng);
                cache.out = std::move(d.y);
                cache.mask = std::move(d.mask);
                break;
            }
            case LayerKind::ResidualBlock: {
                const auto x = operand(n.inputs[0]);
                const auto skip_in = operand(spec.skip_source(i));
                const bool hidden = l.hidden_dim > 0;
                auto b = run_residual_block<T>(
                    x, &skip_in, hidden ? &params.at(s + ".main.0") : nullptr,
                    hidden ? &params.at(s + ".bias.0") : nullptr, params.at(s + (hidden ? ".main.1" : ".main")),
                    params.at(s + (hidden ? ".bias.1" : ".bias")), l.skip ? &params.at(s + ".skip") : nullptr,
                    l.dropout_rate, mode, rng);
                cache.hidden_pre = std::move(b.hidden_pre);
                cache.hidden = std::move(b.hidden);
                cache.mask = std::move(b.mask);
                cache.pre = std::move(b.pre);
                cache.out = std::move(b.out);
                break;
            }
            case LayerKind::Concat: {
                std::vector<Matrix<T>> parts;
                parts.reserve(n.inputs.size());
                for (auto p : n.inputs) parts.push_back(trace.nodes[p].out);
                cache.out = concat_forward(parts);
                break;
            }
            case LayerKind::SigmoidHead:
                trace.logits = affine(operand(n.inputs[0]), params.at(s + ".main"), params.at(s + ".bias"));
                break;
            case LayerKind::Input:
                break;
        }
    }
    result.scores = sigmoid(trace.logits);
    return result;
}

template <typename T>
ParameterMap<T> model_backward(const ModelSpec& spec, const ParameterMap<T>& params, const ForwardTrace<T>& trace,
                               const Matrix<T>& dlogits) {
    if (trace.nodes.size() != spec.nodes.size())
        throw std::invalid_argument("model_backward: trace has " + std::to_string(trace.nodes.size()) +
                                    " nodes, spec has " + std::to_string(spec.nodes.size()));
    if (dlogits.rows() != trace.logits.rows() || dlogits.cols() != trace.logits.cols())
        throw ShapeError("model_backward: dlogits " + dlogits.shape_string() + " vs logits " +
                         trace.logits.shape_string());
    params.check_against(spec);

    ParameterMap<T> grads;
    std::vector<Matrix<T>> node_grads(spec.nodes.size());

    auto operand = [&](std::size_t node) -> Operand<T> {
        if (node == 0) return {&trace.input, nullptr};
        return {nullptr, &trace.nodes[node].out};
    };
    // Gradients never flow into the sparse input.
    auto propagate = [&](std::size_t node, const Matrix<T>& dy, const Matrix<T>& w) {
        if (node == 0) return;
        add_into(node_grads[node], kernels::matmul(dy, w));
    };

    for (std::size_t i = spec.nodes.size() - 1; i >= 1; --i) {
        const auto& n = spec.nodes[i];
        const auto& l = n.layer;
        const auto& cache = trace.nodes[i];
        const auto s = spec.scope(i);

        if (l.kind == LayerKind::SigmoidHead) {
            const auto& w = params.at(s + ".main");
            grads.set(s + ".main", weight_grad(dlogits, operand(n.inputs[0])));
            grads.set(s + ".bias", kernels::column_sums(dlogits));
            propagate(n.inputs[0], dlogits, w);
            continue;
        }
        if (node_grads[i].empty()) {
            // Unused node: its parameters still receive (zero) gradients.
            node_grads[i] = Matrix<T>(operand(0).rows(), spec.width(i));
        }
        const Matrix<T>& dy = node_grads[i];
        switch (l.kind) {
            case LayerKind::Dense: {
                grads.set(s + ".main", weight_grad(dy, operand(n.inputs[0])));
                grads.set(s + ".bias", kernels::column_sums(dy));
                propagate(n.inputs[0], dy, params.at(s + ".main"));
                break;
            }
            case LayerKind::ReLU: {
                auto dx = dy;
                relu_mask_inplace(dx, trace.nodes[n.inputs[0]].out);
                add_into(node_grads[n.inputs[0]], dx);
                break;
            }
            case LayerKind::Dropout: {
                auto dx = dy;
                if (!cache.mask.empty()) hadamard_inplace(dx, cache.mask);
                add_into(node_grads[n.inputs[0]], dx);
                break;
            }
            case LayerKind::ResidualBlock: {
                auto dpre = dy;
                relu_mask_inplace(dpre, cache.pre);
                const auto x = operand(n.inputs[0]);
                if (l.skip) {
                    const auto src = spec.skip_source(i);
                    grads.set(s + ".skip", weight_grad(dpre, operand(src)));
                    propagate(src, dpre, params.at(s + ".skip"));
                }
                if (l.hidden_dim > 0) {
                    const Operand<T> h{nullptr, &cache.hidden};
                    grads.set(s + ".main.1", weight_grad(dpre, h));
                    grads.set(s + ".bias.1", kernels::column_sums(dpre));
                    auto dh = kernels::matmul(dpre, params.at(s + ".main.1"));
                    if (!cache.mask.empty()) hadamard_inplace(dh, cache.mask);
                    relu_mask_inplace(dh, cache.hidden_pre);
                    grads.set(s + ".main.0", weight_grad(dh, x));
                    grads.set(s + ".bias.0", kernels::column_sums(dh));
                    propagate(n.inputs[0], dh, params.at(s + ".main.0"));
                } else {
                    grads.set(s + ".main", weight_grad(dpre, x));
                    grads.set(s + ".bias", kernels::column_sums(dpre));
                    propagate(n.inputs[0], dpre, params.at(s + ".main"));
                }
                break;
            }
            case LayerKind::Concat: {
                std::size_t offset = 0;
                for (std::size_t k = 0; k < n.inputs.size(); ++k) {
                    const std::size_t w = l.parts[k];
                    Matrix<T> part(dy.rows(), w);
                    for (std::size_t r = 0; r < dy.rows(); ++r)
                        std::copy_n(dy.row(r).begin() + static_cast<std::ptrdiff_t>(offset), w, part.row(r).begin());
                    add_into(node_grads[n.inputs[k]], part);
                    offset += w;
                }
                break;
            }
            default:
                break;
        }
    }
    return grads;
}

Parameters init_params(const ModelSpec& spec, SeededRng& rng) {
    spec.validate();
    Parameters params;
    for (const auto& s : spec.parameter_shapes()) {
        if (s.is_bias) {
            params.set(s.name, DenseMatrix(s.rows, s.cols));
        } else {
            const double stddev = std::sqrt(2.0 / static_cast<double>(s.cols));
            params.set(s.name, sample_gaussian(rng, s.rows, s.cols, 0.0, stddev));
        }
    }
    return params;
}

std::string_view to_string(BaselineId id) {
    static constexpr std::array<std::string_view, 8> names = {"M1", "M2", "M3", "M4", "M5", "M6", "M7", "M8"};
    return names[static_cast<std::size_t>(id)];
}

BaselineId parse_baseline(std::string_view name) {
    if (name.size() == 2 && std::toupper(static_cast<unsigned char>(name[0])) == 'M' && name[1] >= '1' && name[1] <= '8')
        return static_cast<BaselineId>(name[1] - '1');
    throw std::invalid_argument("unknown baseline '" + std::string(name) + "' (valid: M1..M8)");
}

namespace {

class SpecBuilder {
public:
    SpecBuilder(std::string name, std::size_t in, std::size_t out) {
        spec_.name = std::move(name);
        spec_.input_dim = in;
        spec_.output_dim = out;
        spec_.nodes.push_back(Node{LayerSpec{LayerKind::Input}, {}, std::nullopt, -1, 0});
    }

    std::size_t add(LayerSpec layer, std::vector<std::size_t> inputs, int branch, std::size_t depth,
                    std::optional<std::size_t> skip_source = std::nullopt) {
        spec_.nodes.push_back(Node{std::move(layer), std::move(inputs), skip_source, branch, depth});
        return spec_.nodes.size() - 1;
    }

    std::size_t width(std::size_t node) const { return spec_.width(node); }

    ModelSpec finish() {
        spec_.validate();
        return std::move(spec_);
    }

private:
    ModelSpec spec_;
};

std::size_t scaled(std::size_t width, std::size_t divisor) { return std::max<std::size_t>(1, (width + divisor - 1) / divisor); }

}  // namespace

ModelSpec build_baseline(BaselineId id, std::size_t input_dim, std::size_t output_dim, std::size_t width_divisor) {
    if (input_dim == 0 || output_dim == 0) throw std::invalid_argument("build_baseline: dims must be >= 1");
    if (width_divisor == 0) throw std::invalid_argument("build_baseline: width divisor must be >= 1");
    constexpr double kRate = 0.35;

    std::vector<std::size_t> hidden;
    bool dropout = false;
    switch (id) {
        case BaselineId::M1: hidden = {600}; break;
        case BaselineId::M2: hidden = {600}; dropout = true; break;
        case BaselineId::M3: hidden = {600, 400}; break;
        case BaselineId::M4: hidden = {600, 400}; dropout = true; break;
        case BaselineId::M5: hidden = {600, 400, 250}; break;
        case BaselineId::M6: hidden = {600, 400, 250}; dropout = true; break;
        case BaselineId::M7: hidden = {600, 400, 250, 200, 150}; dropout = true; break;
        case BaselineId::M8: hidden = {600, 400}; dropout = true; break;
    }
    for (auto& h : hidden) h = scaled(h, width_divisor);

    SpecBuilder b(std::string(to_string(id)), input_dim, output_dim);
    std::size_t prev = 0;
    std::size_t depth = 0;
    if (id == BaselineId::M8) {
        LayerSpec block{LayerKind::ResidualBlock, input_dim, hidden[0], hidden[1], kRate};
        prev = b.add(block, {prev}, -1, depth++);
    } else {
        for (auto h : hidden) {
            prev = b.add(LayerSpec{LayerKind::Dense, b.width(prev), 0, h}, {prev}, -1, depth++);
            prev = b.add(LayerSpec{LayerKind::ReLU}, {prev}, -1, depth++);
        }
        if (dropout) {
            LayerSpec d{LayerKind::Dropout};
            d.dropout_rate = kRate;
            prev = b.add(d, {prev}, -1, depth++);
        }
    }
    b.add(LayerSpec{LayerKind::SigmoidHead, b.width(prev), 0, output_dim}, {prev}, -1, depth);
    return b.finish();
}

ModelSpec build_collabres(std::size_t input_dim, std::size_t output_dim, const CollabResConfig& cfg,
                          std::vector<std::string>* warnings) {
    if (input_dim == 0 || output_dim == 0) throw std::invalid_argument("build_collabres: dims must be >= 1");
    const std::size_t k = cfg.branches;
    if (k == 0) throw std::invalid_argument("build_collabres: branch count must be >= 1");
    auto per_branch = [k](const auto& v, const char* what) {
        using V = typename std::decay_t<decltype(v)>::value_type;
        if (v.size() == 1) return std::vector<V>(k, v.front());
        if (v.size() != k)
            throw std::invalid_argument(std::string("build_collabres: ") + what + " needs 1 or " + std::to_string(k) +
                                        " entries, got " + std::to_string(v.size()));
        return std::vector<V>(v.begin(), v.end());
    };
    const auto hidden = per_branch(cfg.branch_hidden, "branch_hidden");
    const auto out = per_branch(cfg.branch_out, "branch_out");
    const auto rates = per_branch(cfg.dropout_rates, "dropout_rates");
    for (std::size_t i = 0; i < k; ++i) {
        if (hidden[i] == 0 || out[i] == 0) throw std::invalid_argument("build_collabres: branch widths must be >= 1");
        if (!(rates[i] >= 0.0 && rates[i] < 1.0))
            throw std::invalid_argument("build_collabres: dropout rate " + std::to_string(rates[i]) + " outside [0,1)");
    }
    if (cfg.fusion_width == 0) throw std::invalid_argument("build_collabres: fusion width must be >= 1");

    std::set<double> distinct(rates.begin(), rates.end());
    if (k > 1 && distinct.size() != k) {
        const std::string msg = "build_collabres: branches share dropout rates; the learners are meant to differ";
        if (warnings)
            warnings->push_back(msg);
        else
            std::cerr << "warning: " << msg << "\n";
    }

    SpecBuilder b("collabres", input_dim, output_dim);
    std::vector<std::size_t> branch_nodes;
    std::vector<std::size_t> widths;
    for (std::size_t i = 0; i < k; ++i) {
        LayerSpec block{LayerKind::ResidualBlock, input_dim, hidden[i], out[i], rates[i]};
        branch_nodes.push_back(b.add(block, {0}, static_cast<int>(i), 0));
        widths.push_back(out[i]);
    }
    LayerSpec concat{LayerKind::Concat};
    concat.parts = widths;
    const auto joined = b.add(concat, branch_nodes, -1, 1);
    LayerSpec fusion{LayerKind::ResidualBlock, b.width(joined), 0, cfg.fusion_width, 0.0};
    const auto fused = b.add(fusion, {joined}, -1, 2, std::size_t{0});
    b.add(LayerSpec{LayerKind::SigmoidHead, cfg.fusion_width, 0, output_dim}, {fused}, -1, 3);
    return b.finish();
}

ModelSpec without_skips(const ModelSpec& spec) {
    ModelSpec out = spec;
    for (auto& n : out.nodes)
        if (n.layer.kind == LayerKind::ResidualBlock) n.layer.skip = false;
    return out;
}

#define COLLABRES_INSTANTIATE_NN(T)                                                                           \
    template Matrix<T> dense_forward<T>(const Matrix<T>&, const Matrix<T>&, const Matrix<T>&);              \
    template Matrix<T> relu<T>(const Matrix<T>&);                                                           \
    template DropoutResult<T> dropout_forward<T>(const Matrix<T>&, double, Mode, SeededRng&);               \
    template Matrix<T> residual_block_forward<T>(const Matrix<T>&, const ResidualBlockParams<T>&, double, Mode, \
                                                 SeededRng&);                                               \
    template Matrix<T> concat_forward<T>(const std::vector<Matrix<T>>&);                                    \
    template BceResult<T> sigmoid_bce<T>(const Matrix<T>&, const Matrix<T>&);                               \
    template ForwardResult<T> model_forward<T>(const ModelSpec&, const ParameterMap<T>&,                    \
                                               const SparseBinaryMatrix&, Mode, SeededRng&);                \
    template ParameterMap<T> model_backward<T>(const ModelSpec&, const ParameterMap<T>&,                    \
                                               const ForwardTrace<T>&, const Matrix<T>&);

COLLABRES_INSTANTIATE_NN(float)
COLLABRES_INSTANTIATE_NN(double)

#undef COLLABRES_INSTANTIATE_NN

}  // namespace collabres::nn
