#include "collabres/optim.hpp"

#include <cmath>
#include <stdexcept>

namespace collabres::optim {

void AdamConfig::validate() const {
    if (!(lr > 0.0)) throw std::invalid_argument("adam: lr must be > 0");
    if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0))
        throw std::invalid_argument("adam: betas must lie in [0,1)");
    if (!(epsilon > 0.0)) throw std::invalid_argument("adam: epsilon must be > 0");
}

AdamState AdamState::for_params(const nn::Parameters& params, AdamConfig config) {
    config.validate();
    AdamState s;
    s.config = config;
    for (const auto& [name, p] : params) {
        s.m.set(name, DenseMatrix(p.rows(), p.cols()));
        s.v.set(name, DenseMatrix(p.rows(), p.cols()));
    }
    return s;
}

void adam_step(nn::Parameters& params, const nn::Gradients& grads, AdamState& state) {
    if (grads.size() != params.size() || state.m.size() != params.size() || state.v.size() != params.size())
        throw ShapeError("adam_step: parameter, gradient and moment maps differ in size");
    for (const auto& [name, p] : params) {
        const auto& g = grads.at(name);
        if (g.rows() != p.rows() || g.cols() != p.cols() || state.m.at(name).rows() != p.rows() ||
            state.m.at(name).cols() != p.cols())
            throw ShapeError("adam_step: shape mismatch for " + name + ": param " + p.shape_string() + " grad " +
                             g.shape_string());
    }
    ++state.t;
    const auto& c = state.config;
    const double t = static_cast<double>(state.t);
    const double bc1 = 1.0 - std::pow(c.beta1, t);
    const double bc2 = 1.0 - std::pow(c.beta2, t);
    for (auto& [name, p] : params.tensors()) {
        if (state.frozen.count(name)) continue;
        const float* g = grads.at(name).data();
        float* m = state.m.at(name).data();
        float* v = state.v.at(name).data();
        float* theta = p.data();
        const std::size_t n = p.values().size();
        for (std::size_t i = 0; i < n; ++i) {
            const double gi = g[i];
            const double mi = c.beta1 * m[i] + (1.0 - c.beta1) * gi;
            const double vi = c.beta2 * v[i] + (1.0 - c.beta2) * gi * gi;
            m[i] = static_cast<float>(mi);
            v[i] = static_cast<float>(vi);
            const double step = c.lr * (mi / bc1) / (std::sqrt(vi / bc2) + c.epsilon);
            theta[i] = static_cast<float>(theta[i] - step);
        }
    }
}

}  // namespace collabres::optim
