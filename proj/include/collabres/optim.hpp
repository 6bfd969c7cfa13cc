#pragma once

#include <cstdint>
#include <set>
#include <string>

#include "collabres/nn.hpp"

namespace collabres::optim {

struct AdamConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;

    void validate() const;
    friend bool operator==(const AdamConfig&, const AdamConfig&) = default;
};

struct AdamState {
    nn::Parameters m;
    nn::Parameters v;
    std::uint64_t t = 0;
    AdamConfig config;
    /// Parameters listed here are never updated (their moments stay zero).
    std::set<std::string> frozen;

    static AdamState for_params(const nn::Parameters& params, AdamConfig config = {});
};

/// One Adam update of every parameter. t is incremented first, so the
/// first call uses bias corrections 1 - beta^1.
void adam_step(nn::Parameters& params, const nn::Gradients& grads, AdamState& state);

}  // namespace collabres::optim
