#pragma once

#include <string>
#include <unordered_map>
#include <vector>

#include "lplm/nn.hpp"

namespace lplm::core {

struct AdamConfig {
    double lr = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

// Bias-corrected Adam over named parameters. Moments are allocated on first
// touch and keyed by parameter name; updates walk parameters in registration
// order so runs are reproducible.
class Adam {
public:
    explicit Adam(AdamConfig cfg = {}) : cfg_(cfg) {}

    // Applies one update using the gradients recorded on the tape for each
    // bound entry. Throws NumericError naming the parameter if its gradient
    // is not finite.
    void step(const std::vector<Binder::Entry>& params, const Tape& tape);

    int64_t steps_taken() const { return t_; }
    const AdamConfig& config() const { return cfg_; }

private:
    struct Moments {
        Tensor m, v;
    };
    AdamConfig cfg_;
    int64_t t_ = 0;
    std::unordered_map<std::string, Moments> moments_;
};

// Single-tensor update, shared by Adam::step and exposed for direct use:
// applies one bias-corrected step with step counter t (1-based).
void adam_update(Tensor& param, const Tensor& grad, Tensor& m, Tensor& v, int64_t t, const AdamConfig& cfg);

}  // namespace lplm::core
