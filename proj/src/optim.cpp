#include "lplm/optim.hpp"

#include <cmath>

namespace lplm::core {

void adam_update(Tensor& param, const Tensor& grad, Tensor& m, Tensor& v, int64_t t, const AdamConfig& cfg) {
    if (!param.same_shape(grad)) {
        throw ShapeError("adam: gradient shape " + shape_str(grad.shape()) + " does not match parameter " +
                         shape_str(param.shape()));
    }
    const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(t));
    const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(t));
    for (int64_t i = 0; i < param.size(); ++i) {
        const double g = grad.data()[i];
        double& mi = m.data()[i];
        double& vi = v.data()[i];
        mi = cfg.beta1 * mi + (1.0 - cfg.beta1) * g;
        vi = cfg.beta2 * vi + (1.0 - cfg.beta2) * g * g;
        const double mhat = mi / bc1;
        const double vhat = vi / bc2;
        param.data()[i] -= cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps);
    }
}

void Adam::step(const std::vector<Binder::Entry>& params, const Tape& tape) {
    ++t_;
    for (const auto& e : params) {
        const Tensor& g = tape.grad(e.var);
        if (!g.all_finite()) {
            throw NumericError("non-finite gradient for parameter '" + e.name + "'");
        }
        auto it = moments_.find(e.name);
        if (it == moments_.end()) {
            Moments mo;
            mo.m = Tensor(e.param->shape());
            mo.v = Tensor(e.param->shape());
            it = moments_.emplace(e.name, std::move(mo)).first;
        }
        adam_update(*e.param, g, it->second.m, it->second.v, t_, cfg_);
    }
}

}  // namespace lplm::core
