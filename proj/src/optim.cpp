#include "mzu/optim.hpp"

#include <cmath>
#include <stdexcept>

namespace mzu {

template <typename T>
double global_norm(const GradMap<T>& grads) {
    double sq = 0.0;
    for (const auto& kv : grads)
        for (T g : kv.second.values()) sq += static_cast<double>(g) * static_cast<double>(g);
    return std::sqrt(sq);
}

template <typename T>
GradMap<T> global_norm_clip(GradMap<T> grads, double max_norm) {
    if (!(max_norm > 0)) throw std::invalid_argument("clip norm must be positive");
    const double g = global_norm(grads);
    if (g <= max_norm) return grads;
    const T f = static_cast<T>(max_norm / g);
    for (auto& kv : grads)
        for (auto& v : kv.second.values()) v *= f;
    return grads;
}

template <typename T>
void adam_update(ParamStore<T>& params, const GradMap<T>& grads, const AdamConfig& cfg) {
    for (const auto& [name, g] : grads) {
        auto& e = params.entry_mut(name);
        if (e.value.shape() != g.shape()) throw ShapeError("adam_update", {e.value.shape(), g.shape()}, "gradient for " + name);
        e.step += 1;
        const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(e.step));
        const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(e.step));
        const T b1 = static_cast<T>(cfg.beta1), b2 = static_cast<T>(cfg.beta2);
        for (std::size_t i = 0; i < g.size(); ++i) {
            e.m[i] = b1 * e.m[i] + (T(1) - b1) * g[i];
            e.v[i] = b2 * e.v[i] + (T(1) - b2) * g[i] * g[i];
            const double mhat = static_cast<double>(e.m[i]) / c1;
            const double vhat = static_cast<double>(e.v[i]) / c2;
            e.value[i] -= static_cast<T>(cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps));
        }
    }
}

template double global_norm(const GradMap<float>&);
template double global_norm(const GradMap<double>&);
template GradMap<float> global_norm_clip(GradMap<float>, double);
template GradMap<double> global_norm_clip(GradMap<double>, double);
template void adam_update(ParamStore<float>&, const GradMap<float>&, const AdamConfig&);
template void adam_update(ParamStore<double>&, const GradMap<double>&, const AdamConfig&);

}  // namespace mzu
