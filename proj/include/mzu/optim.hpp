#pragma once

#include "mzu/param_store.hpp"

namespace mzu {

struct AdamConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

template <typename T>
double global_norm(const GradMap<T>& grads);

/// Rescales every gradient by max_norm / g when the global L2 norm g exceeds
/// max_norm; otherwise returns the map unchanged.
template <typename T>
GradMap<T> global_norm_clip(GradMap<T> grads, double max_norm);

/// One bias-corrected Adam step over every parameter that has a gradient.
/// Each touched parameter's step counter advances by one.
template <typename T>
void adam_update(ParamStore<T>& params, const GradMap<T>& grads, const AdamConfig& cfg);

}  // namespace mzu
