#pragma once

#include <functional>
#include <string>
#include <vector>

#include "mzu/param_store.hpp"
#include "mzu/tape.hpp"

namespace mzu {

// Builds the scalar loss for the given parameters on the given tape.
using LossBuilder = std::function<Var<double>(Tape<double>&, const ParamStore<double>&)>;

struct GradCheckOptions {
    double eps = 1e-5;
    double tol = 1e-4;
    std::size_t max_coords_per_param = 200;
    std::uint32_t seed = 1234;
    // Relative error is |a - n| / max(|a|, |n|, floor).
    double floor = 1e-7;
    // Five-point stencil (f(-2h) - 8f(-h) + 8f(h) - f(2h)) / 12h, for losses
    // curved enough that the three-point truncation error shows.
    bool fourth_order = false;
};

struct GradCheckEntry {
    std::string param;
    std::size_t index = 0;
    double analytic = 0;
    double numeric = 0;
    double rel_error = 0;
};

struct GradCheckReport {
    double max_rel_error = 0;
    std::size_t coords_checked = 0;
    GradCheckEntry worst;
    std::vector<GradCheckEntry> entries;
    bool pass = false;
};

/// Central-difference check (f(p+e) - f(p-e)) / 2e of the reverse-mode
/// gradient at up to max_coords_per_param coordinates per parameter.
/// Throws std::domain_error if f is not finite.
GradCheckReport gradient_check(const LossBuilder& f, ParamStore<double>& params, const GradCheckOptions& opt = {});

}  // namespace mzu
