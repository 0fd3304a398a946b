#include "mzu/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace mzu {

namespace {

double evaluate(const LossBuilder& f, const ParamStore<double>& params) {
    Tape<double> tape;
    tape.set_recording(false);
    const double v = f(tape, params).value().item();
    if (!std::isfinite(v)) throw std::domain_error("gradient_check: loss is not finite");
    return v;
}

}  // namespace

GradCheckReport gradient_check(const LossBuilder& f, ParamStore<double>& params, const GradCheckOptions& opt) {
    GradMap<double> analytic;
    {
        Tape<double> tape;
        Var<double> loss = f(tape, params);
        if (!std::isfinite(loss.value().item())) throw std::domain_error("gradient_check: loss is not finite");
        analytic = tape.gradients(loss, params);
    }

    Rng rng(opt.seed);
    GradCheckReport report;
    for (const auto& name : params.names()) {
        Tensor<double>& value = params.get_mut(name);
        std::vector<std::size_t> coords(value.size());
        std::iota(coords.begin(), coords.end(), std::size_t{0});
        if (coords.size() > opt.max_coords_per_param) {
            // Partial Fisher-Yates: a uniform sample without replacement.
            for (std::size_t i = 0; i < opt.max_coords_per_param; ++i) {
                const std::size_t j = i + static_cast<std::size_t>(uniform01(rng) * static_cast<double>(coords.size() - i));
                std::swap(coords[i], coords[std::min(j, coords.size() - 1)]);
            }
            coords.resize(opt.max_coords_per_param);
        }
        for (std::size_t idx : coords) {
            const double orig = value[idx];
            auto at = [&](double offset) {
                value[idx] = orig + offset;
                return evaluate(f, params);
            };
            const double h = opt.eps;
            const double d1 = at(h) - at(-h);
            GradCheckEntry e;
            e.param = name;
            e.index = idx;
            e.numeric = opt.fourth_order ? (8.0 * d1 - (at(2 * h) - at(-2 * h))) / (12.0 * h) : d1 / (2.0 * h);
            value[idx] = orig;
            e.analytic = analytic.at(name)[idx];
            e.rel_error = std::abs(e.analytic - e.numeric) / std::max({std::abs(e.analytic), std::abs(e.numeric), opt.floor});
            if (e.rel_error > report.max_rel_error || report.coords_checked == 0) {
                report.max_rel_error = std::max(report.max_rel_error, e.rel_error);
                report.worst = e;
            }
            report.entries.push_back(e);
            ++report.coords_checked;
        }
    }
    report.pass = report.max_rel_error < opt.tol;
    return report;
}

}  // namespace mzu
