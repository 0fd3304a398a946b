#include "mzu/language_model.hpp"

#include "mzu/objective.hpp"

namespace mzu {

void ModelConfig::validate() const {
    cell.validate();
    if (vocab == 0) throw ConfigError("vocab: must be positive");
}

template <typename T>
void init_language_model(ParamStore<T>& store, const ModelConfig& cfg, Rng& rng) {
    cfg.validate();
    store.create_normal("embed", {cfg.vocab, cfg.cell.d_x()}, 0.02, rng);
    init_cell(store, kRnnPrefix, cfg.cell, rng);
    store.create_glorot("out/w", cfg.cell.d_h(), cfg.vocab, rng);
    store.create_zeros("out/b", {1, cfg.vocab});
}

std::size_t language_model_param_count(const ModelConfig& cfg) {
    return cfg.vocab * cfg.cell.d_x() + cell_param_count(cfg.cell) + cfg.cell.d_h() * cfg.vocab + cfg.vocab;
}

template <typename T>
ChunkOutput<T> lm_forward(Tape<T>& tape, const ParamStore<T>& store, const ModelConfig& cfg,
                          std::span<const int> inputs, std::span<const int> targets, std::size_t batch,
                          std::size_t steps, Var<T> h0, StepContext ctx, bool keep_traces) {
    const std::size_t n = batch * steps;
    if (inputs.size() != n || targets.size() != n)
        throw ShapeError("lm_forward", {Shape{inputs.size()}, Shape{targets.size()}, Shape{batch, steps}},
                         "inputs and targets must hold batch*steps ids");
    if (h0.shape() != Shape{batch, cfg.cell.d_h()})
        throw ShapeError("lm_forward", {h0.shape(), Shape{batch, cfg.cell.d_h()}}, "initial state");

    ChunkOutput<T> out;
    out.tokens = n;
    Var<T> table = tape.param(store, "embed");
    std::vector<Var<T>> states;
    states.reserve(steps);
    std::vector<int> column(batch), time_major_targets(n);
    std::vector<Var<T>> dz_terms;
    Var<T> h = h0;
    for (std::size_t t = 0; t < steps; ++t) {
        for (std::size_t b = 0; b < batch; ++b) {
            column[b] = inputs[b * steps + t];
            time_major_targets[t * batch + b] = targets[b * steps + t];
        }
        Var<T> x = ops::embedding(table, std::span<const int>(column));
        auto traces = deep_transition_step(store, kRnnPrefix, cfg.cell, x, h, ctx);
        h = traces.back().h;
        states.push_back(h);
        std::size_t m = 0;
        for (const auto& tr : traces) {
            for (const auto& z : tr.zone_sets) {
                dz_terms.push_back(ops::sum(zone_disagreement(z)));
                ++m;
            }
        }
        out.m_functions = m;
        out.dzone_terms += m * batch;
        if (keep_traces) out.traces.push_back(std::move(traces));
    }
    Var<T> all = ops::concat_rows<T>(states);
    Var<T> logits = ops::add_bias(ops::matmul(all, tape.param(store, "out/w")), tape.param(store, "out/b"));
    out.nll_sum = ops::cross_entropy_sum(logits, std::span<const int>(time_major_targets));
    if (!dz_terms.empty()) {
        Var<T> acc = dz_terms.front();
        for (std::size_t i = 1; i < dz_terms.size(); ++i) acc = ops::add(acc, dz_terms[i]);
        out.dzone_sum = acc;
    }
    out.final_h = h;
    return out;
}

template <typename T>
Var<T> lm_objective(const ChunkOutput<T>& out, double lambda, bool dzone_mean) {
    std::optional<Var<T>> dz = out.dzone_sum;
    if (dz && dzone_mean && out.m_functions > 0) dz = ops::scale(*dz, 1.0 / static_cast<double>(out.m_functions));
    return ops::scale(combined_objective(out.nll_sum, dz, lambda), 1.0 / static_cast<double>(out.tokens));
}

#define MZU_INSTANTIATE_LM(T)                                                                                      \
    template void init_language_model(ParamStore<T>&, const ModelConfig&, Rng&);                                   \
    template ChunkOutput<T> lm_forward(Tape<T>&, const ParamStore<T>&, const ModelConfig&, std::span<const int>,   \
                                       std::span<const int>, std::size_t, std::size_t, Var<T>, StepContext, bool); \
    template Var<T> lm_objective(const ChunkOutput<T>&, double, bool);

MZU_INSTANTIATE_LM(float)
MZU_INSTANTIATE_LM(double)

}  // namespace mzu
