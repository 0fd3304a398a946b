#include "mzu/aspect.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace mzu {

void AspectModelConfig::validate() const {
    cell.validate();
    if (vocab == 0) throw ConfigError("vocab: must be positive");
}

void AspectTrainConfig::validate() const {
    if (!(adam.lr > 0)) throw ConfigError("lr: must be positive");
    if (batch == 0) throw ConfigError("batch: must be positive");
    if (!(clip > 0)) throw ConfigError("clip: must be positive");
}

template <typename T>
void init_aspect_model(ParamStore<T>& store, const AspectModelConfig& cfg, Rng& rng) {
    cfg.validate();
    store.create_normal("embed", {cfg.vocab, cfg.cell.d_x()}, 0.1, rng);
    init_cell(store, "fwd/", cfg.cell, rng);
    init_cell(store, "bwd/", cfg.cell, rng);
    init_aspect_head(store, "head/", 2 * cfg.cell.d_h(), cfg.cell.d_x(), rng);
}

std::size_t aspect_model_param_count(const AspectModelConfig& cfg) {
    return cfg.vocab * cfg.cell.d_x() + 2 * cell_param_count(cfg.cell) +
           (2 * cfg.cell.d_h() + cfg.cell.d_x() + 1) * kNumAspectLabels;
}

template <typename T>
AspectForward<T> aspect_forward(Tape<T>& tape, const ParamStore<T>& store, const AspectModelConfig& cfg,
                                const AspectExample& ex, StepContext ctx) {
    std::vector<Var<T>> zone_sets;
    auto states = bidirectional_encode(tape, store, "fwd/", "bwd/", cfg.cell, "embed", std::span<const int>(ex.tokens),
                                       ctx, &zone_sets);
    Var<T> aspect = aspect_embedding(tape, store, "embed", std::span<const int>(ex.aspect));
    AspectForward<T> out{classify_aspect(states, aspect, store, "head/"), std::nullopt, zone_sets.size()};
    for (const auto& z : zone_sets) {
        Var<T> d = ops::sum(zone_disagreement(z));
        out.dzone_sum = out.dzone_sum ? ops::add(*out.dzone_sum, d) : d;
    }
    return out;
}

double aspect_accuracy(const ParamStore<float>& params, const AspectModelConfig& cfg, const AspectDataset& ds) {
    if (ds.examples.empty()) return 0.0;
    std::size_t correct = 0;
    for (const auto& ex : ds.examples) {
        Tape<float> tape;
        tape.set_recording(false);
        auto f = aspect_forward(tape, params, cfg, ex, StepContext{});
        const auto& p = f.prediction.probs.value();
        std::size_t best = 0;
        for (std::size_t k = 1; k < p.size(); ++k)
            if (p[k] > p[best]) best = k;
        if (best == static_cast<std::size_t>(ex.label)) ++correct;
    }
    return static_cast<double>(correct) / static_cast<double>(ds.examples.size());
}

AspectTrainResult train_aspect(const AspectDataset& train, const AspectDataset& dev, const AspectModelConfig& cfg,
                               const AspectTrainConfig& tc, const std::function<void(const AspectEpoch&)>& progress) {
    cfg.validate();
    tc.validate();
    if (train.examples.empty()) throw DataError("aspect training set is empty");
    Rng rng(tc.seed);
    ParamStore<float> params;
    init_aspect_model(params, cfg, rng);
    AspectTrainResult result;
    result.params = params;
    result.best_dev_accuracy = -1;

    std::vector<std::size_t> order(train.examples.size());
    for (std::size_t epoch = 1; epoch <= tc.epochs; ++epoch) {
        std::iota(order.begin(), order.end(), 0);
        for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng() % i]);
        double loss_sum = 0;
        for (std::size_t b0 = 0; b0 < order.size(); b0 += tc.batch) {
            const std::size_t b1 = std::min(order.size(), b0 + tc.batch);
            Tape<float> tape;
            StepContext ctx{true, &rng};
            std::optional<Var<float>> total;
            for (std::size_t i = b0; i < b1; ++i) {
                const auto& ex = train.examples[order[i]];
                auto f = aspect_forward(tape, params, cfg, ex, ctx);
                const int label[1] = {static_cast<int>(ex.label)};
                Var<float> nll = ops::cross_entropy_sum(f.prediction.logits, std::span<const int>(label));
                Var<float> obj = combined_objective(nll, f.dzone_sum, tc.lambda);
                total = total ? ops::add(*total, obj) : obj;
            }
            Var<float> loss = ops::scale(*total, 1.0 / static_cast<double>(b1 - b0));
            const double lv = loss.value().item();
            if (!std::isfinite(lv)) throw NumericError("non-finite aspect loss in epoch " + std::to_string(epoch));
            loss_sum += lv * static_cast<double>(b1 - b0);
            auto grads = global_norm_clip(tape.gradients(loss, params), tc.clip);
            adam_update(params, grads, tc.adam);
        }
        AspectEpoch e{epoch, loss_sum / static_cast<double>(order.size()), aspect_accuracy(params, cfg, dev)};
        result.epochs.push_back(e);
        if (e.dev_accuracy > result.best_dev_accuracy) {
            result.best_dev_accuracy = e.dev_accuracy;
            result.params = params;
        }
        if (progress) progress(e);
    }
    if (result.best_dev_accuracy < 0) result.best_dev_accuracy = 0;
    return result;
}

template void init_aspect_model(ParamStore<float>&, const AspectModelConfig&, Rng&);
template void init_aspect_model(ParamStore<double>&, const AspectModelConfig&, Rng&);
template AspectForward<float> aspect_forward(Tape<float>&, const ParamStore<float>&, const AspectModelConfig&,
                                             const AspectExample&, StepContext);
template AspectForward<double> aspect_forward(Tape<double>&, const ParamStore<double>&, const AspectModelConfig&,
                                              const AspectExample&, StepContext);

}  // namespace mzu
