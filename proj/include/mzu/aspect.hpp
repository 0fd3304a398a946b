#pragma once

#include <functional>
#include <optional>
#include <vector>

#include "mzu/data.hpp"
#include "mzu/training.hpp"

namespace mzu {

/// Bidirectional sentence encoder plus the aspect head: "embed" (word
/// vectors, shared with the aspect), "fwd/", "bwd/" cells and "head/".
struct AspectModelConfig {
    CellConfig cell;
    std::size_t vocab = 0;

    void validate() const;
};

template <typename T>
void init_aspect_model(ParamStore<T>& store, const AspectModelConfig& cfg, Rng& rng);

std::size_t aspect_model_param_count(const AspectModelConfig& cfg);

template <typename T>
struct AspectForward {
    AspectPrediction<T> prediction;
    std::optional<Var<T>> dzone_sum;
    std::size_t dzone_terms = 0;
};

template <typename T>
AspectForward<T> aspect_forward(Tape<T>& tape, const ParamStore<T>& store, const AspectModelConfig& cfg,
                                const AspectExample& ex, StepContext ctx);

struct AspectTrainConfig {
    AdamConfig adam;
    std::size_t batch = 32;
    std::size_t epochs = 10;
    double clip = 5.0;
    double lambda = 1.0;
    std::uint32_t seed = 1;

    void validate() const;
};

struct AspectEpoch {
    std::size_t epoch = 0;
    double train_loss = 0;
    double dev_accuracy = 0;
};

struct AspectTrainResult {
    ParamStore<float> params;  // best-by-dev parameters
    std::vector<AspectEpoch> epochs;
    double best_dev_accuracy = 0;
};

double aspect_accuracy(const ParamStore<float>& params, const AspectModelConfig& cfg, const AspectDataset& ds);

AspectTrainResult train_aspect(const AspectDataset& train, const AspectDataset& dev, const AspectModelConfig& cfg,
                               const AspectTrainConfig& tc,
                               const std::function<void(const AspectEpoch&)>& progress = {});

}  // namespace mzu
