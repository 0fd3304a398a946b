#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "mzu/cells.hpp"

namespace mzu {

/// Character language model: embedding table "embed", a recurrent block
/// under "rnn/" and a softmax layer "out/w", "out/b".
struct ModelConfig {
    CellConfig cell;
    std::size_t vocab = 0;

    void validate() const;
};

template <typename T>
void init_language_model(ParamStore<T>& store, const ModelConfig& cfg, Rng& rng);

std::size_t language_model_param_count(const ModelConfig& cfg);

inline const std::string kRnnPrefix = "rnn/";

template <typename T>
struct ChunkOutput {
    Var<T> nll_sum;                     // summed cross-entropy, nats
    std::optional<Var<T>> dzone_sum;    // summed D_zone over rows, steps and M-functions
    std::size_t dzone_terms = 0;        // number of D_zone values in dzone_sum
    std::size_t m_functions = 0;        // M-functions per time step
    std::size_t tokens = 0;
    Var<T> final_h;                     // [B, d_h]
    // traces[t][depth], filled only when requested.
    std::vector<std::vector<StepTrace<T>>> traces;
};

/// Runs `steps` time steps over `batch` streams. `inputs` and `targets` are
/// stream-major (element (b, t) at b * steps + t); `h0` is [batch, d_h].
template <typename T>
ChunkOutput<T> lm_forward(Tape<T>& tape, const ParamStore<T>& store, const ModelConfig& cfg,
                          std::span<const int> inputs, std::span<const int> targets, std::size_t batch,
                          std::size_t steps, Var<T> h0, StepContext ctx, bool keep_traces = false);

/// Minimized training loss per token:
///   (nll_sum - lambda * dzone_sum) / tokens
/// With `dzone_mean` the disagreement sum is first divided by the number of
/// M-functions per step, making it a per-token mean.
template <typename T>
Var<T> lm_objective(const ChunkOutput<T>& out, double lambda, bool dzone_mean);

}  // namespace mzu
