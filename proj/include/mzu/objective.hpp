#pragma once

#include <array>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "mzu/ops.hpp"

namespace mzu {

/// Per-token terms of a training objective, in nats.
///
/// Sign convention: the model maximizes likelihood + lambda * sum D_zone.
/// D_zone is itself in [-1, 0], so the minimized form is
///   combined = task_loss - lambda * disagreement_sum
/// and a positive lambda pushes zones apart.
struct LossBreakdown {
    double task_loss = 0;
    double disagreement_sum = 0;
    double lambda = 0;
    double combined = 0;
};

double combined_objective(double task_loss, double disagreement_sum, double lambda);

template <typename T>
Var<T> combined_objective(Var<T> task_loss, std::optional<Var<T>> disagreement_sum, double lambda);

/// Mean cross-entropy in nats per character of targets under row logits.
template <typename T>
Var<T> lm_loss(Var<T> logits, std::span<const int> targets);

/// Bits per character from nats per character.
double bpc(double nats_per_char);

enum class AspectLabel { kPositive = 0, kNegative = 1, kNeutral = 2, kConflict = 3 };
inline constexpr std::size_t kNumAspectLabels = 4;

std::string to_string(AspectLabel l);
std::optional<AspectLabel> parse_aspect_label(const std::string& s);

/// Mean of the embedding rows of the aspect words, [1, d_x].
template <typename T>
Var<T> aspect_embedding(Tape<T>& tape, const ParamStore<T>& store, const std::string& embedding,
                        std::span<const int> aspect_ids);

template <typename T>
struct AspectPrediction {
    Var<T> logits;  // [1, 4]
    Var<T> probs;   // [1, 4], softmax of logits
};

/// Mean-pools sentence states, concatenates the aspect embedding and applies
/// the `<prefix>w`, `<prefix>b` affine map followed by softmax.
template <typename T>
AspectPrediction<T> classify_aspect(const std::vector<Var<T>>& states, Var<T> aspect, const ParamStore<T>& store,
                                    const std::string& prefix);

template <typename T>
void init_aspect_head(ParamStore<T>& store, const std::string& prefix, std::size_t state_width, std::size_t d_x, Rng& rng);

}  // namespace mzu
