#include "mzu/objective.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <numbers>

namespace mzu {

double combined_objective(double task_loss, double disagreement_sum, double lambda) {
    return task_loss - lambda * disagreement_sum;
}

template <typename T>
Var<T> combined_objective(Var<T> task_loss, std::optional<Var<T>> disagreement_sum, double lambda) {
    if (!disagreement_sum || lambda == 0.0) return task_loss;
    return ops::sub(task_loss, ops::scale(*disagreement_sum, lambda));
}

template <typename T>
Var<T> lm_loss(Var<T> logits, std::span<const int> targets) {
    if (targets.size() != logits.value().rows())
        throw ShapeError("lm_loss", {logits.shape(), Shape{targets.size()}}, "targets not aligned with logits");
    return ops::scale(ops::cross_entropy_sum(logits, targets), 1.0 / static_cast<double>(targets.size()));
}

double bpc(double nats_per_char) { return nats_per_char / std::numbers::ln2; }

std::string to_string(AspectLabel l) {
    switch (l) {
        case AspectLabel::kPositive: return "positive";
        case AspectLabel::kNegative: return "negative";
        case AspectLabel::kNeutral: return "neutral";
        case AspectLabel::kConflict: return "conflict";
    }
    return "?";
}

std::optional<AspectLabel> parse_aspect_label(const std::string& s) {
    std::string l(s);
    std::transform(l.begin(), l.end(), l.begin(), [](unsigned char c) { return std::tolower(c); });
    if (l == "positive") return AspectLabel::kPositive;
    if (l == "negative") return AspectLabel::kNegative;
    if (l == "neutral") return AspectLabel::kNeutral;
    if (l == "conflict") return AspectLabel::kConflict;
    return std::nullopt;
}

template <typename T>
Var<T> aspect_embedding(Tape<T>& tape, const ParamStore<T>& store, const std::string& embedding,
                        std::span<const int> aspect_ids) {
    if (aspect_ids.empty()) throw std::invalid_argument("aspect_embedding: aspect has no words");
    return ops::mean_over_rows(ops::embedding(tape.param(store, embedding), aspect_ids));
}

template <typename T>
AspectPrediction<T> classify_aspect(const std::vector<Var<T>>& states, Var<T> aspect, const ParamStore<T>& store,
                                    const std::string& prefix) {
    if (states.empty()) throw std::invalid_argument("classify_aspect: empty sentence");
    Tape<T>& tape = *aspect.tape;
    Var<T> sentence = ops::mean_over_rows(ops::concat_rows<T>(states));
    const std::vector<Var<T>> parts{sentence, aspect};
    Var<T> features = ops::concat_cols<T>(parts);
    Var<T> logits = ops::add_bias(ops::matmul(features, tape.param(store, prefix + "w")), tape.param(store, prefix + "b"));
    return {logits, ops::softmax_rows(logits)};
}

template <typename T>
void init_aspect_head(ParamStore<T>& store, const std::string& prefix, std::size_t state_width, std::size_t d_x, Rng& rng) {
    store.create_glorot(prefix + "w", state_width + d_x, kNumAspectLabels, rng);
    store.create_zeros(prefix + "b", {1, kNumAspectLabels});
}

#define MZU_INSTANTIATE_OBJECTIVE(T)                                                                               \
    template Var<T> combined_objective(Var<T>, std::optional<Var<T>>, double);                                     \
    template Var<T> lm_loss(Var<T>, std::span<const int>);                                                         \
    template Var<T> aspect_embedding(Tape<T>&, const ParamStore<T>&, const std::string&, std::span<const int>);   \
    template AspectPrediction<T> classify_aspect(const std::vector<Var<T>>&, Var<T>, const ParamStore<T>&,        \
                                                 const std::string&);                                              \
    template void init_aspect_head(ParamStore<T>&, const std::string&, std::size_t, std::size_t, Rng&);

MZU_INSTANTIATE_OBJECTIVE(float)
MZU_INSTANTIATE_OBJECTIVE(double)

}  // namespace mzu
