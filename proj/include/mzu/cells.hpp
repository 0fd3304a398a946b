#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "mzu/zones.hpp"

namespace mzu {

enum class CellKind { kGru, kMzu };
enum class Ablation { kNone, kRegularGate, kRegularTrans };
enum class Direction { kForward, kBackward };

std::string to_string(CellKind k);
std::string to_string(Ablation a);
CellKind parse_cell_kind(const std::string& s);
Ablation parse_ablation(const std::string& s);

/// One recurrent block: an input cell followed by `transition_depth`
/// state-only cells. `m` carries d_x and d_h for every kind; its zone fields
/// only matter for MZU cells.
struct CellConfig {
    CellKind kind = CellKind::kMzu;
    MFunctionConfig m;
    std::size_t transition_depth = 1;
    bool share_depth_params = false;
    Ablation ablation = Ablation::kNone;
    double dropout = 0.0;
    bool layer_norm = true;

    std::size_t d_x() const { return m.d_x; }
    std::size_t d_h() const { return m.d_h; }
    void validate() const;
};

// Training mode draws fresh dropout masks from rng; evaluation never does.
struct StepContext {
    bool training = false;
    Rng* rng = nullptr;
};

template <typename T>
struct StepTrace {
    Var<T> h;           // output state
    Var<T> gate;        // g, strictly inside (0, 1)
    Var<T> candidate;   // tanh output before dropout
    Var<T> cand_pre;    // transformation output before layer norm
    std::optional<MFunctionResult<T>> mh;
    std::optional<MFunctionResult<T>> mg;
    // Generated zones of every M-function run by this cell.
    std::vector<Var<T>> zone_sets;
};

/// Parameter prefix of the cell at `depth` (0 = input cell).
std::string cell_prefix(const std::string& prefix, const CellConfig& cfg, std::size_t depth);

template <typename T>
void init_cell(ParamStore<T>& store, const std::string& prefix, const CellConfig& cfg, Rng& rng);

std::size_t cell_param_count(const CellConfig& cfg);

/// (1 - g) * h_prev + g * candidate.
template <typename T>
Var<T> gated_update(Var<T> h_prev, Var<T> gate, Var<T> candidate);

/// MZU (or GRU, per cfg.kind) cell at `depth`. depth 0 consumes x; deeper
/// cells are transition cells and must not be given an input.
template <typename T>
StepTrace<T> mzu_step(const ParamStore<T>& store, const std::string& prefix, const CellConfig& cfg, std::size_t depth,
                      std::optional<Var<T>> x, Var<T> h_prev, StepContext ctx);

/// Transition cell: identical to mzu_step with a zero-width input.
template <typename T>
StepTrace<T> tmzu_step(const ParamStore<T>& store, const std::string& prefix, const CellConfig& cfg, std::size_t depth,
                       Var<T> h_in, StepContext ctx);

/// Gated recurrent unit with layer norm on the gate and candidate
/// pre-activations and dropout on the candidate.
template <typename T>
StepTrace<T> gru_step(const ParamStore<T>& store, const std::string& prefix, const CellConfig& cfg, std::size_t depth,
                      std::optional<Var<T>> x, Var<T> h_prev, StepContext ctx);

/// The input cell followed by every transition cell; one trace per depth.
template <typename T>
std::vector<StepTrace<T>> deep_transition_step(const ParamStore<T>& store, const std::string& prefix,
                                               const CellConfig& cfg, Var<T> x, Var<T> h_prev, StepContext ctx);

/// Embeds `tokens` with the [vocab, d_x] table named `embedding` and runs the
/// block from a zero state. Returns one [1, d_h] state per position, in
/// sentence order for both directions.
template <typename T>
std::vector<Var<T>> encode_sequence(Tape<T>& tape, const ParamStore<T>& store, const std::string& prefix,
                                    const CellConfig& cfg, const std::string& embedding, std::span<const int> tokens,
                                    Direction dir, StepContext ctx, std::vector<Var<T>>* zone_sets = nullptr);

/// Per-position [1, 2*d_h] concatenation of forward and backward states.
template <typename T>
std::vector<Var<T>> bidirectional_encode(Tape<T>& tape, const ParamStore<T>& store, const std::string& fwd_prefix,
                                         const std::string& bwd_prefix, const CellConfig& cfg,
                                         const std::string& embedding, std::span<const int> tokens, StepContext ctx,
                                         std::vector<Var<T>>* zone_sets = nullptr);

}  // namespace mzu
