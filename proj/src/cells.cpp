#include "mzu/cells.hpp"

#include <algorithm>

namespace mzu {

std::string to_string(CellKind k) { return k == CellKind::kGru ? "gru" : "mzu"; }

std::string to_string(Ablation a) {
    switch (a) {
        case Ablation::kNone: return "none";
        case Ablation::kRegularGate: return "regular_gate";
        case Ablation::kRegularTrans: return "regular_trans";
    }
    return "?";
}

CellKind parse_cell_kind(const std::string& s) {
    if (s == "gru") return CellKind::kGru;
    if (s == "mzu") return CellKind::kMzu;
    throw ConfigError("model: expected mzu or gru, got '" + s + "'");
}

Ablation parse_ablation(const std::string& s) {
    if (s == "none") return Ablation::kNone;
    if (s == "regular_gate" || s == "regular-gate") return Ablation::kRegularGate;
    if (s == "regular_trans" || s == "regular-trans") return Ablation::kRegularTrans;
    throw ConfigError("ablation: expected none, regular_gate or regular_trans, got '" + s + "'");
}

void CellConfig::validate() const {
    if (m.d_h == 0) throw ConfigError("hidden: state width must be positive");
    if (!(dropout >= 0.0 && dropout < 1.0)) throw ConfigError("dropout: must lie in [0, 1)");
    if (kind == CellKind::kGru) {
        if (ablation != Ablation::kNone) throw ConfigError("ablation: only valid for the mzu model");
        return;
    }
    m.validate();
}

namespace {

std::string depth_prefix(const std::string& prefix, std::size_t depth) { return prefix + "cell" + std::to_string(depth) + "/"; }

// Config whose input width matches the parameters used at `depth`.
MFunctionConfig weights_config(const CellConfig& cfg, std::size_t depth) {
    MFunctionConfig m = cfg.m;
    if (depth > 0 && !cfg.share_depth_params) m.d_x = 0;
    return m;
}

// [x, h] W + b, where an absent x with a nonzero input width means the zero
// vector (only the state rows of W take part).
template <typename T>
Var<T> affine(const ParamStore<T>& store, const std::string& w_name, const std::string& b_name, std::size_t d_x,
              std::optional<Var<T>> x, Var<T> h) {
    Tape<T>& tape = *h.tape;
    Var<T> w = tape.param(store, w_name);
    Var<T> y;
    if (x) {
        const std::vector<Var<T>> xh{*x, h};
        y = ops::matmul(ops::concat_cols<T>(xh), w);
    } else if (d_x > 0) {
        y = ops::matmul(h, ops::slice_rows(w, d_x, w.value().dim(0)));
    } else {
        y = ops::matmul(h, w);
    }
    return ops::add_bias(y, tape.param(store, b_name));
}

template <typename T>
Var<T> maybe_layer_norm(const ParamStore<T>& store, const CellConfig& cfg, const std::string& name, Var<T> v) {
    if (!cfg.layer_norm) return v;
    Tape<T>& tape = *v.tape;
    return ops::layer_norm_rows(v, tape.param(store, name + "/gain"), tape.param(store, name + "/bias"));
}

template <typename T>
Var<T> apply_dropout(const CellConfig& cfg, Var<T> v, StepContext ctx) {
    if (!ctx.training || cfg.dropout == 0.0) return v;
    if (!ctx.rng) throw std::invalid_argument("training step needs an rng for dropout");
    return ops::dropout(v, ops::dropout_mask<T>(v.shape(), cfg.dropout, *ctx.rng, true));
}

template <typename T>
void init_layer_norm(ParamStore<T>& store, const std::string& name, std::size_t d) {
    store.create_filled(name + "/gain", {1, d}, T(1));
    store.create_zeros(name + "/bias", {1, d});
}

template <typename T>
void init_affine(ParamStore<T>& store, const std::string& name, std::size_t in, std::size_t out, Rng& rng) {
    store.create_glorot(name + "/w", in, out, rng);
    store.create_zeros(name + "/b", {1, out});
}

}  // namespace

std::string cell_prefix(const std::string& prefix, const CellConfig& cfg, std::size_t depth) {
    return depth_prefix(prefix, depth > 0 && cfg.share_depth_params ? 0 : depth);
}

template <typename T>
void init_cell(ParamStore<T>& store, const std::string& prefix, const CellConfig& cfg, Rng& rng) {
    cfg.validate();
    const std::size_t d_h = cfg.d_h();
    for (std::size_t depth = 0; depth <= cfg.transition_depth; ++depth) {
        const std::string own = depth_prefix(prefix, depth);
        if (depth == 0 || !cfg.share_depth_params) {
            const MFunctionConfig m = weights_config(cfg, depth);
            const std::size_t in = m.d_x + d_h;
            if (cfg.kind == CellKind::kGru) {
                init_affine(store, own + "gru/z", in, d_h, rng);
                init_affine(store, own + "gru/r", in, d_h, rng);
                init_affine(store, own + "gru/h", in, d_h, rng);
            } else {
                if (cfg.ablation == Ablation::kRegularTrans) init_affine(store, own + "reg_h", in, d_h, rng);
                else init_m_function(store, own + "mh/", m, rng);
                if (cfg.ablation == Ablation::kRegularGate) init_affine(store, own + "reg_g", in, d_h, rng);
                else init_m_function(store, own + "mg/", m, rng);
            }
        }
        if (cfg.layer_norm) {
            if (cfg.kind == CellKind::kGru) {
                for (const char* n : {"ln_z", "ln_r", "ln_h"}) init_layer_norm(store, own + n, d_h);
            } else {
                init_layer_norm(store, own + "ln_h", d_h);
                init_layer_norm(store, own + "ln_g", d_h);
            }
        }
    }
}

std::size_t cell_param_count(const CellConfig& cfg) {
    const std::size_t d_h = cfg.d_h();
    std::size_t n = 0;
    for (std::size_t depth = 0; depth <= cfg.transition_depth; ++depth) {
        if (depth == 0 || !cfg.share_depth_params) {
            const MFunctionConfig m = weights_config(cfg, depth);
            const std::size_t affine_n = (m.d_x + d_h) * d_h + d_h;
            if (cfg.kind == CellKind::kGru) {
                n += 3 * affine_n;
            } else {
                n += cfg.ablation == Ablation::kRegularTrans ? affine_n : m_function_param_count(m);
                n += cfg.ablation == Ablation::kRegularGate ? affine_n : m_function_param_count(m);
            }
        }
        if (cfg.layer_norm) n += (cfg.kind == CellKind::kGru ? 3 : 2) * 2 * d_h;
    }
    return n;
}

template <typename T>
Var<T> gated_update(Var<T> h_prev, Var<T> gate, Var<T> candidate) {
    Var<T> keep = ops::add_scalar(ops::scale(gate, -1.0), 1.0);
    return ops::add(ops::mul(keep, h_prev), ops::mul(gate, candidate));
}

template <typename T>
StepTrace<T> mzu_step(const ParamStore<T>& store, const std::string& prefix, const CellConfig& cfg, std::size_t depth,
                      std::optional<Var<T>> x, Var<T> h_prev, StepContext ctx) {
    if (cfg.kind == CellKind::kGru) return gru_step(store, prefix, cfg, depth, x, h_prev, ctx);
    if (depth > 0 && x) throw ShapeError("mzu_step", {x->shape()}, "transition cells take no input");
    if (depth == 0 && !x) throw ShapeError("mzu_step", {h_prev.shape()}, "input cell needs an input");
    if (h_prev.value().cols() != cfg.d_h()) throw ShapeError("mzu_step", {h_prev.shape()}, "state width differs from d_h");

    const std::string wp = cell_prefix(prefix, cfg, depth);
    const std::string np = depth_prefix(prefix, depth);
    const MFunctionConfig m = weights_config(cfg, depth);

    StepTrace<T> t;
    if (cfg.ablation == Ablation::kRegularTrans) {
        t.cand_pre = affine(store, wp + "reg_h/w", wp + "reg_h/b", m.d_x, x, h_prev);
    } else {
        t.mh = m_function(store, wp + "mh/", m, x, h_prev);
        t.cand_pre = t.mh->out;
        t.zone_sets.push_back(t.mh->zones);
    }
    Var<T> gate_pre;
    if (cfg.ablation == Ablation::kRegularGate) {
        gate_pre = affine(store, wp + "reg_g/w", wp + "reg_g/b", m.d_x, x, h_prev);
    } else {
        t.mg = m_function(store, wp + "mg/", m, x, h_prev);
        gate_pre = t.mg->out;
        t.zone_sets.push_back(t.mg->zones);
    }
    t.candidate = ops::tanh(maybe_layer_norm(store, cfg, np + "ln_h", t.cand_pre));
    t.gate = ops::sigmoid(maybe_layer_norm(store, cfg, np + "ln_g", gate_pre));
    t.h = gated_update(h_prev, t.gate, apply_dropout(cfg, t.candidate, ctx));
    return t;
}

template <typename T>
StepTrace<T> tmzu_step(const ParamStore<T>& store, const std::string& prefix, const CellConfig& cfg, std::size_t depth,
                       Var<T> h_in, StepContext ctx) {
    if (depth == 0) throw std::invalid_argument("tmzu_step: depth 0 is the input cell");
    return mzu_step(store, prefix, cfg, depth, std::optional<Var<T>>{}, h_in, ctx);
}

template <typename T>
StepTrace<T> gru_step(const ParamStore<T>& store, const std::string& prefix, const CellConfig& cfg, std::size_t depth,
                      std::optional<Var<T>> x, Var<T> h_prev, StepContext ctx) {
    if (depth > 0 && x) throw ShapeError("gru_step", {x->shape()}, "transition cells take no input");
    if (depth == 0 && !x) throw ShapeError("gru_step", {h_prev.shape()}, "input cell needs an input");
    if (h_prev.value().cols() != cfg.d_h()) throw ShapeError("gru_step", {h_prev.shape()}, "state width differs from d_h");
    if (x && x->value().cols() != cfg.d_x()) throw ShapeError("gru_step", {x->shape()}, "input width differs from d_x");

    const std::string wp = cell_prefix(prefix, cfg, depth);
    const std::string np = depth_prefix(prefix, depth);
    const std::size_t d_x = weights_config(cfg, depth).d_x;

    StepTrace<T> t;
    t.gate = ops::sigmoid(maybe_layer_norm(store, cfg, np + "ln_z", affine(store, wp + "gru/z/w", wp + "gru/z/b", d_x, x, h_prev)));
    Var<T> reset = ops::sigmoid(maybe_layer_norm(store, cfg, np + "ln_r", affine(store, wp + "gru/r/w", wp + "gru/r/b", d_x, x, h_prev)));
    t.cand_pre = affine(store, wp + "gru/h/w", wp + "gru/h/b", d_x, x, ops::mul(reset, h_prev));
    t.candidate = ops::tanh(maybe_layer_norm(store, cfg, np + "ln_h", t.cand_pre));
    t.h = gated_update(h_prev, t.gate, apply_dropout(cfg, t.candidate, ctx));
    return t;
}

template <typename T>
std::vector<StepTrace<T>> deep_transition_step(const ParamStore<T>& store, const std::string& prefix,
                                               const CellConfig& cfg, Var<T> x, Var<T> h_prev, StepContext ctx) {
    std::vector<StepTrace<T>> traces;
    traces.reserve(cfg.transition_depth + 1);
    traces.push_back(mzu_step(store, prefix, cfg, 0, std::optional<Var<T>>(x), h_prev, ctx));
    for (std::size_t depth = 1; depth <= cfg.transition_depth; ++depth)
        traces.push_back(mzu_step(store, prefix, cfg, depth, std::optional<Var<T>>{}, traces.back().h, ctx));
    return traces;
}

template <typename T>
std::vector<Var<T>> encode_sequence(Tape<T>& tape, const ParamStore<T>& store, const std::string& prefix,
                                    const CellConfig& cfg, const std::string& embedding, std::span<const int> tokens,
                                    Direction dir, StepContext ctx, std::vector<Var<T>>* zone_sets) {
    std::vector<Var<T>> states;
    if (tokens.empty()) return states;
    std::vector<int> order(tokens.begin(), tokens.end());
    if (dir == Direction::kBackward) std::reverse(order.begin(), order.end());
    Var<T> emb = ops::embedding(tape.param(store, embedding), std::span<const int>(order));
    Var<T> h = tape.constant(Tensor<T>({1, cfg.d_h()}));
    states.reserve(order.size());
    for (std::size_t i = 0; i < order.size(); ++i) {
        auto traces = deep_transition_step(store, prefix, cfg, ops::slice_rows(emb, i, i + 1), h, ctx);
        if (zone_sets)
            for (const auto& tr : traces) zone_sets->insert(zone_sets->end(), tr.zone_sets.begin(), tr.zone_sets.end());
        h = traces.back().h;
        states.push_back(h);
    }
    if (dir == Direction::kBackward) std::reverse(states.begin(), states.end());
    return states;
}

template <typename T>
std::vector<Var<T>> bidirectional_encode(Tape<T>& tape, const ParamStore<T>& store, const std::string& fwd_prefix,
                                         const std::string& bwd_prefix, const CellConfig& cfg,
                                         const std::string& embedding, std::span<const int> tokens, StepContext ctx,
                                         std::vector<Var<T>>* zone_sets) {
    auto fwd = encode_sequence(tape, store, fwd_prefix, cfg, embedding, tokens, Direction::kForward, ctx, zone_sets);
    auto bwd = encode_sequence(tape, store, bwd_prefix, cfg, embedding, tokens, Direction::kBackward, ctx, zone_sets);
    std::vector<Var<T>> out;
    out.reserve(fwd.size());
    for (std::size_t i = 0; i < fwd.size(); ++i) {
        const std::vector<Var<T>> pair{fwd[i], bwd[i]};
        out.push_back(ops::concat_cols<T>(pair));
    }
    return out;
}

#define MZU_INSTANTIATE_CELLS(T)                                                                                        \
    template void init_cell(ParamStore<T>&, const std::string&, const CellConfig&, Rng&);                              \
    template Var<T> gated_update(Var<T>, Var<T>, Var<T>);                                                               \
    template StepTrace<T> mzu_step(const ParamStore<T>&, const std::string&, const CellConfig&, std::size_t,            \
                                   std::optional<Var<T>>, Var<T>, StepContext);                                         \
    template StepTrace<T> tmzu_step(const ParamStore<T>&, const std::string&, const CellConfig&, std::size_t, Var<T>,   \
                                    StepContext);                                                                       \
    template StepTrace<T> gru_step(const ParamStore<T>&, const std::string&, const CellConfig&, std::size_t,            \
                                   std::optional<Var<T>>, Var<T>, StepContext);                                         \
    template std::vector<StepTrace<T>> deep_transition_step(const ParamStore<T>&, const std::string&,                   \
                                                            const CellConfig&, Var<T>, Var<T>, StepContext);            \
    template std::vector<Var<T>> encode_sequence(Tape<T>&, const ParamStore<T>&, const std::string&, const CellConfig&, \
                                                 const std::string&, std::span<const int>, Direction, StepContext,      \
                                                 std::vector<Var<T>>*);                                                 \
    template std::vector<Var<T>> bidirectional_encode(Tape<T>&, const ParamStore<T>&, const std::string&,               \
                                                      const std::string&, const CellConfig&, const std::string&,        \
                                                      std::span<const int>, StepContext, std::vector<Var<T>>*);

MZU_INSTANTIATE_CELLS(float)
MZU_INSTANTIATE_CELLS(double)

}  // namespace mzu
