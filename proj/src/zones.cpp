#include "mzu/zones.hpp"

#include <cmath>

namespace mzu {

std::string to_string(Composition c) {
    switch (c) {
        case Composition::kSat: return "sat";
        case Composition::kGcn: return "gcn";
        case Composition::kCap: return "cap";
    }
    return "?";
}

Composition parse_composition(const std::string& s) {
    if (s == "sat") return Composition::kSat;
    if (s == "gcn") return Composition::kGcn;
    if (s == "cap") return Composition::kCap;
    throw ConfigError("backend: expected sat, gcn or cap, got '" + s + "'");
}

void MFunctionConfig::validate() const {
    if (d_h == 0) throw ConfigError("hidden: state width must be positive");
    if (zones == 0) throw ConfigError("zones: must be positive");
    if (d_h % zones != 0)
        throw ConfigError("zones: " + std::to_string(zones) + " does not divide hidden size " + std::to_string(d_h));
    if (d_f == 0) throw ConfigError("filter: FFN width must be positive");
    if (composition == Composition::kCap) {
        if (out_zones == 0) throw ConfigError("out-capsules: must be positive");
        if (d_h % out_zones != 0)
            throw ConfigError("out-capsules: " + std::to_string(out_zones) + " does not divide hidden size " + std::to_string(d_h));
        if (routing_iters < 1) throw ConfigError("routing-iters: must be at least 1");
    }
}

template <typename T>
void init_m_function(ParamStore<T>& store, const std::string& prefix, const MFunctionConfig& cfg, Rng& rng) {
    cfg.validate();
    const std::size_t in = cfg.d_x + cfg.d_h, dz = cfg.d_z(), d_o = cfg.d_o(), J = cfg.num_out();
    for (std::size_t i = 0; i < cfg.zones; ++i) store.create_glorot(prefix + "zone_proj/" + std::to_string(i), in, dz, rng);
    switch (cfg.composition) {
        case Composition::kSat:
            for (const char* n : {"sat/wq", "sat/wk", "sat/wv"}) store.create_glorot(prefix + n, dz, dz, rng);
            break;
        case Composition::kGcn:
            store.create_glorot(prefix + "gcn/wg", dz, dz, rng);
            break;
        case Composition::kCap:
            for (std::size_t j = 0; j < J; ++j) store.create_glorot(prefix + "cap/wc/" + std::to_string(j), dz, d_o, rng);
            break;
    }
    store.create_glorot(prefix + "ffn/w1", d_o, cfg.d_f, rng);
    store.create_zeros(prefix + "ffn/b1", {1, cfg.d_f});
    store.create_glorot(prefix + "ffn/w2", cfg.d_f, d_o, rng);
    store.create_zeros(prefix + "ffn/b2", {1, d_o});
    store.create_glorot(prefix + "agg/w", J * d_o, cfg.d_h, rng);
    store.create_zeros(prefix + "agg/b", {1, cfg.d_h});
}

std::size_t m_function_param_count(const MFunctionConfig& cfg) {
    const std::size_t in = cfg.d_x + cfg.d_h, dz = cfg.d_z(), d_o = cfg.d_o(), J = cfg.num_out();
    std::size_t n = cfg.zones * in * dz;
    switch (cfg.composition) {
        case Composition::kSat: n += 3 * dz * dz; break;
        case Composition::kGcn: n += dz * dz; break;
        case Composition::kCap: n += J * dz * d_o; break;
    }
    n += d_o * cfg.d_f + cfg.d_f + cfg.d_f * d_o + d_o;
    n += J * d_o * cfg.d_h + cfg.d_h;
    return n;
}

template <typename T>
Var<T> generate_zones(const ParamStore<T>& store, const std::string& prefix, const MFunctionConfig& cfg,
                      std::optional<Var<T>> x, Var<T> h) {
    Tape<T>& tape = *h.tape;
    const std::size_t batch = h.value().rows();
    if (h.value().cols() != cfg.d_h)
        throw ShapeError("generate_zones", {h.shape()}, "state width differs from d_h=" + std::to_string(cfg.d_h));
    if (x && cfg.d_x == 0) throw ShapeError("generate_zones", {x->shape()}, "cell takes no input");
    if (x && (x->value().cols() != cfg.d_x || x->value().rows() != batch))
        throw ShapeError("generate_zones", {x->shape(), h.shape()}, "input width differs from d_x=" + std::to_string(cfg.d_x));

    std::vector<Var<T>> blocks;
    blocks.reserve(cfg.zones);
    for (std::size_t i = 0; i < cfg.zones; ++i) blocks.push_back(tape.param(store, prefix + "zone_proj/" + std::to_string(i)));
    Var<T> w = blocks.size() == 1 ? blocks[0] : ops::concat_cols<T>(blocks);

    Var<T> z;
    if (x) {
        const std::vector<Var<T>> xh{*x, h};
        z = ops::matmul(ops::concat_cols<T>(xh), w);
    } else if (cfg.d_x > 0) {
        z = ops::matmul(h, ops::slice_rows(w, cfg.d_x, cfg.d_x + cfg.d_h));
    } else {
        z = ops::matmul(h, w);
    }
    return ops::reshape(z, {batch, cfg.zones, cfg.d_z()});
}

template <typename T>
Composed<T> compose_sat(const ParamStore<T>& store, const std::string& prefix, const MFunctionConfig& cfg, Var<T> z) {
    Tape<T>& tape = *z.tape;
    const std::size_t batch = z.value().dim(0), n = cfg.zones, dz = cfg.d_z();
    Var<T> flat = ops::reshape(z, {batch * n, dz});
    auto project = [&](const char* name) {
        return ops::reshape(ops::matmul(flat, tape.param(store, prefix + name)), {batch, n, dz});
    };
    Var<T> q = project("sat/wq");
    Var<T> k = project("sat/wk");
    Var<T> v = project("sat/wv");
    Var<T> scores = ops::scale(ops::bmm(q, k, false, true), 1.0 / std::sqrt(static_cast<double>(dz)));
    Var<T> attn = ops::softmax_rows(scores);
    return {ops::bmm(attn, v), {attn.value()}};
}

template <typename T>
Var<T> build_adjacency(Var<T> z) {
    const auto& s = z.value().shape();
    if (s.size() != 3) throw ShapeError("build_adjacency", {s}, "expected [batch, zones, width]");
    Var<T> u = ops::reshape(ops::normalize_rows(ops::reshape(z, {s[0] * s[1], s[2]})), s);
    return ops::set_diagonal(ops::bmm(u, u, false, true), 1.0);
}

template <typename T>
Composed<T> compose_gcn(const ParamStore<T>& store, const std::string& prefix, const MFunctionConfig& cfg, Var<T> z) {
    Tape<T>& tape = *z.tape;
    const std::size_t batch = z.value().dim(0), n = cfg.zones, dz = cfg.d_z();
    Var<T> adj = build_adjacency(z);
    Var<T> norm = ops::sym_normalize(adj, kMinDegree);
    Var<T> smoothed = ops::reshape(ops::bmm(norm, z), {batch * n, dz});
    Var<T> pre = ops::matmul(smoothed, tape.param(store, prefix + "gcn/wg"));
    Var<T> act = cfg.gcn_activation == GcnActivation::kSigmoid ? ops::sigmoid(pre) : ops::relu(pre);
    return {ops::reshape(act, {batch, n, dz}), {adj.value(), norm.value()}};
}

template <typename T>
Composed<T> compose_cap(const ParamStore<T>& store, const std::string& prefix, const MFunctionConfig& cfg, Var<T> z) {
    Tape<T>& tape = *z.tape;
    const std::size_t batch = z.value().dim(0), n = cfg.zones, dz = cfg.d_z(), J = cfg.out_zones, d_o = cfg.d_o();

    std::vector<Var<T>> wc;
    for (std::size_t j = 0; j < J; ++j) wc.push_back(tape.param(store, prefix + "cap/wc/" + std::to_string(j)));
    Var<T> w = J == 1 ? wc[0] : ops::concat_cols<T>(wc);

    // Predictions zhat_{j|i} = z_i W_j, laid out [B*J, N, d_o].
    Var<T> pred = ops::matmul(ops::reshape(z, {batch * n, dz}), w);
    pred = ops::reshape(ops::swap_axes(ops::reshape(pred, {batch, n, J, d_o}), 1), {batch * J, n, d_o});

    Composed<T> result;
    Var<T> logits = tape.constant(Tensor<T>({batch, n, J}));
    Var<T> out;
    for (std::size_t it = 0; it < cfg.routing_iters; ++it) {
        Var<T> c = ops::softmax_rows(logits);
        result.weights.push_back(c.value());
        Var<T> ct = ops::reshape(ops::swap_axes(c, 1), {batch * J, 1, n});
        Var<T> s = ops::reshape(ops::bmm(ct, pred), {batch * J, d_o});
        out = ops::squash_rows(s);
        // The update after the last iteration cannot affect the output.
        if (it + 1 == cfg.routing_iters) break;
        Var<T> agree = ops::bmm(pred, ops::reshape(out, {batch * J, d_o, 1}));
        logits = ops::add(logits, ops::swap_axes(ops::reshape(agree, {batch, J, n}), 1));
    }
    result.zones = ops::reshape(out, {batch, J, d_o});
    return result;
}

template <typename T>
Composed<T> compose(const ParamStore<T>& store, const std::string& prefix, const MFunctionConfig& cfg, Var<T> z) {
    switch (cfg.composition) {
        case Composition::kSat: return compose_sat(store, prefix, cfg, z);
        case Composition::kGcn: return compose_gcn(store, prefix, cfg, z);
        case Composition::kCap: return compose_cap(store, prefix, cfg, z);
    }
    throw ConfigError("unknown composition");
}

template <typename T>
std::pair<Var<T>, Var<T>> aggregate_zones(const ParamStore<T>& store, const std::string& prefix,
                                          const MFunctionConfig& cfg, Var<T> o) {
    Tape<T>& tape = *o.tape;
    const std::size_t J = cfg.num_out(), d_o = cfg.d_o();
    const auto& s = o.value().shape();
    if (s.size() != 3 || s[1] != J || s[2] != d_o)
        throw ShapeError("aggregate_zones", {s}, "expected [batch, " + std::to_string(J) + ", " + std::to_string(d_o) + "]");
    const std::size_t batch = s[0];
    Var<T> flat = ops::reshape(o, {batch * J, d_o});
    Var<T> hidden = ops::relu(ops::add_bias(ops::matmul(flat, tape.param(store, prefix + "ffn/w1")), tape.param(store, prefix + "ffn/b1")));
    Var<T> f = ops::add_bias(ops::matmul(hidden, tape.param(store, prefix + "ffn/w2")), tape.param(store, prefix + "ffn/b2"));
    Var<T> concat = ops::reshape(f, {batch, J * d_o});
    Var<T> out = ops::add_bias(ops::matmul(concat, tape.param(store, prefix + "agg/w")), tape.param(store, prefix + "agg/b"));
    return {out, ops::reshape(f, {batch, J, d_o})};
}

template <typename T>
MFunctionResult<T> m_function(const ParamStore<T>& store, const std::string& prefix, const MFunctionConfig& cfg,
                              std::optional<Var<T>> x, Var<T> h) {
    MFunctionResult<T> r;
    r.zones = generate_zones(store, prefix, cfg, x, h);
    Composed<T> c = compose(store, prefix, cfg, r.zones);
    r.composed = c.zones;
    r.weights = std::move(c.weights);
    auto [out, f] = aggregate_zones(store, prefix, cfg, r.composed);
    r.out = out;
    r.abstracted = f;
    return r;
}

template <typename T>
Var<T> zone_disagreement(Var<T> z) {
    Tape<T>& tape = *z.tape;
    const auto& s = z.value().shape();
    if (s.size() != 3) throw ShapeError("zone_disagreement", {s}, "expected [batch, zones, width]");
    const std::size_t batch = s[0], n = s[1];
    Var<T> u = ops::reshape(ops::normalize_rows(ops::reshape(z, {batch * n, s[2]})), s);
    Var<T> gram = ops::reshape(ops::bmm(u, u, false, true), {batch, n * n});
    Var<T> per_row = ops::matmul(gram, tape.constant(Tensor<T>({n * n, 1}, T(1))));
    return ops::scale(per_row, -1.0 / static_cast<double>(n * n));
}

std::vector<double> squash(const std::vector<double>& s) {
    Tape<double> tape;
    tape.set_recording(false);
    if (s.empty()) return {};
    Var<double> v = ops::squash_rows(tape.constant(Tensor<double>::row(s)));
    return v.value().storage();
}

#define MZU_INSTANTIATE_ZONES(T)                                                                                          \
    template void init_m_function(ParamStore<T>&, const std::string&, const MFunctionConfig&, Rng&);                     \
    template Var<T> generate_zones(const ParamStore<T>&, const std::string&, const MFunctionConfig&, std::optional<Var<T>>, \
                                   Var<T>);                                                                               \
    template Composed<T> compose_sat(const ParamStore<T>&, const std::string&, const MFunctionConfig&, Var<T>);          \
    template Var<T> build_adjacency(Var<T>);                                                                              \
    template Composed<T> compose_gcn(const ParamStore<T>&, const std::string&, const MFunctionConfig&, Var<T>);          \
    template Composed<T> compose_cap(const ParamStore<T>&, const std::string&, const MFunctionConfig&, Var<T>);          \
    template Composed<T> compose(const ParamStore<T>&, const std::string&, const MFunctionConfig&, Var<T>);              \
    template std::pair<Var<T>, Var<T>> aggregate_zones(const ParamStore<T>&, const std::string&, const MFunctionConfig&,  \
                                                       Var<T>);                                                           \
    template MFunctionResult<T> m_function(const ParamStore<T>&, const std::string&, const MFunctionConfig&,             \
                                           std::optional<Var<T>>, Var<T>);                                                \
    template Var<T> zone_disagreement(Var<T>);

MZU_INSTANTIATE_ZONES(float)
MZU_INSTANTIATE_ZONES(double)

}  // namespace mzu
