#pragma once

#include <cstddef>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "mzu/ops.hpp"

namespace mzu {

// Invalid model or run configuration; the message names the offending field.
class ConfigError : public std::invalid_argument {
   public:
    using std::invalid_argument::invalid_argument;
};

enum class Composition { kSat, kGcn, kCap };
enum class GcnActivation { kSigmoid, kRelu };

std::string to_string(Composition c);
Composition parse_composition(const std::string& s);

/// Shape of one multi-zone transformation M(x, h).
struct MFunctionConfig {
    std::size_t d_x = 0;   // input width; 0 for transition-only cells
    std::size_t d_h = 0;   // state and output width
    std::size_t zones = 4;  // N
    std::size_t out_zones = 2;  // J, capsule composition only
    std::size_t routing_iters = 3;  // T, capsule composition only
    std::size_t d_f = 0;   // FFN filter width
    Composition composition = Composition::kCap;
    GcnActivation gcn_activation = GcnActivation::kSigmoid;

    std::size_t d_z() const { return d_h / zones; }
    // J: sat and gcn keep one output zone per input zone.
    std::size_t num_out() const { return composition == Composition::kCap ? out_zones : zones; }
    std::size_t d_o() const { return composition == Composition::kCap ? d_h / out_zones : d_z(); }

    void validate() const;
};

// Minimum node degree before the inverse square root in graph composition.
inline constexpr double kMinDegree = 1e-3;

/// Creates every parameter of one M-function under `prefix`:
///   zone_proj/<i>   (d_x+d_h) x d_z, one per zone, no bias
///   sat/wq, sat/wk, sat/wv  d_z x d_z
///   gcn/wg          d_z x d_z
///   cap/wc/<j>      d_z x d_o, shared by all input capsules
///   ffn/w1, ffn/b1, ffn/w2, ffn/b2   shared across zones
///   agg/w, agg/b    (J*d_o) x d_h
template <typename T>
void init_m_function(ParamStore<T>& store, const std::string& prefix, const MFunctionConfig& cfg, Rng& rng);

std::size_t m_function_param_count(const MFunctionConfig& cfg);

// Zone sets are rank-3 [batch, zones, width].
template <typename T>
struct Composed {
    Var<T> zones;
    // sat: attention weights [B,N,N]; gcn: normalized adjacency [B,N,N];
    // cap: coupling coefficients [B,N,J] of every routing iteration.
    std::vector<Tensor<T>> weights;
};

template <typename T>
struct MFunctionResult {
    Var<T> out;        // [B, d_h]
    Var<T> zones;      // generated Z, [B, N, d_z]
    Var<T> composed;   // O, [B, J, d_o]
    Var<T> abstracted; // F, [B, J, d_o]
    std::vector<Tensor<T>> weights;
};

/// z_i = W_i [x, h]. `x` may be absent: with cfg.d_x == 0 the projections
/// only have state rows; with cfg.d_x > 0 the input is treated as the zero
/// vector and only the state rows of each W_i are used.
template <typename T>
Var<T> generate_zones(const ParamStore<T>& store, const std::string& prefix, const MFunctionConfig& cfg,
                      std::optional<Var<T>> x, Var<T> h);

/// softmax(Q K^T / sqrt(d_z)) V over the N zones of each batch row.
template <typename T>
Composed<T> compose_sat(const ParamStore<T>& store, const std::string& prefix, const MFunctionConfig& cfg, Var<T> z);

/// Cosine adjacency between zones with the diagonal set to 1 afterwards.
template <typename T>
Var<T> build_adjacency(Var<T> z);

/// sigma(D^-1/2 A D^-1/2 Z W_g) with degrees clamped below at kMinDegree.
template <typename T>
Composed<T> compose_gcn(const ParamStore<T>& store, const std::string& prefix, const MFunctionConfig& cfg, Var<T> z);

/// Dynamic routing from N input capsules to J output capsules, unrolled for
/// cfg.routing_iters iterations with logits starting at zero.
template <typename T>
Composed<T> compose_cap(const ParamStore<T>& store, const std::string& prefix, const MFunctionConfig& cfg, Var<T> z);

template <typename T>
Composed<T> compose(const ParamStore<T>& store, const std::string& prefix, const MFunctionConfig& cfg, Var<T> z);

/// Position-wise FFN per zone, concatenation, then the final linear map.
/// Returns {aggregated [B, d_h], F [B, J, d_o]}.
template <typename T>
std::pair<Var<T>, Var<T>> aggregate_zones(const ParamStore<T>& store, const std::string& prefix,
                                          const MFunctionConfig& cfg, Var<T> o);

template <typename T>
MFunctionResult<T> m_function(const ParamStore<T>& store, const std::string& prefix, const MFunctionConfig& cfg,
                              std::optional<Var<T>> x, Var<T> h);

/// D_zone = -(1/N^2) sum_ij cos(z_i, z_j) for each batch row; [B, 1].
template <typename T>
Var<T> zone_disagreement(Var<T> z);

/// Capsule squash of a single vector; the zero vector maps to zero.
std::vector<double> squash(const std::vector<double>& s);

}  // namespace mzu
