#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "mzu/gradcheck.hpp"
#include "mzu/zones.hpp"
#include "test_util.hpp"

using namespace mzu;
namespace t = mzu::test;
using t::Mat;

namespace {

MFunctionConfig make_cfg(Composition c, std::size_t d_x = 3, std::size_t d_h = 8, std::size_t n = 4) {
    MFunctionConfig cfg;
    cfg.d_x = d_x;
    cfg.d_h = d_h;
    cfg.zones = n;
    cfg.out_zones = 2;
    cfg.routing_iters = 3;
    cfg.d_f = 6;
    cfg.composition = c;
    return cfg;
}

ParamStore<double> make_store(const MFunctionConfig& cfg, std::uint32_t seed) {
    Rng rng(seed);
    ParamStore<double> s;
    init_m_function(s, "m/", cfg, rng);
    t::randomize(s, rng);
    return s;
}

std::vector<double> row_of(const Mat& m, std::size_t r) { return m[r]; }

Mat rank3_slab(const Tensor<double>& x, std::size_t b) { return t::slab(x, b); }

Tensor<double> from_slabs(const std::vector<Mat>& slabs) {
    const std::size_t n = slabs[0].size(), m = slabs[0][0].size();
    Tensor<double> out({slabs.size(), n, m});
    for (std::size_t b = 0; b < slabs.size(); ++b)
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < m; ++j) out[(b * n + i) * m + j] = slabs[b][i][j];
    return out;
}

// ---- stage oracles ----------------------------------------------------------

Mat oracle_zones(const ParamStore<double>& s, const MFunctionConfig& cfg, const std::vector<double>& x,
                 const std::vector<double>& h) {
    std::vector<double> xh = x;
    xh.insert(xh.end(), h.begin(), h.end());
    Mat z;
    for (std::size_t i = 0; i < cfg.zones; ++i) z.push_back(t::matmul({xh}, t::param_mat(s, "m/zone_proj/" + std::to_string(i)))[0]);
    return z;
}

Mat oracle_sat(const ParamStore<double>& s, const Mat& z, Mat* attn_out = nullptr) {
    const Mat q = t::matmul(z, t::param_mat(s, "m/sat/wq")), k = t::matmul(z, t::param_mat(s, "m/sat/wk")),
              v = t::matmul(z, t::param_mat(s, "m/sat/wv"));
    const std::size_t n = z.size(), d = z[0].size();
    Mat out(n, std::vector<double>(d, 0.0)), attn;
    for (std::size_t i = 0; i < n; ++i) {
        std::vector<double> scores(n);
        for (std::size_t j = 0; j < n; ++j) scores[j] = t::dot(q[i], k[j]) / std::sqrt(static_cast<double>(d));
        const auto a = t::softmax(scores);
        attn.push_back(a);
        for (std::size_t j = 0; j < n; ++j)
            for (std::size_t c = 0; c < d; ++c) out[i][c] += a[j] * v[j][c];
    }
    if (attn_out) *attn_out = attn;
    return out;
}

Mat oracle_adjacency(const Mat& z) {
    const std::size_t n = z.size();
    Mat a(n, std::vector<double>(n));
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j) a[i][j] = i == j ? 1.0 : t::cosine(z[i], z[j]);
    return a;
}

Mat oracle_gcn(const ParamStore<double>& s, const Mat& z) {
    const Mat a = oracle_adjacency(z);
    const std::size_t n = z.size();
    std::vector<double> deg(n);
    for (std::size_t i = 0; i < n; ++i) deg[i] = std::max(kMinDegree, std::accumulate(a[i].begin(), a[i].end(), 0.0));
    Mat lap(n, std::vector<double>(n));
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j) lap[i][j] = a[i][j] / std::sqrt(deg[i] * deg[j]);
    Mat out = t::matmul(t::matmul(lap, z), t::param_mat(s, "m/gcn/wg"));
    for (auto& r : out)
        for (double& v : r) v = t::sigmoid(v);
    return out;
}

std::vector<double> oracle_squash(const std::vector<double>& v) {
    const double n2 = t::dot(v, v), n = std::sqrt(n2);
    std::vector<double> out(v.size(), 0.0);
    if (n <= 1e-12) return out;
    for (std::size_t i = 0; i < v.size(); ++i) out[i] = n2 / (1.0 + n2) * v[i] / n;
    return out;
}

// Straight-line dynamic routing.
Mat oracle_cap(const ParamStore<double>& s, const MFunctionConfig& cfg, const Mat& z, std::vector<Mat>* couplings = nullptr) {
    const std::size_t n = z.size(), J = cfg.out_zones, d_o = cfg.d_o();
    std::vector<Mat> pred(n);  // pred[i][j] = z_i W_j
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < J; ++j) pred[i].push_back(t::matmul({z[i]}, t::param_mat(s, "m/cap/wc/" + std::to_string(j)))[0]);
    Mat b(n, std::vector<double>(J, 0.0)), o(J);
    for (std::size_t it = 0; it < cfg.routing_iters; ++it) {
        Mat c(n);
        for (std::size_t i = 0; i < n; ++i) c[i] = t::softmax(b[i]);
        if (couplings) couplings->push_back(c);
        for (std::size_t j = 0; j < J; ++j) {
            std::vector<double> sj(d_o, 0.0);
            for (std::size_t i = 0; i < n; ++i)
                for (std::size_t k = 0; k < d_o; ++k) sj[k] += c[i][j] * pred[i][j][k];
            o[j] = oracle_squash(sj);
        }
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < J; ++j) b[i][j] += t::dot(pred[i][j], o[j]);
    }
    return o;
}

std::vector<double> oracle_aggregate(const ParamStore<double>& s, const Mat& o, Mat* f_out = nullptr) {
    std::vector<double> concat;
    Mat f;
    for (const auto& oj : o) {
        auto hidden = t::matmul({oj}, t::param_mat(s, "m/ffn/w1"))[0];
        const auto b1 = t::param_vec(s, "m/ffn/b1");
        for (std::size_t k = 0; k < hidden.size(); ++k) hidden[k] = std::max(0.0, hidden[k] + b1[k]);
        auto fj = t::matmul({hidden}, t::param_mat(s, "m/ffn/w2"))[0];
        const auto b2 = t::param_vec(s, "m/ffn/b2");
        for (std::size_t k = 0; k < fj.size(); ++k) fj[k] += b2[k];
        f.push_back(fj);
        concat.insert(concat.end(), fj.begin(), fj.end());
    }
    auto out = t::matmul({concat}, t::param_mat(s, "m/agg/w"))[0];
    const auto bias = t::param_vec(s, "m/agg/b");
    for (std::size_t k = 0; k < out.size(); ++k) out[k] += bias[k];
    if (f_out) *f_out = f;
    return out;
}

Mat oracle_compose(const ParamStore<double>& s, const MFunctionConfig& cfg, const Mat& z) {
    switch (cfg.composition) {
        case Composition::kSat: return oracle_sat(s, z);
        case Composition::kGcn: return oracle_gcn(s, z);
        case Composition::kCap: return oracle_cap(s, cfg, z);
    }
    return {};
}

double oracle_disagreement(const Mat& z) {
    double total = 0;
    for (const auto& a : z)
        for (const auto& b : z) total += t::cosine(a, b);
    return -total / static_cast<double>(z.size() * z.size());
}

Var<double> zones_var(Tape<double>& tape, const std::vector<Mat>& z) { return tape.constant(from_slabs(z)); }

const Composition kBackends[] = {Composition::kSat, Composition::kGcn, Composition::kCap};

}  // namespace

// ---- generate_zones ---------------------------------------------------------

TEST(GenerateZones, MatchesPerZoneMatmul) {
    const auto cfg = make_cfg(Composition::kSat);
    const auto s = make_store(cfg, 1);
    Rng rng(2);
    const auto x = t::random_tensor({3, cfg.d_x}, rng), h = t::random_tensor({3, cfg.d_h}, rng);
    Tape<double> tape;
    auto z = generate_zones(s, "m/", cfg, std::optional(tape.constant(x)), tape.constant(h)).value();
    ASSERT_EQ(z.shape(), (Shape{3, 4, 2}));
    for (std::size_t b = 0; b < 3; ++b)
        EXPECT_LT(t::max_abs_diff(rank3_slab(z, b), oracle_zones(s, cfg, row_of(t::to_mat(x), b), row_of(t::to_mat(h), b))), 1e-12);
}

TEST(GenerateZones, ZeroInputsGiveZeroZones) {
    const auto cfg = make_cfg(Composition::kCap);
    const auto s = make_store(cfg, 3);
    Tape<double> tape;
    auto z = generate_zones(s, "m/", cfg, std::optional(tape.constant(Tensor<double>({2, 3}))), tape.constant(Tensor<double>({2, 8})));
    for (double v : z.value().values()) EXPECT_EQ(v, 0.0);
}

TEST(GenerateZones, SingleZone) {
    auto cfg = make_cfg(Composition::kSat, 2, 4, 1);
    const auto s = make_store(cfg, 4);
    Rng rng(5);
    const auto x = t::random_tensor({1, 2}, rng), h = t::random_tensor({1, 4}, rng);
    Tape<double> tape;
    auto z = generate_zones(s, "m/", cfg, std::optional(tape.constant(x)), tape.constant(h)).value();
    std::vector<double> xh(x.storage());
    xh.insert(xh.end(), h.storage().begin(), h.storage().end());
    const auto want = t::matmul({xh}, t::param_mat(s, "m/zone_proj/0"))[0];
    for (std::size_t k = 0; k < 4; ++k) EXPECT_NEAR(z[k], want[k], 1e-12);
}

TEST(GenerateZones, WidthMismatch) {
    const auto cfg = make_cfg(Composition::kSat);
    const auto s = make_store(cfg, 6);
    Tape<double> tape;
    EXPECT_THROW(generate_zones(s, "m/", cfg, std::optional(tape.constant(Tensor<double>({1, 2}))), tape.constant(Tensor<double>({1, 8}))),
                 ShapeError);
    EXPECT_THROW(generate_zones(s, "m/", cfg, std::optional<Var<double>>{}, tape.constant(Tensor<double>({1, 7}))), ShapeError);
}

TEST(MFunctionConfig, Validation) {
    auto cfg = make_cfg(Composition::kCap, 3, 8, 3);
    EXPECT_THROW(cfg.validate(), ConfigError);
    cfg = make_cfg(Composition::kCap);
    cfg.out_zones = 3;
    EXPECT_THROW(cfg.validate(), ConfigError);
    cfg.out_zones = 2;
    cfg.routing_iters = 0;
    EXPECT_THROW(cfg.validate(), ConfigError);
    cfg.composition = Composition::kSat;
    EXPECT_NO_THROW(cfg.validate());
    try {
        make_cfg(Composition::kSat, 3, 800, 3).validate();
        FAIL();
    } catch (const ConfigError& e) {
        EXPECT_NE(std::string(e.what()).find("zones"), std::string::npos);
    }
}

// ---- sat --------------------------------------------------------------------

TEST(ComposeSat, MatchesNaiveAttention) {
    const auto cfg = make_cfg(Composition::kSat);
    const auto s = make_store(cfg, 7);
    Rng rng(8);
    std::vector<Mat> z{t::to_mat(t::random_tensor({4, 2}, rng)), t::to_mat(t::random_tensor({4, 2}, rng))};
    Tape<double> tape;
    auto r = compose_sat(s, "m/", cfg, zones_var(tape, z));
    for (std::size_t b = 0; b < 2; ++b) {
        Mat attn;
        EXPECT_LT(t::max_abs_diff(rank3_slab(r.zones.value(), b), oracle_sat(s, z[b], &attn)), 1e-12);
        EXPECT_LT(t::max_abs_diff(rank3_slab(r.weights[0], b), attn), 1e-12);
    }
}

TEST(ComposeSat, SingleZoneIsValueProjection) {
    auto cfg = make_cfg(Composition::kSat, 0, 3, 1);
    const auto s = make_store(cfg, 9);
    const Mat z{{0.3, -1.2, 0.7}};
    Tape<double> tape;
    auto out = compose_sat(s, "m/", cfg, zones_var(tape, {z})).zones.value();
    EXPECT_LT(t::max_abs_diff(rank3_slab(out, 0), t::matmul(z, t::param_mat(s, "m/sat/wv"))), 1e-12);
}

TEST(ComposeSat, IdenticalZonesAttendUniformly) {
    auto cfg = make_cfg(Composition::kSat, 0, 4, 2);
    const auto s = make_store(cfg, 10);
    Tape<double> tape;
    auto w = compose_sat(s, "m/", cfg, zones_var(tape, {{{0.4, -0.9}, {0.4, -0.9}}})).weights[0];
    for (double v : w.values()) EXPECT_NEAR(v, 0.5, 1e-12);
}

// ---- adjacency and gcn --------------------------------------------------------

TEST(BuildAdjacency, Examples) {
    Tape<double> tape;
    auto same = build_adjacency(zones_var(tape, {{{1, 2, 3}, {1, 2, 3}, {1, 2, 3}}})).value();
    for (double v : same.values()) EXPECT_NEAR(v, 1.0, 1e-12);
    auto orth = build_adjacency(zones_var(tape, {{{1, 0}, {0, 2}}})).value();
    EXPECT_EQ(orth[0], 1.0);
    EXPECT_NEAR(orth[1], 0.0, 1e-15);
    EXPECT_NEAR(orth[2], 0.0, 1e-15);
    EXPECT_EQ(orth[3], 1.0);
}

TEST(BuildAdjacency, SymmetricUnitDiagonalMatchesOracle) {
    Rng rng(11);
    for (int trial = 0; trial < 100; ++trial) {
        const std::size_t n = 1 + rng() % 6, d = 1 + rng() % 5;
        Mat z = t::to_mat(t::random_tensor({n, d}, rng));
        if (trial % 10 == 0) std::fill(z[0].begin(), z[0].end(), 0.0);
        Tape<double> tape;
        auto a = build_adjacency(zones_var(tape, {z})).value();
        const Mat got = rank3_slab(a, 0);
        EXPECT_LT(t::max_abs_diff(got, oracle_adjacency(z)), 1e-12);
        for (std::size_t i = 0; i < n; ++i) {
            EXPECT_EQ(got[i][i], 1.0);
            for (std::size_t j = 0; j < n; ++j) {
                EXPECT_EQ(got[i][j], got[j][i]);
                EXPECT_LE(std::abs(got[i][j]), 1.0 + 1e-12);
            }
        }
    }
}

TEST(ComposeGcn, MatchesDenseChain) {
    const auto cfg = make_cfg(Composition::kGcn);
    const auto s = make_store(cfg, 12);
    Rng rng(13);
    std::vector<Mat> z{t::to_mat(t::random_tensor({4, 2}, rng)), t::to_mat(t::random_tensor({4, 2}, rng))};
    Tape<double> tape;
    auto out = compose_gcn(s, "m/", cfg, zones_var(tape, z)).zones.value();
    for (std::size_t b = 0; b < 2; ++b) EXPECT_LT(t::max_abs_diff(rank3_slab(out, b), oracle_gcn(s, z[b])), 1e-12);
}

TEST(ComposeGcn, ZeroZonesGiveHalf) {
    const auto cfg = make_cfg(Composition::kGcn);
    const auto s = make_store(cfg, 14);
    Tape<double> tape;
    auto r = compose_gcn(s, "m/", cfg, zones_var(tape, {Mat(4, std::vector<double>(2, 0.0))}));
    for (double v : r.zones.value().values()) EXPECT_DOUBLE_EQ(v, 0.5);
    const Mat adj = rank3_slab(r.weights[0], 0);
    for (std::size_t i = 0; i < 4; ++i)
        for (std::size_t j = 0; j < 4; ++j) EXPECT_EQ(adj[i][j], i == j ? 1.0 : 0.0);
}

TEST(ComposeGcn, IdenticalZonesGiveIdenticalRows) {
    auto cfg = make_cfg(Composition::kGcn, 0, 4, 2);
    const auto s = make_store(cfg, 15);
    Tape<double> tape;
    auto out = compose_gcn(s, "m/", cfg, zones_var(tape, {{{0.2, 0.5}, {0.2, 0.5}}})).zones.value();
    EXPECT_EQ(out[0], out[2]);
    EXPECT_EQ(out[1], out[3]);
}

TEST(ComposeGcn, OppositeZonesStayFinite) {
    // Cosine -1 off the diagonal makes the raw degree zero; the clamp keeps it finite.
    auto cfg = make_cfg(Composition::kGcn, 0, 4, 2);
    const auto s = make_store(cfg, 16);
    Tape<double> tape;
    auto out = compose_gcn(s, "m/", cfg, zones_var(tape, {{{1, 1}, {-1, -1}}})).zones.value();
    EXPECT_TRUE(out.all_finite());
}

// ---- squash and capsules ----------------------------------------------------

TEST(Squash, Examples) {
    for (double v : squash({0.0, 0.0})) EXPECT_EQ(v, 0.0);
    auto half = squash({0.6, 0.8});
    EXPECT_NEAR(half[0], 0.3, 1e-12);
    EXPECT_NEAR(half[1], 0.4, 1e-12);
    auto big = squash({1000.0, 0.0, 0.0});
    EXPECT_NEAR(big[0], 1e6 / (1.0 + 1e6), 1e-12);
    EXPECT_NEAR(big[0], 0.999999, 1e-9);
    EXPECT_EQ(big[1], 0.0);
}

TEST(Squash, NormBelowOneAndDirectionKept) {
    Rng rng(17);
    for (int trial = 0; trial < 200; ++trial) {
        const std::size_t n = 1 + rng() % 8;
        auto v = t::random_tensor({n}, rng, std::pow(10.0, static_cast<double>(trial % 7) - 3.0)).storage();
        auto out = squash(v);
        EXPECT_LT(t::norm(out), 1.0);
        EXPECT_NEAR(t::cosine(out, v), 1.0, 1e-9);
        const auto want = oracle_squash(v);
        for (std::size_t i = 0; i < n; ++i) EXPECT_NEAR(out[i], want[i], 1e-12);
    }
}

TEST(ComposeCap, MatchesScriptedRouting) {
    const auto cfg = make_cfg(Composition::kCap);
    const auto s = make_store(cfg, 18);
    Rng rng(19);
    std::vector<Mat> z{t::to_mat(t::random_tensor({4, 2}, rng, 2.0)), t::to_mat(t::random_tensor({4, 2}, rng, 2.0))};
    Tape<double> tape;
    auto r = compose_cap(s, "m/", cfg, zones_var(tape, z));
    ASSERT_EQ(r.weights.size(), 3u);
    for (std::size_t b = 0; b < 2; ++b) {
        std::vector<Mat> couplings;
        EXPECT_LT(t::max_abs_diff(rank3_slab(r.zones.value(), b), oracle_cap(s, cfg, z[b], &couplings)), 1e-12);
        for (std::size_t it = 0; it < 3; ++it) EXPECT_LT(t::max_abs_diff(rank3_slab(r.weights[it], b), couplings[it]), 1e-12);
    }
}

TEST(ComposeCap, SingleIterationCouplesUniformly) {
    auto cfg = make_cfg(Composition::kCap);
    cfg.routing_iters = 1;
    const auto s = make_store(cfg, 20);
    Rng rng(21);
    const Mat z = t::to_mat(t::random_tensor({4, 2}, rng));
    Tape<double> tape;
    auto r = compose_cap(s, "m/", cfg, zones_var(tape, {z}));
    for (double v : r.weights[0].values()) EXPECT_DOUBLE_EQ(v, 0.5);
    for (std::size_t j = 0; j < 2; ++j) {
        std::vector<double> sj(4, 0.0);
        for (std::size_t i = 0; i < 4; ++i) {
            const auto p = t::matmul({z[i]}, t::param_mat(s, "m/cap/wc/" + std::to_string(j)))[0];
            for (std::size_t k = 0; k < 4; ++k) sj[k] += 0.5 * p[k];
        }
        const auto want = oracle_squash(sj);
        for (std::size_t k = 0; k < 4; ++k) EXPECT_NEAR(r.zones.value()[j * 4 + k], want[k], 1e-12);
    }
}

TEST(ComposeCap, ZeroZonesKeepLogitsAtZero) {
    const auto cfg = make_cfg(Composition::kCap);
    const auto s = make_store(cfg, 22);
    Tape<double> tape;
    auto r = compose_cap(s, "m/", cfg, zones_var(tape, {Mat(4, std::vector<double>(2, 0.0))}));
    for (double v : r.zones.value().values()) EXPECT_EQ(v, 0.0);
    for (const auto& c : r.weights)
        for (double v : c.values()) EXPECT_DOUBLE_EQ(v, 0.5);
}

// ---- aggregation and the whole function --------------------------------------

TEST(AggregateZones, MatchesFfnConcatMatmul) {
    const auto cfg = make_cfg(Composition::kCap);
    const auto s = make_store(cfg, 23);
    Rng rng(24);
    std::vector<Mat> o{t::to_mat(t::random_tensor({2, 4}, rng)), t::to_mat(t::random_tensor({2, 4}, rng))};
    Tape<double> tape;
    auto [out, f] = aggregate_zones(s, "m/", cfg, zones_var(tape, o));
    for (std::size_t b = 0; b < 2; ++b) {
        Mat fo;
        const auto want = oracle_aggregate(s, o[b], &fo);
        for (std::size_t k = 0; k < 8; ++k) EXPECT_NEAR(out.value().at(b, k), want[k], 1e-12);
        EXPECT_LT(t::max_abs_diff(rank3_slab(f.value(), b), fo), 1e-12);
    }
}

TEST(AggregateZones, ZeroInputFreshInitIsZero) {
    const auto cfg = make_cfg(Composition::kCap);
    Rng rng(25);
    ParamStore<double> s;
    init_m_function(s, "m/", cfg, rng);
    Tape<double> tape;
    auto [out, f] = aggregate_zones(s, "m/", cfg, zones_var(tape, {Mat(2, std::vector<double>(4, 0.0))}));
    for (double v : out.value().values()) EXPECT_EQ(v, 0.0);
}

TEST(AggregateZones, SingleOutputZone) {
    auto cfg = make_cfg(Composition::kCap);
    cfg.out_zones = 1;
    const auto s = make_store(cfg, 26);
    Rng rng(27);
    const Mat o = t::to_mat(t::random_tensor({1, 8}, rng));
    Tape<double> tape;
    auto out = aggregate_zones(s, "m/", cfg, zones_var(tape, {o})).first.value();
    const auto want = oracle_aggregate(s, o);
    for (std::size_t k = 0; k < 8; ++k) EXPECT_NEAR(out[k], want[k], 1e-12);
}

TEST(MFunction, EndToEndMatchesStageOracles) {
    for (auto c : kBackends) {
        const auto cfg = make_cfg(c);
        const auto s = make_store(cfg, 28);
        Rng rng(29);
        const auto x = t::random_tensor({2, cfg.d_x}, rng), h = t::random_tensor({2, cfg.d_h}, rng);
        Tape<double> tape;
        auto r = m_function(s, "m/", cfg, std::optional(tape.constant(x)), tape.constant(h));
        for (std::size_t b = 0; b < 2; ++b) {
            const Mat z = oracle_zones(s, cfg, t::to_mat(x)[b], t::to_mat(h)[b]);
            const Mat o = oracle_compose(s, cfg, z);
            Mat f;
            const auto want = oracle_aggregate(s, o, &f);
            for (std::size_t k = 0; k < cfg.d_h; ++k) EXPECT_NEAR(r.out.value().at(b, k), want[k], 1e-10) << to_string(c);
            EXPECT_LT(t::max_abs_diff(rank3_slab(r.abstracted.value(), b), f), 1e-10);
        }
    }
}

TEST(MFunction, ZeroInputsSatGiveZero) {
    const auto cfg = make_cfg(Composition::kSat);
    Rng rng(30);
    ParamStore<double> s;
    init_m_function(s, "m/", cfg, rng);
    Tape<double> tape;
    auto out = m_function(s, "m/", cfg, std::optional(tape.constant(Tensor<double>({1, 3}))), tape.constant(Tensor<double>({1, 8}))).out;
    for (double v : out.value().values()) EXPECT_EQ(v, 0.0);
}

TEST(MFunction, OutputWidthIsStateWidth) {
    for (auto c : kBackends)
        for (std::size_t n : {1, 2, 4, 8})
            for (std::size_t j : {1, 2, 4})
                for (std::size_t iters : {1, 2, 5}) {
                    auto cfg = make_cfg(c, 2, 8, n);
                    cfg.out_zones = j;
                    cfg.routing_iters = iters;
                    Rng rng(31);
                    ParamStore<float> s;
                    init_m_function(s, "m/", cfg, rng);
                    EXPECT_EQ(s.num_scalars(), m_function_param_count(cfg));
                    Tape<float> tape;
                    auto out = m_function(s, "m/", cfg, std::optional(tape.constant(Tensor<float>({3, 2}, 0.5f))),
                                          tape.constant(Tensor<float>({3, 8}, -0.25f)));
                    EXPECT_EQ(out.out.shape(), (Shape{3, 8}));
                }
}

TEST(MFunction, Deterministic) {
    for (auto c : kBackends) {
        const auto cfg = make_cfg(c);
        auto run = [&] {
            const auto s = make_store(cfg, 32);
            Tape<double> tape;
            return m_function(s, "m/", cfg, std::optional(tape.constant(Tensor<double>({1, 3}, 0.3))),
                              tape.constant(Tensor<double>({1, 8}, -0.1)))
                .out.value();
        };
        EXPECT_EQ(run(), run());
    }
}

TEST(MFunction, GradientCheckPerBackend) {
    for (auto c : kBackends) {
        for (auto act : {GcnActivation::kSigmoid, GcnActivation::kRelu}) {
            if (c != Composition::kGcn && act == GcnActivation::kRelu) continue;
            auto cfg = make_cfg(c);
            cfg.gcn_activation = act;
            auto s = make_store(cfg, 33);
            Rng rng(34);
            s.create("x", t::random_tensor({2, cfg.d_x}, rng));
            s.create("h", t::random_tensor({2, cfg.d_h}, rng));
            const auto weights = t::random_tensor({2, cfg.d_h}, rng);
            auto f = [&](Tape<double>& tape, const ParamStore<double>& p) {
                auto r = m_function(p, "m/", cfg, std::optional(tape.param(p, "x")), tape.param(p, "h"));
                return ops::add(ops::sum(ops::mul(r.out, tape.constant(weights))), ops::sum(zone_disagreement(r.zones)));
            };
            auto rep = gradient_check(f, s);
            EXPECT_TRUE(rep.pass) << to_string(c) << " max rel error " << rep.max_rel_error << " at " << rep.worst.param;
            EXPECT_LT(rep.max_rel_error, 1e-4);
        }
    }
}

TEST(MFunction, ZonePermutationEquivariance) {
    const std::vector<std::size_t> perm{2, 0, 3, 1};
    for (auto c : {Composition::kSat, Composition::kGcn}) {
        const auto cfg = make_cfg(c);
        const auto s = make_store(cfg, 35);
        auto p = s;
        const std::size_t d_o = cfg.d_o();
        Tensor<double> agg = s.get("m/agg/w");
        for (std::size_t i = 0; i < 4; ++i) {
            p.assign("m/zone_proj/" + std::to_string(i), s.get("m/zone_proj/" + std::to_string(perm[i])));
            for (std::size_t r = 0; r < d_o; ++r)
                for (std::size_t col = 0; col < cfg.d_h; ++col)
                    agg.at(i * d_o + r, col) = s.get("m/agg/w").at(perm[i] * d_o + r, col);
        }
        p.assign("m/agg/w", agg);

        Rng rng(36);
        const auto x = t::random_tensor({1, 3}, rng), h = t::random_tensor({1, 8}, rng);
        Tape<double> tape;
        auto a = m_function(s, "m/", cfg, std::optional(tape.constant(x)), tape.constant(h));
        auto b = m_function(p, "m/", cfg, std::optional(tape.constant(x)), tape.constant(h));
        const Mat oa = rank3_slab(a.composed.value(), 0), ob = rank3_slab(b.composed.value(), 0);
        for (std::size_t i = 0; i < 4; ++i)
            for (std::size_t k = 0; k < d_o; ++k) EXPECT_NEAR(ob[i][k], oa[perm[i]][k], 1e-12);
        for (std::size_t k = 0; k < 8; ++k) EXPECT_NEAR(a.out.value()[k], b.out.value()[k], 1e-12);
    }
}

// ---- disagreement -------------------------------------------------------------

TEST(ZoneDisagreement, Anchors) {
    Tape<double> tape;
    EXPECT_NEAR(zone_disagreement(zones_var(tape, {{{1, 2}, {1, 2}, {1, 2}}})).value().item(), -1.0, 1e-12);
    const Mat orth{{1, 0, 0, 0}, {0, 2, 0, 0}, {0, 0, 3, 0}, {0, 0, 0, 4}};
    EXPECT_NEAR(zone_disagreement(zones_var(tape, {orth})).value().item(), -0.25, 1e-12);
    const double r = 1.0 / std::sqrt(2.0);
    EXPECT_NEAR(zone_disagreement(zones_var(tape, {{{1, 0}, {r, r}}})).value().item(), -(2.0 + std::sqrt(2.0)) / 4.0, 1e-12);
    EXPECT_NEAR(-(2.0 + std::sqrt(2.0)) / 4.0, -0.8536, 1e-4);
}

TEST(ZoneDisagreement, BoundedAndMatchesPairwiseOracle) {
    Rng rng(37);
    for (int trial = 0; trial < 200; ++trial) {
        const std::size_t n = 1 + rng() % 8, d = 1 + rng() % 6;
        std::vector<Mat> z{t::to_mat(t::random_tensor({n, d}, rng, 3.0)), t::to_mat(t::random_tensor({n, d}, rng, 0.01))};
        Tape<double> tape;
        auto v = zone_disagreement(zones_var(tape, z)).value();
        ASSERT_EQ(v.shape(), (Shape{2, 1}));
        for (std::size_t b = 0; b < 2; ++b) {
            EXPECT_GE(v[b], -1.0 - 1e-12);
            EXPECT_LE(v[b], 1e-12);
            EXPECT_NEAR(v[b], oracle_disagreement(z[b]), 1e-12);
        }
    }
}

TEST(ComposeProperties, AttentionAndCouplingRowsSumToOne) {
    Rng rng(38);
    for (int trial = 0; trial < 100; ++trial) {
        const std::size_t n = 1 + rng() % 4;
        auto cfg = make_cfg(trial % 2 ? Composition::kSat : Composition::kCap, 2, 4 * n, n);
        cfg.out_zones = (trial / 2) % 2 ? 2 : 4;
        cfg.routing_iters = 1 + rng() % 4;
        const auto s = make_store(cfg, 100 + trial);
        Tape<double> tape;
        auto z = tape.constant(t::random_tensor({2, n, 4}, rng, 3.0));
        auto r = compose(s, "m/", cfg, z);
        for (const auto& w : r.weights) {
            const std::size_t cols = w.cols();
            for (std::size_t row = 0; row < w.rows(); ++row) {
                double sum = 0;
                for (std::size_t k = 0; k < cols; ++k) sum += w.at(row, k);
                EXPECT_NEAR(sum, 1.0, 1e-9);
            }
        }
        if (cfg.composition == Composition::kCap)
            for (std::size_t i = 0; i < r.zones.value().rows(); ++i) {
                const auto& o = r.zones.value();
                std::vector<double> row(o.data() + i * o.cols(), o.data() + (i + 1) * o.cols());
                EXPECT_LT(t::norm(row), 1.0);
            }
    }
}
