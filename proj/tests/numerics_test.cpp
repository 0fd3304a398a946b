#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "mzu/gradcheck.hpp"
#include "mzu/ops.hpp"
#include "mzu/optim.hpp"
#include "test_util.hpp"

using namespace mzu;
namespace t = mzu::test;

namespace {

Var<double> as_var(Tape<double>& tape, std::vector<double> v) { return tape.constant(Tensor<double>::row(std::move(v))); }

}  // namespace

TEST(Tensor, RejectsZeroExtentsAndLengthMismatch) {
    EXPECT_THROW(Tensor<double>({2, 0}), ShapeError);
    try {
        Tensor<double>({2, 3}, std::vector<double>(5));
        FAIL();
    } catch (const ShapeError& e) {
        EXPECT_EQ(e.op(), "tensor");
        ASSERT_EQ(e.dims().size(), 1u);
        EXPECT_EQ(e.dims()[0], (Shape{2, 3}));
    }
}

TEST(Tensor, RowsFoldLeadingAxes) {
    Tensor<float> x({2, 3, 4});
    EXPECT_EQ(x.rows(), 6u);
    EXPECT_EQ(x.cols(), 4u);
    EXPECT_EQ(x.size(), 24u);
}

TEST(ParamStore, NamesUniqueAndShapesImmutable) {
    ParamStore<double> s;
    s.create_zeros("w", {2, 2});
    EXPECT_THROW(s.create_zeros("w", {2, 2}), std::invalid_argument);
    EXPECT_THROW(s.assign("w", Tensor<double>({3, 2})), ShapeError);
    EXPECT_EQ(s.entry("w").m.shape(), (Shape{2, 2}));
    EXPECT_EQ(s.entry("w").v.shape(), (Shape{2, 2}));
}

TEST(Ops, Anchors) {
    Tape<double> tape;
    EXPECT_EQ(ops::tanh(as_var(tape, {0.0})).value()[0], 0.0);
    auto sm = ops::softmax_rows(as_var(tape, {0.0, 0.0})).value();
    EXPECT_DOUBLE_EQ(sm[0], 0.5);
    EXPECT_DOUBLE_EQ(sm[1], 0.5);
    EXPECT_NEAR(ops::cosine_rows(as_var(tape, {1, 0}), as_var(tape, {1, 0})).value().item(), 1.0, 1e-12);
}

TEST(Ops, MatmulMatchesTripleLoop) {
    Rng rng(3);
    auto a = t::random_tensor({2, 3}, rng), b = t::random_tensor({3, 4}, rng);
    Tape<double> tape;
    auto c = ops::matmul(tape.constant(a), tape.constant(b)).value();
    const auto want = t::matmul(t::to_mat(a), t::to_mat(b));
    EXPECT_LT(t::max_abs_diff(t::to_mat(c), want), 1e-12);
}

TEST(Ops, BmmMatchesPerSlabOracle) {
    Rng rng(4);
    auto a = t::random_tensor({3, 4, 2}, rng), b = t::random_tensor({3, 5, 2}, rng);
    Tape<double> tape;
    auto c = ops::bmm(tape.constant(a), tape.constant(b), false, true).value();
    ASSERT_EQ(c.shape(), (Shape{3, 4, 5}));
    for (std::size_t g = 0; g < 3; ++g)
        EXPECT_LT(t::max_abs_diff(t::slab(c, g), t::matmul(t::slab(a, g), t::transpose(t::slab(b, g)))), 1e-12);
}

TEST(Ops, ShapeMismatchNamesOpAndDims) {
    Tape<double> tape;
    try {
        ops::matmul(tape.constant(Tensor<double>({2, 3})), tape.constant(Tensor<double>({4, 2})));
        FAIL();
    } catch (const ShapeError& e) {
        EXPECT_EQ(e.op(), "matmul");
        ASSERT_EQ(e.dims().size(), 2u);
        EXPECT_EQ(e.dims()[1], (Shape{4, 2}));
    }
    EXPECT_THROW(ops::add(tape.constant(Tensor<double>({2, 3})), tape.constant(Tensor<double>({3, 2}))), ShapeError);
}

TEST(Ops, EmbeddingRejectsUnknownIds) {
    Tape<double> tape;
    Var<double> table = tape.constant(Tensor<double>({3, 2}));
    const int bad[] = {3};
    EXPECT_THROW(ops::embedding(table, std::span<const int>(bad)), DomainError);
}

TEST(Ops, SoftmaxRowsAreDistributions) {
    Rng rng(11);
    for (int trial = 0; trial < 100; ++trial) {
        const std::size_t r = 1 + rng() % 5, c = 1 + rng() % 7;
        Tape<double> tape;
        auto p = ops::softmax_rows(tape.constant(t::random_tensor({r, c}, rng, 20.0))).value();
        for (std::size_t i = 0; i < r; ++i) {
            double s = 0;
            for (std::size_t j = 0; j < c; ++j) {
                EXPECT_GT(p.at(i, j), 0.0);
                s += p.at(i, j);
            }
            EXPECT_NEAR(s, 1.0, 1e-6);
        }
    }
}

TEST(Ops, CosineRangeAndSelfSimilarity) {
    Rng rng(12);
    for (int trial = 0; trial < 100; ++trial) {
        const std::size_t n = 1 + rng() % 9;
        Tape<double> tape;
        auto a = tape.constant(t::random_tensor({3, n}, rng, 5.0));
        auto b = tape.constant(t::random_tensor({3, n}, rng, 5.0));
        auto ab = ops::cosine_rows(a, b).value(), aa = ops::cosine_rows(a, a).value();
        for (std::size_t i = 0; i < 3; ++i) {
            EXPECT_LE(std::abs(ab[i]), 1.0 + 1e-12);
            EXPECT_NEAR(aa[i], 1.0, 1e-6);
        }
    }
}

TEST(Ops, ZeroNormGuardGivesZeroValueAndGradient) {
    ParamStore<double> s;
    s.create_zeros("a", {1, 3});
    s.create("b", Tensor<double>::row({1, 2, 3}));
    Tape<double> tape;
    Var<double> a = tape.param(s, "a"), b = tape.param(s, "b");
    Var<double> loss = ops::add(ops::sum(ops::cosine_rows(a, b)), ops::sum(ops::squash_rows(a)));
    EXPECT_EQ(loss.value().item(), 0.0);
    auto g = tape.gradients(loss, s);
    for (double v : g.at("a").values()) EXPECT_EQ(v, 0.0);
    for (double v : g.at("b").values()) EXPECT_EQ(v, 0.0);
}

TEST(Ops, LayerNormExamples) {
    using V = std::vector<double>;
    const auto ones = Tensor<double>::row(V{1, 1, 1, 1}), zeros = Tensor<double>({1, 4});
    auto y = ops::layer_norm(Tensor<double>::row(V{3, 3, 3, 3}), ones, zeros);
    for (double v : y.values()) EXPECT_NEAR(v, 0.0, 1e-9);
    auto z = ops::layer_norm(Tensor<double>::row(V{1, -1}), Tensor<double>::row(V{1, 1}), Tensor<double>({1, 2}), 1e-14);
    EXPECT_NEAR(z[0], 1.0, 1e-9);
    EXPECT_NEAR(z[1], -1.0, 1e-9);
    EXPECT_THROW(ops::layer_norm(Tensor<double>::row(V{1, 2, 3}), ones, zeros), ShapeError);

    Rng rng(5);
    for (int trial = 0; trial < 100; ++trial) {
        const std::size_t n = 4 + rng() % 60;
        auto x = t::random_tensor({1, n}, rng, 10.0);
        auto out = ops::layer_norm(x, Tensor<double>({1, n}, 1.0), Tensor<double>({1, n}));
        double mean = 0, var = 0;
        for (double v : out.values()) mean += v;
        mean /= static_cast<double>(n);
        for (double v : out.values()) var += (v - mean) * (v - mean);
        var /= static_cast<double>(n);
        EXPECT_NEAR(mean, 0.0, 1e-9);
        EXPECT_NEAR(var, 1.0, 1e-3);
    }
}

TEST(Ops, DropoutMask) {
    Rng rng(9);
    const auto off = ops::dropout_mask<float>({4, 5}, 0.0, rng), eval = ops::dropout_mask<float>({4, 5}, 0.7, rng, false);
    for (float v : off.values()) EXPECT_EQ(v, 1.0f);
    for (float v : eval.values()) EXPECT_EQ(v, 1.0f);
    EXPECT_THROW(ops::dropout_mask<float>({2}, 1.0, rng), DomainError);
    EXPECT_THROW(ops::dropout_mask<float>({2}, -0.1, rng), DomainError);

    const std::size_t n = 100000;
    auto mask = ops::dropout_mask<double>({n}, 0.5, rng);
    double mean = std::accumulate(mask.storage().begin(), mask.storage().end(), 0.0) / static_cast<double>(n);
    // Each entry is 0 or 2 with equal odds: variance 1.
    EXPECT_NEAR(mean, 1.0, 3.0 / std::sqrt(static_cast<double>(n)));
    for (double v : mask.values()) EXPECT_TRUE(v == 0.0 || v == 2.0);

    Rng r1(77), r2(77);
    EXPECT_EQ(ops::dropout_mask<float>({50}, 0.3, r1), ops::dropout_mask<float>({50}, 0.3, r2));
}

// ---- reverse sweep --------------------------------------------------------

TEST(Tape, GradientOfLinearSum) {
    ParamStore<double> s;
    s.create("w", Tensor<double>::matrix(2, 3, {1, 2, 3, 4, 5, 6}));
    s.create_zeros("unused", {2});
    Tape<double> tape;
    const std::vector<double> xv{0.5, -1.0};
    Var<double> x = tape.constant(Tensor<double>::row(xv));
    Var<double> loss = ops::sum(ops::matmul(x, tape.param(s, "w")));
    auto g = tape.gradients(loss, s);
    for (std::size_t i = 0; i < 2; ++i)
        for (std::size_t j = 0; j < 3; ++j) EXPECT_DOUBLE_EQ(g.at("w").at(i, j), xv[i]);
    for (double v : g.at("unused").values()) EXPECT_EQ(v, 0.0);
}

TEST(Tape, TanhAtZeroAndFanOut) {
    ParamStore<double> s;
    s.create_zeros("w", {1, 1});
    s.create("u", Tensor<double>::row({3.0}));
    Tape<double> tape;
    Var<double> w = tape.param(s, "w"), u = tape.param(s, "u");
    Var<double> loss = ops::add(ops::sum(ops::tanh(w)), ops::sum(ops::mul(u, u)));
    auto g = tape.gradients(loss, s);
    EXPECT_DOUBLE_EQ(g.at("w")[0], 1.0);
    EXPECT_DOUBLE_EQ(g.at("u")[0], 6.0);
}

TEST(Tape, NonScalarLossRejected) {
    ParamStore<double> s;
    s.create_zeros("w", {2, 2});
    Tape<double> tape;
    EXPECT_THROW(tape.gradients(ops::tanh(tape.param(s, "w")), s), ShapeError);
}

TEST(Tape, SweepIsLinearInTheLoss) {
    Rng rng(21);
    ParamStore<double> s;
    s.create("w", t::random_tensor({3, 3}, rng));
    auto l1 = [](Tape<double>& tp, const ParamStore<double>& p) { return ops::sum(ops::tanh(tp.param(p, "w"))); };
    auto l2 = [](Tape<double>& tp, const ParamStore<double>& p) {
        Var<double> w = tp.param(p, "w");
        return ops::sum(ops::softmax_rows(ops::matmul(w, w)));
    };
    Tape<double> a, b, c;
    auto g1 = a.gradients(l1(a, s), s), g2 = b.gradients(l2(b, s), s);
    auto g12 = c.gradients(ops::add(l1(c, s), l2(c, s)), s);
    for (std::size_t i = 0; i < 9; ++i) EXPECT_NEAR(g12.at("w")[i], g1.at("w")[i] + g2.at("w")[i], 1e-12);
}

// ---- gradient checker -----------------------------------------------------

TEST(GradCheck, QuadraticIsExact) {
    Rng rng(1);
    ParamStore<double> s;
    s.create("theta", t::random_tensor({4, 5}, rng, 3.0));
    auto f = [](Tape<double>& tp, const ParamStore<double>& p) {
        Var<double> th = tp.param(p, "theta");
        return ops::scale(ops::sum(ops::mul(th, th)), 0.5);
    };
    GradCheckOptions opt;
    opt.tol = 1e-8;
    auto r = gradient_check(f, s, opt);
    EXPECT_TRUE(r.pass) << r.max_rel_error;
    EXPECT_EQ(r.coords_checked, 20u);
}

TEST(GradCheck, FourthOrderStencilIsExactForQuartics) {
    Rng rng(11);
    ParamStore<double> s;
    s.create("theta", t::random_tensor({6}, rng, 1.0));
    auto f = [](Tape<double>& tp, const ParamStore<double>& p) {
        Var<double> th = tp.param(p, "theta");
        Var<double> sq = ops::mul(th, th);
        return ops::scale(ops::sum(ops::mul(sq, sq)), 0.25);
    };
    GradCheckOptions opt;
    opt.eps = 1e-2;
    const auto coarse = gradient_check(f, s, opt);
    opt.fourth_order = true;
    const auto fine = gradient_check(f, s, opt);
    for (std::size_t i = 0; i < 6; ++i) {
        const double th = s.get("theta")[i];
        // Three-point error on x^4 / 4 is exactly h^2 * x.
        EXPECT_NEAR(coarse.entries[i].numeric - coarse.entries[i].analytic, 1e-4 * th, 1e-10);
        EXPECT_NEAR(fine.entries[i].numeric, th * th * th, 1e-10);
    }
}

TEST(GradCheck, ConstantFunction) {
    ParamStore<double> s;
    s.create_filled("theta", {3}, 2.0);
    auto f = [](Tape<double>& tp, const ParamStore<double>&) { return tp.constant(Tensor<double>({1}, 4.0)); };
    auto r = gradient_check(f, s);
    EXPECT_TRUE(r.pass);
    for (const auto& e : r.entries) {
        EXPECT_NEAR(e.numeric, 0.0, 1e-9);
        EXPECT_EQ(e.analytic, 0.0);
    }
}

TEST(GradCheck, NonFiniteLossIsAnError) {
    ParamStore<double> s;
    s.create_filled("theta", {1}, 1.0);
    auto f = [](Tape<double>& tp, const ParamStore<double>&) {
        return tp.constant(Tensor<double>({1}, std::numeric_limits<double>::quiet_NaN()));
    };
    EXPECT_THROW(gradient_check(f, s), std::domain_error);
}

TEST(GradCheck, SamplesAtMostTheCoordinateCap) {
    Rng rng(2);
    ParamStore<double> s;
    s.create("theta", t::random_tensor({30, 30}, rng));
    auto f = [](Tape<double>& tp, const ParamStore<double>& p) { return ops::sum(ops::tanh(tp.param(p, "theta"))); };
    auto r = gradient_check(f, s);
    EXPECT_EQ(r.coords_checked, 200u);
    EXPECT_TRUE(r.pass);
}

namespace {

using UnaryOp = std::function<Var<double>(Var<double>)>;

// loss = sum(op(a) * R) for a fixed random R, which weights every output
// coordinate differently.
void check_unary(const Shape& shape, const UnaryOp& op, std::uint32_t seed, double offset = 0.0) {
    Rng rng(seed);
    ParamStore<double> s;
    auto a = t::random_tensor(shape, rng);
    for (auto& v : a.storage()) v += (v >= 0 ? offset : -offset);
    s.create("a", a);
    Tape<double> probe;
    const Shape out_shape = op(probe.param(s, "a")).shape();
    const auto r = t::random_tensor(out_shape, rng);
    auto f = [&](Tape<double>& tp, const ParamStore<double>& p) {
        return ops::sum(ops::mul(op(tp.param(p, "a")), tp.constant(r)));
    };
    auto rep = gradient_check(f, s);
    EXPECT_TRUE(rep.pass) << "max rel error " << rep.max_rel_error << " at " << rep.worst.param << "[" << rep.worst.index << "]";
}

using BinaryOp = std::function<Var<double>(Var<double>, Var<double>)>;

void check_binary(const Shape& sa, const Shape& sb, const BinaryOp& op, std::uint32_t seed) {
    Rng rng(seed);
    ParamStore<double> s;
    s.create("a", t::random_tensor(sa, rng));
    s.create("b", t::random_tensor(sb, rng));
    Tape<double> probe;
    const auto r = t::random_tensor(op(probe.param(s, "a"), probe.param(s, "b")).shape(), rng);
    auto f = [&](Tape<double>& tp, const ParamStore<double>& p) {
        return ops::sum(ops::mul(op(tp.param(p, "a"), tp.param(p, "b")), tp.constant(r)));
    };
    auto rep = gradient_check(f, s);
    EXPECT_TRUE(rep.pass) << "max rel error " << rep.max_rel_error << " at " << rep.worst.param << "[" << rep.worst.index << "]";
}

}  // namespace

TEST(GradCheck, EveryPrimitive) {
    for (std::uint32_t seed = 1; seed <= 3; ++seed) {
        check_binary({3, 4}, {4, 2}, [](auto a, auto b) { return ops::matmul(a, b); }, seed);
        check_binary({2, 3, 4}, {2, 4, 5}, [](auto a, auto b) { return ops::bmm(a, b); }, seed);
        check_binary({2, 4, 3}, {2, 5, 4}, [](auto a, auto b) { return ops::bmm(a, b, true, true); }, seed);
        check_binary({3, 4}, {3, 4}, [](auto a, auto b) { return ops::add(a, b); }, seed);
        check_binary({3, 4}, {3, 4}, [](auto a, auto b) { return ops::sub(a, b); }, seed);
        check_binary({3, 4}, {3, 4}, [](auto a, auto b) { return ops::mul(a, b); }, seed);
        check_binary({3, 4}, {1, 4}, [](auto a, auto b) { return ops::add_bias(a, b); }, seed);
        check_binary({3, 4}, {3, 2}, [](auto a, auto b) {
            const std::vector<Var<double>> parts{a, b};
            return ops::concat_cols<double>(parts);
        }, seed);
        check_binary({3, 4}, {2, 4}, [](auto a, auto b) {
            const std::vector<Var<double>> parts{a, b};
            return ops::concat_rows<double>(parts);
        }, seed);
        check_binary({4, 5}, {4, 5}, [](auto a, auto b) { return ops::cosine_rows(a, b); }, seed);
        check_binary({2, 6}, {1, 6}, [](auto x, auto g) {
            return ops::layer_norm_rows(x, g, ops::scale(g, 0.3));
        }, seed);

        check_unary({3, 4}, [](auto a) { return ops::scale(a, -1.7); }, seed);
        check_unary({3, 4}, [](auto a) { return ops::add_scalar(a, 0.4); }, seed);
        check_unary({3, 4}, [](auto a) { return ops::sigmoid(ops::scale(a, 4.0)); }, seed);
        check_unary({3, 4}, [](auto a) { return ops::tanh(ops::scale(a, 2.0)); }, seed);
        check_unary({3, 4}, [](auto a) { return ops::relu(a); }, seed, 0.05);
        check_unary({3, 6}, [](auto a) { return ops::slice_cols(a, 1, 4); }, seed);
        check_unary({5, 2}, [](auto a) { return ops::slice_rows(a, 2, 5); }, seed);
        check_unary({3, 4}, [](auto a) { return ops::reshape(a, {2, 6}); }, seed);
        check_unary({2, 3, 4}, [](auto a) { return ops::swap_axes(a, 1); }, seed);
        check_unary({2, 3, 4}, [](auto a) { return ops::swap_axes(a, 0); }, seed);
        check_unary({3, 5}, [](auto a) { return ops::softmax_rows(ops::scale(a, 3.0)); }, seed);
        check_unary({3, 5}, [](auto a) { return ops::normalize_rows(a); }, seed);
        check_unary({3, 5}, [](auto a) { return ops::l2_norm_rows(a); }, seed);
        check_unary({3, 5}, [](auto a) { return ops::squash_rows(ops::scale(a, 2.0)); }, seed);
        check_unary({3, 5}, [](auto a) { return ops::sum(a); }, seed);
        check_unary({3, 5}, [](auto a) { return ops::mean(a); }, seed);
        check_unary({3, 5}, [](auto a) { return ops::mean_over_rows(a); }, seed);
        check_unary({4, 3}, [](auto a) {
            const int ids[] = {2, 0, 2, 3};
            return ops::embedding(a, std::span<const int>(ids));
        }, seed);
        check_unary({3, 4}, [](auto a) {
            Rng r(5);
            return ops::dropout(a, ops::dropout_mask<double>({3, 4}, 0.5, r));
        }, seed);
        check_unary({3, 5}, [](auto a) {
            const int tg[] = {4, 0, 2};
            return ops::cross_entropy_sum(ops::scale(a, 3.0), std::span<const int>(tg));
        }, seed);
        check_unary({2, 3, 3}, [](auto a) { return ops::set_diagonal(a, 1.0); }, seed);
        // Positive entries keep every degree above the clamp.
        check_unary({2, 3, 3}, [](auto a) { return ops::sym_normalize(ops::add_scalar(ops::scale(a, 0.3), 1.0), 1e-3); }, seed);
    }
}

// ---- optimizer --------------------------------------------------------------

TEST(Clip, Examples) {
    GradMap<double> g;
    g["a"] = Tensor<double>::row({3, 4});
    auto same = global_norm_clip(g, 5.0);
    EXPECT_EQ(same.at("a"), g.at("a"));
    g["a"] = Tensor<double>::row({6, 8});
    auto half = global_norm_clip(g, 5.0);
    EXPECT_DOUBLE_EQ(half.at("a")[0], 3.0);
    EXPECT_DOUBLE_EQ(half.at("a")[1], 4.0);
    g["a"] = Tensor<double>::row({0, 0});
    EXPECT_EQ(global_norm_clip(g, 5.0).at("a"), g.at("a"));
    EXPECT_THROW(global_norm_clip(g, 0.0), std::invalid_argument);
}

TEST(Clip, PostClipNormBounded) {
    Rng rng(8);
    for (int trial = 0; trial < 100; ++trial) {
        GradMap<float> g;
        for (int k = 0; k < 3; ++k) {
            Tensor<float> x({1 + rng() % 10});
            for (auto& v : x.storage()) v = static_cast<float>(50.0 * (uniform01(rng) - 0.5));
            g["p" + std::to_string(k)] = x;
        }
        const double clip = 0.1 + 10.0 * uniform01(rng);
        EXPECT_LE(global_norm(global_norm_clip(g, clip)), clip + 1e-6 * std::max(1.0, clip) + 1e-6);
    }
}

TEST(Adam, FirstStepMovesByLearningRate) {
    ParamStore<double> s;
    s.create_filled("w", {1}, 0.25);
    GradMap<double> g;
    g["w"] = Tensor<double>({1}, 1.0);
    adam_update(s, g, AdamConfig{});
    EXPECT_NEAR(s.get("w")[0] - 0.25, -0.001, 1e-8);
    EXPECT_EQ(s.entry("w").step, 1u);
}

TEST(Adam, ZeroGradientLeavesFreshParameterAndDecaysMoments) {
    ParamStore<double> s;
    s.create_filled("w", {2}, 1.5);
    GradMap<double> zero;
    zero["w"] = Tensor<double>({2});
    adam_update(s, zero, AdamConfig{});
    EXPECT_EQ(s.get("w")[0], 1.5);
    EXPECT_EQ(s.entry("w").m[0], 0.0);

    GradMap<double> one;
    one["w"] = Tensor<double>({2}, 1.0);
    adam_update(s, one, AdamConfig{});
    const double m = s.entry("w").m[0], v = s.entry("w").v[0];
    adam_update(s, zero, AdamConfig{});
    EXPECT_DOUBLE_EQ(s.entry("w").m[0], 0.9 * m);
    EXPECT_DOUBLE_EQ(s.entry("w").v[0], 0.999 * v);
}

TEST(Adam, ShapeMismatchIsAnError) {
    ParamStore<double> s;
    s.create_zeros("w", {2});
    GradMap<double> g;
    g["w"] = Tensor<double>({3});
    EXPECT_THROW(adam_update(s, g, AdamConfig{}), ShapeError);
}

TEST(Adam, Deterministic) {
    auto run = [] {
        Rng rng(99);
        ParamStore<float> s;
        s.create_glorot("w", 4, 3, rng);
        for (int k = 0; k < 10; ++k) {
            Tape<float> tape;
            Var<float> w = tape.param(s, "w");
            auto g = tape.gradients(ops::sum(ops::tanh(ops::matmul(w, ops::reshape(w, {3, 4})))), s);
            adam_update(s, g, AdamConfig{});
        }
        return s.get("w");
    };
    EXPECT_EQ(run(), run());
}
