#include <gtest/gtest.h>

#include <cmath>
#include <functional>
#include <vector>

#include "panolab/autodiff.hpp"
#include "panolab/rng.hpp"

using namespace panolab;
using ad::Shape;
using ad::Tape;
using ad::Tensor;

namespace {

// Central finite differences, h = 1e-5, against the analytic gradient.
// Comparison uses a hybrid tolerance: |a-b| <= rel*max(|a|,|b|) + abs_floor,
// which matches "relative error 1e-4" away from zero without rejecting
// exact-zero gradients for FD round-off.
constexpr double kFdStep = 1e-5;
constexpr double kRelTol = 1e-4;
constexpr double kAbsFloor = 1e-7;

using LossFn = std::function<Tensor(Tape&, std::vector<Tensor>&)>;

struct FdCase {
    std::vector<Shape> shapes;
    LossFn build;
    bool avoid_kink = false; // keep inputs away from 0 (relu)
};

std::vector<std::vector<double>> draw_inputs(const FdCase& c, Rng& rng) {
    std::vector<std::vector<double>> data;
    for (const auto& s : c.shapes) {
        std::vector<double> v(ad::numel(s));
        for (auto& x : v) {
            x = rng.uniform(-1.0, 1.0);
            if (c.avoid_kink && std::abs(x) < 0.05) x += (x >= 0 ? 0.1 : -0.1);
        }
        data.push_back(std::move(v));
    }
    return data;
}

double eval_loss(const FdCase& c, const std::vector<std::vector<double>>& data) {
    Tape tape;
    std::vector<Tensor> xs;
    for (std::size_t i = 0; i < c.shapes.size(); ++i) xs.push_back(tape.watch(c.shapes[i], data[i]));
    return c.build(tape, xs).item();
}

void check_fd(const FdCase& c, Rng& rng, const char* label) {
    auto data = draw_inputs(c, rng);

    Tape tape;
    std::vector<Tensor> xs;
    for (std::size_t i = 0; i < c.shapes.size(); ++i) xs.push_back(tape.watch(c.shapes[i], data[i]));
    Tensor loss = c.build(tape, xs);
    auto grads = tape.backward(loss);

    for (std::size_t i = 0; i < xs.size(); ++i) {
        const auto& g = grads.at(xs[i].node()).data();
        for (std::size_t j = 0; j < data[i].size(); ++j) {
            auto bumped = data;
            bumped[i][j] += kFdStep;
            const double fp = eval_loss(c, bumped);
            bumped[i][j] = data[i][j] - kFdStep;
            const double fm = eval_loss(c, bumped);
            const double fd = (fp - fm) / (2.0 * kFdStep);
            const double tol = kRelTol * std::max(std::abs(fd), std::abs(g[j])) + kAbsFloor;
            ASSERT_NEAR(g[j], fd, tol) << label << " input " << i << " elem " << j;
        }
    }
}

void run_battery(const FdCase& c, const char* label, int cases = 100) {
    Rng rng(20240607);
    for (int k = 0; k < cases; ++k) {
        Rng sub = rng.child("case", static_cast<std::uint64_t>(k));
        check_fd(c, sub, label);
    }
}

Tensor spread(const Tensor& t, Rng& rng) {
    // Contract an op output to a scalar through a fixed random linear form so
    // the full Jacobian is exercised, not just the row sums.
    std::vector<double> w(t.size());
    for (auto& x : w) x = rng.uniform(-1.0, 1.0);
    return ad::sum(ad::mul(t, Tensor::constant(t.shape(), w)));
}

} // namespace

TEST(Matmul, IdentityAndScalarExamples) {
    Tensor eye = Tensor::constant({2, 2}, {1, 0, 0, 1});
    Tensor b = Tensor::constant({2, 2}, {3, 4, 5, 6});
    Tensor c = ad::matmul(eye, b);
    EXPECT_EQ(c.data(), b.data());

    Tensor x = Tensor::constant({1, 1}, {2});
    Tensor y = Tensor::constant({1, 1}, {3});
    EXPECT_DOUBLE_EQ(ad::matmul(x, y).item(), 6.0);
}

TEST(Matmul, ShapeMismatchThrows) {
    Tensor a = Tensor::zeros({2, 3});
    Tensor b = Tensor::zeros({4, 2});
    EXPECT_THROW(ad::matmul(a, b), ShapeError);
}

TEST(Matmul, SumGradientIsOnesTimesBt) {
    Rng rng(7);
    std::vector<double> av = rng.normal_vec(20), bv = rng.normal_vec(15);
    Tape tape;
    Tensor a = tape.watch({4, 5}, av);
    Tensor b = Tensor::constant({5, 3}, bv);
    auto grads = tape.backward(ad::sum(ad::matmul(a, b)));
    const auto& ga = grads.at(a.node()).data();
    // dA = ones(4,3) * B^T: every row of dA equals the row sums of B.
    for (int i = 0; i < 4; ++i)
        for (int l = 0; l < 5; ++l) {
            double expect = 0.0;
            for (int j = 0; j < 3; ++j) expect += bv[static_cast<std::size_t>(l) * 3 + j];
            EXPECT_NEAR(ga[static_cast<std::size_t>(i) * 5 + l], expect, 1e-12);
        }
}

TEST(Elementwise, Examples) {
    Tensor x = Tensor::constant({3}, {-1, 0, 2});
    EXPECT_EQ(ad::relu(x).data(), (std::vector<double>{0, 0, 2}));

    Tensor y = Tensor::constant({3}, {1.5, -2.0, 0.25});
    Tensor z = ad::add(y, Tensor::scalar(0.0));
    EXPECT_EQ(z.data(), y.data());

    Tensor a = Tensor::constant({2, 2}, {1, 2, 3, 4});
    Tensor b = Tensor::constant({3}, {1, 2, 3});
    EXPECT_THROW(ad::add(a, b), ShapeError);
}

TEST(SoftmaxCrossEntropy, UniformAndOneHot) {
    Tensor logits = Tensor::zeros({2, 4});
    EXPECT_NEAR(ad::softmax_cross_entropy(logits, {1, 3}).item(), std::log(4.0), 1e-12);

    std::vector<double> big(5, 0.0);
    big[2] = 1000.0;
    Tensor hot = Tensor::constant({1, 5}, big);
    EXPECT_NEAR(ad::softmax_cross_entropy(hot, {2}).item(), 0.0, 1e-9);

    EXPECT_THROW(ad::softmax_cross_entropy(logits, {1, 4}), ValueError);
}

TEST(SoftmaxCrossEntropy, MatchesBruteForce) {
    Rng rng(11);
    std::vector<double> lv = rng.normal_vec(15);
    Tensor logits = Tensor::constant({3, 5}, lv);
    std::vector<int> targets = {4, 0, 2};
    // Independent direct-formula oracle.
    double expect = 0.0;
    for (int i = 0; i < 3; ++i) {
        double z = 0.0;
        for (int j = 0; j < 5; ++j) z += std::exp(lv[static_cast<std::size_t>(i) * 5 + j]);
        expect += std::log(z) - lv[static_cast<std::size_t>(i) * 5 + targets[static_cast<std::size_t>(i)]];
    }
    expect /= 3.0;
    EXPECT_NEAR(ad::softmax_cross_entropy(logits, targets).item(), expect, 1e-12);
}

TEST(KlDivergence, Examples) {
    Tensor p = Tensor::constant({1, 2}, {0.5, 0.5});
    Tensor logp = Tensor::constant({1, 2}, {std::log(0.5), std::log(0.5)});
    EXPECT_NEAR(ad::kl_divergence(p, logp).item(), 0.0, 1e-12);

    Tensor onehot = Tensor::constant({1, 2}, {1.0, 0.0});
    EXPECT_NEAR(ad::kl_divergence(onehot, logp).item(), std::log(2.0), 1e-12);

    Tensor bad = Tensor::constant({1, 2}, {1.5, -0.5});
    EXPECT_THROW(ad::kl_divergence(bad, logp), ValueError);
}

TEST(KlDivergence, MatchesDirectSum) {
    Rng rng(13);
    const int n = 4, c = 6;
    std::vector<double> pv(n * c), qv(n * c);
    for (int i = 0; i < n; ++i) {
        double sp = 0.0, sq = 0.0;
        for (int j = 0; j < c; ++j) {
            pv[static_cast<std::size_t>(i) * c + j] = std::abs(rng.normal()) + 1e-3;
            qv[static_cast<std::size_t>(i) * c + j] = std::abs(rng.normal()) + 1e-3;
            sp += pv[static_cast<std::size_t>(i) * c + j];
            sq += qv[static_cast<std::size_t>(i) * c + j];
        }
        for (int j = 0; j < c; ++j) {
            pv[static_cast<std::size_t>(i) * c + j] /= sp;
            qv[static_cast<std::size_t>(i) * c + j] /= sq;
        }
    }
    std::vector<double> logq(qv.size());
    for (std::size_t i = 0; i < qv.size(); ++i) logq[i] = std::log(qv[i]);
    double expect = 0.0;
    for (std::size_t i = 0; i < pv.size(); ++i) expect += pv[i] * (std::log(pv[i]) - logq[i]);
    expect /= n;
    EXPECT_NEAR(ad::kl_divergence(Tensor::constant({n, c}, pv), Tensor::constant({n, c}, logq)).item(),
                expect, 1e-10);
}

TEST(Backward, SumAndDotExamples) {
    Rng rng(3);
    std::vector<double> xv = rng.normal_vec(6);
    {
        Tape tape;
        Tensor x = tape.watch({6}, xv);
        auto grads = tape.backward(ad::sum(x));
        for (double g : grads.at(x.node()).data()) EXPECT_DOUBLE_EQ(g, 1.0);
    }
    {
        Tape tape;
        Tensor x = tape.watch({6}, xv);
        auto grads = tape.backward(ad::sum(ad::mul(x, x)));
        const auto& g = grads.at(x.node()).data();
        for (std::size_t i = 0; i < xv.size(); ++i) EXPECT_NEAR(g[i], 2.0 * xv[i], 1e-12);
    }
}

TEST(Backward, NonScalarLossThrows) {
    Tape tape;
    Tensor x = tape.watch({3}, {1, 2, 3});
    Tensor y = ad::relu(x);
    EXPECT_THROW(tape.backward(y), ShapeError);
}

TEST(Backward, TapeIsConsumed) {
    Tape tape;
    Tensor x = tape.watch({2}, {1, 2});
    Tensor loss = ad::sum(x);
    tape.backward(loss);
    EXPECT_TRUE(tape.consumed());
    EXPECT_THROW(tape.backward(loss), ValueError);
}

TEST(Backward, LeafGradientDefaultsToZero) {
    Tape tape;
    Tensor used = tape.watch({2}, {1, 2});
    Tensor orphan = tape.watch({3}, {1, 2, 3});
    auto grads = tape.backward(ad::sum(used));
    for (double g : grads.at(orphan.node()).data()) EXPECT_DOUBLE_EQ(g, 0.0);
}

TEST(Backward, GradientsAccumulateIntoParams) {
    ad::Param p("w", {2}, {1.0, 2.0});
    for (int pass = 0; pass < 2; ++pass) {
        Tape tape;
        Tensor w = tape.leaf(p);
        tape.backward(ad::sum(w));
    }
    EXPECT_DOUBLE_EQ(p.grad[0], 2.0);
    EXPECT_DOUBLE_EQ(p.grad[1], 2.0);
    p.zero_grad();
    EXPECT_DOUBLE_EQ(p.grad[0], 0.0);
}

TEST(Backward, SumOfLossesMatchesSeparatePasses) {
    Rng rng(17);
    std::vector<double> xv = rng.normal_vec(8);

    auto run = [&](int which) {
        Tape tape;
        Tensor x = tape.watch({2, 4}, xv);
        Tensor l1 = ad::mse(ad::gelu(x), Tensor::zeros({2, 4}));
        Tensor l2 = ad::mean(ad::mul(x, x));
        Tensor loss = which == 0 ? ad::add(l1, l2) : (which == 1 ? l1 : l2);
        return tape.backward(loss).at(x.node()).data();
    };
    auto combined = run(0);
    auto g1 = run(1);
    auto g2 = run(2);
    for (std::size_t i = 0; i < combined.size(); ++i)
        EXPECT_NEAR(combined[i], g1[i] + g2[i], 1e-12);
}

TEST(SgdStep, Examples) {
    std::vector<double> p = {1.0, 2.0};
    ad::sgd_step(p, {1.0, 1.0}, 0.5);
    EXPECT_EQ(p, (std::vector<double>{0.5, 1.5}));

    std::vector<double> q = {1.0, 2.0};
    ad::sgd_step(q, {5.0, 5.0}, 0.0);
    EXPECT_EQ(q, (std::vector<double>{1.0, 2.0}));

    std::vector<double> bad = {1.0};
    EXPECT_THROW(ad::sgd_step(bad, {1.0, 2.0}, 0.1), ShapeError);
    EXPECT_THROW(ad::sgd_step(bad, {1.0}, -0.1), ValueError);
}

TEST(SgdStep, QuadraticConvergesGeometrically) {
    // On f(p) = 0.5*||p||^2 the update is p <- (1-lr) p, so after k steps
    // p_k = (1-lr)^k p_0 and the norm decays monotonically.
    const double lr = 0.3;
    std::vector<double> p = {2.0, -1.0, 0.5};
    const std::vector<double> p0 = p;
    double prev_norm = std::hypot(p[0], p[1], p[2]);
    for (int k = 1; k <= 10; ++k) {
        ad::sgd_step(p, p, lr); // grad of 0.5||p||^2 is p
        const double factor = std::pow(1.0 - lr, k);
        for (int i = 0; i < 3; ++i) EXPECT_NEAR(p[i], factor * p0[i], 1e-12);
        const double norm = std::hypot(p[0], p[1], p[2]);
        EXPECT_LT(norm, prev_norm);
        prev_norm = norm;
    }
}

TEST(Stability, NoNanAtLargeMagnitudes) {
    std::vector<double> big = {1e6, -1e6, 12345.0, -0.5};
    Tensor t = Tensor::constant({4}, big);
    EXPECT_NO_THROW(ad::relu(t));
    EXPECT_NO_THROW(ad::gelu(t));
    EXPECT_NO_THROW(ad::softmax_rows(Tensor::constant({1, 4}, big)));
    EXPECT_NO_THROW(ad::log_softmax_rows(Tensor::constant({1, 4}, big)));
    EXPECT_NO_THROW(ad::softmax_cross_entropy(Tensor::constant({1, 4}, big), {0}));
    for (double v : ad::gelu(t).data()) EXPECT_TRUE(std::isfinite(v));
}

TEST(Stability, NonFiniteInputsRejected) {
    EXPECT_THROW(Tensor::constant({1}, {std::numeric_limits<double>::infinity()}), NumericError);
    EXPECT_THROW(ad::scale(Tensor::scalar(1.0), std::numeric_limits<double>::quiet_NaN()), NumericError);
}

// ---------------------------------------------------------------------------
// Finite-difference battery: every differentiable op, 100 seeded cases each.
// ---------------------------------------------------------------------------

TEST(FiniteDifference, Add) {
    run_battery({{{3, 4}, {3, 4}},
                 [](Tape&, std::vector<Tensor>& xs) {
                     Rng r(1);
                     return spread(ad::add(xs[0], xs[1]), r);
                 }},
                "add");
}

TEST(FiniteDifference, AddScalarBroadcast) {
    run_battery({{{3, 4}, {1}},
                 [](Tape&, std::vector<Tensor>& xs) {
                     Rng r(2);
                     return spread(ad::add(xs[0], xs[1]), r);
                 }},
                "add_scalar");
}

TEST(FiniteDifference, Mul) {
    run_battery({{{2, 5}, {2, 5}},
                 [](Tape&, std::vector<Tensor>& xs) {
                     Rng r(3);
                     return spread(ad::mul(xs[0], xs[1]), r);
                 }},
                "mul");
}

TEST(FiniteDifference, MulScalarBroadcast) {
    run_battery({{{1}, {4, 2}},
                 [](Tape&, std::vector<Tensor>& xs) {
                     Rng r(4);
                     return spread(ad::mul(xs[0], xs[1]), r);
                 }},
                "mul_scalar");
}

TEST(FiniteDifference, SubNegScale) {
    run_battery({{{6}, {6}},
                 [](Tape&, std::vector<Tensor>& xs) {
                     Rng r(5);
                     return spread(ad::sub(ad::scale(xs[0], 1.7), ad::neg(xs[1])), r);
                 }},
                "sub_neg_scale");
}

TEST(FiniteDifference, Relu) {
    run_battery({{{4, 3}},
                 [](Tape&, std::vector<Tensor>& xs) {
                     Rng r(6);
                     return spread(ad::relu(xs[0]), r);
                 },
                 true},
                "relu");
}

TEST(FiniteDifference, Gelu) {
    run_battery({{{4, 3}},
                 [](Tape&, std::vector<Tensor>& xs) {
                     Rng r(7);
                     return spread(ad::gelu(xs[0]), r);
                 }},
                "gelu");
}

TEST(FiniteDifference, Matmul) {
    run_battery({{{4, 5}, {5, 3}},
                 [](Tape&, std::vector<Tensor>& xs) {
                     Rng r(8);
                     return spread(ad::matmul(xs[0], xs[1]), r);
                 }},
                "matmul");
}

TEST(FiniteDifference, TransposeReshape) {
    run_battery({{{3, 4}},
                 [](Tape&, std::vector<Tensor>& xs) {
                     Rng r(9);
                     return spread(ad::reshape(ad::transpose(xs[0]), {2, 6}), r);
                 }},
                "transpose_reshape");
}

TEST(FiniteDifference, SumMeanMse) {
    run_battery({{{3, 3}, {3, 3}},
                 [](Tape&, std::vector<Tensor>& xs) {
                     Tensor l1 = ad::mse(xs[0], xs[1]);
                     Tensor l2 = ad::mean(ad::mul(xs[0], xs[0]));
                     return ad::add(l1, ad::add(l2, ad::sum(xs[1])));
                 }},
                "sum_mean_mse");
}

TEST(FiniteDifference, SoftmaxRows) {
    run_battery({{{3, 5}},
                 [](Tape&, std::vector<Tensor>& xs) {
                     Rng r(10);
                     return spread(ad::softmax_rows(xs[0]), r);
                 }},
                "softmax_rows");
}

TEST(FiniteDifference, LogSoftmaxRows) {
    run_battery({{{3, 5}},
                 [](Tape&, std::vector<Tensor>& xs) {
                     Rng r(11);
                     return spread(ad::log_softmax_rows(xs[0]), r);
                 }},
                "log_softmax_rows");
}

TEST(FiniteDifference, SoftmaxCrossEntropy) {
    run_battery({{{4, 6}},
                 [](Tape&, std::vector<Tensor>& xs) {
                     return ad::softmax_cross_entropy(xs[0], {1, 0, 5, 3});
                 }},
                "softmax_cross_entropy");
}

TEST(FiniteDifference, KlDivergence) {
    run_battery({{{2, 4}},
                 [](Tape&, std::vector<Tensor>& xs) {
                     Tensor target = Tensor::constant({2, 4}, {0.1, 0.2, 0.3, 0.4, 0.25, 0.25, 0.25, 0.25});
                     return ad::kl_divergence(target, ad::log_softmax_rows(xs[0]));
                 }},
                "kl_divergence");
}

TEST(FiniteDifference, GatherMeanBroadcastConcat) {
    run_battery({{{5, 3}, {1, 3}},
                 [](Tape&, std::vector<Tensor>& xs) {
                     Rng r(12);
                     Tensor rows = ad::gather_rows(xs[0], {4, 0, 0, 2});
                     Tensor pooled = ad::mean_rows(rows);
                     Tensor tiled = ad::broadcast_rows(xs[1], 4);
                     Tensor stacked = ad::concat_rows({pooled, ad::mean_rows(tiled), xs[1]});
                     return spread(stacked, r);
                 }},
                "gather_mean_broadcast_concat");
}
