#include <gtest/gtest.h>

#include "scalpel/coupling.hpp"
#include "test_support.hpp"

using namespace scalpel;
using scalpel::testing::min_permutation_cost;
using scalpel::testing::random_feasible_coupling;
using scalpel::testing::random_gmm;
using scalpel::testing::random_weights;

namespace {

Matrix random_costs(Rng& rng, Index n, Index m) {
    Matrix c(n, m);
    for (Index i = 0; i < n; ++i)
        for (Index j = 0; j < m; ++j) c(i, j) = rng.uniform() * 10.0;
    return c;
}

}  // namespace

TEST(Coupling, CostMatrixMatchesPairwiseCost) {
    Rng rng(1);
    const Gmm h = random_gmm(rng, 3, 4);
    const Gmm t = random_gmm(rng, 3, 5);
    const Matrix j = cost_matrix(h, t);
    ASSERT_EQ(j.rows(), 4);
    ASSERT_EQ(j.cols(), 5);
    for (Index r = 0; r < 4; ++r)
        for (Index c = 0; c < 5; ++c) EXPECT_EQ(j(r, c), cost(h.component(r), t.component(c)));
    const Matrix self = cost_matrix(h, h);
    for (Index r = 0; r < 4; ++r) EXPECT_NEAR(self(r, r), 0.0, 1e-9);
}

TEST(Coupling, TrivialAndDiagonalPlans) {
    const auto one = solve_lp(Matrix::Constant(1, 1, 3.0), Vector::Ones(1), Vector::Ones(1));
    EXPECT_EQ(one.lambda(0, 0), 1.0);
    EXPECT_EQ(one.objective, 3.0);

    Matrix c = Matrix::Ones(4, 4) * 5.0;
    c.diagonal().setZero();
    const Vector w = Vector::Constant(4, 0.25);
    const auto plan = solve_lp(c, w, w);
    EXPECT_NEAR(plan.objective, 0.0, 1e-12);
    EXPECT_LE((plan.lambda - Matrix(w.asDiagonal())).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Coupling, UniformSquareMatchesPermutationOracle) {
    Rng rng(2);
    for (Index n : {3, 4, 5})
        for (int trial = 0; trial < 30; ++trial) {
            const Matrix c = random_costs(rng, n, n);
            const Vector w = Vector::Constant(n, 1.0 / double(n));
            const auto plan = solve_lp(c, w, w);
            EXPECT_NEAR(plan.objective, min_permutation_cost(c), 1e-9);
        }
}

TEST(Coupling, NetworkSimplexAgreesWithDenseSimplex) {
    Rng rng(3);
    for (int trial = 0; trial < 100; ++trial) {
        const Index n = 1 + Index(rng.below(6)), m = 1 + Index(rng.below(6));
        const Matrix c = random_costs(rng, n, m);
        const Vector a = random_weights(rng, std::size_t(n)), b = random_weights(rng, std::size_t(m));
        const auto net = solve_lp(c, a, b);
        const auto dense = solve_lp_dense(c, a, b);
        EXPECT_NEAR(net.objective, dense.objective, 1e-9) << "trial " << trial;
        EXPECT_LE(dense.max_marginal_residual(), 1e-8);
    }
}

TEST(Coupling, LpPlanIsFeasibleOptimalAndSparse) {
    Rng rng(4);
    for (int trial = 0; trial < 100; ++trial) {
        const Index n = 1 + Index(rng.below(8)), m = 1 + Index(rng.below(8));
        const Matrix c = random_costs(rng, n, m);
        const Vector a = random_weights(rng, std::size_t(n)), b = random_weights(rng, std::size_t(m));
        const auto plan = solve_lp(c, a, b);
        EXPECT_LE(plan.max_marginal_residual(), 1e-8);
        EXPECT_GE(plan.lambda.minCoeff(), 0.0);
        EXPECT_LE(plan.nonzeros(), n + m - 1);
        for (int k = 0; k < 5; ++k) {
            const Matrix other = random_feasible_coupling(rng, plan.row_marginals, plan.col_marginals);
            EXPECT_LE(plan.objective, (other.array() * c.array()).sum() + 1e-9);
        }
    }
}

TEST(Coupling, LpIsDeterministic) {
    Rng rng(5);
    const Matrix c = Matrix::Ones(4, 4);  // every vertex optimal
    const Vector w = Vector::Constant(4, 0.25);
    const auto a = solve_lp(c, w, w);
    const auto b = solve_lp(c, w, w);
    EXPECT_TRUE(a.lambda == b.lambda);
}

TEST(Coupling, RejectsInvalidMarginals) {
    const Matrix c = Matrix::Ones(2, 2);
    const Vector good = Vector::Constant(2, 0.5);
    for (const Vector& bad : {Vector((Vector(2) << 0.7, 0.7).finished()), Vector((Vector(2) << 1.5, -0.5).finished()),
                              Vector((Vector(2) << std::nan(""), 0.5).finished())}) {
        try {
            solve_lp(c, bad, good);
            FAIL();
        } catch (const ValidationError& e) {
            EXPECT_STREQ(e.what(), "invalid marginals");
        }
        EXPECT_THROW(solve_sinkhorn(c, good, bad), ValidationError);
    }
}

TEST(Coupling, SinkhornLimits) {
    Rng rng(6);
    const Matrix c = random_costs(rng, 4, 5) * 0.1;
    const Vector a = random_weights(rng, 4), b = random_weights(rng, 5);

    const auto hot = solve_sinkhorn(c, a, b, SinkhornConfig{1e3});
    EXPECT_LE((hot.lambda - a * b.transpose()).cwiseAbs().maxCoeff(), 1e-3);
    EXPECT_LE(hot.max_marginal_residual(), 1e-12);

    const auto lp = solve_lp(c, a, b);
    const auto cold = solve_sinkhorn(c, a, b, SinkhornConfig{1e-3});
    EXPECT_LE(std::abs(cold.objective - lp.objective), 0.01 * std::max(lp.objective, 1e-3));
    EXPECT_LE(cold.max_marginal_residual(), 1e-12);

    const auto single = solve_sinkhorn(Matrix::Constant(1, 1, 2.0), Vector::Ones(1), Vector::Ones(1));
    EXPECT_NEAR(single.lambda(0, 0), 1.0, 1e-15);
}

TEST(Coupling, SinkhornReportsNonConvergence) {
    Rng rng(7);
    const Matrix c = random_costs(rng, 5, 5);
    const Vector w = Vector::Constant(5, 0.2);
    try {
        solve_sinkhorn(c, w, w, SinkhornConfig{1e-4, 3, 1e-15});
        FAIL();
    } catch (const RuntimeError& e) {
        EXPECT_NE(std::string(e.what()).find("sinkhorn did not converge"), std::string::npos);
    }
}

TEST(Coupling, MatchComponents) {
    CouplingPlan diag;
    diag.lambda = Matrix(Vector::Constant(3, 1.0 / 3).asDiagonal());
    auto m = match_components(diag);
    EXPECT_EQ(m.match, (std::vector<std::size_t>{0, 1, 2}));

    CouplingPlan tie;
    tie.lambda = Matrix::Constant(1, 3, 1.0 / 3);
    EXPECT_EQ(match_components(tie).match[0], 0u);

    // Linear-scan oracle on random plans.
    Rng rng(8);
    for (int trial = 0; trial < 50; ++trial) {
        CouplingPlan p;
        p.lambda = random_costs(rng, 4, 6);
        const auto mm = match_components(p);
        for (Index i = 0; i < 4; ++i) {
            double best = -1.0;
            std::size_t arg = 0;
            for (Index j = 0; j < 6; ++j)
                if (p.lambda(i, j) > best) {
                    best = p.lambda(i, j);
                    arg = std::size_t(j);
                }
            EXPECT_EQ(mm.match[std::size_t(i)], arg);
            EXPECT_EQ(mm.mass[std::size_t(i)], best);
        }
    }
}

TEST(Coupling, MixtureDriftExamples) {
    Rng rng(9);
    const Gmm h = random_gmm(rng, 2, 1);
    const Gmm t = random_gmm(rng, 2, 1);
    CouplingPlan single;
    single.lambda = Matrix::Ones(1, 1);
    const GaussianBridge br(h.component(0), t.component(0));
    for (double time : {0.0, 0.5, 0.9}) {
        const Vector z = rng.normal_vector(2);
        EXPECT_LE((mixture_drift(h, t, single, z, time) - br.drift(z, time)).norm(), 1e-12);
    }

    // A zero-mass pair contributes nothing.
    const Gmm h2 = random_gmm(rng, 2, 2);
    const Gmm t2 = random_gmm(rng, 2, 2);
    CouplingPlan partial;
    partial.lambda = (Matrix(2, 2) << 0.5, 0.0, 0.0, 0.5).finished();
    const MixturePolicy pol(h2, t2, partial);
    EXPECT_EQ(pol.pair_count(), 2u);

    // Far inside one pair's marginal, that pair dominates.
    const Gmm hs({GaussianComponent{Vector::Constant(1, -50.0), Matrix::Identity(1, 1), 0.5},
                  GaussianComponent{Vector::Constant(1, 50.0), Matrix::Identity(1, 1), 0.5}});
    const Gmm ts({GaussianComponent{Vector::Constant(1, -45.0), Matrix::Identity(1, 1), 0.5},
                  GaussianComponent{Vector::Constant(1, 60.0), Matrix::Identity(1, 1), 0.5}});
    CouplingPlan diag;
    diag.lambda = (Matrix(2, 2) << 0.5, 0.0, 0.0, 0.5).finished();
    const Vector u = mixture_drift(hs, ts, diag, Vector::Constant(1, 55.0), 0.5);
    EXPECT_NEAR(u(0), 10.0, 1e-9);
    EXPECT_THROW(MixturePolicy(hs, ts, diag).drift(Vector::Constant(1, 1e6), 0.5), RuntimeError);
}

TEST(Coupling, FlowDensityIntegratesToOne) {
    Rng rng(10);
    const Gmm h = random_gmm(rng, 1, 3, 2.0);
    const Gmm t = random_gmm(rng, 1, 4, 2.0);
    const auto plan = solve_lp(cost_matrix(h, t), mixture_weights(h), mixture_weights(t));
    const MixturePolicy pol(h, t, plan);
    for (double time : {0.25, 0.5, 0.75}) {
        // Trapezoid rule on [-40, 40].
        const int cells = 40000;
        const double lo = -40.0, step = 80.0 / cells;
        double mass = 0.0;
        for (int k = 0; k <= cells; ++k) {
            const double w = (k == 0 || k == cells) ? 0.5 : 1.0;
            mass += w * pol.density(Vector::Constant(1, lo + k * step), time);
        }
        EXPECT_NEAR(mass * step, 1.0, 1e-4) << "t=" << time;
    }
}

TEST(Coupling, JsonRoundTrip) {
    Rng rng(11);
    const Gmm h = random_gmm(rng, 2, 3);
    const Gmm t = random_gmm(rng, 2, 3);
    const auto plan = solve_lp(cost_matrix(h, t), mixture_weights(h), mixture_weights(t));
    const Json j = coupling_to_json(plan, match_components(plan), 1, 2, "image");
    const auto back = coupling_from_json(Json::parse(dump_json(j)));
    EXPECT_TRUE(back.lambda == plan.lambda);
    EXPECT_TRUE(back.costs == plan.costs);
    EXPECT_EQ(back.objective, plan.objective);
}
