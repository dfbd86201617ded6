#include <gtest/gtest.h>

#include "scalpel/gaussian_bridge.hpp"
#include "test_support.hpp"

using namespace scalpel;
using scalpel::testing::random_spd;

namespace {

GaussianComponent gauss1d(double mu, double var) {
    return {Vector::Constant(1, mu), Matrix::Constant(1, 1, var), 1.0};
}

GaussianComponent random_gaussian(Rng& rng, Index d) { return {rng.normal_vector(d) * 2.0, random_spd(rng, d), 1.0}; }

/// 1-D entropic OT by direct minimization over the Gaussian coupling correlation rho:
/// E|x-y|^2 + 2 eps KL(pi | a x b) = dmu^2 + sa^2 + sb^2 - 2 rho sa sb - eps log(1 - rho^2).
double entropic_cost_1d_oracle(double dmu, double sa, double sb, double eps) {
    auto f = [&](double r) { return dmu * dmu + sa * sa + sb * sb - 2 * r * sa * sb - eps * std::log(1 - r * r); };
    double lo = -1.0 + 1e-15, hi = 1.0 - 1e-15;
    const double g = (std::sqrt(5.0) - 1) / 2;
    for (int i = 0; i < 300; ++i) {
        const double a = hi - g * (hi - lo), b = lo + g * (hi - lo);
        if (f(a) < f(b))
            hi = b;
        else
            lo = a;
    }
    return f(0.5 * (lo + hi));
}

}  // namespace

TEST(GaussianBridge, CostIdentities) {
    Rng rng(1);
    for (int trial = 0; trial < 50; ++trial) {
        const Index d = 1 + Index(rng.below(6));
        const auto a = random_gaussian(rng, d);
        EXPECT_NEAR(cost(a, a), 0.0, 1e-9);
        auto b = a;
        const Vector delta = rng.normal_vector(d);
        b.mean += delta;
        EXPECT_NEAR(cost(a, b), delta.squaredNorm(), 1e-9);
    }
    EXPECT_EQ(cost(gauss1d(0.3, 2.0), gauss1d(0.3, 2.0)), 0.0);
    for (auto [m0, v0, m1, v1] : {std::array{0.0, 1.0, 1.0, 4.0}, std::array{-2.0, 0.25, 3.0, 9.0}}) {
        const double expected = (m0 - m1) * (m0 - m1) + std::pow(std::sqrt(v0) - std::sqrt(v1), 2);
        EXPECT_NEAR(cost(gauss1d(m0, v0), gauss1d(m1, v1)), expected, 1e-9);
    }
}

TEST(GaussianBridge, CostIsSymmetricAndPositive) {
    Rng rng(2);
    for (int trial = 0; trial < 200; ++trial) {
        const Index d = 1 + Index(rng.below(6));
        const auto a = random_gaussian(rng, d);
        const auto b = random_gaussian(rng, d);
        EXPECT_LE(std::abs(cost(a, b) - cost(b, a)), 1e-9);
        EXPECT_GT(cost(a, b), 0.0);
        auto c = a;
        c.covariance(0, 0) += 1e-6;
        EXPECT_GT(cost(a, c), 0.0);
    }
}

TEST(GaussianBridge, RejectsNonSpdCovariance) {
    auto a = gauss1d(0.0, 1.0);
    auto b = gauss1d(0.0, -1.0);
    try {
        cost(a, b);
        FAIL();
    } catch (const ValidationError& e) {
        EXPECT_STREQ(e.what(), "covariance not positive definite");
    }
}

TEST(GaussianBridge, EntropicCostMatchesOneDimensionalOracle) {
    for (double eps : {0.01, 0.3, 1.0, 5.0})
        for (auto [dmu, va, vb] : {std::array{0.0, 1.0, 1.0}, std::array{1.5, 0.5, 3.0}, std::array{-2.0, 4.0, 0.2}}) {
            const double closed = cost(gauss1d(0.0, va), gauss1d(dmu, vb), BridgeConfig{eps});
            const double oracle = entropic_cost_1d_oracle(dmu, std::sqrt(va), std::sqrt(vb), eps);
            EXPECT_NEAR(closed, oracle, 1e-8) << "eps=" << eps;
        }
}

TEST(GaussianBridge, EntropicCostTendsToBures) {
    Rng rng(4);
    const auto a = random_gaussian(rng, 3);
    const auto b = random_gaussian(rng, 3);
    EXPECT_NEAR(cost(a, b, BridgeConfig{1e-9}), cost(a, b), 1e-6);
}

TEST(GaussianBridge, MarginalEndpointsAndSpd) {
    Rng rng(5);
    for (double eps : {0.0, 0.5}) {
        for (int trial = 0; trial < 100; ++trial) {
            const Index d = 1 + Index(rng.below(6));
            const GaussianBridge br(random_gaussian(rng, d), random_gaussian(rng, d), BridgeConfig{eps});
            const auto m0 = br.marginal(0.0);
            const auto m1 = br.marginal(1.0);
            EXPECT_LE((m0.mean - br.source().mean).cwiseAbs().maxCoeff(), 1e-9);
            EXPECT_LE((m0.covariance - br.source().covariance).cwiseAbs().maxCoeff(), 1e-9);
            EXPECT_LE((m1.mean - br.target().mean).cwiseAbs().maxCoeff(), 1e-9);
            EXPECT_LE((m1.covariance - br.target().covariance).cwiseAbs().maxCoeff(), 1e-9);
            // The interior formula also reaches the endpoints in the limit.
            const auto near1 = br.marginal(1.0 - 1e-12);
            EXPECT_LE((near1.covariance - br.target().covariance).cwiseAbs().maxCoeff(), 1e-9);
            for (int s = 0; s <= 100; ++s) EXPECT_TRUE(linalg::is_spd(br.marginal(s / 100.0).covariance));
        }
    }
}

TEST(GaussianBridge, EqualCovarianceGeodesicIsTranslation) {
    Rng rng(6);
    const Matrix s = random_spd(rng, 3);
    const GaussianBridge br({Vector::Zero(3), s, 1.0}, {Vector::Constant(3, 2.0), s, 1.0});
    const auto mid = br.marginal(0.5);
    EXPECT_LE((mid.mean - Vector::Constant(3, 1.0)).norm(), 1e-12);
    EXPECT_LE((mid.covariance - s).cwiseAbs().maxCoeff(), 1e-9);
    EXPECT_THROW(br.marginal(1.5), ValidationError);
    EXPECT_THROW(br.marginal(-0.1), ValidationError);
}

TEST(GaussianBridge, DriftExamples) {
    Rng rng(7);
    const Matrix s = random_spd(rng, 4);
    const Vector mu_a = rng.normal_vector(4), mu_b = rng.normal_vector(4);
    const GaussianBridge br({mu_a, s, 1.0}, {mu_b, s, 1.0});
    for (double t : {0.0, 0.3, 0.9}) {
        const Vector z = rng.normal_vector(4) * 5.0;
        EXPECT_LE((br.drift(z, t) - (mu_b - mu_a)).norm(), 1e-9);
    }
    const GaussianBridge same({mu_a, s, 1.0}, {mu_a, s, 1.0});
    EXPECT_LE(same.drift(rng.normal_vector(4), 0.4).norm(), 1e-9);
}

TEST(GaussianBridge, EulerPathFollowsAffineMap) {
    // Oracle: T(z) = mu1 + (s1/s0)(z - mu0).
    const double mu0 = -1.0, mu1 = 2.0;
    const GaussianBridge br(gauss1d(mu0, 1.0), gauss1d(mu1, 4.0));
    Vector z = Vector::Constant(1, mu0 + 1.0);
    const int steps = 10000;
    for (int k = 0; k < steps; ++k) z += br.drift(z, double(k) / steps) / steps;
    EXPECT_NEAR(z(0), mu1 + 2.0, 1e-3);
}

TEST(GaussianBridge, EulerTransportsSampleMean) {
    Rng rng(8);
    const Matrix s = random_spd(rng, 2);
    const Vector mu_a = Vector::Zero(2), mu_b = (Vector(2) << 3.0, -1.0).finished();
    const GaussianBridge br({mu_a, s, 1.0}, {mu_b, s, 1.0});
    const Matrix l = s.llt().matrixL();
    const int n = 10000, steps = 20;
    Vector sum = Vector::Zero(2);
    std::vector<Vector> ends;
    for (int i = 0; i < n; ++i) {
        Vector z = mu_a + l * rng.normal_vector(2);
        for (int k = 0; k < steps; ++k) z += br.drift(z, double(k) / steps) / steps;
        ends.push_back(z);
        sum += z;
    }
    const Vector mean = sum / n;
    for (Index c = 0; c < 2; ++c) {
        const double se = std::sqrt(s(c, c) / n);
        EXPECT_LE(std::abs(mean(c) - mu_b(c)), 3.0 * se);
    }
}

TEST(GaussianBridge, EntropicDriftReproducesMarginals) {
    // Euler-Maruyama with sqrt(eps) noise must end in the target law and pass through the
    // closed-form mid-time marginal.
    const double eps = 0.5;
    const GaussianBridge br(gauss1d(-1.0, 0.5), gauss1d(2.0, 2.0), BridgeConfig{eps});
    EXPECT_THROW(br.drift(Vector::Zero(1), 1.0), ValidationError);
    Rng rng(9);
    const int n = 20000, steps = 400;
    std::vector<double> mid, end;
    for (int i = 0; i < n; ++i) {
        Vector z = Vector::Constant(1, -1.0 + std::sqrt(0.5) * rng.normal());
        for (int k = 0; k < steps - 1; ++k) {
            const double dt = 1.0 / steps;
            z += br.drift(z, k * dt) * dt + Vector::Constant(1, std::sqrt(eps * dt) * rng.normal());
            if (k + 1 == steps / 2) mid.push_back(z(0));
        }
        end.push_back(z(0));
    }
    auto moments = [](const std::vector<double>& v) {
        const double m = std::accumulate(v.begin(), v.end(), 0.0) / v.size();
        double s = 0.0;
        for (double x : v) s += (x - m) * (x - m);
        return std::pair{m, s / v.size()};
    };
    const auto [mm, mv] = moments(mid);
    const auto half = br.marginal(0.5);
    EXPECT_NEAR(mm, half.mean(0), 0.03);
    EXPECT_NEAR(mv, half.covariance(0, 0), 0.05);
    const auto [em, ev] = moments(end);
    EXPECT_NEAR(em, 2.0, 0.05);
    EXPECT_NEAR(ev, 2.0, 0.12);
}
