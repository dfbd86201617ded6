#pragma once

// Closed-form Schroedinger bridge between two Gaussians N(mu_a, A) -> N(mu_b, B) driven by
// dZ = u_t(Z) dt + sqrt(eps) dW.
//
// Static coupling: cross-covariance C = Cov(X_0, X_1) with
//   eps = 0 :  C = A T,  T = A^-1/2 (A^1/2 B A^1/2)^1/2 A^-1/2   (Monge map)
//   eps > 0 :  C = 1/2 (A^1/2 D A^-1/2 - eps I),  D = (4 A^1/2 B A^1/2 + eps^2 I)^1/2
// Marginals: mu_t = (1-t) mu_a + t mu_b,
//            Sigma_t = (1-t)^2 A + t^2 B + t(1-t) (C + C^T + eps I)
// Cost: ||mu_a - mu_b||^2 + tr A + tr B - tr D_eps + eps-terms (entropic OT with 2 eps KL penalty);
// at eps = 0 this is the squared Bures-Wasserstein distance.

#include <string>

#include "scalpel/common.hpp"
#include "scalpel/gmm.hpp"

namespace scalpel {

struct BridgeConfig {
    double epsilon = 0.0;
};

inline constexpr double kEigenFloor = 1e-12;

namespace linalg {

/// f(S) for symmetric S through its eigendecomposition, eigenvalues floored at kEigenFloor.
template <class Fn>
Matrix sym_apply(const Matrix& s, Fn&& fn) {
    const Matrix sym = 0.5 * (s + s.transpose());
    Eigen::SelfAdjointEigenSolver<Matrix> es(sym);
    if (es.info() != Eigen::Success) throw RuntimeError("eigendecomposition failed");
    const Vector vals = es.eigenvalues().unaryExpr([&](double v) { return fn(std::max(v, kEigenFloor)); });
    const Matrix& vecs = es.eigenvectors();
    return vecs * vals.asDiagonal() * vecs.transpose();
}

inline Matrix sqrtm(const Matrix& s) { return sym_apply(s, [](double v) { return std::sqrt(v); }); }
inline Matrix inv_sqrtm(const Matrix& s) { return sym_apply(s, [](double v) { return 1.0 / std::sqrt(v); }); }

inline bool is_spd(const Matrix& s) {
    if (s.rows() != s.cols() || !s.allFinite()) return false;
    const Matrix sym = 0.5 * (s + s.transpose());
    Eigen::SelfAdjointEigenSolver<Matrix> es(sym, Eigen::EigenvaluesOnly);
    return es.info() == Eigen::Success && es.eigenvalues().minCoeff() > 0.0;
}

}  // namespace linalg

namespace detail {

inline void check_pair(const GaussianComponent& a, const GaussianComponent& b) {
    require(a.mean.size() == b.mean.size(), "dimension mismatch");
    if (!linalg::is_spd(a.covariance) || !linalg::is_spd(b.covariance))
        throw ValidationError("covariance not positive definite");
}

inline bool identical(const GaussianComponent& a, const GaussianComponent& b) {
    return a.mean == b.mean && a.covariance == b.covariance;
}

}  // namespace detail

/// Transport cost J between two Gaussians (squared Bures-Wasserstein at eps = 0).
inline double cost(const GaussianComponent& a, const GaussianComponent& b, const BridgeConfig& cfg = {}) {
    require(cfg.epsilon >= 0.0, "epsilon must be non-negative");
    detail::check_pair(a, b);
    const double eps = cfg.epsilon;
    if (eps == 0.0 && detail::identical(a, b)) return 0.0;
    const double mean_term = (a.mean - b.mean).squaredNorm();
    const Matrix ra = linalg::sqrtm(a.covariance);
    const Matrix m = ra * b.covariance * ra;
    const double d = static_cast<double>(a.mean.size());
    double cov_term = 0.0;
    if (eps == 0.0) {
        cov_term = a.covariance.trace() + b.covariance.trace() - 2.0 * linalg::sqrtm(m).trace();
    } else {
        // D = (4M + eps^2 I)^1/2 ; log det(D + eps I) from the same eigenvalues.
        const Matrix sym = 0.5 * (m + m.transpose());
        Eigen::SelfAdjointEigenSolver<Matrix> es(sym, Eigen::EigenvaluesOnly);
        double tr_d = 0.0, logdet = 0.0;
        for (Index i = 0; i < es.eigenvalues().size(); ++i) {
            const double lam = std::max(es.eigenvalues()(i), 0.0);
            const double di = std::sqrt(4.0 * lam + eps * eps);
            tr_d += di;
            logdet += std::log(di + eps);
        }
        cov_term = a.covariance.trace() + b.covariance.trace() - tr_d + d * eps * (1.0 - std::log(2.0 * eps)) +
                   eps * logdet;
    }
    return std::max(0.0, mean_term + cov_term);
}

/// The bridge between two fixed endpoints with cached coupling quantities.
class GaussianBridge {
public:
    GaussianBridge(GaussianComponent a, GaussianComponent b, const BridgeConfig& cfg = {})
        : a_(std::move(a)), b_(std::move(b)), eps_(cfg.epsilon) {
        require(eps_ >= 0.0, "epsilon must be non-negative");
        detail::check_pair(a_, b_);
        cost_ = scalpel::cost(a_, b_, cfg);
        const Index d = a_.mean.size();
        const Matrix ra = linalg::sqrtm(a_.covariance);
        const Matrix ra_inv = linalg::inv_sqrtm(a_.covariance);
        const Matrix m = ra * b_.covariance * ra;
        if (eps_ == 0.0) {
            transport_ = ra_inv * linalg::sqrtm(m) * ra_inv;
            transport_ = 0.5 * (transport_ + transport_.transpose());
            cross_ = a_.covariance * transport_;
        } else {
            const Matrix dmat = linalg::sym_apply(4.0 * m, [e = eps_](double v) { return std::sqrt(v + e * e); });
            cross_ = 0.5 * (ra * dmat * ra_inv - eps_ * Matrix::Identity(d, d));
        }
    }

    const GaussianComponent& source() const { return a_; }
    const GaussianComponent& target() const { return b_; }
    double epsilon() const { return eps_; }
    double cost() const { return cost_; }
    /// Cov(X_0, X_1) of the optimal static coupling.
    const Matrix& cross_covariance() const { return cross_; }

    /// Gaussian marginal at time t in [0, 1].
    GaussianComponent marginal(double t) const {
        if (!(t >= 0.0 && t <= 1.0)) throw ValidationError("time outside [0, 1]");
        const Index d = a_.mean.size();
        GaussianComponent out;
        out.weight = 1.0;
        if (t == 0.0) {
            out.mean = a_.mean;
            out.covariance = a_.covariance;
            return out;
        }
        if (t == 1.0) {
            out.mean = b_.mean;
            out.covariance = b_.covariance;
            return out;
        }
        out.mean = (1.0 - t) * a_.mean + t * b_.mean;
        const Matrix mix = cross_ + cross_.transpose() + eps_ * Matrix::Identity(d, d);
        out.covariance = (1.0 - t) * (1.0 - t) * a_.covariance + t * t * b_.covariance + t * (1.0 - t) * mix;
        out.covariance = 0.5 * (out.covariance + out.covariance.transpose());
        return out;
    }

    /// Optimal drift u_t(z). At eps = 0 this is the velocity of the affine Monge flow and is
    /// defined on [0, 1]; for eps > 0 it is singular at t = 1.
    Vector drift(const Eigen::Ref<const Vector>& z, double t) const {
        require(z.size() == a_.mean.size(), "dimension mismatch");
        if (!(t >= 0.0 && t <= 1.0)) throw ValidationError("time outside [0, 1]");
        const Index d = a_.mean.size();
        const Vector mu_t = (1.0 - t) * a_.mean + t * b_.mean;
        const Vector velocity = b_.mean - a_.mean;
        if (eps_ == 0.0) {
            const Matrix flow = (1.0 - t) * Matrix::Identity(d, d) + t * transport_;
            const Matrix rate = transport_ - Matrix::Identity(d, d);
            return velocity + rate * flow.llt().solve(z - mu_t);
        }
        if (t >= 1.0) throw ValidationError("terminal-time drift undefined");
        const GaussianComponent m = marginal(t);
        const Matrix gain = (1.0 - t) * cross_.transpose() + t * b_.covariance;
        const Vector expected_end = b_.mean + gain * m.covariance.llt().solve(z - mu_t);
        return (expected_end - z) / (1.0 - t);
    }

private:
    GaussianComponent a_;
    GaussianComponent b_;
    double eps_ = 0.0;
    double cost_ = 0.0;
    Matrix transport_;  // Monge map (eps = 0 only)
    Matrix cross_;
};

}  // namespace scalpel
