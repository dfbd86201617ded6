#pragma once

// Full-covariance Gaussian mixtures over per-head activations.
//
// EM ascends the ridge-smoothed log-likelihood
//
//   F(theta) = sum_i log sum_k w_k N(x_i | mu_k, Sigma_k) exp(-ridge/2 * tr(Sigma_k^-1)),
//
// i.e. the expected log-likelihood of the data blurred by N(0, ridge I). Its exact M-step is
// Sigma_k = S_k + ridge I, so F is non-decreasing between empty-component rescues.
// Density queries (log_pdf, posterior, assign) use the plain mixture density.

#include <algorithm>
#include <optional>
#include <string>
#include <vector>

#include "scalpel/activation_store.hpp"
#include "scalpel/common.hpp"

namespace scalpel {

inline constexpr double kLog2Pi = 1.8378770664093454835606594728112;

struct GaussianComponent {
    Vector mean;
    Matrix covariance;
    double weight = 1.0;
};

struct EmConfig {
    int max_iterations = 200;
    double relative_tolerance = 1e-6;
    double ridge = 1e-6;
    /// Components whose effective sample count drops below this are re-seeded.
    double collapse_count = 1e-6;
};

struct FitInfo {
    std::uint64_t seed = 0;
    double loglik = 0.0;  // plain total log-likelihood of the training samples
    int iterations = 0;
    bool converged = false;
    std::vector<double> objective_trace;  // F after initialization and after every M-step
    std::vector<int> rescue_iterations;   // trace indices at which a component was re-seeded
};

/// Evaluates a single Gaussian through a cached Cholesky factor.
class GaussianDensity {
public:
    GaussianDensity() = default;
    explicit GaussianDensity(const GaussianComponent& c) : mean_(c.mean) {
        const Index d = c.mean.size();
        require(c.covariance.rows() == d && c.covariance.cols() == d, "covariance shape does not match mean");
        chol_.compute(c.covariance);
        if (chol_.info() != Eigen::Success) throw ValidationError("covariance not positive definite");
        const Matrix l = chol_.matrixL();
        log_det_ = 2.0 * l.diagonal().array().log().sum();
        if (!std::isfinite(log_det_)) throw ValidationError("covariance not positive definite");
        log_norm_ = -0.5 * (static_cast<double>(d) * kLog2Pi + log_det_);
        inv_l_ = Matrix::Identity(d, d);
        chol_.matrixL().solveInPlace(inv_l_);
    }

    double log_pdf(const Eigen::Ref<const Vector>& z) const {
        const Vector y = chol_.matrixL().solve(z - mean_);
        return log_norm_ - 0.5 * y.squaredNorm();
    }

    /// log N(x_b) for every row of x (B x d).
    Vector log_pdf_rows(const Eigen::Ref<const Matrix>& x) const {
        const Matrix y = (x.rowwise() - mean_.transpose()) * inv_l_.transpose();
        return (log_norm_ - 0.5 * y.rowwise().squaredNorm().array()).matrix();
    }

    /// tr(Sigma^-1) = ||L^-1||_F^2.
    double trace_inverse() const { return inv_l_.squaredNorm(); }

    double log_det() const { return log_det_; }
    const Eigen::LLT<Matrix>& cholesky() const { return chol_; }

private:
    Vector mean_;
    Eigen::LLT<Matrix> chol_;
    Matrix inv_l_;
    double log_det_ = 0.0;
    double log_norm_ = 0.0;
};

/// Immutable Gaussian mixture for one head and one manifold.
class Gmm {
public:
    Gmm() = default;

    explicit Gmm(std::vector<GaussianComponent> components, Manifold label = Manifold::trusted, int layer = 0,
                 int head = 0, FitInfo info = {})
        : components_(std::move(components)), label_(label), layer_(layer), head_(head), info_(std::move(info)) {
        require(!components_.empty(), "mixture needs at least one component");
        const Index d = components_.front().mean.size();
        require(d > 0, "component dimension must be positive");
        double total = 0.0;
        for (auto& c : components_) {
            require(c.mean.size() == d, "components have different dimensions");
            require(c.weight >= 0.0 && std::isfinite(c.weight), "component weight must be non-negative");
            require(c.mean.allFinite() && c.covariance.allFinite(), "non-finite component parameters");
            require(((c.covariance - c.covariance.transpose()).cwiseAbs().maxCoeff()) <= 1e-12 *
                        std::max(1.0, c.covariance.cwiseAbs().maxCoeff()),
                    "covariance not symmetric");
            c.covariance = 0.5 * (c.covariance + c.covariance.transpose());
            total += c.weight;
        }
        require(std::abs(total - 1.0) <= 1e-10, "mixture weights must sum to 1");
        densities_.reserve(components_.size());
        log_weights_.resize(static_cast<Index>(components_.size()));
        for (std::size_t k = 0; k < components_.size(); ++k) {
            densities_.emplace_back(components_[k]);
            log_weights_(static_cast<Index>(k)) = std::log(components_[k].weight);
        }
    }

    std::size_t size() const { return components_.size(); }
    Index dim() const { return components_.front().mean.size(); }
    const std::vector<GaussianComponent>& components() const { return components_; }
    const GaussianComponent& component(std::size_t k) const { return components_.at(k); }
    const GaussianDensity& density(std::size_t k) const { return densities_.at(k); }
    const Vector& log_weights() const { return log_weights_; }
    Manifold label() const { return label_; }
    int layer() const { return layer_; }
    int head() const { return head_; }
    const FitInfo& info() const { return info_; }

    /// log w_k + log N(z | mu_k, Sigma_k) for each component.
    Vector joint_log(const Eigen::Ref<const Vector>& z) const {
        require(z.size() == dim(), "dimension mismatch");
        Vector out(static_cast<Index>(size()));
        for (std::size_t k = 0; k < size(); ++k)
            out(static_cast<Index>(k)) = log_weights_(static_cast<Index>(k)) + densities_[k].log_pdf(z);
        return out;
    }

    /// B x K matrix of log w_k + log N(x_b | k).
    Matrix joint_log_rows(const Eigen::Ref<const Matrix>& x) const {
        require(x.cols() == dim(), "dimension mismatch");
        Matrix out(x.rows(), static_cast<Index>(size()));
        for (std::size_t k = 0; k < size(); ++k)
            out.col(static_cast<Index>(k)) =
                densities_[k].log_pdf_rows(x).array() + log_weights_(static_cast<Index>(k));
        return out;
    }

private:
    std::vector<GaussianComponent> components_;
    std::vector<GaussianDensity> densities_;
    Vector log_weights_;
    Manifold label_ = Manifold::trusted;
    int layer_ = 0;
    int head_ = 0;
    FitInfo info_;
};

inline double log_pdf(const Gmm& g, const Eigen::Ref<const Vector>& z) { return log_sum_exp(g.joint_log(z)); }

/// P(r | z): responsibilities of each component, normalized in log space.
inline Vector posterior(const Gmm& g, const Eigen::Ref<const Vector>& z) {
    const Vector lj = g.joint_log(z);
    const double norm = log_sum_exp(lj);
    if (!std::isfinite(norm)) throw RuntimeError("posterior undefined: zero mixture density");
    Vector p = (lj.array() - norm).exp().matrix();
    return p / p.sum();
}

struct Assignment {
    std::size_t component = 0;  // r*
    double confidence = 1.0;    // c = max_r P(r | z)
};

/// argmax of the posterior (lowest index on ties) and its probability.
inline Assignment assign(const Gmm& g, const Eigen::Ref<const Vector>& z) {
    const Vector p = posterior(g, z);
    Assignment a{0, p(0)};
    for (Index r = 1; r < p.size(); ++r)
        if (p(r) > a.confidence) a = {static_cast<std::size_t>(r), p(r)};
    return a;
}

inline Matrix sample(const Gmm& g, std::size_t n, std::uint64_t seed) {
    require(n >= 1, "sample count must be positive");
    Rng rng(seed);
    const Index d = g.dim();
    std::vector<double> cumulative;
    double acc = 0.0;
    for (const auto& c : g.components()) cumulative.push_back(acc += c.weight);
    Matrix out(static_cast<Index>(n), d);
    for (std::size_t i = 0; i < n; ++i) {
        const double u = rng.uniform() * acc;
        std::size_t k = 0;
        while (k + 1 < cumulative.size() && !(cumulative[k] > u)) ++k;
        const Vector xi = rng.normal_vector(d);
        out.row(static_cast<Index>(i)) = (g.component(k).mean + g.density(k).cholesky().matrixL() * xi).transpose();
    }
    return out;
}

namespace detail {

inline Matrix sample_covariance(const Eigen::Ref<const Matrix>& x) {
    const Vector mu = x.colwise().mean().transpose();
    const Matrix c = x.rowwise() - mu.transpose();
    return (c.transpose() * c) / static_cast<double>(x.rows());
}

/// k-means++ seeding; returns row indices of the chosen centers.
inline std::vector<Index> kmeanspp(const Eigen::Ref<const Matrix>& x, std::size_t k, Rng& rng) {
    const Index n = x.rows();
    std::vector<Index> centers{static_cast<Index>(rng.below(static_cast<std::uint64_t>(n)))};
    Vector dist2 = (x.rowwise() - x.row(centers[0])).rowwise().squaredNorm();
    while (centers.size() < k) {
        const double total = dist2.sum();
        Index pick = 0;
        if (!(total > 0.0)) {
            pick = static_cast<Index>(rng.below(static_cast<std::uint64_t>(n)));
        } else {
            const double u = rng.uniform() * total;
            double acc = 0.0;
            pick = n - 1;
            for (Index i = 0; i < n; ++i) {
                acc += dist2(i);
                if (acc > u) {
                    pick = i;
                    break;
                }
            }
        }
        centers.push_back(pick);
        dist2 = dist2.cwiseMin((x.rowwise() - x.row(pick)).rowwise().squaredNorm());
    }
    return centers;
}

/// Weighted M-step from a B x K responsibility matrix. Returns indices of collapsed components.
inline std::vector<std::size_t> m_step(const Eigen::Ref<const Matrix>& x, const Matrix& resp, double ridge,
                                       double collapse_count, std::vector<GaussianComponent>& comps) {
    const Index n = x.rows();
    const Index k = resp.cols();
    std::vector<std::size_t> collapsed;
    comps.resize(static_cast<std::size_t>(k));
    for (Index j = 0; j < k; ++j) {
        const double nk = resp.col(j).sum();
        auto& c = comps[static_cast<std::size_t>(j)];
        if (!(nk >= collapse_count)) {
            collapsed.push_back(static_cast<std::size_t>(j));
            c.weight = 0.0;
            continue;
        }
        c.weight = nk / static_cast<double>(n);
        c.mean = (x.transpose() * resp.col(j)) / nk;
        const Matrix centered = x.rowwise() - c.mean.transpose();
        const Matrix weighted = centered.array().colwise() * resp.col(j).array();
        c.covariance = (centered.transpose() * weighted) / nk;
        c.covariance = 0.5 * (c.covariance + c.covariance.transpose());
        c.covariance.diagonal().array() += ridge;
    }
    return collapsed;
}

/// Re-seeds collapsed components at the samples farthest from their assigned means.
inline void rescue(const Eigen::Ref<const Matrix>& x, const Matrix& resp, const std::vector<std::size_t>& collapsed,
                   double ridge, std::vector<GaussianComponent>& comps) {
    const Index n = x.rows();
    const Index d = x.cols();
    Vector far(n);
    for (Index i = 0; i < n; ++i) {
        Index best = 0;
        resp.row(i).maxCoeff(&best);
        const auto& c = comps[static_cast<std::size_t>(best)];
        far(i) = c.mean.size() == d ? (x.row(i).transpose() - c.mean).squaredNorm() : 0.0;
    }
    Matrix pooled = sample_covariance(x);
    pooled.diagonal().array() += ridge;
    std::vector<Index> order(static_cast<std::size_t>(n));
    for (Index i = 0; i < n; ++i) order[static_cast<std::size_t>(i)] = i;
    std::stable_sort(order.begin(), order.end(), [&](Index a, Index b) { return far(a) > far(b); });
    std::size_t next = 0;
    for (std::size_t j : collapsed) {
        auto& c = comps[j];
        c.mean = x.row(order[next++ % order.size()]).transpose();
        c.covariance = pooled;
        c.weight = 1.0 / static_cast<double>(n);
    }
    double total = 0.0;
    for (const auto& c : comps) total += c.weight;
    for (auto& c : comps) c.weight /= total;
}

/// E-step: returns F and fills resp (B x K) with normalized responsibilities.
inline double e_step(const Eigen::Ref<const Matrix>& x, const std::vector<GaussianComponent>& comps, double ridge,
                     Matrix& resp) {
    const Index n = x.rows();
    const Index k = static_cast<Index>(comps.size());
    resp.resize(n, k);
    for (Index j = 0; j < k; ++j) {
        const auto& c = comps[static_cast<std::size_t>(j)];
        const GaussianDensity dens(c);
        resp.col(j) = dens.log_pdf_rows(x).array() + (std::log(c.weight) - 0.5 * ridge * dens.trace_inverse());
    }
    const Vector row_max = resp.rowwise().maxCoeff();
    require(row_max.allFinite(), "non-finite responsibilities");
    resp = (resp.colwise() - row_max).array().exp().matrix();
    const Vector sums = resp.rowwise().sum();
    resp = resp.array().colwise() / sums.array();
    return (row_max.array() + sums.array().log()).sum();
}

}  // namespace detail

/// EM fit of a k-component full-covariance mixture to the rows of `samples`.
inline Gmm fit_em(const Eigen::Ref<const Matrix>& samples, std::size_t k, std::uint64_t seed,
                  const EmConfig& config = {}, Manifold label = Manifold::trusted, int layer = 0, int head = 0) {
    const Index n = samples.rows();
    const Index d = samples.cols();
    require(k >= 1, "component count must be positive");
    require(d >= 1, "sample dimension must be positive");
    if (n < static_cast<Index>(k)) throw ValidationError("insufficient samples");
    require(samples.allFinite(), "non-finite samples");

    Rng rng(seed);
    const auto centers = detail::kmeanspp(samples, k, rng);

    // Hard assignment to the nearest center, then one M-step.
    Matrix resp = Matrix::Zero(n, static_cast<Index>(k));
    for (Index i = 0; i < n; ++i) {
        Index best = 0;
        double best_d = std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < k; ++j) {
            const double dist = (samples.row(i) - samples.row(centers[j])).squaredNorm();
            if (dist < best_d) {
                best_d = dist;
                best = static_cast<Index>(j);
            }
        }
        resp(i, best) = 1.0;
    }
    std::vector<GaussianComponent> comps;
    FitInfo info;
    info.seed = seed;
    auto collapsed = detail::m_step(samples, resp, config.ridge, config.collapse_count, comps);
    if (!collapsed.empty()) detail::rescue(samples, resp, collapsed, config.ridge, comps);

    double prev = detail::e_step(samples, comps, config.ridge, resp);
    info.objective_trace.push_back(prev);
    if (!collapsed.empty()) info.rescue_iterations.push_back(0);
    for (int it = 1; it <= config.max_iterations; ++it) {
        collapsed = detail::m_step(samples, resp, config.ridge, config.collapse_count, comps);
        const bool rescued = !collapsed.empty();
        if (rescued) detail::rescue(samples, resp, collapsed, config.ridge, comps);
        const double cur = detail::e_step(samples, comps, config.ridge, resp);
        info.objective_trace.push_back(cur);
        info.iterations = it;
        if (rescued) {
            info.rescue_iterations.push_back(it);
        } else if (cur - prev < config.relative_tolerance * std::abs(prev)) {
            info.converged = true;
            prev = cur;
            break;
        }
        prev = cur;
    }

    double total = 0.0;
    for (const auto& c : comps) total += c.weight;
    for (auto& c : comps) c.weight /= total;
    Gmm fitted(comps, label, layer, head, info);
    const Matrix lj = fitted.joint_log_rows(samples);
    double ll = 0.0;
    for (Index i = 0; i < n; ++i) ll += log_sum_exp(lj.row(i).transpose());
    info.loglik = ll;
    return Gmm(std::move(comps), label, layer, head, std::move(info));
}

// ---------------------------------------------------------------------------------------------
// JSON artifact: {schema_version, layer, head, label, k, weights[], means[][], covariances[][][], seed, loglik}

inline Json gmm_to_json(const Gmm& g) {
    Json weights = Json::array(), means = Json::array(), covs = Json::array();
    for (const auto& c : g.components()) {
        weights.push_back(c.weight);
        means.push_back(to_json(c.mean));
        covs.push_back(to_json(c.covariance));
    }
    return Json{{"schema_version", kSchemaVersion},
                {"layer", g.layer()},
                {"head", g.head()},
                {"label", to_string(g.label())},
                {"k", g.size()},
                {"weights", weights},
                {"means", means},
                {"covariances", covs},
                {"seed", g.info().seed},
                {"loglik", g.info().loglik},
                {"iterations", g.info().iterations}};
}

inline Gmm gmm_from_json(const Json& j) {
    check_schema(j, "gmm artifact");
    const auto k = j.at("k").get<std::size_t>();
    if (j.at("weights").size() != k || j.at("means").size() != k || j.at("covariances").size() != k)
        throw ValidationError("gmm artifact: component arrays disagree with k");
    std::vector<GaussianComponent> comps(k);
    for (std::size_t i = 0; i < k; ++i) {
        comps[i].weight = j.at("weights").at(i).get<double>();
        comps[i].mean = vector_from_json(j.at("means").at(i));
        comps[i].covariance = matrix_from_json(j.at("covariances").at(i));
    }
    FitInfo info;
    info.seed = j.at("seed").get<std::uint64_t>();
    info.loglik = j.at("loglik").get<double>();
    info.iterations = j.value("iterations", 0);
    return Gmm(std::move(comps), manifold_from_string(j.at("label").get<std::string>()), j.at("layer").get<int>(),
               j.at("head").get<int>(), std::move(info));
}

}  // namespace scalpel
