#pragma once

// Component-level transport between a hallucinated and a trusted mixture:
//   min_lambda sum_ij lambda_ij J_ij   s.t.  lambda >= 0, rows sum to w0, columns sum to w1,
// solved exactly by a transportation (network) simplex, or approximately by log-domain Sinkhorn.
// The mixture policy blends the pairwise bridge drifts with weights rho_{t|ij}(z) lambda_ij.

#include <deque>
#include <memory>
#include <optional>
#include <sstream>

#include "scalpel/gaussian_bridge.hpp"
#include "scalpel/gmm.hpp"

namespace scalpel {

struct CouplingPlan {
    Matrix lambda;
    Matrix costs;
    Vector row_marginals;
    Vector col_marginals;
    double objective = 0.0;

    double max_marginal_residual() const {
        const double rows = (lambda.rowwise().sum() - row_marginals).cwiseAbs().maxCoeff();
        const double cols = (lambda.colwise().sum().transpose() - col_marginals).cwiseAbs().maxCoeff();
        return std::max(rows, cols);
    }

    Index nonzeros(double tol = 0.0) const { return (lambda.array() > tol).count(); }
};

struct ComponentMatch {
    std::vector<std::size_t> match;  // j*(i)
    std::vector<double> mass;        // lambda_{i, j*(i)}
};

inline Matrix cost_matrix(const Gmm& halluc, const Gmm& trusted, const BridgeConfig& cfg = {}) {
    require(halluc.dim() == trusted.dim(), "dimension mismatch");
    Matrix j(static_cast<Index>(halluc.size()), static_cast<Index>(trusted.size()));
    for (std::size_t r = 0; r < halluc.size(); ++r)
        for (std::size_t c = 0; c < trusted.size(); ++c)
            j(static_cast<Index>(r), static_cast<Index>(c)) = cost(halluc.component(r), trusted.component(c), cfg);
    return j;
}

inline Vector mixture_weights(const Gmm& g) {
    Vector w(static_cast<Index>(g.size()));
    for (std::size_t k = 0; k < g.size(); ++k) w(static_cast<Index>(k)) = g.component(k).weight;
    return w;
}

namespace detail {

inline constexpr double kWeightFloor = 1e-12;

/// Validates a marginal and clamps tiny weights to kWeightFloor before renormalizing.
inline Vector prepare_marginal(const Vector& w) {
    require(w.size() > 0, "empty marginal");
    if (!w.allFinite() || (w.array() < 0.0).any() || std::abs(w.sum() - 1.0) > 1e-10)
        throw ValidationError("invalid marginals");
    Vector out = w.cwiseMax(kWeightFloor);
    return out / out.sum();
}

inline double plan_objective(const Matrix& lambda, const Matrix& costs) { return (lambda.array() * costs.array()).sum(); }

}  // namespace detail

/// Exact transportation LP via the network simplex on the bipartite basis tree.
/// Initial basis: northwest-corner rule. Pivoting: Bland's rule (first improving cell in
/// row-major order enters; lowest-index cell among tied minima leaves), so the pivot sequence
/// and the returned vertex are deterministic.
inline CouplingPlan solve_lp(const Matrix& costs, const Vector& w0, const Vector& w1) {
    require(costs.rows() == w0.size() && costs.cols() == w1.size(), "cost matrix shape does not match marginals");
    require(costs.allFinite(), "non-finite costs");
    const Vector a = detail::prepare_marginal(w0);
    const Vector b = detail::prepare_marginal(w1);
    const Index n = a.size();
    const Index m = b.size();

    Matrix x = Matrix::Zero(n, m);
    std::vector<std::vector<char>> basic(static_cast<std::size_t>(n), std::vector<char>(static_cast<std::size_t>(m), 0));
    {
        Vector ra = a, rb = b;
        Index i = 0, j = 0;
        while (true) {
            const double q = std::min(ra(i), rb(j));
            x(i, j) = q;
            basic[i][j] = 1;
            ra(i) -= q;
            rb(j) -= q;
            if (i == n - 1 && j == m - 1) break;
            if (j == m - 1 || (i < n - 1 && ra(i) <= rb(j)))
                ++i;
            else
                ++j;
        }
    }

    const double scale = std::max(1.0, costs.cwiseAbs().maxCoeff());
    const double tol = 1e-12 * scale;
    Vector u(n), v(m);
    // Tree nodes: rows 0..n-1, columns n..n+m-1.
    const Index nodes = n + m;
    const int max_pivots = static_cast<int>(50 * (n + m) * (n + m) + 1000);
    for (int pivot = 0;; ++pivot) {
        if (pivot > max_pivots) throw RuntimeError("transportation simplex exceeded pivot limit");
        // Duals from u_i + v_j = c_ij on the basis tree (u_0 = 0).
        std::vector<char> seen(static_cast<std::size_t>(nodes), 0);
        std::deque<Index> queue{0};
        u(0) = 0.0;
        seen[0] = 1;
        while (!queue.empty()) {
            const Index node = queue.front();
            queue.pop_front();
            if (node < n) {
                for (Index j = 0; j < m; ++j)
                    if (basic[node][j] && !seen[n + j]) {
                        v(j) = costs(node, j) - u(node);
                        seen[n + j] = 1;
                        queue.push_back(n + j);
                    }
            } else {
                const Index j = node - n;
                for (Index i = 0; i < n; ++i)
                    if (basic[i][j] && !seen[i]) {
                        u(i) = costs(i, j) - v(j);
                        seen[i] = 1;
                        queue.push_back(i);
                    }
            }
        }
        Index ei = -1, ej = -1;
        for (Index i = 0; i < n && ei < 0; ++i)
            for (Index j = 0; j < m; ++j)
                if (!basic[i][j] && costs(i, j) - u(i) - v(j) < -tol) {
                    ei = i;
                    ej = j;
                    break;
                }
        if (ei < 0) break;

        // Tree path from column node ej back to row node ei closes the cycle with (ei, ej).
        std::vector<Index> parent(static_cast<std::size_t>(nodes), -1);
        std::vector<char> visited(static_cast<std::size_t>(nodes), 0);
        std::deque<Index> bfs{ei};
        visited[ei] = 1;
        while (!bfs.empty()) {
            const Index node = bfs.front();
            bfs.pop_front();
            if (node == n + ej) break;
            if (node < n) {
                for (Index j = 0; j < m; ++j)
                    if (basic[node][j] && !visited[n + j]) {
                        visited[n + j] = 1;
                        parent[n + j] = node;
                        bfs.push_back(n + j);
                    }
            } else {
                const Index j = node - n;
                for (Index i = 0; i < n; ++i)
                    if (basic[i][j] && !visited[i]) {
                        visited[i] = 1;
                        parent[i] = node;
                        bfs.push_back(i);
                    }
            }
        }
        // Walk ej -> ei; cells alternate "-" (first) and "+".
        std::vector<std::pair<Index, Index>> cells;
        for (Index node = n + ej; node != ei; node = parent[node]) {
            const Index p = parent[node];
            if (p < 0) throw RuntimeError("transportation basis is not a spanning tree");
            cells.push_back(node < n ? std::pair{node, p - n} : std::pair{p, node - n});
        }
        double theta = std::numeric_limits<double>::infinity();
        Index li = -1, lj = -1;
        for (std::size_t k = 0; k < cells.size(); k += 2) {
            const auto [i, j] = cells[k];
            const double val = x(i, j);
            if (val < theta || (val == theta && (i < li || (i == li && j < lj)))) {
                theta = val;
                li = i;
                lj = j;
            }
        }
        x(ei, ej) = theta;
        for (std::size_t k = 0; k < cells.size(); ++k) {
            const auto [i, j] = cells[k];
            x(i, j) += (k % 2 == 0) ? -theta : theta;
        }
        x(li, lj) = 0.0;
        basic[ei][ej] = 1;
        basic[li][lj] = 0;
    }

    x = x.cwiseMax(0.0);
    CouplingPlan plan{x, costs, a, b, detail::plan_objective(x, costs)};
    return plan;
}

/// Two-phase dense tableau simplex (Bland's rule) for the same LP. Slow; used to cross-check
/// the network simplex.
inline CouplingPlan solve_lp_dense(const Matrix& costs, const Vector& w0, const Vector& w1) {
    require(costs.rows() == w0.size() && costs.cols() == w1.size(), "cost matrix shape does not match marginals");
    const Vector a = detail::prepare_marginal(w0);
    const Vector b = detail::prepare_marginal(w1);
    const Index n = a.size(), m = b.size();
    const Index vars = n * m;
    const Index rows = n + m - 1;  // last column constraint is implied
    const Index cols = vars + rows + 1;  // structural, artificial, rhs
    Matrix tab = Matrix::Zero(rows + 1, cols);
    for (Index i = 0; i < n; ++i) {
        for (Index j = 0; j < m; ++j) tab(i, i * m + j) = 1.0;
        tab(i, cols - 1) = a(i);
    }
    for (Index j = 0; j + 1 < m; ++j) {
        for (Index i = 0; i < n; ++i) tab(n + j, i * m + j) = 1.0;
        tab(n + j, cols - 1) = b(j);
    }
    for (Index r = 0; r < rows; ++r) tab(r, vars + r) = 1.0;
    std::vector<Index> basis(static_cast<std::size_t>(rows));
    for (Index r = 0; r < rows; ++r) basis[static_cast<std::size_t>(r)] = vars + r;

    auto run = [&](const Vector& obj, Index allowed) {
        // Reduced-cost row: obj - c_B B^-1 A.
        tab.row(rows).setZero();
        tab.row(rows).head(obj.size()) = obj.transpose();
        for (Index r = 0; r < rows; ++r) {
            const Index bv = basis[static_cast<std::size_t>(r)];
            if (bv < obj.size() && obj(bv) != 0.0) tab.row(rows) -= obj(bv) * tab.row(r);
        }
        for (int guard = 0; guard < 100000; ++guard) {
            Index enter = -1;
            for (Index c = 0; c < allowed; ++c)
                if (tab(rows, c) < -1e-12) {
                    enter = c;
                    break;
                }
            if (enter < 0) return;
            Index leave = -1;
            double best = std::numeric_limits<double>::infinity();
            for (Index r = 0; r < rows; ++r)
                if (tab(r, enter) > 1e-12) {
                    const double ratio = tab(r, cols - 1) / tab(r, enter);
                    if (ratio < best - 1e-15 ||
                        (std::abs(ratio - best) <= 1e-15 && basis[static_cast<std::size_t>(r)] <
                                                                basis[static_cast<std::size_t>(leave)])) {
                        best = ratio;
                        leave = r;
                    }
                }
            if (leave < 0) throw RuntimeError("dense simplex: unbounded");
            tab.row(leave) /= tab(leave, enter);
            for (Index r = 0; r <= rows; ++r)
                if (r != leave && tab(r, enter) != 0.0) tab.row(r) -= tab(r, enter) * tab.row(leave);
            basis[static_cast<std::size_t>(leave)] = enter;
        }
        throw RuntimeError("dense simplex: iteration limit");
    };

    Vector phase1 = Vector::Zero(vars + rows);
    phase1.tail(rows).setOnes();
    run(phase1, vars + rows);
    // Drive zero-level artificials out of the basis (the reduced system has full row rank).
    for (Index r = 0; r < rows; ++r) {
        if (basis[static_cast<std::size_t>(r)] < vars) continue;
        for (Index c = 0; c < vars; ++c)
            if (std::abs(tab(r, c)) > 1e-12) {
                tab.row(r) /= tab(r, c);
                for (Index o = 0; o <= rows; ++o)
                    if (o != r && tab(o, c) != 0.0) tab.row(o) -= tab(o, c) * tab.row(r);
                basis[static_cast<std::size_t>(r)] = c;
                break;
            }
    }
    Vector phase2 = Vector::Zero(vars + rows);
    for (Index i = 0; i < n; ++i)
        for (Index j = 0; j < m; ++j) phase2(i * m + j) = costs(i, j);
    run(phase2, vars);

    Matrix x = Matrix::Zero(n, m);
    for (Index r = 0; r < rows; ++r) {
        const Index bv = basis[static_cast<std::size_t>(r)];
        if (bv < vars) x(bv / m, bv % m) = std::max(0.0, tab(r, cols - 1));
    }
    return CouplingPlan{x, costs, a, b, detail::plan_objective(x, costs)};
}

struct SinkhornConfig {
    double eps_reg = 1e-2;
    int max_iterations = 200000;
    double tolerance = 1e-9;  // L1 marginal residual before rounding
};

/// Entropic OT in the log domain, followed by a rounding step onto the exact marginals.
inline CouplingPlan solve_sinkhorn(const Matrix& costs, const Vector& w0, const Vector& w1,
                                   const SinkhornConfig& cfg = {}) {
    require(costs.rows() == w0.size() && costs.cols() == w1.size(), "cost matrix shape does not match marginals");
    require(cfg.eps_reg > 0.0, "eps_reg must be positive");
    const Vector a = detail::prepare_marginal(w0);
    const Vector b = detail::prepare_marginal(w1);
    const Index n = a.size(), m = b.size();
    const double eps = cfg.eps_reg;
    const Vector log_a = a.array().log();
    const Vector log_b = b.array().log();
    Vector f = Vector::Zero(n), g = Vector::Zero(m);

    auto plan_from = [&]() {
        Matrix p(n, m);
        for (Index i = 0; i < n; ++i)
            for (Index j = 0; j < m; ++j) p(i, j) = std::exp((f(i) + g(j) - costs(i, j)) / eps);
        return p;
    };

    double residual = std::numeric_limits<double>::infinity();
    int it = 0;
    for (; it < cfg.max_iterations; ++it) {
        for (Index i = 0; i < n; ++i) {
            const Vector row = (g.array() - costs.row(i).transpose().array()) / eps;
            f(i) = eps * (log_a(i) - log_sum_exp(row));
        }
        for (Index j = 0; j < m; ++j) {
            const Vector col = (f.array() - costs.col(j).array()) / eps;
            g(j) = eps * (log_b(j) - log_sum_exp(col));
        }
        if (it % 10 == 0 || it + 1 == cfg.max_iterations) {
            // Columns are exact after the g-update; the row residual measures convergence.
            const Matrix p = plan_from();
            residual = (p.rowwise().sum() - a).cwiseAbs().sum();
            if (residual <= cfg.tolerance) break;
        }
    }
    if (!(residual <= cfg.tolerance)) {
        std::ostringstream os;
        os << "sinkhorn did not converge (L1 marginal residual " << residual << " after " << cfg.max_iterations
           << " iterations)";
        throw RuntimeError(os.str());
    }

    // Rounding onto the transport polytope.
    Matrix p = plan_from();
    const Vector rs = p.rowwise().sum();
    for (Index i = 0; i < n; ++i)
        if (rs(i) > a(i)) p.row(i) *= a(i) / rs(i);
    const Vector cs = p.colwise().sum().transpose();
    for (Index j = 0; j < m; ++j)
        if (cs(j) > b(j)) p.col(j) *= b(j) / cs(j);
    const Vector err_r = a - p.rowwise().sum();
    const Vector err_c = b - p.colwise().sum().transpose();
    const double mass = err_r.sum();
    if (mass > 0.0) p += err_r * err_c.transpose() / mass;
    return CouplingPlan{p, costs, a, b, detail::plan_objective(p, costs)};
}

/// j*(i) = argmax_j lambda_ij, lowest j on ties.
inline ComponentMatch match_components(const CouplingPlan& plan) {
    ComponentMatch out;
    for (Index i = 0; i < plan.lambda.rows(); ++i) {
        Index best = 0;
        for (Index j = 1; j < plan.lambda.cols(); ++j)
            if (plan.lambda(i, j) > plan.lambda(i, best)) best = j;
        out.match.push_back(static_cast<std::size_t>(best));
        out.mass.push_back(plan.lambda(i, best));
    }
    return out;
}

/// Mixture of pairwise Gaussian bridges weighted by the coupling.
class MixturePolicy {
public:
    MixturePolicy(const Gmm& halluc, const Gmm& trusted, const CouplingPlan& plan, const BridgeConfig& cfg = {}) {
        require(halluc.dim() == trusted.dim(), "dimension mismatch");
        require(plan.lambda.rows() == static_cast<Index>(halluc.size()) &&
                    plan.lambda.cols() == static_cast<Index>(trusted.size()),
                "plan shape does not match mixtures");
        for (Index i = 0; i < plan.lambda.rows(); ++i)
            for (Index j = 0; j < plan.lambda.cols(); ++j)
                if (plan.lambda(i, j) > 0.0)
                    terms_.push_back({GaussianBridge(halluc.component(static_cast<std::size_t>(i)),
                                                     trusted.component(static_cast<std::size_t>(j)), cfg),
                                      std::log(plan.lambda(i, j))});
        if (terms_.empty()) throw ValidationError("coupling has no positive entry");
    }

    /// log of rho_{t|ij}(z) lambda_ij for each positive pair.
    Vector log_terms(const Eigen::Ref<const Vector>& z, double t) const {
        Vector out(static_cast<Index>(terms_.size()));
        for (std::size_t k = 0; k < terms_.size(); ++k) {
            const GaussianDensity dens(terms_[k].bridge.marginal(t));
            out(static_cast<Index>(k)) = terms_[k].log_lambda + dens.log_pdf(z);
        }
        return out;
    }

    /// Normalized mixture weights over the positive pairs.
    Vector weights(const Eigen::Ref<const Vector>& z, double t) const {
        const Vector lt = log_terms(z, t);
        const double norm = log_sum_exp(lt);
        if (!(norm >= std::log(std::numeric_limits<double>::min()))) throw RuntimeError("point off all bridges");
        return (lt.array() - norm).exp().matrix();
    }

    /// Induced flow density rho_t(z) = sum rho_{t|ij}(z) lambda_ij.
    double density(const Eigen::Ref<const Vector>& z, double t) const { return std::exp(log_sum_exp(log_terms(z, t))); }

    Vector drift(const Eigen::Ref<const Vector>& z, double t) const {
        const Vector w = weights(z, t);
        Vector u = Vector::Zero(z.size());
        for (std::size_t k = 0; k < terms_.size(); ++k)
            if (w(static_cast<Index>(k)) > 0.0) u += w(static_cast<Index>(k)) * terms_[k].bridge.drift(z, t);
        return u;
    }

    std::size_t pair_count() const { return terms_.size(); }

private:
    struct Term {
        GaussianBridge bridge;
        double log_lambda;
    };
    std::vector<Term> terms_;
};

inline Vector mixture_drift(const Gmm& halluc, const Gmm& trusted, const CouplingPlan& plan,
                            const Eigen::Ref<const Vector>& z, double time, const BridgeConfig& cfg = {}) {
    return MixturePolicy(halluc, trusted, plan, cfg).drift(z, time);
}

// ---------------------------------------------------------------------------------------------
// JSON artifact: {schema_version, layer, head, level, lambda[][], costs[][], objective, match[]}

inline Json coupling_to_json(const CouplingPlan& plan, const ComponentMatch& match, int layer, int head,
                             const std::string& level) {
    return Json{{"schema_version", kSchemaVersion},
                {"layer", layer},
                {"head", head},
                {"level", level},
                {"lambda", to_json(plan.lambda)},
                {"costs", to_json(plan.costs)},
                {"row_marginals", to_json(plan.row_marginals)},
                {"col_marginals", to_json(plan.col_marginals)},
                {"objective", plan.objective},
                {"match", match.match}};
}

inline CouplingPlan coupling_from_json(const Json& j) {
    check_schema(j, "coupling artifact");
    CouplingPlan plan;
    plan.lambda = matrix_from_json(j.at("lambda"));
    plan.costs = matrix_from_json(j.at("costs"));
    plan.row_marginals = j.contains("row_marginals") ? vector_from_json(j.at("row_marginals"))
                                                     : Vector(plan.lambda.rowwise().sum());
    plan.col_marginals = j.contains("col_marginals") ? vector_from_json(j.at("col_marginals"))
                                                     : Vector(plan.lambda.colwise().sum().transpose());
    plan.objective = j.at("objective").get<double>();
    if (plan.lambda.rows() != plan.costs.rows() || plan.lambda.cols() != plan.costs.cols())
        throw ValidationError("coupling artifact: lambda and costs shapes differ");
    return plan;
}

}  // namespace scalpel
