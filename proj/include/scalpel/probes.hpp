#pragma once

// Per-head logistic probes separating hallucinated (1) from trusted (0) activations, the
// resulting L x N_h validation-accuracy matrix, and top-k head selection.

#include "scalpel/activation_store.hpp"

namespace scalpel {

struct ProbeConfig {
    double l2 = 1.0;            // penalty on the standardized weights (bias unpenalized)
    int max_iterations = 100;   // Newton steps
    double tolerance = 1e-8;    // gradient-norm stop
    double val_fraction = 0.2;  // stratified held-out share

    void validate() const {
        require(l2 >= 0.0 && std::isfinite(l2), "l2 must be non-negative");
        require(max_iterations >= 1, "max_iterations must be positive");
        require(val_fraction > 0.0 && val_fraction < 1.0, "val_fraction must lie in (0, 1)");
    }
};

struct HeadProbe {
    Vector weights;  // in raw feature space
    double bias = 0.0;
    int layer = 0;
    int head = 0;
    double val_accuracy = 0.0;
    int iterations = 0;

    /// 1 (hallucinated) when w.x + b > 0.
    int predict(const Eigen::Ref<const Vector>& x) const { return weights.dot(x) + bias > 0.0 ? 1 : 0; }
};

/// Minimizes mean cross-entropy + (l2 / 2) |w|^2 over standardized features with damped Newton
/// steps. Weights are mapped back to raw feature space on return.
inline HeadProbe fit_logistic(const Eigen::Ref<const Matrix>& x, const std::vector<int>& y, const ProbeConfig& cfg = {}) {
    cfg.validate();
    const Index n = x.rows(), d = x.cols();
    require(n >= 1 && static_cast<std::size_t>(n) == y.size(), "one label per sample");
    require(x.allFinite(), "non-finite probe features");
    const Vector mean = x.colwise().mean().transpose();
    Vector scale = ((x.rowwise() - mean.transpose()).cwiseAbs2().colwise().mean().transpose()).cwiseSqrt();
    for (Index j = 0; j < d; ++j)
        if (!(scale(j) > 1e-12)) scale(j) = 1.0;  // constant feature: leave unscaled
    Matrix xs(n, d + 1);
    xs.leftCols(d) = (x.rowwise() - mean.transpose()).array().rowwise() / scale.transpose().array();
    xs.col(d).setOnes();
    Vector t(n);
    for (Index i = 0; i < n; ++i) t(i) = y[static_cast<std::size_t>(i)] ? 1.0 : 0.0;

    Vector penalty = Vector::Constant(d + 1, cfg.l2);
    penalty(d) = 0.0;
    auto objective = [&](const Vector& w) {
        const Vector s = xs * w;
        double ce = 0.0;
        for (Index i = 0; i < n; ++i) ce += std::max(s(i), 0.0) + std::log1p(std::exp(-std::abs(s(i)))) - t(i) * s(i);
        return ce / double(n) + 0.5 * w.dot(penalty.cwiseProduct(w));
    };

    Vector w = Vector::Zero(d + 1);
    double f = objective(w);
    HeadProbe probe;
    for (int it = 0; it < cfg.max_iterations; ++it) {
        const Vector s = xs * w;
        Vector p(n), curv(n);
        for (Index i = 0; i < n; ++i) {
            p(i) = 1.0 / (1.0 + std::exp(-s(i)));
            curv(i) = p(i) * (1.0 - p(i));
        }
        const Vector grad = xs.transpose() * (p - t) / double(n) + penalty.cwiseProduct(w);
        if (grad.norm() <= cfg.tolerance) break;
        Matrix hess = xs.transpose() * curv.asDiagonal() * xs / double(n);
        hess.diagonal() += penalty;
        hess.diagonal().array() += 1e-12;
        const Vector step = hess.ldlt().solve(grad);
        double rate = 1.0;
        Vector next = w - step;
        double fn = objective(next);
        while (fn > f && rate > 1e-10) {
            rate *= 0.5;
            next = w - rate * step;
            fn = objective(next);
        }
        probe.iterations = it + 1;
        if (fn > f) break;
        w = next;
        f = fn;
    }
    probe.weights = w.head(d).cwiseQuotient(scale);
    probe.bias = w(d) - probe.weights.dot(mean);
    return probe;
}

/// Fits on a stratified, seeded 80/20 split and reports accuracy on the held-out part.
inline HeadProbe train_probe(const Eigen::Ref<const Matrix>& x, const std::vector<int>& y, std::uint64_t seed,
                             const ProbeConfig& cfg = {}) {
    cfg.validate();
    require(x.rows() >= 4, "probe needs at least 4 samples");
    require(static_cast<std::size_t>(x.rows()) == y.size(), "one label per sample");
    std::vector<Index> cls[2];
    for (std::size_t i = 0; i < y.size(); ++i) {
        require(y[i] == 0 || y[i] == 1, "labels must be 0 or 1");
        cls[y[i]].push_back(static_cast<Index>(i));
    }
    if (cls[0].empty() || cls[1].empty()) throw ValidationError("degenerate labels");
    Rng rng(seed);
    std::vector<Index> train_idx, val_idx;
    for (auto& c : cls) {
        rng.shuffle(c);
        const auto count = static_cast<Index>(c.size());
        const Index n_val = std::min(count - 1, std::max<Index>(1, std::llround(cfg.val_fraction * double(count))));
        val_idx.insert(val_idx.end(), c.begin(), c.begin() + n_val);
        train_idx.insert(train_idx.end(), c.begin() + n_val, c.end());
    }
    std::sort(train_idx.begin(), train_idx.end());
    std::sort(val_idx.begin(), val_idx.end());
    Matrix xt(static_cast<Index>(train_idx.size()), x.cols());
    std::vector<int> yt;
    for (std::size_t i = 0; i < train_idx.size(); ++i) {
        xt.row(static_cast<Index>(i)) = x.row(train_idx[i]);
        yt.push_back(y[static_cast<std::size_t>(train_idx[i])]);
    }
    HeadProbe probe = fit_logistic(xt, yt, cfg);
    std::size_t correct = 0;
    for (Index i : val_idx) correct += probe.predict(x.row(i).transpose()) == y[static_cast<std::size_t>(i)];
    probe.val_accuracy = double(correct) / double(val_idx.size());
    return probe;
}

struct HeadAccuracyMatrix {
    Matrix acc;                   // L x N_h validation accuracies
    std::size_t k = 0;            // selection count
    std::vector<HeadId> selected; // top-k heads, accuracy descending
    std::vector<HeadProbe> probes;  // row-major over (layer, head); not serialized

    Index layers() const { return acc.rows(); }
    Index heads() const { return acc.cols(); }
};

/// The k highest-accuracy heads, accuracy descending; ties go to the lower (layer, head).
inline std::vector<HeadId> select_top_k(const HeadAccuracyMatrix& m, std::size_t k) {
    const std::size_t total = static_cast<std::size_t>(m.acc.size());
    if (k < 1 || k > total) throw ValidationError("k out of range");
    std::vector<HeadId> all;
    for (Index l = 0; l < m.layers(); ++l)
        for (Index n = 0; n < m.heads(); ++n) all.push_back({int(l), int(n)});
    std::stable_sort(all.begin(), all.end(),
                     [&](const HeadId& a, const HeadId& b) { return m.acc(a.layer, a.head) > m.acc(b.layer, b.head); });
    all.resize(k);
    return all;
}

inline void set_selection(HeadAccuracyMatrix& m, std::size_t k) {
    m.selected = select_top_k(m, k);
    m.k = k;
}

/// One probe per head on the labelled union of both tensors (trusted = 0, hallucinated = 1).
/// Every head uses the same seeded split. When k > 0 the top-k selection is filled in.
inline HeadAccuracyMatrix build_accuracy_matrix(const ActivationTensor& trusted, const ActivationTensor& halluc,
                                                std::uint64_t seed, const ProbeConfig& cfg = {}, std::size_t k = 0) {
    const auto& a = trusted.dims();
    const auto& b = halluc.dims();
    if (a.layers != b.layers || a.heads != b.heads || a.dim != b.dim)
        throw ValidationError("activation tensors differ in (L, N_h, d)");
    require(a.samples >= 20 && b.samples >= 20, "each tensor needs at least 20 samples");
    std::vector<int> y(a.samples, 0);
    y.resize(a.samples + b.samples, 1);
    HeadAccuracyMatrix m;
    m.acc = Matrix::Zero(Index(a.layers), Index(a.heads));
    m.probes.resize(a.layers * a.heads);
    parallel_for(a.layers * a.heads, [&](std::size_t i) {
        const std::size_t l = i / a.heads, n = i % a.heads;
        Matrix x(Index(a.samples + b.samples), Index(a.dim));
        x.topRows(Index(a.samples)) = slice_head(trusted, l, n);
        x.bottomRows(Index(b.samples)) = slice_head(halluc, l, n);
        HeadProbe p = train_probe(x, y, seed, cfg);
        p.layer = int(l);
        p.head = int(n);
        m.probes[i] = std::move(p);
    });
    for (std::size_t i = 0; i < m.probes.size(); ++i) m.acc(Index(i / a.heads), Index(i % a.heads)) = m.probes[i].val_accuracy;
    if (k > 0) set_selection(m, k);
    return m;
}

// JSON artifact: {schema_version, L, N_h, acc[][], k, selected[{layer, head}]}

inline Json accuracy_to_json(const HeadAccuracyMatrix& m) {
    Json sel = Json::array();
    for (const auto& h : m.selected) sel.push_back({{"layer", h.layer}, {"head", h.head}});
    return Json{{"schema_version", kSchemaVersion}, {"L", m.layers()}, {"N_h", m.heads()},
                {"acc", to_json(m.acc)},            {"k", m.k},        {"selected", sel}};
}

inline HeadAccuracyMatrix accuracy_from_json(const Json& j) {
    check_schema(j, "accuracy matrix");
    HeadAccuracyMatrix m;
    m.acc = matrix_from_json(j.at("acc"));
    if (m.acc.rows() != j.at("L").get<Index>() || m.acc.cols() != j.at("N_h").get<Index>())
        throw ValidationError("accuracy matrix: acc shape disagrees with L, N_h");
    m.k = j.at("k").get<std::size_t>();
    for (const auto& h : j.at("selected")) m.selected.push_back({h.at("layer").get<int>(), h.at("head").get<int>()});
    if (m.selected.size() != m.k) throw ValidationError("accuracy matrix: selected length differs from k");
    return m;
}

}  // namespace scalpel
