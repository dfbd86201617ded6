#pragma once

// Runtime intervention. For every selected head at every generation step the live activation z
// is assigned to a hallucinated component r* with confidence c, the strength becomes
// alpha_base * c, and alpha * v_{r*} is added to z before the head's output projection, where
// v_r = mu_trusted[j*(r)] - mu_halluc[r] comes from the component coupling.

#include <map>

#include "scalpel/coupling.hpp"
#include "scalpel/probes.hpp"
#include "scalpel/toy_lvlm.hpp"

namespace scalpel {

enum class Solver { lp, sinkhorn };

inline std::string to_string(Solver s) { return s == Solver::lp ? "lp" : "sinkhorn"; }

inline Solver solver_from_string(const std::string& s) {
    if (s == "lp") return Solver::lp;
    if (s == "sinkhorn") return Solver::sinkhorn;
    throw ValidationError("unknown solver '" + s + "'");
}

struct PlanOptions {
    double alpha_base = 1.0;
    BridgeConfig bridge;
    Solver solver = Solver::lp;
    SinkhornConfig sinkhorn;
};

/// Fitted mixtures of one head.
struct GmmPair {
    Gmm trusted;
    Gmm halluc;
};

struct HeadPlan {
    HeadId id;
    Level level = Level::image;
    Gmm halluc;
    Gmm trusted;
    CouplingPlan coupling;
    ComponentMatch match;
    std::vector<Vector> transfer;  // one per hallucinated component
    Json artifacts;                // content-addressed references, filled by the pipeline
};

struct InterventionPlan {
    double alpha_base = 1.0;
    std::vector<HeadPlan> heads;  // sorted by (layer, head)

    const HeadPlan* find(int layer, int head) const {
        for (const auto& h : heads)
            if (h.id.layer == layer && h.id.head == head) return &h;
        return nullptr;
    }

    std::vector<HeadId> selected() const {
        std::vector<HeadId> out;
        for (const auto& h : heads) out.push_back(h.id);
        return out;
    }
};

/// Coupling, matching and transfer vectors for one head.
inline HeadPlan build_head_plan(HeadId id, Level level, const GmmPair& g, const PlanOptions& opt = {}) {
    if (g.trusted.dim() != g.halluc.dim()) throw ValidationError("dimension mismatch");
    HeadPlan h;
    h.id = id;
    h.level = level;
    h.halluc = g.halluc;
    h.trusted = g.trusted;
    const Matrix costs = cost_matrix(g.halluc, g.trusted, opt.bridge);
    h.coupling = opt.solver == Solver::lp
                     ? solve_lp(costs, mixture_weights(g.halluc), mixture_weights(g.trusted))
                     : solve_sinkhorn(costs, mixture_weights(g.halluc), mixture_weights(g.trusted), opt.sinkhorn);
    h.match = match_components(h.coupling);
    for (std::size_t r = 0; r < g.halluc.size(); ++r)
        h.transfer.push_back(g.trusted.component(h.match.match[r]).mean - g.halluc.component(r).mean);
    return h;
}

inline InterventionPlan build_plan(const std::vector<HeadId>& selected, const std::map<HeadId, GmmPair>& gmms,
                                   Level level, const PlanOptions& opt = {}) {
    require(opt.alpha_base > 0.0 && std::isfinite(opt.alpha_base), "alpha_base must be positive");
    InterventionPlan plan;
    plan.alpha_base = opt.alpha_base;
    for (const auto& id : selected) {
        const auto it = gmms.find(id);
        if (it == gmms.end())
            throw ValidationError("missing artifact for head (" + std::to_string(id.layer) + ", " +
                                  std::to_string(id.head) + ")");
        plan.heads.push_back(build_head_plan(id, level, it->second, opt));
    }
    if (!plan.heads.empty()) {
        const Index d = plan.heads.front().trusted.dim();
        for (const auto& h : plan.heads) require(h.trusted.dim() == d, "dimension mismatch");
    }
    std::sort(plan.heads.begin(), plan.heads.end(), [](const HeadPlan& a, const HeadPlan& b) { return a.id < b.id; });
    return plan;
}

inline InterventionPlan build_plan(const HeadAccuracyMatrix& m, const std::map<HeadId, GmmPair>& gmms, Level level,
                                   const PlanOptions& opt = {}) {
    return build_plan(m.selected, gmms, level, opt);
}

/// Union of both plans' heads; where a head appears in both, the object-level plan wins.
inline InterventionPlan combine_plans(const InterventionPlan& image, const InterventionPlan& object) {
    require(image.alpha_base == object.alpha_base, "plans use different alpha_base");
    InterventionPlan out;
    out.alpha_base = object.alpha_base;
    out.heads = object.heads;
    for (const auto& h : image.heads)
        if (!object.find(h.id.layer, h.id.head)) out.heads.push_back(h);
    std::sort(out.heads.begin(), out.heads.end(), [](const HeadPlan& a, const HeadPlan& b) { return a.id < b.id; });
    return out;
}

struct StepDecision {
    std::size_t sequence = 0;
    int step = 0;
    int layer = 0;
    int head = 0;
    std::size_t r_star = 0;
    double confidence = 0.0;
    double alpha_dynamic = 0.0;
    Vector applied;  // alpha_dynamic * v_{r*}
    Vector z;        // activation before the edit
};

/// Pure: the same (plan, head, z) always gives the same decision.
inline StepDecision decide(const InterventionPlan& plan, int layer, int head, const Eigen::Ref<const Vector>& z) {
    const HeadPlan* h = plan.find(layer, head);
    if (!h) throw ValidationError("head not in plan");
    if (z.size() != h->halluc.dim()) throw ValidationError("dimension mismatch");
    const Assignment a = assign(h->halluc, z);
    StepDecision d;
    d.layer = layer;
    d.head = head;
    d.r_star = a.component;
    d.confidence = a.confidence;
    d.alpha_dynamic = plan.alpha_base * a.confidence;
    d.applied = d.alpha_dynamic * h->transfer[a.component];
    d.z = z;
    return d;
}

/// Edit provider for forward_batch / generate that consults the plan and appends each decision
/// to the per-sequence logs.
class PlanProvider {
public:
    PlanProvider(const InterventionPlan& plan, std::size_t sequences) : plan_(plan), logs_(sequences) {
        provider_.heads = plan.selected();
        provider_.edit = [this](std::size_t seq, const HookRecord& rec) {
            StepDecision d = decide(plan_, rec.layer, rec.head, rec.z);
            d.sequence = seq;
            d.step = rec.step;
            Vector applied = d.applied;
            logs_.at(seq).push_back(std::move(d));
            return applied;
        };
    }
    PlanProvider(const PlanProvider&) = delete;
    PlanProvider& operator=(const PlanProvider&) = delete;

    const EditProvider* get() const { return &provider_; }
    std::vector<std::vector<StepDecision>>& logs() { return logs_; }

private:
    const InterventionPlan& plan_;
    std::vector<std::vector<StepDecision>> logs_;
    EditProvider provider_;
};

struct InterventionResult {
    std::vector<int> tokens;
    std::vector<StepDecision> decisions;  // steps x selected heads
};

inline InterventionResult intervened_generate(const ToyModel& model, const TokenSequence& seq,
                                              const InterventionPlan& plan, int steps) {
    for (const auto& h : plan.heads)
        if (h.trusted.dim() != model.config().head_dim) throw ValidationError("plan dimension does not match model");
    PlanProvider provider(plan, 1);
    auto res = generate(model, seq, steps, plan.heads.empty() ? nullptr : provider.get());
    return {std::move(res.tokens), std::move(provider.logs()[0])};
}

/// First answer token of every sequence (greedy), optionally under the plan. Sequences are
/// processed in equal-length batches; decisions carry the index into `seqs`.
inline InterventionResult answer_tokens(const ToyModel& model, const std::vector<TokenSequence>& seqs,
                                        const InterventionPlan* plan = nullptr,
                                        std::vector<StepDecision>* decisions = nullptr) {
    require(!seqs.empty(), "empty dataset");
    if (plan)
        for (const auto& h : plan->heads)
            if (h.trusted.dim() != model.config().head_dim) throw ValidationError("plan dimension does not match model");
    InterventionResult out;
    out.tokens.resize(seqs.size());
    constexpr std::size_t kChunk = 256;
    for (std::size_t start = 0; start < seqs.size();) {
        std::size_t end = start + 1;
        while (end < seqs.size() && end - start < kChunk && seqs[end].length() == seqs[start].length()) ++end;
        std::vector<const TokenSequence*> batch;
        for (std::size_t i = start; i < end; ++i) batch.push_back(&seqs[i]);
        ForwardOptions opt;
        std::optional<PlanProvider> provider;
        if (plan && !plan->heads.empty()) {
            provider.emplace(*plan, batch.size());
            opt.provider = provider->get();
        }
        const auto res = forward_batch(model, batch, opt);
        for (std::size_t i = 0; i < batch.size(); ++i) {
            const Vector logits = res.logits.row(Index(i)).transpose();
            if (!logits.allFinite()) throw RuntimeError("non-finite logits during generation");
            out.tokens[start + i] = argmax_token(logits);
        }
        if (provider)
            for (auto& log : provider->logs())
                for (auto& d : log) {
                    d.sequence += start;
                    out.decisions.push_back(std::move(d));
                }
        start = end;
    }
    if (decisions) *decisions = out.decisions;
    return out;
}

struct TrustShift {
    std::vector<double> before;  // trusted-GMM log-pdf of z
    std::vector<double> after;   // ... of z + applied
    double mean_shift = 0.0;
    double fraction_increased = 0.0;  // share of decisions with after > before
    std::size_t count = 0;
};

inline TrustShift trust_shift(const std::vector<StepDecision>& decisions, const InterventionPlan& plan) {
    require(!decisions.empty(), "no decisions to evaluate");
    TrustShift r;
    r.count = decisions.size();
    r.before.resize(r.count);
    r.after.resize(r.count);
    parallel_for(r.count, [&](std::size_t i) {
        const auto& d = decisions[i];
        const HeadPlan* h = plan.find(d.layer, d.head);
        if (!h) throw ValidationError("head not in plan");
        r.before[i] = log_pdf(h->trusted, d.z);
        r.after[i] = log_pdf(h->trusted, d.z + d.applied);
    });
    std::size_t up = 0;
    double total = 0.0;
    for (std::size_t i = 0; i < r.count; ++i) {
        total += r.after[i] - r.before[i];
        up += r.after[i] > r.before[i];
    }
    r.mean_shift = total / double(r.count);
    r.fraction_increased = double(up) / double(r.count);
    return r;
}

// ---------------------------------------------------------------------------------------------
// Persistence

inline Json decision_to_json(const StepDecision& d) {
    return Json{{"sequence", d.sequence},        {"step", d.step},
                {"layer", d.layer},              {"head", d.head},
                {"r_star", d.r_star},            {"confidence", d.confidence},
                {"alpha_dynamic", d.alpha_dynamic}, {"applied", to_json(d.applied)},
                {"z", to_json(d.z)}};
}

inline StepDecision decision_from_json(const Json& j) {
    StepDecision d;
    d.sequence = j.at("sequence").get<std::size_t>();
    d.step = j.at("step").get<int>();
    d.layer = j.at("layer").get<int>();
    d.head = j.at("head").get<int>();
    d.r_star = j.at("r_star").get<std::size_t>();
    d.confidence = j.at("confidence").get<double>();
    d.alpha_dynamic = j.at("alpha_dynamic").get<double>();
    d.applied = vector_from_json(j.at("applied"));
    d.z = vector_from_json(j.at("z"));
    return d;
}

inline void write_decisions(const std::filesystem::path& path, const std::vector<StepDecision>& ds) {
    std::string text;
    for (const auto& d : ds) text += decision_to_json(d).dump() + "\n";
    write_text(path, text);
}

/// Plan artifact. GMMs and couplings are referenced through each head's `artifacts` object
/// ({halluc_gmm, trusted_gmm, coupling} -> {path, sha256}); transfer vectors are inlined.
inline Json plan_to_json(const InterventionPlan& plan) {
    Json heads = Json::array();
    for (const auto& h : plan.heads) {
        Json tv = Json::array();
        for (const auto& v : h.transfer) tv.push_back(to_json(v));
        heads.push_back({{"layer", h.id.layer},
                         {"head", h.id.head},
                         {"level", to_string(h.level)},
                         {"match", h.match.match},
                         {"transfer_vectors", tv},
                         {"artifacts", h.artifacts.is_null() ? Json::object() : h.artifacts}});
    }
    return Json{{"schema_version", kSchemaVersion}, {"alpha_base", plan.alpha_base}, {"heads", heads}};
}

/// Loads a plan, reading the referenced artifacts relative to `base` and checking their hashes.
inline InterventionPlan plan_from_json(const Json& j, const std::filesystem::path& base) {
    check_schema(j, "intervention plan");
    InterventionPlan plan;
    plan.alpha_base = j.at("alpha_base").get<double>();
    auto load = [&](const Json& ref) {
        const auto path = base / ref.at("path").get<std::string>();
        const std::string bytes = read_file_bytes(path);
        if (sha256_hex(bytes) != ref.at("sha256").get<std::string>())
            throw ValidationError("artifact hash mismatch: " + path.string());
        return Json::parse(bytes);
    };
    for (const auto& hj : j.at("heads")) {
        HeadPlan h;
        h.id = {hj.at("layer").get<int>(), hj.at("head").get<int>()};
        h.level = level_from_string(hj.at("level").get<std::string>());
        h.artifacts = hj.at("artifacts");
        h.halluc = gmm_from_json(load(h.artifacts.at("halluc_gmm")));
        h.trusted = gmm_from_json(load(h.artifacts.at("trusted_gmm")));
        h.coupling = coupling_from_json(load(h.artifacts.at("coupling")));
        h.match.match = hj.at("match").get<std::vector<std::size_t>>();
        for (const auto& v : hj.at("transfer_vectors")) h.transfer.push_back(vector_from_json(v));
        if (h.match.match.size() != h.halluc.size() || h.transfer.size() != h.halluc.size())
            throw ValidationError("plan: match and transfer vectors must cover every component");
        for (std::size_t r = 0; r < h.halluc.size(); ++r) {
            h.match.mass.push_back(h.coupling.lambda(Index(r), Index(h.match.match[r])));
            if (!(h.transfer[r] == h.trusted.component(h.match.match[r]).mean - h.halluc.component(r).mean))
                throw ValidationError("plan: transfer vector disagrees with its mixtures");
        }
        plan.heads.push_back(std::move(h));
    }
    return plan;
}

}  // namespace scalpel
