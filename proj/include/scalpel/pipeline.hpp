#pragma once

// End-to-end orchestration: data generation, training, activation collection, probing, GMM
// fitting, coupling, plan assembly and evaluation, each stage writing its artifacts under one
// output directory. Also the standalone evaluate and project commands.

#include <set>
#include <sstream>

#include "scalpel/datagen.hpp"
#include "scalpel/mitigation.hpp"

namespace scalpel {

namespace fs = std::filesystem;

struct RunConfig {
    std::uint64_t seed = 1;
    ModelConfig model;
    DatagenConfig data;
    TrainConfig train;
    std::size_t train_examples = 4000;
    std::size_t n = 1500;  // episodes per manifold
    std::size_t test_episodes = 500;
    std::size_t gmm_k = 32;
    std::size_t top_k = 4;
    double alpha_base = 1.0;
    double bridge_epsilon = 0.0;
    double sinkhorn_eps_reg = 1e-2;
    Solver solver = Solver::lp;
    int em_max_iterations = 200;
    double probe_l2 = 1.0;
    std::string out_dir = "scalpel_out";

    void validate() const {
        model.validate();
        data.validate();
        require(train_examples >= 1 && n >= 1 && test_episodes >= 1 && gmm_k >= 1 && top_k >= 1,
                "all counts must be positive");
        require(top_k <= std::size_t(model.layers) * std::size_t(model.heads), "top_k exceeds the number of heads");
        require(alpha_base > 0 && std::isfinite(alpha_base), "alpha_base must be positive");
        require(bridge_epsilon >= 0, "bridge_epsilon must be non-negative");
        require(sinkhorn_eps_reg > 0, "sinkhorn_eps_reg must be positive");
        require(em_max_iterations >= 1, "em_max_iterations must be positive");
        require(probe_l2 >= 0, "probe_l2 must be non-negative");
        require(model.visual_dim == data.feature_dim, "model visual_dim must equal datagen feature_dim");
        require(model.context >= 3 + data.slots + 1 + 1, "model context too short for the episode layout");
        require(model.vocab >= vocab::kFirstObject + data.objects, "vocabulary too small for the object count");
        require(!out_dir.empty(), "out_dir must be set");
    }

    /// out_dir is left out so runs of one config in different directories stay byte-identical.
    Json to_json() const {
        return Json{{"seed", seed},
                    {"model", model.to_json()},
                    {"data", data.to_json()},
                    {"train", train.to_json()},
                    {"train_examples", train_examples},
                    {"n", n},
                    {"test_episodes", test_episodes},
                    {"gmm_k", gmm_k},
                    {"top_k", top_k},
                    {"alpha_base", alpha_base},
                    {"bridge_epsilon", bridge_epsilon},
                    {"sinkhorn_eps_reg", sinkhorn_eps_reg},
                    {"solver", to_string(solver)},
                    {"em_max_iterations", em_max_iterations},
                    {"probe_l2", probe_l2}};
    }

    /// Missing keys keep their defaults; unknown keys are rejected so typos do not pass silently.
    static RunConfig from_json(const Json& j) {
        static const std::set<std::string> known = {
            "seed",      "model",      "data",           "train",          "train_examples",   "n",
            "test_episodes", "gmm_k",  "top_k",          "alpha_base",     "bridge_epsilon",   "sinkhorn_eps_reg",
            "solver",    "em_max_iterations", "probe_l2", "out_dir"};
        if (!j.is_object()) throw ValidationError("config must be a JSON object");
        for (const auto& [key, value] : j.items())
            if (!known.count(key)) throw ValidationError("unknown config key '" + key + "'");
        RunConfig c;
        try {
            c.seed = j.value("seed", c.seed);
            if (j.contains("model")) c.model = ModelConfig::from_json(j.at("model"));
            if (j.contains("data")) c.data = DatagenConfig::from_json(j.at("data"));
            if (j.contains("train")) c.train = TrainConfig::from_json(j.at("train"));
            auto count = [&](const char* key, std::size_t& field) {
                if (!j.contains(key)) return;
                const auto v = j.at(key).get<long long>();
                if (v < 1) throw ValidationError("all counts must be positive");
                field = static_cast<std::size_t>(v);
            };
            count("train_examples", c.train_examples);
            count("n", c.n);
            count("test_episodes", c.test_episodes);
            count("gmm_k", c.gmm_k);
            count("top_k", c.top_k);
            c.alpha_base = j.value("alpha_base", c.alpha_base);
            c.bridge_epsilon = j.value("bridge_epsilon", c.bridge_epsilon);
            c.sinkhorn_eps_reg = j.value("sinkhorn_eps_reg", c.sinkhorn_eps_reg);
            if (j.contains("solver")) c.solver = solver_from_string(j.at("solver").get<std::string>());
            c.em_max_iterations = j.value("em_max_iterations", c.em_max_iterations);
            c.probe_l2 = j.value("probe_l2", c.probe_l2);
            c.out_dir = j.value("out_dir", c.out_dir);
        } catch (const Json::exception& e) {
            throw ValidationError(std::string("bad config value: ") + e.what());
        }
        c.validate();
        return c;
    }

    PlanOptions plan_options() const {
        PlanOptions o;
        o.alpha_base = alpha_base;
        o.bridge.epsilon = bridge_epsilon;
        o.solver = solver;
        o.sinkhorn.eps_reg = sinkhorn_eps_reg;
        return o;
    }
};

inline RunConfig load_run_config(const fs::path& path) {
    Json j;
    try {
        j = read_json(path);
    } catch (const Json::exception& e) {
        throw ValidationError("cannot parse config '" + path.string() + "': " + e.what());
    }
    return RunConfig::from_json(j);
}

/// A pipeline stage failed; carries the stage name and the artifact it was producing.
class StageError : public RuntimeError {
public:
    StageError(std::string stage, fs::path artifact, const std::string& cause)
        : RuntimeError("stage '" + stage + "' failed (" + artifact.generic_string() + "): " + cause),
          stage_(std::move(stage)), artifact_(std::move(artifact)) {}
    const std::string& stage() const { return stage_; }
    const fs::path& artifact() const { return artifact_; }

private:
    std::string stage_;
    fs::path artifact_;
};

template <class F>
auto run_stage(const std::string& stage, const fs::path& artifact, F&& f) -> decltype(f()) {
    try {
        return f();
    } catch (const StageError&) {
        throw;
    } catch (const std::exception& e) {
        throw StageError(stage, artifact, e.what());
    }
}

// ---------------------------------------------------------------------------------------------
// Metrics (YES is the positive class)

struct BinaryMetrics {
    std::size_t count = 0;
    double accuracy = 0.0;
    double precision = 0.0;
    double recall = 0.0;
    double f1 = 0.0;
    double yes_ratio = 0.0;

    Json to_json() const {
        return Json{{"count", count},   {"accuracy", accuracy}, {"precision", precision},
                    {"recall", recall}, {"f1", f1},             {"yes_ratio", yes_ratio}};
    }
};

/// Precision, recall and F1 of an empty class (no positives predicted and none present) are 1.
inline BinaryMetrics score_answers(const std::vector<int>& predicted, const std::vector<int>& truth) {
    require(predicted.size() == truth.size() && !truth.empty(), "predictions and labels must align");
    std::size_t tp = 0, fp = 0, fn = 0, correct = 0, yes = 0;
    for (std::size_t i = 0; i < truth.size(); ++i) {
        const bool p = predicted[i] == vocab::kYes, t = truth[i] == vocab::kYes;
        correct += predicted[i] == truth[i];
        yes += p;
        tp += p && t;
        fp += p && !t;
        fn += !p && t;
    }
    BinaryMetrics m;
    m.count = truth.size();
    m.accuracy = double(correct) / double(m.count);
    m.precision = tp + fp == 0 ? 1.0 : double(tp) / double(tp + fp);
    m.recall = tp + fn == 0 ? 1.0 : double(tp) / double(tp + fn);
    m.f1 = 2 * tp + fp + fn == 0 ? 1.0 : 2.0 * double(tp) / double(2 * tp + fp + fn);
    m.yes_ratio = double(yes) / double(m.count);
    return m;
}

inline std::vector<int> answers_of(const std::vector<Episode>& es) {
    std::vector<int> out;
    out.reserve(es.size());
    for (const auto& e : es) out.push_back(e.answer);
    return out;
}

inline Json trust_shift_json(const TrustShift& t) {
    double before = 0.0, after = 0.0;
    for (std::size_t i = 0; i < t.count; ++i) {
        before += t.before[i];
        after += t.after[i];
    }
    return Json{{"count", t.count},
                {"mean_log_pdf_before", before / double(t.count)},
                {"mean_log_pdf_after", after / double(t.count)},
                {"mean_shift", t.mean_shift},
                {"fraction_increased", t.fraction_increased}};
}

struct Evaluation {
    BinaryMetrics vanilla;
    BinaryMetrics scalpel;
    std::optional<TrustShift> shift;  // absent when the plan made no decisions
    std::vector<StepDecision> decisions;

    Json to_json() const {
        Json j{{"vanilla", vanilla.to_json()}, {"scalpel", scalpel.to_json()}};
        j["trust_shift"] = shift ? trust_shift_json(*shift) : Json(nullptr);
        return j;
    }
};

/// Vanilla versus intervened first-token answers on the given episodes.
inline Evaluation evaluate_plan(const ToyModel& model, const std::vector<Episode>& episodes,
                                const InterventionPlan& plan) {
    require(!episodes.empty(), "no episodes to evaluate");
    const auto seqs = to_sequences(episodes);
    const auto truth = answers_of(episodes);
    Evaluation ev;
    ev.vanilla = score_answers(answer_tokens(model, seqs).tokens, truth);
    ev.scalpel = score_answers(answer_tokens(model, seqs, &plan, &ev.decisions).tokens, truth);
    if (!ev.decisions.empty()) ev.shift = trust_shift(ev.decisions, plan);
    return ev;
}

// ---------------------------------------------------------------------------------------------
// Artifact helpers

inline std::string head_tag(const HeadId& h) { return "l" + std::to_string(h.layer) + "_h" + std::to_string(h.head); }

inline Json head_list(const std::vector<HeadId>& hs) {
    Json a = Json::array();
    for (const auto& h : hs) a.push_back({{"layer", h.layer}, {"head", h.head}});
    return a;
}

inline Json file_ref(const fs::path& root, const fs::path& rel) {
    return Json{{"path", rel.generic_string()}, {"sha256", sha256_file(root / rel)}};
}

inline Json train_example_to_json(const TrainExample& e) {
    return Json{{"text", e.prompt.text}, {"visual", to_json(e.prompt.visual)}, {"answer", e.answer}};
}

/// Every regular file below root except `skip`, as sorted {path, sha256} entries.
inline Json hash_tree(const fs::path& root, const std::string& skip) {
    std::vector<std::string> files;
    for (const auto& entry : fs::recursive_directory_iterator(root))
        if (entry.is_regular_file()) {
            const auto rel = fs::relative(entry.path(), root).generic_string();
            if (rel != skip) files.push_back(rel);
        }
    std::sort(files.begin(), files.end());
    Json out = Json::array();
    for (const auto& f : files) out.push_back(file_ref(root, f));
    return out;
}

struct PipelineResult {
    fs::path out_dir;
    Json report;
};

/// Runs every stage for one config. Each stage writes under cfg.out_dir; failures are rethrown as
/// StageError naming the stage and the artifact being produced.
inline PipelineResult run_pipeline(const RunConfig& cfg) {
    cfg.validate();
    const fs::path root = cfg.out_dir;
    const std::uint64_t seed = cfg.seed;

    run_stage("setup", root, [&] {
        fs::create_directories(root);
        for (const char* sub : {"data", "activations", "probes", "gmm", "coupling", "plans"})
            fs::create_directories(root / sub);
        write_json(root / "config.json", cfg.to_json());
    });

    // Data
    const World world = make_world(cfg.data, seed);
    const auto training = run_stage("datagen", root / "data/train.jsonl", [&] {
        auto t = gen_training_set(world, cfg.train_examples, derive_seed(seed, 1));
        std::string text;
        for (const auto& e : t) text += train_example_to_json(e).dump() + "\n";
        write_text(root / "data/train.jsonl", text);
        return t;
    });
    const auto test_trusted = gen_trusted(world, cfg.test_episodes, derive_seed(seed, 30));
    const auto test_image = perturb_all(test_trusted, Level::image, cfg.data, derive_seed(seed, 31));
    const auto test_object = perturb_all(test_trusted, Level::object, cfg.data, derive_seed(seed, 32));
    std::vector<Episode> test_perturbed = test_image;
    test_perturbed.insert(test_perturbed.end(), test_object.begin(), test_object.end());
    run_stage("datagen", root / "data/test_perturbed.jsonl", [&] {
        write_episodes(root / "data/test_trusted.jsonl", test_trusted);
        write_episodes(root / "data/test_perturbed.jsonl", test_perturbed);
    });

    // Model
    ToyModel model(cfg.model, derive_seed(seed, 5));
    const auto train_report = run_stage("train", root / "model.bin", [&] {
        TrainConfig tc = cfg.train;
        tc.seed = derive_seed(seed, 6);
        auto rep = train(model, training, tc);
        save_model(model, root / "model.bin");
        write_json(root / "train_report.json",
                   Json{{"schema_version", kSchemaVersion},
                        {"train", tc.to_json()},
                        {"loss", rep.loss},
                        {"final_accuracy", rep.final_accuracy}});
        return rep;
    });

    // Manifolds
    const auto md = run_stage("collect", root / "activations", [&] {
        auto d = build_manifold_datasets(model, world, cfg.n, derive_seed(seed, 20));
        write_episodes(root / "data/trusted.jsonl", d.trusted);
        write_episodes(root / "data/halluc_image.jsonl", d.image);
        write_episodes(root / "data/halluc_object.jsonl", d.object);
        DatasetManifest manifest;
        manifest.seed = seed;
        for (Manifold m : {Manifold::trusted, Manifold::halluc_image, Manifold::halluc_object}) {
            const fs::path rel = to_string(m) + ".bin";
            write_tensor(d.acts(m), root / "activations" / rel);
            manifest.tensors[m] = rel;
            manifest.labels[m] = std::vector<int>(cfg.n, m == Manifold::trusted ? 0 : 1);
        }
        write_json(root / "activations/manifest.json", manifest.to_json());
        return d;
    });

    // Probes
    ProbeConfig pc;
    pc.l2 = cfg.probe_l2;
    std::map<Level, HeadAccuracyMatrix> acc;
    for (Level lv : {Level::image, Level::object}) {
        const fs::path rel = "probes/accuracy_" + to_string(lv) + ".json";
        acc[lv] = run_stage("probe", root / rel, [&] {
            auto m = build_accuracy_matrix(md.trusted_acts, md.acts(manifold_of(lv)), derive_seed(seed, 40), pc,
                                           cfg.top_k);
            write_json(root / rel, accuracy_to_json(m));
            return m;
        });
    }

    // GMMs: one trusted mixture per selected head, shared by both levels.
    struct FitJob {
        HeadId head;
        Manifold manifold;
        fs::path rel;
    };
    std::vector<FitJob> jobs;
    std::set<HeadId> trusted_heads;
    for (Level lv : {Level::image, Level::object})
        for (const auto& h : acc[lv].selected) {
            if (trusted_heads.insert(h).second) jobs.push_back({h, Manifold::trusted, "gmm/trusted_" + head_tag(h) + ".json"});
            jobs.push_back({h, manifold_of(lv), "gmm/" + to_string(manifold_of(lv)) + "_" + head_tag(h) + ".json"});
        }
    std::vector<Gmm> fitted(jobs.size());
    EmConfig em;
    em.max_iterations = cfg.em_max_iterations;
    parallel_for(jobs.size(), [&](std::size_t i) {
        const auto& job = jobs[i];
        fitted[i] = run_stage("fit", root / job.rel, [&] {
            const Matrix x = slice_head(md.acts(job.manifold), std::size_t(job.head.layer), std::size_t(job.head.head));
            return fit_em(x, cfg.gmm_k, derive_seed(seed, 50), em, job.manifold, job.head.layer, job.head.head);
        });
    });
    std::map<std::pair<Manifold, HeadId>, std::size_t> fit_index;
    for (std::size_t i = 0; i < jobs.size(); ++i) {
        run_stage("fit", root / jobs[i].rel, [&] { write_json(root / jobs[i].rel, gmm_to_json(fitted[i])); });
        fit_index[{jobs[i].manifold, jobs[i].head}] = i;
    }

    // Couplings and plans
    const PlanOptions opt = cfg.plan_options();
    std::map<Level, InterventionPlan> plans;
    for (Level lv : {Level::image, Level::object}) {
        std::map<HeadId, GmmPair> pairs;
        for (const auto& h : acc[lv].selected)
            pairs[h] = {fitted[fit_index.at({Manifold::trusted, h})], fitted[fit_index.at({manifold_of(lv), h})]};
        InterventionPlan plan = run_stage("couple", root / "coupling", [&] {
            return build_plan(acc[lv], pairs, lv, opt);
        });
        for (auto& hp : plan.heads) {
            const fs::path rel = "coupling/" + to_string(lv) + "_" + head_tag(hp.id) + ".json";
            run_stage("couple", root / rel, [&] {
                write_json(root / rel, coupling_to_json(hp.coupling, hp.match, hp.id.layer, hp.id.head, to_string(lv)));
                hp.artifacts = Json{
                    {"halluc_gmm", file_ref(root, jobs[fit_index.at({manifold_of(lv), hp.id})].rel)},
                    {"trusted_gmm", file_ref(root, jobs[fit_index.at({Manifold::trusted, hp.id})].rel)},
                    {"coupling", file_ref(root, rel)}};
            });
        }
        const fs::path rel = "plans/" + to_string(lv) + ".json";
        run_stage("plan", root / rel, [&] { write_json(root / rel, plan_to_json(plan)); });
        plans[lv] = std::move(plan);
    }
    const InterventionPlan combined = combine_plans(plans[Level::image], plans[Level::object]);
    run_stage("plan", root / "plans/combined.json", [&] { write_json(root / "plans/combined.json", plan_to_json(combined)); });

    // Evaluation
    Json report = run_stage("evaluate", root / "report.json", [&] {
        const auto seqs = to_sequences(test_perturbed);
        const auto truth = answers_of(test_perturbed);
        const Evaluation full = evaluate_plan(model, test_perturbed, combined);
        const auto without_obj = score_answers(answer_tokens(model, seqs, &plans[Level::image]).tokens, truth);
        const auto without_img = score_answers(answer_tokens(model, seqs, &plans[Level::object]).tokens, truth);
        const Evaluation clean = evaluate_plan(model, test_trusted, combined);
        write_decisions(root / "decisions.jsonl", full.decisions);

        Json by_level = Json::object();
        for (Level lv : {Level::image, Level::object}) {
            const auto& es = lv == Level::image ? test_image : test_object;
            by_level[to_string(lv)] = evaluate_plan(model, es, combined).to_json();
            by_level[to_string(lv)].erase("trust_shift");
        }
        Json r{{"schema_version", kSchemaVersion},
               {"seed", seed},
               {"train_accuracy", train_report.final_accuracy},
               {"selected", {{"image", head_list(plans[Level::image].selected())},
                             {"object", head_list(plans[Level::object].selected())},
                             {"combined", head_list(combined.selected())}}},
               {"perturbed",
                {{"vanilla", full.vanilla.to_json()},
                 {"scalpel", full.scalpel.to_json()},
                 {"w/o obj", without_obj.to_json()},
                 {"w/o img", without_img.to_json()}}},
               {"by_level", by_level},
               {"trusted", {{"vanilla", clean.vanilla.to_json()}, {"scalpel", clean.scalpel.to_json()}}},
               {"trust_shift", full.shift ? trust_shift_json(*full.shift) : Json(nullptr)}};
        write_json(root / "report.json", r);
        return r;
    });

    run_stage("manifest", root / "artifacts.json", [&] {
        write_json(root / "artifacts.json", Json{{"schema_version", kSchemaVersion}, {"files", hash_tree(root, "artifacts.json")}});
    });
    return {root, std::move(report)};
}

// ---------------------------------------------------------------------------------------------
// Commands. Return the process exit code: 0 success, 1 validation error, 2 stage failure.

inline int exit_code_for(const std::exception& e) { return dynamic_cast<const ValidationError*>(&e) ? 1 : 2; }

inline int cmd_pipeline(const fs::path& config_path, const std::optional<std::string>& out_dir, std::ostream& out,
                        std::ostream& err) {
    RunConfig cfg;
    try {
        cfg = load_run_config(config_path);
        if (out_dir) cfg.out_dir = *out_dir;
        cfg.validate();
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return 1;
    }
    try {
        const auto res = run_pipeline(cfg);
        out << dump_json(res.report);
        return 0;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return 2;
    }
}

/// Vanilla and intervened metrics on one episode file. Paths are relative to `dir`, as are the
/// artifact references inside the plan.
inline Json evaluate_artifacts(const fs::path& dir, const fs::path& model_path, const fs::path& plan_path,
                               const fs::path& episodes_path) {
    const ToyModel model = load_model(dir / model_path);
    const InterventionPlan plan = plan_from_json(read_json(dir / plan_path), dir);
    const auto episodes = read_episodes(dir / episodes_path);
    if (episodes.empty()) throw ValidationError("no episodes in '" + (dir / episodes_path).string() + "'");
    Json j = evaluate_plan(model, episodes, plan).to_json();
    j["schema_version"] = kSchemaVersion;
    j["count"] = episodes.size();
    return j;
}

inline int cmd_evaluate(const fs::path& dir, const fs::path& model_path, const fs::path& plan_path,
                        const fs::path& episodes_path, const std::optional<fs::path>& out_path, std::ostream& out,
                        std::ostream& err) {
    try {
        const Json j = evaluate_artifacts(dir, model_path, plan_path, episodes_path);
        if (out_path)
            write_json(dir / *out_path, j);
        else
            out << dump_json(j);
        return 0;
    } catch (const Json::exception& e) {
        err << "error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return exit_code_for(e);
    }
}

// ---------------------------------------------------------------------------------------------
// 2-D projection

struct Projection {
    Matrix scores;     // n x 2
    Vector explained;  // share of total variance on each axis
    Vector mean;
    Matrix axes;  // d x 2, unit columns
};

/// Principal axes of the sample covariance. Each axis is signed so its largest-magnitude entry is
/// positive; a 1-D input gets a zero second axis.
inline Projection pca_2d(const Eigen::Ref<const Matrix>& x) {
    if (x.rows() < 2) throw ValidationError("need ≥ 2 samples");
    require(x.allFinite(), "non-finite samples");
    const Index d = x.cols();
    Projection p;
    p.mean = x.colwise().mean().transpose();
    const Matrix centered = x.rowwise() - p.mean.transpose();
    const Matrix cov = centered.transpose() * centered / double(x.rows() - 1);
    Eigen::SelfAdjointEigenSolver<Matrix> es(cov);
    const double total = std::max(cov.trace(), 0.0);
    p.axes = Matrix::Zero(d, 2);
    p.explained = Vector::Zero(2);
    for (Index a = 0; a < std::min<Index>(2, d); ++a) {
        Vector v = es.eigenvectors().col(d - 1 - a);
        Index big;
        v.cwiseAbs().maxCoeff(&big);
        if (v(big) < 0) v = -v;
        p.axes.col(a) = v;
        p.explained(a) = total > 0 ? std::max(es.eigenvalues()(d - 1 - a), 0.0) / total : 0.0;
    }
    p.scores = centered * p.axes;
    return p;
}

struct ProjectInput {
    fs::path tensor;
    std::string label;  // manifold name written to the CSV
};

/// Stacks one head's activations from every tensor, projects them to 2-D and tags each row with
/// its manifold label and GMM hard assignment. The mixture is read from gmm_path when given,
/// otherwise fitted on the stacked samples with k components.
inline Vector project_to_csv(const std::vector<ProjectInput>& inputs, int layer, int head, const fs::path& out_path,
                             const std::optional<fs::path>& gmm_path, std::size_t k, std::uint64_t seed) {
    require(!inputs.empty(), "at least one tensor is required");
    std::vector<Matrix> parts;
    std::vector<std::string> labels;
    Index rows = 0;
    for (const auto& in : inputs) {
        const auto t = read_tensor(in.tensor);
        const auto& d = t.dims();
        if (layer < 0 || head < 0 || std::size_t(layer) >= d.layers || std::size_t(head) >= d.heads)
            throw ValidationError("invalid indices: (" + std::to_string(layer) + ", " + std::to_string(head) + ")");
        parts.push_back(slice_head(t, std::size_t(layer), std::size_t(head)));
        if (!parts.empty() && parts.back().cols() != parts.front().cols())
            throw ValidationError("tensors differ in head dimension");
        labels.insert(labels.end(), std::size_t(parts.back().rows()), in.label);
        rows += parts.back().rows();
    }
    Matrix x(rows, parts.front().cols());
    Index at = 0;
    for (const auto& p : parts) {
        x.middleRows(at, p.rows()) = p;
        at += p.rows();
    }
    const Projection proj = pca_2d(x);
    const Gmm g = gmm_path ? gmm_from_json(read_json(*gmm_path)) : fit_em(x, std::min<std::size_t>(k, std::size_t(x.rows())), seed);
    if (g.dim() != x.cols()) throw ValidationError("dimension mismatch");
    std::ostringstream csv;
    csv.precision(17);
    csv << "pc1,pc2,manifold_label,component_id\n";
    for (Index i = 0; i < x.rows(); ++i)
        csv << proj.scores(i, 0) << "," << proj.scores(i, 1) << "," << labels[std::size_t(i)] << ","
            << assign(g, x.row(i).transpose()).component << "\n";
    write_text(out_path, csv.str());
    return proj.explained;
}

}  // namespace scalpel
