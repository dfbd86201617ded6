#include <gtest/gtest.h>

#include <chrono>
#include <fstream>
#include <sstream>

#include "scalpel/pipeline.hpp"
#include "test_support.hpp"

using namespace scalpel;
using namespace scalpel::testing;

namespace {

fs::path scratch(const std::string& name) {
    const fs::path p = fs::temp_directory_path() / ("scalpel_pipeline_test_" + name);
    fs::remove_all(p);
    return p;
}

Json smoke_json() { return Json{{"seed", 3}, {"n", 50}, {"gmm_k", 2}, {"top_k", 2}, {"test_episodes", 50}}; }

// One small pipeline run shared by the artifact tests.
class SmokeRun : public ::testing::Test {
protected:
    static void SetUpTestSuite() {
        dir_ = scratch("smoke");
        RunConfig cfg = RunConfig::from_json(smoke_json());
        cfg.out_dir = dir_.string();
        const auto t0 = std::chrono::steady_clock::now();
        report_ = run_pipeline(cfg).report;
        seconds_ = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    }
    static void TearDownTestSuite() { fs::remove_all(dir_); }

    static inline fs::path dir_;
    static inline Json report_;
    static inline double seconds_ = 0.0;
};

}  // namespace

TEST(RunConfigJson, RoundTripsAndKeepsDefaults) {
    RunConfig c;
    c.seed = 9;
    c.gmm_k = 5;
    c.solver = Solver::sinkhorn;
    c.alpha_base = 2.5;
    c.model.layers = 3;
    const RunConfig back = RunConfig::from_json(c.to_json());
    EXPECT_EQ(dump_json(back.to_json()), dump_json(c.to_json()));
    EXPECT_EQ(back.solver, Solver::sinkhorn);

    const RunConfig partial = RunConfig::from_json(Json{{"seed", 4}});
    EXPECT_EQ(partial.seed, 4u);
    EXPECT_EQ(partial.gmm_k, RunConfig{}.gmm_k);
    EXPECT_EQ(partial.top_k, RunConfig{}.top_k);
    EXPECT_FALSE(c.to_json().contains("out_dir"));
}

TEST(RunConfigJson, RejectsUnknownKeysAndBadValues) {
    auto message = [](const Json& j) {
        try {
            RunConfig::from_json(j);
        } catch (const ValidationError& e) {
            return std::string(e.what());
        }
        return std::string("accepted");
    };
    EXPECT_NE(message(Json{{"gmmk", 3}}).find("unknown config key 'gmmk'"), std::string::npos);
    EXPECT_NE(message(Json{{"gmm_k", 0}}).find("counts must be positive"), std::string::npos);
    EXPECT_NE(message(Json{{"top_k", 1000}}).find("top_k exceeds"), std::string::npos);
    EXPECT_NE(message(Json{{"alpha_base", -1.0}}).find("alpha_base"), std::string::npos);
    EXPECT_NE(message(Json{{"solver", "simplex"}}), "accepted");
    EXPECT_NE(message(Json{{"seed", "one"}}).find("bad config value"), std::string::npos);
    EXPECT_NE(message(Json::array()).find("JSON object"), std::string::npos);
}

TEST(RunConfigJson, LoadReportsMissingFileAsValidation) {
    std::ostringstream out, err;
    EXPECT_EQ(cmd_pipeline(scratch("missing") / "nope.json", std::nullopt, out, err), 1);
    EXPECT_FALSE(err.str().empty());
}

TEST(Metrics, PerfectAndHandComputed) {
    using vocab::kNo;
    using vocab::kYes;
    const auto perfect = score_answers({kYes, kNo, kYes}, {kYes, kNo, kYes});
    EXPECT_DOUBLE_EQ(perfect.accuracy, 1.0);
    EXPECT_DOUBLE_EQ(perfect.f1, 1.0);

    // tp=2, fp=1, fn=1, tn=1.
    const auto m = score_answers({kYes, kYes, kYes, kNo, kNo}, {kYes, kYes, kNo, kYes, kNo});
    EXPECT_EQ(m.count, 5u);
    EXPECT_DOUBLE_EQ(m.accuracy, 3.0 / 5.0);
    EXPECT_DOUBLE_EQ(m.precision, 2.0 / 3.0);
    EXPECT_DOUBLE_EQ(m.recall, 2.0 / 3.0);
    EXPECT_NEAR(m.f1, 2.0 / 3.0, 1e-15);
    EXPECT_DOUBLE_EQ(m.yes_ratio, 3.0 / 5.0);
}

TEST(Projection, LowRankDataIsCapturedByTwoAxes) {
    Rng rng(5);
    const Index n = 400, d = 6;
    const Matrix basis = Matrix::NullaryExpr(2, d, [&] { return rng.normal(); });
    Matrix x(n, d);
    for (Index i = 0; i < n; ++i)
        x.row(i) = (rng.normal() * 3.0) * basis.row(0) + rng.normal() * basis.row(1) +
                   1e-3 * Eigen::RowVectorXd::NullaryExpr(d, [&] { return rng.normal(); });
    const auto p = pca_2d(x);
    EXPECT_GE(p.explained.sum(), 0.999);
    EXPECT_GE(p.explained(0), p.explained(1));
    EXPECT_NEAR((p.axes.transpose() * p.axes - Matrix::Identity(2, 2)).norm(), 0.0, 1e-10);
}

TEST(Projection, IsotropicDataSplitsVarianceEvenly) {
    Rng rng(6);
    const Index n = 20000, d = 5;
    const Matrix x = Matrix::NullaryExpr(n, d, [&] { return rng.normal(); });
    const auto p = pca_2d(x);
    EXPECT_NEAR(p.explained(0), 1.0 / d, 0.02);
    EXPECT_NEAR(p.explained(1), 1.0 / d, 0.02);
}

TEST(Projection, ErrorsAndOneDimensionalInput) {
    try {
        pca_2d(Matrix::Zero(1, 3));
        FAIL() << "single sample accepted";
    } catch (const ValidationError& e) {
        EXPECT_NE(std::string(e.what()).find("need ≥ 2 samples"), std::string::npos);
    }
    const Matrix line = (Matrix(3, 1) << 1.0, 2.0, 4.0).finished();
    const auto p = pca_2d(line);
    EXPECT_DOUBLE_EQ(p.explained(0), 1.0);
    EXPECT_EQ(p.explained(1), 0.0);
    EXPECT_TRUE(p.scores.col(1).isZero());
}

TEST_F(SmokeRun, CompletesQuicklyWithExpectedLayout) {
    EXPECT_LT(seconds_, 60.0);
    for (const char* f : {"config.json", "model.bin", "train_report.json", "report.json", "decisions.jsonl",
                          "artifacts.json", "plans/image.json", "plans/object.json", "plans/combined.json",
                          "probes/accuracy_image.json", "probes/accuracy_object.json", "activations/manifest.json",
                          "data/train.jsonl", "data/test_trusted.jsonl", "data/test_perturbed.jsonl"})
        EXPECT_TRUE(fs::exists(dir_ / f)) << f;
    const Json disk = read_json(dir_ / "report.json");
    EXPECT_EQ(dump_json(disk), dump_json(report_));
    EXPECT_EQ(report_.at("perturbed").at("vanilla").at("count").get<std::size_t>(), 100u);
    EXPECT_EQ(report_.at("selected").at("image").size(), 2u);
}

TEST_F(SmokeRun, ArtifactManifestMatchesFiles) {
    const Json manifest = read_json(dir_ / "artifacts.json");
    EXPECT_EQ(dump_json(manifest.at("files")), dump_json(hash_tree(dir_, "artifacts.json")));
}

TEST_F(SmokeRun, EvaluateCommandReproducesTheReport) {
    std::ostringstream out, err;
    ASSERT_EQ(cmd_evaluate(dir_, "model.bin", "plans/combined.json", "data/test_perturbed.jsonl", std::nullopt, out, err), 0)
        << err.str();
    const Json j = Json::parse(out.str());
    EXPECT_EQ(dump_json(j.at("vanilla")), dump_json(report_.at("perturbed").at("vanilla")));
    EXPECT_EQ(dump_json(j.at("scalpel")), dump_json(report_.at("perturbed").at("scalpel")));

    std::ostringstream out2, err2;
    EXPECT_EQ(cmd_evaluate(dir_, "model.bin", "plans/none.json", "data/test_perturbed.jsonl", std::nullopt, out2, err2), 1);
}

TEST_F(SmokeRun, ZeroTransferPlanLeavesAnswersUnchanged) {
    const ToyModel model = load_model(dir_ / "model.bin");
    InterventionPlan plan = plan_from_json(read_json(dir_ / "plans/combined.json"), dir_);
    for (auto& h : plan.heads)
        for (auto& v : h.transfer) v.setZero();
    const auto ev = evaluate_plan(model, read_episodes(dir_ / "data/test_perturbed.jsonl"), plan);
    EXPECT_EQ(dump_json(ev.vanilla.to_json()), dump_json(ev.scalpel.to_json()));
    EXPECT_FALSE(ev.decisions.empty());
}

TEST_F(SmokeRun, TrainedModelHasASeparatingHead) {
    const auto acc = accuracy_from_json(read_json(dir_ / "probes/accuracy_image.json"));
    EXPECT_GE(acc.acc.maxCoeff(), 0.9);
}

TEST_F(SmokeRun, ProjectionCsvFromPipelineTensors) {
    const fs::path csv = scratch("proj") / "proj.csv";
    fs::create_directories(csv.parent_path());
    const Vector ex = project_to_csv({{dir_ / "activations/trusted.bin", "trusted"},
                                      {dir_ / "activations/halluc_image.bin", "halluc_image"}},
                                     0, 0, csv, std::nullopt, 3, 1);
    EXPECT_LE(ex.sum(), 1.0 + 1e-12);
    std::ifstream is(csv);
    std::string header, line;
    std::getline(is, header);
    EXPECT_EQ(header, "pc1,pc2,manifold_label,component_id");
    std::size_t rows = 0, trusted = 0;
    while (std::getline(is, line)) {
        ++rows;
        trusted += line.find(",trusted,") != std::string::npos;
    }
    EXPECT_EQ(rows, 100u);
    EXPECT_EQ(trusted, 50u);
    EXPECT_THROW(project_to_csv({{dir_ / "activations/trusted.bin", "trusted"}}, 99, 0, csv, std::nullopt, 3, 1),
                 ValidationError);
    fs::remove_all(csv.parent_path());
}

TEST(Pipeline, RerunsAreByteIdentical) {
    std::vector<Json> trees;
    for (const char* name : {"rerun_a", "rerun_b"}) {
        RunConfig cfg = RunConfig::from_json(smoke_json());
        cfg.out_dir = scratch(name).string();
        run_pipeline(cfg);
        trees.push_back(hash_tree(cfg.out_dir, ""));
        fs::remove_all(cfg.out_dir);
    }
    EXPECT_EQ(dump_json(trees[0]), dump_json(trees[1]));
}

TEST(Pipeline, TooFewSamplesFailsInFitStage) {
    const fs::path dir = scratch("too_few");
    fs::create_directories(dir);
    Json j = smoke_json();
    j["n"] = 25;
    j["gmm_k"] = 40;
    RunConfig cfg = RunConfig::from_json(j);
    cfg.out_dir = (dir / "out").string();
    try {
        run_pipeline(cfg);
        FAIL() << "pipeline accepted gmm_k > n";
    } catch (const StageError& e) {
        EXPECT_EQ(e.stage(), "fit");
        EXPECT_NE(std::string(e.what()).find("insufficient samples"), std::string::npos) << e.what();
    }
    write_json(dir / "config.json", j);
    std::ostringstream out, err;
    EXPECT_EQ(cmd_pipeline(dir / "config.json", (dir / "out2").string(), out, err), 2);
    EXPECT_NE(err.str().find("stage 'fit'"), std::string::npos);
    fs::remove_all(dir);
}
