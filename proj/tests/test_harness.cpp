#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>

#include "dbf/experiment.hpp"
#include "test_util.hpp"

using namespace dbf;
using test::max_abs_diff;

namespace {

json lgssm_env_json() {
    return {{"env", "lgssm"},
            {"a", {{0.9}}},
            {"q", {{0.09}}},
            {"h", {{1.0}}},
            {"r", {{0.25}}},
            {"init_mean", {{0.0}}},
            {"init_cov", {{1.0}}}};
}

std::string cli_path() {
    const char* p = std::getenv("DBF_CLI");
    return p ? p : "../tools/dbf";
}

} // namespace

TEST_CASE("run_experiment: kf on a 1-dim LGSSM is bit-identically reproducible") {
    json cfg_j = {{"env", lgssm_env_json()}, {"filter", "kf"},      {"test_count", 10},
                  {"test_steps", 30},        {"seed", 42},          {"final_k", 10}};
    MetricReport r1 = run_experiment(ExperimentConfig::from_json(cfg_j));
    MetricReport r2 = run_experiment(ExperimentConfig::from_json(cfg_j));
    CHECK(r1.metrics.at("rmse").mean == r2.metrics.at("rmse").mean);
    CHECK(r1.metrics.at("rmse").per_trajectory == r2.metrics.at("rmse").per_trajectory);
    // the KF tracks a well-observed system to well under the noise floor
    CHECK(r1.metrics.at("rmse").mean < 0.5);
    CHECK(r1.metrics.at("rmse").mean > 0.0);
}

TEST_CASE("MetricValue: aggregate equals recomputation from per-trajectory values") {
    MetricValue mv = MetricValue::aggregate({1.0, 2.0, 3.0, 4.0});
    CHECK(mv.mean == doctest::Approx(2.5));
    double acc = 0.0;
    for (double v : mv.per_trajectory) acc += (v - 2.5) * (v - 2.5);
    CHECK(mv.stddev == doctest::Approx(std::sqrt(acc / 3.0)));
}

TEST_CASE("run_experiment: ensemble filters run on the pendulum at small scale") {
    json cfg_j = {{"env", {{"env", "double_pendulum"}, {"sigma", 0.1}}},
                  {"filter", "enkf"},
                  {"filter_params", {{"n_ens", 50}}},
                  {"test_count", 2},
                  {"test_steps", 12},
                  {"seed", 7},
                  {"final_k", 5}};
    MetricReport rep = run_experiment(ExperimentConfig::from_json(cfg_j));
    CHECK(rep.metrics.count("rmse_theta") == 1);
    CHECK(rep.metrics.count("rmse_omega") == 1);
    CHECK(rep.metrics.at("rmse_theta").mean < M_PI);  // wrapped angles bound the error
    CHECK(rep.metrics.at("rmse_theta").per_trajectory.size() == 2);

    cfg_j["filter"] = "etkf";
    MetricReport rep2 = run_experiment(ExperimentConfig::from_json(cfg_j));
    CHECK(rep2.metrics.at("rmse_theta").mean < M_PI);

    cfg_j["filter"] = "pf";
    cfg_j["filter_params"] = {{"n_particles", 200}, {"process_noise_std", 0.01}};
    MetricReport rep3 = run_experiment(ExperimentConfig::from_json(cfg_j));
    CHECK(rep3.metrics.at("rmse_theta").mean < M_PI);
}

TEST_CASE("run_experiment: dbf end to end on a toy system emits artifacts") {
    const std::string out = "/tmp/dbf_test_exp";
    std::filesystem::remove_all(out);
    json cfg_j = {{"env", lgssm_env_json()},
                  {"filter", "dbf"},
                  {"training",
                   {{"d_h", 2},
                    {"hidden", 8},
                    {"blocks", 2},
                    {"steps", 25},
                    {"batch", 8},
                    {"train_count", 16},
                    {"train_steps", 10},
                    {"lr", 1e-3}}},
                  {"test_count", 3},
                  {"test_steps", 10},
                  {"seed", 5},
                  {"final_k", 5},
                  {"out", out}};
    MetricReport rep = run_experiment(ExperimentConfig::from_json(cfg_j));
    CHECK(rep.metrics.count("rmse") == 1);
    CHECK(rep.extra.contains("max_abs_eig"));
    CHECK(std::filesystem::exists(out + "/report.json"));
    CHECK(std::filesystem::exists(out + "/report.csv"));
    CHECK(std::filesystem::exists(out + "/spectrum.csv"));
    CHECK(std::filesystem::exists(out + "/beliefs/manifest.json"));
    CHECK(std::filesystem::exists(out + "/model/loss_curve.csv"));
    CHECK(std::filesystem::exists(out + "/model/manifest.json"));

    // report.json round-trips
    std::ifstream jf(out + "/report.json");
    MetricReport back = MetricReport::from_json(json::parse(jf));
    CHECK(back.metrics.at("rmse").mean == rep.metrics.at("rmse").mean);

    // checkpoint reload matches
    DBFModel model = load_model(out + "/model");
    CHECK(model.d_h() == 2);
}

TEST_CASE("save/load filter results round-trips bit exactly (block and dense)") {
    Rng rng(9);
    for (bool block : {true, false}) {
        std::vector<FilterResult> runs(2);
        for (auto& run : runs) {
            for (int t = 0; t < 3; ++t) {
                VectorXd mu = test::random_vector(4, rng);
                if (block) {
                    std::vector<Matrix2d> blocks{test::random_spd(2, rng),
                                                 test::random_spd(2, rng)};
                    run.filtered.push_back(GaussianBelief::blocks(mu, blocks));
                    run.predicted.push_back(
                        GaussianBelief::blocks(2.0 * mu, {blocks[1], blocks[0]}));
                } else {
                    run.filtered.push_back(
                        GaussianBelief::dense(mu, test::random_spd(4, rng)));
                    run.predicted.push_back(
                        GaussianBelief::dense(2.0 * mu, test::random_spd(4, rng)));
                }
            }
        }
        const std::string dir = std::string("/tmp/dbf_test_beliefs_") +
                                (block ? "block" : "dense");
        std::filesystem::remove_all(dir);
        save_filter_results(runs, dir);
        std::vector<FilterResult> back = load_filter_results(dir);
        REQUIRE(back.size() == 2);
        for (int i = 0; i < 2; ++i)
            for (int t = 0; t < 3; ++t) {
                CHECK(max_abs_diff(back[i].filtered[t].mean(), runs[i].filtered[t].mean()) ==
                      0.0);
                CHECK(max_abs_diff(back[i].filtered[t].dense_cov(),
                                   runs[i].filtered[t].dense_cov()) == 0.0);
                CHECK(max_abs_diff(back[i].predicted[t].dense_cov(),
                                   runs[i].predicted[t].dense_cov()) == 0.0);
                CHECK(back[i].filtered[t].is_block() == block);
            }
    }
}

TEST_CASE("config_hash: stable under repetition, sensitive to content") {
    json a = {{"x", 1}, {"y", "z"}};
    CHECK(config_hash(a) == config_hash(a));
    json b = a;
    b["x"] = 2;
    CHECK(config_hash(a) != config_hash(b));
}

TEST_CASE("sweep: a single-cell grid reproduces run_experiment") {
    json base = {{"env", lgssm_env_json()}, {"filter", "kf"}, {"test_count", 4},
                 {"test_steps", 20},        {"seed", 19},     {"final_k", 10}};
    MetricReport direct = run_experiment(ExperimentConfig::from_json(base));

    json sweep_cfg = {{"base", base},
                      {"grid", {{{"path", "seed"}, {"values", {19}}}}}};
    json result = sweep(sweep_cfg);
    REQUIRE(result.at("rows").size() == 1);
    CHECK(result["rows"][0]["metrics"]["rmse"]["mean"].get<double>() ==
          direct.metrics.at("rmse").mean);
}

TEST_CASE("sweep: two cells, positive runtimes, failures recorded without aborting") {
    json base = {{"env", lgssm_env_json()}, {"filter", "kf"}, {"test_count", 3},
                 {"test_steps", 15},        {"seed", 3},      {"final_k", 5}};
    const std::string out = "/tmp/dbf_test_sweep";
    std::filesystem::remove_all(out);
    json sweep_cfg = {{"base", base},
                      {"grid", {{{"path", "seed"}, {"values", {3, 4}}}}},
                      {"out", out}};
    json result = sweep(sweep_cfg);
    REQUIRE(result.at("rows").size() == 2);
    for (const auto& row : result["rows"]) {
        CHECK(row["timings"]["filter_s"].get<double>() > 0.0);
        CHECK(!row.contains("error"));
    }
    CHECK(std::filesystem::exists(out + "/sweep.csv"));

    // a broken cell is recorded, the rest still run
    json bad = sweep_cfg;
    bad["grid"] = {{{"path", "filter"}, {"values", {"kf", "bogus"}}}};
    json res2 = sweep(bad);
    REQUIRE(res2.at("rows").size() == 2);
    CHECK(!res2["rows"][0].contains("error"));
    CHECK(res2["rows"][1].contains("error"));
}

TEST_CASE("compare: combined table over two filters on one test set") {
    json cc = {{"env", {{"env", "double_pendulum"}, {"sigma", 0.1}}},
               {"test_count", 2},
               {"test_steps", 10},
               {"seed", 77},
               {"filters",
                {{{"name", "enkf_small"}, {"kind", "enkf"}, {"params", {{"n_ens", 30}}}},
                 {{"name", "pf_small"},
                  {"kind", "pf"},
                  {"params", {{"n_particles", 100}, {"process_noise_std", 0.01}}}}}},
               {"out", "/tmp/dbf_test_compare"}};
    std::filesystem::remove_all("/tmp/dbf_test_compare");
    json result = compare(cc);
    REQUIRE(result.at("rows").size() == 2);
    CHECK(std::filesystem::exists("/tmp/dbf_test_compare/compare.csv"));
    std::ifstream cf("/tmp/dbf_test_compare/compare.csv");
    std::string header;
    std::getline(cf, header);
    CHECK(header == "filter,sigma,metric,mean,std");
}

TEST_CASE("cli: exit codes and the generate subcommand") {
    const std::string cli = cli_path();
    if (!std::filesystem::exists(cli)) {
        MESSAGE("CLI binary not found at ", cli, "; skipping");
        return;
    }
    std::filesystem::remove_all("/tmp/dbf_test_cli");
    std::filesystem::create_directories("/tmp/dbf_test_cli");

    // config error: missing file
    int rc = std::system((cli + " eval --config /tmp/dbf_test_cli/nope.json"
                          " > /dev/null 2>&1").c_str());
    CHECK(WEXITSTATUS(rc) == 2);

    // config error: unknown environment
    {
        std::ofstream f("/tmp/dbf_test_cli/bad.json");
        f << R"({"env": {"env": "mystery"}, "filter": "kf"})";
    }
    rc = std::system((cli + " eval --config /tmp/dbf_test_cli/bad.json"
                      " > /dev/null 2>&1").c_str());
    CHECK(WEXITSTATUS(rc) == 2);

    // generate writes a loadable batch
    {
        std::ofstream f("/tmp/dbf_test_cli/gen.json");
        json g = {{"env", {{"env", "lorenz96"}, {"n_grid", 5}, {"sigma", 1.0},
                           {"burn_in_steps", 5}}},
                  {"T", 6},
                  {"count", 3},
                  {"seed", 11},
                  {"out", "/tmp/dbf_test_cli/batch"}};
        f << g.dump();
    }
    rc = std::system((cli + " generate --config /tmp/dbf_test_cli/gen.json"
                      " > /dev/null 2>&1").c_str());
    CHECK(WEXITSTATUS(rc) == 0);
    TrajectoryBatch batch = load_batch("/tmp/dbf_test_cli/batch");
    CHECK(batch.count == 3);
    CHECK(batch.steps == 6);

    // eval end to end
    {
        std::ofstream f("/tmp/dbf_test_cli/eval.json");
        json e = {{"env", lgssm_env_json()}, {"filter", "kf"}, {"test_count", 3},
                  {"test_steps", 10},        {"seed", 1},      {"final_k", 5},
                  {"out", "/tmp/dbf_test_cli/eval_out"}};
        f << e.dump();
    }
    rc = std::system((cli + " eval --config /tmp/dbf_test_cli/eval.json"
                      " > /dev/null 2>&1").c_str());
    CHECK(WEXITSTATUS(rc) == 0);
    CHECK(std::filesystem::exists("/tmp/dbf_test_cli/eval_out/report.csv"));
}
