// Command-line entry point for the data assimilation workbench.
//
// Subcommands:
//   generate  write a trajectory batch for an environment config
//   train     train a DBF model on generated or stored data
//   filter    run a filter over a test set and store beliefs/predictions
//   eval      run a full experiment (generate -> train -> filter -> metrics)
//   compare   several filters on one shared test set
//   sweep     grid of experiments with runtime columns
//
// Exit codes: 0 success, 2 config error, 3 numerical failure, 4 divergence.

#include <fstream>
#include <iostream>

#include <CLI11.hpp>

#include "dbf/dbf_train.hpp"
#include "dbf/experiment.hpp"

namespace {

dbf::json load_config(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw dbf::ConfigError("cannot open config file " + path);
    return dbf::json::parse(f);
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"data assimilation workbench"};
    app.require_subcommand(1);
    app.fallthrough();

    std::string config_path;
    std::string out_dir;
    uint64_t seed = 0;
    bool seed_set = false;
    int threads = 1;
    app.add_option("--config", config_path, "JSON config file")->required();
    app.add_option("--out", out_dir, "output directory");
    app.add_option("--seed", seed, "seed override")->each([&](const std::string&) {
        seed_set = true;
    });
    app.add_option("--threads", threads, "worker threads");

    auto* cmd_generate = app.add_subcommand("generate", "generate a trajectory batch");
    auto* cmd_train = app.add_subcommand("train", "train a model");
    auto* cmd_filter = app.add_subcommand("filter", "filter a test set");
    auto* cmd_eval = app.add_subcommand("eval", "run one experiment end to end");
    auto* cmd_compare = app.add_subcommand("compare", "compare filters on one test set");
    auto* cmd_sweep = app.add_subcommand("sweep", "run a config grid");

    CLI11_PARSE(app, argc, argv);

    try {
        dbf::json cfg = load_config(config_path);
        if (seed_set) cfg["seed"] = seed;
        if (!out_dir.empty()) cfg["out"] = out_dir;
        if (threads > 1) cfg["threads"] = threads;

        if (cmd_generate->parsed()) {
            auto env = dbf::make_environment(cfg.at("env"));
            const int steps = cfg.value("T", 80);
            const int count = cfg.value("count", 10);
            dbf::TrajectoryBatch batch = dbf::generate(*env, steps, count,
                                                       cfg.value("seed", 0ull),
                                                       cfg.value("threads", 1));
            const std::string dir = cfg.value("out", "batch_out");
            dbf::save_batch(batch, dir);
            std::cout << "wrote " << count << " trajectories x " << steps << " steps to "
                      << dir << "\n";
        } else if (cmd_train->parsed()) {
            dbf::ExperimentConfig ecfg = dbf::ExperimentConfig::from_json(cfg);
            auto env = dbf::make_environment(ecfg.env);
            dbf::DBFModel model = dbf::build_dbf_model(ecfg.training, *env,
                                                       ecfg.training.value("train_seed",
                                                                           ecfg.seed));
            const int train_count = ecfg.training.value("train_count", 1000);
            const int train_steps = ecfg.training.value("train_steps", ecfg.test_steps);
            dbf::TrajectoryBatch data =
                dbf::generate(*env, train_steps, train_count, ecfg.seed, ecfg.threads);
            dbf::train::TrainOpts topts;
            topts.lr = ecfg.training.value("lr", 1e-3);
            topts.batch = ecfg.training.value("batch", 64);
            topts.steps = ecfg.training.value("steps", 500);
            topts.seed = ecfg.training.value("train_seed", ecfg.seed);
            topts.k_samples = ecfg.training.value("k_samples", 1);
            topts.threads = ecfg.threads;
            topts.checkpoint_dir = ecfg.out_dir.empty() ? "model_out" : ecfg.out_dir;
            dbf::train::TrainResult res = dbf::train::train_joint(model, data, topts);
            std::cout << "trained " << res.steps_completed << " steps, final loss "
                      << (res.loss_curve.empty() ? 0.0 : res.loss_curve.back()) << "\n";
            if (res.diverged) {
                std::cerr << "training diverged; checkpoint holds the last good state\n";
                return 4;
            }
        } else if (cmd_filter->parsed() || cmd_eval->parsed()) {
            dbf::ExperimentConfig ecfg = dbf::ExperimentConfig::from_json(cfg);
            dbf::MetricReport rep = dbf::run_experiment(ecfg);
            std::cout << rep.to_json().dump(2) << "\n";
        } else if (cmd_compare->parsed()) {
            dbf::json result = dbf::compare(cfg);
            std::cout << result.dump(2) << "\n";
        } else if (cmd_sweep->parsed()) {
            dbf::json result = dbf::sweep(cfg);
            std::cout << result.dump(2) << "\n";
        }
        return 0;
    } catch (const dbf::ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const dbf::DivergenceError& e) {
        std::cerr << "divergence: " << e.what() << "\n";
        return 4;
    } catch (const dbf::NumericalError& e) {
        std::cerr << "numerical failure: " << e.what() << "\n";
        return 3;
    } catch (const nlohmann::json::exception& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}
