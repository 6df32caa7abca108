#include "dbf/experiment.hpp"

#include <chrono>
#include <filesystem>
#include <fstream>
#include <numeric>

namespace dbf {

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
    return std::chrono::duration<double>(Clock::now() - t0).count();
}

MatrixXd circular_aware_mean(const MatrixXd& members, const std::vector<int>& angle_dims) {
    MatrixXd mean = members.colwise().mean();
    for (int d : angle_dims) {
        double s = 0.0, c = 0.0;
        for (Eigen::Index i = 0; i < members.rows(); ++i) {
            s += std::sin(members(i, d));
            c += std::cos(members(i, d));
        }
        mean(0, d) = std::atan2(s, c);
    }
    return mean;
}

void write_f64_rows(std::ofstream& f, const MatrixXd& m) {
    for (Eigen::Index i = 0; i < m.rows(); ++i)
        for (Eigen::Index j = 0; j < m.cols(); ++j) {
            const double v = m(i, j);
            f.write(reinterpret_cast<const char*>(&v), sizeof(double));
        }
}

} // namespace

// ---------------------------------------------------------------------------
// Report plumbing
// ---------------------------------------------------------------------------

MetricValue MetricValue::aggregate(std::vector<double> values) {
    MetricValue mv;
    mv.per_trajectory = std::move(values);
    const double n = static_cast<double>(mv.per_trajectory.size());
    if (n == 0) return mv;
    mv.mean = std::accumulate(mv.per_trajectory.begin(), mv.per_trajectory.end(), 0.0) / n;
    double acc = 0.0;
    for (double v : mv.per_trajectory) acc += (v - mv.mean) * (v - mv.mean);
    mv.stddev = n > 1 ? std::sqrt(acc / (n - 1.0)) : 0.0;
    return mv;
}

json MetricReport::to_json() const {
    json j;
    for (const auto& [name, mv] : metrics)
        j["metrics"][name] = {{"per_trajectory", mv.per_trajectory},
                              {"mean", mv.mean},
                              {"std", mv.stddev}};
    j["extra"] = extra;
    return j;
}

MetricReport MetricReport::from_json(const json& j) {
    MetricReport rep;
    for (auto it = j.at("metrics").begin(); it != j.at("metrics").end(); ++it) {
        MetricValue mv;
        mv.per_trajectory = it.value().at("per_trajectory").get<std::vector<double>>();
        mv.mean = it.value().at("mean");
        mv.stddev = it.value().at("std");
        rep.metrics[it.key()] = std::move(mv);
    }
    rep.extra = j.value("extra", json::object());
    return rep;
}

ExperimentConfig ExperimentConfig::from_json(const json& j) {
    ExperimentConfig cfg;
    cfg.env = j.at("env");
    cfg.filter_kind = j.at("filter");
    cfg.filter_params = j.value("filter_params", json::object());
    cfg.training = j.value("training", json::object());
    cfg.test_count = j.value("test_count", 10);
    cfg.test_steps = j.value("test_steps", 80);
    cfg.seed = j.value("seed", 0ull);
    cfg.threads = j.value("threads", 1);
    cfg.final_k = j.value("final_k", 10);
    cfg.out_dir = j.value("out", "");
    return cfg;
}

json ExperimentConfig::to_json() const {
    return {{"schema_version", 1},
            {"env", env},
            {"filter", filter_kind},
            {"filter_params", filter_params},
            {"training", training},
            {"test_count", test_count},
            {"test_steps", test_steps},
            {"seed", seed},
            {"threads", threads},
            {"final_k", final_k},
            {"out", out_dir}};
}

uint64_t config_hash(const json& j) {
    const std::string s = j.dump();
    uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

// ---------------------------------------------------------------------------
// Baseline runners
// ---------------------------------------------------------------------------

namespace {

MatrixXd run_kf_lgssm(const ExperimentConfig& cfg, const TrajectoryBatch& test, int traj) {
    const MatrixXd a = [&] {
        std::vector<std::vector<double>> rows = cfg.env.at("a");
        MatrixXd m(rows.size(), rows[0].size());
        for (size_t i = 0; i < rows.size(); ++i)
            for (size_t j = 0; j < rows[i].size(); ++j) m(i, j) = rows[i][j];
        return m;
    }();
    auto load = [&](const char* key) {
        std::vector<std::vector<double>> rows = cfg.env.at(key);
        MatrixXd m(rows.size(), rows[0].size());
        for (size_t i = 0; i < rows.size(); ++i)
            for (size_t j = 0; j < rows[i].size(); ++j) m(i, j) = rows[i][j];
        return m;
    };
    const MatrixXd q = load("q"), h = load("h"), r = load("r");
    const VectorXd init_mean = load("init_mean").row(0).transpose();
    const MatrixXd init_cov = load("init_cov");

    LinearGaussianMap dyn(a, q), obs(h, r);
    GaussianBelief belief = GaussianBelief::dense(init_mean, init_cov);
    MatrixXd out(test.steps, a.rows());
    for (int t = 0; t < test.steps; ++t) {
        if (t > 0) belief = gauss_pushforward(belief, dyn);
        belief = kf_update(belief, obs, test.observation(traj, t).transpose());
        out.row(t) = belief.mean().transpose();
    }
    return out;
}

struct EnsembleRunOutput {
    MatrixXd means;                        // T x d
    std::vector<MatrixXd> members_per_step;  // for calibration metrics
};

EnsembleRunOutput run_ensemble(const ExperimentConfig& cfg, const Environment& env,
                               const TrajectoryBatch& test, int traj, bool transform,
                               bool keep_members) {
    const int n_ens = cfg.filter_params.value("n_ens", 1000);
    const double inflation = cfg.filter_params.value("inflation", 1.0);
    const double jitter = cfg.filter_params.value("process_noise_std", 0.0);
    const double sigma = env.obs_sigma();
    const MatrixXd r = sigma * sigma * MatrixXd::Identity(env.obs_dim(), env.obs_dim());

    const VectorXd first_obs = test.observation(traj, 0).transpose();
    MatrixXd members(n_ens, env.state_dim());
    for (int i = 0; i < n_ens; ++i) {
        Rng rng = Rng::derive(cfg.seed, {0xe5fu, static_cast<uint64_t>(traj),
                                         static_cast<uint64_t>(i)});
        members.row(i) = env.filter_initial_state(first_obs, rng).transpose();
    }
    Ensemble ens(std::move(members));

    Simulator identity = [](const VectorXd& z, Rng&) { return z; };
    Simulator dyn = [&](const VectorXd& z, Rng& rng) {
        VectorXd out = env.step_unwrapped(z, rng);
        if (jitter > 0.0)
            for (Eigen::Index k = 0; k < out.size(); ++k) out[k] += jitter * rng.normal();
        return out;
    };
    ObsOperator h = [&](const VectorXd& z) { return env.observe_mean(z); };

    EnsembleRunOutput out;
    out.means.resize(test.steps, env.state_dim());
    Rng step_rng = Rng::derive(cfg.seed, {0xf117e2u, static_cast<uint64_t>(traj)});
    for (int t = 0; t < test.steps; ++t) {
        const VectorXd o = test.observation(traj, t).transpose();
        const Simulator& mover = (t == 0) ? identity : dyn;
        ens = transform ? etkf_step(ens, mover, h, r, o, step_rng, inflation)
                        : enkf_step(ens, mover, h, r, o, step_rng, inflation);
        out.means.row(t) = circular_aware_mean(ens.members, env.angle_dims());
        if (keep_members) out.members_per_step.push_back(ens.members);
    }
    return out;
}

EnsembleRunOutput run_pf(const ExperimentConfig& cfg, const Environment& env,
                         const TrajectoryBatch& test, int traj, bool keep_members) {
    const int n_p = cfg.filter_params.value("n_particles", 10000);
    const double jitter = cfg.filter_params.value("process_noise_std", 0.0);
    const double threshold = cfg.filter_params.value("resample_threshold", 0.5);
    const double sigma = env.obs_sigma();
    const double inv_two_var = 0.5 / (sigma * sigma);

    const VectorXd first_obs = test.observation(traj, 0).transpose();
    MatrixXd particles(n_p, env.state_dim());
    for (int i = 0; i < n_p; ++i) {
        Rng rng = Rng::derive(cfg.seed, {0x9f0u, static_cast<uint64_t>(traj),
                                         static_cast<uint64_t>(i)});
        particles.row(i) = env.filter_initial_state(first_obs, rng).transpose();
    }
    ParticleSet ps = ParticleSet::uniform(std::move(particles));

    Simulator identity = [](const VectorXd& z, Rng&) { return z; };
    Simulator dyn = [&](const VectorXd& z, Rng& rng) {
        VectorXd out = env.step_unwrapped(z, rng);
        if (jitter > 0.0)
            for (Eigen::Index k = 0; k < out.size(); ++k) out[k] += jitter * rng.normal();
        return out;
    };
    LogLikelihood loglik = [&](const VectorXd& o, const VectorXd& z) {
        return -inv_two_var * (o - env.observe_mean(z)).squaredNorm();
    };

    EnsembleRunOutput out;
    out.means.resize(test.steps, env.state_dim());
    Rng step_rng = Rng::derive(cfg.seed, {0xf117e3u, static_cast<uint64_t>(traj)});
    for (int t = 0; t < test.steps; ++t) {
        const VectorXd o = test.observation(traj, t).transpose();
        ps = pf_step(ps, (t == 0) ? identity : dyn, loglik, o, step_rng, threshold);
        const VectorXd w = ps.normalized_weights();
        MatrixXd weighted = ps.particles.array().colwise() * w.array();
        MatrixXd mean = weighted.colwise().sum();
        for (int d : env.angle_dims()) {
            double s = 0.0, c = 0.0;
            for (int i = 0; i < ps.size(); ++i) {
                s += w[i] * std::sin(ps.particles(i, d));
                c += w[i] * std::cos(ps.particles(i, d));
            }
            mean(0, d) = std::atan2(s, c);
        }
        out.means.row(t) = mean;
        if (keep_members) out.members_per_step.push_back(ps.particles);
    }
    return out;
}

} // namespace

// ---------------------------------------------------------------------------
// DBF model construction + filter dispatch
// ---------------------------------------------------------------------------

namespace {

double default_q_logvar(const std::string& env_name) {
    if (env_name == "double_pendulum") return -6.0;
    if (env_name == "lorenz96") return -8.0;
    if (env_name == "bounce_patch") return -4.0;
    return -6.0;
}

} // namespace

DBFModel build_dbf_model(const json& training, const Environment& env, uint64_t seed);

DBFModel build_dbf_model(const json& training, const Environment& env, uint64_t seed) {
    const int d_h = training.value("d_h", 20);
    if (d_h % 2 != 0) throw ConfigError("dbf: d_h must be even");
    const int hidden = training.value("hidden", 100);
    const int blocks = training.value("blocks", 10);
    const std::string arch = training.value("arch", "linear_block");
    Rng rng = Rng::derive(seed, {0x111417u});

    DBFModel model;
    model.dynamics = BlockDynamics::random_init(d_h, rng);
    if (training.contains("omega_init_max")) {
        const double cap = training.at("omega_init_max");
        for (int i = 0; i < model.dynamics.n_blocks(); ++i)
            model.dynamics.omega[i] = rng.uniform(0.0, cap);
    }
    model.q = DiagonalNoise::constant(
        d_h, training.value("q_logvar", default_q_logvar(env.name())));
    if (arch == "linear_block") {
        model.f_net = std::make_unique<nn::LinearBlockNet>(env.obs_dim(), hidden, d_h, blocks,
                                                           rng);
        model.g_net = std::make_unique<nn::LinearBlockNet>(env.obs_dim(), hidden, d_h, blocks,
                                                           rng);
    } else if (arch == "circular_conv") {
        const int channels = training.value("channels", 20);
        model.f_net =
            std::make_unique<nn::CircularConvNet>(env.obs_dim(), channels, d_h, blocks, rng);
        model.g_net =
            std::make_unique<nn::CircularConvNet>(env.obs_dim(), channels, d_h, blocks, rng);
    } else {
        throw ConfigError("dbf: unknown IOO architecture \"" + arch + "\"");
    }
    model.emission.net = std::make_unique<nn::LinearBlockNet>(
        d_h, hidden, env.state_dim(), training.value("emission_blocks", blocks), rng);
    const auto angles = env.angle_dims();
    MatrixXd log_scale(1, env.state_dim());
    for (int j = 0; j < env.state_dim(); ++j) {
        const bool is_angle =
            std::find(angles.begin(), angles.end(), j) != angles.end();
        model.emission.family.push_back(is_angle ? EmissionFamily::VonMises
                                                 : EmissionFamily::Gaussian);
        // R_init = 1 for Gaussian dims, concentration e^5 for circular dims
        log_scale(0, j) = is_angle ? 5.0 : 0.0;
    }
    model.emission.log_scale = {"log_scale", log_scale};
    model.vprior = VirtualPrior::standard(d_h);
    return model;
}

FilterRun run_filter(const ExperimentConfig& cfg, const Environment& env,
                     const TrajectoryBatch& test, const DBFModel* model) {
    FilterRun run;
    run.predictions.resize(test.count);
    const bool keep_members = cfg.filter_params.value("keep_samples", false);
    std::vector<std::vector<MatrixXd>> members(test.count);
    if (cfg.filter_kind == "dbf") run.beliefs.resize(test.count);

    const auto t0 = Clock::now();
    parallel_for(test.count, cfg.threads, [&](int i) {
        if (cfg.filter_kind == "kf") {
            run.predictions[i] = run_kf_lgssm(cfg, test, i);
        } else if (cfg.filter_kind == "enkf" || cfg.filter_kind == "etkf") {
            auto out = run_ensemble(cfg, env, test, i, cfg.filter_kind == "etkf", keep_members);
            run.predictions[i] = std::move(out.means);
            members[i] = std::move(out.members_per_step);
        } else if (cfg.filter_kind == "pf") {
            auto out = run_pf(cfg, env, test, i, keep_members);
            run.predictions[i] = std::move(out.means);
            members[i] = std::move(out.members_per_step);
        } else if (cfg.filter_kind == "dbf") {
            if (!model) throw ConfigError("dbf filter requires a model");
            MatrixXd obs(test.steps, env.obs_dim());
            for (int t = 0; t < test.steps; ++t) obs.row(t) = test.observation(i, t);
            FilterResult fr = dbf_filter(*model, obs);
            run.predictions[i] = emission_means(*model, fr);
            run.beliefs[i] = std::move(fr);
        } else {
            throw ConfigError("unknown filter \"" + cfg.filter_kind + "\"");
        }
    });
    run.wall_seconds = seconds_since(t0);
    run.members = std::move(members);
    return run;
}

// ---------------------------------------------------------------------------
// Metrics per environment
// ---------------------------------------------------------------------------

namespace {

void add_metric(MetricReport& rep, const std::string& name, std::vector<double> values) {
    rep.metrics[name] = MetricValue::aggregate(std::move(values));
}

MatrixXd truth_matrix(const TrajectoryBatch& test, int traj) {
    MatrixXd m(test.steps, test.states.cols());
    for (int t = 0; t < test.steps; ++t) m.row(t) = test.state(traj, t);
    return m;
}

} // namespace

MetricReport score_run(const ExperimentConfig& cfg, const Environment& env,
                       const TrajectoryBatch& test, const FilterRun& run,
                       const DBFModel* model);

MetricReport score_run(const ExperimentConfig& cfg, const Environment& env,
                       const TrajectoryBatch& test, const FilterRun& run,
                       const DBFModel* model) {
    MetricReport rep;
    const int k = cfg.final_k;
    const std::string name = env.name();
    const auto angles = env.angle_dims();

    auto rmse_over = [&](const std::vector<int>& dims) {
        std::vector<double> vals(test.count);
        for (int i = 0; i < test.count; ++i)
            vals[i] = rmse_final_k(run.predictions[i], truth_matrix(test, i), k, dims, angles);
        return vals;
    };

    if (name == "double_pendulum") {
        add_metric(rep, "rmse_theta", rmse_over({0, 1}));
        add_metric(rep, "rmse_omega", rmse_over({2, 3}));
    } else if (name == "bounce_patch") {
        const int d = env.state_dim();
        std::vector<int> pos(d / 2), vel(d / 2);
        std::iota(pos.begin(), pos.end(), 0);
        std::iota(vel.begin(), vel.end(), d / 2);
        auto rp = rmse_over(pos), rv = rmse_over(vel);
        std::vector<double> success(test.count);
        for (int i = 0; i < test.count; ++i)
            success[i] = (rp[i] < 1.0 && rv[i] < 1.0) ? 1.0 : 0.0;
        add_metric(rep, "rmse_pos", std::move(rp));
        add_metric(rep, "rmse_vel", std::move(rv));
        add_metric(rep, "success", std::move(success));
    } else {
        std::vector<int> all(env.state_dim());
        std::iota(all.begin(), all.end(), 0);
        add_metric(rep, "rmse", rmse_over(all));
    }

    // calibration of the omega dims for the pendulum, when samples exist
    if (name == "double_pendulum" && cfg.filter_params.value("calibration", false)) {
        const int n_samples = cfg.filter_params.value("n_samples", 200);
        std::vector<double> pooled;
        for (int i = 0; i < test.count; ++i) {
            std::vector<MatrixXd> samples;
            if (cfg.filter_kind == "dbf" && model) {
                Rng rng = Rng::derive(cfg.seed, {0xca11bu, static_cast<uint64_t>(i)});
                for (int t = 0; t < test.steps; ++t)
                    samples.push_back(
                        emission_sample(*model, run.beliefs[i].filtered[t], n_samples, rng));
            } else if (!run.members.empty() && !run.members[i].empty()) {
                samples = run.members[i];
            } else {
                continue;
            }
            auto rep_i = normalized_errors(samples, truth_matrix(test, i), {2, 3});
            pooled.insert(pooled.end(), rep_i.values.begin(), rep_i.values.end());
        }
        if (!pooled.empty()) {
            rep.extra["normalized_error_count"] = pooled.size();
            rep.extra["jeffreys_omega"] = jeffreys_vs_unit_gaussian(pooled, 50);
        }
    }
    return rep;
}

// ---------------------------------------------------------------------------
// run_experiment / sweep / compare
// ---------------------------------------------------------------------------

MetricReport run_experiment(const ExperimentConfig& cfg) {
    auto env = make_environment(cfg.env);
    const uint64_t test_seed = cfg.seed ^ 0x7e575eedull;
    TrajectoryBatch test = generate(*env, cfg.test_steps, cfg.test_count, test_seed,
                                    cfg.threads);

    DBFModel model;
    bool have_model = false;
    double train_seconds = 0.0;
    train::TrainResult train_result;
    if (cfg.filter_kind == "dbf") {
        const auto t0 = Clock::now();
        if (cfg.training.contains("checkpoint") &&
            std::filesystem::exists(cfg.training.at("checkpoint").get<std::string>() +
                                    "/manifest.json")) {
            model = load_model(cfg.training.at("checkpoint"));
        } else {
            model = build_dbf_model(cfg.training, *env,
                                    cfg.training.value("train_seed", cfg.seed));
            const int train_count = cfg.training.value("train_count", 1000);
            const int train_steps_len = cfg.training.value("train_steps", cfg.test_steps);
            TrajectoryBatch train_data =
                generate(*env, train_steps_len, train_count, cfg.seed, cfg.threads);
            train::TrainOpts topts;
            topts.lr = cfg.training.value("lr", 1e-3);
            topts.batch = cfg.training.value("batch", 64);
            topts.steps = cfg.training.value("steps", 500);
            topts.seed = cfg.training.value("train_seed", cfg.seed);
            topts.k_samples = cfg.training.value("k_samples", 1);
            topts.threads = cfg.threads;
            if (!cfg.out_dir.empty()) topts.checkpoint_dir = cfg.out_dir + "/model";
            train_result = train::train_joint(model, train_data, topts);
            if (train_result.diverged && train_result.steps_completed == 0)
                throw DivergenceError("dbf training diverged before completing any step");
        }
        train_seconds = seconds_since(t0);
        have_model = true;
    }

    FilterRun run = run_filter(cfg, *env, test, have_model ? &model : nullptr);
    MetricReport rep = score_run(cfg, *env, test, run, have_model ? &model : nullptr);

    rep.extra["config_hash"] = config_hash(cfg.to_json());
    rep.extra["seed"] = cfg.seed;
    rep.extra["filter"] = cfg.filter_kind;
    rep.extra["env"] = cfg.env.value("env", "unknown");
    rep.extra["sigma"] = cfg.env.value("sigma", 0.0);
    rep.extra["timings"] = {{"train_s", train_seconds}, {"filter_s", run.wall_seconds}};
    if (have_model && cfg.filter_kind == "dbf") {
        SpectrumReport spec = spectrum_report(model.dynamics, 40);
        rep.extra["max_abs_eig"] = spec.max_abs_eig;
        if (!train_result.loss_curve.empty()) {
            rep.extra["train_loss_first"] = train_result.loss_curve.front();
            rep.extra["train_loss_last"] = train_result.loss_curve.back();
            rep.extra["train_diverged"] = train_result.diverged;
            rep.extra["train_steps"] = train_result.steps_completed;
        }
        if (!cfg.out_dir.empty()) {
            std::filesystem::create_directories(cfg.out_dir);
            std::ofstream sf(cfg.out_dir + "/spectrum.csv");
            sf << spec.to_csv();
            save_filter_results(run.beliefs, cfg.out_dir + "/beliefs",
                                {{"config_hash", rep.extra["config_hash"]}});
        }
    }
    if (!cfg.out_dir.empty()) {
        write_report_files(rep, cfg);
        // point predictions stream in the trajectory-batch format for every
        // filter kind
        TrajectoryBatch preds;
        preds.count = test.count;
        preds.steps = test.steps;
        preds.states.resize(static_cast<Eigen::Index>(test.count) * test.steps,
                            run.predictions[0].cols());
        preds.observations.resize(preds.states.rows(), 0);
        for (int i = 0; i < test.count; ++i)
            preds.states.middleRows(static_cast<Eigen::Index>(i) * test.steps, test.steps) =
                run.predictions[i];
        preds.manifest = {{"env", cfg.env},
                          {"count", test.count},
                          {"T", test.steps},
                          {"state_dim", preds.states.cols()},
                          {"obs_dim", 0},
                          {"seed", cfg.seed},
                          {"kind", "filter_predictions"},
                          {"filter", cfg.filter_kind},
                          {"config_hash", rep.extra["config_hash"]},
                          {"format_version", 1}};
        save_batch(preds, cfg.out_dir + "/predictions");
    }
    return rep;
}

void write_report_files(const MetricReport& report, const ExperimentConfig& cfg) {
    std::filesystem::create_directories(cfg.out_dir);
    std::ofstream jf(cfg.out_dir + "/report.json");
    jf << report.to_json().dump(2) << "\n";
    std::ofstream cf(cfg.out_dir + "/report.csv");
    cf << "filter,sigma,metric,mean,std\n";
    cf.precision(17);
    for (const auto& [name, mv] : report.metrics)
        cf << cfg.filter_kind << "," << cfg.env.value("sigma", 0.0) << "," << name << ","
           << mv.mean << "," << mv.stddev << "\n";
    std::ofstream cfgf(cfg.out_dir + "/config.json");
    cfgf << cfg.to_json().dump(2) << "\n";
}

namespace {

void json_set_path(json& j, const std::string& path, const json& value) {
    json* cur = &j;
    size_t start = 0;
    for (;;) {
        const size_t dot = path.find('.', start);
        const std::string key = path.substr(start, dot - start);
        if (dot == std::string::npos) {
            (*cur)[key] = value;
            return;
        }
        cur = &(*cur)[key];
        start = dot + 1;
    }
}

} // namespace

json sweep(const json& sweep_config) {
    const json base = sweep_config.at("base");
    const json grid = sweep_config.at("grid");
    const std::string out = sweep_config.value("out", "");

    // Cartesian product of grid values
    std::vector<std::vector<json>> axes;
    std::vector<std::string> paths;
    for (const auto& axis : grid) {
        paths.push_back(axis.at("path"));
        axes.push_back(axis.at("values").get<std::vector<json>>());
    }
    std::vector<size_t> counter(axes.size(), 0);
    json rows = json::array();
    for (;;) {
        json cell_cfg = base;
        json cell_id;
        for (size_t a = 0; a < axes.size(); ++a) {
            json_set_path(cell_cfg, paths[a], axes[a][counter[a]]);
            cell_id[paths[a]] = axes[a][counter[a]];
        }
        if (!out.empty()) {
            std::string cell_dir = out + "/cell";
            for (size_t a = 0; a < axes.size(); ++a)
                cell_dir += "_" + axes[a][counter[a]].dump();
            cell_cfg["out"] = cell_dir;
        }
        json row;
        row["cell"] = cell_id;
        try {
            MetricReport rep = run_experiment(ExperimentConfig::from_json(cell_cfg));
            for (const auto& [name, mv] : rep.metrics) {
                row["metrics"][name] = {{"mean", mv.mean}, {"std", mv.stddev}};
            }
            row["timings"] = rep.extra["timings"];
        } catch (const std::exception& e) {
            row["error"] = e.what();
        }
        rows.push_back(row);
        // advance the counter
        size_t a = 0;
        for (; a < axes.size(); ++a) {
            if (++counter[a] < axes[a].size()) break;
            counter[a] = 0;
        }
        if (a == axes.size()) break;
        if (axes.empty()) break;
    }

    json result = {{"rows", rows}, {"grid", grid}};
    if (!out.empty()) {
        std::filesystem::create_directories(out);
        std::ofstream jf(out + "/sweep.json");
        jf << result.dump(2) << "\n";
        std::ofstream cf(out + "/sweep.csv");
        // header: grid paths, then the union of metric names, then timings
        std::vector<std::string> metric_names;
        for (const auto& row : rows)
            if (row.contains("metrics"))
                for (auto it = row["metrics"].begin(); it != row["metrics"].end(); ++it)
                    if (std::find(metric_names.begin(), metric_names.end(), it.key()) ==
                        metric_names.end())
                        metric_names.push_back(it.key());
        cf << "cell";
        for (const auto& m : metric_names) cf << "," << m << "_mean," << m << "_std";
        cf << ",train_s,filter_s,error\n";
        for (const auto& row : rows) {
            cf << row["cell"].dump();
            for (const auto& m : metric_names) {
                if (row.contains("metrics") && row["metrics"].contains(m))
                    cf << "," << row["metrics"][m]["mean"].get<double>() << ","
                       << row["metrics"][m]["std"].get<double>();
                else
                    cf << ",,";
            }
            if (row.contains("timings"))
                cf << "," << row["timings"]["train_s"].get<double>() << ","
                   << row["timings"]["filter_s"].get<double>();
            else
                cf << ",,";
            cf << "," << (row.contains("error") ? row["error"].get<std::string>() : "") << "\n";
        }
    }
    return result;
}

json compare(const json& compare_config) {
    const json env = compare_config.at("env");
    const std::string out = compare_config.value("out", "");
    json rows = json::array();
    for (const auto& fspec : compare_config.at("filters")) {
        json cfg_j = {{"env", env},
                      {"filter", fspec.at("kind")},
                      {"filter_params", fspec.value("params", json::object())},
                      {"training", fspec.value("training", json::object())},
                      {"test_count", compare_config.value("test_count", 10)},
                      {"test_steps", compare_config.value("test_steps", 80)},
                      {"seed", compare_config.value("seed", 0)},
                      {"threads", compare_config.value("threads", 1)}};
        if (!out.empty()) cfg_j["out"] = out + "/" + fspec.value("name", fspec.at("kind").get<std::string>());
        json row;
        row["name"] = fspec.value("name", fspec.at("kind").get<std::string>());
        try {
            MetricReport rep = run_experiment(ExperimentConfig::from_json(cfg_j));
            for (const auto& [name, mv] : rep.metrics)
                row["metrics"][name] = {{"mean", mv.mean}, {"std", mv.stddev}};
            row["timings"] = rep.extra["timings"];
        } catch (const std::exception& e) {
            row["error"] = e.what();
        }
        rows.push_back(row);
    }
    json result = {{"rows", rows}, {"env", env}};
    if (!out.empty()) {
        std::filesystem::create_directories(out);
        std::ofstream jf(out + "/compare.json");
        jf << result.dump(2) << "\n";
        std::ofstream cf(out + "/compare.csv");
        cf << "filter,sigma,metric,mean,std\n";
        for (const auto& row : rows) {
            if (!row.contains("metrics")) continue;
            for (auto it = row["metrics"].begin(); it != row["metrics"].end(); ++it)
                cf << row["name"].get<std::string>() << "," << env.value("sigma", 0.0) << ","
                   << it.key() << "," << it.value()["mean"].get<double>() << ","
                   << it.value()["std"].get<double>() << "\n";
        }
    }
    return result;
}

// ---------------------------------------------------------------------------
// Belief files
// ---------------------------------------------------------------------------

void save_filter_results(const std::vector<FilterResult>& runs, const std::string& dir,
                         const json& manifest_extra) {
    if (runs.empty()) return;
    std::filesystem::create_directories(dir);
    const int count = static_cast<int>(runs.size());
    const int steps = static_cast<int>(runs[0].filtered.size());
    const int d = runs[0].filtered[0].dim();
    const bool block = runs[0].filtered[0].is_block();

    auto dump = [&](const std::string& path, bool predicted, bool covs) {
        std::ofstream f(dir + "/" + path, std::ios::binary);
        for (const auto& run : runs) {
            for (int t = 0; t < steps; ++t) {
                const GaussianBelief& b = predicted ? run.predicted[t] : run.filtered[t];
                if (!covs) {
                    write_f64_rows(f, b.mean().transpose());
                } else if (block) {
                    MatrixXd packed(1, (d / 2) * 4);
                    const auto& blocks = b.cov_blocks();
                    for (size_t k = 0; k < blocks.size(); ++k) {
                        packed(0, 4 * k + 0) = blocks[k](0, 0);
                        packed(0, 4 * k + 1) = blocks[k](0, 1);
                        packed(0, 4 * k + 2) = blocks[k](1, 0);
                        packed(0, 4 * k + 3) = blocks[k](1, 1);
                    }
                    write_f64_rows(f, packed);
                } else {
                    write_f64_rows(f, b.dense_cov());
                }
            }
        }
    };
    dump("filtered_means.f64", false, false);
    dump("filtered_covs.f64", false, true);
    dump("predicted_means.f64", true, false);
    dump("predicted_covs.f64", true, true);
    json manifest = {{"count", count},
                     {"T", steps},
                     {"dim", d},
                     {"layout", block ? "block" : "dense"},
                     {"format_version", 1}};
    if (!manifest_extra.is_null() && !manifest_extra.empty())
        manifest["extra"] = manifest_extra;
    std::ofstream mf(dir + "/manifest.json");
    mf << manifest.dump(2) << "\n";
}

std::vector<FilterResult> load_filter_results(const std::string& dir) {
    std::ifstream mf(dir + "/manifest.json");
    if (!mf) throw Error("load_filter_results: cannot open manifest");
    json manifest = json::parse(mf);
    const int count = manifest.at("count");
    const int steps = manifest.at("T");
    const int d = manifest.at("dim");
    const bool block = manifest.at("layout") == "block";

    auto read_all = [&](const std::string& path, int cols) {
        std::ifstream f(dir + "/" + path, std::ios::binary);
        if (!f) throw Error("load_filter_results: cannot open " + path);
        MatrixXd m(static_cast<Eigen::Index>(count) * steps, cols);
        for (Eigen::Index i = 0; i < m.rows(); ++i)
            for (Eigen::Index j = 0; j < m.cols(); ++j) {
                double v;
                f.read(reinterpret_cast<char*>(&v), sizeof(double));
                if (!f) throw Error("load_filter_results: truncated " + path);
                m(i, j) = v;
            }
        return m;
    };
    const int cov_cols = block ? 2 * d : d * d;
    MatrixXd fm = read_all("filtered_means.f64", d);
    MatrixXd fc = read_all("filtered_covs.f64", cov_cols);
    MatrixXd pm = read_all("predicted_means.f64", d);
    MatrixXd pc = read_all("predicted_covs.f64", cov_cols);

    auto unpack = [&](const MatrixXd& means, const MatrixXd& covs, int row) {
        VectorXd mean = means.row(row).transpose();
        if (block) {
            std::vector<Matrix2d> blocks(d / 2);
            for (int k = 0; k < d / 2; ++k) {
                Matrix2d b;
                b << covs(row, 4 * k), covs(row, 4 * k + 1), covs(row, 4 * k + 2),
                    covs(row, 4 * k + 3);
                blocks[k] = b;
            }
            return GaussianBelief::blocks(std::move(mean), std::move(blocks));
        }
        MatrixXd cov(d, d);
        for (int i = 0; i < d; ++i)
            for (int j = 0; j < d; ++j) cov(i, j) = covs(row, i * d + j);
        return GaussianBelief::dense(std::move(mean), std::move(cov));
    };

    std::vector<FilterResult> runs(count);
    for (int i = 0; i < count; ++i) {
        for (int t = 0; t < steps; ++t) {
            const int row = i * steps + t;
            runs[i].filtered.push_back(unpack(fm, fc, row));
            runs[i].predicted.push_back(unpack(pm, pc, row));
        }
    }
    return runs;
}

} // namespace dbf
