#include "dbf/envs.hpp"

#include <filesystem>
#include <fstream>

namespace dbf {

namespace {
constexpr uint64_t kInitTag = 0x1c0ffee1;
constexpr uint64_t kStepTag = 0x57e9;
constexpr uint64_t kObsTag = 0x0b5e;
} // namespace

// ---------------------------------------------------------------------------
// RK4
// ---------------------------------------------------------------------------

VectorXd rk4_integrate(const std::function<VectorXd(const VectorXd&)>& deriv,
                       const VectorXd& z0, double dt, int substeps) {
    if (substeps < 1) throw ConfigError("rk4_integrate: substeps must be >= 1");
    const double h = dt / substeps;
    VectorXd z = z0;
    for (int s = 0; s < substeps; ++s) {
        VectorXd k1 = deriv(z);
        VectorXd k2 = deriv(z + 0.5 * h * k1);
        VectorXd k3 = deriv(z + 0.5 * h * k2);
        VectorXd k4 = deriv(z + h * k3);
        if (!k1.allFinite() || !k2.allFinite() || !k3.allFinite() || !k4.allFinite())
            throw IntegrationError("rk4_integrate: non-finite derivative at substep " +
                                       std::to_string(s),
                                   s);
        z += (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
    }
    return z;
}

// ---------------------------------------------------------------------------
// Double pendulum, m1 = m2 = 1 kg, l1 = l2 = 1 m, g = 9.8 m/s^2
// ---------------------------------------------------------------------------

namespace {
constexpr double kG = 9.8;
constexpr double kM1 = 1.0, kM2 = 1.0, kL1 = 1.0, kL2 = 1.0;
} // namespace

Eigen::Vector4d pendulum_deriv(const PendulumState& s) {
    const double th1 = s.theta1, th2 = s.theta2, w1 = s.omega1, w2 = s.omega2;
    const double delta = th2 - th1;
    const double cd = std::cos(delta), sd = std::sin(delta);
    const double den1 = (kM1 + kM2) * kL1 - kM2 * kL1 * cd * cd;
    const double dw1 = (kM2 * kL1 * w1 * w1 * sd * cd + kM2 * kG * std::sin(th2) * cd +
                        kM2 * kL2 * w2 * w2 * sd - (kM1 + kM2) * kG * std::sin(th1)) /
                       den1;
    const double den2 = (kL2 / kL1) * den1;
    const double dw2 = (-kM2 * kL2 * w2 * w2 * sd * cd + (kM1 + kM2) * kG * std::sin(th1) * cd -
                        (kM1 + kM2) * kL1 * w1 * w1 * sd - (kM1 + kM2) * kG * std::sin(th2)) /
                       den2;
    return {w1, w2, dw1, dw2};
}

double pendulum_energy(const PendulumState& s) {
    const double c12 = std::cos(s.theta1 - s.theta2);
    const double kinetic = 0.5 * kM1 * kL1 * kL1 * s.omega1 * s.omega1 +
                           0.5 * kM2 *
                               (kL1 * kL1 * s.omega1 * s.omega1 + kL2 * kL2 * s.omega2 * s.omega2 +
                                2.0 * kL1 * kL2 * s.omega1 * s.omega2 * c12);
    const double potential = -kG * ((kM1 + kM2) * kL1 * std::cos(s.theta1) +
                                    kM2 * kL2 * std::cos(s.theta2));
    return kinetic + potential;
}

Eigen::Vector4d pendulum_observe(const PendulumState& s, double sigma, Rng& rng) {
    if (sigma < 0.0) throw ConfigError("pendulum_observe: sigma must be >= 0");
    const double x1 = kL1 * std::sin(s.theta1);
    const double y1 = -kL1 * std::cos(s.theta1);
    Eigen::Vector4d o{x1, y1, x1 + kL2 * std::sin(s.theta2), y1 - kL2 * std::cos(s.theta2)};
    if (sigma > 0.0)
        for (int i = 0; i < 4; ++i) o[i] += sigma * rng.normal();
    return o;
}

// ---------------------------------------------------------------------------
// Lorenz96
// ---------------------------------------------------------------------------

VectorXd lorenz96_deriv(const VectorXd& z, double forcing) {
    const int n = static_cast<int>(z.size());
    if (n < 4) throw ConfigError("lorenz96_deriv: need at least 4 grid points");
    VectorXd dz(n);
    for (int i = 0; i < n; ++i) {
        const double zp1 = z[(i + 1) % n];
        const double zm1 = z[(i - 1 + n) % n];
        const double zm2 = z[(i - 2 + n) % n];
        dz[i] = (zp1 - zm2) * zm1 - z[i] + forcing;
    }
    return dz;
}

VectorXd lorenz96_observe(const VectorXd& z, const Lorenz96Config& cfg, Rng& rng) {
    VectorXd o(z.size());
    switch (cfg.obs_kind) {
        case Lorenz96Obs::Direct:
            o = z;
            break;
        case Lorenz96Obs::QuarticSaturating:
            for (Eigen::Index j = 0; j < z.size(); ++j)
                o[j] = std::min(z[j] * z[j] * z[j] * z[j], 10.0);
            break;
    }
    if (cfg.sigma > 0.0)
        for (Eigen::Index j = 0; j < o.size(); ++j) o[j] += cfg.sigma * rng.normal();
    return o;
}

// ---------------------------------------------------------------------------
// Bouncing patch
// ---------------------------------------------------------------------------

double bounce_reflect(double x, double period) {
    if (period < 1.0) throw ConfigError("bounce_reflect: period must be >= 1");
    const double two_p = 2.0 * period;
    double m = std::fmod(x, two_p);
    if (m < 0.0) m += two_p;
    return period - std::abs(m - period);
}

LinearGaussianMap constant_velocity_map(double dt, int n_objects, double q_var) {
    if (dt <= 0.0) throw ConfigError("constant_velocity_map: dt must be > 0");
    if (n_objects < 1) throw ConfigError("constant_velocity_map: n_objects must be >= 1");
    const int np = 2 * n_objects;  // position coordinates
    const int d = 2 * np;
    MatrixXd f = MatrixXd::Identity(d, d);
    for (int i = 0; i < np; ++i) f(i, np + i) = dt;
    return LinearGaussianMap(f, q_var * MatrixXd::Identity(d, d));
}

VectorXd bounce_render(const VectorXd& state, const BouncePatchConfig& cfg) {
    const int k = cfg.n_patches();
    if (state.size() != cfg.state_dim())
        throw DimensionError("bounce_render: state dimension mismatch");
    const int frame = cfg.frame, p = cfg.patch;
    VectorXd img = VectorXd::Zero(frame * frame);
    const double period = cfg.period();
    for (int i = 0; i < k; ++i) {
        const double fx = bounce_reflect(state[2 * i], period);
        const double fy = bounce_reflect(state[2 * i + 1], period);
        const int x0 = std::min(static_cast<int>(std::floor(fx)), cfg.frame - p - 1);
        const int y0 = std::min(static_cast<int>(std::floor(fy)), cfg.frame - p - 1);
        const double ax = fx - x0, ay = fy - y0;
        const MatrixXd& patch = cfg.patches[i];
        for (int r = 0; r < p; ++r) {
            for (int c = 0; c < p; ++c) {
                const double v = patch(r, c);
                if (v == 0.0) continue;
                img[(y0 + r) * frame + (x0 + c)] += v * (1 - ax) * (1 - ay);
                img[(y0 + r) * frame + (x0 + c + 1)] += v * ax * (1 - ay);
                img[(y0 + r + 1) * frame + (x0 + c)] += v * (1 - ax) * ay;
                img[(y0 + r + 1) * frame + (x0 + c + 1)] += v * ax * ay;
            }
        }
    }
    return img;
}

VectorXd bounce_observe(const VectorXd& state, const BouncePatchConfig& cfg, Rng& rng) {
    VectorXd img = bounce_render(state, cfg);
    if (cfg.sigma > 0.0)
        for (Eigen::Index i = 0; i < img.size(); ++i) img[i] += cfg.sigma * rng.normal();
    return img;
}

// ---------------------------------------------------------------------------
// Environments
// ---------------------------------------------------------------------------

namespace {

class PendulumEnv final : public Environment {
public:
    PendulumEnv(double sigma, double dt, int substeps)
        : sigma_(sigma), dt_(dt), substeps_(substeps) {}

    std::string name() const override { return "double_pendulum"; }
    int state_dim() const override { return 4; }
    int obs_dim() const override { return 4; }
    std::vector<int> angle_dims() const override { return {0, 1}; }

    json config_json() const override {
        return {{"env", name()}, {"sigma", sigma_}, {"dt", dt_}, {"substeps", substeps_}};
    }

    VectorXd initial_state(Rng& rng) const override {
        Eigen::Vector4d z;
        // theta uniform over the circle, omega in [-1, 1] rad/s
        z[0] = wrap_angle(rng.uniform(-M_PI, M_PI));
        z[1] = wrap_angle(rng.uniform(-M_PI, M_PI));
        z[2] = rng.uniform(-1.0, 1.0);
        z[3] = rng.uniform(-1.0, 1.0);
        return z;
    }

    VectorXd step(const VectorXd& z, Rng& rng) const override {
        VectorXd out = step_unwrapped(z, rng);
        out[0] = wrap_angle(out[0]);
        out[1] = wrap_angle(out[1]);
        return out;
    }

    VectorXd step_unwrapped(const VectorXd& z, Rng&) const override {
        return rk4_integrate(
            [](const VectorXd& s) -> VectorXd {
                return pendulum_deriv(PendulumState::from_vec(s));
            },
            z, dt_, substeps_);
    }

    VectorXd filter_initial_state(const VectorXd& first_obs, Rng& rng) const override {
        // the first frame pins the angles up to observation noise; angular
        // velocities start from the same prior the data uses
        const double th1 = std::atan2(first_obs[0], -first_obs[1]);
        const double th2 =
            std::atan2(first_obs[2] - first_obs[0], -(first_obs[3] - first_obs[1]));
        Eigen::Vector4d z;
        z[0] = th1 + 2.0 * sigma_ * rng.normal();
        z[1] = th2 + 2.0 * sigma_ * rng.normal();
        z[2] = rng.uniform(-1.0, 1.0);
        z[3] = rng.uniform(-1.0, 1.0);
        return z;
    }

    VectorXd observe(const VectorXd& z, Rng& rng) const override {
        return pendulum_observe(PendulumState::from_vec(z), sigma_, rng);
    }

    VectorXd observe_mean(const VectorXd& z) const override {
        Rng unused(0);
        return pendulum_observe(PendulumState::from_vec(z), 0.0, unused);
    }

    double obs_sigma() const override { return sigma_; }

private:
    double sigma_;
    double dt_;
    int substeps_;
};

class Lorenz96Env final : public Environment {
public:
    explicit Lorenz96Env(Lorenz96Config cfg) : cfg_(std::move(cfg)) {
        if (cfg_.n_grid < 4) throw ConfigError("Lorenz96: n_grid must be >= 4");
        if (cfg_.dt <= 0.0) throw ConfigError("Lorenz96: dt must be > 0");
        if (cfg_.sigma < 0.0) throw ConfigError("Lorenz96: sigma must be >= 0");
    }

    std::string name() const override { return "lorenz96"; }
    int state_dim() const override { return cfg_.n_grid; }
    int obs_dim() const override { return cfg_.n_grid; }

    json config_json() const override {
        return {{"env", name()},
                {"n_grid", cfg_.n_grid},
                {"forcing", cfg_.forcing},
                {"dt", cfg_.dt},
                {"obs_kind", cfg_.obs_kind == Lorenz96Obs::Direct ? "direct" : "quartic"},
                {"sigma", cfg_.sigma},
                {"substeps", cfg_.substeps},
                {"burn_in_steps", cfg_.burn_in_steps}};
    }

    VectorXd initial_state(Rng& rng) const override {
        VectorXd z = VectorXd::Constant(cfg_.n_grid, cfg_.forcing);
        z += rng.normal_vec(cfg_.n_grid);
        Rng unused(0);
        for (int t = 0; t < cfg_.burn_in_steps; ++t) z = step(z, unused);
        return z;
    }

    VectorXd step(const VectorXd& z, Rng&) const override {
        return rk4_integrate(
            [&](const VectorXd& s) { return lorenz96_deriv(s, cfg_.forcing); }, z, cfg_.dt,
            cfg_.substeps);
    }

    VectorXd observe(const VectorXd& z, Rng& rng) const override {
        return lorenz96_observe(z, cfg_, rng);
    }

    VectorXd observe_mean(const VectorXd& z) const override {
        Lorenz96Config noiseless = cfg_;
        noiseless.sigma = 0.0;
        Rng unused(0);
        return lorenz96_observe(z, noiseless, unused);
    }

    double obs_sigma() const override { return cfg_.sigma; }

    const Lorenz96Config& config() const { return cfg_; }

private:
    Lorenz96Config cfg_;
};

class BounceEnv final : public Environment {
public:
    explicit BounceEnv(BouncePatchConfig cfg) : cfg_(std::move(cfg)) {
        if (cfg_.patch >= cfg_.frame) throw ConfigError("BouncePatch: patch must be < frame");
        if (cfg_.period() < 1) throw ConfigError("BouncePatch: period must be >= 1");
        if (cfg_.patches.empty()) throw ConfigError("BouncePatch: needs at least one patch");
        map_ = constant_velocity_map(cfg_.dt, cfg_.n_patches());
    }

    std::string name() const override { return "bounce_patch"; }
    int state_dim() const override { return cfg_.state_dim(); }
    int obs_dim() const override { return cfg_.obs_dim(); }

    json config_json() const override {
        json patches = json::array();
        for (const auto& p : cfg_.patches) {
            json rows = json::array();
            for (int r = 0; r < p.rows(); ++r) {
                json row = json::array();
                for (int c = 0; c < p.cols(); ++c) row.push_back(p(r, c));
                rows.push_back(row);
            }
            patches.push_back(rows);
        }
        return {{"env", name()},     {"frame", cfg_.frame},     {"patch", cfg_.patch},
                {"dt", cfg_.dt},     {"sigma", cfg_.sigma},     {"vel_min", cfg_.vel_min},
                {"vel_max", cfg_.vel_max}, {"patches", patches}};
    }

    VectorXd initial_state(Rng& rng) const override {
        const int k = cfg_.n_patches();
        VectorXd z(4 * k);
        for (int i = 0; i < 2 * k; ++i) z[i] = rng.uniform(0.0, cfg_.period());
        for (int i = 0; i < 2 * k; ++i) {
            double speed = rng.uniform(cfg_.vel_min, cfg_.vel_max);
            z[2 * k + i] = rng.uniform() < 0.5 ? -speed : speed;
        }
        return z;
    }

    VectorXd step(const VectorXd& z, Rng&) const override { return map_.matrix * z; }

    VectorXd observe(const VectorXd& z, Rng& rng) const override {
        return bounce_observe(z, cfg_, rng);
    }

    VectorXd observe_mean(const VectorXd& z) const override { return bounce_render(z, cfg_); }

    double obs_sigma() const override { return cfg_.sigma; }

    const BouncePatchConfig& config() const { return cfg_; }

private:
    BouncePatchConfig cfg_;
    LinearGaussianMap map_;
};

class LgssmEnv final : public Environment {
public:
    explicit LgssmEnv(LgssmConfig cfg) : cfg_(std::move(cfg)) {
        if (cfg_.a.rows() != cfg_.a.cols()) throw ConfigError("LGSSM: A must be square");
        q_chol_ = cfg_.q.isZero(0.0) ? MatrixXd::Zero(cfg_.a.rows(), cfg_.a.rows())
                                     : chol(cfg_.q);
        r_chol_ = cfg_.r.isZero(0.0) ? MatrixXd::Zero(cfg_.h.rows(), cfg_.h.rows())
                                     : chol(cfg_.r);
        init_chol_ = cfg_.init_cov.isZero(0.0)
                         ? MatrixXd::Zero(cfg_.a.rows(), cfg_.a.rows())
                         : chol(cfg_.init_cov);
    }

    std::string name() const override { return "lgssm"; }
    int state_dim() const override { return static_cast<int>(cfg_.a.rows()); }
    int obs_dim() const override { return static_cast<int>(cfg_.h.rows()); }

    json config_json() const override {
        auto mat = [](const MatrixXd& m) {
            json rows = json::array();
            for (Eigen::Index i = 0; i < m.rows(); ++i) {
                json row = json::array();
                for (Eigen::Index j = 0; j < m.cols(); ++j) row.push_back(m(i, j));
                rows.push_back(row);
            }
            return rows;
        };
        return {{"env", name()},      {"a", mat(cfg_.a)},
                {"q", mat(cfg_.q)},   {"h", mat(cfg_.h)},
                {"r", mat(cfg_.r)},   {"init_mean", mat(cfg_.init_mean.transpose())},
                {"init_cov", mat(cfg_.init_cov)}};
    }

    VectorXd initial_state(Rng& rng) const override {
        return cfg_.init_mean + init_chol_ * rng.normal_vec(state_dim());
    }

    VectorXd step(const VectorXd& z, Rng& rng) const override {
        return cfg_.a * z + q_chol_ * rng.normal_vec(state_dim());
    }

    VectorXd observe(const VectorXd& z, Rng& rng) const override {
        return cfg_.h * z + r_chol_ * rng.normal_vec(obs_dim());
    }

    VectorXd observe_mean(const VectorXd& z) const override { return cfg_.h * z; }

    double obs_sigma() const override { return std::sqrt(cfg_.r(0, 0)); }

    const LgssmConfig& config() const { return cfg_; }

private:
    LgssmConfig cfg_;
    MatrixXd q_chol_, r_chol_, init_chol_;
};

MatrixXd json_matrix(const json& rows) {
    const auto r = rows.size();
    const auto c = rows.at(0).size();
    MatrixXd m(r, c);
    for (size_t i = 0; i < r; ++i)
        for (size_t j = 0; j < c; ++j) m(i, j) = rows.at(i).at(j).get<double>();
    return m;
}

} // namespace

std::unique_ptr<Environment> make_lgssm_env(const LgssmConfig& cfg) {
    return std::make_unique<LgssmEnv>(cfg);
}

std::unique_ptr<Environment> make_pendulum_env(double sigma, double dt, int substeps) {
    return std::make_unique<PendulumEnv>(sigma, dt, substeps);
}

std::unique_ptr<Environment> make_lorenz96_env(const Lorenz96Config& cfg) {
    return std::make_unique<Lorenz96Env>(cfg);
}

std::unique_ptr<Environment> make_bounce_env(const BouncePatchConfig& cfg) {
    return std::make_unique<BounceEnv>(cfg);
}

std::unique_ptr<Environment> make_environment(const json& cfg) {
    if (!cfg.contains("env")) throw ConfigError("environment config needs an \"env\" field");
    const std::string kind = cfg.at("env");
    if (kind == "double_pendulum") {
        return make_pendulum_env(cfg.value("sigma", 0.1), cfg.value("dt", 0.03),
                                 cfg.value("substeps", 4));
    }
    if (kind == "lorenz96") {
        Lorenz96Config c;
        c.n_grid = cfg.value("n_grid", 40);
        c.forcing = cfg.value("forcing", 8.0);
        c.dt = cfg.value("dt", 0.03);
        c.sigma = cfg.value("sigma", 1.0);
        c.substeps = cfg.value("substeps", 4);
        c.burn_in_steps = cfg.value("burn_in_steps", 200);
        const std::string obs = cfg.value("obs_kind", "direct");
        if (obs == "direct")
            c.obs_kind = Lorenz96Obs::Direct;
        else if (obs == "quartic")
            c.obs_kind = Lorenz96Obs::QuarticSaturating;
        else
            throw ConfigError("lorenz96: unknown obs_kind \"" + obs + "\"");
        return make_lorenz96_env(c);
    }
    if (kind == "lgssm") {
        LgssmConfig c;
        c.a = json_matrix(cfg.at("a"));
        c.q = json_matrix(cfg.at("q"));
        c.h = json_matrix(cfg.at("h"));
        c.r = json_matrix(cfg.at("r"));
        c.init_mean = json_matrix(cfg.at("init_mean")).row(0).transpose();
        c.init_cov = json_matrix(cfg.at("init_cov"));
        return make_lgssm_env(c);
    }
    if (kind == "bounce_patch") {
        BouncePatchConfig c;
        c.frame = cfg.value("frame", 12);
        c.patch = cfg.value("patch", 4);
        c.dt = cfg.value("dt", 1.0);
        c.sigma = cfg.value("sigma", 0.1);
        c.vel_min = cfg.value("vel_min", 0.5);
        c.vel_max = cfg.value("vel_max", 1.5);
        if (cfg.contains("patches")) {
            for (const auto& pj : cfg.at("patches")) {
                MatrixXd p(c.patch, c.patch);
                for (int r = 0; r < c.patch; ++r)
                    for (int cc = 0; cc < c.patch; ++cc) p(r, cc) = pj.at(r).at(cc).get<double>();
                c.patches.push_back(p);
            }
        } else {
            // default: two deterministic cross/box shapes
            int n = cfg.value("n_patches", 2);
            Rng prng = Rng::derive(cfg.value("patch_seed", 7u), {0xbeef});
            for (int i = 0; i < n; ++i) {
                MatrixXd p(c.patch, c.patch);
                for (int r = 0; r < c.patch; ++r)
                    for (int cc = 0; cc < c.patch; ++cc) p(r, cc) = prng.uniform(0.3, 1.0);
                c.patches.push_back(p);
            }
        }
        return make_bounce_env(c);
    }
    throw ConfigError("unknown environment \"" + kind + "\"");
}

// ---------------------------------------------------------------------------
// Generation
// ---------------------------------------------------------------------------

TrajectoryBatch generate(const Environment& env, int steps, int count, uint64_t seed,
                         int threads) {
    if (steps < 1) throw ConfigError("generate: steps must be >= 1");
    if (count < 1) throw ConfigError("generate: count must be >= 1");
    TrajectoryBatch batch;
    batch.count = count;
    batch.steps = steps;
    batch.states.resize(static_cast<Eigen::Index>(count) * steps, env.state_dim());
    batch.observations.resize(static_cast<Eigen::Index>(count) * steps, env.obs_dim());
    parallel_for(count, threads, [&](int i) {
        Rng init_rng = Rng::derive(seed, {static_cast<uint64_t>(i), kInitTag});
        VectorXd z = env.initial_state(init_rng);
        MatrixXd obs_tail;
        MatrixXd tail = generate_tail(env, z, i, 0, steps, seed, &obs_tail);
        batch.states.middleRows(static_cast<Eigen::Index>(i) * steps, steps) = tail;
        batch.observations.middleRows(static_cast<Eigen::Index>(i) * steps, steps) = obs_tail;
    });
    batch.manifest = {{"env", env.config_json()},
                      {"count", count},
                      {"T", steps},
                      {"state_dim", env.state_dim()},
                      {"obs_dim", env.obs_dim()},
                      {"seed", seed},
                      {"format_version", 1}};
    return batch;
}

MatrixXd generate_tail(const Environment& env, const VectorXd& state_t0, int traj, int t0,
                       int steps, uint64_t seed, MatrixXd* observations) {
    MatrixXd states(steps - t0, env.state_dim());
    if (observations) observations->resize(steps - t0, env.obs_dim());
    VectorXd z = state_t0;
    for (int t = t0; t < steps; ++t) {
        if (t > t0) {
            Rng step_rng =
                Rng::derive(seed, {static_cast<uint64_t>(traj), static_cast<uint64_t>(t), kStepTag});
            z = env.step(z, step_rng);
        }
        states.row(t - t0) = z.transpose();
        if (observations) {
            Rng obs_rng =
                Rng::derive(seed, {static_cast<uint64_t>(traj), static_cast<uint64_t>(t), kObsTag});
            observations->row(t - t0) = env.observe(z, obs_rng).transpose();
        }
    }
    return states;
}

// ---------------------------------------------------------------------------
// Batch files: raw little-endian doubles, row-major, plus a JSON manifest.
// ---------------------------------------------------------------------------

namespace {

void write_f64(const std::string& path, const MatrixXd& m) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw Error("cannot open " + path + " for writing");
    // row-major on disk
    for (Eigen::Index i = 0; i < m.rows(); ++i) {
        std::vector<double> row(m.cols());
        for (Eigen::Index j = 0; j < m.cols(); ++j) row[j] = m(i, j);
        f.write(reinterpret_cast<const char*>(row.data()),
                static_cast<std::streamsize>(row.size() * sizeof(double)));
    }
}

MatrixXd read_f64(const std::string& path, Eigen::Index rows, Eigen::Index cols) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw Error("cannot open " + path);
    MatrixXd m(rows, cols);
    std::vector<double> row(cols);
    for (Eigen::Index i = 0; i < rows; ++i) {
        f.read(reinterpret_cast<char*>(row.data()),
               static_cast<std::streamsize>(row.size() * sizeof(double)));
        if (!f) throw Error("unexpected end of file in " + path);
        for (Eigen::Index j = 0; j < cols; ++j) m(i, j) = row[j];
    }
    return m;
}

} // namespace

void save_batch(const TrajectoryBatch& batch, const std::string& dir) {
    std::filesystem::create_directories(dir);
    write_f64(dir + "/states.f64", batch.states);
    write_f64(dir + "/observations.f64", batch.observations);
    std::ofstream mf(dir + "/manifest.json");
    mf << batch.manifest.dump(2) << "\n";
}

TrajectoryBatch load_batch(const std::string& dir) {
    std::ifstream mf(dir + "/manifest.json");
    if (!mf) throw Error("cannot open " + dir + "/manifest.json");
    TrajectoryBatch batch;
    batch.manifest = json::parse(mf);
    batch.count = batch.manifest.at("count");
    batch.steps = batch.manifest.at("T");
    const Eigen::Index rows = static_cast<Eigen::Index>(batch.count) * batch.steps;
    batch.states = read_f64(dir + "/states.f64", rows, batch.manifest.at("state_dim"));
    batch.observations = read_f64(dir + "/observations.f64", rows, batch.manifest.at("obs_dim"));
    return batch;
}

} // namespace dbf
