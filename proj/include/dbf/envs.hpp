#ifndef DBF_ENVS_HPP
#define DBF_ENVS_HPP

#include <functional>
#include <memory>
#include <string>
#include <vector>

#include <json.hpp>

#include "dbf/common.hpp"
#include "dbf/gauss.hpp"

namespace dbf {

using json = nlohmann::json;

// ---------------------------------------------------------------------------
// Integration
// ---------------------------------------------------------------------------

/// Classical fixed-step RK4 over one interval dt split into `substeps`.
/// Throws IntegrationError (carrying the substep) if a derivative goes
/// non-finite.
VectorXd rk4_integrate(const std::function<VectorXd(const VectorXd&)>& deriv,
                       const VectorXd& z0, double dt, int substeps);

// ---------------------------------------------------------------------------
// Double pendulum: two unit masses on two unit bars, g = 9.8, angles
// measured from the downward vertical.
// ---------------------------------------------------------------------------

struct PendulumState {
    double theta1 = 0.0;
    double theta2 = 0.0;
    double omega1 = 0.0;
    double omega2 = 0.0;

    Eigen::Vector4d vec() const { return {theta1, theta2, omega1, omega2}; }
    static PendulumState from_vec(const Eigen::Vector4d& v) {
        return {v[0], v[1], v[2], v[3]};
    }
};

Eigen::Vector4d pendulum_deriv(const PendulumState& s);
double pendulum_energy(const PendulumState& s);

/// Positions of the two masses (x1, y1, x2, y2) plus Gaussian noise of
/// standard deviation sigma per coordinate.
Eigen::Vector4d pendulum_observe(const PendulumState& s, double sigma, Rng& rng);

// ---------------------------------------------------------------------------
// Lorenz96
// ---------------------------------------------------------------------------

enum class Lorenz96Obs { Direct, QuarticSaturating };

struct Lorenz96Config {
    int n_grid = 40;
    double forcing = 8.0;
    double dt = 0.03;
    Lorenz96Obs obs_kind = Lorenz96Obs::Direct;
    double sigma = 1.0;
    int substeps = 4;
    int burn_in_steps = 200;
};

/// dz_i/dt = (z_{i+1} - z_{i-2}) z_{i-1} - z_i + F with cyclic indices.
VectorXd lorenz96_deriv(const VectorXd& z, double forcing);
VectorXd lorenz96_observe(const VectorXd& z, const Lorenz96Config& cfg, Rng& rng);

// ---------------------------------------------------------------------------
// Bouncing patch: intensity patches translating at constant velocity inside a
// square frame; reflection is folded into the observation operator so the
// state dynamics stay linear.
// ---------------------------------------------------------------------------

struct BouncePatchConfig {
    int frame = 12;
    int patch = 4;
    double dt = 1.0;
    double sigma = 0.1;
    std::vector<MatrixXd> patches;  // each patch x patch
    double vel_min = 0.5;
    double vel_max = 1.5;

    int period() const { return frame - patch; }
    int n_patches() const { return static_cast<int>(patches.size()); }
    int state_dim() const { return 4 * n_patches(); }
    int obs_dim() const { return frame * frame; }
};

/// Triangle-wave fold of an unbounded coordinate into [0, P].
double bounce_reflect(double x, double period);

/// Positions advance by dt * velocity, velocities unchanged; process noise
/// variance q_var per state dimension.
LinearGaussianMap constant_velocity_map(double dt, int n_objects, double q_var = 0.0);

/// Noiseless rendered frame (row-major frame x frame, flattened): every patch
/// is folded into the frame and pasted with bilinear weights.
VectorXd bounce_render(const VectorXd& state, const BouncePatchConfig& cfg);
VectorXd bounce_observe(const VectorXd& state, const BouncePatchConfig& cfg, Rng& rng);

// ---------------------------------------------------------------------------
// Trajectory generation
// ---------------------------------------------------------------------------

struct TrajectoryBatch {
    MatrixXd states;        // (count*T) x d_z, trajectory-major
    MatrixXd observations;  // (count*T) x d_o
    int count = 0;
    int steps = 0;
    json manifest;

    Eigen::Ref<const Eigen::RowVectorXd> state(int traj, int t) const {
        return states.row(static_cast<Eigen::Index>(traj) * steps + t);
    }
    Eigen::Ref<const Eigen::RowVectorXd> observation(int traj, int t) const {
        return observations.row(static_cast<Eigen::Index>(traj) * steps + t);
    }
};

/// A benchmark environment: initial-condition sampling, one-observation-step
/// evolution, observation operator, and metadata the rest of the workbench
/// needs (angle dims, config echo).
class Environment {
public:
    virtual ~Environment() = default;
    virtual std::string name() const = 0;
    virtual int state_dim() const = 0;
    virtual int obs_dim() const = 0;
    virtual json config_json() const = 0;
    virtual VectorXd initial_state(Rng& rng) const = 0;
    /// Advance one observation interval; rng is used only by environments
    /// with process noise.
    virtual VectorXd step(const VectorXd& z, Rng& rng) const = 0;
    virtual VectorXd observe(const VectorXd& z, Rng& rng) const = 0;
    /// Noiseless part of the observation operator.
    virtual VectorXd observe_mean(const VectorXd& z) const = 0;
    /// Propagation for ensemble/particle members: like step, but without the
    /// canonicalization applied to stored states (pendulum angles stay on the
    /// real line so tight member clusters never straddle the wrap point).
    virtual VectorXd step_unwrapped(const VectorXd& z, Rng& rng) const { return step(z, rng); }
    /// Draw a filter-side initial state. Defaults to the environment's
    /// initial-condition distribution; environments whose first observation
    /// pins part of the state may condition on it.
    virtual VectorXd filter_initial_state(const VectorXd& first_obs, Rng& rng) const {
        (void)first_obs;
        return initial_state(rng);
    }
    /// Observation noise standard deviation (isotropic).
    virtual double obs_sigma() const = 0;
    /// Indices of state dimensions that live on the circle.
    virtual std::vector<int> angle_dims() const { return {}; }
};

/// Explicit linear-Gaussian state-space model (z' = A z + w, o = H z + v).
struct LgssmConfig {
    MatrixXd a, q, h, r;
    VectorXd init_mean;
    MatrixXd init_cov;
};
std::unique_ptr<Environment> make_lgssm_env(const LgssmConfig& cfg);

std::unique_ptr<Environment> make_pendulum_env(double sigma, double dt = 0.03, int substeps = 4);
std::unique_ptr<Environment> make_lorenz96_env(const Lorenz96Config& cfg);
std::unique_ptr<Environment> make_bounce_env(const BouncePatchConfig& cfg);

/// Build an environment from its JSON config (the same shape config_json
/// emits).
std::unique_ptr<Environment> make_environment(const json& cfg);

/// Deterministic batch generation: trajectory i draws its initial condition
/// from substream (seed, i) and its step-t noise from substream (seed, i, t),
/// so any suffix can be regenerated bit-identically from the state at t.
TrajectoryBatch generate(const Environment& env, int steps, int count, uint64_t seed,
                         int threads = 1);

/// Regenerate the tail of trajectory `traj` from the stored state at t0.
MatrixXd generate_tail(const Environment& env, const VectorXd& state_t0, int traj, int t0,
                       int steps, uint64_t seed, MatrixXd* observations = nullptr);

/// Binary + manifest round trip. Writes states.f64, observations.f64 and
/// manifest.json under dir.
void save_batch(const TrajectoryBatch& batch, const std::string& dir);
TrajectoryBatch load_batch(const std::string& dir);

} // namespace dbf

#endif
