#ifndef DBF_DBF_TRAIN_HPP
#define DBF_DBF_TRAIN_HPP

#include "dbf/dbf.hpp"
#include "dbf/envs.hpp"
#include "dbf/tensor.hpp"

namespace dbf::train {

// ---------------------------------------------------------------------------
// Observation models for physical-space (linear-dynamics) assimilation:
// log p(o | z), differentiable in z and in any trainable operator parameters.
// ---------------------------------------------------------------------------
class ObservationModel {
public:
    virtual ~ObservationModel() = default;
    virtual int z_dim() const = 0;
    virtual int obs_dim() const = 0;
    virtual std::vector<nn::Param>& params() = 0;
    const std::vector<nn::Param>& params() const {
        return const_cast<ObservationModel*>(this)->params();
    }
    virtual std::vector<ad::Var> push_params(ad::Tape& t, bool trainable) const = 0;
    /// Row-wise log density: z [N x d_z], o constant [N x d_o] -> [N x 1].
    virtual ad::Var log_prob(ad::Tape& t, ad::Var z, const MatrixXd& o,
                             const std::vector<ad::Var>& pv) const = 0;
    /// Closed-form E_{z~N(mu, Sigma)} log p(o|z), available for
    /// linear-Gaussian models. mu [N x d], sigma_flat [N x d^2] -> [N x 1].
    virtual bool has_closed_form() const { return false; }
    virtual ad::Var expected_log_prob(ad::Tape&, ad::Var /*mu*/, ad::Var /*sigma_flat*/,
                                      const MatrixXd& /*o*/,
                                      const std::vector<ad::Var>& /*pv*/) const {
        throw Error("observation model has no closed-form expectation");
    }
    virtual MatrixXd mean(const MatrixXd& z) const = 0;  // numeric h(z) rows
};

/// o = H z + eps, eps ~ N(0, diag(r)). H and r are fixed configuration.
class LinearGaussianObservation final : public ObservationModel {
public:
    LinearGaussianObservation(MatrixXd h, VectorXd r_diag);
    int z_dim() const override { return static_cast<int>(h_.cols()); }
    int obs_dim() const override { return static_cast<int>(h_.rows()); }
    std::vector<nn::Param>& params() override { return params_; }
    std::vector<ad::Var> push_params(ad::Tape&, bool) const override { return {}; }
    ad::Var log_prob(ad::Tape& t, ad::Var z, const MatrixXd& o,
                     const std::vector<ad::Var>& pv) const override;
    bool has_closed_form() const override { return true; }
    ad::Var expected_log_prob(ad::Tape& t, ad::Var mu, ad::Var sigma_flat, const MatrixXd& o,
                              const std::vector<ad::Var>& pv) const override;
    MatrixXd mean(const MatrixXd& z) const override;

private:
    MatrixXd h_;
    VectorXd r_diag_;
    double log_norm_;
    std::vector<nn::Param> params_;
};

/// Bouncing-patch renderer with trainable patch intensities and fixed
/// isotropic pixel noise.
class BouncePatchObservation final : public ObservationModel {
public:
    BouncePatchObservation(BouncePatchConfig cfg, double r_var, Rng& rng,
                           bool random_init = true);
    int z_dim() const override { return cfg_.state_dim(); }
    int obs_dim() const override { return cfg_.obs_dim(); }
    std::vector<nn::Param>& params() override { return params_; }
    std::vector<ad::Var> push_params(ad::Tape& t, bool trainable) const override;
    ad::Var log_prob(ad::Tape& t, ad::Var z, const MatrixXd& o,
                     const std::vector<ad::Var>& pv) const override;
    MatrixXd mean(const MatrixXd& z) const override;
    const BouncePatchConfig& config() const { return cfg_; }
    MatrixXd learned_patch(int i) const;

private:
    BouncePatchConfig cfg_;
    double r_var_;
    std::vector<nn::Param> params_;  // one [patch x patch] entry per patch
};

// ---------------------------------------------------------------------------
// Tape-level ELBO builders. Observations (and states) are laid out
// time-major: row t*B + b is trajectory b at step t.
// ---------------------------------------------------------------------------

struct ElboOpts {
    int k_samples = 1;
    bool closed_form_expectation = false;  // linear ELBO only
    uint64_t noise_seed = 0;
    int noise_row_offset = 0;  // global batch position of this shard's first row
};

/// Vars for the pushed DBF model parameters.
struct DBFVars {
    ad::Var rho, omega;
    ad::Var log_scale;
    std::vector<ad::Var> f, g, phi;
};

struct FreezeSpec {
    bool dynamics = false;
    bool f_net = false;
    bool g_net = false;
    bool phi = false;
    bool scale = false;
};

DBFVars push_model(ad::Tape& t, const DBFModel& model, const FreezeSpec& freeze = {});

/// Diagnostics filled by the ELBO builders on request: the loss split and the
/// per-step filtered beliefs of the recursion (first batch row).
struct ElboParts {
    double kl_total = 0.0;
    double recon_total = 0.0;
    std::vector<GaussianBelief> filtered;
};

/// Joint objective: sum_t KL(q_t || q_{t|t-1}) - E_{q_t} log p(z_t|h_t),
/// summed over the batch. Block-diagonal covariance recursion, O(d_h) per
/// step per trajectory.
ad::Var build_elbo_joint(ad::Tape& t, const DBFModel& model, const DBFVars& vars,
                         const MatrixXd& obs_tm, const MatrixXd& z_tm, int batch,
                         const ElboOpts& opts, ElboParts* parts = nullptr);

/// Observation-only objective for known linear dynamics over the physical
/// state (dense covariance recursion).
struct LinearFilterSpec {
    LinearGaussianMap dyn;
    VectorXd init_mean;
    MatrixXd init_cov;
    VirtualPrior vprior;
};

ad::Var build_elbo_linear(ad::Tape& t, const LinearFilterSpec& spec,
                          const ObservationModel& obs_model, const nn::Net& f_net,
                          const nn::Net& g_net, const std::vector<ad::Var>& f_vars,
                          const std::vector<ad::Var>& g_vars,
                          const std::vector<ad::Var>& obs_vars, const MatrixXd& obs_tm,
                          int batch, const ElboOpts& opts, ElboParts* parts = nullptr);

/// Convenience single-batch evaluations (build a fresh tape internally).
double elbo_joint(const DBFModel& model, const MatrixXd& z, const MatrixXd& obs,
                  const ElboOpts& opts = {});
double elbo_linear(const LinearFilterSpec& spec, const ObservationModel& obs_model,
                   const nn::Net& f_net, const nn::Net& g_net, const MatrixXd& obs,
                   const ElboOpts& opts = {});

// ---------------------------------------------------------------------------
// Training loops
// ---------------------------------------------------------------------------

struct TrainOpts {
    double lr = 1e-3;
    int batch = 64;
    int steps = 1000;
    uint64_t seed = 0;
    int k_samples = 1;
    int log_every = 25;
    int freeze_g_steps = 0;  // staged schedule: G head frozen for this many steps
    int lr_decay_at = 0;     // 0 = constant learning rate
    double lr_decay_factor = 0.3;
    std::string checkpoint_dir;
    int threads = 1;
};

struct TrainResult {
    std::vector<double> loss_curve;  // one entry per step
    bool diverged = false;
    int steps_completed = 0;

    double moving_average(int window, int end_step) const;
};

/// Strategy 2: train dynamics, IOO, emission net and emission scales jointly
/// on paired (z, o) trajectories.
TrainResult train_joint(DBFModel& model, const TrajectoryBatch& data, const TrainOpts& opts);

/// Linear-dynamics case: train the IOO and any unknown observation-model
/// parameters from observations alone.
struct LinearModel {
    LinearFilterSpec spec;
    std::unique_ptr<nn::Net> f_net;
    std::unique_ptr<nn::Net> g_net;
    std::unique_ptr<ObservationModel> obs_model;
};

TrainResult train_linear(LinearModel& model, const TrajectoryBatch& data,
                         const TrainOpts& opts);

/// Strategy 1: pretrain the linear latent operator together with an encoder
/// and decoder on state-only data, by a multi-horizon prediction +
/// latent-consistency objective.
struct KoopmanOpts {
    int horizon = 8;
    double lr = 1e-3;
    int batch = 64;
    int steps = 1000;
    uint64_t seed = 0;
    int hidden = 100;
    int blocks = 4;
    bool train_encoder = true;
    bool train_decoder = true;
    bool train_dynamics = true;
};

struct KoopmanResult {
    BlockDynamics dynamics;
    std::unique_ptr<nn::Net> encoder;
    std::unique_ptr<nn::Net> decoder;
    std::vector<double> loss_curve;
};

/// encoder/decoder may be supplied (e.g. identity maps for diagnostics);
/// otherwise linear-block nets are created.
KoopmanResult koopman_pretrain(const TrajectoryBatch& z_data, int d_h, const KoopmanOpts& opts,
                               std::unique_ptr<nn::Net> encoder = nullptr,
                               std::unique_ptr<nn::Net> decoder = nullptr);

/// Gradient of build_elbo_joint w.r.t. every trainable parameter, for
/// verification against finite differences.
std::vector<MatrixXd> elbo_joint_gradients(const DBFModel& model, const MatrixXd& z,
                                           const MatrixXd& obs, const ElboOpts& opts,
                                           double* loss_out = nullptr);

} // namespace dbf::train

#endif
