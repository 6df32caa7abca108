#ifndef DBF_DBF_HPP
#define DBF_DBF_HPP

#include <limits>
#include <memory>
#include <optional>

#include "dbf/block_dynamics.hpp"
#include "dbf/gauss.hpp"
#include "dbf/nets.hpp"

namespace dbf {

// ---------------------------------------------------------------------------
// The deep Bayesian filter: an information-form Gaussian recursion whose
// measurement update comes from a learned inverse observation operator
// r(h|o) = N(f(o), G(o)) divided by a wide virtual prior N(m, V).
// ---------------------------------------------------------------------------

struct VirtualPrior {
    VectorXd m;
    VectorXd v_diag;

    static VirtualPrior standard(int d) {
        return {VectorXd::Zero(d), VectorXd::Constant(d, 1e8)};
    }
    /// Infinitely wide prior: its precision contribution is exactly zero.
    static VirtualPrior flat(int d) {
        return {VectorXd::Zero(d),
                VectorXd::Constant(d, std::numeric_limits<double>::infinity())};
    }
    VectorXd precision() const {
        return v_diag.unaryExpr([](double v) { return std::isinf(v) ? 0.0 : 1.0 / v; });
    }
};

struct IOOOutput {
    VectorXd f;
    VectorXd g_diag;
    /// Dense covariance for analytically derived operators; overrides g_diag
    /// when present.
    std::optional<MatrixXd> g_dense;
};

enum class EmissionFamily { Gaussian, VonMises };

/// Decoder from latent belief to physical variables: z ~ family(phi(h), scale)
/// per dimension. log_scale holds log sigma for Gaussian dims and log kappa
/// for von Mises dims.
struct EmissionModel {
    std::unique_ptr<nn::Net> net;
    std::vector<EmissionFamily> family;
    nn::Param log_scale;

    int z_dim() const { return static_cast<int>(family.size()); }
};

struct DBFModel {
    BlockDynamics dynamics;
    DiagonalNoise q;
    std::unique_ptr<nn::Net> f_net;
    std::unique_ptr<nn::Net> g_net;  // emits log G, exponentiated downstream
    EmissionModel emission;
    VirtualPrior vprior;
    double init_var = 100.0;
    bool block_mode = true;

    int d_h() const { return dynamics.dim(); }
    int obs_dim() const { return f_net->in_dim(); }
    GaussianBelief initial_belief() const {
        return GaussianBelief::isotropic(d_h(), init_var, block_mode);
    }
    IOOOutput ioo(const VectorXd& o) const;
    /// IOO for a whole sequence at once (rows = steps).
    std::pair<MatrixXd, MatrixXd> ioo_batch(const MatrixXd& obs) const;
};

// ---------------------------------------------------------------------------
// Recursion
// ---------------------------------------------------------------------------

GaussianBelief dbf_predict(const GaussianBelief& belief, const BlockDynamics& dyn,
                           const DiagonalNoise& q);
GaussianBelief dbf_predict(const GaussianBelief& belief, const LinearGaussianMap& dyn);

/// Information-form measurement update, Sigma^-1 = Sigma_pred^-1 + G^-1 - V^-1.
/// Throws "virtual prior dominates" when that sum is not positive definite.
GaussianBelief dbf_update(const GaussianBelief& pred, const IOOOutput& ioo,
                          const VirtualPrior& vp);

struct FilterResult {
    std::vector<GaussianBelief> filtered;
    std::vector<GaussianBelief> predicted;  // predicted[0] is the initial belief
};

/// Filter a T x d_o observation sequence with the learned model. The update
/// applies at every step including t = 1 (the initial belief is updated with
/// the first observation).
FilterResult dbf_filter(const DBFModel& model, const MatrixXd& obs);

/// Same recursion over arbitrary linear dynamics with an externally supplied
/// IOO sequence (one output per step).
FilterResult dbf_filter_linear(const GaussianBelief& init, const LinearGaussianMap& dyn,
                               const std::vector<IOOOutput>& ioos, const VirtualPrior& vp);

// ---------------------------------------------------------------------------
// Emission
// ---------------------------------------------------------------------------

/// log density of a von Mises distribution; kappa = 0 is the circular
/// uniform.
double vonmises_logpdf(double x, double mu, double kappa);

/// Best-Fisher rejection sampler.
double vonmises_sample(double mu, double kappa, Rng& rng);

/// n samples of z: h ~ belief, then z ~ emission(h) per dimension family.
MatrixXd emission_sample(const DBFModel& model, const GaussianBelief& belief, int n, Rng& rng);

/// Plug-in point estimate phi(mean).
VectorXd emission_mean(const DBFModel& model, const GaussianBelief& belief);

/// Point estimates for every filtered step (T x d_z).
MatrixXd emission_means(const DBFModel& model, const FilterResult& result);

/// Per-observation baseline: decode the IOO mean directly, no dynamics
/// fusion.
MatrixXd ioo_only_means(const DBFModel& model, const MatrixXd& obs);

// ---------------------------------------------------------------------------
// Checkpoints: manifest.json + weights.f64 (flat doubles in manifest order)
// ---------------------------------------------------------------------------

void save_model(const DBFModel& model, const std::string& dir, const nn::json& extra = {});
DBFModel load_model(const std::string& dir);

} // namespace dbf

#endif
