#ifndef DBF_FILTERS_HPP
#define DBF_FILTERS_HPP

#include <functional>

#include "dbf/common.hpp"
#include "dbf/gauss.hpp"

namespace dbf {

// One assimilation interval of the state, including any process noise.
using Simulator = std::function<VectorXd(const VectorXd&, Rng&)>;
// Noiseless observation operator h(z).
using ObsOperator = std::function<VectorXd(const VectorXd&)>;
// log p(o | z)
using LogLikelihood = std::function<double(const VectorXd& o, const VectorXd& z)>;

struct Ensemble {
    MatrixXd members;  // n_ens x d

    Ensemble() = default;
    explicit Ensemble(MatrixXd m);
    int size() const { return static_cast<int>(members.rows()); }
    int dim() const { return static_cast<int>(members.cols()); }
    VectorXd mean() const { return members.colwise().mean(); }
    MatrixXd anomalies() const;  // members - mean, rows
    MatrixXd covariance() const; // sample covariance, 1/(n-1)
};

struct ParticleSet {
    MatrixXd particles;    // n_p x d
    VectorXd log_weights;  // unnormalized

    ParticleSet() = default;
    ParticleSet(MatrixXd p, VectorXd lw);
    static ParticleSet uniform(MatrixXd p);
    int size() const { return static_cast<int>(particles.rows()); }
    VectorXd normalized_weights() const;
    VectorXd mean() const;
};

// ---------------------------------------------------------------------------
// Exact Kalman filter
// ---------------------------------------------------------------------------

/// Information-form measurement update of a predicted belief.
GaussianBelief kf_update(const GaussianBelief& pred, const LinearGaussianMap& obs,
                         const VectorXd& o);

/// Gain-form update (Joseph-stabilized); algebraically equal to kf_update.
GaussianBelief kf_update_gain(const GaussianBelief& pred, const LinearGaussianMap& obs,
                              const VectorXd& o);

/// Predict through dyn, then information-form update with o.
GaussianBelief kf_step(const GaussianBelief& belief, const LinearGaussianMap& dyn,
                       const LinearGaussianMap& obs, const VectorXd& o);

// ---------------------------------------------------------------------------
// Ensemble filters
// ---------------------------------------------------------------------------

/// Stochastic (perturbed-observation) EnKF step. Nonlinear observation
/// operators enter through the ensemble cross-covariances. `inflation`
/// multiplies forecast anomalies (1 = none).
Ensemble enkf_step(const Ensemble& ens, const Simulator& dyn, const ObsOperator& h,
                   const MatrixXd& R, const VectorXd& o, Rng& rng, double inflation = 1.0);

/// Deterministic ensemble transform (square-root) step. The analysis mean
/// equals the ensemble Kalman analysis mean.
Ensemble etkf_step(const Ensemble& ens, const Simulator& dyn, const ObsOperator& h,
                   const MatrixXd& R, const VectorXd& o, Rng& rng, double inflation = 1.0);

// ---------------------------------------------------------------------------
// Bootstrap particle filter
// ---------------------------------------------------------------------------

double effective_sample_size(const VectorXd& log_weights);

/// Systematic resampling indices for normalized weights; u0 in [0,1).
std::vector<int> systematic_resample_indices(const VectorXd& weights, int n, double u0);

/// Propagate, reweight by the likelihood, and systematically resample when
/// ESS drops below resample_threshold * n_p. Throws NumericalError("particle
/// collapse ...") when every weight underflows.
ParticleSet pf_step(const ParticleSet& ps, const Simulator& dyn, const LogLikelihood& loglik,
                    const VectorXd& o, Rng& rng, double resample_threshold = 0.5);

} // namespace dbf

#endif
