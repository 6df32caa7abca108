#ifndef DBF_METRICS_HPP
#define DBF_METRICS_HPP

#include <vector>

#include "dbf/common.hpp"

namespace dbf {

/// Root mean square error over the last k steps restricted to `dims`.
/// Dimensions listed in angle_dims difference on the circle, so adding 2*pi
/// to a prediction changes nothing.
double rmse_final_k(const MatrixXd& pred, const MatrixXd& truth, int k,
                    const std::vector<int>& dims, const std::vector<int>& angle_dims = {});

struct NormalizedErrorReport {
    std::vector<double> values;       // pooled (sample - truth) / std
    std::vector<int> skipped_steps;   // steps with zero sample spread
};

/// Normalized errors epsilon = (z_sample - z_true) / std(z_sample), pooled
/// across steps and the designated dims. samples_per_step[t] is n x d.
NormalizedErrorReport normalized_errors(const std::vector<MatrixXd>& samples_per_step,
                                        const MatrixXd& truth, const std::vector<int>& dims);

/// Jeffreys divergence (KL[p||q] + KL[q||p]) / 2 between the histogram of
/// `values` and a unit Gaussian integrated over the same bins. Both
/// distributions are renormalized over the occupied bins.
double jeffreys_vs_unit_gaussian(const std::vector<double>& values, int bins, double lo = -5.0,
                                 double hi = 5.0);

/// Same, from pre-binned weights over [lo, hi] with equal-width bins.
double jeffreys_from_binned(const std::vector<double>& bin_weights, double lo, double hi);

/// Standard normal CDF.
double normal_cdf(double x);

} // namespace dbf

#endif
