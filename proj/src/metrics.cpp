#include "dbf/metrics.hpp"

#include <algorithm>

namespace dbf {

double rmse_final_k(const MatrixXd& pred, const MatrixXd& truth, int k,
                    const std::vector<int>& dims, const std::vector<int>& angle_dims) {
    if (pred.rows() != truth.rows() || pred.cols() != truth.cols())
        throw DimensionError("rmse_final_k: prediction/truth shape mismatch");
    const int steps = static_cast<int>(pred.rows());
    if (steps < k) throw MetricError("rmse_final_k: need at least k steps");
    if (dims.empty()) throw MetricError("rmse_final_k: empty dimension list");
    auto is_angle = [&](int d) {
        return std::find(angle_dims.begin(), angle_dims.end(), d) != angle_dims.end();
    };
    double acc = 0.0;
    for (int t = steps - k; t < steps; ++t) {
        for (int d : dims) {
            const double diff = is_angle(d) ? angle_diff(pred(t, d), truth(t, d))
                                            : pred(t, d) - truth(t, d);
            acc += diff * diff;
        }
    }
    return std::sqrt(acc / (static_cast<double>(k) * dims.size()));
}

NormalizedErrorReport normalized_errors(const std::vector<MatrixXd>& samples_per_step,
                                        const MatrixXd& truth, const std::vector<int>& dims) {
    if (static_cast<Eigen::Index>(samples_per_step.size()) != truth.rows())
        throw DimensionError("normalized_errors: step count mismatch");
    NormalizedErrorReport rep;
    for (size_t t = 0; t < samples_per_step.size(); ++t) {
        const MatrixXd& s = samples_per_step[t];
        bool step_ok = true;
        std::vector<double> step_values;
        for (int d : dims) {
            const double mean = s.col(d).mean();
            const double var = (s.col(d).array() - mean).square().sum() /
                               static_cast<double>(s.rows() - 1);
            const double sd = std::sqrt(var);
            if (!(sd > 0.0)) {
                step_ok = false;
                break;
            }
            for (Eigen::Index i = 0; i < s.rows(); ++i)
                step_values.push_back((s(i, d) - truth(t, d)) / sd);
        }
        if (step_ok)
            rep.values.insert(rep.values.end(), step_values.begin(), step_values.end());
        else
            rep.skipped_steps.push_back(static_cast<int>(t));
    }
    return rep;
}

double normal_cdf(double x) { return 0.5 * std::erfc(-x / std::sqrt(2.0)); }

double jeffreys_from_binned(const std::vector<double>& bin_weights, double lo, double hi) {
    const int bins = static_cast<int>(bin_weights.size());
    if (bins < 2) throw MetricError("jeffreys: need at least 2 bins");
    const double w = (hi - lo) / bins;
    // unit-Gaussian mass per bin
    std::vector<double> q(bins);
    for (int k = 0; k < bins; ++k) q[k] = normal_cdf(lo + (k + 1) * w) - normal_cdf(lo + k * w);

    // restrict to occupied bins and renormalize both sides there
    double psum = 0.0, qsum = 0.0;
    int occupied = 0;
    for (int k = 0; k < bins; ++k) {
        if (bin_weights[k] > 0.0) {
            psum += bin_weights[k];
            qsum += q[k];
            ++occupied;
        }
    }
    if (occupied < 2) throw MetricError("jeffreys: fewer than 2 occupied bins");
    if (!(psum > 0.0)) throw MetricError("jeffreys: empty histogram");
    double kl_pq = 0.0, kl_qp = 0.0;
    for (int k = 0; k < bins; ++k) {
        if (bin_weights[k] <= 0.0) continue;
        const double p = bin_weights[k] / psum;
        const double qq = q[k] / qsum;
        kl_pq += p * std::log(p / qq);
        kl_qp += qq * std::log(qq / p);
    }
    return 0.5 * (kl_pq + kl_qp);
}

double jeffreys_vs_unit_gaussian(const std::vector<double>& values, int bins, double lo,
                                 double hi) {
    if (values.empty()) throw MetricError("jeffreys: empty value list");
    if (bins < 2) throw MetricError("jeffreys: need at least 2 bins");
    std::vector<double> counts(bins, 0.0);
    const double w = (hi - lo) / bins;
    for (double v : values) {
        if (v < lo || v >= hi) continue;
        int k = static_cast<int>((v - lo) / w);
        k = std::clamp(k, 0, bins - 1);
        counts[k] += 1.0;
    }
    return jeffreys_from_binned(counts, lo, hi);
}

} // namespace dbf
