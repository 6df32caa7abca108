#include "dbf/filters.hpp"

#include <Eigen/Eigenvalues>

namespace dbf {

Ensemble::Ensemble(MatrixXd m) : members(std::move(m)) {
    if (members.rows() < 2) throw ConfigError("Ensemble: need at least 2 members");
    if (!members.allFinite()) throw NumericalError("Ensemble: non-finite member");
}

MatrixXd Ensemble::anomalies() const {
    return members.rowwise() - members.colwise().mean();
}

MatrixXd Ensemble::covariance() const {
    MatrixXd a = anomalies();
    return a.transpose() * a / static_cast<double>(size() - 1);
}

ParticleSet::ParticleSet(MatrixXd p, VectorXd lw)
    : particles(std::move(p)), log_weights(std::move(lw)) {
    if (particles.rows() < 2) throw ConfigError("ParticleSet: need at least 2 particles");
    if (particles.rows() != log_weights.size())
        throw DimensionError("ParticleSet: weight count mismatch");
}

ParticleSet ParticleSet::uniform(MatrixXd p) {
    const Eigen::Index n = p.rows();
    return ParticleSet(std::move(p), VectorXd::Constant(n, -std::log(static_cast<double>(n))));
}

VectorXd ParticleSet::normalized_weights() const {
    const double m = log_weights.maxCoeff();
    if (!std::isfinite(m))
        throw NumericalError("particle collapse: all log-weights are -inf");
    VectorXd w = (log_weights.array() - m).exp();
    return w / w.sum();
}

VectorXd ParticleSet::mean() const {
    VectorXd w = normalized_weights();
    return particles.transpose() * w;
}

// ---------------------------------------------------------------------------
// Kalman filter
// ---------------------------------------------------------------------------

GaussianBelief kf_update(const GaussianBelief& pred, const LinearGaussianMap& obs,
                         const VectorXd& o) {
    if (obs.in_dim() != pred.dim() || o.size() != obs.out_dim())
        throw DimensionError("kf_update: dimension mismatch");
    const MatrixXd P = pred.dense_cov();
    const Eigen::Index d = P.rows();
    MatrixXd Lp = chol(P);
    MatrixXd p_inv = Lp.transpose().triangularView<Eigen::Upper>().solve(
        Lp.triangularView<Eigen::Lower>().solve(MatrixXd::Identity(d, d)));
    MatrixXd Lr = chol(obs.noise_cov);
    MatrixXd r_inv_h = Lr.transpose().triangularView<Eigen::Upper>().solve(
        Lr.triangularView<Eigen::Lower>().solve(obs.matrix));
    VectorXd r_inv_o = Lr.transpose().triangularView<Eigen::Upper>().solve(
        Lr.triangularView<Eigen::Lower>().solve(o));
    std::vector<InfoTerm> terms;
    terms.push_back({0.5 * (p_inv + p_inv.transpose()), p_inv * pred.mean()});
    MatrixXd hrh = obs.matrix.transpose() * r_inv_h;
    terms.push_back({0.5 * (hrh + hrh.transpose()), obs.matrix.transpose() * r_inv_o});
    return info_combine(terms);
}

GaussianBelief kf_update_gain(const GaussianBelief& pred, const LinearGaussianMap& obs,
                              const VectorXd& o) {
    const MatrixXd P = pred.dense_cov();
    const MatrixXd& H = obs.matrix;
    MatrixXd S = H * P * H.transpose() + obs.noise_cov;
    MatrixXd Ls = chol(0.5 * (S + S.transpose()));
    // K = P H^T S^-1 via two triangular solves
    MatrixXd K = Ls.transpose()
                     .triangularView<Eigen::Upper>()
                     .solve(Ls.triangularView<Eigen::Lower>().solve(H * P))
                     .transpose();
    VectorXd mean = pred.mean() + K * (o - H * pred.mean());
    MatrixXd ikh = MatrixXd::Identity(P.rows(), P.rows()) - K * H;
    MatrixXd cov = ikh * P * ikh.transpose() + K * obs.noise_cov * K.transpose();
    return GaussianBelief::dense(std::move(mean), std::move(cov));
}

GaussianBelief kf_step(const GaussianBelief& belief, const LinearGaussianMap& dyn,
                       const LinearGaussianMap& obs, const VectorXd& o) {
    return kf_update(gauss_pushforward(belief, dyn), obs, o);
}

// ---------------------------------------------------------------------------
// EnKF (stochastic, perturbed observations)
// ---------------------------------------------------------------------------

namespace {

MatrixXd propagate(const Ensemble& ens, const Simulator& dyn, Rng& rng) {
    MatrixXd out(ens.size(), ens.dim());
    for (int i = 0; i < ens.size(); ++i)
        out.row(i) = dyn(ens.members.row(i).transpose(), rng).transpose();
    return out;
}

void inflate_anomalies(MatrixXd& members, double inflation) {
    if (inflation == 1.0) return;
    Eigen::RowVectorXd mean = members.colwise().mean();
    members = (members.rowwise() - mean) * inflation;
    members.rowwise() += mean;
}

} // namespace

Ensemble enkf_step(const Ensemble& ens, const Simulator& dyn, const ObsOperator& h,
                   const MatrixXd& R, const VectorXd& o, Rng& rng, double inflation) {
    MatrixXd fc = propagate(ens, dyn, rng);
    inflate_anomalies(fc, inflation);
    const int m = static_cast<int>(fc.rows());
    const int q = static_cast<int>(o.size());

    MatrixXd Y(m, q);
    for (int i = 0; i < m; ++i) Y.row(i) = h(fc.row(i).transpose()).transpose();

    Eigen::RowVectorXd xbar = fc.colwise().mean();
    Eigen::RowVectorXd ybar = Y.colwise().mean();
    MatrixXd Xp = fc.rowwise() - xbar;
    MatrixXd Yp = Y.rowwise() - ybar;
    if (Xp.cwiseAbs().maxCoeff() == 0.0)
        throw NumericalError("enkf_step: zero ensemble spread, gain is undefined");

    const double nf = static_cast<double>(m - 1);
    MatrixXd c_xy = Xp.transpose() * Yp / nf;       // d x q
    MatrixXd c_yy = Yp.transpose() * Yp / nf + R;   // q x q
    MatrixXd Lc = chol(0.5 * (c_yy + c_yy.transpose()));
    // K = c_xy * c_yy^-1
    MatrixXd K = Lc.transpose()
                     .triangularView<Eigen::Upper>()
                     .solve(Lc.triangularView<Eigen::Lower>().solve(c_xy.transpose()))
                     .transpose();

    MatrixXd Lr = chol(R);
    MatrixXd updated = fc;
    for (int i = 0; i < m; ++i) {
        VectorXd perturbed = o + Lr * rng.normal_vec(q);
        updated.row(i) += (K * (perturbed - Y.row(i).transpose())).transpose();
    }
    return Ensemble(std::move(updated));
}

// ---------------------------------------------------------------------------
// ETKF (deterministic square-root transform in ensemble space)
// ---------------------------------------------------------------------------

Ensemble etkf_step(const Ensemble& ens, const Simulator& dyn, const ObsOperator& h,
                   const MatrixXd& R, const VectorXd& o, Rng& rng, double inflation) {
    MatrixXd fc = propagate(ens, dyn, rng);
    inflate_anomalies(fc, inflation);
    const int m = static_cast<int>(fc.rows());
    const int q = static_cast<int>(o.size());

    MatrixXd Y(m, q);
    for (int i = 0; i < m; ++i) Y.row(i) = h(fc.row(i).transpose()).transpose();

    Eigen::RowVectorXd xbar = fc.colwise().mean();
    Eigen::RowVectorXd ybar = Y.colwise().mean();
    MatrixXd Xp = fc.rowwise() - xbar;  // m x d
    MatrixXd Yp = Y.rowwise() - ybar;   // m x q
    if (Xp.cwiseAbs().maxCoeff() == 0.0)
        throw NumericalError("etkf_step: zero ensemble spread, transform is undefined");

    MatrixXd Lr = chol(R);
    MatrixXd YpRinv = Lr.transpose()
                          .triangularView<Eigen::Upper>()
                          .solve(Lr.triangularView<Eigen::Lower>().solve(Yp.transpose()))
                          .transpose();  // m x q, rows Yp_i^T R^-1

    const double nf = static_cast<double>(m - 1);
    MatrixXd C = YpRinv * Yp.transpose();  // m x m
    MatrixXd M = nf * MatrixXd::Identity(m, m) + C;
    Eigen::SelfAdjointEigenSolver<MatrixXd> es(0.5 * (M + M.transpose()));
    if (es.info() != Eigen::Success)
        throw NumericalError("etkf_step: eigendecomposition failed");
    VectorXd evals = es.eigenvalues();
    if (evals.minCoeff() <= 0.0)
        throw NotPositiveDefiniteError("etkf_step: transform matrix not positive definite", 0);

    // P_tilde = M^-1, W = sqrt((m-1) P_tilde), both from the same eigenbasis
    MatrixXd Pt = es.eigenvectors() * evals.cwiseInverse().asDiagonal() *
                  es.eigenvectors().transpose();
    MatrixXd W = es.eigenvectors() * (nf * evals.cwiseInverse()).cwiseSqrt().asDiagonal() *
                 es.eigenvectors().transpose();

    VectorXd wbar = Pt * (YpRinv * (o - ybar.transpose()));
    MatrixXd analysis(m, fc.cols());
    for (int i = 0; i < m; ++i)
        analysis.row(i) = xbar + (wbar + W.col(i)).transpose() * Xp;
    return Ensemble(std::move(analysis));
}

// ---------------------------------------------------------------------------
// Bootstrap particle filter
// ---------------------------------------------------------------------------

double effective_sample_size(const VectorXd& log_weights) {
    const double m = log_weights.maxCoeff();
    if (!std::isfinite(m)) return 0.0;
    VectorXd w = (log_weights.array() - m).exp();
    const double s = w.sum();
    return s * s / w.squaredNorm();
}

std::vector<int> systematic_resample_indices(const VectorXd& weights, int n, double u0) {
    std::vector<int> idx(n);
    double cum = 0.0;
    int i = -1;
    for (int j = 0; j < n; ++j) {
        const double target = (u0 + j) / n;
        while (cum < target && i + 1 < weights.size()) {
            ++i;
            cum += weights[i];
        }
        idx[j] = std::max(i, 0);
    }
    return idx;
}

ParticleSet pf_step(const ParticleSet& ps, const Simulator& dyn, const LogLikelihood& loglik,
                    const VectorXd& o, Rng& rng, double resample_threshold) {
    const int n = ps.size();
    MatrixXd prop(n, ps.particles.cols());
    for (int i = 0; i < n; ++i)
        prop.row(i) = dyn(ps.particles.row(i).transpose(), rng).transpose();

    VectorXd lw = ps.log_weights;
    for (int i = 0; i < n; ++i) lw[i] += loglik(o, prop.row(i).transpose());
    if (!std::isfinite(lw.maxCoeff()))
        throw NumericalError("particle collapse: all log-weights underflowed");

    ParticleSet out(std::move(prop), std::move(lw));
    const double ess = effective_sample_size(out.log_weights);
    if (ess < resample_threshold * n) {
        VectorXd w = out.normalized_weights();
        std::vector<int> idx = systematic_resample_indices(w, n, rng.uniform());
        MatrixXd resampled(n, out.particles.cols());
        for (int j = 0; j < n; ++j) resampled.row(j) = out.particles.row(idx[j]);
        out.particles = std::move(resampled);
        out.log_weights = VectorXd::Constant(n, -std::log(static_cast<double>(n)));
    }
    return out;
}

} // namespace dbf
