#include "dbf/gauss.hpp"

#include <sstream>

namespace dbf {

namespace {

void check_symmetric(const MatrixXd& m, const char* what) {
    if (m.rows() != m.cols())
        throw DimensionError(std::string(what) + ": matrix is not square");
    double scale = std::max(1.0, m.cwiseAbs().maxCoeff());
    double asym = (m - m.transpose()).cwiseAbs().maxCoeff();
    if (asym > 1e-12 * scale)
        throw NumericalError(std::string(what) + ": matrix is not symmetric (max asymmetry " +
                             std::to_string(asym / scale) + " relative)");
}

MatrixXd symmetrize(const MatrixXd& m) { return 0.5 * (m + m.transpose()); }

} // namespace

// ---------------------------------------------------------------------------
// GaussianBelief
// ---------------------------------------------------------------------------

GaussianBelief GaussianBelief::dense(VectorXd mean, MatrixXd cov) {
    if (mean.size() != cov.rows())
        throw DimensionError("GaussianBelief: mean/cov dimension mismatch");
    check_symmetric(cov, "GaussianBelief");
    GaussianBelief g;
    g.mean_ = std::move(mean);
    g.cov_ = symmetrize(cov);
    g.block_mode_ = false;
    return g;
}

GaussianBelief GaussianBelief::blocks(VectorXd mean, std::vector<Matrix2d> blocks) {
    if (mean.size() != static_cast<Eigen::Index>(2 * blocks.size()))
        throw DimensionError("GaussianBelief: block mode requires even dimension matching the block list");
    GaussianBelief g;
    for (auto& b : blocks) {
        double scale = std::max(1.0, b.cwiseAbs().maxCoeff());
        if (std::abs(b(0, 1) - b(1, 0)) > 1e-12 * scale)
            throw NumericalError("GaussianBelief: covariance block is not symmetric");
        double off = 0.5 * (b(0, 1) + b(1, 0));
        b(0, 1) = b(1, 0) = off;
    }
    g.mean_ = std::move(mean);
    g.blocks_ = std::move(blocks);
    g.block_mode_ = true;
    return g;
}

GaussianBelief GaussianBelief::isotropic(int dim, double variance, bool block_mode) {
    VectorXd mean = VectorXd::Zero(dim);
    if (!block_mode) return dense(std::move(mean), variance * MatrixXd::Identity(dim, dim));
    if (dim % 2 != 0)
        throw DimensionError("GaussianBelief: block mode requires even dimension");
    std::vector<Matrix2d> bl(dim / 2, variance * Matrix2d::Identity());
    return blocks(std::move(mean), std::move(bl));
}

const std::vector<Matrix2d>& GaussianBelief::cov_blocks() const {
    if (!block_mode_) throw Error("GaussianBelief: not in block mode");
    return blocks_;
}

const MatrixXd& GaussianBelief::cov() const {
    if (block_mode_) throw Error("GaussianBelief: not in dense mode");
    return cov_;
}

MatrixXd GaussianBelief::dense_cov() const {
    if (!block_mode_) return cov_;
    return assemble_blocks2(blocks_);
}

GaussianBelief GaussianBelief::to_dense() const {
    if (!block_mode_) return *this;
    return dense(mean_, assemble_blocks2(blocks_));
}

// ---------------------------------------------------------------------------
// LinearGaussianMap
// ---------------------------------------------------------------------------

LinearGaussianMap::LinearGaussianMap(MatrixXd m, MatrixXd q)
    : matrix(std::move(m)), noise_cov(std::move(q)) {
    if (noise_cov.rows() != matrix.rows() || noise_cov.cols() != matrix.rows())
        throw DimensionError("LinearGaussianMap: noise_cov must be out_dim x out_dim");
    check_symmetric(noise_cov, "LinearGaussianMap");
    noise_cov = symmetrize(noise_cov);
}

// ---------------------------------------------------------------------------
// Cholesky
// ---------------------------------------------------------------------------

MatrixXd chol(const MatrixXd& m) {
    check_symmetric(m, "chol");
    const Eigen::Index n = m.rows();
    MatrixXd L = MatrixXd::Zero(n, n);
    for (Eigen::Index j = 0; j < n; ++j) {
        double d = m(j, j) - L.row(j).head(j).squaredNorm();
        if (!(d > 0.0)) {
            std::ostringstream os;
            os << "not positive definite: pivot " << j << " = " << d;
            throw NotPositiveDefiniteError(os.str(), static_cast<int>(j));
        }
        L(j, j) = std::sqrt(d);
        for (Eigen::Index i = j + 1; i < n; ++i) {
            double s = m(i, j) - L.row(i).head(j).dot(L.row(j).head(j));
            L(i, j) = s / L(j, j);
        }
    }
    return L;
}

Matrix2d chol2(const Matrix2d& m, int block_index) {
    Matrix2d L = Matrix2d::Zero();
    if (!(m(0, 0) > 0.0))
        throw NotPositiveDefiniteError(
            "not positive definite: pivot 0 in block " + std::to_string(block_index), 0);
    L(0, 0) = std::sqrt(m(0, 0));
    L(1, 0) = m(1, 0) / L(0, 0);
    double d = m(1, 1) - L(1, 0) * L(1, 0);
    if (!(d > 0.0))
        throw NotPositiveDefiniteError(
            "not positive definite: pivot 1 in block " + std::to_string(block_index), 1);
    L(1, 1) = std::sqrt(d);
    return L;
}

// ---------------------------------------------------------------------------
// Sampling
// ---------------------------------------------------------------------------

MatrixXd gauss_sample(const GaussianBelief& g, int n, Rng& rng) {
    if (n < 1) throw ConfigError("gauss_sample: n must be >= 1");
    const int d = g.dim();
    MatrixXd z(n, d);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < d; ++j) z(i, j) = rng.normal();
    MatrixXd out(n, d);
    if (g.is_block()) {
        const auto& blocks = g.cov_blocks();
        for (size_t b = 0; b < blocks.size(); ++b) {
            Matrix2d L = chol2(blocks[b], static_cast<int>(b));
            out.middleCols(2 * b, 2) = z.middleCols(2 * b, 2) * L.transpose();
        }
    } else {
        MatrixXd L = chol(g.cov());
        out = z * L.transpose();
    }
    out.rowwise() += g.mean().transpose();
    return out;
}

// ---------------------------------------------------------------------------
// Pushforward
// ---------------------------------------------------------------------------

bool is_block_diagonal2(const MatrixXd& m) {
    if (m.rows() != m.cols() || m.rows() % 2 != 0) return false;
    for (Eigen::Index i = 0; i < m.rows(); ++i)
        for (Eigen::Index j = 0; j < m.cols(); ++j)
            if ((i / 2) != (j / 2) && m(i, j) != 0.0) return false;
    return true;
}

bool is_diagonal(const MatrixXd& m) {
    if (m.rows() != m.cols()) return false;
    for (Eigen::Index i = 0; i < m.rows(); ++i)
        for (Eigen::Index j = 0; j < m.cols(); ++j)
            if (i != j && m(i, j) != 0.0) return false;
    return true;
}

std::vector<Matrix2d> extract_blocks2(const MatrixXd& m) {
    std::vector<Matrix2d> out(m.rows() / 2);
    for (size_t b = 0; b < out.size(); ++b) out[b] = m.block<2, 2>(2 * b, 2 * b);
    return out;
}

MatrixXd assemble_blocks2(const std::vector<Matrix2d>& blocks) {
    const Eigen::Index d = static_cast<Eigen::Index>(2 * blocks.size());
    MatrixXd m = MatrixXd::Zero(d, d);
    for (size_t b = 0; b < blocks.size(); ++b) m.block<2, 2>(2 * b, 2 * b) = blocks[b];
    return m;
}

GaussianBelief gauss_pushforward(const GaussianBelief& g, const LinearGaussianMap& map) {
    if (map.in_dim() != g.dim())
        throw DimensionError("gauss_pushforward: map expects dimension " +
                             std::to_string(map.in_dim()) + ", belief has " +
                             std::to_string(g.dim()));
    VectorXd mean = map.matrix * g.mean();
    const bool keeps_blocks = g.is_block() && map.out_dim() == map.in_dim() &&
                              is_block_diagonal2(map.matrix) && is_diagonal(map.noise_cov);
    if (keeps_blocks) {
        const auto& in = g.cov_blocks();
        std::vector<Matrix2d> out(in.size());
        for (size_t b = 0; b < in.size(); ++b) {
            Matrix2d A = map.matrix.block<2, 2>(2 * b, 2 * b);
            Matrix2d S = A * in[b] * A.transpose();
            S(0, 0) += map.noise_cov(2 * b, 2 * b);
            S(1, 1) += map.noise_cov(2 * b + 1, 2 * b + 1);
            double off = 0.5 * (S(0, 1) + S(1, 0));
            S(0, 1) = S(1, 0) = off;
            out[b] = S;
        }
        return GaussianBelief::blocks(std::move(mean), std::move(out));
    }
    MatrixXd cov = map.matrix * g.dense_cov() * map.matrix.transpose() + map.noise_cov;
    return GaussianBelief::dense(std::move(mean), std::move(cov));
}

// ---------------------------------------------------------------------------
// KL divergence
// ---------------------------------------------------------------------------

namespace {

// KL for a single pair of 2x2 covariance blocks + their mean slices.
double kl_block(const Vector2d& dmu, const Matrix2d& Sq, const Matrix2d& Sp, int bidx) {
    Matrix2d Lp = chol2(Sp, bidx);
    // trace(Sp^-1 Sq) = ||Lp^-1 Lq||_F^2
    Matrix2d Lq = chol2(Sq, bidx);
    Matrix2d M = Lp.triangularView<Eigen::Lower>().solve(Lq);
    double trace = M.squaredNorm();
    Vector2d w = Lp.triangularView<Eigen::Lower>().solve(dmu);
    double maha = w.squaredNorm();
    double logdet_p = 2.0 * (std::log(Lp(0, 0)) + std::log(Lp(1, 1)));
    double logdet_q = 2.0 * (std::log(Lq(0, 0)) + std::log(Lq(1, 1)));
    return 0.5 * (trace + maha - 2.0 + logdet_p - logdet_q);
}

} // namespace

double gauss_kl(const GaussianBelief& q, const GaussianBelief& p) {
    if (q.dim() != p.dim()) throw DimensionError("gauss_kl: dimension mismatch");
    if (q.is_block() && p.is_block()) {
        double kl = 0.0;
        const auto& bq = q.cov_blocks();
        const auto& bp = p.cov_blocks();
        for (size_t b = 0; b < bq.size(); ++b) {
            Vector2d dmu = p.mean().segment<2>(2 * b) - q.mean().segment<2>(2 * b);
            kl += kl_block(dmu, bq[b], bp[b], static_cast<int>(b));
        }
        return kl;
    }
    const int d = q.dim();
    MatrixXd Lp = chol(p.dense_cov());
    MatrixXd Lq = chol(q.dense_cov());
    MatrixXd M = Lp.triangularView<Eigen::Lower>().solve(Lq);
    double trace = M.squaredNorm();
    VectorXd w = Lp.triangularView<Eigen::Lower>().solve(p.mean() - q.mean());
    double maha = w.squaredNorm();
    double logdet_p = 2.0 * Lp.diagonal().array().log().sum();
    double logdet_q = 2.0 * Lq.diagonal().array().log().sum();
    return 0.5 * (trace + maha - d + logdet_p - logdet_q);
}

// ---------------------------------------------------------------------------
// Information-form combination
// ---------------------------------------------------------------------------

GaussianBelief info_combine(const std::vector<InfoTerm>& terms) {
    if (terms.empty()) throw ConfigError("info_combine: no terms");
    const Eigen::Index d = terms.front().precision.rows();
    MatrixXd lambda = MatrixXd::Zero(d, d);
    VectorXd eta = VectorXd::Zero(d);
    for (const auto& t : terms) {
        if (t.precision.rows() != d || t.precision.cols() != d || t.weighted_mean.size() != d)
            throw DimensionError("info_combine: inconsistent term dimensions");
        lambda += t.precision;
        eta += t.weighted_mean;
    }
    lambda = 0.5 * (lambda + lambda.transpose());
    MatrixXd L;
    try {
        L = chol(lambda);
    } catch (const NotPositiveDefiniteError& e) {
        throw NotPositiveDefiniteError(
            std::string("posterior precision not positive definite (") + e.what() + ")",
            e.pivot_index);
    }
    // mu = Lambda^-1 eta, Sigma = Lambda^-1, both via the factor
    VectorXd mu = L.transpose().triangularView<Eigen::Upper>().solve(
        L.triangularView<Eigen::Lower>().solve(eta));
    MatrixXd inv = L.transpose().triangularView<Eigen::Upper>().solve(
        L.triangularView<Eigen::Lower>().solve(MatrixXd::Identity(d, d)));
    return GaussianBelief::dense(std::move(mu), 0.5 * (inv + inv.transpose()));
}

GaussianBelief info_combine_blocks(const std::vector<BlockInfoTerm>& terms) {
    if (terms.empty()) throw ConfigError("info_combine_blocks: no terms");
    const size_t nb = terms.front().precision.size();
    const Eigen::Index d = static_cast<Eigen::Index>(2 * nb);
    std::vector<Matrix2d> lambda(nb, Matrix2d::Zero());
    VectorXd eta = VectorXd::Zero(d);
    for (const auto& t : terms) {
        if (t.precision.size() != nb || t.weighted_mean.size() != d)
            throw DimensionError("info_combine_blocks: inconsistent term dimensions");
        for (size_t b = 0; b < nb; ++b) lambda[b] += t.precision[b];
        eta += t.weighted_mean;
    }
    VectorXd mu(d);
    std::vector<Matrix2d> cov(nb);
    for (size_t b = 0; b < nb; ++b) {
        Matrix2d P = 0.5 * (lambda[b] + lambda[b].transpose());
        double det = P(0, 0) * P(1, 1) - P(0, 1) * P(1, 0);
        if (!(P(0, 0) > 0.0) || !(det > 0.0)) {
            double tr = P(0, 0) + P(1, 1);
            double mineig = 0.5 * tr - std::sqrt(std::max(0.0, 0.25 * tr * tr - det));
            throw NotPositiveDefiniteError(
                "posterior precision not positive definite in block " + std::to_string(b) +
                    " (min eigenvalue " + std::to_string(mineig) + ")",
                static_cast<int>(b));
        }
        Matrix2d inv;
        inv << P(1, 1), -P(0, 1), -P(1, 0), P(0, 0);
        inv /= det;
        cov[b] = 0.5 * (inv + inv.transpose());
        mu.segment<2>(2 * b) = cov[b] * eta.segment<2>(2 * b);
    }
    return GaussianBelief::blocks(std::move(mu), std::move(cov));
}

} // namespace dbf
