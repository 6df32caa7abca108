#ifndef DBF_GAUSS_HPP
#define DBF_GAUSS_HPP

#include <optional>
#include <vector>

#include "dbf/common.hpp"

namespace dbf {

// ---------------------------------------------------------------------------
// GaussianBelief: mean + covariance, stored either dense or as d/2
// independent 2x2 diagonal blocks. Block storage is what keeps the filter
// recursion O(d) when the dynamics matrix is 2x2 block-diagonal and all the
// noise terms are diagonal; dense storage is the cross-check oracle.
// Beliefs are immutable values: operations return new beliefs.
// ---------------------------------------------------------------------------
class GaussianBelief {
public:
    GaussianBelief() = default;

    /// Dense covariance. Symmetry is required within 1e-12 relative
    /// tolerance; the stored matrix is re-symmetrized (M + M^T)/2.
    static GaussianBelief dense(VectorXd mean, MatrixXd cov);

    /// 2x2 block-diagonal covariance; requires even dimension.
    static GaussianBelief blocks(VectorXd mean, std::vector<Matrix2d> blocks);

    static GaussianBelief isotropic(int dim, double variance, bool block_mode);

    int dim() const { return static_cast<int>(mean_.size()); }
    bool is_block() const { return block_mode_; }

    const VectorXd& mean() const { return mean_; }
    const std::vector<Matrix2d>& cov_blocks() const;
    const MatrixXd& cov() const;

    /// Covariance as a dense matrix regardless of storage mode.
    MatrixXd dense_cov() const;
    GaussianBelief to_dense() const;

private:
    VectorXd mean_;
    MatrixXd cov_;                      // valid when !block_mode_
    std::vector<Matrix2d> blocks_;      // valid when block_mode_
    bool block_mode_ = false;
};

/// Linear-Gaussian transition/observation: x -> matrix * x + eps,
/// eps ~ N(0, noise_cov). noise_cov must be symmetric (PSD; a zero matrix is
/// accepted for noiseless maps).
struct LinearGaussianMap {
    MatrixXd matrix;
    MatrixXd noise_cov;

    LinearGaussianMap() = default;
    LinearGaussianMap(MatrixXd m, MatrixXd q);

    int out_dim() const { return static_cast<int>(matrix.rows()); }
    int in_dim() const { return static_cast<int>(matrix.cols()); }
};

// ---------------------------------------------------------------------------
// Operations
// ---------------------------------------------------------------------------

/// Lower-triangular Cholesky factor of a symmetric positive-definite matrix.
/// Throws NotPositiveDefiniteError naming the pivot index on failure.
MatrixXd chol(const MatrixXd& m);

/// Cholesky of a single symmetric 2x2 block; same error contract.
Matrix2d chol2(const Matrix2d& m, int block_index = 0);

/// n x d matrix of samples, deterministic for a given rng state.
MatrixXd gauss_sample(const GaussianBelief& g, int n, Rng& rng);

/// Push a belief through a linear-Gaussian map: mean -> A mu,
/// cov -> A S A^T + Q. Keeps block storage when A is 2x2 block-diagonal and
/// Q diagonal.
GaussianBelief gauss_pushforward(const GaussianBelief& g, const LinearGaussianMap& map);

/// KL(q || p) in closed form; >= 0, and 0 iff the parameters coincide.
double gauss_kl(const GaussianBelief& q, const GaussianBelief& p);

/// One additive term of an information-form product: a precision matrix and
/// a precision-weighted mean. Terms may be indefinite individually (the
/// virtual-prior correction enters with a negative sign); only the sum must
/// be positive definite.
struct InfoTerm {
    MatrixXd precision;
    VectorXd weighted_mean;
};

/// Combine information-form terms: Sigma^-1 = sum P_i, mu = Sigma * sum eta_i.
/// Throws NotPositiveDefiniteError("posterior precision not positive
/// definite...") when the summed precision is not PD.
GaussianBelief info_combine(const std::vector<InfoTerm>& terms);

/// Block variant: every term is 2x2 block-diagonal. Same contract.
struct BlockInfoTerm {
    std::vector<Matrix2d> precision;
    VectorXd weighted_mean;
};
GaussianBelief info_combine_blocks(const std::vector<BlockInfoTerm>& terms);

/// True when the matrix is exactly 2x2 block-diagonal (zeros elsewhere).
bool is_block_diagonal2(const MatrixXd& m);
bool is_diagonal(const MatrixXd& m);

/// Chop a dense 2x2-block-diagonal matrix into its blocks.
std::vector<Matrix2d> extract_blocks2(const MatrixXd& m);
MatrixXd assemble_blocks2(const std::vector<Matrix2d>& blocks);

} // namespace dbf

#endif
