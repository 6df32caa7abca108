#ifndef DBF_BLOCK_DYNAMICS_HPP
#define DBF_BLOCK_DYNAMICS_HPP

#include <string>
#include <vector>

#include "dbf/common.hpp"

namespace dbf {

// ---------------------------------------------------------------------------
// Block-diagonal latent dynamics. Block i is exp(rho_i) times a rotation by
// omega_i, i.e. the matrix realization of a complex eigenvalue pair with
// log-magnitude rho_i and angle omega_i. Applying it costs O(d).
// ---------------------------------------------------------------------------
struct BlockDynamics {
    VectorXd rho;    // per-block log magnitude, length d/2
    VectorXd omega;  // per-block angle in radians, length d/2

    BlockDynamics() = default;
    BlockDynamics(VectorXd r, VectorXd w);

    int dim() const { return static_cast<int>(2 * rho.size()); }
    int n_blocks() const { return static_cast<int>(rho.size()); }

    Matrix2d block(int i) const {
        double s = std::exp(rho[i]);
        double c = std::cos(omega[i]), sn = std::sin(omega[i]);
        Matrix2d m;
        m << s * c, -s * sn, s * sn, s * c;
        return m;
    }

    /// Random initialization: rho ~ U[0, 0.01], omega ~ U[0, pi].
    static BlockDynamics random_init(int dim, Rng& rng);
};

/// Diagonal process noise, stored as log-variances.
struct DiagonalNoise {
    VectorXd log_variance;

    DiagonalNoise() = default;
    explicit DiagonalNoise(VectorXd lv);
    static DiagonalNoise constant(int dim, double log_var);

    int dim() const { return static_cast<int>(log_variance.size()); }
    VectorXd variances() const { return log_variance.array().exp(); }
    MatrixXd dense() const { return variances().asDiagonal(); }
};

/// Dense d x d matrix with the 2x2 blocks on the diagonal, zeros elsewhere.
MatrixXd assemble(const BlockDynamics& b);

/// Matrix-vector product with the assembled matrix, in O(d) arithmetic.
VectorXd apply(const BlockDynamics& b, const VectorXd& h);

/// |eigenvalue| for all d eigenvalues: exp(rho_i) twice each, sorted
/// descending.
VectorXd eig_magnitudes(const BlockDynamics& b);

struct SpectrumReport {
    std::vector<double> bin_left;
    std::vector<double> bin_right;
    std::vector<int> count;
    double max_abs_eig = 0.0;

    std::string to_csv() const;
    static SpectrumReport from_csv(const std::string& text);
};

/// Histogram of |eigenvalue| over `bins` equal-width bins spanning the
/// magnitude range (degenerate range widens to a unit-width bin).
SpectrumReport spectrum_report(const BlockDynamics& b, int bins);

} // namespace dbf

#endif
