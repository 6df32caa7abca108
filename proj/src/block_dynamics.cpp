#include "dbf/block_dynamics.hpp"

#include <algorithm>
#include <sstream>

namespace dbf {

BlockDynamics::BlockDynamics(VectorXd r, VectorXd w) : rho(std::move(r)), omega(std::move(w)) {
    if (rho.size() != omega.size())
        throw DimensionError("BlockDynamics: rho and omega must have equal length");
    if (!rho.allFinite() || !omega.allFinite())
        throw NumericalError("BlockDynamics: parameters must be finite");
}

BlockDynamics BlockDynamics::random_init(int dim, Rng& rng) {
    if (dim % 2 != 0 || dim <= 0)
        throw ConfigError("BlockDynamics: latent dimension must be even and positive");
    VectorXd r(dim / 2), w(dim / 2);
    for (int i = 0; i < dim / 2; ++i) {
        r[i] = rng.uniform(0.0, 0.01);
        w[i] = rng.uniform(0.0, M_PI);
    }
    return BlockDynamics(std::move(r), std::move(w));
}

DiagonalNoise::DiagonalNoise(VectorXd lv) : log_variance(std::move(lv)) {
    if (!log_variance.allFinite())
        throw NumericalError("DiagonalNoise: log variances must be finite");
}

DiagonalNoise DiagonalNoise::constant(int dim, double log_var) {
    return DiagonalNoise(VectorXd::Constant(dim, log_var));
}

MatrixXd assemble(const BlockDynamics& b) {
    const int d = b.dim();
    MatrixXd m = MatrixXd::Zero(d, d);
    for (int i = 0; i < b.n_blocks(); ++i) m.block<2, 2>(2 * i, 2 * i) = b.block(i);
    return m;
}

VectorXd apply(const BlockDynamics& b, const VectorXd& h) {
    if (h.size() != b.dim())
        throw DimensionError("apply: vector length " + std::to_string(h.size()) +
                             " does not match dynamics dimension " + std::to_string(b.dim()));
    VectorXd out(h.size());
    for (int i = 0; i < b.n_blocks(); ++i) {
        double s = std::exp(b.rho[i]);
        double c = std::cos(b.omega[i]), sn = std::sin(b.omega[i]);
        double u = h[2 * i], v = h[2 * i + 1];
        out[2 * i] = s * (c * u - sn * v);
        out[2 * i + 1] = s * (sn * u + c * v);
    }
    return out;
}

VectorXd eig_magnitudes(const BlockDynamics& b) {
    VectorXd mags(b.dim());
    for (int i = 0; i < b.n_blocks(); ++i) {
        double m = std::exp(b.rho[i]);
        mags[2 * i] = m;
        mags[2 * i + 1] = m;
    }
    std::sort(mags.data(), mags.data() + mags.size(), std::greater<double>());
    return mags;
}

SpectrumReport spectrum_report(const BlockDynamics& b, int bins) {
    if (bins < 1) throw ConfigError("spectrum_report: bins must be >= 1");
    VectorXd mags = eig_magnitudes(b);
    double lo = mags.minCoeff(), hi = mags.maxCoeff();
    if (hi <= lo) {
        lo -= 0.5;
        hi += 0.5;
    }
    SpectrumReport rep;
    rep.max_abs_eig = mags.maxCoeff();
    rep.bin_left.resize(bins);
    rep.bin_right.resize(bins);
    rep.count.assign(bins, 0);
    const double w = (hi - lo) / bins;
    for (int k = 0; k < bins; ++k) {
        rep.bin_left[k] = lo + k * w;
        rep.bin_right[k] = lo + (k + 1) * w;
    }
    for (Eigen::Index i = 0; i < mags.size(); ++i) {
        int k = static_cast<int>((mags[i] - lo) / w);
        k = std::clamp(k, 0, bins - 1);
        ++rep.count[k];
    }
    return rep;
}

std::string SpectrumReport::to_csv() const {
    std::ostringstream os;
    os.precision(17);
    os << "bin_left,bin_right,count\n";
    for (size_t k = 0; k < count.size(); ++k)
        os << bin_left[k] << "," << bin_right[k] << "," << count[k] << "\n";
    os << "max_abs_eig," << max_abs_eig << ",\n";
    return os.str();
}

SpectrumReport SpectrumReport::from_csv(const std::string& text) {
    SpectrumReport rep;
    std::istringstream is(text);
    std::string line;
    std::getline(is, line); // header
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        std::istringstream ls(line);
        std::string a, bfield, c;
        std::getline(ls, a, ',');
        std::getline(ls, bfield, ',');
        std::getline(ls, c, ',');
        if (a == "max_abs_eig") {
            rep.max_abs_eig = std::stod(bfield);
        } else {
            rep.bin_left.push_back(std::stod(a));
            rep.bin_right.push_back(std::stod(bfield));
            rep.count.push_back(std::stoi(c));
        }
    }
    return rep;
}

} // namespace dbf
