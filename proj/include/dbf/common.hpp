#ifndef DBF_COMMON_HPP
#define DBF_COMMON_HPP

#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>
#include <cmath>

#include <Eigen/Dense>

namespace dbf {

using Eigen::MatrixXd;
using Eigen::VectorXd;
using Eigen::Matrix2d;
using Eigen::Vector2d;

// ---------------------------------------------------------------------------
// Error taxonomy. The CLI maps these onto exit codes (config 2, numerical 3,
// divergence 4).
// ---------------------------------------------------------------------------

class Error : public std::runtime_error {
public:
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

class ConfigError : public Error {
public:
    explicit ConfigError(const std::string& msg) : Error(msg) {}
};

class DimensionError : public Error {
public:
    explicit DimensionError(const std::string& msg) : Error(msg) {}
};

class NumericalError : public Error {
public:
    explicit NumericalError(const std::string& msg) : Error(msg) {}
};

/// Cholesky (or posterior-precision) failure; records the offending pivot.
class NotPositiveDefiniteError : public NumericalError {
public:
    NotPositiveDefiniteError(const std::string& msg, int pivot)
        : NumericalError(msg), pivot_index(pivot) {}
    int pivot_index;
};

class IntegrationError : public NumericalError {
public:
    IntegrationError(const std::string& msg, int substep)
        : NumericalError(msg), substep_index(substep) {}
    int substep_index;
};

class DivergenceError : public Error {
public:
    explicit DivergenceError(const std::string& msg) : Error(msg) {}
};

class MetricError : public Error {
public:
    explicit MetricError(const std::string& msg) : Error(msg) {}
};

// ---------------------------------------------------------------------------
// Deterministic RNG. Never a shared global: every stochastic operation takes
// an Rng (or a seed) explicitly, and substreams are derived by hashing a
// (seed, path...) tuple so trajectory i / step t always sees the same bits
// regardless of scheduling.
// ---------------------------------------------------------------------------

inline uint64_t splitmix64(uint64_t& state) {
    uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

class Rng {
public:
    explicit Rng(uint64_t seed) : state_(seed), have_spare_(false) {
        // burn a few outputs so small seeds decorrelate
        for (int i = 0; i < 4; ++i) splitmix64(state_);
    }

    /// Substream keyed by an arbitrary integer path, e.g. (seed, traj, t).
    static Rng derive(uint64_t seed, std::initializer_list<uint64_t> path) {
        uint64_t h = seed;
        splitmix64(h);
        for (uint64_t p : path) {
            h ^= p + 0x9e3779b97f4a7c15ULL + (h << 6) + (h >> 2);
            splitmix64(h);
        }
        return Rng(h);
    }

    uint64_t next_u64() { return splitmix64(state_); }

    /// Uniform in [0, 1).
    double uniform() {
        return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
    }

    double uniform(double a, double b) { return a + (b - a) * uniform(); }

    /// Standard normal via Box-Muller (pair cached).
    double normal() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        // u1 in (0,1] so the log is finite
        double u1 = (static_cast<double>(next_u64() >> 11) + 1.0) * 0x1.0p-53;
        double u2 = uniform();
        double r = std::sqrt(-2.0 * std::log(u1));
        double a = 2.0 * M_PI * u2;
        spare_ = r * std::sin(a);
        have_spare_ = true;
        return r * std::cos(a);
    }

    VectorXd normal_vec(Eigen::Index n) {
        VectorXd v(n);
        for (Eigen::Index i = 0; i < n; ++i) v[i] = normal();
        return v;
    }

    uint64_t state() const { return state_; }

private:
    uint64_t state_;
    bool have_spare_;
    double spare_ = 0.0;
};

/// Wrap an angle into (-pi, pi].
inline double wrap_angle(double a) {
    a = std::fmod(a, 2.0 * M_PI);
    if (a <= -M_PI) a += 2.0 * M_PI;
    if (a > M_PI) a -= 2.0 * M_PI;
    return a;
}

/// Difference x - y wrapped into (-pi, pi].
inline double angle_diff(double x, double y) { return wrap_angle(x - y); }

// Run fn(i) for i in [0, n) on `threads` workers. Results must be written to
// pre-sized slots indexed by i so the output is schedule-independent.
void parallel_for(int n, int threads, const std::function<void(int)>& fn);

} // namespace dbf

#endif
