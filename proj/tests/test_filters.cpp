#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "dbf/filters.hpp"
#include "test_util.hpp"

using namespace dbf;
using test::max_abs_diff;
using test::random_spd;
using test::random_vector;

TEST_CASE("kf_update: equal-precision average in one dimension") {
    GaussianBelief prior = GaussianBelief::dense(VectorXd::Zero(1), MatrixXd::Identity(1, 1));
    LinearGaussianMap obs(MatrixXd::Identity(1, 1), MatrixXd::Identity(1, 1));
    VectorXd o(1);
    o << 2.0;
    GaussianBelief post = kf_update(prior, obs, o);
    CHECK(post.mean()[0] == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(post.dense_cov()(0, 0) == doctest::Approx(0.5).epsilon(1e-12));
}

TEST_CASE("kf_update: an uninformative observation leaves the prediction") {
    Rng rng(3);
    GaussianBelief pred = GaussianBelief::dense(random_vector(3, rng), random_spd(3, rng));
    LinearGaussianMap obs(MatrixXd::Identity(3, 3), 1e12 * MatrixXd::Identity(3, 3));
    GaussianBelief post = kf_update(pred, obs, random_vector(3, rng, 5.0));
    CHECK(max_abs_diff(post.mean(), pred.mean()) < 1e-6);
    CHECK(max_abs_diff(post.dense_cov(), pred.dense_cov()) < 1e-6);
}

TEST_CASE("kf_step: information form equals gain form") {
    Rng rng(5);
    const int d = 4, q = 3;
    for (int trial = 0; trial < 30; ++trial) {
        GaussianBelief belief = GaussianBelief::dense(random_vector(d, rng), random_spd(d, rng));
        LinearGaussianMap dyn(test::random_matrix(d, d, rng, 0.5), random_spd(d, rng, 0.1));
        LinearGaussianMap obs(test::random_matrix(q, d, rng), random_spd(q, rng, 0.3));
        VectorXd o = random_vector(q, rng, 2.0);
        GaussianBelief info = kf_step(belief, dyn, obs, o);
        GaussianBelief gain = kf_update_gain(gauss_pushforward(belief, dyn), obs, o);
        CHECK(max_abs_diff(info.mean(), gain.mean()) < 1e-9);
        CHECK(max_abs_diff(info.dense_cov(), gain.dense_cov()) < 1e-9);
    }
}

namespace {

struct Lgssm1d {
    double a = 0.9, q = 0.04, h = 1.0, r = 0.25;
    Simulator sim() const {
        return [this](const VectorXd& z, Rng& rng) -> VectorXd {
            VectorXd out(1);
            out[0] = a * z[0] + std::sqrt(q) * rng.normal();
            return out;
        };
    }
    ObsOperator obs() const {
        return [this](const VectorXd& z) -> VectorXd {
            VectorXd o(1);
            o[0] = h * z[0];
            return o;
        };
    }
};

} // namespace

TEST_CASE("enkf_step: large-ensemble agreement with the exact KF") {
    Lgssm1d m;
    const int n_ens = 10000;
    Rng rng(7);

    // shared prior
    GaussianBelief prior = GaussianBelief::dense(VectorXd::Zero(1), MatrixXd::Identity(1, 1));
    MatrixXd members(n_ens, 1);
    for (int i = 0; i < n_ens; ++i) members(i, 0) = rng.normal();
    Ensemble ens(members);

    VectorXd o(1);
    o << 0.8;
    MatrixXd r_mat = m.r * MatrixXd::Identity(1, 1);
    Ensemble post = enkf_step(ens, m.sim(), m.obs(), r_mat, o, rng);

    LinearGaussianMap dyn((MatrixXd(1, 1) << m.a).finished(),
                          (MatrixXd(1, 1) << m.q).finished());
    LinearGaussianMap obs((MatrixXd(1, 1) << m.h).finished(),
                          (MatrixXd(1, 1) << m.r).finished());
    GaussianBelief kf = kf_step(prior, dyn, obs, o);

    const double post_sd = std::sqrt(kf.dense_cov()(0, 0));
    CHECK(std::abs(post.mean()[0] - kf.mean()[0]) < 5.0 / std::sqrt(n_ens) * post_sd * 3.0);
    CHECK(std::abs(post.covariance()(0, 0) - kf.dense_cov()(0, 0)) <
          8.0 * kf.dense_cov()(0, 0) / std::sqrt(n_ens));
}

TEST_CASE("enkf_step: R -> inf leaves the pure forecast, and is seed-deterministic") {
    Rng rng(9);
    MatrixXd members = test::random_matrix(64, 2, rng);
    Ensemble ens(members);
    Simulator forecast = [](const VectorXd& z, Rng&) -> VectorXd { return 1.1 * z; };
    ObsOperator ident = [](const VectorXd& z) { return z; };
    MatrixXd big_r = 1e12 * MatrixXd::Identity(2, 2);
    VectorXd o = VectorXd::Zero(2);

    Rng r1(11), r2(11);
    Ensemble a = enkf_step(ens, forecast, ident, big_r, o, r1);
    Ensemble b = enkf_step(ens, forecast, ident, big_r, o, r2);
    CHECK(max_abs_diff(a.members, b.members) == 0.0);
    CHECK(max_abs_diff(a.members, 1.1 * members) < 1e-4);
}

TEST_CASE("enkf_step: zero spread raises an error") {
    MatrixXd members = MatrixXd::Ones(8, 2);
    Ensemble ens(members);
    Simulator ident_sim = [](const VectorXd& z, Rng&) { return z; };
    ObsOperator ident = [](const VectorXd& z) { return z; };
    Rng rng(1);
    CHECK_THROWS_AS(
        enkf_step(ens, ident_sim, ident, MatrixXd::Identity(2, 2), VectorXd::Zero(2), rng),
        NumericalError);
}

TEST_CASE("etkf_step: large-ensemble agreement with the exact KF mean") {
    Lgssm1d m;
    const int n_ens = 1500;
    Rng rng(13);
    MatrixXd members(n_ens, 1);
    for (int i = 0; i < n_ens; ++i) members(i, 0) = rng.normal();
    Ensemble ens(members);
    VectorXd o(1);
    o << -0.3;
    Ensemble post = etkf_step(ens, m.sim(), m.obs(), m.r * MatrixXd::Identity(1, 1), o, rng);

    GaussianBelief prior = GaussianBelief::dense(VectorXd::Zero(1), MatrixXd::Identity(1, 1));
    LinearGaussianMap dyn((MatrixXd(1, 1) << m.a).finished(),
                          (MatrixXd(1, 1) << m.q).finished());
    LinearGaussianMap obs((MatrixXd(1, 1) << m.h).finished(),
                          (MatrixXd(1, 1) << m.r).finished());
    GaussianBelief kf = kf_step(prior, dyn, obs, o);
    CHECK(std::abs(post.mean()[0] - kf.mean()[0]) <
          5.0 / std::sqrt(n_ens) * std::sqrt(kf.dense_cov()(0, 0)) * 3.0);
}

TEST_CASE("etkf_step: zero innovation with tiny R leaves the mean") {
    Rng rng(17);
    MatrixXd members = test::random_matrix(32, 3, rng);
    Ensemble ens(members);
    Simulator ident_sim = [](const VectorXd& z, Rng&) { return z; };
    ObsOperator ident = [](const VectorXd& z) { return z; };
    VectorXd o = ens.mean();
    Ensemble post = etkf_step(ens, ident_sim, ident, 1e-6 * MatrixXd::Identity(3, 3), o, rng);
    CHECK(max_abs_diff(post.mean(), ens.mean()) < 1e-8);
}

TEST_CASE("etkf_step: posterior anomaly covariance matches the matrix identity") {
    // linear h: P_a = (P_f^-1 + H^T R^-1 H)^-1 must hold exactly in the
    // ensemble subspace
    Rng rng(19);
    const int d = 3, n_ens = 32;
    MatrixXd members = test::random_matrix(n_ens, d, rng);
    Ensemble ens(members);
    Simulator ident_sim = [](const VectorXd& z, Rng&) { return z; };
    MatrixXd h_mat = test::random_matrix(2, d, rng);
    ObsOperator h = [&](const VectorXd& z) -> VectorXd { return h_mat * z; };
    MatrixXd r = random_spd(2, rng, 0.5);
    VectorXd o = random_vector(2, rng);
    Ensemble post = etkf_step(ens, ident_sim, h, r, o, rng);

    MatrixXd pf = ens.covariance();
    MatrixXd expected =
        (pf.inverse() + h_mat.transpose() * r.inverse() * h_mat).inverse();
    CHECK(max_abs_diff(post.covariance(), expected) < 1e-8);
}

TEST_CASE("pf_step: constant likelihood keeps uniform weights, ESS identity") {
    Rng rng(23);
    MatrixXd particles = test::random_matrix(100, 2, rng);
    ParticleSet ps = ParticleSet::uniform(particles);
    CHECK(effective_sample_size(ps.log_weights) == doctest::Approx(100.0).epsilon(1e-12));

    Simulator ident_sim = [](const VectorXd& z, Rng&) { return z; };
    LogLikelihood flat = [](const VectorXd&, const VectorXd&) { return -1.0; };
    ParticleSet post = pf_step(ps, ident_sim, flat, VectorXd::Zero(2), rng);
    VectorXd w = post.normalized_weights();
    CHECK(max_abs_diff(w, VectorXd::Constant(100, 0.01)) < 1e-14);
}

TEST_CASE("pf_step: large-particle agreement with the exact KF") {
    Lgssm1d m;
    const int n_p = 100000;
    Rng rng(29);
    MatrixXd particles(n_p, 1);
    for (int i = 0; i < n_p; ++i) particles(i, 0) = rng.normal();
    ParticleSet ps = ParticleSet::uniform(particles);
    VectorXd o(1);
    o << 0.5;
    LogLikelihood loglik = [&](const VectorXd& obs, const VectorXd& z) {
        const double diff = obs[0] - m.h * z[0];
        return -0.5 * diff * diff / m.r;
    };
    ParticleSet post = pf_step(ps, m.sim(), loglik, o, rng);

    GaussianBelief prior = GaussianBelief::dense(VectorXd::Zero(1), MatrixXd::Identity(1, 1));
    LinearGaussianMap dyn((MatrixXd(1, 1) << m.a).finished(),
                          (MatrixXd(1, 1) << m.q).finished());
    LinearGaussianMap obs((MatrixXd(1, 1) << m.h).finished(),
                          (MatrixXd(1, 1) << m.r).finished());
    GaussianBelief kf = kf_step(prior, dyn, obs, o);
    CHECK(std::abs(post.mean()[0] - kf.mean()[0]) <
          5.0 * std::sqrt(kf.dense_cov()(0, 0)) / std::sqrt(n_p) * 3.0);
}

TEST_CASE("pf_step: total collapse raises the documented error") {
    Rng rng(31);
    MatrixXd particles = test::random_matrix(16, 1, rng);
    ParticleSet ps = ParticleSet::uniform(particles);
    Simulator ident_sim = [](const VectorXd& z, Rng&) { return z; };
    LogLikelihood impossible = [](const VectorXd&, const VectorXd&) {
        return -std::numeric_limits<double>::infinity();
    };
    try {
        pf_step(ps, ident_sim, impossible, VectorXd::Zero(1), rng);
        FAIL("expected particle collapse");
    } catch (const NumericalError& e) {
        CHECK(std::string(e.what()).find("particle collapse") != std::string::npos);
    }
}

TEST_CASE("systematic resampling preserves count and produces uniform weights") {
    Rng rng(37);
    MatrixXd particles = test::random_matrix(64, 1, rng);
    VectorXd lw(64);
    for (int i = 0; i < 64; ++i) lw[i] = (i < 4) ? 0.0 : -40.0;  // mass on 4 particles
    ParticleSet ps(particles, lw);
    Simulator ident_sim = [](const VectorXd& z, Rng&) { return z; };
    LogLikelihood flat = [](const VectorXd&, const VectorXd&) { return 0.0; };
    ParticleSet post = pf_step(ps, ident_sim, flat, VectorXd::Zero(1), rng);
    CHECK(post.size() == 64);
    CHECK(max_abs_diff(post.normalized_weights(), VectorXd::Constant(64, 1.0 / 64)) < 1e-14);

    // resampled particles are copies of the heavy ones
    for (int i = 0; i < 64; ++i) {
        bool found = false;
        for (int j = 0; j < 4; ++j)
            if (post.particles(i, 0) == particles(j, 0)) found = true;
        CHECK(found);
    }
}

TEST_CASE("systematic_resample_indices: deterministic partition") {
    VectorXd w(4);
    w << 0.5, 0.25, 0.125, 0.125;
    std::vector<int> idx = systematic_resample_indices(w, 8, 0.25);
    CHECK(static_cast<int>(idx.size()) == 8);
    int count0 = 0;
    for (int i : idx) count0 += (i == 0);
    CHECK(count0 == 4);  // half the slots land on the heavy particle
}
