#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "dbf/gauss.hpp"
#include "test_util.hpp"

using namespace dbf;
using test::max_abs_diff;
using test::random_spd;
using test::random_vector;

TEST_CASE("chol: identity and hand-expanded 2x2") {
    MatrixXd id = MatrixXd::Identity(3, 3);
    CHECK(max_abs_diff(chol(id), id) == 0.0);

    MatrixXd m(2, 2);
    m << 4, 2, 2, 3;
    MatrixXd expected(2, 2);
    expected << 2, 0, 1, std::sqrt(2.0);
    CHECK(max_abs_diff(chol(m), expected) < 1e-15);
}

TEST_CASE("chol: reconstructs a random SPD matrix") {
    Rng rng(42);
    MatrixXd m = random_spd(5, rng);
    MatrixXd l = chol(m);
    double rel = (l * l.transpose() - m).norm() / m.norm();
    CHECK(rel < 1e-10);
}

TEST_CASE("chol: names the failing pivot") {
    MatrixXd m(2, 2);
    m << 1, 2, 2, 1;  // indefinite
    try {
        chol(m);
        FAIL("expected NotPositiveDefiniteError");
    } catch (const NotPositiveDefiniteError& e) {
        CHECK(e.pivot_index == 1);
        CHECK(std::string(e.what()).find("not positive definite") != std::string::npos);
    }
}

TEST_CASE("gauss_sample: degenerate spread collapses to the mean") {
    Rng rng(1);
    VectorXd mu = random_vector(3, rng);
    GaussianBelief g = GaussianBelief::dense(mu, 1e-20 * MatrixXd::Identity(3, 3));
    MatrixXd s = gauss_sample(g, 4, rng);
    for (int i = 0; i < 4; ++i)
        CHECK((s.row(i).transpose() - mu).cwiseAbs().maxCoeff() < 1e-8);
}

TEST_CASE("gauss_sample: CLT bound on the sample mean") {
    Rng rng(7);
    const int n = 100000;
    VectorXd mu(2);
    mu << 1.5, -2.0;
    GaussianBelief g = GaussianBelief::dense(mu, MatrixXd::Identity(2, 2));
    MatrixXd s = gauss_sample(g, n, rng);
    for (int j = 0; j < 2; ++j)
        CHECK(std::abs(s.col(j).mean() - mu[j]) < 4.0 / std::sqrt(static_cast<double>(n)));
}

TEST_CASE("gauss_sample: deterministic under a fixed seed") {
    VectorXd mu = VectorXd::Zero(4);
    GaussianBelief g = GaussianBelief::dense(mu, 2.0 * MatrixXd::Identity(4, 4));
    Rng r1(99), r2(99);
    CHECK(max_abs_diff(gauss_sample(g, 10, r1), gauss_sample(g, 10, r2)) == 0.0);
}

TEST_CASE("gauss_pushforward: identity map and zero mean") {
    Rng rng(3);
    GaussianBelief g = GaussianBelief::dense(random_vector(3, rng), random_spd(3, rng));
    LinearGaussianMap id(MatrixXd::Identity(3, 3), MatrixXd::Zero(3, 3));
    GaussianBelief out = gauss_pushforward(g, id);
    CHECK(max_abs_diff(out.mean(), g.mean()) < 1e-14);
    CHECK(max_abs_diff(out.dense_cov(), g.dense_cov()) < 1e-14);

    GaussianBelief zg = GaussianBelief::dense(VectorXd::Zero(3), random_spd(3, rng));
    LinearGaussianMap any(test::random_matrix(3, 3, rng), MatrixXd::Zero(3, 3));
    CHECK(gauss_pushforward(zg, any).mean().cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("gauss_pushforward: Monte-Carlo oracle, 3 sigma agreement") {
    Rng rng(11);
    const int d = 4;
    GaussianBelief g = GaussianBelief::dense(random_vector(d, rng), random_spd(d, rng));
    MatrixXd a = test::random_matrix(d, d, rng);
    MatrixXd q = random_spd(d, rng, 0.2);
    LinearGaussianMap map(a, q);
    GaussianBelief out = gauss_pushforward(g, map);

    const int n = 1000000;
    Rng srng(5);
    MatrixXd zs = gauss_sample(g, n, srng);
    MatrixXd noise = gauss_sample(GaussianBelief::dense(VectorXd::Zero(d), q), n, srng);
    MatrixXd pushed = zs * a.transpose() + noise;
    VectorXd emp_mean = pushed.colwise().mean();
    MatrixXd centered = pushed.rowwise() - emp_mean.transpose();
    MatrixXd emp_cov = centered.transpose() * centered / (n - 1.0);

    // per-coordinate standard errors
    for (int j = 0; j < d; ++j) {
        double se = std::sqrt(out.dense_cov()(j, j) / n);
        CHECK(std::abs(emp_mean[j] - out.mean()[j]) < 3.5 * se);
    }
    // covariance entries fluctuate at O(sigma_i sigma_j / sqrt(n))
    for (int i = 0; i < d; ++i)
        for (int j = 0; j < d; ++j) {
            double scale = std::sqrt(out.dense_cov()(i, i) * out.dense_cov()(j, j));
            CHECK(std::abs(emp_cov(i, j) - out.dense_cov()(i, j)) < 4.0 * scale / std::sqrt(n) * 2.0);
        }
}

TEST_CASE("gauss_pushforward: block mode is preserved by block maps") {
    Rng rng(13);
    GaussianBelief g = GaussianBelief::blocks(
        random_vector(4, rng), {random_spd(2, rng), random_spd(2, rng)});
    MatrixXd a = MatrixXd::Zero(4, 4);
    a.block<2, 2>(0, 0) = test::random_matrix(2, 2, rng);
    a.block<2, 2>(2, 2) = test::random_matrix(2, 2, rng);
    VectorXd qd(4);
    qd << 0.1,

 0.2, 0.3, 0.4;
    LinearGaussianMap map(a, MatrixXd(qd.asDiagonal()));
    GaussianBelief out = gauss_pushforward(g, map);
    CHECK(out.is_block());
    GaussianBelief dense_out = gauss_pushforward(g.to_dense(), map);
    CHECK(max_abs_diff(out.dense_cov(), dense_out.dense_cov()) < 1e-12);
    CHECK(max_abs_diff(out.mean(), dense_out.mean()) < 1e-12);
}

TEST_CASE("gauss_kl: zero for identical, 0.5 for unit shift") {
    GaussianBelief a = GaussianBelief::dense(VectorXd::Zero(1), MatrixXd::Identity(1, 1));
    VectorXd mu1(1);
    mu1 << 1.0;
    GaussianBelief b = GaussianBelief::dense(mu1, MatrixXd::Identity(1, 1));
    CHECK(gauss_kl(a, a) == doctest::Approx(0.0).epsilon(1e-12));
    CHECK(gauss_kl(b, a) == doctest::Approx(0.5).epsilon(1e-12));
}

TEST_CASE("gauss_kl: Monte-Carlo oracle within 3 standard errors") {
    Rng rng(17);
    const int d = 3;
    GaussianBelief q = GaussianBelief::dense(random_vector(d, rng), random_spd(d, rng));
    GaussianBelief p = GaussianBelief::dense(random_vector(d, rng), random_spd(d, rng));
    const double analytic = gauss_kl(q, p);

    const int n = 100000;
    Rng srng(23);
    MatrixXd xs = gauss_sample(q, n, srng);
    VectorXd diffs(n);
    for (int i = 0; i < n; ++i) {
        VectorXd x = xs.row(i).transpose();
        diffs[i] = test::gauss_logpdf(x, q.mean(), q.dense_cov()) -
                   test::gauss_logpdf(x, p.mean(), p.dense_cov());
    }
    const double est = diffs.mean();
    const double se = std::sqrt((diffs.array() - est).square().sum() / (n - 1.0) / n);
    CHECK(std::abs(analytic - est) < 3.0 * se);
}

TEST_CASE("gauss_kl: nonnegative, zero iff equal (property)") {
    Rng rng(29);
    for (int trial = 0; trial < 50; ++trial) {
        const int d = 1 + static_cast<int>(rng.next_u64() % 5);
        GaussianBelief q = GaussianBelief::dense(random_vector(d, rng), random_spd(d, rng));
        GaussianBelief p = GaussianBelief::dense(random_vector(d, rng), random_spd(d, rng));
        CHECK(gauss_kl(q, p) >= 0.0);
        CHECK(gauss_kl(q, q) < 1e-10);
    }
}

TEST_CASE("gauss_pushforward: composition property") {
    Rng rng(31);
    const int d = 4;
    for (int trial = 0; trial < 20; ++trial) {
        GaussianBelief g = GaussianBelief::dense(random_vector(d, rng), random_spd(d, rng));
        MatrixXd a1 = test::random_matrix(d, d, rng), a2 = test::random_matrix(d, d, rng);
        MatrixXd q1 = random_spd(d, rng, 0.1), q2 = random_spd(d, rng, 0.1);
        GaussianBelief twice = gauss_pushforward(
            gauss_pushforward(g, LinearGaussianMap(a1, q1)), LinearGaussianMap(a2, q2));
        GaussianBelief once = gauss_pushforward(
            g, LinearGaussianMap(a2 * a1, a2 * q1 * a2.transpose() + q2));
        CHECK(max_abs_diff(twice.mean(), once.mean()) < 1e-10);
        CHECK(max_abs_diff(twice.dense_cov(), once.dense_cov()) < 1e-10);
    }
}

TEST_CASE("info_combine: single term round trip and precision doubling") {
    Rng rng(37);
    const int d = 3;
    MatrixXd p = random_spd(d, rng);
    VectorXd mu = random_vector(d, rng);
    GaussianBelief g = info_combine({{p, p * mu}});
    CHECK(max_abs_diff(g.mean(), mu) < 1e-10);
    CHECK(max_abs_diff(g.dense_cov().inverse(), p) < 1e-8);

    MatrixXd one = MatrixXd::Identity(1, 1);
    VectorXd zero1 = VectorXd::Zero(1);
    GaussianBelief two = info_combine({{one, zero1}, {one, zero1}});
    CHECK(two.dense_cov()(0, 0) == doctest::Approx(0.5).epsilon(1e-14));
}

TEST_CASE("info_combine: quadrature oracle for a product of three 1-dim Gaussians") {
    Rng rng(41);
    std::vector<InfoTerm> terms;
    std::vector<double> mus, vars;
    for (int i = 0; i < 3; ++i) {
        double var = 0.3 + rng.uniform();
        double mu = rng.normal();
        mus.push_back(mu);
        vars.push_back(var);
        MatrixXd p(1, 1);
        p << 1.0 / var;
        VectorXd wm(1);
        wm << mu / var;
        terms.push_back({p, wm});
    }
    GaussianBelief combined = info_combine(terms);

    // numeric integration of the unnormalized product on a fine grid
    const int n_grid = 20001;
    const double lo = -15.0, hi = 15.0;
    const double h = (hi - lo) / (n_grid - 1);
    double z = 0.0, m1 = 0.0, m2 = 0.0;
    for (int i = 0; i < n_grid; ++i) {
        const double x = lo + i * h;
        double logp = 0.0;
        for (int k = 0; k < 3; ++k)
            logp += -0.5 * (x - mus[k]) * (x - mus[k]) / vars[k] -
                    0.5 * std::log(2.0 * M_PI * vars[k]);
        const double w = std::exp(logp) * ((i == 0 || i == n_grid - 1) ? 0.5 : 1.0);
        z += w;
        m1 += w * x;
        m2 += w * x * x;
    }
    m1 /= z;
    m2 /= z;
    CHECK(combined.mean()[0] == doctest::Approx(m1).epsilon(1e-6));
    CHECK(combined.dense_cov()(0, 0) == doctest::Approx(m2 - m1 * m1).epsilon(1e-6));
}

TEST_CASE("info_combine: indefinite sum raises the documented error") {
    MatrixXd p(1, 1);
    p << 1.0;
    MatrixXd np(1, 1);
    np << -2.0;
    VectorXd z = VectorXd::Zero(1);
    try {
        info_combine({{p, z}, {np, z}});
        FAIL("expected NotPositiveDefiniteError");
    } catch (const NotPositiveDefiniteError& e) {
        CHECK(std::string(e.what()).find("posterior precision not positive definite") !=
              std::string::npos);
    }
}

TEST_CASE("info_combine: permutation invariance") {
    Rng rng(43);
    const int d = 2;
    std::vector<InfoTerm> terms;
    for (int i = 0; i < 4; ++i) {
        MatrixXd p = random_spd(d, rng);
        terms.push_back({p, p * random_vector(d, rng)});
    }
    GaussianBelief fwd = info_combine(terms);
    std::reverse(terms.begin(), terms.end());
    GaussianBelief rev = info_combine(terms);
    CHECK(max_abs_diff(fwd.mean(), rev.mean()) < 1e-12);
    CHECK(max_abs_diff(fwd.dense_cov(), rev.dense_cov()) < 1e-12);
}

TEST_CASE("block and dense modes agree on block-compatible inputs") {
    Rng rng(47);
    const int d = 6;
    std::vector<Matrix2d> blocks{random_spd(2, rng), random_spd(2, rng), random_spd(2, rng)};
    VectorXd mu = random_vector(d, rng);
    GaussianBelief gb = GaussianBelief::blocks(mu, blocks);
    GaussianBelief gd = gb.to_dense();

    SUBCASE("kl") {
        std::vector<Matrix2d> blocks2{random_spd(2, rng), random_spd(2, rng),
                                      random_spd(2, rng)};
        GaussianBelief pb = GaussianBelief::blocks(random_vector(d, rng), blocks2);
        CHECK(gauss_kl(gb, pb) == doctest::Approx(gauss_kl(gd, pb.to_dense())).epsilon(1e-12));
    }
    SUBCASE("sampling distribution matches (same seeds, tolerance)") {
        Rng r1(5), r2(5);
        MatrixXd sb = gauss_sample(gb, 100, r1);
        MatrixXd sd = gauss_sample(gd, 100, r2);
        CHECK(max_abs_diff(sb, sd) < 1e-12);
    }
    SUBCASE("info_combine") {
        std::vector<BlockInfoTerm> bterms;
        std::vector<InfoTerm> dterms;
        for (int k = 0; k < 2; ++k) {
            std::vector<Matrix2d> pb{random_spd(2, rng), random_spd(2, rng),
                                     random_spd(2, rng)};
            VectorXd wm = random_vector(d, rng);
            bterms.push_back({pb, wm});
            dterms.push_back({assemble_blocks2(pb), wm});
        }
        GaussianBelief rb = info_combine_blocks(bterms);
        GaussianBelief rd = info_combine(dterms);
        CHECK(rb.is_block());
        CHECK(max_abs_diff(rb.mean(), rd.mean()) < 1e-12);
        CHECK(max_abs_diff(rb.dense_cov(), rd.dense_cov()) < 1e-12);
    }
}

TEST_CASE("asymmetric covariance is rejected") {
    MatrixXd bad(2, 2);
    bad << 1.0, 0.5, 0.2, 1.0;
    CHECK_THROWS_AS(GaussianBelief::dense(VectorXd::Zero(2), bad), NumericalError);
}
