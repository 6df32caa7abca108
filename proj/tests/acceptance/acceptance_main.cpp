// Acceptance suite: one criterion per invocation (argv[1] in 1..10), each
// printing a PASS/FAIL line with the measured numbers. Exit code 0 on pass.
//
// The slow criteria (6-8) drive full experiment configurations; 9 consumes
// the artifacts of 8 (and reproduces them when run standalone).

#include <chrono>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <numeric>
#include <sstream>

#include "dbf/dbf_train.hpp"
#include "dbf/experiment.hpp"
#include "dbf/filters.hpp"
#include "dbf/metrics.hpp"

#include "acceptance.hpp"

using namespace dbf;

namespace dbf_acceptance {

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
    return std::chrono::duration<double>(Clock::now() - t0).count();
}

MatrixXd random_matrix(int r, int c, Rng& rng, double s = 1.0) {
    MatrixXd m(r, c);
    for (int i = 0; i < r; ++i)
        for (int j = 0; j < c; ++j) m(i, j) = s * rng.normal();
    return m;
}

MatrixXd random_spd(int n, Rng& rng, double ridge = 0.5) {
    MatrixXd a = random_matrix(n, n, rng);
    return a * a.transpose() / n + ridge * MatrixXd::Identity(n, n);
}

double max_abs(const MatrixXd& m) { return m.cwiseAbs().maxCoeff(); }

// Dormand-Prince RK45 with adaptive steps; the independent integrator oracle.
VectorXd rk45_reference(const std::function<VectorXd(const VectorXd&)>& f, VectorXd y,
                        double t_end, double tol) {
    double t = 0.0, h = t_end / 100.0;
    while (t < t_end) {
        if (t + h > t_end) h = t_end - t;
        VectorXd k1 = f(y);
        VectorXd k2 = f(y + h * (1.0 / 5.0) * k1);
        VectorXd k3 = f(y + h * (3.0 / 40.0 * k1 + 9.0 / 40.0 * k2));
        VectorXd k4 = f(y + h * (44.0 / 45.0 * k1 - 56.0 / 15.0 * k2 + 32.0 / 9.0 * k3));
        VectorXd k5 = f(y + h * (19372.0 / 6561.0 * k1 - 25360.0 / 2187.0 * k2 +
                                 64448.0 / 6561.0 * k3 - 212.0 / 729.0 * k4));
        VectorXd k6 = f(y + h * (9017.0 / 3168.0 * k1 - 355.0 / 33.0 * k2 +
                                 46732.0 / 5247.0 * k3 + 49.0 / 176.0 * k4 -
                                 5103.0 / 18656.0 * k5));
        VectorXd y5 = y + h * (35.0 / 384.0 * k1 + 500.0 / 1113.0 * k3 + 125.0 / 192.0 * k4 -
                               2187.0 / 6784.0 * k5 + 11.0 / 84.0 * k6);
        VectorXd k7 = f(y5);
        VectorXd y4 = y + h * (5179.0 / 57600.0 * k1 + 7571.0 / 16695.0 * k3 +
                               393.0 / 640.0 * k4 - 92097.0 / 339200.0 * k5 +
                               187.0 / 2100.0 * k6 + 1.0 / 40.0 * k7);
        const double err = (y5 - y4).cwiseAbs().maxCoeff();
        if (err < tol || h < 1e-12) {
            t += h;
            y = y5;
        }
        const double scale = err > 0.0 ? 0.9 * std::pow(tol / err, 0.2) : 2.0;
        h *= std::clamp(scale, 0.2, 5.0);
    }
    return y;
}

} // namespace

// -----------------------------------------------------------------------
// 1. LGSSM equivalence with the exact Kalman filter
// -----------------------------------------------------------------------
Outcome criterion1() {
    Outcome out;
    const auto t0 = Clock::now();
    Rng rng(20260801);
    double worst = 0.0;
    for (int sys = 0; sys < 50; ++sys) {
        const int d = 2 + static_cast<int>(rng.next_u64() % 7);
        MatrixXd a = random_matrix(d, d, rng);
        a *= 0.95 / std::max(1.0, a.cwiseAbs().rowwise().sum().maxCoeff());
        MatrixXd q = random_spd(d, rng, 0.2);
        MatrixXd h = random_matrix(d, d, rng) + 2.5 * MatrixXd::Identity(d, d);
        MatrixXd r = random_spd(d, rng, 0.3);
        LinearGaussianMap dyn(a, q), obs(h, r);
        MatrixXd h_inv = h.inverse();
        MatrixXd g_dense = h_inv * r * h_inv.transpose();

        const int steps = 100;
        MatrixXd os = random_matrix(steps, d, rng, 2.0);
        std::vector<IOOOutput> ioos(steps);
        for (int t = 0; t < steps; ++t) {
            ioos[t].f = h_inv * os.row(t).transpose();
            ioos[t].g_diag = VectorXd::Ones(d);
            ioos[t].g_dense = 0.5 * (g_dense + g_dense.transpose());
        }
        GaussianBelief init = GaussianBelief::isotropic(d, 100.0, false);
        FilterResult run = dbf_filter_linear(init, dyn, ioos, VirtualPrior::flat(d));

        GaussianBelief kf = init;
        for (int t = 0; t < steps; ++t) {
            if (t > 0) kf = gauss_pushforward(kf, dyn);
            kf = kf_update(kf, obs, os.row(t).transpose());
            worst = std::max(worst, max_abs(run.filtered[t].mean() - kf.mean()));
            worst = std::max(worst, max_abs(run.filtered[t].dense_cov() - kf.dense_cov()));
        }
    }
    const double secs = seconds_since(t0);
    out.detail << "50 systems, T=100, worst |diff| " << worst << ", " << secs << " s";
    out.require(worst < 1e-8, "max-abs error exceeds 1e-8");
    out.require(secs < 10.0, "runtime over 10 s");
    return out;
}

// -----------------------------------------------------------------------
// 2. Block-mode correctness and O(d_h) per-step cost
// -----------------------------------------------------------------------
Outcome criterion2() {
    Outcome out;
    Rng rng(22);
    double worst = 0.0;
    for (int cfg = 0; cfg < 20; ++cfg) {
        const int d_h = 4 + 2 * static_cast<int>(rng.next_u64() % 3);
        const int d_o = 2 + static_cast<int>(rng.next_u64() % 3);
        DBFModel model;
        model.dynamics = BlockDynamics::random_init(d_h, rng);
        model.dynamics.rho = VectorXd::Zero(d_h / 2).unaryExpr(
            [&](double) { return 0.2 * rng.normal(); });
        model.q = DiagonalNoise::constant(d_h, -5.0);
        model.f_net = std::make_unique<nn::LinearBlockNet>(d_o, 16, d_h, 3, rng);
        model.g_net = std::make_unique<nn::LinearBlockNet>(d_o, 16, d_h, 3, rng);
        model.emission.net = std::make_unique<nn::LinearBlockNet>(d_h, 16, 2, 3, rng);
        model.emission.family = {EmissionFamily::Gaussian, EmissionFamily::Gaussian};
        model.emission.log_scale = {"log_scale", MatrixXd::Zero(1, 2)};
        model.vprior = VirtualPrior::standard(d_h);

        MatrixXd obs = random_matrix(40, d_o, rng);
        model.block_mode = true;
        FilterResult fb = dbf_filter(model, obs);
        model.block_mode = false;
        FilterResult fd = dbf_filter(model, obs);
        for (int t = 0; t < 40; ++t) {
            worst = std::max(worst, max_abs(fb.filtered[t].mean() - fd.filtered[t].mean()));
            worst = std::max(worst,
                             max_abs(fb.filtered[t].dense_cov() - fd.filtered[t].dense_cov()));
        }
    }
    out.detail << "20 configs block-vs-dense worst |diff| " << worst;
    out.require(worst < 1e-10, "block/dense disagreement over 1e-10");

    // per-step cost scaling of the block recursion
    std::vector<int> dims{20, 80, 200};
    std::vector<double> per_step(dims.size());
    for (size_t i = 0; i < dims.size(); ++i) {
        const int d = dims[i];
        BlockDynamics dyn = BlockDynamics::random_init(d, rng);
        DiagonalNoise q = DiagonalNoise::constant(d, -6.0);
        VirtualPrior vp = VirtualPrior::standard(d);
        IOOOutput ioo;
        ioo.f = VectorXd::Zero(d);
        ioo.g_diag = VectorXd::Ones(d);
        GaussianBelief belief = GaussianBelief::isotropic(d, 100.0, true);
        // warm up, then measure enough sweeps for a stable clock reading
        const int sweeps = 40000000 / (d * 100);
        const auto t0 = Clock::now();
        for (int s = 0; s < sweeps; ++s) {
            GaussianBelief pred = dbf_predict(belief, dyn, q);
            belief = dbf_update(pred, ioo, vp);
        }
        per_step[i] = seconds_since(t0) / sweeps;
        out.detail << " | d_h=" << d << ": " << per_step[i] * 1e6 << " us/step";
    }
    for (size_t i = 1; i < dims.size(); ++i) {
        const double ratio = per_step[i] / per_step[i - 1];
        const double dims_ratio = static_cast<double>(dims[i]) / dims[i - 1];
        out.require(ratio <= 2.0 * dims_ratio,
                    "cost ratio " + std::to_string(ratio) + " over 2x dimension ratio");
    }
    out.require(per_step.back() / per_step.front() <= 2.0 * (200.0 / 20.0),
                "end-to-end cost growth exceeds 2x linear");
    return out;
}

// -----------------------------------------------------------------------
// 3. Gradient integrity: networks and both ELBO objectives vs central FD
// -----------------------------------------------------------------------
namespace fd {

// evaluate <grad, dir> vs central differences for a generic builder. The
// step is adapted per direction: a kink of a piecewise-linear activation can
// sit inside one bracket, so a direction passes if any step in the bracket
// agrees.
double worst_direction_error(
    const std::function<double(const std::vector<MatrixXd>&)>& eval,
    const std::vector<MatrixXd>& at, const std::vector<MatrixXd>& grads, int n_dirs,
    uint64_t seed) {
    Rng rng(seed);
    double worst = 0.0;
    for (int d = 0; d < n_dirs; ++d) {
        std::vector<MatrixXd> dir;
        for (const auto& m : at)
            dir.push_back(random_matrix(static_cast<int>(m.rows()),
                                        static_cast<int>(m.cols()), rng));
        double best = std::numeric_limits<double>::infinity();
        for (double h : {1e-5, 1e-6, 3e-7}) {
            best = std::min(best, ad::fd_relative_error(eval, at, grads, dir, h));
            if (best < 1e-5) break;
        }
        worst = std::max(worst, best);
    }
    return worst;
}

double check_net(const nn::Net& net, int batch, uint64_t seed) {
    Rng rng(seed);
    MatrixXd x = random_matrix(batch, net.in_dim(), rng);
    MatrixXd proj = random_matrix(net.out_dim(), 1, rng);
    std::vector<MatrixXd> at;
    for (const auto& p : net.params()) at.push_back(p.value);
    auto eval = [&](const std::vector<MatrixXd>& params) {
        ad::Tape t;
        std::vector<ad::Var> pv;
        for (const auto& m : params) pv.push_back(t.leaf(m, false));
        ad::Var y = net.forward_tape(t, t.constant(x), pv);
        return t.val(t.sum(t.matmul(y, t.constant(proj))))(0, 0);
    };
    ad::Tape t;
    std::vector<ad::Var> pv = net.push_params(t, true);
    ad::Var y = net.forward_tape(t, t.constant(x), pv);
    ad::Var loss = t.sum(t.matmul(y, t.constant(proj)));
    t.backward(loss);
    std::vector<MatrixXd> grads;
    for (ad::Var v : pv) grads.push_back(t.grad(v));
    return worst_direction_error(eval, at, grads, 20, seed + 1);
}

} // namespace fd

Outcome criterion3() {
    Outcome out;
    Rng rng(33);

    nn::LinearBlockNet ioo_shape(4, 100, 20, 10, rng);
    const double e1 = fd::check_net(ioo_shape, 3, 101);
    out.detail << "linear-block(4->100x10->20) " << e1;
    out.require(e1 < 1e-4, "linear block net FD error");

    nn::LinearBlockNet emission_shape(20, 100, 4, 10, rng);
    const double e2 = fd::check_net(emission_shape, 3, 102);
    out.detail << " | emission(20->100x10->4) " << e2;
    out.require(e2 < 1e-4, "emission net FD error");

    nn::CircularConvNet conv_shape(10, 20, 80, 10, rng);
    const double e3 = fd::check_net(conv_shape, 2, 103);
    out.detail << " | circular-conv(10,20ch,x10->80) " << e3;
    out.require(e3 < 1e-4, "conv net FD error");

    nn::DenseNet dense(3, 2, rng);
    const double e4 = fd::check_net(dense, 4, 104);
    out.detail << " | dense " << e4;
    out.require(e4 < 1e-4, "dense net FD error");

    // joint ELBO on a d_h=4, T=3 instance with a von Mises dimension
    {
        DBFModel model;
        model.dynamics = BlockDynamics::random_init(4, rng);
        model.q = DiagonalNoise::constant(4, -6.0);
        model.f_net = std::make_unique<nn::LinearBlockNet>(3, 12, 4, 3, rng);
        model.g_net = std::make_unique<nn::LinearBlockNet>(3, 12, 4, 3, rng);
        model.emission.net = std::make_unique<nn::LinearBlockNet>(4, 12, 2, 3, rng);
        model.emission.family = {EmissionFamily::VonMises, EmissionFamily::Gaussian};
        MatrixXd ls(1, 2);
        ls << 2.0, 0.0;
        model.emission.log_scale = {"log_scale", ls};
        model.vprior = VirtualPrior::standard(4);
        MatrixXd obs = random_matrix(3, 3, rng);
        MatrixXd z = random_matrix(3, 2, rng);
        train::ElboOpts opts;
        opts.noise_seed = 2024;

        std::vector<MatrixXd> grads = train::elbo_joint_gradients(model, z, obs, opts);
        std::vector<MatrixXd> at{model.dynamics.rho.transpose(),
                                 model.dynamics.omega.transpose(),
                                 model.emission.log_scale.value};
        for (const auto& p : model.f_net->params()) at.push_back(p.value);
        for (const auto& p : model.g_net->params()) at.push_back(p.value);
        for (const auto& p : model.emission.net->params()) at.push_back(p.value);
        auto eval = [&](const std::vector<MatrixXd>& params) {
            size_t i = 0;
            DBFModel m2;
            m2.dynamics = BlockDynamics(params[0].row(0).transpose(),
                                        params[1].row(0).transpose());
            i = 3;
            Rng tmp(0);
            m2.q = model.q;
            m2.f_net = nn::make_net(model.f_net->architecture(), tmp);
            m2.g_net = nn::make_net(model.g_net->architecture(), tmp);
            m2.emission.net = nn::make_net(model.emission.net->architecture(), tmp);
            for (auto& p : m2.f_net->params()) p.value = params[i++];
            for (auto& p : m2.g_net->params()) p.value = params[i++];
            for (auto& p : m2.emission.net->params()) p.value = params[i++];
            m2.emission.family = model.emission.family;
            m2.emission.log_scale = {"log_scale", params[2]};
            m2.vprior = model.vprior;
            return train::elbo_joint(m2, z, obs, opts);
        };
        const double e5 = fd::worst_direction_error(eval, at, grads, 20, 105);
        out.detail << " | elbo_joint " << e5;
        out.require(e5 < 1e-4, "elbo_joint FD error");
    }

    // linear ELBO through the bouncing-patch observation model
    {
        BouncePatchConfig cfg;
        cfg.frame = 9;
        cfg.patch = 3;
        cfg.sigma = 0.1;
        cfg.patches = {MatrixXd::Ones(3, 3)};
        train::LinearFilterSpec spec;
        spec.dyn = constant_velocity_map(1.0, 1, 1e-4);
        spec.init_mean = VectorXd::Zero(4);
        spec.init_cov = 9.0 * MatrixXd::Identity(4, 4);
        spec.vprior = VirtualPrior::standard(4);
        nn::LinearBlockNet f_net(cfg.obs_dim(), 16, 4, 3, rng);
        nn::LinearBlockNet g_net(cfg.obs_dim(), 16, 4, 3, rng);
        train::BouncePatchObservation obs_model(cfg, 0.01, rng, true);

        auto env = make_bounce_env(cfg);
        TrajectoryBatch batch = generate(*env, 3, 1, 9);
        MatrixXd obs = batch.observations;

        train::ElboOpts opts;
        opts.noise_seed = 77;
        std::vector<MatrixXd> at;
        for (const auto& p : f_net.params()) at.push_back(p.value);
        for (const auto& p : g_net.params()) at.push_back(p.value);
        for (const auto& p : obs_model.params()) at.push_back(p.value);

        auto eval_with = [&](const std::vector<MatrixXd>& params) {
            size_t i = 0;
            nn::LinearBlockNet f2 = f_net, g2 = g_net;
            for (auto& p : f2.params()) p.value = params[i++];
            for (auto& p : g2.params()) p.value = params[i++];
            Rng tmp(0);
            train::BouncePatchObservation o2(cfg, 0.01, tmp, false);
            for (auto& p : o2.params()) p.value = params[i++];
            return train::elbo_linear(spec, o2, f2, g2, obs, opts);
        };

        ad::Tape t;
        auto fv = f_net.push_params(t, true);
        auto gv = g_net.push_params(t, true);
        auto ov = obs_model.push_params(t, true);
        ad::Var loss =
            train::build_elbo_linear(t, spec, obs_model, f_net, g_net, fv, gv, ov, obs, 1, opts);
        t.backward(loss);
        std::vector<MatrixXd> grads;
        for (ad::Var v : fv) grads.push_back(t.grad(v));
        for (ad::Var v : gv) grads.push_back(t.grad(v));
        for (ad::Var v : ov) grads.push_back(t.grad(v));
        const double e6 = fd::worst_direction_error(eval_with, at, grads, 20, 106);
        out.detail << " | elbo_linear " << e6;
        out.require(e6 < 1e-4, "elbo_linear FD error");
    }
    return out;
}

// -----------------------------------------------------------------------
// 4. Gaussian algebra vs Monte-Carlo estimates
// -----------------------------------------------------------------------
Outcome criterion4() {
    Outcome out;
    Rng rng(44);
    const int n = 100000;
    int kl_ok = 0, e_ok = 0;
    for (int trial = 0; trial < 20; ++trial) {
        const int d = 1 + static_cast<int>(rng.next_u64() % 4);
        GaussianBelief q = GaussianBelief::dense(random_matrix(d, 1, rng),
                                                 random_spd(d, rng));
        GaussianBelief p = GaussianBelief::dense(random_matrix(d, 1, rng),
                                                 random_spd(d, rng));
        const double analytic = gauss_kl(q, p);
        Rng srng(1000 + trial);
        MatrixXd xs = gauss_sample(q, n, srng);
        MatrixXd lp = chol(p.dense_cov());
        MatrixXd lq = chol(q.dense_cov());
        const double logdet_p = 2.0 * lp.diagonal().array().log().sum();
        const double logdet_q = 2.0 * lq.diagonal().array().log().sum();
        VectorXd diffs(n);
        for (int i = 0; i < n; ++i) {
            VectorXd x = xs.row(i).transpose();
            VectorXd wq = lq.triangularView<Eigen::Lower>().solve(x - q.mean());
            VectorXd wp = lp.triangularView<Eigen::Lower>().solve(x - p.mean());
            diffs[i] = -0.5 * (wq.squaredNorm() + logdet_q) + 0.5 * (wp.squaredNorm() + logdet_p);
        }
        const double est = diffs.mean();
        const double se = std::sqrt((diffs.array() - est).square().sum() / (n - 1.0) / n);
        if (std::abs(analytic - est) < 3.0 * se) ++kl_ok;
    }
    for (int trial = 0; trial < 20; ++trial) {
        const int d = 1 + static_cast<int>(rng.next_u64() % 3);
        const int q_dim = d;
        GaussianBelief belief = GaussianBelief::dense(random_matrix(d, 1, rng),
                                                      random_spd(d, rng));
        MatrixXd h = random_matrix(q_dim, d, rng);
        VectorXd r_diag = VectorXd::Constant(q_dim, 0.3).unaryExpr(
            [&](double v) { return v + rng.uniform(); });
        train::LinearGaussianObservation obs_model(h, r_diag);
        VectorXd o = random_matrix(q_dim, 1, rng);

        // closed form through the implementation
        ad::Tape t;
        MatrixXd sig_flat(1, d * d);
        for (int i = 0; i < d; ++i)
            for (int j = 0; j < d; ++j) sig_flat(0, i * d + j) = belief.dense_cov()(i, j);
        ad::Var e = obs_model.expected_log_prob(t, t.constant(belief.mean().transpose()),
                                                t.constant(sig_flat), o.transpose(), {});
        const double closed = t.val(e)(0, 0);

        Rng srng(5000 + trial);
        MatrixXd zs = gauss_sample(belief, n, srng);
        const double log_norm =
            0.5 * (q_dim * std::log(2.0 * M_PI) + r_diag.array().log().sum());
        VectorXd vals(n);
        for (int i = 0; i < n; ++i) {
            VectorXd diff = o - h * zs.row(i).transpose();
            vals[i] = -0.5 * diff.cwiseQuotient(r_diag).dot(diff) - log_norm;
        }
        const double est = vals.mean();
        const double se = std::sqrt((vals.array() - est).square().sum() / (n - 1.0) / n);
        if (std::abs(closed - est) < 3.0 * se) ++e_ok;
    }
    out.detail << "KL MC agreement " << kl_ok << "/20, expectation-term agreement " << e_ok
               << "/20 (3 standard errors)";
    // with 3-sigma bands a single miss in forty is within expectation; the
    // criterion demands agreement, so allow at most one marginal miss each
    out.require(kl_ok >= 19, "KL disagrees with Monte-Carlo");
    out.require(e_ok >= 19, "expectation term disagrees with Monte-Carlo");
    return out;
}

// -----------------------------------------------------------------------
// 5. Conservation and dynamics oracles
// -----------------------------------------------------------------------
Outcome criterion5() {
    Outcome out;
    PendulumState s{2.1, -0.6, 0.3, -0.8};
    const double e0 = pendulum_energy(s);
    VectorXd z = s.vec();
    auto f = [](const VectorXd& v) -> VectorXd {
        return pendulum_deriv(PendulumState::from_vec(v));
    };
    for (int step = 0; step < 3000; ++step) z = rk4_integrate(f, z, 0.001, 10);
    const double drift =
        std::abs(pendulum_energy(PendulumState::from_vec(Eigen::Vector4d(z))) - e0) /
        std::abs(e0);
    out.detail << "energy drift " << drift;
    out.require(drift < 1e-5, "pendulum energy drift");

    Lorenz96Config cfg;
    cfg.n_grid = 8;
    cfg.sigma = 0.0;
    auto env = make_lorenz96_env(cfg);
    VectorXd zf = VectorXd::Constant(8, 8.0);
    Rng rng(1);
    double fp_err = 0.0;
    for (int t = 0; t < 100; ++t) {
        zf = env->step(zf, rng);
        fp_err = std::max(fp_err, max_abs(zf - VectorXd::Constant(8, 8.0)));
    }
    out.detail << " | fixed-point error " << fp_err;
    out.require(fp_err == 0.0, "z=F fixed point not exact");

    VectorXd z0(5);
    z0 << 8.1, 7.7, 8.3, 8.0, 7.9;
    auto lf = [](const VectorXd& v) { return lorenz96_deriv(v, 8.0); };
    const double rk_diff =
        max_abs(rk4_integrate(lf, z0, 0.03, 4) - rk45_reference(lf, z0, 0.03, 1e-12));
    out.detail << " | rk4 vs adaptive " << rk_diff;
    out.require(rk_diff < 1e-6, "RK4 vs independent integrator");
    return out;
}

// -----------------------------------------------------------------------
// 6. Baseline reproduction without training
// -----------------------------------------------------------------------
Outcome criterion6() {
    Outcome out;
    {
        json cfg = {{"env", {{"env", "double_pendulum"}, {"sigma", 0.1}}},
                    {"filter", "enkf"},
                    {"filter_params", {{"n_ens", 1000}, {"process_noise_std", 0.06}}},
                    {"test_count", 10},
                    {"test_steps", 80},
                    {"seed", 1000},
                    {"final_k", 10}};
        MetricReport rep = run_experiment(ExperimentConfig::from_json(cfg));
        const double th = rep.metrics.at("rmse_theta").mean;
        const double om = rep.metrics.at("rmse_omega").mean;
        out.detail << "EnKF pendulum theta " << th << " omega " << om;
        out.require(th >= 0.02 && th <= 0.10, "pendulum theta RMSE outside [0.02, 0.10]");
        out.require(om >= 0.15 && om <= 0.60, "pendulum omega RMSE outside [0.15, 0.60]");
    }
    {
        json cfg = {{"env",
                     {{"env", "lorenz96"}, {"n_grid", 40}, {"sigma", 1.0},
                      {"obs_kind", "direct"}}},
                    {"filter", "pf"},
                    {"filter_params", {{"n_particles", 10000}, {"process_noise_std", 0.14}}},
                    {"test_count", 10},
                    {"test_steps", 80},
                    {"seed", 1000},
                    {"final_k", 10}};
        MetricReport rep = run_experiment(ExperimentConfig::from_json(cfg));
        const double rmse = rep.metrics.at("rmse").mean;
        out.detail << " | PF lorenz96 " << rmse;
        out.require(rmse >= 2.0 && rmse <= 3.6, "PF RMSE outside [2.0, 3.6]");
    }
    {
        json cfg = {{"env",
                     {{"env", "lorenz96"}, {"n_grid", 40}, {"sigma", 1.0},
                      {"obs_kind", "direct"}}},
                    {"filter", "enkf"},
                    {"filter_params", {{"n_ens", 1000}, {"process_noise_std", 0.15}}},
                    {"test_count", 10},
                    {"test_steps", 80},
                    {"seed", 1000},
                    {"final_k", 10}};
        MetricReport rep = run_experiment(ExperimentConfig::from_json(cfg));
        const double rmse = rep.metrics.at("rmse").mean;
        out.detail << " | EnKF lorenz96 " << rmse;
        out.require(rmse >= 0.2 && rmse <= 0.8, "EnKF RMSE outside [0.2, 0.8]");
    }
    return out;
}

// -----------------------------------------------------------------------
// 10. Calibration machinery
// -----------------------------------------------------------------------
Outcome criterion10() {
    Outcome out;
    const int bins = 50;
    const double lo = -5.0, hi = 5.0, w = (hi - lo) / bins;
    std::vector<double> exact(bins);
    for (int k = 0; k < bins; ++k)
        exact[k] = normal_cdf(lo + (k + 1) * w) - normal_cdf(lo + k * w);
    const double zero = jeffreys_from_binned(exact, lo, hi);
    out.detail << "analytic-bin Jeffreys " << zero;
    out.require(zero == 0.0, "analytic binned distribution not exactly zero");

    Rng rng(10);
    std::vector<double> values(100000);
    for (auto& v : values) v = rng.normal();
    const double jd = jeffreys_vs_unit_gaussian(values, bins);
    out.detail << " | sampled Jeffreys " << jd;
    out.require(jd < 0.05, "sampled Jeffreys over 0.05");

    // normalized errors on calibrated samples pass a KS test
    const int steps = 100, n_samples = 1000;
    MatrixXd truth = random_matrix(steps, 1, rng);
    std::vector<MatrixXd> samples(steps);
    for (int t = 0; t < steps; ++t) {
        samples[t] = MatrixXd(n_samples, 1);
        for (int i = 0; i < n_samples; ++i) samples[t](i, 0) = truth(t, 0) + rng.normal();
    }
    NormalizedErrorReport rep = normalized_errors(samples, truth, {0});
    std::sort(rep.values.begin(), rep.values.end());
    double ks = 0.0;
    const double n = static_cast<double>(rep.values.size());
    for (size_t i = 0; i < rep.values.size(); ++i) {
        const double cdf = normal_cdf(rep.values[i]);
        ks = std::max(ks, std::abs(cdf - (i + 1) / n));
        ks = std::max(ks, std::abs(cdf - i / n));
    }
    out.detail << " | normalized-error KS " << ks << " over " << rep.values.size()
               << " values";
    out.require(ks < 0.01, "KS statistic over 0.01");
    return out;
}

} // namespace dbf_acceptance

int main(int argc, char** argv) {
    using namespace dbf_acceptance;
    if (argc < 2) {
        std::cerr << "usage: acceptance <criterion 1..10>\n";
        return 2;
    }
    const int which = std::atoi(argv[1]);
    Outcome (*fns[])() = {criterion1, criterion2, criterion3, criterion4, criterion5,
                          criterion6, criterion7, criterion8, criterion9, criterion10};
    if (which < 1 || which > 10) {
        std::cerr << "criterion must be 1..10\n";
        return 2;
    }
    try {
        Outcome out = fns[which - 1]();
        std::cout << (out.pass ? "[PASS]" : "[FAIL]") << " criterion " << which << ": "
                  << out.detail.str() << "\n";
        return out.pass ? 0 : 1;
    } catch (const std::exception& e) {
        std::cout << "[FAIL] criterion " << which << ": exception: " << e.what() << "\n";
        return 1;
    }
}
