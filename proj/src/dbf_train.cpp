#include "dbf/dbf_train.hpp"

#include <filesystem>
#include <fstream>

namespace dbf::train {

using ad::Tape;
using ad::Var;

namespace {

constexpr double kLog2Pi = 1.8378770664093453;  // log(2*pi)

MatrixXd kron(const MatrixXd& a, const MatrixXd& b) {
    MatrixXd k(a.rows() * b.rows(), a.cols() * b.cols());
    for (Eigen::Index i = 0; i < a.rows(); ++i)
        for (Eigen::Index j = 0; j < a.cols(); ++j)
            k.block(i * b.rows(), j * b.cols(), b.rows(), b.cols()) = a(i, j) * b;
    return k;
}

MatrixXd noise_matrix(uint64_t seed, uint64_t t, uint64_t k, int row0, int rows, int cols) {
    MatrixXd eps(rows, cols);
    for (int i = 0; i < rows; ++i) {
        Rng rng = Rng::derive(seed, {0xe95u, t, k, static_cast<uint64_t>(row0 + i)});
        for (int j = 0; j < cols; ++j) eps(i, j) = rng.normal();
    }
    return eps;
}

} // namespace

// ---------------------------------------------------------------------------
// LinearGaussianObservation
// ---------------------------------------------------------------------------

LinearGaussianObservation::LinearGaussianObservation(MatrixXd h, VectorXd r_diag)
    : h_(std::move(h)), r_diag_(std::move(r_diag)) {
    if (r_diag_.size() != h_.rows())
        throw DimensionError("LinearGaussianObservation: R diagonal length mismatch");
    if ((r_diag_.array() <= 0.0).any())
        throw NumericalError("LinearGaussianObservation: R must be positive");
    log_norm_ = 0.5 * (r_diag_.size() * kLog2Pi + r_diag_.array().log().sum());
}

Var LinearGaussianObservation::log_prob(Tape& t, Var z, const MatrixXd& o,
                                        const std::vector<Var>&) const {
    Var ht = t.constant(h_.transpose());
    Var pred = t.matmul(z, ht);
    Var diff = t.sub(t.constant(o), pred);
    Var rinv = t.constant(r_diag_.cwiseInverse().transpose());
    Var quad = t.row_sum(t.mul(t.mul(diff, diff), rinv));
    return t.add_scalar(t.scale(quad, -0.5), -log_norm_);
}

Var LinearGaussianObservation::expected_log_prob(Tape& t, Var mu, Var sigma_flat,
                                                 const MatrixXd& o,
                                                 const std::vector<Var>& pv) const {
    const int q = obs_dim();
    Var at_mean = log_prob(t, mu, o, pv);
    Var hkron = t.constant(kron(h_, h_).transpose());  // [n^2 x q^2]
    Var hsh = t.matmul(sigma_flat, hkron);             // [N x q^2], row-major H S H^T
    Var diag = t.bdiag(hsh, q);
    Var rinv = t.constant(r_diag_.cwiseInverse().transpose());
    Var corr = t.scale(t.row_sum(t.mul(diag, rinv)), -0.5);
    return t.add(at_mean, corr);
}

MatrixXd LinearGaussianObservation::mean(const MatrixXd& z) const {
    return z * h_.transpose();
}

// ---------------------------------------------------------------------------
// BouncePatchObservation
// ---------------------------------------------------------------------------

BouncePatchObservation::BouncePatchObservation(BouncePatchConfig cfg, double r_var, Rng& rng,
                                               bool random_init)
    : cfg_(std::move(cfg)), r_var_(r_var) {
    if (r_var_ <= 0.0) throw NumericalError("BouncePatchObservation: r_var must be positive");
    for (int i = 0; i < cfg_.n_patches(); ++i) {
        MatrixXd p = cfg_.patches[i];
        if (random_init) {
            for (Eigen::Index r = 0; r < p.rows(); ++r)
                for (Eigen::Index c = 0; c < p.cols(); ++c) p(r, c) = rng.uniform(0.0, 0.5);
        }
        params_.push_back({"patch" + std::to_string(i), std::move(p)});
    }
}

std::vector<Var> BouncePatchObservation::push_params(Tape& t, bool trainable) const {
    std::vector<Var> vars;
    for (const auto& p : params_) vars.push_back(t.leaf(p.value, trainable));
    return vars;
}

Var BouncePatchObservation::log_prob(Tape& t, Var z, const MatrixXd& o,
                                     const std::vector<Var>& pv) const {
    const int k = cfg_.n_patches();
    Var pos = t.slice_cols(z, 0, 2 * k);
    Var folded = t.triangle_fold(pos, cfg_.period());
    Var rendered = t.embed_patches(folded, pv, cfg_.frame, cfg_.patch);
    Var diff = t.sub(t.constant(o), rendered);
    Var quad = t.row_sum(t.mul(diff, diff));
    const double log_norm = 0.5 * cfg_.obs_dim() * (kLog2Pi + std::log(r_var_));
    return t.add_scalar(t.scale(quad, -0.5 / r_var_), -log_norm);
}

MatrixXd BouncePatchObservation::mean(const MatrixXd& z) const {
    BouncePatchConfig cfg = cfg_;
    for (int i = 0; i < cfg.n_patches(); ++i) cfg.patches[i] = params_[i].value;
    MatrixXd out(z.rows(), cfg.obs_dim());
    for (Eigen::Index i = 0; i < z.rows(); ++i)
        out.row(i) = bounce_render(z.row(i).transpose(), cfg).transpose();
    return out;
}

MatrixXd BouncePatchObservation::learned_patch(int i) const { return params_[i].value; }

// ---------------------------------------------------------------------------
// Model push + gradient collection
// ---------------------------------------------------------------------------

DBFVars push_model(Tape& t, const DBFModel& model, const FreezeSpec& freeze) {
    DBFVars v;
    v.rho = t.leaf(model.dynamics.rho.transpose(), !freeze.dynamics);
    v.omega = t.leaf(model.dynamics.omega.transpose(), !freeze.dynamics);
    v.log_scale = t.leaf(model.emission.log_scale.value, !freeze.scale);
    v.f = model.f_net->push_params(t, !freeze.f_net);
    v.g = model.g_net->push_params(t, !freeze.g_net);
    v.phi = model.emission.net->push_params(t, !freeze.phi);
    return v;
}

namespace {

MatrixXd grad_or_zero(const Tape& t, Var v) {
    if (!t.requires_grad(v)) return MatrixXd::Zero(t.val(v).rows(), t.val(v).cols());
    try {
        return t.grad(v);
    } catch (const Error&) {
        return MatrixXd::Zero(t.val(v).rows(), t.val(v).cols());
    }
}

std::vector<MatrixXd> collect_gradients(const Tape& t, const DBFVars& v) {
    std::vector<MatrixXd> grads;
    grads.push_back(grad_or_zero(t, v.rho));
    grads.push_back(grad_or_zero(t, v.omega));
    grads.push_back(grad_or_zero(t, v.log_scale));
    for (Var p : v.f) grads.push_back(grad_or_zero(t, p));
    for (Var p : v.g) grads.push_back(grad_or_zero(t, p));
    for (Var p : v.phi) grads.push_back(grad_or_zero(t, p));
    return grads;
}

} // namespace

// ---------------------------------------------------------------------------
// Joint ELBO on the block-diagonal recursion
// ---------------------------------------------------------------------------

namespace {

struct BlockState {
    Var u, v;        // mean components
    Var a, b, c;     // covariance block entries
};

// numeric positive-definiteness guard on current tape values; operands may
// still carry the broadcast [1 x nb] shape of the initial belief
void check_block_pd(const Tape& t, Var l11, Var l12, Var l22, const char* what) {
    const MatrixXd& a = t.val(l11);
    const MatrixXd& b = t.val(l12);
    const MatrixXd& c = t.val(l22);
    const Eigen::Index rows = std::max({a.rows(), b.rows(), c.rows()});
    auto at = [](const MatrixXd& m, Eigen::Index i, Eigen::Index j) {
        return m(m.rows() == 1 ? 0 : i, j);
    };
    double min_eig = std::numeric_limits<double>::infinity();
    for (Eigen::Index i = 0; i < rows; ++i)
        for (Eigen::Index j = 0; j < a.cols(); ++j) {
            const double av = at(a, i, j), bv = at(b, i, j), cv = at(c, i, j);
            const double tr = av + cv;
            const double det = av * cv - bv * bv;
            const double eig = 0.5 * tr - std::sqrt(std::max(0.0, 0.25 * tr * tr - det));
            min_eig = std::min(min_eig, eig);
        }
    if (!(min_eig > 0.0))
        throw NotPositiveDefiniteError(std::string(what) + " (min eigenvalue " +
                                           std::to_string(min_eig) + ")",
                                       0);
}

} // namespace

Var build_elbo_joint(Tape& t, const DBFModel& model, const DBFVars& vars,
                     const MatrixXd& obs_tm, const MatrixXd& z_tm, int batch,
                     const ElboOpts& opts, ElboParts* parts) {
    const int d = model.d_h();
    const int nb = d / 2;
    const int steps = static_cast<int>(obs_tm.rows()) / batch;
    if (obs_tm.rows() != static_cast<Eigen::Index>(steps) * batch)
        throw DimensionError("build_elbo_joint: observations not a whole number of steps");
    if (z_tm.rows() != obs_tm.rows())
        throw DimensionError("build_elbo_joint: state/observation row mismatch");

    // IOO over all steps at once
    Var obs_all = t.constant(obs_tm);
    Var f_all = model.f_net->forward_tape(t, obs_all, vars.f);
    Var logg_all = model.g_net->forward_tape(t, obs_all, vars.g);

    // dynamics in component form
    Var er = t.exp(vars.rho);
    Var cw = t.cos(vars.omega);
    Var sw = t.sin(vars.omega);
    Var p = t.mul(er, cw);
    Var q = t.mul(er, sw);
    Var p2 = t.mul(p, p);
    Var q2 = t.mul(q, q);
    Var pq = t.mul(p, q);
    Var p2mq2 = t.sub(p2, q2);

    // constants
    VectorXd qvar = model.q.variances();
    MatrixXd qe(1, nb), qo(1, nb);
    for (int i = 0; i < nb; ++i) {
        qe(0, i) = qvar[2 * i];
        qo(0, i) = qvar[2 * i + 1];
    }
    Var q_even = t.constant(qe);
    Var q_odd = t.constant(qo);

    VectorXd vprec = model.vprior.precision();
    MatrixXd vpe(1, nb), vpo(1, nb), mve(1, nb), mvo(1, nb);
    for (int i = 0; i < nb; ++i) {
        vpe(0, i) = vprec[2 * i];
        vpo(0, i) = vprec[2 * i + 1];
        mve(0, i) = model.vprior.m[2 * i] * vprec[2 * i];
        mvo(0, i) = model.vprior.m[2 * i + 1] * vprec[2 * i + 1];
    }
    Var vprec_u = t.constant(vpe), vprec_v = t.constant(vpo);
    Var mv_u = t.constant(mve), mv_v = t.constant(mvo);

    BlockState st;
    st.u = t.constant(MatrixXd::Zero(1, nb));
    st.v = t.constant(MatrixXd::Zero(1, nb));
    st.a = t.constant(MatrixXd::Constant(1, nb, model.init_var));
    st.b = t.constant(MatrixXd::Zero(1, nb));
    st.c = t.constant(MatrixXd::Constant(1, nb, model.init_var));

    Var kl_total = t.scalar_const(0.0);
    std::vector<std::vector<Var>> h_samples(opts.k_samples);

    for (int step = 0; step < steps; ++step) {
        // predict
        Var pu, pv_, pa, pb, pc;
        if (step == 0) {
            pu = st.u;
            pv_ = st.v;
            pa = st.a;
            pb = st.b;
            pc = st.c;
        } else {
            pu = t.sub(t.mul(p, st.u), t.mul(q, st.v));
            pv_ = t.add(t.mul(q, st.u), t.mul(p, st.v));
            pa = t.add(t.add(t.sub(t.mul(p2, st.a), t.scale(t.mul(pq, st.b), 2.0)),
                             t.mul(q2, st.c)),
                       q_even);
            pb = t.add(t.mul(pq, t.sub(st.a, st.c)), t.mul(p2mq2, st.b));
            pc = t.add(t.add(t.add(t.mul(q2, st.a), t.scale(t.mul(pq, st.b), 2.0)),
                             t.mul(p2, st.c)),
                       q_odd);
        }

        // IOO slices for this step
        Var f_row = t.slice_rows(f_all, step * batch, batch);
        Var logg_row = t.slice_rows(logg_all, step * batch, batch);
        Var f_u = t.cols_stride2(f_row, 0);
        Var f_v = t.cols_stride2(f_row, 1);
        Var ginv_u = t.exp(t.neg(t.cols_stride2(logg_row, 0)));
        Var ginv_v = t.exp(t.neg(t.cols_stride2(logg_row, 1)));

        // information-form update on each block
        Var det = t.sub(t.mul(pa, pc), t.mul(pb, pb));
        if (!(t.val(det).minCoeff() > 0.0))
            throw NotPositiveDefiniteError(
                "build_elbo_joint: prediction covariance not positive definite", 0);
        Var p11 = t.div(pc, det);
        Var p12 = t.neg(t.div(pb, det));
        Var p22 = t.div(pa, det);
        Var l11 = t.add(p11, t.sub(ginv_u, vprec_u));
        Var l12 = p12;
        Var l22 = t.add(p22, t.sub(ginv_v, vprec_v));
        check_block_pd(t, l11, l12, l22, "dbf_update: virtual prior dominates");
        Var detl = t.sub(t.mul(l11, l22), t.mul(l12, l12));
        Var a = t.div(l22, detl);
        Var b = t.neg(t.div(l12, detl));
        Var c = t.div(l11, detl);
        Var eta_u = t.add(t.add(t.mul(p11, pu), t.mul(p12, pv_)),
                          t.sub(t.mul(f_u, ginv_u), mv_u));
        Var eta_v = t.add(t.add(t.mul(p12, pu), t.mul(p22, pv_)),
                          t.sub(t.mul(f_v, ginv_v), mv_v));
        Var mu_u = t.add(t.mul(a, eta_u), t.mul(b, eta_v));
        Var mu_v = t.add(t.mul(b, eta_u), t.mul(c, eta_v));

        // KL(q_t || q_{t|t-1}) per block, closed form
        Var tr = t.add(t.add(t.mul(p11, a), t.scale(t.mul(p12, b), 2.0)), t.mul(p22, c));
        Var du = t.sub(pu, mu_u);
        Var dv = t.sub(pv_, mu_v);
        Var maha = t.add(t.add(t.mul(p11, t.mul(du, du)),
                               t.scale(t.mul(p12, t.mul(du, dv)), 2.0)),
                         t.mul(p22, t.mul(dv, dv)));
        Var kl = t.scale(
            t.add(t.add_scalar(t.add(tr, maha), -2.0), t.add(t.log(det), t.log(detl))), 0.5);
        kl_total = t.add(kl_total, t.sum(kl));

        // reparametrized latent samples
        Var chol11 = t.sqrt(a);
        Var chol21 = t.div(b, chol11);
        Var inner = t.sub(c, t.mul(chol21, chol21));
        if (!(t.val(inner).minCoeff() > 0.0))
            throw NumericalError("build_elbo_joint: posterior block lost definiteness");
        Var chol22 = t.sqrt(inner);
        for (int k = 0; k < opts.k_samples; ++k) {
            Var eps_u = t.constant(
                noise_matrix(opts.noise_seed, step, 2 * k, opts.noise_row_offset, batch, nb));
            Var eps_v = t.constant(noise_matrix(opts.noise_seed, step, 2 * k + 1,
                                                opts.noise_row_offset, batch, nb));
            Var h_u = t.add(mu_u, t.mul(chol11, eps_u));
            Var h_v = t.add(mu_v, t.add(t.mul(chol21, eps_u), t.mul(chol22, eps_v)));
            h_samples[k].push_back(t.interleave2(h_u, h_v));
        }

        if (parts) {
            VectorXd mean(d);
            std::vector<Matrix2d> blocks(nb);
            for (int i = 0; i < nb; ++i) {
                mean[2 * i] = t.val(mu_u)(0, i);
                mean[2 * i + 1] = t.val(mu_v)(0, i);
                Matrix2d blk;
                blk << t.val(a)(0, i), t.val(b)(0, i), t.val(b)(0, i), t.val(c)(0, i);
                blocks[i] = blk;
            }
            parts->filtered.push_back(GaussianBelief::blocks(std::move(mean), std::move(blocks)));
        }

        st = {mu_u, mu_v, a, b, c};
    }

    // emission term, one decoder pass per sample set
    Var recon_total = t.scalar_const(0.0);
    const auto& fam = model.emission.family;
    for (int k = 0; k < opts.k_samples; ++k) {
        Var h_all = t.concat_rows(h_samples[k]);
        Var z_hat = model.emission.net->forward_tape(t, h_all, vars.phi);
        for (int j = 0; j < model.emission.z_dim(); ++j) {
            Var zh_j = t.slice_cols(z_hat, j, 1);
            Var z_j = t.constant(z_tm.col(j));
            Var ls_j = t.slice_cols(vars.log_scale, j, 1);
            if (fam[j] == EmissionFamily::Gaussian) {
                Var diff = t.sub(z_j, zh_j);
                Var inv_var = t.exp(t.scale(ls_j, -2.0));
                Var quad = t.scale(t.mul(t.mul(diff, diff), inv_var), -0.5);
                Var lp = t.sub(quad, t.add_scalar(ls_j, 0.5 * kLog2Pi));
                recon_total = t.add(recon_total, t.sum(lp));
            } else {
                Var kappa = t.exp(ls_j);
                Var cd = t.cos(t.sub(z_j, zh_j));
                Var lp = t.sub(t.mul(cd, kappa),
                               t.add_scalar(t.log_bessel_i0(kappa), kLog2Pi));
                recon_total = t.add(recon_total, t.sum(lp));
            }
        }
    }
    recon_total = t.scale(recon_total, 1.0 / opts.k_samples);
    if (parts) {
        parts->kl_total = t.val(kl_total)(0, 0);
        parts->recon_total = t.val(recon_total)(0, 0);
    }
    return t.sub(kl_total, recon_total);
}

// ---------------------------------------------------------------------------
// Linear-dynamics ELBO on the dense recursion
// ---------------------------------------------------------------------------

Var build_elbo_linear(Tape& t, const LinearFilterSpec& spec,
                      const ObservationModel& obs_model, const nn::Net& f_net,
                      const nn::Net& g_net, const std::vector<Var>& f_vars,
                      const std::vector<Var>& g_vars, const std::vector<Var>& obs_vars,
                      const MatrixXd& obs_tm, int batch, const ElboOpts& opts,
                      ElboParts* parts) {
    const int n = static_cast<int>(spec.dyn.matrix.rows());
    const int steps = static_cast<int>(obs_tm.rows()) / batch;
    if (obs_tm.rows() != static_cast<Eigen::Index>(steps) * batch)
        throw DimensionError("build_elbo_linear: observations not a whole number of steps");

    Var obs_all = t.constant(obs_tm);
    Var f_all = f_net.forward_tape(t, obs_all, f_vars);
    Var logg_all = g_net.forward_tape(t, obs_all, g_vars);

    Var a_t = t.constant(spec.dyn.matrix.transpose());
    Var akron = t.constant(kron(spec.dyn.matrix, spec.dyn.matrix).transpose());
    MatrixXd qflat(1, n * n);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j) qflat(0, i * n + j) = spec.dyn.noise_cov(i, j);
    Var q_row = t.constant(qflat);

    VectorXd vprec = spec.vprior.precision();
    Var vprec_row = t.constant(vprec.transpose());
    Var mv_row = t.constant(spec.vprior.m.cwiseProduct(vprec).transpose());

    MatrixXd init_mu = spec.init_mean.transpose().replicate(batch, 1);
    MatrixXd init_sig(batch, n * n);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j) init_sig.col(i * n + j).setConstant(spec.init_cov(i, j));

    Var mu = t.constant(init_mu);
    Var sig = t.constant(init_sig);

    Var kl_total = t.scalar_const(0.0);
    Var e_total = t.scalar_const(0.0);

    for (int step = 0; step < steps; ++step) {
        Var mu_pred, sig_pred;
        if (step == 0) {
            mu_pred = mu;
            sig_pred = sig;
        } else {
            mu_pred = t.matmul(mu, a_t);
            sig_pred = t.add(t.matmul(sig, akron), q_row);
        }
        Var p_pred = t.bspd_inverse(sig_pred, n, "prediction covariance");

        Var f_row = t.slice_rows(f_all, step * batch, batch);
        Var logg_row = t.slice_rows(logg_all, step * batch, batch);
        Var ginv = t.exp(t.neg(logg_row));

        Var lam = t.badd_diag(p_pred, t.sub(ginv, vprec_row), n);
        Var sig_post = t.bspd_inverse(lam, n, "dbf_update: virtual prior dominates");
        Var eta = t.add(t.bmv(p_pred, mu_pred, n, n), t.sub(t.mul(f_row, ginv), mv_row));
        Var mu_post = t.bmv(sig_post, eta, n, n);

        Var tr = t.row_sum(t.mul(p_pred, sig_post));
        Var delta = t.sub(mu_pred, mu_post);
        Var maha = t.row_sum(t.mul(delta, t.bmv(p_pred, delta, n, n)));
        Var ld = t.sub(t.blogdet_spd(sig_pred, n), t.blogdet_spd(sig_post, n));
        Var kl = t.scale(t.add_scalar(t.add(t.add(tr, maha), ld), -static_cast<double>(n)),
                         0.5);
        kl_total = t.add(kl_total, t.sum(kl));

        const MatrixXd o_rows = obs_tm.middleRows(static_cast<Eigen::Index>(step) * batch,
                                                  batch);
        if (opts.closed_form_expectation) {
            if (!obs_model.has_closed_form())
                throw ConfigError("elbo_linear: observation model has no closed form");
            Var e = obs_model.expected_log_prob(t, mu_post, sig_post, o_rows, obs_vars);
            e_total = t.add(e_total, t.sum(e));
        } else {
            Var chol = t.bchol(sig_post, n, "posterior covariance");
            Var e_step = t.scalar_const(0.0);
            for (int k = 0; k < opts.k_samples; ++k) {
                Var eps = t.constant(
                    noise_matrix(opts.noise_seed, step, k, opts.noise_row_offset, batch, n));
                Var z = t.add(mu_post, t.bmv(chol, eps, n, n));
                e_step = t.add(e_step, t.sum(obs_model.log_prob(t, z, o_rows, obs_vars)));
            }
            e_total = t.add(e_total, t.scale(e_step, 1.0 / opts.k_samples));
        }

        if (parts) {
            const int nn_ = n;
            VectorXd mean = t.val(mu_post).row(0).transpose();
            MatrixXd cov(nn_, nn_);
            for (int i = 0; i < nn_; ++i)
                for (int j = 0; j < nn_; ++j) cov(i, j) = t.val(sig_post)(0, i * nn_ + j);
            parts->filtered.push_back(GaussianBelief::dense(std::move(mean), std::move(cov)));
        }

        mu = mu_post;
        sig = sig_post;
    }
    if (parts) {
        parts->kl_total = t.val(kl_total)(0, 0);
        parts->recon_total = t.val(e_total)(0, 0);
    }
    return t.sub(kl_total, e_total);
}

// ---------------------------------------------------------------------------
// Convenience evaluations
// ---------------------------------------------------------------------------

double elbo_joint(const DBFModel& model, const MatrixXd& z, const MatrixXd& obs,
                  const ElboOpts& opts) {
    Tape t;
    DBFVars vars = push_model(t, model);
    Var loss = build_elbo_joint(t, model, vars, obs, z, 1, opts);
    return t.val(loss)(0, 0);
}

double elbo_linear(const LinearFilterSpec& spec, const ObservationModel& obs_model,
                   const nn::Net& f_net, const nn::Net& g_net, const MatrixXd& obs,
                   const ElboOpts& opts) {
    Tape t;
    std::vector<Var> fv = f_net.push_params(t, true);
    std::vector<Var> gv = g_net.push_params(t, true);
    std::vector<Var> ov = obs_model.push_params(t, true);
    Var loss = build_elbo_linear(t, spec, obs_model, f_net, g_net, fv, gv, ov, obs, 1, opts);
    return t.val(loss)(0, 0);
}

std::vector<MatrixXd> elbo_joint_gradients(const DBFModel& model, const MatrixXd& z,
                                           const MatrixXd& obs, const ElboOpts& opts,
                                           double* loss_out) {
    Tape t;
    DBFVars vars = push_model(t, model);
    Var loss = build_elbo_joint(t, model, vars, obs, z, 1, opts);
    t.backward(loss);
    if (loss_out) *loss_out = t.val(loss)(0, 0);
    return collect_gradients(t, vars);
}

// ---------------------------------------------------------------------------
// Training loops
// ---------------------------------------------------------------------------

double TrainResult::moving_average(int window, int end_step) const {
    const int hi = std::min<int>(end_step, static_cast<int>(loss_curve.size()));
    const int lo = std::max(0, hi - window);
    if (hi <= lo) return std::numeric_limits<double>::quiet_NaN();
    double s = 0.0;
    for (int i = lo; i < hi; ++i) s += loss_curve[i];
    return s / (hi - lo);
}

namespace {

std::vector<int> sample_indices(int count, int batch, Rng& rng) {
    std::vector<int> idx(batch);
    for (int i = 0; i < batch; ++i)
        idx[i] = static_cast<int>(rng.next_u64() % static_cast<uint64_t>(count));
    return idx;
}

// trajectory-major batch rows -> time-major matrix
MatrixXd time_major(const MatrixXd& data, const std::vector<int>& idx, int steps) {
    const int batch = static_cast<int>(idx.size());
    MatrixXd out(static_cast<Eigen::Index>(steps) * batch, data.cols());
    for (int t = 0; t < steps; ++t)
        for (int b = 0; b < batch; ++b)
            out.row(static_cast<Eigen::Index>(t) * batch + b) =
                data.row(static_cast<Eigen::Index>(idx[b]) * steps + t);
    return out;
}

void write_loss_curve(const std::string& dir, const std::vector<double>& curve) {
    if (dir.empty()) return;
    std::filesystem::create_directories(dir);
    std::ofstream f(dir + "/loss_curve.csv");
    f << "step,loss\n";
    f.precision(17);
    for (size_t i = 0; i < curve.size(); ++i) f << i << "," << curve[i] << "\n";
}

} // namespace

TrainResult train_joint(DBFModel& model, const TrajectoryBatch& data, const TrainOpts& opts) {
    TrainResult res;
    if (opts.steps <= 0) return res;

    // parameter registry in canonical order (matches collect_gradients)
    nn::Param rho_p{"dynamics.rho", model.dynamics.rho.transpose()};
    nn::Param omega_p{"dynamics.omega", model.dynamics.omega.transpose()};
    std::vector<nn::Param*> params{&rho_p, &omega_p, &model.emission.log_scale};
    for (auto& p : model.f_net->params()) params.push_back(&p);
    for (auto& p : model.g_net->params()) params.push_back(&p);
    for (auto& p : model.emission.net->params()) params.push_back(&p);

    nn::Adam adam(opts.lr);
    std::vector<MatrixXd> snapshot;
    auto take_snapshot = [&]() {
        snapshot.clear();
        for (auto* p : params) snapshot.push_back(p->value);
    };
    auto restore_snapshot = [&]() {
        for (size_t i = 0; i < params.size(); ++i) params[i]->value = snapshot[i];
        model.dynamics = BlockDynamics(rho_p.value.row(0).transpose(),
                                       omega_p.value.row(0).transpose());
    };
    take_snapshot();

    for (int step = 0; step < opts.steps; ++step) {
        if (opts.lr_decay_at > 0 && step == opts.lr_decay_at)
            adam.set_lr(opts.lr * opts.lr_decay_factor);
        Rng batch_rng = Rng::derive(opts.seed, {0xba7c4u, static_cast<uint64_t>(step)});
        std::vector<int> idx = sample_indices(data.count, opts.batch, batch_rng);
        MatrixXd obs_tm = time_major(data.observations, idx, data.steps);
        MatrixXd z_tm = time_major(data.states, idx, data.steps);

        ElboOpts eopts;
        eopts.k_samples = opts.k_samples;
        eopts.noise_seed = Rng::derive(opts.seed, {0x5eedu, static_cast<uint64_t>(step)}).state();

        try {
            // data-parallel shards: each worker filters its slice of the
            // minibatch on a private tape; shard gradients reduce in worker
            // order so a fixed thread count reproduces bit-identically
            const int workers = std::max(1, std::min(opts.threads, opts.batch));
            std::vector<std::vector<MatrixXd>> shard_grads(workers);
            std::vector<double> shard_loss(workers, 0.0);
            std::vector<int> lo(workers + 1, 0);
            for (int w = 0; w < workers; ++w)
                lo[w + 1] = lo[w] + opts.batch / workers + (w < opts.batch % workers ? 1 : 0);
            parallel_for(workers, workers, [&](int w) {
                const int rows = lo[w + 1] - lo[w];
                if (rows == 0) return;
                MatrixXd obs_w(static_cast<Eigen::Index>(rows) * data.steps, obs_tm.cols());
                MatrixXd z_w(static_cast<Eigen::Index>(rows) * data.steps, z_tm.cols());
                for (int t = 0; t < data.steps; ++t)
                    for (int b = 0; b < rows; ++b) {
                        obs_w.row(static_cast<Eigen::Index>(t) * rows + b) =
                            obs_tm.row(static_cast<Eigen::Index>(t) * opts.batch + lo[w] + b);
                        z_w.row(static_cast<Eigen::Index>(t) * rows + b) =
                            z_tm.row(static_cast<Eigen::Index>(t) * opts.batch + lo[w] + b);
                    }
                ElboOpts shard_opts = eopts;
                shard_opts.noise_row_offset = lo[w];
                Tape tape;
                DBFVars vars = push_model(tape, model);
                Var total = build_elbo_joint(tape, model, vars, obs_w, z_w, rows, shard_opts);
                shard_loss[w] = tape.val(total)(0, 0);
                if (!std::isfinite(shard_loss[w]))
                    throw DivergenceError("train_joint: non-finite loss");
                tape.backward(total);
                shard_grads[w] = collect_gradients(tape, vars);
            });
            double value = 0.0;
            std::vector<MatrixXd> grads = std::move(shard_grads[0]);
            value = shard_loss[0];
            for (int w = 1; w < workers; ++w) {
                if (lo[w + 1] - lo[w] == 0) continue;
                value += shard_loss[w];
                for (size_t i = 0; i < grads.size(); ++i) grads[i] += shard_grads[w][i];
            }
            value /= opts.batch;
            for (auto& g : grads) g /= static_cast<double>(opts.batch);
            adam.update(params, grads);
            model.dynamics = BlockDynamics(rho_p.value.row(0).transpose(),
                                           omega_p.value.row(0).transpose());
            res.loss_curve.push_back(value);
            res.steps_completed = step + 1;
            take_snapshot();
        } catch (const DivergenceError&) {
            restore_snapshot();
            res.diverged = true;
            break;
        } catch (const NumericalError&) {
            restore_snapshot();
            res.diverged = true;
            break;
        }
    }
    if (!opts.checkpoint_dir.empty()) {
        write_loss_curve(opts.checkpoint_dir, res.loss_curve);
        save_model(model, opts.checkpoint_dir,
                   {{"lr", opts.lr},
                    {"batch", opts.batch},
                    {"steps", res.steps_completed},
                    {"seed", opts.seed},
                    {"diverged", res.diverged}});
    }
    return res;
}

TrainResult train_linear(LinearModel& model, const TrajectoryBatch& data,
                         const TrainOpts& opts) {
    TrainResult res;
    if (opts.steps <= 0) return res;

    std::vector<nn::Param*> params;
    for (auto& p : model.f_net->params()) params.push_back(&p);
    for (auto& p : model.g_net->params()) params.push_back(&p);
    for (auto& p : model.obs_model->params()) params.push_back(&p);

    nn::Adam adam(opts.lr);
    std::vector<MatrixXd> snapshot;
    auto take_snapshot = [&]() {
        snapshot.clear();
        for (auto* p : params) snapshot.push_back(p->value);
    };
    auto restore_snapshot = [&]() {
        for (size_t i = 0; i < params.size(); ++i) params[i]->value = snapshot[i];
    };
    take_snapshot();

    const size_t nf = model.f_net->params().size();
    const size_t ng = model.g_net->params().size();

    for (int step = 0; step < opts.steps; ++step) {
        const bool g_frozen = step < opts.freeze_g_steps;
        Rng batch_rng = Rng::derive(opts.seed, {0xba7c4u, static_cast<uint64_t>(step)});
        std::vector<int> idx = sample_indices(data.count, opts.batch, batch_rng);
        MatrixXd obs_tm = time_major(data.observations, idx, data.steps);

        ElboOpts eopts;
        eopts.k_samples = opts.k_samples;
        eopts.noise_seed = Rng::derive(opts.seed, {0x5eedu, static_cast<uint64_t>(step)}).state();

        try {
            Tape tape;
            std::vector<Var> fv = model.f_net->push_params(tape, true);
            std::vector<Var> gv = model.g_net->push_params(tape, !g_frozen);
            std::vector<Var> ov = model.obs_model->push_params(tape, true);
            Var total = build_elbo_linear(tape, model.spec, *model.obs_model, *model.f_net,
                                          *model.g_net, fv, gv, ov, obs_tm, opts.batch, eopts);
            Var loss = tape.scale(total, 1.0 / opts.batch);
            const double value = tape.val(loss)(0, 0);
            if (!std::isfinite(value)) throw DivergenceError("train_linear: non-finite loss");
            tape.backward(loss);
            std::vector<MatrixXd> grads;
            for (Var p : fv) grads.push_back(grad_or_zero(tape, p));
            for (Var p : gv) grads.push_back(grad_or_zero(tape, p));
            for (Var p : ov) grads.push_back(grad_or_zero(tape, p));
            (void)nf;
            (void)ng;
            adam.update(params, grads);
            res.loss_curve.push_back(value);
            res.steps_completed = step + 1;
            take_snapshot();
        } catch (const DivergenceError&) {
            restore_snapshot();
            res.diverged = true;
            break;
        } catch (const NumericalError&) {
            restore_snapshot();
            res.diverged = true;
            break;
        }
    }
    if (!opts.checkpoint_dir.empty()) write_loss_curve(opts.checkpoint_dir, res.loss_curve);
    return res;
}

// ---------------------------------------------------------------------------
// Koopman pretraining (strategy 1)
// ---------------------------------------------------------------------------

KoopmanResult koopman_pretrain(const TrajectoryBatch& z_data, int d_h, const KoopmanOpts& opts,
                               std::unique_ptr<nn::Net> encoder,
                               std::unique_ptr<nn::Net> decoder) {
    if (d_h % 2 != 0) throw ConfigError("koopman_pretrain: latent dimension must be even");
    const int d_z = static_cast<int>(z_data.states.cols());
    const int nb = d_h / 2;
    Rng init_rng = Rng::derive(opts.seed, {0x12137u});
    KoopmanResult res;
    res.dynamics = BlockDynamics::random_init(d_h, init_rng);
    res.encoder = encoder ? std::move(encoder)
                          : std::make_unique<nn::LinearBlockNet>(d_z, opts.hidden, d_h,
                                                                 opts.blocks, init_rng);
    res.decoder = decoder ? std::move(decoder)
                          : std::make_unique<nn::LinearBlockNet>(d_h, opts.hidden, d_z,
                                                                 opts.blocks, init_rng);
    if (opts.steps <= 0) return res;
    const int horizon = std::min(opts.horizon, z_data.steps - 1);
    if (horizon < 1) throw ConfigError("koopman_pretrain: trajectories too short");

    nn::Param rho_p{"rho", res.dynamics.rho.transpose()};
    nn::Param omega_p{"omega", res.dynamics.omega.transpose()};
    std::vector<nn::Param*> params{&rho_p, &omega_p};
    for (auto& p : res.encoder->params()) params.push_back(&p);
    for (auto& p : res.decoder->params()) params.push_back(&p);

    nn::Adam adam(opts.lr);
    for (int step = 0; step < opts.steps; ++step) {
        Rng rng = Rng::derive(opts.seed, {0xba7c4u, static_cast<uint64_t>(step)});
        // sample (trajectory, start) windows
        MatrixXd window(static_cast<Eigen::Index>(horizon + 1) * opts.batch, d_z);
        for (int b = 0; b < opts.batch; ++b) {
            const int traj = static_cast<int>(rng.next_u64() % z_data.count);
            const int t0 =
                static_cast<int>(rng.next_u64() % static_cast<uint64_t>(z_data.steps - horizon));
            for (int k = 0; k <= horizon; ++k)
                window.row(static_cast<Eigen::Index>(k) * opts.batch + b) =
                    z_data.state(traj, t0 + k);
        }

        Tape tape;
        Var rho = tape.leaf(rho_p.value, opts.train_dynamics);
        Var omega = tape.leaf(omega_p.value, opts.train_dynamics);
        std::vector<Var> ev = res.encoder->push_params(tape, opts.train_encoder);
        std::vector<Var> dv = res.decoder->push_params(tape, opts.train_decoder);

        Var er = tape.exp(rho);
        Var p = tape.mul(er, tape.cos(omega));
        Var q = tape.mul(er, tape.sin(omega));

        Var win = tape.constant(window);
        Var enc_all = res.encoder->forward_tape(tape, win, ev);

        Var loss = tape.scalar_const(0.0);
        Var h0 = tape.slice_rows(enc_all, 0, opts.batch);
        Var hu = tape.cols_stride2(h0, 0);
        Var hv = tape.cols_stride2(h0, 1);
        std::vector<Var> rollout{h0};
        for (int k = 1; k <= horizon; ++k) {
            Var nu = tape.sub(tape.mul(p, hu), tape.mul(q, hv));
            Var nv = tape.add(tape.mul(q, hu), tape.mul(p, hv));
            hu = nu;
            hv = nv;
            Var hk = tape.interleave2(hu, hv);
            rollout.push_back(hk);
            // latent consistency: enc(z_{t+k}) should match A^k enc(z_t)
            Var target = tape.slice_rows(enc_all, k * opts.batch, opts.batch);
            Var dh = tape.sub(target, hk);
            loss = tape.add(loss, tape.sum(tape.mul(dh, dh)));
        }
        Var h_cat = tape.concat_rows(rollout);
        Var z_hat = res.decoder->forward_tape(tape, h_cat, dv);
        Var dz = tape.sub(tape.constant(window), z_hat);
        loss = tape.add(loss, tape.sum(tape.mul(dz, dz)));
        loss = tape.scale(loss, 1.0 / opts.batch);

        const double value = tape.val(loss)(0, 0);
        if (!std::isfinite(value)) {
            res.loss_curve.push_back(value);
            break;
        }
        tape.backward(loss);
        std::vector<MatrixXd> grads;
        grads.push_back(grad_or_zero(tape, rho));
        grads.push_back(grad_or_zero(tape, omega));
        for (Var v : ev) grads.push_back(grad_or_zero(tape, v));
        for (Var v : dv) grads.push_back(grad_or_zero(tape, v));
        adam.update(params, grads);
        res.dynamics =
            BlockDynamics(rho_p.value.row(0).transpose(), omega_p.value.row(0).transpose());
        res.loss_curve.push_back(value);
    }
    (void)nb;
    return res;
}

} // namespace dbf::train
