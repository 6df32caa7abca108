#include "dbf/dbf.hpp"

#include <filesystem>
#include <fstream>

namespace dbf {

// ---------------------------------------------------------------------------
// Model plumbing
// ---------------------------------------------------------------------------

IOOOutput DBFModel::ioo(const VectorXd& o) const {
    MatrixXd row = o.transpose();
    IOOOutput out;
    out.f = f_net->forward(row).row(0).transpose();
    out.g_diag = g_net->forward(row).row(0).transpose().array().exp();
    return out;
}

std::pair<MatrixXd, MatrixXd> DBFModel::ioo_batch(const MatrixXd& obs) const {
    MatrixXd f = f_net->forward(obs);
    MatrixXd g = g_net->forward(obs).array().exp();
    return {std::move(f), std::move(g)};
}

// ---------------------------------------------------------------------------
// Predict
// ---------------------------------------------------------------------------

GaussianBelief dbf_predict(const GaussianBelief& belief, const BlockDynamics& dyn,
                           const DiagonalNoise& q) {
    if (belief.dim() != dyn.dim() || q.dim() != dyn.dim())
        throw DimensionError("dbf_predict: dimension mismatch");
    VectorXd qv = q.variances();
    if (belief.is_block()) {
        const auto& in = belief.cov_blocks();
        std::vector<Matrix2d> out(in.size());
        VectorXd mean(belief.dim());
        for (int i = 0; i < dyn.n_blocks(); ++i) {
            Matrix2d A = dyn.block(i);
            mean.segment<2>(2 * i) = A * belief.mean().segment<2>(2 * i);
            Matrix2d S = A * in[i] * A.transpose();
            S(0, 0) += qv[2 * i];
            S(1, 1) += qv[2 * i + 1];
            double off = 0.5 * (S(0, 1) + S(1, 0));
            S(0, 1) = S(1, 0) = off;
            out[i] = S;
        }
        return GaussianBelief::blocks(std::move(mean), std::move(out));
    }
    return gauss_pushforward(belief, LinearGaussianMap(assemble(dyn), q.dense()));
}

GaussianBelief dbf_predict(const GaussianBelief& belief, const LinearGaussianMap& dyn) {
    return gauss_pushforward(belief, dyn);
}

// ---------------------------------------------------------------------------
// Update
// ---------------------------------------------------------------------------

GaussianBelief dbf_update(const GaussianBelief& pred, const IOOOutput& ioo,
                          const VirtualPrior& vp) {
    const int d = pred.dim();
    if (ioo.f.size() != d || vp.m.size() != d)
        throw DimensionError("dbf_update: dimension mismatch");
    const VectorXd v_prec = vp.precision();

    try {
        if (pred.is_block() && !ioo.g_dense) {
            const auto& blocks = pred.cov_blocks();
            std::vector<BlockInfoTerm> terms(2);
            auto& prior = terms[0];
            prior.precision.resize(blocks.size());
            prior.weighted_mean.resize(d);
            for (size_t b = 0; b < blocks.size(); ++b) {
                const Matrix2d& S = blocks[b];
                const double det = S(0, 0) * S(1, 1) - S(0, 1) * S(1, 0);
                if (!(det > 0.0) || !(S(0, 0) > 0.0))
                    throw NotPositiveDefiniteError(
                        "prediction covariance not positive definite in block " +
                            std::to_string(b),
                        static_cast<int>(b));
                Matrix2d P;
                P << S(1, 1), -S(0, 1), -S(1, 0), S(0, 0);
                P /= det;
                prior.precision[b] = P;
                prior.weighted_mean.segment<2>(2 * b) = P * pred.mean().segment<2>(2 * b);
            }
            auto& meas = terms[1];
            meas.precision.resize(blocks.size());
            meas.weighted_mean.resize(d);
            for (size_t b = 0; b < blocks.size(); ++b) {
                Matrix2d P = Matrix2d::Zero();
                P(0, 0) = 1.0 / ioo.g_diag[2 * b] - v_prec[2 * b];
                P(1, 1) = 1.0 / ioo.g_diag[2 * b + 1] - v_prec[2 * b + 1];
                meas.precision[b] = P;
                meas.weighted_mean[2 * b] =
                    ioo.f[2 * b] / ioo.g_diag[2 * b] - vp.m[2 * b] * v_prec[2 * b];
                meas.weighted_mean[2 * b + 1] = ioo.f[2 * b + 1] / ioo.g_diag[2 * b + 1] -
                                                vp.m[2 * b + 1] * v_prec[2 * b + 1];
            }
            return info_combine_blocks(terms);
        }

        // dense route
        MatrixXd P = pred.dense_cov();
        MatrixXd Lp = chol(P);
        MatrixXd p_inv = Lp.transpose().triangularView<Eigen::Upper>().solve(
            Lp.triangularView<Eigen::Lower>().solve(MatrixXd::Identity(d, d)));
        std::vector<InfoTerm> terms;
        terms.push_back({0.5 * (p_inv + p_inv.transpose()), p_inv * pred.mean()});
        if (ioo.g_dense) {
            MatrixXd Lg = chol(*ioo.g_dense);
            MatrixXd g_inv = Lg.transpose().triangularView<Eigen::Upper>().solve(
                Lg.triangularView<Eigen::Lower>().solve(MatrixXd::Identity(d, d)));
            terms.push_back({0.5 * (g_inv + g_inv.transpose()), g_inv * ioo.f});
        } else {
            VectorXd g_prec = ioo.g_diag.cwiseInverse();
            terms.push_back({MatrixXd(g_prec.asDiagonal()), g_prec.cwiseProduct(ioo.f)});
        }
        terms.push_back({MatrixXd((-v_prec).asDiagonal()), -v_prec.cwiseProduct(vp.m)});
        return info_combine(terms);
    } catch (const NotPositiveDefiniteError& e) {
        throw NotPositiveDefiniteError(std::string("dbf_update: virtual prior dominates (") +
                                           e.what() + ")",
                                       e.pivot_index);
    }
}

// ---------------------------------------------------------------------------
// Filtering
// ---------------------------------------------------------------------------

FilterResult dbf_filter(const DBFModel& model, const MatrixXd& obs) {
    if (obs.rows() < 1) throw ConfigError("dbf_filter: need at least one observation");
    if (obs.cols() != model.obs_dim())
        throw DimensionError("dbf_filter: observation dimension mismatch");
    auto [f_all, g_all] = model.ioo_batch(obs);
    FilterResult res;
    const int steps = static_cast<int>(obs.rows());
    res.filtered.reserve(steps);
    res.predicted.reserve(steps);
    GaussianBelief belief = model.initial_belief();
    for (int t = 0; t < steps; ++t) {
        GaussianBelief pred =
            (t == 0) ? belief : dbf_predict(belief, model.dynamics, model.q);
        IOOOutput ioo{f_all.row(t).transpose(), g_all.row(t).transpose(), std::nullopt};
        belief = dbf_update(pred, ioo, model.vprior);
        res.predicted.push_back(std::move(pred));
        res.filtered.push_back(belief);
    }
    return res;
}

FilterResult dbf_filter_linear(const GaussianBelief& init, const LinearGaussianMap& dyn,
                               const std::vector<IOOOutput>& ioos, const VirtualPrior& vp) {
    if (ioos.empty()) throw ConfigError("dbf_filter_linear: need at least one step");
    FilterResult res;
    res.filtered.reserve(ioos.size());
    res.predicted.reserve(ioos.size());
    GaussianBelief belief = init;
    for (size_t t = 0; t < ioos.size(); ++t) {
        GaussianBelief pred = (t == 0) ? belief : dbf_predict(belief, dyn);
        belief = dbf_update(pred, ioos[t], vp);
        res.predicted.push_back(std::move(pred));
        res.filtered.push_back(belief);
    }
    return res;
}

// ---------------------------------------------------------------------------
// von Mises
// ---------------------------------------------------------------------------

double vonmises_logpdf(double x, double mu, double kappa) {
    if (kappa < 0.0) throw NumericalError("vonmises_logpdf: negative concentration");
    return kappa * std::cos(x - mu) - std::log(2.0 * M_PI) - ad::fwd::log_bessel_i0(kappa);
}

double vonmises_sample(double mu, double kappa, Rng& rng) {
    if (kappa < 0.0) throw NumericalError("vonmises_sample: negative concentration");
    if (kappa < 1e-8) return wrap_angle(rng.uniform(-M_PI, M_PI));
    // Best & Fisher (1979) wrapped-Cauchy envelope rejection
    const double tau = 1.0 + std::sqrt(1.0 + 4.0 * kappa * kappa);
    const double rho = (tau - std::sqrt(2.0 * tau)) / (2.0 * kappa);
    const double r = (1.0 + rho * rho) / (2.0 * rho);
    for (;;) {
        const double z = std::cos(M_PI * rng.uniform());
        const double f = (1.0 + r * z) / (r + z);
        const double c = kappa * (r - f);
        const double u2 = rng.uniform();
        if (c * (2.0 - c) - u2 > 0.0 || std::log(c / u2) + 1.0 - c >= 0.0) {
            const double sign = rng.uniform() < 0.5 ? -1.0 : 1.0;
            return wrap_angle(mu + sign * std::acos(std::clamp(f, -1.0, 1.0)));
        }
    }
}

// ---------------------------------------------------------------------------
// Emission
// ---------------------------------------------------------------------------

MatrixXd emission_sample(const DBFModel& model, const GaussianBelief& belief, int n,
                         Rng& rng) {
    if (n < 1) throw ConfigError("emission_sample: n must be >= 1");
    MatrixXd h = gauss_sample(belief, n, rng);
    MatrixXd z = model.emission.net->forward(h);
    const auto& fam = model.emission.family;
    for (int j = 0; j < model.emission.z_dim(); ++j) {
        const double scale = std::exp(model.emission.log_scale.value(0, j));
        for (int i = 0; i < n; ++i) {
            if (fam[j] == EmissionFamily::Gaussian)
                z(i, j) += scale * rng.normal();
            else
                z(i, j) = vonmises_sample(z(i, j), scale, rng);
        }
    }
    return z;
}

VectorXd emission_mean(const DBFModel& model, const GaussianBelief& belief) {
    return model.emission.net->forward(belief.mean().transpose()).row(0).transpose();
}

MatrixXd emission_means(const DBFModel& model, const FilterResult& result) {
    const int steps = static_cast<int>(result.filtered.size());
    MatrixXd mus(steps, model.d_h());
    for (int t = 0; t < steps; ++t) mus.row(t) = result.filtered[t].mean().transpose();
    return model.emission.net->forward(mus);
}

MatrixXd ioo_only_means(const DBFModel& model, const MatrixXd& obs) {
    MatrixXd f = model.f_net->forward(obs);
    return model.emission.net->forward(f);
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

namespace {

void append_params(nn::json& order, std::vector<const nn::Param*>& flat,
                   const std::string& prefix, const std::vector<nn::Param>& params) {
    for (const auto& p : params) {
        order.push_back({{"name", prefix + p.name},
                         {"rows", p.value.rows()},
                         {"cols", p.value.cols()}});
        flat.push_back(&p);
    }
}

} // namespace

void save_model(const DBFModel& model, const std::string& dir, const nn::json& extra) {
    std::filesystem::create_directories(dir);
    nn::json manifest;
    manifest["format_version"] = 1;
    manifest["d_h"] = model.d_h();
    manifest["block_mode"] = model.block_mode;
    manifest["init_var"] = model.init_var;
    manifest["q_logvar"] = std::vector<double>(model.q.log_variance.data(),
                                               model.q.log_variance.data() + model.q.dim());
    manifest["vprior_m"] = std::vector<double>(model.vprior.m.data(),
                                               model.vprior.m.data() + model.vprior.m.size());
    manifest["vprior_v"] = std::vector<double>(
        model.vprior.v_diag.data(), model.vprior.v_diag.data() + model.vprior.v_diag.size());
    manifest["f_net"] = model.f_net->architecture();
    manifest["g_net"] = model.g_net->architecture();
    manifest["emission_net"] = model.emission.net->architecture();
    std::vector<std::string> fam;
    for (auto f : model.emission.family)
        fam.push_back(f == EmissionFamily::Gaussian ? "gaussian" : "von_mises");
    manifest["emission_family"] = fam;
    if (!extra.is_null() && !extra.empty()) manifest["hyperparameters"] = extra;

    nn::json order = nn::json::array();
    std::vector<const nn::Param*> flat;
    std::vector<nn::Param> dyn_params;
    dyn_params.push_back({"rho", model.dynamics.rho.transpose()});
    dyn_params.push_back({"omega", model.dynamics.omega.transpose()});
    std::vector<nn::Param> em_params{model.emission.log_scale};
    em_params[0].name = "log_scale";
    append_params(order, flat, "dynamics.", dyn_params);
    append_params(order, flat, "emission.", em_params);
    append_params(order, flat, "f_net.", model.f_net->params());
    append_params(order, flat, "g_net.", model.g_net->params());
    append_params(order, flat, "emission_net.", model.emission.net->params());
    manifest["weights"] = order;

    std::ofstream wf(dir + "/weights.f64", std::ios::binary);
    for (const auto* p : flat) {
        for (Eigen::Index i = 0; i < p->value.rows(); ++i)
            for (Eigen::Index j = 0; j < p->value.cols(); ++j) {
                const double v = p->value(i, j);
                wf.write(reinterpret_cast<const char*>(&v), sizeof(double));
            }
    }
    std::ofstream mf(dir + "/manifest.json");
    mf << manifest.dump(2) << "\n";
}

DBFModel load_model(const std::string& dir) {
    std::ifstream mf(dir + "/manifest.json");
    if (!mf) throw Error("load_model: cannot open " + dir + "/manifest.json");
    nn::json manifest = nn::json::parse(mf);

    DBFModel model;
    Rng dummy(0);
    model.block_mode = manifest.at("block_mode");
    model.init_var = manifest.at("init_var");
    std::vector<double> qv = manifest.at("q_logvar");
    model.q = DiagonalNoise(Eigen::Map<VectorXd>(qv.data(), qv.size()));
    std::vector<double> vm = manifest.at("vprior_m");
    std::vector<double> vv = manifest.at("vprior_v");
    model.vprior.m = Eigen::Map<VectorXd>(vm.data(), vm.size());
    model.vprior.v_diag = Eigen::Map<VectorXd>(vv.data(), vv.size());
    model.f_net = nn::make_net(manifest.at("f_net"), dummy);
    model.g_net = nn::make_net(manifest.at("g_net"), dummy);
    model.emission.net = nn::make_net(manifest.at("emission_net"), dummy);
    for (const std::string& f : manifest.at("emission_family"))
        model.emission.family.push_back(f == "gaussian" ? EmissionFamily::Gaussian
                                                        : EmissionFamily::VonMises);

    std::ifstream wf(dir + "/weights.f64", std::ios::binary);
    if (!wf) throw Error("load_model: cannot open " + dir + "/weights.f64");
    auto read_mat = [&](Eigen::Index rows, Eigen::Index cols) {
        MatrixXd m(rows, cols);
        for (Eigen::Index i = 0; i < rows; ++i)
            for (Eigen::Index j = 0; j < cols; ++j) {
                double v;
                wf.read(reinterpret_cast<char*>(&v), sizeof(double));
                if (!wf) throw Error("load_model: truncated weights.f64");
                m(i, j) = v;
            }
        return m;
    };

    std::vector<nn::Param*> targets;
    nn::Param rho{"rho", {}}, omega{"omega", {}};
    // consume entries in manifest order
    MatrixXd rho_m, omega_m;
    size_t fi = 0, gi = 0, ei = 0;
    for (const auto& entry : manifest.at("weights")) {
        const std::string name = entry.at("name");
        MatrixXd m = read_mat(entry.at("rows"), entry.at("cols"));
        if (name == "dynamics.rho")
            rho_m = m;
        else if (name == "dynamics.omega")
            omega_m = m;
        else if (name.rfind("emission.", 0) == 0 && name.find("log_scale") != std::string::npos)
            model.emission.log_scale = {"log_scale", m};
        else if (name.rfind("f_net.", 0) == 0)
            model.f_net->params()[fi++].value = m;
        else if (name.rfind("g_net.", 0) == 0)
            model.g_net->params()[gi++].value = m;
        else if (name.rfind("emission_net.", 0) == 0)
            model.emission.net->params()[ei++].value = m;
        else
            throw Error("load_model: unknown weight entry \"" + name + "\"");
    }
    model.dynamics = BlockDynamics(rho_m.row(0).transpose(), omega_m.row(0).transpose());
    return model;
}

} // namespace dbf
