#include "dbf/nets.hpp"

namespace dbf::nn {

MatrixXd glorot_uniform(int rows, int cols, int fan_in, int fan_out, Rng& rng) {
    const double bound = std::sqrt(6.0 / (fan_in + fan_out));
    MatrixXd m(rows, cols);
    for (int j = 0; j < cols; ++j)
        for (int i = 0; i < rows; ++i) m(i, j) = rng.uniform(-bound, bound);
    return m;
}

// ---------------------------------------------------------------------------
// DenseNet
// ---------------------------------------------------------------------------

DenseNet::DenseNet(int in, int out, Rng& rng) : in_(in), out_(out) {
    params_.push_back({"w", glorot_uniform(in, out, in, out, rng)});
    params_.push_back({"b", MatrixXd::Zero(1, out)});
}

DenseNet::DenseNet(MatrixXd w, MatrixXd b)
    : in_(static_cast<int>(w.rows())), out_(static_cast<int>(w.cols())) {
    if (b.rows() != 1 || b.cols() != w.cols()) throw DimensionError("DenseNet: bad bias shape");
    params_.push_back({"w", std::move(w)});
    params_.push_back({"b", std::move(b)});
}

MatrixXd DenseNet::forward(const MatrixXd& x) const {
    return (x * params_[0].value).rowwise() + params_[1].value.row(0);
}

ad::Var DenseNet::forward_tape(ad::Tape& t, ad::Var x, const std::vector<ad::Var>& p) const {
    return t.add(t.matmul(x, p[0]), p[1]);
}

json DenseNet::architecture() const {
    return {{"type", "dense"}, {"in", in_}, {"out", out_}};
}

// ---------------------------------------------------------------------------
// LinearBlockNet
// params per non-final block: w, b, gamma, beta; final block: w, b
// ---------------------------------------------------------------------------

LinearBlockNet::LinearBlockNet(int in, int hidden, int out, int n_blocks, Rng& rng)
    : in_(in), hidden_(hidden), out_(out), n_blocks_(n_blocks) {
    if (n_blocks < 2) throw ConfigError("LinearBlockNet: need at least 2 blocks");
    for (int b = 0; b < n_blocks; ++b) {
        const int bin = (b == 0) ? in : hidden;
        const int bout = (b == n_blocks - 1) ? out : hidden;
        const std::string tag = "block" + std::to_string(b) + ".";
        params_.push_back({tag + "w", glorot_uniform(bin, bout, bin, bout, rng)});
        params_.push_back({tag + "b", MatrixXd::Zero(1, bout)});
        if (b != n_blocks - 1) {
            params_.push_back({tag + "gamma", MatrixXd::Ones(1, bout)});
            params_.push_back({tag + "beta", MatrixXd::Zero(1, bout)});
        }
    }
}

MatrixXd LinearBlockNet::forward(const MatrixXd& x) const {
    MatrixXd h = x;
    size_t p = 0;
    for (int b = 0; b < n_blocks_; ++b) {
        const bool last = (b == n_blocks_ - 1);
        MatrixXd y = (h * params_[p].value).rowwise() + params_[p + 1].value.row(0);
        p += 2;
        if (last) return y;
        y = ad::fwd::relu(ad::fwd::layer_norm(y, params_[p].value, params_[p + 1].value));
        p += 2;
        if (y.cols() == h.cols()) y += h;
        h = std::move(y);
    }
    return h;
}

ad::Var LinearBlockNet::forward_tape(ad::Tape& t, ad::Var x,
                                     const std::vector<ad::Var>& pv) const {
    ad::Var h = x;
    size_t p = 0;
    for (int b = 0; b < n_blocks_; ++b) {
        const bool last = (b == n_blocks_ - 1);
        ad::Var y = t.add(t.matmul(h, pv[p]), pv[p + 1]);
        p += 2;
        if (last) return y;
        y = t.relu(t.layer_norm(y, pv[p], pv[p + 1]));
        p += 2;
        if (t.val(y).cols() == t.val(h).cols()) y = t.add(y, h);
        h = y;
    }
    return h;
}

json LinearBlockNet::architecture() const {
    return {{"type", "linear_block"}, {"in", in_},       {"hidden", hidden_},
            {"out", out_},            {"blocks", n_blocks_},
            {"block_order", "dense-layernorm-relu-skip"}};
}

// ---------------------------------------------------------------------------
// CircularConvNet
// params per conv block: kernel, gamma, beta; head: w, b
// ---------------------------------------------------------------------------

CircularConvNet::CircularConvNet(int length, int channels, int out, int n_blocks, Rng& rng,
                                 int kernel_width)
    : length_(length), channels_(channels), out_(out), n_blocks_(n_blocks),
      width_(kernel_width) {
    if (n_blocks < 1) throw ConfigError("CircularConvNet: need at least 1 block");
    for (int b = 0; b < n_blocks; ++b) {
        const int cin = (b == 0) ? 1 : channels;
        const std::string tag = "conv" + std::to_string(b) + ".";
        params_.push_back({tag + "kernel", glorot_uniform(channels, cin * width_, cin * width_,
                                                          channels * width_, rng)});
        params_.push_back({tag + "gamma", MatrixXd::Ones(1, channels * length)});
        params_.push_back({tag + "beta", MatrixXd::Zero(1, channels * length)});
    }
    const int flat = channels * length;
    params_.push_back({"head.w", glorot_uniform(flat, out, flat, out, rng)});
    params_.push_back({"head.b", MatrixXd::Zero(1, out)});
}

MatrixXd CircularConvNet::forward(const MatrixXd& x) const {
    MatrixXd h = x;
    size_t p = 0;
    for (int b = 0; b < n_blocks_; ++b) {
        const int cin = (b == 0) ? 1 : channels_;
        MatrixXd y = ad::fwd::conv1d_circular(h, params_[p].value, cin, channels_, length_,
                                              width_);
        y = ad::fwd::relu(ad::fwd::layer_norm(y, params_[p + 1].value, params_[p + 2].value));
        p += 3;
        if (y.cols() == h.cols()) y += h;
        h = std::move(y);
    }
    return (h * params_[p].value).rowwise() + params_[p + 1].value.row(0);
}

ad::Var CircularConvNet::forward_tape(ad::Tape& t, ad::Var x,
                                      const std::vector<ad::Var>& pv) const {
    ad::Var h = x;
    size_t p = 0;
    for (int b = 0; b < n_blocks_; ++b) {
        const int cin = (b == 0) ? 1 : channels_;
        ad::Var y = t.conv1d_circular(h, pv[p], cin, channels_, length_, width_);
        y = t.relu(t.layer_norm(y, pv[p + 1], pv[p + 2]));
        p += 3;
        if (t.val(y).cols() == t.val(h).cols()) y = t.add(y, h);
        h = y;
    }
    return t.add(t.matmul(h, pv[p]), pv[p + 1]);
}

json CircularConvNet::architecture() const {
    return {{"type", "circular_conv"}, {"length", length_},   {"channels", channels_},
            {"out", out_},             {"blocks", n_blocks_}, {"kernel_width", width_}};
}

std::unique_ptr<Net> make_net(const json& arch, Rng& rng) {
    const std::string type = arch.at("type");
    if (type == "dense") return std::make_unique<DenseNet>(arch.at("in"), arch.at("out"), rng);
    if (type == "linear_block")
        return std::make_unique<LinearBlockNet>(arch.at("in"), arch.at("hidden"),
                                                arch.at("out"), arch.at("blocks"), rng);
    if (type == "circular_conv")
        return std::make_unique<CircularConvNet>(arch.at("length"), arch.at("channels"),
                                                 arch.at("out"), arch.at("blocks"), rng,
                                                 arch.value("kernel_width", 5));
    throw ConfigError("make_net: unknown architecture type \"" + type + "\"");
}

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

void Adam::update(std::vector<Param*>& params, const std::vector<MatrixXd>& grads) {
    if (params.size() != grads.size()) throw DimensionError("Adam: gradient count mismatch");
    for (size_t i = 0; i < grads.size(); ++i)
        if (!grads[i].allFinite())
            throw DivergenceError("Adam: non-finite gradient in parameter \"" +
                                  params[i]->name + "\"");
    if (m_.empty()) {
        for (const auto* p : params) {
            m_.push_back(MatrixXd::Zero(p->value.rows(), p->value.cols()));
            v_.push_back(MatrixXd::Zero(p->value.rows(), p->value.cols()));
        }
    }
    if (m_.size() != params.size()) throw DimensionError("Adam: parameter set changed");
    ++step_;
    const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(step_));
    const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(step_));
    for (size_t i = 0; i < params.size(); ++i) {
        m_[i] = beta1_ * m_[i] + (1.0 - beta1_) * grads[i];
        v_[i] = beta2_ * v_[i] + (1.0 - beta2_) * grads[i].cwiseProduct(grads[i]);
        MatrixXd mhat = m_[i] / bc1;
        MatrixXd vhat = v_[i] / bc2;
        params[i]->value.array() -= lr_ * mhat.array() / (vhat.array().sqrt() + eps_);
    }
}

} // namespace dbf::nn
