#ifndef DBF_NETS_HPP
#define DBF_NETS_HPP

#include <memory>
#include <string>
#include <vector>

#include <json.hpp>

#include "dbf/common.hpp"
#include "dbf/tensor.hpp"

namespace dbf::nn {

using json = nlohmann::json;

struct Param {
    std::string name;
    MatrixXd value;
};

// ---------------------------------------------------------------------------
// Networks own their parameters and provide two forward paths: a plain
// numeric one for inference and a tape one for training. The tape path takes
// the parameter Vars in declaration order (push_params).
// ---------------------------------------------------------------------------
class Net {
public:
    virtual ~Net() = default;
    virtual int in_dim() const = 0;
    virtual int out_dim() const = 0;
    virtual MatrixXd forward(const MatrixXd& x) const = 0;
    virtual ad::Var forward_tape(ad::Tape& t, ad::Var x,
                                 const std::vector<ad::Var>& params) const = 0;
    virtual json architecture() const = 0;

    std::vector<Param>& params() { return params_; }
    const std::vector<Param>& params() const { return params_; }

    std::vector<ad::Var> push_params(ad::Tape& t, bool trainable = true) const {
        std::vector<ad::Var> vars;
        vars.reserve(params_.size());
        for (const auto& p : params_) vars.push_back(t.leaf(p.value, trainable));
        return vars;
    }

    MatrixXd operator()(const MatrixXd& x) const { return forward(x); }

protected:
    std::vector<Param> params_;
};

/// Single affine layer, x W + b. Used where the observation map is linear.
class DenseNet final : public Net {
public:
    DenseNet(int in, int out, Rng& rng);
    DenseNet(MatrixXd w, MatrixXd b);
    int in_dim() const override { return in_; }
    int out_dim() const override { return out_; }
    MatrixXd forward(const MatrixXd& x) const override;
    ad::Var forward_tape(ad::Tape& t, ad::Var x,
                         const std::vector<ad::Var>& params) const override;
    json architecture() const override;

private:
    int in_, out_;
};

/// A stack of linear blocks (dense -> layer norm -> ReLU, plus a skip
/// connection when widths match) with a plain linear projection as the last
/// block. The first block expands to `hidden`, intermediate blocks keep it.
class LinearBlockNet final : public Net {
public:
    LinearBlockNet(int in, int hidden, int out, int n_blocks, Rng& rng);
    int in_dim() const override { return in_; }
    int out_dim() const override { return out_; }
    MatrixXd forward(const MatrixXd& x) const override;
    ad::Var forward_tape(ad::Tape& t, ad::Var x,
                         const std::vector<ad::Var>& params) const override;
    json architecture() const override;

private:
    int in_, hidden_, out_, n_blocks_;
};

/// Circular 1-D conv trunk (kernel width 5, wrap-around padding) followed by
/// a dense head over the flattened channels x positions.
class CircularConvNet final : public Net {
public:
    CircularConvNet(int length, int channels, int out, int n_blocks, Rng& rng,
                    int kernel_width = 5);
    int in_dim() const override { return length_; }
    int out_dim() const override { return out_; }
    MatrixXd forward(const MatrixXd& x) const override;
    ad::Var forward_tape(ad::Tape& t, ad::Var x,
                         const std::vector<ad::Var>& params) const override;
    json architecture() const override;

private:
    int length_, channels_, out_, n_blocks_, width_;
};

std::unique_ptr<Net> make_net(const json& architecture, Rng& rng);

// ---------------------------------------------------------------------------
// Adam with bias correction; moments mirror the parameter list handed to the
// first update.
// ---------------------------------------------------------------------------
class Adam {
public:
    explicit Adam(double lr = 1e-3, double beta1 = 0.9, double beta2 = 0.999,
                  double eps = 1e-8)
        : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}

    /// In-place update. Throws DivergenceError on a non-finite gradient
    /// without touching the parameters.
    void update(std::vector<Param*>& params, const std::vector<MatrixXd>& grads);

    int64_t step_count() const { return step_; }
    double lr() const { return lr_; }
    void set_lr(double lr) { lr_ = lr; }

private:
    double lr_, beta1_, beta2_, eps_;
    int64_t step_ = 0;
    std::vector<MatrixXd> m_, v_;
};

/// Glorot-uniform dense init, bound sqrt(6 / (fan_in + fan_out)).
MatrixXd glorot_uniform(int rows, int cols, int fan_in, int fan_out, Rng& rng);

} // namespace dbf::nn

#endif
