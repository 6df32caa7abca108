#ifndef DBF_TENSOR_HPP
#define DBF_TENSOR_HPP

#include <functional>
#include <string>
#include <vector>

#include "dbf/common.hpp"

namespace dbf::ad {

using dbf::MatrixXd;

// ---------------------------------------------------------------------------
// A tape-based reverse-mode engine over 2-D double tensors. Rows are batch
// entries for data tensors; parameters are [in x out] weight matrices or
// [1 x d] row vectors broadcast over the batch. A tape lives for one loss
// evaluation: push leaves, build the graph, call backward(loss) once, read
// gradients, throw the tape away. One tape per thread, never shared.
//
// Batched small-matrix ops (bmm, bspd_inverse, ...) treat each row of a
// [B x n*m] tensor as an n x m row-major matrix.
// ---------------------------------------------------------------------------

struct Var {
    int idx = -1;
    bool valid() const { return idx >= 0; }
};

class Tape {
public:
    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    Var leaf(MatrixXd value, bool requires_grad);
    Var constant(MatrixXd value) { return leaf(std::move(value), false); }
    Var scalar_const(double v);

    const MatrixXd& val(Var v) const { return nodes_[v.idx].value; }
    const MatrixXd& grad(Var v) const;
    bool requires_grad(Var v) const { return nodes_[v.idx].requires_grad; }
    size_t size() const { return nodes_.size(); }

    // elementwise with broadcast: operands of equal shape, or one of them
    // [1 x d] / [1 x 1]
    Var add(Var a, Var b);
    Var sub(Var a, Var b);
    Var mul(Var a, Var b);
    Var div(Var a, Var b);

    Var scale(Var a, double c);
    Var add_scalar(Var a, double c);
    Var neg(Var a) { return scale(a, -1.0); }

    Var relu(Var a);
    Var exp(Var a);
    Var log(Var a);
    Var sqrt(Var a);
    Var sin(Var a);
    Var cos(Var a);
    Var softplus(Var a);

    Var matmul(Var a, Var b);

    /// Layer normalization across columns, per row; rows with feature
    /// variance below 1e-12 normalize to zero. gamma/beta are [1 x d].
    Var layer_norm(Var x, Var gamma, Var beta);

    /// Circular 1-D convolution. x is [B x c_in*len] (channel-major
    /// columns), kernel [c_out x c_in*width], width odd. Output
    /// [B x c_out*len].
    Var conv1d_circular(Var x, Var kernel, int c_in, int c_out, int len, int width);

    Var sum(Var a);                       // -> [1 x 1]
    Var row_sum(Var a);                   // [B x d] -> [B x 1]

    Var slice_cols(Var a, int start, int n);
    Var slice_rows(Var a, int start, int n);
    Var concat_rows(const std::vector<Var>& parts);
    Var cols_stride2(Var a, int offset);              // offset 0 or 1
    Var interleave2(Var even, Var odd);

    /// log I0(kappa), elementwise, for kappa >= 0.
    Var log_bessel_i0(Var kappa);

    /// Triangle-wave fold into [0, period], elementwise.
    Var triangle_fold(Var x, double period);

    /// Paste k patches (each [p x p]) into a [frame x frame] canvas at
    /// bilinear positions. positions is [B x 2k] (x, y interleaved per
    /// patch), already folded into [0, frame - p]. Output [B x frame^2].
    Var embed_patches(Var positions, const std::vector<Var>& patches, int frame, int patch);

    // batched small dense matrices, one per row, row-major [n x m] layout
    Var bmm(Var a, Var b, int n, int m, int k);       // (n x m) * (m x k)
    Var bmv(Var a, Var x, int n, int m);              // (n x m) * (m)
    Var bspd_inverse(Var a, int n, const std::string& context = "");
    Var bchol(Var a, int n, const std::string& context = "");
    Var blogdet_spd(Var a, int n);                    // -> [B x 1]
    Var badd_diag(Var a, Var d, int n);               // add [B x n] (or [1 x n]) to diagonals
    Var bdiag(Var a, int n);                          // extract diagonals -> [B x n]
    Var btranspose(Var a, int n, int m);              // per-row [n x m] -> [m x n]

    /// Reverse sweep from a scalar loss; gradients accumulate into every
    /// requires_grad node reachable from it.
    void backward(Var loss);

private:
    struct Node {
        MatrixXd value;
        MatrixXd grad;
        bool requires_grad = false;
        bool grad_ready = false;
        std::function<void(Tape&)> back;
    };

    std::vector<Node> nodes_;

    Var push(MatrixXd value, bool requires_grad, std::function<void(Tape&)> back);
    MatrixXd& grad_ref(int idx);
    void accum(int idx, const MatrixXd& g);

    friend struct TapeAccess;
};

// numeric (tape-free) forward counterparts used by the inference path
namespace fwd {
MatrixXd relu(const MatrixXd& x);
MatrixXd softplus(const MatrixXd& x);
MatrixXd layer_norm(const MatrixXd& x, const MatrixXd& gamma, const MatrixXd& beta);
MatrixXd conv1d_circular(const MatrixXd& x, const MatrixXd& kernel, int c_in, int c_out,
                         int len, int width);
double log_bessel_i0(double kappa);
double bessel_i0_ratio(double kappa);  // I1/I0
} // namespace fwd

/// Central finite-difference directional derivative checker: returns the
/// relative error between <grad, dir> and (f(x+h*dir) - f(x-h*dir)) / 2h.
double fd_relative_error(const std::function<double(const std::vector<MatrixXd>&)>& f,
                         const std::vector<MatrixXd>& at, const std::vector<MatrixXd>& grads,
                         const std::vector<MatrixXd>& direction, double step);

} // namespace dbf::ad

#endif
