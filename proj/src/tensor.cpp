#include "dbf/tensor.hpp"

#include <memory>

#include <Eigen/Cholesky>

namespace dbf::ad {

namespace {

using Eigen::Index;

enum class Bcast { None, RowA, RowB, ScalarA, ScalarB };

Bcast broadcast_kind(const MatrixXd& a, const MatrixXd& b) {
    if (a.rows() == b.rows() && a.cols() == b.cols()) return Bcast::None;
    if (a.rows() == 1 && a.cols() == 1) return Bcast::ScalarA;
    if (b.rows() == 1 && b.cols() == 1) return Bcast::ScalarB;
    if (a.rows() == 1 && a.cols() == b.cols()) return Bcast::RowA;
    if (b.rows() == 1 && b.cols() == a.cols()) return Bcast::RowB;
    throw DimensionError("tensor op: incompatible shapes " + std::to_string(a.rows()) + "x" +
                         std::to_string(a.cols()) + " vs " + std::to_string(b.rows()) + "x" +
                         std::to_string(b.cols()));
}

// reduce a full-shaped gradient back onto a broadcast operand
MatrixXd reduce_to(const MatrixXd& g, Index rows, Index cols) {
    if (g.rows() == rows && g.cols() == cols) return g;
    if (rows == 1 && cols == 1) {
        MatrixXd out(1, 1);
        out(0, 0) = g.sum();
        return out;
    }
    if (rows == 1) return g.colwise().sum();
    throw DimensionError("tensor op: cannot reduce gradient");
}

} // namespace

// ---------------------------------------------------------------------------
// Tape plumbing
// ---------------------------------------------------------------------------

Var Tape::push(MatrixXd value, bool requires_grad, std::function<void(Tape&)> back) {
    Node n;
    n.value = std::move(value);
    n.requires_grad = requires_grad;
    n.back = std::move(back);
    nodes_.push_back(std::move(n));
    return Var{static_cast<int>(nodes_.size()) - 1};
}

Var Tape::leaf(MatrixXd value, bool requires_grad) {
    return push(std::move(value), requires_grad, nullptr);
}

Var Tape::scalar_const(double v) {
    MatrixXd m(1, 1);
    m(0, 0) = v;
    return constant(std::move(m));
}

MatrixXd& Tape::grad_ref(int idx) {
    Node& n = nodes_[idx];
    if (!n.grad_ready) {
        n.grad = MatrixXd::Zero(n.value.rows(), n.value.cols());
        n.grad_ready = true;
    }
    return n.grad;
}

const MatrixXd& Tape::grad(Var v) const {
    const Node& n = nodes_[v.idx];
    if (!n.grad_ready) throw Error("Tape::grad: no gradient at this node (did backward run?)");
    return n.grad;
}

void Tape::accum(int idx, const MatrixXd& g) {
    if (!nodes_[idx].requires_grad) return;
    grad_ref(idx) += g;
}

void Tape::backward(Var loss) {
    const Node& ln = nodes_[loss.idx];
    if (ln.value.rows() != 1 || ln.value.cols() != 1)
        throw Error("Tape::backward: loss must be a 1x1 scalar");
    if (!ln.requires_grad)
        throw Error("Tape::backward: loss does not depend on any trainable leaf");
    grad_ref(loss.idx).setConstant(1.0);
    for (int i = loss.idx; i >= 0; --i) {
        Node& n = nodes_[i];
        if (n.requires_grad && n.grad_ready && n.back) n.back(*this);
    }
}

// ---------------------------------------------------------------------------
// Elementwise binary
// ---------------------------------------------------------------------------

namespace {

enum class BinOp { Add, Sub, Mul, Div };

template <BinOp Op>
MatrixXd apply_binary(const MatrixXd& a, const MatrixXd& b, Bcast k) {
    auto combine = [](const auto& x, const auto& y) -> MatrixXd {
        if constexpr (Op == BinOp::Add) return (x + y).matrix();
        if constexpr (Op == BinOp::Sub) return (x - y).matrix();
        if constexpr (Op == BinOp::Mul) return (x * y).matrix();
        if constexpr (Op == BinOp::Div) return (x / y).matrix();
    };
    switch (k) {
        case Bcast::None:
            return combine(a.array(), b.array());
        case Bcast::ScalarA: {
            Eigen::ArrayXXd ae = Eigen::ArrayXXd::Constant(b.rows(), b.cols(), a(0, 0));
            return combine(ae, b.array());
        }
        case Bcast::ScalarB: {
            Eigen::ArrayXXd be = Eigen::ArrayXXd::Constant(a.rows(), a.cols(), b(0, 0));
            return combine(a.array(), be);
        }
        case Bcast::RowA: {
            if constexpr (Op == BinOp::Add) return (b.array().rowwise() + a.row(0).array()).matrix();
            if constexpr (Op == BinOp::Mul) return (b.array().rowwise() * a.row(0).array()).matrix();
            MatrixXd ae = a.replicate(b.rows(), 1);
            return combine(ae.array(), b.array());
        }
        case Bcast::RowB: {
            if constexpr (Op == BinOp::Add) return (a.array().rowwise() + b.row(0).array()).matrix();
            if constexpr (Op == BinOp::Sub) return (a.array().rowwise() - b.row(0).array()).matrix();
            if constexpr (Op == BinOp::Mul) return (a.array().rowwise() * b.row(0).array()).matrix();
            if constexpr (Op == BinOp::Div) return (a.array().rowwise() / b.row(0).array()).matrix();
            MatrixXd be = b.replicate(a.rows(), 1);
            return combine(a.array(), be.array());
        }
    }
    throw Error("unreachable");
}

// expand a possibly-broadcast operand to the full output shape
MatrixXd expand(const MatrixXd& m, Index rows, Index cols) {
    if (m.rows() == rows && m.cols() == cols) return m;
    if (m.rows() == 1 && m.cols() == 1) return MatrixXd::Constant(rows, cols, m(0, 0));
    return m.replicate(rows, 1);
}

} // namespace

Var Tape::add(Var a, Var b) {
    const MatrixXd& va = val(a);
    const MatrixXd& vb = val(b);
    Bcast k = broadcast_kind(va, vb);
    MatrixXd out = apply_binary<BinOp::Add>(va, vb, k);
    bool rg = requires_grad(a) || requires_grad(b);
    int ia = a.idx, ib = b.idx;
    Index ra = va.rows(), ca = va.cols(), rb = vb.rows(), cb = vb.cols();
    int self = static_cast<int>(nodes_.size());
    return push(std::move(out), rg, rg ? std::function<void(Tape&)>([=](Tape& t) {
        const MatrixXd& g = t.grad_ref(self);
        t.accum(ia, reduce_to(g, ra, ca));
        t.accum(ib, reduce_to(g, rb, cb));
    }) : nullptr);
}

Var Tape::sub(Var a, Var b) {
    const MatrixXd& va = val(a);
    const MatrixXd& vb = val(b);
    Bcast k = broadcast_kind(va, vb);
    MatrixXd out = apply_binary<BinOp::Sub>(va, vb, k);
    bool rg = requires_grad(a) || requires_grad(b);
    int ia = a.idx, ib = b.idx;
    Index ra = va.rows(), ca = va.cols(), rb = vb.rows(), cb = vb.cols();
    int self = static_cast<int>(nodes_.size());
    return push(std::move(out), rg, rg ? std::function<void(Tape&)>([=](Tape& t) {
        const MatrixXd& g = t.grad_ref(self);
        t.accum(ia, reduce_to(g, ra, ca));
        t.accum(ib, reduce_to(-g, rb, cb));
    }) : nullptr);
}

Var Tape::mul(Var a, Var b) {
    const MatrixXd& va = val(a);
    const MatrixXd& vb = val(b);
    Bcast k = broadcast_kind(va, vb);
    MatrixXd out = apply_binary<BinOp::Mul>(va, vb, k);
    bool rg = requires_grad(a) || requires_grad(b);
    int ia = a.idx, ib = b.idx;
    Index ra = va.rows(), ca = va.cols(), rb = vb.rows(), cb = vb.cols();
    int self = static_cast<int>(nodes_.size());
    return push(std::move(out), rg, rg ? std::function<void(Tape&)>([=](Tape& t) {
        const MatrixXd& g = t.grad_ref(self);
        const MatrixXd ea = expand(t.val(Var{ia}), g.rows(), g.cols());
        const MatrixXd eb = expand(t.val(Var{ib}), g.rows(), g.cols());
        t.accum(ia, reduce_to(g.cwiseProduct(eb), ra, ca));
        t.accum(ib, reduce_to(g.cwiseProduct(ea), rb, cb));
    }) : nullptr);
}

Var Tape::div(Var a, Var b) {
    const MatrixXd& va = val(a);
    const MatrixXd& vb = val(b);
    Bcast k = broadcast_kind(va, vb);
    MatrixXd out = apply_binary<BinOp::Div>(va, vb, k);
    bool rg = requires_grad(a) || requires_grad(b);
    int ia = a.idx, ib = b.idx;
    Index ra = va.rows(), ca = va.cols(), rb = vb.rows(), cb = vb.cols();
    int self = static_cast<int>(nodes_.size());
    return push(std::move(out), rg, rg ? std::function<void(Tape&)>([=](Tape& t) {
        const MatrixXd& g = t.grad_ref(self);
        const MatrixXd ea = expand(t.val(Var{ia}), g.rows(), g.cols());
        const MatrixXd eb = expand(t.val(Var{ib}), g.rows(), g.cols());
        t.accum(ia, reduce_to(g.cwiseQuotient(eb), ra, ca));
        t.accum(ib, reduce_to(-(g.cwiseProduct(ea).cwiseQuotient(eb.cwiseProduct(eb))), rb, cb));
    }) : nullptr);
}

Var Tape::scale(Var a, double c) {
    MatrixXd out = c * val(a);
    bool rg = requires_grad(a);
    int ia = a.idx;
    int self = static_cast<int>(nodes_.size());
    return push(std::move(out), rg, rg ? std::function<void(Tape&)>([=](Tape& t) {
        t.accum(ia, c * t.grad_ref(self));
    }) : nullptr);
}

Var Tape::add_scalar(Var a, double c) {
    MatrixXd out = val(a).array() + c;
    bool rg = requires_grad(a);
    int ia = a.idx;
    int self = static_cast<int>(nodes_.size());
    return push(std::move(out), rg, rg ? std::function<void(Tape&)>([=](Tape& t) {
        t.accum(ia, t.grad_ref(self));
    }) : nullptr);
}

// ---------------------------------------------------------------------------
// Elementwise unary
// ---------------------------------------------------------------------------

Var Tape::relu(Var a) {
    MatrixXd out = val(a).cwiseMax(0.0);
    bool rg = requires_grad(a);
    int ia = a.idx;
    int self = static_cast<int>(nodes_.size());
    return push(std::move(out), rg, rg ? std::function<void(Tape&)>([=](Tape& t) {
        const MatrixXd& x = t.val(Var{ia});
        const MatrixXd& g = t.grad_ref(self);
        t.accum(ia, (x.array() > 0.0).cast<double>().matrix().cwiseProduct(g));
    }) : nullptr);
}

Var Tape::exp(Var a) {
    MatrixXd out = val(a).array().exp();
    bool rg = requires_grad(a);
    int ia = a.idx;
    int self = static_cast<int>(nodes_.size());
    return push(std::move(out), rg, rg ? std::function<void(Tape&)>([=](Tape& t) {
        t.accum(ia, t.val(Var{self}).cwiseProduct(t.grad_ref(self)));
    }) : nullptr);
}

Var Tape::log(Var a) {
    MatrixXd out = val(a).array().log();
    bool rg = requires_grad(a);
    int ia = a.idx;
    int self = static_cast<int>(nodes_.size());
    return push(std::move(out), rg, rg ? std::function<void(Tape&)>([=](Tape& t) {
        t.accum(ia, t.grad_ref(self).cwiseQuotient(t.val(Var{ia})));
    }) : nullptr);
}

Var Tape::sqrt(Var a) {
    MatrixXd out = val(a).array().sqrt();
    bool rg = requires_grad(a);
    int ia = a.idx;
    int self = static_cast<int>(nodes_.size());
    return push(std::move(out), rg, rg ? std::function<void(Tape&)>([=](Tape& t) {
        t.accum(ia, (0.5 * t.grad_ref(self).array() / t.val(Var{self}).array()).matrix());
    }) : nullptr);
}

Var Tape::sin(Var a) {
    MatrixXd out = val(a).array().sin();
    bool rg = requires_grad(a);
    int ia = a.idx;
    int self = static_cast<int>(nodes_.size());
    return push(std::move(out), rg, rg ? std::function<void(Tape&)>([=](Tape& t) {
        t.accum(ia, t.val(Var{ia}).array().cos().matrix().cwiseProduct(t.grad_ref(self)));
    }) : nullptr);
}

Var Tape::cos(Var a) {
    MatrixXd out = val(a).array().cos();
    bool rg = requires_grad(a);
    int ia = a.idx;
    int self = static_cast<int>(nodes_.size());
    return push(std::move(out), rg, rg ? std::function<void(Tape&)>([=](Tape& t) {
        t.accum(ia, (-t.val(Var{ia}).array().sin()).matrix().cwiseProduct(t.grad_ref(self)));
    }) : nullptr);
}

Var Tape::softplus(Var a) {
    MatrixXd out = val(a).unaryExpr([](double x) {
        return x > 30.0 ? x : std::log1p(std::exp(x));
    });
    bool rg = requires_grad(a);
    int ia = a.idx;
    int self = static_cast<int>(nodes_.size());
    return push(std::move(out), rg, rg ? std::function<void(Tape&)>([=](Tape& t) {
        MatrixXd s = t.val(Var{ia}).unaryExpr([](double x) { return 1.0 / (1.0 + std::exp(-x)); });
        t.accum(ia, s.cwiseProduct(t.grad_ref(self)));
    }) : nullptr);
}

// ---------------------------------------------------------------------------
// matmul
// ---------------------------------------------------------------------------

Var Tape::matmul(Var a, Var b) {
    const MatrixXd& va = val(a);
    const MatrixXd& vb = val(b);
    if (va.cols() != vb.rows()) throw DimensionError("matmul: inner dimensions differ");
    MatrixXd out = va * vb;
    bool rg = requires_grad(a) || requires_grad(b);
    int ia = a.idx, ib = b.idx;
    int self = static_cast<int>(nodes_.size());
    return push(std::move(out), rg, rg ? std::function<void(Tape&)>([=](Tape& t) {
        const MatrixXd& g = t.grad_ref(self);
        if (t.requires_grad(Var{ia})) t.accum(ia, g * t.val(Var{ib}).transpose());
        if (t.requires_grad(Var{ib})) t.accum(ib, t.val(Var{ia}).transpose() * g);
    }) : nullptr);
}

// ---------------------------------------------------------------------------
// layer norm
// ---------------------------------------------------------------------------

Var Tape::layer_norm(Var x, Var gamma, Var beta) {
    const MatrixXd& vx = val(x);
    const Index B = vx.rows(), d = vx.cols();
    if (val(gamma).cols() != d || val(beta).cols() != d)
        throw DimensionError("layer_norm: gamma/beta must be 1 x feature");
    MatrixXd xhat(B, d);
    Eigen::VectorXd inv_std(B);
    for (Index i = 0; i < B; ++i) {
        const double mean = vx.row(i).mean();
        const double var = (vx.row(i).array() - mean).square().mean();
        if (var < 1e-12) {
            xhat.row(i).setZero();
            inv_std[i] = 0.0;  // marks the degenerate branch
        } else {
            inv_std[i] = 1.0 / std::sqrt(var);
            xhat.row(i) = (vx.row(i).array() - mean) * inv_std[i];
        }
    }
    MatrixXd out = (xhat.array().rowwise() * val(gamma).row(0).array()).rowwise() +
                   val(beta).row(0).array();
    bool rg = requires_grad(x) || requires_grad(gamma) || requires_grad(beta);
    int ix = x.idx, ig = gamma.idx, ibt = beta.idx;
    int self = static_cast<int>(nodes_.size());
    auto xhat_s = std::make_shared<MatrixXd>(std::move(xhat));
    auto inv_s = std::make_shared<Eigen::VectorXd>(std::move(inv_std));
    return push(std::move(out), rg, rg ? std::function<void(Tape&)>([=](Tape& t) {
        const MatrixXd& g = t.grad_ref(self);
        const MatrixXd& gam = t.val(Var{ig});
        if (t.requires_grad(Var{ibt})) t.accum(ibt, g.colwise().sum());
        if (t.requires_grad(Var{ig})) t.accum(ig, g.cwiseProduct(*xhat_s).colwise().sum());
        if (t.requires_grad(Var{ix})) {
            MatrixXd dxhat = g.array().rowwise() * gam.row(0).array();
            Eigen::VectorXd m1 = dxhat.rowwise().mean();
            Eigen::VectorXd m2 = dxhat.cwiseProduct(*xhat_s).rowwise().mean();
            MatrixXd dx = ((dxhat.colwise() - m1) -
                           (xhat_s->array().colwise() * m2.array()).matrix());
            dx.array().colwise() *= inv_s->array();
            t.accum(ix, dx);
        }
    }) : nullptr);
}

// ---------------------------------------------------------------------------
// circular conv1d
// ---------------------------------------------------------------------------

namespace {

// im2col for circular 1-D convolution, position-major rows: the patch matrix
// has row index p*N + n and column index ci*width + t, holding
// x(n, ci*len + (p + t - pad) mod len). Column segments are contiguous copies
// of input columns, so the build is memcpy-bound and the convolution itself
// becomes one GEMM.
MatrixXd im2col_circular(const MatrixXd& x, int c_in, int len, int width) {
    const Index n = x.rows();
    const int pad = width / 2;
    MatrixXd cols(n * len, static_cast<Index>(c_in) * width);
    for (int ci = 0; ci < c_in; ++ci) {
        for (int t = 0; t < width; ++t) {
            auto dst = cols.col(static_cast<Index>(ci) * width + t);
            for (int p = 0; p < len; ++p) {
                const int src_p = ((p + t - pad) % len + len) % len;
                dst.segment(static_cast<Index>(p) * n, n) =
                    x.col(static_cast<Index>(ci) * len + src_p);
            }
        }
    }
    return cols;
}

// transpose of im2col: accumulate patch-matrix gradients back onto the input
void col2im_circular_add(const MatrixXd& dcols, MatrixXd& dx, int c_in, int len, int width) {
    const Index n = dx.rows();
    const int pad = width / 2;
    for (int ci = 0; ci < c_in; ++ci) {
        for (int t = 0; t < width; ++t) {
            auto src = dcols.col(static_cast<Index>(ci) * width + t);
            for (int p = 0; p < len; ++p) {
                const int src_p = ((p + t - pad) % len + len) % len;
                dx.col(static_cast<Index>(ci) * len + src_p) +=
                    src.segment(static_cast<Index>(p) * n, n);
            }
        }
    }
}

// gather position-major GEMM output [N*len x c_out] into [N x c_out*len]
MatrixXd gather_conv_output(const MatrixXd& y, Index n, int c_out, int len) {
    MatrixXd out(n, static_cast<Index>(c_out) * len);
    for (int co = 0; co < c_out; ++co)
        for (int p = 0; p < len; ++p)
            out.col(static_cast<Index>(co) * len + p) =
                y.col(co).segment(static_cast<Index>(p) * n, n);
    return out;
}

MatrixXd scatter_conv_grad(const MatrixXd& g, Index n, int c_out, int len) {
    MatrixXd y(n * len, c_out);
    for (int co = 0; co < c_out; ++co)
        for (int p = 0; p < len; ++p)
            y.col(co).segment(static_cast<Index>(p) * n, n) =
                g.col(static_cast<Index>(co) * len + p);
    return y;
}

} // namespace

Var Tape::conv1d_circular(Var x, Var kernel, int c_in, int c_out, int len, int width) {
    const MatrixXd& vx = val(x);
    const MatrixXd& vk = val(kernel);
    if (width % 2 != 1) throw ConfigError("conv1d_circular: width must be odd");
    if (vx.cols() != static_cast<Index>(c_in) * len)
        throw DimensionError("conv1d_circular: input is not c_in*len wide");
    if (vk.rows() != c_out || vk.cols() != static_cast<Index>(c_in) * width)
        throw DimensionError("conv1d_circular: kernel is not c_out x c_in*width");
    MatrixXd cols = im2col_circular(vx, c_in, len, width);
    MatrixXd out = gather_conv_output(cols * vk.transpose(), vx.rows(), c_out, len);
    bool rg = requires_grad(x) || requires_grad(kernel);
    int ix = x.idx, ik = kernel.idx;
    int self = static_cast<int>(nodes_.size());
    // the patch matrix is rebuilt in the backward pass rather than stored
    return push(std::move(out), rg, rg ? std::function<void(Tape&)>([=](Tape& t) {
        const MatrixXd& g = t.grad_ref(self);
        const MatrixXd& xin = t.val(Var{ix});
        const MatrixXd& k = t.val(Var{ik});
        MatrixXd dy = scatter_conv_grad(g, xin.rows(), c_out, len);
        if (t.requires_grad(Var{ik})) {
            MatrixXd cols_b = im2col_circular(xin, c_in, len, width);
            t.accum(ik, dy.transpose() * cols_b);
        }
        if (t.requires_grad(Var{ix})) {
            MatrixXd dcols = dy * k;
            MatrixXd dx = MatrixXd::Zero(xin.rows(), xin.cols());
            col2im_circular_add(dcols, dx, c_in, len, width);
            t.accum(ix, dx);
        }
    }) : nullptr);
}

// ---------------------------------------------------------------------------
// reductions and reshapes
// ---------------------------------------------------------------------------

Var Tape::sum(Var a) {
    MatrixXd out(1, 1);
    out(0, 0) = val(a).sum();
    bool rg = requires_grad(a);
    int ia = a.idx;
    int self = static_cast<int>(nodes_.size());
    return push(std::move(out), rg, rg ? std::function<void(Tape&)>([=](Tape& t) {
        const MatrixXd& x = t.val(Var{ia});
        t.accum(ia, MatrixXd::Constant(x.rows(), x.cols(), t.grad_ref(self)(0, 0)));
    }) : nullptr);
}

Var Tape::row_sum(Var a) {
    MatrixXd out = val(a).rowwise().sum();
    bool rg = requires_grad(a);
    int ia = a.idx;
    int self = static_cast<int>(nodes_.size());
    return push(std::move(out), rg, rg ? std::function<void(Tape&)>([=](Tape& t) {
        const MatrixXd& g = t.grad_ref(self);
        t.accum(ia, g.replicate(1, t.val(Var{ia}).cols()));
    }) : nullptr);
}

Var Tape::slice_cols(Var a, int start, int n) {
    MatrixXd out = val(a).middleCols(start, n);
    bool rg = requires_grad(a);
    int ia = a.idx;
    int self = static_cast<int>(nodes_.size());
    return push(std::move(out), rg, rg ? std::function<void(Tape&)>([=](Tape& t) {
        MatrixXd g = MatrixXd::Zero(t.val(Var{ia}).rows(), t.val(Var{ia}).cols());
        g.middleCols(start, n) = t.grad_ref(self);
        t.accum(ia, g);
    }) : nullptr);
}

Var Tape::slice_rows(Var a, int start, int n) {
    MatrixXd out = val(a).middleRows(start, n);
    bool rg = requires_grad(a);
    int ia = a.idx;
    int self = static_cast<int>(nodes_.size());
    return push(std::move(out), rg, rg ? std::function<void(Tape&)>([=](Tape& t) {
        MatrixXd g = MatrixXd::Zero(t.val(Var{ia}).rows(), t.val(Var{ia}).cols());
        g.middleRows(start, n) = t.grad_ref(self);
        t.accum(ia, g);
    }) : nullptr);
}

Var Tape::concat_rows(const std::vector<Var>& parts) {
    if (parts.empty()) throw ConfigError("concat_rows: empty list");
    Index rows = 0;
    const Index cols = val(parts[0]).cols();
    for (Var p : parts) {
        if (val(p).cols() != cols) throw DimensionError("concat_rows: column mismatch");
        rows += val(p).rows();
    }
    MatrixXd out(rows, cols);
    Index at = 0;
    bool rg = false;
    std::vector<int> idxs;
    std::vector<Index> sizes;
    for (Var p : parts) {
        out.middleRows(at, val(p).rows()) = val(p);
        at += val(p).rows();
        rg = rg || requires_grad(p);
        idxs.push_back(p.idx);
        sizes.push_back(val(p).rows());
    }
    int self = static_cast<int>(nodes_.size());
    return push(std::move(out), rg, rg ? std::function<void(Tape&)>([=](Tape& t) {
        const MatrixXd& g = t.grad_ref(self);
        Index pos = 0;
        for (size_t i = 0; i < idxs.size(); ++i) {
            t.accum(idxs[i], g.middleRows(pos, sizes[i]));
            pos += sizes[i];
        }
    }) : nullptr);
}

Var Tape::cols_stride2(Var a, int offset) {
    const MatrixXd& v = val(a);
    if (v.cols() % 2 != 0) throw DimensionError("cols_stride2: odd column count");
    const Index half = v.cols() / 2;
    MatrixXd out(v.rows(), half);
    for (Index j = 0; j < half; ++j) out.col(j) = v.col(2 * j + offset);
    bool rg = requires_grad(a);
    int ia = a.idx;
    int self = static_cast<int>(nodes_.size());
    return push(std::move(out), rg, rg ? std::function<void(Tape&)>([=](Tape& t) {
        const MatrixXd& g = t.grad_ref(self);
        MatrixXd gx = MatrixXd::Zero(t.val(Var{ia}).rows(), t.val(Var{ia}).cols());
        for (Index j = 0; j < g.cols(); ++j) gx.col(2 * j + offset) = g.col(j);
        t.accum(ia, gx);
    }) : nullptr);
}

Var Tape::interleave2(Var even, Var odd) {
    const MatrixXd& ve = val(even);
    const MatrixXd& vo = val(odd);
    if (ve.rows() != vo.rows() || ve.cols() != vo.cols())
        throw DimensionError("interleave2: shape mismatch");
    MatrixXd out(ve.rows(), 2 * ve.cols());
    for (Index j = 0; j < ve.cols(); ++j) {
        out.col(2 * j) = ve.col(j);
        out.col(2 * j + 1) = vo.col(j);
    }
    bool rg = requires_grad(even) || requires_grad(odd);
    int ie = even.idx, io = odd.idx;
    int self = static_cast<int>(nodes_.size());
    return push(std::move(out), rg, rg ? std::function<void(Tape&)>([=](Tape& t) {
        const MatrixXd& g = t.grad_ref(self);
        const Index half = g.cols() / 2;
        MatrixXd ge(g.rows(), half), go(g.rows(), half);
        for (Index j = 0; j < half; ++j) {
            ge.col(j) = g.col(2 * j);
            go.col(j) = g.col(2 * j + 1);
        }
        t.accum(ie, ge);
        t.accum(io, go);
    }) : nullptr);
}

// ---------------------------------------------------------------------------
// log I0 and the fold/embed ops
// ---------------------------------------------------------------------------

namespace fwd {

double log_bessel_i0(double kappa) {
    if (kappa < 0.0) throw NumericalError("log_bessel_i0: negative concentration");
    if (kappa < 20.0) {
        // power series sum_k (kappa^2/4)^k / (k!)^2
        const double q = 0.25 * kappa * kappa;
        double term = 1.0, sum = 1.0;
        for (int k = 1; k < 64; ++k) {
            term *= q / (static_cast<double>(k) * k);
            sum += term;
            if (term < 1e-18 * sum) break;
        }
        return std::log(sum);
    }
    // asymptotic: I0(k) ~ e^k / sqrt(2 pi k) * (1 + 1/(8k) + 9/(2(8k)^2) + ...)
    const double inv8k = 1.0 / (8.0 * kappa);
    double series = 1.0, term = 1.0;
    // A_j(0) = prod_{i=1..j} (2i-1)^2 / j! * inv8k^j
    for (int j = 1; j <= 6; ++j) {
        const double odd = 2.0 * j - 1.0;
        term *= odd * odd * inv8k / j;
        series += term;
    }
    return kappa - 0.5 * std::log(2.0 * M_PI * kappa) + std::log(series);
}

double bessel_i0_ratio(double kappa) {
    if (kappa < 0.0) throw NumericalError("bessel_i0_ratio: negative concentration");
    if (kappa == 0.0) return 0.0;
    if (kappa < 20.0) {
        // direct series ratio I1/I0
        const double q = 0.25 * kappa * kappa;
        double t0 = 1.0, s0 = 1.0;
        double t1 = 0.5 * kappa, s1 = t1;
        for (int k = 1; k < 64; ++k) {
            t0 *= q / (static_cast<double>(k) * k);
            s0 += t0;
            t1 *= q / (static_cast<double>(k) * (k + 1));
            s1 += t1;
            if (t0 < 1e-18 * s0 && t1 < 1e-18 * s1) break;
        }
        return s1 / s0;
    }
    const double ik = 1.0 / kappa;
    // I1/I0 ~ 1 - 1/(2k) - 1/(8k^2) - 1/(8k^3) - 25/(128 k^4)
    return 1.0 - 0.5 * ik - 0.125 * ik * ik - 0.125 * ik * ik * ik -
           (25.0 / 128.0) * ik * ik * ik * ik;
}

} // namespace fwd

Var Tape::log_bessel_i0(Var kappa) {
    MatrixXd out = val(kappa).unaryExpr([](double k) { return fwd::log_bessel_i0(k); });
    bool rg = requires_grad(kappa);
    int ia = kappa.idx;
    int self = static_cast<int>(nodes_.size());
    return push(std::move(out), rg, rg ? std::function<void(Tape&)>([=](Tape& t) {
        MatrixXd r = t.val(Var{ia}).unaryExpr([](double k) { return fwd::bessel_i0_ratio(k); });
        t.accum(ia, r.cwiseProduct(t.grad_ref(self)));
    }) : nullptr);
}

Var Tape::triangle_fold(Var x, double period) {
    const double two_p = 2.0 * period;
    MatrixXd out = val(x).unaryExpr([&](double v) {
        double m = std::fmod(v, two_p);
        if (m < 0.0) m += two_p;
        return period - std::abs(m - period);
    });
    bool rg = requires_grad(x);
    int ia = x.idx;
    int self = static_cast<int>(nodes_.size());
    return push(std::move(out), rg, rg ? std::function<void(Tape&)>([=](Tape& t) {
        MatrixXd slope = t.val(Var{ia}).unaryExpr([&](double v) {
            double m = std::fmod(v, two_p);
            if (m < 0.0) m += two_p;
            return m < period ? 1.0 : -1.0;
        });
        t.accum(ia, slope.cwiseProduct(t.grad_ref(self)));
    }) : nullptr);
}

Var Tape::embed_patches(Var positions, const std::vector<Var>& patches, int frame, int patch) {
    const MatrixXd& pos = val(positions);
    const int k = static_cast<int>(patches.size());
    if (pos.cols() != 2 * k) throw DimensionError("embed_patches: positions must be B x 2k");
    const Index B = pos.rows();
    MatrixXd out = MatrixXd::Zero(B, static_cast<Index>(frame) * frame);
    const int corner_max = frame - patch - 1;
    for (int i = 0; i < k; ++i) {
        const MatrixXd& pimg = val(patches[i]);
        if (pimg.rows() != patch || pimg.cols() != patch)
            throw DimensionError("embed_patches: patch size mismatch");
        for (Index b = 0; b < B; ++b) {
            const double fx = pos(b, 2 * i), fy = pos(b, 2 * i + 1);
            const int x0 = std::min(static_cast<int>(std::floor(fx)), corner_max);
            const int y0 = std::min(static_cast<int>(std::floor(fy)), corner_max);
            const double ax = fx - x0, ay = fy - y0;
            for (int r = 0; r < patch; ++r)
                for (int c = 0; c < patch; ++c) {
                    const double v = pimg(r, c);
                    out(b, (y0 + r) * frame + (x0 + c)) += v * (1 - ax) * (1 - ay);
                    out(b, (y0 + r) * frame + (x0 + c + 1)) += v * ax * (1 - ay);
                    out(b, (y0 + r + 1) * frame + (x0 + c)) += v * (1 - ax) * ay;
                    out(b, (y0 + r + 1) * frame + (x0 + c + 1)) += v * ax * ay;
                }
        }
    }
    bool rg = requires_grad(positions);
    std::vector<int> pidx;
    for (Var p : patches) {
        rg = rg || requires_grad(p);
        pidx.push_back(p.idx);
    }
    int ipos = positions.idx;
    int self = static_cast<int>(nodes_.size());
    return push(std::move(out), rg, rg ? std::function<void(Tape&)>([=](Tape& t) {
        const MatrixXd& g = t.grad_ref(self);
        const MatrixXd& posv = t.val(Var{ipos});
        MatrixXd dpos = MatrixXd::Zero(posv.rows(), posv.cols());
        for (int i = 0; i < k; ++i) {
            const MatrixXd& pimg = t.val(Var{pidx[i]});
            MatrixXd dpatch = MatrixXd::Zero(patch, patch);
            for (Index b = 0; b < posv.rows(); ++b) {
                const double fx = posv(b, 2 * i), fy = posv(b, 2 * i + 1);
                const int x0 = std::min(static_cast<int>(std::floor(fx)), corner_max);
                const int y0 = std::min(static_cast<int>(std::floor(fy)), corner_max);
                const double ax = fx - x0, ay = fy - y0;
                double dax = 0.0, day = 0.0;
                for (int r = 0; r < patch; ++r)
                    for (int c = 0; c < patch; ++c) {
                        const double g00 = g(b, (y0 + r) * frame + (x0 + c));
                        const double g10 = g(b, (y0 + r) * frame + (x0 + c + 1));
                        const double g01 = g(b, (y0 + r + 1) * frame + (x0 + c));
                        const double g11 = g(b, (y0 + r + 1) * frame + (x0 + c + 1));
                        const double v = pimg(r, c);
                        dpatch(r, c) += g00 * (1 - ax) * (1 - ay) + g10 * ax * (1 - ay) +
                                        g01 * (1 - ax) * ay + g11 * ax * ay;
                        dax += v * ((g10 - g00) * (1 - ay) + (g11 - g01) * ay);
                        day += v * ((g01 - g00) * (1 - ax) + (g11 - g10) * ax);
                    }
                dpos(b, 2 * i) += dax;
                dpos(b, 2 * i + 1) += day;
            }
            t.accum(pidx[i], dpatch);
        }
        t.accum(ipos, dpos);
    }) : nullptr);
}

// ---------------------------------------------------------------------------
// batched small dense ops; each row of a [B x n*m] tensor is a row-major
// n x m matrix
// ---------------------------------------------------------------------------

namespace {

MatrixXd unpack(const MatrixXd& flat, Index b, int n, int m) {
    MatrixXd out(n, m);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < m; ++j) out(i, j) = flat(b, static_cast<Index>(i) * m + j);
    return out;
}

void pack_into(MatrixXd& flat, Index b, const MatrixXd& m) {
    for (Index i = 0; i < m.rows(); ++i)
        for (Index j = 0; j < m.cols(); ++j) flat(b, i * m.cols() + j) = m(i, j);
}

} // namespace

Var Tape::bmm(Var a, Var b, int n, int m, int k) {
    const MatrixXd& va = val(a);
    const MatrixXd& vb = val(b);
    if (va.cols() != static_cast<Index>(n) * m || vb.cols() != static_cast<Index>(m) * k ||
        va.rows() != vb.rows())
        throw DimensionError("bmm: shape mismatch");
    const Index B = va.rows();
    MatrixXd out(B, static_cast<Index>(n) * k);
    for (Index i = 0; i < B; ++i)
        pack_into(out, i, unpack(va, i, n, m) * unpack(vb, i, m, k));
    bool rg = requires_grad(a) || requires_grad(b);
    int ia = a.idx, ib = b.idx;
    int self = static_cast<int>(nodes_.size());
    return push(std::move(out), rg, rg ? std::function<void(Tape&)>([=](Tape& t) {
        const MatrixXd& g = t.grad_ref(self);
        const MatrixXd& A = t.val(Var{ia});
        const MatrixXd& Bv = t.val(Var{ib});
        MatrixXd da = MatrixXd::Zero(A.rows(), A.cols());
        MatrixXd db = MatrixXd::Zero(Bv.rows(), Bv.cols());
        for (Index i = 0; i < A.rows(); ++i) {
            MatrixXd G = unpack(g, i, n, k);
            pack_into(da, i, G * unpack(Bv, i, m, k).transpose());
            pack_into(db, i, unpack(A, i, n, m).transpose() * G);
        }
        t.accum(ia, da);
        t.accum(ib, db);
    }) : nullptr);
}

Var Tape::bmv(Var a, Var x, int n, int m) {
    const MatrixXd& va = val(a);
    const MatrixXd& vx = val(x);
    if (va.cols() != static_cast<Index>(n) * m || vx.cols() != m || va.rows() != vx.rows())
        throw DimensionError("bmv: shape mismatch");
    const Index B = va.rows();
    MatrixXd out(B, n);
    for (Index i = 0; i < B; ++i)
        out.row(i) = (unpack(va, i, n, m) * vx.row(i).transpose()).transpose();
    bool rg = requires_grad(a) || requires_grad(x);
    int ia = a.idx, ix = x.idx;
    int self = static_cast<int>(nodes_.size());
    return push(std::move(out), rg, rg ? std::function<void(Tape&)>([=](Tape& t) {
        const MatrixXd& g = t.grad_ref(self);
        const MatrixXd& A = t.val(Var{ia});
        const MatrixXd& X = t.val(Var{ix});
        MatrixXd da = MatrixXd::Zero(A.rows(), A.cols());
        MatrixXd dx = MatrixXd::Zero(X.rows(), X.cols());
        for (Index i = 0; i < A.rows(); ++i) {
            pack_into(da, i, g.row(i).transpose() * X.row(i));
            dx.row(i) = g.row(i) * unpack(A, i, n, m);
        }
        t.accum(ia, da);
        t.accum(ix, dx);
    }) : nullptr);
}

Var Tape::bspd_inverse(Var a, int n, const std::string& context) {
    const MatrixXd& va = val(a);
    if (va.cols() != static_cast<Index>(n) * n) throw DimensionError("bspd_inverse: not n*n wide");
    const Index B = va.rows();
    MatrixXd out(B, va.cols());
    for (Index i = 0; i < B; ++i) {
        MatrixXd M = unpack(va, i, n, n);
        M = 0.5 * (M + M.transpose());
        Eigen::LLT<MatrixXd> llt(M);
        if (llt.info() != Eigen::Success)
            throw NotPositiveDefiniteError(
                (context.empty() ? std::string("bspd_inverse") : context) +
                    ": matrix not positive definite (batch row " + std::to_string(i) + ")",
                0);
        pack_into(out, i, llt.solve(MatrixXd::Identity(n, n)));
    }
    bool rg = requires_grad(a);
    int ia = a.idx;
    int self = static_cast<int>(nodes_.size());
    return push(std::move(out), rg, rg ? std::function<void(Tape&)>([=](Tape& t) {
        const MatrixXd& g = t.grad_ref(self);
        const MatrixXd& y = t.val(Var{self});
        MatrixXd da = MatrixXd::Zero(g.rows(), g.cols());
        for (Index i = 0; i < g.rows(); ++i) {
            MatrixXd Y = unpack(y, i, n, n);
            MatrixXd G = unpack(g, i, n, n);
            MatrixXd d = -Y * G * Y;
            pack_into(da, i, 0.5 * (d + d.transpose()));
        }
        t.accum(ia, da);
    }) : nullptr);
}

Var Tape::bchol(Var a, int n, const std::string& context) {
    const MatrixXd& va = val(a);
    if (va.cols() != static_cast<Index>(n) * n) throw DimensionError("bchol: not n*n wide");
    const Index B = va.rows();
    MatrixXd out = MatrixXd::Zero(B, va.cols());
    for (Index i = 0; i < B; ++i) {
        MatrixXd M = unpack(va, i, n, n);
        M = 0.5 * (M + M.transpose());
        Eigen::LLT<MatrixXd> llt(M);
        if (llt.info() != Eigen::Success)
            throw NotPositiveDefiniteError(
                (context.empty() ? std::string("bchol") : context) +
                    ": matrix not positive definite (batch row " + std::to_string(i) + ")",
                0);
        pack_into(out, i, MatrixXd(llt.matrixL()));
    }
    bool rg = requires_grad(a);
    int ia = a.idx;
    int self = static_cast<int>(nodes_.size());
    return push(std::move(out), rg, rg ? std::function<void(Tape&)>([=](Tape& t) {
        const MatrixXd& g = t.grad_ref(self);
        const MatrixXd& lv = t.val(Var{self});
        MatrixXd da = MatrixXd::Zero(g.rows(), g.cols());
        for (Index i = 0; i < g.rows(); ++i) {
            MatrixXd L = unpack(lv, i, n, n);
            MatrixXd G = unpack(g, i, n, n);
            // Phi(L^T G) with halved diagonal, then two triangular solves
            MatrixXd P = (L.transpose() * G).triangularView<Eigen::Lower>();
            P.diagonal() *= 0.5;
            MatrixXd S = L.transpose()
                             .triangularView<Eigen::Upper>()
                             .solve(P);
            S = L.transpose().triangularView<Eigen::Upper>().solve(S.transpose()).transpose();
            // S = L^-T Phi L^-1; symmetrize for a symmetric input perturbation
            pack_into(da, i, 0.5 * (S + S.transpose()));
        }
        t.accum(ia, da);
    }) : nullptr);
}

Var Tape::blogdet_spd(Var a, int n) {
    const MatrixXd& va = val(a);
    if (va.cols() != static_cast<Index>(n) * n) throw DimensionError("blogdet_spd: not n*n wide");
    const Index B = va.rows();
    MatrixXd out(B, 1);
    MatrixXd inv(B, va.cols());
    for (Index i = 0; i < B; ++i) {
        MatrixXd M = unpack(va, i, n, n);
        M = 0.5 * (M + M.transpose());
        Eigen::LLT<MatrixXd> llt(M);
        if (llt.info() != Eigen::Success)
            throw NotPositiveDefiniteError(
                "blogdet_spd: matrix not positive definite (batch row " + std::to_string(i) + ")", 0);
        MatrixXd L = llt.matrixL();
        out(i, 0) = 2.0 * L.diagonal().array().log().sum();
        pack_into(inv, i, llt.solve(MatrixXd::Identity(n, n)));
    }
    bool rg = requires_grad(a);
    int ia = a.idx;
    int self = static_cast<int>(nodes_.size());
    auto inv_s = std::make_shared<MatrixXd>(std::move(inv));
    return push(std::move(out), rg, rg ? std::function<void(Tape&)>([=](Tape& t) {
        const MatrixXd& g = t.grad_ref(self);
        MatrixXd da(inv_s->rows(), inv_s->cols());
        for (Index i = 0; i < da.rows(); ++i) da.row(i) = g(i, 0) * inv_s->row(i);
        t.accum(ia, da);
    }) : nullptr);
}

Var Tape::badd_diag(Var a, Var d, int n) {
    const MatrixXd& va = val(a);
    const MatrixXd& vd = val(d);
    if (va.cols() != static_cast<Index>(n) * n || vd.cols() != n)
        throw DimensionError("badd_diag: shape mismatch");
    if (vd.rows() != va.rows() && vd.rows() != 1)
        throw DimensionError("badd_diag: diagonal row count mismatch");
    MatrixXd out = va;
    for (Index i = 0; i < va.rows(); ++i) {
        const Index di = vd.rows() == 1 ? 0 : i;
        for (int j = 0; j < n; ++j) out(i, static_cast<Index>(j) * n + j) += vd(di, j);
    }
    bool rg = requires_grad(a) || requires_grad(d);
    int ia = a.idx, id = d.idx;
    Index drows = vd.rows();
    int self = static_cast<int>(nodes_.size());
    return push(std::move(out), rg, rg ? std::function<void(Tape&)>([=](Tape& t) {
        const MatrixXd& g = t.grad_ref(self);
        t.accum(ia, g);
        MatrixXd gd = MatrixXd::Zero(drows, n);
        for (Index i = 0; i < g.rows(); ++i) {
            const Index di = drows == 1 ? 0 : i;
            for (int j = 0; j < n; ++j) gd(di, j) += g(i, static_cast<Index>(j) * n + j);
        }
        t.accum(id, gd);
    }) : nullptr);
}

Var Tape::bdiag(Var a, int n) {
    const MatrixXd& va = val(a);
    if (va.cols() != static_cast<Index>(n) * n) throw DimensionError("bdiag: not n*n wide");
    MatrixXd out(va.rows(), n);
    for (Index i = 0; i < va.rows(); ++i)
        for (int j = 0; j < n; ++j) out(i, j) = va(i, static_cast<Index>(j) * n + j);
    bool rg = requires_grad(a);
    int ia = a.idx;
    int self = static_cast<int>(nodes_.size());
    return push(std::move(out), rg, rg ? std::function<void(Tape&)>([=](Tape& t) {
        const MatrixXd& g = t.grad_ref(self);
        MatrixXd ga = MatrixXd::Zero(g.rows(), static_cast<Index>(n) * n);
        for (Index i = 0; i < g.rows(); ++i)
            for (int j = 0; j < n; ++j) ga(i, static_cast<Index>(j) * n + j) = g(i, j);
        t.accum(ia, ga);
    }) : nullptr);
}

Var Tape::btranspose(Var a, int n, int m) {
    const MatrixXd& va = val(a);
    if (va.cols() != static_cast<Index>(n) * m) throw DimensionError("btranspose: not n*m wide");
    MatrixXd out(va.rows(), va.cols());
    for (Index b = 0; b < va.rows(); ++b)
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < m; ++j)
                out(b, static_cast<Index>(j) * n + i) = va(b, static_cast<Index>(i) * m + j);
    bool rg = requires_grad(a);
    int ia = a.idx;
    int self = static_cast<int>(nodes_.size());
    return push(std::move(out), rg, rg ? std::function<void(Tape&)>([=](Tape& t) {
        const MatrixXd& g = t.grad_ref(self);
        MatrixXd ga(g.rows(), g.cols());
        for (Index b = 0; b < g.rows(); ++b)
            for (int i = 0; i < n; ++i)
                for (int j = 0; j < m; ++j)
                    ga(b, static_cast<Index>(i) * m + j) = g(b, static_cast<Index>(j) * n + i);
        t.accum(ia, ga);
    }) : nullptr);
}

// ---------------------------------------------------------------------------
// numeric forward twins
// ---------------------------------------------------------------------------

namespace fwd {

MatrixXd relu(const MatrixXd& x) { return x.cwiseMax(0.0); }

MatrixXd softplus(const MatrixXd& x) {
    return x.unaryExpr([](double v) { return v > 30.0 ? v : std::log1p(std::exp(v)); });
}

MatrixXd layer_norm(const MatrixXd& x, const MatrixXd& gamma, const MatrixXd& beta) {
    MatrixXd out(x.rows(), x.cols());
    for (Index i = 0; i < x.rows(); ++i) {
        const double mean = x.row(i).mean();
        const double var = (x.row(i).array() - mean).square().mean();
        if (var < 1e-12)
            out.row(i).setZero();
        else
            out.row(i) = (x.row(i).array() - mean) / std::sqrt(var);
    }
    out = (out.array().rowwise() * gamma.row(0).array()).rowwise() + beta.row(0).array();
    return out;
}

MatrixXd conv1d_circular(const MatrixXd& x, const MatrixXd& kernel, int c_in, int c_out,
                         int len, int width) {
    MatrixXd cols = im2col_circular(x, c_in, len, width);
    return gather_conv_output(cols * kernel.transpose(), x.rows(), c_out, len);
}

} // namespace fwd

// ---------------------------------------------------------------------------
// finite differences
// ---------------------------------------------------------------------------

double fd_relative_error(const std::function<double(const std::vector<MatrixXd>&)>& f,
                         const std::vector<MatrixXd>& at, const std::vector<MatrixXd>& grads,
                         const std::vector<MatrixXd>& direction, double step) {
    double analytic = 0.0;
    for (size_t i = 0; i < grads.size(); ++i)
        analytic += grads[i].cwiseProduct(direction[i]).sum();
    std::vector<MatrixXd> plus = at, minus = at;
    for (size_t i = 0; i < at.size(); ++i) {
        plus[i] += step * direction[i];
        minus[i] -= step * direction[i];
    }
    const double numeric = (f(plus) - f(minus)) / (2.0 * step);
    const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-10});
    return std::abs(analytic - numeric) / denom;
}

} // namespace dbf::ad
