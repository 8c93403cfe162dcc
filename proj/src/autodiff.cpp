#include "mg/autodiff.hpp"

#include <cblas.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <unordered_set>

#include "json.hpp"

namespace mg::ad {

namespace {

[[noreturn]] void fail(const std::string& msg) { throw std::runtime_error("autodiff: " + msg); }

void check_finite(const Tensor& t, const char* op) {
    if (!t.all_finite()) fail(std::string("non-finite value produced by ") + op);
}

// Row-major C = alpha * op(A) * op(B) + beta * C
void gemm(bool ta, bool tb, int m, int n, int k, double alpha, const double* a, int lda,
          const double* b, int ldb, double beta, double* c, int ldc) {
    cblas_dgemm(CblasRowMajor, ta ? CblasTrans : CblasNoTrans, tb ? CblasTrans : CblasNoTrans, m, n,
                k, alpha, a, lda, b, ldb, beta, c, ldc);
}

void axpy(std::int64_t n, double alpha, const double* x, double* y) {
    cblas_daxpy(static_cast<int>(n), alpha, x, 1, y, 1);
}

}  // namespace

Tensor& Node::grad_buf() {
    if (!grad_set) {
        grad = Tensor::zeros(value.shape());
        grad_set = true;
    }
    return grad;
}

const Tensor& Var::grad() const {
    if (!n_->grad_set) fail("gradient not computed for this node");
    return n_->grad;
}

void Var::zero_grad() {
    n_->grad = Tensor();
    n_->grad_set = false;
}

Var constant(Tensor value) {
    auto n = std::make_shared<Node>();
    n->value = std::move(value);
    return Var(n);
}

Var param(Tensor value) {
    auto n = std::make_shared<Node>();
    n->value = std::move(value);
    n->needs_grad = true;
    n->is_param = true;
    return Var(n);
}

Var make_op(Tensor value, std::vector<Var> parents, std::function<void(Node&)> backward_fn) {
    check_finite(value, "op");
    auto n = std::make_shared<Node>();
    n->value = std::move(value);
    for (auto& p : parents) {
        n->parents.push_back(p.node());
        if (p.node()->needs_grad) n->needs_grad = true;
    }
    if (n->needs_grad) n->backward_fn = std::move(backward_fn);
    return Var(n);
}

// ---------------------------------------------------------------- elementwise

namespace {

Var binary_ew(const Var& a, const Var& b, const char* name,
              const std::function<double(double, double)>& fwd,
              const std::function<void(Node&)>& bwd) {
    if (!a.value().same_shape(b.value()))
        fail(std::string(name) + " shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    Tensor out(a.shape());
    const std::int64_t n = out.numel();
    for (std::int64_t i = 0; i < n; ++i) out[i] = fwd(a.value()[i], b.value()[i]);
    return make_op(std::move(out), {a, b}, bwd);
}

}  // namespace

Var add(const Var& a, const Var& b) {
    return binary_ew(a, b, "add", [](double x, double y) { return x + y; }, [](Node& self) {
        for (int p = 0; p < 2; ++p)
            if (self.parents[p]->needs_grad)
                axpy(self.grad.numel(), 1.0, self.grad.data(), self.parents[p]->grad_buf().data());
    });
}

Var sub(const Var& a, const Var& b) {
    return binary_ew(a, b, "sub", [](double x, double y) { return x - y; }, [](Node& self) {
        if (self.parents[0]->needs_grad)
            axpy(self.grad.numel(), 1.0, self.grad.data(), self.parents[0]->grad_buf().data());
        if (self.parents[1]->needs_grad)
            axpy(self.grad.numel(), -1.0, self.grad.data(), self.parents[1]->grad_buf().data());
    });
}

Var mul(const Var& a, const Var& b) {
    return binary_ew(a, b, "mul", [](double x, double y) { return x * y; }, [](Node& self) {
        const std::int64_t n = self.grad.numel();
        for (int p = 0; p < 2; ++p)
            if (self.parents[p]->needs_grad) {
                Tensor& g = self.parents[p]->grad_buf();
                const Tensor& other = self.parents[1 - p]->value;
                for (std::int64_t i = 0; i < n; ++i) g[i] += self.grad[i] * other[i];
            }
    });
}

Var square(const Var& a) {
    Tensor out(a.shape());
    const std::int64_t n = out.numel();
    for (std::int64_t i = 0; i < n; ++i) out[i] = a.value()[i] * a.value()[i];
    return make_op(std::move(out), {a}, [](Node& self) {
        if (!self.parents[0]->needs_grad) return;
        Tensor& g = self.parents[0]->grad_buf();
        const Tensor& x = self.parents[0]->value;
        for (std::int64_t i = 0; i < self.grad.numel(); ++i) g[i] += 2.0 * x[i] * self.grad[i];
    });
}

Var scale(const Var& a, double c) {
    Tensor out(a.shape());
    for (std::int64_t i = 0; i < out.numel(); ++i) out[i] = c * a.value()[i];
    return make_op(std::move(out), {a}, [c](Node& self) {
        if (self.parents[0]->needs_grad)
            axpy(self.grad.numel(), c, self.grad.data(), self.parents[0]->grad_buf().data());
    });
}

Var relu(const Var& a) {
    Tensor out(a.shape());
    for (std::int64_t i = 0; i < out.numel(); ++i) out[i] = a.value()[i] > 0 ? a.value()[i] : 0.0;
    return make_op(std::move(out), {a}, [](Node& self) {
        if (!self.parents[0]->needs_grad) return;
        Tensor& g = self.parents[0]->grad_buf();
        const Tensor& x = self.parents[0]->value;
        // derivative at exactly 0 is 0
        for (std::int64_t i = 0; i < self.grad.numel(); ++i)
            if (x[i] > 0) g[i] += self.grad[i];
    });
}

Var sigmoid(const Var& a) {
    Tensor out(a.shape());
    for (std::int64_t i = 0; i < out.numel(); ++i) out[i] = 1.0 / (1.0 + std::exp(-a.value()[i]));
    return make_op(std::move(out), {a}, [](Node& self) {
        if (!self.parents[0]->needs_grad) return;
        Tensor& g = self.parents[0]->grad_buf();
        for (std::int64_t i = 0; i < self.grad.numel(); ++i) {
            double y = self.value[i];
            g[i] += self.grad[i] * y * (1.0 - y);
        }
    });
}

// ---------------------------------------------------------------- linear algebra

Var matmul(const Var& a, const Var& b) {
    if (a.value().rank() != 2 || b.value().rank() != 2 || a.shape()[1] != b.shape()[0])
        fail("matmul shape mismatch " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
    const int m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
    Tensor out({m, n});
    gemm(false, false, m, n, k, 1.0, a.value().data(), k, b.value().data(), n, 0.0, out.data(), n);
    return make_op(std::move(out), {a, b}, [m, n, k](Node& self) {
        const double* dc = self.grad.data();
        if (self.parents[0]->needs_grad)  // dA = dC * B^T
            gemm(false, true, m, k, n, 1.0, dc, n, self.parents[1]->value.data(), n, 1.0,
                 self.parents[0]->grad_buf().data(), k);
        if (self.parents[1]->needs_grad)  // dB = A^T * dC
            gemm(true, false, k, n, m, 1.0, self.parents[0]->value.data(), k, dc, n, 1.0,
                 self.parents[1]->grad_buf().data(), n);
    });
}

Var linear(const Var& x, const Var& w, const Var& b) {
    if (x.value().rank() != 2 || w.value().rank() != 2 || b.value().rank() != 1 ||
        x.shape()[1] != w.shape()[1] || w.shape()[0] != b.shape()[0])
        fail("linear shape mismatch x" + shape_str(x.shape()) + " w" + shape_str(w.shape()) + " b" +
             shape_str(b.shape()));
    const int n = x.shape()[0], d = x.shape()[1], o = w.shape()[0];
    Tensor out({n, o});
    gemm(false, true, n, o, d, 1.0, x.value().data(), d, w.value().data(), d, 0.0, out.data(), o);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < o; ++j) out.at(i, j) += b.value()[j];
    return make_op(std::move(out), {x, w, b}, [n, d, o](Node& self) {
        const double* dy = self.grad.data();
        if (self.parents[0]->needs_grad)  // dX = dY * W
            gemm(false, false, n, d, o, 1.0, dy, o, self.parents[1]->value.data(), d, 1.0,
                 self.parents[0]->grad_buf().data(), d);
        if (self.parents[1]->needs_grad)  // dW = dY^T * X
            gemm(true, false, o, d, n, 1.0, dy, o, self.parents[0]->value.data(), d, 1.0,
                 self.parents[1]->grad_buf().data(), d);
        if (self.parents[2]->needs_grad) {
            Tensor& db = self.parents[2]->grad_buf();
            for (int i = 0; i < n; ++i)
                for (int j = 0; j < o; ++j) db[j] += dy[static_cast<std::int64_t>(i) * o + j];
        }
    });
}

// ---------------------------------------------------------------- convolution

namespace {

struct ConvDims {
    int N, C, H, W, O, kh, kw, ph, pw, stride, Ho, Wo;
};

ConvDims conv_dims(const Var& x, const Var& k, int stride, Padding pad) {
    if (x.value().rank() != 4 || k.value().rank() != 4 || x.shape()[1] != k.shape()[1])
        fail("conv2d shape mismatch x" + shape_str(x.shape()) + " k" + shape_str(k.shape()));
    ConvDims d;
    d.N = x.shape()[0]; d.C = x.shape()[1]; d.H = x.shape()[2]; d.W = x.shape()[3];
    d.O = k.shape()[0]; d.kh = k.shape()[2]; d.kw = k.shape()[3];
    d.stride = stride;
    if (pad == Padding::Same) {
        d.ph = (d.kh - 1) / 2;
        d.pw = (d.kw - 1) / 2;
        d.Ho = (d.H + 2 * d.ph - d.kh) / stride + 1;
        d.Wo = (d.W + 2 * d.pw - d.kw) / stride + 1;
    } else {
        d.ph = d.pw = 0;
        if (d.H < d.kh || d.W < d.kw) fail("conv2d valid: input smaller than kernel");
        d.Ho = (d.H - d.kh) / stride + 1;
        d.Wo = (d.W - d.kw) / stride + 1;
    }
    return d;
}

// cols is [C*kh*kw, Ho*Wo] for one sample
void im2col(const double* x, const ConvDims& d, double* cols) {
    const std::int64_t ow = d.Wo;
    for (int c = 0; c < d.C; ++c)
        for (int u = 0; u < d.kh; ++u)
            for (int v = 0; v < d.kw; ++v) {
                double* row = cols + ((static_cast<std::int64_t>(c) * d.kh + u) * d.kw + v) *
                                         (static_cast<std::int64_t>(d.Ho) * d.Wo);
                for (int y = 0; y < d.Ho; ++y) {
                    int iy = y * d.stride + u - d.ph;
                    if (iy < 0 || iy >= d.H) {
                        std::memset(row + y * ow, 0, sizeof(double) * ow);
                        continue;
                    }
                    const double* src = x + (static_cast<std::int64_t>(c) * d.H + iy) * d.W;
                    for (int xo = 0; xo < d.Wo; ++xo) {
                        int ix = xo * d.stride + v - d.pw;
                        row[y * ow + xo] = (ix < 0 || ix >= d.W) ? 0.0 : src[ix];
                    }
                }
            }
}

void col2im_add(const double* cols, const ConvDims& d, double* dx) {
    for (int c = 0; c < d.C; ++c)
        for (int u = 0; u < d.kh; ++u)
            for (int v = 0; v < d.kw; ++v) {
                const double* row = cols + ((static_cast<std::int64_t>(c) * d.kh + u) * d.kw + v) *
                                               (static_cast<std::int64_t>(d.Ho) * d.Wo);
                for (int y = 0; y < d.Ho; ++y) {
                    int iy = y * d.stride + u - d.ph;
                    if (iy < 0 || iy >= d.H) continue;
                    double* dst = dx + (static_cast<std::int64_t>(c) * d.H + iy) * d.W;
                    for (int xo = 0; xo < d.Wo; ++xo) {
                        int ix = xo * d.stride + v - d.pw;
                        if (ix >= 0 && ix < d.W) dst[ix] += row[y * d.Wo + xo];
                    }
                }
            }
}

}  // namespace

Var conv2d(const Var& x, const Var& k, const Var& b, int stride, Padding pad, bool fuse_relu) {
    ConvDims d = conv_dims(x, k, stride, pad);
    if (b.value().rank() != 1 || b.shape()[0] != d.O) fail("conv2d bias shape mismatch");
    const std::int64_t ckk = static_cast<std::int64_t>(d.C) * d.kh * d.kw;
    const std::int64_t hw = static_cast<std::int64_t>(d.Ho) * d.Wo;
    const std::int64_t in_sz = static_cast<std::int64_t>(d.C) * d.H * d.W;
    const std::int64_t out_sz = static_cast<std::int64_t>(d.O) * hw;

    Tensor out({d.N, d.O, d.Ho, d.Wo});
    std::vector<double> cols(static_cast<size_t>(ckk * hw));
    for (int n = 0; n < d.N; ++n) {
        im2col(x.value().data() + n * in_sz, d, cols.data());
        double* y = out.data() + n * out_sz;
        gemm(false, false, d.O, static_cast<int>(hw), static_cast<int>(ckk), 1.0, k.value().data(),
             static_cast<int>(ckk), cols.data(), static_cast<int>(hw), 0.0, y, static_cast<int>(hw));
        for (int o = 0; o < d.O; ++o) {
            double bias = b.value()[o];
            double* ch = y + o * hw;
            for (std::int64_t i = 0; i < hw; ++i) {
                double v = ch[i] + bias;
                ch[i] = fuse_relu ? (v > 0 ? v : 0.0) : v;
            }
        }
    }
    return make_op(std::move(out), {x, k, b}, [d, ckk, hw, in_sz, out_sz, fuse_relu](Node& self) {
        std::vector<double> cols(static_cast<size_t>(ckk * hw));
        std::vector<double> dpre(static_cast<size_t>(out_sz));
        std::vector<double> dcols;
        const bool need_dx = self.parents[0]->needs_grad;
        const bool need_dk = self.parents[1]->needs_grad;
        const bool need_db = self.parents[2]->needs_grad;
        if (need_dx) dcols.resize(static_cast<size_t>(ckk * hw));
        for (int n = 0; n < d.N; ++n) {
            const double* dy = self.grad.data() + n * out_sz;
            if (fuse_relu) {
                const double* y = self.value.data() + n * out_sz;
                for (std::int64_t i = 0; i < out_sz; ++i) dpre[i] = y[i] > 0 ? dy[i] : 0.0;
            } else {
                std::memcpy(dpre.data(), dy, sizeof(double) * out_sz);
            }
            if (need_db) {
                Tensor& db = self.parents[2]->grad_buf();
                for (int o = 0; o < d.O; ++o) {
                    double s = 0;
                    const double* ch = dpre.data() + o * hw;
                    for (std::int64_t i = 0; i < hw; ++i) s += ch[i];
                    db[o] += s;
                }
            }
            if (need_dk || need_dx)
                im2col(self.parents[0]->value.data() + n * in_sz, d, cols.data());
            if (need_dk)  // dK += dPre [O,hw] x cols^T [hw,ckk]
                gemm(false, true, d.O, static_cast<int>(ckk), static_cast<int>(hw), 1.0,
                     dpre.data(), static_cast<int>(hw), cols.data(), static_cast<int>(hw), 1.0,
                     self.parents[1]->grad_buf().data(), static_cast<int>(ckk));
            if (need_dx) {  // dcols = K^T [ckk,O] x dPre [O,hw]
                gemm(true, false, static_cast<int>(ckk), static_cast<int>(hw), d.O, 1.0,
                     self.parents[1]->value.data(), static_cast<int>(ckk), dpre.data(),
                     static_cast<int>(hw), 0.0, dcols.data(), static_cast<int>(hw));
                col2im_add(dcols.data(), d, self.parents[0]->grad_buf().data() + n * in_sz);
            }
        }
    });
}

Var max_pool2d(const Var& x, int k, int stride, int kw, int sw) {
    if (x.value().rank() != 4) fail("max_pool2d expects rank-4 input");
    if (kw < 0) kw = k;
    if (sw < 0) sw = stride;
    const int N = x.shape()[0], C = x.shape()[1], H = x.shape()[2], W = x.shape()[3];
    const int Ho = (H - k) / stride + 1, Wo = (W - kw) / sw + 1;
    if (Ho < 1 || Wo < 1) fail("max_pool2d: input smaller than window");
    Tensor out({N, C, Ho, Wo});
    auto arg = std::make_shared<std::vector<std::int64_t>>(out.numel());
    std::int64_t oi = 0;
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c) {
            const double* plane = x.value().data() + (static_cast<std::int64_t>(n) * C + c) * H * W;
            for (int y = 0; y < Ho; ++y)
                for (int xo = 0; xo < Wo; ++xo, ++oi) {
                    double best = -1e300;
                    std::int64_t best_idx = 0;
                    for (int u = 0; u < k; ++u)
                        for (int v = 0; v < kw; ++v) {
                            std::int64_t idx = static_cast<std::int64_t>(y * stride + u) * W + xo * sw + v;
                            if (plane[idx] > best) {
                                best = plane[idx];
                                best_idx = idx;
                            }
                        }
                    out[oi] = best;
                    (*arg)[oi] = (static_cast<std::int64_t>(n) * C + c) * H * W + best_idx;
                }
        }
    return make_op(std::move(out), {x}, [arg](Node& self) {
        if (!self.parents[0]->needs_grad) return;
        Tensor& g = self.parents[0]->grad_buf();
        for (std::int64_t i = 0; i < self.grad.numel(); ++i) g[(*arg)[i]] += self.grad[i];
    });
}

Var global_avg_pool(const Var& x) {
    if (x.value().rank() != 4) fail("global_avg_pool expects rank-4 input");
    const int N = x.shape()[0], C = x.shape()[1];
    const std::int64_t hw = static_cast<std::int64_t>(x.shape()[2]) * x.shape()[3];
    Tensor out({N, C});
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c) {
            const double* plane = x.value().data() + (static_cast<std::int64_t>(n) * C + c) * hw;
            double s = 0;
            for (std::int64_t i = 0; i < hw; ++i) s += plane[i];
            out.at(n, c) = s / static_cast<double>(hw);
        }
    return make_op(std::move(out), {x}, [N, C, hw](Node& self) {
        if (!self.parents[0]->needs_grad) return;
        Tensor& g = self.parents[0]->grad_buf();
        for (int n = 0; n < N; ++n)
            for (int c = 0; c < C; ++c) {
                double d = self.grad.at(n, c) / static_cast<double>(hw);
                double* plane = g.data() + (static_cast<std::int64_t>(n) * C + c) * hw;
                for (std::int64_t i = 0; i < hw; ++i) plane[i] += d;
            }
    });
}

// ---------------------------------------------------------------- shaping

Var concat(const std::vector<Var>& parts, int axis) {
    if (parts.empty()) fail("concat of zero parts");
    const int rank = parts[0].value().rank();
    if (axis < 0 || axis >= rank) fail("concat axis out of range");
    std::vector<int> shape = parts[0].shape();
    int total = 0;
    for (const auto& p : parts) {
        if (p.value().rank() != rank) fail("concat rank mismatch");
        for (int i = 0; i < rank; ++i)
            if (i != axis && p.shape()[i] != shape[i]) fail("concat shape mismatch on axis " + std::to_string(i));
        total += p.shape()[axis];
    }
    shape[axis] = total;
    std::int64_t outer = 1, inner = 1;
    for (int i = 0; i < axis; ++i) outer *= shape[i];
    for (int i = axis + 1; i < rank; ++i) inner *= shape[i];

    Tensor out(shape);
    std::int64_t offset = 0;  // in elements along axis*inner
    const std::int64_t out_stride = static_cast<std::int64_t>(shape[axis]) * inner;
    for (const auto& p : parts) {
        const std::int64_t blk = static_cast<std::int64_t>(p.shape()[axis]) * inner;
        for (std::int64_t o = 0; o < outer; ++o)
            std::memcpy(out.data() + o * out_stride + offset, p.value().data() + o * blk,
                        sizeof(double) * blk);
        offset += blk;
    }
    return make_op(std::move(out), parts, [outer, inner, out_stride](Node& self) {
        std::int64_t offset = 0;
        for (auto& par : self.parents) {
            const std::int64_t blk = par->value.numel() / outer;
            if (par->needs_grad) {
                Tensor& g = par->grad_buf();
                for (std::int64_t o = 0; o < outer; ++o)
                    axpy(blk, 1.0, self.grad.data() + o * out_stride + offset, g.data() + o * blk);
            }
            offset += blk;
        }
        (void)inner;
    });
}

Var gather_rows(const Var& x, std::vector<int> idx) {
    if (x.value().rank() != 2) fail("gather_rows expects a matrix");
    const int d = x.shape()[1];
    Tensor out({static_cast<int>(idx.size()), d});
    for (size_t i = 0; i < idx.size(); ++i) {
        if (idx[i] < 0 || idx[i] >= x.shape()[0]) fail("gather_rows index out of range");
        std::memcpy(out.data() + i * d, x.value().data() + static_cast<std::int64_t>(idx[i]) * d,
                    sizeof(double) * d);
    }
    return make_op(std::move(out), {x}, [idx = std::move(idx), d](Node& self) {
        if (!self.parents[0]->needs_grad) return;
        Tensor& g = self.parents[0]->grad_buf();
        for (size_t i = 0; i < idx.size(); ++i)
            axpy(d, 1.0, self.grad.data() + i * d, g.data() + static_cast<std::int64_t>(idx[i]) * d);
    });
}

Var replace_row(const Tensor& base, int row, const Var& v) {
    if (base.rank() != 2 || v.value().rank() != 1 || v.shape()[0] != base.dim(1))
        fail("replace_row shape mismatch");
    if (row < 0 || row >= base.dim(0)) fail("replace_row index out of range");
    Tensor out = base;
    std::memcpy(out.data() + static_cast<std::int64_t>(row) * base.dim(1), v.value().data(),
                sizeof(double) * base.dim(1));
    const int d = base.dim(1);
    return make_op(std::move(out), {v}, [row, d](Node& self) {
        if (self.parents[0]->needs_grad)
            axpy(d, 1.0, self.grad.data() + static_cast<std::int64_t>(row) * d,
                 self.parents[0]->grad_buf().data());
    });
}

Var reshape(const Var& x, std::vector<int> shape) {
    Tensor out = x.value().reshaped(shape);
    return make_op(std::move(out), {x}, [](Node& self) {
        if (self.parents[0]->needs_grad)
            axpy(self.grad.numel(), 1.0, self.grad.data(), self.parents[0]->grad_buf().data());
    });
}

Var element(const Var& x, std::int64_t flat_index) {
    if (flat_index < 0 || flat_index >= x.value().numel()) fail("element index out of range");
    Tensor out = Tensor::scalar(x.value()[flat_index]);
    return make_op(std::move(out), {x}, [flat_index](Node& self) {
        if (self.parents[0]->needs_grad) self.parents[0]->grad_buf()[flat_index] += self.grad[0];
    });
}

// ---------------------------------------------------------------- reductions / losses

Var sum(const Var& x) {
    Tensor out = Tensor::scalar(x.value().sum());
    return make_op(std::move(out), {x}, [](Node& self) {
        if (self.parents[0]->needs_grad) {
            Tensor& g = self.parents[0]->grad_buf();
            double d = self.grad[0];
            for (std::int64_t i = 0; i < g.numel(); ++i) g[i] += d;
        }
    });
}

Var mean(const Var& x) {
    const double n = static_cast<double>(x.value().numel());
    Tensor out = Tensor::scalar(x.value().sum() / n);
    return make_op(std::move(out), {x}, [n](Node& self) {
        if (self.parents[0]->needs_grad) {
            Tensor& g = self.parents[0]->grad_buf();
            double d = self.grad[0] / n;
            for (std::int64_t i = 0; i < g.numel(); ++i) g[i] += d;
        }
    });
}

Var softmax(const Var& x) {
    if (x.value().rank() != 2 || x.shape()[1] < 1) fail("softmax expects a non-empty matrix");
    const int n = x.shape()[0], k = x.shape()[1];
    Tensor out({n, k});
    for (int i = 0; i < n; ++i) {
        double mx = -1e300;
        for (int j = 0; j < k; ++j) mx = std::max(mx, x.value().at(i, j));
        double z = 0;
        for (int j = 0; j < k; ++j) z += std::exp(x.value().at(i, j) - mx);
        for (int j = 0; j < k; ++j) out.at(i, j) = std::exp(x.value().at(i, j) - mx) / z;
    }
    return make_op(std::move(out), {x}, [n, k](Node& self) {
        if (!self.parents[0]->needs_grad) return;
        Tensor& g = self.parents[0]->grad_buf();
        for (int i = 0; i < n; ++i) {
            double dot = 0;
            for (int j = 0; j < k; ++j) dot += self.grad.at(i, j) * self.value.at(i, j);
            for (int j = 0; j < k; ++j)
                g.at(i, j) += self.value.at(i, j) * (self.grad.at(i, j) - dot);
        }
    });
}

Var cross_entropy(const Var& logits, const std::vector<int>& targets,
                  const std::vector<std::uint8_t>& mask) {
    if (logits.value().rank() != 2 || logits.shape()[1] < 1) fail("cross_entropy expects a non-empty matrix");
    const int n = logits.shape()[0], k = logits.shape()[1];
    if (static_cast<int>(targets.size()) != n) fail("cross_entropy target count mismatch");
    if (!mask.empty() && static_cast<int>(mask.size()) != n) fail("cross_entropy mask size mismatch");
    // stable log-softmax; softmax probabilities kept for backward
    auto probs = std::make_shared<Tensor>(std::vector<int>{n, k});
    int count = 0;
    double loss = 0;
    for (int i = 0; i < n; ++i) {
        bool active = mask.empty() || mask[i];
        double mx = -1e300;
        for (int j = 0; j < k; ++j) mx = std::max(mx, logits.value().at(i, j));
        double z = 0;
        for (int j = 0; j < k; ++j) z += std::exp(logits.value().at(i, j) - mx);
        for (int j = 0; j < k; ++j) probs->at(i, j) = std::exp(logits.value().at(i, j) - mx) / z;
        if (active) {
            if (targets[i] < 0 || targets[i] >= k) fail("cross_entropy target out of range");
            loss -= logits.value().at(i, targets[i]) - mx - std::log(z);
            ++count;
        }
    }
    if (count == 0) fail("cross_entropy: empty mask");
    Tensor out = Tensor::scalar(loss / count);
    return make_op(std::move(out), {logits}, [probs, targets, mask, n, k, count](Node& self) {
        if (!self.parents[0]->needs_grad) return;
        Tensor& g = self.parents[0]->grad_buf();
        const double d = self.grad[0] / count;
        for (int i = 0; i < n; ++i) {
            if (!mask.empty() && !mask[i]) continue;
            for (int j = 0; j < k; ++j)
                g.at(i, j) += d * (probs->at(i, j) - (j == targets[i] ? 1.0 : 0.0));
        }
    });
}

Var binary_cross_entropy(const Var& p, const std::vector<double>& targets) {
    const std::int64_t n = p.value().numel();
    if (static_cast<std::int64_t>(targets.size()) != n) fail("binary_cross_entropy target count mismatch");
    constexpr double lo = 1e-12;
    double loss = 0;
    for (std::int64_t i = 0; i < n; ++i) {
        double q = std::clamp(p.value()[i], lo, 1.0 - lo);
        loss -= targets[i] * std::log(q) + (1.0 - targets[i]) * std::log(1.0 - q);
    }
    Tensor out = Tensor::scalar(loss / static_cast<double>(n));
    return make_op(std::move(out), {p}, [targets, n](Node& self) {
        if (!self.parents[0]->needs_grad) return;
        constexpr double lo = 1e-12;
        Tensor& g = self.parents[0]->grad_buf();
        const double d = self.grad[0] / static_cast<double>(n);
        for (std::int64_t i = 0; i < n; ++i) {
            double q = std::clamp(self.parents[0]->value[i], lo, 1.0 - lo);
            g[i] += d * (q - targets[i]) / (q * (1.0 - q));
        }
    });
}

// ---------------------------------------------------------------- backward

void backward(const Var& loss, bool retain) {
    NodePtr root = loss.node();
    if (!root) fail("backward on empty Var");
    if (root->value.numel() != 1) fail("backward requires a scalar loss, got " + shape_str(root->value.shape()));
    if (root->released) fail("backward called twice without retain");
    if (!root->needs_grad) fail("loss does not depend on any parameter");

    // iterative post-order DFS over parents
    std::vector<NodePtr> order;
    std::unordered_set<Node*> seen;
    std::vector<std::pair<NodePtr, size_t>> stack;
    stack.emplace_back(root, 0);
    seen.insert(root.get());
    while (!stack.empty()) {
        NodePtr node = stack.back().first;
        if (node->released) fail("backward called twice without retain");
        bool descended = false;
        while (stack.back().second < node->parents.size()) {
            NodePtr p = node->parents[stack.back().second++];
            if (p->needs_grad && !seen.count(p.get())) {
                seen.insert(p.get());
                stack.emplace_back(std::move(p), 0);
                descended = true;
                break;
            }
        }
        if (!descended) {
            order.push_back(node);
            stack.pop_back();
        }
    }

    // leaves accumulate across passes; intermediate grads start fresh
    for (auto& n : order)
        if (!n->is_param) {
            n->grad = Tensor();
            n->grad_set = false;
        }
    root->grad_buf()[0] = 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node& n = **it;
        if (n.backward_fn && n.grad_set) n.backward_fn(n);
        if (!retain && !n.is_param) {
            n.backward_fn = nullptr;
            n.released = true;
        }
    }
}

// ---------------------------------------------------------------- gradient check

double check_gradient(const std::function<Var(const Var&)>& f, const Tensor& x, double eps) {
    Var xv = param(x);
    Var loss = f(xv);
    backward(loss);
    Tensor g_ad = xv.grad();

    auto eval = [&](const Tensor& t) {
        Var v = constant(t);
        return f(v).value()[0];
    };
    double worst = 0;
    Tensor xt = x;
    for (std::int64_t i = 0; i < x.numel(); ++i) {
        double orig = xt[i];
        xt[i] = orig + eps;
        double fp = eval(xt);
        xt[i] = orig - eps;
        double fm = eval(xt);
        xt[i] = orig;
        double g_fd = (fp - fm) / (2 * eps);
        double rel = std::abs(g_ad[i] - g_fd) / std::max(1e-8, std::abs(g_ad[i]) + std::abs(g_fd));
        worst = std::max(worst, rel);
    }
    return worst;
}

// ---------------------------------------------------------------- Adam

void adam_step(const std::vector<Var>& params, AdamState& state, double lr) {
    if (lr <= 0) fail("adam_step: lr must be positive");
    if (state.m.empty()) {
        for (const auto& p : params) {
            state.m.push_back(Tensor::zeros(p.shape()));
            state.v.push_back(Tensor::zeros(p.shape()));
        }
    }
    if (state.m.size() != params.size()) fail("adam_step: state/parameter count mismatch");
    ++state.t;
    const double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.t));
    const double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.t));
    for (size_t p = 0; p < params.size(); ++p) {
        Node& node = *params[p].node();
        Tensor& g = node.grad_buf();  // zero grad means no update
        check_finite(g, "adam gradient");
        if (!state.m[p].same_shape(node.value)) fail("adam_step: shape mismatch");
        Tensor& m = state.m[p];
        Tensor& v = state.v[p];
        for (std::int64_t i = 0; i < g.numel(); ++i) {
            m[i] = state.beta1 * m[i] + (1 - state.beta1) * g[i];
            v[i] = state.beta2 * v[i] + (1 - state.beta2) * g[i] * g[i];
            node.value[i] -= lr * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + state.eps);
        }
        node.grad = Tensor();
        node.grad_set = false;
    }
}

// ---------------------------------------------------------------- init / checkpoints

Tensor randn(std::vector<int> shape, std::mt19937_64& rng, double stddev) {
    Tensor t(std::move(shape));
    std::normal_distribution<double> dist(0.0, stddev);
    for (std::int64_t i = 0; i < t.numel(); ++i) t[i] = dist(rng);
    return t;
}

Tensor he_normal(std::vector<int> shape, std::mt19937_64& rng, int fan_in) {
    return randn(std::move(shape), rng, std::sqrt(2.0 / static_cast<double>(fan_in)));
}

void Checkpoint::add(const std::string& name, const Tensor& t) {
    names.push_back(name);
    tensors.push_back(t);
}

const Tensor& Checkpoint::get(const std::string& name) const {
    for (size_t i = 0; i < names.size(); ++i)
        if (names[i] == name) return tensors[i];
    throw std::runtime_error("checkpoint: missing parameter " + name);
}

void save_checkpoint(const Checkpoint& ck, const std::string& dir) {
    std::ofstream bin(dir + "/params.bin", std::ios::binary);
    if (!bin) throw std::runtime_error("cannot write checkpoint blob in " + dir);
    nlohmann::json manifest = nlohmann::json::array();
    std::int64_t offset = 0;
    for (size_t i = 0; i < ck.names.size(); ++i) {
        const Tensor& t = ck.tensors[i];
        bin.write(reinterpret_cast<const char*>(t.data()),
                  t.numel() * static_cast<std::int64_t>(sizeof(double)));
        manifest.push_back({{"name", ck.names[i]}, {"shape", t.shape()}, {"offset", offset}});
        offset += t.numel() * static_cast<std::int64_t>(sizeof(double));
    }
    std::ofstream mf(dir + "/manifest.json");
    mf << manifest.dump(2) << "\n";
}

Checkpoint load_checkpoint(const std::string& dir) {
    std::ifstream mf(dir + "/manifest.json");
    if (!mf) throw std::runtime_error("missing checkpoint manifest: " + dir + "/manifest.json");
    nlohmann::json manifest = nlohmann::json::parse(mf);
    std::ifstream bin(dir + "/params.bin", std::ios::binary);
    if (!bin) throw std::runtime_error("missing checkpoint blob: " + dir + "/params.bin");
    Checkpoint ck;
    for (const auto& entry : manifest) {
        std::vector<int> shape = entry["shape"].get<std::vector<int>>();
        Tensor t(shape);
        bin.seekg(entry["offset"].get<std::int64_t>());
        bin.read(reinterpret_cast<char*>(t.data()), t.numel() * static_cast<std::int64_t>(sizeof(double)));
        if (!bin) throw std::runtime_error("short read in checkpoint blob: " + dir);
        ck.add(entry["name"].get<std::string>(), t);
    }
    return ck;
}

}  // namespace mg::ad
