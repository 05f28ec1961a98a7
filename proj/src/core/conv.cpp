#include <algorithm>
#include <cmath>
#include <memory>

#include "core/tensor.hpp"

namespace xcb {

namespace detail {

void matmul_raw(const double* a, const double* b, double* c, int64_t m, int64_t k, int64_t n) {
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
    for (int64_t i = 0; i < m; ++i) {
        double* ci = c + i * n;
        const double* ai = a + i * k;
        for (int64_t p = 0; p < k; ++p) {
            const double av = ai[p];
            const double* bp = b + p * n;
            for (int64_t j = 0; j < n; ++j) ci[j] += av * bp[j];
        }
    }
}

}  // namespace detail

namespace {

// C[m,n] = A[m,k] * B[n,k]^T without materialising the transpose. Each output
// element is one serial dot product, so the result is thread-count invariant.
void matmul_nt(const double* a, const double* b, double* c, int64_t m, int64_t k, int64_t n) {
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
    for (int64_t i = 0; i < m; ++i) {
        for (int64_t j = 0; j < n; ++j) {
            const double* ai = a + i * k;
            const double* bj = b + j * k;
            double s = 0.0;
            for (int64_t p = 0; p < k; ++p) s += ai[p] * bj[p];
            c[i * n + j] = s;
        }
    }
}

struct ConvDims {
    int64_t N, C, H, W;
    int64_t Cout, kh, kw;
    int64_t OH, OW;
    int stride, pad;
    int64_t K() const { return C * kh * kw; }
    int64_t J() const { return N * OH * OW; }
};

// cols[r, j] with r = (c*kh + ki)*kw + kj and j = (n*OH + oh)*OW + ow.
void im2col(const double* x, const ConvDims& d, double* cols) {
    const int64_t K = d.K(), J = d.J();
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
    for (int64_t r = 0; r < K; ++r) {
        const int64_t c = r / (d.kh * d.kw);
        const int64_t ki = (r / d.kw) % d.kh;
        const int64_t kj = r % d.kw;
        double* row = cols + r * J;
        for (int64_t n = 0; n < d.N; ++n) {
            const double* plane = x + (n * d.C + c) * d.H * d.W;
            for (int64_t oh = 0; oh < d.OH; ++oh) {
                const int64_t ih = oh * d.stride - d.pad + ki;
                const int64_t base = (n * d.OH + oh) * d.OW;
                if (ih < 0 || ih >= d.H) {
                    std::fill(row + base, row + base + d.OW, 0.0);
                    continue;
                }
                for (int64_t ow = 0; ow < d.OW; ++ow) {
                    const int64_t iw = ow * d.stride - d.pad + kj;
                    row[base + ow] = (iw >= 0 && iw < d.W) ? plane[ih * d.W + iw] : 0.0;
                }
            }
        }
    }
}

// Scatter-add of dcols back onto the input layout; parallel over batch items
// (each thread owns a disjoint slab of dx).
void col2im_add(const double* dcols, const ConvDims& d, double* dx) {
    const int64_t J = d.J();
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
    for (int64_t n = 0; n < d.N; ++n) {
        for (int64_t r = 0; r < d.K(); ++r) {
            const int64_t c = r / (d.kh * d.kw);
            const int64_t ki = (r / d.kw) % d.kh;
            const int64_t kj = r % d.kw;
            const double* row = dcols + r * J;
            double* plane = dx + (n * d.C + c) * d.H * d.W;
            for (int64_t oh = 0; oh < d.OH; ++oh) {
                const int64_t ih = oh * d.stride - d.pad + ki;
                if (ih < 0 || ih >= d.H) continue;
                const int64_t base = (n * d.OH + oh) * d.OW;
                for (int64_t ow = 0; ow < d.OW; ++ow) {
                    const int64_t iw = ow * d.stride - d.pad + kj;
                    if (iw >= 0 && iw < d.W) plane[ih * d.W + iw] += row[base + ow];
                }
            }
        }
    }
}

void accum_into(TensorImpl& t, std::vector<double>&& g) {
    if (t.grad.empty()) {
        t.grad = std::move(g);
    } else {
        for (size_t i = 0; i < g.size(); ++i) t.grad[i] += g[i];
    }
}

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias, int stride, int pad) {
    if (x.ndim() != 4 || w.ndim() != 4)
        throw DimensionError("conv2d: expected 4-D input and weight, got " +
                             shape_str(x.shape()) + " and " + shape_str(w.shape()));
    if (x.dim(1) != w.dim(1))
        throw DimensionError("conv2d: channel mismatch " + shape_str(x.shape()) + " vs " +
                             shape_str(w.shape()));
    if (bias.defined() && (bias.ndim() != 1 || bias.dim(0) != w.dim(0)))
        throw DimensionError("conv2d: bias shape " + shape_str(bias.shape()) +
                             " does not match Cout " + std::to_string(w.dim(0)));
    if (stride < 1 || pad < 0) throw ContractError("conv2d: stride must be >=1 and pad >=0");

    ConvDims d;
    d.N = x.dim(0);
    d.C = x.dim(1);
    d.H = x.dim(2);
    d.W = x.dim(3);
    d.Cout = w.dim(0);
    d.kh = w.dim(2);
    d.kw = w.dim(3);
    d.stride = stride;
    d.pad = pad;
    d.OH = (d.H + 2 * pad - d.kh) / stride + 1;
    d.OW = (d.W + 2 * pad - d.kw) / stride + 1;
    if (d.H + 2 * pad < d.kh || d.W + 2 * pad < d.kw)
        throw DimensionError("conv2d: kernel larger than padded input");

    const int64_t K = d.K(), J = d.J();
    auto cols = std::make_shared<std::vector<double>>(static_cast<size_t>(K * J));
    im2col(x.data().data(), d, cols->data());

    // R[Cout, J] = W2d[Cout, K] * cols[K, J]
    std::vector<double> r(static_cast<size_t>(d.Cout * J), 0.0);
    detail::matmul_raw(w.data().data(), cols->data(), r.data(), d.Cout, K, J);

    std::vector<double> out(static_cast<size_t>(d.N * d.Cout * d.OH * d.OW));
    const double* bp = bias.defined() ? bias.data().data() : nullptr;
    for (int64_t n = 0; n < d.N; ++n) {
        for (int64_t co = 0; co < d.Cout; ++co) {
            const double bv = bp ? bp[co] : 0.0;
            const double* rr = r.data() + co * J + n * d.OH * d.OW;
            double* oo = out.data() + ((n * d.Cout + co) * d.OH) * d.OW;
            for (int64_t i = 0; i < d.OH * d.OW; ++i) oo[i] = rr[i] + bv;
        }
    }

    Tensor tx = x, tw = w, tb = bias;
    std::vector<Tensor> inputs = {x, w};
    if (bias.defined()) inputs.push_back(bias);

    bool rg = false;
    if (grad_enabled()) {
        rg = x.requires_grad() || w.requires_grad() || (bias.defined() && bias.requires_grad());
    }
    Tensor result = make_tensor({d.N, d.Cout, d.OH, d.OW}, std::move(out), rg);
    if (!rg) return result;

    auto node = std::make_shared<GraphNode>();
    node->op = "conv2d";
    node->inputs = std::move(inputs);
    node->backward = [tx, tw, tb, d, cols](const TensorImpl& o) {
        const int64_t K = d.K(), J = d.J();
        // Regroup the output gradient as dR[Cout, J].
        std::vector<double> dr(static_cast<size_t>(d.Cout * J));
        for (int64_t n = 0; n < d.N; ++n) {
            for (int64_t co = 0; co < d.Cout; ++co) {
                const double* gg = o.grad.data() + ((n * d.Cout + co) * d.OH) * d.OW;
                double* rr = dr.data() + co * J + n * d.OH * d.OW;
                std::copy(gg, gg + d.OH * d.OW, rr);
            }
        }
        if (tb.defined() && tb.requires_grad()) {
            std::vector<double> gb(static_cast<size_t>(d.Cout), 0.0);
            for (int64_t co = 0; co < d.Cout; ++co) {
                double s = 0.0;
                const double* rr = dr.data() + co * J;
                for (int64_t j = 0; j < J; ++j) s += rr[j];
                gb[co] = s;
            }
            accum_into(*tb.impl(), std::move(gb));
        }
        if (tw.requires_grad()) {
            // dW2d[Cout, K] = dR[Cout, J] * cols[K, J]^T
            std::vector<double> gw(static_cast<size_t>(d.Cout * K));
            matmul_nt(dr.data(), cols->data(), gw.data(), d.Cout, J, K);
            accum_into(*tw.impl(), std::move(gw));
        }
        if (tx.requires_grad()) {
            // dcols[K, J] = W2d[Cout, K]^T * dR[Cout, J]
            std::vector<double> wt(static_cast<size_t>(K * d.Cout));
            const auto& wv = tw.data();
            for (int64_t co = 0; co < d.Cout; ++co)
                for (int64_t rix = 0; rix < K; ++rix) wt[rix * d.Cout + co] = wv[co * K + rix];
            std::vector<double> dcols(static_cast<size_t>(K * J), 0.0);
            detail::matmul_raw(wt.data(), dr.data(), dcols.data(), K, d.Cout, J);
            std::vector<double> gx(tx.data().size(), 0.0);
            col2im_add(dcols.data(), d, gx.data());
            accum_into(*tx.impl(), std::move(gx));
        }
    };
    result.impl()->node = std::move(node);
    return result;
}

namespace {

struct PoolDims {
    int64_t N, C, H, W, OH, OW;
    int kernel, stride;
};

PoolDims pool_dims(const char* op, const Tensor& x, int kernel, int stride) {
    if (x.ndim() != 4)
        throw DimensionError(std::string(op) + ": expected 4-D input, got " + shape_str(x.shape()));
    if (kernel < 1 || stride < 1) throw ContractError(std::string(op) + ": kernel and stride must be >=1");
    PoolDims d;
    d.N = x.dim(0);
    d.C = x.dim(1);
    d.H = x.dim(2);
    d.W = x.dim(3);
    d.kernel = kernel;
    d.stride = stride;
    if (kernel > d.H || kernel > d.W)
        throw DimensionError(std::string(op) + ": kernel larger than input " + shape_str(x.shape()));
    d.OH = (d.H - kernel) / stride + 1;
    d.OW = (d.W - kernel) / stride + 1;
    return d;
}

}  // namespace

Tensor maxpool2d(const Tensor& x, int kernel, int stride) {
    const PoolDims d = pool_dims("maxpool2d", x, kernel, stride);
    const int64_t planes = d.N * d.C;
    std::vector<double> out(static_cast<size_t>(planes * d.OH * d.OW));
    auto argmax = std::make_shared<std::vector<int64_t>>(out.size());
    const auto& xv = x.data();
    for (int64_t p = 0; p < planes; ++p) {
        const double* plane = xv.data() + p * d.H * d.W;
        for (int64_t oh = 0; oh < d.OH; ++oh) {
            for (int64_t ow = 0; ow < d.OW; ++ow) {
                int64_t best = (oh * d.stride) * d.W + ow * d.stride;
                double bv = plane[best];
                for (int64_t ki = 0; ki < d.kernel; ++ki) {
                    for (int64_t kj = 0; kj < d.kernel; ++kj) {
                        const int64_t idx = (oh * d.stride + ki) * d.W + ow * d.stride + kj;
                        if (plane[idx] > bv) {  // first max wins on ties
                            bv = plane[idx];
                            best = idx;
                        }
                    }
                }
                const int64_t oi = p * d.OH * d.OW + oh * d.OW + ow;
                out[oi] = bv;
                (*argmax)[oi] = best;
            }
        }
    }
    Tensor tx = x;
    bool rg = grad_enabled() && x.requires_grad();
    Tensor result = make_tensor({d.N, d.C, d.OH, d.OW}, std::move(out), rg);
    if (!rg) return result;
    auto node = std::make_shared<GraphNode>();
    node->op = "maxpool2d";
    node->inputs = {x};
    node->backward = [tx, d, argmax, planes](const TensorImpl& o) {
        std::vector<double> gx(tx.data().size(), 0.0);
        for (int64_t p = 0; p < planes; ++p) {
            for (int64_t i = 0; i < d.OH * d.OW; ++i) {
                const int64_t oi = p * d.OH * d.OW + i;
                gx[p * d.H * d.W + (*argmax)[oi]] += o.grad[oi];
            }
        }
        accum_into(*tx.impl(), std::move(gx));
    };
    result.impl()->node = std::move(node);
    return result;
}

Tensor avgpool2d(const Tensor& x, int kernel, int stride) {
    const PoolDims d = pool_dims("avgpool2d", x, kernel, stride);
    const int64_t planes = d.N * d.C;
    const double inv = 1.0 / static_cast<double>(kernel * kernel);
    std::vector<double> out(static_cast<size_t>(planes * d.OH * d.OW));
    const auto& xv = x.data();
    for (int64_t p = 0; p < planes; ++p) {
        const double* plane = xv.data() + p * d.H * d.W;
        for (int64_t oh = 0; oh < d.OH; ++oh) {
            for (int64_t ow = 0; ow < d.OW; ++ow) {
                double s = 0.0;
                for (int64_t ki = 0; ki < d.kernel; ++ki)
                    for (int64_t kj = 0; kj < d.kernel; ++kj)
                        s += plane[(oh * d.stride + ki) * d.W + ow * d.stride + kj];
                out[p * d.OH * d.OW + oh * d.OW + ow] = s * inv;
            }
        }
    }
    Tensor tx = x;
    bool rg = grad_enabled() && x.requires_grad();
    Tensor result = make_tensor({d.N, d.C, d.OH, d.OW}, std::move(out), rg);
    if (!rg) return result;
    auto node = std::make_shared<GraphNode>();
    node->op = "avgpool2d";
    node->inputs = {x};
    node->backward = [tx, d, planes, inv](const TensorImpl& o) {
        std::vector<double> gx(tx.data().size(), 0.0);
        for (int64_t p = 0; p < planes; ++p) {
            for (int64_t oh = 0; oh < d.OH; ++oh) {
                for (int64_t ow = 0; ow < d.OW; ++ow) {
                    const double g = o.grad[p * d.OH * d.OW + oh * d.OW + ow] * inv;
                    for (int64_t ki = 0; ki < d.kernel; ++ki)
                        for (int64_t kj = 0; kj < d.kernel; ++kj)
                            gx[p * d.H * d.W + (oh * d.stride + ki) * d.W + ow * d.stride + kj] += g;
                }
            }
        }
        accum_into(*tx.impl(), std::move(gx));
    };
    result.impl()->node = std::move(node);
    return result;
}

}  // namespace xcb
