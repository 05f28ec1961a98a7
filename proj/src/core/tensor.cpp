#include "core/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <unordered_set>

namespace xcb {

namespace {

thread_local int g_no_grad_depth = 0;

void check_finite_scalar(double v, const char* what) {
    if (!std::isfinite(v)) throw NumericError(std::string(what) + ": non-finite value");
}

std::vector<int64_t> strides_of(const Shape& shape) {
    std::vector<int64_t> st(shape.size());
    int64_t acc = 1;
    for (size_t i = shape.size(); i-- > 0;) {
        st[i] = acc;
        acc *= shape[i];
    }
    return st;
}

Shape broadcast_shape(const char* op, const Shape& a, const Shape& b) {
    const size_t nd = std::max(a.size(), b.size());
    Shape out(nd);
    for (size_t i = 0; i < nd; ++i) {
        const int64_t da = i < nd - a.size() ? 1 : a[i - (nd - a.size())];
        const int64_t db = i < nd - b.size() ? 1 : b[i - (nd - b.size())];
        if (da != db && da != 1 && db != 1) {
            throw DimensionError(std::string(op) + ": cannot broadcast " + shape_str(a) +
                                 " with " + shape_str(b));
        }
        out[i] = std::max(da, db);
    }
    return out;
}

// Strides of `shape` as seen from broadcast shape `out` (0 where stretched).
std::vector<int64_t> broadcast_strides(const Shape& shape, const Shape& out) {
    const auto own = strides_of(shape);
    std::vector<int64_t> st(out.size(), 0);
    const size_t off = out.size() - shape.size();
    for (size_t i = 0; i < shape.size(); ++i) {
        st[off + i] = shape[i] == 1 ? 0 : own[i];
    }
    return st;
}

// Sum-reduce a gradient of broadcast shape `from` back to `to`.
std::vector<double> reduce_to_shape(const std::vector<double>& g, const Shape& from,
                                    const Shape& to) {
    if (from == to) return g;
    std::vector<double> out(static_cast<size_t>(detail::numel_of(to)), 0.0);
    const auto gst = strides_of(from);
    const auto tst = broadcast_strides(to, from);
    const int64_t n = detail::numel_of(from);
    std::vector<int64_t> idx(from.size(), 0);
    for (int64_t lin = 0; lin < n; ++lin) {
        int64_t toff = 0;
        for (size_t d = 0; d < from.size(); ++d) toff += idx[d] * tst[d];
        out[static_cast<size_t>(toff)] += g[static_cast<size_t>(lin)];
        for (size_t d = from.size(); d-- > 0;) {
            if (++idx[d] < from[d]) break;
            idx[d] = 0;
        }
    }
    return out;
}

void accum_grad(TensorImpl& t, const std::vector<double>& g) {
    if (t.grad.empty()) t.grad.assign(t.data.size(), 0.0);
    for (size_t i = 0; i < g.size(); ++i) t.grad[i] += g[i];
}

const std::vector<double>& out_grad(const TensorImpl& out) { return out.grad; }

}  // namespace

NoGradGuard::NoGradGuard() { ++g_no_grad_depth; }
NoGradGuard::~NoGradGuard() { --g_no_grad_depth; }
bool grad_enabled() { return g_no_grad_depth == 0; }

int64_t detail::numel_of(const Shape& shape) {
    int64_t n = 1;
    for (int64_t d : shape) n *= d;
    return n;
}

Tensor make_tensor(Shape shape, std::vector<double> data, bool requires_grad) {
    auto impl = std::make_shared<TensorImpl>();
    if (detail::numel_of(shape) != static_cast<int64_t>(data.size())) {
        throw DimensionError("tensor: data length " + std::to_string(data.size()) +
                             " does not match shape " + shape_str(shape));
    }
    impl->shape = std::move(shape);
    impl->data = std::move(data);
    impl->requires_grad = requires_grad;
    return Tensor(std::move(impl));
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
    auto n = static_cast<size_t>(detail::numel_of(shape));
    return make_tensor(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
    auto n = static_cast<size_t>(detail::numel_of(shape));
    return make_tensor(std::move(shape), std::vector<double>(n, value), requires_grad);
}

Tensor Tensor::ones(Shape shape, bool requires_grad) { return full(std::move(shape), 1.0, requires_grad); }

Tensor Tensor::scalar(double value, bool requires_grad) {
    return make_tensor({}, std::vector<double>{value}, requires_grad);
}

Tensor Tensor::from_data(Shape shape, std::vector<double> data, bool requires_grad) {
    return make_tensor(std::move(shape), std::move(data), requires_grad);
}

double Tensor::item() const {
    if (numel() != 1) throw ContractError("item(): tensor has " + std::to_string(numel()) + " elements");
    return impl_->data[0];
}

double Tensor::at(std::initializer_list<int64_t> idx) const {
    if (idx.size() != ndim()) throw ContractError("at(): rank mismatch");
    const auto st = strides_of(impl_->shape);
    int64_t off = 0;
    size_t d = 0;
    for (int64_t i : idx) off += i * st[d++];
    return impl_->data[static_cast<size_t>(off)];
}

const std::vector<double>& Tensor::grad() const {
    if (!has_grad()) throw ContractError("grad(): no gradient present");
    return impl_->grad;
}

void Tensor::zero_grad() {
    if (impl_) impl_->grad.clear();
}

Tensor Tensor::detach() const {
    return make_tensor(impl_->shape, impl_->data, false);
}

namespace {

Tensor make_result(const char* op, Shape shape, std::vector<double> data,
                   std::vector<Tensor> inputs,
                   std::function<void(const TensorImpl&)> bwd) {
    bool rg = false;
    if (grad_enabled()) {
        for (const auto& t : inputs) rg = rg || t.requires_grad();
    }
    Tensor out = make_tensor(std::move(shape), std::move(data), rg);
    if (rg) {
        auto node = std::make_shared<GraphNode>();
        node->op = op;
        node->inputs = std::move(inputs);
        node->backward = std::move(bwd);
        out.impl()->node = std::move(node);
    }
    return out;
}

// Elementwise binary op with broadcasting. fa/fb give d(out)/d(a|b) from the
// operand values.
template <class F, class Da, class Db>
Tensor binary_op(const char* op, const Tensor& a, const Tensor& b, F f, Da da, Db db) {
    const Shape oshape = broadcast_shape(op, a.shape(), b.shape());
    const int64_t n = detail::numel_of(oshape);
    std::vector<double> out(static_cast<size_t>(n));

    const auto& av = a.data();
    const auto& bv = b.data();
    if (a.shape() == b.shape()) {
        for (int64_t i = 0; i < n; ++i) out[i] = f(av[i], bv[i]);
    } else {
        const auto ast = broadcast_strides(a.shape(), oshape);
        const auto bst = broadcast_strides(b.shape(), oshape);
        std::vector<int64_t> idx(oshape.size(), 0);
        for (int64_t lin = 0; lin < n; ++lin) {
            int64_t ai = 0, bi = 0;
            for (size_t d = 0; d < oshape.size(); ++d) {
                ai += idx[d] * ast[d];
                bi += idx[d] * bst[d];
            }
            out[lin] = f(av[static_cast<size_t>(ai)], bv[static_cast<size_t>(bi)]);
            for (size_t d = oshape.size(); d-- > 0;) {
                if (++idx[d] < oshape[d]) break;
                idx[d] = 0;
            }
        }
    }

    Tensor ta = a, tb = b;
    return make_result(op, oshape, std::move(out), {a, b},
                       [ta, tb, oshape, da, db](const TensorImpl& o) {
                           const auto& g = out_grad(o);
                           const int64_t n2 = detail::numel_of(oshape);
                           const auto& av2 = ta.data();
                           const auto& bv2 = tb.data();
                           const auto ast = broadcast_strides(ta.shape(), oshape);
                           const auto bst = broadcast_strides(tb.shape(), oshape);
                           std::vector<double> ga, gb;
                           if (ta.requires_grad()) ga.resize(static_cast<size_t>(n2));
                           if (tb.requires_grad()) gb.resize(static_cast<size_t>(n2));
                           std::vector<int64_t> idx(oshape.size(), 0);
                           for (int64_t lin = 0; lin < n2; ++lin) {
                               int64_t ai = 0, bi = 0;
                               for (size_t d = 0; d < oshape.size(); ++d) {
                                   ai += idx[d] * ast[d];
                                   bi += idx[d] * bst[d];
                               }
                               const double x = av2[static_cast<size_t>(ai)];
                               const double y = bv2[static_cast<size_t>(bi)];
                               if (ta.requires_grad()) ga[lin] = g[lin] * da(x, y);
                               if (tb.requires_grad()) gb[lin] = g[lin] * db(x, y);
                               for (size_t d = oshape.size(); d-- > 0;) {
                                   if (++idx[d] < oshape[d]) break;
                                   idx[d] = 0;
                               }
                           }
                           if (ta.requires_grad())
                               accum_grad(*ta.impl(), reduce_to_shape(ga, oshape, ta.shape()));
                           if (tb.requires_grad())
                               accum_grad(*tb.impl(), reduce_to_shape(gb, oshape, tb.shape()));
                       });
}

template <class F, class D>
Tensor unary_op(const char* op, const Tensor& a, F f, D dfdx_from_out_and_in) {
    const int64_t n = a.numel();
    std::vector<double> out(static_cast<size_t>(n));
    const auto& av = a.data();
    for (int64_t i = 0; i < n; ++i) out[i] = f(av[i]);

    Tensor ta = a;
    Tensor saved_out = make_tensor(a.shape(), out, false);
    return make_result(op, a.shape(), std::move(out), {a},
                       [ta, saved_out, dfdx_from_out_and_in](const TensorImpl& o) {
                           if (!ta.requires_grad()) return;
                           const auto& g = out_grad(o);
                           const auto& av2 = ta.data();
                           const auto& ov = saved_out.data();
                           std::vector<double> ga(g.size());
                           for (size_t i = 0; i < g.size(); ++i)
                               ga[i] = g[i] * dfdx_from_out_and_in(ov[i], av2[i]);
                           accum_grad(*ta.impl(), ga);
                       });
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
    return binary_op(
        "add", a, b, [](double x, double y) { return x + y; },
        [](double, double) { return 1.0; }, [](double, double) { return 1.0; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
    return binary_op(
        "sub", a, b, [](double x, double y) { return x - y; },
        [](double, double) { return 1.0; }, [](double, double) { return -1.0; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
    return binary_op(
        "mul", a, b, [](double x, double y) { return x * y; },
        [](double, double y) { return y; }, [](double x, double) { return x; });
}

Tensor div(const Tensor& a, const Tensor& b) {
    return binary_op(
        "div", a, b, [](double x, double y) { return x / y; },
        [](double, double y) { return 1.0 / y; },
        [](double x, double y) { return -x / (y * y); });
}

Tensor neg(const Tensor& a) { return scale(a, -1.0); }

Tensor scale(const Tensor& a, double s) {
    return unary_op(
        "scale", a, [s](double x) { return s * x; },
        [s](double, double) { return s; });
}

Tensor add_scalar(const Tensor& a, double s) {
    return unary_op(
        "add_scalar", a, [s](double x) { return x + s; },
        [](double, double) { return 1.0; });
}

Tensor relu(const Tensor& a) {
    return unary_op(
        "relu", a, [](double x) { return x > 0.0 ? x : 0.0; },
        [](double, double x) { return x > 0.0 ? 1.0 : 0.0; });
}

Tensor sigmoid(const Tensor& a) {
    return unary_op(
        "sigmoid", a, [](double x) { return 1.0 / (1.0 + std::exp(-x)); },
        [](double y, double) { return y * (1.0 - y); });
}

Tensor exp(const Tensor& a) {
    return unary_op(
        "exp", a, [](double x) { return std::exp(x); },
        [](double y, double) { return y; });
}

Tensor log(const Tensor& a) {
    return unary_op(
        "log", a, [](double x) { return std::log(x); },
        [](double, double x) { return 1.0 / x; });
}

Tensor sqrt(const Tensor& a) {
    return unary_op(
        "sqrt", a, [](double x) { return std::sqrt(x); },
        [](double y, double) { return 0.5 / y; });
}

Tensor clamp(const Tensor& a, double lo, double hi) {
    if (lo > hi) throw ContractError("clamp: lo > hi");
    return unary_op(
        "clamp", a, [lo, hi](double x) { return std::min(std::max(x, lo), hi); },
        [lo, hi](double, double x) { return (x > lo && x < hi) ? 1.0 : 0.0; });
}

Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.ndim() != 2 || b.ndim() != 2 || a.dim(1) != b.dim(0)) {
        throw DimensionError("matmul: incompatible shapes " + shape_str(a.shape()) + " x " +
                             shape_str(b.shape()));
    }
    const int64_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    std::vector<double> out(static_cast<size_t>(m * n), 0.0);
    detail::matmul_raw(a.data().data(), b.data().data(), out.data(), m, k, n);

    Tensor ta = a, tb = b;
    return make_result("matmul", {m, n}, std::move(out), {a, b},
                       [ta, tb, m, k, n](const TensorImpl& o) {
                           const auto& g = out_grad(o);
                           if (ta.requires_grad()) {
                               // dA = G * B^T
                               std::vector<double> bt(static_cast<size_t>(k * n));
                               const auto& bv = tb.data();
                               for (int64_t i = 0; i < k; ++i)
                                   for (int64_t j = 0; j < n; ++j)
                                       bt[j * k + i] = bv[i * n + j];
                               std::vector<double> ga(static_cast<size_t>(m * k), 0.0);
                               detail::matmul_raw(g.data(), bt.data(), ga.data(), m, n, k);
                               accum_grad(*ta.impl(), ga);
                           }
                           if (tb.requires_grad()) {
                               // dB = A^T * G
                               std::vector<double> at(static_cast<size_t>(m * k));
                               const auto& av = ta.data();
                               for (int64_t i = 0; i < m; ++i)
                                   for (int64_t j = 0; j < k; ++j)
                                       at[j * m + i] = av[i * k + j];
                               std::vector<double> gb(static_cast<size_t>(k * n), 0.0);
                               detail::matmul_raw(at.data(), g.data(), gb.data(), k, m, n);
                               accum_grad(*tb.impl(), gb);
                           }
                       });
}

Tensor transpose(const Tensor& a) {
    if (a.ndim() != 2) throw DimensionError("transpose: expected 2-D, got " + shape_str(a.shape()));
    const int64_t m = a.dim(0), n = a.dim(1);
    std::vector<double> out(static_cast<size_t>(m * n));
    const auto& av = a.data();
    for (int64_t i = 0; i < m; ++i)
        for (int64_t j = 0; j < n; ++j) out[j * m + i] = av[i * n + j];

    Tensor ta = a;
    return make_result("transpose", {n, m}, std::move(out), {a},
                       [ta, m, n](const TensorImpl& o) {
                           if (!ta.requires_grad()) return;
                           const auto& g = out_grad(o);
                           std::vector<double> ga(static_cast<size_t>(m * n));
                           for (int64_t j = 0; j < n; ++j)
                               for (int64_t i = 0; i < m; ++i) ga[i * n + j] = g[j * m + i];
                           accum_grad(*ta.impl(), ga);
                       });
}

Tensor reshape(const Tensor& a, Shape shape) {
    if (detail::numel_of(shape) != a.numel()) {
        throw DimensionError("reshape: cannot view " + shape_str(a.shape()) + " as " +
                             shape_str(shape));
    }
    Tensor ta = a;
    return make_result("reshape", std::move(shape), a.data(), {a},
                       [ta](const TensorImpl& o) {
                           if (!ta.requires_grad()) return;
                           accum_grad(*ta.impl(), out_grad(o));
                       });
}

Tensor concat(const std::vector<Tensor>& parts, int axis) {
    if (parts.empty()) throw ContractError("concat: no inputs");
    const auto& first = parts.front().shape();
    if (axis < 0 || static_cast<size_t>(axis) >= first.size())
        throw DimensionError("concat: bad axis");
    Shape oshape = first;
    int64_t total = first[axis];
    for (size_t p = 1; p < parts.size(); ++p) {
        const auto& s = parts[p].shape();
        if (s.size() != first.size())
            throw DimensionError("concat: rank mismatch " + shape_str(s));
        for (size_t d = 0; d < s.size(); ++d) {
            if (static_cast<int>(d) != axis && s[d] != first[d])
                throw DimensionError("concat: shape mismatch " + shape_str(s) + " vs " +
                                     shape_str(first));
        }
        total += s[axis];
    }
    oshape[axis] = total;

    // outer x (axis) x inner layout
    int64_t outer = 1, inner = 1;
    for (int d = 0; d < axis; ++d) outer *= first[d];
    for (size_t d = static_cast<size_t>(axis) + 1; d < first.size(); ++d) inner *= first[d];

    std::vector<double> out(static_cast<size_t>(detail::numel_of(oshape)));
    int64_t axis_off = 0;
    for (const auto& p : parts) {
        const int64_t pa = p.shape()[axis];
        const auto& pv = p.data();
        for (int64_t o = 0; o < outer; ++o) {
            std::copy(pv.begin() + o * pa * inner, pv.begin() + (o + 1) * pa * inner,
                      out.begin() + (o * total + axis_off) * inner);
        }
        axis_off += pa;
    }

    std::vector<Tensor> inputs = parts;
    return make_result("concat", oshape, std::move(out), parts,
                       [inputs, axis, outer, inner, total](const TensorImpl& o) {
                           const auto& g = out_grad(o);
                           int64_t off = 0;
                           for (const auto& p : inputs) {
                               const int64_t pa = p.shape()[axis];
                               if (p.requires_grad()) {
                                   std::vector<double> gp(static_cast<size_t>(pa * outer * inner));
                                   for (int64_t ou = 0; ou < outer; ++ou) {
                                       std::copy(g.begin() + (ou * total + off) * inner,
                                                 g.begin() + (ou * total + off + pa) * inner,
                                                 gp.begin() + ou * pa * inner);
                                   }
                                   accum_grad(*p.impl(), gp);
                               }
                               off += pa;
                           }
                       });
}

Tensor slice(const Tensor& a, int axis, int64_t start, int64_t end) {
    const auto& s = a.shape();
    if (axis < 0 || static_cast<size_t>(axis) >= s.size()) throw DimensionError("slice: bad axis");
    if (start < 0 || end > s[axis] || start >= end)
        throw DimensionError("slice: bad range [" + std::to_string(start) + "," +
                             std::to_string(end) + ") on " + shape_str(s));
    Shape oshape = s;
    oshape[axis] = end - start;
    int64_t outer = 1, inner = 1;
    for (int d = 0; d < axis; ++d) outer *= s[d];
    for (size_t d = static_cast<size_t>(axis) + 1; d < s.size(); ++d) inner *= s[d];

    const int64_t len = end - start, full = s[axis];
    std::vector<double> out(static_cast<size_t>(outer * len * inner));
    const auto& av = a.data();
    for (int64_t o = 0; o < outer; ++o) {
        std::copy(av.begin() + (o * full + start) * inner, av.begin() + (o * full + end) * inner,
                  out.begin() + o * len * inner);
    }

    Tensor ta = a;
    return make_result("slice", oshape, std::move(out), {a},
                       [ta, outer, inner, len, full, start](const TensorImpl& o) {
                           if (!ta.requires_grad()) return;
                           const auto& g = out_grad(o);
                           std::vector<double> ga(ta.data().size(), 0.0);
                           for (int64_t ou = 0; ou < outer; ++ou) {
                               for (int64_t i = 0; i < len * inner; ++i)
                                   ga[(ou * full + start) * inner + i] += g[ou * len * inner + i];
                           }
                           accum_grad(*ta.impl(), ga);
                       });
}

Tensor gather_rows(const Tensor& table, const std::vector<int64_t>& rows) {
    if (table.ndim() != 2) throw DimensionError("gather_rows: table must be 2-D");
    const int64_t nrows = table.dim(0), width = table.dim(1);
    for (int64_t r : rows) {
        if (r < 0 || r >= nrows)
            throw ContractError("gather_rows: row " + std::to_string(r) + " out of range [0," +
                                std::to_string(nrows) + ")");
    }
    std::vector<double> out(rows.size() * static_cast<size_t>(width));
    const auto& tv = table.data();
    for (size_t i = 0; i < rows.size(); ++i) {
        std::copy(tv.begin() + rows[i] * width, tv.begin() + (rows[i] + 1) * width,
                  out.begin() + static_cast<int64_t>(i) * width);
    }
    Tensor tt = table;
    auto rows_copy = rows;
    return make_result("gather_rows", {static_cast<int64_t>(rows.size()), width}, std::move(out),
                       {table}, [tt, rows_copy, width](const TensorImpl& o) {
                           if (!tt.requires_grad()) return;
                           const auto& g = out_grad(o);
                           std::vector<double> ga(tt.data().size(), 0.0);
                           for (size_t i = 0; i < rows_copy.size(); ++i) {
                               for (int64_t j = 0; j < width; ++j)
                                   ga[rows_copy[i] * width + j] +=
                                       g[static_cast<int64_t>(i) * width + j];
                           }
                           accum_grad(*tt.impl(), ga);
                       });
}

Tensor sum(const Tensor& a) {
    double s = 0.0;
    for (double v : a.data()) s += v;
    Tensor ta = a;
    return make_result("sum", {}, {s}, {a}, [ta](const TensorImpl& o) {
        if (!ta.requires_grad()) return;
        const double g = out_grad(o)[0];
        std::vector<double> ga(ta.data().size(), g);
        accum_grad(*ta.impl(), ga);
    });
}

Tensor sum(const Tensor& a, int axis, bool keepdim) {
    const auto& s = a.shape();
    if (axis < 0 || static_cast<size_t>(axis) >= s.size()) throw DimensionError("sum: bad axis");
    int64_t outer = 1, inner = 1;
    const int64_t red = s[axis];
    for (int d = 0; d < axis; ++d) outer *= s[d];
    for (size_t d = static_cast<size_t>(axis) + 1; d < s.size(); ++d) inner *= s[d];

    Shape oshape;
    for (size_t d = 0; d < s.size(); ++d) {
        if (static_cast<int>(d) == axis) {
            if (keepdim) oshape.push_back(1);
        } else {
            oshape.push_back(s[d]);
        }
    }
    std::vector<double> out(static_cast<size_t>(outer * inner), 0.0);
    const auto& av = a.data();
    for (int64_t o = 0; o < outer; ++o)
        for (int64_t r = 0; r < red; ++r)
            for (int64_t i = 0; i < inner; ++i)
                out[o * inner + i] += av[(o * red + r) * inner + i];

    Tensor ta = a;
    return make_result("sum_axis", oshape, std::move(out), {a},
                       [ta, outer, inner, red](const TensorImpl& o) {
                           if (!ta.requires_grad()) return;
                           const auto& g = out_grad(o);
                           std::vector<double> ga(ta.data().size());
                           for (int64_t ou = 0; ou < outer; ++ou)
                               for (int64_t r = 0; r < red; ++r)
                                   for (int64_t i = 0; i < inner; ++i)
                                       ga[(ou * red + r) * inner + i] = g[ou * inner + i];
                           accum_grad(*ta.impl(), ga);
                       });
}

Tensor mean(const Tensor& a) { return scale(sum(a), 1.0 / static_cast<double>(a.numel())); }

Tensor mean(const Tensor& a, int axis, bool keepdim) {
    return scale(sum(a, axis, keepdim), 1.0 / static_cast<double>(a.shape()[axis]));
}

Tensor straight_through(const Tensor& soft, double threshold) {
    const int64_t n = soft.numel();
    std::vector<double> out(static_cast<size_t>(n));
    const auto& sv = soft.data();
    for (int64_t i = 0; i < n; ++i) {
        const double v = std::min(std::max(sv[i], 0.0), 1.0);
        out[i] = v > threshold ? 1.0 : 0.0;
    }
    Tensor ts = soft;
    return make_result("straight_through", soft.shape(), std::move(out), {soft},
                       [ts](const TensorImpl& o) {
                           if (!ts.requires_grad()) return;
                           accum_grad(*ts.impl(), out_grad(o));
                       });
}

void backward(const Tensor& loss) {
    if (!loss.defined() || loss.numel() != 1)
        throw ContractError("backward: loss must be a scalar tensor");
    check_finite_scalar(loss.item(), "backward loss");

    // Reverse topological order via iterative DFS post-order.
    std::vector<TensorImpl*> order;
    std::unordered_set<TensorImpl*> visited;
    struct Frame {
        TensorImpl* impl;
        size_t next_child;
    };
    std::vector<Frame> stack;
    if (loss.impl()->node) {
        stack.push_back({loss.impl().get(), 0});
        visited.insert(loss.impl().get());
    }
    while (!stack.empty()) {
        Frame& fr = stack.back();
        GraphNode* node = fr.impl->node.get();
        if (node == nullptr || fr.next_child >= node->inputs.size()) {
            order.push_back(fr.impl);
            stack.pop_back();
            continue;
        }
        TensorImpl* child = node->inputs[fr.next_child++].impl().get();
        if (child->node && visited.insert(child).second) {
            stack.push_back({child, 0});
        }
    }

    accum_grad(*loss.impl(), {1.0});
    for (size_t i = order.size(); i-- > 0;) {
        TensorImpl* impl = order[i];
        if (impl->grad.empty()) continue;  // not reached by any gradient path
        impl->node->backward(*impl);
    }
}

double grad_check(const std::function<Tensor(const std::vector<Tensor>&)>& fn,
                  std::vector<Tensor> inputs, double eps) {
    for (auto& t : inputs) {
        t.set_requires_grad(true);
        t.zero_grad();
    }
    Tensor loss = fn(inputs);
    if (loss.numel() != 1) throw ContractError("grad_check: fn must return a scalar");
    if (!std::isfinite(loss.item())) throw NumericError("grad_check: fn returned non-finite value");
    backward(loss);

    NoGradGuard probe_guard;  // finite-difference probes need values only
    double max_err = 0.0;
    for (auto& t : inputs) {
        std::vector<double> analytic(t.numel(), 0.0);
        if (t.has_grad()) analytic = t.grad();
        for (int64_t i = 0; i < t.numel(); ++i) {
            const double orig = t.data()[i];
            t.data()[i] = orig + eps;
            const double fp = fn(inputs).item();
            t.data()[i] = orig - eps;
            const double fm = fn(inputs).item();
            t.data()[i] = orig;
            if (!std::isfinite(fp) || !std::isfinite(fm))
                throw NumericError("grad_check: non-finite fn output during probing");
            const double numeric = (fp - fm) / (2.0 * eps);
            const double a = analytic[i];
            const double err = std::abs(a - numeric) /
                               std::max({std::abs(a), std::abs(numeric), 1e-8});
            max_err = std::max(max_err, err);
        }
    }
    return max_err;
}

}  // namespace xcb
