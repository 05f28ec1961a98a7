#pragma once

#include <functional>
#include <initializer_list>
#include <memory>
#include <string>
#include <vector>

#include "core/common.hpp"

namespace xcb {

using Shape = std::vector<int64_t>;

class Tensor;
struct TensorImpl;

// One recorded op in the reverse-mode graph. `backward` reads the output's
// accumulated gradient and adds each input's contribution into its grad
// buffer. Saved activations live inside the closure.
struct GraphNode {
    const char* op = "";
    std::vector<Tensor> inputs;
    std::function<void(const TensorImpl& out)> backward;
};

struct TensorImpl {
    Shape shape;
    std::vector<double> data;
    std::vector<double> grad;  // empty until backward touches it
    bool requires_grad = false;
    std::shared_ptr<GraphNode> node;  // op that produced this tensor, if any
};

// RAII switch that suppresses graph recording (evaluation paths).
class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;
};

bool grad_enabled();

// Value-semantics handle over shared storage; copies alias the same buffer,
// matching how parameters are shared between model, optimizer and graph.
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor full(Shape shape, double value, bool requires_grad = false);
    static Tensor ones(Shape shape, bool requires_grad = false);
    static Tensor scalar(double value, bool requires_grad = false);
    static Tensor from_data(Shape shape, std::vector<double> data, bool requires_grad = false);

    bool defined() const { return impl_ != nullptr; }
    const Shape& shape() const { return impl_->shape; }
    size_t ndim() const { return impl_->shape.size(); }
    int64_t dim(size_t i) const { return impl_->shape[i]; }
    int64_t numel() const { return static_cast<int64_t>(impl_->data.size()); }

    std::vector<double>& data() { return impl_->data; }
    const std::vector<double>& data() const { return impl_->data; }

    double item() const;
    double at(std::initializer_list<int64_t> idx) const;

    bool requires_grad() const { return impl_->requires_grad; }
    Tensor& set_requires_grad(bool v) {
        impl_->requires_grad = v;
        return *this;
    }

    bool has_grad() const { return impl_ && !impl_->grad.empty(); }
    const std::vector<double>& grad() const;
    void zero_grad();

    // Copy of the values, detached from any graph.
    Tensor detach() const;

    std::shared_ptr<TensorImpl> impl() const { return impl_; }

private:
    explicit Tensor(std::shared_ptr<TensorImpl> impl) : impl_(std::move(impl)) {}
    std::shared_ptr<TensorImpl> impl_;
    friend Tensor make_tensor(Shape shape, std::vector<double> data, bool requires_grad);
};

Tensor make_tensor(Shape shape, std::vector<double> data, bool requires_grad);

// ---- op catalog -----------------------------------------------------------
// Binary elementwise ops broadcast with numpy rules (missing leading dims and
// size-1 dims stretch); gradients are sum-reduced back over broadcast axes.

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor neg(const Tensor& a);
Tensor scale(const Tensor& a, double s);
Tensor add_scalar(const Tensor& a, double s);

Tensor relu(const Tensor& a);
Tensor sigmoid(const Tensor& a);
Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);
Tensor sqrt(const Tensor& a);
// Gradient passes only where lo < x < hi (zero at and beyond the bounds).
Tensor clamp(const Tensor& a, double lo, double hi);

Tensor matmul(const Tensor& a, const Tensor& b);  // 2-D
Tensor transpose(const Tensor& a);                // 2-D
Tensor reshape(const Tensor& a, Shape shape);
Tensor concat(const std::vector<Tensor>& parts, int axis);
Tensor slice(const Tensor& a, int axis, int64_t start, int64_t end);
// Row gather on a 2-D table (embedding lookup); backward scatter-adds.
Tensor gather_rows(const Tensor& table, const std::vector<int64_t>& rows);

Tensor sum(const Tensor& a);
Tensor sum(const Tensor& a, int axis, bool keepdim);
Tensor mean(const Tensor& a);
Tensor mean(const Tensor& a, int axis, bool keepdim);

// x: [N,C,H,W], w: [Cout,C,kh,kw], bias: [Cout] or undefined.
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias, int stride, int pad);
Tensor maxpool2d(const Tensor& x, int kernel, int stride);
Tensor avgpool2d(const Tensor& x, int kernel, int stride);

// Forward thresholds at `threshold` (strict >, so exactly 0.5 maps to 0);
// backward is the identity. Inputs are clamped to [0,1] before thresholding.
Tensor straight_through(const Tensor& soft, double threshold = 0.5);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }

// Reverse-mode sweep from a scalar loss. Each reachable node is visited once
// in reverse topological order; leaf gradients accumulate across calls.
void backward(const Tensor& loss);

// Central finite differences vs analytic gradients; returns the max over all
// input coordinates of |a-n| / max(|a|,|n|,1e-8).
double grad_check(const std::function<Tensor(const std::vector<Tensor>&)>& fn,
                  std::vector<Tensor> inputs, double eps = 1e-5);

namespace detail {
// C[m,n] = A[m,k] * B[k,n]. C must be zero-filled. Row-parallel; each output
// element is a serial dot product, so results are thread-count invariant.
void matmul_raw(const double* a, const double* b, double* c, int64_t m, int64_t k, int64_t n);
int64_t numel_of(const Shape& shape);
}  // namespace detail

}  // namespace xcb
