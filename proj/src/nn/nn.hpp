#pragma once

#include <string>
#include <vector>

#include "core/tensor.hpp"

namespace xcb {

// Values uniform in +-sqrt(6/(fan_in+fan_out)). For rank >= 2 the receptive
// field (dims past the first two) multiplies both fans, so conv kernels get
// the usual treatment; rank-1 shapes use the single dim for both fans.
Tensor xavier_uniform_init(Shape shape, Rng& rng);

// g = log u - log(1-u) with u uniform, clamped to [1e-6, 1-1e-6]. Constant
// (non-differentiable) tensor.
Tensor logistic_noise(const Shape& shape, Rng& rng);

// soft = sigmoid((logits + g)/tau); hard additionally wraps in
// straight_through. The noise-taking overload exists so tests can pin noise.
Tensor gumbel_sigmoid(const Tensor& logits, double tau, Rng& rng, bool hard);
Tensor gumbel_sigmoid_with_noise(const Tensor& logits, double tau, const Tensor& noise, bool hard);

// Exact alpha=1.5 entmax along `axis` with the exact Jacobian in backward.
Tensor entmax15(const Tensor& scores, int axis);

// Numerically stable softmax along `axis`, built from catalog ops.
Tensor softmax(const Tensor& scores, int axis);

// Standard sin/cos positional encoding, shape [seq_len, dim]; dim must be even.
Tensor sinusoidal_pe(int64_t seq_len, int64_t dim);

struct ScheduleConfig {
    double max_lr_visual = 0.25;
    double max_lr_text = 1e-3;
    int64_t total_steps = 1;
    double warmup_frac = 0.3;
    double tau0 = 1.0;
    double tau_min = 0.5;
    double tau_decay = 0.0;  // per-step exponential rate

    void validate() const;
};

// Rate such that tau0*exp(-r*step) reaches tau_min at 60% of total_steps.
double default_tau_decay(double tau0, double tau_min, int64_t total_steps);

// Cosine one-cycle: ramp from max_lr/25 to max_lr over the first 30% of
// steps, then anneal to max_lr/1e4. Steps past total clamp to the floor.
double onecycle_lr(int64_t step, int64_t total_steps, double max_lr);

// tau = max(tau_min, tau0 * exp(-tau_decay * step)).
double gumbel_temperature(int64_t step, const ScheduleConfig& cfg);

enum class OptKind { adamw, adadelta };

// Holds parameter handles and per-parameter moment buffers; step() applies
// the update in place reading each parameter's accumulated gradient.
class Optimizer {
public:
    static Optimizer adamw(double lr = 1e-3, double beta1 = 0.9, double beta2 = 0.999,
                           double eps = 1e-8, double weight_decay = 0.01);
    static Optimizer adadelta(double lr = 0.25, double rho = 0.95, double eps = 1e-6);

    void add_param(const std::string& name, const Tensor& param);
    void add_params(const std::vector<std::pair<std::string, Tensor>>& params);

    // Missing gradients are treated as zero (decoupled decay still applies).
    void step();                 // uses the configured base lr
    void step_with_lr(double lr);
    void zero_grad();

    int64_t step_count() const { return step_count_; }
    double base_lr() const { return lr_; }
    OptKind kind() const { return kind_; }
    const std::vector<std::pair<std::string, Tensor>>& params() const { return params_; }

private:
    Optimizer() = default;

    OptKind kind_ = OptKind::adamw;
    double lr_ = 0.0, beta1_ = 0.0, beta2_ = 0.0, eps_ = 0.0, weight_decay_ = 0.0, rho_ = 0.0;
    int64_t step_count_ = 0;
    std::vector<std::pair<std::string, Tensor>> params_;
    std::vector<std::vector<double>> buf_a_;  // adamw m | adadelta E[g^2]
    std::vector<std::vector<double>> buf_b_;  // adamw v | adadelta E[dx^2]
};

}  // namespace xcb
