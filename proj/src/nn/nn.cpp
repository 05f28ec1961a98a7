#include "nn/nn.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace xcb {

Tensor xavier_uniform_init(Shape shape, Rng& rng) {
    if (shape.empty()) throw ContractError("xavier_uniform_init: shape needs at least one dim");
    int64_t fan_in, fan_out;
    if (shape.size() == 1) {
        fan_in = fan_out = shape[0];
    } else {
        int64_t receptive = 1;
        for (size_t i = 2; i < shape.size(); ++i) receptive *= shape[i];
        fan_in = shape[1] * receptive;
        fan_out = shape[0] * receptive;
    }
    if (fan_in <= 0 || fan_out <= 0) throw ContractError("xavier_uniform_init: zero fan");
    const double bound = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
    auto n = static_cast<size_t>(detail::numel_of(shape));
    std::vector<double> v(n);
    for (auto& x : v) x = rng.uniform(-bound, bound);
    return Tensor::from_data(std::move(shape), std::move(v));
}

Tensor logistic_noise(const Shape& shape, Rng& rng) {
    auto n = static_cast<size_t>(detail::numel_of(shape));
    std::vector<double> v(n);
    for (auto& x : v) {
        const double u = std::min(std::max(rng.uniform(), 1e-6), 1.0 - 1e-6);
        x = std::log(u) - std::log(1.0 - u);
    }
    return Tensor::from_data(shape, std::move(v));
}

Tensor gumbel_sigmoid_with_noise(const Tensor& logits, double tau, const Tensor& noise,
                                 bool hard) {
    if (tau <= 0.0) throw ContractError("gumbel_sigmoid: tau must be > 0");
    if (noise.shape() != logits.shape())
        throw DimensionError("gumbel_sigmoid: noise shape " + shape_str(noise.shape()) +
                             " does not match logits " + shape_str(logits.shape()));
    Tensor soft = sigmoid(scale(add(logits, noise), 1.0 / tau));
    return hard ? straight_through(soft) : soft;
}

Tensor gumbel_sigmoid(const Tensor& logits, double tau, Rng& rng, bool hard) {
    return gumbel_sigmoid_with_noise(logits, tau, logistic_noise(logits.shape(), rng), hard);
}

namespace {

// Exact threshold for one slice: find tau with sum_i [s_i - tau]_+^2 = 1
// where s = z/2. Scans candidate support sizes over the descending sort; the
// valid size k solves k*tau^2 - 2*S_k*tau + (Q_k - 1) = 0 with tau inside
// [s_{k+1}, s_k].
double entmax15_threshold(std::vector<double> s_sorted_desc) {
    const size_t n = s_sorted_desc.size();
    double ssum = 0.0, ssq = 0.0;
    double fallback = 0.0;
    for (size_t k = 1; k <= n; ++k) {
        const double v = s_sorted_desc[k - 1];
        ssum += v;
        ssq += v * v;
        const double mean = ssum / static_cast<double>(k);
        const double vv = ssq - ssum * mean;  // sum of squared deviations
        const double disc = (1.0 - vv) / static_cast<double>(k);
        if (disc < 0.0) continue;
        const double tau = mean - std::sqrt(disc);
        if (k == n) fallback = tau;
        if (tau <= s_sorted_desc[k - 1] + 1e-12 &&
            (k == n || tau >= s_sorted_desc[k] - 1e-12)) {
            return tau;
        }
    }
    return fallback;
}

}  // namespace

Tensor entmax15(const Tensor& scores, int axis) {
    const auto& shape = scores.shape();
    if (shape.empty() || axis < 0 || static_cast<size_t>(axis) >= shape.size())
        throw DimensionError("entmax15: bad axis for shape " + shape_str(shape));
    for (double v : scores.data())
        if (!std::isfinite(v)) throw NumericError("entmax15: non-finite score");

    const int64_t n = shape[axis];
    int64_t outer = 1, inner = 1;
    for (int d = 0; d < axis; ++d) outer *= shape[d];
    for (size_t d = static_cast<size_t>(axis) + 1; d < shape.size(); ++d) inner *= shape[d];

    std::vector<double> out(scores.data().size());
    std::vector<double> s(static_cast<size_t>(n)), sorted(static_cast<size_t>(n));
    for (int64_t o = 0; o < outer; ++o) {
        for (int64_t in = 0; in < inner; ++in) {
            const int64_t base = o * n * inner + in;
            for (int64_t i = 0; i < n; ++i) s[i] = 0.5 * scores.data()[base + i * inner];
            sorted = s;
            std::sort(sorted.begin(), sorted.end(), std::greater<>());
            const double tau = entmax15_threshold(sorted);
            for (int64_t i = 0; i < n; ++i) {
                const double d = s[i] - tau;
                out[base + i * inner] = d > 0.0 ? d * d : 0.0;
            }
        }
    }

    bool rg = grad_enabled() && scores.requires_grad();
    Tensor saved_p = Tensor::from_data(shape, out);
    Tensor result = make_tensor(shape, std::move(out), rg);
    if (!rg) return result;

    Tensor tz = scores;
    auto node = std::make_shared<GraphNode>();
    node->op = "entmax15";
    node->inputs = {scores};
    node->backward = [tz, saved_p, n, outer, inner](const TensorImpl& o) {
        // dL/dz_i = u_i * (g_i - sum_j(g_j u_j)/sum_j(u_j)) on the support,
        // 0 off-support, where u_i = sqrt(p_i) = s_i - tau.
        const auto& g = o.grad;
        const auto& p = saved_p.data();
        std::vector<double> gz(p.size(), 0.0);
        for (int64_t ou = 0; ou < outer; ++ou) {
            for (int64_t in = 0; in < inner; ++in) {
                const int64_t base = ou * n * inner + in;
                double num = 0.0, den = 0.0;
                for (int64_t i = 0; i < n; ++i) {
                    const double u = std::sqrt(p[base + i * inner]);
                    num += g[base + i * inner] * u;
                    den += u;
                }
                const double q = den > 0.0 ? num / den : 0.0;
                for (int64_t i = 0; i < n; ++i) {
                    const double u = std::sqrt(p[base + i * inner]);
                    gz[base + i * inner] = u * (g[base + i * inner] - q);
                }
            }
        }
        if (tz.impl()->grad.empty()) tz.impl()->grad.assign(gz.size(), 0.0);
        for (size_t i = 0; i < gz.size(); ++i) tz.impl()->grad[i] += gz[i];
    };
    result.impl()->node = std::move(node);
    return result;
}

namespace {

Tensor max_keepdim_detached(const Tensor& a, int axis) {
    const auto& shape = a.shape();
    const int64_t n = shape[axis];
    int64_t outer = 1, inner = 1;
    for (int d = 0; d < axis; ++d) outer *= shape[d];
    for (size_t d = static_cast<size_t>(axis) + 1; d < shape.size(); ++d) inner *= shape[d];
    Shape oshape = shape;
    oshape[axis] = 1;
    std::vector<double> out(static_cast<size_t>(outer * inner));
    for (int64_t o = 0; o < outer; ++o) {
        for (int64_t in = 0; in < inner; ++in) {
            double m = a.data()[o * n * inner + in];
            for (int64_t i = 1; i < n; ++i)
                m = std::max(m, a.data()[o * n * inner + i * inner + in]);
            out[o * inner + in] = m;
        }
    }
    return Tensor::from_data(std::move(oshape), std::move(out));
}

}  // namespace

Tensor softmax(const Tensor& scores, int axis) {
    const auto& shape = scores.shape();
    if (shape.empty() || axis < 0 || static_cast<size_t>(axis) >= shape.size())
        throw DimensionError("softmax: bad axis for shape " + shape_str(shape));
    Tensor e = exp(sub(scores, max_keepdim_detached(scores, axis)));
    return div(e, sum(e, axis, true));
}

Tensor sinusoidal_pe(int64_t seq_len, int64_t dim) {
    if (dim % 2 != 0) throw ContractError("sinusoidal_pe: dim must be even");
    if (seq_len < 1 || dim < 2) throw ContractError("sinusoidal_pe: bad size");
    std::vector<double> v(static_cast<size_t>(seq_len * dim));
    for (int64_t pos = 0; pos < seq_len; ++pos) {
        for (int64_t i = 0; i < dim / 2; ++i) {
            const double freq = std::pow(10000.0, -2.0 * static_cast<double>(i) /
                                                      static_cast<double>(dim));
            v[pos * dim + 2 * i] = std::sin(static_cast<double>(pos) * freq);
            v[pos * dim + 2 * i + 1] = std::cos(static_cast<double>(pos) * freq);
        }
    }
    return Tensor::from_data({seq_len, dim}, std::move(v));
}

void ScheduleConfig::validate() const {
    if (tau_min <= 0.0) throw ContractError("schedule: tau_min must be > 0");
    if (tau_decay < 0.0) throw ContractError("schedule: tau_decay must be >= 0");
    if (warmup_frac <= 0.0 || warmup_frac >= 1.0)
        throw ContractError("schedule: warmup_frac must be in (0,1)");
    if (total_steps < 1) throw ContractError("schedule: total_steps must be >= 1");
}

double default_tau_decay(double tau0, double tau_min, int64_t total_steps) {
    if (tau0 <= tau_min) return 0.0;
    const double span = 0.6 * static_cast<double>(total_steps);
    return span > 0.0 ? std::log(tau0 / tau_min) / span : 0.0;
}

double onecycle_lr(int64_t step, int64_t total_steps, double max_lr) {
    if (total_steps < 1) throw ContractError("onecycle_lr: total_steps must be >= 1");
    if (step < 0) throw ContractError("onecycle_lr: negative step");
    constexpr double kDiv = 25.0, kFinalDiv = 1e4, kWarmupFrac = 0.3;
    const double initial = max_lr / kDiv;
    const double floor = max_lr / kFinalDiv;
    if (step >= total_steps) return floor;
    const int64_t warm = std::max<int64_t>(1, llround(kWarmupFrac * static_cast<double>(total_steps)));
    const double pi = std::acos(-1.0);
    if (step <= warm) {
        const double t = static_cast<double>(step) / static_cast<double>(warm);
        return initial + (max_lr - initial) * 0.5 * (1.0 - std::cos(pi * t));
    }
    const double t = static_cast<double>(step - warm) / static_cast<double>(total_steps - warm);
    return floor + (max_lr - floor) * 0.5 * (1.0 + std::cos(pi * t));
}

double gumbel_temperature(int64_t step, const ScheduleConfig& cfg) {
    if (step < 0) throw ContractError("gumbel_temperature: negative step");
    return std::max(cfg.tau_min, cfg.tau0 * std::exp(-cfg.tau_decay * static_cast<double>(step)));
}

Optimizer Optimizer::adamw(double lr, double beta1, double beta2, double eps,
                           double weight_decay) {
    Optimizer o;
    o.kind_ = OptKind::adamw;
    o.lr_ = lr;
    o.beta1_ = beta1;
    o.beta2_ = beta2;
    o.eps_ = eps;
    o.weight_decay_ = weight_decay;
    return o;
}

Optimizer Optimizer::adadelta(double lr, double rho, double eps) {
    Optimizer o;
    o.kind_ = OptKind::adadelta;
    o.lr_ = lr;
    o.rho_ = rho;
    o.eps_ = eps;
    return o;
}

void Optimizer::add_param(const std::string& name, const Tensor& param) {
    if (!param.defined()) throw ContractError("optimizer: undefined parameter " + name);
    params_.emplace_back(name, param);
    buf_a_.emplace_back(param.data().size(), 0.0);
    buf_b_.emplace_back(param.data().size(), 0.0);
}

void Optimizer::add_params(const std::vector<std::pair<std::string, Tensor>>& params) {
    for (const auto& [name, p] : params) add_param(name, p);
}

void Optimizer::step() { step_with_lr(lr_); }

void Optimizer::step_with_lr(double lr) {
    ++step_count_;
    const auto t = static_cast<double>(step_count_);
    for (size_t pi = 0; pi < params_.size(); ++pi) {
        auto& [name, p] = params_[pi];
        auto& w = p.data();
        const auto& grad_buf = p.impl()->grad;
        const bool has_g = !grad_buf.empty();
        for (size_t i = 0; i < w.size(); ++i) {
            const double g = has_g ? grad_buf[i] : 0.0;
            if (!std::isfinite(g))
                throw NumericError("optimizer: non-finite gradient for parameter " + name);
            if (kind_ == OptKind::adamw) {
                double& m = buf_a_[pi][i];
                double& v = buf_b_[pi][i];
                m = beta1_ * m + (1.0 - beta1_) * g;
                v = beta2_ * v + (1.0 - beta2_) * g * g;
                const double mhat = m / (1.0 - std::pow(beta1_, t));
                const double vhat = v / (1.0 - std::pow(beta2_, t));
                w[i] -= lr * (mhat / (std::sqrt(vhat) + eps_) + weight_decay_ * w[i]);
            } else {
                double& acc = buf_a_[pi][i];
                double& accd = buf_b_[pi][i];
                acc = rho_ * acc + (1.0 - rho_) * g * g;
                const double dx = std::sqrt((accd + eps_) / (acc + eps_)) * g;
                accd = rho_ * accd + (1.0 - rho_) * dx * dx;
                w[i] -= lr * dx;
            }
        }
    }
}

void Optimizer::zero_grad() {
    for (auto& [name, p] : params_) p.zero_grad();
}

}  // namespace xcb
