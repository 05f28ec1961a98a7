#include "losses/losses.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "nn/nn.hpp"

namespace xcb {

namespace {

Tensor log_sum_exp_rows(const Tensor& z) {
    // z is [N,C] already max-shifted, so exp cannot overflow.
    return log(sum(exp(z), 1, true));
}

Tensor max_rows_detached(const Tensor& x) {
    const int64_t n = x.dim(0), c = x.dim(1);
    std::vector<double> m(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i) {
        double best = x.data()[i * c];
        for (int64_t j = 1; j < c; ++j) best = std::max(best, x.data()[i * c + j]);
        m[static_cast<size_t>(i)] = best;
    }
    return Tensor::from_data({n, 1}, std::move(m));
}

Tensor one_minus(const Tensor& x) { return add_scalar(neg(x), 1.0); }

}  // namespace

Tensor cross_entropy_batch(const Tensor& logits, const std::vector<int64_t>& labels) {
    if (logits.ndim() != 2)
        throw DimensionError("cross_entropy: expected [N,C] logits, got " +
                             shape_str(logits.shape()));
    const int64_t n = logits.dim(0), c = logits.dim(1);
    if (static_cast<int64_t>(labels.size()) != n)
        throw ContractError("cross_entropy: " + std::to_string(labels.size()) + " labels for " +
                            std::to_string(n) + " rows");
    std::vector<double> onehot(static_cast<size_t>(n * c), 0.0);
    for (int64_t i = 0; i < n; ++i) {
        if (labels[static_cast<size_t>(i)] < 0 || labels[static_cast<size_t>(i)] >= c)
            throw ContractError("cross_entropy: label " +
                                std::to_string(labels[static_cast<size_t>(i)]) +
                                " outside [0," + std::to_string(c) + ")");
        onehot[i * c + labels[static_cast<size_t>(i)]] = 1.0;
    }
    Tensor z = sub(logits, max_rows_detached(logits));
    Tensor lse = log_sum_exp_rows(z);                            // [N,1]
    Tensor picked = sum(mul(z, Tensor::from_data({n, c}, std::move(onehot))), 1, true);
    return mean(sub(lse, picked));
}

Tensor cross_entropy(const Tensor& logits, int64_t label) {
    if (logits.ndim() != 1)
        throw DimensionError("cross_entropy: expected 1-D logits, got " +
                             shape_str(logits.shape()));
    return cross_entropy_batch(reshape(logits, {1, logits.dim(0)}), {label});
}

Tensor bce_with_logits(const Tensor& logits, const Tensor& targets) {
    if (logits.shape() != targets.shape())
        throw DimensionError("bce: logits " + shape_str(logits.shape()) + " vs targets " +
                             shape_str(targets.shape()));
    Tensor p = clamp(sigmoid(logits), 1e-7, 1.0 - 1e-7);
    Tensor ll = add(mul(targets, log(p)), mul(one_minus(targets), log(one_minus(p))));
    return neg(mean(ll));
}

namespace {

void check_tie_inputs(const char* op, const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape())
        throw ContractError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                            " vs " + shape_str(b.shape()));
    if (a.numel() == 0) throw ContractError(std::string(op) + ": empty input");
}

}  // namespace

Tensor js_tie(const Tensor& c_prob, const Tensor& f_prob, double eps) {
    check_tie_inputs("js_tie", c_prob, f_prob);
    Tensor c = clamp(c_prob, eps, 1.0 - eps);
    Tensor f = clamp(f_prob, eps, 1.0 - eps);
    Tensor m = scale(add(c, f), 0.5);
    Tensor term = add(add(mul(c, log(div(c, m))), mul(one_minus(c), log(div(one_minus(c), one_minus(m))))),
                      add(mul(f, log(div(f, m))), mul(one_minus(f), log(div(one_minus(f), one_minus(m))))));
    return mean(term);
}

Tensor kl_tie(const Tensor& p_in, const Tensor& q_in, KlDirection direction, double eps) {
    check_tie_inputs("kl_tie", p_in, q_in);
    Tensor p = clamp(direction == KlDirection::pq ? p_in : q_in, eps, 1.0 - eps);
    Tensor q = clamp(direction == KlDirection::pq ? q_in : p_in, eps, 1.0 - eps);
    Tensor term = add(mul(p, log(div(p, q))), mul(one_minus(p), log(div(one_minus(p), one_minus(q)))));
    return mean(term);
}

Tensor cosine_sparsity(const Tensor& r) {
    if (r.ndim() != 2) throw DimensionError("cosine_sparsity: expected [n,d], got " + shape_str(r.shape()));
    Tensor norms = sqrt(add_scalar(sum(mul(r, r), 1, true), 1e-24));
    Tensor u = div(r, norms);
    return mean(matmul(u, transpose(u)));
}

LossBreakdown total_loss(const Tensor& ce_visual, const Tensor& ce_text, const Tensor& tie,
                         const std::vector<Tensor>& r_sets, const LossWeights& weights, Rng& rng,
                         double subsample_frac) {
    if (weights.lambda_tie < 0 || weights.lambda_reg < 0 || !std::isfinite(weights.lambda_tie) ||
        !std::isfinite(weights.lambda_reg))
        throw ContractError("total_loss: weights must be finite and >= 0");

    LossBreakdown out;
    out.weights = weights;

    Tensor total = add(ce_visual, ce_text);
    if (weights.lambda_tie > 0.0 && tie.defined()) total = add(total, scale(tie, weights.lambda_tie));

    Tensor sparsity;
    if (weights.lambda_reg > 0.0 && !r_sets.empty()) {
        const auto n = static_cast<int64_t>(r_sets.size());
        const auto k = std::max<int64_t>(
            1, static_cast<int64_t>(std::llround(subsample_frac * static_cast<double>(n))));
        std::vector<int64_t> idx(static_cast<size_t>(n));
        std::iota(idx.begin(), idx.end(), 0);
        for (int64_t i = 0; i < k; ++i) {
            const int64_t j = i + rng.randint(n - i);
            std::swap(idx[static_cast<size_t>(i)], idx[static_cast<size_t>(j)]);
        }
        for (int64_t i = 0; i < k; ++i) {
            Tensor s = cosine_sparsity(r_sets[static_cast<size_t>(idx[static_cast<size_t>(i)])]);
            sparsity = sparsity.defined() ? add(sparsity, s) : s;
        }
        sparsity = scale(sparsity, 1.0 / static_cast<double>(k));
        total = add(total, scale(sparsity, weights.lambda_reg));
    }

    out.ce_visual = ce_visual.item();
    out.ce_text = ce_text.item();
    out.tie = tie.defined() ? tie.item() : 0.0;
    out.sparsity = sparsity.defined() ? sparsity.item() : 0.0;
    out.total = total.item();
    out.total_tensor = total;
    if (!std::isfinite(out.total))
        throw NumericError("total_loss: non-finite objective (ce_v=" + std::to_string(out.ce_visual) +
                           ", ce_t=" + std::to_string(out.ce_text) + ", tie=" + std::to_string(out.tie) +
                           ", sparsity=" + std::to_string(out.sparsity) + ")");
    return out;
}

}  // namespace xcb
