#pragma once

#include <vector>

#include "core/tensor.hpp"

namespace xcb {

// -log softmax(logits)[label]; logits 1-D.
Tensor cross_entropy(const Tensor& logits, int64_t label);
// Mean cross-entropy over a [N,C] batch.
Tensor cross_entropy_batch(const Tensor& logits, const std::vector<int64_t>& labels);

// Mean binary cross-entropy of sigmoid(logits) against 0/1 targets.
Tensor bce_with_logits(const Tensor& logits, const Tensor& targets);

// Tying divergence between factored Bernoulli parameters, the mean over
// factors of the four log-ratio terms against the midpoint m = (c+f)/2
// (equivalently KL(c||m) + KL(f||m) per factor). Inputs clamped to
// [eps, 1-eps] before every log.
Tensor js_tie(const Tensor& c_prob, const Tensor& f_prob, double eps = 1e-6);

enum class KlDirection { pq, qp };
// Mean Bernoulli KL between p and q in the requested direction.
Tensor kl_tie(const Tensor& p, const Tensor& q, KlDirection direction, double eps = 1e-6);

// Mean of the full pairwise cosine matrix (diagonal included) over row
// vectors of r [n,d]; zero rows behave as cosine 0 against everything.
Tensor cosine_sparsity(const Tensor& r);

enum class TieKind { js, kl_fc, kl_cf, none };

struct LossWeights {
    double lambda_tie = 1.0;
    double lambda_reg = 0.1;
};

struct LossBreakdown {
    double ce_visual = 0.0;
    double ce_text = 0.0;
    double tie = 0.0;
    double sparsity = 0.0;
    double total = 0.0;
    LossWeights weights;
    Tensor total_tensor;  // differentiable combined objective
};

// Combines the four terms; `r_sets` holds one [q,d] embedding set per batch
// example, of which a `subsample_frac` random subset (at least one when any
// exist and the weight is nonzero) enters the sparsity term.
LossBreakdown total_loss(const Tensor& ce_visual, const Tensor& ce_text, const Tensor& tie,
                         const std::vector<Tensor>& r_sets, const LossWeights& weights, Rng& rng,
                         double subsample_frac = 0.05);

}  // namespace xcb
