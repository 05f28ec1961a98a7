#pragma once

// Independent reference implementations used only by tests. These are kept
// deliberately naive and separate from the library code paths they verify.

#include <algorithm>
#include <cmath>
#include <vector>

namespace oracles {

// Reference 1.5-entmax via bisection on psi(tau) = sum_i [z_i/2 - tau]_+^2 - 1.
// psi is continuous and strictly decreasing on the bracket, with
// psi(max(s) - 1) >= 0 and psi(max(s)) = -1.
inline std::vector<double> entmax15_bisection(const std::vector<double>& z) {
    std::vector<double> s(z.size());
    for (size_t i = 0; i < z.size(); ++i) s[i] = 0.5 * z[i];
    const double smax = *std::max_element(s.begin(), s.end());
    double lo = smax - 1.0, hi = smax;
    auto psi = [&](double tau) {
        double acc = 0.0;
        for (double v : s) {
            const double d = v - tau;
            if (d > 0.0) acc += d * d;
        }
        return acc - 1.0;
    };
    for (int it = 0; it < 200; ++it) {
        const double mid = 0.5 * (lo + hi);
        if (psi(mid) >= 0.0) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    const double tau = 0.5 * (lo + hi);
    std::vector<double> p(z.size());
    for (size_t i = 0; i < z.size(); ++i) {
        const double d = s[i] - tau;
        p[i] = d > 0.0 ? d * d : 0.0;
    }
    return p;
}

inline double bernoulli_kl(double p, double q) {
    return p * std::log(p / q) + (1.0 - p) * std::log((1.0 - p) / (1.0 - q));
}

// Tying divergence restated through Bernoulli KLs: mean over factors of
// KL(c||m) + KL(f||m) with m the midpoint, after clamping.
inline double js_tie_reference(const std::vector<double>& c, const std::vector<double>& f,
                               double eps = 1e-6) {
    double acc = 0.0;
    for (size_t i = 0; i < c.size(); ++i) {
        const double ci = std::min(std::max(c[i], eps), 1.0 - eps);
        const double fi = std::min(std::max(f[i], eps), 1.0 - eps);
        const double m = 0.5 * (ci + fi);
        acc += bernoulli_kl(ci, m) + bernoulli_kl(fi, m);
    }
    return acc / static_cast<double>(c.size());
}

}  // namespace oracles
