#include "demix/process.hpp"

#include <cmath>
#include <stdexcept>

#include "demix/rng.hpp"

namespace demix::process {

PosteriorStats posterior(const Image& i_t, const Image& i_0, int t) {
    if (!i_t.same_shape(i_0)) throw std::invalid_argument("posterior: shape mismatch");
    if (t < 1) throw std::out_of_range("posterior: t must be >= 1");
    const double a = static_cast<double>(t - 1) * (t - 1);
    const double denom = a + 1.0;
    PosteriorStats st;
    st.var_scale = a / denom;
    st.mean = Image(i_t.h, i_t.w);
    for (size_t i = 0; i < i_t.v.size(); ++i) st.mean.v[i] = (a * i_t.v[i] + i_0.v[i]) / denom;
    return st;
}

BayesReport bayes_consistency_check(const Image& i_0, const degrade::NoiseSchedule& s,
                                    const psf::PsfKernel& kernel, int t, long n_draws,
                                    uint64_t seed) {
    if (t < 1 || t > s.T) throw std::out_of_range("bayes_consistency_check: t outside 1..T");
    BayesReport rep;
    rep.t = t;
    rep.draws = n_draws;
    const double a = static_cast<double>(t - 1) * (t - 1);
    rep.expected_slope = a / (a + 1.0);

    const Image k = degrade::k_field(i_0, kernel);
    const double d = s.delta(), g = s.gamma();
    if (d == 0.0 && g == 0.0) {
        // all draws collapse onto I_0; the regression is undefined but the
        // posterior mean is trivially exact
        rep.degenerate = true;
        return rep;
    }
    if (t == 1) return rep; // posterior is exactly I_0, nothing to regress

    const size_t n = i_0.v.size();
    std::vector<double> sum_prev(n, 0.0), sum_t(n, 0.0), sum_tt(n, 0.0), sum_pt(n, 0.0);
    Rng rng(derive_seed(seed, 0x62617965));
    for (long it = 0; it < n_draws; ++it) {
        for (size_t i = 0; i < n; ++i) {
            const double sd = std::sqrt(d * d * k.v[i] * k.v[i] + g * g);
            const double prev = i_0.v[i] + (t - 1) * sd * rng.normal(); // marginal at t-1
            const double cur = prev + sd * rng.normal();               // one chain increment
            sum_prev[i] += prev;
            sum_t[i] += cur;
            sum_tt[i] += cur * cur;
            sum_pt[i] += prev * cur;
        }
    }
    const double inv = 1.0 / static_cast<double>(n_draws);
    for (size_t i = 0; i < n; ++i) {
        const double mp = sum_prev[i] * inv, mt = sum_t[i] * inv;
        const double var_t = sum_tt[i] * inv - mt * mt;
        const double cov = sum_pt[i] * inv - mp * mt;
        if (var_t <= 0.0) continue;
        const double slope = cov / var_t;
        const double slope_err = std::abs(slope - rep.expected_slope) /
                                 std::max(std::abs(rep.expected_slope), 1e-12);
        rep.max_slope_rel_err = std::max(rep.max_slope_rel_err, slope_err);

        // empirical E[I_{t-1} | I_t = q] at a probe point one sd above the
        // mean, against the posterior mean formula at the same point
        const double q = mt + std::sqrt(var_t);
        const double predicted = mp + slope * (q - mt);
        const double analytic = (a * q + i_0.v[i]) / (a + 1.0);
        const double mean_err =
            std::abs(predicted - analytic) / std::max(std::abs(analytic), 1e-12);
        rep.max_mean_rel_err = std::max(rep.max_mean_rel_err, mean_err);
    }
    return rep;
}

Image restore_single_step(const Image& i_t, const model::DemixParams& params, int t,
                          double sigma_x, double sigma_y) {
    return model::demix_apply(params, i_t, t, sigma_x, sigma_y);
}

Image restore_iterative(const Image& i_t, const model::DemixParams& params, int t_start,
                        double sigma_x, double sigma_y) {
    if (t_start < 1) throw std::out_of_range("restore_iterative: t_start must be >= 1");
    Image x = i_t;
    for (int t = t_start; t >= 2; --t) {
        const Image pred = model::demix_apply(params, x, t, sigma_x, sigma_y);
        const double a = static_cast<double>(t - 1) * (t - 1);
        for (size_t i = 0; i < x.v.size(); ++i) x.v[i] = (a * x.v[i] + pred.v[i]) / (a + 1.0);
    }
    return model::demix_apply(params, x, 1, sigma_x, sigma_y);
}

} // namespace demix::process
