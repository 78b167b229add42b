#pragma once

#include <cstdint>

#include "demix/degrade.hpp"
#include "demix/image.hpp"
#include "demix/model.hpp"

namespace demix::process {

/// Analytical reverse posterior q(I_{t-1} | I_t, I_0): mean and the scalar
/// multiplier of (delta^2 K^2 + gamma^2) in its variance.
struct PosteriorStats {
    Image mean;
    double var_scale = 0.0; // (t-1)^2 / ((t-1)^2 + 1)
};

/// mean = ((t-1)^2 I_t + I_0) / ((t-1)^2 + 1). Throws std::out_of_range for t < 1.
PosteriorStats posterior(const Image& i_t, const Image& i_0, int t);

struct BayesReport {
    int t = 0;
    long draws = 0;
    double expected_slope = 0.0;  // var_scale
    double max_slope_rel_err = 0.0;
    double max_mean_rel_err = 0.0; // predicted E[I_{t-1}|I_t] vs posterior mean at the draw mean
    bool degenerate = false;       // delta = gamma = 0: all draws identical
};

/// Monte-Carlo check that regressing I_{t-1} on I_t in the Gaussian chain
/// reproduces the posterior mean. Small images only; cost is draws * pixels.
BayesReport bayes_consistency_check(const Image& i_0, const degrade::NoiseSchedule& s,
                                    const psf::PsfKernel& kernel, int t, long n_draws,
                                    uint64_t seed);

/// One-shot restoration: the network's direct clean-image prediction.
Image restore_single_step(const Image& i_t, const model::DemixParams& params, int t,
                          double sigma_x, double sigma_y);

/// Deterministic reverse chain: x <- ((k-1)^2 x + net(x)) / ((k-1)^2 + 1)
/// for k = t_start..2, then a final direct prediction at k = 1.
Image restore_iterative(const Image& i_t, const model::DemixParams& params, int t_start,
                        double sigma_x, double sigma_y);

} // namespace demix::process
