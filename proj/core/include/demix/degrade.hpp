#pragma once

#include <cstdint>
#include <utility>

#include "demix/image.hpp"
#include "demix/psf.hpp"

namespace demix::degrade {

/// Linear schedules for the speckle std alpha(t) and additive std beta(t),
/// t in 1..T. Increments delta and gamma are fixed by the endpoints.
struct NoiseSchedule {
    int T = 200;
    double alpha_min = 0.005;
    double alpha_max = 1.5;
    double beta_min = 0.005;
    double beta_max = 0.5;

    double delta() const { return (alpha_max - alpha_min) / (T - 1); }
    double gamma() const { return (beta_max - beta_min) / (T - 1); }
    void validate() const; // throws std::invalid_argument
};

/// (alpha_t, beta_t) at level t; throws std::out_of_range outside 1..T.
std::pair<double, double> schedule_at(const NoiseSchedule& s, int t);

struct DegradationSpec {
    NoiseSchedule schedule;
    psf::PsfSpec psf;
    int t = 1;
    uint64_t seed = 0;
};

/// Physical mixed-noise model: I_0 (1 + alpha_t e_m) conv p + beta_t e_a
/// with e_m, e_a iid unit normals from the seeded stream. Output unclipped.
Image degrade(const Image& image, const DegradationSpec& spec);

/// Same, with the noise stds given directly (used by the benchmark's
/// additive-only / multiplicative-only sweep).
Image degrade_with(const Image& image, const psf::PsfKernel& kernel, double alpha_t,
                   double beta_t, uint64_t seed);

/// Per-pixel standard deviation of (I_0 e_m) conv p for iid unit-Gaussian
/// e_m, under the same reflect border as the convolution. In the interior
/// this is sqrt(p^2 conv I_0^2); at borders mirrored taps can land on the
/// same source pixel, so their weights are summed before squaring (they are
/// perfectly correlated there, not independent).
Image k_field(const Image& image, const psf::PsfKernel& kernel,
              psf::PadMode pad = psf::PadMode::reflect);

/// Gaussian-approximation forward process: I_0 + t sqrt(delta^2 K^2 + gamma^2) e.
Image forward_sample(const Image& image, const NoiseSchedule& s, const psf::PsfKernel& kernel,
                     int t, uint64_t seed);

/// One chain increment: prev + sqrt(delta^2 K^2 + gamma^2) e, where K is the
/// K-field of the clean image the chain started from.
Image forward_step(const Image& prev, const Image& k, const NoiseSchedule& s, uint64_t seed);

struct AugmentChoice {
    int quarter_turns = 0; // 0..3
    double mu = 0.025;     // constant brightness shift
    double var = 0.0;      // Gaussian perturbation variance
};

/// Training augmentation: rotation by a random multiple of 90 degrees plus a
/// Gaussian brightness perturbation with mu in {0.025, 0.05} and variance in
/// {0, 0.001}, each chosen uniformly from the listed values.
Image augment(const Image& image, uint64_t seed);
Image augment_with(const Image& image, const AugmentChoice& choice, uint64_t noise_seed);
AugmentChoice sample_augment(uint64_t seed);

} // namespace demix::degrade
