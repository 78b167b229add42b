#include "demix/degrade.hpp"

#include <cmath>
#include <stdexcept>

#include "demix/rng.hpp"

namespace demix::degrade {

void NoiseSchedule::validate() const {
    if (T < 2) throw std::invalid_argument("NoiseSchedule: T must be >= 2");
    if (alpha_min < 0.0 || beta_min < 0.0 || alpha_max < alpha_min || beta_max < beta_min)
        throw std::invalid_argument("NoiseSchedule: bounds must satisfy 0 <= min <= max");
}

std::pair<double, double> schedule_at(const NoiseSchedule& s, int t) {
    s.validate();
    if (t < 1 || t > s.T) throw std::out_of_range("schedule_at: t outside 1..T");
    return {s.alpha_min + (t - 1) * s.delta(), s.beta_min + (t - 1) * s.gamma()};
}

Image degrade_with(const Image& image, const psf::PsfKernel& kernel, double alpha_t,
                   double beta_t, uint64_t seed) {
    Rng rng_m(derive_seed(seed, 0x6d756c74)); // multiplicative stream
    Rng rng_a(derive_seed(seed, 0x61646469)); // additive stream
    Image speckled(image.h, image.w);
    for (size_t i = 0; i < image.v.size(); ++i)
        speckled.v[i] = image.v[i] * (1.0 + alpha_t * rng_m.normal());
    Image out = psf::convolve(speckled, kernel, psf::PadMode::reflect);
    for (auto& v : out.v) v += beta_t * rng_a.normal();
    return out;
}

Image degrade(const Image& image, const DegradationSpec& spec) {
    const auto [alpha_t, beta_t] = schedule_at(spec.schedule, spec.t);
    const auto kernel = psf::build_psf(spec.psf);
    return degrade_with(image, kernel, alpha_t, beta_t, spec.seed);
}

Image k_field(const Image& image, const psf::PsfKernel& kernel, psf::PadMode pad) {
    const int n = kernel.size;
    const int r = (n - 1) / 2;
    Image out(image.h, image.w);

    // scratch: weight accumulated per distinct source pixel of one window
    std::vector<int> src_idx(static_cast<size_t>(n) * n);
    std::vector<double> src_w(static_cast<size_t>(n) * n);

    for (int y = 0; y < image.h; ++y)
        for (int x = 0; x < image.w; ++x) {
            int m = 0;
            for (int j = -r; j <= r; ++j)
                for (int i = -r; i <= r; ++i) {
                    const double w = kernel.at(j + r, i + r);
                    if (w == 0.0) continue;
                    const int sy = y - j, sx = x - i;
                    if (pad == psf::PadMode::zero &&
                        (sy < 0 || sy >= image.h || sx < 0 || sx >= image.w))
                        continue;
                    const int idx =
                        mirror_index(sy, image.h) * image.w + mirror_index(sx, image.w);
                    int k = 0;
                    while (k < m && src_idx[static_cast<size_t>(k)] != idx) ++k;
                    if (k == m) {
                        src_idx[static_cast<size_t>(m)] = idx;
                        src_w[static_cast<size_t>(m)] = w;
                        ++m;
                    } else {
                        src_w[static_cast<size_t>(k)] += w;
                    }
                }
            double var = 0.0;
            for (int k = 0; k < m; ++k) {
                const double v = image.v[static_cast<size_t>(src_idx[static_cast<size_t>(k)])];
                var += src_w[static_cast<size_t>(k)] * src_w[static_cast<size_t>(k)] * v * v;
            }
            out.at(y, x) = std::sqrt(var);
        }
    return out;
}

Image forward_sample(const Image& image, const NoiseSchedule& s, const psf::PsfKernel& kernel,
                     int t, uint64_t seed) {
    s.validate();
    if (t < 1 || t > s.T) throw std::out_of_range("forward_sample: t outside 1..T");
    const Image k = k_field(image, kernel);
    const double d = s.delta(), g = s.gamma();
    Rng rng(derive_seed(seed, 0x666f7277));
    Image out(image.h, image.w);
    for (size_t i = 0; i < image.v.size(); ++i) {
        const double std_t = t * std::sqrt(d * d * k.v[i] * k.v[i] + g * g);
        out.v[i] = image.v[i] + std_t * rng.normal();
    }
    return out;
}

Image forward_step(const Image& prev, const Image& k, const NoiseSchedule& s, uint64_t seed) {
    if (!prev.same_shape(k)) throw std::invalid_argument("forward_step: shape mismatch");
    const double d = s.delta(), g = s.gamma();
    Rng rng(derive_seed(seed, 0x73746570));
    Image out(prev.h, prev.w);
    for (size_t i = 0; i < prev.v.size(); ++i)
        out.v[i] = prev.v[i] + std::sqrt(d * d * k.v[i] * k.v[i] + g * g) * rng.normal();
    return out;
}

AugmentChoice sample_augment(uint64_t seed) {
    Rng rng(derive_seed(seed, 0x61756721));
    AugmentChoice c;
    c.quarter_turns = static_cast<int>(rng.below(4));
    c.mu = rng.below(2) == 0 ? 0.025 : 0.05;
    c.var = rng.below(2) == 0 ? 0.0 : 0.001;
    return c;
}

Image augment_with(const Image& image, const AugmentChoice& choice, uint64_t noise_seed) {
    Image out = rotate90(image, choice.quarter_turns);
    Rng rng(derive_seed(noise_seed, 0x61756732));
    const double sd = std::sqrt(choice.var);
    for (auto& v : out.v) v += choice.mu + (sd > 0.0 ? sd * rng.normal() : 0.0);
    return out;
}

Image augment(const Image& image, uint64_t seed) {
    return augment_with(image, sample_augment(seed), derive_seed(seed, 1));
}

} // namespace demix::degrade
