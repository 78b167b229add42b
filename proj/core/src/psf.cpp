#include "demix/psf.hpp"

#include <cmath>
#include <cstdio>
#include <stdexcept>

namespace demix::psf {

namespace {
constexpr double kTwoPi = 6.283185307179586476925286766559;
}

double PsfSpec::phase_per_sample() const { return kTwoPi * f0 * effective_pitch() / c; }

void PsfSpec::validate() const {
    if (sigma_x <= 0.0 || sigma_y <= 0.0) throw std::invalid_argument("PsfSpec: widths must be positive");
    if (f0 <= 0.0 || c <= 0.0) throw std::invalid_argument("PsfSpec: f0 and c must be positive");
    if (pitch < 0.0) throw std::invalid_argument("PsfSpec: pitch must be non-negative");
    if (size < 3 || size % 2 == 0) throw std::invalid_argument("PsfSpec: size must be odd and >= 3");
}

std::vector<double> lateral_profile(const PsfSpec& spec) {
    spec.validate();
    const int r = (spec.size - 1) / 2;
    std::vector<double> p(static_cast<size_t>(spec.size));
    for (int i = -r; i <= r; ++i)
        p[static_cast<size_t>(i + r)] = std::exp(-(double(i) * i) / (2.0 * spec.sigma_x * spec.sigma_x));
    return p;
}

std::vector<double> axial_profile(const PsfSpec& spec) {
    spec.validate();
    const int r = (spec.size - 1) / 2;
    const double phase = spec.phase_per_sample();
    std::vector<double> p(static_cast<size_t>(spec.size));
    for (int j = -r; j <= r; ++j) {
        const double env = std::exp(-(double(j) * j) / (2.0 * spec.sigma_y * spec.sigma_y));
        const double carrier =
            spec.mode == Mode::literal_sine ? std::sin(phase * j) : std::cos(phase * j);
        p[static_cast<size_t>(j + r)] = carrier * env;
    }
    return p;
}

PsfKernel build_psf(const PsfSpec& spec) {
    const auto p1 = lateral_profile(spec);
    const auto p2 = axial_profile(spec);
    PsfKernel k;
    k.size = spec.size;
    k.taps.resize(static_cast<size_t>(spec.size) * spec.size);
    double sum = 0.0, abs_sum = 0.0;
    for (int j = 0; j < spec.size; ++j)
        for (int i = 0; i < spec.size; ++i) {
            const double t = p1[static_cast<size_t>(i)] * p2[static_cast<size_t>(j)];
            k.taps[static_cast<size_t>(j) * spec.size + i] = t;
            sum += t;
            abs_sum += std::abs(t);
        }
    if (abs_sum < 1e-300) throw std::domain_error("build_psf: degenerate kernel (all taps zero)");
    if (spec.mode == Mode::envelope) {
        if (std::abs(sum) < 1e-12 * abs_sum)
            throw std::domain_error("build_psf: degenerate kernel (vanishing sum, cannot normalize)");
        for (auto& t : k.taps) t /= sum;
        sum = 0.0;
        for (double t : k.taps) sum += t;
    }
    k.norm = sum;
    return k;
}

Image convolve(const Image& image, const PsfKernel& kernel, PadMode pad) {
    const int n = kernel.size;
    if (n < 1 || n % 2 == 0) throw std::invalid_argument("convolve: kernel size must be odd");
    if (n > 2 * image.h - 1 || n > 2 * image.w - 1)
        throw std::invalid_argument("convolve: kernel larger than image support");
    const int r = (n - 1) / 2;
    Image out(image.h, image.w);
    for (int y = 0; y < image.h; ++y)
        for (int x = 0; x < image.w; ++x) {
            double acc = 0.0;
            for (int j = -r; j <= r; ++j)
                for (int i = -r; i <= r; ++i) {
                    // true convolution: source offset is negated tap offset
                    const int sy = y - j, sx = x - i;
                    double v;
                    if (pad == PadMode::zero && (sy < 0 || sy >= image.h || sx < 0 || sx >= image.w))
                        v = 0.0;
                    else
                        v = image.at(mirror_index(sy, image.h), mirror_index(sx, image.w));
                    acc += v * kernel.at(j + r, i + r);
                }
            out.at(y, x) = acc;
        }
    return out;
}

std::string to_text(const PsfKernel& kernel) {
    std::string s;
    char buf[64];
    for (int j = 0; j < kernel.size; ++j) {
        for (int i = 0; i < kernel.size; ++i) {
            std::snprintf(buf, sizeof buf, "%.17g%c", kernel.at(j, i),
                          i + 1 == kernel.size ? '\n' : ' ');
            s += buf;
        }
    }
    return s;
}

} // namespace demix::psf
