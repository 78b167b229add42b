#pragma once

#include <string>
#include <vector>

#include "demix/image.hpp"

namespace demix::psf {

enum class Mode { literal_sine, envelope };
enum class PadMode { reflect, zero };

/// Point spread function of the scanner: lateral Gaussian of width sigma_x
/// crossed with an axial Gabor of width sigma_y at center frequency f0.
/// Widths are in samples; pitch (axial sample spacing, meters) fixes the
/// phase advance per sample, 2*pi*f0*pitch/c.
struct PsfSpec {
    double sigma_x = 2.0;
    double sigma_y = 1.5;
    double f0 = 10.0e6;   // Hz
    double c = 1540.0;    // m/s
    double pitch = 0.0;   // 0 -> quarter wavelength, c / (4 f0)
    int size = 3;
    Mode mode = Mode::envelope;

    double effective_pitch() const { return pitch > 0.0 ? pitch : c / (4.0 * f0); }
    double phase_per_sample() const;
    void validate() const; // throws std::invalid_argument
};

struct PsfKernel {
    int size = 0;
    std::vector<double> taps; // size*size, row index = axial j, col index = lateral i
    double norm = 0.0;        // sum of stored taps (1 in envelope mode)

    double at(int j, int i) const { return taps[static_cast<size_t>(j) * size + i]; }
};

/// p1(i) = exp(-i^2 / (2 sigma_x^2)), i in {-r..r}.
std::vector<double> lateral_profile(const PsfSpec& spec);

/// Gabor profile over j in {-r..r}: sin(phase*j) * gaussian in literal_sine
/// mode, cos(phase*j) * gaussian in envelope mode.
std::vector<double> axial_profile(const PsfSpec& spec);

/// Separable outer product of the two profiles; envelope mode normalizes to
/// unit sum. Throws std::domain_error when the taps are degenerate (all zero,
/// or a vanishing sum under envelope normalization).
PsfKernel build_psf(const PsfSpec& spec);

/// True convolution (kernel flipped), output the same shape as the input.
Image convolve(const Image& image, const PsfKernel& kernel, PadMode pad = PadMode::reflect);

std::string to_text(const PsfKernel& kernel); // plain-text matrix for inspection

} // namespace demix::psf
