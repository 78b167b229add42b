#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <vector>

namespace demix {

/// Dense row-major grayscale image, f64 intensities (nominally in [0,1],
/// but degraded images are kept unclipped until export).
struct Image {
    int h = 0;
    int w = 0;
    std::vector<double> v;

    Image() = default;
    Image(int h_, int w_, double fill = 0.0) : h(h_), w(w_), v(static_cast<size_t>(h_) * w_, fill) {
        if (h_ < 0 || w_ < 0) throw std::invalid_argument("Image: negative extent");
    }

    double& at(int y, int x) { return v[static_cast<size_t>(y) * w + x]; }
    double at(int y, int x) const { return v[static_cast<size_t>(y) * w + x]; }
    size_t size() const { return v.size(); }

    bool same_shape(const Image& o) const { return h == o.h && w == o.w; }
};

inline Image clip01(const Image& im) {
    Image out(im.h, im.w);
    for (size_t i = 0; i < im.v.size(); ++i) out.v[i] = std::clamp(im.v[i], 0.0, 1.0);
    return out;
}

inline double image_mean(const Image& im) {
    double s = 0.0;
    for (double x : im.v) s += x;
    return im.v.empty() ? 0.0 : s / static_cast<double>(im.v.size());
}

inline double mse(const Image& a, const Image& b) {
    if (!a.same_shape(b)) throw std::invalid_argument("mse: shape mismatch");
    double s = 0.0;
    for (size_t i = 0; i < a.v.size(); ++i) {
        const double d = a.v[i] - b.v[i];
        s += d * d;
    }
    return s / static_cast<double>(a.v.size());
}

/// Mirror an index into [0, n) by symmetric reflection about the border
/// (edge sample included: -1 -> 0, n -> n-1).
inline int mirror_index(int i, int n) {
    if (n == 1) return 0;
    while (i < 0 || i >= n) {
        if (i < 0) i = -1 - i;
        if (i >= n) i = 2 * n - 1 - i;
    }
    return i;
}

/// Rotate by a multiple of 90 degrees counterclockwise (k in {0,1,2,3}).
inline Image rotate90(const Image& im, int k) {
    k = ((k % 4) + 4) % 4;
    if (k == 0) return im;
    Image out;
    if (k == 2) {
        out = Image(im.h, im.w);
        for (int y = 0; y < im.h; ++y)
            for (int x = 0; x < im.w; ++x) out.at(y, x) = im.at(im.h - 1 - y, im.w - 1 - x);
    } else {
        out = Image(im.w, im.h);
        for (int y = 0; y < im.h; ++y)
            for (int x = 0; x < im.w; ++x) {
                if (k == 1)
                    out.at(im.w - 1 - x, y) = im.at(y, x);
                else
                    out.at(x, im.h - 1 - y) = im.at(y, x);
            }
    }
    return out;
}

} // namespace demix
