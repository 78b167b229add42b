#include "demix/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <stdexcept>

#include "demix/image.hpp"
#include "demix/parallel.hpp"

namespace demix::ad {

namespace {

constexpr double kGeluCubic = 0.044715;
const double kSqrt2OverPi = std::sqrt(2.0 / 3.14159265358979323846);

void check(bool ok, const char* msg) {
    if (!ok) throw std::invalid_argument(msg);
}

bool same_shape(const Tensor& a, const Tensor& b) { return a.shape() == b.shape(); }

} // namespace

int64_t numel_of(const std::vector<int>& shape) {
    int64_t n = 1;
    for (int e : shape) {
        check(e >= 0, "negative extent");
        n *= e;
    }
    return n;
}

// ---- Tensor ----------------------------------------------------------------

Tensor Tensor::zeros(std::vector<int> shape, bool requires_grad) {
    auto d = std::make_shared<TensorData>();
    d->value.assign(static_cast<size_t>(numel_of(shape)), 0.0);
    d->shape = std::move(shape);
    d->requires_grad = requires_grad;
    return Tensor(std::move(d));
}

Tensor Tensor::full(std::vector<int> shape, double fill, bool requires_grad) {
    Tensor t = zeros(std::move(shape), requires_grad);
    std::fill(t.value().begin(), t.value().end(), fill);
    return t;
}

Tensor Tensor::from(std::vector<int> shape, std::vector<double> data, bool requires_grad) {
    check(numel_of(shape) == static_cast<int64_t>(data.size()), "from: shape/data mismatch");
    auto d = std::make_shared<TensorData>();
    d->shape = std::move(shape);
    d->value = std::move(data);
    d->requires_grad = requires_grad;
    return Tensor(std::move(d));
}

Tensor Tensor::scalar(double v, bool requires_grad) { return from({1}, {v}, requires_grad); }

double Tensor::item() const {
    if (numel() != 1) throw std::invalid_argument("item: tensor is not scalar");
    return d_->value[0];
}

std::vector<double>& Tensor::grad() {
    if (d_->grad.empty()) d_->grad.assign(d_->value.size(), 0.0);
    return d_->grad;
}

const std::vector<double>& Tensor::grad() const {
    if (d_->grad.empty()) throw std::logic_error("grad: no gradient present");
    return d_->grad;
}

void Tensor::accumulate_grad(const double* g, int64_t n) {
    auto& gr = grad();
    for (int64_t i = 0; i < n; ++i) gr[static_cast<size_t>(i)] += g[i];
}

void Tensor::clear_grad() {
    if (!d_->grad.empty()) std::fill(d_->grad.begin(), d_->grad.end(), 0.0);
}

void Tensor::release_grad() {
    std::vector<double>().swap(d_->grad);
}

// ---- Tape ------------------------------------------------------------------

void Tape::record(Tensor out, std::function<void()> back) {
    nodes_.push_back(Node{out.handle(), std::move(back)});
}

void Tape::backward(Tensor loss) {
    if (spent_) throw std::logic_error("backward: tape already consumed; call reset() first");
    if (loss.numel() != 1) throw std::invalid_argument("backward: loss must be scalar");
    spent_ = true;
    loss.grad()[0] += 1.0;
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
        if (it->out->grad.empty()) continue;
        for (double g : it->out->grad)
            if (!std::isfinite(g)) throw std::runtime_error("backward: non-finite gradient");
        it->back();
        // fully consumed now; free early so the peak of a training step
        // stays near one layer's footprint instead of the whole graph
        std::vector<double>().swap(it->out->grad);
    }
}

void Tape::reset() {
    nodes_.clear();
    spent_ = false;
}

// ---- helpers ---------------------------------------------------------------

namespace {

bool want_grad(std::initializer_list<const Tensor*> ins) {
    for (const Tensor* t : ins)
        if (t->requires_grad()) return true;
    return false;
}

Tensor make_out(std::vector<int> shape, bool requires_grad) {
    return Tensor::zeros(std::move(shape), requires_grad);
}

struct Dims4 {
    int b, c, h, w;
};

Dims4 dims4(const Tensor& x, const char* who) {
    check(x.rank() == 4, who);
    return {x.dim(0), x.dim(1), x.dim(2), x.dim(3)};
}

// Copy one [H,W] plane into an [H+2r, W+2r] buffer with the selected border.
void pad_plane(const double* src, int h, int w, int rh, int rw, Pad pad, double* dst) {
    const int hp = h + 2 * rh, wp = w + 2 * rw;
    for (int y = 0; y < hp; ++y) {
        const int sy = y - rh;
        double* row = dst + static_cast<size_t>(y) * wp;
        if (pad == Pad::zero && (sy < 0 || sy >= h)) {
            std::memset(row, 0, sizeof(double) * static_cast<size_t>(wp));
            continue;
        }
        const double* srow = src + static_cast<size_t>(mirror_index(sy, h)) * w;
        for (int x = 0; x < wp; ++x) {
            const int sx = x - rw;
            if (pad == Pad::zero && (sx < 0 || sx >= w))
                row[x] = 0.0;
            else
                row[x] = srow[mirror_index(sx, w)];
        }
    }
}

// Accumulate an [H+2r, W+2r] gradient buffer back onto the [H,W] source.
void fold_plane(const double* gpad, int h, int w, int rh, int rw, Pad pad, double* gdst) {
    const int hp = h + 2 * rh, wp = w + 2 * rw;
    for (int y = 0; y < hp; ++y) {
        const int sy = y - rh;
        if (pad == Pad::zero && (sy < 0 || sy >= h)) continue;
        const int my = mirror_index(sy, h);
        const double* row = gpad + static_cast<size_t>(y) * wp;
        double* drow = gdst + static_cast<size_t>(my) * w;
        for (int x = 0; x < wp; ++x) {
            const int sx = x - rw;
            if (pad == Pad::zero && (sx < 0 || sx >= w)) continue;
            drow[mirror_index(sx, w)] += row[x];
        }
    }
}

} // namespace

// ---- conv2d ----------------------------------------------------------------

Tensor conv2d(Tape& tape, const Tensor& x, const Tensor& k, Pad pad) {
    auto [B, C, H, W] = dims4(x, "conv2d: input must be [B,C,H,W]");
    check(k.rank() == 4, "conv2d: kernel must be [O,C,kH,kW]");
    const int O = k.dim(0), KC = k.dim(1), KH = k.dim(2), KW = k.dim(3);
    check(KC == C, "conv2d: channel mismatch");
    check(KH % 2 == 1 && KW % 2 == 1, "conv2d: kernel extents must be odd");
    check(KH <= 2 * H - 1 && KW <= 2 * W - 1, "conv2d: kernel larger than reflected support");
    const int rh = KH / 2, rw = KW / 2;
    const int HP = H + 2 * rh, WP = W + 2 * rw;

    Tensor out = make_out({B, O, H, W}, want_grad({&x, &k}));
    const size_t plane = static_cast<size_t>(H) * W;
    const size_t pplane = static_cast<size_t>(HP) * WP;

    // padded copy of the whole batch; rebuilt in backward rather than saved
    auto build_pad = [B, C, H, W, rh, rw, pad, plane, pplane](const std::vector<double>& src,
                                                              std::vector<double>& dst) {
        dst.resize(static_cast<size_t>(B) * C * pplane);
        parallel_for(0, static_cast<int64_t>(B) * C, [&](int64_t bc) {
            pad_plane(src.data() + static_cast<size_t>(bc) * plane, H, W, rh, rw, pad,
                      dst.data() + static_cast<size_t>(bc) * pplane);
        });
    };

    {
        std::vector<double> xpad;
        build_pad(x.value(), xpad);
        const double* kv = k.value().data();
        double* ov = out.value().data();
        parallel_for(0, static_cast<int64_t>(B) * O, [&](int64_t bo) {
            const int b = static_cast<int>(bo / O), o = static_cast<int>(bo % O);
            double* dst = ov + (static_cast<size_t>(b) * O + o) * plane;
            for (int c = 0; c < C; ++c) {
                const double* ppl = xpad.data() + (static_cast<size_t>(b) * C + c) * pplane;
                const double* kk = kv + ((static_cast<size_t>(o) * C + c) * KH) * KW;
                for (int dy = 0; dy < KH; ++dy) {
                    for (int dx = 0; dx < KW; ++dx) {
                        const double wgt = kk[dy * KW + dx];
                        if (wgt == 0.0) continue;
                        for (int y = 0; y < H; ++y) {
                            const double* srow = ppl + static_cast<size_t>(y + dy) * WP + dx;
                            double* drow = dst + static_cast<size_t>(y) * W;
                            for (int xx = 0; xx < W; ++xx) drow[xx] += wgt * srow[xx];
                        }
                    }
                }
            }
        });
    }

    if (out.requires_grad()) {
        Tensor xc = x, kc = k, oc = out;
        tape.record(out, [xc, kc, oc, B, C, H, W, O, KH, KW, rh, rw, HP, WP, pad, plane, pplane,
                          build_pad]() mutable {
            const auto& gy = oc.grad();
            if (xc.requires_grad()) {
                const double* kv = kc.value().data();
                std::vector<double> gpad(static_cast<size_t>(B) * C * pplane, 0.0);
                parallel_for(0, static_cast<int64_t>(B) * C, [&](int64_t bc) {
                    const int b = static_cast<int>(bc / C), c = static_cast<int>(bc % C);
                    double* gp = gpad.data() + static_cast<size_t>(bc) * pplane;
                    for (int o = 0; o < O; ++o) {
                        const double* grow0 = gy.data() + (static_cast<size_t>(b) * O + o) * plane;
                        const double* kk = kv + ((static_cast<size_t>(o) * C + c) * KH) * KW;
                        for (int dy = 0; dy < KH; ++dy)
                            for (int dx = 0; dx < KW; ++dx) {
                                const double wgt = kk[dy * KW + dx];
                                if (wgt == 0.0) continue;
                                for (int y = 0; y < H; ++y) {
                                    double* drow = gp + static_cast<size_t>(y + dy) * WP + dx;
                                    const double* grow = grow0 + static_cast<size_t>(y) * W;
                                    for (int xx = 0; xx < W; ++xx) drow[xx] += wgt * grow[xx];
                                }
                            }
                    }
                });
                std::vector<double> gx(xc.numel(), 0.0);
                parallel_for(0, static_cast<int64_t>(B) * C, [&](int64_t bc) {
                    fold_plane(gpad.data() + static_cast<size_t>(bc) * pplane, H, W, rh, rw, pad,
                               gx.data() + static_cast<size_t>(bc) * plane);
                });
                xc.accumulate_grad(gx.data(), xc.numel());
            }
            if (kc.requires_grad()) {
                std::vector<double> xpad;
                build_pad(xc.value(), xpad);
                // fixed-size groups over the batch keep the reduction order
                // independent of the thread count
                const int groups = std::min(B, 8);
                const size_t ksz = static_cast<size_t>(kc.numel());
                std::vector<double> partial(static_cast<size_t>(groups) * ksz, 0.0);
                parallel_for(0, groups, [&](int64_t g) {
                    double* acc = partial.data() + static_cast<size_t>(g) * ksz;
                    const int blo = static_cast<int>(g * B / groups);
                    const int bhi = static_cast<int>((g + 1) * B / groups);
                    for (int b = blo; b < bhi; ++b)
                        for (int o = 0; o < O; ++o) {
                            const double* grow0 =
                                gy.data() + (static_cast<size_t>(b) * O + o) * plane;
                            for (int c = 0; c < C; ++c) {
                                const double* ppl =
                                    xpad.data() + (static_cast<size_t>(b) * C + c) * pplane;
                                double* kk = acc + ((static_cast<size_t>(o) * C + c) * KH) * KW;
                                for (int dy = 0; dy < KH; ++dy)
                                    for (int dx = 0; dx < KW; ++dx) {
                                        double s = 0.0;
                                        for (int y = 0; y < H; ++y) {
                                            const double* srow =
                                                ppl + static_cast<size_t>(y + dy) * WP + dx;
                                            const double* grow =
                                                grow0 + static_cast<size_t>(y) * W;
                                            for (int xx = 0; xx < W; ++xx)
                                                s += srow[xx] * grow[xx];
                                        }
                                        kk[dy * KW + dx] += s;
                                    }
                            }
                        }
                });
                std::vector<double> gk(ksz, 0.0);
                for (int g = 0; g < groups; ++g) {
                    const double* acc = partial.data() + static_cast<size_t>(g) * ksz;
                    for (size_t i = 0; i < ksz; ++i) gk[i] += acc[i];
                }
                kc.accumulate_grad(gk.data(), static_cast<int64_t>(ksz));
            }
        });
    }
    return out;
}

// ---- dense -----------------------------------------------------------------

Tensor dense(Tape& tape, const Tensor& x, const Tensor& w, const Tensor& b) {
    check(x.rank() == 2 && w.rank() == 2 && b.rank() == 1, "dense: expects [B,F],[F,G],[G]");
    const int B = x.dim(0), F = x.dim(1), G = w.dim(1);
    check(w.dim(0) == F, "dense: inner dimensions do not match");
    check(b.dim(0) == G, "dense: bias size mismatch");

    Tensor out = make_out({B, G}, want_grad({&x, &w, &b}));
    const double* xv = x.value().data();
    const double* wv = w.value().data();
    const double* bv = b.value().data();
    double* ov = out.value().data();
    parallel_for(0, B, [&](int64_t t) {
        double* orow = ov + static_cast<size_t>(t) * G;
        for (int g = 0; g < G; ++g) orow[g] = bv[g];
        const double* xrow = xv + static_cast<size_t>(t) * F;
        for (int f = 0; f < F; ++f) {
            const double a = xrow[f];
            if (a == 0.0) continue;
            const double* wrow = wv + static_cast<size_t>(f) * G;
            for (int g = 0; g < G; ++g) orow[g] += a * wrow[g];
        }
    });

    if (out.requires_grad()) {
        Tensor xc = x, wc = w, bc = b, oc = out;
        tape.record(out, [xc, wc, bc, oc, B, F, G]() mutable {
            const auto& gy = oc.grad();
            if (xc.requires_grad()) {
                std::vector<double> gx(xc.numel(), 0.0);
                const double* wv = wc.value().data();
                parallel_for(0, B, [&](int64_t t) {
                    const double* grow = gy.data() + static_cast<size_t>(t) * G;
                    double* gxr = gx.data() + static_cast<size_t>(t) * F;
                    for (int f = 0; f < F; ++f) {
                        const double* wrow = wv + static_cast<size_t>(f) * G;
                        double s = 0.0;
                        for (int g = 0; g < G; ++g) s += wrow[g] * grow[g];
                        gxr[f] = s;
                    }
                });
                xc.accumulate_grad(gx.data(), xc.numel());
            }
            if (wc.requires_grad()) {
                std::vector<double> gw(wc.numel(), 0.0);
                const double* xv = xc.value().data();
                for (int t = 0; t < B; ++t) {
                    const double* xrow = xv + static_cast<size_t>(t) * F;
                    const double* grow = gy.data() + static_cast<size_t>(t) * G;
                    for (int f = 0; f < F; ++f) {
                        const double a = xrow[f];
                        if (a == 0.0) continue;
                        double* gwr = gw.data() + static_cast<size_t>(f) * G;
                        for (int g = 0; g < G; ++g) gwr[g] += a * grow[g];
                    }
                }
                wc.accumulate_grad(gw.data(), wc.numel());
            }
            if (bc.requires_grad()) {
                std::vector<double> gb(static_cast<size_t>(G), 0.0);
                for (int t = 0; t < B; ++t) {
                    const double* grow = gy.data() + static_cast<size_t>(t) * G;
                    for (int g = 0; g < G; ++g) gb[g] += grow[g];
                }
                bc.accumulate_grad(gb.data(), G);
            }
        });
    }
    return out;
}

// ---- activations -----------------------------------------------------------

Tensor relu(Tape& tape, const Tensor& x) {
    Tensor out = make_out(x.shape(), x.requires_grad());
    const auto& xv = x.value();
    auto& ov = out.value();
    if (tape.tracking_kinks()) {
        double m = std::numeric_limits<double>::infinity();
        for (double v : xv) m = std::min(m, std::abs(v));
        tape.note_kink(m);
    }
    for (size_t i = 0; i < xv.size(); ++i) ov[i] = xv[i] > 0.0 ? xv[i] : 0.0;
    if (out.requires_grad()) {
        Tensor xc = x, oc = out;
        tape.record(out, [xc, oc]() mutable {
            const auto& gy = oc.grad();
            auto& gx = xc.grad();
            const auto& xv = xc.value();
            for (size_t i = 0; i < xv.size(); ++i)
                if (xv[i] > 0.0) gx[i] += gy[i];
        });
    }
    return out;
}

Tensor gelu(Tape& tape, const Tensor& x) {
    Tensor out = make_out(x.shape(), x.requires_grad());
    const auto& xv = x.value();
    auto& ov = out.value();
    for (size_t i = 0; i < xv.size(); ++i) {
        const double v = xv[i];
        const double u = kSqrt2OverPi * (v + kGeluCubic * v * v * v);
        ov[i] = 0.5 * v * (1.0 + std::tanh(u));
    }
    if (out.requires_grad()) {
        Tensor xc = x, oc = out;
        tape.record(out, [xc, oc]() mutable {
            const auto& gy = oc.grad();
            auto& gx = xc.grad();
            const auto& xv = xc.value();
            for (size_t i = 0; i < xv.size(); ++i) {
                const double v = xv[i];
                const double u = kSqrt2OverPi * (v + kGeluCubic * v * v * v);
                const double t = std::tanh(u);
                const double du = kSqrt2OverPi * (1.0 + 3.0 * kGeluCubic * v * v);
                gx[i] += gy[i] * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du);
            }
        });
    }
    return out;
}

Tensor sigmoid(Tape& tape, const Tensor& x) {
    Tensor out = make_out(x.shape(), x.requires_grad());
    const auto& xv = x.value();
    auto& ov = out.value();
    for (size_t i = 0; i < xv.size(); ++i) ov[i] = 1.0 / (1.0 + std::exp(-xv[i]));
    if (out.requires_grad()) {
        Tensor xc = x, oc = out;
        tape.record(out, [xc, oc]() mutable {
            const auto& gy = oc.grad();
            auto& gx = xc.grad();
            const auto& yv = oc.value();
            for (size_t i = 0; i < yv.size(); ++i) gx[i] += gy[i] * yv[i] * (1.0 - yv[i]);
        });
    }
    return out;
}

// ---- elementwise -----------------------------------------------------------

namespace {

template <class Fwd, class Bwd>
Tensor binary_op(Tape& tape, const Tensor& a, const Tensor& b, Fwd fwd, Bwd bwd, const char* who) {
    check(a.shape() == b.shape(), who);
    Tensor out = make_out(a.shape(), want_grad({&a, &b}));
    const auto& av = a.value();
    const auto& bv = b.value();
    auto& ov = out.value();
    for (size_t i = 0; i < av.size(); ++i) ov[i] = fwd(av[i], bv[i]);
    if (out.requires_grad()) {
        Tensor ac = a, bc = b, oc = out;
        tape.record(out, [ac, bc, oc, bwd]() mutable {
            const auto& gy = oc.grad();
            const auto& av = ac.value();
            const auto& bv = bc.value();
            const bool wa = ac.requires_grad(), wb = bc.requires_grad();
            auto* ga = wa ? &ac.grad() : nullptr;
            auto* gb = wb ? &bc.grad() : nullptr;
            for (size_t i = 0; i < av.size(); ++i) {
                auto [da, db] = bwd(av[i], bv[i]);
                if (wa) (*ga)[i] += gy[i] * da;
                if (wb) (*gb)[i] += gy[i] * db;
            }
        });
    }
    return out;
}

} // namespace

Tensor add(Tape& tape, const Tensor& a, const Tensor& b) {
    return binary_op(
        tape, a, b, [](double x, double y) { return x + y; },
        [](double, double) { return std::pair<double, double>{1.0, 1.0}; }, "add: shape mismatch");
}

Tensor sub(Tape& tape, const Tensor& a, const Tensor& b) {
    return binary_op(
        tape, a, b, [](double x, double y) { return x - y; },
        [](double, double) { return std::pair<double, double>{1.0, -1.0}; }, "sub: shape mismatch");
}

Tensor mul(Tape& tape, const Tensor& a, const Tensor& b) {
    return binary_op(
        tape, a, b, [](double x, double y) { return x * y; },
        [](double x, double y) { return std::pair<double, double>{y, x}; }, "mul: shape mismatch");
}

Tensor div(Tape& tape, const Tensor& a, const Tensor& b) {
    return binary_op(
        tape, a, b, [](double x, double y) { return x / y; },
        [](double x, double y) {
            return std::pair<double, double>{1.0 / y, -x / (y * y)};
        },
        "div: shape mismatch");
}

Tensor scale(Tape& tape, const Tensor& x, double s) {
    Tensor out = make_out(x.shape(), x.requires_grad());
    const auto& xv = x.value();
    auto& ov = out.value();
    if (s == 1.0)
        ov = xv;
    else
        for (size_t i = 0; i < xv.size(); ++i) ov[i] = s * xv[i];
    if (out.requires_grad()) {
        Tensor xc = x, oc = out;
        tape.record(out, [xc, oc, s]() mutable {
            const auto& gy = oc.grad();
            auto& gx = xc.grad();
            for (size_t i = 0; i < gy.size(); ++i) gx[i] += s * gy[i];
        });
    }
    return out;
}

Tensor offset(Tape& tape, const Tensor& x, double c) {
    Tensor out = make_out(x.shape(), x.requires_grad());
    const auto& xv = x.value();
    auto& ov = out.value();
    for (size_t i = 0; i < xv.size(); ++i) ov[i] = xv[i] + c;
    if (out.requires_grad()) {
        Tensor xc = x, oc = out;
        tape.record(out, [xc, oc]() mutable {
            const auto& gy = oc.grad();
            xc.accumulate_grad(gy.data(), static_cast<int64_t>(gy.size()));
        });
    }
    return out;
}

Tensor pow_const(Tape& tape, const Tensor& x, double p) {
    Tensor out = make_out(x.shape(), x.requires_grad());
    const auto& xv = x.value();
    auto& ov = out.value();
    if (tape.tracking_kinks() && p != std::floor(p)) {
        double m = std::numeric_limits<double>::infinity();
        for (double v : xv) m = std::min(m, std::abs(v));
        tape.note_kink(m);
    }
    for (size_t i = 0; i < xv.size(); ++i) ov[i] = std::pow(xv[i], p);
    if (out.requires_grad()) {
        Tensor xc = x, oc = out;
        tape.record(out, [xc, oc, p]() mutable {
            const auto& gy = oc.grad();
            auto& gx = xc.grad();
            const auto& xv = xc.value();
            for (size_t i = 0; i < xv.size(); ++i) gx[i] += gy[i] * p * std::pow(xv[i], p - 1.0);
        });
    }
    return out;
}

// ---- reductions ------------------------------------------------------------

Tensor mean(Tape& tape, const Tensor& x) {
    const int64_t n = x.numel();
    check(n > 0, "mean: empty tensor");
    double s = 0.0;
    for (double v : x.value()) s += v;
    Tensor out = Tensor::scalar(s / static_cast<double>(n));
    out.set_requires_grad(x.requires_grad());
    if (out.requires_grad()) {
        Tensor xc = x, oc = out;
        tape.record(out, [xc, oc, n]() mutable {
            const double g = oc.grad()[0] / static_cast<double>(n);
            auto& gx = xc.grad();
            for (auto& v : gx) v += g;
        });
    }
    return out;
}

Tensor l1_norm(Tape& tape, const Tensor& x) {
    double s = 0.0;
    if (tape.tracking_kinks()) {
        double m = std::numeric_limits<double>::infinity();
        for (double v : x.value()) m = std::min(m, std::abs(v));
        tape.note_kink(m);
    }
    for (double v : x.value()) s += std::abs(v);
    Tensor out = Tensor::scalar(s);
    out.set_requires_grad(x.requires_grad());
    if (out.requires_grad()) {
        Tensor xc = x, oc = out;
        tape.record(out, [xc, oc]() mutable {
            const double g = oc.grad()[0];
            auto& gx = xc.grad();
            const auto& xv = xc.value();
            for (size_t i = 0; i < xv.size(); ++i)
                gx[i] += g * (xv[i] > 0.0 ? 1.0 : (xv[i] < 0.0 ? -1.0 : 0.0));
        });
    }
    return out;
}

Tensor mean_per_sample(Tape& tape, const Tensor& x) {
    check(x.rank() >= 2, "mean_per_sample: rank must be >= 2");
    const int B = x.dim(0);
    const int64_t inner = x.numel() / B;
    Tensor out = make_out({B}, x.requires_grad());
    const auto& xv = x.value();
    auto& ov = out.value();
    for (int b = 0; b < B; ++b) {
        double s = 0.0;
        const double* row = xv.data() + static_cast<size_t>(b) * inner;
        for (int64_t i = 0; i < inner; ++i) s += row[i];
        ov[b] = s / static_cast<double>(inner);
    }
    if (out.requires_grad()) {
        Tensor xc = x, oc = out;
        tape.record(out, [xc, oc, B, inner]() mutable {
            const auto& gy = oc.grad();
            auto& gx = xc.grad();
            for (int b = 0; b < B; ++b) {
                const double g = gy[b] / static_cast<double>(inner);
                double* row = gx.data() + static_cast<size_t>(b) * inner;
                for (int64_t i = 0; i < inner; ++i) row[i] += g;
            }
        });
    }
    return out;
}

// ---- shape ops -------------------------------------------------------------

Tensor concat_channels(Tape& tape, const Tensor& a, const Tensor& b) {
    auto [B, C1, H, W] = dims4(a, "concat_channels: [B,C,H,W] expected");
    auto db = dims4(b, "concat_channels: [B,C,H,W] expected");
    check(db.b == B && db.h == H && db.w == W, "concat_channels: shape mismatch");
    const int C2 = db.c;
    Tensor out = make_out({B, C1 + C2, H, W}, want_grad({&a, &b}));
    const size_t plane = static_cast<size_t>(H) * W;
    const auto& av = a.value();
    const auto& bv = b.value();
    auto& ov = out.value();
    for (int bb = 0; bb < B; ++bb) {
        std::memcpy(ov.data() + (static_cast<size_t>(bb) * (C1 + C2)) * plane,
                    av.data() + static_cast<size_t>(bb) * C1 * plane,
                    sizeof(double) * C1 * plane);
        std::memcpy(ov.data() + (static_cast<size_t>(bb) * (C1 + C2) + C1) * plane,
                    bv.data() + static_cast<size_t>(bb) * C2 * plane,
                    sizeof(double) * C2 * plane);
    }
    if (out.requires_grad()) {
        Tensor ac = a, bc = b, oc = out;
        tape.record(out, [ac, bc, oc, B, C1, C2, plane]() mutable {
            const auto& gy = oc.grad();
            for (int bb = 0; bb < B; ++bb) {
                const double* g1 = gy.data() + (static_cast<size_t>(bb) * (C1 + C2)) * plane;
                const double* g2 = g1 + static_cast<size_t>(C1) * plane;
                if (ac.requires_grad()) {
                    auto& ga = ac.grad();
                    double* dst = ga.data() + static_cast<size_t>(bb) * C1 * plane;
                    for (size_t i = 0; i < C1 * plane; ++i) dst[i] += g1[i];
                }
                if (bc.requires_grad()) {
                    auto& gb = bc.grad();
                    double* dst = gb.data() + static_cast<size_t>(bb) * C2 * plane;
                    for (size_t i = 0; i < C2 * plane; ++i) dst[i] += g2[i];
                }
            }
        });
    }
    return out;
}

Tensor upsample2x_nearest(Tape& tape, const Tensor& x) {
    auto [B, C, H, W] = dims4(x, "upsample2x_nearest: [B,C,H,W] expected");
    Tensor out = make_out({B, C, 2 * H, 2 * W}, x.requires_grad());
    const auto& xv = x.value();
    auto& ov = out.value();
    const size_t iplane = static_cast<size_t>(H) * W, oplane = iplane * 4;
    for (int64_t bc = 0; bc < static_cast<int64_t>(B) * C; ++bc) {
        const double* src = xv.data() + static_cast<size_t>(bc) * iplane;
        double* dst = ov.data() + static_cast<size_t>(bc) * oplane;
        for (int y = 0; y < H; ++y)
            for (int x2 = 0; x2 < W; ++x2) {
                const double v = src[static_cast<size_t>(y) * W + x2];
                double* d = dst + static_cast<size_t>(2 * y) * (2 * W) + 2 * x2;
                d[0] = v;
                d[1] = v;
                d[2 * W] = v;
                d[2 * W + 1] = v;
            }
    }
    if (out.requires_grad()) {
        Tensor xc = x, oc = out;
        tape.record(out, [xc, oc, B, C, H, W, iplane, oplane]() mutable {
            const auto& gy = oc.grad();
            auto& gx = xc.grad();
            for (int64_t bc = 0; bc < static_cast<int64_t>(B) * C; ++bc) {
                double* dst = gx.data() + static_cast<size_t>(bc) * iplane;
                const double* src = gy.data() + static_cast<size_t>(bc) * oplane;
                for (int y = 0; y < H; ++y)
                    for (int x2 = 0; x2 < W; ++x2) {
                        const double* s = src + static_cast<size_t>(2 * y) * (2 * W) + 2 * x2;
                        dst[static_cast<size_t>(y) * W + x2] +=
                            s[0] + s[1] + s[2 * W] + s[2 * W + 1];
                    }
            }
        });
    }
    return out;
}

Tensor downsample2x_avg(Tape& tape, const Tensor& x) {
    auto [B, C, H, W] = dims4(x, "downsample2x_avg: [B,C,H,W] expected");
    check(H % 2 == 0 && W % 2 == 0, "downsample2x_avg: H and W must be even");
    const int HO = H / 2, WO = W / 2;
    Tensor out = make_out({B, C, HO, WO}, x.requires_grad());
    const auto& xv = x.value();
    auto& ov = out.value();
    const size_t iplane = static_cast<size_t>(H) * W, oplane = static_cast<size_t>(HO) * WO;
    for (int64_t bc = 0; bc < static_cast<int64_t>(B) * C; ++bc) {
        const double* src = xv.data() + static_cast<size_t>(bc) * iplane;
        double* dst = ov.data() + static_cast<size_t>(bc) * oplane;
        for (int y = 0; y < HO; ++y)
            for (int x2 = 0; x2 < WO; ++x2) {
                const double* s = src + static_cast<size_t>(2 * y) * W + 2 * x2;
                dst[static_cast<size_t>(y) * WO + x2] =
                    0.25 * (s[0] + s[1] + s[W] + s[W + 1]);
            }
    }
    if (out.requires_grad()) {
        Tensor xc = x, oc = out;
        tape.record(out, [xc, oc, B, C, H, W, HO, WO, iplane, oplane]() mutable {
            const auto& gy = oc.grad();
            auto& gx = xc.grad();
            for (int64_t bc = 0; bc < static_cast<int64_t>(B) * C; ++bc) {
                double* dst = gx.data() + static_cast<size_t>(bc) * iplane;
                const double* src = gy.data() + static_cast<size_t>(bc) * oplane;
                for (int y = 0; y < HO; ++y)
                    for (int x2 = 0; x2 < WO; ++x2) {
                        const double g = 0.25 * src[static_cast<size_t>(y) * WO + x2];
                        double* d = dst + static_cast<size_t>(2 * y) * W + 2 * x2;
                        d[0] += g;
                        d[1] += g;
                        d[W] += g;
                        d[W + 1] += g;
                    }
            }
        });
    }
    return out;
}

Tensor add_channel_bias(Tape& tape, const Tensor& x, const Tensor& bias) {
    auto [B, C, H, W] = dims4(x, "add_channel_bias: [B,C,H,W] expected");
    const bool per_sample = bias.rank() == 2;
    if (per_sample)
        check(bias.dim(0) == B && bias.dim(1) == C, "add_channel_bias: bias must be [B,C]");
    else
        check(bias.rank() == 1 && bias.dim(0) == C, "add_channel_bias: bias must be [C] or [B,C]");

    Tensor out = make_out(x.shape(), want_grad({&x, &bias}));
    const size_t plane = static_cast<size_t>(H) * W;
    const auto& xv = x.value();
    const auto& bv = bias.value();
    auto& ov = out.value();
    for (int b = 0; b < B; ++b)
        for (int c = 0; c < C; ++c) {
            const double bb = per_sample ? bv[static_cast<size_t>(b) * C + c] : bv[c];
            const double* src = xv.data() + (static_cast<size_t>(b) * C + c) * plane;
            double* dst = ov.data() + (static_cast<size_t>(b) * C + c) * plane;
            for (size_t i = 0; i < plane; ++i) dst[i] = src[i] + bb;
        }
    if (out.requires_grad()) {
        Tensor xc = x, bcn = bias, oc = out;
        tape.record(out, [xc, bcn, oc, B, C, plane, per_sample]() mutable {
            const auto& gy = oc.grad();
            if (xc.requires_grad()) xc.accumulate_grad(gy.data(), xc.numel());
            if (bcn.requires_grad()) {
                auto& gb = bcn.grad();
                for (int b = 0; b < B; ++b)
                    for (int c = 0; c < C; ++c) {
                        const double* src = gy.data() + (static_cast<size_t>(b) * C + c) * plane;
                        double s = 0.0;
                        for (size_t i = 0; i < plane; ++i) s += src[i];
                        gb[per_sample ? static_cast<size_t>(b) * C + c : static_cast<size_t>(c)] += s;
                    }
            }
        });
    }
    return out;
}

Tensor scale_rows(Tape& tape, const Tensor& x, const std::vector<double>& s) {
    check(x.rank() >= 1 && x.dim(0) == static_cast<int>(s.size()), "scale_rows: size mismatch");
    const int B = x.dim(0);
    const int64_t inner = x.numel() / B;
    Tensor out = make_out(x.shape(), x.requires_grad());
    const auto& xv = x.value();
    auto& ov = out.value();
    for (int b = 0; b < B; ++b) {
        const double f = s[static_cast<size_t>(b)];
        const double* src = xv.data() + static_cast<size_t>(b) * inner;
        double* dst = ov.data() + static_cast<size_t>(b) * inner;
        if (f == 1.0)
            std::memcpy(dst, src, sizeof(double) * static_cast<size_t>(inner));
        else
            for (int64_t i = 0; i < inner; ++i) dst[i] = f * src[i];
    }
    if (out.requires_grad()) {
        Tensor xc = x, oc = out;
        std::vector<double> sc = s;
        tape.record(out, [xc, oc, sc, B, inner]() mutable {
            const auto& gy = oc.grad();
            auto& gx = xc.grad();
            for (int b = 0; b < B; ++b) {
                const double f = sc[static_cast<size_t>(b)];
                if (f == 0.0) continue;
                const double* src = gy.data() + static_cast<size_t>(b) * inner;
                double* dst = gx.data() + static_cast<size_t>(b) * inner;
                for (int64_t i = 0; i < inner; ++i) dst[i] += f * src[i];
            }
        });
    }
    return out;
}

Tensor gather_rows(Tape& tape, const Tensor& table, const std::vector<int>& rows) {
    check(table.rank() == 2, "gather_rows: table must be [T,E]");
    const int T = table.dim(0), E = table.dim(1);
    const int B = static_cast<int>(rows.size());
    for (int r : rows) check(r >= 0 && r < T, "gather_rows: row index out of range");
    Tensor out = make_out({B, E}, table.requires_grad());
    const auto& tv = table.value();
    auto& ov = out.value();
    for (int b = 0; b < B; ++b)
        std::memcpy(ov.data() + static_cast<size_t>(b) * E,
                    tv.data() + static_cast<size_t>(rows[static_cast<size_t>(b)]) * E,
                    sizeof(double) * static_cast<size_t>(E));
    if (out.requires_grad()) {
        Tensor tc = table, oc = out;
        std::vector<int> rc = rows;
        tape.record(out, [tc, oc, rc, E]() mutable {
            const auto& gy = oc.grad();
            auto& gt = tc.grad();
            for (size_t b = 0; b < rc.size(); ++b) {
                const double* src = gy.data() + b * static_cast<size_t>(E);
                double* dst = gt.data() + static_cast<size_t>(rc[b]) * E;
                for (int e = 0; e < E; ++e) dst[e] += src[e];
            }
        });
    }
    return out;
}

Tensor gather_pairs(Tape& tape, const Tensor& m, const std::vector<int>& ix,
                    const std::vector<int>& iy) {
    check(m.rank() == 2 && m.dim(0) == 2, "gather_pairs: expects [2,M]");
    check(ix.size() == iy.size(), "gather_pairs: index length mismatch");
    const int M = m.dim(1);
    const int B = static_cast<int>(ix.size());
    for (int i : ix) check(i >= 0 && i < M, "gather_pairs: x index out of range");
    for (int i : iy) check(i >= 0 && i < M, "gather_pairs: y index out of range");
    Tensor out = make_out({B, 2}, m.requires_grad());
    const auto& mv = m.value();
    auto& ov = out.value();
    for (int b = 0; b < B; ++b) {
        ov[static_cast<size_t>(b) * 2 + 0] = mv[static_cast<size_t>(ix[static_cast<size_t>(b)])];
        ov[static_cast<size_t>(b) * 2 + 1] =
            mv[static_cast<size_t>(M) + static_cast<size_t>(iy[static_cast<size_t>(b)])];
    }
    if (out.requires_grad()) {
        Tensor mc = m, oc = out;
        std::vector<int> xc = ix, yc = iy;
        tape.record(out, [mc, oc, xc, yc, M]() mutable {
            const auto& gy = oc.grad();
            auto& gm = mc.grad();
            for (size_t b = 0; b < xc.size(); ++b) {
                gm[static_cast<size_t>(xc[b])] += gy[b * 2 + 0];
                gm[static_cast<size_t>(M) + static_cast<size_t>(yc[b])] += gy[b * 2 + 1];
            }
        });
    }
    return out;
}

Tensor crop_border(Tape& tape, const Tensor& x, int margin) {
    auto [B, C, H, W] = dims4(x, "crop_border: [B,C,H,W] expected");
    check(margin >= 0 && 2 * margin < H && 2 * margin < W, "crop_border: margin too large");
    const int HO = H - 2 * margin, WO = W - 2 * margin;
    Tensor out = make_out({B, C, HO, WO}, x.requires_grad());
    const auto& xv = x.value();
    auto& ov = out.value();
    for (int64_t bc = 0; bc < static_cast<int64_t>(B) * C; ++bc)
        for (int y = 0; y < HO; ++y)
            std::memcpy(ov.data() + (static_cast<size_t>(bc) * HO + y) * WO,
                        xv.data() + (static_cast<size_t>(bc) * H + y + margin) * W + margin,
                        sizeof(double) * static_cast<size_t>(WO));
    if (out.requires_grad()) {
        Tensor xc = x, oc = out;
        tape.record(out, [xc, oc, B, C, H, W, HO, WO, margin]() mutable {
            const auto& gy = oc.grad();
            auto& gx = xc.grad();
            for (int64_t bc = 0; bc < static_cast<int64_t>(B) * C; ++bc)
                for (int y = 0; y < HO; ++y) {
                    const double* src = gy.data() + (static_cast<size_t>(bc) * HO + y) * WO;
                    double* dst =
                        gx.data() + (static_cast<size_t>(bc) * H + y + margin) * W + margin;
                    for (int x2 = 0; x2 < WO; ++x2) dst[x2] += src[x2];
                }
        });
    }
    return out;
}

Tensor crop_to(Tape& tape, const Tensor& x, int new_h, int new_w) {
    auto [B, C, H, W] = dims4(x, "crop_to: [B,C,H,W] expected");
    check(new_h >= 1 && new_h <= H && new_w >= 1 && new_w <= W, "crop_to: bad target size");
    if (new_h == H && new_w == W) return x;
    Tensor out = make_out({B, C, new_h, new_w}, x.requires_grad());
    const auto& xv = x.value();
    auto& ov = out.value();
    for (int64_t bc = 0; bc < static_cast<int64_t>(B) * C; ++bc)
        for (int y = 0; y < new_h; ++y)
            std::memcpy(ov.data() + (static_cast<size_t>(bc) * new_h + y) * new_w,
                        xv.data() + (static_cast<size_t>(bc) * H + y) * W,
                        sizeof(double) * static_cast<size_t>(new_w));
    if (out.requires_grad()) {
        Tensor xc = x, oc = out;
        tape.record(out, [xc, oc, B, C, H, W, new_h, new_w]() mutable {
            const auto& gy = oc.grad();
            auto& gx = xc.grad();
            for (int64_t bc = 0; bc < static_cast<int64_t>(B) * C; ++bc)
                for (int y = 0; y < new_h; ++y) {
                    const double* src = gy.data() + (static_cast<size_t>(bc) * new_h + y) * new_w;
                    double* dst = gx.data() + (static_cast<size_t>(bc) * H + y) * W;
                    for (int x2 = 0; x2 < new_w; ++x2) dst[x2] += src[x2];
                }
        });
    }
    return out;
}

Tensor pad_reflect_br(Tape& tape, const Tensor& x, int bottom, int right) {
    auto [B, C, H, W] = dims4(x, "pad_reflect_br: [B,C,H,W] expected");
    check(bottom >= 0 && right >= 0 && bottom < H && right < W, "pad_reflect_br: pad too large");
    if (bottom == 0 && right == 0) return x;
    const int HO = H + bottom, WO = W + right;
    Tensor out = make_out({B, C, HO, WO}, x.requires_grad());
    const auto& xv = x.value();
    auto& ov = out.value();
    for (int64_t bc = 0; bc < static_cast<int64_t>(B) * C; ++bc) {
        const double* src = xv.data() + static_cast<size_t>(bc) * H * W;
        double* dst = ov.data() + static_cast<size_t>(bc) * HO * WO;
        for (int y = 0; y < HO; ++y) {
            const double* srow = src + static_cast<size_t>(mirror_index(y, H)) * W;
            double* drow = dst + static_cast<size_t>(y) * WO;
            for (int x2 = 0; x2 < WO; ++x2) drow[x2] = srow[mirror_index(x2, W)];
        }
    }
    if (out.requires_grad()) {
        Tensor xc = x, oc = out;
        tape.record(out, [xc, oc, B, C, H, W, HO, WO]() mutable {
            const auto& gy = oc.grad();
            auto& gx = xc.grad();
            for (int64_t bc = 0; bc < static_cast<int64_t>(B) * C; ++bc) {
                const double* src = gy.data() + static_cast<size_t>(bc) * HO * WO;
                double* dst = gx.data() + static_cast<size_t>(bc) * H * W;
                for (int y = 0; y < HO; ++y) {
                    double* drow = dst + static_cast<size_t>(mirror_index(y, H)) * W;
                    const double* srow = src + static_cast<size_t>(y) * WO;
                    for (int x2 = 0; x2 < WO; ++x2) drow[mirror_index(x2, W)] += srow[x2];
                }
            }
        });
    }
    return out;
}

void sgd_step(std::vector<Tensor>& params, double lr) {
    for (auto& p : params)
        if (!p.has_grad()) throw std::logic_error("sgd_step: parameter has no gradient");
    for (auto& p : params) {
        auto& v = p.value();
        const auto& g = p.grad();
        for (size_t i = 0; i < v.size(); ++i) v[i] -= lr * g[i];
        p.release_grad();
    }
}

} // namespace demix::ad
