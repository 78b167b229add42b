#include "demix/model.hpp"

#include <atomic>
#include <cmath>
#include <cstdio>
#include <stdexcept>

namespace demix::model {

using ad::Tape;
using ad::Tensor;

FusionMask sample_mask(Rng& rng) {
    switch (rng.below(3)) {
        case 0: return FusionMask::both();
        case 1: return FusionMask::mul_only();
        default: return FusionMask::add_only();
    }
}

PsfGrid PsfGrid::make(const DemixConfig& cfg) {
    PsfGrid g;
    g.sx.resize(static_cast<size_t>(cfg.psf_m));
    g.sy.resize(static_cast<size_t>(cfg.psf_m));
    for (int i = 0; i < cfg.psf_m; ++i) {
        const double f = cfg.psf_m == 1 ? 0.0 : static_cast<double>(i) / (cfg.psf_m - 1);
        g.sx[static_cast<size_t>(i)] = cfg.sigma_x_min + f * (cfg.sigma_x_max - cfg.sigma_x_min);
        g.sy[static_cast<size_t>(i)] = cfg.sigma_y_min + f * (cfg.sigma_y_max - cfg.sigma_y_min);
    }
    return g;
}

namespace {

std::atomic<bool> g_warned_clamp{false};

int nearest_on(const std::vector<double>& grid, double v) {
    const int m = static_cast<int>(grid.size());
    if (v < grid.front() || v > grid.back()) {
        if (!g_warned_clamp.exchange(true))
            std::fprintf(stderr, "demix: sigma outside the PSF grid, clamping to nearest entry\n");
    }
    const double lo = grid.front(), hi = grid.back();
    if (m == 1 || hi == lo) return 0;
    const double f = (v - lo) / (hi - lo) * (m - 1);
    const int i = static_cast<int>(std::lround(f));
    return std::min(std::max(i, 0), m - 1);
}

} // namespace

int PsfGrid::nearest_x(double sigma_x) const { return nearest_on(sx, sigma_x); }
int PsfGrid::nearest_y(double sigma_y) const { return nearest_on(sy, sigma_y); }

// ---- parameters ------------------------------------------------------------

namespace {

Tensor he_normal(Rng& rng, std::vector<int> shape, int fan_in) {
    const double sd = std::sqrt(2.0 / std::max(fan_in, 1));
    Tensor t = Tensor::zeros(std::move(shape), true);
    for (auto& v : t.value()) v = sd * rng.normal();
    return t;
}

DemixParams::ConvLayer make_conv(Rng& rng, int in_c, int out_c, int k) {
    DemixParams::ConvLayer l;
    l.w = he_normal(rng, {out_c, in_c, k, k}, in_c * k * k);
    l.b = Tensor::zeros({out_c}, true);
    return l;
}

Tensor make_dense_w(Rng& rng, int in_f, int out_f) { return he_normal(rng, {in_f, out_f}, in_f); }

void push(ad::NamedTensors& out, const std::string& name, const Tensor& t) {
    if (t.defined()) out.emplace_back(name, t);
}

} // namespace

DemixParams init_params(const DemixConfig& cfg, uint64_t seed) {
    if (cfg.base_width < 1 || cfg.embed_n < 2 || cfg.embed_n % 2 != 0 || cfg.T < 2 || cfg.psf_m < 1)
        throw std::invalid_argument("init_params: bad configuration");
    Rng rng(derive_seed(seed, 0x696e6974));
    DemixParams p;
    p.cfg = cfg;
    const int w1 = cfg.base_width, w2 = 2 * cfg.base_width, wb = 4 * cfg.base_width;

    auto make_encoder = [&](DemixParams::Encoder& e) {
        e.levels.resize(2);
        e.levels[0].c1 = make_conv(rng, 1, w1, 3);
        e.levels[0].c2 = make_conv(rng, w1, w1, 3);
        e.levels[1].c1 = make_conv(rng, w1, w2, 3);
        e.levels[1].c2 = make_conv(rng, w2, w2, 3);
        for (int l = 0; l < 2; ++l) {
            const int c = l == 0 ? w1 : w2;
            e.levels[static_cast<size_t>(l)].psf_w = make_dense_w(rng, 2, c);
            e.levels[static_cast<size_t>(l)].psf_b = Tensor::zeros({c}, true);
        }
    };
    make_encoder(p.enc_mul);
    make_encoder(p.enc_add);

    if (cfg.use_gated_fusion) {
        // sites: skip level 1, skip level 2, bottleneck input
        const int site_c[3] = {w1, w2, w2};
        for (int s = 0; s < 3; ++s) {
            p.fusion_gate_w.push_back(
                he_normal(rng, {site_c[s], 2 * site_c[s], 1, 1}, 2 * site_c[s]));
            p.fusion_gate_b.push_back(Tensor::zeros({site_c[s]}, true));
        }
    }

    p.bottleneck1 = make_conv(rng, w2, wb, 3);
    p.bottleneck2 = make_conv(rng, wb, wb, 3);

    p.dec.resize(2); // index 0 = level 2 (coarse), 1 = level 1 (fine)
    p.dec[0].c1 = make_conv(rng, wb + w2, w2, 3);
    p.dec[0].c2 = make_conv(rng, w2, w2, 3);
    p.dec[1].c1 = make_conv(rng, w2 + w1, w1, 3);
    p.dec[1].c2 = make_conv(rng, w1, w1, 3);

    // the prediction head starts at zero so an untrained model emits a
    // constant field instead of amplified noise
    p.out_head.w = Tensor::zeros({1, w1, 3, 3}, true);
    p.out_head.b = Tensor::zeros({1}, true);

    if (cfg.use_noise_encoder) {
        const int n = cfg.embed_n, n4 = cfg.table_width();
        p.ne_in_w = make_dense_w(rng, n, n4);
        p.ne_in_b = Tensor::zeros({n4}, true);
        p.ne_hid_w = make_dense_w(rng, n4, n4);
        p.ne_hid_b = Tensor::zeros({n4}, true);
        p.ne_alpha_w = make_dense_w(rng, n4, n4);
        p.ne_alpha_b = Tensor::zeros({n4}, true);
        p.ne_beta_w = make_dense_w(rng, n4, n4);
        p.ne_beta_b = Tensor::zeros({n4}, true);
        p.ne_fuse_w = make_dense_w(rng, n4, n4);
        p.ne_fuse_b = Tensor::zeros({n4}, true);

        p.bottleneck_noise.w = make_dense_w(rng, n4, wb);
        p.bottleneck_noise.b = Tensor::zeros({wb}, true);
        p.dec[0].noise.w = make_dense_w(rng, n4, w2);
        p.dec[0].noise.b = Tensor::zeros({w2}, true);
        p.dec[1].noise.w = make_dense_w(rng, n4, w1);
        p.dec[1].noise.b = Tensor::zeros({w1}, true);
    }

    const int pd = 2 * cfg.psf_m;
    p.pe_in_w = make_dense_w(rng, pd, pd);
    p.pe_in_b = Tensor::zeros({pd}, true);
    p.pe_out_w = make_dense_w(rng, pd, cfg.psf_m);
    p.pe_out_b = Tensor::zeros({cfg.psf_m}, true);

    return p;
}

ad::NamedTensors DemixParams::named() const {
    ad::NamedTensors out;
    auto enc = [&](const char* tag, const Encoder& e) {
        for (size_t l = 0; l < e.levels.size(); ++l) {
            const auto& lv = e.levels[l];
            const std::string base = std::string(tag) + ".l" + std::to_string(l + 1);
            push(out, base + ".c1.w", lv.c1.w);
            push(out, base + ".c1.b", lv.c1.b);
            push(out, base + ".c2.w", lv.c2.w);
            push(out, base + ".c2.b", lv.c2.b);
            push(out, base + ".psf.w", lv.psf_w);
            push(out, base + ".psf.b", lv.psf_b);
        }
    };
    enc("enc_mul", enc_mul);
    enc("enc_add", enc_add);
    for (size_t s = 0; s < fusion_gate_w.size(); ++s) {
        push(out, "fusion.s" + std::to_string(s + 1) + ".w", fusion_gate_w[s]);
        push(out, "fusion.s" + std::to_string(s + 1) + ".b", fusion_gate_b[s]);
    }
    push(out, "bottleneck.c1.w", bottleneck1.w);
    push(out, "bottleneck.c1.b", bottleneck1.b);
    push(out, "bottleneck.c2.w", bottleneck2.w);
    push(out, "bottleneck.c2.b", bottleneck2.b);
    push(out, "bottleneck.noise.w", bottleneck_noise.w);
    push(out, "bottleneck.noise.b", bottleneck_noise.b);
    for (size_t l = 0; l < dec.size(); ++l) {
        const std::string base = "dec.l" + std::to_string(dec.size() - l);
        push(out, base + ".c1.w", dec[l].c1.w);
        push(out, base + ".c1.b", dec[l].c1.b);
        push(out, base + ".c2.w", dec[l].c2.w);
        push(out, base + ".c2.b", dec[l].c2.b);
        push(out, base + ".noise.w", dec[l].noise.w);
        push(out, base + ".noise.b", dec[l].noise.b);
    }
    push(out, "out_head.w", out_head.w);
    push(out, "out_head.b", out_head.b);
    push(out, "noise_embed.in.w", ne_in_w);
    push(out, "noise_embed.in.b", ne_in_b);
    push(out, "noise_embed.hid.w", ne_hid_w);
    push(out, "noise_embed.hid.b", ne_hid_b);
    push(out, "noise_embed.alpha.w", ne_alpha_w);
    push(out, "noise_embed.alpha.b", ne_alpha_b);
    push(out, "noise_embed.beta.w", ne_beta_w);
    push(out, "noise_embed.beta.b", ne_beta_b);
    push(out, "noise_embed.fuse.w", ne_fuse_w);
    push(out, "noise_embed.fuse.b", ne_fuse_b);
    push(out, "psf_embed.in.w", pe_in_w);
    push(out, "psf_embed.in.b", pe_in_b);
    push(out, "psf_embed.out.w", pe_out_w);
    push(out, "psf_embed.out.b", pe_out_b);
    return out;
}

std::vector<Tensor> DemixParams::trainable() const {
    std::vector<Tensor> out;
    for (auto& [name, t] : named()) out.push_back(t);
    return out;
}

int64_t DemixParams::param_count() const {
    int64_t n = 0;
    for (const auto& [name, t] : named()) n += t.numel();
    return n;
}

// ---- checkpoint ------------------------------------------------------------

void save_params(const std::string& path, const DemixParams& p) {
    ad::NamedTensors table;
    auto meta = [&](const char* name, double v) {
        table.emplace_back(std::string("meta.") + name, Tensor::scalar(v));
    };
    meta("base_width", p.cfg.base_width);
    meta("embed_n", p.cfg.embed_n);
    meta("T", p.cfg.T);
    meta("psf_m", p.cfg.psf_m);
    meta("sigma_x_min", p.cfg.sigma_x_min);
    meta("sigma_x_max", p.cfg.sigma_x_max);
    meta("sigma_y_min", p.cfg.sigma_y_min);
    meta("sigma_y_max", p.cfg.sigma_y_max);
    meta("use_noise_encoder", p.cfg.use_noise_encoder ? 1.0 : 0.0);
    meta("use_gated_fusion", p.cfg.use_gated_fusion ? 1.0 : 0.0);
    for (auto& kv : p.named()) table.push_back(kv);
    ad::save_checkpoint(path, table);
}

DemixParams load_params(const std::string& path) {
    const auto table = ad::load_checkpoint(path);
    auto find = [&](const std::string& name) -> const Tensor& {
        for (const auto& [n, t] : table)
            if (n == name) return t;
        throw std::runtime_error("load_params: missing entry " + name + " in " + path);
    };
    DemixConfig cfg;
    cfg.base_width = static_cast<int>(find("meta.base_width").item());
    cfg.embed_n = static_cast<int>(find("meta.embed_n").item());
    cfg.T = static_cast<int>(find("meta.T").item());
    cfg.psf_m = static_cast<int>(find("meta.psf_m").item());
    cfg.sigma_x_min = find("meta.sigma_x_min").item();
    cfg.sigma_x_max = find("meta.sigma_x_max").item();
    cfg.sigma_y_min = find("meta.sigma_y_min").item();
    cfg.sigma_y_max = find("meta.sigma_y_max").item();
    cfg.use_noise_encoder = find("meta.use_noise_encoder").item() != 0.0;
    cfg.use_gated_fusion = find("meta.use_gated_fusion").item() != 0.0;

    DemixParams p = init_params(cfg, 0);
    for (auto& [name, t] : p.named()) {
        const Tensor& src = find(name);
        if (src.shape() != t.shape())
            throw std::runtime_error("load_params: shape mismatch for " + name);
        t.value() = src.value();
    }
    return p;
}

// ---- embeddings ------------------------------------------------------------

namespace {

/// Sinusoidal features of a scalar value: half sines, half cosines over a
/// geometric frequency ladder from 1 to 1e4.
void sin_features(double v, int n, double* out) {
    const int half = n / 2;
    for (int i = 0; i < half; ++i) {
        const double freq =
            half == 1 ? 1.0 : std::pow(10000.0, static_cast<double>(i) / (half - 1));
        out[i] = std::sin(v * freq);
        out[half + i] = std::cos(v * freq);
    }
}

Tensor schedule_positional(const std::vector<double>& sched, int n) {
    const int T = static_cast<int>(sched.size());
    Tensor t = Tensor::zeros({T, n});
    for (int row = 0; row < T; ++row)
        sin_features(sched[static_cast<size_t>(row)], n, t.value().data() + static_cast<size_t>(row) * n);
    return t;
}

Tensor two_layer_gelu(Tape& tape, const Tensor& x, const Tensor& w1, const Tensor& b1,
                      const Tensor& w2, const Tensor& b2) {
    return ad::dense(tape, ad::gelu(tape, ad::dense(tape, x, w1, b1)), w2, b2);
}

} // namespace

Tensor noise_encoder(Tape& tape, const DemixParams& p, const degrade::NoiseSchedule& s) {
    if (!p.cfg.use_noise_encoder)
        throw std::logic_error("noise_encoder: disabled in this configuration");
    if (s.T != p.cfg.T) throw std::invalid_argument("noise_encoder: schedule length mismatch");
    std::vector<double> alphas(static_cast<size_t>(s.T)), betas(static_cast<size_t>(s.T));
    for (int t = 1; t <= s.T; ++t) {
        const auto ab = schedule_at(s, t);
        alphas[static_cast<size_t>(t - 1)] = ab.first;
        betas[static_cast<size_t>(t - 1)] = ab.second;
    }
    const Tensor a_pos = schedule_positional(alphas, p.cfg.embed_n);
    const Tensor b_pos = schedule_positional(betas, p.cfg.embed_n);
    const Tensor a_emb = two_layer_gelu(tape, a_pos, p.ne_in_w, p.ne_in_b, p.ne_hid_w, p.ne_hid_b);
    const Tensor b_emb = two_layer_gelu(tape, b_pos, p.ne_in_w, p.ne_in_b, p.ne_hid_w, p.ne_hid_b);
    const Tensor z_a = ad::relu(tape, ad::dense(tape, a_emb, p.ne_alpha_w, p.ne_alpha_b));
    const Tensor z_b = ad::relu(tape, ad::dense(tape, b_emb, p.ne_beta_w, p.ne_beta_b));
    return ad::relu(tape, ad::dense(tape, ad::add(tape, z_a, z_b), p.ne_fuse_w, p.ne_fuse_b));
}

Tensor psf_encoder(Tape& tape, const DemixParams& p, const PsfGrid& grid) {
    const int m = p.cfg.psf_m;
    if (static_cast<int>(grid.sx.size()) != m || static_cast<int>(grid.sy.size()) != m)
        throw std::invalid_argument("psf_encoder: grid size mismatch");
    // psi_pos in R^{2 x 2m}: per direction, sines of the m grid values then cosines
    Tensor pos = Tensor::zeros({2, 2 * m});
    for (int i = 0; i < m; ++i) {
        pos.value()[static_cast<size_t>(i)] = std::sin(grid.sx[static_cast<size_t>(i)]);
        pos.value()[static_cast<size_t>(m + i)] = std::cos(grid.sx[static_cast<size_t>(i)]);
        pos.value()[static_cast<size_t>(2 * m + i)] = std::sin(grid.sy[static_cast<size_t>(i)]);
        pos.value()[static_cast<size_t>(3 * m + i)] = std::cos(grid.sy[static_cast<size_t>(i)]);
    }
    return two_layer_gelu(tape, pos, p.pe_in_w, p.pe_in_b, p.pe_out_w, p.pe_out_b);
}

Tensor condition_site(Tape& tape, const Tensor& features, const Tensor& embed_rows,
                      const Tensor& proj_w, const Tensor& proj_b) {
    return ad::add_channel_bias(tape, features, ad::dense(tape, embed_rows, proj_w, proj_b));
}

// ---- fusion ----------------------------------------------------------------

namespace {

Tensor fuse_masked(Tape& tape, const Tensor& f1, const Tensor& f2, const std::vector<double>& m1,
                   const std::vector<double>& m2, const Tensor& gate_w, const Tensor& gate_b) {
    const Tensor cat = ad::concat_channels(tape, f1, f2);
    const Tensor g = ad::sigmoid(
        tape, ad::add_channel_bias(tape, ad::conv2d(tape, cat, gate_w, ad::Pad::zero), gate_b));
    // m2 f2 + g (m1 f1 - m2 f2)  ==  m1 g f1 + m2 (1-g) f2
    const Tensor a = ad::scale_rows(tape, f1, m1);
    const Tensor b = ad::scale_rows(tape, f2, m2);
    return ad::add(tape, b, ad::mul(tape, g, ad::sub(tape, a, b)));
}

} // namespace

Tensor gated_fusion(Tape& tape, const Tensor& f1, const Tensor& f2, const FusionMask& mask,
                    const Tensor& gate_w, const Tensor& gate_b) {
    if (f1.shape() != f2.shape()) throw std::invalid_argument("gated_fusion: shape mismatch");
    const int B = f1.dim(0);
    return fuse_masked(tape, f1, f2, std::vector<double>(static_cast<size_t>(B), mask.m1()),
                       std::vector<double>(static_cast<size_t>(B), mask.m2()), gate_w, gate_b);
}

// ---- forward ---------------------------------------------------------------

namespace {

Tensor conv_block_layer(Tape& tape, const Tensor& x, const DemixParams::ConvLayer& l) {
    return ad::add_channel_bias(tape, ad::conv2d(tape, x, l.w, ad::Pad::reflect), l.b);
}

struct EncoderOut {
    Tensor f1, f2;  // level outputs (skip features)
    Tensor bottom;  // downsampled level-2 output
};

EncoderOut run_encoder(Tape& tape, const Tensor& x, const DemixParams::Encoder& e,
                       const Tensor& psf_pick) {
    EncoderOut out;
    Tensor h = x;
    for (size_t l = 0; l < e.levels.size(); ++l) {
        const auto& lv = e.levels[l];
        h = conv_block_layer(tape, h, lv.c1);
        h = condition_site(tape, h, psf_pick, lv.psf_w, lv.psf_b);
        h = ad::relu(tape, h);
        h = ad::relu(tape, conv_block_layer(tape, h, lv.c2));
        (l == 0 ? out.f1 : out.f2) = h;
        h = ad::downsample2x_avg(tape, h);
    }
    out.bottom = h;
    return out;
}

} // namespace

Tensor demix_forward(Tape& tape, const Tensor& x, const std::vector<SampleCond>& cond,
                     const DemixParams& p) {
    if (x.rank() != 4 || x.dim(1) != 1)
        throw std::invalid_argument("demix_forward: input must be [B,1,H,W]");
    const int B = x.dim(0), H = x.dim(2), W = x.dim(3);
    if (static_cast<int>(cond.size()) != B)
        throw std::invalid_argument("demix_forward: conditioning size must match batch");

    const PsfGrid grid = PsfGrid::make(p.cfg);
    std::vector<int> ix(static_cast<size_t>(B)), iy(static_cast<size_t>(B));
    std::vector<int> rows(static_cast<size_t>(B));
    std::vector<double> m1(static_cast<size_t>(B)), m2(static_cast<size_t>(B));
    for (int b = 0; b < B; ++b) {
        const auto& c = cond[static_cast<size_t>(b)];
        if (c.t < 1 || c.t > p.cfg.T)
            throw std::invalid_argument("demix_forward: t outside 1..T");
        ix[static_cast<size_t>(b)] = grid.nearest_x(c.sigma_x);
        iy[static_cast<size_t>(b)] = grid.nearest_y(c.sigma_y);
        rows[static_cast<size_t>(b)] = c.t - 1;
        m1[static_cast<size_t>(b)] = c.mask.m1();
        m2[static_cast<size_t>(b)] = c.mask.m2();
    }

    // embeddings for this pass
    const Tensor psi = psf_encoder(tape, p, grid);
    const Tensor psf_pick = ad::gather_pairs(tape, psi, ix, iy);
    Tensor noise_rows;
    if (p.cfg.use_noise_encoder) {
        degrade::NoiseSchedule sched; // bounds live in the schedule defaults; T must match
        sched.T = p.cfg.T;
        noise_rows = ad::gather_rows(tape, noise_encoder(tape, p, sched), rows);
    }

    // make H and W divisible by the two pooling stages
    const int pad_b = (4 - H % 4) % 4, pad_r = (4 - W % 4) % 4;
    Tensor in = ad::pad_reflect_br(tape, x, pad_b, pad_r);

    const EncoderOut mul_out = run_encoder(tape, in, p.enc_mul, psf_pick);
    const EncoderOut add_out = run_encoder(tape, in, p.enc_add, psf_pick);

    auto fuse_site = [&](const Tensor& f1, const Tensor& f2, int site) {
        if (!p.cfg.use_gated_fusion)
            return ad::scale(tape, ad::add(tape, f1, f2), 0.5);
        return fuse_masked(tape, f1, f2, m1, m2, p.fusion_gate_w[static_cast<size_t>(site)],
                           p.fusion_gate_b[static_cast<size_t>(site)]);
    };
    const Tensor skip1 = fuse_site(mul_out.f1, add_out.f1, 0);
    const Tensor skip2 = fuse_site(mul_out.f2, add_out.f2, 1);
    const Tensor bottom = fuse_site(mul_out.bottom, add_out.bottom, 2);

    Tensor h = conv_block_layer(tape, bottom, p.bottleneck1);
    if (p.cfg.use_noise_encoder)
        h = condition_site(tape, h, noise_rows, p.bottleneck_noise.w, p.bottleneck_noise.b);
    h = ad::relu(tape, h);
    h = ad::relu(tape, conv_block_layer(tape, h, p.bottleneck2));

    const Tensor* skips[2] = {&skip2, &skip1};
    for (size_t l = 0; l < p.dec.size(); ++l) {
        const auto& dl = p.dec[l];
        h = ad::upsample2x_nearest(tape, h);
        h = ad::concat_channels(tape, h, *skips[l]);
        h = conv_block_layer(tape, h, dl.c1);
        if (p.cfg.use_noise_encoder)
            h = condition_site(tape, h, noise_rows, dl.noise.w, dl.noise.b);
        h = ad::relu(tape, h);
        h = ad::relu(tape, conv_block_layer(tape, h, dl.c2));
    }

    Tensor out = conv_block_layer(tape, h, p.out_head);
    return ad::crop_to(tape, out, H, W);
}

Image demix_apply(const DemixParams& p, const Image& noisy, int t, double sigma_x, double sigma_y) {
    Tape tape;
    Tensor x = Tensor::from({1, 1, noisy.h, noisy.w}, noisy.v);
    SampleCond c;
    c.t = t;
    c.sigma_x = sigma_x;
    c.sigma_y = sigma_y;
    c.mask = FusionMask::both();
    const Tensor y = demix_forward(tape, x, {c}, p);
    Image out(noisy.h, noisy.w);
    out.v = y.value();
    return out;
}

} // namespace demix::model
