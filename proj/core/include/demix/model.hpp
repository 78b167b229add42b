#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "demix/autodiff.hpp"
#include "demix/checkpoint.hpp"
#include "demix/degrade.hpp"
#include "demix/image.hpp"
#include "demix/rng.hpp"

namespace demix::model {

/// Architecture knobs. Defaults are the desk-scale configuration: base width
/// 16, two encoder/decoder levels, 64-wide noise embedding input, 50-entry
/// PSF grid. Tests shrink these for finite-difference checks.
struct DemixConfig {
    int base_width = 16;   // channels at the first level; doubles per level
    int embed_n = 64;      // sinusoidal width n (patch side); table width is 4n
    int T = 200;           // noise levels
    int psf_m = 50;        // grid entries per direction
    double sigma_x_min = 1.0, sigma_x_max = 4.0;
    double sigma_y_min = 0.5, sigma_y_max = 3.5;
    // schedule bounds the noise encoder embeds; kept here so a checkpoint
    // fully determines the conditioning tables
    double alpha_min = 0.005, alpha_max = 1.5;
    double beta_min = 0.005, beta_max = 0.5;
    bool use_noise_encoder = true;
    bool use_gated_fusion = true; // off -> fusion sites average the two encoders

    int table_width() const { return 4 * embed_n; }
    degrade::NoiseSchedule schedule() const {
        return degrade::NoiseSchedule{T, alpha_min, alpha_max, beta_min, beta_max};
    }
};

/// Mask over the (multiplicative, additive) encoder pair. (0,0) is not
/// constructible: at least one encoder stays active.
class FusionMask {
public:
    static FusionMask both() { return FusionMask(1, 1); }
    static FusionMask mul_only() { return FusionMask(1, 0); }
    static FusionMask add_only() { return FusionMask(0, 1); }

    double m1() const { return m1_; }
    double m2() const { return m2_; }
    bool operator==(const FusionMask& o) const { return m1_ == o.m1_ && m2_ == o.m2_; }

private:
    FusionMask(double a, double b) : m1_(a), m2_(b) {}
    double m1_, m2_;
};

/// Uniform over {(1,1),(1,0),(0,1)} during training; inference uses both().
FusionMask sample_mask(Rng& rng);

/// The sigma grids the PSF encoder embeds: row 0 interpolates sigma_x over
/// [min,max], row 1 sigma_y. Nearest entry lookup conditions the encoders.
struct PsfGrid {
    std::vector<double> sx; // m ascending values
    std::vector<double> sy;

    static PsfGrid make(const DemixConfig& cfg);
    int nearest_x(double sigma_x) const;
    int nearest_y(double sigma_y) const;
};

/// All trainable weights plus the frozen positional tables.
struct DemixParams {
    DemixConfig cfg;

    struct ConvLayer {
        ad::Tensor w, b;
    };
    struct EncoderLevel {
        ConvLayer c1, c2;
        ad::Tensor psf_w, psf_b; // projects the 2-entry PSF pick to a channel bias
    };
    struct Encoder {
        std::vector<EncoderLevel> levels;
    };
    struct CondProj {
        ad::Tensor w, b; // projects the noise row to a channel bias
    };
    struct DecoderLevel {
        ConvLayer c1, c2;
        CondProj noise;
    };

    Encoder enc_mul, enc_add;
    std::vector<ad::Tensor> fusion_gate_w, fusion_gate_b; // per site: skips then bottleneck
    ConvLayer bottleneck1, bottleneck2;
    CondProj bottleneck_noise;
    std::vector<DecoderLevel> dec;
    ConvLayer out_head;

    // noise encoder MLP stack
    ad::Tensor ne_in_w, ne_in_b;       // n -> 4n
    ad::Tensor ne_hid_w, ne_hid_b;     // 4n -> 4n (second GELU layer)
    ad::Tensor ne_alpha_w, ne_alpha_b; // parallel ReLU projections
    ad::Tensor ne_beta_w, ne_beta_b;
    ad::Tensor ne_fuse_w, ne_fuse_b;

    // psf encoder MLP (shared across the two directions)
    ad::Tensor pe_in_w, pe_in_b;   // 2m -> 2m
    ad::Tensor pe_out_w, pe_out_b; // 2m -> m

    /// Named view of every trainable tensor, stable order.
    ad::NamedTensors named() const;
    std::vector<ad::Tensor> trainable() const;
    int64_t param_count() const;
};

DemixParams init_params(const DemixConfig& cfg, uint64_t seed);

/// Checkpoint round-trip; architecture fields ride along as meta entries in
/// the same named-tensor table.
void save_params(const std::string& path, const DemixParams& p);
DemixParams load_params(const std::string& path);

/// T x 4n table fusing both schedules (row t-1 conditions level-t samples).
ad::Tensor noise_encoder(ad::Tape& tape, const DemixParams& p,
                         const degrade::NoiseSchedule& s);

/// 2 x m embedding of the sigma grids.
ad::Tensor psf_encoder(ad::Tape& tape, const DemixParams& p, const PsfGrid& grid);

/// Adds a projected embedding row as a per-channel bias.
ad::Tensor condition_site(ad::Tape& tape, const ad::Tensor& features, const ad::Tensor& embed_rows,
                          const ad::Tensor& proj_w, const ad::Tensor& proj_b);

/// f = m1 g f1 + m2 (1-g) f2 with g = sigmoid(conv1x1([f1,f2])).
/// Computed as m2 f2 + g (m1 f1 - m2 f2), which is the same function but
/// returns f1 bit-exactly when f1 == f2 under mask (1,1).
ad::Tensor gated_fusion(ad::Tape& tape, const ad::Tensor& f1, const ad::Tensor& f2,
                        const FusionMask& mask, const ad::Tensor& gate_w,
                        const ad::Tensor& gate_b);

/// Per-sample degradation descriptor for one forward pass.
struct SampleCond {
    int t = 1;
    double sigma_x = 2.0;
    double sigma_y = 1.5;
    FusionMask mask = FusionMask::both();
};

/// Full dual-encoder forward pass. x is [B,1,H,W]; any H,W is accepted
/// (reflect-padded internally to a multiple of 4 and cropped back).
/// cond.size() must equal B.
ad::Tensor demix_forward(ad::Tape& tape, const ad::Tensor& x, const std::vector<SampleCond>& cond,
                         const DemixParams& p);

/// Single-image convenience wrapper used by the restoration path.
Image demix_apply(const DemixParams& p, const Image& noisy, int t, double sigma_x, double sigma_y);

} // namespace demix::model
