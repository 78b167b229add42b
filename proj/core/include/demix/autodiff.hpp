#pragma once

#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <string>
#include <vector>

namespace demix::ad {

enum class Pad { zero, reflect };

struct TensorData {
    std::vector<int> shape;
    std::vector<double> value;
    std::vector<double> grad; // empty until a backward pass touches it
    bool requires_grad = false;
};

int64_t numel_of(const std::vector<int>& shape);

/// Shared handle to an n-d f64 buffer. Copies are shallow; the tape keeps
/// whatever it needs alive through these handles.
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(std::vector<int> shape, bool requires_grad = false);
    static Tensor full(std::vector<int> shape, double fill, bool requires_grad = false);
    static Tensor from(std::vector<int> shape, std::vector<double> data, bool requires_grad = false);
    static Tensor scalar(double v, bool requires_grad = false);

    bool defined() const { return d_ != nullptr; }
    const std::vector<int>& shape() const { return d_->shape; }
    int64_t numel() const { return static_cast<int64_t>(d_->value.size()); }
    int dim(int i) const { return d_->shape[static_cast<size_t>(i)]; }
    int rank() const { return static_cast<int>(d_->shape.size()); }

    std::vector<double>& value() { return d_->value; }
    const std::vector<double>& value() const { return d_->value; }
    double item() const; // requires numel == 1

    bool requires_grad() const { return d_->requires_grad; }
    void set_requires_grad(bool v) { d_->requires_grad = v; }

    bool has_grad() const { return !d_->grad.empty(); }
    std::vector<double>& grad();             // allocates zeros on first use
    const std::vector<double>& grad() const; // throws if absent
    void accumulate_grad(const double* g, int64_t n);
    void clear_grad();
    void release_grad(); // frees the buffer entirely

    TensorData* data() { return d_.get(); }
    const TensorData* data() const { return d_.get(); }
    std::shared_ptr<TensorData> handle() const { return d_; }

private:
    explicit Tensor(std::shared_ptr<TensorData> d) : d_(std::move(d)) {}
    std::shared_ptr<TensorData> d_;
};

/// Recording tape. Ops append one node each; nodes are appended after their
/// parents, so a single reverse sweep visits every node exactly once with
/// all downstream gradient already accumulated.
class Tape {
public:
    /// loss must be scalar. Populates grads of everything reachable,
    /// validates finiteness, and marks the tape spent until reset().
    void backward(Tensor loss);

    void reset();
    size_t size() const { return nodes_.size(); }
    bool spent() const { return spent_; }

    void record(Tensor out, std::function<void()> back);

    /// Distance of the closest elementwise input to a non-smooth point
    /// (relu corner, |.| at 0, fractional pow at 0) seen during forward.
    /// Used by finite-difference tests to reject ill-posed probe points.
    void track_kinks(bool on) {
        track_kinks_ = on;
        kink_margin_ = std::numeric_limits<double>::infinity();
    }
    bool tracking_kinks() const { return track_kinks_; }
    void note_kink(double margin) {
        if (margin < kink_margin_) kink_margin_ = margin;
    }
    double kink_margin() const { return kink_margin_; }

private:
    struct Node {
        std::shared_ptr<TensorData> out;
        std::function<void()> back;
    };
    std::vector<Node> nodes_;
    bool spent_ = false;
    bool track_kinks_ = false;
    double kink_margin_ = std::numeric_limits<double>::infinity();
};

// ---- primitive operations -------------------------------------------------
// All ops run eagerly and record their backward closure on the tape when any
// input requires grad. Shapes are validated; mismatches throw
// std::invalid_argument.

/// Cross-correlation (no kernel flip) of x[B,C,H,W] with k[O,C,kh,kw],
/// same-size output, odd kernel extents.
Tensor conv2d(Tape& tape, const Tensor& x, const Tensor& k, Pad pad);

/// x[B,F] * w[F,G] + b[G]
Tensor dense(Tape& tape, const Tensor& x, const Tensor& w, const Tensor& b);

Tensor relu(Tape& tape, const Tensor& x);
Tensor gelu(Tape& tape, const Tensor& x); // tanh approximation, a = 0.044715
Tensor sigmoid(Tape& tape, const Tensor& x);

Tensor add(Tape& tape, const Tensor& a, const Tensor& b);
Tensor sub(Tape& tape, const Tensor& a, const Tensor& b);
Tensor mul(Tape& tape, const Tensor& a, const Tensor& b);
Tensor div(Tape& tape, const Tensor& a, const Tensor& b);
Tensor scale(Tape& tape, const Tensor& x, double s);
Tensor offset(Tape& tape, const Tensor& x, double c);
Tensor pow_const(Tape& tape, const Tensor& x, double p);

Tensor mean(Tape& tape, const Tensor& x);    // -> [1]
Tensor l1_norm(Tape& tape, const Tensor& x); // sum |x_i| -> [1]

/// Mean over all non-batch dims: x[B,...] -> [B].
Tensor mean_per_sample(Tape& tape, const Tensor& x);

Tensor concat_channels(Tape& tape, const Tensor& a, const Tensor& b);
Tensor upsample2x_nearest(Tape& tape, const Tensor& x);
Tensor downsample2x_avg(Tape& tape, const Tensor& x); // even H,W required

/// bias shape [C] (shared) or [B,C] (per sample), broadcast over H,W.
Tensor add_channel_bias(Tape& tape, const Tensor& x, const Tensor& bias);

/// y[b,...] = s[b] * x[b,...]; s is a plain constant vector (mask weights).
Tensor scale_rows(Tape& tape, const Tensor& x, const std::vector<double>& s);

/// y[i,:] = table[rows[i],:]; gradient scatter-adds into the table.
Tensor gather_rows(Tape& tape, const Tensor& table, const std::vector<int>& rows);

/// From m[2,M]: y[i] = (m[0,ix[i]], m[1,iy[i]]) -> [N,2].
Tensor gather_pairs(Tape& tape, const Tensor& m, const std::vector<int>& ix, const std::vector<int>& iy);

Tensor crop_border(Tape& tape, const Tensor& x, int margin);
Tensor crop_to(Tape& tape, const Tensor& x, int new_h, int new_w); // top-left corner

/// Pad bottom/right by symmetric reflection (used to make H,W divisible
/// before pooling); gradient folds back onto the mirrored sources.
Tensor pad_reflect_br(Tape& tape, const Tensor& x, int bottom, int right);

/// p <- p - lr * grad(p) for every tensor; grads are cleared. Throws
/// std::logic_error when a tensor has no grad.
void sgd_step(std::vector<Tensor>& params, double lr);

} // namespace demix::ad
