#pragma once
// Layers with hand-written backward passes. Spatial feature maps are stored
// voxel-major as (voxels x channels) matrices; token sets (queries) as
// (tokens x channels). Each layer caches what its backward pass needs from the
// most recent forward call, so one instance serves one forward/backward at a
// time.

#include "maxquery/core.hpp"

#include <array>
#include <cmath>
#include <string>
#include <vector>

namespace maxquery::nn {

enum class ParamGroup { Backbone, AuxHead, Decoder };

inline constexpr const char* to_string(ParamGroup g) {
    switch (g) {
        case ParamGroup::Backbone: return "backbone";
        case ParamGroup::AuxHead: return "aux_head";
        case ParamGroup::Decoder: return "decoder";
    }
    return "";
}

struct Param {
    std::string name;
    ParamGroup group = ParamGroup::Backbone;
    Matrix value;
    Matrix grad;
    // Adam moments
    Matrix m;
    Matrix v;
    long steps = 0;

    Param() = default;
    Param(std::string n, ParamGroup g, Matrix init)
        : name(std::move(n)), group(g), value(std::move(init)) {
        grad = Matrix::Zero(value.rows(), value.cols());
        m = grad;
        v = grad;
    }
    void zero_grad() { grad.setZero(); }
};

using ParamList = std::vector<Param*>;

inline Matrix normal_init(int rows, int cols, Real stddev, Rng& rng) {
    Matrix w(rows, cols);
    for (Eigen::Index j = 0; j < w.cols(); ++j)
        for (Eigen::Index i = 0; i < w.rows(); ++i) w(i, j) = rng.normal(0.0, stddev);
    return w;
}

// ---------------------------------------------------------------------------
// Activations

inline Real silu(Real x) { return x / (1.0 + std::exp(-x)); }
inline Real silu_grad(Real x) {
    const Real s = 1.0 / (1.0 + std::exp(-x));
    return s * (1.0 + x * (1.0 - s));
}

class SiLU {
public:
    Matrix forward(const Matrix& x) {
        x_ = x;
        return x.unaryExpr([](Real v) { return silu(v); });
    }
    Matrix backward(const Matrix& dy) const {
        return dy.cwiseProduct(x_.unaryExpr([](Real v) { return silu_grad(v); }));
    }

private:
    Matrix x_;
};

/// Column-wise softmax (each column is a distribution).
inline Matrix softmax_cols(const Matrix& x) {
    Matrix y(x.rows(), x.cols());
    for (Eigen::Index j = 0; j < x.cols(); ++j) {
        const Real mx = x.col(j).maxCoeff();
        y.col(j) = (x.col(j).array() - mx).exp().matrix();
        y.col(j) /= y.col(j).sum();
    }
    return y;
}

/// Backward of softmax_cols given its output y.
inline Matrix softmax_cols_backward(const Matrix& y, const Matrix& dy) {
    Matrix dx(y.rows(), y.cols());
    for (Eigen::Index j = 0; j < y.cols(); ++j) {
        const Real dot = y.col(j).dot(dy.col(j));
        dx.col(j) = y.col(j).cwiseProduct((dy.col(j).array() - dot).matrix());
    }
    return dx;
}

inline Matrix softmax_rows(const Matrix& x) { return softmax_cols(x.transpose()).transpose(); }
inline Matrix softmax_rows_backward(const Matrix& y, const Matrix& dy) {
    return softmax_cols_backward(y.transpose(), dy.transpose()).transpose();
}

// ---------------------------------------------------------------------------
// Dense

class Linear {
public:
    Linear() = default;
    Linear(const std::string& name, ParamGroup g, int in, int out, Rng& rng, bool bias = true)
        : weight_(name + ".weight", g, normal_init(in, out, std::sqrt(1.0 / in), rng)),
          bias_(name + ".bias", g, Matrix::Zero(1, out)),
          has_bias_(bias) {}

    Matrix forward(const Matrix& x) {
        x_ = x;
        Matrix y = x * weight_.value;
        if (has_bias_) y.rowwise() += bias_.value.row(0);
        return y;
    }
    Matrix backward(const Matrix& dy) {
        weight_.grad.noalias() += x_.transpose() * dy;
        if (has_bias_) bias_.grad += dy.colwise().sum();
        return dy * weight_.value.transpose();
    }
    void collect(ParamList& out) {
        out.push_back(&weight_);
        if (has_bias_) out.push_back(&bias_);
    }
    Param& weight() { return weight_; }
    Param& bias() { return bias_; }

private:
    Param weight_;
    Param bias_;
    bool has_bias_ = true;
    Matrix x_;
};

// ---------------------------------------------------------------------------
// Normalization

/// Normalizes each column of x to zero mean and unit variance.
struct ColumnNormCache {
    Matrix xhat;
    RowVector inv_std;
};

inline Matrix normalize_columns(const Matrix& x, Real eps, ColumnNormCache& cache) {
    const Real n = static_cast<Real>(x.rows());
    const RowVector mean = x.colwise().sum() / n;
    Matrix centered = x.rowwise() - mean;
    const RowVector var = centered.array().square().colwise().sum().matrix() / n;
    cache.inv_std = (var.array() + eps).rsqrt().matrix();
    cache.xhat = centered.array().rowwise() * cache.inv_std.array();
    return cache.xhat;
}

inline Matrix normalize_columns_backward(const Matrix& dxhat, const ColumnNormCache& cache) {
    const Real n = static_cast<Real>(dxhat.rows());
    const RowVector sum_d = dxhat.colwise().sum();
    const RowVector sum_dx = dxhat.cwiseProduct(cache.xhat).colwise().sum();
    Matrix dx = (n * dxhat).rowwise() - sum_d;
    dx -= (cache.xhat.array().rowwise() * sum_dx.array()).matrix();
    dx = dx.array().rowwise() * (cache.inv_std.array() / n);
    return dx;
}

/// Instance normalization over voxels per channel, input (voxels x channels),
/// with a per-channel affine.
class InstanceNorm {
public:
    InstanceNorm() = default;
    InstanceNorm(const std::string& name, ParamGroup g, int channels)
        : gamma_(name + ".gamma", g, Matrix::Ones(1, channels)),
          beta_(name + ".beta", g, Matrix::Zero(1, channels)) {}

    Matrix forward(const Matrix& x) {
        Matrix xhat = normalize_columns(x, kEps, cache_);
        Matrix y = xhat.array().rowwise() * gamma_.value.row(0).array();
        y.rowwise() += beta_.value.row(0);
        return y;
    }
    Matrix backward(const Matrix& dy) {
        gamma_.grad += dy.cwiseProduct(cache_.xhat).colwise().sum();
        beta_.grad += dy.colwise().sum();
        const Matrix dxhat = dy.array().rowwise() * gamma_.value.row(0).array();
        return normalize_columns_backward(dxhat, cache_);
    }
    void collect(ParamList& out) {
        out.push_back(&gamma_);
        out.push_back(&beta_);
    }

    static constexpr Real kEps = 1e-5;

private:
    Param gamma_;
    Param beta_;
    ColumnNormCache cache_;
};

/// Layer normalization over channels per token, input (tokens x channels).
class LayerNorm {
public:
    LayerNorm() = default;
    LayerNorm(const std::string& name, ParamGroup g, int channels)
        : gamma_(name + ".gamma", g, Matrix::Ones(1, channels)),
          beta_(name + ".beta", g, Matrix::Zero(1, channels)) {}

    Matrix forward(const Matrix& x) {
        const Matrix xhat = normalize_columns(x.transpose(), kEps, cache_).transpose();
        Matrix y = xhat.array().rowwise() * gamma_.value.row(0).array();
        y.rowwise() += beta_.value.row(0);
        return y;
    }
    Matrix backward(const Matrix& dy) {
        const Matrix xhat = cache_.xhat.transpose();
        gamma_.grad += dy.cwiseProduct(xhat).colwise().sum();
        beta_.grad += dy.colwise().sum();
        const Matrix dxhat = dy.array().rowwise() * gamma_.value.row(0).array();
        return normalize_columns_backward(dxhat.transpose(), cache_).transpose();
    }
    void collect(ParamList& out) {
        out.push_back(&gamma_);
        out.push_back(&beta_);
    }

    static constexpr Real kEps = 1e-5;

private:
    Param gamma_;
    Param beta_;
    ColumnNormCache cache_;
};

// ---------------------------------------------------------------------------
// Spatial ops

/// "Same" convolution with kernel 1 or 3 per spatial axis (depth kernel is 1
/// in 2D mode), implemented as im2col + GEMM.
class Conv {
public:
    Conv() = default;
    Conv(const std::string& name, ParamGroup g, int in, int out, int kernel, bool volumetric, Rng& rng)
        : in_(in), out_(out), kernel_(kernel) {
        require(kernel == 1 || kernel == 3, ErrorCategory::Config, "conv kernel must be 1 or 3");
        const int r = kernel / 2;
        const int rd = volumetric ? r : 0;
        for (int dh = -r; dh <= r; ++dh)
            for (int dw = -r; dw <= r; ++dw)
                for (int dd = -rd; dd <= rd; ++dd) offsets_.push_back({dh, dw, dd});
        const int fan_in = in * static_cast<int>(offsets_.size());
        weight_ = Param(name + ".weight", g, normal_init(fan_in, out, std::sqrt(2.0 / fan_in), rng));
        bias_ = Param(name + ".bias", g, Matrix::Zero(1, out));
    }

    Matrix forward(const Matrix& x, const GridShape& grid) {
        require(x.cols() == in_ && x.rows() == grid.voxels(), ErrorCategory::Shape, "conv input shape mismatch");
        grid_ = grid;
        if (kernel_ == 1) {
            cols_ = x;
        } else {
            cols_.setZero(grid.voxels(), in_ * static_cast<Eigen::Index>(offsets_.size()));
            transfer<false>(x, cols_);
        }
        Matrix y = cols_ * weight_.value;
        y.rowwise() += bias_.value.row(0);
        return y;
    }

    /// Accumulates parameter gradients; returns the input gradient unless
    /// `need_input_grad` is false (then an empty matrix).
    Matrix backward(const Matrix& dy, bool need_input_grad = true) {
        weight_.grad.noalias() += cols_.transpose() * dy;
        bias_.grad += dy.colwise().sum();
        if (!need_input_grad) return {};
        Matrix dcols = dy * weight_.value.transpose();
        if (kernel_ == 1) return dcols;
        Matrix dx = Matrix::Zero(grid_.voxels(), in_);
        transfer<true>(dx, dcols);
        return dx;
    }

    void collect(ParamList& out) {
        out.push_back(&weight_);
        out.push_back(&bias_);
    }
    int in_channels() const { return in_; }
    int out_channels() const { return out_; }

private:
    // Copies shifted input channels into im2col columns (forward) or
    // accumulates column gradients back onto the input (backward). Runs are
    // contiguous along the innermost axis with extent > 1.
    template <bool Backward, class X, class Cols>
    void transfer(X& x, Cols& cols) const {
        const auto& g = grid_;
        const int kvol = static_cast<int>(offsets_.size());
        for (int c = 0; c < in_; ++c) {
            for (int o = 0; o < kvol; ++o) {
                const auto [dh, dw, dd] = offsets_[static_cast<std::size_t>(o)];
                const Eigen::Index col = static_cast<Eigen::Index>(c) * kvol + o;
                for (int h = 0; h < g.h; ++h) {
                    const int hs = h + dh;
                    if (hs < 0 || hs >= g.h) continue;
                    if (!g.volumetric()) {
                        const int w0 = std::max(0, -dw), w1 = std::min(g.w, g.w - dw);
                        if (w1 <= w0) continue;
                        const Eigen::Index dst = static_cast<Eigen::Index>(h) * g.w + w0;
                        const Eigen::Index src = static_cast<Eigen::Index>(hs) * g.w + w0 + dw;
                        if constexpr (Backward) x.col(c).segment(src, w1 - w0) += cols.col(col).segment(dst, w1 - w0);
                        else cols.col(col).segment(dst, w1 - w0) = x.col(c).segment(src, w1 - w0);
                    } else {
                        for (int w = 0; w < g.w; ++w) {
                            const int ws = w + dw;
                            if (ws < 0 || ws >= g.w) continue;
                            const int d0 = std::max(0, -dd), d1 = std::min(g.d, g.d - dd);
                            if (d1 <= d0) continue;
                            const Eigen::Index dst = g.index(h, w, d0);
                            const Eigen::Index src = g.index(hs, ws, d0 + dd);
                            if constexpr (Backward) x.col(c).segment(src, d1 - d0) += cols.col(col).segment(dst, d1 - d0);
                            else cols.col(col).segment(dst, d1 - d0) = x.col(c).segment(src, d1 - d0);
                        }
                    }
                }
            }
        }
    }

    int in_ = 0;
    int out_ = 0;
    int kernel_ = 3;
    std::vector<std::array<int, 3>> offsets_;
    Param weight_;
    Param bias_;
    Matrix cols_;
    GridShape grid_;
};

/// 2x average pooling along every axis with extent > 1 in the fine grid
/// (depth is pooled only in volumetric mode).
inline Matrix avg_pool2(const Matrix& x, const GridShape& fine) {
    const GridShape coarse = fine.downsampled(2);
    const int fd = fine.volumetric() ? 2 : 1;
    const Real scale = 1.0 / (4.0 * fd);
    Matrix y = Matrix::Zero(coarse.voxels(), x.cols());
    for (int h = 0; h < fine.h; ++h)
        for (int w = 0; w < fine.w; ++w)
            for (int d = 0; d < fine.d; ++d)
                y.row(coarse.index(h / 2, w / 2, d / fd)) += x.row(fine.index(h, w, d));
    return y * scale;
}

inline Matrix avg_pool2_backward(const Matrix& dy, const GridShape& fine) {
    const GridShape coarse = fine.downsampled(2);
    const int fd = fine.volumetric() ? 2 : 1;
    const Real scale = 1.0 / (4.0 * fd);
    Matrix dx(fine.voxels(), dy.cols());
    for (int h = 0; h < fine.h; ++h)
        for (int w = 0; w < fine.w; ++w)
            for (int d = 0; d < fine.d; ++d)
                dx.row(fine.index(h, w, d)) = dy.row(coarse.index(h / 2, w / 2, d / fd)) * scale;
    return dx;
}

/// Nearest-neighbour 2x upsampling from fine.downsampled(2) to `fine`.
inline Matrix upsample2(const Matrix& x, const GridShape& fine) {
    const GridShape coarse = fine.downsampled(2);
    const int fd = fine.volumetric() ? 2 : 1;
    Matrix y(fine.voxels(), x.cols());
    for (int h = 0; h < fine.h; ++h)
        for (int w = 0; w < fine.w; ++w)
            for (int d = 0; d < fine.d; ++d) y.row(fine.index(h, w, d)) = x.row(coarse.index(h / 2, w / 2, d / fd));
    return y;
}

inline Matrix upsample2_backward(const Matrix& dy, const GridShape& fine) {
    const GridShape coarse = fine.downsampled(2);
    const int fd = fine.volumetric() ? 2 : 1;
    Matrix dx = Matrix::Zero(coarse.voxels(), dy.cols());
    for (int h = 0; h < fine.h; ++h)
        for (int w = 0; w < fine.w; ++w)
            for (int d = 0; d < fine.d; ++d) dx.row(coarse.index(h / 2, w / 2, d / fd)) += dy.row(fine.index(h, w, d));
    return dx;
}

/// conv3 -> InstanceNorm -> SiLU, twice.
class ConvBlock {
public:
    ConvBlock() = default;
    ConvBlock(const std::string& name, ParamGroup g, int in, int out, bool volumetric, Rng& rng)
        : conv1_(name + ".conv1", g, in, out, 3, volumetric, rng),
          norm1_(name + ".norm1", g, out),
          conv2_(name + ".conv2", g, out, out, 3, volumetric, rng),
          norm2_(name + ".norm2", g, out) {}

    Matrix forward(const Matrix& x, const GridShape& grid) {
        Matrix h = act1_.forward(norm1_.forward(conv1_.forward(x, grid)));
        return act2_.forward(norm2_.forward(conv2_.forward(h, grid)));
    }
    Matrix backward(const Matrix& dy, bool need_input_grad = true) {
        Matrix d = conv2_.backward(norm2_.backward(act2_.backward(dy)));
        return conv1_.backward(norm1_.backward(act1_.backward(d)), need_input_grad);
    }
    void collect(ParamList& out) {
        conv1_.collect(out);
        norm1_.collect(out);
        conv2_.collect(out);
        norm2_.collect(out);
    }

private:
    Conv conv1_;
    InstanceNorm norm1_;
    SiLU act1_;
    Conv conv2_;
    InstanceNorm norm2_;
    SiLU act2_;
};

// ---------------------------------------------------------------------------
// Attention over tokens

class MultiHeadSelfAttention {
public:
    MultiHeadSelfAttention() = default;
    MultiHeadSelfAttention(const std::string& name, ParamGroup g, int channels, int heads, Rng& rng)
        : heads_(heads),
          q_(name + ".q", g, channels, channels, rng),
          k_(name + ".k", g, channels, channels, rng),
          v_(name + ".v", g, channels, channels, rng),
          o_(name + ".o", g, channels, channels, rng) {
        require(heads > 0 && channels % heads == 0, ErrorCategory::Config,
                "embedding width must be divisible by the head count");
    }

    Matrix forward(const Matrix& x) {
        qh_ = q_.forward(x);
        kh_ = k_.forward(x);
        vh_ = v_.forward(x);
        const int dh = static_cast<int>(x.cols()) / heads_;
        const Real scale = 1.0 / std::sqrt(static_cast<Real>(dh));
        attn_.resize(static_cast<std::size_t>(heads_));
        Matrix out(x.rows(), x.cols());
        for (int h = 0; h < heads_; ++h) {
            const auto q = qh_.middleCols(h * dh, dh);
            const auto k = kh_.middleCols(h * dh, dh);
            const auto v = vh_.middleCols(h * dh, dh);
            attn_[static_cast<std::size_t>(h)] = softmax_rows((q * k.transpose()) * scale);
            out.middleCols(h * dh, dh) = attn_[static_cast<std::size_t>(h)] * v;
        }
        return o_.forward(out);
    }

    Matrix backward(const Matrix& dy) {
        const Matrix dout = o_.backward(dy);
        const int dh = static_cast<int>(dy.cols()) / heads_;
        const Real scale = 1.0 / std::sqrt(static_cast<Real>(dh));
        Matrix dq(qh_.rows(), qh_.cols()), dk(kh_.rows(), kh_.cols()), dv(vh_.rows(), vh_.cols());
        for (int h = 0; h < heads_; ++h) {
            const Matrix& a = attn_[static_cast<std::size_t>(h)];
            const auto q = qh_.middleCols(h * dh, dh);
            const auto k = kh_.middleCols(h * dh, dh);
            const auto v = vh_.middleCols(h * dh, dh);
            const auto dout_h = dout.middleCols(h * dh, dh);
            const Matrix da = dout_h * v.transpose();
            dv.middleCols(h * dh, dh) = a.transpose() * dout_h;
            const Matrix ds = softmax_rows_backward(a, da) * scale;
            dq.middleCols(h * dh, dh) = ds * k;
            dk.middleCols(h * dh, dh) = ds.transpose() * q;
        }
        return q_.backward(dq) + k_.backward(dk) + v_.backward(dv);
    }

    void collect(ParamList& out) {
        q_.collect(out);
        k_.collect(out);
        v_.collect(out);
        o_.collect(out);
    }

private:
    int heads_ = 1;
    Linear q_, k_, v_, o_;
    Matrix qh_, kh_, vh_;
    std::vector<Matrix> attn_;
};

/// Linear -> SiLU -> Linear.
class Mlp {
public:
    Mlp() = default;
    Mlp(const std::string& name, ParamGroup g, int in, int hidden, int out, Rng& rng)
        : fc1_(name + ".fc1", g, in, hidden, rng), fc2_(name + ".fc2", g, hidden, out, rng) {}

    Matrix forward(const Matrix& x) { return fc2_.forward(act_.forward(fc1_.forward(x))); }
    Matrix backward(const Matrix& dy) { return fc1_.backward(act_.backward(fc2_.backward(dy))); }
    void collect(ParamList& out) {
        fc1_.collect(out);
        fc2_.collect(out);
    }

private:
    Linear fc1_;
    SiLU act_;
    Linear fc2_;
};

// ---------------------------------------------------------------------------
// Optimizer

struct AdamOptions {
    Real lr = 1e-4;
    Real beta1 = 0.9;
    Real beta2 = 0.999;
    Real eps = 1e-8;
};

/// Adam update for every parameter with a positive learning-rate multiplier.
/// Moments and the bias-correction step count are per parameter, so a group
/// that starts frozen begins its own correction schedule when released.
template <class MultiplierFn>
void adam_step(const ParamList& params, const AdamOptions& opt, Real lr, MultiplierFn&& multiplier) {
    for (Param* p : params) {
        const Real mult = multiplier(*p);
        if (mult <= 0.0) continue;
        ++p->steps;
        p->m = opt.beta1 * p->m + (1.0 - opt.beta1) * p->grad;
        p->v = opt.beta2 * p->v + (1.0 - opt.beta2) * p->grad.cwiseAbs2();
        const Real c1 = 1.0 - std::pow(opt.beta1, static_cast<Real>(p->steps));
        const Real c2 = 1.0 - std::pow(opt.beta2, static_cast<Real>(p->steps));
        const Real step = lr * mult / c1;
        p->value.array() -= step * p->m.array() / ((p->v.array() / c2).sqrt() + opt.eps);
    }
}

}  // namespace maxquery::nn
