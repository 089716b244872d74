#pragma once
// Mask-transformer segmentation network: a U-shaped pixel encoder-decoder, a
// stack of query decoder blocks with cluster-wise argmax cross-attention, and
// the two-stage cluster head (assignment M = softmax_N(C P^T), classification
// C_K = MLP(C), logits Z = C_K^T M).

#include "maxquery/core.hpp"
#include "maxquery/losses.hpp"
#include "maxquery/nn.hpp"

#include <string>
#include <vector>

namespace maxquery::model {

struct ModelConfig {
    GridShape grid{64, 64, 1};
    int in_channels = 1;
    int levels = 3;
    int base_width = 16;
    int embed_dim = 64;
    int num_queries = 32;
    loss::QDPartition partition{16, 4, 12};
    int num_classes = 5;
    std::vector<int> decoder_strides{4, 2};
    int heads = 8;
    int ffn_hidden = 128;
    std::uint64_t init_seed = 7;

    int width_at(int level) const { return base_width << level; }
};

inline void validate(const ModelConfig& c) {
    require(c.levels >= 1 && c.base_width >= 1 && c.embed_dim >= 1, ErrorCategory::Config, "model sizes must be positive");
    require(c.grid.divisible_by(1 << (c.levels - 1)), ErrorCategory::Config,
            "grid " + to_string(c.grid) + " not divisible by the coarsest stride");
    require(c.num_queries >= 1 && c.partition.total() == c.num_queries, ErrorCategory::Config,
            "query partition must sum to num_queries");
    require(c.num_classes >= 3, ErrorCategory::Config, "need background, organ and >= 1 tumor class");
    require(c.heads >= 1 && c.embed_dim % c.heads == 0, ErrorCategory::Config, "embed_dim must be divisible by heads");
    for (int s : c.decoder_strides) {
        bool ok = false;
        for (int l = 0; l < c.levels; ++l) ok = ok || s == (1 << l);
        require(ok, ErrorCategory::Config, "decoder stride " + std::to_string(s) + " is not an available feature scale");
    }
}

inline int level_of_stride(int stride) {
    int l = 0;
    while ((1 << l) < stride) ++l;
    return l;
}

// ---------------------------------------------------------------------------
// Cluster head primitives

/// R = C P^T (N x V) and M = query-wise softmax of R.
struct Assignment {
    Matrix responses;
    Matrix assignments;
};

inline Assignment cluster_assign(const Matrix& queries, const Matrix& pixels) {
    require(queries.cols() == pixels.cols(), ErrorCategory::Shape, "query/pixel channel mismatch");
    Assignment a;
    a.responses = queries * pixels.transpose();
    a.assignments = nn::softmax_cols(a.responses);
    return a;
}

/// One-hot per column at the row of the maximum; ties go to the lowest index.
inline Matrix hard_assignment(const Matrix& logits) {
    Matrix a = Matrix::Zero(logits.rows(), logits.cols());
    for (Eigen::Index v = 0; v < logits.cols(); ++v) {
        Eigen::Index best = 0;
        for (Eigen::Index q = 1; q < logits.rows(); ++q)
            if (logits(q, v) > logits(best, v)) best = q;
        a(best, v) = 1.0;
    }
    return a;
}

/// Lowest-index argmax over the rows of each column.
inline std::vector<int> argmax_rows(const Matrix& x) {
    std::vector<int> out(static_cast<std::size_t>(x.cols()));
    for (Eigen::Index v = 0; v < x.cols(); ++v) {
        Eigen::Index best = 0;
        for (Eigen::Index q = 1; q < x.rows(); ++q)
            if (x(q, v) > x(best, v)) best = q;
        out[static_cast<std::size_t>(v)] = static_cast<int>(best);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Pixel encoder-decoder

struct PixelFeatures {
    /// per_scale[l] has stride 2^l, (voxels_l x width_at(l)).
    std::vector<Matrix> per_scale;
    std::vector<GridShape> grids;
    /// instance-normalized full-resolution features, (HWD x C).
    Matrix final;
};

class Backbone {
public:
    Backbone() = default;
    Backbone(const ModelConfig& cfg, Rng& rng) : cfg_(cfg) {
        const auto g = nn::ParamGroup::Backbone;
        const bool vol = cfg.grid.volumetric();
        for (int l = 0; l < cfg.levels; ++l) {
            const int in = l == 0 ? cfg.in_channels : cfg.width_at(l - 1);
            enc_.emplace_back("backbone.enc" + std::to_string(l), g, in, cfg.width_at(l), vol, rng);
            grids_.push_back(cfg.grid.downsampled(1 << l));
        }
        for (int l = 0; l + 1 < cfg.levels; ++l)
            dec_.emplace_back("backbone.dec" + std::to_string(l), g, cfg.width_at(l + 1) + cfg.width_at(l),
                              cfg.width_at(l), vol, rng);
        proj_ = nn::Conv("backbone.proj", g, cfg.width_at(0), cfg.embed_dim, 1, vol, rng);
        norm_ = nn::InstanceNorm("backbone.final_norm", g, cfg.embed_dim);
    }

    PixelFeatures forward(const Matrix& image) {
        require(image.rows() == cfg_.grid.voxels() && image.cols() == cfg_.in_channels, ErrorCategory::Shape,
                "image shape does not match the configured grid");
        const int L = cfg_.levels;
        PixelFeatures out;
        out.per_scale.resize(static_cast<std::size_t>(L));
        out.grids = grids_;
        std::vector<Matrix> skip(static_cast<std::size_t>(L));
        Matrix x = image;
        for (int l = 0; l < L; ++l) {
            if (l > 0) x = nn::avg_pool2(x, grids_[static_cast<std::size_t>(l - 1)]);
            x = enc_[static_cast<std::size_t>(l)].forward(x, grids_[static_cast<std::size_t>(l)]);
            skip[static_cast<std::size_t>(l)] = x;
        }
        out.per_scale[static_cast<std::size_t>(L - 1)] = x;
        for (int l = L - 2; l >= 0; --l) {
            const auto& grid = grids_[static_cast<std::size_t>(l)];
            const Matrix up = nn::upsample2(x, grid);
            Matrix cat(up.rows(), up.cols() + skip[static_cast<std::size_t>(l)].cols());
            cat << up, skip[static_cast<std::size_t>(l)];
            x = dec_[static_cast<std::size_t>(l)].forward(cat, grid);
            out.per_scale[static_cast<std::size_t>(l)] = x;
        }
        out.final = norm_.forward(proj_.forward(x, grids_[0]));
        return out;
    }

    /// `d_per_scale[l]` may be empty when nothing consumed that scale.
    void backward(const Matrix& d_final, const std::vector<Matrix>& d_per_scale) {
        const int L = cfg_.levels;
        auto add_scale = [&](Matrix& dx, int l) {
            if (static_cast<std::size_t>(l) < d_per_scale.size() && d_per_scale[static_cast<std::size_t>(l)].size() > 0)
                dx += d_per_scale[static_cast<std::size_t>(l)];
        };
        Matrix dx = proj_.backward(norm_.backward(d_final));
        std::vector<Matrix> dskip(static_cast<std::size_t>(L));
        for (int l = 0; l + 1 < L; ++l) {
            add_scale(dx, l);
            const Matrix dcat = dec_[static_cast<std::size_t>(l)].backward(dx);
            const int up_w = cfg_.width_at(l + 1);
            dskip[static_cast<std::size_t>(l)] = dcat.rightCols(cfg_.width_at(l));
            dx = nn::upsample2_backward(dcat.leftCols(up_w), grids_[static_cast<std::size_t>(l)]);
        }
        add_scale(dx, L - 1);
        for (int l = L - 1; l >= 0; --l) {
            if (l < L - 1) dx += dskip[static_cast<std::size_t>(l)];
            Matrix din = enc_[static_cast<std::size_t>(l)].backward(dx, l > 0);
            if (l > 0) dx = nn::avg_pool2_backward(din, grids_[static_cast<std::size_t>(l - 1)]);
        }
    }

    void collect(nn::ParamList& out) {
        for (auto& e : enc_) e.collect(out);
        for (auto& d : dec_) d.collect(out);
        proj_.collect(out);
        norm_.collect(out);
    }

private:
    ModelConfig cfg_;
    std::vector<nn::ConvBlock> enc_;
    std::vector<nn::ConvBlock> dec_;
    std::vector<GridShape> grids_;
    nn::Conv proj_;
    nn::InstanceNorm norm_;
};

// ---------------------------------------------------------------------------
// Query decoder block

/// Cross-attention query update: sum over pixels of the hard assignment
/// times the pixel values, (N x V_s) * (V_s x C).
inline Matrix cross_attention_update(const Matrix& hard, const Matrix& values) { return hard * values; }

class DecoderBlock {
public:
    DecoderBlock() = default;
    DecoderBlock(const std::string& name, int pixel_channels, const ModelConfig& cfg, Rng& rng) {
        const auto g = nn::ParamGroup::Decoder;
        const int c = cfg.embed_dim;
        q_ = nn::Linear(name + ".cross.q", g, c, c, rng, false);
        k_ = nn::Linear(name + ".cross.k", g, pixel_channels, c, rng, false);
        v_ = nn::Linear(name + ".cross.v", g, pixel_channels, c, rng, false);
        ln_cross_ = nn::LayerNorm(name + ".cross.norm", g, c);
        self_attn_ = nn::MultiHeadSelfAttention(name + ".self_attn", g, c, cfg.heads, rng);
        ln_self_ = nn::LayerNorm(name + ".self_attn.norm", g, c);
        ffn_ = nn::Mlp(name + ".ffn", g, c, cfg.ffn_hidden, c, rng);
        ln_ffn_ = nn::LayerNorm(name + ".ffn.norm", g, c);
    }

    struct Output {
        Matrix queries;
        Matrix logits;  // N x V_s, Q^c (K^p)^T
        Matrix hard;    // one-hot argmax over queries
        Matrix soft;    // softmax over queries of logits (deep-supervision surface)
    };

    Output forward(const Matrix& queries, const Matrix& pixels) {
        Output out;
        const Matrix qc = q_.forward(queries);
        kp_ = k_.forward(pixels);
        const Matrix vp = v_.forward(pixels);
        qc_ = qc;
        out.logits = qc * kp_.transpose();
        out.hard = hard_assignment(out.logits);
        out.soft = nn::softmax_cols(out.logits);
        hard_ = out.hard;
        soft_ = out.soft;
        const Matrix x1 = ln_cross_.forward(queries + cross_attention_update(out.hard, vp));
        const Matrix x2 = ln_self_.forward(x1 + self_attn_.forward(x1));
        out.queries = ln_ffn_.forward(x2 + ffn_.forward(x2));
        return out;
    }

    struct Grads {
        Matrix queries;
        Matrix pixels;
    };

    /// The hard assignment is a constant of the backward pass; `d_soft` (may be
    /// empty) is the deep-supervision gradient on the soft assignment.
    Grads backward(const Matrix& d_queries, const Matrix& d_soft) {
        Matrix d2 = ln_ffn_.backward(d_queries);
        d2 += ffn_.backward(d2);
        Matrix d1 = ln_self_.backward(d2);
        d1 += self_attn_.backward(d1);
        const Matrix d0 = ln_cross_.backward(d1);

        Grads g;
        g.queries = d0;
        const Matrix d_vp = hard_.transpose() * d0;
        g.pixels = v_.backward(d_vp);
        if (d_soft.size() > 0) {
            const Matrix d_logits = nn::softmax_cols_backward(soft_, d_soft);
            const Matrix d_qc = d_logits * kp_;
            const Matrix d_kp = d_logits.transpose() * qc_;
            g.queries += q_.backward(d_qc);
            g.pixels += k_.backward(d_kp);
        }
        return g;
    }

    void collect(nn::ParamList& out) {
        q_.collect(out);
        k_.collect(out);
        v_.collect(out);
        ln_cross_.collect(out);
        self_attn_.collect(out);
        ln_self_.collect(out);
        ffn_.collect(out);
        ln_ffn_.collect(out);
    }

private:
    nn::Linear q_, k_, v_;
    nn::LayerNorm ln_cross_;
    nn::MultiHeadSelfAttention self_attn_;
    nn::LayerNorm ln_self_;
    nn::Mlp ffn_;
    nn::LayerNorm ln_ffn_;
    Matrix qc_, kp_, hard_, soft_;
};

// ---------------------------------------------------------------------------
// Full network

struct ClusterOutputs {
    Matrix responses;        // R, N x V
    Matrix assignments;      // M, N x V
    Matrix classifications;  // C_K, N x K
    Matrix logits;           // Z, K x V
    Matrix queries;          // final cluster centers, N x C
    std::vector<loss::AuxAssignment> aux;
    std::vector<Matrix> hard;  // per-block hard assignments
    GridShape grid;
};

inline Matrix image_matrix(const std::vector<Real>& image) {
    return Eigen::Map<const Matrix>(image.data(), static_cast<Eigen::Index>(image.size()), 1);
}

class MaskTransformer {
public:
    explicit MaskTransformer(const ModelConfig& cfg) : cfg_(cfg) {
        validate(cfg);
        Rng rng(cfg.init_seed);
        backbone_ = Backbone(cfg, rng);
        aux_head_ = nn::Linear("aux_head", nn::ParamGroup::AuxHead, cfg.embed_dim, cfg.num_classes, rng);
        query_embed_ = nn::Param("decoder.query_embed", nn::ParamGroup::Decoder,
                                 nn::normal_init(cfg.num_queries, cfg.embed_dim, 0.02, rng));
        for (std::size_t b = 0; b < cfg.decoder_strides.size(); ++b) {
            const int level = level_of_stride(cfg.decoder_strides[b]);
            blocks_.emplace_back("decoder.block" + std::to_string(b), cfg.width_at(level), cfg, rng);
        }
        classifier_ = nn::Mlp("decoder.classifier", nn::ParamGroup::Decoder, cfg.embed_dim, cfg.embed_dim,
                              cfg.num_classes, rng);
    }

    const ModelConfig& config() const { return cfg_; }

    PixelFeatures extract_features(const Matrix& image) { return backbone_.forward(image); }

    /// Plain per-pixel segmentation head on P, (K x V) logits.
    Matrix forward_aux(const Matrix& image) {
        features_ = backbone_.forward(image);
        return aux_head_.forward(features_.final).transpose();
    }
    void backward_aux(const Matrix& d_logits) {
        const Matrix dp = aux_head_.backward(d_logits.transpose());
        backbone_.backward(dp, {});
    }

    Matrix classify_clusters(const Matrix& queries) { return classifier_.forward(queries); }

    ClusterOutputs forward(const Matrix& image) {
        features_ = backbone_.forward(image);
        ClusterOutputs out;
        out.grid = cfg_.grid;
        Matrix q = query_embed_.value;
        for (std::size_t b = 0; b < blocks_.size(); ++b) {
            const int stride = cfg_.decoder_strides[b];
            const auto level = static_cast<std::size_t>(level_of_stride(stride));
            auto bo = blocks_[b].forward(q, features_.per_scale[level]);
            q = std::move(bo.queries);
            out.aux.push_back({std::move(bo.soft), features_.grids[level], stride});
            out.hard.push_back(std::move(bo.hard));
        }
        out.queries = q;
        auto a = cluster_assign(q, features_.final);
        out.responses = std::move(a.responses);
        out.assignments = std::move(a.assignments);
        out.classifications = classifier_.forward(q);
        out.logits = out.classifications.transpose() * out.assignments;
        cached_assign_ = out.assignments;
        cached_classes_ = out.classifications;
        cached_queries_ = out.queries;
        return out;
    }

    /// Backward from gradients on Z, M and each block's soft assignment
    /// (`d_aux` may be shorter than the block list, missing entries are zero).
    /// Skips the backbone entirely when `train_backbone` is false.
    void backward(const Matrix& d_logits, const Matrix& d_assign, const std::vector<Matrix>& d_aux,
                  bool train_backbone) {
        const Matrix& m = cached_assign_;
        const Matrix d_class = m * d_logits.transpose();
        Matrix dm = cached_classes_ * d_logits;
        if (d_assign.size() > 0) dm += d_assign;
        const Matrix dr = nn::softmax_cols_backward(m, dm);
        Matrix dq = dr * features_.final;
        const Matrix dp = dr.transpose() * cached_queries_;
        dq += classifier_.backward(d_class);

        std::vector<Matrix> d_scale(static_cast<std::size_t>(cfg_.levels));
        for (std::size_t b = blocks_.size(); b-- > 0;) {
            const Matrix empty;
            const Matrix& ds = b < d_aux.size() ? d_aux[b] : empty;
            auto g = blocks_[b].backward(dq, ds);
            dq = std::move(g.queries);
            auto& acc = d_scale[static_cast<std::size_t>(level_of_stride(cfg_.decoder_strides[b]))];
            if (acc.size() == 0) acc = std::move(g.pixels);
            else acc += g.pixels;
        }
        query_embed_.grad += dq;
        if (train_backbone) backbone_.backward(dp, d_scale);
    }

    nn::ParamList params() {
        nn::ParamList out;
        backbone_.collect(out);
        aux_head_.collect(out);
        out.push_back(&query_embed_);
        for (auto& b : blocks_) b.collect(out);
        classifier_.collect(out);
        return out;
    }

    void zero_grad() {
        for (auto* p : params()) p->zero_grad();
    }

private:
    ModelConfig cfg_;
    Backbone backbone_;
    nn::Linear aux_head_;
    nn::Param query_embed_;
    std::vector<DecoderBlock> blocks_;
    nn::Mlp classifier_;

    PixelFeatures features_;
    Matrix cached_assign_, cached_classes_, cached_queries_;
};

}  // namespace maxquery::model
