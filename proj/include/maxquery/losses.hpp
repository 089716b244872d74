#pragma once
// Training objectives with analytic gradients. Logits Z and masks G are
// (classes x voxels); cluster assignments M are (queries x voxels).

#include "maxquery/core.hpp"
#include "maxquery/nn.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <string>
#include <vector>

namespace maxquery::loss {

inline constexpr Real kDiceSmooth = 1e-5;
inline constexpr Real kLogEps = 1e-12;

/// Contiguous query groups for background / organ / tumor.
struct QDPartition {
    int background = 16;
    int organ = 4;
    int tumor = 12;

    int total() const { return background + organ + tumor; }
    /// group (0, 1, 2) owning query index q.
    int group_of(int q) const { return q < background ? 0 : (q < background + organ ? 1 : 2); }
    friend bool operator==(const QDPartition&, const QDPartition&) = default;
};

inline std::string to_string(const QDPartition& p) {
    return "(" + std::to_string(p.background) + "," + std::to_string(p.organ) + "," + std::to_string(p.tumor) + ")";
}

/// Sum in ascending order, so any permutation of the terms gives the same bits.
inline Real order_free_sum(std::vector<Real> terms) {
    std::sort(terms.begin(), terms.end());
    Real s = 0.0;
    for (Real t : terms) s += t;
    return s;
}

struct ValueGrad {
    Real value = 0.0;
    Matrix grad;
};

inline void require_one_hot(const Matrix& g) {
    for (Eigen::Index v = 0; v < g.cols(); ++v) {
        int ones = 0;
        for (Eigen::Index k = 0; k < g.rows(); ++k) {
            const Real x = g(k, v);
            if (x == 1.0) ++ones;
            else require(x == 0.0, ErrorCategory::Shape, "ground truth is not one-hot");
        }
        require(ones == 1, ErrorCategory::Shape, "ground truth is not one-hot");
    }
}

struct SegLossTerms {
    Real ce = 0.0;
    Real dice = 0.0;
    Real total() const { return ce + dice; }
};

/// Mean voxelwise cross-entropy of class-softmax(Z) against G plus soft Dice
/// loss 1 - mean_k (2 sum p g + eps) / (sum p + sum g + eps).
inline SegLossTerms seg_loss_terms(const Matrix& z, const Matrix& g, Matrix* dz = nullptr) {
    require(z.rows() == g.rows() && z.cols() == g.cols(), ErrorCategory::Shape, "seg_loss shape mismatch");
    require_one_hot(g);
    const auto k = z.rows();
    const Real nvox = static_cast<Real>(z.cols());
    const Matrix p = nn::softmax_cols(z);

    SegLossTerms t;
    std::vector<Real> terms(static_cast<std::size_t>(z.cols()), 0.0);
    for (Eigen::Index v = 0; v < z.cols(); ++v) {
        // log-softmax for the labelled class, evaluated stably
        const Real mx = z.col(v).maxCoeff();
        const Real lse = mx + std::log((z.col(v).array() - mx).exp().sum());
        for (Eigen::Index c = 0; c < k; ++c)
            if (g(c, v) != 0.0) terms[static_cast<std::size_t>(v)] -= g(c, v) * (z(c, v) - lse);
    }
    t.ce = order_free_sum(std::move(terms)) / nvox;

    auto row_sum = [](const Matrix& x, Eigen::Index r) {
        return order_free_sum(std::vector<Real>(x.row(r).begin(), x.row(r).end()));
    };
    const Matrix pg = p.cwiseProduct(g);
    Vector inter(k), denom(k);
    for (Eigen::Index c = 0; c < k; ++c) {
        inter(c) = row_sum(pg, c);
        denom(c) = row_sum(p, c) + row_sum(g, c) + kDiceSmooth;
    }
    const Vector ratio = (2.0 * inter.array() + kDiceSmooth) / denom.array();
    t.dice = 1.0 - ratio.mean();

    if (dz) {
        Matrix dp(k, z.cols());
        for (Eigen::Index c = 0; c < k; ++c) {
            const Real a = 2.0 * inter(c) + kDiceSmooth;
            const Real b = denom(c);
            dp.row(c) = -((2.0 * b) * g.row(c).array() - a).matrix() / (b * b * static_cast<Real>(k));
        }
        *dz = (p - g) / nvox + nn::softmax_cols_backward(p, dp);
    }
    return t;
}

inline ValueGrad seg_loss(const Matrix& z, const Matrix& g) {
    ValueGrad out;
    out.value = seg_loss_terms(z, g, &out.grad).total();
    return out;
}

struct MergedAssignments {
    Matrix assignments;  // 3 x V
    Matrix labels;       // 3 x V
};

inline void require_partition(const QDPartition& part, Eigen::Index queries) {
    require(part.background >= 0 && part.organ >= 0 && part.tumor >= 0, ErrorCategory::Shape,
            "query partition counts must be non-negative");
    require(part.total() == queries, ErrorCategory::Shape,
            "query partition " + to_string(part) + " does not sum to " + std::to_string(queries));
}

/// Group sums over the query axis, summed in sorted order per voxel so that
/// permuting queries within a group cannot change a bit.
inline Matrix merge_queries(const Matrix& m, const QDPartition& part) {
    require_partition(part, m.rows());
    Matrix out(3, m.cols());
    const std::array<int, 4> bounds = {0, part.background, part.background + part.organ, part.total()};
    std::vector<Real> buf;
    for (Eigen::Index v = 0; v < m.cols(); ++v)
        for (int grp = 0; grp < 3; ++grp) {
            buf.assign(m.col(v).data() + bounds[grp], m.col(v).data() + bounds[grp + 1]);
            out(grp, v) = order_free_sum(std::move(buf));
        }
    return out;
}

/// (G_1, G_2, sum_{i>=3} G_i) for a K x V label stack (K >= 3), or a 3 x V
/// stack passed through unchanged.
inline Matrix merge_labels(const Matrix& g) {
    require(g.rows() >= 3, ErrorCategory::Shape, "label stack needs background, organ and >= 1 tumor class");
    Matrix out(3, g.cols());
    out.row(0) = g.row(0);
    out.row(1) = g.row(1);
    out.row(2) = g.bottomRows(g.rows() - 2).colwise().sum();
    return out;
}

inline MergedAssignments merge_assignments(const Matrix& m, const Matrix& g, const QDPartition& part) {
    require(m.cols() == g.cols(), ErrorCategory::Shape, "assignment/label voxel count mismatch");
    return {merge_queries(m, part), merge_labels(g)};
}

/// Mean over voxels of -sum_i G~_i log(M~_i + eps).
inline Real qd_loss(const MergedAssignments& merged) {
    const auto& a = merged.assignments;
    const auto& g = merged.labels;
    std::vector<Real> terms(static_cast<std::size_t>(a.cols()), 0.0);
    for (Eigen::Index v = 0; v < a.cols(); ++v)
        for (int i = 0; i < 3; ++i)
            if (g(i, v) != 0.0) terms[static_cast<std::size_t>(v)] -= g(i, v) * std::log(a(i, v) + kLogEps);
    return order_free_sum(std::move(terms)) / static_cast<Real>(a.cols());
}

/// QD loss and its gradient with respect to the (un-merged) assignments M.
/// `merged_labels` is 3 x V.
inline ValueGrad qd_loss_with_grad(const Matrix& m, const Matrix& merged_labels, const QDPartition& part) {
    MergedAssignments merged{merge_queries(m, part), merged_labels};
    ValueGrad out;
    out.value = qd_loss(merged);
    const Real inv_n = 1.0 / static_cast<Real>(m.cols());
    Matrix dmerged = -(merged_labels.array() / (merged.assignments.array() + kLogEps)).matrix() * inv_n;
    out.grad.resize(m.rows(), m.cols());
    for (Eigen::Index q = 0; q < m.rows(); ++q) out.grad.row(q) = dmerged.row(part.group_of(static_cast<int>(q)));
    return out;
}

/// 3 x V merged labels averaged over stride^dims blocks to match a coarser grid.
inline Matrix downsample_labels(const Matrix& merged, const GridShape& fine, int stride) {
    if (stride == 1) return merged;
    require(fine.divisible_by(stride), ErrorCategory::Shape, "grid not divisible by supervision stride");
    const GridShape coarse = fine.downsampled(stride);
    const int sd = fine.volumetric() ? stride : 1;
    Matrix out = Matrix::Zero(merged.rows(), coarse.voxels());
    for (int h = 0; h < fine.h; ++h)
        for (int w = 0; w < fine.w; ++w)
            for (int d = 0; d < fine.d; ++d)
                out.col(coarse.index(h / stride, w / stride, d / sd)) += merged.col(fine.index(h, w, d));
    return out / static_cast<Real>(stride * stride * sd);
}

/// Soft cluster assignment of one decoder block's cross-attention, with the
/// grid it lives on.
struct AuxAssignment {
    Matrix soft;  // N x V_s, column-stochastic
    GridShape grid;
    int stride = 1;
};

struct LossWeights {
    Real qd = 0.1;
    Real deep_supervision = 0.1;
};

struct TotalLoss {
    Real total = 0.0;
    Real seg = 0.0;
    Real ce = 0.0;
    Real dice = 0.0;
    Real qd = 0.0;
    Real ds = 0.0;
    Matrix dz;
    Matrix dm;
    std::vector<Matrix> daux;
};

/// L = L_seg(Z, G) + w_qd * L_qd(M, G) + w_ds * mean_b L_qd(aux_b, G at aux_b's stride).
inline TotalLoss total_loss(const Matrix& z, const Matrix& m, const Matrix& g, const GridShape& grid,
                            const QDPartition& part, const LossWeights& w,
                            const std::vector<AuxAssignment>& aux = {}) {
    require(m.cols() == z.cols() && g.cols() == z.cols() && grid.voxels() == z.cols(), ErrorCategory::Shape,
            "total_loss shape mismatch");
    require(w.qd >= 0.0 && w.deep_supervision >= 0.0, ErrorCategory::Config, "loss weights must be >= 0");
    TotalLoss out;
    const auto seg = seg_loss_terms(z, g, &out.dz);
    out.ce = seg.ce;
    out.dice = seg.dice;
    out.seg = seg.total();

    const Matrix merged_labels = merge_labels(g);
    auto qd = qd_loss_with_grad(m, merged_labels, part);
    out.qd = qd.value;
    out.dm = w.qd * qd.grad;

    if (!aux.empty()) {
        const Real inv_b = 1.0 / static_cast<Real>(aux.size());
        for (const auto& a : aux) {
            const Matrix labels = downsample_labels(merged_labels, grid, a.stride);
            require(labels.cols() == a.soft.cols(), ErrorCategory::Shape, "aux assignment grid mismatch");
            auto ds = qd_loss_with_grad(a.soft, labels, part);
            out.ds += ds.value * inv_b;
            out.daux.push_back(w.deep_supervision * inv_b * ds.grad);
        }
    }
    out.total = out.seg + w.qd * out.qd + w.deep_supervision * out.ds;
    return out;
}

}  // namespace maxquery::loss
