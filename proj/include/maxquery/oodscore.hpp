#pragma once
// Per-voxel anomaly scores (higher = more anomalous) from the network outputs:
// query-level MaxQuery on responses R (pre-softmax) or assignments M
// (post-softmax), and the category-level MSP / MaxLogit baselines on Z.

#include "maxquery/core.hpp"
#include "maxquery/nn.hpp"

#include <algorithm>
#include <array>
#include <limits>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace maxquery::ood {

enum class ScoreMethod { MaxQueryPre, MaxQueryPost, Msp, MaxLogit };

inline constexpr std::array<ScoreMethod, 4> kAllMethods = {ScoreMethod::MaxQueryPre, ScoreMethod::MaxQueryPost,
                                                           ScoreMethod::Msp, ScoreMethod::MaxLogit};

inline constexpr std::string_view to_string(ScoreMethod m) {
    switch (m) {
        case ScoreMethod::MaxQueryPre: return "maxquery_pre";
        case ScoreMethod::MaxQueryPost: return "maxquery_post";
        case ScoreMethod::Msp: return "msp";
        case ScoreMethod::MaxLogit: return "maxlogit";
    }
    return "";
}

inline ScoreMethod parse_method(std::string_view s) {
    for (auto m : kAllMethods)
        if (to_string(m) == s) return m;
    fail(ErrorCategory::Config, "unknown score method '" + std::string(s) + "'");
}

struct AnomalyMap {
    std::vector<Real> scores;
    GridShape grid;
    ScoreMethod method = ScoreMethod::MaxQueryPre;
    bool normalized = false;
};

namespace detail {

inline AnomalyMap negated_column_max(const Matrix& x, const GridShape& grid, ScoreMethod method) {
    require(x.cols() == grid.voxels(), ErrorCategory::Shape, "score input does not match grid");
    require(x.rows() >= 1, ErrorCategory::Shape, "score input has no rows");
    AnomalyMap a;
    a.grid = grid;
    a.method = method;
    a.scores.resize(static_cast<std::size_t>(x.cols()));
    for (Eigen::Index v = 0; v < x.cols(); ++v) a.scores[static_cast<std::size_t>(v)] = -x.col(v).maxCoeff();
    return a;
}

}  // namespace detail

/// A = -max_N R.
inline AnomalyMap maxquery_pre(const Matrix& responses, const GridShape& grid) {
    require(responses.allFinite(), ErrorCategory::Numeric, "query responses are not finite");
    return detail::negated_column_max(responses, grid, ScoreMethod::MaxQueryPre);
}

/// A' = -max_N M.
inline AnomalyMap maxquery_post(const Matrix& assignments, const GridShape& grid) {
    return detail::negated_column_max(assignments, grid, ScoreMethod::MaxQueryPost);
}

/// -max_K softmax_K(Z).
inline AnomalyMap msp(const Matrix& logits, const GridShape& grid) {
    return detail::negated_column_max(nn::softmax_cols(logits), grid, ScoreMethod::Msp);
}

/// -max_K Z.
inline AnomalyMap maxlogit(const Matrix& logits, const GridShape& grid) {
    return detail::negated_column_max(logits, grid, ScoreMethod::MaxLogit);
}

inline AnomalyMap score(ScoreMethod method, const Matrix& responses, const Matrix& assignments, const Matrix& logits,
                        const GridShape& grid) {
    switch (method) {
        case ScoreMethod::MaxQueryPre: return maxquery_pre(responses, grid);
        case ScoreMethod::MaxQueryPost: return maxquery_post(assignments, grid);
        case ScoreMethod::Msp: return msp(logits, grid);
        case ScoreMethod::MaxLogit: return maxlogit(logits, grid);
    }
    fail(ErrorCategory::Config, "unknown score method");
}

enum class NormScope { PerCase, PerDataset };

struct ScoreRange {
    Real min = 0.0;
    Real max = 0.0;
};

inline ScoreRange range_of(const std::vector<AnomalyMap>& maps) {
    ScoreRange r{std::numeric_limits<Real>::infinity(), -std::numeric_limits<Real>::infinity()};
    for (const auto& m : maps)
        for (Real s : m.scores) {
            r.min = std::min(r.min, s);
            r.max = std::max(r.max, s);
        }
    return r;
}

/// (A - min) / (max - min). PerCase uses the map's own range; PerDataset
/// requires the pooled range of the dataset.
inline AnomalyMap minmax_normalize(const AnomalyMap& map, NormScope scope,
                                   std::optional<ScoreRange> dataset_range = std::nullopt) {
    ScoreRange r;
    if (scope == NormScope::PerCase) {
        r = range_of({map});
    } else {
        require(dataset_range.has_value(), ErrorCategory::Config, "per-dataset normalization needs the dataset range");
        r = *dataset_range;
    }
    require(r.max > r.min, ErrorCategory::Numeric, "constant anomaly map cannot be min-max normalized");
    AnomalyMap out = map;
    const Real span = r.max - r.min;
    for (auto& s : out.scores) s = (s - r.min) / span;
    out.normalized = true;
    return out;
}

/// 0-based index of the first tumor class (background 0, organ 1).
inline constexpr int kFirstTumorClass = 2;

/// Mean anomaly over voxels predicted as a tumor class; nullopt when the
/// prediction contains no tumor voxel.
inline std::optional<Real> case_score(const AnomalyMap& map, const std::vector<int>& predicted) {
    require(predicted.size() == map.scores.size(), ErrorCategory::Shape, "prediction/map size mismatch");
    Real sum = 0.0;
    std::size_t n = 0;
    for (std::size_t v = 0; v < predicted.size(); ++v) {
        if (predicted[v] >= kFirstTumorClass) {
            sum += map.scores[v];
            ++n;
        }
    }
    if (n == 0) return std::nullopt;
    return sum / static_cast<Real>(n);
}

/// As above, with an empty prediction mapped to `empty_value` (the harness
/// passes the dataset-level minimum anomaly score).
inline Real case_score(const AnomalyMap& map, const std::vector<int>& predicted, Real empty_value) {
    return case_score(map, predicted).value_or(empty_value);
}

}  // namespace maxquery::ood
