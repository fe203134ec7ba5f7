#pragma once

// Sliding-window segmentation and phase-wise Pearson functional connectivity.

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "autodiff.hpp"
#include "errors.hpp"
#include "log.hpp"

namespace brainstr {

inline constexpr int kDefaultMinFcLen = 5;

struct SegmentSequence {
    std::vector<Matrix> segments; // K slices, each w x N
    Index window = 0;
    Index step = 1;
    Index source_length = 0;

    Index count() const { return static_cast<Index>(segments.size()); }

    // Segment k (0-based) covers [k*step, k*step + window).
    Index start(Index k) const { return k * step; }
};

inline Index segment_count(Index t, Index w, Index s) { return (t - w) / s + 1; }

inline SegmentSequence segment(const Matrix& signal, Index w, Index s, bool warn_stride = true) {
    const Index t = signal.rows();
    if (w < 1 || s < 1) throw DimensionError("segment: window and step must be >= 1");
    if (w > t) throw DimensionError("segment: window " + std::to_string(w) + " exceeds series length " +
                                    std::to_string(t));
    if (s != 1 && warn_stride) log::warn("segment: step " + std::to_string(s) + " != 1");
    SegmentSequence seq;
    seq.window = w;
    seq.step = s;
    seq.source_length = t;
    const Index k = segment_count(t, w, s);
    seq.segments.reserve(static_cast<std::size_t>(k));
    for (Index i = 0; i < k; ++i) seq.segments.push_back(signal.middleRows(i * s, w));
    return seq;
}

// Sample Pearson correlation between columns. Zero-variance columns get zero
// off-diagonal correlation (with a warning); the diagonal is always 1.
inline Matrix pearson_fc(const Matrix& x) {
    const Index l = x.rows(), n = x.cols();
    if (l < 2) throw DimensionError("pearson_fc: need at least 2 time points");
    Matrix centered = x.rowwise() - x.colwise().mean();
    Vector norms = centered.colwise().norm().transpose();
    std::vector<bool> degenerate(static_cast<std::size_t>(n), false);
    for (Index j = 0; j < n; ++j) {
        const double scale = 1.0 + x.col(j).cwiseAbs().maxCoeff();
        if (!(norms(j) > 1e-12 * scale * std::sqrt(static_cast<double>(l)))) {
            degenerate[static_cast<std::size_t>(j)] = true;
            log::warn("pearson_fc: column " + std::to_string(j) + " has zero variance; correlations set to 0");
        }
    }
    Matrix gram = centered.transpose() * centered;
    Matrix fc = Matrix::Identity(n, n);
    for (Index i = 0; i < n; ++i)
        for (Index j = i + 1; j < n; ++j) {
            double r = 0.0;
            if (!degenerate[static_cast<std::size_t>(i)] && !degenerate[static_cast<std::size_t>(j)])
                r = std::clamp(gram(i, j) / (norms(i) * norms(j)), -1.0, 1.0);
            fc(i, j) = r;
            fc(j, i) = r;
        }
    return fc;
}

struct PhasePartition {
    std::vector<int> boundaries; // 0 = c_0 < ... < c_W = T
    std::vector<Matrix> fc_matrices;
    std::vector<std::string> merges; // human-readable record of short-phase merges

    int phase_count() const { return static_cast<int>(fc_matrices.size()); }
    int length() const { return boundaries.empty() ? 0 : boundaries.back(); }
    Index n_rois() const { return fc_matrices.empty() ? 0 : fc_matrices.front().rows(); }
};

inline void validate_boundaries(const std::vector<int>& b, int t) {
    if (b.size() < 2) throw DimensionError("boundaries need at least [0, T]");
    if (b.front() != 0) throw DimensionError("boundaries must start at 0");
    if (b.back() != t) throw DimensionError("boundaries must end at T=" + std::to_string(t));
    for (std::size_t i = 1; i < b.size(); ++i)
        if (b[i] <= b[i - 1]) throw DimensionError("boundaries must be strictly increasing");
}

// Merges every phase shorter than min_len into its shorter neighbour
// (left neighbour on ties), shortest offender first.
inline std::vector<int> merge_short_phases(std::vector<int> b, int min_len, std::vector<std::string>* record = nullptr) {
    while (b.size() > 2) {
        int worst = -1;
        for (std::size_t p = 0; p + 1 < b.size(); ++p) {
            const int len = b[p + 1] - b[p];
            if (len < min_len && (worst < 0 || len < b[worst + 1] - b[worst])) worst = static_cast<int>(p);
        }
        if (worst < 0) break;
        const std::size_t p = static_cast<std::size_t>(worst);
        const std::size_t phases = b.size() - 1;
        std::size_t drop; // boundary index removed
        if (p == 0)
            drop = 1;
        else if (p + 1 == phases)
            drop = p;
        else {
            const int left = b[p] - b[p - 1];
            const int right = b[p + 2] - b[p + 1];
            drop = left <= right ? p : p + 1;
        }
        if (record)
            record->push_back("phase [" + std::to_string(b[p]) + ", " + std::to_string(b[p + 1]) +
                              ") merged by removing boundary " + std::to_string(b[drop]));
        b.erase(b.begin() + static_cast<std::ptrdiff_t>(drop));
    }
    return b;
}

inline PhasePartition build_partition(const Matrix& signal, const std::vector<int>& boundaries,
                                      int min_fc_len = kDefaultMinFcLen) {
    const int t = static_cast<int>(signal.rows());
    validate_boundaries(boundaries, t);
    if (t < min_fc_len) throw DimensionError("series shorter than min_fc_len");
    PhasePartition part;
    part.boundaries = merge_short_phases(boundaries, min_fc_len, &part.merges);
    for (std::size_t p = 0; p + 1 < part.boundaries.size(); ++p) {
        const int c0 = part.boundaries[p], c1 = part.boundaries[p + 1];
        part.fc_matrices.push_back(pearson_fc(signal.middleRows(c0, c1 - c0)));
    }
    return part;
}

} // namespace brainstr
