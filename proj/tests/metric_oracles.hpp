#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <vector>

// Brute-force metric oracles, written independently of the library
// implementations: straight pixel enumeration and O(n^2) distance loops.

namespace a4::oracle {

inline double dice_oracle(const std::vector<int32_t>& pred, const std::vector<int32_t>& gt) {
    long long tp = 0, fp = 0, fn = 0;
    for (size_t i = 0; i < pred.size(); ++i) {
        if (pred[i] == 1 && gt[i] == 1) ++tp;
        if (pred[i] == 1 && gt[i] == 0) ++fp;
        if (pred[i] == 0 && gt[i] == 1) ++fn;
    }
    const long long denom = fn + fp + 2 * tp;
    return denom == 0 ? 1.0 : 2.0 * static_cast<double>(tp) / static_cast<double>(denom);
}

inline double miou_oracle(const std::vector<int32_t>& pred, const std::vector<int32_t>& gt, int64_t k) {
    double acc = 0.0;
    for (int64_t c = 0; c <= k; ++c) {
        long long inter = 0, uni = 0;
        for (size_t i = 0; i < pred.size(); ++i) {
            const bool p = pred[i] == c, g = gt[i] == c;
            if (p && g) ++inter;
            if (p || g) ++uni;
        }
        acc += uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni);
    }
    return acc / static_cast<double>(k + 1);
}

inline std::vector<std::pair<int64_t, int64_t>> boundary_oracle(const std::vector<int32_t>& mask, int64_t h,
                                                                int64_t w) {
    std::vector<std::pair<int64_t, int64_t>> pts;
    for (int64_t y = 0; y < h; ++y)
        for (int64_t x = 0; x < w; ++x) {
            if (mask[static_cast<size_t>(y * w + x)] == 0) continue;
            bool edge = y == 0 || y == h - 1 || x == 0 || x == w - 1;
            if (!edge)
                edge = mask[static_cast<size_t>((y - 1) * w + x)] == 0 ||
                       mask[static_cast<size_t>((y + 1) * w + x)] == 0 ||
                       mask[static_cast<size_t>(y * w + x - 1)] == 0 ||
                       mask[static_cast<size_t>(y * w + x + 1)] == 0;
            if (edge) pts.emplace_back(y, x);
        }
    return pts;
}

inline double percentile_oracle(std::vector<double> v, double q) {
    std::sort(v.begin(), v.end());
    if (v.size() == 1) return v[0];
    const double rank = q / 100.0 * static_cast<double>(v.size() - 1);
    const size_t lo = static_cast<size_t>(std::floor(rank));
    const size_t hi = static_cast<size_t>(std::ceil(rank));
    return v[lo] + (v[hi] - v[lo]) * (rank - std::floor(rank));
}

/// max of the q-th percentiles of the two directed min-distance sets,
/// computed by the obvious double loop.
inline std::optional<double> hd_oracle(const std::vector<int32_t>& pred, const std::vector<int32_t>& gt,
                                       int64_t h, int64_t w, double sy, double sx, double q) {
    const auto a = boundary_oracle(pred, h, w);
    const auto b = boundary_oracle(gt, h, w);
    if (a.empty() || b.empty()) return std::nullopt;
    auto directed = [&](const std::vector<std::pair<int64_t, int64_t>>& from,
                        const std::vector<std::pair<int64_t, int64_t>>& to) {
        std::vector<double> d;
        d.reserve(from.size());
        for (const auto& [ya, xa] : from) {
            double best = std::numeric_limits<double>::infinity();
            for (const auto& [yb, xb] : to) {
                const double dy = static_cast<double>(ya - yb) * sy;
                const double dx = static_cast<double>(xa - xb) * sx;
                best = std::min(best, dy * dy + dx * dx);
            }
            d.push_back(std::sqrt(best));
        }
        return d;
    };
    return std::max(percentile_oracle(directed(a, b), q), percentile_oracle(directed(b, a), q));
}

}  // namespace a4::oracle
