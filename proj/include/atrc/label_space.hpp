// Label-space discretization: classification tasks use their classes
// directly, depth uses logarithmic bins with soft-weighted-sum decoding, and
// surface normals use a 40-codeword spherical k-means codebook with
// triangular coding over its convex-hull (spherical Delaunay) facets.
// Geometry runs in double precision regardless of the tensor scalar type.

#pragma once

#include <array>
#include <cstdint>
#include <memory>
#include <optional>
#include <span>

#include "atrc/rng.hpp"
#include "atrc/tensor.hpp"

namespace atrc {

// ---------------------------------------------------------------------------
// depth bins
// ---------------------------------------------------------------------------

struct DepthBinning {
    double d_min = 0.0, d_max = 0.0;
    std::size_t n_bins = 0;
    std::vector<double> edges;    // n_bins + 1, strictly increasing, log-spaced
    std::vector<double> centers;  // geometric mean of adjacent edges
};

inline DepthBinning build_depth_bins(double d_min, double d_max, std::size_t n_bins) {
    if (!(d_min > 0.0) || !(d_max > d_min))
        fail("build_depth_bins", "need 0 < d_min < d_max");
    if (n_bins < 2) fail("build_depth_bins", "need at least 2 bins");
    DepthBinning b{d_min, d_max, n_bins, {}, {}};
    b.edges.resize(n_bins + 1);
    const double ratio = std::pow(d_max / d_min, 1.0 / static_cast<double>(n_bins));
    for (std::size_t i = 0; i <= n_bins; ++i)
        b.edges[i] = d_min * std::pow(ratio, static_cast<double>(i));
    b.edges.front() = d_min;
    b.edges.back() = d_max;
    b.centers.resize(n_bins);
    for (std::size_t i = 0; i < n_bins; ++i)
        b.centers[i] = std::sqrt(b.edges[i] * b.edges[i + 1]);  // log-space midpoint
    return b;
}

// Index of the bin containing `depth`; out-of-range values clamp to the end
// bins.
inline std::size_t depth_to_region(double depth, const DepthBinning& b) {
    if (std::isnan(depth)) fail("depth_to_region", "NaN depth");
    if (depth <= b.edges.front()) return 0;
    if (depth >= b.edges.back()) return b.n_bins - 1;
    auto it = std::upper_bound(b.edges.begin(), b.edges.end(), depth);
    return static_cast<std::size_t>(it - b.edges.begin()) - 1;
}

// Soft-weighted-sum inference: sum of bin centers weighted by prediction
// scores.
inline double depth_soft_weighted_sum(std::span<const double> probs, const DepthBinning& b) {
    if (probs.size() != b.n_bins)
        fail("depth_soft_weighted_sum", "probability count " + std::to_string(probs.size()) +
                                            " != " + std::to_string(b.n_bins));
    double sum = 0.0, acc = 0.0;
    for (std::size_t i = 0; i < probs.size(); ++i) {
        if (probs[i] < -1e-9) fail("depth_soft_weighted_sum", "negative probability");
        sum += probs[i];
        acc += probs[i] * b.centers[i];
    }
    if (std::abs(sum - 1.0) > 1e-5)
        fail("depth_soft_weighted_sum", "probabilities sum to " + std::to_string(sum));
    return acc;
}

// ---------------------------------------------------------------------------
// spherical geometry
// ---------------------------------------------------------------------------

using Vec3 = std::array<double, 3>;

inline double dot3(const Vec3& a, const Vec3& b) { return a[0] * b[0] + a[1] * b[1] + a[2] * b[2]; }
inline Vec3 cross3(const Vec3& a, const Vec3& b) {
    return {a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]};
}
inline Vec3 sub3(const Vec3& a, const Vec3& b) { return {a[0] - b[0], a[1] - b[1], a[2] - b[2]}; }
inline double norm3(const Vec3& a) { return std::sqrt(dot3(a, a)); }
inline Vec3 normalize3(const Vec3& a) {
    const double n = norm3(a);
    if (n < 1e-300) fail("normalize3", "zero vector");
    return {a[0] / n, a[1] / n, a[2] / n};
}

struct Triangle {
    std::array<std::size_t, 3> v;  // outward-oriented vertex indices
};

// Triangular facets of the 3-d convex hull, built incrementally. For points
// on the unit sphere this is the spherical Delaunay cover. Facets are
// outward-oriented and listed in a canonical deterministic order.
inline std::vector<Triangle> convex_hull_sphere(const std::vector<Vec3>& pts) {
    const std::size_t n = pts.size();
    if (n < 4) fail("convex_hull_sphere", "need at least 4 points");

    // initial simplex: spread-out quadruple
    std::size_t i0 = 0, i1 = 0;
    double best = -1.0;
    for (std::size_t i = 1; i < n; ++i) {
        const double d = norm3(sub3(pts[i], pts[i0]));
        if (d > best) {
            best = d;
            i1 = i;
        }
    }
    if (best < 1e-9) fail("convex_hull_sphere", "degenerate input: all points coincide");
    std::size_t i2 = 0;
    best = -1.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double a = norm3(cross3(sub3(pts[i1], pts[i0]), sub3(pts[i], pts[i0])));
        if (a > best) {
            best = a;
            i2 = i;
        }
    }
    if (best < 1e-9) fail("convex_hull_sphere", "degenerate input: points are collinear");
    const Vec3 plane_n = cross3(sub3(pts[i1], pts[i0]), sub3(pts[i2], pts[i0]));
    std::size_t i3 = 0;
    best = -1.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double v = std::abs(dot3(plane_n, sub3(pts[i], pts[i0])));
        if (v > best) {
            best = v;
            i3 = i;
        }
    }
    if (best < 1e-9) fail("convex_hull_sphere", "degenerate input: points are coplanar");

    // Orientation reference: the initial tetrahedron's centroid is strictly
    // interior to every intermediate hull, so no facet plane ever contains it
    // (the centroid of all points can lie on a facet plane for symmetric
    // inputs like the octahedron).
    Vec3 centroid{0, 0, 0};
    for (std::size_t i : {i0, i1, i2, i3})
        for (int c = 0; c < 3; ++c) centroid[c] += pts[i][c] / 4.0;

    struct Facet {
        std::array<std::size_t, 3> v;
        Vec3 normal;
        double offset;  // dot(normal, vertex)
    };
    auto make_facet = [&](std::size_t a, std::size_t b, std::size_t c) {
        Facet f{{a, b, c}, cross3(sub3(pts[b], pts[a]), sub3(pts[c], pts[a])), 0.0};
        if (dot3(f.normal, sub3(centroid, pts[a])) > 0.0) {
            std::swap(f.v[1], f.v[2]);
            f.normal = {-f.normal[0], -f.normal[1], -f.normal[2]};
        }
        f.offset = dot3(f.normal, pts[f.v[0]]);
        return f;
    };

    std::vector<Facet> facets{make_facet(i0, i1, i2), make_facet(i0, i1, i3),
                              make_facet(i0, i2, i3), make_facet(i1, i2, i3)};

    const double eps = 1e-12;
    for (std::size_t p = 0; p < n; ++p) {
        if (p == i0 || p == i1 || p == i2 || p == i3) continue;
        std::vector<std::size_t> visible;
        for (std::size_t f = 0; f < facets.size(); ++f)
            if (dot3(facets[f].normal, pts[p]) - facets[f].offset > eps) visible.push_back(f);
        if (visible.empty()) continue;  // inside (duplicate or interior point)

        // horizon = directed edges of visible facets whose reverse is not
        // among the visible facets' edges
        std::vector<std::pair<std::size_t, std::size_t>> edges;
        for (std::size_t f : visible) {
            const auto& v = facets[f].v;
            edges.emplace_back(v[0], v[1]);
            edges.emplace_back(v[1], v[2]);
            edges.emplace_back(v[2], v[0]);
        }
        std::vector<std::pair<std::size_t, std::size_t>> horizon;
        for (const auto& e : edges) {
            bool internal = false;
            for (const auto& r : edges)
                if (r.first == e.second && r.second == e.first) {
                    internal = true;
                    break;
                }
            if (!internal) horizon.push_back(e);
        }

        std::sort(visible.rbegin(), visible.rend());
        for (std::size_t f : visible) facets.erase(facets.begin() + static_cast<long>(f));
        for (const auto& e : horizon) facets.push_back(make_facet(e.first, e.second, p));
    }

    // canonical ordering: rotate each triple so the smallest index leads
    // (keeping orientation), then sort facets lexicographically
    std::vector<Triangle> out;
    out.reserve(facets.size());
    for (const auto& f : facets) {
        std::array<std::size_t, 3> v = f.v;
        while (!(v[0] < v[1] && v[0] < v[2])) {
            const std::size_t t = v[0];
            v[0] = v[1];
            v[1] = v[2];
            v[2] = t;
        }
        out.push_back({v});
    }
    std::sort(out.begin(), out.end(), [](const Triangle& a, const Triangle& b) { return a.v < b.v; });
    return out;
}

// ---------------------------------------------------------------------------
// normal codebook
// ---------------------------------------------------------------------------

struct NormalCodebook {
    std::vector<Vec3> codewords;      // unit vectors
    std::vector<Triangle> triangles;  // hull cover of the codewords
};

inline std::size_t nearest_codeword(const Vec3& n, const std::vector<Vec3>& codewords) {
    std::size_t best = 0;
    double best_cos = -2.0;
    for (std::size_t i = 0; i < codewords.size(); ++i) {
        const double c = dot3(n, codewords[i]);
        if (c > best_cos) {
            best_cos = c;
            best = i;
        }
    }
    return best;
}

// Spherical k-means: cosine assignment, renormalized-mean update, empty
// clusters reseeded from the globally worst-represented point. Runs at most
// `max_iter` rounds or until the assignment stabilizes. The optional trace
// records the mean cosine objective after every update.
inline NormalCodebook fit_normal_codebook(const std::vector<Vec3>& normals, std::size_t k = 40,
                                          std::uint64_t seed = 0, std::size_t max_iter = 50,
                                          std::vector<double>* objective_trace = nullptr) {
    if (normals.size() < k)
        fail("fit_normal_codebook", "need at least k=" + std::to_string(k) + " inputs");
    // require k distinct inputs
    std::vector<Vec3> distinct;
    for (const auto& p : normals) {
        bool seen = false;
        for (const auto& q : distinct)
            if (norm3(sub3(p, q)) < 1e-9) {
                seen = true;
                break;
            }
        if (!seen) {
            distinct.push_back(p);
            if (distinct.size() >= k) break;
        }
    }
    if (distinct.size() < k)
        fail("fit_normal_codebook", "degenerate input: fewer than k distinct normals");

    CounterRng rng(seed, {rng_stream::kKmeans});
    // init: random draw of k distinct input points
    std::vector<Vec3> centers;
    std::vector<std::size_t> taken;
    while (centers.size() < k) {
        const std::size_t i = static_cast<std::size_t>(rng.below(normals.size()));
        bool dup = false;
        for (std::size_t t : taken)
            if (norm3(sub3(normals[i], normals[t])) < 1e-9) {
                dup = true;
                break;
            }
        if (!dup) {
            taken.push_back(i);
            centers.push_back(normals[i]);
        }
    }

    std::vector<std::size_t> assign(normals.size(), 0);
    for (std::size_t iter = 0; iter < max_iter; ++iter) {
        bool changed = false;
        for (std::size_t i = 0; i < normals.size(); ++i) {
            const std::size_t a = nearest_codeword(normals[i], centers);
            if (a != assign[i]) changed = true;
            assign[i] = a;
        }
        if (iter > 0 && !changed) break;

        std::vector<Vec3> sums(k, Vec3{0, 0, 0});
        std::vector<std::size_t> counts(k, 0);
        for (std::size_t i = 0; i < normals.size(); ++i) {
            for (int c = 0; c < 3; ++c) sums[assign[i]][c] += normals[i][c];
            ++counts[assign[i]];
        }
        for (std::size_t c = 0; c < k; ++c) {
            if (counts[c] == 0 || norm3(sums[c]) < 1e-12) {
                // reseed from the point farthest from its codeword
                std::size_t worst = 0;
                double worst_cos = 2.0;
                for (std::size_t i = 0; i < normals.size(); ++i) {
                    const double cs = dot3(normals[i], centers[assign[i]]);
                    if (cs < worst_cos) {
                        worst_cos = cs;
                        worst = i;
                    }
                }
                centers[c] = normals[worst];
                assign[worst] = c;
            } else {
                centers[c] = normalize3(sums[c]);
            }
        }
        if (objective_trace) {
            double obj = 0.0;
            for (std::size_t i = 0; i < normals.size(); ++i)
                obj += dot3(normals[i], centers[nearest_codeword(normals[i], centers)]);
            objective_trace->push_back(obj / static_cast<double>(normals.size()));
        }
    }

    NormalCodebook book;
    book.codewords = std::move(centers);
    if (k >= 4) book.triangles = convex_hull_sphere(book.codewords);
    return book;
}

namespace detail {

// Barycentric weights of the central projection of `n` onto the facet plane:
// solve [A B C] w = n. Returns false when the facet is degenerate or the
// solution is on the wrong side.
inline bool facet_weights(const Vec3& n, const Vec3& a, const Vec3& b, const Vec3& c, Vec3& w) {
    const double det = a[0] * (b[1] * c[2] - b[2] * c[1]) - b[0] * (a[1] * c[2] - a[2] * c[1]) +
                       c[0] * (a[1] * b[2] - a[2] * b[1]);
    if (std::abs(det) < 1e-12) return false;
    // Cramer's rule on columns [a b c]
    auto det3 = [](const Vec3& x, const Vec3& y, const Vec3& z) {
        return x[0] * (y[1] * z[2] - y[2] * z[1]) - y[0] * (x[1] * z[2] - x[2] * z[1]) +
               z[0] * (x[1] * y[2] - x[2] * y[1]);
    };
    w[0] = det3(n, b, c) / det;
    w[1] = det3(a, n, c) / det;
    w[2] = det3(a, b, n) / det;
    const double sum = w[0] + w[1] + w[2];
    if (sum <= 1e-12) return false;  // facet on the far side of the sphere
    w[0] /= sum;
    w[1] /= sum;
    w[2] /= sum;
    return true;
}

}  // namespace detail

// Triangular coding: weights of the (at most) three codewords spanning the
// hull facet whose cone contains n; clamped to >= 0 and renormalized. Falls
// back to the least-violating facet when no cone contains n numerically.
inline std::vector<double> encode_normal_triangular(const Vec3& n_raw, const NormalCodebook& book) {
    const Vec3 n = normalize3(n_raw);
    const std::size_t k = book.codewords.size();
    std::vector<double> weights(k, 0.0);

    std::size_t best_facet = book.triangles.size();
    double best_min_w = -1e300;
    Vec3 best_w{0, 0, 0};
    for (std::size_t f = 0; f < book.triangles.size(); ++f) {
        const auto& t = book.triangles[f].v;
        Vec3 w;
        if (!detail::facet_weights(n, book.codewords[t[0]], book.codewords[t[1]],
                                   book.codewords[t[2]], w))
            continue;
        const double min_w = std::min({w[0], w[1], w[2]});
        if (min_w > best_min_w) {
            best_min_w = min_w;
            best_facet = f;
            best_w = w;
            if (min_w >= -1e-12) break;  // containing facet found (facets scanned in canonical order)
        }
    }
    if (best_facet == book.triangles.size())
        fail("encode_normal_triangular", "no facet admits a projection for this normal");

    const auto& t = book.triangles[best_facet].v;
    double sum = 0.0;
    for (int i = 0; i < 3; ++i) {
        best_w[i] = std::max(best_w[i], 0.0);
        sum += best_w[i];
    }
    if (sum <= 0.0) fail("encode_normal_triangular", "degenerate facet weights");
    for (int i = 0; i < 3; ++i) weights[t[i]] += best_w[i] / sum;
    return weights;
}

// Decoding per the two-step rule: pick the facet with the highest total
// probability (ties resolved toward the lowest facet index), renormalize its
// three vertex probabilities, reconstruct and renormalize to unit length.
inline Vec3 decode_normal(std::span<const double> probs, const NormalCodebook& book) {
    if (probs.size() != book.codewords.size())
        fail("decode_normal", "probability count mismatch");
    double total = 0.0;
    for (double p : probs) {
        if (p < -1e-12) fail("decode_normal", "negative probability");
        total += p;
    }
    if (total <= 0.0) fail("decode_normal", "all-zero probabilities");

    std::size_t best_facet = 0;
    double best_score = -1.0;
    for (std::size_t f = 0; f < book.triangles.size(); ++f) {
        const auto& t = book.triangles[f].v;
        const double score = probs[t[0]] + probs[t[1]] + probs[t[2]];
        if (score > best_score) {
            best_score = score;
            best_facet = f;
        }
    }
    const auto& t = book.triangles[best_facet].v;
    const double denom = best_score;
    if (denom <= 0.0) fail("decode_normal", "selected facet has zero mass");
    Vec3 out{0, 0, 0};
    for (int i = 0; i < 3; ++i) {
        const double w = probs[t[i]] / denom;
        for (int c = 0; c < 3; ++c) out[c] += w * book.codewords[t[i]][c];
    }
    return normalize3(out);
}

// ---------------------------------------------------------------------------
// label region specs and ground-truth region maps
// ---------------------------------------------------------------------------

enum class RegionKind { kClass, kDepthBin, kNormalCodeword };

struct LabelRegionSpec {
    std::string task;
    RegionKind kind = RegionKind::kClass;
    std::size_t regions = 1;
    std::optional<DepthBinning> binning;              // kDepthBin
    std::shared_ptr<const NormalCodebook> codebook;   // kNormalCodeword
};

// One-hot region membership per pixel, [L, R].
template <typename T>
TensorT<T> regions_from_gt_classes(std::span<const std::int32_t> labels, std::size_t n_classes) {
    TensorT<T> out({labels.size(), n_classes});
    for (std::size_t l = 0; l < labels.size(); ++l) {
        if (labels[l] < 0 || static_cast<std::size_t>(labels[l]) >= n_classes)
            fail("regions_from_gt", "class label " + std::to_string(labels[l]) + " outside [0," +
                                        std::to_string(n_classes) + ")");
        out.at({l, static_cast<std::size_t>(labels[l])}) = T(1);
    }
    return out;
}

template <typename T>
TensorT<T> regions_from_gt_depth(std::span<const double> depth, const DepthBinning& binning) {
    TensorT<T> out({depth.size(), binning.n_bins});
    for (std::size_t l = 0; l < depth.size(); ++l)
        out.at({l, depth_to_region(depth[l], binning)}) = T(1);
    return out;
}

template <typename T>
TensorT<T> regions_from_gt_normals(std::span<const Vec3> normals, const NormalCodebook& book) {
    TensorT<T> out({normals.size(), book.codewords.size()});
    for (std::size_t l = 0; l < normals.size(); ++l)
        out.at({l, nearest_codeword(normals[l], book.codewords)}) = T(1);
    return out;
}

}  // namespace atrc
