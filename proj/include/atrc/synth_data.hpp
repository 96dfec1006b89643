// Procedural multi-task scenes: tilted planar shapes (circle, rectangle,
// triangle) over a flat background give mutually consistent semantic,
// depth, surface-normal, and boundary labels. Every sample is a pure
// function of (seed, index); train/test splits use disjoint index bases.

#pragma once

#include <cstdint>
#include <filesystem>

#include "atrc/image_io.hpp"
#include "atrc/rng.hpp"
#include "atrc/tensor.hpp"

namespace atrc {

inline constexpr std::size_t kNumClasses = 4;  // background + 3 shape kinds

struct SceneSpec {
    std::size_t height = 32;
    std::size_t width = 32;
    std::size_t min_shapes = 1;
    std::size_t max_shapes = 4;
    double depth_min = 1.0;   // nominal range; all rendered depths stay inside
    double depth_max = 8.0;
    double noise_sigma = 0.02;
    std::uint64_t seed = 1;
};

struct Sample {
    std::size_t height = 0, width = 0;
    std::vector<float> image;          // [3,H,W] in [0,1]
    std::vector<std::int32_t> semseg;  // [H,W] class indices
    std::vector<float> depth;          // [H,W]
    std::vector<float> normals;        // [3,H,W], unit per pixel
    std::vector<float> boundary;       // [H,W] in {0,1}
};

enum class Split { kTrain, kTest };

inline std::uint64_t split_index_base(Split s) {
    return s == Split::kTrain ? 0ULL : (1ULL << 32);
}

namespace detail {

struct PlacedShape {
    int kind = 1;  // class index 1..3
    double cx = 0, cy = 0;
    double size = 0;                  // radius / half extent
    double z0 = 0, gx = 0, gy = 0;    // tilted depth plane
    double tri_rot = 0;               // triangle orientation
    std::array<double, 3> albedo{};

    bool contains(double x, double y) const {
        const double dx = x - cx, dy = y - cy;
        switch (kind) {
            case 1: return dx * dx + dy * dy <= size * size;
            case 2: return std::abs(dx) <= size && std::abs(dy) <= size * 0.8;
            default: {
                // triangle via three half-plane tests around the center
                std::array<double, 3> vx, vy;
                for (int i = 0; i < 3; ++i) {
                    const double a = tri_rot + i * 2.0943951023931953;  // 2*pi/3
                    vx[i] = std::cos(a) * size * 1.2;
                    vy[i] = std::sin(a) * size * 1.2;
                }
                for (int i = 0; i < 3; ++i) {
                    const int j = (i + 1) % 3;
                    const double ex = vx[j] - vx[i], ey = vy[j] - vy[i];
                    if (ex * (dy - vy[i]) - ey * (dx - vx[i]) < 0.0) return false;
                }
                return true;
            }
        }
    }

    double depth_at(double x, double y) const { return z0 + gx * (x - cx) + gy * (y - cy); }
};

}  // namespace detail

// Deterministic scene rendering: shapes painted back to front, each a tilted
// plane with analytic depth and normals; image is albedo shaded by
// normal.light plus Gaussian pixel noise.
inline Sample generate_sample(const SceneSpec& spec, std::uint64_t index) {
    const std::size_t H = spec.height, W = spec.width, L = H * W;
    CounterRng rng(spec.seed, {rng_stream::kScene, index});

    const std::size_t n_shapes =
        spec.min_shapes + (spec.max_shapes > spec.min_shapes
                               ? rng.below(spec.max_shapes - spec.min_shapes + 1)
                               : 0);
    std::vector<detail::PlacedShape> shapes(n_shapes);
    const double extent = static_cast<double>(std::min(H, W));
    for (auto& s : shapes) {
        s.kind = 1 + static_cast<int>(rng.below(3));
        s.cx = rng.uniform(0.15, 0.85) * static_cast<double>(W);
        s.cy = rng.uniform(0.15, 0.85) * static_cast<double>(H);
        s.size = rng.uniform(0.12, 0.30) * extent;
        // class-dependent depth bands keep the tasks mutually informative
        const double band_lo = 2.0 + 1.6 * (s.kind - 1);
        s.z0 = rng.uniform(band_lo, band_lo + 1.4);
        // tilt bounded so the plane stays inside the nominal depth range
        const double tilt_cap = 0.04 * extent / std::max(s.size, 1.0);
        const double cap = std::min(0.08, tilt_cap / extent * 8.0);
        s.gx = rng.uniform(-cap, cap);
        s.gy = rng.uniform(-cap, cap);
        s.tri_rot = rng.uniform(0.0, 6.283185307179586);
        const double base = 0.3 + 0.25 * s.kind;
        for (int c = 0; c < 3; ++c)
            s.albedo[c] = std::clamp((c == s.kind - 1 ? base : 0.38) + rng.uniform(-0.12, 0.12), 0.05, 0.95);
    }
    // painter's order: far planes first
    std::stable_sort(shapes.begin(), shapes.end(),
                     [](const auto& a, const auto& b) { return a.z0 > b.z0; });

    Sample out;
    out.height = H;
    out.width = W;
    out.image.assign(3 * L, 0.f);
    out.semseg.assign(L, 0);
    out.depth.assign(L, static_cast<float>(spec.depth_max));
    out.normals.assign(3 * L, 0.f);
    out.boundary.assign(L, 0.f);

    const std::array<double, 3> light = {0.37139068, -0.27854301, 0.88567694};  // unit
    const std::array<double, 3> bg_albedo = {0.45, 0.45, 0.45};

    for (std::size_t y = 0; y < H; ++y)
        for (std::size_t x = 0; x < W; ++x) {
            const std::size_t i = y * W + x;
            const double px = static_cast<double>(x) + 0.5, py = static_cast<double>(y) + 0.5;
            int cls = 0;
            double depth = spec.depth_max;
            std::array<double, 3> normal = {0.0, 0.0, 1.0};
            std::array<double, 3> albedo = bg_albedo;
            for (const auto& s : shapes) {
                if (!s.contains(px, py)) continue;
                cls = s.kind;
                depth = std::clamp(s.depth_at(px, py), spec.depth_min, spec.depth_max);
                const double nn = std::sqrt(s.gx * s.gx + s.gy * s.gy + 1.0);
                normal = {-s.gx / nn, -s.gy / nn, 1.0 / nn};
                albedo = s.albedo;
            }
            out.semseg[i] = cls;
            out.depth[i] = static_cast<float>(depth);
            for (int c = 0; c < 3; ++c) out.normals[c * L + i] = static_cast<float>(normal[c]);
            const double lambert =
                std::max(0.0, normal[0] * light[0] + normal[1] * light[1] + normal[2] * light[2]);
            const double shade = 0.35 + 0.65 * lambert;
            for (int c = 0; c < 3; ++c)
                out.image[c * L + i] = static_cast<float>(std::clamp(albedo[c] * shade, 0.0, 1.0));
        }

    // boundary = 8-neighborhood label transitions
    for (std::size_t y = 0; y < H; ++y)
        for (std::size_t x = 0; x < W; ++x) {
            const std::int32_t c = out.semseg[y * W + x];
            bool edge = false;
            for (int dy = -1; dy <= 1 && !edge; ++dy)
                for (int dx = -1; dx <= 1; ++dx) {
                    if (dy == 0 && dx == 0) continue;
                    const long yy = static_cast<long>(y) + dy, xx = static_cast<long>(x) + dx;
                    if (yy < 0 || yy >= static_cast<long>(H) || xx < 0 || xx >= static_cast<long>(W))
                        continue;
                    if (out.semseg[static_cast<std::size_t>(yy) * W + static_cast<std::size_t>(xx)] != c) {
                        edge = true;
                        break;
                    }
                }
            out.boundary[y * W + x] = edge ? 1.f : 0.f;
        }

    // pixel noise last so the label maps stay exact
    for (std::size_t i = 0; i < 3 * L; ++i)
        out.image[i] = static_cast<float>(
            std::clamp(static_cast<double>(out.image[i]) + spec.noise_sigma * rng.normal(), 0.0, 1.0));
    return out;
}

inline std::vector<Sample> make_dataset(const SceneSpec& spec, std::size_t count, Split split) {
    std::vector<Sample> out;
    out.reserve(count);
    const std::uint64_t base = split_index_base(split);
    for (std::size_t i = 0; i < count; ++i) out.push_back(generate_sample(spec, base + i));
    return out;
}

// PPM image plus one PGM per label map, with documented scalings:
// semseg class c -> c*255/(classes-1); depth d_min..d_max -> 0..255;
// normal components -1..1 -> 0..255; boundary 0/1 -> 0/255.
inline void export_sample_images(const Sample& s, const SceneSpec& spec, const std::string& dir,
                                 const std::string& stem) {
    namespace fs = std::filesystem;
    fs::create_directories(dir);
    const std::size_t L = s.height * s.width;

    std::vector<std::uint8_t> rgb(3 * L);
    for (std::size_t i = 0; i < L; ++i)
        for (int c = 0; c < 3; ++c) rgb[i * 3 + c] = to_byte(s.image[c * L + i]);
    write_ppm(dir + "/" + stem + "_image.ppm", s.width, s.height, rgb);

    std::vector<std::uint8_t> gray(L);
    for (std::size_t i = 0; i < L; ++i)
        gray[i] = static_cast<std::uint8_t>(s.semseg[i] * 255 / (kNumClasses - 1));
    write_pgm(dir + "/" + stem + "_semseg.pgm", s.width, s.height, gray);

    for (std::size_t i = 0; i < L; ++i)
        gray[i] = to_byte((s.depth[i] - spec.depth_min) / (spec.depth_max - spec.depth_min));
    write_pgm(dir + "/" + stem + "_depth.pgm", s.width, s.height, gray);

    const char* axes = "xyz";
    for (int c = 0; c < 3; ++c) {
        for (std::size_t i = 0; i < L; ++i) gray[i] = to_byte(0.5 * (s.normals[c * L + i] + 1.0));
        write_pgm(dir + "/" + stem + "_normal_" + axes[c] + ".pgm", s.width, s.height, gray);
    }

    for (std::size_t i = 0; i < L; ++i) gray[i] = s.boundary[i] > 0.5f ? 255 : 0;
    write_pgm(dir + "/" + stem + "_boundary.pgm", s.width, s.height, gray);
}

}  // namespace atrc
