// Binary PGM (P5) and PPM (P6) writers, 8-bit. Output bytes are a pure
// function of the input, which the export tests rely on.

#pragma once

#include <cmath>
#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

namespace atrc {

inline void write_pgm(const std::string& path, std::size_t width, std::size_t height,
                      const std::vector<std::uint8_t>& gray) {
    if (gray.size() != width * height)
        throw std::invalid_argument("write_pgm: pixel count mismatch for '" + path + "'");
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw std::runtime_error("write_pgm: cannot open '" + path + "'");
    os << "P5\n" << width << " " << height << "\n255\n";
    os.write(reinterpret_cast<const char*>(gray.data()), static_cast<std::streamsize>(gray.size()));
    if (!os) throw std::runtime_error("write_pgm: write failed for '" + path + "'");
}

inline void write_ppm(const std::string& path, std::size_t width, std::size_t height,
                      const std::vector<std::uint8_t>& rgb) {
    if (rgb.size() != width * height * 3)
        throw std::invalid_argument("write_ppm: pixel count mismatch for '" + path + "'");
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw std::runtime_error("write_ppm: cannot open '" + path + "'");
    os << "P6\n" << width << " " << height << "\n255\n";
    os.write(reinterpret_cast<const char*>(rgb.data()), static_cast<std::streamsize>(rgb.size()));
    if (!os) throw std::runtime_error("write_ppm: write failed for '" + path + "'");
}

inline std::uint8_t to_byte(double v01) {
    const double v = v01 < 0.0 ? 0.0 : (v01 > 1.0 ? 1.0 : v01);
    return static_cast<std::uint8_t>(std::lround(v * 255.0));
}

// Min-max normalization to bytes; a constant map renders as mid-gray (0.5).
template <typename T>
std::vector<std::uint8_t> normalize_to_bytes(const std::vector<T>& values) {
    std::vector<std::uint8_t> out(values.size());
    if (values.empty()) return out;
    T lo = values[0], hi = values[0];
    for (T v : values) {
        lo = std::min(lo, v);
        hi = std::max(hi, v);
    }
    if (static_cast<double>(hi - lo) < 1e-20) {
        std::fill(out.begin(), out.end(), to_byte(0.5));
        return out;
    }
    const double inv = 1.0 / static_cast<double>(hi - lo);
    for (std::size_t i = 0; i < values.size(); ++i)
        out[i] = to_byte(static_cast<double>(values[i] - lo) * inv);
    return out;
}

inline std::vector<std::uint8_t> read_file_bytes(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("read_file_bytes: cannot open '" + path + "'");
    return std::vector<std::uint8_t>((std::istreambuf_iterator<char>(is)),
                                     std::istreambuf_iterator<char>());
}

}  // namespace atrc
