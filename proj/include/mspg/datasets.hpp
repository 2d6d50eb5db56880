#pragma once
// Desk-scale data: a Gaussian ring of modes for collapse testing, procedural
// grayscale shapes, and a cleaning ingestion path for binary PGM directories.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "mspg/common.hpp"
#include "mspg/rng.hpp"
#include "mspg/tensor.hpp"

namespace mspg {

struct RingSpec {
    std::size_t modes = 8;
    double radius = 2.0;
    double sigma = 0.02;
};

inline std::vector<std::array<double, 2>> ring_centers(const RingSpec& spec) {
    if (spec.modes < 2) fail("ring: needs at least 2 modes");
    std::vector<std::array<double, 2>> c(spec.modes);
    for (std::size_t m = 0; m < spec.modes; ++m) {
        double a = 2.0 * 3.14159265358979323846 * double(m) / double(spec.modes);
        c[m] = {spec.radius * std::cos(a), spec.radius * std::sin(a)};
    }
    return c;
}

// n points, mode index uniform, isotropic Gaussian around each center.
template <typename T>
Tensor<T> generate_ring(std::size_t n, const RingSpec& spec, Rng& rng) {
    if (n < 1) fail("ring: n must be >= 1");
    auto centers = ring_centers(spec);
    std::vector<T> vals(n * 2);
    for (std::size_t i = 0; i < n; ++i) {
        std::size_t m = std::size_t(rng.below(spec.modes));
        vals[i * 2] = T(centers[m][0] + spec.sigma * rng.normal());
        vals[i * 2 + 1] = T(centers[m][1] + spec.sigma * rng.normal());
    }
    return Tensor<T>::from({n, 2}, vals);
}

template <typename T>
std::vector<std::array<double, 2>> points_of(const Tensor<T>& t) {
    if (t.rank() != 2 || t.shape()[1] != 2)
        fail("points: expected [N,2], got " + shape_str(t.shape()));
    std::vector<std::array<double, 2>> out(t.shape()[0]);
    for (std::size_t i = 0; i < out.size(); ++i)
        out[i] = {double(t.values()[i * 2]), double(t.values()[i * 2 + 1])};
    return out;
}

struct Coverage {
    std::size_t covered = 0;
    double hq = 0.0;       // fraction of samples within the radius of any center
    double quality = 0.0;  // covered/modes * hq
};

// A mode counts as covered once max(1, n/(10*modes)) samples land within
// 30*sigma of its center.
inline Coverage mode_coverage(const std::vector<std::array<double, 2>>& pts,
                              const RingSpec& spec) {
    auto centers = ring_centers(spec);
    double r = 3.0 * spec.sigma * 10.0;
    double r2 = r * r;
    std::vector<std::size_t> counts(spec.modes, 0);
    std::size_t near_any = 0;
    for (const auto& p : pts) {
        bool any = false;
        for (std::size_t m = 0; m < spec.modes; ++m) {
            double dx = p[0] - centers[m][0], dy = p[1] - centers[m][1];
            if (dx * dx + dy * dy <= r2) {
                ++counts[m];
                any = true;
            }
        }
        if (any) ++near_any;
    }
    Coverage cov;
    if (pts.empty()) return cov;
    std::size_t need = std::max<std::size_t>(1, pts.size() / (10 * spec.modes));
    for (std::size_t m = 0; m < spec.modes; ++m)
        if (counts[m] >= need) ++cov.covered;
    cov.hq = double(near_any) / double(pts.size());
    cov.quality = double(cov.covered) / double(spec.modes) * cov.hq;
    return cov;
}

// Procedural 16x16-style grayscale shapes in [-1,1]: 0 square, 1 circle, 2 cross.
template <typename T>
struct ShapesBatch {
    Tensor<T> images;  // [n,1,S,S]
    std::vector<int> labels;
};

template <typename T>
ShapesBatch<T> shapes_batch(std::size_t n, std::size_t size, Rng& rng) {
    if (n < 1) fail("shapes: n must be >= 1");
    if (size < 8) fail("shapes: size must be >= 8");
    std::vector<T> vals(n * size * size, T(-1));
    std::vector<int> labels(n);
    for (std::size_t i = 0; i < n; ++i) {
        int label = int(rng.below(3));
        labels[i] = label;
        long h = 2 + long(rng.below(std::uint64_t(size / 4 - 1)));
        long cx = h + long(rng.below(std::uint64_t(size - 2 * std::size_t(h))));
        long cy = h + long(rng.below(std::uint64_t(size - 2 * std::size_t(h))));
        T* img = vals.data() + i * size * size;
        for (long y = 0; y < long(size); ++y)
            for (long x = 0; x < long(size); ++x) {
                long dx = x - cx, dy = y - cy;
                bool on = false;
                if (label == 0) on = std::labs(dx) <= h && std::labs(dy) <= h;
                else if (label == 1) on = dx * dx + dy * dy <= h * h;
                else on = (std::labs(dx) <= 1 && std::labs(dy) <= h) ||
                          (std::labs(dy) <= 1 && std::labs(dx) <= h);
                if (on) img[y * long(size) + x] = T(1);
            }
    }
    return {Tensor<T>::from({n, 1, size, size}, vals), labels};
}

struct PgmImage {
    std::size_t width = 0, height = 0;
    std::vector<std::uint8_t> pixels;
};

// Binary PGM (P5) with up to 255 gray levels; returns nullopt on any defect.
inline std::optional<PgmImage> parse_pgm(const std::string& bytes) {
    std::size_t pos = 0;
    auto next_token = [&]() -> std::optional<std::string> {
        while (pos < bytes.size()) {
            char ch = bytes[pos];
            if (ch == '#') {
                while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
            } else if (ch == ' ' || ch == '\t' || ch == '\r' || ch == '\n') {
                ++pos;
            } else {
                break;
            }
        }
        if (pos >= bytes.size()) return std::nullopt;
        std::size_t start = pos;
        while (pos < bytes.size() && !std::isspace(static_cast<unsigned char>(bytes[pos])) &&
               bytes[pos] != '#')
            ++pos;
        return bytes.substr(start, pos - start);
    };
    auto magic = next_token();
    if (!magic || *magic != "P5") return std::nullopt;
    long dims[3];
    for (long& d : dims) {
        auto tok = next_token();
        if (!tok) return std::nullopt;
        char* end = nullptr;
        d = std::strtol(tok->c_str(), &end, 10);
        if (end != tok->c_str() + tok->size() || d <= 0) return std::nullopt;
    }
    if (dims[2] > 255) return std::nullopt;
    if (pos >= bytes.size()) return std::nullopt;
    ++pos;  // single whitespace byte after maxval
    std::size_t need = std::size_t(dims[0]) * std::size_t(dims[1]);
    if (bytes.size() - pos < need) return std::nullopt;
    PgmImage img;
    img.width = std::size_t(dims[0]);
    img.height = std::size_t(dims[1]);
    img.pixels.assign(bytes.begin() + long(pos), bytes.begin() + long(pos) + long(need));
    // normalize to the 255 range so rescaling is uniform downstream
    if (dims[2] != 255)
        for (auto& p : img.pixels)
            p = std::uint8_t((int(p) * 255) / int(dims[2]));
    return img;
}

inline std::string write_pgm(std::size_t w, std::size_t h, const std::vector<std::uint8_t>& pix) {
    if (pix.size() != w * h) fail("pgm: pixel count does not match dimensions");
    std::string out = "P5\n" + std::to_string(w) + " " + std::to_string(h) + "\n255\n";
    out.append(reinterpret_cast<const char*>(pix.data()), pix.size());
    return out;
}

template <typename T>
struct IngestResult {
    Tensor<T> images;  // [N,1,S,S] in [-1,1]
    std::size_t kept = 0;
    std::size_t cleaned = 0;  // files skipped by the parse/size checks
};

// Reads every regular file in the directory (sorted by name), center-crops to
// size x size, rescales to [-1,1]; defective files are counted and skipped.
template <typename T>
IngestResult<T> ingest_images(const std::string& dir, std::size_t size) {
    namespace fs = std::filesystem;
    std::error_code ec;
    if (!fs::is_directory(dir, ec)) fail("ingest: '" + dir + "' is not a directory");
    std::vector<std::string> paths;
    for (const auto& entry : fs::directory_iterator(dir))
        if (entry.is_regular_file()) paths.push_back(entry.path().string());
    if (paths.empty()) fail("ingest: no files in '" + dir + "'");
    std::sort(paths.begin(), paths.end());

    IngestResult<T> out;
    std::vector<T> vals;
    for (const auto& p : paths) {
        std::ifstream in(p, std::ios::binary);
        std::ostringstream ss;
        ss << in.rdbuf();
        auto img = parse_pgm(ss.str());
        if (!img || img->width < size || img->height < size) {
            ++out.cleaned;
            continue;
        }
        std::size_t offx = (img->width - size) / 2, offy = (img->height - size) / 2;
        for (std::size_t y = 0; y < size; ++y)
            for (std::size_t x = 0; x < size; ++x) {
                double v = img->pixels[(offy + y) * img->width + (offx + x)];
                vals.push_back(T(v / 127.5 - 1.0));
            }
        ++out.kept;
    }
    if (out.kept == 0) fail("ingest: no valid images in '" + dir + "'");
    out.images = Tensor<T>::from({out.kept, 1, size, size}, vals);
    return out;
}

}  // namespace mspg
