// Synthetic stereo data, disparity file I/O and evaluation metrics.
//
// Stereograms are random-dot pairs over a layered disparity field. The right
// image is i.i.d. noise; the left image is sampled from it along the ground
// truth warp (linear interpolation for sub-pixel disparities), so
// right(x - d(x)) reconstructs left(x) exactly wherever both interpolation
// taps see the same scene layer. Pixels that fail that visibility test are
// occluded and receive fresh noise.

#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "spex/tensor.hpp"

namespace spex {

// ---------------------------------------------------------------------------
// Disparity field generation
// ---------------------------------------------------------------------------

// One scene layer. Disparity is a plane d(x,y) = a + b*x + c*y evaluated in
// left-image coordinates; constant regions have b = c = 0.
struct RegionSpec {
    enum class Kind { background, rect, ellipse };
    Kind kind = Kind::background;
    double x0 = 0, y0 = 0, x1 = 0, y1 = 0;  // rect bounds (inclusive, continuous)
    double cx = 0, cy = 0, rx = 1, ry = 1;  // ellipse
    double a = 0, b = 0, c = 0;

    bool contains(double x, double y) const {
        switch (kind) {
            case Kind::background: return true;
            case Kind::rect: return x >= x0 && x <= x1 && y >= y0 && y <= y1;
            case Kind::ellipse: {
                double dx = (x - cx) / rx, dy = (y - cy) / ry;
                return dx * dx + dy * dy <= 1.0;
            }
        }
        return false;
    }

    double disparity(double x, double y) const { return a + b * x + c * y; }
};

// Piecewise planar disparity map plus the layer structure it came from.
struct DisparityField {
    int h = 0, w = 0;
    std::vector<double> values;      // h*w
    std::vector<int> layer;          // h*w, index into regions
    std::vector<RegionSpec> regions; // far to near
};

struct StereoSample {
    int h = 0, w = 0;
    std::vector<double> left, right;   // 3*h*w in [0,1], channel-major
    std::vector<double> d_gt;          // h*w
    std::vector<uint8_t> valid;        // h*w
    std::vector<uint8_t> occlusion;    // h*w
    DisparityField field;
};

struct GenOptions {
    bool allow_half = true;    // half-integer constant disparities
    bool allow_planar = false; // sloped (affine) region disparities
};

namespace detail {

// Left x whose layer warp lands on right column xr: x - d(x,y) = xr.
inline bool inverse_warp_x(const RegionSpec& r, double xr, double y, double& x_out) {
    double denom = 1.0 - r.b;
    if (denom <= 0.05) return false;  // fold-over guard; generation keeps |b| small
    x_out = (xr + r.a + r.c * y) / denom;
    return true;
}

// Visible layer index at integer right-image position, nearest layer first.
inline int right_visible_layer(const std::vector<RegionSpec>& regions, int xr, int y) {
    for (int i = static_cast<int>(regions.size()) - 1; i >= 0; --i) {
        double x;
        if (!inverse_warp_x(regions[i], xr, y, x)) continue;
        if (regions[i].contains(x, y)) return i;
    }
    return 0;
}

inline double round_to_half(double v, bool allow_half) {
    return allow_half ? std::round(v * 2.0) / 2.0 : std::round(v);
}

}  // namespace detail

// Rasterize layers into left-frame disparity and layer maps, synthesize the
// right image as i.i.d. noise and the left image by warp sampling.
inline StereoSample render_stereogram(int h, int w, const std::vector<RegionSpec>& regions, std::mt19937_64& rng) {
    if (regions.empty() || regions[0].kind != RegionSpec::Kind::background)
        throw std::invalid_argument("render_stereogram: first region must be the background");
    StereoSample s;
    s.h = h;
    s.w = w;
    s.field.h = h;
    s.field.w = w;
    s.field.regions = regions;
    s.field.values.resize(static_cast<size_t>(h) * w);
    s.field.layer.resize(static_cast<size_t>(h) * w);
    s.d_gt.resize(static_cast<size_t>(h) * w);
    s.valid.assign(static_cast<size_t>(h) * w, 1);
    s.occlusion.assign(static_cast<size_t>(h) * w, 0);

    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            int li = 0;
            for (int i = static_cast<int>(regions.size()) - 1; i >= 0; --i)
                if (regions[i].contains(x, y)) {
                    li = i;
                    break;
                }
            double d = regions[li].disparity(x, y);
            if (d < 0) d = 0;
            s.field.layer[static_cast<size_t>(y) * w + x] = li;
            s.field.values[static_cast<size_t>(y) * w + x] = d;
            s.d_gt[static_cast<size_t>(y) * w + x] = d;
        }

    std::uniform_real_distribution<double> noise(0.0, 1.0);
    s.right.resize(3 * static_cast<size_t>(h) * w);
    for (auto& v : s.right) v = noise(rng);
    s.left.assign(3 * static_cast<size_t>(h) * w, 0.0);

    const long long hw = static_cast<long long>(h) * w;
    for (int y = 0; y < h; ++y) {
        // per-row right visibility, computed lazily
        std::vector<int> vis(w, -1);
        auto visible = [&](int xr) {
            if (vis[xr] < 0) vis[xr] = detail::right_visible_layer(regions, xr, y);
            return vis[xr];
        };
        for (int x = 0; x < w; ++x) {
            long long p = static_cast<long long>(y) * w + x;
            double xs = x - s.d_gt[p];
            int i0 = static_cast<int>(std::floor(xs));
            double f = xs - i0;
            int i1 = (f == 0.0) ? i0 : i0 + 1;
            int li = s.field.layer[p];
            bool ok = i0 >= 0 && i1 < w && visible(i0) == li && (i1 == i0 || visible(i1) == li);
            if (ok) {
                for (int ch = 0; ch < 3; ++ch) {
                    const double* r = s.right.data() + ch * hw + static_cast<long long>(y) * w;
                    s.left[ch * hw + p] = (1.0 - f) * r[i0] + f * r[i1];
                }
            } else {
                s.occlusion[p] = 1;
                for (int ch = 0; ch < 3; ++ch) s.left[ch * hw + p] = noise(rng);
            }
        }
    }
    return s;
}

// Random layered scene: background plus n_regions-1 shapes with strictly
// increasing disparity (nearer layers painted later).
inline StereoSample gen_stereogram(int h, int w, double d_max, int n_regions, uint64_t seed,
                                   const GenOptions& opts = {}) {
    if (n_regions < 1) throw std::invalid_argument("gen_stereogram: n_regions must be >= 1");
    if (!(d_max < w / 4.0)) throw std::invalid_argument("gen_stereogram: d_max must be < w/4");
    if (h < 8 || w < 16) throw std::invalid_argument("gen_stereogram: image too small");
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> uni(0.0, 1.0);

    std::vector<RegionSpec> regions;
    RegionSpec bg;
    bg.kind = RegionSpec::Kind::background;
    double bg_cap = std::min(2.0, d_max * 0.25);
    bg.a = detail::round_to_half(uni(rng) * bg_cap, opts.allow_half);
    regions.push_back(bg);

    int n_fg = n_regions - 1;
    double lo = bg.a + 1.0;
    for (int i = 0; i < n_fg; ++i) {
        // carve [lo, d_max] into ascending disparity slots
        double hi = d_max;
        double slot = (hi - lo) / std::max(1, n_fg - i);
        double base = detail::round_to_half(lo + uni(rng) * std::max(slot - 1.0, 0.5), opts.allow_half);
        base = std::min(std::max(base, lo), hi);

        RegionSpec r;
        bool ellipse = uni(rng) < 0.5;
        double rw = (0.12 + 0.18 * uni(rng)) * w;
        double rh = (0.12 + 0.2 * uni(rng)) * h;
        double cx = (0.2 + 0.6 * uni(rng)) * w;
        double cy = (0.2 + 0.6 * uni(rng)) * h;
        if (ellipse) {
            r.kind = RegionSpec::Kind::ellipse;
            r.cx = cx;
            r.cy = cy;
            r.rx = rw;
            r.ry = rh;
        } else {
            r.kind = RegionSpec::Kind::rect;
            r.x0 = cx - rw;
            r.x1 = cx + rw;
            r.y0 = cy - rh;
            r.y1 = cy + rh;
        }
        r.a = base;
        if (opts.allow_planar && uni(rng) < 0.5) {
            r.b = (uni(rng) - 0.5) * 0.04;
            r.c = (uni(rng) - 0.5) * 0.04;
            // keep the plane inside (lo, d_max] over the image extent
            double span = std::fabs(r.b) * w + std::fabs(r.c) * h;
            r.a = std::min(std::max(base, lo + span), d_max - span);
        }
        regions.push_back(r);
        lo = base + 0.5;
    }
    return render_stereogram(h, w, regions, rng);
}

// ---------------------------------------------------------------------------
// PFM I/O (Pf = 1 channel, PF = 3 channels; rows bottom-to-top; scale sign
// encodes endianness). The writer always emits little-endian (scale -1.0).
// ---------------------------------------------------------------------------

class PfmError : public std::runtime_error {
  public:
    size_t byte_offset;
    PfmError(const std::string& msg, size_t off)
        : std::runtime_error(msg + " (byte offset " + std::to_string(off) + ")"), byte_offset(off) {}
};

// Row 0 is the top row; channels interleaved per pixel.
struct PfmImage {
    int w = 0, h = 0, channels = 1;
    std::vector<float> data;  // h*w*channels
};

namespace detail {

inline bool host_is_little_endian() {
    uint16_t v = 1;
    uint8_t b;
    std::memcpy(&b, &v, 1);
    return b == 1;
}

inline float byteswap_float(float f) {
    uint32_t u;
    std::memcpy(&u, &f, 4);
    u = ((u & 0xFF000000u) >> 24) | ((u & 0x00FF0000u) >> 8) | ((u & 0x0000FF00u) << 8) | ((u & 0x000000FFu) << 24);
    std::memcpy(&f, &u, 4);
    return f;
}

}  // namespace detail

inline PfmImage read_pfm(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw PfmError("cannot open '" + path + "'", 0);
    std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());

    size_t pos = 0;
    auto skip_ws = [&]() {
        while (pos < bytes.size() && std::isspace(static_cast<unsigned char>(bytes[pos]))) ++pos;
    };
    auto token = [&]() -> std::string {
        skip_ws();
        size_t start = pos;
        while (pos < bytes.size() && !std::isspace(static_cast<unsigned char>(bytes[pos]))) ++pos;
        if (start == pos) throw PfmError("unexpected end of header", start);
        return bytes.substr(start, pos - start);
    };

    std::string magic = token();
    PfmImage img;
    if (magic == "Pf")
        img.channels = 1;
    else if (magic == "PF")
        img.channels = 3;
    else
        throw PfmError("bad magic '" + magic + "', expected Pf or PF", 0);

    size_t tok_at = pos;
    try {
        img.w = std::stoi(token());
        tok_at = pos;
        img.h = std::stoi(token());
    } catch (const PfmError&) {
        throw;
    } catch (const std::exception&) {
        throw PfmError("malformed dimensions", tok_at);
    }
    if (img.w <= 0 || img.h <= 0) throw PfmError("non-positive dimensions", tok_at);

    tok_at = pos;
    double scale;
    try {
        scale = std::stod(token());
    } catch (const std::exception&) {
        throw PfmError("malformed scale", tok_at);
    }
    if (scale == 0.0) throw PfmError("zero scale", tok_at);

    if (pos >= bytes.size()) throw PfmError("missing payload", pos);
    ++pos;  // exactly one whitespace byte after the scale line

    size_t n = static_cast<size_t>(img.w) * img.h * img.channels;
    if (bytes.size() - pos < n * 4)
        throw PfmError("truncated payload: need " + std::to_string(n * 4) + " bytes, have " +
                           std::to_string(bytes.size() - pos),
                       pos);

    bool file_le = scale < 0.0;
    bool swap = file_le != detail::host_is_little_endian();
    img.data.resize(n);
    // rows are stored bottom-to-top
    size_t row_floats = static_cast<size_t>(img.w) * img.channels;
    for (int y = 0; y < img.h; ++y) {
        const char* src = bytes.data() + pos + static_cast<size_t>(img.h - 1 - y) * row_floats * 4;
        float* dst = img.data.data() + static_cast<size_t>(y) * row_floats;
        std::memcpy(dst, src, row_floats * 4);
        if (swap)
            for (size_t i = 0; i < row_floats; ++i) dst[i] = detail::byteswap_float(dst[i]);
    }
    return img;
}

inline void write_pfm(const std::string& path, const PfmImage& img) {
    if (img.channels != 1 && img.channels != 3) throw std::invalid_argument("write_pfm: channels must be 1 or 3");
    if (static_cast<size_t>(img.w) * img.h * img.channels != img.data.size())
        throw std::invalid_argument("write_pfm: data size mismatch");
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("write_pfm: cannot open '" + path + "'");
    out << (img.channels == 1 ? "Pf" : "PF") << "\n" << img.w << " " << img.h << "\n" << "-1.0" << "\n";
    bool swap = !detail::host_is_little_endian();
    size_t row_floats = static_cast<size_t>(img.w) * img.channels;
    std::vector<float> row(row_floats);
    for (int y = img.h - 1; y >= 0; --y) {
        std::memcpy(row.data(), img.data.data() + static_cast<size_t>(y) * row_floats, row_floats * 4);
        if (swap)
            for (auto& f : row) f = detail::byteswap_float(f);
        out.write(reinterpret_cast<const char*>(row.data()), static_cast<std::streamsize>(row_floats * 4));
    }
    if (!out) throw std::runtime_error("write_pfm: write failed for '" + path + "'");
}

// Grayscale 8-bit dump: byte = clamp(round(v * scale), 0, 255). P5 binary.
inline void write_pgm_vis(const std::string& path, const std::vector<double>& map, int h, int w, double scale) {
    if (static_cast<size_t>(h) * w != map.size()) throw std::invalid_argument("write_pgm_vis: size mismatch");
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("write_pgm_vis: cannot open '" + path + "'");
    out << "P5\n" << w << " " << h << "\n255\n";
    std::vector<uint8_t> row(w);
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            double v = std::round(map[static_cast<size_t>(y) * w + x] * scale);
            row[x] = static_cast<uint8_t>(std::min(255.0, std::max(0.0, v)));
        }
        out.write(reinterpret_cast<const char*>(row.data()), w);
    }
}

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

struct Metrics {
    double epe = 0;      // mean |err| over valid pixels
    double rate_1px = 0; // % of valid pixels with |err| > 1 (strict)
    double rate_2px = 0;
    double rate_3px = 0;
    double d1 = 0;       // % with |err| > 3 and > 5% of d_gt
    double see = 0;      // mean |err| in the discontinuity band ("SEE (band-2)")
};

// Pixels within `radius` (Chebyshev) of a ground-truth disparity step
// (|forward difference| > grad_thresh, 4-neighborhood).
inline std::vector<uint8_t> boundary_band(const std::vector<double>& d_gt, int h, int w, double grad_thresh = 1.0,
                                          int radius = 2) {
    std::vector<uint8_t> edge(static_cast<size_t>(h) * w, 0);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            double d = d_gt[static_cast<size_t>(y) * w + x];
            if (x + 1 < w && std::fabs(d_gt[static_cast<size_t>(y) * w + x + 1] - d) > grad_thresh) edge[static_cast<size_t>(y) * w + x] = 1;
            if (y + 1 < h && std::fabs(d_gt[static_cast<size_t>(y + 1) * w + x] - d) > grad_thresh) edge[static_cast<size_t>(y) * w + x] = 1;
        }
    std::vector<uint8_t> band(static_cast<size_t>(h) * w, 0);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            if (!edge[static_cast<size_t>(y) * w + x]) continue;
            for (int dy = -radius; dy <= radius; ++dy)
                for (int dx = -radius; dx <= radius; ++dx) {
                    int yy = y + dy, xx = x + dx;
                    if (yy >= 0 && yy < h && xx >= 0 && xx < w) band[static_cast<size_t>(yy) * w + xx] = 1;
                }
        }
    return band;
}

inline Metrics compute_metrics(const std::vector<double>& d_hat, const std::vector<double>& d_gt,
                               const std::vector<uint8_t>& valid, const std::vector<uint8_t>& band) {
    if (d_hat.size() != d_gt.size() || valid.size() != d_gt.size() || band.size() != d_gt.size())
        throw std::invalid_argument("compute_metrics: size mismatch");
    long long n = 0, n1 = 0, n2 = 0, n3 = 0, nd1 = 0, nb = 0;
    double sum = 0, bsum = 0;
    for (size_t i = 0; i < d_gt.size(); ++i) {
        if (!valid[i]) continue;
        ++n;
        double err = std::fabs(d_hat[i] - d_gt[i]);
        sum += err;
        if (err > 1.0) ++n1;
        if (err > 2.0) ++n2;
        if (err > 3.0) ++n3;
        if (err > 3.0 && err > 0.05 * std::fabs(d_gt[i])) ++nd1;
        if (band[i]) {
            ++nb;
            bsum += err;
        }
    }
    if (n == 0) throw std::invalid_argument("compute_metrics: no valid pixels");
    Metrics m;
    m.epe = sum / n;
    m.rate_1px = 100.0 * n1 / n;
    m.rate_2px = 100.0 * n2 / n;
    m.rate_3px = 100.0 * n3 / n;
    m.d1 = 100.0 * nd1 / n;
    m.see = nb > 0 ? bsum / nb : 0.0;
    return m;
}

inline std::string metrics_csv_header() { return "sample_id,epe,r1,r2,r3,d1,see"; }

inline std::string metrics_csv_row(const std::string& id, const Metrics& m) {
    char buf[256];
    std::snprintf(buf, sizeof(buf), "%s,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g", id.c_str(), m.epe, m.rate_1px, m.rate_2px,
                  m.rate_3px, m.d1, m.see);
    return buf;
}

}  // namespace spex
