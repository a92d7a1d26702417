#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "panolab/common.hpp"
#include "panolab/diffusion.hpp"
#include "panolab/rng.hpp"

namespace panolab::pano {

/// Cylindrical-flat panorama: 12 heading sectors of 30 degrees across the
/// width (wrapping horizontally) and 3 elevation bands down the height.
/// Pixels are row-major with channels innermost, values in [0, 1].
struct Panorama {
    int width = 0;
    int height = 0;
    int channels = 1;
    std::vector<double> pixels;

    void validate() const {
        if (width <= 0 || width % 12 != 0) throw ValueError("panorama width must be a positive multiple of 12");
        if (height <= 0 || height % 3 != 0) throw ValueError("panorama height must be a positive multiple of 3");
        if (channels <= 0) throw ValueError("panorama channels must be positive");
        if (pixels.size() != static_cast<std::size_t>(width) * height * channels)
            throw ShapeError("panorama pixel buffer does not match dimensions");
    }

    static Panorama filled(int w, int h, int c, double value = 0.0) {
        Panorama p;
        p.width = w;
        p.height = h;
        p.channels = c;
        p.pixels.assign(static_cast<std::size_t>(w) * h * c, value);
        p.validate();
        return p;
    }

    std::size_t index(int row, int col, int ch) const {
        return (static_cast<std::size_t>(row) * width + static_cast<std::size_t>(col)) * channels + ch;
    }
    double at(int row, int col, int ch) const { return pixels[index(row, col, ch)]; }
    double& at(int row, int col, int ch) { return pixels[index(row, col, ch)]; }

    int view_width() const { return width / 12; }
    int view_height() const { return height / 3; }
};

/// One of the 36 sub-views. heading k spans azimuth [30k, 30k+30) degrees;
/// elevation index e maps to angle 30 - 30e degrees (band 0 is the top).
struct SubView {
    int heading = 0;   // 0..11
    int elevation = 0; // 0..2
    int width = 0;
    int height = 0;
    int channels = 1;
    std::vector<double> pixels;

    std::size_t index(int row, int col, int ch) const {
        return (static_cast<std::size_t>(row) * width + static_cast<std::size_t>(col)) * channels + ch;
    }
    double at(int row, int col, int ch) const { return pixels[index(row, col, ch)]; }
    double& at(int row, int col, int ch) { return pixels[index(row, col, ch)]; }
};

constexpr int kHeadings = 12;
constexpr int kElevations = 3;
constexpr int kViewsPerPanorama = kHeadings * kElevations;

/// Exact partition into 36 crops ordered by (elevation, heading).
inline std::vector<SubView> partition(const Panorama& p) {
    p.validate();
    const int vw = p.view_width(), vh = p.view_height();
    std::vector<SubView> views;
    views.reserve(kViewsPerPanorama);
    for (int e = 0; e < kElevations; ++e)
        for (int h = 0; h < kHeadings; ++h) {
            SubView v;
            v.heading = h;
            v.elevation = e;
            v.width = vw;
            v.height = vh;
            v.channels = p.channels;
            v.pixels.resize(static_cast<std::size_t>(vw) * vh * p.channels);
            for (int r = 0; r < vh; ++r)
                for (int c = 0; c < vw; ++c)
                    for (int ch = 0; ch < p.channels; ++ch)
                        v.at(r, c, ch) = p.at(e * vh + r, h * vw + c, ch);
            views.push_back(std::move(v));
        }
    return views;
}

/// Inverse of partition; the 36 views must agree on dimensions and carry
/// distinct (elevation, heading) slots.
inline Panorama stitch(const std::vector<SubView>& views) {
    if (views.size() != kViewsPerPanorama) throw ValueError("stitch requires exactly 36 sub-views");
    const int vw = views[0].width, vh = views[0].height, ch = views[0].channels;
    Panorama p = Panorama::filled(vw * kHeadings, vh * kElevations, ch);
    std::vector<bool> seen(kViewsPerPanorama, false);
    for (const auto& v : views) {
        if (v.width != vw || v.height != vh || v.channels != ch)
            throw ShapeError("stitch: inconsistent view dimensions");
        if (v.heading < 0 || v.heading >= kHeadings || v.elevation < 0 || v.elevation >= kElevations)
            throw ValueError("stitch: view indices out of range");
        const int slot = v.elevation * kHeadings + v.heading;
        if (seen[static_cast<std::size_t>(slot)]) throw ValueError("stitch: duplicate view slot");
        seen[static_cast<std::size_t>(slot)] = true;
        for (int r = 0; r < vh; ++r)
            for (int c = 0; c < vw; ++c)
                for (int k = 0; k < ch; ++k)
                    p.at(v.elevation * vh + r, v.heading * vw + c, k) = v.at(r, c, k);
    }
    return p;
}

// ---------------------------------------------------------------------------
// Masking strategies
// ---------------------------------------------------------------------------

enum class MaskStrategy { SRM, ERM, HIM, PRM };

inline const char* strategy_name(MaskStrategy s) {
    switch (s) {
        case MaskStrategy::SRM: return "srm";
        case MaskStrategy::ERM: return "erm";
        case MaskStrategy::HIM: return "him";
        case MaskStrategy::PRM: return "prm";
    }
    return "?";
}

inline MaskStrategy parse_strategy(const std::string& s) {
    if (s == "srm" || s == "SRM") return MaskStrategy::SRM;
    if (s == "erm" || s == "ERM") return MaskStrategy::ERM;
    if (s == "him" || s == "HIM") return MaskStrategy::HIM;
    if (s == "prm" || s == "PRM") return MaskStrategy::PRM;
    throw ValueError("unknown masking strategy: " + s);
}

struct MaskSpec {
    MaskStrategy strategy = MaskStrategy::PRM;
    int max_rects = 4; // SRM / ERM
    int crop_side = 0; // PRM; 0 selects min(h, w) / 4
    std::uint64_t seed = 0;
};

/// Binary mask over a (height x width) grid; 1 marks pixels to generate.
struct Mask {
    int height = 0;
    int width = 0;
    std::vector<std::uint8_t> data;

    std::uint8_t at(int r, int c) const { return data[static_cast<std::size_t>(r) * width + c]; }
    std::uint8_t& at(int r, int c) { return data[static_cast<std::size_t>(r) * width + c]; }

    double masked_fraction() const {
        std::size_t on = 0;
        for (auto v : data) on += v;
        return static_cast<double>(on) / static_cast<double>(data.size());
    }

    /// Expand per-location mask across channels for latent-space use.
    std::vector<std::uint8_t> per_channel(int channels) const {
        std::vector<std::uint8_t> out(data.size() * static_cast<std::size_t>(channels));
        for (std::size_t i = 0; i < data.size(); ++i)
            for (int k = 0; k < channels; ++k) out[i * channels + k] = data[i];
        return out;
    }
};

namespace detail {

inline void paint_rect(Mask& m, int r0, int c0, int rh, int rw) {
    for (int r = r0; r < r0 + rh; ++r)
        for (int c = c0; c < c0 + rw; ++c) m.at(r, c) = 1;
}

/// Unions of random rectangles retried until the masked fraction lands in
/// [lo, hi]. Deterministic in the seed; impossible geometries surface as an
/// error once the attempt budget runs out.
inline Mask random_rect_mask(int h, int w, const MaskSpec& spec, double lo, double hi, bool large) {
    Rng base = Rng(spec.seed).child("mask.rect");
    const int max_rects = std::max(1, spec.max_rects);
    for (int attempt = 0; attempt < 1000; ++attempt) {
        Rng r = base.child("attempt", static_cast<std::uint64_t>(attempt));
        Mask m{h, w, std::vector<std::uint8_t>(static_cast<std::size_t>(h) * w, 0)};
        const int rects = 1 + r.below_int(max_rects);
        for (int k = 0; k < rects; ++k) {
            int rw, rh;
            if (large) {
                rw = (w + 1) / 2 + r.below_int(w - (w + 1) / 2 + 1);
                rh = (h + 1) / 2 + r.below_int(h - (h + 1) / 2 + 1);
            } else {
                rw = 1 + r.below_int(std::max(1, w / 2));
                rh = 1 + r.below_int(std::max(1, h / 2));
            }
            const int c0 = r.below_int(w - rw + 1);
            const int r0 = r.below_int(h - rh + 1);
            paint_rect(m, r0, c0, rh, rw);
        }
        const double f = m.masked_fraction();
        if (f >= lo && f <= hi) return m;
    }
    throw ValueError("mask generation could not satisfy the area bounds for this shape");
}

} // namespace detail

/// Strategy bounds: SRM masks 10-50% of the area with scattered rectangles,
/// ERM 50-90% with large rectangles, HIM exactly one lateral half, PRM
/// everything except a centered square crop.
inline Mask make_mask(int height, int width, const MaskSpec& spec) {
    if (height < 1 || width < 1) throw ValueError("mask shape must be positive");
    switch (spec.strategy) {
        case MaskStrategy::SRM:
            return detail::random_rect_mask(height, width, spec, 0.10, 0.50, false);
        case MaskStrategy::ERM:
            return detail::random_rect_mask(height, width, spec, 0.50, 0.90, true);
        case MaskStrategy::HIM: {
            if (width % 2 != 0) throw ValueError("HIM requires an even width for an exact half");
            Mask m{height, width, std::vector<std::uint8_t>(static_cast<std::size_t>(height) * width, 0)};
            Rng r = Rng(spec.seed).child("mask.him");
            const bool left = r.below(2) == 0;
            detail::paint_rect(m, 0, left ? 0 : width / 2, height, width / 2);
            return m;
        }
        case MaskStrategy::PRM: {
            int side = spec.crop_side > 0 ? spec.crop_side : std::max(1, std::min(height, width) / 4);
            if (side > std::min(height, width)) throw ValueError("PRM crop larger than image");
            Mask m{height, width, std::vector<std::uint8_t>(static_cast<std::size_t>(height) * width, 1)};
            const int r0 = (height - side) / 2, c0 = (width - side) / 2;
            for (int r = r0; r < r0 + side; ++r)
                for (int c = c0; c < c0 + side; ++c) m.at(r, c) = 0;
            return m;
        }
    }
    throw ValueError("unknown masking strategy");
}

// ---------------------------------------------------------------------------
// Recursive outpainting schedule
// ---------------------------------------------------------------------------

enum class ShiftDirection { seed, right, down, up };

struct WindowPlacement {
    int row = 0;
    int col = 0;
    ShiftDirection direction = ShiftDirection::seed;
};

/// Ordered window placements covering the panorama: a seed window at (0,0),
/// rightward shifts of S/2 around the wrap, then downward band sweeps. Every
/// shifted window overlaps its predecessor along the shift axis by exactly
/// 50% (S/2 x S pixels).
struct WindowSchedule {
    int window = 0; // S
    int stride = 0; // S/2
    int pano_width = 0;
    int pano_height = 0;
    std::vector<WindowPlacement> placements;
};

inline WindowSchedule outpaint_schedule(int pano_width, int pano_height, int window) {
    if (window < 2 || window % 2 != 0) throw ValueError("outpaint window must be even and >= 2");
    if (window > pano_height) throw ValueError("outpaint window taller than panorama");
    if (window > pano_width) throw ValueError("outpaint window wider than panorama");
    const int stride = window / 2;
    if (pano_width % stride != 0) throw ValueError("panorama width must be a multiple of window/2");
    if (pano_height % stride != 0) throw ValueError("panorama height must be a multiple of window/2");

    WindowSchedule s;
    s.window = window;
    s.stride = stride;
    s.pano_width = pano_width;
    s.pano_height = pano_height;

    const int hpos = pano_width / stride;
    s.placements.push_back({0, 0, ShiftDirection::seed});
    for (int k = 1; k < hpos; ++k) s.placements.push_back({0, k * stride, ShiftDirection::right});
    for (int row = stride; row + window <= pano_height; row += stride)
        for (int k = 0; k < hpos; ++k) s.placements.push_back({row, k * stride, ShiftDirection::down});
    return s;
}

// ---------------------------------------------------------------------------
// Generation
// ---------------------------------------------------------------------------

namespace detail {

inline int wrap_col(int col, int width) { return ((col % width) + width) % width; }

} // namespace detail

/// Recursive text-guided outpainting. Each window is sampled (seed) or
/// inpainted with the not-yet-generated pixels as the mask, so every pixel is
/// produced by exactly one sampling call and never rewritten. Conditioning is
/// given per window and must match the schedule length.
template <class Model>
Panorama generate_panorama(Model& model, const diffusion::NoiseSchedule& sched, const WindowSchedule& ws,
                           const std::vector<std::vector<double>>& window_conds, Rng& rng,
                           lora::AdapterSet* adapters = nullptr) {
    if (window_conds.size() != ws.placements.size())
        throw ValueError("generate_panorama: one conditioning vector per window required");
    const auto& cfg = model.config();
    if (cfg.window_h != ws.window || cfg.window_w != ws.window)
        throw ShapeError("generate_panorama: model window does not match schedule window");
    const int ch = cfg.channels;
    const int w = ws.pano_width, h = ws.pano_height, s = ws.window;

    std::vector<double> buffer(static_cast<std::size_t>(w) * h * ch, 0.0);
    std::vector<std::uint8_t> generated(static_cast<std::size_t>(w) * h, 0);

    auto cell = [&](int row, int col) { return static_cast<std::size_t>(row) * w + detail::wrap_col(col, w); };

    for (std::size_t wi = 0; wi < ws.placements.size(); ++wi) {
        const auto& pl = ws.placements[wi];
        // Window extraction with horizontal wrap.
        std::vector<double> source(static_cast<std::size_t>(s) * s * ch, 0.0);
        std::vector<std::uint8_t> mask2d(static_cast<std::size_t>(s) * s, 0);
        bool any_new = false;
        for (int r = 0; r < s; ++r)
            for (int c = 0; c < s; ++c) {
                const std::size_t src = cell(pl.row + r, pl.col + c);
                const std::size_t dst = static_cast<std::size_t>(r) * s + c;
                if (generated[src]) {
                    for (int k = 0; k < ch; ++k) source[dst * ch + k] = buffer[src * ch + k];
                } else {
                    mask2d[dst] = 1;
                    any_new = true;
                }
            }

        std::vector<double> out;
        if (pl.direction == ShiftDirection::seed) {
            out = diffusion::sample(model, sched, source.size(), window_conds[wi], rng, adapters);
        } else if (any_new) {
            Mask m{s, s, mask2d};
            out = diffusion::inpaint_sample(model, sched, source, m.per_channel(ch), window_conds[wi], rng,
                                            adapters);
        } else {
            continue; // wrap closure window: everything already generated
        }

        // Write back only the newly generated pixels.
        for (int r = 0; r < s; ++r)
            for (int c = 0; c < s; ++c) {
                const std::size_t dst = static_cast<std::size_t>(r) * s + c;
                if (mask2d[dst] == 0 && pl.direction != ShiftDirection::seed) continue;
                const std::size_t tgt = cell(pl.row + r, pl.col + c);
                for (int k = 0; k < ch; ++k) buffer[tgt * ch + k] = out[dst * ch + k];
                generated[tgt] = 1;
            }
    }

    Panorama p;
    p.width = w;
    p.height = h;
    p.channels = ch;
    p.pixels.resize(buffer.size());
    for (std::size_t i = 0; i < buffer.size(); ++i) p.pixels[i] = std::clamp(buffer[i], 0.0, 1.0);
    p.validate();
    return p;
}

/// Mask-guided re-synthesis of one sub-view; unmasked pixels pass through
/// bit-exact, generated pixels are clamped to [0, 1].
template <class Model>
SubView augment_view(Model& model, const diffusion::NoiseSchedule& sched, const SubView& view,
                     const MaskSpec& spec, const std::vector<double>& cond, Rng& rng,
                     lora::AdapterSet* adapters = nullptr) {
    const auto& cfg = model.config();
    if (cfg.window_h != view.height || cfg.window_w != view.width || cfg.channels != view.channels)
        throw ShapeError("augment_view: view does not match model window");
    Mask mask = make_mask(view.height, view.width, spec);
    const auto mask_ch = mask.per_channel(view.channels);
    std::vector<double> out = diffusion::inpaint_sample(model, sched, view.pixels, mask_ch, cond, rng, adapters);
    SubView result = view;
    for (std::size_t i = 0; i < out.size(); ++i)
        result.pixels[i] = mask_ch[i] ? std::clamp(out[i], 0.0, 1.0) : out[i];
    return result;
}

// ---------------------------------------------------------------------------
// PAN1 file format
// ---------------------------------------------------------------------------

constexpr char kPanoMagic[4] = {'P', 'A', 'N', '1'};

/// "PAN1", u32 width/height/channels, then f32 row-major pixels clamped to
/// [0, 1] on write.
inline void write_panorama(std::ostream& os, const Panorama& p) {
    p.validate();
    os.write(kPanoMagic, 4);
    io::write_u32(os, static_cast<std::uint32_t>(p.width));
    io::write_u32(os, static_cast<std::uint32_t>(p.height));
    io::write_u32(os, static_cast<std::uint32_t>(p.channels));
    for (double v : p.pixels) io::write_f32(os, static_cast<float>(std::clamp(v, 0.0, 1.0)));
}

inline Panorama read_panorama(std::istream& is) {
    char magic[4];
    is.read(magic, 4);
    if (!is || std::string(magic, 4) != std::string(kPanoMagic, 4))
        throw FormatError("not a PAN1 panorama (bad magic)");
    Panorama p;
    p.width = static_cast<int>(io::read_u32(is));
    p.height = static_cast<int>(io::read_u32(is));
    p.channels = static_cast<int>(io::read_u32(is));
    if (p.width <= 0 || p.height <= 0 || p.channels <= 0 || p.width > 1 << 20 || p.height > 1 << 20)
        throw FormatError("implausible panorama dimensions");
    p.pixels.resize(static_cast<std::size_t>(p.width) * p.height * p.channels);
    for (auto& v : p.pixels) v = static_cast<double>(io::read_f32(is));
    if (!is) throw FormatError("truncated panorama file");
    p.validate();
    return p;
}

inline void save_panorama(const std::string& path, const Panorama& p) {
    namespace fs = std::filesystem;
    const fs::path target(path);
    if (target.has_parent_path()) fs::create_directories(target.parent_path());
    const fs::path tmp = target.string() + ".tmp";
    {
        std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
        if (!os) throw FormatError("cannot open for write: " + tmp.string());
        write_panorama(os, p);
    }
    fs::rename(tmp, target);
}

inline Panorama load_panorama(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw FormatError("cannot open panorama: " + path);
    return read_panorama(is);
}

} // namespace panolab::pano
