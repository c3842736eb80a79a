#include "mres/pyramid.hpp"

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include <algorithm>
#include <array>
#include <cmath>
#include <map>
#include <sstream>

namespace mres {

namespace {
constexpr double kPi = 3.14159265358979323846;
}

LabelMask LabelMask::blank(cv::Size size, int level) {
    LabelMask m;
    m.classes = cv::Mat1b::zeros(size);
    m.annotated = cv::Mat1b::zeros(size);
    m.level = level;
    return m;
}

LabelMask LabelMask::clone() const {
    LabelMask m;
    m.classes = classes.clone();
    m.annotated = annotated.clone();
    m.level = level;
    return m;
}

const cv::Mat& PyramidalSlide::level(int k) const {
    MRES_CHECK(k >= 0 && k < num_levels(), "level index out of range for slide " + id);
    return levels[k];
}

cv::Size PyramidalSlide::level_size(int k) const { return level(k).size(); }

cv::Mat box_downsample2(const cv::Mat& src) {
    MRES_CHECK(src.type() == CV_8UC3 || src.type() == CV_8UC1, "box_downsample2 expects 8-bit input");
    const int oh = (src.rows + 1) / 2, ow = (src.cols + 1) / 2;
    const int ch = src.channels();
    cv::Mat dst(oh, ow, src.type());
    for (int y = 0; y < oh; ++y) {
        const int y0 = 2 * y, y1 = std::min(2 * y + 1, src.rows - 1);
        const uint8_t* r0 = src.ptr<uint8_t>(y0);
        const uint8_t* r1 = src.ptr<uint8_t>(y1);
        const int ny = (y1 > y0) ? 2 : 1;
        uint8_t* out = dst.ptr<uint8_t>(y);
        for (int x = 0; x < ow; ++x) {
            const int x0 = 2 * x, x1 = std::min(2 * x + 1, src.cols - 1);
            const int nx = (x1 > x0) ? 2 : 1;
            const int n = ny * nx;
            for (int c = 0; c < ch; ++c) {
                int sum = r0[x0 * ch + c];
                if (nx == 2) sum += r0[x1 * ch + c];
                if (ny == 2) {
                    sum += r1[x0 * ch + c];
                    if (nx == 2) sum += r1[x1 * ch + c];
                }
                out[x * ch + c] = static_cast<uint8_t>((2 * sum + n) / (2 * n));  // round half up
            }
        }
    }
    return dst;
}

double pyramid_mad(const cv::Mat& coarse, const cv::Mat& finer) {
    cv::Mat ref = box_downsample2(finer);
    MRES_CHECK(ref.size() == coarse.size() && ref.type() == coarse.type(),
               "pyramid_mad: level dimensions inconsistent");
    cv::Mat diff;
    cv::absdiff(ref, coarse, diff);
    cv::Scalar sums = cv::sum(diff);
    double total = 0.0;
    for (int c = 0; c < diff.channels(); ++c) total += sums[c];
    return total / (static_cast<double>(diff.total()) * diff.channels());
}

std::vector<cv::Mat> build_pyramid_levels(const cv::Mat& base, int num_levels) {
    MRES_CHECK(num_levels >= 2, "pyramid needs at least 2 levels");
    const int need = 1 << (num_levels - 1);
    if (base.cols < need || base.rows < need)
        throw ConfigError("base image too small for " + std::to_string(num_levels) + " pyramid levels");
    std::vector<cv::Mat> levels;
    levels.push_back(base);
    for (int k = 1; k < num_levels; ++k) levels.push_back(box_downsample2(levels.back()));
    return levels;
}

PyramidalSlide build_pyramid(const cv::Mat& base, int num_levels) {
    PyramidalSlide s;
    s.levels = build_pyramid_levels(base, num_levels);
    return s;
}

TissueMask otsu_tissue_mask(const cv::Mat& rgb) {
    MRES_CHECK(!rgb.empty(), "otsu_tissue_mask: empty image");
    cv::Mat gray;
    if (rgb.channels() == 3)
        cv::cvtColor(rgb, gray, cv::COLOR_RGB2GRAY);
    else
        gray = rgb;

    std::array<int64_t, 256> hist{};
    for (int y = 0; y < gray.rows; ++y) {
        const uint8_t* row = gray.ptr<uint8_t>(y);
        for (int x = 0; x < gray.cols; ++x) ++hist[row[x]];
    }
    const int64_t total = static_cast<int64_t>(gray.rows) * gray.cols;

    int populated = 0;
    for (int v = 0; v < 256; ++v) populated += hist[v] > 0;

    TissueMask out;
    out.tissue = cv::Mat1b::zeros(gray.size());
    if (populated <= 1) {
        out.degenerate = true;
        out.threshold = 0;
        out.tissue_fraction = 0.0;
        return out;
    }

    // Exhaustive search: split into [0..t] / [t+1..255], maximize w0*w1*(mu0-mu1)^2.
    int64_t cum = 0, cumv = 0;
    int64_t total_v = 0;
    for (int v = 0; v < 256; ++v) total_v += hist[v] * v;
    double best = -1.0;
    int best_t = 0;
    for (int t = 0; t < 255; ++t) {
        cum += hist[t];
        cumv += hist[t] * t;
        if (cum == 0 || cum == total) continue;
        const double w0 = static_cast<double>(cum) / total;
        const double w1 = 1.0 - w0;
        const double mu0 = static_cast<double>(cumv) / cum;
        const double mu1 = static_cast<double>(total_v - cumv) / (total - cum);
        const double var = w0 * w1 * (mu0 - mu1) * (mu0 - mu1);
        if (var > best) {
            best = var;
            best_t = t;
        }
    }
    out.threshold = best_t;
    int64_t on = 0;
    for (int y = 0; y < gray.rows; ++y) {
        const uint8_t* row = gray.ptr<uint8_t>(y);
        uint8_t* dst = out.tissue.ptr<uint8_t>(y);
        for (int x = 0; x < gray.cols; ++x) {
            if (row[x] <= best_t) {
                dst[x] = 255;
                ++on;
            }
        }
    }
    out.tissue_fraction = static_cast<double>(on) / total;
    return out;
}

LabelMask downsample_mask(const LabelMask& src, int factor) {
    MRES_CHECK(factor >= 1 && (factor & (factor - 1)) == 0, "downsample factor must be a power of two");
    if (factor == 1) return src.clone();
    int shift = 0;
    while ((1 << shift) < factor) ++shift;
    const int oh = (src.classes.rows + factor - 1) / factor;
    const int ow = (src.classes.cols + factor - 1) / factor;
    LabelMask out = LabelMask::blank(cv::Size(ow, oh), src.level + shift);
    for (int y = 0; y < oh; ++y) {
        uint8_t* ocl = out.classes.ptr<uint8_t>(y);
        uint8_t* oan = out.annotated.ptr<uint8_t>(y);
        const int sy0 = y * factor, sy1 = std::min(sy0 + factor, src.classes.rows);
        for (int x = 0; x < ow; ++x) {
            const int sx0 = x * factor, sx1 = std::min(sx0 + factor, src.classes.cols);
            int counts[kNumClasses] = {0, 0, 0};
            int ann = 0;
            const int window = (sy1 - sy0) * (sx1 - sx0);
            for (int sy = sy0; sy < sy1; ++sy) {
                const uint8_t* scl = src.classes.ptr<uint8_t>(sy);
                const uint8_t* san = src.annotated.ptr<uint8_t>(sy);
                for (int sx = sx0; sx < sx1; ++sx) {
                    if (san[sx]) {
                        ++ann;
                        ++counts[scl[sx]];
                    }
                }
            }
            // Majority among annotated; ties by priority tumor > others > background.
            int cls = 0;
            if (counts[1] >= counts[2] && counts[1] >= counts[0] && counts[1] > 0)
                cls = 1;
            else if (counts[2] >= counts[0] && counts[2] > 0)
                cls = 2;
            ocl[x] = static_cast<uint8_t>(cls);
            oan[x] = (2 * ann >= window) ? 255 : 0;
        }
    }
    return out;
}

LabelMask downsample_mask2(const LabelMask& src) { return downsample_mask(src, 2); }

std::vector<LabelMask> build_mask_pyramid(const LabelMask& level0, int num_levels) {
    std::vector<LabelMask> out;
    for (int k = 0; k < num_levels; ++k) {
        LabelMask m = downsample_mask(level0, 1 << k);
        m.level = level0.level + k;
        out.push_back(std::move(m));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Synthetic slide generation
// ---------------------------------------------------------------------------

namespace {

// RGB palette for the generator. Stroma must sit well below glass in
// luminance so the dominant Otsu split is glass-vs-tissue on every slide,
// including ones with no dark structures at all.
const cv::Vec3d kGlass{246, 245, 247};
const cv::Vec3d kStroma{203, 172, 192};
const cv::Vec3d kNucleiBed{194, 166, 186};
const cv::Vec3d kNucleus{84, 58, 130};
const cv::Vec3d kWall{152, 62, 110};

struct Disc {
    cv::Point2d c;
    double r;
};

cv::Vec3b clamp_color(cv::Vec3d v) {
    return cv::Vec3b(cv::saturate_cast<uint8_t>(v[0]), cv::saturate_cast<uint8_t>(v[1]),
                     cv::saturate_cast<uint8_t>(v[2]));
}

// Star-shaped blob: radius R modulated by low-order harmonics (relative
// amplitude rel_amp), rasterized as a 256-gon.
cv::Mat1b blob_mask(cv::Size size, cv::Point2d c, double rx, double ry, double rel_amp, Rng& rng) {
    std::array<double, 4> amp{}, phase{};
    for (int k = 0; k < 4; ++k) {
        amp[k] = rng.uniform(-rel_amp, rel_amp) / (k + 2);
        phase[k] = rng.uniform(0.0, 2.0 * kPi);
    }
    std::vector<cv::Point> poly;
    poly.reserve(256);
    for (int i = 0; i < 256; ++i) {
        const double th = 2.0 * kPi * i / 256;
        double f = 1.0;
        for (int k = 0; k < 4; ++k) f += amp[k] * std::cos((k + 2) * th + phase[k]);
        poly.emplace_back(static_cast<int>(std::lround(c.x + rx * f * std::cos(th))),
                          static_cast<int>(std::lround(c.y + ry * f * std::sin(th))));
    }
    cv::Mat1b mask = cv::Mat1b::zeros(size);
    cv::fillPoly(mask, std::vector<std::vector<cv::Point>>{poly}, cv::Scalar(255));
    return mask;
}

// Paints `base` + low-frequency blotches + per-pixel grain into the region.
void fill_textured(cv::Mat& canvas, const cv::Mat1b& region, cv::Vec3d base, double blotch_amp,
                   double grain, double cell_px, Rng& rng) {
    const int gw = static_cast<int>(canvas.cols / cell_px) + 2;
    const int gh = static_cast<int>(canvas.rows / cell_px) + 2;
    cv::Mat1f grid(gh, gw);
    for (int y = 0; y < gh; ++y)
        for (int x = 0; x < gw; ++x) grid(y, x) = static_cast<float>(rng.uniform(-1.0, 1.0));
    cv::Mat1f blotch;
    cv::resize(grid, blotch, canvas.size(), 0, 0, cv::INTER_LINEAR);

    cv::RNG grain_rng(static_cast<uint64_t>(rng.child(0x677261696eull).seed()));
    cv::Mat noise(canvas.size(), CV_32FC3);
    grain_rng.fill(noise, cv::RNG::NORMAL, 0.0, grain);

    for (int y = 0; y < canvas.rows; ++y) {
        const uint8_t* reg = region.ptr<uint8_t>(y);
        const float* bl = blotch.ptr<float>(y);
        const cv::Vec3f* ns = noise.ptr<cv::Vec3f>(y);
        cv::Vec3b* out = canvas.ptr<cv::Vec3b>(y);
        for (int x = 0; x < canvas.cols; ++x) {
            if (!reg[x]) continue;
            const double b = bl[x] * blotch_amp;
            out[x] = clamp_color({base[0] + b + ns[x][0], base[1] + b + ns[x][1], base[2] + b + ns[x][2]});
        }
    }
}

// Shared nuclear texture: identical for tumor blobs and ring interiors so the
// two classes are locally indistinguishable.
void stamp_nuclei(cv::Mat& canvas, const cv::Mat1b& region, double ts, Rng& rng) {
    fill_textured(canvas, region, kNucleiBed, 6.0, 5.0, 48.0 * ts, rng);
    cv::Rect bbox = cv::boundingRect(region);
    if (bbox.empty()) return;
    const double pitch = std::max(4.0, 7.0 * ts);
    for (double gy = bbox.y; gy < bbox.y + bbox.height; gy += pitch) {
        for (double gx = bbox.x; gx < bbox.x + bbox.width; gx += pitch) {
            const double jx = rng.uniform(-pitch / 3, pitch / 3);
            const double jy = rng.uniform(-pitch / 3, pitch / 3);
            const bool present = rng.bernoulli(0.88);
            const double a = rng.uniform(2.2, 3.4) * ts;
            const double b = rng.uniform(1.8, 2.8) * ts;
            const double angle = rng.uniform(0.0, 180.0);
            const double cj = rng.uniform(-14.0, 14.0);
            const int cx = static_cast<int>(std::lround(gx + jx));
            const int cy = static_cast<int>(std::lround(gy + jy));
            if (!present) continue;
            if (cx < 0 || cy < 0 || cx >= canvas.cols || cy >= canvas.rows) continue;
            if (!region(cy, cx)) continue;
            cv::ellipse(canvas, cv::Point(cx, cy), cv::Size(std::max(1, (int)a), std::max(1, (int)b)),
                        angle, 0, 360, cv::Scalar(kNucleus[0] + cj, kNucleus[1] + cj * 0.5, kNucleus[2] + cj),
                        cv::FILLED, cv::LINE_8);
        }
    }
}

// Dense eosinophilic band between radii [r0, r1], angular span [th0, th1]
// (radians, th1 > th0, wraps via normalization). One renderer serves both the
// closed ring wall (span 2*pi) and the open distractor arcs, so a wall
// fragment carries no class information by itself.
void draw_wall_band(cv::Mat& canvas, const cv::Mat1b& tissue, cv::Point2d c, double r0, double r1,
                    double th0, double th1, Rng& rng) {
    const bool full = (th1 - th0) >= 2.0 * kPi - 1e-9;
    const int x0 = std::max(0, (int)std::floor(c.x - r1) - 1), x1 = std::min(canvas.cols - 1, (int)std::ceil(c.x + r1) + 1);
    const int y0 = std::max(0, (int)std::floor(c.y - r1) - 1), y1 = std::min(canvas.rows - 1, (int)std::ceil(c.y + r1) + 1);
    cv::RNG px_rng(static_cast<uint64_t>(rng.child(0x77616c6cull).seed()));
    for (int y = y0; y <= y1; ++y) {
        const uint8_t* tis = tissue.ptr<uint8_t>(y);
        cv::Vec3b* out = canvas.ptr<cv::Vec3b>(y);
        for (int x = x0; x <= x1; ++x) {
            if (!tis[x]) continue;
            const double dx = x - c.x, dy = y - c.y;
            const double d = std::sqrt(dx * dx + dy * dy);
            if (d < r0 || d > r1) continue;
            if (!full) {
                double th = std::atan2(dy, dx);
                double rel = th - th0;
                while (rel < 0) rel += 2.0 * kPi;
                while (rel >= 2.0 * kPi) rel -= 2.0 * kPi;
                if (rel > th1 - th0) continue;
            }
            const double lam = 16.0 * std::sin(d * 0.55);               // concentric lamellae
            const double fib = 8.0 * std::sin(std::atan2(dy, dx) * 40); // radial fibers
            const double n = px_rng.uniform(-9.0, 9.0);
            out[x] = clamp_color({kWall[0] + lam + fib + n, kWall[1] + 0.5 * (lam + fib) + n,
                                  kWall[2] + lam * 0.8 + fib + n});
        }
    }
}

void fill_disc_mask(cv::Mat1b& mask, cv::Point2d c, double r, uint8_t value) {
    cv::circle(mask, cv::Point((int)std::lround(c.x), (int)std::lround(c.y)),
               (int)std::lround(r), cv::Scalar(value), cv::FILLED, cv::LINE_8);
}

}  // namespace

SynthSpec SynthSpec::load(const fs::path& path) {
    SynthSpec s;
    std::istringstream in(read_text_file(path));
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty() || line[0] == '#') continue;
        auto eq = line.find('=');
        if (eq == std::string::npos) throw ConfigError("bad synth spec line: " + line);
        const std::string key = line.substr(0, eq), val = line.substr(eq + 1);
        if (key == "width") s.width = std::stoi(val);
        else if (key == "height") s.height = std::stoi(val);
        else if (key == "num_levels") s.num_levels = std::stoi(val);
        else if (key == "tumor_blobs") s.tumor_blobs = std::stoi(val);
        else if (key == "ring_structures") s.ring_structures = std::stoi(val);
        else if (key == "distractor_arcs") s.distractor_arcs = std::stoi(val);
        else if (key == "texture_scale") s.texture_scale = std::stod(val);
        else if (key == "seed") s.seed = std::stoull(val);
        else throw ConfigError("unknown synth spec key: " + key);
    }
    return s;
}

void SynthSpec::save(const fs::path& path) const {
    std::ostringstream out;
    out << "width=" << width << "\nheight=" << height << "\nnum_levels=" << num_levels
        << "\ntumor_blobs=" << tumor_blobs << "\nring_structures=" << ring_structures
        << "\ndistractor_arcs=" << distractor_arcs << "\ntexture_scale=" << texture_scale
        << "\nseed=" << seed << "\n";
    write_text_atomic(path, out.str());
}

PyramidalSlide synth_slide(const SynthSpec& spec) {
    if (spec.width < (1 << (spec.num_levels - 1)) || spec.height < (1 << (spec.num_levels - 1)))
        throw ConfigError("synth spec dimensions too small for requested levels");
    if (spec.num_levels < 2) throw ConfigError("synth spec needs >= 2 levels");
    if (spec.tumor_blobs < 0 || spec.ring_structures < 0 || spec.distractor_arcs < 0)
        throw ConfigError("synth spec structure counts must be non-negative");

    Rng rng(spec.seed);
    const int W = spec.width, H = spec.height;
    const double m = std::min(W, H);
    const double ts = spec.texture_scale;
    const cv::Size size(W, H);

    cv::Mat canvas(H, W, CV_8UC3, cv::Scalar(kGlass[0], kGlass[1], kGlass[2]));
    {
        cv::Mat1b all(H, W, uint8_t(255));
        fill_textured(canvas, all, kGlass, 1.5, 1.2, 96.0, rng);
    }

    // Tissue: one large wavy blob around the slide center.
    const cv::Point2d tc(W * 0.5 + rng.uniform(-0.02, 0.02) * m, H * 0.5 + rng.uniform(-0.02, 0.02) * m);
    cv::Mat1b tissue = blob_mask(size, tc, W * 0.46, H * 0.46, 0.10, rng);
    fill_textured(canvas, tissue, kStroma, 9.0, 6.0, 64.0 * ts, rng);
    // Conservative inner radius: structures placed within this disc stay in tissue.
    const double tissue_core = 0.46 * m * 0.86;

    std::vector<Disc> occupied;  // footprints of placed structures
    auto place_structure = [&](double r_eff) -> std::optional<cv::Point2d> {
        for (int attempt = 0; attempt < 300; ++attempt) {
            const double max_d = tissue_core - r_eff;
            if (max_d < 0) return std::nullopt;
            const cv::Point2d c(tc.x + rng.uniform(-max_d, max_d), tc.y + rng.uniform(-max_d, max_d));
            const double dx = c.x - tc.x, dy = c.y - tc.y;
            if (dx * dx + dy * dy > max_d * max_d) continue;
            bool clash = false;
            for (const Disc& d : occupied) {
                const double sep = d.r + r_eff + 32.0;
                const double ddx = c.x - d.c.x, ddy = c.y - d.c.y;
                if (ddx * ddx + ddy * ddy < sep * sep) { clash = true; break; }
            }
            if (!clash) return c;
        }
        return std::nullopt;
    };

    LabelMask truth = LabelMask::blank(size, 0);
    truth.annotated.setTo(255);

    struct Ring { cv::Point2d c; double r_in, r_out; };
    std::vector<Ring> rings;
    for (int i = 0; i < spec.ring_structures; ++i) {
        double r_in = rng.uniform(0.28, 0.32) * m;
        double wall = rng.uniform(0.036, 0.046) * m;
        for (;;) {
            auto c = place_structure(r_in + wall);
            if (c) {
                rings.push_back({*c, r_in, r_in + wall});
                occupied.push_back({*c, r_in + wall});
                break;
            }
            r_in *= 0.8;
            wall *= 0.85;
            MRES_CHECK(r_in > 8.0, "cannot place ring structure " + std::to_string(i));
        }
    }

    struct Blob { cv::Point2d c; double r; cv::Mat1b mask; };
    std::vector<Blob> blobs;
    for (int i = 0; i < spec.tumor_blobs; ++i) {
        double r = rng.uniform(0.16, 0.20) * m;
        // Nest the blob inside a ring's lumen when one has room: the two
        // structures share texture, and the wide field must see the wall
        // around the nest.
        std::optional<cv::Point2d> c;
        if (!rings.empty()) {
            const Ring& host = rings[static_cast<size_t>(i) % rings.size()];
            const double slack = host.r_in - r * 1.12 - 12.0;
            if (slack > 0) {
                const double jr = std::min(slack, 0.05 * m);
                c = cv::Point2d(host.c.x + rng.uniform(-jr, jr), host.c.y + rng.uniform(-jr, jr));
            }
        }
        for (;;) {
            if (!c) c = place_structure(r * 1.12);  // harmonics swell the footprint
            if (c) {
                blobs.push_back({*c, r, blob_mask(size, *c, r, r, 0.10, rng)});
                occupied.push_back({*c, r * 1.12});
                break;
            }
            r *= 0.8;
            MRES_CHECK(r > 8.0, "cannot place tumor blob " + std::to_string(i));
        }
    }

    // Interiors first (nuclei bleed is overdrawn by walls afterwards).
    for (const Ring& ring : rings) {
        cv::Mat1b interior = cv::Mat1b::zeros(size);
        fill_disc_mask(interior, ring.c, ring.r_in, 255);
        stamp_nuclei(canvas, interior, ts, rng);
    }
    for (const Blob& b : blobs) stamp_nuclei(canvas, b.mask, ts, rng);

    for (const Ring& ring : rings)
        draw_wall_band(canvas, tissue, ring.c, ring.r_in, ring.r_out, 0.0, 2.0 * kPi, rng);

    // Distractor arcs: same band renderer, open span, class 0. Roughly half hug
    // a tumor blob's boundary (when any exists), the rest are strays. A stray
    // may sit inside a ring's lumen or outside it, but its band circle never
    // crosses a ring wall or a tumor blob.
    const double arc_w = rng.uniform(0.036, 0.046) * m;
    for (int i = 0; i < spec.distractor_arcs; ++i) {
        const bool hug = !blobs.empty() && (i % 2 == 0);
        const double span = rng.uniform(0.6, 1.6);
        const double start = rng.uniform(0.0, 2.0 * kPi);
        if (hug) {
            const Blob& b = blobs[static_cast<size_t>(i) % blobs.size()];
            const double r_mid = b.r * (1.0 + rng.uniform(0.10, 0.24));
            const cv::Point2d c(b.c.x + rng.uniform(-16.0, 16.0), b.c.y + rng.uniform(-16.0, 16.0));
            draw_wall_band(canvas, tissue, c, r_mid - arc_w / 2, r_mid + arc_w / 2, start, start + span, rng);
        } else {
            double r_mid = rng.uniform(0.10, 0.24) * m;
            bool placed = false;
            for (int round = 0; round < 8 && !placed; ++round) {
                for (int attempt = 0; attempt < 100 && !placed; ++attempt) {
                    const cv::Point2d c(tc.x + rng.uniform(-tissue_core * 0.9, tissue_core * 0.9),
                                        tc.y + rng.uniform(-tissue_core * 0.9, tissue_core * 0.9));
                    const double dtc = std::hypot(c.x - tc.x, c.y - tc.y);
                    if (dtc + r_mid + arc_w / 2 > tissue_core) continue;
                    bool clash = false;
                    for (const Ring& ring : rings) {
                        const double dist = std::hypot(c.x - ring.c.x, c.y - ring.c.y);
                        const double lo = std::max(0.0, dist - r_mid - arc_w / 2);
                        const double hi = dist + r_mid + arc_w / 2;
                        // Radial reach of the band vs the wall annulus.
                        if (hi >= ring.r_in - 8.0 && lo <= ring.r_out + 8.0) { clash = true; break; }
                    }
                    if (!clash)
                        for (const Blob& b : blobs) {
                            const double dist = std::hypot(c.x - b.c.x, c.y - b.c.y);
                            if (std::abs(dist - r_mid) < arc_w / 2 + b.r * 1.12 + 12.0) { clash = true; break; }
                        }
                    if (clash) continue;
                    draw_wall_band(canvas, tissue, c, r_mid - arc_w / 2, r_mid + arc_w / 2, start, start + span, rng);
                    placed = true;
                }
                r_mid *= 0.85;
                if (r_mid < 0.03 * m) break;
            }
            // Best effort: an unplaceable stray arc is simply dropped.
        }
    }

    // Exact labels from the geometry, layered in paint order: rings
    // (interior + wall) are class 2, then tumor blobs overwrite class 1.
    for (const Ring& ring : rings) fill_disc_mask(truth.classes, ring.c, ring.r_out, 2);
    for (const Blob& b : blobs) truth.classes.setTo(1, b.mask);

    PyramidalSlide slide = build_pyramid(canvas, spec.num_levels);
    slide.id = "slide_seed" + std::to_string(spec.seed);
    slide.truth = std::move(truth);
    return slide;
}

// ---------------------------------------------------------------------------
// Slide directory I/O
// ---------------------------------------------------------------------------

void imwrite_atomic(const fs::path& path, const cv::Mat& image) {
    fs::path tmp = path.parent_path() / (path.stem().string() + ".tmp" + path.extension().string());
    if (!cv::imwrite(tmp.string(), image)) throw Error("cannot write image " + path.string());
    fs::rename(tmp, path);
}

cv::Mat encode_mask_png(const LabelMask& mask) {
    static const uint8_t class_to_red[3] = {0, 128, 255};
    cv::Mat rgb(mask.classes.size(), CV_8UC3, cv::Scalar(0, 0, 0));
    for (int y = 0; y < rgb.rows; ++y) {
        const uint8_t* cl = mask.classes.ptr<uint8_t>(y);
        const uint8_t* an = mask.annotated.ptr<uint8_t>(y);
        cv::Vec3b* out = rgb.ptr<cv::Vec3b>(y);
        for (int x = 0; x < rgb.cols; ++x) out[x] = {class_to_red[cl[x]], an[x] ? uint8_t(255) : uint8_t(0), 0};
    }
    return rgb;
}

LabelMask decode_mask_png(const cv::Mat& rgb, int level) {
    MRES_CHECK(rgb.type() == CV_8UC3, "mask png must be 8-bit RGB");
    LabelMask mask = LabelMask::blank(rgb.size(), level);
    for (int y = 0; y < rgb.rows; ++y) {
        const cv::Vec3b* in = rgb.ptr<cv::Vec3b>(y);
        uint8_t* cl = mask.classes.ptr<uint8_t>(y);
        uint8_t* an = mask.annotated.ptr<uint8_t>(y);
        for (int x = 0; x < rgb.cols; ++x) {
            cl[x] = in[x][0] >= 192 ? 2 : (in[x][0] >= 64 ? 1 : 0);
            an[x] = in[x][1] >= 128 ? 255 : 0;
        }
    }
    return mask;
}

namespace {

void write_png_rgb(const fs::path& path, const cv::Mat& rgb) {
    cv::Mat bgr;
    cv::cvtColor(rgb, bgr, cv::COLOR_RGB2BGR);
    imwrite_atomic(path, bgr);
}

cv::Mat read_png_rgb(const fs::path& path) {
    cv::Mat bgr = cv::imread(path.string(), cv::IMREAD_COLOR);
    if (bgr.empty()) throw Error("cannot read image " + path.string());
    cv::Mat rgb;
    cv::cvtColor(bgr, rgb, cv::COLOR_BGR2RGB);
    return rgb;
}

}  // namespace

void save_slide(const PyramidalSlide& slide, const fs::path& dir) {
    MRES_CHECK(slide.num_levels() >= 2, "slide must have >= 2 levels");
    fs::create_directories(dir);
    std::ostringstream man;
    man << "id=" << slide.id << "\nnum_levels=" << slide.num_levels()
        << "\nwidth=" << slide.levels[0].cols << "\nheight=" << slide.levels[0].rows << "\nbase_mpp=";
    man.precision(17);
    man << slide.base_mpp << "\nstain=" << slide.tags.stain << "\nscanner=" << slide.tags.scanner
        << "\nsource=" << slide.tags.source << "\n";
    write_text_atomic(dir / "manifest", man.str());
    for (int k = 0; k < slide.num_levels(); ++k)
        write_png_rgb(dir / ("level_" + std::to_string(k) + ".png"), slide.levels[k]);
    if (slide.truth) write_png_rgb(dir / "mask_level0.png", encode_mask_png(*slide.truth));
    if (slide.annotation) write_png_rgb(dir / "annotation_level0.png", encode_mask_png(*slide.annotation));
}

PyramidalSlide load_slide(const fs::path& dir) {
    PyramidalSlide slide;
    std::map<std::string, std::string> kv;
    std::istringstream in(read_text_file(dir / "manifest"));
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        auto eq = line.find('=');
        if (eq == std::string::npos) throw Error("bad manifest line in " + dir.string() + ": " + line);
        kv[line.substr(0, eq)] = line.substr(eq + 1);
    }
    for (const char* key : {"id", "num_levels", "width", "height", "base_mpp", "stain", "scanner", "source"})
        if (!kv.count(key)) throw Error("manifest in " + dir.string() + " missing key " + key);
    slide.id = kv["id"];
    slide.base_mpp = std::stod(kv["base_mpp"]);
    slide.tags = {kv["stain"], kv["scanner"], kv["source"]};
    const int num_levels = std::stoi(kv["num_levels"]);
    const int width = std::stoi(kv["width"]), height = std::stoi(kv["height"]);
    int w = width, h = height;
    for (int k = 0; k < num_levels; ++k) {
        fs::path file = dir / ("level_" + std::to_string(k) + ".png");
        if (!fs::exists(file)) throw Error("missing level file " + file.string());
        cv::Mat img = read_png_rgb(file);
        if (img.cols != w || img.rows != h)
            throw Error("level " + std::to_string(k) + " dimension mismatch in " + dir.string());
        slide.levels.push_back(img);
        w = (w + 1) / 2;
        h = (h + 1) / 2;
    }
    if (fs::exists(dir / "mask_level0.png")) {
        cv::Mat png = read_png_rgb(dir / "mask_level0.png");
        if (png.size() != slide.levels[0].size()) throw Error("mask dimension mismatch in " + dir.string());
        slide.truth = decode_mask_png(png, 0);
    }
    if (fs::exists(dir / "annotation_level0.png")) {
        cv::Mat png = read_png_rgb(dir / "annotation_level0.png");
        if (png.size() != slide.levels[0].size()) throw Error("annotation dimension mismatch in " + dir.string());
        slide.annotation = decode_mask_png(png, 0);
    }
    return slide;
}

}  // namespace mres
