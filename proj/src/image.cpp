#include "lndet/image.hpp"

#include <algorithm>
#include <cmath>

namespace lndet {

Image hflip(const Image& img) {
    Image out(img.w, img.h);
    for (int y = 0; y < img.h; ++y)
        for (int x = 0; x < img.w; ++x) out.at(x, y) = img.at(img.w - 1 - x, y);
    return out;
}

Image vflip(const Image& img) {
    Image out(img.w, img.h);
    for (int y = 0; y < img.h; ++y)
        for (int x = 0; x < img.w; ++x) out.at(x, y) = img.at(x, img.h - 1 - y);
    return out;
}

Image shift(const Image& img, int dx, int dy) {
    Image out(img.w, img.h, 0.0f);
    for (int y = 0; y < img.h; ++y) {
        const int sy = y - dy;
        if (sy < 0 || sy >= img.h) continue;
        for (int x = 0; x < img.w; ++x) {
            const int sx = x - dx;
            if (sx < 0 || sx >= img.w) continue;
            out.at(x, y) = img.at(sx, sy);
        }
    }
    return out;
}

namespace {

float sample_clamped(const Image& img, double x, double y) {
    x = std::clamp(x, 0.0, static_cast<double>(img.w - 1));
    y = std::clamp(y, 0.0, static_cast<double>(img.h - 1));
    int x0 = static_cast<int>(std::floor(x));
    int y0 = static_cast<int>(std::floor(y));
    if (x0 > img.w - 2) x0 = std::max(0, img.w - 2);
    if (y0 > img.h - 2) y0 = std::max(0, img.h - 2);
    const int x1 = std::min(x0 + 1, img.w - 1);
    const int y1 = std::min(y0 + 1, img.h - 1);
    const double fx = x - x0;
    const double fy = y - y0;
    const double top = img.at(x0, y0) * (1.0 - fx) + img.at(x1, y0) * fx;
    const double bot = img.at(x0, y1) * (1.0 - fx) + img.at(x1, y1) * fx;
    return static_cast<float>(top * (1.0 - fy) + bot * fy);
}

}  // namespace

Image rotate_bilinear(const Image& img, double degrees) {
    const double rad = degrees * M_PI / 180.0;
    const double c = std::cos(rad), s = std::sin(rad);
    const double cx = 0.5 * img.w, cy = 0.5 * img.h;
    Image out(img.w, img.h);
    // Inverse mapping: output pixel center -> input coordinates.
    for (int y = 0; y < img.h; ++y) {
        for (int x = 0; x < img.w; ++x) {
            const double ox = x + 0.5 - cx;
            const double oy = y + 0.5 - cy;
            const double ix = c * ox + s * oy + cx - 0.5;
            const double iy = -s * ox + c * oy + cy - 0.5;
            out.at(x, y) = sample_clamped(img, ix, iy);
        }
    }
    return out;
}

Image resize_bilinear(const Image& img, int new_w, int new_h) {
    Image out(new_w, new_h);
    const double sx = static_cast<double>(img.w) / new_w;
    const double sy = static_cast<double>(img.h) / new_h;
    for (int y = 0; y < new_h; ++y) {
        for (int x = 0; x < new_w; ++x) {
            const double ix = (x + 0.5) * sx - 0.5;
            const double iy = (y + 0.5) * sy - 0.5;
            out.at(x, y) = sample_clamped(img, ix, iy);
        }
    }
    return out;
}

Image gaussian_blur(const Image& img, double sigma) {
    if (sigma <= 0.0) return img;
    const int radius = std::max(1, static_cast<int>(std::ceil(3.0 * sigma)));
    std::vector<double> kernel(2 * radius + 1);
    double sum = 0.0;
    for (int i = -radius; i <= radius; ++i) {
        kernel[i + radius] = std::exp(-0.5 * (i * i) / (sigma * sigma));
        sum += kernel[i + radius];
    }
    for (auto& k : kernel) k /= sum;

    Image tmp(img.w, img.h), out(img.w, img.h);
    for (int y = 0; y < img.h; ++y)
        for (int x = 0; x < img.w; ++x) {
            double acc = 0.0;
            for (int i = -radius; i <= radius; ++i) {
                const int sx = std::clamp(x + i, 0, img.w - 1);
                acc += kernel[i + radius] * img.at(sx, y);
            }
            tmp.at(x, y) = static_cast<float>(acc);
        }
    for (int y = 0; y < img.h; ++y)
        for (int x = 0; x < img.w; ++x) {
            double acc = 0.0;
            for (int i = -radius; i <= radius; ++i) {
                const int sy = std::clamp(y + i, 0, img.h - 1);
                acc += kernel[i + radius] * tmp.at(x, sy);
            }
            out.at(x, y) = static_cast<float>(acc);
        }
    return out;
}

Box hflip_box(const Box& b, double w) { return Box{w - b.x1, b.y0, w - b.x0, b.y1}; }
Box vflip_box(const Box& b, double h) { return Box{b.x0, h - b.y1, b.x1, h - b.y0}; }
Box shift_box(const Box& b, double dx, double dy) {
    return Box{b.x0 + dx, b.y0 + dy, b.x1 + dx, b.y1 + dy};
}

Box rotate_box_hull(const Box& b, double degrees, double w, double h) {
    const double rad = degrees * M_PI / 180.0;
    // Forward rotation of the content: a content point p maps to R(p - c) + c
    // with R the rotation the image transform applies (inverse of its inverse map).
    const double c = std::cos(rad), s = std::sin(rad);
    const double cx = 0.5 * w, cy = 0.5 * h;
    const double xs[4] = {b.x0, b.x1, b.x0, b.x1};
    const double ys[4] = {b.y0, b.y0, b.y1, b.y1};
    double mnx = 1e300, mny = 1e300, mxx = -1e300, mxy = -1e300;
    for (int i = 0; i < 4; ++i) {
        const double ox = xs[i] - cx, oy = ys[i] - cy;
        const double rx = c * ox - s * oy + cx;
        const double ry = s * ox + c * oy + cy;
        mnx = std::min(mnx, rx);
        mny = std::min(mny, ry);
        mxx = std::max(mxx, rx);
        mxy = std::max(mxy, ry);
    }
    return Box{mnx, mny, mxx, mxy};
}

}  // namespace lndet
