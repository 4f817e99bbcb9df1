#pragma once

#include <cstddef>
#include <vector>

#include "lndet/geometry.hpp"

namespace lndet {

/// Single-channel 2D float image, row-major (x fastest).
struct Image {
    int w = 0, h = 0;
    std::vector<float> px;

    Image() = default;
    Image(int width, int height, float fill = 0.0f)
        : w(width), h(height), px(static_cast<std::size_t>(width) * height, fill) {}

    float& at(int x, int y) { return px[static_cast<std::size_t>(y) * w + x]; }
    float at(int x, int y) const { return px[static_cast<std::size_t>(y) * w + x]; }

    bool same_dims(const Image& o) const { return w == o.w && h == o.h; }
};

Image hflip(const Image& img);
Image vflip(const Image& img);

/// Integer translation with zero fill outside; +dx moves content right.
Image shift(const Image& img, int dx, int dy);

/// Rotation about the image center; bilinear interpolation, border replicate.
Image rotate_bilinear(const Image& img, double degrees);

Image resize_bilinear(const Image& img, int new_w, int new_h);

/// Separable Gaussian blur, kernel truncated at 3 sigma. sigma <= 0 is identity.
Image gaussian_blur(const Image& img, double sigma);

Box hflip_box(const Box& b, double w);
Box vflip_box(const Box& b, double h);
Box shift_box(const Box& b, double dx, double dy);
/// Axis-aligned hull of the box corners rotated about the image center.
Box rotate_box_hull(const Box& b, double degrees, double w, double h);

}  // namespace lndet
