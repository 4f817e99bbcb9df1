#pragma once

#include <algorithm>
#include <cmath>

namespace lndet {

/// Axis-aligned 2D box in continuous pixel coordinates, half-open:
/// area = (x1 - x0) * (y1 - y0). Degenerate (zero-area) boxes are legal at
/// this level; stricter rules live with annotations.
struct Box {
    double x0 = 0.0, y0 = 0.0, x1 = 0.0, y1 = 0.0;

    double width() const { return x1 - x0; }
    double height() const { return y1 - y0; }
    double area() const { return width() * height(); }
    double cx() const { return 0.5 * (x0 + x1); }
    double cy() const { return 0.5 * (y0 + y1); }
    bool well_ordered() const { return x0 <= x1 && y0 <= y1; }
    bool degenerate() const { return !(x0 < x1 && y0 < y1); }

    bool operator==(const Box&) const = default;
};

inline double intersection_area(const Box& a, const Box& b) {
    const double iw = std::min(a.x1, b.x1) - std::max(a.x0, b.x0);
    const double ih = std::min(a.y1, b.y1) - std::max(a.y0, b.y0);
    return (iw > 0.0 && ih > 0.0) ? iw * ih : 0.0;
}

/// Intersection over union; 0 when the union has zero area (both degenerate).
inline double iou(const Box& a, const Box& b) {
    const double inter = intersection_area(a, b);
    const double uni = a.area() + b.area() - inter;
    return uni > 0.0 ? inter / uni : 0.0;
}

inline Box clip_box(const Box& b, double w, double h) {
    return Box{std::clamp(b.x0, 0.0, w), std::clamp(b.y0, 0.0, h),
               std::clamp(b.x1, 0.0, w), std::clamp(b.y1, 0.0, h)};
}

}  // namespace lndet
