#include "lndet/net.hpp"

#include <algorithm>
#include <cmath>

namespace lndet {

void conv_forward(const ConvSpec& spec, const double* w, const double* b, const Tensor& x,
                  Tensor& y) {
    const int oh = spec.out_dim(x.h);
    const int ow = spec.out_dim(x.w);
    if (x.c != spec.in_c) throw NumericError("conv_forward: channel mismatch");
    y = Tensor(spec.out_c, oh, ow);

    for (int oc = 0; oc < spec.out_c; ++oc) {
        double* yp = y.plane(oc);
        const double bias = b[oc];
        for (std::size_t i = 0; i < y.plane_size(); ++i) yp[i] = bias;
        for (int ic = 0; ic < spec.in_c; ++ic) {
            const double* xp = x.plane(ic);
            const double* wk = w + (static_cast<std::size_t>(oc) * spec.in_c + ic) *
                                       static_cast<std::size_t>(spec.k) * spec.k;
            for (int ky = 0; ky < spec.k; ++ky) {
                for (int kx = 0; kx < spec.k; ++kx) {
                    const double wv = wk[ky * spec.k + kx];
                    if (wv == 0.0) continue;
                    // Output rows where the tapped input row is in bounds.
                    for (int oy = 0; oy < oh; ++oy) {
                        const int iy = oy * spec.stride + ky - spec.pad;
                        if (iy < 0 || iy >= x.h) continue;
                        double* yrow = yp + static_cast<std::size_t>(oy) * ow;
                        const double* xrow = xp + static_cast<std::size_t>(iy) * x.w;
                        // ix = ox*stride + kx - pad must lie in [0, x.w)
                        int ox_lo = 0;
                        while (ox_lo < ow && ox_lo * spec.stride + kx - spec.pad < 0) ++ox_lo;
                        int ox_hi = ow - 1;
                        while (ox_hi >= 0 && ox_hi * spec.stride + kx - spec.pad >= x.w) --ox_hi;
                        const int base = kx - spec.pad;
                        for (int ox = ox_lo; ox <= ox_hi; ++ox)
                            yrow[ox] += wv * xrow[ox * spec.stride + base];
                    }
                }
            }
        }
    }
}

void conv_backward(const ConvSpec& spec, const double* w, const Tensor& x, const Tensor& dy,
                   double* gw, double* gb, Tensor* dx) {
    const int oh = dy.h, ow = dy.w;
    if (dx && (dx->c != x.c || dx->h != x.h || dx->w != x.w))
        throw NumericError("conv_backward: dx tensor not sized to the input");

    for (int oc = 0; oc < spec.out_c; ++oc) {
        const double* dyp = dy.plane(oc);
        double acc_b = 0.0;
        for (std::size_t i = 0; i < dy.plane_size(); ++i) acc_b += dyp[i];
        gb[oc] += acc_b;

        for (int ic = 0; ic < spec.in_c; ++ic) {
            const double* xp = x.plane(ic);
            double* dxp = dx ? dx->plane(ic) : nullptr;
            const std::size_t wbase = (static_cast<std::size_t>(oc) * spec.in_c + ic) *
                                      static_cast<std::size_t>(spec.k) * spec.k;
            for (int ky = 0; ky < spec.k; ++ky) {
                for (int kx = 0; kx < spec.k; ++kx) {
                    const double wv = w[wbase + ky * spec.k + kx];
                    double acc_w = 0.0;
                    for (int oy = 0; oy < oh; ++oy) {
                        const int iy = oy * spec.stride + ky - spec.pad;
                        if (iy < 0 || iy >= x.h) continue;
                        const double* dyrow = dyp + static_cast<std::size_t>(oy) * ow;
                        const double* xrow = xp + static_cast<std::size_t>(iy) * x.w;
                        double* dxrow = dxp ? dxp + static_cast<std::size_t>(iy) * x.w : nullptr;
                        int ox_lo = 0;
                        while (ox_lo < ow && ox_lo * spec.stride + kx - spec.pad < 0) ++ox_lo;
                        int ox_hi = ow - 1;
                        while (ox_hi >= 0 && ox_hi * spec.stride + kx - spec.pad >= x.w) --ox_hi;
                        const int base = kx - spec.pad;
                        for (int ox = ox_lo; ox <= ox_hi; ++ox) {
                            const double g = dyrow[ox];
                            acc_w += g * xrow[ox * spec.stride + base];
                            if (dxrow) dxrow[ox * spec.stride + base] += wv * g;
                        }
                    }
                    gw[wbase + ky * spec.k + kx] += acc_w;
                }
            }
        }
    }
}

void relu_forward_inplace(Tensor& t) {
    for (auto& x : t.v) x = x > 0.0 ? x : 0.0;
}

void relu_backward_inplace(const Tensor& y, Tensor& dy) {
    for (std::size_t i = 0; i < dy.v.size(); ++i)
        if (y.v[i] <= 0.0) dy.v[i] = 0.0;
}

namespace {

struct BilinearCell {
    int x0, x1, y0, y1;
    double fx, fy;
    bool u_inside, v_inside;  // false where the coordinate was clamped
};

BilinearCell locate(const Tensor& f, double u, double v) {
    BilinearCell c{};
    c.u_inside = u >= 0.0 && u <= static_cast<double>(f.w - 1);
    c.v_inside = v >= 0.0 && v <= static_cast<double>(f.h - 1);
    const double uc = std::clamp(u, 0.0, static_cast<double>(f.w - 1));
    const double vc = std::clamp(v, 0.0, static_cast<double>(f.h - 1));
    c.x0 = std::min(static_cast<int>(std::floor(uc)), f.w - 2);
    c.y0 = std::min(static_cast<int>(std::floor(vc)), f.h - 2);
    c.x0 = std::max(c.x0, 0);
    c.y0 = std::max(c.y0, 0);
    c.x1 = std::min(c.x0 + 1, f.w - 1);
    c.y1 = std::min(c.y0 + 1, f.h - 1);
    c.fx = uc - c.x0;
    c.fy = vc - c.y0;
    return c;
}

}  // namespace

void bilinear_sample(const Tensor& f, double u, double v, double* out) {
    const BilinearCell c = locate(f, u, v);
    for (int ch = 0; ch < f.c; ++ch) {
        const double* p = f.plane(ch);
        const double a = p[static_cast<std::size_t>(c.y0) * f.w + c.x0];
        const double b = p[static_cast<std::size_t>(c.y0) * f.w + c.x1];
        const double d = p[static_cast<std::size_t>(c.y1) * f.w + c.x0];
        const double e = p[static_cast<std::size_t>(c.y1) * f.w + c.x1];
        const double top = a * (1.0 - c.fx) + b * c.fx;
        const double bot = d * (1.0 - c.fx) + e * c.fx;
        out[ch] = top * (1.0 - c.fy) + bot * c.fy;
    }
}

void bilinear_sample_backward(const Tensor& f, double u, double v, const double* dout,
                              Tensor& df, double& du, double& dv) {
    const BilinearCell c = locate(f, u, v);
    for (int ch = 0; ch < f.c; ++ch) {
        const double* p = f.plane(ch);
        double* dp = df.plane(ch);
        const double a = p[static_cast<std::size_t>(c.y0) * f.w + c.x0];
        const double b = p[static_cast<std::size_t>(c.y0) * f.w + c.x1];
        const double d = p[static_cast<std::size_t>(c.y1) * f.w + c.x0];
        const double e = p[static_cast<std::size_t>(c.y1) * f.w + c.x1];
        const double g = dout[ch];

        dp[static_cast<std::size_t>(c.y0) * f.w + c.x0] += g * (1.0 - c.fx) * (1.0 - c.fy);
        dp[static_cast<std::size_t>(c.y0) * f.w + c.x1] += g * c.fx * (1.0 - c.fy);
        dp[static_cast<std::size_t>(c.y1) * f.w + c.x0] += g * (1.0 - c.fx) * c.fy;
        dp[static_cast<std::size_t>(c.y1) * f.w + c.x1] += g * c.fx * c.fy;

        if (c.u_inside) du += g * ((b - a) * (1.0 - c.fy) + (e - d) * c.fy);
        if (c.v_inside) dv += g * ((d - a) * (1.0 - c.fx) + (e - b) * c.fx);
    }
}

void check_finite(const Tensor& t, const std::string& where) {
    for (const double x : t.v)
        if (!std::isfinite(x))
            throw NumericError("forward: non-finite activation in " + where);
}

}  // namespace lndet
