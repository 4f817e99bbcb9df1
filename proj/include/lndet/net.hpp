#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "lndet/error.hpp"

namespace lndet {

/// Dense CHW tensor, double precision (analytic gradients are finite-
/// difference-checked at 1e-3 relative error, which float32 cannot sustain).
struct Tensor {
    int c = 0, h = 0, w = 0;
    std::vector<double> v;

    Tensor() = default;
    Tensor(int ci, int hi, int wi)
        : c(ci), h(hi), w(wi), v(static_cast<std::size_t>(ci) * hi * wi, 0.0) {}

    std::size_t plane_size() const { return static_cast<std::size_t>(h) * w; }
    double* plane(int ci) { return v.data() + static_cast<std::size_t>(ci) * plane_size(); }
    const double* plane(int ci) const {
        return v.data() + static_cast<std::size_t>(ci) * plane_size();
    }
    double& at(int ci, int y, int x) { return plane(ci)[static_cast<std::size_t>(y) * w + x]; }
    double at(int ci, int y, int x) const {
        return plane(ci)[static_cast<std::size_t>(y) * w + x];
    }
    void zero() { std::fill(v.begin(), v.end(), 0.0); }
};

struct ConvSpec {
    int in_c = 0, out_c = 0, k = 3, stride = 1, pad = 1;

    std::size_t weight_count() const {
        return static_cast<std::size_t>(out_c) * in_c * k * k;
    }
    int out_dim(int in) const { return (in + 2 * pad - k) / stride + 1; }
};

/// y = conv(x; w, b). Weight layout [oc][ic][ky][kx]; zero padding.
void conv_forward(const ConvSpec& spec, const double* w, const double* b, const Tensor& x,
                  Tensor& y);

/// Accumulates gw/gb and, when dx != nullptr, the input gradient into dx
/// (which must be pre-sized to x and may already hold other contributions).
/// x must be the forward input, dy the output gradient.
void conv_backward(const ConvSpec& spec, const double* w, const Tensor& x, const Tensor& dy,
                   double* gw, double* gb, Tensor* dx);

void relu_forward_inplace(Tensor& t);
/// Masks dy in place using the post-activation tensor y (y > 0 passes).
void relu_backward_inplace(const Tensor& y, Tensor& dy);

/// Bilinear sample of all channels at continuous (u, v) in feature
/// coordinates, border-replicated outside [0, w-1] x [0, h-1].
void bilinear_sample(const Tensor& f, double u, double v, double* out);

/// Backward pass: scatters channel gradients dout into df and accumulates the
/// positional gradients into du/dv (zero where the position was clamped).
void bilinear_sample_backward(const Tensor& f, double u, double v, const double* dout,
                              Tensor& df, double& du, double& dv);

/// Throws NumericError naming `where` if any entry is non-finite.
void check_finite(const Tensor& t, const std::string& where);

}  // namespace lndet
