#pragma once

#include <cmath>
#include <numbers>
#include <stdexcept>

#include "hvdet/autodiff.hpp"
#include "hvdet/tensor.hpp"

namespace hvdet {

inline constexpr double kPeTemperature = 10000.0;
inline constexpr double kSigmoidEps = 1e-5;

inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

/// log(x / (1-x)) after clamping x into [eps, 1-eps].
inline double inverse_sigmoid(double x, double eps = kSigmoidEps) {
    const double c = std::min(1.0 - eps, std::max(eps, x));
    return std::log(c / (1.0 - c));
}

inline Tensor inverse_sigmoid(const Tensor& t, double eps = kSigmoidEps) {
    Tensor out = t;
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] = inverse_sigmoid(out[i], eps);
    return out;
}

/// Sinusoidal embedding of a normalized scalar coordinate:
///   pe[2i]   = sin(c * 2pi / T^(2i/dim))
///   pe[2i+1] = cos(c * 2pi / T^(2i/dim))
inline Tensor sinusoidal_pe(double coord, std::size_t dim, double temperature = kPeTemperature) {
    if (dim == 0 || dim % 2 != 0)
        throw std::invalid_argument("sinusoidal_pe: dim must be even and positive");
    if (coord < 0.0 || coord > 1.0)
        throw std::domain_error("sinusoidal_pe: coord must lie in [0,1]");
    Tensor pe({dim});
    const double scaled = coord * 2.0 * std::numbers::pi;
    for (std::size_t i = 0; 2 * i < dim; ++i) {
        const double freq = std::pow(temperature, 2.0 * static_cast<double>(i) /
                                                      static_cast<double>(dim));
        pe[2 * i] = std::sin(scaled / freq);
        pe[2 * i + 1] = std::cos(scaled / freq);
    }
    return pe;
}

/// 2-D point embedding: dim/2 per axis, y first then x, concatenated.
inline Tensor sinusoidal_pe_2d(double cx, double cy, std::size_t dim,
                               double temperature = kPeTemperature) {
    if (dim % 4 != 0) throw std::invalid_argument("sinusoidal_pe_2d: dim must be divisible by 4");
    const Tensor py = sinusoidal_pe(cy, dim / 2, temperature);
    const Tensor px = sinusoidal_pe(cx, dim / 2, temperature);
    Tensor pe({dim});
    for (std::size_t i = 0; i < dim / 2; ++i) {
        pe[i] = py[i];
        pe[dim / 2 + i] = px[i];
    }
    return pe;
}

/// Embedding of a (cx, cy, w, h) box: dim/4 per coordinate, concatenated in that order.
inline Tensor sinusoidal_pe_box(double cx, double cy, double w, double h, std::size_t dim,
                                double temperature = kPeTemperature) {
    if (dim % 8 != 0) throw std::invalid_argument("sinusoidal_pe_box: dim must be divisible by 8");
    const double coords[4] = {cx, cy, w, h};
    Tensor pe({dim});
    const std::size_t sub = dim / 4;
    for (std::size_t c = 0; c < 4; ++c) {
        const Tensor p = sinusoidal_pe(coords[c], sub, temperature);
        for (std::size_t i = 0; i < sub; ++i) pe[c * sub + i] = p[i];
    }
    return pe;
}

namespace ad {

/// Differentiable box embedding: coords is a [1,4] variable of normalized
/// (cx, cy, w, h); output is [1,dim] with dim/4 per coordinate. Needed for the
/// content-query initialization path where the embedded box carries gradients.
inline Var pe_box(const Var& coords, std::size_t dim, double temperature = kPeTemperature) {
    if (dim % 8 != 0) throw std::invalid_argument("pe_box: dim must be divisible by 8");
    if (coords->value.numel() != 4) throw std::invalid_argument("pe_box: expected 4 coords");
    const std::size_t sub = dim / 4;
    Tensor out({1, dim});
    Tensor dpe({dim});  // d pe / d coord, per entry
    const double two_pi = 2.0 * std::numbers::pi;
    for (std::size_t c = 0; c < 4; ++c) {
        const double scaled = coords->value[c] * two_pi;
        for (std::size_t i = 0; 2 * i < sub; ++i) {
            const double freq = std::pow(temperature, 2.0 * static_cast<double>(i) /
                                                          static_cast<double>(sub));
            const double arg = scaled / freq;
            const double darg = two_pi / freq;
            out[c * sub + 2 * i] = std::sin(arg);
            out[c * sub + 2 * i + 1] = std::cos(arg);
            dpe[c * sub + 2 * i] = std::cos(arg) * darg;
            dpe[c * sub + 2 * i + 1] = -std::sin(arg) * darg;
        }
    }
    return make(std::move(out), {coords}, [dpe, sub](Node& n) {
        Tensor g(n.parents[0]->value.shape());
        for (std::size_t c = 0; c < 4; ++c)
            for (std::size_t i = 0; i < sub; ++i)
                g[c] += n.grad[c * sub + i] * dpe[c * sub + i];
        n.parents[0]->accumulate(g);
    });
}

} // namespace ad

} // namespace hvdet
