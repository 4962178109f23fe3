// SPDX-License-Identifier: Apache-2.0
// Copyright Contributors to the Umbra Project.

#ifndef UMBRA_COLOR_HPP
#define UMBRA_COLOR_HPP

#include <cmath>

namespace umbra {

/// CIELAB under D65. L in [0,100], a/b roughly [-128,127]. Inputs are sRGB
/// components in [0,1].
struct Lab {
    double l = 0.0, a = 0.0, b = 0.0;
};

namespace colordetail {

inline double srgb_to_linear(double c) {
    return c <= 0.04045 ? c / 12.92 : std::pow((c + 0.055) / 1.055, 2.4);
}

inline double linear_to_srgb(double c) {
    return c <= 0.0031308 ? 12.92 * c : 1.055 * std::pow(c, 1.0 / 2.4) - 0.055;
}

inline double lab_f(double t) {
    constexpr double delta3 = (6.0 / 29.0) * (6.0 / 29.0) * (6.0 / 29.0);
    constexpr double scale = 1.0 / (3.0 * (6.0 / 29.0) * (6.0 / 29.0));
    return t > delta3 ? std::cbrt(t) : t * scale + 4.0 / 29.0;
}

inline double lab_finv(double ft) {
    constexpr double delta = 6.0 / 29.0;
    return ft > delta ? ft * ft * ft : 3.0 * delta * delta * (ft - 4.0 / 29.0);
}

// D65 white point; the Y row of the sRGB matrix does not sum exactly to one
// at this precision, so white maps to L slightly above 100 by design.
constexpr double kXn = 0.95047, kYn = 1.0, kZn = 1.08883;

}  // namespace colordetail

inline Lab srgb_to_lab(double r, double g, double b) {
    using namespace colordetail;
    const double R = srgb_to_linear(r), G = srgb_to_linear(g), B = srgb_to_linear(b);
    const double X = 0.4124564 * R + 0.3575761 * G + 0.1804375 * B;
    const double Y = 0.2126729 * R + 0.7151522 * G + 0.0721750 * B;
    const double Z = 0.0193339 * R + 0.1191920 * G + 0.9503041 * B;
    const double fx = lab_f(X / kXn), fy = lab_f(Y / kYn), fz = lab_f(Z / kZn);
    return {116.0 * fy - 16.0, 500.0 * (fx - fy), 200.0 * (fy - fz)};
}

inline void lab_to_srgb(const Lab& lab, double& r, double& g, double& b) {
    using namespace colordetail;
    const double fy = (lab.l + 16.0) / 116.0;
    const double fx = fy + lab.a / 500.0;
    const double fz = fy - lab.b / 200.0;
    const double X = kXn * lab_finv(fx);
    const double Y = kYn * lab_finv(fy);
    const double Z = kZn * lab_finv(fz);
    // Exact inverse of the forward matrix (not the published rounded one),
    // so the conversion roundtrips at machine precision.
    const double R = 3.2404548360214083 * X - 1.5371388501025751 * Y - 0.49853154686848089 * Z;
    const double G = -0.96926638987565372 * X + 1.8760109288424913 * Y + 0.041556082346673524 * Z;
    const double B = 0.055643419604213658 * X - 0.20402585426769815 * Y + 1.0572251624579287 * Z;
    r = linear_to_srgb(R);
    g = linear_to_srgb(G);
    b = linear_to_srgb(B);
}

}  // namespace umbra

#endif  // UMBRA_COLOR_HPP
