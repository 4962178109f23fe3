// SPDX-License-Identifier: Apache-2.0
// Copyright Contributors to the Umbra Project.

#ifndef UMBRA_IMAGE_HPP
#define UMBRA_IMAGE_HPP

#include <png.h>

#include <cstdio>
#include <string>
#include <vector>

#include "umbra/tensor.hpp"

namespace umbra {

/// Interleaved row-major HWC image, values in [0,1]. One or three channels.
struct Image {
    int width = 0, height = 0, channels = 0;
    std::vector<double> pixels;

    Image() = default;
    Image(int w, int h, int c, double fill = 0.0)
        : width(w), height(h), channels(c),
          pixels(static_cast<std::size_t>(w) * h * c, fill) {}

    double& at(int y, int x, int c) {
        return pixels[(static_cast<std::size_t>(y) * width + x) * channels + c];
    }
    double at(int y, int x, int c) const {
        return pixels[(static_cast<std::size_t>(y) * width + x) * channels + c];
    }
};

/// Reads a PNG of any color type as 8-bit, grayscale (channels=1) or RGB
/// (channels=3); values are k/255.
inline Image load_png(const std::string& path, int channels = 3) {
    check(channels == 1 || channels == 3, "load_png: channels must be 1 or 3");
    png_image im{};
    im.version = PNG_IMAGE_VERSION;
    if (!png_image_begin_read_from_file(&im, path.c_str()))
        throw Error("load_png: cannot open " + path + ": " + im.message);
    im.format = channels == 3 ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
    std::vector<unsigned char> buf(PNG_IMAGE_SIZE(im));
    if (!png_image_finish_read(&im, nullptr, buf.data(), 0, nullptr)) {
        png_image_free(&im);
        throw Error("load_png: decode failed for " + path + ": " + im.message);
    }
    Image out(static_cast<int>(im.width), static_cast<int>(im.height), channels);
    for (std::size_t i = 0; i < buf.size(); ++i) out.pixels[i] = buf[i] / 255.0;
    return out;
}

/// Writes 8-bit PNG; values are clamped to [0,1] and rounded.
inline void save_png(const std::string& path, const Image& img) {
    check(img.channels == 1 || img.channels == 3, "save_png: channels must be 1 or 3");
    check(img.width > 0 && img.height > 0, "save_png: empty image");
    png_image im{};
    im.version = PNG_IMAGE_VERSION;
    im.width = static_cast<png_uint_32>(img.width);
    im.height = static_cast<png_uint_32>(img.height);
    im.format = img.channels == 3 ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
    std::vector<unsigned char> buf(img.pixels.size());
    for (std::size_t i = 0; i < buf.size(); ++i) {
        double v = img.pixels[i];
        v = v < 0.0 ? 0.0 : (v > 1.0 ? 1.0 : v);
        buf[i] = static_cast<unsigned char>(std::lround(v * 255.0));
    }
    if (!png_image_write_to_file(&im, path.c_str(), 0, buf.data(), 0, nullptr))
        throw Error("save_png: write failed for " + path + ": " + im.message);
}

/// Bilinear resize with half-pixel centers: src = (dst + 0.5) * scale - 0.5.
inline Image resize_bilinear(const Image& img, int nw, int nh) {
    check(nw > 0 && nh > 0, "resize_bilinear: bad target size");
    if (nw == img.width && nh == img.height) return img;
    Image out(nw, nh, img.channels);
    const double sx = static_cast<double>(img.width) / nw;
    const double sy = static_cast<double>(img.height) / nh;
    for (int y = 0; y < nh; ++y) {
        double fy = (y + 0.5) * sy - 0.5;
        fy = std::min(std::max(fy, 0.0), static_cast<double>(img.height - 1));
        const int y0 = static_cast<int>(std::floor(fy));
        const int y1 = std::min(y0 + 1, img.height - 1);
        const double wy = fy - y0;
        for (int x = 0; x < nw; ++x) {
            double fx = (x + 0.5) * sx - 0.5;
            fx = std::min(std::max(fx, 0.0), static_cast<double>(img.width - 1));
            const int x0 = static_cast<int>(std::floor(fx));
            const int x1 = std::min(x0 + 1, img.width - 1);
            const double wx = fx - x0;
            for (int c = 0; c < img.channels; ++c) {
                const double top = (1.0 - wx) * img.at(y0, x0, c) + wx * img.at(y0, x1, c);
                const double bot = (1.0 - wx) * img.at(y1, x0, c) + wx * img.at(y1, x1, c);
                out.at(y, x, c) = (1.0 - wy) * top + wy * bot;
            }
        }
    }
    return out;
}

/// Rebinarizes a mask image in place at the given threshold.
inline void threshold_mask(Image& m, double thr = 0.5) {
    for (auto& v : m.pixels) v = v >= thr ? 1.0 : 0.0;
}

/// HWC image to a [1,C,H,W] tensor.
inline Tensor image_to_tensor(const Image& img) {
    Tensor t({1, img.channels, img.height, img.width});
    for (int c = 0; c < img.channels; ++c)
        for (int y = 0; y < img.height; ++y)
            for (int x = 0; x < img.width; ++x) t.at4(0, c, y, x) = img.at(y, x, c);
    return t;
}

/// Sample n of an NCHW tensor to an HWC image, clamped to [0,1].
inline Image tensor_to_image(const Tensor& t, int n = 0) {
    check(t.ndim() == 4, "tensor_to_image: expects NCHW");
    Image img(t.dim(3), t.dim(2), t.dim(1));
    for (int c = 0; c < img.channels; ++c)
        for (int y = 0; y < img.height; ++y)
            for (int x = 0; x < img.width; ++x) {
                double v = t.at4(n, c, y, x);
                img.at(y, x, c) = v < 0.0 ? 0.0 : (v > 1.0 ? 1.0 : v);
            }
    return img;
}

/// Stacks equal-sized [1,C,H,W] tensors into one [N,C,H,W] batch.
inline Tensor stack_batch(const std::vector<Tensor>& samples) {
    check(!samples.empty(), "stack_batch: empty list");
    const int C = samples[0].dim(1), H = samples[0].dim(2), W = samples[0].dim(3);
    Tensor out({static_cast<int>(samples.size()), C, H, W});
    const long long per = static_cast<long long>(C) * H * W;
    for (std::size_t i = 0; i < samples.size(); ++i) {
        check(samples[i].dim(0) == 1 && samples[i].dim(1) == C && samples[i].dim(2) == H &&
                  samples[i].dim(3) == W,
              "stack_batch: shape mismatch");
        std::copy(samples[i].data(), samples[i].data() + per,
                  out.data() + static_cast<long long>(i) * per);
    }
    return out;
}

}  // namespace umbra

#endif  // UMBRA_IMAGE_HPP
