#ifndef SESA_IMAGE_HPP
#define SESA_IMAGE_HPP

// Binary PGM (P5) / PPM (P6) I/O and basic raster ops. Pixels are held as
// doubles in [0,1], layout [C x H x W].

#include "sesa/common.hpp"
#include "sesa/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

namespace sesa {

struct Image {
    int64_t channels = 0;  // 1 (gray) or 3 (rgb)
    int64_t height = 0;
    int64_t width = 0;
    std::vector<double> pixels;  // [C x H x W], values in [0,1]

    double at(int64_t c, int64_t y, int64_t x) const {
        return pixels[static_cast<size_t>((c * height + y) * width + x)];
    }
    double& at(int64_t c, int64_t y, int64_t x) {
        return pixels[static_cast<size_t>((c * height + y) * width + x)];
    }

    static Image filled(int64_t c, int64_t h, int64_t w, double v = 0.0) {
        Image im;
        im.channels = c;
        im.height = h;
        im.width = w;
        im.pixels.assign(static_cast<size_t>(c * h * w), v);
        return im;
    }

    Tensor to_tensor(bool requires_grad = false) const {
        return Tensor(Shape{channels, height, width}, pixels, requires_grad);
    }

    static Image from_tensor(const Tensor& t) {
        if (t.rank() != 3) throw ShapeMismatch("Image::from_tensor expects [C,H,W]");
        Image im;
        im.channels = t.dim(0);
        im.height = t.dim(1);
        im.width = t.dim(2);
        im.pixels = t.data();
        for (auto& v : im.pixels) v = std::clamp(v, 0.0, 1.0);
        return im;
    }
};

namespace detail {

inline int pnm_read_int(std::istream& in) {
    // skips whitespace and '#' comments
    int c = in.get();
    while (c != EOF) {
        if (c == '#') {
            while (c != EOF && c != '\n') c = in.get();
        } else if (!std::isspace(c)) {
            break;
        }
        c = in.get();
    }
    if (c == EOF) throw IoError("unexpected EOF in PNM header");
    int v = 0;
    while (c != EOF && std::isdigit(c)) {
        v = v * 10 + (c - '0');
        c = in.get();
    }
    return v;
}

}  // namespace detail

inline Image read_pnm(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open '" + path + "'");
    char m0 = static_cast<char>(f.get()), m1 = static_cast<char>(f.get());
    int64_t channels;
    if (m0 == 'P' && m1 == '5') channels = 1;
    else if (m0 == 'P' && m1 == '6') channels = 3;
    else throw IoError("'" + path + "' is not a binary PGM/PPM file");
    int64_t w = detail::pnm_read_int(f);
    int64_t h = detail::pnm_read_int(f);
    int maxval = detail::pnm_read_int(f);
    if (maxval != 255) throw IoError("'" + path + "': only 8-bit PNM supported");
    std::vector<unsigned char> raw(static_cast<size_t>(channels * h * w));
    f.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
    if (f.gcount() != static_cast<std::streamsize>(raw.size()))
        throw IoError("'" + path + "': truncated pixel data");
    Image im = Image::filled(channels, h, w);
    // interleaved on disk, planar in memory
    for (int64_t y = 0; y < h; y++)
        for (int64_t x = 0; x < w; x++)
            for (int64_t c = 0; c < channels; c++)
                im.at(c, y, x) = raw[static_cast<size_t>((y * w + x) * channels + c)] / 255.0;
    return im;
}

inline void write_pnm(const std::string& path, const Image& im) {
    if (im.channels != 1 && im.channels != 3)
        throw IoError("write_pnm: channels must be 1 or 3");
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open '" + path + "' for writing");
    f << (im.channels == 1 ? "P5" : "P6") << "\n" << im.width << " " << im.height << "\n255\n";
    std::vector<unsigned char> raw(static_cast<size_t>(im.channels * im.height * im.width));
    for (int64_t y = 0; y < im.height; y++)
        for (int64_t x = 0; x < im.width; x++)
            for (int64_t c = 0; c < im.channels; c++) {
                double v = std::clamp(im.at(c, y, x), 0.0, 1.0);
                raw[static_cast<size_t>((y * im.width + x) * im.channels + c)] =
                    static_cast<unsigned char>(std::lround(v * 255.0));
            }
    f.write(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
    if (!f) throw IoError("write failed for '" + path + "'");
}

inline Image to_gray(const Image& im) {
    if (im.channels == 1) return im;
    Image out = Image::filled(1, im.height, im.width);
    for (int64_t y = 0; y < im.height; y++)
        for (int64_t x = 0; x < im.width; x++)
            out.at(0, y, x) = (im.at(0, y, x) + im.at(1, y, x) + im.at(2, y, x)) / 3.0;
    return out;
}

inline Image resize_bilinear(const Image& im, int64_t oh, int64_t ow) {
    Image out = Image::filled(im.channels, oh, ow);
    for (int64_t c = 0; c < im.channels; c++)
        for (int64_t y = 0; y < oh; y++)
            for (int64_t x = 0; x < ow; x++) {
                double sy = (oh > 1) ? (y * static_cast<double>(im.height - 1) / (oh - 1)) : 0.0;
                double sx = (ow > 1) ? (x * static_cast<double>(im.width - 1) / (ow - 1)) : 0.0;
                int64_t y0 = static_cast<int64_t>(sy), x0 = static_cast<int64_t>(sx);
                int64_t y1 = std::min(y0 + 1, im.height - 1), x1 = std::min(x0 + 1, im.width - 1);
                double fy = sy - y0, fx = sx - x0;
                out.at(c, y, x) = (1 - fy) * ((1 - fx) * im.at(c, y0, x0) + fx * im.at(c, y0, x1)) +
                                  fy * ((1 - fx) * im.at(c, y1, x0) + fx * im.at(c, y1, x1));
            }
    return out;
}

inline Image crop(const Image& im, int64_t x, int64_t y, int64_t w, int64_t h) {
    if (w <= 0 || h <= 0 || x < 0 || y < 0 || x + w > im.width || y + h > im.height)
        throw BoxOutOfBounds("crop (" + std::to_string(x) + "," + std::to_string(y) + "," +
                             std::to_string(w) + "," + std::to_string(h) + ") on " +
                             std::to_string(im.width) + "x" + std::to_string(im.height));
    Image out = Image::filled(im.channels, h, w);
    for (int64_t c = 0; c < im.channels; c++)
        for (int64_t yy = 0; yy < h; yy++)
            for (int64_t xx = 0; xx < w; xx++) out.at(c, yy, xx) = im.at(c, y + yy, x + xx);
    return out;
}

// fixed average-pool down-projection (the stand-in latent encoder)
inline Image avgpool(const Image& im, int64_t factor) {
    if (im.height % factor != 0 || im.width % factor != 0)
        throw ShapeMismatch("avgpool: factor does not divide image extent");
    Image out = Image::filled(im.channels, im.height / factor, im.width / factor);
    for (int64_t c = 0; c < im.channels; c++)
        for (int64_t y = 0; y < out.height; y++)
            for (int64_t x = 0; x < out.width; x++) {
                double acc = 0.0;
                for (int64_t dy = 0; dy < factor; dy++)
                    for (int64_t dx = 0; dx < factor; dx++)
                        acc += im.at(c, y * factor + dy, x * factor + dx);
                out.at(c, y, x) = acc / static_cast<double>(factor * factor);
            }
    return out;
}

inline Image upsample_nearest(const Image& im, int64_t factor) {
    Image out = Image::filled(im.channels, im.height * factor, im.width * factor);
    for (int64_t c = 0; c < im.channels; c++)
        for (int64_t y = 0; y < out.height; y++)
            for (int64_t x = 0; x < out.width; x++) out.at(c, y, x) = im.at(c, y / factor, x / factor);
    return out;
}

// grayscale heatmap of an arbitrary matrix, min-max normalized
inline Image heatmap(const Tensor& m) {
    if (m.rank() != 2) throw ShapeMismatch("heatmap expects rank 2");
    double lo = *std::min_element(m.data().begin(), m.data().end());
    double hi = *std::max_element(m.data().begin(), m.data().end());
    double span = (hi > lo) ? (hi - lo) : 1.0;
    Image out = Image::filled(1, m.dim(0), m.dim(1));
    for (size_t i = 0; i < m.data().size(); i++) out.pixels[i] = (m.data()[i] - lo) / span;
    return out;
}

}  // namespace sesa

#endif  // SESA_IMAGE_HPP
