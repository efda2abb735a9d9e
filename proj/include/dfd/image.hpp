#pragma once

#include <algorithm>
#include <cmath>
#include <csetjmp>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <string>
#include <vector>

#include <jpeglib.h>

#include "dfd/errors.hpp"
#include "dfd/nn.hpp"
#include "dfd/tensor.hpp"

namespace dfd {

/// Interleaved RGB image, float in [0,1], row-major scanlines.
struct Image {
    int width = 0, height = 0;
    std::vector<float> rgb; // size 3*width*height, pixel-interleaved

    Image() = default;
    Image(int w, int h) : width(w), height(h), rgb(static_cast<std::size_t>(3) * w * h, 0.0f) {}

    float& at(int y, int x, int c) {
        return rgb[(static_cast<std::size_t>(y) * width + x) * 3 + static_cast<std::size_t>(c)];
    }
    float at(int y, int x, int c) const {
        return rgb[(static_cast<std::size_t>(y) * width + x) * 3 + static_cast<std::size_t>(c)];
    }
    bool empty() const { return rgb.empty(); }

    void clamp01() {
        for (auto& v : rgb) v = std::clamp(v, 0.0f, 1.0f);
    }
};

inline std::uint8_t to_u8(float v) {
    return static_cast<std::uint8_t>(std::clamp(std::lround(v * 255.0f), 0L, 255L));
}

inline Tensor image_to_tensor(const Image& im) {
    Tensor t({3, im.height, im.width});
    for (int c = 0; c < 3; ++c)
        for (int y = 0; y < im.height; ++y)
            for (int x = 0; x < im.width; ++x) t.at3(c, y, x) = im.at(y, x, c);
    return t;
}

inline Image tensor_to_image(const Tensor& t, bool clamp = true) {
    if (t.rank() != 3 || t.dim(0) != 3) throw shape_error("tensor_to_image: expected (3,H,W)");
    Image im(static_cast<int>(t.dim(2)), static_cast<int>(t.dim(1)));
    for (int c = 0; c < 3; ++c)
        for (int y = 0; y < im.height; ++y)
            for (int x = 0; x < im.width; ++x)
                im.at(y, x, c) = clamp ? std::clamp(t.at3(c, y, x), 0.0f, 1.0f) : t.at3(c, y, x);
    return im;
}

/// Rec.601 luma plane.
inline std::vector<float> rgb_to_gray(const Image& im) {
    std::vector<float> g(static_cast<std::size_t>(im.width) * im.height);
    for (int y = 0; y < im.height; ++y)
        for (int x = 0; x < im.width; ++x)
            g[static_cast<std::size_t>(y) * im.width + x] =
                0.299f * im.at(y, x, 0) + 0.587f * im.at(y, x, 1) + 0.114f * im.at(y, x, 2);
    return g;
}

inline Image resize_image(const Image& im, int ow, int oh, bool antialias = true) {
    Tensor t = resize_bicubic(image_to_tensor(im), oh, ow, antialias);
    return tensor_to_image(t);
}

// ---------------------------------------------------------------------------
// PPM (binary P6, maxval 255)
// ---------------------------------------------------------------------------

namespace detail {
inline int ppm_next_int(std::istream& in) {
    // Skips whitespace and '#' comments between header tokens.
    int c = in.get();
    while (c != EOF) {
        if (c == '#') {
            while (c != EOF && c != '\n') c = in.get();
        } else if (!std::isspace(c)) {
            break;
        }
        c = in.get();
    }
    if (c == EOF) throw data_error("ppm: truncated header");
    int value = 0;
    bool any = false;
    while (c != EOF && std::isdigit(c)) {
        value = value * 10 + (c - '0');
        any = true;
        c = in.get();
    }
    if (!any) throw data_error("ppm: malformed header token");
    return value;
}
} // namespace detail

inline Image load_ppm(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw data_error("ppm: cannot open " + path);
    char m0 = 0, m1 = 0;
    in.get(m0);
    in.get(m1);
    if (m0 != 'P' || m1 != '6') throw data_error("ppm: not a P6 file: " + path);
    const int w = detail::ppm_next_int(in);
    const int h = detail::ppm_next_int(in);
    const int maxval = detail::ppm_next_int(in);
    if (w <= 0 || h <= 0 || maxval != 255) throw data_error("ppm: unsupported header in " + path);
    std::vector<std::uint8_t> buf(static_cast<std::size_t>(3) * w * h);
    in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
    if (in.gcount() != static_cast<std::streamsize>(buf.size()))
        throw data_error("ppm: truncated pixel data in " + path);
    Image im(w, h);
    for (std::size_t i = 0; i < buf.size(); ++i) im.rgb[i] = buf[i] / 255.0f;
    return im;
}

inline void save_ppm(const std::string& path, const Image& im) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw data_error("ppm: cannot write " + path);
    out << "P6\n" << im.width << " " << im.height << "\n255\n";
    std::vector<std::uint8_t> buf(im.rgb.size());
    for (std::size_t i = 0; i < buf.size(); ++i) buf[i] = to_u8(im.rgb[i]);
    out.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
    if (!out) throw data_error("ppm: write failed for " + path);
}

// ---------------------------------------------------------------------------
// Baseline JPEG round trip (libjpeg, in-memory)
// ---------------------------------------------------------------------------

namespace detail {
struct JpegErr {
    jpeg_error_mgr pub;
    std::jmp_buf jump;
};

inline void jpeg_err_exit(j_common_ptr cinfo) {
    auto* err = reinterpret_cast<JpegErr*>(cinfo->err);
    std::longjmp(err->jump, 1);
}
} // namespace detail

inline std::vector<std::uint8_t> encode_jpeg(const Image& im, int quality) {
    if (quality < 1 || quality > 100) throw parameter_error("jpeg: quality out of [1,100]");
    std::vector<std::uint8_t> interleaved(im.rgb.size());
    for (std::size_t i = 0; i < interleaved.size(); ++i) interleaved[i] = to_u8(im.rgb[i]);

    jpeg_compress_struct cinfo;
    detail::JpegErr jerr;
    cinfo.err = jpeg_std_error(&jerr.pub);
    jerr.pub.error_exit = detail::jpeg_err_exit;
    unsigned char* outbuf = nullptr;
    unsigned long outsize = 0;
    if (setjmp(jerr.jump)) {
        jpeg_destroy_compress(&cinfo);
        if (outbuf) std::free(outbuf);
        throw data_error("jpeg: encode failed");
    }
    jpeg_create_compress(&cinfo);
    jpeg_mem_dest(&cinfo, &outbuf, &outsize);
    cinfo.image_width = static_cast<JDIMENSION>(im.width);
    cinfo.image_height = static_cast<JDIMENSION>(im.height);
    cinfo.input_components = 3;
    cinfo.in_color_space = JCS_RGB;
    jpeg_set_defaults(&cinfo);
    jpeg_set_quality(&cinfo, quality, TRUE);
    jpeg_start_compress(&cinfo, TRUE);
    while (cinfo.next_scanline < cinfo.image_height) {
        JSAMPROW row = interleaved.data() + static_cast<std::size_t>(cinfo.next_scanline) * im.width * 3;
        jpeg_write_scanlines(&cinfo, &row, 1);
    }
    jpeg_finish_compress(&cinfo);
    jpeg_destroy_compress(&cinfo);
    std::vector<std::uint8_t> bytes(outbuf, outbuf + outsize);
    std::free(outbuf);
    return bytes;
}

inline Image decode_jpeg(const std::vector<std::uint8_t>& bytes) {
    jpeg_decompress_struct cinfo;
    detail::JpegErr jerr;
    cinfo.err = jpeg_std_error(&jerr.pub);
    jerr.pub.error_exit = detail::jpeg_err_exit;
    if (setjmp(jerr.jump)) {
        jpeg_destroy_decompress(&cinfo);
        throw data_error("jpeg: decode failed");
    }
    jpeg_create_decompress(&cinfo);
    jpeg_mem_src(&cinfo, bytes.data(), static_cast<unsigned long>(bytes.size()));
    jpeg_read_header(&cinfo, TRUE);
    cinfo.out_color_space = JCS_RGB;
    jpeg_start_decompress(&cinfo);
    Image im(static_cast<int>(cinfo.output_width), static_cast<int>(cinfo.output_height));
    std::vector<std::uint8_t> row(static_cast<std::size_t>(im.width) * 3);
    while (cinfo.output_scanline < cinfo.output_height) {
        JSAMPROW r = row.data();
        const int y = static_cast<int>(cinfo.output_scanline);
        jpeg_read_scanlines(&cinfo, &r, 1);
        for (int x = 0; x < im.width; ++x)
            for (int c = 0; c < 3; ++c) im.at(y, x, c) = row[static_cast<std::size_t>(x) * 3 + c] / 255.0f;
    }
    jpeg_finish_decompress(&cinfo);
    jpeg_destroy_decompress(&cinfo);
    return im;
}

inline Image jpeg_roundtrip(const Image& im, int quality) {
    return decode_jpeg(encode_jpeg(im, quality));
}

// ---------------------------------------------------------------------------
// Extension-dispatched file I/O
// ---------------------------------------------------------------------------

inline std::string lower_ext(const std::string& path) {
    const auto dot = path.rfind('.');
    if (dot == std::string::npos) return "";
    std::string e = path.substr(dot + 1);
    for (auto& c : e) c = static_cast<char>(std::tolower(c));
    return e;
}

inline Image load_image(const std::string& path) {
    const std::string e = lower_ext(path);
    if (e == "ppm") return load_ppm(path);
    if (e == "jpg" || e == "jpeg") {
        std::ifstream in(path, std::ios::binary);
        if (!in) throw data_error("jpeg: cannot open " + path);
        std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                        std::istreambuf_iterator<char>());
        return decode_jpeg(bytes);
    }
    throw parameter_error("load_image: unsupported extension ." + e + " (use .ppm/.jpg)");
}

inline void save_image(const std::string& path, const Image& im, int jpeg_quality = 95) {
    const std::string e = lower_ext(path);
    if (e == "ppm") {
        save_ppm(path, im);
        return;
    }
    if (e == "jpg" || e == "jpeg") {
        const auto bytes = encode_jpeg(im, jpeg_quality);
        std::ofstream out(path, std::ios::binary | std::ios::trunc);
        if (!out) throw data_error("jpeg: cannot write " + path);
        out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
        return;
    }
    throw parameter_error("save_image: unsupported extension ." + e + " (use .ppm/.jpg)");
}

} // namespace dfd
