#pragma once

// File formats: 8-bit RGB PNG frames (libpng), raw little-endian float32
// blobs with a JSON sidecar describing their shape, and JSON documents for
// manifests / airlight values.

#include <cstdio>
#include <filesystem>
#include <fstream>

#include <png.h>
#include <json.hpp>

#include "semivdn/core/tensor.hpp"

namespace semivdn {
namespace io {

using json = nlohmann::json;
namespace fs = std::filesystem;

// --- PNG ------------------------------------------------------------------

// Writes a 3 x H x W float tensor in [0,1] as an 8-bit RGB PNG.
// Values are clamped and rounded half-up.
inline void write_png(const fs::path& path, const Tensor<float>& img) {
    if (img.rank() != 3 || img.dim(0) != 3)
        throw std::invalid_argument("write_png: expected 3xHxW tensor");
    const int h = img.dim(1), w = img.dim(2);

    std::FILE* fp = std::fopen(path.string().c_str(), "wb");
    if (!fp) throw IoError("write_png: cannot open " + path.string());
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr,
                                              nullptr, nullptr);
    png_infop info = png_create_info_struct(png);
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        std::fclose(fp);
        throw IoError("write_png: libpng failure for " + path.string());
    }
    png_init_io(png, fp);
    png_set_IHDR(png, info, w, h, 8, PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE,
                 PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);

    std::vector<png_byte> row(static_cast<std::size_t>(w) * 3);
    for (int i = 0; i < h; ++i) {
        for (int j = 0; j < w; ++j)
            for (int c = 0; c < 3; ++c) {
                float v = img[(static_cast<std::size_t>(c) * h + i) * w + j];
                v = std::clamp(v, 0.0f, 1.0f);
                row[static_cast<std::size_t>(j) * 3 + c] =
                    static_cast<png_byte>(std::lround(v * 255.0f));
            }
        png_write_row(png, row.data());
    }
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
    std::fclose(fp);
}

// Reads an RGB(A) PNG into a 3 x H x W float tensor scaled to [0,1].
inline Tensor<float> read_png(const fs::path& path) {
    std::FILE* fp = std::fopen(path.string().c_str(), "rb");
    if (!fp) throw IoError("read_png: cannot open " + path.string());
    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr,
                                             nullptr, nullptr);
    png_infop info = png_create_info_struct(png);
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        std::fclose(fp);
        throw IoError("read_png: libpng failure for " + path.string());
    }
    png_init_io(png, fp);
    png_read_info(png, info);

    // Normalize anything reasonable to 8-bit RGB.
    png_set_strip_16(png);
    png_set_strip_alpha(png);
    png_set_palette_to_rgb(png);
    if (png_get_color_type(png, info) == PNG_COLOR_TYPE_GRAY ||
        png_get_color_type(png, info) == PNG_COLOR_TYPE_GRAY_ALPHA)
        png_set_gray_to_rgb(png);
    png_read_update_info(png, info);

    const int w = static_cast<int>(png_get_image_width(png, info));
    const int h = static_cast<int>(png_get_image_height(png, info));
    Tensor<float> img({3, h, w});
    std::vector<png_byte> row(png_get_rowbytes(png, info));
    for (int i = 0; i < h; ++i) {
        png_read_row(png, row.data(), nullptr);
        for (int j = 0; j < w; ++j)
            for (int c = 0; c < 3; ++c)
                img[(static_cast<std::size_t>(c) * h + i) * w + j] =
                    static_cast<float>(row[static_cast<std::size_t>(j) * 3 + c]) / 255.0f;
    }
    png_read_end(png, nullptr);
    png_destroy_read_struct(&png, &info, nullptr);
    std::fclose(fp);
    return img;
}

// --- Raw float32 blobs ----------------------------------------------------

// Stored little-endian; this code assumes a little-endian host (checked).
inline void assert_little_endian() {
    const std::uint32_t probe = 1;
    if (*reinterpret_cast<const std::uint8_t*>(&probe) != 1)
        throw IoError("f32 blobs require a little-endian host");
}

inline void write_f32(const fs::path& path, const Tensor<float>& t) {
    assert_little_endian();
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("write_f32: cannot open " + path.string());
    f.write(reinterpret_cast<const char*>(t.data()),
            static_cast<std::streamsize>(t.numel() * sizeof(float)));
    if (!f) throw IoError("write_f32: short write to " + path.string());

    json side;
    side["dtype"] = "f32";
    side["shape"] = t.shape();
    std::ofstream s(path.string() + ".json");
    s << side.dump(2) << "\n";
}

inline Tensor<float> read_f32(const fs::path& path) {
    assert_little_endian();
    std::ifstream s(path.string() + ".json");
    if (!s) throw IoError("read_f32: missing sidecar for " + path.string());
    json side = json::parse(s);
    if (side.at("dtype").get<std::string>() != "f32")
        throw IoError("read_f32: unexpected dtype in sidecar of " + path.string());
    std::vector<int> shape = side.at("shape").get<std::vector<int>>();

    Tensor<float> t(shape);
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("read_f32: cannot open " + path.string());
    f.read(reinterpret_cast<char*>(t.data()),
           static_cast<std::streamsize>(t.numel() * sizeof(float)));
    if (static_cast<std::size_t>(f.gcount()) != t.numel() * sizeof(float))
        throw IoError("read_f32: short read from " + path.string());
    return t;
}

// --- JSON documents -------------------------------------------------------

inline void write_json(const fs::path& path, const json& doc) {
    std::ofstream f(path);
    if (!f) throw IoError("write_json: cannot open " + path.string());
    f << doc.dump(2) << "\n";
}

inline json read_json(const fs::path& path) {
    std::ifstream f(path);
    if (!f) throw IoError("read_json: cannot open " + path.string());
    return json::parse(f);
}

} // namespace io
} // namespace semivdn
