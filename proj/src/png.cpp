#include "sabone/png.hpp"

#include <algorithm>
#include <cmath>
#include <csetjmp>
#include <cstring>

#include <png.h>

#include "sabone/error.hpp"
#include "sabone/volume.hpp"

namespace sabone {

namespace {

void write_cb(png_structp png, png_bytep data, png_size_t len) {
    auto* out = static_cast<std::string*>(png_get_io_ptr(png));
    out->append(reinterpret_cast<const char*>(data), len);
}

void flush_cb(png_structp) {}

struct ReadCursor {
    const std::string* bytes;
    size_t pos;
};

void read_cb(png_structp png, png_bytep data, png_size_t len) {
    auto* c = static_cast<ReadCursor*>(png_get_io_ptr(png));
    if (c->pos + len > c->bytes->size()) png_error(png, "truncated PNG");
    std::memcpy(data, c->bytes->data() + c->pos, len);
    c->pos += len;
}

void warning_cb(png_structp, png_const_charp) {}

}  // namespace

std::string encode_png_gray8(const std::vector<uint8_t>& pixels, int64_t height, int64_t width) {
    if (height < 1 || width < 1 || static_cast<int64_t>(pixels.size()) != height * width)
        throw shape_error("PNG pixel buffer does not match its shape");
    std::string out;
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, warning_cb);
    png_infop info = png_create_info_struct(png);
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        throw format_error("PNG encoding failed");
    }
    png_set_write_fn(png, &out, write_cb, flush_cb);
    png_set_IHDR(png, info, static_cast<png_uint_32>(width), static_cast<png_uint_32>(height), 8, PNG_COLOR_TYPE_GRAY,
                 PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    for (int64_t y = 0; y < height; ++y) png_write_row(png, const_cast<png_bytep>(pixels.data() + y * width));
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
    return out;
}

Plane<uint8_t> decode_png_gray8(const std::string& bytes) {
    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, warning_cb);
    png_infop info = png_create_info_struct(png);
    ReadCursor cur{&bytes, 0};
    std::vector<uint8_t> buf;
    int64_t w = 0, h = 0;
    bool gray8 = true;
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw format_error("PNG decoding failed");
    }
    png_set_read_fn(png, &cur, read_cb);
    png_read_info(png, info);
    gray8 = png_get_color_type(png, info) == PNG_COLOR_TYPE_GRAY && png_get_bit_depth(png, info) == 8;
    if (gray8) {
        w = static_cast<int64_t>(png_get_image_width(png, info));
        h = static_cast<int64_t>(png_get_image_height(png, info));
        buf.resize(static_cast<size_t>(w * h));
        for (int64_t y = 0; y < h; ++y) png_read_row(png, buf.data() + y * w, nullptr);
    }
    png_destroy_read_struct(&png, &info, nullptr);
    if (!gray8) throw format_error("expected an 8-bit grayscale PNG");
    return Plane<uint8_t>(h, w, std::move(buf));
}

std::vector<uint8_t> render_gray8(const FloatPlane& slice) {
    auto s = minmax_scale(slice);
    std::vector<uint8_t> out(s.data().size());
    for (size_t i = 0; i < out.size(); ++i)
        out[i] = static_cast<uint8_t>(std::lround(std::clamp(s.data()[i], 0.0f, 1.0f) * 255.0f));
    return out;
}

}  // namespace sabone
