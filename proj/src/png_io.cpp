#include "unmask/png_io.hpp"

#include <png.h>

#include <cmath>
#include <cstdio>
#include <cstring>
#include <memory>
#include <stdexcept>
#include <vector>

namespace unmask {

namespace {

struct FileCloser {
  void operator()(FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<FILE, FileCloser>;

[[noreturn]] void fail(const std::string& what, const std::string& path) {
  throw std::runtime_error(what + ": " + path);
}

struct PngReader {
  png_structp png = nullptr;
  png_infop info = nullptr;
  ~PngReader() {
    if (png) png_destroy_read_struct(&png, info ? &info : nullptr, nullptr);
  }
};

struct PngWriter {
  png_structp png = nullptr;
  png_infop info = nullptr;
  ~PngWriter() {
    if (png) png_destroy_write_struct(&png, info ? &info : nullptr);
  }
};

// Decodes to 8-bit rows; images expand to RGB, masks to single-channel gray.
std::vector<std::vector<png_byte>> read_rows(const std::string& path, bool rgb, png_uint_32* out_w,
                                             png_uint_32* out_h) {
  FilePtr fp(std::fopen(path.c_str(), "rb"));
  if (!fp) fail("cannot open PNG", path);

  png_byte header[8];
  if (std::fread(header, 1, 8, fp.get()) != 8 || png_sig_cmp(header, 0, 8))
    fail("not a PNG file", path);

  PngReader r;
  r.png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (!r.png) fail("libpng init failed", path);
  r.info = png_create_info_struct(r.png);
  if (!r.info) fail("libpng init failed", path);
  if (setjmp(png_jmpbuf(r.png))) fail("corrupt PNG", path);

  png_init_io(r.png, fp.get());
  png_set_sig_bytes(r.png, 8);
  png_read_info(r.png, r.info);

  png_uint_32 w = png_get_image_width(r.png, r.info);
  png_uint_32 h = png_get_image_height(r.png, r.info);
  png_byte color = png_get_color_type(r.png, r.info);
  png_byte depth = png_get_bit_depth(r.png, r.info);

  if (depth == 16) png_set_strip_16(r.png);
  if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(r.png);
  if (color == PNG_COLOR_TYPE_GRAY && depth < 8) png_set_expand_gray_1_2_4_to_8(r.png);
  if (png_get_valid(r.png, r.info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(r.png);
  if (color & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(r.png);
  if (rgb) {
    if (color == PNG_COLOR_TYPE_GRAY || color == PNG_COLOR_TYPE_GRAY_ALPHA)
      png_set_gray_to_rgb(r.png);
  } else {
    if (color == PNG_COLOR_TYPE_RGB || color == PNG_COLOR_TYPE_RGB_ALPHA ||
        color == PNG_COLOR_TYPE_PALETTE)
      png_set_rgb_to_gray_fixed(r.png, 1, -1, -1);
  }
  png_read_update_info(r.png, r.info);

  const size_t rowbytes = png_get_rowbytes(r.png, r.info);
  const size_t want = static_cast<size_t>(w) * (rgb ? 3 : 1);
  if (rowbytes != want) fail("unexpected PNG row layout", path);

  std::vector<std::vector<png_byte>> rows(h, std::vector<png_byte>(rowbytes));
  std::vector<png_bytep> ptrs(h);
  for (png_uint_32 y = 0; y < h; ++y) ptrs[y] = rows[y].data();
  png_read_image(r.png, ptrs.data());
  png_read_end(r.png, nullptr);

  *out_w = w;
  *out_h = h;
  return rows;
}

}  // anonymous namespace

Image read_image_png(const std::string& path) {
  png_uint_32 w = 0, h = 0;
  auto rows = read_rows(path, true, &w, &h);
  TensorF chw({3, static_cast<int64_t>(h), static_cast<int64_t>(w)});
  const int64_t plane = static_cast<int64_t>(h) * w;
  for (png_uint_32 y = 0; y < h; ++y)
    for (png_uint_32 x = 0; x < w; ++x)
      for (int c = 0; c < 3; ++c)
        chw[c * plane + static_cast<int64_t>(y) * w + x] =
            static_cast<float>(rows[y][x * 3 + static_cast<size_t>(c)]) / 255.0f;
  return Image{std::move(chw), ValueRange::Display01};
}

void write_image_png(const Image& img, const std::string& path) {
  if (img.range != ValueRange::Display01)
    throw std::invalid_argument("write_image_png expects a display-range image: " + path);
  if (img.channels() != 3)
    throw std::invalid_argument("write_image_png expects 3 channels, got " +
                                shape_str(img.chw.shape()));
  const int64_t h = img.height(), w = img.width(), plane = h * w;

  FilePtr fp(std::fopen(path.c_str(), "wb"));
  if (!fp) fail("cannot create PNG", path);
  PngWriter wr;
  wr.png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (!wr.png) fail("libpng init failed", path);
  wr.info = png_create_info_struct(wr.png);
  if (!wr.info) fail("libpng init failed", path);
  if (setjmp(png_jmpbuf(wr.png))) fail("PNG write failed", path);

  png_init_io(wr.png, fp.get());
  png_set_IHDR(wr.png, wr.info, static_cast<png_uint_32>(w), static_cast<png_uint_32>(h), 8,
               PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
               PNG_FILTER_TYPE_DEFAULT);
  png_write_info(wr.png, wr.info);

  std::vector<png_byte> row(static_cast<size_t>(w) * 3);
  for (int64_t y = 0; y < h; ++y) {
    for (int64_t x = 0; x < w; ++x)
      for (int c = 0; c < 3; ++c) {
        float v = img.chw[c * plane + y * w + x];
        v = std::min(1.0f, std::max(0.0f, v));
        row[static_cast<size_t>(x * 3 + c)] =
            static_cast<png_byte>(std::lround(v * 255.0f));
      }
    png_write_row(wr.png, row.data());
  }
  png_write_end(wr.png, nullptr);
}

Mask read_mask_png(const std::string& path) {
  png_uint_32 w = 0, h = 0;
  auto rows = read_rows(path, false, &w, &h);
  TensorD hw({static_cast<int64_t>(h), static_cast<int64_t>(w)});
  for (png_uint_32 y = 0; y < h; ++y)
    for (png_uint_32 x = 0; x < w; ++x)
      hw[static_cast<int64_t>(y) * w + x] = rows[y][x] ? 1.0 : 0.0;
  return Mask{std::move(hw), MaskKind::Binary};
}

void write_mask_png(const Mask& m, const std::string& path) {
  if (m.kind != MaskKind::Binary)
    throw std::invalid_argument("write_mask_png expects a binary mask: " + path);
  const int64_t h = m.height(), w = m.width();

  FilePtr fp(std::fopen(path.c_str(), "wb"));
  if (!fp) fail("cannot create PNG", path);
  PngWriter wr;
  wr.png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (!wr.png) fail("libpng init failed", path);
  wr.info = png_create_info_struct(wr.png);
  if (!wr.info) fail("libpng init failed", path);
  if (setjmp(png_jmpbuf(wr.png))) fail("PNG write failed", path);

  png_init_io(wr.png, fp.get());
  png_set_IHDR(wr.png, wr.info, static_cast<png_uint_32>(w), static_cast<png_uint_32>(h), 1,
               PNG_COLOR_TYPE_GRAY, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
               PNG_FILTER_TYPE_DEFAULT);
  png_write_info(wr.png, wr.info);

  const size_t rowbytes = (static_cast<size_t>(w) + 7) / 8;
  std::vector<png_byte> row(rowbytes);
  for (int64_t y = 0; y < h; ++y) {
    std::fill(row.begin(), row.end(), 0);
    for (int64_t x = 0; x < w; ++x)
      if (m.hw[y * w + x] != 0.0)
        row[static_cast<size_t>(x / 8)] |= static_cast<png_byte>(0x80u >> (x % 8));
    png_write_row(wr.png, row.data());
  }
  png_write_end(wr.png, nullptr);
}

}  // namespace unmask
