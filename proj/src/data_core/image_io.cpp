#include "sslpoison/image_io.hpp"

#include <png.h>

#include <cstdio>
#include <memory>

namespace sslpoison {

namespace {

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f != nullptr) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

}  // namespace

void write_png(const std::filesystem::path& path, const ImageShape& shape,
               std::span<const std::uint8_t> pixels) {
  if (shape.channels != 1 && shape.channels != 3) {
    throw DataError("write_png: unsupported channel count " + std::to_string(shape.channels));
  }
  if (pixels.size() != shape.size()) {
    throw DataError("write_png: pixel buffer does not match shape for " + path.string());
  }
  FilePtr file(std::fopen(path.c_str(), "wb"));
  if (!file) throw DataError("cannot open for writing: " + path.string());

  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (png == nullptr || info == nullptr) {
    png_destroy_write_struct(&png, &info);
    throw DataError("libpng init failed for " + path.string());
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw DataError("PNG encode failed: " + path.string());
  }
  png_init_io(png, file.get());
  png_set_IHDR(png, info, static_cast<png_uint_32>(shape.width),
               static_cast<png_uint_32>(shape.height), 8,
               shape.channels == 3 ? PNG_COLOR_TYPE_RGB : PNG_COLOR_TYPE_GRAY, PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  const std::size_t stride = static_cast<std::size_t>(shape.width) * shape.channels;
  for (int y = 0; y < shape.height; ++y) {
    // libpng's API is not const-correct; rows are only read.
    auto* row = const_cast<std::uint8_t*>(pixels.data() + stride * y);
    png_write_row(png, row);
  }
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

std::vector<std::uint8_t> read_png(const std::filesystem::path& path, ImageShape& shape) {
  FilePtr file(std::fopen(path.c_str(), "rb"));
  if (!file) throw DataError("cannot open PNG: " + path.string());
  std::uint8_t sig[8];
  if (std::fread(sig, 1, 8, file.get()) != 8 || png_sig_cmp(sig, 0, 8) != 0) {
    throw DataError("not a PNG file: " + path.string());
  }
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (png == nullptr || info == nullptr) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw DataError("libpng init failed for " + path.string());
  }
  std::vector<std::uint8_t> pixels;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw DataError("corrupt PNG: " + path.string());
  }
  png_init_io(png, file.get());
  png_set_sig_bytes(png, 8);
  png_read_info(png, info);

  const auto color = png_get_color_type(png, info);
  const auto depth = png_get_bit_depth(png, info);
  if (depth == 16) png_set_strip_16(png);
  if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (color == PNG_COLOR_TYPE_GRAY && depth < 8) png_set_expand_gray_1_2_4_to_8(png);
  if ((color & PNG_COLOR_MASK_ALPHA) != 0) png_set_strip_alpha(png);
  if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_strip_alpha(png);
  png_read_update_info(png, info);

  shape.width = static_cast<int>(png_get_image_width(png, info));
  shape.height = static_cast<int>(png_get_image_height(png, info));
  shape.channels = static_cast<int>(png_get_channels(png, info));
  const std::size_t stride = png_get_rowbytes(png, info);
  pixels.resize(stride * shape.height);
  for (int y = 0; y < shape.height; ++y) png_read_row(png, pixels.data() + stride * y, nullptr);
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  if (shape.channels != 1 && shape.channels != 3) {
    throw DataError("unsupported PNG channel layout: " + path.string());
  }
  return pixels;
}

}  // namespace sslpoison
