#include "finecount/image_io.hpp"

#include <jpeglib.h>
#include <png.h>

#include <array>
#include <csetjmp>
#include <cstdio>
#include <memory>

namespace finecount {
namespace {

using FilePtr = std::unique_ptr<std::FILE, int (*)(std::FILE*)>;

FilePtr open_file(const std::filesystem::path& path, const char* mode) {
  FilePtr f(std::fopen(path.c_str(), mode), &std::fclose);
  if (!f) throw Error(ErrorKind::kIo, "cannot open " + path.string());
  return f;
}

enum class Format { kPng, kJpeg, kUnknown };

Format sniff(std::FILE* f) {
  std::array<unsigned char, 8> sig{};
  const std::size_t n = std::fread(sig.data(), 1, sig.size(), f);
  std::rewind(f);
  if (n >= 8 && png_sig_cmp(sig.data(), 0, 8) == 0) return Format::kPng;
  if (n >= 3 && sig[0] == 0xFF && sig[1] == 0xD8 && sig[2] == 0xFF) return Format::kJpeg;
  return Format::kUnknown;
}

RgbImage read_png(std::FILE* f, const std::filesystem::path& path, bool header_only) {
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!info) {
    png_destroy_read_struct(&png, nullptr, nullptr);
    throw Error(ErrorKind::kIo, "libpng init failed");
  }
  RgbImage image;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw Error(ErrorKind::kParse, "corrupt PNG " + path.string());
  }
  png_init_io(png, f);
  png_read_info(png, info);
  const auto width = png_get_image_width(png, info);
  const auto height = png_get_image_height(png, info);
  if (header_only) {
    image.height = height;
    image.width = width;
    png_destroy_read_struct(&png, &info, nullptr);
    return image;
  }
  const auto color = png_get_color_type(png, info);
  if (png_get_bit_depth(png, info) == 16) png_set_strip_16(png);
  if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (color == PNG_COLOR_TYPE_GRAY || color == PNG_COLOR_TYPE_GRAY_ALPHA) {
    png_set_gray_to_rgb(png);
  }
  if (color == PNG_COLOR_TYPE_GRAY && png_get_bit_depth(png, info) < 8) {
    png_set_expand_gray_1_2_4_to_8(png);
  }
  if (color & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
  if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_strip_alpha(png);
  png_read_update_info(png, info);
  image = RgbImage(height, width);
  std::vector<png_bytep> rows(height);
  for (std::size_t y = 0; y < height; ++y) rows[y] = &image.pixels[y * width * 3];
  png_read_image(png, rows.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  return image;
}

struct JpegErrorManager {
  jpeg_error_mgr base;
  std::jmp_buf jump;
};

void jpeg_error_exit(j_common_ptr cinfo) {
  auto* err = reinterpret_cast<JpegErrorManager*>(cinfo->err);
  std::longjmp(err->jump, 1);
}

RgbImage read_jpeg(std::FILE* f, const std::filesystem::path& path, bool header_only) {
  jpeg_decompress_struct cinfo{};
  JpegErrorManager err{};
  cinfo.err = jpeg_std_error(&err.base);
  err.base.error_exit = jpeg_error_exit;
  RgbImage image;
  if (setjmp(err.jump)) {
    jpeg_destroy_decompress(&cinfo);
    throw Error(ErrorKind::kParse, "corrupt JPEG " + path.string());
  }
  jpeg_create_decompress(&cinfo);
  jpeg_stdio_src(&cinfo, f);
  jpeg_read_header(&cinfo, TRUE);
  if (header_only) {
    image.height = cinfo.image_height;
    image.width = cinfo.image_width;
    jpeg_destroy_decompress(&cinfo);
    return image;
  }
  cinfo.out_color_space = JCS_RGB;
  jpeg_start_decompress(&cinfo);
  image = RgbImage(cinfo.output_height, cinfo.output_width);
  while (cinfo.output_scanline < cinfo.output_height) {
    JSAMPROW row = &image.pixels[cinfo.output_scanline * image.width * 3];
    jpeg_read_scanlines(&cinfo, &row, 1);
  }
  jpeg_finish_decompress(&cinfo);
  jpeg_destroy_decompress(&cinfo);
  return image;
}

RgbImage read_any(const std::filesystem::path& path, bool header_only) {
  auto f = open_file(path, "rb");
  switch (sniff(f.get())) {
    case Format::kPng: return read_png(f.get(), path, header_only);
    case Format::kJpeg: return read_jpeg(f.get(), path, header_only);
    case Format::kUnknown: break;
  }
  throw Error(ErrorKind::kParse, "unsupported image format: " + path.string());
}

}  // namespace

RgbImage read_image(const std::filesystem::path& path) { return read_any(path, false); }

GridShape image_dimensions(const std::filesystem::path& path) {
  const RgbImage header = read_any(path, true);
  return {header.height, header.width};
}

void write_png(const std::filesystem::path& path, const RgbImage& image) {
  if (image.empty()) throw Error(ErrorKind::kInvalidArgument, "cannot write empty image");
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  auto f = open_file(path, "wb");
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!info) {
    png_destroy_write_struct(&png, nullptr);
    throw Error(ErrorKind::kIo, "libpng init failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw Error(ErrorKind::kIo, "failed writing " + path.string());
  }
  png_init_io(png, f.get());
  png_set_IHDR(png, info, image.width, image.height, 8, PNG_COLOR_TYPE_RGB,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (std::size_t y = 0; y < image.height; ++y) {
    png_write_row(png, const_cast<png_bytep>(&image.pixels[y * image.width * 3]));
  }
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

}  // namespace finecount
