#include "reinseg/image_io.hpp"

#include <png.h>

#include <cmath>
#include <cstdio>
#include <cstring>
#include <memory>
#include <vector>

namespace reinseg {
namespace {

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

// Reads the whole file as interleaved 8-bit RGB rows.
struct RawRgb {
  int height = 0;
  int width = 0;
  std::vector<unsigned char> pixels;  // height*width*3, row-major

  unsigned char at(int y, int x, int ch) const { return pixels[(static_cast<std::size_t>(y) * width + x) * 3 + ch]; }
};

RawRgb read_rgb(const std::string& path) {
  FilePtr fp(std::fopen(path.c_str(), "rb"));
  if (!fp) throw IoError("cannot open PNG for reading: " + path);

  unsigned char sig[8];
  if (std::fread(sig, 1, 8, fp.get()) != 8 || png_sig_cmp(sig, 0, 8) != 0)
    throw IoError("not a PNG file: " + path);

  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (!png) throw IoError("libpng: failed to allocate read struct");
  png_infop info = png_create_info_struct(png);
  if (!info) {
    png_destroy_read_struct(&png, nullptr, nullptr);
    throw IoError("libpng: failed to allocate info struct");
  }

  RawRgb out;
  std::vector<png_bytep> row_ptrs;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw IoError("libpng: failed to decode " + path);
  }

  png_init_io(png, fp.get());
  png_set_sig_bytes(png, 8);
  png_read_info(png, info);

  png_set_expand(png);       // palette -> rgb, low bit depth gray -> 8
  png_set_strip_16(png);     // 16 bit -> 8 bit
  png_set_strip_alpha(png);  // drop alpha
  png_set_gray_to_rgb(png);
  png_read_update_info(png, info);

  out.height = static_cast<int>(png_get_image_height(png, info));
  out.width = static_cast<int>(png_get_image_width(png, info));
  if (png_get_channels(png, info) != 3) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw IoError("unexpected channel count after expansion: " + path);
  }
  out.pixels.assign(static_cast<std::size_t>(out.height) * out.width * 3, 0);
  row_ptrs.resize(out.height);
  for (int y = 0; y < out.height; ++y)
    row_ptrs[y] = out.pixels.data() + static_cast<std::size_t>(y) * out.width * 3;
  png_read_image(png, row_ptrs.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  return out;
}

void write_rgb_rows(const std::string& path, int height, int width, int channels,
                    std::vector<unsigned char>& pixels) {
  FilePtr fp(std::fopen(path.c_str(), "wb"));
  if (!fp) throw IoError("cannot open PNG for writing: " + path);

  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (!png) throw IoError("libpng: failed to allocate write struct");
  png_infop info = png_create_info_struct(png);
  if (!info) {
    png_destroy_write_struct(&png, nullptr);
    throw IoError("libpng: failed to allocate info struct");
  }

  std::vector<png_bytep> row_ptrs(height);
  for (int y = 0; y < height; ++y)
    row_ptrs[y] = pixels.data() + static_cast<std::size_t>(y) * width * channels;

  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw IoError("libpng: failed to encode " + path);
  }

  png_init_io(png, fp.get());
  int color = channels == 3 ? PNG_COLOR_TYPE_RGB : PNG_COLOR_TYPE_GRAY;
  png_set_IHDR(png, info, width, height, 8, color, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
               PNG_FILTER_TYPE_DEFAULT);
  // Fixed settings keep the emitted bytes a pure function of the pixel data.
  png_set_compression_level(png, 6);
  png_set_filter(png, 0, PNG_FILTER_NONE);
  png_write_info(png, info);
  png_write_image(png, row_ptrs.data());
  png_write_end(png, info);
  png_destroy_write_struct(&png, &info);
}

unsigned char quantize(float v) {
  float c = v < 0.0f ? 0.0f : (v > 1.0f ? 1.0f : v);
  return static_cast<unsigned char>(std::lround(c * 255.0f));
}

}  // namespace

Image read_image_png(const std::string& path) {
  RawRgb raw = read_rgb(path);
  Image img(raw.height, raw.width);
  for (int y = 0; y < raw.height; ++y) {
    for (int x = 0; x < raw.width; ++x) {
      img.r(y, x) = raw.at(y, x, 0) / 255.0f;
      img.g(y, x) = raw.at(y, x, 1) / 255.0f;
      img.b(y, x) = raw.at(y, x, 2) / 255.0f;
    }
  }
  return img;
}

MaskArray read_mask_png(const std::string& path) {
  RawRgb raw = read_rgb(path);
  MaskArray mask(raw.height, raw.width);
  for (int y = 0; y < raw.height; ++y)
    for (int x = 0; x < raw.width; ++x)
      mask(y, x) = (raw.at(y, x, 0) | raw.at(y, x, 1) | raw.at(y, x, 2)) ? 1 : 0;
  return mask;
}

void write_image_png(const std::string& path, const Image& img) {
  const int h = img.height(), w = img.width();
  if (h <= 0 || w <= 0) throw IoError("refusing to write empty image: " + path);
  if (img.g.rows() != h || img.g.cols() != w || img.b.rows() != h || img.b.cols() != w)
    throw ShapeError("image channels disagree on shape: " + path);
  std::vector<unsigned char> pixels(static_cast<std::size_t>(h) * w * 3);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      std::size_t base = (static_cast<std::size_t>(y) * w + x) * 3;
      pixels[base + 0] = quantize(img.r(y, x));
      pixels[base + 1] = quantize(img.g(y, x));
      pixels[base + 2] = quantize(img.b(y, x));
    }
  }
  write_rgb_rows(path, h, w, 3, pixels);
}

void write_mask_png(const std::string& path, const MaskArray& mask) {
  const int h = static_cast<int>(mask.rows()), w = static_cast<int>(mask.cols());
  if (h <= 0 || w <= 0) throw IoError("refusing to write empty mask: " + path);
  std::vector<unsigned char> pixels(static_cast<std::size_t>(h) * w);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      pixels[static_cast<std::size_t>(y) * w + x] = mask(y, x) ? 255 : 0;
  write_rgb_rows(path, h, w, 1, pixels);
}

}  // namespace reinseg
