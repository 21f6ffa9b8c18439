#include "gilab/png.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <memory>
#include <vector>

namespace gilab {

namespace {

struct FileCloser {
  void operator()(std::FILE* f) const { std::fclose(f); }
};
using File = std::unique_ptr<std::FILE, FileCloser>;

[[noreturn]] void png_fail(png_structp png, png_const_charp msg) {
  throw Error(std::string("libpng: ") + msg + " (" +
              static_cast<const char*>(png_get_error_ptr(png)) + ")");
}

void png_warn(png_structp, png_const_charp) {}

}  // namespace

Tensor read_png(const std::filesystem::path& path) {
  const std::string name = path.string();
  File f(std::fopen(name.c_str(), "rb"));
  if (!f) throw Error("cannot open image " + name);
  png_byte sig[8];
  if (std::fread(sig, 1, 8, f.get()) != 8 || png_sig_cmp(sig, 0, 8) != 0) {
    throw Error("not a PNG file: " + name);
  }
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING,
                                           const_cast<char*>(name.c_str()), png_fail, png_warn);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!info) {
    png_destroy_read_struct(&png, nullptr, nullptr);
    throw Error("libpng allocation failed");
  }
  struct Guard {
    png_structp* p;
    png_infop* i;
    ~Guard() { png_destroy_read_struct(p, i, nullptr); }
  } guard{&png, &info};

  png_init_io(png, f.get());
  png_set_sig_bytes(png, 8);
  png_read_info(png, info);
  const auto color = png_get_color_type(png, info);
  if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (color == PNG_COLOR_TYPE_GRAY && png_get_bit_depth(png, info) < 8) {
    png_set_expand_gray_1_2_4_to_8(png);
  }
  png_set_strip_alpha(png);
  png_set_interlace_handling(png);
  png_read_update_info(png, info);

  const std::size_t w = png_get_image_width(png, info);
  const std::size_t h = png_get_image_height(png, info);
  const std::size_t channels = png_get_channels(png, info);
  const int depth = png_get_bit_depth(png, info);
  if (channels != 1 && channels != 3) {
    throw Error("unsupported channel count " + std::to_string(channels) + " in " + name);
  }
  const std::size_t row_bytes = png_get_rowbytes(png, info);
  std::vector<png_byte> buffer(row_bytes * h);
  std::vector<png_bytep> rows(h);
  for (std::size_t i = 0; i < h; ++i) rows[i] = buffer.data() + i * row_bytes;
  png_read_image(png, rows.data());

  Tensor out(Shape{channels, h, w});
  const double maxv = depth == 16 ? 65535.0 : 255.0;
  for (std::size_t i = 0; i < h; ++i)
    for (std::size_t j = 0; j < w; ++j)
      for (std::size_t c = 0; c < channels; ++c) {
        const std::size_t k = j * channels + c;
        const double v = depth == 16 ? (rows[i][2 * k] << 8 | rows[i][2 * k + 1]) : rows[i][k];
        out[(c * h + i) * w + j] = v / maxv;
      }
  return out;
}

void write_png(const std::filesystem::path& path, const Tensor& image, int bit_depth) {
  if (bit_depth != 8 && bit_depth != 16) throw Error("PNG bit depth must be 8 or 16");
  if (image.rank() != 3 || (image.dim(0) != 1 && image.dim(0) != 3)) {
    throw ShapeError("write_png expects [1|3, H, W], got " + to_string(image.shape()));
  }
  const std::size_t c = image.dim(0), h = image.dim(1), w = image.dim(2);
  const std::string name = path.string();
  File f(std::fopen(name.c_str(), "wb"));
  if (!f) throw Error("cannot write image " + name);
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING,
                                            const_cast<char*>(name.c_str()), png_fail, png_warn);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!info) {
    png_destroy_write_struct(&png, nullptr);
    throw Error("libpng allocation failed");
  }
  struct Guard {
    png_structp* p;
    png_infop* i;
    ~Guard() { png_destroy_write_struct(p, i); }
  } guard{&png, &info};

  png_init_io(png, f.get());
  png_set_IHDR(png, info, static_cast<png_uint_32>(w), static_cast<png_uint_32>(h), bit_depth,
               c == 1 ? PNG_COLOR_TYPE_GRAY : PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  const std::size_t bytes = bit_depth / 8;
  const double maxv = bit_depth == 16 ? 65535.0 : 255.0;
  std::vector<png_byte> row(w * c * bytes);
  for (std::size_t i = 0; i < h; ++i) {
    for (std::size_t j = 0; j < w; ++j)
      for (std::size_t ch = 0; ch < c; ++ch) {
        const auto v = static_cast<unsigned>(
            std::lround(std::clamp(image[(ch * h + i) * w + j], 0.0, 1.0) * maxv));
        const std::size_t k = (j * c + ch) * bytes;
        if (bytes == 2) {
          row[k] = static_cast<png_byte>(v >> 8);
          row[k + 1] = static_cast<png_byte>(v & 0xff);
        } else {
          row[k] = static_cast<png_byte>(v);
        }
      }
    png_write_row(png, row.data());
  }
  png_write_end(png, nullptr);
}

}  // namespace gilab
