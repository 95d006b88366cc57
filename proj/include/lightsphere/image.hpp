// Copyright 2026 The Lightsphere Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//    http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

// Float images plus PNG (8/16-bit) and JPEG codecs.

#include <jpeglib.h>
#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace nls {

class ImageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Interleaved row-major float image.
struct Image {
  int width = 0;
  int height = 0;
  int channels = 0;
  std::vector<float> data;

  Image() = default;
  Image(int w, int h, int c, float fill = 0.0f)
      : width(w), height(h), channels(c), data(static_cast<std::size_t>(w) * h * c, fill) {}

  bool empty() const { return data.empty(); }
  std::size_t pixel_count() const { return static_cast<std::size_t>(width) * height; }
  float& at(int x, int y, int c) { return data[(static_cast<std::size_t>(y) * width + x) * channels + c]; }
  float at(int x, int y, int c) const { return data[(static_cast<std::size_t>(y) * width + x) * channels + c]; }

  bool operator==(const Image& o) const {
    return width == o.width && height == o.height && channels == o.channels && data == o.data;
  }
};

// Bilinear lookup at continuous pixel coordinates (pixel centers at +0.5),
// edge-clamped.
inline float sample_bilinear(const Image& img, double x, double y, int c) {
  const double fx = std::clamp(x - 0.5, 0.0, img.width - 1.0);
  const double fy = std::clamp(y - 0.5, 0.0, img.height - 1.0);
  const int x0 = static_cast<int>(fx), y0 = static_cast<int>(fy);
  const int x1 = std::min(x0 + 1, img.width - 1), y1 = std::min(y0 + 1, img.height - 1);
  const double ax = fx - x0, ay = fy - y0;
  const double top = img.at(x0, y0, c) * (1 - ax) + img.at(x1, y0, c) * ax;
  const double bot = img.at(x0, y1, c) * (1 - ax) + img.at(x1, y1, c) * ax;
  return static_cast<float>(top * (1 - ay) + bot * ay);
}

// Mean over factor x factor blocks; trailing partial blocks are dropped.
inline Image box_downsample(const Image& img, int factor) {
  if (factor < 1) throw ImageError("downsample factor must be >= 1");
  if (factor == 1) return img;
  const int w = img.width / factor, h = img.height / factor;
  if (w == 0 || h == 0) throw ImageError("image too small to downsample");
  Image out(w, h, img.channels);
  const double norm = 1.0 / (factor * factor);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < img.channels; ++c) {
        double s = 0;
        for (int dy = 0; dy < factor; ++dy)
          for (int dx = 0; dx < factor; ++dx) s += img.at(x * factor + dx, y * factor + dy, c);
        out.at(x, y, c) = static_cast<float>(s * norm);
      }
  return out;
}

inline double mse(const Image& a, const Image& b) {
  if (a.width != b.width || a.height != b.height || a.channels != b.channels)
    throw ImageError("mse: image shapes differ");
  double s = 0;
  for (std::size_t i = 0; i < a.data.size(); ++i) {
    const double d = static_cast<double>(a.data[i]) - b.data[i];
    s += d * d;
  }
  return a.data.empty() ? 0.0 : s / static_cast<double>(a.data.size());
}

// Peak signal 1.0.
inline double psnr_from_mse(double m) { return m <= 0 ? 200.0 : -10.0 * std::log10(m); }
inline double psnr(const Image& a, const Image& b) { return psnr_from_mse(mse(a, b)); }

inline std::uint16_t quantize16(float v) {
  return static_cast<std::uint16_t>(std::lround(std::clamp(v, 0.0f, 1.0f) * 65535.0f));
}
inline std::uint8_t quantize8(float v) {
  return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f));
}

namespace detail {

struct PngMemReader {
  const std::uint8_t* data;
  std::size_t size;
  std::size_t pos = 0;
};

inline void png_error_fn(png_structp png, png_const_charp msg) {
  auto* err = static_cast<std::string*>(png_get_error_ptr(png));
  if (err) *err = msg;
  png_longjmp(png, 1);
}
inline void png_warning_fn(png_structp, png_const_charp) {}

inline void png_read_mem(png_structp png, png_bytep out, png_size_t n) {
  auto* r = static_cast<PngMemReader*>(png_get_io_ptr(png));
  if (r->pos + n > r->size) png_error(png, "truncated PNG data");
  std::memcpy(out, r->data + r->pos, n);
  r->pos += n;
}

inline void png_write_mem(png_structp png, png_bytep in, png_size_t n) {
  auto* v = static_cast<std::vector<std::uint8_t>*>(png_get_io_ptr(png));
  v->insert(v->end(), in, in + n);
}
inline void png_flush_mem(png_structp) {}

inline std::vector<std::uint8_t> read_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw ImageError("cannot open " + path);
  return std::vector<std::uint8_t>((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
}

inline void write_file(const std::string& path, const std::vector<std::uint8_t>& bytes) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw ImageError("cannot write " + path);
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw ImageError("short write to " + path);
}

}  // namespace detail

struct DecodedPng {
  Image image;    // values scaled to [0, 1]
  int bit_depth;  // 8 or 16 after expansion
  std::vector<std::uint16_t> raw;  // exact integer samples
};

// Gray, gray+alpha, RGB and RGBA are accepted; palette and sub-byte depths
// are expanded to 8 bits. Alpha is kept as its own channel.
inline DecodedPng decode_png(const std::uint8_t* bytes, std::size_t size) {
  if (size < 8 || png_sig_cmp(bytes, 0, 8) != 0) throw ImageError("not a PNG stream");
  std::string err;
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, &err, detail::png_error_fn, detail::png_warning_fn);
  if (!png) throw ImageError("png_create_read_struct failed");
  png_infop info = png_create_info_struct(png);
  DecodedPng out{};
  detail::PngMemReader reader{bytes, size};
  std::vector<png_bytep> rows;
  std::vector<std::uint8_t> buffer;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw ImageError("PNG decode failed: " + err);
  }
  png_set_read_fn(png, &reader, detail::png_read_mem);
  png_read_info(png, info);
  const int color = png_get_color_type(png, info);
  int depth = png_get_bit_depth(png, info);
  if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (color == PNG_COLOR_TYPE_GRAY && depth < 8) png_set_expand_gray_1_2_4_to_8(png);
  if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(png);
  if (depth == 16) png_set_swap(png);  // host order (little-endian) samples
  png_read_update_info(png, info);
  const int w = static_cast<int>(png_get_image_width(png, info));
  const int h = static_cast<int>(png_get_image_height(png, info));
  const int c = png_get_channels(png, info);
  depth = png_get_bit_depth(png, info);
  const std::size_t rowbytes = png_get_rowbytes(png, info);
  buffer.resize(rowbytes * h);
  rows.resize(h);
  for (int y = 0; y < h; ++y) rows[y] = buffer.data() + rowbytes * y;
  png_read_image(png, rows.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);

  out.bit_depth = depth;
  out.image = Image(w, h, c);
  out.raw.resize(static_cast<std::size_t>(w) * h * c);
  const float scale = depth == 16 ? 1.0f / 65535.0f : 1.0f / 255.0f;
  for (int y = 0; y < h; ++y)
    for (std::size_t i = 0; i < static_cast<std::size_t>(w) * c; ++i) {
      std::uint16_t v;
      if (depth == 16)
        std::memcpy(&v, rows[y] + 2 * i, 2);
      else
        v = rows[y][i];
      const std::size_t k = static_cast<std::size_t>(y) * w * c + i;
      out.raw[k] = v;
      out.image.data[k] = v * scale;
    }
  return out;
}

inline DecodedPng read_png(const std::string& path) {
  const auto bytes = detail::read_file(path);
  try {
    return decode_png(bytes.data(), bytes.size());
  } catch (const ImageError& e) {
    throw ImageError(path + ": " + e.what());
  }
}

// Encodes integer samples (already quantized) at 8 or 16 bits.
inline std::vector<std::uint8_t> encode_png_samples(const std::vector<std::uint16_t>& samples, int w, int h, int c,
                                                    int bit_depth) {
  if (bit_depth != 8 && bit_depth != 16) throw ImageError("PNG bit depth must be 8 or 16");
  if (c < 1 || c > 4 || samples.size() != static_cast<std::size_t>(w) * h * c)
    throw ImageError("PNG encode: bad sample buffer");
  static const int kColor[] = {PNG_COLOR_TYPE_GRAY, PNG_COLOR_TYPE_GRAY_ALPHA, PNG_COLOR_TYPE_RGB,
                               PNG_COLOR_TYPE_RGB_ALPHA};
  std::string err;
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, &err, detail::png_error_fn, detail::png_warning_fn);
  if (!png) throw ImageError("png_create_write_struct failed");
  png_infop info = png_create_info_struct(png);
  std::vector<std::uint8_t> out;
  const std::size_t rowbytes = static_cast<std::size_t>(w) * c * (bit_depth / 8);
  std::vector<std::uint8_t> row(rowbytes);
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw ImageError("PNG encode failed: " + err);
  }
  png_set_write_fn(png, &out, detail::png_write_mem, detail::png_flush_mem);
  png_set_IHDR(png, info, w, h, bit_depth, kColor[c - 1], PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
               PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (int y = 0; y < h; ++y) {
    const std::uint16_t* src = samples.data() + static_cast<std::size_t>(y) * w * c;
    for (std::size_t i = 0; i < static_cast<std::size_t>(w) * c; ++i) {
      if (bit_depth == 16) {
        row[2 * i] = static_cast<std::uint8_t>(src[i] >> 8);  // PNG is big-endian
        row[2 * i + 1] = static_cast<std::uint8_t>(src[i] & 0xff);
      } else {
        row[i] = static_cast<std::uint8_t>(src[i]);
      }
    }
    png_write_row(png, row.data());
  }
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
  return out;
}

inline std::vector<std::uint8_t> encode_png(const Image& img, int bit_depth) {
  std::vector<std::uint16_t> s(img.data.size());
  for (std::size_t i = 0; i < s.size(); ++i) s[i] = bit_depth == 16 ? quantize16(img.data[i]) : quantize8(img.data[i]);
  return encode_png_samples(s, img.width, img.height, img.channels, bit_depth);
}

inline void write_png(const std::string& path, const Image& img, int bit_depth) {
  detail::write_file(path, encode_png(img, bit_depth));
}

// Baseline JPEG of a gray or RGB image.
inline std::vector<std::uint8_t> encode_jpeg(const Image& img, int quality = 90) {
  if (img.channels != 1 && img.channels != 3) throw ImageError("JPEG needs 1 or 3 channels");
  jpeg_compress_struct cinfo{};
  jpeg_error_mgr jerr{};
  cinfo.err = jpeg_std_error(&jerr);
  jerr.error_exit = [](j_common_ptr c) {
    char msg[JMSG_LENGTH_MAX];
    (*c->err->format_message)(c, msg);
    throw ImageError(std::string("JPEG encode failed: ") + msg);
  };
  unsigned char* mem = nullptr;
  unsigned long mem_size = 0;
  std::vector<std::uint8_t> out;
  jpeg_create_compress(&cinfo);
  try {
    jpeg_mem_dest(&cinfo, &mem, &mem_size);
    cinfo.image_width = static_cast<JDIMENSION>(img.width);
    cinfo.image_height = static_cast<JDIMENSION>(img.height);
    cinfo.input_components = img.channels;
    cinfo.in_color_space = img.channels == 3 ? JCS_RGB : JCS_GRAYSCALE;
    jpeg_set_defaults(&cinfo);
    jpeg_set_quality(&cinfo, quality, TRUE);
    jpeg_start_compress(&cinfo, TRUE);
    std::vector<JSAMPLE> row(static_cast<std::size_t>(img.width) * img.channels);
    while (cinfo.next_scanline < cinfo.image_height) {
      const float* src = img.data.data() + static_cast<std::size_t>(cinfo.next_scanline) * row.size();
      for (std::size_t i = 0; i < row.size(); ++i) row[i] = quantize8(src[i]);
      JSAMPROW rp = row.data();
      jpeg_write_scanlines(&cinfo, &rp, 1);
    }
    jpeg_finish_compress(&cinfo);
    out.assign(mem, mem + mem_size);
  } catch (...) {
    jpeg_destroy_compress(&cinfo);
    std::free(mem);
    throw;
  }
  jpeg_destroy_compress(&cinfo);
  std::free(mem);
  return out;
}

}  // namespace nls
