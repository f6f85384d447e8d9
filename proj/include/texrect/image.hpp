#pragma once

#include <jpeglib.h>
#include <png.h>

#include <algorithm>
#include <cmath>
#include <csetjmp>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <map>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "texrect/tensor.hpp"

namespace texrect {

/// RGB image [3,H,W] with values in [0,1].
using Image = Tensor<float>;

class ImageIoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Binary H x W mask: 1 = valid / observed, 0 = occluded / invalid.
struct Mask {
  Index height = 0;
  Index width = 0;
  std::vector<std::uint8_t> bits;

  Mask() = default;
  Mask(Index h, Index w, std::uint8_t fill = 1) : height(h), width(w), bits(static_cast<std::size_t>(h * w), fill) {}

  std::uint8_t at(Index y, Index x) const { return bits[static_cast<std::size_t>(y * width + x)]; }
  std::uint8_t& at(Index y, Index x) { return bits[static_cast<std::size_t>(y * width + x)]; }

  Index valid_count() const {
    Index n = 0;
    for (auto b : bits) n += b;
    return n;
  }
  double valid_fraction() const {
    return bits.empty() ? 0.0 : static_cast<double>(valid_count()) / static_cast<double>(bits.size());
  }

  Mask intersect(const Mask& other) const {
    if (other.height != height || other.width != width) throw DimensionError("mask intersection: size mismatch");
    Mask out(height, width, 0);
    for (std::size_t i = 0; i < bits.size(); ++i) out.bits[i] = bits[i] & other.bits[i];
    return out;
  }

  /// As a [1,1,H,W] tensor of 0/1 values.
  template <typename T>
  Tensor<T> to_tensor() const {
    std::vector<T> v(bits.begin(), bits.end());
    return Tensor<T>(Shape{1, 1, height, width}, std::move(v));
  }

  bool operator==(const Mask&) const = default;
};

inline Index image_height(const Image& img) { return img.dim(img.rank() - 2); }
inline Index image_width(const Image& img) { return img.dim(img.rank() - 1); }

/// Zeroes pixels where the mask is 0.
inline Image apply_mask(const Image& img, const Mask& mask) {
  const Index c = img.dim(0), h = img.dim(1), w = img.dim(2);
  if (mask.height != h || mask.width != w) throw DimensionError("apply_mask: size mismatch");
  std::vector<float> v(img.values());
  for (Index k = 0; k < c; ++k)
    for (Index i = 0; i < h * w; ++i)
      if (!mask.bits[i]) v[k * h * w + i] = 0.0f;
  return Image(img.shape(), std::move(v));
}

/// [0,1] -> [-1,1], adding a leading batch axis: [3,H,W] -> [1,3,H,W].
template <typename T>
Tensor<T> to_signed_batch(const Image& img) {
  std::vector<T> v(img.data().size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = static_cast<T>(img.data()[i]) * T(2) - T(1);
  return Tensor<T>(Shape{1, img.dim(0), img.dim(1), img.dim(2)}, std::move(v));
}

/// [-1,1] -> [0,1] for one item of a batch, clamped.
template <typename T>
Image from_signed_batch(const Tensor<T>& batch, Index item) {
  const Index c = batch.dim(1), h = batch.dim(2), w = batch.dim(3);
  std::vector<float> v(static_cast<std::size_t>(c * h * w));
  const T* src = batch.data().data() + item * c * h * w;
  for (std::size_t i = 0; i < v.size(); ++i)
    v[i] = std::clamp(static_cast<float>((src[i] + T(1)) * T(0.5)), 0.0f, 1.0f);
  return Image(Shape{c, h, w}, std::move(v));
}

inline std::uint8_t to_byte(float v) {
  return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f));
}

namespace detail {

struct PngWriteState {
  png_structp png = nullptr;
  png_infop info = nullptr;
  ~PngWriteState() {
    if (png) png_destroy_write_struct(&png, info ? &info : nullptr);
  }
};

inline void write_png_bytes(const std::filesystem::path& path, Index width, Index height, int channels,
                            const std::vector<std::uint8_t>& bytes, const std::map<std::string, std::string>& text) {
  std::unique_ptr<FILE, int (*)(FILE*)> fp(std::fopen(path.string().c_str(), "wb"), &std::fclose);
  if (!fp) throw ImageIoError("cannot open for writing: " + path.string());
  PngWriteState st;
  st.png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (!st.png) throw ImageIoError("png_create_write_struct failed");
  st.info = png_create_info_struct(st.png);
  if (!st.info) throw ImageIoError("png_create_info_struct failed");
  if (setjmp(png_jmpbuf(st.png))) throw ImageIoError("libpng error while writing " + path.string());
  png_init_io(st.png, fp.get());
  png_set_compression_level(st.png, 6);
  png_set_IHDR(st.png, st.info, static_cast<png_uint_32>(width), static_cast<png_uint_32>(height), 8,
               channels == 1 ? PNG_COLOR_TYPE_GRAY : PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  std::vector<png_text> chunks;
  std::vector<std::string> storage;
  storage.reserve(text.size() * 2);
  for (const auto& [k, v] : text) {
    storage.push_back(k);
    storage.push_back(v);
    png_text t{};
    t.compression = PNG_TEXT_COMPRESSION_NONE;
    t.key = storage[storage.size() - 2].data();
    t.text = storage.back().data();
    chunks.push_back(t);
  }
  if (!chunks.empty()) png_set_text(st.png, st.info, chunks.data(), static_cast<int>(chunks.size()));
  png_write_info(st.png, st.info);
  for (Index y = 0; y < height; ++y) {
    png_write_row(st.png, const_cast<png_bytep>(bytes.data() + y * width * channels));
  }
  png_write_end(st.png, nullptr);
}

struct RawImage {
  Index width = 0, height = 0;
  int channels = 0;
  std::vector<std::uint8_t> bytes;
  std::map<std::string, std::string> text;
};

inline RawImage read_png_raw(const std::filesystem::path& path) {
  std::unique_ptr<FILE, int (*)(FILE*)> fp(std::fopen(path.string().c_str(), "rb"), &std::fclose);
  if (!fp) throw ImageIoError("cannot open: " + path.string());
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (!png) throw ImageIoError("png_create_read_struct failed");
  png_infop info = png_create_info_struct(png);
  struct Cleanup {
    png_structp* p;
    png_infop* i;
    ~Cleanup() { png_destroy_read_struct(p, i, nullptr); }
  } cleanup{&png, &info};
  if (setjmp(png_jmpbuf(png))) throw ImageIoError("libpng error while reading " + path.string());
  png_init_io(png, fp.get());
  png_read_info(png, info);
  png_set_strip_16(png);
  png_set_packing(png);
  png_set_palette_to_rgb(png);
  if (png_get_color_type(png, info) == PNG_COLOR_TYPE_GRAY && png_get_bit_depth(png, info) < 8)
    png_set_expand_gray_1_2_4_to_8(png);
  png_set_strip_alpha(png);
  png_read_update_info(png, info);
  RawImage raw;
  raw.width = png_get_image_width(png, info);
  raw.height = png_get_image_height(png, info);
  raw.channels = png_get_channels(png, info);
  raw.bytes.resize(static_cast<std::size_t>(raw.width * raw.height * raw.channels));
  std::vector<png_bytep> rows(static_cast<std::size_t>(raw.height));
  for (Index y = 0; y < raw.height; ++y) rows[y] = raw.bytes.data() + y * raw.width * raw.channels;
  png_read_image(png, rows.data());
  png_read_end(png, info);
  png_textp text = nullptr;
  int num_text = 0;
  png_get_text(png, info, &text, &num_text);
  for (int i = 0; i < num_text; ++i) raw.text[text[i].key] = text[i].text ? text[i].text : "";
  return raw;
}

struct JpegErrorManager {
  jpeg_error_mgr pub;
  std::jmp_buf jump;
};

inline RawImage read_jpeg_raw(const std::filesystem::path& path) {
  std::unique_ptr<FILE, int (*)(FILE*)> fp(std::fopen(path.string().c_str(), "rb"), &std::fclose);
  if (!fp) throw ImageIoError("cannot open: " + path.string());
  jpeg_decompress_struct cinfo{};
  JpegErrorManager err{};
  cinfo.err = jpeg_std_error(&err.pub);
  err.pub.error_exit = [](j_common_ptr c) { std::longjmp(reinterpret_cast<JpegErrorManager*>(c->err)->jump, 1); };
  if (setjmp(err.jump)) {
    jpeg_destroy_decompress(&cinfo);
    throw ImageIoError("libjpeg error while reading " + path.string());
  }
  jpeg_create_decompress(&cinfo);
  jpeg_stdio_src(&cinfo, fp.get());
  jpeg_read_header(&cinfo, TRUE);
  cinfo.out_color_space = JCS_RGB;
  jpeg_start_decompress(&cinfo);
  RawImage raw;
  raw.width = cinfo.output_width;
  raw.height = cinfo.output_height;
  raw.channels = cinfo.output_components;
  raw.bytes.resize(static_cast<std::size_t>(raw.width * raw.height * raw.channels));
  while (cinfo.output_scanline < cinfo.output_height) {
    JSAMPROW row = raw.bytes.data() + static_cast<Index>(cinfo.output_scanline) * raw.width * raw.channels;
    jpeg_read_scanlines(&cinfo, &row, 1);
  }
  jpeg_finish_decompress(&cinfo);
  jpeg_destroy_decompress(&cinfo);
  return raw;
}

inline RawImage read_raw(const std::filesystem::path& path) {
  std::unique_ptr<FILE, int (*)(FILE*)> fp(std::fopen(path.string().c_str(), "rb"), &std::fclose);
  if (!fp) throw ImageIoError("cannot open: " + path.string());
  unsigned char magic[8] = {};
  const std::size_t n = std::fread(magic, 1, sizeof(magic), fp.get());
  if (n >= 8 && png_sig_cmp(magic, 0, 8) == 0) return read_png_raw(path);
  if (n >= 3 && magic[0] == 0xFF && magic[1] == 0xD8 && magic[2] == 0xFF) return read_jpeg_raw(path);
  throw ImageIoError("unsupported image format: " + path.string());
}

}  // namespace detail

/// Loads a PNG or JPEG as RGB [3,H,W] in [0,1]. Grayscale is replicated.
inline Image load_image(const std::filesystem::path& path) {
  const detail::RawImage raw = detail::read_raw(path);
  const Index hw = raw.width * raw.height;
  std::vector<float> v(static_cast<std::size_t>(3 * hw));
  for (Index c = 0; c < 3; ++c) {
    const int src_c = raw.channels >= 3 ? static_cast<int>(c) : 0;
    for (Index i = 0; i < hw; ++i) v[c * hw + i] = raw.bytes[i * raw.channels + src_c] / 255.0f;
  }
  return Image(Shape{3, raw.height, raw.width}, std::move(v));
}

/// Loads a single-channel mask. Accepts {0,255} or {0,1} pixel values only.
inline Mask load_mask(const std::filesystem::path& path) {
  const detail::RawImage raw = detail::read_raw(path);
  Mask m(raw.height, raw.width, 0);
  for (Index i = 0; i < raw.width * raw.height; ++i) {
    const std::uint8_t v = raw.bytes[i * raw.channels];
    if (v != 0 && v != 255 && v != 1) {
      throw ContractError("mask is not binary: pixel value " + std::to_string(v) + " in " + path.string());
    }
    m.bits[i] = v ? 1 : 0;
  }
  return m;
}

/// Reads the tEXt metadata of a PNG.
inline std::map<std::string, std::string> read_png_text(const std::filesystem::path& path) {
  return detail::read_png_raw(path).text;
}

inline void save_png(const std::filesystem::path& path, const Image& img,
                     const std::map<std::string, std::string>& text = {}) {
  const Index c = img.dim(0), h = img.dim(1), w = img.dim(2);
  if (c != 3 && c != 1) throw DimensionError("save_png: expected 1 or 3 channels, got " + shape_str(img.shape()));
  std::vector<std::uint8_t> bytes(static_cast<std::size_t>(c * h * w));
  for (Index y = 0; y < h; ++y)
    for (Index x = 0; x < w; ++x)
      for (Index k = 0; k < c; ++k) bytes[(y * w + x) * c + k] = to_byte(img.data()[(k * h + y) * w + x]);
  detail::write_png_bytes(path, w, h, static_cast<int>(c), bytes, text);
}

/// Masks are stored as 8-bit single channel {0,255}.
inline void save_mask_png(const std::filesystem::path& path, const Mask& mask,
                          const std::map<std::string, std::string>& text = {}) {
  std::vector<std::uint8_t> bytes(mask.bits.size());
  for (std::size_t i = 0; i < bytes.size(); ++i) bytes[i] = mask.bits[i] ? 255 : 0;
  detail::write_png_bytes(path, mask.width, mask.height, 1, bytes, text);
}

/// Separable resampling with a triangle filter widened by the scale factor
/// when minifying (antialiased bilinear).
inline Image resize_image(const Image& img, Index out_h, Index out_w) {
  const Index c = img.dim(0), in_h = img.dim(1), in_w = img.dim(2);
  if (out_h < 1 || out_w < 1) throw DimensionError("resize: empty target");
  struct Tap {
    Index index;
    float weight;
  };
  auto taps = [](Index in, Index out) {
    std::vector<std::vector<Tap>> result(static_cast<std::size_t>(out));
    const double scale = static_cast<double>(in) / static_cast<double>(out);
    const double support = std::max(1.0, scale);
    for (Index o = 0; o < out; ++o) {
      const double center = (static_cast<double>(o) + 0.5) * scale;
      const Index lo = static_cast<Index>(std::floor(center - support));
      const Index hi = static_cast<Index>(std::ceil(center + support));
      double total = 0.0;
      std::vector<std::pair<Index, double>> raw;
      for (Index i = lo; i <= hi; ++i) {
        const double d = std::abs((static_cast<double>(i) + 0.5 - center) / support);
        if (d >= 1.0) continue;
        raw.emplace_back(std::clamp<Index>(i, 0, in - 1), 1.0 - d);
        total += 1.0 - d;
      }
      for (auto& [idx, wgt] : raw) result[o].push_back({idx, static_cast<float>(wgt / total)});
    }
    return result;
  };
  const auto ty = taps(in_h, out_h);
  const auto tx = taps(in_w, out_w);
  std::vector<float> tmp(static_cast<std::size_t>(c * in_h * out_w), 0.0f);
  const auto src = img.data();
  for (Index k = 0; k < c; ++k)
    for (Index y = 0; y < in_h; ++y)
      for (Index x = 0; x < out_w; ++x) {
        float s = 0.0f;
        for (const Tap& t : tx[x]) s += t.weight * src[(k * in_h + y) * in_w + t.index];
        tmp[(k * in_h + y) * out_w + x] = s;
      }
  std::vector<float> out(static_cast<std::size_t>(c * out_h * out_w), 0.0f);
  for (Index k = 0; k < c; ++k)
    for (Index y = 0; y < out_h; ++y)
      for (Index x = 0; x < out_w; ++x) {
        float s = 0.0f;
        for (const Tap& t : ty[y]) s += t.weight * tmp[(k * in_h + t.index) * out_w + x];
        out[(k * out_h + y) * out_w + x] = s;
      }
  return Image(Shape{c, out_h, out_w}, std::move(out));
}

/// Nearest-neighbour mask resize.
inline Mask resize_mask(const Mask& m, Index out_h, Index out_w) {
  Mask out(out_h, out_w, 0);
  for (Index y = 0; y < out_h; ++y)
    for (Index x = 0; x < out_w; ++x) {
      const Index sy = std::min(m.height - 1, (2 * y + 1) * m.height / (2 * out_h));
      const Index sx = std::min(m.width - 1, (2 * x + 1) * m.width / (2 * out_w));
      out.at(y, x) = m.at(sy, sx);
    }
  return out;
}

inline Image crop_image(const Image& img, Index top, Index left, Index h, Index w) {
  const Index c = img.dim(0), in_h = img.dim(1), in_w = img.dim(2);
  if (top < 0 || left < 0 || top + h > in_h || left + w > in_w) throw DimensionError("crop outside image");
  std::vector<float> out(static_cast<std::size_t>(c * h * w));
  for (Index k = 0; k < c; ++k)
    for (Index y = 0; y < h; ++y)
      std::copy_n(img.data().data() + (k * in_h + top + y) * in_w + left, w, out.data() + (k * h + y) * w);
  return Image(Shape{c, h, w}, std::move(out));
}

/// Quantises to 8 bits and back, matching what a PNG round trip produces.
inline Image quantize_8bit(const Image& img) {
  std::vector<float> v(img.values());
  for (auto& x : v) x = to_byte(x) / 255.0f;
  return Image(img.shape(), std::move(v));
}

}  // namespace texrect
