#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "stylebank/binary_io.hpp"
#include "stylebank/error.hpp"
#include "stylebank/rng.hpp"

namespace stylebank {

/// RGB image, f32 in [0, 1], interleaved, row-major.
struct Image {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<float> rgb;

  Image() = default;
  Image(std::size_t w, std::size_t h, float fill = 0.0f) : width(w), height(h), rgb(w * h * 3, fill) {}

  float& at(std::size_t x, std::size_t y, std::size_t c) { return rgb[(y * width + x) * 3 + c]; }
  float at(std::size_t x, std::size_t y, std::size_t c) const { return rgb[(y * width + x) * 3 + c]; }
  std::size_t pixels() const noexcept { return width * height; }
  bool empty() const noexcept { return rgb.empty(); }

  bool operator==(const Image&) const = default;
};

namespace detail {

inline void skip_ppm_space(std::istream& in) {
  for (;;) {
    const int c = in.peek();
    if (c == '#') {
      std::string line;
      std::getline(in, line);
    } else if (std::isspace(c)) {
      in.get();
    } else {
      return;
    }
  }
}

}  // namespace detail

/// Reads a binary PPM (P6, maxval 255). Values map to v / 255.
inline Image read_ppm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError(FormatErrc::io, path.string() + ": cannot open");
  std::string magic(2, '\0');
  in.read(magic.data(), 2);
  if (magic != "P6") throw FormatError(FormatErrc::bad_magic, path.string() + ": not a binary PPM");
  std::size_t w = 0, h = 0, maxval = 0;
  detail::skip_ppm_space(in);
  in >> w;
  detail::skip_ppm_space(in);
  in >> h;
  detail::skip_ppm_space(in);
  in >> maxval;
  if (!in || maxval != 255 || w == 0 || h == 0) {
    throw FormatError(FormatErrc::corrupt_index, path.string() + ": unsupported PPM header");
  }
  in.get();  // single whitespace before the raster
  std::vector<unsigned char> raw(w * h * 3);
  in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
  if (static_cast<std::size_t>(in.gcount()) != raw.size()) {
    throw FormatError(FormatErrc::truncated, path.string() + ": raster cut short");
  }
  Image img(w, h);
  for (std::size_t i = 0; i < raw.size(); ++i) img.rgb[i] = static_cast<float>(raw[i]) / 255.0f;
  return img;
}

inline std::vector<std::uint8_t> encode_ppm(const Image& img) {
  const std::string header = "P6\n" + std::to_string(img.width) + " " + std::to_string(img.height) + "\n255\n";
  std::vector<std::uint8_t> out(header.begin(), header.end());
  out.reserve(header.size() + img.rgb.size());
  for (float v : img.rgb) {
    const float c = std::clamp(v, 0.0f, 1.0f);
    out.push_back(static_cast<std::uint8_t>(std::lround(c * 255.0f)));
  }
  return out;
}

/// Writes a binary PPM; values are clamped to [0, 1] and rounded to 8 bits.
inline void write_ppm(const Image& img, const std::filesystem::path& path) {
  write_file_synced(path, encode_ppm(img));
}

/// Luma (Rec. 601 weights), one float per pixel.
inline std::vector<float> grayscale(const Image& img) {
  std::vector<float> g(img.pixels());
  for (std::size_t i = 0; i < g.size(); ++i) {
    g[i] = 0.299f * img.rgb[3 * i] + 0.587f * img.rgb[3 * i + 1] + 0.114f * img.rgb[3 * i + 2];
  }
  return g;
}

/// Sobel gradient magnitude with clamped borders.
inline std::vector<float> sobel_magnitude(const std::vector<float>& g, std::size_t w, std::size_t h) {
  auto px = [&](long x, long y) {
    x = std::clamp(x, 0L, static_cast<long>(w) - 1);
    y = std::clamp(y, 0L, static_cast<long>(h) - 1);
    return g[static_cast<std::size_t>(y) * w + static_cast<std::size_t>(x)];
  };
  std::vector<float> out(w * h);
  for (long y = 0; y < static_cast<long>(h); ++y) {
    for (long x = 0; x < static_cast<long>(w); ++x) {
      const float gx = -px(x - 1, y - 1) - 2 * px(x - 1, y) - px(x - 1, y + 1) + px(x + 1, y - 1) +
                       2 * px(x + 1, y) + px(x + 1, y + 1);
      const float gy = -px(x - 1, y - 1) - 2 * px(x, y - 1) - px(x + 1, y - 1) + px(x - 1, y + 1) +
                       2 * px(x, y + 1) + px(x + 1, y + 1);
      out[static_cast<std::size_t>(y) * w + static_cast<std::size_t>(x)] = std::sqrt(gx * gx + gy * gy);
    }
  }
  return out;
}

/// Separable [1 4 6 4 1]/16 blur with clamped borders.
inline std::vector<float> blur5(const std::vector<float>& g, std::size_t w, std::size_t h) {
  static constexpr float k[5] = {1.0f / 16, 4.0f / 16, 6.0f / 16, 4.0f / 16, 1.0f / 16};
  std::vector<float> tmp(w * h), out(w * h);
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      float acc = 0.0f;
      for (int d = -2; d <= 2; ++d) {
        const long xx = std::clamp(static_cast<long>(x) + d, 0L, static_cast<long>(w) - 1);
        acc += k[d + 2] * g[y * w + static_cast<std::size_t>(xx)];
      }
      tmp[y * w + x] = acc;
    }
  }
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      float acc = 0.0f;
      for (int d = -2; d <= 2; ++d) {
        const long yy = std::clamp(static_cast<long>(y) + d, 0L, static_cast<long>(h) - 1);
        acc += k[d + 2] * tmp[static_cast<std::size_t>(yy) * w + x];
      }
      out[y * w + x] = acc;
    }
  }
  return out;
}

/// Average-pools a single-channel map by an integer factor.
inline std::vector<float> pool_map(const std::vector<float>& g, std::size_t w, std::size_t h, std::size_t factor) {
  const std::size_t ow = w / factor, oh = h / factor;
  std::vector<float> out(ow * oh, 0.0f);
  const float inv = 1.0f / static_cast<float>(factor * factor);
  for (std::size_t y = 0; y < oh; ++y)
    for (std::size_t x = 0; x < ow; ++x) {
      float acc = 0.0f;
      for (std::size_t dy = 0; dy < factor; ++dy)
        for (std::size_t dx = 0; dx < factor; ++dx) acc += g[(y * factor + dy) * w + x * factor + dx];
      out[y * ow + x] = acc * inv;
    }
  return out;
}

/// Box downscale by an integer factor; dimensions must divide evenly.
inline Image downscale_box(const Image& img, std::size_t factor) {
  if (factor == 0 || img.width % factor || img.height % factor) {
    throw InvalidArgument("downscale_box: " + std::to_string(img.width) + "x" + std::to_string(img.height) +
                          " is not divisible by " + std::to_string(factor));
  }
  Image out(img.width / factor, img.height / factor);
  const float inv = 1.0f / static_cast<float>(factor * factor);
  for (std::size_t y = 0; y < out.height; ++y)
    for (std::size_t x = 0; x < out.width; ++x)
      for (std::size_t c = 0; c < 3; ++c) {
        float acc = 0.0f;
        for (std::size_t dy = 0; dy < factor; ++dy)
          for (std::size_t dx = 0; dx < factor; ++dx) acc += img.at(x * factor + dx, y * factor + dy, c);
        out.at(x, y, c) = acc * inv;
      }
  return out;
}

/// Nearest-neighbour downscale by an integer factor (top-left sample).
inline Image downscale_nearest(const Image& img, std::size_t factor) {
  Image out(img.width / factor, img.height / factor);
  for (std::size_t y = 0; y < out.height; ++y)
    for (std::size_t x = 0; x < out.width; ++x)
      for (std::size_t c = 0; c < 3; ++c) out.at(x, y, c) = img.at(x * factor, y * factor, c);
  return out;
}

/// Bilinear resampling of an interleaved multi-channel grid, half-pixel centres, clamped edges.
inline std::vector<float> resize_bilinear(const std::vector<float>& src, std::size_t w, std::size_t h,
                                          std::size_t channels, std::size_t out_w, std::size_t out_h) {
  std::vector<float> out(out_w * out_h * channels);
  const double sx = static_cast<double>(w) / static_cast<double>(out_w);
  const double sy = static_cast<double>(h) / static_cast<double>(out_h);
  for (std::size_t y = 0; y < out_h; ++y) {
    const double fy = std::clamp((static_cast<double>(y) + 0.5) * sy - 0.5, 0.0, static_cast<double>(h - 1));
    const auto y0 = static_cast<std::size_t>(fy);
    const std::size_t y1 = std::min(y0 + 1, h - 1);
    const float ty = static_cast<float>(fy - static_cast<double>(y0));
    for (std::size_t x = 0; x < out_w; ++x) {
      const double fx = std::clamp((static_cast<double>(x) + 0.5) * sx - 0.5, 0.0, static_cast<double>(w - 1));
      const auto x0 = static_cast<std::size_t>(fx);
      const std::size_t x1 = std::min(x0 + 1, w - 1);
      const float tx = static_cast<float>(fx - static_cast<double>(x0));
      for (std::size_t c = 0; c < channels; ++c) {
        const float a = src[(y0 * w + x0) * channels + c], b = src[(y0 * w + x1) * channels + c];
        const float d = src[(y1 * w + x0) * channels + c], e = src[(y1 * w + x1) * channels + c];
        const float top = a + (b - a) * tx;
        const float bottom = d + (e - d) * tx;
        out[(y * out_w + x) * channels + c] = top + (bottom - top) * ty;
      }
    }
  }
  return out;
}

inline Image resize_image(const Image& img, std::size_t out_w, std::size_t out_h) {
  if (img.width == out_w && img.height == out_h) return img;
  Image out;
  out.width = out_w;
  out.height = out_h;
  out.rgb = resize_bilinear(img.rgb, img.width, img.height, 3, out_w, out_h);
  return out;
}

inline Image crop(const Image& img, std::size_t x0, std::size_t y0, std::size_t w, std::size_t h) {
  if (x0 + w > img.width || y0 + h > img.height) throw InvalidArgument("crop: window exceeds image bounds");
  Image out(w, h);
  for (std::size_t y = 0; y < h; ++y)
    std::copy_n(img.rgb.begin() + static_cast<std::ptrdiff_t>(((y0 + y) * img.width + x0) * 3), w * 3,
                out.rgb.begin() + static_cast<std::ptrdiff_t>(y * w * 3));
  return out;
}

struct CropWindow {
  std::size_t x = 0;
  std::size_t y = 0;
  std::size_t size = 0;
};

/// Seeded uniform positions of `n_crops` square windows of side `crop_px`.
inline std::vector<CropWindow> crop_windows(std::size_t width, std::size_t height, std::size_t crop_px,
                                            std::size_t n_crops, std::uint64_t seed) {
  if (crop_px == 0 || crop_px > std::min(width, height)) {
    throw InvalidArgument("extract_crops: crop of " + std::to_string(crop_px) + " px does not fit a " +
                          std::to_string(width) + "x" + std::to_string(height) + " image");
  }
  Rng rng(seed);
  std::vector<CropWindow> out(n_crops);
  for (auto& w : out) {
    w.x = static_cast<std::size_t>(rng.index(width - crop_px + 1));
    w.y = static_cast<std::size_t>(rng.index(height - crop_px + 1));
    w.size = crop_px;
  }
  return out;
}

/// Square crops at seeded positions; each crop is used downstream as its
/// own style image.
inline std::vector<Image> extract_crops(const Image& img, std::size_t crop_px, std::size_t n_crops,
                                        std::uint64_t seed) {
  std::vector<Image> out;
  out.reserve(n_crops);
  for (const auto& w : crop_windows(img.width, img.height, crop_px, n_crops, seed)) {
    out.push_back(crop(img, w.x, w.y, w.size, w.size));
  }
  return out;
}

}  // namespace stylebank
