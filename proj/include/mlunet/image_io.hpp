#pragma once

// Netpbm (PGM/PPM) reading and writing plus the two resamplers used on
// images (bilinear) and masks (nearest).

#include <cctype>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace mlunet {

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// 8-bit interleaved image, channels 1 or 3.
struct Image {
  std::size_t width = 0, height = 0, channels = 1;
  std::vector<std::uint8_t> data;

  std::uint8_t at(std::size_t y, std::size_t x, std::size_t c = 0) const {
    return data[(y * width + x) * channels + c];
  }
  std::uint8_t& at(std::size_t y, std::size_t x, std::size_t c = 0) { return data[(y * width + x) * channels + c]; }
};

namespace detail {

inline void skip_ws_and_comments(std::istream& in) {
  for (;;) {
    int c = in.peek();
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

inline std::size_t read_header_int(std::istream& in, const std::string& path) {
  skip_ws_and_comments(in);
  long long v = -1;
  if (!(in >> v) || v <= 0) throw IoError("malformed netpbm header: " + path);
  return static_cast<std::size_t>(v);
}

}  // namespace detail

/// Reads P2/P3 (ASCII) and P5/P6 (binary) files. 16-bit samples are scaled to 8 bits.
inline Image read_pnm(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open image: " + path);
  std::string magic;
  in >> magic;
  if (magic != "P2" && magic != "P3" && magic != "P5" && magic != "P6")
    throw IoError("unsupported image format (expected PGM/PPM): " + path);
  Image img;
  img.channels = (magic == "P3" || magic == "P6") ? 3 : 1;
  img.width = detail::read_header_int(in, path);
  img.height = detail::read_header_int(in, path);
  const std::size_t maxval = detail::read_header_int(in, path);
  if (maxval > 65535) throw IoError("invalid maxval in " + path);
  const std::size_t count = img.width * img.height * img.channels;
  img.data.resize(count);
  auto to8 = [maxval](std::size_t v) {
    return static_cast<std::uint8_t>(maxval == 255 ? v : (v * 255 + maxval / 2) / maxval);
  };
  if (magic == "P2" || magic == "P3") {
    for (std::size_t i = 0; i < count; ++i) {
      detail::skip_ws_and_comments(in);
      long long v;
      if (!(in >> v) || v < 0 || static_cast<std::size_t>(v) > maxval) throw IoError("truncated image data: " + path);
      img.data[i] = to8(static_cast<std::size_t>(v));
    }
  } else {
    in.get();  // single whitespace after maxval
    const std::size_t bps = maxval > 255 ? 2 : 1;
    std::vector<unsigned char> raw(count * bps);
    in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
    if (static_cast<std::size_t>(in.gcount()) != raw.size()) throw IoError("truncated image data: " + path);
    for (std::size_t i = 0; i < count; ++i) {
      const std::size_t v = bps == 2 ? (std::size_t(raw[2 * i]) << 8) | raw[2 * i + 1] : raw[i];
      img.data[i] = to8(v);
    }
  }
  return img;
}

/// Writes P5 (1 channel) or P6 (3 channels).
inline void write_pnm(const std::string& path, const Image& img) {
  if (img.channels != 1 && img.channels != 3) throw IoError("write_pnm: channels must be 1 or 3");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write image: " + path);
  out << (img.channels == 1 ? "P5" : "P6") << '\n' << img.width << ' ' << img.height << "\n255\n";
  out.write(reinterpret_cast<const char*>(img.data.data()), static_cast<std::streamsize>(img.data.size()));
  if (!out) throw IoError("failed writing image: " + path);
}

/// Bilinear resampling of a planar float image (C×H×W), half-pixel centers.
inline std::vector<double> resize_bilinear(const std::vector<double>& src, std::size_t C, std::size_t H,
                                           std::size_t W, std::size_t Ho, std::size_t Wo) {
  if (H == Ho && W == Wo) return src;
  std::vector<double> out(C * Ho * Wo);
  auto coord = [](std::size_t o, std::size_t in, std::size_t outn, std::size_t& i0, std::size_t& i1, double& f) {
    double s = (static_cast<double>(o) + 0.5) * static_cast<double>(in) / static_cast<double>(outn) - 0.5;
    if (s < 0) s = 0;
    i0 = std::min(static_cast<std::size_t>(s), in - 1);
    i1 = std::min(i0 + 1, in - 1);
    f = s - static_cast<double>(i0);
  };
  for (std::size_t y = 0; y < Ho; ++y) {
    std::size_t y0, y1;
    double fy;
    coord(y, H, Ho, y0, y1, fy);
    for (std::size_t x = 0; x < Wo; ++x) {
      std::size_t x0, x1;
      double fx;
      coord(x, W, Wo, x0, x1, fx);
      for (std::size_t c = 0; c < C; ++c) {
        const double* p = src.data() + c * H * W;
        const double top = p[y0 * W + x0] * (1 - fx) + p[y0 * W + x1] * fx;
        const double bot = p[y1 * W + x0] * (1 - fx) + p[y1 * W + x1] * fx;
        out[(c * Ho + y) * Wo + x] = top * (1 - fy) + bot * fy;
      }
    }
  }
  return out;
}

/// Nearest resampling, src index = floor(dst · in / out). On a 2× downscale this
/// takes the top-left pixel of every 2×2 cell.
template <typename V>
std::vector<V> resize_nearest(const std::vector<V>& src, std::size_t H, std::size_t W, std::size_t Ho,
                              std::size_t Wo) {
  if (H == Ho && W == Wo) return src;
  std::vector<V> out(Ho * Wo);
  for (std::size_t y = 0; y < Ho; ++y) {
    const std::size_t sy = y * H / Ho;
    for (std::size_t x = 0; x < Wo; ++x) out[y * Wo + x] = src[sy * W + x * W / Wo];
  }
  return out;
}

}  // namespace mlunet
