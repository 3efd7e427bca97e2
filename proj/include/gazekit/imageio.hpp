#pragma once

#include <algorithm>
#include <fstream>
#include <string>

#include "gazekit/backbone.hpp"
#include "gazekit/common.hpp"
#include "gazekit/conv.hpp"
#include "gazekit/metrics.hpp"

namespace gazekit {

// Binary PPM (P6, 8-bit) in and out; values map linearly to [0,1].

template <class S>
void write_ppm(const std::string& path, const Image<S>& img) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot write image: " + path);
  const Index h = img.height(), w = img.width();
  f << "P6\n" << w << " " << h << "\n255\n";
  std::vector<unsigned char> buf(static_cast<size_t>(h) * w * 3);
  size_t k = 0;
  for (Index i = 0; i < h; ++i)
    for (Index j = 0; j < w; ++j)
      for (int c = 0; c < 3; ++c) {
        double v = std::clamp(static_cast<double>(img.ch[c](i, j)), 0.0, 1.0);
        buf[k++] = static_cast<unsigned char>(std::lround(v * 255.0));
      }
  f.write(reinterpret_cast<const char*>(buf.data()),
          static_cast<std::streamsize>(buf.size()));
  if (!f) throw IoError("write failed: " + path);
}

template <class S>
Image<S> read_ppm(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open image: " + path);
  std::string magic;
  f >> magic;
  if (magic != "P6") throw ParseError("unsupported image format (want P6 ppm): " + path);
  auto next_int = [&]() {
    // skip whitespace and '#' comment lines
    int ch = f.get();
    while (ch == '#' || std::isspace(ch)) {
      if (ch == '#')
        while (ch != '\n' && ch != EOF) ch = f.get();
      ch = f.get();
    }
    long v = 0;
    bool any = false;
    while (std::isdigit(ch)) {
      v = v * 10 + (ch - '0');
      any = true;
      ch = f.get();
    }
    if (!any) throw ParseError("malformed ppm header: " + path);
    return v;
  };
  long w = next_int(), h = next_int(), maxv = next_int();
  if (maxv != 255) throw ParseError("ppm maxval must be 255: " + path);
  std::vector<unsigned char> buf(static_cast<size_t>(h) * w * 3);
  f.read(reinterpret_cast<char*>(buf.data()),
         static_cast<std::streamsize>(buf.size()));
  if (!f) throw ParseError("truncated ppm payload: " + path);
  Image<S> img = Image<S>::zeros(h, w);
  size_t k = 0;
  for (long i = 0; i < h; ++i)
    for (long j = 0; j < w; ++j)
      for (int c = 0; c < 3; ++c)
        img.ch[c](i, j) = static_cast<S>(buf[k++] / 255.0);
  return img;
}

// Blends the predicted heatmap over the image (red channel boost) and draws a
// crosshair on the argmax pixel.
template <class S>
Image<S> render_overlay(const Image<S>& img, const Mat<S>& heatmap) {
  const Index h = img.height(), w = img.width();
  Mat<S> up = nn::bilinear_resize(heatmap, h, w);
  Image<S> out = img;
  for (Index i = 0; i < h; ++i)
    for (Index j = 0; j < w; ++j) {
      S a = S(0.6) * up(i, j);
      out.ch[0](i, j) = (S(1) - a) * out.ch[0](i, j) + a;
      out.ch[1](i, j) *= (S(1) - a);
      out.ch[2](i, j) *= (S(1) - a);
    }
  auto [r, c] = heatmap_argmax(heatmap);
  const Index ci = (r * h) / heatmap.rows() + h / heatmap.rows() / 2;
  const Index cj = (c * w) / heatmap.cols() + w / heatmap.cols() / 2;
  const Index arm = std::max<Index>(3, h / 40);
  for (Index d = -arm; d <= arm; ++d) {
    Index y = std::clamp<Index>(ci + d, 0, h - 1);
    Index x = std::clamp<Index>(cj + d, 0, w - 1);
    for (int c3 = 0; c3 < 3; ++c3) {
      out.ch[c3](y, std::clamp<Index>(cj, 0, w - 1)) = c3 == 1 ? S(1) : S(0);
      out.ch[c3](std::clamp<Index>(ci, 0, h - 1), x) = c3 == 1 ? S(1) : S(0);
    }
  }
  return out;
}

}  // namespace gazekit
