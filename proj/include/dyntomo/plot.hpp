// File-based figure emission: a small SVG line chart for per-frame metric
// curves and an 8-bit grayscale PNG writer for image panels (frames and
// x-t slices). Both produce byte-identical output for identical inputs, so
// report directories diff clean across reruns.
#pragma once

#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <string>
#include <string_view>
#include <vector>

#include <zlib.h>

#include "dyntomo/common.hpp"

namespace dyntomo {

inline void write_file(const std::string& path, std::string_view bytes) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot open '" + path + "' for writing");
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw IoError("short write to '" + path + "'");
}

// ---------------------------------------------------------------------------
// SVG line charts

struct PlotSeries {
  std::string label;
  std::vector<double> x;
  std::vector<double> y;
};

struct LinePlot {
  std::string title;
  std::string x_label;
  std::string y_label;
  std::vector<PlotSeries> series;
  int width = 720;
  int height = 440;
};

namespace detail {

inline std::string fmt(double v, const char* spec = "%.2f") {
  char buf[64];
  std::snprintf(buf, sizeof(buf), spec, v);
  return buf;
}

inline std::string xml_escape(const std::string& s) {
  std::string out;
  out.reserve(s.size());
  for (char c : s) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

}  // namespace detail

inline std::string svg_line_plot(const LinePlot& p) {
  if (p.series.empty())
    throw ValidationError("svg_line_plot: need at least one series");
  if (p.width < 200 || p.height < 150)
    throw ValidationError("svg_line_plot: canvas is too small");
  double xlo = std::numeric_limits<double>::infinity(), xhi = -xlo;
  double ylo = xlo, yhi = -xlo;
  for (const auto& s : p.series) {
    if (s.x.empty() || s.x.size() != s.y.size())
      throw ValidationError("svg_line_plot: series '" + s.label +
                            "' has mismatched or empty samples");
    for (std::size_t i = 0; i < s.x.size(); ++i) {
      if (!std::isfinite(s.x[i]) || !std::isfinite(s.y[i]))
        throw ValidationError("svg_line_plot: series '" + s.label +
                              "' contains non-finite samples");
      xlo = std::min(xlo, s.x[i]);
      xhi = std::max(xhi, s.x[i]);
      ylo = std::min(ylo, s.y[i]);
      yhi = std::max(yhi, s.y[i]);
    }
  }
  // pad degenerate ranges so constant series still render mid-plot
  if (xhi - xlo < 1e-12) { xlo -= 0.5; xhi += 0.5; }
  if (yhi - ylo < 1e-12) { ylo -= 0.5; yhi += 0.5; }
  const double ypad = 0.05 * (yhi - ylo);
  ylo -= ypad;
  yhi += ypad;

  const double ml = 62, mr = 14, mt = 30, mb = 46;
  const double pw = p.width - ml - mr, ph = p.height - mt - mb;
  auto px = [&](double v) { return ml + pw * (v - xlo) / (xhi - xlo); };
  auto py = [&](double v) { return mt + ph * (yhi - v) / (yhi - ylo); };

  static const char* kPalette[] = {"#1f77b4", "#d62728", "#2ca02c",
                                   "#9467bd", "#ff7f0e", "#8c564b"};
  constexpr int kPaletteSize = 6;

  std::string svg;
  svg += "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" +
         std::to_string(p.width) + "\" height=\"" + std::to_string(p.height) +
         "\" viewBox=\"0 0 " + std::to_string(p.width) + " " +
         std::to_string(p.height) + "\">\n";
  svg += "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  svg += "<text x=\"" + detail::fmt(ml + pw / 2) +
         "\" y=\"18\" font-family=\"sans-serif\" font-size=\"14\" "
         "text-anchor=\"middle\">" +
         detail::xml_escape(p.title) + "</text>\n";

  // gridlines and tick labels, five per axis
  for (int i = 0; i < 5; ++i) {
    const double xv = xlo + i * (xhi - xlo) / 4;
    const double yv = ylo + i * (yhi - ylo) / 4;
    svg += "<line x1=\"" + detail::fmt(px(xv)) + "\" y1=\"" +
           detail::fmt(mt) + "\" x2=\"" + detail::fmt(px(xv)) + "\" y2=\"" +
           detail::fmt(mt + ph) + "\" stroke=\"#dddddd\"/>\n";
    svg += "<line x1=\"" + detail::fmt(ml) + "\" y1=\"" +
           detail::fmt(py(yv)) + "\" x2=\"" + detail::fmt(ml + pw) +
           "\" y2=\"" + detail::fmt(py(yv)) + "\" stroke=\"#dddddd\"/>\n";
    svg += "<text x=\"" + detail::fmt(px(xv)) + "\" y=\"" +
           detail::fmt(mt + ph + 16) +
           "\" font-family=\"sans-serif\" font-size=\"11\" "
           "text-anchor=\"middle\">" +
           detail::fmt(xv, "%.4g") + "</text>\n";
    svg += "<text x=\"" + detail::fmt(ml - 6) + "\" y=\"" +
           detail::fmt(py(yv) + 4) +
           "\" font-family=\"sans-serif\" font-size=\"11\" "
           "text-anchor=\"end\">" +
           detail::fmt(yv, "%.4g") + "</text>\n";
  }
  svg += "<rect x=\"" + detail::fmt(ml) + "\" y=\"" + detail::fmt(mt) +
         "\" width=\"" + detail::fmt(pw) + "\" height=\"" + detail::fmt(ph) +
         "\" fill=\"none\" stroke=\"#333333\"/>\n";
  svg += "<text x=\"" + detail::fmt(ml + pw / 2) + "\" y=\"" +
         detail::fmt(p.height - 10.0) +
         "\" font-family=\"sans-serif\" font-size=\"12\" "
         "text-anchor=\"middle\">" +
         detail::xml_escape(p.x_label) + "</text>\n";
  svg += "<text x=\"16\" y=\"" + detail::fmt(mt + ph / 2) +
         "\" font-family=\"sans-serif\" font-size=\"12\" "
         "text-anchor=\"middle\" transform=\"rotate(-90 16 " +
         detail::fmt(mt + ph / 2) + ")\">" +
         detail::xml_escape(p.y_label) + "</text>\n";

  for (std::size_t k = 0; k < p.series.size(); ++k) {
    const auto& s = p.series[k];
    const char* color = kPalette[k % kPaletteSize];
    std::string pts;
    for (std::size_t i = 0; i < s.x.size(); ++i) {
      if (i) pts += ' ';
      pts += detail::fmt(px(s.x[i])) + "," + detail::fmt(py(s.y[i]));
    }
    svg += "<polyline fill=\"none\" stroke=\"" + std::string(color) +
           "\" stroke-width=\"1.5\" points=\"" + pts + "\"/>\n";
    // legend entry, stacked in the top-right corner of the plot area
    const double ly = mt + 14 + 16 * static_cast<double>(k);
    svg += "<line x1=\"" + detail::fmt(ml + pw - 108) + "\" y1=\"" +
           detail::fmt(ly) + "\" x2=\"" + detail::fmt(ml + pw - 88) +
           "\" y2=\"" + detail::fmt(ly) + "\" stroke=\"" +
           std::string(color) + "\" stroke-width=\"1.5\"/>\n";
    svg += "<text x=\"" + detail::fmt(ml + pw - 82) + "\" y=\"" +
           detail::fmt(ly + 4) +
           "\" font-family=\"sans-serif\" font-size=\"11\">" +
           detail::xml_escape(s.label) + "</text>\n";
  }
  svg += "</svg>\n";
  return svg;
}

// ---------------------------------------------------------------------------
// Grayscale PNG

namespace detail {

inline void push_be32(std::string& s, std::uint32_t v) {
  s += static_cast<char>((v >> 24) & 0xff);
  s += static_cast<char>((v >> 16) & 0xff);
  s += static_cast<char>((v >> 8) & 0xff);
  s += static_cast<char>(v & 0xff);
}

inline void png_chunk(std::string& out, const char* type,
                      const std::string& data) {
  push_be32(out, static_cast<std::uint32_t>(data.size()));
  std::string block(type, 4);
  block += data;
  out += block;
  const auto crc =
      crc32(0, reinterpret_cast<const Bytef*>(block.data()),
            static_cast<uInt>(block.size()));
  push_be32(out, static_cast<std::uint32_t>(crc));
}

}  // namespace detail

// 8-bit grayscale PNG of the matrix, mapping [lo, hi] to [0, 255] with
// clamping. Row 0 of the matrix is the top scanline.
template <typename T>
std::string png_encode_gray(const Mat<T>& img, double lo, double hi) {
  if (img.rows() < 1 || img.cols() < 1)
    throw ValidationError("png_encode_gray: empty image");
  if (!img.allFinite())
    throw ValidationError("png_encode_gray: image has non-finite pixels");
  if (!(lo < hi))
    throw ValidationError("png_encode_gray: need lo < hi");
  const int h = static_cast<int>(img.rows());
  const int w = static_cast<int>(img.cols());

  std::string raw;
  raw.reserve(static_cast<std::size_t>(h) * (w + 1));
  for (int r = 0; r < h; ++r) {
    raw += '\0';  // per-scanline filter byte: none
    for (int c = 0; c < w; ++c) {
      const double v = (static_cast<double>(img(r, c)) - lo) / (hi - lo);
      const double q = std::clamp(v, 0.0, 1.0) * 255.0;
      raw += static_cast<char>(static_cast<int>(std::lround(q)));
    }
  }

  uLongf bound = compressBound(static_cast<uLong>(raw.size()));
  std::string deflated(bound, '\0');
  if (compress2(reinterpret_cast<Bytef*>(deflated.data()), &bound,
                reinterpret_cast<const Bytef*>(raw.data()),
                static_cast<uLong>(raw.size()), 9) != Z_OK)
    throw IoError("png_encode_gray: deflate failed");
  deflated.resize(bound);

  std::string ihdr;
  detail::push_be32(ihdr, static_cast<std::uint32_t>(w));
  detail::push_be32(ihdr, static_cast<std::uint32_t>(h));
  ihdr += '\x08';  // bit depth
  ihdr += '\0';    // color type: grayscale
  ihdr += '\0';    // compression
  ihdr += '\0';    // filter
  ihdr += '\0';    // interlace

  std::string png("\x89PNG\r\n\x1a\n", 8);
  detail::png_chunk(png, "IHDR", ihdr);
  detail::png_chunk(png, "IDAT", deflated);
  detail::png_chunk(png, "IEND", "");
  return png;
}

// Auto-ranged variant; a constant image maps to mid-gray.
template <typename T>
std::string png_encode_gray(const Mat<T>& img) {
  if (img.rows() < 1 || img.cols() < 1)
    throw ValidationError("png_encode_gray: empty image");
  if (!img.allFinite())
    throw ValidationError("png_encode_gray: image has non-finite pixels");
  const double lo = static_cast<double>(img.minCoeff());
  const double hi = static_cast<double>(img.maxCoeff());
  if (hi - lo < 1e-300) return png_encode_gray(img, lo - 0.5, lo + 0.5);
  return png_encode_gray(img, lo, hi);
}

// ---------------------------------------------------------------------------
// x-t slices

// Fixed image row traced through time: output row t holds frame t's row, so
// motion reads top to bottom. Default row is the middle of the image.
template <typename T>
Mat<T> xt_slice(const DynamicObject<T>& obj, int row = -1) {
  validate_object(obj, "xt_slice");
  const int J = obj.side();
  const int P = obj.num_frames();
  if (row < 0) row = J / 2;
  if (row >= J)
    throw ValidationError("xt_slice: row " + std::to_string(row) +
                          " outside a side-" + std::to_string(J) + " image");
  Mat<T> out(P, J);
  for (int t = 0; t < P; ++t) out.row(t) = obj.frames[t].row(row);
  return out;
}

}  // namespace dyntomo
