#pragma once
// Deterministic CSV tables, minimal SVG plots (lines, scatter, histograms,
// image grids) and PGM export. No timestamps or environment-dependent bytes
// ever reach an output file.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "ccgn/tensor.hpp"

namespace ccgn::report {

inline std::string fmt(double v) {
  char buf[48];
  std::snprintf(buf, sizeof(buf), "%.10g", v);
  return buf;
}

struct CsvTable {
  std::vector<std::string> columns;
  std::vector<std::vector<double>> rows;

  void write(const std::string& path) const {
    std::ofstream out(path);
    if (!out) throw FormatError(path + ": cannot open for writing");
    for (std::size_t c = 0; c < columns.size(); ++c) out << (c ? "," : "") << columns[c];
    out << "\n";
    for (const auto& row : rows) {
      for (std::size_t c = 0; c < row.size(); ++c) out << (c ? "," : "") << fmt(row[c]);
      out << "\n";
    }
  }

  static CsvTable read(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw FormatError(path + ": cannot open");
    CsvTable t;
    std::string line;
    if (!std::getline(in, line)) throw LengthError(path + ": empty csv");
    std::stringstream hs(line);
    std::string cell;
    while (std::getline(hs, cell, ',')) t.columns.push_back(cell);
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      std::stringstream ss(line);
      std::vector<double> row;
      while (std::getline(ss, cell, ',')) row.push_back(std::stod(cell));
      t.rows.push_back(std::move(row));
    }
    return t;
  }
};

// ---------------------------------------------------------------------------
// SVG plotting

struct Series {
  std::string label;
  std::vector<double> x, y;
  std::string color = "#1f77b4";
  bool scatter = false;
  double width = 1.5;  // stroke width or marker radius
};

struct Bars {
  std::vector<double> left, height;
  double bin_width = 1.0;
  std::string color = "#9467bd";
};

struct Plot {
  std::string title, xlabel, ylabel;
  std::vector<Series> series;
  std::vector<Bars> bars;
  int width = 760, height = 500;

  void write_svg(const std::string& path) const;
};

namespace detail {

inline double nice_step(double span, int target) {
  if (span <= 0) return 1;
  const double raw = span / target;
  const double mag = std::pow(10.0, std::floor(std::log10(raw)));
  for (double m : {1.0, 2.0, 5.0, 10.0})
    if (raw <= m * mag) return m * mag;
  return 10 * mag;
}

}  // namespace detail

inline void Plot::write_svg(const std::string& path) const {
  double xmin = 1e300, xmax = -1e300, ymin = 1e300, ymax = -1e300;
  auto grow = [&](double x, double y) {
    xmin = std::min(xmin, x); xmax = std::max(xmax, x);
    ymin = std::min(ymin, y); ymax = std::max(ymax, y);
  };
  for (const Series& s : series)
    for (std::size_t i = 0; i < s.x.size(); ++i) grow(s.x[i], s.y[i]);
  for (const Bars& b : bars)
    for (std::size_t i = 0; i < b.left.size(); ++i) {
      grow(b.left[i], 0);
      grow(b.left[i] + b.bin_width, b.height[i]);
    }
  if (xmin > xmax) { xmin = 0; xmax = 1; }
  if (ymin > ymax) { ymin = 0; ymax = 1; }
  if (xmax == xmin) { xmax += 0.5; xmin -= 0.5; }
  if (ymax == ymin) { ymax += 0.5; ymin -= 0.5; }
  const double xpad = 0.03 * (xmax - xmin), ypad = 0.06 * (ymax - ymin);
  xmin -= xpad; xmax += xpad; ymin -= ypad; ymax += ypad;

  const double ml = 62, mr = 16, mt = title.empty() ? 14 : 34, mb = 44;
  const double pw = width - ml - mr, ph = height - mt - mb;
  auto px = [&](double x) { return ml + (x - xmin) / (xmax - xmin) * pw; };
  auto py = [&](double y) { return mt + (ymax - y) / (ymax - ymin) * ph; };

  std::ostringstream s;
  s << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\"" << height
    << "\" viewBox=\"0 0 " << width << " " << height << "\">\n";
  s << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  if (!title.empty())
    s << "<text x=\"" << width / 2 << "\" y=\"20\" text-anchor=\"middle\" font-family=\"sans-serif\""
      << " font-size=\"14\">" << title << "</text>\n";

  // axes and ticks
  s << "<rect x=\"" << ml << "\" y=\"" << mt << "\" width=\"" << pw << "\" height=\"" << ph
    << "\" fill=\"none\" stroke=\"#444\" stroke-width=\"1\"/>\n";
  const double xs = detail::nice_step(xmax - xmin, 6), ys = detail::nice_step(ymax - ymin, 6);
  for (double t = std::ceil(xmin / xs) * xs; t <= xmax + 1e-12; t += xs) {
    s << "<line x1=\"" << fmt(px(t)) << "\" y1=\"" << mt + ph << "\" x2=\"" << fmt(px(t))
      << "\" y2=\"" << mt + ph + 5 << "\" stroke=\"#444\"/>\n";
    s << "<text x=\"" << fmt(px(t)) << "\" y=\"" << mt + ph + 18
      << "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"11\">" << fmt(t)
      << "</text>\n";
  }
  for (double t = std::ceil(ymin / ys) * ys; t <= ymax + 1e-12; t += ys) {
    s << "<line x1=\"" << ml - 5 << "\" y1=\"" << fmt(py(t)) << "\" x2=\"" << ml << "\" y2=\""
      << fmt(py(t)) << "\" stroke=\"#444\"/>\n";
    s << "<text x=\"" << ml - 8 << "\" y=\"" << fmt(py(t) + 4)
      << "\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"11\">" << fmt(t)
      << "</text>\n";
  }
  if (!xlabel.empty())
    s << "<text x=\"" << ml + pw / 2 << "\" y=\"" << height - 8
      << "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"12\">" << xlabel
      << "</text>\n";
  if (!ylabel.empty())
    s << "<text x=\"16\" y=\"" << mt + ph / 2
      << "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"12\" transform=\"rotate(-90 16 "
      << mt + ph / 2 << ")\">" << ylabel << "</text>\n";

  for (const Bars& b : bars)
    for (std::size_t i = 0; i < b.left.size(); ++i) {
      const double x0 = px(b.left[i]), x1 = px(b.left[i] + b.bin_width);
      const double y0 = py(0), y1 = py(b.height[i]);
      s << "<rect x=\"" << fmt(x0) << "\" y=\"" << fmt(std::min(y0, y1)) << "\" width=\""
        << fmt(std::max(1.0, x1 - x0 - 0.5)) << "\" height=\"" << fmt(std::abs(y0 - y1))
        << "\" fill=\"" << b.color << "\" fill-opacity=\"0.7\"/>\n";
    }

  for (const Series& sr : series) {
    if (sr.scatter) {
      for (std::size_t i = 0; i < sr.x.size(); ++i)
        s << "<circle cx=\"" << fmt(px(sr.x[i])) << "\" cy=\"" << fmt(py(sr.y[i])) << "\" r=\""
          << fmt(sr.width) << "\" fill=\"" << sr.color << "\" fill-opacity=\"0.75\"/>\n";
    } else if (!sr.x.empty()) {
      s << "<polyline fill=\"none\" stroke=\"" << sr.color << "\" stroke-width=\"" << fmt(sr.width)
        << "\" points=\"";
      for (std::size_t i = 0; i < sr.x.size(); ++i)
        s << fmt(px(sr.x[i])) << "," << fmt(py(sr.y[i])) << " ";
      s << "\"/>\n";
    }
  }

  // legend
  double ly = mt + 14;
  for (const Series& sr : series) {
    if (sr.label.empty()) continue;
    s << "<rect x=\"" << ml + pw - 150 << "\" y=\"" << ly - 9 << "\" width=\"18\" height=\"4\" fill=\""
      << sr.color << "\"/>\n";
    s << "<text x=\"" << ml + pw - 126 << "\" y=\"" << ly
      << "\" font-family=\"sans-serif\" font-size=\"11\">" << sr.label << "</text>\n";
    ly += 16;
  }

  s << "</svg>\n";
  std::ofstream out(path);
  if (!out) throw FormatError(path + ": cannot open for writing");
  out << s.str();
}

/// Equal-width histogram over [lo, hi] computed from the data range.
inline Bars make_histogram(const std::vector<double>& values, int nbins,
                           const std::string& color = "#9467bd") {
  Bars b;
  b.color = color;
  if (values.empty() || nbins < 1) return b;
  double lo = values[0], hi = values[0];
  for (double v : values) { lo = std::min(lo, v); hi = std::max(hi, v); }
  if (hi == lo) { hi += 0.5; lo -= 0.5; }
  b.bin_width = (hi - lo) / nbins;
  b.left.resize(nbins);
  b.height.assign(nbins, 0.0);
  for (int i = 0; i < nbins; ++i) b.left[i] = lo + i * b.bin_width;
  for (double v : values) {
    int bin = static_cast<int>((v - lo) / b.bin_width);
    bin = std::min(std::max(bin, 0), nbins - 1);
    b.height[bin] += 1;
  }
  return b;
}

// ---------------------------------------------------------------------------
// Images

/// Binary PGM (P5), pixels mapped from [-1,1] to bytes.
inline void write_pgm(const std::string& path, const Tensor& image) {
  if (image.shape.size() != 3 || image.shape[2] != 1)
    throw ShapeError("write_pgm: image must be [H,W,1], got " + shape_str(image.shape));
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError(path + ": cannot open for writing");
  out << "P5\n" << image.shape[1] << " " << image.shape[0] << "\n255\n";
  for (float v : image.data) {
    const float scaled = (v + 1.0f) * 127.5f;
    const int q = static_cast<int>(scaled + 0.5f);
    const unsigned char b = static_cast<unsigned char>(q < 0 ? 0 : (q > 255 ? 255 : q));
    out.write(reinterpret_cast<const char*>(&b), 1);
  }
}

/// Image grid as one SVG, one row per sequence, leftmost cell first.
inline void write_image_grid_svg(const std::string& path,
                                 const std::vector<std::vector<Tensor>>& grid_rows,
                                 int cell_px = 48, const std::string& title = "") {
  std::size_t cols = 0;
  for (const auto& row : grid_rows) cols = std::max(cols, row.size());
  const int gap = 4;
  const int top = title.empty() ? gap : 24;
  const int W = static_cast<int>(cols) * (cell_px + gap) + gap;
  const int H = static_cast<int>(grid_rows.size()) * (cell_px + gap) + gap + top;
  std::ostringstream s;
  s << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H
    << "\" viewBox=\"0 0 " << W << " " << H << "\">\n";
  s << "<rect width=\"100%\" height=\"100%\" fill=\"#dddddd\"/>\n";
  if (!title.empty())
    s << "<text x=\"" << gap << "\" y=\"16\" font-family=\"sans-serif\" font-size=\"13\">" << title
      << "</text>\n";
  for (std::size_t r = 0; r < grid_rows.size(); ++r) {
    for (std::size_t c = 0; c < grid_rows[r].size(); ++c) {
      const Tensor& img = grid_rows[r][c];
      const int h = img.shape[0], w = img.shape[1];
      const double sx = static_cast<double>(cell_px) / w, sy = static_cast<double>(cell_px) / h;
      const double ox = gap + c * (cell_px + gap), oy = top + r * (cell_px + gap);
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
          const float v = img(y, x, 0);
          const int q = std::min(255, std::max(0, static_cast<int>((v + 1.0f) * 127.5f + 0.5f)));
          char hex[8];
          std::snprintf(hex, sizeof(hex), "%02x", q);
          s << "<rect x=\"" << fmt(ox + x * sx) << "\" y=\"" << fmt(oy + y * sy) << "\" width=\""
            << fmt(sx + 0.1) << "\" height=\"" << fmt(sy + 0.1) << "\" fill=\"#" << hex << hex << hex
            << "\"/>\n";
        }
    }
  }
  s << "</svg>\n";
  std::ofstream out(path);
  if (!out) throw FormatError(path + ": cannot open for writing");
  out << s.str();
}

// ---------------------------------------------------------------------------
// Hashing

inline std::uint64_t fnv1a(const void* data, std::size_t n) {
  const unsigned char* p = static_cast<const unsigned char*>(data);
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ull;
  }
  return h;
}

inline std::uint64_t fnv1a_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError(path + ": cannot open for hashing");
  std::uint64_t h = 0xcbf29ce484222325ull;
  char buf[65536];
  while (in) {
    in.read(buf, sizeof(buf));
    const std::streamsize got = in.gcount();
    for (std::streamsize i = 0; i < got; ++i) {
      h ^= static_cast<unsigned char>(buf[i]);
      h *= 0x100000001b3ull;
    }
  }
  return h;
}

}  // namespace ccgn::report
