#pragma once

// Reconstruction report: ground truth vs codec output as CSV tables and PNG
// plots (time-series overlay, per-scale STFT magnitude / angle heatmaps).

#include <png.h>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <string>
#include <vector>

#include "neurotok/codec.hpp"
#include "neurotok/error.hpp"
#include "neurotok/spectral.hpp"

namespace neurotok {

struct Rgb {
  std::uint8_t r = 0, g = 0, b = 0;
  bool operator==(const Rgb&) const = default;
};

class Image {
 public:
  Image(std::size_t width, std::size_t height, Rgb fill = {255, 255, 255})
      : w_(width), h_(height), px_(width * height, fill) {}

  std::size_t width() const noexcept { return w_; }
  std::size_t height() const noexcept { return h_; }
  Rgb& at(std::size_t x, std::size_t y) { return px_[y * w_ + x]; }
  const Rgb& at(std::size_t x, std::size_t y) const { return px_[y * w_ + x]; }

  void set(long x, long y, Rgb c) {
    if (x >= 0 && y >= 0 && static_cast<std::size_t>(x) < w_ && static_cast<std::size_t>(y) < h_)
      at(static_cast<std::size_t>(x), static_cast<std::size_t>(y)) = c;
  }

  void line(long x0, long y0, long x1, long y1, Rgb c) {
    const long dx = std::abs(x1 - x0), dy = -std::abs(y1 - y0);
    const long sx = x0 < x1 ? 1 : -1, sy = y0 < y1 ? 1 : -1;
    long err = dx + dy;
    for (;;) {
      set(x0, y0, c);
      if (x0 == x1 && y0 == y1) break;
      const long e2 = 2 * err;
      if (e2 >= dy) err += dy, x0 += sx;
      if (e2 <= dx) err += dx, y0 += sy;
    }
  }

 private:
  std::size_t w_, h_;
  std::vector<Rgb> px_;
};

inline void write_png(const Image& img, const std::filesystem::path& path) {
  std::FILE* fp = std::fopen(path.string().c_str(), "wb");
  if (!fp) throw IoError("cannot open " + path.string() + " for writing");
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info || setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    std::fclose(fp);
    throw IoError("PNG encoding failed: " + path.string());
  }
  png_init_io(png, fp);
  png_set_IHDR(png, info, static_cast<png_uint_32>(img.width()), static_cast<png_uint_32>(img.height()), 8,
               PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  std::vector<png_byte> row(3 * img.width());
  for (std::size_t y = 0; y < img.height(); ++y) {
    for (std::size_t x = 0; x < img.width(); ++x) {
      const auto& p = img.at(x, y);
      row[3 * x] = p.r, row[3 * x + 1] = p.g, row[3 * x + 2] = p.b;
    }
    png_write_row(png, row.data());
  }
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
  if (std::fclose(fp) != 0) throw IoError("write failed: " + path.string());
}

// Piecewise-linear approximation of the viridis colormap, t in [0, 1].
inline Rgb colormap(double t) {
  static constexpr std::array<std::array<double, 3>, 5> stops{
      {{68, 1, 84}, {59, 82, 139}, {33, 145, 140}, {94, 201, 98}, {253, 231, 37}}};
  if (!std::isfinite(t)) t = 0.0;
  t = std::clamp(t, 0.0, 1.0) * (stops.size() - 1);
  const auto i = std::min<std::size_t>(static_cast<std::size_t>(t), stops.size() - 2);
  const double f = t - static_cast<double>(i);
  auto mix = [&](int c) { return static_cast<std::uint8_t>(std::lround(stops[i][c] + f * (stops[i + 1][c] - stops[i][c]))); };
  return {mix(0), mix(1), mix(2)};
}

namespace detail {

inline void write_matrix_csv(const Matrix<double>& m, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  char buf[32];
  for (std::size_t r = 0; r < m.rows(); ++r) {
    for (std::size_t c = 0; c < m.cols(); ++c) {
      std::snprintf(buf, sizeof buf, "%.9g", m(r, c));
      out << (c ? "," : "") << buf;
    }
    out << '\n';
  }
  if (!out) throw IoError("write failed: " + path.string());
}

// Low frequencies at the bottom, one `cell`-pixel block per entry.
inline void paint_heatmap(Image& img, std::size_t x0, std::size_t y0, const Matrix<double>& m, double lo, double hi,
                          std::size_t cell) {
  const double span = hi > lo ? hi - lo : 1.0;
  for (std::size_t r = 0; r < m.rows(); ++r)
    for (std::size_t c = 0; c < m.cols(); ++c) {
      const Rgb col = colormap((m(r, c) - lo) / span);
      for (std::size_t dy = 0; dy < cell; ++dy)
        for (std::size_t dx = 0; dx < cell; ++dx)
          img.set(static_cast<long>(x0 + c * cell + dx), static_cast<long>(y0 + (m.rows() - 1 - r) * cell + dy), col);
    }
}

}  // namespace detail

// Ground truth in blue, reconstruction in red, shared vertical scale.
inline Image plot_overlay(std::span<const float> gt, std::span<const float> pd, std::size_t width = 1200,
                          std::size_t height = 400) {
  Image img(width, height);
  const Rgb axis{200, 200, 200};
  img.line(0, static_cast<long>(height / 2), static_cast<long>(width - 1), static_cast<long>(height / 2), axis);
  double peak = 0.0;
  for (float v : gt) peak = std::max(peak, std::abs(static_cast<double>(v)));
  for (float v : pd) peak = std::max(peak, std::abs(static_cast<double>(v)));
  if (!(peak > 0.0) || !std::isfinite(peak)) peak = 1.0;
  auto trace = [&](std::span<const float> y, Rgb col) {
    if (y.size() < 2) return;
    const double margin = 10.0, half = (static_cast<double>(height) - 2 * margin) / 2;
    auto px = [&](std::size_t i) {
      return static_cast<long>(std::lround(static_cast<double>(i) * (width - 1) / static_cast<double>(y.size() - 1)));
    };
    auto py = [&](std::size_t i) {
      return static_cast<long>(std::lround(margin + half - half * static_cast<double>(y[i]) / peak));
    };
    for (std::size_t i = 1; i < y.size(); ++i) img.line(px(i - 1), py(i - 1), px(i), py(i), col);
  };
  trace(gt, {31, 119, 180});
  trace(pd, {214, 39, 40});
  return img;
}

struct ReportFiles {
  std::filesystem::path timeseries_csv, timeseries_png;
  std::vector<std::filesystem::path> spectra_csv, spectra_png;
};

// Writes timeseries.csv (index,gt,pd), timeseries.png and, per STFT scale
// w, stft_<w>_{mag,ang}_{gt,pd}.csv plus stft_<w>.png laid out as
//   [gt mag | pd mag]
//   [gt ang | pd ang]
inline ReportFiles write_report(std::span<const float> gt, std::span<const float> pd, const StftConfig& stft_cfg,
                                const std::filesystem::path& out_dir) {
  if (gt.size() != pd.size()) throw ShapeError("report: ground truth and prediction lengths differ");
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec) throw IoError("cannot create " + out_dir.string() + ": " + ec.message());

  ReportFiles files;
  files.timeseries_csv = out_dir / "timeseries.csv";
  {
    std::ofstream out(files.timeseries_csv, std::ios::trunc);
    if (!out) throw IoError("cannot open " + files.timeseries_csv.string() + " for writing");
    out << "index,gt,pd\n";
    char buf[64];
    for (std::size_t i = 0; i < gt.size(); ++i) {
      std::snprintf(buf, sizeof buf, "%zu,%.9g,%.9g", i, static_cast<double>(gt[i]), static_cast<double>(pd[i]));
      out << buf << '\n';
    }
    if (!out) throw IoError("write failed: " + files.timeseries_csv.string());
  }
  files.timeseries_png = out_dir / "timeseries.png";
  write_png(plot_overlay(gt, pd), files.timeseries_png);

  const auto sg = multi_scale_spectra(gt, stft_cfg);
  const auto sp = multi_scale_spectra(pd, stft_cfg);
  for (std::size_t s = 0; s < sg.size(); ++s) {
    const std::string tag = "stft_" + std::to_string(sg[s].scale.window_length);
    const auto mg = sg[s].magnitude(), mp = sp[s].magnitude(), ag = sg[s].angle(), ap = sp[s].angle();
    const std::array<std::pair<const Matrix<double>*, const char*>, 4> mats{
        {{&mg, "_mag_gt"}, {&mp, "_mag_pd"}, {&ag, "_ang_gt"}, {&ap, "_ang_pd"}}};
    for (const auto& [m, suffix] : mats) {
      files.spectra_csv.push_back(out_dir / (tag + suffix + ".csv"));
      detail::write_matrix_csv(*m, files.spectra_csv.back());
    }
    // Magnitude panels use log1p scaling on a shared range.
    auto log_mag = [](Matrix<double> m) {
      for (auto& v : m.data()) v = std::log1p(v);
      return m;
    };
    const auto lg = log_mag(mg), lp = log_mag(mp);
    double mag_hi = 0.0;
    for (double v : lg.data()) mag_hi = std::max(mag_hi, v);
    for (double v : lp.data()) mag_hi = std::max(mag_hi, v);
    const std::size_t cell = std::max<std::size_t>(1, 256 / std::max(mg.rows(), mg.cols()));
    const std::size_t pw = mg.cols() * cell, ph = mg.rows() * cell, gap = 4;
    Image img(2 * pw + gap, 2 * ph + gap);
    detail::paint_heatmap(img, 0, 0, lg, 0.0, mag_hi, cell);
    detail::paint_heatmap(img, pw + gap, 0, lp, 0.0, mag_hi, cell);
    detail::paint_heatmap(img, 0, ph + gap, ag, -std::numbers::pi, std::numbers::pi, cell);
    detail::paint_heatmap(img, pw + gap, ph + gap, ap, -std::numbers::pi, std::numbers::pi, cell);
    files.spectra_png.push_back(out_dir / (tag + ".png"));
    write_png(img, files.spectra_png.back());
  }
  return files;
}

// Runs the codec on one channel and reports against the input.
inline ReportFiles reconstruct_report(std::span<const float> x, const CodecModel<float>& model,
                                      const std::filesystem::path& out_dir) {
  std::vector<float> padded(x.begin(), x.end());
  pad_to_multiple(padded, model.config().downsample_factor);
  auto y = reconstruct<float>(model, padded);
  y.resize(x.size());
  return write_report(x, y, model.config().stft, out_dir);
}

}  // namespace neurotok
