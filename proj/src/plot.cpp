#include "ookd/plot.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

#include "ookd/png_io.hpp"

namespace ookd::plot {

namespace {

struct Rgb {
  uint8_t r, g, b;
};

constexpr Rgb kOrange{235, 140, 60};
constexpr Rgb kBlue{70, 120, 220};
constexpr Rgb kAxis{40, 40, 40};

void blend(Image& img, int y, int x, Rgb c, double alpha) {
  if (y < 0 || y >= img.height || x < 0 || x >= img.width) return;
  img.at(y, x, 0) = static_cast<uint8_t>(img.at(y, x, 0) * (1 - alpha) + c.r * alpha);
  img.at(y, x, 1) = static_cast<uint8_t>(img.at(y, x, 1) * (1 - alpha) + c.g * alpha);
  img.at(y, x, 2) = static_cast<uint8_t>(img.at(y, x, 2) * (1 - alpha) + c.b * alpha);
}

void fill_rect(Image& img, int y0, int x0, int y1, int x1, Rgb c, double alpha) {
  for (int y = y0; y < y1; ++y) {
    for (int x = x0; x < x1; ++x) blend(img, y, x, c, alpha);
  }
}

// 3x5 glyphs for "0123456789.-", row-major bit masks.
const uint8_t* glyph(char ch) {
  static const uint8_t digits[12][5] = {
      {0b111, 0b101, 0b101, 0b101, 0b111},  // 0
      {0b010, 0b110, 0b010, 0b010, 0b111},  // 1
      {0b111, 0b001, 0b111, 0b100, 0b111},  // 2
      {0b111, 0b001, 0b111, 0b001, 0b111},  // 3
      {0b101, 0b101, 0b111, 0b001, 0b001},  // 4
      {0b111, 0b100, 0b111, 0b001, 0b111},  // 5
      {0b111, 0b100, 0b111, 0b101, 0b111},  // 6
      {0b111, 0b001, 0b010, 0b010, 0b010},  // 7
      {0b111, 0b101, 0b111, 0b101, 0b111},  // 8
      {0b111, 0b101, 0b111, 0b001, 0b111},  // 9
      {0b000, 0b000, 0b000, 0b000, 0b010},  // .
      {0b000, 0b000, 0b111, 0b000, 0b000},  // -
  };
  if (ch >= '0' && ch <= '9') return digits[ch - '0'];
  if (ch == '.') return digits[10];
  if (ch == '-') return digits[11];
  return nullptr;
}

void draw_text(Image& img, int y, int x, const std::string& text, Rgb c, int scale = 2) {
  int cx = x;
  for (char ch : text) {
    const uint8_t* g = glyph(ch);
    if (g) {
      for (int ry = 0; ry < 5; ++ry) {
        for (int rx = 0; rx < 3; ++rx) {
          if (g[ry] & (0b100 >> rx)) {
            fill_rect(img, y + ry * scale, cx + rx * scale, y + (ry + 1) * scale,
                      cx + (rx + 1) * scale, c, 1.0);
          }
        }
      }
    }
    cx += 4 * scale;
  }
}

std::string format_mean(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.3f", v);
  return buf;
}

}  // namespace

void render_histogram_overlay(const evalkit::SimilarityHistogram& baseline,
                              const evalkit::SimilarityHistogram& distilled,
                              const std::string& png_path) {
  const int W = 720, H = 480;
  const int ml = 50, mr = 20, mt = 40, mb = 50;
  Image img(H, W);
  std::fill(img.pixels.begin(), img.pixels.end(), uint8_t{255});

  int plot_w = W - ml - mr, plot_h = H - mt - mb;
  int nbins = static_cast<int>(std::max(baseline.bins.size(), distilled.bins.size()));
  if (nbins == 0) nbins = 1;

  // Normalize both histograms to fractions of their own totals.
  auto frac = [](const evalkit::SimilarityHistogram& h, int i) {
    if (i >= static_cast<int>(h.bins.size()) || h.count == 0) return 0.0;
    return static_cast<double>(h.bins[static_cast<size_t>(i)]) /
           static_cast<double>(h.count);
  };
  double peak = 1e-9;
  for (int i = 0; i < nbins; ++i) peak = std::max({peak, frac(baseline, i), frac(distilled, i)});

  for (int i = 0; i < nbins; ++i) {
    int x0 = ml + i * plot_w / nbins;
    int x1 = ml + (i + 1) * plot_w / nbins - 1;
    int hb = static_cast<int>(frac(baseline, i) / peak * plot_h);
    int hd = static_cast<int>(frac(distilled, i) / peak * plot_h);
    fill_rect(img, mt + plot_h - hb, x0, mt + plot_h, x1, kOrange, 0.6);
    fill_rect(img, mt + plot_h - hd, x0, mt + plot_h, x1, kBlue, 0.6);
  }

  // Axes.
  fill_rect(img, mt + plot_h, ml, mt + plot_h + 2, W - mr, kAxis, 1.0);
  fill_rect(img, mt, ml - 2, mt + plot_h + 2, ml, kAxis, 1.0);
  for (double tick : {-1.0, -0.5, 0.0, 0.5, 1.0}) {
    int x = ml + static_cast<int>((tick + 1.0) / 2.0 * plot_w);
    fill_rect(img, mt + plot_h + 2, x, mt + plot_h + 8, x + 2, kAxis, 1.0);
    std::string label = tick == 0.0 ? "0" : format_mean(tick).substr(0, tick < 0 ? 4 : 3);
    draw_text(img, mt + plot_h + 12, x - 10, label, kAxis);
  }

  // Mean markers and legend with the numeric means.
  auto mean_marker = [&](double mean, Rgb c) {
    int x = ml + static_cast<int>((mean + 1.0) / 2.0 * plot_w);
    for (int y = mt; y < mt + plot_h; y += 6) fill_rect(img, y, x, y + 3, x + 2, c, 1.0);
  };
  mean_marker(baseline.mean, kOrange);
  mean_marker(distilled.mean, kBlue);

  fill_rect(img, 12, ml, 24, ml + 12, kOrange, 1.0);
  draw_text(img, 13, ml + 18, format_mean(baseline.mean), kAxis);
  fill_rect(img, 12, ml + 140, 24, ml + 152, kBlue, 1.0);
  draw_text(img, 13, ml + 158, format_mean(distilled.mean), kAxis);

  write_png(png_path, img);
}

}  // namespace ookd::plot
