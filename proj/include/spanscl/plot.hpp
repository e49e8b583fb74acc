#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <png.h>

#include "spanscl/analysis.hpp"
#include "spanscl/io.hpp"

namespace spanscl {

/// 8-bit RGB raster.
class Raster {
 public:
  Raster(std::size_t width, std::size_t height, std::array<std::uint8_t, 3> fill = {255, 255, 255})
      : width_(width), height_(height), pixels_(width * height * 3) {
    for (std::size_t i = 0; i < width * height; ++i) std::copy(fill.begin(), fill.end(), pixels_.begin() + 3 * i);
  }

  std::size_t width() const { return width_; }
  std::size_t height() const { return height_; }
  const std::vector<std::uint8_t>& pixels() const { return pixels_; }

  void set(long x, long y, std::array<std::uint8_t, 3> c) {
    if (x < 0 || y < 0 || x >= static_cast<long>(width_) || y >= static_cast<long>(height_)) return;
    std::copy(c.begin(), c.end(), pixels_.begin() + 3 * (static_cast<std::size_t>(y) * width_ + static_cast<std::size_t>(x)));
  }

  void disc(long cx, long cy, long r, std::array<std::uint8_t, 3> c) {
    for (long dy = -r; dy <= r; ++dy) {
      for (long dx = -r; dx <= r; ++dx) {
        if (dx * dx + dy * dy <= r * r) set(cx + dx, cy + dy, c);
      }
    }
  }

  void frame(long x0, long y0, long x1, long y1, std::array<std::uint8_t, 3> c) {
    for (long x = x0; x <= x1; ++x) {
      set(x, y0, c);
      set(x, y1, c);
    }
    for (long y = y0; y <= y1; ++y) {
      set(x0, y, c);
      set(x1, y, c);
    }
  }

  std::string encode_png() const {
    png_image image{};
    image.version = PNG_IMAGE_VERSION;
    image.width = static_cast<png_uint_32>(width_);
    image.height = static_cast<png_uint_32>(height_);
    image.format = PNG_FORMAT_RGB;
    png_alloc_size_t size = 0;
    if (!png_image_write_to_memory(&image, nullptr, &size, 0, pixels_.data(), 0, nullptr)) {
      throw IoError(std::string("png encoding failed: ") + image.message);
    }
    std::string out(size, '\0');
    if (!png_image_write_to_memory(&image, out.data(), &size, 0, pixels_.data(), 0, nullptr)) {
      throw IoError(std::string("png encoding failed: ") + image.message);
    }
    out.resize(size);
    return out;
  }

 private:
  std::size_t width_, height_;
  std::vector<std::uint8_t> pixels_;
};

/// One scatter panel: a projection of one (model, lambda, kind) dump.
struct PlotPanel {
  std::string title;
  Projection projection;
  std::vector<PointMeta> meta;
};

inline const std::vector<std::array<std::uint8_t, 3>>& label_palette() {
  static const std::vector<std::array<std::uint8_t, 3>> palette{
      {31, 119, 180}, {214, 39, 40},  {44, 160, 44},  {255, 127, 14}, {148, 103, 189},
      {140, 86, 75},  {227, 119, 194}, {127, 127, 127}, {188, 189, 34}, {23, 190, 207}};
  return palette;
}

struct PlotFiles {
  std::filesystem::path image;
  std::filesystem::path coordinates;
  std::filesystem::path silhouettes;
};

/// Renders panels side by side (four per row) into a PNG, colored by label.
/// Sidecars next to the image: `<stem>.csv` with every coordinate and its
/// metadata, `<stem>.silhouette.csv` with the per-panel label silhouette.
inline PlotFiles emit_plot(const std::vector<PlotPanel>& panels, const std::filesystem::path& out_path) {
  if (panels.empty()) throw std::invalid_argument("emit_plot: no projections");
  std::map<std::string, std::size_t> colors;
  for (const auto& panel : panels) {
    if (static_cast<std::size_t>(panel.projection.coords.rows()) != panel.meta.size()) {
      throw std::invalid_argument("emit_plot: panel '" + panel.title + "' has mismatched metadata");
    }
    for (const auto& m : panel.meta) colors.emplace(m.label, 0);
  }
  std::size_t next = 0;
  for (auto& [label, index] : colors) index = next++;

  constexpr long kPanel = 360, kGap = 16, kPad = 12;
  const long columns = static_cast<long>(std::min<std::size_t>(panels.size(), 4));
  const long rows = static_cast<long>((panels.size() + 3) / 4);
  Raster raster(static_cast<std::size_t>(columns * (kPanel + kGap) + kGap), static_cast<std::size_t>(rows * (kPanel + kGap) + kGap));

  std::string coords_csv = "panel,title,index,x,y,label,sentence_id,start,end,model,lambda,method\n";
  std::string silhouette_csv = "panel,title,method,points,silhouette\n";
  for (std::size_t n = 0; n < panels.size(); ++n) {
    const auto& panel = panels[n];
    const auto& c = panel.projection.coords;
    const long x0 = kGap + static_cast<long>(n % 4) * (kPanel + kGap);
    const long y0 = kGap + static_cast<long>(n / 4) * (kPanel + kGap);
    raster.frame(x0, y0, x0 + kPanel - 1, y0 + kPanel - 1, {90, 90, 90});
    if (c.rows() > 0) {
      const double min_x = c.col(0).minCoeff(), max_x = c.col(0).maxCoeff();
      const double min_y = c.col(1).minCoeff(), max_y = c.col(1).maxCoeff();
      const double span = std::max({max_x - min_x, max_y - min_y, 1e-12});
      const double usable = static_cast<double>(kPanel - 2 * kPad);
      for (Eigen::Index i = 0; i < c.rows(); ++i) {
        const long px = x0 + kPad + static_cast<long>(std::lround((c(i, 0) - min_x) / span * usable));
        const long py = y0 + kPanel - kPad - static_cast<long>(std::lround((c(i, 1) - min_y) / span * usable));
        const auto& palette = label_palette();
        raster.disc(px, py, 3, palette[colors[panel.meta[static_cast<std::size_t>(i)].label] % palette.size()]);
      }
    }
    std::vector<std::string> labels;
    for (std::size_t i = 0; i < panel.meta.size(); ++i) {
      const auto& m = panel.meta[i];
      labels.push_back(m.label);
      const auto row = static_cast<Eigen::Index>(i);
      coords_csv += std::to_string(n) + "," + panel.title + "," + std::to_string(i) + "," + format_fixed(c(row, 0), 9) +
                    "," + format_fixed(c(row, 1), 9) + "," + m.label + "," + m.sentence_id + "," + std::to_string(m.start) +
                    "," + std::to_string(m.end) + "," + m.model + "," + format_lambda(m.lambda_span) + "," +
                    to_string(panel.projection.method) + "\n";
    }
    silhouette_csv += std::to_string(n) + "," + panel.title + "," + to_string(panel.projection.method) + "," +
                      std::to_string(panel.meta.size()) + "," + format_fixed(silhouette(c, labels), 6) + "\n";
  }

  PlotFiles files;
  files.image = out_path;
  auto sibling = [&](const std::string& suffix) {
    auto p = out_path;
    return p.replace_filename(out_path.stem().string() + suffix);
  };
  files.coordinates = sibling(".csv");
  files.silhouettes = sibling(".silhouette.csv");
  write_file_atomic(files.image, raster.encode_png());
  write_file_atomic(files.coordinates, coords_csv);
  write_file_atomic(files.silhouettes, silhouette_csv);
  return files;
}

}  // namespace spanscl
