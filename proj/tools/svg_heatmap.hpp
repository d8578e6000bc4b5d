#pragma once

// Small deterministic SVG writers for the command-line tool: top-down label
// maps, flow arrow maps, and the 3x3 matching-cost panels. Output uses only
// integer coordinates and 8-bit color channels, so identical inputs yield
// byte-identical files.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <string>
#include <vector>

#include "alocc/errors.hpp"
#include "alocc/geometry.hpp"
#include "alocc/tensor.hpp"

namespace alocc::svg {

inline constexpr int kCell = 16;  // pixels per grid cell
inline constexpr int kGap = 6;    // padding between panels

inline std::string rgb(int r, int g, int b) {
  char buf[8];
  std::snprintf(buf, sizeof(buf), "#%02x%02x%02x", std::clamp(r, 0, 255),
                std::clamp(g, 0, 255), std::clamp(b, 0, 255));
  return buf;
}

// Fixed palette cycled by class id; 255 (empty) renders near-white.
inline std::string class_color(std::uint8_t cls) {
  if (cls == 255) return "#f4f4f4";
  static const std::array<const char*, 10> palette = {
      "#4878cf", "#d65f5f", "#6acc65", "#b47cc7", "#c4ad66",
      "#77bedb", "#ee854a", "#8c613c", "#dc7ec0", "#797979"};
  return palette[cls % palette.size()];
}

class Canvas {
 public:
  Canvas(int width, int height) : width_(width), height_(height) {}

  void rect(int x, int y, int w, int h, const std::string& fill) {
    body_ += "<rect x=\"" + std::to_string(x) + "\" y=\"" + std::to_string(y) +
             "\" width=\"" + std::to_string(w) + "\" height=\"" +
             std::to_string(h) + "\" fill=\"" + fill + "\"/>\n";
  }

  void line(int x1, int y1, int x2, int y2, const std::string& stroke) {
    body_ += "<line x1=\"" + std::to_string(x1) + "\" y1=\"" +
             std::to_string(y1) + "\" x2=\"" + std::to_string(x2) +
             "\" y2=\"" + std::to_string(y2) + "\" stroke=\"" + stroke +
             "\" stroke-width=\"2\"/>\n";
  }

  void save(const std::string& path) const {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw DataError("svg: cannot write '" + path + "'");
    out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width_
        << "\" height=\"" << height_ << "\">\n"
        << body_ << "</svg>\n";
  }

 private:
  int width_, height_;
  std::string body_;
};

// Top-down class map: each ground-plane cell shows the highest occupied
// voxel's class. Rows index the grid's first axis (drawn top to bottom).
inline void write_label_bev(const std::string& path,
                            const geo::VoxelGridSpec& grid,
                            const std::vector<std::uint8_t>& labels) {
  const std::size_t H = grid.dims[0], W = grid.dims[1], Z = grid.dims[2];
  Canvas canvas(static_cast<int>(W) * kCell, static_cast<int>(H) * kCell);
  for (std::size_t h = 0; h < H; ++h)
    for (std::size_t w = 0; w < W; ++w) {
      std::uint8_t top = 255;
      for (std::size_t z = Z; z-- > 0;) {
        const std::uint8_t l = labels[grid.flatten(h, w, z)];
        if (l != 255) {
          top = l;
          break;
        }
      }
      canvas.rect(static_cast<int>(w) * kCell, static_cast<int>(h) * kCell,
                  kCell, kCell, class_color(top));
    }
  canvas.save(path);
}

// Flow arrows over a magnitude heat map. `flow` is per-voxel interleaved
// (x, y); each ground-plane cell shows its column's largest displacement.
inline void write_flow_bev(const std::string& path,
                           const geo::VoxelGridSpec& grid,
                           const std::vector<double>& flow) {
  const std::size_t H = grid.dims[0], W = grid.dims[1], Z = grid.dims[2];
  std::vector<double> vx(H * W, 0.0), vy(H * W, 0.0);
  double peak = 0.0;
  for (std::size_t h = 0; h < H; ++h)
    for (std::size_t w = 0; w < W; ++w) {
      double best = 0.0, bx = 0.0, by = 0.0;
      for (std::size_t z = 0; z < Z; ++z) {
        const std::size_t v = grid.flatten(h, w, z);
        const double x = flow[2 * v], y = flow[2 * v + 1];
        const double mag = x * x + y * y;
        if (mag > best) {
          best = mag;
          bx = x;
          by = y;
        }
      }
      vx[h * W + w] = bx;
      vy[h * W + w] = by;
      peak = std::max(peak, std::sqrt(best));
    }
  if (peak <= 0.0) peak = 1.0;

  Canvas canvas(static_cast<int>(W) * kCell, static_cast<int>(H) * kCell);
  for (std::size_t h = 0; h < H; ++h)
    for (std::size_t w = 0; w < W; ++w) {
      const double x = vx[h * W + w], y = vy[h * W + w];
      const double mag = std::sqrt(x * x + y * y) / peak;
      const int px = static_cast<int>(w) * kCell;
      const int py = static_cast<int>(h) * kCell;
      const int heat = static_cast<int>(std::lround(mag * 200.0));
      canvas.rect(px, py, kCell, kCell, rgb(255, 255 - heat, 255 - heat));
      if (mag > 0.0) {
        // The first grid axis grows downward in the image, so the flow x
        // component maps to the vertical screen direction.
        const int cx = px + kCell / 2, cy = py + kCell / 2;
        const int dx = static_cast<int>(std::lround(y / peak * (kCell / 2)));
        const int dy = static_cast<int>(std::lround(x / peak * (kCell / 2)));
        canvas.line(cx, cy, cx + dx, cy + dy, "#202020");
      }
    }
  canvas.save(path);
}

// Nine side-by-side panels of the matching costs, one per (dh, dw) offset in
// row-major order. Costs lie in [-1, 1]: negative values shade blue, positive
// values red.
inline void write_cost_panels(const std::string& path, std::size_t bev_h,
                              std::size_t bev_w, const ng::Tensor& cost) {
  detail::require(cost.shape().size() == 2 && cost.shape()[1] == 9 &&
                      cost.shape()[0] == bev_h * bev_w,
                  "svg: cost tensor must be [bev cells, 9]");
  const int panel_w = static_cast<int>(bev_w) * kCell;
  const int panel_h = static_cast<int>(bev_h) * kCell;
  Canvas canvas(3 * panel_w + 2 * kGap, 3 * panel_h + 2 * kGap);
  for (std::size_t k = 0; k < 9; ++k) {
    const int ox = static_cast<int>(k % 3) * (panel_w + kGap);
    const int oy = static_cast<int>(k / 3) * (panel_h + kGap);
    for (std::size_t h = 0; h < bev_h; ++h)
      for (std::size_t w = 0; w < bev_w; ++w) {
        const double c =
            std::clamp(cost.at((h * bev_w + w) * 9 + k), -1.0, 1.0);
        const int heat = static_cast<int>(std::lround(std::abs(c) * 200.0));
        const std::string fill = c >= 0.0
                                     ? rgb(255, 255 - heat, 255 - heat)
                                     : rgb(255 - heat, 255 - heat, 255);
        canvas.rect(ox + static_cast<int>(w) * kCell,
                    oy + static_cast<int>(h) * kCell, kCell, kCell, fill);
      }
  }
  canvas.save(path);
}

}  // namespace alocc::svg
