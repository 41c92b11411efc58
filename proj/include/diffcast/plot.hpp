#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "diffcast/core.hpp"
#include "diffcast/tensor.hpp"

namespace diffcast::plot {

struct Rgb {
  uint8_t r = 0, g = 0, b = 0;
  bool operator==(const Rgb&) const = default;
};

// Sequential colormap for reflectance in [0,1].
Rgb sequential_color(real v);
// Diverging colormap for signed residuals in [-1,1]; 0 maps to the neutral color.
Rgb diverging_color(real v);
Rgb diverging_neutral();

class Image {
 public:
  Image(int64_t width, int64_t height, Rgb fill = {0, 0, 0});
  int64_t width() const { return w_; }
  int64_t height() const { return h_; }
  void set(int64_t x, int64_t y, Rgb c);
  Rgb get(int64_t x, int64_t y) const;
  const std::vector<uint8_t>& pixels() const { return px_; }

 private:
  int64_t w_, h_;
  std::vector<uint8_t> px_;  // RGB8 rows
};

// Deterministic PNG bytes (fixed zlib level, filter 0 scanlines).
void write_png(const std::filesystem::path& path, const Image& img);

// Forecast panel: rows {input+truth, mu, residual (diverging), y_hat},
// columns lead times; colorbars documenting both maps in the bottom margin.
void render_forecast_grid(const std::filesystem::path& out_png, const Tensor& x_frames,
                          const Tensor& y_frames, const Prediction& pred, int64_t cell_scale = 2);

}  // namespace diffcast::plot
