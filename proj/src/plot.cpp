#include "diffcast/plot.hpp"

#include <zlib.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <stdexcept>

namespace diffcast::plot {

namespace {

struct MapStop {
  real v;
  Rgb c;
};

Rgb lerp_stops(const MapStop* stops, size_t n, real v) {
  if (v <= stops[0].v) return stops[0].c;
  if (v >= stops[n - 1].v) return stops[n - 1].c;
  for (size_t i = 1; i < n; ++i) {
    if (v <= stops[i].v) {
      const real f = (v - stops[i - 1].v) / (stops[i].v - stops[i - 1].v);
      auto mix = [f](uint8_t a, uint8_t b) {
        return static_cast<uint8_t>(std::lround(static_cast<real>(a) + f * (static_cast<real>(b) - a)));
      };
      return {mix(stops[i - 1].c.r, stops[i].c.r), mix(stops[i - 1].c.g, stops[i].c.g),
              mix(stops[i - 1].c.b, stops[i].c.b)};
    }
  }
  return stops[n - 1].c;
}

// Dark-to-bright ramp in the spirit of radar reflectivity displays.
const MapStop kSequential[] = {
    {0.00, {8, 8, 24}},    {0.15, {24, 48, 120}}, {0.35, {16, 120, 144}}, {0.55, {48, 176, 64}},
    {0.75, {232, 216, 48}}, {0.90, {240, 120, 32}}, {1.00, {255, 255, 255}},
};

const MapStop kDiverging[] = {
    {-1.0, {32, 64, 192}}, {-0.25, {120, 160, 224}}, {0.0, {245, 245, 245}},
    {0.25, {232, 144, 120}}, {1.0, {192, 32, 32}},
};

}  // namespace

Rgb sequential_color(real v) { return lerp_stops(kSequential, std::size(kSequential), v); }
Rgb diverging_color(real v) { return lerp_stops(kDiverging, std::size(kDiverging), v); }
Rgb diverging_neutral() { return {245, 245, 245}; }

Image::Image(int64_t width, int64_t height, Rgb fill) : w_(width), h_(height) {
  px_.resize(static_cast<size_t>(w_ * h_ * 3));
  for (int64_t i = 0; i < w_ * h_; ++i) {
    px_[static_cast<size_t>(3 * i)] = fill.r;
    px_[static_cast<size_t>(3 * i + 1)] = fill.g;
    px_[static_cast<size_t>(3 * i + 2)] = fill.b;
  }
}

void Image::set(int64_t x, int64_t y, Rgb c) {
  if (x < 0 || y < 0 || x >= w_ || y >= h_) return;
  const size_t i = static_cast<size_t>(3 * (y * w_ + x));
  px_[i] = c.r;
  px_[i + 1] = c.g;
  px_[i + 2] = c.b;
}

Rgb Image::get(int64_t x, int64_t y) const {
  const size_t i = static_cast<size_t>(3 * (y * w_ + x));
  return {px_[i], px_[i + 1], px_[i + 2]};
}

namespace {

void put_u32_be(std::vector<uint8_t>& out, uint32_t v) {
  out.push_back(static_cast<uint8_t>(v >> 24));
  out.push_back(static_cast<uint8_t>(v >> 16));
  out.push_back(static_cast<uint8_t>(v >> 8));
  out.push_back(static_cast<uint8_t>(v));
}

void put_chunk(std::vector<uint8_t>& out, const char type[4], const std::vector<uint8_t>& payload) {
  put_u32_be(out, static_cast<uint32_t>(payload.size()));
  const size_t start = out.size();
  out.insert(out.end(), type, type + 4);
  out.insert(out.end(), payload.begin(), payload.end());
  const uint32_t crc =
      crc32(0, out.data() + start, static_cast<uInt>(out.size() - start));
  put_u32_be(out, crc);
}

}  // namespace

void write_png(const std::filesystem::path& path, const Image& img) {
  const int64_t w = img.width(), h = img.height();
  // Filter byte 0 per scanline.
  std::vector<uint8_t> raw(static_cast<size_t>(h * (1 + 3 * w)));
  for (int64_t y = 0; y < h; ++y) {
    raw[static_cast<size_t>(y * (1 + 3 * w))] = 0;
    std::memcpy(raw.data() + y * (1 + 3 * w) + 1, img.pixels().data() + y * 3 * w, static_cast<size_t>(3 * w));
  }
  uLongf comp_bound = compressBound(static_cast<uLong>(raw.size()));
  std::vector<uint8_t> comp(comp_bound);
  if (compress2(comp.data(), &comp_bound, raw.data(), static_cast<uLong>(raw.size()), 6) != Z_OK)
    throw std::runtime_error("png: zlib compression failed");
  comp.resize(comp_bound);

  std::vector<uint8_t> out = {0x89, 'P', 'N', 'G', '\r', '\n', 0x1a, '\n'};
  std::vector<uint8_t> ihdr;
  put_u32_be(ihdr, static_cast<uint32_t>(w));
  put_u32_be(ihdr, static_cast<uint32_t>(h));
  ihdr.push_back(8);   // bit depth
  ihdr.push_back(2);   // color type RGB
  ihdr.push_back(0);   // compression
  ihdr.push_back(0);   // filter
  ihdr.push_back(0);   // interlace
  put_chunk(out, "IHDR", ihdr);
  put_chunk(out, "IDAT", comp);
  put_chunk(out, "IEND", {});

  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os.write(reinterpret_cast<const char*>(out.data()), static_cast<std::streamsize>(out.size()));
  if (!os) throw std::runtime_error("png write failed " + path.string());
}

namespace {

// 3x5 glyphs for colorbar tick labels.
const char* glyph(char c) {
  switch (c) {
    case '0': return "111101101101111";
    case '1': return "010110010010111";
    case '+': return "000010111010000";
    case '-': return "000000111000000";
    case '.': return "000000000000010";
    default: return "000000000000000";
  }
}

void draw_text(Image& img, int64_t x, int64_t y, const std::string& text, Rgb color) {
  for (size_t ci = 0; ci < text.size(); ++ci) {
    const char* g = glyph(text[ci]);
    for (int64_t r = 0; r < 5; ++r)
      for (int64_t cc = 0; cc < 3; ++cc)
        if (g[r * 3 + cc] == '1') img.set(x + static_cast<int64_t>(ci) * 4 + cc, y + r, color);
  }
}

void blit_frame(Image& img, const Tensor& frame /*[H,W]*/, int64_t x0, int64_t y0, int64_t scale,
                bool diverging) {
  const int64_t H = frame.size(0), W = frame.size(1);
  for (int64_t i = 0; i < H; ++i)
    for (int64_t j = 0; j < W; ++j) {
      const real v = frame[i * W + j];
      const Rgb c = diverging ? diverging_color(v) : sequential_color(v);
      for (int64_t a = 0; a < scale; ++a)
        for (int64_t b = 0; b < scale; ++b) img.set(x0 + j * scale + b, y0 + i * scale + a, c);
    }
}

Tensor frame_of(const Tensor& lhwc, int64_t idx) {
  const int64_t H = lhwc.size(1), W = lhwc.size(2);
  return lhwc.slice_axis0(idx, 1).reshaped({H, W});
}

}  // namespace

void render_forecast_grid(const std::filesystem::path& out_png, const Tensor& x_frames, const Tensor& y_frames,
                          const Prediction& pred, int64_t cell_scale) {
  const int64_t L_in = x_frames.size(0), L_out = y_frames.size(0);
  const int64_t H = y_frames.size(1), W = y_frames.size(2);
  const int64_t cols = L_in + L_out;
  const int64_t pad = 2;
  const int64_t cw = W * cell_scale + pad, ch = H * cell_scale + pad;
  const int64_t margin = 28;
  Image img(cols * cw + pad, 4 * ch + pad + margin, {16, 16, 16});

  // Row 0: observed inputs then ground truth.
  for (int64_t i = 0; i < L_in; ++i)
    blit_frame(img, frame_of(x_frames, i), pad + i * cw, pad, cell_scale, false);
  for (int64_t i = 0; i < L_out; ++i)
    blit_frame(img, frame_of(y_frames, i), pad + (L_in + i) * cw, pad, cell_scale, false);
  // Rows 1-3: mu, residual (signed), y_hat, aligned under the truth columns.
  for (int64_t i = 0; i < L_out; ++i) {
    const int64_t x0 = pad + (L_in + i) * cw;
    blit_frame(img, frame_of(pred.mu, i), x0, pad + ch, cell_scale, false);
    blit_frame(img, frame_of(pred.residual_hat, i), x0, pad + 2 * ch, cell_scale, true);
    blit_frame(img, frame_of(pred.y_hat_clamped, i), x0, pad + 3 * ch, cell_scale, false);
  }

  // Margin: colorbars documenting both maps, with min/mid/max ticks.
  const int64_t bar_y = 4 * ch + pad + 4;
  const int64_t bar_w = std::min<int64_t>(120, img.width() / 2 - 16);
  for (int64_t i = 0; i < bar_w; ++i) {
    const real v = static_cast<real>(i) / static_cast<real>(bar_w - 1);
    for (int64_t a = 0; a < 8; ++a) {
      img.set(8 + i, bar_y + a, sequential_color(v));
      img.set(img.width() / 2 + 8 + i, bar_y + a, diverging_color(2.0 * v - 1.0));
    }
  }
  const Rgb tick{220, 220, 220};
  draw_text(img, 8, bar_y + 10, "0", tick);
  draw_text(img, 8 + bar_w - 3, bar_y + 10, "1", tick);
  draw_text(img, img.width() / 2 + 8, bar_y + 10, "-1", tick);
  draw_text(img, img.width() / 2 + 8 + bar_w / 2 - 1, bar_y + 10, "0", tick);
  draw_text(img, img.width() / 2 + 8 + bar_w - 6, bar_y + 10, "+1", tick);

  write_png(out_png, img);
}

}  // namespace diffcast::plot
