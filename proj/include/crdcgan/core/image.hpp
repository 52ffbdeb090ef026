#pragma once

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include "crdcgan/core/errors.hpp"
#include "crdcgan/core/tensor.hpp"

namespace crdcgan {

// 8-bit RGB raster. Stored and written as binary PPM (P6): lossless, byte
// deterministic, and trivially diffable in tests.
struct Image8 {
  int width = 0;
  int height = 0;
  std::vector<uint8_t> pixels;  // RGB interleaved, row-major

  Image8() = default;
  Image8(int w, int h) : width(w), height(h), pixels(static_cast<size_t>(w) * h * 3, 0) {}

  uint8_t* at(int x, int y) { return pixels.data() + (static_cast<size_t>(y) * width + x) * 3; }
  const uint8_t* at(int x, int y) const { return pixels.data() + (static_cast<size_t>(y) * width + x) * 3; }
};

inline void write_ppm(const Image8& img, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ArtifactError("cannot write image: " + path);
  out << "P6\n" << img.width << " " << img.height << "\n255\n";
  out.write(reinterpret_cast<const char*>(img.pixels.data()), static_cast<std::streamsize>(img.pixels.size()));
  if (!out.good()) throw ArtifactError("short write: " + path);
}

inline Image8 read_ppm(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ArtifactError("cannot read image: " + path);
  std::string magic;
  in >> magic;
  if (magic != "P6") throw ArtifactError("unsupported image format in " + path);
  int w = 0, h = 0, maxval = 0;
  in >> w >> h >> maxval;
  if (w <= 0 || h <= 0 || maxval != 255) throw ArtifactError("bad PPM header in " + path);
  in.get();  // single whitespace after header
  Image8 img(w, h);
  in.read(reinterpret_cast<char*>(img.pixels.data()), static_cast<std::streamsize>(img.pixels.size()));
  if (in.gcount() != static_cast<std::streamsize>(img.pixels.size())) {
    throw ArtifactError("truncated image: " + path);
  }
  return img;
}

// Image -> (1,H,W,3) tensor in [-1,1].
template <class T>
Tensor<T> image_to_tensor(const Image8& img) {
  Tensor<T> t({1, img.height, img.width, 3});
  for (int64_t i = 0; i < static_cast<int64_t>(img.pixels.size()); ++i) {
    t[i] = static_cast<T>(img.pixels[static_cast<size_t>(i)]) / T(127.5) - T(1);
  }
  return t;
}

// (H,W,3) or (1,H,W,3) tensor in [-1,1] -> image, clamped.
template <class T>
Image8 tensor_to_image(const Tensor<T>& t) {
  int h, w;
  if (t.rank() == 4 && t.dim(0) == 1) {
    h = t.dim(1);
    w = t.dim(2);
  } else if (t.rank() == 3) {
    h = t.dim(0);
    w = t.dim(1);
  } else {
    throw std::invalid_argument("tensor_to_image: expected (H,W,3) or (1,H,W,3)");
  }
  Image8 img(w, h);
  for (int64_t i = 0; i < static_cast<int64_t>(img.pixels.size()); ++i) {
    double v = (static_cast<double>(t[i]) + 1.0) * 127.5;
    img.pixels[static_cast<size_t>(i)] = static_cast<uint8_t>(std::clamp(v, 0.0, 255.0) + 0.5);
  }
  return img;
}

// 2x area downsample of a (B,H,W,C) tensor, used to derive lower-stage real
// images from the stored resolution.
template <class T>
Tensor<T> downsample2x(const Tensor<T>& x) {
  const int B = x.dim(0), H = x.dim(1), W = x.dim(2), C = x.dim(3);
  Tensor<T> out({B, H / 2, W / 2, C});
  for (int b = 0; b < B; ++b)
    for (int i = 0; i < H / 2; ++i)
      for (int j = 0; j < W / 2; ++j)
        for (int c = 0; c < C; ++c) {
          T s = 0;
          for (int di = 0; di < 2; ++di)
            for (int dj = 0; dj < 2; ++dj)
              s += x[(((static_cast<int64_t>(b) * H + 2 * i + di) * W) + 2 * j + dj) * C + c];
          out[(((static_cast<int64_t>(b) * (H / 2) + i) * (W / 2)) + j) * C + c] = s / T(4);
        }
  return out;
}

// Assemble a row-major grid of equally sized tiles with a light separator.
inline Image8 make_grid(const std::vector<std::vector<Image8>>& rows, int sep = 2) {
  if (rows.empty() || rows[0].empty()) throw std::invalid_argument("make_grid: empty input");
  const int th = rows[0][0].height, tw = rows[0][0].width;
  const int nrows = static_cast<int>(rows.size());
  const int ncols = static_cast<int>(rows[0].size());
  Image8 grid(ncols * tw + (ncols - 1) * sep, nrows * th + (nrows - 1) * sep);
  std::fill(grid.pixels.begin(), grid.pixels.end(), uint8_t(255));
  for (int r = 0; r < nrows; ++r) {
    if (static_cast<int>(rows[static_cast<size_t>(r)].size()) != ncols) {
      throw std::invalid_argument("make_grid: ragged rows");
    }
    for (int c = 0; c < ncols; ++c) {
      const Image8& tile = rows[static_cast<size_t>(r)][static_cast<size_t>(c)];
      if (tile.width != tw || tile.height != th) throw std::invalid_argument("make_grid: tile size mismatch");
      for (int y = 0; y < th; ++y) {
        const uint8_t* src = tile.at(0, y);
        uint8_t* dst = grid.at(c * (tw + sep), r * (th + sep) + y);
        std::copy(src, src + static_cast<size_t>(tw) * 3, dst);
      }
    }
  }
  return grid;
}

inline double mean_pixel_abs_diff(const Image8& a, const Image8& b) {
  if (a.pixels.size() != b.pixels.size()) throw std::invalid_argument("image size mismatch");
  double s = 0;
  for (size_t i = 0; i < a.pixels.size(); ++i) {
    s += std::abs(static_cast<double>(a.pixels[i]) - static_cast<double>(b.pixels[i]));
  }
  return a.pixels.empty() ? 0.0 : s / static_cast<double>(a.pixels.size());
}

}  // namespace crdcgan
