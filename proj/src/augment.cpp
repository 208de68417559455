#include "mclfir/augment.hpp"

#include <cmath>
#include <stdexcept>

#include "mclfir/rng.hpp"

namespace mclfir::augment {

void apply_homography(const Homography& h, double x, double y, double& out_x, double& out_y) {
  const double w = h[6] * x + h[7] * y + h[8];
  out_x = (h[0] * x + h[1] * y + h[2]) / w;
  out_y = (h[3] * x + h[4] * y + h[5]) / w;
}

Homography solve_homography(const std::array<std::array<double, 2>, 4>& src,
                            const std::array<std::array<double, 2>, 4>& dst) {
  // Two rows per correspondence, unknowns h00..h21 with h22 fixed to 1.
  double a[8][9] = {};
  for (int i = 0; i < 4; ++i) {
    const double x = src[i][0], y = src[i][1];
    const double u = dst[i][0], v = dst[i][1];
    double* r0 = a[2 * i];
    double* r1 = a[2 * i + 1];
    r0[0] = x; r0[1] = y; r0[2] = 1.0; r0[6] = -u * x; r0[7] = -u * y; r0[8] = u;
    r1[3] = x; r1[4] = y; r1[5] = 1.0; r1[6] = -v * x; r1[7] = -v * y; r1[8] = v;
  }

  // Gaussian elimination with partial pivoting.
  for (int col = 0; col < 8; ++col) {
    int pivot = col;
    for (int row = col + 1; row < 8; ++row)
      if (std::abs(a[row][col]) > std::abs(a[pivot][col])) pivot = row;
    if (std::abs(a[pivot][col]) < 1e-12)
      throw std::runtime_error("solve_homography: degenerate point configuration");
    if (pivot != col)
      for (int k = 0; k < 9; ++k) std::swap(a[col][k], a[pivot][k]);
    for (int row = 0; row < 8; ++row) {
      if (row == col) continue;
      const double f = a[row][col] / a[col][col];
      if (f == 0.0) continue;
      for (int k = col; k < 9; ++k) a[row][k] -= f * a[col][k];
    }
  }

  Homography h;
  for (int i = 0; i < 8; ++i) h[static_cast<size_t>(i)] = a[i][8] / a[i][i];
  h[8] = 1.0;
  return h;
}

namespace {

std::array<std::array<double, 2>, 4> bound_corners(int h, int w) {
  return {{{0.0, 0.0},
           {static_cast<double>(w), 0.0},
           {static_cast<double>(w), static_cast<double>(h)},
           {0.0, static_cast<double>(h)}}};
}

bool strictly_convex(const std::array<std::array<double, 2>, 4>& q) {
  double first = 0.0;
  for (int i = 0; i < 4; ++i) {
    const auto& a = q[static_cast<size_t>(i)];
    const auto& b = q[static_cast<size_t>((i + 1) % 4)];
    const auto& c = q[static_cast<size_t>((i + 2) % 4)];
    const double cross = (b[0] - a[0]) * (c[1] - b[1]) - (b[1] - a[1]) * (c[0] - b[0]);
    if (cross == 0.0) return false;
    if (i == 0)
      first = cross;
    else if (cross * first < 0.0)
      return false;
  }
  return true;
}

}  // namespace

std::array<std::array<double, 2>, 4> draw_displaced_corners(int h, int w, double strength,
                                                            Rng& rng) {
  const double delta = strength * std::min(h, w);
  for (;;) {
    auto corners = bound_corners(h, w);
    for (auto& c : corners) {
      c[0] += rng.uniform(-delta, delta);
      c[1] += rng.uniform(-delta, delta);
    }
    if (strictly_convex(corners)) return corners;
  }
}

Image random_perspective(const Image& image, const PerspectiveConfig& config, uint64_t seed) {
  if (image.empty()) throw std::invalid_argument("random_perspective: empty image");
  if (config.strength < 0.0 || config.strength > 0.5)
    throw std::invalid_argument("random_perspective: strength must be in [0, 0.5]");
  if (config.apply_prob < 0.0 || config.apply_prob > 1.0)
    throw std::invalid_argument("random_perspective: apply_prob must be in [0, 1]");

  Rng rng(seed);
  if (rng.uniform() >= config.apply_prob) return image;

  const int h = image.height, w = image.width;
  const auto src = bound_corners(h, w);
  const auto dst = draw_displaced_corners(h, w, config.strength, rng);
  bool moved = false;
  for (size_t i = 0; i < 4 && !moved; ++i)
    moved = dst[i][0] != src[i][0] || dst[i][1] != src[i][1];
  if (!moved) return image;  // strength 0: exact copy, no resampling error

  // Sample the source through the inverse map (displaced quad -> source).
  const Homography inv = solve_homography(dst, src);
  Image out(h, w);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      double sx, sy;
      apply_homography(inv, static_cast<double>(x), static_cast<double>(y), sx, sy);
      const int x0 = static_cast<int>(std::floor(sx));
      const int y0 = static_cast<int>(std::floor(sy));
      const double fx = sx - x0;
      const double fy = sy - y0;
      for (int c = 0; c < 3; ++c) {
        double acc = 0.0;
        for (int dy2 = 0; dy2 <= 1; ++dy2) {
          for (int dx2 = 0; dx2 <= 1; ++dx2) {
            const int yy = y0 + dy2;
            const int xx = x0 + dx2;
            if (yy < 0 || yy >= h || xx < 0 || xx >= w) continue;  // zero fill
            const double weight = (dx2 ? fx : 1.0 - fx) * (dy2 ? fy : 1.0 - fy);
            acc += weight * image.at(yy, xx, c);
          }
        }
        out.at(y, x, c) = acc;
      }
    }
  }
  return out;
}

}  // namespace mclfir::augment
