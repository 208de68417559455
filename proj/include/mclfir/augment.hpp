#pragma once

#include <array>
#include <cstdint>

#include "mclfir/image.hpp"
#include "mclfir/rng.hpp"

namespace mclfir::augment {

/// Corner-jitter projective distortion.
struct PerspectiveConfig {
  double strength = 0.2;    // corner jitter fraction of min(H,W), in [0, 0.5]
  double apply_prob = 1.0;  // probability the warp is applied at all
};

/// 3x3 projective transform, row-major.
using Homography = std::array<double, 9>;

/// Maps (x, y) through h with perspective divide.
void apply_homography(const Homography& h, double x, double y, double& out_x, double& out_y);

/// Solves the 8-dof transform sending src[i] -> dst[i] for four point pairs
/// (each point is {x, y}).
Homography solve_homography(const std::array<std::array<double, 2>, 4>& src,
                            const std::array<std::array<double, 2>, 4>& dst);

/// Image-bound corners (0,0),(w,0),(w,h),(0,h) each displaced per axis by
/// uniform jitter up to strength*min(h,w). Draws whose quad is not strictly
/// convex are rejected and redrawn, so the warp target is always convex.
std::array<std::array<double, 2>, 4> draw_displaced_corners(int h, int w, double strength,
                                                            Rng& rng);

/// Randomly displaces each image corner by up to strength*min(H,W) per axis,
/// warps source onto the displaced quad with bilinear sampling and zero fill.
/// Deterministic in (image, config, seed); strength 0 copies the input
/// exactly. Throws on strength or apply_prob out of range.
Image random_perspective(const Image& image, const PerspectiveConfig& config, uint64_t seed);

}  // namespace mclfir::augment
