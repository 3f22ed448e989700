#pragma once

#include <array>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "patnet/tensor.hpp"

namespace patnet {

class ImageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr std::array<float, 3> kImageNetMean = {0.485f, 0.456f, 0.406f};
inline constexpr std::array<float, 3> kImageNetStd = {0.229f, 0.224f, 0.225f};
inline constexpr double kTestCropRatio = 0.9;

/// Reads a binary P6 image with maxval 255 as (1, 3, H, W) in [0, 1].
Tensor4 load_ppm(const std::filesystem::path& path);
Tensor4 parse_ppm(const std::vector<std::uint8_t>& bytes);

/// Writes a (1, 3, H, W) tensor in [0, 1] as P6, rounding to 8 bits.
void save_ppm(const Tensor4& image, const std::filesystem::path& path);

/// Bilinear resize with half-pixel centers and edge clamping.
Tensor4 resize_bilinear(const Tensor4& image, int out_h, int out_w);

/// Output size when the shorter side is scaled to `shorter`; the longer side
/// keeps the aspect ratio, rounded to nearest.
std::pair<int, int> resize_shorter_side(int h, int w, int shorter);

/// Crops a size x size window whose top-left corner is ((H-size)/2, (W-size)/2).
Tensor4 center_crop(const Tensor4& image, int size);

Tensor4 normalize_imagenet(const Tensor4& image);

/// Shorter side to round(crop / 0.9), center crop, then normalization.
Tensor4 preprocess(const Tensor4& image, int crop = 224, bool normalize = true);

/// One class name per line; line index is the class id.
std::vector<std::string> load_labels(const std::filesystem::path& path);

}  // namespace patnet
