#pragma once

#include <filesystem>
#include <vector>

#include "feds/tensor.hpp"

namespace feds {

// RGB image as planar [3, H, W] in [0, 1]. Throws std::runtime_error when the
// file cannot be decoded.
Tensor load_image(const std::filesystem::path& path);
// Rounds to 8 bits; format from the extension (png recommended).
void save_image(const std::filesystem::path& path, const Tensor& rgb);
// 8-bit single-channel binary PGM (P5), row-major.
void save_pgm(const std::filesystem::path& path, const std::vector<unsigned char>& pixels, int height, int width);

bool is_image_file(const std::filesystem::path& path);
// Sorted list of decodable-looking image files in a directory.
std::vector<std::filesystem::path> list_images(const std::filesystem::path& dir);

}  // namespace feds
