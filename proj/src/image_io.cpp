#include "feds/image_io.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <stdexcept>

#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>

namespace feds {

Tensor load_image(const std::filesystem::path& path) {
  const cv::Mat img = cv::imread(path.string(), cv::IMREAD_COLOR);
  if (img.empty()) throw std::runtime_error("cannot decode image " + path.string());
  const int h = img.rows, w = img.cols;
  Tensor t(Shape{3, h, w});
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  for (int y = 0; y < h; ++y) {
    const auto* row = img.ptr<cv::Vec3b>(y);
    for (int x = 0; x < w; ++x) {
      // OpenCV stores BGR
      for (int c = 0; c < 3; ++c) {
        t.data[static_cast<std::size_t>(c) * plane + static_cast<std::size_t>(y) * w + x] = row[x][2 - c] / 255.0;
      }
    }
  }
  return t;
}

void save_image(const std::filesystem::path& path, const Tensor& rgb) {
  if (rgb.ndim() != 3 || rgb.dim(0) != 3) throw std::invalid_argument("save_image: expected [3, H, W]");
  const int h = rgb.dim(1), w = rgb.dim(2);
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  cv::Mat img(h, w, CV_8UC3);
  for (int y = 0; y < h; ++y) {
    auto* row = img.ptr<cv::Vec3b>(y);
    for (int x = 0; x < w; ++x) {
      for (int c = 0; c < 3; ++c) {
        const double v = rgb.data[static_cast<std::size_t>(c) * plane + static_cast<std::size_t>(y) * w + x];
        row[x][2 - c] = static_cast<unsigned char>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
      }
    }
  }
  if (!cv::imwrite(path.string(), img)) throw std::runtime_error("cannot write image " + path.string());
}

void save_pgm(const std::filesystem::path& path, const std::vector<unsigned char>& pixels, int height, int width) {
  if (pixels.size() != static_cast<std::size_t>(height) * width) throw std::invalid_argument("save_pgm: size mismatch");
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot write " + path.string());
  f << "P5\n" << width << ' ' << height << "\n255\n";
  f.write(reinterpret_cast<const char*>(pixels.data()), static_cast<std::streamsize>(pixels.size()));
  if (!f) throw std::runtime_error("write failed for " + path.string());
}

bool is_image_file(const std::filesystem::path& path) {
  std::string ext = path.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
  return ext == ".png" || ext == ".jpg" || ext == ".jpeg" || ext == ".bmp" || ext == ".ppm" || ext == ".tif" ||
         ext == ".tiff" || ext == ".webp";
}

std::vector<std::filesystem::path> list_images(const std::filesystem::path& dir) {
  if (!std::filesystem::is_directory(dir)) throw std::invalid_argument("not a directory: " + dir.string());
  std::vector<std::filesystem::path> out;
  for (const auto& e : std::filesystem::directory_iterator(dir)) {
    if (e.is_regular_file() && is_image_file(e.path())) out.push_back(e.path());
  }
  std::sort(out.begin(), out.end());
  return out;
}

}  // namespace feds
