#include "ikdmil/imageio.hpp"

#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>

namespace ikdmil {

Tensor load_image_rgb(const std::filesystem::path& path) {
  cv::Mat bgr = cv::imread(path.string(), cv::IMREAD_COLOR);
  if (bgr.empty()) throw IoError("cannot read image: " + path.string());
  const int h = bgr.rows, w = bgr.cols;
  Tensor out({3, h, w});
  const size_t hw = static_cast<size_t>(h) * w;
  for (int y = 0; y < h; ++y) {
    const cv::Vec3b* row = bgr.ptr<cv::Vec3b>(y);
    for (int x = 0; x < w; ++x) {
      const size_t i = static_cast<size_t>(y) * w + x;
      out.data()[i] = row[x][2] / 255.0f;            // R
      out.data()[hw + i] = row[x][1] / 255.0f;       // G
      out.data()[2 * hw + i] = row[x][0] / 255.0f;   // B
    }
  }
  return out;
}

void save_image_rgb(const std::filesystem::path& path, const Tensor& image) {
  if (image.ndims() != 3 || image.dim(0) != 3) {
    throw ShapeError("save_image_rgb expects a [3xHxW] tensor, got " + image.shape_str());
  }
  const int h = image.dim(1), w = image.dim(2);
  const size_t hw = static_cast<size_t>(h) * w;
  cv::Mat bgr(h, w, CV_8UC3);
  auto to_u8 = [](float v) {
    float s = v * 255.0f + 0.5f;
    if (s < 0.0f) s = 0.0f;
    if (s > 255.0f) s = 255.0f;
    return static_cast<uint8_t>(s);
  };
  for (int y = 0; y < h; ++y) {
    cv::Vec3b* row = bgr.ptr<cv::Vec3b>(y);
    for (int x = 0; x < w; ++x) {
      const size_t i = static_cast<size_t>(y) * w + x;
      row[x][2] = to_u8(image.data()[i]);
      row[x][1] = to_u8(image.data()[hw + i]);
      row[x][0] = to_u8(image.data()[2 * hw + i]);
    }
  }
  if (!cv::imwrite(path.string(), bgr)) {
    throw IoError("cannot write image: " + path.string());
  }
}

BinaryMask load_mask(const std::filesystem::path& path) {
  cv::Mat gray = cv::imread(path.string(), cv::IMREAD_GRAYSCALE);
  if (gray.empty()) throw IoError("cannot read mask: " + path.string());
  BinaryMask mask(gray.rows, gray.cols);
  for (int y = 0; y < gray.rows; ++y) {
    const uint8_t* row = gray.ptr<uint8_t>(y);
    for (int x = 0; x < gray.cols; ++x) mask.at(y, x) = row[x] >= 128 ? 1 : 0;
  }
  return mask;
}

void save_mask(const std::filesystem::path& path, const BinaryMask& mask) {
  cv::Mat gray(mask.h, mask.w, CV_8UC1);
  for (int y = 0; y < mask.h; ++y) {
    uint8_t* row = gray.ptr<uint8_t>(y);
    for (int x = 0; x < mask.w; ++x) row[x] = mask.at(y, x) ? 255 : 0;
  }
  if (!cv::imwrite(path.string(), gray)) {
    throw IoError("cannot write mask: " + path.string());
  }
}

}  // namespace ikdmil
