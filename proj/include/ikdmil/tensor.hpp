#pragma once

#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include "ikdmil/common.hpp"

namespace ikdmil {

// Dense float32 array with a small dynamic shape. Used for model parameters,
// activations, and image pixel data (images are {3, H, W}).
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::vector<int> shape, float fill = 0.0f);

  static Tensor zeros(std::vector<int> shape) { return Tensor(std::move(shape), 0.0f); }
  static Tensor full(std::vector<int> shape, float v) { return Tensor(std::move(shape), v); }

  const std::vector<int>& shape() const { return shape_; }
  int dim(int i) const { return shape_[static_cast<size_t>(i)]; }
  int ndims() const { return static_cast<int>(shape_.size()); }
  size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  float* data() { return data_.data(); }
  const float* data() const { return data_.data(); }
  std::vector<float>& raw() { return data_; }
  const std::vector<float>& raw() const { return data_; }

  float& operator[](size_t i) { return data_[i]; }
  float operator[](size_t i) const { return data_[i]; }

  void fill(float v) { std::fill(data_.begin(), data_.end(), v); }
  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }
  std::string shape_str() const;

 private:
  std::vector<int> shape_;
  std::vector<float> data_;
};

// Simple row-major 2D grid; double for probability maps (loss math runs in
// double so finite-difference checks are not drowned in float noise),
// uint8_t for binary masks.
template <typename T>
struct Grid {
  int h = 0, w = 0;
  std::vector<T> v;

  Grid() = default;
  Grid(int h_, int w_, T fill = T{}) : h(h_), w(w_), v(static_cast<size_t>(h_) * w_, fill) {}

  T& at(int r, int c) { return v[static_cast<size_t>(r) * w + c]; }
  T at(int r, int c) const { return v[static_cast<size_t>(r) * w + c]; }
  size_t size() const { return v.size(); }
  bool same_shape(const Grid& o) const { return h == o.h && w == o.w; }
};

using ProbMap = Grid<double>;
using BinaryMask = Grid<uint8_t>;

void check_same_shape(const ProbMap& a, const ProbMap& b, const char* what);

// Bilinear resampling with corner-aligned sampling: source coordinate of
// output pixel i is i * (in-1) / (out-1). This one kernel is shared by the
// model's head upsampling and the ingestion resize so both paths are
// bit-for-bit reproducible.
void bilinear_resize_plane(const float* src, int sh, int sw, float* dst, int dh, int dw);

// Transpose of bilinear_resize_plane: scatters an output-space gradient back
// to source-space with the same weights. Accumulates into dst_grad.
void bilinear_resize_backward_plane(const float* d_out, int dh, int dw, float* d_src, int sh,
                                    int sw);

Grid<float> bilinear_resize(const Grid<float>& src, int dh, int dw);

}  // namespace ikdmil
