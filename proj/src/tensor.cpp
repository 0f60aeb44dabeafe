#include "ikdmil/tensor.hpp"

#include <sstream>

namespace ikdmil {

Tensor::Tensor(std::vector<int> shape, float fill) : shape_(std::move(shape)) {
  size_t n = 1;
  for (int d : shape_) {
    if (d < 0) throw ShapeError("negative tensor dimension");
    n *= static_cast<size_t>(d);
  }
  data_.assign(n, fill);
}

std::string Tensor::shape_str() const {
  std::ostringstream os;
  os << '[';
  for (size_t i = 0; i < shape_.size(); ++i) {
    if (i) os << 'x';
    os << shape_[i];
  }
  os << ']';
  return os.str();
}

void check_same_shape(const ProbMap& a, const ProbMap& b, const char* what) {
  if (!a.same_shape(b)) {
    std::ostringstream os;
    os << what << ": shape mismatch, expected " << a.h << "x" << a.w << " got " << b.h << "x"
       << b.w;
    throw ShapeError(os.str());
  }
}

void bilinear_resize_plane(const float* src, int sh, int sw, float* dst, int dh, int dw) {
  const double sr = dh > 1 ? static_cast<double>(sh - 1) / (dh - 1) : 0.0;
  const double sc = dw > 1 ? static_cast<double>(sw - 1) / (dw - 1) : 0.0;
  for (int r = 0; r < dh; ++r) {
    double fr = r * sr;
    int r0 = static_cast<int>(fr);
    if (r0 > sh - 2) r0 = sh - 2;
    if (r0 < 0) r0 = 0;
    double wr = sh > 1 ? fr - r0 : 0.0;
    for (int c = 0; c < dw; ++c) {
      double fc = c * sc;
      int c0 = static_cast<int>(fc);
      if (c0 > sw - 2) c0 = sw - 2;
      if (c0 < 0) c0 = 0;
      double wc = sw > 1 ? fc - c0 : 0.0;
      const float* p0 = src + static_cast<size_t>(r0) * sw + c0;
      const float* p1 = sh > 1 ? p0 + sw : p0;
      double v00 = p0[0], v01 = sw > 1 ? p0[1] : p0[0];
      double v10 = p1[0], v11 = sw > 1 ? p1[1] : p1[0];
      double top = v00 + wc * (v01 - v00);
      double bot = v10 + wc * (v11 - v10);
      dst[static_cast<size_t>(r) * dw + c] = static_cast<float>(top + wr * (bot - top));
    }
  }
}

void bilinear_resize_backward_plane(const float* d_out, int dh, int dw, float* d_src, int sh,
                                    int sw) {
  const double sr = dh > 1 ? static_cast<double>(sh - 1) / (dh - 1) : 0.0;
  const double sc = dw > 1 ? static_cast<double>(sw - 1) / (dw - 1) : 0.0;
  for (int r = 0; r < dh; ++r) {
    double fr = r * sr;
    int r0 = static_cast<int>(fr);
    if (r0 > sh - 2) r0 = sh - 2;
    if (r0 < 0) r0 = 0;
    double wr = sh > 1 ? fr - r0 : 0.0;
    int r1 = sh > 1 ? r0 + 1 : r0;
    for (int c = 0; c < dw; ++c) {
      double fc = c * sc;
      int c0 = static_cast<int>(fc);
      if (c0 > sw - 2) c0 = sw - 2;
      if (c0 < 0) c0 = 0;
      double wc = sw > 1 ? fc - c0 : 0.0;
      int c1 = sw > 1 ? c0 + 1 : c0;
      float g = d_out[static_cast<size_t>(r) * dw + c];
      d_src[static_cast<size_t>(r0) * sw + c0] += static_cast<float>(g * (1 - wr) * (1 - wc));
      d_src[static_cast<size_t>(r0) * sw + c1] += static_cast<float>(g * (1 - wr) * wc);
      d_src[static_cast<size_t>(r1) * sw + c0] += static_cast<float>(g * wr * (1 - wc));
      d_src[static_cast<size_t>(r1) * sw + c1] += static_cast<float>(g * wr * wc);
    }
  }
}

Grid<float> bilinear_resize(const Grid<float>& src, int dh, int dw) {
  Grid<float> out(dh, dw);
  bilinear_resize_plane(src.v.data(), src.h, src.w, out.v.data(), dh, dw);
  return out;
}

}  // namespace ikdmil
