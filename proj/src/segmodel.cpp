#include "ikdmil/segmodel.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <sstream>

#include "ikdmil/rng.hpp"
#include "ikdmil/sha256.hpp"

namespace ikdmil {

namespace {

using RMat = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapRMat = Eigen::Map<RMat>;
using ConstMapRMat = Eigen::Map<const RMat>;

// im2col for 3x3 stride-1 pad-1 kernels: col is (in_c*9) x (H*W), row-major.
void im2col3(const float* src, int c_in, int h, int w, float* col) {
  const size_t hw = static_cast<size_t>(h) * w;
  for (int c = 0; c < c_in; ++c) {
    const float* plane = src + static_cast<size_t>(c) * hw;
    for (int ky = 0; ky < 3; ++ky) {
      for (int kx = 0; kx < 3; ++kx) {
        float* row = col + (static_cast<size_t>(c) * 9 + ky * 3 + kx) * hw;
        for (int y = 0; y < h; ++y) {
          int sy = y + ky - 1;
          float* out = row + static_cast<size_t>(y) * w;
          if (sy < 0 || sy >= h) {
            std::fill(out, out + w, 0.0f);
            continue;
          }
          const float* in = plane + static_cast<size_t>(sy) * w;
          int dx = kx - 1;
          int x0 = std::max(0, -dx);        // first valid output x
          int x1 = std::min(w, w - dx);     // one past last valid output x
          if (x0 > 0) std::fill(out, out + x0, 0.0f);
          if (x1 > x0) std::copy(in + x0 + dx, in + x1 + dx, out + x0);
          if (x1 < w) std::fill(out + x1, out + w, 0.0f);
        }
      }
    }
  }
}

// Accumulating transpose of im2col3.
void col2im3(const float* col, int c_in, int h, int w, float* dst) {
  const size_t hw = static_cast<size_t>(h) * w;
  for (int c = 0; c < c_in; ++c) {
    float* plane = dst + static_cast<size_t>(c) * hw;
    for (int ky = 0; ky < 3; ++ky) {
      for (int kx = 0; kx < 3; ++kx) {
        const float* row = col + (static_cast<size_t>(c) * 9 + ky * 3 + kx) * hw;
        for (int y = 0; y < h; ++y) {
          int sy = y + ky - 1;
          if (sy < 0 || sy >= h) continue;
          float* out = plane + static_cast<size_t>(sy) * w;
          const float* in = row + static_cast<size_t>(y) * w;
          int dx = kx - 1;
          int x0 = std::max(0, -dx);
          int x1 = std::min(w, w - dx);
          for (int x = x0; x < x1; ++x) out[x + dx] += in[x];
        }
      }
    }
  }
}

inline float sigmoidf(float x) { return 1.0f / (1.0f + std::exp(-x)); }

std::vector<double> softmax_logits(const Tensor& logits) {
  std::vector<double> w(logits.size());
  double mx = -1e300;
  for (size_t i = 0; i < logits.size(); ++i) mx = std::max(mx, static_cast<double>(logits[i]));
  double z = 0.0;
  for (size_t i = 0; i < logits.size(); ++i) {
    w[i] = std::exp(static_cast<double>(logits[i]) - mx);
    z += w[i];
  }
  for (auto& v : w) v /= z;
  return w;
}

}  // namespace

// ---------------------------------------------------------------------------
// BackboneSpec

void BackboneSpec::resolve() {
  if (!block_channel_plan.empty()) return;
  if (name == "vgg16-first3") {
    block_channel_plan = {{64, 64}, {128, 128}, {256, 256, 256}};
  } else if (name == "tiny3") {
    block_channel_plan = {{8, 8}, {16, 16}, {32, 32}};
  } else if (name == "tiny2") {
    block_channel_plan = {{8, 8}, {16, 16}};
  } else {
    throw ConfigError("unknown backbone name \"" + name + "\"");
  }
}

void BackboneSpec::validate() const {
  if (block_channel_plan.size() < 2) {
    throw ConfigError("backbone must declare at least 2 blocks, got " +
                      std::to_string(block_channel_plan.size()));
  }
  for (const auto& blk : block_channel_plan) {
    if (blk.empty()) throw ConfigError("backbone block with no conv layers");
    for (int c : blk) {
      if (c <= 0) throw ConfigError("backbone channel widths must be positive");
    }
  }
  const int n = block_count();
  if (input_size <= 0) throw ConfigError("input_size must be positive");
  if (input_size % (1 << n) != 0) {
    throw ConfigError("input_size " + std::to_string(input_size) + " is not divisible by 2^" +
                      std::to_string(n) + " (one 2x pool per block)");
  }
}

bool BackboneSpec::structurally_equal(const BackboneSpec& o) const {
  return block_channel_plan == o.block_channel_plan && input_size == o.input_size;
}

// ---------------------------------------------------------------------------
// FusionWeights

std::vector<double> FusionWeights::weights() const { return softmax_logits(logits); }

ProbMap fuse_maps(const std::vector<ProbMap>& per_block, const FusionWeights& weights) {
  if (per_block.empty()) throw ConfigError("fuse_maps: no input maps");
  if (weights.logits.size() != per_block.size()) {
    throw ConfigError("fuse_maps: " + std::to_string(per_block.size()) + " maps but " +
                      std::to_string(weights.logits.size()) + " fusion weights");
  }
  for (const auto& m : per_block) check_same_shape(per_block[0], m, "fuse_maps");
  std::vector<double> w = weights.weights();
  ProbMap fused(per_block[0].h, per_block[0].w, 0.0);
  for (size_t i = 0; i < per_block.size(); ++i) {
    const double wi = w[i];
    for (size_t p = 0; p < fused.size(); ++p) fused.v[p] += wi * per_block[i].v[p];
  }
  return fused;
}

Tensor fusion_logit_grad(const std::vector<ProbMap>& per_block, const FusionWeights& weights,
                         const ProbMap& d_fused) {
  if (weights.logits.size() != per_block.size()) {
    throw ConfigError("fusion_logit_grad: " + std::to_string(per_block.size()) + " maps but " +
                      std::to_string(weights.logits.size()) + " fusion weights");
  }
  const std::vector<double> w = weights.weights();
  std::vector<double> dw(per_block.size(), 0.0);
  for (size_t b = 0; b < per_block.size(); ++b) {
    check_same_shape(d_fused, per_block[b], "fusion_logit_grad");
    double acc = 0.0;
    for (size_t p = 0; p < d_fused.size(); ++p) acc += d_fused.v[p] * per_block[b].v[p];
    dw[b] = acc;
  }
  // Softmax chain rule: dL/dlogit_j = w_j * (dL/dw_j - sum_i w_i dL/dw_i).
  double dot = 0.0;
  for (size_t i = 0; i < w.size(); ++i) dot += w[i] * dw[i];
  Tensor g({static_cast<int>(per_block.size())});
  for (size_t i = 0; i < w.size(); ++i) g[i] = static_cast<float>(w[i] * (dw[i] - dot));
  return g;
}

// ---------------------------------------------------------------------------
// GradStore

void GradStore::scale(float s) {
  for (auto& t : grads)
    for (auto& v : t.raw()) v *= s;
}

void GradStore::clear() {
  for (auto& t : grads) t.fill(0.0f);
}

// ---------------------------------------------------------------------------
// SegModel

SegModel SegModel::build(const BackboneSpec& spec_in, uint64_t seed) {
  BackboneSpec spec = spec_in;
  spec.resolve();
  spec.validate();

  SegModel m;
  m.spec_ = spec;
  int param_index = 0;
  auto init_conv = [&](int in_c, int out_c, int k) {
    Conv conv;
    conv.in_c = in_c;
    conv.out_c = out_c;
    conv.k = k;
    conv.w = Tensor({out_c, in_c * k * k});
    conv.b = Tensor({out_c});
    Pcg32 rng(derive_seed(seed, "param-init", static_cast<uint64_t>(param_index++)));
    const double stddev = std::sqrt(2.0 / (in_c * k * k));  // He initialization
    for (auto& v : conv.w.raw()) v = static_cast<float>(rng.gaussian(0.0, stddev));
    return conv;
  };

  int in_c = 3;
  for (const auto& widths : spec.block_channel_plan) {
    std::vector<Conv> block;
    for (int out_c : widths) {
      block.push_back(init_conv(in_c, out_c, 3));
      in_c = out_c;
    }
    m.blocks_.push_back(std::move(block));
  }
  for (const auto& widths : spec.block_channel_plan) {
    m.heads_.push_back(init_conv(widths.back(), 1, 1));
  }
  m.fusion_.logits = Tensor({m.block_count()});  // zeros: uniform initial fusion
  return m;
}

SegModel build_backbone(const BackboneSpec& spec, uint64_t seed) {
  return SegModel::build(spec, seed);
}

std::vector<int> SegModel::upsample_factors() const {
  std::vector<int> f;
  for (int i = 0; i < block_count(); ++i) f.push_back(1 << (i + 1));
  return f;
}

std::vector<SegModel::NamedParam> SegModel::parameters() {
  std::vector<NamedParam> out;
  for (size_t b = 0; b < blocks_.size(); ++b) {
    for (size_t c = 0; c < blocks_[b].size(); ++c) {
      std::string base = "block" + std::to_string(b) + ".conv" + std::to_string(c);
      out.push_back({base + ".w", &blocks_[b][c].w});
      out.push_back({base + ".b", &blocks_[b][c].b});
    }
  }
  for (size_t h = 0; h < heads_.size(); ++h) {
    std::string base = "head" + std::to_string(h);
    out.push_back({base + ".w", &heads_[h].w});
    out.push_back({base + ".b", &heads_[h].b});
  }
  out.push_back({"fusion.logits", &fusion_.logits});
  return out;
}

std::vector<SegModel::ConstNamedParam> SegModel::parameters() const {
  std::vector<ConstNamedParam> out;
  auto mutable_params = const_cast<SegModel*>(this)->parameters();
  out.reserve(mutable_params.size());
  for (const auto& p : mutable_params) out.push_back({p.name, p.tensor});
  return out;
}

size_t SegModel::parameter_count() const {
  size_t n = 0;
  for (const auto& p : parameters()) n += p.tensor->size();
  return n;
}

std::string SegModel::parameter_checksum() const {
  Sha256 sha;
  for (const auto& p : parameters()) {
    sha.update(p.name.data(), p.name.size());
    for (int d : p.tensor->shape()) sha.update(&d, sizeof(d));
    sha.update(p.tensor->data(), p.tensor->size() * sizeof(float));
  }
  return sha.hex_digest();
}

GradStore SegModel::make_grad_store() const {
  GradStore gs;
  for (const auto& p : parameters()) gs.grads.emplace_back(p.tensor->shape());
  return gs;
}

void SegModel::check_input(const Tensor& image) const {
  const int s = spec_.input_size;
  if (image.ndims() != 3 || image.dim(0) != 3 || image.dim(1) != s || image.dim(2) != s) {
    std::ostringstream os;
    os << "input shape mismatch: expected [3x" << s << "x" << s << "], got "
       << image.shape_str();
    throw ShapeError(os.str());
  }
}

MultiScaleOutput SegModel::forward(const Tensor& image) const {
  ForwardCache cache;
  return forward(image, cache);
}

MultiScaleOutput SegModel::forward(const Tensor& image, ForwardCache& cache) const {
  check_input(image);
  const int input_size = spec_.input_size;
  cache.blocks.assign(blocks_.size(), {});
  cache.heads.assign(heads_.size(), {});

  Tensor cur = image;
  int h = input_size, w = input_size;
  MultiScaleOutput out;
  out.per_block.resize(blocks_.size());

  for (size_t b = 0; b < blocks_.size(); ++b) {
    auto& bc = cache.blocks[b];
    for (const Conv& conv : blocks_[b]) {
      bc.conv_in.push_back(cur);
      const size_t hw = static_cast<size_t>(h) * w;
      std::vector<float> col(static_cast<size_t>(conv.in_c) * 9 * hw);
      im2col3(cur.data(), conv.in_c, h, w, col.data());
      Tensor y({conv.out_c, h, w});
      ConstMapRMat wm(conv.w.data(), conv.out_c, conv.in_c * 9);
      ConstMapRMat cm(col.data(), conv.in_c * 9, static_cast<Eigen::Index>(hw));
      MapRMat ym(y.data(), conv.out_c, static_cast<Eigen::Index>(hw));
      ym.noalias() = wm * cm;
      for (int c = 0; c < conv.out_c; ++c) {
        float bias = conv.b[static_cast<size_t>(c)];
        float* plane = y.data() + static_cast<size_t>(c) * hw;
        for (size_t i = 0; i < hw; ++i) {
          float v = plane[i] + bias;
          plane[i] = v > 0.0f ? v : 0.0f;  // ReLU
        }
      }
      bc.conv_out.push_back(y);
      cur = std::move(y);
    }
    // 2x2 max-pool, stride 2.
    const int oh = h / 2, ow = w / 2;
    const int ch = cur.dim(0);
    Tensor pooled({ch, oh, ow});
    bc.pool_argmax.assign(static_cast<size_t>(ch) * oh * ow, 0);
    for (int c = 0; c < ch; ++c) {
      const float* plane = cur.data() + static_cast<size_t>(c) * h * w;
      float* outp = pooled.data() + static_cast<size_t>(c) * oh * ow;
      int* am = bc.pool_argmax.data() + static_cast<size_t>(c) * oh * ow;
      for (int y = 0; y < oh; ++y) {
        for (int x = 0; x < ow; ++x) {
          int base = (2 * y) * w + 2 * x;
          int idx = base;
          float best = plane[base];
          if (plane[base + 1] > best) { best = plane[base + 1]; idx = base + 1; }
          if (plane[base + w] > best) { best = plane[base + w]; idx = base + w; }
          if (plane[base + w + 1] > best) { best = plane[base + w + 1]; idx = base + w + 1; }
          outp[y * ow + x] = best;
          am[y * ow + x] = static_cast<int>(static_cast<size_t>(c) * h * w) + idx;
        }
      }
    }
    bc.pool_out = pooled;
    cur = std::move(pooled);
    h = oh;
    w = ow;

    // Head: 1x1 conv -> sigmoid at block resolution -> upsample.
    const Conv& head = heads_[b];
    Grid<float> sig(h, w);
    {
      const float* feat = cur.data();
      const size_t hw = static_cast<size_t>(h) * w;
      for (size_t i = 0; i < hw; ++i) {
        float z = head.b[0];
        for (int c = 0; c < head.in_c; ++c) {
          z += head.w[static_cast<size_t>(c)] * feat[static_cast<size_t>(c) * hw + i];
        }
        sig.v[i] = sigmoidf(z);
      }
    }
    cache.heads[b].sig = sig;
    Grid<float> up = bilinear_resize(sig, input_size, input_size);
    ProbMap pm(input_size, input_size);
    for (size_t i = 0; i < pm.size(); ++i) pm.v[i] = static_cast<double>(up.v[i]);
    out.per_block[b] = std::move(pm);
  }

  out.fused = fuse_maps(out.per_block, fusion_);
  return out;
}

void SegModel::backward(const ForwardCache& cache, const std::vector<ProbMap>& d_blocks,
                        const ProbMap& d_fused, GradStore& grads, bool logit_grads) const {
  if (d_blocks.size() != blocks_.size()) {
    throw ShapeError("backward: expected " + std::to_string(blocks_.size()) +
                     " block gradients, got " + std::to_string(d_blocks.size()));
  }
  const int input_size = spec_.input_size;
  const std::vector<double> w = fusion_.weights();

  // Parameter indices follow the parameters() layout.
  size_t idx = 0;
  std::vector<std::vector<size_t>> conv_w_idx(blocks_.size());
  for (size_t b = 0; b < blocks_.size(); ++b) {
    for (size_t c = 0; c < blocks_[b].size(); ++c) {
      conv_w_idx[b].push_back(idx);
      idx += 2;
    }
  }
  std::vector<size_t> head_w_idx;
  for (size_t h = 0; h < heads_.size(); ++h) {
    head_w_idx.push_back(idx);
    idx += 2;
  }
  const size_t fusion_idx = idx;

  if (logit_grads) {
    // dL/dw_i = sum_px d_fused * per_block_i; chain through softmax.
    // per_block maps are recoverable from the head caches via upsampling.
    std::vector<double> dw(blocks_.size(), 0.0);
    for (size_t b = 0; b < blocks_.size(); ++b) {
      const Grid<float>& sig = cache.heads[b].sig;
      Grid<float> up = bilinear_resize(sig, input_size, input_size);
      double acc = 0.0;
      for (size_t i = 0; i < up.size(); ++i) acc += d_fused.v[i] * static_cast<double>(up.v[i]);
      dw[b] = acc;
    }
    double dot = 0.0;
    for (size_t i = 0; i < w.size(); ++i) dot += w[i] * dw[i];
    Tensor& glog = grads.grads[fusion_idx];
    for (size_t i = 0; i < w.size(); ++i) {
      glog[i] += static_cast<float>(w[i] * (dw[i] - dot));
    }
  }

  // Gradient flowing into each block's output feature map.
  std::vector<Tensor> d_block_out(blocks_.size());

  for (size_t b = 0; b < blocks_.size(); ++b) {
    const auto& bc = cache.blocks[b];
    const Tensor& feat = bc.pool_out;
    const int h = feat.dim(1), wd = feat.dim(2);
    const size_t hw = static_cast<size_t>(h) * wd;

    // Total gradient on this block's upsampled map.
    Grid<float> dup(input_size, input_size);
    for (size_t i = 0; i < dup.size(); ++i) {
      dup.v[i] = static_cast<float>(d_blocks[b].v[i] + w[b] * d_fused.v[i]);
    }
    // Through the upsampler, then the sigmoid.
    Grid<float> dsig(h, wd, 0.0f);
    bilinear_resize_backward_plane(dup.v.data(), input_size, input_size, dsig.v.data(), h, wd);
    const Grid<float>& sig = cache.heads[b].sig;
    std::vector<float> dz(hw);
    for (size_t i = 0; i < hw; ++i) dz[i] = dsig.v[i] * sig.v[i] * (1.0f - sig.v[i]);

    // 1x1 head backward.
    const Conv& head = heads_[b];
    Tensor& dhw = grads.grads[head_w_idx[b]];
    Tensor& dhb = grads.grads[head_w_idx[b] + 1];
    double db_acc = 0.0;
    for (size_t i = 0; i < hw; ++i) db_acc += dz[i];
    dhb[0] += static_cast<float>(db_acc);
    Tensor dfeat(feat.shape());
    for (int c = 0; c < head.in_c; ++c) {
      const float* fplane = feat.data() + static_cast<size_t>(c) * hw;
      float* dplane = dfeat.data() + static_cast<size_t>(c) * hw;
      const float wc = head.w[static_cast<size_t>(c)];
      double dw_acc = 0.0;
      for (size_t i = 0; i < hw; ++i) {
        dw_acc += static_cast<double>(dz[i]) * fplane[i];
        dplane[i] = dz[i] * wc;
      }
      dhw[static_cast<size_t>(c)] += static_cast<float>(dw_acc);
    }
    d_block_out[b] = std::move(dfeat);
  }

  // Trunk backward, last block first. Each block's output feeds its head
  // (already accounted) and the next block (accumulated via d_prev).
  Tensor d_next;  // gradient w.r.t. current block's pooled output from block above
  for (int b = block_count() - 1; b >= 0; --b) {
    const auto& bc = cache.blocks[b];
    Tensor d_out = std::move(d_block_out[b]);
    if (!d_next.empty()) {
      for (size_t i = 0; i < d_out.size(); ++i) d_out[i] += d_next[i];
    }

    // Max-pool backward.
    const Tensor& pre_pool = bc.conv_out.back();
    Tensor d_pre(pre_pool.shape());
    for (size_t i = 0; i < d_out.size(); ++i) {
      d_pre[static_cast<size_t>(bc.pool_argmax[i])] += d_out[i];
    }

    // Convs in reverse.
    Tensor d_cur = std::move(d_pre);
    for (int c = static_cast<int>(blocks_[b].size()) - 1; c >= 0; --c) {
      const Conv& conv = blocks_[b][c];
      const Tensor& x = bc.conv_in[c];
      const Tensor& y = bc.conv_out[c];
      const int ch = y.dim(1), cw = y.dim(2);
      const size_t hw = static_cast<size_t>(ch) * cw;

      // ReLU backward.
      for (size_t i = 0; i < d_cur.size(); ++i) {
        if (y[i] <= 0.0f) d_cur[i] = 0.0f;
      }

      std::vector<float> col(static_cast<size_t>(conv.in_c) * 9 * hw);
      im2col3(x.data(), conv.in_c, ch, cw, col.data());
      ConstMapRMat colm(col.data(), conv.in_c * 9, static_cast<Eigen::Index>(hw));
      ConstMapRMat dym(d_cur.data(), conv.out_c, static_cast<Eigen::Index>(hw));

      Tensor& dw = grads.grads[conv_w_idx[b][c]];
      Tensor& db = grads.grads[conv_w_idx[b][c] + 1];
      MapRMat dwm(dw.data(), conv.out_c, conv.in_c * 9);
      dwm.noalias() += dym * colm.transpose();
      for (int oc = 0; oc < conv.out_c; ++oc) {
        const float* plane = d_cur.data() + static_cast<size_t>(oc) * hw;
        double acc = 0.0;
        for (size_t i = 0; i < hw; ++i) acc += plane[i];
        db[static_cast<size_t>(oc)] += static_cast<float>(acc);
      }

      if (b == 0 && c == 0) break;  // input image gradient not needed
      ConstMapRMat wm(conv.w.data(), conv.out_c, conv.in_c * 9);
      std::vector<float> dcol(static_cast<size_t>(conv.in_c) * 9 * hw);
      MapRMat dcolm(dcol.data(), conv.in_c * 9, static_cast<Eigen::Index>(hw));
      dcolm.noalias() = wm.transpose() * dym;
      Tensor dx(x.shape());
      col2im3(dcol.data(), conv.in_c, ch, cw, dx.data());
      d_cur = std::move(dx);
    }
    d_next = std::move(d_cur);
  }
}

void swap_parameters(SegModel& a, SegModel& b) {
  if (!a.spec_.structurally_equal(b.spec_)) {
    throw IncompatibilityError("swap_parameters: backbone structures differ (plans or input size)");
  }
  auto pa = a.parameters();
  auto pb = b.parameters();
  if (pa.size() != pb.size()) {
    throw IncompatibilityError("swap_parameters: parameter counts differ");
  }
  for (size_t i = 0; i < pa.size(); ++i) {
    if (pa[i].name != pb[i].name || !pa[i].tensor->same_shape(*pb[i].tensor)) {
      throw IncompatibilityError("swap_parameters: first differing parameter \"" + pa[i].name +
                                 "\"");
    }
  }
  for (size_t i = 0; i < pa.size(); ++i) {
    pa[i].tensor->raw().swap(pb[i].tensor->raw());
  }
}

std::vector<MultiScaleOutput> forward_multiscale(const SegModel& model,
                                                 const std::vector<const Tensor*>& batch) {
  std::vector<MultiScaleOutput> out;
  out.reserve(batch.size());
  for (const Tensor* img : batch) out.push_back(model.forward(*img));
  return out;
}

}  // namespace ikdmil
