#pragma once

#include <string>
#include <vector>

#include "ikdmil/losses.hpp"
#include "ikdmil/tensor.hpp"

namespace ikdmil {

// Backbone description. The default mirrors the first three convolutional
// blocks of VGG16 (3x3 convs + ReLU, one 2x max-pool per block); any plan
// with >= 2 blocks is accepted so other MIL backbones can plug in.
struct BackboneSpec {
  std::string name = "vgg16-first3";
  std::vector<std::vector<int>> block_channel_plan;  // empty -> preset by name
  int input_size = 256;

  // Fills block_channel_plan from the named preset when empty.
  // Unknown name with no explicit plan is a configuration error.
  void resolve();
  void validate() const;
  int block_count() const { return static_cast<int>(block_channel_plan.size()); }
  bool structurally_equal(const BackboneSpec& o) const;
};

// Learnable fusion of per-block maps. Effective weights are
// softmax(logits): strictly positive and summing to one, so the fused map
// stays a convex combination inside [0,1].
struct FusionWeights {
  Tensor logits;  // length = block count

  std::vector<double> weights() const;
};

ProbMap fuse_maps(const std::vector<ProbMap>& per_block, const FusionWeights& weights);

// Gradient of a scalar loss w.r.t. the fusion logits, given the gradient on
// the fused map and the (fixed) per-block maps it combined.
Tensor fusion_logit_grad(const std::vector<ProbMap>& per_block, const FusionWeights& weights,
                         const ProbMap& d_fused);

// Per-image activation cache kept for the backward pass.
struct ForwardCache;

// Accumulator for parameter gradients, aligned with SegModel::parameters().
struct GradStore {
  std::vector<Tensor> grads;

  void scale(float s);
  void clear();
};

// Multi-scale segmentation network: feature blocks, a 1x1 single-channel
// prediction head per block (sigmoid at block resolution, then corner-
// aligned bilinear upsampling to input size), and softmax-fused output.
class SegModel {
 public:
  struct NamedParam {
    std::string name;
    Tensor* tensor;
  };
  struct ConstNamedParam {
    std::string name;
    const Tensor* tensor;
  };

  // An empty model; usable only as an assignment target.
  SegModel() = default;

  static SegModel build(const BackboneSpec& spec, uint64_t seed);

  const BackboneSpec& spec() const { return spec_; }
  int block_count() const { return static_cast<int>(blocks_.size()); }
  int head_count() const { return static_cast<int>(heads_.size()); }
  // Spatial upsampling factor applied to each head's map (2, 4, 8, ...).
  std::vector<int> upsample_factors() const;

  std::vector<NamedParam> parameters();
  std::vector<ConstNamedParam> parameters() const;
  size_t parameter_count() const;
  std::string parameter_checksum() const;

  FusionWeights& fusion() { return fusion_; }
  const FusionWeights& fusion() const { return fusion_; }

  MultiScaleOutput forward(const Tensor& image) const;
  MultiScaleOutput forward(const Tensor& image, ForwardCache& cache) const;

  // Chains map-space gradients (per-block + fused) back to parameter
  // gradients, accumulating into `grads`. Fusion logits receive gradient
  // only when `logit_grads` is set (they are trained in a separate phase).
  void backward(const ForwardCache& cache, const std::vector<ProbMap>& d_blocks,
                const ProbMap& d_fused, GradStore& grads, bool logit_grads = false) const;

  GradStore make_grad_store() const;

 private:
  friend void swap_parameters(SegModel& a, SegModel& b);

  struct Conv {
    int in_c = 0, out_c = 0, k = 3;
    Tensor w;  // {out_c, in_c*k*k}
    Tensor b;  // {out_c}
  };

  void check_input(const Tensor& image) const;

  BackboneSpec spec_;
  std::vector<std::vector<Conv>> blocks_;
  std::vector<Conv> heads_;
  FusionWeights fusion_;
};

// Exchanges the two parameter stores exactly (fusion logits included).
// Models must be structurally identical; the first differing parameter is
// named in the error.
void swap_parameters(SegModel& a, SegModel& b);

SegModel build_backbone(const BackboneSpec& spec, uint64_t seed);

// Batch forward: one MultiScaleOutput per image. All images must match the
// model's input size.
std::vector<MultiScaleOutput> forward_multiscale(const SegModel& model,
                                                 const std::vector<const Tensor*>& batch);

struct ForwardCache {
  struct BlockCache {
    std::vector<Tensor> conv_in;   // input of each conv
    std::vector<Tensor> conv_out;  // post-ReLU output of each conv
    Tensor pool_out;
    std::vector<int> pool_argmax;  // flat index into the pre-pool tensor
  };
  struct HeadCache {
    Grid<float> sig;  // sigmoid output at block resolution
  };
  std::vector<BlockCache> blocks;
  std::vector<HeadCache> heads;
};

}  // namespace ikdmil
