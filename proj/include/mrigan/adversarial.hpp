#pragma once

#include <string>
#include <vector>

#include <json.hpp>

#include "mrigan/archive.hpp"
#include "mrigan/autograd.hpp"
#include "mrigan/nn.hpp"
#include "mrigan/rng.hpp"

namespace mrigan::adv {

// Sobel gradient magnitude sqrt(Gx^2 + Gy^2), reflect-padded borders.
// Differentiable; the subgradient at exactly-zero magnitude is zero, so
// constant images map to exact zeros both forward and backward.
Variable sobel(const Variable& image); // (H,W,1) -> (H,W,1)
Tensor sobel(const Tensor& image);

struct GaborSpec {
  double theta;     // orientation, radians
  double frequency; // cycles per pixel
  double sigma;     // Gaussian envelope, pixels
};

// Orientations {0, pi/4, pi/2, 3pi/4} x frequencies {0.1, 0.2}, sigma 2.5.
std::vector<GaborSpec> default_gabor_bank();

// Real part of the Gabor kernel on a ksize x ksize grid, mean-subtracted so
// the response to constants is exactly zero.
Tensor gabor_kernel(const GaborSpec& spec, long ksize = 11);

// One output channel per bank entry; reflect padding.
Variable gabor_bank(const Variable& image, const std::vector<GaborSpec>& bank,
                    long ksize = 11); // (H,W,1) -> (H,W,K)
Tensor gabor_bank(const Tensor& image, const std::vector<GaborSpec>& bank, long ksize = 11);

struct DiscriminatorConfig {
  long base_channels = 32;
  long depth = 3; // encoder/decoder levels; input dims must divide 2^depth
  long input_channels = 1;
  double leaky_slope = 0.2;
  void validate() const;
  nlohmann::json to_json() const;
  static DiscriminatorConfig from_json(const nlohmann::json& j);
};

struct DiscriminatorOutput {
  Variable pixel_logits; // (H,W,1)
  Variable global_logit; // scalar
  Variable score;        // 0.5 * (mean(pixel_logits) + global_logit)
};

// U-Net real/fake critic: strided-conv encoder, bottleneck pooled to a global
// logit, nearest-upsampling decoder with skip connections to per-pixel logits.
class UNetDiscriminator {
public:
  UNetDiscriminator(DiscriminatorConfig cfg, Rng& rng);

  DiscriminatorOutput forward(const Variable& input) const;

  const DiscriminatorConfig& config() const { return cfg_; }
  ParamRegistry& params() { return params_; }
  const ParamRegistry& params() const { return params_; }

  void save(const std::string& path, const std::string& role,
            const std::string& dtype = "float32") const;
  static UNetDiscriminator load(const std::string& path);

private:
  DiscriminatorConfig cfg_;
  ParamRegistry params_;
  struct Level {
    Variable in_w, in_b;   // stride-1 conv at this scale
    Variable down_w, down_b; // stride-2 conv to the next scale
    Variable up_w, up_b;     // post-upsample conv
    Variable fuse_w, fuse_b; // conv after skip concat
  };
  std::vector<Level> levels_;
  Variable bottleneck_w_, bottleneck_b_;
  Variable global_w_, global_b_; // linear head on pooled bottleneck
  Variable head_w_, head_b_;     // 1x1 conv to pixel logits
};

enum class D2Variant { Edge, Texture };

D2Variant d2_variant_from_string(const std::string& s);
std::string to_string(D2Variant v);

// Input feed for the second discriminator: the operator map alone (Sobel for
// edge, Gabor bank for texture), no image concatenation.
Variable d2_input(const Variable& image, D2Variant variant,
                  const std::vector<GaborSpec>& bank = default_gabor_bank());
long d2_channels(D2Variant variant, const std::vector<GaborSpec>& bank = default_gabor_bank());

} // namespace mrigan::adv
