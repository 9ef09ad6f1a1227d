#pragma once

#include <string>
#include <vector>

#include <json.hpp>

#include "mrigan/archive.hpp"
#include "mrigan/autograd.hpp"
#include "mrigan/nn.hpp"
#include "mrigan/rng.hpp"

namespace mrigan::swin {

struct GeneratorConfig {
  long num_rstb = 6;
  long stl_per_rstb = 6;
  long embed_dim = 180;   // C
  long window_size = 8;   // w
  long num_heads = 6;
  double mlp_ratio = 2.0;
  long input_h = 256;
  long input_w = 256;

  long head_dim() const { return embed_dim / num_heads; }
  long mlp_hidden() const { return std::lround(mlp_ratio * static_cast<double>(embed_dim)); }
  long shift() const { return window_size / 2; }
  void validate() const;

  nlohmann::json to_json() const;
  static GeneratorConfig from_json(const nlohmann::json& j);
};

// Spatial feature tensor (H, W, C) moving through the RSTB trunk.
struct FeatureMap {
  Variable v;
  long h = 0, w = 0, c = 0;
};

// Token view (H*W, C) of a feature map; origin shape kept for unembedding.
struct TokenSequence {
  Variable v;
  long h = 0, w = 0;
};

TokenSequence patch_embed(const FeatureMap& f);
FeatureMap patch_unembed(const TokenSequence& t, long c);

// Non-overlapping row-major w x w tiling: (H, W, C) -> (num_windows, w*w, C).
Tensor window_partition(const Tensor& features, long window);
Tensor window_reverse(const Tensor& windows, long window, long h, long w);

// Additive attention masks for cyclically shifted windows: (nw, w*w, w*w),
// 0 where both tokens come from the same pre-shift region, -1e9 otherwise.
// shift == 0 yields all zeros.
Tensor shifted_window_mask(long h, long w, long window, long shift);

// Token index map fusing the (-shift,-shift) cyclic roll with window
// partitioning; gather_rows with this map turns an (H*W, C) sequence into the
// window-major shifted sequence.
std::shared_ptr<const std::vector<long>> shifted_partition_index(long h, long w, long window,
                                                                 long shift);

struct AttentionParams {
  Variable wqkv;       // C x 3C
  Variable bqkv;       // 3C
  Variable bias_table; // (2w-1)^2 x heads, indexed by relative offset
};

// Collects per-layer attention probabilities (nw*heads, T, T) when attached.
struct AttentionProbe {
  std::vector<Tensor> probs;
};

// Multi-head self-attention over non-overlapping windows: per head
// softmax(Q K^T / sqrt(dh) + B [+ mask]) V, heads merged back to (nw*T, C).
// tokens are the window-partitioned sequence (nw*T, C); the additive mask
// (nullable) is broadcast over heads before the softmax. The STL applies the
// output projection separately.
Variable windowed_attention(const Variable& tokens, const AttentionParams& p, long nw,
                            long window, long num_heads, const Tensor* mask,
                            AttentionProbe* probe = nullptr);

struct StlParams {
  Variable ln1_g, ln1_b;
  AttentionParams attn;
  Variable proj_w, proj_b; // attention output projection
  Variable ln2_g, ln2_b;
  Variable mlp_w1, mlp_b1, mlp_w2, mlp_b2;
};

struct RstbParams {
  std::vector<StlParams> stls;
  Variable conv_w, conv_b;
};

StlParams make_stl_params(ParamRegistry& reg, const std::string& prefix,
                          const GeneratorConfig& cfg, Rng& rng);
RstbParams make_rstb_params(ParamRegistry& reg, const std::string& prefix,
                            const GeneratorConfig& cfg, Rng& rng);

// One Swin transformer layer: pre-norm attention and MLP, both residual.
// Even layer_index uses plain windows, odd uses the w/2 cyclic shift.
TokenSequence stl_forward(const TokenSequence& tokens, const StlParams& p,
                          const GeneratorConfig& cfg, long layer_index,
                          AttentionProbe* probe = nullptr);

// STL stack in token space, tail convolution, residual add.
FeatureMap rstb_forward(const FeatureMap& features, const RstbParams& p,
                        const GeneratorConfig& cfg, AttentionProbe* probe = nullptr);

// Input conv -> RSTB cascade -> output conv, with the global input residual.
class SwinGenerator {
public:
  SwinGenerator(GeneratorConfig cfg, Rng& rng, bool zero_output_kernel = true);

  Variable forward(const Variable& x, AttentionProbe* probe = nullptr) const;
  Tensor reconstruct(const Tensor& x) const; // forward without gradient tracking

  const GeneratorConfig& config() const { return cfg_; }
  ParamRegistry& params() { return params_; }
  const ParamRegistry& params() const { return params_; }

  void save(const std::string& path, const std::string& dtype = "float32") const;
  static SwinGenerator load(const std::string& path);

private:
  GeneratorConfig cfg_;
  ParamRegistry params_;
  Variable im_w_, im_b_, om_w_, om_b_;
  std::vector<RstbParams> rstbs_;
};

} // namespace mrigan::swin
