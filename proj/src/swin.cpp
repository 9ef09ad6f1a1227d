#include "mrigan/swin.hpp"

#include <cmath>
#include <map>
#include <mutex>
#include <stdexcept>
#include <tuple>

namespace mrigan::swin {

void GeneratorConfig::validate() const {
  if (num_rstb < 1 || stl_per_rstb < 1) throw std::invalid_argument("block counts must be positive");
  if (embed_dim < 1 || window_size < 1 || num_heads < 1)
    throw std::invalid_argument("embed_dim, window_size, num_heads must be positive");
  if (embed_dim % num_heads != 0)
    throw std::invalid_argument("embed_dim must be divisible by num_heads");
  if (mlp_ratio <= 0.0) throw std::invalid_argument("mlp_ratio must be positive");
  if (input_h % window_size != 0 || input_w % window_size != 0)
    throw std::invalid_argument("input size must be divisible by window_size");
}

nlohmann::json GeneratorConfig::to_json() const {
  return nlohmann::json{{"num_rstb", num_rstb},    {"stl_per_rstb", stl_per_rstb},
                        {"embed_dim", embed_dim},  {"window_size", window_size},
                        {"num_heads", num_heads},  {"mlp_ratio", mlp_ratio},
                        {"input_h", input_h},      {"input_w", input_w}};
}

GeneratorConfig GeneratorConfig::from_json(const nlohmann::json& j) {
  GeneratorConfig c;
  c.num_rstb = j.at("num_rstb").get<long>();
  c.stl_per_rstb = j.at("stl_per_rstb").get<long>();
  c.embed_dim = j.at("embed_dim").get<long>();
  c.window_size = j.at("window_size").get<long>();
  c.num_heads = j.at("num_heads").get<long>();
  c.mlp_ratio = j.at("mlp_ratio").get<double>();
  c.input_h = j.at("input_h").get<long>();
  c.input_w = j.at("input_w").get<long>();
  c.validate();
  return c;
}

TokenSequence patch_embed(const FeatureMap& f) {
  return {reshape(f.v, {f.h * f.w, f.c}), f.h, f.w};
}

FeatureMap patch_unembed(const TokenSequence& t, long c) {
  return {reshape(t.v, {t.h, t.w, c}), t.h, t.w, c};
}

namespace {

using IdxPtr = std::shared_ptr<const std::vector<long>>;

void check_divisible(long h, long w, long window) {
  if (window < 1 || h % window != 0 || w % window != 0)
    throw std::invalid_argument("spatial dims " + std::to_string(h) + "x" + std::to_string(w) +
                                " not divisible by window size " + std::to_string(window));
}

// Token index map fusing the cyclic shift with window partitioning: output
// token o belongs to window o/T at in-window slot o%T; the source token is
// looked up in the unshifted frame.
IdxPtr window_gather_index(long h, long w, long window, long shift) {
  long t = window * window;
  long nw_w = w / window;
  auto idx = std::make_shared<std::vector<long>>(static_cast<size_t>(h * w));
  for (long o = 0; o < h * w; ++o) {
    long n = o / t, slot = o % t;
    long wi = n / nw_w, wj = n % nw_w;
    long i = wi * window + slot / window;
    long j = wj * window + slot % window;
    (*idx)[static_cast<size_t>(o)] = ((i + shift) % h) * w + (j + shift) % w;
  }
  return idx;
}

IdxPtr invert_index(const IdxPtr& fwd) {
  auto inv = std::make_shared<std::vector<long>>(fwd->size());
  for (size_t i = 0; i < fwd->size(); ++i) (*inv)[static_cast<size_t>((*fwd)[i])] = static_cast<long>(i);
  return inv;
}

struct WindowMaps {
  IdxPtr gather;
  IdxPtr reverse;
  Tensor mask; // (nw, T, T); zero tensor when shift == 0
};

const WindowMaps& window_maps(long h, long w, long window, long shift) {
  static std::map<std::tuple<long, long, long, long>, WindowMaps> cache;
  static std::mutex mtx;
  std::lock_guard<std::mutex> lock(mtx);
  auto key = std::make_tuple(h, w, window, shift);
  auto it = cache.find(key);
  if (it != cache.end()) return it->second;
  WindowMaps maps;
  maps.gather = window_gather_index(h, w, window, shift);
  maps.reverse = invert_index(maps.gather);
  maps.mask = shifted_window_mask(h, w, window, shift);
  return cache.emplace(key, std::move(maps)).first->second;
}

// Flat index maps for head splitting/merging, cached per geometry.
enum class HeadOp { Q = 0, K = 1, V = 2, Merge = 3 };

IdxPtr head_index(long nw, long t, long heads, long dh, HeadOp op) {
  static std::map<std::tuple<long, long, long, long, int>, IdxPtr> cache;
  static std::mutex mtx;
  std::lock_guard<std::mutex> lock(mtx);
  auto key = std::make_tuple(nw, t, heads, dh, static_cast<int>(op));
  auto it = cache.find(key);
  if (it != cache.end()) return it->second;
  long c = heads * dh;
  auto idx = std::make_shared<std::vector<long>>(static_cast<size_t>(nw * t * c));
  size_t p = 0;
  if (op == HeadOp::Merge) {
    // (nw*T, C) <- (nw*heads, T, dh)
    for (long n = 0; n < nw; ++n)
      for (long tok = 0; tok < t; ++tok)
        for (long hh = 0; hh < heads; ++hh)
          for (long d = 0; d < dh; ++d) (*idx)[p++] = ((n * heads + hh) * t + tok) * dh + d;
  } else {
    // (nw*heads, T, dh) <- rows of the packed qkv (nw*T, 3C)
    long which = static_cast<long>(op);
    for (long n = 0; n < nw; ++n)
      for (long hh = 0; hh < heads; ++hh)
        for (long tok = 0; tok < t; ++tok)
          for (long d = 0; d < dh; ++d)
            (*idx)[p++] = (n * t + tok) * 3 * c + which * c + hh * dh + d;
  }
  cache[key] = idx;
  return idx;
}

// Relative-position-bias gather: (heads, T, T) from the (2w-1)^2 x heads table.
IdxPtr rel_bias_index(long window, long heads) {
  static std::map<std::pair<long, long>, IdxPtr> cache;
  static std::mutex mtx;
  std::lock_guard<std::mutex> lock(mtx);
  auto key = std::make_pair(window, heads);
  auto it = cache.find(key);
  if (it != cache.end()) return it->second;
  long t = window * window;
  long span = 2 * window - 1;
  auto idx = std::make_shared<std::vector<long>>(static_cast<size_t>(heads * t * t));
  size_t p = 0;
  for (long hh = 0; hh < heads; ++hh)
    for (long a = 0; a < t; ++a)
      for (long b = 0; b < t; ++b) {
        long di = a / window - b / window + window - 1;
        long dj = a % window - b % window + window - 1;
        (*idx)[p++] = (di * span + dj) * heads + hh;
      }
  cache[key] = idx;
  return idx;
}

} // namespace

std::shared_ptr<const std::vector<long>> shifted_partition_index(long h, long w, long window,
                                                                 long shift) {
  check_divisible(h, w, window);
  if (shift >= window || shift < 0)
    throw std::invalid_argument("shift must satisfy 0 <= shift < window");
  return window_maps(h, w, window, shift).gather;
}

Tensor window_partition(const Tensor& features, long window) {
  if (features.ndim() != 3) throw std::invalid_argument("window_partition expects (H,W,C)");
  long h = features.dim(0), w = features.dim(1), c = features.dim(2);
  check_divisible(h, w, window);
  long t = window * window, nw = (h / window) * (w / window);
  const auto& idx = *window_maps(h, w, window, 0).gather;
  Tensor out({nw, t, c});
  for (long o = 0; o < nw * t; ++o)
    for (long k = 0; k < c; ++k) out[o * c + k] = features[idx[static_cast<size_t>(o)] * c + k];
  return out;
}

Tensor window_reverse(const Tensor& windows, long window, long h, long w) {
  if (windows.ndim() != 3) throw std::invalid_argument("window_reverse expects (nw,T,C)");
  check_divisible(h, w, window);
  long t = window * window, c = windows.dim(2);
  if (windows.dim(0) * t != h * w || windows.dim(1) != t)
    throw std::invalid_argument("window_reverse: window count does not match target size");
  const auto& idx = *window_maps(h, w, window, 0).reverse;
  Tensor out({h, w, c});
  for (long o = 0; o < h * w; ++o)
    for (long k = 0; k < c; ++k) out[o * c + k] = windows[idx[static_cast<size_t>(o)] * c + k];
  return out;
}

Tensor shifted_window_mask(long h, long w, long window, long shift) {
  check_divisible(h, w, window);
  if (shift >= window || shift < 0)
    throw std::invalid_argument("shift must satisfy 0 <= shift < window");
  long t = window * window;
  long nw = (h / window) * (w / window);
  Tensor mask({nw, t, t});
  if (shift == 0) return mask;

  // Pre-shift region bands along each axis: [0, N-w), [N-w, N-s), [N-s, N).
  auto band = [&](long i, long n) { return i < n - window ? 0 : (i < n - shift ? 1 : 2); };
  std::vector<long> rolled_id(static_cast<size_t>(h * w));
  for (long i = 0; i < h; ++i)
    for (long j = 0; j < w; ++j) {
      long si = (i + shift) % h, sj = (j + shift) % w;
      rolled_id[static_cast<size_t>(i * w + j)] = 3 * band(si, h) + band(sj, w);
    }
  long nw_w = w / window;
  for (long n = 0; n < nw; ++n) {
    long wi = n / nw_w, wj = n % nw_w;
    for (long a = 0; a < t; ++a)
      for (long b = 0; b < t; ++b) {
        long ia = wi * window + a / window, ja = wj * window + a % window;
        long ib = wi * window + b / window, jb = wj * window + b % window;
        if (rolled_id[static_cast<size_t>(ia * w + ja)] !=
            rolled_id[static_cast<size_t>(ib * w + jb)])
          mask.at(n, a, b) = -1e9;
      }
  }
  return mask;
}

Variable windowed_attention(const Variable& tokens, const AttentionParams& p, long nw,
                            long window, long num_heads, const Tensor* mask,
                            AttentionProbe* probe) {
  long t = window * window;
  long c = tokens.value().dim(1);
  if (tokens.value().dim(0) != nw * t)
    throw std::invalid_argument("windowed_attention: token count does not match windows");
  if (c % num_heads != 0) throw std::invalid_argument("channels not divisible by heads");
  if (mask && (mask->ndim() != 3 || mask->dim(0) != nw || mask->dim(1) != t || mask->dim(2) != t))
    throw std::invalid_argument("windowed_attention: mask shape mismatch");
  long dh = c / num_heads;

  Variable qkv = linear(tokens, p.wqkv, p.bqkv); // (nw*T, 3C)
  Variable q = gather_flat(qkv, head_index(nw, t, num_heads, dh, HeadOp::Q), {nw * num_heads, t, dh});
  Variable k = gather_flat(qkv, head_index(nw, t, num_heads, dh, HeadOp::K), {nw * num_heads, t, dh});
  Variable v = gather_flat(qkv, head_index(nw, t, num_heads, dh, HeadOp::V), {nw * num_heads, t, dh});

  q = scale(q, 1.0 / std::sqrt(static_cast<double>(dh)));
  Variable scores = bmm(q, k, false, true); // (nw*heads, T, T)
  Variable bias = gather_flat(p.bias_table, rel_bias_index(window, num_heads),
                              {num_heads, t, t});
  scores = add_bias_heads(scores, bias, num_heads);
  if (mask) scores = add_window_mask(scores, *mask, num_heads);
  Variable probs = softmax_lastdim(scores);
  if (probe) probe->probs.push_back(probs.value());
  Variable ctx = bmm(probs, v); // (nw*heads, T, dh)
  return gather_flat(ctx, head_index(nw, t, num_heads, dh, HeadOp::Merge), {nw * t, c});
}

StlParams make_stl_params(ParamRegistry& reg, const std::string& prefix,
                          const GeneratorConfig& cfg, Rng& rng) {
  long c = cfg.embed_dim;
  long span = 2 * cfg.window_size - 1;
  StlParams p;
  p.ln1_g = reg.create(prefix + ".ln1.g", Tensor::full({c}, 1.0));
  p.ln1_b = reg.create(prefix + ".ln1.b", Tensor({c}));
  p.attn.wqkv = reg.create(prefix + ".attn.wqkv", init_trunc_normal({c, 3 * c}, rng));
  p.attn.bqkv = reg.create(prefix + ".attn.bqkv", Tensor({3 * c}));
  p.attn.bias_table =
      reg.create(prefix + ".attn.bias_table", Tensor({span * span, cfg.num_heads}));
  p.proj_w = reg.create(prefix + ".attn.proj.w", init_trunc_normal({c, c}, rng));
  p.proj_b = reg.create(prefix + ".attn.proj.b", Tensor({c}));
  p.ln2_g = reg.create(prefix + ".ln2.g", Tensor::full({c}, 1.0));
  p.ln2_b = reg.create(prefix + ".ln2.b", Tensor({c}));
  long hidden = cfg.mlp_hidden();
  p.mlp_w1 = reg.create(prefix + ".mlp.w1", init_trunc_normal({c, hidden}, rng));
  p.mlp_b1 = reg.create(prefix + ".mlp.b1", Tensor({hidden}));
  p.mlp_w2 = reg.create(prefix + ".mlp.w2", init_trunc_normal({hidden, c}, rng));
  p.mlp_b2 = reg.create(prefix + ".mlp.b2", Tensor({c}));
  return p;
}

RstbParams make_rstb_params(ParamRegistry& reg, const std::string& prefix,
                            const GeneratorConfig& cfg, Rng& rng) {
  RstbParams p;
  for (long i = 0; i < cfg.stl_per_rstb; ++i)
    p.stls.push_back(make_stl_params(reg, prefix + ".stl" + std::to_string(i), cfg, rng));
  long c = cfg.embed_dim;
  p.conv_w = reg.create(prefix + ".conv.w", init_trunc_normal({3, 3, c, c}, rng));
  p.conv_b = reg.create(prefix + ".conv.b", Tensor({c}));
  return p;
}

TokenSequence stl_forward(const TokenSequence& tokens, const StlParams& p,
                          const GeneratorConfig& cfg, long layer_index, AttentionProbe* probe) {
  long h = tokens.h, w = tokens.w;
  check_divisible(h, w, cfg.window_size);
  long shift = (layer_index % 2 == 0) ? 0 : cfg.shift();
  // A window that spans the whole axis makes shifting a no-op.
  if (h == cfg.window_size && w == cfg.window_size) shift = 0;
  const WindowMaps& maps = window_maps(h, w, cfg.window_size, shift);
  long t = cfg.window_size * cfg.window_size;
  long nw = (h / cfg.window_size) * (w / cfg.window_size);

  Variable x = tokens.v;
  Variable norm1 = layer_norm(x, p.ln1_g, p.ln1_b);
  Variable win = gather_rows(norm1, maps.gather, h * w);
  Variable attn = windowed_attention(win, p.attn, nw, cfg.window_size, cfg.num_heads,
                                     shift > 0 ? &maps.mask : nullptr, probe);
  attn = linear(attn, p.proj_w, p.proj_b);
  Variable back = gather_rows(attn, maps.reverse, h * w);
  x = add(x, back);

  Variable norm2 = layer_norm(x, p.ln2_g, p.ln2_b);
  Variable hidden = gelu(linear(norm2, p.mlp_w1, p.mlp_b1));
  Variable out = linear(hidden, p.mlp_w2, p.mlp_b2);
  return {add(x, out), h, w};
}

FeatureMap rstb_forward(const FeatureMap& features, const RstbParams& p,
                        const GeneratorConfig& cfg, AttentionProbe* probe) {
  TokenSequence t = patch_embed(features);
  for (size_t i = 0; i < p.stls.size(); ++i)
    t = stl_forward(t, p.stls[i], cfg, static_cast<long>(i), probe);
  FeatureMap f = patch_unembed(t, features.c);
  Variable conv = conv2d(f.v, p.conv_w, p.conv_b, 1, Pad::Zero);
  return {add(features.v, conv), features.h, features.w, features.c};
}

SwinGenerator::SwinGenerator(GeneratorConfig cfg, Rng& rng, bool zero_output_kernel)
    : cfg_(std::move(cfg)) {
  cfg_.validate();
  long c = cfg_.embed_dim;
  im_w_ = params_.create("im.w", init_trunc_normal({3, 3, 1, c}, rng));
  im_b_ = params_.create("im.b", Tensor({c}));
  for (long i = 0; i < cfg_.num_rstb; ++i)
    rstbs_.push_back(make_rstb_params(params_, "rstb" + std::to_string(i), cfg_, rng));
  om_w_ = params_.create("om.w", zero_output_kernel ? Tensor({3, 3, c, 1})
                                                    : init_trunc_normal({3, 3, c, 1}, rng));
  om_b_ = params_.create("om.b", Tensor({1}));
}

Variable SwinGenerator::forward(const Variable& x, AttentionProbe* probe) const {
  const Tensor& xv = x.value();
  if (xv.ndim() != 3 || xv.dim(2) != 1)
    throw std::invalid_argument("generator input must be (H,W,1)");
  long h = xv.dim(0), w = xv.dim(1);
  if (h % cfg_.window_size != 0 || w % cfg_.window_size != 0)
    throw std::invalid_argument(
        "generator input " + std::to_string(h) + "x" + std::to_string(w) +
        " is not divisible by the window size " + std::to_string(cfg_.window_size));
  FeatureMap f{conv2d(x, im_w_, im_b_, 1, Pad::Zero), h, w, cfg_.embed_dim};
  for (const auto& rstb : rstbs_) f = rstb_forward(f, rstb, cfg_, probe);
  Variable y = conv2d(f.v, om_w_, om_b_, 1, Pad::Zero);
  return add(y, x);
}

Tensor SwinGenerator::reconstruct(const Tensor& x) const {
  Tensor in = x.ndim() == 2 ? x.reshaped({x.dim(0), x.dim(1), 1}) : x;
  return forward(constant(in)).value().reshaped({in.dim(0), in.dim(1)});
}

void SwinGenerator::save(const std::string& path, const std::string& dtype) const {
  nlohmann::json meta;
  meta["role"] = "G";
  meta["config"] = cfg_.to_json();
  ArchiveWriter w(meta);
  for (const auto& [name, var] : params_.items()) w.add(name, var.value(), dtype);
  w.write(path);
}

SwinGenerator SwinGenerator::load(const std::string& path) {
  ArchiveReader r(path);
  if (r.header().value("role", "") != "G")
    throw std::runtime_error("archive role is not G: " + path);
  GeneratorConfig cfg = GeneratorConfig::from_json(r.header().at("config"));
  Rng rng(0); // init values are immediately overwritten
  SwinGenerator g(cfg, rng);
  g.params_.load_values("", r);
  return g;
}

} // namespace mrigan::swin
