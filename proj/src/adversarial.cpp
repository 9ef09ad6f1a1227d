#include "mrigan/adversarial.hpp"

#include <cmath>
#include <numbers>
#include <stdexcept>

namespace mrigan::adv {

namespace {

Variable sobel_component(const Variable& image, bool horizontal) {
  // correlation kernels; magnitude is sign-invariant
  Tensor k({3, 3, 1, 1});
  const double gx[9] = {-1, 0, 1, -2, 0, 2, -1, 0, 1};
  const double gy[9] = {-1, -2, -1, 0, 0, 0, 1, 2, 1};
  for (long i = 0; i < 9; ++i) k[i] = horizontal ? gx[i] : gy[i];
  return conv2d(image, constant(k), Variable(), 1, Pad::Reflect);
}

void check_image(const Tensor& t, const char* who) {
  if (t.ndim() != 3 || t.dim(2) != 1)
    throw std::invalid_argument(std::string(who) + ": expects (H,W,1)");
  if (t.dim(0) < 3 || t.dim(1) < 3)
    throw std::invalid_argument(std::string(who) + ": image must be at least 3x3");
}

} // namespace

Variable sobel(const Variable& image) {
  check_image(image.value(), "sobel");
  return hypot_v(sobel_component(image, true), sobel_component(image, false));
}

Tensor sobel(const Tensor& image) {
  Tensor in = image.ndim() == 2 ? image.reshaped({image.dim(0), image.dim(1), 1}) : image;
  return sobel(constant(in)).value();
}

std::vector<GaborSpec> default_gabor_bank() {
  std::vector<GaborSpec> bank;
  for (double theta : {0.0, std::numbers::pi / 4, std::numbers::pi / 2, 3 * std::numbers::pi / 4})
    for (double f : {0.1, 0.2}) bank.push_back({theta, f, 2.5});
  return bank;
}

Tensor gabor_kernel(const GaborSpec& spec, long ksize) {
  if (ksize < 3 || ksize % 2 == 0) throw std::invalid_argument("gabor kernel size must be odd >= 3");
  long r = ksize / 2;
  Tensor k({ksize, ksize});
  double mean = 0.0;
  for (long i = 0; i < ksize; ++i)
    for (long j = 0; j < ksize; ++j) {
      double y = static_cast<double>(i - r);
      double x = static_cast<double>(j - r);
      double env = std::exp(-(x * x + y * y) / (2.0 * spec.sigma * spec.sigma));
      double phase = 2.0 * std::numbers::pi * spec.frequency *
                     (x * std::cos(spec.theta) + y * std::sin(spec.theta));
      k.at(i, j) = env * std::cos(phase);
      mean += k.at(i, j);
    }
  mean /= static_cast<double>(ksize * ksize);
  for (long i = 0; i < k.numel(); ++i) k[i] -= mean; // zero DC
  return k;
}

Variable gabor_bank(const Variable& image, const std::vector<GaborSpec>& bank, long ksize) {
  check_image(image.value(), "gabor_bank");
  if (bank.empty()) throw std::invalid_argument("gabor_bank: empty bank spec");
  Tensor kernels({ksize, ksize, 1, static_cast<long>(bank.size())});
  for (size_t b = 0; b < bank.size(); ++b) {
    Tensor k = gabor_kernel(bank[b], ksize);
    for (long i = 0; i < ksize; ++i)
      for (long j = 0; j < ksize; ++j) kernels.at(i, j, 0, static_cast<long>(b)) = k.at(i, j);
  }
  return conv2d(image, constant(kernels), Variable(), 1, Pad::Reflect);
}

Tensor gabor_bank(const Tensor& image, const std::vector<GaborSpec>& bank, long ksize) {
  Tensor in = image.ndim() == 2 ? image.reshaped({image.dim(0), image.dim(1), 1}) : image;
  return gabor_bank(constant(in), bank, ksize).value();
}

void DiscriminatorConfig::validate() const {
  if (base_channels < 1 || depth < 1 || input_channels < 1)
    throw std::invalid_argument("discriminator config fields must be positive");
  if (depth > 6) throw std::invalid_argument("discriminator depth is unreasonably large");
}

nlohmann::json DiscriminatorConfig::to_json() const {
  return nlohmann::json{{"base_channels", base_channels},
                        {"depth", depth},
                        {"input_channels", input_channels},
                        {"leaky_slope", leaky_slope}};
}

DiscriminatorConfig DiscriminatorConfig::from_json(const nlohmann::json& j) {
  DiscriminatorConfig c;
  c.base_channels = j.at("base_channels").get<long>();
  c.depth = j.at("depth").get<long>();
  c.input_channels = j.at("input_channels").get<long>();
  c.leaky_slope = j.at("leaky_slope").get<double>();
  c.validate();
  return c;
}

UNetDiscriminator::UNetDiscriminator(DiscriminatorConfig cfg, Rng& rng) : cfg_(std::move(cfg)) {
  cfg_.validate();
  long b = cfg_.base_channels;
  long cin = cfg_.input_channels;
  for (long d = 0; d < cfg_.depth; ++d) {
    long c_here = b << d;
    long c_prev = d == 0 ? cin : (b << (d - 1));
    long c_next = b << (d + 1);
    Level lv;
    std::string p = "level" + std::to_string(d);
    lv.in_w = params_.create(p + ".in.w", init_he_normal({3, 3, c_prev, c_here}, 9 * c_prev, rng));
    lv.in_b = params_.create(p + ".in.b", Tensor({c_here}));
    lv.down_w =
        params_.create(p + ".down.w", init_he_normal({3, 3, c_here, c_next}, 9 * c_here, rng));
    lv.down_b = params_.create(p + ".down.b", Tensor({c_next}));
    lv.up_w = params_.create(p + ".up.w", init_he_normal({3, 3, c_next, c_here}, 9 * c_next, rng));
    lv.up_b = params_.create(p + ".up.b", Tensor({c_here}));
    lv.fuse_w =
        params_.create(p + ".fuse.w", init_he_normal({3, 3, 2 * c_here, c_here}, 18 * c_here, rng));
    lv.fuse_b = params_.create(p + ".fuse.b", Tensor({c_here}));
    levels_.push_back(std::move(lv));
  }
  long cb = b << cfg_.depth;
  bottleneck_w_ = params_.create("bottleneck.w", init_he_normal({3, 3, cb, cb}, 9 * cb, rng));
  bottleneck_b_ = params_.create("bottleneck.b", Tensor({cb}));
  global_w_ = params_.create("global.w", init_he_normal({cb, 1}, cb, rng));
  global_b_ = params_.create("global.b", Tensor({1}));
  head_w_ = params_.create("head.w", init_he_normal({1, 1, b, 1}, b, rng));
  head_b_ = params_.create("head.b", Tensor({1}));
}

DiscriminatorOutput UNetDiscriminator::forward(const Variable& input) const {
  const Tensor& xv = input.value();
  if (xv.ndim() != 3 || xv.dim(2) != cfg_.input_channels)
    throw std::invalid_argument("discriminator input must be (H,W," +
                                std::to_string(cfg_.input_channels) + ")");
  long div = 1L << cfg_.depth;
  if (xv.dim(0) % div != 0 || xv.dim(1) % div != 0)
    throw std::invalid_argument("discriminator input dims must be divisible by 2^depth = " +
                                std::to_string(div));
  double slope = cfg_.leaky_slope;

  std::vector<Variable> skips;
  Variable x = input;
  for (const Level& lv : levels_) {
    x = leaky_relu(conv2d(x, lv.in_w, lv.in_b, 1, Pad::Zero), slope);
    skips.push_back(x);
    x = leaky_relu(conv2d(x, lv.down_w, lv.down_b, 2, Pad::Zero), slope);
  }
  x = leaky_relu(conv2d(x, bottleneck_w_, bottleneck_b_, 1, Pad::Zero), slope);

  Variable pooled = mean_hw(x); // (C_b)
  Variable global_logit = linear(reshape(pooled, {1, pooled.numel()}), global_w_, global_b_);
  global_logit = reshape(global_logit, {1});

  for (long d = cfg_.depth - 1; d >= 0; --d) {
    const Level& lv = levels_[static_cast<size_t>(d)];
    x = leaky_relu(conv2d(upsample2x(x), lv.up_w, lv.up_b, 1, Pad::Zero), slope);
    x = concat_last(x, skips[static_cast<size_t>(d)]);
    x = leaky_relu(conv2d(x, lv.fuse_w, lv.fuse_b, 1, Pad::Zero), slope);
  }
  Variable pixel_logits = conv2d(x, head_w_, head_b_, 1, Pad::Zero);

  Variable score = scale(add(mean_all(pixel_logits), global_logit), 0.5);
  return {pixel_logits, global_logit, score};
}

void UNetDiscriminator::save(const std::string& path, const std::string& role,
                             const std::string& dtype) const {
  if (role != "D1" && role != "D2-edge" && role != "D2-texture")
    throw std::invalid_argument("discriminator role must be D1, D2-edge or D2-texture");
  nlohmann::json meta;
  meta["role"] = role;
  meta["config"] = cfg_.to_json();
  ArchiveWriter w(meta);
  for (const auto& [name, var] : params_.items()) w.add(name, var.value(), dtype);
  w.write(path);
}

UNetDiscriminator UNetDiscriminator::load(const std::string& path) {
  ArchiveReader r(path);
  std::string role = r.header().value("role", "");
  if (role.rfind("D", 0) != 0) throw std::runtime_error("archive role is not a discriminator");
  DiscriminatorConfig cfg = DiscriminatorConfig::from_json(r.header().at("config"));
  Rng rng(0);
  UNetDiscriminator d(cfg, rng);
  d.params_.load_values("", r);
  return d;
}

D2Variant d2_variant_from_string(const std::string& s) {
  if (s == "edge") return D2Variant::Edge;
  if (s == "texture") return D2Variant::Texture;
  throw std::invalid_argument("unknown d2 variant: " + s);
}

std::string to_string(D2Variant v) { return v == D2Variant::Edge ? "edge" : "texture"; }

Variable d2_input(const Variable& image, D2Variant variant, const std::vector<GaborSpec>& bank) {
  return variant == D2Variant::Edge ? sobel(image) : gabor_bank(image, bank);
}

long d2_channels(D2Variant variant, const std::vector<GaborSpec>& bank) {
  return variant == D2Variant::Edge ? 1 : static_cast<long>(bank.size());
}

} // namespace mrigan::adv
