#include "fluorotask/model.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "fluorotask/ops.hpp"
#include "fluorotask/rng.hpp"

namespace fluorotask {

namespace {

constexpr double kCenterBiasInit = -2.1972245773362196;  // sigmoid -> 0.1
constexpr double kSizeBiasInit = 6.5;                    // typical box extent in px

int product(const std::vector<int>& v) {
  int p = 1;
  for (int x : v) p *= x;
  return p;
}

}  // namespace

void NetworkConfig::validate() const {
  if (input_h < 16 || input_w < 16 || input_h % 16 != 0 || input_w % 16 != 0) {
    throw std::invalid_argument("network: input size " + std::to_string(input_h) + "x" +
                                std::to_string(input_w) + " must be divisible by 16");
  }
  if (base_channels < 1 || latent_dim < 1 || head_channels < 1) {
    throw std::invalid_argument("network: channel widths must be positive");
  }
  if (stages.size() != 4 || product(stages) != 16 ||
      std::any_of(stages.begin(), stages.end(), [](int s) { return s != 1 && s != 2; })) {
    throw std::invalid_argument(
        "network: stage stride schedule must be four stride-1/2 entries whose product is 16");
  }
  if (normalization != "none" && normalization != "instance") {
    throw std::invalid_argument("network: normalization must be 'none' or 'instance'");
  }
}

void to_json(nlohmann::json& j, const NetworkConfig& cfg) {
  j = nlohmann::json{{"input_h", cfg.input_h},
                     {"input_w", cfg.input_w},
                     {"base_channels", cfg.base_channels},
                     {"latent_dim", cfg.latent_dim},
                     {"head_channels", cfg.head_channels},
                     {"stages", cfg.stages},
                     {"normalization", cfg.normalization},
                     {"attn_bias_init", cfg.attn_bias_init}};
}

void from_json(const nlohmann::json& j, NetworkConfig& cfg) {
  NetworkConfig d;
  cfg.input_h = j.value("input_h", d.input_h);
  cfg.input_w = j.value("input_w", d.input_w);
  cfg.base_channels = j.value("base_channels", d.base_channels);
  cfg.latent_dim = j.value("latent_dim", d.latent_dim);
  cfg.head_channels = j.value("head_channels", d.head_channels);
  cfg.stages = j.value("stages", d.stages);
  cfg.normalization = j.value("normalization", d.normalization);
  cfg.attn_bias_init = j.value("attn_bias_init", d.attn_bias_init);
}

TaskMode task_mode_from_string(const std::string& s) {
  if (s == "detect") return TaskMode::kDetect;
  if (s == "segment") return TaskMode::kSegment;
  if (s == "both") return TaskMode::kBoth;
  throw std::invalid_argument("unknown task mode '" + s + "' (detect|segment|both)");
}

std::string to_string(TaskMode mode) {
  switch (mode) {
    case TaskMode::kDetect: return "detect";
    case TaskMode::kSegment: return "segment";
    default: return "both";
  }
}

MultiTaskNet::Conv MultiTaskNet::make_conv(const std::string& name, const std::string& group,
                                           int in_ch, int out_ch, int k, int stride,
                                           int padding, double bias_init, double gain,
                                           RngStream& rng) {
  Conv c;
  const int fan_in = in_ch * k * k;
  const double stddev = std::sqrt(gain / fan_in);
  c.w = Tensor({out_ch, in_ch, k, k}, /*requires_grad=*/true);
  double* wd = c.w.data();
  for (std::int64_t i = 0; i < c.w.numel(); ++i) wd[i] = rng.normal(0.0, stddev);
  c.b = Tensor::full({out_ch}, bias_init, /*requires_grad=*/true);
  c.stride = stride;
  c.padding = padding;
  params_.emplace_back(name + ".w", c.w);
  params_.emplace_back(name + ".b", c.b);
  auto& bucket = group == "detect" ? detect_ : (group == "segment" ? segment_ : shared_);
  bucket.emplace_back(name + ".w", c.w);
  bucket.emplace_back(name + ".b", c.b);
  return c;
}

MultiTaskNet::MultiTaskNet(NetworkConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)) {
  cfg_.validate();
  RngStream rng(derive_seed(seed, "model"));
  const int b = cfg_.base_channels;
  const int widths[4] = {b, 2 * b, 4 * b, 8 * b};

  int in_ch = 1;
  for (int s = 0; s < 4; ++s) {
    const int out_ch = widths[s];
    const int stride = cfg_.stages[s];
    const std::string base = "enc.s" + std::to_string(s + 1);
    enc_.push_back(make_conv(base + ".b1.c1", "shared", in_ch, out_ch, 3, stride, 1, 0.0, 2.0, rng));
    enc_.push_back(make_conv(base + ".b1.c2", "shared", out_ch, out_ch, 3, 1, 1, 0.0, 2.0, rng));
    enc_.push_back(make_conv(base + ".b2.c1", "shared", out_ch, out_ch, 3, 1, 1, 0.0, 2.0, rng));
    enc_.push_back(make_conv(base + ".b2.c2", "shared", out_ch, out_ch, 3, 1, 1, 0.0, 2.0, rng));
    enc_skip_.push_back(make_conv(base + ".skip", "shared", in_ch, out_ch, 1, stride, 0, 0.0, 1.0, rng));
    in_ch = out_ch;
  }
  proj_ = make_conv("proj", "shared", widths[3], cfg_.latent_dim, 3, 1, 1, 0.0, 1.0, rng);

  const int reduced = std::max(1, cfg_.latent_dim / 4);
  attn_reduce_ = make_conv("attn.ch.reduce", "shared", cfg_.latent_dim, reduced, 1, 1, 0, 0.0, 2.0, rng);
  attn_expand_ = make_conv("attn.ch.expand", "shared", reduced, cfg_.latent_dim, 1, 1, 0,
                           cfg_.attn_bias_init, 1.0, rng);
  attn_spatial_ = make_conv("attn.sp", "shared", 2, 1, 3, 1, 1, cfg_.attn_bias_init, 1.0, rng);

  dec_conv_[0] = make_conv("dec.s1.conv", "shared", cfg_.latent_dim, widths[2], 3, 1, 1, 0.0, 2.0, rng);
  dec_skip_[0] = make_conv("dec.s1.skip", "shared", widths[2], widths[2], 1, 1, 0, 0.0, 1.0, rng);
  dec_conv_[1] = make_conv("dec.s2.conv", "shared", widths[2], widths[1], 3, 1, 1, 0.0, 2.0, rng);
  dec_skip_[1] = make_conv("dec.s2.skip", "shared", widths[1], widths[1], 1, 1, 0, 0.0, 1.0, rng);

  const int hc = cfg_.head_channels;
  const int u_ch = widths[1];
  head_center_[0] = make_conv("head.center.c1", "detect", u_ch, hc, 3, 1, 1, 0.0, 2.0, rng);
  head_center_[1] = make_conv("head.center.c2", "detect", hc, hc, 3, 1, 1, 0.0, 2.0, rng);
  head_center_[2] = make_conv("head.center.out", "detect", hc, 1, 1, 1, 0, kCenterBiasInit, 1.0, rng);
  head_size_[0] = make_conv("head.size.c1", "detect", u_ch, hc, 3, 1, 1, 0.0, 2.0, rng);
  head_size_[1] = make_conv("head.size.c2", "detect", hc, hc, 3, 1, 1, 0.0, 2.0, rng);
  head_size_[2] = make_conv("head.size.out", "detect", hc, 2, 1, 1, 0, kSizeBiasInit, 1.0, rng);
  head_seg_[0] = make_conv("head.seg.c1", "segment", u_ch, hc, 3, 1, 1, 0.0, 2.0, rng);
  head_seg_[1] = make_conv("head.seg.c2", "segment", hc, hc, 3, 1, 1, 0.0, 2.0, rng);
  head_seg_[2] = make_conv("head.seg.out", "segment", hc, 1, 1, 1, 0, 0.0, 1.0, rng);
}

Tensor MultiTaskNet::run_conv(const Conv& c, const Tensor& x) const {
  return conv2d(x, c.w, c.b, c.stride, c.padding);
}

Tensor MultiTaskNet::maybe_norm(const Tensor& x) const {
  if (cfg_.normalization != "instance") return x;
  const Tensor mu = reduce_mean(x, {2, 3}, /*keepdims=*/true);
  const Tensor xc = sub(x, mu);
  const Tensor var = reduce_mean(mul(xc, xc), {2, 3}, /*keepdims=*/true);
  return div(xc, pow_scalar(add_scalar(var, 1e-5), 0.5));
}

EncoderFeatures MultiTaskNet::encode(const Tensor& image) const {
  const Shape& s = image.shape();
  if (s.size() != 4 || s[1] != 1 || s[2] != cfg_.input_h || s[3] != cfg_.input_w) {
    throw std::invalid_argument("network: expected input [B, 1, " +
                                std::to_string(cfg_.input_h) + ", " +
                                std::to_string(cfg_.input_w) + "], got " +
                                shape_str(s));
  }
  EncoderFeatures feats;
  Tensor x = image;
  for (int st = 0; st < 4; ++st) {
    const Conv& c1 = enc_[st * 4 + 0];
    const Conv& c2 = enc_[st * 4 + 1];
    const Conv& c3 = enc_[st * 4 + 2];
    const Conv& c4 = enc_[st * 4 + 3];
    Tensor h = relu(maybe_norm(run_conv(c1, x)));
    h = maybe_norm(run_conv(c2, h));
    Tensor y = relu(add(h, run_conv(enc_skip_[st], x)));
    Tensor h2 = relu(maybe_norm(run_conv(c3, y)));
    h2 = maybe_norm(run_conv(c4, h2));
    x = relu(add(h2, y));
    if (st == 1) feats.skip4 = x;
    if (st == 2) feats.skip8 = x;
  }
  feats.latent = run_conv(proj_, x);
  return feats;
}

Tensor MultiTaskNet::attend(const Tensor& latent) const {
  // channel gate from the globally pooled descriptor
  const Tensor gap = reduce_mean(latent, {2, 3}, /*keepdims=*/true);
  const Tensor gate_c = sigmoid(run_conv(attn_expand_, relu(run_conv(attn_reduce_, gap))));
  const Tensor fc = mul(latent, gate_c);
  // spatial gate from per-position channel statistics
  const Tensor m = reduce_mean(fc, {1}, /*keepdims=*/true);
  const Tensor mx = reduce_max(fc, {1}, /*keepdims=*/true);
  const Tensor gate_s = sigmoid(run_conv(attn_spatial_, concat({m, mx}, 1)));
  return mul(fc, gate_s);
}

Tensor MultiTaskNet::decode(const Tensor& latent, const EncoderFeatures& feats) const {
  const Tensor* skips[2] = {&feats.skip8, &feats.skip4};
  Tensor x = latent;
  for (int st = 0; st < 2; ++st) {
    x = run_conv(dec_conv_[st], upsample_nearest(x, 2));
    const Shape& xs = x.shape();
    const Shape& ss = skips[st]->defined() ? skips[st]->shape() : Shape{};
    if (ss != xs) {
      throw std::invalid_argument("decoder stage " + std::to_string(st + 1) +
                                  ": skip shape " + shape_str(ss) +
                                  " does not match " + shape_str(xs));
    }
    x = relu(add(x, run_conv(dec_skip_[st], *skips[st])));
  }
  return x;
}

NetworkOutput MultiTaskNet::heads(const Tensor& u) const {
  auto run_head = [&](const Conv* h) {
    Tensor a = relu(run_conv(h[0], u));
    a = relu(run_conv(h[1], a));
    return run_conv(h[2], a);
  };
  NetworkOutput out;
  out.center_logits = run_head(head_center_);
  out.size_pred = run_head(head_size_);
  out.seg_logits = upsample_bilinear(run_head(head_seg_), 4);
  return out;
}

NetworkOutput MultiTaskNet::forward(const Tensor& image) const {
  const EncoderFeatures feats = encode(image);
  return heads(decode(attend(feats.latent), feats));
}

std::vector<Tensor> MultiTaskNet::parameters(TaskMode mode) const {
  std::vector<Tensor> out;
  for (const auto& [name, t] : shared_) out.push_back(t);
  if (mode == TaskMode::kDetect || mode == TaskMode::kBoth) {
    for (const auto& [name, t] : detect_) out.push_back(t);
  }
  if (mode == TaskMode::kSegment || mode == TaskMode::kBoth) {
    for (const auto& [name, t] : segment_) out.push_back(t);
  }
  return out;
}

std::size_t MultiTaskNet::parameter_count() const {
  std::size_t n = 0;
  for (const auto& [name, t] : params_) n += t.numel();
  return n;
}

Checkpoint MultiTaskNet::to_checkpoint(nlohmann::json extra_meta) const {
  Checkpoint ckpt;
  ckpt.meta = std::move(extra_meta);
  ckpt.meta["network"] = cfg_;
  ckpt.tensors = params_;
  return ckpt;
}

MultiTaskNet MultiTaskNet::from_checkpoint(const Checkpoint& ckpt) {
  if (!ckpt.meta.contains("network")) {
    throw std::runtime_error("checkpoint has no network config section");
  }
  const NetworkConfig cfg = ckpt.meta.at("network").get<NetworkConfig>();
  MultiTaskNet model(cfg, /*seed=*/0);
  for (auto& [name, param] : model.params_) {
    const Tensor* stored = ckpt.find(name);
    if (stored == nullptr) {
      throw std::runtime_error("checkpoint is missing parameter '" + name + "'");
    }
    if (stored->shape() != param.shape()) {
      throw std::runtime_error("checkpoint parameter '" + name + "' has shape " +
                               shape_str(stored->shape()) + ", expected " +
                               shape_str(param.shape()));
    }
    std::copy(stored->data(), stored->data() + stored->numel(), param.data());
  }
  return model;
}

}  // namespace fluorotask
