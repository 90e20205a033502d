#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "fluorotask/checkpoint.hpp"
#include "fluorotask/tensor.hpp"

namespace fluorotask {

// Architecture hyper-parameters. Defaults are the desk-scale 64x64 setup.
struct NetworkConfig {
  int input_h = 64;
  int input_w = 64;
  int base_channels = 8;            // stage widths are base * {1,2,4,8}
  int latent_dim = 64;              // width after the linear 3x3 projection
  int head_channels = 32;           // width of the two 3x3 head convolutions
  std::vector<int> stages{2, 2, 2, 2};  // per-stage stride; must multiply to 16
  std::string normalization = "none";   // "none" or "instance"
  double attn_bias_init = 4.0;      // gate bias; large => gates start near 1

  void validate() const;  // throws std::invalid_argument
};

void to_json(nlohmann::json& j, const NetworkConfig& cfg);
void from_json(const nlohmann::json& j, NetworkConfig& cfg);

struct NetworkOutput {
  Tensor seg_logits;     // B x 1 x H x W
  Tensor center_logits;  // B x 1 x H/4 x W/4
  Tensor size_pred;      // B x 2 x H/4 x W/4
};

struct EncoderFeatures {
  Tensor latent;  // B x latent_dim x H/16 x W/16
  Tensor skip8;   // B x 4*base x H/8 x W/8
  Tensor skip4;   // B x 2*base x H/4 x W/4
};

enum class TaskMode { kDetect, kSegment, kBoth };

TaskMode task_mode_from_string(const std::string& s);
std::string to_string(TaskMode mode);

class MultiTaskNet {
 public:
  // Weight initialization is fully determined by (cfg, seed).
  MultiTaskNet(NetworkConfig cfg, std::uint64_t seed);

  const NetworkConfig& config() const { return cfg_; }

  EncoderFeatures encode(const Tensor& image) const;
  Tensor attend(const Tensor& latent) const;
  // Two fusion stages /16 -> /8 -> /4; skip shape mismatches are rejected
  // with the offending stage index.
  Tensor decode(const Tensor& latent, const EncoderFeatures& feats) const;
  NetworkOutput heads(const Tensor& u) const;
  NetworkOutput forward(const Tensor& image) const;

  const std::vector<std::pair<std::string, Tensor>>& named_parameters() const {
    return params_;
  }
  std::vector<Tensor> parameters(TaskMode mode = TaskMode::kBoth) const;
  std::size_t parameter_count() const;

  Checkpoint to_checkpoint(nlohmann::json extra_meta = {}) const;
  static MultiTaskNet from_checkpoint(const Checkpoint& ckpt);

 private:
  struct Conv {
    Tensor w;
    Tensor b;
    int stride = 1;
    int padding = 0;
  };

  Conv make_conv(const std::string& name, const std::string& group, int in_ch,
                 int out_ch, int k, int stride, int padding, double bias_init,
                 double gain, class RngStream& rng);
  Tensor run_conv(const Conv& c, const Tensor& x) const;
  Tensor maybe_norm(const Tensor& x) const;

  NetworkConfig cfg_;
  std::vector<std::pair<std::string, Tensor>> params_;
  std::vector<std::pair<std::string, Tensor>> shared_;  // encoder+attention+decoder
  std::vector<std::pair<std::string, Tensor>> detect_;  // center+size heads
  std::vector<std::pair<std::string, Tensor>> segment_;  // seg head

  // encoder: 4 stages x (downsampling block + identity block)
  std::vector<Conv> enc_;          // flattened stage convs in forward order
  std::vector<Conv> enc_skip_;     // one 1x1 stride-2 projection per stage
  Conv proj_;                      // linear 3x3 to latent_dim
  Conv attn_reduce_, attn_expand_; // channel gate MLP (1x1 convs)
  Conv attn_spatial_;              // 3x3 over [mean,max] channel maps
  Conv dec_conv_[2];               // post-upsample 3x3 per fusion stage
  Conv dec_skip_[2];               // 1x1 skip projections
  Conv head_center_[3], head_size_[3], head_seg_[3];
};

}  // namespace fluorotask
