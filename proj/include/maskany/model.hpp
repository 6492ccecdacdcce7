#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "json.hpp"
#include "maskany/backbone.hpp"
#include "maskany/masking.hpp"

namespace maskany {

enum class FusionLevel { image, feature, decision };

std::string_view to_string(FusionLevel level);
FusionLevel parse_fusion_level(std::string_view name);

struct FusionConfig {
  FusionLevel level = FusionLevel::feature;
  std::int64_t align_depth = 3;
  bool shared_low = true;
};

struct MaskPolicy {
  MaskStrategy strategy = MaskStrategy::combined;
  double ratio = kDefaultMaskRatio;
  std::int64_t block_size = kDefaultBlockSize;
  /// {0, 0} selects default_random_size_range for the input dims.
  SizeRange random_size{0, 0};
  /// Evaluate with train-style stochastic masks instead of the fixed grid.
  bool eval_stochastic = false;
  float fill = 0.0f;
};

/// Which parts of the method are active: M (masking), R (reuse branch),
/// FFA (feature fusion and alignment). R requires M, FFA requires R.
struct AblationToggles {
  bool mask = true;
  bool reuse = true;
  bool ffa = true;
  void validate() const;
  friend bool operator==(const AblationToggles&, const AblationToggles&) = default;
};

struct ModelConfig {
  std::string backbone = "resnet-mini";
  std::string split_point;  // empty: family default
  std::int64_t in_channels = 3;
  std::int64_t num_classes = 10;
  std::int64_t image_size = 32;
  FusionConfig fusion;
  MaskPolicy mask;
  AblationToggles toggles;
  std::uint64_t seed = 0;
  /// Per-channel input standardization applied before masking; empty means
  /// images are used as given.
  std::vector<float> input_mean;
  std::vector<float> input_std;
};

/// Resize semantics of the reuse branch, recorded with every checkpoint.
inline constexpr std::string_view kResizeSemantics = "bilinear/align_corners=false";

nlohmann::json to_json(const ModelConfig& config);
ModelConfig model_config_from_json(const nlohmann::json& j);

/// Channel concatenation, masked-branch channels first. Accepts C x H x W or
/// B x C x H x W pairs of equal shape.
torch::Tensor fuse_features(const torch::Tensor& f_masked, const torch::Tensor& f_reuse);

/// Residual refinement of the 2C-channel joint map back to C channels.
///
/// stage 1:   y = proj1x1(x) + relu(norm(conv3x3_{2C->C}(x)))
/// stage i>1: y = y + relu(norm(conv3x3_{C->C}(y)))
///
/// Normalization is GroupNorm, so the block behaves identically for any
/// batch size (including 1 at evaluation time).
class AlignmentBlockImpl : public torch::nn::Module {
 public:
  AlignmentBlockImpl(std::int64_t channels, std::int64_t depth);

  torch::Tensor forward(torch::Tensor joint);

  torch::nn::Conv2d projection() const { return projection_; }
  const std::vector<torch::nn::Conv2d>& convs() const { return convs_; }
  const std::vector<torch::nn::GroupNorm>& norms() const { return norms_; }
  std::int64_t channels() const { return channels_; }

 private:
  std::int64_t channels_;
  torch::nn::Conv2d projection_{nullptr};
  std::vector<torch::nn::Conv2d> convs_;
  std::vector<torch::nn::GroupNorm> norms_;
};
TORCH_MODULE(AlignmentBlock);

/// align_features: a fresh (default-initialized) block of depth n applied to
/// `joint` (2C x H x W or B x 2C x H x W).
torch::Tensor align_features(const torch::Tensor& joint, std::int64_t depth);

/// Masked and reuse inputs for a batch, plus the masks that produced them.
struct BranchInputs {
  torch::Tensor masked;  // B x C x H x W
  torch::Tensor reuse;   // B x C x H x W (resized reuse image)
  std::vector<MaskSpec> specs;
};

/// Train: a fresh mask per sample (seed derived from `seed` and the sample
/// index). Eval: the fixed grid mask (ratio 1/4) unless the policy asks for
/// stochastic evaluation.
BranchInputs prepare_branch_inputs(const torch::Tensor& images, const MaskPolicy& policy,
                                   bool train, std::uint64_t seed);

/// Dual-branch classifier built around any registered backbone.
class MaskAnyNetImpl : public torch::nn::Module {
 public:
  explicit MaskAnyNetImpl(ModelConfig config);

  /// Full pipeline on [0, 1] images; train/eval behaviour follows
  /// is_training().
  torch::Tensor forward(torch::Tensor images, std::uint64_t seed = 0);
  /// Same, recording named intermediate activations.
  torch::Tensor forward_tapped(torch::Tensor images, std::uint64_t seed, Taps& taps);
  /// Everything after standardization and input preparation.
  torch::Tensor forward_inputs(const torch::Tensor& masked, const torch::Tensor& reuse,
                               Taps* taps = nullptr);

  const ModelConfig& config() const { return config_; }
  /// True when the reuse branch participates (toggles M and R).
  bool dual_branch() const { return config_.toggles.mask && config_.toggles.reuse; }
  std::vector<std::string> layer_names() const;
  /// Last spatial layer of the high-level extractor (or of the backbone).
  std::string default_cam_layer() const;
  /// Trainable parameters grouped by component (low, low_reuse, align, high,
  /// backbone, backbone_reuse).
  std::map<std::string, std::vector<torch::Tensor>> parameter_groups() const;

  torch::Tensor standardize(const torch::Tensor& images) const;

  /// Submodules; null when the configuration does not use them.
  Backbone backbone() const { return backbone_; }
  Backbone backbone_reuse() const { return backbone_reuse_; }
  Backbone low() const { return low_; }
  Backbone low_reuse() const { return low_reuse_; }
  Backbone high() const { return high_; }
  AlignmentBlock align() const { return align_; }

 private:
  BackboneOptions backbone_options(std::int64_t in_channels) const;
  torch::Tensor run(torch::Tensor images, std::uint64_t seed, Taps* taps);
  torch::Tensor run_low(const torch::Tensor& masked, const torch::Tensor& reuse, Taps* taps,
                        torch::Tensor& f_reuse);

  ModelConfig config_;
  Backbone backbone_{nullptr};
  Backbone backbone_reuse_{nullptr};
  Backbone low_{nullptr};
  Backbone low_reuse_{nullptr};
  Backbone high_{nullptr};
  AlignmentBlock align_{nullptr};
  std::vector<std::string> layer_names_;
  std::string default_cam_layer_;
};
TORCH_MODULE(MaskAnyNet);

/// Checkpoint: every named parameter and buffer plus the model config
/// record (including kResizeSemantics) in one torch archive.
void save_checkpoint(const MaskAnyNet& model, const std::filesystem::path& path);
MaskAnyNet load_checkpoint(const std::filesystem::path& path);
ModelConfig read_checkpoint_config(const std::filesystem::path& path);

}  // namespace maskany
