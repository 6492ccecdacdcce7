#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include <torch/torch.h>

namespace maskany {

/// Named intermediate activations recorded during a forward pass.
using Taps = std::map<std::string, torch::Tensor>;

struct BackboneOptions {
  std::string id = "resnet-mini";
  std::int64_t in_channels = 3;
  std::int64_t num_classes = 10;
  std::int64_t image_size = 32;
};

/// A classifier expressed as an ordered list of named stages. Every boundary
/// between stages is a potential split point; the family registers which of
/// them are offered.
class BackboneImpl : public torch::nn::Module {
 public:
  struct Stage {
    std::string name;
    torch::nn::AnyModule module;
    /// Output is a B x C x H x W map (false for the classifier head).
    bool spatial = true;
    std::int64_t out_channels = 0;
  };

  BackboneImpl(std::string family, std::vector<Stage> stages,
               std::vector<std::string> split_points, std::string default_split);

  torch::Tensor forward(torch::Tensor x);
  /// Runs stages [begin, end). Records every stage output into `taps` as
  /// `<prefix><stage name>` when `taps` is non-null.
  torch::Tensor forward_range(torch::Tensor x, std::size_t begin, std::size_t end,
                              Taps* taps = nullptr, const std::string& prefix = "");
  /// Globally average-pooled output of the last spatial stage (B x C).
  torch::Tensor pooled_features(torch::Tensor x);

  /// New backbone holding stages [begin, end) of this one. Parameters are
  /// shared, not copied.
  std::shared_ptr<BackboneImpl> slice(std::size_t begin, std::size_t end) const;

  const std::string& family() const { return family_; }
  const std::vector<Stage>& stages() const { return stages_; }
  std::vector<std::string> stage_names() const;
  const std::vector<std::string>& split_points() const { return split_points_; }
  const std::string& default_split() const { return default_split_; }
  /// Number of stages up to and including `stage`; throws ConfigError for
  /// names that are not registered split points.
  std::size_t split_index(const std::string& stage) const;
  std::size_t stage_index(const std::string& stage) const;

 private:
  std::string family_;
  std::vector<Stage> stages_;
  std::vector<std::string> split_points_;
  std::string default_split_;
};
TORCH_MODULE(Backbone);

/// Registered ids: resnet-mini, resnet18, resnet34, mobilenet-mini, vit-mini.
std::vector<std::string> backbone_ids();
Backbone make_backbone(const BackboneOptions& options);

/// low: stages up to the split point, high: the rest. `high(low(x))` runs the
/// exact operations of the unsplit backbone.
struct BackboneSplit {
  Backbone low{nullptr};
  Backbone high{nullptr};
  std::string split_point;
  std::int64_t channels_at_split = 0;
};

/// Empty `split_point` selects the family default.
BackboneSplit split_backbone(const Backbone& backbone, const std::string& split_point = "");

std::int64_t parameter_count(const torch::nn::Module& module);

}  // namespace maskany
