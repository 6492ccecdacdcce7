#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "maskany/backbone.hpp"
#include "maskany/model.hpp"

namespace maskany {

/// A differentiable classifier that can report named intermediate maps.
struct TappedModel {
  /// images (B x C x H x W) -> logits (B x K); fills the taps it computes.
  std::function<torch::Tensor(const torch::Tensor&, Taps&)> run;
  std::vector<std::string> layers;
  std::string default_layer;
};

TappedModel tapped(Backbone backbone);
/// The model should be in eval mode for reproducible maps.
TappedModel tapped(MaskAnyNet model, std::uint64_t seed = 0);

struct HeatmapResult {
  torch::Tensor map;  // H x W, min-max normalized to [0, 1]
  std::int64_t target_class = 0;
  std::string layer;
};

/// Gradient-weighted class activation map of `layer` (empty: the model's
/// default layer) for one C x H x W image.
HeatmapResult grad_cam(const TappedModel& model, const torch::Tensor& image,
                       std::int64_t target_class, const std::string& layer = "");

/// Per-layer activations for one image. When `out_dir` is non-empty a
/// grayscale summary (channel mean, min-max scaled) is written per layer as
/// `<layer>.png`.
std::map<std::string, torch::Tensor> dump_features(const TappedModel& model,
                                                   const torch::Tensor& image,
                                                   const std::vector<std::string>& layers,
                                                   const std::filesystem::path& out_dir = {});

/// Min-max scaled channel mean of a C x H x W (or 1 x C x H x W) map.
torch::Tensor feature_summary(const torch::Tensor& feature);

/// Heatmap blended over the image with a jet colour map (3 x H x W, [0, 1]).
torch::Tensor overlay_heatmap(const torch::Tensor& image, const torch::Tensor& heatmap,
                              double alpha = 0.5);

/// Rows: original images, then one row per model of overlays; columns:
/// images. Written as a lossless PNG.
void write_heatmap_grid(const std::filesystem::path& path,
                        const std::vector<torch::Tensor>& originals,
                        const std::vector<std::vector<torch::Tensor>>& overlay_rows);

}  // namespace maskany
