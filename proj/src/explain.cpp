#include "maskany/explain.hpp"

#include <algorithm>

#include <opencv2/imgproc.hpp>

#include "maskany/error.hpp"
#include "maskany/image_io.hpp"
#include "maskany/reuse.hpp"

namespace maskany {
namespace {

torch::Tensor minmax(const torch::Tensor& x) {
  const auto lo = x.min().item<double>();
  const auto hi = x.max().item<double>();
  if (!(hi - lo > 1e-12)) return torch::zeros_like(x);
  return (x - lo) / (hi - lo);
}

const torch::Tensor& find_tap(const Taps& taps, const TappedModel& model,
                              const std::string& layer) {
  auto it = taps.find(layer);
  if (it == taps.end()) {
    std::string valid;
    for (const auto& l : model.layers) valid += (valid.empty() ? "" : ", ") + l;
    throw ConfigError("unknown layer '" + layer + "' (available: " + valid + ")");
  }
  return it->second;
}

}  // namespace

TappedModel tapped(Backbone backbone) {
  TappedModel m;
  m.layers = backbone->stage_names();
  for (const auto& s : backbone->stages()) {
    if (s.spatial) m.default_layer = s.name;
  }
  m.run = [backbone](const torch::Tensor& x, Taps& taps) mutable {
    return backbone->forward_range(x, 0, backbone->stages().size(), &taps);
  };
  return m;
}

TappedModel tapped(MaskAnyNet model, std::uint64_t seed) {
  TappedModel m;
  m.layers = model->layer_names();
  m.default_layer = model->default_cam_layer();
  m.run = [model, seed](const torch::Tensor& x, Taps& taps) mutable {
    return model->forward_tapped(x, seed, taps);
  };
  return m;
}

HeatmapResult grad_cam(const TappedModel& model, const torch::Tensor& image,
                       std::int64_t target_class, const std::string& layer) {
  if (image.dim() != 3) throw DimensionError("grad_cam expects a C x H x W image");
  const std::string name = layer.empty() ? model.default_layer : layer;
  torch::AutoGradMode grad_mode(true);
  Taps taps;
  auto logits = model.run(image.unsqueeze(0), taps);
  const auto& act = find_tap(taps, model, name);
  if (act.dim() != 4) {
    throw ConfigError("layer '" + name + "' does not produce a spatial feature map");
  }
  if (target_class < 0 || target_class >= logits.size(1)) {
    throw RangeError("target class " + std::to_string(target_class) + " outside [0, " +
                     std::to_string(logits.size(1)) + ")");
  }
  torch::Tensor grads;
  if (act.requires_grad()) {
    grads = torch::autograd::grad({logits[0][target_class]}, {act}, {}, false, false, true)[0];
  }
  if (!grads.defined()) grads = torch::zeros_like(act);
  auto weights = grads.mean({2, 3}, true);
  auto cam = torch::relu((weights * act).sum(1)).detach();  // 1 x h x w
  cam = resize_bilinear(cam, {image.size(1), image.size(2)})[0];
  return {minmax(cam), target_class, name};
}

torch::Tensor feature_summary(const torch::Tensor& feature) {
  auto f = feature.detach();
  if (f.dim() == 4) f = f[0];
  if (f.dim() != 3) throw ConfigError("feature summary needs a spatial map");
  return minmax(f.mean(0));
}

std::map<std::string, torch::Tensor> dump_features(const TappedModel& model,
                                                   const torch::Tensor& image,
                                                   const std::vector<std::string>& layers,
                                                   const std::filesystem::path& out_dir) {
  std::map<std::string, torch::Tensor> out;
  if (layers.empty()) return out;
  for (const auto& layer : layers) {
    if (std::find(model.layers.begin(), model.layers.end(), layer) == model.layers.end()) {
      Taps none;
      find_tap(none, model, layer);  // throws with the list of layers
    }
  }
  torch::NoGradGuard no_grad;
  Taps taps;
  model.run(image.unsqueeze(0), taps);
  for (const auto& layer : layers) {
    auto t = find_tap(taps, model, layer).detach()[0].clone();
    if (!out_dir.empty() && t.dim() == 3) {
      write_image(out_dir / (layer + ".png"), feature_summary(t).unsqueeze(0));
    }
    out.emplace(layer, std::move(t));
  }
  return out;
}

torch::Tensor overlay_heatmap(const torch::Tensor& image, const torch::Tensor& heatmap,
                              double alpha) {
  if (heatmap.dim() != 2 || image.dim() != 3 || image.size(1) != heatmap.size(0) ||
      image.size(2) != heatmap.size(1)) {
    throw DimensionError("heatmap dims must match the image");
  }
  cv::Mat heat = to_mat_u8(heatmap.unsqueeze(0));
  cv::Mat colored;
  cv::applyColorMap(heat, colored, cv::COLORMAP_JET);
  auto rgb_heat = from_mat(colored);
  auto base = image.detach().to(torch::kFloat32).clamp(0.0, 1.0);
  if (base.size(0) == 1) base = base.expand({3, base.size(1), base.size(2)});
  return alpha * rgb_heat + (1.0 - alpha) * base;
}

void write_heatmap_grid(const std::filesystem::path& path,
                        const std::vector<torch::Tensor>& originals,
                        const std::vector<std::vector<torch::Tensor>>& overlay_rows) {
  if (originals.empty()) throw ConfigError("heatmap grid needs at least one image");
  auto to_rgb = [](torch::Tensor t) {
    t = t.detach().to(torch::kFloat32).clamp(0.0, 1.0);
    return t.size(0) == 1 ? t.expand({3, t.size(1), t.size(2)}) : t;
  };
  std::vector<torch::Tensor> rows;
  std::vector<torch::Tensor> first;
  for (const auto& img : originals) first.push_back(to_rgb(img));
  rows.push_back(torch::cat(first, 2));
  for (const auto& row : overlay_rows) {
    if (row.size() != originals.size()) {
      throw DimensionError("every heatmap row needs one overlay per image");
    }
    std::vector<torch::Tensor> cells;
    for (const auto& img : row) cells.push_back(to_rgb(img));
    rows.push_back(torch::cat(cells, 2));
  }
  write_image(path, torch::cat(rows, 1));
}

}  // namespace maskany
