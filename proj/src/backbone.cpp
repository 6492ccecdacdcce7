#include "maskany/backbone.hpp"

#include <algorithm>

#include "maskany/error.hpp"

namespace maskany {
namespace {

namespace nn = torch::nn;

nn::Conv2d conv(std::int64_t in, std::int64_t out, std::int64_t k, std::int64_t stride = 1,
                std::int64_t groups = 1) {
  return nn::Conv2d(
      nn::Conv2dOptions(in, out, k).stride(stride).padding(k / 2).groups(groups).bias(false));
}

// Sequential has a templated forward and cannot sit inside an AnyModule, so
// stages wrap it. Children are registered directly ("stem.0.weight").
class ChainImpl : public nn::Module {
 public:
  explicit ChainImpl(nn::Sequential seq) : seq_(std::move(seq)) {
    for (const auto& item : seq_->named_children()) register_module(item.key(), item.value());
  }

  torch::Tensor forward(torch::Tensor x) { return seq_->forward(x); }

 private:
  nn::Sequential seq_;
};
TORCH_MODULE(Chain);

// ---------------------------------------------------------------------------
// Residual family
// ---------------------------------------------------------------------------

class BasicBlockImpl : public nn::Module {
 public:
  BasicBlockImpl(std::int64_t in, std::int64_t out, std::int64_t stride)
      : conv1_(register_module("conv1", conv(in, out, 3, stride))),
        bn1_(register_module("bn1", nn::BatchNorm2d(out))),
        conv2_(register_module("conv2", conv(out, out, 3))),
        bn2_(register_module("bn2", nn::BatchNorm2d(out))) {
    if (stride != 1 || in != out) {
      shortcut_ = register_module(
          "shortcut", nn::Sequential(conv(in, out, 1, stride), nn::BatchNorm2d(out)));
    }
  }

  torch::Tensor forward(torch::Tensor x) {
    auto out = torch::relu(bn1_(conv1_(x)));
    out = bn2_(conv2_(out));
    out = out + (shortcut_ ? shortcut_->forward(x) : x);
    return torch::relu(out);
  }

 private:
  nn::Conv2d conv1_;
  nn::BatchNorm2d bn1_;
  nn::Conv2d conv2_;
  nn::BatchNorm2d bn2_;
  nn::Sequential shortcut_{nullptr};
};
TORCH_MODULE(BasicBlock);

class PoolHeadImpl : public nn::Module {
 public:
  PoolHeadImpl(std::int64_t channels, std::int64_t classes)
      : fc_(register_module("fc", nn::Linear(channels, classes))) {}

  torch::Tensor forward(torch::Tensor x) { return fc_(x.mean({2, 3})); }

 private:
  nn::Linear fc_;
};
TORCH_MODULE(PoolHead);

nn::Sequential residual_stage(std::int64_t in, std::int64_t out, std::int64_t blocks,
                              std::int64_t stride) {
  nn::Sequential stage;
  stage->push_back(BasicBlock(in, out, stride));
  for (std::int64_t i = 1; i < blocks; ++i) stage->push_back(BasicBlock(out, out, 1));
  return stage;
}

std::vector<std::string> boundaries(const std::vector<BackboneImpl::Stage>& stages) {
  std::vector<std::string> names;
  for (std::size_t i = 0; i + 1 < stages.size(); ++i) names.push_back(stages[i].name);
  return names;
}

Backbone make_resnet_mini(const BackboneOptions& o) {
  std::vector<BackboneImpl::Stage> stages;
  stages.push_back({"stem", nn::AnyModule(Chain(nn::Sequential(conv(o.in_channels, 16, 3),
                                                         nn::BatchNorm2d(16), nn::ReLU()))),
                    true, 16});
  stages.push_back({"stage1", nn::AnyModule(Chain(residual_stage(16, 16, 2, 1))), true, 16});
  stages.push_back({"stage2", nn::AnyModule(Chain(residual_stage(16, 32, 2, 2))), true, 32});
  stages.push_back({"stage3", nn::AnyModule(Chain(residual_stage(32, 64, 2, 2))), true, 64});
  stages.push_back({"head", nn::AnyModule(PoolHead(64, o.num_classes)), false, o.num_classes});
  auto splits = boundaries(stages);
  return Backbone("resnet", std::move(stages), std::move(splits), "stage1");
}

Backbone make_resnet(const BackboneOptions& o, std::vector<std::int64_t> depths) {
  std::vector<BackboneImpl::Stage> stages;
  stages.push_back(
      {"stem",
       nn::AnyModule(Chain(nn::Sequential(conv(o.in_channels, 64, 7, 2), nn::BatchNorm2d(64), nn::ReLU(),
                                    nn::MaxPool2d(nn::MaxPool2dOptions(3).stride(2).padding(1))))),
       true, 64});
  const std::int64_t widths[] = {64, 128, 256, 512};
  std::int64_t in = 64;
  for (std::size_t i = 0; i < 4; ++i) {
    stages.push_back({"stage" + std::to_string(i + 1),
                      nn::AnyModule(Chain(residual_stage(in, widths[i], depths[i], i == 0 ? 1 : 2))), true,
                      widths[i]});
    in = widths[i];
  }
  stages.push_back({"head", nn::AnyModule(PoolHead(512, o.num_classes)), false, o.num_classes});
  auto splits = boundaries(stages);
  return Backbone("resnet", std::move(stages), std::move(splits), "stage1");
}

// ---------------------------------------------------------------------------
// Efficiency-oriented family (inverted residual blocks)
// ---------------------------------------------------------------------------

class InvertedResidualImpl : public nn::Module {
 public:
  InvertedResidualImpl(std::int64_t in, std::int64_t out, std::int64_t stride, std::int64_t expand)
      : use_residual_(stride == 1 && in == out) {
    const auto hidden = in * expand;
    nn::Sequential body;
    if (expand != 1) {
      body->push_back(conv(in, hidden, 1));
      body->push_back(nn::BatchNorm2d(hidden));
      body->push_back(nn::ReLU6());
    }
    body->push_back(conv(hidden, hidden, 3, stride, hidden));
    body->push_back(nn::BatchNorm2d(hidden));
    body->push_back(nn::ReLU6());
    body->push_back(conv(hidden, out, 1));
    body->push_back(nn::BatchNorm2d(out));
    body_ = register_module("body", body);
  }

  torch::Tensor forward(torch::Tensor x) {
    auto y = body_->forward(x);
    return use_residual_ ? x + y : y;
  }

 private:
  bool use_residual_;
  nn::Sequential body_{nullptr};
};
TORCH_MODULE(InvertedResidual);

Backbone make_mobilenet_mini(const BackboneOptions& o) {
  std::vector<BackboneImpl::Stage> stages;
  stages.push_back({"stem", nn::AnyModule(Chain(nn::Sequential(conv(o.in_channels, 16, 3),
                                                         nn::BatchNorm2d(16), nn::ReLU6()))),
                    true, 16});
  stages.push_back({"stage1", nn::AnyModule(Chain(nn::Sequential(InvertedResidual(16, 16, 1, 1)))), true, 16});
  stages.push_back({"stage2", nn::AnyModule(Chain(nn::Sequential(InvertedResidual(16, 24, 2, 4),
                                                           InvertedResidual(24, 24, 1, 4)))),
                    true, 24});
  stages.push_back({"stage3", nn::AnyModule(Chain(nn::Sequential(InvertedResidual(24, 40, 2, 4),
                                                           InvertedResidual(40, 40, 1, 4)))),
                    true, 40});
  stages.push_back({"stage4", nn::AnyModule(Chain(nn::Sequential(InvertedResidual(40, 80, 2, 4),
                                                           InvertedResidual(80, 80, 1, 4)))),
                    true, 80});
  stages.push_back({"conv_last", nn::AnyModule(Chain(nn::Sequential(conv(80, 256, 1),
                                                              nn::BatchNorm2d(256), nn::ReLU6()))),
                    true, 256});
  stages.push_back({"head", nn::AnyModule(PoolHead(256, o.num_classes)), false, o.num_classes});
  auto splits = boundaries(stages);
  return Backbone("mobilenet", std::move(stages), std::move(splits), "stage2");
}

// ---------------------------------------------------------------------------
// Vision transformer family. Token grids travel between stages as
// B x D x h x w maps; blocks flatten to B x L x D internally, so token order
// (and with it position) is the row-major order of the map.
// ---------------------------------------------------------------------------

class PatchEmbedImpl : public nn::Module {
 public:
  PatchEmbedImpl(std::int64_t in, std::int64_t dim, std::int64_t patch, std::int64_t grid)
      : proj_(register_module("proj",
                              nn::Conv2d(nn::Conv2dOptions(in, dim, patch).stride(patch)))),
        pos_(register_parameter("pos", torch::randn({1, dim, grid, grid}) * 0.02)) {}

  torch::Tensor forward(torch::Tensor x) { return proj_(x) + pos_; }

 private:
  nn::Conv2d proj_;
  torch::Tensor pos_;
};
TORCH_MODULE(PatchEmbed);

class TransformerBlockImpl : public nn::Module {
 public:
  TransformerBlockImpl(std::int64_t dim, std::int64_t heads, std::int64_t hidden)
      : norm1_(register_module("norm1", nn::LayerNorm(nn::LayerNormOptions({dim})))),
        attn_(register_module("attn",
                              nn::MultiheadAttention(nn::MultiheadAttentionOptions(dim, heads)))),
        norm2_(register_module("norm2", nn::LayerNorm(nn::LayerNormOptions({dim})))),
        fc1_(register_module("fc1", nn::Linear(dim, hidden))),
        fc2_(register_module("fc2", nn::Linear(hidden, dim))) {}

  torch::Tensor forward(torch::Tensor x) {
    const auto b = x.size(0), d = x.size(1), h = x.size(2), w = x.size(3);
    auto tokens = x.flatten(2).permute({2, 0, 1});  // L x B x D
    auto normed = norm1_(tokens);
    tokens = tokens + std::get<0>(attn_(normed, normed, normed));
    tokens = tokens + fc2_(torch::gelu(fc1_(norm2_(tokens))));
    return tokens.permute({1, 2, 0}).reshape({b, d, h, w});
  }

 private:
  nn::LayerNorm norm1_;
  nn::MultiheadAttention attn_;
  nn::LayerNorm norm2_;
  nn::Linear fc1_;
  nn::Linear fc2_;
};
TORCH_MODULE(TransformerBlock);

class TokenHeadImpl : public nn::Module {
 public:
  TokenHeadImpl(std::int64_t dim, std::int64_t classes)
      : norm_(register_module("norm", nn::LayerNorm(nn::LayerNormOptions({dim})))),
        fc_(register_module("fc", nn::Linear(dim, classes))) {}

  torch::Tensor forward(torch::Tensor x) {
    auto tokens = x.flatten(2).transpose(1, 2);  // B x L x D
    return fc_(norm_(tokens).mean(1));
  }

 private:
  nn::LayerNorm norm_;
  nn::Linear fc_;
};
TORCH_MODULE(TokenHead);

Backbone make_vit_mini(const BackboneOptions& o) {
  constexpr std::int64_t patch = 4, dim = 64, depth = 6, heads = 4;
  if (o.image_size % patch != 0) {
    throw ConfigError("vit-mini needs an image size divisible by " + std::to_string(patch));
  }
  std::vector<BackboneImpl::Stage> stages;
  stages.push_back({"patch_embed",
                    nn::AnyModule(PatchEmbed(o.in_channels, dim, patch, o.image_size / patch)), true,
                    dim});
  for (std::int64_t i = 1; i <= depth; ++i) {
    stages.push_back({"block" + std::to_string(i),
                      nn::AnyModule(TransformerBlock(dim, heads, 2 * dim)), true, dim});
  }
  stages.push_back({"head", nn::AnyModule(TokenHead(dim, o.num_classes)), false, o.num_classes});
  auto splits = boundaries(stages);
  return Backbone("vit", std::move(stages), std::move(splits), "block2");
}

}  // namespace

BackboneImpl::BackboneImpl(std::string family, std::vector<Stage> stages,
                           std::vector<std::string> split_points, std::string default_split)
    : family_(std::move(family)),
      stages_(std::move(stages)),
      split_points_(std::move(split_points)),
      default_split_(std::move(default_split)) {
  for (auto& stage : stages_) register_module(stage.name, stage.module.ptr());
}

torch::Tensor BackboneImpl::forward(torch::Tensor x) {
  return forward_range(std::move(x), 0, stages_.size());
}

torch::Tensor BackboneImpl::forward_range(torch::Tensor x, std::size_t begin, std::size_t end,
                                          Taps* taps, const std::string& prefix) {
  for (std::size_t i = begin; i < end; ++i) {
    x = stages_[i].module.forward(x);
    if (taps) (*taps)[prefix + stages_[i].name] = x;
  }
  return x;
}

torch::Tensor BackboneImpl::pooled_features(torch::Tensor x) {
  std::size_t last_spatial = 0;
  for (std::size_t i = 0; i < stages_.size(); ++i) {
    if (stages_[i].spatial) last_spatial = i + 1;
  }
  return forward_range(std::move(x), 0, last_spatial).mean({2, 3});
}

std::shared_ptr<BackboneImpl> BackboneImpl::slice(std::size_t begin, std::size_t end) const {
  if (begin > end || end > stages_.size()) throw ConfigError("invalid backbone slice");
  std::vector<Stage> part(stages_.begin() + static_cast<std::ptrdiff_t>(begin),
                          stages_.begin() + static_cast<std::ptrdiff_t>(end));
  return std::make_shared<BackboneImpl>(family_, std::move(part), std::vector<std::string>{},
                                        std::string{});
}

std::vector<std::string> BackboneImpl::stage_names() const {
  std::vector<std::string> names;
  for (const auto& s : stages_) names.push_back(s.name);
  return names;
}

std::size_t BackboneImpl::stage_index(const std::string& stage) const {
  for (std::size_t i = 0; i < stages_.size(); ++i) {
    if (stages_[i].name == stage) return i;
  }
  throw ConfigError("unknown stage '" + stage + "'");
}

std::size_t BackboneImpl::split_index(const std::string& stage) const {
  if (std::find(split_points_.begin(), split_points_.end(), stage) == split_points_.end()) {
    std::string valid;
    for (const auto& s : split_points_) valid += (valid.empty() ? "" : ", ") + s;
    throw ConfigError("unknown split point '" + stage + "' for " + family_ +
                      " backbone (valid: " + valid + ")");
  }
  return stage_index(stage) + 1;
}

std::vector<std::string> backbone_ids() {
  return {"resnet-mini", "resnet18", "resnet34", "mobilenet-mini", "vit-mini"};
}

Backbone make_backbone(const BackboneOptions& options) {
  if (options.id == "resnet-mini") return make_resnet_mini(options);
  if (options.id == "resnet18") return make_resnet(options, {2, 2, 2, 2});
  if (options.id == "resnet34") return make_resnet(options, {3, 4, 6, 3});
  if (options.id == "mobilenet-mini") return make_mobilenet_mini(options);
  if (options.id == "vit-mini") return make_vit_mini(options);
  std::string valid;
  for (const auto& id : backbone_ids()) valid += (valid.empty() ? "" : ", ") + id;
  throw ConfigError("unknown backbone '" + options.id + "' (valid: " + valid + ")");
}

BackboneSplit split_backbone(const Backbone& backbone, const std::string& split_point) {
  const std::string point = split_point.empty() ? backbone->default_split() : split_point;
  const auto k = backbone->split_index(point);
  BackboneSplit split;
  split.low = Backbone(backbone->slice(0, k));
  split.high = Backbone(backbone->slice(k, backbone->stages().size()));
  split.split_point = point;
  split.channels_at_split = backbone->stages()[k - 1].out_channels;
  return split;
}

std::int64_t parameter_count(const torch::nn::Module& module) {
  std::int64_t total = 0;
  for (const auto& p : module.parameters()) total += p.numel();
  return total;
}

}  // namespace maskany
