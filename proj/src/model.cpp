#include "maskany/model.hpp"

#include <fstream>
#include <iterator>

#include "maskany/error.hpp"
#include "maskany/reuse.hpp"
#include "maskany/rng.hpp"

namespace maskany {
namespace {

namespace nn = torch::nn;

std::int64_t group_count(std::int64_t channels) {
  for (std::int64_t g : {8, 4, 2}) {
    if (channels % g == 0) return g;
  }
  return 1;
}

std::string last_spatial_stage(const Backbone& net) {
  std::string name;
  for (const auto& s : net->stages()) {
    if (s.spatial) name = s.name;
  }
  return name;
}

void append_stage_names(std::vector<std::string>& out, const Backbone& net,
                        const std::string& prefix) {
  for (const auto& name : net->stage_names()) out.push_back(prefix + name);
}

}  // namespace

std::string_view to_string(FusionLevel level) {
  switch (level) {
    case FusionLevel::image: return "image";
    case FusionLevel::feature: return "feature";
    case FusionLevel::decision: return "decision";
  }
  return "unknown";
}

FusionLevel parse_fusion_level(std::string_view name) {
  if (name == "image") return FusionLevel::image;
  if (name == "feature") return FusionLevel::feature;
  if (name == "decision") return FusionLevel::decision;
  throw ConfigError("unknown fusion level '" + std::string(name) +
                    "' (valid: image, feature, decision)");
}

void AblationToggles::validate() const {
  if (reuse && !mask) throw ValidationError("ablation toggle R (reuse) requires M (mask)");
  if (ffa && !reuse) throw ValidationError("ablation toggle FFA requires R (reuse)");
}

nlohmann::json to_json(const ModelConfig& c) {
  return {
      {"backbone", c.backbone},
      {"split_point", c.split_point},
      {"in_channels", c.in_channels},
      {"num_classes", c.num_classes},
      {"image_size", c.image_size},
      {"fusion",
       {{"level", std::string(to_string(c.fusion.level))},
        {"align_depth", c.fusion.align_depth},
        {"shared_low", c.fusion.shared_low}}},
      {"mask",
       {{"strategy", std::string(to_string(c.mask.strategy))},
        {"ratio", c.mask.ratio},
        {"block_size", c.mask.block_size},
        {"random_min", c.mask.random_size.min},
        {"random_max", c.mask.random_size.max},
        {"eval_stochastic", c.mask.eval_stochastic},
        {"fill", c.mask.fill}}},
      {"ablation", {{"M", c.toggles.mask}, {"R", c.toggles.reuse}, {"FFA", c.toggles.ffa}}},
      {"seed", c.seed},
      {"normalize", {{"mean", c.input_mean}, {"std", c.input_std}}},
      {"resize", std::string(kResizeSemantics)},
  };
}

ModelConfig model_config_from_json(const nlohmann::json& j) {
  try {
    ModelConfig c;
    c.backbone = j.at("backbone").get<std::string>();
    c.split_point = j.value("split_point", std::string{});
    c.in_channels = j.value("in_channels", c.in_channels);
    c.num_classes = j.at("num_classes").get<std::int64_t>();
    c.image_size = j.at("image_size").get<std::int64_t>();
    const auto& f = j.at("fusion");
    c.fusion.level = parse_fusion_level(f.at("level").get<std::string>());
    c.fusion.align_depth = f.value("align_depth", c.fusion.align_depth);
    c.fusion.shared_low = f.value("shared_low", c.fusion.shared_low);
    const auto& m = j.at("mask");
    c.mask.strategy = parse_strategy(m.at("strategy").get<std::string>());
    c.mask.ratio = m.at("ratio").get<double>();
    c.mask.block_size = m.at("block_size").get<std::int64_t>();
    c.mask.random_size.min = m.value("random_min", std::int64_t{0});
    c.mask.random_size.max = m.value("random_max", std::int64_t{0});
    c.mask.eval_stochastic = m.value("eval_stochastic", false);
    c.mask.fill = m.value("fill", 0.0f);
    const auto& a = j.at("ablation");
    c.toggles = {a.at("M").get<bool>(), a.at("R").get<bool>(), a.at("FFA").get<bool>()};
    c.seed = j.value("seed", std::uint64_t{0});
    if (j.contains("normalize")) {
      c.input_mean = j.at("normalize").at("mean").get<std::vector<float>>();
      c.input_std = j.at("normalize").at("std").get<std::vector<float>>();
    }
    if (j.contains("resize") && j.at("resize").get<std::string>() != kResizeSemantics) {
      throw ConsistencyError("checkpoint was produced with resize semantics '" +
                             j.at("resize").get<std::string>() + "'");
    }
    return c;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("invalid model config: ") + e.what());
  }
}

torch::Tensor fuse_features(const torch::Tensor& f_masked, const torch::Tensor& f_reuse) {
  if (f_masked.sizes() != f_reuse.sizes() || (f_masked.dim() != 3 && f_masked.dim() != 4)) {
    throw DimensionError("fuse_features needs two feature maps of identical shape");
  }
  return torch::cat({f_masked, f_reuse}, f_masked.dim() == 4 ? 1 : 0);
}

AlignmentBlockImpl::AlignmentBlockImpl(std::int64_t channels, std::int64_t depth)
    : channels_(channels) {
  if (depth < 1) throw ConfigError("alignment depth must be at least 1");
  if (channels < 1) throw ConfigError("alignment channels must be positive");
  projection_ = register_module(
      "projection", nn::Conv2d(nn::Conv2dOptions(2 * channels, channels, 1).bias(false)));
  for (std::int64_t i = 0; i < depth; ++i) {
    const auto in = i == 0 ? 2 * channels : channels;
    convs_.push_back(register_module(
        "conv" + std::to_string(i + 1),
        nn::Conv2d(nn::Conv2dOptions(in, channels, 3).padding(1).bias(false))));
    norms_.push_back(register_module(
        "norm" + std::to_string(i + 1),
        nn::GroupNorm(nn::GroupNormOptions(group_count(channels), channels))));
  }
}

torch::Tensor AlignmentBlockImpl::forward(torch::Tensor joint) {
  const bool batched = joint.dim() == 4;
  if (!batched) joint = joint.unsqueeze(0);
  if (joint.dim() != 4 || joint.size(1) != 2 * channels_) {
    throw DimensionError("alignment block expects " + std::to_string(2 * channels_) +
                         " input channels");
  }
  auto y = projection_(joint) + torch::relu(norms_[0](convs_[0](joint)));
  for (std::size_t i = 1; i < convs_.size(); ++i) {
    y = y + torch::relu(norms_[i](convs_[i](y)));
  }
  return batched ? y : y.squeeze(0);
}

torch::Tensor align_features(const torch::Tensor& joint, std::int64_t depth) {
  const auto channel_axis = joint.dim() == 4 ? 1 : 0;
  if (joint.size(channel_axis) % 2 != 0) {
    throw DimensionError("joint feature map must have an even channel count");
  }
  AlignmentBlock block(joint.size(channel_axis) / 2, depth);
  return block(joint);
}

BranchInputs prepare_branch_inputs(const torch::Tensor& images, const MaskPolicy& policy,
                                   bool train, std::uint64_t seed) {
  if (images.dim() != 4) throw DimensionError("expected a B x C x H x W batch");
  torch::NoGradGuard no_grad;
  const Dims dims{images.size(2), images.size(3)};
  const bool stochastic = train || policy.eval_stochastic;
  const SizeRange size = policy.random_size.max > 0 ? policy.random_size
                                                    : default_random_size_range(dims, policy.block_size);
  BranchInputs out;
  std::vector<torch::Tensor> masked, reuse;
  const auto batch = images.size(0);
  masked.reserve(static_cast<std::size_t>(batch));
  reuse.reserve(static_cast<std::size_t>(batch));
  for (std::int64_t i = 0; i < batch; ++i) {
    const auto image = images[i];
    MaskSpec spec = stochastic
                        ? generate_mask(policy.strategy, dims, policy.block_size, policy.ratio,
                                        derive_seed(seed, static_cast<std::uint64_t>(i)), size)
                        : generate_grid_mask(dims, policy.block_size, 0.25);
    masked.push_back(apply_mask(image, spec, policy.fill).pixels);
    reuse.push_back(reuse_input(image, spec, policy.block_size));
    out.specs.push_back(std::move(spec));
  }
  out.masked = torch::stack(masked);
  out.reuse = torch::stack(reuse);
  return out;
}

MaskAnyNetImpl::MaskAnyNetImpl(ModelConfig config) : config_(std::move(config)) {
  config_.toggles.validate();
  if (config_.fusion.align_depth < 1) throw ConfigError("fusion.align_depth must be >= 1");
  if (config_.input_mean.size() != config_.input_std.size() ||
      (!config_.input_mean.empty() &&
       static_cast<std::int64_t>(config_.input_mean.size()) != config_.in_channels)) {
    throw ConfigError("normalize.mean/std need one entry per input channel");
  }
  torch::manual_seed(config_.seed);

  if (!dual_branch()) {
    backbone_ = register_module("backbone", make_backbone(backbone_options(config_.in_channels)));
    append_stage_names(layer_names_, backbone_, "");
    default_cam_layer_ = last_spatial_stage(backbone_);
    return;
  }

  switch (config_.fusion.level) {
    case FusionLevel::feature: {
      auto full = make_backbone(backbone_options(config_.in_channels));
      auto split = split_backbone(full, config_.split_point);
      config_.split_point = split.split_point;
      low_ = register_module("low", split.low);
      high_ = register_module("high", split.high);
      if (!config_.fusion.shared_low) {
        auto other = split_backbone(make_backbone(backbone_options(config_.in_channels)),
                                    config_.split_point);
        low_reuse_ = register_module("low_reuse", other.low);
      }
      if (config_.toggles.ffa) {
        align_ = register_module("align",
                                 AlignmentBlock(split.channels_at_split, config_.fusion.align_depth));
      }
      append_stage_names(layer_names_, low_, "masked.");
      append_stage_names(layer_names_, low_, "reuse.");
      layer_names_.push_back("align");
      append_stage_names(layer_names_, high_, "high.");
      default_cam_layer_ = "high." + last_spatial_stage(high_);
      break;
    }
    case FusionLevel::image: {
      backbone_ =
          register_module("backbone", make_backbone(backbone_options(2 * config_.in_channels)));
      append_stage_names(layer_names_, backbone_, "");
      default_cam_layer_ = last_spatial_stage(backbone_);
      break;
    }
    case FusionLevel::decision: {
      backbone_ = register_module("backbone", make_backbone(backbone_options(config_.in_channels)));
      backbone_reuse_ = register_module("backbone_reuse",
                                        make_backbone(backbone_options(config_.in_channels)));
      append_stage_names(layer_names_, backbone_, "masked.");
      append_stage_names(layer_names_, backbone_reuse_, "reuse.");
      default_cam_layer_ = "masked." + last_spatial_stage(backbone_);
      break;
    }
  }
}

BackboneOptions MaskAnyNetImpl::backbone_options(std::int64_t in_channels) const {
  return {config_.backbone, in_channels, config_.num_classes, config_.image_size};
}

torch::Tensor MaskAnyNetImpl::forward(torch::Tensor images, std::uint64_t seed) {
  return run(std::move(images), seed, nullptr);
}

torch::Tensor MaskAnyNetImpl::forward_tapped(torch::Tensor images, std::uint64_t seed,
                                             Taps& taps) {
  return run(std::move(images), seed, &taps);
}

torch::Tensor MaskAnyNetImpl::standardize(const torch::Tensor& images) const {
  if (config_.input_mean.empty()) return images;
  const auto c = static_cast<std::int64_t>(config_.input_mean.size());
  auto mean = torch::tensor(config_.input_mean).view({1, c, 1, 1});
  auto std = torch::tensor(config_.input_std).view({1, c, 1, 1});
  return (images - mean) / std;
}

torch::Tensor MaskAnyNetImpl::run(torch::Tensor images, std::uint64_t seed, Taps* tap_ptr) {
  const bool train = is_training();
  images = standardize(images);
  if (!dual_branch()) {
    // Single branch: masking is a train-time occlusion; evaluation sees the
    // clean image unless stochastic evaluation is requested.
    if (config_.toggles.mask && (train || config_.mask.eval_stochastic)) {
      const Dims dims{images.size(2), images.size(3)};
      const SizeRange size = config_.mask.random_size.max > 0 ? config_.mask.random_size
                                                              : default_random_size_range(dims, config_.mask.block_size);
      torch::NoGradGuard no_grad;
      std::vector<torch::Tensor> masked;
      for (std::int64_t i = 0; i < images.size(0); ++i) {
        auto spec = generate_mask(config_.mask.strategy, dims, config_.mask.block_size,
                                  config_.mask.ratio,
                                  derive_seed(seed, static_cast<std::uint64_t>(i)), size);
        masked.push_back(apply_mask(images[i], spec, config_.mask.fill).pixels);
      }
      images = torch::stack(masked);
    }
    return backbone_->forward_range(images, 0, backbone_->stages().size(), tap_ptr);
  }
  const auto inputs = prepare_branch_inputs(images, config_.mask, train, seed);
  return forward_inputs(inputs.masked, inputs.reuse, tap_ptr);
}

torch::Tensor MaskAnyNetImpl::run_low(const torch::Tensor& masked, const torch::Tensor& reuse,
                                      Taps* taps, torch::Tensor& f_reuse) {
  auto f_masked = low_->forward_range(masked, 0, low_->stages().size(), taps, "masked.");
  auto& reuse_low = low_reuse_ ? low_reuse_ : low_;
  f_reuse = reuse_low->forward_range(reuse, 0, reuse_low->stages().size(), taps, "reuse.");
  return f_masked;
}

torch::Tensor MaskAnyNetImpl::forward_inputs(const torch::Tensor& masked,
                                             const torch::Tensor& reuse, Taps* taps) {
  if (!dual_branch()) {
    return backbone_->forward_range(masked, 0, backbone_->stages().size(), taps);
  }
  switch (config_.fusion.level) {
    case FusionLevel::feature: {
      torch::Tensor f_reuse;
      auto f_masked = run_low(masked, reuse, taps, f_reuse);
      // Without FFA the branches are merged by a parameter-free sum.
      auto fused = align_ ? align_(fuse_features(f_masked, f_reuse)) : f_masked + f_reuse;
      if (taps) (*taps)["align"] = fused;
      return high_->forward_range(fused, 0, high_->stages().size(), taps, "high.");
    }
    case FusionLevel::image:
      return backbone_->forward_range(torch::cat({masked, reuse}, 1), 0,
                                      backbone_->stages().size(), taps);
    case FusionLevel::decision: {
      auto a = backbone_->forward_range(masked, 0, backbone_->stages().size(), taps, "masked.");
      auto b = backbone_reuse_->forward_range(reuse, 0, backbone_reuse_->stages().size(), taps,
                                              "reuse.");
      return 0.5 * (a + b);
    }
  }
  throw ConfigError("unhandled fusion level");
}

std::vector<std::string> MaskAnyNetImpl::layer_names() const { return layer_names_; }

std::string MaskAnyNetImpl::default_cam_layer() const { return default_cam_layer_; }

std::map<std::string, std::vector<torch::Tensor>> MaskAnyNetImpl::parameter_groups() const {
  std::map<std::string, std::vector<torch::Tensor>> groups;
  for (const auto& child : named_children()) {
    auto params = child.value()->parameters();
    if (!params.empty()) groups[child.key()] = std::move(params);
  }
  return groups;
}

void save_checkpoint(const MaskAnyNet& model, const std::filesystem::path& path) {
  c10::Dict<std::string, torch::Tensor> tensors;
  for (const auto& p : model->named_parameters()) tensors.insert(p.key(), p.value().detach());
  for (const auto& b : model->named_buffers()) tensors.insert(b.key(), b.value().detach());
  c10::impl::GenericDict record(c10::StringType::get(), c10::AnyType::get());
  record.insert(std::string("format"), std::string("maskanynet-checkpoint/1"));
  record.insert(std::string("config"), to_json(model->config()).dump());
  record.insert(std::string("tensors"), tensors);
  const auto bytes = torch::pickle_save(c10::IValue(record));
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IngestionError("cannot write checkpoint " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

namespace {

c10::Dict<c10::IValue, c10::IValue> read_record(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IngestionError("cannot read checkpoint " + path.string());
  std::vector<char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  auto value = torch::pickle_load(bytes);
  if (!value.isGenericDict()) throw ConsistencyError("not a checkpoint: " + path.string());
  auto record = value.toGenericDict();
  if (!record.contains("format") ||
      record.at("format").toStringRef() != "maskanynet-checkpoint/1") {
    throw ConsistencyError("unsupported checkpoint format in " + path.string());
  }
  return record;
}

}  // namespace

ModelConfig read_checkpoint_config(const std::filesystem::path& path) {
  auto record = read_record(path);
  return model_config_from_json(nlohmann::json::parse(record.at("config").toStringRef()));
}

MaskAnyNet load_checkpoint(const std::filesystem::path& path) {
  auto record = read_record(path);
  MaskAnyNet model(model_config_from_json(nlohmann::json::parse(record.at("config").toStringRef())));
  auto tensors = record.at("tensors").toGenericDict();
  torch::NoGradGuard no_grad;
  auto assign = [&](const std::string& name, torch::Tensor& target) {
    if (!tensors.contains(name)) throw ConsistencyError("checkpoint lacks tensor '" + name + "'");
    auto value = tensors.at(name).toTensor();
    if (value.sizes() != target.sizes()) {
      throw ConsistencyError("checkpoint tensor '" + name + "' has mismatched shape");
    }
    target.copy_(value);
  };
  for (auto& p : model->named_parameters()) assign(p.key(), p.value());
  for (auto& b : model->named_buffers()) assign(b.key(), b.value());
  return model;
}

}  // namespace maskany
