#include "maskany/harness.hpp"

#include <fcntl.h>
#include <unistd.h>

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <map>
#include <numbers>
#include <sstream>

#include "maskany/error.hpp"
#include "maskany/reuse.hpp"
#include "maskany/rng.hpp"

namespace maskany {
namespace {

namespace fs = std::filesystem;
using nlohmann::json;
using Clock = std::chrono::steady_clock;

std::string fmt(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

std::string path_string(const std::string& prefix, const std::string& key) {
  return prefix.empty() ? key : prefix + "." + key;
}

bool type_compatible(const json& schema, const json& value) {
  if (schema.is_number_float()) return value.is_number();
  if (schema.is_number_unsigned()) return value.is_number_unsigned();
  if (schema.is_number_integer()) return value.is_number_integer();
  if (schema.is_string()) return value.is_string();
  if (schema.is_boolean()) return value.is_boolean();
  if (schema.is_object()) return value.is_object();
  if (schema.is_array()) return value.is_array();
  return false;
}

std::string type_name(const json& schema) {
  if (schema.is_number_float()) return "number";
  if (schema.is_number_unsigned()) return "non-negative integer";
  if (schema.is_number_integer()) return "integer";
  return schema.type_name();
}

// Walks `value` against the defaults: every key must exist there with a
// compatible type.
void check_schema(const json& schema, const json& value, const std::string& prefix) {
  if (!type_compatible(schema, value)) {
    throw ConfigError("config key '" + prefix + "' must be a " + type_name(schema) + ", got " +
                      value.dump());
  }
  if (schema.is_object()) {
    for (const auto& [key, item] : value.items()) {
      if (!schema.contains(key)) {
        std::string valid;
        for (const auto& [k, _] : schema.items()) valid += (valid.empty() ? "" : ", ") + k;
        throw ConfigError("unknown config key '" + path_string(prefix, key) + "' (valid: " +
                          valid + ")");
      }
      check_schema(schema.at(key), item, path_string(prefix, key));
    }
  } else if (schema.is_array()) {
    for (std::size_t i = 0; i < value.size(); ++i) {
      const bool ok = schema.empty() ? value[i].is_string() : type_compatible(schema[0], value[i]);
      if (!ok) throw ConfigError("config key '" + prefix + "' has an invalid element " + value[i].dump());
    }
  }
}

void require(bool ok, const std::string& message) {
  if (!ok) throw ConfigError(message);
}

double scheduled_lr(const OptimConfig& o, std::int64_t epoch) {
  if (o.schedule == "constant") return o.lr;
  if (o.schedule == "step") {
    const double frac = static_cast<double>(epoch) / static_cast<double>(o.epochs);
    return o.lr * (frac >= 0.75 ? 0.01 : frac >= 0.5 ? 0.1 : 1.0);
  }
  return o.lr * 0.5 *
         (1.0 + std::cos(std::numbers::pi * static_cast<double>(epoch) /
                         static_cast<double>(o.epochs)));
}

std::unique_ptr<torch::optim::Optimizer> make_optimizer(MaskAnyNet& model, const OptimConfig& o) {
  if (o.family == "adamw") {
    return std::make_unique<torch::optim::AdamW>(
        model->parameters(), torch::optim::AdamWOptions(o.lr).weight_decay(o.weight_decay));
  }
  return std::make_unique<torch::optim::SGD>(model->parameters(),
                                             torch::optim::SGDOptions(o.lr)
                                                 .momentum(o.momentum)
                                                 .nesterov(o.nesterov && o.momentum > 0.0)
                                                 .weight_decay(o.weight_decay));
}

void set_lr(torch::optim::Optimizer& opt, double lr) {
  for (auto& group : opt.param_groups()) group.options().set_lr(lr);
}

std::vector<std::int64_t> permutation(std::int64_t n, std::uint64_t seed) {
  std::vector<std::int64_t> order(static_cast<std::size_t>(n));
  for (std::int64_t i = 0; i < n; ++i) order[static_cast<std::size_t>(i)] = i;
  Rng rng(seed);
  for (std::int64_t i = n - 1; i > 0; --i) {
    const auto j = static_cast<std::int64_t>(uniform_below(rng, static_cast<std::uint64_t>(i + 1)));
    std::swap(order[static_cast<std::size_t>(i)], order[static_cast<std::size_t>(j)]);
  }
  return order;
}

void apply_threads(const ExperimentConfig& config) {
  if (config.threads > 0) torch::set_num_threads(static_cast<int>(config.threads));
}

fs::path records_path(const ExperimentConfig& config) { return fs::path(config.out_dir) / "records.jsonl"; }

json run_json(const ExperimentConfig& config, std::uint64_t seed) {
  auto j = to_json(config);
  j["seeds"] = json::array({seed});
  return j;
}

json strip_for_hash(json j) {
  j.erase("output");
  j.erase("threads");
  j.erase("overrides");
  return j;
}

std::string ratio_tag(double ratio) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.4f", ratio);
  return buf;
}

// Whether `strategy` can realize `ratio` on the configured image grid.
std::optional<std::string> unsupported_reason(const ExperimentConfig& c, MaskStrategy strategy,
                                              double ratio) {
  const Dims dims{c.dataset.image_size, c.dataset.image_size};
  try {
    switch (strategy) {
      case MaskStrategy::patch:
        generate_patch_mask(dims, c.model.mask.block_size, ratio, 0);
        break;
      case MaskStrategy::random:
        generate_random_mask(dims, ratio, 0, default_random_size_range(dims, c.model.mask.block_size));
        break;
      default:
        generate_patch_mask(dims, c.model.mask.block_size, ratio, 0);
        generate_grid_mask(dims, c.model.mask.block_size, ratio);
        break;
    }
  } catch (const Error& e) {
    return std::string(e.what());
  }
  return std::nullopt;
}

struct SweepCell {
  std::string label;
  MaskStrategy strategy;
  double ratio;
  AblationToggles toggles;
};

SweepRow make_row(const SweepCell& cell) {
  SweepRow row;
  row.label = cell.label;
  row.strategy = cell.strategy;
  row.ratio = cell.ratio;
  row.toggles = cell.toggles;
  return row;
}

void finalize_best(SweepTable& table) {
  std::map<std::pair<std::string, double>, std::pair<double, int>> sums;
  for (const auto& r : table.rows) {
    if (r.status != "ok") continue;
    auto& s = sums[{r.label, r.ratio}];
    s.first += r.top1;
    s.second += 1;
  }
  table.best_top1 = -1.0;
  for (const auto& [key, s] : sums) {
    const double mean = s.first / s.second;
    if (mean > table.best_top1) {
      table.best_top1 = mean;
      table.best_label = key.first;
      table.best_ratio = key.second;
    }
  }
  if (table.best_top1 < 0.0) table.best_top1 = 0.0;
}

SweepTable run_sweep(const ExperimentConfig& base, const std::vector<SweepCell>& cells,
                     const std::string& csv_name) {
  apply_threads(base);
  const auto data = load_data(base.dataset);
  SweepTable table;
  for (const auto& cell : cells) {
    ExperimentConfig cfg = base;
    cfg.model.mask.strategy = cell.strategy;
    cfg.model.mask.ratio = cell.ratio;
    cfg.model.toggles = cell.toggles;
    const bool masks = cell.toggles.mask;
    if (auto reason = masks ? unsupported_reason(cfg, cell.strategy, cell.ratio) : std::nullopt) {
      SweepRow row = make_row(cell);
      row.status = "unsupported";
      row.message = *reason;
      row.shared_hash = shared_hash(cfg);
      std::clog << "warning: skipping " << cell.label << " at ratio " << cell.ratio << ": "
                << *reason << "\n";
      table.rows.push_back(row);
      continue;
    }
    for (auto seed : cfg.seeds) {
      const auto rec = train(cfg, seed, &data);
      SweepRow row = make_row(cell);
      row.seed = seed;
      row.status = rec.status;
      row.message = rec.message;
      row.top1 = rec.metrics.top1;
      row.top5 = rec.metrics.top5;
      row.config_hash = rec.config_hash;
      row.shared_hash = rec.shared_hash;
      table.rows.push_back(row);
    }
  }
  finalize_best(table);
  table.csv = fs::path(base.out_dir) / csv_name;
  write_sweep_csv(table.csv, table);
  return table;
}

torch::Tensor center_crop_to_multiple(const torch::Tensor& image, std::int64_t multiple) {
  const auto h = image.size(1) / multiple * multiple;
  const auto w = image.size(2) / multiple * multiple;
  if (h == 0 || w == 0) return {};
  const auto top = (image.size(1) - h) / 2;
  const auto left = (image.size(2) - w) / 2;
  return image.narrow(1, top, h).narrow(2, left, w).contiguous();
}

FeatureExtractor pooled_extractor(Backbone backbone, std::function<torch::Tensor(torch::Tensor)> pre) {
  backbone->eval();
  return [backbone, pre](const torch::Tensor& image) mutable {
    torch::NoGradGuard no_grad;
    auto x = image.dim() == 3 ? image.unsqueeze(0) : image;
    return backbone->pooled_features(pre(x.to(torch::kFloat32)))[0];
  };
}

}  // namespace

json default_experiment_json() {
  ExperimentConfig c;
  if (const char* data = std::getenv("MASKANY_DATA_DIR")) c.dataset.path = data;
  if (const char* out = std::getenv("MASKANY_OUT_DIR")) c.out_dir = out;
  return to_json(c);
}

json to_json(const ExperimentConfig& c) {
  const auto m = maskany::to_json(c.model);
  return {
      {"schema_version", c.schema_version},
      {"dataset",
       {{"id", c.dataset.id},
        {"path", c.dataset.path},
        {"train_subset", c.dataset.train_subset},
        {"val_subset", c.dataset.val_subset},
        {"image_size", c.dataset.image_size},
        {"seed", c.dataset.seed}}},
      {"model", {{"backbone", c.model.backbone}, {"split_point", c.model.split_point}}},
      {"fusion", m.at("fusion")},
      {"mask", m.at("mask")},
      {"ablation", m.at("ablation")},
      {"optim",
       {{"family", c.optim.family},
        {"lr", c.optim.lr},
        {"momentum", c.optim.momentum},
        {"nesterov", c.optim.nesterov},
        {"weight_decay", c.optim.weight_decay},
        {"schedule", c.optim.schedule},
        {"epochs", c.optim.epochs},
        {"batch_size", c.optim.batch_size}}},
      {"augment", {{"crop_padding", c.augment.crop_padding}, {"hflip", c.augment.hflip}}},
      {"eval", {{"batch_size", c.eval.batch_size}, {"latency_runs", c.eval.latency_runs}}},
      {"seeds", c.seeds},
      {"output", {{"dir", c.out_dir}}},
      {"threads", c.threads},
      {"overrides", c.overrides},
  };
}

ExperimentConfig experiment_from_json(const json& input) {
  const auto schema = default_experiment_json();
  check_schema(schema, input, "");
  if (input.contains("schema_version") && input.at("schema_version").get<int>() != kExperimentSchemaVersion) {
    throw ConfigError("unsupported schema_version " + input.at("schema_version").dump() +
                      " (this build reads version " + std::to_string(kExperimentSchemaVersion) + ")");
  }
  json j = schema;
  j.merge_patch(input);

  ExperimentConfig c;
  const auto& d = j.at("dataset");
  c.dataset.id = d.at("id").get<std::string>();
  c.dataset.path = d.at("path").get<std::string>();
  c.dataset.train_subset = d.at("train_subset").get<std::int64_t>();
  c.dataset.val_subset = d.at("val_subset").get<std::int64_t>();
  c.dataset.image_size = d.at("image_size").get<std::int64_t>();
  c.dataset.seed = d.at("seed").get<std::uint64_t>();

  json mj = {{"backbone", j.at("model").at("backbone")},
             {"split_point", j.at("model").at("split_point")},
             {"num_classes", 10},
             {"image_size", c.dataset.image_size},
             {"fusion", j.at("fusion")},
             {"mask", j.at("mask")},
             {"ablation", j.at("ablation")}};
  c.model = model_config_from_json(mj);
  c.model.toggles.validate();

  const auto& o = j.at("optim");
  c.optim.family = o.at("family").get<std::string>();
  c.optim.lr = o.at("lr").get<double>();
  c.optim.momentum = o.at("momentum").get<double>();
  c.optim.nesterov = o.at("nesterov").get<bool>();
  c.optim.weight_decay = o.at("weight_decay").get<double>();
  c.optim.schedule = o.at("schedule").get<std::string>();
  c.optim.epochs = o.at("epochs").get<std::int64_t>();
  c.optim.batch_size = o.at("batch_size").get<std::int64_t>();
  c.augment.crop_padding = j.at("augment").at("crop_padding").get<std::int64_t>();
  c.augment.hflip = j.at("augment").at("hflip").get<bool>();
  c.eval.batch_size = j.at("eval").at("batch_size").get<std::int64_t>();
  c.eval.latency_runs = j.at("eval").at("latency_runs").get<std::int64_t>();
  c.seeds = j.at("seeds").get<std::vector<std::uint64_t>>();
  c.out_dir = j.at("output").at("dir").get<std::string>();
  c.threads = j.at("threads").get<std::int64_t>();
  c.overrides = j.at("overrides").get<std::vector<std::string>>();

  require(c.dataset.id == "photo10" || c.dataset.id == "cifar10",
          "dataset.id must be photo10 or cifar10, got '" + c.dataset.id + "'");
  require(c.dataset.train_subset > 0 && c.dataset.val_subset > 0,
          "dataset.train_subset and dataset.val_subset must be positive");
  require(c.dataset.image_size > 0, "dataset.image_size must be positive");
  require(c.dataset.id != "cifar10" || c.dataset.image_size == 32,
          "dataset.image_size must be 32 for cifar10");
  const auto& names = backbone_ids();
  require(std::find(names.begin(), names.end(), c.model.backbone) != names.end(),
          "model.backbone '" + c.model.backbone + "' is not registered");
  require(c.model.mask.block_size > 0 && c.dataset.image_size % c.model.mask.block_size == 0,
          "mask.block_size must divide dataset.image_size");
  require(c.model.mask.ratio >= 0.0 && c.model.mask.ratio <= 1.0, "mask.ratio must lie in [0, 1]");
  require(c.optim.family == "sgd" || c.optim.family == "adamw", "optim.family must be sgd or adamw");
  require(c.optim.schedule == "cosine" || c.optim.schedule == "step" ||
              c.optim.schedule == "constant",
          "optim.schedule must be cosine, step or constant");
  require(c.optim.lr > 0.0, "optim.lr must be positive");
  require(c.optim.epochs > 0 && c.optim.batch_size > 0,
          "optim.epochs and optim.batch_size must be positive");
  require(c.augment.crop_padding >= 0, "augment.crop_padding must be non-negative");
  require(c.eval.batch_size > 0 && c.eval.latency_runs >= 0,
          "eval.batch_size must be positive and eval.latency_runs non-negative");
  require(!c.seeds.empty(), "seeds must not be empty");
  require(!c.out_dir.empty(), "output.dir must not be empty");
  return c;
}

ExperimentConfig load_experiment(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file " + path.string());
  json j;
  try {
    j = json::parse(in, nullptr, true, true);
  } catch (const json::parse_error& e) {
    throw ConfigError("config file " + path.string() + " is not valid JSON: " + e.what());
  }
  return experiment_from_json(j);
}

ExperimentConfig apply_overrides(const ExperimentConfig& config,
                                 const std::vector<std::string>& assignments) {
  auto j = to_json(config);
  const auto schema = default_experiment_json();
  for (const auto& assignment : assignments) {
    const auto eq = assignment.find('=');
    if (eq == std::string::npos || eq == 0) {
      throw ConfigError("override '" + assignment + "' is not of the form key=value");
    }
    const auto key = assignment.substr(0, eq);
    const auto text = assignment.substr(eq + 1);
    json value;
    try {
      value = json::parse(text);
    } catch (const json::parse_error&) {
      value = text;
    }
    std::string pointer;
    std::stringstream parts(key);
    std::string part;
    while (std::getline(parts, part, '.')) pointer += "/" + part;
    const json::json_pointer ptr(pointer);
    if (!schema.contains(ptr)) throw ConfigError("unknown config key '" + key + "'");
    j[ptr] = value;
    j["overrides"].push_back(assignment);
  }
  return experiment_from_json(j);
}

ExperimentConfig apply_override(const ExperimentConfig& config, const std::string& assignment) {
  return apply_overrides(config, {assignment});
}

std::string config_hash(const json& j) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : j.dump()) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

std::string shared_hash(const ExperimentConfig& config) {
  auto j = strip_for_hash(to_json(config));
  j.erase("seeds");
  j.erase("ablation");
  j["mask"].erase("strategy");
  j["mask"].erase("ratio");
  return config_hash(j);
}

std::string run_hash(const ExperimentConfig& config, std::uint64_t seed) {
  return config_hash(strip_for_hash(run_json(config, seed)));
}

std::string arm_name(const AblationToggles& t) {
  if (!t.mask) return "baseline";
  if (!t.reuse) return "M";
  return t.ffa ? "M+R+FFA" : "M+R";
}

json to_json(const RunRecord& r) {
  json epochs = json::array();
  for (const auto& e : r.epochs) {
    epochs.push_back({{"epoch", e.epoch},
                      {"lr", e.lr},
                      {"train_loss", e.train_loss},
                      {"train_acc", e.train_acc},
                      {"val_top1", e.val_top1}});
  }
  return {{"kind", r.kind},
          {"status", r.status},
          {"message", r.message},
          {"config_hash", r.config_hash},
          {"shared_hash", r.shared_hash},
          {"arm", r.arm},
          {"seed", r.seed},
          {"epochs", epochs},
          {"top1", r.metrics.top1},
          {"top5", r.metrics.top5},
          {"latency_ms", r.metrics.latency_ms},
          {"params", r.metrics.params},
          {"samples", r.metrics.samples},
          {"checkpoint", r.checkpoint},
          {"wall_seconds", r.wall_seconds},
          {"config", r.config}};
}

RunRecord run_record_from_json(const json& j) {
  RunRecord r;
  r.kind = j.at("kind").get<std::string>();
  r.status = j.at("status").get<std::string>();
  r.message = j.value("message", std::string{});
  r.config_hash = j.at("config_hash").get<std::string>();
  r.shared_hash = j.at("shared_hash").get<std::string>();
  r.arm = j.at("arm").get<std::string>();
  r.seed = j.at("seed").get<std::uint64_t>();
  for (const auto& e : j.at("epochs")) {
    r.epochs.push_back({e.at("epoch").get<std::int64_t>(), e.at("lr").get<double>(),
                        e.at("train_loss").get<double>(), e.at("train_acc").get<double>(),
                        e.at("val_top1").get<double>()});
  }
  r.metrics.top1 = j.at("top1").get<double>();
  r.metrics.top5 = j.at("top5").get<double>();
  r.metrics.latency_ms = j.at("latency_ms").get<double>();
  r.metrics.params = j.at("params").get<std::int64_t>();
  r.metrics.samples = j.value("samples", std::int64_t{0});
  r.checkpoint = j.at("checkpoint").get<std::string>();
  r.wall_seconds = j.at("wall_seconds").get<double>();
  r.config = j.at("config");
  return r;
}

void append_record(const fs::path& path, const RunRecord& record) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  const auto line = to_json(record).dump() + "\n";
  const int fd = ::open(path.c_str(), O_WRONLY | O_CREAT | O_APPEND, 0644);
  if (fd < 0) throw IngestionError("cannot open run record file " + path.string());
  const auto written = ::write(fd, line.data(), line.size());
  ::close(fd);
  if (written != static_cast<ssize_t>(line.size())) {
    throw IngestionError("short write to run record file " + path.string());
  }
}

std::vector<RunRecord> read_records(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IngestionError("cannot read run records " + path.string());
  std::vector<RunRecord> out;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty()) out.push_back(run_record_from_json(json::parse(line)));
  }
  return out;
}

DataBundle load_data(const DatasetConfig& config) {
  DataBundle b;
  if (config.id == "cifar10") {
    std::string dir = config.path;
    if (dir.empty()) {
      if (const char* env = std::getenv("MASKANY_DATA_DIR")) dir = env;
    }
    if (dir.empty()) {
      throw IngestionError(
          "cifar10 needs dataset.path (or MASKANY_DATA_DIR) pointing at the extracted "
          "cifar-10-batches-bin directory from "
          "https://www.cs.toronto.edu/~kriz/cifar-10-binary.tar.gz");
    }
    b.train = load_cifar10(dir, Split::train, config.train_subset);
    b.val = load_cifar10(dir, Split::val, config.val_subset);
    return b;
  }
  PhotoDatasetOptions o;
  o.image_size = config.image_size;
  o.seed = config.seed;
  o.count = config.train_subset;
  b.train = make_photo10(Split::train, o);
  o.count = config.val_subset;
  b.val = make_photo10(Split::val, o);
  return b;
}

ModelConfig run_model_config(const ExperimentConfig& config, const DataBundle& data,
                             std::uint64_t seed) {
  ModelConfig m = config.model;
  m.num_classes = data.train.num_classes;
  m.image_size = config.dataset.image_size;
  m.in_channels = data.train.images.size(1);
  m.seed = seed;
  const auto [mean, std] = channel_stats(data.train);
  m.input_mean.assign(mean.data_ptr<float>(), mean.data_ptr<float>() + mean.numel());
  m.input_std.assign(std.data_ptr<float>(), std.data_ptr<float>() + std.numel());
  return m;
}

torch::Tensor augment_batch(const torch::Tensor& images, const AugmentConfig& config,
                            std::uint64_t seed) {
  const auto p = config.crop_padding;
  if (p == 0 && !config.hflip) return images;
  namespace F = torch::nn::functional;
  const auto padded = p > 0 ? F::pad(images, F::PadFuncOptions({p, p, p, p})) : images;
  const auto h = images.size(2);
  const auto w = images.size(3);
  Rng rng(seed);
  std::vector<torch::Tensor> out;
  out.reserve(static_cast<std::size_t>(images.size(0)));
  for (std::int64_t i = 0; i < images.size(0); ++i) {
    const auto dy = uniform_int(rng, 0, 2 * p);
    const auto dx = uniform_int(rng, 0, 2 * p);
    auto x = padded[i].narrow(1, dy, h).narrow(2, dx, w);
    if (config.hflip && uniform_below(rng, 2) == 1) x = x.flip({2});
    out.push_back(x);
  }
  return torch::stack(out);
}

EvalMetrics accuracy(MaskAnyNet& model, const Dataset& data, std::int64_t batch_size) {
  model->eval();
  torch::NoGradGuard no_grad;
  const auto n = data.size();
  const auto k = std::min<std::int64_t>(5, model->config().num_classes);
  std::int64_t correct1 = 0, correct5 = 0;
  for (std::int64_t b = 0; b < n; b += batch_size) {
    const auto len = std::min(batch_size, n - b);
    const auto logits = model->forward(data.images.narrow(0, b, len), 0);
    const auto labels = data.labels.narrow(0, b, len);
    const auto top = std::get<1>(logits.topk(k, 1));
    correct1 += top.select(1, 0).eq(labels).sum().item<std::int64_t>();
    correct5 += top.eq(labels.unsqueeze(1)).any(1).sum().item<std::int64_t>();
  }
  EvalMetrics m;
  m.samples = n;
  m.top1 = n ? 100.0 * static_cast<double>(correct1) / static_cast<double>(n) : 0.0;
  m.top5 = n ? 100.0 * static_cast<double>(correct5) / static_cast<double>(n) : 0.0;
  m.params = parameter_count(*model);
  return m;
}

double latency_ms(MaskAnyNet& model, const torch::Tensor& image, std::int64_t runs) {
  if (runs <= 0) return 0.0;
  model->eval();
  torch::NoGradGuard no_grad;
  const auto x = image.dim() == 3 ? image.unsqueeze(0) : image.narrow(0, 0, 1);
  for (int i = 0; i < 10; ++i) model->forward(x, 0);
  std::vector<double> times;
  for (std::int64_t i = 0; i < runs; ++i) {
    const auto t0 = Clock::now();
    model->forward(x, 0);
    times.push_back(std::chrono::duration<double, std::milli>(Clock::now() - t0).count());
  }
  std::nth_element(times.begin(), times.begin() + static_cast<std::ptrdiff_t>(times.size() / 2),
                   times.end());
  return times[times.size() / 2];
}

RunRecord train(const ExperimentConfig& config, std::uint64_t seed, const DataBundle* data) {
  const auto t0 = Clock::now();
  apply_threads(config);
  DataBundle local;
  if (!data) {
    local = load_data(config.dataset);
    data = &local;
  }
  MaskAnyNet model(run_model_config(config, *data, seed));
  auto opt = make_optimizer(model, config.optim);

  RunRecord rec;
  rec.config = run_json(config, seed);
  rec.config_hash = run_hash(config, seed);
  rec.shared_hash = shared_hash(config);
  rec.arm = arm_name(config.model.toggles);
  rec.seed = seed;
  const std::string tag = rec.arm + " " + std::string(to_string(config.model.mask.strategy)) +
                          " r=" + fmt(config.model.mask.ratio) + " seed " + std::to_string(seed);

  const auto& train_set = data->train;
  const auto n = train_set.size();
  const auto bs = config.optim.batch_size;
  for (std::int64_t epoch = 0; epoch < config.optim.epochs; ++epoch) {
    const double lr = scheduled_lr(config.optim, epoch);
    set_lr(*opt, lr);
    model->train();
    const auto order = permutation(n, derive_seed(seed, 1000 + static_cast<std::uint64_t>(epoch)));
    const auto aug_seed = derive_seed(seed, 2000 + static_cast<std::uint64_t>(epoch));
    const auto mask_seed = derive_seed(seed, 3000 + static_cast<std::uint64_t>(epoch));
    double loss_sum = 0.0;
    std::int64_t correct = 0;
    for (std::int64_t b = 0, step = 0; b < n; b += bs, ++step) {
      const auto len = std::min(bs, n - b);
      const auto idx = torch::tensor(std::vector<std::int64_t>(order.begin() + b, order.begin() + b + len));
      auto x = augment_batch(train_set.images.index_select(0, idx), config.augment,
                             derive_seed(aug_seed, static_cast<std::uint64_t>(step)));
      const auto y = train_set.labels.index_select(0, idx);
      const auto logits = model->forward(x, derive_seed(mask_seed, static_cast<std::uint64_t>(step)));
      const auto loss = torch::nn::functional::cross_entropy(logits, y);
      const double value = loss.item<double>();
      if (!std::isfinite(value)) {
        rec.status = "aborted";
        rec.message = "non-finite loss at epoch " + std::to_string(epoch) + " step " +
                      std::to_string(step);
        rec.wall_seconds = std::chrono::duration<double>(Clock::now() - t0).count();
        std::clog << "[" << tag << "] " << rec.message << "; run aborted\n";
        append_record(records_path(config), rec);
        return rec;
      }
      opt->zero_grad();
      loss.backward();
      opt->step();
      loss_sum += value * static_cast<double>(len);
      correct += logits.detach().argmax(1).eq(y).sum().item<std::int64_t>();
    }
    EpochMetrics em;
    em.epoch = epoch;
    em.lr = lr;
    em.train_loss = loss_sum / static_cast<double>(n);
    em.train_acc = 100.0 * static_cast<double>(correct) / static_cast<double>(n);
    em.val_top1 = accuracy(model, data->val, config.eval.batch_size).top1;
    rec.epochs.push_back(em);
    std::clog << "[" << tag << "] epoch " << epoch + 1 << "/" << config.optim.epochs
              << " loss " << em.train_loss << " train " << em.train_acc << "% val "
              << em.val_top1 << "%\n";
  }

  rec.metrics = accuracy(model, data->val, config.eval.batch_size);
  rec.metrics.latency_ms = latency_ms(model, data->val.images.narrow(0, 0, 1), config.eval.latency_runs);
  const auto ckpt = fs::path(config.out_dir) / "checkpoints" /
                    (rec.arm + "_" + std::string(to_string(config.model.mask.strategy)) + "_r" +
                     ratio_tag(config.model.mask.ratio) + "_s" + std::to_string(seed) + "_" +
                     rec.config_hash.substr(0, 8) + ".pt");
  save_checkpoint(model, ckpt);
  rec.checkpoint = ckpt.string();
  rec.wall_seconds = std::chrono::duration<double>(Clock::now() - t0).count();
  append_record(records_path(config), rec);
  return rec;
}

std::vector<RunRecord> train_all(const ExperimentConfig& config, const DataBundle* data) {
  DataBundle local;
  if (!data) {
    local = load_data(config.dataset);
    data = &local;
  }
  std::vector<RunRecord> out;
  for (auto seed : config.seeds) out.push_back(train(config, seed, data));
  return out;
}

RunRecord evaluate(const fs::path& checkpoint, const ExperimentConfig& config, Split split,
                   const DataBundle* data) {
  const auto t0 = Clock::now();
  apply_threads(config);
  DataBundle local;
  if (!data) {
    local = load_data(config.dataset);
    data = &local;
  }
  const auto stored = read_checkpoint_config(checkpoint);
  auto expected = run_model_config(config, *data, stored.seed);
  // Models record the split point they resolved from the family default.
  if (expected.split_point.empty()) expected.split_point = stored.split_point;
  const auto a = maskany::to_json(stored);
  const auto b = maskany::to_json(expected);
  if (a != b) {
    std::string keys;
    for (const auto& op : json::diff(b, a)) keys += (keys.empty() ? "" : ", ") + op.at("path").get<std::string>();
    throw ConsistencyError("checkpoint " + checkpoint.string() +
                           " does not match the experiment config (differs at " + keys + ")");
  }
  auto model = load_checkpoint(checkpoint);
  const auto& set = split == Split::train ? data->train : data->val;
  RunRecord rec;
  rec.kind = "eval";
  rec.seed = stored.seed;
  rec.arm = arm_name(stored.toggles);
  rec.config = run_json(config, stored.seed);
  rec.config_hash = run_hash(config, stored.seed);
  rec.shared_hash = shared_hash(config);
  rec.checkpoint = checkpoint.string();
  rec.metrics = accuracy(model, set, config.eval.batch_size);
  rec.metrics.latency_ms = latency_ms(model, set.images.narrow(0, 0, 1), config.eval.latency_runs);
  rec.wall_seconds = std::chrono::duration<double>(Clock::now() - t0).count();
  append_record(records_path(config), rec);
  return rec;
}

std::string strategy_label(MaskStrategy strategy) {
  switch (strategy) {
    case MaskStrategy::combined: return "patch+grid";
    case MaskStrategy::mixed: return "patch+grid+random";
    default: return std::string(to_string(strategy));
  }
}

SweepTable sweep_mask_ratio(const ExperimentConfig& base, const std::vector<double>& ratios,
                            const std::vector<MaskStrategy>& strategies) {
  if (ratios.empty()) throw ValidationError("sweep_mask_ratio needs at least one ratio");
  for (double r : ratios) {
    if (!(r > 0.0 && r < 1.0)) {
      throw ValidationError("sweep ratio " + fmt(r) + " outside (0, 1)");
    }
  }
  if (!base.model.toggles.mask) throw ValidationError("a mask-ratio sweep needs toggle M");
  const auto list = strategies.empty() ? std::vector{base.model.mask.strategy} : strategies;
  std::vector<SweepCell> cells;
  for (auto s : list) {
    for (double r : ratios) cells.push_back({strategy_label(s), s, r, base.model.toggles});
  }
  return run_sweep(base, cells, "sweep_ratio.csv");
}

SweepTable sweep_strategy(const ExperimentConfig& base) {
  if (!base.model.toggles.mask) throw ValidationError("a strategy sweep needs toggle M");
  std::vector<SweepCell> cells;
  for (auto s : {MaskStrategy::patch, MaskStrategy::grid, MaskStrategy::random,
                 MaskStrategy::combined, MaskStrategy::mixed}) {
    cells.push_back({strategy_label(s), s, base.model.mask.ratio, base.model.toggles});
  }
  return run_sweep(base, cells, "sweep_strategy.csv");
}

SweepTable sweep_ablation(const ExperimentConfig& base, const std::vector<AblationToggles>& arms) {
  const auto list = arms.empty() ? std::vector<AblationToggles>{{false, false, false},
                                                                {true, false, false},
                                                                {true, true, false},
                                                                {true, true, true}}
                                 : arms;
  std::vector<SweepCell> cells;
  for (const auto& t : list) {
    t.validate();
    cells.push_back({arm_name(t), base.model.mask.strategy, base.model.mask.ratio, t});
  }
  return run_sweep(base, cells, "sweep_ablation.csv");
}

void write_sweep_csv(const fs::path& path, const SweepTable& table) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw IngestionError("cannot write " + path.string());
  out << "label,strategy,ratio,M,R,FFA,seed,status,top1,top5,config_hash,shared_hash,message\n";
  for (const auto& r : table.rows) {
    std::string msg = r.message;
    std::replace(msg.begin(), msg.end(), '"', '\'');
    out << r.label << ',' << to_string(r.strategy) << ',' << fmt(r.ratio) << ','
        << r.toggles.mask << ',' << r.toggles.reuse << ',' << r.toggles.ffa << ','
        << (r.status == "unsupported" ? std::string() : std::to_string(r.seed)) << ','
        << r.status << ',' << fmt(r.top1) << ',' << fmt(r.top5) << ',' << r.config_hash << ','
        << r.shared_hash << ",\"" << msg << "\"\n";
  }
}

AnalysisReport analyze_corpus(const fs::path& image_dir, const std::vector<MaskStrategy>& strategies,
                              const AnalysisConfig& config, const FeatureExtractor& extractor,
                              std::string extractor_name) {
  if (strategies.empty()) throw ValidationError("analyze_corpus needs at least one strategy");
  AnalysisReport report;
  report.extractor = std::move(extractor_name);
  auto images = load_image_folder(image_dir, &report.skipped);
  for (const auto& name : report.skipped) std::clog << "warning: skipped unreadable file " << name << "\n";

  const auto period = std::max<std::int64_t>(1, grid_period(config.ratio));
  std::vector<std::pair<std::string, torch::Tensor>> usable;
  for (auto& [name, image] : images) {
    auto crop = center_crop_to_multiple(image, config.block_size * period);
    if (!crop.defined()) {
      std::clog << "warning: skipped " << name << " (smaller than one grid period)\n";
      report.skipped.push_back(name);
      continue;
    }
    usable.emplace_back(name, crop);
    if (static_cast<std::int64_t>(usable.size()) >= config.fscore.pair_count) break;
  }
  if (usable.empty()) throw IngestionError("no readable images in " + image_dir.string());

  for (auto strategy : strategies) {
    StrategySummary sum;
    sum.strategy = strategy;
    const auto first = report.records.size();
    for (std::size_t i = 0; i < usable.size(); ++i) {
      const auto& [name, image] = usable[i];
      const Dims dims{image.size(1), image.size(2)};
      const auto spec = generate_mask(strategy, dims, config.block_size, config.ratio,
                                      derive_seed(config.seed, i),
                                      config.random_size.max > 0 ? config.random_size
                                                                 : default_random_size_range(dims, config.block_size));
      const auto masked = apply_mask(image, spec);
      const auto reuse = reuse_input(image, spec, config.block_size);
      AnalysisRecord r;
      r.image = name;
      r.strategy = strategy;
      r.h_masked = shannon_entropy(masked.pixels);
      r.h_reuse = shannon_entropy(reuse);
      r.delta_h = r.h_reuse - r.h_masked;
      r.s_ds = deep_similarity(image, reuse, extractor);
      r.s = similarity_score(r.s_ds, config.fscore.s_a);
      sum.h_masked += r.h_masked;
      sum.h_reuse += r.h_reuse;
      sum.delta_h += r.delta_h;
      sum.s_ds += r.s_ds;
      sum.s += r.s;
      report.records.push_back(r);
    }
    sum.count = static_cast<std::int64_t>(usable.size());
    const double n = static_cast<double>(sum.count);
    sum.h_masked /= n;
    sum.h_reuse /= n;
    sum.delta_h /= n;
    sum.s_ds /= n;
    sum.s /= n;
    sum.f = f_score(std::span(report.records).subspan(first), config.fscore);
    report.summaries.push_back(sum);
  }

  auto find = [&](MaskStrategy s) -> const StrategySummary* {
    for (const auto& sum : report.summaries)
      if (sum.strategy == s) return &sum;
    return nullptr;
  };
  const auto* patch = find(MaskStrategy::patch);
  const auto* grid = find(MaskStrategy::grid);
  const auto* random = find(MaskStrategy::random);
  if (patch && grid && random) {
    report.entropy_order = random->delta_h < std::min(patch->delta_h, grid->delta_h);
    report.similarity_order = grid->s_ds > patch->s_ds && patch->s_ds > random->s_ds;
  }
  return report;
}

void write_analysis_csv(const fs::path& path, const AnalysisReport& report) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw IngestionError("cannot write " + path.string());
  out << "row,image,strategy,H_m,H_c,delta_H,S_ds,S,F\n";
  for (const auto& r : report.records) {
    out << "record," << r.image << ',' << to_string(r.strategy) << ',' << fmt(r.h_masked) << ','
        << fmt(r.h_reuse) << ',' << fmt(r.delta_h) << ',' << fmt(r.s_ds) << ',' << fmt(r.s)
        << ",\n";
  }
  for (const auto& s : report.summaries) {
    out << "summary,mean of " << s.count << ',' << to_string(s.strategy) << ',' << fmt(s.h_masked)
        << ',' << fmt(s.h_reuse) << ',' << fmt(s.delta_h) << ',' << fmt(s.s_ds) << ','
        << fmt(s.s) << ',' << fmt(s.f) << '\n';
  }
}

FeatureExtractor checkpoint_extractor(const MaskAnyNet& model) {
  if (model->dual_branch()) {
    throw ConfigError("the similarity extractor needs a single-branch (baseline) checkpoint");
  }
  MaskAnyNet m = model;
  m->eval();
  return pooled_extractor(m->backbone(), [m](torch::Tensor x) { return m->standardize(x); });
}

FeatureExtractor random_extractor(std::uint64_t seed) {
  torch::manual_seed(seed);
  auto backbone = make_backbone(BackboneOptions{"resnet-mini", 3, 10, 32});
  return pooled_extractor(backbone, [](torch::Tensor x) { return x; });
}

}  // namespace maskany
