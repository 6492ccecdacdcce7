#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "json.hpp"
#include "maskany/dataset.hpp"
#include "maskany/metrics.hpp"
#include "maskany/model.hpp"

namespace maskany {

inline constexpr int kExperimentSchemaVersion = 1;

struct DatasetConfig {
  std::string id = "photo10";  // photo10 | cifar10
  std::string path;            // cifar10 batch directory
  std::int64_t train_subset = 2000;
  std::int64_t val_subset = 1000;
  std::int64_t image_size = 32;
  std::uint64_t seed = 0;  // photo10 crop sampling; shared by every arm
};

struct OptimConfig {
  std::string family = "sgd";  // sgd | adamw
  double lr = 0.05;
  double momentum = 0.9;
  bool nesterov = true;
  double weight_decay = 5e-4;
  std::string schedule = "cosine";  // cosine | step | constant
  std::int64_t epochs = 20;
  std::int64_t batch_size = 64;
};

struct AugmentConfig {
  std::int64_t crop_padding = 4;
  bool hflip = true;
};

struct EvalConfig {
  std::int64_t batch_size = 250;
  std::int64_t latency_runs = 100;
};

/// Model defaults for 32 px inputs: 8 px blocks give a 4 x 4 block grid.
inline ModelConfig default_experiment_model() {
  ModelConfig m;
  m.mask.block_size = 8;
  return m;
}

/// One experiment. `model` carries backbone, fusion, mask policy and the
/// ablation toggles; its num_classes, image_size, seed and normalization are
/// filled in per run.
struct ExperimentConfig {
  int schema_version = kExperimentSchemaVersion;
  DatasetConfig dataset;
  ModelConfig model = default_experiment_model();
  OptimConfig optim;
  AugmentConfig augment;
  EvalConfig eval;
  std::vector<std::uint64_t> seeds{0, 1, 2};
  std::string out_dir = "runs";
  std::int64_t threads = 0;  // 0 keeps the torch default
  /// `key=value` overrides applied on top of the loaded file, in order.
  std::vector<std::string> overrides;
};

/// Defaults as JSON; doubles as the schema for strict parsing. Paths honour
/// MASKANY_DATA_DIR and MASKANY_OUT_DIR.
nlohmann::json default_experiment_json();
nlohmann::json to_json(const ExperimentConfig& config);
/// Strict: unknown keys, wrong types, a schema_version other than 1 and
/// illegal toggles raise ConfigError / ValidationError naming the key.
ExperimentConfig experiment_from_json(const nlohmann::json& j);
ExperimentConfig load_experiment(const std::filesystem::path& path);
/// Applies a dotted `key=value` override (value parsed as JSON, else taken
/// as a string) and re-validates.
ExperimentConfig apply_override(const ExperimentConfig& config, const std::string& assignment);
/// Applies several overrides in order, validating once at the end.
ExperimentConfig apply_overrides(const ExperimentConfig& config,
                                 const std::vector<std::string>& assignments);

/// FNV-1a over the canonical JSON dump.
std::string config_hash(const nlohmann::json& j);
/// Hash of everything except output location, seeds, ablation toggles and
/// the mask strategy/ratio: runs of one sweep must agree on it.
std::string shared_hash(const ExperimentConfig& config);
/// Hash identifying one (config, seed) run.
std::string run_hash(const ExperimentConfig& config, std::uint64_t seed);

/// "baseline", "M", "M+R" or "M+R+FFA".
std::string arm_name(const AblationToggles& toggles);

struct EpochMetrics {
  std::int64_t epoch = 0;
  double lr = 0.0;
  double train_loss = 0.0;
  double train_acc = 0.0;
  double val_top1 = 0.0;
};

struct EvalMetrics {
  double top1 = 0.0;
  double top5 = 0.0;
  double latency_ms = 0.0;
  std::int64_t params = 0;
  std::int64_t samples = 0;
};

struct RunRecord {
  std::string kind = "train";  // train | eval
  std::string status = "ok";   // ok | aborted
  std::string message;
  std::string config_hash;
  std::string shared_hash;
  std::string arm;
  std::uint64_t seed = 0;
  std::vector<EpochMetrics> epochs;
  EvalMetrics metrics;
  std::string checkpoint;
  double wall_seconds = 0.0;
  nlohmann::json config;
};

nlohmann::json to_json(const RunRecord& record);
RunRecord run_record_from_json(const nlohmann::json& j);
/// One JSON line appended with a single write on an O_APPEND descriptor.
void append_record(const std::filesystem::path& path, const RunRecord& record);
std::vector<RunRecord> read_records(const std::filesystem::path& path);

struct DataBundle {
  Dataset train;
  Dataset val;
};

/// Loads the configured dataset (train subset and validation split).
DataBundle load_data(const DatasetConfig& config);

/// Model config for one run: dataset-derived classes, size and
/// normalization plus the run seed.
ModelConfig run_model_config(const ExperimentConfig& config, const DataBundle& data,
                             std::uint64_t seed);

/// Random crop with zero padding and horizontal flip, seeded per sample.
torch::Tensor augment_batch(const torch::Tensor& images, const AugmentConfig& config,
                            std::uint64_t seed);

/// Top-1/top-5 accuracy (percent) of `model` in eval mode over `data`.
EvalMetrics accuracy(MaskAnyNet& model, const Dataset& data, std::int64_t batch_size);
/// Median batch-1 forward latency over `runs` warm runs.
double latency_ms(MaskAnyNet& model, const torch::Tensor& image, std::int64_t runs);

/// Trains one (config, seed) run, writes its checkpoint under out_dir and
/// appends the record to out_dir/records.jsonl. A non-finite loss aborts the
/// run and yields a record with status "aborted".
RunRecord train(const ExperimentConfig& config, std::uint64_t seed,
                const DataBundle* data = nullptr);
/// Trains every seed of the config.
std::vector<RunRecord> train_all(const ExperimentConfig& config, const DataBundle* data = nullptr);

/// Evaluates a checkpoint on a split of the config's dataset. Throws
/// ConsistencyError when the checkpoint was built from a different model
/// configuration.
RunRecord evaluate(const std::filesystem::path& checkpoint, const ExperimentConfig& config,
                   Split split = Split::val, const DataBundle* data = nullptr);

struct SweepRow {
  std::string label;  // strategy display name or arm
  MaskStrategy strategy = MaskStrategy::combined;
  double ratio = 0.0;
  AblationToggles toggles;
  std::uint64_t seed = 0;
  std::string status;  // ok | aborted | unsupported
  std::string message;
  double top1 = 0.0;
  double top5 = 0.0;
  std::string config_hash;
  std::string shared_hash;
};

struct SweepTable {
  std::vector<SweepRow> rows;
  std::filesystem::path csv;
  /// Best configuration by mean top-1 over seeds (label, ratio, mean top-1).
  std::string best_label;
  double best_ratio = 0.0;
  double best_top1 = 0.0;
};

/// Sweep row names: patch, grid, random, patch+grid, patch+grid+random.
std::string strategy_label(MaskStrategy strategy);

/// One run per (strategy, ratio, seed). Ratios outside (0, 1) or an empty
/// list raise ValidationError; ratios a strategy cannot realize on the
/// configured image grid become "unsupported" rows.
SweepTable sweep_mask_ratio(const ExperimentConfig& base, const std::vector<double>& ratios,
                            const std::vector<MaskStrategy>& strategies = {});
/// The five strategy rows (patch, grid, random, patch+grid,
/// patch+grid+random) at the base ratio.
SweepTable sweep_strategy(const ExperimentConfig& base);
/// Ablation arms (default: baseline, M, M+R, M+R+FFA) under identical
/// hyperparameters.
SweepTable sweep_ablation(const ExperimentConfig& base,
                          const std::vector<AblationToggles>& arms = {});
void write_sweep_csv(const std::filesystem::path& path, const SweepTable& table);

struct AnalysisConfig {
  std::int64_t block_size = kDefaultBlockSize;
  double ratio = kDefaultMaskRatio;
  std::uint64_t seed = 0;
  /// {0, 0} selects default_random_size_range per image.
  SizeRange random_size{0, 0};
  FScoreConfig fscore;
};

struct StrategySummary {
  MaskStrategy strategy = MaskStrategy::patch;
  std::int64_t count = 0;
  double h_masked = 0.0;
  double h_reuse = 0.0;
  double delta_h = 0.0;
  double s_ds = 0.0;
  double s = 0.0;
  double f = 0.0;
};

struct AnalysisReport {
  std::vector<AnalysisRecord> records;
  std::vector<StrategySummary> summaries;
  std::vector<std::string> skipped;
  std::string extractor;
  /// mean dH(random) < min(mean dH(patch), mean dH(grid)); nullopt when a
  /// strategy is missing from the run.
  std::optional<bool> entropy_order;
  /// mean S_ds(grid) > mean S_ds(patch) > mean S_ds(random).
  std::optional<bool> similarity_order;
};

/// Entropy/similarity analysis of every readable image in `image_dir`.
/// Images are centre-cropped to a multiple of the block size; at most
/// fscore.pair_count images are used per strategy.
AnalysisReport analyze_corpus(const std::filesystem::path& image_dir,
                              const std::vector<MaskStrategy>& strategies,
                              const AnalysisConfig& config, const FeatureExtractor& extractor,
                              std::string extractor_name);
/// Record rows followed by one summary row per strategy (F in the f column)
/// and the ordering checks.
void write_analysis_csv(const std::filesystem::path& path, const AnalysisReport& report);

/// Globally pooled final-stage features of a single-branch (baseline)
/// checkpoint, standardized as during training.
FeatureExtractor checkpoint_extractor(const MaskAnyNet& model);
/// Untrained resnet-mini with a fixed seed; used when no checkpoint is given.
FeatureExtractor random_extractor(std::uint64_t seed);

}  // namespace maskany
