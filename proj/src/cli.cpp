#include "maskany/cli.hpp"

#include <fstream>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"
#include "maskany/dataset.hpp"
#include "maskany/error.hpp"
#include "maskany/explain.hpp"
#include "maskany/harness.hpp"
#include "maskany/image_io.hpp"
#include "maskany/reuse.hpp"

namespace maskany {
namespace {

namespace fs = std::filesystem;
using nlohmann::json;

struct Common {
  std::string config;
  std::vector<std::string> set;
  std::optional<std::uint64_t> seed;
  std::string out;
  bool json = false;
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("--config", c.config, "experiment config (JSON)");
  cmd->add_option("--set", c.set, "override a config key: key=value (repeatable)");
  cmd->add_option("--seed", c.seed, "run seed (sets seeds=[N])");
  cmd->add_option("--out", c.out, "output directory (sets output.dir)");
  cmd->add_flag("--json", c.json, "print a machine-readable summary to stdout");
}

ExperimentConfig build_config(const Common& c, const std::vector<std::string>& extra = {}) {
  auto cfg = c.config.empty() ? experiment_from_json(default_experiment_json())
                              : load_experiment(c.config);
  auto all = extra;
  all.insert(all.end(), c.set.begin(), c.set.end());
  if (c.seed) all.push_back("seeds=[" + std::to_string(*c.seed) + "]");
  if (!c.out.empty()) all.push_back("output.dir=" + json(c.out).dump());
  return all.empty() ? cfg : apply_overrides(cfg, all);
}

// Human-readable lines go to stdout, or to stderr when stdout carries the
// JSON summary.
struct Printer {
  bool json_mode = false;
  json summary = json::object();
  std::ostream& human() const { return json_mode ? std::cerr : std::cout; }
  void artifact(const fs::path& p) {
    human() << "artifact: " << p.string() << "\n";
    summary["artifacts"].push_back(p.string());
  }
  void finish() const {
    if (json_mode) std::cout << summary.dump(2) << "\n";
  }
};

json record_summary(const RunRecord& r) {
  return {{"arm", r.arm},         {"seed", r.seed},         {"status", r.status},
          {"top1", r.metrics.top1}, {"top5", r.metrics.top5}, {"params", r.metrics.params},
          {"latency_ms", r.metrics.latency_ms}, {"checkpoint", r.checkpoint},
          {"config_hash", r.config_hash}};
}

std::vector<double> parse_ratios(const std::vector<std::string>& items) {
  std::vector<double> out;
  for (const auto& s : items) {
    const auto slash = s.find('/');
    try {
      out.push_back(slash == std::string::npos
                        ? std::stod(s)
                        : std::stod(s.substr(0, slash)) / std::stod(s.substr(slash + 1)));
    } catch (const std::logic_error&) {
      throw ConfigError("cannot parse ratio '" + s + "'");
    }
  }
  return out;
}

std::vector<MaskStrategy> parse_strategies(const std::vector<std::string>& items) {
  std::vector<MaskStrategy> out;
  for (const auto& s : items) out.push_back(parse_strategy(s));
  return out;
}

torch::Tensor crop_to_multiple(const torch::Tensor& image, std::int64_t multiple) {
  const auto h = image.size(1) / multiple * multiple;
  const auto w = image.size(2) / multiple * multiple;
  if (h == 0 || w == 0) throw DimensionError("image is smaller than one mask period");
  return image.narrow(1, (image.size(1) - h) / 2, h).narrow(2, (image.size(2) - w) / 2, w).contiguous();
}

void write_sweep_summary(Printer& p, const SweepTable& t) {
  p.artifact(t.csv);
  json rows = json::array();
  for (const auto& r : t.rows) {
    p.human() << "  " << r.label << " ratio " << r.ratio << " seed " << r.seed << ": " << r.status;
    if (r.status == "ok") p.human() << " top1 " << r.top1 << "%";
    if (!r.message.empty()) p.human() << " (" << r.message << ")";
    p.human() << "\n";
    rows.push_back({{"label", r.label}, {"ratio", r.ratio}, {"seed", r.seed}, {"status", r.status},
                    {"top1", r.top1}, {"top5", r.top5}});
  }
  p.human() << "best: " << t.best_label << " at ratio " << t.best_ratio << " (mean top-1 "
            << t.best_top1 << "%)\n";
  p.summary["rows"] = rows;
  p.summary["best"] = {{"label", t.best_label}, {"ratio", t.best_ratio}, {"top1", t.best_top1}};
}

}  // namespace

int run_cli(int argc, char** argv) {
  CLI::App app{"maskany: masking, reuse and dual-branch fusion experiments"};
  app.require_subcommand(1);
  Common common;

  // mask-preview
  auto* preview = app.add_subcommand("mask-preview", "mask an image and compose its reuse image");
  add_common(preview, common);
  std::string preview_image;
  std::string strategy;
  std::optional<double> ratio;
  std::optional<std::int64_t> block_size;
  preview->add_option("--image", preview_image, "input image (default: a bundled sample photo)");
  preview->add_option("--strategy", strategy, "mask.strategy");
  preview->add_option("--ratio", ratio, "mask.ratio");
  preview->add_option("--block-size", block_size, "mask.block_size");

  // train / eval
  auto* train_cmd = app.add_subcommand("train", "train every seed of a config");
  add_common(train_cmd, common);
  auto* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint");
  add_common(eval_cmd, common);
  std::string checkpoint;
  std::string split_name = "val";
  eval_cmd->add_option("--checkpoint", checkpoint, "checkpoint file")->required();
  eval_cmd->add_option("--split", split_name, "train or val")->check(CLI::IsMember({"train", "val"}));

  // sweeps
  auto* sweep_ratio = app.add_subcommand("sweep-ratio", "accuracy against mask ratio");
  add_common(sweep_ratio, common);
  std::vector<std::string> ratio_items;
  std::vector<std::string> strategy_items;
  sweep_ratio->add_option("--ratios", ratio_items, "ratios, e.g. 0.25 or 1/9")->required()->delimiter(',');
  sweep_ratio->add_option("--strategies", strategy_items, "strategies (default: mask.strategy)")
      ->delimiter(',');
  auto* sweep_strategy_cmd = app.add_subcommand("sweep-strategy", "accuracy per masking strategy");
  add_common(sweep_strategy_cmd, common);
  auto* sweep_ablation_cmd = app.add_subcommand("sweep-ablation", "baseline, M, M+R, M+R+FFA arms");
  add_common(sweep_ablation_cmd, common);

  // analyze
  auto* analyze = app.add_subcommand("analyze", "entropy / similarity analysis of a corpus");
  add_common(analyze, common);
  std::string images_dir;
  std::string extractor_ckpt;
  std::vector<std::string> analyze_strategies{"patch", "grid", "random"};
  std::int64_t analyze_block = kDefaultBlockSize;
  double analyze_ratio = kDefaultMaskRatio;
  std::int64_t pairs = FScoreConfig{}.pair_count;
  std::int64_t corpus_size = 200;
  std::int64_t corpus_image_size = 224;
  std::int64_t random_min = 0;
  std::int64_t random_max = 0;
  analyze->add_option("--images", images_dir, "image directory (default: a generated photo corpus)");
  analyze->add_option("--extractor", extractor_ckpt, "baseline checkpoint for deep features");
  analyze->add_option("--strategies", analyze_strategies, "strategies")->delimiter(',');
  analyze->add_option("--block-size", analyze_block, "mask block size");
  analyze->add_option("--ratio", analyze_ratio, "mask ratio");
  analyze->add_option("--pairs", pairs, "pairs per strategy");
  analyze->add_option("--corpus-size", corpus_size, "images in the generated corpus");
  analyze->add_option("--random-min", random_min, "smallest random-mask rectangle edge (px)");
  analyze->add_option("--random-max", random_max, "largest random-mask rectangle edge (px)");
  analyze->add_option("--corpus-image-size", corpus_image_size, "edge of generated corpus images");

  // heatmap
  auto* heatmap = app.add_subcommand("heatmap", "Grad-CAM heatmaps and feature dumps");
  add_common(heatmap, common);
  std::string heat_ckpt;
  std::string baseline_ckpt;
  std::vector<std::string> heat_images;
  std::string layer;
  std::optional<std::int64_t> target;
  std::vector<std::string> dump_layers;
  heatmap->add_option("--checkpoint", heat_ckpt, "model checkpoint")->required();
  heatmap->add_option("--baseline", baseline_ckpt, "baseline checkpoint for a comparison grid");
  heatmap->add_option("--image", heat_images, "input images (default: validation samples)");
  heatmap->add_option("--layer", layer, "layer (default: last spatial layer after fusion)");
  heatmap->add_option("--class", target, "target class (default: predicted)");
  heatmap->add_option("--dump", dump_layers, "layers whose activations to dump")->delimiter(',');

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  Printer p;
  p.json_mode = common.json;
  try {
    if (*preview) {
      std::vector<std::string> extra;
      if (!strategy.empty()) extra.push_back("mask.strategy=" + json(strategy).dump());
      if (ratio) extra.push_back("mask.ratio=" + json(*ratio).dump());
      if (block_size) {
        extra.push_back("mask.block_size=" + std::to_string(*block_size));
        // Keep the config consistent; the preview image is not the dataset.
        extra.insert(extra.begin(), "dataset.image_size=" + std::to_string(*block_size * 4));
      }
      const auto cfg = build_config(common, extra);
      const auto& policy = cfg.model.mask;
      torch::Tensor image;
      if (preview_image.empty()) {
        image = resize_bilinear(read_image(find_photo("astronaut", photo_search_path())), {256, 256});
      } else {
        image = read_image(preview_image);
      }
      image = crop_to_multiple(image, policy.block_size * std::max<std::int64_t>(1, grid_period(policy.ratio)));
      const Dims dims{image.size(1), image.size(2)};
      const auto range = policy.random_size.max > 0 ? policy.random_size : default_random_size_range(dims, policy.block_size);
      const auto seed = cfg.seeds.front();
      const auto spec = generate_mask(policy.strategy, dims, policy.block_size, policy.ratio, seed, range);
      const auto masked = apply_mask(image, spec, policy.fill);
      const auto patches = extract_regions(image, spec, policy.block_size);
      const auto reuse = compose_reuse(patches, policy.block_size);
      const auto restored = scatter_back(reuse, spec, masked.pixels, policy.block_size);
      const bool exact = torch::equal(restored, image);

      const fs::path out(cfg.out_dir);
      fs::create_directories(out);
      write_image(out / "original.png", image);
      p.artifact(out / "original.png");
      write_image(out / "masked.png", masked.pixels);
      p.artifact(out / "masked.png");
      for (const auto& f : export_reuse(reuse, out / "reuse.png")) p.artifact(f);
      write_image(out / "reuse_resized.png", resize_to(reuse, dims));
      p.artifact(out / "reuse_resized.png");
      std::ofstream(out / "mask.txt") << serialize(spec);
      p.artifact(out / "mask.txt");
      p.human() << "strategy " << to_string(spec.strategy) << ", " << spec.masked_count() << " of "
                << spec.cell_count() << " cells masked (coverage " << spec.coverage() << "), "
                << reuse.layout.size() << " reuse patches\n";
      p.human() << "round-trip: " << (exact ? "ok (bit-exact)" : "MISMATCH") << "\n";
      p.summary["round_trip"] = exact;
      p.summary["coverage"] = spec.coverage();
      p.summary["strategy"] = std::string(to_string(spec.strategy));
      p.finish();
      return exact ? 0 : 1;
    }

    if (*train_cmd) {
      const auto cfg = build_config(common);
      json runs = json::array();
      bool ok = true;
      for (const auto& r : train_all(cfg)) {
        p.human() << r.arm << " seed " << r.seed << ": " << r.status << " top1 " << r.metrics.top1
                  << "% top5 " << r.metrics.top5 << "% params " << r.metrics.params << "\n";
        if (!r.checkpoint.empty()) p.artifact(r.checkpoint);
        runs.push_back(record_summary(r));
        ok = ok && r.status == "ok";
      }
      p.artifact(fs::path(cfg.out_dir) / "records.jsonl");
      p.summary["runs"] = runs;
      p.finish();
      return ok ? 0 : 1;
    }

    if (*eval_cmd) {
      const auto cfg = build_config(common);
      const auto r = evaluate(checkpoint, cfg, split_name == "train" ? Split::train : Split::val);
      p.human() << "top1 " << r.metrics.top1 << "% top5 " << r.metrics.top5 << "% params "
                << r.metrics.params << " latency " << r.metrics.latency_ms << " ms/image\n";
      p.artifact(fs::path(cfg.out_dir) / "records.jsonl");
      p.summary["eval"] = record_summary(r);
      p.finish();
      return 0;
    }

    if (*sweep_ratio) {
      const auto cfg = build_config(common);
      write_sweep_summary(p, sweep_mask_ratio(cfg, parse_ratios(ratio_items), parse_strategies(strategy_items)));
      p.artifact(fs::path(cfg.out_dir) / "records.jsonl");
      p.finish();
      return 0;
    }
    if (*sweep_strategy_cmd) {
      const auto cfg = build_config(common);
      write_sweep_summary(p, sweep_strategy(cfg));
      p.artifact(fs::path(cfg.out_dir) / "records.jsonl");
      p.finish();
      return 0;
    }
    if (*sweep_ablation_cmd) {
      const auto cfg = build_config(common);
      write_sweep_summary(p, sweep_ablation(cfg));
      p.artifact(fs::path(cfg.out_dir) / "records.jsonl");
      p.finish();
      return 0;
    }

    if (*analyze) {
      const auto cfg = build_config(common);
      const fs::path out(cfg.out_dir);
      AnalysisConfig ac;
      ac.block_size = analyze_block;
      ac.ratio = analyze_ratio;
      ac.seed = cfg.seeds.front();
      ac.fscore.pair_count = pairs;
      ac.random_size = {random_min, random_max};
      fs::path dir = images_dir;
      if (dir.empty()) {
        dir = out / "corpus";
        write_photo_corpus(dir, corpus_size, corpus_image_size, ac.seed);
        p.artifact(dir);
      }
      FeatureExtractor extractor;
      std::string name;
      if (extractor_ckpt.empty()) {
        extractor = random_extractor(ac.seed);
        name = "resnet-mini (untrained, seed " + std::to_string(ac.seed) + ")";
      } else {
        extractor = checkpoint_extractor(load_checkpoint(extractor_ckpt));
        name = extractor_ckpt;
      }
      const auto report = analyze_corpus(dir, parse_strategies(analyze_strategies), ac, extractor, name);
      write_analysis_csv(out / "analysis.csv", report);
      p.artifact(out / "analysis.csv");
      json sums = json::array();
      for (const auto& s : report.summaries) {
        p.human() << to_string(s.strategy) << ": n=" << s.count << " H_m " << s.h_masked << " H_c "
                  << s.h_reuse << " dH " << s.delta_h << " S_ds " << s.s_ds << " S " << s.s
                  << " F " << s.f << "\n";
        sums.push_back({{"strategy", std::string(to_string(s.strategy))}, {"count", s.count},
                        {"H_m", s.h_masked}, {"H_c", s.h_reuse}, {"delta_H", s.delta_h},
                        {"S_ds", s.s_ds}, {"S", s.s}, {"F", s.f}});
      }
      json summary = {{"extractor", report.extractor}, {"strategies", sums},
                      {"skipped", report.skipped}};
      if (report.entropy_order) {
        p.human() << "entropy ordering dH(random) < min(dH(patch), dH(grid)): "
                  << (*report.entropy_order ? "pass" : "fail") << "\n";
        p.human() << "similarity ordering S_ds(grid) > S_ds(patch) > S_ds(random): "
                  << (*report.similarity_order ? "pass" : "fail") << "\n";
        summary["entropy_order"] = *report.entropy_order;
        summary["similarity_order"] = *report.similarity_order;
      }
      std::ofstream(out / "analysis_summary.json") << summary.dump(2) << "\n";
      p.artifact(out / "analysis_summary.json");
      p.summary["analysis"] = summary;
      p.finish();
      return 0;
    }

    if (*heatmap) {
      const auto cfg = build_config(common);
      const fs::path out(cfg.out_dir);
      auto model = load_checkpoint(heat_ckpt);
      model->eval();
      const auto size = model->config().image_size;
      std::vector<torch::Tensor> images;
      if (heat_images.empty()) {
        const auto data = load_data(cfg.dataset);
        for (std::int64_t i = 0; i < std::min<std::int64_t>(4, data.val.size()); ++i) {
          images.push_back(data.val.images[i]);
        }
      } else {
        for (const auto& f : heat_images) images.push_back(resize_bilinear(read_image(f), {size, size}));
      }
      std::optional<MaskAnyNet> baseline;
      if (!baseline_ckpt.empty()) {
        baseline = load_checkpoint(baseline_ckpt);
        (*baseline)->eval();
      }
      const auto seed = cfg.seeds.front();
      const auto tm = tapped(model, seed);
      std::vector<torch::Tensor> row_model, row_base;
      json maps = json::array();
      for (std::size_t i = 0; i < images.size(); ++i) {
        std::int64_t cls = 0;
        if (target) {
          cls = *target;
        } else {
          torch::NoGradGuard no_grad;
          cls = model->forward(images[i].unsqueeze(0), seed).argmax(1).item<std::int64_t>();
        }
        const auto h = grad_cam(tm, images[i], cls, layer);
        const auto overlay = overlay_heatmap(images[i], h.map);
        const auto file = out / ("heatmap_" + std::to_string(i) + ".png");
        write_image(file, overlay);
        p.artifact(file);
        row_model.push_back(overlay);
        maps.push_back({{"image", i}, {"class", cls}, {"layer", h.layer}});
        if (baseline) {
          const auto hb = grad_cam(tapped(*baseline, seed), images[i], cls, "");
          row_base.push_back(overlay_heatmap(images[i], hb.map));
        }
        if (!dump_layers.empty()) {
          const auto dir = out / ("features_" + std::to_string(i));
          dump_features(tm, images[i], dump_layers, dir);
          for (const auto& l : dump_layers) p.artifact(dir / (l + ".png"));
        }
      }
      std::vector<std::vector<torch::Tensor>> rows;
      if (baseline) rows.push_back(row_base);
      rows.push_back(row_model);
      write_heatmap_grid(out / "heatmap_grid.png", images, rows);
      p.artifact(out / "heatmap_grid.png");
      p.summary["heatmaps"] = maps;
      p.finish();
      return 0;
    }
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const ValidationError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}

}  // namespace maskany
