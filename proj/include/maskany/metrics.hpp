#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>

#include <torch/torch.h>

#include "maskany/masking.hpp"

namespace maskany {

/// Per-image analysis of one masking strategy. Entropies are in bits.
struct AnalysisRecord {
  std::string image;
  MaskStrategy strategy = MaskStrategy::patch;
  double h_masked = 0.0;     // H_m
  double h_reuse = 0.0;      // H_c
  double delta_h = 0.0;      // H_c - H_m
  double s_ds = 0.0;         // deep-feature cosine similarity
  double s = 0.0;            // anchored similarity score
};

struct FScoreConfig {
  double w1 = 0.5;
  double w2 = 0.5;
  double s_a = 0.5;
  /// Upper bound on (masked, reuse) pairs per strategy in a corpus run.
  std::int64_t pair_count = 1000;
};

/// 8-bit intensities of an image. Float tensors are taken to be in [0, 1];
/// uint8 tensors are used as-is. Three-channel input is converted to luma
/// with the ITU-R BT.601 weights (0.299, 0.587, 0.114).
torch::Tensor to_intensity_u8(const torch::Tensor& image);

/// Shannon entropy (bits) of the 256-bin intensity histogram.
double shannon_entropy(const torch::Tensor& image);

/// H(reuse) - H(masked image).
double entropy_delta(const MaskedImage& masked, const torch::Tensor& reuse_resized);

/// Maps one C x H x W image to a flat feature vector.
using FeatureExtractor = std::function<torch::Tensor(const torch::Tensor&)>;

/// Cosine similarity of the extracted feature vectors. Throws DomainError
/// when either vector is zero.
double deep_similarity(const torch::Tensor& a, const torch::Tensor& b,
                       const FeatureExtractor& extractor);
double cosine_similarity(const torch::Tensor& u, const torch::Tensor& v);

/// exp(-|s_ds - s_a|).
double similarity_score(double s_ds, double s_a = 0.5);

/// Mean of w1 * S + w2 * dH over the records.
double f_score(std::span<const AnalysisRecord> records, const FScoreConfig& config = {});

}  // namespace maskany
