#pragma once

#include <filesystem>

#include <opencv2/core.hpp>
#include <torch/torch.h>

namespace maskany {

// Images inside the library are float32 C x H x W tensors with RGB channel
// order and intensities in [0, 1] unless stated otherwise.

/// Reads any OpenCV-supported file as RGB. Throws IngestionError on failure.
torch::Tensor read_image(const std::filesystem::path& path);

/// Writes a C x H x W tensor (C = 1 or 3, values clamped to [0, 1]) as an
/// 8-bit image; the format follows the extension (use .png for lossless).
void write_image(const std::filesystem::path& path, const torch::Tensor& image);

cv::Mat to_mat_u8(const torch::Tensor& image);
torch::Tensor from_mat(const cv::Mat& mat);

}  // namespace maskany
