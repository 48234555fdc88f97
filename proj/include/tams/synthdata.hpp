#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <vector>

#include "tams/common.hpp"
#include "tams/ndgrad.hpp"

namespace tams::synthdata {

enum class TaskKind : std::uint8_t { classification = 0, segmentation = 1 };

enum class CorruptionKind : std::uint8_t {
  label_noise = 0,   // classification: degraded content-free image, flipped label
  occlusion = 1,     // blank the image half holding the evidence
  blur_noise = 2,    // 3x3 box blur + heavy Gaussian noise (sigma = 3x amplitude)
  mask_dropout = 3,  // segmentation: degraded image, empty or shifted mask
};

struct DatasetSample {
  std::uint32_t id = 0;
  std::uint32_t group_id = 0;
  ndgrad::Tensor features;    // [1,H,W]
  int class_label = -1;       // classification tasks
  ndgrad::Tensor mask_label;  // segmentation tasks, [H,W] binary
  bool corrupted = false;     // hidden ground truth
  bool subjectively_amenable() const { return !corrupted; }
};

struct DatasetManifest {
  TaskKind task = TaskKind::classification;
  std::uint32_t n = 0;
  double rho = 0.0;
  CorruptionKind kind = CorruptionKind::label_noise;
  std::uint64_t seed = 0;
  std::uint16_t height = 16;
  std::uint16_t width = 16;
};

struct Dataset {
  DatasetManifest manifest;
  std::vector<DatasetSample> samples;
};

// Bright-ellipse-vs-background images; exactly round(rho*n) corrupted samples,
// spread per group. A disjoint 10% of the clean samples receive one harmless
// box-blur pass (flagged not corrupted).
Dataset gen_classification(std::size_t n, std::size_t groups, double rho, CorruptionKind kind,
                           std::uint64_t seed, std::size_t image = 16);

// Ellipse blob on textured background with a binary mask; mask-dropout
// corruption guarantees Dice(provided, true) < 0.5.
Dataset gen_segmentation(std::size_t n, std::size_t groups, double rho, CorruptionKind kind,
                         std::uint64_t seed, std::size_t image = 16);

struct SplitFractions {
  double train = 0.7;
  double val = 0.15;
  double holdout = 0.15;
};

struct SplitResult {
  std::vector<DatasetSample> train, val, holdout;
};

// Group-level split: groups are shuffled by seed and assigned by cumulative
// fraction; no group straddles splits.
SplitResult split(const std::vector<DatasetSample>& samples, const SplitFractions& fractions,
                  std::uint64_t seed);

std::vector<DatasetSample> clean_validation_filter(const std::vector<DatasetSample>& samples);

// Binary dataset file plus a sibling "<path>.csv" manifest for inspection.
void dataset_save(const Dataset& dataset, const std::filesystem::path& path);
Dataset dataset_load(const std::filesystem::path& path);

}  // namespace tams::synthdata
