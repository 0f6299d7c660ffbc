#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "adapi/nn.h"

namespace adapi::masks {

using nn::RealTensor;

// Thresholded 0/1 mask over one host tensor.
struct BinaryMask {
  Shape shape;
  std::vector<uint8_t> bits;

  BinaryMask() = default;
  BinaryMask(Shape s, std::vector<uint8_t> b);
  static BinaryMask ones(Shape s);

  size_t size() const { return bits.size(); }
  size_t popcount() const;
  // ones / size, exactly.
  double density() const;
  RealTensor to_real() const;
  bool operator==(const BinaryMask&) const = default;
};

struct DensityLevel {
  std::string name;  // e.g. "L4"
  double weight_density = 1.0;
  double relu_density = 1.0;
  bool operator==(const DensityLevel&) const = default;
};

// Levels in ascending density; index 0 is the sparsest.
struct DensitySchedule {
  std::vector<DensityLevel> levels;

  void validate() const;
  size_t size() const { return levels.size(); }
  // Index of the level named `name`; throws ConfigError when absent.
  size_t index_of(const std::string& name) const;
  // The four deployment levels L4 (0.05), L3 (0.1), L2 (0.2), L1 (0.4).
  static DensitySchedule standard();
  static DensitySchedule from_json(const nlohmann::json& j);
  nlohmann::json to_json() const;
  bool operator==(const DensitySchedule&) const = default;
};

// bit = 1 iff value > threshold.
BinaryMask indicator(const RealTensor& soft, double threshold);

// Keeps the ceil(d * size) largest values; ties go to the lower flat index.
// Nested in d for a fixed soft tensor.
BinaryMask mask_for_density(const RealTensor& soft, double density);

// A cut value between the kept and dropped values of mask_for_density. When
// no tie straddles the cut, indicator(soft, threshold) reproduces that mask.
double threshold_for_density(const RealTensor& soft, double density);

enum class ThresholdScope { PerTensor, Global };

// Masks for a list of tensors at one density. Global scope ranks all values
// of all tensors together.
std::vector<BinaryMask> masks_for_density(std::span<const RealTensor> soft, double density, ThresholdScope scope);

struct LevelMasks {
  std::vector<BinaryMask> weight;   // one per weight layer
  std::vector<BinaryMask> feature;  // one per ReLU layer
  bool operator==(const LevelMasks&) const = default;
};

struct MaskFamily {
  DensitySchedule schedule;
  std::vector<LevelMasks> levels;  // parallel to schedule.levels

  nn::MaskSet mask_set(size_t level) const;
  // Shapes must match the model's weight and ReLU slots.
  void validate(const nn::ModelSpec& spec) const;
  bool operator==(const MaskFamily&) const = default;
};

MaskFamily mask_family(std::span<const RealTensor> soft_weight, std::span<const RealTensor> soft_feature,
                       const DensitySchedule& schedule, ThresholdScope scope = ThresholdScope::PerTensor);

struct NestingViolation {
  size_t sparser_level = 0;
  size_t denser_level = 0;
  bool weight = true;  // false: feature mask
  size_t tensor = 0;
  size_t index = 0;    // flat position set at the sparser level but not the denser one
};

// Empty when every 1-bit of every level is also set at all denser levels.
std::optional<NestingViolation> check_nesting(const MaskFamily& family);

// Container: JSON header (levels, densities, shapes, per-level crc32) and a
// bit-packed payload, level after level, weight masks before feature masks.
void save_masks(const MaskFamily& family, const std::string& path);
// With `spec`, mask shapes are checked against the model (ShapeError).
// A checksum mismatch raises FormatError.
MaskFamily load_masks(const std::string& path, const nn::ModelSpec* spec = nullptr);

std::vector<uint8_t> pack_bits(std::span<const uint8_t> bits);
std::vector<uint8_t> unpack_bits(std::span<const uint8_t> packed, size_t count);

}  // namespace adapi::masks
