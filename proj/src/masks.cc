#include "adapi/masks.h"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "adapi/container.h"
#include "adapi/errors.h"

namespace adapi::masks {

namespace {

constexpr std::string_view kMaskMagic = "ADAPIMSK";

size_t kept_count(size_t size, double density) {
  ADAPI_ENFORCE(density > 0 && density <= 1, ConfigError, "density must lie in (0, 1]");
  // The epsilon keeps d * size from rounding up across an integer.
  const auto k = static_cast<size_t>(std::ceil(density * static_cast<double>(size) - 1e-9));
  return std::min(size, std::max<size_t>(k, 0));
}

// Flat indices sorted by value descending, index ascending on ties.
std::vector<size_t> rank_order(std::span<const double> values) {
  std::vector<size_t> order(values.size());
  std::iota(order.begin(), order.end(), size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](size_t a, size_t b) { return values[a] > values[b]; });
  return order;
}

}  // namespace

BinaryMask::BinaryMask(Shape s, std::vector<uint8_t> b) : shape(std::move(s)), bits(std::move(b)) {
  ADAPI_ENFORCE(bits.size() == adapi::numel(shape), ShapeError, "mask bits do not match shape");
}

BinaryMask BinaryMask::ones(Shape s) {
  const size_t n = adapi::numel(s);
  return BinaryMask(std::move(s), std::vector<uint8_t>(n, 1));
}

size_t BinaryMask::popcount() const { return static_cast<size_t>(std::count(bits.begin(), bits.end(), 1)); }

double BinaryMask::density() const {
  return bits.empty() ? 0.0 : static_cast<double>(popcount()) / static_cast<double>(bits.size());
}

RealTensor BinaryMask::to_real() const {
  RealTensor t(shape);
  for (size_t i = 0; i < bits.size(); ++i) t[i] = bits[i];
  return t;
}

void DensitySchedule::validate() const {
  ADAPI_ENFORCE(!levels.empty(), ConfigError, "density schedule is empty");
  for (size_t i = 0; i < levels.size(); ++i) {
    const auto& l = levels[i];
    ADAPI_ENFORCE(l.weight_density > 0 && l.weight_density <= 1 && l.relu_density > 0 && l.relu_density <= 1,
                  ConfigError, "level " + l.name + ": densities must lie in (0, 1]");
    if (i > 0) {
      const auto& p = levels[i - 1];
      ADAPI_ENFORCE(l.weight_density > p.weight_density && l.relu_density > p.relu_density, ConfigError,
                    "density schedule must be strictly increasing (" + p.name + " -> " + l.name + ")");
    }
    for (size_t j = 0; j < i; ++j) {
      ADAPI_ENFORCE(levels[j].name != l.name, ConfigError, "duplicate level name " + l.name);
    }
  }
}

size_t DensitySchedule::index_of(const std::string& name) const {
  for (size_t i = 0; i < levels.size(); ++i) {
    if (levels[i].name == name) return i;
  }
  throw ConfigError("unknown level '" + name + "'");
}

DensitySchedule DensitySchedule::standard() {
  return {{{"L4", 0.05, 0.05}, {"L3", 0.1, 0.1}, {"L2", 0.2, 0.2}, {"L1", 0.4, 0.4}}};
}

DensitySchedule DensitySchedule::from_json(const nlohmann::json& j) {
  DensitySchedule s;
  try {
    for (const auto& l : j) {
      s.levels.push_back({l.at("name").get<std::string>(), l.at("weight_density").get<double>(),
                          l.at("relu_density").get<double>()});
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("density schedule: ") + e.what());
  }
  s.validate();
  return s;
}

nlohmann::json DensitySchedule::to_json() const {
  nlohmann::json out = nlohmann::json::array();
  for (const auto& l : levels) {
    out.push_back({{"name", l.name}, {"weight_density", l.weight_density}, {"relu_density", l.relu_density}});
  }
  return out;
}

BinaryMask indicator(const RealTensor& soft, double threshold) {
  std::vector<uint8_t> bits(soft.numel());
  for (size_t i = 0; i < bits.size(); ++i) bits[i] = soft[i] > threshold ? 1 : 0;
  return BinaryMask(soft.shape(), std::move(bits));
}

BinaryMask mask_for_density(const RealTensor& soft, double density) {
  ADAPI_ENFORCE(!soft.empty(), ShapeError, "cannot threshold an empty tensor");
  const size_t k = kept_count(soft.numel(), density);
  const auto order = rank_order(soft.span());
  std::vector<uint8_t> bits(soft.numel(), 0);
  for (size_t r = 0; r < k; ++r) bits[order[r]] = 1;
  return BinaryMask(soft.shape(), std::move(bits));
}

double threshold_for_density(const RealTensor& soft, double density) {
  ADAPI_ENFORCE(!soft.empty(), ShapeError, "cannot threshold an empty tensor");
  const size_t k = kept_count(soft.numel(), density);
  const auto order = rank_order(soft.span());
  if (k >= order.size()) return soft[order.back()] - 1.0;
  if (k == 0) return soft[order.front()];
  return 0.5 * (soft[order[k - 1]] + soft[order[k]]);
}

std::vector<BinaryMask> masks_for_density(std::span<const RealTensor> soft, double density, ThresholdScope scope) {
  std::vector<BinaryMask> out;
  if (scope == ThresholdScope::PerTensor) {
    for (const auto& t : soft) out.push_back(mask_for_density(t, density));
    return out;
  }
  std::vector<double> all;
  for (const auto& t : soft) all.insert(all.end(), t.vec().begin(), t.vec().end());
  ADAPI_ENFORCE(!all.empty(), ShapeError, "cannot threshold an empty mask list");
  const size_t k = kept_count(all.size(), density);
  const auto order = rank_order(all);
  std::vector<uint8_t> bits(all.size(), 0);
  for (size_t r = 0; r < k; ++r) bits[order[r]] = 1;
  size_t off = 0;
  for (const auto& t : soft) {
    out.emplace_back(t.shape(), std::vector<uint8_t>(bits.begin() + off, bits.begin() + off + t.numel()));
    off += t.numel();
  }
  return out;
}

nn::MaskSet MaskFamily::mask_set(size_t level) const {
  ADAPI_ENFORCE(level < levels.size(), ConfigError, "level index out of range");
  nn::MaskSet m;
  for (const auto& b : levels[level].weight) m.weight.push_back(b.to_real());
  for (const auto& b : levels[level].feature) m.feature.push_back(b.to_real());
  return m;
}

void MaskFamily::validate(const nn::ModelSpec& spec) const {
  ADAPI_ENFORCE(levels.size() == schedule.size(), ShapeError, "mask family and schedule disagree on level count");
  const auto wl = spec.weight_layers();
  const auto rl = spec.relu_layers();
  for (const auto& lv : levels) {
    ADAPI_ENFORCE(lv.weight.size() == wl.size() && lv.feature.size() == rl.size(), ShapeError,
                  "mask family does not match the model's mask slots");
    for (size_t k = 0; k < wl.size(); ++k) {
      require_same_shape(lv.weight[k].shape, spec.layers[wl[k]].weight_shape(), "weight mask");
    }
    for (size_t k = 0; k < rl.size(); ++k) {
      require_same_shape(lv.feature[k].shape, spec.layers[rl[k]].out_shape, "feature mask");
    }
  }
}

MaskFamily mask_family(std::span<const RealTensor> soft_weight, std::span<const RealTensor> soft_feature,
                       const DensitySchedule& schedule, ThresholdScope scope) {
  schedule.validate();
  MaskFamily f;
  f.schedule = schedule;
  for (const auto& l : schedule.levels) {
    f.levels.push_back({masks_for_density(soft_weight, l.weight_density, scope),
                        masks_for_density(soft_feature, l.relu_density, scope)});
  }
  return f;
}

std::optional<NestingViolation> check_nesting(const MaskFamily& family) {
  for (size_t lo = 0; lo < family.levels.size(); ++lo) {
    for (size_t hi = lo + 1; hi < family.levels.size(); ++hi) {
      for (int kind = 0; kind < 2; ++kind) {
        const auto& a = kind == 0 ? family.levels[lo].weight : family.levels[lo].feature;
        const auto& b = kind == 0 ? family.levels[hi].weight : family.levels[hi].feature;
        ADAPI_ENFORCE(a.size() == b.size(), ShapeError, "levels have different mask counts");
        for (size_t t = 0; t < a.size(); ++t) {
          require_same_shape(a[t].shape, b[t].shape, "nesting check");
          for (size_t i = 0; i < a[t].bits.size(); ++i) {
            if (a[t].bits[i] && !b[t].bits[i]) return NestingViolation{lo, hi, kind == 0, t, i};
          }
        }
      }
    }
  }
  return std::nullopt;
}

std::vector<uint8_t> pack_bits(std::span<const uint8_t> bits) {
  std::vector<uint8_t> out((bits.size() + 7) / 8, 0);
  for (size_t i = 0; i < bits.size(); ++i) {
    if (bits[i]) out[i / 8] |= static_cast<uint8_t>(1u << (i % 8));
  }
  return out;
}

std::vector<uint8_t> unpack_bits(std::span<const uint8_t> packed, size_t count) {
  ADAPI_ENFORCE(packed.size() * 8 >= count, FormatError, "packed mask too short");
  std::vector<uint8_t> out(count);
  for (size_t i = 0; i < count; ++i) out[i] = (packed[i / 8] >> (i % 8)) & 1u;
  return out;
}

void save_masks(const MaskFamily& family, const std::string& path) {
  nlohmann::json levels = nlohmann::json::array();
  std::vector<uint8_t> payload;
  for (size_t li = 0; li < family.levels.size(); ++li) {
    const auto& lv = family.levels[li];
    std::vector<uint8_t> chunk;
    nlohmann::json wshapes = nlohmann::json::array(), fshapes = nlohmann::json::array();
    nlohmann::json wdens = nlohmann::json::array(), fdens = nlohmann::json::array();
    for (int kind = 0; kind < 2; ++kind) {
      for (const auto& m : kind == 0 ? lv.weight : lv.feature) {
        const auto packed = pack_bits(m.bits);
        chunk.insert(chunk.end(), packed.begin(), packed.end());
        (kind == 0 ? wshapes : fshapes).push_back(m.shape);
        (kind == 0 ? wdens : fdens).push_back(m.density());
      }
    }
    const auto& sl = family.schedule.levels.at(li);
    levels.push_back({{"name", sl.name},
                      {"weight_density", sl.weight_density},
                      {"relu_density", sl.relu_density},
                      {"weight_shapes", wshapes},
                      {"feature_shapes", fshapes},
                      {"realized_weight_density", wdens},
                      {"realized_relu_density", fdens},
                      {"offset", payload.size()},
                      {"bytes", chunk.size()},
                      {"crc32", io::crc32(chunk)}});
    payload.insert(payload.end(), chunk.begin(), chunk.end());
  }
  io::write_container(path, kMaskMagic, {{"format", 1}, {"levels", levels}}, payload);
}

MaskFamily load_masks(const std::string& path, const nn::ModelSpec* spec) {
  const auto c = io::read_container(path, kMaskMagic);
  MaskFamily f;
  try {
    for (const auto& lj : c.header.at("levels")) {
      f.schedule.levels.push_back({lj.at("name").get<std::string>(), lj.at("weight_density").get<double>(),
                                   lj.at("relu_density").get<double>()});
      const size_t off = lj.at("offset").get<size_t>(), len = lj.at("bytes").get<size_t>();
      ADAPI_ENFORCE(off + len <= c.payload.size(), FormatError, path + ": mask payload truncated");
      const std::span<const uint8_t> chunk(c.payload.data() + off, len);
      if (io::crc32(chunk) != lj.at("crc32").get<uint32_t>()) {
        throw FormatError(path + ": checksum mismatch in level " + f.schedule.levels.back().name);
      }
      LevelMasks lv;
      size_t pos = 0;
      for (int kind = 0; kind < 2; ++kind) {
        for (const auto& sj : lj.at(kind == 0 ? "weight_shapes" : "feature_shapes")) {
          const Shape shape = sj.get<Shape>();
          const size_t n = adapi::numel(shape), nbytes = (n + 7) / 8;
          ADAPI_ENFORCE(pos + nbytes <= chunk.size(), FormatError, path + ": mask chunk too short");
          (kind == 0 ? lv.weight : lv.feature).emplace_back(shape, unpack_bits(chunk.subspan(pos, nbytes), n));
          pos += nbytes;
        }
      }
      f.levels.push_back(std::move(lv));
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path + ": malformed mask header: " + e.what());
  }
  f.schedule.validate();
  if (spec) f.validate(*spec);
  return f;
}

}  // namespace adapi::masks
