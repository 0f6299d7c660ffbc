#include "adapi/data.h"

#include <cmath>
#include <filesystem>
#include <numbers>

#include "adapi/container.h"
#include "adapi/errors.h"

namespace adapi::nn {

Dataset Dataset::subset(const std::vector<size_t>& indices) const {
  Dataset d;
  d.sample_shape = sample_shape;
  d.classes = classes;
  d.x = batch_x(indices);
  d.y = batch_y(indices);
  return d;
}

Dataset Dataset::head(size_t n) const {
  std::vector<size_t> idx(std::min(n, size()));
  for (size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  return subset(idx);
}

RealTensor Dataset::batch_x(const std::vector<size_t>& indices) const {
  const size_t per = sample_numel();
  Shape shape = {indices.size()};
  shape.insert(shape.end(), sample_shape.begin(), sample_shape.end());
  RealTensor out(shape);
  for (size_t i = 0; i < indices.size(); ++i) {
    ADAPI_ENFORCE(indices[i] < size(), ShapeError, "dataset index out of range");
    std::copy_n(x.data() + indices[i] * per, per, out.data() + i * per);
  }
  return out;
}

std::vector<int> Dataset::batch_y(const std::vector<size_t>& indices) const {
  std::vector<int> out(indices.size());
  for (size_t i = 0; i < indices.size(); ++i) out[i] = y.at(indices[i]);
  return out;
}

std::vector<size_t> shuffled_indices(size_t n, Prg& rng) {
  std::vector<size_t> idx(n);
  for (size_t i = 0; i < n; ++i) idx[i] = i;
  for (size_t i = n; i > 1; --i) std::swap(idx[i - 1], idx[rng.uniform(i)]);
  return idx;
}

Dataset two_moons(size_t n, double noise, Prg& rng) {
  Dataset d;
  d.sample_shape = {2};
  d.classes = 2;
  d.x = RealTensor({n, 2});
  d.y.resize(n);
  for (size_t i = 0; i < n; ++i) {
    const int label = static_cast<int>(i % 2);
    const double t = std::numbers::pi * rng.uniform_real();
    double px, py;
    if (label == 0) {
      px = std::cos(t);
      py = std::sin(t);
    } else {
      px = 1.0 - std::cos(t);
      py = 0.5 - std::sin(t);
    }
    d.x[2 * i] = px + noise * rng.normal();
    d.x[2 * i + 1] = py + noise * rng.normal();
    d.y[i] = label;
  }
  return d;
}

Dataset gaussian_blobs(size_t n, size_t classes, size_t dims, double spread, Prg& rng) {
  ADAPI_ENFORCE(classes >= 2 && dims >= 1, ConfigError, "blobs need >= 2 classes and >= 1 dimension");
  std::vector<double> centers(classes * dims);
  for (auto& c : centers) c = 4.0 * (rng.uniform_real() * 2 - 1);
  Dataset d;
  d.sample_shape = {dims};
  d.classes = classes;
  d.x = RealTensor({n, dims});
  d.y.resize(n);
  for (size_t i = 0; i < n; ++i) {
    const size_t label = i % classes;
    for (size_t k = 0; k < dims; ++k) d.x[i * dims + k] = centers[label * dims + k] + spread * rng.normal();
    d.y[i] = static_cast<int>(label);
  }
  return d;
}

namespace {

uint32_t be32(const std::vector<uint8_t>& b, size_t off) {
  return (uint32_t{b[off]} << 24) | (uint32_t{b[off + 1]} << 16) | (uint32_t{b[off + 2]} << 8) | b[off + 3];
}

void put_be32(std::vector<uint8_t>& b, uint32_t v) {
  for (int s = 24; s >= 0; s -= 8) b.push_back(static_cast<uint8_t>(v >> s));
}

}  // namespace

Dataset load_idx(const std::string& images_path, const std::string& labels_path) {
  if (!std::filesystem::exists(images_path)) throw ConfigError("dataset file not found: " + images_path);
  if (!std::filesystem::exists(labels_path)) throw ConfigError("dataset file not found: " + labels_path);
  const auto img = io::read_file(images_path);
  const auto lab = io::read_file(labels_path);
  if (img.size() < 16 || be32(img, 0) != 0x00000803) throw FormatError(images_path + ": not an IDX3 ubyte file");
  if (lab.size() < 8 || be32(lab, 0) != 0x00000801) throw FormatError(labels_path + ": not an IDX1 ubyte file");
  const size_t n = be32(img, 4), rows = be32(img, 8), cols = be32(img, 12);
  if (be32(lab, 4) != n) throw FormatError("IDX image and label counts differ");
  if (img.size() != 16 + n * rows * cols || lab.size() != 8 + n) throw FormatError("IDX payload size mismatch");
  Dataset d;
  d.sample_shape = {1, rows, cols};
  d.x = RealTensor({n, 1, rows, cols});
  d.y.resize(n);
  int max_label = 0;
  for (size_t i = 0; i < n * rows * cols; ++i) d.x[i] = img[16 + i] / 255.0;
  for (size_t i = 0; i < n; ++i) {
    d.y[i] = lab[8 + i];
    max_label = std::max(max_label, d.y[i]);
  }
  d.classes = static_cast<size_t>(max_label) + 1;
  return d;
}

void save_idx(const Dataset& data, const std::string& images_path, const std::string& labels_path) {
  ADAPI_ENFORCE(data.sample_shape.size() == 3 && data.sample_shape[0] == 1, ShapeError,
                "IDX export needs [1, rows, cols] samples");
  std::vector<uint8_t> img, lab;
  put_be32(img, 0x00000803);
  put_be32(img, static_cast<uint32_t>(data.size()));
  put_be32(img, static_cast<uint32_t>(data.sample_shape[1]));
  put_be32(img, static_cast<uint32_t>(data.sample_shape[2]));
  for (double v : data.x.vec()) img.push_back(static_cast<uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255)));
  put_be32(lab, 0x00000801);
  put_be32(lab, static_cast<uint32_t>(data.size()));
  for (int y : data.y) lab.push_back(static_cast<uint8_t>(y));
  io::write_file(images_path, img);
  io::write_file(labels_path, lab);
}

DataSplit load_dataset(const nlohmann::json& spec, const std::string& base_dir) {
  try {
    const std::string kind = spec.at("kind").get<std::string>();
    if (kind == "two_moons" || kind == "blobs") {
      const size_t n_train = spec.value("train", size_t{1000});
      const size_t n_test = spec.value("test", size_t{500});
      Prg rng(spec.value("seed", uint64_t{7}), 0x64617461);
      Dataset all;
      if (kind == "two_moons") {
        all = two_moons(n_train + n_test, spec.value("noise", 0.1), rng);
      } else {
        all = gaussian_blobs(n_train + n_test, spec.value("classes", size_t{3}), spec.value("dims", size_t{2}),
                             spec.value("spread", 1.0), rng);
      }
      std::vector<size_t> tr(n_train), te(n_test);
      for (size_t i = 0; i < n_train; ++i) tr[i] = i;
      for (size_t i = 0; i < n_test; ++i) te[i] = n_train + i;
      return {all.subset(tr), all.subset(te)};
    }
    if (kind == "idx") {
      auto resolve = [&](const char* key) {
        const std::filesystem::path p = spec.at(key).get<std::string>();
        return (p.is_absolute() ? p : std::filesystem::path(base_dir) / p).string();
      };
      DataSplit split{load_idx(resolve("train_images"), resolve("train_labels")),
                      load_idx(resolve("test_images"), resolve("test_labels"))};
      const size_t classes = std::max(split.train.classes, split.test.classes);
      split.train.classes = split.test.classes = spec.value("classes", classes);
      return split;
    }
    throw ConfigError("unknown dataset kind '" + kind + "'");
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("dataset config: ") + e.what());
  }
}

}  // namespace adapi::nn
