#pragma once

#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "adapi/nn.h"
#include "adapi/prg.h"

namespace adapi::nn {

struct Dataset {
  RealTensor x;             // [N, sample_shape...]
  std::vector<int> y;
  Shape sample_shape;
  size_t classes = 0;

  size_t size() const { return y.size(); }
  size_t sample_numel() const { return adapi::numel(sample_shape); }
  // Rows `indices` as a new batch.
  Dataset subset(const std::vector<size_t>& indices) const;
  Dataset head(size_t n) const;
  RealTensor batch_x(const std::vector<size_t>& indices) const;
  std::vector<int> batch_y(const std::vector<size_t>& indices) const;
};

// Interleaving half circles with Gaussian noise; labels alternate by arc.
Dataset two_moons(size_t n, double noise, Prg& rng);
Dataset gaussian_blobs(size_t n, size_t classes, size_t dims, double spread, Prg& rng);

// IDX (ubyte) images [N, rows, cols] and labels [N]; pixels scaled to [0, 1]
// and shaped [N, 1, rows, cols].
Dataset load_idx(const std::string& images_path, const std::string& labels_path);
void save_idx(const Dataset& data, const std::string& images_path, const std::string& labels_path);

struct DataSplit {
  Dataset train;
  Dataset test;
};

// {"kind":"two_moons","train":1000,"test":500,"noise":0.1,"seed":7}
// {"kind":"blobs",...} or {"kind":"idx","train_images":..,"train_labels":..,"test_images":..,"test_labels":..}
// Relative IDX paths resolve against `base_dir`.
DataSplit load_dataset(const nlohmann::json& spec, const std::string& base_dir = ".");

// Fisher-Yates permutation of [0, n).
std::vector<size_t> shuffled_indices(size_t n, Prg& rng);

}  // namespace adapi::nn
