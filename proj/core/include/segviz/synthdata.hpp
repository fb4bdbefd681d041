#pragma once

#include <cstdint>
#include <filesystem>
#include <set>
#include <string>
#include <vector>

#include "segviz/tensor.hpp"

namespace segviz::synth {

struct OrganSpec {
  float intensity = 0.5f;
  // Full axis length as a fraction of the image extent, drawn per axis.
  double axis_lo = 0.1;
  double axis_hi = 0.2;
};

// Two-organ phantom: a large bright "liver-like" ellipse (class 1) and a
// small dimmer "spleen-like" ellipse (class 2) on a dark background, with
// additive Gaussian noise. Shapes are disjoint and fully inside the volume.
struct PhantomConfig {
  int spatial_dims = 2;
  std::vector<size_t> size = {64, 64};
  float background = 0.2f;
  float noise_sigma = 0.03f;
  OrganSpec liver{0.7f, 0.25, 0.40};   // class 1
  OrganSpec spleen{0.5f, 0.08, 0.15};  // class 2
  uint64_t seed = 0;

  void validate() const;
};

struct Sample {
  uint64_t id = 0;
  Tensor image;                 // [1, spatial...], values in [0, 1]
  std::vector<uint8_t> labels;  // one voxel label each: 0 bg, 1 liver, 2 spleen
  std::set<int> annotated;      // classes whose labels are trustworthy

  std::vector<size_t> spatial() const {
    return {image.shape().begin() + 1, image.shape().end()};
  }
};

Sample generate_sample(const PhantomConfig& cfg, uint64_t sample_id);

// Classes outside `keep` become background in the label map; the image is
// untouched. Models a node that only annotates its own structures.
Sample mask_annotations(Sample sample, const std::set<int>& keep);

// Min-max rescale to [0, 1]; a constant volume has no range to normalize.
Tensor normalize_intensity(const Tensor& volume);

struct Patch {
  Tensor image;  // [1, patch...]
  Tensor label;  // [1, patch...], binary for the requested class
};

// Random patches whose chosen center voxel is foreground (== class_id) with
// probability pos_ratio, background otherwise. Candidate centers are taken
// from the region where the window fits; if a class has no voxel there, the
// window is clamped into bounds instead.
std::vector<Patch> sample_patches(const Sample& sample, const std::vector<size_t>& patch_size,
                                  int count, double pos_ratio, int class_id, uint64_t seed);

struct NodeDataset {
  std::string task;
  int class_id = 0;
  std::vector<Sample> train;
  std::vector<Sample> val;
};

// n phantoms with ids [id_offset, id_offset + n), labels masked down to the
// node's class, split train:val by the given ratio in id order.
NodeDataset make_node_dataset(const PhantomConfig& cfg, const std::string& task, int class_id,
                              size_t n, uint64_t id_offset, double split);

// Fully annotated held-out volumes (the external test analog).
std::vector<Sample> make_test_set(const PhantomConfig& cfg, size_t n, uint64_t id_offset);

// Cache format: <id>.img.bin (raw little-endian f32), <id>.lbl.bin (raw u8),
// plus manifest.json listing ids, shapes, annotated classes and split.
void save_node_dataset(const NodeDataset& ds, const std::filesystem::path& dir);
NodeDataset load_node_dataset(const std::filesystem::path& dir);
void save_test_set(const std::vector<Sample>& samples, const std::filesystem::path& dir);
std::vector<Sample> load_test_set(const std::filesystem::path& dir);

}  // namespace segviz::synth
