#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "segviz/nn.hpp"
#include "segviz/optim.hpp"
#include "segviz/synthdata.hpp"

namespace segviz::train {

struct Options {
  int batch_size = 2;
  std::vector<size_t> patch_size = {32, 32};
  int patches_per_volume = 1;
  double pos_ratio = 0.5;
  double dice_eps = 1e-5;
  double eval_threshold = 0.5;
  optim::CosineSchedule schedule;
  optim::AdamOptions adam;
};

// Patch-based dice training of one task head (plus the shared
// representation). Owns the optimizer and the epoch counter, so the same
// trainer object can be driven round-by-round in a federation or straight
// through as a centralized baseline; both walk an identical sample/patch
// stream for a given seed.
class Trainer {
 public:
  Trainer(nn::Model* model, const synth::NodeDataset* data, Options opts, uint64_t seed);

  // One pass over the train split; returns the mean soft dice loss.
  double run_epoch();

  // Mean hard dice over the validation split, eval-mode full volumes.
  double validation_dice();

  int completed_epochs() const { return epoch_; }
  const std::string& task() const { return data_->task; }

 private:
  void step_batch(const std::vector<synth::Patch>& batch, double lr, double* loss_sum);

  nn::Model* model_;
  const synth::NodeDataset* data_;
  Options opts_;
  uint64_t seed_;
  optim::Adam adam_;
  std::vector<std::pair<std::string, Tensor>> params_;
  int epoch_ = 0;
};

// Full-volume evaluation: eval-mode forward, sigmoid, threshold, hard dice
// against the sample's mask for class_id. One value per sample.
std::vector<double> evaluate_samples(nn::Model& model, const std::string& task,
                                     const std::vector<synth::Sample>& samples, int class_id,
                                     double threshold);

}  // namespace segviz::train
