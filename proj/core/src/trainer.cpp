#include "segviz/trainer.hpp"

#include <algorithm>
#include <numeric>
#include <random>

#include "segviz/seeds.hpp"

namespace segviz::train {

namespace {

Tensor stack_patches(const std::vector<synth::Patch>& batch, bool labels) {
  const Shape& one = batch[0].image.shape();  // [1, spatial...]
  Shape shape = one;
  shape[0] = batch.size();
  Tensor out = Tensor::zeros(shape);
  const size_t per = numel(one);
  for (size_t i = 0; i < batch.size(); ++i) {
    const Tensor& src = labels ? batch[i].label : batch[i].image;
    std::copy(src.data(), src.data() + per, out.data() + i * per);
  }
  return out;
}

Tensor batch_input(const synth::Sample& s) {
  Shape shape = {1};
  shape.insert(shape.end(), s.image.shape().begin(), s.image.shape().end());
  return Tensor::from_data(shape, s.image.values());
}

}  // namespace

Trainer::Trainer(nn::Model* model, const synth::NodeDataset* data, Options opts, uint64_t seed)
    : model_(model), data_(data), opts_(std::move(opts)), seed_(seed), adam_(opts_.adam) {
  if (data_->train.empty()) fail(ErrorKind::config, "trainer: empty train split");
  for (const auto& s : data_->train)
    if (!s.annotated.count(data_->class_id))
      fail(ErrorKind::config, "trainer: sample " + std::to_string(s.id) +
                                  " is not annotated for task '" + data_->task + "'");
  params_ = model_->trainable_params(data_->task);
}

double Trainer::run_epoch() {
  const double lr = opts_.schedule.lr(epoch_);
  std::vector<size_t> order(data_->train.size());
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 shuffle_rng(derive_seed(seed_, 0x0DDE, static_cast<uint64_t>(epoch_)));
  std::shuffle(order.begin(), order.end(), shuffle_rng);

  double loss_sum = 0;
  size_t steps = 0;
  std::vector<synth::Patch> batch;
  auto flush = [&] {
    if (batch.empty()) return;
    step_batch(batch, lr, &loss_sum);
    ++steps;
    batch.clear();
  };
  for (size_t idx : order) {
    const synth::Sample& s = data_->train[idx];
    auto patches =
        synth::sample_patches(s, opts_.patch_size, opts_.patches_per_volume, opts_.pos_ratio,
                              data_->class_id,
                              derive_seed(seed_, 0xFA7C, static_cast<uint64_t>(epoch_), s.id));
    for (auto& p : patches) {
      batch.push_back(std::move(p));
      if (static_cast<int>(batch.size()) == opts_.batch_size) flush();
    }
  }
  flush();
  ++epoch_;
  return steps ? loss_sum / static_cast<double>(steps) : 0.0;
}

void Trainer::step_batch(const std::vector<synth::Patch>& batch, double lr, double* loss_sum) {
  Tensor x = stack_patches(batch, false);
  Tensor y = stack_patches(batch, true);
  TapeF tape;
  Tensor logits = model_->forward(x, data_->task, /*training=*/true, &tape);
  Tensor loss = optim::soft_dice_loss(&tape, logits, y, opts_.dice_eps);
  *loss_sum += loss.item();
  backward(loss, tape);
  adam_.step(params_, lr);
}

double Trainer::validation_dice() {
  if (data_->val.empty()) return 0.0;
  auto scores = evaluate_samples(*model_, data_->task, data_->val, data_->class_id,
                                 opts_.eval_threshold);
  return std::accumulate(scores.begin(), scores.end(), 0.0) / static_cast<double>(scores.size());
}

std::vector<double> evaluate_samples(nn::Model& model, const std::string& task,
                                     const std::vector<synth::Sample>& samples, int class_id,
                                     double threshold) {
  std::vector<double> out;
  out.reserve(samples.size());
  for (const auto& s : samples) {
    if (!s.annotated.count(class_id))
      fail(ErrorKind::invalid_argument,
           "evaluate: sample " + std::to_string(s.id) + " lacks annotation for class " +
               std::to_string(class_id));
    Tensor logits = model.forward(batch_input(s), task, /*training=*/false, nullptr);
    Tensor prob = sigmoid<float>(nullptr, logits);
    Tensor pred = Tensor::zeros(prob.shape());
    for (size_t i = 0; i < prob.size(); ++i)
      pred.data()[i] = prob.data()[i] > static_cast<float>(threshold) ? 1.0f : 0.0f;
    Tensor truth = Tensor::zeros(prob.shape());
    for (size_t i = 0; i < s.labels.size(); ++i)
      truth.data()[i] = s.labels[i] == class_id ? 1.0f : 0.0f;
    out.push_back(optim::dice_score(pred, truth));
  }
  return out;
}

}  // namespace segviz::train
