#pragma once

#include <cmath>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "segviz/tensor.hpp"

namespace segviz::optim {

struct AdamOptions {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// Standard Adam with bias correction. State is keyed by parameter name so it
// survives snapshot round-trips; gradients are zeroed after every step.
template <typename T>
class AdamT {
 public:
  explicit AdamT(AdamOptions opts = {}) : opts_(opts) {}

  void step(const std::vector<std::pair<std::string, TensorT<T>>>& params, double lr) {
    ++t_;
    const double bc1 = 1.0 - std::pow(opts_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(opts_.beta2, static_cast<double>(t_));
    const T b1 = static_cast<T>(opts_.beta1), b2 = static_cast<T>(opts_.beta2);
    const T eps = static_cast<T>(opts_.eps);
    for (const auto& [name, p] : params) {
      if (!p.has_grad())
        fail(ErrorKind::missing_gradient, "adam: parameter '" + name + "' has no gradient");
      auto& slot = slots_[name];
      auto& impl = *p.impl();
      if (slot.m.empty()) {
        slot.m.assign(impl.data.size(), T(0));
        slot.v.assign(impl.data.size(), T(0));
      } else if (slot.m.size() != impl.data.size()) {
        fail(ErrorKind::shape_mismatch, "adam: state size mismatch for '" + name + "'");
      }
      for (size_t i = 0; i < impl.data.size(); ++i) {
        const T g = impl.grad[i];
        slot.m[i] = b1 * slot.m[i] + (T(1) - b1) * g;
        slot.v[i] = b2 * slot.v[i] + (T(1) - b2) * g * g;
        const T mhat = slot.m[i] / static_cast<T>(bc1);
        const T vhat = slot.v[i] / static_cast<T>(bc2);
        impl.data[i] -= static_cast<T>(lr) * mhat / (std::sqrt(vhat) + eps);
      }
      std::fill(impl.grad.begin(), impl.grad.end(), T(0));
    }
  }

  int64_t step_count() const { return t_; }

 private:
  struct Slot {
    std::vector<T> m, v;
  };
  AdamOptions opts_;
  std::map<std::string, Slot> slots_;
  int64_t t_ = 0;
};

using Adam = AdamT<float>;

// Cosine annealing: lr(t) = eta_min + (base_lr - eta_min)(1 + cos(pi t / t_max)) / 2,
// stepped once per completed epoch.
struct CosineSchedule {
  double base_lr = 1e-4;
  double eta_min = 0.0;
  int t_max = 1;

  double lr(int t) const {
    if (t_max < 1) fail(ErrorKind::invalid_argument, "cosine schedule: t_max must be >= 1");
    if (eta_min < 0 || eta_min > base_lr)
      fail(ErrorKind::invalid_argument, "cosine schedule: need 0 <= eta_min <= base_lr");
    if (t < 0 || t > t_max)
      fail(ErrorKind::invalid_argument, "cosine schedule: t=" + std::to_string(t) +
                                            " outside [0, " + std::to_string(t_max) + "]");
    return eta_min +
           0.5 * (base_lr - eta_min) * (1.0 + std::cos(M_PI * static_cast<double>(t) / t_max));
  }
};

// Soft dice loss over all voxels of the batch:
//   p = sigmoid(logits); loss = 1 - (2*sum(p*g) + eps) / (sum(p) + sum(g) + eps).
template <typename T>
TensorT<T> soft_dice_loss(Tape<T>* tape, const TensorT<T>& logits, const TensorT<T>& target,
                          double eps = 1e-5) {
  detail::check_same_shape(logits, target, "soft_dice_loss");
  for (T v : target.values())
    if (v != T(0) && v != T(1))
      fail(ErrorKind::invalid_argument, "soft_dice_loss: target must be binary");
  const T e = static_cast<T>(eps);
  TensorT<T> p = sigmoid(tape, logits);
  TensorT<T> overlap = sum(tape, mul(tape, p, target));
  TensorT<T> numer = add_const(tape, scale(tape, overlap, T(2)), e);
  TensorT<T> denom = add_const(tape, add(tape, sum(tape, p), sum(tape, target)), e);
  return add_const(tape, scale(tape, div(tape, numer, denom), T(-1)), T(1));
}

// Hard dice 2|P∩T| / (|P|+|T|) on binary masks. Both masks empty counts as a
// perfect 1.0; exactly one empty counts as 0.0.
template <typename T>
double dice_score(const TensorT<T>& pred, const TensorT<T>& target) {
  detail::check_same_shape(pred, target, "dice_score");
  double inter = 0, np = 0, nt = 0;
  for (size_t i = 0; i < pred.size(); ++i) {
    const T p = pred.data()[i], t = target.data()[i];
    if ((p != T(0) && p != T(1)) || (t != T(0) && t != T(1)))
      fail(ErrorKind::invalid_argument, "dice_score: masks must be binary");
    np += p == T(1);
    nt += t == T(1);
    inter += (p == T(1)) && (t == T(1));
  }
  if (np == 0 && nt == 0) return 1.0;
  if (np == 0 || nt == 0) return 0.0;
  return 2.0 * inter / (np + nt);
}

}  // namespace segviz::optim
