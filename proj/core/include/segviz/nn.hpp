#pragma once

#include <algorithm>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "segviz/conv.hpp"
#include "segviz/seeds.hpp"
#include "segviz/tensor.hpp"

namespace segviz::nn {

enum class Activation { relu, sigmoid };

// Multi-head encoder-decoder backbone. Every resolution level starts with a
// factor-2 down/up-sampling convolution (level 0 keeps stride 1) followed by
// num_res_units batch-normalized residual units; the decoder concatenates
// skip features. Each task head is one full conv layer plus a 1x1 classifier
// producing a single logit channel.
struct ModelConfig {
  int spatial_dims = 2;
  int depth = 3;
  std::vector<int> channels = {8, 16, 32};
  int num_res_units = 2;
  int in_channels = 1;
  std::vector<std::string> tasks;
  Activation activation = Activation::relu;
  double bn_eps = 1e-5;
  double bn_momentum = 0.1;
  // Layers per task head, counted from the output (conv + classifier).
  static constexpr int task_block_layers = 2;

  void validate() const {
    if (spatial_dims != 2 && spatial_dims != 3)
      fail(ErrorKind::config, "model: spatial_dims must be 2 or 3");
    if (depth < 2) fail(ErrorKind::config, "model: depth must be >= 2");
    if (static_cast<int>(channels.size()) != depth)
      fail(ErrorKind::config, "model: channels must list one count per level");
    for (int c : channels)
      if (c < 1) fail(ErrorKind::config, "model: channel counts must be positive");
    if (num_res_units < 1) fail(ErrorKind::config, "model: num_res_units must be >= 1");
    if (in_channels < 1) fail(ErrorKind::config, "model: in_channels must be >= 1");
    if (tasks.empty()) fail(ErrorKind::config, "model: at least one task required");
    std::set<std::string> seen;
    for (const auto& t : tasks) {
      if (t.empty()) fail(ErrorKind::config, "model: empty task name");
      if (!seen.insert(t).second) fail(ErrorKind::config, "model: duplicate task '" + t + "'");
    }
  }
};

struct BlockTag {
  bool is_task = false;
  std::string task;  // set iff is_task

  static BlockTag representation() { return {}; }
  static BlockTag for_task(std::string name) { return {true, std::move(name)}; }
  bool operator==(const BlockTag&) const = default;
};

// Head parameters live under "head.<task>."; everything else is the shared
// representation block. The wire format encodes only the task/representation
// bit, so the owning task is always recoverable from the name.
inline BlockTag tag_of(const std::string& param_name) {
  constexpr std::string_view prefix = "head.";
  if (param_name.rfind(prefix, 0) == 0) {
    const size_t end = param_name.find('.', prefix.size());
    if (end != std::string::npos)
      return BlockTag::for_task(param_name.substr(prefix.size(), end - prefix.size()));
  }
  return BlockTag::representation();
}

template <typename T>
struct SnapshotEntryT {
  std::string name;
  BlockTag tag;
  TensorT<T> value;
};

// Ordered, named, block-tagged parameter set: the unit of federation
// exchange. Entries are deep copies in lexicographic name order.
template <typename T>
class SnapshotT {
 public:
  SnapshotT() = default;

  static SnapshotT from_entries(std::vector<SnapshotEntryT<T>> entries) {
    std::sort(entries.begin(), entries.end(),
              [](const auto& a, const auto& b) { return a.name < b.name; });
    for (size_t i = 1; i < entries.size(); ++i)
      if (entries[i].name == entries[i - 1].name)
        fail(ErrorKind::invalid_argument, "snapshot: duplicate name '" + entries[i].name + "'");
    SnapshotT s;
    s.entries_ = std::move(entries);
    return s;
  }

  const std::vector<SnapshotEntryT<T>>& entries() const { return entries_; }
  size_t size() const { return entries_.size(); }
  bool empty() const { return entries_.empty(); }

  const SnapshotEntryT<T>* find(const std::string& name) const {
    auto it = std::lower_bound(entries_.begin(), entries_.end(), name,
                               [](const auto& e, const std::string& n) { return e.name < n; });
    if (it == entries_.end() || it->name != name) return nullptr;
    return &*it;
  }

  std::vector<std::string> task_names() const {
    std::set<std::string> tasks;
    for (const auto& e : entries_)
      if (e.tag.is_task) tasks.insert(e.tag.task);
    return {tasks.begin(), tasks.end()};
  }

 private:
  std::vector<SnapshotEntryT<T>> entries_;
};

using ParamSnapshot = SnapshotT<float>;

template <typename T>
bool bit_equal(const SnapshotT<T>& a, const SnapshotT<T>& b) {
  if (a.size() != b.size()) return false;
  for (size_t i = 0; i < a.size(); ++i) {
    const auto& ea = a.entries()[i];
    const auto& eb = b.entries()[i];
    if (ea.name != eb.name || ea.tag != eb.tag) return false;
    if (ea.value.shape() != eb.value.shape()) return false;
    if (!std::equal(ea.value.values().begin(), ea.value.values().end(), eb.value.values().begin()))
      return false;
  }
  return true;
}

struct ApplyScope {
  enum class Kind { all, representation_only, task };
  Kind kind = Kind::all;
  std::string task;

  static ApplyScope all() { return {Kind::all, {}}; }
  static ApplyScope representation_only() { return {Kind::representation_only, {}}; }
  static ApplyScope for_task(std::string name) { return {Kind::task, std::move(name)}; }
};

struct Partition {
  std::vector<std::string> representation;
  std::map<std::string, std::vector<std::string>> per_task;
};

template <typename T>
class ModelT {
 public:
  static ModelT build(const ModelConfig& cfg, uint64_t seed) {
    cfg.validate();
    ModelT m;
    m.cfg_ = cfg;
    m.seed_ = seed;
    const int r = cfg.num_res_units;

    auto conv_unit = [&](const std::string& prefix, int cin, int cout) {
      m.add_conv_weight(prefix + ".w", cout, cin);
      m.add_bn(prefix, cout);
    };
    auto res_unit = [&](const std::string& prefix, int cin, int cout) {
      m.add_conv_weight(prefix + ".conv1.w", cout, cin);
      m.add_bn(prefix + ".conv1", cout);
      m.add_conv_weight(prefix + ".conv2.w", cout, cout);
      m.add_bn(prefix + ".conv2", cout);
      if (cin != cout) m.add_proj_weight(prefix + ".proj.w", cout, cin);
    };

    for (int l = 0; l < cfg.depth; ++l) {
      const int cin = l == 0 ? cfg.in_channels : cfg.channels[l - 1];
      conv_unit("enc." + std::to_string(l) + ".entry", cin, cfg.channels[l]);
      for (int u = 0; u < r; ++u)
        res_unit("enc." + std::to_string(l) + ".res" + std::to_string(u), cfg.channels[l],
                 cfg.channels[l]);
    }
    for (int l = cfg.depth - 2; l >= 0; --l) {
      const std::string p = "dec." + std::to_string(l);
      m.add_upconv_weight(p + ".up.w", cfg.channels[l + 1], cfg.channels[l]);
      m.add_bn(p + ".up", cfg.channels[l]);
      res_unit(p + ".res0", 2 * cfg.channels[l], cfg.channels[l]);
      for (int u = 1; u < r; ++u)
        res_unit(p + ".res" + std::to_string(u), cfg.channels[l], cfg.channels[l]);
    }
    for (const auto& task : cfg.tasks) {
      const std::string p = "head." + task;
      conv_unit(p + ".conv", cfg.channels[0], cfg.channels[0]);
      m.add_proj_weight(p + ".cls.w", 1, cfg.channels[0]);
      m.params_.emplace(p + ".cls.b", TensorT<T>::zeros({1}).set_requires_grad(true));
    }
    return m;
  }

  const ModelConfig& config() const { return cfg_; }

  // Logits of the requested head; spatial shape preserved. Training mode
  // records onto the tape and updates batch-norm running statistics.
  TensorT<T> forward(const TensorT<T>& input, const std::string& task, bool training,
                     Tape<T>* tape = nullptr) {
    if (std::find(cfg_.tasks.begin(), cfg_.tasks.end(), task) == cfg_.tasks.end())
      fail(ErrorKind::unknown_task, "forward: no head for task '" + task + "'");
    if (static_cast<int>(input.rank()) != cfg_.spatial_dims + 2)
      fail(ErrorKind::shape_mismatch, "forward: input rank must be spatial_dims + 2");
    if (input.dim(1) != static_cast<size_t>(cfg_.in_channels))
      fail(ErrorKind::shape_mismatch, "forward: wrong input channel count");
    const size_t div = size_t(1) << (cfg_.depth - 1);
    for (int i = 0; i < cfg_.spatial_dims; ++i)
      if (input.dim(2 + i) % div != 0)
        fail(ErrorKind::invalid_shape, "forward: spatial extent " +
                                           std::to_string(input.dim(2 + i)) +
                                           " not divisible by " + std::to_string(div));

    const std::vector<int> s1(cfg_.spatial_dims, 1), s2(cfg_.spatial_dims, 2);
    const std::vector<int> p0(cfg_.spatial_dims, 0), p1(cfg_.spatial_dims, 1);

    auto conv_unit = [&](const TensorT<T>& x, const std::string& prefix,
                         const std::vector<int>& stride) {
      TensorT<T> y = conv_nd(tape, x, param(prefix + ".w"), nullptr, stride, p1);
      y = bn(y, prefix, training, tape);
      return activate(tape, y);
    };
    auto res_unit = [&](const TensorT<T>& x, const std::string& prefix, bool project) {
      TensorT<T> h = conv_nd(tape, x, param(prefix + ".conv1.w"), nullptr, s1, p1);
      h = bn(h, prefix + ".conv1", training, tape);
      h = activate(tape, h);
      h = conv_nd(tape, h, param(prefix + ".conv2.w"), nullptr, s1, p1);
      h = bn(h, prefix + ".conv2", training, tape);
      TensorT<T> skip = project ? conv_nd(tape, x, param(prefix + ".proj.w"), nullptr, s1, p0) : x;
      return activate(tape, add(tape, h, skip));
    };

    TensorT<T> x = input;
    std::vector<TensorT<T>> skips;
    for (int l = 0; l < cfg_.depth; ++l) {
      x = conv_unit(x, "enc." + std::to_string(l) + ".entry", l == 0 ? s1 : s2);
      for (int u = 0; u < cfg_.num_res_units; ++u)
        x = res_unit(x, "enc." + std::to_string(l) + ".res" + std::to_string(u), false);
      if (l < cfg_.depth - 1) skips.push_back(x);
    }
    for (int l = cfg_.depth - 2; l >= 0; --l) {
      const std::string p = "dec." + std::to_string(l);
      x = conv_transpose_nd(tape, x, param(p + ".up.w"), s2, p0);
      x = bn(x, p + ".up", training, tape);
      x = activate(tape, x);
      x = concat_channels(tape, x, skips[l]);
      x = res_unit(x, p + ".res0", true);
      for (int u = 1; u < cfg_.num_res_units; ++u)
        x = res_unit(x, p + ".res" + std::to_string(u), false);
    }
    const std::string hp = "head." + task;
    x = conv_unit(x, hp + ".conv", s1);
    return conv_nd(tape, x, param(hp + ".cls.w"), &params_.at(hp + ".cls.b"), s1, p0);
  }

  // Deep copy of every parameter and batch-norm buffer, canonical order.
  SnapshotT<T> snapshot() const {
    std::vector<SnapshotEntryT<T>> entries;
    entries.reserve(params_.size() + buffers_.size());
    for (const auto& [name, value] : params_)
      entries.push_back({name, tag_of(name), value.clone()});
    for (const auto& [name, value] : buffers_)
      entries.push_back({name, tag_of(name), value.clone()});
    return SnapshotT<T>::from_entries(std::move(entries));
  }

  // Overwrites the in-scope model parameters from the snapshot. Every
  // in-scope model name must be present with a matching shape; snapshot
  // entries outside the scope are ignored.
  void apply(const SnapshotT<T>& snap, const ApplyScope& scope = ApplyScope::all()) {
    if (scope.kind == ApplyScope::Kind::task) {
      bool known = std::find(cfg_.tasks.begin(), cfg_.tasks.end(), scope.task) != cfg_.tasks.end();
      if (!known) fail(ErrorKind::unknown_task, "apply: no head for task '" + scope.task + "'");
    }
    auto apply_one = [&](const std::string& name, TensorT<T>& dst) {
      if (!in_scope(name, scope)) return;
      const SnapshotEntryT<T>* e = snap.find(name);
      if (!e) fail(ErrorKind::invalid_argument, "apply: snapshot missing '" + name + "'");
      if (e->value.shape() != dst.shape())
        fail(ErrorKind::shape_mismatch, "apply: '" + name + "' is " + shape_str(e->value.shape()) +
                                            ", model has " + shape_str(dst.shape()));
      dst.copy_from(e->value);
    };
    for (auto& [name, value] : params_) apply_one(name, value);
    for (auto& [name, value] : buffers_) apply_one(name, value);
  }

  // Disjoint cover of all parameter names: shared representation plus one
  // list per task head.
  Partition partition_names() const {
    Partition p;
    auto visit = [&](const std::string& name) {
      BlockTag tag = tag_of(name);
      if (tag.is_task)
        p.per_task[tag.task].push_back(name);
      else
        p.representation.push_back(name);
    };
    for (const auto& [name, _] : params_) visit(name);
    for (const auto& [name, _] : buffers_) visit(name);
    p.representation.shrink_to_fit();
    return p;
  }

  // Trainable tensors for one task: representation weights plus that head,
  // sorted by name. Batch-norm running buffers are not trainable.
  std::vector<std::pair<std::string, TensorT<T>>> trainable_params(const std::string& task) {
    if (std::find(cfg_.tasks.begin(), cfg_.tasks.end(), task) == cfg_.tasks.end())
      fail(ErrorKind::unknown_task, "trainable_params: no head for task '" + task + "'");
    std::vector<std::pair<std::string, TensorT<T>>> out;
    for (auto& [name, value] : params_) {
      BlockTag tag = tag_of(name);
      if (!tag.is_task || tag.task == task) out.emplace_back(name, value);
    }
    return out;  // std::map iteration is already name-sorted
  }

  const TensorT<T>& param(const std::string& name) const {
    auto it = params_.find(name);
    if (it == params_.end()) fail(ErrorKind::invalid_argument, "no parameter '" + name + "'");
    return it->second;
  }
  TensorT<T>& buffer(const std::string& name) {
    auto it = buffers_.find(name);
    if (it == buffers_.end()) fail(ErrorKind::invalid_argument, "no buffer '" + name + "'");
    return it->second;
  }
  size_t parameter_count() const { return params_.size() + buffers_.size(); }

 private:
  static bool in_scope(const std::string& name, const ApplyScope& scope) {
    if (scope.kind == ApplyScope::Kind::all) return true;
    BlockTag tag = tag_of(name);
    if (scope.kind == ApplyScope::Kind::representation_only) return !tag.is_task;
    return tag.is_task && tag.task == scope.task;
  }

  Shape conv_shape(int cout, int cin, int k) const {
    Shape s = {static_cast<size_t>(cout), static_cast<size_t>(cin)};
    for (int i = 0; i < cfg_.spatial_dims; ++i) s.push_back(static_cast<size_t>(k));
    return s;
  }

  void add_conv_weight(const std::string& name, int cout, int cin) {
    params_.emplace(name, TensorT<T>::he_normal(conv_shape(cout, cin, 3), derive_seed(seed_, name))
                              .set_requires_grad(true));
  }
  void add_proj_weight(const std::string& name, int cout, int cin) {
    params_.emplace(name, TensorT<T>::he_normal(conv_shape(cout, cin, 1), derive_seed(seed_, name))
                              .set_requires_grad(true));
  }
  void add_upconv_weight(const std::string& name, int cin, int cout) {
    Shape s = {static_cast<size_t>(cin), static_cast<size_t>(cout)};
    for (int i = 0; i < cfg_.spatial_dims; ++i) s.push_back(2);
    params_.emplace(name,
                    TensorT<T>::he_normal(s, derive_seed(seed_, name)).set_requires_grad(true));
  }
  void add_bn(const std::string& prefix, int c) {
    const Shape s = {static_cast<size_t>(c)};
    params_.emplace(prefix + ".gamma", TensorT<T>::constant(s, T(1)).set_requires_grad(true));
    params_.emplace(prefix + ".beta", TensorT<T>::zeros(s).set_requires_grad(true));
    buffers_.emplace(prefix + ".running_mean", TensorT<T>::zeros(s));
    buffers_.emplace(prefix + ".running_var", TensorT<T>::constant(s, T(1)));
  }

  TensorT<T> bn(const TensorT<T>& x, const std::string& prefix, bool training, Tape<T>* tape) {
    return batch_norm_nd(tape, x, param(prefix + ".gamma"), param(prefix + ".beta"),
                         buffer(prefix + ".running_mean"), buffer(prefix + ".running_var"),
                         training, cfg_.bn_eps, cfg_.bn_momentum);
  }

  TensorT<T> activate(Tape<T>* tape, const TensorT<T>& x) {
    return cfg_.activation == Activation::relu ? relu(tape, x) : sigmoid(tape, x);
  }

  ModelConfig cfg_;
  uint64_t seed_ = 0;
  std::map<std::string, TensorT<T>> params_;
  std::map<std::string, TensorT<T>> buffers_;
};

using Model = ModelT<float>;

inline bool is_running_stat(const std::string& name) {
  return name.ends_with(".running_mean") || name.ends_with(".running_var");
}

}  // namespace segviz::nn
