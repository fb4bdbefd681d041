#pragma once

#include <chrono>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "segviz/nn.hpp"
#include "segviz/synthdata.hpp"
#include "segviz/trainer.hpp"
#include "segviz/transport.hpp"
#include "segviz/wire.hpp"

namespace segviz::fed {

struct NodeSpec {
  uint16_t node_id = 0;
  std::string task;
  uint64_t sample_count = 0;  // training volumes held at the node
};

enum class Weighting { sample_count, uniform };

struct AggregationPolicy {
  Weighting weighting = Weighting::sample_count;
  // Batch-norm running statistics travel with the representation block; when
  // false they are copied from the largest client instead of averaged.
  bool aggregate_running_stats = true;
};

enum class TransportKind { inproc, tcp };

struct FederationConfig {
  int rounds = 40;
  int local_epochs = 2;
  std::vector<NodeSpec> nodes;
  AggregationPolicy policy;
  TransportKind transport = TransportKind::inproc;
  std::string listen = "127.0.0.1:0";
  uint64_t seed = 0;
  std::chrono::milliseconds hello_timeout{30000};

  void validate() const;
};

// Seed used for the server-side global model so external tooling (and the
// centralized-equivalence oracle) can rebuild the identical initialization.
inline uint64_t global_init_seed(uint64_t federation_seed) {
  return derive_seed(federation_seed, 0x1417);
}
inline uint64_t client_trainer_seed(uint64_t federation_seed, uint16_t node_id) {
  return derive_seed(federation_seed, 0x7247, node_id);
}

// Masked federated averaging: representation tensors become the weighted
// mean of the client values; task-head tensors are copied bit-exactly from
// their single owner. Updates must cover one round of full participation.
nn::ParamSnapshot aggregate_updates(const std::vector<ClientUpdate>& updates,
                                    const AggregationPolicy& policy);

// Per-node view of the global snapshot: the representation block plus only
// that node's task head.
nn::ParamSnapshot broadcast_view(const nn::ParamSnapshot& global, const NodeSpec& node);

struct RoundLog {
  int round = 0;  // 1-based; 0 only in standalone training helpers
  uint16_t node_id = 0;
  std::string task;
  std::vector<double> epoch_losses;
  double val_dice = 0.0;
};

// Runs local_epochs of patch training on the client's own head and emits the
// round's update. With zero epochs the snapshot is untouched.
ClientUpdate client_local_train(train::Trainer& trainer, nn::Model& model, const NodeSpec& self,
                                int local_epochs, uint32_t round, std::vector<RoundLog>* logs);

struct FederationResult {
  nn::ParamSnapshot global;
  std::vector<RoundLog> logs;  // sorted by (round, node_id)
};

// Server side: registers Hellos on the given channels, broadcasts the round-0
// parameters, then runs synchronous rounds with a full-participation barrier.
// Aborts with a diagnostic naming the node on any protocol or transport
// fault; no partial aggregation.
nn::ParamSnapshot run_server(const FederationConfig& cfg, const nn::ModelConfig& model_cfg,
                             const std::vector<ChannelPtr>& raw_channels);

// Client side: Hello, then train/upload/apply until the server's Shutdown.
// Returns this node's per-round logs.
std::vector<RoundLog> run_client(ChannelPtr channel, const NodeSpec& self, int local_epochs,
                                 const nn::ModelConfig& backbone, const synth::NodeDataset& data,
                                 const train::Options& train_opts, uint64_t federation_seed);

// Whole federation in one process; tcp runs the same loops over a loopback
// listener with one thread per client.
FederationResult run_federation(const FederationConfig& cfg, const nn::ModelConfig& model_cfg,
                                const std::map<uint16_t, const synth::NodeDataset*>& datasets,
                                const train::Options& train_opts);

}  // namespace segviz::fed
