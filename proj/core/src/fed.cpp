#include "segviz/fed.hpp"

#include <algorithm>
#include <set>
#include <thread>

namespace segviz::fed {

void FederationConfig::validate() const {
  if (rounds < 1) fail(ErrorKind::config, "federation: rounds must be >= 1");
  if (local_epochs < 1) fail(ErrorKind::config, "federation: local_epochs must be >= 1");
  if (nodes.empty()) fail(ErrorKind::config, "federation: at least one node required");
  std::set<uint16_t> ids;
  std::set<std::string> tasks;
  for (const auto& n : nodes) {
    if (!ids.insert(n.node_id).second)
      fail(ErrorKind::config, "federation: duplicate node_id " + std::to_string(n.node_id));
    if (n.task.empty()) fail(ErrorKind::config, "federation: node without a task");
    if (!tasks.insert(n.task).second)
      fail(ErrorKind::config,
           "federation: task '" + n.task + "' owned by more than one node (unsupported)");
  }
}

nn::ParamSnapshot aggregate_updates(const std::vector<ClientUpdate>& updates,
                                    const AggregationPolicy& policy) {
  if (updates.empty()) fail(ErrorKind::protocol, "aggregate: no updates");
  std::vector<const ClientUpdate*> ordered;
  ordered.reserve(updates.size());
  for (const auto& u : updates) ordered.push_back(&u);
  std::sort(ordered.begin(), ordered.end(),
            [](const ClientUpdate* a, const ClientUpdate* b) { return a->node_id < b->node_id; });

  const uint32_t round = ordered.front()->round;
  std::set<uint16_t> ids;
  std::set<std::string> tasks;
  for (const ClientUpdate* u : ordered) {
    if (u->round != round)
      fail(ErrorKind::protocol, "aggregate: node " + std::to_string(u->node_id) + " sent round " +
                                    std::to_string(u->round) + " during round " +
                                    std::to_string(round));
    if (!ids.insert(u->node_id).second)
      fail(ErrorKind::protocol, "aggregate: duplicate update from node " +
                                    std::to_string(u->node_id));
    if (u->task.empty())
      fail(ErrorKind::protocol, "aggregate: update from node " + std::to_string(u->node_id) +
                                    " carries no task head");
    if (!tasks.insert(u->task).second)
      fail(ErrorKind::protocol, "aggregate: task '" + u->task + "' owned by more than one node");
  }

  // Every update must carry the identical representation name set.
  const auto& ref = ordered.front()->snapshot;
  std::vector<const nn::SnapshotEntryT<float>*> rep_entries;
  for (const auto& e : ref.entries())
    if (!e.tag.is_task) rep_entries.push_back(&e);
  for (const ClientUpdate* u : ordered) {
    size_t rep_count = 0;
    for (const auto& e : u->snapshot.entries()) {
      if (e.tag.is_task) continue;
      ++rep_count;
      const auto* mine = ref.find(e.name);
      if (!mine || mine->tag.is_task)
        fail(ErrorKind::protocol, "aggregate: node " + std::to_string(u->node_id) +
                                      " sent unexpected tensor '" + e.name + "'");
      if (mine->value.shape() != e.value.shape())
        fail(ErrorKind::protocol, "aggregate: shape mismatch on '" + e.name + "' from node " +
                                      std::to_string(u->node_id));
    }
    if (rep_count != rep_entries.size())
      fail(ErrorKind::protocol, "aggregate: node " + std::to_string(u->node_id) +
                                    " is missing representation tensors");
  }

  std::vector<double> weights(ordered.size(), 0.0);
  if (policy.weighting == Weighting::uniform) {
    std::fill(weights.begin(), weights.end(), 1.0 / static_cast<double>(ordered.size()));
  } else {
    double total = 0;
    for (const ClientUpdate* u : ordered) total += static_cast<double>(u->sample_count);
    if (total <= 0) fail(ErrorKind::protocol, "aggregate: zero total sample count");
    for (size_t i = 0; i < ordered.size(); ++i)
      weights[i] = static_cast<double>(ordered[i]->sample_count) / total;
  }

  size_t largest = 0;
  for (size_t i = 1; i < ordered.size(); ++i)
    if (ordered[i]->sample_count > ordered[largest]->sample_count) largest = i;

  std::vector<nn::SnapshotEntryT<float>> out;
  for (const auto* re : rep_entries) {
    const std::string& name = re->name;
    if (!policy.aggregate_running_stats && nn::is_running_stat(name)) {
      const auto* src = ordered[largest]->snapshot.find(name);
      out.push_back({name, nn::BlockTag::representation(), src->value.clone()});
      continue;
    }
    Tensor acc = Tensor::zeros(re->value.shape());
    std::vector<double> sum(acc.size(), 0.0);
    for (size_t i = 0; i < ordered.size(); ++i) {
      const auto* e = ordered[i]->snapshot.find(name);
      const float* src = e->value.data();
      for (size_t v = 0; v < sum.size(); ++v) sum[v] += weights[i] * static_cast<double>(src[v]);
    }
    for (size_t v = 0; v < sum.size(); ++v) acc.data()[v] = static_cast<float>(sum[v]);
    out.push_back({name, nn::BlockTag::representation(), std::move(acc)});
  }
  for (const ClientUpdate* u : ordered)
    for (const auto& e : u->snapshot.entries())
      if (e.tag.is_task) out.push_back({e.name, e.tag, e.value.clone()});

  return nn::ParamSnapshot::from_entries(std::move(out));
}

nn::ParamSnapshot broadcast_view(const nn::ParamSnapshot& global, const NodeSpec& node) {
  std::vector<nn::SnapshotEntryT<float>> out;
  bool has_head = false;
  for (const auto& e : global.entries()) {
    if (!e.tag.is_task) {
      out.push_back({e.name, e.tag, e.value.clone()});
    } else if (e.tag.task == node.task) {
      out.push_back({e.name, e.tag, e.value.clone()});
      has_head = true;
    }
  }
  if (!has_head)
    fail(ErrorKind::unknown_task, "broadcast: global snapshot has no head for task '" +
                                      node.task + "'");
  return nn::ParamSnapshot::from_entries(std::move(out));
}

ClientUpdate client_local_train(train::Trainer& trainer, nn::Model& model, const NodeSpec& self,
                                int local_epochs, uint32_t round, std::vector<RoundLog>* logs) {
  if (local_epochs < 0) fail(ErrorKind::invalid_argument, "local_epochs must be >= 0");
  RoundLog log;
  log.round = static_cast<int>(round);
  log.node_id = self.node_id;
  log.task = self.task;
  for (int e = 0; e < local_epochs; ++e) log.epoch_losses.push_back(trainer.run_epoch());
  log.val_dice = trainer.validation_dice();
  if (logs) logs->push_back(std::move(log));

  ClientUpdate update;
  update.round = round;
  update.node_id = self.node_id;
  update.task = self.task;
  update.sample_count = self.sample_count;
  update.snapshot = model.snapshot();
  return update;
}

namespace {

struct Session {
  NodeSpec spec;
  ChannelPtr channel;
};

// Hello handshake: keeps accepting until every expected node registered.
// Unknown or duplicate node ids get a Shutdown and are dropped.
std::vector<Session> register_clients(const FederationConfig& cfg,
                                      const std::function<ChannelPtr()>& next_channel) {
  std::map<uint16_t, Session> sessions;
  size_t attempts = 0;
  const size_t max_attempts = cfg.nodes.size() * 2 + 4;
  while (sessions.size() < cfg.nodes.size()) {
    if (++attempts > max_attempts)
      fail(ErrorKind::transport, "server: gave up waiting for all nodes to register");
    ChannelPtr ch = next_channel();
    Message msg = ch->recv(cfg.hello_timeout);
    const auto* hello = std::get_if<Hello>(&msg.body);
    if (!hello) fail(ErrorKind::protocol, "server: expected Hello as the first message");
    const auto spec =
        std::find_if(cfg.nodes.begin(), cfg.nodes.end(),
                     [&](const NodeSpec& n) { return n.node_id == hello->node_id; });
    const bool known = spec != cfg.nodes.end();
    const bool duplicate = sessions.count(hello->node_id) > 0;
    if (!known || duplicate || spec->task != hello->task) {
      try {
        ch->send(Message{0, Shutdown{}});
        ch->close();
      } catch (const Error&) {
      }
      if (duplicate) continue;  // reject the latecomer, keep waiting
      fail(ErrorKind::protocol,
           "server: rejected Hello from node " + std::to_string(hello->node_id) +
               (known ? " (task mismatch)" : " (unknown node)"));
    }
    NodeSpec s = *spec;
    s.sample_count = hello->sample_count;  // clients report their actual split size
    sessions.emplace(hello->node_id, Session{s, std::move(ch)});
  }
  std::vector<Session> ordered;
  for (auto& [id, s] : sessions) ordered.push_back(std::move(s));
  return ordered;
}

}  // namespace

nn::ParamSnapshot run_server(const FederationConfig& cfg, const nn::ModelConfig& model_cfg,
                             const std::vector<ChannelPtr>& raw_channels) {
  cfg.validate();
  model_cfg.validate();
  for (const auto& n : cfg.nodes)
    if (std::find(model_cfg.tasks.begin(), model_cfg.tasks.end(), n.task) ==
        model_cfg.tasks.end())
      fail(ErrorKind::config, "server: model has no head for task '" + n.task + "'");

  size_t next = 0;
  auto source = [&]() -> ChannelPtr {
    if (next >= raw_channels.size())
      fail(ErrorKind::transport, "server: ran out of client channels during registration");
    return raw_channels[next++];
  };
  std::vector<Session> sessions = register_clients(cfg, source);

  nn::ParamSnapshot global =
      nn::Model::build(model_cfg, global_init_seed(cfg.seed)).snapshot();

  for (auto& s : sessions)
    s.channel->send(Message{0, GlobalParams{broadcast_view(global, s.spec)}});

  for (int round = 1; round <= cfg.rounds; ++round) {
    std::vector<ClientUpdate> updates;
    updates.reserve(sessions.size());
    for (auto& s : sessions) {
      Message msg;
      try {
        msg = s.channel->recv();
      } catch (const Error& e) {
        fail(ErrorKind::transport, "server: node " + std::to_string(s.spec.node_id) +
                                       " dropped during round " + std::to_string(round) + " (" +
                                       e.what() + ")");
      }
      const auto* update = std::get_if<ClientUpdate>(&msg.body);
      if (!update)
        fail(ErrorKind::protocol, "server: node " + std::to_string(s.spec.node_id) +
                                      " sent an unexpected message type");
      if (update->round != static_cast<uint32_t>(round))
        fail(ErrorKind::protocol, "server: node " + std::to_string(s.spec.node_id) +
                                      " sent round " + std::to_string(update->round) +
                                      " while the server is in round " + std::to_string(round));
      if (update->node_id != s.spec.node_id || update->task != s.spec.task)
        fail(ErrorKind::protocol, "server: node identity mismatch on channel of node " +
                                      std::to_string(s.spec.node_id));
      updates.push_back(*update);
    }
    global = aggregate_updates(updates, cfg.policy);
    if (round < cfg.rounds)
      for (auto& s : sessions)
        s.channel->send(Message{static_cast<uint32_t>(round),
                                GlobalParams{broadcast_view(global, s.spec)}});
  }
  for (auto& s : sessions) {
    s.channel->send(Message{static_cast<uint32_t>(cfg.rounds), Shutdown{}});
    s.channel->close();
  }
  return global;
}

std::vector<RoundLog> run_client(ChannelPtr channel, const NodeSpec& self, int local_epochs,
                                 const nn::ModelConfig& backbone, const synth::NodeDataset& data,
                                 const train::Options& train_opts, uint64_t federation_seed) {
  nn::ModelConfig cfg = backbone;
  cfg.tasks = {self.task};
  nn::Model model = nn::Model::build(cfg, derive_seed(federation_seed, 0xC11E, self.node_id));
  train::Trainer trainer(&model, &data, train_opts,
                         client_trainer_seed(federation_seed, self.node_id));

  NodeSpec spec = self;
  spec.sample_count = data.train.size();
  channel->send(Message{0, Hello{spec.node_id, spec.task, spec.sample_count}});

  std::vector<RoundLog> logs;
  while (true) {
    Message msg = channel->recv();
    if (std::holds_alternative<Shutdown>(msg.body)) break;
    const auto* params = std::get_if<GlobalParams>(&msg.body);
    if (!params) fail(ErrorKind::protocol, "client: unexpected message type from server");
    model.apply(params->snapshot, nn::ApplyScope::all());
    ClientUpdate update =
        client_local_train(trainer, model, spec, local_epochs, msg.round + 1, &logs);
    channel->send(Message{msg.round + 1, update});
  }
  channel->close();
  return logs;
}

FederationResult run_federation(const FederationConfig& cfg, const nn::ModelConfig& model_cfg,
                                const std::map<uint16_t, const synth::NodeDataset*>& datasets,
                                const train::Options& train_opts) {
  cfg.validate();
  for (const auto& n : cfg.nodes) {
    auto it = datasets.find(n.node_id);
    if (it == datasets.end() || !it->second)
      fail(ErrorKind::config, "federation: no dataset for node " + std::to_string(n.node_id));
    if (it->second->task != n.task)
      fail(ErrorKind::config, "federation: dataset task '" + it->second->task +
                                  "' does not match node task '" + n.task + "'");
  }

  std::vector<ChannelPtr> server_side;
  std::vector<std::thread> client_threads;
  std::vector<std::vector<RoundLog>> client_logs(cfg.nodes.size());
  std::vector<std::exception_ptr> client_errors(cfg.nodes.size());

  std::unique_ptr<TcpListener> listener;
  if (cfg.transport == TransportKind::tcp) listener = std::make_unique<TcpListener>(cfg.listen);

  for (size_t i = 0; i < cfg.nodes.size(); ++i) {
    const NodeSpec node = cfg.nodes[i];
    const synth::NodeDataset* data = datasets.at(node.node_id);
    ChannelPtr client_side;
    if (cfg.transport == TransportKind::inproc) {
      auto [a, b] = make_inproc_pair();
      server_side.push_back(a);
      client_side = b;
    }
    client_threads.emplace_back([&, i, node, data, client_side]() mutable {
      try {
        if (!client_side) client_side = tcp_connect(listener->local_address());
        client_logs[i] = run_client(client_side, node, cfg.local_epochs, model_cfg, *data,
                                    train_opts, cfg.seed);
      } catch (...) {
        client_errors[i] = std::current_exception();
      }
    });
  }

  FederationResult result;
  std::exception_ptr server_error;
  try {
    if (cfg.transport == TransportKind::tcp) {
      std::vector<ChannelPtr> accepted;
      for (size_t i = 0; i < cfg.nodes.size(); ++i)
        accepted.push_back(listener->accept(cfg.hello_timeout));
      result.global = run_server(cfg, model_cfg, accepted);
    } else {
      result.global = run_server(cfg, model_cfg, server_side);
    }
  } catch (...) {
    server_error = std::current_exception();
    for (auto& ch : server_side) ch->close();
  }
  for (auto& t : client_threads) t.join();
  if (server_error) std::rethrow_exception(server_error);
  for (size_t i = 0; i < client_errors.size(); ++i)
    if (client_errors[i]) std::rethrow_exception(client_errors[i]);

  for (auto& logs : client_logs)
    result.logs.insert(result.logs.end(), logs.begin(), logs.end());
  std::sort(result.logs.begin(), result.logs.end(), [](const RoundLog& a, const RoundLog& b) {
    return std::tie(a.round, a.node_id) < std::tie(b.round, b.node_id);
  });
  return result;
}

}  // namespace segviz::fed
