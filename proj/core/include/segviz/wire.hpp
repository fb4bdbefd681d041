#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "segviz/nn.hpp"

namespace segviz::fed {

// Wire layout (integers little-endian):
//   header: magic "SGVZ", version u8 = 1, msg_type u8, round u32, payload_len u64
//   payload, then CRC-32 (IEEE) u32 over the payload bytes.
// Hello payload:        node_id u16, task (u16 len + UTF-8), sample_count u64
// ClientUpdate payload: node_id u16, sample_count u64, snapshot
// GlobalParams payload: snapshot
// Shutdown payload:     empty
// Snapshot: tensor_count u32, then per tensor in lexicographic name order:
//   name (u16 len + UTF-8), block_tag u8 (0 representation, 1 task),
//   ndim u8, dims u32 x ndim, dtype u8 (0 = f32), raw f32 data.

constexpr std::array<uint8_t, 4> kMagic = {0x53, 0x47, 0x56, 0x5A};  // "SGVZ"
constexpr uint8_t kWireVersion = 1;
constexpr size_t kHeaderSize = 4 + 1 + 1 + 4 + 8;

enum class MsgType : uint8_t {
  hello = 1,
  global_params = 2,
  client_update = 3,
  shutdown = 4,
};

struct Hello {
  uint16_t node_id = 0;
  std::string task;
  uint64_t sample_count = 0;
  bool operator==(const Hello&) const = default;
};

struct GlobalParams {
  nn::ParamSnapshot snapshot;
};

// One node's post-local-training parameters. The snapshot carries the full
// representation block and exactly the sender's task head; the task name is
// implicit on the wire and recovered from the head parameter names.
struct ClientUpdate {
  uint32_t round = 0;
  uint16_t node_id = 0;
  std::string task;
  uint64_t sample_count = 0;
  nn::ParamSnapshot snapshot;
};

struct Shutdown {
  bool operator==(const Shutdown&) const = default;
};

struct Message {
  uint32_t round = 0;
  std::variant<Hello, GlobalParams, ClientUpdate, Shutdown> body;

  MsgType type() const {
    switch (body.index()) {
      case 0: return MsgType::hello;
      case 1: return MsgType::global_params;
      case 2: return MsgType::client_update;
      default: return MsgType::shutdown;
    }
  }
};

std::vector<uint8_t> encode_message(const Message& msg);

// Parses one complete frame; throws with a distinct kind for bad magic,
// version mismatch, CRC failure and truncation.
Message decode_message(std::span<const uint8_t> bytes);

bool messages_equal(const Message& a, const Message& b);

}  // namespace segviz::fed
