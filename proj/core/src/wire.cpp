#include "segviz/wire.hpp"

#include <bit>
#include <cstring>
#include <limits>

#include <zlib.h>

namespace segviz::fed {

namespace {

static_assert(std::endian::native == std::endian::little,
              "wire codec assumes a little-endian host for raw f32 payloads");

class Writer {
 public:
  void u8(uint8_t v) { buf_.push_back(v); }
  void u16(uint16_t v) { raw(&v, 2); }
  void u32(uint32_t v) { raw(&v, 4); }
  void u64(uint64_t v) { raw(&v, 8); }
  void bytes(const void* p, size_t n) { raw(p, n); }
  void str16(const std::string& s) {
    if (s.size() > std::numeric_limits<uint16_t>::max())
      fail(ErrorKind::encode_limit, "string longer than 65535 bytes");
    u16(static_cast<uint16_t>(s.size()));
    raw(s.data(), s.size());
  }
  std::vector<uint8_t> take() { return std::move(buf_); }

 private:
  void raw(const void* p, size_t n) {
    const auto* b = static_cast<const uint8_t*>(p);
    buf_.insert(buf_.end(), b, b + n);
  }
  std::vector<uint8_t> buf_;
};

class Reader {
 public:
  explicit Reader(std::span<const uint8_t> s) : data_(s) {}

  uint8_t u8() { return take(1)[0]; }
  uint16_t u16() { return read_le<uint16_t>(); }
  uint32_t u32() { return read_le<uint32_t>(); }
  uint64_t u64() { return read_le<uint64_t>(); }
  std::string str16() {
    const size_t n = u16();
    auto s = take(n);
    return std::string(reinterpret_cast<const char*>(s.data()), n);
  }
  std::span<const uint8_t> take(size_t n) {
    if (n > data_.size() - pos_)
      fail(ErrorKind::truncated, "payload ends mid-field");
    auto out = data_.subspan(pos_, n);
    pos_ += n;
    return out;
  }
  size_t remaining() const { return data_.size() - pos_; }

 private:
  template <typename U>
  U read_le() {
    auto s = take(sizeof(U));
    U v;
    std::memcpy(&v, s.data(), sizeof(U));
    return v;
  }
  std::span<const uint8_t> data_;
  size_t pos_ = 0;
};

uint32_t crc32_ieee(std::span<const uint8_t> bytes) {
  return static_cast<uint32_t>(
      ::crc32(0L, bytes.empty() ? Z_NULL : bytes.data(), static_cast<uInt>(bytes.size())));
}

void encode_snapshot(Writer& w, const nn::ParamSnapshot& snap) {
  if (snap.size() > std::numeric_limits<uint32_t>::max())
    fail(ErrorKind::encode_limit, "too many tensors");
  w.u32(static_cast<uint32_t>(snap.size()));
  for (const auto& e : snap.entries()) {
    w.str16(e.name);
    w.u8(e.tag.is_task ? 1 : 0);
    const Shape& shape = e.value.shape();
    if (shape.size() > 255) fail(ErrorKind::encode_limit, "tensor rank exceeds 255");
    w.u8(static_cast<uint8_t>(shape.size()));
    for (size_t d : shape) {
      if (d > std::numeric_limits<uint32_t>::max())
        fail(ErrorKind::encode_limit, "dimension exceeds u32");
      w.u32(static_cast<uint32_t>(d));
    }
    w.u8(0);  // dtype f32
    w.bytes(e.value.data(), e.value.size() * sizeof(float));
  }
}

nn::ParamSnapshot decode_snapshot(Reader& r) {
  const uint32_t count = r.u32();
  std::vector<nn::SnapshotEntryT<float>> entries;
  entries.reserve(count);
  for (uint32_t i = 0; i < count; ++i) {
    nn::SnapshotEntryT<float> e;
    e.name = r.str16();
    const uint8_t tag = r.u8();
    if (tag > 1) fail(ErrorKind::truncated, "unknown block tag " + std::to_string(tag));
    const uint8_t ndim = r.u8();
    if (ndim == 0) fail(ErrorKind::truncated, "tensor with zero rank");
    Shape shape(ndim);
    for (uint8_t d = 0; d < ndim; ++d) shape[d] = r.u32();
    const uint8_t dtype = r.u8();
    if (dtype != 0) fail(ErrorKind::truncated, "unknown dtype " + std::to_string(dtype));
    const size_t n = numel(shape);
    auto raw = r.take(n * sizeof(float));
    std::vector<float> values(n);
    std::memcpy(values.data(), raw.data(), raw.size());
    e.value = Tensor::from_data(shape, std::move(values));
    // block_tag carries one bit; the owning task comes from the name path.
    e.tag = tag == 1 ? nn::tag_of(e.name) : nn::BlockTag::representation();
    if (tag == 1 && !e.tag.is_task)
      fail(ErrorKind::truncated, "task-tagged tensor '" + e.name + "' has no head path");
    entries.push_back(std::move(e));
  }
  return nn::ParamSnapshot::from_entries(std::move(entries));
}

std::string derive_task(const nn::ParamSnapshot& snap) {
  std::string task;
  for (const auto& e : snap.entries())
    if (e.tag.is_task) {
      if (!task.empty() && task != e.tag.task) return {};  // ambiguous
      task = e.tag.task;
    }
  return task;
}

}  // namespace

std::vector<uint8_t> encode_message(const Message& msg) {
  Writer payload;
  std::visit(
      [&](const auto& body) {
        using B = std::decay_t<decltype(body)>;
        if constexpr (std::is_same_v<B, Hello>) {
          payload.u16(body.node_id);
          payload.str16(body.task);
          payload.u64(body.sample_count);
        } else if constexpr (std::is_same_v<B, ClientUpdate>) {
          payload.u16(body.node_id);
          payload.u64(body.sample_count);
          encode_snapshot(payload, body.snapshot);
        } else if constexpr (std::is_same_v<B, GlobalParams>) {
          encode_snapshot(payload, body.snapshot);
        }
      },
      msg.body);
  std::vector<uint8_t> p = payload.take();

  Writer out;
  out.bytes(kMagic.data(), kMagic.size());
  out.u8(kWireVersion);
  out.u8(static_cast<uint8_t>(msg.type()));
  uint32_t round = msg.round;
  if (const auto* u = std::get_if<ClientUpdate>(&msg.body)) round = u->round;
  out.u32(round);
  out.u64(p.size());
  out.bytes(p.data(), p.size());
  out.u32(crc32_ieee(p));
  return out.take();
}

Message decode_message(std::span<const uint8_t> bytes) {
  if (bytes.size() < kHeaderSize) fail(ErrorKind::truncated, "frame shorter than header");
  if (std::memcmp(bytes.data(), kMagic.data(), kMagic.size()) != 0)
    fail(ErrorKind::bad_magic, "frame does not start with SGVZ");
  Reader header(bytes.subspan(kMagic.size(), kHeaderSize - kMagic.size()));
  const uint8_t version = header.u8();
  if (version != kWireVersion)
    fail(ErrorKind::version_mismatch, "wire version " + std::to_string(version) +
                                          ", expected " + std::to_string(kWireVersion));
  const uint8_t type = header.u8();
  const uint32_t round = header.u32();
  const uint64_t payload_len = header.u64();

  const size_t rest = bytes.size() - kHeaderSize;
  if (payload_len > rest || rest - payload_len < 4)
    fail(ErrorKind::truncated, "declared payload length exceeds the frame");
  if (rest - payload_len > 4) fail(ErrorKind::truncated, "trailing bytes after the frame");
  auto payload = bytes.subspan(kHeaderSize, payload_len);
  uint32_t declared_crc;
  std::memcpy(&declared_crc, bytes.data() + kHeaderSize + payload_len, 4);
  if (declared_crc != crc32_ieee(payload))
    fail(ErrorKind::crc_mismatch, "payload checksum does not match");

  Reader r(payload);
  Message msg;
  msg.round = round;
  switch (type) {
    case static_cast<uint8_t>(MsgType::hello): {
      Hello h;
      h.node_id = r.u16();
      h.task = r.str16();
      h.sample_count = r.u64();
      msg.body = std::move(h);
      break;
    }
    case static_cast<uint8_t>(MsgType::global_params): {
      GlobalParams g;
      g.snapshot = decode_snapshot(r);
      msg.body = std::move(g);
      break;
    }
    case static_cast<uint8_t>(MsgType::client_update): {
      ClientUpdate u;
      u.round = round;
      u.node_id = r.u16();
      u.sample_count = r.u64();
      u.snapshot = decode_snapshot(r);
      u.task = derive_task(u.snapshot);
      msg.body = std::move(u);
      break;
    }
    case static_cast<uint8_t>(MsgType::shutdown):
      msg.body = Shutdown{};
      break;
    default:
      fail(ErrorKind::truncated, "unknown message type " + std::to_string(type));
  }
  if (r.remaining() != 0) fail(ErrorKind::truncated, "trailing bytes after payload");
  return msg;
}

bool messages_equal(const Message& a, const Message& b) {
  if (a.round != b.round || a.body.index() != b.body.index()) return false;
  if (const auto* ha = std::get_if<Hello>(&a.body)) return *ha == std::get<Hello>(b.body);
  if (const auto* ga = std::get_if<GlobalParams>(&a.body))
    return nn::bit_equal(ga->snapshot, std::get<GlobalParams>(b.body).snapshot);
  if (const auto* ua = std::get_if<ClientUpdate>(&a.body)) {
    const auto& ub = std::get<ClientUpdate>(b.body);
    return ua->round == ub.round && ua->node_id == ub.node_id && ua->task == ub.task &&
           ua->sample_count == ub.sample_count && nn::bit_equal(ua->snapshot, ub.snapshot);
  }
  return true;  // shutdown
}

}  // namespace segviz::fed
