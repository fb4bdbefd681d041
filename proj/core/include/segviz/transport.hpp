#pragma once

#include <chrono>
#include <memory>
#include <string>

#include "segviz/wire.hpp"

namespace segviz::fed {

// Ordered, reliable, message-framed bidirectional channel.
class MessageChannel {
 public:
  virtual ~MessageChannel() = default;
  virtual void send(const Message& msg) = 0;
  // Blocks until a message arrives; zero timeout blocks indefinitely.
  virtual Message recv(std::chrono::milliseconds timeout = std::chrono::milliseconds(0)) = 0;
  virtual void close() = 0;
};

using ChannelPtr = std::shared_ptr<MessageChannel>;

// In-process pair of connected endpoints backed by two queues.
std::pair<ChannelPtr, ChannelPtr> make_inproc_pair();

class TcpListener {
 public:
  // addr is "host:port"; port 0 binds an ephemeral port.
  explicit TcpListener(const std::string& addr);
  ~TcpListener();
  TcpListener(const TcpListener&) = delete;
  TcpListener& operator=(const TcpListener&) = delete;

  std::string local_address() const { return local_address_; }
  ChannelPtr accept(std::chrono::milliseconds timeout);

 private:
  int fd_ = -1;
  std::string local_address_;
};

ChannelPtr tcp_connect(const std::string& addr,
                       std::chrono::milliseconds timeout = std::chrono::milliseconds(10000));

}  // namespace segviz::fed
