#include "segviz/transport.hpp"

#include <arpa/inet.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <poll.h>
#include <sys/socket.h>
#include <unistd.h>

#include <condition_variable>
#include <cstring>
#include <deque>
#include <mutex>

namespace segviz::fed {

namespace {

struct InprocQueue {
  std::mutex mu;
  std::condition_variable cv;
  std::deque<std::vector<uint8_t>> frames;
  bool closed = false;
};

class InprocChannel : public MessageChannel {
 public:
  InprocChannel(std::shared_ptr<InprocQueue> rx, std::shared_ptr<InprocQueue> tx)
      : rx_(std::move(rx)), tx_(std::move(tx)) {}

  void send(const Message& msg) override {
    auto frame = encode_message(msg);
    std::lock_guard lock(tx_->mu);
    if (tx_->closed) fail(ErrorKind::transport, "send on closed inproc channel");
    tx_->frames.push_back(std::move(frame));
    tx_->cv.notify_one();
  }

  Message recv(std::chrono::milliseconds timeout) override {
    std::unique_lock lock(rx_->mu);
    auto ready = [&] { return !rx_->frames.empty() || rx_->closed; };
    if (timeout.count() > 0) {
      if (!rx_->cv.wait_for(lock, timeout, ready))
        fail(ErrorKind::transport, "inproc recv timed out");
    } else {
      rx_->cv.wait(lock, ready);
    }
    if (rx_->frames.empty()) fail(ErrorKind::transport, "inproc peer closed");
    auto frame = std::move(rx_->frames.front());
    rx_->frames.pop_front();
    lock.unlock();
    return decode_message(frame);
  }

  void close() override {
    for (auto& q : {rx_, tx_}) {
      std::lock_guard lock(q->mu);
      q->closed = true;
      q->cv.notify_all();
    }
  }

 private:
  std::shared_ptr<InprocQueue> rx_, tx_;
};

struct Addr {
  std::string host;
  uint16_t port;
};

Addr parse_addr(const std::string& addr) {
  const size_t colon = addr.rfind(':');
  if (colon == std::string::npos)
    fail(ErrorKind::transport, "address '" + addr + "' must be host:port");
  Addr a;
  a.host = addr.substr(0, colon);
  const std::string port = addr.substr(colon + 1);
  char* end = nullptr;
  const long p = std::strtol(port.c_str(), &end, 10);
  if (end == port.c_str() || *end != '\0' || p < 0 || p > 65535)
    fail(ErrorKind::transport, "bad port in '" + addr + "'");
  a.port = static_cast<uint16_t>(p);
  return a;
}

sockaddr_in to_sockaddr(const Addr& a) {
  sockaddr_in sa{};
  sa.sin_family = AF_INET;
  sa.sin_port = htons(a.port);
  if (inet_pton(AF_INET, a.host.c_str(), &sa.sin_addr) != 1)
    fail(ErrorKind::transport, "cannot parse IPv4 host '" + a.host + "'");
  return sa;
}

void read_exact(int fd, uint8_t* buf, size_t n, std::chrono::milliseconds timeout) {
  size_t got = 0;
  while (got < n) {
    if (timeout.count() > 0) {
      pollfd pfd{fd, POLLIN, 0};
      const int pr = ::poll(&pfd, 1, static_cast<int>(timeout.count()));
      if (pr == 0) fail(ErrorKind::transport, "tcp recv timed out");
      if (pr < 0) fail(ErrorKind::transport, std::string("poll: ") + std::strerror(errno));
    }
    const ssize_t r = ::read(fd, buf + got, n - got);
    if (r == 0) fail(ErrorKind::transport, "tcp peer closed the connection");
    if (r < 0) {
      if (errno == EINTR) continue;
      fail(ErrorKind::transport, std::string("read: ") + std::strerror(errno));
    }
    got += static_cast<size_t>(r);
  }
}

void write_all(int fd, const uint8_t* buf, size_t n) {
  size_t sent = 0;
  while (sent < n) {
    const ssize_t r = ::write(fd, buf + sent, n - sent);
    if (r < 0) {
      if (errno == EINTR) continue;
      fail(ErrorKind::transport, std::string("write: ") + std::strerror(errno));
    }
    sent += static_cast<size_t>(r);
  }
}

constexpr uint64_t kMaxPayload = 1ULL << 31;  // sanity cap on a single frame

class TcpChannel : public MessageChannel {
 public:
  explicit TcpChannel(int fd) : fd_(fd) {
    int one = 1;
    ::setsockopt(fd_, IPPROTO_TCP, TCP_NODELAY, &one, sizeof(one));
  }
  ~TcpChannel() override { close(); }

  void send(const Message& msg) override {
    if (fd_ < 0) fail(ErrorKind::transport, "send on closed tcp channel");
    auto frame = encode_message(msg);
    write_all(fd_, frame.data(), frame.size());
  }

  Message recv(std::chrono::milliseconds timeout) override {
    if (fd_ < 0) fail(ErrorKind::transport, "recv on closed tcp channel");
    std::vector<uint8_t> frame(kHeaderSize);
    read_exact(fd_, frame.data(), kHeaderSize, timeout);
    uint64_t payload_len;
    std::memcpy(&payload_len, frame.data() + kHeaderSize - 8, 8);
    if (payload_len > kMaxPayload)
      fail(ErrorKind::transport, "frame larger than the transport cap");
    frame.resize(kHeaderSize + payload_len + 4);
    read_exact(fd_, frame.data() + kHeaderSize, payload_len + 4, timeout);
    return decode_message(frame);
  }

  void close() override {
    if (fd_ >= 0) {
      ::shutdown(fd_, SHUT_RDWR);
      ::close(fd_);
      fd_ = -1;
    }
  }

 private:
  int fd_;
};

}  // namespace

std::pair<ChannelPtr, ChannelPtr> make_inproc_pair() {
  auto a_to_b = std::make_shared<InprocQueue>();
  auto b_to_a = std::make_shared<InprocQueue>();
  return {std::make_shared<InprocChannel>(b_to_a, a_to_b),
          std::make_shared<InprocChannel>(a_to_b, b_to_a)};
}

TcpListener::TcpListener(const std::string& addr) {
  const Addr a = parse_addr(addr);
  fd_ = ::socket(AF_INET, SOCK_STREAM, 0);
  if (fd_ < 0) fail(ErrorKind::transport, std::string("socket: ") + std::strerror(errno));
  int one = 1;
  ::setsockopt(fd_, SOL_SOCKET, SO_REUSEADDR, &one, sizeof(one));
  sockaddr_in sa = to_sockaddr(a);
  if (::bind(fd_, reinterpret_cast<sockaddr*>(&sa), sizeof(sa)) < 0) {
    const int err = errno;
    ::close(fd_);
    fd_ = -1;
    fail(ErrorKind::transport, "bind " + addr + ": " + std::strerror(err));
  }
  if (::listen(fd_, 16) < 0) {
    const int err = errno;
    ::close(fd_);
    fd_ = -1;
    fail(ErrorKind::transport, std::string("listen: ") + std::strerror(err));
  }
  sockaddr_in bound{};
  socklen_t len = sizeof(bound);
  ::getsockname(fd_, reinterpret_cast<sockaddr*>(&bound), &len);
  char host[INET_ADDRSTRLEN];
  inet_ntop(AF_INET, &bound.sin_addr, host, sizeof(host));
  local_address_ = std::string(host) + ":" + std::to_string(ntohs(bound.sin_port));
}

TcpListener::~TcpListener() {
  if (fd_ >= 0) ::close(fd_);
}

ChannelPtr TcpListener::accept(std::chrono::milliseconds timeout) {
  if (timeout.count() > 0) {
    pollfd pfd{fd_, POLLIN, 0};
    const int pr = ::poll(&pfd, 1, static_cast<int>(timeout.count()));
    if (pr == 0) fail(ErrorKind::transport, "accept timed out");
    if (pr < 0) fail(ErrorKind::transport, std::string("poll: ") + std::strerror(errno));
  }
  const int client = ::accept(fd_, nullptr, nullptr);
  if (client < 0) fail(ErrorKind::transport, std::string("accept: ") + std::strerror(errno));
  return std::make_shared<TcpChannel>(client);
}

ChannelPtr tcp_connect(const std::string& addr, std::chrono::milliseconds timeout) {
  const Addr a = parse_addr(addr);
  const auto deadline = std::chrono::steady_clock::now() + timeout;
  int fd = -1;
  // The server may not be listening yet when a client process starts; retry
  // connection refusals until the deadline.
  while (true) {
    fd = ::socket(AF_INET, SOCK_STREAM, 0);
    if (fd < 0) fail(ErrorKind::transport, std::string("socket: ") + std::strerror(errno));
    sockaddr_in sa = to_sockaddr(a);
    if (::connect(fd, reinterpret_cast<sockaddr*>(&sa), sizeof(sa)) == 0) break;
    const int err = errno;
    ::close(fd);
    if (std::chrono::steady_clock::now() >= deadline)
      fail(ErrorKind::transport, "connect " + addr + ": " + std::strerror(err));
    ::usleep(50 * 1000);
  }
  return std::make_shared<TcpChannel>(fd);
}

}  // namespace segviz::fed
