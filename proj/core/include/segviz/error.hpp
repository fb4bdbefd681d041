#pragma once

#include <stdexcept>
#include <string>

namespace segviz {

enum class ErrorKind {
  invalid_shape,
  shape_mismatch,
  invalid_argument,
  degenerate_batch,
  degenerate_range,
  tape_consumed,
  non_scalar_loss,
  not_on_tape,
  non_finite,
  missing_gradient,
  unknown_task,
  config,
  generation,
  bad_magic,
  version_mismatch,
  crc_mismatch,
  truncated,
  encode_limit,
  transport,
  protocol,
  runtime,
};

const char* to_string(ErrorKind kind);

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& msg)
      : std::runtime_error(std::string(to_string(kind)) + ": " + msg), kind_(kind) {}

  ErrorKind kind() const { return kind_; }

 private:
  ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& msg) { throw Error(kind, msg); }

inline const char* to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::invalid_shape: return "invalid shape";
    case ErrorKind::shape_mismatch: return "shape mismatch";
    case ErrorKind::invalid_argument: return "invalid argument";
    case ErrorKind::degenerate_batch: return "degenerate batch";
    case ErrorKind::degenerate_range: return "degenerate range";
    case ErrorKind::tape_consumed: return "tape consumed";
    case ErrorKind::non_scalar_loss: return "non-scalar loss";
    case ErrorKind::not_on_tape: return "not on tape";
    case ErrorKind::non_finite: return "non-finite value";
    case ErrorKind::missing_gradient: return "missing gradient";
    case ErrorKind::unknown_task: return "unknown task";
    case ErrorKind::config: return "config error";
    case ErrorKind::generation: return "generation error";
    case ErrorKind::bad_magic: return "bad magic";
    case ErrorKind::version_mismatch: return "version mismatch";
    case ErrorKind::crc_mismatch: return "crc mismatch";
    case ErrorKind::truncated: return "truncated message";
    case ErrorKind::encode_limit: return "encode limit";
    case ErrorKind::transport: return "transport error";
    case ErrorKind::protocol: return "protocol error";
    case ErrorKind::runtime: return "runtime error";
  }
  return "error";
}

}  // namespace segviz
