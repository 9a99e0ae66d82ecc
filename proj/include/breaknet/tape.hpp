#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "breaknet/tensor.hpp"

namespace breaknet {

/// Ordered record of differentiable ops executed on the current thread.
///
/// Every op whose inputs require grad appends one entry after computing its
/// forward value, so entries are topologically sorted by construction.
/// backward() replays them once in reverse and then clears the tape.
class Tape {
 public:
  struct Entry {
    std::string op;
    std::vector<std::uint64_t> inputs;
    std::uint64_t output = 0;
    std::function<void()> backward;
  };

  /// The tape of the calling thread.
  static Tape& current();

  std::uint64_t record(std::string op, std::vector<std::uint64_t> inputs,
                       std::function<void()> backward);
  const std::vector<Entry>& entries() const { return entries_; }
  std::size_t size() const { return entries_.size(); }
  void clear();
  void run_backward();

  bool enabled() const { return enabled_; }
  void set_enabled(bool on) { enabled_ = on; }

 private:
  std::vector<Entry> entries_;
  std::uint64_t next_id_ = 1;
  bool enabled_ = true;
};

/// Disables recording on the current thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard() : prev_(Tape::current().enabled()) { Tape::current().set_enabled(false); }
  ~NoGradGuard() { Tape::current().set_enabled(prev_); }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

/// Seeds d(loss)/d(loss) = 1 and propagates gradients through the tape.
/// Gradients accumulate into existing buffers; call zero_grad() between steps.
template <typename T>
void backward(Tensor<T>& loss);

}  // namespace breaknet
