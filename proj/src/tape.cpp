#include "breaknet/tape.hpp"

#include <algorithm>

namespace breaknet {

Tape& Tape::current() {
  thread_local Tape tape;
  return tape;
}

std::uint64_t Tape::record(std::string op, std::vector<std::uint64_t> inputs,
                           std::function<void()> backward) {
  const std::uint64_t id = next_id_++;
  entries_.push_back(Entry{std::move(op), std::move(inputs), id, std::move(backward)});
  return id;
}

void Tape::clear() { entries_.clear(); }

void Tape::run_backward() {
  // Move entries out first so closures (and the buffers they keep alive) are
  // released even if a backward function throws.
  std::vector<Entry> entries;
  entries.swap(entries_);
  for (auto it = entries.rbegin(); it != entries.rend(); ++it) {
    it->backward();
  }
}

template <typename T>
void backward(Tensor<T>& loss) {
  if (!loss.defined() || loss.numel() != 1) {
    throw ShapeError("backward: loss must be a scalar tensor, got " +
                     (loss.defined() ? shape_str(loss.shape()) : std::string("undefined")));
  }
  if (!loss.requires_grad()) {
    throw std::logic_error("backward: loss is detached from the graph (requires_grad is false)");
  }
  auto node = loss.node();
  if (node->grad.empty()) node->grad.assign(1, T(0));
  node->grad[0] += T(1);
  if (node->id != 0) Tape::current().run_backward();
}

template void backward<float>(Tensor<float>&);
template void backward<double>(Tensor<double>&);

}  // namespace breaknet
