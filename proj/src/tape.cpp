#include "mtcp/tape.hpp"

#include <cmath>

#include "mtcp/errors.hpp"

namespace mtcp {

namespace {
thread_local Tape* g_active_tape = nullptr;
}

Tape* active_tape() { return g_active_tape; }

TapeScope::TapeScope(Tape& tape) : previous_(g_active_tape) { g_active_tape = &tape; }
TapeScope::~TapeScope() { g_active_tape = previous_; }

NoGradScope::NoGradScope() : previous_(g_active_tape) { g_active_tape = nullptr; }
NoGradScope::~NoGradScope() { g_active_tape = previous_; }

void Tape::record(std::string op, std::vector<Tensor> inputs, Tensor output, std::function<void()> backward) {
  if (consumed_) throw StateError("recording onto a tape that was already differentiated");
  entries_.push_back(Entry{std::move(op), std::move(inputs), std::move(output), std::move(backward)});
}

void Tape::backward(const Tensor& loss) {
  if (!loss.defined() || loss.numel() != 1) {
    throw DimensionError("backward: root must be a scalar, got " +
                         (loss.defined() ? shape_str(loss.shape()) : std::string("undefined")));
  }
  if (consumed_) throw StateError("backward: tape already differentiated (double backward unsupported)");
  bool found = false;
  for (const auto& e : entries_) {
    if (e.output.same_storage(loss)) {
      found = true;
      break;
    }
  }
  if (!found || !loss.requires_grad()) throw StateError("backward: loss was not produced under this tape");

  Tensor root = loss;
  root.grad()[0] += 1.0;
  for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) {
    it->backward();
    for (auto& in : it->inputs) {
      if (!in.defined() || !in.requires_grad()) continue;
      for (double g : in.grad()) {
        if (!std::isfinite(g)) throw NumericError("non-finite gradient flowing out of '" + it->op + "'");
      }
    }
  }
  consumed_ = true;
}

void Tape::clear() {
  entries_.clear();
  consumed_ = false;
}

double backward(const std::function<Tensor()>& loss_fn) {
  Tape tape;
  Tensor loss;
  {
    TapeScope scope(tape);
    loss = loss_fn();
  }
  tape.backward(loss);
  return loss.item();
}

}  // namespace mtcp
