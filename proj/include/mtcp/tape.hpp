#pragma once

#include <functional>
#include <string>
#include <vector>

#include "mtcp/tensor.hpp"

namespace mtcp {

/// Ordered record of executed primitives for reverse-mode differentiation.
///
/// Entries are appended as operations run, so each entry's inputs were
/// produced by earlier entries (or are leaves). backward() replays the
/// entries once, in reverse. A tape can be differentiated once; record a
/// fresh forward pass for another gradient.
class Tape {
 public:
  struct Entry {
    std::string op;
    std::vector<Tensor> inputs;
    Tensor output;
    std::function<void()> backward;
  };

  void record(std::string op, std::vector<Tensor> inputs, Tensor output, std::function<void()> backward);

  /// Seeds d(loss)/d(loss) = 1 and propagates to every requires_grad tensor
  /// on the tape. Throws DimensionError for a non-scalar root and StateError
  /// if the root was not produced on this tape or the tape was consumed.
  void backward(const Tensor& loss);

  std::size_t size() const { return entries_.size(); }
  const std::vector<Entry>& entries() const { return entries_; }
  bool consumed() const { return consumed_; }
  void clear();

 private:
  std::vector<Entry> entries_;
  bool consumed_ = false;
};

/// The tape that operations record onto, or nullptr (no recording).
Tape* active_tape();

/// Installs a tape as the active one for the enclosing scope.
class TapeScope {
 public:
  explicit TapeScope(Tape& tape);
  ~TapeScope();
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape* previous_;
};

/// Suspends recording for the enclosing scope.
class NoGradScope {
 public:
  NoGradScope();
  ~NoGradScope();
  NoGradScope(const NoGradScope&) = delete;
  NoGradScope& operator=(const NoGradScope&) = delete;

 private:
  Tape* previous_;
};

/// Convenience: record a fresh tape for `loss_fn` and differentiate it.
/// Returns the loss value.
double backward(const std::function<Tensor()>& loss_fn);

}  // namespace mtcp
