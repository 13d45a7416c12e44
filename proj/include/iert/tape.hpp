#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "iert/parameters.hpp"
#include "iert/rng.hpp"
#include "iert/tensor.hpp"

namespace iert {

class Tape;

/// Handle to a value recorded on a Tape.
struct Var {
  Tape* tape = nullptr;
  std::size_t id = 0;

  const Tensor& value() const;
  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }
};

/// Reverse-mode computation record. Values are appended in evaluation order;
/// `backward` walks them in reverse and accumulates gradients. Parameters
/// fetched with `parameter()` write their gradients into the bound store
/// with sum semantics, so a tensor used on several paths (or fetched twice)
/// receives the total derivative.
///
/// A tape is a single-owner training context and is not thread-safe.
class Tape {
 public:
  using Backprop = std::function<void(Tape&, const Tensor& out_grad)>;

  explicit Tape(ParameterStore* store = nullptr) : store_(store) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Tensor value);
  Var parameter(const std::string& name);

  /// Appends an op result. `backprop` runs only if some parent needs a
  /// gradient.
  Var record(Tensor value, std::span<const Var> parents, Backprop backprop);

  const Tensor& value(std::size_t id) const {
    const Node& node = nodes_[id];
    return node.external ? *node.external : node.value;
  }
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }
  /// Gradient buffer of a node, zero-initialized on first access.
  Tensor& grad(std::size_t id);

  /// Accumulates d(loss)/d(parameter) into the store. Can run once.
  void backward(Var loss);

  std::size_t size() const { return nodes_.size(); }
  ParameterStore* store() const { return store_; }

 private:
  struct Node {
    Tensor value;
    const Tensor* external = nullptr;  // parameters alias the store
    Tensor grad;
    bool has_grad = false;
    bool requires_grad = false;
    Backprop backprop;
    std::string parameter;
  };

  ParameterStore* store_;
  std::vector<Node> nodes_;
  bool consumed_ = false;
};

// Ops. Shapes follow the matrix convention documented on Tensor. Broadcasting
// is limited to one rule: the right operand of `add`/`mul` may be a single
// row (1 x cols or rank-1 of length cols) applied to every row of the left
// operand, or a scalar (size 1) applied to every element.

Var matmul(Var a, Var b);            // (n x k)(k x m)
Var matmul_nt(Var a, Var b);         // (n x k)(m x k)^T
Var add(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, double factor);
Var transpose(Var a);
Var gelu(Var a);
Var layer_norm(Var x, Var gain, Var bias, double epsilon = 1e-12);
Var gather_rows(Var table, std::span<const std::int64_t> ids);
Var slice_rows(Var a, std::size_t start, std::size_t count);
Var slice_cols(Var a, std::size_t start, std::size_t count);
Var concat_rows(std::span<const Var> parts);
Var concat_cols(std::span<const Var> parts);
/// Softmax across each row. With `allowed` (rows*cols flags, row-major),
/// disallowed entries receive probability exactly 0; every row needs at
/// least one allowed entry.
Var softmax_rows(Var a, std::span<const std::uint8_t> allowed = {});
/// Inverted dropout; identity when rate is 0.
Var dropout(Var a, double rate, Rng& rng);
Var sum(Var a);
Var mean(Var a);
/// Mean over rows of -log softmax(row)[target].
Var cross_entropy_rows(Var logits, std::span<const std::size_t> targets);
/// -log sigmoid(z) if label else -log(1 - sigmoid(z)), for a scalar z.
Var binary_cross_entropy_logit(Var logit, bool label);
/// Weighted binary cross-entropy on p = sigmoid(z), p clamped to
/// [clamp, 1 - clamp]: -pos_weight*y*log p - neg_weight*(1-y)*log(1-p).
Var weighted_binary_cross_entropy(Var logit, bool label, double pos_weight,
                                  double neg_weight, double clamp = 1e-12);

}  // namespace iert
