#include "iert/tape.hpp"

#include <algorithm>
#include <cmath>

#include "iert/error.hpp"

namespace iert {

namespace {

[[noreturn]] void shape_error(const char* op, const Tensor& a, const Tensor& b) {
  fail(ErrorKind::kShape, std::string(op) + ": incompatible shapes " + shape_string(a.shape()) +
                              " and " + shape_string(b.shape()));
}

enum class Broadcast { kSame, kRow, kScalar };

Broadcast broadcast_mode(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() == b.shape()) return Broadcast::kSame;
  if (b.size() == a.cols() && b.rows() == 1 && (b.shape().size() <= 1 || b.shape()[0] == 1)) {
    return Broadcast::kRow;
  }
  if (b.size() == 1) return Broadcast::kScalar;
  shape_error(op, a, b);
}

std::size_t b_index(Broadcast mode, std::size_t i, std::size_t cols) {
  switch (mode) {
    case Broadcast::kSame: return i;
    case Broadcast::kRow: return i % cols;
    case Broadcast::kScalar: return 0;
  }
  return 0;
}

Shape matrix_shape(std::size_t rows, std::size_t cols) { return {rows, cols}; }

double softplus(double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::fabs(x))); }

double sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace

const Tensor& Var::value() const { return tape->value(id); }

Var Tape::constant(Tensor value) {
  Node node;
  node.value = std::move(value);
  nodes_.push_back(std::move(node));
  return {this, nodes_.size() - 1};
}

Var Tape::parameter(const std::string& name) {
  require(store_ != nullptr, ErrorKind::kContract,
          "tape: parameter '" + name + "' requested without a bound store");
  Node node;
  node.external = &store_->value(name);
  node.requires_grad = true;
  node.parameter = name;
  nodes_.push_back(std::move(node));
  return {this, nodes_.size() - 1};
}

Var Tape::record(Tensor value, std::span<const Var> parents, Backprop backprop) {
  Node node;
  node.value = std::move(value);
  for (const Var& p : parents) {
    if (nodes_[p.id].requires_grad) {
      node.requires_grad = true;
      break;
    }
  }
  if (node.requires_grad) node.backprop = std::move(backprop);
  nodes_.push_back(std::move(node));
  return {this, nodes_.size() - 1};
}

Tensor& Tape::grad(std::size_t id) {
  Node& node = nodes_[id];
  if (!node.has_grad) {
    node.grad = Tensor(node.external ? node.external->shape() : node.value.shape());
    node.has_grad = true;
  }
  return node.grad;
}

void Tape::backward(Var loss) {
  require(!nodes_.empty() && loss.tape == this && loss.id < nodes_.size(), ErrorKind::kContract,
          "backward: no forward computation recorded on this tape");
  require(!consumed_, ErrorKind::kContract, "backward: tape already consumed");
  require(value(loss.id).size() == 1, ErrorKind::kShape,
          "backward: loss must be scalar, got " + shape_string(value(loss.id).shape()));
  consumed_ = true;
  if (!nodes_[loss.id].requires_grad) return;
  grad(loss.id).fill(1.0);
  for (std::size_t i = loss.id + 1; i-- > 0;) {
    Node& node = nodes_[i];
    if (!node.has_grad || !node.requires_grad) continue;
    if (node.backprop) node.backprop(*this, node.grad);
    if (!node.parameter.empty()) {
      Tensor& target = store_->grad(node.parameter);
      for (std::size_t k = 0; k < target.size(); ++k) target[k] += node.grad[k];
    }
  }
}

Var matmul(Var a, Var b) {
  const Tensor& A = a.value();
  const Tensor& B = b.value();
  const std::size_t n = A.rows(), k = A.cols(), m = B.cols();
  if (B.rows() != k) shape_error("matmul", A, B);
  Tensor out(matrix_shape(n, m));
  for (std::size_t i = 0; i < n; ++i) {
    double* o = out.data() + i * m;
    for (std::size_t p = 0; p < k; ++p) {
      const double s = A[i * k + p];
      const double* brow = B.data() + p * m;
      for (std::size_t j = 0; j < m; ++j) o[j] += s * brow[j];
    }
  }
  Var parents[] = {a, b};
  return a.tape->record(std::move(out), parents, [a, b, n, k, m](Tape& tape, const Tensor& g) {
    const Tensor& A = tape.value(a.id);
    const Tensor& B = tape.value(b.id);
    if (tape.requires_grad(a.id)) {
      Tensor& ga = tape.grad(a.id);
      for (std::size_t i = 0; i < n; ++i) {
        const double* gi = g.data() + i * m;
        for (std::size_t p = 0; p < k; ++p) {
          const double* brow = B.data() + p * m;
          double acc = 0.0;
          for (std::size_t j = 0; j < m; ++j) acc += gi[j] * brow[j];
          ga[i * k + p] += acc;
        }
      }
    }
    if (tape.requires_grad(b.id)) {
      Tensor& gb = tape.grad(b.id);
      for (std::size_t i = 0; i < n; ++i) {
        const double* gi = g.data() + i * m;
        for (std::size_t p = 0; p < k; ++p) {
          const double s = A[i * k + p];
          double* out = gb.data() + p * m;
          for (std::size_t j = 0; j < m; ++j) out[j] += s * gi[j];
        }
      }
    }
  });
}

Var matmul_nt(Var a, Var b) {
  const Tensor& A = a.value();
  const Tensor& B = b.value();
  const std::size_t n = A.rows(), k = A.cols(), m = B.rows();
  if (B.cols() != k) shape_error("matmul_nt", A, B);
  Tensor out(matrix_shape(n, m));
  for (std::size_t i = 0; i < n; ++i) {
    const double* ai = A.data() + i * k;
    for (std::size_t j = 0; j < m; ++j) {
      const double* bj = B.data() + j * k;
      double acc = 0.0;
      for (std::size_t p = 0; p < k; ++p) acc += ai[p] * bj[p];
      out[i * m + j] = acc;
    }
  }
  Var parents[] = {a, b};
  return a.tape->record(std::move(out), parents, [a, b, n, k, m](Tape& tape, const Tensor& g) {
    const Tensor& A = tape.value(a.id);
    const Tensor& B = tape.value(b.id);
    if (tape.requires_grad(a.id)) {
      Tensor& ga = tape.grad(a.id);
      for (std::size_t i = 0; i < n; ++i) {
        double* out = ga.data() + i * k;
        for (std::size_t j = 0; j < m; ++j) {
          const double s = g[i * m + j];
          if (s == 0.0) continue;
          const double* bj = B.data() + j * k;
          for (std::size_t p = 0; p < k; ++p) out[p] += s * bj[p];
        }
      }
    }
    if (tape.requires_grad(b.id)) {
      Tensor& gb = tape.grad(b.id);
      for (std::size_t i = 0; i < n; ++i) {
        const double* ai = A.data() + i * k;
        for (std::size_t j = 0; j < m; ++j) {
          const double s = g[i * m + j];
          if (s == 0.0) continue;
          double* out = gb.data() + j * k;
          for (std::size_t p = 0; p < k; ++p) out[p] += s * ai[p];
        }
      }
    }
  });
}

Var add(Var a, Var b) {
  const Tensor& A = a.value();
  const Tensor& B = b.value();
  const Broadcast mode = broadcast_mode("add", A, B);
  const std::size_t cols = A.cols();
  Tensor out = A;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += B[b_index(mode, i, cols)];
  Var parents[] = {a, b};
  return a.tape->record(std::move(out), parents, [a, b, mode, cols](Tape& tape, const Tensor& g) {
    if (tape.requires_grad(a.id)) {
      Tensor& ga = tape.grad(a.id);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    }
    if (tape.requires_grad(b.id)) {
      Tensor& gb = tape.grad(b.id);
      for (std::size_t i = 0; i < g.size(); ++i) gb[b_index(mode, i, cols)] += g[i];
    }
  });
}

Var mul(Var a, Var b) {
  const Tensor& A = a.value();
  const Tensor& B = b.value();
  const Broadcast mode = broadcast_mode("mul", A, B);
  const std::size_t cols = A.cols();
  Tensor out = A;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= B[b_index(mode, i, cols)];
  Var parents[] = {a, b};
  return a.tape->record(std::move(out), parents, [a, b, mode, cols](Tape& tape, const Tensor& g) {
    const Tensor& A = tape.value(a.id);
    const Tensor& B = tape.value(b.id);
    if (tape.requires_grad(a.id)) {
      Tensor& ga = tape.grad(a.id);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * B[b_index(mode, i, cols)];
    }
    if (tape.requires_grad(b.id)) {
      Tensor& gb = tape.grad(b.id);
      for (std::size_t i = 0; i < g.size(); ++i) gb[b_index(mode, i, cols)] += g[i] * A[i];
    }
  });
}

Var scale(Var a, double factor) {
  Tensor out = a.value();
  for (double& v : out.values()) v *= factor;
  Var parents[] = {a};
  return a.tape->record(std::move(out), parents, [a, factor](Tape& tape, const Tensor& g) {
    Tensor& ga = tape.grad(a.id);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * factor;
  });
}

Var transpose(Var a) {
  const Tensor& A = a.value();
  const std::size_t r = A.rows(), c = A.cols();
  Tensor out(matrix_shape(c, r));
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = A[i * c + j];
  Var parents[] = {a};
  return a.tape->record(std::move(out), parents, [a, r, c](Tape& tape, const Tensor& g) {
    Tensor& ga = tape.grad(a.id);
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) ga[i * c + j] += g[j * r + i];
  });
}

Var gelu(Var a) {
  Tensor out = a.value();
  for (double& v : out.values()) v = 0.5 * v * (1.0 + std::erf(v * M_SQRT1_2));
  Var parents[] = {a};
  return a.tape->record(std::move(out), parents, [a](Tape& tape, const Tensor& g) {
    const Tensor& x = tape.value(a.id);
    Tensor& ga = tape.grad(a.id);
    constexpr double kInvSqrt2Pi = 0.3989422804014327;
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double v = x[i];
      const double cdf = 0.5 * (1.0 + std::erf(v * M_SQRT1_2));
      const double pdf = kInvSqrt2Pi * std::exp(-0.5 * v * v);
      ga[i] += g[i] * (cdf + v * pdf);
    }
  });
}

Var layer_norm(Var x, Var gain, Var bias, double epsilon) {
  const Tensor& X = x.value();
  const Tensor& G = gain.value();
  const Tensor& B = bias.value();
  const std::size_t rows = X.rows(), cols = X.cols();
  if (G.size() != cols) shape_error("layer_norm(gain)", X, G);
  if (B.size() != cols) shape_error("layer_norm(bias)", X, B);
  Tensor normalized(X.shape());
  std::vector<double> inv_std(rows);
  Tensor out(X.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = X.data() + r * cols;
    double mu = 0.0;
    for (std::size_t c = 0; c < cols; ++c) mu += xr[c];
    mu /= static_cast<double>(cols);
    double var = 0.0;
    for (std::size_t c = 0; c < cols; ++c) var += (xr[c] - mu) * (xr[c] - mu);
    var /= static_cast<double>(cols);
    const double inv = 1.0 / std::sqrt(var + epsilon);
    inv_std[r] = inv;
    for (std::size_t c = 0; c < cols; ++c) {
      const double h = (xr[c] - mu) * inv;
      normalized[r * cols + c] = h;
      out[r * cols + c] = h * G[c] + B[c];
    }
  }
  Var parents[] = {x, gain, bias};
  return x.tape->record(
      std::move(out), parents,
      [x, gain, bias, rows, cols, normalized = std::move(normalized),
       inv_std = std::move(inv_std)](Tape& tape, const Tensor& g) {
        const Tensor& G = tape.value(gain.id);
        if (tape.requires_grad(gain.id)) {
          Tensor& gg = tape.grad(gain.id);
          for (std::size_t i = 0; i < g.size(); ++i) gg[i % cols] += g[i] * normalized[i];
        }
        if (tape.requires_grad(bias.id)) {
          Tensor& gb = tape.grad(bias.id);
          for (std::size_t i = 0; i < g.size(); ++i) gb[i % cols] += g[i];
        }
        if (tape.requires_grad(x.id)) {
          Tensor& gx = tape.grad(x.id);
          const double n = static_cast<double>(cols);
          std::vector<double> dh(cols);
          for (std::size_t r = 0; r < rows; ++r) {
            double sum_dh = 0.0, sum_dh_h = 0.0;
            for (std::size_t c = 0; c < cols; ++c) {
              dh[c] = g[r * cols + c] * G[c];
              sum_dh += dh[c];
              sum_dh_h += dh[c] * normalized[r * cols + c];
            }
            const double k = inv_std[r] / n;
            for (std::size_t c = 0; c < cols; ++c) {
              gx[r * cols + c] += k * (n * dh[c] - sum_dh - normalized[r * cols + c] * sum_dh_h);
            }
          }
        }
      });
}

Var gather_rows(Var table, std::span<const std::int64_t> ids) {
  const Tensor& T = table.value();
  const std::size_t cols = T.cols();
  Tensor out(matrix_shape(ids.size(), cols));
  for (std::size_t i = 0; i < ids.size(); ++i) {
    require(ids[i] >= 0 && static_cast<std::size_t>(ids[i]) < T.rows(), ErrorKind::kBounds,
            "gather_rows: id " + std::to_string(ids[i]) + " out of range for table of " +
                std::to_string(T.rows()) + " rows");
    std::copy_n(T.data() + ids[i] * cols, cols, out.data() + i * cols);
  }
  Var parents[] = {table};
  return table.tape->record(
      std::move(out), parents,
      [table, cols, ids = std::vector<std::int64_t>(ids.begin(), ids.end())](Tape& tape,
                                                                            const Tensor& g) {
        Tensor& gt = tape.grad(table.id);
        for (std::size_t i = 0; i < ids.size(); ++i) {
          double* dst = gt.data() + ids[i] * cols;
          const double* src = g.data() + i * cols;
          for (std::size_t c = 0; c < cols; ++c) dst[c] += src[c];
        }
      });
}

Var slice_rows(Var a, std::size_t start, std::size_t count) {
  const Tensor& A = a.value();
  const std::size_t cols = A.cols();
  require(start + count <= A.rows(), ErrorKind::kShape,
          "slice_rows: rows [" + std::to_string(start) + ", " + std::to_string(start + count) +
              ") outside " + shape_string(A.shape()));
  Tensor out(matrix_shape(count, cols));
  std::copy_n(A.data() + start * cols, count * cols, out.data());
  Var parents[] = {a};
  return a.tape->record(std::move(out), parents, [a, start, cols](Tape& tape, const Tensor& g) {
    Tensor& ga = tape.grad(a.id);
    double* dst = ga.data() + start * cols;
    for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i];
  });
}

Var slice_cols(Var a, std::size_t start, std::size_t count) {
  const Tensor& A = a.value();
  const std::size_t rows = A.rows(), cols = A.cols();
  require(start + count <= cols, ErrorKind::kShape,
          "slice_cols: cols [" + std::to_string(start) + ", " + std::to_string(start + count) +
              ") outside " + shape_string(A.shape()));
  Tensor out(matrix_shape(rows, count));
  for (std::size_t r = 0; r < rows; ++r)
    std::copy_n(A.data() + r * cols + start, count, out.data() + r * count);
  Var parents[] = {a};
  return a.tape->record(std::move(out), parents,
                        [a, start, rows, cols, count](Tape& tape, const Tensor& g) {
                          Tensor& ga = tape.grad(a.id);
                          for (std::size_t r = 0; r < rows; ++r)
                            for (std::size_t c = 0; c < count; ++c)
                              ga[r * cols + start + c] += g[r * count + c];
                        });
}

Var concat_rows(std::span<const Var> parts) {
  require(!parts.empty(), ErrorKind::kShape, "concat_rows: no inputs");
  const std::size_t cols = parts[0].cols();
  std::size_t rows = 0;
  for (const Var& p : parts) {
    if (p.cols() != cols) shape_error("concat_rows", parts[0].value(), p.value());
    rows += p.rows();
  }
  Tensor out(matrix_shape(rows, cols));
  std::size_t offset = 0;
  for (const Var& p : parts) {
    std::copy_n(p.value().data(), p.value().size(), out.data() + offset);
    offset += p.value().size();
  }
  std::vector<Var> saved(parts.begin(), parts.end());
  return parts[0].tape->record(std::move(out), parts, [saved](Tape& tape, const Tensor& g) {
    std::size_t offset = 0;
    for (const Var& p : saved) {
      const std::size_t n = tape.value(p.id).size();
      if (tape.requires_grad(p.id)) {
        Tensor& gp = tape.grad(p.id);
        for (std::size_t i = 0; i < n; ++i) gp[i] += g[offset + i];
      }
      offset += n;
    }
  });
}

Var concat_cols(std::span<const Var> parts) {
  require(!parts.empty(), ErrorKind::kShape, "concat_cols: no inputs");
  const std::size_t rows = parts[0].rows();
  std::size_t cols = 0;
  for (const Var& p : parts) {
    if (p.rows() != rows) shape_error("concat_cols", parts[0].value(), p.value());
    cols += p.cols();
  }
  Tensor out(matrix_shape(rows, cols));
  std::size_t offset = 0;
  for (const Var& p : parts) {
    const std::size_t pc = p.cols();
    for (std::size_t r = 0; r < rows; ++r)
      std::copy_n(p.value().data() + r * pc, pc, out.data() + r * cols + offset);
    offset += pc;
  }
  std::vector<Var> saved(parts.begin(), parts.end());
  return parts[0].tape->record(std::move(out), parts,
                               [saved, rows, cols](Tape& tape, const Tensor& g) {
                                 std::size_t offset = 0;
                                 for (const Var& p : saved) {
                                   const std::size_t pc = tape.value(p.id).cols();
                                   if (tape.requires_grad(p.id)) {
                                     Tensor& gp = tape.grad(p.id);
                                     for (std::size_t r = 0; r < rows; ++r)
                                       for (std::size_t c = 0; c < pc; ++c)
                                         gp[r * pc + c] += g[r * cols + offset + c];
                                   }
                                   offset += pc;
                                 }
                               });
}

Var softmax_rows(Var a, std::span<const std::uint8_t> allowed) {
  const Tensor& A = a.value();
  const std::size_t rows = A.rows(), cols = A.cols();
  require(allowed.empty() || allowed.size() == A.size(), ErrorKind::kShape,
          "softmax_rows: mask of " + std::to_string(allowed.size()) + " flags for " +
              shape_string(A.shape()));
  Tensor out(A.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* x = A.data() + r * cols;
    double* y = out.data() + r * cols;
    double max_value = -INFINITY;
    for (std::size_t c = 0; c < cols; ++c) {
      if (allowed.empty() || allowed[r * cols + c]) max_value = std::max(max_value, x[c]);
    }
    require(std::isfinite(max_value), ErrorKind::kContract,
            "softmax_rows: row " + std::to_string(r) + " has no allowed entry");
    double total = 0.0;
    for (std::size_t c = 0; c < cols; ++c) {
      const double e = (allowed.empty() || allowed[r * cols + c]) ? std::exp(x[c] - max_value) : 0.0;
      y[c] = e;
      total += e;
    }
    for (std::size_t c = 0; c < cols; ++c) y[c] /= total;
  }
  Var parents[] = {a};
  const std::size_t out_id = a.tape->size();
  return a.tape->record(std::move(out), parents, [a, rows, cols, out_id](Tape& tape, const Tensor& g) {
    const Tensor& y = tape.value(out_id);
    Tensor& ga = tape.grad(a.id);
    for (std::size_t r = 0; r < rows; ++r) {
      double dot = 0.0;
      for (std::size_t c = 0; c < cols; ++c) dot += g[r * cols + c] * y[r * cols + c];
      for (std::size_t c = 0; c < cols; ++c) ga[r * cols + c] += y[r * cols + c] * (g[r * cols + c] - dot);
    }
  });
}

Var dropout(Var a, double rate, Rng& rng) {
  if (rate <= 0.0) return a;
  require(rate < 1.0, ErrorKind::kContract, "dropout: rate must be below 1");
  const double keep_scale = 1.0 / (1.0 - rate);
  std::vector<double> mask(a.value().size());
  for (double& m : mask) m = rng.uniform() < rate ? 0.0 : keep_scale;
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= mask[i];
  Var parents[] = {a};
  return a.tape->record(std::move(out), parents, [a, mask = std::move(mask)](Tape& tape, const Tensor& g) {
    Tensor& ga = tape.grad(a.id);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * mask[i];
  });
}

Var sum(Var a) {
  double total = 0.0;
  for (double v : a.value().values()) total += v;
  Var parents[] = {a};
  return a.tape->record(Tensor::scalar(total), parents, [a](Tape& tape, const Tensor& g) {
    Tensor& ga = tape.grad(a.id);
    for (double& v : ga.values()) v += g[0];
  });
}

Var mean(Var a) { return scale(sum(a), 1.0 / static_cast<double>(a.value().size())); }

Var cross_entropy_rows(Var logits, std::span<const std::size_t> targets) {
  const Tensor& Z = logits.value();
  const std::size_t rows = Z.rows(), cols = Z.cols();
  require(targets.size() == rows && rows > 0, ErrorKind::kShape,
          "cross_entropy_rows: " + std::to_string(targets.size()) + " targets for " +
              shape_string(Z.shape()));
  Tensor probs(Z.shape());
  double total = 0.0;
  for (std::size_t r = 0; r < rows; ++r) {
    require(targets[r] < cols, ErrorKind::kContract,
            "cross_entropy_rows: target " + std::to_string(targets[r]) + " outside " +
                std::to_string(cols) + " classes");
    const double* z = Z.data() + r * cols;
    double max_value = -INFINITY;
    for (std::size_t c = 0; c < cols; ++c) max_value = std::max(max_value, z[c]);
    double s = 0.0;
    for (std::size_t c = 0; c < cols; ++c) {
      probs[r * cols + c] = std::exp(z[c] - max_value);
      s += probs[r * cols + c];
    }
    for (std::size_t c = 0; c < cols; ++c) probs[r * cols + c] /= s;
    total += max_value + std::log(s) - z[targets[r]];
  }
  const double inv_rows = 1.0 / static_cast<double>(rows);
  Var parents[] = {logits};
  return logits.tape->record(
      Tensor::scalar(total * inv_rows), parents,
      [logits, probs = std::move(probs), t = std::vector<std::size_t>(targets.begin(), targets.end()),
       cols, inv_rows](Tape& tape, const Tensor& g) {
        Tensor& gz = tape.grad(logits.id);
        const double k = g[0] * inv_rows;
        for (std::size_t i = 0; i < gz.size(); ++i) gz[i] += k * probs[i];
        for (std::size_t r = 0; r < t.size(); ++r) gz[r * cols + t[r]] -= k;
      });
}

Var binary_cross_entropy_logit(Var logit, bool label) {
  const double z = logit.value().item();
  const double loss = label ? softplus(-z) : softplus(z);
  Var parents[] = {logit};
  return logit.tape->record(Tensor::scalar(loss), parents, [logit, z, label](Tape& tape, const Tensor& g) {
    const double d = label ? -sigmoid(-z) : sigmoid(z);
    tape.grad(logit.id)[0] += g[0] * d;
  });
}

Var weighted_binary_cross_entropy(Var logit, bool label, double pos_weight, double neg_weight,
                                  double clamp) {
  const double z = logit.value().item();
  const double p = sigmoid(z);
  const double q = sigmoid(-z);
  double loss = 0.0;
  double d = 0.0;
  if (label) {
    if (p < clamp) {
      loss = -pos_weight * std::log(clamp);
    } else if (q < clamp) {
      loss = -pos_weight * std::log1p(-clamp);
    } else {
      loss = pos_weight * softplus(-z);
      d = -pos_weight * q;
    }
  } else {
    if (q < clamp) {
      loss = -neg_weight * std::log(clamp);
    } else if (p < clamp) {
      loss = -neg_weight * std::log1p(-clamp);
    } else {
      loss = neg_weight * softplus(z);
      d = neg_weight * p;
    }
  }
  Var parents[] = {logit};
  return logit.tape->record(Tensor::scalar(loss), parents, [logit, d](Tape& tape, const Tensor& g) {
    tape.grad(logit.id)[0] += g[0] * d;
  });
}

}  // namespace iert
