#pragma once

#include <cmath>
#include <filesystem>
#include <string>
#include <vector>

#include "iert/corpus.hpp"
#include "iert/encoder.hpp"
#include "iert/parameters.hpp"
#include "iert/rng.hpp"

namespace testing {

using Matrix = std::vector<std::vector<double>>;

inline iert::EncoderConfig tiny_encoder(std::size_t vocab_size, std::size_t layers = 1) {
  iert::EncoderConfig c;
  c.hidden_size = 8;
  c.num_layers = layers;
  c.num_heads = 2;
  c.feed_forward_size = 16;
  c.max_sequence_length = 32;
  c.vocab_size = vocab_size;
  c.dropout_rate = 0.0;
  return c;
}

/// Fills every tensor with draws of a wider spread than the default init, so
/// that tests are not dominated by near-zero activations.
inline void randomize(iert::ParameterStore& store, std::uint64_t seed, double sd = 0.5) {
  iert::Rng rng(seed);
  for (const std::string& name : store.names()) {
    for (double& v : store.value(name).values()) v = sd * rng.normal();
  }
}

inline std::filesystem::path scratch_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("iert_test_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

inline iert::Basket basket(std::vector<iert::TokenId> items, std::size_t t = 0) {
  iert::Basket b;
  b.items = std::move(items);
  b.time_index = t;
  return b;
}

/// Unsplit corpus with items "item<k>" and the given baskets per user.
inline iert::Corpus corpus_of(std::vector<std::vector<std::vector<iert::TokenId>>> users, std::size_t catalog) {
  iert::Corpus c;
  for (std::size_t i = 0; i < catalog; ++i) c.vocabulary.add("item" + std::to_string(i));
  for (std::size_t u = 0; u < users.size(); ++u) {
    iert::UserHistory h;
    h.user_index = u;
    for (std::size_t t = 0; t < users[u].size(); ++t) h.baskets.push_back(basket(users[u][t], t));
    c.users.push_back(h);
    c.user_ids.push_back("user" + std::to_string(u));
  }
  return c;
}

// Straight-line model evaluation on plain nested vectors. It reads the same
// named tensors but shares no code with the tape.
namespace reference {

inline Matrix table(const iert::ParameterStore& store, const std::string& name) {
  const iert::Tensor& t = store.value(name);
  Matrix m(t.rows(), std::vector<double>(t.cols()));
  for (std::size_t r = 0; r < t.rows(); ++r)
    for (std::size_t c = 0; c < t.cols(); ++c) m[r][c] = t.at(r, c);
  return m;
}

inline std::vector<double> vec(const iert::ParameterStore& store, const std::string& name) {
  const auto v = store.value(name).values();
  return {v.begin(), v.end()};
}

inline Matrix affine(const Matrix& x, const Matrix& w, const std::vector<double>& b) {
  Matrix out(x.size(), std::vector<double>(w[0].size()));
  for (std::size_t i = 0; i < x.size(); ++i)
    for (std::size_t j = 0; j < w[0].size(); ++j) {
      double s = b[j];
      for (std::size_t k = 0; k < w.size(); ++k) s += x[i][k] * w[k][j];
      out[i][j] = s;
    }
  return out;
}

inline void normalize(Matrix& x, const std::vector<double>& gain, const std::vector<double>& bias) {
  for (auto& row : x) {
    double mu = 0.0;
    for (double v : row) mu += v;
    mu /= static_cast<double>(row.size());
    double var = 0.0;
    for (double v : row) var += (v - mu) * (v - mu);
    var /= static_cast<double>(row.size());
    const double sd = std::sqrt(var + 1e-12);
    for (std::size_t c = 0; c < row.size(); ++c) row[c] = (row[c] - mu) / sd * gain[c] + bias[c];
  }
}

inline std::vector<double> softmax(const std::vector<double>& z) {
  double top = -INFINITY;
  for (double v : z) top = std::max(top, v);
  std::vector<double> p(z.size());
  double total = 0.0;
  for (std::size_t i = 0; i < z.size(); ++i) total += p[i] = std::exp(z[i] - top);
  for (double& v : p) v /= total;
  return p;
}

inline Matrix encode(const iert::ParameterStore& store, const iert::EncoderConfig& cfg, const iert::InputSequence& seq) {
  const std::size_t n = seq.size(), d = cfg.hidden_size;
  const Matrix tok = table(store, "embeddings.token"), seg = table(store, "embeddings.segment"),
               pos = table(store, "embeddings.position");
  Matrix h(n, std::vector<double>(d));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t c = 0; c < d; ++c)
      h[i][c] = tok[seq.token_ids[i]][c] + seg[seq.segment_ids[i]][c] + pos[seq.position_ids[i]][c];
  normalize(h, vec(store, "embeddings.norm.gain"), vec(store, "embeddings.norm.bias"));
  const std::size_t dh = d / cfg.num_heads;
  for (std::size_t l = 0; l < cfg.num_layers; ++l) {
    const std::string a = "layer" + std::to_string(l) + ".attention.";
    const std::string f = "layer" + std::to_string(l) + ".ffn.";
    const Matrix q = affine(h, table(store, a + "query.weight"), vec(store, a + "query.bias"));
    const Matrix k = affine(h, table(store, a + "key.weight"), vec(store, a + "key.bias"));
    const Matrix v = affine(h, table(store, a + "value.weight"), vec(store, a + "value.bias"));
    Matrix mixed(n, std::vector<double>(d, 0.0));
    for (std::size_t head = 0; head < cfg.num_heads; ++head) {
      for (std::size_t i = 0; i < n; ++i) {
        std::vector<double> z;
        std::vector<std::size_t> keys;
        for (std::size_t j = 0; j < n; ++j) {
          if (!seq.attention_mask[j] && j != i) continue;
          if (!seq.attention_mask[j] && seq.attention_mask[i]) continue;
          double s = 0.0;
          for (std::size_t c = head * dh; c < (head + 1) * dh; ++c) s += q[i][c] * k[j][c];
          z.push_back(s / std::sqrt(static_cast<double>(dh)));
          keys.push_back(j);
        }
        const std::vector<double> p = softmax(z);
        for (std::size_t t = 0; t < keys.size(); ++t)
          for (std::size_t c = head * dh; c < (head + 1) * dh; ++c) mixed[i][c] += p[t] * v[keys[t]][c];
      }
    }
    Matrix attended = affine(mixed, table(store, a + "output.weight"), vec(store, a + "output.bias"));
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t c = 0; c < d; ++c) attended[i][c] += h[i][c];
    normalize(attended, vec(store, a + "norm.gain"), vec(store, a + "norm.bias"));
    Matrix inner = affine(attended, table(store, f + "in.weight"), vec(store, f + "in.bias"));
    for (auto& row : inner)
      for (double& x : row) x = 0.5 * x * (1.0 + std::erf(x / std::sqrt(2.0)));
    Matrix outer = affine(inner, table(store, f + "out.weight"), vec(store, f + "out.bias"));
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t c = 0; c < d; ++c) outer[i][c] += attended[i][c];
    normalize(outer, vec(store, f + "norm.gain"), vec(store, f + "norm.bias"));
    h = outer;
  }
  return h;
}

/// History pooling weighted by a softmax over w . (candidate * row) + b.
inline std::vector<double> pool(const std::vector<double>& candidate, const Matrix& history,
                                const std::vector<double>& w, double b, std::vector<double>* alphas = nullptr) {
  std::vector<double> z;
  for (const auto& row : history) {
    double s = b;
    for (std::size_t c = 0; c < row.size(); ++c) s += w[c] * candidate[c] * row[c];
    z.push_back(s);
  }
  const std::vector<double> a = softmax(z);
  if (alphas) *alphas = a;
  std::vector<double> out(candidate.size(), 0.0);
  for (std::size_t j = 0; j < history.size(); ++j)
    for (std::size_t c = 0; c < out.size(); ++c) out[c] += a[j] * history[j][c];
  return out;
}

/// Score of the candidate at `candidate_pos` with history rows
/// [begin, begin + length).
inline double score(const iert::ParameterStore& store, const iert::EncoderConfig& cfg, const iert::InputSequence& seq,
                    std::size_t user, std::size_t begin, std::size_t length, std::size_t candidate_pos) {
  const Matrix h = encode(store, cfg, seq);
  const Matrix history(h.begin() + static_cast<long>(begin), h.begin() + static_cast<long>(begin + length));
  const std::vector<double> pooled =
      pool(h[candidate_pos], history, vec(store, "head.attention.weight"), store.value("head.attention.bias")[0]);
  const Matrix users = table(store, "head.user");
  double s = 0.0;
  for (std::size_t c = 0; c < pooled.size(); ++c) s += h[candidate_pos][c] * users[user][c] * pooled[c];
  return s;
}

}  // namespace reference

}  // namespace testing
