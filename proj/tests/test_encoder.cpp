#include <doctest.h>

#include "iert/encoder.hpp"
#include "iert/error.hpp"
#include "iert/tape.hpp"
#include "support.hpp"

using namespace iert;
using testing::Matrix;

namespace {

InputSequence make_seq(std::vector<TokenId> tokens, std::vector<std::int64_t> segments = {}) {
  InputSequence s;
  s.token_ids = std::move(tokens);
  s.segment_ids = segments.empty() ? std::vector<std::int64_t>(s.token_ids.size(), 0) : std::move(segments);
  for (std::size_t i = 0; i < s.token_ids.size(); ++i) s.position_ids.push_back(static_cast<std::int64_t>(i));
  s.attention_mask.assign(s.token_ids.size(), 1);
  return s;
}

struct Model {
  EncoderConfig cfg;
  ParameterStore store;
};

Model random_model(std::size_t layers = 2, std::uint64_t seed = 1) {
  Model m{testing::tiny_encoder(12, layers), ParameterStore()};
  Rng rng(seed);
  init_encoder_parameters(m.store, m.cfg, rng);
  testing::randomize(m.store, seed);
  return m;
}

double max_row_diff(const Tensor& a, std::size_t ra, const Tensor& b, std::size_t rb) {
  double d = 0.0;
  for (std::size_t c = 0; c < a.cols(); ++c) d = std::max(d, std::fabs(a.at(ra, c) - b.at(rb, c)));
  return d;
}

}  // namespace

TEST_CASE("config validation") {
  EncoderConfig c = testing::tiny_encoder(10);
  CHECK_NOTHROW(c.validate());
  c.num_heads = 3;
  CHECK_THROWS_AS(c.validate(), Error);
  c = testing::tiny_encoder(10);
  c.max_sequence_length = 2;
  CHECK_THROWS_AS(c.validate(), Error);
  c = testing::tiny_encoder(10);
  c.hidden_size = 0;
  CHECK_THROWS_AS(c.validate(), Error);
}

TEST_CASE("config survives the manifest form") {
  EncoderConfig c = testing::tiny_encoder(17, 3);
  c.dropout_rate = 0.25;
  c.positions_per_basket = true;
  const EncoderConfig back = EncoderConfig::from_meta(c.to_meta());
  CHECK(back.to_meta() == c.to_meta());
  CHECK(back.vocab_size == 17);
  CHECK(back.dropout_rate == 0.25);
}

TEST_CASE("zero tables give the norm bias at every position") {
  Model m = random_model(0);
  m.store.value("embeddings.token").fill(0.0);
  m.store.value("embeddings.segment").fill(0.0);
  m.store.value("embeddings.position").fill(0.0);
  const Tensor h = encode_values(m.store, m.cfg, make_seq({1, 5, 6, 2}));
  const Tensor& bias = m.store.value("embeddings.norm.bias");
  for (std::size_t r = 0; r < h.rows(); ++r)
    for (std::size_t c = 0; c < h.cols(); ++c) CHECK(h.at(r, c) == bias[c]);
}

TEST_CASE("identical ids give identical input rows") {
  Model m = random_model(0);
  InputSequence s = make_seq({1, 5, 5, 2});
  s.position_ids = {0, 1, 1, 2};
  m.cfg.positions_per_basket = true;
  Tape tape(&m.store);
  const Tensor e = build_input_representation(tape, m.cfg, s).value();
  CHECK(max_row_diff(e, 1, e, 2) == 0.0);
}

TEST_CASE("input row equals the normalized sum of the three lookups") {
  Model m = random_model(0);
  const InputSequence s = make_seq({1, 7, 2}, {0, 1, 1});
  Tape tape(&m.store);
  const Tensor e = build_input_representation(tape, m.cfg, s).value();
  for (std::size_t r = 0; r < 3; ++r) {
    Matrix row(1, std::vector<double>(m.cfg.hidden_size));
    for (std::size_t c = 0; c < m.cfg.hidden_size; ++c) {
      row[0][c] = m.store.value("embeddings.token").at(s.token_ids[r], c) +
                  m.store.value("embeddings.segment").at(s.segment_ids[r], c) +
                  m.store.value("embeddings.position").at(r, c);
    }
    testing::reference::normalize(row, testing::reference::vec(m.store, "embeddings.norm.gain"),
                                  testing::reference::vec(m.store, "embeddings.norm.bias"));
    for (std::size_t c = 0; c < m.cfg.hidden_size; ++c) CHECK(std::fabs(e.at(r, c) - row[0][c]) < 1e-12);
  }
}

TEST_CASE("out-of-range ids name the table and index") {
  Model m = random_model(1);
  auto message = [&](const InputSequence& s) {
    try {
      encode_values(m.store, m.cfg, s);
    } catch (const Error& e) {
      CHECK(e.kind() == ErrorKind::kBounds);
      return std::string(e.what());
    }
    return std::string("no error");
  };
  const std::string token = message(make_seq({1, 12, 2}));
  CHECK(token.find("embeddings.token") != std::string::npos);
  CHECK(token.find("12") != std::string::npos);
  CHECK(message(make_seq({1, 5, 2}, {0, 2, 0})).find("embeddings.segment") != std::string::npos);
}

TEST_CASE("a single position attends to itself with weight one") {
  Model m = random_model(1);
  EncoderTrace trace;
  encode_values(m.store, m.cfg, make_seq({1}), &trace);
  REQUIRE(trace.attention.size() == m.cfg.num_heads);
  for (const Tensor& a : trace.attention) CHECK(a.item() == 1.0);
}

TEST_CASE("with one visible key every query receives that key's value") {
  Model m = random_model(1);
  const InputSequence s = make_seq({1, 5, 6, 7, 2});
  const std::size_t n = s.size(), key = 2;
  std::vector<std::uint8_t> allowed(n * n, 0);
  for (std::size_t q = 0; q < n; ++q) allowed[q * n + key] = 1;
  Tape tape(&m.store);
  Var input = build_input_representation(tape, m.cfg, s);
  EncoderTrace trace;
  EncodeContext ctx;
  ctx.trace = &trace;
  const Tensor out = transformer_block(tape, m.cfg, input, allowed, 0, ctx).value();
  for (const Tensor& a : trace.attention)
    for (std::size_t q = 0; q < n; ++q) CHECK(a.at(q, key) == 1.0);

  using namespace testing::reference;
  const Tensor& x = input.value();
  Matrix h(n, std::vector<double>(m.cfg.hidden_size));
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t c = 0; c < m.cfg.hidden_size; ++c) h[r][c] = x.at(r, c);
  const Matrix v = affine(h, table(m.store, "layer0.attention.value.weight"),
                          vec(m.store, "layer0.attention.value.bias"));
  const Matrix mixed(n, v[key]);
  Matrix attended = affine(mixed, table(m.store, "layer0.attention.output.weight"),
                           vec(m.store, "layer0.attention.output.bias"));
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t c = 0; c < m.cfg.hidden_size; ++c) attended[r][c] += h[r][c];
  normalize(attended, vec(m.store, "layer0.attention.norm.gain"), vec(m.store, "layer0.attention.norm.bias"));
  Matrix inner = affine(attended, table(m.store, "layer0.ffn.in.weight"), vec(m.store, "layer0.ffn.in.bias"));
  for (auto& row : inner)
    for (double& z : row) z = 0.5 * z * (1.0 + std::erf(z / std::sqrt(2.0)));
  Matrix outer = affine(inner, table(m.store, "layer0.ffn.out.weight"), vec(m.store, "layer0.ffn.out.bias"));
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t c = 0; c < m.cfg.hidden_size; ++c) outer[r][c] += attended[r][c];
  normalize(outer, vec(m.store, "layer0.ffn.norm.gain"), vec(m.store, "layer0.ffn.norm.bias"));
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t c = 0; c < m.cfg.hidden_size; ++c) CHECK(std::fabs(out.at(r, c) - outer[r][c]) < 1e-12);
}

TEST_CASE("swapping two items that share a position swaps their outputs") {
  Model m = random_model(2);
  m.cfg.positions_per_basket = true;
  InputSequence a = make_seq({1, 5, 6, 7, 2});
  a.position_ids = {0, 1, 1, 1, 2};
  InputSequence b = a;
  std::swap(b.token_ids[1], b.token_ids[3]);
  const Tensor ha = encode_values(m.store, m.cfg, a), hb = encode_values(m.store, m.cfg, b);
  CHECK(max_row_diff(ha, 1, hb, 3) < 1e-12);
  CHECK(max_row_diff(ha, 3, hb, 1) < 1e-12);
  CHECK(max_row_diff(ha, 2, hb, 2) < 1e-12);
  CHECK(max_row_diff(ha, 0, hb, 0) < 1e-12);
}

TEST_CASE("an empty stack returns the input representation") {
  Model m = random_model(0);
  const InputSequence s = make_seq({1, 5, 6, 2});
  Tape tape(&m.store);
  const Tensor e = build_input_representation(tape, m.cfg, s).value();
  CHECK(encode_values(m.store, m.cfg, s) == e);
}

TEST_CASE("encoding is deterministic") {
  Model m = random_model();
  const InputSequence s = make_seq({1, 5, 6, 2, 8, 2}, {0, 0, 0, 0, 1, 1});
  CHECK(encode_values(m.store, m.cfg, s) == encode_values(m.store, m.cfg, s));
}

TEST_CASE("encoder matches the straight-line reference") {
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    Model m = random_model(2, seed);
    const InputSequence s = make_seq({1, 5, 6, 11, 2, 8, 4, 2}, {0, 0, 0, 0, 0, 1, 1, 1});
    const Tensor h = encode_values(m.store, m.cfg, s);
    const Matrix ref = testing::reference::encode(m.store, m.cfg, s);
    for (std::size_t r = 0; r < h.rows(); ++r)
      for (std::size_t c = 0; c < h.cols(); ++c) CHECK(std::fabs(h.at(r, c) - ref[r][c]) < 1e-10);
  }
}

TEST_CASE("changing one token changes every non-pad row") {
  Model m = random_model();
  InputSequence a = make_seq({1, 5, 6, 7, 2});
  a.pad_to(8);
  InputSequence b = a;
  b.token_ids[2] = 9;
  const Tensor ha = encode_values(m.store, m.cfg, a), hb = encode_values(m.store, m.cfg, b);
  for (std::size_t r = 0; r < 5; ++r) CHECK(max_row_diff(ha, r, hb, r) > 0.0);
}

TEST_CASE("padding never influences real rows") {
  Model m = random_model();
  const InputSequence bare = make_seq({1, 5, 6, 2, 7, 2}, {0, 0, 0, 0, 1, 1});
  const Tensor h0 = encode_values(m.store, m.cfg, bare);
  for (std::size_t width : {7, 10, 20, 32}) {
    InputSequence padded = bare;
    padded.pad_to(width);
    const Tensor h = encode_values(m.store, m.cfg, padded);
    for (std::size_t r = 0; r < 6; ++r) CHECK(max_row_diff(h0, r, h, r) < 1e-12);
  }
}

TEST_CASE("the same item is represented differently in different baskets") {
  Model m = random_model();
  const Tensor ha = encode_values(m.store, m.cfg, make_seq({1, 5, 6, 2}));
  const Tensor hb = encode_values(m.store, m.cfg, make_seq({1, 5, 9, 2}));
  CHECK(max_row_diff(ha, 1, hb, 1) > 0.0);
}

TEST_CASE("attention rows are distributions over unmasked keys") {
  Model m = random_model();
  InputSequence s = make_seq({1, 5, 6, 2, 7, 2}, {0, 0, 0, 0, 1, 1});
  s.pad_to(9);
  EncoderTrace trace;
  encode_values(m.store, m.cfg, s, &trace);
  CHECK(trace.attention.size() == m.cfg.num_layers * m.cfg.num_heads);
  for (const Tensor& a : trace.attention) {
    for (std::size_t q = 0; q < 6; ++q) {
      double total = 0.0;
      for (std::size_t k = 0; k < 9; ++k) {
        if (k >= 6) CHECK(a.at(q, k) == 0.0);
        total += a.at(q, k);
      }
      CHECK(std::fabs(total - 1.0) < 1e-9);
    }
  }
}

TEST_CASE("output shape is length by hidden for every valid length") {
  Model m = random_model(1);
  for (std::size_t len = 3; len <= m.cfg.max_sequence_length; ++len) {
    std::vector<TokenId> tokens(len, 5);
    tokens.front() = Vocabulary::kCls;
    tokens.back() = Vocabulary::kSep;
    const Tensor h = encode_values(m.store, m.cfg, make_seq(tokens));
    CHECK(h.shape() == Shape{len, m.cfg.hidden_size});
    CHECK(h.all_finite());
  }
  std::vector<TokenId> too_long(m.cfg.max_sequence_length + 1, 5);
  too_long.front() = Vocabulary::kCls;
  CHECK_THROWS_AS(encode_values(m.store, m.cfg, make_seq(too_long)), Error);
}

TEST_CASE("sequence invariants are enforced") {
  Model m = random_model(1);
  InputSequence s = make_seq({5, 6, 2});
  CHECK_THROWS_AS(encode_values(m.store, m.cfg, s), Error);
  s = make_seq({1, 5, 6, 2});
  s.position_ids[2] = 1;
  CHECK_THROWS_AS(encode_values(m.store, m.cfg, s), Error);
  s = make_seq({1, 5, 6, 2});
  s.segment_ids.pop_back();
  CHECK_THROWS_AS(encode_values(m.store, m.cfg, s), Error);
}

TEST_CASE("training-mode dropout perturbs outputs reproducibly") {
  Model m = random_model();
  m.cfg.dropout_rate = 0.3;
  const InputSequence s = make_seq({1, 5, 6, 2});
  auto run = [&](std::uint64_t seed) {
    Rng rng(seed);
    EncodeContext ctx;
    ctx.training = true;
    ctx.rng = &rng;
    Tape tape(&m.store);
    return encode(tape, m.cfg, s, ctx).value();
  };
  CHECK(run(4) == run(4));
  CHECK_FALSE(run(4) == encode_values(m.store, m.cfg, s));
}

TEST_CASE("positions count up or repeat within a basket") {
  InputSequence s = make_seq({1, 5, 6, 2, 7, 2});
  assign_positions(s, false);
  CHECK(s.position_ids == std::vector<std::int64_t>{0, 1, 2, 3, 4, 5});
  const std::size_t runs[] = {2, 1};
  assign_positions(s, true, runs);
  CHECK(s.position_ids == std::vector<std::int64_t>{0, 1, 1, 2, 3, 4});
}

TEST_CASE("parameter layout") {
  const EncoderConfig c = testing::tiny_encoder(10, 2);
  ParameterStore store;
  Rng rng(1);
  init_encoder_parameters(store, c, rng);
  CHECK(store.names() == [&] {
    auto n = encoder_parameter_names(c);
    std::sort(n.begin(), n.end());
    return n;
  }());
  CHECK(store.value("embeddings.token").shape() == Shape{10, 8});
  CHECK(store.value("layer1.ffn.in.weight").shape() == Shape{8, 16});
  for (double g : store.value("layer0.attention.norm.gain").values()) CHECK(g == 1.0);
  for (double b : store.value("layer0.ffn.in.bias").values()) CHECK(b == 0.0);
  for (double w : store.value("embeddings.token").values()) CHECK(std::fabs(w) <= 2 * c.init_std);
}
