#include <doctest.h>

#include <cmath>
#include <numeric>
#include <set>

#include "iert/error.hpp"
#include "iert/finetune.hpp"
#include "iert/gradcheck.hpp"
#include "support.hpp"

using namespace iert;
using testing::Matrix;

namespace {

ErrorKind kind_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.kind();
  }
  return ErrorKind::kIo;
}

Vocabulary vocabulary_of(std::size_t catalog) {
  Vocabulary v;
  for (std::size_t i = 0; i < catalog; ++i) v.add("item" + std::to_string(i));
  return v;
}

struct Model {
  EncoderConfig cfg;
  ParameterStore store;
  Vocabulary vocab;
};

Model random_model(std::size_t catalog = 8, std::size_t users = 3, std::uint64_t seed = 1, double sd = 0.5) {
  Model m{testing::tiny_encoder(catalog + 4, 1), ParameterStore(), vocabulary_of(catalog)};
  Rng rng(seed);
  init_encoder_parameters(m.store, m.cfg, rng);
  init_finetune_head(m.store, m.cfg, users, rng);
  m.store.add("mip.output_bias", Tensor({catalog}, 0.0));
  testing::randomize(m.store, seed, sd);
  return m;
}

Matrix matrix_of(const Tensor& t) {
  Matrix m(t.rows(), std::vector<double>(t.cols()));
  for (std::size_t r = 0; r < t.rows(); ++r)
    for (std::size_t c = 0; c < t.cols(); ++c) m[r][c] = t.at(r, c);
  return m;
}

std::vector<Basket> short_history() { return {testing::basket({4, 5}, 0), testing::basket({6}, 1)}; }

Corpus rule_corpus(std::uint64_t seed, std::size_t users = 40) {
  SyntheticSpec spec;
  spec.n_users = users;
  spec.n_items = 10;
  spec.n_baskets_per_user = 6;
  spec.basket_min = 1;
  spec.basket_max = 2;
  spec.sequential_rules = {{0, 1}, {2, 3}};
  spec.noise_rate = 0.0;
  spec.seed = seed;
  return generate_synthetic(spec);
}

}  // namespace

TEST_CASE("an instance packs history, separator and candidate") {
  const Vocabulary v = vocabulary_of(8);
  const RecommendationInstance inst{0, {testing::basket({4, 5})}, 6, true};
  const PackedInstance p = pack_instance(inst, v, 16);
  CHECK(p.input.token_ids == std::vector<TokenId>{1, 4, 5, 2, 6, 2});
  CHECK(p.input.segment_ids == std::vector<std::int64_t>{0, 0, 0, 0, 1, 1});
  CHECK(p.input.position_ids == std::vector<std::int64_t>{0, 1, 2, 3, 4, 5});
  CHECK(p.history_begin == 1);
  CHECK(p.history_length == 2);
  CHECK(p.candidate_position == 4);
  const PackedInstance shared = pack_instance({0, short_history(), 7, false}, v, 16, true);
  CHECK(shared.input.token_ids == std::vector<TokenId>{1, 4, 5, 6, 2, 7, 2});
  CHECK(shared.input.position_ids == std::vector<std::int64_t>{0, 1, 1, 2, 3, 4, 5});
}

TEST_CASE("long histories lose their oldest items") {
  const Vocabulary v = vocabulary_of(200);
  std::vector<Basket> history;
  for (std::size_t i = 0; i < 200; ++i) history.push_back(testing::basket({static_cast<TokenId>(4 + i)}, i));
  const PackedInstance p = pack_instance({0, history, 4, true}, v, 128);
  CHECK(p.input.size() == 128);
  CHECK(p.history_length == 124);
  CHECK(p.input.token_ids[1] == 4 + 76);
  CHECK(p.input.token_ids[124] == 4 + 199);
  CHECK(p.input.token_ids[125] == Vocabulary::kSep);
}

TEST_CASE("packing refuses an empty history or a non-item candidate") {
  const Vocabulary v = vocabulary_of(8);
  CHECK(kind_of([&] { pack_instance({0, {}, 5, true}, v, 16); }) == ErrorKind::kContract);
  CHECK(kind_of([&] { pack_instance({0, {testing::basket({})}, 5, true}, v, 16); }) == ErrorKind::kContract);
  CHECK(kind_of([&] { pack_instance({0, short_history(), Vocabulary::kSep, true}, v, 16); }) == ErrorKind::kContract);
  CHECK(kind_of([&] { pack_instance({0, short_history(), 4, true}, v, 4); }) == ErrorKind::kContract);
}

TEST_CASE("pooling identical rows returns that row") {
  Model m = random_model();
  Tape tape(&m.store);
  Rng rng(2);
  Tensor row({1, 8});
  for (double& x : row.values()) x = rng.normal();
  Tensor hist({3, 8});
  for (std::size_t r = 0; r < 3; ++r)
    for (std::size_t c = 0; c < 8; ++c) hist.at(r, c) = row.at(0, c);
  const PooledHistory p = attention_pool(tape, tape.constant(row), tape.constant(hist));
  for (std::size_t c = 0; c < 8; ++c) CHECK(std::fabs(p.pooled.value().at(0, c) - row.at(0, c)) < 1e-12);
  for (std::size_t j = 0; j < 3; ++j) CHECK(std::fabs(p.alphas.value().at(0, j) - 1.0 / 3.0) < 1e-15);
}

TEST_CASE("zero pooling weights average the history") {
  Model m = random_model();
  m.store.value("head.attention.weight").fill(0.0);
  m.store.value("head.attention.bias")[0] = 3.7;
  Rng rng(3);
  Tensor cand({1, 8}), hist({4, 8});
  for (double& x : cand.values()) x = rng.normal();
  for (double& x : hist.values()) x = rng.normal();
  Tape tape(&m.store);
  const Tensor pooled = attention_pool(tape, tape.constant(cand), tape.constant(hist)).pooled.value();
  for (std::size_t c = 0; c < 8; ++c) {
    double mean = 0.0;
    for (std::size_t r = 0; r < 4; ++r) mean += hist.at(r, c) / 4.0;
    CHECK(std::fabs(pooled.at(0, c) - mean) < 1e-12);
  }
}

TEST_CASE("pooling matches the reference on random rows") {
  for (std::uint64_t seed = 1; seed <= 10; ++seed) {
    Model m = random_model(8, 3, seed);
    Rng rng(seed + 50);
    Tensor cand({1, 8}), hist({3, 8});
    for (double& x : cand.values()) x = rng.normal();
    for (double& x : hist.values()) x = rng.normal();
    Tape tape(&m.store);
    const PooledHistory p = attention_pool(tape, tape.constant(cand), tape.constant(hist));
    std::vector<double> alphas;
    const auto ref = testing::reference::pool(matrix_of(cand)[0], matrix_of(hist),
                                              testing::reference::vec(m.store, "head.attention.weight"),
                                              m.store.value("head.attention.bias")[0], &alphas);
    for (std::size_t c = 0; c < 8; ++c) CHECK(std::fabs(p.pooled.value().at(0, c) - ref[c]) < 1e-12);
    for (std::size_t j = 0; j < 3; ++j) CHECK(std::fabs(p.alphas.value().at(0, j) - alphas[j]) < 1e-12);
  }
}

TEST_CASE("a zero user vector scores zero") {
  Model m = random_model();
  m.store.value("head.user").fill(0.0);
  const PackedInstance p = pack_instance({1, short_history(), 7, true}, m.vocab, 32);
  Tape tape(&m.store);
  CHECK(score_candidate(tape, m.cfg, 1, p).value().item() == 0.0);
}

TEST_CASE("a unit user vector scores candidate against pooled history") {
  Model m = random_model();
  m.store.value("head.user").fill(1.0);
  const PackedInstance p = pack_instance({0, short_history(), 7, true}, m.vocab, 32);
  Tape tape(&m.store);
  PooledHistory pooled;
  const double s = score_candidate(tape, m.cfg, 0, p, {}, &pooled).value().item();
  const Tensor h = encode_values(m.store, m.cfg, p.input);
  double dot = 0.0;
  for (std::size_t c = 0; c < 8; ++c) dot += h.at(p.candidate_position, c) * pooled.pooled.value().at(0, c);
  CHECK(std::fabs(s - dot) < 1e-12);
}

TEST_CASE("scores match the straight-line reference") {
  for (std::uint64_t seed = 1; seed <= 6; ++seed) {
    Model m = random_model(8, 3, seed);
    for (std::size_t user = 0; user < 3; ++user) {
      const PackedInstance p = pack_instance({user, short_history(), static_cast<TokenId>(4 + seed), true}, m.vocab, 32);
      Tape tape(&m.store);
      const double s = score_candidate(tape, m.cfg, user, p).value().item();
      const double ref = testing::reference::score(m.store, m.cfg, p.input, user, p.history_begin, p.history_length,
                                                   p.candidate_position);
      CHECK(std::fabs(s - ref) < 1e-10);
    }
  }
}

TEST_CASE("user index outside the table is a bounds error") {
  Model m = random_model(8, 3);
  const PackedInstance p = pack_instance({3, short_history(), 7, true}, m.vocab, 32);
  Tape tape(&m.store);
  CHECK(kind_of([&] { score_candidate(tape, m.cfg, 3, p); }) == ErrorKind::kBounds);
}

TEST_CASE("a lone candidate has probability one") {
  Model m = random_model();
  const TokenId only[] = {6};
  CHECK(score_items(m.store, m.cfg, m.vocab, 0, short_history(), only) == std::vector<double>{1.0});
}

TEST_CASE("catalog probabilities form a distribution matching softmax of the scores") {
  Model m = random_model(50);
  std::vector<TokenId> all(50);
  std::iota(all.begin(), all.end(), TokenId{4});
  const auto probs = score_items(m.store, m.cfg, m.vocab, 2, short_history(), all);
  const auto scores = candidate_scores(m.store, m.cfg, m.vocab, 2, short_history(), all);
  CHECK(std::fabs(std::accumulate(probs.begin(), probs.end(), 0.0) - 1.0) < 1e-12);
  std::vector<double> shifted = scores;
  for (double& s : shifted) s += 250.0;
  const auto ref = testing::reference::softmax(scores), ref_shifted = testing::reference::softmax(shifted);
  for (std::size_t i = 0; i < 50; ++i) {
    CHECK(probs[i] >= 0.0);
    CHECK(std::fabs(probs[i] - ref[i]) < 1e-12);
    CHECK(std::fabs(ref_shifted[i] - ref[i]) < 1e-12);
  }
}

TEST_CASE("zero weights cost log 2 per instance") {
  Model m = random_model();
  for (const std::string& name : m.store.names()) m.store.value(name).fill(0.0);
  FineTuneConfig config;
  config.positive_weight = 1.0;
  config.negative_weight = 1.0;
  const std::vector<RecommendationInstance> batch = {
      {0, short_history(), 7, true}, {1, short_history(), 8, false}, {2, short_history(), 9, false}};
  Tape tape(&m.store);
  CHECK(std::fabs(finetune_loss(tape, m.cfg, config, m.vocab, batch).value().item() - 3 * std::log(2.0)) < 1e-12);
  config.positive_weight = 4.0;
  Tape weighted(&m.store);
  CHECK(std::fabs(finetune_loss(weighted, m.cfg, config, m.vocab, batch).value().item() - 6 * std::log(2.0)) < 1e-12);
}

TEST_CASE("positive weight scales positive gradients linearly") {
  Model m = random_model();
  const std::vector<RecommendationInstance> batch = {{0, short_history(), 7, true}, {1, short_history(), 9, true}};
  auto grads = [&](double weight) {
    FineTuneConfig config;
    config.positive_weight = weight;
    m.store.zero_grad();
    Tape tape(&m.store);
    tape.backward(finetune_loss(tape, m.cfg, config, m.vocab, batch));
    std::map<std::string, Tensor> out;
    for (const std::string& name : m.store.names()) out[name] = m.store.grad(name);
    return out;
  };
  const auto one = grads(1.0), ten = grads(10.0);
  for (const auto& [name, g] : one)
    for (std::size_t i = 0; i < g.size(); ++i) CHECK(std::fabs(ten.at(name)[i] - 10.0 * g[i]) < 1e-10 * (1 + std::fabs(g[i])));
}

TEST_CASE("fine-tuning loss passes the finite-difference check") {
  for (double aux : {0.0, 0.5}) {
    Model m = random_model(8, 3, 4, 0.3);
    FineTuneConfig config;
    config.aux_mip_weight = aux;
    const std::vector<RecommendationInstance> batch = {
        {0, short_history(), 7, true}, {2, {testing::basket({9, 10, 11})}, 5, false}};
    auto loss = [&](ParameterStore& s, bool grads) {
      Rng rng(5);
      Tape tape(&s);
      Var l = finetune_loss(tape, m.cfg, config, m.vocab, batch, {}, &rng);
      const double v = l.value().item();
      if (grads) tape.backward(l);
      return v;
    };
    GradientCheckOptions options;
    options.samples = 200;
    const auto report = finite_difference_check(loss, m.store, options);
    INFO("aux " << aux << " worst " << report.worst.name << "[" << report.worst.index << "]");
    CHECK(report.max_relative_error < 1e-3);
  }
}

TEST_CASE("equal scores rank by index and report uniform probabilities") {
  Model m = random_model(6);
  m.store.value("head.user").fill(0.0);
  const RankedList list = recommend_top_k(m.store, m.cfg, m.vocab, 0, short_history(), 3);
  CHECK(list.items == std::vector<TokenId>{4, 5, 6});
  for (double p : list.scores) CHECK(std::fabs(p - 1.0 / 6.0) < 1e-15);
  const RankedList unseen = recommend_top_k(m.store, m.cfg, m.vocab, 0, short_history(), 3, true);
  CHECK(unseen.items == std::vector<TokenId>{7, 8, 9});
}

TEST_CASE("K beyond the catalog is clamped") {
  Model m = random_model(6);
  const RankedList list = recommend_top_k(m.store, m.cfg, m.vocab, 1, short_history(), 50);
  CHECK(list.items.size() == 6);
  for (std::size_t i = 1; i < list.scores.size(); ++i) CHECK(list.scores[i - 1] >= list.scores[i]);
  const RankedList unseen = recommend_top_k(m.store, m.cfg, m.vocab, 1, short_history(), 50, true);
  CHECK(unseen.items.size() == 3);
}

TEST_CASE("the candidate's representation depends on the history") {
  Model m = random_model();
  const PackedInstance a = pack_instance({0, {testing::basket({4, 5})}, 9, true}, m.vocab, 32);
  const PackedInstance b = pack_instance({0, {testing::basket({6, 7})}, 9, true}, m.vocab, 32);
  const Tensor ha = encode_values(m.store, m.cfg, a.input), hb = encode_values(m.store, m.cfg, b.input);
  double diff = 0.0;
  for (std::size_t c = 0; c < 8; ++c) diff += std::fabs(ha.at(4, c) - hb.at(4, c));
  CHECK(diff > 1e-6);
}

TEST_CASE("epoch instances come from the train split with the requested negatives") {
  const Corpus c = rule_corpus(1);
  FineTuneConfig config;
  config.neg_per_pos = 3;
  config.targets_per_user = 2;
  FineTuner t(c, testing::tiny_encoder(0), config, 1);
  const auto instances = t.epoch_instances();
  std::map<std::pair<std::size_t, std::size_t>, std::pair<std::size_t, std::size_t>> counts;
  for (const auto& inst : instances) {
    const auto& train = c.split[inst.user_index].train;
    REQUIRE(!inst.history.empty());
    REQUIRE(inst.history.size() < train.size());
    for (std::size_t i = 0; i < inst.history.size(); ++i) CHECK(inst.history[i] == train[i]);
    const Basket& target = train[inst.history.size()];
    CHECK(target.contains(inst.candidate) == inst.label);
    auto& [pos, neg] = counts[{inst.user_index, inst.history.size()}];
    (inst.label ? pos : neg) += 1;
  }
  std::set<std::size_t> users;
  for (const auto& [key, pn] : counts) {
    users.insert(key.first);
    const Basket& target = c.split[key.first].train[key.second];
    CHECK(pn.first == target.items.size());
    CHECK(pn.second == std::min(c.vocabulary.catalog_size() - target.items.size(), 3 * target.items.size()));
  }
  CHECK(users.size() == c.users.size());
  CHECK(counts.size() == 2 * c.users.size());
}

TEST_CASE("popularity negatives avoid the target basket") {
  const Corpus c = rule_corpus(2);
  FineTuneConfig config;
  config.sampling = NegativeSampling::kPopularity;
  FineTuner t(c, testing::tiny_encoder(0), config, 1);
  for (const auto& inst : t.epoch_instances()) {
    const Basket& target = c.split[inst.user_index].train[inst.history.size()];
    if (!inst.label) CHECK_FALSE(target.contains(inst.candidate));
  }
  CHECK(parse_negative_sampling("uniform") == NegativeSampling::kUniform);
  CHECK(kind_of([] { parse_negative_sampling("zipf"); }) == ErrorKind::kConfig);
}

TEST_CASE("repeated steps on one batch lower its loss") {
  const Corpus c = rule_corpus(3);
  FineTuneConfig config;
  config.learning_rate = 1e-2;
  FineTuner t(c, testing::tiny_encoder(0), config, 2);
  auto instances = t.epoch_instances();
  instances.resize(16);
  const double first = t.train_batch(instances);
  double last = first;
  for (int i = 0; i < 30; ++i) last = t.train_batch(instances);
  CHECK(last < first);
  CHECK(t.steps_done() == 31);
}

TEST_CASE("test history is the train baskets followed by validation") {
  const Corpus c = rule_corpus(1);
  const auto h = test_history(c, 5);
  REQUIRE(h.size() == c.split[5].train.size() + 1);
  CHECK(h.back() == c.split[5].validation);
  CHECK(kind_of([&] { test_history(c, c.users.size()); }) == ErrorKind::kBounds);
}

TEST_CASE("fine-tuning starts from the pretrained encoder tensors") {
  const Corpus c = rule_corpus(1);
  const auto dir = testing::scratch_dir("finetune_from_pretrain");
  PretrainConfig pc;
  pc.batch_size = 2;
  pc.learning_rate = 1e-2;
  Pretrainer p(c, testing::tiny_encoder(0), pc, 3);
  for (int i = 0; i < 3; ++i) p.step();
  p.save(dir / "p.ckpt");
  const Checkpoint ckpt = load_checkpoint(dir / "p.ckpt");
  FineTuner t(c, ckpt, FineTuneConfig{}, 9);
  for (const std::string& name : encoder_parameter_names(p.encoder())) {
    const Tensor& a = t.store().value(name);
    const Tensor& b = p.store().value(name);
    double diff = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) diff = std::max(diff, std::fabs(a[i] - b[i]));
    CHECK_MESSAGE(diff == 0.0, name);
  }
  CHECK(t.store().value("head.user").shape() == Shape{c.users.size(), 8});
  CHECK_FALSE(t.store().contains("nbp.weight"));

  Corpus smaller = rule_corpus(1);
  smaller.vocabulary.add("extra");
  CHECK(kind_of([&] { FineTuner(smaller, ckpt, FineTuneConfig{}, 1); }) == ErrorKind::kConfig);
}

TEST_CASE("saved fine-tuned models reload and refuse other stages") {
  const Corpus c = rule_corpus(1);
  const auto dir = testing::scratch_dir("finetune_save");
  FineTuner t(c, testing::tiny_encoder(0), FineTuneConfig{}, 1);
  t.save(dir / "f.ckpt");
  FineTunedModel model = load_finetuned(dir / "f.ckpt");
  CHECK(model.encoder.to_meta() == t.encoder().to_meta());
  for (const std::string& name : t.store().names()) CHECK(model.store.value(name) == t.store().value(name));
  const auto a = recommend_top_k(model.store, model.encoder, c.vocabulary, 0, test_history(c, 0), 5);
  const auto b = recommend_top_k(t.store(), t.encoder(), c.vocabulary, 0, test_history(c, 0), 5);
  CHECK(a.items == b.items);
  Pretrainer p(c, testing::tiny_encoder(0), PretrainConfig{}, 1);
  p.save(dir / "p.ckpt");
  CHECK(kind_of([&] { load_finetuned(dir / "p.ckpt"); }) == ErrorKind::kConfig);
}

TEST_CASE("a planted successor rule reaches the top five") {
  const Corpus c = rule_corpus(3, 400);
  EncoderConfig enc = testing::tiny_encoder(0, 1);
  enc.hidden_size = 32;
  enc.feed_forward_size = 64;
  FineTuneConfig config;
  config.learning_rate = 2e-3;
  config.linear_decay = true;
  config.epochs = 4;
  config.targets_per_user = 5;
  config.batch_size = 16;
  config.positive_weight = 1.0;
  FineTuner t(c, enc, config, 3);
  for (std::size_t e = 0; e < config.epochs; ++e) t.train_epoch();
  std::size_t cases = 0, hits = 0;
  for (std::size_t u = 0; u < c.users.size(); ++u) {
    const std::vector<Basket>& history = c.split[u].train;
    for (const auto& [x, y] : {std::pair<TokenId, TokenId>{4, 5}, {6, 7}}) {
      if (!history.back().contains(x)) continue;
      ++cases;
      const RankedList list = recommend_top_k(t.store(), t.encoder(), c.vocabulary, u, history, 5);
      if (std::find(list.items.begin(), list.items.end(), y) != list.items.end()) ++hits;
    }
  }
  REQUIRE(cases > 50);
  INFO("hits " << hits << " of " << cases);
  CHECK(static_cast<double>(hits) >= 0.9 * static_cast<double>(cases));
}
