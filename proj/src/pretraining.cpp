#include "iert/pretraining.hpp"

#include <algorithm>
#include <cmath>

#include "iert/checkpoint.hpp"
#include "iert/error.hpp"

namespace iert {

NegativeMode parse_negative_mode(const std::string& text) {
  if (text == "same_user") return NegativeMode::kSameUserFirst;
  if (text == "cross_user") return NegativeMode::kCrossUser;
  fail(ErrorKind::kConfig, "negative_mode must be 'same_user' or 'cross_user', got '" + text + "'");
}

std::string to_string(NegativeMode mode) {
  return mode == NegativeMode::kCrossUser ? "cross_user" : "same_user";
}

PairSampler::PairSampler(const Corpus& corpus, NegativeMode mode) : corpus_(&corpus), mode_(mode) {
  require(corpus.has_split(), ErrorKind::kContract, "pair sampler: corpus is not split");
  for (std::size_t u = 0; u < corpus.split.size(); ++u) {
    const auto& train = corpus.split[u].train;
    if (!train.empty()) users_with_train_.push_back(u);
    for (std::size_t t = 0; t + 1 < train.size(); ++t) anchors_.emplace_back(u, t);
  }
  require(!anchors_.empty(), ErrorKind::kSampling,
          "pair sampler: no user has two consecutive train baskets");
}

BasketPair PairSampler::cross_user(std::size_t user, std::size_t index, Rng& rng) const {
  require(users_with_train_.size() >= 2, ErrorKind::kSampling,
          "pair sampler: a negative pair needs a second user with train baskets");
  std::size_t other = user;
  while (other == user) other = users_with_train_[rng.index(users_with_train_.size())];
  const auto& train = corpus_->split[other].train;
  const std::size_t j = rng.index(train.size());
  return {corpus_->split[user].train[index], train[j], false, user, index, other, j};
}

BasketPair PairSampler::sample(Rng& rng) const {
  const auto [u, t] = anchors_[rng.index(anchors_.size())];
  const auto& train = corpus_->split[u].train;
  if (rng.bernoulli(0.5)) return {train[t], train[t + 1], true, u, t, u, t + 1};
  if (mode_ == NegativeMode::kSameUserFirst) {
    std::vector<std::size_t> apart;
    for (std::size_t j = 0; j < train.size(); ++j) {
      if (j + 1 < t || j > t + 1) apart.push_back(j);
    }
    if (!apart.empty()) {
      const std::size_t j = apart[rng.index(apart.size())];
      return {train[t], train[j], false, u, t, u, j};
    }
  }
  return cross_user(u, t, rng);
}

BasketPair sample_basket_pair(const Corpus& corpus, Rng& rng, NegativeMode mode) {
  return PairSampler(corpus, mode).sample(rng);
}

InputSequence pack_basket_pair(const Basket& a, const Basket& b, std::size_t max_length,
                               bool positions_per_basket) {
  require(max_length >= 3, ErrorKind::kContract, "pack_basket_pair: max_length below 3");
  std::size_t len_a = a.items.size();
  std::size_t len_b = b.items.size();
  while (len_a + len_b + 3 > max_length) {
    if (len_a > len_b) {
      --len_a;
    } else {
      --len_b;
    }
  }
  InputSequence seq;
  auto push = [&](TokenId token, std::int64_t segment) {
    seq.token_ids.push_back(token);
    seq.segment_ids.push_back(segment);
    seq.attention_mask.push_back(1);
  };
  push(Vocabulary::kCls, 0);
  for (std::size_t i = 0; i < len_a; ++i) push(a.items[i], 0);
  push(Vocabulary::kSep, 0);
  for (std::size_t i = 0; i < len_b; ++i) push(b.items[i], 1);
  push(Vocabulary::kSep, 1);
  const std::size_t sizes[] = {len_a, len_b};
  assign_positions(seq, positions_per_basket, sizes);
  return seq;
}

void MaskingConfig::validate() const {
  require(mask_rate > 0.0 && mask_rate <= 1.0, ErrorKind::kConfig, "mask_rate must lie in (0, 1]");
  require(replace_with_mask >= 0 && replace_with_random >= 0 && keep_original >= 0 &&
              std::fabs(replace_with_mask + replace_with_random + keep_original - 1.0) < 1e-9,
          ErrorKind::kConfig, "mask replacement probabilities must be non-negative and sum to 1");
}

PretrainExample apply_masking(const InputSequence& input, const MaskingConfig& config, Rng& rng,
                              const Vocabulary& vocabulary) {
  config.validate();
  std::vector<std::size_t> eligible;
  for (std::size_t i = 0; i < input.size(); ++i) {
    if (input.attention_mask[i] && vocabulary.is_item(input.token_ids[i])) eligible.push_back(i);
  }
  require(!eligible.empty(), ErrorKind::kContract, "apply_masking: sequence has no real items");
  PretrainExample example;
  example.input = input;
  while (example.mask_positions.empty()) {
    for (std::size_t i : eligible) {
      if (rng.bernoulli(config.mask_rate)) example.mask_positions.push_back(i);
    }
  }
  const auto catalog = vocabulary.catalog_size();
  for (std::size_t pos : example.mask_positions) {
    example.mask_targets.push_back(input.token_ids[pos]);
    const double r = rng.uniform();
    if (r < config.replace_with_mask) {
      example.input.token_ids[pos] = Vocabulary::kMask;
    } else if (r < config.replace_with_mask + config.replace_with_random) {
      example.input.token_ids[pos] = Vocabulary::kFirstItem + static_cast<TokenId>(rng.index(catalog));
    }
  }
  return example;
}

void init_pretraining_heads(ParameterStore& store, const EncoderConfig& config, Rng& rng) {
  const std::size_t catalog = config.vocab_size - static_cast<std::size_t>(Vocabulary::kFirstItem);
  store.add("mip.output_bias", Tensor({catalog}, 0.0));
  Tensor w({config.hidden_size});
  for (double& v : w.values()) v = rng.truncated_normal(config.init_std);
  store.add("nbp.weight", std::move(w));
  store.add("nbp.bias", Tensor({1}, 0.0));
}

Var masked_item_loss(Tape& tape, const EncoderConfig& config, Var hidden, const PretrainExample& example) {
  require(!example.mask_positions.empty() && example.mask_positions.size() == example.mask_targets.size(),
          ErrorKind::kContract, "masked_item_loss: example needs matching, non-empty mask lists");
  const std::size_t first = static_cast<std::size_t>(Vocabulary::kFirstItem);
  const std::size_t catalog = config.vocab_size - first;
  std::vector<std::int64_t> rows(example.mask_positions.begin(), example.mask_positions.end());
  std::vector<std::size_t> targets;
  for (TokenId t : example.mask_targets) {
    require(t >= Vocabulary::kFirstItem && static_cast<std::size_t>(t) < config.vocab_size,
            ErrorKind::kContract, "masked_item_loss: target " + std::to_string(t) + " is not a real item");
    targets.push_back(static_cast<std::size_t>(t) - first);
  }
  Var picked = gather_rows(hidden, rows);
  Var items = slice_rows(tape.parameter("embeddings.token"), first, catalog);
  Var logits = add(matmul_nt(picked, items), tape.parameter("mip.output_bias"));
  return cross_entropy_rows(logits, targets);
}

Var next_basket_loss(Tape& tape, Var hidden, bool is_next) {
  Var cls = slice_rows(hidden, 0, 1);
  Var logit = add(sum(mul(cls, tape.parameter("nbp.weight"))), tape.parameter("nbp.bias"));
  return binary_cross_entropy_logit(logit, is_next);
}

ExampleLoss pretrain_example_loss(Tape& tape, const EncoderConfig& encoder, const PretrainConfig& config,
                                  const PretrainExample& example, const EncodeContext& context) {
  Var hidden = encode(tape, encoder, example.input, context);
  Var l2 = next_basket_loss(tape, hidden, example.is_next);
  if (!config.mip_same_basket_only) return {masked_item_loss(tape, encoder, hidden, example), l2};
  const std::size_t n = example.input.size();
  std::vector<std::uint8_t> same_segment(n * n);
  for (std::size_t q = 0; q < n; ++q)
    for (std::size_t k = 0; k < n; ++k)
      same_segment[q * n + k] = example.input.segment_ids[q] == example.input.segment_ids[k] ? 1 : 0;
  EncodeContext restricted = context;
  restricted.allowed = &same_segment;
  Var basket_hidden = encode(tape, encoder, example.input, restricted);
  return {masked_item_loss(tape, encoder, basket_hidden, example), l2};
}

PretrainLosses pretrain_step(std::span<const PretrainExample> batch, ParameterStore& store, AdamState& adam,
                             const EncoderConfig& encoder, const PretrainConfig& config, Rng& rng) {
  require(!batch.empty(), ErrorKind::kContract, "pretrain_step: empty batch");
  const double inv = 1.0 / static_cast<double>(batch.size());
  PretrainLosses losses;
  EncodeContext context;
  context.training = true;
  context.rng = &rng;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    Tape tape(&store);
    ExampleLoss loss = pretrain_example_loss(tape, encoder, config, batch[i], context);
    const double l1 = loss.l1.value().item();
    const double l2 = loss.l2.value().item();
    if (!std::isfinite(l1) || !std::isfinite(l2)) {
      store.zero_grad();
      fail(ErrorKind::kNonFinite, "pretrain_step: non-finite loss at batch example " + std::to_string(i) +
                                      " (l1=" + std::to_string(l1) + ", l2=" + std::to_string(l2) + ")");
    }
    losses.l1 += l1 * inv;
    losses.l2 += l2 * inv;
    tape.backward(scale(add(loss.l1, loss.l2), inv));
  }
  losses.l3 = losses.l1 + losses.l2;
  adam_step(store, adam);
  return losses;
}

Pretrainer::Pretrainer(const Corpus& corpus, EncoderConfig encoder, PretrainConfig config, std::uint64_t seed)
    : corpus_(&corpus),
      encoder_(std::move(encoder)),
      config_(std::move(config)),
      sampler_(corpus, config_.negative_mode),
      store_(seed),
      rng_(seed) {
  encoder_.vocab_size = corpus.vocabulary.size();
  encoder_.validate();
  config_.masking.validate();
  require(config_.batch_size > 0, ErrorKind::kConfig, "pretrain: batch_size must be positive");
  adam_.learning_rate = config_.learning_rate;
  init_encoder_parameters(store_, encoder_, rng_);
  init_pretraining_heads(store_, encoder_, rng_);
}

PretrainExample Pretrainer::draw_example() {
  BasketPair pair = sampler_.sample(rng_);
  InputSequence seq = pack_basket_pair(pair.a, pair.b, encoder_.max_sequence_length, encoder_.positions_per_basket);
  PretrainExample example = apply_masking(seq, config_.masking, rng_, corpus_->vocabulary);
  example.is_next = pair.is_next;
  return example;
}

double scheduled_learning_rate(const PretrainConfig& config, std::size_t step) {
  double rate = config.learning_rate;
  if (config.warmup_steps > 0 && step < config.warmup_steps) {
    rate *= static_cast<double>(step + 1) / static_cast<double>(config.warmup_steps);
  }
  if (config.linear_decay && config.steps > 0) {
    const double left = 1.0 - static_cast<double>(step) / static_cast<double>(config.steps);
    rate *= std::max(left, 0.0);
  }
  return rate;
}

PretrainLosses Pretrainer::step() {
  adam_.learning_rate = scheduled_learning_rate(config_, steps_done_);
  std::vector<PretrainExample> batch;
  batch.reserve(config_.batch_size);
  for (std::size_t i = 0; i < config_.batch_size; ++i) batch.push_back(draw_example());
  PretrainLosses losses = pretrain_step(batch, store_, adam_, encoder_, config_, rng_);
  ++steps_done_;
  return losses;
}

void Pretrainer::save(const std::filesystem::path& path) const {
  Checkpoint checkpoint;
  checkpoint.meta = encoder_.to_meta();
  checkpoint.meta["stage"] = "pretrain";
  checkpoint.meta["pretrain.steps_done"] = std::to_string(steps_done_);
  checkpoint.meta["pretrain.rng"] = rng_.state();
  checkpoint.meta["seed"] = std::to_string(store_.seed());
  put_parameters(checkpoint, store_);
  put_adam(checkpoint, adam_);
  save_checkpoint(path, checkpoint);
}

void Pretrainer::resume(const std::filesystem::path& path) {
  Checkpoint checkpoint = load_checkpoint(path);
  const EncoderConfig saved = EncoderConfig::from_meta(checkpoint.meta);
  require(saved.to_meta() == encoder_.to_meta(), ErrorKind::kConfig,
          "pretrain resume: checkpoint encoder config differs from the run config");
  for (auto& [name, tensor] : model_tensors(checkpoint)) {
    require(store_.contains(name) && store_.value(name).shape() == tensor.shape(), ErrorKind::kCorruptCheckpoint,
            "pretrain resume: unexpected tensor '" + name + "'");
    store_.set(name, std::move(tensor));
  }
  const double lr = adam_.learning_rate;
  take_adam(checkpoint, adam_);
  adam_.learning_rate = lr;
  auto rng_it = checkpoint.meta.find("pretrain.rng");
  auto step_it = checkpoint.meta.find("pretrain.steps_done");
  require(rng_it != checkpoint.meta.end() && step_it != checkpoint.meta.end(), ErrorKind::kCorruptCheckpoint,
          "pretrain resume: checkpoint lacks rng state or step count");
  rng_.restore(rng_it->second);
  steps_done_ = std::stoull(step_it->second);
}

std::vector<TokenId> predict_masked_items(ParameterStore& store, const EncoderConfig& encoder,
                                          const PretrainExample& example) {
  Tape tape(&store);
  Var hidden = encode(tape, encoder, example.input);
  const std::size_t first = static_cast<std::size_t>(Vocabulary::kFirstItem);
  const std::size_t catalog = encoder.vocab_size - first;
  std::vector<std::int64_t> rows(example.mask_positions.begin(), example.mask_positions.end());
  Var picked = gather_rows(hidden, rows);
  Var items = slice_rows(tape.parameter("embeddings.token"), first, catalog);
  const Tensor logits = add(matmul_nt(picked, items), tape.parameter("mip.output_bias")).value();
  std::vector<TokenId> predictions;
  for (std::size_t r = 0; r < logits.rows(); ++r) {
    std::size_t best = 0;
    for (std::size_t c = 1; c < catalog; ++c) {
      if (logits.at(r, c) > logits.at(r, best)) best = c;
    }
    predictions.push_back(static_cast<TokenId>(first + best));
  }
  return predictions;
}

double next_basket_probability(ParameterStore& store, const EncoderConfig& encoder, const InputSequence& input) {
  Tape tape(&store);
  Var hidden = encode(tape, encoder, input);
  Var cls = slice_rows(hidden, 0, 1);
  const double z = add(sum(mul(cls, tape.parameter("nbp.weight"))), tape.parameter("nbp.bias")).value().item();
  return 1.0 / (1.0 + std::exp(-z));
}

std::vector<BasketPair> held_out_basket_pairs(const Corpus& corpus, Rng& rng) {
  require(corpus.has_split() && corpus.users.size() >= 2, ErrorKind::kSampling,
          "held-out pairs need a split corpus with at least two users");
  std::vector<BasketPair> pairs;
  const std::size_t n = corpus.users.size();
  for (std::size_t u = 0; u < n; ++u) {
    const UserSplit& s = corpus.split[u];
    const std::size_t last = s.train.size();
    pairs.push_back({s.validation, s.test, true, u, last, u, last + 1});
    std::size_t other = u;
    while (other == u) other = rng.index(n);
    pairs.push_back({s.validation, corpus.split[other].test, false, u, last, other,
                     corpus.split[other].train.size() + 1});
  }
  return pairs;
}

}  // namespace iert
