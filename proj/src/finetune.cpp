#include "iert/finetune.hpp"

#include <algorithm>
#include <cmath>
#include <iostream>
#include <numeric>

#include "iert/error.hpp"

namespace iert {

PackedInstance pack_instance(const RecommendationInstance& instance, const Vocabulary& vocabulary,
                             std::size_t max_length, bool positions_per_basket) {
  require(vocabulary.is_item(instance.candidate), ErrorKind::kContract,
          "pack_instance: candidate " + std::to_string(instance.candidate) + " is not a real item");
  std::size_t total = 0;
  for (const Basket& b : instance.history) total += b.items.size();
  const std::size_t budget = max_length >= 4 ? max_length - 4 : 0;
  const std::size_t keep = std::min(total, budget);
  require(keep > 0, ErrorKind::kContract,
          "pack_instance: history is empty after truncation to max_length " + std::to_string(max_length));
  std::size_t skip = total - keep;

  PackedInstance packed;
  InputSequence& seq = packed.input;
  auto push = [&](TokenId token, std::int64_t segment) {
    seq.token_ids.push_back(token);
    seq.segment_ids.push_back(segment);
    seq.attention_mask.push_back(1);
  };
  push(Vocabulary::kCls, 0);
  std::vector<std::size_t> runs;
  for (const Basket& b : instance.history) {
    std::size_t run = 0;
    for (TokenId item : b.items) {
      if (skip > 0) {
        --skip;
        continue;
      }
      push(item, 0);
      ++run;
    }
    if (run > 0) runs.push_back(run);
  }
  push(Vocabulary::kSep, 0);
  packed.candidate_position = seq.size();
  push(instance.candidate, 1);
  push(Vocabulary::kSep, 1);
  runs.push_back(1);
  packed.history_begin = 1;
  packed.history_length = keep;
  assign_positions(seq, positions_per_basket, runs);
  return packed;
}

void init_finetune_head(ParameterStore& store, const EncoderConfig& config, std::size_t n_users, Rng& rng) {
  require(n_users > 0, ErrorKind::kContract, "init_finetune_head: no users");
  Tensor w({config.hidden_size});
  for (double& v : w.values()) v = rng.truncated_normal(config.init_std);
  store.set("head.attention.weight", std::move(w));
  store.set("head.attention.bias", Tensor({1}, 0.0));
  Tensor users({n_users, config.hidden_size});
  for (double& v : users.values()) v = rng.truncated_normal(config.init_std);
  store.set("head.user", std::move(users));
}

PooledHistory attention_pool(Tape& tape, Var candidate, Var history) {
  require(history.rows() >= 1, ErrorKind::kContract, "attention_pool: no history rows");
  Var gated = mul(candidate, tape.parameter("head.attention.weight"));
  Var scores = add(matmul_nt(gated, history), tape.parameter("head.attention.bias"));
  Var alphas = softmax_rows(scores);
  return {matmul(alphas, history), alphas};
}

Var score_candidate(Tape& tape, const EncoderConfig& config, std::size_t user_index, const PackedInstance& packed,
                    const EncodeContext& context, PooledHistory* pooled_out) {
  Var users = tape.parameter("head.user");
  require(user_index < users.rows(), ErrorKind::kBounds,
          "score_candidate: user index " + std::to_string(user_index) + " outside user table of " +
              std::to_string(users.rows()) + " rows");
  Var hidden = encode(tape, config, packed.input, context);
  Var candidate = slice_rows(hidden, packed.candidate_position, 1);
  Var history = slice_rows(hidden, packed.history_begin, packed.history_length);
  PooledHistory pooled = attention_pool(tape, candidate, history);
  if (pooled_out) *pooled_out = pooled;
  const std::int64_t row[] = {static_cast<std::int64_t>(user_index)};
  Var user = gather_rows(users, row);
  return sum(mul(mul(candidate, user), pooled.pooled));
}

std::vector<double> candidate_scores(ParameterStore& store, const EncoderConfig& config, const Vocabulary& vocabulary,
                                     std::size_t user_index, const std::vector<Basket>& history,
                                     std::span<const TokenId> candidates) {
  std::vector<double> scores;
  scores.reserve(candidates.size());
  RecommendationInstance instance{user_index, history, Vocabulary::kPad, false};
  for (TokenId c : candidates) {
    instance.candidate = c;
    const PackedInstance packed =
        pack_instance(instance, vocabulary, config.max_sequence_length, config.positions_per_basket);
    Tape tape(&store);
    scores.push_back(score_candidate(tape, config, user_index, packed).value().item());
  }
  return scores;
}

std::vector<double> score_items(ParameterStore& store, const EncoderConfig& config, const Vocabulary& vocabulary,
                                std::size_t user_index, const std::vector<Basket>& history,
                                std::span<const TokenId> candidates) {
  require(!candidates.empty(), ErrorKind::kContract, "score_items: empty candidate set");
  const std::vector<double> scores = candidate_scores(store, config, vocabulary, user_index, history, candidates);
  const Tensor probs = softmax(Tensor({scores.size()}, scores), 0);
  return {probs.values().begin(), probs.values().end()};
}

NegativeSampling parse_negative_sampling(const std::string& text) {
  if (text == "uniform") return NegativeSampling::kUniform;
  if (text == "popularity") return NegativeSampling::kPopularity;
  fail(ErrorKind::kConfig, "negative_sampling must be 'uniform' or 'popularity', got '" + text + "'");
}

void FineTuneConfig::validate() const {
  require(positive_weight > 0.0 && negative_weight > 0.0, ErrorKind::kConfig, "finetune: m and n must be positive");
  require(batch_size > 0, ErrorKind::kConfig, "finetune: batch_size must be positive");
  require(targets_per_user > 0, ErrorKind::kConfig, "finetune: targets_per_user must be positive");
  require(aux_mip_weight >= 0.0, ErrorKind::kConfig, "finetune: aux_mip_weight must be non-negative");
  if (aux_mip_weight > 0.0) aux_masking.validate();
}

Var finetune_loss(Tape& tape, const EncoderConfig& encoder, const FineTuneConfig& config,
                  const Vocabulary& vocabulary, std::span<const RecommendationInstance> batch,
                  const EncodeContext& context, Rng* rng) {
  require(!batch.empty(), ErrorKind::kContract, "finetune_loss: empty batch");
  require(config.aux_mip_weight == 0.0 || rng != nullptr, ErrorKind::kContract,
          "finetune_loss: the auxiliary masked-item term needs an rng");
  std::vector<Var> terms;
  terms.reserve(batch.size() * 2);
  for (const RecommendationInstance& instance : batch) {
    const PackedInstance packed =
        pack_instance(instance, vocabulary, encoder.max_sequence_length, encoder.positions_per_basket);
    Var s = score_candidate(tape, encoder, instance.user_index, packed, context);
    terms.push_back(weighted_binary_cross_entropy(s, instance.label, config.positive_weight, config.negative_weight));
    if (config.aux_mip_weight > 0.0) {
      PretrainExample masked = apply_masking(packed.input, config.aux_masking, *rng, vocabulary);
      Var hidden = encode(tape, encoder, masked.input, context);
      terms.push_back(scale(masked_item_loss(tape, encoder, hidden, masked), config.aux_mip_weight));
    }
  }
  return sum(concat_rows(terms));
}

RankedList recommend_top_k(ParameterStore& store, const EncoderConfig& config, const Vocabulary& vocabulary,
                           std::size_t user_index, const std::vector<Basket>& history, std::size_t k,
                           bool exclude_seen) {
  std::vector<TokenId> all;
  for (std::size_t i = 0; i < vocabulary.catalog_size(); ++i) all.push_back(Vocabulary::kFirstItem + static_cast<TokenId>(i));
  const std::vector<double> scores = candidate_scores(store, config, vocabulary, user_index, history, all);
  const Tensor probs = softmax(Tensor({scores.size()}, scores), 0);

  std::vector<std::size_t> order;
  for (std::size_t i = 0; i < all.size(); ++i) {
    if (exclude_seen) {
      const bool seen = std::any_of(history.begin(), history.end(), [&](const Basket& b) { return b.contains(all[i]); });
      if (seen) continue;
    }
    order.push_back(i);
  }
  if (k > order.size()) {
    std::cerr << "warning: K=" << k << " exceeds the " << order.size() << " rankable items; clamping\n";
    k = order.size();
  }
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  RankedList list;
  list.user_index = user_index;
  for (std::size_t r = 0; r < k; ++r) {
    list.items.push_back(all[order[r]]);
    list.scores.push_back(probs[order[r]]);
  }
  return list;
}

std::vector<Basket> test_history(const Corpus& corpus, std::size_t user_index) {
  require(corpus.has_split() && user_index < corpus.split.size(), ErrorKind::kBounds,
          "test_history: unknown user " + std::to_string(user_index));
  std::vector<Basket> history = corpus.split[user_index].train;
  history.push_back(corpus.split[user_index].validation);
  return history;
}

FineTuner::FineTuner(const Corpus& corpus, EncoderConfig encoder, FineTuneConfig config, std::uint64_t seed)
    : corpus_(&corpus), encoder_(std::move(encoder)), config_(std::move(config)), store_(seed), rng_(seed) {
  encoder_.vocab_size = corpus.vocabulary.size();
  encoder_.validate();
  init_encoder_parameters(store_, encoder_, rng_);
  init_common(seed);
}

FineTuner::FineTuner(const Corpus& corpus, const Checkpoint& pretrained, FineTuneConfig config, std::uint64_t seed)
    : corpus_(&corpus),
      encoder_(EncoderConfig::from_meta(pretrained.meta)),
      config_(std::move(config)),
      store_(seed),
      rng_(seed) {
  require(encoder_.vocab_size == corpus.vocabulary.size(), ErrorKind::kConfig,
          "finetune: checkpoint vocabulary size " + std::to_string(encoder_.vocab_size) +
              " does not match corpus vocabulary size " + std::to_string(corpus.vocabulary.size()));
  const auto tensors = model_tensors(pretrained);
  for (const std::string& name : encoder_parameter_names(encoder_)) {
    auto it = tensors.find(name);
    require(it != tensors.end(), ErrorKind::kCorruptCheckpoint, "finetune: checkpoint lacks '" + name + "'");
    store_.add(name, it->second);
  }
  if (auto it = tensors.find("mip.output_bias"); it != tensors.end()) store_.add("mip.output_bias", it->second);
  init_common(seed);
}

void FineTuner::init_common(std::uint64_t) {
  config_.validate();
  require(corpus_->has_split(), ErrorKind::kContract, "finetune: corpus is not split");
  adam_.learning_rate = config_.learning_rate;
  init_finetune_head(store_, encoder_, corpus_->users.size(), rng_);
  if (config_.aux_mip_weight > 0.0 && !store_.contains("mip.output_bias")) {
    store_.add("mip.output_bias", Tensor({corpus_->vocabulary.catalog_size()}, 0.0));
  }
  if (config_.sampling == NegativeSampling::kPopularity) {
    std::vector<double> counts(corpus_->vocabulary.catalog_size(), 1.0);
    for (const UserSplit& s : corpus_->split)
      for (const Basket& b : s.train)
        for (TokenId item : b.items) counts[static_cast<std::size_t>(item - Vocabulary::kFirstItem)] += 1.0;
    popularity_cdf_.resize(counts.size());
    std::partial_sum(counts.begin(), counts.end(), popularity_cdf_.begin());
  }
}

TokenId FineTuner::sample_negative(const Basket& positives) {
  const std::size_t catalog = corpus_->vocabulary.catalog_size();
  while (true) {
    std::size_t k;
    if (config_.sampling == NegativeSampling::kPopularity) {
      const double r = rng_.uniform() * popularity_cdf_.back();
      k = static_cast<std::size_t>(std::upper_bound(popularity_cdf_.begin(), popularity_cdf_.end(), r) -
                                   popularity_cdf_.begin());
      k = std::min(k, catalog - 1);
    } else {
      k = rng_.index(catalog);
    }
    const TokenId item = Vocabulary::kFirstItem + static_cast<TokenId>(k);
    if (!positives.contains(item)) return item;
  }
}

std::vector<RecommendationInstance> FineTuner::epoch_instances() {
  std::vector<RecommendationInstance> instances;
  const std::size_t catalog = corpus_->vocabulary.catalog_size();
  for (std::size_t u = 0; u < corpus_->users.size(); ++u) {
    const auto& train = corpus_->split[u].train;
    if (train.size() < 2) continue;
    std::vector<std::size_t> targets(train.size() - 1);
    std::iota(targets.begin(), targets.end(), std::size_t{1});
    rng_.shuffle(targets);
    targets.resize(std::min(targets.size(), config_.targets_per_user));
    for (std::size_t t : targets) {
      std::vector<Basket> history(train.begin(), train.begin() + static_cast<std::ptrdiff_t>(t));
      const Basket& next = train[t];
      for (TokenId item : next.items) instances.push_back({u, history, item, true});
      const std::size_t available = catalog - next.items.size();
      const std::size_t wanted = std::min(available, config_.neg_per_pos * next.items.size());
      Basket drawn;
      while (drawn.items.size() < wanted) {
        const TokenId item = sample_negative(next);
        if (drawn.contains(item)) continue;
        drawn.items.push_back(item);
        instances.push_back({u, history, item, false});
      }
    }
  }
  rng_.shuffle(instances);
  return instances;
}

double FineTuner::train_batch(std::span<const RecommendationInstance> batch) {
  EncodeContext context;
  context.training = true;
  context.rng = &rng_;
  Tape tape(&store_);
  if (config_.linear_decay && planned_steps_ > 0) {
    const double left = 1.0 - static_cast<double>(steps_done_) / static_cast<double>(planned_steps_);
    adam_.learning_rate = config_.learning_rate * std::max(left, 0.0);
  }
  Var loss = finetune_loss(tape, encoder_, config_, corpus_->vocabulary, batch, context, &rng_);
  const double value = loss.value().item();
  if (!std::isfinite(value)) {
    fail(ErrorKind::kNonFinite, "finetune: non-finite loss at step " + std::to_string(steps_done_));
  }
  tape.backward(loss);
  adam_step(store_, adam_);
  ++steps_done_;
  return value;
}

std::vector<double> FineTuner::train_epoch() {
  const std::vector<RecommendationInstance> instances = epoch_instances();
  if (planned_steps_ == 0) {
    planned_steps_ = config_.epochs * ((instances.size() + config_.batch_size - 1) / config_.batch_size);
  }
  std::vector<double> losses;
  for (std::size_t start = 0; start < instances.size(); start += config_.batch_size) {
    const std::size_t n = std::min(config_.batch_size, instances.size() - start);
    losses.push_back(train_batch(std::span(instances).subspan(start, n)));
  }
  return losses;
}

std::vector<RankedList> FineTuner::recommend_all(std::size_t k, bool exclude_seen) {
  std::vector<RankedList> lists;
  for (std::size_t u = 0; u < corpus_->users.size(); ++u) {
    lists.push_back(recommend_top_k(store_, encoder_, corpus_->vocabulary, u, test_history(*corpus_, u), k, exclude_seen));
  }
  return lists;
}

void FineTuner::save(const std::filesystem::path& path) const {
  Checkpoint checkpoint;
  checkpoint.meta = encoder_.to_meta();
  checkpoint.meta["stage"] = "finetune";
  checkpoint.meta["finetune.steps_done"] = std::to_string(steps_done_);
  checkpoint.meta["seed"] = std::to_string(store_.seed());
  put_parameters(checkpoint, store_);
  save_checkpoint(path, checkpoint);
}

FineTunedModel load_finetuned(const std::filesystem::path& path) {
  Checkpoint checkpoint = load_checkpoint(path);
  auto stage = checkpoint.meta.find("stage");
  require(stage != checkpoint.meta.end() && stage->second == "finetune", ErrorKind::kConfig,
          "checkpoint " + path.string() + " is not a fine-tuned model");
  FineTunedModel model{EncoderConfig::from_meta(checkpoint.meta), ParameterStore()};
  for (auto& [name, tensor] : model_tensors(checkpoint)) model.store.add(name, std::move(tensor));
  for (const std::string& name : encoder_parameter_names(model.encoder)) {
    require(model.store.contains(name), ErrorKind::kCorruptCheckpoint, "checkpoint lacks '" + name + "'");
  }
  for (const char* name : {"head.attention.weight", "head.attention.bias", "head.user"}) {
    require(model.store.contains(name), ErrorKind::kCorruptCheckpoint, std::string("checkpoint lacks '") + name + "'");
  }
  return model;
}

}  // namespace iert
