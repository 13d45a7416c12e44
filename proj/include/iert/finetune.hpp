#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "iert/checkpoint.hpp"
#include "iert/corpus.hpp"
#include "iert/encoder.hpp"
#include "iert/evaluation.hpp"
#include "iert/parameters.hpp"
#include "iert/pretraining.hpp"
#include "iert/rng.hpp"
#include "iert/tape.hpp"

namespace iert {

/// One (user, history, candidate) triple with its purchase label.
struct RecommendationInstance {
  std::size_t user_index = 0;
  std::vector<Basket> history;
  TokenId candidate = Vocabulary::kPad;
  bool label = false;
};

/// A packed instance plus where its parts landed.
struct PackedInstance {
  InputSequence input;
  std::size_t history_begin = 1;
  std::size_t history_length = 0;
  std::size_t candidate_position = 0;
};

/// [CLS] history... [SEP] candidate [SEP]; segment 0 up to and including
/// the first SEP, segment 1 after. History items beyond the length budget
/// are dropped oldest first.
PackedInstance pack_instance(const RecommendationInstance& instance, const Vocabulary& vocabulary,
                             std::size_t max_length, bool positions_per_basket = false);

/// head.attention.weight (hidden), head.attention.bias (1), head.user
/// (users x hidden, row u is the user vector).
void init_finetune_head(ParameterStore& store, const EncoderConfig& config, std::size_t n_users, Rng& rng);

struct PooledHistory {
  Var pooled;  // 1 x hidden
  Var alphas;  // 1 x history
};

/// alpha = softmax_j(w . (h_candidate * h_j) + b), pooled = sum_j alpha_j h_j.
PooledHistory attention_pool(Tape& tape, Var candidate, Var history);

/// s = h_candidate . (v_user * pooled history), for an already packed input.
Var score_candidate(Tape& tape, const EncoderConfig& config, std::size_t user_index,
                    const PackedInstance& packed, const EncodeContext& context = {},
                    PooledHistory* pooled_out = nullptr);

/// Raw scores s_i, one encode per candidate.
std::vector<double> candidate_scores(ParameterStore& store, const EncoderConfig& config,
                                     const Vocabulary& vocabulary, std::size_t user_index,
                                     const std::vector<Basket>& history, std::span<const TokenId> candidates);

/// Softmax of the raw scores over `candidates`; over the whole catalog this
/// is the purchase probability of every item.
std::vector<double> score_items(ParameterStore& store, const EncoderConfig& config, const Vocabulary& vocabulary,
                                std::size_t user_index, const std::vector<Basket>& history,
                                std::span<const TokenId> candidates);

enum class NegativeSampling { kUniform, kPopularity };

NegativeSampling parse_negative_sampling(const std::string& text);

struct FineTuneConfig {
  std::size_t neg_per_pos = 4;
  /// Loss weight m on positive instances.
  double positive_weight = 4.0;
  /// Loss weight n on negative instances.
  double negative_weight = 1.0;
  std::size_t epochs = 1;
  std::size_t batch_size = 32;
  double learning_rate = 2e-5;
  /// Linear decay to 0 over epochs x batches-per-epoch steps.
  bool linear_decay = false;
  double aux_mip_weight = 0.0;
  NegativeSampling sampling = NegativeSampling::kUniform;
  std::size_t targets_per_user = 1;
  MaskingConfig aux_masking;

  void validate() const;
};

/// Sum over instances of the weighted binary cross-entropy of sigmoid(s).
/// With aux_mip_weight > 0 each instance also adds that weight times the
/// masked-item loss of a masked copy of its packed input (drawn from `rng`).
Var finetune_loss(Tape& tape, const EncoderConfig& encoder, const FineTuneConfig& config,
                  const Vocabulary& vocabulary, std::span<const RecommendationInstance> batch,
                  const EncodeContext& context = {}, Rng* rng = nullptr);

/// Top K items of the whole catalog by score (ties to the lower index),
/// reported with their full-catalog probabilities. K above the catalog size
/// is clamped.
RankedList recommend_top_k(ParameterStore& store, const EncoderConfig& config, const Vocabulary& vocabulary,
                           std::size_t user_index, const std::vector<Basket>& history, std::size_t k,
                           bool exclude_seen = false);

/// History used to predict the test basket: train baskets then validation.
std::vector<Basket> test_history(const Corpus& corpus, std::size_t user_index);

/// Stateful fine-tuning run.
class FineTuner {
 public:
  /// Random initialisation of encoder and head.
  FineTuner(const Corpus& corpus, EncoderConfig encoder, FineTuneConfig config, std::uint64_t seed);
  /// Encoder (and token table) from a pre-training checkpoint; head fresh.
  FineTuner(const Corpus& corpus, const Checkpoint& pretrained, FineTuneConfig config, std::uint64_t seed);

  /// Instances of one epoch in training order.
  std::vector<RecommendationInstance> epoch_instances();
  /// Runs one epoch; returns the per-batch losses.
  std::vector<double> train_epoch();
  /// Loss of one batch, then an Adam step.
  double train_batch(std::span<const RecommendationInstance> batch);

  std::vector<RankedList> recommend_all(std::size_t k, bool exclude_seen = false);

  ParameterStore& store() { return store_; }
  const EncoderConfig& encoder() const { return encoder_; }
  std::size_t steps_done() const { return steps_done_; }

  void save(const std::filesystem::path& path) const;

 private:
  void init_common(std::uint64_t seed);
  TokenId sample_negative(const Basket& positives);

  const Corpus* corpus_;
  EncoderConfig encoder_;
  FineTuneConfig config_;
  ParameterStore store_;
  AdamState adam_;
  Rng rng_;
  std::vector<double> popularity_cdf_;
  std::size_t steps_done_ = 0;
  std::size_t planned_steps_ = 0;
};

/// Loads a fine-tuned checkpoint written by FineTuner::save.
struct FineTunedModel {
  EncoderConfig encoder;
  ParameterStore store;
};

FineTunedModel load_finetuned(const std::filesystem::path& path);

}  // namespace iert
