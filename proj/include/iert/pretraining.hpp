#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "iert/corpus.hpp"
#include "iert/encoder.hpp"
#include "iert/parameters.hpp"
#include "iert/rng.hpp"
#include "iert/tape.hpp"

namespace iert {

enum class NegativeMode {
  /// Non-adjacent basket of the same user; another user's basket when the
  /// user has none.
  kSameUserFirst,
  /// Always another user's basket.
  kCrossUser,
};

NegativeMode parse_negative_mode(const std::string& text);
std::string to_string(NegativeMode mode);

/// A drawn pair with provenance: basket `a` is train basket `a_index` of
/// `a_user`, likewise for `b`.
struct BasketPair {
  Basket a;
  Basket b;
  bool is_next = false;
  std::size_t a_user = 0;
  std::size_t a_index = 0;
  std::size_t b_user = 0;
  std::size_t b_index = 0;
};

/// Draws (A, B, is_next) from the train split. A is uniform over every
/// (user, position) that has a following train basket; with probability 0.5
/// B is that following basket, otherwise a negative per `mode`.
class PairSampler {
 public:
  PairSampler(const Corpus& corpus, NegativeMode mode);

  BasketPair sample(Rng& rng) const;
  std::size_t eligible_anchors() const { return anchors_.size(); }

 private:
  BasketPair cross_user(std::size_t user, std::size_t index, Rng& rng) const;

  const Corpus* corpus_;
  NegativeMode mode_;
  std::vector<std::pair<std::size_t, std::size_t>> anchors_;
  std::vector<std::size_t> users_with_train_;
};

BasketPair sample_basket_pair(const Corpus& corpus, Rng& rng,
                              NegativeMode mode = NegativeMode::kSameUserFirst);

/// [CLS] A [SEP] B [SEP], segment 0 through the first SEP and 1 after.
/// Over-long pairs lose items from the tail of the longer basket (B on a
/// tie) until they fit.
InputSequence pack_basket_pair(const Basket& a, const Basket& b, std::size_t max_length,
                               bool positions_per_basket = false);

struct MaskingConfig {
  double mask_rate = 0.15;
  double replace_with_mask = 0.8;
  double replace_with_random = 0.1;
  double keep_original = 0.1;

  void validate() const;
};

struct PretrainExample {
  InputSequence input;
  std::vector<std::size_t> mask_positions;
  std::vector<TokenId> mask_targets;
  bool is_next = false;
};

/// Selects each real-item position with probability mask_rate (redrawing
/// until at least one is chosen) and corrupts the selection per the
/// replacement probabilities. Targets keep the original ids.
PretrainExample apply_masking(const InputSequence& input, const MaskingConfig& config, Rng& rng,
                              const Vocabulary& vocabulary);

struct PretrainLosses {
  double l1 = 0.0;
  double l2 = 0.0;
  double l3 = 0.0;
};

struct PretrainConfig {
  MaskingConfig masking;
  NegativeMode negative_mode = NegativeMode::kSameUserFirst;
  /// Masked-item prediction sees only the masked item's own basket.
  bool mip_same_basket_only = false;
  std::size_t batch_size = 32;
  std::size_t steps = 40000;
  double learning_rate = 2e-5;
  /// Linear ramp from 0 over the first warmup_steps steps.
  std::size_t warmup_steps = 0;
  /// Linear decay to 0 at `steps`.
  bool linear_decay = false;
};

/// Learning rate for 0-based `step` under the warmup/decay settings.
double scheduled_learning_rate(const PretrainConfig& config, std::size_t step);

/// mip.output_bias (catalog), nbp.weight (hidden), nbp.bias (1).
void init_pretraining_heads(ParameterStore& store, const EncoderConfig& config, Rng& rng);

/// Mean over masked positions of -log softmax(h W_tok[items]^T + b)[target];
/// the token-embedding table doubles as the output projection.
Var masked_item_loss(Tape& tape, const EncoderConfig& config, Var hidden, const PretrainExample& example);

/// Binary cross-entropy of is_next against w . h[CLS] + b.
Var next_basket_loss(Tape& tape, Var hidden, bool is_next);

struct ExampleLoss {
  Var l1;
  Var l2;
};

/// Encodes an example and attaches both heads. With mip_same_basket_only the
/// masked-item loss uses a second pass restricted to same-segment attention.
ExampleLoss pretrain_example_loss(Tape& tape, const EncoderConfig& encoder, const PretrainConfig& config,
                                  const PretrainExample& example, const EncodeContext& context);

/// Averages l1 and l2 over the batch, back-propagates l1 + l2, and applies
/// one Adam step. Returns the losses measured before the update.
PretrainLosses pretrain_step(std::span<const PretrainExample> batch, ParameterStore& store, AdamState& adam,
                             const EncoderConfig& encoder, const PretrainConfig& config, Rng& rng);

/// Stateful pre-training run over a split corpus.
class Pretrainer {
 public:
  Pretrainer(const Corpus& corpus, EncoderConfig encoder, PretrainConfig config, std::uint64_t seed);

  PretrainExample draw_example();
  PretrainLosses step();
  std::size_t steps_done() const { return steps_done_; }

  ParameterStore& store() { return store_; }
  const EncoderConfig& encoder() const { return encoder_; }
  AdamState& adam() { return adam_; }

  /// Parameters, optimizer moments, rng position and step count.
  void save(const std::filesystem::path& path) const;
  void resume(const std::filesystem::path& path);

 private:
  const Corpus* corpus_;
  EncoderConfig encoder_;
  PretrainConfig config_;
  PairSampler sampler_;
  ParameterStore store_;
  AdamState adam_;
  Rng rng_;
  std::size_t steps_done_ = 0;
};

/// Argmax over real items at each masked position.
std::vector<TokenId> predict_masked_items(ParameterStore& store, const EncoderConfig& encoder,
                                          const PretrainExample& example);

/// sigmoid(w . h[CLS] + b) for a packed pair.
double next_basket_probability(ParameterStore& store, const EncoderConfig& encoder,
                               const InputSequence& input);

/// Pairs never seen in pre-training: per user (validation, test) labelled
/// next, and (validation, another user's test) labelled not-next.
std::vector<BasketPair> held_out_basket_pairs(const Corpus& corpus, Rng& rng);

}  // namespace iert
