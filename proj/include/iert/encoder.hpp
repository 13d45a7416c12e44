#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "iert/corpus.hpp"
#include "iert/parameters.hpp"
#include "iert/rng.hpp"
#include "iert/tape.hpp"

namespace iert {

struct EncoderConfig {
  std::size_t hidden_size = 64;
  std::size_t num_layers = 2;
  std::size_t num_heads = 2;
  std::size_t feed_forward_size = 256;
  std::size_t max_sequence_length = 128;
  std::size_t vocab_size = 0;
  std::size_t num_segments = 2;
  double dropout_rate = 0.1;
  double init_std = 0.02;
  /// Items of one basket share a position id instead of counting up.
  bool positions_per_basket = false;

  void validate() const;
  /// key=value form stored in checkpoint manifests ("encoder.<field>").
  std::map<std::string, std::string> to_meta() const;
  static EncoderConfig from_meta(const std::map<std::string, std::string>& meta);
};

/// One packed input. `attention_mask` is 0 on padding.
struct InputSequence {
  std::vector<TokenId> token_ids;
  std::vector<std::int64_t> segment_ids;
  std::vector<std::int64_t> position_ids;
  std::vector<std::uint8_t> attention_mask;

  std::size_t size() const { return token_ids.size(); }
  /// Checks the structural invariants: equal lengths, CLS first, padding
  /// carries segment 0, positions increasing over real positions (strictly,
  /// unless `shared_positions` allows basket-level sharing), length within
  /// the configured maximum.
  void validate(const EncoderConfig& config) const;
  /// Appends PAD positions up to `length`.
  void pad_to(std::size_t length);
};

/// Assigns position ids to `seq` from its token layout. With
/// `per_basket`, every item of a basket shares one id and each special token
/// gets its own; `basket_sizes` lists the item runs in order between
/// specials.
void assign_positions(InputSequence& seq, bool per_basket,
                      std::span<const std::size_t> basket_sizes = {});

/// Registers the embedding tables and every transformer block's tensors.
/// Weights ~ truncated normal(init_std), biases 0, layer-norm gains 1.
void init_encoder_parameters(ParameterStore& store, const EncoderConfig& config, Rng& rng);

/// Names of every tensor created by init_encoder_parameters.
std::vector<std::string> encoder_parameter_names(const EncoderConfig& config);

/// Attention probabilities captured during an encode, indexed
/// [layer * num_heads + head], each (len x len).
struct EncoderTrace {
  std::vector<Tensor> attention;
};

struct EncodeContext {
  bool training = false;
  Rng* rng = nullptr;
  /// Optional (len x len) row-major override of which keys each query may
  /// attend to. Combined with the padding mask.
  const std::vector<std::uint8_t>* allowed = nullptr;
  EncoderTrace* trace = nullptr;
};

/// (len x len) flags: query q may attend key k iff k is not padding, and
/// the override (if any) allows it.
std::vector<std::uint8_t> attention_allowed(const InputSequence& seq,
                                            const std::vector<std::uint8_t>* override_mask = nullptr);

/// e_n = LayerNorm(token[t_n] + segment[s_n] + position[p_n]).
Var build_input_representation(Tape& tape, const EncoderConfig& config, const InputSequence& seq,
                               const EncodeContext& context = {});

/// Post-norm block: self-attention + residual + LayerNorm, then GELU
/// feed-forward + residual + LayerNorm.
Var transformer_block(Tape& tape, const EncoderConfig& config, Var hidden,
                      std::span<const std::uint8_t> allowed, std::size_t layer,
                      const EncodeContext& context = {});

/// Input representation followed by every block; row n is h_n.
Var encode(Tape& tape, const EncoderConfig& config, const InputSequence& seq,
           const EncodeContext& context = {});

/// Inference-only convenience: hidden states as a plain tensor.
Tensor encode_values(ParameterStore& store, const EncoderConfig& config, const InputSequence& seq,
                     EncoderTrace* trace = nullptr);

}  // namespace iert
