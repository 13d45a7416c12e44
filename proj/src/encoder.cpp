#include "iert/encoder.hpp"

#include <cmath>

#include "iert/error.hpp"

namespace iert {

namespace {

std::string layer_name(std::size_t layer, const std::string& leaf) {
  return "layer" + std::to_string(layer) + "." + leaf;
}

Tensor truncated_normal(Shape shape, double stddev, Rng& rng) {
  Tensor t(std::move(shape));
  for (double& v : t.values()) v = rng.truncated_normal(stddev);
  return t;
}

std::size_t get_size(const std::map<std::string, std::string>& meta, const std::string& key,
                     std::size_t fallback) {
  auto it = meta.find(key);
  return it == meta.end() ? fallback : std::stoull(it->second);
}

double get_double(const std::map<std::string, std::string>& meta, const std::string& key, double fallback) {
  auto it = meta.find(key);
  return it == meta.end() ? fallback : std::stod(it->second);
}

std::string format_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

Var linear(Tape& tape, Var x, const std::string& prefix) {
  return add(matmul(x, tape.parameter(prefix + ".weight")), tape.parameter(prefix + ".bias"));
}

Var norm(Tape& tape, Var x, const std::string& prefix) {
  return layer_norm(x, tape.parameter(prefix + ".gain"), tape.parameter(prefix + ".bias"), 1e-12);
}

Var maybe_dropout(Var x, const EncoderConfig& config, const EncodeContext& context) {
  if (!context.training || config.dropout_rate <= 0.0) return x;
  require(context.rng != nullptr, ErrorKind::kContract, "encode: training mode needs an rng for dropout");
  return dropout(x, config.dropout_rate, *context.rng);
}

}  // namespace

void EncoderConfig::validate() const {
  require(hidden_size > 0 && num_heads > 0 && feed_forward_size > 0 && vocab_size > 0 &&
              num_segments > 0,
          ErrorKind::kConfig, "encoder: all sizes must be positive");
  require(hidden_size % num_heads == 0, ErrorKind::kConfig,
          "encoder: hidden_size " + std::to_string(hidden_size) + " not divisible by num_heads " +
              std::to_string(num_heads));
  require(max_sequence_length >= 3, ErrorKind::kConfig, "encoder: max_sequence_length must be >= 3");
  require(dropout_rate >= 0.0 && dropout_rate < 1.0, ErrorKind::kConfig, "encoder: dropout_rate must lie in [0, 1)");
  require(init_std > 0.0, ErrorKind::kConfig, "encoder: init_std must be positive");
}

std::map<std::string, std::string> EncoderConfig::to_meta() const {
  return {
      {"encoder.hidden_size", std::to_string(hidden_size)},
      {"encoder.num_layers", std::to_string(num_layers)},
      {"encoder.num_heads", std::to_string(num_heads)},
      {"encoder.feed_forward_size", std::to_string(feed_forward_size)},
      {"encoder.max_sequence_length", std::to_string(max_sequence_length)},
      {"encoder.vocab_size", std::to_string(vocab_size)},
      {"encoder.num_segments", std::to_string(num_segments)},
      {"encoder.dropout_rate", format_double(dropout_rate)},
      {"encoder.init_std", format_double(init_std)},
      {"encoder.positions_per_basket", positions_per_basket ? "1" : "0"},
  };
}

EncoderConfig EncoderConfig::from_meta(const std::map<std::string, std::string>& meta) {
  EncoderConfig c;
  try {
    c.hidden_size = get_size(meta, "encoder.hidden_size", c.hidden_size);
    c.num_layers = get_size(meta, "encoder.num_layers", c.num_layers);
    c.num_heads = get_size(meta, "encoder.num_heads", c.num_heads);
    c.feed_forward_size = get_size(meta, "encoder.feed_forward_size", c.feed_forward_size);
    c.max_sequence_length = get_size(meta, "encoder.max_sequence_length", c.max_sequence_length);
    c.vocab_size = get_size(meta, "encoder.vocab_size", c.vocab_size);
    c.num_segments = get_size(meta, "encoder.num_segments", c.num_segments);
    c.dropout_rate = get_double(meta, "encoder.dropout_rate", c.dropout_rate);
    c.init_std = get_double(meta, "encoder.init_std", c.init_std);
    c.positions_per_basket = get_size(meta, "encoder.positions_per_basket", 0) != 0;
  } catch (const std::logic_error&) {
    fail(ErrorKind::kCorruptCheckpoint, "encoder config in checkpoint is not numeric");
  }
  c.validate();
  return c;
}

void InputSequence::validate(const EncoderConfig& config) const {
  const std::size_t n = token_ids.size();
  require(segment_ids.size() == n && position_ids.size() == n && attention_mask.size() == n,
          ErrorKind::kContract, "input sequence: id lists differ in length");
  require(n >= 1 && token_ids[0] == Vocabulary::kCls, ErrorKind::kContract,
          "input sequence: must start with CLS");
  require(n <= config.max_sequence_length, ErrorKind::kContract,
          "input sequence: length " + std::to_string(n) + " exceeds max_sequence_length " +
              std::to_string(config.max_sequence_length));
  bool have_previous = false;
  std::int64_t previous = 0;
  for (std::size_t i = 0; i < n; ++i) {
    if (!attention_mask[i]) {
      require(token_ids[i] == Vocabulary::kPad && segment_ids[i] == 0, ErrorKind::kContract,
              "input sequence: padding position " + std::to_string(i) + " must be PAD with segment 0");
      continue;
    }
    if (have_previous) {
      const bool ok = config.positions_per_basket ? position_ids[i] >= previous : position_ids[i] > previous;
      require(ok, ErrorKind::kContract, "input sequence: position ids not increasing at " + std::to_string(i));
    }
    previous = position_ids[i];
    have_previous = true;
  }
}

void InputSequence::pad_to(std::size_t length) {
  while (token_ids.size() < length) {
    token_ids.push_back(Vocabulary::kPad);
    segment_ids.push_back(0);
    position_ids.push_back(0);
    attention_mask.push_back(0);
  }
}

void assign_positions(InputSequence& seq, bool per_basket, std::span<const std::size_t> basket_sizes) {
  seq.position_ids.assign(seq.token_ids.size(), 0);
  std::int64_t next = 0;
  std::size_t run_left = 0;
  std::size_t run_index = 0;
  for (std::size_t i = 0; i < seq.token_ids.size(); ++i) {
    const TokenId token = seq.token_ids[i];
    if (token == Vocabulary::kPad && (i >= seq.attention_mask.size() || !seq.attention_mask[i])) continue;
    if (!per_basket) {
      seq.position_ids[i] = next++;
      continue;
    }
    const bool special = token == Vocabulary::kCls || token == Vocabulary::kSep;
    if (special) {
      run_left = 0;
      seq.position_ids[i] = next++;
      continue;
    }
    if (run_left == 0) {
      ++next;
      if (run_index < basket_sizes.size()) {
        run_left = basket_sizes[run_index++];
      } else {
        run_left = SIZE_MAX;  // one run until the next special
      }
    }
    seq.position_ids[i] = next - 1;
    if (run_left != SIZE_MAX) --run_left;
  }
}

std::vector<std::string> encoder_parameter_names(const EncoderConfig& config) {
  std::vector<std::string> names = {"embeddings.token", "embeddings.segment", "embeddings.position",
                                    "embeddings.norm.gain", "embeddings.norm.bias"};
  for (std::size_t l = 0; l < config.num_layers; ++l) {
    for (const char* leaf :
         {"attention.query.weight", "attention.query.bias", "attention.key.weight", "attention.key.bias",
          "attention.value.weight", "attention.value.bias", "attention.output.weight",
          "attention.output.bias", "attention.norm.gain", "attention.norm.bias", "ffn.in.weight",
          "ffn.in.bias", "ffn.out.weight", "ffn.out.bias", "ffn.norm.gain", "ffn.norm.bias"}) {
      names.push_back(layer_name(l, leaf));
    }
  }
  return names;
}

void init_encoder_parameters(ParameterStore& store, const EncoderConfig& config, Rng& rng) {
  config.validate();
  const std::size_t d = config.hidden_size;
  const std::size_t ff = config.feed_forward_size;
  const double sd = config.init_std;
  store.add("embeddings.token", truncated_normal({config.vocab_size, d}, sd, rng));
  store.add("embeddings.segment", truncated_normal({config.num_segments, d}, sd, rng));
  store.add("embeddings.position", truncated_normal({config.max_sequence_length, d}, sd, rng));
  store.add("embeddings.norm.gain", Tensor({d}, 1.0));
  store.add("embeddings.norm.bias", Tensor({d}, 0.0));
  for (std::size_t l = 0; l < config.num_layers; ++l) {
    for (const char* proj : {"query", "key", "value", "output"}) {
      const std::string prefix = layer_name(l, std::string("attention.") + proj);
      store.add(prefix + ".weight", truncated_normal({d, d}, sd, rng));
      store.add(prefix + ".bias", Tensor({d}, 0.0));
    }
    store.add(layer_name(l, "attention.norm.gain"), Tensor({d}, 1.0));
    store.add(layer_name(l, "attention.norm.bias"), Tensor({d}, 0.0));
    store.add(layer_name(l, "ffn.in.weight"), truncated_normal({d, ff}, sd, rng));
    store.add(layer_name(l, "ffn.in.bias"), Tensor({ff}, 0.0));
    store.add(layer_name(l, "ffn.out.weight"), truncated_normal({ff, d}, sd, rng));
    store.add(layer_name(l, "ffn.out.bias"), Tensor({d}, 0.0));
    store.add(layer_name(l, "ffn.norm.gain"), Tensor({d}, 1.0));
    store.add(layer_name(l, "ffn.norm.bias"), Tensor({d}, 0.0));
  }
}

std::vector<std::uint8_t> attention_allowed(const InputSequence& seq,
                                            const std::vector<std::uint8_t>* override_mask) {
  const std::size_t n = seq.size();
  require(override_mask == nullptr || override_mask->size() == n * n, ErrorKind::kShape,
          "attention override must be len x len");
  std::vector<std::uint8_t> allowed(n * n);
  for (std::size_t q = 0; q < n; ++q) {
    for (std::size_t k = 0; k < n; ++k) {
      bool ok = seq.attention_mask[k] != 0;
      if (override_mask && seq.attention_mask[q]) ok = ok && (*override_mask)[q * n + k];
      allowed[q * n + k] = ok ? 1 : 0;
    }
    // A padding query still needs one key to keep its softmax defined.
    if (!seq.attention_mask[q]) allowed[q * n + q] = 1;
  }
  return allowed;
}

Var build_input_representation(Tape& tape, const EncoderConfig& config, const InputSequence& seq,
                               const EncodeContext& context) {
  auto check = [](std::span<const std::int64_t> ids, std::size_t limit, const char* table) {
    for (std::int64_t id : ids) {
      require(id >= 0 && static_cast<std::size_t>(id) < limit, ErrorKind::kBounds,
              std::string("embedding table '") + table + "': index " + std::to_string(id) +
                  " out of range [0, " + std::to_string(limit) + ")");
    }
  };
  check(seq.token_ids, config.vocab_size, "embeddings.token");
  check(seq.segment_ids, config.num_segments, "embeddings.segment");
  check(seq.position_ids, config.max_sequence_length, "embeddings.position");
  Var tokens = gather_rows(tape.parameter("embeddings.token"), seq.token_ids);
  Var segments = gather_rows(tape.parameter("embeddings.segment"), seq.segment_ids);
  Var positions = gather_rows(tape.parameter("embeddings.position"), seq.position_ids);
  Var summed = add(add(tokens, segments), positions);
  return maybe_dropout(norm(tape, summed, "embeddings.norm"), config, context);
}

Var transformer_block(Tape& tape, const EncoderConfig& config, Var hidden,
                      std::span<const std::uint8_t> allowed, std::size_t layer,
                      const EncodeContext& context) {
  const std::size_t heads = config.num_heads;
  const std::size_t head_size = config.hidden_size / heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(head_size));
  const std::string attn = layer_name(layer, "attention");

  Var q = linear(tape, hidden, attn + ".query");
  Var k = linear(tape, hidden, attn + ".key");
  Var v = linear(tape, hidden, attn + ".value");
  std::vector<Var> contexts;
  contexts.reserve(heads);
  for (std::size_t h = 0; h < heads; ++h) {
    Var qh = slice_cols(q, h * head_size, head_size);
    Var kh = slice_cols(k, h * head_size, head_size);
    Var vh = slice_cols(v, h * head_size, head_size);
    Var probs = softmax_rows(scale(matmul_nt(qh, kh), inv_sqrt), allowed);
    if (context.trace) context.trace->attention.push_back(probs.value());
    contexts.push_back(matmul(probs, vh));
  }
  Var mixed = heads == 1 ? contexts[0] : concat_cols(contexts);
  Var attended = maybe_dropout(linear(tape, mixed, attn + ".output"), config, context);
  Var h1 = norm(tape, add(hidden, attended), attn + ".norm");

  const std::string ffn = layer_name(layer, "ffn");
  Var inner = gelu(linear(tape, h1, ffn + ".in"));
  Var outer = maybe_dropout(linear(tape, inner, ffn + ".out"), config, context);
  return norm(tape, add(h1, outer), ffn + ".norm");
}

Var encode(Tape& tape, const EncoderConfig& config, const InputSequence& seq, const EncodeContext& context) {
  seq.validate(config);
  const std::vector<std::uint8_t> allowed = attention_allowed(seq, context.allowed);
  Var hidden = build_input_representation(tape, config, seq, context);
  for (std::size_t l = 0; l < config.num_layers; ++l) {
    hidden = transformer_block(tape, config, hidden, allowed, l, context);
  }
  return hidden;
}

Tensor encode_values(ParameterStore& store, const EncoderConfig& config, const InputSequence& seq,
                     EncoderTrace* trace) {
  Tape tape(&store);
  EncodeContext context;
  context.trace = trace;
  return encode(tape, config, seq, context).value();
}

}  // namespace iert
