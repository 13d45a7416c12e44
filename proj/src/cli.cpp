#include "iert/cli.hpp"

#include <CLI11.hpp>

#include <charconv>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>

#include "iert/checkpoint.hpp"
#include "iert/corpus.hpp"
#include "iert/error.hpp"
#include "iert/evaluation.hpp"
#include "iert/finetune.hpp"
#include "iert/pretraining.hpp"

namespace iert::cli {

namespace fs = std::filesystem;

namespace {

using KeyTable = std::vector<std::pair<std::string, std::string>>;

const KeyTable kEncoderKeys = {
    {"hidden_size", "64"},   {"num_layers", "2"},     {"num_heads", "2"},
    {"feed_forward_size", "256"}, {"max_len", "128"}, {"dropout", "0.1"},
    {"init_std", "0.02"},    {"positions_per_basket", "false"},
};

KeyTable keys_of(const std::string& subcommand) {
  KeyTable keys = {{"seed", "1"}};
  auto append = [&](const KeyTable& more) { keys.insert(keys.end(), more.begin(), more.end()); };
  if (subcommand == "ingest") {
    append({{"input", ""},
            {"user_col", "user"},
            {"date_col", "date"},
            {"item_col", "item"},
            {"delimiter", ";"},
            {"date_pattern", "%Y-%m-%d"},
            {"min_item_users", "10"},
            {"min_user_items", "10"},
            {"max_basket_items", "100"},
            {"min_baskets", "3"}});
  } else if (subcommand == "synth") {
    append({{"n_users", "200"},
            {"n_items", "100"},
            {"baskets_per_user", "10"},
            {"co_occur_pairs", ""},
            {"sequential_rules", ""},
            {"noise_rate", "0.05"},
            {"basket_min", "3"},
            {"basket_max", "6"},
            {"taste_size", "0"}});
  } else if (subcommand == "pretrain") {
    append({{"corpus", ""}});
    append(kEncoderKeys);
    append({{"batch_size", "32"},
            {"steps", "40000"},
            {"learning_rate", "2e-5"},
            {"warmup_steps", "0"},
            {"linear_decay", "false"},
            {"mask_rate", "0.15"},
            {"mask_token_prob", "0.8"},
            {"random_token_prob", "0.1"},
            {"keep_prob", "0.1"},
            {"negative_mode", "same_user"},
            {"mip_same_basket_only", "false"},
            {"checkpoint_every", "0"},
            {"stop_after", "0"},
            {"resume", ""},
            {"report_every", "100"}});
  } else if (subcommand == "finetune") {
    append({{"corpus", ""}, {"pretrained", ""}});
    append(kEncoderKeys);
    append({{"neg_per_pos", "4"},
            {"m", "auto"},
            {"n", "1"},
            {"epochs", "1"},
            {"batch_size", "32"},
            {"learning_rate", "2e-5"},
            {"linear_decay", "false"},
            {"aux_mip_weight", "0"},
            {"negative_sampling", "uniform"},
            {"targets_per_user", "1"}});
  } else if (subcommand == "recommend") {
    append({{"corpus", ""}, {"model", ""}, {"k", "5"}, {"exclude_seen", "false"}});
  } else if (subcommand == "evaluate") {
    append({{"corpus", ""}, {"recommendations", ""}, {"baseline", ""}, {"k", "5"}, {"model_name", ""}});
  } else {
    fail(ErrorKind::kConfig, "unknown subcommand '" + subcommand + "'");
  }
  return keys;
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
}

std::vector<std::pair<std::size_t, std::size_t>> parse_pairs(const std::string& key, const std::string& text) {
  std::vector<std::pair<std::size_t, std::size_t>> pairs;
  std::istringstream in(text);
  std::string item;
  while (std::getline(in, item, ',')) {
    item = trim(item);
    if (item.empty()) continue;
    const auto colon = item.find(':');
    std::size_t a = 0, b = 0;
    bool ok = colon != std::string::npos;
    if (ok) {
      const std::string left = item.substr(0, colon), right = item.substr(colon + 1);
      ok = std::from_chars(left.data(), left.data() + left.size(), a).ec == std::errc() &&
           std::from_chars(right.data(), right.data() + right.size(), b).ec == std::errc();
    }
    require(ok, ErrorKind::kConfig, "key '" + key + "': expected a:b,c:d pairs, got '" + text + "'");
    pairs.emplace_back(a, b);
  }
  return pairs;
}

EncoderConfig encoder_from(const RunConfig& c) {
  EncoderConfig e;
  e.hidden_size = c.size("hidden_size");
  e.num_layers = c.size("num_layers");
  e.num_heads = c.size("num_heads");
  e.feed_forward_size = c.size("feed_forward_size");
  e.max_sequence_length = c.size("max_len");
  e.dropout_rate = c.real("dropout");
  e.init_std = c.real("init_std");
  e.positions_per_basket = c.flag("positions_per_basket");
  return e;
}

fs::path output_dir(const RunConfig& c) {
  fs::path out = c.text("out");
  std::error_code ec;
  fs::create_directories(out, ec);
  require(!ec && fs::is_directory(out), ErrorKind::kIo, "cannot create output directory " + out.string());
  return out;
}

std::string required_path(const RunConfig& c, const std::string& key) {
  const std::string path = c.text(key);
  require(!path.empty(), ErrorKind::kConfig, "key '" + key + "' is required for " + c.subcommand());
  require(fs::exists(path), ErrorKind::kIo, "key '" + key + "': " + path + " does not exist");
  return path;
}

std::ofstream open_out(const fs::path& path, std::ios::openmode mode = std::ios::trunc) {
  std::ofstream out(path, std::ios::out | mode);
  require(static_cast<bool>(out), ErrorKind::kIo, "cannot write " + path.string());
  out << std::setprecision(17);
  return out;
}

void run_ingest(const RunConfig& c, const fs::path& out, std::ostream& say) {
  const std::string input = required_path(c, "input");
  std::ifstream in(input);
  require(static_cast<bool>(in), ErrorKind::kIo, "cannot read " + input);
  CsvSchema schema;
  schema.user_col = c.text("user_col");
  schema.date_col = c.text("date_col");
  schema.item_col = c.text("item_col");
  const std::string delimiter = c.text("delimiter");
  require(delimiter.size() == 1 || delimiter == "\\t", ErrorKind::kConfig, "delimiter must be one character or \\t");
  schema.delimiter = delimiter == "\\t" ? '\t' : delimiter[0];
  schema.date_pattern = c.text("date_pattern");
  const ParseResult parsed = parse_transactions(in, schema);
  CorpusOptions options;
  options.min_item_users = c.size("min_item_users");
  options.min_user_items = c.size("min_user_items");
  options.max_basket_items = c.size("max_basket_items");
  options.min_baskets = c.size("min_baskets");
  const RawStatistics raw = raw_statistics(parsed.records);
  std::ofstream report = open_out(out / "ingest_report.txt");
  report << "raw_transactions=" << raw.transactions << "\nraw_users=" << raw.users << "\nraw_items=" << raw.items
         << "\nskipped_rows=" << parsed.skipped << "\n";
  say << "raw: transactions=" << raw.transactions << " users=" << raw.users << " items=" << raw.items
            << " skipped_rows=" << parsed.skipped << "\n";
  BuildResult built = build_corpus(parsed.records, options);
  std::size_t excluded = 0;
  Corpus corpus = split_corpus(std::move(built.corpus), &excluded);
  report << "filter: " << built.diagnostics.summary() << "\n";
  report << "users=" << corpus.users.size() << "\nitems=" << corpus.vocabulary.catalog_size()
         << "\nsplit_excluded_users=" << excluded << "\n";
  write_corpus(out, corpus);
  say << "corpus: users=" << corpus.users.size() << " items=" << corpus.vocabulary.catalog_size() << "\n";
}

void run_synth(const RunConfig& c, const fs::path& out, std::ostream& say) {
  SyntheticSpec spec;
  spec.n_users = c.size("n_users");
  spec.n_items = c.size("n_items");
  spec.n_baskets_per_user = c.size("baskets_per_user");
  spec.co_occur_pairs = parse_pairs("co_occur_pairs", c.text("co_occur_pairs"));
  spec.sequential_rules = parse_pairs("sequential_rules", c.text("sequential_rules"));
  spec.noise_rate = c.real("noise_rate");
  spec.basket_min = c.size("basket_min");
  spec.basket_max = c.size("basket_max");
  spec.taste_size = c.size("taste_size");
  spec.seed = c.u64("seed");
  const Corpus corpus = generate_synthetic(spec);
  write_corpus(out, corpus);
  say << "synthetic corpus: users=" << corpus.users.size() << " items=" << corpus.vocabulary.catalog_size()
            << "\n";
}

/// Keeps the header and the lines of steps up to `steps_done`.
void truncate_log(const fs::path& path, std::size_t steps_done) {
  std::vector<std::string> kept;
  {
    std::ifstream in(path);
    std::string line;
    while (std::getline(in, line)) {
      if (kept.empty()) {
        kept.push_back(line);
        continue;
      }
      std::size_t step = 0;
      std::from_chars(line.data(), line.data() + line.size(), step);
      if (step <= steps_done) kept.push_back(line);
    }
  }
  std::ofstream out = open_out(path);
  for (const std::string& line : kept) out << line << '\n';
}

void run_pretrain(const RunConfig& c, const fs::path& out, std::ostream& say) {
  const Corpus corpus = read_corpus(required_path(c, "corpus"));
  PretrainConfig p;
  p.batch_size = c.size("batch_size");
  p.steps = c.size("steps");
  p.learning_rate = c.real("learning_rate");
  p.warmup_steps = c.size("warmup_steps");
  p.linear_decay = c.flag("linear_decay");
  p.masking.mask_rate = c.real("mask_rate");
  p.masking.replace_with_mask = c.real("mask_token_prob");
  p.masking.replace_with_random = c.real("random_token_prob");
  p.masking.keep_original = c.real("keep_prob");
  p.negative_mode = parse_negative_mode(c.text("negative_mode"));
  p.mip_same_basket_only = c.flag("mip_same_basket_only");
  Pretrainer trainer(corpus, encoder_from(c), p, c.u64("seed"));

  const fs::path log_path = out / "pretrain_loss.tsv";
  const fs::path ckpt_path = out / "pretrain.ckpt";
  std::ofstream log;
  if (!c.text("resume").empty()) {
    trainer.resume(required_path(c, "resume"));
    if (fs::exists(log_path)) {
      truncate_log(log_path, trainer.steps_done());
      log = open_out(log_path, std::ios::app);
    } else {
      log = open_out(log_path);
      log << "step\tl1\tl2\tl3\n";
    }
    say << "resumed at step " << trainer.steps_done() << "\n";
  } else {
    log = open_out(log_path);
    log << "step\tl1\tl2\tl3\n";
  }
  const std::size_t every = c.size("checkpoint_every");
  const std::size_t stop_after = c.size("stop_after");
  const std::size_t report = c.size("report_every");
  while (trainer.steps_done() < p.steps) {
    const PretrainLosses losses = trainer.step();
    const std::size_t step = trainer.steps_done();
    log << step << '\t' << losses.l1 << '\t' << losses.l2 << '\t' << losses.l3 << '\n';
    if (report > 0 && step % report == 0) {
      say << "step " << step << " l1=" << losses.l1 << " l2=" << losses.l2 << " l3=" << losses.l3 << std::endl;
    }
    if (every > 0 && step % every == 0) trainer.save(ckpt_path);
    if (stop_after > 0 && step >= stop_after) break;
  }
  log.flush();
  trainer.save(ckpt_path);
  say << "checkpoint: " << ckpt_path.string() << " (step " << trainer.steps_done() << ")\n";
}

void run_finetune(const RunConfig& c, const fs::path& out, std::ostream& say) {
  const Corpus corpus = read_corpus(required_path(c, "corpus"));
  FineTuneConfig f;
  f.neg_per_pos = c.size("neg_per_pos");
  f.positive_weight = c.text("m") == "auto" ? static_cast<double>(f.neg_per_pos) : c.real("m");
  f.negative_weight = c.real("n");
  f.epochs = c.size("epochs");
  f.batch_size = c.size("batch_size");
  f.learning_rate = c.real("learning_rate");
  f.linear_decay = c.flag("linear_decay");
  f.aux_mip_weight = c.real("aux_mip_weight");
  f.sampling = parse_negative_sampling(c.text("negative_sampling"));
  f.targets_per_user = c.size("targets_per_user");
  const std::uint64_t seed = c.u64("seed");
  std::unique_ptr<FineTuner> tuner;
  if (c.text("pretrained").empty()) {
    tuner = std::make_unique<FineTuner>(corpus, encoder_from(c), f, seed);
  } else {
    tuner = std::make_unique<FineTuner>(corpus, load_checkpoint(required_path(c, "pretrained")), f, seed);
  }
  std::ofstream log = open_out(out / "finetune_loss.tsv");
  log << "step\tepoch\tloss\n";
  for (std::size_t epoch = 1; epoch <= f.epochs; ++epoch) {
    const std::vector<double> losses = tuner->train_epoch();
    double total = 0.0;
    for (std::size_t i = 0; i < losses.size(); ++i) {
      log << tuner->steps_done() - losses.size() + i + 1 << '\t' << epoch << '\t' << losses[i] << '\n';
      total += losses[i];
    }
    say << "epoch " << epoch << " batches=" << losses.size()
              << " mean_loss=" << (losses.empty() ? 0.0 : total / static_cast<double>(losses.size())) << std::endl;
  }
  const fs::path ckpt_path = out / "finetune.ckpt";
  tuner->save(ckpt_path);
  say << "checkpoint: " << ckpt_path.string() << "\n";
}

void run_recommend(const RunConfig& c, const fs::path& out, std::ostream& say) {
  const Corpus corpus = read_corpus(required_path(c, "corpus"));
  FineTunedModel model = load_finetuned(required_path(c, "model"));
  require(model.encoder.vocab_size == corpus.vocabulary.size(), ErrorKind::kConfig,
          "recommend: model vocabulary does not match the corpus");
  require(model.store.value("head.user").rows() == corpus.users.size(), ErrorKind::kConfig,
          "recommend: model user table does not match the corpus");
  const std::size_t k = c.size("k");
  const bool exclude = c.flag("exclude_seen");
  std::vector<RankedList> lists;
  for (std::size_t u = 0; u < corpus.users.size(); ++u) {
    lists.push_back(
        recommend_top_k(model.store, model.encoder, corpus.vocabulary, u, test_history(corpus, u), k, exclude));
  }
  std::ofstream file = open_out(out / "recommendations.tsv");
  write_recommendations(file, lists);
  say << "recommendations: " << (out / "recommendations.tsv").string() << " users=" << lists.size() << "\n";
}

void run_evaluate(const RunConfig& c, const fs::path& out, std::ostream& say) {
  const Corpus corpus = read_corpus(required_path(c, "corpus"));
  const std::size_t k = c.size("k");
  const std::string baseline = c.text("baseline");
  std::vector<RankedList> lists;
  std::string name = c.text("model_name");
  if (!baseline.empty()) {
    require(baseline == "top", ErrorKind::kConfig, "baseline must be 'top', got '" + baseline + "'");
    require(c.text("recommendations").empty(), ErrorKind::kConfig,
            "evaluate: give either recommendations or baseline, not both");
    lists = top_baseline(corpus, k);
    if (name.empty()) name = "TOP";
  } else {
    std::ifstream in(required_path(c, "recommendations"));
    lists = read_recommendations(in);
    if (name.empty()) name = "IERT";
  }
  const EvaluationResult result = evaluate(lists, corpus, k);
  const std::string table = metrics_table({{name, result.metrics}});
  open_out(out / "metrics.txt") << table;
  std::ofstream kv = open_out(out / "metrics.kv");
  write_metrics_kv(kv, name, result.metrics);
  std::ofstream per_user = open_out(out / "per_user.tsv");
  write_per_user(per_user, result.per_user);
  say << table;
  if (result.metrics.excluded_empty_truth > 0) {
    say << "excluded users with empty test basket: " << result.metrics.excluded_empty_truth << "\n";
  }
}

std::string escape(const std::string& s) {
  std::string out;
  for (char ch : s) {
    if (ch == '"' || ch == '\\') out += '\\';
    out += ch == '\n' ? ' ' : ch;
  }
  return out;
}

}  // namespace

RunConfig::RunConfig(const std::string& subcommand) : subcommand_(subcommand) {
  for (const auto& [key, value] : keys_of(subcommand)) values_[key] = value;
  values_["out"] = ".";
}

void RunConfig::set(const std::string& key, const std::string& value) {
  auto it = values_.find(key);
  require(it != values_.end(), ErrorKind::kConfig, "unknown key '" + key + "' for " + subcommand_);
  it->second = value;
}

void RunConfig::merge_file(const std::string& path) {
  std::ifstream in(path);
  require(static_cast<bool>(in), ErrorKind::kIo, "cannot read config " + path);
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    line = trim(line);
    if (line.empty() || line[0] == '#') continue;
    const auto eq = line.find('=');
    require(eq != std::string::npos, ErrorKind::kConfig,
            path + ":" + std::to_string(line_no) + ": expected key=value");
    set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
  }
}

std::string RunConfig::text(const std::string& key) const {
  auto it = values_.find(key);
  require(it != values_.end(), ErrorKind::kContract, "config key '" + key + "' not defined for " + subcommand_);
  return it->second;
}

std::size_t RunConfig::size(const std::string& key) const {
  return static_cast<std::size_t>(u64(key));
}

std::uint64_t RunConfig::u64(const std::string& key) const {
  const std::string v = text(key);
  std::uint64_t out = 0;
  const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  require(ec == std::errc() && ptr == v.data() + v.size() && !v.empty(), ErrorKind::kConfig,
          "key '" + key + "': expected a non-negative integer, got '" + v + "'");
  return out;
}

double RunConfig::real(const std::string& key) const {
  const std::string v = text(key);
  std::size_t used = 0;
  double out = 0.0;
  try {
    out = std::stod(v, &used);
  } catch (const std::logic_error&) {
    used = 0;
  }
  require(used == v.size() && !v.empty() && std::isfinite(out), ErrorKind::kConfig,
          "key '" + key + "': expected a number, got '" + v + "'");
  return out;
}

bool RunConfig::flag(const std::string& key) const {
  const std::string v = text(key);
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  fail(ErrorKind::kConfig, "key '" + key + "': expected true or false, got '" + v + "'");
}

void RunConfig::write(std::ostream& out) const {
  out << "# " << subcommand_ << "\n";
  for (const auto& [key, value] : values_) {
    if (key != "out") out << key << "=" << value << "\n";
  }
}

std::vector<std::string> subcommands() { return {"ingest", "synth", "pretrain", "finetune", "recommend", "evaluate"}; }

void execute(const RunConfig& config, std::ostream& say) {
  const fs::path out = output_dir(config);
  {
    std::ofstream echo = open_out(out / (config.subcommand() + ".config"));
    config.write(echo);
  }
  const std::string& s = config.subcommand();
  if (s == "ingest") run_ingest(config, out, say);
  else if (s == "synth") run_synth(config, out, say);
  else if (s == "pretrain") run_pretrain(config, out, say);
  else if (s == "finetune") run_finetune(config, out, say);
  else if (s == "recommend") run_recommend(config, out, say);
  else run_evaluate(config, out, say);
}

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Item embeddings for next-basket recommendation"};
  app.require_subcommand(1);
  struct Flags {
    std::string config;
    std::string seed;
    std::string out;
    std::vector<std::string> sets;
  };
  std::map<std::string, Flags> flags;
  for (const std::string& name : subcommands()) {
    CLI::App* sub = app.add_subcommand(name);
    Flags& f = flags[name];
    sub->add_option("--config", f.config, "key=value config file");
    sub->add_option("--seed", f.seed, "random seed");
    sub->add_option("--out", f.out, "output directory");
    sub->add_option("--set", f.sets, "key=value override (repeatable)");
  }
  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "error: kind=config_error message=\"" << escape(e.what()) << "\"\n";
    return 2;
  }
  try {
    CLI::App* chosen = app.get_subcommands().front();
    const Flags& f = flags.at(chosen->get_name());
    RunConfig config(chosen->get_name());
    if (!f.config.empty()) config.merge_file(f.config);
    for (const std::string& kv : f.sets) {
      const auto eq = kv.find('=');
      require(eq != std::string::npos, ErrorKind::kConfig, "--set expects key=value, got '" + kv + "'");
      config.set(kv.substr(0, eq), kv.substr(eq + 1));
    }
    if (!f.seed.empty()) config.set("seed", f.seed);
    if (!f.out.empty()) config.set("out", f.out);
    execute(config, out);
  } catch (const Error& e) {
    err << "error: kind=" << to_string(e.kind()) << " message=\"" << escape(e.what()) << "\"\n";
    return e.kind() == ErrorKind::kConfig ? 2 : 1;
  } catch (const std::exception& e) {
    err << "error: kind=internal message=\"" << escape(e.what()) << "\"\n";
    return 1;
  }
  return 0;
}

}  // namespace iert::cli
