#pragma once

#include <compare>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

namespace iert {

/// Vocabulary index. Specials occupy 0..3, real items start at 4.
using TokenId = std::int64_t;

struct Date {
  int year = 0;
  int month = 0;
  int day = 0;

  auto operator<=>(const Date&) const = default;
  std::string iso() const;
};

/// Parses `text` against a pattern made of %Y, %m, %d and literal
/// characters. Numeric fields accept 1-4 (year) or 1-2 digits, so
/// "%m/%d/%Y" reads "11/1/2000". Trailing text after the pattern (a time of
/// day, for instance) is ignored.
std::optional<Date> parse_date(std::string_view text, std::string_view pattern);

struct TransactionRecord {
  std::string user_id;
  Date timestamp;
  std::string item_id;
};

struct CsvSchema {
  std::string user_col = "user";
  std::string date_col = "date";
  std::string item_col = "item";
  char delimiter = ';';
  std::string date_pattern = "%Y-%m-%d";
};

struct ParseResult {
  std::vector<TransactionRecord> records;
  std::size_t skipped = 0;
};

/// Reads delimiter-separated text with a header row. Fields may be wrapped
/// in double quotes and are trimmed. Rows with an empty mapped field or an
/// unparseable date are skipped and counted.
ParseResult parse_transactions(std::istream& lines, const CsvSchema& schema);

struct RawStatistics {
  std::size_t transactions = 0;
  std::size_t users = 0;
  std::size_t items = 0;
};

RawStatistics raw_statistics(const std::vector<TransactionRecord>& records);

struct Basket {
  std::vector<TokenId> items;
  std::size_t time_index = 0;

  bool contains(TokenId item) const;
  friend bool operator==(const Basket&, const Basket&) = default;
};

struct UserHistory {
  std::size_t user_index = 0;
  std::vector<Basket> baskets;
};

class Vocabulary {
 public:
  static constexpr TokenId kPad = 0;
  static constexpr TokenId kCls = 1;
  static constexpr TokenId kSep = 2;
  static constexpr TokenId kMask = 3;
  static constexpr TokenId kFirstItem = 4;

  /// Returns the existing index or appends a new one.
  TokenId add(const std::string& item_id);
  std::optional<TokenId> find(const std::string& item_id) const;
  const std::string& item(TokenId index) const;

  std::size_t catalog_size() const { return items_.size(); }
  std::size_t size() const { return items_.size() + static_cast<std::size_t>(kFirstItem); }
  bool is_item(TokenId index) const {
    return index >= kFirstItem && index < static_cast<TokenId>(size());
  }

 private:
  std::vector<std::string> items_;
  std::unordered_map<std::string, TokenId> index_;
};

struct UserSplit {
  std::vector<Basket> train;
  Basket validation;
  Basket test;
};

struct Corpus {
  std::vector<UserHistory> users;
  std::vector<std::string> user_ids;
  Vocabulary vocabulary;
  /// Parallel to `users` once split_corpus has run.
  std::vector<UserSplit> split;

  bool has_split() const { return !users.empty() && split.size() == users.size(); }
};

struct CorpusOptions {
  std::size_t min_item_users = 10;
  std::size_t min_user_items = 10;
  std::size_t max_basket_items = 100;
  std::size_t min_baskets = 3;
};

struct FilterDiagnostics {
  RawStatistics raw;
  std::size_t raw_baskets = 0;
  std::size_t items_removed = 0;
  std::size_t users_removed_item_threshold = 0;
  std::size_t users_removed_too_few_baskets = 0;
  std::size_t iterations = 0;

  std::string summary() const;
};

struct BuildResult {
  Corpus corpus;
  FilterDiagnostics diagnostics;
};

/// Groups records into (user, day) baskets and filters items and users to a
/// fixed point of the thresholds. Throws kEmptyCorpus when nothing survives.
BuildResult build_corpus(const std::vector<TransactionRecord>& records,
                         const CorpusOptions& options = {});

/// Per user: last basket is test, penultimate is validation, the rest train.
/// Users with fewer than three baskets are dropped (and users re-indexed);
/// their count goes to `excluded`.
Corpus split_corpus(Corpus corpus, std::size_t* excluded = nullptr);

struct SyntheticSpec {
  std::size_t n_users = 200;
  std::size_t n_items = 100;
  std::size_t n_baskets_per_user = 10;
  /// (first, partner): the partner joins any basket holding first.
  std::vector<std::pair<std::size_t, std::size_t>> co_occur_pairs;
  /// (trigger, consequent): the consequent joins the basket after any basket
  /// holding the trigger.
  std::vector<std::pair<std::size_t, std::size_t>> sequential_rules;
  /// Probability that a planted rule does not fire.
  double noise_rate = 0.05;
  std::uint64_t seed = 7;
  std::size_t basket_min = 3;
  std::size_t basket_max = 6;
  /// Size of each user's private pool of base items; 0 means the whole pool.
  std::size_t taste_size = 0;
};

/// Synthetic corpus with planted structure. Partners and consequents are
/// reserved: they are never drawn as base items, so they appear only when
/// their rule fires. Items are named "i<k>" (vocabulary index 4 + k), users
/// "u<k>". The result is already split.
Corpus generate_synthetic(const SyntheticSpec& spec);

/// Directory layout: baskets.tsv (`user_index<TAB>time_index<TAB>i,i,...`),
/// vocab.tsv (`index<TAB>item_id`, real items only), users.tsv
/// (`user_index<TAB>user_id`).
void write_corpus(const std::filesystem::path& dir, const Corpus& corpus);
void write_baskets(std::ostream& out, const Corpus& corpus);
void write_vocabulary(std::ostream& out, const Vocabulary& vocabulary);
/// Reads a corpus directory and splits it.
Corpus read_corpus(const std::filesystem::path& dir);

}  // namespace iert
