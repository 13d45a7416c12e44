#pragma once

#include <iosfwd>
#include <string>
#include <utility>
#include <vector>

#include "iert/corpus.hpp"

namespace iert {

/// Top-K recommendation for one user, best first.
struct RankedList {
  std::size_t user_index = 0;
  std::vector<TokenId> items;
  std::vector<double> scores;
};

struct Metrics {
  double f1_at_k = 0.0;
  double ndcg_at_k = 0.0;
  std::size_t k = 0;
  std::size_t n_users = 0;
  /// Users skipped because their truth basket was empty.
  std::size_t excluded_empty_truth = 0;
};

struct UserMetrics {
  std::size_t user_index = 0;
  std::size_t hits = 0;
  double f1 = 0.0;
  double ndcg = 0.0;
};

struct EvaluationResult {
  Metrics metrics;
  std::vector<UserMetrics> per_user;
};

/// Hits among the first k recommended items.
std::size_t hits_at_k(const RankedList& recs, const Basket& truth, std::size_t k);

/// P = hits/k, R = hits/|truth|, F1 = 2PR/(P+R) (0 without hits).
double f1_at_k(const RankedList& recs, const Basket& truth, std::size_t k);

/// DCG over the first k ranks with 1/log2(rank+1) gains, normalised by the
/// ideal DCG of min(k, |truth|) hits.
double ndcg_at_k(const RankedList& recs, const Basket& truth, std::size_t k);

/// The k items with the most train-basket occurrences (ties to the lower
/// index), identical for every user. Scores are the occurrence counts.
std::vector<RankedList> top_baseline(const Corpus& corpus, std::size_t k);

/// Scores every user's list against their test basket and averages
/// uniformly over users. Throws if any user lacks a list.
EvaluationResult evaluate(const std::vector<RankedList>& recommendations, const Corpus& corpus, std::size_t k = 5);

/// `user_index<TAB>item,item,...<TAB>score,score,...`, one user per line.
void write_recommendations(std::ostream& out, const std::vector<RankedList>& lists);
std::vector<RankedList> read_recommendations(std::istream& in);

/// Plain-text table with one row per model: name, F1-score@k, NDCG@k.
std::string metrics_table(const std::vector<std::pair<std::string, Metrics>>& rows);
void write_metrics_kv(std::ostream& out, const std::string& model, const Metrics& metrics);
void write_per_user(std::ostream& out, const std::vector<UserMetrics>& per_user);

}  // namespace iert
