#include "iert/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <iostream>
#include <map>
#include <sstream>

#include "iert/error.hpp"

namespace iert {

namespace {

void require_truth(const Basket& truth, std::size_t k) {
  require(k >= 1, ErrorKind::kContract, "metrics: k must be at least 1");
  require(!truth.items.empty(), ErrorKind::kContract, "metrics: truth basket is empty");
}

std::string fixed(double v, int digits) {
  std::ostringstream out;
  out << std::fixed << std::setprecision(digits) << v;
  return out.str();
}

}  // namespace

std::size_t hits_at_k(const RankedList& recs, const Basket& truth, std::size_t k) {
  std::size_t hits = 0;
  const std::size_t n = std::min(k, recs.items.size());
  for (std::size_t r = 0; r < n; ++r) {
    if (truth.contains(recs.items[r])) ++hits;
  }
  return hits;
}

double f1_at_k(const RankedList& recs, const Basket& truth, std::size_t k) {
  require_truth(truth, k);
  const double hits = static_cast<double>(hits_at_k(recs, truth, k));
  const double precision = hits / static_cast<double>(k);
  const double recall = hits / static_cast<double>(truth.items.size());
  if (precision + recall == 0.0) return 0.0;
  return 2.0 * precision * recall / (precision + recall);
}

double ndcg_at_k(const RankedList& recs, const Basket& truth, std::size_t k) {
  require_truth(truth, k);
  double dcg = 0.0;
  const std::size_t n = std::min(k, recs.items.size());
  for (std::size_t r = 0; r < n; ++r) {
    if (truth.contains(recs.items[r])) dcg += 1.0 / std::log2(static_cast<double>(r) + 2.0);
  }
  double ideal = 0.0;
  const std::size_t best = std::min(k, truth.items.size());
  for (std::size_t r = 0; r < best; ++r) ideal += 1.0 / std::log2(static_cast<double>(r) + 2.0);
  return dcg / ideal;
}

std::vector<RankedList> top_baseline(const Corpus& corpus, std::size_t k) {
  require(corpus.has_split(), ErrorKind::kContract, "top_baseline: corpus is not split");
  std::vector<std::size_t> counts(corpus.vocabulary.size(), 0);
  bool any = false;
  for (const UserSplit& s : corpus.split) {
    for (const Basket& b : s.train) {
      any = true;
      for (TokenId item : b.items) ++counts[static_cast<std::size_t>(item)];
    }
  }
  require(any, ErrorKind::kContract, "top_baseline: train split is empty");
  std::vector<TokenId> order;
  for (std::size_t i = 0; i < corpus.vocabulary.catalog_size(); ++i) {
    order.push_back(Vocabulary::kFirstItem + static_cast<TokenId>(i));
  }
  std::stable_sort(order.begin(), order.end(), [&](TokenId a, TokenId b) {
    return counts[static_cast<std::size_t>(a)] > counts[static_cast<std::size_t>(b)];
  });
  order.resize(std::min(k, order.size()));
  RankedList shared;
  for (TokenId item : order) {
    shared.items.push_back(item);
    shared.scores.push_back(static_cast<double>(counts[static_cast<std::size_t>(item)]));
  }
  std::vector<RankedList> lists(corpus.users.size(), shared);
  for (std::size_t u = 0; u < lists.size(); ++u) lists[u].user_index = u;
  return lists;
}

EvaluationResult evaluate(const std::vector<RankedList>& recommendations, const Corpus& corpus, std::size_t k) {
  require(corpus.has_split(), ErrorKind::kContract, "evaluate: corpus is not split");
  require(k >= 1, ErrorKind::kContract, "evaluate: k must be at least 1");
  std::map<std::size_t, const RankedList*> by_user;
  for (const RankedList& list : recommendations) by_user[list.user_index] = &list;
  std::string missing;
  std::size_t n_missing = 0;
  for (std::size_t u = 0; u < corpus.users.size(); ++u) {
    if (by_user.count(u)) continue;
    if (n_missing++ < 20) missing += (missing.empty() ? "" : ",") + std::to_string(u);
  }
  require(n_missing == 0, ErrorKind::kValidation,
          "evaluate: " + std::to_string(n_missing) + " user(s) have no recommendation list: " + missing +
              (n_missing > 20 ? ",..." : ""));

  EvaluationResult result;
  result.metrics.k = k;
  double f1_total = 0.0, ndcg_total = 0.0;
  for (std::size_t u = 0; u < corpus.users.size(); ++u) {
    const Basket& truth = corpus.split[u].test;
    if (truth.items.empty()) {
      ++result.metrics.excluded_empty_truth;
      continue;
    }
    const RankedList& list = *by_user[u];
    UserMetrics m{u, hits_at_k(list, truth, k), f1_at_k(list, truth, k), ndcg_at_k(list, truth, k)};
    f1_total += m.f1;
    ndcg_total += m.ndcg;
    result.per_user.push_back(m);
  }
  result.metrics.n_users = result.per_user.size();
  require(result.metrics.n_users > 0, ErrorKind::kValidation, "evaluate: no user has a non-empty test basket");
  result.metrics.f1_at_k = f1_total / static_cast<double>(result.metrics.n_users);
  result.metrics.ndcg_at_k = ndcg_total / static_cast<double>(result.metrics.n_users);
  return result;
}

void write_recommendations(std::ostream& out, const std::vector<RankedList>& lists) {
  out << std::setprecision(17);
  for (const RankedList& list : lists) {
    out << list.user_index << '\t';
    for (std::size_t i = 0; i < list.items.size(); ++i) out << (i ? "," : "") << list.items[i];
    out << '\t';
    for (std::size_t i = 0; i < list.scores.size(); ++i) out << (i ? "," : "") << list.scores[i];
    out << '\n';
  }
}

std::vector<RankedList> read_recommendations(std::istream& in) {
  std::vector<RankedList> lists;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::istringstream fields(line);
    std::string user, items, scores;
    std::getline(fields, user, '\t');
    std::getline(fields, items, '\t');
    std::getline(fields, scores, '\t');
    RankedList list;
    try {
      list.user_index = std::stoull(user);
      std::istringstream is(items), ss(scores);
      std::string tok;
      while (std::getline(is, tok, ',')) if (!tok.empty()) list.items.push_back(std::stoll(tok));
      while (std::getline(ss, tok, ',')) if (!tok.empty()) list.scores.push_back(std::stod(tok));
    } catch (const std::logic_error&) {
      fail(ErrorKind::kValidation, "recommendations: malformed line " + std::to_string(line_no));
    }
    require(list.scores.size() == list.items.size(), ErrorKind::kValidation,
            "recommendations: item/score count mismatch on line " + std::to_string(line_no));
    lists.push_back(std::move(list));
  }
  return lists;
}

std::string metrics_table(const std::vector<std::pair<std::string, Metrics>>& rows) {
  std::size_t width = 5;
  for (const auto& [name, _] : rows) width = std::max(width, name.size());
  const std::size_t k = rows.empty() ? 5 : rows.front().second.k;
  const std::string f1_head = "F1-score@" + std::to_string(k);
  const std::string ndcg_head = "NDCG@" + std::to_string(k);
  std::ostringstream out;
  auto line = [&](const std::string& a, const std::string& b, const std::string& c) {
    out << std::left << std::setw(static_cast<int>(width)) << a << " | " << std::setw(11) << b << " | " << c << "\n";
  };
  line("Model", f1_head, ndcg_head);
  out << std::string(width, '-') << "-+-" << std::string(11, '-') << "-+-" << std::string(ndcg_head.size(), '-')
      << "\n";
  for (const auto& [name, m] : rows) line(name, fixed(m.f1_at_k, 3), fixed(m.ndcg_at_k, 3));
  return out.str();
}

void write_metrics_kv(std::ostream& out, const std::string& model, const Metrics& metrics) {
  out << std::setprecision(17);
  out << "model=" << model << "\n";
  out << "k=" << metrics.k << "\n";
  out << "n_users=" << metrics.n_users << "\n";
  out << "excluded_empty_truth=" << metrics.excluded_empty_truth << "\n";
  out << "f1_at_k=" << metrics.f1_at_k << "\n";
  out << "ndcg_at_k=" << metrics.ndcg_at_k << "\n";
}

void write_per_user(std::ostream& out, const std::vector<UserMetrics>& per_user) {
  out << std::setprecision(17);
  out << "user_index\thits\tf1\tndcg\n";
  for (const UserMetrics& m : per_user) out << m.user_index << '\t' << m.hits << '\t' << m.f1 << '\t' << m.ndcg << '\n';
}

}  // namespace iert
