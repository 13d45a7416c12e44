#include "iert/corpus.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <fstream>
#include <iostream>
#include <map>
#include <set>
#include <sstream>
#include <unordered_set>

#include "iert/error.hpp"
#include "iert/rng.hpp"

namespace iert {

namespace {

std::string_view trim(std::string_view s) {
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.front()))) s.remove_prefix(1);
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.back()))) s.remove_suffix(1);
  if (s.size() >= 2 && s.front() == '"' && s.back() == '"') s = s.substr(1, s.size() - 2);
  return s;
}

std::vector<std::string> split_fields(const std::string& line, char delimiter) {
  std::vector<std::string> fields;
  std::string current;
  bool quoted = false;
  for (char c : line) {
    if (c == '"') {
      quoted = !quoted;
      current += c;
    } else if (c == delimiter && !quoted) {
      fields.emplace_back(trim(current));
      current.clear();
    } else {
      current += c;
    }
  }
  fields.emplace_back(trim(current));
  return fields;
}

bool valid_date(const Date& d) {
  static constexpr int kDays[] = {31, 29, 31, 30, 31, 30, 31, 31, 30, 31, 30, 31};
  if (d.month < 1 || d.month > 12 || d.day < 1) return false;
  const bool leap = (d.year % 4 == 0 && d.year % 100 != 0) || d.year % 400 == 0;
  const int limit = d.month == 2 ? (leap ? 29 : 28) : kDays[d.month - 1];
  return d.day <= limit;
}

std::size_t parse_count(std::string_view text, const std::string& what) {
  std::size_t value = 0;
  auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), value);
  require(ec == std::errc() && ptr == text.data() + text.size(), ErrorKind::kValidation,
          "corpus: bad " + what + " '" + std::string(text) + "'");
  return value;
}

}  // namespace

std::string Date::iso() const {
  char buf[16];
  std::snprintf(buf, sizeof buf, "%04d-%02d-%02d", year, month, day);
  return buf;
}

std::optional<Date> parse_date(std::string_view text, std::string_view pattern) {
  Date date;
  std::size_t t = 0;
  for (std::size_t p = 0; p < pattern.size(); ++p) {
    if (pattern[p] == '%' && p + 1 < pattern.size()) {
      const char field = pattern[++p];
      const std::size_t max_digits = field == 'Y' ? 4 : 2;
      int value = 0;
      std::size_t digits = 0;
      while (t < text.size() && digits < max_digits && std::isdigit(static_cast<unsigned char>(text[t]))) {
        value = value * 10 + (text[t] - '0');
        ++t;
        ++digits;
      }
      if (digits == 0) return std::nullopt;
      switch (field) {
        case 'Y': date.year = value; break;
        case 'm': date.month = value; break;
        case 'd': date.day = value; break;
        default: return std::nullopt;
      }
    } else {
      if (t >= text.size() || text[t] != pattern[p]) return std::nullopt;
      ++t;
    }
  }
  if (t < text.size() && std::isdigit(static_cast<unsigned char>(text[t]))) return std::nullopt;
  if (!valid_date(date)) return std::nullopt;
  return date;
}

ParseResult parse_transactions(std::istream& lines, const CsvSchema& schema) {
  ParseResult result;
  std::string line;
  if (!std::getline(lines, line)) return result;
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line.size() >= 3 && line.compare(0, 3, "\xEF\xBB\xBF") == 0) line.erase(0, 3);
  const std::vector<std::string> header = split_fields(line, schema.delimiter);
  auto column = [&](const std::string& name) {
    auto it = std::find(header.begin(), header.end(), name);
    require(it != header.end(), ErrorKind::kConfig,
            "parse_transactions: header has no column '" + name + "'");
    return static_cast<std::size_t>(it - header.begin());
  };
  const std::size_t user_col = column(schema.user_col);
  const std::size_t date_col = column(schema.date_col);
  const std::size_t item_col = column(schema.item_col);
  const std::size_t needed = std::max({user_col, date_col, item_col});

  while (std::getline(lines, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const std::vector<std::string> fields = split_fields(line, schema.delimiter);
    if (fields.size() <= needed || fields[user_col].empty() || fields[item_col].empty() ||
        fields[date_col].empty()) {
      ++result.skipped;
      continue;
    }
    auto date = parse_date(fields[date_col], schema.date_pattern);
    if (!date) {
      ++result.skipped;
      continue;
    }
    result.records.push_back({fields[user_col], *date, fields[item_col]});
  }
  return result;
}

RawStatistics raw_statistics(const std::vector<TransactionRecord>& records) {
  std::unordered_set<std::string> users, items;
  for (const auto& r : records) {
    users.insert(r.user_id);
    items.insert(r.item_id);
  }
  return {records.size(), users.size(), items.size()};
}

bool Basket::contains(TokenId item) const {
  return std::find(items.begin(), items.end(), item) != items.end();
}

TokenId Vocabulary::add(const std::string& item_id) {
  auto [it, inserted] = index_.try_emplace(item_id, static_cast<TokenId>(size()));
  if (inserted) items_.push_back(item_id);
  return it->second;
}

std::optional<TokenId> Vocabulary::find(const std::string& item_id) const {
  auto it = index_.find(item_id);
  if (it == index_.end()) return std::nullopt;
  return it->second;
}

const std::string& Vocabulary::item(TokenId index) const {
  require(is_item(index), ErrorKind::kBounds,
          "vocabulary: index " + std::to_string(index) + " is not a real item");
  return items_[static_cast<std::size_t>(index - kFirstItem)];
}

std::string FilterDiagnostics::summary() const {
  std::ostringstream out;
  out << "raw_transactions=" << raw.transactions << " raw_users=" << raw.users
      << " raw_items=" << raw.items << " raw_baskets=" << raw_baskets
      << " items_removed=" << items_removed
      << " users_removed_item_threshold=" << users_removed_item_threshold
      << " users_removed_too_few_baskets=" << users_removed_too_few_baskets
      << " iterations=" << iterations;
  return out.str();
}

BuildResult build_corpus(const std::vector<TransactionRecord>& records, const CorpusOptions& options) {
  require(!records.empty(), ErrorKind::kEmptyCorpus, "build_corpus: no transaction records");
  FilterDiagnostics diag;
  diag.raw = raw_statistics(records);

  // Dense ids in first-appearance order.
  std::unordered_map<std::string, std::size_t> user_id_map, item_id_map;
  std::vector<std::string> user_names, item_names;
  // Per user: date -> basket of item ids (first appearance order, deduplicated).
  std::vector<std::map<Date, std::vector<std::size_t>>> grouped;
  for (const auto& r : records) {
    auto [uit, unew] = user_id_map.try_emplace(r.user_id, user_names.size());
    if (unew) {
      user_names.push_back(r.user_id);
      grouped.emplace_back();
    }
    auto [iit, inew] = item_id_map.try_emplace(r.item_id, item_names.size());
    if (inew) item_names.push_back(r.item_id);
    auto& basket = grouped[uit->second][r.timestamp];
    if (std::find(basket.begin(), basket.end(), iit->second) == basket.end()) basket.push_back(iit->second);
  }
  for (const auto& g : grouped) diag.raw_baskets += g.size();

  const std::size_t n_users = user_names.size();
  const std::size_t n_items = item_names.size();
  std::vector<char> user_alive(n_users, 1), item_alive(n_items, 1);
  // Derived view for the current alive sets: baskets restricted to alive
  // items, truncated, empties dropped.
  std::vector<std::vector<std::vector<std::size_t>>> derived(n_users);
  auto derive = [&]() {
    for (std::size_t u = 0; u < n_users; ++u) {
      derived[u].clear();
      if (!user_alive[u]) continue;
      for (const auto& [date, items] : grouped[u]) {
        std::vector<std::size_t> kept;
        for (std::size_t i : items) {
          if (!item_alive[i]) continue;
          if (kept.size() >= options.max_basket_items) break;
          kept.push_back(i);
        }
        if (!kept.empty()) derived[u].push_back(std::move(kept));
      }
    }
  };

  bool changed = true;
  while (changed) {
    changed = false;
    ++diag.iterations;
    derive();
    std::vector<std::size_t> item_users(n_items, 0);
    std::vector<std::size_t> user_items(n_users, 0);
    for (std::size_t u = 0; u < n_users; ++u) {
      std::unordered_set<std::size_t> seen;
      for (const auto& basket : derived[u]) {
        user_items[u] += basket.size();
        for (std::size_t i : basket) {
          if (seen.insert(i).second) ++item_users[i];
        }
      }
    }
    for (std::size_t i = 0; i < n_items; ++i) {
      if (item_alive[i] && item_users[i] < options.min_item_users) {
        item_alive[i] = 0;
        ++diag.items_removed;
        changed = true;
      }
    }
    for (std::size_t u = 0; u < n_users; ++u) {
      if (!user_alive[u]) continue;
      if (user_items[u] < options.min_user_items) {
        user_alive[u] = 0;
        ++diag.users_removed_item_threshold;
        changed = true;
      } else if (derived[u].size() < options.min_baskets) {
        user_alive[u] = 0;
        ++diag.users_removed_too_few_baskets;
        changed = true;
      }
    }
  }

  BuildResult result;
  result.diagnostics = diag;
  Corpus& corpus = result.corpus;
  // Vocabulary in log order of first appearance among retained items.
  std::vector<TokenId> token_of(n_items, -1);
  for (const auto& r : records) {
    const std::size_t i = item_id_map[r.item_id];
    const std::size_t u = user_id_map[r.user_id];
    if (item_alive[i] && user_alive[u] && !derived[u].empty() && token_of[i] < 0) {
      token_of[i] = corpus.vocabulary.add(item_names[i]);
    }
  }
  for (std::size_t u = 0; u < n_users; ++u) {
    if (!user_alive[u] || derived[u].empty()) continue;
    UserHistory history;
    history.user_index = corpus.users.size();
    for (std::size_t t = 0; t < derived[u].size(); ++t) {
      Basket basket;
      basket.time_index = t;
      for (std::size_t i : derived[u][t]) basket.items.push_back(token_of[i]);
      history.baskets.push_back(std::move(basket));
    }
    corpus.users.push_back(std::move(history));
    corpus.user_ids.push_back(user_names[u]);
  }
  require(!corpus.users.empty(), ErrorKind::kEmptyCorpus,
          "build_corpus: every user was filtered out (" + diag.summary() + ")");
  return result;
}

Corpus split_corpus(Corpus corpus, std::size_t* excluded) {
  Corpus out;
  out.vocabulary = std::move(corpus.vocabulary);
  std::size_t dropped = 0;
  for (std::size_t u = 0; u < corpus.users.size(); ++u) {
    UserHistory& history = corpus.users[u];
    if (history.baskets.size() < 3) {
      ++dropped;
      continue;
    }
    history.user_index = out.users.size();
    UserSplit split;
    const std::size_t n = history.baskets.size();
    split.train.assign(history.baskets.begin(), history.baskets.end() - 2);
    split.validation = history.baskets[n - 2];
    split.test = history.baskets[n - 1];
    out.users.push_back(std::move(history));
    out.user_ids.push_back(u < corpus.user_ids.size() ? corpus.user_ids[u] : "u" + std::to_string(u));
    out.split.push_back(std::move(split));
  }
  if (dropped > 0) {
    std::cerr << "warning: split_corpus excluded " << dropped << " user(s) with fewer than 3 baskets\n";
  }
  if (excluded) *excluded = dropped;
  return out;
}

Corpus generate_synthetic(const SyntheticSpec& spec) {
  const std::size_t rules = spec.co_occur_pairs.size() + spec.sequential_rules.size();
  require(spec.n_items >= 2 * rules, ErrorKind::kValidation,
          "generate_synthetic: n_items must be at least twice the number of planted rules");
  require(spec.n_users > 0 && spec.n_baskets_per_user > 0, ErrorKind::kValidation,
          "generate_synthetic: need at least one user and one basket per user");
  require(spec.noise_rate >= 0.0 && spec.noise_rate <= 1.0, ErrorKind::kValidation,
          "generate_synthetic: noise_rate must lie in [0, 1]");
  require(spec.basket_min >= 1 && spec.basket_min <= spec.basket_max, ErrorKind::kValidation,
          "generate_synthetic: need 1 <= basket_min <= basket_max");

  std::vector<char> reserved(spec.n_items, 0);
  auto check_item = [&](std::size_t item) {
    require(item < spec.n_items, ErrorKind::kValidation,
            "generate_synthetic: rule references item " + std::to_string(item) + " >= n_items " +
                std::to_string(spec.n_items));
  };
  for (auto [a, b] : spec.co_occur_pairs) {
    check_item(a);
    check_item(b);
    require(a != b, ErrorKind::kValidation, "generate_synthetic: pair with identical members");
    reserved[b] = 1;
  }
  for (auto [x, y] : spec.sequential_rules) {
    check_item(x);
    check_item(y);
    require(x != y, ErrorKind::kValidation, "generate_synthetic: rule with identical items");
    reserved[y] = 1;
  }
  for (auto [a, b] : spec.co_occur_pairs) {
    require(!reserved[a], ErrorKind::kValidation,
            "generate_synthetic: item " + std::to_string(a) + " is both a rule source and a rule target");
  }
  for (auto [x, y] : spec.sequential_rules) {
    require(!reserved[x], ErrorKind::kValidation,
            "generate_synthetic: item " + std::to_string(x) + " is both a rule source and a rule target");
  }
  std::vector<std::size_t> base_pool;
  for (std::size_t i = 0; i < spec.n_items; ++i) {
    if (!reserved[i]) base_pool.push_back(i);
  }
  const std::size_t taste = spec.taste_size == 0 ? base_pool.size() : spec.taste_size;
  require(taste <= base_pool.size() && taste >= spec.basket_max, ErrorKind::kValidation,
          "generate_synthetic: taste pool must hold basket_max items and fit the unreserved items");

  Rng rng(spec.seed);
  Corpus corpus;
  for (std::size_t i = 0; i < spec.n_items; ++i) corpus.vocabulary.add("i" + std::to_string(i));
  const double fire = 1.0 - spec.noise_rate;
  for (std::size_t u = 0; u < spec.n_users; ++u) {
    std::vector<std::size_t> pool = base_pool;
    if (taste < pool.size()) {
      for (std::size_t k = 0; k < taste; ++k) std::swap(pool[k], pool[k + rng.index(pool.size() - k)]);
      pool.resize(taste);
    }
    UserHistory history;
    history.user_index = u;
    std::vector<std::size_t> previous;
    for (std::size_t t = 0; t < spec.n_baskets_per_user; ++t) {
      const std::size_t size = spec.basket_min + rng.index(spec.basket_max - spec.basket_min + 1);
      std::vector<std::size_t> draw = pool;
      for (std::size_t k = 0; k < size; ++k) std::swap(draw[k], draw[k + rng.index(draw.size() - k)]);
      std::vector<std::size_t> items(draw.begin(), draw.begin() + static_cast<std::ptrdiff_t>(size));
      auto has = [](const std::vector<std::size_t>& v, std::size_t x) {
        return std::find(v.begin(), v.end(), x) != v.end();
      };
      for (auto [a, b] : spec.co_occur_pairs) {
        if (has(items, a) && rng.bernoulli(fire) && !has(items, b)) items.push_back(b);
      }
      for (auto [x, y] : spec.sequential_rules) {
        if (has(previous, x) && rng.bernoulli(fire) && !has(items, y)) items.push_back(y);
      }
      rng.shuffle(items);
      Basket basket;
      basket.time_index = t;
      for (std::size_t i : items) basket.items.push_back(Vocabulary::kFirstItem + static_cast<TokenId>(i));
      history.baskets.push_back(std::move(basket));
      previous = std::move(items);
    }
    corpus.users.push_back(std::move(history));
    corpus.user_ids.push_back("u" + std::to_string(u));
  }
  return split_corpus(std::move(corpus));
}

void write_baskets(std::ostream& out, const Corpus& corpus) {
  for (const UserHistory& h : corpus.users) {
    for (const Basket& b : h.baskets) {
      out << h.user_index << '\t' << b.time_index << '\t';
      for (std::size_t i = 0; i < b.items.size(); ++i) {
        if (i > 0) out << ',';
        out << b.items[i];
      }
      out << '\n';
    }
  }
}

void write_vocabulary(std::ostream& out, const Vocabulary& vocabulary) {
  for (std::size_t k = 0; k < vocabulary.catalog_size(); ++k) {
    const TokenId index = Vocabulary::kFirstItem + static_cast<TokenId>(k);
    out << index << '\t' << vocabulary.item(index) << '\n';
  }
}

void write_corpus(const std::filesystem::path& dir, const Corpus& corpus) {
  std::filesystem::create_directories(dir);
  auto open = [&](const char* name) {
    std::ofstream out(dir / name);
    require(static_cast<bool>(out), ErrorKind::kIo, "cannot write " + (dir / name).string());
    return out;
  };
  {
    auto out = open("baskets.tsv");
    write_baskets(out, corpus);
  }
  {
    auto out = open("vocab.tsv");
    write_vocabulary(out, corpus.vocabulary);
  }
  {
    auto out = open("users.tsv");
    for (std::size_t u = 0; u < corpus.users.size(); ++u) {
      out << corpus.users[u].user_index << '\t' << corpus.user_ids[u] << '\n';
    }
  }
}

Corpus read_corpus(const std::filesystem::path& dir) {
  auto open = [&](const char* name) {
    std::ifstream in(dir / name);
    require(static_cast<bool>(in), ErrorKind::kIo, "cannot read " + (dir / name).string());
    return in;
  };
  Corpus corpus;
  std::string line;
  {
    auto in = open("vocab.tsv");
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      const std::size_t tab = line.find('\t');
      require(tab != std::string::npos, ErrorKind::kValidation, "vocab.tsv: missing tab in '" + line + "'");
      const auto index = static_cast<TokenId>(parse_count(std::string_view(line).substr(0, tab), "index"));
      const TokenId got = corpus.vocabulary.add(line.substr(tab + 1));
      require(got == index, ErrorKind::kValidation,
              "vocab.tsv: expected index " + std::to_string(got) + ", file says " + std::to_string(index));
    }
  }
  {
    auto in = open("users.tsv");
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      const std::size_t tab = line.find('\t');
      require(tab != std::string::npos, ErrorKind::kValidation, "users.tsv: missing tab in '" + line + "'");
      const std::size_t index = parse_count(std::string_view(line).substr(0, tab), "user index");
      require(index == corpus.users.size(), ErrorKind::kValidation, "users.tsv: user indices must be dense and ordered");
      corpus.users.push_back({index, {}});
      corpus.user_ids.push_back(line.substr(tab + 1));
    }
  }
  {
    auto in = open("baskets.tsv");
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      const std::size_t t1 = line.find('\t');
      const std::size_t t2 = t1 == std::string::npos ? t1 : line.find('\t', t1 + 1);
      require(t2 != std::string::npos, ErrorKind::kValidation, "baskets.tsv: malformed line '" + line + "'");
      const std::string_view view(line);
      const std::size_t user = parse_count(view.substr(0, t1), "user index");
      require(user < corpus.users.size(), ErrorKind::kValidation,
              "baskets.tsv: unknown user index " + std::to_string(user));
      Basket basket;
      basket.time_index = parse_count(view.substr(t1 + 1, t2 - t1 - 1), "time index");
      std::string_view items = view.substr(t2 + 1);
      while (!items.empty()) {
        const std::size_t comma = items.find(',');
        const auto token = static_cast<TokenId>(parse_count(items.substr(0, comma), "item index"));
        require(corpus.vocabulary.is_item(token), ErrorKind::kValidation,
                "baskets.tsv: item index " + std::to_string(token) + " not in vocabulary");
        basket.items.push_back(token);
        if (comma == std::string_view::npos) break;
        items.remove_prefix(comma + 1);
      }
      require(!basket.items.empty(), ErrorKind::kValidation, "baskets.tsv: empty basket");
      auto& baskets = corpus.users[user].baskets;
      require(baskets.size() == basket.time_index, ErrorKind::kValidation,
              "baskets.tsv: baskets of user " + std::to_string(user) + " out of order");
      baskets.push_back(std::move(basket));
    }
  }
  return split_corpus(std::move(corpus));
}

}  // namespace iert
