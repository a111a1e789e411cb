#include "mmsbr/dataset.hpp"

#include <algorithm>
#include <array>
#include <charconv>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <set>
#include <sstream>
#include <unordered_map>
#include <unordered_set>

namespace mmsbr::data {

namespace {

std::string fmt_double(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

std::int64_t utc_day(double timestamp) { return static_cast<std::int64_t>(std::floor(timestamp / 86400.0)); }

std::vector<Session> group_sessions(const std::vector<Interaction>& interactions) {
  struct Key {
    std::string user;
    std::int64_t day;
    bool operator==(const Key&) const = default;
  };
  struct KeyHash {
    std::size_t operator()(const Key& k) const {
      return std::hash<std::string>{}(k.user) ^ (std::hash<std::int64_t>{}(k.day) * 0x9e3779b97f4a7c15ULL);
    }
  };
  std::unordered_map<Key, std::size_t, KeyHash> slot;
  std::vector<std::vector<std::size_t>> members;  // interaction indices, opening order
  for (std::size_t i = 0; i < interactions.size(); ++i) {
    const auto& it = interactions[i];
    if (!(it.price > 0.0) || !std::isfinite(it.price)) {
      throw std::invalid_argument("interaction " + std::to_string(i) + ": price must be positive and finite");
    }
    if (!std::isfinite(it.timestamp)) {
      throw std::invalid_argument("interaction " + std::to_string(i) + ": timestamp not finite");
    }
    Key k{it.user_tag, utc_day(it.timestamp)};
    auto [pos, inserted] = slot.try_emplace(k, members.size());
    if (inserted) members.emplace_back();
    members[pos->second].push_back(i);
  }
  std::vector<Session> sessions;
  sessions.reserve(members.size());
  for (auto& idx : members) {
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
      return interactions[a].timestamp < interactions[b].timestamp;
    });
    Session s;
    for (std::size_t i : idx) {
      s.items.push_back(interactions[i].item_id);
      s.prices.push_back(interactions[i].price);
      s.categories.push_back(interactions[i].category_id);
    }
    s.end_time = interactions[idx.back()].timestamp;
    sessions.push_back(std::move(s));
  }
  return sessions;
}

void sort_by_end_time(std::vector<Session>& sessions) {
  std::stable_sort(sessions.begin(), sessions.end(),
                   [](const Session& a, const Session& b) { return a.end_time < b.end_time; });
}

std::array<std::size_t, 3> split_sizes(std::size_t n, SplitRatios r) {
  const std::size_t total = r.train + r.val + r.test;
  if (total == 0) throw std::invalid_argument("split ratios sum to zero");
  const std::size_t n_train = n * r.train / total;
  const std::size_t n_val = n * r.val / total;
  return {n_train, n_val, n - n_train - n_val};
}

}  // namespace

int encode_price_level(double price, const CategoryPriceRange& range, int rho, bool clamp) {
  if (rho < 1) throw std::invalid_argument("rho must be >= 1");
  if (range.min > range.max) throw std::invalid_argument("price range min > max");
  if (price < range.min || price > range.max) {
    if (!clamp) {
      throw PriceOutOfRange("price " + fmt_double(price) + " outside category " +
                            std::to_string(range.category_id) + " range [" + fmt_double(range.min) + ", " +
                            fmt_double(range.max) + "]");
    }
    price = std::clamp(price, range.min, range.max);
  }
  if (range.max == range.min) return 0;
  const double level = std::floor((price - range.min) / (range.max - range.min) * rho);
  return std::clamp(static_cast<int>(level), 0, rho - 1);
}

std::vector<Session> build_sessions(const std::vector<Interaction>& interactions, const SessionOptions& options) {
  if (interactions.empty()) throw EmptyCorpusError("no interactions");
  std::vector<Session> raw = group_sessions(interactions);

  std::unordered_map<ItemId, std::size_t> freq;
  if (options.freq_scope == FreqScope::all) {
    for (const auto& it : interactions) ++freq[it.item_id];
  } else {
    std::vector<Session> ordered = raw;
    sort_by_end_time(ordered);
    const std::size_t n_train = split_sizes(ordered.size(), {}).at(0);
    for (std::size_t s = 0; s < n_train; ++s)
      for (ItemId id : ordered[s].items) ++freq[id];
  }

  std::vector<Session> kept;
  for (auto& s : raw) {
    Session f;
    for (std::size_t i = 0; i < s.items.size(); ++i) {
      auto it = freq.find(s.items[i]);
      if (it == freq.end() || it->second < options.min_item_freq) continue;
      f.items.push_back(s.items[i]);
      f.prices.push_back(s.prices[i]);
      f.categories.push_back(s.categories[i]);
    }
    if (f.items.size() < 2) continue;
    f.end_time = s.end_time;
    kept.push_back(std::move(f));
  }
  if (kept.empty()) throw EmptyCorpusError("no sessions of length >= 2 remain after filtering");
  sort_by_end_time(kept);
  return kept;
}

Split split_chronological(const std::vector<Session>& sessions, SplitRatios ratios) {
  if (sessions.size() < 3) {
    throw std::invalid_argument("split_chronological needs at least 3 sessions, got " + std::to_string(sessions.size()));
  }
  const auto [n_train, n_val, n_test] = split_sizes(sessions.size(), ratios);
  Split out;
  out.train.assign(sessions.begin(), sessions.begin() + static_cast<std::ptrdiff_t>(n_train));
  out.val.assign(sessions.begin() + static_cast<std::ptrdiff_t>(n_train),
                 sessions.begin() + static_cast<std::ptrdiff_t>(n_train + n_val));
  out.test_raw.assign(sessions.begin() + static_cast<std::ptrdiff_t>(n_train + n_val), sessions.end());
  std::unordered_set<ItemId> seen;
  for (const auto& s : out.train) seen.insert(s.items.begin(), s.items.end());
  for (const auto& s : out.test_raw) {
    if (std::all_of(s.items.begin(), s.items.end(), [&](ItemId id) { return seen.contains(id); }))
      out.test.push_back(s);
  }
  (void)n_test;
  return out;
}

ColdStartSplit make_cold_start_variant(const std::vector<Session>& train, const std::vector<Session>& test_raw) {
  std::unordered_set<ItemId> seen;
  for (const auto& s : train) seen.insert(s.items.begin(), s.items.end());
  std::set<ItemId> cold;
  for (const auto& s : test_raw)
    for (ItemId id : s.items)
      if (!seen.contains(id)) cold.insert(id);
  return {test_raw, std::vector<ItemId>(cold.begin(), cold.end())};
}

std::size_t SessionCorpus::index_of(ItemId id) const {
  auto it = std::lower_bound(items.begin(), items.end(), id,
                             [](const ItemRecord& r, ItemId v) { return r.item_id < v; });
  if (it == items.end() || it->item_id != id) throw std::out_of_range("item " + std::to_string(id) + " not in catalog");
  return static_cast<std::size_t>(it - items.begin());
}

std::vector<std::size_t> SessionCorpus::train_item_indices() const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < seen_in_train.size(); ++i)
    if (seen_in_train[i]) out.push_back(i);
  return out;
}

SessionCorpus build_corpus(const std::vector<Interaction>& interactions, const CorpusOptions& options) {
  const std::vector<Session> sessions = build_sessions(interactions, options.sessions);
  const Split split = split_chronological(sessions, options.ratios);
  const ColdStartSplit cold = make_cold_start_variant(split.train, split.test_raw);

  // Catalog: every item that survives filtering, with its category and mean price.
  struct Acc {
    CategoryId category = 0;
    double price_sum = 0.0;
    std::size_t count = 0;
  };
  std::map<ItemId, Acc> acc;
  for (const auto& s : sessions)
    for (std::size_t i = 0; i < s.items.size(); ++i) {
      Acc& a = acc[s.items[i]];
      if (a.count == 0) a.category = s.categories[i];
      a.price_sum += s.prices[i];
      ++a.count;
    }

  std::map<CategoryId, std::size_t> cat_index;
  for (const auto& [id, a] : acc) cat_index.emplace(a.category, 0);
  std::size_t next = 0;
  for (auto& [cat, idx] : cat_index) idx = next++;

  // Price ranges over training interactions, falling back to all interactions
  // for categories that never occur in train.
  std::vector<CategoryPriceRange> ranges(cat_index.size());
  std::vector<bool> has_train(cat_index.size(), false);
  for (const auto& [cat, idx] : cat_index) ranges[idx] = {cat, INFINITY, -INFINITY};
  auto widen = [&](const Session& s, bool train_pass) {
    for (std::size_t i = 0; i < s.items.size(); ++i) {
      const std::size_t idx = cat_index.at(s.categories[i]);
      if (!train_pass && has_train[idx]) continue;
      ranges[idx].min = std::min(ranges[idx].min, s.prices[i]);
      ranges[idx].max = std::max(ranges[idx].max, s.prices[i]);
    }
  };
  for (const auto& s : split.train) widen(s, true);
  for (std::size_t c = 0; c < ranges.size(); ++c) has_train[c] = std::isfinite(ranges[c].min);
  for (const auto& s : sessions) widen(s, false);

  SessionCorpus corpus;
  corpus.rho = options.rho;
  corpus.ranges = ranges;
  for (const auto& [id, a] : acc) {
    ItemRecord r;
    r.item_id = id;
    r.category_id = a.category;
    r.category_index = cat_index.at(a.category);
    r.price = a.price_sum / static_cast<double>(a.count);
    r.price_level = encode_price_level(r.price, ranges[r.category_index], options.rho, options.clamp_prices);
    corpus.items.push_back(r);
  }

  auto index_sessions = [&](const std::vector<Session>& in) {
    std::vector<IndexedSession> out;
    out.reserve(in.size());
    for (const auto& s : in) {
      IndexedSession is;
      for (std::size_t i = 0; i + 1 < s.items.size(); ++i)
        is.context.push_back(static_cast<std::uint32_t>(corpus.index_of(s.items[i])));
      is.target = static_cast<std::uint32_t>(corpus.index_of(s.target()));
      out.push_back(std::move(is));
    }
    return out;
  };
  corpus.train = index_sessions(split.train);
  corpus.val = index_sessions(split.val);
  corpus.test = index_sessions(split.test);
  corpus.test_plus = index_sessions(cold.sessions);

  corpus.seen_in_train.assign(corpus.items.size(), false);
  for (const auto& s : corpus.train) {
    for (auto i : s.context) corpus.seen_in_train[i] = true;
    corpus.seen_in_train[s.target] = true;
  }
  corpus.cold.assign(corpus.items.size(), false);
  for (ItemId id : cold.cold_items) corpus.cold[corpus.index_of(id)] = true;
  return corpus;
}

std::vector<Interaction> read_interactions_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::string line;
  if (!std::getline(in, line)) throw std::runtime_error(path.string() + ": empty file");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line != "user_tag,item_id,timestamp,price,category_id") {
    throw std::runtime_error(path.string() + ": unexpected header '" + line + "'");
  }
  std::vector<Interaction> rows;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) f.push_back(cell);
    if (f.size() != 5) {
      throw std::runtime_error(path.string() + ":" + std::to_string(lineno) + ": expected 5 fields, got " +
                               std::to_string(f.size()));
    }
    try {
      rows.push_back({f[0], std::stoll(f[1]), std::stod(f[2]), std::stod(f[3]), std::stoll(f[4])});
    } catch (const std::exception&) {
      throw std::runtime_error(path.string() + ":" + std::to_string(lineno) + ": unparseable field");
    }
  }
  return rows;
}

void write_interactions_csv(const std::filesystem::path& path, const std::vector<Interaction>& rows) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << "user_tag,item_id,timestamp,price,category_id\n";
  for (const auto& r : rows) {
    out << r.user_tag << ',' << r.item_id << ',' << fmt_double(r.timestamp) << ',' << fmt_double(r.price) << ','
        << r.category_id << '\n';
  }
}

void write_manifest(const std::filesystem::path& dir, const SessionCorpus& corpus) {
  std::filesystem::create_directories(dir);
  auto write_split = [&](const std::string& name, const std::vector<IndexedSession>& sessions) {
    std::ofstream out(dir / ("sessions_" + name + ".txt"));
    if (!out) throw std::runtime_error("cannot write manifest in " + dir.string());
    for (const auto& s : sessions) {
      for (auto i : s.context) out << corpus.items[i].item_id << ' ';
      out << corpus.items[s.target].item_id << '\n';
    }
  };
  write_split("train", corpus.train);
  write_split("val", corpus.val);
  write_split("test", corpus.test);
  write_split("test_plus", corpus.test_plus);
  std::ofstream items(dir / "items.csv");
  items << "item_id,category_id,price,price_level\n";
  for (const auto& r : corpus.items)
    items << r.item_id << ',' << r.category_id << ',' << fmt_double(r.price) << ',' << r.price_level << '\n';
}

}  // namespace mmsbr::data
