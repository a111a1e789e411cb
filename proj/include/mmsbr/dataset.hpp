#pragma once

// Interaction logs -> sessions -> chronological splits and price levels.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

namespace mmsbr::data {

using ItemId = std::int64_t;
using CategoryId = std::int64_t;

struct Interaction {
  std::string user_tag;
  ItemId item_id = 0;
  double timestamp = 0.0;  // seconds since epoch, UTC
  double price = 0.0;
  CategoryId category_id = 0;
};

/// Ordered events of one user within one UTC day. The last item is the
/// prediction target; everything before it is context.
struct Session {
  std::vector<ItemId> items;
  std::vector<double> prices;
  std::vector<CategoryId> categories;
  double end_time = 0.0;

  ItemId target() const { return items.back(); }
  std::size_t context_length() const { return items.size() - 1; }
};

struct CategoryPriceRange {
  CategoryId category_id = 0;
  double min = 0.0;
  double max = 0.0;
};

class EmptyCorpusError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class PriceOutOfRange : public std::out_of_range {
 public:
  using std::out_of_range::out_of_range;
};

/// floor((price - min) / (max - min) * rho), clamped to rho - 1; 0 when
/// max == min. Throws PriceOutOfRange outside [min, max] unless `clamp`.
int encode_price_level(double price, const CategoryPriceRange& range, int rho, bool clamp = false);

enum class FreqScope { all, train };

struct SessionOptions {
  std::size_t min_item_freq = 5;
  FreqScope freq_scope = FreqScope::all;
};

/// Groups by (user_tag, UTC day), orders by timestamp (stable), drops items
/// below the frequency threshold once, then drops sessions shorter than 2.
/// Output is sorted by end time; ties keep the order sessions were opened in.
std::vector<Session> build_sessions(const std::vector<Interaction>& interactions, const SessionOptions& options = {});

struct Split {
  std::vector<Session> train;
  std::vector<Session> val;
  std::vector<Session> test_raw;  // before unseen-item removal
  std::vector<Session> test;      // only items seen in train
};

struct SplitRatios {
  std::size_t train = 7, val = 2, test = 1;
};

/// Contiguous blocks of the time-ordered sessions. Sizes are
/// floor(N*train/sum), floor(N*val/sum) and the remainder.
Split split_chronological(const std::vector<Session>& sessions, SplitRatios ratios = {});

struct ColdStartSplit {
  std::vector<Session> sessions;  // every raw test session
  std::vector<ItemId> cold_items;  // sorted; absent from train
};

ColdStartSplit make_cold_start_variant(const std::vector<Session>& train, const std::vector<Session>& test_raw);

// ---------------------------------------------------------------------------
// Corpus: dense catalog indices for the model.

struct ItemRecord {
  ItemId item_id = 0;
  CategoryId category_id = 0;
  std::size_t category_index = 0;  // dense index into the category table
  double price = 0.0;
  int price_level = 0;
};

/// Session over catalog indices.
struct IndexedSession {
  std::vector<std::uint32_t> context;
  std::uint32_t target = 0;
};

struct SessionCorpus {
  std::vector<ItemRecord> items;  // sorted by item_id; position = catalog index
  std::vector<CategoryPriceRange> ranges;  // by category_index
  std::vector<IndexedSession> train, val, test, test_plus;
  std::vector<bool> seen_in_train;  // per catalog index
  std::vector<bool> cold;           // per catalog index, from the cold-start split
  int rho = 100;

  std::size_t n_items() const { return items.size(); }
  std::size_t n_categories() const { return ranges.size(); }
  std::size_t index_of(ItemId id) const;
  std::vector<std::size_t> train_item_indices() const;
};

struct CorpusOptions {
  SessionOptions sessions;
  SplitRatios ratios;
  int rho = 100;
  bool clamp_prices = true;  // cold items may fall outside train ranges
};

SessionCorpus build_corpus(const std::vector<Interaction>& interactions, const CorpusOptions& options = {});

// ---------------------------------------------------------------------------
// Files

/// CSV with header `user_tag,item_id,timestamp,price,category_id`.
std::vector<Interaction> read_interactions_csv(const std::filesystem::path& path);
void write_interactions_csv(const std::filesystem::path& path, const std::vector<Interaction>& rows);

/// sessions_{train,val,test,test_plus}.txt (space-separated item ids, last =
/// target) and items.csv `item_id,category_id,price,price_level`.
void write_manifest(const std::filesystem::path& dir, const SessionCorpus& corpus);

}  // namespace mmsbr::data
