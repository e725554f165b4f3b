#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace longrec {

using ItemId = std::uint64_t;
using UserId = std::uint64_t;

// Categorical fields are either id-like ("inherent": properties of the item
// itself, independent of who watched it) or interaction-derived ("cross").
// Cross fields are always embedded with dimension 8 and projected per
// feature; id fields default to dimension 64.
enum class FieldKind { Id, Cross };

constexpr std::uint32_t kCrossFieldDim = 8;

struct CategoricalField {
  std::string name;
  FieldKind kind = FieldKind::Id;
  std::uint32_t vocab = 0;
  std::uint32_t dim = 0;
  // Value comes from the behavior record (completion-ratio bucket), not the
  // catalog row. The catalog still stores a default used for target items.
  bool per_behavior = false;
};

struct NumericalField {
  std::string name;
  // Behavior-supplied values (the completion ratio) are already in [0,1]
  // and skip min-max normalization.
  bool per_behavior = false;
};

struct CatalogSchema {
  std::vector<CategoricalField> categorical;
  std::vector<NumericalField> numerical;

  std::size_t n_categorical() const { return categorical.size(); }
  std::size_t n_numerical() const { return numerical.size(); }

  // Width of the inherent block (id-field embeddings, concatenated).
  std::size_t inherent_dim() const;
  // Number of cross fields J; the cross block is 8*J wide.
  std::size_t cross_count() const;
  std::size_t cross_dim() const { return kCrossFieldDim * cross_count(); }
  // Full item embedding: [id embeddings | cross embeddings | numericals].
  std::size_t embed_dim() const { return inherent_dim() + cross_dim() + n_numerical(); }

  // Throws config_error on malformed field declarations (zero vocab,
  // cross field with dim != 8, duplicate names).
  void validate() const;

  int field_index(const std::string& name) const;  // -1 if absent
  std::uint64_t fingerprint() const;               // stable content hash
};

// One item's raw feature record: one category index per categorical field,
// one scalar per numerical field.
struct ItemFeatures {
  std::vector<std::uint32_t> categorical;
  std::vector<double> numerical;

  bool operator==(const ItemFeatures&) const = default;
};

// Item ids are dense [0, size). Numericals are stored raw; min-max bounds
// per field are computed at load and applied by normalized_features().
class Catalog {
 public:
  Catalog() = default;
  Catalog(CatalogSchema schema, std::vector<ItemFeatures> items);

  const CatalogSchema& schema() const { return schema_; }
  std::size_t size() const { return items_.size(); }
  bool contains(ItemId id) const { return id < items_.size(); }

  const ItemFeatures& raw_features(ItemId id) const;

  // Raw features with numericals min-max normalized into [0,1]
  // (per-behavior fields pass through unscaled).
  ItemFeatures normalized_features(ItemId id) const;

  double num_min(std::size_t field) const { return num_min_[field]; }
  double num_max(std::size_t field) const { return num_max_[field]; }

 private:
  CatalogSchema schema_;
  std::vector<ItemFeatures> items_;
  std::vector<double> num_min_, num_max_;
};

struct BehaviorRecord {
  ItemId item_id = 0;
  double completion_ratio = 0.0;  // clamped to [0,1] on construction/load
  std::int64_t timestamp = 0;
};

struct BehaviorSequence {
  UserId user_id = 0;
  std::vector<BehaviorRecord> records;  // sorted by timestamp ascending

  std::size_t length() const { return records.size(); }
};

struct Impression {
  UserId user_id = 0;
  ItemId item_id = 0;
  std::int64_t timestamp = 0;
  std::uint8_t label = 0;  // 0/1
  bool is_test = false;
};

inline double clamp_completion(double p) {
  if (p < 0.0) return 0.0;
  if (p > 1.0) return 1.0;
  return p;
}

// Completion-ratio bucket index in [0, n_buckets): equal-width bins with the
// top edge closed.
inline std::uint32_t completion_bucket(double p, std::uint32_t n_buckets) {
  p = clamp_completion(p);
  auto b = static_cast<std::uint32_t>(p * n_buckets);
  return b >= n_buckets ? n_buckets - 1 : b;
}

// Behavior feature record: the catalog row with per-behavior fields filled
// from the record (cross bucket + completion scalar). Numericals normalized.
ItemFeatures resolve_behavior(const Catalog& catalog, const BehaviorRecord& rec);

}  // namespace longrec
