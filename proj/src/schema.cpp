#include "longrec/schema.hpp"

#include <cmath>
#include <unordered_set>

#include "longrec/errors.hpp"

namespace longrec {

std::size_t CatalogSchema::inherent_dim() const {
  std::size_t h = 0;
  for (const auto& f : categorical)
    if (f.kind == FieldKind::Id) h += f.dim;
  return h;
}

std::size_t CatalogSchema::cross_count() const {
  std::size_t j = 0;
  for (const auto& f : categorical)
    if (f.kind == FieldKind::Cross) ++j;
  return j;
}

void CatalogSchema::validate() const {
  std::unordered_set<std::string> names;
  for (const auto& f : categorical) {
    if (f.name.empty()) throw config_error("schema: categorical field with empty name");
    if (!names.insert(f.name).second)
      throw config_error("schema: duplicate field name '" + f.name + "'");
    if (f.vocab == 0) throw config_error("schema: field '" + f.name + "' has vocab 0");
    if (f.dim == 0) throw config_error("schema: field '" + f.name + "' has dim 0");
    if (f.kind == FieldKind::Cross && f.dim != kCrossFieldDim)
      throw config_error("schema: cross field '" + f.name + "' must have dim 8");
    if (f.per_behavior && f.kind != FieldKind::Cross)
      throw config_error("schema: per-behavior categorical '" + f.name + "' must be a cross field");
  }
  for (const auto& f : numerical) {
    if (f.name.empty()) throw config_error("schema: numerical field with empty name");
    if (!names.insert(f.name).second)
      throw config_error("schema: duplicate field name '" + f.name + "'");
  }
}

int CatalogSchema::field_index(const std::string& name) const {
  for (std::size_t i = 0; i < categorical.size(); ++i)
    if (categorical[i].name == name) return static_cast<int>(i);
  return -1;
}

namespace {
inline std::uint64_t mix64(std::uint64_t h, std::uint64_t v) {
  h ^= v + 0x9e3779b97f4a7c15ULL + (h << 6) + (h >> 2);
  return h;
}
inline std::uint64_t hash_str(std::uint64_t h, const std::string& s) {
  for (unsigned char c : s) h = mix64(h, c);
  return mix64(h, 0xffULL);
}
}  // namespace

std::uint64_t CatalogSchema::fingerprint() const {
  std::uint64_t h = 0x5165435331ULL;
  for (const auto& f : categorical) {
    h = hash_str(h, f.name);
    h = mix64(h, f.kind == FieldKind::Id ? 1 : 2);
    h = mix64(h, f.vocab);
    h = mix64(h, f.dim);
    h = mix64(h, f.per_behavior ? 1 : 0);
  }
  h = mix64(h, 0xabcdULL);
  for (const auto& f : numerical) {
    h = hash_str(h, f.name);
    h = mix64(h, f.per_behavior ? 1 : 0);
  }
  return h;
}

Catalog::Catalog(CatalogSchema schema, std::vector<ItemFeatures> items)
    : schema_(std::move(schema)), items_(std::move(items)) {
  schema_.validate();
  const std::size_t n1 = schema_.n_categorical();
  const std::size_t n2 = schema_.n_numerical();
  for (std::size_t id = 0; id < items_.size(); ++id) {
    const auto& it = items_[id];
    if (it.categorical.size() != n1 || it.numerical.size() != n2)
      throw data_error("catalog: item " + std::to_string(id) + " has wrong field count");
    for (std::size_t f = 0; f < n1; ++f)
      if (it.categorical[f] >= schema_.categorical[f].vocab)
        throw data_error("catalog: item " + std::to_string(id) + " field '" +
                         schema_.categorical[f].name + "' index out of vocabulary");
    for (double v : it.numerical)
      if (!std::isfinite(v))
        throw data_error("catalog: item " + std::to_string(id) + " has non-finite numerical");
  }
  num_min_.assign(n2, 0.0);
  num_max_.assign(n2, 0.0);
  for (std::size_t f = 0; f < n2; ++f) {
    double lo = std::numeric_limits<double>::infinity();
    double hi = -lo;
    for (const auto& it : items_) {
      lo = std::min(lo, it.numerical[f]);
      hi = std::max(hi, it.numerical[f]);
    }
    if (items_.empty()) lo = hi = 0.0;
    num_min_[f] = lo;
    num_max_[f] = hi;
  }
}

const ItemFeatures& Catalog::raw_features(ItemId id) const {
  if (!contains(id)) throw data_error("catalog: unknown item id " + std::to_string(id));
  return items_[id];
}

ItemFeatures Catalog::normalized_features(ItemId id) const {
  ItemFeatures f = raw_features(id);
  for (std::size_t i = 0; i < f.numerical.size(); ++i) {
    if (schema_.numerical[i].per_behavior) {
      f.numerical[i] = clamp_completion(f.numerical[i]);
      continue;
    }
    const double lo = num_min_[i], hi = num_max_[i];
    f.numerical[i] = hi > lo ? (f.numerical[i] - lo) / (hi - lo) : 0.0;
  }
  return f;
}

ItemFeatures resolve_behavior(const Catalog& catalog, const BehaviorRecord& rec) {
  ItemFeatures f = catalog.normalized_features(rec.item_id);
  const auto& schema = catalog.schema();
  const double p = clamp_completion(rec.completion_ratio);
  for (std::size_t i = 0; i < schema.categorical.size(); ++i)
    if (schema.categorical[i].per_behavior)
      f.categorical[i] = completion_bucket(p, schema.categorical[i].vocab);
  for (std::size_t i = 0; i < schema.numerical.size(); ++i)
    if (schema.numerical[i].per_behavior) f.numerical[i] = p;
  return f;
}

}  // namespace longrec
