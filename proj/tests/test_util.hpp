#pragma once

#include <string>
#include <vector>

#include "longrec/embedding.hpp"
#include "longrec/rng.hpp"
#include "longrec/schema.hpp"

namespace longrec::testutil {

// Small schema exercising every field family: one id field of the given
// width, one per-behavior cross field (completion bucket), one catalog
// numerical and the per-behavior completion scalar.
inline CatalogSchema tiny_schema(std::uint32_t vocab = 16, std::uint32_t id_dim = 4,
                                 std::uint32_t n_buckets = 10) {
  CatalogSchema s;
  s.categorical = {
      {"item_id", FieldKind::Id, vocab, id_dim, false},
      {"bucket", FieldKind::Cross, n_buckets, kCrossFieldDim, true},
  };
  s.numerical = {{"quality", false}, {"completion", true}};
  s.validate();
  return s;
}

inline Catalog tiny_catalog(const CatalogSchema& schema, std::uint64_t seed = 11) {
  Rng rng(seed);
  const auto vocab0 = schema.categorical[0].vocab;
  std::vector<ItemFeatures> items(vocab0);
  for (std::uint32_t i = 0; i < vocab0; ++i) {
    ItemFeatures& f = items[i];
    f.categorical.resize(schema.n_categorical());
    f.categorical[0] = i;
    for (std::size_t c = 1; c < schema.n_categorical(); ++c)
      f.categorical[c] =
          static_cast<std::uint32_t>(rng.uniform_index(schema.categorical[c].vocab));
    f.numerical.resize(schema.n_numerical());
    for (std::size_t n = 0; n < schema.n_numerical(); ++n)
      f.numerical[n] = schema.numerical[n].per_behavior ? 0.0 : rng.uniform(0.0, 10.0);
    items[i] = f;
  }
  return Catalog(schema, std::move(items));
}

// Behavior sequence cycling through the catalog with varied completion.
inline BehaviorSequence tiny_sequence(UserId user, std::size_t len, std::uint32_t vocab,
                                      std::uint64_t seed = 29) {
  Rng rng = Rng(seed).split(user);
  BehaviorSequence seq;
  seq.user_id = user;
  seq.records.reserve(len);
  for (std::size_t t = 0; t < len; ++t)
    seq.records.push_back({rng.uniform_index(vocab), rng.uniform(),
                           static_cast<std::int64_t>(t)});
  return seq;
}

}  // namespace longrec::testutil
