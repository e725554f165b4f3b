#include <doctest.h>

#include <Eigen/Dense>
#include <cmath>
#include <set>

#include "longrec/embedding.hpp"
#include "longrec/errors.hpp"
#include "longrec/rng.hpp"
#include "longrec/schema.hpp"
#include "test_util.hpp"

using namespace longrec;

TEST_CASE("schema dims: one 64-dim id field, one cross field, two numericals add to 74") {
  CatalogSchema s;
  s.categorical = {{"vid", FieldKind::Id, 100, 64, false},
                   {"bucket", FieldKind::Cross, 10, kCrossFieldDim, true}};
  s.numerical = {{"a", false}, {"b", true}};
  s.validate();
  CHECK(s.inherent_dim() == 64);
  CHECK(s.cross_count() == 1);
  CHECK(s.cross_dim() == 8);
  CHECK(s.embed_dim() == 74);
  const EmbedLayout layout = EmbedLayout::of(s);
  CHECK(layout.inherent_dim == 64);
  CHECK(layout.cross_dim == 8);
  CHECK(layout.numerical_dim == 2);
  CHECK(layout.total() == 74);
}

TEST_CASE("schema validation rejects malformed declarations") {
  CatalogSchema s = testutil::tiny_schema();
  SUBCASE("zero vocab") {
    s.categorical[0].vocab = 0;
    CHECK_THROWS_AS(s.validate(), Error);
  }
  SUBCASE("cross field with dim != 8") {
    s.categorical[1].dim = 4;
    CHECK_THROWS_AS(s.validate(), Error);
  }
  SUBCASE("duplicate names") {
    s.categorical[1].name = s.categorical[0].name;
    CHECK_THROWS_AS(s.validate(), Error);
  }
}

TEST_CASE("schema fingerprint tracks content") {
  const CatalogSchema a = testutil::tiny_schema();
  CatalogSchema b = testutil::tiny_schema();
  CHECK(a.fingerprint() == b.fingerprint());
  b.categorical[0].vocab += 1;
  CHECK(a.fingerprint() != b.fingerprint());
}

TEST_CASE("embed_item: zero tables and zero numericals give the zero vector") {
  const CatalogSchema s = testutil::tiny_schema();
  EmbeddingTable tables = EmbeddingTable::init(s, Rng(1));
  for (auto& f : tables.fields) f.setZero();
  ItemFeatures feats;
  feats.categorical = {3, 2};
  feats.numerical = {0.0, 0.0};
  const Eigen::VectorXd v = embed_item(feats, s, tables);
  CHECK(v.size() == static_cast<Eigen::Index>(s.embed_dim()));
  CHECK(v.norm() == 0.0);
}

TEST_CASE("embed_item: identical features embed identically, layout is [id|cross|num]") {
  const CatalogSchema s = testutil::tiny_schema();
  const EmbeddingTable tables = EmbeddingTable::init(s, Rng(5));
  ItemFeatures feats;
  feats.categorical = {7, 4};
  feats.numerical = {0.25, 0.75};
  const Eigen::VectorXd a = embed_item(feats, s, tables);
  const Eigen::VectorXd b = embed_item(feats, s, tables);
  CHECK(a == b);
  const EmbedLayout layout = EmbedLayout::of(s);
  CHECK(a.head(layout.inherent_dim).transpose() == tables.field(0).row(7));
  CHECK(a.segment(layout.inherent_dim, layout.cross_dim).transpose() == tables.field(1).row(4));
  CHECK(a(layout.inherent_dim + layout.cross_dim) == 0.25);
  CHECK(a(layout.inherent_dim + layout.cross_dim + 1) == 0.75);
}

TEST_CASE("embed_item: index outside vocabulary throws") {
  const CatalogSchema s = testutil::tiny_schema(16);
  const EmbeddingTable tables = EmbeddingTable::init(s, Rng(5));
  ItemFeatures feats;
  feats.categorical = {16, 0};
  feats.numerical = {0.0, 0.0};
  CHECK_THROWS_AS(embed_item(feats, s, tables), Error);
}

TEST_CASE("embedding init stays within +-1/sqrt(dim) per field") {
  const CatalogSchema s = testutil::tiny_schema(32, 16);
  const EmbeddingTable tables = EmbeddingTable::init(s, Rng(9));
  REQUIRE(tables.fields.size() == s.n_categorical());
  for (std::size_t f = 0; f < tables.fields.size(); ++f) {
    const auto& m = tables.fields[f];
    CHECK(m.rows() == s.categorical[f].vocab);
    CHECK(m.cols() == s.categorical[f].dim);
    const double bound = 1.0 / std::sqrt(static_cast<double>(s.categorical[f].dim));
    CHECK(m.maxCoeff() <= bound);
    CHECK(m.minCoeff() >= -bound);
    CHECK(m.cwiseAbs().maxCoeff() > 0.0);
  }
}

TEST_CASE("cosine: identity, antipodal, orthogonal, symmetry") {
  Eigen::VectorXd v(3);
  v << 1.0, -2.0, 0.5;
  CHECK(cosine(v, v) == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(cosine(v, Eigen::VectorXd(-v)) == doctest::Approx(-1.0).epsilon(1e-12));
  Eigen::VectorXd e1(2), e2(2);
  e1 << 1.0, 0.0;
  e2 << 0.0, 1.0;
  CHECK(cosine(e1, e2) == 0.0);
  Rng rng(17);
  for (int t = 0; t < 50; ++t) {
    Eigen::VectorXd a(5), b(5);
    for (int i = 0; i < 5; ++i) {
      a(i) = rng.normal();
      b(i) = rng.normal();
    }
    const double ab = cosine(a, b);
    CHECK(ab == cosine(b, a));
    CHECK(std::abs(ab) <= 1.0 + 1e-12);
  }
}

TEST_CASE("cosine flags near-zero norms as degenerate instead of dividing") {
  Eigen::VectorXd z = Eigen::VectorXd::Zero(4);
  Eigen::VectorXd v = Eigen::VectorXd::Ones(4);
  bool degenerate = false;
  CHECK(cosine(z, v, &degenerate) == 0.0);
  CHECK(degenerate);
  degenerate = false;
  CHECK(cosine(v, z, &degenerate) == 0.0);
  CHECK(degenerate);
  degenerate = true;
  cosine(v, v, &degenerate);
  CHECK_FALSE(degenerate);
}

TEST_CASE("catalog normalizes numericals to [0,1], per-behavior fields pass through") {
  const CatalogSchema s = testutil::tiny_schema();
  std::vector<ItemFeatures> items = {{{0, 0}, {2.0, 0.4}},
                                     {{1, 0}, {4.0, 0.9}},
                                     {{2, 0}, {6.0, 0.1}}};
  const Catalog cat(s, items);
  CHECK(cat.num_min(0) == 2.0);
  CHECK(cat.num_max(0) == 6.0);
  CHECK(cat.normalized_features(0).numerical[0] == doctest::Approx(0.0));
  CHECK(cat.normalized_features(1).numerical[0] == doctest::Approx(0.5));
  CHECK(cat.normalized_features(2).numerical[0] == doctest::Approx(1.0));
  CHECK(cat.normalized_features(1).numerical[1] == 0.9);
  CHECK(cat.raw_features(1).numerical[0] == 4.0);
}

TEST_CASE("completion_bucket uses equal-width bins with a closed top edge") {
  CHECK(completion_bucket(0.0, 10) == 0);
  CHECK(completion_bucket(0.09, 10) == 0);
  CHECK(completion_bucket(0.1, 10) == 1);
  CHECK(completion_bucket(0.95, 10) == 9);
  CHECK(completion_bucket(1.0, 10) == 9);
  CHECK(completion_bucket(1.7, 10) == 9);
  CHECK(completion_bucket(-0.2, 10) == 0);
}

TEST_CASE("resolve_behavior fills per-behavior fields from the record") {
  const CatalogSchema s = testutil::tiny_schema(16, 4, 10);
  const Catalog cat = testutil::tiny_catalog(s);
  BehaviorRecord rec{5, 0.73, 100};
  const ItemFeatures f = resolve_behavior(cat, rec);
  CHECK(f.categorical[0] == 5);
  CHECK(f.categorical[1] == completion_bucket(0.73, 10));
  CHECK(f.numerical[1] == 0.73);
  CHECK(f.numerical[0] == cat.normalized_features(5).numerical[0]);
}

TEST_CASE("embed_behaviors produces one row per record") {
  const CatalogSchema s = testutil::tiny_schema();
  const Catalog cat = testutil::tiny_catalog(s);
  const EmbeddingTable tables = EmbeddingTable::init(s, Rng(3));
  const BehaviorSequence seq = testutil::tiny_sequence(1, 12, 16);
  const RowMatrixXd m = embed_behaviors(seq, cat, tables);
  REQUIRE(m.rows() == 12);
  CHECK(m.cols() == static_cast<Eigen::Index>(s.embed_dim()));
  const Eigen::VectorXd row3 = embed_item(resolve_behavior(cat, seq.records[3]), s, tables);
  CHECK(m.row(3).transpose() == row3);
}

TEST_CASE("rng: same seed replays, split streams ignore parent consumption") {
  Rng a(42), b(42);
  for (int i = 0; i < 100; ++i) CHECK(a.next_u64() == b.next_u64());

  Rng parent1(7), parent2(7);
  for (int i = 0; i < 13; ++i) parent2.next_u64();
  Rng c1 = parent1.split(3), c2 = parent2.split(3);
  for (int i = 0; i < 20; ++i) CHECK(c1.next_u64() == c2.next_u64());

  Rng d1 = parent1.split(4);
  Rng d2 = parent1.split(3);
  CHECK(d1.next_u64() != d2.next_u64());
}

TEST_CASE("rng: uniform in [0,1), uniform_index in range, normal is finite") {
  Rng rng(123);
  double lo = 1.0, hi = 0.0;
  for (int i = 0; i < 10000; ++i) {
    const double u = rng.uniform();
    CHECK(u >= 0.0);
    CHECK(u < 1.0);
    lo = std::min(lo, u);
    hi = std::max(hi, u);
  }
  CHECK(lo < 0.05);
  CHECK(hi > 0.95);
  std::set<std::uint64_t> seen;
  for (int i = 0; i < 1000; ++i) {
    const std::uint64_t x = rng.uniform_index(7);
    CHECK(x < 7);
    seen.insert(x);
  }
  CHECK(seen.size() == 7);
  for (int i = 0; i < 100; ++i) CHECK(std::isfinite(rng.normal()));
}

TEST_CASE("clamp_completion clamps into [0,1]") {
  CHECK(clamp_completion(-0.5) == 0.0);
  CHECK(clamp_completion(0.0) == 0.0);
  CHECK(clamp_completion(0.3) == 0.3);
  CHECK(clamp_completion(1.0) == 1.0);
  CHECK(clamp_completion(2.5) == 1.0);
}
