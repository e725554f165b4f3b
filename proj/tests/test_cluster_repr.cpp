#include <doctest.h>

#include <Eigen/Dense>
#include <algorithm>
#include <vector>

#include "longrec/cluster_repr.hpp"
#include "longrec/compressor.hpp"
#include "longrec/embedding.hpp"
#include "longrec/errors.hpp"
#include "test_util.hpp"

using namespace longrec;

namespace {

struct Fixture {
  CatalogSchema schema = testutil::tiny_schema(16, 4);
  Catalog catalog = testutil::tiny_catalog(schema);
  EmbeddingTable tables = EmbeddingTable::init(schema, Rng(13));
  EmbedLayout layout = EmbedLayout::of(schema);

  BehaviorSequence seq;
  RowMatrixXd emb;

  explicit Fixture(std::size_t len = 10, std::uint64_t seed = 21) {
    seq = testutil::tiny_sequence(1, len, 16, seed);
    emb = embed_behaviors(seq, catalog, tables);
  }

  Cluster cluster_of(std::vector<std::int64_t> rows) const {
    Cluster c;
    c.member_rows = rows;
    for (auto r : rows) c.member_ids.push_back(seq.records[static_cast<std::size_t>(r)].item_id);
    c.group_id = 1;
    c.centroid = Eigen::VectorXd::Zero(emb.cols());
    for (auto r : rows) c.centroid += emb.row(r).transpose();
    c.centroid /= static_cast<double>(rows.size());
    return c;
  }
};

}  // namespace

TEST_CASE("numerical_repr of [1,3] and [3,5] rows is [2,4]") {
  CatalogSchema s;
  s.categorical = {{"id", FieldKind::Id, 4, 2, false}};
  s.numerical = {{"a", true}, {"b", true}};  // per-behavior: no normalization
  s.validate();
  RowMatrixXd emb(2, 4);
  emb << 0.0, 0.0, 1.0, 3.0,
         0.0, 0.0, 3.0, 5.0;
  Cluster c;
  c.member_ids = {0, 1};
  c.member_rows = {0, 1};
  c.centroid = emb.colwise().mean().transpose();
  const Eigen::VectorXd mean = numerical_repr(c, emb, EmbedLayout::of(s));
  REQUIRE(mean.size() == 2);
  CHECK(mean(0) == 2.0);
  CHECK(mean(1) == 4.0);
}

TEST_CASE("numerical_repr matches a summation oracle on a 10-member cluster") {
  Fixture fx(10);
  const Cluster c = fx.cluster_of({0, 1, 2, 3, 4, 5, 6, 7, 8, 9});
  const Eigen::VectorXd mean = numerical_repr(c, fx.emb, fx.layout);
  REQUIRE(mean.size() == static_cast<Eigen::Index>(fx.layout.numerical_dim));
  for (Eigen::Index d = 0; d < mean.size(); ++d) {
    double sum = 0.0;
    double lo = std::numeric_limits<double>::infinity(), hi = -lo;
    for (auto r : c.member_rows) {
      const double v = fx.emb(r, static_cast<Eigen::Index>(fx.layout.inherent_dim +
                                                           fx.layout.cross_dim) + d);
      sum += v;
      lo = std::min(lo, v);
      hi = std::max(hi, v);
    }
    CHECK(mean(d) == doctest::Approx(sum / 10.0).epsilon(1e-9));
    CHECK(mean(d) >= lo - 1e-12);
    CHECK(mean(d) <= hi + 1e-12);
  }
}

TEST_CASE("numerical_repr rejects an empty cluster") {
  Fixture fx(3);
  Cluster c;
  CHECK_THROWS_AS(numerical_repr(c, fx.emb, fx.layout), Error);
}

TEST_CASE("categorical_repr picks the member nearest the centroid") {
  Fixture fx(8);
  const Cluster c = fx.cluster_of({0, 1, 2, 3, 4, 5, 6, 7});
  const auto [cats, donor] = categorical_repr(c, fx.emb, fx.seq, fx.catalog);

  double best = std::numeric_limits<double>::infinity();
  std::int64_t best_row = -1;
  ItemId best_id = 0;
  for (std::size_t i = 0; i < c.member_rows.size(); ++i) {
    const double d = (fx.emb.row(c.member_rows[i]).transpose() - c.centroid).squaredNorm();
    if (d < best || (d == best && c.member_ids[i] < best_id)) {
      best = d;
      best_row = c.member_rows[i];
      best_id = c.member_ids[i];
    }
  }
  CHECK(donor == best_id);
  CHECK(cats == resolve_behavior(fx.catalog, fx.seq.records[static_cast<std::size_t>(best_row)])
                    .categorical);
  CHECK(std::find(c.member_ids.begin(), c.member_ids.end(), donor) != c.member_ids.end());
}

TEST_CASE("categorical_repr ties resolve to the lowest item id") {
  Fixture fx(1);
  // Three identical records of different items: all sit on the centroid.
  fx.seq.records = {{7, 0.5, 0}, {3, 0.5, 1}, {9, 0.5, 2}};
  fx.emb = RowMatrixXd::Zero(3, static_cast<Eigen::Index>(fx.schema.embed_dim()));
  for (int r = 0; r < 3; ++r) fx.emb.row(r).setConstant(2.0);
  const Cluster c = fx.cluster_of({0, 1, 2});
  const auto [cats, donor] = categorical_repr(c, fx.emb, fx.seq, fx.catalog);
  CHECK(donor == 3);
  CHECK(cats == resolve_behavior(fx.catalog, fx.seq.records[1]).categorical);
}

TEST_CASE("a singleton cluster's virtual item is the member itself") {
  Fixture fx(6);
  CompressedHistory hist;
  hist.user_id = fx.seq.user_id;
  hist.source_length = fx.seq.length();
  for (std::int64_t r = 0; r < 6; ++r) hist.clusters.push_back(fx.cluster_of({r}));
  const auto items = build_virtual_items(hist, fx.seq, fx.catalog, fx.emb);
  REQUIRE(items.size() == 6);
  for (std::size_t i = 0; i < items.size(); ++i) {
    const ItemFeatures f = resolve_behavior(fx.catalog, fx.seq.records[i]);
    CHECK(items[i].categorical == f.categorical);
    CHECK(items[i].source_item_id == fx.seq.records[i].item_id);
    REQUIRE(items[i].numerical.size() == static_cast<Eigen::Index>(f.numerical.size()));
    for (Eigen::Index d = 0; d < items[i].numerical.size(); ++d)
      CHECK(items[i].numerical(d) == doctest::Approx(f.numerical[d]).epsilon(1e-12));
  }
}

TEST_CASE("build_virtual_items: empty history, order, and invariants") {
  Fixture fx(40, 5);
  CompressedHistory empty;
  CHECK(build_virtual_items(empty, fx.seq, fx.catalog, fx.emb).empty());

  CompressorConfig cfg;
  cfg.max_cluster_size = 5;  // force several clusters from 40 records
  const CompressedHistory hist = compress(fx.seq, fx.emb, cfg);
  const auto items = build_virtual_items(hist, fx.seq, fx.catalog, fx.emb);
  REQUIRE(items.size() == hist.compressed_length());
  for (std::size_t i = 0; i < items.size(); ++i) {
    const Cluster& c = hist.clusters[i];
    CHECK(std::find(c.member_ids.begin(), c.member_ids.end(), items[i].source_item_id) !=
          c.member_ids.end());
    for (Eigen::Index d = 0; d < items[i].numerical.size(); ++d) {
      double lo = std::numeric_limits<double>::infinity(), hi = -lo;
      for (auto r : c.member_rows) {
        const double v = fx.emb(r, static_cast<Eigen::Index>(fx.layout.inherent_dim +
                                                             fx.layout.cross_dim) + d);
        lo = std::min(lo, v);
        hi = std::max(hi, v);
      }
      CHECK(items[i].numerical(d) >= lo - 1e-12);
      CHECK(items[i].numerical(d) <= hi + 1e-12);
    }
  }
}

TEST_CASE("embed_virtual_item lays out like embed_item with averaged numericals") {
  Fixture fx(5);
  const Cluster c = fx.cluster_of({0, 1, 2, 3, 4});
  CompressedHistory hist;
  hist.source_length = 5;
  hist.clusters = {c};
  const auto items = build_virtual_items(hist, fx.seq, fx.catalog, fx.emb);
  REQUIRE(items.size() == 1);
  const Eigen::VectorXd v = embed_virtual_item(items[0], fx.schema, fx.tables);
  REQUIRE(v.size() == static_cast<Eigen::Index>(fx.schema.embed_dim()));
  CHECK(v.head(fx.layout.inherent_dim).transpose() ==
        fx.tables.field(0).row(items[0].categorical[0]));
  CHECK(v.segment(fx.layout.inherent_dim, fx.layout.cross_dim).transpose() ==
        fx.tables.field(1).row(items[0].categorical[1]));
  CHECK(v.tail(fx.layout.numerical_dim) == items[0].numerical);
}
