#include <doctest.h>

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <string>
#include <vector>

#include "longrec/cluster_repr.hpp"
#include "longrec/compressor.hpp"
#include "longrec/datagen.hpp"
#include "longrec/embedding.hpp"
#include "longrec/errors.hpp"
#include "longrec/io.hpp"
#include "longrec/model.hpp"

using namespace longrec;

namespace {

const std::string kGolden = LONGREC_GOLDEN_DIR "/";

std::string tmp_path(const std::string& name) {
  static const std::filesystem::path dir = [] {
    auto d = std::filesystem::temp_directory_path() / "longrec_io_tests";
    std::filesystem::create_directories(d);
    return d;
  }();
  return (dir / name).string();
}

// The schema every golden file was written with.
CatalogSchema golden_schema() {
  CatalogSchema schema;
  schema.categorical = {
      {"item_id", FieldKind::Id, 4, 4, false},
      {"bucket", FieldKind::Cross, 3, 8, true},
  };
  schema.numerical = {{"quality", false}, {"completion", true}};
  return schema;
}

bool bits_equal(double a, double b) { return std::memcmp(&a, &b, sizeof(double)) == 0; }

bool same_matrix_bits(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) return false;
  return std::memcmp(a.data(), b.data(), sizeof(double) * static_cast<std::size_t>(a.size())) == 0;
}

bool same_row_matrix_bits(const RowMatrixXd& a, const RowMatrixXd& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) return false;
  return std::memcmp(a.data(), b.data(), sizeof(double) * static_cast<std::size_t>(a.size())) == 0;
}

// Stored-bytes fixed point: loading and re-storing an artifact must
// reproduce the file exactly.
template <typename Load, typename Store>
void check_restore_identity(const std::string& path, Load load, Store store) {
  const std::string original = read_file(path);
  auto value = load(path);
  const std::string copy = tmp_path("restore.tmp");
  store(value, copy);
  CHECK(read_file(copy) == original);
}

ClusterStore small_store() {
  ClusterStore store;
  store.config_json = "{\"gamma\":2}";
  store.schema_fingerprint = golden_schema().fingerprint();
  store.embed_seed = 7;
  ClusterStoreEntry e;
  e.hist.user_id = 0;
  e.hist.source_length = 3;
  Cluster c1;
  c1.member_ids = {0, 2};
  c1.member_rows = {0, 1};
  c1.group_id = 1;
  c1.centroid = Eigen::Vector2d(0.5, -0.25);
  Cluster c2;
  c2.member_ids = {1};
  c2.member_rows = {2};
  c2.group_id = 2;
  c2.centroid = Eigen::Vector2d(1.0, 2.0);
  e.hist.clusters = {c1, c2};
  VirtualItem v1;
  v1.categorical = {0, 1};
  v1.numerical = Eigen::Vector2d(0.3, 0.6);
  v1.source_item_id = 0;
  VirtualItem v2;
  v2.categorical = {1, 2};
  v2.numerical = Eigen::Vector2d(0.9, 1.0);
  v2.source_item_id = 1;
  e.items = {v1, v2};
  store.entries = {e};
  return store;
}

}  // namespace

TEST_CASE("golden catalog parses to the pinned content and re-stores byte-identically") {
  std::string config;
  const Catalog catalog = load_catalog(kGolden + "catalog.tsv", &config);
  CHECK(config == "{\"tool\":\"golden\"}");
  CHECK(catalog.schema().fingerprint() == golden_schema().fingerprint());
  REQUIRE(catalog.size() == 4);
  for (std::uint32_t i = 0; i < 4; ++i) {
    const ItemFeatures& f = catalog.raw_features(i);
    CHECK(f.categorical == std::vector<std::uint32_t>{i, i % 3});
    CHECK(bits_equal(f.numerical[0], 0.25 * i));
    CHECK(bits_equal(f.numerical[1], 0.5));
  }
  check_restore_identity(
      kGolden + "catalog.tsv", [](const std::string& p) { return load_catalog(p); },
      [&config](const Catalog& c, const std::string& p) { store_catalog(c, p, config); });
}

TEST_CASE("golden behaviors parse to the pinned content, cold user included") {
  const auto seqs = load_behaviors(kGolden + "behaviors.tsv");
  REQUIRE(seqs.size() == 2);
  CHECK(seqs[0].user_id == 0);
  REQUIRE(seqs[0].records.size() == 3);
  CHECK(seqs[0].records[0].item_id == 0);
  CHECK(bits_equal(seqs[0].records[0].completion_ratio, 0.125));
  CHECK(seqs[0].records[0].timestamp == 100);
  CHECK(seqs[0].records[2].timestamp == 190);
  CHECK(seqs[1].user_id == 1);
  CHECK(seqs[1].records.empty());
  check_restore_identity(
      kGolden + "behaviors.tsv", [](const std::string& p) { return load_behaviors(p); },
      [](const std::vector<BehaviorSequence>& s, const std::string& p) {
        store_behaviors(s, p);
      });
}

TEST_CASE("golden impressions parse to the pinned content") {
  const auto imps = load_impressions(kGolden + "impressions.tsv");
  REQUIRE(imps.size() == 3);
  CHECK(imps[0].user_id == 0);
  CHECK(imps[0].item_id == 1);
  CHECK(imps[0].timestamp == 1000);
  CHECK(imps[0].label == 1);
  CHECK_FALSE(imps[0].is_test);
  CHECK(imps[2].is_test);
  check_restore_identity(
      kGolden + "impressions.tsv", [](const std::string& p) { return load_impressions(p); },
      [](const std::vector<Impression>& s, const std::string& p) { store_impressions(s, p); });
}

TEST_CASE("golden cluster store parses to the pinned content") {
  const ClusterStore store = load_clusters(kGolden + "clusters.bin");
  CHECK(store.config_json == "{\"gamma\":2}");
  CHECK(store.schema_fingerprint == golden_schema().fingerprint());
  CHECK(store.embed_seed == 7);
  REQUIRE(store.entries.size() == 1);
  const ClusterStoreEntry& e = store.entries[0];
  CHECK(e.hist.user_id == 0);
  CHECK(e.hist.source_length == 3);
  REQUIRE(e.hist.clusters.size() == 2);
  CHECK(e.hist.clusters[0].member_ids == std::vector<ItemId>{0, 2});
  CHECK(e.hist.clusters[0].member_rows == std::vector<std::int64_t>{0, 1});
  CHECK(e.hist.clusters[0].group_id == 1);
  CHECK(bits_equal(e.hist.clusters[0].centroid(0), 0.5));
  CHECK(bits_equal(e.hist.clusters[0].centroid(1), -0.25));
  CHECK(e.hist.clusters[1].member_ids == std::vector<ItemId>{1});
  REQUIRE(e.items.size() == 2);
  CHECK(e.items[0].categorical == std::vector<std::uint32_t>{0, 1});
  CHECK(bits_equal(e.items[0].numerical(1), 0.6));
  CHECK(e.items[1].source_item_id == 1);
  check_restore_identity(
      kGolden + "clusters.bin", [](const std::string& p) { return load_clusters(p); },
      [](const ClusterStore& s, const std::string& p) { store_clusters(s, p); });
}

TEST_CASE("golden model equals a fresh init with the same seed, bit for bit") {
  std::string config;
  const CtrModel loaded = load_model(kGolden + "model.bin", &config);
  CHECK(config == "{\"tool\":\"golden\"}");

  ModelConfig mc;
  mc.d_k = 3;
  mc.d_v = 3;
  mc.d_out = 4;
  mc.d_user = 2;
  mc.n_heads = 2;
  mc.gsu_k = 3;
  mc.recent_len = 3;
  mc.mlp_widths = {5, 3};
  mc.init_seed = 2;
  const CtrModel fresh = CtrModel::init(golden_schema(), 2, mc);

  REQUIRE(loaded.tables.fields.size() == fresh.tables.fields.size());
  for (std::size_t f = 0; f < fresh.tables.fields.size(); ++f)
    CHECK(same_row_matrix_bits(loaded.tables.fields[f], fresh.tables.fields[f]));
  CHECK(same_row_matrix_bits(loaded.user_table, fresh.user_table));
  REQUIRE(loaded.attn.heads.size() == 2);
  for (std::size_t h = 0; h < 2; ++h) {
    CHECK(same_matrix_bits(loaded.attn.heads[h].w_q, fresh.attn.heads[h].w_q));
    CHECK(same_matrix_bits(loaded.attn.heads[h].w_h, fresh.attn.heads[h].w_h));
    CHECK(same_matrix_bits(loaded.attn.heads[h].w_c, fresh.attn.heads[h].w_c));
    CHECK(loaded.attn.heads[h].beta == fresh.attn.heads[h].beta);
    CHECK(same_matrix_bits(loaded.attn.heads[h].w_v, fresh.attn.heads[h].w_v));
  }
  CHECK(same_matrix_bits(loaded.attn.w_o, fresh.attn.w_o));
  REQUIRE(loaded.mlp.weights.size() == fresh.mlp.weights.size());
  for (std::size_t l = 0; l < fresh.mlp.weights.size(); ++l) {
    CHECK(same_matrix_bits(loaded.mlp.weights[l], fresh.mlp.weights[l]));
    CHECK(loaded.mlp.biases[l] == fresh.mlp.biases[l]);
  }
  CHECK(loaded.cfg.gsu_k == 3);
  CHECK(loaded.cfg.variant == ModelVariant::Full);
  CHECK(loaded.parameter_count() == fresh.parameter_count());

  check_restore_identity(
      kGolden + "model.bin", [](const std::string& p) { return load_model(p); },
      [&config](const CtrModel& m, const std::string& p) { store_model(m, p, config); });
}

TEST_CASE("generated corpus round-trips bit-exactly through every text format") {
  GenConfig cfg;
  cfg.n_users = 12;
  cfg.n_items = 80;
  cfg.n_centers = 5;
  cfg.len_median_low = 20;
  cfg.len_median_med = 50;
  cfg.len_median_high = 90;
  cfg.max_len = 300;
  cfg.impressions_per_user = 8;
  cfg.seed = 77;
  const Dataset ds = generate(cfg);

  const std::string cat_path = tmp_path("cat.tsv");
  store_catalog(ds.catalog, cat_path, "{\"seed\":77}");
  std::string config;
  const Catalog cat2 = load_catalog(cat_path, &config);
  CHECK(config == "{\"seed\":77}");
  REQUIRE(cat2.size() == ds.catalog.size());
  for (ItemId id = 0; id < cat2.size(); ++id) {
    const auto &a = ds.catalog.raw_features(id), &b = cat2.raw_features(id);
    CHECK(a.categorical == b.categorical);
    REQUIRE(a.numerical.size() == b.numerical.size());
    for (std::size_t i = 0; i < a.numerical.size(); ++i)
      CHECK(bits_equal(a.numerical[i], b.numerical[i]));
  }

  const std::string beh_path = tmp_path("beh.tsv");
  store_behaviors(ds.sequences, beh_path);
  const auto seqs2 = load_behaviors(beh_path);
  REQUIRE(seqs2.size() == ds.sequences.size());
  for (std::size_t u = 0; u < seqs2.size(); ++u) {
    CHECK(seqs2[u].user_id == ds.sequences[u].user_id);
    REQUIRE(seqs2[u].records.size() == ds.sequences[u].records.size());
    for (std::size_t j = 0; j < seqs2[u].records.size(); ++j) {
      CHECK(seqs2[u].records[j].item_id == ds.sequences[u].records[j].item_id);
      CHECK(bits_equal(seqs2[u].records[j].completion_ratio,
                       ds.sequences[u].records[j].completion_ratio));
      CHECK(seqs2[u].records[j].timestamp == ds.sequences[u].records[j].timestamp);
    }
  }

  const std::string imp_path = tmp_path("imp.tsv");
  store_impressions(ds.impressions, imp_path);
  const auto imps2 = load_impressions(imp_path);
  REQUIRE(imps2.size() == ds.impressions.size());
  for (std::size_t i = 0; i < imps2.size(); ++i) {
    CHECK(imps2[i].user_id == ds.impressions[i].user_id);
    CHECK(imps2[i].item_id == ds.impressions[i].item_id);
    CHECK(imps2[i].timestamp == ds.impressions[i].timestamp);
    CHECK(imps2[i].label == ds.impressions[i].label);
    CHECK(imps2[i].is_test == ds.impressions[i].is_test);
  }
}

TEST_CASE("compressed histories round-trip through the cluster store") {
  GenConfig gen;
  gen.n_users = 6;
  gen.n_items = 60;
  gen.n_centers = 4;
  gen.len_median_low = 30;
  gen.len_median_med = 60;
  gen.len_median_high = 120;
  gen.max_len = 300;
  gen.impressions_per_user = 4;
  gen.seed = 9;
  const Dataset ds = generate(gen);
  EmbeddingTable tables = EmbeddingTable::init(ds.catalog.schema(), Rng(31));

  ClusterStore store;
  store.config_json = "{\"max_cluster_size\":8}";
  store.schema_fingerprint = ds.catalog.schema().fingerprint();
  store.embed_seed = 31;
  CompressorConfig ccfg;
  ccfg.max_cluster_size = 8;
  for (const auto& seq : ds.sequences) {
    ClusterStoreEntry e;
    const RowMatrixXd emb = embed_behaviors(seq, ds.catalog, tables);
    e.hist = compress(seq, emb, ccfg);
    e.hist.user_id = seq.user_id;
    e.items = build_virtual_items(e.hist, seq, ds.catalog, emb);
    store.entries.push_back(std::move(e));
  }

  const std::string path = tmp_path("clusters_rt.bin");
  store_clusters(store, path);
  const ClusterStore loaded = load_clusters(path);
  CHECK(loaded.config_json == store.config_json);
  CHECK(loaded.schema_fingerprint == store.schema_fingerprint);
  CHECK(loaded.embed_seed == store.embed_seed);
  REQUIRE(loaded.entries.size() == store.entries.size());
  for (std::size_t u = 0; u < loaded.entries.size(); ++u) {
    const auto &a = store.entries[u], &b = loaded.entries[u];
    CHECK(b.hist.user_id == a.hist.user_id);
    CHECK(b.hist.source_length == a.hist.source_length);
    REQUIRE(b.hist.clusters.size() == a.hist.clusters.size());
    for (std::size_t c = 0; c < b.hist.clusters.size(); ++c) {
      CHECK(b.hist.clusters[c].member_ids == a.hist.clusters[c].member_ids);
      CHECK(b.hist.clusters[c].member_rows == a.hist.clusters[c].member_rows);
      CHECK(b.hist.clusters[c].group_id == a.hist.clusters[c].group_id);
      REQUIRE(b.hist.clusters[c].centroid.size() == a.hist.clusters[c].centroid.size());
      for (Eigen::Index d = 0; d < b.hist.clusters[c].centroid.size(); ++d)
        CHECK(bits_equal(b.hist.clusters[c].centroid(d), a.hist.clusters[c].centroid(d)));
      CHECK(b.items[c].categorical == a.items[c].categorical);
      CHECK(b.items[c].source_item_id == a.items[c].source_item_id);
      for (Eigen::Index d = 0; d < b.items[c].numerical.size(); ++d)
        CHECK(bits_equal(b.items[c].numerical(d), a.items[c].numerical(d)));
    }
  }

  // Fixed point on the bytes as well.
  const std::string copy = tmp_path("clusters_rt2.bin");
  store_clusters(loaded, copy);
  CHECK(read_file(copy) == read_file(path));
}

TEST_CASE("missing and truncated files raise data errors, not crashes") {
  CHECK_THROWS_WITH_AS(load_catalog(tmp_path("nope.tsv")),
                       doctest::Contains("cannot open"), Error);

  const std::string beh = read_file(kGolden + "behaviors.tsv");
  const std::string cut_path = tmp_path("cut.tsv");
  write_file(cut_path, beh.substr(0, beh.size() - 20));
  try {
    load_behaviors(cut_path);
    FAIL("expected a parse error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::Data);
    CHECK(std::string(e.what()).find("byte") != std::string::npos);
  }

  const std::string bin = read_file(kGolden + "clusters.bin");
  for (std::size_t keep : {4u, 11u, 40u, 100u}) {
    write_file(cut_path, bin.substr(0, keep));
    try {
      load_clusters(cut_path);
      FAIL("expected a parse error at byte " << keep);
    } catch (const Error& e) {
      CHECK(e.kind() == ErrorKind::Data);
      CHECK(std::string(e.what()).find("byte") != std::string::npos);
    }
  }

  const std::string model_bin = read_file(kGolden + "model.bin");
  write_file(cut_path, model_bin.substr(0, model_bin.size() / 2));
  CHECK_THROWS_AS(load_model(cut_path), Error);
}

TEST_CASE("binary headers are checked: magic, version, byte order, trailing bytes") {
  const std::string bin = read_file(kGolden + "clusters.bin");
  const std::string p = tmp_path("hdr.bin");

  std::string bad = bin;
  bad[0] = 'X';
  write_file(p, bad);
  CHECK_THROWS_WITH_AS(load_clusters(p), doctest::Contains("bad magic"), Error);

  bad = bin;
  bad[4] = 9;  // version field
  write_file(p, bad);
  CHECK_THROWS_WITH_AS(load_clusters(p), doctest::Contains("unsupported version"), Error);

  bad = bin;
  bad[8] = 0x01;  // byte-order sentinel, stored little-endian as 04 03 02 01
  write_file(p, bad);
  CHECK_THROWS_WITH_AS(load_clusters(p), doctest::Contains("byte-order"), Error);

  bad = bin + "x";
  write_file(p, bad);
  CHECK_THROWS_WITH_AS(load_clusters(p), doctest::Contains("trailing"), Error);
}

TEST_CASE("text parsers reject malformed rows with line numbers") {
  const std::string p = tmp_path("malformed.tsv");

  write_file(p, "# longrec-behaviors v1\n# users 1 records 1\nu\t0\t1\nx\t1\t0.5\t10\n");
  CHECK_THROWS_WITH_AS(load_behaviors(p), doctest::Contains("unknown row tag"), Error);

  write_file(p, "# longrec-behaviors v1\n# users 1 records 2\nu\t0\t2\nb\t1\t0.5\t10\n");
  CHECK_THROWS_WITH_AS(load_behaviors(p), doctest::Contains("short"), Error);

  write_file(p, "# longrec-behaviors v1\n# users 1 records 2\nu\t0\t2\nb\t1\t0.5\t30\nb\t1\t0.5\t10\n");
  CHECK_THROWS_WITH_AS(load_behaviors(p), doctest::Contains("ascending"), Error);

  write_file(p, "# longrec-impressions v1\n# count 5\n0\t1\t10\t1\t0\n");
  CHECK_THROWS_WITH_AS(load_impressions(p), doctest::Contains("header declared"), Error);

  write_file(p, "# longrec-impressions v1\n# count 1\n0\t1\t10\t7\t0\n");
  CHECK_THROWS_WITH_AS(load_impressions(p), doctest::Contains("label"), Error);

  write_file(p, "# longrec-impressions v1\n# count 1\n0\t1\tabc\t1\t0\n");
  try {
    load_impressions(p);
    FAIL("expected a parse error");
  } catch (const Error& e) {
    CHECK(std::string(e.what()).find(":3:") != std::string::npos);  // line number
  }

  // Catalog: non-dense ids, bad column count, out-of-vocab category.
  const std::string golden_cat = read_file(kGolden + "catalog.tsv");
  std::string cat = golden_cat;
  const auto row0 = cat.find("\n0\t");
  REQUIRE(row0 != std::string::npos);
  cat.replace(row0, 3, "\n9\t");
  write_file(p, cat);
  CHECK_THROWS_WITH_AS(load_catalog(p), doctest::Contains("dense"), Error);

  cat = golden_cat;
  cat.replace(cat.find("\n0\t0\t0"), 6, "\n0\t0");
  write_file(p, cat);
  CHECK_THROWS_WITH_AS(load_catalog(p), doctest::Contains("columns"), Error);

  cat = golden_cat;
  cat.replace(cat.find("\n0\t0\t0"), 6, "\n0\t7\t0");
  write_file(p, cat);
  CHECK_THROWS_WITH_AS(load_catalog(p), doctest::Contains("out of vocab"), Error);

  write_file(p, "# longrec-catalog v2\n");
  CHECK_THROWS_WITH_AS(load_catalog(p), doctest::Contains("bad header"), Error);
}

TEST_CASE("cluster store enforces its structural invariants") {
  const std::string p = tmp_path("bad_store.bin");

  ClusterStore store = small_store();
  store.entries[0].hist.source_length = 2;  // rows 0..2 now out of range
  store_clusters(store, p);
  CHECK_THROWS_WITH_AS(load_clusters(p), doctest::Contains("outside the source"), Error);

  store = small_store();
  store.entries[0].hist.source_length = 4;  // coverage no longer adds up
  store.entries[0].hist.clusters[1].member_rows = {3};
  store_clusters(store, p);
  CHECK_THROWS_WITH_AS(load_clusters(p), doctest::Contains("covers"), Error);

  store = small_store();
  store.entries[0].hist.clusters[0].group_id = 0;
  store_clusters(store, p);
  CHECK_THROWS_WITH_AS(load_clusters(p), doctest::Contains("group_id"), Error);

  store = small_store();
  store.entries[0].items.pop_back();
  CHECK_THROWS_WITH_AS(store_clusters(store, p), doctest::Contains("virtual items"), Error);
}

TEST_CASE("model loader verifies the schema fingerprint") {
  std::string bin = read_file(kGolden + "model.bin");
  // Header: 12 bytes magic block, then two length-prefixed strings, then the
  // fingerprint. Walk the lengths to find and corrupt it.
  std::size_t pos = 12;
  for (int s = 0; s < 2; ++s) {
    std::uint32_t len;
    std::memcpy(&len, bin.data() + pos, 4);
    pos += 4 + len;
  }
  bin[pos] = static_cast<char>(bin[pos] + 1);
  const std::string p = tmp_path("bad_model.bin");
  write_file(p, bin);
  CHECK_THROWS_WITH_AS(load_model(p), doctest::Contains("fingerprint"), Error);
}
