#include <doctest.h>

#include <algorithm>
#include <cstring>
#include <string>
#include <vector>

#include "longrec/ablation.hpp"
#include "longrec/errors.hpp"
#include "test_util.hpp"

using namespace longrec;
using namespace longrec::testutil;

namespace {

GenConfig tiny_gen(std::uint64_t seed = 3) {
  GenConfig cfg;
  cfg.n_users = 8;
  cfg.n_items = 60;
  cfg.n_centers = 4;
  cfg.n_categories = 5;
  cfg.len_median_low = 15;
  cfg.len_median_med = 35;
  cfg.len_median_high = 70;
  cfg.max_len = 150;
  cfg.impressions_per_user = 10;
  cfg.seed = seed;
  return cfg;
}

ModelConfig tiny_model() {
  ModelConfig mc;
  mc.d_k = 4;
  mc.d_v = 4;
  mc.d_out = 4;
  mc.d_user = 2;
  mc.n_heads = 2;
  mc.gsu_k = 5;
  mc.recent_len = 4;
  mc.mlp_widths = {6, 3};
  mc.init_seed = 2;
  return mc;
}

TrainConfig tiny_train() {
  TrainConfig tc;
  tc.epochs = 2;
  tc.batch_size = 16;
  tc.lr = 0.05;
  tc.seed = 1;
  return tc;
}

bool same_report(const EvalReport& a, const EvalReport& b) {
  auto opt_bits = [](const std::optional<double>& x, const std::optional<double>& y) {
    if (x.has_value() != y.has_value()) return false;
    return !x || std::memcmp(&*x, &*y, sizeof(double)) == 0;
  };
  if (a.name != b.name) return false;
  if (!opt_bits(a.auc, b.auc) || !opt_bits(a.gauc, b.gauc)) return false;
  if (a.gauc_skipped != b.gauc_skipped) return false;
  if (a.cohort_gauc != b.cohort_gauc) return false;
  if (!opt_bits(a.cluster_acc, b.cluster_acc)) return false;
  if (!opt_bits(a.gsu_recall, b.gsu_recall)) return false;
  if (!opt_bits(a.compression_ratio, b.compression_ratio)) return false;
  if (!opt_bits(a.mean_cluster_size, b.mean_cluster_size)) return false;
  if (a.loss_curve.size() != b.loss_curve.size()) return false;
  for (std::size_t i = 0; i < a.loss_curve.size(); ++i)
    if (std::memcmp(&a.loss_curve[i], &b.loss_curve[i], sizeof(double)) != 0) return false;
  return true;
}

}  // namespace

TEST_CASE("build_cluster_store keeps sequence order and covers every behavior") {
  const Dataset ds = generate(tiny_gen());
  CompressorConfig cc;
  cc.max_cluster_size = 8;
  const ClusterStore store = build_cluster_store(ds.sequences, ds.catalog, cc, 11);
  CHECK(store.schema_fingerprint == ds.catalog.schema().fingerprint());
  CHECK(store.embed_seed == 11);
  REQUIRE(store.entries.size() == ds.sequences.size());
  for (std::size_t u = 0; u < store.entries.size(); ++u) {
    const auto& e = store.entries[u];
    CHECK(e.hist.user_id == ds.sequences[u].user_id);
    CHECK(e.hist.source_length == ds.sequences[u].records.size());
    CHECK(e.items.size() == e.hist.clusters.size());
    std::size_t covered = 0;
    for (const auto& c : e.hist.clusters) covered += c.member_ids.size();
    CHECK(covered == e.hist.source_length);
  }
}

TEST_CASE("store_stats aggregates cluster counts") {
  ClusterStore store;
  CHECK(store_stats(store).compression_ratio == 0.0);
  CHECK(store_stats(store).mean_cluster_size == 0.0);

  auto entry = [](std::uint64_t len, std::size_t n_clusters) {
    ClusterStoreEntry e;
    e.hist.source_length = len;
    e.hist.clusters.resize(n_clusters);
    return e;
  };
  store.entries = {entry(40, 5), entry(0, 0), entry(20, 5)};
  const StoreStats st = store_stats(store);
  CHECK(st.total_behaviors == 60);
  CHECK(st.total_clusters == 10);
  CHECK(st.compression_ratio == doctest::Approx(10.0 / 60.0).epsilon(1e-15));
  CHECK(st.mean_cluster_size == doctest::Approx(6.0).epsilon(1e-15));
}

TEST_CASE("store_cluster_accuracy matches a per-user weighted recomputation") {
  const Dataset ds = generate(tiny_gen(4));
  CompressorConfig cc;
  cc.max_cluster_size = 6;
  const ClusterStore store = build_cluster_store(ds.sequences, ds.catalog, cc, 11);

  const EmbeddingTable tables = EmbeddingTable::init(ds.catalog.schema(), Rng(11));
  double sum = 0.0;
  std::uint64_t counted = 0;
  std::size_t skips_manual = 0;
  for (std::size_t u = 0; u < store.entries.size(); ++u) {
    const auto& e = store.entries[u];
    if (e.hist.clusters.empty()) continue;
    const RowMatrixXd emb = embed_behaviors(ds.sequences[u], ds.catalog, tables);
    std::size_t user_skips = 0;
    const auto acc = cluster_accuracy(e.hist, emb, &user_skips);
    skips_manual += user_skips;
    if (!acc) continue;
    const auto n = e.hist.source_length - user_skips;
    sum += *acc * static_cast<double>(n);
    counted += n;
  }
  REQUIRE(counted > 0);

  std::size_t skips = 0;
  const auto got = store_cluster_accuracy(ds.sequences, ds.catalog, store, &skips);
  REQUIRE(got.has_value());
  CHECK(*got == doctest::Approx(sum / static_cast<double>(counted)).epsilon(1e-12));
  CHECK(skips == skips_manual);
  CHECK(*got > 0.0);
  CHECK(*got <= 1.0 + 1e-12);
}

TEST_CASE("assemble_corpus builds states and splits samples by the test flag") {
  const Dataset ds = generate(tiny_gen());
  CompressorConfig cc;
  const ModelConfig mc = tiny_model();
  const ClusterStore store = build_cluster_store(ds.sequences, ds.catalog, cc, mc.init_seed);
  const Corpus corpus = assemble_corpus(ds, store, mc);

  CHECK(corpus.data.states.size() == ds.sequences.size());
  CHECK(corpus.data.samples.size() == ds.impressions.size());
  CHECK(corpus.train_idx.size() + corpus.test_idx.size() == ds.impressions.size());
  for (std::size_t idx : corpus.train_idx) CHECK_FALSE(ds.impressions[idx].is_test);
  for (std::size_t idx : corpus.test_idx) CHECK(ds.impressions[idx].is_test);
  for (std::size_t i = 0; i < corpus.data.samples.size(); ++i) {
    const Sample& s = corpus.data.samples[i];
    CHECK(s.target == ds.impressions[i].item_id);
    CHECK(s.label == (ds.impressions[i].label ? 1.0 : 0.0));
    CHECK(corpus.data.states[s.state_idx].user_id == ds.impressions[i].user_id);
  }
  for (std::size_t u = 0; u < ds.sequences.size(); ++u)
    CHECK(corpus.history_len[u] == static_cast<std::int64_t>(ds.sequences[u].records.size()));
}

TEST_CASE("assemble_corpus rejects inconsistent inputs") {
  Dataset ds = generate(tiny_gen());
  CompressorConfig cc;
  const ModelConfig mc = tiny_model();
  ClusterStore store = build_cluster_store(ds.sequences, ds.catalog, cc, mc.init_seed);

  SUBCASE("schema fingerprint drift") {
    store.schema_fingerprint += 1;
    CHECK_THROWS_WITH_AS(assemble_corpus(ds, store, mc),
                         doctest::Contains("different catalog schema"), Error);
  }
  SUBCASE("missing entry for a user with history") {
    // Drop the entry of the first user that actually has behaviors.
    const auto it = std::find_if(store.entries.begin(), store.entries.end(),
                                 [](const ClusterStoreEntry& e) { return e.hist.source_length > 0; });
    REQUIRE(it != store.entries.end());
    store.entries.erase(it);
    CHECK_THROWS_WITH_AS(assemble_corpus(ds, store, mc), doctest::Contains("no entry"), Error);
  }
  SUBCASE("baseline variants skip the store entirely") {
    ModelConfig short_ta = mc;
    short_ta.variant = ModelVariant::ShortTA;
    const ClusterStore empty;
    CHECK_NOTHROW(assemble_corpus(ds, empty, short_ta));
    ModelConfig avg = mc;
    avg.variant = ModelVariant::AvgPool;
    CHECK_NOTHROW(assemble_corpus(ds, empty, avg));
  }
  SUBCASE("duplicate user ids") {
    ds.sequences.push_back(ds.sequences[0]);
    ModelConfig avg = mc;
    avg.variant = ModelVariant::AvgPool;
    const ClusterStore empty;
    CHECK_THROWS_WITH_AS(assemble_corpus(ds, empty, avg),
                         doctest::Contains("duplicate user id"), Error);
  }
  SUBCASE("impression references unknown user") {
    ds.impressions[0].user_id = 9999;
    CHECK_THROWS_WITH_AS(assemble_corpus(ds, store, mc), doctest::Contains("unknown user"), Error);
  }
  SUBCASE("impression references unknown item") {
    ds.impressions[0].item_id = 100000;
    CHECK_THROWS_WITH_AS(assemble_corpus(ds, store, mc), doctest::Contains("unknown item"), Error);
  }
}

TEST_CASE("evaluate buckets users into history-length terciles for cohort gauc") {
  // Six users with strictly increasing history lengths and two test
  // impressions each. Labels are assigned from the model's own score order
  // so each tercile's gauc is forced: low 1.0, medium 0.5, high 0.0.
  const CatalogSchema schema = tiny_schema(40);
  const Catalog catalog = tiny_catalog(schema, 11);
  Dataset ds;
  ds.catalog = catalog;
  for (UserId u = 0; u < 6; ++u) {
    ds.sequences.push_back(tiny_sequence(u, u * 3, 40, 29));
    ds.cohort.push_back(0);
  }
  for (UserId u = 0; u < 6; ++u) {
    for (int j = 0; j < 2; ++j) {
      Impression imp;
      imp.user_id = u;
      imp.item_id = static_cast<ItemId>(2 * u + j);
      imp.timestamp = 1000 + static_cast<std::int64_t>(u) * 10 + j;
      imp.label = 0;
      imp.is_test = true;
      ds.impressions.push_back(imp);
    }
  }

  ModelConfig mc = tiny_model();
  mc.variant = ModelVariant::ShortTA;  // terciles and gauc only need scores
  const ClusterStore empty;
  Corpus corpus = assemble_corpus(ds, empty, mc);
  const CtrModel model = CtrModel::init(schema, corpus.data.states.size(), mc);

  const std::vector<double> preds = predict_all(model, catalog, corpus.data, 1);
  // Per user: impressions 2u and 2u+1. Want per-user auc 1,1,1,0,0,0 in
  // history-length order, so terciles come out 1.0, 0.5, 0.0.
  for (UserId u = 0; u < 6; ++u) {
    const std::size_t a = 2 * u, b = 2 * u + 1;
    REQUIRE(preds[a] != preds[b]);
    const std::size_t hi = preds[a] > preds[b] ? a : b;
    const std::size_t lo = preds[a] > preds[b] ? b : a;
    const bool want_win = u < 3;  // users 0..2 ranked correctly, 3..5 inverted
    corpus.data.samples[want_win ? hi : lo].label = 1.0;
    corpus.data.samples[want_win ? lo : hi].label = 0.0;
  }

  EvalOptions opts;
  opts.name = "tercile_probe";
  opts.recall_users = 0;
  const EvalReport report = evaluate(model, ds, empty, corpus, opts);
  REQUIRE(report.cohort_gauc.count("low") == 1);
  REQUIRE(report.cohort_gauc.count("medium") == 1);
  REQUIRE(report.cohort_gauc.count("high") == 1);
  CHECK(report.cohort_gauc.at("low") == 1.0);
  CHECK(report.cohort_gauc.at("medium") == 0.5);
  CHECK(report.cohort_gauc.at("high") == 0.0);
  REQUIRE(report.gauc.has_value());
  CHECK(*report.gauc == 0.5);
  CHECK(report.gauc_skipped == 0);
  // Store-level metrics stay undefined without a store.
  CHECK_FALSE(report.cluster_acc.has_value());
  CHECK_FALSE(report.gsu_recall.has_value());
  CHECK_FALSE(report.compression_ratio.has_value());
}

TEST_CASE("run_ablation is self-consistent and names its grid rows") {
  const Dataset ds = generate(tiny_gen(6));
  AblationConfig cfg;
  cfg.comp.max_cluster_size = 8;
  cfg.model = tiny_model();
  cfg.train = tiny_train();
  cfg.variants = {CompressVariant::Adaptive};
  cfg.include_baselines = true;
  cfg.recall_users = 4;

  const AblationTable a = run_ablation(ds, cfg);
  const AblationTable b = run_ablation(ds, cfg);
  REQUIRE(a.rows.size() == 6);
  REQUIRE(b.rows.size() == 6);
  const std::vector<std::string> expect_names = {
      "adaptive/gsu_on/esu_on", "adaptive/gsu_on/esu_off", "adaptive/gsu_off/esu_on",
      "adaptive/gsu_off/esu_off", "short_ta", "avg_pool"};
  for (std::size_t i = 0; i < a.rows.size(); ++i) {
    CHECK(a.rows[i].name == expect_names[i]);
    CHECK(same_report(a.rows[i], b.rows[i]));
    REQUIRE(a.rows[i].auc.has_value());
    CHECK(*a.rows[i].auc >= 0.0);
    CHECK(*a.rows[i].auc <= 1.0);
    CHECK(a.rows[i].loss_curve.size() == 2);
  }
  // Clustered rows carry store metrics; baselines leave them undefined.
  for (std::size_t i = 0; i < 4; ++i) {
    CHECK(a.rows[i].compression_ratio.has_value());
    CHECK(a.rows[i].mean_cluster_size.has_value());
    CHECK(a.rows[i].cluster_acc.has_value());
    CHECK(a.rows[i].gsu_recall.has_value());
  }
  for (std::size_t i = 4; i < 6; ++i) {
    CHECK_FALSE(a.rows[i].compression_ratio.has_value());
    CHECK_FALSE(a.rows[i].gsu_recall.has_value());
  }

  const std::string csv = ablation_csv(a);
  std::size_t lines = static_cast<std::size_t>(std::count(csv.begin(), csv.end(), '\n'));
  CHECK(lines == 2 + a.rows.size());  // format tag + header + one line per row
  CHECK(csv.find("# longrec-ablation-csv v1\n") == 0);
  CHECK(csv.find("adaptive/gsu_off/esu_off,") != std::string::npos);

  const std::string timings = timings_csv(a);
  CHECK(std::count(timings.begin(), timings.end(), '\n') ==
        static_cast<std::ptrdiff_t>(1 + a.rows.size()));
  CHECK(timings.find("name,compress_seconds,train_seconds\n") == 0);
}

TEST_CASE("csv and report text spell out absent metrics") {
  EvalReport r;
  r.name = "probe";
  r.auc = 0.75;
  r.gauc_skipped = 3;
  r.cohort_gauc["low"] = 0.5;
  r.loss_curve = {0.5, 0.25};

  AblationTable t;
  t.rows.push_back(r);
  const std::string csv = ablation_csv(t);
  CHECK(csv.find("probe,0.75,,3,0.5,,,,,,,0.25\n") != std::string::npos);

  const std::string text = report_text(r, "{\"k\":1}");
  CHECK(text.find("# longrec-report v1\n") == 0);
  CHECK(text.find("# config {\"k\":1}\n") != std::string::npos);
  CHECK(text.find("name probe\n") != std::string::npos);
  CHECK(text.find("auc 0.75\n") != std::string::npos);
  CHECK(text.find("gauc undefined\n") != std::string::npos);
  CHECK(text.find("gauc_skipped_users 3\n") != std::string::npos);
  CHECK(text.find("gauc_low 0.5\n") != std::string::npos);
  CHECK(text.find("cluster_accuracy undefined\n") != std::string::npos);
  CHECK(text.find("gsu_recall undefined\n") != std::string::npos);
  CHECK(text.find("compression_ratio undefined\n") != std::string::npos);
  CHECK(text.find("loss_curve 0.5 0.25\n") != std::string::npos);
}
