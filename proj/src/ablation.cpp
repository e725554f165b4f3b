#include "longrec/ablation.hpp"

#include <algorithm>
#include <charconv>
#include <chrono>
#include <unordered_map>

#include "longrec/errors.hpp"

namespace longrec {
namespace {

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string num(double v) {
  char buf[40];
  auto [p, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  (void)ec;
  return std::string(buf, p);
}

std::string opt_num(const std::optional<double>& v) { return v ? num(*v) : std::string(); }

const CompressedHistory& empty_history() {
  static const CompressedHistory kEmpty{};
  return kEmpty;
}

}  // namespace

ClusterStore build_cluster_store(const std::vector<BehaviorSequence>& seqs,
                                 const Catalog& catalog, const CompressorConfig& cfg,
                                 std::uint64_t embed_seed) {
  cfg.validate();
  const EmbeddingTable tables = EmbeddingTable::init(catalog.schema(), Rng(embed_seed));
  ClusterStore store;
  store.schema_fingerprint = catalog.schema().fingerprint();
  store.embed_seed = embed_seed;
  store.entries.reserve(seqs.size());
  for (const auto& seq : seqs) {
    const RowMatrixXd emb = embed_behaviors(seq, catalog, tables);
    ClusterStoreEntry entry;
    entry.hist = compress(seq, emb, cfg);
    entry.items = build_virtual_items(entry.hist, seq, catalog, emb);
    store.entries.push_back(std::move(entry));
  }
  return store;
}

StoreStats store_stats(const ClusterStore& store) {
  StoreStats st;
  for (const auto& e : store.entries) {
    st.total_behaviors += e.hist.source_length;
    st.total_clusters += e.hist.clusters.size();
  }
  if (st.total_behaviors > 0)
    st.compression_ratio =
        static_cast<double>(st.total_clusters) / static_cast<double>(st.total_behaviors);
  if (st.total_clusters > 0)
    st.mean_cluster_size =
        static_cast<double>(st.total_behaviors) / static_cast<double>(st.total_clusters);
  return st;
}

std::optional<double> store_cluster_accuracy(const std::vector<BehaviorSequence>& seqs,
                                             const Catalog& catalog, const ClusterStore& store,
                                             std::size_t* skipped) {
  const EmbeddingTable tables = EmbeddingTable::init(catalog.schema(), Rng(store.embed_seed));
  std::unordered_map<UserId, const BehaviorSequence*> by_user;
  for (const auto& s : seqs) by_user.emplace(s.user_id, &s);

  double sum = 0.0;
  std::uint64_t counted = 0;
  std::size_t skips = 0;
  for (const auto& e : store.entries) {
    if (e.hist.clusters.empty()) continue;
    auto it = by_user.find(e.hist.user_id);
    if (it == by_user.end())
      throw data_error("cluster store references unknown user " + std::to_string(e.hist.user_id));
    const RowMatrixXd emb = embed_behaviors(*it->second, catalog, tables);
    std::size_t user_skips = 0;
    const auto acc = cluster_accuracy(e.hist, emb, &user_skips);
    skips += user_skips;
    if (!acc) continue;
    const std::uint64_t n = e.hist.source_length - user_skips;
    sum += *acc * static_cast<double>(n);
    counted += n;
  }
  if (skipped) *skipped = skips;
  if (counted == 0) return std::nullopt;
  return sum / static_cast<double>(counted);
}

Corpus assemble_corpus(const Dataset& data, const ClusterStore& store, const ModelConfig& cfg) {
  cfg.validate();
  if (!store.entries.empty() &&
      store.schema_fingerprint != data.catalog.schema().fingerprint())
    throw data_error("cluster store was built against a different catalog schema");

  std::unordered_map<UserId, const ClusterStoreEntry*> by_user;
  for (const auto& e : store.entries) by_user.emplace(e.hist.user_id, &e);

  Corpus out;
  out.data.states.reserve(data.sequences.size());
  out.history_len.reserve(data.sequences.size());
  std::unordered_map<UserId, std::uint32_t> state_of;
  for (std::size_t i = 0; i < data.sequences.size(); ++i) {
    const BehaviorSequence& seq = data.sequences[i];
    const ClusterStoreEntry* entry = nullptr;
    if (auto it = by_user.find(seq.user_id); it != by_user.end()) entry = it->second;
    if (!entry && !store.entries.empty() && cfg.variant == ModelVariant::Full &&
        seq.length() > 0)
      throw data_error("cluster store has no entry for user " + std::to_string(seq.user_id));
    const CompressedHistory& hist = entry ? entry->hist : empty_history();
    static const std::vector<VirtualItem> kNoItems;
    const std::vector<VirtualItem>& items = entry ? entry->items : kNoItems;
    out.data.states.push_back(make_user_state(hist, items, seq, data.catalog, cfg,
                                              static_cast<std::uint32_t>(i)));
    out.data.states.back().user_id = seq.user_id;
    out.history_len.push_back(static_cast<std::int64_t>(seq.length()));
    if (!state_of.emplace(seq.user_id, static_cast<std::uint32_t>(i)).second)
      throw data_error("duplicate user id " + std::to_string(seq.user_id) + " in behavior log");
  }

  out.data.samples.reserve(data.impressions.size());
  for (const auto& im : data.impressions) {
    auto it = state_of.find(im.user_id);
    if (it == state_of.end())
      throw data_error("impression references unknown user " + std::to_string(im.user_id));
    if (!data.catalog.contains(im.item_id))
      throw data_error("impression references unknown item " + std::to_string(im.item_id));
    Sample s;
    s.state_idx = it->second;
    s.target = im.item_id;
    s.label = im.label ? 1.0 : 0.0;
    s.timestamp = im.timestamp;
    const std::size_t idx = out.data.samples.size();
    out.data.samples.push_back(s);
    (im.is_test ? out.test_idx : out.train_idx).push_back(idx);
  }
  return out;
}

EvalReport evaluate(const CtrModel& model, const Dataset& data, const ClusterStore& store,
                    const Corpus& corpus, const EvalOptions& opts) {
  EvalReport report;
  report.name = opts.name;

  const std::vector<double> preds = predict_all(model, data.catalog, corpus.data, opts.threads);
  std::vector<double> scores, labels;
  std::vector<UserId> users;
  scores.reserve(corpus.test_idx.size());
  labels.reserve(corpus.test_idx.size());
  users.reserve(corpus.test_idx.size());
  for (std::size_t idx : corpus.test_idx) {
    const Sample& s = corpus.data.samples[idx];
    scores.push_back(preds[idx]);
    labels.push_back(s.label);
    users.push_back(corpus.data.states[s.state_idx].user_id);
  }
  report.auc = auc(scores, labels);
  report.gauc = gauc(scores, labels, users, &report.gauc_skipped);

  // History-length terciles over the users that appear in the test split.
  std::vector<std::vector<std::size_t>> tests_of(corpus.data.states.size());
  for (std::size_t idx : corpus.test_idx)
    tests_of[corpus.data.samples[idx].state_idx].push_back(idx);
  std::vector<std::uint32_t> active;
  for (std::uint32_t s = 0; s < tests_of.size(); ++s)
    if (!tests_of[s].empty()) active.push_back(s);
  std::sort(active.begin(), active.end(), [&](std::uint32_t a, std::uint32_t b) {
    if (corpus.history_len[a] != corpus.history_len[b])
      return corpus.history_len[a] < corpus.history_len[b];
    return corpus.data.states[a].user_id < corpus.data.states[b].user_id;
  });
  const char* tercile_names[3] = {"low", "medium", "high"};
  for (int t = 0; t < 3; ++t) {
    const std::size_t lo = active.size() * static_cast<std::size_t>(t) / 3;
    const std::size_t hi = active.size() * static_cast<std::size_t>(t + 1) / 3;
    std::vector<double> ts, tl;
    std::vector<UserId> tu;
    for (std::size_t i = lo; i < hi; ++i) {
      for (std::size_t idx : tests_of[active[i]]) {
        ts.push_back(preds[idx]);
        tl.push_back(corpus.data.samples[idx].label);
        tu.push_back(corpus.data.states[corpus.data.samples[idx].state_idx].user_id);
      }
    }
    if (const auto g = gauc(ts, tl, tu)) report.cohort_gauc[tercile_names[t]] = *g;
  }

  if (!store.entries.empty()) {
    const StoreStats st = store_stats(store);
    report.compression_ratio = st.compression_ratio;
    report.mean_cluster_size = st.mean_cluster_size;
    report.cluster_acc = store_cluster_accuracy(data.sequences, data.catalog, store);
  }

  if (model.cfg.variant == ModelVariant::Full && opts.recall_users > 0 &&
      !store.entries.empty()) {
    const EmbedLayout layout = EmbedLayout::of(model.schema);
    std::unordered_map<UserId, const ClusterStoreEntry*> by_user;
    for (const auto& e : store.entries) by_user.emplace(e.hist.user_id, &e);
    double sum = 0.0;
    int done = 0;
    for (std::uint32_t s : active) {
      if (done >= opts.recall_users) break;
      auto it = by_user.find(corpus.data.states[s].user_id);
      if (it == by_user.end() || it->second->hist.clusters.empty()) continue;
      const ClusterStoreEntry& entry = *it->second;
      const BehaviorSequence& seq = data.sequences[s];
      const SplitEmbeddings raw_split =
          split_embeddings(embed_behaviors(seq, data.catalog, model.tables), layout);
      RowMatrixXd cluster_emb(static_cast<Eigen::Index>(entry.items.size()),
                              static_cast<Eigen::Index>(layout.total()));
      for (std::size_t c = 0; c < entry.items.size(); ++c)
        cluster_emb.row(static_cast<Eigen::Index>(c)) =
            embed_virtual_item(entry.items[c], model.schema, model.tables).transpose();
      const SplitEmbeddings cluster_split = split_embeddings(cluster_emb, layout);
      const Sample& sample = corpus.data.samples[tests_of[s].front()];
      const Eigen::VectorXd target_full = embed_item(
          data.catalog.normalized_features(sample.target), model.schema, model.tables);
      const Eigen::VectorXd q = target_full.head(static_cast<Eigen::Index>(layout.inherent_dim));
      sum += gsu_recall(entry.hist, raw_split, cluster_split, q, model.attn.heads[0],
                        model.cfg.gsu_k, model.cfg.reweight_gsu);
      ++done;
    }
    if (done > 0) report.gsu_recall = sum / done;
  }
  return report;
}

RunOutcome train_and_eval(const Dataset& data, const ClusterStore& store, const ModelConfig& mcfg,
                          const TrainConfig& tcfg, const EvalOptions& opts) {
  Corpus corpus = assemble_corpus(data, store, mcfg);
  RunOutcome out;
  out.model = CtrModel::init(data.catalog.schema(), corpus.data.states.size(), mcfg);
  out.train = train(out.model, data.catalog, corpus.data, tcfg, &corpus.train_idx);
  out.report = evaluate(out.model, data, store, corpus, opts);
  out.report.loss_curve = out.train.epoch_loss;
  for (double s : out.train.epoch_seconds) out.report.train_seconds += s;
  return out;
}

const char* variant_name(CompressVariant v) {
  switch (v) {
    case CompressVariant::Adaptive: return "adaptive";
    case CompressVariant::Binary: return "binary";
    case CompressVariant::BalancedBinary: return "balanced_binary";
  }
  return "unknown";
}

AblationTable run_ablation(const Dataset& data, const AblationConfig& cfg) {
  AblationTable table;
  for (CompressVariant variant : cfg.variants) {
    CompressorConfig cc = cfg.comp;
    cc.variant = variant;
    const auto t0 = std::chrono::steady_clock::now();
    const ClusterStore store =
        build_cluster_store(data.sequences, data.catalog, cc, cfg.model.init_seed);
    const double compress_seconds = seconds_since(t0);
    for (int rg = 1; rg >= 0; --rg) {
      for (int re = 1; re >= 0; --re) {
        ModelConfig mc = cfg.model;
        mc.variant = ModelVariant::Full;
        mc.reweight_gsu = rg == 1;
        mc.reweight_esu = re == 1;
        EvalOptions opts;
        opts.name = std::string(variant_name(variant)) + "/gsu_" + (rg ? "on" : "off") +
                    "/esu_" + (re ? "on" : "off");
        opts.recall_users = cfg.recall_users;
        opts.threads = cfg.train.threads;
        RunOutcome ro = train_and_eval(data, store, mc, cfg.train, opts);
        ro.report.compress_seconds = compress_seconds;
        table.rows.push_back(std::move(ro.report));
      }
    }
  }
  if (cfg.include_baselines) {
    const ClusterStore no_store;
    for (ModelVariant v : {ModelVariant::ShortTA, ModelVariant::AvgPool}) {
      ModelConfig mc = cfg.model;
      mc.variant = v;
      EvalOptions opts;
      opts.name = v == ModelVariant::ShortTA ? "short_ta" : "avg_pool";
      opts.recall_users = 0;
      opts.threads = cfg.train.threads;
      table.rows.push_back(train_and_eval(data, no_store, mc, cfg.train, opts).report);
    }
  }
  return table;
}

std::string ablation_csv(const AblationTable& table) {
  std::string out =
      "# longrec-ablation-csv v1\n"
      "name,auc,gauc,gauc_skipped,gauc_low,gauc_medium,gauc_high,cluster_accuracy,"
      "gsu_recall,compression_ratio,mean_cluster_size,final_loss\n";
  for (const auto& r : table.rows) {
    auto cohort = [&](const char* key) {
      auto it = r.cohort_gauc.find(key);
      return it == r.cohort_gauc.end() ? std::string() : num(it->second);
    };
    out += r.name + ',' + opt_num(r.auc) + ',' + opt_num(r.gauc) + ',' +
           std::to_string(r.gauc_skipped) + ',' + cohort("low") + ',' + cohort("medium") + ',' +
           cohort("high") + ',' + opt_num(r.cluster_acc) + ',' + opt_num(r.gsu_recall) + ',' +
           opt_num(r.compression_ratio) + ',' + opt_num(r.mean_cluster_size) + ',' +
           (r.loss_curve.empty() ? std::string() : num(r.loss_curve.back())) + '\n';
  }
  return out;
}

std::string timings_csv(const AblationTable& table) {
  std::string out = "name,compress_seconds,train_seconds\n";
  for (const auto& r : table.rows)
    out += r.name + ',' + num(r.compress_seconds) + ',' + num(r.train_seconds) + '\n';
  return out;
}

std::string report_text(const EvalReport& report, const std::string& config_json) {
  std::string out = "# longrec-report v1\n";
  if (!config_json.empty()) out += "# config " + config_json + "\n";
  out += "name " + report.name + "\n";
  out += "auc " + (report.auc ? num(*report.auc) : std::string("undefined")) + "\n";
  out += "gauc " + (report.gauc ? num(*report.gauc) : std::string("undefined")) + "\n";
  out += "gauc_skipped_users " + std::to_string(report.gauc_skipped) + "\n";
  for (const auto& [name, value] : report.cohort_gauc)
    out += "gauc_" + name + " " + num(value) + "\n";
  out += "cluster_accuracy " +
         (report.cluster_acc ? num(*report.cluster_acc) : std::string("undefined")) + "\n";
  out += "gsu_recall " + (report.gsu_recall ? num(*report.gsu_recall) : std::string("undefined")) +
         "\n";
  out += "compression_ratio " +
         (report.compression_ratio ? num(*report.compression_ratio) : std::string("undefined")) +
         "\n";
  out += "mean_cluster_size " +
         (report.mean_cluster_size ? num(*report.mean_cluster_size) : std::string("undefined")) +
         "\n";
  out += "loss_curve";
  for (double v : report.loss_curve) out += ' ' + num(v);
  out += '\n';
  return out;
}

}  // namespace longrec
