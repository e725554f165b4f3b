#include <algorithm>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <set>
#include <string>
#include <thread>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "longrec/ablation.hpp"
#include "longrec/attention.hpp"
#include "longrec/datagen.hpp"
#include "longrec/errors.hpp"
#include "longrec/io.hpp"
#include "longrec/metrics.hpp"
#include "longrec/model.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;
using namespace longrec;

namespace {

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

// Pulls known keys out of a JSON object and rejects everything it was not
// asked about, so config typos fail loudly.
class Keys {
 public:
  Keys(const json& j, std::string where) : j_(j), where_(std::move(where)) {
    if (!j_.is_object()) throw config_error(where_ + ": expected a JSON object");
  }

  template <typename T>
  void get(const char* key, T& out) {
    if (auto it = j_.find(key); it != j_.end()) {
      try {
        out = it->get<T>();
      } catch (const json::exception& e) {
        throw config_error(where_ + "." + key + ": " + e.what());
      }
      seen_.insert(key);
    }
  }

  void get_str(const char* key, std::string& out) { get<std::string>(key, out); }

  const json* section(const char* key) {
    if (auto it = j_.find(key); it != j_.end()) {
      seen_.insert(key);
      return &*it;
    }
    return nullptr;
  }

  void finish() const {
    for (const auto& [k, v] : j_.items())
      if (!seen_.contains(k)) throw config_error(where_ + ": unknown key '" + k + "'");
  }

 private:
  const json& j_;
  std::string where_;
  std::set<std::string> seen_;
};

json load_config_file(const std::string& path) {
  if (path.empty()) return json::object();
  try {
    return json::parse(read_file(path));
  } catch (const json::parse_error& e) {
    throw config_error(path + ": " + e.what());
  }
}

CompressVariant parse_variant(const std::string& s) {
  if (s == "adaptive") return CompressVariant::Adaptive;
  if (s == "binary") return CompressVariant::Binary;
  if (s == "balanced_binary") return CompressVariant::BalancedBinary;
  throw config_error("unknown clustering variant '" + s + "'");
}

ModelVariant parse_model_variant(const std::string& s) {
  if (s == "full") return ModelVariant::Full;
  if (s == "short_ta") return ModelVariant::ShortTA;
  if (s == "avg_pool") return ModelVariant::AvgPool;
  throw config_error("unknown model variant '" + s + "'");
}

const char* model_variant_name(ModelVariant v) {
  switch (v) {
    case ModelVariant::Full: return "full";
    case ModelVariant::ShortTA: return "short_ta";
    case ModelVariant::AvgPool: return "avg_pool";
  }
  return "unknown";
}

Optimizer parse_optimizer(const std::string& s) {
  if (s == "adam") return Optimizer::Adam;
  if (s == "sgd") return Optimizer::SGD;
  throw config_error("unknown optimizer '" + s + "'");
}

json gen_json(const GenConfig& g) {
  return json{{"n_users", g.n_users},
              {"n_items", g.n_items},
              {"n_centers", g.n_centers},
              {"n_categories", g.n_categories},
              {"n_buckets", g.n_buckets},
              {"low_frac", g.low_frac},
              {"med_frac", g.med_frac},
              {"len_median_low", g.len_median_low},
              {"len_median_med", g.len_median_med},
              {"len_median_high", g.len_median_high},
              {"len_sigma", g.len_sigma},
              {"max_len", g.max_len},
              {"impressions_per_user", g.impressions_per_user},
              {"test_frac", g.test_frac},
              {"noise_watch_prob", g.noise_watch_prob},
              {"seed", g.seed}};
}

void gen_apply(const json& j, GenConfig& g, const std::string& where) {
  Keys k(j, where);
  k.get("n_users", g.n_users);
  k.get("n_items", g.n_items);
  k.get("n_centers", g.n_centers);
  k.get("n_categories", g.n_categories);
  k.get("n_buckets", g.n_buckets);
  k.get("low_frac", g.low_frac);
  k.get("med_frac", g.med_frac);
  k.get("len_median_low", g.len_median_low);
  k.get("len_median_med", g.len_median_med);
  k.get("len_median_high", g.len_median_high);
  k.get("len_sigma", g.len_sigma);
  k.get("max_len", g.max_len);
  k.get("impressions_per_user", g.impressions_per_user);
  k.get("test_frac", g.test_frac);
  k.get("noise_watch_prob", g.noise_watch_prob);
  k.get("seed", g.seed);
  k.finish();
}

json comp_json(const CompressorConfig& c) {
  return json{{"group_count", c.group_count},
              {"max_cluster_size", c.max_cluster_size},
              {"variant", variant_name(c.variant)},
              {"kmeans_max_iters", c.kmeans_max_iters},
              {"kmeans_seed", c.kmeans_seed},
              {"max_depth", c.max_depth}};
}

void comp_apply(const json& j, CompressorConfig& c, const std::string& where) {
  Keys k(j, where);
  k.get("group_count", c.group_count);
  k.get("max_cluster_size", c.max_cluster_size);
  std::string variant;
  k.get_str("variant", variant);
  if (!variant.empty()) c.variant = parse_variant(variant);
  k.get("kmeans_max_iters", c.kmeans_max_iters);
  k.get("kmeans_seed", c.kmeans_seed);
  k.get("max_depth", c.max_depth);
  k.finish();
}

json model_json(const ModelConfig& m) {
  return json{{"d_k", m.d_k},
              {"d_v", m.d_v},
              {"d_out", m.d_out},
              {"d_user", m.d_user},
              {"n_heads", m.n_heads},
              {"gsu_k", m.gsu_k},
              {"recent_len", m.recent_len},
              {"mlp_widths", m.mlp_widths},
              {"variant", model_variant_name(m.variant)},
              {"reweight_gsu", m.reweight_gsu},
              {"reweight_esu", m.reweight_esu},
              {"init_seed", m.init_seed}};
}

void model_apply(const json& j, ModelConfig& m, const std::string& where) {
  Keys k(j, where);
  k.get("d_k", m.d_k);
  k.get("d_v", m.d_v);
  k.get("d_out", m.d_out);
  k.get("d_user", m.d_user);
  k.get("n_heads", m.n_heads);
  k.get("gsu_k", m.gsu_k);
  k.get("recent_len", m.recent_len);
  k.get("mlp_widths", m.mlp_widths);
  std::string variant;
  k.get_str("variant", variant);
  if (!variant.empty()) m.variant = parse_model_variant(variant);
  k.get("reweight_gsu", m.reweight_gsu);
  k.get("reweight_esu", m.reweight_esu);
  k.get("init_seed", m.init_seed);
  k.finish();
}

json train_json(const TrainConfig& t) {
  return json{{"optimizer", t.optimizer == Optimizer::Adam ? "adam" : "sgd"},
              {"lr", t.lr},
              {"batch_size", t.batch_size},
              {"epochs", t.epochs},
              {"seed", t.seed},
              {"threads", t.threads},
              {"adam_beta1", t.adam_beta1},
              {"adam_beta2", t.adam_beta2},
              {"adam_eps", t.adam_eps}};
}

void train_apply(const json& j, TrainConfig& t, const std::string& where) {
  Keys k(j, where);
  std::string opt;
  k.get_str("optimizer", opt);
  if (!opt.empty()) t.optimizer = parse_optimizer(opt);
  k.get("lr", t.lr);
  k.get("batch_size", t.batch_size);
  k.get("epochs", t.epochs);
  k.get("seed", t.seed);
  k.get("threads", t.threads);
  k.get("adam_beta1", t.adam_beta1);
  k.get("adam_beta2", t.adam_beta2);
  k.get("adam_eps", t.adam_eps);
  k.finish();
}

Dataset load_dataset(const std::string& dir, bool with_impressions = true) {
  Dataset d;
  d.catalog = load_catalog(dir + "/catalog.tsv");
  d.sequences = load_behaviors(dir + "/behaviors.tsv");
  if (with_impressions) d.impressions = load_impressions(dir + "/impressions.tsv");
  return d;
}

int default_threads() {
  const unsigned hw = std::thread::hardware_concurrency();
  return hw == 0 ? 1 : static_cast<int>(hw);
}

std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.6f", v);
  return buf;
}

// ---- gen-data ----

struct GenArgs {
  std::string config, out;
  GenConfig flags;
  CLI::Option *o_users = nullptr, *o_items = nullptr, *o_centers = nullptr, *o_seed = nullptr,
              *o_impr = nullptr, *o_test = nullptr, *o_maxlen = nullptr;
};

void run_gen(const GenArgs& a) {
  GenConfig g;
  const json file = load_config_file(a.config);
  if (!file.empty()) {
    Keys top(file, a.config);
    if (const json* s = top.section("gen")) gen_apply(*s, g, a.config + ".gen");
    top.finish();
  }
  if (a.o_users->count()) g.n_users = a.flags.n_users;
  if (a.o_items->count()) g.n_items = a.flags.n_items;
  if (a.o_centers->count()) g.n_centers = a.flags.n_centers;
  if (a.o_seed->count()) g.seed = a.flags.seed;
  if (a.o_impr->count()) g.impressions_per_user = a.flags.impressions_per_user;
  if (a.o_test->count()) g.test_frac = a.flags.test_frac;
  if (a.o_maxlen->count()) g.max_len = a.flags.max_len;
  g.validate();

  const auto t0 = std::chrono::steady_clock::now();
  const Dataset d = generate(g);
  fs::create_directories(a.out);
  const std::string cfg = gen_json(g).dump();
  store_catalog(d.catalog, a.out + "/catalog.tsv", cfg);
  store_behaviors(d.sequences, a.out + "/behaviors.tsv", cfg);
  store_impressions(d.impressions, a.out + "/impressions.tsv", cfg);

  std::uint64_t records = 0;
  for (const auto& s : d.sequences) records += s.records.size();
  std::printf("generated %zu users, %llu behaviors, %zu impressions -> %s (%.2fs)\n",
              d.sequences.size(), static_cast<unsigned long long>(records),
              d.impressions.size(), a.out.c_str(), seconds_since(t0));
}

// ---- compress ----

struct CompressArgs {
  std::string config, data, out;
  std::string variant;
  CompressorConfig flags;
  std::uint64_t embed_seed = 0;
  CLI::Option *o_variant = nullptr, *o_groups = nullptr, *o_gamma = nullptr, *o_iters = nullptr,
              *o_kseed = nullptr, *o_eseed = nullptr, *o_depth = nullptr;
};

void run_compress(const CompressArgs& a) {
  CompressorConfig c;
  std::uint64_t embed_seed = 0;
  const json file = load_config_file(a.config);
  if (!file.empty()) {
    Keys top(file, a.config);
    if (const json* s = top.section("compressor")) comp_apply(*s, c, a.config + ".compressor");
    top.get("embed_seed", embed_seed);
    top.finish();
  }
  if (a.o_variant->count()) c.variant = parse_variant(a.variant);
  if (a.o_groups->count()) c.group_count = a.flags.group_count;
  if (a.o_gamma->count()) c.max_cluster_size = a.flags.max_cluster_size;
  if (a.o_iters->count()) c.kmeans_max_iters = a.flags.kmeans_max_iters;
  if (a.o_kseed->count()) c.kmeans_seed = a.flags.kmeans_seed;
  if (a.o_depth->count()) c.max_depth = a.flags.max_depth;
  if (a.o_eseed->count()) embed_seed = a.embed_seed;
  c.validate();

  Dataset d;
  d.catalog = load_catalog(a.data + "/catalog.tsv");
  d.sequences = load_behaviors(a.data + "/behaviors.tsv");

  const auto t0 = std::chrono::steady_clock::now();
  ClusterStore store = build_cluster_store(d.sequences, d.catalog, c, embed_seed);
  const double secs = seconds_since(t0);
  json cfg = json{{"compressor", comp_json(c)}, {"embed_seed", embed_seed}};
  store.config_json = cfg.dump();
  store_clusters(store, a.out);

  const StoreStats st = store_stats(store);
  std::string summary = "# longrec-compress-summary v1\n";
  summary += "# config " + store.config_json + "\n";
  summary += "users " + std::to_string(store.entries.size()) + "\n";
  summary += "behaviors " + std::to_string(st.total_behaviors) + "\n";
  summary += "clusters " + std::to_string(st.total_clusters) + "\n";
  summary += "ratio " + (st.total_behaviors ? fmt(st.compression_ratio) : std::string("n/a")) + "\n";
  summary += "mean_cluster_size " +
             (st.total_clusters ? fmt(st.mean_cluster_size) : std::string("n/a")) + "\n";
  write_file(a.out + ".summary", summary);

  std::fputs(summary.c_str(), stdout);
  std::printf("wall_seconds %.3f\n", secs);
}

// ---- train ----

struct TrainArgs {
  std::string config, data, store, out, loss_out;
  std::string variant, optimizer;
  ModelConfig mflags;
  TrainConfig tflags;
  CLI::Option *o_variant = nullptr, *o_epochs = nullptr, *o_lr = nullptr, *o_batch = nullptr,
              *o_seed = nullptr, *o_init = nullptr, *o_threads = nullptr, *o_opt = nullptr,
              *o_heads = nullptr, *o_gsu_k = nullptr, *o_recent = nullptr, *o_rgsu = nullptr,
              *o_resu = nullptr;
  bool rgsu = true, resu = true;
};

void run_train(const TrainArgs& a) {
  ModelConfig m;
  TrainConfig t;
  t.threads = default_threads();
  const json file = load_config_file(a.config);
  if (!file.empty()) {
    Keys top(file, a.config);
    if (const json* s = top.section("model")) model_apply(*s, m, a.config + ".model");
    if (const json* s = top.section("train")) train_apply(*s, t, a.config + ".train");
    top.finish();
  }
  if (a.o_variant->count()) m.variant = parse_model_variant(a.variant);
  if (a.o_heads->count()) m.n_heads = a.mflags.n_heads;
  if (a.o_gsu_k->count()) m.gsu_k = a.mflags.gsu_k;
  if (a.o_recent->count()) m.recent_len = a.mflags.recent_len;
  if (a.o_rgsu->count()) m.reweight_gsu = a.rgsu;
  if (a.o_resu->count()) m.reweight_esu = a.resu;
  if (a.o_epochs->count()) t.epochs = a.tflags.epochs;
  if (a.o_lr->count()) t.lr = a.tflags.lr;
  if (a.o_batch->count()) t.batch_size = a.tflags.batch_size;
  if (a.o_seed->count()) t.seed = a.tflags.seed;
  if (a.o_threads->count()) t.threads = a.tflags.threads;
  if (a.o_opt->count()) t.optimizer = parse_optimizer(a.optimizer);

  const Dataset d = load_dataset(a.data);
  ClusterStore store;
  if (!a.store.empty()) {
    store = load_clusters(a.store);
    m.init_seed = store.embed_seed;
  } else if (m.variant == ModelVariant::Full) {
    throw config_error("train: the full model needs --store");
  }
  if (a.o_init->count()) m.init_seed = a.mflags.init_seed;
  m.validate();
  t.validate();

  Corpus corpus = assemble_corpus(d, store, m);
  CtrModel model = CtrModel::init(d.catalog.schema(), corpus.data.states.size(), m);
  std::printf("training %s: %zu users, %zu train / %zu test impressions, %zu parameters\n",
              model_variant_name(m.variant), corpus.data.states.size(), corpus.train_idx.size(),
              corpus.test_idx.size(), model.parameter_count());
  const TrainResult res = train(model, d.catalog, corpus.data, t, &corpus.train_idx);
  for (std::size_t e = 0; e < res.epoch_loss.size(); ++e)
    std::printf("epoch %zu loss %.6f (%.2fs)\n", e, res.epoch_loss[e], res.epoch_seconds[e]);

  const json cfg = json{{"model", model_json(m)}, {"train", train_json(t)}};
  store_model(model, a.out, cfg.dump());
  std::string loss = "# longrec-loss-curve v1\n# config " + cfg.dump() + "\n";
  for (double v : res.epoch_loss) {
    loss += fmt(v);
    loss += '\n';
  }
  write_file(a.loss_out.empty() ? a.out + ".loss" : a.loss_out, loss);

  // Wall times live in the log file, never in the primary artifacts above.
  std::uint64_t cfg_hash = 1469598103934665603ULL;
  for (const char ch : cfg.dump()) {
    cfg_hash ^= static_cast<unsigned char>(ch);
    cfg_hash *= 1099511628211ULL;
  }
  std::string log = "# longrec-train-log v1\n";
  log += "seed " + std::to_string(t.seed) + "\n";
  char hash_buf[20];
  std::snprintf(hash_buf, sizeof(hash_buf), "%016llx",
                static_cast<unsigned long long>(cfg_hash));
  log += "config_hash " + std::string(hash_buf) + "\n";
  for (std::size_t e = 0; e < res.epoch_loss.size(); ++e)
    log += "epoch " + std::to_string(e) + " loss " + fmt(res.epoch_loss[e]) + " seconds " +
           fmt(res.epoch_seconds[e]) + "\n";
  write_file(a.out + ".trainlog", log);
  std::printf("model -> %s\n", a.out.c_str());
}

// ---- eval ----

struct EvalArgs {
  std::string config, data, store, model, out, csv, name = "eval";
  int recall_users = 20;
  int threads = 0;
};

void run_eval(const EvalArgs& a) {
  EvalOptions opts;
  opts.name = a.name;
  opts.recall_users = a.recall_users;
  opts.threads = a.threads > 0 ? a.threads : default_threads();
  const json file = load_config_file(a.config);
  if (!file.empty()) {
    Keys top(file, a.config);
    if (const json* s = top.section("eval")) {
      Keys k(*s, a.config + ".eval");
      k.get("recall_users", opts.recall_users);
      k.get("threads", opts.threads);
      k.get("name", opts.name);
      k.finish();
    }
    top.finish();
  }

  const Dataset d = load_dataset(a.data);
  std::string model_cfg;
  const CtrModel model = load_model(a.model, &model_cfg);
  if (model.schema.fingerprint() != d.catalog.schema().fingerprint())
    throw data_error("model was trained against a different catalog schema");
  ClusterStore store;
  if (!a.store.empty()) store = load_clusters(a.store);
  else if (model.cfg.variant == ModelVariant::Full)
    throw config_error("eval: the full model needs --store");

  const Corpus corpus = assemble_corpus(d, store, model.cfg);
  if (static_cast<Eigen::Index>(corpus.data.states.size()) != model.user_table.rows())
    throw data_error("model user table covers " + std::to_string(model.user_table.rows()) +
                     " users, data has " + std::to_string(corpus.data.states.size()));
  const EvalReport report = evaluate(model, d, store, corpus, opts);

  const std::string text = report_text(report, model_cfg);
  if (!a.out.empty()) write_file(a.out, text);
  if (!a.csv.empty()) {
    AblationTable t;
    t.rows.push_back(report);
    write_file(a.csv, ablation_csv(t));
  }
  std::fputs(text.c_str(), stdout);
}

// ---- score ----

struct ScoreArgs {
  std::string data, store, model;
  std::uint64_t user = 0;
  std::uint64_t target = 0;
};

void run_score(const ScoreArgs& a) {
  Dataset d = load_dataset(a.data, /*with_impressions=*/false);
  const CtrModel model = load_model(a.model);
  if (model.schema.fingerprint() != d.catalog.schema().fingerprint())
    throw data_error("model was trained against a different catalog schema");
  ClusterStore store;
  if (!a.store.empty()) store = load_clusters(a.store);
  else if (model.cfg.variant == ModelVariant::Full)
    throw config_error("score: the full model needs --store");

  std::size_t row = d.sequences.size();
  for (std::size_t i = 0; i < d.sequences.size(); ++i)
    if (d.sequences[i].user_id == a.user) {
      row = i;
      break;
    }
  if (row == d.sequences.size())
    throw data_error("unknown user " + std::to_string(a.user));
  if (static_cast<Eigen::Index>(row) >= model.user_table.rows())
    throw data_error("user row " + std::to_string(row) + " outside the model's user table");
  if (!d.catalog.contains(a.target))
    throw data_error("unknown item " + std::to_string(a.target));

  const ClusterStoreEntry* entry = nullptr;
  for (const auto& e : store.entries)
    if (e.hist.user_id == a.user) {
      entry = &e;
      break;
    }
  static const CompressedHistory kEmpty{};
  static const std::vector<VirtualItem> kNoItems;
  const UserState state =
      make_user_state(entry ? entry->hist : kEmpty, entry ? entry->items : kNoItems,
                      d.sequences[row], d.catalog, model.cfg, static_cast<std::uint32_t>(row));

  const ForwardResult r = forward(model, d.catalog, state, a.target);
  std::printf("user %llu target %llu\n", static_cast<unsigned long long>(a.user),
              static_cast<unsigned long long>(a.target));
  std::printf("probability %.10f\n", r.prob);
  if (r.cold) std::printf("note: no long-term history\n");
  if (!r.retrieved.empty()) {
    std::printf("retrieved %zu units (selection head 0)\n", r.retrieved.size());
    std::printf("%6s %6s %14s %14s\n", "unit", "size", "score", "weight");
    double weight_sum = 0.0;
    for (std::size_t i = 0; i < r.retrieved.size(); ++i) {
      const int pos = r.retrieved[i];
      weight_sum += r.esu_weights[static_cast<Eigen::Index>(i)];
      std::printf("%6d %6lld %14.6f %14.10f\n", pos,
                  static_cast<long long>(state.attn.sizes[static_cast<std::size_t>(pos)]),
                  r.retrieval_scores[static_cast<Eigen::Index>(i)],
                  r.esu_weights[static_cast<Eigen::Index>(i)]);
    }
    std::printf("weight_sum %.12f\n", weight_sum);
  }
}

// ---- ablate ----

struct AblateArgs {
  std::string config, data, out;
  bool baselines = false;
  AblationConfig flags;
  CLI::Option *o_epochs = nullptr, *o_seed = nullptr, *o_threads = nullptr,
              *o_recall = nullptr;
};

void run_ablate(const AblateArgs& a) {
  AblationConfig c;
  c.train.threads = default_threads();
  const json file = load_config_file(a.config);
  if (!file.empty()) {
    Keys top(file, a.config);
    if (const json* s = top.section("compressor")) comp_apply(*s, c.comp, a.config + ".compressor");
    if (const json* s = top.section("model")) model_apply(*s, c.model, a.config + ".model");
    if (const json* s = top.section("train")) train_apply(*s, c.train, a.config + ".train");
    if (const json* s = top.section("ablate")) {
      Keys k(*s, a.config + ".ablate");
      k.get("include_baselines", c.include_baselines);
      k.get("recall_users", c.recall_users);
      std::vector<std::string> variants;
      k.get("variants", variants);
      if (!variants.empty()) {
        c.variants.clear();
        for (const auto& v : variants) c.variants.push_back(parse_variant(v));
      }
      k.finish();
    }
    top.finish();
  }
  if (a.baselines) c.include_baselines = true;
  if (a.o_epochs->count()) c.train.epochs = a.flags.train.epochs;
  if (a.o_seed->count()) c.train.seed = a.flags.train.seed;
  if (a.o_threads->count()) c.train.threads = a.flags.train.threads;
  if (a.o_recall->count()) c.recall_users = a.flags.recall_users;

  const Dataset d = load_dataset(a.data);
  const auto t0 = std::chrono::steady_clock::now();
  const AblationTable table = run_ablation(d, c);
  fs::create_directories(a.out);
  write_file(a.out + "/ablation.csv", ablation_csv(table));
  write_file(a.out + "/timings.csv", timings_csv(table));
  std::fputs(ablation_csv(table).c_str(), stdout);
  std::printf("ablation wall_seconds %.1f -> %s\n", seconds_since(t0), a.out.c_str());
}

// ---- bench ----

struct BenchArgs {
  std::string config, data;
  int reps = 5;
  std::uint64_t log_records = 1'000'000;
  double mem_budget_mb = 1024.0;
};

double median_seconds(int reps, const std::function<void()>& fn) {
  std::vector<double> times;
  times.reserve(static_cast<std::size_t>(reps));
  fn();  // warmup
  for (int i = 0; i < reps; ++i) {
    const auto t0 = std::chrono::steady_clock::now();
    fn();
    times.push_back(seconds_since(t0));
  }
  std::sort(times.begin(), times.end());
  return times[times.size() / 2];
}

double vm_hwm_mb() {
  std::ifstream in("/proc/self/status");
  std::string key;
  while (in >> key) {
    if (key == "VmHWM:") {
      double kb = 0.0;
      in >> kb;
      return kb / 1024.0;
    }
    in.ignore(std::numeric_limits<std::streamsize>::max(), '\n');
  }
  return 0.0;
}

void bench_row(const char* name, double seconds, const char* note = "") {
  std::printf("%-28s %12.3f ms  %s\n", name, seconds * 1e3, note);
}

void run_bench(const BenchArgs& a) {
  int reps = a.reps;
  std::uint64_t log_records = a.log_records;
  double budget_mb = a.mem_budget_mb;
  const json file = load_config_file(a.config);
  if (!file.empty()) {
    Keys top(file, a.config);
    if (const json* s = top.section("bench")) {
      Keys k(*s, a.config + ".bench");
      k.get("reps", reps);
      k.get("log_records", log_records);
      k.get("mem_budget_mb", budget_mb);
      k.finish();
    }
    top.finish();
  }
  if (reps < 1) throw config_error("bench: reps must be >= 1");
  std::printf("bench: median of %d runs\n", reps);

  // Log round trip at scale, against the configured memory budget.
  {
    BehaviorSequence big;
    big.user_id = 0;
    big.records.reserve(log_records);
    Rng rng(7);
    std::int64_t ts = 0;
    for (std::uint64_t i = 0; i < log_records; ++i) {
      ts += 1 + static_cast<std::int64_t>(rng.uniform_index(50));
      big.records.push_back({rng.uniform_index(100000), rng.uniform(), ts});
    }
    const std::string path =
        (fs::temp_directory_path() / "longrec_bench_log.tsv").string();
    const auto t0 = std::chrono::steady_clock::now();
    store_behaviors({big}, path);
    const double store_s = seconds_since(t0);
    const double before_mb = vm_hwm_mb();
    const auto t1 = std::chrono::steady_clock::now();
    const auto loaded = load_behaviors(path);
    const double load_s = seconds_since(t1);
    const double after_mb = vm_hwm_mb();
    bench_row("log store (1 pass)", store_s,
              (std::to_string(log_records) + " records").c_str());
    const bool ok = after_mb <= budget_mb;
    bench_row("log load (1 pass)", load_s,
              ("records " + std::to_string(loaded[0].records.size()) + ", peak rss " +
               fmt(after_mb) + " MB (was " + fmt(before_mb) + "), budget " + fmt(budget_mb) +
               " MB: " + (ok ? "within" : "EXCEEDED"))
                  .c_str());
    fs::remove(path);
  }

  // Single-row workload keeps the table well-formed without a dataset.
  Dataset d;
  if (!a.data.empty()) {
    d = load_dataset(a.data, /*with_impressions=*/false);
  } else {
    GenConfig g;
    g.n_users = 1;
    g.n_items = 50;
    g.n_centers = 4;
    g.len_median_low = g.len_median_med = g.len_median_high = 1.0;
    g.len_sigma = 0.0;
    g.impressions_per_user = 1;
    Dataset tiny = generate(g);
    d.catalog = std::move(tiny.catalog);
    d.sequences = std::move(tiny.sequences);
  }

  std::size_t longest = 0;
  for (std::size_t i = 0; i < d.sequences.size(); ++i)
    if (d.sequences[i].length() > d.sequences[longest].length()) longest = i;
  const BehaviorSequence& seq = d.sequences[longest];
  if (seq.length() == 0) {
    std::printf("no behaviors available, skipping attention rows\n");
    return;
  }

  const EmbeddingTable tables = EmbeddingTable::init(d.catalog.schema(), Rng(0));
  const EmbedLayout layout = EmbedLayout::of(d.catalog.schema());
  const RowMatrixXd emb = embed_behaviors(seq, d.catalog, tables);

  CompressorConfig cc;
  const ClusterStore store = [&] {
    ClusterStore s;
    ClusterStoreEntry e;
    e.hist = compress(seq, emb, cc);
    e.items = build_virtual_items(e.hist, seq, d.catalog, emb);
    s.entries.push_back(std::move(e));
    return s;
  }();
  bench_row("compress (longest user)",
            median_seconds(reps, [&] { compress(seq, emb, cc); }),
            ("T " + std::to_string(seq.length()) + " -> T_hat " +
             std::to_string(store.entries[0].hist.clusters.size()))
                .c_str());

  Rng prng(1);
  const auto h_dim = static_cast<int>(layout.inherent_dim);
  const auto n_cross = static_cast<int>(d.catalog.schema().cross_count());
  const AttentionParams params = AttentionParams::init(h_dim, n_cross, 1, 32, 32, 32, prng);
  const HeadParams& head = params.heads[0];
  const Eigen::VectorXd target_full =
      embed_item(d.catalog.normalized_features(seq.records[0].item_id), d.catalog.schema(),
                 tables);
  const Eigen::VectorXd q = target_full.head(h_dim);

  const SplitEmbeddings raw_split = split_embeddings(emb, layout);
  const std::vector<std::int64_t> raw_sizes(seq.length(), 1);
  const double raw_s =
      median_seconds(reps, [&] { relevance(q, raw_split, head, raw_sizes); });
  bench_row("gsu scoring, raw items", raw_s, ("T " + std::to_string(seq.length())).c_str());

  const auto& entry = store.entries[0];
  RowMatrixXd virt(static_cast<Eigen::Index>(entry.items.size()),
                   static_cast<Eigen::Index>(layout.total()));
  std::vector<std::int64_t> sizes;
  for (std::size_t c = 0; c < entry.items.size(); ++c) {
    virt.row(static_cast<Eigen::Index>(c)) =
        embed_virtual_item(entry.items[c], d.catalog.schema(), tables).transpose();
    sizes.push_back(static_cast<std::int64_t>(entry.hist.clusters[c].size()));
  }
  const SplitEmbeddings virt_split = split_embeddings(virt, layout);
  const double clustered_s =
      median_seconds(reps, [&] { relevance(q, virt_split, head, sizes); });
  bench_row("gsu scoring, clusters", clustered_s,
            ("T_hat " + std::to_string(sizes.size()) + ", speedup " +
             fmt(clustered_s > 0 ? raw_s / clustered_s : 0.0) + "x")
                .c_str());

  const RelevanceScores scores = relevance(q, virt_split, head, sizes);
  const std::vector<int> picks = gsu_topk(scores.alpha_prime, 100);
  SplitEmbeddings topk;
  topk.k_h.resize(static_cast<Eigen::Index>(picks.size()), virt_split.k_h.cols());
  topk.k_c.resize(static_cast<Eigen::Index>(picks.size()), virt_split.k_c.cols());
  std::vector<std::int64_t> topk_sizes;
  for (std::size_t i = 0; i < picks.size(); ++i) {
    topk.k_h.row(static_cast<Eigen::Index>(i)) = virt_split.k_h.row(picks[i]);
    topk.k_c.row(static_cast<Eigen::Index>(i)) = virt_split.k_c.row(picks[i]);
    topk_sizes.push_back(sizes[static_cast<std::size_t>(picks[i])]);
  }
  bench_row("esu head (top-100)",
            median_seconds(reps, [&] { esu_head(q, topk, head, topk_sizes); }),
            ("k " + std::to_string(picks.size())).c_str());

  // Inherent projection: every row through a GEMV vs gathered from the cache.
  const double uncached_s =
      median_seconds(reps, [&] { project_inherent(raw_split.k_h, head.w_h); });
  InherentCache cache;
  for (std::size_t i = 0; i < seq.length(); ++i)
    cache.project(seq.records[i].item_id, raw_split.k_h.row(static_cast<Eigen::Index>(i)),
                  head.w_h);
  const double cached_s = median_seconds(reps, [&] {
    RowMatrixXd out(raw_split.k_h.rows(), head.w_h.cols());
    for (std::size_t i = 0; i < seq.length(); ++i)
      out.row(static_cast<Eigen::Index>(i)) = cache.project(
          seq.records[i].item_id, raw_split.k_h.row(static_cast<Eigen::Index>(i)), head.w_h);
  });
  bench_row("inherent projection, fresh", uncached_s,
            ("rows " + std::to_string(seq.length())).c_str());
  bench_row("inherent projection, cache", cached_s,
            ("speedup " + fmt(cached_s > 0 ? uncached_s / cached_s : 0.0) + "x, hits " +
             std::to_string(cache.hits()))
                .c_str());
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"long-history CTR pipeline: compress behavior logs into cluster stores and "
               "train cluster-aware target-attention models"};
  app.require_subcommand(1);

  GenArgs gen;
  auto* cgen = app.add_subcommand("gen-data", "generate a synthetic dataset directory");
  cgen->add_option("--config", gen.config, "JSON config file (section: gen)");
  cgen->add_option("--out", gen.out, "output directory")->required();
  gen.o_users = cgen->add_option("--users", gen.flags.n_users, "user count");
  gen.o_items = cgen->add_option("--items", gen.flags.n_items, "item count");
  gen.o_centers = cgen->add_option("--centers", gen.flags.n_centers, "latent interest centers");
  gen.o_seed = cgen->add_option("--seed", gen.flags.seed, "master seed");
  gen.o_impr = cgen->add_option("--impressions", gen.flags.impressions_per_user,
                                "impressions per user");
  gen.o_test = cgen->add_option("--test-frac", gen.flags.test_frac, "test fraction");
  gen.o_maxlen = cgen->add_option("--max-len", gen.flags.max_len, "history length cap");
  cgen->callback([&] { run_gen(gen); });

  CompressArgs comp;
  auto* ccomp = app.add_subcommand("compress", "cluster behavior histories into a store");
  ccomp->add_option("--config", comp.config, "JSON config file (sections: compressor, embed_seed)");
  ccomp->add_option("--data", comp.data, "dataset directory")->required();
  ccomp->add_option("--out", comp.out, "cluster store file")->required();
  comp.o_variant = ccomp->add_option("--variant", comp.variant,
                                     "adaptive|binary|balanced_binary");
  comp.o_groups = ccomp->add_option("--groups", comp.flags.group_count, "completion groups M");
  comp.o_gamma = ccomp->add_option("--gamma", comp.flags.max_cluster_size, "max cluster size");
  comp.o_iters = ccomp->add_option("--iters", comp.flags.kmeans_max_iters, "k-means iterations");
  comp.o_kseed = ccomp->add_option("--kmeans-seed", comp.flags.kmeans_seed, "k-means seed");
  comp.o_eseed = ccomp->add_option("--embed-seed", comp.embed_seed,
                                   "embedding snapshot seed");
  comp.o_depth = ccomp->add_option("--max-depth", comp.flags.max_depth, "recursion depth cap");
  ccomp->callback([&] { run_compress(comp); });

  TrainArgs tr;
  auto* ctrain = app.add_subcommand("train", "train a CTR model on the train split");
  ctrain->add_option("--config", tr.config, "JSON config file (sections: model, train)");
  ctrain->add_option("--data", tr.data, "dataset directory")->required();
  ctrain->add_option("--store", tr.store, "cluster store file (full variant)");
  ctrain->add_option("--out", tr.out, "model output file")->required();
  ctrain->add_option("--loss-out", tr.loss_out, "loss curve file (default <out>.loss)");
  tr.o_variant = ctrain->add_option("--variant", tr.variant, "full|short_ta|avg_pool");
  tr.o_heads = ctrain->add_option("--heads", tr.mflags.n_heads, "attention heads");
  tr.o_gsu_k = ctrain->add_option("--gsu-k", tr.mflags.gsu_k, "retrieved units");
  tr.o_recent = ctrain->add_option("--recent", tr.mflags.recent_len, "recent-history window");
  tr.o_rgsu = ctrain->add_flag("--reweight-gsu,!--no-reweight-gsu", tr.rgsu,
                               "ln n term in retrieval scores");
  tr.o_resu = ctrain->add_flag("--reweight-esu,!--no-reweight-esu", tr.resu,
                               "ln n term in aggregation softmax");
  tr.o_epochs = ctrain->add_option("--epochs", tr.tflags.epochs, "training epochs");
  tr.o_lr = ctrain->add_option("--lr", tr.tflags.lr, "learning rate");
  tr.o_batch = ctrain->add_option("--batch", tr.tflags.batch_size, "batch size");
  tr.o_seed = ctrain->add_option("--seed", tr.tflags.seed, "shuffle seed");
  tr.o_init = ctrain->add_option("--init-seed", tr.mflags.init_seed,
                                 "parameter init seed (defaults to the store's embed seed)");
  tr.o_threads = ctrain->add_option("--threads", tr.tflags.threads, "worker threads");
  tr.o_opt = ctrain->add_option("--optimizer", tr.optimizer, "adam|sgd");
  ctrain->callback([&] { run_train(tr); });

  EvalArgs ev;
  auto* ceval = app.add_subcommand("eval", "evaluate a trained model on the test split");
  ceval->add_option("--config", ev.config, "JSON config file (section: eval)");
  ceval->add_option("--data", ev.data, "dataset directory")->required();
  ceval->add_option("--store", ev.store, "cluster store file");
  ceval->add_option("--model", ev.model, "model file")->required();
  ceval->add_option("--out", ev.out, "report file");
  ceval->add_option("--csv", ev.csv, "metrics CSV file");
  ceval->add_option("--name", ev.name, "report row name");
  ceval->add_option("--recall-users", ev.recall_users, "users sampled for GSU recall");
  ceval->add_option("--threads", ev.threads, "worker threads");
  ceval->callback([&] { run_eval(ev); });

  ScoreArgs sc;
  auto* cscore = app.add_subcommand("score", "score one (user, target) pair and dump retrieval");
  cscore->add_option("--data", sc.data, "dataset directory")->required();
  cscore->add_option("--store", sc.store, "cluster store file");
  cscore->add_option("--model", sc.model, "model file")->required();
  cscore->add_option("--user", sc.user, "user id")->required();
  cscore->add_option("--target", sc.target, "target item id")->required();
  cscore->callback([&] { run_score(sc); });

  AblateArgs ab;
  auto* cablate = app.add_subcommand("ablate", "reweighting x clustering-variant grid");
  cablate->add_option("--config", ab.config,
                      "JSON config file (sections: compressor, model, train, ablate)");
  cablate->add_option("--data", ab.data, "dataset directory")->required();
  cablate->add_option("--out", ab.out, "output directory")->required();
  cablate->add_flag("--baselines", ab.baselines, "include short_ta and avg_pool rows");
  ab.o_epochs = cablate->add_option("--epochs", ab.flags.train.epochs, "training epochs");
  ab.o_seed = cablate->add_option("--seed", ab.flags.train.seed, "training seed");
  ab.o_threads = cablate->add_option("--threads", ab.flags.train.threads, "worker threads");
  ab.o_recall = cablate->add_option("--recall-users", ab.flags.recall_users,
                                    "users sampled for GSU recall");
  cablate->callback([&] { run_ablate(ab); });

  BenchArgs be;
  auto* cbench = app.add_subcommand("bench", "latency table for the pipeline stages");
  cbench->add_option("--config", be.config, "JSON config file (section: bench)");
  cbench->add_option("--data", be.data, "dataset directory (optional)");
  cbench->add_option("--reps", be.reps, "timed repetitions");
  cbench->add_option("--log-records", be.log_records, "synthetic log size for the io row");
  cbench->add_option("--mem-budget-mb", be.mem_budget_mb, "peak rss budget for the io row");
  cbench->callback([&] { run_bench(be); });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  } catch (const Error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    switch (e.kind()) {
      case ErrorKind::Config: return 2;
      case ErrorKind::Data: return 3;
      case ErrorKind::Numeric: return 4;
    }
    return 1;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "unexpected error: %s\n", e.what());
    return 1;
  }
  return 0;
}
