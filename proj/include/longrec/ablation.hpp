#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "longrec/datagen.hpp"
#include "longrec/io.hpp"
#include "longrec/metrics.hpp"
#include "longrec/model.hpp"

namespace longrec {

// Offline stage: embed every user's history in the embedding-table snapshot
// drawn from embed_seed, compress it, and extract one virtual item per
// cluster. Entry order follows `seqs`.
ClusterStore build_cluster_store(const std::vector<BehaviorSequence>& seqs,
                                 const Catalog& catalog, const CompressorConfig& cfg,
                                 std::uint64_t embed_seed);

struct StoreStats {
  std::uint64_t total_behaviors = 0;
  std::uint64_t total_clusters = 0;
  double compression_ratio = 0.0;  // total_clusters / total_behaviors
  double mean_cluster_size = 0.0;
};

StoreStats store_stats(const ClusterStore& store);

// Mean cosine of member embeddings to their centroids across the whole
// store, measured in the store's own embedding snapshot. Histories are
// re-embedded one user at a time.
std::optional<double> store_cluster_accuracy(const std::vector<BehaviorSequence>& seqs,
                                             const Catalog& catalog, const ClusterStore& store,
                                             std::size_t* skipped = nullptr);

// Per-user states plus impression samples, ready to train. A state exists
// for every sequence; samples keep global timestamp order and split into
// train/test by the impression flag.
struct Corpus {
  TrainSet data;
  std::vector<std::size_t> train_idx, test_idx;
  std::vector<std::int64_t> history_len;  // per state
};

// An empty store leaves every state without clusters, which is all the
// ShortTA and AvgPool variants need. With a non-empty store every user with
// history must have an entry.
Corpus assemble_corpus(const Dataset& data, const ClusterStore& store, const ModelConfig& cfg);

struct EvalOptions {
  std::string name = "run";
  // GSU recall is averaged over one test target for each of this many users
  // (Full variant only; 0 disables).
  int recall_users = 20;
  int threads = 1;
};

// Test-split metrics of a trained model: AUC, GAUC (overall and per
// history-length tercile), plus store-level clustering metrics.
EvalReport evaluate(const CtrModel& model, const Dataset& data, const ClusterStore& store,
                    const Corpus& corpus, const EvalOptions& opts);

struct RunOutcome {
  CtrModel model;
  TrainResult train;
  EvalReport report;
};

// Assemble, train, evaluate. The model config's init_seed doubles as the
// embedding snapshot seed when the store was built with the same value.
RunOutcome train_and_eval(const Dataset& data, const ClusterStore& store, const ModelConfig& mcfg,
                          const TrainConfig& tcfg, const EvalOptions& opts);

struct AblationConfig {
  CompressorConfig comp;  // variant field overridden per row
  ModelConfig model;      // reweight flags overridden per row
  TrainConfig train;
  std::vector<CompressVariant> variants = {CompressVariant::Adaptive, CompressVariant::Binary,
                                           CompressVariant::BalancedBinary};
  bool include_baselines = false;  // add short_ta and avg_pool rows
  int recall_users = 20;
};

struct AblationTable {
  std::vector<EvalReport> rows;
};

// Grid over {reweight GSU on/off} x {reweight ESU on/off} x clustering
// variant; one cluster store per variant, one training per cell.
AblationTable run_ablation(const Dataset& data, const AblationConfig& cfg);

const char* variant_name(CompressVariant v);

// Deterministic plot data (no wall times; those go to timings_csv).
std::string ablation_csv(const AblationTable& table);
std::string timings_csv(const AblationTable& table);
std::string report_text(const EvalReport& report, const std::string& config_json);

}  // namespace longrec
