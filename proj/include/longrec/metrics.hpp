#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "longrec/attention.hpp"
#include "longrec/compressor.hpp"

namespace longrec {

// Rank-based (Mann-Whitney) AUC with average ranks for ties. Empty when only
// one class is present.
std::optional<double> auc(const std::vector<double>& scores, const std::vector<double>& labels);

// Impression-weighted mean of per-user AUC. Users with a single class are
// skipped and counted in *skipped. Empty when no user qualifies.
std::optional<double> gauc(const std::vector<double>& scores, const std::vector<double>& labels,
                           const std::vector<UserId>& user_ids, std::size_t* skipped = nullptr);

// Mean cosine similarity of member embeddings to their cluster centroid.
// Zero-norm items or centroids are skipped and counted. Empty when every
// item was skipped.
std::optional<double> cluster_accuracy(const CompressedHistory& history,
                                       const RowMatrixXd& embeddings,
                                       std::size_t* skipped = nullptr);

// Retrieval fidelity of clustered GSU: score clusters with alpha' and raw
// items with alpha (item-wise, sizes all 1), retrieve the top k clusters, and
// report the fraction of the true top-(k * T/T_hat) items their members
// cover. raw_split has one row per source behavior, cluster_split one per
// cluster.
double gsu_recall(const CompressedHistory& history, const SplitEmbeddings& raw_split,
                  const SplitEmbeddings& cluster_split, const Eigen::VectorXd& q,
                  const HeadParams& head, int k, bool reweight = true);

struct EvalReport {
  std::string name;
  std::optional<double> auc;
  std::optional<double> gauc;
  std::size_t gauc_skipped = 0;
  std::map<std::string, double> cohort_gauc;  // Low / Medium / High history terciles
  std::optional<double> cluster_acc;
  std::optional<double> gsu_recall;
  std::optional<double> compression_ratio;
  std::optional<double> mean_cluster_size;
  double train_seconds = 0.0;
  double compress_seconds = 0.0;
  std::vector<double> loss_curve;
};

}  // namespace longrec
