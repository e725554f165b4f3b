#pragma once

#include <Eigen/Core>
#include <cstdint>
#include <vector>

#include "longrec/embedding.hpp"
#include "longrec/rng.hpp"
#include "longrec/schema.hpp"

namespace longrec {

enum class CompressVariant { Adaptive, Binary, BalancedBinary };

struct CompressorConfig {
  int group_count = 5;       // equal-width completion-ratio bins
  int max_cluster_size = 20; // lists shorter than this are emitted as-is
  CompressVariant variant = CompressVariant::Adaptive;
  int kmeans_max_iters = 50;
  std::uint64_t kmeans_seed = 0;
  // Safety valve: a work item at this depth is emitted in chunks instead of
  // being split again (degenerate inputs, e.g. thousands of identical
  // embeddings, would otherwise recurse nearly forever).
  int max_depth = 40;

  void validate() const;
};

struct Cluster {
  std::vector<ItemId> member_ids;
  // Positions of the members in the source sequence; lets representation
  // extraction and eval-time metrics resolve per-behavior features (the same
  // item id can recur with different completion buckets).
  std::vector<std::int64_t> member_rows;
  std::uint32_t group_id = 0;  // 1-based completion-ratio group
  Eigen::VectorXd centroid;    // mean of member embeddings

  std::size_t size() const { return member_ids.size(); }
};

struct CompressStats {
  int max_split_depth = 0;
  std::size_t kmeans_runs = 0;
  std::size_t forced_chunk_emits = 0;  // depth-cap hits
};

struct CompressedHistory {
  UserId user_id = 0;
  std::vector<Cluster> clusters;
  std::uint64_t source_length = 0;
  CompressStats stats;

  std::size_t compressed_length() const { return clusters.size(); }
};

// Completion-ratio group in [1, M]: equal-width bins over [0,1], top edge
// clamped into the last bin.
int get_group(double p, int group_count);

// floor(n^0.3): the split fan-out for a list of n items.
int adaptive_delta(std::int64_t n_items);

// Lloyd's algorithm over the given embedding rows with k-means++ seeding.
// Returns k non-empty member lists (row indices, input order preserved).
// Ties in assignment go to the lowest cluster index; empty clusters are
// repaired by stealing the farthest point from the largest cluster.
// k=2 inputs of up to 12 rows are solved exactly by enumeration (cheaper
// than a Lloyd run and immune to seeding).
// `balanced` (k=2 only) moves points from the larger cluster to the other,
// nearest-to-the-other-centroid first, until sizes differ by at most one.
std::vector<std::vector<std::int64_t>> kmeans_partition(int k,
                                                        const std::vector<std::int64_t>& rows,
                                                        const RowMatrixXd& embeddings,
                                                        Rng& rng, int max_iters,
                                                        bool balanced = false);

// Compress one behavior sequence: records are first binned by completion
// ratio, then each bin is recursively split (fan-out by variant) until every
// emitted cluster has fewer than max_cluster_size members.
// `embeddings` holds one row per record (see embed_behaviors).
CompressedHistory compress(const BehaviorSequence& seq, const RowMatrixXd& embeddings,
                           const CompressorConfig& cfg);

}  // namespace longrec
