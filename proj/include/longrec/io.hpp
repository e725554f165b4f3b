#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "longrec/cluster_repr.hpp"
#include "longrec/compressor.hpp"
#include "longrec/model.hpp"
#include "longrec/schema.hpp"

namespace longrec {

// Persistence for every pipeline artifact. Text formats are tab-separated
// with '#' header lines carrying a format version and the effective config;
// binary formats start with a magic tag, version, and byte-order sentinel.
// Doubles round-trip bit-exactly (shortest-form text, raw bits in binary).
// Malformed input throws data_error naming the file, line, and byte offset.

// catalog.tsv: schema as a JSON header line, one row per item.
void store_catalog(const Catalog& catalog, const std::string& path,
                   const std::string& config_json = "");
Catalog load_catalog(const std::string& path, std::string* config_json = nullptr);

// behaviors.tsv: "u <user> <count>" followed by count "b <item> <p> <ts>"
// rows. Zero-length users keep their "u" line, so cold users survive the
// round trip.
void store_behaviors(const std::vector<BehaviorSequence>& seqs, const std::string& path,
                     const std::string& config_json = "");
std::vector<BehaviorSequence> load_behaviors(const std::string& path,
                                             std::string* config_json = nullptr);

// impressions.tsv: one row per impression, global timestamp order preserved.
void store_impressions(const std::vector<Impression>& imps, const std::string& path,
                       const std::string& config_json = "");
std::vector<Impression> load_impressions(const std::string& path,
                                         std::string* config_json = nullptr);

// Cluster store: per user the compressed history (member ids and row
// positions, group ids, centroids) and one virtual item per cluster.
struct ClusterStoreEntry {
  CompressedHistory hist;
  std::vector<VirtualItem> items;
};

struct ClusterStore {
  std::string config_json;
  std::uint64_t schema_fingerprint = 0;
  // Seed of the embedding-table snapshot the clustering ran in. Training
  // starts from the same snapshot so virtual items stay aligned with the
  // model's tables.
  std::uint64_t embed_seed = 0;
  std::vector<ClusterStoreEntry> entries;
};

void store_clusters(const ClusterStore& store, const std::string& path);
ClusterStore load_clusters(const std::string& path);

// Model file: config echo, schema fingerprint, and every parameter tensor.
void store_model(const CtrModel& model, const std::string& path,
                 const std::string& config_json = "");
CtrModel load_model(const std::string& path, std::string* config_json = nullptr);

// Whole-file helpers shared by the CLI and tests.
std::string read_file(const std::string& path);            // data_error if missing
void write_file(const std::string& path, const std::string& bytes);

}  // namespace longrec
