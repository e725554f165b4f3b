#pragma once

#include <Eigen/Core>
#include <cstdint>
#include <vector>

#include "longrec/compressor.hpp"
#include "longrec/embedding.hpp"
#include "longrec/schema.hpp"

namespace longrec {

// Stand-in item for a whole cluster: categorical indices copied from the
// member nearest to the centroid, numericals averaged over all members.
// Numericals are in normalized space, same as embedding rows.
struct VirtualItem {
  std::vector<std::uint32_t> categorical;
  Eigen::VectorXd numerical;
  ItemId source_item_id = 0;
};

// Elementwise mean of the members' numerical blocks (rows of `embeddings`
// already hold resolved, normalized values).
Eigen::VectorXd numerical_repr(const Cluster& cluster, const RowMatrixXd& embeddings,
                               const EmbedLayout& layout);

// Donor member: argmin of squared distance to the cluster centroid, ties
// broken toward the lowest item id. Returns the donor's resolved categorical
// indices and its item id.
std::pair<std::vector<std::uint32_t>, ItemId> categorical_repr(const Cluster& cluster,
                                                               const RowMatrixXd& embeddings,
                                                               const BehaviorSequence& seq,
                                                               const Catalog& catalog);

// One virtual item per cluster, same order as history.clusters.
std::vector<VirtualItem> build_virtual_items(const CompressedHistory& history,
                                             const BehaviorSequence& seq, const Catalog& catalog,
                                             const RowMatrixXd& embeddings);

// Full embedding of a virtual item, laid out like embed_item output.
Eigen::VectorXd embed_virtual_item(const VirtualItem& item, const CatalogSchema& schema,
                                   const EmbeddingTable& tables);

}  // namespace longrec
