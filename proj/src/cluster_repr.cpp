#include "longrec/cluster_repr.hpp"

#include <limits>

#include "longrec/errors.hpp"

namespace longrec {

Eigen::VectorXd numerical_repr(const Cluster& cluster, const RowMatrixXd& embeddings,
                               const EmbedLayout& layout) {
  if (cluster.member_rows.empty()) throw data_error("numerical_repr: empty cluster");
  Eigen::VectorXd sum = Eigen::VectorXd::Zero(layout.numerical_dim);
  for (std::int64_t r : cluster.member_rows)
    sum += embeddings.row(r).tail(layout.numerical_dim).transpose();
  return sum / static_cast<double>(cluster.member_rows.size());
}

std::pair<std::vector<std::uint32_t>, ItemId> categorical_repr(const Cluster& cluster,
                                                               const RowMatrixXd& embeddings,
                                                               const BehaviorSequence& seq,
                                                               const Catalog& catalog) {
  if (cluster.member_rows.empty()) throw data_error("categorical_repr: empty cluster");
  double best_d = std::numeric_limits<double>::infinity();
  ItemId best_id = 0;
  std::int64_t best_row = -1;
  for (std::size_t i = 0; i < cluster.member_rows.size(); ++i) {
    const std::int64_t row = cluster.member_rows[i];
    const double d = (embeddings.row(row).transpose() - cluster.centroid).squaredNorm();
    const ItemId id = cluster.member_ids[i];
    if (d < best_d || (d == best_d && id < best_id)) {
      best_d = d;
      best_id = id;
      best_row = row;
    }
  }
  ItemFeatures feats = resolve_behavior(catalog, seq.records[static_cast<std::size_t>(best_row)]);
  return {std::move(feats.categorical), best_id};
}

std::vector<VirtualItem> build_virtual_items(const CompressedHistory& history,
                                             const BehaviorSequence& seq, const Catalog& catalog,
                                             const RowMatrixXd& embeddings) {
  const EmbedLayout layout = EmbedLayout::of(catalog.schema());
  std::vector<VirtualItem> out;
  out.reserve(history.clusters.size());
  for (const Cluster& c : history.clusters) {
    VirtualItem v;
    v.numerical = numerical_repr(c, embeddings, layout);
    auto [cats, donor] = categorical_repr(c, embeddings, seq, catalog);
    v.categorical = std::move(cats);
    v.source_item_id = donor;
    out.push_back(std::move(v));
  }
  return out;
}

Eigen::VectorXd embed_virtual_item(const VirtualItem& item, const CatalogSchema& schema,
                                   const EmbeddingTable& tables) {
  ItemFeatures feats;
  feats.categorical = item.categorical;
  feats.numerical.assign(item.numerical.data(), item.numerical.data() + item.numerical.size());
  return embed_item(feats, schema, tables);
}

}  // namespace longrec
