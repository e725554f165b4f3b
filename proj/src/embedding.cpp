#include "longrec/embedding.hpp"

#include <cmath>

#include "longrec/errors.hpp"

namespace longrec {

EmbeddingTable EmbeddingTable::init(const CatalogSchema& schema, Rng rng) {
  EmbeddingTable t;
  t.fields.reserve(schema.categorical.size());
  for (const auto& f : schema.categorical) {
    RowMatrixXd m(f.vocab, f.dim);
    const double bound = 1.0 / std::sqrt(static_cast<double>(f.dim));
    for (Eigen::Index r = 0; r < m.rows(); ++r)
      for (Eigen::Index c = 0; c < m.cols(); ++c) m(r, c) = rng.uniform(-bound, bound);
    t.fields.push_back(std::move(m));
  }
  return t;
}

EmbedLayout EmbedLayout::of(const CatalogSchema& schema) {
  EmbedLayout l;
  l.inherent_dim = schema.inherent_dim();
  l.cross_dim = schema.cross_dim();
  l.numerical_dim = schema.n_numerical();
  return l;
}

Eigen::VectorXd embed_item(const ItemFeatures& features, const CatalogSchema& schema,
                           const EmbeddingTable& tables) {
  const EmbedLayout layout = EmbedLayout::of(schema);
  Eigen::VectorXd out(layout.total());
  std::size_t at_id = 0;
  std::size_t at_cross = layout.inherent_dim;
  for (std::size_t f = 0; f < schema.categorical.size(); ++f) {
    const auto& fld = schema.categorical[f];
    const std::uint32_t idx = features.categorical[f];
    if (idx >= fld.vocab)
      throw data_error("embed_item: field '" + fld.name + "' index " + std::to_string(idx) +
                       " out of vocabulary " + std::to_string(fld.vocab));
    std::size_t& at = fld.kind == FieldKind::Id ? at_id : at_cross;
    out.segment(at, fld.dim) = tables.fields[f].row(idx).transpose();
    at += fld.dim;
  }
  const std::size_t num_at = layout.inherent_dim + layout.cross_dim;
  for (std::size_t i = 0; i < features.numerical.size(); ++i)
    out[num_at + i] = features.numerical[i];
  return out;
}

double cosine(const Eigen::VectorXd& a, const Eigen::VectorXd& b, bool* degenerate) {
  const double na = a.norm();
  const double nb = b.norm();
  if (degenerate) *degenerate = false;
  if (na < 1e-12 || nb < 1e-12) {
    if (degenerate) *degenerate = true;
    return 0.0;
  }
  return a.dot(b) / (na * nb);
}

RowMatrixXd embed_behaviors(const BehaviorSequence& seq, const Catalog& catalog,
                            const EmbeddingTable& tables) {
  const auto& schema = catalog.schema();
  RowMatrixXd m(static_cast<Eigen::Index>(seq.records.size()),
                static_cast<Eigen::Index>(schema.embed_dim()));
  for (std::size_t i = 0; i < seq.records.size(); ++i)
    m.row(static_cast<Eigen::Index>(i)) =
        embed_item(resolve_behavior(catalog, seq.records[i]), schema, tables).transpose();
  return m;
}

}  // namespace longrec
