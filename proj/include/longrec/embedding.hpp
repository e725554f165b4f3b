#pragma once

#include <Eigen/Core>
#include <vector>

#include "longrec/rng.hpp"
#include "longrec/schema.hpp"

namespace longrec {

// Row-major: per-row slices (one item / one cluster) stay contiguous.
using RowMatrixXd = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// One matrix per categorical field, vocab x dim, rows initialized uniform in
// [-1/sqrt(dim), 1/sqrt(dim)].
struct EmbeddingTable {
  std::vector<RowMatrixXd> fields;

  static EmbeddingTable init(const CatalogSchema& schema, Rng rng);

  RowMatrixXd& field(std::size_t i) { return fields[i]; }
  const RowMatrixXd& field(std::size_t i) const { return fields[i]; }
};

// Concatenation of per-field embedding rows followed by the numerical
// scalars: [id fields | cross fields | numericals]. Field order within each
// block follows schema declaration order. Throws data_error on an index
// outside its field's vocabulary.
Eigen::VectorXd embed_item(const ItemFeatures& features, const CatalogSchema& schema,
                           const EmbeddingTable& tables);

// Column layout of embed_item output for a schema: id fields first, then
// cross fields, then numericals. Needed to slice inherent/cross blocks.
struct EmbedLayout {
  std::size_t inherent_dim = 0;   // id-field block width
  std::size_t cross_dim = 0;      // 8 * J
  std::size_t numerical_dim = 0;  // N2
  std::size_t total() const { return inherent_dim + cross_dim + numerical_dim; }

  static EmbedLayout of(const CatalogSchema& schema);
};

// Cosine similarity in [-1, 1]. If either norm is below 1e-12 the pair is
// degenerate: returns 0 and sets *degenerate when provided.
double cosine(const Eigen::VectorXd& a, const Eigen::VectorXd& b, bool* degenerate = nullptr);

// Embedding matrix of a behavior sequence, one row per record
// (resolve_behavior + embed_item).
RowMatrixXd embed_behaviors(const BehaviorSequence& seq, const Catalog& catalog,
                            const EmbeddingTable& tables);

}  // namespace longrec
