#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <unordered_map>
#include <vector>

#include "longrec/embedding.hpp"
#include "longrec/rng.hpp"

namespace longrec {

// Behavior keys split by feature family: K = [K_h | K_c]. K_h holds the
// id-like field embeddings (width H), K_c the cross-feature embeddings
// (width 8 per cross feature). Numericals do not enter attention keys.
struct SplitEmbeddings {
  RowMatrixXd k_h;
  RowMatrixXd k_c;

  Eigen::Index rows() const { return k_h.rows(); }
};

SplitEmbeddings split_embeddings(const RowMatrixXd& full, const EmbedLayout& layout);

// One attention head. w_c stores the per-cross-feature contraction vectors
// as columns (8 x J); applying them feature-by-feature equals multiplying
// K_c by the block-diagonal matrix diag(w_c_1, ..., w_c_J).
struct HeadParams {
  Eigen::MatrixXd w_q;   // H x d_k
  Eigen::MatrixXd w_h;   // H x d_k
  Eigen::MatrixXd w_c;   // 8 x J
  Eigen::VectorXd beta;  // J
  Eigen::MatrixXd w_v;   // (H + 8J) x d_v
};

struct AttentionParams {
  std::vector<HeadParams> heads;
  Eigen::MatrixXd w_o;  // (heads * d_v) x d_out
  int d_k = 0;
  int d_v = 0;

  int n_heads() const { return static_cast<int>(heads.size()); }
  int d_out() const { return static_cast<int>(w_o.cols()); }
  std::size_t parameter_count() const;

  // Uniform init in [-1/sqrt(fan_in), 1/sqrt(fan_in)], beta starts at zero.
  static AttentionParams init(int h_dim, int n_cross, int n_heads, int d_k, int d_v, int d_out,
                              Rng& rng);
};

struct RelevanceScores {
  Eigen::VectorXd alpha;        // raw target-attention score
  Eigen::VectorXd alpha_prime;  // alpha + ln n
};

// K_h W^h, row by row. The cache below must reproduce these rows bit for bit.
RowMatrixXd project_inherent(const RowMatrixXd& k_h, const Eigen::MatrixXd& w_h);

// Memoizes inherent projections per item id. The id-like feature block of an
// item never varies across requests, so repeated items are gathered instead
// of recomputed. Call invalidate() whenever w_h changes.
class InherentCache {
 public:
  const Eigen::RowVectorXd& project(ItemId id, Eigen::Ref<const Eigen::RowVectorXd> k_h_row,
                                    const Eigen::MatrixXd& w_h);
  void invalidate();

  std::size_t hits() const { return hits_; }
  std::size_t misses() const { return misses_; }

 private:
  std::unordered_map<ItemId, Eigen::RowVectorXd> rows_;
  std::size_t hits_ = 0;
  std::size_t misses_ = 0;
};

// Per-feature 8->1 contraction of the cross block: column j of the result is
// K_c[:, 8j:8j+8] * w_c_j.
Eigen::MatrixXd project_cross(const RowMatrixXd& k_c, const Eigen::MatrixXd& w_c);

// alpha = (K_h W^h)(W^q^T q) / sqrt(d_k) + (K_c W^c) beta, then
// alpha_prime = alpha + ln n. d_k is the column count of W^q; all n[i] >= 1.
RelevanceScores relevance(const Eigen::VectorXd& q, const SplitEmbeddings& split,
                          const HeadParams& head, const std::vector<std::int64_t>& n);

// Indices of the k largest scores, ties to the lower index. Returns all
// indices (sorted by the same rule) when fewer than k are available.
std::vector<int> gsu_topk(const Eigen::VectorXd& scores, int k);

// Max-subtracted softmax; safe for entries anywhere in double range.
Eigen::VectorXd softmax_stable(const Eigen::VectorXd& v);

// One head over the retrieved clusters: softmax(alpha') weights applied to
// rows of [K_h | K_c] W^v. `reweight` off drops the ln n term (softmax of raw
// alpha). Empty input yields a zero vector and sets *cold. Scores are
// recomputed from q unless `scores_in` hands over the selection scores
// already produced by the retrieval stage.
Eigen::VectorXd esu_head(const Eigen::VectorXd& q, const SplitEmbeddings& split_topk,
                         const HeadParams& head, const std::vector<std::int64_t>& n_topk,
                         bool reweight = true, Eigen::VectorXd* weights_out = nullptr,
                         bool* cold = nullptr, const Eigen::VectorXd* scores_in = nullptr);

// Concat of all head outputs projected by W^o.
Eigen::VectorXd long_term_interest(const Eigen::VectorXd& q, const SplitEmbeddings& split_topk,
                                   const AttentionParams& params,
                                   const std::vector<std::int64_t>& n_topk, bool reweight = true,
                                   bool* cold = nullptr);

}  // namespace longrec
