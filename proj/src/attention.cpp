#include "longrec/attention.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "longrec/errors.hpp"

namespace longrec {

namespace {

void fill_uniform(Eigen::MatrixXd& m, double bound, Rng& rng) {
  for (Eigen::Index r = 0; r < m.rows(); ++r)
    for (Eigen::Index c = 0; c < m.cols(); ++c) m(r, c) = (rng.uniform() * 2.0 - 1.0) * bound;
}

}  // namespace

SplitEmbeddings split_embeddings(const RowMatrixXd& full, const EmbedLayout& layout) {
  if (full.cols() != layout.total())
    throw config_error("split_embeddings: matrix width " + std::to_string(full.cols()) +
                       " does not match layout width " + std::to_string(layout.total()));
  SplitEmbeddings s;
  s.k_h = full.leftCols(layout.inherent_dim);
  s.k_c = full.middleCols(layout.inherent_dim, layout.cross_dim);
  return s;
}

std::size_t AttentionParams::parameter_count() const {
  std::size_t n = static_cast<std::size_t>(w_o.size());
  for (const HeadParams& h : heads)
    n += static_cast<std::size_t>(h.w_q.size() + h.w_h.size() + h.w_c.size() + h.beta.size() +
                                  h.w_v.size());
  return n;
}

AttentionParams AttentionParams::init(int h_dim, int n_cross, int n_heads, int d_k, int d_v,
                                      int d_out, Rng& rng) {
  if (h_dim < 1 || n_heads < 1 || d_k < 1 || d_v < 1 || d_out < 1 || n_cross < 0)
    throw config_error("AttentionParams::init: dimensions must be positive");
  AttentionParams p;
  p.d_k = d_k;
  p.d_v = d_v;
  p.heads.resize(static_cast<std::size_t>(n_heads));
  const int split_dim = h_dim + kCrossFieldDim * n_cross;
  for (HeadParams& h : p.heads) {
    h.w_q.resize(h_dim, d_k);
    fill_uniform(h.w_q, 1.0 / std::sqrt(static_cast<double>(h_dim)), rng);
    h.w_h.resize(h_dim, d_k);
    fill_uniform(h.w_h, 1.0 / std::sqrt(static_cast<double>(h_dim)), rng);
    h.w_c.resize(kCrossFieldDim, n_cross);
    fill_uniform(h.w_c, 1.0 / std::sqrt(static_cast<double>(kCrossFieldDim)), rng);
    h.beta = Eigen::VectorXd::Zero(n_cross);
    h.w_v.resize(split_dim, d_v);
    fill_uniform(h.w_v, 1.0 / std::sqrt(static_cast<double>(split_dim)), rng);
  }
  p.w_o.resize(static_cast<Eigen::Index>(n_heads) * d_v, d_out);
  fill_uniform(p.w_o, 1.0 / std::sqrt(static_cast<double>(n_heads * d_v)), rng);
  return p;
}

RowMatrixXd project_inherent(const RowMatrixXd& k_h, const Eigen::MatrixXd& w_h) {
  if (k_h.cols() != w_h.rows())
    throw config_error("project_inherent: K_h width " + std::to_string(k_h.cols()) +
                       " vs W^h rows " + std::to_string(w_h.rows()));
  RowMatrixXd out(k_h.rows(), w_h.cols());
  for (Eigen::Index i = 0; i < k_h.rows(); ++i) out.row(i) = k_h.row(i) * w_h;
  return out;
}

const Eigen::RowVectorXd& InherentCache::project(ItemId id,
                                                 Eigen::Ref<const Eigen::RowVectorXd> k_h_row,
                                                 const Eigen::MatrixXd& w_h) {
  auto it = rows_.find(id);
  if (it != rows_.end()) {
    ++hits_;
    return it->second;
  }
  if (k_h_row.cols() != w_h.rows())
    throw config_error("InherentCache: row width " + std::to_string(k_h_row.cols()) +
                       " vs W^h rows " + std::to_string(w_h.rows()));
  ++misses_;
  return rows_.emplace(id, k_h_row * w_h).first->second;
}

void InherentCache::invalidate() { rows_.clear(); }

Eigen::MatrixXd project_cross(const RowMatrixXd& k_c, const Eigen::MatrixXd& w_c) {
  const Eigen::Index j = w_c.cols();
  if (w_c.rows() != kCrossFieldDim || k_c.cols() != kCrossFieldDim * j)
    throw config_error("project_cross: K_c width " + std::to_string(k_c.cols()) +
                       " vs " + std::to_string(j) + " cross features");
  Eigen::MatrixXd out(k_c.rows(), j);
  for (Eigen::Index f = 0; f < j; ++f)
    out.col(f) = k_c.middleCols(f * kCrossFieldDim, kCrossFieldDim) * w_c.col(f);
  return out;
}

RelevanceScores relevance(const Eigen::VectorXd& q, const SplitEmbeddings& split,
                          const HeadParams& head, const std::vector<std::int64_t>& n) {
  if (q.size() != head.w_q.rows() || q.size() != head.w_h.rows() || q.size() != split.k_h.cols())
    throw config_error("relevance: query width mismatch");
  if (static_cast<Eigen::Index>(n.size()) != split.rows())
    throw config_error("relevance: size vector length mismatch");
  const int d_k = static_cast<int>(head.w_q.cols());

  // (K_h W^h)(W^q^T q) regrouped as K_h (W^h (W^q^T q)): one T-length GEMV
  // instead of a T x d_k intermediate.
  const Eigen::VectorXd b = head.w_q.transpose() * q;
  const Eigen::VectorXd hq = head.w_h * b;

  RelevanceScores s;
  s.alpha = (split.k_h * hq) / std::sqrt(static_cast<double>(d_k));
  if (head.beta.size() > 0) s.alpha += project_cross(split.k_c, head.w_c) * head.beta;
  s.alpha_prime.resize(s.alpha.size());
  for (Eigen::Index i = 0; i < s.alpha.size(); ++i) {
    if (n[static_cast<std::size_t>(i)] < 1)
      throw data_error("relevance: cluster size below 1 at index " + std::to_string(i));
    s.alpha_prime[i] = s.alpha[i] + std::log(static_cast<double>(n[static_cast<std::size_t>(i)]));
  }
  return s;
}

std::vector<int> gsu_topk(const Eigen::VectorXd& scores, int k) {
  if (k < 1) throw config_error("gsu_topk: k must be at least 1");
  std::vector<int> idx(static_cast<std::size_t>(scores.size()));
  std::iota(idx.begin(), idx.end(), 0);
  const auto better = [&scores](int a, int b) {
    if (scores[a] != scores[b]) return scores[a] > scores[b];
    return a < b;
  };
  if (static_cast<Eigen::Index>(k) >= scores.size()) {
    std::sort(idx.begin(), idx.end(), better);
    return idx;
  }
  std::partial_sort(idx.begin(), idx.begin() + k, idx.end(), better);
  idx.resize(static_cast<std::size_t>(k));
  return idx;
}

Eigen::VectorXd softmax_stable(const Eigen::VectorXd& v) {
  if (v.size() == 0) return v;
  const double m = v.maxCoeff();
  Eigen::VectorXd e = (v.array() - m).exp();
  return e / e.sum();
}

Eigen::VectorXd esu_head(const Eigen::VectorXd& q, const SplitEmbeddings& split_topk,
                         const HeadParams& head, const std::vector<std::int64_t>& n_topk,
                         bool reweight, Eigen::VectorXd* weights_out, bool* cold,
                         const Eigen::VectorXd* scores_in) {
  const Eigen::Index d_v = head.w_v.cols();
  if (cold) *cold = false;
  if (split_topk.rows() == 0) {
    if (cold) *cold = true;
    if (weights_out) weights_out->resize(0);
    return Eigen::VectorXd::Zero(d_v);
  }
  Eigen::VectorXd scores;
  if (scores_in) {
    if (scores_in->size() != split_topk.rows())
      throw config_error("esu_head: handed scores do not match the retrieved set");
    scores = *scores_in;
  } else {
    const RelevanceScores s = relevance(q, split_topk, head, n_topk);
    scores = reweight ? s.alpha_prime : s.alpha;
  }
  const Eigen::VectorXd w = softmax_stable(scores);
  if (weights_out) *weights_out = w;
  // w^T [K_h | K_c] first, then one row-vector product with W^v.
  const Eigen::Index h_dim = split_topk.k_h.cols();
  Eigen::RowVectorXd pooled(h_dim + split_topk.k_c.cols());
  pooled.leftCols(h_dim) = w.transpose() * split_topk.k_h;
  pooled.rightCols(split_topk.k_c.cols()) = w.transpose() * split_topk.k_c;
  if (pooled.cols() != head.w_v.rows()) throw config_error("esu_head: W^v shape mismatch");
  return (pooled * head.w_v).transpose();
}

Eigen::VectorXd long_term_interest(const Eigen::VectorXd& q, const SplitEmbeddings& split_topk,
                                   const AttentionParams& params,
                                   const std::vector<std::int64_t>& n_topk, bool reweight,
                                   bool* cold) {
  const int n_heads = params.n_heads();
  if (n_heads < 1) throw config_error("long_term_interest: no heads configured");
  Eigen::VectorXd concat(static_cast<Eigen::Index>(n_heads) * params.d_v);
  bool any_cold = false;
  for (int a = 0; a < n_heads; ++a) {
    bool head_cold = false;
    concat.segment(static_cast<Eigen::Index>(a) * params.d_v, params.d_v) = esu_head(
        q, split_topk, params.heads[static_cast<std::size_t>(a)], n_topk, reweight, nullptr,
        &head_cold);
    any_cold = any_cold || head_cold;
  }
  if (cold) *cold = any_cold;
  if (concat.size() != params.w_o.rows()) throw config_error("long_term_interest: W^o mismatch");
  return params.w_o.transpose() * concat;
}

}  // namespace longrec
