#include "longrec/metrics.hpp"

#include <algorithm>
#include <numeric>
#include <unordered_map>
#include <unordered_set>

#include "longrec/errors.hpp"

namespace longrec {

std::optional<double> auc(const std::vector<double>& scores, const std::vector<double>& labels) {
  if (scores.size() != labels.size()) throw config_error("auc: score/label length mismatch");
  const std::size_t n = scores.size();
  std::size_t n_pos = 0;
  for (double y : labels) n_pos += y > 0.5 ? 1 : 0;
  const std::size_t n_neg = n - n_pos;
  if (n_pos == 0 || n_neg == 0) return std::nullopt;

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(),
            [&scores](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });

  // Average rank within each tie run, summed over positives.
  double rank_sum_pos = 0.0;
  std::size_t i = 0;
  while (i < n) {
    std::size_t j = i;
    while (j < n && scores[order[j]] == scores[order[i]]) ++j;
    const double avg_rank = 0.5 * static_cast<double>(i + 1 + j);  // ranks are 1-based
    for (std::size_t t = i; t < j; ++t)
      if (labels[order[t]] > 0.5) rank_sum_pos += avg_rank;
    i = j;
  }
  const double np = static_cast<double>(n_pos), nn = static_cast<double>(n_neg);
  return (rank_sum_pos - np * (np + 1.0) / 2.0) / (np * nn);
}

std::optional<double> gauc(const std::vector<double>& scores, const std::vector<double>& labels,
                           const std::vector<UserId>& user_ids, std::size_t* skipped) {
  if (scores.size() != labels.size() || scores.size() != user_ids.size())
    throw config_error("gauc: input length mismatch");
  std::unordered_map<UserId, std::vector<std::size_t>> by_user;
  for (std::size_t i = 0; i < user_ids.size(); ++i) by_user[user_ids[i]].push_back(i);

  // Sort user ids so the floating accumulation order is fixed.
  std::vector<UserId> users;
  users.reserve(by_user.size());
  for (const auto& [u, idx] : by_user) users.push_back(u);
  std::sort(users.begin(), users.end());

  double weighted = 0.0, weight = 0.0;
  std::size_t n_skipped = 0;
  for (UserId u : users) {
    const auto& idx = by_user[u];
    std::vector<double> s, y;
    s.reserve(idx.size());
    y.reserve(idx.size());
    for (std::size_t i : idx) {
      s.push_back(scores[i]);
      y.push_back(labels[i]);
    }
    const auto a = auc(s, y);
    if (!a) {
      ++n_skipped;
      continue;
    }
    weighted += static_cast<double>(idx.size()) * *a;
    weight += static_cast<double>(idx.size());
  }
  if (skipped) *skipped = n_skipped;
  if (weight == 0.0) return std::nullopt;
  return weighted / weight;
}

std::optional<double> cluster_accuracy(const CompressedHistory& history,
                                       const RowMatrixXd& embeddings, std::size_t* skipped) {
  double sum = 0.0;
  std::size_t counted = 0, n_skipped = 0;
  for (const Cluster& c : history.clusters) {
    for (std::int64_t r : c.member_rows) {
      bool degenerate = false;
      const double cs = cosine(embeddings.row(r).transpose(), c.centroid, &degenerate);
      if (degenerate) {
        ++n_skipped;
      } else {
        sum += cs;
        ++counted;
      }
    }
  }
  if (skipped) *skipped = n_skipped;
  if (counted == 0) return std::nullopt;
  return sum / static_cast<double>(counted);
}

double gsu_recall(const CompressedHistory& history, const SplitEmbeddings& raw_split,
                  const SplitEmbeddings& cluster_split, const Eigen::VectorXd& q,
                  const HeadParams& head, int k, bool reweight) {
  const std::size_t t_hat = history.clusters.size();
  const Eigen::Index t_raw = raw_split.rows();
  if (t_hat == 0 || t_raw == 0) return 0.0;
  if (cluster_split.rows() != static_cast<Eigen::Index>(t_hat))
    throw config_error("gsu_recall: cluster split row count mismatch");

  std::vector<std::int64_t> sizes(t_hat);
  for (std::size_t i = 0; i < t_hat; ++i)
    sizes[i] = static_cast<std::int64_t>(history.clusters[i].size());
  const RelevanceScores cluster_scores = relevance(q, cluster_split, head, sizes);
  const std::vector<int> picked =
      gsu_topk(reweight ? cluster_scores.alpha_prime : cluster_scores.alpha, k);

  std::unordered_set<std::int64_t> covered;
  for (int c : picked)
    for (std::int64_t r : history.clusters[static_cast<std::size_t>(c)].member_rows)
      covered.insert(r);

  const std::vector<std::int64_t> ones(static_cast<std::size_t>(t_raw), 1);
  const RelevanceScores raw_scores = relevance(q, raw_split, head, ones);
  const double avg_n = static_cast<double>(t_raw) / static_cast<double>(t_hat);
  const auto m = std::min<std::int64_t>(
      t_raw, std::max<std::int64_t>(1, std::llround(static_cast<double>(k) * avg_n)));
  const std::vector<int> top_raw = gsu_topk(raw_scores.alpha, static_cast<int>(m));

  std::size_t hit = 0;
  for (int r : top_raw) hit += covered.count(r) ? 1 : 0;
  return static_cast<double>(hit) / static_cast<double>(top_raw.size());
}

}  // namespace longrec
