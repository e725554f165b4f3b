#include "longrec/compressor.hpp"

#include <cmath>
#include <deque>
#include <limits>
#include <numeric>

#include "longrec/errors.hpp"

namespace longrec {

void CompressorConfig::validate() const {
  if (group_count < 1) throw config_error("compressor: group_count must be >= 1");
  if (max_cluster_size < 2) throw config_error("compressor: max_cluster_size must be >= 2");
  if (kmeans_max_iters < 1) throw config_error("compressor: kmeans_max_iters must be >= 1");
  if (max_depth < 1) throw config_error("compressor: max_depth must be >= 1");
}

int get_group(double p, int group_count) {
  p = clamp_completion(p);
  const int m = static_cast<int>(p * group_count) + 1;
  return m > group_count ? group_count : m;
}

int adaptive_delta(std::int64_t n_items) {
  // +1e-9 keeps floor() honest when pow lands a hair under an exact integer.
  return static_cast<int>(std::floor(std::pow(static_cast<double>(n_items), 0.3) + 1e-9));
}

namespace {

using RowList = std::vector<std::int64_t>;

Eigen::VectorXd mean_of(const RowList& rows, const RowMatrixXd& emb) {
  Eigen::VectorXd m = Eigen::VectorXd::Zero(emb.cols());
  for (auto r : rows) m += emb.row(r).transpose();
  if (!rows.empty()) m /= static_cast<double>(rows.size());
  return m;
}

// k-means++: D^2-weighted seeding; falls back to the first unchosen row when
// every remaining point coincides with an existing center. Each round is one
// matrix-vector product via the |x|^2 - 2 x.c + |c|^2 expansion (clamped at
// zero, since cancellation can leave a tiny negative on duplicate points).
RowMatrixXd seed_centers(int k, const RowMatrixXd& pts, const Eigen::VectorXd& point_sq,
                         Rng& rng) {
  const std::size_t n = pts.rows();
  RowMatrixXd centers(k, pts.cols());
  std::vector<char> chosen(n, 0);

  const std::size_t first = rng.uniform_index(n);
  chosen[first] = 1;
  centers.row(0) = pts.row(first);
  Eigen::VectorXd dots = pts * centers.row(0).transpose();
  Eigen::VectorXd d2 =
      (point_sq.array() - 2.0 * dots.array() + centers.row(0).squaredNorm()).max(0.0);

  for (int have = 1; have < k; ++have) {
    const double total = d2.sum();
    std::size_t pick = n;
    if (total > 0.0) {
      const double r = rng.uniform() * total;
      double acc = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        acc += d2[i];
        if (acc > r) {
          pick = i;
          break;
        }
      }
    }
    if (pick == n) {  // all mass at existing centers
      for (std::size_t i = 0; i < n; ++i)
        if (!chosen[i]) {
          pick = i;
          break;
        }
    }
    chosen[pick] = 1;
    centers.row(have) = pts.row(pick);
    dots.noalias() = pts * centers.row(have).transpose();
    d2 = d2.cwiseMin(
        (point_sq.array() - 2.0 * dots.array() + centers.row(have).squaredNorm()).max(0.0).matrix());
  }
  return centers;
}

// Optimal 2-partition of a tiny input by scanning every assignment with the
// first point pinned to side 0 (complement symmetry). Costs less than one
// Lloyd pass at n <= 12 and is immune to bad seeding, which matters because
// Lloyd from k-means++ seeds misses the optimum on a large fraction of
// unstructured tiny instances.
std::vector<RowList> exact_pair_split(const RowList& rows, const RowMatrixXd& emb) {
  const std::size_t n = rows.size();
  std::vector<double> sq(n);
  double sq_total = 0.0;
  Eigen::VectorXd sum_total = Eigen::VectorXd::Zero(emb.cols());
  for (std::size_t i = 0; i < n; ++i) {
    sq[i] = emb.row(rows[i]).squaredNorm();
    sq_total += sq[i];
    sum_total += emb.row(rows[i]).transpose();
  }
  double best = std::numeric_limits<double>::infinity();
  std::uint32_t best_mask = 1;
  Eigen::VectorXd sum1(emb.cols());
  for (std::uint32_t mask = 1; mask < (1u << (n - 1)); ++mask) {
    sum1.setZero();
    double sq1 = 0.0;
    int cnt1 = 0;
    for (std::size_t i = 1; i < n; ++i) {
      if (!((mask >> (i - 1)) & 1)) continue;
      sum1 += emb.row(rows[i]).transpose();
      sq1 += sq[i];
      ++cnt1;
    }
    const int cnt0 = static_cast<int>(n) - cnt1;
    const double sse = (sq_total - sq1) - (sum_total - sum1).squaredNorm() / cnt0 +
                       (sq1 - sum1.squaredNorm() / cnt1);
    if (sse < best) {
      best = sse;
      best_mask = mask;
    }
  }
  std::vector<RowList> out(2);
  out[0].push_back(rows[0]);
  for (std::size_t i = 1; i < n; ++i)
    out[(best_mask >> (i - 1)) & 1 ? 1 : 0].push_back(rows[i]);
  return out;
}

// Repair empty clusters: move the farthest point out of the largest one.
// Returns the indices of the points that were moved.
std::vector<std::size_t> repair_empty(int k, const RowMatrixXd& pts, std::vector<int>& next,
                                      std::vector<std::size_t>& sizes) {
  const std::size_t n = pts.rows();
  std::vector<std::size_t> moved;
  for (int c = 0; c < k; ++c) {
    while (sizes[c] == 0) {
      int largest = 0;
      for (int l = 1; l < k; ++l)
        if (sizes[l] > sizes[largest]) largest = l;
      Eigen::VectorXd lc = Eigen::VectorXd::Zero(pts.cols());
      for (std::size_t i = 0; i < n; ++i)
        if (next[i] == largest) lc += pts.row(i).transpose();
      lc /= static_cast<double>(sizes[largest]);
      double far = -1.0;
      std::size_t far_i = 0;
      for (std::size_t i = 0; i < n; ++i) {
        if (next[i] != largest) continue;
        const double d = (pts.row(i).transpose() - lc).squaredNorm();
        if (d > far) {
          far = d;
          far_i = i;
        }
      }
      next[far_i] = c;
      --sizes[largest];
      ++sizes[c];
      moved.push_back(far_i);
    }
  }
  return moved;
}

// Lloyd with Hamerly's skip test: each point keeps an upper bound on the
// distance to its own center, and a point whose bound sits inside the
// center's safety radius (half the gap to the nearest other center) cannot
// change cluster. Skips are exact, everything else falls back to a full
// scan, so once centers settle an iteration touches only boundary points.
// Only worth the bookkeeping at k >= 3; scanning two centers is already
// cheaper than maintaining bounds.
std::vector<int> bounded_assignments(int k, const RowMatrixXd& pts,
                                     const Eigen::VectorXd& point_sq, RowMatrixXd& centers,
                                     int max_iters) {
  const std::size_t n = pts.rows();
  // Bounds are inflated a hair so rounding in the norms cannot understate
  // a true distance.
  const double pad = 1.0 + 1e-12;
  std::vector<int> assign(n, -1);
  Eigen::VectorXd upper(n);
  Eigen::VectorXd center_sq(k), safe_radius(k), movement(k);
  RowMatrixXd prev_centers(k, pts.cols());

  for (int it = 0; it < max_iters; ++it) {
    for (int c = 0; c < k; ++c) center_sq(c) = centers.row(c).squaredNorm();
    for (int c = 0; c < k; ++c) {
      double best = std::numeric_limits<double>::infinity();
      for (int o = 0; o < k; ++o) {
        if (o == c) continue;
        best = std::min(best, (centers.row(c) - centers.row(o)).squaredNorm());
      }
      safe_radius(c) = 0.5 * std::sqrt(best);
    }

    std::vector<int> next(n);
    if (it == 0) {
      Eigen::MatrixXd dots(n, k);
      dots.noalias() = pts * centers.transpose();
      for (std::size_t i = 0; i < n; ++i) {
        double best = std::numeric_limits<double>::infinity();
        int arg = 0;
        for (int c = 0; c < k; ++c) {
          const double d = center_sq(c) - 2.0 * dots(i, c);
          if (d < best) {
            best = d;
            arg = c;
          }
        }
        next[i] = arg;
        upper(i) = std::sqrt(std::max(0.0, point_sq(i) + best)) * pad;
      }
    } else {
      for (std::size_t i = 0; i < n; ++i) {
        const int a = assign[i];
        if (upper(i) < safe_radius(a)) {
          next[i] = a;
          continue;
        }
        const double da2 = point_sq(i) - 2.0 * pts.row(i).dot(centers.row(a)) + center_sq(a);
        upper(i) = std::sqrt(std::max(0.0, da2)) * pad;
        if (upper(i) < safe_radius(a)) {
          next[i] = a;
          continue;
        }
        double best = std::numeric_limits<double>::infinity();
        int arg = 0;
        for (int c = 0; c < k; ++c) {
          const double d = center_sq(c) - 2.0 * pts.row(i).dot(centers.row(c));
          if (d < best) {
            best = d;
            arg = c;
          }
        }
        next[i] = arg;
        upper(i) = std::sqrt(std::max(0.0, point_sq(i) + best)) * pad;
      }
    }

    std::vector<std::size_t> sizes(k, 0);
    for (int a : next) ++sizes[a];
    for (std::size_t i : repair_empty(k, pts, next, sizes))
      upper(i) = std::numeric_limits<double>::infinity();

    const bool converged = (next == assign);
    assign = std::move(next);
    prev_centers = centers;
    centers.setZero();
    std::vector<std::size_t> sz(k, 0);
    for (std::size_t i = 0; i < n; ++i) {
      centers.row(assign[i]) += pts.row(i);
      ++sz[assign[i]];
    }
    for (int c = 0; c < k; ++c) centers.row(c) /= static_cast<double>(sz[c]);
    if (converged) break;

    // A center that moved by m can change any of its members' distances by
    // at most m; widening the bounds keeps them valid without recomputing.
    for (int c = 0; c < k; ++c)
      movement(c) = (centers.row(c) - prev_centers.row(c)).norm() * pad;
    for (std::size_t i = 0; i < n; ++i) upper(i) += movement(assign[i]);
  }
  return assign;
}

}  // namespace

std::vector<std::vector<std::int64_t>> kmeans_partition(int k, const RowList& rows,
                                                        const RowMatrixXd& emb, Rng& rng,
                                                        int max_iters, bool balanced) {
  const std::size_t n = rows.size();
  if (k < 1 || static_cast<std::size_t>(k) > n)
    throw config_error("kmeans: k=" + std::to_string(k) + " out of range for " +
                       std::to_string(n) + " items");
  if (balanced && k != 2) throw config_error("kmeans: balanced mode requires k=2");
  if (k == 1) return {rows};
  if (!balanced && k == 2 && n <= 12) return exact_pair_split(rows, emb);

  // Rows gathered once so each seeding round and each Lloyd pass is a single
  // matrix product. One pass then costs nearly the same for any fan-out,
  // which is what makes the adaptive variant (few passes, large k) cheaper
  // than recursive bisection (many passes, k=2) on long inputs.
  RowMatrixXd pts(n, emb.cols());
  for (std::size_t i = 0; i < n; ++i) pts.row(i) = emb.row(rows[i]);
  Eigen::VectorXd point_sq(n);
  for (std::size_t i = 0; i < n; ++i) point_sq(i) = pts.row(i).squaredNorm();

  RowMatrixXd centers = seed_centers(k, pts, point_sq, rng);

  if (!balanced && k >= 3) {
    const std::vector<int> assign = bounded_assignments(k, pts, point_sq, centers, max_iters);
    std::vector<RowList> out(k);
    for (std::size_t i = 0; i < n; ++i) out[assign[i]].push_back(rows[i]);
    return out;
  }

  std::vector<int> assign(n, -1);
  Eigen::MatrixXd dots(n, k);
  Eigen::VectorXd center_sq(k);

  for (int it = 0; it < max_iters; ++it) {
    // argmin_c |x - c|^2 = argmin_c (|c|^2 - 2 x.c); the |x|^2 term is
    // constant per row and drops out.
    dots.noalias() = pts * centers.transpose();
    for (int c = 0; c < k; ++c) center_sq(c) = centers.row(c).squaredNorm();
    std::vector<int> next(n);
    for (std::size_t i = 0; i < n; ++i) {
      double best = std::numeric_limits<double>::infinity();
      int arg = 0;
      for (int c = 0; c < k; ++c) {
        const double d = center_sq(c) - 2.0 * dots(i, c);
        if (d < best) {
          best = d;
          arg = c;
        }
      }
      next[i] = arg;
    }

    std::vector<std::size_t> sizes(k, 0);
    for (int a : next) ++sizes[a];
    repair_empty(k, pts, next, sizes);

    if (balanced) {
      // Even out the two clusters: migrate from the larger one, points
      // nearest the other centroid first.
      const int big = sizes[0] >= sizes[1] ? 0 : 1;
      const int small = 1 - big;
      const std::int64_t excess =
          (static_cast<std::int64_t>(sizes[big]) - static_cast<std::int64_t>(sizes[small])) / 2;
      if (excess > 0) {
        Eigen::VectorXd other = Eigen::VectorXd::Zero(emb.cols());
        for (std::size_t i = 0; i < n; ++i)
          if (next[i] == small) other += pts.row(i).transpose();
        other /= static_cast<double>(sizes[small]);
        std::vector<std::pair<double, std::size_t>> cand;
        for (std::size_t i = 0; i < n; ++i)
          if (next[i] == big)
            cand.emplace_back((pts.row(i).transpose() - other).squaredNorm(), i);
        std::sort(cand.begin(), cand.end());
        for (std::int64_t m = 0; m < excess; ++m) next[cand[m].second] = small;
      }
    }

    const bool converged = (next == assign);
    assign = std::move(next);
    centers.setZero();
    std::vector<std::size_t> sz(k, 0);
    for (std::size_t i = 0; i < n; ++i) {
      centers.row(assign[i]) += pts.row(i);
      ++sz[assign[i]];
    }
    for (int c = 0; c < k; ++c) centers.row(c) /= static_cast<double>(sz[c]);
    if (converged) break;
  }

  std::vector<RowList> out(k);
  for (std::size_t i = 0; i < n; ++i) out[assign[i]].push_back(rows[i]);
  return out;
}

CompressedHistory compress(const BehaviorSequence& seq, const RowMatrixXd& embeddings,
                           const CompressorConfig& cfg) {
  cfg.validate();
  if (static_cast<std::size_t>(embeddings.rows()) != seq.records.size())
    throw data_error("compress: embedding row count does not match sequence length");

  CompressedHistory out;
  out.user_id = seq.user_id;
  out.source_length = seq.records.size();
  if (seq.records.empty()) return out;

  const int M = cfg.group_count;
  const int cap = cfg.max_cluster_size;
  std::vector<RowList> groups(M);
  for (std::size_t i = 0; i < seq.records.size(); ++i) {
    const int m = get_group(seq.records[i].completion_ratio, M);
    groups[m - 1].push_back(static_cast<std::int64_t>(i));
  }

  Rng rng = Rng(cfg.kmeans_seed).split(seq.user_id);

  auto emit = [&](RowList rows, int group_id) {
    Cluster c;
    c.group_id = static_cast<std::uint32_t>(group_id);
    c.centroid = mean_of(rows, embeddings);
    c.member_ids.reserve(rows.size());
    for (auto r : rows) c.member_ids.push_back(seq.records[r].item_id);
    c.member_rows = std::move(rows);
    out.clusters.push_back(std::move(c));
  };

  for (int m = 1; m <= M; ++m) {
    if (groups[m - 1].empty()) continue;
    std::deque<std::pair<RowList, int>> queue;  // (rows, depth)
    queue.emplace_back(std::move(groups[m - 1]), 0);
    while (!queue.empty()) {
      auto [rows, depth] = std::move(queue.front());
      queue.pop_front();
      out.stats.max_split_depth = std::max(out.stats.max_split_depth, depth);
      const std::int64_t n = static_cast<std::int64_t>(rows.size());
      if (n < cap) {
        emit(std::move(rows), m);
        continue;
      }
      if (depth >= cfg.max_depth) {
        // Safety valve: emit fixed-size chunks so the size bound and the
        // partition property both survive pathological inputs.
        ++out.stats.forced_chunk_emits;
        for (std::int64_t at = 0; at < n; at += cap - 1) {
          const std::int64_t len = std::min<std::int64_t>(cap - 1, n - at);
          emit(RowList(rows.begin() + at, rows.begin() + at + len), m);
        }
        continue;
      }
      int delta = cfg.variant == CompressVariant::Adaptive ? adaptive_delta(n) : 2;
      delta = std::max(2, std::min<int>(delta, static_cast<int>(n)));
      ++out.stats.kmeans_runs;
      auto parts = kmeans_partition(delta, rows, embeddings, rng, cfg.kmeans_max_iters,
                                    cfg.variant == CompressVariant::BalancedBinary);
      for (auto& part : parts) queue.emplace_back(std::move(part), depth + 1);
    }
  }
  return out;
}

}  // namespace longrec
