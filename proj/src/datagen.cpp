#include "longrec/datagen.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>

#include "longrec/errors.hpp"
#include "longrec/rng.hpp"

namespace longrec {

namespace {

constexpr int kLatentDim = 8;
constexpr std::int64_t kEpoch = 1'600'000'000;
// Histories tick at most ~120 s per record, so 50k records stay well inside
// this window and every impression lands after every behavior.
constexpr std::int64_t kImpressionOffset = 6'500'000;

constexpr double kLabelBias = -2.6;
constexpr double kLabelAffinity = 3.8;
constexpr double kLabelQuality = 0.8;
constexpr double kLabelNoise = 0.35;

// Clipped cosine: off-interest items land near zero so the label logit
// separates on- from off-interest targets instead of piling up at the
// midpoint (raw cosines of unrelated latents concentrate around 0).
double affinity01(const Eigen::VectorXd& a, const Eigen::VectorXd& b) {
  const double na = a.norm(), nb = b.norm();
  if (na < 1e-12 || nb < 1e-12) return 0.0;
  return std::max(0.0, a.dot(b) / (na * nb));
}

double sigmoid(double z) { return 1.0 / (1.0 + std::exp(-z)); }

struct Latents {
  std::vector<Eigen::VectorXd> centers;
  std::vector<Eigen::VectorXd> items;
  std::vector<int> item_center;
  std::vector<std::vector<ItemId>> center_items;
};

}  // namespace

void GenConfig::validate() const {
  if (n_users < 1 || n_items < 1) throw config_error("datagen: need at least one user and item");
  if (n_centers < 1 || n_categories < 1 || n_buckets < 1)
    throw config_error("datagen: center/category/bucket counts must be positive");
  if (low_frac < 0.0 || med_frac < 0.0 || low_frac + med_frac > 1.0)
    throw config_error("datagen: cohort fractions must be non-negative and sum to at most 1");
  if (len_median_low <= 0.0 || len_median_med <= 0.0 || len_median_high <= 0.0)
    throw config_error("datagen: length medians must be positive");
  if (len_sigma < 0.0) throw config_error("datagen: length sigma must be non-negative");
  if (impressions_per_user < 1) throw config_error("datagen: impressions_per_user must be >= 1");
  if (test_frac <= 0.0 || test_frac >= 1.0)
    throw config_error("datagen: test_frac must lie in (0,1)");
  if (noise_watch_prob < 0.0 || noise_watch_prob > 1.0)
    throw config_error("datagen: noise_watch_prob must lie in [0,1]");
}

CatalogSchema preset_schema(const GenConfig& cfg) {
  const auto n_authors = std::max<std::uint64_t>(2, cfg.n_items / 10);
  CatalogSchema s;
  s.categorical = {
      {"video_id", FieldKind::Id, static_cast<std::uint32_t>(cfg.n_items), 64, false},
      {"author_id", FieldKind::Id, static_cast<std::uint32_t>(n_authors), 32, false},
      {"category", FieldKind::Cross, static_cast<std::uint32_t>(cfg.n_categories),
       kCrossFieldDim, false},
      {"completion_bucket", FieldKind::Cross, static_cast<std::uint32_t>(cfg.n_buckets),
       kCrossFieldDim, true},
  };
  s.numerical = {{"quality", false}, {"completion", true}};
  s.validate();
  return s;
}

Dataset generate(const GenConfig& cfg) {
  cfg.validate();
  const CatalogSchema schema = preset_schema(cfg);
  const auto n_authors = std::max<std::uint64_t>(2, cfg.n_items / 10);
  const auto authors_per_center =
      std::max<std::uint64_t>(1, n_authors / static_cast<std::uint64_t>(cfg.n_centers));

  Latents lat;
  lat.centers.resize(static_cast<std::size_t>(cfg.n_centers));
  Rng center_rng = Rng(cfg.seed).split(1);
  for (auto& c : lat.centers) {
    c.resize(kLatentDim);
    for (int d = 0; d < kLatentDim; ++d) c[d] = center_rng.normal();
  }

  Rng item_rng = Rng(cfg.seed).split(2);
  lat.items.resize(cfg.n_items);
  lat.item_center.resize(cfg.n_items);
  lat.center_items.resize(static_cast<std::size_t>(cfg.n_centers));
  std::vector<ItemFeatures> rows(cfg.n_items);
  for (std::uint64_t i = 0; i < cfg.n_items; ++i) {
    const auto c = static_cast<int>(item_rng.uniform_index(static_cast<std::uint64_t>(cfg.n_centers)));
    lat.item_center[i] = c;
    lat.center_items[static_cast<std::size_t>(c)].push_back(i);
    Eigen::VectorXd x = lat.centers[static_cast<std::size_t>(c)];
    for (int d = 0; d < kLatentDim; ++d) x[d] += 0.35 * item_rng.normal();
    lat.items[i] = std::move(x);

    const std::uint64_t author = std::min<std::uint64_t>(
        n_authors - 1, static_cast<std::uint64_t>(c) * authors_per_center +
                           item_rng.uniform_index(authors_per_center));
    const auto dominant_cat = static_cast<std::uint32_t>(c % cfg.n_categories);
    const std::uint32_t category =
        item_rng.uniform() < 0.7
            ? dominant_cat
            : static_cast<std::uint32_t>(
                  item_rng.uniform_index(static_cast<std::uint64_t>(cfg.n_categories)));
    const double quality = item_rng.uniform();
    rows[i].categorical = {static_cast<std::uint32_t>(i), static_cast<std::uint32_t>(author),
                           category,
                           completion_bucket(0.5, static_cast<std::uint32_t>(cfg.n_buckets))};
    rows[i].numerical = {quality, 0.5};
  }

  Dataset ds;
  ds.catalog = Catalog(schema, std::move(rows));
  ds.sequences.resize(cfg.n_users);
  ds.cohort.resize(cfg.n_users);

  struct PendingImpression {
    Impression imp;
    double bayes = 0.0;
  };
  std::vector<PendingImpression> pending;
  pending.reserve(cfg.n_users * static_cast<std::uint64_t>(cfg.impressions_per_user));

  const auto n_low = static_cast<std::uint64_t>(cfg.low_frac * static_cast<double>(cfg.n_users));
  const auto n_med = static_cast<std::uint64_t>(cfg.med_frac * static_cast<double>(cfg.n_users));

  for (std::uint64_t u = 0; u < cfg.n_users; ++u) {
    Rng rng = Rng(cfg.seed).split(0x100 + u);
    const int cohort = u < n_low ? 0 : (u < n_low + n_med ? 1 : 2);
    ds.cohort[u] = cohort;
    const double median = cohort == 0   ? cfg.len_median_low
                          : cohort == 1 ? cfg.len_median_med
                                        : cfg.len_median_high;

    // Interests: 1-5 distinct centers with normalized weights.
    const int k_interests =
        1 + static_cast<int>(rng.uniform_index(std::min<std::uint64_t>(5, cfg.n_centers)));
    std::vector<int> interests;
    while (static_cast<int>(interests.size()) < k_interests) {
      const auto c = static_cast<int>(rng.uniform_index(static_cast<std::uint64_t>(cfg.n_centers)));
      if (std::find(interests.begin(), interests.end(), c) == interests.end())
        interests.push_back(c);
    }
    std::vector<double> iw(interests.size());
    double iw_sum = 0.0;
    for (auto& w : iw) {
      w = 0.2 + rng.uniform();
      iw_sum += w;
    }
    for (auto& w : iw) w /= iw_sum;

    Eigen::VectorXd user_latent = Eigen::VectorXd::Zero(kLatentDim);
    for (std::size_t k = 0; k < interests.size(); ++k)
      user_latent += iw[k] * lat.centers[static_cast<std::size_t>(interests[k])];

    const auto length = std::min<std::uint64_t>(
        cfg.max_len,
        static_cast<std::uint64_t>(std::max<std::int64_t>(
            0, std::llround(std::exp(std::log(median) + cfg.len_sigma * rng.normal())))));

    BehaviorSequence& seq = ds.sequences[u];
    seq.user_id = u;
    seq.records.reserve(length);
    std::int64_t t = kEpoch;
    const auto pick_from_center = [&](int c) -> ItemId {
      const auto& pool = lat.center_items[static_cast<std::size_t>(c)];
      if (pool.empty()) return rng.uniform_index(cfg.n_items);
      return pool[rng.uniform_index(pool.size())];
    };
    for (std::uint64_t j = 0; j < length; ++j) {
      t += 30 + static_cast<std::int64_t>(rng.uniform_index(90));
      ItemId item;
      if (rng.uniform() < cfg.noise_watch_prob) {
        item = rng.uniform_index(cfg.n_items);
      } else {
        // Interest mix drifts across the history: early interests fade while
        // interest 0 peaks near the most recent era.
        const double phase =
            length <= 1 ? 1.0 : static_cast<double>(j) / static_cast<double>(length - 1);
        double total = 0.0;
        std::vector<double> w(interests.size());
        for (std::size_t k = 0; k < interests.size(); ++k) {
          const double peak =
              interests.size() == 1
                  ? 1.0
                  : 1.0 - static_cast<double>(k) / static_cast<double>(interests.size() - 1);
          const double d = phase - peak;
          w[k] = iw[k] * std::exp(-4.0 * d * d);
          total += w[k];
        }
        double r = rng.uniform() * total;
        std::size_t pick = 0;
        for (; pick + 1 < w.size(); ++pick) {
          if (r < w[pick]) break;
          r -= w[pick];
        }
        item = pick_from_center(interests[pick]);
      }
      const double aff = affinity01(user_latent, lat.items[item]);
      const double quality = ds.catalog.raw_features(item).numerical[0];
      const double p = clamp_completion(0.25 + 0.55 * aff + 0.2 * quality + 0.12 * rng.normal());
      seq.records.push_back({item, p, t});
    }

    for (int j = 0; j < cfg.impressions_per_user; ++j) {
      ItemId target;
      if (rng.uniform() < 0.5) {
        double r = rng.uniform();
        std::size_t pick = 0;
        for (; pick + 1 < iw.size(); ++pick) {
          if (r < iw[pick]) break;
          r -= iw[pick];
        }
        target = pick_from_center(interests[pick]);
      } else {
        target = rng.uniform_index(cfg.n_items);
      }
      const double aff = affinity01(user_latent, lat.items[target]);
      const double quality = ds.catalog.raw_features(target).numerical[0];
      const double logit = kLabelBias + kLabelAffinity * aff + kLabelQuality * quality;
      const double p_noisy = sigmoid(logit + kLabelNoise * rng.normal());
      PendingImpression pi;
      pi.imp.user_id = u;
      pi.imp.item_id = target;
      pi.imp.timestamp = kEpoch + kImpressionOffset + j * 50 +
                         static_cast<std::int64_t>(rng.uniform_index(40));
      pi.imp.label = rng.uniform() < p_noisy ? 1 : 0;
      pi.bayes = sigmoid(logit);
      pending.push_back(pi);
    }
  }

  std::sort(pending.begin(), pending.end(), [](const PendingImpression& a,
                                               const PendingImpression& b) {
    if (a.imp.timestamp != b.imp.timestamp) return a.imp.timestamp < b.imp.timestamp;
    if (a.imp.user_id != b.imp.user_id) return a.imp.user_id < b.imp.user_id;
    return a.imp.item_id < b.imp.item_id;
  });
  const auto split =
      static_cast<std::size_t>(static_cast<double>(pending.size()) * (1.0 - cfg.test_frac));
  ds.impressions.reserve(pending.size());
  ds.bayes_scores.reserve(pending.size());
  for (std::size_t i = 0; i < pending.size(); ++i) {
    pending[i].imp.is_test = i >= split;
    ds.impressions.push_back(pending[i].imp);
    ds.bayes_scores.push_back(pending[i].bayes);
  }
  return ds;
}

}  // namespace longrec
