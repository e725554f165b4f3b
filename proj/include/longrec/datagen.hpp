#pragma once

#include <cstdint>
#include <vector>

#include "longrec/schema.hpp"

namespace longrec {

// Synthetic corpus: items scatter around latent interest centers, users hold
// 1-5 interests whose mix drifts across their history, completion ratios run
// higher on-interest, and click labels follow a logistic model over
// user-target affinity plus item quality.
struct GenConfig {
  std::uint64_t n_users = 200;
  std::uint64_t n_items = 2000;
  int n_centers = 50;
  int n_categories = 20;
  int n_buckets = 10;

  // History-length cohorts (Low/Medium/High), log-normal lengths.
  double low_frac = 0.3;
  double med_frac = 0.4;
  double len_median_low = 300.0;
  double len_median_med = 1200.0;
  double len_median_high = 4000.0;
  double len_sigma = 0.4;
  std::uint64_t max_len = 50000;

  int impressions_per_user = 60;
  double test_frac = 0.2;          // latest impressions become the test split
  double noise_watch_prob = 0.15;  // off-interest random watches
  std::uint64_t seed = 0;

  void validate() const;
};

struct Dataset {
  Catalog catalog;
  std::vector<BehaviorSequence> sequences;  // index == user id
  std::vector<Impression> impressions;      // globally sorted by timestamp
  std::vector<double> bayes_scores;         // noiseless click probability per impression
  std::vector<int> cohort;                  // per user: 0 Low, 1 Medium, 2 High
};

// Fixed feature layout: video_id (64), author_id (32) as id fields; category
// and completion bucket as cross fields; quality and completion numericals.
CatalogSchema preset_schema(const GenConfig& cfg);

Dataset generate(const GenConfig& cfg);

}  // namespace longrec
