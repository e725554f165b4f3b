#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

#include "longrec/attention.hpp"
#include "longrec/cluster_repr.hpp"
#include "longrec/compressor.hpp"
#include "longrec/embedding.hpp"
#include "longrec/schema.hpp"

namespace longrec {

// Full: GSU/ESU over compressed clusters. ShortTA: the same attention over
// the most recent raw behaviors only. AvgPool: uniform pooling over the whole
// raw history (no relevance scoring).
enum class ModelVariant { Full, ShortTA, AvgPool };

enum class Optimizer { SGD, Adam };

struct ModelConfig {
  int d_k = 32;
  int d_v = 32;
  int d_out = 64;
  int d_user = 16;
  int n_heads = 4;
  int gsu_k = 100;
  int recent_len = 100;
  std::vector<int> mlp_widths = {64, 32};
  ModelVariant variant = ModelVariant::Full;
  bool reweight_gsu = true;  // ln n in retrieval scores
  bool reweight_esu = true;  // ln n in aggregation softmax
  std::uint64_t init_seed = 0;

  void validate() const;
};

struct MlpParams {
  std::vector<Eigen::MatrixXd> weights;  // [in x out] per layer, final out == 1
  std::vector<Eigen::VectorXd> biases;
};

struct CtrModel {
  ModelConfig cfg;
  CatalogSchema schema;
  EmbeddingTable tables;
  RowMatrixXd user_table;  // n_users x d_user
  AttentionParams attn;
  MlpParams mlp;

  std::size_t parameter_count() const;
  int mlp_input_dim() const;

  static CtrModel init(const CatalogSchema& schema, std::size_t n_users, const ModelConfig& cfg);
};

// What the attention layers see for one user: resolved categorical indices
// per attended unit (virtual item or raw behavior), unit sizes for the ln n
// term, and the donor item ids used as inherent-cache keys.
struct AttentionSource {
  std::vector<std::uint32_t> cat;  // count x n_categorical_fields, row-major
  std::vector<std::int64_t> sizes;
  std::vector<ItemId> ids;

  std::size_t count() const { return sizes.size(); }
};

AttentionSource source_from_virtual_items(const CompressedHistory& hist,
                                          const std::vector<VirtualItem>& items);
AttentionSource source_from_records(const std::vector<BehaviorRecord>& records,
                                    const Catalog& catalog);

// Count-weighted pooling support: per categorical field the (index, weight)
// pairs with weights summing to 1, plus the mean numerical block. Lets mean
// embeddings be gathered per distinct row instead of per behavior.
struct PooledCounts {
  std::vector<std::vector<std::pair<std::uint32_t, double>>> fields;
  Eigen::VectorXd numerical_mean;
  std::int64_t count = 0;
};

PooledCounts pool_records(const std::vector<BehaviorRecord>& records, const Catalog& catalog);

// Mean embedding under the counts; zero vector when count == 0.
Eigen::VectorXd gather_pooled(const PooledCounts& counts, const CatalogSchema& schema,
                              const EmbeddingTable& tables);

struct UserState {
  UserId user_id = 0;
  std::uint32_t user_row = 0;
  AttentionSource attn;    // Full / ShortTA
  PooledCounts recent;     // most recent behaviors, all variants
  PooledCounts full_pool;  // whole history, AvgPool only
};

UserState make_user_state(const CompressedHistory& hist, const std::vector<VirtualItem>& items,
                          const BehaviorSequence& seq, const Catalog& catalog,
                          const ModelConfig& cfg, std::uint32_t user_row);

struct Sample {
  std::uint32_t state_idx = 0;
  ItemId target = 0;
  double label = 0.0;
  std::int64_t timestamp = 0;
};

struct TrainSet {
  std::vector<UserState> states;
  std::vector<Sample> samples;
};

struct ForwardResult {
  double prob = 0.5;
  double logit = 0.0;
  bool cold = false;     // no long-term history
  bool clamped = false;  // logit hit the +-30 guard
  std::vector<int> retrieved;        // positions into the attention source
  Eigen::VectorXd retrieval_scores;  // selection-head scores of the retrieved units
  Eigen::VectorXd esu_weights;       // head-0 softmax weights over the retrieved units
};

ForwardResult forward(const CtrModel& model, const Catalog& catalog, const UserState& user,
                      ItemId target);

// Mean binary cross entropy. Predictions outside (0,1) are clamped to
// [1e-12, 1-1e-12]; *clamped counts them.
double bce_loss(const std::vector<double>& predictions, const std::vector<double>& labels,
                std::size_t* clamped = nullptr);

struct HeadGrads {
  Eigen::MatrixXd w_q, w_h, w_c;
  Eigen::VectorXd beta;
  Eigen::MatrixXd w_v;
};

// Gradients for one batch. Dense blocks mirror the parameter shapes;
// embedding and user-table gradients are sparse per-row maps.
struct ModelGrads {
  std::vector<HeadGrads> heads;
  Eigen::MatrixXd w_o;
  std::vector<Eigen::MatrixXd> mlp_w;
  std::vector<Eigen::VectorXd> mlp_b;
  std::vector<std::unordered_map<std::uint32_t, Eigen::RowVectorXd>> table_rows;
  std::unordered_map<std::uint32_t, Eigen::RowVectorXd> user_rows;

  static ModelGrads zeros_like(const CtrModel& model);
  void accumulate(const ModelGrads& other);
};

// Named views over every dense parameter block (attention heads, W^o, MLP).
// Embedding and user tables are handled through the sparse row maps.
struct ParamView {
  std::string name;
  double* data;
  std::size_t size;
};
std::vector<ParamView> parameter_views(CtrModel& model);
std::vector<ParamView> grad_views(ModelGrads& grads, const CtrModel& model);

struct BatchResult {
  double loss = 0.0;
  std::size_t clamped = 0;
  ModelGrads grads;
};

// Mean loss and its exact gradients over the given samples. Samples are
// processed in fixed-size chunks reduced in index order, so results do not
// depend on the thread count.
BatchResult batch_gradients(const CtrModel& model, const Catalog& catalog, const TrainSet& data,
                            const std::vector<std::size_t>& sample_idx, int threads = 1);

struct TrainConfig {
  Optimizer optimizer = Optimizer::Adam;
  double lr = 1e-3;
  int batch_size = 256;
  int epochs = 5;
  std::uint64_t seed = 0;
  int threads = 1;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;

  void validate() const;
};

struct TrainResult {
  std::vector<double> epoch_loss;
  std::vector<double> epoch_seconds;
};

// Epoch loop with seeded shuffling. Trains on `subset` indices into
// data.samples when given, on every sample otherwise. Throws numeric_error
// when the loss exceeds 10x the pre-training loss for three consecutive
// epochs or a non-finite gradient appears.
TrainResult train(CtrModel& model, const Catalog& catalog, const TrainSet& data,
                  const TrainConfig& cfg, const std::vector<std::size_t>* subset = nullptr);

// Probabilities for every sample, in order.
std::vector<double> predict_all(const CtrModel& model, const Catalog& catalog,
                                const TrainSet& data, int threads = 1);

}  // namespace longrec
