#include "longrec/model.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <functional>
#include <map>
#include <numeric>
#include <thread>

#include "longrec/errors.hpp"

namespace longrec {

namespace {

constexpr double kLogitClamp = 30.0;
constexpr double kProbClamp = 1e-12;
// Samples are reduced in fixed chunks so gradients and losses do not depend
// on how many worker threads ran the batch.
constexpr std::size_t kChunk = 16;

double sigmoid(double z) { return 1.0 / (1.0 + std::exp(-z)); }

// Where each categorical field's embedding lands inside K_h / K_c.
struct FieldSpan {
  bool cross = false;
  Eigen::Index offset = 0;  // within its block
  Eigen::Index dim = 0;
  int cross_ordinal = -1;
};

std::vector<FieldSpan> field_spans(const CatalogSchema& schema) {
  std::vector<FieldSpan> spans;
  spans.reserve(schema.categorical.size());
  Eigen::Index id_off = 0, cross_off = 0;
  int ordinal = 0;
  for (const auto& f : schema.categorical) {
    FieldSpan s;
    s.dim = static_cast<Eigen::Index>(f.dim);
    if (f.kind == FieldKind::Cross) {
      s.cross = true;
      s.offset = cross_off;
      s.cross_ordinal = ordinal++;
      cross_off += s.dim;
    } else {
      s.offset = id_off;
      id_off += s.dim;
    }
    spans.push_back(s);
  }
  return spans;
}

void fill_uniform(RowMatrixXd& m, double bound, Rng& rng) {
  for (Eigen::Index r = 0; r < m.rows(); ++r)
    for (Eigen::Index c = 0; c < m.cols(); ++c) m(r, c) = rng.uniform(-bound, bound);
}

void fill_uniform(Eigen::MatrixXd& m, double bound, Rng& rng) {
  for (Eigen::Index r = 0; r < m.rows(); ++r)
    for (Eigen::Index c = 0; c < m.cols(); ++c) m(r, c) = rng.uniform(-bound, bound);
}

// Retrieval scores over every unit without materializing K: per unit, dot the
// relevant table rows against the folded query projection. Matches
// relevance() up to summation order.
Eigen::VectorXd gsu_scores(const AttentionSource& src, const EmbeddingTable& tables,
                           const std::vector<FieldSpan>& spans, const HeadParams& head,
                           const Eigen::VectorXd& q, bool reweight) {
  const Eigen::VectorXd hq = head.w_h * (head.w_q.transpose() * q);
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(head.w_q.cols()));
  const std::size_t nf = spans.size();
  Eigen::VectorXd out(static_cast<Eigen::Index>(src.count()));
  for (std::size_t i = 0; i < src.count(); ++i) {
    const std::uint32_t* row = src.cat.data() + i * nf;
    double id_acc = 0.0, cross_acc = 0.0;
    for (std::size_t f = 0; f < nf; ++f) {
      const FieldSpan& sp = spans[f];
      const auto emb = tables.fields[f].row(row[f]);
      if (sp.cross)
        cross_acc += head.beta[sp.cross_ordinal] * emb.dot(head.w_c.col(sp.cross_ordinal));
      else
        id_acc += emb.dot(hq.segment(sp.offset, sp.dim));
    }
    double a = id_acc * inv_sqrt + cross_acc;
    if (reweight) a += std::log(static_cast<double>(src.sizes[i]));
    out[static_cast<Eigen::Index>(i)] = a;
  }
  return out;
}

void gather_split(const AttentionSource& src, const std::vector<int>& picks,
                  const EmbeddingTable& tables, const std::vector<FieldSpan>& spans,
                  Eigen::Index h_dim, Eigen::Index c_dim, SplitEmbeddings* out) {
  const std::size_t nf = spans.size();
  out->k_h.resize(static_cast<Eigen::Index>(picks.size()), h_dim);
  out->k_c.resize(static_cast<Eigen::Index>(picks.size()), c_dim);
  for (std::size_t r = 0; r < picks.size(); ++r) {
    const std::uint32_t* row = src.cat.data() + static_cast<std::size_t>(picks[r]) * nf;
    for (std::size_t f = 0; f < nf; ++f) {
      const FieldSpan& sp = spans[f];
      auto& dst = sp.cross ? out->k_c : out->k_h;
      dst.row(static_cast<Eigen::Index>(r)).segment(sp.offset, sp.dim) =
          tables.fields[f].row(row[f]);
    }
  }
}

struct Tape {
  std::vector<std::uint32_t> target_cat;
  Eigen::VectorXd target_full;  // embed_dim
  Eigen::VectorXd q;            // H
  bool cold = true;
  std::vector<int> picks;
  Eigen::VectorXd sel_scores;  // scores of the picked units, pick order
  std::vector<std::int64_t> n_sub;
  SplitEmbeddings sub;
  std::vector<Eigen::VectorXd> w;  // per-head softmax weights
  Eigen::VectorXd avg_pooled;      // H+8J, AvgPool variant
  Eigen::VectorXd concat;          // n_heads * d_v
  Eigen::VectorXd interest;        // d_out
  Eigen::VectorXd user_vec;
  Eigen::VectorXd recent_vec;
  Eigen::VectorXd mlp_in;
  std::vector<Eigen::VectorXd> acts;  // post-ReLU activations
  double logit = 0.0;                 // after the +-30 guard
  double prob = 0.5;
  bool clamped = false;
};

void run_forward(const CtrModel& m, const Catalog& catalog, const UserState& u, ItemId target,
                 const std::vector<FieldSpan>& spans, const EmbedLayout& layout, Tape& t) {
  const CatalogSchema& schema = m.schema;
  ItemFeatures tf = catalog.normalized_features(target);
  t.target_cat = tf.categorical;
  t.target_full = embed_item(tf, schema, m.tables);
  t.q = t.target_full.head(layout.inherent_dim);

  const Eigen::Index hv = layout.inherent_dim, cv = layout.cross_dim;
  const int n_heads = m.cfg.n_heads;
  t.cold = true;
  t.concat = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(n_heads) * m.cfg.d_v);
  if (m.cfg.variant == ModelVariant::AvgPool) {
    if (u.full_pool.count > 0) {
      t.cold = false;
      const Eigen::VectorXd pooled_full = gather_pooled(u.full_pool, schema, m.tables);
      t.avg_pooled = pooled_full.head(hv + cv);
      for (int a = 0; a < n_heads; ++a)
        t.concat.segment(static_cast<Eigen::Index>(a) * m.cfg.d_v, m.cfg.d_v) =
            m.attn.heads[static_cast<std::size_t>(a)].w_v.transpose() * t.avg_pooled;
    }
  } else if (u.attn.count() > 0) {
    t.cold = false;
    const Eigen::VectorXd scores =
        gsu_scores(u.attn, m.tables, spans, m.attn.heads[0], t.q, m.cfg.reweight_gsu);
    t.picks = gsu_topk(scores, m.cfg.gsu_k);
    t.sel_scores.resize(static_cast<Eigen::Index>(t.picks.size()));
    t.n_sub.resize(t.picks.size());
    for (std::size_t i = 0; i < t.picks.size(); ++i) {
      t.sel_scores[static_cast<Eigen::Index>(i)] = scores[t.picks[i]];
      t.n_sub[i] = u.attn.sizes[static_cast<std::size_t>(t.picks[i])];
    }
    gather_split(u.attn, t.picks, m.tables, spans, hv, cv, &t.sub);
    t.w.resize(static_cast<std::size_t>(n_heads));
    for (int a = 0; a < n_heads; ++a)
      t.concat.segment(static_cast<Eigen::Index>(a) * m.cfg.d_v, m.cfg.d_v) =
          esu_head(t.q, t.sub, m.attn.heads[static_cast<std::size_t>(a)], t.n_sub,
                   m.cfg.reweight_esu, &t.w[static_cast<std::size_t>(a)], nullptr);
  }
  t.interest = m.attn.w_o.transpose() * t.concat;

  t.user_vec = m.user_table.row(u.user_row).transpose();
  t.recent_vec = gather_pooled(u.recent, schema, m.tables);

  t.mlp_in.resize(m.mlp_input_dim());
  Eigen::Index off = 0;
  t.mlp_in.segment(off, t.user_vec.size()) = t.user_vec;
  off += t.user_vec.size();
  t.mlp_in.segment(off, t.target_full.size()) = t.target_full;
  off += t.target_full.size();
  t.mlp_in.segment(off, t.interest.size()) = t.interest;
  off += t.interest.size();
  t.mlp_in.segment(off, t.recent_vec.size()) = t.recent_vec;

  Eigen::VectorXd x = t.mlp_in;
  t.acts.clear();
  const std::size_t n_layers = m.mlp.weights.size();
  for (std::size_t l = 0; l + 1 < n_layers; ++l) {
    x = (m.mlp.weights[l].transpose() * x + m.mlp.biases[l]).cwiseMax(0.0).eval();
    t.acts.push_back(x);
  }
  const double z =
      (m.mlp.weights.back().transpose() * x + m.mlp.biases.back())(0);
  t.clamped = z > kLogitClamp || z < -kLogitClamp;
  t.logit = std::clamp(z, -kLogitClamp, kLogitClamp);
  t.prob = sigmoid(t.logit);
}

void add_row(std::unordered_map<std::uint32_t, Eigen::RowVectorXd>& rows, std::uint32_t idx,
             const Eigen::RowVectorXd& grad) {
  auto it = rows.find(idx);
  if (it == rows.end())
    rows.emplace(idx, grad);
  else
    it->second += grad;
}

void scatter_pooled(const PooledCounts& counts, const Eigen::VectorXd& d_vec,
                    const std::vector<FieldSpan>& spans, const EmbedLayout& layout,
                    ModelGrads& g) {
  // d_vec is laid out [id | cross, ...]: both the split vector (H+8J) and the
  // full embedding share these offsets, and numericals carry no parameters.
  for (std::size_t f = 0; f < spans.size(); ++f) {
    const FieldSpan& sp = spans[f];
    const Eigen::Index base = sp.cross ? layout.inherent_dim + sp.offset : sp.offset;
    for (const auto& [idx, wgt] : counts.fields[f])
      add_row(g.table_rows[f], idx, wgt * d_vec.segment(base, sp.dim).transpose());
  }
}

void scatter_item(const std::vector<std::uint32_t>& cat, const Eigen::VectorXd& d_full,
                  const std::vector<FieldSpan>& spans, const EmbedLayout& layout, ModelGrads& g) {
  for (std::size_t f = 0; f < spans.size(); ++f) {
    const FieldSpan& sp = spans[f];
    const Eigen::Index base = sp.cross ? layout.inherent_dim + sp.offset : sp.offset;
    add_row(g.table_rows[f], cat[f], d_full.segment(base, sp.dim).transpose());
  }
}

// dlogit is dL/d(logit) for this sample, already zeroed when the logit or
// probability clamp was active.
void backward_sample(const CtrModel& m, const UserState& u, const Tape& t, double dlogit,
                     const std::vector<FieldSpan>& spans, const EmbedLayout& layout,
                     ModelGrads& g) {
  const std::size_t n_layers = m.mlp.weights.size();
  Eigen::VectorXd d = Eigen::VectorXd::Constant(1, dlogit);
  for (std::size_t li = n_layers; li-- > 0;) {
    const Eigen::VectorXd& in = (li == 0) ? t.mlp_in : t.acts[li - 1];
    g.mlp_w[li].noalias() += in * d.transpose();
    g.mlp_b[li] += d;
    Eigen::VectorXd din = m.mlp.weights[li] * d;
    if (li > 0) {
      const Eigen::VectorXd& act = t.acts[li - 1];
      for (Eigen::Index i = 0; i < din.size(); ++i)
        if (act[i] <= 0.0) din[i] = 0.0;
    }
    d = std::move(din);
  }

  Eigen::Index off = 0;
  const Eigen::VectorXd d_user = d.segment(off, t.user_vec.size());
  off += t.user_vec.size();
  Eigen::VectorXd d_target = d.segment(off, t.target_full.size());
  off += t.target_full.size();
  const Eigen::VectorXd d_interest = d.segment(off, t.interest.size());
  off += t.interest.size();
  const Eigen::VectorXd d_recent = d.segment(off, t.recent_vec.size());

  add_row(g.user_rows, u.user_row, d_user.transpose());
  if (u.recent.count > 0) scatter_pooled(u.recent, d_recent, spans, layout, g);

  if (!t.cold) {
    g.w_o.noalias() += t.concat * d_interest.transpose();
    const Eigen::VectorXd d_concat = m.attn.w_o * d_interest;
    const Eigen::Index hv = layout.inherent_dim, cv = layout.cross_dim;
    const int d_v = m.cfg.d_v;

    if (m.cfg.variant == ModelVariant::AvgPool) {
      Eigen::VectorXd d_pooled = Eigen::VectorXd::Zero(hv + cv);
      for (int a = 0; a < m.cfg.n_heads; ++a) {
        const auto& hp = m.attn.heads[static_cast<std::size_t>(a)];
        const Eigen::VectorXd d_head = d_concat.segment(static_cast<Eigen::Index>(a) * d_v, d_v);
        g.heads[static_cast<std::size_t>(a)].w_v.noalias() += t.avg_pooled * d_head.transpose();
        d_pooled.noalias() += hp.w_v * d_head;
      }
      scatter_pooled(u.full_pool, d_pooled, spans, layout, g);
    } else {
      const Eigen::Index k = t.sub.rows();
      RowMatrixXd d_kh = RowMatrixXd::Zero(k, hv);
      RowMatrixXd d_kc = RowMatrixXd::Zero(k, cv);
      Eigen::VectorXd d_q = Eigen::VectorXd::Zero(t.q.size());
      const Eigen::Index n_cross = m.attn.heads[0].w_c.cols();

      for (int a = 0; a < m.cfg.n_heads; ++a) {
        const auto& hp = m.attn.heads[static_cast<std::size_t>(a)];
        HeadGrads& hg = g.heads[static_cast<std::size_t>(a)];
        const Eigen::VectorXd& w = t.w[static_cast<std::size_t>(a)];
        const Eigen::VectorXd d_head = d_concat.segment(static_cast<Eigen::Index>(a) * d_v, d_v);

        Eigen::RowVectorXd pooled(hv + cv);
        pooled.head(hv).noalias() = w.transpose() * t.sub.k_h;
        pooled.tail(cv).noalias() = w.transpose() * t.sub.k_c;
        hg.w_v.noalias() += pooled.transpose() * d_head.transpose();
        const Eigen::VectorXd d_pooled = hp.w_v * d_head;  // column, width H+8J

        Eigen::VectorXd dw = t.sub.k_h * d_pooled.head(hv);
        if (cv > 0) dw.noalias() += t.sub.k_c * d_pooled.tail(cv);
        const double mix = w.dot(dw);
        const Eigen::VectorXd ds = (w.array() * (dw.array() - mix)).matrix();

        const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(hp.w_q.cols()));
        const Eigen::VectorXd b = hp.w_q.transpose() * t.q;
        const Eigen::VectorXd hq = hp.w_h * b;
        const Eigen::RowVectorXd s_kh = ds.transpose() * t.sub.k_h;  // 1 x H
        hg.w_q.noalias() += t.q * (s_kh * hp.w_h) * inv_sqrt;
        hg.w_h.noalias() += (s_kh.transpose() * b.transpose()) * inv_sqrt;
        d_q.noalias() += hp.w_q * (hp.w_h.transpose() * s_kh.transpose()) * inv_sqrt;

        for (Eigen::Index j = 0; j < n_cross; ++j) {
          const auto block = t.sub.k_c.middleCols(j * kCrossFieldDim, kCrossFieldDim);
          const Eigen::VectorXd bj = block.transpose() * ds;  // 8
          hg.beta[j] += bj.dot(hp.w_c.col(j));
          hg.w_c.col(j).noalias() += hp.beta[j] * bj;
          d_kc.middleCols(j * kCrossFieldDim, kCrossFieldDim).noalias() +=
              hp.beta[j] * (ds * hp.w_c.col(j).transpose());
        }

        d_kh.noalias() += ds * (hq.transpose() * inv_sqrt);
        d_kh.noalias() += w * d_pooled.head(hv).transpose();
        if (cv > 0) d_kc.noalias() += w * d_pooled.tail(cv).transpose();
      }

      // Scatter the K gradients back onto the embedding rows of each
      // retrieved unit.
      const std::size_t nf = spans.size();
      for (std::size_t r = 0; r < t.picks.size(); ++r) {
        const std::uint32_t* row =
            u.attn.cat.data() + static_cast<std::size_t>(t.picks[r]) * nf;
        for (std::size_t f = 0; f < nf; ++f) {
          const FieldSpan& sp = spans[f];
          const auto& src = sp.cross ? d_kc : d_kh;
          add_row(g.table_rows[f], row[f],
                  src.row(static_cast<Eigen::Index>(r)).segment(sp.offset, sp.dim));
        }
      }
      d_target.head(hv) += d_q;
    }
  }

  scatter_item(t.target_cat, d_target, spans, layout, g);
}

double bce_one(double p, double y, bool* clamped_out) {
  double pc = p;
  if (pc < kProbClamp) pc = kProbClamp;
  if (pc > 1.0 - kProbClamp) pc = 1.0 - kProbClamp;
  if (clamped_out) *clamped_out = pc != p;
  return -(y * std::log(pc) + (1.0 - y) * std::log1p(-pc));
}

struct ChunkOut {
  double loss_sum = 0.0;
  std::size_t clamped = 0;
  ModelGrads grads;
};

}  // namespace

void ModelConfig::validate() const {
  if (d_k < 1 || d_v < 1 || d_out < 1 || d_user < 1)
    throw config_error("model: dimensions must be positive");
  if (n_heads < 1) throw config_error("model: n_heads must be at least 1");
  if (gsu_k < 1) throw config_error("model: gsu_k must be at least 1");
  if (recent_len < 1) throw config_error("model: recent_len must be at least 1");
  if (mlp_widths.empty()) throw config_error("model: mlp_widths must not be empty");
  for (int w : mlp_widths)
    if (w < 1) throw config_error("model: mlp widths must be positive");
}

void TrainConfig::validate() const {
  if (lr < 0.0) throw config_error("train: learning rate must be non-negative");
  if (batch_size < 1) throw config_error("train: batch_size must be at least 1");
  if (epochs < 1) throw config_error("train: epochs must be at least 1");
  if (threads < 1) throw config_error("train: threads must be at least 1");
  if (adam_beta1 < 0.0 || adam_beta1 >= 1.0 || adam_beta2 < 0.0 || adam_beta2 >= 1.0)
    throw config_error("train: adam betas must lie in [0,1)");
  if (adam_eps <= 0.0) throw config_error("train: adam_eps must be positive");
}

int CtrModel::mlp_input_dim() const {
  return cfg.d_user + 2 * static_cast<int>(schema.embed_dim()) + cfg.d_out;
}

std::size_t CtrModel::parameter_count() const {
  std::size_t n = attn.parameter_count() + static_cast<std::size_t>(user_table.size());
  for (const auto& f : tables.fields) n += static_cast<std::size_t>(f.size());
  for (const auto& w : mlp.weights) n += static_cast<std::size_t>(w.size());
  for (const auto& b : mlp.biases) n += static_cast<std::size_t>(b.size());
  return n;
}

CtrModel CtrModel::init(const CatalogSchema& schema, std::size_t n_users,
                        const ModelConfig& cfg) {
  cfg.validate();
  schema.validate();
  CtrModel m;
  m.cfg = cfg;
  m.schema = schema;
  Rng root(cfg.init_seed);

  Rng er = root.split(1);
  m.tables = EmbeddingTable::init(schema, er);

  Rng ur = root.split(2);
  m.user_table.resize(static_cast<Eigen::Index>(n_users), cfg.d_user);
  fill_uniform(m.user_table, 1.0 / std::sqrt(static_cast<double>(cfg.d_user)), ur);

  Rng ar = root.split(3);
  m.attn = AttentionParams::init(static_cast<int>(schema.inherent_dim()),
                                 static_cast<int>(schema.cross_count()), cfg.n_heads, cfg.d_k,
                                 cfg.d_v, cfg.d_out, ar);

  Rng mr = root.split(4);
  int in_dim = m.mlp_input_dim();
  for (std::size_t l = 0; l <= cfg.mlp_widths.size(); ++l) {
    const int out_dim =
        l < cfg.mlp_widths.size() ? cfg.mlp_widths[l] : 1;
    Eigen::MatrixXd w(in_dim, out_dim);
    fill_uniform(w, 1.0 / std::sqrt(static_cast<double>(in_dim)), mr);
    m.mlp.weights.push_back(std::move(w));
    m.mlp.biases.push_back(Eigen::VectorXd::Zero(out_dim));
    in_dim = out_dim;
  }
  return m;
}

AttentionSource source_from_virtual_items(const CompressedHistory& hist,
                                          const std::vector<VirtualItem>& items) {
  if (hist.clusters.size() != items.size())
    throw config_error("attention source: cluster/virtual-item count mismatch");
  AttentionSource src;
  const std::size_t nf = items.empty() ? 0 : items[0].categorical.size();
  src.cat.reserve(items.size() * nf);
  src.sizes.reserve(items.size());
  src.ids.reserve(items.size());
  for (std::size_t i = 0; i < items.size(); ++i) {
    src.cat.insert(src.cat.end(), items[i].categorical.begin(), items[i].categorical.end());
    src.sizes.push_back(static_cast<std::int64_t>(hist.clusters[i].size()));
    src.ids.push_back(items[i].source_item_id);
  }
  return src;
}

AttentionSource source_from_records(const std::vector<BehaviorRecord>& records,
                                    const Catalog& catalog) {
  AttentionSource src;
  const std::size_t nf = catalog.schema().n_categorical();
  src.cat.reserve(records.size() * nf);
  src.sizes.assign(records.size(), 1);
  src.ids.reserve(records.size());
  for (const BehaviorRecord& rec : records) {
    const ItemFeatures f = resolve_behavior(catalog, rec);
    src.cat.insert(src.cat.end(), f.categorical.begin(), f.categorical.end());
    src.ids.push_back(rec.item_id);
  }
  return src;
}

PooledCounts pool_records(const std::vector<BehaviorRecord>& records, const Catalog& catalog) {
  const CatalogSchema& schema = catalog.schema();
  PooledCounts pc;
  pc.fields.resize(schema.n_categorical());
  pc.count = static_cast<std::int64_t>(records.size());
  if (records.empty()) return pc;
  std::vector<std::map<std::uint32_t, std::int64_t>> counts(schema.n_categorical());
  Eigen::VectorXd nsum = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(schema.n_numerical()));
  for (const BehaviorRecord& rec : records) {
    const ItemFeatures f = resolve_behavior(catalog, rec);
    for (std::size_t i = 0; i < f.categorical.size(); ++i) ++counts[i][f.categorical[i]];
    for (std::size_t i = 0; i < f.numerical.size(); ++i)
      nsum[static_cast<Eigen::Index>(i)] += f.numerical[i];
  }
  const double inv = 1.0 / static_cast<double>(records.size());
  for (std::size_t i = 0; i < counts.size(); ++i) {
    pc.fields[i].reserve(counts[i].size());
    for (const auto& [idx, c] : counts[i])
      pc.fields[i].emplace_back(idx, static_cast<double>(c) * inv);
  }
  pc.numerical_mean = nsum * inv;
  return pc;
}

Eigen::VectorXd gather_pooled(const PooledCounts& counts, const CatalogSchema& schema,
                              const EmbeddingTable& tables) {
  const EmbedLayout layout = EmbedLayout::of(schema);
  Eigen::VectorXd out = Eigen::VectorXd::Zero(layout.total());
  if (counts.count == 0) return out;
  const auto spans = field_spans(schema);
  for (std::size_t f = 0; f < spans.size(); ++f) {
    const FieldSpan& sp = spans[f];
    const Eigen::Index base = sp.cross ? layout.inherent_dim + sp.offset : sp.offset;
    for (const auto& [idx, wgt] : counts.fields[f])
      out.segment(base, sp.dim) += wgt * tables.fields[f].row(idx).transpose();
  }
  out.tail(layout.numerical_dim) = counts.numerical_mean;
  return out;
}

UserState make_user_state(const CompressedHistory& hist, const std::vector<VirtualItem>& items,
                          const BehaviorSequence& seq, const Catalog& catalog,
                          const ModelConfig& cfg, std::uint32_t user_row) {
  UserState s;
  s.user_id = seq.user_id;
  s.user_row = user_row;
  const std::size_t n = seq.records.size();
  const std::size_t r0 = n > static_cast<std::size_t>(cfg.recent_len)
                             ? n - static_cast<std::size_t>(cfg.recent_len)
                             : 0;
  const std::vector<BehaviorRecord> recent(seq.records.begin() + static_cast<std::ptrdiff_t>(r0),
                                           seq.records.end());
  s.recent = pool_records(recent, catalog);
  switch (cfg.variant) {
    case ModelVariant::Full:
      s.attn = source_from_virtual_items(hist, items);
      break;
    case ModelVariant::ShortTA:
      s.attn = source_from_records(recent, catalog);
      break;
    case ModelVariant::AvgPool:
      s.full_pool = pool_records(seq.records, catalog);
      break;
  }
  return s;
}

ForwardResult forward(const CtrModel& model, const Catalog& catalog, const UserState& user,
                      ItemId target) {
  const auto spans = field_spans(model.schema);
  const EmbedLayout layout = EmbedLayout::of(model.schema);
  Tape t;
  run_forward(model, catalog, user, target, spans, layout, t);
  ForwardResult r;
  r.prob = t.prob;
  r.logit = t.logit;
  r.cold = t.cold;
  r.clamped = t.clamped;
  r.retrieved = t.picks;
  r.retrieval_scores = t.sel_scores;
  if (!t.w.empty()) r.esu_weights = t.w[0];
  return r;
}

double bce_loss(const std::vector<double>& predictions, const std::vector<double>& labels,
                std::size_t* clamped) {
  if (predictions.size() != labels.size())
    throw config_error("bce_loss: prediction/label length mismatch");
  if (predictions.empty()) throw config_error("bce_loss: empty input");
  double sum = 0.0;
  std::size_t n_clamped = 0;
  for (std::size_t i = 0; i < predictions.size(); ++i) {
    bool c = false;
    sum += bce_one(predictions[i], labels[i], &c);
    n_clamped += c ? 1 : 0;
  }
  if (clamped) *clamped = n_clamped;
  return sum / static_cast<double>(predictions.size());
}

ModelGrads ModelGrads::zeros_like(const CtrModel& model) {
  ModelGrads g;
  g.heads.resize(model.attn.heads.size());
  for (std::size_t a = 0; a < g.heads.size(); ++a) {
    const HeadParams& h = model.attn.heads[a];
    g.heads[a].w_q = Eigen::MatrixXd::Zero(h.w_q.rows(), h.w_q.cols());
    g.heads[a].w_h = Eigen::MatrixXd::Zero(h.w_h.rows(), h.w_h.cols());
    g.heads[a].w_c = Eigen::MatrixXd::Zero(h.w_c.rows(), h.w_c.cols());
    g.heads[a].beta = Eigen::VectorXd::Zero(h.beta.size());
    g.heads[a].w_v = Eigen::MatrixXd::Zero(h.w_v.rows(), h.w_v.cols());
  }
  g.w_o = Eigen::MatrixXd::Zero(model.attn.w_o.rows(), model.attn.w_o.cols());
  for (const auto& w : model.mlp.weights) g.mlp_w.push_back(Eigen::MatrixXd::Zero(w.rows(), w.cols()));
  for (const auto& b : model.mlp.biases) g.mlp_b.push_back(Eigen::VectorXd::Zero(b.size()));
  g.table_rows.resize(model.tables.fields.size());
  return g;
}

void ModelGrads::accumulate(const ModelGrads& other) {
  for (std::size_t a = 0; a < heads.size(); ++a) {
    heads[a].w_q += other.heads[a].w_q;
    heads[a].w_h += other.heads[a].w_h;
    heads[a].w_c += other.heads[a].w_c;
    heads[a].beta += other.heads[a].beta;
    heads[a].w_v += other.heads[a].w_v;
  }
  w_o += other.w_o;
  for (std::size_t l = 0; l < mlp_w.size(); ++l) {
    mlp_w[l] += other.mlp_w[l];
    mlp_b[l] += other.mlp_b[l];
  }
  for (std::size_t f = 0; f < table_rows.size(); ++f)
    for (const auto& [idx, row] : other.table_rows[f]) add_row(table_rows[f], idx, row);
  for (const auto& [idx, row] : other.user_rows) add_row(user_rows, idx, row);
}

std::vector<ParamView> parameter_views(CtrModel& model) {
  std::vector<ParamView> v;
  for (std::size_t a = 0; a < model.attn.heads.size(); ++a) {
    HeadParams& h = model.attn.heads[a];
    const std::string p = "head" + std::to_string(a) + ".";
    v.push_back({p + "w_q", h.w_q.data(), static_cast<std::size_t>(h.w_q.size())});
    v.push_back({p + "w_h", h.w_h.data(), static_cast<std::size_t>(h.w_h.size())});
    v.push_back({p + "w_c", h.w_c.data(), static_cast<std::size_t>(h.w_c.size())});
    v.push_back({p + "beta", h.beta.data(), static_cast<std::size_t>(h.beta.size())});
    v.push_back({p + "w_v", h.w_v.data(), static_cast<std::size_t>(h.w_v.size())});
  }
  v.push_back({"w_o", model.attn.w_o.data(), static_cast<std::size_t>(model.attn.w_o.size())});
  for (std::size_t l = 0; l < model.mlp.weights.size(); ++l) {
    v.push_back({"mlp.w" + std::to_string(l), model.mlp.weights[l].data(),
                 static_cast<std::size_t>(model.mlp.weights[l].size())});
    v.push_back({"mlp.b" + std::to_string(l), model.mlp.biases[l].data(),
                 static_cast<std::size_t>(model.mlp.biases[l].size())});
  }
  return v;
}

std::vector<ParamView> grad_views(ModelGrads& grads, const CtrModel& model) {
  (void)model;
  std::vector<ParamView> v;
  for (std::size_t a = 0; a < grads.heads.size(); ++a) {
    HeadGrads& h = grads.heads[a];
    const std::string p = "head" + std::to_string(a) + ".";
    v.push_back({p + "w_q", h.w_q.data(), static_cast<std::size_t>(h.w_q.size())});
    v.push_back({p + "w_h", h.w_h.data(), static_cast<std::size_t>(h.w_h.size())});
    v.push_back({p + "w_c", h.w_c.data(), static_cast<std::size_t>(h.w_c.size())});
    v.push_back({p + "beta", h.beta.data(), static_cast<std::size_t>(h.beta.size())});
    v.push_back({p + "w_v", h.w_v.data(), static_cast<std::size_t>(h.w_v.size())});
  }
  v.push_back({"w_o", grads.w_o.data(), static_cast<std::size_t>(grads.w_o.size())});
  for (std::size_t l = 0; l < grads.mlp_w.size(); ++l) {
    v.push_back({"mlp.w" + std::to_string(l), grads.mlp_w[l].data(),
                 static_cast<std::size_t>(grads.mlp_w[l].size())});
    v.push_back({"mlp.b" + std::to_string(l), grads.mlp_b[l].data(),
                 static_cast<std::size_t>(grads.mlp_b[l].size())});
  }
  return v;
}

namespace {

void scale_grads(ModelGrads& g, double s) {
  for (auto& h : g.heads) {
    h.w_q *= s;
    h.w_h *= s;
    h.w_c *= s;
    h.beta *= s;
    h.w_v *= s;
  }
  g.w_o *= s;
  for (auto& w : g.mlp_w) w *= s;
  for (auto& b : g.mlp_b) b *= s;
  for (auto& m : g.table_rows)
    for (auto& [idx, row] : m) row *= s;
  for (auto& [idx, row] : g.user_rows) row *= s;
}

void run_chunks(std::size_t n_chunks, int threads, const std::function<void(std::size_t)>& body) {
  if (threads <= 1 || n_chunks <= 1) {
    for (std::size_t c = 0; c < n_chunks; ++c) body(c);
    return;
  }
  const int nt = static_cast<int>(std::min<std::size_t>(static_cast<std::size_t>(threads), n_chunks));
  std::vector<std::thread> pool;
  pool.reserve(static_cast<std::size_t>(nt));
  for (int t = 0; t < nt; ++t)
    pool.emplace_back([&, t] {
      for (std::size_t c = static_cast<std::size_t>(t); c < n_chunks;
           c += static_cast<std::size_t>(nt))
        body(c);
    });
  for (auto& th : pool) th.join();
}

}  // namespace

BatchResult batch_gradients(const CtrModel& model, const Catalog& catalog, const TrainSet& data,
                            const std::vector<std::size_t>& sample_idx, int threads) {
  if (sample_idx.empty()) throw config_error("batch_gradients: empty batch");
  const auto spans = field_spans(model.schema);
  const EmbedLayout layout = EmbedLayout::of(model.schema);
  const std::size_t n = sample_idx.size();
  const std::size_t n_chunks = (n + kChunk - 1) / kChunk;

  std::vector<ChunkOut> outs(n_chunks);
  run_chunks(n_chunks, threads, [&](std::size_t c) {
    ChunkOut& out = outs[c];
    out.grads = ModelGrads::zeros_like(model);
    const std::size_t lo = c * kChunk, hi = std::min(n, lo + kChunk);
    Tape t;
    for (std::size_t i = lo; i < hi; ++i) {
      const Sample& s = data.samples[sample_idx[i]];
      const UserState& u = data.states[s.state_idx];
      run_forward(model, catalog, u, s.target, spans, layout, t);
      bool prob_clamped = false;
      out.loss_sum += bce_one(t.prob, s.label, &prob_clamped);
      out.clamped += prob_clamped ? 1 : 0;
      const double dz = (t.clamped || prob_clamped) ? 0.0 : t.prob - s.label;
      if (dz != 0.0) backward_sample(model, u, t, dz, spans, layout, out.grads);
    }
  });

  BatchResult res;
  res.grads = std::move(outs[0].grads);
  res.loss = outs[0].loss_sum;
  res.clamped = outs[0].clamped;
  for (std::size_t c = 1; c < n_chunks; ++c) {
    res.grads.accumulate(outs[c].grads);
    res.loss += outs[c].loss_sum;
    res.clamped += outs[c].clamped;
  }
  const double inv = 1.0 / static_cast<double>(n);
  res.loss *= inv;
  scale_grads(res.grads, inv);
  return res;
}

std::vector<double> predict_all(const CtrModel& model, const Catalog& catalog,
                                const TrainSet& data, int threads) {
  const auto spans = field_spans(model.schema);
  const EmbedLayout layout = EmbedLayout::of(model.schema);
  const std::size_t n = data.samples.size();
  std::vector<double> probs(n, 0.0);
  const std::size_t n_chunks = (n + kChunk - 1) / kChunk;
  run_chunks(n_chunks, threads, [&](std::size_t c) {
    const std::size_t lo = c * kChunk, hi = std::min(n, lo + kChunk);
    Tape t;
    for (std::size_t i = lo; i < hi; ++i) {
      const Sample& s = data.samples[i];
      run_forward(model, catalog, data.states[s.state_idx], s.target, spans, layout, t);
      probs[i] = t.prob;
    }
  });
  return probs;
}

namespace {

struct AdamRow {
  Eigen::RowVectorXd m, v;
};

struct OptimizerState {
  std::vector<Eigen::ArrayXd> m, v;  // aligned with parameter_views order
  std::vector<std::unordered_map<std::uint32_t, AdamRow>> table_rows;
  std::unordered_map<std::uint32_t, AdamRow> user_rows;
  std::int64_t t = 0;
};

void check_finite(ModelGrads& g, const CtrModel& model) {
  for (const ParamView& v : grad_views(g, model))
    for (std::size_t i = 0; i < v.size; ++i)
      if (!std::isfinite(v.data[i]))
        throw numeric_error("non-finite gradient in " + v.name);
  for (std::size_t f = 0; f < g.table_rows.size(); ++f)
    for (const auto& [idx, row] : g.table_rows[f])
      if (!row.allFinite())
        throw numeric_error("non-finite gradient in embedding field " + std::to_string(f) +
                            " row " + std::to_string(idx));
  for (const auto& [idx, row] : g.user_rows)
    if (!row.allFinite())
      throw numeric_error("non-finite gradient in user row " + std::to_string(idx));
}

void adam_update(double* p, const double* grad, double* m, double* v, std::size_t n,
                 const TrainConfig& cfg, double bc1, double bc2) {
  for (std::size_t i = 0; i < n; ++i) {
    m[i] = cfg.adam_beta1 * m[i] + (1.0 - cfg.adam_beta1) * grad[i];
    v[i] = cfg.adam_beta2 * v[i] + (1.0 - cfg.adam_beta2) * grad[i] * grad[i];
    const double mh = m[i] / bc1;
    const double vh = v[i] / bc2;
    p[i] -= cfg.lr * mh / (std::sqrt(vh) + cfg.adam_eps);
  }
}

void apply_gradients(CtrModel& model, ModelGrads& g, OptimizerState& st,
                     const TrainConfig& cfg) {
  ++st.t;
  auto params = parameter_views(model);
  auto grads = grad_views(g, model);
  const double bc1 = 1.0 - std::pow(cfg.adam_beta1, static_cast<double>(st.t));
  const double bc2 = 1.0 - std::pow(cfg.adam_beta2, static_cast<double>(st.t));

  if (cfg.optimizer == Optimizer::SGD) {
    for (std::size_t i = 0; i < params.size(); ++i)
      for (std::size_t j = 0; j < params[i].size; ++j)
        params[i].data[j] -= cfg.lr * grads[i].data[j];
    for (std::size_t f = 0; f < g.table_rows.size(); ++f)
      for (const auto& [idx, row] : g.table_rows[f])
        model.tables.fields[f].row(idx) -= cfg.lr * row;
    for (const auto& [idx, row] : g.user_rows) model.user_table.row(idx) -= cfg.lr * row;
    return;
  }

  if (st.m.empty()) {
    st.m.resize(params.size());
    st.v.resize(params.size());
    for (std::size_t i = 0; i < params.size(); ++i) {
      st.m[i] = Eigen::ArrayXd::Zero(static_cast<Eigen::Index>(params[i].size));
      st.v[i] = Eigen::ArrayXd::Zero(static_cast<Eigen::Index>(params[i].size));
    }
    st.table_rows.resize(g.table_rows.size());
  }
  for (std::size_t i = 0; i < params.size(); ++i)
    adam_update(params[i].data, grads[i].data, st.m[i].data(), st.v[i].data(), params[i].size,
                cfg, bc1, bc2);
  // Lazy moments for sparse rows: only touched rows advance, with the global
  // step used for bias correction.
  for (std::size_t f = 0; f < g.table_rows.size(); ++f) {
    for (const auto& [idx, row] : g.table_rows[f]) {
      AdamRow& ar = st.table_rows[f]
                        .try_emplace(idx, AdamRow{Eigen::RowVectorXd::Zero(row.size()),
                                                  Eigen::RowVectorXd::Zero(row.size())})
                        .first->second;
      double* p = model.tables.fields[f].row(idx).data();
      adam_update(p, row.data(), ar.m.data(), ar.v.data(), static_cast<std::size_t>(row.size()),
                  cfg, bc1, bc2);
    }
  }
  for (const auto& [idx, row] : g.user_rows) {
    AdamRow& ar = st.user_rows
                      .try_emplace(idx, AdamRow{Eigen::RowVectorXd::Zero(row.size()),
                                                Eigen::RowVectorXd::Zero(row.size())})
                      .first->second;
    double* p = model.user_table.row(idx).data();
    adam_update(p, row.data(), ar.m.data(), ar.v.data(), static_cast<std::size_t>(row.size()),
                cfg, bc1, bc2);
  }
}

}  // namespace

TrainResult train(CtrModel& model, const Catalog& catalog, const TrainSet& data,
                  const TrainConfig& cfg, const std::vector<std::size_t>* subset) {
  cfg.validate();
  std::vector<std::size_t> order;
  if (subset) {
    order = *subset;
    for (std::size_t idx : order)
      if (idx >= data.samples.size()) throw data_error("train: subset index out of range");
  } else {
    order.resize(data.samples.size());
    std::iota(order.begin(), order.end(), 0);
  }
  if (order.empty()) throw data_error("train: dataset has no samples");
  const std::size_t n = order.size();
  OptimizerState opt;
  TrainResult res;

  // Divergence baseline is the loss before any update; the first epoch's
  // running loss already mixes in post-update batches and can hide a blow-up
  // inside epoch 0.
  std::vector<double> preds0, labels0;
  preds0.reserve(n);
  labels0.reserve(n);
  for (std::size_t idx : order) {
    const Sample& s = data.samples[idx];
    preds0.push_back(forward(model, catalog, data.states[s.state_idx], s.target).prob);
    labels0.push_back(s.label);
  }
  const double initial = bce_loss(preds0, labels0);
  int bad_streak = 0;

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    Rng shuffle_rng = Rng(cfg.seed).split(0x1000 + static_cast<std::uint64_t>(epoch));
    for (std::size_t i = n; i > 1; --i) {
      const std::size_t j = static_cast<std::size_t>(shuffle_rng.uniform_index(i));
      std::swap(order[i - 1], order[j]);
    }

    double loss_sum = 0.0;
    for (std::size_t lo = 0; lo < n; lo += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t hi = std::min(n, lo + static_cast<std::size_t>(cfg.batch_size));
      const std::vector<std::size_t> batch(order.begin() + static_cast<std::ptrdiff_t>(lo),
                                           order.begin() + static_cast<std::ptrdiff_t>(hi));
      BatchResult br = batch_gradients(model, catalog, data, batch, cfg.threads);
      check_finite(br.grads, model);
      apply_gradients(model, br.grads, opt, cfg);
      loss_sum += br.loss * static_cast<double>(hi - lo);
    }
    const double epoch_loss = loss_sum / static_cast<double>(n);
    res.epoch_loss.push_back(epoch_loss);
    res.epoch_seconds.push_back(
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());

    if (epoch_loss > 10.0 * initial) {
      if (++bad_streak >= 3)
        throw numeric_error("training diverged: epoch " + std::to_string(epoch) + " loss " +
                            std::to_string(epoch_loss) + " vs initial " +
                            std::to_string(initial));
    } else {
      bad_streak = 0;
    }
  }
  return res;
}

}  // namespace longrec
