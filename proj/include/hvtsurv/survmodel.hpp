#pragma once

// Patient-level survival model: per sub-bag linear reduction, a local
// window block with Manhattan position bias, a shuffle window block, then
// attention pooling over every row of the patient and a discrete-hazard
// head.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <functional>
#include <limits>
#include <map>
#include <span>
#include <string>
#include <tuple>
#include <vector>

#include "hvtsurv/blocks.hpp"
#include "hvtsurv/checkpoint.hpp"
#include "hvtsurv/numerics.hpp"
#include "hvtsurv/rearrange.hpp"
#include "hvtsurv/rng.hpp"
#include "hvtsurv/survstats.hpp"

namespace hvtsurv {

inline constexpr double kLogFloor = 1e-12;

struct HVTSurvConfig {
  int input_dim = 1024;
  int model_dim = 512;
  int window_size = 49;
  int n_heads = 8;
  int n_sub_wsis = 2;
  int n_intervals = 4;
  int ff_ratio = 4;
  int pool_hidden = 256;
  BucketParams buckets;
  double init_std = 0.02;

  double learning_rate = 2e-4;
  double weight_decay = 1e-5;
  int patience = 8;
  int max_epochs = 30;
  int batch_size = 1;
  std::uint64_t seed = 0;

  void validate() const {
    require(input_dim >= 1 && model_dim >= 1 && window_size >= 1 && n_heads >= 1 && n_sub_wsis >= 1 &&
                ff_ratio >= 1 && pool_hidden >= 1,
            ErrorKind::Config, "model sizes must be positive");
    require(n_intervals >= 2, ErrorKind::Config, "need at least 2 intervals");
    require(model_dim % n_heads == 0, ErrorKind::Config, "model_dim must be divisible by n_heads");
    require(learning_rate >= 0.0 && weight_decay >= 0.0, ErrorKind::Config, "lr and weight decay must be >= 0");
    require(patience >= 1 && max_epochs >= 0, ErrorKind::Config, "patience >= 1 and max_epochs >= 0 required");
    require(batch_size == 1, ErrorKind::Config, "only batch size 1 is supported");
    buckets.validate();
  }

  std::map<std::string, std::string> to_kv() const {
    auto num = [](double v) {
      char buf[40];
      std::snprintf(buf, sizeof buf, "%.17g", v);
      return std::string(buf);
    };
    return {{"input_dim", std::to_string(input_dim)},
            {"model_dim", std::to_string(model_dim)},
            {"window_size", std::to_string(window_size)},
            {"n_heads", std::to_string(n_heads)},
            {"n_sub_wsis", std::to_string(n_sub_wsis)},
            {"n_intervals", std::to_string(n_intervals)},
            {"ff_ratio", std::to_string(ff_ratio)},
            {"pool_hidden", std::to_string(pool_hidden)},
            {"bucket_alpha", num(buckets.alpha)},
            {"bucket_beta", num(buckets.beta)},
            {"bucket_gamma", num(buckets.gamma)},
            {"bucket_lambda", std::to_string(buckets.lambda)},
            {"init_std", num(init_std)},
            {"learning_rate", num(learning_rate)},
            {"weight_decay", num(weight_decay)},
            {"patience", std::to_string(patience)},
            {"max_epochs", std::to_string(max_epochs)},
            {"batch_size", std::to_string(batch_size)},
            {"seed", std::to_string(seed)}};
  }

  static HVTSurvConfig from_kv(const std::map<std::string, std::string>& kv) {
    HVTSurvConfig c;
    auto get = [&](const char* key) -> const std::string& {
      const auto it = kv.find(key);
      require(it != kv.end(), ErrorKind::Version, std::string("checkpoint config lacks '") + key + "'");
      return it->second;
    };
    try {
      c.input_dim = std::stoi(get("input_dim"));
      c.model_dim = std::stoi(get("model_dim"));
      c.window_size = std::stoi(get("window_size"));
      c.n_heads = std::stoi(get("n_heads"));
      c.n_sub_wsis = std::stoi(get("n_sub_wsis"));
      c.n_intervals = std::stoi(get("n_intervals"));
      c.ff_ratio = std::stoi(get("ff_ratio"));
      c.pool_hidden = std::stoi(get("pool_hidden"));
      c.buckets.alpha = std::stod(get("bucket_alpha"));
      c.buckets.beta = std::stod(get("bucket_beta"));
      c.buckets.gamma = std::stod(get("bucket_gamma"));
      c.buckets.lambda = std::stoi(get("bucket_lambda"));
      c.init_std = std::stod(get("init_std"));
      c.learning_rate = std::stod(get("learning_rate"));
      c.weight_decay = std::stod(get("weight_decay"));
      c.patience = std::stoi(get("patience"));
      c.max_epochs = std::stoi(get("max_epochs"));
      c.batch_size = std::stoi(get("batch_size"));
      c.seed = std::stoull(get("seed"));
    } catch (const std::logic_error& e) {
      fail(ErrorKind::Version, std::string("unparsable checkpoint config: ") + e.what());
    }
    c.validate();
    return c;
  }
};

// ------------------------------------------------------ discrete hazards

/// S(k) = prod_{s <= k} (1 - h(s)), zero-based k.
inline std::vector<double> survival_from_hazards(std::span<const double> hazards) {
  std::vector<double> s(hazards.size());
  double acc = 1.0;
  for (std::size_t k = 0; k < hazards.size(); ++k) {
    require(hazards[k] >= 0.0 && hazards[k] <= 1.0, ErrorKind::Precondition, "hazard outside [0,1]");
    acc *= 1.0 - hazards[k];
    s[k] = acc;
  }
  return s;
}

/// Negative expected-survival proxy; larger means worse prognosis.
inline double risk_from_survival(std::span<const double> survival) {
  double r = 0.0;
  for (double s : survival) r -= s;
  return r;
}

struct HazardOutput {
  std::vector<double> logits;
  std::vector<double> hazards;
  std::vector<double> survival;
  double risk = 0.0;

  static HazardOutput from_logits(std::vector<double> logits) {
    HazardOutput out;
    out.logits = std::move(logits);
    for (double z : out.logits) out.hazards.push_back(sigmoid(z));
    out.survival = survival_from_hazards(out.hazards);
    out.risk = risk_from_survival(out.survival);
    return out;
  }
};

/// -C log S(k) - (1-C) log S(k-1) - (1-C) log h(k), S(-1) = 1, logs floored
/// at 1e-12.
inline double nll_loss(std::span<const double> hazards, int k, bool censored) {
  const int n = static_cast<int>(hazards.size());
  require(k >= 0 && k < n, ErrorKind::Precondition, "interval label out of range");
  auto clamped_log = [](double v) { return std::log(std::max(v, kLogFloor)); };
  double s_k = 1.0;
  double s_prev = 1.0;
  for (int s = 0; s <= k; ++s) {
    if (s == k) s_prev = s_k;
    s_k *= 1.0 - hazards[s];
  }
  if (censored) return -clamped_log(s_k);
  return -clamped_log(s_prev) - clamped_log(hazards[k]);
}

inline double nll_loss(const HazardOutput& out, int k, bool censored) { return nll_loss(out.hazards, k, censored); }

/// d(nll)/d(logit) for hazards = sigmoid(logits). Terms whose log argument
/// sits on the floor contribute nothing.
inline std::vector<double> nll_loss_logit_grad(std::span<const double> hazards, int k, bool censored) {
  const int n = static_cast<int>(hazards.size());
  require(k >= 0 && k < n, ErrorKind::Precondition, "interval label out of range");
  std::vector<double> g(hazards.size(), 0.0);
  const int last_survived = censored ? k : k - 1;  // -log(1-h_s) terms for s <= last_survived
  double s = 1.0;
  for (int i = 0; i <= last_survived; ++i) s *= 1.0 - hazards[i];
  if (s > kLogFloor)
    for (int i = 0; i <= last_survived; ++i) g[i] += hazards[i];
  if (!censored && hazards[k] > kLogFloor) g[k] -= 1.0 - hazards[k];
  return g;
}

// ------------------------------------------------------------- attention

struct WindowAttention {
  std::vector<int> rows;  // sequence positions (input order) of the window's rows
  Matrix<double> attention;  // head-averaged, row-stochastic
};

struct SubBagAttention {
  std::string wsi_id;
  std::vector<int> origin;
  std::vector<GridCoord> coords;
  std::vector<WindowAttention> local;
  std::vector<WindowAttention> shuffle;
  std::vector<double> pool_weights;  // per row; sums to 1 over the whole patient
};

struct AttentionRecord {
  std::vector<SubBagAttention> sub_bags;
};

struct PatchScore {
  std::string layer;
  std::string wsi_id;
  int patch_index = 0;
  int gx = 0;
  int gy = 0;
  double score = 0.0;
};

/// Zeroes the floor(drop_fraction * n) smallest values (lowest index first
/// on ties) and min-max rescales to [0, 1]; a constant vector maps to zeros.
inline std::vector<double> drop_and_rescale(std::vector<double> v, double drop_fraction) {
  require(drop_fraction >= 0.0 && drop_fraction < 1.0, ErrorKind::Precondition, "drop_fraction must be in [0,1)");
  if (v.empty()) return v;
  const auto n_drop = static_cast<std::size_t>(std::floor(drop_fraction * static_cast<double>(v.size()) + 1e-9));
  if (n_drop > 0) {
    std::vector<std::size_t> idx(v.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
    for (std::size_t i = 0; i < n_drop; ++i) v[idx[i]] = 0.0;
  }
  const auto [lo, hi] = std::minmax_element(v.begin(), v.end());
  const double min = *lo;
  const double range = *hi - *lo;
  for (auto& x : v) x = range > 0.0 ? (x - min) / range : 0.0;
  return v;
}

/// Per layer and slide: each window's head-averaged attention is averaged
/// over queries to score its key patches, scores are mapped back to input
/// order and to source patches (padding duplicates averaged), then the
/// smallest `drop_fraction` are zeroed and the rest min-max rescaled.
inline std::vector<PatchScore> export_attention(const AttentionRecord& record, double drop_fraction) {
  struct Accum {
    std::map<int, std::pair<double, int>> sum_count;
    std::map<int, GridCoord> coords;
  };
  const char* layers[] = {"local", "shuffle", "pool"};
  std::vector<PatchScore> out;
  for (const char* layer : layers) {
    std::map<std::string, Accum> by_wsi;
    std::vector<std::string> wsi_order;
    for (const auto& sub : record.sub_bags) {
      if (!by_wsi.count(sub.wsi_id)) wsi_order.push_back(sub.wsi_id);
      auto& acc = by_wsi[sub.wsi_id];
      std::vector<double> row_score(sub.origin.size(), 0.0);
      const std::string name = layer;
      if (name == "pool") {
        row_score = sub.pool_weights;
      } else {
        for (const auto& win : name == "local" ? sub.local : sub.shuffle) {
          const Eigen::RowVectorXd key_score = win.attention.colwise().mean();
          for (std::size_t j = 0; j < win.rows.size(); ++j) row_score[win.rows[j]] = key_score(static_cast<Eigen::Index>(j));
        }
      }
      for (std::size_t r = 0; r < sub.origin.size(); ++r) {
        auto& sc = acc.sum_count[sub.origin[r]];
        sc.first += row_score[r];
        sc.second += 1;
        acc.coords[sub.origin[r]] = sub.coords[r];
      }
    }
    for (const auto& wsi : wsi_order) {
      const auto& acc = by_wsi[wsi];
      std::vector<double> raw;
      std::vector<int> patches;
      for (const auto& [patch, sc] : acc.sum_count) {
        patches.push_back(patch);
        raw.push_back(sc.first / sc.second);
      }
      const auto scaled = drop_and_rescale(raw, drop_fraction);
      for (std::size_t i = 0; i < patches.size(); ++i) {
        const auto& c = acc.coords.at(patches[i]);
        out.push_back({layer, wsi, patches[i], c.gx, c.gy, scaled[i]});
      }
    }
  }
  return out;
}

// ------------------------------------------------------------------ model

template <class Scalar>
class HVTSurvModel {
 public:
  struct SubCache {
    Matrix<Scalar> x;
    std::vector<int> shuffle_order;
    typename WindowBlock<Scalar>::Cache local;
    typename WindowBlock<Scalar>::Cache shuffle;
    Eigen::Index rows = 0;
  };

  struct PatientCache {
    std::vector<SubCache> subs;
    typename AttnPool<Scalar>::Cache pool;
    Matrix<Scalar> pooled;
  };

  explicit HVTSurvModel(HVTSurvConfig cfg)
      : cfg_((cfg.validate(), cfg)),
        local_({"local", cfg_.model_dim, cfg_.n_heads, cfg_.window_size, cfg_.ff_ratio, true, cfg_.buckets}),
        shuffle_({"shuffle", cfg_.model_dim, cfg_.n_heads, cfg_.window_size, cfg_.ff_ratio, false, cfg_.buckets}),
        pool_("pool", cfg_.model_dim, cfg_.pool_hidden) {}

  const HVTSurvConfig& config() const { return cfg_; }
  const WindowBlock<Scalar>& local_block() const { return local_; }
  const WindowBlock<Scalar>& shuffle_block() const { return shuffle_; }

  ParamStore<Scalar> init_params(std::uint64_t seed) const {
    ParamStore<Scalar> ps;
    auto rng = make_rng(seed, "init");
    init_normal(ps.add("reduce.weight", cfg_.input_dim, cfg_.model_dim), cfg_.init_std, rng);
    ps.add("reduce.bias", 1, cfg_.model_dim);
    local_.register_params(ps, rng, cfg_.init_std);
    shuffle_.register_params(ps, rng, cfg_.init_std);
    pool_.register_params(ps, rng);
    init_normal(ps.add("head.weight", cfg_.model_dim, cfg_.n_intervals), cfg_.init_std, rng);
    ps.add("head.bias", 1, cfg_.n_intervals);
    return ps;
  }

  HazardOutput forward(const ParamStore<Scalar>& ps, std::span<const SubWsiBag> subs, PatientCache& cache) const {
    require(!subs.empty(), ErrorKind::Validation, "patient has no sub-bags");
    cache.subs.assign(subs.size(), SubCache{});
    std::vector<Matrix<Scalar>> outputs;
    Eigen::Index total = 0;
    for (std::size_t s = 0; s < subs.size(); ++s) {
      const auto& sub = subs[s];
      auto& sc = cache.subs[s];
      check_shape(sub.features.cols() == cfg_.input_dim, "patient features", sub.features.rows(),
                  sub.features.cols(), sub.features.rows(), cfg_.input_dim);
      require(sub.window_size == cfg_.window_size, ErrorKind::Config,
              "sub-bag window size " + std::to_string(sub.window_size) + " differs from model window size");
      sc.x = sub.features.template cast<Scalar>();
      sc.rows = sc.x.rows();
      const Matrix<Scalar> h0 = linear(sc.x, ps.value("reduce.weight"), ps.value("reduce.bias"));
      const Matrix<Scalar> h1 = local_.forward(ps, h0, sub.scaled_coords, {}, sc.local);
      sc.shuffle_order = spatial_shuffle(static_cast<int>(sc.rows), cfg_.window_size);
      outputs.push_back(shuffle_.forward(ps, h1, {}, sc.shuffle_order, sc.shuffle));
      total += sc.rows;
    }
    Matrix<Scalar> all(total, cfg_.model_dim);
    Eigen::Index row = 0;
    for (const auto& o : outputs) {
      all.middleRows(row, o.rows()) = o;
      row += o.rows();
    }
    cache.pooled = pool_.forward(ps, all, cache.pool);
    const Matrix<Scalar> logits = linear(cache.pooled, ps.value("head.weight"), ps.value("head.bias"));
    std::vector<double> z(static_cast<std::size_t>(logits.cols()));
    for (Eigen::Index k = 0; k < logits.cols(); ++k) z[k] = static_cast<double>(logits(0, k));
    return HazardOutput::from_logits(std::move(z));
  }

  HazardOutput forward(const ParamStore<Scalar>& ps, std::span<const SubWsiBag> subs) const {
    PatientCache cache;
    return forward(ps, subs, cache);
  }

  /// Accumulates gradients of the loss into `ps` given d(loss)/d(logits).
  void backward(ParamStore<Scalar>& ps, const PatientCache& cache, std::span<const double> dlogits) const {
    Matrix<Scalar> dz(1, static_cast<Eigen::Index>(dlogits.size()));
    for (std::size_t k = 0; k < dlogits.size(); ++k) dz(0, static_cast<Eigen::Index>(k)) = static_cast<Scalar>(dlogits[k]);
    auto head = linear_backward(cache.pooled, ps.value("head.weight"), dz);
    ps.grad("head.weight") += head.dweight;
    ps.grad("head.bias") += head.dbias;
    const Matrix<Scalar> dall = pool_.backward(ps, cache.pool, head.dx);
    Eigen::Index row = 0;
    for (const auto& sc : cache.subs) {
      const Matrix<Scalar> dh1 = shuffle_.backward(ps, sc.shuffle, dall.middleRows(row, sc.rows));
      const Matrix<Scalar> dh0 = local_.backward(ps, sc.local, dh1);
      auto red = linear_backward(sc.x, ps.value("reduce.weight"), dh0);
      ps.grad("reduce.weight") += red.dweight;
      ps.grad("reduce.bias") += red.dbias;
      row += sc.rows;
    }
  }

  /// Forward, loss and gradient accumulation for one patient.
  double loss_and_grad(ParamStore<Scalar>& ps, std::span<const SubWsiBag> subs, int label, bool censored) const {
    PatientCache cache;
    const auto out = forward(ps, subs, cache);
    const double loss = nll_loss(out, label, censored);
    backward(ps, cache, nll_loss_logit_grad(out.hazards, label, censored));
    return loss;
  }

  AttentionRecord attention(const ParamStore<Scalar>& ps, std::span<const SubWsiBag> subs) const {
    PatientCache cache;
    forward(ps, subs, cache);
    AttentionRecord rec;
    Eigen::Index row = 0;
    const int w = cfg_.window_size;
    for (std::size_t s = 0; s < subs.size(); ++s) {
      const auto& sc = cache.subs[s];
      SubBagAttention sa;
      sa.wsi_id = subs[s].source_wsi;
      sa.origin = subs[s].origin;
      sa.coords = subs[s].scaled_coords;
      const int n_windows = static_cast<int>(sc.rows / w);
      for (int win = 0; win < n_windows; ++win) {
        for (auto [block, blk_cache, dest] :
             {std::tuple{&local_, &sc.local, &sa.local}, std::tuple{&shuffle_, &sc.shuffle, &sa.shuffle}}) {
          WindowAttention wa;
          wa.rows.assign(blk_cache->order.begin() + win * w, blk_cache->order.begin() + (win + 1) * w);
          wa.attention = block->mean_attention(*blk_cache, win).template cast<double>();
          dest->push_back(std::move(wa));
        }
      }
      for (Eigen::Index r = 0; r < sc.rows; ++r)
        sa.pool_weights.push_back(static_cast<double>(cache.pool.weights(row + r)));
      row += sc.rows;
      rec.sub_bags.push_back(std::move(sa));
    }
    return rec;
  }

 private:
  HVTSurvConfig cfg_;
  WindowBlock<Scalar> local_;
  WindowBlock<Scalar> shuffle_;
  AttnPool<Scalar> pool_;
};

// ------------------------------------------------------------ checkpoints

template <class Scalar>
Checkpoint make_checkpoint(const ParamStore<Scalar>& ps, const HVTSurvConfig& cfg,
                           const std::map<std::string, std::string>& extra = {}) {
  Checkpoint ckpt;
  ckpt.config = cfg.to_kv();
  for (const auto& [k, v] : extra) ckpt.config[k] = v;
  for (const auto& e : ps.entries()) {
    NamedTensor t{e.name, static_cast<std::uint32_t>(e.value.rows()), static_cast<std::uint32_t>(e.value.cols()), {}};
    t.values.reserve(static_cast<std::size_t>(e.value.size()));
    for (Eigen::Index i = 0; i < e.value.size(); ++i) t.values.push_back(static_cast<float>(e.value.data()[i]));
    ckpt.tensors.push_back(std::move(t));
  }
  return ckpt;
}

/// Rebuilds parameters for `model`; every tensor must match the model's
/// layout by name and shape.
template <class Scalar>
ParamStore<Scalar> params_from_checkpoint(const HVTSurvModel<Scalar>& model, const Checkpoint& ckpt) {
  auto ps = model.init_params(0);
  require(ckpt.tensors.size() == ps.entries().size(), ErrorKind::Version,
          "checkpoint tensor count does not match the model");
  for (const auto& t : ckpt.tensors) {
    require(ps.contains(t.name), ErrorKind::Version, "checkpoint tensor '" + t.name + "' unknown to the model");
    auto& v = ps.value(t.name);
    require(v.rows() == t.rows && v.cols() == t.cols, ErrorKind::Version,
            "checkpoint tensor '" + t.name + "' has the wrong shape");
    for (Eigen::Index i = 0; i < v.size(); ++i) v.data()[i] = static_cast<Scalar>(t.values[static_cast<std::size_t>(i)]);
  }
  return ps;
}

// --------------------------------------------------------------- training

/// Adam moments with decoupled weight decay.
template <class Scalar>
class AdamW {
 public:
  AdamW(double lr, double weight_decay, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : lr_(lr), wd_(weight_decay), b1_(beta1), b2_(beta2), eps_(eps) {}

  void step(ParamStore<Scalar>& ps) {
    auto& entries = ps.entries();
    if (m_.empty()) {
      for (const auto& e : entries) {
        m_.push_back(Matrix<Scalar>::Zero(e.value.rows(), e.value.cols()));
        v_.push_back(Matrix<Scalar>::Zero(e.value.rows(), e.value.cols()));
      }
    }
    ++t_;
    const auto c1 = static_cast<Scalar>(1.0 - std::pow(b1_, t_));
    const auto c2 = static_cast<Scalar>(1.0 - std::pow(b2_, t_));
    const auto lr = static_cast<Scalar>(lr_);
    const auto b1 = static_cast<Scalar>(b1_);
    const auto b2 = static_cast<Scalar>(b2_);
    for (std::size_t i = 0; i < entries.size(); ++i) {
      auto& e = entries[i];
      m_[i] = b1 * m_[i] + (Scalar(1) - b1) * e.grad;
      v_[i] = b2 * v_[i] + (Scalar(1) - b2) * e.grad.cwiseAbs2();
      e.value *= Scalar(1) - lr * static_cast<Scalar>(wd_);
      e.value.array() -= lr * (m_[i].array() / c1) / ((v_[i].array() / c2).sqrt() + static_cast<Scalar>(eps_));
    }
  }

 private:
  double lr_, wd_, b1_, b2_, eps_;
  int t_ = 0;
  std::vector<Matrix<Scalar>> m_;
  std::vector<Matrix<Scalar>> v_;
};

/// A patient ready for the model: each slide already rearranged into
/// windows, follow-up binned.
struct PreparedPatient {
  std::string patient_id;
  std::vector<RearrangedBag> wsis;
  int label = 0;
  bool censored = false;
  double time_months = 0.0;
};

/// Random window masking for every slide of a patient. Each slide's split
/// is seeded from (seed, wsi_id) so it does not depend on slide order;
/// slides with fewer than m windows are split into as many groups as they
/// have windows.
inline std::vector<SubWsiBag> sample_sub_bags(const PreparedPatient& p, int m, std::uint64_t seed) {
  std::vector<SubWsiBag> subs;
  for (const auto& wsi : p.wsis) {
    const int groups = std::min(m, wsi.n_windows());
    for (auto& s : random_window_mask(wsi, groups, derive_seed(seed, wsi.wsi_id))) subs.push_back(std::move(s));
  }
  return subs;
}

/// Evaluation-time masking uses the fixed seed 0.
inline constexpr std::uint64_t kEvalMaskSeed = 0;

struct EpochMetrics {
  int epoch = 0;
  double train_loss = 0.0;
  double val_loss = 0.0;
  double val_cindex = 0.0;
};

template <class Scalar>
struct FitResult {
  ParamStore<Scalar> params;
  std::vector<EpochMetrics> history;
  int best_epoch = 0;
  bool stopped_early = false;
};

template <class Scalar>
std::vector<RiskPrediction> predict(const HVTSurvModel<Scalar>& model, const ParamStore<Scalar>& ps,
                                    const std::vector<PreparedPatient>& patients, std::vector<double>* losses = nullptr) {
  std::vector<RiskPrediction> out;
  for (const auto& p : patients) {
    const auto subs = sample_sub_bags(p, model.config().n_sub_wsis, kEvalMaskSeed);
    const auto h = model.forward(ps, subs);
    if (losses) losses->push_back(nll_loss(h, p.label, p.censored));
    out.push_back({p.patient_id, h.risk, p.time_months, p.censored});
  }
  return out;
}

/// AdamW over single patients, masks re-drawn every epoch, early stopping on
/// validation loss; returns the parameters of the best validation epoch
/// (the initial parameters when max_epochs is 0).
template <class Scalar>
FitResult<Scalar> fit(const HVTSurvModel<Scalar>& model, const std::vector<PreparedPatient>& train,
                      const std::vector<PreparedPatient>& validation, std::uint64_t seed,
                      const std::function<void(const EpochMetrics&)>& on_epoch = {}) {
  require(!train.empty() && !validation.empty(), ErrorKind::Precondition, "fit needs train and validation patients");
  const auto& cfg = model.config();
  FitResult<Scalar> result;
  auto params = model.init_params(derive_seed(seed, "params"));
  result.params = params;
  AdamW<Scalar> opt(cfg.learning_rate, cfg.weight_decay);
  auto order_rng = make_rng(seed, "patient-order");

  double best = std::numeric_limits<double>::infinity();
  int waited = 0;
  std::vector<std::size_t> order(train.size());
  for (int epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    portable_shuffle(order.begin(), order.end(), order_rng);
    double total = 0.0;
    for (std::size_t idx : order) {
      const auto& p = train[idx];
      const auto subs = sample_sub_bags(p, cfg.n_sub_wsis, derive_seed(seed, "train-mask", static_cast<std::uint64_t>(epoch)));
      params.zero_grad();
      const double loss = model.loss_and_grad(params, subs, p.label, p.censored);
      if (!std::isfinite(loss))
        fail(ErrorKind::Numeric, "non-finite training loss at epoch " + std::to_string(epoch) + ", patient " + p.patient_id);
      total += loss;
      opt.step(params);
    }

    EpochMetrics m;
    m.epoch = epoch;
    m.train_loss = total / static_cast<double>(train.size());
    std::vector<double> losses;
    const auto preds = predict(model, params, validation, &losses);
    for (double l : losses) m.val_loss += l;
    m.val_loss /= static_cast<double>(losses.size());
    if (!std::isfinite(m.val_loss)) fail(ErrorKind::Numeric, "non-finite validation loss at epoch " + std::to_string(epoch));
    try {
      m.val_cindex = c_index(preds);
    } catch (const Error&) {
      m.val_cindex = std::numeric_limits<double>::quiet_NaN();
    }
    result.history.push_back(m);
    if (on_epoch) on_epoch(m);

    if (m.val_loss < best) {
      best = m.val_loss;
      result.params = params;
      result.best_epoch = epoch;
      waited = 0;
    } else if (++waited >= cfg.patience) {
      result.stopped_early = true;
      break;
    }
  }
  return result;
}

}  // namespace hvtsurv
