#pragma once

// Attention machinery: Manhattan-distance bucketing into a learnable bias
// table, the windowed transformer block used by both the local (biased) and
// the shuffle (unbiased, stride-permuted) layers, and gated attention
// pooling.

#include <algorithm>
#include <cmath>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "hvtsurv/numerics.hpp"
#include "hvtsurv/rearrange.hpp"
#include "hvtsurv/rng.hpp"

namespace hvtsurv {

struct BucketParams {
  double alpha = 1.9;
  double beta = 7.6;
  double gamma = 11.4;
  int lambda = 7;

  void validate() const {
    require(alpha > 0.0 && alpha < beta, ErrorKind::Config, "bucket params need 0 < alpha < beta");
    require(gamma > alpha, ErrorKind::Config, "bucket params need gamma > alpha");
    require(lambda >= 1, ErrorKind::Config, "bucket params need lambda >= 1");
  }
  int table_rows() const { return 2 * lambda + 1; }
};

/// Piecewise distance bucket: exact (rounded) up to alpha, logarithmic
/// beyond, capped at lambda. Rounding is half away from zero.
inline int bucket_distance(double x, const BucketParams& p) {
  const double ax = std::abs(x);
  if (ax <= p.alpha) return static_cast<int>(std::round(ax));
  const double inner = p.alpha + std::log(ax / p.alpha) / std::log(p.gamma / p.alpha) * (p.beta - 2.0 * p.alpha);
  return std::min(p.lambda, static_cast<int>(std::round(inner)));
}

inline int manhattan(const GridCoord& a, const GridCoord& b) {
  return std::abs(a.gx - b.gx) + std::abs(a.gy - b.gy);
}

/// Bias-table row for every pair of a window's coordinates.
inline Eigen::MatrixXi bucket_indices(std::span<const GridCoord> coords, const BucketParams& p) {
  const auto n = static_cast<Eigen::Index>(coords.size());
  Eigen::MatrixXi idx(n, n);
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = i; j < n; ++j) idx(i, j) = idx(j, i) = bucket_distance(manhattan(coords[i], coords[j]), p);
  return idx;
}

/// One w x w bias matrix per head, read from `table` ((2*lambda+1) x heads).
template <class Scalar>
std::vector<Matrix<Scalar>> manhattan_bias(std::span<const GridCoord> coords, const Matrix<Scalar>& table,
                                           const BucketParams& p) {
  require(table.rows() == p.table_rows(), ErrorKind::Shape, "bias table must have 2*lambda+1 rows");
  const auto idx = bucket_indices(coords, p);
  std::vector<Matrix<Scalar>> out(static_cast<std::size_t>(table.cols()));
  for (Eigen::Index h = 0; h < table.cols(); ++h) {
    out[h].resize(idx.rows(), idx.cols());
    for (Eigen::Index i = 0; i < idx.rows(); ++i)
      for (Eigen::Index j = 0; j < idx.cols(); ++j) out[h](i, j) = table(idx(i, j), h);
  }
  return out;
}

/// Stride shuffle: the sequence viewed as an (L/w) x w row-major grid, read
/// out column by column. out[i] is the source position of new position i.
inline std::vector<int> spatial_shuffle(int length, int w) {
  require(w >= 1 && length >= 0 && length % w == 0, ErrorKind::Shape,
          "spatial_shuffle: window " + std::to_string(w) + " does not divide length " + std::to_string(length));
  const int rows = length / w;
  std::vector<int> perm;
  perm.reserve(static_cast<std::size_t>(length));
  for (int c = 0; c < w; ++c)
    for (int r = 0; r < rows; ++r) perm.push_back(r * w + c);
  return perm;
}

inline std::vector<int> inverse_permutation(std::span<const int> perm) {
  std::vector<int> inv(perm.size());
  for (std::size_t i = 0; i < perm.size(); ++i) inv[static_cast<std::size_t>(perm[i])] = static_cast<int>(i);
  return inv;
}

template <class Scalar>
Matrix<Scalar> gather_rows(const Matrix<Scalar>& m, std::span<const int> order) {
  Matrix<Scalar> out(static_cast<Eigen::Index>(order.size()), m.cols());
  for (std::size_t i = 0; i < order.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = m.row(order[i]);
  return out;
}

template <class Scalar>
Matrix<Scalar> scatter_rows(const Matrix<Scalar>& m, std::span<const int> order) {
  Matrix<Scalar> out(m.rows(), m.cols());
  for (std::size_t i = 0; i < order.size(); ++i) out.row(order[i]) = m.row(static_cast<Eigen::Index>(i));
  return out;
}

template <class Scalar>
void init_normal(Matrix<Scalar>& m, double std_dev, Rng& rng) {
  // Truncated at two standard deviations.
  for (Eigen::Index i = 0; i < m.size(); ++i) {
    double v = standard_normal(rng);
    while (std::abs(v) > 2.0) v = standard_normal(rng);
    m.data()[i] = static_cast<Scalar>(v * std_dev);
  }
}

/// Pre-norm transformer block over windows of a sequence:
///   y = x + proj(MHA(LN1(x)));  z = y + W2 gelu(W1 LN2(y)).
/// Attention is restricted to consecutive w-row groups of the sequence
/// taken in `order` (identity when empty), so passing the stride shuffle
/// gives shuffle-window attention with outputs already back in input order.
/// With `position_bias`, logits are (QK^T + B) / sqrt(head_dim), B read from
/// the `<prefix>.bias_table` parameter via Manhattan buckets.
template <class Scalar>
class WindowBlock {
 public:
  struct Config {
    std::string prefix;
    int dim = 0;
    int heads = 1;
    int window = 1;
    int ff_ratio = 4;
    bool position_bias = false;
    BucketParams buckets;
  };

  struct Cache {
    std::vector<int> order;
    std::vector<Eigen::MatrixXi> buckets;  // per window, when biased
    LayerNormCache<Scalar> ln1;
    Matrix<Scalar> n1;
    Matrix<Scalar> qkv_w;  // window order
    std::vector<Matrix<Scalar>> attn;  // [window * heads + head], w x w
    Matrix<Scalar> o;      // input order
    LayerNormCache<Scalar> ln2;
    Matrix<Scalar> n2;
    Matrix<Scalar> h1;
    Matrix<Scalar> g1;
  };

  explicit WindowBlock(Config cfg) : cfg_(std::move(cfg)) {
    require(cfg_.dim >= 1 && cfg_.heads >= 1 && cfg_.dim % cfg_.heads == 0, ErrorKind::Config,
            cfg_.prefix + ": dim must be a positive multiple of heads");
    require(cfg_.window >= 1 && cfg_.ff_ratio >= 1, ErrorKind::Config, cfg_.prefix + ": bad window/ff ratio");
    if (cfg_.position_bias) cfg_.buckets.validate();
  }

  const Config& config() const { return cfg_; }
  int head_dim() const { return cfg_.dim / cfg_.heads; }

  void register_params(ParamStore<Scalar>& ps, Rng& rng, double init_std = 0.02) const {
    const int d = cfg_.dim;
    const int hidden = d * cfg_.ff_ratio;
    ps.add(name("norm1.gamma"), 1, d).setOnes();
    ps.add(name("norm1.beta"), 1, d);
    init_normal(ps.add(name("qkv.weight"), d, 3 * d), init_std, rng);
    ps.add(name("q.bias"), 1, d);
    ps.add(name("v.bias"), 1, d);
    init_normal(ps.add(name("proj.weight"), d, d), init_std, rng);
    ps.add(name("proj.bias"), 1, d);
    ps.add(name("norm2.gamma"), 1, d).setOnes();
    ps.add(name("norm2.beta"), 1, d);
    init_normal(ps.add(name("ff1.weight"), d, hidden), init_std, rng);
    ps.add(name("ff1.bias"), 1, hidden);
    init_normal(ps.add(name("ff2.weight"), hidden, d), init_std, rng);
    ps.add(name("ff2.bias"), 1, d);
    if (cfg_.position_bias) init_normal(ps.add(name("bias_table"), cfg_.buckets.table_rows(), cfg_.heads), 0.02, rng);
  }

  /// `coords` (grid units, input order) is only read when the block is biased.
  Matrix<Scalar> forward(const ParamStore<Scalar>& ps, const Matrix<Scalar>& x, std::span<const GridCoord> coords,
                         std::span<const int> order, Cache& cache) const {
    const Eigen::Index len = x.rows();
    const int w = cfg_.window;
    check_shape(x.cols() == cfg_.dim, "window block input", x.rows(), x.cols(), len, cfg_.dim);
    require(len % w == 0, ErrorKind::Shape,
            cfg_.prefix + ": sequence length " + std::to_string(len) + " is not a multiple of " + std::to_string(w));
    cache.order.assign(order.begin(), order.end());
    if (cache.order.empty()) {
      cache.order.resize(static_cast<std::size_t>(len));
      std::iota(cache.order.begin(), cache.order.end(), 0);
    }
    require(static_cast<Eigen::Index>(cache.order.size()) == len, ErrorKind::Shape, cfg_.prefix + ": bad order");
    const auto n_windows = static_cast<int>(len / w);

    cache.buckets.clear();
    if (cfg_.position_bias) {
      require(static_cast<Eigen::Index>(coords.size()) == len, ErrorKind::Shape,
              cfg_.prefix + ": coordinate count differs from sequence length");
      std::vector<GridCoord> win_coords(static_cast<std::size_t>(w));
      for (int win = 0; win < n_windows; ++win) {
        for (int i = 0; i < w; ++i) win_coords[i] = coords[cache.order[win * w + i]];
        cache.buckets.push_back(bucket_indices(win_coords, cfg_.buckets));
      }
    }

    cache.n1 = layer_norm(x, ps.value(name("norm1.gamma")), ps.value(name("norm1.beta")), &cache.ln1);
    cache.qkv_w = gather_rows<Scalar>(linear(cache.n1, ps.value(name("qkv.weight")), qkv_bias(ps)), cache.order);
    const int dh = head_dim();
    const int d = cfg_.dim;
    const Scalar scale = Scalar(1) / std::sqrt(static_cast<Scalar>(dh));
    const Matrix<Scalar>* table = cfg_.position_bias ? &ps.value(name("bias_table")) : nullptr;

    Matrix<Scalar> o_w(len, d);
    cache.attn.assign(static_cast<std::size_t>(n_windows) * cfg_.heads, Matrix<Scalar>());
    for (int win = 0; win < n_windows; ++win) {
      const Eigen::Index r0 = static_cast<Eigen::Index>(win) * w;
      for (int h = 0; h < cfg_.heads; ++h) {
        const auto q = cache.qkv_w.block(r0, h * dh, w, dh);
        const auto k = cache.qkv_w.block(r0, d + h * dh, w, dh);
        const auto v = cache.qkv_w.block(r0, 2 * d + h * dh, w, dh);
        Matrix<Scalar> logits = q * k.transpose();
        if (table) {
          const auto& idx = cache.buckets[win];
          for (Eigen::Index i = 0; i < w; ++i)
            for (Eigen::Index j = 0; j < w; ++j) logits(i, j) += (*table)(idx(i, j), h);
        }
        logits *= scale;
        auto& a = cache.attn[static_cast<std::size_t>(win) * cfg_.heads + h];
        a = softmax_rows(logits);
        o_w.block(r0, h * dh, w, dh).noalias() = a * v;
      }
    }
    cache.o = scatter_rows<Scalar>(o_w, cache.order);
    Matrix<Scalar> y = x + linear(cache.o, ps.value(name("proj.weight")), ps.value(name("proj.bias")));

    cache.n2 = layer_norm(y, ps.value(name("norm2.gamma")), ps.value(name("norm2.beta")), &cache.ln2);
    cache.h1 = linear(cache.n2, ps.value(name("ff1.weight")), ps.value(name("ff1.bias")));
    cache.g1 = gelu(cache.h1);
    y += linear(cache.g1, ps.value(name("ff2.weight")), ps.value(name("ff2.bias")));
    return y;
  }

  /// Accumulates parameter gradients into `ps` and returns d(loss)/d(x).
  Matrix<Scalar> backward(ParamStore<Scalar>& ps, const Cache& cache, const Matrix<Scalar>& dz) const {
    const int w = cfg_.window;
    const int d = cfg_.dim;
    const int dh = head_dim();
    const Scalar scale = Scalar(1) / std::sqrt(static_cast<Scalar>(dh));

    // Feed-forward branch.
    auto ff2 = linear_backward(cache.g1, ps.value(name("ff2.weight")), dz);
    accumulate(ps, "ff2", ff2);
    const Matrix<Scalar> dh1 = gelu_backward(cache.h1, ff2.dx);
    auto ff1 = linear_backward(cache.n2, ps.value(name("ff1.weight")), dh1);
    accumulate(ps, "ff1", ff1);
    auto ln2 = layer_norm_backward(cache.ln2, ps.value(name("norm2.gamma")), ff1.dx);
    ps.grad(name("norm2.gamma")) += ln2.dgamma;
    ps.grad(name("norm2.beta")) += ln2.dbeta;
    Matrix<Scalar> dy = dz + ln2.dx;

    // Attention branch.
    auto proj = linear_backward(cache.o, ps.value(name("proj.weight")), dy);
    accumulate(ps, "proj", proj);
    const Matrix<Scalar> do_w = gather_rows<Scalar>(proj.dx, cache.order);
    Matrix<Scalar> dqkv_w = Matrix<Scalar>::Zero(cache.qkv_w.rows(), cache.qkv_w.cols());
    Matrix<Scalar>* dtable = cfg_.position_bias ? &ps.grad(name("bias_table")) : nullptr;
    const auto n_windows = static_cast<int>(cache.qkv_w.rows() / w);
    for (int win = 0; win < n_windows; ++win) {
      const Eigen::Index r0 = static_cast<Eigen::Index>(win) * w;
      for (int h = 0; h < cfg_.heads; ++h) {
        const auto& a = cache.attn[static_cast<std::size_t>(win) * cfg_.heads + h];
        const auto q = cache.qkv_w.block(r0, h * dh, w, dh);
        const auto k = cache.qkv_w.block(r0, d + h * dh, w, dh);
        const auto v = cache.qkv_w.block(r0, 2 * d + h * dh, w, dh);
        const auto dout = do_w.block(r0, h * dh, w, dh);
        const Matrix<Scalar> da = dout * v.transpose();
        dqkv_w.block(r0, 2 * d + h * dh, w, dh).noalias() = a.transpose() * dout;
        const Matrix<Scalar> dpre = softmax_rows_backward(a, da) * scale;  // d(QK^T + B)
        dqkv_w.block(r0, h * dh, w, dh).noalias() = dpre * k;
        dqkv_w.block(r0, d + h * dh, w, dh).noalias() = dpre.transpose() * q;
        if (dtable) {
          const auto& idx = cache.buckets[win];
          for (Eigen::Index i = 0; i < w; ++i)
            for (Eigen::Index j = 0; j < w; ++j) (*dtable)(idx(i, j), h) += dpre(i, j);
        }
      }
    }
    auto qkv = linear_backward(cache.n1, ps.value(name("qkv.weight")), scatter_rows<Scalar>(dqkv_w, cache.order));
    ps.grad(name("qkv.weight")) += qkv.dweight;
    ps.grad(name("q.bias")) += qkv.dbias.leftCols(d);
    ps.grad(name("v.bias")) += qkv.dbias.rightCols(d);
    auto ln1 = layer_norm_backward(cache.ln1, ps.value(name("norm1.gamma")), qkv.dx);
    ps.grad(name("norm1.gamma")) += ln1.dgamma;
    ps.grad(name("norm1.beta")) += ln1.dbeta;
    dy += ln1.dx;
    return dy;
  }

  /// Head-averaged attention of window `win` from a forward cache.
  Matrix<Scalar> mean_attention(const Cache& cache, int win) const {
    Matrix<Scalar> m = cache.attn[static_cast<std::size_t>(win) * cfg_.heads];
    for (int h = 1; h < cfg_.heads; ++h) m += cache.attn[static_cast<std::size_t>(win) * cfg_.heads + h];
    return m / static_cast<Scalar>(cfg_.heads);
  }

 private:
  std::string name(const char* leaf) const { return cfg_.prefix + "." + leaf; }

  // Keys carry no bias: a constant added to every key shifts each softmax
  // row uniformly and cannot change the output.
  Matrix<Scalar> qkv_bias(const ParamStore<Scalar>& ps) const {
    const int d = cfg_.dim;
    Matrix<Scalar> b = Matrix<Scalar>::Zero(1, 3 * d);
    b.leftCols(d) = ps.value(name("q.bias"));
    b.rightCols(d) = ps.value(name("v.bias"));
    return b;
  }

  void accumulate(ParamStore<Scalar>& ps, const char* layer, const LinearGrad<Scalar>& g) const {
    ps.grad(cfg_.prefix + "." + layer + ".weight") += g.dweight;
    ps.grad(cfg_.prefix + "." + layer + ".bias") += g.dbias;
  }

  Config cfg_;
};

/// Local window attention over a single window of w rows, biased by the
/// Manhattan buckets of `coords`.
template <class Scalar>
Matrix<Scalar> local_window_attention(const ParamStore<Scalar>& ps, const WindowBlock<Scalar>& block,
                                      const Matrix<Scalar>& x, std::span<const GridCoord> coords,
                                      typename WindowBlock<Scalar>::Cache& cache) {
  require(x.rows() == block.config().window, ErrorKind::Shape, "local_window_attention expects one window");
  return block.forward(ps, x, coords, {}, cache);
}

/// Stride-shuffled window attention over a whole sequence, outputs in input
/// order.
template <class Scalar>
Matrix<Scalar> shuffle_window_attention(const ParamStore<Scalar>& ps, const WindowBlock<Scalar>& block,
                                        const Matrix<Scalar>& x, typename WindowBlock<Scalar>::Cache& cache) {
  const auto perm = spatial_shuffle(static_cast<int>(x.rows()), block.config().window);
  return block.forward(ps, x, {}, perm, cache);
}

/// Gated attention pooling over the rows of H:
///   a = softmax_g(U tanh(V h_g)),  pooled = sum_g a_g h_g.
/// V is stored transposed (dim x hidden) so the score pass is H * V.
template <class Scalar>
class AttnPool {
 public:
  struct Cache {
    Matrix<Scalar> h;
    Matrix<Scalar> t;  // tanh(H V), G x hidden
    Eigen::Matrix<Scalar, Eigen::Dynamic, 1> weights;
  };

  AttnPool(std::string prefix, int dim, int hidden) : prefix_(std::move(prefix)), dim_(dim), hidden_(hidden) {
    require(dim >= 1 && hidden >= 1, ErrorKind::Config, "attention pooling needs dim, hidden >= 1");
  }

  void register_params(ParamStore<Scalar>& ps, Rng& rng) const {
    init_normal(ps.add(prefix_ + ".V", dim_, hidden_), 1.0 / std::sqrt(static_cast<double>(dim_)), rng);
    init_normal(ps.add(prefix_ + ".U", 1, hidden_), 1.0 / std::sqrt(static_cast<double>(hidden_)), rng);
  }

  Matrix<Scalar> forward(const ParamStore<Scalar>& ps, const Matrix<Scalar>& h, Cache& cache) const {
    require(h.rows() >= 1, ErrorKind::Precondition, "attention pooling over an empty set");
    check_shape(h.cols() == dim_, "attn_pool", h.rows(), h.cols(), dim_, hidden_);
    cache.h = h;
    cache.t = (h * ps.value(prefix_ + ".V")).array().tanh();
    const Matrix<Scalar> scores = (cache.t * ps.value(prefix_ + ".U").transpose()).transpose();  // 1 x G
    cache.weights = softmax_rows(scores).transpose();
    return cache.weights.transpose() * h;
  }

  Matrix<Scalar> backward(ParamStore<Scalar>& ps, const Cache& cache, const Matrix<Scalar>& dpooled) const {
    const auto& a = cache.weights;
    Matrix<Scalar> dh = a * dpooled;                               // through the weighted sum
    const Eigen::Matrix<Scalar, Eigen::Dynamic, 1> da = cache.h * dpooled.transpose();
    const Eigen::Matrix<Scalar, Eigen::Dynamic, 1> ds = a.cwiseProduct(da.array().matrix()) - a * a.dot(da);
    const auto& u = ps.value(prefix_ + ".U");
    ps.grad(prefix_ + ".U") += ds.transpose() * cache.t;
    const Matrix<Scalar> dpre = (ds * u).cwiseProduct((Scalar(1) - cache.t.array().square()).matrix());
    ps.grad(prefix_ + ".V") += cache.h.transpose() * dpre;
    dh.noalias() += dpre * ps.value(prefix_ + ".V").transpose();
    return dh;
  }

 private:
  std::string prefix_;
  int dim_;
  int hidden_;
};

template <class Scalar>
std::pair<Matrix<Scalar>, std::vector<Scalar>> attn_pool(const ParamStore<Scalar>& ps, const AttnPool<Scalar>& pool,
                                                         const Matrix<Scalar>& h) {
  typename AttnPool<Scalar>::Cache cache;
  auto pooled = pool.forward(ps, h, cache);
  return {pooled, std::vector<Scalar>(cache.weights.data(), cache.weights.data() + cache.weights.size())};
}

}  // namespace hvtsurv
