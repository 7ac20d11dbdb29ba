#pragma once

// Dense row-major primitives with hand-written backward passes. Every
// forward function has a `*_backward` partner taking the upstream gradient
// and whatever the forward produced.

#include <Eigen/Core>
#include <cmath>
#include <cstdint>
#include <deque>
#include <functional>
#include <limits>
#include <map>
#include <string>
#include <type_traits>
#include <vector>

#include "hvtsurv/error.hpp"

namespace hvtsurv {

template <class Scalar>
using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <class Scalar>
using RowVector = Eigen::Matrix<Scalar, 1, Eigen::Dynamic, Eigen::RowMajor>;

inline constexpr double kLayerNormEps = 1e-5;

inline void check_shape(bool ok, const char* op, Eigen::Index ar, Eigen::Index ac, Eigen::Index br,
                        Eigen::Index bc) {
  if (!ok)
    fail(ErrorKind::Shape, std::string(op) + ": incompatible shapes " + std::to_string(ar) + "x" +
                               std::to_string(ac) + " and " + std::to_string(br) + "x" + std::to_string(bc));
}

// ---------------------------------------------------------------- matmul

template <class Scalar>
Matrix<Scalar> matmul(const Matrix<Scalar>& a, const Matrix<Scalar>& b) {
  check_shape(a.cols() == b.rows(), "matmul", a.rows(), a.cols(), b.rows(), b.cols());
  return a * b;
}

template <class Scalar>
struct MatmulGrad {
  Matrix<Scalar> da;
  Matrix<Scalar> db;
};

template <class Scalar>
MatmulGrad<Scalar> matmul_backward(const Matrix<Scalar>& a, const Matrix<Scalar>& b, const Matrix<Scalar>& dout) {
  check_shape(dout.rows() == a.rows() && dout.cols() == b.cols(), "matmul_backward", dout.rows(), dout.cols(),
              a.rows(), b.cols());
  return {dout * b.transpose(), a.transpose() * dout};
}

// --------------------------------------------------------------- softmax

template <class Derived>
auto softmax_rows(const Eigen::MatrixBase<Derived>& m) {
  using Scalar = typename Derived::Scalar;
  Matrix<Scalar> out = (m.colwise() - m.rowwise().maxCoeff()).array().exp().matrix();
  out.array().colwise() /= out.rowwise().sum().array();
  return out;
}

/// dx = y * (dy - rowsum(dy * y)) for y = softmax_rows(x).
template <class DerivedY, class DerivedD>
auto softmax_rows_backward(const Eigen::MatrixBase<DerivedY>& y, const Eigen::MatrixBase<DerivedD>& dy) {
  using Scalar = typename DerivedY::Scalar;
  const Eigen::Matrix<Scalar, Eigen::Dynamic, 1> dots = y.cwiseProduct(dy).rowwise().sum();
  Matrix<Scalar> dx = (dy.colwise() - dots).cwiseProduct(y);
  return dx;
}

// ---------------------------------------------------------------- linear

/// x * weight + bias, bias broadcast over rows.
template <class Scalar>
Matrix<Scalar> linear(const Matrix<Scalar>& x, const Matrix<Scalar>& weight, const Matrix<Scalar>& bias) {
  check_shape(x.cols() == weight.rows(), "linear", x.rows(), x.cols(), weight.rows(), weight.cols());
  check_shape(bias.rows() == 1 && bias.cols() == weight.cols(), "linear bias", bias.rows(), bias.cols(), 1,
              weight.cols());
  Matrix<Scalar> out = x * weight;
  out.rowwise() += bias.row(0);
  return out;
}

template <class Scalar>
struct LinearGrad {
  Matrix<Scalar> dx;
  Matrix<Scalar> dweight;
  Matrix<Scalar> dbias;
};

template <class Scalar>
LinearGrad<Scalar> linear_backward(const Matrix<Scalar>& x, const Matrix<Scalar>& weight,
                                   const Matrix<Scalar>& dout) {
  check_shape(dout.cols() == weight.cols() && dout.rows() == x.rows(), "linear_backward", dout.rows(),
              dout.cols(), x.rows(), weight.cols());
  return {dout * weight.transpose(), x.transpose() * dout, dout.colwise().sum()};
}

// ------------------------------------------------------------ layer norm

template <class Scalar>
struct LayerNormCache {
  Matrix<Scalar> normalized;  // (x - mean) * rstd
  Eigen::Matrix<Scalar, Eigen::Dynamic, 1> rstd;
};

template <class Scalar>
Matrix<Scalar> layer_norm(const Matrix<Scalar>& x, const Matrix<Scalar>& gamma, const Matrix<Scalar>& beta,
                          LayerNormCache<Scalar>* cache = nullptr) {
  check_shape(gamma.cols() == x.cols() && beta.cols() == x.cols(), "layer_norm", x.rows(), x.cols(),
              gamma.rows(), gamma.cols());
  const auto n = static_cast<Scalar>(x.cols());
  const Eigen::Matrix<Scalar, Eigen::Dynamic, 1> mean = x.rowwise().sum() / n;
  Matrix<Scalar> centered = x.colwise() - mean;
  const Eigen::Matrix<Scalar, Eigen::Dynamic, 1> var = centered.array().square().rowwise().sum() / n;
  Eigen::Matrix<Scalar, Eigen::Dynamic, 1> rstd = (var.array() + Scalar(kLayerNormEps)).rsqrt();
  centered.array().colwise() *= rstd.array();
  Matrix<Scalar> out = centered.array().rowwise() * gamma.row(0).array();
  out.rowwise() += beta.row(0);
  if (cache) {
    cache->normalized = std::move(centered);
    cache->rstd = std::move(rstd);
  }
  return out;
}

template <class Scalar>
struct LayerNormGrad {
  Matrix<Scalar> dx;
  Matrix<Scalar> dgamma;
  Matrix<Scalar> dbeta;
};

template <class Scalar>
LayerNormGrad<Scalar> layer_norm_backward(const LayerNormCache<Scalar>& cache, const Matrix<Scalar>& gamma,
                                          const Matrix<Scalar>& dout) {
  const auto& xhat = cache.normalized;
  LayerNormGrad<Scalar> g;
  g.dgamma = dout.cwiseProduct(xhat).colwise().sum();
  g.dbeta = dout.colwise().sum();
  const Matrix<Scalar> dxhat = dout.array().rowwise() * gamma.row(0).array();
  const auto n = static_cast<Scalar>(xhat.cols());
  const Eigen::Matrix<Scalar, Eigen::Dynamic, 1> mean_d = dxhat.rowwise().sum() / n;
  const Eigen::Matrix<Scalar, Eigen::Dynamic, 1> mean_dx = dxhat.cwiseProduct(xhat).rowwise().sum() / n;
  g.dx = dxhat.colwise() - mean_d;
  g.dx.array() -= xhat.array().colwise() * mean_dx.array();
  g.dx.array().colwise() *= cache.rstd.array();
  return g;
}

// ----------------------------------------------------------- activations

/// Exact (erf) GELU.
template <class Derived>
auto gelu(const Eigen::MatrixBase<Derived>& x) {
  using Scalar = typename Derived::Scalar;
  return Matrix<Scalar>(x.unaryExpr([](Scalar v) {
    return Scalar(0.5) * v * (Scalar(1) + std::erf(v * Scalar(0.70710678118654752440)));
  }));
}

template <class Derived, class DerivedD>
auto gelu_backward(const Eigen::MatrixBase<Derived>& x, const Eigen::MatrixBase<DerivedD>& dout) {
  using Scalar = typename Derived::Scalar;
  const Matrix<Scalar> deriv = x.unaryExpr([](Scalar v) {
    const Scalar cdf = Scalar(0.5) * (Scalar(1) + std::erf(v * Scalar(0.70710678118654752440)));
    const Scalar pdf = Scalar(0.39894228040143267794) * std::exp(Scalar(-0.5) * v * v);
    return cdf + v * pdf;
  });
  return Matrix<Scalar>(deriv.cwiseProduct(dout));
}

template <class Scalar>
  requires std::is_floating_point_v<Scalar>
Scalar sigmoid(Scalar v) {
  // Branches keep exp() from overflowing on either tail.
  if (v >= Scalar(0)) return Scalar(1) / (Scalar(1) + std::exp(-v));
  const Scalar e = std::exp(v);
  return e / (Scalar(1) + e);
}

template <class Derived>
auto sigmoid(const Eigen::MatrixBase<Derived>& x) {
  using Scalar = typename Derived::Scalar;
  return Matrix<Scalar>(x.unaryExpr([](Scalar v) { return sigmoid(v); }));
}

/// Takes the forward output y = sigmoid(x).
template <class DerivedY, class DerivedD>
auto sigmoid_backward(const Eigen::MatrixBase<DerivedY>& y, const Eigen::MatrixBase<DerivedD>& dout) {
  using Scalar = typename DerivedY::Scalar;
  return Matrix<Scalar>(y.array() * (Scalar(1) - y.array()) * dout.array());
}

template <class Derived>
auto tanh(const Eigen::MatrixBase<Derived>& x) {
  using Scalar = typename Derived::Scalar;
  return Matrix<Scalar>(x.array().tanh());
}

/// Takes the forward output y = tanh(x).
template <class DerivedY, class DerivedD>
auto tanh_backward(const Eigen::MatrixBase<DerivedY>& y, const Eigen::MatrixBase<DerivedD>& dout) {
  using Scalar = typename DerivedY::Scalar;
  return Matrix<Scalar>((Scalar(1) - y.array().square()) * dout.array());
}

// ------------------------------------------------------------ parameters

/// Named parameters with same-shaped gradient buffers, kept in insertion
/// order. References returned by `add`/`value`/`grad` stay valid for the
/// lifetime of the store.
template <class Scalar>
class ParamStore {
 public:
  struct Entry {
    std::string name;
    Matrix<Scalar> value;
    Matrix<Scalar> grad;
  };

  Matrix<Scalar>& add(const std::string& name, Eigen::Index rows, Eigen::Index cols) {
    require(!index_.count(name), ErrorKind::Precondition, "duplicate parameter '" + name + "'");
    index_[name] = entries_.size();
    entries_.push_back({name, Matrix<Scalar>::Zero(rows, cols), Matrix<Scalar>::Zero(rows, cols)});
    return entries_.back().value;
  }

  bool contains(const std::string& name) const { return index_.count(name) != 0; }
  Entry& entry(const std::string& name) { return entries_[lookup(name)]; }
  const Entry& entry(const std::string& name) const { return entries_[lookup(name)]; }
  Matrix<Scalar>& value(const std::string& name) { return entry(name).value; }
  const Matrix<Scalar>& value(const std::string& name) const { return entry(name).value; }
  Matrix<Scalar>& grad(const std::string& name) { return entry(name).grad; }

  std::deque<Entry>& entries() { return entries_; }
  const std::deque<Entry>& entries() const { return entries_; }

  void zero_grad() {
    for (auto& e : entries_) e.grad.setZero();
  }

  Eigen::Index parameter_count() const {
    Eigen::Index n = 0;
    for (const auto& e : entries_) n += e.value.size();
    return n;
  }

  /// FNV-1a over the raw bytes of every value, in insertion order.
  std::uint64_t checksum() const {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (const auto& e : entries_) {
      const auto* bytes = reinterpret_cast<const unsigned char*>(e.value.data());
      for (std::size_t i = 0; i < static_cast<std::size_t>(e.value.size()) * sizeof(Scalar); ++i) {
        h ^= bytes[i];
        h *= 0x100000001b3ULL;
      }
    }
    return h;
  }

 private:
  std::size_t lookup(const std::string& name) const {
    const auto it = index_.find(name);
    require(it != index_.end(), ErrorKind::Lookup, "unknown parameter '" + name + "'");
    return it->second;
  }

  std::deque<Entry> entries_;
  std::map<std::string, std::size_t> index_;
};

// ------------------------------------------------------ gradient checker

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::string worst_param;
  Eigen::Index worst_index = -1;
  double analytic = 0.0;
  double numeric = 0.0;
  // Entries whose analytic and numeric magnitudes both fall below the floor
  // (structurally zero gradients, where only roundoff remains).
  std::size_t below_floor = 0;
  double max_abs_error_below_floor = 0.0;
};

/// Compares the gradients already stored in `params` with central
/// differences of `f`. `f` must not touch the gradient buffers. Relative
/// error is |a - n| / max(|a|, |n|, floor).
template <class Scalar, class F>
GradCheckReport finite_diff_check(F&& f, ParamStore<Scalar>& params, double eps, double floor = 1e-8) {
  require(eps > 0.0 && floor > 0.0, ErrorKind::Precondition, "eps and floor must be positive");
  GradCheckReport report;
  for (auto& e : params.entries()) {
    for (Eigen::Index i = 0; i < e.value.size(); ++i) {
      Scalar& slot = e.value.data()[i];
      const Scalar saved = slot;
      slot = saved + Scalar(eps);
      const double up = static_cast<double>(f(params));
      slot = saved - Scalar(eps);
      const double down = static_cast<double>(f(params));
      slot = saved;
      if (!std::isfinite(up) || !std::isfinite(down))
        fail(ErrorKind::Numeric, "finite_diff_check: non-finite objective at '" + e.name + "'");
      const double numeric = (up - down) / (2.0 * eps);
      const double analytic = static_cast<double>(e.grad.data()[i]);
      const double magnitude = std::max(std::abs(analytic), std::abs(numeric));
      const double abs_err = std::abs(analytic - numeric);
      if (magnitude < floor) {
        ++report.below_floor;
        report.max_abs_error_below_floor = std::max(report.max_abs_error_below_floor, abs_err);
      }
      const double rel = abs_err / std::max(magnitude, floor);
      if (report.worst_index < 0 || rel > report.max_rel_error) {
        report.max_rel_error = rel;
        report.worst_param = e.name;
        report.worst_index = i;
        report.analytic = analytic;
        report.numeric = numeric;
      }
    }
  }
  return report;
}

}  // namespace hvtsurv
