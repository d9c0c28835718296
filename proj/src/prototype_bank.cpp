#include "paml/prototype_bank.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include <Eigen/Core>

namespace paml {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;

void require_finite(std::span<const double> v, const char* what) {
  for (double x : v) {
    if (!std::isfinite(x)) throw NumericError(std::string("prototype bank: non-finite ") + what);
  }
}

}  // namespace

Tensor pairwise_sq_dist(const Tensor& x, const Tensor& e) {
  if (x.rank() != 2 || e.rank() != 2 || x.dim(1) != e.dim(1)) {
    throw DimensionError("pairwise_sq_dist: width mismatch " + shape_str(x.shape()) + " vs " +
                         shape_str(e.shape()));
  }
  const std::size_t m = x.dim(0), n = e.dim(0), c = x.dim(1);
  const ConstMap xm(x.data().data(), m, c);
  const ConstMap em(e.data().data(), n, c);
  std::vector<double> d(m * n);
  MutMap dm(d.data(), m, n);
  dm.noalias() = -2.0 * xm * em.transpose();
  const Eigen::VectorXd xn = xm.rowwise().squaredNorm();
  const Eigen::VectorXd en = em.rowwise().squaredNorm();
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      dm(i, j) = std::max(0.0, dm(i, j) + xn(i) + en(j));
    }
  }
  return Tensor::constant({m, n}, std::move(d));
}

Neighbors topk_neighbors(const Tensor& d, std::size_t k) {
  if (d.rank() != 2) throw DimensionError("topk_neighbors: distances must be rank 2");
  const std::size_t m = d.dim(0), n = d.dim(1);
  if (k == 0 || k > n) {
    throw ConfigError("topk_neighbors: k = " + std::to_string(k) + " must be in [1, " +
                      std::to_string(n) + "]");
  }
  Neighbors out{m, k, std::vector<std::size_t>(m * k)};
  const auto v = d.data();
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < m; ++i) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    const double* row = v.data() + i * n;
    auto less = [row](std::size_t a, std::size_t b) {
      return row[a] < row[b] || (row[a] == row[b] && a < b);
    };
    std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k), order.end(),
                      less);
    std::copy_n(order.begin(), k, out.index.begin() + static_cast<std::ptrdiff_t>(i * k));
  }
  return out;
}

Tensor neighbor_weights(const Tensor& d, const Neighbors& neighbors, const Tensor& tau) {
  if (d.rank() != 2 || d.dim(0) != neighbors.rows) {
    throw DimensionError("neighbor_weights: distances " + shape_str(d.shape()) +
                         " vs neighbour rows " + std::to_string(neighbors.rows));
  }
  if (tau.numel() != 1 || !(tau.item() > 0.0)) {
    throw ConfigError("neighbor_weights: tau must be a positive scalar");
  }
  const Tensor near = gather_cols(d, neighbors.index, neighbors.k);
  const Tensor w = softmax(neg(div(near, tau)), 1);
  return scatter_cols(w, neighbors.index, d.dim(1));
}

Tensor neighbor_weights(const Tensor& d, const Neighbors& neighbors, double tau) {
  return neighbor_weights(d, neighbors, Tensor::scalar(tau));
}

// ---------------------------------------------------------------------------

PrototypeBank::PrototypeBank(ParamStore& store, const std::string& name, const BankConfig& config)
    : config_(config) {
  if (config.size == 0 || config.dim == 0) throw ConfigError("bank: size and dim must be positive");
  if (config.k == 0 || config.k > config.size) {
    throw ConfigError("bank: k = " + std::to_string(config.k) + " exceeds bank size " +
                      std::to_string(config.size));
  }
  if (!(config.decay > 0.0 && config.decay <= 1.0)) throw ConfigError("bank: decay must be in (0, 1]");
  if (!(config.epsilon > 0.0)) throw ConfigError("bank: epsilon must be positive");
  tau = store.add(name + ".tau", {1}, {config.tau_init});
  codebook_.assign(config.size * config.dim, 0.0);
  cluster_size_.assign(config.size, 0.0);
  running_sum_.assign(config.size * config.dim, 0.0);
}

Tensor PrototypeBank::codebook() const {
  return Tensor::constant({config_.size, config_.dim}, codebook_);
}

PrototypeBank::Assignment PrototypeBank::assign(const Tensor& x) const {
  Assignment a;
  a.distances = pairwise_sq_dist(x, codebook());
  a.neighbors = topk_neighbors(a.distances, config_.k);
  a.weights = neighbor_weights(a.distances, a.neighbors, tau);
  return a;
}

void PrototypeBank::ema_update(const Tensor& x, const Tensor& w) {
  const std::size_t n_p = config_.size, c = config_.dim;
  if (x.rank() != 2 || x.dim(1) != c || w.rank() != 2 || w.dim(1) != n_p ||
      w.dim(0) != x.dim(0)) {
    throw DimensionError("ema_update: tokens " + shape_str(x.shape()) + " and weights " +
                         shape_str(w.shape()) + " do not match a bank of " +
                         std::to_string(n_p) + "x" + std::to_string(c));
  }
  require_finite(x.data(), "tokens");
  require_finite(w.data(), "weights");
  const std::size_t m = x.dim(0);
  const double a = config_.decay;
  const ConstMap xm(x.data().data(), m, c);
  const ConstMap wm(w.data().data(), m, n_p);

  const Eigen::RowVectorXd s = wm.colwise().sum();
  const RowMat sums = wm.transpose() * xm;  // c_j = w_{·j}ᵀ X

  std::vector<double> size(n_p), running(n_p * c);
  for (std::size_t j = 0; j < n_p; ++j) {
    size[j] = (1.0 - a) * cluster_size_[j] + a * s(static_cast<Eigen::Index>(j));
    for (std::size_t f = 0; f < c; ++f) {
      running[j * c + f] = (1.0 - a) * running_sum_[j * c + f] +
                           a * sums(static_cast<Eigen::Index>(j), static_cast<Eigen::Index>(f));
    }
  }
  const double total = std::accumulate(size.begin(), size.end(), 0.0);
  const double eps = config_.epsilon;
  for (double& sj : size) sj = (sj + eps) / (total + static_cast<double>(n_p) * eps) * total;
  std::vector<double> code(n_p * c);
  for (std::size_t j = 0; j < n_p; ++j) {
    for (std::size_t f = 0; f < c; ++f) code[j * c + f] = running[j * c + f] / size[j];
  }
  require_finite(size, "cluster sizes");
  require_finite(code, "codebook");
  cluster_size_ = std::move(size);
  running_sum_ = std::move(running);
  codebook_ = std::move(code);
  ++updates_;
}

Tensor PrototypeBank::inherit(const Tensor& x, const Tensor& weights) const {
  if (x.rank() != 2 || x.dim(1) != config_.dim || weights.rank() != 2 ||
      weights.dim(0) != x.dim(0) || weights.dim(1) != config_.size) {
    throw DimensionError("inherit: tokens " + shape_str(x.shape()) + " and weights " +
                         shape_str(weights.shape()) + " do not match the bank");
  }
  const Tensor q = matmul(weights, codebook());
  Tensor out = straight_through(x, q);
  if (q.requires_grad()) out = add(out, sub(q, stop_gradient(q)));
  return out;
}

void PrototypeBank::set_state(std::vector<double> codebook, std::vector<double> cluster_size,
                              std::vector<double> running_sum, std::uint64_t updates) {
  const std::size_t n_p = config_.size, c = config_.dim;
  if (codebook.size() != n_p * c || cluster_size.size() != n_p || running_sum.size() != n_p * c) {
    throw DimensionError("bank state does not match a bank of " + std::to_string(n_p) + "x" +
                         std::to_string(c));
  }
  codebook_ = std::move(codebook);
  cluster_size_ = std::move(cluster_size);
  running_sum_ = std::move(running_sum);
  updates_ = updates;
}

void PrototypeBank::clamp_tau() {
  auto v = tau.mutable_data();
  v[0] = std::max(v[0], config_.tau_min);
}

void PrototypeBank::set_k(std::size_t k) {
  if (k == 0 || k > config_.size) {
    throw ConfigError("bank: k = " + std::to_string(k) + " exceeds bank size " +
                      std::to_string(config_.size));
  }
  config_.k = k;
}

// ---------------------------------------------------------------------------

GateFusion::GateFusion(ParamStore& store, const std::string& name, std::size_t dim,
                       std::size_t bank_dim, Rng& rng)
    : up_conv(store, name + ".up_conv", dim, bank_dim, rng),
      gate(store, name + ".gate", 2 * bank_dim, 2, rng),
      out_conv(store, name + ".out_conv", bank_dim, dim, rng) {}

GateOutput gate_fuse(const Tensor& f_in, const Tensor& f_qt, const GateFusion& params) {
  if (f_in.shape() != f_qt.shape()) {
    throw DimensionError("gate_fuse: raw " + shape_str(f_in.shape()) + " vs quantized " +
                         shape_str(f_qt.shape()));
  }
  const Tensor t_feat = concat({f_in, f_qt}, 1);
  if (t_feat.dim(1) != params.gate.in_features()) {
    throw DimensionError("gate_fuse: " + std::to_string(t_feat.dim(1)) +
                         " channels vs gate input " + std::to_string(params.gate.in_features()));
  }
  const Tensor t_s = softmax(params.gate(t_feat), 1);
  GateOutput out;
  out.e_s = slice(t_s, 1, 0, 1);
  out.i_s = slice(t_s, 1, 1, 1);
  out.f_q = params.out_conv(add(mul_rows(f_in, out.i_s), mul_rows(f_qt, out.e_s)));
  return out;
}

std::vector<PrototypeOutput> prototype_stage(std::span<const Tensor> f_disv, PrototypeBank& bank,
                                             const GateFusion& params, bool train) {
  std::vector<PrototypeOutput> out(f_disv.size());
  std::vector<Tensor> weights(f_disv.size());
  for (std::size_t b = 0; b < f_disv.size(); ++b) {
    out[b].f_in = params.up_conv(f_disv[b]);
    weights[b] = bank.assign(out[b].f_in).weights;
  }
  if (train && !f_disv.empty()) {
    std::vector<Tensor> xs, ws;
    for (std::size_t b = 0; b < f_disv.size(); ++b) {
      xs.push_back(stop_gradient(out[b].f_in));
      ws.push_back(stop_gradient(weights[b]));
    }
    NoGradScope no_grad;
    bank.ema_update(concat(xs, 0), concat(ws, 0));
  }
  for (std::size_t b = 0; b < f_disv.size(); ++b) {
    out[b].q = bank.inherit(out[b].f_in, weights[b]);
    out[b].gate = gate_fuse(out[b].f_in, out[b].q, params);
  }
  return out;
}

}  // namespace paml
