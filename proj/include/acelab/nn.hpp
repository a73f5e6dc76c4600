#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "acelab/rng.hpp"
#include "acelab/tensor.hpp"

namespace acelab {

/// A tensor exposed for optimization or persistence. `trainable` is false for
/// buffers such as BatchNorm running statistics.
struct NamedTensor {
  std::string name;
  Tensor tensor;
  bool trainable = true;
};

using ParameterList = std::vector<NamedTensor>;

inline std::vector<Tensor> trainable(const ParameterList& list) {
  std::vector<Tensor> out;
  for (const auto& p : list)
    if (p.trainable) out.push_back(p.tensor);
  return out;
}

inline void set_trainable(const ParameterList& list, bool on) {
  for (const auto& p : list) {
    if (!p.trainable) continue;
    Tensor t = p.tensor;
    t.set_requires_grad(on);
    t.zero_grad();
  }
}

/// Copies values from `src` into `dst` (same names and shapes, in order).
inline void copy_values(const ParameterList& src, const ParameterList& dst) {
  if (src.size() != dst.size()) throw ShapeError("copy_values: parameter count mismatch");
  for (std::size_t i = 0; i < src.size(); ++i) {
    if (src[i].tensor.shape() != dst[i].tensor.shape()) {
      throw ShapeError("copy_values: shape mismatch at " + src[i].name);
    }
    auto s = src[i].tensor.values();
    Tensor d = dst[i].tensor;
    std::copy(s.begin(), s.end(), d.mutable_values().begin());
  }
}

enum class Init { he_uniform, xavier_uniform };

/// He-uniform bound for ReLU layers.
inline double he_bound(std::size_t in) { return std::sqrt(6.0 / static_cast<double>(in)); }
/// Xavier-uniform bound for linear and sigmoid heads.
inline double xavier_bound(std::size_t in, std::size_t out) {
  return std::sqrt(6.0 / static_cast<double>(in + out));
}

class Dense {
 public:
  Dense() = default;

  Dense(std::size_t in, std::size_t out, Init scheme, Rng& rng) {
    if (in == 0 || out == 0) throw ContractError("Dense: in and out must be >= 1");
    const double bound = scheme == Init::he_uniform ? he_bound(in) : xavier_bound(in, out);
    std::vector<double> w(in * out);
    for (auto& x : w) x = rng.uniform(-bound, bound);
    weight = Tensor(Shape{in, out}, std::move(w));
    bias = Tensor::zeros(Shape{out});
    weight.set_requires_grad();
    bias.set_requires_grad();
  }

  Tensor forward(const Tensor& x) const { return matmul(x, weight) + bias; }

  std::size_t in_features() const { return weight.shape()[0]; }
  std::size_t out_features() const { return weight.shape()[1]; }

  void collect(const std::string& prefix, ParameterList& out) const {
    out.push_back({prefix + ".weight", weight, true});
    out.push_back({prefix + ".bias", bias, true});
  }

  Dense clone() const {
    Dense d;
    d.weight = weight.clone();
    d.bias = bias.clone();
    return d;
  }

  Tensor weight;  // [in x out]
  Tensor bias;    // [out]
};

class BatchNorm {
 public:
  BatchNorm() = default;

  explicit BatchNorm(std::size_t features, double momentum = 0.1, double eps = 1e-5)
      : gamma(Tensor::full(Shape{features}, 1.0)),
        beta(Tensor::zeros(Shape{features})),
        running_mean(Tensor::zeros(Shape{features})),
        running_var(Tensor::full(Shape{features}, 1.0)),
        momentum(momentum),
        eps(eps) {
    gamma.set_requires_grad();
    beta.set_requires_grad();
  }

  /// Training mode normalizes with batch statistics and updates the running
  /// estimates (unbiased variance); evaluation mode uses running statistics.
  Tensor forward(const Tensor& x, bool training) {
    if (!training) return forward_eval(x);
    const std::size_t n = x.rows();
    const Tensor mu = mean_over_batch(x);
    const Tensor centered = x - mu;
    const Tensor var = mean_over_batch(centered * centered);
    {
      auto rm = running_mean.mutable_values();
      auto rv = running_var.mutable_values();
      const auto m = mu.values();
      const auto v = var.values();
      const double unbias = n > 1 ? static_cast<double>(n) / static_cast<double>(n - 1) : 1.0;
      for (std::size_t j = 0; j < rm.size(); ++j) {
        rm[j] = (1.0 - momentum) * rm[j] + momentum * m[j];
        rv[j] = (1.0 - momentum) * rv[j] + momentum * v[j] * unbias;
      }
    }
    return centered / sqrt(var + eps) * gamma + beta;
  }

  Tensor forward_eval(const Tensor& x) const {
    std::vector<double> scale(gamma.size()), shift(gamma.size());
    const auto rm = running_mean.values();
    const auto rv = running_var.values();
    for (std::size_t j = 0; j < scale.size(); ++j) {
      scale[j] = 1.0 / std::sqrt(rv[j] + eps);
      shift[j] = -rm[j] * scale[j];
    }
    const Tensor s = Tensor::vector(std::move(scale));
    const Tensor b = Tensor::vector(std::move(shift));
    return (x * s + b) * gamma + beta;
  }

  void collect(const std::string& prefix, ParameterList& out) const {
    out.push_back({prefix + ".gamma", gamma, true});
    out.push_back({prefix + ".beta", beta, true});
    out.push_back({prefix + ".running_mean", running_mean, false});
    out.push_back({prefix + ".running_var", running_var, false});
  }

  BatchNorm clone() const {
    BatchNorm b;
    b.gamma = gamma.clone();
    b.beta = beta.clone();
    b.running_mean = running_mean.clone();
    b.running_var = running_var.clone();
    b.momentum = momentum;
    b.eps = eps;
    return b;
  }

  Tensor gamma, beta;
  Tensor running_mean, running_var;
  double momentum = 0.1;
  double eps = 1e-5;
};

/// Inverted dropout.
struct Dropout {
  double rate = 0.0;

  Tensor forward(const Tensor& x, bool active, Rng* rng) const {
    if (!active || rate == 0.0) return x;
    if (rng == nullptr) throw ContractError("Dropout: active mode needs an rng");
    const double keep = 1.0 - rate;
    std::vector<double> mask(x.size());
    for (auto& m : mask) m = rng->uniform() < keep ? 1.0 / keep : 0.0;
    return x * Tensor(x.shape(), std::move(mask));
  }
};

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Bias-corrected Adam over a fixed parameter list; gradients are read from
/// and then cleared on each parameter.
class Adam {
 public:
  Adam() = default;
  Adam(std::vector<Tensor> params, AdamConfig cfg) : params_(std::move(params)), cfg_(cfg) {
    for (const auto& p : params_) {
      m_.emplace_back(p.size(), 0.0);
      v_.emplace_back(p.size(), 0.0);
    }
  }

  void step() {
    for (const auto& p : params_) {
      if (!p.has_grad()) throw ContractError("adam step: parameter without gradient");
    }
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (std::size_t i = 0; i < params_.size(); ++i) {
      Tensor p = params_[i];
      auto w = p.mutable_values();
      auto g = p.grad();
      auto& m = m_[i];
      auto& v = v_[i];
      for (std::size_t j = 0; j < w.size(); ++j) {
        m[j] = cfg_.beta1 * m[j] + (1.0 - cfg_.beta1) * g[j];
        v[j] = cfg_.beta2 * v[j] + (1.0 - cfg_.beta2) * g[j] * g[j];
        const double mh = m[j] / bc1;
        const double vh = v[j] / bc2;
        w[j] -= cfg_.lr * mh / (std::sqrt(vh) + cfg_.eps);
      }
      p.zero_grad();
    }
  }

  void zero_grad() {
    for (auto& p : params_) p.zero_grad();
  }

  long long steps() const { return t_; }
  const std::vector<std::vector<double>>& first_moments() const { return m_; }
  const std::vector<std::vector<double>>& second_moments() const { return v_; }
  const AdamConfig& config() const { return cfg_; }

 private:
  std::vector<Tensor> params_;
  AdamConfig cfg_;
  std::vector<std::vector<double>> m_, v_;
  long long t_ = 0;
};

}  // namespace acelab
