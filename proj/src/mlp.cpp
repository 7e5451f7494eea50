#include "opcomm/mlp.hpp"

#include <cmath>

#include "opcomm/errors.hpp"
#include "opcomm/rng.hpp"

namespace opcomm::ppo {

std::size_t Mlp::count_params(const std::vector<std::size_t>& sizes) {
  std::size_t n = 0;
  for (std::size_t l = 0; l + 1 < sizes.size(); ++l) n += sizes[l + 1] * (sizes[l] + 1);
  return n;
}

Mlp::Mlp(std::vector<std::size_t> sizes, std::uint64_t seed, double output_scale) : sizes_(std::move(sizes)) {
  if (sizes_.size() < 2) throw InvalidInput("network needs input and output sizes");
  for (auto s : sizes_) {
    if (s == 0) throw InvalidInput("network layer sizes must be >= 1");
  }
  params_.assign(count_params(sizes_), 0.0);
  Rng rng(seed);
  std::size_t off = 0;
  const std::size_t n_layers = sizes_.size() - 1;
  for (std::size_t l = 0; l < n_layers; ++l) {
    const std::size_t in = sizes_[l];
    const std::size_t out = sizes_[l + 1];
    double limit = std::sqrt(6.0 / static_cast<double>(in + out));
    if (l + 1 == n_layers) limit *= output_scale;
    for (std::size_t i = 0; i < out * in; ++i) params_[off + i] = (2.0 * rng.uniform() - 1.0) * limit;
    off += out * in + out;  // biases start at zero
  }
}

Mlp Mlp::from_params(std::vector<std::size_t> sizes, std::vector<double> params) {
  Mlp m;
  if (sizes.size() < 2) throw InvalidInput("network needs input and output sizes");
  if (params.size() != count_params(sizes)) throw InvalidInput("parameter count does not match layer sizes");
  m.sizes_ = std::move(sizes);
  m.params_ = std::move(params);
  return m;
}

Mlp::Cache Mlp::forward_cached(std::span<const double> x) const {
  if (x.size() != input_dim()) throw InvalidInput("network input dimension mismatch");
  Cache cache;
  cache.activations.emplace_back(x.begin(), x.end());
  std::size_t off = 0;
  const std::size_t n_layers = sizes_.size() - 1;
  for (std::size_t l = 0; l < n_layers; ++l) {
    const std::size_t in = sizes_[l];
    const std::size_t out = sizes_[l + 1];
    const auto& a = cache.activations.back();
    std::vector<double> z(out);
    for (std::size_t o = 0; o < out; ++o) {
      double s = params_[off + out * in + o];
      const double* w = &params_[off + o * in];
      for (std::size_t i = 0; i < in; ++i) s += w[i] * a[i];
      z[o] = s;
    }
    off += out * in + out;
    if (l + 1 == n_layers) {
      cache.output = std::move(z);
    } else {
      for (auto& v : z) v = std::tanh(v);
      cache.activations.push_back(std::move(z));
    }
  }
  return cache;
}

std::vector<double> Mlp::forward(std::span<const double> x) const { return forward_cached(x).output; }

void Mlp::backward(const Cache& cache, std::span<const double> grad_output, std::span<double> grad) const {
  if (grad.size() != params_.size()) throw InvalidInput("gradient buffer size mismatch");
  const std::size_t n_layers = sizes_.size() - 1;
  std::vector<std::size_t> offsets(n_layers);
  for (std::size_t l = 0, off = 0; l < n_layers; ++l) {
    offsets[l] = off;
    off += sizes_[l + 1] * (sizes_[l] + 1);
  }
  std::vector<double> delta(grad_output.begin(), grad_output.end());
  for (std::size_t l = n_layers; l-- > 0;) {
    const std::size_t in = sizes_[l];
    const std::size_t out = sizes_[l + 1];
    const std::size_t off = offsets[l];
    const auto& a = cache.activations[l];
    for (std::size_t o = 0; o < out; ++o) {
      double* gw = &grad[off + o * in];
      for (std::size_t i = 0; i < in; ++i) gw[i] += delta[o] * a[i];
      grad[off + out * in + o] += delta[o];
    }
    if (l == 0) break;
    std::vector<double> prev(in, 0.0);
    for (std::size_t o = 0; o < out; ++o) {
      const double* w = &params_[off + o * in];
      for (std::size_t i = 0; i < in; ++i) prev[i] += w[i] * delta[o];
    }
    for (std::size_t i = 0; i < in; ++i) prev[i] *= 1.0 - a[i] * a[i];
    delta = std::move(prev);
  }
}

}  // namespace opcomm::ppo
