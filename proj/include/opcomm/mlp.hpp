#pragma once

#include <cstdint>
#include <span>
#include <vector>

namespace opcomm::ppo {

/// Fully connected network with tanh hidden layers and a linear output.
/// Parameters live in one flat vector: per layer, the row-major weight
/// matrix (out x in) followed by the bias.
class Mlp {
 public:
  Mlp() = default;
  Mlp(std::vector<std::size_t> sizes, std::uint64_t seed, double output_scale);

  struct Cache {
    std::vector<std::vector<double>> activations;  // input, then each hidden layer's tanh output
    std::vector<double> output;
  };

  std::vector<double> forward(std::span<const double> x) const;
  Cache forward_cached(std::span<const double> x) const;
  /// Adds d(output . grad_output)/d(params) into `grad`.
  void backward(const Cache& cache, std::span<const double> grad_output, std::span<double> grad) const;

  std::size_t input_dim() const { return sizes_.front(); }
  std::size_t output_dim() const { return sizes_.back(); }
  const std::vector<std::size_t>& sizes() const { return sizes_; }
  std::vector<double>& params() { return params_; }
  const std::vector<double>& params() const { return params_; }

  /// Rebuilds from a layer layout and matching flat parameters.
  static Mlp from_params(std::vector<std::size_t> sizes, std::vector<double> params);

 private:
  static std::size_t count_params(const std::vector<std::size_t>& sizes);

  std::vector<std::size_t> sizes_;
  std::vector<double> params_;
};

}  // namespace opcomm::ppo
