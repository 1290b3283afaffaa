#pragma once

// Small dense networks with hand-written reverse mode, an Adam optimizer,
// finite-difference gradient checking and a flat binary checkpoint format.

#include <filesystem>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "nesy/rng.hpp"

namespace nesy::nn {

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;

enum class Activation { Identity, Tanh, Relu, Sigmoid };

std::string to_string(Activation a);
Activation activation_from_string(const std::string& s);

struct Layer {
  Mat weight;  // out x in
  Vec bias;
  Activation activation = Activation::Identity;
};

/// Per-layer weight/bias gradients shaped like an Mlp's parameters.
struct MlpGradients {
  std::vector<Mat> weight;
  std::vector<Vec> bias;

  MlpGradients& operator+=(const MlpGradients& o);
  MlpGradients& operator*=(double s);
  bool all_finite() const;
  double squared_norm() const;
};

class Mlp;

struct ForwardCache {
  std::vector<Vec> inputs;  // input to each layer
  std::vector<Vec> pre;     // pre-activation of each layer
  Vec output;
};

class Mlp {
 public:
  Mlp() = default;
  /// Zero-initialized net; activations.size() == sizes.size() - 1.
  Mlp(std::vector<int> sizes, std::vector<Activation> activations);
  /// Glorot-uniform weights, zero biases.
  static Mlp glorot(std::vector<int> sizes, std::vector<Activation> activations, Rng& rng);

  int input_size() const;
  int output_size() const;
  std::vector<int> layer_sizes() const;
  std::size_t parameter_count() const;

  std::vector<Layer>& layers() { return layers_; }
  const std::vector<Layer>& layers() const { return layers_; }

  /// Flattened parameters: per layer, weight row-major then bias.
  Vec parameters() const;
  void set_parameters(const Vec& p);

  MlpGradients zero_gradients() const;
  bool all_finite() const;

  friend bool operator==(const Mlp& a, const Mlp& b);

 private:
  std::vector<Layer> layers_;
};

Vec forward(const Mlp& net, const Vec& input);
ForwardCache forward_cached(const Mlp& net, const Vec& input);

struct BackwardResult {
  MlpGradients params;
  Vec input;
};

/// Reverse-mode gradients of <upstream, net(input)> given the forward cache.
BackwardResult backward(const Mlp& net, const ForwardCache& cache, const Vec& upstream);
inline BackwardResult backward(const Mlp& net, const Vec& input, const Vec& upstream) {
  return backward(net, forward_cached(net, input), upstream);
}

/// Flat view helpers for gradients.
Vec flatten(const MlpGradients& g);

class Adam {
 public:
  struct Options {
    double learning_rate = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
  };

  Adam() = default;
  Adam(const Mlp& net, Options opts);

  /// One update. Throws std::domain_error on non-finite gradients, leaving
  /// both the net and the optimizer state untouched.
  void step(Mlp& net, const MlpGradients& grads);

  long steps() const { return t_; }
  const Options& options() const { return opts_; }
  void set_learning_rate(double lr) { opts_.learning_rate = lr; }

 private:
  Options opts_;
  Vec m_, v_;
  long t_ = 0;
};

/// Scalar loss of the network output together with its gradient.
struct ScalarLoss {
  std::function<double(const Vec&)> value;
  std::function<Vec(const Vec&)> gradient;
};

ScalarLoss squared_error_loss(Vec target);  // 0.5 |y - t|^2
ScalarLoss linear_loss(Vec coeffs);         // c . y

struct GradCheckReport {
  double max_relative_error = 0.0;
  std::size_t worst_index = 0;  // index into the flattened parameter vector
  std::size_t checked = 0;
  bool comparable = true;  // false when a ReLU sits within the step of its kink
};

/// Compares backward() against central differences with step h. Relative
/// error is |a - n| / max(|a|, |n|, 1e-6).
GradCheckReport gradient_check(const Mlp& net, const ScalarLoss& loss, const Vec& input, double h = 1e-5);

/// Named networks written as little-endian float64 parameters (each net's
/// flattened parameter vector, concatenated in order) plus a JSON sidecar
/// at `<path>.json` describing shapes and offsets.
void save_checkpoint(const std::vector<std::pair<std::string, Mlp>>& nets, const std::filesystem::path& path);
std::vector<std::pair<std::string, Mlp>> load_checkpoint(const std::filesystem::path& path);

}  // namespace nesy::nn
