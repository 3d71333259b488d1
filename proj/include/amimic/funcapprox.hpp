#pragma once

#include "amimic/features.hpp"
#include "amimic/mdp.hpp"

#include <cstdint>
#include <iosfwd>
#include <stdexcept>
#include <string>
#include <vector>

namespace amimic {

/// Raised by optimizers and trainers when training produces non-finite
/// values or an exploding loss.
class TrainingDiverged : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Q(s, a; theta) = phi(s)^T theta_a with theta of shape K x |A|.
struct LinearQ {
  MatrixXd theta;

  LinearQ() = default;
  LinearQ(int feature_dim, int num_actions) : theta(MatrixXd::Zero(feature_dim, num_actions)) {}
  explicit LinearQ(MatrixXd t) : theta(std::move(t)) {}

  VectorXd values(const VectorXd& phi) const { return theta.transpose() * phi; }
  /// |S| x |A| table Phi * theta.
  MatrixXd table(const FeatureMap& features) const { return features.matrix() * theta; }
};

enum class Activation { Identity, Relu };

/// Forward-pass intermediates for a batch stored column-wise.
struct MlpCache {
  std::vector<MatrixXd> activations;  // [0] = inputs, [l] = output of layer l
};

struct MlpGrads {
  std::vector<MatrixXd> weights;
  std::vector<VectorXd> biases;

  MlpGrads& operator+=(const MlpGrads& other);
  MlpGrads& operator*=(double s);
  VectorXd flatten() const;
  bool all_finite() const;
};

/// Dense network with rectifier hidden layers. The output layer is linear
/// unless constructed with Activation::Relu (used for trunk-only networks).
/// The feature layer h(s) is the input of the final layer.
class MlpQ {
 public:
  MlpQ() = default;
  /// Weights uniform in [-1/sqrt(fan_in), 1/sqrt(fan_in)], biases likewise.
  MlpQ(std::vector<int> layer_sizes, std::uint64_t seed, Activation output = Activation::Identity);

  static MlpQ zeros(std::vector<int> layer_sizes, Activation output = Activation::Identity);

  int num_layers() const { return static_cast<int>(weights_.size()); }
  const std::vector<int>& layer_sizes() const { return sizes_; }
  int input_dim() const { return sizes_.front(); }
  int output_dim() const { return sizes_.back(); }
  int feature_dim() const { return sizes_[sizes_.size() - 2]; }
  Activation output_activation() const { return output_act_; }

  MlpCache forward_cache(const MatrixXd& inputs) const;
  MatrixXd forward(const MatrixXd& inputs) const;
  VectorXd forward(const VectorXd& input) const;
  /// Activations of the feature layer for a batch.
  static const MatrixXd& features(const MlpCache& cache) { return cache.activations[cache.activations.size() - 2]; }
  static const MatrixXd& outputs(const MlpCache& cache) { return cache.activations.back(); }

  /// Gradients of a loss given dL/d(outputs) and, optionally, an extra
  /// dL/d(features) injected at the feature layer. Sums over the batch.
  /// When `d_inputs` is non-null it receives dL/d(inputs).
  MlpGrads backward(const MlpCache& cache, const MatrixXd& d_outputs,
                    const MatrixXd* d_features = nullptr, MatrixXd* d_inputs = nullptr) const;

  MlpGrads zero_grads() const;
  int parameter_count() const;
  VectorXd parameters() const;
  void set_parameters(const VectorXd& flat);

  std::vector<MatrixXd>& weights() { return weights_; }
  const std::vector<MatrixXd>& weights() const { return weights_; }
  std::vector<VectorXd>& biases() { return biases_; }
  const std::vector<VectorXd>& biases() const { return biases_; }

  friend bool operator==(const MlpQ& a, const MlpQ& b);

 private:
  std::vector<int> sizes_;
  std::vector<MatrixXd> weights_;  // layer l: sizes_[l+1] x sizes_[l]
  std::vector<VectorXd> biases_;
  Activation output_act_ = Activation::Identity;
};

/// Affine map f_i from AMN features to one expert's features.
struct FeatureRegressionHead {
  MatrixXd weight;  // expert_dim x amn_dim
  VectorXd bias;

  FeatureRegressionHead() = default;
  FeatureRegressionHead(int amn_dim, int expert_dim, std::uint64_t seed);
  static FeatureRegressionHead identity(int dim);

  int input_dim() const { return static_cast<int>(weight.cols()); }
  int output_dim() const { return static_cast<int>(weight.rows()); }
  MatrixXd forward(const MatrixXd& features) const {
    return (weight * features).colwise() + bias;
  }
  VectorXd parameters() const;
  void set_parameters(const VectorXd& flat);
};

/// Learning-rate schedule: constant, or Robbins-Monro a / (b + t).
struct Schedule {
  enum class Kind { Constant, RobbinsMonro };
  Kind kind = Kind::Constant;
  double a = 0.01;
  double b = 1.0;

  static Schedule constant(double rate) { return {Kind::Constant, rate, 1.0}; }
  static Schedule robbins_monro(double a, double b) { return {Kind::RobbinsMonro, a, b}; }
  double rate(std::int64_t t) const {
    return kind == Kind::Constant ? a : a / (b + static_cast<double>(t));
  }
};

/// Plain SGD under a schedule, or an RMS-normalized adaptive step. Works on
/// flattened parameter vectors; state is sized on first use.
class Optimizer {
 public:
  enum class Kind { Sgd, RmsProp };

  static Optimizer sgd(Schedule schedule) { return Optimizer(Kind::Sgd, schedule); }
  static Optimizer rmsprop(double rate, double decay = 0.95, double eps = 1e-6) {
    Optimizer o(Kind::RmsProp, Schedule::constant(rate));
    o.decay_ = decay;
    o.eps_ = eps;
    return o;
  }

  /// theta <- theta - alpha_t * g (SGD) or the RMS-scaled equivalent.
  /// Throws TrainingDiverged on a non-finite gradient.
  void step(VectorXd& params, const VectorXd& grads);
  std::int64_t steps() const { return t_; }
  Kind kind() const { return kind_; }

 private:
  Optimizer(Kind kind, Schedule schedule) : kind_(kind), schedule_(schedule) {}
  Kind kind_;
  Schedule schedule_;
  double decay_ = 0.95;
  double eps_ = 1e-6;
  std::int64_t t_ = 0;
  VectorXd mean_sq_;
};

/// Applies `grads` to `model` through `opt`.
void apply_gradients(MlpQ& model, const MlpGrads& grads, Optimizer& opt);

class IncompatibleCheckpoint : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Checkpoint text layout:
///
///   amimic-mlp 1
///   output <identity|relu>
///   layers <n> <size_0> ... <size_n>
///   W <l> <rows> <cols>
///   <rows lines of cols values, row-major, %.17g>
///   b <l> <size>
///   <one line of values>
///   ... repeated for each layer l
///   end
///
/// Values are printed with 17 significant digits so reading back is exact.
void write_checkpoint(std::ostream& os, const MlpQ& model);
MlpQ read_checkpoint(std::istream& is);
void save_checkpoint(const std::string& path, const MlpQ& model);
MlpQ load_checkpoint(const std::string& path);

}  // namespace amimic
