#include "amimic/funcapprox.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>

namespace amimic {

namespace {

void fill_uniform(MatrixXd& m, double limit, Rng& rng) {
  for (Eigen::Index j = 0; j < m.cols(); ++j)
    for (Eigen::Index i = 0; i < m.rows(); ++i) m(i, j) = limit * (2.0 * uniform01(rng) - 1.0);
}

void fill_uniform(VectorXd& v, double limit, Rng& rng) {
  for (Eigen::Index i = 0; i < v.size(); ++i) v(i) = limit * (2.0 * uniform01(rng) - 1.0);
}

std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

MlpGrads& MlpGrads::operator+=(const MlpGrads& other) {
  for (std::size_t l = 0; l < weights.size(); ++l) {
    weights[l] += other.weights[l];
    biases[l] += other.biases[l];
  }
  return *this;
}

MlpGrads& MlpGrads::operator*=(double s) {
  for (std::size_t l = 0; l < weights.size(); ++l) {
    weights[l] *= s;
    biases[l] *= s;
  }
  return *this;
}

VectorXd MlpGrads::flatten() const {
  Eigen::Index n = 0;
  for (std::size_t l = 0; l < weights.size(); ++l) n += weights[l].size() + biases[l].size();
  VectorXd out(n);
  Eigen::Index off = 0;
  for (std::size_t l = 0; l < weights.size(); ++l) {
    out.segment(off, weights[l].size()) = Eigen::Map<const VectorXd>(weights[l].data(), weights[l].size());
    off += weights[l].size();
    out.segment(off, biases[l].size()) = biases[l];
    off += biases[l].size();
  }
  return out;
}

bool MlpGrads::all_finite() const {
  for (std::size_t l = 0; l < weights.size(); ++l)
    if (!weights[l].allFinite() || !biases[l].allFinite()) return false;
  return true;
}

MlpQ::MlpQ(std::vector<int> layer_sizes, std::uint64_t seed, Activation output)
    : sizes_(std::move(layer_sizes)), output_act_(output) {
  if (sizes_.size() < 2) throw std::invalid_argument("MlpQ: need at least input and output sizes");
  for (int s : sizes_)
    if (s <= 0) throw std::invalid_argument("MlpQ: layer sizes must be positive");
  Rng rng(seed);
  for (std::size_t l = 0; l + 1 < sizes_.size(); ++l) {
    const double limit = 1.0 / std::sqrt(static_cast<double>(sizes_[l]));
    MatrixXd w(sizes_[l + 1], sizes_[l]);
    VectorXd b(sizes_[l + 1]);
    fill_uniform(w, limit, rng);
    fill_uniform(b, limit, rng);
    weights_.push_back(std::move(w));
    biases_.push_back(std::move(b));
  }
}

MlpQ MlpQ::zeros(std::vector<int> layer_sizes, Activation output) {
  MlpQ m(std::move(layer_sizes), 0, output);
  for (auto& w : m.weights_) w.setZero();
  for (auto& b : m.biases_) b.setZero();
  return m;
}

MlpCache MlpQ::forward_cache(const MatrixXd& inputs) const {
  if (inputs.rows() != input_dim()) throw std::invalid_argument("MlpQ: input dimension mismatch");
  MlpCache cache;
  cache.activations.reserve(weights_.size() + 1);
  cache.activations.push_back(inputs);
  for (int l = 0; l < num_layers(); ++l) {
    MatrixXd z = weights_[l] * cache.activations.back();
    z.colwise() += biases_[l];
    const bool relu = l + 1 < num_layers() || output_act_ == Activation::Relu;
    if (relu) z = z.cwiseMax(0.0);
    cache.activations.push_back(std::move(z));
  }
  return cache;
}

MatrixXd MlpQ::forward(const MatrixXd& inputs) const {
  return forward_cache(inputs).activations.back();
}

VectorXd MlpQ::forward(const VectorXd& input) const {
  return forward(MatrixXd(input)).col(0);
}

MlpGrads MlpQ::backward(const MlpCache& cache, const MatrixXd& d_outputs, const MatrixXd* d_features,
                        MatrixXd* d_inputs) const {
  MlpGrads g;
  g.weights.resize(weights_.size());
  g.biases.resize(biases_.size());
  MatrixXd delta = d_outputs;
  for (int l = num_layers() - 1; l >= 0; --l) {
    const bool relu = l + 1 < num_layers() || output_act_ == Activation::Relu;
    if (relu) delta = delta.cwiseProduct((cache.activations[l + 1].array() > 0.0).cast<double>().matrix());
    g.weights[l].noalias() = delta * cache.activations[l].transpose();
    g.biases[l] = delta.rowwise().sum();
    if (l == 0 && d_inputs == nullptr) break;
    MatrixXd upstream = weights_[l].transpose() * delta;
    if (d_features && l == num_layers() - 1) upstream += *d_features;
    delta = std::move(upstream);
  }
  if (d_inputs) *d_inputs = delta;
  return g;
}

MlpGrads MlpQ::zero_grads() const {
  MlpGrads g;
  for (std::size_t l = 0; l < weights_.size(); ++l) {
    g.weights.push_back(MatrixXd::Zero(weights_[l].rows(), weights_[l].cols()));
    g.biases.push_back(VectorXd::Zero(biases_[l].size()));
  }
  return g;
}

int MlpQ::parameter_count() const {
  Eigen::Index n = 0;
  for (std::size_t l = 0; l < weights_.size(); ++l) n += weights_[l].size() + biases_[l].size();
  return static_cast<int>(n);
}

VectorXd MlpQ::parameters() const {
  MlpGrads view{weights_, biases_};
  return view.flatten();
}

void MlpQ::set_parameters(const VectorXd& flat) {
  if (flat.size() != parameter_count()) throw std::invalid_argument("MlpQ: parameter count mismatch");
  Eigen::Index off = 0;
  for (std::size_t l = 0; l < weights_.size(); ++l) {
    Eigen::Map<VectorXd>(weights_[l].data(), weights_[l].size()) = flat.segment(off, weights_[l].size());
    off += weights_[l].size();
    biases_[l] = flat.segment(off, biases_[l].size());
    off += biases_[l].size();
  }
}

bool operator==(const MlpQ& a, const MlpQ& b) {
  if (a.sizes_ != b.sizes_ || a.output_act_ != b.output_act_) return false;
  for (std::size_t l = 0; l < a.weights_.size(); ++l)
    if (a.weights_[l] != b.weights_[l] || a.biases_[l] != b.biases_[l]) return false;
  return true;
}

FeatureRegressionHead::FeatureRegressionHead(int amn_dim, int expert_dim, std::uint64_t seed)
    : weight(expert_dim, amn_dim), bias(expert_dim) {
  Rng rng(seed);
  const double limit = 1.0 / std::sqrt(static_cast<double>(amn_dim));
  fill_uniform(weight, limit, rng);
  fill_uniform(bias, limit, rng);
}

FeatureRegressionHead FeatureRegressionHead::identity(int dim) {
  FeatureRegressionHead h;
  h.weight = MatrixXd::Identity(dim, dim);
  h.bias = VectorXd::Zero(dim);
  return h;
}

VectorXd FeatureRegressionHead::parameters() const {
  VectorXd out(weight.size() + bias.size());
  out.head(weight.size()) = Eigen::Map<const VectorXd>(weight.data(), weight.size());
  out.tail(bias.size()) = bias;
  return out;
}

void FeatureRegressionHead::set_parameters(const VectorXd& flat) {
  if (flat.size() != weight.size() + bias.size())
    throw std::invalid_argument("FeatureRegressionHead: parameter count mismatch");
  Eigen::Map<VectorXd>(weight.data(), weight.size()) = flat.head(weight.size());
  bias = flat.tail(bias.size());
}

void Optimizer::step(VectorXd& params, const VectorXd& grads) {
  if (grads.size() != params.size()) throw std::invalid_argument("Optimizer: gradient size mismatch");
  if (!grads.allFinite()) {
    throw TrainingDiverged("non-finite gradient at optimizer step " + std::to_string(t_));
  }
  const double rate = schedule_.rate(t_);
  if (!(rate > 0.0)) throw std::invalid_argument("Optimizer: learning rate must be positive");
  switch (kind_) {
    case Kind::Sgd:
      params -= rate * grads;
      break;
    case Kind::RmsProp:
      if (mean_sq_.size() != params.size()) mean_sq_ = VectorXd::Zero(params.size());
      mean_sq_ = decay_ * mean_sq_ + (1.0 - decay_) * grads.cwiseAbs2();
      params.array() -= rate * grads.array() / (mean_sq_.array().sqrt() + eps_);
      break;
  }
  ++t_;
}

void apply_gradients(MlpQ& model, const MlpGrads& grads, Optimizer& opt) {
  VectorXd params = model.parameters();
  opt.step(params, grads.flatten());
  model.set_parameters(params);
}

void write_checkpoint(std::ostream& os, const MlpQ& model) {
  os << "amimic-mlp 1\n";
  os << "output " << (model.output_activation() == Activation::Relu ? "relu" : "identity") << '\n';
  os << "layers " << model.layer_sizes().size();
  for (int s : model.layer_sizes()) os << ' ' << s;
  os << '\n';
  for (int l = 0; l < model.num_layers(); ++l) {
    const MatrixXd& w = model.weights()[l];
    os << "W " << l << ' ' << w.rows() << ' ' << w.cols() << '\n';
    for (Eigen::Index i = 0; i < w.rows(); ++i) {
      for (Eigen::Index j = 0; j < w.cols(); ++j) os << (j ? " " : "") << format_double(w(i, j));
      os << '\n';
    }
    const VectorXd& b = model.biases()[l];
    os << "b " << l << ' ' << b.size() << '\n';
    for (Eigen::Index i = 0; i < b.size(); ++i) os << (i ? " " : "") << format_double(b(i));
    os << '\n';
  }
  os << "end\n";
}

MlpQ read_checkpoint(std::istream& is) {
  auto expect = [&](const std::string& want) {
    std::string tok;
    if (!(is >> tok) || tok != want)
      throw IncompatibleCheckpoint("checkpoint: expected '" + want + "', got '" + tok + "'");
  };
  expect("amimic-mlp");
  int version = 0;
  is >> version;
  if (version != 1) throw IncompatibleCheckpoint("checkpoint: unsupported version");
  expect("output");
  std::string act;
  is >> act;
  expect("layers");
  std::size_t n = 0;
  is >> n;
  if (!is || n < 2 || n > 64) throw IncompatibleCheckpoint("checkpoint: bad layer count");
  std::vector<int> sizes(n);
  for (auto& s : sizes) is >> s;
  MlpQ model = MlpQ::zeros(sizes, act == "relu" ? Activation::Relu : Activation::Identity);
  for (int l = 0; l < model.num_layers(); ++l) {
    expect("W");
    int idx = 0;
    Eigen::Index rows = 0;
    Eigen::Index cols = 0;
    is >> idx >> rows >> cols;
    MatrixXd& w = model.weights()[l];
    if (idx != l || rows != w.rows() || cols != w.cols())
      throw IncompatibleCheckpoint("checkpoint: weight block " + std::to_string(l) + " has wrong shape");
    for (Eigen::Index i = 0; i < rows; ++i)
      for (Eigen::Index j = 0; j < cols; ++j) is >> w(i, j);
    expect("b");
    Eigen::Index size = 0;
    is >> idx >> size;
    VectorXd& b = model.biases()[l];
    if (idx != l || size != b.size())
      throw IncompatibleCheckpoint("checkpoint: bias block " + std::to_string(l) + " has wrong shape");
    for (Eigen::Index i = 0; i < size; ++i) is >> b(i);
    if (!is) throw IncompatibleCheckpoint("checkpoint: truncated data in layer " + std::to_string(l));
  }
  expect("end");
  return model;
}

void save_checkpoint(const std::string& path, const MlpQ& model) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write checkpoint " + path);
  write_checkpoint(os, model);
}

MlpQ load_checkpoint(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw IncompatibleCheckpoint("cannot open checkpoint " + path);
  return read_checkpoint(is);
}

}  // namespace amimic
