#pragma once

#include "amimic/actor_mimic.hpp"
#include "amimic/env.hpp"
#include "amimic/expert.hpp"
#include "amimic/features.hpp"
#include "amimic/funcapprox.hpp"
#include "amimic/mdp.hpp"

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace amimic {

/// Row-wise softmax of Phi * theta over each state's valid actions.
MatrixXd linear_policy(const Mdp& mdp, const FeatureMap& features, const MatrixXd& theta);

/// Linear softmax mimic of an expert under a fixed state weighting:
///
///   F(theta) = sum_s D(s) H(Pi_E(s), P_theta(s)) + (lambda / 2) ||theta||_F^2
///
/// where D is the stationary distribution of the sampling policy.
class RegularizedObjective {
 public:
  RegularizedObjective(Mdp mdp, PolicyMatrix expert, FeatureMap features, double lambda,
                       const PolicyMatrix& sampling);

  const Mdp& mdp() const { return mdp_; }
  const PolicyMatrix& expert() const { return expert_; }
  const FeatureMap& features() const { return features_; }
  double lambda() const { return lambda_; }
  const VectorXd& weighting() const { return d_; }
  int rows() const { return features_.dim(); }
  int cols() const { return mdp_.num_actions(); }

  /// Same objective with D recomputed for a new sampling policy.
  RegularizedObjective with_sampling(const PolicyMatrix& sampling) const;

  double value(const MatrixXd& theta) const;

 private:
  Mdp mdp_;
  PolicyMatrix expert_;
  FeatureMap features_;
  double lambda_;
  VectorXd d_;
};

/// Phi^T D (P_theta - Pi_E) + lambda * theta.
MatrixXd expected_gradient(const RegularizedObjective& obj, const MatrixXd& theta);

struct FixedPointOptions {
  double tol = 1e-9;
  int max_iters = 500'000;
  /// Also run the sampled update from the first init.
  bool stochastic = true;
  std::int64_t stochastic_steps = 1'000'000;
  Schedule schedule = Schedule::robbins_monro(20.0, 200.0);
  /// Iterates after this fraction of the run are averaged.
  double average_from = 0.5;
  std::uint64_t seed = 0;
};

struct FixedPointReport {
  MatrixXd theta;                   // endpoint of the first init
  std::vector<MatrixXd> endpoints;  // one per init
  double max_pairwise = 0.0;
  int iterations = 0;               // largest count over inits
  double final_step = 0.0;          // largest final ||delta theta||
  double gradient_norm = 0.0;       // at `theta`
  bool converged = false;
  std::optional<MatrixXd> stochastic_theta;
  double stochastic_distance = 0.0;
};

/// Exact gradient descent with step 1 / L from each init, L = lambda +
/// max_s ||phi(s)||^2 / 2 bounding the Hessian, until ||delta theta|| <= tol.
/// Optionally also runs the sampled update with states drawn from D.
/// Requires lambda > 0.
FixedPointReport solve_fixed_point(const RegularizedObjective& obj, const std::vector<MatrixXd>& inits,
                                   const FixedPointOptions& options = {});

struct ContractionReport {
  std::vector<double> distances{};  // ||pi^{k+1} - pi^k||_F
  std::vector<double> ratios{};     // successive distance ratios
  double modulus = 0.0;           // max ratio after the second iteration
  bool contraction_verified = false;
  bool oscillating = false;
  bool converged = false;
  MatrixXd theta{};
  PolicyMatrix policy;
  double fixed_point_residual = 0.0;  // ||Gamma(Phi theta*) - pi*||_F
  double lambda = 0.0;
  double epsilon = 0.0;
  double temperature = 0.0;
  int outer_iterations = 0;
};

struct PolicyIterationOptions {
  int outer_iters = 30;
  double epsilon = 0.1;
  double temperature = 1.0;
  double tol = 1e-10;
  /// Distances below this are numerical noise and excluded from ratios.
  double ratio_floor = 1e-9;
  FixedPointOptions inner = [] {
    FixedPointOptions o;
    o.stochastic = false;
    o.tol = 1e-11;
    return o;
  }();
};

/// Alternates theta^{k+1} = fixed point under D(pi^k) with
/// pi^{k+1} = smoothed Gamma(Phi theta^{k+1}), starting from
/// pi^0 = Gamma(Phi theta0).
ContractionReport adaptive_policy_iteration(const RegularizedObjective& obj, const MatrixXd& theta0,
                                            const PolicyIterationOptions& options = {});

struct LemmaPair {
  MatrixXd theta1;
  MatrixXd theta2;
  PolicyMatrix pi1;
  PolicyMatrix pi2;
};

/// Random parameter pairs with policies pi_i = smoothed Gamma(Phi theta_i).
std::vector<LemmaPair> random_lemma_pairs(const Mdp& mdp, const FeatureMap& features, int count,
                                          std::uint64_t seed, double epsilon = 0.1, double temperature = 1.0,
                                          double scale = 2.0);

struct LemmaConstants {
  double c_d = 0.0;  // max ||D1 - D2|| / ||pi1 - pi2||
  double c_j = 0.0;  // max ||P1 - P2||_F / ||Phi theta1 - Phi theta2||_F
  /// Analytic bound for c_j: each row Jacobian diag(p) - p p^T has spectral
  /// norm <= 1/2 (Gershgorin), so the stacked map is 1/2-Lipschitz.
  double c_j_bound = 0.5;
  std::vector<double> ratios_d;
  std::vector<double> ratios_j;
  int skipped = 0;
  bool within_bound = true;
  bool finite = true;
};

LemmaConstants estimate_lemma_constants(const Mdp& mdp, const FeatureMap& features,
                                        const std::vector<LemmaPair>& pairs);

/// Seeded random instance shared by the studies below: a random MDP with
/// three actions and branching two, dense features in [-1, 1], and the
/// Boltzmann (tau = 1) policy of its optimal Q as the expert.
struct StudyInstance {
  Mdp mdp;
  FeatureMap features;
  PolicyMatrix expert;
};
StudyInstance study_instance(int num_states, std::uint64_t seed, int feature_dim = 4);

struct FixedPointStudyConfig {
  int instances = 20;
  double lambda = 0.1;
  int inits = 5;
  double init_scale = 2.0;  // inits uniform in [-scale, scale]
  double agreement_tol = 1e-6;
  double stochastic_tol = 1e-3;
  FixedPointOptions options = [] {
    FixedPointOptions o;
    o.stochastic_steps = 10'000'000;
    return o;
  }();
  std::uint64_t seed = 0;
  int jobs = 1;
};

/// Instance i has 5 + i % 6 states.
struct FixedPointStudy {
  std::vector<int> sizes;
  std::vector<double> pairwise;
  std::vector<double> stochastic;
  double worst_pairwise = 0.0;
  double worst_stochastic = 0.0;
  int agreeing = 0;
  int stochastic_within = 0;
  bool passed() const {
    return agreeing == static_cast<int>(sizes.size()) && stochastic_within == static_cast<int>(sizes.size());
  }
};
FixedPointStudy fixed_point_study(const FixedPointStudyConfig& config);

struct ContractionStudyConfig {
  int instances = 20;
  int num_states = 8;
  double lambda = 0.1;
  double residual_tol = 1e-6;
  PolicyIterationOptions options;
  std::uint64_t seed = 0;
  int jobs = 1;
};

struct ContractionStudy {
  std::vector<double> moduli;
  std::vector<double> residuals;
  std::vector<int> outer_iterations;
  int verified = 0;  // contraction verified and residual within tolerance
  double worst_modulus = 0.0;
  double worst_residual = 0.0;
  bool passed() const { return verified == static_cast<int>(moduli.size()); }
};
/// Runs adaptive_policy_iteration from theta0 = 0 on each instance.
ContractionStudy contraction_study(const ContractionStudyConfig& config);

struct LemmaStudyConfig {
  int instances = 10;
  int pairs_per_instance = 10;
  int num_states = 5;
  std::uint64_t seed = 0;
};

struct LemmaStudy {
  LemmaConstants constants;  // ratios pooled over every instance
  bool passed() const {
    return constants.ratios_j.size() >= 100 && constants.within_bound && constants.finite;
  }
};
LemmaStudy lemma_study(const LemmaStudyConfig& config);

/// Expected undiscounted cost -sum_{t<T} r_t from the start states.
std::vector<double> cost_to_go(const Mdp& mdp, const PolicyMatrix& policy, const std::vector<int>& horizons);

struct CurveFit {
  double linear_coef = 0.0;     // g = b T
  double linear_rss = 0.0;
  double quadratic_coef = 0.0;  // g = c T^2
  double quadratic_rss = 0.0;
  double mixed_linear = 0.0;    // g = b T + c T^2
  double mixed_quadratic = 0.0;
  bool linear_better() const { return linear_rss < quadratic_rss; }
};

CurveFit fit_growth(const std::vector<int>& horizons, const std::vector<double>& gaps);

struct CostToGoArm {
  std::string source;
  std::vector<double> gaps;
  CurveFit fit;
  double final_loss = 0.0;
};

struct CostToGoSeed {
  std::uint64_t seed = 0;
  CostToGoArm from_amn;
  CostToGoArm from_expert;
  /// from_amn better fit by the linear model and from_expert has the larger
  /// quadratic coefficient.
  bool direction_holds() const;
};

struct CostToGoReport {
  std::string game;
  std::vector<int> horizons;
  std::vector<CostToGoSeed> seeds;
  double margin_u = 0.0;  // max_s max_a (V*(s) - Q*(s, a)) over valid actions
  int direction_count() const;
};

struct CostToGoConfig {
  AmnConfig amn = [] {
    AmnConfig c;
    c.hidden = {};
    c.steps = 20000;
    c.epochs = 1;
    c.batch_size = 16;
    c.rmsprop = false;
    c.learning_rate = 0.1;
    c.eval_episodes = 1;
    return c;
  }();
  std::vector<int> horizons = {0, 10, 20, 30, 40, 50, 60, 70, 80, 90, 100};
  std::vector<std::uint64_t> seeds = {1, 2, 3, 4, 5};
};

/// Trains linear one-hot mimics of the expert with states sampled from the
/// mimic and from the expert, and compares how J_T(mimic) - J_T(expert)
/// grows with T.
CostToGoReport cost_to_go_comparison(const Game& game, const ExpertBundle& expert,
                                     const CostToGoConfig& config);

}  // namespace amimic
