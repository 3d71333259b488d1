#include "amimic/theory.hpp"

#include "amimic/parallel.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

namespace amimic {

MatrixXd linear_policy(const Mdp& mdp, const FeatureMap& features, const MatrixXd& theta) {
  if (theta.rows() != features.dim() || theta.cols() != mdp.num_actions())
    throw std::invalid_argument("linear_policy: theta must be " + std::to_string(features.dim()) + "x" +
                                std::to_string(mdp.num_actions()));
  if (features.num_states() != mdp.num_states())
    throw std::invalid_argument("linear_policy: feature map does not cover the MDP");
  const MatrixXd z = features.matrix() * theta;
  MatrixXd p = MatrixXd::Zero(z.rows(), z.cols());
  for (int s = 0; s < mdp.num_states(); ++s) {
    const auto& valid = mdp.valid_actions(s);
    double m = -std::numeric_limits<double>::infinity();
    for (int a : valid) m = std::max(m, z(s, a));
    double total = 0.0;
    for (int a : valid) total += p(s, a) = std::exp(z(s, a) - m);
    for (int a : valid) p(s, a) /= total;
  }
  return p;
}

RegularizedObjective::RegularizedObjective(Mdp mdp, PolicyMatrix expert, FeatureMap features, double lambda,
                                           const PolicyMatrix& sampling)
    : mdp_(std::move(mdp)), expert_(std::move(expert)), features_(std::move(features)), lambda_(lambda) {
  if (!(lambda_ >= 0.0)) throw std::invalid_argument("RegularizedObjective: lambda must be non-negative");
  if (features_.num_states() != mdp_.num_states())
    throw std::invalid_argument("RegularizedObjective: feature map does not cover the MDP");
  if (expert_.rows() != mdp_.num_states() || expert_.cols() != mdp_.num_actions())
    throw std::invalid_argument("RegularizedObjective: expert policy has the wrong shape");
  d_ = stationary_distribution(mdp_, sampling).dist;
}

RegularizedObjective RegularizedObjective::with_sampling(const PolicyMatrix& sampling) const {
  return RegularizedObjective(mdp_, expert_, features_, lambda_, sampling);
}

double RegularizedObjective::value(const MatrixXd& theta) const {
  const MatrixXd p = linear_policy(mdp_, features_, theta);
  double total = 0.0;
  for (int s = 0; s < mdp_.num_states(); ++s) {
    double h = 0.0;
    for (int a : mdp_.valid_actions(s))
      if (expert_(s, a) > 0.0) h -= expert_(s, a) * std::log(p(s, a));
    total += d_(s) * h;
  }
  return total + 0.5 * lambda_ * theta.squaredNorm();
}

MatrixXd expected_gradient(const RegularizedObjective& obj, const MatrixXd& theta) {
  const MatrixXd p = linear_policy(obj.mdp(), obj.features(), theta);
  const MatrixXd residual = obj.weighting().asDiagonal() * (p - obj.expert().probs());
  return obj.features().matrix().transpose() * residual + obj.lambda() * theta;
}

namespace {

double step_size(const RegularizedObjective& obj) {
  const double max_sq = obj.features().matrix().rowwise().squaredNorm().maxCoeff();
  return 1.0 / (obj.lambda() + 0.5 * max_sq);
}

MatrixXd stochastic_solve(const RegularizedObjective& obj, MatrixXd theta, const FixedPointOptions& options) {
  Rng rng(options.seed);
  const Mdp& mdp = obj.mdp();
  const MatrixXd& phi = obj.features().matrix();
  const VectorXd& d = obj.weighting();
  const std::int64_t start_avg =
      static_cast<std::int64_t>(std::floor(options.average_from * static_cast<double>(options.stochastic_steps)));
  MatrixXd avg = MatrixXd::Zero(theta.rows(), theta.cols());
  std::int64_t averaged = 0;
  VectorXd z(mdp.num_actions());
  for (std::int64_t t = 0; t < options.stochastic_steps; ++t) {
    const int s = sample_categorical(rng, d.data(), static_cast<int>(d.size()));
    const auto& valid = mdp.valid_actions(s);
    z.noalias() = theta.transpose() * phi.row(s).transpose();
    double m = -std::numeric_limits<double>::infinity();
    for (int a : valid) m = std::max(m, z(a));
    double total = 0.0;
    for (int a : valid) total += z(a) = std::exp(z(a) - m);
    const double alpha = options.schedule.rate(t);
    theta *= 1.0 - alpha * obj.lambda();
    for (int a : valid) {
      const double r = z(a) / total - obj.expert()(s, a);
      theta.col(a) -= alpha * r * phi.row(s).transpose();
    }
    if (t >= start_avg) {
      avg += theta;
      ++averaged;
    }
  }
  return averaged > 0 ? MatrixXd(avg / static_cast<double>(averaged)) : theta;
}

}  // namespace

FixedPointReport solve_fixed_point(const RegularizedObjective& obj, const std::vector<MatrixXd>& inits,
                                   const FixedPointOptions& options) {
  if (!(obj.lambda() > 0.0)) throw std::invalid_argument("solve_fixed_point: lambda must be positive");
  if (inits.empty()) throw std::invalid_argument("solve_fixed_point: no initial points");
  const double alpha = step_size(obj);
  FixedPointReport report;
  report.converged = true;
  for (const MatrixXd& init : inits) {
    if (init.rows() != obj.rows() || init.cols() != obj.cols())
      throw std::invalid_argument("solve_fixed_point: init has the wrong shape");
    MatrixXd theta = init;
    double step = std::numeric_limits<double>::infinity();
    int it = 0;
    while (it < options.max_iters && step > options.tol) {
      const MatrixXd delta = alpha * expected_gradient(obj, theta);
      theta -= delta;
      step = delta.norm();
      ++it;
    }
    report.converged = report.converged && step <= options.tol;
    report.iterations = std::max(report.iterations, it);
    report.final_step = std::max(report.final_step, step);
    report.endpoints.push_back(std::move(theta));
  }
  for (std::size_t i = 0; i < report.endpoints.size(); ++i)
    for (std::size_t j = i + 1; j < report.endpoints.size(); ++j)
      report.max_pairwise = std::max(report.max_pairwise, (report.endpoints[i] - report.endpoints[j]).norm());
  report.theta = report.endpoints.front();
  report.gradient_norm = expected_gradient(obj, report.theta).norm();
  if (options.stochastic) {
    report.stochastic_theta = stochastic_solve(obj, inits.front(), options);
    report.stochastic_distance = (*report.stochastic_theta - report.theta).norm();
  }
  return report;
}

ContractionReport adaptive_policy_iteration(const RegularizedObjective& obj, const MatrixXd& theta0,
                                            const PolicyIterationOptions& options) {
  if (options.outer_iters < 1) throw std::invalid_argument("adaptive_policy_iteration: outer_iters < 1");
  const Mdp& mdp = obj.mdp();
  const MatrixXd& phi = obj.features().matrix();
  auto gamma = [&](const MatrixXd& theta) {
    return gamma_operator(phi * theta, mdp, options.epsilon, options.temperature);
  };

  ContractionReport report{.policy = gamma(theta0)};
  report.lambda = obj.lambda();
  report.epsilon = options.epsilon;
  report.temperature = options.temperature;
  MatrixXd theta = theta0;
  int increases = 0;
  for (int k = 0; k < options.outer_iters; ++k) {
    theta = solve_fixed_point(obj.with_sampling(report.policy), {theta}, options.inner).theta;
    PolicyMatrix next = gamma(theta);
    const double dist = (next.probs() - report.policy.probs()).norm();
    if (!report.distances.empty()) increases = dist > report.distances.back() ? increases + 1 : 0;
    report.distances.push_back(dist);
    report.policy = std::move(next);
    report.outer_iterations = k + 1;
    if (increases >= 3) report.oscillating = true;
    if (dist <= options.tol) {
      report.converged = true;
      break;
    }
  }
  for (std::size_t k = 2; k < report.distances.size(); ++k) {
    const double prev = report.distances[k - 1];
    const double cur = report.distances[k];
    if (prev < options.ratio_floor || cur < options.ratio_floor) continue;
    report.ratios.push_back(cur / prev);
    report.modulus = std::max(report.modulus, cur / prev);
  }
  report.contraction_verified = report.modulus < 1.0 && !report.oscillating;
  report.theta = solve_fixed_point(obj.with_sampling(report.policy), {theta}, options.inner).theta;
  report.fixed_point_residual = (gamma(report.theta).probs() - report.policy.probs()).norm();
  return report;
}

std::vector<LemmaPair> random_lemma_pairs(const Mdp& mdp, const FeatureMap& features, int count,
                                          std::uint64_t seed, double epsilon, double temperature,
                                          double scale) {
  Rng rng(seed);
  auto draw = [&] {
    MatrixXd t(features.dim(), mdp.num_actions());
    for (Eigen::Index i = 0; i < t.size(); ++i) t.data()[i] = scale * (2.0 * uniform01(rng) - 1.0);
    return t;
  };
  std::vector<LemmaPair> out;
  for (int i = 0; i < count; ++i) {
    MatrixXd t1 = draw();
    MatrixXd t2 = draw();
    PolicyMatrix p1 = gamma_operator(features.matrix() * t1, mdp, epsilon, temperature);
    PolicyMatrix p2 = gamma_operator(features.matrix() * t2, mdp, epsilon, temperature);
    out.push_back({std::move(t1), std::move(t2), std::move(p1), std::move(p2)});
  }
  return out;
}

LemmaConstants estimate_lemma_constants(const Mdp& mdp, const FeatureMap& features,
                                        const std::vector<LemmaPair>& pairs) {
  constexpr double kDegenerate = 1e-14;
  LemmaConstants out;
  for (const LemmaPair& pair : pairs) {
    const double dpi = (pair.pi1.probs() - pair.pi2.probs()).norm();
    const double dz = (features.matrix() * (pair.theta1 - pair.theta2)).norm();
    if (dpi < kDegenerate && dz < kDegenerate) {
      ++out.skipped;
      continue;
    }
    if (dpi >= kDegenerate) {
      const VectorXd d1 = stationary_distribution(mdp, pair.pi1).dist;
      const VectorXd d2 = stationary_distribution(mdp, pair.pi2).dist;
      const double r = (d1 - d2).norm() / dpi;
      out.ratios_d.push_back(r);
      out.c_d = std::max(out.c_d, r);
      out.finite = out.finite && std::isfinite(r);
    }
    if (dz >= kDegenerate) {
      const MatrixXd p1 = linear_policy(mdp, features, pair.theta1);
      const MatrixXd p2 = linear_policy(mdp, features, pair.theta2);
      const double r = (p1 - p2).norm() / dz;
      out.ratios_j.push_back(r);
      out.c_j = std::max(out.c_j, r);
      out.finite = out.finite && std::isfinite(r);
      out.within_bound = out.within_bound && r <= out.c_j_bound;
    }
  }
  return out;
}

StudyInstance study_instance(int num_states, std::uint64_t seed, int feature_dim) {
  RandomMdpSpec spec;
  spec.num_states = num_states;
  spec.num_actions = 3;
  spec.branching = 2;
  spec.seed = seed;
  Mdp mdp = build_random_mdp(spec);
  FeatureMap features = random_features(num_states, feature_dim, 100 + seed);
  PolicyMatrix expert = gamma_operator(value_iteration(mdp), mdp, 0.0, 1.0);
  return {std::move(mdp), std::move(features), std::move(expert)};
}

FixedPointStudy fixed_point_study(const FixedPointStudyConfig& config) {
  const int n = config.instances;
  FixedPointStudy out;
  out.sizes.resize(n);
  out.pairwise.resize(n);
  out.stochastic.resize(n);
  parallel_for(n, config.jobs, [&](int i) {
    const std::uint64_t seed = config.seed + static_cast<std::uint64_t>(i);
    const int states = 5 + i % 6;
    const StudyInstance inst = study_instance(states, seed);
    const RegularizedObjective obj(inst.mdp, inst.expert, inst.features, config.lambda,
                                   PolicyMatrix::uniform(inst.mdp));
    Rng rng(seed);
    std::vector<MatrixXd> inits;
    for (int k = 0; k < config.inits; ++k) {
      MatrixXd t(obj.rows(), obj.cols());
      for (Eigen::Index j = 0; j < t.size(); ++j) t.data()[j] = config.init_scale * (2.0 * uniform01(rng) - 1.0);
      inits.push_back(std::move(t));
    }
    FixedPointOptions opts = config.options;
    opts.stochastic = true;
    opts.seed = seed;
    const FixedPointReport r = solve_fixed_point(obj, inits, opts);
    out.sizes[i] = states;
    out.pairwise[i] = r.converged ? r.max_pairwise : std::numeric_limits<double>::infinity();
    out.stochastic[i] = r.stochastic_distance;
  });
  for (int i = 0; i < n; ++i) {
    out.worst_pairwise = std::max(out.worst_pairwise, out.pairwise[i]);
    out.worst_stochastic = std::max(out.worst_stochastic, out.stochastic[i]);
    out.agreeing += out.pairwise[i] <= config.agreement_tol;
    out.stochastic_within += out.stochastic[i] <= config.stochastic_tol;
  }
  return out;
}

ContractionStudy contraction_study(const ContractionStudyConfig& config) {
  const int n = config.instances;
  ContractionStudy out;
  out.moduli.resize(n);
  out.residuals.resize(n);
  out.outer_iterations.resize(n);
  std::vector<int> ok(n, 0);
  parallel_for(n, config.jobs, [&](int i) {
    const StudyInstance inst = study_instance(config.num_states, config.seed + static_cast<std::uint64_t>(i));
    const RegularizedObjective obj(inst.mdp, inst.expert, inst.features, config.lambda,
                                   PolicyMatrix::uniform(inst.mdp));
    const ContractionReport r = adaptive_policy_iteration(obj, MatrixXd::Zero(obj.rows(), obj.cols()), config.options);
    out.moduli[i] = r.modulus;
    out.residuals[i] = r.fixed_point_residual;
    out.outer_iterations[i] = r.outer_iterations;
    ok[i] = r.contraction_verified && r.converged && r.fixed_point_residual <= config.residual_tol;
  });
  for (int i = 0; i < n; ++i) {
    out.verified += ok[i];
    out.worst_modulus = std::max(out.worst_modulus, out.moduli[i]);
    out.worst_residual = std::max(out.worst_residual, out.residuals[i]);
  }
  return out;
}

LemmaStudy lemma_study(const LemmaStudyConfig& config) {
  LemmaStudy out;
  for (int i = 0; i < config.instances; ++i) {
    const std::uint64_t seed = config.seed + static_cast<std::uint64_t>(i);
    const StudyInstance inst = study_instance(config.num_states, seed);
    const LemmaConstants c = estimate_lemma_constants(
        inst.mdp, inst.features, random_lemma_pairs(inst.mdp, inst.features, config.pairs_per_instance, seed));
    LemmaConstants& all = out.constants;
    all.c_d = std::max(all.c_d, c.c_d);
    all.c_j = std::max(all.c_j, c.c_j);
    all.ratios_d.insert(all.ratios_d.end(), c.ratios_d.begin(), c.ratios_d.end());
    all.ratios_j.insert(all.ratios_j.end(), c.ratios_j.begin(), c.ratios_j.end());
    all.skipped += c.skipped;
    all.within_bound = all.within_bound && c.within_bound;
    all.finite = all.finite && c.finite;
  }
  return out;
}

std::vector<double> cost_to_go(const Mdp& mdp, const PolicyMatrix& policy, const std::vector<int>& horizons) {
  int longest = 0;
  for (int t : horizons) {
    if (t < 0) throw std::invalid_argument("cost_to_go: negative horizon");
    longest = std::max(longest, t);
  }
  const MatrixXd chain = policy_transition_matrix(mdp, policy);
  const VectorXd reward = policy.probs().cwiseProduct(mdp.reward_matrix()).rowwise().sum();
  VectorXd d = VectorXd::Zero(mdp.num_states());
  for (int s : mdp.start_states()) d(s) += 1.0 / static_cast<double>(mdp.start_states().size());
  std::vector<double> prefix(longest + 1, 0.0);
  for (int t = 0; t < longest; ++t) {
    prefix[t + 1] = prefix[t] - d.dot(reward);
    d = chain.transpose() * d;
  }
  std::vector<double> out;
  out.reserve(horizons.size());
  for (int t : horizons) out.push_back(prefix[t]);
  return out;
}

CurveFit fit_growth(const std::vector<int>& horizons, const std::vector<double>& gaps) {
  if (horizons.size() != gaps.size()) throw std::invalid_argument("fit_growth: length mismatch");
  double sxx = 0.0, sx3 = 0.0, sx4 = 0.0, sxg = 0.0, sx2g = 0.0;
  for (std::size_t i = 0; i < gaps.size(); ++i) {
    const double x = horizons[i];
    sxx += x * x;
    sx3 += x * x * x;
    sx4 += x * x * x * x;
    sxg += x * gaps[i];
    sx2g += x * x * gaps[i];
  }
  CurveFit fit;
  if (sxx > 0.0) {
    fit.linear_coef = sxg / sxx;
    fit.quadratic_coef = sx2g / sx4;
    const double det = sxx * sx4 - sx3 * sx3;
    if (det > 0.0) {
      fit.mixed_linear = (sxg * sx4 - sx3 * sx2g) / det;
      fit.mixed_quadratic = (sxx * sx2g - sx3 * sxg) / det;
    }
  }
  for (std::size_t i = 0; i < gaps.size(); ++i) {
    const double x = horizons[i];
    fit.linear_rss += std::pow(gaps[i] - fit.linear_coef * x, 2);
    fit.quadratic_rss += std::pow(gaps[i] - fit.quadratic_coef * x * x, 2);
  }
  return fit;
}

bool CostToGoSeed::direction_holds() const {
  return from_amn.fit.linear_better() && from_expert.fit.mixed_quadratic > from_amn.fit.mixed_quadratic;
}

int CostToGoReport::direction_count() const {
  return static_cast<int>(std::count_if(seeds.begin(), seeds.end(),
                                        [](const CostToGoSeed& s) { return s.direction_holds(); }));
}

CostToGoReport cost_to_go_comparison(const Game& game, const ExpertBundle& expert,
                                     const CostToGoConfig& config) {
  const Mdp& mdp = game.mdp;
  const FeatureMap features = one_hot_features(mdp.num_states());
  const PolicyMatrix expert_policy = gamma_operator(expert.q, mdp, 0.0);
  const std::vector<double> expert_cost = cost_to_go(mdp, expert_policy, config.horizons);

  CostToGoReport report;
  report.game = game.name;
  report.horizons = config.horizons;
  const VectorXd v = state_values(mdp, expert.q);
  for (int s = 0; s < mdp.num_states(); ++s) {
    if (mdp.is_terminal(s)) continue;
    for (int a : mdp.valid_actions(s)) report.margin_u = std::max(report.margin_u, v(s) - expert.q(s, a));
  }

  const DistillTask task{&game, &features, &expert};
  auto run_arm = [&](SampleSource source, std::uint64_t seed) {
    AmnConfig cfg = config.amn;
    cfg.source = source;
    const AmnResult r = train_amn({task}, cfg, seed, "cost_to_go");
    CostToGoArm arm;
    arm.source = to_string(source);
    const std::vector<double> cost = cost_to_go(mdp, r.model.greedy(mdp, features, 0.0), config.horizons);
    for (std::size_t i = 0; i < cost.size(); ++i) arm.gaps.push_back(cost[i] - expert_cost[i]);
    arm.fit = fit_growth(config.horizons, arm.gaps);
    arm.final_loss = r.metrics.last("cost_to_go", game.name, "policy_loss");
    return arm;
  };
  for (std::uint64_t seed : config.seeds) {
    CostToGoSeed row;
    row.seed = seed;
    row.from_amn = run_arm(SampleSource::FromAmn, seed);
    row.from_expert = run_arm(SampleSource::FromExpert, seed);
    report.seeds.push_back(std::move(row));
  }
  return report;
}

}  // namespace amimic
