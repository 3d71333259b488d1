#include "amimic/mdp.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <queue>
#include <sstream>

namespace amimic {

namespace {

constexpr double kRowTol = 1e-12;

std::string describe_policy(const MatrixXd& probs) {
  std::ostringstream os;
  os.precision(4);
  os << "policy [";
  for (Eigen::Index s = 0; s < probs.rows(); ++s) {
    if (s > 0) os << "; ";
    for (Eigen::Index a = 0; a < probs.cols(); ++a) {
      if (a > 0) os << ' ';
      os << probs(s, a);
    }
  }
  os << ']';
  return os.str();
}

std::vector<int> bfs_reach(const MatrixXd& p, bool reverse) {
  const int n = static_cast<int>(p.rows());
  std::vector<int> level(n, -1);
  std::queue<int> queue;
  level[0] = 0;
  queue.push(0);
  while (!queue.empty()) {
    const int u = queue.front();
    queue.pop();
    for (int v = 0; v < n; ++v) {
      const double w = reverse ? p(v, u) : p(u, v);
      if (w > 0.0 && level[v] < 0) {
        level[v] = level[u] + 1;
        queue.push(v);
      }
    }
  }
  return level;
}

}  // namespace

double uniform01(Rng& rng) {
  return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

int uniform_index(Rng& rng, int n) {
  return static_cast<int>(uniform01(rng) * n);
}

int sample_categorical(Rng& rng, const double* weights, int n) {
  double total = 0.0;
  for (int i = 0; i < n; ++i) total += weights[i];
  double u = uniform01(rng) * total;
  int last_positive = 0;
  for (int i = 0; i < n; ++i) {
    if (weights[i] <= 0.0) continue;
    last_positive = i;
    if (u < weights[i]) return i;
    u -= weights[i];
  }
  return last_positive;
}

std::uint64_t derive_seed(std::uint64_t base, std::uint64_t tag) {
  std::uint64_t z = base + 0x9e3779b97f4a7c15ULL * (tag + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

Mdp::Mdp(MdpData data) : data_(std::move(data)) {
  const int ns = data_.num_states;
  const int na = data_.num_actions;
  if (ns <= 0 || na <= 0) throw std::invalid_argument("Mdp: empty state or action set");
  if (data_.valid.rows() != ns || data_.valid.cols() != na)
    throw std::invalid_argument("Mdp: valid-action mask has wrong shape");
  if (static_cast<int>(data_.transition.size()) != na)
    throw std::invalid_argument("Mdp: need one transition matrix per action");
  if (data_.reward.rows() != ns || data_.reward.cols() != na)
    throw std::invalid_argument("Mdp: reward matrix has wrong shape");
  if (static_cast<int>(data_.terminal.size()) != ns)
    throw std::invalid_argument("Mdp: terminal flags have wrong length");
  if (data_.gamma < 0.0 || data_.gamma > 1.0)
    throw std::invalid_argument("Mdp: gamma outside [0,1]");
  if (data_.horizon_cap <= 0) throw std::invalid_argument("Mdp: horizon_cap must be positive");
  if (data_.start_states.empty()) {
    for (int s = 0; s < ns; ++s)
      if (!data_.terminal[s]) data_.start_states.push_back(s);
    if (data_.start_states.empty()) data_.start_states.push_back(0);
  }
  for (int s : data_.start_states)
    if (s < 0 || s >= ns) throw std::invalid_argument("Mdp: start state out of range");

  valid_lists_.resize(ns);
  for (int a = 0; a < na; ++a) {
    const MatrixXd& t = data_.transition[a];
    if (t.rows() != ns || t.cols() != ns)
      throw std::invalid_argument("Mdp: transition matrix has wrong shape");
  }
  for (int s = 0; s < ns; ++s) {
    for (int a = 0; a < na; ++a) {
      const MatrixXd& t = data_.transition[a];
      if (!data_.valid(s, a)) continue;
      valid_lists_[s].push_back(a);
      if ((t.row(s).array() < 0.0).any())
        throw std::invalid_argument("Mdp: negative transition probability");
      const double total = t.row(s).sum();
      if (std::abs(total - 1.0) > kRowTol) {
        std::ostringstream os;
        os << "Mdp: T(.|" << s << "," << a << ") sums to " << total;
        throw std::invalid_argument(os.str());
      }
      if (data_.terminal[s] && (t(s, s) != 1.0 || data_.reward(s, a) != 0.0))
        throw std::invalid_argument("Mdp: terminal states must be zero-reward self-loops");
    }
    if (valid_lists_[s].empty()) {
      throw std::invalid_argument("Mdp: state " + std::to_string(s) + " has no valid action");
    }
  }
}

int Mdp::sample_next(int s, int a, Rng& rng) const {
  const MatrixXd& t = data_.transition[a];
  // Row access on a column-major matrix is strided; copy into a buffer.
  thread_local std::vector<double> row;
  row.resize(data_.num_states);
  for (int j = 0; j < data_.num_states; ++j) row[j] = t(s, j);
  return sample_categorical(rng, row.data(), data_.num_states);
}

PolicyMatrix::PolicyMatrix(const Mdp& mdp, MatrixXd probs) : probs_(std::move(probs)) {
  if (probs_.rows() != mdp.num_states() || probs_.cols() != mdp.num_actions())
    throw std::invalid_argument("PolicyMatrix: dimension mismatch with mdp");
  for (int s = 0; s < mdp.num_states(); ++s) {
    double total = 0.0;
    for (int a = 0; a < mdp.num_actions(); ++a) {
      const double p = probs_(s, a);
      if (!(p >= 0.0)) throw std::invalid_argument("PolicyMatrix: negative or NaN entry");
      if (p > 0.0 && !mdp.is_valid(s, a))
        throw std::invalid_argument("PolicyMatrix: mass on an invalid action");
      total += p;
    }
    if (std::abs(total - 1.0) > kRowTol)
      throw std::invalid_argument("PolicyMatrix: row " + std::to_string(s) + " does not sum to 1");
  }
}

PolicyMatrix PolicyMatrix::uniform(const Mdp& mdp) {
  MatrixXd p = MatrixXd::Zero(mdp.num_states(), mdp.num_actions());
  for (int s = 0; s < mdp.num_states(); ++s) {
    const auto& acts = mdp.valid_actions(s);
    for (int a : acts) p(s, a) = 1.0 / static_cast<double>(acts.size());
  }
  return PolicyMatrix(mdp, std::move(p));
}

MatrixXd policy_transition_matrix(const Mdp& mdp, const PolicyMatrix& policy) {
  if (policy.rows() != mdp.num_states() || policy.cols() != mdp.num_actions())
    throw std::invalid_argument("policy_transition_matrix: dimension mismatch");
  const int ns = mdp.num_states();
  MatrixXd p = MatrixXd::Zero(ns, ns);
  for (int a = 0; a < mdp.num_actions(); ++a) {
    p += policy.probs().col(a).asDiagonal() * mdp.transition_matrix(a);
  }
  return p;
}

bool is_irreducible(const MatrixXd& p) {
  const auto fwd = bfs_reach(p, false);
  const auto bwd = bfs_reach(p, true);
  return std::all_of(fwd.begin(), fwd.end(), [](int l) { return l >= 0; }) &&
         std::all_of(bwd.begin(), bwd.end(), [](int l) { return l >= 0; });
}

int chain_period(const MatrixXd& p) {
  const auto level = bfs_reach(p, false);
  const int n = static_cast<int>(p.rows());
  int g = 0;
  for (int u = 0; u < n; ++u) {
    if (level[u] < 0) continue;
    for (int v = 0; v < n; ++v) {
      if (p(u, v) > 0.0 && level[v] >= 0) g = std::gcd(g, std::abs(level[u] + 1 - level[v]));
    }
  }
  return g == 0 ? 1 : g;
}

StationaryDistribution stationary_distribution(const MatrixXd& chain, double tol, int max_iters) {
  const int n = static_cast<int>(chain.rows());
  if (!is_irreducible(chain)) throw NoStationaryDistribution("chain is reducible");
  const int period = chain_period(chain);
  if (period > 1)
    throw NoStationaryDistribution("chain is periodic (period " + std::to_string(period) + ")");

  const MatrixXd pt = chain.transpose();
  VectorXd d = VectorXd::Constant(n, 1.0 / n);
  VectorXd next(n);
  for (int it = 1; it <= max_iters; ++it) {
    next.noalias() = pt * d;
    const double residual = (next - d).lpNorm<1>();
    if (residual <= tol) return {d, residual, it};
    d = next / next.sum();
  }
  throw NoStationaryDistribution("power iteration did not converge within " +
                                 std::to_string(max_iters) + " iterations");
}

StationaryDistribution stationary_distribution(const Mdp& mdp, const PolicyMatrix& policy,
                                               double tol, int max_iters) {
  const MatrixXd chain = policy_transition_matrix(mdp, policy);
  try {
    return stationary_distribution(chain, tol, max_iters);
  } catch (const NoStationaryDistribution& e) {
    throw NoStationaryDistribution(std::string(e.what()) + " under " +
                                   describe_policy(policy.probs()));
  }
}

PolicyMatrix gamma_operator(const MatrixXd& q, const Mdp& mdp, double epsilon,
                            std::optional<double> smoothing_temp) {
  if (epsilon < 0.0 || epsilon > 1.0) throw std::invalid_argument("gamma_operator: epsilon outside [0,1]");
  if (smoothing_temp && !(*smoothing_temp > 0.0))
    throw std::invalid_argument("gamma_operator: smoothing temperature must be positive");
  if (q.rows() != mdp.num_states() || q.cols() != mdp.num_actions())
    throw std::invalid_argument("gamma_operator: Q table shape mismatch");

  MatrixXd p = MatrixXd::Zero(mdp.num_states(), mdp.num_actions());
  for (int s = 0; s < mdp.num_states(); ++s) {
    const auto& acts = mdp.valid_actions(s);
    const double n = static_cast<double>(acts.size());
    double best = -std::numeric_limits<double>::infinity();
    for (int a : acts) best = std::max(best, q(s, a));

    if (smoothing_temp) {
      double z = 0.0;
      for (int a : acts) z += std::exp((q(s, a) - best) / *smoothing_temp);
      for (int a : acts)
        p(s, a) = (1.0 - epsilon) * std::exp((q(s, a) - best) / *smoothing_temp) / z + epsilon / n;
    } else {
      const double tie_tol = 1e-12 * std::max(1.0, std::abs(best));
      int ties = 0;
      for (int a : acts) ties += (best - q(s, a) <= tie_tol);
      for (int a : acts) {
        p(s, a) = epsilon / n;
        if (best - q(s, a) <= tie_tol) p(s, a) += (1.0 - epsilon) / ties;
      }
    }
    p.row(s) /= p.row(s).sum();
  }
  return PolicyMatrix(mdp, std::move(p));
}

Trajectory sample_trajectory(const Mdp& mdp, const PolicyMatrix& policy, Rng& rng,
                             int start_state) {
  if (start_state < 0 || start_state >= mdp.num_states())
    throw std::invalid_argument("sample_trajectory: start state out of range");
  Trajectory traj;
  int s = start_state;
  double discount = 1.0;
  std::vector<double> row(mdp.num_actions());
  for (int t = 0; t < mdp.horizon_cap() && !mdp.is_terminal(s); ++t) {
    for (int a = 0; a < mdp.num_actions(); ++a) row[a] = policy(s, a);
    const int a = sample_categorical(rng, row.data(), mdp.num_actions());
    const int next = mdp.sample_next(s, a, rng);
    const double r = mdp.reward(s, a);
    traj.steps.push_back({s, a, r, next, mdp.is_terminal(next)});
    traj.total_return += discount * r;
    discount *= mdp.gamma();
    s = next;
  }
  return traj;
}

Trajectory sample_trajectory(const Mdp& mdp, const PolicyMatrix& policy, std::uint64_t seed,
                             int start_state) {
  Rng rng(seed);
  return sample_trajectory(mdp, policy, rng, start_state);
}

}  // namespace amimic
