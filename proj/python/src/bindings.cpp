#include "amimic/actor_mimic.hpp"
#include "amimic/harness.hpp"

#include <pybind11/eigen.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

namespace py = pybind11;
using namespace amimic;

namespace {

const Game& find_game(const std::vector<Game>& games, const std::string& name) {
  for (const Game& g : games)
    if (g.name == name) return g;
  throw py::key_error("unknown game '" + name + "'");
}

std::vector<Game> all_games() {
  std::vector<Game> out = build_game_suite();
  for (Game& g : build_transfer_targets()) out.push_back(std::move(g));
  return out;
}

py::dict pipeline_result(const PipelineResult& r) {
  py::dict d;
  d["completed"] = r.completed;
  d["failed_stage"] = r.failed_stage;
  d["error"] = r.error;
  d["ok"] = r.ok();
  return d;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Actor-Mimic experiments: games, experts, distillation and the experiment harness.";
  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);

  m.def("suite_games", [] {
    std::vector<std::string> names;
    for (const Game& g : build_game_suite()) names.push_back(g.name);
    return names;
  });
  m.def("transfer_targets", [] {
    std::vector<std::pair<std::string, std::string>> out;
    for (const Game& g : build_transfer_targets()) out.emplace_back(g.name, std::string(tier_name(g.tier)));
    return out;
  });
  m.def(
      "optimal_q",
      [](const std::string& game) {
        const std::vector<Game> games = all_games();
        return value_iteration(find_game(games, game).mdp);
      },
      py::arg("game"), "Optimal action values (states x 8 moves); invalid actions are zero.");
  m.def(
      "expected_return",
      [](const std::string& game, const MatrixXd& q, double epsilon) {
        const std::vector<Game> games = all_games();
        const Mdp& mdp = find_game(games, game).mdp;
        return expected_return(mdp, gamma_operator(q, mdp, epsilon));
      },
      py::arg("game"), py::arg("q"), py::arg("epsilon") = 0.05,
      "Exact discounted return of the epsilon-greedy policy of q.");
  m.def("boltzmann_policy", &boltzmann_policy, py::arg("q"), py::arg("valid"), py::arg("tau") = 1.0);

  m.def(
      "canonical_config",
      [](const std::string& text) {
        const ExperimentConfig c = parse_config(text);
        c.validate();
        return config_to_json(c);
      },
      py::arg("json_text"), "Validates a config (missing fields take defaults) and returns its canonical JSON.");
  m.def("default_config", [] { return config_to_json(ExperimentConfig{}); });
  m.def(
      "config_hash", [](const std::string& text) { return config_hash(parse_config(text)); }, py::arg("json_text"));
  m.def(
      "run_pipeline",
      [](const std::string& text, const std::string& output_dir, int jobs) {
        ExperimentConfig c = parse_config(text);
        if (!output_dir.empty()) c.output_dir = output_dir;
        PipelineResult r;
        {
          py::gil_scoped_release release;
          r = run_pipeline(c, jobs);
        }
        return pipeline_result(r);
      },
      py::arg("json_text"), py::arg("output_dir") = "", py::arg("jobs") = 1);
  m.def(
      "verify",
      [](const std::string& dir) {
        const VerifyReport r = verify_results(dir);
        py::dict d;
        d["ok"] = r.ok();
        d["checked"] = r.checked;
        d["mismatched"] = r.mismatched;
        d["missing"] = r.missing;
        d["unlisted"] = r.unlisted;
        return d;
      },
      py::arg("dir"));
  m.def(
      "summarize", [](const std::string& dir) { return summarize_results(dir).render(); }, py::arg("dir"));
}
