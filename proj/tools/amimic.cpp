// amimic: run, summarize and verify experiment directories.
//
// Exit codes: 0 success, 1 invalid input (bad config or flags, missing
// results, failed verification), 2 runtime failure (a stage threw).

#include "amimic/harness.hpp"

#include <CLI11.hpp>

#include <filesystem>
#include <iostream>
#include <optional>
#include <sstream>

namespace {

constexpr int kOk = 0;
constexpr int kInvalid = 1;
constexpr int kRuntime = 2;

struct Options {
  std::string target;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::vector<std::string> stages;
  int jobs = 1;
};

std::vector<std::string> split_stages(const std::vector<std::string>& raw) {
  std::vector<std::string> out;
  for (const std::string& item : raw) {
    std::stringstream ss(item);
    std::string part;
    while (std::getline(ss, part, ','))
      if (!part.empty()) out.push_back(part);
  }
  return out;
}

int cmd_run(const Options& o) {
  amimic::ExperimentConfig config;
  try {
    config = amimic::load_config(o.target);
    if (o.seed) config.seed = *o.seed;
    if (!o.out.empty()) config.output_dir = o.out;
    if (!o.stages.empty()) config.stages = split_stages(o.stages);
    config.validate();
  } catch (const amimic::ConfigError& e) {
    std::cerr << "amimic: invalid config: " << e.what() << '\n';
    return kInvalid;
  }
  const amimic::PipelineResult r = amimic::run_pipeline(config, o.jobs);
  for (const std::string& s : r.completed) std::cout << "stage " << s << ": done\n";
  if (!r.ok()) {
    std::cerr << "amimic: stage " << r.failed_stage << " failed: " << r.error << '\n';
    return kRuntime;
  }
  std::cout << "results in " << config.output_dir << '\n';
  return kOk;
}

int cmd_summarize(const Options& o) {
  if (!std::filesystem::is_directory(o.target)) {
    std::cerr << "amimic: no such directory: " << o.target << '\n';
    return kInvalid;
  }
  amimic::Summary s;
  try {
    s = amimic::summarize_results(o.target);
  } catch (const std::runtime_error& e) {
    std::cerr << "amimic: " << e.what() << '\n';
    return kInvalid;
  }
  std::cout << s.render();
  return kOk;
}

int cmd_verify(const Options& o) {
  amimic::VerifyReport r;
  try {
    r = amimic::verify_results(o.target);
  } catch (const std::runtime_error& e) {
    std::cerr << "amimic: " << e.what() << '\n';
    return kInvalid;
  }
  for (const std::string& f : r.mismatched) std::cout << "MISMATCH " << f << '\n';
  for (const std::string& f : r.missing) std::cout << "MISSING  " << f << '\n';
  for (const std::string& f : r.unlisted) std::cout << "UNLISTED " << f << '\n';
  std::cout << (r.ok() ? "OK" : "FAILED") << ": " << r.checked << " files checked\n";
  return r.ok() ? kOk : kInvalid;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Actor-Mimic experiments"};
  app.require_subcommand(1);
  Options o;

  auto common = [&](CLI::App* sub) {
    sub->add_option("--seed", o.seed, "Override the config seed");
    sub->add_option("--out", o.out, "Output directory (overrides output_dir)");
    sub->add_option("--stage", o.stages, "Stages to run, repeatable or comma separated")->take_all();
    sub->add_option("--jobs", o.jobs, "Worker threads")->check(CLI::PositiveNumber);
  };
  CLI::App* run = app.add_subcommand("run", "Run the stages of a config file");
  run->add_option("config", o.target, "Config JSON")->required();
  common(run);
  CLI::App* summarize = app.add_subcommand("summarize", "Print result tables of a run directory");
  summarize->add_option("dir", o.target, "Results directory")->required();
  common(summarize);
  CLI::App* verify = app.add_subcommand("verify", "Check files against manifest.json");
  verify->add_option("dir", o.target, "Results directory")->required();
  common(verify);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kInvalid;
  }
  try {
    if (*run) return cmd_run(o);
    if (*summarize) return cmd_summarize(o);
    return cmd_verify(o);
  } catch (const std::exception& e) {
    std::cerr << "amimic: " << e.what() << '\n';
    return kRuntime;
  }
}
