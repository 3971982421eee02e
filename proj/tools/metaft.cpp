#include <CLI11.hpp>

#include <iostream>
#include <map>
#include <sstream>

#include "mft/error.hpp"
#include "mft/pipeline.hpp"

namespace {

std::string key_table() {
  std::ostringstream out;
  out << "\nConfig keys (flat key = value with [section] headers; defaults shown):\n";
  std::size_t w = 0;
  for (const auto& k : mft::config_registry()) w = std::max(w, k.name.size());
  for (const auto& k : mft::config_registry()) {
    out << "  " << k.name << std::string(w - k.name.size() + 2, ' ') << "= "
        << (k.default_value.empty() ? "(unset)" : k.default_value) << "\n"
        << "  " << std::string(w + 4, ' ') << k.help << "\n";
  }
  return out.str();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Meta fine-tuning with a GNN metric module for cross-domain few-shot learning"};
  app.set_version_flag("--version", mft::kVersion);
  app.footer(key_table());
  app.require_subcommand(1);

  std::string config_path, out_dir = "out", method, shots;
  std::optional<std::int64_t> seed;
  std::optional<std::size_t> episodes;
  std::vector<std::string> sets;

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", config_path, "config file (key = value with [sections])")->check(CLI::ExistingFile);
    sub->add_option("--seed", seed, "training seed (run.seed)");
    sub->add_option("--out", out_dir, "output directory")->capture_default_str();
    sub->add_option("--episodes", episodes, "episode count of this command");
    sub->add_option("--set", sets, "extra override, KEY=VALUE (repeatable)");
  };
  CLI::App* pretrain = app.add_subcommand("pretrain", "episodic pretraining on the source domain");
  CLI::App* metatrain = app.add_subcommand("metatrain", "meta fine-tuning on the source domain");
  CLI::App* evaluate = app.add_subcommand("evaluate", "evaluate methods on the target domains");
  CLI::App* ablation = app.add_subcommand("ablation", "four-method ladder plus shot comparison");
  CLI::App* exporter = app.add_subcommand("export-synthetic", "write the synthetic domains as image folders");
  for (auto* sub : {pretrain, metatrain, evaluate, ablation, exporter}) add_common(sub);
  evaluate->add_option("--method", method, "comma-separated methods (eval.methods)");
  for (auto* sub : {evaluate, ablation})
    sub->add_option("--shots", shots, "support shots per class")->check(CLI::IsMember({"5", "20", "50"}));

  CLI11_PARSE(app, argc, argv);

  try {
    mft::Config cfg = config_path.empty() ? mft::Config{} : mft::Config::load(config_path);
    for (const auto& kv : sets) {
      const auto eq = kv.find('=');
      if (eq == std::string::npos) throw mft::ConfigError("--set expects KEY=VALUE, got " + kv);
      cfg.set(kv.substr(0, eq), kv.substr(eq + 1));
    }
    if (seed) cfg.set("run.seed", std::to_string(*seed));
    const std::map<CLI::App*, std::string> episode_key = {{pretrain, "pretrain.episodes"},
                                                          {metatrain, "metatrain.episodes"},
                                                          {evaluate, "eval.episodes"},
                                                          {ablation, "ablation.episodes"}};
    CLI::App* cmd = app.get_subcommands().front();
    if (episodes) {
      auto it = episode_key.find(cmd);
      if (it == episode_key.end()) throw mft::ConfigError("--episodes does not apply to " + cmd->get_name());
      cfg.set(it->second, std::to_string(*episodes));
    }
    if (!method.empty()) cfg.set("eval.methods", method);
    if (!shots.empty()) cfg.set(cmd == ablation ? "ablation.shot" : "eval.shots", shots);

    const mft::RunConfig run = mft::parse_run_config(cfg);
    if (cmd == pretrain) mft::cmd_pretrain(run, out_dir, std::cout);
    else if (cmd == metatrain) mft::cmd_metatrain(run, out_dir, std::cout);
    else if (cmd == evaluate) mft::cmd_evaluate(run, out_dir, std::cout);
    else if (cmd == ablation) mft::cmd_ablation(run, out_dir, std::cout);
    else mft::cmd_export_synthetic(run, out_dir, std::cout);
  } catch (const mft::ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 2;
  } catch (const mft::IoError& e) {
    std::cerr << "i/o error: " << e.what() << '\n';
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
