#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "mft/adapt_eval.hpp"
#include "mft/config.hpp"
#include "mft/episodes.hpp"
#include "mft/meta_finetune.hpp"

namespace mft {

inline constexpr const char* kVersion = "metaft 0.1.0";

/// Every accepted config key with its default; the source of `--help`.
const std::vector<ConfigKey>& config_registry();

struct RunConfig {
  Config raw;
  std::uint64_t seed = 1;

  std::uint64_t synthetic_seed = 1;
  SyntheticOptions synthetic;
  std::string source_dir;                // empty: synthetic source domain
  std::vector<std::string> target_dirs;  // empty: synthetic target domains

  BackboneConfig backbone;
  GnnConfig gnn;
  std::size_t node_average_min_shot = 50;
  std::size_t n_way = 5, train_shot = 5, n_query = 15;

  OptimizerConfig outer;
  InnerLoopConfig inner;  // training-time inner loop
  InnerLoopConfig adapt;  // test-time fine-tuning of the GNN models
  AugmentationPolicy augment;
  BaselineConfig baseline;

  std::size_t pretrain_episodes = 1500, metatrain_episodes = 750, checkpoint_every = 0;
  std::string init_checkpoint;
  bool reset_outer = true;

  std::size_t eval_episodes = 600;
  std::vector<std::size_t> eval_shots;
  std::vector<std::string> eval_datasets;
  std::vector<std::string> methods;  // empty: every method whose checkpoints are given
  std::string pretrained_checkpoint, meta_checkpoint;
  std::uint64_t eval_seed = 2024;
  std::size_t workers = 1;
  bool dump_scores = true;

  std::vector<std::string> ablation_datasets;
  std::size_t ablation_shot = 20;
  std::vector<std::size_t> compare_shots;
  std::vector<std::string> compare_methods;
  std::size_t ablation_episodes = 300;

  std::uint64_t config_hash() const { return raw.hash(); }
};

RunConfig parse_run_config(const Config& config);

enum class Method { GnnNoFt, GnnSimpFt, GnnSimpFtDa, GnnMetaFtDa, BaselineFtDa, Ensemble, RandomGuess };

Method parse_method(const std::string& name);  // unknown name -> ConfigError
std::string method_name(Method m);
bool method_needs_pretrained(Method m);
bool method_needs_meta(Method m);

/// Mean accuracy (percent) with the 95% interval half-width
/// 1.96 * sample std / sqrt(n) * 100. A single episode has half-width 0.
struct ResultRow {
  std::string method;
  std::string dataset;
  std::size_t shots = 0;
  double mean = 0.0;
  double half_width = 0.0;
  std::size_t n_episodes = 0;
};

ResultRow summarize(const std::string& method, const std::string& dataset, std::size_t shots,
                    std::span<const double> accuracies);

/// Trained models available to an evaluation. The GNN states carry the
/// test-time fine-tuning settings in their `inner` field.
struct EvalModels {
  std::optional<MetaState> pretrained;
  std::optional<MetaState> meta;
};

/// Per-episode accuracies and scores of every evaluated method on one
/// (dataset, shots) pair, in episode-index order.
struct EvalBlock {
  std::string dataset;
  std::uint64_t dataset_fingerprint = 0;
  std::size_t shots = 0;
  std::vector<Method> methods;
  std::vector<std::vector<double>> accuracy;       // [method][episode]
  std::vector<std::vector<ModelScores>> scores;    // [method][episode]
  std::vector<std::vector<std::size_t>> labels;    // [episode] query labels
  std::vector<std::uint64_t> episode_fingerprints;
};

EvalBlock evaluate_block(const Dataset& dataset, std::size_t shots, std::span<const Method> methods,
                         const EvalModels& models, const RunConfig& cfg, std::size_t n_episodes);

std::vector<ResultRow> summarize_block(const EvalBlock& block);

/// All domains of a run: the source first, then the targets.
std::vector<Dataset> load_domains(const RunConfig& cfg);

void write_results_csv(const std::filesystem::path& path, std::span<const EvalBlock> blocks);
void write_episode_list(const std::filesystem::path& path, std::span<const EvalBlock> blocks);
/// One file per (method, dataset, shots): episode,query_index,model_id,label,score_0,...
void write_score_dumps(const std::filesystem::path& dir, const EvalBlock& block);
std::string format_table(std::span<const ResultRow> rows);

/// Per-episode accuracies recomputed from a score dump (argmax, lowest index on ties).
std::vector<double> accuracies_from_score_dump(const std::filesystem::path& path);

void cmd_pretrain(const RunConfig& cfg, const std::filesystem::path& out, std::ostream& log);
void cmd_metatrain(const RunConfig& cfg, const std::filesystem::path& out, std::ostream& log);
std::vector<ResultRow> cmd_evaluate(const RunConfig& cfg, const std::filesystem::path& out, std::ostream& log);
std::vector<ResultRow> cmd_ablation(const RunConfig& cfg, const std::filesystem::path& out, std::ostream& log);
void cmd_export_synthetic(const RunConfig& cfg, const std::filesystem::path& out, std::ostream& log);

}  // namespace mft
