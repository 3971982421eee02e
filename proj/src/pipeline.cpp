#include "mft/pipeline.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <exception>
#include <functional>
#include <fstream>
#include <map>
#include <mutex>
#include <ostream>
#include <sstream>
#include <thread>

#include "mft/error.hpp"
#include "mft/ops.hpp"
#include "mft/rng.hpp"
#include "mft/tape.hpp"

namespace mft {

namespace fs = std::filesystem;

const std::vector<ConfigKey>& config_registry() {
  static const std::vector<ConfigKey> keys = {
      {"run.seed", "1", "training seed (weight init, episode streams)"},
      {"data.source", "synthetic", "source domain: synthetic, separable, or a class-per-subdirectory folder"},
      {"data.targets", "synthetic", "target domains: synthetic, or comma-separated folders"},
      {"data.synthetic_seed", "1", "seed of the procedural domains"},
      {"data.image_size", "32", "square input size; folders are center-cropped and resized to it"},
      {"data.source_classes", "24", "synthetic source class count"},
      {"data.target_classes", "12", "synthetic target class count"},
      {"data.images_per_class", "80", "synthetic images per class"},
      {"backbone.widths", "8,16,32,64", "output channels of each conv block"},
      {"backbone.kernel", "3", "odd conv kernel size (padding keeps the spatial size)"},
      {"backbone.k", "1", "trailing blocks fine-tuned by the inner loop"},
      {"gnn.proj_dim", "64", "projected feature width d_k"},
      {"gnn.gc_dim", "32", "output width of each graph-convolution layer"},
      {"gnn.depth", "2", "graph-convolution layers"},
      {"gnn.edge_hidden", "64", "width of the two edge-MLP hidden layers"},
      {"gnn.node_average_min_shot", "50", "average support nodes pairwise from this shot count (0: never)"},
      {"episode.n_way", "5", "classes per episode"},
      {"episode.train_shot", "5", "support images per class in training episodes"},
      {"episode.n_query", "15", "query images per class"},
      {"outer.optimizer", "adam", "outer optimizer: sgd or adam"},
      {"outer.learning_rate", "0.001", "outer learning rate"},
      {"outer.weight_decay", "0", "outer weight decay"},
      {"outer.momentum", "0", "SGD momentum"},
      {"inner.optimizer", "adam", "training inner-loop optimizer"},
      {"inner.learning_rate", "0.01", "training inner-loop learning rate"},
      {"inner.epochs", "5", "training inner-loop passes over the support set"},
      {"inner.batch_size", "0", "training inner-loop batch (0: support size)"},
      {"inner.steps", "", "fixed training inner step count (overrides epochs)"},
      {"inner.match_feature_norm", "true", "rescale the fine-tuned block to the support feature norm it started with"},
      {"adapt.optimizer", "adam", "test-time fine-tuning optimizer of the GNN models"},
      {"adapt.learning_rate", "0.01", "test-time fine-tuning learning rate"},
      {"adapt.epochs", "10", "test-time passes over the (augmented) support pool"},
      {"adapt.batch_size", "0", "test-time batch (0: original support size)"},
      {"adapt.match_feature_norm", "true", "rescale the fine-tuned block to the support feature norm it started with"},
      {"augment.extra_per_image", "17", "augmented variants per support image"},
      {"augment.original_weight", "3", "pool entries per original image"},
      {"augment.jitter_min", "0.6", "lower brightness/contrast factor"},
      {"augment.jitter_max", "1.4", "upper brightness/contrast factor"},
      {"augment.crop_min", "0.7", "smallest crop side fraction"},
      {"augment.crop_max", "1.0", "largest crop side fraction"},
      {"augment.flip_prob", "0.5", "horizontal flip probability where flips are label-preserving"},
      {"baseline.epochs", "20", "baseline fine-tuning epochs"},
      {"baseline.learning_rate", "0.001", "baseline Adam learning rate"},
      {"baseline.weight_decay", "0.001", "baseline Adam weight decay"},
      {"baseline.batch_size", "0", "baseline batch (0: original support size)"},
      {"baseline.k", "1", "trailing blocks fine-tuned by the baseline"},
      {"pretrain.episodes", "1500", "episodic pretraining episodes"},
      {"metatrain.episodes", "750", "meta fine-tuning episodes"},
      {"metatrain.init_checkpoint", "", "checkpoint to start meta fine-tuning from (empty: fresh init)"},
      {"metatrain.reset_optimizer", "true", "start meta fine-tuning with fresh outer optimizer moments"},
      {"train.checkpoint_every", "0", "write an intermediate checkpoint every N episodes (0: off)"},
      {"eval.episodes", "600", "evaluation episodes per dataset and shot count"},
      {"eval.shots", "5,20,50", "support shots per class"},
      {"eval.datasets", "", "target domains to evaluate (empty: all)"},
      {"eval.methods", "", "gnn_noft, gnn_simpft, gnn_simpft_da, gnn_metaft_da, baseline_ft_da, ensemble, "
                           "random_guess (empty: all with checkpoints)"},
      {"eval.pretrained_checkpoint", "", "episodically pretrained model"},
      {"eval.meta_checkpoint", "", "meta fine-tuned model"},
      {"eval.seed", "2024", "evaluation episode seed"},
      {"eval.workers", "0", "parallel episode workers (0: hardware threads)"},
      {"eval.dump_scores", "true", "write per-episode score CSVs"},
      {"ablation.datasets", "mid", "domains of the four-method ladder"},
      {"ablation.shot", "20", "ladder shot count"},
      {"ablation.compare_shots", "5,20", "shot counts of the single-model comparison"},
      {"ablation.compare_methods", "gnn_metaft_da", "methods of the single-model comparison"},
      {"ablation.episodes", "300", "episodes per ablation row"},
  };
  return keys;
}

namespace {

OptimizerConfig read_optimizer(const ConfigReader& r, const std::string& section) {
  OptimizerConfig o;
  o.kind = parse_optimizer_kind(r.str(section + ".optimizer"));
  o.learning_rate = static_cast<float>(r.real(section + ".learning_rate"));
  if (o.learning_rate < 0) throw ConfigError("config key " + section + ".learning_rate must be >= 0");
  return o;
}

void require_positive(std::size_t v, const std::string& key) {
  if (v == 0) throw ConfigError("config key " + key + " must be >= 1");
}

}  // namespace

RunConfig parse_run_config(const Config& config) {
  const ConfigReader r(config, config_registry());
  RunConfig c;
  c.raw = config;
  c.seed = static_cast<std::uint64_t>(r.integer("run.seed"));

  c.synthetic_seed = static_cast<std::uint64_t>(r.integer("data.synthetic_seed"));
  c.synthetic.image_size = r.count("data.image_size");
  c.synthetic.source_classes = r.count("data.source_classes");
  c.synthetic.target_classes = r.count("data.target_classes");
  c.synthetic.images_per_class = r.count("data.images_per_class");
  if (const auto s = r.str("data.source"); s != "synthetic") c.source_dir = s;
  if (const auto t = r.list("data.targets"); !(t.size() == 1 && t[0] == "synthetic")) c.target_dirs = t;

  c.backbone.in_height = c.backbone.in_width = c.synthetic.image_size;
  c.backbone.widths = r.count_list("backbone.widths");
  c.backbone.kernel = r.count("backbone.kernel");
  if (c.backbone.kernel % 2 == 0) throw ConfigError("config key backbone.kernel must be odd");
  c.backbone.padding = c.backbone.kernel / 2;
  if (c.backbone.widths.size() < 2) throw ConfigError("config key backbone.widths needs at least 2 blocks");
  if (c.synthetic.image_size >> c.backbone.widths.size() == 0)
    throw ConfigError("config key data.image_size too small for " + std::to_string(c.backbone.widths.size()) +
                      " pooling blocks");

  c.gnn.proj_dim = r.count("gnn.proj_dim");
  c.gnn.gc_dim = r.count("gnn.gc_dim");
  c.gnn.depth = r.count("gnn.depth");
  c.gnn.edge_hidden = r.count("gnn.edge_hidden");
  require_positive(c.gnn.proj_dim, "gnn.proj_dim");
  require_positive(c.gnn.gc_dim, "gnn.gc_dim");
  require_positive(c.gnn.depth, "gnn.depth");
  require_positive(c.gnn.edge_hidden, "gnn.edge_hidden");
  c.node_average_min_shot = r.count("gnn.node_average_min_shot");

  c.n_way = r.count("episode.n_way");
  c.train_shot = r.count("episode.train_shot");
  c.n_query = r.count("episode.n_query");
  if (c.n_way < 2) throw ConfigError("config key episode.n_way must be >= 2");
  require_positive(c.train_shot, "episode.train_shot");
  require_positive(c.n_query, "episode.n_query");
  c.gnn.n_way = c.n_way;

  c.outer = read_optimizer(r, "outer");
  c.outer.weight_decay = static_cast<float>(r.real("outer.weight_decay"));
  c.outer.momentum = static_cast<float>(r.real("outer.momentum"));

  const std::size_t k = r.count("backbone.k");
  if (k < 1 || k >= c.backbone.widths.size())
    throw ConfigError("config key backbone.k must lie in [1, " + std::to_string(c.backbone.widths.size() - 1) + "]");
  c.inner.optimizer = read_optimizer(r, "inner");
  c.inner.epochs = r.count("inner.epochs");
  c.inner.batch_size = r.count("inner.batch_size");
  if (r.has("inner.steps")) c.inner.steps = r.count("inner.steps");
  c.inner.k = k;
  c.inner.match_feature_norm = r.boolean("inner.match_feature_norm");
  c.adapt.optimizer = read_optimizer(r, "adapt");
  c.adapt.epochs = r.count("adapt.epochs");
  c.adapt.batch_size = r.count("adapt.batch_size");
  c.adapt.k = k;
  c.adapt.match_feature_norm = r.boolean("adapt.match_feature_norm");

  c.augment.extra_per_image = r.count("augment.extra_per_image");
  c.augment.original_weight = r.count("augment.original_weight");
  require_positive(c.augment.original_weight, "augment.original_weight");
  c.augment.jitter_min = static_cast<float>(r.real("augment.jitter_min"));
  c.augment.jitter_max = static_cast<float>(r.real("augment.jitter_max"));
  c.augment.crop_min = static_cast<float>(r.real("augment.crop_min"));
  c.augment.crop_max = static_cast<float>(r.real("augment.crop_max"));
  c.augment.flip_prob = static_cast<float>(r.real("augment.flip_prob"));
  if (!(c.augment.jitter_min > 0 && c.augment.jitter_min <= c.augment.jitter_max))
    throw ConfigError("config keys augment.jitter_min/jitter_max must satisfy 0 < min <= max");
  if (!(c.augment.crop_min > 0 && c.augment.crop_min <= c.augment.crop_max && c.augment.crop_max <= 1))
    throw ConfigError("config keys augment.crop_min/crop_max must satisfy 0 < min <= max <= 1");
  if (!(c.augment.flip_prob >= 0 && c.augment.flip_prob <= 1))
    throw ConfigError("config key augment.flip_prob must lie in [0, 1]");

  c.baseline.epochs = r.count("baseline.epochs");
  c.baseline.batch_size = r.count("baseline.batch_size");
  c.baseline.k = r.count("baseline.k");
  if (c.baseline.k < 1 || c.baseline.k >= c.backbone.widths.size())
    throw ConfigError("config key baseline.k must lie in [1, " + std::to_string(c.backbone.widths.size() - 1) + "]");
  c.baseline.optimizer = OptimizerConfig{OptimizerKind::Adam, static_cast<float>(r.real("baseline.learning_rate")),
                                         static_cast<float>(r.real("baseline.weight_decay"))};

  c.pretrain_episodes = r.count("pretrain.episodes");
  c.metatrain_episodes = r.count("metatrain.episodes");
  c.init_checkpoint = r.str("metatrain.init_checkpoint");
  c.reset_outer = r.boolean("metatrain.reset_optimizer");
  c.checkpoint_every = r.count("train.checkpoint_every");

  c.eval_episodes = r.count("eval.episodes");
  require_positive(c.eval_episodes, "eval.episodes");
  c.eval_shots = r.count_list("eval.shots");
  if (c.eval_shots.empty()) throw ConfigError("config key eval.shots lists no shot count");
  for (auto s : c.eval_shots) require_positive(s, "eval.shots");
  c.eval_datasets = r.list("eval.datasets");
  c.methods = r.list("eval.methods");
  for (const auto& m : c.methods) parse_method(m);
  c.pretrained_checkpoint = r.str("eval.pretrained_checkpoint");
  c.meta_checkpoint = r.str("eval.meta_checkpoint");
  c.eval_seed = static_cast<std::uint64_t>(r.integer("eval.seed"));
  c.workers = r.count("eval.workers");
  c.dump_scores = r.boolean("eval.dump_scores");

  c.ablation_datasets = r.list("ablation.datasets");
  c.ablation_shot = r.count("ablation.shot");
  require_positive(c.ablation_shot, "ablation.shot");
  c.compare_shots = r.count_list("ablation.compare_shots");
  c.compare_methods = r.list("ablation.compare_methods");
  for (const auto& m : c.compare_methods) parse_method(m);
  c.ablation_episodes = r.count("ablation.episodes");
  require_positive(c.ablation_episodes, "ablation.episodes");
  return c;
}

namespace {

const std::vector<std::pair<Method, std::string>>& method_names() {
  static const std::vector<std::pair<Method, std::string>> names = {
      {Method::GnnNoFt, "gnn_noft"},           {Method::GnnSimpFt, "gnn_simpft"},
      {Method::GnnSimpFtDa, "gnn_simpft_da"},  {Method::GnnMetaFtDa, "gnn_metaft_da"},
      {Method::BaselineFtDa, "baseline_ft_da"}, {Method::Ensemble, "ensemble"},
      {Method::RandomGuess, "random_guess"},
  };
  return names;
}

}  // namespace

Method parse_method(const std::string& name) {
  for (const auto& [m, n] : method_names())
    if (n == name) return m;
  throw ConfigError("unknown method: " + name);
}

std::string method_name(Method m) {
  for (const auto& [mm, n] : method_names())
    if (mm == m) return n;
  return "?";
}

bool method_needs_pretrained(Method m) {
  return m == Method::GnnNoFt || m == Method::GnnSimpFt || m == Method::GnnSimpFtDa || m == Method::BaselineFtDa ||
         m == Method::Ensemble;
}

bool method_needs_meta(Method m) { return m == Method::GnnMetaFtDa || m == Method::Ensemble; }

ResultRow summarize(const std::string& method, const std::string& dataset, std::size_t shots,
                    std::span<const double> accuracies) {
  ResultRow row{method, dataset, shots, 0.0, 0.0, accuracies.size()};
  if (accuracies.empty()) return row;
  double sum = 0.0;
  for (double a : accuracies) sum += a;
  const double n = double(accuracies.size());
  const double mean = sum / n;
  row.mean = mean * 100.0;
  if (accuracies.size() > 1) {
    double ss = 0.0;
    for (double a : accuracies) ss += (a - mean) * (a - mean);
    row.half_width = 1.96 * std::sqrt(ss / (n - 1.0)) / std::sqrt(n) * 100.0;
  }
  return row;
}

namespace {

double episode_accuracy(const std::vector<std::size_t>& predicted, const std::vector<std::size_t>& labels) {
  std::size_t correct = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) correct += predicted[i] == labels[i];
  return double(correct) / double(labels.size());
}

const MetaState& need(const std::optional<MetaState>& s, Method m, const char* key) {
  if (!s) throw ConfigError("missing required config key: " + std::string(key) + " (needed by method " +
                            method_name(m) + ")");
  return *s;
}

/// Scores of every requested method on one episode.
std::vector<ModelScores> run_episode(const Episode& ep, std::span<const Method> methods, const EvalModels& models,
                                     const RunConfig& cfg, bool allow_flip) {
  const std::uint64_t key = mix_key({cfg.eval_seed, hash_string(ep.dataset), ep.n_shot, ep.index});
  std::optional<SupportPool> da_pool;
  auto augmented = [&]() -> const SupportPool& {
    if (!da_pool) {
      AugmentationPolicy policy = cfg.augment;
      policy.allow_flip = allow_flip;
      da_pool = augment_support(ep.support_images, ep.support_labels, policy, mix_key({key, hash_string("augment")}));
    }
    return *da_pool;
  };
  const std::uint64_t adapt_key = mix_key({key, hash_string("adapt")});

  std::map<Method, ModelScores> cache;
  std::function<const ModelScores&(Method)> score = [&](Method m) -> const ModelScores& {
    if (auto it = cache.find(m); it != cache.end()) return it->second;
    ModelScores s;
    switch (m) {
      case Method::GnnNoFt:
        s = predict_query(unadapted_model(need(models.pretrained, m, "eval.pretrained_checkpoint")), ep);
        break;
      case Method::GnnSimpFt:
        s = predict_query(meta_model_adapt(need(models.pretrained, m, "eval.pretrained_checkpoint"),
                                           plain_pool(ep.support_images, ep.support_labels), ep.n_way, adapt_key),
                          ep);
        break;
      case Method::GnnSimpFtDa:
        s = predict_query(
            meta_model_adapt(need(models.pretrained, m, "eval.pretrained_checkpoint"), augmented(), ep.n_way, adapt_key),
            ep);
        break;
      case Method::GnnMetaFtDa:
        s = predict_query(meta_model_adapt(need(models.meta, m, "eval.meta_checkpoint"), augmented(), ep.n_way, adapt_key),
                          ep);
        break;
      case Method::BaselineFtDa:
        s = baseline_finetune_predict(need(models.pretrained, m, "eval.pretrained_checkpoint").backbone, augmented(),
                                      ep.query_images, ep.n_way, cfg.baseline, adapt_key);
        break;
      case Method::Ensemble: {
        const ModelScores& a = score(Method::GnnMetaFtDa);
        const ModelScores& b = score(Method::BaselineFtDa);
        if (a.scores.shape() != b.scores.shape()) throw ContractError("ensemble members disagree on score shape");
        NoGradScope no_grad;
        s.scores = add(softmax(a.scores), softmax(b.scores));
        break;
      }
      case Method::RandomGuess: {
        KeyedRng rng({key, hash_string("random-guess")});
        std::vector<float> v(ep.query_count() * ep.n_way);
        for (auto& x : v) x = static_cast<float>(rng.uniform01());
        s.scores = Tensor::from({ep.query_count(), ep.n_way}, std::move(v));
        break;
      }
    }
    s.model_id = method_name(m);
    return cache.emplace(m, std::move(s)).first->second;
  };

  std::vector<ModelScores> out;
  for (Method m : methods) out.push_back(score(m));
  return out;
}

/// Runs fn(i) for i in [0, n) on `workers` threads; the first exception is rethrown.
template <typename Fn>
void parallel_for(std::size_t n, std::size_t workers, Fn&& fn) {
  if (workers == 0) workers = std::max(1u, std::thread::hardware_concurrency());
  workers = std::min(workers, n);
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::mutex error_mutex;
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < workers; ++w)
    pool.emplace_back([&] {
      for (std::size_t i; (i = next.fetch_add(1)) < n;) {
        try {
          fn(i);
        } catch (...) {
          std::lock_guard lock(error_mutex);
          if (!error) error = std::current_exception();
          next = n;
        }
      }
    });
  for (auto& t : pool) t.join();
  if (error) std::rethrow_exception(error);
}

}  // namespace

EvalBlock evaluate_block(const Dataset& dataset, std::size_t shots, std::span<const Method> methods,
                         const EvalModels& models, const RunConfig& cfg, std::size_t n_episodes) {
  EvalBlock block;
  block.dataset = dataset.name;
  block.dataset_fingerprint = dataset_fingerprint(dataset);
  block.shots = shots;
  block.methods.assign(methods.begin(), methods.end());
  block.accuracy.assign(methods.size(), std::vector<double>(n_episodes));
  block.scores.assign(methods.size(), std::vector<ModelScores>(n_episodes));
  block.labels.resize(n_episodes);
  block.episode_fingerprints.resize(n_episodes);
  const EpisodeSpec spec{cfg.n_way, shots, cfg.n_query, cfg.eval_seed};

  parallel_for(n_episodes, cfg.workers, [&](std::size_t e) {
    const Episode ep = sample_episode(dataset, spec, e);
    std::vector<ModelScores> scores = run_episode(ep, methods, models, cfg, dataset.allow_flip);
    for (std::size_t m = 0; m < methods.size(); ++m) {
      block.accuracy[m][e] = episode_accuracy(argmax_rows(scores[m].scores), ep.query_labels);
      block.scores[m][e] = std::move(scores[m]);
    }
    block.labels[e] = ep.query_labels;
    block.episode_fingerprints[e] = ep.fingerprint();
  });
  return block;
}

std::vector<ResultRow> summarize_block(const EvalBlock& block) {
  std::vector<ResultRow> rows;
  for (std::size_t m = 0; m < block.methods.size(); ++m)
    rows.push_back(summarize(method_name(block.methods[m]), block.dataset, block.shots, block.accuracy[m]));
  return rows;
}

std::vector<Dataset> load_domains(const RunConfig& cfg) {
  std::vector<Dataset> out;
  const bool synthetic_targets = cfg.target_dirs.empty();
  std::vector<Dataset> synthetic;
  if (synthetic_targets || cfg.source_dir.empty())
    synthetic = generate_synthetic_domains(cfg.synthetic_seed, cfg.synthetic);

  if (cfg.source_dir == "separable") {
    out.push_back(generate_separable_task(cfg.synthetic_seed, cfg.synthetic.images_per_class, cfg.synthetic.image_size));
    out.back().name = "source";
  } else if (!cfg.source_dir.empty()) {
    out.push_back(load_image_folder(cfg.source_dir, cfg.synthetic.image_size));
    out.back().name = "source";
  } else {
    out.push_back(std::move(synthetic[0]));
  }
  if (synthetic_targets) {
    for (std::size_t i = 1; i < synthetic.size(); ++i) out.push_back(std::move(synthetic[i]));
  } else {
    for (const auto& dir : cfg.target_dirs) out.push_back(load_image_folder(dir, cfg.synthetic.image_size));
  }
  return out;
}

void write_results_csv(const fs::path& path, std::span<const EvalBlock> blocks) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << "method,dataset,shots,episode,accuracy\n";
  char buf[64];
  for (const auto& b : blocks)
    for (std::size_t m = 0; m < b.methods.size(); ++m)
      for (std::size_t e = 0; e < b.accuracy[m].size(); ++e) {
        std::snprintf(buf, sizeof buf, "%.17g", b.accuracy[m][e]);
        out << method_name(b.methods[m]) << ',' << b.dataset << ',' << b.shots << ',' << e << ',' << buf << '\n';
      }
  if (!out) throw IoError("failed writing " + path.string());
}

void write_episode_list(const fs::path& path, std::span<const EvalBlock> blocks) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << "dataset,shots,episode,fingerprint\n";
  for (const auto& b : blocks)
    for (std::size_t e = 0; e < b.episode_fingerprints.size(); ++e)
      out << b.dataset << ',' << b.shots << ',' << e << ',' << hex64(b.episode_fingerprints[e]) << '\n';
  if (!out) throw IoError("failed writing " + path.string());
}

void write_score_dumps(const fs::path& dir, const EvalBlock& block) {
  fs::create_directories(dir);
  for (std::size_t m = 0; m < block.methods.size(); ++m) {
    const fs::path path =
        dir / (method_name(block.methods[m]) + "_" + block.dataset + "_" + std::to_string(block.shots) + "shot.csv");
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("cannot write " + path.string());
    const std::size_t n_way = block.scores[m].empty() ? 0 : block.scores[m][0].scores.dim(1);
    out << "episode,query_index,model_id,label";
    for (std::size_t c = 0; c < n_way; ++c) out << ",score_" << c;
    out << '\n';
    char buf[32];
    for (std::size_t e = 0; e < block.scores[m].size(); ++e) {
      const auto& s = block.scores[m][e];
      const auto data = s.scores.data();
      for (std::size_t q = 0; q < s.scores.dim(0); ++q) {
        out << e << ',' << q << ',' << s.model_id << ',' << block.labels[e][q];
        for (std::size_t c = 0; c < n_way; ++c) {
          std::snprintf(buf, sizeof buf, "%.9g", data[q * n_way + c]);
          out << ',' << buf;
        }
        out << '\n';
      }
    }
    if (!out) throw IoError("failed writing " + path.string());
  }
}

std::vector<double> accuracies_from_score_dump(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read " + path.string());
  std::string line;
  std::getline(in, line);
  std::vector<std::size_t> correct, total;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string field;
    std::vector<std::string> f;
    while (std::getline(ss, field, ',')) f.push_back(field);
    if (f.size() < 5) throw IoError("malformed score row in " + path.string() + ": " + line);
    const std::size_t e = std::stoul(f[0]);
    const std::size_t label = std::stoul(f[3]);
    std::size_t best = 0;
    float best_v = std::stof(f[4]);
    for (std::size_t c = 1; c + 4 < f.size(); ++c) {
      const float v = std::stof(f[4 + c]);
      if (v > best_v) best_v = v, best = c;
    }
    if (e >= correct.size()) correct.resize(e + 1, 0), total.resize(e + 1, 0);
    correct[e] += best == label;
    ++total[e];
  }
  std::vector<double> acc(correct.size());
  for (std::size_t e = 0; e < acc.size(); ++e) acc[e] = double(correct[e]) / double(total[e]);
  return acc;
}

std::string format_table(std::span<const ResultRow> rows) {
  std::size_t wm = 6, wd = 7;
  for (const auto& r : rows) wm = std::max(wm, r.method.size()), wd = std::max(wd, r.dataset.size());
  std::ostringstream out;
  char buf[256];
  std::snprintf(buf, sizeof buf, "%-*s  %-*s  %5s  %-18s  %8s\n", int(wm), "method", int(wd), "dataset", "shots",
                "accuracy", "episodes");
  out << buf;
  for (const auto& r : rows) {
    char acc[64];
    std::snprintf(acc, sizeof acc, "%.2f%% +- %.2f%%", r.mean, r.half_width);
    std::snprintf(buf, sizeof buf, "%-*s  %-*s  %5zu  %-18s  %8zu\n", int(wm), r.method.c_str(), int(wd),
                  r.dataset.c_str(), r.shots, acc, r.n_episodes);
    out << buf;
  }
  return out.str();
}

namespace {

MetaState fresh_state(const RunConfig& cfg) {
  MetaState s = MetaState::init(cfg.backbone, cfg.gnn, cfg.outer, cfg.inner, cfg.seed);
  s.node_average_min_shot = cfg.node_average_min_shot;
  return s;
}

MetaState load_state(const RunConfig& cfg, const std::string& path, const char* key, bool with_optimizer) {
  if (!fs::exists(path)) throw ConfigError("config key " + std::string(key) + ": checkpoint " + path + " does not exist");
  MetaState s = fresh_state(cfg);
  load_meta_state(path, s, with_optimizer);
  return s;
}

void ensure_dir(const fs::path& out) {
  std::error_code ec;
  fs::create_directories(out, ec);
  if (ec || !fs::is_directory(out)) throw IoError("cannot create output directory " + out.string());
}

double tail_mean(const std::vector<TrainRecord>& records, std::size_t n, float TrainRecord::*field) {
  if (records.empty()) return 0.0;
  const std::size_t from = records.size() > n ? records.size() - n : 0;
  double s = 0.0;
  for (std::size_t i = from; i < records.size(); ++i) s += records[i].*field;
  return s / double(records.size() - from);
}

void train_command(const RunConfig& cfg, const fs::path& out, std::ostream& log, bool meta) {
  ensure_dir(out);
  const std::vector<Dataset> domains = load_domains(cfg);
  const Dataset& source = domains.front();
  MetaState state = fresh_state(cfg);
  const char* tag = meta ? "metatrain" : "pretrain";
  if (meta && !cfg.init_checkpoint.empty()) {
    state = load_state(cfg, cfg.init_checkpoint, "metatrain.init_checkpoint", !cfg.reset_outer);
    state.seed = cfg.seed;
  }
  const EpisodeSpec spec{cfg.n_way, cfg.train_shot, cfg.n_query, mix_key({cfg.seed, hash_string(tag)})};
  const EpisodeStream stream = [&](std::size_t i) { return sample_episode(source, spec, i); };
  const std::string name = meta ? "meta" : "pretrain";
  const CheckpointHook hook = [&](const MetaState& s, std::size_t done) {
    save_meta_state(out / (name + "_" + std::to_string(done) + ".ckpt"), s);
  };
  const std::size_t n = meta ? cfg.metatrain_episodes : cfg.pretrain_episodes;
  const auto records = meta ? train_meta(state, stream, n, cfg.checkpoint_every, hook)
                            : pretrain_episodic(state, stream, n, cfg.checkpoint_every, hook);
  const fs::path ckpt = out / (name + ".ckpt");
  save_meta_state(ckpt, state);
  write_loss_csv(out / "loss.csv", records);

  char buf[256];
  std::snprintf(buf, sizeof buf, "%s: %zu episodes on '%s' (%zu classes), last-50 query loss %.4f, accuracy %.2f%%\n",
                tag, records.size(), source.name.c_str(), source.num_classes(),
                tail_mean(records, 50, &TrainRecord::loss), 100.0 * tail_mean(records, 50, &TrainRecord::accuracy));
  log << buf << "checkpoint: " << ckpt.string() << "\nconfig hash: " << hex64(cfg.config_hash()) << '\n';
}

EvalModels load_models(const RunConfig& cfg, std::span<const Method> methods) {
  EvalModels models;
  bool want_pre = false, want_meta = false;
  for (Method m : methods) want_pre |= method_needs_pretrained(m), want_meta |= method_needs_meta(m);
  // report every missing key before touching the file system
  for (Method m : methods) {
    if (method_needs_pretrained(m) && cfg.pretrained_checkpoint.empty())
      throw ConfigError("missing required config key: eval.pretrained_checkpoint (needed by method " +
                        method_name(m) + ")");
    if (method_needs_meta(m) && cfg.meta_checkpoint.empty())
      throw ConfigError("missing required config key: eval.meta_checkpoint (needed by method " + method_name(m) + ")");
  }
  if (want_pre) {
    models.pretrained = load_state(cfg, cfg.pretrained_checkpoint, "eval.pretrained_checkpoint", false);
    models.pretrained->inner = cfg.adapt;
  }
  if (want_meta) {
    models.meta = load_state(cfg, cfg.meta_checkpoint, "eval.meta_checkpoint", false);
    models.meta->inner = cfg.adapt;
  }
  return models;
}

std::vector<Method> resolve_methods(const RunConfig& cfg) {
  std::vector<Method> methods;
  if (!cfg.methods.empty()) {
    for (const auto& name : cfg.methods) methods.push_back(parse_method(name));
    return methods;
  }
  const bool pre = !cfg.pretrained_checkpoint.empty(), meta = !cfg.meta_checkpoint.empty();
  if (pre)
    for (Method m : {Method::GnnNoFt, Method::GnnSimpFt, Method::GnnSimpFtDa}) methods.push_back(m);
  if (meta) methods.push_back(Method::GnnMetaFtDa);
  if (pre) methods.push_back(Method::BaselineFtDa);
  if (pre && meta) methods.push_back(Method::Ensemble);
  if (methods.empty())
    throw ConfigError("missing required config key: eval.pretrained_checkpoint or eval.meta_checkpoint");
  return methods;
}

std::vector<const Dataset*> select_targets(const std::vector<Dataset>& domains, const std::vector<std::string>& names) {
  std::vector<const Dataset*> out;
  if (names.empty()) {
    for (std::size_t i = 1; i < domains.size(); ++i) out.push_back(&domains[i]);
    return out;
  }
  for (const auto& n : names) {
    try {
      out.push_back(&find_dataset(domains, n));
    } catch (const Error&) {
      throw ConfigError("unknown dataset in config: " + n);
    }
  }
  return out;
}

std::string report_header(const RunConfig& cfg, std::span<const EvalBlock> blocks) {
  std::ostringstream out;
  out << "# " << kVersion << "\n# config " << hex64(cfg.config_hash()) << '\n';
  std::map<std::string, std::uint64_t> fps;
  for (const auto& b : blocks) fps[b.dataset] = b.dataset_fingerprint;
  for (const auto& [name, fp] : fps) out << "# dataset " << name << " fingerprint " << hex64(fp) << '\n';
  for (const auto& b : blocks) {
    std::uint64_t digest = hash_string(b.dataset);
    for (auto f : b.episode_fingerprints) digest = mix_key({digest, f});
    out << "# episodes " << b.dataset << ' ' << b.shots << "-shot: " << b.episode_fingerprints.size() << " (digest "
        << hex64(digest) << ")\n";
  }
  return out.str();
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::trunc | std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
  if (!out) throw IoError("failed writing " + path.string());
}

void write_block_outputs(const RunConfig& cfg, const fs::path& out, std::span<const EvalBlock> blocks) {
  write_results_csv(out / "results.csv", blocks);
  write_episode_list(out / "episodes.csv", blocks);
  if (cfg.dump_scores)
    for (const auto& b : blocks) write_score_dumps(out / "scores", b);
}

}  // namespace

void cmd_pretrain(const RunConfig& cfg, const fs::path& out, std::ostream& log) { train_command(cfg, out, log, false); }

void cmd_metatrain(const RunConfig& cfg, const fs::path& out, std::ostream& log) { train_command(cfg, out, log, true); }

std::vector<ResultRow> cmd_evaluate(const RunConfig& cfg, const fs::path& out, std::ostream& log) {
  const std::vector<Method> methods = resolve_methods(cfg);
  const EvalModels models = load_models(cfg, methods);
  ensure_dir(out);
  const std::vector<Dataset> domains = load_domains(cfg);
  std::vector<EvalBlock> blocks;
  std::vector<ResultRow> rows;
  for (const Dataset* ds : select_targets(domains, cfg.eval_datasets))
    for (std::size_t shots : cfg.eval_shots) {
      blocks.push_back(evaluate_block(*ds, shots, methods, models, cfg, cfg.eval_episodes));
      for (auto& r : summarize_block(blocks.back())) rows.push_back(r);
    }
  write_block_outputs(cfg, out, blocks);
  const std::string table = report_header(cfg, blocks) + format_table(rows);
  write_text(out / "table.txt", table);
  log << table;
  return rows;
}

std::vector<ResultRow> cmd_ablation(const RunConfig& cfg, const fs::path& out, std::ostream& log) {
  const std::vector<Method> ladder = {Method::GnnNoFt, Method::GnnSimpFt, Method::GnnSimpFtDa, Method::GnnMetaFtDa};
  std::vector<Method> compare;
  for (const auto& n : cfg.compare_methods) compare.push_back(parse_method(n));
  std::vector<Method> all = ladder;
  all.insert(all.end(), compare.begin(), compare.end());
  const EvalModels models = load_models(cfg, all);
  ensure_dir(out);
  const std::vector<Dataset> domains = load_domains(cfg);
  const auto targets = select_targets(domains, cfg.ablation_datasets);

  std::vector<EvalBlock> blocks;
  std::vector<ResultRow> ladder_rows, compare_rows;
  for (const Dataset* ds : targets) {
    blocks.push_back(evaluate_block(*ds, cfg.ablation_shot, ladder, models, cfg, cfg.ablation_episodes));
    for (auto& r : summarize_block(blocks.back())) ladder_rows.push_back(r);
  }
  if (!compare.empty())
    for (const Dataset* ds : targets)
      for (std::size_t shots : cfg.compare_shots) {
        blocks.push_back(evaluate_block(*ds, shots, compare, models, cfg, cfg.ablation_episodes));
        for (auto& r : summarize_block(blocks.back())) compare_rows.push_back(r);
      }
  write_block_outputs(cfg, out, blocks);

  std::string report = report_header(cfg, blocks);
  report += "\n## ablation ladder\n" + format_table(ladder_rows);
  if (!compare_rows.empty()) report += "\n## shot comparison\n" + format_table(compare_rows);
  write_text(out / "report.txt", report);
  log << report;
  std::vector<ResultRow> rows = ladder_rows;
  rows.insert(rows.end(), compare_rows.begin(), compare_rows.end());
  return rows;
}

void cmd_export_synthetic(const RunConfig& cfg, const fs::path& out, std::ostream& log) {
  ensure_dir(out);
  for (const auto& ds : generate_synthetic_domains(cfg.synthetic_seed, cfg.synthetic)) {
    export_image_folder(ds, out / ds.name);
    log << ds.name << ": " << ds.num_classes() << " classes x " << ds.min_class_size() << " images, fingerprint "
        << hex64(dataset_fingerprint(ds)) << '\n';
  }
}

}  // namespace mft
