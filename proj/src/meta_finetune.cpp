#include "mft/meta_finetune.hpp"

#include <cmath>
#include <fstream>

#include "mft/error.hpp"
#include "mft/ops.hpp"
#include "mft/tape.hpp"

namespace mft {

SupportPool plain_pool(const Tensor& images, std::span<const std::size_t> labels) {
  if (images.ndim() != 4 || images.dim(0) != labels.size())
    throw DimensionError("plain_pool: " + std::to_string(labels.size()) + " labels for images " +
                         shape_str(images.shape()));
  SupportPool pool;
  pool.images = images;
  pool.labels.assign(labels.begin(), labels.end());
  for (std::size_t i = 0; i < labels.size(); ++i) pool.entries.push_back(i);
  pool.base_count = labels.size();
  return pool;
}

namespace {

std::size_t inner_batch_size(const InnerLoopConfig& cfg, const SupportPool& pool) {
  return std::min(cfg.batch_size ? cfg.batch_size : pool.base_count, pool.entries.size());
}

}  // namespace

std::size_t inner_step_count(const InnerLoopConfig& cfg, const SupportPool& pool) {
  if (cfg.steps) return *cfg.steps;
  const std::size_t b = inner_batch_size(cfg, pool);
  if (b == 0) return 0;
  return cfg.epochs * ((pool.entries.size() + b - 1) / b);
}

InnerResult finetune_last_blocks(const FeatureExtractor& backbone, const SupportPool& pool, std::size_t n_way,
                                 const InnerLoopConfig& cfg, KeyedRng rng) {
  if (pool.entries.empty() || pool.labels.empty()) throw ContractError("inner fine-tuning needs a non-empty support set");
  if (pool.images.dim(0) != pool.labels.size())
    throw DimensionError("support pool holds " + std::to_string(pool.images.dim(0)) + " images for " +
                         std::to_string(pool.labels.size()) + " labels");
  for (auto l : pool.labels)
    if (l >= n_way) throw IndexError("support label " + std::to_string(l) + " out of range for " + std::to_string(n_way) + "-way");

  FeatureExtractor work = backbone.clone();
  const std::size_t L = work.num_blocks();
  split_params(work, cfg.k);
  const std::size_t first_adapted = L - cfg.k;

  Tensor prefix;
  {
    NoGradScope no_grad;
    prefix = work.forward_blocks(pool.images, 0, first_adapted);
  }

  const std::size_t feat = work.feature_dim();
  InnerResult result;
  std::vector<std::size_t> originals(pool.base_count);
  for (std::size_t i = 0; i < originals.size(); ++i) originals[i] = i;
  auto original_rms = [&] {
    NoGradScope no_grad;
    const Tensor f = work.forward_blocks(select_rows(prefix, originals), first_adapted, L);
    double sq = 0;
    for (float v : f.data()) sq += double(v) * v;
    return std::sqrt(sq / double(f.numel()));
  };
  const double rms_before = cfg.match_feature_norm ? original_rms() : 0.0;
  {
    KeyedRng init = rng.fork(hash_string("classifier"));
    const double bound = std::sqrt(6.0 / double(feat + n_way));
    std::vector<float> w(feat * n_way);
    for (auto& v : w) v = static_cast<float>(init.uniform(-bound, bound));
    result.classifier.weight = Tensor::from({feat, n_way}, std::move(w), true);
    result.classifier.bias = Tensor::zeros({n_way}, true);
  }

  std::vector<Tensor> params;
  for (std::size_t i = first_adapted; i < L; ++i) {
    params.push_back(work.blocks()[i].weight);
    params.push_back(work.blocks()[i].bias);
  }
  params.push_back(result.classifier.weight);
  params.push_back(result.classifier.bias);

  OptimizerState opt(cfg.optimizer);
  const std::size_t steps = inner_step_count(cfg, pool);
  const std::size_t batch = inner_batch_size(cfg, pool);
  KeyedRng order_rng = rng.fork(hash_string("batches"));
  std::vector<std::size_t> order;
  std::size_t cursor = 0;
  for (std::size_t step = 0; step < steps; ++step) {
    if (cursor >= order.size()) {
      order = pool.entries;
      order_rng.shuffle(std::span<std::size_t>(order));
      cursor = 0;
    }
    const std::size_t take = std::min(batch, order.size() - cursor);
    std::vector<std::size_t> rows(order.begin() + cursor, order.begin() + cursor + take);
    cursor += take;
    std::vector<std::size_t> labels;
    for (auto r : rows) labels.push_back(pool.labels[r]);

    Tape tape;
    {
      TapeScope scope(tape);
      Tensor x = select_rows(prefix, rows);
      Tensor f = reshape(work.forward_blocks(x, first_adapted, L), {rows.size(), feat});
      Tensor logits = linear(f, result.classifier.weight, result.classifier.bias);
      Tensor loss = cross_entropy(logits, labels);
      backward(loss, tape);
    }
    optimizer_step(params, opt);
    for (auto& p : params) p.zero_grad();
  }
  if (cfg.match_feature_norm && steps > 0) {
    const double rms_after = original_rms();
    if (rms_after > 0 && rms_before > 0) {
      // relu and max-pool are positively homogeneous: scaling the last conv
      // scales the features by the same factor.
      const float scale = static_cast<float>(rms_before / rms_after);
      ConvBlock& last = work.blocks()[L - 1];
      for (float& v : last.weight.mutable_data()) v *= scale;
      for (float& v : last.bias.mutable_data()) v *= scale;
    }
  }
  result.steps = steps;
  for (std::size_t i = first_adapted; i < L; ++i) result.adapted.push_back(work.blocks()[i]);
  return result;
}

MetaState MetaState::init(const BackboneConfig& backbone, const GnnConfig& gnn, const OptimizerConfig& outer,
                          const InnerLoopConfig& inner, std::uint64_t seed) {
  MetaState s;
  s.backbone = FeatureExtractor::init(backbone, seed);
  GnnConfig g = gnn;
  g.feature_dim = s.backbone.feature_dim();
  s.gnn = GnnParams::init(g, seed);
  s.outer = OptimizerState(outer);
  s.inner = inner;
  s.seed = seed;
  if (inner.k < 1 || inner.k >= s.backbone.num_blocks())
    throw ContractError("adaptable block count k=" + std::to_string(inner.k) + " outside [1, " +
                        std::to_string(s.backbone.num_blocks() - 1) + "]");
  return s;
}

std::vector<Tensor> MetaState::parameters() const {
  std::vector<Tensor> out = backbone.parameters();
  for (auto& t : gnn.parameters()) out.push_back(t);
  return out;
}

std::vector<NamedTensor> MetaState::named_parameters() const {
  std::vector<NamedTensor> out = backbone.named_parameters("backbone.");
  for (auto& nt : gnn.named_parameters("gnn.")) out.push_back(nt);
  return out;
}

MetaState MetaState::clone() const {
  MetaState c;
  c.backbone = backbone.clone();
  c.gnn = gnn.clone();
  c.outer = outer;
  c.inner = inner;
  c.node_average_min_shot = node_average_min_shot;
  c.seed = seed;
  return c;
}

InnerResult inner_finetune(const MetaState& state, const SupportPool& pool, std::size_t n_way, KeyedRng rng) {
  return finetune_last_blocks(state.backbone, pool, n_way, state.inner, rng);
}

Tensor score_queries(const GnnParams& gnn, const Tensor& support_feats, std::span<const std::size_t> support_labels,
                     const Tensor& query_feats, std::size_t n_shot, std::size_t node_average_min_shot) {
  if (node_average_min_shot > 0 && n_shot >= node_average_min_shot) {
    MergedSupport merged = average_support_pairs(support_feats, support_labels);
    return gnn_query_scores(gnn, merged.features, merged.labels, query_feats);
  }
  return gnn_query_scores(gnn, support_feats, support_labels, query_feats);
}

std::vector<std::size_t> argmax_rows(const Tensor& scores) {
  if (scores.ndim() != 2) throw DimensionError("argmax_rows: expected a 2-D score matrix");
  const std::size_t rows = scores.dim(0), cols = scores.dim(1);
  std::vector<std::size_t> out(rows);
  auto d = scores.data();
  for (std::size_t r = 0; r < rows; ++r) {
    std::size_t best = 0;
    for (std::size_t c = 1; c < cols; ++c)
      if (d[r * cols + c] > d[r * cols + best]) best = c;
    out[r] = best;
  }
  return out;
}

float accuracy_of(std::span<const std::size_t> predicted, std::span<const std::size_t> labels) {
  if (predicted.size() != labels.size() || labels.empty())
    throw DimensionError("accuracy: " + std::to_string(predicted.size()) + " predictions for " +
                         std::to_string(labels.size()) + " labels");
  std::size_t hits = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) hits += predicted[i] == labels[i];
  return static_cast<float>(double(hits) / double(labels.size()));
}

namespace {

/// Query loss through `features` and the GNN, recorded on `tape`.
Tensor query_loss(const FeatureExtractor& features, const MetaState& state, const Episode& episode, Tape& tape,
                  Tensor& scores_out) {
  TapeScope scope(tape);
  const std::size_t ns = episode.support_count(), nq = episode.query_count();
  const Tensor both[2] = {reshape(episode.support_images, {ns, episode.support_images.numel() / ns}),
                          reshape(episode.query_images, {nq, episode.query_images.numel() / nq})};
  Tensor images = concat_rows(both);
  Shape shape = episode.support_images.shape();
  shape[0] = ns + nq;
  Tensor feats = features.forward_batch(reshape(images, shape));
  std::vector<std::size_t> support_rows(ns), query_rows(nq);
  for (std::size_t i = 0; i < ns; ++i) support_rows[i] = i;
  for (std::size_t i = 0; i < nq; ++i) query_rows[i] = ns + i;
  Tensor scores = score_queries(state.gnn, select_rows(feats, support_rows), episode.support_labels,
                                select_rows(feats, query_rows), episode.n_shot, state.node_average_min_shot);
  scores_out = scores;
  return cross_entropy(scores, episode.query_labels);
}

void check_episode(const MetaState& state, const Episode& episode) {
  if (episode.n_way != state.gnn.config.n_way)
    throw ContractError("episode is " + std::to_string(episode.n_way) + "-way, model is " +
                        std::to_string(state.gnn.config.n_way) + "-way");
  if (episode.support_count() == 0 || episode.query_count() == 0) throw ContractError("episode has an empty set");
}

StepResult apply_outer_update(MetaState& state, const std::vector<Tensor>& grad_sources, const Tensor& loss,
                              const Tensor& scores, const Episode& episode) {
  std::vector<Tensor> params = state.parameters();
  std::vector<std::span<const float>> grads;
  for (const auto& g : grad_sources) grads.push_back(g.grad());
  optimizer_step(params, grads, state.outer);
  for (auto& p : params) p.zero_grad();
  StepResult r;
  r.loss = loss.item();
  r.accuracy = accuracy_of(argmax_rows(scores), episode.query_labels);
  return r;
}

}  // namespace

StepResult episodic_step(MetaState& state, const Episode& episode) {
  check_episode(state, episode);
  for (auto& p : state.parameters()) p.set_requires_grad(true);
  Tape tape;
  Tensor scores;
  Tensor loss = query_loss(state.backbone, state, episode, tape, scores);
  backward(loss, tape);
  return apply_outer_update(state, state.parameters(), loss, scores, episode);
}

StepResult meta_step(MetaState& state, const Episode& episode) {
  check_episode(state, episode);
  for (auto& p : state.parameters()) p.set_requires_grad(true);
  const SupportPool pool = plain_pool(episode.support_images, episode.support_labels);
  KeyedRng rng({state.seed, episode.fingerprint(), hash_string("inner")});
  InnerResult inner = inner_finetune(state, pool, episode.n_way, rng);

  const std::size_t L = state.backbone.num_blocks();
  const std::size_t first_adapted = L - state.inner.k;
  auto blocks = state.backbone.blocks();
  for (auto& b : inner.adapted) {
    b.weight.set_requires_grad(true);
    b.bias.set_requires_grad(true);
  }
  FeatureExtractor merged = merge_params(state.backbone.config(), blocks.subspan(0, first_adapted), inner.adapted);

  Tape tape;
  Tensor scores;
  Tensor loss = query_loss(merged, state, episode, tape, scores);
  backward(loss, tape);

  // Gradients of the frozen blocks and the GNN land on the state's own tensors;
  // those of the adapted blocks land on the copies and are applied to the
  // initial values.
  std::vector<Tensor> grad_sources = merged.parameters();
  for (auto& t : state.gnn.parameters()) grad_sources.push_back(t);

  double gap = 0.0;
  for (std::size_t i = 0; i < inner.adapted.size(); ++i) {
    const ConvBlock& init = blocks[first_adapted + i];
    const ConvBlock& adapted = inner.adapted[i];
    for (std::size_t j = 0; j < init.weight.numel(); ++j) {
      const double d = double(adapted.weight[j]) - init.weight[j];
      gap += d * d;
    }
    for (std::size_t j = 0; j < init.bias.numel(); ++j) {
      const double d = double(adapted.bias[j]) - init.bias[j];
      gap += d * d;
    }
  }

  StepResult r = apply_outer_update(state, grad_sources, loss, scores, episode);
  r.adapt_gap = static_cast<float>(std::sqrt(gap));
  return r;
}

std::vector<TrainRecord> train_meta(MetaState& state, const EpisodeStream& stream, std::size_t n_episodes,
                                    std::size_t checkpoint_every, const CheckpointHook& hook) {
  std::vector<TrainRecord> trace;
  trace.reserve(n_episodes);
  for (std::size_t i = 0; i < n_episodes; ++i) {
    const Episode ep = stream(i);
    const StepResult r = meta_step(state, ep);
    trace.push_back({i, r.loss, r.accuracy, r.adapt_gap});
    if (hook && checkpoint_every > 0 && (i + 1) % checkpoint_every == 0) hook(state, i + 1);
  }
  return trace;
}

std::vector<TrainRecord> pretrain_episodic(MetaState& state, const EpisodeStream& stream, std::size_t n_episodes,
                                           std::size_t checkpoint_every, const CheckpointHook& hook) {
  const auto saved = state.inner.steps;
  state.inner.steps = 0;
  try {
    auto trace = train_meta(state, stream, n_episodes, checkpoint_every, hook);
    state.inner.steps = saved;
    return trace;
  } catch (...) {
    state.inner.steps = saved;
    throw;
  }
}

void save_meta_state(const std::filesystem::path& path, const MetaState& state) {
  std::vector<NamedTensor> tensors = state.named_parameters();
  const std::size_t n = tensors.size();
  if (!state.outer.first.empty()) {
    const bool adam = state.outer.config.kind == OptimizerKind::Adam;
    tensors.reserve(3 * n + 1);
    for (std::size_t i = 0; i < n; ++i) {
      const NamedTensor nt = tensors[i];
      tensors.push_back({"outer.m." + nt.name, Tensor::from(nt.tensor.shape(), state.outer.first[i])});
      if (adam) tensors.push_back({"outer.v." + nt.name, Tensor::from(nt.tensor.shape(), state.outer.second[i])});
    }
    tensors.push_back({"outer.step", Tensor::scalar(static_cast<float>(state.outer.step))});
  }
  save_checkpoint(path, tensors);
}

void load_meta_state(const std::filesystem::path& path, MetaState& state, bool with_optimizer) {
  const auto tensors = load_checkpoint(path);
  state.backbone.load(tensors, "backbone.");
  state.gnn.load(tensors, "gnn.");
  state.outer.reset();
  if (!with_optimizer) return;
  bool has_opt = false;
  for (const auto& nt : tensors)
    if (nt.name == "outer.step") has_opt = true;
  if (!has_opt) return;
  const bool adam = state.outer.config.kind == OptimizerKind::Adam;
  for (const auto& nt : state.named_parameters()) {
    const Tensor& m = find_tensor(tensors, "outer.m." + nt.name);
    state.outer.first.emplace_back(m.data().begin(), m.data().end());
    if (adam) {
      const Tensor& v = find_tensor(tensors, "outer.v." + nt.name);
      state.outer.second.emplace_back(v.data().begin(), v.data().end());
    }
  }
  state.outer.step = static_cast<std::int64_t>(find_tensor(tensors, "outer.step").item());
}

void write_loss_csv(const std::filesystem::path& path, std::span<const TrainRecord> records) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write loss trace " + path.string());
  out << "episode_index,query_loss,query_accuracy,adapt_gap\n";
  char line[128];
  for (const auto& r : records) {
    std::snprintf(line, sizeof line, "%zu,%.9g,%.9g,%.9g\n", r.episode, r.loss, r.accuracy, r.adapt_gap);
    out << line;
  }
  if (!out) throw IoError("failed writing " + path.string());
}

}  // namespace mft
