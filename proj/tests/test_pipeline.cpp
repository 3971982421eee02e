#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <sys/wait.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "fixtures.hpp"
#include "mft/error.hpp"
#include "mft/pipeline.hpp"

using namespace mft;
using namespace mft::test;
namespace fs = std::filesystem;

namespace {

const char* kSmallRun = R"(# tiny end-to-end run
[run]
seed = 3
[data]
image_size = 8
source_classes = 6
target_classes = 5
images_per_class = 12
[backbone]
widths = 2,3
[gnn]
proj_dim = 4
gc_dim = 3
edge_hidden = 4
[episode]
n_way = 3
train_shot = 2
n_query = 2
[inner]
epochs = 1
[adapt]
epochs = 1
[augment]
extra_per_image = 2
[baseline]
epochs = 1
[pretrain]
episodes = 4
[metatrain]
episodes = 3
[eval]
episodes = 4
shots = 2
datasets = near
workers = 2
)";

fs::path fresh_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("mft_pipeline_" + name);
  fs::remove_all(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

RunConfig small_run(const std::vector<std::pair<std::string, std::string>>& overrides = {}) {
  Config c = Config::parse(kSmallRun);
  for (const auto& [k, v] : overrides) c.set(k, v);
  return parse_run_config(c);
}

/// Trains both checkpoints once for every test that needs them.
const fs::path& trained_dir() {
  static const fs::path dir = [] {
    const fs::path d = fresh_dir("trained");
    std::ostringstream log;
    cmd_pretrain(small_run(), d / "pre", log);
    cmd_metatrain(small_run({{"metatrain.init_checkpoint", (d / "pre" / "pretrain.ckpt").string()}}), d / "meta", log);
    return d;
  }();
  return dir;
}

RunConfig eval_run(bool with_meta, std::vector<std::pair<std::string, std::string>> extra = {}) {
  extra.push_back({"eval.pretrained_checkpoint", (trained_dir() / "pre" / "pretrain.ckpt").string()});
  if (with_meta) extra.push_back({"eval.meta_checkpoint", (trained_dir() / "meta" / "meta.ckpt").string()});
  return small_run(extra);
}

int run_cli(const std::string& args) {
  const std::string cmd = std::string(METAFT_BINARY) + " " + args + " >/dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

}  // namespace

TEST_CASE("config text parses sections, comments and overrides") {
  const Config c = Config::parse("a = 1\n[sec] ; comment\nkey = some value  # trailing\n\n[other]\nx=2\n");
  CHECK(c.find("a") == "1");
  CHECK(c.find("sec.key") == "some value");
  CHECK(c.find("other.x") == "2");
  CHECK_FALSE(c.has("sec.x"));
  Config d = c;
  d.set("other.x", "2");
  CHECK(d.hash() == c.hash());
  d.set("other.x", "3");
  CHECK(d.hash() != c.hash());
  CHECK_THROWS_AS(Config::parse("[broken\n"), ConfigError);
  CHECK_THROWS_AS(Config::parse("novalue\n"), ConfigError);
  CHECK_THROWS_AS(Config::parse("a=1\na=2\n"), ConfigError);
  CHECK_THROWS_AS(Config::load("/nonexistent/run.cfg"), IoError);
}

TEST_CASE("unknown and malformed keys are config errors naming the key") {
  Config c;
  c.set("gnn.depht", "2");
  try {
    parse_run_config(c);
    FAIL("expected a config error");
  } catch (const ConfigError& e) {
    CHECK(std::string(e.what()).find("gnn.depht") != std::string::npos);
  }
  Config bad;
  bad.set("eval.episodes", "many");
  CHECK_THROWS_WITH_AS(parse_run_config(bad), doctest::Contains("eval.episodes"), ConfigError);
  Config k;
  k.set("backbone.k", "4");
  CHECK_THROWS_AS(parse_run_config(k), ConfigError);
  Config m;
  m.set("eval.methods", "gnn_magic");
  CHECK_THROWS_WITH_AS(parse_run_config(m), doctest::Contains("gnn_magic"), ConfigError);
}

TEST_CASE("defaults match the documented registry") {
  const RunConfig c = parse_run_config(Config{});
  CHECK(c.backbone.widths == std::vector<std::size_t>{8, 16, 32, 64});
  CHECK(c.n_way == 5);
  CHECK(c.n_query == 15);
  CHECK(c.eval_episodes == 600);
  CHECK(c.eval_shots == std::vector<std::size_t>{5, 20, 50});
  CHECK(c.augment.extra_per_image == 17);
  CHECK(c.node_average_min_shot == 50);
  CHECK(c.inner.k == 1);
  for (const auto& key : config_registry()) CHECK_FALSE(key.help.empty());
}

TEST_CASE("evaluation without a needed checkpoint names the missing key") {
  std::ostringstream log;
  const fs::path out = fresh_dir("missing");
  CHECK_THROWS_WITH_AS(cmd_evaluate(small_run(), out, log), doctest::Contains("missing required config key"),
                       ConfigError);
  CHECK_THROWS_WITH_AS(cmd_evaluate(small_run({{"eval.methods", "ensemble"},
                                               {"eval.pretrained_checkpoint", "x.ckpt"}}),
                                    out, log),
                       doctest::Contains("eval.meta_checkpoint"), ConfigError);
}

TEST_CASE("summary statistics") {
  const double one[] = {0.6};
  const ResultRow r1 = summarize("m", "d", 5, one);
  CHECK(r1.mean == doctest::Approx(60.0));
  CHECK(r1.half_width == 0.0);
  const double two[] = {1.0, 0.0};
  const ResultRow r2 = summarize("m", "d", 5, two);
  CHECK(r2.mean == doctest::Approx(50.0));
  // sample std sqrt(0.5), n = 2
  CHECK(r2.half_width == doctest::Approx(1.96 * std::sqrt(0.5) / std::sqrt(2.0) * 100.0));
  const double same[] = {0.4, 0.4, 0.4};
  CHECK(summarize("m", "d", 5, same).half_width == doctest::Approx(0.0));
  CHECK(parse_method(method_name(Method::BaselineFtDa)) == Method::BaselineFtDa);
}

TEST_CASE("random guessing on 5-way episodes lands near 20 percent") {
  const Dataset ds = random_dataset(10, 20, {1, 2, 2}, 8);
  RunConfig cfg = parse_run_config(Config{});
  cfg.workers = 4;
  const Method m[] = {Method::RandomGuess};
  const EvalBlock b = evaluate_block(ds, 5, m, EvalModels{}, cfg, 600);
  const ResultRow r = summarize_block(b).front();
  INFO("mean " << r.mean << " +- " << r.half_width);
  CHECK(r.n_episodes == 600);
  CHECK(std::fabs(r.mean - 20.0) <= 3.0 * r.half_width);
  CHECK(r.half_width > 0.0);
}

TEST_CASE("training writes a checkpoint and one loss row per episode") {
  const fs::path& d = trained_dir();
  CHECK(fs::exists(d / "pre" / "pretrain.ckpt"));
  CHECK(fs::exists(d / "meta" / "meta.ckpt"));
  auto rows = [](const fs::path& p) {
    std::ifstream in(p);
    std::size_t n = 0;
    for (std::string line; std::getline(in, line);) n += !line.empty();
    return n - 1;  // header
  };
  CHECK(rows(d / "pre" / "loss.csv") == 4);
  CHECK(rows(d / "meta" / "loss.csv") == 3);
}

TEST_CASE("the ensemble row appears only when both checkpoints are given") {
  std::ostringstream log;
  const auto pre_only = cmd_evaluate(eval_run(false), fresh_dir("pre_only"), log);
  const auto both = cmd_evaluate(eval_run(true), fresh_dir("both"), log);
  auto has = [](const std::vector<ResultRow>& rows, const std::string& m) {
    return std::any_of(rows.begin(), rows.end(), [&](const ResultRow& r) { return r.method == m; });
  };
  CHECK_FALSE(has(pre_only, "ensemble"));
  CHECK_FALSE(has(pre_only, "gnn_metaft_da"));
  CHECK(has(pre_only, "baseline_ft_da"));
  CHECK(has(both, "ensemble"));
  CHECK(has(both, "gnn_metaft_da"));
  CHECK(both.size() == 6);
}

TEST_CASE("evaluation reports are byte-identical across runs and worker counts") {
  std::ostringstream log;
  const fs::path a = fresh_dir("det_a"), b = fresh_dir("det_b");
  cmd_evaluate(eval_run(true), a, log);
  cmd_evaluate(eval_run(true, {{"eval.workers", "1"}}), b, log);
  for (const char* f : {"results.csv", "episodes.csv"}) CHECK(slurp(a / f) == slurp(b / f));
  // the config hash differs (workers), the rest of the table does not
  auto strip = [](std::string s) { return s.substr(s.find('\n', s.find("# config"))); };
  CHECK(strip(slurp(a / "table.txt")) == strip(slurp(b / "table.txt")));
  for (const auto& e : fs::directory_iterator(a / "scores"))
    CHECK(slurp(e.path()) == slurp(b / "scores" / e.path().filename()));
}

TEST_CASE("accuracies recomputed from score dumps match the results") {
  const RunConfig cfg = eval_run(true);
  const auto domains = load_domains(cfg);
  const std::vector<Method> methods{Method::GnnNoFt, Method::GnnSimpFtDa, Method::GnnMetaFtDa, Method::BaselineFtDa,
                                    Method::Ensemble};
  EvalModels models;
  models.pretrained = MetaState::init(cfg.backbone, cfg.gnn, cfg.outer, cfg.adapt, cfg.seed);
  load_meta_state(trained_dir() / "pre" / "pretrain.ckpt", *models.pretrained, false);
  models.meta = models.pretrained->clone();
  load_meta_state(trained_dir() / "meta" / "meta.ckpt", *models.meta, false);
  const EvalBlock block = evaluate_block(find_dataset(domains, "near"), 2, methods, models, cfg, 5);
  const fs::path dir = fresh_dir("dumps");
  write_score_dumps(dir, block);
  for (std::size_t m = 0; m < methods.size(); ++m) {
    const auto acc = accuracies_from_score_dump(dir / (method_name(methods[m]) + "_near_2shot.csv"));
    CHECK(acc == block.accuracy[m]);
    const double* p = acc.data();
    CHECK(summarize("x", "near", 2, std::span(p, acc.size())).mean ==
          summarize_block(block)[m].mean);
  }
  CHECK(slurp(dir / "ensemble_near_2shot.csv").rfind("episode,query_index,model_id,label,score_0,score_1,score_2\n", 0) == 0);
}

TEST_CASE("ablation report holds the ladder and the shot comparison") {
  std::ostringstream log;
  const fs::path out = fresh_dir("ablation");
  const auto rows = cmd_ablation(eval_run(true, {{"ablation.datasets", "mid"},
                                                 {"ablation.shot", "2"},
                                                 {"ablation.compare_shots", "1,2"},
                                                 {"ablation.episodes", "3"}}),
                                 out, log);
  REQUIRE(rows.size() == 6);
  CHECK(rows[0].method == "gnn_noft");
  CHECK(rows[3].method == "gnn_metaft_da");
  CHECK(rows[4].shots == 1);
  const std::string report = slurp(out / "report.txt");
  CHECK(report.find("## ablation ladder") != std::string::npos);
  CHECK(report.find("## shot comparison") != std::string::npos);
  CHECK(report.find("fingerprint") != std::string::npos);
}

TEST_CASE("command line exit codes") {
  const fs::path out = fresh_dir("cli");
  CHECK(run_cli("--version") == 0);
  CHECK(run_cli("") != 0);
  CHECK(run_cli("evaluate --set no.such_key=1 --out " + out.string()) == 2);
  CHECK(run_cli("evaluate --out " + out.string()) == 2);
  CHECK(run_cli("evaluate --shots 7") != 0);
  CHECK(run_cli("evaluate --config /nonexistent.cfg") != 0);
  CHECK(run_cli("export-synthetic --episodes 3") == 2);
  fs::create_directories(out);
  std::ofstream(out / "blocker") << "x";
  CHECK(run_cli("export-synthetic --set data.image_size=16 --set data.images_per_class=2 --out " +
                (out / "blocker" / "sub").string()) == 3);
  CHECK(run_cli("export-synthetic --set data.image_size=16 --set data.images_per_class=2 --set data.source_classes=2 "
                "--set data.target_classes=2 --out " + (out / "export").string()) == 0);
  CHECK(fs::exists(out / "export" / "farthest" / "class001" / "00001.ppm"));
}
