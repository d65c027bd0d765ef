#include "CLI11.hpp"

#include <functional>
#include <iostream>
#include <memory>
#include <string>
#include <vector>

#include "owssl/owssl.hpp"

namespace {

using owssl::RunConfig;

/// Flag values plus the override rules that copy a flag into the effective
/// run configuration only when the user actually passed it, so flags layer
/// cleanly on top of --config files.
struct RunFlags {
  std::string config_path;
  std::string regularizer = "uniform";
  std::string family = "mlp";
  std::string prior_path;
  std::string out = "runs";
  owssl::ScenarioSpec scenario;
  owssl::ModelConfig model;
  owssl::TrainConfig train;
  owssl::GuardConfig guard;
  int grid = 101;
  int reps = 1;
  std::uint64_t seed = 1;
  std::vector<std::function<void(RunConfig&)>> overrides;

  RunConfig effective() const {
    RunConfig cfg;
    if (!config_path.empty()) cfg = owssl::read_run_config(config_path);
    for (const auto& apply : overrides) apply(cfg);
    return cfg;
  }
};

template <typename T, typename Setter>
void bind_option(CLI::App* cmd, RunFlags& f, const std::string& flag, T& slot,
                 Setter set, const std::string& help) {
  CLI::Option* opt = cmd->add_option(flag, slot, help);
  f.overrides.push_back([opt, &slot, set](RunConfig& cfg) {
    if (opt->count() > 0) set(cfg, slot);
  });
}

void bind_flag(CLI::App* cmd, RunFlags& f, const std::string& flag, bool& slot,
               std::function<void(RunConfig&, bool)> set,
               const std::string& help) {
  CLI::Option* opt = cmd->add_flag(flag, slot, help);
  f.overrides.push_back([opt, &slot, set](RunConfig& cfg) {
    if (opt->count() > 0) set(cfg, slot);
  });
}

void add_scenario_flags(CLI::App* cmd, RunFlags& f) {
  bind_option(cmd, f, "--classes", f.scenario.num_classes,
              [](RunConfig& c, int v) { c.scenario.num_classes = v; },
              "total number of classes");
  bind_option(cmd, f, "--unseen", f.scenario.num_unseen,
              [](RunConfig& c, int v) { c.scenario.num_unseen = v; },
              "classes held out of the label space");
  bind_option(cmd, f, "--dims", f.scenario.dims,
              [](RunConfig& c, int v) { c.scenario.dims = v; },
              "feature dimension for flat data");
  bind_option(cmd, f, "--train-per-class", f.scenario.train_per_class,
              [](RunConfig& c, int v) { c.scenario.train_per_class = v; },
              "train pool size per class");
  bind_option(cmd, f, "--test-per-class", f.scenario.test_per_class,
              [](RunConfig& c, int v) { c.scenario.test_per_class = v; },
              "test size per class");
  bind_option(cmd, f, "--separation", f.scenario.separation,
              [](RunConfig& c, double v) { c.scenario.separation = v; },
              "distance between synthetic class centers");
  bind_option(cmd, f, "--labels-per-seen", f.scenario.labels_per_seen,
              [](RunConfig& c, int v) { c.scenario.labels_per_seen = v; },
              "labels drawn per seen class");
  bind_option(cmd, f, "--label-budget", f.scenario.label_budget,
              [](RunConfig& c, int v) { c.scenario.label_budget = v; },
              "total uniform label budget (overrides per-class labels)");
  bind_option(cmd, f, "--channels", f.scenario.shape.channels,
              [](RunConfig& c, int v) { c.scenario.shape.channels = v; },
              "image channels (0 for flat data)");
  bind_option(cmd, f, "--height", f.scenario.shape.height,
              [](RunConfig& c, int v) { c.scenario.shape.height = v; },
              "image height");
  bind_option(cmd, f, "--width", f.scenario.shape.width,
              [](RunConfig& c, int v) { c.scenario.shape.width = v; },
              "image width");
}

void add_run_flags(CLI::App* cmd, RunFlags& f) {
  cmd->add_option("--config", f.config_path,
                  "json run configuration; flags override its fields");
  add_scenario_flags(cmd, f);
  bind_option(cmd, f, "--family", f.family,
              [](RunConfig& c, const std::string& v) {
                c.model.family = owssl::backbone_family_from(v);
              },
              "backbone family: mlp or conv");
  bind_option(cmd, f, "--hidden", f.model.hidden_dim,
              [](RunConfig& c, int v) { c.model.hidden_dim = v; },
              "mlp hidden width");
  bind_option(cmd, f, "--conv-channels", f.model.conv_channels,
              [](RunConfig& c, int v) { c.model.conv_channels = v; },
              "conv filter count");
  bind_flag(cmd, f, "--zero-head", f.model.zero_head,
            [](RunConfig& c, bool v) { c.model.zero_head = v; },
            "start the classifier head at zero");
  bind_option(cmd, f, "--batch", f.train.batch_size,
              [](RunConfig& c, int v) { c.train.batch_size = v; },
              "labeled batch size");
  bind_option(cmd, f, "--ratio", f.train.unlabeled_ratio,
              [](RunConfig& c, int v) { c.train.unlabeled_ratio = v; },
              "unlabeled-to-labeled batch ratio");
  bind_option(cmd, f, "--lr", f.train.learning_rate,
              [](RunConfig& c, double v) { c.train.learning_rate = v; },
              "learning rate");
  bind_option(cmd, f, "--momentum", f.train.momentum,
              [](RunConfig& c, double v) { c.train.momentum = v; },
              "sgd momentum");
  bind_option(cmd, f, "--weight-decay", f.train.weight_decay,
              [](RunConfig& c, double v) { c.train.weight_decay = v; },
              "l2 weight decay");
  bind_option(cmd, f, "--epochs", f.train.max_epochs,
              [](RunConfig& c, int v) { c.train.max_epochs = v; },
              "maximum training epochs");
  bind_option(cmd, f, "--tau", f.train.base_threshold,
              [](RunConfig& c, double v) { c.train.base_threshold = v; },
              "base confidence threshold for pseudo-labels");
  bind_option(cmd, f, "--lambda", f.train.lambda,
              [](RunConfig& c, double v) { c.train.lambda = v; },
              "weight of the batch-entropy term");
  bind_option(cmd, f, "--weak-noise", f.train.weak_noise,
              [](RunConfig& c, double v) { c.train.weak_noise = v; },
              "weak augmentation noise");
  bind_option(cmd, f, "--strong-noise", f.train.strong_noise,
              [](RunConfig& c, double v) { c.train.strong_noise = v; },
              "strong augmentation noise");
  bind_option(cmd, f, "--strong-dropout", f.train.strong_dropout,
              [](RunConfig& c, double v) { c.train.strong_dropout = v; },
              "strong augmentation dropout rate");
  bind_option(cmd, f, "--guard-threshold", f.guard.gradient_threshold,
              [](RunConfig& c, double v) { c.guard.gradient_threshold = v; },
              "largest tolerated one-epoch entropy drop");
  bind_option(cmd, f, "--guard-window", f.guard.smoothing_window,
              [](RunConfig& c, int v) { c.guard.smoothing_window = v; },
              "epochs in the smoothing window");
  bind_option(cmd, f, "--guard-offset", f.guard.rollback_offset,
              [](RunConfig& c, int v) { c.guard.rollback_offset = v; },
              "epochs to roll back past a detected drop");
  bind_option(cmd, f, "--regularizer", f.regularizer,
              [](RunConfig& c, const std::string& v) {
                c.reg_mode = owssl::regularizer_mode_from(v);
              },
              "entropy term: off, uniform, or prior");
  bind_option(cmd, f, "--prior", f.prior_path,
              [](RunConfig& c, const std::string& v) { c.prior_path = v; },
              "json file with prior class weights");
  bind_option(cmd, f, "--grid", f.grid,
              [](RunConfig& c, int v) { c.adaptation_grid = v; },
              "threshold grid size for baseline adaptation");
  CLI::Option* out_opt =
      cmd->add_option("--out", f.out, "output root for run directories")
          ->envname("OWSSL_OUT_ROOT");
  f.overrides.push_back([out_opt, &f](RunConfig& c) {
    if (out_opt->count() > 0) c.output_dir = f.out;
  });
}

void print_run(const owssl::RunLedgerRecord& r, const std::string& out_root) {
  owssl::json line{{"best_threshold", r.best_threshold},
                   {"eval", owssl::eval_to_json(r.final_eval)},
                   {"method", r.method},
                   {"run_dir", out_root + "/" + r.run_id},
                   {"run_id", r.run_id},
                   {"seed", r.seed},
                   {"stop", owssl::stop_to_json(r.stop)}};
  std::cout << line.dump() << "\n";
}

int run_main(int argc, char** argv) {
  CLI::App app{"open-world semi-supervised experiments on synthetic data"};
  app.require_subcommand(1);

  auto scenario_flags = std::make_shared<RunFlags>();
  auto* scenario_cmd = app.add_subcommand(
      "scenario", "build a data scenario and write its split manifest");
  add_scenario_flags(scenario_cmd, *scenario_flags);
  auto scenario_seed = std::make_shared<std::uint64_t>(1);
  auto scenario_out = std::make_shared<std::string>("split.jsonl");
  scenario_cmd->add_option("--seed", *scenario_seed, "scenario seed");
  scenario_cmd->add_option("--out", *scenario_out, "split manifest path");
  scenario_cmd->callback([scenario_flags, scenario_seed, scenario_out] {
    RunConfig cfg;
    for (const auto& apply : scenario_flags->overrides) apply(cfg);
    const owssl::DatasetBundle bundle =
        owssl::build_scenario(cfg.scenario, *scenario_seed);
    owssl::write_split_manifest(*scenario_out, bundle, *scenario_seed);
    owssl::json summary{
        {"labeled", bundle.labeled.size()},
        {"manifest", *scenario_out},
        {"num_classes", bundle.partition.num_classes},
        {"seen", bundle.partition.seen},
        {"test", bundle.test.size()},
        {"unlabeled", bundle.unlabeled.rows()},
        {"unseen", bundle.partition.unseen}};
    std::cout << summary.dump() << "\n";
  });

  auto train_flags = std::make_shared<RunFlags>();
  auto* train_cmd =
      app.add_subcommand("train", "run one training experiment end to end");
  add_run_flags(train_cmd, *train_flags);
  auto train_seed = std::make_shared<std::uint64_t>(1);
  train_cmd->add_option("--seed", *train_seed, "run seed");
  train_cmd->callback([train_flags, train_seed] {
    const RunConfig cfg = train_flags->effective();
    const owssl::RunLedgerRecord record =
        owssl::run_experiment(cfg, *train_seed);
    print_run(record, cfg.output_dir);
  });

  auto sweep_flags = std::make_shared<RunFlags>();
  auto* sweep_cmd = app.add_subcommand(
      "sweep", "repeat an experiment over consecutive seeds");
  add_run_flags(sweep_cmd, *sweep_flags);
  sweep_cmd->add_option("--reps", sweep_flags->reps, "number of repetitions");
  sweep_cmd->add_option("--base-seed", sweep_flags->seed, "first seed");
  sweep_cmd->callback([sweep_flags] {
    RunConfig cfg = sweep_flags->effective();
    cfg.repetitions = sweep_flags->reps;
    cfg.base_seed = sweep_flags->seed;
    const auto records = owssl::run_repetitions(cfg);
    for (const auto& r : records) print_run(r, cfg.output_dir);
  });

  auto eval_dump = std::make_shared<std::string>();
  auto* eval_cmd = app.add_subcommand(
      "eval", "score the labels stored in a prediction dump");
  eval_cmd->add_option("--dump", *eval_dump, "predictions.jsonl path")
      ->required();
  eval_cmd->callback([eval_dump] {
    const owssl::PredictionDump d = owssl::read_prediction_dump(*eval_dump);
    const owssl::EvalReport report = owssl::evaluate_open_world(
        d.labels, d.probs, d.reject_scores, d.truths, d.partition);
    std::cout << owssl::eval_to_json(report).dump() << "\n";
  });

  auto adapt_dump = std::make_shared<std::string>();
  auto adapt_threshold = std::make_shared<double>(-1.0);
  auto adapt_grid = std::make_shared<int>(101);
  auto adapt_seed = std::make_shared<std::uint64_t>(1);
  auto* adapt_cmd = app.add_subcommand(
      "adapt", "re-run reject-and-cluster adaptation on a prediction dump");
  adapt_cmd->add_option("--dump", *adapt_dump, "predictions.jsonl path")
      ->required();
  auto* fixed = adapt_cmd->add_option(
      "--threshold", *adapt_threshold,
      "fixed confidence threshold; omit to search the grid");
  adapt_cmd->add_option("--grid", *adapt_grid, "threshold grid size");
  adapt_cmd->add_option("--kmeans-seed", *adapt_seed, "clustering seed");
  adapt_cmd->callback([adapt_dump, adapt_threshold, adapt_grid, adapt_seed,
                       fixed] {
    const owssl::PredictionDump d = owssl::read_prediction_dump(*adapt_dump);
    double threshold = *adapt_threshold;
    if (fixed->count() == 0) {
      threshold = owssl::optimal_threshold_search(
                      d.probs, d.features, d.truths, d.partition,
                      owssl::threshold_grid(*adapt_grid), *adapt_seed)
                      .threshold;
    }
    const owssl::AdaptOutcome out = owssl::adapt_pipeline(
        d.probs, d.features, d.truths, d.partition, threshold, *adapt_seed);
    owssl::json line{{"eval", owssl::eval_to_json(out.report)},
                     {"threshold", threshold}};
    std::cout << line.dump() << "\n";
  });

  auto compare_paths = std::make_shared<std::vector<std::string>>();
  auto compare_chart = std::make_shared<std::string>();
  auto compare_json = std::make_shared<bool>(false);
  auto* compare_cmd = app.add_subcommand(
      "compare", "summarize run ledgers per method");
  compare_cmd->add_option("ledgers", *compare_paths, "ledger.jsonl files")
      ->required();
  compare_cmd->add_option("--chart", *compare_chart, "write an svg bar chart");
  compare_cmd->add_flag("--json", *compare_json, "print json instead of text");
  compare_cmd->callback([compare_paths, compare_chart, compare_json] {
    std::vector<owssl::RunLedgerRecord> records;
    records.reserve(compare_paths->size());
    for (const auto& p : *compare_paths) {
      records.push_back(owssl::read_run_ledger(p));
    }
    const owssl::ComparisonTable table = owssl::compare_runs(records);
    if (*compare_json) {
      std::cout << owssl::comparison_to_json(table).dump() << "\n";
    } else {
      std::cout << owssl::comparison_to_text(table);
    }
    if (!compare_chart->empty()) {
      owssl::write_comparison_chart(*compare_chart, table);
    }
  });

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run_main(argc, argv);
  } catch (const owssl::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const std::invalid_argument& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  }
}
