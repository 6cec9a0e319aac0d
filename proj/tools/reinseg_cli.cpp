#include "reinseg/checkpoint.hpp"
#include "reinseg/config.hpp"
#include "reinseg/datagen.hpp"
#include "reinseg/image_io.hpp"
#include "reinseg/metrics.hpp"
#include "reinseg/model.hpp"
#include "reinseg/rng.hpp"
#include "reinseg/train.hpp"

#include "CLI11.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>

namespace fs = std::filesystem;
using namespace reinseg;

namespace {

struct CommonFlags {
  std::string config_path;
  std::string preset;
  std::vector<std::string> sets;
  std::uint64_t seed = 0;
  bool seed_given = false;
  std::string out;
  bool out_given = false;
  bool force = false;
  bool single_thread = false;
};

RunConfig assemble_config(const CommonFlags& f) {
  RunConfig cfg =
      f.preset.empty() ? RunConfig::defaults() : RunConfig::from_preset(preset_from_string(f.preset));
  if (!f.config_path.empty()) cfg.apply_file(f.config_path);
  for (const std::string& s : f.sets) cfg.apply_set(s);
  if (f.seed_given) cfg.set("seed", std::to_string(f.seed));
  if (f.out_given) cfg.set("out", f.out);
  if (f.single_thread) cfg.set("single_thread", "true");
  return cfg;
}

void print_run_header(const RunConfig& cfg, const std::string& command) {
  TrainConfig tc = cfg.train();
  ModelConfig mc = cfg.model();
  std::cout << "command: " << command << "\n"
            << "preset: " << to_string(tc.preset) << "\n"
            << "iterations: " << tc.iterations << "  batch_size: " << tc.batch_size
            << "  crop_size: " << tc.crop_size << "\n"
            << "lr_backbone: " << tc.lr_backbone << "  lr_rein: " << tc.lr_rein
            << "  lr_head: " << tc.lr_head << "\n"
            << "backbone: " << to_string(mc.backbone.kind) << " L=" << mc.backbone.layers
            << " c=" << mc.backbone.width << " patch=" << mc.backbone.patch
            << " input=" << mc.backbone.input << (mc.backbone_frozen ? " (frozen)" : " (trainable)")
            << "\n"
            << "rein: " << (mc.rein_enabled ? "enabled" : "disabled");
  if (mc.rein_enabled)
    std::cout << " tokens=" << mc.adapter.tokens << " rank=" << mc.adapter.rank
              << " query_dim=" << mc.adapter.query_dim;
  std::cout << "\nseed: " << cfg.seed() << "  out: " << cfg.out_dir() << "\n";
}

int cmd_gen_data(const CommonFlags& flags) {
  RunConfig cfg = assemble_config(flags);
  DataProtocolConfig data = cfg.data();
  fs::path root(data.dir);
  if (fs::exists(root) && !fs::is_empty(root)) {
    if (!flags.force)
      throw ValidationError("dataset directory " + data.dir +
                            " exists and is not empty; pass --force to regenerate");
    fs::remove_all(root);
  }

  std::uint64_t domain_seed = derive_seed(cfg.seed(), 0xd0d0);
  std::vector<DomainSpec> seen = default_seen_domains(domain_seed);
  std::vector<DomainSpec> unseen = default_unseen_domains(domain_seed);

  std::vector<ImageSample> train_set;
  for (const DomainSpec& spec : seen) {
    std::vector<ImageSample> s = generate_domain(spec, data.train_per_domain, data.image_size);
    train_set.insert(train_set.end(), s.begin(), s.end());
  }

  // Test draws come from a separate stream so test images never duplicate
  // training ones, including for the three seen domains.
  std::vector<ImageSample> test_set;
  std::vector<DomainSpec> all = seen;
  all.insert(all.end(), unseen.begin(), unseen.end());
  for (DomainSpec spec : all) {
    spec.seed = derive_seed(spec.seed, 0x7e57);
    std::vector<ImageSample> s = generate_domain(spec, data.test_per_domain, data.image_size);
    test_set.insert(test_set.end(), s.begin(), s.end());
  }

  save_dataset_dir((root / "train").string(), train_set);
  save_dataset_dir((root / "test").string(), test_set);
  std::cout << "wrote " << train_set.size() << " training samples (" << seen.size()
            << " domains) and " << test_set.size() << " test samples (" << all.size()
            << " domains, " << unseen.size() << " unseen) under " << data.dir << "\n";
  return 0;
}

int cmd_train(const CommonFlags& flags) {
  RunConfig cfg = assemble_config(flags);
  print_run_header(cfg, "train");
  DataProtocolConfig data = cfg.data();
  std::string train_dir = (fs::path(data.dir) / "train").string();
  if (!fs::is_directory(train_dir))
    throw IoError("training dataset not found at " + train_dir + " (run gen-data first)");
  std::vector<ImageSample> dataset = load_dataset_dir(train_dir);

  SegModel model = SegModel::build(cfg.model());
  TrainConfig tc = cfg.train();
  std::cout << param_report(model, tc).table();

  std::string out_dir = cfg.out_dir();
  fs::create_directories(out_dir);
  std::ofstream log(fs::path(out_dir) / "train.log");
  if (!log) throw IoError("cannot write training log under " + out_dir);
  log << "iter,loss,lr_rein,lr_head\n";

  try {
    TrainResult result = train(model, cfg, dataset, out_dir, &log);
    std::cout << "initial loss: " << result.initial_loss
              << "  final loss (smoothed): " << result.final_loss_smoothed << "\n"
              << "best validation score " << result.best_val_score << " at iteration "
              << result.best_iteration << "\n"
              << "checkpoints: " << result.best_checkpoint << ", " << result.final_checkpoint
              << "\n";
  } catch (const TrainAbort& e) {
    std::ofstream diag(fs::path(out_dir) / "abort.txt");
    diag << e.what() << "\n";
    throw;
  }
  return 0;
}

int cmd_eval(const CommonFlags& flags, std::string ckpt_path, std::string dataset_dir) {
  RunConfig cli_cfg = assemble_config(flags);
  if (ckpt_path.empty()) ckpt_path = (fs::path(cli_cfg.out_dir()) / "best.ckpt").string();
  if (dataset_dir.empty()) dataset_dir = (fs::path(cli_cfg.data().dir) / "test").string();

  LoadedCheckpoint ckpt = load_checkpoint(ckpt_path);
  std::vector<ImageSample> samples = load_dataset_dir(dataset_dir);

  fs::path out_dir(cli_cfg.out_dir());
  fs::path pred_dir = out_dir / "predictions";
  fs::create_directories(pred_dir);

  std::vector<MetricRow> rows;
  std::map<std::string, std::vector<double>> domain_scores;
  for (const ImageSample& s : samples) {
    MaskArray pred = ckpt.model->predict_mask_full(s.image);
    write_mask_png((pred_dir / (s.sample_id + ".png")).string(), pred);
    rows.push_back(evaluate_pair(s.sample_id, pred, s.mask));
    domain_scores[s.domain_id].push_back(rows.back().score);
  }
  MetricReport report = make_report(std::move(rows));

  std::ofstream csv(out_dir / "report.csv");
  if (!csv) throw IoError("cannot write report.csv under " + out_dir.string());
  csv << report.to_csv();

  std::cout << "evaluated " << samples.size() << " images from " << dataset_dir << " with "
            << ckpt_path << " (iteration " << ckpt.meta.iteration << ")\n";
  for (const auto& [domain, scores] : domain_scores) {
    double acc = 0.0;
    for (double v : scores) acc += v;
    std::cout << "  " << domain << ": mean score " << acc / static_cast<double>(scores.size())
              << " over " << scores.size() << " images\n";
  }
  std::cout << "aggregate: dsc=" << report.aggregate.dsc << " miou=" << report.aggregate.miou
            << " jsc=" << report.aggregate.jsc << " score=" << report.aggregate.score << "\n"
            << "report: " << (out_dir / "report.csv").string() << "\n"
            << "predictions: " << pred_dir.string() << "\n";
  return 0;
}

int cmd_score(const CommonFlags& flags, const std::string& pred_dir, const std::string& gt_dir) {
  MetricReport report = evaluate_dirs(pred_dir, gt_dir);
  std::cout << report.to_csv();
  if (flags.out_given) {
    fs::create_directories(flags.out);
    std::ofstream csv(fs::path(flags.out) / "report.csv");
    if (!csv) throw IoError("cannot write report.csv under " + flags.out);
    csv << report.to_csv();
  }
  return 0;
}

int cmd_rank(const std::string& csv_path) {
  std::ifstream in(csv_path);
  if (!in) throw IoError("cannot read scores file: " + csv_path);
  std::map<std::string, double> scores;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    auto first = line.find(',');
    if (first == std::string::npos)
      throw ValidationError("scores line has no comma: " + line);
    std::string name = line.substr(0, first);
    std::string last = line.substr(line.find_last_of(',') + 1);
    if (name == "AGGREGATE") continue;  // synthetic mean row of report.csv
    try {
      std::size_t used = 0;
      double v = std::stod(last, &used);
      if (used != last.size()) continue;  // header line
      scores[name] = v;
    } catch (const std::exception&) {
      continue;  // header line
    }
  }
  if (scores.empty()) throw ValidationError("no scores found in " + csv_path);
  int place = 1;
  for (const auto& [name, score] : rank_teams(scores)) {
    char buf[160];
    std::snprintf(buf, sizeof(buf), "%2d. %-24s %.6f", place++, name.c_str(), score);
    std::cout << buf << "\n";
  }
  return 0;
}

int cmd_param_report(const CommonFlags& flags) {
  RunConfig cfg = assemble_config(flags);
  SegModel model = SegModel::build(cfg.model());
  std::cout << param_report(model, cfg.train()).table();
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Rein-style parameter-efficient segmentation toolkit"};
  app.require_subcommand(1);

  CommonFlags flags;
  app.add_option("--config", flags.config_path, "configuration file (key = value lines)");
  app.add_option("--preset", flags.preset, "hyperparameter preset")
      ->check(CLI::IsMember({"paper", "desk"}));
  app.add_option("--set", flags.sets, "override a config key (key=value, repeatable)");
  auto* seed_opt = app.add_option("--seed", flags.seed, "master RNG seed");
  auto* out_opt = app.add_option("--out", flags.out, "output directory");
  app.add_flag("--force", flags.force, "overwrite existing outputs");
  app.add_flag("--single-thread", flags.single_thread, "pin single-threaded execution");

  auto* gen = app.add_subcommand("gen-data", "generate the synthetic cross-domain dataset");
  gen->fallthrough();
  auto* trn = app.add_subcommand("train", "train adapter and head on the generated data");
  trn->fallthrough();
  auto* evl = app.add_subcommand("eval", "run tiled inference and score a dataset");
  evl->fallthrough();
  std::string ckpt_arg, dataset_arg;
  evl->add_option("checkpoint", ckpt_arg, "checkpoint file (default <out>/best.ckpt)");
  evl->add_option("dataset", dataset_arg, "dataset directory (default <data.dir>/test)");
  auto* scr = app.add_subcommand("score", "score prediction masks against ground truth");
  scr->fallthrough();
  std::string pred_arg, gt_arg;
  scr->add_option("pred_dir", pred_arg, "directory of predicted masks")->required();
  scr->add_option("gt_dir", gt_arg, "directory of ground-truth masks")->required();
  auto* rnk = app.add_subcommand("rank", "order a name,score CSV as a leaderboard");
  rnk->fallthrough();
  std::string scores_arg;
  rnk->add_option("scores_csv", scores_arg, "CSV of team scores")->required();
  auto* rep = app.add_subcommand("param-report", "print parameter group counts and rates");
  rep->fallthrough();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int rc = app.exit(e);
    return rc == 0 ? 0 : 1;
  }

  flags.seed_given = seed_opt->count() > 0;
  flags.out_given = out_opt->count() > 0;

  try {
    if (gen->parsed()) return cmd_gen_data(flags);
    if (trn->parsed()) return cmd_train(flags);
    if (evl->parsed()) return cmd_eval(flags, ckpt_arg, dataset_arg);
    if (scr->parsed()) return cmd_score(flags, pred_arg, gt_arg);
    if (rnk->parsed()) return cmd_rank(scores_arg);
    if (rep->parsed()) return cmd_param_report(flags);
  } catch (const TrainAbort& e) {
    std::cerr << "aborted: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
