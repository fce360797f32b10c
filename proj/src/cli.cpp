#include "advit/cli.hpp"

#include <algorithm>
#include <cstdio>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "advit/analysis.hpp"
#include "advit/io.hpp"
#include "advit/rng.hpp"

namespace advit {

namespace {

std::vector<double> parse_real_list(const std::string& text,
                                    const std::string& what) {
  std::vector<double> out;
  std::istringstream in(text);
  std::string item;
  while (std::getline(in, item, ',')) {
    try {
      size_t used = 0;
      out.push_back(std::stod(item, &used));
      if (used != item.size()) throw std::invalid_argument(item);
    } catch (const std::exception&) {
      throw Error(what + ": bad number '" + item + "'");
    }
  }
  if (out.empty()) throw Error(what + ": empty list");
  return out;
}

std::vector<int> parse_int_list(const std::string& text,
                                const std::string& what) {
  std::vector<int> out;
  for (double v : parse_real_list(text, what)) {
    if (v != static_cast<int>(v))
      throw Error(what + ": expected integers");
    out.push_back(static_cast<int>(v));
  }
  return out;
}

AttackNorm norm_from(const std::string& name) {
  if (name == "linf") return AttackNorm::Linf;
  if (name == "l2") return AttackNorm::L2;
  throw Error("unknown norm '" + name + "' (use linf or l2)");
}

// Shared across the training-style subcommands.
struct TrainArgs {
  std::string data_path, val_path, out_path;
  std::string config_path;
  std::string metrics_path;
  std::optional<std::uint64_t> seed;
};

void add_train_options(CLI::App* cmd, TrainArgs& args, bool& seed_given,
                       std::uint64_t& seed_value) {
  cmd->add_option("--data", args.data_path, "training dataset file")
      ->required();
  cmd->add_option("--val", args.val_path, "validation dataset file")
      ->required();
  cmd->add_option("--out", args.out_path, "checkpoint output path")
      ->required();
  cmd->add_option("--config", args.config_path, "experiment config file");
  cmd->add_option("--metrics", args.metrics_path, "per-epoch metrics CSV");
  cmd->add_option("--seed", seed_value, "override the recipe seed")
      ->each([&seed_given](const std::string&) { seed_given = true; });
}

int run_training(const ModelConfig& model, const TrainRecipe& recipe,
                 const TrainArgs& args, const Dataset& train_set,
                 const Dataset& val_set, const Params* initial) {
  ExperimentConfig config{model, recipe};
  TrainHistory so_far;
  auto on_epoch = [&](const EpochRecord& rec, const Params& params) {
    std::printf(
        "epoch %3d  loss %.5f  clean %.4f  fgsm %.4f  eps %.5f  lr %.3g\n",
        rec.epoch, rec.train_loss, rec.clean_val_acc, rec.fgsm_val_acc,
        rec.eps, rec.lr);
    std::fflush(stdout);
    so_far.push_back(rec);
    Checkpoint rolling{config, params, so_far, std::nullopt};
    save_checkpoint(args.out_path, rolling);
  };

  TrainResult result =
      train_model(model, train_set, val_set, recipe, on_epoch, initial);

  const int best = early_stop_select(result.history);
  std::printf("selected epoch %d (fgsm val acc %.4f)\n", best,
              result.history[best].fgsm_val_acc);
  Checkpoint final_ckpt{config, result.best_params, result.history,
                        std::move(result.opt)};
  save_checkpoint(args.out_path, final_ckpt);
  std::printf("checkpoint written to %s\n", args.out_path.c_str());
  if (!args.metrics_path.empty()) {
    write_metrics(args.metrics_path, history_table(result.history));
    std::printf("metrics written to %s\n", args.metrics_path.c_str());
  }
  return 0;
}

}  // namespace

int run_cli(int argc, char** argv) {
  CLI::App app{"adversarial-training toolkit for small vision transformers"};
  app.require_subcommand(1);

  // ----- train ------------------------------------------------------------
  TrainArgs train_args;
  bool train_seed_given = false;
  std::uint64_t train_seed = 0;
  CLI::App* train_cmd =
      app.add_subcommand("train", "adversarially train a model from scratch");
  add_train_options(train_cmd, train_args, train_seed_given, train_seed);

  // ----- finetune -----------------------------------------------------------
  TrainArgs ft_args;
  bool ft_seed_given = false;
  std::uint64_t ft_seed = 0;
  std::string ft_ckpt;
  bool ft_adapt = false;
  CLI::App* ft_cmd = app.add_subcommand(
      "finetune", "continue training from a checkpoint");
  ft_cmd->add_option("--ckpt", ft_ckpt, "starting checkpoint")->required();
  ft_cmd->add_flag("--adapt-low-res", ft_adapt,
                   "retarget a conv-stack model to low-resolution inputs");
  add_train_options(ft_cmd, ft_args, ft_seed_given, ft_seed);

  // ----- attack -------------------------------------------------------------
  std::string atk_ckpt, atk_data, atk_algo = "pgd", atk_norm = "linf";
  std::string atk_out;
  double atk_eps = 8.0 / 255.0;
  int atk_steps = 10;
  std::uint64_t atk_seed = 0;
  CLI::App* atk_cmd = app.add_subcommand(
      "attack", "evaluate robust accuracy under one attack");
  atk_cmd->add_option("--ckpt", atk_ckpt, "model checkpoint")->required();
  atk_cmd->add_option("--data", atk_data, "evaluation dataset")->required();
  atk_cmd->add_option("--algo", atk_algo, "fgsm | pgd | apgd");
  atk_cmd->add_option("--norm", atk_norm, "linf | l2");
  atk_cmd->add_option("--eps", atk_eps, "perturbation budget");
  atk_cmd->add_option("--steps", atk_steps, "attack iterations");
  atk_cmd->add_option("--seed", atk_seed, "attack randomness seed");
  atk_cmd->add_option("--out", atk_out, "metrics CSV path");

  // ----- sweep-eps ------------------------------------------------------------
  std::string sw_ckpt, sw_data, sw_list = "0,0.05,0.1,0.2,0.4,0.8", sw_out;
  int sw_steps = 10;
  std::uint64_t sw_seed = 0;
  CLI::App* sw_cmd = app.add_subcommand(
      "sweep-eps", "robust accuracy across growing budgets");
  sw_cmd->add_option("--ckpt", sw_ckpt, "model checkpoint")->required();
  sw_cmd->add_option("--data", sw_data, "evaluation dataset")->required();
  sw_cmd->add_option("--eps-list", sw_list, "comma-separated budgets");
  sw_cmd->add_option("--steps", sw_steps, "attack iterations per budget");
  sw_cmd->add_option("--seed", sw_seed, "attack randomness seed");
  sw_cmd->add_option("--out", sw_out, "curve CSV path");

  // ----- effectiveness ---------------------------------------------------------
  std::string ef_ckpt, ef_data, ef_klist = "1,2,5,10", ef_mode = "independent";
  std::string ef_out;
  int ef_oracle = 200, ef_runs = 3;
  double ef_eps = 8.0 / 255.0;
  std::uint64_t ef_seed = 0;
  CLI::App* ef_cmd = app.add_subcommand(
      "effectiveness", "relative strength of few-step attacks vs an oracle");
  ef_cmd->add_option("--ckpt", ef_ckpt, "model checkpoint")->required();
  ef_cmd->add_option("--data", ef_data, "evaluation dataset")->required();
  ef_cmd->add_option("--k-list", ef_klist, "step counts to measure");
  ef_cmd->add_option("--oracle-steps", ef_oracle, "oracle attack length");
  ef_cmd->add_option("--eps", ef_eps, "perturbation budget");
  ef_cmd->add_option("--mode", ef_mode, "independent | shared");
  ef_cmd->add_option("--runs", ef_runs, "repetitions for the interval");
  ef_cmd->add_option("--seed", ef_seed, "randomness seed");
  ef_cmd->add_option("--out", ef_out, "report CSV path");

  // ----- visualize ---------------------------------------------------------------
  std::string viz_ckpt, viz_data, viz_out;
  int viz_target = -1, viz_index = 0, viz_steps = 100;
  double viz_eps = -1.0;
  bool viz_gray = false;
  std::uint64_t viz_seed = 0;
  CLI::App* viz_cmd = app.add_subcommand(
      "visualize", "dump a class visualization or a rescaled perturbation");
  viz_cmd->add_option("--ckpt", viz_ckpt, "model checkpoint")->required();
  viz_cmd->add_option("--out", viz_out, "output image (pgm/ppm)")->required();
  viz_cmd->add_option("--target", viz_target,
                      "class to visualize (omit for perturbation mode)");
  viz_cmd->add_option("--data", viz_data, "dataset for perturbation mode");
  viz_cmd->add_option("--index", viz_index, "sample index to perturb");
  viz_cmd->add_option("--eps", viz_eps,
                      "budget (default 15 for class mode, 4/255 otherwise)");
  viz_cmd->add_option("--steps", viz_steps, "attack iterations");
  viz_cmd->add_flag("--gray", viz_gray, "average channels before writing");
  viz_cmd->add_option("--seed", viz_seed, "randomness seed");

  // ----- gen-data ------------------------------------------------------------------
  std::string gd_out;
  BlobSpec gd_spec;
  CLI::App* gd_cmd = app.add_subcommand(
      "gen-data", "write a synthetic two-class dataset with a known margin");
  gd_cmd->add_option("--out", gd_out, "dataset output path")->required();
  gd_cmd->add_option("--count", gd_spec.count, "number of images");
  gd_cmd->add_option("--height", gd_spec.height, "image height");
  gd_cmd->add_option("--width", gd_spec.width, "image width");
  gd_cmd->add_option("--channels", gd_spec.channels, "image channels");
  gd_cmd->add_option("--margin", gd_spec.margin, "class separation");
  gd_cmd->add_option("--seed", gd_spec.seed, "sampling seed");

  // ----- inspect -----------------------------------------------------------------
  std::string ins_path;
  CLI::App* ins_cmd =
      app.add_subcommand("inspect", "print checkpoint or dataset metadata");
  ins_cmd->add_option("path", ins_path, "checkpoint or dataset file")
      ->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    app.exit(e);
    return 0;
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    if (*train_cmd) {
      const Dataset train_set = load_dataset(train_args.data_path);
      const Dataset val_set = load_dataset(train_args.val_path);
      ExperimentConfig config;
      if (!train_args.config_path.empty()) {
        config = parse_config_file(train_args.config_path);
      } else {
        config = light_preset();
        config.model.image_h = train_set.height();
        config.model.image_w = train_set.width();
        config.model.image_c = train_set.channels();
        config.model.num_classes = train_set.num_classes;
      }
      if (train_seed_given) config.recipe.seed = train_seed;
      return run_training(config.model, config.recipe, train_args, train_set,
                          val_set, nullptr);
    }

    if (*ft_cmd) {
      Checkpoint ckpt = load_checkpoint(ft_ckpt);
      const Dataset train_set = load_dataset(ft_args.data_path);
      const Dataset val_set = load_dataset(ft_args.val_path);
      ModelConfig model = ckpt.config.model;
      TrainRecipe recipe = ft_args.config_path.empty()
                               ? ckpt.config.recipe
                               : parse_config_file(ft_args.config_path).recipe;
      if (ft_seed_given) recipe.seed = ft_seed;
      if (ft_adapt) {
        model.image_h = train_set.height();
        model.image_w = train_set.width();
        model.image_c = train_set.channels();
        model.num_classes = train_set.num_classes;
        model = adapt_low_res(model);
      }
      return run_training(model, recipe, ft_args, train_set, val_set,
                          &ckpt.params);
    }

    if (*atk_cmd) {
      Checkpoint ckpt = load_checkpoint(atk_ckpt);
      const Dataset data = load_dataset(atk_data);
      ModelHandle handle = make_handle(ckpt.config.model, ckpt.params);
      AttackSpec spec;
      spec.norm = norm_from(atk_norm);
      spec.epsilon = atk_eps;
      spec.steps = atk_steps;
      if (atk_algo == "fgsm") spec.step_rule = StepSizeRule::FgsmFullBudget;
      spec.validate();

      int clean_ok = 0, robust_ok = 0;
      for (int i = 0; i < data.size(); ++i) {
        const Tensor x = data.image(i);
        const int label = data.labels[i];
        EvalResult clean = handle.eval(x, label, false);
        const int pred = static_cast<int>(
            std::max_element(clean.logits.begin(), clean.logits.end()) -
            clean.logits.begin());
        clean_ok += pred == label;
        spec.seed = derive_seed(atk_seed, 0xC1EA, i);
        AttackResult res;
        if (atk_algo == "fgsm")
          res = fgsm(handle, x, label, spec);
        else if (atk_algo == "pgd")
          res = pgd(handle, x, label, spec);
        else if (atk_algo == "apgd")
          res = apgd_ce(handle, x, label, spec);
        else
          throw Error("unknown attack '" + atk_algo +
                      "' (use fgsm, pgd, or apgd)");
        robust_ok += !res.success;
      }
      const double clean_acc = static_cast<double>(clean_ok) / data.size();
      const double robust_acc = static_cast<double>(robust_ok) / data.size();
      std::printf("samples %d  eps %.6f  clean %.4f  robust %.4f\n",
                  data.size(), atk_eps, clean_acc, robust_acc);
      if (!atk_out.empty()) {
        MetricsTable t;
        t.columns = {"epsilon", "clean_acc", "robust_acc"};
        t.rows.push_back({atk_eps, clean_acc, robust_acc});
        write_metrics(atk_out, t);
      }
      return 0;
    }

    if (*sw_cmd) {
      Checkpoint ckpt = load_checkpoint(sw_ckpt);
      const Dataset data = load_dataset(sw_data);
      ModelHandle handle = make_handle(ckpt.config.model, ckpt.params);
      AttackSpec spec;
      spec.steps = sw_steps;
      spec.seed = sw_seed;
      SweepCurve curve = eps_sweep(
          handle, data, parse_real_list(sw_list, "--eps-list"), spec);
      MetricsTable t;
      t.columns = {"epsilon", "robust_acc"};
      for (const SweepPoint& p : curve.points) {
        std::printf("eps %.6f  robust %.4f\n", p.epsilon, p.robust_acc);
        t.rows.push_back({p.epsilon, p.robust_acc});
      }
      if (!sw_out.empty()) write_metrics(sw_out, t);
      return 0;
    }

    if (*ef_cmd) {
      Checkpoint ckpt = load_checkpoint(ef_ckpt);
      const Dataset data = load_dataset(ef_data);
      ModelHandle handle = make_handle(ckpt.config.model, ckpt.params);
      EffectivenessOptions opt;
      opt.k_list = parse_int_list(ef_klist, "--k-list");
      opt.oracle_steps = ef_oracle;
      opt.epsilon = ef_eps;
      opt.runs = ef_runs;
      opt.seed = ef_seed;
      if (ef_mode == "independent")
        opt.mode = EffectivenessMode::IndependentRuns;
      else if (ef_mode == "shared")
        opt.mode = EffectivenessMode::SharedTrajectory;
      else
        throw Error("unknown mode '" + ef_mode +
                    "' (use independent or shared)");
      EffectivenessReport rep = attack_effectiveness(handle, data, opt);
      MetricsTable t;
      t.columns = {"k", "mean_d", "ci_half_width", "mean_abs_d"};
      for (const EffectivenessEntry& e : rep.entries) {
        std::printf("k %3d  mean d %+.6f +/- %.6f  |d| %.6f\n", e.k, e.mean_d,
                    e.ci_half_width, e.mean_abs_d);
        t.rows.push_back(
            {static_cast<double>(e.k), e.mean_d, e.ci_half_width,
             e.mean_abs_d});
      }
      if (!ef_out.empty()) write_metrics(ef_out, t);
      return 0;
    }

    if (*viz_cmd) {
      Checkpoint ckpt = load_checkpoint(viz_ckpt);
      if (viz_target >= 0) {
        const double eps = viz_eps > 0.0 ? viz_eps : 15.0;
        Tensor image =
            feature_visualization(ckpt.config.model, ckpt.params, viz_target,
                                  eps, viz_steps, viz_seed);
        if (viz_gray && image.extent(2) != 1) {
          Tensor gray(Shape{image.extent(0), image.extent(1), 1});
          for (int y = 0; y < image.extent(0); ++y)
            for (int x = 0; x < image.extent(1); ++x) {
              double acc = 0.0;
              for (int ch = 0; ch < image.extent(2); ++ch)
                acc += image(y, x, ch);
              gray(y, x, 0) = acc / image.extent(2);
            }
          image = gray;
        }
        write_image(viz_out, image);
        std::printf("class visualization written to %s\n", viz_out.c_str());
        return 0;
      }
      if (viz_data.empty())
        throw Error("visualize needs --target or --data with --index");
      const Dataset data = load_dataset(viz_data);
      if (viz_index < 0 || viz_index >= data.size())
        throw Error("--index out of range");
      ModelHandle handle = make_handle(ckpt.config.model, ckpt.params);
      AttackSpec spec;
      spec.epsilon = viz_eps > 0.0 ? viz_eps : 4.0 / 255.0;
      spec.steps = viz_steps;
      spec.seed = viz_seed;
      AttackResult res =
          pgd(handle, data.image(viz_index), data.labels[viz_index], spec);
      write_image(viz_out,
                  scale_perturbation(res.delta, spec.epsilon, viz_gray));
      std::printf("perturbation image written to %s (attack %s)\n",
                  viz_out.c_str(), res.success ? "succeeded" : "failed");
      return 0;
    }

    if (*gd_cmd) {
      Dataset data = generate_blobs(gd_spec);
      save_dataset(gd_out, data);
      std::printf("wrote %d images (%dx%dx%d, 2 classes, margin %.3f) to %s\n",
                  data.size(), gd_spec.height, gd_spec.width,
                  gd_spec.channels, gd_spec.margin, gd_out.c_str());
      return 0;
    }

    if (*ins_cmd) {
      try {
        Checkpoint ckpt = load_checkpoint(ins_path);
        size_t scalars = 0;
        for (const auto& [name, tensor] : ckpt.params)
          scalars += tensor.data.size();
        std::printf("checkpoint: %zu tensors, %zu scalars, %zu history "
                    "records, optimizer %s\n",
                    ckpt.params.size(), scalars, ckpt.history.size(),
                    ckpt.optimizer ? "present" : "absent");
        if (!ckpt.history.empty()) {
          const int best = early_stop_select(ckpt.history);
          std::printf("best epoch %d (fgsm val acc %.4f)\n", best,
                      ckpt.history[best].fgsm_val_acc);
        }
        std::printf("--- config ---\n%s",
                    render_config(ckpt.config).c_str());
        return 0;
      } catch (const Error&) {
        // Fall through: maybe it is a dataset file.
      }
      Dataset data = load_dataset(ins_path);
      std::printf("dataset: %d images, %dx%dx%d, %d classes\n", data.size(),
                  data.height(), data.width(), data.channels(),
                  data.num_classes);
      return 0;
    }
  } catch (const std::exception& e) {
    std::fprintf(stderr, "advit: %s\n", e.what());
    return 1;
  }
  return 2;  // unreachable: a subcommand is required
}

}  // namespace advit
