#include "advit/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>

#include "advit/rng.hpp"
#include "advit/tape.hpp"

namespace advit {

namespace {

double mean_of(const std::vector<double>& v) {
  return std::accumulate(v.begin(), v.end(), 0.0) / v.size();
}

double ci_half_width(const std::vector<double>& run_means) {
  if (run_means.size() < 2) return 0.0;
  const double m = mean_of(run_means);
  double ss = 0.0;
  for (double x : run_means) ss += (x - m) * (x - m);
  const double sd = std::sqrt(ss / (run_means.size() - 1));
  return 1.96 * sd / std::sqrt(static_cast<double>(run_means.size()));
}

AttackSpec pgd_spec(double epsilon, int steps, std::uint64_t seed) {
  AttackSpec spec;
  spec.norm = AttackNorm::Linf;
  spec.epsilon = epsilon;
  spec.steps = steps;
  spec.step_rule = StepSizeRule::BudgetScaled;
  spec.init = AttackInit::UniformInBall;
  spec.track = TrackMode::BestLossIterate;
  spec.seed = seed;
  return spec;
}

// Best loss within the first k steps of a recorded trajectory. Index 0 of
// the trace is the loss at the initial perturbation.
double best_within(const std::vector<double>& trace, int k) {
  const size_t last = std::min(trace.size() - 1, static_cast<size_t>(k));
  return *std::max_element(trace.begin(), trace.begin() + last + 1);
}

}  // namespace

EffectivenessReport attack_effectiveness(const ModelHandle& model,
                                         const Dataset& data,
                                         const EffectivenessOptions& options) {
  data.validate();
  if (data.size() == 0) throw Error("attack_effectiveness: empty dataset");
  if (options.k_list.empty())
    throw Error("attack_effectiveness: empty step list");
  for (int k : options.k_list)
    if (k < 1) throw Error("attack_effectiveness: step counts must be >= 1");
  const int kmax =
      *std::max_element(options.k_list.begin(), options.k_list.end());
  if (options.oracle_steps <= kmax)
    throw Error(
        "attack_effectiveness: oracle must use more steps than any k");
  if (options.runs < 1) throw Error("attack_effectiveness: runs must be >= 1");
  if (options.epsilon <= 0.0)
    throw Error("attack_effectiveness: epsilon must be positive");

  const int n = data.size();
  const size_t nk = options.k_list.size();

  EffectivenessReport report;
  report.mode = options.mode;
  report.oracle_steps = options.oracle_steps;
  report.sample_count = n;
  report.runs = options.runs;
  report.entries.resize(nk);
  for (size_t j = 0; j < nk; ++j) report.entries[j].k = options.k_list[j];

  // d_runs[run][j] = average over samples of (L_k - L_O) / L_O.
  std::vector<std::vector<double>> d_runs(options.runs,
                                          std::vector<double>(nk, 0.0));
  std::vector<std::vector<double>> abs_runs = d_runs;

  for (int run = 0; run < options.runs; ++run) {
    const std::uint64_t run_seed = derive_seed(options.seed, 0xEFFC, run);
    const bool keep_table = run == 0;
    if (keep_table) {
      report.loss_k.assign(n, std::vector<double>(nk, 0.0));
      report.loss_oracle.assign(n, 0.0);
      report.d_samples.assign(nk, std::vector<double>(n, 0.0));
    }
    for (int i = 0; i < n; ++i) {
      const Tensor x = data.image(i);
      const int label = data.labels[i];
      std::vector<double> loss_k(nk, 0.0);
      double loss_oracle = 0.0;

      if (options.mode == EffectivenessMode::SharedTrajectory) {
        AttackSpec spec = pgd_spec(options.epsilon, options.oracle_steps,
                                   derive_seed(run_seed, i, 0));
        AttackResult res = pgd(model, x, label, spec);
        for (size_t j = 0; j < nk; ++j)
          loss_k[j] = best_within(res.loss_trace, options.k_list[j]);
        loss_oracle = best_within(res.loss_trace, options.oracle_steps);
      } else {
        for (size_t j = 0; j < nk; ++j) {
          AttackSpec spec = pgd_spec(options.epsilon, options.k_list[j],
                                     derive_seed(run_seed, i, j));
          loss_k[j] = pgd(model, x, label, spec).adv_loss;
        }
        AttackSpec spec = pgd_spec(options.epsilon, options.oracle_steps,
                                   derive_seed(run_seed, i, nk));
        loss_oracle = pgd(model, x, label, spec).adv_loss;
        // Union oracle: the strongest attack seen for this sample, so the
        // relative gap can never come out positive.
        for (double lk : loss_k) loss_oracle = std::max(loss_oracle, lk);
      }

      if (keep_table) {
        report.loss_k[i] = loss_k;
        report.loss_oracle[i] = loss_oracle;
      }
      for (size_t j = 0; j < nk; ++j) {
        const double d = (loss_k[j] - loss_oracle) / loss_oracle;
        d_runs[run][j] += d / n;
        abs_runs[run][j] += std::fabs(d) / n;
        if (keep_table) report.d_samples[j][i] = d;
      }
    }
  }

  for (size_t j = 0; j < nk; ++j) {
    EffectivenessEntry& e = report.entries[j];
    for (int run = 0; run < options.runs; ++run)
      e.run_means.push_back(d_runs[run][j]);
    e.mean_d = mean_of(e.run_means);
    std::vector<double> abs_means;
    for (int run = 0; run < options.runs; ++run)
      abs_means.push_back(abs_runs[run][j]);
    e.mean_abs_d = mean_of(abs_means);
    e.ci_half_width = ci_half_width(e.run_means);
  }
  return report;
}

SweepCurve eps_sweep(const ModelHandle& model, const Dataset& data,
                     const std::vector<double>& eps_list,
                     const AttackSpec& attack) {
  data.validate();
  if (data.size() == 0) throw Error("eps_sweep: empty dataset");
  if (eps_list.empty()) throw Error("eps_sweep: empty epsilon list");
  for (size_t i = 0; i < eps_list.size(); ++i) {
    if (eps_list[i] < 0.0) throw Error("eps_sweep: negative epsilon");
    if (i > 0 && eps_list[i] <= eps_list[i - 1])
      throw Error("eps_sweep: epsilon list must be strictly ascending");
  }

  const int n = data.size();
  SweepCurve curve;
  curve.broken.assign(n, 0);

  for (double eps : eps_list) {
    for (int i = 0; i < n; ++i) {
      if (curve.broken[i]) continue;
      const Tensor x = data.image(i);
      const int label = data.labels[i];
      if (eps == 0.0) {
        EvalResult clean = model.eval(x, label, false);
        const auto it =
            std::max_element(clean.logits.begin(), clean.logits.end());
        const int pred = static_cast<int>(it - clean.logits.begin());
        if (pred != label) curve.broken[i] = 1;
        continue;
      }
      AttackSpec spec = attack;
      spec.epsilon = eps;
      spec.seed = derive_seed(attack.seed, 0x5EE9, i);
      if (pgd(model, x, label, spec).success) curve.broken[i] = 1;
    }
    const int surviving =
        n - static_cast<int>(
                std::count(curve.broken.begin(), curve.broken.end(), 1));
    curve.points.push_back({eps, static_cast<double>(surviving) / n});
  }
  return curve;
}

Tensor scale_perturbation(const Tensor& delta, double epsilon,
                          bool grayscale) {
  if (epsilon <= 0.0)
    throw Error("scale_perturbation: epsilon must be positive");
  for (double v : delta.data)
    if (std::fabs(v) > epsilon + 1e-12)
      throw Error("scale_perturbation: perturbation exceeds the radius");

  Tensor scaled = delta;
  for (double& v : scaled.data)
    v = std::min(1.0, std::max(0.0, (v + epsilon) / (2.0 * epsilon)));
  if (!grayscale) return scaled;

  if (scaled.shape.size() != 3)
    throw Error("scale_perturbation: grayscale needs an (H, W, C) image");
  const int h = scaled.shape[0], w = scaled.shape[1], c = scaled.shape[2];
  Tensor gray(Shape{h, w, 1});
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      double acc = 0.0;
      for (int ch = 0; ch < c; ++ch) acc += scaled(y, x, ch);
      gray(y, x, 0) = acc / c;
    }
  return gray;
}

double semantic_score(const ModelHandle& classifier,
                      const std::vector<Tensor>& perturbations,
                      const std::vector<int>& evaded_labels, double epsilon,
                      int topk, bool grayscale) {
  if (perturbations.empty()) throw Error("semantic_score: no perturbations");
  if (perturbations.size() != evaded_labels.size())
    throw Error("semantic_score: perturbation/label count mismatch");
  if (topk < 1) throw Error("semantic_score: topk must be >= 1");

  int hits = 0;
  for (size_t i = 0; i < perturbations.size(); ++i) {
    const int label = evaded_labels[i];
    if (label < 0 || label >= classifier.num_classes)
      throw Error("semantic_score: evaded label out of range");
    const Tensor image =
        scale_perturbation(perturbations[i], epsilon, grayscale);
    // The label argument only feeds the loss value, which is ignored here.
    EvalResult out = classifier.eval(image, label, false);
    // Rank = number of classes strictly ahead, ties broken by lower index.
    int rank = 0;
    for (int cls = 0; cls < classifier.num_classes; ++cls) {
      if (cls == label) continue;
      if (out.logits[cls] > out.logits[label] ||
          (out.logits[cls] == out.logits[label] && cls < label))
        ++rank;
    }
    if (rank < topk) ++hits;
  }
  return static_cast<double>(hits) / perturbations.size();
}

Tensor feature_visualization(const ModelConfig& config, const Params& params,
                             int target_class, double epsilon, int steps,
                             std::uint64_t seed) {
  config.validate();
  if (epsilon <= 0.0)
    throw Error("feature_visualization: epsilon must be positive");
  if (steps < 0) throw Error("feature_visualization: negative step count");
  if (target_class < 0 || target_class >= config.num_classes)
    throw Error("feature_visualization: target class out of range");

  auto rng = make_rng(derive_seed(seed, 0xF1A7));
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  Tensor x0(Shape{config.image_h, config.image_w, config.image_c});
  for (double& v : x0.data) v = unit(rng);
  if (steps == 0) return x0;

  const double alpha = 1.5 * epsilon / steps;
  Tensor delta(x0.shape, 0.0);
  Tensor best_delta = delta;
  double best_score = -std::numeric_limits<double>::infinity();

  for (int step = 0; step <= steps; ++step) {
    Tape t;
    VarMap vars = bind_params(t, params, false);
    Tensor moved = x0;
    for (size_t i = 0; i < moved.data.size(); ++i)
      moved.data[i] += delta.data[i];
    Var input = t.leaf(moved, true, "input");
    Var logits = forward_model(t, config, vars, input);
    Var score =
        t.sum(t.slice_columns(logits, target_class, target_class + 1));
    const double value = t.value(score).data[0];
    if (value > best_score) {
      best_score = value;
      best_delta = delta;
    }
    if (step == steps) break;
    t.backward(score);
    const Tensor& g = t.grad(input);
    for (size_t i = 0; i < delta.data.size(); ++i) {
      const double s = g.data[i] > 0.0 ? 1.0 : (g.data[i] < 0.0 ? -1.0 : 0.0);
      delta.data[i] += alpha * s;
    }
    delta = project(delta, x0, AttackNorm::Linf, epsilon);
  }

  Tensor out = x0;
  for (size_t i = 0; i < out.data.size(); ++i)
    out.data[i] += best_delta.data[i];
  return out;
}

}  // namespace advit
