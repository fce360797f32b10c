#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <vector>

#include "advit/tensor.hpp"
#include "advit/vit.hpp"

namespace advit {

enum class AttackNorm { Linf, L2 };

// How the per-step size alpha is derived from the budget.
enum class StepSizeRule {
  BudgetScaled,     // alpha = 1.5 * epsilon / steps
  Fixed,           // alpha = fixed_step
  FgsmFullBudget,  // alpha = epsilon (one full-budget sign step per step)
};

enum class AttackInit { Zero, UniformInBall };

enum class TrackMode {
  FinalIterate,     // return the last delta
  BestLossIterate,  // return the highest-objective delta visited
  FullTrace,        // best delta plus per-iterate losses and deltas
};

struct AttackSpec {
  AttackNorm norm = AttackNorm::Linf;
  double epsilon = 8.0 / 255.0;  // budget in input units; 0 = degenerate ball
  int steps = 10;
  StepSizeRule step_rule = StepSizeRule::BudgetScaled;
  double fixed_step = 0.0;  // used by StepSizeRule::Fixed
  AttackInit init = AttackInit::UniformInBall;
  TrackMode track = TrackMode::BestLossIterate;
  std::optional<int> target;  // targeted mode: drive prediction to this label
  std::uint64_t seed = 0;

  // Momentum-averaged gradient steps, used by apgd_ce only. momentum = 0 and
  // halving_threshold = 0 reduce it to plain pgd with the same step rule.
  double momentum = 0.75;
  double halving_threshold = 0.75;

  void validate() const;     // throws Error on violations
  double step_size() const;  // resolves step_rule to a concrete alpha
};

struct AttackResult {
  Tensor delta;          // perturbation; x + delta stays in [0,1]
  double adv_loss = 0;   // objective at the returned delta
  bool success = false;  // some visited iterate is (targeted-)misclassified
  // Objective value at every visited iterate, delta0 first. The objective is
  // the cross-entropy of the true label, negated for targeted attacks, so
  // ascent always means "better for the attacker".
  std::vector<double> loss_trace;
  std::vector<Tensor> delta_trace;  // populated in FullTrace mode only
};

// One forward (and optional backward) pass of a classifier on image x with
// cross-entropy against `label`.
struct EvalResult {
  double ce = 0.0;
  std::vector<double> logits;
  Tensor grad;  // d ce / d x, when requested
};

// Read-only classifier view; attacks never touch parameters.
struct ModelHandle {
  std::function<EvalResult(const Tensor& x, int label, bool want_grad)> eval;
  int num_classes = 0;
};

ModelHandle make_handle(const ModelConfig& config, const Params& params);

// Projects delta onto the epsilon-ball around x intersected with the [0,1]
// box: norm projection first, then clamp x+delta and recompute delta.
Tensor project(const Tensor& delta, const Tensor& x, AttackNorm norm,
               double epsilon);

// One or two full-budget sign steps from a small random start (Linf only).
AttackResult fgsm(const ModelHandle& m, const Tensor& x, int label,
                  const AttackSpec& spec);
// Projected gradient ascent: sign steps under Linf, normalized-gradient
// steps under L2 (a zero gradient leaves the iterate in place).
AttackResult pgd(const ModelHandle& m, const Tensor& x, int label,
                 const AttackSpec& spec);
// Momentum-averaged PGD with step-size halving at checkpoints (first at
// ceil(0.22*steps), windows shrinking by 0.75, minimum 3). When a window has
// too few loss-increasing steps the step size halves and the trajectory
// restarts from the best iterate with momentum reset.
AttackResult apgd_ce(const ModelHandle& m, const Tensor& x, int label,
                     const AttackSpec& spec);

}  // namespace advit
