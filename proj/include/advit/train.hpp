#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "advit/attacks.hpp"
#include "advit/augment.hpp"
#include "advit/data.hpp"
#include "advit/vit.hpp"

namespace advit {

enum class LossMode { PlainAdversarial, Trades };

struct TrainRecipe {
  int epochs = 30;
  double eps_max = 8.0 / 255.0;
  int eps_warmup_epochs = 10;

  AttackSpec attack;  // inner maximization; epsilon is overridden per epoch
  AugPolicy policy;

  double weight_decay = 0.5;
  double base_lr = 0.0;  // 0 = auto: 0.0005 * batch_size / 512
  int batch_size = 128;
  int lr_warmup_epochs = 10;
  int lr_cooldown_epochs = 10;
  double lr_warmup_start = 5e-6;
  double lr_final = 5e-5;

  LossMode loss_mode = LossMode::PlainAdversarial;
  double trades_beta = 6.0;
  int trades_steps = 10;

  double grad_clip = 0.0;          // global-norm clip; 0 disables
  bool auto_two_step_fgsm = true;  // bump inner FGSM to 2 steps at eps>=8/255
  std::uint64_t seed = 0;

  TrainRecipe() {
    attack.steps = 1;
    attack.step_rule = StepSizeRule::FgsmFullBudget;
  }
  void validate() const;
  double resolved_base_lr() const;
};

struct OptimizerState {
  std::map<std::string, Tensor> m, v;  // first/second moment estimates
  long step = 0;
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
};

struct EpochRecord {
  int epoch = 0;
  double clean_val_acc = 0.0;
  double fgsm_val_acc = 0.0;
  double train_loss = 0.0;
  double eps = 0.0;
  double lr = 0.0;
};
using TrainHistory = std::vector<EpochRecord>;

// Linear budget warm-up: eps_max * min(1, (e+1)/W); W=0 disables warm-up.
double eps_schedule(int epoch, int warmup_epochs, double eps_max);

// Linear LR warm-up, cosine decay to lr_final, then a constant cool-down
// tail; segments join continuously.
double lr_schedule(int epoch, const TrainRecipe& recipe);

using Grads = std::map<std::string, Tensor>;

// Decoupled-weight-decay Adam: moments never see the decay term;
// p -= lr * (mhat / (sqrt(vhat) + eps) + weight_decay * p).
void adamw_step(Params& params, const Grads& grads, OptimizerState& state,
                double lr, double weight_decay);

// Highest-KL perturbation for the distribution-matching fine-tune loss:
// sign-step ascent on KL(clean distribution || adversarial distribution)
// with step 2*eps/steps from a 0.001-scaled normal start.
Tensor trades_inner_delta(const ModelConfig& config, const Params& params,
                          const Tensor& x, double eps, int steps,
                          std::uint64_t seed);

// Clean cross-entropy plus beta * KL(clean || adversarial) with the
// adversarial point found by trades_inner_delta; beta=0 is exactly the clean
// cross-entropy. Builds graph nodes on the caller's tape.
Var trades_loss(Tape& t, const ModelConfig& config, const Params& params,
                const VarMap& vars, const Tensor& x, const Tensor& y_row,
                double eps, int steps, double beta, std::uint64_t seed);

// One optimization pass over the training set: augment each batch, attack
// each image at the warmed-up budget, update parameters. Returns the mean
// training loss.
double adversarial_train_epoch(const ModelConfig& config, Params& params,
                               OptimizerState& opt, const Dataset& train_set,
                               const TrainRecipe& recipe, int epoch);

struct EvalMetrics {
  double clean_acc = 0.0;
  double attacked_acc = 0.0;
};
// Clean accuracy plus robust accuracy under a one-step sign attack at the
// given budget; the seed fixes the attack randomness so successive calls are
// comparable.
EvalMetrics evaluate_robustness(const ModelConfig& config,
                                const Params& params, const Dataset& val_set,
                                double eps, std::uint64_t seed);

// Earliest epoch with the highest attacked validation accuracy.
int early_stop_select(const TrainHistory& history);

// Full-resolution conv-stack config -> low-resolution variant: the first two
// stride-2 convolutions become stride 1; parameter shapes are unchanged so
// checkpoints load as-is.
ModelConfig adapt_low_res(const ModelConfig& config);

struct TrainResult {
  Params final_params;
  Params best_params;  // snapshot at best_epoch
  int best_epoch = 0;
  TrainHistory history;
  OptimizerState opt;
};

// Runs the full schedule, evaluating after every epoch; `initial`, when
// given, seeds the parameters (fine-tuning) instead of a fresh init. The
// callback sees each epoch's record and the parameters as of that epoch.
using EpochCallback =
    std::function<void(const EpochRecord&, const Params&)>;
TrainResult train_model(const ModelConfig& config, const Dataset& train_set,
                        const Dataset& val_set, const TrainRecipe& recipe,
                        const EpochCallback& on_epoch = nullptr,
                        const Params* initial = nullptr);

}  // namespace advit
