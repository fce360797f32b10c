#include "advit/train.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "advit/rng.hpp"

namespace advit {

namespace {

constexpr double kPi = 3.14159265358979323846;

int argmax_row(const Tensor& rows, int row) {
  int best = 0;
  for (int j = 1; j < rows.extent(1); ++j)
    if (rows(row, j) > rows(row, best)) best = j;
  return best;
}

Tensor batch_image(const Tensor& images, int index) {
  Tensor out(Shape{images.extent(1), images.extent(2), images.extent(3)});
  const size_t stride = out.data.size();
  std::copy_n(images.data.begin() + index * stride, stride, out.data.begin());
  return out;
}

Tensor label_row(const Tensor& labels, int index) {
  Tensor out(Shape{1, labels.extent(1)});
  for (int j = 0; j < labels.extent(1); ++j) out(0, j) = labels(index, j);
  return out;
}

void require_geometry(const ModelConfig& config, const Dataset& data,
                      const char* which) {
  if (data.height() != config.image_h || data.width() != config.image_w ||
      data.channels() != config.image_c)
    throw Error(std::string(which) +
                " dataset geometry does not match the model config");
  if (data.num_classes != config.num_classes)
    throw Error(std::string(which) +
                " dataset class count does not match the model config");
}

// Training-time inner maximization: FGSM-style full-budget sign steps when
// the attack spec selects them, projected gradient ascent otherwise.
AttackResult run_inner_attack(const ModelHandle& handle, const Tensor& x,
                              int label, const AttackSpec& spec) {
  const bool fgsm_like = spec.step_rule == StepSizeRule::FgsmFullBudget &&
                         spec.norm == AttackNorm::Linf && spec.steps <= 2;
  return fgsm_like ? fgsm(handle, x, label, spec) : pgd(handle, x, label, spec);
}

double global_grad_norm(const Grads& grads) {
  double sq = 0.0;
  for (const auto& [name, g] : grads)
    for (double v : g.data) sq += v * v;
  return std::sqrt(sq);
}

Tensor clean_probs_row(const ModelConfig& config, const Params& params,
                       const Tensor& x) {
  std::vector<double> logits = forward_logits(config, params, x);
  const double hi = *std::max_element(logits.begin(), logits.end());
  double denom = 0.0;
  Tensor row(Shape{1, static_cast<int>(logits.size())});
  for (size_t j = 0; j < logits.size(); ++j) {
    row(0, static_cast<int>(j)) = std::exp(logits[j] - hi);
    denom += row(0, static_cast<int>(j));
  }
  for (double& v : row.data) v /= denom;
  return row;
}

}  // namespace

void TrainRecipe::validate() const {
  if (epochs < 1) throw Error("recipe: epochs must be >= 1");
  if (eps_max < 0.0) throw Error("recipe: eps_max must be >= 0");
  if (eps_warmup_epochs < 0 || eps_warmup_epochs > epochs)
    throw Error("recipe: eps warm-up must lie within the epoch budget");
  if (batch_size < 1) throw Error("recipe: batch_size must be >= 1");
  if (lr_warmup_epochs < 0 || lr_cooldown_epochs < 0 ||
      lr_warmup_epochs + lr_cooldown_epochs > epochs)
    throw Error("recipe: lr warm-up plus cool-down exceeds the epochs");
  if (base_lr < 0.0) throw Error("recipe: base_lr must be >= 0 (0 = auto)");
  if (!(lr_warmup_start > 0.0) || !(lr_final > 0.0))
    throw Error("recipe: lr endpoints must be positive");
  if (weight_decay < 0.0) throw Error("recipe: weight_decay must be >= 0");
  if (trades_beta < 0.0) throw Error("recipe: trades_beta must be >= 0");
  if (trades_steps < 1) throw Error("recipe: trades_steps must be >= 1");
  if (grad_clip < 0.0) throw Error("recipe: grad_clip must be >= 0");
  policy.validate();
  AttackSpec probe = attack;
  probe.epsilon = eps_max;
  probe.validate();
}

double TrainRecipe::resolved_base_lr() const {
  return base_lr > 0.0 ? base_lr : 0.0005 * batch_size / 512.0;
}

double eps_schedule(int epoch, int warmup_epochs, double eps_max) {
  if (epoch < 0) throw Error("eps_schedule: negative epoch");
  if (warmup_epochs <= 0) return eps_max;
  const double f =
      std::min(1.0, static_cast<double>(epoch + 1) / warmup_epochs);
  return eps_max * f;
}

double lr_schedule(int epoch, const TrainRecipe& recipe) {
  if (epoch < 0) throw Error("lr_schedule: negative epoch");
  const double base = recipe.resolved_base_lr();
  const int warm = recipe.lr_warmup_epochs;
  const int last_cosine = recipe.epochs - recipe.lr_cooldown_epochs - 1;
  if (epoch < warm)
    return recipe.lr_warmup_start +
           (base - recipe.lr_warmup_start) * epoch / warm;
  if (epoch > last_cosine) return recipe.lr_final;
  const int span = last_cosine - warm;
  const double t =
      span > 0 ? static_cast<double>(epoch - warm) / span : 1.0;
  return recipe.lr_final +
         0.5 * (base - recipe.lr_final) * (1.0 + std::cos(kPi * t));
}

void adamw_step(Params& params, const Grads& grads, OptimizerState& state,
                double lr, double weight_decay) {
  state.step += 1;
  const double bc1 = 1.0 - std::pow(state.beta1, state.step);
  const double bc2 = 1.0 - std::pow(state.beta2, state.step);
  for (auto& [name, p] : params) {
    auto it = grads.find(name);
    if (it == grads.end())
      throw Error("adamw: missing gradient for parameter " + name);
    const Tensor& g = it->second;
    if (!g.same_shape(p))
      throw Error("adamw: gradient shape mismatch for parameter " + name);
    if (!g.all_finite())
      throw Error("adamw: non-finite gradient for parameter " + name);
    Tensor& m = state.m[name];
    Tensor& v = state.v[name];
    if (m.data.empty()) m = Tensor(p.shape, 0.0);
    if (v.data.empty()) v = Tensor(p.shape, 0.0);
    for (size_t i = 0; i < p.data.size(); ++i) {
      m.data[i] = state.beta1 * m.data[i] + (1.0 - state.beta1) * g.data[i];
      v.data[i] =
          state.beta2 * v.data[i] + (1.0 - state.beta2) * g.data[i] * g.data[i];
      const double mhat = m.data[i] / bc1;
      const double vhat = v.data[i] / bc2;
      p.data[i] -= lr * (mhat / (std::sqrt(vhat) + state.eps) +
                         weight_decay * p.data[i]);
    }
  }
}

Tensor trades_inner_delta(const ModelConfig& config, const Params& params,
                          const Tensor& x, double eps, int steps,
                          std::uint64_t seed) {
  if (steps < 1) throw Error("trades: inner steps must be >= 1");
  Tensor delta(x.shape, 0.0);
  if (eps <= 0.0) return delta;

  auto rng = make_rng(derive_seed(seed, 0x72AD));
  std::normal_distribution<double> noise(0.0, 1.0);
  for (double& v : delta.data) v = 0.001 * noise(rng);
  delta = project(delta, x, AttackNorm::Linf, eps);

  const Tensor ref = clean_probs_row(config, params, x);
  // The divergence op wants logits; feed the reference as log-probabilities
  // (their softmax is the reference distribution itself).
  Tensor ref_logits = ref;
  for (double& v : ref_logits.data) v = std::log(std::max(v, 1e-300));

  const double alpha = 2.0 * eps / steps;
  for (int step = 0; step < steps; ++step) {
    Tape t;
    VarMap vars = bind_params(t, params, false);
    Tensor adv = x;
    for (size_t i = 0; i < adv.data.size(); ++i) adv.data[i] += delta.data[i];
    Var adv_leaf = t.leaf(adv, true, "adv");
    Var logits = forward_model(t, config, vars, adv_leaf);
    Var kl = t.kl_divergence(t.leaf(ref_logits), logits);
    t.backward(kl);
    Tensor g = t.grad(adv_leaf);
    if (!g.all_finite()) throw Error("trades: non-finite inner gradient");
    for (size_t i = 0; i < delta.data.size(); ++i) {
      const double s = g.data[i] > 0.0 ? 1.0 : (g.data[i] < 0.0 ? -1.0 : 0.0);
      delta.data[i] += alpha * s;
    }
    delta = project(delta, x, AttackNorm::Linf, eps);
  }
  return delta;
}

Var trades_loss(Tape& t, const ModelConfig& config, const Params& params,
                const VarMap& vars, const Tensor& x, const Tensor& y_row,
                double eps, int steps, double beta, std::uint64_t seed) {
  if (beta < 0.0) throw Error("trades: beta must be >= 0");
  Var clean_logits = forward_model(t, config, vars, t.leaf(x, false, "x"));
  Var ce = t.cross_entropy(clean_logits, y_row);
  if (beta == 0.0) return ce;
  Tensor delta = trades_inner_delta(config, params, x, eps, steps, seed);
  Tensor adv = x;
  for (size_t i = 0; i < adv.data.size(); ++i) adv.data[i] += delta.data[i];
  Var adv_logits = forward_model(t, config, vars, t.leaf(adv, false, "xadv"));
  Var kl = t.kl_divergence(clean_logits, adv_logits);
  return t.add(ce, t.scale(kl, beta));
}

double adversarial_train_epoch(const ModelConfig& config, Params& params,
                               OptimizerState& opt, const Dataset& train_set,
                               const TrainRecipe& recipe, int epoch) {
  config.validate();
  recipe.validate();
  train_set.validate();
  require_geometry(config, train_set, "train");

  const double eps_e =
      eps_schedule(epoch, recipe.eps_warmup_epochs, recipe.eps_max);
  const double lr = lr_schedule(epoch, recipe);
  const auto batches =
      epoch_batches(train_set.size(), recipe.batch_size,
                    derive_seed(recipe.seed, 0x0BA7, epoch));
  const AugPipeline pipeline = compose_policy(recipe.policy);

  AttackSpec aspec = recipe.attack;
  aspec.epsilon = eps_e;
  aspec.track = TrackMode::FinalIterate;
  aspec.target.reset();
  if (recipe.auto_two_step_fgsm && aspec.steps < 2 &&
      eps_e >= 8.0 / 255.0 - 1e-12)
    aspec.steps = 2;

  double loss_sum = 0.0;
  int image_count = 0;
  for (size_t bi = 0; bi < batches.size(); ++bi) {
    try {
      LabeledBatch batch = make_batch(train_set, batches[bi]);
      batch = pipeline(
          batch, derive_seed(recipe.seed, 0xA060 + static_cast<std::uint64_t>(
                                              epoch),
                             bi));
      const int b = batch.batch_size();

      // Inner maximization against the current parameters.
      std::vector<Tensor> inputs(b);
      const bool trades_mode = recipe.loss_mode == LossMode::Trades;
      if (!trades_mode && eps_e > 0.0) {
        const ModelHandle handle = make_handle(config, params);
        for (int i = 0; i < b; ++i) {
          Tensor x = batch_image(batch.images, i);
          AttackSpec s = aspec;
          s.seed = derive_seed(derive_seed(recipe.seed, 0xA77, epoch),
                               bi * 4096 + static_cast<std::uint64_t>(i));
          AttackResult r =
              run_inner_attack(handle, x, argmax_row(batch.labels, i), s);
          for (size_t p = 0; p < x.data.size(); ++p)
            x.data[p] += r.delta.data[p];
          inputs[i] = std::move(x);
        }
      } else {
        for (int i = 0; i < b; ++i) inputs[i] = batch_image(batch.images, i);
      }

      // One graph for the whole batch: parameters bound once, per-image
      // subgraphs, mean loss.
      Tape t;
      VarMap vars = bind_params(t, params, true);
      Var total{-1};
      for (int i = 0; i < b; ++i) {
        const Tensor y = label_row(batch.labels, i);
        Var loss_i;
        if (trades_mode) {
          loss_i = trades_loss(
              t, config, params, vars, inputs[i], y, eps_e,
              recipe.trades_steps, recipe.trades_beta,
              derive_seed(derive_seed(recipe.seed, 0x7AD, epoch),
                          bi * 4096 + static_cast<std::uint64_t>(i)));
        } else {
          Var logits =
              forward_model(t, config, vars, t.leaf(inputs[i], false, "x"));
          loss_i = t.cross_entropy(logits, y);
        }
        total = (i == 0) ? loss_i : t.add(total, loss_i);
      }
      total = t.scale(total, 1.0 / b);
      t.backward(total);
      Grads grads = collect_gradients(t, vars);

      if (recipe.grad_clip > 0.0) {
        const double norm = global_grad_norm(grads);
        if (norm > recipe.grad_clip) {
          const double s = recipe.grad_clip / norm;
          for (auto& [name, g] : grads)
            for (double& v : g.data) v *= s;
        }
      }
      adamw_step(params, grads, opt, lr, recipe.weight_decay);

      loss_sum += t.value(total).data[0] * b;
      image_count += b;
    } catch (const Error& e) {
      throw Error("epoch " + std::to_string(epoch) + " batch " +
                  std::to_string(bi) + ": " + e.what());
    }
  }
  return image_count > 0 ? loss_sum / image_count : 0.0;
}

EvalMetrics evaluate_robustness(const ModelConfig& config,
                                const Params& params, const Dataset& val_set,
                                double eps, std::uint64_t seed) {
  val_set.validate();
  require_geometry(config, val_set, "validation");
  const ModelHandle handle = make_handle(config, params);
  int clean_ok = 0, attacked_ok = 0;
  for (int i = 0; i < val_set.size(); ++i) {
    const Tensor x = val_set.image(i);
    const int y = val_set.labels[i];
    EvalResult ev = handle.eval(x, y, false);
    const int pred = static_cast<int>(
        std::max_element(ev.logits.begin(), ev.logits.end()) -
        ev.logits.begin());
    const bool clean = pred == y;
    clean_ok += clean;
    if (eps > 0.0) {
      AttackSpec s;
      s.norm = AttackNorm::Linf;
      s.epsilon = eps;
      s.steps = 1;
      s.step_rule = StepSizeRule::FgsmFullBudget;
      s.init = AttackInit::UniformInBall;
      s.track = TrackMode::BestLossIterate;
      s.seed = derive_seed(seed, 0xEA1, static_cast<std::uint64_t>(i));
      attacked_ok += !fgsm(handle, x, y, s).success;
    } else {
      attacked_ok += clean;
    }
  }
  const double n = std::max(1, val_set.size());
  return EvalMetrics{clean_ok / n, attacked_ok / n};
}

int early_stop_select(const TrainHistory& history) {
  if (history.empty()) throw Error("early stop: empty history");
  int best = 0;
  for (int i = 1; i < static_cast<int>(history.size()); ++i)
    if (history[i].fgsm_val_acc > history[best].fgsm_val_acc) best = i;
  return best;
}

ModelConfig adapt_low_res(const ModelConfig& config) {
  if (config.patch_embed != PatchEmbedKind::ConvStack)
    throw Error("adapt_low_res: requires a conv-stack patch embedding");
  if (config.conv_strides.size() < 2 || config.conv_strides[0] != 2 ||
      config.conv_strides[1] != 2)
    throw Error(
        "adapt_low_res: requires at least two leading stride-2 convolutions");
  ModelConfig out = config;
  out.conv_strides[0] = 1;
  out.conv_strides[1] = 1;
  out.validate();
  return out;
}

TrainResult train_model(const ModelConfig& config, const Dataset& train_set,
                        const Dataset& val_set, const TrainRecipe& recipe,
                        const EpochCallback& on_epoch,
                        const Params* initial) {
  config.validate();
  recipe.validate();
  val_set.validate();
  require_geometry(config, val_set, "validation");

  TrainResult result;
  Params params =
      initial ? *initial : init_params(config, derive_seed(recipe.seed, 0x17));
  OptimizerState opt;
  double best_acc = -1.0;
  for (int epoch = 0; epoch < recipe.epochs; ++epoch) {
    const double train_loss =
        adversarial_train_epoch(config, params, opt, train_set, recipe, epoch);
    const EvalMetrics m = evaluate_robustness(config, params, val_set,
                                              recipe.eps_max, recipe.seed);
    EpochRecord rec;
    rec.epoch = epoch;
    rec.clean_val_acc = m.clean_acc;
    rec.fgsm_val_acc = m.attacked_acc;
    rec.train_loss = train_loss;
    rec.eps = eps_schedule(epoch, recipe.eps_warmup_epochs, recipe.eps_max);
    rec.lr = lr_schedule(epoch, recipe);
    result.history.push_back(rec);
    if (m.attacked_acc > best_acc) {
      best_acc = m.attacked_acc;
      result.best_epoch = epoch;
      result.best_params = params;
    }
    if (on_epoch) on_epoch(rec, params);
  }
  result.final_params = std::move(params);
  result.opt = std::move(opt);
  return result;
}

}  // namespace advit
