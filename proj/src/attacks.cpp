#include "advit/attacks.hpp"

#include <algorithm>
#include <cmath>
#include <memory>
#include <random>

#include "advit/rng.hpp"
#include "advit/tape.hpp"

namespace advit {

namespace {

double l2_norm(const Tensor& t) {
  double s = 0.0;
  for (double v : t.data) s += v * v;
  return std::sqrt(s);
}

Tensor init_delta(const AttackSpec& spec, const Tensor& x,
                  std::mt19937_64& rng) {
  Tensor delta(x.shape, 0.0);
  if (spec.init == AttackInit::UniformInBall) {
    // Small constant offset breaks exact zeros so sign() has a direction.
    std::uniform_real_distribution<double> dist(-spec.epsilon, spec.epsilon);
    for (double& v : delta.data) v = dist(rng) + 1e-5;
  }
  return project(delta, x, spec.norm, spec.epsilon);
}

// Ascent direction shaped for the threat model. Returns false for a zero L2
// gradient, meaning "do not move this step".
bool shape_direction(const Tensor& grad, AttackNorm norm, Tensor& dir) {
  dir = grad;
  if (norm == AttackNorm::Linf) {
    for (double& v : dir.data) v = (v > 0.0) ? 1.0 : (v < 0.0 ? -1.0 : 0.0);
    return true;
  }
  const double n = l2_norm(grad);
  if (n == 0.0) return false;
  for (double& v : dir.data) v /= n;
  return true;
}

// Accumulates per-iterate bookkeeping shared by all three attacks.
struct Tracker {
  explicit Tracker(const AttackSpec& spec) : spec_(spec) {}

  void record(const Tensor& delta, double obj, bool misclassified) {
    if (losses_.empty() || obj > best_obj_) {
      best_obj_ = obj;
      best_delta_ = delta;
    }
    losses_.push_back(obj);
    if (spec_.track == TrackMode::FullTrace) deltas_.push_back(delta);
    success_ = success_ || misclassified;
  }

  double best_obj() const { return best_obj_; }
  const Tensor& best_delta() const { return best_delta_; }

  AttackResult finish(const Tensor& final_delta) && {
    AttackResult r;
    if (spec_.track == TrackMode::FinalIterate) {
      r.delta = final_delta;
      r.adv_loss = losses_.back();
    } else {
      r.delta = best_delta_;
      r.adv_loss = best_obj_;
    }
    r.success = success_;
    r.loss_trace = std::move(losses_);
    r.delta_trace = std::move(deltas_);
    return r;
  }

 private:
  const AttackSpec& spec_;
  double best_obj_ = 0.0;
  Tensor best_delta_;
  std::vector<double> losses_;
  std::vector<Tensor> deltas_;
  bool success_ = false;
};

struct Probe {
  double obj = 0.0;
  Tensor grad;  // ascent gradient (already negated when targeted)
  bool misclassified = false;
};

// Evaluates the attack objective and its gradient at x + delta.
Probe probe(const ModelHandle& m, const Tensor& x, int label,
            const AttackSpec& spec, const Tensor& delta, bool want_grad) {
  Tensor adv = x;
  for (size_t i = 0; i < adv.data.size(); ++i) adv.data[i] += delta.data[i];
  const bool targeted = spec.target.has_value();
  const int eval_label = targeted ? *spec.target : label;
  EvalResult ev = m.eval(adv, eval_label, want_grad);
  Probe p;
  p.obj = targeted ? -ev.ce : ev.ce;
  if (want_grad) {
    if (!ev.grad.all_finite()) throw Error("attack: non-finite gradient");
    p.grad = std::move(ev.grad);
    if (targeted)
      for (double& v : p.grad.data) v = -v;
  }
  const int pred = static_cast<int>(
      std::max_element(ev.logits.begin(), ev.logits.end()) -
      ev.logits.begin());
  p.misclassified = targeted ? (pred == *spec.target) : (pred != label);
  return p;
}

void check_label(const ModelHandle& m, int label, const AttackSpec& spec) {
  if (m.num_classes <= 0) throw Error("attack: model handle has no classes");
  if (label < 0 || label >= m.num_classes)
    throw Error("attack: label out of range");
  if (spec.target && (*spec.target < 0 || *spec.target >= m.num_classes))
    throw Error("attack: target label out of range");
}

}  // namespace

void AttackSpec::validate() const {
  if (epsilon < 0.0) throw Error("attack spec: epsilon must be >= 0");
  if (steps < 1) throw Error("attack spec: steps must be >= 1");
  if (step_rule == StepSizeRule::Fixed && fixed_step <= 0.0)
    throw Error("attack spec: fixed step rule needs fixed_step > 0");
  if (momentum < 0.0 || momentum >= 1.0)
    throw Error("attack spec: momentum must be in [0, 1)");
  if (halving_threshold < 0.0 || halving_threshold > 1.0)
    throw Error("attack spec: halving threshold must be in [0, 1]");
}

double AttackSpec::step_size() const {
  switch (step_rule) {
    case StepSizeRule::BudgetScaled:
      return 1.5 * epsilon / steps;
    case StepSizeRule::Fixed:
      return fixed_step;
    case StepSizeRule::FgsmFullBudget:
      return epsilon;
  }
  throw Error("attack spec: unknown step rule");
}

ModelHandle make_handle(const ModelConfig& config, const Params& params) {
  config.validate();
  auto cfg = std::make_shared<const ModelConfig>(config);
  auto ps = std::make_shared<const Params>(params);
  ModelHandle h;
  h.num_classes = cfg->num_classes;
  h.eval = [cfg, ps](const Tensor& x, int label, bool want_grad) {
    if (label < 0 || label >= cfg->num_classes)
      throw Error("model eval: label out of range");
    Tape t;
    VarMap vars = bind_params(t, *ps, false);
    Var image = t.leaf(x, want_grad, "image");
    Var logits = forward_model(t, *cfg, vars, image);
    Tensor target(Shape{1, cfg->num_classes}, 0.0);
    target(0, label) = 1.0;
    Var loss = t.cross_entropy(logits, target);
    EvalResult r;
    r.ce = t.value(loss).data[0];
    r.logits = t.value(logits).data;
    if (want_grad) {
      t.backward(loss);
      r.grad = t.grad(image);
    }
    return r;
  };
  return h;
}

Tensor project(const Tensor& delta, const Tensor& x, AttackNorm norm,
               double epsilon) {
  if (!delta.same_shape(x))
    throw Error("project: delta shape " + shape_str(delta.shape) +
                " does not match input shape " + shape_str(x.shape));
  Tensor out = delta;
  if (norm == AttackNorm::Linf) {
    for (double& v : out.data) v = std::clamp(v, -epsilon, epsilon);
  } else {
    const double n = l2_norm(out);
    if (n > epsilon) {
      const double s = epsilon / n;
      for (double& v : out.data) v *= s;
    }
  }
  // Only rewrite coordinates the box actually clips, so interior points pass
  // through bit-exactly.
  for (size_t i = 0; i < out.data.size(); ++i) {
    const double moved = x.data[i] + out.data[i];
    if (moved > 1.0)
      out.data[i] = 1.0 - x.data[i];
    else if (moved < 0.0)
      out.data[i] = -x.data[i];
  }
  return out;
}

AttackResult fgsm(const ModelHandle& m, const Tensor& x, int label,
                  const AttackSpec& spec) {
  spec.validate();
  check_label(m, label, spec);
  if (spec.norm != AttackNorm::Linf)
    throw Error("fgsm: only the Linf threat model is supported");
  if (spec.steps != 1 && spec.steps != 2)
    throw Error("fgsm: steps must be 1 or 2");

  auto rng = make_rng(derive_seed(spec.seed, 0xF65F));
  Tensor delta = init_delta(spec, x, rng);
  Tracker track(spec);
  for (int step = 0; step < spec.steps; ++step) {
    Probe p = probe(m, x, label, spec, delta, true);
    track.record(delta, p.obj, p.misclassified);
    Tensor dir;
    shape_direction(p.grad, AttackNorm::Linf, dir);
    for (size_t i = 0; i < delta.data.size(); ++i)
      delta.data[i] += spec.epsilon * dir.data[i];
    delta = project(delta, x, spec.norm, spec.epsilon);
  }
  Probe last = probe(m, x, label, spec, delta, false);
  track.record(delta, last.obj, last.misclassified);
  return std::move(track).finish(delta);
}

AttackResult pgd(const ModelHandle& m, const Tensor& x, int label,
                 const AttackSpec& spec) {
  spec.validate();
  check_label(m, label, spec);
  const double alpha = spec.step_size();

  auto rng = make_rng(derive_seed(spec.seed, 0xF65F));
  Tensor delta = init_delta(spec, x, rng);
  Tracker track(spec);
  for (int step = 0; step < spec.steps; ++step) {
    Probe p = probe(m, x, label, spec, delta, true);
    track.record(delta, p.obj, p.misclassified);
    Tensor dir;
    if (shape_direction(p.grad, spec.norm, dir)) {
      for (size_t i = 0; i < delta.data.size(); ++i)
        delta.data[i] += alpha * dir.data[i];
      delta = project(delta, x, spec.norm, spec.epsilon);
    }
  }
  Probe last = probe(m, x, label, spec, delta, false);
  track.record(delta, last.obj, last.misclassified);
  return std::move(track).finish(delta);
}

AttackResult apgd_ce(const ModelHandle& m, const Tensor& x, int label,
                     const AttackSpec& spec) {
  spec.validate();
  check_label(m, label, spec);
  if (spec.steps < 2) throw Error("apgd: steps must be >= 2");

  // Checkpoint schedule: first window covers ceil(0.22 * steps) steps, each
  // later window is 0.75 of the previous one but at least 3 steps.
  std::vector<int> checkpoints;
  int window = static_cast<int>(std::ceil(0.22 * spec.steps));
  window = std::max(window, 1);
  int at = window;
  while (at < spec.steps) {
    checkpoints.push_back(at);
    window = std::max(static_cast<int>(std::ceil(0.75 * window)), 3);
    at += window;
  }

  auto rng = make_rng(derive_seed(spec.seed, 0xF65F));
  Tensor delta = init_delta(spec, x, rng);
  double alpha = spec.step_size();
  Tensor velocity(delta.shape, 0.0);
  Tracker track(spec);
  size_t next_checkpoint = 0;
  int window_start = 0;
  double prev_obj = 0.0;
  int rises_in_window = 0;

  for (int step = 0; step < spec.steps; ++step) {
    Probe p = probe(m, x, label, spec, delta, true);
    if (step > window_start && p.obj > prev_obj) ++rises_in_window;
    prev_obj = p.obj;
    track.record(delta, p.obj, p.misclassified);

    if (next_checkpoint < checkpoints.size() &&
        step == checkpoints[next_checkpoint]) {
      const int len = step - window_start;
      const double rise_fraction =
          len > 0 ? static_cast<double>(rises_in_window) / len : 1.0;
      if (rise_fraction < spec.halving_threshold) {
        alpha *= 0.5;
        delta = track.best_delta();
        std::fill(velocity.data.begin(), velocity.data.end(), 0.0);
        // Re-probe from the restarted iterate so the step below uses its
        // gradient, not the abandoned trajectory's.
        p = probe(m, x, label, spec, delta, true);
        prev_obj = p.obj;
      }
      window_start = step;
      rises_in_window = 0;
      ++next_checkpoint;
    }

    Tensor dir;
    if (shape_direction(p.grad, spec.norm, dir)) {
      for (size_t i = 0; i < velocity.data.size(); ++i)
        velocity.data[i] =
            spec.momentum * velocity.data[i] +
            (1.0 - spec.momentum) * dir.data[i];
      for (size_t i = 0; i < delta.data.size(); ++i)
        delta.data[i] += alpha * velocity.data[i];
      delta = project(delta, x, spec.norm, spec.epsilon);
    }
  }
  Probe last = probe(m, x, label, spec, delta, false);
  track.record(delta, last.obj, last.misclassified);
  return std::move(track).finish(delta);
}

}  // namespace advit
