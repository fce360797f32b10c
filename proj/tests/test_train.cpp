#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>
#include <random>

#include "advit/rng.hpp"
#include "advit/train.hpp"
#include "doctest.h"

namespace {

using namespace advit;

ModelConfig TinyConfig() {
  ModelConfig c;
  c.block_kind = BlockKind::SelfAttention;
  c.depth = 1;
  c.d_model = 8;
  c.heads = 2;
  c.num_classes = 2;
  c.image_h = c.image_w = 4;
  c.image_c = 1;
  c.patch_embed = PatchEmbedKind::Linear;
  c.patch_size = 2;
  return c;
}

// Linearly separable blobs: class 0 is dark, class 1 is bright.
Dataset MakeBlobs(int n, int h, int w, std::uint64_t seed) {
  Dataset d;
  d.num_classes = 2;
  d.images = Tensor(Shape{n, h, w, 1});
  d.labels.resize(n);
  auto rng = make_rng(seed);
  std::uniform_real_distribution<double> dark(0.05, 0.3), bright(0.7, 0.95);
  const size_t stride = static_cast<size_t>(h) * w;
  for (int i = 0; i < n; ++i) {
    d.labels[i] = i % 2;
    for (size_t p = 0; p < stride; ++p)
      d.images.data[i * stride + p] = d.labels[i] ? bright(rng) : dark(rng);
  }
  return d;
}

TrainRecipe QuickRecipe() {
  TrainRecipe r;
  r.epochs = 2;
  r.eps_max = 0.05;
  r.eps_warmup_epochs = 2;
  r.batch_size = 8;
  r.base_lr = 0.01;
  r.lr_warmup_epochs = 0;
  r.lr_cooldown_epochs = 0;
  r.weight_decay = 0.01;
  r.policy = light_policy();
  r.policy.flip_prob = 0.0;
  r.policy.crop_scale_lo = r.policy.crop_scale_hi = 1.0;
  r.policy.crop_ratio_lo = r.policy.crop_ratio_hi = 1.0;
  r.policy.jitter = 0.0;
  r.seed = 12;
  return r;
}

}  // namespace

TEST_CASE("epsilon warm-up schedule") {
  SUBCASE("no warm-up holds the full budget") {
    for (int e : {0, 3, 100})
      CHECK(eps_schedule(e, 0, 0.1) == 0.1);
  }
  SUBCASE("published warm-up checkpoints") {
    const double eps = 4.0 / 255.0;
    CHECK(eps_schedule(4, 10, eps) == doctest::Approx(2.0 / 255.0).epsilon(1e-15));
    CHECK(eps_schedule(9, 10, eps) == eps);
    CHECK(eps_schedule(50, 10, eps) == eps);
  }
  SUBCASE("non-decreasing and saturating") {
    double prev = -1.0;
    for (int e = 0; e < 40; ++e) {
      const double v = eps_schedule(e, 12, 0.03);
      CHECK(v >= prev);
      prev = v;
      if (e >= 11) CHECK(v == 0.03);
    }
  }
}

TEST_CASE("learning-rate schedule") {
  TrainRecipe r;
  r.epochs = 30;
  r.lr_warmup_epochs = 10;
  r.lr_cooldown_epochs = 10;
  r.batch_size = 512;

  SUBCASE("base rate scales linearly with batch size") {
    CHECK(r.resolved_base_lr() == doctest::Approx(0.0005).epsilon(1e-15));
    r.batch_size = 1024;
    CHECK(r.resolved_base_lr() == doctest::Approx(0.001).epsilon(1e-15));
    r.base_lr = 0.42;
    CHECK(r.resolved_base_lr() == 0.42);
  }

  SUBCASE("first epoch starts at the warm-up floor") {
    CHECK(lr_schedule(0, r) == doctest::Approx(5e-6).epsilon(1e-15));
  }

  SUBCASE("segments join continuously") {
    // Warm-up formula extended to its right endpoint meets the cosine start.
    const double base = r.resolved_base_lr();
    const double warm_end =
        r.lr_warmup_start + (base - r.lr_warmup_start) * 10 / 10;
    CHECK(std::fabs(lr_schedule(10, r) - warm_end) <= 1e-12);
    // Last cosine epoch hits lr_final exactly, matching the cool-down.
    const int last_cosine = r.epochs - r.lr_cooldown_epochs - 1;
    CHECK(std::fabs(lr_schedule(last_cosine, r) - r.lr_final) <= 1e-12);
    CHECK(lr_schedule(last_cosine + 1, r) == r.lr_final);
    CHECK(lr_schedule(r.epochs - 1, r) == r.lr_final);
  }

  SUBCASE("never increases after the warm-up peak") {
    for (int e = r.lr_warmup_epochs; e + 1 < r.epochs; ++e)
      CHECK(lr_schedule(e + 1, r) <= lr_schedule(e, r) + 1e-18);
  }
}

TEST_CASE("decoupled weight-decay optimizer") {
  SUBCASE("zero gradient and zero decay change nothing") {
    Params p{{"w", Tensor(Shape{3}, {1.0, -2.0, 0.5})}};
    Grads g{{"w", Tensor(Shape{3}, 0.0)}};
    OptimizerState st;
    adamw_step(p, g, st, 0.1, 0.0);
    CHECK(p["w"].data == std::vector<double>{1.0, -2.0, 0.5});
  }

  SUBCASE("zero gradient with decay shrinks by exactly lr * wd") {
    Params p{{"w", Tensor(Shape{2}, {2.0, -4.0})}};
    Grads g{{"w", Tensor(Shape{2}, 0.0)}};
    OptimizerState st;
    adamw_step(p, g, st, 0.1, 0.5);
    CHECK(p["w"](0) == doctest::Approx(2.0 * 0.95).epsilon(1e-15));
    CHECK(p["w"](1) == doctest::Approx(-4.0 * 0.95).epsilon(1e-15));
  }

  SUBCASE("repeated decay strictly shrinks magnitudes") {
    auto rng = make_rng(70);
    Params p{{"w", Tensor(Shape{5})}};
    for (double& v : p["w"].data)
      v = std::uniform_real_distribution<double>(-2.0, 2.0)(rng);
    Grads g{{"w", Tensor(Shape{5}, 0.0)}};
    OptimizerState st;
    Tensor before = p["w"];
    for (int s = 0; s < 3; ++s) {
      adamw_step(p, g, st, 0.05, 0.3);
      for (int i = 0; i < 5; ++i) {
        CHECK(std::fabs(p["w"](i)) < std::fabs(before(i)));
        CHECK(p["w"](i) * before(i) >= 0.0);  // sign preserved
      }
      before = p["w"];
    }
  }

  SUBCASE("first unit-gradient step moves by about -lr") {
    Params p{{"w", Tensor(Shape{1}, 0.0)}};
    Grads g{{"w", Tensor(Shape{1}, 1.0)}};
    OptimizerState st;
    adamw_step(p, g, st, 0.01, 0.0);
    // Bias-corrected mhat = 1, vhat = 1 after one step.
    CHECK(p["w"](0) == doctest::Approx(-0.01).epsilon(1e-7));
  }

  SUBCASE("non-finite gradients name the parameter") {
    Params p{{"blocks.0.mlp.w1", Tensor(Shape{2}, 1.0)}};
    Grads g{{"blocks.0.mlp.w1",
             Tensor(Shape{2}, {1.0, std::numeric_limits<double>::quiet_NaN()})}};
    OptimizerState st;
    CHECK_THROWS_WITH_AS(adamw_step(p, g, st, 0.1, 0.0),
                         doctest::Contains("blocks.0.mlp.w1"), Error);
  }

  SUBCASE("missing gradients are rejected") {
    Params p{{"w", Tensor(Shape{1}, 1.0)}};
    Grads g;
    OptimizerState st;
    CHECK_THROWS_AS(adamw_step(p, g, st, 0.1, 0.0), Error);
  }
}

TEST_CASE("distribution-matching fine-tune loss") {
  ModelConfig config = TinyConfig();
  Params params = init_params(config, 3);
  auto rng = make_rng(71);
  for (auto& [name, tensor] : params)
    for (double& v : tensor.data)
      v = std::uniform_real_distribution<double>(-0.4, 0.4)(rng);
  Tensor x(Shape{4, 4, 1});
  for (double& v : x.data)
    v = std::uniform_real_distribution<double>(0.1, 0.9)(rng);
  Tensor y(Shape{1, 2}, 0.0);
  y(0, 1) = 1.0;

  auto clean_ce = [&]() {
    Tape t;
    VarMap vars = bind_params(t, params, false);
    Var logits = forward_model(t, config, vars, t.leaf(x));
    return t.value(t.cross_entropy(logits, y)).data[0];
  };

  SUBCASE("beta zero is exactly the clean cross-entropy") {
    Tape t;
    VarMap vars = bind_params(t, params, false);
    Var loss = trades_loss(t, config, params, vars, x, y, 0.05, 5, 0.0, 9);
    CHECK(t.value(loss).data[0] == clean_ce());
  }

  SUBCASE("zero budget leaves no divergence term") {
    Tape t;
    VarMap vars = bind_params(t, params, false);
    Var loss = trades_loss(t, config, params, vars, x, y, 0.0, 5, 6.0, 9);
    CHECK(std::fabs(t.value(loss).data[0] - clean_ce()) <= 1e-12);
  }

  SUBCASE("the divergence term never lowers the loss") {
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
      Tape t;
      VarMap vars = bind_params(t, params, false);
      Var loss =
          trades_loss(t, config, params, vars, x, y, 0.08, 5, 1.0, seed);
      CHECK(t.value(loss).data[0] + 1e-12 >= clean_ce());
    }
  }

  SUBCASE("inner perturbation respects the budget and box") {
    Tensor delta = trades_inner_delta(config, params, x, 0.07, 5, 11);
    for (size_t i = 0; i < delta.data.size(); ++i) {
      CHECK(std::fabs(delta.data[i]) <= 0.07 + 1e-9);
      CHECK(x.data[i] + delta.data[i] >= -1e-12);
      CHECK(x.data[i] + delta.data[i] <= 1.0 + 1e-12);
    }
  }
}

TEST_CASE("one training epoch") {
  ModelConfig config = TinyConfig();
  Dataset train_set = MakeBlobs(16, 4, 4, 80);

  SUBCASE("zero budget reduces to standard training and learns blobs") {
    TrainRecipe r = QuickRecipe();
    r.eps_max = 0.0;
    r.epochs = 4;
    Params params = init_params(config, 1);
    OptimizerState opt;
    const double first =
        adversarial_train_epoch(config, params, opt, train_set, r, 0);
    double last = first;
    for (int e = 1; e < 4; ++e)
      last = adversarial_train_epoch(config, params, opt, train_set, r, e);
    CHECK(last < first);
  }

  SUBCASE("warm-up budget is used inside the epoch record") {
    TrainRecipe r = QuickRecipe();
    r.epochs = 10;
    r.eps_warmup_epochs = 10;
    r.eps_max = 0.1;
    Dataset val_set = MakeBlobs(8, 4, 4, 81);
    TrainResult res;
    r.epochs = 2;
    r.eps_warmup_epochs = 2;
    res = train_model(config, train_set, val_set, r);
    REQUIRE(res.history.size() == 2);
    CHECK(res.history[0].eps == doctest::Approx(0.05).epsilon(1e-15));
    CHECK(res.history[1].eps == doctest::Approx(0.1).epsilon(1e-15));
  }

  SUBCASE("training is reproducible bit-exactly") {
    TrainRecipe r = QuickRecipe();
    Dataset val_set = MakeBlobs(8, 4, 4, 81);
    TrainResult a = train_model(config, train_set, val_set, r);
    TrainResult b = train_model(config, train_set, val_set, r);
    REQUIRE(a.final_params.size() == b.final_params.size());
    for (const auto& [name, tensor] : a.final_params)
      CHECK(tensor.data == b.final_params.at(name).data);
    REQUIRE(a.history.size() == b.history.size());
    for (size_t i = 0; i < a.history.size(); ++i) {
      CHECK(a.history[i].train_loss == b.history[i].train_loss);
      CHECK(a.history[i].fgsm_val_acc == b.history[i].fgsm_val_acc);
    }
  }

  SUBCASE("geometry mismatches are rejected with context") {
    TrainRecipe r = QuickRecipe();
    Dataset wrong = MakeBlobs(8, 6, 6, 82);
    Params params = init_params(config, 1);
    OptimizerState opt;
    CHECK_THROWS_AS(
        adversarial_train_epoch(config, params, opt, wrong, r, 0), Error);
  }
}

TEST_CASE("early stopping picks the earliest best epoch") {
  auto rec = [](int e, double acc) {
    EpochRecord r;
    r.epoch = e;
    r.fgsm_val_acc = acc;
    return r;
  };
  SUBCASE("increasing accuracy selects the last epoch") {
    TrainHistory h{rec(0, 0.1), rec(1, 0.2), rec(2, 0.3)};
    CHECK(early_stop_select(h) == 2);
  }
  SUBCASE("interior maximum") {
    TrainHistory h{rec(0, 0.3), rec(1, 0.5), rec(2, 0.4)};
    CHECK(early_stop_select(h) == 1);
  }
  SUBCASE("ties break toward the earlier epoch") {
    TrainHistory h{rec(0, 0.5), rec(1, 0.5)};
    CHECK(early_stop_select(h) == 0);
  }
  SUBCASE("empty history is an error") {
    CHECK_THROWS_AS(early_stop_select(TrainHistory{}), Error);
  }
}

TEST_CASE("low-resolution adaptation") {
  ModelConfig base;
  base.block_kind = BlockKind::CrossCovariance;
  base.depth = 2;
  base.class_attention_depth = 2;
  base.d_model = 16;
  base.heads = 4;
  base.num_classes = 2;
  base.image_c = 3;
  base.patch_embed = PatchEmbedKind::ConvStack;
  base.conv_strides = {2, 2, 2, 2};
  base.pos_encoding = PosEncodingKind::Sinusoidal;
  base.layerscale_init = 1.0;

  SUBCASE("224-pixel input keeps the published token grid") {
    ModelConfig c = base;
    c.image_h = c.image_w = 224;
    CHECK(c.token_count() == 196);
  }

  SUBCASE("32-pixel input gains an 8x8 grid after adaptation") {
    ModelConfig c = base;
    c.image_h = c.image_w = 32;
    ModelConfig low = adapt_low_res(c);
    CHECK(low.conv_strides == std::vector<int>{1, 1, 2, 2});
    CHECK(low.token_count() == 64);
  }

  SUBCASE("parameters transfer between the two configs unchanged") {
    ModelConfig c = base;
    c.image_h = c.image_w = 32;
    ModelConfig low = adapt_low_res(c);
    Params from_base = init_params(c, 5);
    Params from_low = init_params(low, 5);
    REQUIRE(from_base.size() == from_low.size());
    for (const auto& [name, tensor] : from_base) {
      REQUIRE(from_low.count(name) == 1);
      CHECK(from_low.at(name).shape == tensor.shape);
    }
    // A forward pass under the adapted config accepts the base parameters.
    Tensor img(Shape{32, 32, 3}, 0.5);
    auto logits = forward_logits(low, from_base, img);
    CHECK(logits.size() == 2);
  }

  SUBCASE("incompatible embeddings are rejected") {
    ModelConfig linear = base;
    linear.image_h = linear.image_w = 32;
    linear.patch_embed = PatchEmbedKind::Linear;
    linear.patch_size = 4;
    linear.conv_strides.clear();
    CHECK_THROWS_AS(adapt_low_res(linear), Error);

    ModelConfig shallow = base;
    shallow.image_h = shallow.image_w = 32;
    shallow.conv_strides = {2};
    shallow.d_model = 16;
    CHECK_THROWS_AS(adapt_low_res(shallow), Error);

    ModelConfig stride1 = base;
    stride1.image_h = stride1.image_w = 32;
    stride1.conv_strides = {2, 1, 2};
    CHECK_THROWS_AS(adapt_low_res(stride1), Error);
  }
}

TEST_CASE("robustness evaluation bookkeeping") {
  ModelConfig config = TinyConfig();
  Dataset val_set = MakeBlobs(10, 4, 4, 83);
  Params params = init_params(config, 2);
  params["head.w"] = Tensor(params["head.w"].shape, 0.0);
  params["head.b"] = Tensor(params["head.b"].shape, 0.0);
  // All logits are zero, so every prediction is class 0.
  EvalMetrics m = evaluate_robustness(config, params, val_set, 0.0, 1);
  CHECK(m.clean_acc == doctest::Approx(0.5).epsilon(1e-12));
  CHECK(m.attacked_acc == m.clean_acc);
}
