#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstdio>
#include <filesystem>

#include "fixq/dataset.hpp"
#include "fixq/training.hpp"

using namespace fixq;

namespace {

real loss_of(const Model& m, const Tensor& x, const std::vector<int>& labels) {
  const ForwardTrace trace = forward(m, x, RunMode::kFloat);
  const Tensor& logits = trace.logits();
  return softmax_cross_entropy(
             logits.rank() == 2 ? logits
                                : reshape(logits, {logits.dim(0), logits.size() / logits.dim(0)}),
             labels)
      .loss;
}

// Central-difference check of every weight and bias element at eps = 1e-3,
// within 1e-4 relative error (floored at unit scale).
void gradcheck(Model& m, const Tensor& x, const std::vector<int>& labels) {
  const real eps = 1e-3, tol = 1e-4;
  const ForwardTrace trace = forward(m, x, RunMode::kFloat);
  const BackwardResult back = backward(m, trace, labels);
  for (std::size_t j = 0; j < m.params.size(); ++j) {
    for (auto [tensor, grad] : {std::pair{&m.params[j].weights, &back.grads.weights[j]},
                                std::pair{&m.params[j].bias, &back.grads.bias[j]}}) {
      for (std::int64_t e = 0; e < tensor->size(); ++e) {
        const real saved = (*tensor)[e];
        (*tensor)[e] = saved + eps;
        const real lp = loss_of(m, x, labels);
        (*tensor)[e] = saved - eps;
        const real lm = loss_of(m, x, labels);
        (*tensor)[e] = saved;
        const real fd = (lp - lm) / (2 * eps);
        const real g = (*grad)[e];
        CAPTURE(m.params[j].desc.name, e, fd, g);
        REQUIRE(std::abs(fd - g) <= tol * std::max({real(1), std::abs(fd), std::abs(g)}));
      }
    }
  }
}

NetDescriptor tiny_fc_net(std::int64_t in, std::int64_t out, bool quantize = false,
                          FixedPointFormat wfmt = FixedPointFormat(2, 14)) {
  NetDescriptor net;
  net.name = "tiny-fc";
  net.in_channels = 1;
  net.in_height = 1;
  net.in_width = in;
  LayerDescriptor input;
  input.kind = LayerKind::kInput;
  input.name = "input";
  net.layers.push_back(input);
  LayerDescriptor fc;
  fc.kind = LayerKind::kFullyConnected;
  fc.name = "fc1";
  fc.in_channels = in;
  fc.out_channels = out;
  fc.quant.enabled = quantize;
  fc.quant.weight_fmt = wfmt;
  fc.quant.act_fmt = wfmt;
  net.layers.push_back(fc);
  return net;
}

}  // namespace

TEST_CASE("softmax cross-entropy basics") {
  const Tensor logits = Tensor::from({1, 4}, {0.0, 0.0, 0.0, 0.0});
  const LossResult r = softmax_cross_entropy(logits, {2});
  CHECK(r.loss == Catch::Approx(std::log(4.0)));

  // gradient against finite differences
  Tensor l2 = Tensor::from({2, 3}, {0.3, -1.2, 0.8, 2.0, 0.1, -0.4});
  const std::vector<int> labels = {0, 2};
  const LossResult base = softmax_cross_entropy(l2, labels);
  const real eps = 1e-6;
  for (std::int64_t i = 0; i < l2.size(); ++i) {
    const real saved = l2[i];
    l2[i] = saved + eps;
    const real lp = softmax_cross_entropy(l2, labels).loss;
    l2[i] = saved - eps;
    const real lm = softmax_cross_entropy(l2, labels).loss;
    l2[i] = saved;
    CHECK(base.dlogits[i] == Catch::Approx((lp - lm) / (2 * eps)).margin(1e-8));
  }

  CHECK_THROWS_AS(softmax_cross_entropy(logits, {4}), validation_error);
  CHECK_THROWS_AS(softmax_cross_entropy(logits, {0, 1}), validation_error);
}

TEST_CASE("gradient check: single fc + softmax on one sample") {
  Model m = init_model(tiny_fc_net(6, 3), 11);
  rng::Counter rng(7);
  Tensor x({1, 1, 1, 6});
  for (std::int64_t i = 0; i < x.size(); ++i) x[i] = rng.gaussian();
  gradcheck(m, x, {1});
}

TEST_CASE("gradient check: conv layer on a 1x1x5x5 input") {
  NetDescriptor net;
  net.name = "tiny-conv";
  net.in_channels = 1;
  net.in_height = 5;
  net.in_width = 5;
  LayerDescriptor input;
  input.kind = LayerKind::kInput;
  input.name = "input";
  net.layers.push_back(input);
  LayerDescriptor conv;
  conv.kind = LayerKind::kConv;
  conv.name = "conv1";
  conv.in_channels = 1;
  conv.out_channels = 3;
  conv.kernel = 3;
  conv.pad = 0;
  net.layers.push_back(conv);
  LayerDescriptor fc;
  fc.kind = LayerKind::kFullyConnected;
  fc.name = "fc1";
  fc.in_channels = 27;
  fc.out_channels = 2;
  net.layers.push_back(fc);

  Model m = init_model(net, 23);
  rng::Counter rng(5);
  Tensor x({1, 1, 5, 5});
  for (std::int64_t i = 0; i < x.size(); ++i) x[i] = rng.gaussian();
  gradcheck(m, x, {0});
}

TEST_CASE("gradient check: all layer kinds through conv+act+pool+fc") {
  NetDescriptor net;
  net.name = "tiny-full";
  net.in_channels = 1;
  net.in_height = 6;
  net.in_width = 6;
  LayerDescriptor input;
  input.kind = LayerKind::kInput;
  input.name = "input";
  net.layers.push_back(input);
  LayerDescriptor conv;
  conv.kind = LayerKind::kConv;
  conv.name = "conv1";
  conv.in_channels = 1;
  conv.out_channels = 2;
  conv.kernel = 3;
  conv.pad = 1;
  net.layers.push_back(conv);
  LayerDescriptor act;
  act.kind = LayerKind::kAct;
  act.name = "act1";
  net.layers.push_back(act);
  LayerDescriptor pool;
  pool.kind = LayerKind::kMaxPool;
  pool.name = "pool1";
  net.layers.push_back(pool);
  LayerDescriptor fc;
  fc.kind = LayerKind::kFullyConnected;
  fc.name = "fc1";
  fc.in_channels = 18;
  fc.out_channels = 3;
  net.layers.push_back(fc);

  Model m = init_model(net, 37);
  rng::Counter rng(19);
  Tensor x({2, 1, 6, 6});
  for (std::int64_t i = 0; i < x.size(); ++i) x[i] = rng.gaussian();
  gradcheck(m, x, {2, 0});
}

TEST_CASE("gradient check: strided conv and global pooling") {
  NetDescriptor net;
  net.name = "tiny-strided";
  net.in_channels = 2;
  net.in_height = 7;
  net.in_width = 7;
  LayerDescriptor input;
  input.kind = LayerKind::kInput;
  input.name = "input";
  net.layers.push_back(input);
  LayerDescriptor conv;
  conv.kind = LayerKind::kConv;
  conv.name = "conv1";
  conv.in_channels = 2;
  conv.out_channels = 3;
  conv.kernel = 3;
  conv.stride = 2;
  conv.pad = 1;
  net.layers.push_back(conv);
  LayerDescriptor act;
  act.kind = LayerKind::kAct;
  act.name = "act1";
  net.layers.push_back(act);
  LayerDescriptor pool;
  pool.kind = LayerKind::kMaxPool;
  pool.name = "pool1";
  pool.pool_window = kGlobalPool;
  pool.pool_stride = 1;
  net.layers.push_back(pool);
  LayerDescriptor fc;
  fc.kind = LayerKind::kFullyConnected;
  fc.name = "fc1";
  fc.in_channels = 3;
  fc.out_channels = 2;
  net.layers.push_back(fc);

  Model m = init_model(net, 61);
  rng::Counter rng(43);
  Tensor x({2, 2, 7, 7});
  for (std::int64_t i = 0; i < x.size(); ++i) x[i] = rng.gaussian();
  gradcheck(m, x, {1, 0});
}

TEST_CASE("backward requires a complete forward cache") {
  Model m = init_model(tiny_fc_net(4, 2), 3);
  ForwardTrace empty;
  CHECK_THROWS_WITH(backward(m, empty, {0}), Catch::Matchers::ContainsSubstring("cache"));
}

TEST_CASE("sgd_step basics and the fixed-point trap mechanism") {
  const FixedPointFormat q13(1, 3);  // step 0.125
  NetDescriptor net = tiny_fc_net(1, 1, true, q13);
  Model m = make_model(net);
  m.params[0].weights[0] = 0.25;  // on grid
  m.params[0].refresh(0);

  Gradients zero;
  zero.weights = {Tensor({1, 1})};
  zero.bias = {Tensor({1})};

  SECTION("lr = 0 leaves the shadow unchanged") {
    Gradients g = zero;
    g.weights[0][0] = 123.0;
    sgd_step(m, g, 0.0, 1);
    CHECK(m.params[0].weights[0] == 0.25);
    CHECK(m.params[0].quantized_weights[0] == 0.25);
  }

  SECTION("NaN gradients abort with the layer name") {
    Gradients g = zero;
    g.weights[0][0] = std::nan("");
    CHECK_THROWS_WITH(sgd_step(m, g, 0.1, 1), Catch::Matchers::ContainsSubstring("fc1"));
  }

  SECTION("sub-step deterministic refresh absorbs the update") {
    Gradients g = zero;
    g.weights[0][0] = -0.45 * q13.step();  // shadow moves up by 0.45 steps at lr 1
    sgd_step(m, g, 1.0, 7);
    CHECK(m.params[0].weights[0] == Catch::Approx(0.25 + 0.45 * q13.step()));
    CHECK(m.params[0].quantized_weights[0] == 0.25);  // trapped
  }

  SECTION("the same sub-step update moves a stochastic refresh with p = update/step") {
    net.layers[1].quant.scheme = RoundingScheme::kStochastic;
    int moved = 0;
    const int seeds = 1000;
    for (int s = 0; s < seeds; ++s) {
      Model ms = make_model(net);
      ms.params[0].weights[0] = 0.25;
      Gradients g = zero;
      g.weights[0][0] = -0.45 * q13.step();
      sgd_step(ms, g, 1.0, rng::derive(0xabcdULL, static_cast<std::uint64_t>(s)));
      const real q = ms.params[0].quantized_weights[0];
      REQUIRE((q == 0.25 || q == 0.375));
      moved += q == 0.375;
    }
    const real freq = static_cast<real>(moved) / seeds;
    CHECK(std::abs(freq - 0.45) / 0.45 <= 0.10);
  }
}

TEST_CASE("quantized copies only change through refresh-from-shadow") {
  NetDescriptor net = build_pattern_net(true, FixedPointFormat(2, 14), FixedPointFormat(8, 8));
  Model m = init_model(net, 99);
  const Dataset data = make_oriented_patterns(16, 5);
  const ForwardTrace trace = forward(m, data.images, RunMode::kQuantized, 3);
  const BackwardResult back = backward(m, trace, data.labels);
  sgd_step(m, back.grads, 0.01, 55);
  for (std::size_t j = 0; j < m.params.size(); ++j) {
    const LayerState& st = m.params[j];
    CHECK(st.quantized_weights ==
          quantize_tensor(st.weights, st.desc.quant.weight_fmt, st.desc.quant.scheme,
                          rng::derive(rng::derive(55, j), 1)));
  }
}

TEST_CASE("glorot initialization: bounds, variance, determinism") {
  LayerDescriptor fc;
  fc.kind = LayerKind::kFullyConnected;
  fc.name = "fc";
  fc.in_channels = 50;
  fc.out_channels = 200;  // 10^4 samples
  const Tensor w = init_weights(fc, 4321);
  const real bound = std::sqrt(6.0 / (50 + 200));
  real sum = 0, sum_sq = 0;
  for (std::int64_t i = 0; i < w.size(); ++i) {
    REQUIRE(std::abs(w[i]) <= bound);
    sum += w[i];
    sum_sq += w[i] * w[i];
  }
  const real n = static_cast<real>(w.size());
  const real var = sum_sq / n - (sum / n) * (sum / n);
  CHECK(var == Catch::Approx(2.0 / (50 + 200)).epsilon(0.10));

  CHECK(init_weights(fc, 4321) == w);
  CHECK(init_weights(fc, 4322) != w);

  // conv fan counts include the kernel area
  LayerDescriptor conv;
  conv.kind = LayerKind::kConv;
  conv.name = "conv";
  conv.in_channels = 2;
  conv.out_channels = 4;
  conv.kernel = 3;
  const Tensor cw = init_weights(conv, 1);
  const real cbound = std::sqrt(6.0 / (2 * 9 + 4 * 9));
  for (std::int64_t i = 0; i < cw.size(); ++i) REQUIRE(std::abs(cw[i]) <= cbound);

  LayerDescriptor pool;
  pool.kind = LayerKind::kMaxPool;
  CHECK_THROWS_AS(init_weights(pool, 0), validation_error);
}

TEST_CASE("finetune with zero epochs returns the initial model and empty history") {
  const NetDescriptor net = build_pattern_net(false);
  const Dataset data = make_oriented_patterns(32, 9);
  const auto [train, eval] = split_dataset(data, 0.25);
  TrainConfig cfg;
  cfg.epochs = 0;
  cfg.seed = 17;
  const Model init = init_model(net, cfg.seed);
  const TrainResult r = finetune(net, init, train, eval, cfg);
  CHECK(r.history.empty());
  for (std::size_t j = 0; j < init.params.size(); ++j) {
    CHECK(r.model.params[j].weights == init.params[j].weights);
    CHECK(r.model.params[j].bias == init.params[j].bias);
  }
}

TEST_CASE("finetune is deterministic given (seed, config, data)") {
  const NetDescriptor net = build_pattern_net(true);
  const Dataset data = make_oriented_patterns(64, 21);
  const auto [train, eval] = split_dataset(data, 0.25);
  TrainConfig cfg;
  cfg.epochs = 2;
  cfg.seed = 5;
  cfg.scheme = RoundingScheme::kStochastic;
  cfg.batch_size = 8;
  const TrainResult a = finetune(net, {}, train, eval, cfg);
  const TrainResult b = finetune(net, {}, train, eval, cfg);
  REQUIRE(a.history.size() == b.history.size());
  for (std::size_t e = 0; e < a.history.size(); ++e) {
    CHECK(a.history[e].loss == b.history[e].loss);
    CHECK(a.history[e].accuracy == b.history[e].accuracy);
    CHECK(a.history[e].layer_sparsity == b.history[e].layer_sparsity);
  }
  for (std::size_t j = 0; j < a.model.params.size(); ++j)
    CHECK(a.model.params[j].weights == b.model.params[j].weights);
}

TEST_CASE("finetune stops once accuracy plateaus") {
  // the task saturates within an epoch, so the plateau rule (no 0.1-point
  // improvement for 3 consecutive epochs) cuts a 12-epoch budget short
  const NetDescriptor net = build_pattern_net(false);
  const Dataset data = make_oriented_patterns(128, 33);
  const auto [train, eval] = split_dataset(data, 0.25);
  TrainConfig cfg;
  cfg.epochs = 12;
  cfg.seed = 2;
  cfg.learning_rate = 0.1;
  const TrainResult r = finetune(net, {}, train, eval, cfg);
  REQUIRE(!r.history.empty());
  CHECK(r.history.size() < 12);
  CHECK(r.history.back().accuracy >= 0.9);
}

TEST_CASE("finetune aborts on divergence with diagnostics") {
  const NetDescriptor net = build_pattern_net(false);
  const Dataset data = make_oriented_patterns(32, 2);
  const auto [train, eval] = split_dataset(data, 0.25);
  TrainConfig cfg;
  cfg.epochs = 30;
  // a pretrained weight near the f64 overflow edge blows up within two steps
  Model poisoned = init_model(net, 1);
  poisoned.params[0].weights[0] = 1e200;
  CHECK_THROWS_AS(finetune(net, poisoned, train, eval, cfg), numeric_error);
}

TEST_CASE("escape property: stochastic refresh reaches lower loss on an asymmetric toy") {
  // One parameter on the Q1.3 grid (step 0.125): the loss is much steeper
  // left of the optimum t = 0.3, so the nearest grid point 0.25 that
  // deterministic rounding pins is the worse of the two neighbors.
  const FixedPointFormat q13(1, 3);
  const real t = 0.3, steep = 10.0, shallow = 0.1;
  const auto loss_at = [&](real w) {
    const real d = w - t;
    return real(0.5) * (d < 0 ? steep : shallow) * d * d;
  };
  const auto grad_at = [&](real w) {  // gradient at the full-precision shadow
    const real d = w - t;
    return (d < 0 ? steep : shallow) * d;
  };

  const int steps = 200;
  const real lr = 0.05;

  // deterministic: shadow converges to t, quantized copy pinned at 0.25
  real shadow = 0.25;
  std::vector<real> det_losses;
  for (int s = 0; s < steps; ++s) {
    const real q = quantize_det(shadow, q13);
    det_losses.push_back(loss_at(q));
    shadow -= lr * grad_at(shadow);
  }
  for (int s = 0; s < steps; ++s) CHECK(det_losses[s] == det_losses[0]);
  const real det_loss = det_losses.back();
  CHECK(det_loss == Catch::Approx(loss_at(0.25)));

  // stochastic: same dynamics, refresh resamples the two neighbors
  real stoch_loss_sum = 0;
  std::int64_t count = 0;
  for (std::uint64_t seed = 0; seed < 200; ++seed) {
    real w = 0.25;
    rng::Counter rng(seed);
    for (int s = 0; s < steps; ++s) {
      const real q = quantize_stoch(w, q13, rng);
      if (s >= steps / 2) {  // measure after burn-in
        stoch_loss_sum += loss_at(q);
        ++count;
      }
      w -= lr * grad_at(w);
    }
  }
  const real stoch_loss = stoch_loss_sum / static_cast<real>(count);
  CHECK(stoch_loss < det_loss);
}

TEST_CASE("history files round-trip") {
  std::vector<EpochRecord> history;
  for (int e = 0; e < 3; ++e) {
    EpochRecord r;
    r.epoch = e;
    r.loss = 1.0 / (e + 1);
    r.accuracy = 0.5 + 0.1 * e;
    r.layer_sparsity = {0.25, 0.5 + 0.01 * e};
    r.mean_sparsity = (r.layer_sparsity[0] + r.layer_sparsity[1]) / 2;
    history.push_back(r);
  }
  const std::string path = std::filesystem::temp_directory_path() / "fixq_history_test.jsonl";
  save_history(history, path);
  const std::vector<EpochRecord> back = load_history(path);
  REQUIRE(back.size() == history.size());
  for (std::size_t e = 0; e < back.size(); ++e) {
    CHECK(back[e].epoch == history[e].epoch);
    CHECK(back[e].loss == history[e].loss);
    CHECK(back[e].accuracy == history[e].accuracy);
    CHECK(back[e].layer_sparsity == history[e].layer_sparsity);
  }
  std::remove(path.c_str());
}

TEST_CASE("oriented-pattern dataset: determinism, balance, file round-trip") {
  const Dataset a = make_oriented_patterns(64, 77);
  const Dataset b = make_oriented_patterns(64, 77);
  CHECK(a.images == b.images);
  CHECK(a.labels == b.labels);
  CHECK(a.classes == 4);
  CHECK(a.images.shape() == Shape{64, 1, 16, 16});

  int counts[4] = {0, 0, 0, 0};
  for (int label : a.labels) ++counts[label];
  for (int c = 0; c < 4; ++c) CHECK(counts[c] == 16);

  const Dataset c = make_oriented_patterns(64, 78);
  CHECK(c.images != a.images);

  const std::string path = std::filesystem::temp_directory_path() / "fixq_dataset_test.fxqd";
  save_dataset(a, path);
  const Dataset back = load_dataset(path);
  CHECK(back.labels == a.labels);
  CHECK(back.classes == a.classes);
  REQUIRE(back.images.shape() == a.images.shape());
  // images pass through f32 on disk
  for (std::int64_t i = 0; i < a.images.size(); ++i)
    CHECK(back.images[i] == static_cast<real>(static_cast<float>(a.images[i])));
  std::remove(path.c_str());

  const Dataset synth = load_data_source("synth:n=12,seed=77");
  CHECK(synth.size() == 12);
  CHECK_THROWS_AS(load_data_source("synth:n=12,zap=1"), validation_error);

  const auto [train, eval] = split_dataset(a, 0.25);
  CHECK(train.size() == 48);
  CHECK(eval.size() == 16);
}
