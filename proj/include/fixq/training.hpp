#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "fixq/common.hpp"
#include "fixq/dataset.hpp"
#include "fixq/fixedpoint.hpp"
#include "fixq/inference.hpp"
#include "fixq/netdesc.hpp"
#include "fixq/rng.hpp"
#include "fixq/tensor.hpp"

namespace fixq {

// Shadow/quantized tensor pair of one parameter. The optimizer writes only
// the shadow; LayerState::refresh is the single writer of the quantized copy.
struct DualCopyParam {
  Tensor* shadow = nullptr;
  Tensor* quantized = nullptr;
};

// Update surface of a model: weight and bias pairs per weighted layer.
inline std::vector<DualCopyParam> dual_copy_params(Model& m) {
  std::vector<DualCopyParam> out;
  out.reserve(2 * m.params.size());
  for (LayerState& st : m.params) {
    out.push_back({&st.weights, &st.quantized_weights});
    out.push_back({&st.bias, &st.quantized_bias});
  }
  return out;
}

// Glorot-uniform initialization, fan counts from the layer geometry. Values
// pass through f32 so freshly initialized models round-trip the container
// format bit-exactly.
inline Tensor init_weights(const LayerDescriptor& layer, std::uint64_t seed) {
  Shape shape;
  std::int64_t fan_in = 0, fan_out = 0;
  if (layer.kind == LayerKind::kConv) {
    shape = {layer.out_channels, layer.in_channels, layer.kernel, layer.kernel};
    fan_in = layer.in_channels * layer.kernel * layer.kernel;
    fan_out = layer.out_channels * layer.kernel * layer.kernel;
  } else if (layer.kind == LayerKind::kFullyConnected) {
    shape = {layer.out_channels, layer.in_channels};
    fan_in = layer.in_channels;
    fan_out = layer.out_channels;
  } else {
    throw validation_error("init_weights: layer " + layer.name + " has no weights");
  }
  const real bound = std::sqrt(real(6) / static_cast<real>(fan_in + fan_out));
  Tensor t(shape);
  rng::Counter rng(seed);
  for (std::int64_t i = 0; i < t.size(); ++i)
    t[i] = static_cast<real>(static_cast<float>((2 * rng.uniform() - 1) * bound));
  return t;
}

inline Model init_model(const NetDescriptor& net, std::uint64_t seed) {
  Model m = make_model(net);
  for (std::size_t j = 0; j < m.params.size(); ++j)
    m.params[j].weights = init_weights(m.params[j].desc, rng::derive(seed, j));
  m.refresh(rng::derive(seed, 0x5eedULL));
  return m;
}

// Mean softmax cross-entropy over the batch plus its gradient w.r.t. the
// logits and the batch accuracy (argmax, first index wins ties).
struct LossResult {
  real loss = 0;
  real accuracy = 0;
  Tensor dlogits;
};

inline LossResult softmax_cross_entropy(const Tensor& logits, const std::vector<int>& labels) {
  if (logits.rank() != 2)
    throw validation_error("softmax_cross_entropy: expected (N,K) logits, got " +
                           shape_str(logits.shape()));
  const std::int64_t n = logits.dim(0), k = logits.dim(1);
  if (static_cast<std::int64_t>(labels.size()) != n)
    throw validation_error("softmax_cross_entropy: " + std::to_string(labels.size()) +
                           " labels for " + std::to_string(n) + " samples");
  LossResult res;
  res.dlogits = Tensor({n, k});
  std::int64_t correct = 0;
  for (std::int64_t i = 0; i < n; ++i) {
    const int label = labels[static_cast<std::size_t>(i)];
    if (label < 0 || label >= k)
      throw validation_error("softmax_cross_entropy: label " + std::to_string(label) +
                             " out of range for " + std::to_string(k) + " classes");
    real mx = logits.at(i, std::int64_t(0));
    std::int64_t arg = 0;
    for (std::int64_t j = 1; j < k; ++j)
      if (logits.at(i, j) > mx) {
        mx = logits.at(i, j);
        arg = j;
      }
    if (arg == label) ++correct;
    real sum = 0;
    for (std::int64_t j = 0; j < k; ++j) sum += std::exp(logits.at(i, j) - mx);
    res.loss += -(logits.at(i, label) - mx - std::log(sum));
    for (std::int64_t j = 0; j < k; ++j) {
      const real p = std::exp(logits.at(i, j) - mx) / sum;
      res.dlogits.at(i, j) = (p - (j == label ? 1 : 0)) / static_cast<real>(n);
    }
  }
  res.loss /= static_cast<real>(n);
  res.accuracy = static_cast<real>(correct) / static_cast<real>(n);
  return res;
}

struct Gradients {
  std::vector<Tensor> weights;  // aligned with Model::params
  std::vector<Tensor> bias;
};

struct BackwardResult {
  Gradients grads;
  real loss = 0;
  real accuracy = 0;
};

// Backpropagation of the softmax cross-entropy loss through the cached
// forward trace. Quantizers are treated as identity (straight-through): the
// chain rule runs over the values the forward pass actually used, and the
// resulting gradients apply to the shadow parameters. Gradients themselves
// are never quantized.
inline BackwardResult backward(const Model& m, const ForwardTrace& trace,
                               const std::vector<int>& labels) {
  if (trace.activations.size() != m.net.layers.size())
    throw validation_error("backward: missing forward activation cache");
  const std::vector<std::size_t> widx = weighted_layers(m.net);

  BackwardResult res;
  res.grads.weights.resize(m.params.size());
  res.grads.bias.resize(m.params.size());

  const Tensor& logits = trace.logits();
  LossResult loss = softmax_cross_entropy(
      logits.rank() == 2 ? logits : reshape(logits, {logits.dim(0), logits.size() / logits.dim(0)}),
      labels);
  res.loss = loss.loss;
  res.accuracy = loss.accuracy;

  Tensor dy = std::move(loss.dlogits);
  std::size_t j = m.params.size();

  for (std::size_t i = m.net.layers.size(); i-- > 1;) {
    const LayerDescriptor& l = m.net.layers[i];
    const Tensor& x = trace.activations[i - 1];
    const Tensor& y = trace.activations[i];

    switch (l.kind) {
      case LayerKind::kSoftmax:
        throw validation_error("backward: explicit softmax layers are inference-only; "
                               "the loss fuses softmax with cross-entropy");
      case LayerKind::kAct: {
        check_same_shape(dy, y, "backward/act");
        Tensor dx(x.shape());
        for (std::int64_t e = 0; e < x.size(); ++e) dx[e] = y[e] > 0 ? dy[e] : real(0);
        dy = std::move(dx);
        break;
      }
      case LayerKind::kMaxPool: {
        // route gradient to the first maximum in scan order
        const bool global = l.pool_window == kGlobalPool;
        const std::int64_t gh = global ? x.dim(2) : l.pool_window;
        const std::int64_t gw = global ? x.dim(3) : l.pool_window;
        const std::int64_t s = global ? 1 : l.pool_stride;
        Tensor dx(x.shape());
        for (std::int64_t ni = 0; ni < y.dim(0); ++ni)
          for (std::int64_t ci = 0; ci < y.dim(1); ++ci)
            for (std::int64_t oy = 0; oy < y.dim(2); ++oy)
              for (std::int64_t ox = 0; ox < y.dim(3); ++ox) {
                std::int64_t by = oy * s, bx = ox * s;
                real best = x.at(ni, ci, by, bx);
                for (std::int64_t ky = 0; ky < gh; ++ky)
                  for (std::int64_t kx = 0; kx < gw; ++kx)
                    if (x.at(ni, ci, oy * s + ky, ox * s + kx) > best) {
                      best = x.at(ni, ci, oy * s + ky, ox * s + kx);
                      by = oy * s + ky;
                      bx = ox * s + kx;
                    }
                dx.at(ni, ci, by, bx) += dy.at(ni, ci, oy, ox);
              }
        dy = std::move(dx);
        break;
      }
      case LayerKind::kFullyConnected: {
        --j;
        const LayerState& st = m.params[j];
        const Tensor& w = st.forward_weights(trace.mode);
        const std::int64_t n = x.dim(0);
        const std::int64_t flat = x.size() / n;
        const std::int64_t o = l.out_channels;
        Tensor dw({o, flat});
        Tensor db({o});
        Tensor dx(x.shape());
        for (std::int64_t ni = 0; ni < n; ++ni) {
          const real* xin = x.data() + ni * flat;
          real* dxin = dx.data() + ni * flat;
          for (std::int64_t oc = 0; oc < o; ++oc) {
            const real g = dy.at(ni, oc);
            db[oc] += g;
            real* dwrow = dw.data() + oc * flat;
            const real* wrow = w.data() + oc * flat;
            for (std::int64_t e = 0; e < flat; ++e) {
              dwrow[e] += g * xin[e];
              dxin[e] += g * wrow[e];
            }
          }
        }
        res.grads.weights[j] = std::move(dw);
        res.grads.bias[j] = std::move(db);
        dy = std::move(dx);
        break;
      }
      case LayerKind::kConv: {
        --j;
        const LayerState& st = m.params[j];
        const Tensor& w = st.forward_weights(trace.mode);
        const std::int64_t n = x.dim(0), c = x.dim(1), h = x.dim(2), wd = x.dim(3);
        const std::int64_t o = l.out_channels, k = l.kernel, stride = l.stride, pad = l.pad;
        const std::int64_t oh = dy.dim(2), ow = dy.dim(3);
        Tensor dw(w.shape());
        Tensor db({o});
        Tensor dx(x.shape());
        for (std::int64_t ni = 0; ni < n; ++ni)
          for (std::int64_t oc = 0; oc < o; ++oc)
            for (std::int64_t oy = 0; oy < oh; ++oy)
              for (std::int64_t ox = 0; ox < ow; ++ox) {
                const real g = dy.at(ni, oc, oy, ox);
                db[oc] += g;
                if (g == 0) continue;
                for (std::int64_t ci = 0; ci < c; ++ci)
                  for (std::int64_t ky = 0; ky < k; ++ky) {
                    const std::int64_t iy = oy * stride + ky - pad;
                    if (iy < 0 || iy >= h) continue;
                    for (std::int64_t kx = 0; kx < k; ++kx) {
                      const std::int64_t ix = ox * stride + kx - pad;
                      if (ix < 0 || ix >= wd) continue;
                      dw.at(oc, ci, ky, kx) += g * x.at(ni, ci, iy, ix);
                      dx.at(ni, ci, iy, ix) += g * w.at(oc, ci, ky, kx);
                    }
                  }
              }
        res.grads.weights[j] = std::move(dw);
        res.grads.bias[j] = std::move(db);
        dy = std::move(dx);
        break;
      }
      case LayerKind::kInput:
        break;
    }
  }
  return res;
}

// shadow <- shadow - lr * grad, then quantized copies are refreshed from the
// shadows so the next forward never sees a stale cache.
inline void sgd_step(Model& m, const Gradients& g, real lr, std::uint64_t refresh_seed) {
  if (g.weights.size() != m.params.size() || g.bias.size() != m.params.size())
    throw validation_error("sgd_step: gradient count does not match model");
  for (std::size_t j = 0; j < m.params.size(); ++j) {
    LayerState& st = m.params[j];
    check_same_shape(g.weights[j], st.weights, "sgd_step/weights");
    check_same_shape(g.bias[j], st.bias, "sgd_step/bias");
    for (const Tensor* t : {&g.weights[j], &g.bias[j]})
      for (std::int64_t e = 0; e < t->size(); ++e)
        if (!std::isfinite((*t)[e]))
          throw numeric_error("sgd_step: NaN gradient in layer " + st.desc.name);
    for (std::int64_t e = 0; e < st.weights.size(); ++e) st.weights[e] -= lr * g.weights[j][e];
    for (std::int64_t e = 0; e < st.bias.size(); ++e) st.bias[e] -= lr * g.bias[j][e];
    st.cache_fresh = false;
  }
  m.refresh(refresh_seed);
}

struct SgdState {
  std::vector<Tensor> vel_weights, vel_bias;
};

// Momentum variant: v <- mu*v + grad; shadow <- shadow - lr*v.
inline void sgd_step(Model& m, const Gradients& g, real lr, real momentum, SgdState& state,
                     std::uint64_t refresh_seed) {
  if (momentum == 0 && state.vel_weights.empty()) {
    sgd_step(m, g, lr, refresh_seed);
    return;
  }
  if (state.vel_weights.empty()) {
    for (const LayerState& st : m.params) {
      state.vel_weights.emplace_back(st.weights.shape());
      state.vel_bias.emplace_back(st.bias.shape());
    }
  }
  Gradients blended;
  blended.weights.resize(m.params.size());
  blended.bias.resize(m.params.size());
  for (std::size_t j = 0; j < m.params.size(); ++j) {
    blended.weights[j] = Tensor(m.params[j].weights.shape());
    blended.bias[j] = Tensor(m.params[j].bias.shape());
    for (std::int64_t e = 0; e < blended.weights[j].size(); ++e)
      blended.weights[j][e] = state.vel_weights[j][e] =
          momentum * state.vel_weights[j][e] + g.weights[j][e];
    for (std::int64_t e = 0; e < blended.bias[j].size(); ++e)
      blended.bias[j][e] = state.vel_bias[j][e] = momentum * state.vel_bias[j][e] + g.bias[j][e];
  }
  sgd_step(m, blended, lr, refresh_seed);
}

struct TrainConfig {
  real learning_rate = 0.05;
  real lr_divisor_for_lp = 10;  // effective LP rate = learning_rate / lr_divisor_for_lp
  real momentum = 0;
  int batch_size = 16;
  int epochs = 10;
  std::uint64_t seed = 1;
  RoundingScheme scheme = RoundingScheme::kDeterministic;
  std::optional<real> input_scale;  // overrides the descriptor's scale when set
  real plateau_min_delta = 0.1;     // accuracy points
  int plateau_patience = 3;         // consecutive epochs without improvement
};

struct EpochRecord {
  int epoch = 0;
  real loss = 0;
  real accuracy = 0;
  real mean_sparsity = 0;
  std::vector<real> layer_sparsity;  // per act layer, network order
};

struct TrainResult {
  Model model;
  std::vector<EpochRecord> history;
};

struct EvalResult {
  real accuracy = 0;
  real loss = 0;
};

// Deterministic-rounding evaluation pass (stochastic draws would make
// reported accuracies seed-dependent).
inline EvalResult evaluate(const Model& m, const Dataset& data, RunMode mode) {
  const ForwardTrace trace = forward(m, data.images, mode, 0, RoundingScheme::kDeterministic);
  const Tensor& logits = trace.logits();
  const LossResult loss = softmax_cross_entropy(
      logits.rank() == 2 ? logits : reshape(logits, {logits.dim(0), logits.size() / logits.dim(0)}),
      data.labels);
  return {loss.accuracy, loss.loss};
}

namespace detail {

inline std::vector<std::int64_t> shuffled_indices(std::int64_t n, std::uint64_t seed) {
  std::vector<std::int64_t> idx(static_cast<std::size_t>(n));
  for (std::int64_t i = 0; i < n; ++i) idx[static_cast<std::size_t>(i)] = i;
  rng::Counter rng(seed);
  for (std::int64_t i = n - 1; i > 0; --i)
    std::swap(idx[static_cast<std::size_t>(i)],
              idx[static_cast<std::size_t>(rng.below(static_cast<std::uint64_t>(i + 1)))]);
  return idx;
}

inline Tensor gather_images(const Tensor& images, const std::vector<std::int64_t>& idx,
                            std::int64_t from, std::int64_t count) {
  const std::int64_t stride = images.size() / images.dim(0);
  Shape shape = images.shape();
  shape[0] = count;
  Tensor out(shape);
  for (std::int64_t i = 0; i < count; ++i)
    std::copy_n(images.data() + idx[static_cast<std::size_t>(from + i)] * stride, stride,
                out.data() + i * stride);
  return out;
}

}  // namespace detail

// Dual-copy training loop: quantized forward, full-precision backward via
// the straight-through estimator, shadow updates, quantized refresh after
// every step. Stops early once eval accuracy has not improved by
// plateau_min_delta points for plateau_patience consecutive epochs.
inline TrainResult finetune(const NetDescriptor& net_in, const std::optional<Model>& init,
                            const Dataset& train, const Dataset& eval, const TrainConfig& cfg) {
  NetDescriptor net = net_in;
  if (cfg.input_scale) net.input_scale = *cfg.input_scale;
  bool any_quant = false;
  for (LayerDescriptor& l : net.layers) {
    if (l.quant.enabled) any_quant = true;
    l.quant.scheme = cfg.scheme;
  }
  validate(net);
  if (train.size() < 1 || eval.size() < 1)
    throw validation_error("finetune: empty training or evaluation set");
  if (cfg.batch_size < 1) throw validation_error("finetune: batch size must be >= 1");
  if (!(cfg.learning_rate >= 0)) throw validation_error("finetune: bad learning rate");
  if (cfg.lr_divisor_for_lp < 1) throw validation_error("finetune: lr divisor must be >= 1");

  TrainResult result;
  if (init) {
    // adopt pretrained shadow parameters under the (possibly requantized) net
    result.model = make_model(net);
    if (init->params.size() != result.model.params.size())
      throw validation_error("finetune: pretrained model does not match descriptor");
    for (std::size_t j = 0; j < result.model.params.size(); ++j) {
      check_same_shape(init->params[j].weights, result.model.params[j].weights, "finetune/init");
      result.model.params[j].weights = init->params[j].weights;
      result.model.params[j].bias = init->params[j].bias;
    }
    result.model.refresh(rng::derive(cfg.seed, 0x1217ULL));
  } else {
    result.model = init_model(net, cfg.seed);
  }
  Model& model = result.model;

  const real lr = any_quant ? cfg.learning_rate / cfg.lr_divisor_for_lp : cfg.learning_rate;
  SgdState sgd;
  real best_accuracy = -1;
  int stalled_epochs = 0;
  std::uint64_t step = 0;

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const std::vector<std::int64_t> order =
        detail::shuffled_indices(train.size(), rng::derive(cfg.seed, 0xe90c + epoch));
    real epoch_loss = 0;
    std::int64_t batches = 0;

    for (std::int64_t from = 0; from < train.size(); from += cfg.batch_size) {
      const std::int64_t count = std::min<std::int64_t>(cfg.batch_size, train.size() - from);
      const Tensor images = detail::gather_images(train.images, order, from, count);
      std::vector<int> labels(static_cast<std::size_t>(count));
      for (std::int64_t i = 0; i < count; ++i)
        labels[static_cast<std::size_t>(i)] = train.labels[static_cast<std::size_t>(order[static_cast<std::size_t>(from + i)])];

      const ForwardTrace trace =
          forward(model, images, RunMode::kQuantized, rng::derive(cfg.seed, 0xf0 + step));
      BackwardResult back = backward(model, trace, labels);
      if (!std::isfinite(back.loss))
        throw numeric_error("finetune: diverged (non-finite loss) at epoch " +
                            std::to_string(epoch) + ", step " + std::to_string(step));
      epoch_loss += back.loss;
      ++batches;
      sgd_step(model, back.grads, lr, cfg.momentum, sgd, rng::derive(cfg.seed, 0xabc0 + step));
      ++step;
    }

    EpochRecord rec;
    rec.epoch = epoch;
    rec.loss = epoch_loss / static_cast<real>(std::max<std::int64_t>(batches, 1));
    const ForwardTrace eval_trace =
        forward(model, eval.images, RunMode::kQuantized, 0, RoundingScheme::kDeterministic);
    const Tensor& ev_logits = eval_trace.logits();
    rec.accuracy = softmax_cross_entropy(
                       ev_logits.rank() == 2
                           ? ev_logits
                           : reshape(ev_logits, {ev_logits.dim(0), ev_logits.size() / ev_logits.dim(0)}),
                       eval.labels)
                       .accuracy;
    rec.layer_sparsity = per_act_sparsity(eval_trace, model.net);
    rec.mean_sparsity = 0;
    for (real s : rec.layer_sparsity) rec.mean_sparsity += s;
    if (!rec.layer_sparsity.empty())
      rec.mean_sparsity /= static_cast<real>(rec.layer_sparsity.size());
    result.history.push_back(rec);

    if (rec.accuracy * 100 >= best_accuracy * 100 + cfg.plateau_min_delta) {
      best_accuracy = rec.accuracy;
      stalled_epochs = 0;
    } else if (++stalled_epochs >= cfg.plateau_patience) {
      break;
    }
  }
  return result;
}

// ------------------------------ history files ------------------------------
// One JSON object per line, one line per epoch.

inline void save_history(const std::vector<EpochRecord>& history, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw validation_error("save_history: cannot write '" + path + "'");
  for (const EpochRecord& r : history) {
    nlohmann::json j{{"epoch", r.epoch},
                     {"loss", r.loss},
                     {"accuracy", r.accuracy},
                     {"mean_sparsity", r.mean_sparsity},
                     {"layer_sparsity", r.layer_sparsity}};
    out << j.dump() << "\n";
  }
  if (!out) throw validation_error("save_history: short write to '" + path + "'");
}

inline std::vector<EpochRecord> load_history(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw validation_error("load_history: cannot open '" + path + "'");
  std::vector<EpochRecord> out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw validation_error("load_history: bad record in '" + path + "': " + e.what());
    }
    EpochRecord r;
    r.epoch = j.at("epoch").get<int>();
    r.loss = j.at("loss").get<real>();
    r.accuracy = j.at("accuracy").get<real>();
    r.mean_sparsity = j.at("mean_sparsity").get<real>();
    r.layer_sparsity = j.at("layer_sparsity").get<std::vector<real>>();
    out.push_back(std::move(r));
  }
  return out;
}

}  // namespace fixq
