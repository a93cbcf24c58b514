#pragma once

#include <algorithm>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "fixq/common.hpp"
#include "fixq/fixedpoint.hpp"
#include "fixq/netdesc.hpp"
#include "fixq/rng.hpp"
#include "fixq/tensor.hpp"

namespace fixq {

enum class RunMode { kFloat, kQuantized };

// Multiplies every element by s. Contract for network inputs: pick s so
// max_abs(result) stays within the first act layer's representable range.
inline Tensor scale_input(const Tensor& t, real s) {
  if (!(s > 0)) throw validation_error("scale_input: scale must be positive");
  if (s == 1) return t;
  return scale(t, s);
}

// MAC accounting for one convolution call. A MAC is a (output, tap) pair
// whose input coordinate is in bounds; zero padding is never fetched and
// never counted.
struct ConvWork {
  std::int64_t total_macs = 0;
  std::int64_t performed_macs = 0;
  std::int64_t skipped_macs = 0;
};

// Dual-copy parameter state of one weighted layer. `weights`/`bias` are the
// full-precision shadow tensors written by the optimizer; the quantized
// copies are used by quantized-mode forwards and may only be rebuilt through
// refresh().
struct LayerState {
  LayerDescriptor desc;
  Tensor weights;
  Tensor bias;
  Tensor quantized_weights;
  Tensor quantized_bias;
  bool cache_fresh = false;

  // quantized <- quantize(shadow) under the layer's weight format (bias
  // shares it); plain copies when quantization is off.
  void refresh(std::uint64_t seed) {
    if (desc.quant.enabled) {
      quantized_weights =
          quantize_tensor(weights, desc.quant.weight_fmt, desc.quant.scheme, rng::derive(seed, 1));
      quantized_bias =
          quantize_tensor(bias, desc.quant.weight_fmt, desc.quant.scheme, rng::derive(seed, 2));
    } else {
      quantized_weights = weights;
      quantized_bias = bias;
    }
    cache_fresh = true;
  }

  const Tensor& forward_weights(RunMode mode) const {
    if (mode == RunMode::kFloat) return weights;
    if (!cache_fresh)
      throw validation_error("layer " + desc.name +
                             ": stale quantized-weight cache; call refresh() after updating "
                             "shadow parameters");
    return quantized_weights;
  }

  const Tensor& forward_bias(RunMode mode) const {
    if (mode == RunMode::kFloat) return bias;
    if (!cache_fresh)
      throw validation_error("layer " + desc.name + ": stale quantized-bias cache");
    return quantized_bias;
  }
};

// A descriptor plus parameter state for each of its weighted layers,
// aligned with weighted_layers(net). Read-only during forward passes.
struct Model {
  NetDescriptor net;
  std::vector<LayerState> params;
  std::string provenance;

  void refresh(std::uint64_t seed) {
    for (std::size_t j = 0; j < params.size(); ++j) params[j].refresh(rng::derive(seed, j));
  }
};

// Zero-parameter model matching the descriptor's weighted layers.
inline Model make_model(NetDescriptor net) {
  validate(net);
  Model m;
  m.net = std::move(net);
  for (std::size_t i : weighted_layers(m.net)) {
    const LayerDescriptor& l = m.net.layers[i];
    LayerState st;
    st.desc = l;
    if (l.kind == LayerKind::kConv) {
      st.weights = Tensor({l.out_channels, l.in_channels, l.kernel, l.kernel});
    } else {
      st.weights = Tensor({l.out_channels, l.in_channels});
    }
    st.bias = Tensor({l.out_channels});
    st.refresh(0);
    m.params.push_back(std::move(st));
  }
  return m;
}

namespace detail {

// In-bounds tap count for one spatial axis: pairs (o, kk) with
// 0 <= o*stride + kk - pad < extent.
inline std::int64_t valid_taps_1d(std::int64_t extent, std::int64_t out, std::int64_t k,
                                  std::int64_t stride, std::int64_t pad) {
  std::int64_t taps = 0;
  for (std::int64_t o = 0; o < out; ++o)
    for (std::int64_t kk = 0; kk < k; ++kk) {
      const std::int64_t i = o * stride + kk - pad;
      if (i >= 0 && i < extent) ++taps;
    }
  return taps;
}

}  // namespace detail

// Dense 2-D convolution via patch extraction + matmul.
//
// Accumulation contract: every output starts from its bias and adds taps in
// ascending (in_channel, ky, kx) order. The zero-skipping path and the
// nested-loop oracle follow the same order, so the three routes compare
// bit-exactly.
inline Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, std::int64_t stride,
                     std::int64_t pad, ConvWork* work = nullptr) {
  if (x.rank() != 4 || w.rank() != 4)
    throw validation_error("conv2d: need (N,C,H,W) input and (O,C,kh,kw) weights, got " +
                           shape_str(x.shape()) + " and " + shape_str(w.shape()));
  const std::int64_t n = x.dim(0), c = x.dim(1), h = x.dim(2), wd = x.dim(3);
  const std::int64_t o = w.dim(0), k = w.dim(2);
  if (w.dim(1) != c || w.dim(2) != w.dim(3))
    throw validation_error("conv2d: weight shape " + shape_str(w.shape()) +
                           " incompatible with input " + shape_str(x.shape()));
  if (b.rank() != 1 || b.dim(0) != o)
    throw validation_error("conv2d: bias shape " + shape_str(b.shape()) + " does not match " +
                           std::to_string(o) + " output channels");
  const std::int64_t oh = (h + 2 * pad - k) / stride + 1;
  const std::int64_t ow = (wd + 2 * pad - k) / stride + 1;
  if (h + 2 * pad < k || wd + 2 * pad < k)
    throw validation_error("conv2d: kernel does not fit input " + shape_str(x.shape()));

  Tensor out({n, o, oh, ow});
  const std::int64_t patch = c * k * k;
  for (std::int64_t ni = 0; ni < n; ++ni) {
    const Tensor col = im2col(x, ni, k, stride, pad);
    for (std::int64_t oc = 0; oc < o; ++oc) {
      const real* wrow = w.data() + oc * patch;
      for (std::int64_t p = 0; p < oh * ow; ++p) {
        real acc = b[oc];
        for (std::int64_t r = 0; r < patch; ++r) acc += wrow[r] * col.at(r, p);
        out.at(ni, oc, p / ow, p % ow) = acc;
      }
    }
  }

  if (work) {
    const std::int64_t taps = detail::valid_taps_1d(h, oh, k, stride, pad) *
                              detail::valid_taps_1d(wd, ow, k, stride, pad) * c * o * n;
    work->total_macs = taps;
    work->performed_macs = taps;
    work->skipped_macs = 0;
  }
  return out;
}

// Forward pass of a low-precision conv layer: quantized weights and bias
// when quantization is on, full-precision otherwise. The output is returned
// unquantized; activation quantization belongs to the act layer.
inline Tensor lp_conv_forward(const Tensor& x, const LayerState& layer,
                              RunMode mode = RunMode::kQuantized, ConvWork* work = nullptr) {
  if (layer.desc.kind != LayerKind::kConv)
    throw validation_error("lp_conv_forward: layer " + layer.desc.name + " is not a conv layer");
  if (x.rank() != 4 || x.dim(1) != layer.desc.in_channels)
    throw validation_error("lp_conv_forward: input " + shape_str(x.shape()) +
                           " does not feed conv layer " + layer.desc.name + " expecting " +
                           std::to_string(layer.desc.in_channels) + " channels");
  return conv2d(x, layer.forward_weights(mode), layer.forward_bias(mode), layer.desc.stride,
                layer.desc.pad, work);
}

// Fully connected forward; rank-4 inputs are flattened to (N, C*H*W).
// y(n,o) = bias(o) + sum_i w(o,i) x(n,i), i ascending.
inline Tensor lp_fc_forward(const Tensor& x, const LayerState& layer,
                            RunMode mode = RunMode::kQuantized) {
  if (layer.desc.kind != LayerKind::kFullyConnected)
    throw validation_error("lp_fc_forward: layer " + layer.desc.name + " is not an fc layer");
  if (x.rank() < 2)
    throw validation_error("lp_fc_forward: expected batched input, got " + shape_str(x.shape()));
  const std::int64_t n = x.dim(0);
  const std::int64_t flat = x.size() / std::max<std::int64_t>(n, 1);
  if (n < 1 || flat != layer.desc.in_channels)
    throw validation_error("lp_fc_forward: input " + shape_str(x.shape()) + " does not feed " +
                           layer.desc.name + " expecting " +
                           std::to_string(layer.desc.in_channels) + " inputs");
  const Tensor& w = layer.forward_weights(mode);
  const Tensor& b = layer.forward_bias(mode);
  const std::int64_t o = layer.desc.out_channels;
  Tensor out({n, o});
  for (std::int64_t ni = 0; ni < n; ++ni) {
    const real* xin = x.data() + ni * flat;
    for (std::int64_t oc = 0; oc < o; ++oc) {
      real acc = b[oc];
      const real* wrow = w.data() + oc * flat;
      for (std::int64_t i = 0; i < flat; ++i) acc += wrow[i] * xin[i];
      out.at(ni, oc) = acc;
    }
  }
  return out;
}

// Activation quantization followed by ReLU, in that order: values in
// (-step/2, step/2) snap to exactly zero before the clip, which is where the
// extra activation sparsity comes from.
inline Tensor lp_act_forward(const Tensor& x, const FixedPointFormat& fmt, RoundingScheme scheme,
                             std::uint64_t seed = 0) {
  return relu(quantize_tensor(x, fmt, scheme, seed));
}

inline Tensor maxpool_forward(const Tensor& x, std::int64_t window, std::int64_t stride) {
  if (x.rank() != 4)
    throw validation_error("maxpool_forward: expected rank-4 input, got " + shape_str(x.shape()));
  const std::int64_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const bool global = window == kGlobalPool;
  const std::int64_t gh = global ? h : window;
  const std::int64_t gw = global ? w : window;
  const std::int64_t s = global ? 1 : stride;
  if (gh < 1 || gw < 1 || s < 1 || h < gh || w < gw)
    throw validation_error("maxpool_forward: window does not fit input " + shape_str(x.shape()));
  const std::int64_t oh = (h - gh) / s + 1;
  const std::int64_t ow = (w - gw) / s + 1;
  Tensor out({n, c, oh, ow});
  for (std::int64_t ni = 0; ni < n; ++ni)
    for (std::int64_t ci = 0; ci < c; ++ci)
      for (std::int64_t oy = 0; oy < oh; ++oy)
        for (std::int64_t ox = 0; ox < ow; ++ox) {
          real m = x.at(ni, ci, oy * s, ox * s);
          for (std::int64_t ky = 0; ky < gh; ++ky)
            for (std::int64_t kx = 0; kx < gw; ++kx)
              m = std::max(m, x.at(ni, ci, oy * s + ky, ox * s + kx));
          out.at(ni, ci, oy, ox) = m;
        }
  return out;
}

// Numerically stable row softmax for (N,K) logits.
inline Tensor softmax_forward(const Tensor& logits) {
  if (logits.rank() != 2)
    throw validation_error("softmax_forward: expected (N,K) logits, got " +
                           shape_str(logits.shape()));
  const std::int64_t n = logits.dim(0), k = logits.dim(1);
  Tensor out({n, k});
  for (std::int64_t i = 0; i < n; ++i) {
    real mx = logits.at(i, std::int64_t(0));
    for (std::int64_t j = 1; j < k; ++j) mx = std::max(mx, logits.at(i, j));
    real sum = 0;
    for (std::int64_t j = 0; j < k; ++j) sum += (out.at(i, j) = std::exp(logits.at(i, j) - mx));
    for (std::int64_t j = 0; j < k; ++j) out.at(i, j) /= sum;
  }
  return out;
}

// -------------------------- zero-skipping path ----------------------------

// Coordinate-list encoding of a single feature map. Entries are sorted by
// (channel, row, col) and reconstruct the dense tensor exactly.
struct SparseEntry {
  std::int64_t channel, row, col;
  real value;

  bool operator==(const SparseEntry&) const = default;
};

struct SparseFeatureMap {
  std::int64_t channels = 0, height = 0, width = 0;
  std::vector<SparseEntry> entries;
};

inline SparseFeatureMap to_sparse(const Tensor& x) {
  if (x.rank() != 4 || x.dim(0) != 1)
    throw validation_error("to_sparse: expected a single (1,C,H,W) feature map, got " +
                           shape_str(x.shape()));
  SparseFeatureMap s;
  s.channels = x.dim(1);
  s.height = x.dim(2);
  s.width = x.dim(3);
  for (std::int64_t c = 0; c < s.channels; ++c)
    for (std::int64_t y = 0; y < s.height; ++y)
      for (std::int64_t xw = 0; xw < s.width; ++xw) {
        const real v = x.at(0, c, y, xw);
        if (v != 0) s.entries.push_back({c, y, xw, v});
      }
  return s;
}

inline Tensor to_dense(const SparseFeatureMap& s) {
  Tensor x({1, s.channels, s.height, s.width});
  for (const SparseEntry& e : s.entries) x.at(0, e.channel, e.row, e.col) = e.value;
  return x;
}

// Convolution that performs arithmetic only for nonzero activation entries.
// The skipped taps contribute exact zeros, and contributions arrive at every
// output in the same (channel, ky, kx) order as the dense path, so outputs
// are bit-identical to lp_conv_forward. `work` reports the skipped MACs.
inline Tensor sparse_conv_forward(const SparseFeatureMap& in, const LayerState& layer,
                                  RunMode mode = RunMode::kQuantized, ConvWork* work = nullptr) {
  if (layer.desc.kind != LayerKind::kConv)
    throw validation_error("sparse_conv_forward: layer " + layer.desc.name + " is not a conv layer");
  if (in.channels != layer.desc.in_channels)
    throw validation_error("sparse_conv_forward: input has " + std::to_string(in.channels) +
                           " channels, layer " + layer.desc.name + " expects " +
                           std::to_string(layer.desc.in_channels));
  const Tensor& w = layer.forward_weights(mode);
  const Tensor& b = layer.forward_bias(mode);
  const std::int64_t o = layer.desc.out_channels, k = layer.desc.kernel;
  const std::int64_t stride = layer.desc.stride, pad = layer.desc.pad;
  const std::int64_t oh = (in.height + 2 * pad - k) / stride + 1;
  const std::int64_t ow = (in.width + 2 * pad - k) / stride + 1;
  if (in.height + 2 * pad < k || in.width + 2 * pad < k)
    throw validation_error("sparse_conv_forward: kernel does not fit input");

  Tensor out({1, o, oh, ow});
  for (std::int64_t oc = 0; oc < o; ++oc)
    for (std::int64_t p = 0; p < oh * ow; ++p) out.at(0, oc, p / ow, p % ow) = b[oc];

  std::int64_t performed = 0;
  for (const SparseEntry& e : in.entries) {
    for (std::int64_t ky = 0; ky < k; ++ky) {
      const std::int64_t oy_num = e.row + pad - ky;
      if (oy_num < 0 || oy_num % stride != 0) continue;
      const std::int64_t oy = oy_num / stride;
      if (oy >= oh) continue;
      for (std::int64_t kx = 0; kx < k; ++kx) {
        const std::int64_t ox_num = e.col + pad - kx;
        if (ox_num < 0 || ox_num % stride != 0) continue;
        const std::int64_t ox = ox_num / stride;
        if (ox >= ow) continue;
        for (std::int64_t oc = 0; oc < o; ++oc)
          out.at(0, oc, oy, ox) += w.at(oc, e.channel, ky, kx) * e.value;
        performed += o;
      }
    }
  }

  if (work) {
    work->total_macs = detail::valid_taps_1d(in.height, oh, k, stride, pad) *
                       detail::valid_taps_1d(in.width, ow, k, stride, pad) * in.channels * o;
    work->performed_macs = performed;
    work->skipped_macs = work->total_macs - performed;
  }
  return out;
}

// ----------------------------- whole-net forward ---------------------------

// Per-layer activations of one forward pass, index-aligned with net.layers;
// activations[0] is the scaled input and the last entry holds the logits.
// Contract violations that do not invalidate the run (an input exceeding the
// first act layer's representable range) are recorded as warnings.
struct ForwardTrace {
  RunMode mode = RunMode::kFloat;
  std::vector<Tensor> activations;
  std::vector<std::string> warnings;

  const Tensor& logits() const {
    if (activations.empty()) throw validation_error("forward trace is empty");
    return activations.back();
  }
};

// Runs the network on a (N,C,H,W) batch. Quantized mode uses the cached
// quantized parameters and quantizes activations in front of each act layer;
// float mode bypasses every quantizer. Stochastic activation draws are keyed
// by (seed, layer index, element index). scheme_override forces a rounding
// scheme for all act layers (evaluation passes use deterministic rounding).
inline ForwardTrace forward(const Model& m, const Tensor& input, RunMode mode,
                            std::uint64_t seed = 0,
                            std::optional<RoundingScheme> scheme_override = {}) {
  if (input.rank() != 4 || input.dim(1) != m.net.in_channels ||
      input.dim(2) != m.net.in_height || input.dim(3) != m.net.in_width)
    throw validation_error("forward: input " + shape_str(input.shape()) +
                           " does not match descriptor input (N," +
                           std::to_string(m.net.in_channels) + "," +
                           std::to_string(m.net.in_height) + "," +
                           std::to_string(m.net.in_width) + ")");
  if (m.params.size() != weighted_layers(m.net).size())
    throw validation_error("forward: model has " + std::to_string(m.params.size()) +
                           " parameter sets for " + std::to_string(weighted_layers(m.net).size()) +
                           " weighted layers");

  ForwardTrace trace;
  trace.mode = mode;
  trace.activations.reserve(m.net.layers.size());

  Tensor x = scale_input(input, m.net.input_scale);
  trace.activations.push_back(x);

  // scaled input should stay representable under the first act layer's format
  if (mode == RunMode::kQuantized) {
    for (const LayerDescriptor& l : m.net.layers) {
      if (l.kind != LayerKind::kAct) continue;
      if (l.quant.enabled && max_abs(x) > l.quant.act_fmt.max_value()) {
        std::ostringstream os;
        os << "scaled input max |v| = " << max_abs(x) << " exceeds the first act format "
           << l.quant.act_fmt.str() << " range (saturation ahead; lower the input scale)";
        trace.warnings.push_back(os.str());
      }
      break;
    }
  }

  std::size_t j = 0;
  for (std::size_t i = 1; i < m.net.layers.size(); ++i) {
    const LayerDescriptor& l = m.net.layers[i];
    switch (l.kind) {
      case LayerKind::kConv:
        x = lp_conv_forward(x, m.params[j++], mode);
        break;
      case LayerKind::kFullyConnected:
        x = lp_fc_forward(x, m.params[j++], mode);
        break;
      case LayerKind::kAct:
        if (mode == RunMode::kQuantized && l.quant.enabled) {
          const RoundingScheme scheme = scheme_override.value_or(l.quant.scheme);
          x = lp_act_forward(x, l.quant.act_fmt, scheme, rng::derive(seed, i));
        } else {
          x = relu(x);
        }
        break;
      case LayerKind::kMaxPool:
        x = maxpool_forward(x, l.pool_window, l.pool_stride);
        break;
      case LayerKind::kSoftmax:
        x = softmax_forward(x.rank() == 2 ? x : reshape(x, {x.dim(0), x.size() / x.dim(0)}));
        break;
      case LayerKind::kInput:
        throw validation_error("forward: unexpected input layer at position " + std::to_string(i));
    }
    // fc consumes flattened features; keep the trace storing what the layer saw
    trace.activations.push_back(x);
  }
  return trace;
}

// Sparsity of each act layer's output, aligned with the act layers in
// network order. Used for history records and sparsity reports.
inline std::vector<real> per_act_sparsity(const ForwardTrace& trace, const NetDescriptor& net) {
  if (trace.activations.size() != net.layers.size())
    throw validation_error("per_act_sparsity: trace does not match descriptor");
  std::vector<real> out;
  for (std::size_t i = 1; i < net.layers.size(); ++i)
    if (net.layers[i].kind == LayerKind::kAct)
      out.push_back(sparsity(trace.activations[i]).sparsity);
  return out;
}

}  // namespace fixq
