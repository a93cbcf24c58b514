#pragma once

#include <cmath>
#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include "fixq/common.hpp"
#include "fixq/netdesc.hpp"
#include "fixq/rng.hpp"
#include "fixq/tensor.hpp"

namespace fixq {

struct Dataset {
  Tensor images;            // (N,C,H,W)
  std::vector<int> labels;  // values in [0, classes)
  std::int64_t classes = 0;

  std::int64_t size() const { return images.empty() ? 0 : images.dim(0); }
};

// Seeded 4-class reference task: 16x16 single-channel sinusoidal gratings at
// orientations {0, 45, 90, 135} degrees with random phase and additive
// Gaussian noise. Classes are balanced round-robin. Small enough to train a
// 2-conv network to high accuracy in seconds, which makes it usable as an
// end-to-end fixture for the quantization pipeline.
inline Dataset make_oriented_patterns(std::int64_t n, std::uint64_t seed, real noise = 0.2) {
  if (n < 1) throw validation_error("make_oriented_patterns: need at least one sample");
  constexpr std::int64_t kSize = 16;
  constexpr std::int64_t kClasses = 4;
  constexpr real kPeriod = 4.0;
  constexpr real kPi = 3.14159265358979323846;

  Dataset ds;
  ds.classes = kClasses;
  ds.images = Tensor({n, 1, kSize, kSize});
  ds.labels.resize(static_cast<std::size_t>(n));

  for (std::int64_t i = 0; i < n; ++i) {
    rng::Counter rng(rng::derive(seed, static_cast<std::uint64_t>(i)));
    const int cls = static_cast<int>(i % kClasses);
    ds.labels[static_cast<std::size_t>(i)] = cls;
    const real theta = kPi / 4 * cls;
    const real cos_t = std::cos(theta), sin_t = std::sin(theta);
    const real phase = 2 * kPi * rng.uniform();
    for (std::int64_t y = 0; y < kSize; ++y)
      for (std::int64_t x = 0; x < kSize; ++x) {
        const real proj = cos_t * static_cast<real>(x) + sin_t * static_cast<real>(y);
        const real v = std::sin(2 * kPi * proj / kPeriod + phase) + noise * rng.gaussian();
        ds.images.at(i, 0, y, x) = v;
      }
  }
  return ds;
}

// 2 conv + 1 fc classifier for the oriented-pattern task:
//   input 1x16x16 -> conv 1->8 k3 p1 + act + pool2 ->
//   conv 8->16 k3 p1 + act + pool2 -> fc 256->4
inline NetDescriptor build_pattern_net(bool quantize = false,
                                       FixedPointFormat weight_fmt = FixedPointFormat(2, 14),
                                       FixedPointFormat act_fmt = FixedPointFormat(8, 8),
                                       RoundingScheme scheme = RoundingScheme::kDeterministic) {
  QuantSpec quant;
  quant.weight_fmt = weight_fmt;
  quant.act_fmt = act_fmt;
  quant.scheme = scheme;
  quant.enabled = quantize;

  NetDescriptor net;
  net.name = "pattern4";
  net.in_channels = 1;
  net.in_height = 16;
  net.in_width = 16;

  LayerDescriptor input;
  input.kind = LayerKind::kInput;
  input.name = "input";
  net.layers.push_back(input);

  const auto conv = [&](const char* name, std::int64_t in, std::int64_t out) {
    LayerDescriptor l;
    l.kind = LayerKind::kConv;
    l.name = name;
    l.in_channels = in;
    l.out_channels = out;
    l.kernel = 3;
    l.stride = 1;
    l.pad = 1;
    l.quant = quant;
    net.layers.push_back(l);
  };
  const auto act = [&](const char* name) {
    LayerDescriptor l;
    l.kind = LayerKind::kAct;
    l.name = name;
    l.quant = quant;
    net.layers.push_back(l);
  };
  const auto pool = [&](const char* name) {
    LayerDescriptor l;
    l.kind = LayerKind::kMaxPool;
    l.name = name;
    net.layers.push_back(l);
  };

  conv("conv1", 1, 8);
  act("act1");
  pool("pool1");
  conv("conv2", 8, 16);
  act("act2");
  pool("pool2");

  LayerDescriptor fc;
  fc.kind = LayerKind::kFullyConnected;
  fc.name = "fc1";
  fc.in_channels = 256;
  fc.out_channels = 4;
  fc.quant = quant;
  net.layers.push_back(fc);

  validate(net);
  return net;
}

// Head/tail split without reordering; the generator already interleaves
// classes, so both parts stay balanced.
inline std::pair<Dataset, Dataset> split_dataset(const Dataset& ds, real eval_fraction) {
  if (!(eval_fraction > 0) || !(eval_fraction < 1))
    throw validation_error("split_dataset: eval fraction must be in (0,1)");
  const std::int64_t n = ds.size();
  const std::int64_t n_eval = std::max<std::int64_t>(1, static_cast<std::int64_t>(n * eval_fraction));
  const std::int64_t n_train = n - n_eval;
  if (n_train < 1) throw validation_error("split_dataset: no training samples left");

  const std::int64_t c = ds.images.dim(1), h = ds.images.dim(2), w = ds.images.dim(3);
  const std::int64_t stride = c * h * w;
  const auto slice = [&](std::int64_t from, std::int64_t count) {
    Dataset part;
    part.classes = ds.classes;
    part.images = Tensor::from({count, c, h, w},
                               {ds.images.values().begin() + from * stride,
                                ds.images.values().begin() + (from + count) * stride});
    part.labels.assign(ds.labels.begin() + from, ds.labels.begin() + from + count);
    return part;
  };
  return {slice(0, n_train), slice(n_train, n_eval)};
}

// ------------------------------ dataset files ------------------------------
// Binary layout (all little-endian):
//   magic "FXQD", u32 version=1, u32 count, u32 classes, u32 c, u32 h, u32 w,
//   count*c*h*w f32 image data, count u16 labels.

namespace detail {

inline void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline void put_u16(std::string& out, std::uint16_t v) {
  out.push_back(static_cast<char>(v & 0xff));
  out.push_back(static_cast<char>((v >> 8) & 0xff));
}

}  // namespace detail

inline void save_dataset(const Dataset& ds, const std::string& path) {
  if (ds.size() < 1) throw validation_error("save_dataset: empty dataset");
  std::string out;
  out += "FXQD";
  detail::put_u32(out, 1);
  detail::put_u32(out, static_cast<std::uint32_t>(ds.size()));
  detail::put_u32(out, static_cast<std::uint32_t>(ds.classes));
  detail::put_u32(out, static_cast<std::uint32_t>(ds.images.dim(1)));
  detail::put_u32(out, static_cast<std::uint32_t>(ds.images.dim(2)));
  detail::put_u32(out, static_cast<std::uint32_t>(ds.images.dim(3)));
  for (std::int64_t i = 0; i < ds.images.size(); ++i) {
    const float f = static_cast<float>(ds.images[i]);
    std::uint32_t bits;
    static_assert(sizeof bits == sizeof f);
    __builtin_memcpy(&bits, &f, sizeof bits);
    detail::put_u32(out, bits);
  }
  for (int label : ds.labels) detail::put_u16(out, static_cast<std::uint16_t>(label));
  std::ofstream f(path, std::ios::binary);
  if (!f.write(out.data(), static_cast<std::streamsize>(out.size())))
    throw validation_error("save_dataset: cannot write '" + path + "'");
}

inline Dataset load_dataset(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw validation_error("load_dataset: cannot open '" + path + "'");
  std::string buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  std::size_t pos = 0;
  const auto need = [&](std::size_t n) {
    if (pos + n > buf.size()) throw validation_error("load_dataset: truncated file '" + path + "'");
  };
  const auto get_u32 = [&]() -> std::uint32_t {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(buf[pos++])) << (8 * i);
    return v;
  };
  need(4);
  if (buf.compare(0, 4, "FXQD") != 0)
    throw validation_error("load_dataset: '" + path + "' is not a dataset file");
  pos = 4;
  if (get_u32() != 1) throw validation_error("load_dataset: unsupported version in '" + path + "'");
  const std::int64_t count = get_u32();
  const std::int64_t classes = get_u32();
  const std::int64_t c = get_u32(), h = get_u32(), w = get_u32();
  if (count < 1 || classes < 2 || c < 1 || h < 1 || w < 1)
    throw validation_error("load_dataset: bad header in '" + path + "'");
  // validate the declared payload against the actual file size before
  // allocating anything, so corrupt headers cannot demand huge buffers
  const std::int64_t numel = shape_numel({count, c, h, w});
  if (static_cast<std::uint64_t>(numel) * 4 + static_cast<std::uint64_t>(count) * 2 >
      buf.size() - pos)
    throw validation_error("load_dataset: truncated file '" + path + "'");

  Dataset ds;
  ds.classes = classes;
  ds.images = Tensor({count, c, h, w});
  for (std::int64_t i = 0; i < ds.images.size(); ++i) {
    const std::uint32_t bits = get_u32();
    float fv;
    __builtin_memcpy(&fv, &bits, sizeof fv);
    ds.images[i] = static_cast<real>(fv);
  }
  ds.labels.resize(static_cast<std::size_t>(count));
  for (std::int64_t i = 0; i < count; ++i) {
    need(2);
    const int lo = static_cast<unsigned char>(buf[pos++]);
    const int hi = static_cast<unsigned char>(buf[pos++]);
    const int label = lo | (hi << 8);
    if (label >= classes)
      throw validation_error("load_dataset: label out of range in '" + path + "'");
    ds.labels[static_cast<std::size_t>(i)] = label;
  }
  check_finite(ds.images, "load_dataset");
  return ds;
}

// Data source: either a dataset file path or a generator URI of the form
// "synth:n=512,seed=7[,noise=0.2]".
inline Dataset load_data_source(const std::string& source) {
  if (source.rfind("synth:", 0) != 0) return load_dataset(source);
  std::int64_t n = 512;
  std::uint64_t seed = 1;
  real noise = 0.2;
  std::string rest = source.substr(6);
  std::size_t start = 0;
  while (start < rest.size()) {
    std::size_t end = rest.find(',', start);
    if (end == std::string::npos) end = rest.size();
    const std::string item = rest.substr(start, end - start);
    const auto eq = item.find('=');
    if (eq == std::string::npos)
      throw validation_error("bad synth data spec item '" + item + "'");
    const std::string key = item.substr(0, eq), value = item.substr(eq + 1);
    try {
      if (key == "n") n = std::stoll(value);
      else if (key == "seed") seed = std::stoull(value);
      else if (key == "noise") noise = std::stod(value);
      else throw validation_error("unknown synth data key '" + key + "'");
    } catch (const validation_error&) {
      throw;
    } catch (...) {
      throw validation_error("bad value for synth data key '" + key + "'");
    }
    start = end + 1;
  }
  return make_oriented_patterns(n, seed, noise);
}

}  // namespace fixq
