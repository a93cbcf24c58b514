#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <limits>
#include <string>
#include <vector>

#include <json.hpp>

#include "fixq/common.hpp"
#include "fixq/dataset.hpp"
#include "fixq/fixedpoint.hpp"
#include "fixq/inference.hpp"
#include "fixq/netdesc.hpp"
#include "fixq/training.hpp"

namespace fixq {

// Streaming summary of one value population. The histogram buckets
// floor(log2|v|) with power-of-two edges, so "fraction of values with
// |v| >= 2^(m-1)" is answerable exactly from the bucket counts; zeros are
// tracked separately. Merging is associative and commutative, so stats are
// independent of sample batching and order.
struct TensorStats {
  static constexpr int kMinExp = -64;
  static constexpr int kMaxExp = 64;

  real min = std::numeric_limits<real>::infinity();
  real max = -std::numeric_limits<real>::infinity();
  std::int64_t count = 0;
  std::int64_t zero_count = 0;
  std::array<std::int64_t, kMaxExp - kMinExp + 1> log2_hist{};

  void add(real v) {
    if (!std::isfinite(v)) throw numeric_error("range stats: non-finite sample");
    min = std::min(min, v);
    max = std::max(max, v);
    ++count;
    if (v == 0) {
      ++zero_count;
      return;
    }
    const int e = std::clamp(std::ilogb(std::abs(v)), kMinExp, kMaxExp);
    ++log2_hist[static_cast<std::size_t>(e - kMinExp)];
  }

  void add_all(const Tensor& t) {
    for (std::int64_t i = 0; i < t.size(); ++i) add(t[i]);
  }

  void merge(const TensorStats& other) {
    min = std::min(min, other.min);
    max = std::max(max, other.max);
    count += other.count;
    zero_count += other.zero_count;
    for (std::size_t i = 0; i < log2_hist.size(); ++i) log2_hist[i] += other.log2_hist[i];
  }

  real max_abs() const { return count ? std::max(std::abs(min), std::abs(max)) : 0; }

  // Fraction of observed values with |v| >= 2^(integer_bits-1), the values
  // lost when the integer part (sign included) gets integer_bits bits.
  real overflow_fraction(int integer_bits) const {
    if (count == 0) throw validation_error("range stats: no samples");
    const int threshold_exp = integer_bits - 1;
    std::int64_t lost = 0;
    for (int e = std::max(threshold_exp, kMinExp); e <= kMaxExp; ++e)
      lost += log2_hist[static_cast<std::size_t>(e - kMinExp)];
    return static_cast<real>(lost) / static_cast<real>(count);
  }
};

struct LayerRangeStats {
  std::string name;
  TensorStats weights;      // weights and biases pooled (bias shares the weight format)
  TensorStats activations;  // pre-act values: conv/fc outputs before quantize+ReLU
};

struct RangeStats {
  std::vector<LayerRangeStats> layers;  // weighted layers, network order
  std::int64_t samples = 0;

  void merge(const RangeStats& other) {
    if (other.layers.size() != layers.size())
      throw validation_error("range stats merge: layer count mismatch");
    for (std::size_t i = 0; i < layers.size(); ++i) {
      if (layers[i].name != other.layers[i].name)
        throw validation_error("range stats merge: layer name mismatch at index " +
                               std::to_string(i));
      layers[i].weights.merge(other.layers[i].weights);
      layers[i].activations.merge(other.layers[i].activations);
    }
    samples += other.samples;
  }
};

// Dynamic-range measurement over a sample batch: one float-mode forward pass
// records per-layer activation ranges; weight ranges are data-independent
// and taken straight from the shadow parameters.
inline RangeStats measure_ranges(const Model& m, const Tensor& samples) {
  if (samples.empty() || samples.rank() != 4 || samples.dim(0) < 1)
    throw validation_error("measure_ranges: empty sample batch");
  RangeStats stats;
  stats.samples = samples.dim(0);

  const std::vector<std::size_t> widx = weighted_layers(m.net);
  const ForwardTrace trace = forward(m, samples, RunMode::kFloat);
  for (std::size_t j = 0; j < widx.size(); ++j) {
    LayerRangeStats layer;
    layer.name = m.net.layers[widx[j]].name;
    layer.weights.add_all(m.params[j].weights);
    layer.weights.add_all(m.params[j].bias);
    layer.activations.add_all(trace.activations[widx[j]]);
    stats.layers.push_back(std::move(layer));
  }
  return stats;
}

struct LayerFormats {
  std::string name;
  FixedPointFormat weight_fmt;
  FixedPointFormat act_fmt;
};

struct BitAllocation {
  int total_bits = 16;
  real loss_threshold = 0.01;
  std::vector<LayerFormats> layers;  // weighted layers, network order
};

namespace detail {

// Smallest integer-bit count m in [1, total_bits] whose overflow fraction
// meets the threshold; fractional bits take the rest.
inline FixedPointFormat allocate_format(const TensorStats& stats, int total_bits,
                                        real loss_threshold, const std::string& layer,
                                        const char* what) {
  for (int m = 1; m <= total_bits; ++m)
    if (stats.overflow_fraction(m) <= loss_threshold)
      return FixedPointFormat(m, total_bits - m);
  std::ostringstream os;
  os << "allocate_bits: layer " << layer << " " << what << " (max |v| = " << stats.max_abs()
     << ") cannot meet loss threshold " << loss_threshold << " within " << total_bits << " bits";
  throw validation_error(os.str());
}

}  // namespace detail

// Iterative integer-bit scan under a fixed total budget, separately for the
// weights and activations of every layer.
inline BitAllocation allocate_bits(const RangeStats& stats, int total_bits, real loss_threshold) {
  if (total_bits < 2 || total_bits > 32)
    throw validation_error("allocate_bits: total bits must be in [2,32]");
  if (!(loss_threshold >= 0) || loss_threshold >= 1)
    throw validation_error("allocate_bits: loss threshold must be in [0,1)");
  if (stats.layers.empty()) throw validation_error("allocate_bits: no layer statistics");

  BitAllocation alloc;
  alloc.total_bits = total_bits;
  alloc.loss_threshold = loss_threshold;
  for (const LayerRangeStats& layer : stats.layers) {
    LayerFormats fmts;
    fmts.name = layer.name;
    fmts.weight_fmt =
        detail::allocate_format(layer.weights, total_bits, loss_threshold, layer.name, "weights");
    fmts.act_fmt = detail::allocate_format(layer.activations, total_bits, loss_threshold,
                                           layer.name, "activations");
    alloc.layers.push_back(std::move(fmts));
  }
  return alloc;
}

// Writes the allocation into a descriptor: each weighted layer gets its
// formats and quantization is switched on; a trailing act layer inherits the
// producing layer's formats.
inline void apply_allocation(NetDescriptor& net, const BitAllocation& alloc) {
  const std::vector<std::size_t> widx = weighted_layers(net);
  if (widx.size() != alloc.layers.size())
    throw validation_error("apply_allocation: allocation has " +
                           std::to_string(alloc.layers.size()) + " layers, descriptor has " +
                           std::to_string(widx.size()));
  for (std::size_t j = 0; j < widx.size(); ++j) {
    const std::size_t i = widx[j];
    if (net.layers[i].name != alloc.layers[j].name)
      throw validation_error("apply_allocation: layer name mismatch: descriptor '" +
                             net.layers[i].name + "' vs allocation '" + alloc.layers[j].name + "'");
    net.layers[i].quant.weight_fmt = alloc.layers[j].weight_fmt;
    net.layers[i].quant.act_fmt = alloc.layers[j].act_fmt;
    net.layers[i].quant.enabled = true;
    if (i + 1 < net.layers.size() && net.layers[i + 1].kind == LayerKind::kAct) {
      net.layers[i + 1].quant.weight_fmt = alloc.layers[j].weight_fmt;
      net.layers[i + 1].quant.act_fmt = alloc.layers[j].act_fmt;
      net.layers[i + 1].quant.enabled = true;
    }
  }
  validate(net);
}

// Model variant: updates descriptor and per-layer state, leaving caches in
// need of a refresh.
inline void apply_allocation(Model& m, const BitAllocation& alloc, std::uint64_t refresh_seed) {
  apply_allocation(m.net, alloc);
  const std::vector<std::size_t> widx = weighted_layers(m.net);
  for (std::size_t j = 0; j < m.params.size(); ++j) {
    m.params[j].desc = m.net.layers[widx[j]];
    m.params[j].cache_fresh = false;
  }
  m.refresh(refresh_seed);
}

enum class ReportMode { kFloat, kOneShotQuantized, kFineTuned };

inline std::string to_string(ReportMode m) {
  switch (m) {
    case ReportMode::kFloat: return "float";
    case ReportMode::kOneShotQuantized: return "one-shot-quantized";
    case ReportMode::kFineTuned: return "fine-tuned";
  }
  return "?";
}

inline ReportMode parse_report_mode(const std::string& s) {
  if (s == "float") return ReportMode::kFloat;
  if (s == "one-shot-quantized") return ReportMode::kOneShotQuantized;
  if (s == "fine-tuned") return ReportMode::kFineTuned;
  throw validation_error("unknown report mode '" + s + "'");
}

struct SparsityLayer {
  std::string name;
  real sparsity = 0;
};

struct SparsityReport {
  ReportMode mode = ReportMode::kFloat;
  real mean_sparsity = 0;  // unweighted mean over act layers
  std::vector<SparsityLayer> layers;
};

// Per-layer post-act sparsity over a sample batch. The float tag runs a
// float-mode forward (plain ReLU); the quantized tags run deterministic
// quantized forwards.
inline SparsityReport sparsity_report(const Model& m, const Tensor& samples, ReportMode mode) {
  if (samples.empty()) throw validation_error("sparsity_report: empty sample batch");
  const RunMode run = mode == ReportMode::kFloat ? RunMode::kFloat : RunMode::kQuantized;
  const ForwardTrace trace = forward(m, samples, run, 0, RoundingScheme::kDeterministic);

  SparsityReport report;
  report.mode = mode;
  for (std::size_t i = 1; i < m.net.layers.size(); ++i)
    if (m.net.layers[i].kind == LayerKind::kAct)
      report.layers.push_back(
          {m.net.layers[i].name, sparsity(trace.activations[i]).sparsity});
  if (report.layers.empty()) throw validation_error("sparsity_report: network has no act layers");
  for (const SparsityLayer& l : report.layers) report.mean_sparsity += l.sparsity;
  report.mean_sparsity /= static_cast<real>(report.layers.size());
  return report;
}

struct OneShotStudy {
  real accuracy_float = 0;
  real accuracy_weights_only = 0;      // weights quantized, activations full precision
  real accuracy_weights_and_acts = 0;  // weights and activations quantized
  real representable_4bit = 0;         // fraction of weights whose code fits 4 bits
  real representable_8bit = 0;
};

namespace detail {

// A value "is representable" in b bits of a format when quantizing it does
// not saturate and the resulting code fits a b-bit two's complement.
inline bool representable_in(real v, const FixedPointFormat& fmt, int bits) {
  const real q = quantize_det(v, fmt);
  if (std::abs(q - v) > fmt.step() / 2) return false;  // saturated
  const std::int64_t code = to_code(q, fmt);
  const std::int64_t hi = (std::int64_t(1) << (bits - 1)) - 1;
  return code >= -hi - 1 && code <= hi;
}

}  // namespace detail

inline real representable_fraction(const Tensor& values, const FixedPointFormat& fmt, int bits) {
  if (values.empty()) throw validation_error("representable_fraction: empty tensor");
  if (bits < 1 || bits > 32) throw validation_error("representable_fraction: bad bit count");
  std::int64_t fit = 0;
  for (std::int64_t i = 0; i < values.size(); ++i)
    if (detail::representable_in(values[i], fmt, bits)) ++fit;
  return static_cast<real>(fit) / static_cast<real>(values.size());
}

// One-shot quantization study: accuracy without any fine-tuning under (a)
// full precision, (b) weight-only quantization, (c) weight+activation
// quantization, plus the fraction of weights representable in 4 and 8 bits.
inline OneShotStudy one_shot_study(const Model& float_model, const Dataset& data,
                                   const BitAllocation& alloc) {
  if (data.size() < 1) throw validation_error("one_shot_study: empty dataset");
  if (alloc.layers.size() != float_model.params.size())
    throw validation_error("one_shot_study: allocation does not match model");

  OneShotStudy study;
  study.accuracy_float = evaluate(float_model, data, RunMode::kFloat).accuracy;

  Model full = float_model;
  apply_allocation(full, alloc, 0x0115ULL);
  study.accuracy_weights_and_acts = evaluate(full, data, RunMode::kQuantized).accuracy;

  Model weights_only = full;
  for (LayerDescriptor& l : weights_only.net.layers)
    if (l.kind == LayerKind::kAct) l.quant.enabled = false;
  study.accuracy_weights_only = evaluate(weights_only, data, RunMode::kQuantized).accuracy;

  std::int64_t total = 0, fit4 = 0, fit8 = 0;
  for (std::size_t j = 0; j < float_model.params.size(); ++j) {
    const Tensor& w = float_model.params[j].weights;
    for (std::int64_t i = 0; i < w.size(); ++i) {
      ++total;
      fit4 += detail::representable_in(w[i], alloc.layers[j].weight_fmt, 4);
      fit8 += detail::representable_in(w[i], alloc.layers[j].weight_fmt, 8);
    }
  }
  study.representable_4bit = total ? static_cast<real>(fit4) / static_cast<real>(total) : 0;
  study.representable_8bit = total ? static_cast<real>(fit8) / static_cast<real>(total) : 0;
  return study;
}

// ------------------------------- JSON files --------------------------------

inline void to_json(nlohmann::json& j, const TensorStats& s) {
  nlohmann::json hist = nlohmann::json::object();
  for (int e = TensorStats::kMinExp; e <= TensorStats::kMaxExp; ++e) {
    const std::int64_t c = s.log2_hist[static_cast<std::size_t>(e - TensorStats::kMinExp)];
    if (c) hist[std::to_string(e)] = c;
  }
  j = nlohmann::json{{"min", s.count ? s.min : 0},
                     {"max", s.count ? s.max : 0},
                     {"count", s.count},
                     {"zero_count", s.zero_count},
                     {"log2_hist", hist}};
}

inline void from_json(const nlohmann::json& j, TensorStats& s) {
  s = TensorStats{};
  s.count = j.at("count").get<std::int64_t>();
  s.zero_count = j.at("zero_count").get<std::int64_t>();
  if (s.count) {
    s.min = j.at("min").get<real>();
    s.max = j.at("max").get<real>();
  }
  for (const auto& [key, value] : j.at("log2_hist").items()) {
    const int e = std::stoi(key);
    if (e < TensorStats::kMinExp || e > TensorStats::kMaxExp)
      throw validation_error("range stats: histogram exponent out of range");
    s.log2_hist[static_cast<std::size_t>(e - TensorStats::kMinExp)] = value.get<std::int64_t>();
  }
}

inline void to_json(nlohmann::json& j, const RangeStats& s) {
  nlohmann::json layers = nlohmann::json::array();
  for (const LayerRangeStats& l : s.layers)
    layers.push_back(
        {{"name", l.name}, {"weights", l.weights}, {"activations", l.activations}});
  j = nlohmann::json{{"format", "fixq-range-stats"}, {"version", 1}, {"samples", s.samples},
                     {"layers", layers}};
}

inline void from_json(const nlohmann::json& j, RangeStats& s) {
  s = RangeStats{};
  s.samples = j.at("samples").get<std::int64_t>();
  for (const auto& jl : j.at("layers")) {
    LayerRangeStats l;
    l.name = jl.at("name").get<std::string>();
    l.weights = jl.at("weights").get<TensorStats>();
    l.activations = jl.at("activations").get<TensorStats>();
    s.layers.push_back(std::move(l));
  }
}

inline void to_json(nlohmann::json& j, const BitAllocation& a) {
  nlohmann::json layers = nlohmann::json::array();
  for (const LayerFormats& l : a.layers)
    layers.push_back({{"name", l.name},
                      {"wfmt", l.weight_fmt.str()},
                      {"afmt", l.act_fmt.str()}});
  j = nlohmann::json{{"format", "fixq-bit-allocation"},
                     {"version", 1},
                     {"total_bits", a.total_bits},
                     {"loss_threshold", a.loss_threshold},
                     {"layers", layers}};
}

inline void from_json(const nlohmann::json& j, BitAllocation& a) {
  a = BitAllocation{};
  a.total_bits = j.at("total_bits").get<int>();
  a.loss_threshold = j.at("loss_threshold").get<real>();
  for (const auto& jl : j.at("layers")) {
    LayerFormats l;
    l.name = jl.at("name").get<std::string>();
    l.weight_fmt = FixedPointFormat::parse(jl.at("wfmt").get<std::string>());
    l.act_fmt = FixedPointFormat::parse(jl.at("afmt").get<std::string>());
    a.layers.push_back(std::move(l));
  }
}

inline void to_json(nlohmann::json& j, const SparsityReport& r) {
  nlohmann::json layers = nlohmann::json::array();
  for (const SparsityLayer& l : r.layers)
    layers.push_back({{"name", l.name}, {"sparsity", l.sparsity}});
  j = nlohmann::json{{"format", "fixq-sparsity-report"},
                     {"version", 1},
                     {"mode", to_string(r.mode)},
                     {"mean_sparsity", r.mean_sparsity},
                     {"layers", layers}};
}

inline void from_json(const nlohmann::json& j, SparsityReport& r) {
  r = SparsityReport{};
  r.mode = parse_report_mode(j.at("mode").get<std::string>());
  r.mean_sparsity = j.at("mean_sparsity").get<real>();
  for (const auto& jl : j.at("layers"))
    r.layers.push_back({jl.at("name").get<std::string>(), jl.at("sparsity").get<real>()});
}

inline void to_json(nlohmann::json& j, const OneShotStudy& s) {
  j = nlohmann::json{{"format", "fixq-one-shot-study"},
                     {"version", 1},
                     {"accuracy_float", s.accuracy_float},
                     {"accuracy_weights_only", s.accuracy_weights_only},
                     {"accuracy_weights_and_acts", s.accuracy_weights_and_acts},
                     {"representable_4bit", s.representable_4bit},
                     {"representable_8bit", s.representable_8bit}};
}

inline void from_json(const nlohmann::json& j, OneShotStudy& s) {
  s.accuracy_float = j.at("accuracy_float").get<real>();
  s.accuracy_weights_only = j.at("accuracy_weights_only").get<real>();
  s.accuracy_weights_and_acts = j.at("accuracy_weights_and_acts").get<real>();
  s.representable_4bit = j.at("representable_4bit").get<real>();
  s.representable_8bit = j.at("representable_8bit").get<real>();
}

namespace detail {

template <typename T>
void save_json(const T& value, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw validation_error("cannot write '" + path + "'");
  out << nlohmann::json(value).dump(2) << "\n";
  if (!out) throw validation_error("short write to '" + path + "'");
}

template <typename T>
T load_json(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw validation_error("cannot open '" + path + "'");
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw validation_error("malformed JSON in '" + path + "': " + e.what());
  }
  try {
    return j.get<T>();
  } catch (const nlohmann::json::exception& e) {
    throw validation_error("unexpected schema in '" + path + "': " + e.what());
  }
}

}  // namespace detail

inline void save_range_stats(const RangeStats& s, const std::string& path) { detail::save_json(s, path); }
inline RangeStats load_range_stats(const std::string& path) { return detail::load_json<RangeStats>(path); }
inline void save_allocation(const BitAllocation& a, const std::string& path) { detail::save_json(a, path); }
inline BitAllocation load_allocation(const std::string& path) { return detail::load_json<BitAllocation>(path); }
inline void save_sparsity_report(const SparsityReport& r, const std::string& path) { detail::save_json(r, path); }
inline SparsityReport load_sparsity_report(const std::string& path) { return detail::load_json<SparsityReport>(path); }
inline void save_one_shot_study(const OneShotStudy& s, const std::string& path) { detail::save_json(s, path); }
inline OneShotStudy load_one_shot_study(const std::string& path) { return detail::load_json<OneShotStudy>(path); }

}  // namespace fixq
