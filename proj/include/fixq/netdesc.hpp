#pragma once

#include <charconv>
#include <cstdint>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "fixq/common.hpp"
#include "fixq/fixedpoint.hpp"
#include "fixq/tensor.hpp"

namespace fixq {

enum class LayerKind { kInput, kConv, kFullyConnected, kAct, kMaxPool, kSoftmax };

inline const char* to_string(LayerKind k) {
  switch (k) {
    case LayerKind::kInput: return "input";
    case LayerKind::kConv: return "conv";
    case LayerKind::kFullyConnected: return "fc";
    case LayerKind::kAct: return "act";
    case LayerKind::kMaxPool: return "maxpool";
    case LayerKind::kSoftmax: return "softmax";
  }
  return "?";
}

// Per-layer quantization configuration. The weight format covers weights and
// biases; the activation format is consumed by the act layer that follows a
// weighted layer. With enabled == false the layer runs at full precision.
struct QuantSpec {
  FixedPointFormat weight_fmt{2, 14};
  FixedPointFormat act_fmt{8, 8};
  RoundingScheme scheme = RoundingScheme::kDeterministic;
  bool enabled = false;

  bool operator==(const QuantSpec&) const = default;
};

// pool_window set to kGlobalPool pools over the whole spatial map.
inline constexpr std::int64_t kGlobalPool = -1;

struct LayerDescriptor {
  LayerKind kind = LayerKind::kConv;
  std::string name;
  std::int64_t in_channels = 0;
  std::int64_t out_channels = 0;
  std::int64_t kernel = 1;
  std::int64_t stride = 1;
  std::int64_t pad = 0;
  std::int64_t pool_window = 2;
  std::int64_t pool_stride = 2;
  QuantSpec quant;

  bool has_weights() const {
    return kind == LayerKind::kConv || kind == LayerKind::kFullyConnected;
  }

  bool operator==(const LayerDescriptor&) const = default;
};

// Ordered layer list with the input layer first. Immutable once validated,
// safe to share across threads.
struct NetDescriptor {
  std::string name = "net";
  std::int64_t in_channels = 0;
  std::int64_t in_height = 0;
  std::int64_t in_width = 0;
  real input_scale = 1.0;
  std::vector<LayerDescriptor> layers;

  bool operator==(const NetDescriptor&) const = default;
};

inline std::vector<std::size_t> weighted_layers(const NetDescriptor& net) {
  std::vector<std::size_t> idx;
  for (std::size_t i = 0; i < net.layers.size(); ++i)
    if (net.layers[i].has_weights()) idx.push_back(i);
  return idx;
}

// Batch-free output shape per layer, index-aligned with net.layers. Checks
// that adjacent layers compose and throws naming the offending layer.
inline std::vector<Shape> infer_shapes(const NetDescriptor& net) {
  if (net.layers.empty() || net.layers.front().kind != LayerKind::kInput)
    throw validation_error("descriptor '" + net.name + "': first layer must be the input layer");
  if (net.in_channels < 1 || net.in_height < 1 || net.in_width < 1)
    throw validation_error("descriptor '" + net.name + "': invalid input shape");
  if (!(net.input_scale > 0))
    throw validation_error("descriptor '" + net.name + "': input scale must be positive");

  std::vector<Shape> shapes;
  shapes.reserve(net.layers.size());
  Shape cur = {net.in_channels, net.in_height, net.in_width};
  int bits = 0;  // total_bits must be constant across all enabled formats

  std::set<std::string> names;
  for (const LayerDescriptor& l : net.layers) {
    if (l.name.empty())
      throw validation_error("descriptor '" + net.name + "': unnamed layer");
    if (!names.insert(l.name).second)
      throw validation_error("descriptor '" + net.name + "': duplicate layer name '" + l.name +
                             "'");
  }

  for (std::size_t i = 0; i < net.layers.size(); ++i) {
    const LayerDescriptor& l = net.layers[i];
    const std::string where = "layer " + std::to_string(i) + " (" + l.name + ")";
    if (i == 0) {
      if (l.kind != LayerKind::kInput) throw validation_error(where + ": expected input layer");
      shapes.push_back(cur);
      continue;
    }
    if (l.kind == LayerKind::kInput)
      throw validation_error(where + ": duplicate input layer");

    if (l.quant.enabled) {
      for (const FixedPointFormat& f : {l.quant.weight_fmt, l.quant.act_fmt}) {
        if (bits == 0) bits = f.total_bits();
        if (f.total_bits() != bits)
          throw validation_error(where + ": format " + f.str() + " breaks the constant " +
                                 std::to_string(bits) + "-bit budget");
      }
    }

    switch (l.kind) {
      case LayerKind::kConv: {
        if (cur.size() != 3)
          throw validation_error(where + ": conv needs a (C,H,W) input, got " + shape_str(cur));
        if (l.kernel < 1 || l.stride < 1 || l.pad < 0 || l.in_channels < 1 || l.out_channels < 1)
          throw validation_error(where + ": invalid conv geometry");
        if (cur[0] != l.in_channels)
          throw validation_error(where + ": expects " + std::to_string(l.in_channels) +
                                 " input channels, previous layer produces " + shape_str(cur));
        const std::int64_t oh = (cur[1] + 2 * l.pad - l.kernel) / l.stride + 1;
        const std::int64_t ow = (cur[2] + 2 * l.pad - l.kernel) / l.stride + 1;
        if (cur[1] + 2 * l.pad < l.kernel || cur[2] + 2 * l.pad < l.kernel || oh < 1 || ow < 1)
          throw validation_error(where + ": kernel does not fit input " + shape_str(cur));
        cur = {l.out_channels, oh, ow};
        break;
      }
      case LayerKind::kFullyConnected: {
        const std::int64_t flat = shape_numel(cur);
        if (l.in_channels < 1 || l.out_channels < 1)
          throw validation_error(where + ": invalid fc fan-in/fan-out");
        if (flat != l.in_channels)
          throw validation_error(where + ": expects " + std::to_string(l.in_channels) +
                                 " inputs, previous layer produces " + shape_str(cur) + " = " +
                                 std::to_string(flat));
        cur = {l.out_channels};
        break;
      }
      case LayerKind::kMaxPool: {
        if (cur.size() != 3)
          throw validation_error(where + ": maxpool needs a (C,H,W) input, got " + shape_str(cur));
        const bool global = l.pool_window == kGlobalPool;
        const std::int64_t gh = global ? cur[1] : l.pool_window;
        const std::int64_t gw = global ? cur[2] : l.pool_window;
        const std::int64_t s = global ? 1 : l.pool_stride;
        if (gh < 1 || gw < 1 || s < 1)
          throw validation_error(where + ": invalid pooling geometry");
        if (cur[1] < gh || cur[2] < gw)
          throw validation_error(where + ": pool window exceeds input " + shape_str(cur));
        cur = {cur[0], (cur[1] - gh) / s + 1, (cur[2] - gw) / s + 1};
        break;
      }
      case LayerKind::kAct:
      case LayerKind::kSoftmax:
        break;  // shape preserved
      case LayerKind::kInput:
        break;  // handled above
    }
    shapes.push_back(cur);
  }
  return shapes;
}

inline void validate(const NetDescriptor& net) { (void)infer_shapes(net); }

// Total arithmetic work per frame, one multiply-accumulate counted as 2 Ops.
// Conv: 2*out_c*in_c*k^2*outH*outW; fc: 2*in*out; other layers free.
inline std::int64_t count_ops(const NetDescriptor& net) {
  const std::vector<Shape> shapes = infer_shapes(net);
  std::int64_t ops = 0;
  for (std::size_t i = 1; i < net.layers.size(); ++i) {
    const LayerDescriptor& l = net.layers[i];
    if (l.kind == LayerKind::kConv) {
      const Shape& out = shapes[i];
      ops += 2 * l.out_channels * l.in_channels * l.kernel * l.kernel * out[1] * out[2];
    } else if (l.kind == LayerKind::kFullyConnected) {
      ops += 2 * l.in_channels * l.out_channels;
    }
  }
  return ops;
}

// Weight plus bias element count over all weighted layers.
inline std::int64_t count_params(const NetDescriptor& net) {
  validate(net);
  std::int64_t n = 0;
  for (const LayerDescriptor& l : net.layers) {
    if (l.kind == LayerKind::kConv)
      n += l.out_channels * l.in_channels * l.kernel * l.kernel + l.out_channels;
    else if (l.kind == LayerKind::kFullyConnected)
      n += l.out_channels * l.in_channels + l.out_channels;
  }
  return n;
}

// ---------------------------------------------------------------------------
// Descriptor text format. One logical line per layer:
//
//   # comment
//   net giga1net
//   input c=3 h=224 w=224 scale=1
//   conv name=conv1 in=3 out=16 k=1 stride=1 pad=0 quant=on wfmt=Q2.14 afmt=Q8.8 scheme=DETERMINISTIC
//   act name=act1 quant=on wfmt=Q2.14 afmt=Q8.8 scheme=DETERMINISTIC
//   maxpool name=pool1 window=2 stride=2      (window=global pools the whole map)
//   fc name=fc12 in=128 out=4096 ...
//   softmax name=prob
//
// conv/fc lines additionally accept the sugar keys relu=on and pool=W[xS]
// (or pool=global), which expand to trailing act/maxpool layers sharing the
// stanza's quant spec. emit_descriptor always writes the expanded canonical
// form, so parse(emit(net)) == net.
// ---------------------------------------------------------------------------

namespace detail {

inline std::string format_real(real v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);  // shortest round-trip form
  return std::string(buf, res.ptr);
}

inline real parse_real(std::string_view text, int line_no, const std::string& key) {
  real v{};
  const auto res = std::from_chars(text.data(), text.data() + text.size(), v);
  if (res.ec != std::errc() || res.ptr != text.data() + text.size())
    throw validation_error("line " + std::to_string(line_no) + ": bad numeric value for '" + key +
                           "'");
  return v;
}

inline std::int64_t parse_int(std::string_view text, int line_no, const std::string& key) {
  std::int64_t v{};
  const auto res = std::from_chars(text.data(), text.data() + text.size(), v);
  if (res.ec != std::errc() || res.ptr != text.data() + text.size())
    throw validation_error("line " + std::to_string(line_no) + ": bad integer value for '" + key +
                           "'");
  return v;
}

inline bool parse_bool(std::string_view text, int line_no, const std::string& key) {
  if (text == "on" || text == "true" || text == "yes" || text == "1") return true;
  if (text == "off" || text == "false" || text == "no" || text == "0") return false;
  throw validation_error("line " + std::to_string(line_no) + ": bad boolean value for '" + key +
                         "' (use on/off)");
}

}  // namespace detail

inline NetDescriptor parse_descriptor(const std::string& text) {
  NetDescriptor net;
  bool saw_input = false;
  std::map<std::string, int> kind_counts;
  std::istringstream in(text);
  std::string raw;
  int line_no = 0;

  const auto auto_name = [&](const char* kind) {
    return std::string(kind) + std::to_string(++kind_counts[kind]);
  };

  while (std::getline(in, raw)) {
    ++line_no;
    if (const auto hash = raw.find('#'); hash != std::string::npos) raw.erase(hash);
    std::istringstream ls(raw);
    std::string directive;
    if (!(ls >> directive)) continue;

    std::map<std::string, std::string> kv;
    std::string tok;
    std::vector<std::string> bare;
    while (ls >> tok) {
      const auto eq = tok.find('=');
      if (eq == std::string::npos) {
        bare.push_back(tok);
      } else {
        kv[tok.substr(0, eq)] = tok.substr(eq + 1);
      }
    }
    const auto take = [&](const char* key) -> std::string {
      auto it = kv.find(key);
      if (it == kv.end()) return {};
      std::string v = it->second;
      kv.erase(it);
      return v;
    };
    const auto require = [&](const char* key) {
      std::string v = take(key);
      if (v.empty())
        throw validation_error("line " + std::to_string(line_no) + ": " + directive +
                               " needs key '" + key + "'");
      return v;
    };
    const auto finish = [&] {
      if (!kv.empty())
        throw validation_error("line " + std::to_string(line_no) + ": unknown key '" +
                               kv.begin()->first + "' in " + directive + " stanza");
      if (!bare.empty())
        throw validation_error("line " + std::to_string(line_no) + ": stray token '" + bare[0] +
                               "' in " + directive + " stanza");
    };

    if (directive == "net") {
      if (bare.size() == 1 && kv.empty()) {
        net.name = bare[0];
        continue;
      }
      throw validation_error("line " + std::to_string(line_no) + ": expected 'net <name>'");
    }

    if (directive == "input") {
      if (saw_input)
        throw validation_error("line " + std::to_string(line_no) + ": duplicate input stanza");
      saw_input = true;
      net.in_channels = detail::parse_int(require("c"), line_no, "c");
      net.in_height = detail::parse_int(require("h"), line_no, "h");
      net.in_width = detail::parse_int(require("w"), line_no, "w");
      if (const std::string s = take("scale"); !s.empty())
        net.input_scale = detail::parse_real(s, line_no, "scale");
      finish();
      LayerDescriptor input;
      input.kind = LayerKind::kInput;
      input.name = "input";
      net.layers.push_back(input);
      continue;
    }

    if (!saw_input)
      throw validation_error("line " + std::to_string(line_no) +
                             ": input stanza must precede layer stanzas");

    LayerDescriptor l;
    if (directive == "conv") l.kind = LayerKind::kConv;
    else if (directive == "fc") l.kind = LayerKind::kFullyConnected;
    else if (directive == "act") l.kind = LayerKind::kAct;
    else if (directive == "maxpool") l.kind = LayerKind::kMaxPool;
    else if (directive == "softmax") l.kind = LayerKind::kSoftmax;
    else
      throw validation_error("line " + std::to_string(line_no) + ": unknown layer kind '" +
                             directive + "'");

    l.name = take("name");
    if (l.name.empty()) l.name = auto_name(directive == "maxpool" ? "pool" : directive.c_str());

    // quant keys shared by conv/fc/act
    const auto read_quant = [&] {
      if (const std::string s = take("quant"); !s.empty())
        l.quant.enabled = detail::parse_bool(s, line_no, "quant");
      if (const std::string s = take("wfmt"); !s.empty()) l.quant.weight_fmt = FixedPointFormat::parse(s);
      if (const std::string s = take("afmt"); !s.empty()) l.quant.act_fmt = FixedPointFormat::parse(s);
      if (const std::string s = take("scheme"); !s.empty()) l.quant.scheme = parse_rounding_scheme(s);
    };

    bool sugar_relu = false;
    std::int64_t sugar_pool_window = 0, sugar_pool_stride = 0;

    switch (l.kind) {
      case LayerKind::kConv:
        l.in_channels = detail::parse_int(require("in"), line_no, "in");
        l.out_channels = detail::parse_int(require("out"), line_no, "out");
        l.kernel = detail::parse_int(require("k"), line_no, "k");
        if (const std::string s = take("stride"); !s.empty()) l.stride = detail::parse_int(s, line_no, "stride");
        if (const std::string s = take("pad"); !s.empty()) l.pad = detail::parse_int(s, line_no, "pad");
        read_quant();
        break;
      case LayerKind::kFullyConnected:
        l.in_channels = detail::parse_int(require("in"), line_no, "in");
        l.out_channels = detail::parse_int(require("out"), line_no, "out");
        read_quant();
        break;
      case LayerKind::kAct:
        read_quant();
        break;
      case LayerKind::kMaxPool: {
        if (const std::string s = require("window"); s == "global") {
          l.pool_window = kGlobalPool;
          l.pool_stride = 1;
        } else {
          l.pool_window = detail::parse_int(s, line_no, "window");
        }
        if (const std::string s = take("stride"); !s.empty())
          l.pool_stride = detail::parse_int(s, line_no, "stride");
        break;
      }
      default:
        break;
    }

    if (l.kind == LayerKind::kConv || l.kind == LayerKind::kFullyConnected) {
      if (const std::string s = take("relu"); !s.empty())
        sugar_relu = detail::parse_bool(s, line_no, "relu");
      if (std::string s = take("pool"); !s.empty()) {
        if (s == "global") {
          sugar_pool_window = kGlobalPool;
          sugar_pool_stride = 1;
        } else if (const auto x = s.find('x'); x != std::string::npos) {
          sugar_pool_window = detail::parse_int(s.substr(0, x), line_no, "pool");
          sugar_pool_stride = detail::parse_int(s.substr(x + 1), line_no, "pool");
        } else {
          sugar_pool_window = detail::parse_int(s, line_no, "pool");
          sugar_pool_stride = sugar_pool_window;
        }
      }
    }
    finish();

    net.layers.push_back(l);
    if (sugar_relu) {
      LayerDescriptor act;
      act.kind = LayerKind::kAct;
      act.name = auto_name("act");
      act.quant = l.quant;
      net.layers.push_back(act);
    }
    if (sugar_pool_window != 0) {
      LayerDescriptor pool;
      pool.kind = LayerKind::kMaxPool;
      pool.name = auto_name("pool");
      pool.pool_window = sugar_pool_window;
      pool.pool_stride = sugar_pool_stride;
      net.layers.push_back(pool);
    }
  }

  if (!saw_input) throw validation_error("descriptor has no input stanza");
  validate(net);
  return net;
}

inline std::string emit_descriptor(const NetDescriptor& net) {
  validate(net);
  std::ostringstream out;
  out << "net " << net.name << "\n";
  out << "input c=" << net.in_channels << " h=" << net.in_height << " w=" << net.in_width
      << " scale=" << detail::format_real(net.input_scale) << "\n";
  for (std::size_t i = 1; i < net.layers.size(); ++i) {
    const LayerDescriptor& l = net.layers[i];
    out << to_string(l.kind) << " name=" << l.name;
    switch (l.kind) {
      case LayerKind::kConv:
        out << " in=" << l.in_channels << " out=" << l.out_channels << " k=" << l.kernel
            << " stride=" << l.stride << " pad=" << l.pad;
        break;
      case LayerKind::kFullyConnected:
        out << " in=" << l.in_channels << " out=" << l.out_channels;
        break;
      case LayerKind::kMaxPool:
        if (l.pool_window == kGlobalPool)
          out << " window=global";
        else
          out << " window=" << l.pool_window << " stride=" << l.pool_stride;
        break;
      default:
        break;
    }
    if (l.kind == LayerKind::kConv || l.kind == LayerKind::kFullyConnected ||
        l.kind == LayerKind::kAct) {
      out << " quant=" << (l.quant.enabled ? "on" : "off") << " wfmt=" << l.quant.weight_fmt.str()
          << " afmt=" << l.quant.act_fmt.str() << " scheme=" << to_string(l.quant.scheme);
    }
    out << "\n";
  }
  return out.str();
}

inline NetDescriptor load_descriptor(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw validation_error("cannot open descriptor file '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_descriptor(ss.str());
}

inline void save_descriptor(const NetDescriptor& net, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw validation_error("cannot write descriptor file '" + path + "'");
  out << emit_descriptor(net);
  if (!out) throw validation_error("short write to '" + path + "'");
}

// The 13-row benchmark network (11 conv + 2 fc on 3x224x224 input, ~1 GOp
// per frame). Per-layer pads are the unique values under which each row's
// tabulated input size composes with the next; pooling is 2x2 stride 2
// except after row 11, where a global pool reduces 18x18 to 1x1 so the
// first fc layer sees exactly 128 inputs.
inline NetDescriptor build_giga1net() {
  struct Row {
    std::int64_t in, out, k, pad;
    bool pool;
  };
  constexpr Row kRows[] = {
      {3, 16, 1, 0, true},     // 224 -> 224, pool -> 112
      {16, 16, 7, 1, true},    // 112 -> 108, pool -> 54
      {16, 32, 7, 0, true},    // 54 -> 48,  pool -> 24
      {32, 64, 5, 1, false},   // 24 -> 22
      {64, 64, 5, 1, false},   // 22 -> 20
      {64, 64, 5, 1, false},   // 20 -> 18
      {64, 128, 3, 1, false},  // 18 -> 18
      {128, 128, 3, 1, false},
      {128, 128, 3, 1, false},
      {128, 128, 3, 1, false},
      {128, 128, 3, 1, true},  // 18 -> 18, global pool -> 1
  };

  QuantSpec quant;
  quant.weight_fmt = FixedPointFormat(2, 14);
  quant.act_fmt = FixedPointFormat(8, 8);
  quant.scheme = RoundingScheme::kDeterministic;
  quant.enabled = true;

  NetDescriptor net;
  net.name = "giga1net";
  net.in_channels = 3;
  net.in_height = 224;
  net.in_width = 224;

  LayerDescriptor input;
  input.kind = LayerKind::kInput;
  input.name = "input";
  net.layers.push_back(input);

  int acts = 0, pools = 0;
  for (std::size_t r = 0; r < std::size(kRows); ++r) {
    LayerDescriptor conv;
    conv.kind = LayerKind::kConv;
    conv.name = "conv" + std::to_string(r + 1);
    conv.in_channels = kRows[r].in;
    conv.out_channels = kRows[r].out;
    conv.kernel = kRows[r].k;
    conv.stride = 1;
    conv.pad = kRows[r].pad;
    conv.quant = quant;
    net.layers.push_back(conv);

    LayerDescriptor act;
    act.kind = LayerKind::kAct;
    act.name = "act" + std::to_string(++acts);
    act.quant = quant;
    net.layers.push_back(act);

    if (kRows[r].pool) {
      LayerDescriptor pool;
      pool.kind = LayerKind::kMaxPool;
      pool.name = "pool" + std::to_string(++pools);
      if (r + 1 == std::size(kRows)) {
        pool.pool_window = kGlobalPool;
        pool.pool_stride = 1;
      }
      net.layers.push_back(pool);
    }
  }

  LayerDescriptor fc12;
  fc12.kind = LayerKind::kFullyConnected;
  fc12.name = "fc12";
  fc12.in_channels = 128;
  fc12.out_channels = 4096;
  fc12.quant = quant;
  net.layers.push_back(fc12);

  LayerDescriptor act12;
  act12.kind = LayerKind::kAct;
  act12.name = "act" + std::to_string(++acts);
  act12.quant = quant;
  net.layers.push_back(act12);

  LayerDescriptor fc13;
  fc13.kind = LayerKind::kFullyConnected;
  fc13.name = "fc13";
  fc13.in_channels = 4096;
  fc13.out_channels = 1000;
  fc13.quant = quant;
  net.layers.push_back(fc13);

  validate(net);
  return net;
}

}  // namespace fixq
