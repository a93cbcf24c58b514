#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "fixq/common.hpp"
#include "fixq/fixedpoint.hpp"
#include "fixq/inference.hpp"
#include "fixq/netdesc.hpp"
#include "fixq/profiler.hpp"

// Binary model container (.fxqm) and accelerator export (.fxqx). Both
// formats are little-endian with per-blob CRC32 checks; byte-level layouts
// are documented in docs/formats.md. The container stores shadow and
// quantized parameter blobs as IEEE-754 32-bit floats; the export stores
// quantized weights as 16-bit two's-complement codes plus their Q formats.

namespace fixq {

namespace ioutil {

inline std::uint32_t crc32(const std::uint8_t* data, std::size_t size) {
  static const auto table = [] {
    std::array<std::uint32_t, 256> t{};
    for (std::uint32_t i = 0; i < 256; ++i) {
      std::uint32_t c = i;
      for (int k = 0; k < 8; ++k) c = (c & 1) ? 0xEDB88320u ^ (c >> 1) : c >> 1;
      t[i] = c;
    }
    return t;
  }();
  std::uint32_t c = 0xFFFFFFFFu;
  for (std::size_t i = 0; i < size; ++i) c = table[(c ^ data[i]) & 0xFF] ^ (c >> 8);
  return c ^ 0xFFFFFFFFu;
}

class Writer {
 public:
  void u8(std::uint8_t v) { buf_.push_back(v); }
  void u16(std::uint16_t v) { for (int i = 0; i < 2; ++i) buf_.push_back(static_cast<std::uint8_t>(v >> (8 * i))); }
  void u32(std::uint32_t v) { for (int i = 0; i < 4; ++i) buf_.push_back(static_cast<std::uint8_t>(v >> (8 * i))); }
  void u64(std::uint64_t v) { for (int i = 0; i < 8; ++i) buf_.push_back(static_cast<std::uint8_t>(v >> (8 * i))); }
  void i16(std::int16_t v) { u16(static_cast<std::uint16_t>(v)); }
  void f32(float v) {
    std::uint32_t bits;
    std::memcpy(&bits, &v, 4);
    u32(bits);
  }
  void bytes(const void* data, std::size_t n) {
    const auto* p = static_cast<const std::uint8_t*>(data);
    buf_.insert(buf_.end(), p, p + n);
  }
  void str(const std::string& s) {
    if (s.size() > 0xFFFF) throw validation_error("serialized string too long");
    u16(static_cast<std::uint16_t>(s.size()));
    bytes(s.data(), s.size());
  }

  std::size_t size() const { return buf_.size(); }
  const std::vector<std::uint8_t>& data() const { return buf_; }

  std::uint32_t crc_of_tail(std::size_t from) const {
    return crc32(buf_.data() + from, buf_.size() - from);
  }

  void to_file(const std::string& path) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw validation_error("cannot write '" + path + "'");
    out.write(reinterpret_cast<const char*>(buf_.data()), static_cast<std::streamsize>(buf_.size()));
    if (!out) throw validation_error("short write to '" + path + "'");
  }

 private:
  std::vector<std::uint8_t> buf_;
};

class Reader {
 public:
  explicit Reader(std::vector<std::uint8_t> buf, std::string name)
      : buf_(std::move(buf)), name_(std::move(name)) {}

  static Reader from_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw validation_error("cannot open '" + path + "'");
    std::vector<std::uint8_t> buf((std::istreambuf_iterator<char>(in)),
                                  std::istreambuf_iterator<char>());
    return Reader(std::move(buf), path);
  }

  std::uint8_t u8() { need(1); return buf_[pos_++]; }
  std::uint16_t u16() {
    need(2);
    std::uint16_t v = 0;
    for (int i = 0; i < 2; ++i) v = static_cast<std::uint16_t>(v | (std::uint16_t(buf_[pos_++]) << (8 * i)));
    return v;
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= std::uint32_t(buf_[pos_++]) << (8 * i);
    return v;
  }
  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= std::uint64_t(buf_[pos_++]) << (8 * i);
    return v;
  }
  std::int16_t i16() { return static_cast<std::int16_t>(u16()); }
  float f32() {
    const std::uint32_t bits = u32();
    float v;
    std::memcpy(&v, &bits, 4);
    return v;
  }
  std::string str() {
    const std::size_t n = u16();
    need(n);
    std::string s(reinterpret_cast<const char*>(buf_.data() + pos_), n);
    pos_ += n;
    return s;
  }

  std::size_t pos() const { return pos_; }
  bool done() const { return pos_ == buf_.size(); }

  std::uint32_t crc_since(std::size_t from) const {
    return crc32(buf_.data() + from, pos_ - from);
  }

  void expect_crc(std::size_t from, const char* what) {
    const std::uint32_t actual = crc_since(from);
    const std::uint32_t stored = u32();
    if (actual != stored)
      throw validation_error(std::string("checksum mismatch in ") + what + " of '" + name_ +
                             "' (file corrupt or truncated)");
  }

  void need(std::uint64_t n) const {
    // n can come from a corrupted length field; compare without overflow
    if (n > buf_.size() - pos_)
      throw validation_error("truncated file '" + name_ + "'");
  }

 private:
  std::vector<std::uint8_t> buf_;
  std::string name_;
  std::size_t pos_ = 0;
};

}  // namespace ioutil

inline constexpr std::uint32_t kContainerVersion = 1;
inline constexpr std::uint32_t kExportVersion = 1;

namespace detail {

inline void write_blob(ioutil::Writer& w, const std::string& name, const Tensor& t) {
  w.str(name);
  w.u8(1);  // dtype: f32 little-endian
  w.u8(static_cast<std::uint8_t>(t.rank()));
  for (std::int64_t d = 0; d < t.rank(); ++d) w.u64(static_cast<std::uint64_t>(t.dim(static_cast<std::size_t>(d))));
  w.u64(static_cast<std::uint64_t>(t.size()) * 4);
  const std::size_t payload_start = w.size();
  for (std::int64_t i = 0; i < t.size(); ++i) w.f32(static_cast<float>(t[i]));
  w.u32(w.crc_of_tail(payload_start));
}

inline Tensor read_blob(ioutil::Reader& r, const std::string& expect_name, const Shape& expect_shape) {
  const std::string name = r.str();
  if (name != expect_name)
    throw validation_error("container blob order mismatch: expected '" + expect_name +
                           "', found '" + name + "'");
  if (r.u8() != 1) throw validation_error("container blob '" + name + "': unsupported dtype");
  const int rank = r.u8();
  Shape shape;
  for (int d = 0; d < rank; ++d) shape.push_back(static_cast<std::int64_t>(r.u64()));
  if (shape != expect_shape)
    throw validation_error("container blob '" + name + "': shape " + shape_str(shape) +
                           " does not match descriptor shape " + shape_str(expect_shape));
  const std::uint64_t payload = r.u64();
  if (payload != static_cast<std::uint64_t>(shape_numel(shape)) * 4)
    throw validation_error("container blob '" + name + "': payload length mismatch");
  const std::size_t payload_start = r.pos();
  Tensor t(shape);
  for (std::int64_t i = 0; i < t.size(); ++i) t[i] = static_cast<real>(r.f32());
  r.expect_crc(payload_start, "blob");
  return t;
}

}  // namespace detail

// Saves descriptor, quantization config, and the dual parameter blobs
// (shadow + inference copy per tensor). Parameters are stored as f32; a
// model whose parameters are f32-representable loads back bit-exactly.
inline void save_model(const Model& m, const std::string& path) {
  validate(m.net);
  if (m.params.size() != weighted_layers(m.net).size())
    throw validation_error("save_model: model/descriptor mismatch");

  ioutil::Writer w;
  w.bytes("FXQM", 4);
  w.u32(kContainerVersion);
  const nlohmann::json manifest{{"format", "fixq-model"},
                                {"version", kContainerVersion},
                                {"descriptor", emit_descriptor(m.net)},
                                {"input_scale", m.net.input_scale},
                                {"provenance", m.provenance}};
  const std::string mtext = manifest.dump(2);
  w.u32(static_cast<std::uint32_t>(mtext.size()));
  w.bytes(mtext.data(), mtext.size());
  w.u32(static_cast<std::uint32_t>(m.params.size() * 4));
  for (const LayerState& st : m.params) {
    detail::write_blob(w, st.desc.name + ".weights", st.weights);
    detail::write_blob(w, st.desc.name + ".weights.q", st.quantized_weights);
    detail::write_blob(w, st.desc.name + ".bias", st.bias);
    detail::write_blob(w, st.desc.name + ".bias.q", st.quantized_bias);
  }
  w.to_file(path);
}

inline Model load_model(const std::string& path) {
  ioutil::Reader r = ioutil::Reader::from_file(path);
  r.need(4);
  char magic[4];
  for (char& c : magic) c = static_cast<char>(r.u8());
  if (std::string_view(magic, 4) != "FXQM")
    throw validation_error("'" + path + "' is not a model container");
  if (r.u32() != kContainerVersion)
    throw validation_error("'" + path + "': unsupported container version");
  const std::uint32_t mlen = r.u32();
  r.need(mlen);
  std::string mtext;
  mtext.reserve(mlen);
  for (std::uint32_t i = 0; i < mlen; ++i) mtext.push_back(static_cast<char>(r.u8()));
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(mtext);
  } catch (const nlohmann::json::exception& e) {
    throw validation_error("'" + path + "': malformed manifest: " + e.what());
  }

  Model m = make_model(parse_descriptor(manifest.at("descriptor").get<std::string>()));
  m.provenance = manifest.value("provenance", "");

  const std::uint32_t blob_count = r.u32();
  if (blob_count != m.params.size() * 4)
    throw validation_error("'" + path + "': blob count does not match descriptor");
  for (LayerState& st : m.params) {
    st.weights = detail::read_blob(r, st.desc.name + ".weights", st.weights.shape());
    st.quantized_weights = detail::read_blob(r, st.desc.name + ".weights.q", st.weights.shape());
    st.bias = detail::read_blob(r, st.desc.name + ".bias", st.bias.shape());
    st.quantized_bias = detail::read_blob(r, st.desc.name + ".bias.q", st.bias.shape());
    st.cache_fresh = true;
  }
  if (!r.done()) throw validation_error("'" + path + "': trailing bytes after last blob");
  return m;
}

struct ContainerInfo {
  std::uint64_t blob_payload_bytes = 0;  // raw tensor bytes, headers excluded
  std::uint64_t file_bytes = 0;
  std::uint32_t blob_count = 0;
};

inline ContainerInfo inspect_container(const std::string& path) {
  ioutil::Reader r = ioutil::Reader::from_file(path);
  ContainerInfo info;
  for (int i = 0; i < 4; ++i) (void)r.u8();
  (void)r.u32();
  const std::uint32_t mlen = r.u32();
  for (std::uint32_t i = 0; i < mlen; ++i) (void)r.u8();
  info.blob_count = r.u32();
  for (std::uint32_t b = 0; b < info.blob_count; ++b) {
    (void)r.str();
    (void)r.u8();
    const int rank = r.u8();
    for (int d = 0; d < rank; ++d) (void)r.u64();
    const std::uint64_t payload = r.u64();
    info.blob_payload_bytes += payload;
    r.need(payload);
    for (std::uint64_t i = 0; i < payload; ++i) (void)r.u8();
    (void)r.u32();
  }
  info.file_bytes = r.pos();
  return info;
}

// ----------------------------- accelerator export --------------------------

struct ExportedLayer {
  std::string name;
  LayerKind kind = LayerKind::kConv;
  Shape dims;  // (out,in,kh,kw) conv, (out,in) fc
  FixedPointFormat weight_fmt;
  FixedPointFormat act_fmt;
  Tensor weights;  // decoded quantized values
  Tensor bias;
};

struct AcceleratorExport {
  std::vector<ExportedLayer> layers;
};

// Writes the quantized integer-code export. The model must be quantized
// under `alloc` (formats match, caches fresh, every value on its grid);
// off-grid values raise instead of being re-rounded.
inline void export_accelerator(const Model& m, const BitAllocation& alloc,
                               const std::string& path) {
  validate(m.net);
  if (alloc.layers.size() != m.params.size())
    throw validation_error("export_accelerator: allocation does not match model");
  if (alloc.total_bits > 16)
    throw validation_error("export_accelerator: only budgets up to 16 bits are exportable");

  ioutil::Writer w;
  w.bytes("FXQX", 4);
  w.u32(kExportVersion);
  w.u32(static_cast<std::uint32_t>(m.params.size()));

  for (std::size_t j = 0; j < m.params.size(); ++j) {
    const LayerState& st = m.params[j];
    const LayerFormats& fmts = alloc.layers[j];
    if (st.desc.name != fmts.name)
      throw validation_error("export_accelerator: layer order mismatch at '" + st.desc.name + "'");
    if (!st.desc.quant.enabled || !(st.desc.quant.weight_fmt == fmts.weight_fmt) ||
        !(st.desc.quant.act_fmt == fmts.act_fmt))
      throw validation_error("export_accelerator: layer " + st.desc.name +
                             " is not quantized under the given allocation");
    if (!st.cache_fresh)
      throw validation_error("export_accelerator: layer " + st.desc.name +
                             " has a stale quantized cache");

    w.str(st.desc.name);
    w.u8(st.desc.kind == LayerKind::kConv ? 1 : 2);
    w.u8(static_cast<std::uint8_t>(st.quantized_weights.rank()));
    for (std::int64_t d = 0; d < st.quantized_weights.rank(); ++d)
      w.u64(static_cast<std::uint64_t>(st.quantized_weights.dim(static_cast<std::size_t>(d))));
    w.u8(static_cast<std::uint8_t>(fmts.weight_fmt.bd()));
    w.u8(static_cast<std::uint8_t>(fmts.weight_fmt.ad()));
    w.u8(fmts.weight_fmt.is_signed() ? 1 : 0);
    w.u8(static_cast<std::uint8_t>(fmts.act_fmt.bd()));
    w.u8(static_cast<std::uint8_t>(fmts.act_fmt.ad()));
    w.u8(fmts.act_fmt.is_signed() ? 1 : 0);

    const auto write_codes = [&](const Tensor& t, const char* what) {
      w.u64(static_cast<std::uint64_t>(t.size()));
      const std::size_t start = w.size();
      for (std::int64_t i = 0; i < t.size(); ++i) {
        std::int64_t code;
        try {
          code = to_code(t[i], fmts.weight_fmt);
        } catch (const validation_error& e) {
          throw validation_error("export_accelerator: layer " + st.desc.name + " " + what +
                                 " element " + std::to_string(i) + ": " + e.what());
        }
        w.i16(static_cast<std::int16_t>(code));
      }
      w.u32(w.crc_of_tail(start));
    };
    write_codes(st.quantized_weights, "weights");
    write_codes(st.quantized_bias, "bias");
  }
  w.to_file(path);
}

// Bundled decoder; reading back yields the exact quantized tensors.
inline AcceleratorExport read_accelerator(const std::string& path) {
  ioutil::Reader r = ioutil::Reader::from_file(path);
  char magic[4];
  for (char& c : magic) c = static_cast<char>(r.u8());
  if (std::string_view(magic, 4) != "FXQX")
    throw validation_error("'" + path + "' is not an accelerator export");
  if (r.u32() != kExportVersion)
    throw validation_error("'" + path + "': unsupported export version");

  AcceleratorExport out;
  const std::uint32_t records = r.u32();
  for (std::uint32_t rec = 0; rec < records; ++rec) {
    ExportedLayer layer;
    layer.name = r.str();
    const std::uint8_t kind = r.u8();
    if (kind != 1 && kind != 2)
      throw validation_error("'" + path + "': unknown layer kind in record " + layer.name);
    layer.kind = kind == 1 ? LayerKind::kConv : LayerKind::kFullyConnected;
    const int rank = r.u8();
    for (int d = 0; d < rank; ++d) layer.dims.push_back(static_cast<std::int64_t>(r.u64()));
    const int wbd = r.u8(), wad = r.u8();
    const bool wsigned = r.u8() != 0;
    const int abd = r.u8(), aad = r.u8();
    const bool asigned = r.u8() != 0;
    layer.weight_fmt = FixedPointFormat(wbd, wad, wsigned);
    layer.act_fmt = FixedPointFormat(abd, aad, asigned);

    const auto read_codes = [&](const Shape& shape) {
      const std::uint64_t n = r.u64();
      if (n != static_cast<std::uint64_t>(shape_numel(shape)))
        throw validation_error("'" + path + "': code count mismatch in record " + layer.name);
      r.need(n * 2);  // bound allocations by the actual file size
      const std::size_t start = r.pos();
      Tensor t(shape);
      for (std::int64_t i = 0; i < t.size(); ++i)
        t[i] = from_code(r.i16(), layer.weight_fmt);
      r.expect_crc(start, "code block");
      return t;
    };
    layer.weights = read_codes(layer.dims);
    layer.bias = read_codes({layer.dims[0]});
    out.layers.push_back(std::move(layer));
  }
  if (!r.done()) throw validation_error("'" + path + "': trailing bytes after last record");
  return out;
}

struct ExportInfo {
  std::uint64_t code_payload_bytes = 0;  // raw int16 code bytes, headers excluded
  std::uint64_t file_bytes = 0;
  std::uint32_t record_count = 0;
};

inline ExportInfo inspect_export(const std::string& path) {
  ioutil::Reader r = ioutil::Reader::from_file(path);
  ExportInfo info;
  for (int i = 0; i < 4; ++i) (void)r.u8();
  (void)r.u32();
  info.record_count = r.u32();
  for (std::uint32_t rec = 0; rec < info.record_count; ++rec) {
    (void)r.str();
    (void)r.u8();
    const int rank = r.u8();
    for (int d = 0; d < rank; ++d) (void)r.u64();
    for (int i = 0; i < 6; ++i) (void)r.u8();
    for (int block = 0; block < 2; ++block) {
      const std::uint64_t n = r.u64();
      info.code_payload_bytes += n * 2;
      r.need(n * 2);
      for (std::uint64_t i = 0; i < n; ++i) (void)r.i16();
      (void)r.u32();
    }
  }
  info.file_bytes = r.pos();
  return info;
}

}  // namespace fixq
