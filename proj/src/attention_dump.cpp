#include "spd/attention_dump.hpp"

#include <bit>
#include <cstring>
#include <limits>

namespace spd {

using nlohmann::json;

namespace {

constexpr char kMagic[4] = {'S', 'P', 'D', 'A'};
constexpr std::uint32_t kVersion = 1;

enum Tag : std::uint32_t { kRecord = 1, kRegions = 2, kSpMask = 3, kLatent = 4, kNoise = 5, kMetadata = 6 };

class Writer {
 public:
  void u8(std::uint8_t v) { buf_.push_back(v); }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) buf_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void i32(std::int32_t v) { u32(static_cast<std::uint32_t>(v)); }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) buf_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void f32(Real v) {
    const float f = is_masked(v) ? -std::numeric_limits<float>::infinity() : static_cast<float>(v);
    u32(std::bit_cast<std::uint32_t>(f));
  }
  void bytes(std::string_view s) { buf_.insert(buf_.end(), s.begin(), s.end()); }
  void matrix(const Matrix& m) {
    for (Eigen::Index i = 0; i < m.rows(); ++i)
      for (Eigen::Index j = 0; j < m.cols(); ++j) f32(m(i, j));
  }
  std::vector<std::uint8_t>& buffer() { return buf_; }

 private:
  std::vector<std::uint8_t> buf_;
};

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> b) : b_(b) {}
  std::size_t remaining() const { return b_.size() - pos_; }
  void need(std::size_t n) const {
    if (remaining() < n) throw FormatError("attention dump truncated");
  }
  std::uint8_t u8() {
    need(1);
    return b_[pos_++];
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b_[pos_++]) << (8 * i);
    return v;
  }
  std::int32_t i32() { return static_cast<std::int32_t>(u32()); }
  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b_[pos_++]) << (8 * i);
    return v;
  }
  Real f32() {
    const float f = std::bit_cast<float>(u32());
    return f == -std::numeric_limits<float>::infinity() ? masked_value<Real>() : static_cast<Real>(f);
  }
  Matrix matrix(std::uint64_t rows, std::uint64_t cols) {
    need(rows * cols * 4);
    Matrix m(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
    for (Eigen::Index i = 0; i < m.rows(); ++i)
      for (Eigen::Index j = 0; j < m.cols(); ++j) m(i, j) = f32();
    return m;
  }
  std::span<const std::uint8_t> take(std::size_t n) {
    need(n);
    auto s = b_.subspan(pos_, n);
    pos_ += n;
    return s;
  }

 private:
  std::span<const std::uint8_t> b_;
  std::size_t pos_ = 0;
};

void put_map(Writer& w, const AttnMap& m) {
  w.u32(m.kind == AttnKind::cross ? 0 : 1);
  w.u32(static_cast<std::uint32_t>(m.grid.w));
  w.u32(static_cast<std::uint32_t>(m.grid.h));
  w.u32(static_cast<std::uint32_t>(m.values.cols()));
  w.matrix(m.values);
}

AttnMap get_map(Reader& r) {
  AttnMap m;
  m.kind = r.u32() == 0 ? AttnKind::cross : AttnKind::self;
  m.grid.w = static_cast<int>(r.u32());
  m.grid.h = static_cast<int>(r.u32());
  const std::uint32_t cols = r.u32();
  m.values = r.matrix(static_cast<std::uint64_t>(m.grid.size()), cols);
  return m;
}

void section(Writer& out, std::uint32_t tag, Writer&& payload) {
  out.u32(tag);
  out.u64(payload.buffer().size());
  out.buffer().insert(out.buffer().end(), payload.buffer().begin(), payload.buffer().end());
}

Writer record_payload(const AttentionRecord& r, std::uint32_t pass) {
  Writer w;
  w.u32(pass);
  w.i32(r.step);
  w.i32(r.layer);
  put_map(w, r.cross);
  put_map(w, r.self);
  return w;
}

Writer matrix_payload(const Matrix& m) {
  Writer w;
  w.u32(static_cast<std::uint32_t>(m.rows()));
  w.u32(static_cast<std::uint32_t>(m.cols()));
  w.matrix(m);
  return w;
}

}  // namespace

std::vector<std::uint8_t> encode_dump(const AttentionDump& dump) {
  std::uint32_t sections = 1 + static_cast<std::uint32_t>(dump.records.size() + dump.pass2_records.size());
  sections += dump.regions ? 1 : 0;
  sections += dump.sp_mask ? 1 : 0;
  sections += dump.latent ? 1 : 0;
  sections += dump.x_T ? 1 : 0;

  Writer out;
  out.bytes(std::string_view(kMagic, 4));
  out.u32(kVersion);
  out.u32(sections);
  {
    Writer w;
    w.bytes(dump.metadata.dump());
    section(out, kMetadata, std::move(w));
  }
  for (const auto& r : dump.records) section(out, kRecord, record_payload(r, 1));
  for (const auto& r : dump.pass2_records) section(out, kRecord, record_payload(r, 2));
  if (dump.regions) {
    const auto& rg = *dump.regions;
    if (rg.anchors.size() != rg.regions.size()) throw ShapeMismatch("region dump: anchors and regions differ in count");
    Writer w;
    w.u32(static_cast<std::uint32_t>(rg.grid.w));
    w.u32(static_cast<std::uint32_t>(rg.grid.h));
    w.u32(static_cast<std::uint32_t>(rg.regions.size()));
    for (std::size_t k = 0; k < rg.regions.size(); ++k) {
      for (int i = 0; i < rg.grid.size(); ++i) w.u8(rg.anchors[k](i) ? 1 : 0);
      for (int i = 0; i < rg.grid.size(); ++i) w.u8(rg.regions[k](i) ? 1 : 0);
    }
    section(out, kRegions, std::move(w));
  }
  if (dump.sp_mask) {
    Writer w;
    w.u32(static_cast<std::uint32_t>(dump.sp_mask->grid.w));
    w.u32(static_cast<std::uint32_t>(dump.sp_mask->grid.h));
    w.u32(static_cast<std::uint32_t>(dump.sp_mask->values.cols()));
    w.matrix(dump.sp_mask->values);
    section(out, kSpMask, std::move(w));
  }
  if (dump.latent) section(out, kLatent, matrix_payload(*dump.latent));
  if (dump.x_T) section(out, kNoise, matrix_payload(*dump.x_T));
  return std::move(out.buffer());
}

AttentionDump decode_dump(std::span<const std::uint8_t> bytes) {
  Reader r(bytes);
  const auto magic = r.take(4);
  if (std::memcmp(magic.data(), kMagic, 4) != 0) throw FormatError("not an attention dump (bad magic)");
  const std::uint32_t version = r.u32();
  if (version != kVersion) throw FormatError("unsupported attention dump version " + std::to_string(version));
  const std::uint32_t sections = r.u32();

  AttentionDump dump;
  for (std::uint32_t s = 0; s < sections; ++s) {
    const std::uint32_t tag = r.u32();
    const std::uint64_t len = r.u64();
    Reader p(r.take(len));
    switch (tag) {
      case kRecord: {
        const std::uint32_t pass = p.u32();
        AttentionRecord rec;
        rec.step = p.i32();
        rec.layer = p.i32();
        rec.cross = get_map(p);
        rec.self = get_map(p);
        (pass == 2 ? dump.pass2_records : dump.records).push_back(std::move(rec));
        break;
      }
      case kRegions: {
        RegionDump rg;
        rg.grid.w = static_cast<int>(p.u32());
        rg.grid.h = static_cast<int>(p.u32());
        const std::uint32_t n = p.u32();
        for (std::uint32_t k = 0; k < n; ++k) {
          Mask a(rg.grid.size()), d(rg.grid.size());
          for (int i = 0; i < rg.grid.size(); ++i) a(i) = p.u8() != 0;
          for (int i = 0; i < rg.grid.size(); ++i) d(i) = p.u8() != 0;
          rg.anchors.push_back(std::move(a));
          rg.regions.push_back(std::move(d));
        }
        dump.regions = std::move(rg);
        break;
      }
      case kSpMask: {
        MaskDump m;
        m.grid.w = static_cast<int>(p.u32());
        m.grid.h = static_cast<int>(p.u32());
        const std::uint32_t tokens = p.u32();
        m.values = p.matrix(static_cast<std::uint64_t>(m.grid.size()), tokens);
        dump.sp_mask = std::move(m);
        break;
      }
      case kLatent:
      case kNoise: {
        const std::uint32_t rows = p.u32(), cols = p.u32();
        (tag == kLatent ? dump.latent : dump.x_T) = p.matrix(rows, cols);
        break;
      }
      case kMetadata: {
        const auto raw = p.take(p.remaining());
        try {
          dump.metadata = json::parse(raw.begin(), raw.end());
        } catch (const json::exception& e) {
          throw FormatError(std::string("attention dump metadata: ") + e.what());
        }
        break;
      }
      default:
        break;
    }
  }
  return dump;
}

void write_dump(const std::string& path, const AttentionDump& dump) { write_file(path, encode_dump(dump)); }

AttentionDump read_dump(const std::string& path) {
  const auto bytes = read_file(path);
  return decode_dump(bytes);
}

json parsed_to_json(const ParsedPrompt& parsed) {
  auto span_json = [](const TokenSpan& s) {
    return json{{"start", s.start}, {"end", s.end}, {"surface", s.surface}, {"chars", {s.chars.begin, s.chars.end}}};
  };
  json concepts = json::array();
  for (const auto& c : parsed.concepts) {
    json attrs = json::array();
    for (const auto& a : c.attributes) attrs.push_back(span_json(a));
    concepts.push_back({{"index", c.index}, {"noun", span_json(c.noun)}, {"attributes", attrs}});
  }
  return {{"raw", parsed.raw},
          {"token_count", parsed.token_count},
          {"special_token_indices", parsed.special_token_indices},
          {"concepts", concepts}};
}

ParsedPrompt parsed_from_json(const json& j) {
  auto span_from = [](const json& s) {
    TokenSpan t;
    t.start = s.at("start");
    t.end = s.at("end");
    t.surface = s.at("surface");
    t.chars = {s.at("chars").at(0).get<int>(), s.at("chars").at(1).get<int>()};
    return t;
  };
  ParsedPrompt p;
  try {
    p.raw = j.at("raw");
    p.token_count = j.at("token_count");
    p.special_token_indices = j.at("special_token_indices").get<std::set<int>>();
    for (const auto& c : j.at("concepts")) {
      ConceptSpan cs;
      cs.index = c.at("index");
      cs.noun = span_from(c.at("noun"));
      for (const auto& a : c.at("attributes")) cs.attributes.push_back(span_from(a));
      p.concepts.push_back(std::move(cs));
    }
  } catch (const json::exception& e) {
    throw FormatError(std::string("malformed parsed-prompt metadata: ") + e.what());
  }
  return p;
}

AttentionDump make_dump(const GenerationResult& g, json metadata) {
  AttentionDump d;
  d.metadata = std::move(metadata);
  d.metadata["parsed"] = parsed_to_json(g.parsed);
  const auto& diag = g.diagnostics;
  d.metadata["diagnostics"] = {{"protection_active", diag.protection_active},
                               {"reason", diag.reason},
                               {"concepts", diag.concepts},
                               {"pass1_steps", diag.pass1_steps},
                               {"pass2_steps", diag.pass2_steps},
                               {"backend_steps", diag.backend_steps},
                               {"replaced_self_maps", diag.replaced_self_maps},
                               {"masked_entries", diag.masked_entries}};
  d.records = g.records;
  d.pass2_records = g.pass2_records;
  for (auto& r : d.records) r.self_heads.clear();
  for (auto& r : d.pass2_records) r.self_heads.clear();
  if (!g.regions.regions.empty()) d.regions = RegionDump{g.regions.grid, g.regions.anchors, g.regions.regions};
  if (g.sp_mask.values().size() > 0) d.sp_mask = MaskDump{g.sp_mask.grid(), g.sp_mask.values()};
  if (g.latent.size() > 0) d.latent = g.latent;
  if (g.x_T.size() > 0) d.x_T = g.x_T;
  return d;
}

}  // namespace spd
