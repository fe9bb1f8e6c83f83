#pragma once

// Binary container for one generation's attention, regions, mask and
// latents. Layout (all integers and floats little-endian):
//
//   magic "SPDA" | u32 version (1) | u32 section count
//   section: u32 tag | u64 payload bytes | payload
//
//   tag 1 record   u32 pass (1|2) | i32 step | i32 layer | map cross | map self
//                  map = u32 kind (0 cross, 1 self) | u32 w | u32 h | u32 cols
//                        | f32[w*h*cols] row-major (row = y*w + x)
//   tag 2 regions  u32 w | u32 h | u32 n | n x (u8[w*h] anchor, u8[w*h] region)
//   tag 3 sp mask  u32 w | u32 h | u32 tokens | f32[w*h*tokens], masked = -inf
//   tag 4 latent   u32 rows | u32 cols | f32[rows*cols]
//   tag 5 x_T      same as tag 4
//   tag 6 metadata UTF-8 JSON
//
// Readers skip unknown tags.

#include "spd/denoise_pipeline.hpp"

#include <json.hpp>

#include <optional>

namespace spd {

struct RegionDump {
  Grid grid;
  std::vector<Mask> anchors;
  std::vector<Mask> regions;
};

struct MaskDump {
  Grid grid;
  Matrix values;
};

struct AttentionDump {
  nlohmann::json metadata = nlohmann::json::object();
  std::vector<AttentionRecord> records;        // pass 1 (self_heads not stored)
  std::vector<AttentionRecord> pass2_records;
  std::optional<RegionDump> regions;
  std::optional<MaskDump> sp_mask;
  std::optional<Matrix> latent;
  std::optional<Matrix> x_T;
};

std::vector<std::uint8_t> encode_dump(const AttentionDump& dump);
/// Throws FormatError on bad magic, version or truncation.
AttentionDump decode_dump(std::span<const std::uint8_t> bytes);

void write_dump(const std::string& path, const AttentionDump& dump);
AttentionDump read_dump(const std::string& path);

/// Concept spans, token count and specials as JSON, and back.
nlohmann::json parsed_to_json(const ParsedPrompt& parsed);
ParsedPrompt parsed_from_json(const nlohmann::json& j);

/// Everything a generation produced; `metadata` is stored as given plus
/// "parsed" and "diagnostics".
AttentionDump make_dump(const GenerationResult& g, nlohmann::json metadata = nlohmann::json::object());

}  // namespace spd
