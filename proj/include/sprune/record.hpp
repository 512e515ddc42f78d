#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "sprune/gate_state.hpp"
#include "sprune/network.hpp"
#include "sprune/search.hpp"
#include "sprune/trainer.hpp"

namespace sprune {

inline constexpr int kRunRecordVersion = 1;
inline constexpr int kCheckpointVersion = 1;

/// Everything one pruning run produced. Immutable once sealed.
struct RunRecord {
  std::string tool_version;
  std::string config_hash;
  std::string config_json;
  std::vector<std::uint64_t> seeds;
  std::string arch_name;
  std::vector<int> gated_layer_ids;  // layer index of every gated BN
  std::vector<int> original_widths;  // unpruned channel count per gated layer
  std::int64_t full_flops = 0;
  std::vector<GateSnapshot> trajectory;
  std::optional<std::size_t> selected_snapshot;
  std::optional<SearchResult> search;
  std::vector<TrainReport> reports;
  std::vector<std::string> files;  // artifacts referenced by the record
  std::string failed_stage;        // empty when the run completed
  std::string failure_message;
  bool sealed = false;

  bool failed() const noexcept { return !failed_stage.empty(); }
  bool operator==(const RunRecord&) const = default;
};

/// Marks the record immutable; every referenced file must exist.
void seal(RunRecord& record);

/// Header line, JSON description, then little-endian float32 blobs whose
/// shapes and crc32 checksums are declared in the JSON.
std::vector<std::uint8_t> encode_run(const RunRecord& record);
RunRecord decode_run(const std::vector<std::uint8_t>& bytes, const std::string& name = "record");

void save_run(const RunRecord& record, const std::string& path);
RunRecord load_run(const std::string& path);

/// Architecture, channel config, parameters and BN statistics of a network.
std::vector<std::uint8_t> encode_checkpoint(const Network& net);
Network decode_checkpoint(const std::vector<std::uint8_t>& bytes, const std::string& name = "checkpoint");
void save_checkpoint(const Network& net, const std::string& path);
Network load_checkpoint(const std::string& path);

/// Short hex digest used to identify configurations.
std::string content_hash(const std::string& text);

}  // namespace sprune
