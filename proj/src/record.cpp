#include "sprune/record.hpp"

#include <zlib.h>

#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "json.hpp"
#include "sprune/error.hpp"

namespace sprune {

using nlohmann::json;

namespace {

constexpr const char* kRunMagic = "SPRUNE-RUN";
constexpr const char* kCheckpointMagic = "SPRUNE-CKPT";

std::uint32_t crc(const std::uint8_t* data, std::size_t n) {
  return static_cast<std::uint32_t>(::crc32(0L, data, static_cast<uInt>(n)));
}

// Accumulates float blobs and describes each one in the JSON table.
class BlobWriter {
 public:
  json add(std::span<const float> values, const Shape& shape) {
    const std::size_t offset = bytes_.size();
    for (float v : values) {
      std::uint32_t u;
      std::memcpy(&u, &v, sizeof u);
      for (int b = 0; b < 4; ++b) bytes_.push_back(static_cast<std::uint8_t>(u >> (8 * b)));
    }
    return json{{"offset", offset},
                {"shape", shape},
                {"crc32", crc(bytes_.data() + offset, bytes_.size() - offset)}};
  }
  const std::vector<std::uint8_t>& bytes() const { return bytes_; }

 private:
  std::vector<std::uint8_t> bytes_;
};

class BlobReader {
 public:
  BlobReader(const std::uint8_t* data, std::size_t size, std::string name)
      : data_(data), size_(size), name_(std::move(name)) {}

  std::vector<float> read(const json& desc, Shape* shape_out = nullptr) const {
    const auto offset = desc.at("offset").get<std::size_t>();
    const auto shape = desc.at("shape").get<Shape>();
    const std::size_t n = shape_numel(shape);
    require(offset <= size_ && n * 4 <= size_ - offset, ErrorKind::format,
            name_ + ": blob at offset " + std::to_string(offset) + " runs past the end");
    const std::uint8_t* p = data_ + offset;
    require(crc(p, n * 4) == desc.at("crc32").get<std::uint32_t>(), ErrorKind::corruption,
            name_ + ": checksum mismatch in blob at offset " + std::to_string(offset));
    std::vector<float> out(n);
    for (std::size_t i = 0; i < n; ++i) {
      std::uint32_t u = 0;
      for (int b = 0; b < 4; ++b) u |= static_cast<std::uint32_t>(p[i * 4 + b]) << (8 * b);
      std::memcpy(&out[i], &u, sizeof u);
    }
    if (shape_out) *shape_out = shape;
    return out;
  }

 private:
  const std::uint8_t* data_;
  std::size_t size_;
  std::string name_;
};

// "<magic> <version> <json bytes> <json crc32>\n" + json + blobs
std::vector<std::uint8_t> frame(const char* magic, int version, const json& meta,
                                const BlobWriter& blobs) {
  const std::string text = meta.dump();
  const auto* tp = reinterpret_cast<const std::uint8_t*>(text.data());
  const std::string header = std::string(magic) + " " + std::to_string(version) + " " +
                             std::to_string(text.size()) + " " +
                             std::to_string(crc(tp, text.size())) + "\n";
  std::vector<std::uint8_t> out(header.begin(), header.end());
  out.insert(out.end(), text.begin(), text.end());
  out.insert(out.end(), blobs.bytes().begin(), blobs.bytes().end());
  return out;
}

struct Unframed {
  json meta;
  std::size_t blob_start = 0;
};

Unframed unframe(const std::vector<std::uint8_t>& bytes, const char* magic, int version,
                 const std::string& name) {
  const auto nl = std::find(bytes.begin(), bytes.end(), std::uint8_t('\n'));
  require(nl != bytes.end(), ErrorKind::format, name + ": missing header line");
  std::istringstream header(std::string(bytes.begin(), nl));
  std::string got_magic;
  long long got_version = -1, length = -1;
  std::uint32_t text_crc = 0;
  header >> got_magic >> got_version >> length >> text_crc;
  require(got_magic == magic, ErrorKind::format, name + ": not a " + std::string(magic) + " file");
  require(got_version == version, ErrorKind::migration,
          name + ": format version " + std::to_string(got_version) + ", this build reads version " +
              std::to_string(version));
  require(static_cast<bool>(header) && length >= 0, ErrorKind::format, name + ": malformed header");
  const std::size_t start = static_cast<std::size_t>(nl - bytes.begin()) + 1;
  require(static_cast<std::size_t>(length) <= bytes.size() - start, ErrorKind::format,
          name + ": description truncated");
  require(crc(bytes.data() + start, static_cast<std::size_t>(length)) == text_crc,
          ErrorKind::corruption, name + ": checksum mismatch in description");
  Unframed u;
  try {
    u.meta = json::parse(bytes.begin() + static_cast<std::ptrdiff_t>(start),
                         bytes.begin() + static_cast<std::ptrdiff_t>(start + length));
  } catch (const json::exception& e) {
    fail(ErrorKind::format, name + ": " + e.what());
  }
  u.blob_start = start + static_cast<std::size_t>(length);
  return u;
}

std::vector<std::uint8_t> read_bytes(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  require(static_cast<bool>(f), ErrorKind::io, "cannot read " + path);
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(f), {});
}

void write_bytes(const std::string& path, const std::vector<std::uint8_t>& bytes) {
  std::ofstream f(path, std::ios::binary);
  require(static_cast<bool>(f), ErrorKind::io, "cannot write " + path);
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  f.flush();
  require(static_cast<bool>(f), ErrorKind::io, "failed writing " + path);
}

json report_json(const TrainReport& r) {
  json epochs = json::array();
  for (const auto& e : r.epochs) epochs.push_back({e.epoch, e.lr, e.train_loss, e.val_acc});
  return {{"epochs", epochs},
          {"initial_train_loss", r.initial_train_loss},
          {"final_train_loss", r.final_train_loss},
          {"test_accuracy", r.test_accuracy},
          {"wall_seconds", r.wall_seconds},
          {"seed", r.seed},
          {"effective_epochs", r.effective_epochs},
          {"flops", r.flops}};
}

TrainReport report_from(const json& j) {
  TrainReport r;
  for (const auto& e : j.at("epochs")) {
    r.epochs.push_back({e.at(0).get<int>(), e.at(1).get<double>(), e.at(2).get<double>(),
                        e.at(3).get<double>()});
  }
  r.initial_train_loss = j.at("initial_train_loss");
  r.final_train_loss = j.at("final_train_loss");
  r.test_accuracy = j.at("test_accuracy");
  r.wall_seconds = j.at("wall_seconds");
  r.seed = j.at("seed");
  r.effective_epochs = j.at("effective_epochs");
  r.flops = j.at("flops");
  return r;
}

json search_json(const SearchResult& s) {
  json trace = json::array();
  for (const auto& t : s.trace) trace.push_back({t.iteration, t.tau, t.flops, t.rel_gap});
  return {{"tau_star", s.tau_star},     {"kept_indices", s.config.kept_indices},
          {"achieved_flops", s.achieved_flops}, {"iterations", s.iterations},
          {"converged", s.converged},   {"trace", trace},
          {"diagnostics", s.diagnostics}};
}

SearchResult search_from(const json& j) {
  SearchResult s;
  s.tau_star = j.at("tau_star");
  s.config.kept_indices = j.at("kept_indices").get<std::vector<std::vector<int>>>();
  s.achieved_flops = j.at("achieved_flops");
  s.iterations = j.at("iterations");
  s.converged = j.at("converged");
  for (const auto& t : j.at("trace")) {
    s.trace.push_back({t.at(0).get<int>(), t.at(1).get<double>(), t.at(2).get<std::int64_t>(),
                       t.at(3).get<double>()});
  }
  s.diagnostics = j.at("diagnostics");
  return s;
}

}  // namespace

void seal(RunRecord& record) {
  require(!record.sealed, ErrorKind::contract, "record is already sealed");
  for (const auto& f : record.files) {
    require(std::filesystem::exists(f), ErrorKind::io, "referenced file " + f + " does not exist");
  }
  record.sealed = true;
}

std::vector<std::uint8_t> encode_run(const RunRecord& r) {
  require(r.sealed, ErrorKind::precondition, "only sealed records can be saved");
  BlobWriter blobs;
  json traj = json::array();
  for (const auto& s : r.trajectory) {
    std::vector<float> flat;
    Shape widths;
    for (const auto& l : s.gates.lambda) {
      flat.insert(flat.end(), l.begin(), l.end());
      widths.push_back(static_cast<int>(l.size()));
    }
    traj.push_back({{"epoch", s.epoch},
                    {"step", s.gates.step},
                    {"sparsity", s.sparsity()},
                    {"val_accuracy", s.val_accuracy},
                    {"widths", widths},
                    {"gates", blobs.add(flat, {static_cast<int>(flat.size())})}});
  }
  json reports = json::array();
  for (const auto& rep : r.reports) reports.push_back(report_json(rep));
  json meta{{"tool_version", r.tool_version},
            {"config_hash", r.config_hash},
            {"config", r.config_json},
            {"seeds", r.seeds},
            {"arch_name", r.arch_name},
            {"gated_layer_ids", r.gated_layer_ids},
            {"original_widths", r.original_widths},
            {"full_flops", r.full_flops},
            {"trajectory", traj},
            {"selected_snapshot", r.selected_snapshot ? json(*r.selected_snapshot) : json()},
            {"search", r.search ? search_json(*r.search) : json()},
            {"reports", reports},
            {"files", r.files},
            {"failed_stage", r.failed_stage},
            {"failure_message", r.failure_message}};
  return frame(kRunMagic, kRunRecordVersion, meta, blobs);
}

RunRecord decode_run(const std::vector<std::uint8_t>& bytes, const std::string& name) {
  const Unframed u = unframe(bytes, kRunMagic, kRunRecordVersion, name);
  const BlobReader blobs(bytes.data() + u.blob_start, bytes.size() - u.blob_start, name);
  RunRecord r;
  try {
    const json& m = u.meta;
    r.tool_version = m.at("tool_version");
    r.config_hash = m.at("config_hash");
    r.config_json = m.at("config");
    r.seeds = m.at("seeds").get<std::vector<std::uint64_t>>();
    r.arch_name = m.at("arch_name");
    r.gated_layer_ids = m.at("gated_layer_ids").get<std::vector<int>>();
    r.original_widths = m.at("original_widths").get<std::vector<int>>();
    r.full_flops = m.at("full_flops");
    for (const auto& t : m.at("trajectory")) {
      GateSnapshot s;
      s.epoch = t.at("epoch");
      s.gates.step = t.at("step");
      s.val_accuracy = t.at("val_accuracy");
      const auto flat = blobs.read(t.at("gates"));
      std::size_t pos = 0;
      for (int w : t.at("widths").get<std::vector<int>>()) {
        require(pos + static_cast<std::size_t>(w) <= flat.size(), ErrorKind::format,
                name + ": gate widths exceed the stored vector");
        s.gates.lambda.emplace_back(flat.begin() + static_cast<std::ptrdiff_t>(pos),
                                    flat.begin() + static_cast<std::ptrdiff_t>(pos + w));
        pos += static_cast<std::size_t>(w);
      }
      r.trajectory.push_back(std::move(s));
    }
    if (!m.at("selected_snapshot").is_null()) r.selected_snapshot = m.at("selected_snapshot").get<std::size_t>();
    if (!m.at("search").is_null()) r.search = search_from(m.at("search"));
    for (const auto& rep : m.at("reports")) r.reports.push_back(report_from(rep));
    r.files = m.at("files").get<std::vector<std::string>>();
    r.failed_stage = m.at("failed_stage");
    r.failure_message = m.at("failure_message");
  } catch (const json::exception& e) {
    fail(ErrorKind::format, name + ": " + e.what());
  }
  r.sealed = true;
  return r;
}

void save_run(const RunRecord& record, const std::string& path) {
  write_bytes(path, encode_run(record));
}

RunRecord load_run(const std::string& path) { return decode_run(read_bytes(path), path); }

std::vector<std::uint8_t> encode_checkpoint(const Network& net) {
  BlobWriter blobs;
  json layers = json::array();
  for (const auto& p : net.layers()) {
    json l = json::object();
    auto put = [&](const char* key, const Tensor& t) {
      if (!t.empty()) l[key] = blobs.add(t.data(), t.shape());
    };
    put("weight", p.weight);
    put("bias", p.bias);
    put("gamma", p.gamma);
    put("beta", p.beta);
    put("running_mean", p.stats.mean);
    put("running_var", p.stats.var);
    layers.push_back(l);
  }
  json meta{{"arch", json::parse(arch_to_json(net.arch()))},
            {"kept_indices", net.config().kept_indices},
            {"layers", layers}};
  return frame(kCheckpointMagic, kCheckpointVersion, meta, blobs);
}

Network decode_checkpoint(const std::vector<std::uint8_t>& bytes, const std::string& name) {
  const Unframed u = unframe(bytes, kCheckpointMagic, kCheckpointVersion, name);
  const BlobReader blobs(bytes.data() + u.blob_start, bytes.size() - u.blob_start, name);
  try {
    ChannelConfig config;
    config.kept_indices = u.meta.at("kept_indices").get<std::vector<std::vector<int>>>();
    Network net(arch_from_json(u.meta.at("arch").dump()), config);
    const auto& layers = u.meta.at("layers");
    require(layers.size() == net.layers().size(), ErrorKind::format,
            name + ": layer count does not match the architecture");
    for (std::size_t i = 0; i < layers.size(); ++i) {
      auto& p = net.layers()[i];
      auto get = [&](const char* key, Tensor& t) {
        if (t.empty()) return;
        Shape shape;
        auto values = blobs.read(layers[i].at(key), &shape);
        require(shape == t.shape(), ErrorKind::format,
                name + ": layer " + std::to_string(i) + " " + key + " has shape " +
                    shape_string(shape) + ", expected " + shape_string(t.shape()));
        t = Tensor(shape, std::move(values));
      };
      get("weight", p.weight);
      get("bias", p.bias);
      get("gamma", p.gamma);
      get("beta", p.beta);
      get("running_mean", p.stats.mean);
      get("running_var", p.stats.var);
    }
    return net;
  } catch (const json::exception& e) {
    fail(ErrorKind::format, name + ": " + e.what());
  }
}

void save_checkpoint(const Network& net, const std::string& path) {
  write_bytes(path, encode_checkpoint(net));
}

Network load_checkpoint(const std::string& path) {
  return decode_checkpoint(read_bytes(path), path);
}

std::string content_hash(const std::string& text) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : text) {
    h ^= c;
    h *= 1099511628211ull;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

}  // namespace sprune
