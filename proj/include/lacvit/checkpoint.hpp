#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "lacvit/encoder.hpp"
#include "lacvit/error.hpp"
#include "lacvit/losses.hpp"

namespace lacvit {

// Encoder plus whichever heads the producing stage left attached.
struct Model {
  ViTEncoder encoder;
  std::optional<ProjectionHead> projection;
  std::optional<LinearHead> classifier;
  std::map<std::string, std::string> metadata;

  std::vector<Parameter*> parameters() { return collect<Parameter>(*this); }
  std::vector<const Parameter*> parameters() const { return collect<const Parameter>(*this); }

  std::string meta(const std::string& key, const std::string& fallback = "") const {
    auto it = metadata.find(key);
    return it == metadata.end() ? fallback : it->second;
  }

 private:
  template <typename P, typename Self>
  static std::vector<P*> collect(Self& self) {
    std::vector<P*> out;
    for (auto& p : self.encoder.params()) out.push_back(&p);
    if (self.projection)
      for (auto& p : self.projection->params()) out.push_back(&p);
    if (self.classifier)
      for (auto& p : self.classifier->params()) out.push_back(&p);
    return out;
  }
};

inline void write_vit_metadata(const ViTConfig& c, std::map<std::string, std::string>& m) {
  m["vit.image_size"] = std::to_string(c.image_size);
  m["vit.patch_size"] = std::to_string(c.patch_size);
  m["vit.embed_dim"] = std::to_string(c.embed_dim);
  m["vit.depth"] = std::to_string(c.depth);
  m["vit.heads"] = std::to_string(c.heads);
  m["vit.mlp_ratio"] = std::to_string(c.mlp_ratio);
  m["vit.pooling"] = pooling_name(c.pooling);
}

inline ViTConfig read_vit_metadata(const std::map<std::string, std::string>& m) {
  auto get = [&](const char* k) -> std::size_t {
    auto it = m.find(k);
    if (it == m.end()) throw FormatError(std::string("checkpoint metadata lacks ") + k);
    try {
      return static_cast<std::size_t>(std::stoull(it->second));
    } catch (const std::exception&) {
      throw FormatError(std::string("checkpoint metadata ") + k + " is not an integer");
    }
  };
  ViTConfig c;
  c.image_size = get("vit.image_size");
  c.patch_size = get("vit.patch_size");
  c.embed_dim = get("vit.embed_dim");
  c.depth = get("vit.depth");
  c.heads = get("vit.heads");
  c.mlp_ratio = get("vit.mlp_ratio");
  auto it = m.find("vit.pooling");
  c.pooling = (it != m.end() && it->second == "cls") ? Pooling::kCls : Pooling::kMean;
  return c;
}

// ---------------------------------------------------------------------------
// Binary layout (little-endian):
//   "LCVT" | u32 version = 1 | u32 tensor count
//   per tensor: u32 name length | name bytes | u32 rank | u32 dims[rank] | f32 payload
//   u32 metadata length | metadata text ("key=value\n" lines, sorted by key)

inline constexpr char kCheckpointMagic[4] = {'L', 'C', 'V', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

inline void put_u32(std::string& out, std::uint32_t v) {
  char b[4];
  std::memcpy(b, &v, 4);
  out.append(b, 4);
}

class ByteReader {
 public:
  explicit ByteReader(const std::vector<std::uint8_t>& bytes) : bytes_(bytes) {}

  std::size_t offset() const { return off_; }
  bool at_end() const { return off_ == bytes_.size(); }

  void need(std::size_t n, const char* what) const {
    if (bytes_.size() - off_ < n)
      throw FormatError("checkpoint truncated at byte offset " + std::to_string(off_) + " while reading " + what);
  }
  std::uint32_t u32(const char* what) {
    need(4, what);
    std::uint32_t v;
    std::memcpy(&v, bytes_.data() + off_, 4);
    off_ += 4;
    return v;
  }
  std::string str(std::size_t n, const char* what) {
    need(n, what);
    std::string s(reinterpret_cast<const char*>(bytes_.data() + off_), n);
    off_ += n;
    return s;
  }
  float f32(const char* what) {
    need(4, what);
    float v;
    std::memcpy(&v, bytes_.data() + off_, 4);
    off_ += 4;
    return v;
  }

 private:
  const std::vector<std::uint8_t>& bytes_;
  std::size_t off_ = 0;
};

}  // namespace detail

inline std::string encode_metadata(const std::map<std::string, std::string>& meta) {
  std::string text;
  for (const auto& [k, v] : meta) {
    if (k.find_first_of("=\n") != std::string::npos || v.find('\n') != std::string::npos)
      throw ContractError("checkpoint metadata key/value contains a reserved character: " + k);
    text += k + "=" + v + "\n";
  }
  return text;
}

inline std::string encode_checkpoint(const Model& model) {
  std::string out(kCheckpointMagic, 4);
  detail::put_u32(out, kCheckpointVersion);
  const auto params = model.parameters();
  detail::put_u32(out, static_cast<std::uint32_t>(params.size()));
  for (const Parameter* p : params) {
    detail::put_u32(out, static_cast<std::uint32_t>(p->name.size()));
    out += p->name;
    detail::put_u32(out, static_cast<std::uint32_t>(p->value.rank()));
    for (std::size_t d : p->value.shape()) detail::put_u32(out, static_cast<std::uint32_t>(d));
    for (double v : p->value.data()) {
      const float f = static_cast<float>(v);
      char b[4];
      std::memcpy(b, &f, 4);
      out.append(b, 4);
    }
  }
  const std::string meta = encode_metadata(model.metadata);
  detail::put_u32(out, static_cast<std::uint32_t>(meta.size()));
  out += meta;
  return out;
}

// Writes to a sibling temp file, then renames over the target.
inline void save_checkpoint(const Model& model, const std::filesystem::path& path) {
  const std::string bytes = encode_checkpoint(model);
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw FormatError("cannot write checkpoint " + tmp.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw FormatError("short write to " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

struct RawCheckpoint {
  std::vector<std::pair<std::string, Tensor>> tensors;
  std::map<std::string, std::string> metadata;
};

inline RawCheckpoint parse_checkpoint(const std::vector<std::uint8_t>& bytes) {
  detail::ByteReader r(bytes);
  if (r.str(4, "magic") != std::string(kCheckpointMagic, 4)) throw FormatError("checkpoint: bad magic at byte offset 0");
  const std::uint32_t version = r.u32("version");
  if (version != kCheckpointVersion)
    throw FormatError("checkpoint: unsupported version " + std::to_string(version) + " at byte offset 4");
  const std::uint32_t count = r.u32("tensor count");
  RawCheckpoint raw;
  for (std::uint32_t t = 0; t < count; ++t) {
    const std::uint32_t name_len = r.u32("name length");
    std::string name = r.str(name_len, "tensor name");
    const std::size_t rank_off = r.offset();
    const std::uint32_t rank = r.u32("rank");
    if (rank == 0 || rank > 4)
      throw FormatError("checkpoint: tensor '" + name + "' has rank " + std::to_string(rank) + " at byte offset " +
                        std::to_string(rank_off));
    Shape shape;
    for (std::uint32_t i = 0; i < rank; ++i) {
      const std::uint32_t d = r.u32("dimension");
      if (d == 0) throw FormatError("checkpoint: zero dimension in '" + name + "'");
      shape.push_back(d);
    }
    const std::size_t n = shape_numel(shape);
    r.need(n * 4, "tensor payload");
    std::vector<double> data(n);
    for (std::size_t i = 0; i < n; ++i) data[i] = static_cast<double>(r.f32("tensor payload"));
    raw.tensors.emplace_back(std::move(name), Tensor(std::move(shape), std::move(data)));
  }
  const std::uint32_t meta_len = r.u32("metadata length");
  std::istringstream meta(r.str(meta_len, "metadata"));
  if (!r.at_end()) throw FormatError("checkpoint: trailing bytes at offset " + std::to_string(r.offset()));
  std::string line;
  while (std::getline(meta, line)) {
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw FormatError("checkpoint: malformed metadata line '" + line + "'");
    raw.metadata[line.substr(0, eq)] = line.substr(eq + 1);
  }
  return raw;
}

// Rebuilds the model described by a parsed checkpoint. Names must match the
// model namespace exactly; nothing is returned on any mismatch.
inline Model model_from_raw(const RawCheckpoint& raw) {
  std::map<std::string, const Tensor*> by_name;
  for (const auto& [name, t] : raw.tensors)
    if (!by_name.emplace(name, &t).second) throw FormatError("checkpoint: duplicate tensor '" + name + "'");
  Model m;
  m.metadata = raw.metadata;
  m.encoder = ViTEncoder(read_vit_metadata(raw.metadata));
  auto shape_of = [&](const char* n) -> const Tensor* {
    auto it = by_name.find(n);
    return it == by_name.end() ? nullptr : it->second;
  };
  if (const Tensor* w1 = shape_of("projection.w1")) {
    const Tensor* w2 = shape_of("projection.w2");
    if (!w2 || w1->rank() != 2 || w2->rank() != 2) throw FormatError("checkpoint: incomplete projection head");
    m.projection = ProjectionHead(w1->dim(0), w1->dim(1), w2->dim(1));
  }
  if (const Tensor* w = shape_of("classifier.weight")) {
    if (w->rank() != 2) throw FormatError("checkpoint: classifier weight must be a matrix");
    m.classifier = LinearHead(w->dim(1), w->dim(0));
  }
  auto params = m.parameters();
  if (params.size() != raw.tensors.size())
    throw FormatError("checkpoint: holds " + std::to_string(raw.tensors.size()) + " tensors, model expects " +
                      std::to_string(params.size()));
  for (Parameter* p : params) {
    auto it = by_name.find(p->name);
    if (it == by_name.end()) throw FormatError("checkpoint: missing tensor '" + p->name + "'");
    if (!it->second->same_shape(p->value))
      throw FormatError("checkpoint: tensor '" + p->name + "' has shape " + shape_str(it->second->shape()) +
                        ", expected " + shape_str(p->value.shape()));
    p->value = *it->second;
  }
  return m;
}

inline Model load_checkpoint(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw FormatError("checkpoint not found: " + path.string());
  try {
    return model_from_raw(parse_checkpoint(read_file_bytes(path)));
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

}  // namespace lacvit
