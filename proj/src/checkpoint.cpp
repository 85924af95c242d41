#include <cstring>
#include <fstream>
#include <iterator>
#include <limits>

#include "sxda/network.hpp"

namespace sxda {
namespace {

constexpr char kMagic[4] = {'S', 'X', 'D', 'A'};

class Writer {
 public:
  void bytes(const void* p, std::size_t n) {
    const auto* c = static_cast<const unsigned char*>(p);
    buf_.insert(buf_.end(), c, c + n);
  }
  void u32(std::uint64_t v) {
    if (v > std::numeric_limits<std::uint32_t>::max())
      throw ConfigError("checkpoint field " + std::to_string(v) + " exceeds 32 bits");
    for (int i = 0; i < 4; ++i) buf_.push_back(static_cast<unsigned char>(v >> (8 * i)));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) buf_.push_back(static_cast<unsigned char>(v >> (8 * i)));
  }
  void f32(float f) {
    std::uint32_t bits;
    std::memcpy(&bits, &f, 4);
    u32(bits);
  }
  const std::vector<unsigned char>& data() const { return buf_; }

 private:
  std::vector<unsigned char> buf_;
};

class Reader {
 public:
  Reader(std::vector<unsigned char> data, std::string source)
      : data_(std::move(data)), source_(std::move(source)) {}

  void need(std::size_t n, const char* what) const {
    if (data_.size() - pos_ < n)
      throw TruncatedError(source_ + ": truncated while reading " + what + " at byte " +
                           std::to_string(pos_));
  }
  std::uint32_t u32(const char* what) {
    need(4, what);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= std::uint32_t(data_[pos_ + i]) << (8 * i);
    pos_ += 4;
    return v;
  }
  std::uint64_t u64(const char* what) {
    need(8, what);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= std::uint64_t(data_[pos_ + i]) << (8 * i);
    pos_ += 8;
    return v;
  }
  float f32(const char* what) {
    const std::uint32_t bits = u32(what);
    float f;
    std::memcpy(&f, &bits, 4);
    return f;
  }
  std::string str(std::size_t n, const char* what) {
    need(n, what);
    std::string s(reinterpret_cast<const char*>(data_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  std::size_t remaining() const { return data_.size() - pos_; }
  const std::string& source() const { return source_; }

 private:
  std::vector<unsigned char> data_;
  std::string source_;
  std::size_t pos_ = 0;
};

}  // namespace

void save_checkpoint(const ModelParams<float>& params, const std::filesystem::path& path) {
  const ModelConfig& cfg = params.config;
  cfg.validate();
  if (params.tensors.size() != params.layout.specs.size())
    throw ContractError("save_checkpoint: tensor count does not match layout");
  Writer w;
  w.bytes(kMagic, 4);
  w.u32(kCheckpointVersion);
  w.u32(cfg.stages);
  w.u32(cfg.base_channels);
  w.u32(cfg.block);
  w.u32(cfg.dilation);
  w.u32(static_cast<std::uint32_t>(cfg.variant));
  w.u32(cfg.image_channels);
  w.u32(cfg.heads.size());
  for (std::size_t h : cfg.heads) w.u32(h);
  w.u32(params.tensors.size());
  for (std::size_t i = 0; i < params.tensors.size(); ++i) {
    const Tensor<float>& t = params.tensors[i];
    const std::string& name = params.name(i);
    w.u32(name.size());
    w.bytes(name.data(), name.size());
    w.u32(t.rank());
    for (std::size_t d : t.dims()) w.u64(d);
    for (float v : t.values()) w.f32(v);
  }

  // Write beside the target and rename so readers never see a partial file.
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot open " + tmp.string() + " for writing");
    out.write(reinterpret_cast<const char*>(w.data().data()),
              static_cast<std::streamsize>(w.data().size()));
    if (!out) throw DataError("failed writing " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

ModelParams<float> load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open checkpoint " + path.string());
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)),
                                   std::istreambuf_iterator<char>());
  Reader r(std::move(bytes), path.string());

  if (r.remaining() < 4 || r.str(4, "magic") != std::string(kMagic, 4))
    throw BadMagicError(path.string() + ": not a checkpoint (bad magic)");
  const std::uint32_t version = r.u32("version");
  if (version != kCheckpointVersion)
    throw VersionMismatchError(path.string() + ": checkpoint version " + std::to_string(version) +
                               ", this build reads version " +
                               std::to_string(kCheckpointVersion));

  ModelConfig cfg;
  cfg.stages = r.u32("config");
  cfg.base_channels = r.u32("config");
  cfg.block = r.u32("config");
  cfg.dilation = r.u32("config");
  const std::uint32_t variant = r.u32("config");
  if (variant > static_cast<std::uint32_t>(Variant::full))
    throw DataError(path.string() + ": unknown variant code " + std::to_string(variant));
  cfg.variant = static_cast<Variant>(variant);
  cfg.image_channels = r.u32("config");
  const std::uint32_t nheads = r.u32("config");
  if (nheads > 64) throw DataError(path.string() + ": implausible head list length");
  cfg.heads.clear();
  for (std::uint32_t i = 0; i < nheads; ++i) cfg.heads.push_back(r.u32("head counts"));
  try {
    cfg.validate();
  } catch (const ConfigError& e) {
    throw DataError(path.string() + ": stored configuration is invalid: " + e.what());
  }

  ModelParams<float> p{cfg, ModelLayout::build(cfg), {}};
  const std::uint32_t count = r.u32("record count");
  if (count != p.layout.specs.size())
    throw DataError(path.string() + ": " + std::to_string(count) + " records, expected " +
                    std::to_string(p.layout.specs.size()));
  p.tensors.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    const ParamSpec& spec = p.layout.specs[i];
    const std::uint32_t len = r.u32("record name length");
    const std::string name = r.str(len, "record name");
    if (name != spec.name)
      throw DataError(path.string() + ": record " + std::to_string(i) + " is '" + name +
                      "', expected '" + spec.name + "'");
    const std::uint32_t rank = r.u32("record rank");
    if (rank > 8) throw DataError(path.string() + ": record '" + name + "' has rank " +
                                  std::to_string(rank));
    Shape dims;
    std::uint64_t count_values = 1;
    for (std::uint32_t k = 0; k < rank; ++k) {
      const std::uint64_t d = r.u64("record dims");
      if (d != 0 && count_values > std::numeric_limits<std::uint64_t>::max() / 4 / d)
        throw OverflowError(path.string() + ": record '" + name + "' extents overflow");
      count_values *= d;
      dims.push_back(static_cast<std::size_t>(d));
    }
    if (dims != spec.dims)
      throw DataError(path.string() + ": record '" + name + "' has shape " + shape_str(dims) +
                      ", expected " + shape_str(spec.dims));
    r.need(count_values * 4, "record values");
    std::vector<float> values(count_values);
    for (auto& v : values) v = r.f32("record values");
    try {
      p.tensors.emplace_back(dims, std::move(values));
    } catch (const NumericError&) {
      throw DataError(path.string() + ": record '" + name + "' holds non-finite values");
    }
  }
  if (r.remaining() != 0)
    throw DataError(path.string() + ": " + std::to_string(r.remaining()) +
                    " trailing bytes after the last record");
  return p;
}

}  // namespace sxda
