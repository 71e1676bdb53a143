#include "pcd/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <set>
#include <stdexcept>

namespace pcd {

namespace {

constexpr char kMagic[4] = {'P', 'C', 'D', '1'};
constexpr uint32_t kVersion = 1;

void put_u16(std::string& out, uint16_t v) {
  out.push_back(static_cast<char>(v & 0xff));
  out.push_back(static_cast<char>((v >> 8) & 0xff));
}
void put_u32(std::string& out, uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
void put_u64(std::string& out, uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
void put_f32(std::string& out, float f) {
  put_u32(out, std::bit_cast<uint32_t>(f));
}

struct Reader {
  const std::string& buf;
  size_t pos = 0;

  void need(size_t n) const {
    if (pos + n > buf.size()) throw std::runtime_error("truncated checkpoint file");
  }
  uint8_t u8() {
    need(1);
    return static_cast<uint8_t>(buf[pos++]);
  }
  uint16_t u16() {
    need(2);
    uint16_t v = static_cast<uint16_t>(static_cast<uint8_t>(buf[pos])) |
                 static_cast<uint16_t>(static_cast<uint8_t>(buf[pos + 1])) << 8;
    pos += 2;
    return v;
  }
  uint32_t u32() {
    need(4);
    uint32_t v = 0;
    for (int i = 0; i < 4; ++i)
      v |= static_cast<uint32_t>(static_cast<uint8_t>(buf[pos + static_cast<size_t>(i)])) << (8 * i);
    pos += 4;
    return v;
  }
  uint64_t u64() {
    need(8);
    uint64_t v = 0;
    for (int i = 0; i < 8; ++i)
      v |= static_cast<uint64_t>(static_cast<uint8_t>(buf[pos + static_cast<size_t>(i)])) << (8 * i);
    pos += 8;
    return v;
  }
  std::string bytes(size_t n) {
    need(n);
    std::string s = buf.substr(pos, n);
    pos += n;
    return s;
  }
};

}  // namespace

bool Checkpoint::has(const std::string& path) const {
  for (const auto& e : entries)
    if (e.path == path) return true;
  return false;
}

const CheckpointEntry& Checkpoint::at(const std::string& path) const {
  for (const auto& e : entries)
    if (e.path == path) return e;
  throw std::runtime_error("checkpoint: missing tensor '" + path + "'");
}

void Checkpoint::add(const std::string& path, const Tensor& t) {
  if (has(path)) throw std::runtime_error("checkpoint: duplicate tensor path '" + path + "'");
  entries.push_back({path, t.shape(), {t.data().begin(), t.data().end()}});
}

Tensor Checkpoint::tensor(const std::string& path, bool requires_grad) const {
  const CheckpointEntry& e = at(path);
  return Tensor::from_data(e.shape, e.data, requires_grad);
}

void save_checkpoint(const Checkpoint& c, const std::string& file) {
  std::set<std::string> seen;
  for (const auto& e : c.entries)
    if (!seen.insert(e.path).second)
      throw std::runtime_error("checkpoint: duplicate tensor path '" + e.path + "'");

  std::string out;
  out.append(kMagic, 4);
  put_u32(out, kVersion);
  std::string meta = c.metadata.dump();
  put_u32(out, static_cast<uint32_t>(meta.size()));
  out += meta;
  put_u32(out, static_cast<uint32_t>(c.entries.size()));
  for (const auto& e : c.entries) {
    if (e.path.size() > 0xffff)
      throw std::runtime_error("checkpoint: tensor path too long");
    put_u16(out, static_cast<uint16_t>(e.path.size()));
    out += e.path;
    out.push_back(0);  // dtype f32
    out.push_back(static_cast<char>(e.shape.size()));
    for (int64_t d : e.shape) put_u64(out, static_cast<uint64_t>(d));
    if (numel_of(e.shape) != static_cast<int64_t>(e.data.size()))
      throw std::runtime_error("checkpoint: entry '" + e.path + "' shape/data mismatch");
    for (float f : e.data) put_f32(out, f);
  }

  std::ofstream f(file, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("checkpoint: cannot open '" + file + "' for writing");
  f.write(out.data(), static_cast<std::streamsize>(out.size()));
  if (!f) throw std::runtime_error("checkpoint: write failed for '" + file + "'");
}

Checkpoint load_checkpoint(const std::string& file) {
  std::ifstream f(file, std::ios::binary);
  if (!f) throw std::runtime_error("checkpoint: cannot open '" + file + "'");
  std::string buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());

  Reader r{buf};
  std::string magic = r.bytes(4);
  if (std::memcmp(magic.data(), kMagic, 4) != 0)
    throw std::runtime_error("checkpoint: bad magic in '" + file + "'");
  uint32_t version = r.u32();
  if (version != kVersion)
    throw std::runtime_error("checkpoint: unsupported version " + std::to_string(version));

  Checkpoint c;
  uint32_t meta_len = r.u32();
  std::string meta = r.bytes(meta_len);
  try {
    c.metadata = nlohmann::json::parse(meta);
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error(std::string("checkpoint: corrupt metadata JSON: ") + e.what());
  }

  uint32_t count = r.u32();
  std::set<std::string> seen;
  for (uint32_t i = 0; i < count; ++i) {
    CheckpointEntry e;
    uint16_t plen = r.u16();
    e.path = r.bytes(plen);
    if (!seen.insert(e.path).second)
      throw std::runtime_error("checkpoint: duplicate tensor path '" + e.path + "'");
    uint8_t dtype = r.u8();
    if (dtype != 0)
      throw std::runtime_error("checkpoint: unsupported dtype code " + std::to_string(dtype));
    uint8_t ndim = r.u8();
    e.shape.resize(ndim);
    for (uint8_t d = 0; d < ndim; ++d) e.shape[d] = static_cast<int64_t>(r.u64());
    int64_t n = numel_of(e.shape);
    if (n < 1 || ndim == 0)
      throw std::runtime_error("checkpoint: invalid shape for '" + e.path + "'");
    e.data.resize(static_cast<size_t>(n));
    r.need(static_cast<size_t>(n) * 4);
    for (int64_t k = 0; k < n; ++k) {
      uint32_t bits = r.u32();
      e.data[static_cast<size_t>(k)] = std::bit_cast<float>(bits);
    }
    c.entries.push_back(std::move(e));
  }
  if (r.pos != buf.size())
    throw std::runtime_error("checkpoint: trailing bytes in '" + file + "'");
  return c;
}

uint64_t checkpoint_hash(const Checkpoint& c) {
  uint64_t h = 0xcbf29ce484222325ull;
  for (const auto& e : c.entries) {
    h = fnv1a64(e.path.data(), e.path.size(), h);
    for (int64_t d : e.shape) h = fnv1a64(&d, sizeof(d), h);
    h = fnv1a64(e.data.data(), e.data.size() * sizeof(float), h);
  }
  return h;
}

}  // namespace pcd
