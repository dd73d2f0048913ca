#include "prunevc/checkpoint.hpp"

#include <cstdint>
#include <cstring>
#include <fstream>

#include "prunevc/errors.hpp"

namespace prunevc {

namespace {

void put_u32(std::ostream& out, std::uint32_t v) {
  out.write(reinterpret_cast<const char*>(&v), 4);
}
void put_u64(std::ostream& out, std::uint64_t v) {
  out.write(reinterpret_cast<const char*>(&v), 8);
}
void put_i64(std::ostream& out, std::int64_t v) {
  out.write(reinterpret_cast<const char*>(&v), 8);
}
void put_str(std::ostream& out, const std::string& s) {
  put_u32(out, static_cast<std::uint32_t>(s.size()));
  out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

std::uint32_t get_u32(std::istream& in, const std::string& path) {
  std::uint32_t v;
  in.read(reinterpret_cast<char*>(&v), 4);
  if (!in) throw IoError("checkpoint: truncated '" + path + "'");
  return v;
}
std::uint64_t get_u64(std::istream& in, const std::string& path) {
  std::uint64_t v;
  in.read(reinterpret_cast<char*>(&v), 8);
  if (!in) throw IoError("checkpoint: truncated '" + path + "'");
  return v;
}
std::int64_t get_i64(std::istream& in, const std::string& path) {
  std::int64_t v;
  in.read(reinterpret_cast<char*>(&v), 8);
  if (!in) throw IoError("checkpoint: truncated '" + path + "'");
  return v;
}
std::string get_str(std::istream& in, const std::string& path) {
  const std::uint32_t n = get_u32(in, path);
  if (n > (1u << 20))
    throw IoError("checkpoint: implausible string length in '" + path + "'");
  std::string s(n, '\0');
  in.read(s.data(), n);
  if (!in) throw IoError("checkpoint: truncated '" + path + "'");
  return s;
}

}  // namespace

void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("checkpoint: cannot create '" + path + "'");
  out.write("PVCK", 4);
  put_u32(out, 1);
  put_u64(out, ckpt.manifest.size());
  out.write(ckpt.manifest.data(),
            static_cast<std::streamsize>(ckpt.manifest.size()));
  put_u64(out, ckpt.arrays.size());
  for (const auto& [name, t] : ckpt.arrays) {
    put_str(out, name);
    put_u32(out, static_cast<std::uint32_t>(t.ndim()));
    for (auto d : t.shape) put_i64(out, d);
    out.write(reinterpret_cast<const char*>(t.data.data()),
              static_cast<std::streamsize>(t.numel() * sizeof(float)));
  }
  put_u64(out, ckpt.meta.size());
  for (const auto& [k, v] : ckpt.meta) {
    put_str(out, k);
    put_str(out, v);
  }
  if (!out) throw IoError("checkpoint: write failed for '" + path + "'");
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("checkpoint: cannot open '" + path + "'");
  char magic[4];
  in.read(magic, 4);
  if (!in || std::memcmp(magic, "PVCK", 4) != 0)
    throw IoError("checkpoint: '" + path + "' lacks the PVCK magic");
  const std::uint32_t version = get_u32(in, path);
  if (version != 1)
    throw IoError("checkpoint: unsupported version " +
                  std::to_string(version) + " in '" + path + "'");
  Checkpoint ckpt;
  const std::uint64_t mlen = get_u64(in, path);
  ckpt.manifest.resize(mlen);
  in.read(ckpt.manifest.data(), static_cast<std::streamsize>(mlen));
  if (!in) throw IoError("checkpoint: truncated '" + path + "'");

  const std::uint64_t narr = get_u64(in, path);
  for (std::uint64_t i = 0; i < narr; ++i) {
    const std::string name = get_str(in, path);
    const std::uint32_t ndim = get_u32(in, path);
    if (ndim > 8)
      throw IoError("checkpoint: implausible rank in '" + path + "'");
    Shape shape(ndim);
    for (auto& d : shape) d = get_i64(in, path);
    Tensor t(shape);
    in.read(reinterpret_cast<char*>(t.data.data()),
            static_cast<std::streamsize>(t.numel() * sizeof(float)));
    if (!in) throw IoError("checkpoint: truncated array '" + name + "' in '" +
                           path + "'");
    ckpt.arrays.emplace(name, std::move(t));
  }
  const std::uint64_t nmeta = get_u64(in, path);
  for (std::uint64_t i = 0; i < nmeta; ++i) {
    std::string k = get_str(in, path);
    std::string v = get_str(in, path);
    ckpt.meta.emplace(std::move(k), std::move(v));
  }
  return ckpt;
}

}  // namespace prunevc
