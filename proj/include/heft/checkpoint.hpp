#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <set>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

#include "heft/tensor.hpp"

namespace heft {

// Binary container: magic "HEFT", a u32 format version, an embedded JSON
// config record, then a named tensor table of row-major 64-bit floats.
// Everything is little-endian; doubles travel as raw bit patterns, so a
// round trip is bit-exact.
inline constexpr char kCheckpointMagic[4] = {'H', 'E', 'F', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  nlohmann::json config;
  std::vector<std::pair<std::string, Tensor>> tensors;

  bool has(const std::string& name) const {
    for (const auto& [n, t] : tensors) {
      if (n == name) return true;
    }
    return false;
  }

  const Tensor& get(const std::string& name) const {
    for (const auto& [n, t] : tensors) {
      if (n == name) return t;
    }
    throw std::out_of_range("checkpoint: no tensor named " + name);
  }
};

namespace detail {

inline void write_bytes(std::ostream& out, const void* data, std::size_t n) {
  out.write(static_cast<const char*>(data), static_cast<std::streamsize>(n));
}

inline void write_u32(std::ostream& out, std::uint32_t v) {
  unsigned char buf[4];
  for (int i = 0; i < 4; ++i) buf[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xFF);
  write_bytes(out, buf, 4);
}

inline void write_u64(std::ostream& out, std::uint64_t v) {
  unsigned char buf[8];
  for (int i = 0; i < 8; ++i) buf[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xFF);
  write_bytes(out, buf, 8);
}

inline void write_f64(std::ostream& out, double v) {
  std::uint64_t bits;
  std::memcpy(&bits, &v, sizeof(bits));
  write_u64(out, bits);
}

inline void read_bytes(std::istream& in, void* data, std::size_t n, const char* what) {
  in.read(static_cast<char*>(data), static_cast<std::streamsize>(n));
  if (static_cast<std::size_t>(in.gcount()) != n) {
    throw std::runtime_error(std::string("checkpoint: truncated while reading ") + what);
  }
}

inline std::uint32_t read_u32(std::istream& in, const char* what) {
  unsigned char buf[4];
  read_bytes(in, buf, 4, what);
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(buf[i]) << (8 * i);
  return v;
}

inline std::uint64_t read_u64(std::istream& in, const char* what) {
  unsigned char buf[8];
  read_bytes(in, buf, 8, what);
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(buf[i]) << (8 * i);
  return v;
}

inline double read_f64(std::istream& in, const char* what) {
  const std::uint64_t bits = read_u64(in, what);
  double v;
  std::memcpy(&v, &bits, sizeof(v));
  return v;
}

}  // namespace detail

inline void save_checkpoint(const std::string& path, const nlohmann::json& config,
                            const std::vector<std::pair<std::string, Tensor>>& tensors) {
  {
    std::set<std::string> names;
    for (const auto& [name, tensor] : tensors) {
      if (!names.insert(name).second) {
        throw std::invalid_argument("checkpoint: duplicate tensor name " + name);
      }
    }
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("checkpoint: cannot write " + path);
  detail::write_bytes(out, kCheckpointMagic, 4);
  detail::write_u32(out, kCheckpointVersion);
  const std::string cfg = config.dump();
  detail::write_u64(out, cfg.size());
  detail::write_bytes(out, cfg.data(), cfg.size());
  detail::write_u64(out, tensors.size());
  for (const auto& [name, tensor] : tensors) {
    detail::write_u64(out, name.size());
    detail::write_bytes(out, name.data(), name.size());
    detail::write_u32(out, static_cast<std::uint32_t>(tensor.rank()));
    for (std::size_t d : tensor.shape()) detail::write_u64(out, d);
    for (std::size_t i = 0; i < tensor.size(); ++i) detail::write_f64(out, tensor.data()[i]);
  }
  if (!out) throw std::runtime_error("checkpoint: write failed for " + path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("checkpoint: cannot open " + path);
  char magic[4];
  detail::read_bytes(in, magic, 4, "magic");
  if (std::memcmp(magic, kCheckpointMagic, 4) != 0) {
    throw std::runtime_error("checkpoint: bad magic in " + path);
  }
  const std::uint32_t version = detail::read_u32(in, "version");
  if (version != kCheckpointVersion) {
    throw std::runtime_error("checkpoint: unsupported format version " + std::to_string(version));
  }
  const std::uint64_t cfg_len = detail::read_u64(in, "config length");
  std::string cfg(cfg_len, '\0');
  detail::read_bytes(in, cfg.data(), cfg_len, "config");

  Checkpoint ckpt;
  try {
    ckpt.config = nlohmann::json::parse(cfg);
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error(std::string("checkpoint: invalid config record: ") + e.what());
  }

  const std::uint64_t count = detail::read_u64(in, "tensor count");
  std::set<std::string> names;
  for (std::uint64_t t = 0; t < count; ++t) {
    const std::uint64_t name_len = detail::read_u64(in, "tensor name length");
    std::string name(name_len, '\0');
    detail::read_bytes(in, name.data(), name_len, "tensor name");
    if (!names.insert(name).second) {
      throw std::runtime_error("checkpoint: duplicate tensor name " + name);
    }
    const std::uint32_t rank = detail::read_u32(in, "tensor rank");
    Shape shape;
    std::size_t numel = 1;
    for (std::uint32_t d = 0; d < rank; ++d) {
      const std::uint64_t dim = detail::read_u64(in, "tensor dims");
      if (dim == 0) throw std::runtime_error("checkpoint: zero dimension in " + name);
      shape.push_back(dim);
      numel *= dim;
    }
    std::vector<double> values(numel);
    for (std::size_t i = 0; i < numel; ++i) values[i] = detail::read_f64(in, "tensor data");
    ckpt.tensors.emplace_back(std::move(name), Tensor(std::move(shape), std::move(values)));
  }
  return ckpt;
}

}  // namespace heft
