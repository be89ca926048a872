#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "stgaze/errors.hpp"
#include "stgaze/params.hpp"

namespace stgaze {

// Parameter checkpoint ("STGP"): magic, version u32, count u32, then per
// parameter: name length u16 + UTF-8 name, rank u8, dims u32 each, payload as
// little-endian IEEE-754 32-bit floats. Payloads are stored exactly as f32,
// so save(load(file)) is byte-identical for float models.
inline constexpr char kCheckpointMagic[4] = {'S', 'T', 'G', 'P'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

template <typename T>
void write_pod(std::ostream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::istream& is, std::size_t& offset, const char* what) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) throw FormatError(std::string("checkpoint: truncated while reading ") + what, offset);
  offset += sizeof(T);
  return v;
}

}  // namespace detail

template <typename S>
void save_checkpoint(const ParameterStore<S>& store, std::ostream& os) {
  os.write(kCheckpointMagic, 4);
  detail::write_pod(os, kCheckpointVersion);
  detail::write_pod(os, static_cast<std::uint32_t>(store.size()));
  for (const auto& p : store) {
    detail::write_pod(os, static_cast<std::uint16_t>(p->name.size()));
    os.write(p->name.data(), static_cast<std::streamsize>(p->name.size()));
    detail::write_pod(os, static_cast<std::uint8_t>(p->value.rank()));
    for (int d = 0; d < p->value.rank(); ++d) {
      detail::write_pod(os, static_cast<std::uint32_t>(p->value.dim(d)));
    }
    for (std::int64_t i = 0; i < p->value.numel(); ++i) {
      detail::write_pod(os, static_cast<float>(p->value[i]));
    }
  }
  if (!os) throw IoError("checkpoint: write failed");
}

template <typename S>
void save_checkpoint(const ParameterStore<S>& store, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("checkpoint: cannot open '" + path + "' for writing");
  save_checkpoint(store, os);
}

// Loads by name into an existing store; every file parameter must exist with
// a matching shape and every store parameter must be present in the file.
template <typename S>
void load_checkpoint(ParameterStore<S>& store, std::istream& is) {
  std::size_t offset = 0;
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, kCheckpointMagic, 4) != 0) {
    throw FormatError("checkpoint: bad magic", 0);
  }
  offset += 4;
  const auto version = detail::read_pod<std::uint32_t>(is, offset, "version");
  if (version != kCheckpointVersion) {
    throw FormatError("checkpoint: unsupported version " + std::to_string(version), 4);
  }
  const auto count = detail::read_pod<std::uint32_t>(is, offset, "count");
  if (static_cast<int>(count) != store.size()) {
    throw CheckpointMismatch("checkpoint: file has " + std::to_string(count) +
                                 " parameters, model has " + std::to_string(store.size()),
                             store.size() > 0 ? store.at(0).name : "");
  }
  std::vector<bool> seen(static_cast<std::size_t>(store.size()), false);
  for (std::uint32_t idx = 0; idx < count; ++idx) {
    const auto name_len = detail::read_pod<std::uint16_t>(is, offset, "name length");
    std::string name(name_len, '\0');
    is.read(name.data(), name_len);
    if (!is) throw FormatError("checkpoint: truncated name", offset);
    offset += name_len;
    const auto rank = detail::read_pod<std::uint8_t>(is, offset, "rank");
    Shape shape(rank);
    for (int d = 0; d < rank; ++d) {
      shape[static_cast<std::size_t>(d)] =
          static_cast<int>(detail::read_pod<std::uint32_t>(is, offset, "dimension"));
    }
    Parameter<S>* p = store.find(name);
    if (p == nullptr) {
      throw CheckpointMismatch("checkpoint: parameter '" + name + "' not present in model", name);
    }
    if (p->value.shape() != shape) {
      throw CheckpointMismatch("checkpoint: parameter '" + name + "' has shape " +
                                   shape_str(shape) + " but model expects " +
                                   shape_str(p->value.shape()),
                               name);
    }
    for (std::int64_t i = 0; i < p->value.numel(); ++i) {
      p->value[i] = static_cast<S>(detail::read_pod<float>(is, offset, "payload"));
    }
    seen[static_cast<std::size_t>(p->id)] = true;
  }
  for (const auto& p : store) {
    if (!seen[static_cast<std::size_t>(p->id)]) {
      throw CheckpointMismatch("checkpoint: parameter '" + p->name + "' missing from file",
                               p->name);
    }
  }
}

template <typename S>
void load_checkpoint(ParameterStore<S>& store, const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("checkpoint: cannot open '" + path + "' for reading");
  load_checkpoint(store, is);
}

}  // namespace stgaze
