#pragma once

// DPDF1 checkpoints: every named entry of a parameter store (trainable
// weights and batch-norm buffers) with the model family and a hash of the
// configuration that built it.
//
//   "DPDF1"            5 bytes
//   family tag         u32
//   config hash        u64
//   entry count        u32
//   per entry:         name (u32 length + bytes), rank u32, dims u64 x rank,
//                      values f64 x product(dims)
//
// All integers and floats are little-endian.

#include <cstdio>
#include <cstring>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "dpdf/binary_io.hpp"
#include "dpdf/errors.hpp"
#include "dpdf/model.hpp"

namespace dpdf {

inline constexpr char kCheckpointMagic[5] = {'D', 'P', 'D', 'F', '1'};

inline void write_checkpoint(std::ostream& os, const ParameterStore& store, ModelFamily family,
                             std::uint64_t config_hash) {
  os.write(kCheckpointMagic, 5);
  io::put_u32(os, static_cast<std::uint32_t>(family));
  io::put_u64(os, config_hash);
  io::put_u32(os, static_cast<std::uint32_t>(store.size()));
  for (const auto& e : store.entries()) {
    io::put_string(os, e.name);
    io::put_u32(os, static_cast<std::uint32_t>(e.tensor.rank()));
    for (auto d : e.tensor.shape()) io::put_u64(os, d);
    for (double v : e.tensor.data()) io::put_f64(os, v);
  }
}

inline void save_checkpoint(const std::string& path, const ParameterStore& store, ModelFamily family,
                            std::uint64_t config_hash) {
  // Write to a sibling file first so a crash never leaves a torn checkpoint.
  const std::string tmp = path + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw std::runtime_error("cannot open '" + tmp + "' for writing");
    write_checkpoint(os, store, family, config_hash);
    if (!os) throw std::runtime_error("write to '" + tmp + "' failed");
  }
  if (std::rename(tmp.c_str(), path.c_str()) != 0) throw std::runtime_error("cannot move checkpoint to '" + path + "'");
}

/// Reads a checkpoint into `store`. The file must carry the same family,
/// the same config hash and exactly the store's entry names and shapes.
inline void read_checkpoint(std::istream& is, ParameterStore& store, ModelFamily family, std::uint64_t config_hash) {
  char magic[5];
  io::read_exact(is, magic, 5, "checkpoint magic");
  if (std::memcmp(magic, kCheckpointMagic, 5) != 0) throw ParseError("checkpoint: bad magic, not a DPDF1 file");
  const auto tag = io::get_u32(is, "checkpoint family");
  if (tag != static_cast<std::uint32_t>(family))
    throw ContractViolation("checkpoint: family tag " + std::to_string(tag) + " does not match model family '" +
                            to_string(family) + "'");
  const auto hash = io::get_u64(is, "checkpoint config hash");
  if (hash != config_hash) throw ContractViolation("checkpoint: configuration hash mismatch, refusing to load");
  const auto count = io::get_u32(is, "checkpoint entry count");
  if (count != store.size())
    throw ParseError("checkpoint: " + std::to_string(count) + " entries, model expects " + std::to_string(store.size()));
  struct Pending {
    std::string name;
    Shape shape;
    std::vector<double> values;
  };
  std::vector<Pending> pending;
  for (std::uint32_t i = 0; i < count; ++i) {
    Pending p;
    p.name = io::get_string(is, "checkpoint entry name", 4096);
    if (!store.contains(p.name)) throw ParseError("checkpoint: unknown entry '" + p.name + "'");
    const auto rank = io::get_u32(is, "checkpoint entry rank");
    if (rank > 8) throw ParseError("checkpoint: implausible rank for '" + p.name + "'");
    for (std::uint32_t r = 0; r < rank; ++r) p.shape.push_back(io::get_u64(is, "checkpoint entry dims"));
    if (p.shape != store.get(p.name).shape())
      throw ParseError("checkpoint: shape of '" + p.name + "' is " + to_string(p.shape) + ", model expects " +
                       to_string(store.get(p.name).shape()));
    p.values.resize(numel_of(p.shape));
    for (auto& v : p.values) v = io::get_f64(is, "checkpoint entry values");
    pending.push_back(std::move(p));
  }
  if (is.peek() != std::char_traits<char>::eof()) throw ParseError("checkpoint: trailing bytes after last entry");
  // Only touch the store once the whole file has parsed.
  for (const auto& p : pending) store.assign(p.name, p.shape, p.values);
}

inline void load_checkpoint(const std::string& path, ParameterStore& store, ModelFamily family,
                            std::uint64_t config_hash) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open checkpoint '" + path + "'");
  read_checkpoint(is, store, family, config_hash);
}

/// In-memory copy of every entry, for restoring the last good state.
inline std::vector<std::vector<double>> snapshot(const ParameterStore& store) {
  std::vector<std::vector<double>> out;
  for (const auto& e : store.entries()) out.push_back(e.tensor.to_vector());
  return out;
}

inline void restore(ParameterStore& store, const std::vector<std::vector<double>>& snap) {
  if (snap.size() != store.size()) throw ContractViolation("restore: snapshot does not match the store");
  for (std::size_t i = 0; i < snap.size(); ++i) {
    const auto& e = store.entries()[i];
    store.assign(e.name, e.tensor.shape(), snap[i]);
  }
}

}  // namespace dpdf
