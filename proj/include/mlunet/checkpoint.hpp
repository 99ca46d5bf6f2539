#pragma once

// Binary layout (all integers little-endian):
//   "MLUNETCK" | u32 version | u64 seed | u32 len + config JSON
//   | u32 count | count × { u32 len + name | u32 rank | rank × u64 dim | f32 values }
// Batch-norm buffers are stored as "<name>.running_mean" / "<name>.running_var".

#include <bit>
#include <cstring>
#include <fstream>

#include "mlunet/net.hpp"

namespace mlunet {

inline constexpr char kCheckpointMagic[8] = {'M', 'L', 'U', 'N', 'E', 'T', 'C', 'K'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

template <typename U>
void put_le(std::ostream& out, U v) {
  static_assert(std::is_integral_v<U>);
  unsigned char b[sizeof(U)];
  for (std::size_t i = 0; i < sizeof(U); ++i) b[i] = static_cast<unsigned char>((static_cast<std::uint64_t>(v) >> (8 * i)) & 0xff);
  out.write(reinterpret_cast<const char*>(b), sizeof(U));
}

template <typename U>
U get_le(std::istream& in) {
  unsigned char b[sizeof(U)];
  in.read(reinterpret_cast<char*>(b), sizeof(U));
  if (!in) throw IoError("checkpoint truncated");
  std::uint64_t v = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return static_cast<U>(v);
}

inline void put_str(std::ostream& out, const std::string& s) {
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(s.size()));
  out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline std::string get_str(std::istream& in) {
  const auto n = get_le<std::uint32_t>(in);
  std::string s(n, '\0');
  in.read(s.data(), n);
  if (!in) throw IoError("checkpoint truncated");
  return s;
}

template <typename T>
void put_array(std::ostream& out, const std::string& name, const Shape& shape, std::span<const T> v) {
  put_str(out, name);
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(shape.size()));
  for (auto d : shape) put_le<std::uint64_t>(out, d);
  for (T x : v) put_le<std::uint32_t>(out, std::bit_cast<std::uint32_t>(static_cast<float>(x)));
}

}  // namespace detail

template <typename T>
void save_checkpoint(const Model<T>& m, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write checkpoint: " + path);
  out.write(kCheckpointMagic, 8);
  detail::put_le<std::uint32_t>(out, kCheckpointVersion);
  detail::put_le<std::uint64_t>(out, m.seed);
  detail::put_str(out, nlohmann::json(m.config).dump());
  const auto& ps = m.store.params();
  const auto& bs = m.store.bn_states();
  detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(ps.size() + 2 * bs.size()));
  for (auto& p : ps) detail::put_array<T>(out, p.name, p.tensor.shape(), p.tensor.data());
  for (auto& [name, st] : bs) {
    const Shape s{st->running_mean.size()};
    detail::put_array<T>(out, name + ".running_mean", s, st->running_mean);
    detail::put_array<T>(out, name + ".running_var", s, st->running_var);
  }
  if (!out) throw IoError("failed writing checkpoint: " + path);
}

/// Reads only the header of a checkpoint.
inline std::pair<ModelConfig, std::uint64_t> read_checkpoint_header(std::istream& in, const std::string& path) {
  char magic[8];
  in.read(magic, 8);
  if (!in || std::memcmp(magic, kCheckpointMagic, 8) != 0) throw IoError("not a checkpoint file: " + path);
  const auto version = detail::get_le<std::uint32_t>(in);
  if (version != kCheckpointVersion) throw IoError("unsupported checkpoint version " + std::to_string(version));
  const auto seed = detail::get_le<std::uint64_t>(in);
  ModelConfig cfg = nlohmann::json::parse(detail::get_str(in)).get<ModelConfig>();
  return {cfg, seed};
}

template <typename T>
std::unique_ptr<Model<T>> load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint: " + path);
  auto [cfg, seed] = read_checkpoint_header(in, path);
  auto m = build_model<T>(cfg, seed);
  std::map<std::string, std::vector<T>*> targets;
  std::map<std::string, Shape> shapes;
  for (auto& p : m->store.params()) {
    Tensor<T> t = p.tensor;
    targets[p.name] = &t.values();
    shapes[p.name] = t.shape();
  }
  for (auto& [name, st] : m->store.bn_states()) {
    targets[name + ".running_mean"] = &st->running_mean;
    targets[name + ".running_var"] = &st->running_var;
    shapes[name + ".running_mean"] = shapes[name + ".running_var"] = Shape{st->running_mean.size()};
  }
  const auto count = detail::get_le<std::uint32_t>(in);
  if (count != targets.size())
    throw IoError("checkpoint has " + std::to_string(count) + " arrays, model expects " + std::to_string(targets.size()));
  std::size_t seen = 0;
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto name = detail::get_str(in);
    const auto rank = detail::get_le<std::uint32_t>(in);
    Shape s(rank);
    for (auto& d : s) d = detail::get_le<std::uint64_t>(in);
    auto it = targets.find(name);
    if (it == targets.end()) throw IoError("checkpoint array not in model: " + name);
    if (shapes[name] != s) throw IoError("checkpoint shape mismatch for " + name);
    auto& dst = *it->second;
    for (auto& v : dst) v = static_cast<T>(std::bit_cast<float>(detail::get_le<std::uint32_t>(in)));
    ++seen;
  }
  if (seen != targets.size()) throw IoError("checkpoint incomplete");
  return m;
}

}  // namespace mlunet
