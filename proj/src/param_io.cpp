#include "mcmfh/param_io.hpp"

#include <bit>
#include <cstdio>
#include <unordered_map>

#include "mcmfh/binary_io.hpp"
#include "mcmfh/errors.hpp"
#include "mcmfh/rng.hpp"

namespace mcmfh {

void write_params(const std::filesystem::path& path, const ParamList& params) {
  bin::Writer w;
  w.bytes("MPD1");
  w.u32(static_cast<std::uint32_t>(params.size()));
  for (const auto& p : params) {
    w.u32(static_cast<std::uint32_t>(p.name.size()));
    w.bytes(p.name);
    const Tensor& t = p.var.value();
    w.u32(static_cast<std::uint32_t>(t.rank()));
    for (auto d : t.shape()) w.u64(d);
    for (double v : t.data()) w.f64(v);
  }
  w.save(path);
}

std::vector<LoadedParam> read_params(const std::filesystem::path& path) {
  bin::Reader in(bin::read_file(path));
  auto need = [&](std::size_t n) {
    if (!in.has(n)) throw DataError(path.string() + ": truncated parameter dump");
  };
  need(8);
  if (in.bytes(4) != "MPD1") throw DataError(path.string() + ": not a parameter dump (bad magic)");
  const std::uint32_t count = in.u32();
  std::vector<LoadedParam> out;
  for (std::uint32_t i = 0; i < count; ++i) {
    need(4);
    const std::uint32_t name_len = in.u32();
    need(name_len + 4);
    LoadedParam p;
    p.name = in.bytes(name_len);
    const std::uint32_t rank = in.u32();
    if (rank > 8) throw DataError(path.string() + ": implausible tensor rank");
    need(8ull * rank);
    Shape shape(rank);
    for (auto& d : shape) d = in.u64();
    const std::size_t n = shape_numel(shape);
    if (n > in.remaining() / 8) throw DataError(path.string() + ": truncated values for " + p.name);
    std::vector<double> values(n);
    for (double& v : values) v = in.f64();
    p.value = Tensor(std::move(shape), std::move(values));
    out.push_back(std::move(p));
  }
  if (in.remaining() != 0) throw DataError(path.string() + ": trailing bytes in parameter dump");
  return out;
}

void load_params(const ParamList& params, const std::vector<LoadedParam>& loaded) {
  std::unordered_map<std::string, const Tensor*> by_name;
  for (const auto& p : loaded) by_name[p.name] = &p.value;
  if (by_name.size() != params.size()) {
    throw DataError("parameter dump holds " + std::to_string(by_name.size()) + " tensors, model expects " +
                    std::to_string(params.size()));
  }
  for (const auto& p : params) {
    auto it = by_name.find(p.name);
    if (it == by_name.end()) throw DataError("parameter dump is missing " + p.name);
    if (it->second->shape() != p.var.shape()) {
      throw DataError("parameter " + p.name + " has shape " + shape_string(it->second->shape()) + ", model expects " +
                      shape_string(p.var.shape()));
    }
    ad::Var v = p.var;
    v.mutable_value() = *it->second;
  }
}

std::string param_checksum(const ParamList& params) {
  std::uint64_t h = fnv1a64("");
  auto feed = [&h](std::uint64_t v) {
    for (int b = 0; b < 8; ++b) {
      h ^= (v >> (8 * b)) & 0xFF;
      h *= 0x100000001B3ULL;
    }
  };
  for (const auto& p : params) {
    for (unsigned char c : p.name) {
      h ^= c;
      h *= 0x100000001B3ULL;
    }
    for (auto d : p.var.shape()) feed(d);
    for (double v : p.var.value().data()) feed(std::bit_cast<std::uint64_t>(v));
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

}  // namespace mcmfh
