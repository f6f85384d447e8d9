#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "texrect/module.hpp"
#include "texrect/optim.hpp"

namespace texrect {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct ParameterBlock {
  std::string name;
  Shape shape;
  std::vector<float> values;
};

struct OptimizerState {
  std::int64_t step = 0;
  std::vector<std::vector<float>> m, v;  ///< per trainable tensor, in parameter order
};

/// On-disk layout, all integers little-endian:
///   "TXRC" u8(version)
///   str(fingerprint)  u32(n) n x [str(key) str(value)]
///   u32(n) n x [str(name) u32(rank) rank x u64(dim) numel x f32]
///   u8(has_optimizer) [i64(step) u32(n) n x [u64(len) len x f32 (m), len x f32 (v)]]
/// where str = u32(length) + bytes.
struct Checkpoint {
  static constexpr std::uint8_t kVersion = 1;

  std::string fingerprint;
  std::map<std::string, std::string> meta;
  std::vector<ParameterBlock> params;
  std::optional<OptimizerState> optimizer;

  const ParameterBlock* find(const std::string& name) const {
    for (const auto& p : params)
      if (p.name == name) return &p;
    return nullptr;
  }
};

template <typename T>
std::vector<ParameterBlock> capture_parameters(const ParameterList<T>& list) {
  std::vector<ParameterBlock> out;
  for (const auto& it : list.items()) {
    ParameterBlock b{it.name, it.tensor.shape(), {}};
    b.values.assign(it.tensor.data().begin(), it.tensor.data().end());
    out.push_back(std::move(b));
  }
  return out;
}

/// Copies stored values into the tensors of `list` (matched by name). Every
/// tensor in `list` must be present with the same shape.
template <typename T>
void restore_parameters(const ParameterList<T>& list, const Checkpoint& ckpt) {
  for (const auto& it : list.items()) {
    const ParameterBlock* b = ckpt.find(it.name);
    if (!b) throw CheckpointError("checkpoint lacks parameter '" + it.name + "'");
    if (b->shape != it.tensor.shape()) {
      throw CheckpointError("parameter '" + it.name + "': checkpoint shape " + shape_str(b->shape) +
                            " vs model shape " + shape_str(it.tensor.shape()));
    }
    Tensor<T> t = it.tensor;
    auto dst = t.mutable_data();
    for (std::size_t i = 0; i < b->values.size(); ++i) dst[i] = static_cast<T>(b->values[i]);
  }
}

template <typename T>
OptimizerState capture_optimizer(const Adam<T>& opt) {
  OptimizerState s;
  s.step = opt.steps();
  for (const auto& mo : opt.moments()) {
    s.m.emplace_back(mo.m.begin(), mo.m.end());
    s.v.emplace_back(mo.v.begin(), mo.v.end());
  }
  return s;
}

template <typename T>
void restore_optimizer(Adam<T>& opt, const OptimizerState& s) {
  if (s.m.size() != opt.moments().size()) {
    throw CheckpointError("optimizer state holds " + std::to_string(s.m.size()) + " tensors, model has " +
                          std::to_string(opt.moments().size()));
  }
  opt.set_steps(s.step);
  for (std::size_t i = 0; i < s.m.size(); ++i) {
    opt.moments()[i].m.assign(s.m[i].begin(), s.m[i].end());
    opt.moments()[i].v.assign(s.v[i].begin(), s.v[i].end());
  }
}

namespace detail {

class Writer {
 public:
  explicit Writer(std::ofstream& out) : out_(out) {}
  template <typename I>
  void num(I v) {
    out_.write(reinterpret_cast<const char*>(&v), sizeof(v));
  }
  void str(const std::string& s) {
    num<std::uint32_t>(static_cast<std::uint32_t>(s.size()));
    out_.write(s.data(), static_cast<std::streamsize>(s.size()));
  }
  void floats(const std::vector<float>& v) {
    out_.write(reinterpret_cast<const char*>(v.data()), static_cast<std::streamsize>(v.size() * sizeof(float)));
  }

 private:
  std::ofstream& out_;
};

class Reader {
 public:
  Reader(std::ifstream& in, std::string path) : in_(in), path_(std::move(path)) {}
  template <typename I>
  I num() {
    I v{};
    in_.read(reinterpret_cast<char*>(&v), sizeof(v));
    check();
    return v;
  }
  std::string str() {
    const auto n = num<std::uint32_t>();
    if (n > (1u << 28)) throw CheckpointError(path_ + ": corrupt string length");
    std::string s(n, '\0');
    in_.read(s.data(), n);
    check();
    return s;
  }
  std::vector<float> floats(std::uint64_t n) {
    if (n > (std::uint64_t(1) << 34)) throw CheckpointError(path_ + ": corrupt tensor size");
    std::vector<float> v(n);
    in_.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(n * sizeof(float)));
    check();
    return v;
  }

 private:
  void check() {
    if (!in_) throw CheckpointError(path_ + ": truncated checkpoint");
  }
  std::ifstream& in_;
  std::string path_;
};

}  // namespace detail

/// Writes to a temporary sibling and renames it over `path`, so a failed
/// write never leaves a partial checkpoint behind.
inline void save_checkpoint(const std::filesystem::path& path, const Checkpoint& c) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const std::filesystem::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw CheckpointError("cannot open " + tmp.string() + " for writing");
    detail::Writer w(out);
    out.write("TXRC", 4);
    w.num<std::uint8_t>(Checkpoint::kVersion);
    w.str(c.fingerprint);
    w.num<std::uint32_t>(static_cast<std::uint32_t>(c.meta.size()));
    for (const auto& [k, v] : c.meta) {
      w.str(k);
      w.str(v);
    }
    w.num<std::uint32_t>(static_cast<std::uint32_t>(c.params.size()));
    for (const auto& p : c.params) {
      w.str(p.name);
      w.num<std::uint32_t>(static_cast<std::uint32_t>(p.shape.size()));
      for (Index d : p.shape) w.num<std::uint64_t>(static_cast<std::uint64_t>(d));
      w.floats(p.values);
    }
    w.num<std::uint8_t>(c.optimizer ? 1 : 0);
    if (c.optimizer) {
      w.num<std::int64_t>(c.optimizer->step);
      w.num<std::uint32_t>(static_cast<std::uint32_t>(c.optimizer->m.size()));
      for (std::size_t i = 0; i < c.optimizer->m.size(); ++i) {
        w.num<std::uint64_t>(c.optimizer->m[i].size());
        w.floats(c.optimizer->m[i]);
        w.floats(c.optimizer->v[i]);
      }
    }
    out.flush();
    if (!out) {
      out.close();
      std::filesystem::remove(tmp);
      throw CheckpointError("write to " + tmp.string() + " failed (disk full?)");
    }
  }
  std::filesystem::rename(tmp, path);
}

/// Reads a checkpoint. A non-empty `expected_fingerprint` that differs from
/// the stored one is an error unless `force` is set.
inline Checkpoint load_checkpoint(const std::filesystem::path& path, const std::string& expected_fingerprint = "",
                                  bool force = false) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("checkpoint not found: " + path.string());
  char magic[4];
  in.read(magic, 4);
  if (!in || std::memcmp(magic, "TXRC", 4) != 0) throw CheckpointError(path.string() + ": not a texrect checkpoint");
  detail::Reader r(in, path.string());
  const auto version = r.num<std::uint8_t>();
  if (version != Checkpoint::kVersion) {
    throw CheckpointError(path.string() + ": unsupported checkpoint version " + std::to_string(version));
  }
  Checkpoint c;
  c.fingerprint = r.str();
  if (!expected_fingerprint.empty() && c.fingerprint != expected_fingerprint && !force) {
    throw CheckpointError(path.string() + ": config fingerprint " + c.fingerprint + " does not match " +
                          expected_fingerprint + " (use --force to load anyway)");
  }
  const auto nmeta = r.num<std::uint32_t>();
  for (std::uint32_t i = 0; i < nmeta; ++i) {
    std::string k = r.str();
    c.meta[k] = r.str();
  }
  const auto nparams = r.num<std::uint32_t>();
  for (std::uint32_t i = 0; i < nparams; ++i) {
    ParameterBlock p;
    p.name = r.str();
    const auto rank = r.num<std::uint32_t>();
    if (rank > 8) throw CheckpointError(path.string() + ": corrupt rank for " + p.name);
    std::uint64_t n = 1;
    for (std::uint32_t d = 0; d < rank; ++d) {
      p.shape.push_back(static_cast<Index>(r.num<std::uint64_t>()));
      n *= static_cast<std::uint64_t>(p.shape.back());
    }
    p.values = r.floats(n);
    c.params.push_back(std::move(p));
  }
  if (r.num<std::uint8_t>()) {
    OptimizerState s;
    s.step = r.num<std::int64_t>();
    const auto n = r.num<std::uint32_t>();
    for (std::uint32_t i = 0; i < n; ++i) {
      const auto len = r.num<std::uint64_t>();
      s.m.push_back(r.floats(len));
      s.v.push_back(r.floats(len));
    }
    c.optimizer = std::move(s);
  }
  return c;
}

}  // namespace texrect
