#pragma once

#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "diar/error.hpp"
#include "diar/rng.hpp"
#include "diar/tensor.hpp"

namespace diar {

template <typename T>
using Gradients = std::map<std::string, Tensor<T>>;

/// Named parameters plus Adam moment accumulators.
template <typename T>
class ParamStore {
 public:
  struct Entry {
    Tensor<T> value;
    Tensor<T> m;
    Tensor<T> v;
  };

  void add(const std::string& name, Tensor<T> value) {
    if (entries_.count(name)) throw Error("duplicate parameter '" + name + "'");
    const Shape shape = value.shape();
    entries_.emplace(name, Entry{std::move(value), Tensor<T>(shape), Tensor<T>(shape)});
  }

  bool contains(const std::string& name) const { return entries_.count(name) != 0; }

  const Tensor<T>& get(const std::string& name) const { return entry(name).value; }
  Tensor<T>& get_mut(const std::string& name) { return entries_.at(checked(name)).value; }

  const Entry& entry(const std::string& name) const { return entries_.at(checked(name)); }
  Entry& entry_mut(const std::string& name) { return entries_.at(checked(name)); }

  const std::map<std::string, Entry>& entries() const { return entries_; }
  std::size_t size() const { return entries_.size(); }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& [_, e] : entries_) n += e.value.size();
    return n;
  }

  std::uint64_t step() const { return step_; }
  void advance_step() { ++step_; }

 private:
  const std::string& checked(const std::string& name) const {
    if (!entries_.count(name)) throw Error("unknown parameter '" + name + "'");
    return name;
  }

  std::map<std::string, Entry> entries_;
  std::uint64_t step_ = 0;
};

struct AdamConfig {
  double lr = 0.001;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Bias-corrected Adam update of every parameter in `store`.
template <typename T>
void adam_step(ParamStore<T>& store, const Gradients<T>& grads, const AdamConfig& cfg) {
  for (const auto& [name, e] : store.entries()) {
    auto it = grads.find(name);
    if (it == grads.end()) throw Error("adam_step: missing gradient for parameter '" + name + "'");
    if (it->second.shape() != e.value.shape()) {
      throw ShapeError("adam_step: gradient for '" + name + "' has shape " + shape_str(it->second.shape()) +
                       ", parameter has " + shape_str(e.value.shape()));
    }
  }
  store.advance_step();
  const double t = static_cast<double>(store.step());
  const double c1 = 1.0 - std::pow(cfg.beta1, t);
  const double c2 = 1.0 - std::pow(cfg.beta2, t);
  for (const auto& [name, _] : store.entries()) {
    auto& e = store.entry_mut(name);
    const auto& g = grads.at(name);
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double gi = static_cast<double>(g[i]);
      const double m = cfg.beta1 * static_cast<double>(e.m[i]) + (1.0 - cfg.beta1) * gi;
      const double v = cfg.beta2 * static_cast<double>(e.v[i]) + (1.0 - cfg.beta2) * gi * gi;
      e.m[i] = static_cast<T>(m);
      e.v[i] = static_cast<T>(v);
      const double update = cfg.lr * (m / c1) / (std::sqrt(v / c2) + cfg.eps);
      e.value[i] = static_cast<T>(static_cast<double>(e.value[i]) - update);
    }
  }
}

/// Exposes the parameters of a store as leaves on one tape. Each name is
/// bound at most once, so repeated uses share one gradient slot.
template <typename T>
class ParamBinding {
 public:
  ParamBinding(Tape<T>& tape, const ParamStore<T>& store, bool trainable = true)
      : tape_(tape), store_(store), trainable_(trainable) {}

  Var<T> operator()(const std::string& name) {
    auto it = bound_.find(name);
    if (it != bound_.end()) return it->second;
    const auto& value = store_.get(name);
    Var<T> v = trainable_ ? tape_.leaf(value) : tape_.constant(value);
    bound_.emplace(name, v);
    return v;
  }

  // Gradients for every stored parameter; unbound parameters get zeros.
  Gradients<T> gradients() {
    Gradients<T> out;
    for (const auto& [name, e] : store_.entries()) {
      auto it = bound_.find(name);
      out.emplace(name, it == bound_.end() ? Tensor<T>(e.value.shape()) : tape_.grad(it->second.id()));
    }
    return out;
  }

 private:
  Tape<T>& tape_;
  const ParamStore<T>& store_;
  bool trainable_;
  std::map<std::string, Var<T>> bound_;
};

/// Fan-in scaled uniform initialization, U(−√(6/fan_in), √(6/fan_in)).
template <typename T>
Tensor<T> he_uniform(Shape shape, std::size_t fan_in, Rng& rng) {
  Tensor<T> out(std::move(shape));
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
  for (auto& v : out.data()) v = static_cast<T>(rng.uniform(-bound, bound));
  return out;
}

// ---------------------------------------------------------------------------
// Checkpoints: "DIARW1", u32 count, then per parameter u32 name length, name
// bytes, u32 rank, u32 extents, float32 values. All integers and floats are
// little-endian.

namespace detail {

inline void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline void put_f32(std::string& out, float f) { put_u32(out, std::bit_cast<std::uint32_t>(f)); }

class ByteReader {
 public:
  ByteReader(const std::string& data, std::string path) : data_(data), path_(std::move(path)) {}

  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(data_[pos_ + i])) << (8 * i);
    pos_ += 4;
    return v;
  }

  float f32() { return std::bit_cast<float>(u32()); }

  std::string bytes(std::size_t n) {
    need(n);
    std::string s = data_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  bool done() const { return pos_ == data_.size(); }
  std::size_t pos() const { return pos_; }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > data_.size()) {
      throw ParseError(path_ + ": truncated checkpoint at byte " + std::to_string(pos_));
    }
  }

  const std::string& data_;
  std::string path_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline constexpr char kCheckpointMagic[] = "DIARW1";

template <typename T>
std::string encode_checkpoint(const ParamStore<T>& store) {
  std::string out(kCheckpointMagic, 6);
  detail::put_u32(out, static_cast<std::uint32_t>(store.size()));
  for (const auto& [name, e] : store.entries()) {
    detail::put_u32(out, static_cast<std::uint32_t>(name.size()));
    out += name;
    detail::put_u32(out, static_cast<std::uint32_t>(e.value.rank()));
    for (auto d : e.value.shape()) detail::put_u32(out, static_cast<std::uint32_t>(d));
    for (auto v : e.value.data()) detail::put_f32(out, static_cast<float>(v));
  }
  return out;
}

template <typename T>
void save_checkpoint(const ParamStore<T>& store, const std::string& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open '" + path + "' for writing");
  const std::string bytes = encode_checkpoint(store);
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw IoError("write failed for '" + path + "'");
}

template <typename T>
ParamStore<T> decode_checkpoint(const std::string& bytes, const std::string& origin = "checkpoint") {
  detail::ByteReader r(bytes, origin);
  if (r.bytes(6) != std::string(kCheckpointMagic, 6)) throw ParseError(origin + ": bad checkpoint magic");
  const std::uint32_t count = r.u32();
  ParamStore<T> store;
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::string name = r.bytes(r.u32());
    const std::uint32_t rank = r.u32();
    if (rank == 0 || rank > 8) throw ParseError(origin + ": parameter '" + name + "' has invalid rank");
    Shape shape;
    for (std::uint32_t d = 0; d < rank; ++d) shape.push_back(r.u32());
    Tensor<T> value(shape);
    for (auto& v : value.data()) v = static_cast<T>(r.f32());
    store.add(name, std::move(value));
  }
  if (!r.done()) throw ParseError(origin + ": trailing bytes after byte " + std::to_string(r.pos()));
  return store;
}

template <typename T>
ParamStore<T> load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open checkpoint '" + path + "'");
  std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return decode_checkpoint<T>(bytes, path);
}

/// Copies values from `loaded` into `target`, requiring identical names and
/// shapes.
template <typename T>
void assign_parameters(ParamStore<T>& target, const ParamStore<T>& loaded) {
  std::vector<std::string> problems;
  for (const auto& [name, e] : target.entries()) {
    if (!loaded.contains(name)) {
      problems.push_back("missing '" + name + "'");
    } else if (loaded.get(name).shape() != e.value.shape()) {
      problems.push_back("'" + name + "' has shape " + shape_str(loaded.get(name).shape()) + ", expected " +
                         shape_str(e.value.shape()));
    }
  }
  for (const auto& [name, _] : loaded.entries()) {
    if (!target.contains(name)) problems.push_back("unexpected '" + name + "'");
  }
  if (!problems.empty()) {
    std::string msg = "checkpoint mismatch:";
    for (const auto& p : problems) msg += " " + p + ";";
    throw ShapeError(msg);
  }
  for (const auto& [name, _] : target.entries()) target.get_mut(name) = loaded.get(name);
}

}  // namespace diar
